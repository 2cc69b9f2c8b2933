//! Focal region loss and plain L1.
//!
//! Each region's difficulty is its mean absolute error `e_i`; weights are
//! `w_i = e_i^δ / max_j e_j^δ` (all zero when every `e_j` is zero). The loss
//! is the per-pixel mean of `(1 + γ·w_{r(p)})·|pred_p − target_p|`. Weights
//! are recomputed from the current prediction but carry no gradient.

use crate::error::{dim_err, Error, Result};
use crate::region::RegionPartition;
use crate::tensor::{Graph, Real, Tensor, Var};

pub const DEFAULT_GAMMA: f64 = 1e-3;
pub const DEFAULT_DELTA: f64 = 1.0;

/// Per-region difficulty and weight behind one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionLossReport {
    pub region_mae: Vec<f64>,
    pub weights: Vec<f64>,
    pub loss: f64,
    pub gamma: f64,
    pub delta: f64,
}

/// Pixels per channel for `[.., H, W]` inputs that match `part`.
fn check_inputs<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    part: &RegionPartition,
) -> Result<usize> {
    if pred.shape() != target.shape() {
        return Err(dim_err!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    let s = pred.shape();
    if s.len() < 2 || s[s.len() - 2] != part.height() || s[s.len() - 1] != part.width() {
        return Err(dim_err!(
            "image {:?} does not match {}x{} partition",
            s,
            part.height(),
            part.width()
        ));
    }
    if pred.has_non_finite() || target.has_non_finite() {
        return Err(Error::Numeric("non-finite value in loss input".into()));
    }
    Ok(part.height() * part.width())
}

fn check_coeffs(gamma: f64, delta: f64) -> Result<()> {
    if !(gamma >= 0.0 && gamma.is_finite()) || !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::Config(format!(
            "focal loss needs finite γ ≥ 0 and δ ≥ 0, got γ={gamma} δ={delta}"
        )));
    }
    Ok(())
}

/// Mean absolute error inside each region, over all channels.
pub fn region_mae<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    part: &RegionPartition,
) -> Result<Vec<f64>> {
    let hw = check_inputs(pred, target, part)?;
    let mut sums = vec![0.0f64; part.num_regions()];
    let mut counts = vec![0usize; part.num_regions()];
    let labels = part.labels();
    for (k, (p, t)) in pred.data().iter().zip(target.data()).enumerate() {
        let r = labels[k % hw] as usize;
        sums[r] += (p.f64() - t.f64()).abs();
        counts[r] += 1;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s / n as f64)
        .collect())
}

/// `w_i = e_i^δ / max_j e_j^δ`.
pub fn weights_from_errors(errors: &[f64], delta: f64) -> Vec<f64> {
    let powered: Vec<f64> = errors.iter().map(|e| e.powf(delta)).collect();
    let max = powered.iter().copied().fold(0.0f64, f64::max);
    if errors.iter().all(|&e| e == 0.0) || max == 0.0 {
        return vec![0.0; errors.len()];
    }
    powered.iter().map(|p| p / max).collect()
}

pub fn region_weights<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    part: &RegionPartition,
    delta: f64,
) -> Result<Vec<f64>> {
    check_coeffs(0.0, delta)?;
    Ok(weights_from_errors(&region_mae(pred, target, part)?, delta))
}

/// Per-pixel factor `1 + γ·w_{r(p)}` broadcast over the leading dims.
fn pixel_scale<T: Real>(
    shape: &[usize],
    part: &RegionPartition,
    weights: &[f64],
    gamma: f64,
) -> Tensor<T> {
    let labels = part.labels();
    let hw = labels.len();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|k| T::lit(1.0 + gamma * weights[labels[k % hw] as usize]))
        .collect();
    Tensor::new(shape, data).expect("shape product matches data length")
}

/// `mean((1 + γ·w_{r(p)}) · |pred − target|)` for fixed `weights`.
pub fn weighted_l1_value<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    part: &RegionPartition,
    weights: &[f64],
    gamma: f64,
) -> Result<f64> {
    check_inputs(pred, target, part)?;
    if weights.len() != part.num_regions() {
        return Err(dim_err!(
            "{} weights for {} regions",
            weights.len(),
            part.num_regions()
        ));
    }
    let scale = pixel_scale::<T>(pred.shape(), part, weights, gamma);
    let mut total = T::zero();
    for ((p, t), s) in pred.data().iter().zip(target.data()).zip(scale.data()) {
        total = total + (*p - *t).abs() * *s;
    }
    Ok((total / T::lit(pred.numel() as f64)).f64())
}

/// Loss value and report without building a graph.
pub fn focal_region_loss_value<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    part: &RegionPartition,
    gamma: f64,
    delta: f64,
) -> Result<RegionLossReport> {
    check_coeffs(gamma, delta)?;
    let region_mae = region_mae(pred, target, part)?;
    let weights = weights_from_errors(&region_mae, delta);
    let loss = weighted_l1_value(pred, target, part, &weights, gamma)?;
    Ok(RegionLossReport {
        region_mae,
        weights,
        loss,
        gamma,
        delta,
    })
}

/// Differentiable focal region loss of `pred` against a constant target.
/// Weights come from the current value of `pred` and are held constant.
pub fn focal_region_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    part: &RegionPartition,
    gamma: f64,
    delta: f64,
) -> Result<(Var, RegionLossReport)> {
    check_coeffs(gamma, delta)?;
    let region_mae = region_mae(g.value(pred), target, part)?;
    let weights = weights_from_errors(&region_mae, delta);
    let loss = weighted_l1(g, pred, target, part, &weights, gamma)?;
    let report = RegionLossReport {
        region_mae,
        weights,
        loss: g.value(loss).data()[0].f64(),
        gamma,
        delta,
    };
    Ok((loss, report))
}

/// Graph form of [`weighted_l1_value`].
pub fn weighted_l1<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    part: &RegionPartition,
    weights: &[f64],
    gamma: f64,
) -> Result<Var> {
    check_inputs(g.value(pred), target, part)?;
    if weights.len() != part.num_regions() {
        return Err(dim_err!(
            "{} weights for {} regions",
            weights.len(),
            part.num_regions()
        ));
    }
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let a = g.abs(d);
    let s = g.constant(pixel_scale::<T>(target.shape(), part, weights, gamma));
    let m = g.mul(a, s)?;
    Ok(g.mean(m))
}

/// Differentiable mean absolute error.
pub fn l1_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(dim_err!(
            "prediction {:?} vs target {:?}",
            g.shape(pred),
            target.shape()
        ));
    }
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Mean absolute error, summed in `T` in storage order like [`l1_loss`].
pub fn l1<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(dim_err!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    let mut total = T::zero();
    for (p, t) in pred.data().iter().zip(target.data()) {
        total = total + (*p - *t).abs();
    }
    Ok((total / T::lit(pred.numel() as f64)).f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_region_weights_and_loss() {
        let part = RegionPartition::new(1, 2, vec![0, 1], 2).unwrap();
        let target = Tensor::<f64>::from_f64(&[1, 1, 2], &[0.5, 0.5]).unwrap();
        let pred = Tensor::<f64>::from_f64(&[1, 1, 2], &[0.6, 0.9]).unwrap();
        let w = region_weights(&pred, &target, &part, 1.0).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-12 && w[1] == 1.0);
        let r = focal_region_loss_value(&pred, &target, &part, 1.0, 1.0).unwrap();
        assert!((r.loss - 0.4625).abs() < 1e-12, "{}", r.loss);
    }

    #[test]
    fn zero_error_gives_zero_weights() {
        let part = RegionPartition::new(1, 2, vec![0, 1], 2).unwrap();
        let t = Tensor::<f32>::from_f64(&[1, 2], &[0.1, 0.2]).unwrap();
        let r = focal_region_loss_value(&t, &t, &part, 1.0, 1.0).unwrap();
        assert_eq!(r.weights, vec![0.0, 0.0]);
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn rejects_nan_and_negative_gamma() {
        let part = RegionPartition::single_region(1, 2);
        let t = Tensor::<f32>::from_f64(&[1, 2], &[0.1, 0.2]).unwrap();
        let nan = Tensor::<f32>::from_f64(&[1, 2], &[f64::NAN, 0.2]).unwrap();
        assert!(matches!(
            focal_region_loss_value(&nan, &t, &part, 1.0, 1.0),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            focal_region_loss_value(&t, &t, &part, -1.0, 1.0),
            Err(Error::Config(_))
        ));
    }
}
