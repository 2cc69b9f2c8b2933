//! Finite-difference checks of the reverse-mode graph.
//!
//! Every check projects the op output onto a fixed random tensor, so the
//! scalar under test has non-trivial gradients everywhere, then compares
//! [`Graph::backward`] against [`finite_diff_grad`] in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{region_weights, weighted_l1};
use crate::model::{AttentionKind, RatConfig, RatModel};
use crate::params::{Binding, ParamId, ParamStore};
use crate::region::RegionPartition;
use crate::tensor::{finite_diff_grad, max_rel_error, rel_error, Graph, Tensor, Var};

/// Absolute floor in the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-6;
/// Default central-difference step in 64-bit.
pub const FD_EPS: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn project(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(weights.clone());
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Maximum relative error over all inputs of `build` between analytic and
/// central-difference gradients of `sum(build(inputs) ⊙ R)`.
pub fn check_op(inputs: &[Tensor<f64>], seed: u64, build: &Builder<'_>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&mut g, &vars)?;
        g.shape(y).to_vec()
    };
    let weights = Tensor::<f64>::rand_uniform(&out_shape, -1.0, 1.0, &mut rng);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let loss = project(&mut g, y, &weights)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let Some(analytic) = grads.get(vars[i]) else {
            continue;
        };
        let numeric = finite_diff_grad(
            |probe| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let y = build(&mut g, &vars).expect("rebuild succeeded once already");
                let loss = project(&mut g, y, &weights).expect("projection shape fixed");
                g.value(loss).data()[0]
            },
            input,
            FD_EPS,
        );
        worst = worst.max(max_rel_error(analytic, &numeric, REL_FLOOR));
    }
    Ok(worst)
}

/// `(parameter, flat index)` pairs drawn uniformly over all scalars of the
/// store; every scalar when `count` covers the whole store.
pub fn sample_coords<R: Rng>(
    store: &ParamStore<f64>,
    count: usize,
    rng: &mut R,
) -> Vec<(ParamId, usize)> {
    let all: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect();
    if count >= all.len() {
        return all;
    }
    rand::seq::index::sample(rng, all.len(), count)
        .into_iter()
        .map(|i| all[i])
        .collect()
}

/// Compares backward against central differences for selected parameter
/// coordinates of a scalar loss built by `loss_fn`. Returns the largest
/// relative error.
pub fn check_params(
    store: &ParamStore<f64>,
    coords: &[(ParamId, usize)],
    eps: f64,
    loss_fn: &dyn Fn(&mut Graph<f64>, &Binding) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let bind = store.bind(&mut g, true);
    let loss = loss_fn(&mut g, &bind)?;
    let grads = g.backward(loss)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let bind = s.bind(&mut g, false);
        let loss = loss_fn(&mut g, &bind)?;
        Ok(g.value(loss).data()[0])
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for &(id, i) in coords {
        let analytic = grads.get(bind.var(id)).map_or(0.0, |t| t.data()[i]);
        let orig = probe.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(rel_error(analytic, numeric, REL_FLOOR));
    }
    Ok(worst)
}

fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// Per-op checks on one seed. Names are stable and used in reports.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = 1e-4;
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, build: &Builder<'_>| -> Result<()> {
        let err = check_op(&inputs, seed, build)?;
        out.push(CheckResult {
            name: name.to_string(),
            max_rel_err: err,
            tolerance: tol,
        });
        Ok(())
    };

    run(
        "matmul",
        vec![rand(&[5, 4], &mut rng), rand(&[4, 3], &mut rng)],
        &|g, v| g.matmul(v[0], v[1]),
    )?;
    run(
        "matmul_batched",
        vec![rand(&[2, 3, 4, 5], &mut rng), rand(&[2, 3, 5, 2], &mut rng)],
        &|g, v| g.matmul(v[0], v[1]),
    )?;
    run(
        "matmul_shared_rhs",
        vec![rand(&[3, 4, 5], &mut rng), rand(&[5, 2], &mut rng)],
        &|g, v| g.matmul(v[0], v[1]),
    )?;
    let bias = Tensor::<f64>::from_f64(
        &[4, 4],
        &[
            0., -1000., 0., 0., -1000., 0., -1000., -1000., 0., -1000., 0., 0., 0., -1000., 0., 0.,
        ],
    )?;
    run("softmax", vec![rand(&[2, 4, 4], &mut rng)], &|g, v| {
        g.softmax_lastdim(v[0], None)
    })?;
    run(
        "softmax_masked",
        vec![rand(&[2, 4, 4], &mut rng)],
        &|g, v| g.softmax_lastdim(v[0], Some(&bias)),
    )?;
    run(
        "layer_norm",
        vec![
            rand(&[3, 6], &mut rng),
            rand(&[6], &mut rng),
            rand(&[6], &mut rng),
        ],
        &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6),
    )?;
    run(
        "conv3x3",
        vec![
            rand(&[2, 2, 5, 4], &mut rng),
            rand(&[3, 2, 3, 3], &mut rng),
            rand(&[3], &mut rng),
        ],
        &|g, v| g.conv3x3(v[0], v[1], v[2]),
    )?;
    run(
        "conv1x1",
        vec![
            rand(&[1, 3, 4, 4], &mut rng),
            rand(&[2, 3, 1, 1], &mut rng),
            rand(&[2], &mut rng),
        ],
        &|g, v| g.conv2d(v[0], v[1], v[2]),
    )?;
    run(
        "pixel_unshuffle",
        vec![rand(&[1, 2, 4, 4], &mut rng)],
        &|g, v| g.pixel_unshuffle(v[0], 2),
    )?;
    run(
        "pixel_shuffle",
        vec![rand(&[1, 8, 2, 3], &mut rng)],
        &|g, v| g.pixel_shuffle(v[0], 2),
    )?;
    run(
        "linear",
        vec![
            rand(&[2, 3, 4], &mut rng),
            rand(&[5, 4], &mut rng),
            rand(&[5], &mut rng),
        ],
        &|g, v| g.linear(v[0], v[1], Some(v[2])),
    )?;
    run("gelu", vec![rand(&[3, 5], &mut rng)], &|g, v| {
        Ok(g.gelu(v[0]))
    })?;
    run(
        "add",
        vec![rand(&[4], &mut rng), rand(&[4], &mut rng)],
        &|g, v| g.add(v[0], v[1]),
    )?;
    run(
        "sub",
        vec![rand(&[4], &mut rng), rand(&[4], &mut rng)],
        &|g, v| g.sub(v[0], v[1]),
    )?;
    run(
        "mul",
        vec![rand(&[4], &mut rng), rand(&[4], &mut rng)],
        &|g, v| g.mul(v[0], v[1]),
    )?;
    run("mul_scalar", vec![rand(&[2, 2], &mut rng)], &|g, v| {
        Ok(g.mul_scalar(v[0], -0.37))
    })?;
    run(
        "abs",
        vec![offset_from_zero(rand(&[6], &mut rng))],
        &|g, v| Ok(g.abs(v[0])),
    )?;
    run("reshape", vec![rand(&[2, 6], &mut rng)], &|g, v| {
        g.reshape(v[0], &[3, 4])
    })?;
    run("permute", vec![rand(&[2, 3, 4], &mut rng)], &|g, v| {
        g.permute(v[0], &[1, 2, 0])
    })?;
    run(
        "sum",
        vec![rand(&[3, 3], &mut rng)],
        &|g, v| Ok(g.sum(v[0])),
    )?;
    run("mean", vec![rand(&[3, 3], &mut rng)], &|g, v| {
        Ok(g.mean(v[0]))
    })?;
    run(
        "abs_sum",
        vec![offset_from_zero(rand(&[5], &mut rng))],
        &|g, v| Ok(g.abs_sum(v[0])),
    )?;
    run("crop", vec![rand(&[1, 2, 5, 6], &mut rng)], &|g, v| {
        g.crop(v[0], 1, 2, 3, 3)
    })?;
    Ok(out)
}

/// Smallest useful model: C = 2, one block per stage, window 1.
pub fn tiny_config(attention: AttentionKind) -> RatConfig {
    RatConfig {
        base_channels: 2,
        n1: 1,
        n2: 1,
        n3: 1,
        n4: 1,
        n5: 1,
        heads: 2,
        window: 1,
        mlp_ratio: 2,
        attention,
        ..RatConfig::toy()
    }
}

/// End-to-end parameter gradients of the tiny model for every attention
/// kind (tolerance 1e-3), and the focal loss with frozen weights w.r.t. the
/// prediction (tolerance 1e-4).
pub fn model_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (6, 7);
    let labels: Vec<u32> = (0..h * w)
        .map(|i| u32::from((i % w) * 3 > w) + u32::from(i / w > 3))
        .collect();
    let part = RegionPartition::from_labels(h, w, &labels)?;
    let mut out = Vec::new();
    for kind in [
        AttentionKind::Rmsa,
        AttentionKind::WmsaOnly,
        AttentionKind::GlobalMsa,
    ] {
        let mut model = RatModel::<f64>::new(&tiny_config(kind), rng.gen())?;
        // leave the identity initialization so every parameter gets gradient
        let wid = model.output_proj().weight;
        let shape = model.store().get(wid).shape().to_vec();
        *model.store_mut().get_mut(wid) = Tensor::rand_uniform(&shape, -0.3, 0.3, &mut rng);
        let lq = Tensor::<f64>::rand_uniform(&[1, h, w], 0.0, 1.0, &mut rng);
        let proj = Tensor::<f64>::rand_uniform(&[1, h, w], -1.0, 1.0, &mut rng);
        let coords = sample_coords(model.store(), 48, &mut rng);
        let err = check_params(model.store(), &coords, 1e-5, &|g, bind| {
            let y = model.forward_graph(g, bind, &lq, &part)?;
            let r = g.constant(proj.clone());
            let p = g.mul(y, r)?;
            Ok(g.sum(p))
        })?;
        out.push(CheckResult {
            name: format!("model_{kind}"),
            max_rel_err: err,
            tolerance: 1e-3,
        });
    }

    let target = Tensor::<f64>::rand_uniform(&[1, h, w], 0.0, 1.0, &mut rng);
    let pred = Tensor::new(
        target.shape(),
        target
            .data()
            .iter()
            .enumerate()
            .map(|(i, t)| t + if i % 3 == 0 { -0.2 } else { 0.25 })
            .collect(),
    )?;
    let weights = region_weights(&pred, &target, &part, 1.0)?;
    let err = check_op(&[pred], seed, &|g, v| {
        weighted_l1(g, v[0], &target, &part, &weights, 0.5)
    })?;
    out.push(CheckResult {
        name: "focal_region_loss".into(),
        max_rel_err: err,
        tolerance: 1e-4,
    });
    Ok(out)
}

/// Pushes values away from the kink of `abs` so central differences stay
/// on one side of it.
fn offset_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}
