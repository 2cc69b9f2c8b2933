//! Region-masked multi-head attention, its per-region gathered counterpart,
//! and the pre-norm transformer layers built on them.
//!
//! The masked kernel adds a dense `N × N` bias (0 inside a region, λ across
//! regions) to the logits of every head before the softmax. The gathered
//! kernel loops over regions and runs unmasked attention on each one; with
//! λ = −1000 the two agree to rounding because `exp(−1000)` underflows.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::region::{grid_partition, AttentionBias};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Logit scaling rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScaleMode {
    /// `1/√(C/heads)`, the per-head channel dimension.
    #[default]
    HeadDim,
    /// `1/√heads`, the literal reading of "d is the attention head number".
    LiteralHeads,
}

impl ScaleMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "head-dim" | "head_dim" => Some(ScaleMode::HeadDim),
            "literal-heads" | "literal_heads" => Some(ScaleMode::LiteralHeads),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleMode::HeadDim => "head-dim",
            ScaleMode::LiteralHeads => "literal-heads",
        }
    }
}

/// Query/key/value/output projections of one multi-head attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub channels: usize,
    pub heads: usize,
    pub scale_mode: ScaleMode,
}

impl AttnParams {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        heads: usize,
        scale_mode: ScaleMode,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{channels} channels not divisible by {heads} heads"
            )));
        }
        let c = channels;
        let mut proj = |name: &str| {
            let w = store.add_fan_in(format!("{prefix}.{name}.weight"), &[c, c], c, rng);
            let b = store.add(format!("{prefix}.{name}.bias"), Tensor::zeros(&[c]));
            (w, b)
        };
        let (wq, bq) = proj("q");
        let (wk, bk) = proj("k");
        let (wv, bv) = proj("v");
        let (wo, bo) = proj("out");
        Ok(Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            channels,
            heads,
            scale_mode,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn scale(&self) -> f64 {
        match self.scale_mode {
            ScaleMode::HeadDim => 1.0 / (self.head_dim() as f64).sqrt(),
            ScaleMode::LiteralHeads => 1.0 / (self.heads as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub hidden: usize,
}

/// Pre-norm transformer layer: attention then MLP, each with a residual.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayerParams {
    pub norm1_gain: ParamId,
    pub norm1_shift: ParamId,
    pub attn: AttnParams,
    pub norm2_gain: ParamId,
    pub norm2_shift: ParamId,
    pub mlp: MlpParams,
}

impl TransformerLayerParams {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        heads: usize,
        mlp_ratio: usize,
        scale_mode: ScaleMode,
        rng: &mut R,
    ) -> Result<Self> {
        let c = channels;
        let norm1_gain = store.add(format!("{prefix}.norm1.gain"), Tensor::ones(&[c]));
        let norm1_shift = store.add(format!("{prefix}.norm1.shift"), Tensor::zeros(&[c]));
        let attn = AttnParams::init(store, &format!("{prefix}.attn"), c, heads, scale_mode, rng)?;
        let norm2_gain = store.add(format!("{prefix}.norm2.gain"), Tensor::ones(&[c]));
        let norm2_shift = store.add(format!("{prefix}.norm2.shift"), Tensor::zeros(&[c]));
        let hidden = mlp_ratio * c;
        let w1 = store.add_fan_in(format!("{prefix}.mlp.fc1.weight"), &[hidden, c], c, rng);
        let b1 = store.add(format!("{prefix}.mlp.fc1.bias"), Tensor::zeros(&[hidden]));
        let w2 = store.add_fan_in(
            format!("{prefix}.mlp.fc2.weight"),
            &[c, hidden],
            hidden,
            rng,
        );
        let b2 = store.add(format!("{prefix}.mlp.fc2.bias"), Tensor::zeros(&[c]));
        Ok(Self {
            norm1_gain,
            norm1_shift,
            attn,
            norm2_gain,
            norm2_shift,
            mlp: MlpParams {
                w1,
                b1,
                w2,
                b2,
                hidden,
            },
        })
    }
}

/// Multi-head attention over the second-to-last axis of `x: [.., N, C]`.
///
/// Per head: `softmax(D + Q Kᵀ · scale) V`, with `D` the shared `N × N`
/// bias when given. Heads are concatenated and output-projected.
pub fn attention<T: Real>(
    g: &mut Graph<T>,
    bind: &Binding,
    x: Var,
    bias: Option<&Tensor<T>>,
    p: &AttnParams,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let nd = shape.len();
    if nd < 2 || shape[nd - 1] != p.channels {
        return Err(crate::error::dim_err!(
            "attention input {:?} does not end in {} channels",
            shape,
            p.channels
        ));
    }
    let n = shape[nd - 2];
    if let Some(b) = bias {
        if b.shape() != [n, n] {
            return Err(crate::error::dim_err!(
                "attention bias {:?} does not match {} tokens",
                b.shape(),
                n
            ));
        }
    }
    let (h, dh) = (p.heads, p.head_dim());
    let lead = &shape[..nd - 2];
    let mut split: Vec<usize> = lead.to_vec();
    split.extend([n, h, dh]);
    let l = lead.len();
    // [.., N, h, dh] -> [.., h, N, dh]
    let mut to_heads: Vec<usize> = (0..l).collect();
    to_heads.extend([l + 1, l, l + 2]);
    // [.., N, h, dh] -> [.., h, dh, N]
    let mut to_keys: Vec<usize> = (0..l).collect();
    to_keys.extend([l + 1, l + 2, l]);

    let q = g.linear(x, bind.var(p.wq), Some(bind.var(p.bq)))?;
    let k = g.linear(x, bind.var(p.wk), Some(bind.var(p.bk)))?;
    let v = g.linear(x, bind.var(p.wv), Some(bind.var(p.bv)))?;
    let q = g.reshape(q, &split)?;
    let q = g.permute(q, &to_heads)?;
    let k = g.reshape(k, &split)?;
    let kt = g.permute(k, &to_keys)?;
    let v = g.reshape(v, &split)?;
    let v = g.permute(v, &to_heads)?;

    let logits = g.matmul(q, kt)?;
    let logits = g.mul_scalar(logits, p.scale());
    let weights = g.softmax_lastdim(logits, bias)?;
    let heads_out = g.matmul(weights, v)?;
    // [.., h, N, dh] -> [.., N, h, dh], which is its own inverse
    let merged = g.permute(heads_out, &to_heads)?;
    let merged = g.reshape(merged, &shape)?;
    g.linear(merged, bind.var(p.wo), Some(bind.var(p.bo)))
}

/// Inference-only masked attention on `x: [N, C]` with an optional region
/// bias.
pub fn mh_masked_attention<T: Real>(
    x: &Tensor<T>,
    bias: Option<&AttentionBias>,
    store: &ParamStore<T>,
    p: &AttnParams,
) -> Result<Tensor<T>> {
    if let Some(b) = bias {
        if x.ndim() != 2 || b.len() != x.shape()[0] {
            return Err(crate::error::dim_err!(
                "bias over {} positions for input {:?}",
                b.len(),
                x.shape()
            ));
        }
    }
    let dense = bias.map(AttentionBias::materialize::<T>);
    let mut g = Graph::new();
    let bind = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = attention(&mut g, &bind, xv, dense.as_ref(), p)?;
    Ok(g.value(y).clone())
}

fn cmp_rows<T: Real>(a: &[T], b: &[T]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.f64().total_cmp(&y.f64()) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Reference implementation: unmasked attention inside each region, results
/// scattered back by index.
///
/// Members of a region are visited in a content-defined order (rows sorted
/// by feature values), so the output does not depend on how pixels are
/// numbered.
pub fn gathered_region_attention<T: Real>(
    x: &Tensor<T>,
    labels: &[u32],
    store: &ParamStore<T>,
    p: &AttnParams,
) -> Result<Tensor<T>> {
    if x.ndim() != 2 || x.shape()[0] != labels.len() {
        return Err(crate::error::dim_err!(
            "{} labels for input {:?}",
            labels.len(),
            x.shape()
        ));
    }
    let c = x.shape()[1];
    let rows: Vec<&[T]> = x.data().chunks(c).collect();
    let mut members: Vec<(u32, usize)> = labels.iter().copied().zip(0..).collect();
    members.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| cmp_rows(rows[a.1], rows[b.1]))
            .then(a.1.cmp(&b.1))
    });

    let mut g = Graph::new();
    let bind = store.bind(&mut g, false);
    let mut out = vec![T::zero(); x.numel()];
    for group in members.chunk_by(|a, b| a.0 == b.0) {
        let mut gathered = Vec::with_capacity(group.len() * c);
        for &(_, i) in group {
            gathered.extend_from_slice(rows[i]);
        }
        let xr = g.constant(Tensor::new(&[group.len(), c], gathered)?);
        let yr = attention(&mut g, &bind, xr, None, p)?;
        for (&(_, i), row) in group.iter().zip(g.value(yr).data().chunks(c)) {
            out[i * c..(i + 1) * c].copy_from_slice(row);
        }
    }
    Tensor::new(x.shape(), out)
}

/// `x + MHA(LN(x))`.
pub fn attention_sublayer<T: Real>(
    g: &mut Graph<T>,
    bind: &Binding,
    x: Var,
    bias: Option<&Tensor<T>>,
    lp: &TransformerLayerParams,
) -> Result<Var> {
    let n = g.layer_norm(
        x,
        bind.var(lp.norm1_gain),
        bind.var(lp.norm1_shift),
        LAYER_NORM_EPS,
    )?;
    let a = attention(g, bind, n, bias, &lp.attn)?;
    g.add(x, a)
}

/// `y + fc2(gelu(fc1(LN(y))))`.
pub fn mlp_sublayer<T: Real>(
    g: &mut Graph<T>,
    bind: &Binding,
    y: Var,
    lp: &TransformerLayerParams,
) -> Result<Var> {
    let n = g.layer_norm(
        y,
        bind.var(lp.norm2_gain),
        bind.var(lp.norm2_shift),
        LAYER_NORM_EPS,
    )?;
    let h = g.linear(n, bind.var(lp.mlp.w1), Some(bind.var(lp.mlp.b1)))?;
    let h = g.gelu(h);
    let o = g.linear(h, bind.var(lp.mlp.w2), Some(bind.var(lp.mlp.b2)))?;
    g.add(y, o)
}

/// Region attention transformer layer on tokens `x: [N, C]`. `bias` is the
/// dense region bias; `None` gives global attention.
pub fn rmsa_layer<T: Real>(
    g: &mut Graph<T>,
    bind: &Binding,
    x: Var,
    bias: Option<&Tensor<T>>,
    lp: &TransformerLayerParams,
) -> Result<Var> {
    let y = attention_sublayer(g, bind, x, bias, lp)?;
    mlp_sublayer(g, bind, y, lp)
}

fn check_windows(shape: &[usize], win: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 3
        || win == 0
        || !shape[0].is_multiple_of(win)
        || !shape[1].is_multiple_of(win)
    {
        return Err(crate::error::dim_err!(
            "window attention: feature {:?} not divisible into {}x{} windows",
            shape,
            win,
            win
        ));
    }
    Ok((shape[0], shape[1], shape[2]))
}

fn window_layer<T: Real>(
    g: &mut Graph<T>,
    bind: &Binding,
    x: Var,
    win: usize,
    lp: &TransformerLayerParams,
    with_mlp: bool,
) -> Result<Var> {
    let (h, w, c) = check_windows(g.shape(x), win)?;
    let (nh, nw) = (h / win, w / win);
    let t = g.reshape(x, &[nh, win, nw, win, c])?;
    let t = g.permute(t, &[0, 2, 1, 3, 4])?;
    let t = g.reshape(t, &[nh * nw, win * win, c])?;
    let mut y = attention_sublayer(g, bind, t, None, lp)?;
    if with_mlp {
        y = mlp_sublayer(g, bind, y, lp)?;
    }
    let t = g.reshape(y, &[nh, nw, win, win, c])?;
    let t = g.permute(t, &[0, 2, 1, 3, 4])?;
    g.reshape(t, &[h, w, c])
}

/// Window attention transformer layer on `x: [H, W, C]`, batching the
/// `win × win` windows instead of materializing an `N × N` bias.
pub fn wmsa_layer<T: Real>(
    g: &mut Graph<T>,
    bind: &Binding,
    x: Var,
    win: usize,
    lp: &TransformerLayerParams,
) -> Result<Var> {
    window_layer(g, bind, x, win, lp, true)
}

/// Attention sublayer of [`wmsa_layer`] only (no MLP).
pub fn wmsa_attention_sublayer<T: Real>(
    g: &mut Graph<T>,
    bind: &Binding,
    x: Var,
    win: usize,
    lp: &TransformerLayerParams,
) -> Result<Var> {
    window_layer(g, bind, x, win, lp, false)
}

/// Same layer as [`wmsa_layer`], computed as [`rmsa_layer`] with a grid
/// partition bias.
pub fn wmsa_layer_via_partition<T: Real>(
    g: &mut Graph<T>,
    bind: &Binding,
    x: Var,
    win: usize,
    lambda: f64,
    lp: &TransformerLayerParams,
) -> Result<Var> {
    let (h, w, c) = check_windows(g.shape(x), win)?;
    let grid = grid_partition(h, w, win)?;
    let bias = AttentionBias::from_partition(&grid, lambda).materialize::<T>();
    let t = g.reshape(x, &[h * w, c])?;
    let y = rmsa_layer(g, bind, t, Some(&bias), lp)?;
    g.reshape(y, &[h, w, c])
}
