use super::kernels::{self, ConvDims};
use super::{strides, Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        eps: f64,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    },
    PixelUnshuffle {
        x: Var,
        r: usize,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gelu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulScalar {
        x: Var,
        s: f64,
    },
    Abs {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Values are computed eagerly when an op is
/// recorded; [`Graph::backward`] walks the tape in reverse.
///
/// A graph is single-threaded. Use one graph per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], keyed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not require
    /// gradients or is not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Batched matrix product `[..,m,k] · [..,k,n]`. Either side may omit the
    /// batch dimensions, in which case it is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || dim_err!("matmul: incompatible shapes {:?} and {:?}", sa, sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let out_batch: Vec<usize> = if ba == bb || bb.is_empty() {
            ba.to_vec()
        } else if ba.is_empty() {
            bb.to_vec()
        } else {
            return Err(mismatch());
        };
        let a_batched = !ba.is_empty();
        let b_batched = !bb.is_empty();
        let batch: usize = out_batch.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                let ao = if a_batched { i * m * k } else { 0 };
                let bo = if b_batched { i * k * n } else { 0 };
                kernels::gemm_nn(
                    &av[ao..ao + m * k],
                    &bv[bo..bo + k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = out_batch;
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    /// Softmax over the last axis with an optional additive bias whose shape
    /// equals the trailing dimensions of `x`. The bias is a constant.
    pub fn softmax_lastdim(&mut self, x: Var, bias: Option<&Tensor<T>>) -> Result<Var> {
        let xs = self.value(x);
        let shape = xs.shape().to_vec();
        let n = *shape.last().unwrap();
        if let Some(bias) = bias {
            let bs = bias.shape();
            if bs.len() > shape.len() || shape[shape.len() - bs.len()..] != *bs {
                return Err(dim_err!(
                    "softmax bias shape {:?} does not broadcast to {:?}",
                    bs,
                    shape
                ));
            }
        }
        let mut out = xs.data().to_vec();
        let bias_data = bias.map(|b| b.data());
        for (r, row) in out.chunks_mut(n).enumerate() {
            if let Some(bd) = bias_data {
                let off = (r * n) % bd.len();
                for (v, &b) in row.iter_mut().zip(&bd[off..off + n]) {
                    *v = *v + b;
                }
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Layer normalization over the last axis followed by a per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(dim_err!(
                "layer_norm: gain {:?} / shift {:?} must be [{}] for input {:?}",
                self.shape(gain),
                self.shape(shift),
                c,
                shape
            ));
        }
        let g = self.value(gain).data();
        let s = self.value(shift).data();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for (row, orow) in xv.chunks(c).zip(out.chunks_mut(c)) {
            let (mean, rstd) = row_stats(row, eps);
            for j in 0..c {
                orow[j] = (row[j] - mean) * rstd * g[j] + s[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                eps,
            },
            &[x, gain, shift],
        ))
    }

    /// 2-D cross-correlation, stride 1, zero padding `k/2` (odd `k`).
    /// `x: [B,C,H,W]`, `w: [C',C,k,k]`, `b: [C']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(dim_err!(
                "conv2d: input {:?} / weight {:?} not supported",
                xs,
                ws
            ));
        }
        if ws[1] != xs[1] || bs != [ws[0]] {
            return Err(dim_err!(
                "conv2d: channel mismatch, input {:?}, weight {:?}, bias {:?}",
                xs,
                ws,
                bs
            ));
        }
        let d = ConvDims {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            h: xs[2],
            w: xs[3],
            k: ws[2],
        };
        let mut out = vec![T::zero(); d.batch * d.cout * d.h * d.w];
        kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &mut out,
            &d,
        );
        let value = Tensor::new(&[d.batch, d.cout, d.h, d.w], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, k: d.k }, &[x, w, b]))
    }

    /// 3x3 convolution with zero padding 1.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.shape(w);
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(dim_err!("conv3x3: weight shape {:?} is not [C',C,3,3]", ws));
        }
        self.conv2d(x, w, b)
    }

    /// Space-to-depth: `[B,C,H,W] -> [B,C·r²,H/r,W/r]`. Output channel
    /// `c·r² + i·r + j` holds input pixel `(y·r+i, x·r+j)` of channel `c`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let value = pixel_unshuffle(self.value(x), r)?;
        Ok(self.push(value, Op::PixelUnshuffle { x, r }, &[x]))
    }

    /// Depth-to-space, the exact inverse of [`Graph::pixel_unshuffle`].
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let value = pixel_shuffle(self.value(x), r)?;
        Ok(self.push(value, Op::PixelShuffle { x, r }, &[x]))
    }

    /// `x · wᵀ + b` over the last axis. `w: [out,in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let cin = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != cin {
            return Err(dim_err!("linear: input {:?} vs weight {:?}", xs, ws));
        }
        let cout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(dim_err!(
                    "linear: bias {:?} vs weight {:?}",
                    self.shape(b),
                    ws
                ));
            }
        }
        let rows = self.value(x).numel() / cin;
        let mut out = vec![T::zero(); rows * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        kernels::gemm_nt(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            rows,
            cin,
            cout,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        self.push(value, Op::Gelu { x }, &[x])
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{}: shapes {:?} and {:?} differ",
                op,
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data).expect("zip_with: shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        let sv = T::lit(s);
        let value = self.value(x).map(|v| v * sv);
        self.push(value, Op::MulScalar { x, s }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push(value, Op::Abs { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = seq_sum(self.value(x).data());
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Mean of all elements, shape `[1]`. Summation is sequential in memory
    /// order, then divided by the element count.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = seq_sum(xv.data()) / T::lit(xv.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    /// Sum of absolute values, shape `[1]`.
    pub fn abs_sum(&mut self, x: Var) -> Var {
        let a = self.abs(x);
        self.sum(a)
    }

    /// Spatial crop of a `[B,C,H,W]` tensor to `h × w` at `(top, left)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || top + h > s[2] || left + w > s[3] || h == 0 || w == 0 {
            return Err(dim_err!(
                "crop ({}, {}) size {}x{} out of bounds for {:?}",
                top,
                left,
                h,
                w,
                s
            ));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * h * w);
        for plane in xv.chunks(s[2] * s[3]) {
            for y in top..top + h {
                out.extend_from_slice(&plane[y * s[3] + left..y * s[3] + left + w]);
            }
        }
        let value = Tensor::new(&[s[0], s[1], h, w], out)?;
        Ok(self.push(value, Op::Crop { x, top, left }, &[x]))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            self.propagate(&node.op, &node.value, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, &x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e = *e + x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor<T>,
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let go = gout.data();
        match *op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            } => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.wants(a) {
                    let mut ga = vec![T::zero(); av.numel()];
                    for i in 0..batch {
                        let ao = if a_batched { i * m * k } else { 0 };
                        let bo = if b_batched { i * k * n } else { 0 };
                        kernels::gemm_nt(
                            &go[i * m * n..(i + 1) * m * n],
                            &bv.data()[bo..bo + k * n],
                            &mut ga[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, a, Tensor::new(av.shape(), ga)?);
                }
                if self.wants(b) {
                    let mut gb = vec![T::zero(); bv.numel()];
                    for i in 0..batch {
                        let ao = if a_batched { i * m * k } else { 0 };
                        let bo = if b_batched { i * k * n } else { 0 };
                        kernels::gemm_tn(
                            &av.data()[ao..ao + m * k],
                            &go[i * m * n..(i + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate(grads, b, Tensor::new(bv.shape(), gb)?);
                }
            }
            Op::Softmax { x } => {
                let n = *out.shape().last().unwrap();
                let mut gx = vec![T::zero(); out.numel()];
                for ((y, g), dst) in out.data().chunks(n).zip(go.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dst[j] = y[j] * (g[j] - dot);
                    }
                }
                self.accumulate(grads, x, Tensor::new(out.shape(), gx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                eps,
            } => {
                let xv = self.value(x);
                let c = *xv.shape().last().unwrap();
                let g = self.value(gain).data();
                let mut gx = vec![T::zero(); xv.numel()];
                let mut gg = vec![T::zero(); c];
                let mut gs = vec![T::zero(); c];
                let cf = T::lit(c as f64);
                for ((row, grow), dst) in
                    xv.data().chunks(c).zip(go.chunks(c)).zip(gx.chunks_mut(c))
                {
                    let (mean, rstd) = row_stats(row, eps);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..c {
                        let xhat = (row[j] - mean) * rstd;
                        let d = grow[j] * g[j];
                        sum_d = sum_d + d;
                        sum_dx = sum_dx + d * xhat;
                        gg[j] = gg[j] + grow[j] * xhat;
                        gs[j] = gs[j] + grow[j];
                    }
                    for j in 0..c {
                        let xhat = (row[j] - mean) * rstd;
                        let d = grow[j] * g[j];
                        dst[j] = rstd * (d - sum_d / cf - xhat * sum_dx / cf);
                    }
                }
                self.accumulate(grads, x, Tensor::new(xv.shape(), gx)?);
                self.accumulate(grads, gain, Tensor::new(&[c], gg)?);
                self.accumulate(grads, shift, Tensor::new(&[c], gs)?);
            }
            Op::Conv { x, w, b, k } => {
                let xs = self.shape(x);
                let ws = self.shape(w);
                let d = ConvDims {
                    batch: xs[0],
                    cin: xs[1],
                    cout: ws[0],
                    h: xs[2],
                    w: xs[3],
                    k,
                };
                if self.wants(x) {
                    let mut gx = vec![T::zero(); self.value(x).numel()];
                    kernels::conv2d_backward_input(go, self.value(w).data(), &mut gx, &d);
                    self.accumulate(grads, x, Tensor::new(xs, gx)?);
                }
                if self.wants(w) || self.wants(b) {
                    let mut gw = vec![T::zero(); self.value(w).numel()];
                    let mut gb = vec![T::zero(); d.cout];
                    kernels::conv2d_backward_params(go, self.value(x).data(), &mut gw, &mut gb, &d);
                    self.accumulate(grads, w, Tensor::new(ws, gw)?);
                    self.accumulate(grads, b, Tensor::new(&[d.cout], gb)?);
                }
            }
            Op::PixelUnshuffle { x, r } => {
                self.accumulate(grads, x, pixel_shuffle(gout, r)?);
            }
            Op::PixelShuffle { x, r } => {
                self.accumulate(grads, x, pixel_unshuffle(gout, r)?);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let cout = wv.shape()[0];
                let cin = wv.shape()[1];
                let rows = xv.numel() / cin;
                if self.wants(x) {
                    let mut gx = vec![T::zero(); xv.numel()];
                    kernels::gemm_nn(go, wv.data(), &mut gx, rows, cout, cin);
                    self.accumulate(grads, x, Tensor::new(xv.shape(), gx)?);
                }
                if self.wants(w) {
                    let mut gw = vec![T::zero(); wv.numel()];
                    kernels::gemm_tn(go, xv.data(), &mut gw, cout, rows, cin);
                    self.accumulate(grads, w, Tensor::new(wv.shape(), gw)?);
                }
                if let Some(b) = b {
                    if self.wants(b) {
                        let mut gb = vec![T::zero(); cout];
                        for row in go.chunks(cout) {
                            for (acc, &g) in gb.iter_mut().zip(row) {
                                *acc = *acc + g;
                            }
                        }
                        self.accumulate(grads, b, Tensor::new(&[cout], gb)?);
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(x);
                let data = xv
                    .data()
                    .iter()
                    .zip(go)
                    .map(|(&v, &g)| g * kernels::gelu_grad(v))
                    .collect();
                self.accumulate(grads, x, Tensor::new(xv.shape(), data)?);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, a, gout.clone());
                self.accumulate(grads, b, gout.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, a, gout.clone());
                if self.wants(b) {
                    self.accumulate(grads, b, gout.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.wants(a) {
                    let data = go
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.accumulate(grads, a, Tensor::new(gout.shape(), data)?);
                }
                if self.wants(b) {
                    let data = go
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.accumulate(grads, b, Tensor::new(gout.shape(), data)?);
                }
            }
            Op::MulScalar { x, s } => {
                let sv = T::lit(s);
                self.accumulate(grads, x, gout.map(|g| g * sv));
            }
            Op::Abs { x } => {
                let data = go
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, x, Tensor::new(gout.shape(), data)?);
            }
            Op::Reshape { x } => {
                self.accumulate(grads, x, gout.reshape(self.shape(x))?);
            }
            Op::Permute { x, ref axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                self.accumulate(grads, x, gout.permute(&inverse)?);
            }
            Op::Sum { x } => {
                self.accumulate(grads, x, Tensor::full(self.shape(x), go[0]));
            }
            Op::Mean { x } => {
                let n = T::lit(self.value(x).numel() as f64);
                self.accumulate(grads, x, Tensor::full(self.shape(x), go[0] / n));
            }
            Op::Crop { x, top, left } => {
                let s = self.shape(x);
                let (h, w) = (out.shape()[2], out.shape()[3]);
                let mut gx = vec![T::zero(); self.value(x).numel()];
                for (plane, gplane) in gx.chunks_mut(s[2] * s[3]).zip(go.chunks(h * w)) {
                    for y in 0..h {
                        plane[(top + y) * s[3] + left..][..w]
                            .copy_from_slice(&gplane[y * w..(y + 1) * w]);
                    }
                }
                self.accumulate(grads, x, Tensor::new(s, gx)?);
            }
        }
        Ok(())
    }
}

fn seq_sum<T: Real>(data: &[T]) -> T {
    data.iter().fold(T::zero(), |acc, &v| acc + v)
}

fn row_stats<T: Real>(row: &[T], eps: f64) -> (T, T) {
    let c = T::lit(row.len() as f64);
    let mean = seq_sum(row) / c;
    let var = row
        .iter()
        .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
        / c;
    (mean, T::one() / (var + T::lit(eps)).sqrt())
}

fn check_shuffle_shape(s: &[usize], r: usize, op: &str) -> Result<()> {
    if s.len() != 4 || r == 0 {
        return Err(dim_err!(
            "{}: expected [B,C,H,W] and r >= 1, got {:?}, r={}",
            op,
            s,
            r
        ));
    }
    Ok(())
}

/// Space-to-depth on a plain tensor. See [`Graph::pixel_unshuffle`].
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    check_shuffle_shape(s, r, "pixel_unshuffle")?;
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % r != 0 || w % r != 0 {
        return Err(dim_err!(
            "pixel_unshuffle: spatial size {}x{} not divisible by {}",
            h,
            w,
            r
        ));
    }
    let (ho, wo) = (h / r, w / r);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    let st = strides(&[b, c * r * r, ho, wo]);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = ci * r * r + (y % r) * r + (xx % r);
                    out[bi * st[0] + oc * st[1] + (y / r) * st[2] + xx / r] =
                        src[((bi * c + ci) * h + y) * w + xx];
                }
            }
        }
    }
    Tensor::new(&[b, c * r * r, ho, wo], out)
}

/// Depth-to-space on a plain tensor. See [`Graph::pixel_shuffle`].
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    check_shuffle_shape(s, r, "pixel_shuffle")?;
    let (b, cr, ho, wo) = (s[0], s[1], s[2], s[3]);
    if cr % (r * r) != 0 {
        return Err(dim_err!(
            "pixel_shuffle: {} channels not divisible by r²={}",
            cr,
            r * r
        ));
    }
    let c = cr / (r * r);
    let (h, w) = (ho * r, wo * r);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    let st = strides(s);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let ic = ci * r * r + (y % r) * r + (xx % r);
                    out[((bi * c + ci) * h + y) * w + xx] =
                        src[bi * st[0] + ic * st[1] + (y / r) * st[2] + xx / r];
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}
