//! Raw slice kernels behind the graph ops.

use rayon::prelude::*;

use super::Real;

/// `c += a · b` with `a: [m,k]`, `b: [k,n]`.
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: [m,k]`, `b: [n,k]`.
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// `c += aᵀ · b` with `a: [k,m]`, `b: [k,n]`.
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `off`
/// under zero padding: positions `y` with `0 <= y + off < len`.
#[inline]
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

/// Stride-1 cross-correlation with zero padding `k/2`, spatial size preserved.
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: &[T], out: &mut [T], d: &ConvDims) {
    let plane = d.h * d.w;
    let pad = (d.k / 2) as isize;
    out.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, oplane)| {
            let bi = idx / d.cout;
            let co = idx % d.cout;
            oplane.fill(b[co]);
            for ci in 0..d.cin {
                let xplane = &x[(bi * d.cin + ci) * plane..][..plane];
                for ky in 0..d.k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(d.h, dy);
                    for kx in 0..d.k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(d.w, dx);
                        let wv = w[((co * d.cin + ci) * d.k + ky) * d.k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let orow = &mut oplane[y * d.w + x0..y * d.w + x1];
                            let srow = &xplane[sy * d.w + (x0 as isize + dx) as usize..][..x1 - x0];
                            for (o, &s) in orow.iter_mut().zip(srow) {
                                *o = *o + wv * s;
                            }
                        }
                    }
                }
            }
        });
}

/// Gradient of `conv2d_forward` w.r.t. its input.
pub fn conv2d_backward_input<T: Real>(gout: &[T], w: &[T], gin: &mut [T], d: &ConvDims) {
    let plane = d.h * d.w;
    let pad = (d.k / 2) as isize;
    gin.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, iplane)| {
            let bi = idx / d.cin;
            let ci = idx % d.cin;
            for co in 0..d.cout {
                let gplane = &gout[(bi * d.cout + co) * plane..][..plane];
                for ky in 0..d.k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(d.h, dy);
                    for kx in 0..d.k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(d.w, dx);
                        let wv = w[((co * d.cin + ci) * d.k + ky) * d.k + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &gplane[y * d.w + x0..y * d.w + x1];
                            let irow =
                                &mut iplane[sy * d.w + (x0 as isize + dx) as usize..][..x1 - x0];
                            for (i, &g) in irow.iter_mut().zip(grow) {
                                *i = *i + wv * g;
                            }
                        }
                    }
                }
            }
        });
}

/// Gradients w.r.t. weights and bias, accumulated into `gw` and `gb`.
pub fn conv2d_backward_params<T: Real>(
    gout: &[T],
    x: &[T],
    gw: &mut [T],
    gb: &mut [T],
    d: &ConvDims,
) {
    let plane = d.h * d.w;
    let pad = (d.k / 2) as isize;
    let kk = d.k * d.k;
    gw.par_chunks_mut(d.cin * kk)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(co, (gwc, gbc))| {
            for bi in 0..d.batch {
                let gplane = &gout[(bi * d.cout + co) * plane..][..plane];
                *gbc = *gbc + gplane.iter().copied().sum::<T>();
                for ci in 0..d.cin {
                    let xplane = &x[(bi * d.cin + ci) * plane..][..plane];
                    for ky in 0..d.k {
                        let dy = ky as isize - pad;
                        let (y0, y1) = valid_range(d.h, dy);
                        for kx in 0..d.k {
                            let dx = kx as isize - pad;
                            let (x0, x1) = valid_range(d.w, dx);
                            let mut acc = T::zero();
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let grow = &gplane[y * d.w + x0..y * d.w + x1];
                                let srow =
                                    &xplane[sy * d.w + (x0 as isize + dx) as usize..][..x1 - x0];
                                for (&g, &s) in grow.iter().zip(srow) {
                                    acc = acc + g * s;
                                }
                            }
                            let slot = &mut gwc[ci * kk + ky * d.k + kx];
                            *slot = *slot + acc;
                        }
                    }
                }
            }
        });
}

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}
