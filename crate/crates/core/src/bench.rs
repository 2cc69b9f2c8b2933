//! Timing of dense masked region attention against the per-region gathered
//! loop on identical inputs.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{gathered_region_attention, mh_masked_attention, AttnParams, ScaleMode};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::region::{AttentionBias, RegionPartition, DEFAULT_LAMBDA};
use crate::tensor::{Real, Tensor};

pub const BENCH_CHANNELS: usize = 16;
pub const BENCH_HEADS: usize = 2;
pub const DIVERGENCE_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchCase {
    pub n: usize,
    pub regions: usize,
    /// Smallest, median and largest region size in tokens.
    pub region_sizes: (usize, usize, usize),
    pub dense_secs: f64,
    pub gathered_secs: f64,
    /// Bias plus per-head score matrices, in bytes.
    pub dense_scratch_bytes: usize,
    pub gathered_scratch_bytes: usize,
    pub divergence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub channels: usize,
    pub heads: usize,
    pub repeats: usize,
    pub cases: Vec<BenchCase>,
}

impl BenchReport {
    /// Least-squares slope of `log(dense time)` against `log(N)`.
    pub fn dense_loglog_slope(&self) -> Option<f64> {
        loglog_slope(self.cases.iter().map(|c| (c.n as f64, c.dense_secs)))
    }

    pub fn gathered_loglog_slope(&self) -> Option<f64> {
        loglog_slope(self.cases.iter().map(|c| (c.n as f64, c.gathered_secs)))
    }

    pub fn max_divergence(&self) -> f64 {
        self.cases.iter().map(|c| c.divergence).fold(0.0, f64::max)
    }
}

pub fn loglog_slope(points: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points.map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>6} {:>4} {:>14} {:>12} {:>12} {:>12} {:>12} {:>10}",
            "N", "L", "sizes", "dense_ms", "gather_ms", "dense_KiB", "gather_KiB", "diverge"
        )?;
        for c in &self.cases {
            writeln!(
                f,
                "{:>6} {:>4} {:>14} {:>12.3} {:>12.3} {:>12.1} {:>12.1} {:>10.2e}",
                c.n,
                c.regions,
                format!(
                    "{}/{}/{}",
                    c.region_sizes.0, c.region_sizes.1, c.region_sizes.2
                ),
                c.dense_secs * 1e3,
                c.gathered_secs * 1e3,
                c.dense_scratch_bytes as f64 / 1024.0,
                c.gathered_scratch_bytes as f64 / 1024.0,
                c.divergence
            )?;
        }
        if let Some(s) = self.dense_loglog_slope() {
            write!(f, "dense_loglog_slope={s:.3}")?;
        }
        if let Some(s) = self.gathered_loglog_slope() {
            write!(f, " gathered_loglog_slope={s:.3}")?;
        }
        Ok(())
    }
}

/// Voronoi labels on an `h × w` grid with `l` sites, compacted.
fn random_partition(h: usize, w: usize, l: usize, rng: &mut ChaCha8Rng) -> Result<RegionPartition> {
    let sites: Vec<(f64, f64)> = (0..l)
        .map(|_| (rng.gen::<f64>() * h as f64, rng.gen::<f64>() * w as f64))
        .collect();
    let labels: Vec<u32> = (0..h * w)
        .map(|k| {
            let (y, x) = ((k / w) as f64 + 0.5, (k % w) as f64 + 0.5);
            (0..l)
                .min_by(|&a, &b| {
                    let d = |s: (f64, f64)| (s.0 - y).powi(2) + (s.1 - x).powi(2);
                    d(sites[a]).total_cmp(&d(sites[b]))
                })
                .unwrap_or(0) as u32
        })
        .collect();
    RegionPartition::from_labels(h, w, &labels)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time<F: FnMut() -> Result<Tensor<f64>>>(repeats: usize, mut f: F) -> Result<(f64, Tensor<f64>)> {
    let mut out = f()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        out = f()?;
        times.push(t0.elapsed().as_secs_f64().max(1e-9));
    }
    Ok((median(times), out))
}

/// Times both kernels for every `(N, L)` pair. `N` must be a perfect
/// square (tokens of a square latent grid). Runs on one rayon worker.
pub fn bench_attn(
    sizes: &[usize],
    regions: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repeats < 5 {
        return Err(Error::Config(format!(
            "need at least 5 repeats, got {repeats}"
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let p = AttnParams::init(
            &mut store,
            "bench",
            BENCH_CHANNELS,
            BENCH_HEADS,
            ScaleMode::HeadDim,
            &mut rng,
        )?;
        let bytes = f64::DTYPE.size();
        let mut cases = Vec::new();
        for &n in sizes {
            let side = (n as f64).sqrt().round() as usize;
            if side * side != n || n == 0 {
                return Err(Error::Config(format!(
                    "bench size {n} is not a square token count"
                )));
            }
            for &l in regions {
                let part = random_partition(side, side, l.max(1), &mut rng)?;
                let x = Tensor::<f64>::rand_uniform(&[n, BENCH_CHANNELS], -1.0, 1.0, &mut rng);
                let bias = AttentionBias::from_partition(&part, DEFAULT_LAMBDA);
                let (dense_secs, dense) =
                    time(repeats, || mh_masked_attention(&x, Some(&bias), &store, &p))?;
                let (gathered_secs, gathered) = time(repeats, || {
                    gathered_region_attention(&x, part.labels(), &store, &p)
                })?;
                let divergence = dense.rel_inf_diff(&gathered, 1e-12)?;
                if divergence > DIVERGENCE_TOL {
                    return Err(Error::Numeric(format!(
                        "dense and gathered attention diverge by {divergence:.3e} at N={n}, L={}",
                        part.num_regions()
                    )));
                }
                let mut sizes = part.region_sizes();
                sizes.sort_unstable();
                let region_sizes = (sizes[0], sizes[sizes.len() / 2], sizes[sizes.len() - 1]);
                let gathered_scratch_bytes =
                    sizes.iter().map(|s| BENCH_HEADS * s * s).sum::<usize>() * bytes;
                cases.push(BenchCase {
                    n,
                    regions: part.num_regions(),
                    region_sizes,
                    dense_secs,
                    gathered_secs,
                    dense_scratch_bytes: (1 + BENCH_HEADS) * n * n * bytes,
                    gathered_scratch_bytes,
                    divergence,
                });
            }
        }
        Ok(BenchReport {
            channels: BENCH_CHANNELS,
            heads: BENCH_HEADS,
            repeats,
            cases,
        })
    })
}
