//! Region partitions: turning overlapping segmenter masks into an exclusive
//! label map, resampling it to latent resolution, and building the additive
//! attention bias that confines attention to a region.

pub mod io;

use std::fmt;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Default additive penalty between pixels of different regions.
pub const DEFAULT_LAMBDA: f64 = -1000.0;

/// Raw, possibly overlapping and possibly non-covering binary masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    height: usize,
    width: usize,
    masks: Vec<Vec<bool>>,
}

impl MaskSet {
    pub fn new(height: usize, width: usize, masks: Vec<Vec<bool>>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(dim_err!("mask set size {}x{} is empty", height, width));
        }
        for (i, m) in masks.iter().enumerate() {
            if m.len() != height * width {
                return Err(dim_err!(
                    "mask {} has {} pixels, expected {}x{}",
                    i,
                    m.len(),
                    height,
                    width
                ));
            }
        }
        Ok(Self {
            height,
            width,
            masks,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// What [`RegionPartition::validate`] found wrong.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PartitionViolation {
    LabelCount {
        expected: usize,
        found: usize,
    },
    LabelOutOfRange {
        row: usize,
        col: usize,
        label: u32,
        num_regions: usize,
    },
    EmptyRegion {
        label: u32,
    },
}

impl fmt::Display for PartitionViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionViolation::LabelCount { expected, found } => {
                write!(f, "label map has {found} entries, expected {expected}")
            }
            PartitionViolation::LabelOutOfRange {
                row,
                col,
                label,
                num_regions,
            } => write!(
                f,
                "pixel ({row}, {col}) has label {label} >= region count {num_regions}"
            ),
            PartitionViolation::EmptyRegion { label } => {
                write!(f, "region {label} has no pixels")
            }
        }
    }
}

impl From<PartitionViolation> for Error {
    fn from(v: PartitionViolation) -> Self {
        Error::Violation(v.to_string())
    }
}

/// Exhaustive, exclusive assignment of every pixel to one of `L` regions.
///
/// Labels are compact: every id in `[0, L)` occurs at least once. Use
/// [`RegionPartition::from_raw`] to hold possibly-corrupt data (e.g. a file
/// being validated) and [`RegionPartition::validate`] to check it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionPartition {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    num_regions: usize,
}

impl RegionPartition {
    /// Checked constructor.
    pub fn new(height: usize, width: usize, labels: Vec<u32>, num_regions: usize) -> Result<Self> {
        let p = Self::from_raw(height, width, labels, num_regions);
        p.validate()?;
        Ok(p)
    }

    /// Unchecked constructor.
    pub fn from_raw(height: usize, width: usize, labels: Vec<u32>, num_regions: usize) -> Self {
        Self {
            height,
            width,
            labels,
            num_regions,
        }
    }

    /// Relabels arbitrary ids to `[0, L)` preserving their numeric order.
    pub fn from_labels(height: usize, width: usize, labels: &[u32]) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(dim_err!(
                "{} labels for a {}x{} partition",
                labels.len(),
                height,
                width
            ));
        }
        let (labels, num_regions) = compact(labels);
        Ok(Self::from_raw(height, width, labels, num_regions))
    }

    pub fn single_region(height: usize, width: usize) -> Self {
        Self::from_raw(height, width, vec![0; height * width], 1)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_regions(&self) -> usize {
        self.num_regions
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Pixel count per region; sums to `H·W`.
    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_regions];
        for &l in &self.labels {
            if let Some(s) = sizes.get_mut(l as usize) {
                *s += 1;
            }
        }
        sizes
    }

    /// Checks exhaustiveness (every pixel has a label `< L`) and compactness
    /// (every label in `[0, L)` is used).
    pub fn validate(&self) -> Result<(), PartitionViolation> {
        if self.labels.len() != self.height * self.width {
            return Err(PartitionViolation::LabelCount {
                expected: self.height * self.width,
                found: self.labels.len(),
            });
        }
        let mut seen = vec![false; self.num_regions];
        for (i, &l) in self.labels.iter().enumerate() {
            match seen.get_mut(l as usize) {
                Some(s) => *s = true,
                None => {
                    return Err(PartitionViolation::LabelOutOfRange {
                        row: i / self.width,
                        col: i % self.width,
                        label: l,
                        num_regions: self.num_regions,
                    })
                }
            }
        }
        if let Some(label) = seen.iter().position(|s| !s) {
            return Err(PartitionViolation::EmptyRegion {
                label: label as u32,
            });
        }
        Ok(())
    }

    /// Extends to `h × w` (bottom/right) by replicating edge labels.
    pub fn edge_extend(&self, h: usize, w: usize) -> Result<Self> {
        if h < self.height || w < self.width {
            return Err(dim_err!(
                "edge_extend to {}x{} smaller than {}x{}",
                h,
                w,
                self.height,
                self.width
            ));
        }
        let mut labels = Vec::with_capacity(h * w);
        for i in 0..h {
            let si = i.min(self.height - 1);
            for j in 0..w {
                labels.push(self.label(si, j.min(self.width - 1)));
            }
        }
        Ok(Self::from_raw(h, w, labels, self.num_regions))
    }

    /// Sub-window, relabelled so the result is compact.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(dim_err!(
                "crop ({}, {}) {}x{} outside {}x{} partition",
                top,
                left,
                h,
                w,
                self.height,
                self.width
            ));
        }
        let mut labels = Vec::with_capacity(h * w);
        for i in top..top + h {
            labels.extend_from_slice(&self.labels[i * self.width + left..][..w]);
        }
        Self::from_labels(h, w, &labels)
    }
}

/// Relabels ids to `[0, L)` preserving numeric order.
fn compact(labels: &[u32]) -> (Vec<u32>, usize) {
    let mut ids: Vec<u32> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let out = labels
        .iter()
        .map(|l| ids.binary_search(l).expect("label present") as u32)
        .collect();
    (out, ids.len())
}

/// Resolves overlapping masks into an exclusive partition.
///
/// A pixel covered by several masks goes to the one with the smallest area
/// (ties: lowest mask index). Uncovered pixels form the background region,
/// which takes the last id. Masks that are empty or lose every pixel to
/// smaller masks are dropped, so `L` is minimal.
pub fn postprocess_masks(ms: &MaskSet) -> RegionPartition {
    let n = ms.height * ms.width;
    let areas: Vec<usize> = ms
        .masks
        .iter()
        .map(|m| m.iter().filter(|&&b| b).count())
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (pix, slot) in owner.iter_mut().enumerate() {
        for (mi, m) in ms.masks.iter().enumerate() {
            if !m[pix] {
                continue;
            }
            let better = match *slot {
                None => true,
                Some(cur) => areas[mi] < areas[cur],
            };
            if better {
                *slot = Some(mi);
            }
        }
    }
    let mut surviving = vec![false; ms.masks.len()];
    let mut has_background = false;
    for o in &owner {
        match o {
            Some(mi) => surviving[*mi] = true,
            None => has_background = true,
        }
    }
    let mut remap = vec![u32::MAX; ms.masks.len()];
    let mut next = 0u32;
    for (mi, s) in surviving.iter().enumerate() {
        if *s {
            remap[mi] = next;
            next += 1;
        }
    }
    let background = next;
    let labels = owner
        .iter()
        .map(|o| o.map_or(background, |mi| remap[mi]))
        .collect();
    let num_regions = next as usize + usize::from(has_background);
    RegionPartition::from_raw(ms.height, ms.width, labels, num_regions)
}

/// Nearest-neighbour source index along one axis, half-pixel centres:
/// `floor((i + 0.5) · src / dst)`, clamped.
#[inline]
pub fn nearest_source_index(i: usize, src: usize, dst: usize) -> usize {
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

/// Nearest-neighbour downscale to `h2 × w2`. Regions that vanish are dropped
/// and the remaining ids recompacted in their original order.
pub fn downscale_partition(p: &RegionPartition, h2: usize, w2: usize) -> Result<RegionPartition> {
    if h2 == 0 || w2 == 0 || h2 > p.height || w2 > p.width {
        return Err(Error::Contract(format!(
            "downscale target {}x{} must be within 1..={}x1..={}",
            h2, w2, p.height, p.width
        )));
    }
    let mut labels = Vec::with_capacity(h2 * w2);
    for i in 0..h2 {
        let si = nearest_source_index(i, p.height, h2);
        for j in 0..w2 {
            labels.push(p.label(si, nearest_source_index(j, p.width, w2)));
        }
    }
    RegionPartition::from_labels(h2, w2, &labels)
}

/// Non-overlapping `win × win` windows as a partition, row-major window ids.
pub fn grid_partition(h: usize, w: usize, win: usize) -> Result<RegionPartition> {
    if win == 0 || h == 0 || w == 0 || !h.is_multiple_of(win) || !w.is_multiple_of(win) {
        return Err(dim_err!(
            "grid partition: {}x{} not divisible by window {}",
            h,
            w,
            win
        ));
    }
    let per_row = w / win;
    let labels = (0..h)
        .flat_map(|i| (0..w).map(move |j| ((i / win) * per_row + j / win) as u32))
        .collect();
    Ok(RegionPartition::from_raw(h, w, labels, (h / win) * per_row))
}

/// Additive pre-softmax bias in compact form: one region id per latent
/// position. Dense entry `(p, q)` is 0 when both share a region and
/// `lambda` otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBias {
    latent_labels: Vec<u32>,
    lambda: f64,
}

impl AttentionBias {
    pub fn new(latent_labels: Vec<u32>, lambda: f64) -> Self {
        Self {
            latent_labels,
            lambda,
        }
    }

    /// Bias over the row-major pixels of a (latent-resolution) partition.
    pub fn from_partition(p: &RegionPartition, lambda: f64) -> Self {
        Self::new(p.labels.clone(), lambda)
    }

    pub fn latent_labels(&self) -> &[u32] {
        &self.latent_labels
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.latent_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latent_labels.is_empty()
    }

    /// Dense `N × N` bias.
    pub fn materialize<T: Real>(&self) -> Tensor<T> {
        let n = self.latent_labels.len();
        let lam = T::lit(self.lambda);
        let mut data = Vec::with_capacity(n * n);
        for &a in &self.latent_labels {
            data.extend(
                self.latent_labels
                    .iter()
                    .map(|&b| if a == b { T::zero() } else { lam }),
            );
        }
        Tensor::new(&[n, n], data).expect("bias: n >= 1")
    }

    /// The literal summed indicator form `λ Σ_i (1 − m_i m_iᵀ)` over the
    /// one-hot region columns `m_i`. Equals the two-valued bias plus the
    /// constant `λ(L−1)` on every entry, which softmax cancels.
    pub fn materialize_summed<T: Real>(&self, num_regions: usize) -> Tensor<T> {
        let n = self.latent_labels.len();
        let mut data = vec![T::zero(); n * n];
        for r in 0..num_regions as u32 {
            for (p, &a) in self.latent_labels.iter().enumerate() {
                for (q, &b) in self.latent_labels.iter().enumerate() {
                    let both = (a == r && b == r) as u8 as f64;
                    data[p * n + q] = data[p * n + q] + T::lit(self.lambda * (1.0 - both));
                }
            }
        }
        Tensor::new(&[n, n], data).expect("bias: n >= 1")
    }
}
