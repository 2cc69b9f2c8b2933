//! Synthetic restoration pairs with known region structure.
//!
//! A sample is a grayscale image tiled by regions (Voronoi cells or
//! rectangle splats), each filled with its own texture, plus a degraded copy.
//! Sinusoid regions draw their frequency from disjoint bands so neighbouring
//! regions are statistically distinct.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::region::io::{load_partition, save_partition};
use crate::region::{nearest_source_index, RegionPartition};
use crate::tensor::io::{load_tensor, save_tensor};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const SPEC_NAME: &str = "synth.cfg";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Voronoi { sites: usize },
    Rectangles { count: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureFamily {
    Constant,
    Sinusoid,
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    GaussianNoise { sigma: f64 },
    BoxBlur { k: usize },
    DownUp { factor: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub layout: Layout,
    pub textures: Vec<TextureFamily>,
    /// Applied in order; empty means `lq == hq`.
    pub degradations: Vec<Degradation>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            layout: Layout::Voronoi { sites: 6 },
            textures: vec![TextureFamily::Sinusoid],
            degradations: vec![Degradation::GaussianNoise { sigma: 0.1 }],
            seed: 0,
        }
    }
}

/// Ground-truth image, degraded copy and the generator's regions.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// `[1, 1, H, W]` in `[0, 1]`.
    pub hq: Tensor<f32>,
    pub lq: Tensor<f32>,
    pub part: RegionPartition,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::Voronoi { sites } => write!(f, "voronoi:{sites}"),
            Layout::Rectangles { count } => write!(f, "rects:{count}"),
        }
    }
}

fn split_arg<'a>(s: &'a str, what: &str) -> Result<(&'a str, Option<&'a str>)> {
    let s = s.trim();
    if s.is_empty() {
        return Err(Error::Config(format!("empty {what}")));
    }
    Ok(match s.split_once(':') {
        Some((a, b)) => (a.trim(), Some(b.trim())),
        None => (s, None),
    })
}

fn num<T: FromStr>(v: Option<&str>, ctx: &str) -> Result<T> {
    v.and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Config(format!("`{ctx}` needs a numeric argument")))
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match split_arg(s, "layout")? {
            ("voronoi", v) => Ok(Layout::Voronoi { sites: num(v, s)? }),
            ("rects" | "rectangles", v) => Ok(Layout::Rectangles { count: num(v, s)? }),
            _ => Err(Error::Config(format!(
                "unknown layout `{s}` (voronoi:N | rects:N)"
            ))),
        }
    }
}

impl fmt::Display for TextureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TextureFamily::Constant => "constant",
            TextureFamily::Sinusoid => "sinusoid",
            TextureFamily::Gradient => "gradient",
        })
    }
}

impl FromStr for TextureFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "constant" => Ok(TextureFamily::Constant),
            "sinusoid" => Ok(TextureFamily::Sinusoid),
            "gradient" => Ok(TextureFamily::Gradient),
            _ => Err(Error::Config(format!(
                "unknown texture `{s}` (constant | sinusoid | gradient)"
            ))),
        }
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Degradation::GaussianNoise { sigma } => write!(f, "noise:{sigma}"),
            Degradation::BoxBlur { k } => write!(f, "blur:{k}"),
            Degradation::DownUp { factor } => write!(f, "downup:{factor}"),
        }
    }
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match split_arg(s, "degradation")? {
            ("noise", v) => Ok(Degradation::GaussianNoise { sigma: num(v, s)? }),
            ("blur", v) => Ok(Degradation::BoxBlur { k: num(v, s)? }),
            ("downup", v) => Ok(Degradation::DownUp { factor: num(v, s)? }),
            _ => Err(Error::Config(format!(
                "unknown degradation `{s}` (noise:σ | blur:k | downup:f)"
            ))),
        }
    }
}

impl Degradation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Degradation::GaussianNoise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => Err(
                Error::Config(format!("noise σ must be finite and ≥ 0, got {sigma}")),
            ),
            Degradation::BoxBlur { k } if k == 0 || k % 2 == 0 => Err(Error::Config(format!(
                "blur kernel must be odd and ≥ 1, got {k}"
            ))),
            Degradation::DownUp { factor } if factor != 2 && factor != 4 => Err(Error::Config(
                format!("down_up factor must be 2 or 4, got {factor}"),
            )),
            _ => Ok(()),
        }
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    if xs.is_empty() {
        return "none".into();
    }
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list<T: FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    if s.trim() == "none" {
        return Ok(Vec::new());
    }
    s.split(',').map(str::parse).collect()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "synthetic images must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        match self.layout {
            Layout::Voronoi { sites: 0 } => {
                return Err(Error::Config("voronoi needs ≥ 1 site".into()))
            }
            Layout::Rectangles { .. } | Layout::Voronoi { .. } => {}
        }
        if self.textures.is_empty() {
            return Err(Error::Config(
                "at least one texture family is required".into(),
            ));
        }
        self.degradations.iter().try_for_each(Degradation::validate)
    }

    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        kv.set_if("height", &mut self.height)?;
        kv.set_if("width", &mut self.width)?;
        kv.set_if("layout", &mut self.layout)?;
        if let Some(t) = kv.get("textures") {
            self.textures = parse_list(t)?;
        }
        if let Some(d) = kv.get("degrade") {
            self.degradations = parse_list(d)?;
        }
        kv.set_if("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.push("height", self.height);
        kv.push("width", self.width);
        kv.push("layout", self.layout);
        kv.push("textures", join(&self.textures));
        kv.push("degrade", join(&self.degradations));
        kv.push("seed", self.seed);
        kv
    }

    /// Seed of sample `idx` in a dataset generated from this spec.
    pub fn sample_seed(&self, idx: usize) -> u64 {
        self.seed ^ (idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

fn layout_labels(h: usize, w: usize, layout: Layout, rng: &mut ChaCha8Rng) -> Vec<u32> {
    match layout {
        Layout::Voronoi { sites } => {
            let pts: Vec<(f64, f64)> = (0..sites)
                .map(|_| (rng.gen::<f64>() * h as f64, rng.gen::<f64>() * w as f64))
                .collect();
            let mut labels = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                    let mut best = (f64::INFINITY, 0u32);
                    for (k, &(py, px)) in pts.iter().enumerate() {
                        let d = (py - y).powi(2) + (px - x).powi(2);
                        if d < best.0 {
                            best = (d, k as u32);
                        }
                    }
                    labels.push(best.1);
                }
            }
            labels
        }
        Layout::Rectangles { count } => {
            let mut labels = vec![0u32; h * w];
            for k in 1..=count as u32 {
                let rh = rng.gen_range(h / 6..=h / 2).max(1);
                let rw = rng.gen_range(w / 6..=w / 2).max(1);
                let top = rng.gen_range(0..=h - rh);
                let left = rng.gen_range(0..=w - rw);
                for r in top..top + rh {
                    labels[r * w + left..r * w + left + rw].fill(k);
                }
            }
            labels
        }
    }
}

/// Per-region texture function of pixel `(row, col)`.
#[derive(Clone, Copy, Debug)]
enum Texture {
    Constant(f64),
    Sinusoid {
        base: f64,
        amp: f64,
        fy: f64,
        fx: f64,
        phase: f64,
    },
    Gradient {
        base: f64,
        slope_y: f64,
        slope_x: f64,
    },
}

const FREQ_LO: f64 = 0.04;
const FREQ_HI: f64 = 0.4;

impl Texture {
    fn sample(family: TextureFamily, band: usize, bands: usize, rng: &mut ChaCha8Rng) -> Self {
        match family {
            TextureFamily::Constant => Texture::Constant(rng.gen_range(0.15..0.85)),
            TextureFamily::Sinusoid => {
                let width = (FREQ_HI - FREQ_LO) / bands as f64;
                let f = FREQ_LO + (band as f64 + rng.gen::<f64>()) * width;
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                Texture::Sinusoid {
                    base: rng.gen_range(0.35..0.65),
                    amp: rng.gen_range(0.1..0.3),
                    fy: f * theta.sin(),
                    fx: f * theta.cos(),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            }
            TextureFamily::Gradient => {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let slope = rng.gen_range(0.2..0.6) / 32.0;
                Texture::Gradient {
                    base: rng.gen_range(0.2..0.8),
                    slope_y: slope * theta.sin(),
                    slope_x: slope * theta.cos(),
                }
            }
        }
    }

    fn eval(&self, r: usize, c: usize, center: (f64, f64)) -> f64 {
        let (y, x) = (r as f64, c as f64);
        let v = match *self {
            Texture::Constant(v) => v,
            Texture::Sinusoid {
                base,
                amp,
                fy,
                fx,
                phase,
            } => base + amp * (std::f64::consts::TAU * (fy * y + fx * x) + phase).sin(),
            Texture::Gradient {
                base,
                slope_y,
                slope_x,
            } => base + slope_y * (y - center.0) + slope_x * (x - center.1),
        };
        v.clamp(0.0, 1.0)
    }
}

fn clamp01(t: Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.clamp(0.0, 1.0))
}

fn plane(x: &Tensor<f32>) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(crate::error::dim_err!(
            "image needs [.., H, W], got {:?}",
            s
        ));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

fn gaussian_noise(x: &Tensor<f32>, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    if sigma == 0.0 {
        return x.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("σ validated finite and positive");
    let data = x
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(rng)) as f32)
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// `k × k` mean filter with edge clamping, per plane.
pub fn box_blur(x: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    Degradation::BoxBlur { k }.validate()?;
    let (h, w) = plane(x)?;
    if k == 1 {
        return Ok(x.clone());
    }
    let r = (k / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = Vec::with_capacity(x.numel());
    for p in x.data().chunks(h * w) {
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0f64;
                for di in -r..=r {
                    for dj in -r..=r {
                        s += p[clampi(i as isize + di, h) * w + clampi(j as isize + dj, w)] as f64;
                    }
                }
                out.push((s / (k * k) as f64) as f32);
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Half-pixel bilinear sample positions from `src` to `dst` samples.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos =
                ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Nearest-neighbour downscale by `factor` then bilinear upscale back.
pub fn down_up(x: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    Degradation::DownUp { factor }.validate()?;
    let (h, w) = plane(x)?;
    let (h2, w2) = ((h / factor).max(1), (w / factor).max(1));
    let ty = bilinear_taps(h2, h);
    let tx = bilinear_taps(w2, w);
    let mut out = Vec::with_capacity(x.numel());
    for p in x.data().chunks(h * w) {
        let small: Vec<f64> = (0..h2)
            .flat_map(|i| {
                let si = nearest_source_index(i, h, h2);
                (0..w2).map(move |j| p[si * w + nearest_source_index(j, w, w2)] as f64)
            })
            .collect();
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
                let top = lerp(small[y0 * w2 + x0], small[y0 * w2 + x1], fx);
                let bot = lerp(small[y1 * w2 + x0], small[y1 * w2 + x1], fx);
                out.push(lerp(top, bot, fy) as f32);
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Applies one degradation and clamps to `[0, 1]`.
pub fn degrade(hq: &Tensor<f32>, d: Degradation, seed: u64) -> Result<Tensor<f32>> {
    d.validate()?;
    let out = match d {
        Degradation::GaussianNoise { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            gaussian_noise(hq, sigma, &mut rng)
        }
        Degradation::BoxBlur { k } => box_blur(hq, k)?,
        Degradation::DownUp { factor } => down_up(hq, factor)?,
    };
    Ok(clamp01(out))
}

/// Generates one pair from `spec.seed`.
pub fn gen_sample(spec: &SynthSpec) -> Result<SamplePair> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let raw = layout_labels(h, w, spec.layout, &mut rng);
    let part = RegionPartition::from_labels(h, w, &raw)?;
    let l = part.num_regions();

    let mut bands: Vec<usize> = (0..l).collect();
    bands.shuffle(&mut rng);
    let textures: Vec<Texture> = (0..l)
        .map(|i| {
            let family = *spec.textures.choose(&mut rng).expect("validated non-empty");
            Texture::sample(family, bands[i], l, &mut rng)
        })
        .collect();
    let mut centers = vec![(0.0, 0.0, 0usize); l];
    for (k, &lab) in part.labels().iter().enumerate() {
        let c = &mut centers[lab as usize];
        c.0 += (k / w) as f64;
        c.1 += (k % w) as f64;
        c.2 += 1;
    }
    let centers: Vec<(f64, f64)> = centers
        .iter()
        .map(|c| (c.0 / c.2 as f64, c.1 / c.2 as f64))
        .collect();

    let data: Vec<f32> = part
        .labels()
        .iter()
        .enumerate()
        .map(|(k, &lab)| textures[lab as usize].eval(k / w, k % w, centers[lab as usize]) as f32)
        .collect();
    let hq = Tensor::new(&[1, 1, h, w], data)?;
    let mut lq = hq.clone();
    for d in &spec.degradations {
        lq = degrade(&lq, *d, rng.gen())?;
    }
    Ok(SamplePair { hq, lq, part })
}

/// One manifest line: `idx`, then paths relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub idx: usize,
    pub hq: PathBuf,
    pub lq: PathBuf,
    pub mask: PathBuf,
}

fn entry_for(idx: usize) -> ManifestEntry {
    ManifestEntry {
        idx,
        hq: format!("{idx:05}_hq.ratt").into(),
        lq: format!("{idx:05}_lq.ratt").into(),
        mask: format!("{idx:05}_mask.ratm").into(),
    }
}

/// Writes `count` samples, their manifest and the spec into `dir`. Sample
/// `i` uses seed [`SynthSpec::sample_seed`]`(i)`, so output depends only on
/// `(spec, count)`.
pub fn gen_dataset(
    spec: &SynthSpec,
    count: usize,
    dir: &Path,
    pgm: bool,
) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<ManifestEntry> = (0..count)
        .into_par_iter()
        .map(|idx| -> Result<ManifestEntry> {
            let pair = gen_sample(&SynthSpec {
                seed: spec.sample_seed(idx),
                ..spec.clone()
            })?;
            let e = entry_for(idx);
            save_tensor(&dir.join(&e.hq), &pair.hq)?;
            save_tensor(&dir.join(&e.lq), &pair.lq)?;
            save_partition(&dir.join(&e.mask), &pair.part)?;
            if pgm {
                write_pgm(&dir.join(format!("{idx:05}_hq.pgm")), &pair.hq)?;
                write_pgm(&dir.join(format!("{idx:05}_lq.pgm")), &pair.lq)?;
            }
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let mut manifest = String::new();
    for e in &entries {
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.idx,
            e.hq.display(),
            e.lq.display(),
            e.mask.display()
        ));
    }
    let mpath = dir.join(MANIFEST_NAME);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let spath = dir.join(SPEC_NAME);
    fs::write(&spath, spec.to_kv().to_text()).map_err(|e| Error::io(&spath, e))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || {
                Error::Format(format!(
                    "{}:{}: malformed manifest line",
                    path.display(),
                    n + 1
                ))
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                idx: f[0].parse().map_err(|_| bad())?,
                hq: f[1].into(),
                lq: f[2].into(),
                mask: f[3].into(),
            })
        })
        .collect()
}

fn load_entry(dir: &Path, e: &ManifestEntry) -> Result<SamplePair> {
    let hq = load_tensor::<f32>(&dir.join(&e.hq))?;
    let lq = load_tensor::<f32>(&dir.join(&e.lq))?;
    let part = load_partition(&dir.join(&e.mask))?;
    let (h, w) = plane(&hq)?;
    if hq.shape() != lq.shape() || (part.height(), part.width()) != (h, w) {
        return Err(Error::Format(format!(
            "sample {} in {}: hq {:?}, lq {:?}, mask {}x{} disagree",
            e.idx,
            dir.display(),
            hq.shape(),
            lq.shape(),
            part.height(),
            part.width()
        )));
    }
    Ok(SamplePair { hq, lq, part })
}

pub fn load_sample(dir: &Path, idx: usize) -> Result<SamplePair> {
    let entries = read_manifest(dir)?;
    let e = entries.iter().find(|e| e.idx == idx).ok_or_else(|| {
        Error::Format(format!(
            "sample {idx} not listed in {}",
            dir.join(MANIFEST_NAME).display()
        ))
    })?;
    load_entry(dir, e)
}

/// Every sample of the manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<SamplePair>> {
    read_manifest(dir)?
        .iter()
        .map(|e| load_entry(dir, e))
        .collect()
}

/// Binary PGM (P5, maxval 255) of the first plane.
pub fn write_pgm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w) = plane(img)?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        img.data()[..h * w]
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_text_roundtrip() {
        let spec = SynthSpec {
            layout: Layout::Rectangles { count: 4 },
            textures: vec![TextureFamily::Constant, TextureFamily::Gradient],
            degradations: vec![
                Degradation::BoxBlur { k: 3 },
                Degradation::GaussianNoise { sigma: 0.05 },
            ],
            seed: 9,
            ..SynthSpec::default()
        };
        let mut back = SynthSpec::default();
        back.apply_kv(&spec.to_kv()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn bilinear_taps_cover_edges() {
        let t = bilinear_taps(4, 8);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[7], (3, 3, 0.0));
    }
}
