//! Adam with cosine annealing, the training loop and test-set evaluation.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KvConfig;
use crate::error::{dim_err, Error, Result};
use crate::loss::{focal_region_loss, l1_loss, DEFAULT_DELTA, DEFAULT_GAMMA};
use crate::metrics::{psnr, ssim, EvalReport};
use crate::model::{save_model, RatConfig, RatModel};
use crate::params::ParamStore;
use crate::region::RegionPartition;
use crate::synth::{load_dataset, SamplePair};
use crate::tensor::{Graph, Real, Tensor};

pub const DEFAULT_LR0: f64 = 2e-4;
pub const DEFAULT_LR_MIN: f64 = 1e-6;

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`; the endpoints return
/// `lr0` and `lr_min` exactly. Steps past `total` stay at `lr_min`.
pub fn cosine_lr(step: usize, lr0: f64, lr_min: f64, total: usize) -> f64 {
    if step == 0 {
        return lr0;
    }
    if step >= total {
        return lr_min;
    }
    let t = step as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Bias-corrected Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with learning rate `lr`. `grads[i]` belongs to the `i`-th
    /// parameter of `store`; `None` counts as zero. Nothing is modified when
    /// any gradient is non-finite.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<&Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(dim_err!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            ));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != store.get(id).shape() {
                    return Err(dim_err!(
                        "gradient {:?} for parameter `{}` {:?}",
                        g.shape(),
                        store.name(id),
                        store.get(id).shape()
                    ));
                }
                if g.has_non_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for parameter `{}` at step {}",
                        store.name(id),
                        self.step + 1
                    )));
                }
            }
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let wd = T::lit(c.weight_decay);
        for (k, p) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let g = grads[k].map(Tensor::data);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(T::zero(), |g| g[i]) + wd * *w;
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                *w = *w - step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Optimizer state plus schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub step: usize,
    pub adam: Adam<T>,
    pub lr0: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub seed: u64,
}

impl<T: Real> TrainState<T> {
    pub fn lr(&self) -> f64 {
        cosine_lr(self.step, self.lr0, self.lr_min, self.total_steps)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    L1,
    #[default]
    Focal,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1),
            "focal" | "focal_region" => Ok(LossKind::Focal),
            _ => Err(Error::Config(format!("unknown loss `{s}` (l1 | focal)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L1 => "l1",
            LossKind::Focal => "focal",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: RatConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub steps: usize,
    pub batch: usize,
    /// Square crop size; 0 trains on whole images.
    pub patch: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub gamma: f64,
    pub delta: f64,
    pub seed: u64,
    pub log_every: usize,
    pub val_every: usize,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: RatConfig::toy(),
            data_dir: None,
            out_dir: None,
            steps: 2000,
            batch: 1,
            patch: 32,
            lr0: DEFAULT_LR0,
            lr_min: DEFAULT_LR_MIN,
            weight_decay: 0.0,
            loss: LossKind::Focal,
            gamma: DEFAULT_GAMMA,
            delta: DEFAULT_DELTA,
            seed: 0,
            log_every: 10,
            val_every: 100,
            val_fraction: 0.1,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "data",
    "out",
    "steps",
    "batch",
    "patch",
    "lr0",
    "lr_min",
    "weight_decay",
    "loss",
    "gamma",
    "delta",
    "seed",
    "log_every",
    "val_every",
    "val_fraction",
];
const MODEL_KEYS: &[&str] = &[
    "preset",
    "in_channels",
    "base_channels",
    "n1",
    "n2",
    "n3",
    "n4",
    "n5",
    "heads",
    "window",
    "lambda",
    "mlp_ratio",
    "scale_mode",
    "attention",
    "block",
];

impl TrainConfig {
    /// Trainer and model keys from one file; unknown keys are errors.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        if let Some(k) = kv
            .keys()
            .find(|k| !TRAIN_KEYS.contains(k) && !MODEL_KEYS.contains(k))
        {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
        let mut c = Self {
            model: RatConfig::from_kv(kv)?,
            ..Self::default()
        };
        c.data_dir = kv.get("data").map(PathBuf::from);
        c.out_dir = kv.get("out").map(PathBuf::from);
        kv.set_if("steps", &mut c.steps)?;
        kv.set_if("batch", &mut c.batch)?;
        kv.set_if("patch", &mut c.patch)?;
        kv.set_if("lr0", &mut c.lr0)?;
        kv.set_if("lr_min", &mut c.lr_min)?;
        kv.set_if("weight_decay", &mut c.weight_decay)?;
        kv.set_if("loss", &mut c.loss)?;
        kv.set_if("gamma", &mut c.gamma)?;
        kv.set_if("delta", &mut c.delta)?;
        kv.set_if("seed", &mut c.seed)?;
        kv.set_if("log_every", &mut c.log_every)?;
        kv.set_if("val_every", &mut c.val_every)?;
        kv.set_if("val_fraction", &mut c.val_fraction)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvConfig::load(path)?)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.model.to_kv();
        if let Some(d) = &self.data_dir {
            kv.push("data", d.display());
        }
        if let Some(o) = &self.out_dir {
            kv.push("out", o.display());
        }
        kv.push("steps", self.steps);
        kv.push("batch", self.batch);
        kv.push("patch", self.patch);
        kv.push("lr0", format!("{:?}", self.lr0));
        kv.push("lr_min", format!("{:?}", self.lr_min));
        kv.push("weight_decay", format!("{:?}", self.weight_decay));
        kv.push("loss", self.loss);
        kv.push("gamma", format!("{:?}", self.gamma));
        kv.push("delta", format!("{:?}", self.delta));
        kv.push("seed", self.seed);
        kv.push("log_every", self.log_every);
        kv.push("val_every", self.val_every);
        kv.push("val_fraction", self.val_fraction);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return bad(format!(
                "need 0 <= lr_min <= lr0 and lr0 > 0, got {} / {}",
                self.lr_min, self.lr0
            ));
        }
        if !(self.gamma >= 0.0 && self.delta >= 0.0) {
            return bad(format!(
                "need γ >= 0 and δ >= 0, got {} / {}",
                self.gamma, self.delta
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            ));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0".into());
        }
        Ok(())
    }
}

/// Progress notifications from [`train_in_memory`].
#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    Step { step: usize, loss: f64, lr: f64 },
    Val { step: usize, psnr: f64, best: bool },
}

impl fmt::Display for TrainEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainEvent::Step { step, loss, lr } => {
                write!(f, "step={step} loss={loss:.6} lr={lr:.6e}")
            }
            TrainEvent::Val { step, psnr, best } => {
                write!(f, "step={step} val_psnr={psnr:.4} best={}", u8::from(*best))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_model: RatModel<f32>,
    pub best_model: RatModel<f32>,
    pub best_step: usize,
    pub best_val_psnr: Option<f64>,
    /// Training loss of every step.
    pub losses: Vec<f64>,
    pub state: TrainState<f32>,
}

fn check_samples(samples: &[SamplePair], in_channels: usize, what: &str) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let shape = s.lq.shape();
        let ok = shape.len() == 4
            && shape[0] == 1
            && shape[1] == in_channels
            && s.hq.shape() == shape
            && (s.part.height(), s.part.width()) == (shape[2], shape[3]);
        if !ok {
            return Err(dim_err!(
                "{what} sample {i}: lq {:?}, hq {:?}, partition {}x{} incompatible with {in_channels} input channels",
                shape,
                s.hq.shape(),
                s.part.height(),
                s.part.width()
            ));
        }
    }
    Ok(())
}

fn crop_image(t: &Tensor<f32>, top: usize, left: usize, ph: usize, pw: usize) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for r in top..top + ph {
            let base = (ch * h + r) * w + left;
            out.extend_from_slice(&t.data()[base..base + pw]);
        }
    }
    Tensor::new(&[1, c, ph, pw], out).expect("crop inside bounds")
}

/// Random aligned crop of `(lq, hq, partition)`.
fn random_patch(
    s: &SamplePair,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Tensor<f32>, RegionPartition)> {
    let (h, w) = (s.part.height(), s.part.width());
    if patch == 0 || (patch >= h && patch >= w) {
        return Ok((s.lq.clone(), s.hq.clone(), s.part.clone()));
    }
    let (ph, pw) = (patch.min(h), patch.min(w));
    let top = rng.gen_range(0..=h - ph);
    let left = rng.gen_range(0..=w - pw);
    Ok((
        crop_image(&s.lq, top, left, ph, pw),
        crop_image(&s.hq, top, left, ph, pw),
        s.part.crop(top, left, ph, pw)?,
    ))
}

/// Mean PSNR of `model` on `samples`.
fn val_psnr(model: &RatModel<f32>, samples: &[SamplePair]) -> Result<f64> {
    let r = evaluate(model, samples)?;
    Ok(r.psnr.mean)
}

/// Trains a fresh model seeded by `cfg.seed`. Deterministic for a given
/// configuration and data.
pub fn train_in_memory(
    cfg: &TrainConfig,
    train: &[SamplePair],
    val: &[SamplePair],
    on_event: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    check_samples(train, cfg.model.in_channels, "training")?;
    check_samples(val, cfg.model.in_channels, "validation")?;

    let mut model = RatModel::<f32>::new(&cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1CE_5EED);
    let mut state = TrainState {
        step: 0,
        adam: Adam::new(
            model.store(),
            AdamConfig {
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            },
        ),
        lr0: cfg.lr0,
        lr_min: cfg.lr_min,
        total_steps: cfg.steps,
        seed: cfg.seed,
    };

    let mut best = (model.clone(), 0usize, None::<f64>);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled above"));
        }

        let mut g = Graph::new();
        let bind = model.store().bind(&mut g, true);
        let mut total = None;
        for &i in &batch {
            let (lq, hq, part) = random_patch(&train[i], cfg.patch, &mut rng)?;
            let pred = model.forward_graph(&mut g, &bind, &lq, &part)?;
            let l = match cfg.loss {
                LossKind::L1 => l1_loss(&mut g, pred, &hq)?,
                LossKind::Focal => {
                    focal_region_loss(&mut g, pred, &hq, &part, cfg.gamma, cfg.delta)?.0
                }
            };
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let mut loss = total.expect("batch >= 1");
        if cfg.batch > 1 {
            loss = g.mul_scalar(loss, 1.0 / cfg.batch as f64);
        }
        let loss_value = g.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}",
                step + 1
            )));
        }
        let grads = g.backward(loss)?;
        let per_param: Vec<Option<&Tensor<f32>>> =
            bind.vars().iter().map(|&v| grads.get(v)).collect();
        let lr = state.lr();
        state.adam.step(model.store_mut(), &per_param, lr)?;
        state.step += 1;
        losses.push(loss_value);

        let done = state.step;
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == cfg.steps || done == 1) {
            on_event(&TrainEvent::Step {
                step: done,
                loss: loss_value,
                lr,
            });
        }
        if !val.is_empty()
            && ((cfg.val_every > 0 && done % cfg.val_every == 0) || done == cfg.steps)
        {
            let p = val_psnr(&model, val)?;
            let improved = best.2.is_none_or(|b| p > b);
            if improved {
                best = (model.clone(), done, Some(p));
            }
            on_event(&TrainEvent::Val {
                step: done,
                psnr: p,
                best: improved,
            });
        }
    }
    if val.is_empty() {
        best = (model.clone(), cfg.steps, None);
    }
    Ok(TrainOutcome {
        final_model: model,
        best_model: best.0,
        best_step: best.1,
        best_val_psnr: best.2,
        losses,
        state,
    })
}

/// Splits off the last `fraction` of the samples (at least one when there
/// are two or more) for validation.
pub fn split_validation(
    mut samples: Vec<SamplePair>,
    fraction: f64,
) -> (Vec<SamplePair>, Vec<SamplePair>) {
    let n = samples.len();
    let mut n_val = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let val = samples.split_off(n - n_val);
    (samples, val)
}

/// Paths and results of a file-based training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_step: usize,
    pub best_val_psnr: Option<f64>,
    pub first_loss: f64,
    pub last_loss: f64,
}

/// Loads the dataset named by `cfg.data_dir`, trains, and writes
/// `train.cfg`, `metrics.log`, `val.log`, `final.ratk` and `best.ratk`
/// into `cfg.out_dir`.
pub fn run_training(cfg: &TrainConfig, echo: &mut dyn FnMut(&TrainEvent)) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset directory (`data`) configured".into()))?;
    let out = cfg
        .out_dir
        .as_ref()
        .ok_or_else(|| Error::Config("no output directory (`out`) configured".into()))?;
    let (train, val) = split_validation(load_dataset(data)?, cfg.val_fraction);
    if train.is_empty() {
        return Err(Error::Config(format!(
            "dataset {} has no samples",
            data.display()
        )));
    }
    check_samples(&train, cfg.model.in_channels, "training")?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("train.cfg");
    fs::write(&cfg_path, cfg.to_kv().to_text()).map_err(|e| Error::io(&cfg_path, e))?;

    let open = |name: &str| -> Result<(fs::File, PathBuf)> {
        let p = out.join(name);
        Ok((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
    };
    let (mut metrics, metrics_path) = open("metrics.log")?;
    let (mut val_log, val_path) = open("val.log")?;
    let mut io_err = None;
    let outcome = train_in_memory(cfg, &train, &val, &mut |ev| {
        let r = match ev {
            TrainEvent::Step { .. } => {
                writeln!(metrics, "{ev}").map_err(|e| Error::io(&metrics_path, e))
            }
            TrainEvent::Val { .. } => {
                writeln!(val_log, "{ev}").map_err(|e| Error::io(&val_path, e))
            }
        };
        if let Err(e) = r {
            io_err.get_or_insert(e);
        }
        echo(ev);
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    let final_checkpoint = out.join("final.ratk");
    let best_checkpoint = out.join("best.ratk");
    save_model(&final_checkpoint, &outcome.final_model)?;
    save_model(&best_checkpoint, &outcome.best_model)?;
    Ok(TrainSummary {
        out_dir: out.clone(),
        final_checkpoint,
        best_checkpoint,
        best_step: outcome.best_step,
        best_val_psnr: outcome.best_val_psnr,
        first_loss: outcome.losses.first().copied().unwrap_or(f64::NAN),
        last_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
    })
}

/// PSNR/SSIM of `model` restoring each sample, in sample order.
pub fn evaluate<T: Real>(model: &RatModel<T>, samples: &[SamplePair]) -> Result<EvalReport> {
    let pairs = samples
        .par_iter()
        .map(|s| -> Result<(f64, f64)> {
            let out = model.forward(&s.lq.cast::<T>(), &s.part)?;
            let out = out.cast::<f32>().map(|v| v.clamp(0.0, 1.0));
            Ok((psnr(&out, &s.hq, 1.0)?, ssim(&out, &s.hq)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_pairs(pairs))
}

/// Metrics of the degraded inputs themselves.
pub fn evaluate_inputs(samples: &[SamplePair]) -> Result<EvalReport> {
    let pairs = samples
        .iter()
        .map(|s| Ok((psnr(&s.lq, &s.hq, 1.0)?, ssim(&s.lq, &s.hq)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_pairs(pairs))
}
