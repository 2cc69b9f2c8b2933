use std::fmt;
use std::str::FromStr;

use crate::attention::ScaleMode;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::region::DEFAULT_LAMBDA;

/// Which attention the first layer of every latent block uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionKind {
    /// Region-masked attention from the image partition.
    #[default]
    Rmsa,
    /// Window attention in both layers of each block.
    WmsaOnly,
    /// Unmasked attention over the whole latent map.
    GlobalMsa,
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmsa" => Ok(AttentionKind::Rmsa),
            "wmsa" | "wmsa_only" => Ok(AttentionKind::WmsaOnly),
            "msa" | "global_msa" => Ok(AttentionKind::GlobalMsa),
            _ => Err(Error::Config(format!(
                "unknown attention `{s}` (rmsa | wmsa | msa)"
            ))),
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Rmsa => "rmsa",
            AttentionKind::WmsaOnly => "wmsa",
            AttentionKind::GlobalMsa => "msa",
        })
    }
}

/// Convolution block used in the encoder and decoder. Only the simple
/// residual block exists today.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlockKind {
    /// `x + conv3x3(gelu(conv3x3(LN(x))))`.
    #[default]
    Simple,
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(BlockKind::Simple),
            _ => Err(Error::Config(format!("unknown block `{s}` (simple)"))),
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("simple")
    }
}

/// Architecture hyperparameters. Two encoder levels, each halving the
/// spatial size and doubling channels (C → 2C → 4C); attention runs at
/// 4C channels on the 1/4-resolution latent map.
#[derive(Clone, Debug, PartialEq)]
pub struct RatConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub n4: usize,
    pub n5: usize,
    pub heads: usize,
    pub window: usize,
    pub lambda: f64,
    pub mlp_ratio: usize,
    pub scale_mode: ScaleMode,
    pub attention: AttentionKind,
    pub block: BlockKind,
}

impl Default for RatConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RatConfig {
    /// Desk-scale default.
    pub fn toy() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            n1: 1,
            n2: 1,
            n3: 2,
            n4: 1,
            n5: 1,
            heads: 4,
            window: 4,
            lambda: DEFAULT_LAMBDA,
            mlp_ratio: 4,
            scale_mode: ScaleMode::HeadDim,
            attention: AttentionKind::Rmsa,
            block: BlockKind::Simple,
        }
    }

    /// Full-size network: C = 64, 2 conv blocks per level, 12 RAT blocks,
    /// 8 heads, window 4.
    pub fn paper() -> Self {
        Self {
            base_channels: 64,
            n1: 2,
            n2: 2,
            n3: 12,
            n4: 2,
            n5: 2,
            heads: 8,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (toy | paper)"
            ))),
        }
    }

    pub fn latent_channels(&self) -> usize {
        4 * self.base_channels
    }

    /// Spatial sizes are padded to a multiple of this.
    pub fn size_multiple(&self) -> usize {
        4 * self.window
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.base_channels == 0 {
            return bad("channel counts must be >= 1".into());
        }
        if self.heads == 0 {
            return bad("heads must be >= 1".into());
        }
        let c = self.latent_channels();
        if !c.is_multiple_of(self.heads) {
            return bad(format!(
                "latent channels {c} not divisible by {} heads",
                self.heads
            ));
        }
        if self.window == 0 {
            return bad("window must be >= 1".into());
        }
        if !self.lambda.is_finite() || self.lambda >= 0.0 {
            return bad(format!(
                "lambda must be finite and negative, got {}",
                self.lambda
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1".into());
        }
        Ok(())
    }

    /// Applies `preset` (if present) then every known key of `kv`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = match kv.get("preset") {
            Some(p) => Self::preset(p)?,
            None => Self::toy(),
        };
        c.apply_kv(kv)?;
        Ok(c)
    }

    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        kv.set_if("in_channels", &mut self.in_channels)?;
        kv.set_if("base_channels", &mut self.base_channels)?;
        kv.set_if("n1", &mut self.n1)?;
        kv.set_if("n2", &mut self.n2)?;
        kv.set_if("n3", &mut self.n3)?;
        kv.set_if("n4", &mut self.n4)?;
        kv.set_if("n5", &mut self.n5)?;
        kv.set_if("heads", &mut self.heads)?;
        kv.set_if("window", &mut self.window)?;
        kv.set_if("lambda", &mut self.lambda)?;
        kv.set_if("mlp_ratio", &mut self.mlp_ratio)?;
        if let Some(s) = kv.get("scale_mode") {
            self.scale_mode = ScaleMode::parse(s).ok_or_else(|| {
                Error::Config(format!(
                    "unknown scale_mode `{s}` (head-dim | literal-heads)"
                ))
            })?;
        }
        kv.set_if("attention", &mut self.attention)?;
        kv.set_if("block", &mut self.block)?;
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.push("in_channels", self.in_channels);
        kv.push("base_channels", self.base_channels);
        kv.push("n1", self.n1);
        kv.push("n2", self.n2);
        kv.push("n3", self.n3);
        kv.push("n4", self.n4);
        kv.push("n5", self.n5);
        kv.push("heads", self.heads);
        kv.push("window", self.window);
        kv.push("lambda", format!("{:?}", self.lambda));
        kv.push("mlp_ratio", self.mlp_ratio);
        kv.push("scale_mode", self.scale_mode.as_str());
        kv.push("attention", self.attention);
        kv.push("block", self.block);
        kv
    }
}
