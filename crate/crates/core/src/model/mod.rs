//! U-shaped restoration network: a convolutional encoder/decoder around a
//! stack of region attention transformer blocks at 1/4 resolution.

mod checkpoint;
mod config;

pub use checkpoint::{
    decode_model, encode_model, load_model, load_model_as, save_model, CHECKPOINT_MAGIC,
};
pub use config::{AttentionKind, BlockKind, RatConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{rmsa_layer, wmsa_layer, TransformerLayerParams, LAYER_NORM_EPS};
use crate::error::{dim_err, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::region::{downscale_partition, AttentionBias, RegionPartition};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Weight and bias of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    fn init<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add_fan_in(
            format!("{name}.weight"),
            &[cout, cin, k, k],
            cin * k * k,
            rng,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<Var> {
        g.conv2d(x, bind.var(self.weight), bind.var(self.bias))
    }
}

/// `x + conv3x3(gelu(conv3x3(LN(x))))`, LN over channels per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams {
    pub norm_gain: ParamId,
    pub norm_shift: ParamId,
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

impl ConvBlockParams {
    fn init<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let norm_gain = store.add(format!("{name}.norm.gain"), Tensor::ones(&[c]));
        let norm_shift = store.add(format!("{name}.norm.shift"), Tensor::zeros(&[c]));
        let conv1 = ConvParams::init(store, &format!("{name}.conv1"), c, c, 3, rng);
        let conv2 = ConvParams::init(store, &format!("{name}.conv2"), c, c, 3, rng);
        Self {
            norm_gain,
            norm_shift,
            conv1,
            conv2,
        }
    }
}

pub fn conv_block<T: Real>(
    g: &mut Graph<T>,
    bind: &Binding,
    x: Var,
    p: &ConvBlockParams,
) -> Result<Var> {
    let t = g.permute(x, &[0, 2, 3, 1])?;
    let t = g.layer_norm(
        t,
        bind.var(p.norm_gain),
        bind.var(p.norm_shift),
        LAYER_NORM_EPS,
    )?;
    let t = g.permute(t, &[0, 3, 1, 2])?;
    let t = p.conv1.apply(g, bind, t)?;
    let t = g.gelu(t);
    let t = p.conv2.apply(g, bind, t)?;
    g.add(x, t)
}

/// One latent block: a region (or substitute) layer then a window layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RatBlockParams {
    pub region: TransformerLayerParams,
    pub window: TransformerLayerParams,
}

#[derive(Clone, Debug)]
pub struct RatModel<T> {
    cfg: RatConfig,
    store: ParamStore<T>,
    input_proj: ConvParams,
    enc1: Vec<ConvBlockParams>,
    down1: ConvParams,
    enc2: Vec<ConvBlockParams>,
    down2: ConvParams,
    latent: Vec<RatBlockParams>,
    up2: ConvParams,
    dec2: Vec<ConvBlockParams>,
    up1: ConvParams,
    dec1: Vec<ConvBlockParams>,
    output_proj: ConvParams,
}

impl<T: Real> RatModel<T> {
    /// Fresh model with fan-in uniform weights and a zero output projection,
    /// so that the initial network is the identity on its input.
    pub fn new(cfg: &RatConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (cin, c) = (cfg.in_channels, cfg.base_channels);
        let blocks =
            |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, n: usize, ch: usize| {
                (0..n)
                    .map(|i| ConvBlockParams::init(store, &format!("{name}.{i}"), ch, rng))
                    .collect::<Vec<_>>()
            };

        let input_proj = ConvParams::init(&mut store, "input_proj", cin, c, 3, &mut rng);
        let enc1 = blocks(&mut store, &mut rng, "enc1", cfg.n1, c);
        let down1 = ConvParams::init(&mut store, "down1", 4 * c, 2 * c, 1, &mut rng);
        let enc2 = blocks(&mut store, &mut rng, "enc2", cfg.n2, 2 * c);
        let down2 = ConvParams::init(&mut store, "down2", 8 * c, 4 * c, 1, &mut rng);
        let lc = cfg.latent_channels();
        let mut latent = Vec::with_capacity(cfg.n3);
        for i in 0..cfg.n3 {
            let mut layer = |kind: &str| {
                TransformerLayerParams::init(
                    &mut store,
                    &format!("latent.{i}.{kind}"),
                    lc,
                    cfg.heads,
                    cfg.mlp_ratio,
                    cfg.scale_mode,
                    &mut rng,
                )
            };
            let region = layer("region")?;
            let window = layer("window")?;
            latent.push(RatBlockParams { region, window });
        }
        let up2 = ConvParams::init(&mut store, "up2", 4 * c, 8 * c, 1, &mut rng);
        let dec2 = blocks(&mut store, &mut rng, "dec2", cfg.n4, 2 * c);
        let up1 = ConvParams::init(&mut store, "up1", 2 * c, 4 * c, 1, &mut rng);
        let dec1 = blocks(&mut store, &mut rng, "dec1", cfg.n5, c);
        let output_proj = ConvParams::init(&mut store, "output_proj", c, cin, 3, &mut rng);
        store.get_mut(output_proj.weight).data_mut().fill(T::zero());

        Ok(Self {
            cfg: cfg.clone(),
            store,
            input_proj,
            enc1,
            down1,
            enc2,
            down2,
            latent,
            up2,
            dec2,
            up1,
            dec1,
            output_proj,
        })
    }

    pub fn config(&self) -> &RatConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn output_proj(&self) -> &ConvParams {
        &self.output_proj
    }

    /// Builds the restored image for `lq: [C_in, H, W]` (or `[1, C_in, H, W]`)
    /// and its partition (`H × W`). Inputs whose sides are not multiples of
    /// `4·window` are reflect-padded bottom/right and the result cropped.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        lq: &Tensor<T>,
        partition: &RegionPartition,
    ) -> Result<Var> {
        let shape = lq.shape().to_vec();
        let s = match shape.as_slice() {
            [1, rest @ ..] if rest.len() == 3 => rest,
            all => all,
        };
        if s.len() != 3 || s[0] != self.cfg.in_channels {
            return Err(dim_err!(
                "model input must be [{}, H, W] or [1, {}, H, W], got {:?}",
                self.cfg.in_channels,
                self.cfg.in_channels,
                shape
            ));
        }
        let (h, w) = (s[1], s[2]);
        if partition.height() != h || partition.width() != w {
            return Err(dim_err!(
                "partition is {}x{} but image is {}x{}",
                partition.height(),
                partition.width(),
                h,
                w
            ));
        }
        let m = self.cfg.size_multiple();
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let padded = reflect_pad(&lq.reshape(s)?, hp, wp)?.reshape(&[1, s[0], hp, wp])?;
        let (lh, lw) = (hp / 4, wp / 4);
        let bias = match self.cfg.attention {
            AttentionKind::Rmsa => {
                let part = downscale_partition(&partition.edge_extend(hp, wp)?, lh, lw)?;
                Some(AttentionBias::from_partition(&part, self.cfg.lambda).materialize::<T>())
            }
            AttentionKind::WmsaOnly | AttentionKind::GlobalMsa => None,
        };

        let x = g.constant(padded);
        let mut t = self.input_proj.apply(g, bind, x)?;
        for b in &self.enc1 {
            t = conv_block(g, bind, t, b)?;
        }
        let skip1 = t;
        let t = g.pixel_unshuffle(t, 2)?;
        let mut t = self.down1.apply(g, bind, t)?;
        for b in &self.enc2 {
            t = conv_block(g, bind, t, b)?;
        }
        let skip2 = t;
        let t = g.pixel_unshuffle(t, 2)?;
        let t = self.down2.apply(g, bind, t)?;

        let lc = self.cfg.latent_channels();
        let t = g.permute(t, &[0, 2, 3, 1])?;
        let mut tokens = g.reshape(t, &[lh * lw, lc])?;
        for blk in &self.latent {
            tokens = match self.cfg.attention {
                AttentionKind::Rmsa | AttentionKind::GlobalMsa => {
                    rmsa_layer(g, bind, tokens, bias.as_ref(), &blk.region)?
                }
                AttentionKind::WmsaOnly => {
                    let grid = g.reshape(tokens, &[lh, lw, lc])?;
                    let y = wmsa_layer(g, bind, grid, self.cfg.window, &blk.region)?;
                    g.reshape(y, &[lh * lw, lc])?
                }
            };
            let grid = g.reshape(tokens, &[lh, lw, lc])?;
            let y = wmsa_layer(g, bind, grid, self.cfg.window, &blk.window)?;
            tokens = g.reshape(y, &[lh * lw, lc])?;
        }
        let t = g.reshape(tokens, &[1, lh, lw, lc])?;
        let t = g.permute(t, &[0, 3, 1, 2])?;

        let t = self.up2.apply(g, bind, t)?;
        let t = g.pixel_shuffle(t, 2)?;
        let mut t = g.add(t, skip2)?;
        for b in &self.dec2 {
            t = conv_block(g, bind, t, b)?;
        }
        let t = self.up1.apply(g, bind, t)?;
        let t = g.pixel_shuffle(t, 2)?;
        let mut t = g.add(t, skip1)?;
        for b in &self.dec1 {
            t = conv_block(g, bind, t, b)?;
        }
        let t = self.output_proj.apply(g, bind, t)?;
        let t = g.crop(t, 0, 0, h, w)?;
        let t = g.reshape(t, &shape)?;
        let skip = g.constant(lq.clone());
        g.add(skip, t)
    }

    /// Inference without gradients.
    pub fn forward(&self, lq: &Tensor<T>, partition: &RegionPartition) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bind = self.store.bind(&mut g, false);
        let y = self.forward_graph(&mut g, &bind, lq, partition)?;
        Ok(g.value(y).clone())
    }
}

/// Mirror index without repeating the edge sample.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Pads `[C, H, W]` to `[C, hp, wp]` by reflection on the bottom and right.
pub fn reflect_pad<T: Real>(x: &Tensor<T>, hp: usize, wp: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || hp < s[1] || wp < s[2] {
        return Err(dim_err!("cannot reflect-pad {:?} to {}x{}", s, hp, wp));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = x.data();
    let mut out = Vec::with_capacity(c * hp * wp);
    for ch in 0..c {
        for r in 0..hp {
            let row = &src[(ch * h + reflect_index(r, h)) * w..][..w];
            out.extend((0..wp).map(|q| row[reflect_index(q, w)]));
        }
    }
    Tensor::new(&[c, hp, wp], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let p = reflect_pad(&x, 4, 5).unwrap();
        assert_eq!(
            p.data(),
            &[
                1., 2., 3., 2., 1., //
                4., 5., 6., 5., 4., //
                1., 2., 3., 2., 1., //
                4., 5., 6., 5., 4.,
            ]
        );
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn rejects_wrong_input_shapes() {
        let m = RatModel::<f32>::new(&RatConfig::toy(), 0).unwrap();
        let part = RegionPartition::single_region(8, 8);
        assert!(m.forward(&Tensor::zeros(&[2, 8, 8]), &part).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 8, 9]), &part).is_err());
    }
}
