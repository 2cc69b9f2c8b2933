//! Dense masked attention against the gathered per-region loop, plus a
//! check that a perturbation in one region does not leak into another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rat_core::attention::{gathered_region_attention, mh_masked_attention, AttnParams, ScaleMode};
use rat_core::params::ParamStore;
use rat_core::region::{AttentionBias, RegionPartition, DEFAULT_LAMBDA};
use rat_core::Tensor;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w, c) = (8, 8, 16);
    // left half, top right, bottom right
    let labels: Vec<u32> = (0..h * w)
        .map(|k| match (k / w < h / 2, k % w < w / 2) {
            (_, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
        })
        .collect();
    let part = RegionPartition::from_labels(h, w, &labels)?;
    let mut store = ParamStore::<f64>::new();
    let p = AttnParams::init(&mut store, "attn", c, 4, ScaleMode::HeadDim, &mut rng)?;
    let x = Tensor::<f64>::rand_uniform(&[h * w, c], -1.0, 1.0, &mut rng);

    let bias = AttentionBias::from_partition(&part, DEFAULT_LAMBDA);
    let dense = mh_masked_attention(&x, Some(&bias), &store, &p)?;
    let gathered = gathered_region_attention(&x, part.labels(), &store, &p)?;
    println!("regions {:?}", part.region_sizes());
    println!(
        "dense vs gathered max rel diff {:.2e}",
        dense.rel_inf_diff(&gathered, 1e-12)?
    );

    let mut x2 = x.clone();
    for (i, &l) in part.labels().iter().enumerate() {
        if l == 2 {
            x2.data_mut()[i * c..(i + 1) * c]
                .iter_mut()
                .for_each(|v| *v += 5.0);
        }
    }
    let moved = mh_masked_attention(&x2, Some(&bias), &store, &p)?;
    let leak = part
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != 2)
        .flat_map(|(i, _)| i * c..(i + 1) * c)
        .map(|k| (dense.data()[k] - moved.data()[k]).abs())
        .fold(0.0, f64::max);
    println!("change outside the perturbed region {leak:.2e}");
    Ok(())
}
