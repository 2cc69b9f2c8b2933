//! Writes a small synthetic dataset and prints its manifest.
//!
//! `cargo run --example gen_dataset -- <out_dir> [count]`

use std::path::PathBuf;

use rat_core::synth::{gen_dataset, Degradation, Layout, SynthSpec, TextureFamily};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synth_data".into()));
    let count: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(8);
    let spec = SynthSpec {
        height: 48,
        width: 48,
        layout: Layout::Rectangles { count: 5 },
        textures: vec![TextureFamily::Sinusoid, TextureFamily::Gradient],
        degradations: vec![
            Degradation::BoxBlur { k: 3 },
            Degradation::GaussianNoise { sigma: 0.05 },
        ],
        seed: 11,
    };
    let entries = gen_dataset(&spec, count, &out, true)?;
    for e in &entries {
        println!("{e:?}");
    }
    println!("wrote {} samples to {}", entries.len(), out.display());
    Ok(())
}
