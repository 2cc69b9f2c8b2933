//! Saves a model, loads it back and confirms the outputs match bit for bit.

use rat_core::model::{load_model, save_model};
use rat_core::region::RegionPartition;
use rat_core::synth::{gen_sample, SynthSpec};
use rat_core::{RatConfig, RatModel};

fn main() -> anyhow::Result<()> {
    let model = RatModel::<f32>::new(&RatConfig::toy(), 1)?;
    let path = std::env::temp_dir().join("example.ratk");
    save_model(&path, &model)?;
    let back: RatModel<f32> = load_model(&path)?;
    println!(
        "{} parameters, {} bytes on disk",
        back.num_params(),
        std::fs::metadata(&path)?.len()
    );

    let s = gen_sample(&SynthSpec::default())?;
    let a = model.forward(&s.lq, &s.part)?;
    let b = back.forward(&s.lq, &s.part)?;
    println!("outputs identical: {}", a.data() == b.data());
    let single = RegionPartition::single_region(32, 32);
    println!(
        "single-region forward ok: {:?}",
        back.forward(&s.lq, &single)?.shape()
    );
    Ok(())
}
