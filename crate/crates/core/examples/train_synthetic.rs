//! Trains the toy model on an in-memory synthetic set (64 train / 16 test
//! noisy Voronoi images) and reports test PSNR against the noisy input.
//!
//!     cargo run --release --example train_synthetic -- [steps] [rmsa|wmsa|msa] [l1|focal]

use rat_core::synth::{gen_sample, SynthSpec};
use rat_core::train::{evaluate, evaluate_inputs, train_in_memory, TrainConfig};

fn main() -> rat_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let mut cfg = TrainConfig {
        steps,
        log_every: 100,
        ..TrainConfig::default()
    };
    if let Some(a) = args.next() {
        cfg.model.attention = a.parse()?;
    }
    if let Some(l) = args.next() {
        cfg.loss = l.parse()?;
    }

    let spec = SynthSpec::default();
    let samples = (0..80)
        .map(|i| {
            gen_sample(&SynthSpec {
                seed: spec.sample_seed(i),
                ..spec.clone()
            })
        })
        .collect::<rat_core::Result<Vec<_>>>()?;
    let (train, test) = samples.split_at(64);

    let t0 = std::time::Instant::now();
    let out = train_in_memory(&cfg, train, &[], &mut |ev| println!("{ev}"))?;
    println!(
        "trained {steps} steps ({} attention, {} loss) in {:.1}s",
        cfg.model.attention,
        cfg.loss,
        t0.elapsed().as_secs_f64()
    );
    println!("input  {}", evaluate_inputs(test)?);
    println!("output {}", evaluate(&out.final_model, test)?);
    Ok(())
}
