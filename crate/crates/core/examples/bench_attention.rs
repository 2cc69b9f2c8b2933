//! Times dense masked attention against the gathered loop.
//!
//! `cargo run --release --example bench_attention`

use rat_core::bench::bench_attn;

fn main() -> anyhow::Result<()> {
    let report = bench_attn(&[64, 256, 1024], &[4, 16], 5, 0)?;
    println!("{report}");
    Ok(())
}
