use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use rat_core::bench::{bench_attn, DIVERGENCE_TOL};
use rat_core::config::KvConfig;
use rat_core::gradcheck::{model_suite, op_suite};
use rat_core::metrics::EvalReport;
use rat_core::model::{load_model, load_model_as};
use rat_core::region::io::{load_masks, load_partition_unchecked, save_partition};
use rat_core::region::postprocess_masks;
use rat_core::synth::{gen_dataset, load_dataset, SynthSpec};
use rat_core::train::{evaluate, evaluate_inputs, run_training, LossKind, TrainConfig};
use rat_core::{AttentionKind, Error};

#[derive(Parser)]
#[command(
    name = "rat",
    version,
    about = "Region attention transformer for image restoration"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model from a config file and/or flags.
    Train(TrainArgs),
    /// PSNR/SSIM of a checkpoint (or of the raw inputs) on a dataset.
    Eval(EvalArgs),
    /// Time dense masked against gathered region attention.
    BenchAttn(BenchArgs),
    /// Finite-difference checks of every op and of a tiny model.
    GradCheck(GradCheckArgs),
    /// Inspect and convert region mask files.
    MaskTool {
        #[command(subcommand)]
        cmd: MaskCmd,
    },
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` file with height, width, layout, textures, degrade, seed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    /// `voronoi:N` or `rects:N`.
    #[arg(long)]
    layout: Option<String>,
    /// Comma list of constant, sinusoid, gradient.
    #[arg(long)]
    textures: Option<String>,
    /// Comma list of noise:σ, blur:k, downup:f, or `none`.
    #[arg(long)]
    degrade: Option<String>,
    /// Also write PGM previews.
    #[arg(long)]
    pgm: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_parser = ["l1", "focal"])]
    loss: Option<String>,
    #[arg(long, value_parser = ["rmsa", "wmsa", "msa"])]
    attn: Option<String>,
    #[arg(long, value_parser = ["toy", "paper"])]
    preset: Option<String>,
    /// Do not echo progress lines to stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint; omit with --inputs.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score the degraded inputs against ground truth instead of a model.
    #[arg(long)]
    inputs: bool,
    #[arg(long, value_parser = ["rmsa", "wmsa", "msa"])]
    attn: Option<String>,
    /// Also print one line per sample.
    #[arg(long)]
    per_image: bool,
    /// Write the key=value block to this file too.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 256, 1024])]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 16])]
    regions: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds for the op suite.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

#[derive(Subcommand)]
enum MaskCmd {
    /// Check that a RATM partition is exhaustive, in range and has no empty region.
    Validate { file: PathBuf },
    /// Print size and region statistics of a RATM partition.
    Info { file: PathBuf },
    /// Resolve overlapping binary masks (RATS) into a partition (RATM).
    FromBinaryMasks {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let mut spec = SynthSpec::default();
    if let Some(p) = &a.config {
        spec.apply_kv(&KvConfig::load(p)?)?;
    }
    let mut kv = KvConfig::default();
    if let Some(s) = a.size {
        kv.push("height", s);
        kv.push("width", s);
    }
    for (k, v) in [
        ("layout", &a.layout),
        ("textures", &a.textures),
        ("degrade", &a.degrade),
    ] {
        if let Some(v) = v {
            kv.push(k, v);
        }
    }
    if let Some(s) = a.seed {
        kv.push("seed", s);
    }
    spec.apply_kv(&kv)?;
    let entries = gen_dataset(&spec, a.count, &a.out, a.pgm)?;
    println!("wrote {} samples to {}", entries.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut kv = match &a.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    if let Some(p) = &a.preset {
        // the preset is the base; explicit architecture keys in the file still apply
        let mut with_preset = KvConfig::default();
        with_preset.push("preset", p);
        for k in kv.keys().map(str::to_string).collect::<Vec<_>>() {
            if k != "preset" {
                for v in kv.get_all(&k).map(str::to_string).collect::<Vec<_>>() {
                    with_preset.push(&k, v);
                }
            }
        }
        kv = with_preset;
    }
    if let Some(d) = &a.data {
        kv.push("data", d.display());
    }
    if let Some(o) = &a.out {
        kv.push("out", o.display());
    }
    if let Some(s) = a.seed {
        kv.push("seed", s);
    }
    if let Some(s) = a.steps {
        kv.push("steps", s);
    }
    if let Some(l) = &a.loss {
        kv.push("loss", l.parse::<LossKind>()?);
    }
    if let Some(at) = &a.attn {
        kv.push("attention", at.parse::<AttentionKind>()?);
    }
    let cfg = TrainConfig::from_kv(&kv)?;
    let quiet = a.quiet;
    let summary = run_training(&cfg, &mut |ev| {
        if !quiet {
            println!("{ev}");
        }
    })?;
    println!(
        "final_loss={:.6} first_loss={:.6} best_step={} best_val_psnr={} final={} best={}",
        summary.last_loss,
        summary.first_loss,
        summary.best_step,
        summary
            .best_val_psnr
            .map_or("none".into(), |p| format!("{p:.4}")),
        summary.final_checkpoint.display(),
        summary.best_checkpoint.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let samples = load_dataset(&a.data)?;
    let report: EvalReport = match (&a.checkpoint, a.inputs) {
        (_, true) => evaluate_inputs(&samples)?,
        (Some(ck), false) => {
            let model = match &a.attn {
                None => load_model::<f32>(ck)?,
                Some(at) => {
                    let mut cfg = load_model::<f32>(ck)?.config().clone();
                    cfg.attention = at.parse()?;
                    load_model_as::<f32>(ck, &cfg)?
                }
            };
            evaluate(&model, &samples)?
        }
        (None, false) => bail!(Error::Config("eval needs --checkpoint or --inputs".into())),
    };
    if a.per_image {
        for (i, (p, s)) in report.per_image.iter().enumerate() {
            println!("sample={i} psnr={p:.4} ssim={s:.6}");
        }
    }
    println!("{report}");
    print!("{}", report.to_kv());
    if let Some(o) = &a.out {
        fs::write(o, report.to_kv()).map_err(|e| Error::Io {
            path: o.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    let report = bench_attn(&a.sizes, &a.regions, a.repeats, a.seed)?;
    println!(
        "channels={} heads={} repeats={}",
        report.channels, report.heads, report.repeats
    );
    println!("{report}");
    println!(
        "max_divergence={:.3e} tolerance={DIVERGENCE_TOL:.0e}",
        report.max_divergence()
    );
    if let Some(o) = &a.out {
        fs::write(o, format!("{report}\n")).with_context(|| format!("writing {}", o.display()))?;
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> anyhow::Result<()> {
    const EXIT_TOL: f64 = 1e-3;
    let mut results = Vec::new();
    for s in a.seed..a.seed + a.seeds.max(1) {
        results.extend(op_suite(s)?.into_iter().map(|r| (s, r)));
    }
    results.extend(model_suite(a.seed)?.into_iter().map(|r| (a.seed, r)));
    let mut worst = 0.0f64;
    for (s, r) in &results {
        println!(
            "check={} seed={s} max_rel_err={:.3e} tol={:.0e} pass={}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            u8::from(r.passed())
        );
        worst = worst.max(r.max_rel_err);
    }
    println!("checks={} worst_rel_err={worst:.3e}", results.len());
    if worst.is_nan() || worst >= EXIT_TOL {
        bail!(Error::Numeric(format!(
            "gradient check failed: worst relative error {worst:.3e} >= {EXIT_TOL:.0e}"
        )));
    }
    Ok(())
}

fn mask_tool(cmd: MaskCmd) -> anyhow::Result<()> {
    match cmd {
        MaskCmd::Validate { file } => {
            let p = load_partition_unchecked(&file)?;
            p.validate().map_err(Error::from)?;
            println!(
                "valid height={} width={} regions={}",
                p.height(),
                p.width(),
                p.num_regions()
            );
        }
        MaskCmd::Info { file } => {
            let p = load_partition_unchecked(&file)?;
            println!(
                "height={} width={} regions={}",
                p.height(),
                p.width(),
                p.num_regions()
            );
            match p.validate() {
                Ok(()) => {
                    let sizes = p.region_sizes();
                    let list: Vec<String> = sizes.iter().map(usize::to_string).collect();
                    println!(
                        "sizes={} min={} max={}",
                        list.join(","),
                        sizes.iter().min().unwrap_or(&0),
                        sizes.iter().max().unwrap_or(&0)
                    );
                    println!("valid=1");
                }
                Err(v) => println!("valid=0 violation=\"{v}\""),
            }
        }
        MaskCmd::FromBinaryMasks { input, out } => {
            let masks = load_masks(&input)?;
            let p = postprocess_masks(&masks);
            save_partition(&out, &p)?;
            println!(
                "masks={} regions={} height={} width={} out={}",
                masks.len(),
                p.num_regions(),
                p.height(),
                p.width(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::BenchAttn(a) => bench(a),
        Cmd::GradCheck(a) => grad_check(a),
        Cmd::MaskTool { cmd } => mask_tool(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e
                .chain()
                .find_map(|c| c.downcast_ref::<Error>())
                .map_or("other", Error::class);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: class={class} msg={msg}");
            ExitCode::FAILURE
        }
    }
}
