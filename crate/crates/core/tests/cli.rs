use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rat_core::region::io::{encode_partition, save_masks};
use rat_core::region::{MaskSet, RegionPartition};

fn rat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = rat(&[
            "gen-data",
            "--count",
            "4",
            "--seed",
            "7",
            "--out",
            d.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(
        fs::read_to_string(a.join("manifest.tsv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}

#[test]
fn mask_tool_validate_reports_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good.ratm");
    let p = RegionPartition::new(2, 3, vec![0, 0, 1, 1, 2, 2], 3).unwrap();
    let bytes = encode_partition(&p).unwrap();
    fs::write(&good, &bytes).unwrap();
    let o = rat(&["mask-tool", "validate", good.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("regions=3"));

    // overwrite the last label with an out-of-range value
    let mut bad = bytes.clone();
    let n = bad.len();
    bad[n - 2..].copy_from_slice(&9u16.to_le_bytes());
    let badp = tmp.path().join("bad.ratm");
    fs::write(&badp, &bad).unwrap();
    let o = rat(&["mask-tool", "validate", badp.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("error: class=violation"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let o = rat(&["mask-tool", "info", badp.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("valid=0"));

    let trunc = tmp.path().join("trunc.ratm");
    fs::write(&trunc, &bytes[..7]).unwrap();
    let o = rat(&["mask-tool", "validate", trunc.to_str().unwrap()]);
    assert!(
        stderr(&o).starts_with("error: class=format"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn mask_tool_converts_binary_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let rats = tmp.path().join("m.rats");
    let ratm = tmp.path().join("m.ratm");
    let big: Vec<bool> = (0..16).map(|i| i % 4 < 3).collect();
    let small: Vec<bool> = (0..16).map(|i| i == 5).collect();
    save_masks(&rats, &MaskSet::new(4, 4, vec![big, small]).unwrap()).unwrap();
    let o = rat(&[
        "mask-tool",
        "from-binary-masks",
        rats.to_str().unwrap(),
        "--out",
        ratm.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    // big minus the nested pixel, the nested pixel, and background
    assert!(stdout(&o).contains("regions=3"), "{}", stdout(&o));
    let o = rat(&["mask-tool", "info", ratm.to_str().unwrap()]);
    assert!(stdout(&o).contains("sizes=11,1,4"), "{}", stdout(&o));
}

#[test]
fn train_then_eval_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    let o = rat(&[
        "gen-data",
        "--count",
        "6",
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = tmp.path().join("train.cfg");
    fs::write(
        &cfg,
        format!(
            "# tiny smoke run\ndata = {}\nbase_channels = 4\nheads = 2\nn3 = 1\nlog_every = 1\nval_every = 2\n",
            data.display()
        ),
    )
    .unwrap();
    let o = rat(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--steps",
        "4",
        "--seed",
        "5",
        "--loss",
        "l1",
        "--attn",
        "msa",
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(out.join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log
        .lines()
        .all(|l| l.starts_with("step=") && l.contains(" loss=") && l.contains(" lr=")));
    assert_eq!(
        fs::read_to_string(out.join("val.log"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    let echo = fs::read_to_string(out.join("train.cfg")).unwrap();
    assert!(
        echo.contains("attention = msa")
            && echo.contains("loss = l1")
            && echo.contains("steps = 4")
    );

    let o = rat(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        out.join("best.ratk").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    for key in ["psnr_mean=", "psnr_std=", "ssim_mean=", "ssim_std=", "n=6"] {
        assert!(s.contains(key), "{key} missing from {s}");
    }

    let o = rat(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--inputs",
        "--per-image",
    ]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o)
            .lines()
            .filter(|l| l.starts_with("sample="))
            .count(),
        6
    );
}

#[test]
fn errors_are_single_classified_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rat(&[
        "train",
        "--data",
        tmp.path().join("missing").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("error: class=io"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "heads = 7\n").unwrap();
    let o = rat(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(
        stderr(&o).starts_with("error: class=config"),
        "{}",
        stderr(&o)
    );

    let o = rat(&["eval", "--data", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn grad_check_and_bench_succeed() {
    let o = rat(&["grad-check", "--seeds", "1"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("check=model_rmsa") && s.contains("check=softmax_masked"));
    assert!(s
        .lines()
        .filter(|l| l.starts_with("check="))
        .all(|l| l.ends_with("pass=1")));

    let o = rat(&[
        "bench-attn",
        "--sizes",
        "16,64",
        "--regions",
        "3",
        "--repeats",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("dense_loglog_slope="));
}
