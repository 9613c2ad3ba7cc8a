//! End-to-end checks of the binary: exit codes, artifact contracts, and the
//! gen-data -> train-attr -> train-gan -> sample/eval composition.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ucgan"))
}

fn tdir(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("ucgan-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

/// Metrics lines with the wall-clock column (always last) removed.
fn strip_wall(text: &str) -> String {
    text.lines()
        .map(|l| l.rsplit_once(',').map(|(head, _)| head).unwrap_or(l))
        .collect::<Vec<_>>()
        .join("\n")
}

const SPRITE_CFG: &str = r#"{
  "model": { "base_channels": 8, "channel_cap": 16, "hidden": 16 },
  "train": { "batch": 8, "total_steps": 3, "checkpoint_every": 2, "seed": 7 },
  "latent": { "d": 4, "hist_bins": 12 },
  "data": { "kind": "sprites", "sprites": { "resolution": 16, "count": 48, "size_bins": 2, "positions": 2 } }
}"#;

const RING_CFG: &str = r#"{
  "model": { "hidden": 8 },
  "train": { "batch": 8, "total_steps": 3, "checkpoint_every": 10, "seed": 11 },
  "latent": { "d": 2, "hist_bins": 8 },
  "diversity": { "n_cap": 256 },
  "data": { "kind": "ring", "ring": { "modes": 4, "sigma": 0.02, "count": 64 } }
}"#;

fn write_cfg(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn usage_errors_exit_2_runtime_errors_exit_1_help_exits_0() {
    let help = bin().arg("--help").output().unwrap();
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("eval-diversity"));

    let unknown = bin().arg("--bogus").output().unwrap();
    assert_eq!(code(&unknown), 2);

    let no_sub = bin().output().unwrap();
    assert_eq!(code(&no_sub), 2);

    // semantic argument error: sampling images without conditioning
    let dir = tdir("codes");
    let missing_attrs = bin()
        .args(["sample", "--checkpoint", "/nonexistent.ckpt", "--out"])
        .arg(dir.join("o1"))
        .output()
        .unwrap();
    assert_eq!(code(&missing_attrs), 2);

    // image training without a dataset is an argument error too
    let no_data = bin()
        .args(["train-gan", "--out"])
        .arg(dir.join("o2"))
        .output()
        .unwrap();
    assert_eq!(code(&no_data), 2);

    // a checkpoint that does not exist fails at run time
    let bad_ckpt = bin()
        .args([
            "sample",
            "--checkpoint",
            "/nonexistent.ckpt",
            "--attrs",
            "gender=0,ethnicity=0,age=0",
            "--out",
        ])
        .arg(dir.join("o3"))
        .output()
        .unwrap();
    assert_eq!(code(&bad_ckpt), 1);
    assert!(!String::from_utf8_lossy(&bad_ckpt.stderr).is_empty());
}

#[test]
fn sprite_pipeline_composes_and_honors_artifact_contracts() {
    let dir = tdir("sprites");
    let cfg = write_cfg(&dir, SPRITE_CFG);
    let ds = dir.join("ds");
    let attr = dir.join("attr");
    let gan = dir.join("gan");

    run_ok(bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&ds));
    assert!(ds.join("manifest.json").is_file());
    assert!(ds.join("labels.csv").is_file());
    let labels = std::fs::read_to_string(ds.join("labels.csv")).unwrap();
    assert!(labels.starts_with("filename,age_bin,gender,ethnicity"));
    assert_eq!(labels.lines().count(), 49);

    // the resolved config is echoed next to the artifacts
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ds.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["data"]["kind"], "sprites");
    assert_eq!(echo["train"]["seed"], 7);

    run_ok(
        bin()
            .args(["train-attr", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(&ds)
            .arg("--out")
            .arg(&attr),
    );
    assert!(attr.join("attr.ckpt").is_file());
    assert!(attr.join("attr_loss.csv").is_file());

    run_ok(
        bin()
            .args(["train-gan", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(&ds)
            .arg("--checkpoint")
            .arg(attr.join("attr.ckpt"))
            .arg("--out")
            .arg(&gan),
    );
    assert!(gan.join("checkpoint_000002.ckpt").is_file());
    assert!(gan.join("checkpoint_final.ckpt").is_file());
    let metrics = std::fs::read_to_string(gan.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4); // header + 3 steps
    assert!(metrics.starts_with("step,L_real,L_fake,L_D,L_G,"));

    // sampling: --n files, each a valid binary PPM at the right size
    let samples = dir.join("samples");
    run_ok(
        bin()
            .args(["sample", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(gan.join("checkpoint_final.ckpt"))
            .args(["--n", "4", "--attrs", "gender=1,ethnicity=2,age_bin=1", "--out"])
            .arg(&samples),
    );
    for i in 0..4 {
        let p = samples.join(format!("sample_{i:03}.ppm"));
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6"), "{} is not a raw PPM", p.display());
        assert!(bytes.len() > 3 * 16 * 16);
    }

    // latent histogram: bins+1 lines, probability column sums to one
    let hist = dir.join("hist");
    let stdout = run_ok(
        bin()
            .args(["latent-hist", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(gan.join("checkpoint_final.ckpt"))
            .arg("--data")
            .arg(&ds)
            .args(["--bins", "10", "--out"])
            .arg(&hist),
    );
    assert!(stdout.contains("10 bins"));
    let csv = std::fs::read_to_string(hist.join("latent_hist.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "bin,angle_center,mass,uniform");
    assert_eq!(lines.len(), 11);
    let mass: f64 = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((mass - 1.0).abs() < 1e-6, "mass sums to {mass}");

    // diversity of the dataset itself, with the oracle threshold on disk
    let div = dir.join("div");
    run_ok(
        bin()
            .args(["eval-diversity", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(&ds)
            .arg("--out")
            .arg(&div),
    );
    let est: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(div.join("diversity.json")).unwrap())
            .unwrap();
    let support = est["estimate"].as_u64().unwrap();
    assert!(support > 0);
    assert_eq!(est["embedding"]["kind"], "raw-pixel");
    assert!(!est["trials"].as_array().unwrap().is_empty());
}

#[test]
fn ring_pipeline_is_deterministic_across_equal_seed_runs() {
    let dir = tdir("ring");
    let cfg = write_cfg(&dir, RING_CFG);
    let ds = dir.join("ds");
    run_ok(bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&ds));
    let points = std::fs::read_to_string(ds.join("points.csv")).unwrap();
    assert!(points.starts_with("x,y\n"));
    assert_eq!(points.lines().count(), 65);

    let (a, b) = (dir.join("run_a"), dir.join("run_b"));
    for out in [&a, &b] {
        run_ok(
            bin()
                .args(["train-gan", "--config"])
                .arg(&cfg)
                .arg("--data")
                .arg(&ds)
                .arg("--out")
                .arg(out),
        );
    }
    let ck_a = std::fs::read(a.join("checkpoint_final.ckpt")).unwrap();
    let ck_b = std::fs::read(b.join("checkpoint_final.ckpt")).unwrap();
    assert_eq!(ck_a, ck_b, "equal seeds must give identical checkpoints");
    let m_a = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    let m_b = std::fs::read_to_string(b.join("metrics.csv")).unwrap();
    assert_eq!(strip_wall(&m_a), strip_wall(&m_b));

    // vector sampling writes a csv, not images
    let samples = dir.join("samples");
    run_ok(
        bin()
            .args(["sample", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(a.join("checkpoint_final.ckpt"))
            .args(["--n", "6", "--out"])
            .arg(&samples),
    );
    let s = std::fs::read_to_string(samples.join("samples.csv")).unwrap();
    assert_eq!(s.lines().count(), 7);
    for line in s.lines().skip(1) {
        let (x, y) = line.split_once(',').unwrap();
        x.parse::<f64>().unwrap();
        y.parse::<f64>().unwrap();
    }

    // histogram without --data falls back to config-described points
    let hist = dir.join("hist");
    run_ok(
        bin()
            .args(["latent-hist", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(a.join("checkpoint_final.ckpt"))
            .arg("--out")
            .arg(&hist),
    );
    assert!(hist.join("latent_hist.csv").is_file());

    // generator diversity with a percentile-calibrated threshold
    let div = dir.join("div");
    run_ok(
        bin()
            .args(["eval-diversity", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(a.join("checkpoint_final.ckpt"))
            .arg("--data")
            .arg(&ds)
            .arg("--out")
            .arg(&div),
    );
    let est: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(div.join("diversity.json")).unwrap())
            .unwrap();
    assert!(est["estimate"].as_u64().unwrap() > 0);
}

#[test]
fn grad_check_reports_every_operator_and_exits_zero() {
    let out = bin().args(["grad-check", "--all"]).output().unwrap();
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let passes = stdout.matches(": PASS").count();
    assert_eq!(passes, 16, "one verdict line per operator:\n{stdout}");
    assert!(!stdout.contains("FAIL"));
}
