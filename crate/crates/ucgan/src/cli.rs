//! Command-line workbench: dataset generation, training, sampling, and the
//! diversity diagnostics behind a single binary.
//!
//! Every subcommand reads one JSON config (all fields defaulted), applies
//! flag overrides on top, and echoes the resolved document into the output
//! directory so a run can be reproduced from its artifacts alone. Exit
//! codes: 0 success, 1 runtime failure, 2 bad arguments.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::run_suite;
use crate::autodiff::{load_checkpoint, save_checkpoint, Tape};
use crate::config::{Config, DataKind, Overrides};
use crate::data::{
    column_name, encode_attrs, gen_ring_gaussians, gen_sprites, load_dataset, planes_to_bytes,
    write_ppm, LoadedDataset, SpriteSpec,
};
use crate::diversity::{birthday_estimate, percentile_threshold, top_k_pairs, EmbeddingKind};
use crate::models::{build_attribute_classifier, AttributeDef, ModelConfig, Network};
use crate::trainer::{
    classifier_accuracy, pretrain_attribute_classifier, train_gan, GanTrainer, StepReport,
    TrainData,
};

/// Seed salt for sampler streams that must not collide with training draws.
const SEED_EVAL: u64 = 0x4556414c;

#[derive(Parser)]
#[command(name = "ucgan", version, about = "Desk-scale GAN lab with diversity diagnostics")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset described by the config
    GenData(GenDataArgs),
    /// Pretrain the attribute classifier on a labeled dataset
    TrainAttr(TrainAttrArgs),
    /// Train the encoder / generator / discriminator triple
    TrainGan(TrainGanArgs),
    /// Decode samples from a trained generator checkpoint
    Sample(SampleArgs),
    /// Histogram the encoder's latent angles over a dataset
    LatentHist(LatentHistArgs),
    /// Estimate the generator's support size by the birthday method
    EvalDiversity(EvalDiversityArgs),
    /// Finite-difference check of every differentiable operator
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct Common {
    /// Config JSON; absent fields fall back to built-in defaults
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides train.seed
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory, created if missing
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides the sample count of the configured dataset
    #[arg(long, value_name = "COUNT")]
    n: Option<usize>,
}

#[derive(Args)]
struct TrainAttrArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory (or its manifest.json)
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Overrides train.batch
    #[arg(long, value_name = "N")]
    batch: Option<usize>,
}

#[derive(Args)]
struct TrainGanArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory; required for images, optional for ring data
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Pretrained attribute classifier (needed when losses.attr_weight > 0)
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Overrides train.batch
    #[arg(long, value_name = "N")]
    batch: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Trainer checkpoint to decode from
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Number of samples to draw
    #[arg(long, value_name = "COUNT", default_value_t = 4)]
    n: usize,
    /// Conditioning, e.g. "gender=1,ethnicity=2,age_bin=3" (image data only)
    #[arg(long, value_name = "STRING")]
    attrs: Option<String>,
}

#[derive(Args)]
struct LatentHistArgs {
    #[command(flatten)]
    common: Common,
    /// Trainer checkpoint providing the encoder
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Dataset to encode; required for images, optional for ring data
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Overrides latent.hist_bins
    #[arg(long, value_name = "K")]
    bins: Option<usize>,
}

#[derive(Args)]
struct EvalDiversityArgs {
    #[command(flatten)]
    common: Common,
    /// Trainer checkpoint; without it the dataset itself is measured
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Real dataset used for threshold calibration (and as the fallback
    /// sample source)
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Explicit duplicate threshold on squared embedding distance
    #[arg(long, value_name = "TAU")]
    threshold: Option<f64>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Check the whole operator catalog (also the default)
    #[arg(long)]
    all: bool,
    /// Base seed for the probe points
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Debug)]
enum CliError {
    /// Bad arguments or config: exit code 2.
    Arg(String),
    /// Failure while doing the work: exit code 1.
    Run(String),
}

fn arg(msg: impl Into<String>) -> CliError {
    CliError::Arg(msg.into())
}

fn run_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Run(e.to_string())
}

/// Entry point for the command-line interface; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // clap prints help and version itself; its exit code is 0 for those
        // and 2 for usage errors
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(CliError::Arg(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(CliError::Run(m)) => {
            eprintln!("error: {m}");
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::TrainAttr(a) => cmd_train_attr(a),
        Cmd::TrainGan(a) => cmd_train_gan(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::LatentHist(a) => cmd_latent_hist(a),
        Cmd::EvalDiversity(a) => cmd_eval_diversity(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
    }
}

fn resolve_config(common: &Common, extra: Overrides) -> Result<Config, CliError> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p).map_err(|e| CliError::Arg(e.to_string()))?,
        None => Config::default(),
    };
    let merged = Overrides {
        seed: common.seed.or(extra.seed),
        ..extra
    };
    cfg.apply(&merged);
    Ok(cfg)
}

/// Creates the output directory and echoes the resolved config into it.
fn prepare_out(common: &Common, cfg: &Config) -> Result<PathBuf, CliError> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| arg("--out DIR is required for this subcommand"))?;
    std::fs::create_dir_all(&out).map_err(run_err)?;
    cfg.save(&out.join("config.json")).map_err(run_err)?;
    Ok(out)
}

/// `--data` may point at the dataset directory or at the manifest itself.
fn manifest_path(data: &Path) -> PathBuf {
    if data.extension().is_some_and(|e| e == "json") {
        data.to_path_buf()
    } else {
        data.join("manifest.json")
    }
}

/// Directory holding a dataset's sidecar files, whichever form `--data` took.
fn dataset_dir(data: &Path) -> PathBuf {
    if data.extension().is_some_and(|e| e == "json") {
        data.parent().unwrap_or_else(|| Path::new(".")).to_path_buf()
    } else {
        data.to_path_buf()
    }
}

/// Reads a `points.csv` (header `x,y`) written by `gen-data`.
fn load_points(data: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let file = if data.is_dir() {
        data.join("points.csv")
    } else {
        data.to_path_buf()
    };
    let mut reader = csv::Reader::from_path(&file)
        .map_err(|e| CliError::Run(format!("cannot read {}: {e}", file.display())))?;
    let mut pts = Vec::new();
    for record in reader.records() {
        let r = record.map_err(run_err)?;
        if r.len() < 2 {
            return Err(CliError::Run(format!("{}: short row", file.display())));
        }
        let x: f64 = r[0].trim().parse().map_err(run_err)?;
        let y: f64 = r[1].trim().parse().map_err(run_err)?;
        pts.push((x, y));
    }
    if pts.is_empty() {
        return Err(CliError::Run(format!("{}: no points", file.display())));
    }
    Ok(pts)
}

fn cmd_gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let cfg = resolve_config(
        &a.common,
        Overrides {
            n: a.n,
            ..Overrides::default()
        },
    )?;
    let out = prepare_out(&a.common, &cfg)?;
    match cfg.data.kind {
        DataKind::Sprites => {
            let s = &cfg.data.sprites;
            if s.resolution < 8 {
                return Err(arg(format!("sprite resolution {} below 8", s.resolution)));
            }
            let spec = SpriteSpec::new(s.resolution, s.size_bins, s.positions);
            gen_sprites(&spec, s.count, cfg.train.seed, &out).map_err(run_err)?;
            println!(
                "wrote {} sprites at {}x{} to {} (true support {})",
                s.count,
                s.resolution,
                s.resolution,
                out.display(),
                spec.template_count(),
            );
        }
        DataKind::Ring => {
            let r = &cfg.data.ring;
            if r.modes < 2 {
                return Err(arg(format!("ring needs at least 2 modes, got {}", r.modes)));
            }
            let pts = gen_ring_gaussians(r.modes, r.radius, r.sigma, r.count, cfg.train.seed);
            let mut text = String::from("x,y\n");
            for (x, y) in &pts {
                text.push_str(&format!("{x},{y}\n"));
            }
            let path = out.join("points.csv");
            std::fs::write(&path, text).map_err(run_err)?;
            println!(
                "wrote {} ring samples ({} modes) to {}",
                r.count,
                r.modes,
                path.display()
            );
        }
    }
    Ok(())
}

fn cmd_train_attr(a: TrainAttrArgs) -> Result<(), CliError> {
    let cfg = resolve_config(
        &a.common,
        Overrides {
            batch: a.batch,
            ..Overrides::default()
        },
    )?;
    let ds: LoadedDataset<f32> = load_dataset(&manifest_path(&a.data)).map_err(run_err)?;
    let out = prepare_out(&a.common, &cfg)?;
    let model_cfg = cfg.model_config(ds.resolution, ds.attributes.clone());
    let (net, trace) =
        pretrain_attribute_classifier(&ds, &model_cfg, &cfg.train_config()).map_err(run_err)?;
    let ckpt = out.join("attr.ckpt");
    save_checkpoint(&ckpt, &net.checkpoint_entries()).map_err(run_err)?;
    let mut text = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        text.push_str(&format!("{},{l}\n", i + 1));
    }
    std::fs::write(out.join("attr_loss.csv"), text).map_err(run_err)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    for (def, acc) in ds.attributes.iter().zip(classifier_accuracy(&net, &ds, &all)) {
        println!("train accuracy {}: {acc:.4}", def.name);
    }
    println!("saved classifier to {}", ckpt.display());
    Ok(())
}

fn cmd_train_gan(a: TrainGanArgs) -> Result<(), CliError> {
    let cfg = resolve_config(
        &a.common,
        Overrides {
            batch: a.batch,
            ..Overrides::default()
        },
    )?;
    let tcfg = cfg.train_config();
    let (mut trainer, data) = match cfg.data.kind {
        DataKind::Sprites => {
            let dir = a.data.as_ref().ok_or_else(|| {
                arg("--data DIR (a generated sprite dataset) is required to train on images")
            })?;
            let ds: LoadedDataset<f32> = load_dataset(&manifest_path(dir)).map_err(run_err)?;
            let model_cfg = cfg.model_config(ds.resolution, ds.attributes.clone());
            let attr_net = if tcfg.attr_weight > 0.0 {
                let ckpt = a.checkpoint.as_ref().ok_or_else(|| {
                    arg(
                        "attribute guidance is on (losses.attr_weight > 0): pass the \
                         pretrained classifier via --checkpoint, or set the weight to zero",
                    )
                })?;
                let mut net: Network<f32> =
                    build_attribute_classifier(&model_cfg, 0).map_err(run_err)?;
                net.load_entries(&load_checkpoint(ckpt).map_err(run_err)?)
                    .map_err(run_err)?;
                Some(net)
            } else {
                None
            };
            let trainer = GanTrainer::for_images(&model_cfg, attr_net, tcfg).map_err(run_err)?;
            (trainer, TrainData::Images(ds))
        }
        DataKind::Ring => {
            let pts = match &a.data {
                Some(p) => load_points(p)?,
                None => {
                    let r = &cfg.data.ring;
                    gen_ring_gaussians(r.modes, r.radius, r.sigma, r.count, cfg.train.seed)
                }
            };
            let trainer =
                GanTrainer::for_vectors(cfg.latent.d, cfg.model.hidden, tcfg).map_err(run_err)?;
            (trainer, TrainData::from_points(&pts))
        }
    };
    let out = prepare_out(&a.common, &cfg)?;
    let reports = train_gan(&mut trainer, &data, &out).map_err(run_err)?;
    print_train_tail(&reports, &out);
    Ok(())
}

fn print_train_tail(reports: &[StepReport], out: &Path) {
    if let Some(r) = reports.last() {
        println!(
            "step {}: L_D {:.4} L_G {:.4} k_t {:.4} M_t {:.4}",
            r.step, r.l_d, r.l_g, r.k_t, r.m_t
        );
    }
    println!("artifacts in {}", out.display());
}

/// Rebuilds the image-mode trainer a checkpoint was written by and restores
/// it. The config must describe the original run; a fresh classifier is
/// instantiated only so the player count (and so the checkpoint layout)
/// matches.
fn image_trainer(
    cfg: &Config,
    model_cfg: &ModelConfig,
    ckpt: &Path,
) -> Result<GanTrainer<f32>, CliError> {
    let tcfg = cfg.train_config();
    let attr_net = if tcfg.attr_weight > 0.0 {
        Some(build_attribute_classifier(model_cfg, 0).map_err(run_err)?)
    } else {
        None
    };
    let mut t = GanTrainer::for_images(model_cfg, attr_net, tcfg).map_err(run_err)?;
    t.load(ckpt).map_err(run_err)?;
    Ok(t)
}

fn vector_trainer(cfg: &Config, ckpt: &Path) -> Result<GanTrainer<f32>, CliError> {
    let mut t = GanTrainer::for_vectors(cfg.latent.d, cfg.model.hidden, cfg.train_config())
        .map_err(run_err)?;
    t.load(ckpt).map_err(run_err)?;
    Ok(t)
}

/// Parses `"gender=1,ethnicity=2,age_bin=3"` against the attribute table.
/// Quantized attributes answer to their base name and to the labels-CSV
/// column name; every attribute must be assigned exactly once.
fn parse_attrs(s: &str, defs: &[AttributeDef]) -> Result<Vec<usize>, CliError> {
    let mut bins: Vec<Option<usize>> = vec![None; defs.len()];
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (name, raw) = part
            .split_once('=')
            .ok_or_else(|| arg(format!("bad --attrs entry {part:?}, expected name=bin")))?;
        let name = name.trim();
        let idx = defs
            .iter()
            .position(|d| d.name == name || column_name(d) == name)
            .ok_or_else(|| {
                let known: Vec<String> = defs.iter().map(column_name).collect();
                arg(format!(
                    "unknown attribute {name:?}; known: {}",
                    known.join(", ")
                ))
            })?;
        let v: usize = raw
            .trim()
            .parse()
            .map_err(|_| arg(format!("bin {raw:?} for {name} is not an index")))?;
        let arity = defs[idx].kind.head_width();
        if v >= arity {
            return Err(arg(format!("{name}={v} out of range ({arity} values)")));
        }
        if bins[idx].replace(v).is_some() {
            return Err(arg(format!("attribute {name} given twice")));
        }
    }
    bins.iter()
        .zip(defs)
        .map(|(b, d)| b.ok_or_else(|| arg(format!("missing attribute {}", column_name(d)))))
        .collect()
}

fn cmd_sample(a: SampleArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&a.common, Overrides::default())?;
    if a.n == 0 {
        return Err(arg("--n must be at least 1"));
    }
    match cfg.data.kind {
        DataKind::Sprites => {
            let s = &cfg.data.sprites;
            let spec = SpriteSpec::new(s.resolution, s.size_bins, s.positions);
            let defs = spec.attribute_defs();
            let attrs = a.attrs.as_deref().ok_or_else(|| {
                arg("--attrs \"name=bin,...\" is required when sampling image data")
            })?;
            let bins = parse_attrs(attrs, &defs)?;
            let model_cfg = cfg.model_config(s.resolution, defs.clone());
            let mut trainer = image_trainer(&cfg, &model_cfg, &a.checkpoint)?;
            let out = prepare_out(&a.common, &cfg)?;
            let y: Vec<f32> = encode_attrs(&defs, &bins);
            let z = trainer.draw_latents(a.n);
            let d2 = z.len() / a.n;
            let width = d2 + y.len();
            let mut flat = Vec::with_capacity(a.n * width);
            for i in 0..a.n {
                flat.extend_from_slice(&z[i * d2..(i + 1) * d2]);
                flat.extend_from_slice(&y);
            }
            let mut tape: Tape<f32> = Tape::new();
            let input = tape.constant(vec![a.n, width], flat);
            let img = trainer.generator().eval(&mut tape, input, None);
            let vals = tape.value(img);
            let plane = 3 * s.resolution * s.resolution;
            for i in 0..a.n {
                let rgb = planes_to_bytes(
                    &vals[i * plane..(i + 1) * plane],
                    s.resolution,
                    s.resolution,
                );
                write_ppm(
                    &out.join(format!("sample_{i:03}.ppm")),
                    s.resolution,
                    s.resolution,
                    &rgb,
                )
                .map_err(run_err)?;
            }
            println!("wrote {} samples to {}", a.n, out.display());
        }
        DataKind::Ring => {
            let mut trainer = vector_trainer(&cfg, &a.checkpoint)?;
            let out = prepare_out(&a.common, &cfg)?;
            let z = trainer.draw_latents(a.n);
            let d2 = z.len() / a.n;
            let mut tape: Tape<f32> = Tape::new();
            let input = tape.constant(vec![a.n, d2], z);
            let pt = trainer.generator().eval(&mut tape, input, None);
            let vals = tape.value(pt);
            let mut text = String::from("x,y\n");
            for i in 0..a.n {
                text.push_str(&format!("{},{}\n", vals[2 * i], vals[2 * i + 1]));
            }
            let path = out.join("samples.csv");
            std::fs::write(&path, text).map_err(run_err)?;
            println!("wrote {} samples to {}", a.n, path.display());
        }
    }
    Ok(())
}

/// Runs rows through a headless network in evaluation mode, 64 at a time,
/// and returns the output rows widened to f64.
fn eval_rows(net: &Network<f32>, rows: &[Vec<f32>], tail: &[usize]) -> Vec<Vec<f64>> {
    assert!(!rows.is_empty());
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(64) {
        let mut flat = Vec::with_capacity(chunk.len() * rows[0].len());
        for r in chunk {
            flat.extend_from_slice(r);
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(tail);
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(shape, flat);
        let e = net.eval(&mut tape, x, None);
        let vals = tape.value(e);
        let w = vals.len() / chunk.len();
        for s in 0..chunk.len() {
            out.push(vals[s * w..(s + 1) * w].iter().map(|&v| v as f64).collect());
        }
    }
    out
}

/// Angle of every latent pair of every row, in row order.
fn encoder_angles(net: &Network<f32>, rows: &[Vec<f32>], tail: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for row in eval_rows(net, rows, tail) {
        for p in 0..row.len() / 2 {
            out.push(row[2 * p + 1].atan2(row[2 * p]));
        }
    }
    out
}

fn cmd_latent_hist(a: LatentHistArgs) -> Result<(), CliError> {
    let cfg = resolve_config(
        &a.common,
        Overrides {
            bins: a.bins,
            ..Overrides::default()
        },
    )?;
    let k = cfg.latent.hist_bins;
    if k == 0 {
        return Err(arg("bins must be positive"));
    }
    let angles: Vec<f64> = match cfg.data.kind {
        DataKind::Sprites => {
            let data = a
                .data
                .as_ref()
                .ok_or_else(|| arg("--data DIR is required to histogram an image dataset"))?;
            let ds: LoadedDataset<f32> = load_dataset(&manifest_path(data)).map_err(run_err)?;
            if ds.is_empty() {
                return Err(CliError::Run("dataset is empty".into()));
            }
            let model_cfg = cfg.model_config(ds.resolution, ds.attributes.clone());
            let trainer = image_trainer(&cfg, &model_cfg, &a.checkpoint)?;
            let res = ds.resolution;
            encoder_angles(trainer.encoder(), &ds.images, &[3, res, res])
        }
        DataKind::Ring => {
            let pts = match &a.data {
                Some(p) => load_points(p)?,
                None => {
                    let r = &cfg.data.ring;
                    gen_ring_gaussians(r.modes, r.radius, r.sigma, r.count, cfg.train.seed)
                }
            };
            let trainer = vector_trainer(&cfg, &a.checkpoint)?;
            let rows: Vec<Vec<f32>> = pts
                .iter()
                .map(|&(x, y)| vec![x as f32, y as f32])
                .collect();
            encoder_angles(trainer.encoder(), &rows, &[2])
        }
    };
    let out = prepare_out(&a.common, &cfg)?;

    // hard assignment onto k equal arcs of (-pi, pi]
    let mut counts = vec![0usize; k];
    let two_pi = 2.0 * std::f64::consts::PI;
    for &angle in &angles {
        let u = (angle + std::f64::consts::PI) / two_pi;
        counts[((u * k as f64) as usize).min(k - 1)] += 1;
    }
    let total = angles.len() as f64;
    let uniform = 1.0 / k as f64;
    let mut entropy = 0.0;
    let mut text = String::from("bin,angle_center,mass,uniform\n");
    for (b, &c) in counts.iter().enumerate() {
        let mass = c as f64 / total;
        if mass > 0.0 {
            entropy -= mass * mass.ln();
        }
        let center = -std::f64::consts::PI + (b as f64 + 0.5) * two_pi / k as f64;
        text.push_str(&format!("{b},{center},{mass},{uniform}\n"));
    }
    let path = out.join("latent_hist.csv");
    std::fs::write(&path, text).map_err(run_err)?;
    println!(
        "{} angles in {k} bins; entropy {entropy:.4} of max {:.4}; histogram in {}",
        angles.len(),
        (k as f64).ln(),
        path.display()
    );
    Ok(())
}

/// Where the diversity samples come from: a restored generator, or the real
/// dataset itself when no checkpoint is given.
enum DivSource {
    ImageGen {
        trainer: GanTrainer<f32>,
        defs: Vec<AttributeDef>,
        res: usize,
        bottleneck: bool,
        attr_rng: ChaCha8Rng,
    },
    VectorGen {
        trainer: GanTrainer<f32>,
        bottleneck: bool,
    },
    DataImages {
        images: Vec<Vec<f32>>,
        res: usize,
        rng: ChaCha8Rng,
    },
    DataPoints {
        pts: Vec<(f64, f64)>,
        rng: ChaCha8Rng,
    },
}

impl DivSource {
    fn resolution(&self) -> Option<usize> {
        match self {
            DivSource::ImageGen { res, .. } | DivSource::DataImages { res, .. } => Some(*res),
            _ => None,
        }
    }

    /// One batch of embedded rows plus, for image sources, the rendered
    /// bytes of each sample (same order).
    fn draw(&mut self, n: usize) -> (Vec<Vec<f64>>, Vec<Vec<u8>>) {
        match self {
            DivSource::ImageGen {
                trainer,
                defs,
                res,
                bottleneck,
                attr_rng,
            } => {
                let mut rows = Vec::with_capacity(n);
                let mut imgs = Vec::with_capacity(n);
                let aw: usize = defs.iter().map(|d| d.kind.width()).sum();
                let mut left = n;
                while left > 0 {
                    let chunk = left.min(32);
                    left -= chunk;
                    let z = trainer.draw_latents(chunk);
                    let d2 = z.len() / chunk;
                    let width = d2 + aw;
                    let mut flat = Vec::with_capacity(chunk * width);
                    for s in 0..chunk {
                        flat.extend_from_slice(&z[s * d2..(s + 1) * d2]);
                        let bins: Vec<usize> = defs
                            .iter()
                            .map(|d| attr_rng.random_range(0..d.kind.head_width()))
                            .collect();
                        flat.extend(encode_attrs::<f32>(defs, &bins));
                    }
                    let mut tape: Tape<f32> = Tape::new();
                    let input = tape.constant(vec![chunk, width], flat);
                    let g = trainer.generator().eval(&mut tape, input, None);
                    let emb = if *bottleneck {
                        trainer.encoder().eval(&mut tape, g, None)
                    } else {
                        g
                    };
                    let gv = tape.value(g);
                    let plane = 3 * *res * *res;
                    for s in 0..chunk {
                        imgs.push(planes_to_bytes(&gv[s * plane..(s + 1) * plane], *res, *res));
                    }
                    let ev = tape.value(emb);
                    let w = ev.len() / chunk;
                    for s in 0..chunk {
                        rows.push(ev[s * w..(s + 1) * w].iter().map(|&v| v as f64).collect());
                    }
                }
                (rows, imgs)
            }
            DivSource::VectorGen {
                trainer,
                bottleneck,
            } => {
                let z = trainer.draw_latents(n);
                let d2 = z.len() / n;
                let mut tape: Tape<f32> = Tape::new();
                let input = tape.constant(vec![n, d2], z);
                let g = trainer.generator().eval(&mut tape, input, None);
                let emb = if *bottleneck {
                    trainer.encoder().eval(&mut tape, g, None)
                } else {
                    g
                };
                let ev = tape.value(emb);
                let w = ev.len() / n;
                let rows = (0..n)
                    .map(|s| ev[s * w..(s + 1) * w].iter().map(|&v| v as f64).collect())
                    .collect();
                (rows, Vec::new())
            }
            DivSource::DataImages { images, res, rng } => {
                let mut rows = Vec::with_capacity(n);
                let mut imgs = Vec::with_capacity(n);
                for _ in 0..n {
                    let i = rng.random_range(0..images.len());
                    rows.push(images[i].iter().map(|&v| v as f64).collect());
                    imgs.push(planes_to_bytes(&images[i], *res, *res));
                }
                (rows, imgs)
            }
            DivSource::DataPoints { pts, rng } => {
                let rows = (0..n)
                    .map(|_| {
                        let (x, y) = pts[rng.random_range(0..pts.len())];
                        vec![x, y]
                    })
                    .collect();
                (rows, Vec::new())
            }
        }
    }
}

fn cmd_eval_diversity(a: EvalDiversityArgs) -> Result<(), CliError> {
    let cfg = resolve_config(
        &a.common,
        Overrides {
            threshold: a.threshold,
            ..Overrides::default()
        },
    )?;
    let bottleneck = matches!(cfg.diversity.embedding, EmbeddingKind::EncoderBottleneck);
    if bottleneck && a.checkpoint.is_none() {
        return Err(arg(
            "the encoder-bottleneck embedding needs --checkpoint for the encoder",
        ));
    }
    if a.checkpoint.is_none() && a.data.is_none() {
        return Err(arg(
            "pass --checkpoint (measure the generator) or --data (measure the dataset)",
        ));
    }
    let sampler_seed = cfg.train.seed.wrapping_add(SEED_EVAL);
    let out = prepare_out(&a.common, &cfg)?;

    let (src, tau) = match cfg.data.kind {
        DataKind::Sprites => {
            let ds: Option<LoadedDataset<f32>> = match &a.data {
                Some(p) => Some(load_dataset(&manifest_path(p)).map_err(run_err)?),
                None => None,
            };
            let (res, defs) = match &ds {
                Some(d) => (d.resolution, d.attributes.clone()),
                None => {
                    let s = &cfg.data.sprites;
                    let spec = SpriteSpec::new(s.resolution, s.size_bins, s.positions);
                    (s.resolution, spec.attribute_defs())
                }
            };
            let trainer = match &a.checkpoint {
                Some(c) => {
                    let model_cfg = cfg.model_config(res, defs.clone());
                    Some(image_trainer(&cfg, &model_cfg, c)?)
                }
                None => None,
            };
            let tau = resolve_tau_images(&cfg, a.data.as_deref(), ds.as_ref(), trainer.as_ref())?;
            let src = match trainer {
                Some(t) => DivSource::ImageGen {
                    trainer: t,
                    defs,
                    res,
                    bottleneck,
                    attr_rng: ChaCha8Rng::seed_from_u64(sampler_seed),
                },
                None => DivSource::DataImages {
                    images: ds.expect("checked above").images,
                    res,
                    rng: ChaCha8Rng::seed_from_u64(sampler_seed),
                },
            };
            (src, tau)
        }
        DataKind::Ring => {
            let pts = match &a.data {
                Some(p) => load_points(p)?,
                None => {
                    let r = &cfg.data.ring;
                    gen_ring_gaussians(r.modes, r.radius, r.sigma, r.count, cfg.train.seed)
                }
            };
            let trainer = match &a.checkpoint {
                Some(c) => Some(vector_trainer(&cfg, c)?),
                None => None,
            };
            let tau = match checked_threshold(&cfg)? {
                Some(t) => t,
                None => {
                    let sample: Vec<(f64, f64)> = pts.iter().take(1000).copied().collect();
                    let rows: Vec<Vec<f64>> = if bottleneck {
                        let t = trainer.as_ref().expect("bottleneck requires a checkpoint");
                        let f32_rows: Vec<Vec<f32>> = sample
                            .iter()
                            .map(|&(x, y)| vec![x as f32, y as f32])
                            .collect();
                        eval_rows(t.encoder(), &f32_rows, &[2])
                    } else {
                        sample.iter().map(|&(x, y)| vec![x, y]).collect()
                    };
                    calibrated_tau(&rows, &cfg)?
                }
            };
            let src = match trainer {
                Some(t) => DivSource::VectorGen {
                    trainer: t,
                    bottleneck,
                },
                None => DivSource::DataPoints {
                    pts,
                    rng: ChaCha8Rng::seed_from_u64(sampler_seed),
                },
            };
            (src, tau)
        }
    };
    finish_diversity(&cfg, src, tau, &out)
}

fn checked_threshold(cfg: &Config) -> Result<Option<f64>, CliError> {
    match cfg.diversity.threshold {
        Some(t) if t > 0.0 => Ok(Some(t)),
        Some(t) => Err(arg(format!("threshold {t} must be positive"))),
        None => Ok(None),
    }
}

fn calibrated_tau(rows: &[Vec<f64>], cfg: &Config) -> Result<f64, CliError> {
    percentile_threshold(rows, cfg.diversity.tau_percentile).map_err(|e| {
        CliError::Run(format!(
            "{e}; the reference set has near-duplicates at this percentile, \
             pass an explicit --threshold"
        ))
    })
}

/// Duplicate threshold for image data. Explicit settings win; the raw-pixel
/// embedding can fall back on the dataset's recorded minimum template
/// distance (half of it, squared); last resort is percentile calibration
/// over real samples.
fn resolve_tau_images(
    cfg: &Config,
    data: Option<&Path>,
    ds: Option<&LoadedDataset<f32>>,
    trainer: Option<&GanTrainer<f32>>,
) -> Result<f64, CliError> {
    if let Some(t) = checked_threshold(cfg)? {
        return Ok(t);
    }
    let bottleneck = matches!(cfg.diversity.embedding, EmbeddingKind::EncoderBottleneck);
    if !bottleneck {
        if let Some(dir) = data.map(dataset_dir) {
            if let Ok(text) = std::fs::read_to_string(dir.join("min_distance.txt")) {
                if let Ok(min_sq) = text.trim().parse::<f64>() {
                    if min_sq > 0.0 {
                        return Ok(min_sq / 4.0);
                    }
                }
            }
        }
    }
    let ds = ds.ok_or_else(|| arg("calibrating a threshold needs --data; or pass --threshold"))?;
    let take = ds.len().min(1000);
    let rows: Vec<Vec<f64>> = if bottleneck {
        let t = trainer.expect("bottleneck requires a checkpoint");
        let res = ds.resolution;
        eval_rows(t.encoder(), &ds.images[..take], &[3, res, res])
    } else {
        ds.images[..take]
            .iter()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect()
    };
    calibrated_tau(&rows, cfg)
}

fn finish_diversity(
    cfg: &Config,
    mut src: DivSource,
    tau: f64,
    out: &Path,
) -> Result<(), CliError> {
    let opts = cfg.birthday_opts();
    let est =
        birthday_estimate(|n| src.draw(n).0, cfg.embedding_spec(), tau, &opts).map_err(run_err)?;
    let mut text = serde_json::to_string_pretty(&est).expect("estimate serializes");
    text.push('\n');
    std::fs::write(out.join("diversity.json"), text).map_err(run_err)?;

    // side evidence: render a few pairs the threshold called duplicates
    let mut dumped = 0usize;
    if let Some(res) = src.resolution() {
        if est.final_n >= 2 {
            let (rows, imgs) = src.draw(est.final_n);
            let k = opts.top_k.min(est.final_n * (est.final_n - 1) / 2);
            if k > 0 {
                for p in top_k_pairs(&rows, k).map_err(run_err)? {
                    if p.distance < tau && dumped < 5 {
                        write_ppm(&out.join(format!("dup_{dumped}_a.ppm")), res, res, &imgs[p.i])
                            .map_err(run_err)?;
                        write_ppm(&out.join(format!("dup_{dumped}_b.ppm")), res, res, &imgs[p.j])
                            .map_err(run_err)?;
                        dumped += 1;
                    }
                }
            }
        }
    }
    let marker = if est.estimate_is_lower_bound {
        " (lower bound: batch cap hit)"
    } else {
        ""
    };
    println!(
        "support estimate {}{marker}; last batch {}, tau {tau:.6e}, {dumped} duplicate pairs rendered",
        est.estimate, est.final_n,
    );
    println!("details in {}", out.join("diversity.json").display());
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<(), CliError> {
    // --all is the only mode there is; the flag is kept so scripts can be
    // explicit about it
    let _ = a.all;
    let base = a.seed.unwrap_or(0);
    let mut worst = run_suite(base).map_err(run_err)?;
    for s in 1..10u64 {
        let reports = run_suite(base.wrapping_add(s)).map_err(run_err)?;
        for (w, r) in worst.iter_mut().zip(reports) {
            if r.max_rel_err > w.max_rel_err {
                w.max_rel_err = r.max_rel_err;
            }
        }
    }
    let mut failed = 0usize;
    for r in &worst {
        if !r.passed() {
            failed += 1;
        }
        println!(
            "{}: {} (max rel err {:.3e} over {} partials x 10 seeds)",
            r.name,
            if r.passed() { "PASS" } else { "FAIL" },
            r.max_rel_err,
            r.partials,
        );
    }
    if failed > 0 {
        return Err(CliError::Run(format!("{failed} operator checks failed")));
    }
    println!("all {} operator checks passed", worst.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_grammar_is_consistent() {
        Cli::command().debug_assert();
    }

    fn defs() -> Vec<AttributeDef> {
        SpriteSpec::new(32, 10, 10).attribute_defs()
    }

    #[test]
    fn attrs_accept_both_base_and_column_names() {
        let a = parse_attrs("gender=1,ethnicity=2,age_bin=3", &defs()).unwrap();
        assert_eq!(a, vec![3, 1, 2]);
        let b = parse_attrs(" age = 3 , gender=1, ethnicity=2", &defs()).unwrap();
        assert_eq!(b, a);
    }

    #[test]
    fn attrs_reject_unknowns_ranges_and_duplicates() {
        let e = parse_attrs("species=1,gender=0,age=0", &defs());
        assert!(matches!(e, Err(CliError::Arg(_))));
        let e = parse_attrs("gender=2,ethnicity=0,age=0", &defs());
        assert!(matches!(e, Err(CliError::Arg(m)) if m.contains("out of range")));
        let e = parse_attrs("gender=0,gender=1,ethnicity=0,age=0", &defs());
        assert!(matches!(e, Err(CliError::Arg(m)) if m.contains("twice")));
        let e = parse_attrs("gender=0,ethnicity=0", &defs());
        assert!(matches!(e, Err(CliError::Arg(m)) if m.contains("missing attribute age_bin")));
        let e = parse_attrs("gender=zero,ethnicity=0,age=0", &defs());
        assert!(matches!(e, Err(CliError::Arg(m)) if m.contains("not an index")));
    }

    #[test]
    fn data_paths_accept_directory_or_manifest() {
        let dir = Path::new("/tmp/ds");
        assert_eq!(manifest_path(dir), Path::new("/tmp/ds/manifest.json"));
        assert_eq!(
            manifest_path(Path::new("/tmp/ds/manifest.json")),
            Path::new("/tmp/ds/manifest.json")
        );
        assert_eq!(dataset_dir(dir), Path::new("/tmp/ds"));
        assert_eq!(
            dataset_dir(Path::new("/tmp/ds/manifest.json")),
            Path::new("/tmp/ds")
        );
    }
}
