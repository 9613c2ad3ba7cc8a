use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GanBatch, GanTrainer, StepReport, TrainerError};
use crate::autodiff::Scalar;
use crate::data::LoadedDataset;

const SEED_ORDER: u64 = 0x4f524445;

/// Real-sample source for a run: a labeled image dataset or plain 2-vector
/// points for the ring experiments.
pub enum TrainData<T> {
    Images(LoadedDataset<T>),
    Vectors { points: Vec<T> },
}

impl<T: Scalar> TrainData<T> {
    pub fn from_points(points: &[(f64, f64)]) -> Self {
        TrainData::Vectors {
            points: points
                .iter()
                .flat_map(|&(x, y)| [T::from_f64(x), T::from_f64(y)])
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TrainData::Images(d) => d.images.len(),
            TrainData::Vectors { points } => points.len() / 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Assembles a training batch from the given rows. `want_classes` also
    /// collects per-attribute class indices (needed when the guidance term
    /// is active).
    pub fn batch(&self, indices: &[usize], want_classes: bool) -> GanBatch<T> {
        match self {
            TrainData::Images(d) => {
                let r = d.resolution;
                let mut data = Vec::with_capacity(indices.len() * 3 * r * r);
                let mut attrs = Vec::new();
                for &i in indices {
                    data.extend_from_slice(&d.images[i]);
                    attrs.extend_from_slice(&d.attr_vecs[i]);
                }
                let attr_classes = if want_classes {
                    (0..d.attributes.len())
                        .map(|a| indices.iter().map(|&i| d.labels[i][a]).collect())
                        .collect()
                } else {
                    vec![]
                };
                GanBatch {
                    data,
                    shape: vec![indices.len(), 3, r, r],
                    attrs: Some(attrs),
                    attr_classes,
                }
            }
            TrainData::Vectors { points } => {
                let mut data = Vec::with_capacity(indices.len() * 2);
                for &i in indices {
                    data.extend_from_slice(&points[2 * i..2 * i + 2]);
                }
                GanBatch {
                    data,
                    shape: vec![indices.len(), 2],
                    attrs: None,
                    attr_classes: vec![],
                }
            }
        }
    }
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_add(SEED_ORDER)
            .wrapping_add(epoch.wrapping_mul(0x9e3779b9)),
    );
    order.shuffle(&mut rng);
    order
}

/// Deterministic sample schedule: the elements of global positions
/// `step * batch ..` taken from per-epoch shuffles, so a resumed run at the
/// same step count sees the same batches.
struct Schedule {
    n: usize,
    seed: u64,
    pos: usize,
    epoch: u64,
    order: Vec<usize>,
}

impl Schedule {
    fn new(n: usize, seed: u64, start_pos: usize) -> Self {
        Self {
            n,
            seed,
            pos: start_pos,
            epoch: u64::MAX,
            order: Vec::new(),
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            let e = (self.pos / self.n) as u64;
            if e != self.epoch {
                self.order = epoch_order(self.n, self.seed, e);
                self.epoch = e;
            }
            out.push(self.order[self.pos % self.n]);
            self.pos += 1;
        }
        out
    }
}

/// Runs the trainer to `total_steps`, streaming one metrics row per step to
/// `out_dir/metrics.csv` and writing checkpoints at the configured cadence
/// plus a final `checkpoint_final.ckpt`. Returns every step report.
pub fn train_gan<T: Scalar>(
    trainer: &mut GanTrainer<T>,
    data: &TrainData<T>,
    out_dir: &Path,
) -> Result<Vec<StepReport>, TrainerError> {
    if data.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| TrainerError::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let file =
        std::fs::File::create(&metrics_path).map_err(|e| TrainerError::io(&metrics_path, e))?;
    let mut metrics = std::io::BufWriter::new(file);
    let gamma_count = trainer.gammas().len();
    writeln!(metrics, "{}", StepReport::csv_header(gamma_count))
        .map_err(|e| TrainerError::io(&metrics_path, e))?;

    let cfg = trainer.cfg().clone();
    let want_classes = cfg.attr_weight > 0.0 && trainer.attr_classifier().is_some();
    let mut schedule = Schedule::new(data.len(), cfg.seed, trainer.step_count() * cfg.batch);
    let mut reports = Vec::new();
    while trainer.step_count() < cfg.total_steps {
        let indices = schedule.next_batch(cfg.batch);
        let batch = data.batch(&indices, want_classes);
        let report = trainer.gan_step(&batch)?;
        writeln!(metrics, "{}", report.csv_row())
            .map_err(|e| TrainerError::io(&metrics_path, e))?;
        if report.step % cfg.checkpoint_every == 0 {
            metrics
                .flush()
                .map_err(|e| TrainerError::io(&metrics_path, e))?;
            let path = out_dir.join(format!("checkpoint_{:06}.ckpt", report.step));
            trainer.save(&path)?;
        }
        reports.push(report);
    }
    metrics
        .flush()
        .map_err(|e| TrainerError::io(&metrics_path, e))?;
    trainer.save(&out_dir.join("checkpoint_final.ckpt"))?;
    Ok(reports)
}

/// Restores a saved run into a trainer built with the same configuration.
pub fn load_gan_checkpoint<T: Scalar>(
    trainer: &mut GanTrainer<T>,
    path: &Path,
) -> Result<(), TrainerError> {
    trainer.load(path)
}
