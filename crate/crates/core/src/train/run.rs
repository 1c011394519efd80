use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{DiscriminatorConfig, GeneratorConfig, GeneratorKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{ClassInput, Init};
use crate::report::{save_png_grid, MetricsRow, MetricsWriter};
use crate::tensor::Real;
use crate::train::config::{lr_at_epoch, Ablation, TrainConfig};
use crate::train::persist::{save_model, SaveExtras};
use crate::train::session::{DiscModel, GenModel, Phase, Session};

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub epochs_run: usize,
    pub all_frozen: bool,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Seeded epoch order; successive micro-batches walk it cyclically.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    fn new(len: usize, seed: u64, epoch: usize) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        Self { order, cursor: 0 }
    }

    fn next(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                let i = self.order[self.cursor % self.order.len()];
                self.cursor += 1;
                i
            })
            .collect()
    }
}

pub fn steps_per_epoch(cfg: &TrainConfig, data_len: usize) -> usize {
    cfg.steps_per_epoch
        .unwrap_or_else(|| (data_len / (cfg.batch_size * cfg.grad_accum_steps)).max(1))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_samples<T: Real>(session: &mut Session<T>, path: &Path) -> Result<()> {
    let g = &session.gen.arch.cfg;
    let (k, dim) = (g.num_classes, g.z_dim);
    let per_class = 2;
    let z = Init::new(session.cfg.seed ^ 0xface).normal::<T>(&[k * per_class, dim], 1.0);
    let cls = ClassInput::Labels((0..k * per_class).map(|i| i % k).collect());
    let imgs = session.gen.generate(&z, &cls)?;
    save_png_grid(path, &imgs, k)
}

/// Runs `cfg.epochs` epochs of [`Session::train_step`], writing one metrics
/// row per step and checkpoints per epoch. The final checkpoint is
/// `out_dir/final_name`.
pub fn train_loop<T: Real>(
    session: &mut Session<T>,
    data: &Dataset,
    out_dir: &Path,
    final_name: &str,
) -> Result<RunSummary> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let g = &session.gen.arch.cfg;
    if data.num_classes != g.num_classes || data.image_size != g.image_size {
        return Err(Error::Config(format!(
            "dataset ({} classes, {}px) does not match generator ({} classes, {}px)",
            data.num_classes, data.image_size, g.num_classes, g.image_size
        )));
    }
    mkdir(out_dir)?;
    let mask_names: Vec<String> = session
        .gen
        .arch
        .masks()
        .map(|m| session.gen.store.name(m.w).to_string())
        .collect();
    let has_masks = !mask_names.is_empty();
    let mut metrics = MetricsWriter::create(out_dir, mask_names)?;
    let cfg = session.cfg.clone();
    let steps = steps_per_epoch(&cfg, data.len());
    let mut epochs_run = 0;
    let mut stop = false;
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(&cfg, epoch)?;
        if session.phase == Phase::Prune && epoch >= cfg.epochs.div_ceil(2) {
            session.phase = Phase::Distill;
        }
        let mut batcher = Batcher::new(data.len(), cfg.seed, epoch);
        for _ in 0..steps {
            let micro = (0..cfg.grad_accum_steps)
                .map(|_| data.batch::<T>(&batcher.next(cfg.batch_size)))
                .collect::<Result<Vec<_>>>()?;
            let losses = session.train_step(&micro, lr)?;
            metrics.write(&MetricsRow {
                step: session.step - 1,
                epoch,
                lr,
                losses,
                frozen_masks: session.frozen_masks(),
                zero_fractions: session.zero_fractions(),
            })?;
            let all_frozen = has_masks && session.gen.arch.all_masks_frozen();
            if session.phase == Phase::Prune && all_frozen {
                session.phase = Phase::Distill;
            }
            if cfg.stop_when_frozen && all_frozen {
                stop = true;
                break;
            }
        }
        epochs_run = epoch + 1;
        metrics.flush()?;
        if cfg.checkpoint_every_epoch {
            let path = out_dir.join(format!("epoch_{epoch:03}.ppcd"));
            save_session(session, &path, epoch)?;
            session.last_checkpoint = Some(path.display().to_string());
        }
        if cfg.sample_grid_every_epoch {
            write_samples(session, &out_dir.join(format!("samples_epoch_{epoch:03}.png")))?;
        }
        if stop {
            break;
        }
    }
    let checkpoint = out_dir.join(final_name);
    save_session(session, &checkpoint, epochs_run.saturating_sub(1))?;
    Ok(RunSummary {
        steps: session.step,
        epochs_run,
        all_frozen: has_masks && session.gen.arch.all_masks_frozen(),
        checkpoint,
        metrics: out_dir.join("metrics.csv"),
    })
}

fn save_session<T: Real>(session: &Session<T>, path: &Path, epoch: usize) -> Result<()> {
    let extras = SaveExtras {
        disc: Some(&session.disc),
        ccn: session.ccn.as_ref(),
        train: Some(&session.cfg),
        step: session.step,
        epoch,
    };
    save_model(path, &session.gen, extras)
}

/// Adversarially trains a wide unmasked generator; saves `teacher.ppcd`.
pub fn teacher_train<T: Real>(
    gcfg: &GeneratorConfig,
    dcfg: &DiscriminatorConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: &Path,
) -> Result<RunSummary> {
    if gcfg.kind != GeneratorKind::Teacher {
        return Err(Error::Config(
            "teacher training needs a teacher generator config".into(),
        ));
    }
    let cfg = TrainConfig {
        ablation: Ablation::NoCd,
        ..cfg.clone()
    };
    let mut session = Session::new(cfg, GenModel::<T>::build(gcfg)?, DiscModel::build(dcfg)?, None)?;
    train_loop(&mut session, data, out_dir, "teacher.ppcd")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batcher_is_seeded_and_cycles() {
        let mut a = Batcher::new(5, 3, 0);
        let mut b = Batcher::new(5, 3, 0);
        let first = a.next(7);
        assert_eq!(first, b.next(7));
        assert_eq!(first[..2], first[5..7]);
        let mut sorted = first[..5].to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert_ne!(Batcher::new(50, 3, 0).order, Batcher::new(50, 3, 1).order);
    }
}
