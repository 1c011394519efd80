//! End-to-end runs: dataset → teacher → student → exported generator.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{DiscriminatorConfig, GeneratorConfig, GeneratorKind};
use crate::data::{synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::export::{equivalence_check, strip_and_rewire, PruneReport};
use crate::nn::{ClassInput, Init};
use crate::tensor::{Real, Tensor};
use crate::train::{
    load_model, save_model, teacher_train, train_loop, DiscModel, GenModel, RunSummary, SaveExtras, Session,
    TrainConfig,
};

/// Learning rate of the toy runs.
pub const TOY_LR: f64 = 2e-3;
/// Optimizer steps per epoch of the toy runs.
pub const TOY_STEPS_PER_EPOCH: usize = 250;
/// Pruning-loss weight of the toy runs.
pub const TOY_PP_WEIGHT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub n_per_class: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            image_size: 16,
            n_per_class: 16,
            seed: 0,
        }
    }
}

/// Everything one pipeline run needs. Serialized as the CLI's JSON config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    /// Channel multiplier of the teacher relative to the student.
    pub teacher_factor: usize,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    /// Settings for teacher training; defaults to `train`.
    pub teacher_train: Option<TrainConfig>,
    /// Number of seeded `(z, cls)` pairs compared after export.
    pub equivalence_trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::toy(4, 16, 16)
    }
}

impl RunConfig {
    /// Small configuration: `width` student channels at `image_size` pixels.
    pub fn toy(num_classes: usize, width: usize, image_size: usize) -> Self {
        Self {
            data: DataConfig {
                num_classes,
                image_size,
                ..DataConfig::default()
            },
            generator: GeneratorConfig::toy(32, num_classes, width, image_size),
            teacher_factor: 2,
            discriminator: DiscriminatorConfig::toy(num_classes, width, image_size),
            train: TrainConfig {
                epochs: 2,
                base_lr: TOY_LR,
                pp_weight: TOY_PP_WEIGHT,
                steps_per_epoch: Some(TOY_STEPS_PER_EPOCH),
                ..TrainConfig::default()
            },
            teacher_train: None,
            equivalence_trials: 100,
        }
    }

    /// Propagates one seed to every component.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.generator.seed = seed;
        self.discriminator.seed = seed.wrapping_add(1);
        self.train.seed = seed;
        if let Some(t) = &mut self.teacher_train {
            t.seed = seed;
        }
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.generator.mask.alpha = alpha;
    }

    pub fn teacher_config(&self) -> GeneratorConfig {
        let mut cfg = self.generator.teacher(self.teacher_factor);
        cfg.seed = self.generator.seed.wrapping_add(7);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let (g, d, data) = (&self.generator, &self.discriminator, &self.data);
        if g.kind != GeneratorKind::Student {
            return Err(Error::Config("the generator section must describe a student".into()));
        }
        if g.num_classes != data.num_classes || d.num_classes != data.num_classes {
            return Err(Error::Config(
                "data, generator and discriminator class counts differ".into(),
            ));
        }
        if g.image_size != data.image_size || d.image_size != data.image_size {
            return Err(Error::Config(
                "data, generator and discriminator image sizes differ".into(),
            ));
        }
        if self.teacher_factor == 0 {
            return Err(Error::Config("teacher_factor must be positive".into()));
        }
        g.validate()?;
        d.validate()?;
        self.train.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    synth_dataset(d.seed, d.num_classes, d.image_size, d.n_per_class)
}

/// Trains the teacher into `out_dir`; the result is `out_dir/teacher.ppcd`.
pub fn run_teacher(cfg: &RunConfig, data: &Dataset, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let tcfg = cfg.teacher_train.clone().unwrap_or_else(|| cfg.train.clone());
    teacher_train::<f32>(&cfg.teacher_config(), &cfg.discriminator, &tcfg, data, out_dir)
}

/// Trains the masked student into `out_dir`; the result is
/// `out_dir/student.ppcd`.
pub fn run_student(cfg: &RunConfig, data: &Dataset, teacher: Option<&Path>, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let teacher = match teacher {
        Some(path) if cfg.train.uses_cd() => {
            let loaded = load_model::<f32>(path)?;
            if loaded.meta.kind != GeneratorKind::Teacher {
                return Err(Error::Config(format!("{} is not a teacher checkpoint", path.display())));
            }
            Some(loaded.gen)
        }
        _ => None,
    };
    let gen = GenModel::<f32>::build(&cfg.generator)?;
    let disc = DiscModel::build(&cfg.discriminator)?;
    let mut session = Session::new(cfg.train.clone(), gen, disc, teacher)?;
    train_loop(&mut session, data, out_dir, "student.ppcd")
}

#[derive(Clone, Debug)]
pub struct Compressed {
    pub report: PruneReport,
    pub max_deviation: f64,
    pub pruned: PathBuf,
}

/// Exports a trained student: writes `pruned.ppcd`, `prune_report.csv` and
/// `prune_report.txt` into `out_dir`.
pub fn compress(student: &Path, out_dir: &Path, trials: usize, seed: u64) -> Result<Compressed> {
    let mut masked = load_model::<f32>(student)?.gen;
    let mut pruned = strip_and_rewire(&masked)?;
    let max_deviation = equivalence_check(&mut masked, &mut pruned, trials, seed)?;
    let report = PruneReport::new(&masked.arch, &pruned.arch)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("pruned.ppcd");
    save_model(&path, &pruned, SaveExtras::default())?;
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("prune_report.csv", report.to_csv())?;
    write(
        "prune_report.txt",
        format!("{}max deviation {max_deviation:e}\n", report.to_table()),
    )?;
    Ok(Compressed {
        report,
        max_deviation,
        pruned: path,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    /// Fixed class, noise moving linearly between two draws.
    Noise { class: usize },
    /// Fixed noise, class condition moving from one embedding row to another
    /// by convex combination.
    Class { from: usize, to: usize },
}

/// `steps` eval-mode samples along an interpolation path, endpoints included.
pub fn interpolate<T: Real>(gen: &mut GenModel<T>, path: Interpolation, steps: usize, seed: u64) -> Result<Tensor<T>> {
    if steps < 2 {
        return Err(Error::Config("interpolation needs at least 2 steps".into()));
    }
    let (k, dim) = (gen.arch.cfg.num_classes, gen.arch.cfg.z_dim);
    let t = |i: usize| i as f64 / (steps - 1) as f64;
    let ends = Init::new(seed).normal::<T>(&[2, dim], 1.0);
    let e = ends.data();
    let (z, cls) = match path {
        Interpolation::Noise { class } => {
            let z = Tensor::from_fn([steps, dim], |idx| {
                let (i, j) = (idx / dim, idx % dim);
                let w = T::lit(t(i));
                (T::one() - w) * e[j] + w * e[dim + j]
            });
            (z, ClassInput::Labels(vec![class; steps]))
        }
        Interpolation::Class { from, to } => {
            if from >= k || to >= k {
                return Err(Error::ClassOutOfRange {
                    index: from.max(to),
                    num_classes: k,
                });
            }
            let z = Tensor::from_fn([steps, dim], |idx| e[idx % dim]);
            let mut w = Tensor::zeros([steps, k]);
            for i in 0..steps {
                let row = &mut w.data_mut()[i * k..(i + 1) * k];
                row[from] += T::lit(1.0 - t(i));
                row[to] += T::lit(t(i));
            }
            (z, ClassInput::Mixture(w))
        }
    };
    gen.generate(&z, &cls)
}

pub const SWEEP_ALPHAS: [f64; 4] = [0.5, 0.6, 0.7, 0.8];

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub alpha: f64,
    pub run: RunSummary,
    pub compressed: Option<Compressed>,
}

/// One student run per α in `out_dir/alpha_{α}`, each exported when all of
/// its masks froze. Writes `sweep.csv` summarizing parameter counts.
pub fn sweep_alpha(
    cfg: &RunConfig,
    alphas: &[f64],
    data: &Dataset,
    teacher: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(alphas.len());
    let mut csv = String::from("alpha,all_frozen,params_before,params_after,macs_after,net_prunable_reduction\n");
    for &alpha in alphas {
        let mut c = cfg.clone();
        c.set_alpha(alpha);
        let dir = out_dir.join(format!("alpha_{alpha}"));
        let run = run_student(&c, data, teacher, &dir)?;
        let compressed = if run.all_frozen {
            Some(compress(&run.checkpoint, &dir, c.equivalence_trials, c.train.seed)?)
        } else {
            None
        };
        match &compressed {
            Some(x) => csv.push_str(&format!(
                "{alpha},true,{},{},{},{}\n",
                x.report.totals.params_before,
                x.report.totals.params_after,
                x.report.totals.macs_after,
                x.report.net_prunable_reduction()
            )),
            None => csv.push_str(&format!("{alpha},false,,,,\n")),
        }
        points.push(SweepPoint { alpha, run, compressed });
    }
    let path = out_dir.join("sweep.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(points)
}
