use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{AdvLoss, DEFAULT_PP_WEIGHT};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Pruning and distillation together.
    #[default]
    Full,
    /// No pruning loss; masks never freeze.
    NoPp,
    /// No distillation; the teacher is never run.
    NoCd,
    /// Pruning first, distillation afterwards.
    TwoStep,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoPp => "no_pp",
            Self::NoCd => "no_cd",
            Self::TwoStep => "two_step",
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no_pp" => Ok(Self::NoPp),
            "no_cd" => Ok(Self::NoCd),
            "two_step" => Ok(Self::TwoStep),
            _ => Err(Error::Config(format!(
                "unknown ablation `{s}` (full|no_pp|no_cd|two_step)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub adv_loss: AdvLoss,
    pub pp_weight: f64,
    /// Indices of the generator blocks whose taps are distilled.
    pub distill_blocks: Vec<usize>,
    /// Optimizer steps per epoch; `None` sweeps the dataset once.
    pub steps_per_epoch: Option<usize>,
    /// End training as soon as every mask is frozen.
    pub stop_when_frozen: bool,
    pub checkpoint_every_epoch: bool,
    pub sample_grid_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            base_lr: 2e-4,
            lr_drop_epochs: vec![30, 60, 90],
            lr_drop_factor: 10.0,
            batch_size: 8,
            grad_accum_steps: 2,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            ablation: Ablation::Full,
            adv_loss: AdvLoss::NonSaturating,
            pp_weight: DEFAULT_PP_WEIGHT,
            distill_blocks: vec![1, 2, 3, 4],
            steps_per_epoch: None,
            stop_when_frozen: false,
            checkpoint_every_epoch: true,
            sample_grid_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.grad_accum_steps == 0 {
            return bad("grad_accum_steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !self.lr_drop_epochs.windows(2).all(|w| w[0] < w[1]) {
            return bad("lr_drop_epochs must be strictly ascending");
        }
        if !(self.base_lr > 0.0) || !(self.lr_drop_factor > 0.0) {
            return bad("base_lr and lr_drop_factor must be positive");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive");
        }
        Ok(())
    }

    pub fn uses_pp(&self) -> bool {
        self.ablation != Ablation::NoPp
    }

    pub fn uses_cd(&self) -> bool {
        self.ablation != Ablation::NoCd
    }
}

/// `base_lr / factor^(drops at or before epoch)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::OutOfRange(format!("epoch {epoch} of {}", cfg.epochs)));
    }
    let drops = cfg.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
    Ok(cfg.base_lr / cfg.lr_drop_factor.powi(drops as i32))
}
