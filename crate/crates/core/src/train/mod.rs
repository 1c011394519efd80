//! Joint adversarial training with pruning and distillation.

mod config;
mod optim;
mod persist;
mod run;
mod session;

pub use config::{lr_at_epoch, Ablation, TrainConfig};
pub use optim::{Adam, OptimState};
pub use persist::{
    load_model, model_container, models_from_container, save_model, Loaded, ModelMeta, SaveExtras, INIT_SCHEME,
};
pub use run::{steps_per_epoch, teacher_train, train_loop, RunSummary};
pub use session::{DiscModel, GenModel, Model, Phase, Session, StepTerms};
