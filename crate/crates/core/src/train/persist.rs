use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{DiscriminatorConfig, GeneratorConfig, GeneratorKind};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::objectives::ClassCondNorm;
use crate::pruning::MaskRecord;
use crate::tensor::Real;
use crate::train::config::TrainConfig;
use crate::train::session::{DiscModel, GenModel, Model};

pub const INIT_SCHEME: &str = "xavier-normal";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: GeneratorKind,
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: Option<DiscriminatorConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    pub step: usize,
    pub epoch: usize,
    pub seed: u64,
    pub masks: Vec<MaskRecord>,
    pub pruned: bool,
    pub init: String,
}

/// What to write besides the generator.
#[derive(Clone, Copy, Default)]
pub struct SaveExtras<'a, T: Real> {
    pub disc: Option<&'a DiscModel<T>>,
    pub ccn: Option<&'a Model<T, ClassCondNorm>>,
    pub train: Option<&'a TrainConfig>,
    pub step: usize,
    pub epoch: usize,
}

pub fn model_container<T: Real>(gen: &GenModel<T>, extras: SaveExtras<'_, T>) -> Result<Container> {
    let cfg = &gen.arch.cfg;
    let meta = ModelMeta {
        kind: cfg.kind,
        generator: cfg.clone(),
        discriminator: extras.disc.map(|d| d.arch.cfg.clone()),
        train: extras.train.cloned(),
        step: extras.step,
        epoch: extras.epoch,
        seed: extras.train.map_or(cfg.seed, |t| t.seed),
        masks: gen.arch.masks().map(|m| m.record(&gen.store)).collect(),
        pruned: cfg.kind == GeneratorKind::Pruned,
        init: INIT_SCHEME.into(),
    };
    let mut c = Container::new(&meta)?;
    c.push_store(&gen.store)?;
    if let Some(d) = extras.disc {
        c.push_store(&d.store)?;
    }
    if let Some(ccn) = extras.ccn {
        c.push_store(&ccn.store)?;
    }
    Ok(c)
}

pub fn save_model<T: Real>(path: impl AsRef<Path>, gen: &GenModel<T>, extras: SaveExtras<'_, T>) -> Result<()> {
    model_container(gen, extras)?.save(path)
}

/// A generator (and discriminator, if stored) rebuilt from a checkpoint.
pub struct Loaded<T> {
    pub meta: ModelMeta,
    pub gen: GenModel<T>,
    pub disc: Option<DiscModel<T>>,
}

pub fn models_from_container<T: Real>(c: &Container) -> Result<Loaded<T>> {
    let meta: ModelMeta = c.meta()?;
    let mut gen = GenModel::<T>::build(&meta.generator)?;
    c.fill_store(&mut gen.store)?;
    let masks: Vec<_> = gen.arch.masks().cloned().collect();
    if masks.len() != meta.masks.len() {
        return Err(Error::Malformed(format!(
            "{} mask records for a generator with {} masks",
            meta.masks.len(),
            masks.len()
        )));
    }
    for (m, record) in gen.arch.masks_mut().zip(&meta.masks) {
        if gen.store.name(m.w) != record.name {
            return Err(Error::Malformed(format!("mask record `{}` out of order", record.name)));
        }
        m.apply_record(record, &mut gen.store)?;
    }
    let disc = match &meta.discriminator {
        Some(dcfg) => {
            let mut d = DiscModel::<T>::build(dcfg)?;
            c.fill_store(&mut d.store)?;
            Some(d)
        }
        None => None,
    };
    Ok(Loaded { meta, gen, disc })
}

pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<Loaded<T>> {
    models_from_container(&Container::load(path)?)
}
