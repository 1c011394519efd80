use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::arch::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ClassInput, Ctx, Mode, ParamStore};
use crate::objectives::{
    adv_loss_d, adv_loss_g, aggregate_cd, aggregate_pp, attention_map, distill_loss, total_loss, ClassCondNorm,
    LossBundle,
};
use crate::pruning::MaskState;
use crate::tensor::{Real, Tensor};
use crate::train::config::{Ablation, TrainConfig};
use crate::train::optim::{Adam, OptimState};

/// A generator with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T, A> {
    pub arch: A,
    pub store: ParamStore<T>,
}

pub type GenModel<T> = Model<T, Generator>;
pub type DiscModel<T> = Model<T, Discriminator>;

impl<T: Real> GenModel<T> {
    pub fn build(cfg: &GeneratorConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = Generator::build(cfg, &mut store)?;
        Ok(Self { arch, store })
    }

    pub fn generate(&mut self, z: &Tensor<T>, cls: &ClassInput<T>) -> Result<Tensor<T>> {
        self.arch.generate(&mut self.store, z, cls)
    }
}

impl<T: Real> DiscModel<T> {
    pub fn build(cfg: &DiscriminatorConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = Discriminator::build(cfg, &mut store)?;
        Ok(Self { arch, store })
    }
}

/// Which loss terms a step uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepTerms {
    pub pp: bool,
    pub cd: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Joint,
    /// First stage of the two-step ablation: pruning only.
    Prune,
    /// Second stage: distillation only.
    Distill,
}

fn accumulate<T: Real>(acc: &mut [Option<Tensor<T>>], tape: &Tape<T>, grads: &mut Gradients<T>, vars: &[Var]) {
    for (slot, &v) in acc.iter_mut().zip(vars) {
        if !tape.requires_grad(v) {
            continue;
        }
        if let Some(g) = grads.take(v) {
            match slot {
                Some(a) => a.add_assign(&g),
                None => *slot = Some(g),
            }
        }
    }
}

/// Everything mutated by student (or teacher) training.
pub struct Session<T: Real> {
    pub cfg: TrainConfig,
    pub gen: GenModel<T>,
    pub disc: DiscModel<T>,
    pub teacher: Option<GenModel<T>>,
    pub ccn: Option<Model<T, ClassCondNorm>>,
    g_opt: OptimState<T>,
    d_opt: OptimState<T>,
    ccn_opt: Option<OptimState<T>>,
    adam: Adam,
    rng: ChaCha8Rng,
    pub step: usize,
    pub phase: Phase,
    pub last_checkpoint: Option<String>,
}

impl<T: Real> Session<T> {
    pub fn new(cfg: TrainConfig, gen: GenModel<T>, disc: DiscModel<T>, teacher: Option<GenModel<T>>) -> Result<Self> {
        cfg.validate()?;
        let g = &gen.arch.cfg;
        if disc.arch.cfg.num_classes != g.num_classes || disc.arch.cfg.image_size != g.image_size {
            return Err(Error::Config(
                "generator and discriminator disagree on classes or image size".into(),
            ));
        }
        let distilling = cfg.uses_cd() && teacher.is_some();
        if cfg.uses_cd() && gen.arch.masks().next().is_some() && teacher.is_none() {
            return Err(Error::Config(format!("ablation {:?} needs a teacher", cfg.ablation)));
        }
        let ccn = match (&teacher, distilling) {
            (Some(t), true) => {
                let tc = &t.arch.cfg;
                if tc.num_classes != g.num_classes || tc.blocks.len() != g.blocks.len() || tc.image_size != g.image_size
                {
                    return Err(Error::Config("teacher and student schedules differ".into()));
                }
                if cfg.distill_blocks.iter().any(|&k| k >= g.blocks.len()) {
                    return Err(Error::Config(format!(
                        "distill_blocks {:?} exceed {} blocks",
                        cfg.distill_blocks,
                        g.blocks.len()
                    )));
                }
                let channels: Vec<usize> = cfg.distill_blocks.iter().map(|&k| tc.blocks[k].out_ch).collect();
                let mut store = ParamStore::new();
                let arch = ClassCondNorm::new(&mut store, &channels, g.num_classes)?;
                Some(Model { arch, store })
            }
            _ => None,
        };
        let adam = Adam {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        };
        let phase = if cfg.ablation == Ablation::TwoStep {
            Phase::Prune
        } else {
            Phase::Joint
        };
        Ok(Self {
            g_opt: OptimState::new(&gen.store),
            d_opt: OptimState::new(&disc.store),
            ccn_opt: ccn.as_ref().map(|c| OptimState::new(&c.store)),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_2a11),
            adam,
            step: 0,
            phase,
            last_checkpoint: None,
            cfg,
            gen,
            disc,
            teacher,
            ccn,
        })
    }

    /// Loss terms active in the current phase.
    pub fn terms(&self) -> StepTerms {
        let has_masks = self.gen.arch.masks().next().is_some();
        let pp = has_masks && self.cfg.uses_pp() && self.phase != Phase::Distill;
        let cd = self.ccn.is_some() && self.cfg.uses_cd() && self.phase != Phase::Prune;
        StepTerms { pp, cd }
    }

    pub fn sample_z(&mut self, batch: usize) -> Tensor<T> {
        let dim = self.gen.arch.cfg.z_dim;
        let rng = &mut self.rng;
        Tensor::from_fn([batch, dim], |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
    }

    /// Generator samples in training mode without gradients or
    /// running-statistics updates.
    fn fakes(&mut self, z: &Tensor<T>, cls: &ClassInput<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = tape.bind_params(&self.gen.store, false);
        let mut cx = Ctx::new(&mut tape, &mut self.gen.store, &vars, Mode::Train);
        cx.update_stats = false;
        let zv = cx.tape.constant(z.clone());
        let out = self.gen.arch.forward(&mut cx, zv, cls)?;
        Ok(tape.value(out.image).clone())
    }

    fn non_finite(&self) -> Error {
        Error::NonFiniteLoss {
            step: self.step,
            checkpoint: self.last_checkpoint.clone().unwrap_or_else(|| "none".into()),
        }
    }

    /// One discriminator update followed by one generator update, each
    /// accumulated over `micro` batches, then a binarization check.
    pub fn train_step(&mut self, micro: &[(Tensor<T>, Vec<usize>)], lr: f64) -> Result<LossBundle> {
        if micro.is_empty() || micro.iter().any(|(_, l)| l.is_empty()) {
            return Err(Error::EmptyBatch);
        }
        let terms = self.terms();
        let inv = 1.0 / micro.len() as f64;
        let kind = self.cfg.adv_loss;
        let mut bundle = LossBundle::default();

        self.disc.arch.power_iterate(&mut self.disc.store)?;
        let mut d_grads = vec![None; self.disc.store.len()];
        for (real, labels) in micro {
            let cls = ClassInput::Labels(labels.clone());
            let z = self.sample_z(labels.len());
            let fake = self.fakes(&z, &cls)?;
            let mut tape = Tape::new();
            let dv = tape.bind_params(&self.disc.store, true);
            let mut cx = Ctx::new(&mut tape, &mut self.disc.store, &dv, Mode::Train);
            let rv = cx.tape.constant(real.clone());
            let fv = cx.tape.constant(fake);
            let real_logit = self.disc.arch.forward(&mut cx, rv, &cls)?;
            let fake_logit = self.disc.arch.forward(&mut cx, fv, &cls)?;
            let ld = adv_loss_d(&mut tape, real_logit, fake_logit, kind)?;
            let scaled = tape.scale(ld, T::lit(inv))?;
            bundle.l_adv_d += tape.value(ld).item().to_f64().unwrap_or(f64::NAN) * inv;
            let mut grads = tape.backward(scaled)?;
            accumulate(&mut d_grads, &tape, &mut grads, &dv);
        }
        if !bundle.l_adv_d.is_finite() {
            return Err(self.non_finite());
        }
        self.adam.step(&mut self.disc.store, &d_grads, &mut self.d_opt, lr)?;

        let mut g_grads = vec![None; self.gen.store.len()];
        let mut c_grads = self.ccn.as_ref().map(|c| vec![None; c.store.len()]);
        for (_, labels) in micro {
            let cls = ClassInput::Labels(labels.clone());
            let z = self.sample_z(labels.len());
            let mut tape = Tape::new();
            let gv = tape.bind_params(&self.gen.store, true);
            let mut cx = Ctx::new(&mut tape, &mut self.gen.store, &gv, Mode::Train);
            let zv = cx.tape.constant(z.clone());
            let out = self.gen.arch.forward(&mut cx, zv, &cls)?;
            let l_pp = if terms.pp {
                let masks: Vec<&MaskState> = self.gen.arch.masks().collect();
                Some(aggregate_pp(&mut cx, &masks)?)
            } else {
                None
            };

            let dv = tape.bind_params(&self.disc.store, false);
            let mut cx = Ctx::new(&mut tape, &mut self.disc.store, &dv, Mode::Eval);
            let logit = self.disc.arch.forward(&mut cx, out.image, &cls)?;
            let l_adv = adv_loss_g(&mut tape, logit, kind)?;

            let mut cv = Vec::new();
            let l_cd = match (terms.cd, &mut self.teacher, &mut self.ccn) {
                (true, Some(teacher), Some(ccn)) => {
                    let tv = tape.bind_params(&teacher.store, false);
                    let mut cx = Ctx::new(&mut tape, &mut teacher.store, &tv, Mode::Eval);
                    let ztv = cx.tape.constant(z);
                    let t_out = teacher.arch.forward(&mut cx, ztv, &cls)?;
                    cv = tape.bind_params(&ccn.store, true);
                    let mut cx = Ctx::new(&mut tape, &mut ccn.store, &cv, Mode::Train);
                    let mut per_block = Vec::with_capacity(self.cfg.distill_blocks.len());
                    for (j, &k) in self.cfg.distill_blocks.iter().enumerate() {
                        let o_t = ccn.arch.forward(&mut cx, j, t_out.taps[k], &cls)?;
                        let f_t = attention_map(cx.tape, o_t)?;
                        let f_s = attention_map(cx.tape, out.taps[k])?;
                        per_block.push(distill_loss(cx.tape, f_t, f_s)?);
                    }
                    Some(aggregate_cd(&mut tape, &per_block)?)
                }
                _ => None,
            };
            let total = total_loss(&mut tape, l_pp, l_cd, l_adv, self.cfg.pp_weight)?;
            let value =
                |tape: &Tape<T>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().to_f64().unwrap_or(f64::NAN));
            bundle.l_pp += value(&tape, l_pp) * inv;
            bundle.l_cd += value(&tape, l_cd) * inv;
            bundle.l_adv_g += value(&tape, Some(l_adv)) * inv;
            bundle.total_g += value(&tape, Some(total)) * inv;
            let scaled = tape.scale(total, T::lit(inv))?;
            let mut grads = tape.backward(scaled)?;
            accumulate(&mut g_grads, &tape, &mut grads, &gv);
            if let Some(acc) = c_grads.as_mut() {
                if !cv.is_empty() {
                    accumulate(acc, &tape, &mut grads, &cv);
                }
            }
        }
        if !bundle.is_finite() {
            return Err(self.non_finite());
        }
        self.adam.step(&mut self.gen.store, &g_grads, &mut self.g_opt, lr)?;
        if let (Some(ccn), Some(grads), Some(opt)) = (&mut self.ccn, &c_grads, &mut self.ccn_opt) {
            self.adam.step(&mut ccn.store, grads, opt, lr)?;
        }
        if self.cfg.uses_pp() {
            self.gen.arch.binarize_check(&mut self.gen.store);
        }
        self.step += 1;
        Ok(bundle)
    }

    /// Per-mask zero fractions in generator order.
    pub fn zero_fractions(&self) -> Vec<f64> {
        self.gen
            .arch
            .masks()
            .map(|m| m.zero_fraction(&self.gen.store))
            .collect()
    }

    pub fn frozen_masks(&self) -> usize {
        self.gen.arch.masks().filter(|m| m.is_frozen()).count()
    }
}
