//! Loss terms: attention-map distillation, mask aggregation, adversarial
//! losses and their weighted total.

use serde::{Deserialize, Serialize};

use crate::autodiff::{StandardizeOver, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ClassEmbedding, ClassInput, Ctx, ParamStore, BN_EPS};
use crate::pruning::MaskState;
use crate::tensor::{Real, Tensor};

/// Maps with an l2 norm below this are normalized to zero.
pub const NORM_FLOOR: f64 = 1e-12;
/// Lower clamp applied inside adversarial logarithms.
pub const LOG_FLOOR: f64 = 1e-12;
pub const DEFAULT_PP_WEIGHT: f64 = 0.01;

/// `F = Σ_c O_c²`, shape `(B, H, W)`.
pub fn attention_map<T: Real>(tape: &mut Tape<T>, o: Var) -> Result<Var> {
    let (b, _, h, w) = tape.value(o).dims4("attention_map")?;
    let sq = tape.square(o)?;
    let summed = tape.sum_axes(sq, &[1])?;
    tape.reshape(summed, &[b, h, w])
}

/// Per-sample, batch-averaged `‖F_T/‖F_T‖ − F_S/‖F_S‖‖₂`.
pub fn distill_loss<T: Real>(tape: &mut Tape<T>, f_t: Var, f_s: Var) -> Result<Var> {
    let (ts, ss) = (tape.shape(f_t).to_vec(), tape.shape(f_s).to_vec());
    if ts != ss || ts.is_empty() {
        return Err(Error::shape(
            "distill_loss",
            format!("teacher map {ts:?} vs student map {ss:?}"),
        ));
    }
    let b = ts[0];
    let rest = ts[1..].iter().product();
    let floor = T::lit(NORM_FLOOR);
    let t = tape.reshape(f_t, &[b, rest])?;
    let t = tape.l2_normalize(t, 1, floor)?;
    let s = tape.reshape(f_s, &[b, rest])?;
    let s = tape.l2_normalize(s, 1, floor)?;
    let diff = tape.sub(t, s)?;
    let per_sample = tape.l2_norm(diff, 1)?;
    tape.mean(per_sample)
}

/// Trainable class-conditional affine applied to standardized teacher
/// features, one gain/bias table pair per distilled block.
#[derive(Clone, Debug)]
pub struct ClassCondNorm {
    pub gamma: Vec<ClassEmbedding>,
    pub beta: Vec<ClassEmbedding>,
}

impl ClassCondNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, channels: &[usize], num_classes: usize) -> Result<Self> {
        let mut gamma = Vec::with_capacity(channels.len());
        let mut beta = Vec::with_capacity(channels.len());
        for (k, &c) in channels.iter().enumerate() {
            gamma.push(ClassEmbedding::new(
                store,
                &format!("ccn{k}.gamma"),
                Tensor::ones([num_classes, c]),
            )?);
            beta.push(ClassEmbedding::new(
                store,
                &format!("ccn{k}.beta"),
                Tensor::zeros([num_classes, c]),
            )?);
        }
        Ok(Self { gamma, beta })
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    /// Standardizes each channel of each sample over space, then applies
    /// `γ_k(cls) · x̂ + β_k(cls)`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, k: usize, o_t: Var, cls: &ClassInput<T>) -> Result<Var> {
        let (b, c, h, w) = cx.tape.value(o_t).dims4("class_norm_teacher")?;
        let (gamma, beta) = match (self.gamma.get(k), self.beta.get(k)) {
            (Some(g), Some(bt)) => (g, bt),
            _ => return Err(Error::OutOfRange(format!("class-norm block {k}"))),
        };
        if gamma.dim != c {
            return Err(Error::shape(
                "class_norm_teacher",
                format!("channels: expected {}, got {c}", gamma.dim),
            ));
        }
        if h * w < 2 {
            return Err(Error::shape(
                "class_norm_teacher",
                "spatial extent must hold at least 2 positions",
            ));
        }
        let (xhat, _) = cx.tape.standardize(o_t, StandardizeOver::Space, T::lit(BN_EPS))?;
        let g = gamma.lookup(cx, cls)?;
        let g = cx.tape.reshape(g, &[b, c, 1, 1])?;
        let bt = beta.lookup(cx, cls)?;
        let bt = cx.tape.reshape(bt, &[b, c, 1, 1])?;
        let y = cx.tape.mul(xhat, g)?;
        cx.tape.add(y, bt)
    }
}

/// `(1 / |masks|) Σ Σ_i |w_i + 1|`.
pub fn aggregate_pp<T: Real>(cx: &mut Ctx<T>, masks: &[&MaskState]) -> Result<Var> {
    if masks.is_empty() {
        return Err(Error::Config(
            "progressive pruning loss needs at least one mask layer".into(),
        ));
    }
    let mut acc: Option<Var> = None;
    for m in masks {
        let r = m.regularizer(cx)?;
        acc = Some(match acc {
            Some(a) => cx.tape.add(a, r)?,
            None => r,
        });
    }
    let total = acc.expect("non-empty");
    cx.tape.scale(total, T::lit(1.0 / masks.len() as f64))
}

/// Mean of per-block distillation losses.
pub fn aggregate_cd<T: Real>(tape: &mut Tape<T>, per_block: &[Var]) -> Result<Var> {
    let (&first, rest) = per_block
        .split_first()
        .ok_or_else(|| Error::Config("distillation over zero blocks; disable it explicitly instead".into()))?;
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    tape.scale(acc, T::lit(1.0 / per_block.len() as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvLoss {
    /// Log loss; the generator maximizes `log D(G(z))`.
    #[default]
    NonSaturating,
    /// Log loss; the generator minimizes `log(1 − D(G(z)))`.
    Saturating,
    Hinge,
}

fn mean_neg_log_sigmoid<T: Real>(tape: &mut Tape<T>, logits: Var, sign: f64) -> Result<Var> {
    let x = tape.scale(logits, T::lit(sign))?;
    let p = tape.sigmoid(x)?;
    let l = tape.ln_clamp_min(p, T::lit(LOG_FLOOR))?;
    let m = tape.mean(l)?;
    tape.scale(m, -T::one())
}

/// Discriminator objective on real and fake logits.
pub fn adv_loss_d<T: Real>(tape: &mut Tape<T>, real: Var, fake: Var, kind: AdvLoss) -> Result<Var> {
    match kind {
        AdvLoss::NonSaturating | AdvLoss::Saturating => {
            let r = mean_neg_log_sigmoid(tape, real, 1.0)?;
            let f = mean_neg_log_sigmoid(tape, fake, -1.0)?;
            tape.add(r, f)
        }
        AdvLoss::Hinge => {
            let r = tape.scale(real, -T::one())?;
            let r = tape.offset(r, T::one())?;
            let r = tape.relu(r)?;
            let r = tape.mean(r)?;
            let f = tape.offset(fake, T::one())?;
            let f = tape.relu(f)?;
            let f = tape.mean(f)?;
            tape.add(r, f)
        }
    }
}

/// Generator objective on fake logits.
pub fn adv_loss_g<T: Real>(tape: &mut Tape<T>, fake: Var, kind: AdvLoss) -> Result<Var> {
    match kind {
        AdvLoss::NonSaturating => mean_neg_log_sigmoid(tape, fake, 1.0),
        AdvLoss::Saturating => {
            let l = mean_neg_log_sigmoid(tape, fake, -1.0)?;
            tape.scale(l, -T::one())
        }
        AdvLoss::Hinge => {
            let m = tape.mean(fake)?;
            tape.scale(m, -T::one())
        }
    }
}

/// `(l_adv_d, l_adv_g)` on one set of logits.
pub fn adversarial_losses<T: Real>(tape: &mut Tape<T>, real: Var, fake: Var, kind: AdvLoss) -> Result<(Var, Var)> {
    Ok((adv_loss_d(tape, real, fake, kind)?, adv_loss_g(tape, fake, kind)?))
}

/// `pp_weight · L_PP + L_CD + L_ADV`; absent terms are skipped.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    l_pp: Option<Var>,
    l_cd: Option<Var>,
    l_adv: Var,
    pp_weight: f64,
) -> Result<Var> {
    let mut total = l_adv;
    if let Some(cd) = l_cd {
        total = tape.add(cd, total)?;
    }
    if let Some(pp) = l_pp {
        let weighted = tape.scale(pp, T::lit(pp_weight))?;
        total = tape.add(weighted, total)?;
    }
    Ok(total)
}

/// Scalar loss values reported for one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_pp: f64,
    pub l_cd: f64,
    pub l_adv_d: f64,
    pub l_adv_g: f64,
    pub total_g: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_pp, self.l_cd, self.l_adv_d, self.l_adv_g, self.total_g]
            .iter()
            .all(|v| v.is_finite())
    }
}
