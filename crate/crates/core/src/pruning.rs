//! Learnable channel masks and transition layers.
//!
//! A mask layer owns one parameter `w_i` per output channel of the
//! convolution it follows and gates that channel by
//! `m_i = 1 / (1 + exp(−δ·w_i))`. The sparse regularizer `Σ |w_i + 1|` pulls
//! every `w_i` towards −1. Once more than a fraction `α` of the gates sit at
//! or below `pivot`, the layer is snapped to `{0, 1}` and frozen.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

/// The binarization rule on raw gate values: `None` while the fraction of
/// gates at or below `pivot` is at most `alpha`, otherwise the gates snapped
/// to `{0, 1}` (`true` = kept).
pub fn binarize_rule<T: Real>(values: &[T], pivot: T, alpha: f64) -> Option<Vec<bool>> {
    if values.is_empty() {
        return None;
    }
    let below = values.iter().filter(|&&v| v <= pivot).count();
    if below as f64 / values.len() as f64 <= alpha {
        return None;
    }
    Some(values.iter().map(|&v| v > pivot).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Relaxation constant δ.
    pub delta: f64,
    /// Compression-ratio threshold α.
    pub alpha: f64,
    pub pivot: f64,
    /// Initial value of every `w_i`.
    pub init: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            delta: 1e3,
            alpha: 0.7,
            pivot: 0.005,
            init: 0.01,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!(
                "mask delta must be positive, got {}",
                self.delta
            )));
        }
        if !(self.pivot > 0.0 && self.pivot < 1.0) {
            return Err(Error::Config(format!(
                "mask pivot must lie in (0, 1), got {}",
                self.pivot
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "mask alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskState {
    pub w: ParamId,
    pub n: usize,
    pub delta: f64,
    pub alpha: f64,
    pub pivot: f64,
    /// Binarized gates, present once the layer is frozen.
    pub m_star: Option<Vec<bool>>,
}

/// Serializable mask state, stored in checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub name: String,
    pub delta: f64,
    pub alpha: f64,
    pub pivot: f64,
    pub frozen: bool,
    pub m_star: Option<Vec<u8>>,
}

impl MaskState {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, n: usize, cfg: &MaskConfig) -> Result<Self> {
        cfg.validate()?;
        let w = store.add(name, Tensor::full([n], T::lit(cfg.init)), ParamKind::Trainable)?;
        Ok(Self {
            w,
            n,
            delta: cfg.delta,
            alpha: cfg.alpha,
            pivot: cfg.pivot,
            m_star: None,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.m_star.is_some()
    }

    pub fn m_star<T: Real>(&self) -> Option<Tensor<T>> {
        self.m_star
            .as_ref()
            .map(|bits| Tensor::from_fn([bits.len()], |i| if bits[i] { T::one() } else { T::zero() }))
    }

    /// Current gate values `m_i` (the binarized ones once frozen).
    pub fn mask_values<T: Real>(&self, store: &ParamStore<T>) -> Tensor<T> {
        match self.m_star() {
            Some(m) => m,
            None => {
                let delta = T::lit(self.delta);
                store.value(self.w).map(|w| sigmoid(delta * w))
            }
        }
    }

    /// Tape-recorded gate values. Frozen gates are constants, so no
    /// gradient reaches `w`.
    pub fn mask_var<T: Real>(&self, cx: &mut Ctx<T>) -> Result<Var> {
        match self.m_star() {
            Some(m) => Ok(cx.tape.constant(m)),
            None => {
                let w = cx.param(self.w);
                let scaled = cx.tape.scale(w, T::lit(self.delta))?;
                cx.tape.sigmoid(scaled)
            }
        }
    }

    /// Multiplies channel `i` of `x (B, n, H, W)` by `m_i`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (_, c, _, _) = cx.tape.value(x).dims4("mask")?;
        if c != self.n {
            return Err(Error::shape(
                "mask",
                format!("channels: mask has {}, input has {c}", self.n),
            ));
        }
        let m = self.mask_var(cx)?;
        let m = cx.tape.reshape(m, &[1, self.n, 1, 1])?;
        cx.tape.mul(x, m)
    }

    /// `Σ |w_i + 1|`; a constant once the layer is frozen.
    pub fn regularizer<T: Real>(&self, cx: &mut Ctx<T>) -> Result<Var> {
        if self.is_frozen() {
            let value = self.regularizer_value(cx.store);
            return Ok(cx.tape.constant(Tensor::scalar(value)));
        }
        let w = cx.param(self.w);
        let shifted = cx.tape.offset(w, T::one())?;
        let abs = cx.tape.abs(shifted)?;
        cx.tape.sum(abs)
    }

    pub fn regularizer_value<T: Real>(&self, store: &ParamStore<T>) -> T {
        store.value(self.w).data().iter().map(|&w| (w + T::one()).abs()).sum()
    }

    /// Number of gates at or below the pivot.
    pub fn count_below_pivot<T: Real>(&self, store: &ParamStore<T>) -> usize {
        let pivot = T::lit(self.pivot);
        self.mask_values(store).data().iter().filter(|&&m| m <= pivot).count()
    }

    pub fn zero_fraction<T: Real>(&self, store: &ParamStore<T>) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.count_below_pivot(store) as f64 / self.n as f64
    }

    /// Applies the binarization rule. Returns `true` if the layer froze on
    /// this call; frozen layers are left untouched.
    pub fn binarize_check<T: Real>(&mut self, store: &mut ParamStore<T>) -> bool {
        if self.is_frozen() {
            return false;
        }
        let m = self.mask_values(store);
        match binarize_rule(m.data(), T::lit(self.pivot), self.alpha) {
            Some(bits) => {
                self.m_star = Some(bits);
                store.set_frozen(self.w, true);
                true
            }
            None => false,
        }
    }

    /// Indices of surviving channels, ascending.
    pub fn active_channels(&self) -> Result<Vec<usize>> {
        let bits = self.m_star.as_ref().ok_or(Error::MaskNotFrozen)?;
        Ok(bits.iter().enumerate().filter(|(_, &on)| on).map(|(i, _)| i).collect())
    }

    pub fn record<T: Real>(&self, store: &ParamStore<T>) -> MaskRecord {
        MaskRecord {
            name: store.name(self.w).to_string(),
            delta: self.delta,
            alpha: self.alpha,
            pivot: self.pivot,
            frozen: self.is_frozen(),
            m_star: self
                .m_star
                .as_ref()
                .map(|bits| bits.iter().map(|&b| u8::from(b)).collect()),
        }
    }

    /// Restores frozen state and hyperparameters from a record.
    pub fn apply_record<T: Real>(&mut self, record: &MaskRecord, store: &mut ParamStore<T>) -> Result<()> {
        self.delta = record.delta;
        self.alpha = record.alpha;
        self.pivot = record.pivot;
        self.m_star = match (&record.m_star, record.frozen) {
            (Some(bits), true) => {
                if bits.len() != self.n {
                    return Err(Error::Malformed(format!(
                        "mask `{}` has {} binarized values, expected {}",
                        record.name,
                        bits.len(),
                        self.n
                    )));
                }
                Some(bits.iter().map(|&b| b != 0).collect())
            }
            (None, false) => None,
            _ => {
                return Err(Error::Malformed(format!(
                    "mask `{}`: frozen flag and values disagree",
                    record.name
                )))
            }
        };
        store.set_frozen(self.w, self.is_frozen());
        Ok(())
    }
}

/// 1×1 convolution restoring a block's fixed output width.
#[derive(Clone, Debug)]
pub struct TransitionLayer {
    pub conv: Conv2d,
}

impl TransitionLayer {
    /// Identity-initialized when `in_ch == out_ch`, scaled-normal otherwise.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, init, name, in_ch, out_ch, 1)?;
        if in_ch == out_ch {
            let eye = Tensor::from_fn([out_ch, in_ch, 1, 1], |k| {
                if k / in_ch == k % in_ch {
                    T::one()
                } else {
                    T::zero()
                }
            });
            store.set(conv.weight, eye);
        }
        Ok(Self { conv })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        self.conv.forward(cx, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::Mode;

    fn mask_with(store: &mut ParamStore<f64>, w: &[f64], cfg: MaskConfig) -> MaskState {
        let m = MaskState::new(store, "mask", w.len(), &cfg).unwrap();
        store.set(m.w, Tensor::from_f64([w.len()], w).unwrap());
        m
    }

    fn regularizer(w: &[f64]) -> f64 {
        let mut store = ParamStore::new();
        let m = mask_with(&mut store, w, MaskConfig::default());
        let mut tape = Tape::new();
        let vars = tape.bind_params(&store, true);
        let mut cx = Ctx::new(&mut tape, &mut store, &vars, Mode::Train);
        let r = m.regularizer(&mut cx).unwrap();
        cx.tape.value(r).item()
    }

    #[test]
    fn regularizer_values() {
        assert_eq!(regularizer(&[-1.0, -1.0, -1.0]), 0.0);
        assert_eq!(regularizer(&[0.0]), 1.0);
        assert_eq!(regularizer(&[0.5, -1.5, -1.0]), 2.0);
    }

    #[test]
    fn zero_parameter_gives_half() {
        let mut store = ParamStore::new();
        let m = mask_with(&mut store, &[0.0], MaskConfig::default());
        assert_eq!(m.mask_values(&store).data(), &[0.5]);
    }

    #[test]
    fn default_init_starts_open() {
        let mut store = ParamStore::<f32>::new();
        let m = MaskState::new(&mut store, "m", 4, &MaskConfig::default()).unwrap();
        assert!(m.mask_values(&store).data().iter().all(|&v| v > 0.9999));
    }

    /// Gate values `(0.9 ×4, 0.004 ×6)` expressed through `w = logit(m)/δ`.
    fn ten_gate_mask(store: &mut ParamStore<f64>, alpha: f64) -> MaskState {
        let cfg = MaskConfig {
            alpha,
            ..MaskConfig::default()
        };
        let logit = |m: f64| (m / (1.0 - m)).ln() / cfg.delta;
        let w: Vec<f64> = (0..10).map(|i| if i < 4 { logit(0.9) } else { logit(0.004) }).collect();
        mask_with(store, &w, cfg)
    }

    #[test]
    fn binarizes_above_alpha() {
        let mut store = ParamStore::new();
        let mut m = ten_gate_mask(&mut store, 0.5);
        assert!(m.binarize_check(&mut store));
        let expected: Vec<bool> = (0..10).map(|i| i < 4).collect();
        assert_eq!(m.m_star.as_deref(), Some(&expected[..]));
        assert!(store.get(m.w).frozen);
        assert_eq!(m.active_channels().unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn ratio_at_or_below_alpha_is_unchanged() {
        let mut store = ParamStore::new();
        let mut m = ten_gate_mask(&mut store, 0.7);
        let before = m.mask_values(&store);
        assert!(!m.binarize_check(&mut store));
        assert!(!m.is_frozen());
        assert_eq!(m.mask_values(&store), before);
        assert!(matches!(m.active_channels(), Err(Error::MaskNotFrozen)));
    }

    #[test]
    fn gates_exactly_at_pivot_count_as_zero() {
        assert_eq!(binarize_rule(&[0.005f64; 4], 0.005, 0.5), Some(vec![false; 4]));
        assert_eq!(binarize_rule(&[0.005f64, 0.9], 0.005, 0.4), Some(vec![false, true]));
    }

    #[test]
    fn ratio_equal_to_alpha_stays_unfrozen() {
        let m = [0.001f64, 0.002, 0.9, 0.8];
        assert_eq!(binarize_rule(&m, 0.005, 0.5), None);
        assert_eq!(binarize_rule(&m, 0.005, 0.49), Some(vec![false, false, true, true]));
    }

    #[test]
    fn sigmoid_gate_values() {
        let mut store = ParamStore::new();
        let m = mask_with(&mut store, &[-0.01, 0.01], MaskConfig::default());
        let v = m.mask_values(&store);
        assert!((v.data()[0] - 4.5397868702434395e-5).abs() < 1e-15);
        assert!((v.data()[1] - 0.9999546021312976).abs() < 1e-15);
    }

    #[test]
    fn binarize_is_idempotent_once_frozen() {
        let mut store = ParamStore::new();
        let mut m = ten_gate_mask(&mut store, 0.5);
        m.binarize_check(&mut store);
        let snapshot = m.clone();
        store.set(m.w, Tensor::full([10], -5.0));
        assert!(!m.binarize_check(&mut store));
        assert_eq!(m, snapshot);
    }

    #[test]
    fn frozen_mask_blocks_gradient_and_projects() {
        let mut store = ParamStore::new();
        let mut m = ten_gate_mask(&mut store, 0.5);
        m.binarize_check(&mut store);
        let mut tape = Tape::new();
        let vars = tape.bind_params(&store, true);
        let mut cx = Ctx::new(&mut tape, &mut store, &vars, Mode::Train);
        let x = cx.tape.leaf(Tensor::from_fn([2, 10, 2, 2], |i| i as f64 * 0.1 - 3.0));
        let once = m.forward(&mut cx, x).unwrap();
        let twice = m.forward(&mut cx, once).unwrap();
        assert_eq!(cx.tape.value(once), cx.tape.value(twice));
        let reg = m.regularizer(&mut cx).unwrap();
        let s = cx.tape.sum(twice).unwrap();
        let loss = cx.tape.add(s, reg).unwrap();
        let wv = cx.param(m.w);
        let grads = cx.tape.backward(loss).unwrap();
        assert!(grads.wrt(cx.tape, wv).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn per_channel_gating() {
        let mut store = ParamStore::<f64>::new();
        let mut m = MaskState::new(
            &mut store,
            "m",
            2,
            &MaskConfig {
                alpha: 0.4,
                ..MaskConfig::default()
            },
        )
        .unwrap();
        store.set(m.w, Tensor::from_f64([2], &[0.01, -0.02]).unwrap());
        assert!(m.binarize_check(&mut store));
        let mut tape = Tape::new();
        let vars = tape.bind_params(&store, false);
        let mut cx = Ctx::new(&mut tape, &mut store, &vars, Mode::Eval);
        let x = cx.tape.constant(Tensor::ones([1, 2, 1, 2]));
        let y = m.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.value(y).data(), &[1.0, 1.0, 0.0, 0.0]);
        let bad = cx.tape.constant(Tensor::ones([1, 3, 1, 1]));
        assert!(m.forward(&mut cx, bad).is_err());
    }

    #[test]
    fn transition_identity_and_shapes() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(1);
        let eye = TransitionLayer::new(&mut store, &mut init, "t1", 3, 3).unwrap();
        let widen = TransitionLayer::new(&mut store, &mut init, "t2", 3, 5).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind_params(&store, false);
        let mut cx = Ctx::new(&mut tape, &mut store, &vars, Mode::Eval);
        let xt = Tensor::from_fn([2, 3, 4, 4], |i| (i as f64).sin());
        let x = cx.tape.constant(xt.clone());
        let y = eye.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.value(y), &xt);
        let z = widen.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.shape(z), &[2, 5, 4, 4]);
        let bad = cx.tape.constant(Tensor::zeros([1, 4, 2, 2]));
        assert!(widen.forward(&mut cx, bad).is_err());
    }

    #[test]
    fn zero_transition_outputs_zero() {
        let mut store = ParamStore::<f64>::new();
        let t = TransitionLayer::new(&mut store, &mut Init::new(1), "t", 3, 5).unwrap();
        store.set(t.conv.weight, Tensor::zeros([5, 3, 1, 1]));
        let mut tape = Tape::new();
        let vars = tape.bind_params(&store, false);
        let mut cx = Ctx::new(&mut tape, &mut store, &vars, Mode::Eval);
        let x = cx.tape.constant(Tensor::ones([1, 3, 2, 2]));
        let y = t.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.value(y).max_abs(), 0.0);
    }
}
