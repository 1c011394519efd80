use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::layers::Conv2d;
use crate::nn::params::{Ctx, Init, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

pub const ATTENTION_REDUCTION: usize = 8;

/// Self-attention over spatial positions with a zero-initialized output gate.
///
/// For query position `j`, the output is `x_j + γ · Σ_i a_ji h(x_i)` where
/// `a_j· = softmax_i(g(x_j)ᵀ f(x_i))`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub f: Conv2d,
    pub g: Conv2d,
    pub h: Conv2d,
    pub gamma: ParamId,
    pub channels: usize,
}

impl SelfAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(ATTENTION_REDUCTION) || channels == 0 {
            return Err(Error::Config(format!(
                "{name}: attention channels {channels} not divisible by {ATTENTION_REDUCTION}"
            )));
        }
        let reduced = channels / ATTENTION_REDUCTION;
        Ok(Self {
            f: Conv2d::new(store, init, &format!("{name}.f"), channels, reduced, 1)?,
            g: Conv2d::new(store, init, &format!("{name}.g"), channels, reduced, 1)?,
            h: Conv2d::new(store, init, &format!("{name}.h"), channels, channels, 1)?,
            gamma: store.add(format!("{name}.gamma"), Tensor::zeros([1]), ParamKind::Trainable)?,
            channels,
        })
    }

    fn check<T: Real>(&self, cx: &Ctx<T>, x: Var) -> Result<(usize, usize, usize, usize)> {
        let (b, c, h, w) = cx.tape.value(x).dims4("self_attention")?;
        if h * w == 0 {
            return Err(Error::shape("self_attention", "empty spatial extent"));
        }
        if c != self.channels {
            return Err(Error::shape(
                "self_attention",
                format!("channels: expected {}, got {c}", self.channels),
            ));
        }
        Ok((b, c, h, w))
    }

    /// Attention weights `(B, N, N)`; row `j` is the distribution over key
    /// positions for query `j`.
    pub fn attention_weights<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.check(cx, x)?;
        let n = h * w;
        let r = c / ATTENTION_REDUCTION;
        let f = self.f.forward(cx, x)?;
        let f = cx.tape.reshape(f, &[b, r, n])?;
        let g = self.g.forward(cx, x)?;
        let g = cx.tape.reshape(g, &[b, r, n])?;
        let gt = cx.tape.transpose(g)?;
        let scores = cx.tape.matmul(gt, f)?;
        cx.tape.softmax(scores, 2)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.check(cx, x)?;
        let n = h * w;
        let attn = self.attention_weights(cx, x)?;
        let hv = self.h.forward(cx, x)?;
        let hv = cx.tape.reshape(hv, &[b, c, n])?;
        let at = cx.tape.transpose(attn)?;
        let o = cx.tape.matmul(hv, at)?;
        let o = cx.tape.reshape(o, &[b, c, h, w])?;
        let gamma = cx.param(self.gamma);
        let gated = cx.tape.mul(o, gamma)?;
        cx.tape.add(x, gated)
    }

    pub fn param_count(&self) -> usize {
        self.f.param_count() + self.g.param_count() + self.h.param_count() + 1
    }

    /// Per-sample multiply-accumulates at `h × w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let n = (h * w) as u64;
        let c = self.channels as u64;
        let r = c / ATTENTION_REDUCTION as u64;
        // f, g, h projections + score matrix + weighted sum
        n * c * (2 * r + c) + n * n * r + n * n * c
    }
}
