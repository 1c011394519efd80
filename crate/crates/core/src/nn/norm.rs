//! Batch normalization, plain and class-conditional.

use crate::autodiff::{StandardizeOver, Var};
use crate::error::{Error, Result};
use crate::nn::embedding::{ClassEmbedding, ClassInput};
use crate::nn::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics shared by both batch-norm flavours.
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: ParamId,
    pub var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros([channels]),
                ParamKind::Buffer,
            )?,
            var: store.add(
                format!("{name}.running_var"),
                Tensor::ones([channels]),
                ParamKind::Buffer,
            )?,
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    /// Standardized `x`: batch statistics in training mode, running
    /// statistics otherwise.
    pub fn standardize<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (b, c, h, w) = cx.tape.value(x).dims4("batch_norm")?;
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if c != self.channels {
            return Err(Error::shape(
                "batch_norm",
                format!("channels: expected {}, got {c}", self.channels),
            ));
        }
        let eps = T::lit(self.eps);
        if cx.training() {
            let (xhat, stats) = cx.tape.standardize(x, StandardizeOver::BatchAndSpace, eps)?;
            if cx.update_stats {
                let n = b * h * w;
                let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                let m = T::lit(self.momentum);
                let keep = T::one() - m;
                let mut rm = cx.store.value(self.mean).clone();
                let mut rv = cx.store.value(self.var).clone();
                for (r, &s) in rm.data_mut().iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * s;
                }
                for (r, &s) in rv.data_mut().iter_mut().zip(&stats.var) {
                    *r = keep * *r + m * s * T::lit(unbias);
                }
                cx.store.set(self.mean, rm);
                cx.store.set(self.var, rv);
            }
            Ok(xhat)
        } else {
            let mean = cx.store.value(self.mean).reshape([1, c, 1, 1])?;
            let inv = cx
                .store
                .value(self.var)
                .map(|v| T::one() / (v + eps).sqrt())
                .reshape([1, c, 1, 1])?;
            let mean = cx.tape.constant(mean);
            let inv = cx.tape.constant(inv);
            let centered = cx.tape.sub(x, mean)?;
            cx.tape.mul(centered, inv)
        }
    }
}

/// Class-conditional batch norm: `γ(cls) · x̂ + β(cls)`.
#[derive(Clone, Debug)]
pub struct CondBatchNorm {
    pub stats: RunningStats,
    pub gamma: ClassEmbedding,
    pub beta: ClassEmbedding,
}

impl CondBatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, num_classes: usize) -> Result<Self> {
        let stats = RunningStats::new(store, name, channels)?;
        let gamma = ClassEmbedding::new(store, &format!("{name}.gamma"), Tensor::ones([num_classes, channels]))?;
        let beta = ClassEmbedding::new(store, &format!("{name}.beta"), Tensor::zeros([num_classes, channels]))?;
        Ok(Self { stats, gamma, beta })
    }

    pub fn channels(&self) -> usize {
        self.stats.channels
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var, cls: &ClassInput<T>) -> Result<Var> {
        let b = cx.tape.shape(x).first().copied().unwrap_or(0);
        if cls.batch_size() != b {
            return Err(Error::shape(
                "cond_batchnorm",
                format!("{} class labels for batch of {b}", cls.batch_size()),
            ));
        }
        let xhat = self.stats.standardize(cx, x)?;
        let c = self.channels();
        let g = self.gamma.lookup(cx, cls)?;
        let g = cx.tape.reshape(g, &[b, c, 1, 1])?;
        let beta = self.beta.lookup(cx, cls)?;
        let beta = cx.tape.reshape(beta, &[b, c, 1, 1])?;
        let y = cx.tape.mul(xhat, g)?;
        cx.tape.add(y, beta)
    }

    pub fn param_count(&self) -> usize {
        self.gamma.param_count() + self.beta.param_count()
    }
}

/// Unconditional batch norm with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub stats: RunningStats,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let stats = RunningStats::new(store, name, channels)?;
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones([channels]), ParamKind::Trainable)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([channels]), ParamKind::Trainable)?;
        Ok(Self { stats, gamma, beta })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let xhat = self.stats.standardize(cx, x)?;
        let c = self.stats.channels;
        let g = cx.param(self.gamma);
        let g = cx.tape.reshape(g, &[1, c, 1, 1])?;
        let b = cx.param(self.beta);
        let b = cx.tape.reshape(b, &[1, c, 1, 1])?;
        let y = cx.tape.mul(xhat, g)?;
        cx.tape.add(y, b)
    }

    pub fn param_count(&self) -> usize {
        2 * self.stats.channels
    }
}
