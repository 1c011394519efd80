use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Per-parameter moment estimates, indexed like the store they serve.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

impl Adam {
    /// One bias-corrected update of every unfrozen trainable parameter.
    /// `grads[i]` is the gradient for store entry `i`; `None` counts as zero.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        state: &mut OptimState<T>,
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() || state.m.len() != store.len() {
            return Err(Error::shape(
                "adam",
                format!(
                    "{} gradients and {} moments for {} parameters",
                    grads.len(),
                    state.m.len(),
                    store.len()
                ),
            ));
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "adam",
                        format!("gradient for `{}` has shape {:?}", p.name, g.shape()),
                    ));
                }
                if p.is_trainable() && !g.is_finite() {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.is_trainable())
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let i = id.index();
            let zero;
            let g = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(store.value(id).shape());
                    &zero
                }
            };
            let mut value = store.value(id).clone();
            let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
            for (((p, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
            store.set(id, value);
        }
        Ok(())
    }
}
