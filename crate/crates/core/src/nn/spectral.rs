//! Spectral normalization by persistent power iteration.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::params::{Ctx, Init, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

pub const SIGMA_FLOOR: f64 = 1e-12;

/// Left (`u`, length `out`) and right (`v`, length `rest`) singular vector
/// estimates for a weight viewed as an `(out, rest)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNormState<T> {
    pub u: Tensor<T>,
    pub v: Tensor<T>,
}

fn as_matrix<T: Real>(weight: &Tensor<T>) -> Result<(usize, usize)> {
    let out = *weight
        .shape()
        .first()
        .ok_or_else(|| Error::shape("spectral_norm", "scalar weight"))?;
    Ok((out, weight.numel() / out.max(1)))
}

fn normalize<T: Real>(v: &mut [T]) {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let norm = norm.max(T::lit(SIGMA_FLOOR));
    v.iter_mut().for_each(|x| *x /= norm);
}

impl<T: Real> SpectralNormState<T> {
    pub fn new(u: Tensor<T>, v: Tensor<T>) -> Self {
        Self { u, v }
    }

    /// One persistent power-iteration step: `v ← Wᵀu/‖·‖`, `u ← Wv/‖·‖`.
    pub fn power_iterate(&mut self, weight: &Tensor<T>) -> Result<()> {
        let (out, rest) = as_matrix(weight)?;
        if self.u.numel() != out || self.v.numel() != rest {
            return Err(Error::shape(
                "spectral_norm",
                format!(
                    "state ({}, {}) for weight ({out}, {rest})",
                    self.u.numel(),
                    self.v.numel()
                ),
            ));
        }
        let w = weight.data();
        let u = self.u.data().to_vec();
        let mut v = vec![T::zero(); rest];
        for i in 0..out {
            for j in 0..rest {
                v[j] += w[i * rest + j] * u[i];
            }
        }
        normalize(&mut v);
        let mut u = vec![T::zero(); out];
        for i in 0..out {
            u[i] = (0..rest).map(|j| w[i * rest + j] * v[j]).sum();
        }
        normalize(&mut u);
        self.u = Tensor::new([out], u)?;
        self.v = Tensor::new([rest], v)?;
        Ok(())
    }

    /// `σ̂ = uᵀ W v`.
    pub fn sigma(&self, weight: &Tensor<T>) -> Result<T> {
        let (out, rest) = as_matrix(weight)?;
        let w = weight.data();
        let (u, v) = (self.u.data(), self.v.data());
        Ok((0..out)
            .map(|i| u[i] * (0..rest).map(|j| w[i * rest + j] * v[j]).sum::<T>())
            .sum())
    }

    /// `u vᵀ` shaped like the weight; `∂σ̂/∂W` for fixed `u`, `v`.
    fn outer(&self, weight_shape: &[usize]) -> Result<Tensor<T>> {
        let (u, v) = (self.u.data(), self.v.data());
        let rest = v.len();
        Tensor::new(
            weight_shape,
            (0..u.len() * rest).map(|k| u[k / rest] * v[k % rest]).collect(),
        )
    }
}

/// One power-iteration step followed by `W / max(σ̂, 1e-12)`.
pub fn spectral_normalize<T: Real>(weight: &Tensor<T>, state: &mut SpectralNormState<T>) -> Result<Tensor<T>> {
    state.power_iterate(weight)?;
    let sigma = state.sigma(weight)?.max(T::lit(SIGMA_FLOOR));
    Ok(weight.map(|w| w / sigma))
}

/// Spectral normalization attached to one stored weight.
#[derive(Clone, Debug)]
pub struct SpectralNorm {
    pub weight: ParamId,
    pub u: ParamId,
    pub v: ParamId,
}

impl SpectralNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, weight: ParamId) -> Result<Self> {
        let (out, rest) = as_matrix(store.value(weight))?;
        let name = store.name(weight).to_string();
        let u = store.add(format!("{name}.sn_u"), init.unit_vector(out), ParamKind::Buffer)?;
        let v = store.add(format!("{name}.sn_v"), init.unit_vector(rest), ParamKind::Buffer)?;
        Ok(Self { weight, u, v })
    }

    pub fn state<T: Real>(&self, store: &ParamStore<T>) -> SpectralNormState<T> {
        SpectralNormState::new(store.value(self.u).clone(), store.value(self.v).clone())
    }

    /// Advances the stored power-iteration vectors by one step.
    pub fn update<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut state = self.state(store);
        state.power_iterate(store.value(self.weight))?;
        store.set(self.u, state.u);
        store.set(self.v, state.v);
        Ok(())
    }

    /// Tape-recorded `W / σ̂` with `u`, `v` held constant.
    pub fn normalized<T: Real>(&self, cx: &mut Ctx<T>) -> Result<Var> {
        let w = cx.param(self.weight);
        let state = self.state(cx.store);
        let outer = state.outer(cx.tape.shape(w))?;
        let outer = cx.tape.constant(outer);
        let prod = cx.tape.mul(w, outer)?;
        let sigma = cx.tape.sum(prod)?;
        let sigma = cx.tape.clamp_min(sigma, T::lit(SIGMA_FLOOR))?;
        cx.tape.div(w, sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_has_unit_sigma() {
        let u = [0.6, 0.8];
        let v = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        let w = Tensor::<f64>::from_fn([2, 3], |k| u[k / 3] * v[k % 3]);
        let mut state = SpectralNormState::new(
            Tensor::from_f64([2], &[1.0, 0.0]).unwrap(),
            Tensor::from_f64([3], &[1.0, 0.0, 0.0]).unwrap(),
        );
        let out = spectral_normalize(&w, &mut state).unwrap();
        assert!((state.sigma(&w).unwrap() - 1.0).abs() < 1e-12);
        assert!(out.max_abs_diff(&w).unwrap() < 1e-12);
    }

    #[test]
    fn diagonal_converges_to_top_singular_value() {
        let w = Tensor::<f64>::from_f64([2, 2], &[3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut state = SpectralNormState::new(
            Tensor::from_f64([2], &[0.6, 0.8]).unwrap(),
            Tensor::from_f64([2], &[0.6, 0.8]).unwrap(),
        );
        for _ in 0..20 {
            state.power_iterate(&w).unwrap();
        }
        assert!((state.sigma(&w).unwrap() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn zero_matrix_yields_zeros() {
        let w = Tensor::<f64>::zeros([3, 2]);
        let mut state = SpectralNormState::new(
            Tensor::from_f64([3], &[1.0, 0.0, 0.0]).unwrap(),
            Tensor::from_f64([2], &[1.0, 0.0]).unwrap(),
        );
        let out = spectral_normalize(&w, &mut state).unwrap();
        assert!(out.is_finite());
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn vectors_stay_unit_length() {
        let w = Tensor::<f64>::from_fn([4, 6], |i| ((i * 37) % 11) as f64 - 5.0);
        let mut init = Init::new(3);
        let mut state = SpectralNormState::new(init.unit_vector(4), init.unit_vector(6));
        for _ in 0..5 {
            state.power_iterate(&w).unwrap();
            for t in [&state.u, &state.v] {
                let n: f64 = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }
}
