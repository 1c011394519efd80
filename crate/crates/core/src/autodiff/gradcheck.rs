//! Central finite-difference verification of tape gradients (64-bit only).

use crate::autodiff::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub index: usize,
    pub numel: usize,
    /// `max |analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞)`, or 0 when
    /// both norms are within [`ZERO_GRADIENT`].
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tol: f64,
}

/// Gradients no larger than this on both sides count as exactly zero;
/// their relative error is roundoff noise.
pub const ZERO_GRADIENT: f64 = 1e-7;

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares backward gradients of `f` against `(f(p+h) − f(p−h)) / 2h` for
/// every element of every parameter block.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must
/// return a scalar node.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut blocks = Vec::with_capacity(params.len());
    let mut probe = params.to_vec();
    for (index, &var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, var);
        let mut numeric = vec![0.0; params[index].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = params[index].data()[i];
            probe[index].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[index].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[index].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let scale = analytic
            .data()
            .iter()
            .chain(numeric.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let max_diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let max_rel_error = if scale > ZERO_GRADIENT { max_diff / scale } else { 0.0 };
        blocks.push(BlockReport {
            index,
            numel: numeric.len(),
            max_rel_error,
            passed: max_rel_error <= tol,
        });
    }
    Ok(GradCheckReport { blocks, tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_matches() {
        let w = Tensor::from_f64([3], &[0.5, -1.0, 2.0]).unwrap();
        let report = grad_check(
            |tape, v| {
                let s = tape.scale(v[0], 3.0)?;
                tape.sum(s)
            },
            &[w],
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_backward_fails() {
        let x = Tensor::from_f64([3], &[0.3, -0.7, 1.1]).unwrap();
        let report = grad_check(
            |tape, v| {
                let value = tape.value(v[0]).map(|a| a * a);
                // Wrong rule: claims d(x²)/dx = x.
                let sq = tape.custom(
                    &[v[0]],
                    value,
                    Box::new(|inputs, _, g| {
                        vec![Tensor::new(
                            inputs[0].shape(),
                            inputs[0].data().iter().zip(g.data()).map(|(x, g)| x * g).collect(),
                        )
                        .unwrap()]
                    }),
                )?;
                tape.sum(sq)
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.worst() > 0.1);
    }
}
