use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Projection-discriminator logit:
/// `logit_b = ⟨features_b, head⟩ + ⟨features_b, embed_b⟩`.
///
/// `features` and `embed_rows` are `(B, D)`, `head` is `(D)`.
pub fn projection_logit<T: Real>(tape: &mut Tape<T>, features: Var, head: Var, embed_rows: Var) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    let [b, d] = fs[..] else {
        return Err(Error::shape(
            "projection",
            format!("features must be (batch, dim), got {fs:?}"),
        ));
    };
    if tape.shape(head) != [d] || tape.shape(embed_rows) != [b, d] {
        return Err(Error::shape(
            "projection",
            format!(
                "features {fs:?}, head {:?}, embedding rows {:?}",
                tape.shape(head),
                tape.shape(embed_rows)
            ),
        ));
    }
    let dir = tape.add(embed_rows, head)?;
    let prod = tape.mul(features, dir)?;
    let summed = tape.sum_axes(prod, &[1])?;
    tape.reshape(summed, &[b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn logit(f: &[f64], head: &[f64], e: &[f64]) -> f64 {
        let d = head.len();
        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::from_f64([1, d], f).unwrap());
        let hv = tape.constant(Tensor::from_f64([d], head).unwrap());
        let ev = tape.constant(Tensor::from_f64([1, d], e).unwrap());
        let l = projection_logit(&mut tape, fv, hv, ev).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn hand_computed_logit() {
        assert_eq!(logit(&[1.0, 2.0], &[1.0, 0.0], &[0.0, 3.0]), 7.0);
    }

    #[test]
    fn zero_embedding_is_unconditional() {
        assert_eq!(logit(&[1.5, -2.0], &[2.0, 1.0], &[0.0, 0.0]), 1.0);
    }

    #[test]
    fn orthogonal_features_give_zero() {
        assert_eq!(logit(&[0.0, 1.0], &[1.0, 0.0], &[2.0, 0.0]), 0.0);
    }
}
