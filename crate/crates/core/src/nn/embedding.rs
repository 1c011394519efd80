use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

/// Class conditioning for a batch.
#[derive(Clone, Debug)]
pub enum ClassInput<T> {
    /// One class index per sample.
    Labels(Vec<usize>),
    /// Convex weights over classes, shape `(batch, num_classes)`; each
    /// sample's condition is the weighted sum of embedding rows.
    Mixture(Tensor<T>),
}

impl<T: Real> ClassInput<T> {
    pub fn batch_size(&self) -> usize {
        match self {
            ClassInput::Labels(l) => l.len(),
            ClassInput::Mixture(w) => w.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self {
            ClassInput::Labels(labels) => {
                if let Some(&index) = labels.iter().find(|&&c| c >= num_classes) {
                    return Err(Error::ClassOutOfRange { index, num_classes });
                }
            }
            ClassInput::Mixture(w) => {
                if w.rank() != 2 || w.shape()[1] != num_classes {
                    return Err(Error::shape(
                        "class mixture",
                        format!("expected (batch, {num_classes}), got {:?}", w.shape()),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A `(num_classes, dim)` lookup table.
#[derive(Clone, Debug)]
pub struct ClassEmbedding {
    pub table: ParamId,
    pub num_classes: usize,
    pub dim: usize,
}

impl ClassEmbedding {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, init: Tensor<T>) -> Result<Self> {
        let [num_classes, dim] = init.shape()[..] else {
            return Err(Error::shape(
                "embedding",
                format!("table must be rank 2, got {:?}", init.shape()),
            ));
        };
        let table = store.add(name, init, ParamKind::Trainable)?;
        Ok(Self {
            table,
            num_classes,
            dim,
        })
    }

    pub fn from_id(table: ParamId, num_classes: usize, dim: usize) -> Self {
        Self {
            table,
            num_classes,
            dim,
        }
    }

    /// `(batch, dim)` rows for the given conditioning.
    pub fn lookup<T: Real>(&self, cx: &mut Ctx<T>, cls: &ClassInput<T>) -> Result<Var> {
        cls.validate(self.num_classes)?;
        let table = cx.param(self.table);
        match cls {
            ClassInput::Labels(labels) => cx.tape.gather_rows(table, labels),
            ClassInput::Mixture(w) => {
                let w = cx.tape.constant(w.clone());
                cx.tape.matmul(w, table)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.num_classes * self.dim
    }
}
