//! Layer primitives shared by the generators and the discriminator.

mod attention;
mod embedding;
mod layers;
mod norm;
mod params;
mod projection;
mod spectral;

pub use attention::{SelfAttention, ATTENTION_REDUCTION};
pub use embedding::{ClassEmbedding, ClassInput};
pub use layers::{Conv2d, Linear};
pub use norm::{BatchNorm, CondBatchNorm, RunningStats, BN_EPS, BN_MOMENTUM};
pub use params::{Ctx, Init, Mode, Param, ParamId, ParamKind, ParamStore};
pub use projection::projection_logit;
pub use spectral::{spectral_normalize, SpectralNorm, SpectralNormState, SIGMA_FLOOR};
