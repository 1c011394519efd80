use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ATTENTION_REDUCTION;
use crate::pruning::MaskConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    /// Masked blocks with transition layers.
    Student,
    /// Plain residual blocks, no masks or transitions.
    Teacher,
    /// Exported student: narrowed convolutions, transitions kept, no masks.
    Pruned,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub upsample: bool,
    /// Output channels of the first 3×3 convolution; defaults to `out_ch`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv1_out: Option<usize>,
    /// Output channels of the second 3×3 convolution; defaults to `out_ch`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv2_out: Option<usize>,
}

impl BlockSpec {
    pub fn new(in_ch: usize, out_ch: usize, upsample: bool) -> Self {
        Self {
            in_ch,
            out_ch,
            upsample,
            conv1_out: None,
            conv2_out: None,
        }
    }

    pub fn conv1_channels(&self) -> usize {
        self.conv1_out.unwrap_or(self.out_ch)
    }

    pub fn conv2_channels(&self) -> usize {
        self.conv2_out.unwrap_or(self.out_ch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub z_dim: usize,
    pub num_classes: usize,
    /// Base channel width; informational once `blocks` is set.
    pub width: usize,
    pub image_size: usize,
    pub blocks: Vec<BlockSpec>,
    /// Self-attention is inserted after the block with this index.
    pub attention_after: Option<usize>,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub seed: u64,
}

/// Number of residual blocks in the default generator.
pub const DEFAULT_BLOCKS: usize = 5;

impl GeneratorConfig {
    /// Five-block student: three upsampling blocks from `image_size / 8`,
    /// halving the width at the third block, with self-attention after the
    /// second.
    pub fn toy(z_dim: usize, num_classes: usize, width: usize, image_size: usize) -> Self {
        let half = width / 2;
        Self {
            kind: GeneratorKind::Student,
            z_dim,
            num_classes,
            width,
            image_size,
            blocks: vec![
                BlockSpec::new(width, width, true),
                BlockSpec::new(width, width, true),
                BlockSpec::new(width, half, true),
                BlockSpec::new(half, half, false),
                BlockSpec::new(half, half, false),
            ],
            attention_after: Some(1),
            mask: MaskConfig::default(),
            seed: 0,
        }
    }

    /// Unmasked twin with every channel count multiplied by `factor`.
    pub fn teacher(&self, factor: usize) -> Self {
        Self {
            kind: GeneratorKind::Teacher,
            width: self.width * factor,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockSpec::new(b.in_ch * factor, b.out_ch * factor, b.upsample))
                .collect(),
            ..self.clone()
        }
    }

    pub fn upsample_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.upsample).count()
    }

    pub fn stem_size(&self) -> usize {
        self.image_size >> self.upsample_count()
    }

    pub fn stem_channels(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.in_ch)
    }

    pub fn final_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_ch)
    }

    /// Spatial size of block `k`'s output.
    pub fn block_size(&self, k: usize) -> usize {
        let ups = self.blocks[..=k].iter().filter(|b| b.upsample).count();
        self.stem_size() << ups
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.blocks.is_empty() {
            return bad("generator needs at least one block".into());
        }
        if self.z_dim == 0 || self.num_classes == 0 {
            return bad("z_dim and num_classes must be positive".into());
        }
        for (k, pair) in self.blocks.windows(2).enumerate() {
            if pair[0].out_ch != pair[1].in_ch {
                return bad(format!(
                    "channel chain broken: block {k} outputs {} but block {} expects {}",
                    pair[0].out_ch,
                    k + 1,
                    pair[1].in_ch
                ));
            }
        }
        for (k, b) in self.blocks.iter().enumerate() {
            if b.in_ch == 0 || b.out_ch == 0 {
                return bad(format!("block {k} has a zero channel count"));
            }
            let custom = b.conv1_out.is_some() || b.conv2_out.is_some();
            if custom && self.kind != GeneratorKind::Pruned {
                return bad(format!(
                    "block {k}: explicit conv widths are only valid for pruned generators"
                ));
            }
        }
        let ups = self.upsample_count();
        if self.stem_size() == 0 || self.stem_size() << ups != self.image_size {
            return bad(format!(
                "image size {} is not divisible by 2^{ups} upsampling blocks",
                self.image_size
            ));
        }
        if let Some(a) = self.attention_after {
            let Some(b) = self.blocks.get(a) else {
                return bad(format!("attention position {a} is past the last block"));
            };
            if b.out_ch % ATTENTION_REDUCTION != 0 {
                return bad(format!(
                    "attention after block {a}: {} channels not divisible by {ATTENTION_REDUCTION}",
                    b.out_ch
                ));
            }
        }
        if self.kind == GeneratorKind::Student {
            self.mask.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub num_classes: usize,
    pub image_size: usize,
    /// Output channels per block; all but the last block downsample.
    pub channels: Vec<usize>,
    #[serde(default = "default_true")]
    pub spectral_norm: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl DiscriminatorConfig {
    pub fn toy(num_classes: usize, width: usize, image_size: usize) -> Self {
        Self {
            num_classes,
            image_size,
            channels: vec![width, width * 2, width * 2, width * 4],
            spectral_norm: true,
            seed: 1,
        }
    }

    /// Dimension of the pooled features fed to the projection head.
    pub fn feature_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(
                "discriminator channels must be non-empty and positive".into(),
            ));
        }
        let downs = self.channels.len() - 1;
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << downs) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by 2^{downs} downsampling blocks",
                self.image_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }
}
