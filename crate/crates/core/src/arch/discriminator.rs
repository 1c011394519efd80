use crate::arch::config::DiscriminatorConfig;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{
    projection_logit, ClassEmbedding, ClassInput, Conv2d, Ctx, Init, ParamId, ParamKind, ParamStore, SpectralNorm,
};
use crate::tensor::Real;

/// Convolution with an optional spectral-norm wrapper on its kernel.
#[derive(Clone, Debug)]
pub struct SnConv {
    pub conv: Conv2d,
    pub sn: Option<SpectralNorm>,
}

impl SnConv {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        sn: bool,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, init, name, in_ch, out_ch, kernel)?;
        let sn = if sn {
            Some(SpectralNorm::new(store, init, conv.weight)?)
        } else {
            None
        };
        Ok(Self { conv, sn })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        match &self.sn {
            Some(sn) => {
                let w = sn.normalized(cx)?;
                self.conv.forward_with_weight(cx, x, w)
            }
            None => self.conv.forward(cx, x),
        }
    }
}

/// Residual block; all but the last downsample by average pooling.
#[derive(Clone, Debug)]
pub struct DiscBlock {
    pub conv1: SnConv,
    pub conv2: SnConv,
    pub skip: SnConv,
    pub downsample: bool,
    /// The first block sees raw pixels and skips the leading ReLU.
    pub pre_relu: bool,
}

impl DiscBlock {
    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let mut h = x;
        if self.pre_relu {
            h = cx.tape.relu(h)?;
        }
        h = self.conv1.forward(cx, h)?;
        h = cx.tape.relu(h)?;
        h = self.conv2.forward(cx, h)?;
        let mut s = self.skip.forward(cx, x)?;
        if self.downsample {
            h = cx.tape.avgpool2(h)?;
            s = cx.tape.avgpool2(s)?;
        }
        cx.tape.add(h, s)
    }
}

/// Projection discriminator: residual blocks → ReLU → global sum pool →
/// `⟨φ, head⟩ + ⟨φ, embed(cls)⟩`.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub blocks: Vec<DiscBlock>,
    pub head: ParamId,
    pub head_sn: Option<SpectralNorm>,
    pub embed: ClassEmbedding,
}

impl Discriminator {
    pub fn build<T: Real>(cfg: &DiscriminatorConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(cfg.seed);
        let sn = cfg.spectral_norm;
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut in_ch = 3;
        for (k, &out_ch) in cfg.channels.iter().enumerate() {
            let name = format!("d.block{k}");
            blocks.push(DiscBlock {
                conv1: SnConv::new(store, &mut init, &format!("{name}.conv1"), in_ch, out_ch, 3, sn)?,
                conv2: SnConv::new(store, &mut init, &format!("{name}.conv2"), out_ch, out_ch, 3, sn)?,
                skip: SnConv::new(store, &mut init, &format!("{name}.skip"), in_ch, out_ch, 1, sn)?,
                downsample: k + 1 < cfg.channels.len(),
                pre_relu: k > 0,
            });
            in_ch = out_ch;
        }
        let d = cfg.feature_dim();
        let head = store.add(
            "d.head",
            init.normal(&[d], (1.0 / d as f64).sqrt()),
            ParamKind::Trainable,
        )?;
        let head_sn = if sn {
            Some(SpectralNorm::new(store, &mut init, head)?)
        } else {
            None
        };
        let table = init.normal(&[cfg.num_classes, d], (1.0 / d as f64).sqrt());
        let embed = ClassEmbedding::new(store, "d.embed", table)?;
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            head,
            head_sn,
            embed,
        })
    }

    /// One logit per sample.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, image: Var, cls: &ClassInput<T>) -> Result<Var> {
        let (b, c, h, w) = cx.tape.value(image).dims4("discriminator")?;
        let s = self.cfg.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(
                "discriminator",
                format!("expected (batch, 3, {s}, {s}), got {:?}", cx.tape.shape(image)),
            ));
        }
        if cls.batch_size() != b {
            return Err(Error::shape(
                "discriminator",
                format!("{} class conditions for batch of {b}", cls.batch_size()),
            ));
        }
        let mut x = image;
        for block in &self.blocks {
            x = block.forward(cx, x)?;
        }
        x = cx.tape.relu(x)?;
        let pooled = cx.tape.sum_axes(x, &[2, 3])?;
        let d = self.cfg.feature_dim();
        let features = cx.tape.reshape(pooled, &[b, d])?;
        let head = match &self.head_sn {
            Some(sn) => sn.normalized(cx)?,
            None => cx.param(self.head),
        };
        let rows = self.embed.lookup(cx, cls)?;
        projection_logit(cx.tape, features, head, rows)
    }

    fn spectral_norms(&self) -> impl Iterator<Item = &SpectralNorm> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.conv1, &b.conv2, &b.skip])
            .filter_map(|c| c.sn.as_ref())
            .chain(self.head_sn.iter())
    }

    /// Advances every spectral-norm power iteration by one step.
    pub fn power_iterate<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.spectral_norms().try_for_each(|sn| sn.update(store))
    }
}
