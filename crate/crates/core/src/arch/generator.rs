use crate::arch::config::{BlockSpec, GeneratorConfig, GeneratorKind};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, ClassInput, CondBatchNorm, Conv2d, Ctx, Init, Linear, Mode, ParamStore, SelfAttention};
use crate::pruning::{MaskState, TransitionLayer};
use crate::tensor::{Real, Tensor};

/// Residual generator block. In a student it carries a mask after each 3×3
/// convolution's normalization and a transition before the residual add.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub spec: BlockSpec,
    pub cbn1: CondBatchNorm,
    pub conv1: Conv2d,
    pub cbn2: CondBatchNorm,
    pub conv2: Conv2d,
    pub mask1: Option<MaskState>,
    pub mask2: Option<MaskState>,
    pub transition: Option<TransitionLayer>,
    pub skip: Conv2d,
}

impl ResBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        spec: &BlockSpec,
        cfg: &GeneratorConfig,
    ) -> Result<Self> {
        let (c1, c2) = (spec.conv1_channels(), spec.conv2_channels());
        let k = cfg.num_classes;
        let cbn1 = CondBatchNorm::new(store, &format!("{name}.cbn1"), spec.in_ch, k)?;
        let conv1 = Conv2d::new(store, init, &format!("{name}.conv1"), spec.in_ch, c1, 3)?;
        let cbn2 = CondBatchNorm::new(store, &format!("{name}.cbn2"), c1, k)?;
        let conv2 = Conv2d::new(store, init, &format!("{name}.conv2"), c1, c2, 3)?;
        let (mask1, mask2) = if cfg.kind == GeneratorKind::Student {
            (
                Some(MaskState::new(store, &format!("{name}.mask1"), c1, &cfg.mask)?),
                Some(MaskState::new(store, &format!("{name}.mask2"), c2, &cfg.mask)?),
            )
        } else {
            (None, None)
        };
        let transition = match cfg.kind {
            GeneratorKind::Teacher => {
                if c2 != spec.out_ch {
                    return Err(Error::Config(format!(
                        "{name}: teacher conv2 must output {} channels",
                        spec.out_ch
                    )));
                }
                None
            }
            _ => Some(TransitionLayer::new(
                store,
                init,
                &format!("{name}.transition"),
                c2,
                spec.out_ch,
            )?),
        };
        let skip = Conv2d::new(store, init, &format!("{name}.skip"), spec.in_ch, spec.out_ch, 1)?;
        Ok(Self {
            spec: spec.clone(),
            cbn1,
            conv1,
            cbn2,
            conv2,
            mask1,
            mask2,
            transition,
            skip,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var, cls: &ClassInput<T>) -> Result<Var> {
        let c = cx.tape.value(x).dims4("res_block")?.1;
        if c != self.spec.in_ch {
            return Err(Error::shape(
                "res_block",
                format!("input channels: expected {}, got {c}", self.spec.in_ch),
            ));
        }
        let mut h = self.cbn1.forward(cx, x, cls)?;
        h = cx.tape.relu(h)?;
        if self.spec.upsample {
            h = cx.tape.upsample2x(h)?;
        }
        h = self.conv1.forward(cx, h)?;
        h = self.cbn2.forward(cx, h, cls)?;
        if let Some(m) = &self.mask1 {
            h = m.forward(cx, h)?;
        }
        h = cx.tape.relu(h)?;
        h = self.conv2.forward(cx, h)?;
        if let Some(m) = &self.mask2 {
            h = m.forward(cx, h)?;
        }
        if let Some(t) = &self.transition {
            h = t.forward(cx, h)?;
        }
        let mut s = x;
        if self.spec.upsample {
            s = cx.tape.upsample2x(s)?;
        }
        s = self.skip.forward(cx, s)?;
        cx.tape.add(h, s)
    }

    pub fn masks(&self) -> impl Iterator<Item = &MaskState> {
        self.mask1.iter().chain(self.mask2.iter())
    }

    pub fn masks_mut(&mut self) -> impl Iterator<Item = &mut MaskState> {
        self.mask1.iter_mut().chain(self.mask2.iter_mut())
    }
}

/// Forward result: the image and each block's output feature map.
#[derive(Clone, Debug)]
pub struct GenOutput {
    pub image: Var,
    pub taps: Vec<Var>,
}

/// Linear stem, residual blocks with optional self-attention, then
/// BN → ReLU → 3×3 conv → tanh.
#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub stem: Linear,
    pub blocks: Vec<ResBlock>,
    pub attention: Option<SelfAttention>,
    pub out_bn: BatchNorm,
    pub out_conv: Conv2d,
}

impl Generator {
    /// Registers every parameter in `store`, initialized from `cfg.seed`.
    pub fn build<T: Real>(cfg: &GeneratorConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(cfg.seed);
        let s0 = cfg.stem_size();
        let stem = Linear::new(store, &mut init, "g.stem", cfg.z_dim, cfg.stem_channels() * s0 * s0)?;
        let blocks = cfg
            .blocks
            .iter()
            .enumerate()
            .map(|(k, spec)| ResBlock::new(store, &mut init, &format!("g.block{k}"), spec, cfg))
            .collect::<Result<Vec<_>>>()?;
        let attention = match cfg.attention_after {
            Some(a) => Some(SelfAttention::new(store, &mut init, "g.attn", cfg.blocks[a].out_ch)?),
            None => None,
        };
        let out_bn = BatchNorm::new(store, "g.out_bn", cfg.final_channels())?;
        let out_conv = Conv2d::new(store, &mut init, "g.out_conv", cfg.final_channels(), 3, 3)?;
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            blocks,
            attention,
            out_bn,
            out_conv,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, z: Var, cls: &ClassInput<T>) -> Result<GenOutput> {
        cls.validate(self.cfg.num_classes)?;
        let zs = cx.tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.cfg.z_dim {
            return Err(Error::shape(
                "generator",
                format!("z must be (batch, {}), got {zs:?}", self.cfg.z_dim),
            ));
        }
        if zs[0] != cls.batch_size() {
            return Err(Error::shape(
                "generator",
                format!("{} noise vectors but {} class conditions", zs[0], cls.batch_size()),
            ));
        }
        let s0 = self.cfg.stem_size();
        let mut h = self.stem.forward(cx, z)?;
        h = cx.tape.reshape(h, &[zs[0], self.cfg.stem_channels(), s0, s0])?;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for (k, block) in self.blocks.iter().enumerate() {
            h = block.forward(cx, h, cls)?;
            taps.push(h);
            if self.cfg.attention_after == Some(k) {
                if let Some(attn) = &self.attention {
                    h = attn.forward(cx, h)?;
                }
            }
        }
        h = self.out_bn.forward(cx, h)?;
        h = cx.tape.relu(h)?;
        h = self.out_conv.forward(cx, h)?;
        let image = cx.tape.tanh(h)?;
        Ok(GenOutput { image, taps })
    }

    /// Eval-mode images without gradient tracking.
    pub fn generate<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        z: &Tensor<T>,
        cls: &ClassInput<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = tape.bind_params(store, false);
        let mut cx = Ctx::new(&mut tape, store, &vars, Mode::Eval);
        let zv = cx.tape.constant(z.clone());
        let out = self.forward(&mut cx, zv, cls)?;
        Ok(tape.value(out.image).clone())
    }

    pub fn masks(&self) -> impl Iterator<Item = &MaskState> {
        self.blocks.iter().flat_map(ResBlock::masks)
    }

    pub fn masks_mut(&mut self) -> impl Iterator<Item = &mut MaskState> {
        self.blocks.iter_mut().flat_map(ResBlock::masks_mut)
    }

    pub fn all_masks_frozen(&self) -> bool {
        self.masks().all(MaskState::is_frozen)
    }

    /// Runs the binarization check on every mask; returns how many froze.
    pub fn binarize_check<T: Real>(&mut self, store: &mut ParamStore<T>) -> usize {
        self.masks_mut()
            .filter_map(|m| m.binarize_check(store).then_some(()))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::MaskConfig;

    fn tiny(kind: GeneratorKind) -> GeneratorConfig {
        let mut cfg = GeneratorConfig::toy(8, 3, 16, 16);
        cfg.kind = kind;
        cfg
    }

    fn run(gen: &Generator, store: &mut ParamStore<f64>, b: usize, mode: Mode) -> (Tensor<f64>, Vec<Vec<usize>>) {
        let z = Init::new(5).normal(&[b, gen.cfg.z_dim], 1.0);
        let cls = ClassInput::Labels((0..b).map(|i| i % gen.cfg.num_classes).collect());
        let mut tape = Tape::new();
        let vars = tape.bind_params(store, false);
        let mut cx = Ctx::new(&mut tape, store, &vars, mode);
        let zv = cx.tape.constant(z);
        let out = gen.forward(&mut cx, zv, &cls).unwrap();
        let shapes = out.taps.iter().map(|&t| tape.shape(t).to_vec()).collect();
        (tape.value(out.image).clone(), shapes)
    }

    #[test]
    fn student_shapes_and_range() {
        let mut store = ParamStore::new();
        let gen = Generator::build(&tiny(GeneratorKind::Student), &mut store).unwrap();
        let (img, taps) = run(&gen, &mut store, 2, Mode::Train);
        assert_eq!(img.shape(), &[2, 3, 16, 16]);
        assert!(img.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(taps.len(), 5);
        assert_eq!(taps[0], vec![2, 16, 4, 4]);
        assert_eq!(taps[4], vec![2, 8, 16, 16]);
        assert_eq!(gen.masks().count(), 10);
    }

    #[test]
    fn teacher_taps_match_student_spatially() {
        let cfg = tiny(GeneratorKind::Student);
        let mut ss = ParamStore::new();
        let student = Generator::build(&cfg, &mut ss).unwrap();
        let mut ts = ParamStore::new();
        let teacher = Generator::build(&cfg.teacher(2), &mut ts).unwrap();
        assert_eq!(teacher.masks().count(), 0);
        let (_, st) = run(&student, &mut ss, 2, Mode::Eval);
        let (_, tt) = run(&teacher, &mut ts, 2, Mode::Eval);
        for (s, t) in st.iter().zip(&tt) {
            assert_eq!(s[2..], t[2..]);
            assert!(t[1] > s[1]);
        }
    }

    #[test]
    fn same_seed_same_parameters_and_eval_determinism() {
        let cfg = tiny(GeneratorKind::Student);
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        Generator::build(&cfg, &mut a).unwrap();
        Generator::build(&cfg, &mut b).unwrap();
        assert!(a.bit_identical(&b));

        let mut store = ParamStore::new();
        let gen = Generator::build(&cfg, &mut store).unwrap();
        let (x, _) = run(&gen, &mut store, 2, Mode::Eval);
        let (y, _) = run(&gen, &mut store, 2, Mode::Eval);
        assert_eq!(x, y);
    }

    #[test]
    fn invalid_class_rejected() {
        let mut store = ParamStore::<f64>::new();
        let gen = Generator::build(&tiny(GeneratorKind::Student), &mut store).unwrap();
        let z = Tensor::zeros([1, 8]);
        let err = gen.generate(&mut store, &z, &ClassInput::Labels(vec![3])).unwrap_err();
        assert!(matches!(
            err,
            Error::ClassOutOfRange {
                index: 3,
                num_classes: 3
            }
        ));
    }

    /// A block whose second mask is all zeros reduces to
    /// `transition bias + skip(x)`.
    #[test]
    fn dead_mask2_leaves_bias_plus_skip() {
        let cfg = tiny(GeneratorKind::Student);
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(3);
        let spec = BlockSpec::new(8, 8, false);
        let mut block = ResBlock::new(&mut store, &mut init, "b", &spec, &cfg).unwrap();
        let t = block.transition.as_ref().unwrap().conv.clone();
        store.set(t.bias, Tensor::from_fn([8], |i| i as f64 * 0.1));
        let m2 = block.mask2.as_mut().unwrap();
        store.set(m2.w, Tensor::full([8], -1.0));
        assert!(m2.binarize_check(&mut store));

        let x = init.normal(&[2, 8, 4, 4], 1.0);
        let cls = ClassInput::Labels(vec![0, 2]);
        let mut tape = Tape::new();
        let vars = tape.bind_params(&store, false);
        let mut cx = Ctx::new(&mut tape, &mut store, &vars, Mode::Train);
        let xv = cx.tape.constant(x);
        let y = block.forward(&mut cx, xv, &cls).unwrap();
        let s = block.skip.forward(&mut cx, xv).unwrap();
        let (y, s) = (tape.value(y), tape.value(s));
        for (k, (a, b)) in y.data().iter().zip(s.data()).enumerate() {
            let ch = (k / 16) % 8;
            assert!((a - b - ch as f64 * 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn open_masks_with_identity_transitions_match_unmasked() {
        let student_cfg = GeneratorConfig {
            mask: MaskConfig {
                alpha: 0.5,
                ..MaskConfig::default()
            },
            ..tiny(GeneratorKind::Student)
        };
        let mut store = ParamStore::<f64>::new();
        let mut gen = Generator::build(&student_cfg, &mut store).unwrap();
        for m in gen.masks_mut() {
            m.m_star = Some(vec![true; m.n]);
        }
        let plain_cfg = GeneratorConfig {
            kind: GeneratorKind::Pruned,
            ..student_cfg.clone()
        };
        let mut plain_store = ParamStore::<f64>::new();
        let plain = Generator::build(&plain_cfg, &mut plain_store).unwrap();
        for (id, p) in plain_store.clone().iter() {
            let src = store.id(&p.name).unwrap();
            plain_store.set(id, store.value(src).clone());
        }
        let (a, _) = run(&gen, &mut store, 3, Mode::Eval);
        let (b, _) = run(&plain, &mut plain_store, 3, Mode::Eval);
        assert_eq!(a, b);
    }
}
