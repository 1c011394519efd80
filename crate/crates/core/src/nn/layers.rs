use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::params::{Ctx, Init, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

/// Square-kernel convolution with bias. 3×3 kernels use "same" padding,
/// 1×1 kernels none.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::Config(format!("{name}: kernel must be 1 or 3, got {kernel}")));
        }
        let fan_in = in_ch * kernel * kernel;
        let fan_out = out_ch * kernel * kernel;
        let std = (2.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            init.normal(&[out_ch, in_ch, kernel, kernel], std),
            ParamKind::Trainable,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_ch]), ParamKind::Trainable)?;
        Ok(Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
        })
    }

    pub fn from_ids(weight: ParamId, bias: ParamId, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        self.forward_with_weight(cx, x, w)
    }

    /// Uses `weight` in place of the stored kernel (e.g. a normalized one).
    pub fn forward_with_weight<T: Real>(&self, cx: &mut Ctx<T>, x: Var, weight: Var) -> Result<Var> {
        let b = cx.param(self.bias);
        cx.tape.conv2d(x, weight, Some(b), 1, self.padding())
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.in_ch * self.out_ch + self.out_ch
    }
}

/// `y = x Wᵀ + b` with `W` of shape `(out, in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let std = (2.0 / (in_features + out_features).max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            init.normal(&[out_features, in_features], std),
            ParamKind::Trainable,
        )?;
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros([out_features]),
            ParamKind::Trainable,
        )?;
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        self.forward_with_weight(cx, x, w)
    }

    pub fn forward_with_weight<T: Real>(&self, cx: &mut Ctx<T>, x: Var, weight: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(Error::shape(
                "linear",
                format!("expected (batch, {}), got {shape:?}", self.in_features),
            ));
        }
        let wt = cx.tape.transpose(weight)?;
        let y = cx.tape.matmul(x, wt)?;
        let b = cx.param(self.bias);
        cx.tape.add(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }
}
