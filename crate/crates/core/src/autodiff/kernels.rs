//! Forward and backward numeric kernels. Everything here operates on plain
//! tensors; the tape decides when to call them.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Broadcast {
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` laid out inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let n: usize = out.iter().product();
    let mut data = vec![T::zero(); n];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(out, data)
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub(crate) fn sum_to_shape<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let st = broadcast_strides(shape, g.shape());
    let zeros = vec![0; g.rank()];
    let mut out = vec![T::zero(); shape.iter().product()];
    let gd = g.data();
    for_each_broadcast(g.shape(), &st, &zeros, |o, it, _| out[it] += gd[o]);
    Tensor::new(shape, out).expect("reduced shape")
}

/// Repeats `g` (of a reduced shape) back up to `shape`.
pub(crate) fn expand_to<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let sg = broadcast_strides(g.shape(), shape);
    let zeros = vec![0; shape.len()];
    let mut out = vec![T::zero(); shape.iter().product()];
    let gd = g.data();
    for_each_broadcast(shape, &sg, &zeros, |o, ig, _| out[o] = gd[ig]);
    Tensor::new(shape, out).expect("expanded shape")
}

pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(xd[at(j)]));
            let mut total = T::zero();
            for j in 0..len {
                let e = (xd[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out).expect("softmax shape")
}

pub(crate) fn softmax_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                out[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape(), out).expect("softmax grad shape")
}

/// Grouping used by standardization of a `(B, C, H, W)` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StandardizeOver {
    /// One group per channel, spanning batch and spatial axes.
    BatchAndSpace,
    /// One group per (sample, channel), spanning spatial axes only.
    Space,
}

pub(crate) struct Standardized<T> {
    pub out: Tensor<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

fn group_of(over: StandardizeOver, c: usize, bi: usize, ci: usize) -> usize {
    match over {
        StandardizeOver::BatchAndSpace => ci,
        StandardizeOver::Space => bi * c + ci,
    }
}

pub(crate) fn standardize<T: Real>(x: &Tensor<T>, over: StandardizeOver, eps: T) -> Result<Standardized<T>> {
    let (b, c, h, w) = x.dims4("standardize")?;
    let hw = h * w;
    let groups = match over {
        StandardizeOver::BatchAndSpace => c,
        StandardizeOver::Space => b * c,
    };
    let count = T::from_usize(x.numel() / groups.max(1)).unwrap();
    let xd = x.data();
    let mut mean = vec![T::zero(); groups];
    let mut var = vec![T::zero(); groups];
    for bi in 0..b {
        for ci in 0..c {
            let g = group_of(over, c, bi, ci);
            let base = (bi * c + ci) * hw;
            mean[g] += xd[base..base + hw].iter().copied().sum();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for bi in 0..b {
        for ci in 0..c {
            let g = group_of(over, c, bi, ci);
            let base = (bi * c + ci) * hw;
            let mu = mean[g];
            var[g] += xd[base..base + hw].iter().map(|&v| (v - mu) * (v - mu)).sum();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            let g = group_of(over, c, bi, ci);
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                out[i] = (xd[i] - mean[g]) * inv_std[g];
            }
        }
    }
    Ok(Standardized {
        out: Tensor::new(x.shape(), out)?,
        mean,
        var,
        inv_std,
    })
}

/// `dx = inv_std · (dy − mean(dy) − x̂ · mean(dy · x̂))` per group.
pub(crate) fn standardize_backward<T: Real>(
    xhat: &Tensor<T>,
    g: &Tensor<T>,
    over: StandardizeOver,
    inv_std: &[T],
) -> Tensor<T> {
    let (b, c, h, w) = xhat.dims4("standardize").expect("rank 4");
    let hw = h * w;
    let groups = inv_std.len();
    let count = T::from_usize(xhat.numel() / groups.max(1)).unwrap();
    let (xd, gd) = (xhat.data(), g.data());
    let mut sum_g = vec![T::zero(); groups];
    let mut sum_gx = vec![T::zero(); groups];
    for bi in 0..b {
        for ci in 0..c {
            let k = group_of(over, c, bi, ci);
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                sum_g[k] += gd[i];
                sum_gx[k] += gd[i] * xd[i];
            }
        }
    }
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            let k = group_of(over, c, bi, ci);
            let base = (bi * c + ci) * hw;
            let (mg, mgx) = (sum_g[k] / count, sum_gx[k] / count);
            for i in base..base + hw {
                out[i] = inv_std[k] * (gd[i] - mg - xd[i] * mgx);
            }
        }
    }
    Tensor::new(xhat.shape(), out).expect("standardize grad shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeometry {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} stride {stride} padding {pad} does not fit input {h}x{w}"),
            ));
        }
        Ok(Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            hout: (h + 2 * pad - k) / stride + 1,
            wout: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn cols(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.hout * self.wout
    }
}

fn im2col<T: Real>(x: &[T], geo: &ConvGeometry, cols: &mut [T]) {
    let ConvGeometry {
        h,
        w,
        k,
        stride,
        pad,
        hout,
        wout,
        ..
    } = *geo;
    let p = hout * wout;
    for ci in 0..geo.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wout..(oy + 1) * wout];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], geo: &ConvGeometry, x: &mut [T]) {
    let ConvGeometry {
        h,
        w,
        k,
        stride,
        pad,
        hout,
        wout,
        ..
    } = *geo;
    let p = hout * wout;
    for ci in 0..geo.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wout {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wout + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: &ConvGeometry,
) -> Tensor<T> {
    let b = x.shape()[0];
    let cout = weight.shape()[0];
    let (p, kk) = (geo.positions(), geo.cols());
    let in_len = geo.cin * geo.h * geo.w;
    let mut out = vec![T::zero(); b * cout * p];
    let mut cols = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * p]
    };
    for bi in 0..b {
        let xs = &x.data()[bi * in_len..(bi + 1) * in_len];
        let dst = &mut out[bi * cout * p..(bi + 1) * cout * p];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(p.max(1)).enumerate().take(cout) {
                chunk.iter_mut().for_each(|v| *v = bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if geo.is_pointwise() {
            xs
        } else {
            im2col(xs, geo, &mut cols);
            &cols
        };
        gemm(cout, kk, p, weight.data(), false, src, false, beta, dst);
    }
    Tensor::new(vec![b, cout, geo.hout, geo.wout], out).expect("conv output shape")
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
    geo: &ConvGeometry,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let b = x.shape()[0];
    let cout = weight.shape()[0];
    let (p, kk) = (geo.positions(), geo.cols());
    let in_len = geo.cin * geo.h * geo.w;
    let (need_x, need_w, need_b) = need;
    let mut gx = if need_x { vec![T::zero(); x.numel()] } else { Vec::new() };
    let mut gw = if need_w {
        vec![T::zero(); weight.numel()]
    } else {
        Vec::new()
    };
    let mut gb = if need_b { vec![T::zero(); cout] } else { Vec::new() };
    let mut cols = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * p]
    };
    let mut dcols = if need_x && !geo.is_pointwise() {
        vec![T::zero(); kk * p]
    } else {
        Vec::new()
    };
    for bi in 0..b {
        let g = &gy.data()[bi * cout * p..(bi + 1) * cout * p];
        if need_b {
            for co in 0..cout {
                gb[co] += g[co * p..(co + 1) * p].iter().copied().sum();
            }
        }
        let xs = &x.data()[bi * in_len..(bi + 1) * in_len];
        if need_w {
            let src: &[T] = if geo.is_pointwise() {
                xs
            } else {
                im2col(xs, geo, &mut cols);
                &cols
            };
            // dW (cout×kk) += dY (cout×p) · colsᵀ (p×kk)
            gemm(cout, p, kk, g, false, src, true, T::one(), &mut gw);
        }
        if need_x {
            let gxs = &mut gx[bi * in_len..(bi + 1) * in_len];
            if geo.is_pointwise() {
                gemm(kk, cout, p, weight.data(), true, g, false, T::zero(), gxs);
            } else {
                gemm(kk, cout, p, weight.data(), true, g, false, T::zero(), &mut dcols);
                col2im(&dcols, geo, gxs);
            }
        }
    }
    ConvGrads {
        x: need_x.then(|| Tensor::new(x.shape(), gx).expect("gx shape")),
        weight: need_w.then(|| Tensor::new(weight.shape(), gw).expect("gw shape")),
        bias: need_b.then(|| Tensor::new(vec![cout], gb).expect("gb shape")),
    }
}

pub(crate) fn upsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("upsample2x")?;
    let xd = x.data();
    let mut out = vec![T::zero(); b * c * 4 * h * w];
    for plane in 0..b * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![b, c, 2 * h, 2 * w], out)
}

pub(crate) fn upsample2x_backward<T: Real>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let planes = in_shape[0] * in_shape[1];
    let gd = g.data();
    let mut out = vec![T::zero(); planes * h * w];
    for plane in 0..planes {
        let src = &gd[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    }
    Tensor::new(in_shape, out).expect("upsample grad shape")
}

pub(crate) fn avgpool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("avgpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("avgpool2", format!("odd spatial extent {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let xd = x.data();
    let mut out = vec![T::zero(); b * c * ho * wo];
    for plane in 0..b * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let s = src[2 * y * w + 2 * xx]
                    + src[2 * y * w + 2 * xx + 1]
                    + src[(2 * y + 1) * w + 2 * xx]
                    + src[(2 * y + 1) * w + 2 * xx + 1];
                out[plane * ho * wo + y * wo + xx] = s * quarter;
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

pub(crate) fn avgpool2_backward<T: Real>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let planes = in_shape[0] * in_shape[1];
    let quarter = T::lit(0.25);
    let gd = g.data();
    let mut out = vec![T::zero(); planes * h * w];
    for plane in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                out[plane * h * w + y * w + xx] = gd[plane * ho * wo + (y / 2) * wo + xx / 2] * quarter;
            }
        }
    }
    Tensor::new(in_shape, out).expect("avgpool grad shape")
}

/// Batched matrix product over the last two axes; rank 2 or 3, no batch
/// broadcasting.
pub(crate) fn matmul<T: Real>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let (batch, am, ak) = matrix_dims(a)?;
    let (bbatch, bk, bn) = matrix_dims(b)?;
    let (m, k) = if ta { (ak, am) } else { (am, ak) };
    let (k2, n) = if tb { (bn, bk) } else { (bk, bn) };
    if batch != bbatch || k != k2 || a.rank() != b.rank() {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}: inner dimension {k} vs {k2}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data()[i * am * ak..(i + 1) * am * ak],
            ta,
            &b.data()[i * bk * bn..(i + 1) * bk * bn],
            tb,
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    let shape = if a.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
    Tensor::new(shape, out)
}

fn matrix_dims<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [m, n] => Ok((1, m, n)),
        [b, m, n] => Ok((b, m, n)),
        _ => Err(Error::shape(
            "matmul",
            format!("expected rank 2 or 3, got {:?}", t.shape()),
        )),
    }
}

pub(crate) fn transpose_last2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, n) = matrix_dims(x)?;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..batch {
        for i in 0..m {
            for j in 0..n {
                out[bi * m * n + j * m + i] = xd[bi * m * n + i * n + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[1, 5], &[4, 1]).unwrap(), vec![4, 5]);
        assert!(broadcast_shape(&[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn sum_to_shape_inverts_expand() {
        let g = Tensor::<f64>::from_fn([2, 3], |i| i as f64);
        let r = sum_to_shape(&g, &[1, 3]);
        assert_eq!(r.data(), &[3.0, 5.0, 7.0]);
        let r = sum_to_shape(&g, &[3]);
        assert_eq!(r.data(), &[3.0, 5.0, 7.0]);
        let e = expand_to(&r, &[2, 3]);
        assert_eq!(e.data(), &[3.0, 5.0, 7.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn strided_conv_shape() {
        let geo = ConvGeometry::new(1, 5, 5, 3, 2, 1).unwrap();
        assert_eq!((geo.hout, geo.wout), (3, 3));
        assert!(ConvGeometry::new(1, 1, 1, 3, 1, 0).is_err());
    }
}
