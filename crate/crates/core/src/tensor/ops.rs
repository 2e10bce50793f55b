use super::Tensor;
use crate::{Error, Result, Scalar};

/// Numerically stabilized softmax along `axis`.
///
/// A slice made entirely of `-inf` (a fully masked row) comes out uniform
/// and is reported through `log::warn!`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::shape(format!("softmax axis {axis} out of range for {:?}", x.shape())));
    }
    let len = x.dim(axis);
    if len == 0 {
        return Err(Error::invalid("softmax over an empty axis"));
    }
    if x.data().iter().any(|v| v.is_nan() || *v == T::infinity()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut masked_rows = 0usize;
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| data[at(j)]).fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                masked_rows += 1;
                let u = T::one() / T::of(len as f64);
                (0..len).for_each(|j| data[at(j)] = u);
                continue;
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (data[at(j)] - max).exp();
                data[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                data[at(j)] /= total;
            }
        }
    }
    if masked_rows > 0 {
        log::warn!("softmax: {masked_rows} fully masked slice(s) set to uniform");
    }
    Ok(out)
}

pub(crate) struct LayerNormOut<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_stats<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<LayerNormOut<T>> {
    if eps <= 0.0 || eps.is_nan() {
        return Err(Error::invalid(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let d = *x.shape().last().ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(format!(
            "layer_norm gamma {:?} / beta {:?} vs last axis {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let mut y = x.clone();
    let mut xhat = x.clone();
    let rows = x.numel() / d.max(1);
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = T::one() / T::of(d as f64);
    for (yr, hr) in y.data_mut().chunks_mut(d).zip(xhat.data_mut().chunks_mut(d)) {
        let mean = hr.iter().copied().sum::<T>() * inv_d;
        let var = hr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + T::of(eps)).sqrt();
        rstd.push(r);
        for ((yv, hv), (&g, &b)) in yr.iter_mut().zip(hr.iter_mut()).zip(gamma.data().iter().zip(beta.data())) {
            *hv = (*hv - mean) * r;
            *yv = *hv * g + b;
        }
    }
    Ok(LayerNormOut { y, xhat, rstd })
}

/// Normalizes the last axis to zero mean and unit variance, then applies
/// `gamma` and `beta`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    layer_norm_stats(x, gamma, beta, eps).map(|o| o.y)
}

/// Valid (unpadded) strided cross-correlation of a single-channel input.
///
/// `input: (B, 1, H, W)`, `filter: (C, 1, kh, kw)`, output `(B, C, H', W')`.
/// The stride has to tile the input exactly.
pub fn conv2d_strided<T: Scalar>(input: &Tensor<T>, filter: &Tensor<T>, stride: (usize, usize)) -> Result<Tensor<T>> {
    let [b, cin, h, w] = input.shape() else {
        return Err(Error::shape(format!("conv2d input must be (B,1,H,W), got {:?}", input.shape())));
    };
    let [cout, fcin, kh, kw] = filter.shape() else {
        return Err(Error::shape(format!("conv2d filter must be (C,1,kh,kw), got {:?}", filter.shape())));
    };
    let (b, h, w, cout, kh, kw) = (*b, *h, *w, *cout, *kh, *kw);
    let (sh, sw) = stride;
    if *cin != 1 || *fcin != 1 {
        return Err(Error::shape("conv2d_strided supports one input channel"));
    }
    if sh == 0 || sw == 0 {
        return Err(Error::invalid("conv2d stride must be positive"));
    }
    if kh > h || kw > w {
        return Err(Error::shape(format!("filter {kh}x{kw} larger than input {h}x{w}")));
    }
    if (h - kh) % sh != 0 || (w - kw) % sw != 0 {
        return Err(Error::invalid(format!(
            "stride ({sh},{sw}) does not tile a {h}x{w} input with a {kh}x{kw} filter"
        )));
    }
    let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
    let x = input.data();
    let f = filter.data();
    let mut out = vec![T::zero(); b * cout * oh * ow];
    for bi in 0..b {
        let plane = &x[bi * h * w..(bi + 1) * h * w];
        for c in 0..cout {
            let fk = &f[c * kh * kw..(c + 1) * kh * kw];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..kh {
                        let row = &plane[(oy * sh + ky) * w + ox * sw..];
                        for kx in 0..kw {
                            acc += row[kx] * fk[ky * kw + kx];
                        }
                    }
                    out[((bi * cout + c) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new([b, cout, oh, ow], out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}
