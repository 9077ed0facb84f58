//! Forward and backward kernels for the differentiable operator set.
//!
//! Feature maps use (batch, channel, height, width) layout. Every forward
//! kernel here is also run under [`Counted`](crate::Counted), so the exact
//! sequence of arithmetic operations matters: the closed forms in
//! [`crate::cost`] mirror it one for one.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn conv1x1<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, cin, h, w) = x.dims4()?;
    let (cout, wcin) = matrix_dims(weight)?;
    if wcin != cin {
        return Err(Error::dim("input channels", wcin, cin));
    }
    if bias.len() != cout {
        return Err(Error::dim("bias length", cout, bias.len()));
    }
    let hw = h * w;
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); b * cout * hw];
    for bi in 0..b {
        for o in 0..cout {
            let row = &mut out[(bi * cout + o) * hw..(bi * cout + o + 1) * hw];
            row.fill(bias.data()[o]);
            for i in 0..cin {
                let wv = wd[o * cin + i];
                let src = &xd[(bi * cin + i) * hw..(bi * cin + i + 1) * hw];
                for (acc, &xv) in row.iter_mut().zip(src) {
                    *acc += wv * xv;
                }
            }
        }
    }
    Tensor::new(vec![b, cout, h, w], out)
}

/// Gradients of [`conv1x1`] with respect to (x, weight, bias).
pub fn conv1x1_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, cin, h, w) = x.dims4()?;
    let (cout, _) = matrix_dims(weight)?;
    let hw = h * w;
    let (xd, wd, gd) = (x.data(), weight.data(), dy.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); cout];
    for bi in 0..b {
        for o in 0..cout {
            let g = &gd[(bi * cout + o) * hw..(bi * cout + o + 1) * hw];
            db[o] += g.iter().fold(T::zero(), |a, &v| a + v);
            for i in 0..cin {
                let xs = &xd[(bi * cin + i) * hw..(bi * cin + i + 1) * hw];
                let mut acc = T::zero();
                for (&gv, &xv) in g.iter().zip(xs) {
                    acc += gv * xv;
                }
                dw[o * cin + i] += acc;
                let wv = wd[o * cin + i];
                let dxs = &mut dx[(bi * cin + i) * hw..(bi * cin + i + 1) * hw];
                for (d, &gv) in dxs.iter_mut().zip(g) {
                    *d += wv * gv;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(vec![cout], db)?,
    ))
}

fn matrix_dims<T: Scalar>(m: &Tensor<T>) -> Result<(usize, usize)> {
    match m.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim("weight rank", 2, s.len())),
    }
}

fn kernel_dims<T: Scalar>(kernels: &Tensor<T>, channels: usize) -> Result<usize> {
    let (c, kh, kw) = match kernels.shape() {
        [c, kh, kw] => (*c, *kh, *kw),
        s => return Err(Error::dim("kernel rank", 3, s.len())),
    };
    if c != channels {
        return Err(Error::dim("kernel channels", channels, c));
    }
    if kh != kw {
        return Err(Error::dim("kernel width", kh, kw));
    }
    if kh % 2 == 0 {
        return Err(Error::config(format!(
            "depthwise kernel size must be odd, got {kh}"
        )));
    }
    Ok(kh)
}

/// Range of output indices `o` for which `o + off` lands inside `[0, len)`.
#[inline]
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Per-channel "same" convolution with zero padding. Kernels are (C, k, k), k odd.
pub fn depthwise_conv<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let k = kernel_dims(kernels, c)?;
    let r = (k / 2) as isize;
    let hw = h * w;
    let (xd, kd) = (x.data(), kernels.data());
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let src = &xd[base..base + hw];
            let dst = &mut out[base..base + hw];
            for ky in 0..k {
                let oy = ky as isize - r;
                let (y0, y1) = valid_range(h, oy);
                for kx in 0..k {
                    let ox = kx as isize - r;
                    let (x0, x1) = valid_range(w, ox);
                    let wv = kd[(ci * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        let drow = &mut dst[y * w + x0..y * w + x1];
                        let srow = &src[sy * w + (x0 as isize + ox) as usize..];
                        for (d, &s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Gradients of [`depthwise_conv`] with respect to (x, kernels).
pub fn depthwise_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = x.dims4()?;
    let k = kernel_dims(kernels, c)?;
    let r = (k / 2) as isize;
    let hw = h * w;
    let (xd, kd, gd) = (x.data(), kernels.data(), dy.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernels.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            for ky in 0..k {
                let oy = ky as isize - r;
                let (y0, y1) = valid_range(h, oy);
                for kx in 0..k {
                    let ox = kx as isize - r;
                    let (x0, x1) = valid_range(w, ox);
                    let kidx = (ci * k + ky) * k + kx;
                    let wv = kd[kidx];
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        for xx in x0..x1 {
                            let sx = (xx as isize + ox) as usize;
                            let g = gd[base + y * w + xx];
                            acc += g * xd[base + sy * w + sx];
                            dx[base + sy * w + sx] += wv * g;
                        }
                    }
                    dk[kidx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(kernels.shape().to_vec(), dk)?,
    ))
}

fn check_factor(factor: usize) -> Result<()> {
    if factor < 1 {
        return Err(Error::config("resampling factor must be at least 1"));
    }
    Ok(())
}

/// Non-overlapping `factor`×`factor` mean pooling. H and W must be divisible by `factor`.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_factor(factor)?;
    let (b, c, h, w) = x.dims4()?;
    if factor == 1 {
        return Ok(x.clone());
    }
    if h % factor != 0 {
        return Err(Error::dim(format!("height (divisible by {factor})"), h.div_ceil(factor) * factor, h));
    }
    if w % factor != 0 {
        return Err(Error::dim(format!("width (divisible by {factor})"), w.div_ceil(factor) * factor, w));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = T::of(1.0 / (factor * factor) as f64);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..factor {
                    let row = &src[(oy * factor + dy) * w + ox * factor..];
                    for &v in &row[..factor] {
                        acc += v;
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn avg_pool_backward<T: Scalar>(dy: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (b, c, oh, ow) = dy.dims4()?;
    if factor == 1 {
        return Ok(dy.clone());
    }
    let (h, w) = (oh * factor, ow * factor);
    let inv = T::of(1.0 / (factor * factor) as f64);
    let gd = dy.data();
    let mut dx = vec![T::zero(); b * c * h * w];
    for plane in 0..b * c {
        for y in 0..h {
            for x in 0..w {
                dx[plane * h * w + y * w + x] =
                    gd[plane * oh * ow + (y / factor) * ow + x / factor] * inv;
            }
        }
    }
    Tensor::new(vec![b, c, h, w], dx)
}

/// Spatial mean per channel, shape (B, C, 1, 1).
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = T::of(1.0 / hw as f64);
    let out = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::new(vec![b, c, 1, 1], out)
}

pub fn global_avg_pool_backward<T: Scalar>(
    dy: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (b, c, _, _) = dy.dims4()?;
    let inv = T::of(1.0 / (h * w) as f64);
    let mut dx = Vec::with_capacity(b * c * h * w);
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::new(vec![b, c, h, w], dx)
}

/// Source taps for align-corners-false bilinear resampling along one axis.
///
/// Output index `o` samples source coordinate `(o + 0.5) / f - 0.5`, clamped
/// at zero; the upper neighbour is clamped to the last index.
pub(crate) fn bilinear_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = if i0 + 1 < len { i0 + 1 } else { i0 };
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor, align-corners-false convention.
pub fn bilinear_upsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_factor(factor)?;
    let (b, c, h, w) = x.dims4()?;
    if factor == 1 {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, wy0, wy1) in &ty {
            for &(x0, x1, wx0, wx1) in &tx {
                let (w00, w01, w10, w11) = (
                    T::of(wy0 * wx0),
                    T::of(wy0 * wx1),
                    T::of(wy1 * wx0),
                    T::of(wy1 * wx1),
                );
                out.push(
                    w00 * src[y0 * w + x0]
                        + w01 * src[y0 * w + x1]
                        + w10 * src[y1 * w + x0]
                        + w11 * src[y1 * w + x1],
                );
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn bilinear_upsample_backward<T: Scalar>(
    dy: &Tensor<T>,
    factor: usize,
) -> Result<Tensor<T>> {
    let (b, c, oh, ow) = dy.dims4()?;
    if factor == 1 {
        return Ok(dy.clone());
    }
    let (h, w) = (oh / factor, ow / factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let gd = dy.data();
    let mut dx = vec![T::zero(); b * c * h * w];
    for plane in 0..b * c {
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        let g = &gd[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let gv = g[oy * ow + ox];
                dst[y0 * w + x0] += T::of(wy0 * wx0) * gv;
                dst[y0 * w + x1] += T::of(wy0 * wx1) * gv;
                dst[y1 * w + x0] += T::of(wy1 * wx0) * gv;
                dst[y1 * w + x1] += T::of(wy1 * wx1) * gv;
            }
        }
    }
    Tensor::new(vec![b, c, h, w], dx)
}

fn check_channel_vec<T: Scalar>(v: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if v.len() != c {
        return Err(Error::dim(what, c, v.len()));
    }
    Ok(())
}

/// Layer normalization over the channel axis at every (batch, y, x) position.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if eps <= 0.0 {
        return Err(Error::config("layer-norm eps must be positive"));
    }
    let (b, c, h, w) = x.dims4()?;
    check_channel_vec(gain, c, "layer-norm gain length")?;
    check_channel_vec(bias, c, "layer-norm bias length")?;
    let hw = h * w;
    let inv_c = T::of(1.0 / c as f64);
    let eps_t = T::of(eps);
    let (xd, gd, bd) = (x.data(), gain.data(), bias.data());
    let mut out = vec![T::zero(); x.len()];
    let mut centered = vec![T::zero(); c];
    for bi in 0..b {
        for p in 0..hw {
            let at = |ci: usize| (bi * c + ci) * hw + p;
            let mut sum = T::zero();
            for ci in 0..c {
                sum += xd[at(ci)];
            }
            let mean = sum * inv_c;
            let mut sq = T::zero();
            for ci in 0..c {
                let d = xd[at(ci)] - mean;
                centered[ci] = d;
                sq += d * d;
            }
            let var = sq * inv_c;
            let rstd = T::one() / (var + eps_t).sqrt();
            for ci in 0..c {
                out[at(ci)] = gd[ci] * (centered[ci] * rstd) + bd[ci];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Gradients of [`layer_norm`] with respect to (x, gain, bias).
pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: f64,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv_c = T::of(1.0 / c as f64);
    let eps_t = T::of(eps);
    let (xd, gn, g) = (x.data(), gain.data(), dy.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dgain = vec![T::zero(); c];
    let mut dbias = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for bi in 0..b {
        for p in 0..hw {
            let at = |ci: usize| (bi * c + ci) * hw + p;
            let mean = (0..c).fold(T::zero(), |a, ci| a + xd[at(ci)]) * inv_c;
            let var = (0..c).fold(T::zero(), |a, ci| {
                let d = xd[at(ci)] - mean;
                a + d * d
            }) * inv_c;
            let rstd = T::one() / (var + eps_t).sqrt();
            let mut mean_dxhat = T::zero();
            let mut mean_dxhat_xhat = T::zero();
            for ci in 0..c {
                xhat[ci] = (xd[at(ci)] - mean) * rstd;
                dxhat[ci] = g[at(ci)] * gn[ci];
                dgain[ci] += g[at(ci)] * xhat[ci];
                dbias[ci] += g[at(ci)];
                mean_dxhat += dxhat[ci];
                mean_dxhat_xhat += dxhat[ci] * xhat[ci];
            }
            mean_dxhat *= inv_c;
            mean_dxhat_xhat *= inv_c;
            for ci in 0..c {
                dx[at(ci)] = rstd * (dxhat[ci] - mean_dxhat - xhat[ci] * mean_dxhat_xhat);
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgain)?,
        Tensor::new(vec![c], dbias)?,
    ))
}

/// (outer, len, inner) split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::usage(format!(
            "softmax axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max-stabilized softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    let mut row = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            for (j, r) in row.iter_mut().enumerate() {
                *r = xd[at(j)];
            }
            softmax_in_place(&mut row);
            for (j, &r) in row.iter().enumerate() {
                out[at(j)] = r;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Softmax of a contiguous row: one subtraction, exponential, addition and
/// division per element. The max search is comparisons only.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let (yd, gd) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot = (0..len).fold(T::zero(), |a, j| a + gd[at(j)] * yd[at(j)]);
            for j in 0..len {
                dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx)
}

fn gate_scale(c: usize, scaled: bool) -> f64 {
    if scaled {
        1.0 / (c as f64).sqrt()
    } else {
        1.0
    }
}

/// Simple gate: product of the two channel halves, divided by √C when `scaled`.
pub fn simple_gate<T: Scalar>(x: &Tensor<T>, scaled: bool) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if c % 2 != 0 {
        return Err(Error::config(format!(
            "gate needs an even channel count, got {c}"
        )));
    }
    let half = c / 2;
    let hw = h * w;
    let s = T::of(gate_scale(c, scaled));
    let xd = x.data();
    let mut out = Vec::with_capacity(b * half * hw);
    for bi in 0..b {
        for ci in 0..half {
            let a = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            let g = &xd[(bi * c + ci + half) * hw..(bi * c + ci + half + 1) * hw];
            if scaled {
                out.extend(a.iter().zip(g).map(|(&u, &v)| u * v * s));
            } else {
                out.extend(a.iter().zip(g).map(|(&u, &v)| u * v));
            }
        }
    }
    Tensor::new(vec![b, half, h, w], out)
}

pub fn simple_gate_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    scaled: bool,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let half = c / 2;
    let hw = h * w;
    let s = T::of(gate_scale(c, scaled));
    let (xd, gd) = (x.data(), dy.data());
    let mut dx = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..half {
            for p in 0..hw {
                let ia = (bi * c + ci) * hw + p;
                let ig = (bi * c + ci + half) * hw + p;
                let g = gd[(bi * half + ci) * hw + p] * s;
                dx[ia] = g * xd[ig];
                dx[ig] = g * xd[ia];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

/// Broadcast (B, C, 1, 1) to (B, C, h, w).
pub fn broadcast_spatial<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (b, c, xh, xw) = x.dims4()?;
    if xh != 1 || xw != 1 {
        return Err(Error::dim("broadcast source height", 1, xh));
    }
    let mut out = Vec::with_capacity(b * c * h * w);
    for &v in x.data() {
        out.extend(std::iter::repeat_n(v, h * w));
    }
    Tensor::new(vec![b, c, h, w], out)
}

pub fn broadcast_spatial_backward<T: Scalar>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = dy.dims4()?;
    let out = dy
        .data()
        .chunks(h * w)
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v))
        .collect();
    Tensor::new(vec![b, c, 1, 1], out)
}
