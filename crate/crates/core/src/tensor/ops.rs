//! Forward and backward kernels over flat NCHW buffers.
//!
//! The tape calls these directly; the public free functions at the bottom
//! wrap them for one-off, gradient-free evaluation on `C x H x W` or
//! `N x C x H x W` tensors.

use crate::error::{KwsError, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Resolved geometry of a 2-D convolution over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn resolve(
        batch: usize,
        in_channels: usize,
        height: usize,
        width: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(KwsError::Contract("stride must be at least 1".into()));
        }
        if height + 2 * pad < kernel_h || width + 2 * pad < kernel_w {
            return Err(KwsError::Dimension(format!(
                "kernel {kernel_h}x{kernel_w} does not fit padded input {}x{}",
                height + 2 * pad,
                width + 2 * pad
            )));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel_h) / stride + 1,
            out_w: (width + 2 * pad - kernel_w) / stride + 1,
        })
    }

    /// Geometry for a dense convolution with weight `C_out x C_in x kh x kw`.
    pub fn dense(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, c, h, w] = rank4(x_shape, "conv2d input")?;
        let [co, ci, kh, kw] = rank4(w_shape, "conv2d weight")?;
        if ci != c {
            return Err(KwsError::Dimension(format!(
                "conv2d input has {c} channels but weight expects {ci}"
            )));
        }
        Self::resolve(n, c, h, w, co, kh, kw, stride, pad)
    }

    /// Geometry for a depthwise convolution with weight `C x kh x kw`.
    pub fn depthwise(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [n, c, h, w] = rank4(x_shape, "depthwise input")?;
        if w_shape.len() != 3 {
            return Err(KwsError::Dimension(format!(
                "depthwise weight must be C x kh x kw, got {w_shape:?}"
            )));
        }
        if w_shape[0] != c {
            return Err(KwsError::Dimension(format!(
                "depthwise input has {c} channels but weight has {}",
                w_shape[0]
            )));
        }
        Self::resolve(n, c, h, w, c, w_shape[1], w_shape[2], stride, pad)
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn rank4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(KwsError::Dimension(format!(
            "{what} must be rank 4 (N x C x H x W), got {shape:?}"
        ))),
    }
}

/// Output positions `o` in `[lo, hi)` whose input tap `o * stride + k - pad`
/// falls inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let limit = in_len + pad; // tap < in_len  <=>  o*stride + k < in_len + pad
    if limit <= k {
        return (0, 0);
    }
    let hi = ((limit - k - 1) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let p_in = g.height * g.width;
    let p_out = g.out_h * g.out_w;
    let mut out = vec![T::zero(); g.batch * g.out_channels * p_out];
    if g.is_pointwise() {
        for n in 0..g.batch {
            let xs = &x[n * g.in_channels * p_in..(n + 1) * g.in_channels * p_in];
            let ys = &mut out[n * g.out_channels * p_out..(n + 1) * g.out_channels * p_out];
            T::gemm(
                g.out_channels,
                g.in_channels,
                p_in,
                T::one(),
                w,
                g.in_channels,
                1,
                xs,
                p_in,
                1,
                T::zero(),
                ys,
                p_out,
                1,
            );
        }
        return out;
    }
    let ksize = g.kernel_h * g.kernel_w;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let ys = &mut out[(n * g.out_channels + co) * p_out..][..p_out];
            for ci in 0..g.in_channels {
                let xs = &x[(n * g.in_channels + ci) * p_in..][..p_in];
                let ws = &w[(co * g.in_channels + ci) * ksize..][..ksize];
                accumulate_taps(xs, ws, ys, g);
            }
        }
    }
    out
}

/// `ys += correlate(xs, ws)` for one input/output channel pair.
#[inline]
fn accumulate_taps<T: Scalar>(xs: &[T], ws: &[T], ys: &mut [T], g: &ConvGeom) {
    for ki in 0..g.kernel_h {
        let (oh_lo, oh_hi) = valid_range(g.out_h, g.height, g.stride, g.pad, ki);
        for kj in 0..g.kernel_w {
            let wv = ws[ki * g.kernel_w + kj];
            let (ow_lo, ow_hi) = valid_range(g.out_w, g.width, g.stride, g.pad, kj);
            if ow_lo >= ow_hi {
                continue;
            }
            for oh in oh_lo..oh_hi {
                let ih = oh * g.stride + ki - g.pad;
                let xrow = &xs[ih * g.width..(ih + 1) * g.width];
                let yrow = &mut ys[oh * g.out_w..(oh + 1) * g.out_w];
                if g.stride == 1 {
                    let off = ow_lo + kj - g.pad;
                    let len = ow_hi - ow_lo;
                    for (y, &xv) in yrow[ow_lo..ow_hi].iter_mut().zip(&xrow[off..off + len]) {
                        *y += wv * xv;
                    }
                } else {
                    for ow in ow_lo..ow_hi {
                        yrow[ow] += wv * xrow[ow * g.stride + kj - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`accumulate_taps`]: scatters `dys` into `dxs` and `dws`.
#[inline]
fn accumulate_tap_grads<T: Scalar>(
    xs: &[T],
    ws: &[T],
    dys: &[T],
    mut dxs: Option<&mut [T]>,
    mut dws: Option<&mut [T]>,
    g: &ConvGeom,
) {
    for ki in 0..g.kernel_h {
        let (oh_lo, oh_hi) = valid_range(g.out_h, g.height, g.stride, g.pad, ki);
        for kj in 0..g.kernel_w {
            let widx = ki * g.kernel_w + kj;
            let wv = ws[widx];
            let (ow_lo, ow_hi) = valid_range(g.out_w, g.width, g.stride, g.pad, kj);
            let mut dw_acc = T::zero();
            for oh in oh_lo..oh_hi {
                let ih = oh * g.stride + ki - g.pad;
                let dyrow = &dys[oh * g.out_w..(oh + 1) * g.out_w];
                let xrow = &xs[ih * g.width..(ih + 1) * g.width];
                if g.stride == 1 {
                    let off = ow_lo + kj - g.pad;
                    let len = ow_hi - ow_lo;
                    let dyseg = &dyrow[ow_lo..ow_hi];
                    if let Some(dx) = dxs.as_deref_mut() {
                        let dxseg = &mut dx[ih * g.width + off..][..len];
                        for (d, &v) in dxseg.iter_mut().zip(dyseg) {
                            *d += wv * v;
                        }
                    }
                    if dws.is_some() {
                        for (&xv, &v) in xrow[off..off + len].iter().zip(dyseg) {
                            dw_acc += xv * v;
                        }
                    }
                    continue;
                }
                if let Some(dx) = dxs.as_deref_mut() {
                    let dxrow = &mut dx[ih * g.width..(ih + 1) * g.width];
                    for ow in ow_lo..ow_hi {
                        dxrow[ow * g.stride + kj - g.pad] += wv * dyrow[ow];
                    }
                }
                if dws.is_some() {
                    for ow in ow_lo..ow_hi {
                        dw_acc += xrow[ow * g.stride + kj - g.pad] * dyrow[ow];
                    }
                }
            }
            if let Some(dw) = dws.as_deref_mut() {
                dw[widx] += dw_acc;
            }
        }
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p_in = g.height * g.width;
    let p_out = g.out_h * g.out_w;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    if g.is_pointwise() {
        for n in 0..g.batch {
            let xs = &x[n * g.in_channels * p_in..][..g.in_channels * p_in];
            let dys = &dy[n * g.out_channels * p_out..][..g.out_channels * p_out];
            if let Some(dx) = dx.as_mut() {
                // dx_n = w^T dy_n
                let dxs = &mut dx[n * g.in_channels * p_in..][..g.in_channels * p_in];
                T::gemm(
                    g.in_channels,
                    g.out_channels,
                    p_in,
                    T::one(),
                    w,
                    1,
                    g.in_channels,
                    dys,
                    p_out,
                    1,
                    T::zero(),
                    dxs,
                    p_in,
                    1,
                );
            }
            if let Some(dw) = dw.as_mut() {
                // dw += dy_n x_n^T
                T::gemm(
                    g.out_channels,
                    p_in,
                    g.in_channels,
                    T::one(),
                    dys,
                    p_out,
                    1,
                    xs,
                    1,
                    p_in,
                    T::one(),
                    dw,
                    g.in_channels,
                    1,
                );
            }
        }
        return (dx, dw);
    }
    let ksize = g.kernel_h * g.kernel_w;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let dys = &dy[(n * g.out_channels + co) * p_out..][..p_out];
            for ci in 0..g.in_channels {
                let xs = &x[(n * g.in_channels + ci) * p_in..][..p_in];
                let ws = &w[(co * g.in_channels + ci) * ksize..][..ksize];
                let dxs = dx
                    .as_mut()
                    .map(|d| &mut d[(n * g.in_channels + ci) * p_in..][..p_in]);
                let dws = dw
                    .as_mut()
                    .map(|d| &mut d[(co * g.in_channels + ci) * ksize..][..ksize]);
                accumulate_tap_grads(xs, ws, dys, dxs, dws, g);
            }
        }
    }
    (dx, dw)
}

pub(crate) fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let p_in = g.height * g.width;
    let p_out = g.out_h * g.out_w;
    let ksize = g.kernel_h * g.kernel_w;
    let mut out = vec![T::zero(); g.batch * g.out_channels * p_out];
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let xs = &x[(n * g.in_channels + c) * p_in..][..p_in];
            let ws = &w[c * ksize..][..ksize];
            let ys = &mut out[(n * g.in_channels + c) * p_out..][..p_out];
            accumulate_taps(xs, ws, ys, g);
        }
    }
    out
}

pub(crate) fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p_in = g.height * g.width;
    let p_out = g.out_h * g.out_w;
    let ksize = g.kernel_h * g.kernel_w;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let xs = &x[(n * g.in_channels + c) * p_in..][..p_in];
            let ws = &w[c * ksize..][..ksize];
            let dys = &dy[(n * g.in_channels + c) * p_out..][..p_out];
            let dxs = dx
                .as_mut()
                .map(|d| &mut d[(n * g.in_channels + c) * p_in..][..p_in]);
            let dws = dw.as_mut().map(|d| &mut d[c * ksize..][..ksize]);
            accumulate_tap_grads(xs, ws, dys, dxs, dws, g);
        }
    }
    (dx, dw)
}

#[inline]
pub(crate) fn relu6_scalar<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::lit(6.0))
}

#[inline]
pub(crate) fn relu6_passes<T: Scalar>(v: T) -> bool {
    v > T::zero() && v < T::lit(6.0)
}

/// Per-channel statistics and normalized activations saved by a training
/// batch-norm forward.
pub(crate) struct NormSaved<T> {
    pub x_hat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Training-mode batch normalization over `N x C x P`; statistics per channel
/// over `N * P` values with population variance.
pub(crate) fn batch_norm_train_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, NormSaved<T>) {
    let count = T::lit((batch * plane) as f64);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = T::zero();
        for n in 0..batch {
            s += x[(n * channels + c) * plane..][..plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut ss = T::zero();
        for n in 0..batch {
            for &v in &x[(n * channels + c) * plane..][..plane] {
                let d = v - m;
                ss += d * d;
            }
        }
        mean[c] = m;
        var[c] = ss / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for (i, ((xs, hs), ys)) in x
        .chunks_exact(plane)
        .zip(x_hat.chunks_exact_mut(plane))
        .zip(y.chunks_exact_mut(plane))
        .enumerate()
    {
        let c = i % channels;
        let (m, s, ga, be) = (mean[c], inv_std[c], gamma[c], beta[c]);
        for ((&xv, h), yv) in xs.iter().zip(hs.iter_mut()).zip(ys.iter_mut()) {
            *h = (xv - m) * s;
            *yv = ga * *h + be;
        }
    }
    (
        y,
        NormSaved {
            x_hat,
            inv_std,
            mean,
            var,
        },
    )
}

pub(crate) fn batch_norm_train_backward<T: Scalar>(
    dy: &[T],
    saved: &NormSaved<T>,
    gamma: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = T::lit((batch * plane) as f64);
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for (i, (gs, hs)) in dy.chunks_exact(plane).zip(saved.x_hat.chunks_exact(plane)).enumerate() {
        let c = i % channels;
        let (mut dg, mut db) = (T::zero(), T::zero());
        for (&g, &h) in gs.iter().zip(hs) {
            dg += g * h;
            db += g;
        }
        dgamma[c] += dg;
        dbeta[c] += db;
    }
    debug_assert_eq!(dy.len(), batch * channels * plane);
    let mut dx = vec![T::zero(); dy.len()];
    for (i, ((gs, hs), ds)) in dy
        .chunks_exact(plane)
        .zip(saved.x_hat.chunks_exact(plane))
        .zip(dx.chunks_exact_mut(plane))
        .enumerate()
    {
        let c = i % channels;
        let k = gamma[c] * saved.inv_std[c] / count;
        let (db, dg) = (dbeta[c], dgamma[c]);
        for ((d, &g), &h) in ds.iter_mut().zip(gs).zip(hs) {
            *d = k * (count * g - db - h * dg);
        }
    }
    (dx, dgamma, dbeta)
}

/// Saved state of a SimAM forward: per-group mean and energy scale
/// `4 (var + lambda)`, and per-element sigmoid weights.
pub(crate) struct SimamSaved<T> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
    pub weight: Vec<T>,
}

/// `y = x * sigmoid(1 / e*)` with `1 / e* = ((x - mu)^2 + 2 var + 2 lambda) / (4 (var + lambda))`,
/// statistics taken over each `plane`-sized group including the neuron itself.
pub(crate) fn simam_forward<T: Scalar>(
    x: &[T],
    plane: usize,
    lambda: T,
) -> (Vec<T>, SimamSaved<T>) {
    let groups = x.len() / plane;
    let p = T::lit(plane as f64);
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let mut mean = Vec::with_capacity(groups);
    let mut scale = Vec::with_capacity(groups);
    let mut weight = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for gi in 0..groups {
        let xs = &x[gi * plane..(gi + 1) * plane];
        let mu = xs.iter().copied().sum::<T>() / p;
        let var = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / p;
        let a = four * (var + lambda);
        for (i, &v) in xs.iter().enumerate() {
            let d = (v - mu) * (v - mu);
            let inv_energy = (d + two * var + two * lambda) / a;
            let s = T::one() / (T::one() + (-inv_energy).exp());
            weight[gi * plane + i] = s;
            y[gi * plane + i] = v * s;
        }
        mean.push(mu);
        scale.push(a);
    }
    (
        y,
        SimamSaved {
            mean,
            scale,
            weight,
        },
    )
}

pub(crate) fn simam_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    plane: usize,
    saved: &SimamSaved<T>,
) -> Vec<T> {
    let groups = x.len() / plane;
    let p = T::lit(plane as f64);
    let two = T::lit(2.0);
    let eight = T::lit(8.0);
    let mut dx = vec![T::zero(); x.len()];
    for gi in 0..groups {
        let range = gi * plane..(gi + 1) * plane;
        let xs = &x[range.clone()];
        let gs = &dy[range.clone()];
        let ss = &saved.weight[range.clone()];
        let mu = saved.mean[gi];
        let a = saved.scale[gi];
        // q_j = dL/dz_j where z_j = 1/e*_j
        let mut sum_qc = T::zero();
        let mut sum_qd = T::zero();
        for j in 0..plane {
            let c = xs[j] - mu;
            let q = gs[j] * xs[j] * ss[j] * (T::one() - ss[j]);
            sum_qc += q * c;
            sum_qd += q * c * c;
        }
        let out = &mut dx[range];
        for i in 0..plane {
            let c = xs[i] - mu;
            let q = gs[i] * xs[i] * ss[i] * (T::one() - ss[i]);
            let through_z =
                (two * q * c - two * sum_qc / p) / a - eight * c * sum_qd / (p * a * a);
            out[i] = gs[i] * ss[i] + through_z;
        }
    }
    dx
}

/// Mean softmax cross-entropy over `N x K` logits. Returns the loss and the
/// row-wise softmax probabilities.
pub(crate) fn softmax_ce_forward<T: Scalar>(
    logits: &[T],
    classes: usize,
    labels: &[usize],
) -> Result<(T, Vec<T>)> {
    let batch = labels.len();
    if logits.len() != batch * classes {
        return Err(KwsError::Dimension(format!(
            "{} logits for {batch} labels x {classes} classes",
            logits.len()
        )));
    }
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (n, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(KwsError::Index(format!(
                "label {label} outside [0, {classes})"
            )));
        }
        let row = &logits[n * classes..(n + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (p, &l) in probs[n * classes..(n + 1) * classes].iter_mut().zip(row) {
            *p = (l - max).exp();
            z += *p;
        }
        for p in &mut probs[n * classes..(n + 1) * classes] {
            *p /= z;
        }
        total += z.ln() - (row[label] - max);
    }
    Ok((total / T::lit(batch.max(1) as f64), probs))
}

fn batched(t: &Tensor<impl Scalar>) -> Result<(Vec<usize>, bool)> {
    match t.shape().len() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            Ok((s, true))
        }
        4 => Ok((t.shape().to_vec(), false)),
        _ => Err(KwsError::Dimension(format!(
            "expected C x H x W or N x C x H x W, got {:?}",
            t.shape()
        ))),
    }
}

fn unbatch<T: Scalar>(data: Vec<T>, mut shape: Vec<usize>, squeeze: bool) -> Tensor<T> {
    if squeeze {
        shape.remove(0);
    }
    Tensor::new(shape, data).expect("kernel output matches its shape")
}

/// Dense 2-D cross-correlation without bias, symmetric zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (xs, squeeze) = batched(input)?;
    let g = ConvGeom::dense(&xs, weight.shape(), stride, pad)?;
    let out = conv2d_forward(input.data(), weight.data(), &g);
    Ok(unbatch(out, g.out_shape(), squeeze))
}

/// Per-channel 2-D cross-correlation; weight is `C x kh x kw`.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (xs, squeeze) = batched(input)?;
    let g = ConvGeom::depthwise(&xs, weight.shape(), stride, pad)?;
    let out = depthwise_forward(input.data(), weight.data(), &g);
    Ok(unbatch(out, g.out_shape(), squeeze))
}

pub fn relu6<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| relu6_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Spatial mean per channel; `C x H x W -> C x 1 x 1` (batched inputs keep N).
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, squeeze) = batched(x)?;
    let [n, c, h, w] = rank4(&xs, "pool input")?;
    let plane = h * w;
    if plane == 0 {
        return Err(KwsError::Contract("pooling over an empty plane".into()));
    }
    let inv = T::lit(1.0 / plane as f64);
    let out = x
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(unbatch(out, vec![n, c, 1, 1], squeeze))
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `N x K` logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let classes = match logits.shape() {
        &[n, k] if n == labels.len() => k,
        s => {
            return Err(KwsError::Dimension(format!(
                "logits {s:?} do not match {} labels",
                labels.len()
            )))
        }
    };
    softmax_ce_forward(logits.data(), classes, labels).map(|(l, _)| l)
}
