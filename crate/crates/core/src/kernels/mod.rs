//! Dense-grid numeric kernels with analytic backward passes.
//!
//! Every kernel is a pure function over immutable inputs; backward variants
//! accumulate parameter gradients into the paired [`ParamTensor`] storage
//! (callers zero gradients before each accumulation pass) and return the
//! gradient with respect to the input.
//!
//! Reduction order is fixed: all sums run sequentially in row-major
//! `(channel, row, column)` order, so repeated runs are bit-identical.

pub mod gradcheck;

use alloc::vec;
use alloc::vec::Vec;

use crate::real::{real, Real};
use crate::tensor::{
    shape3_string, ChannelStats, LabelImage, Mask, ParamTensor, ShapeError, Tensor, EPS_FLOOR,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KernelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("cross_entropy: target id {id} out of range for {classes} classes")]
    TargetOutOfRange { id: u16, classes: usize },
    #[error("cross_entropy: every pixel is excluded")]
    AllPixelsExcluded,
    #[error("conv3x3: stride {0} unsupported (expected 1 or 2)")]
    BadStride(usize),
    #[error("conv3x3: stride-2 input {h}x{w} must have even height and width")]
    OddStride2Input { h: usize, w: usize },
    #[error("{context}: weight tensor has rank {got}, expected {expected}")]
    WeightRank {
        context: &'static str,
        expected: usize,
        got: usize,
    },
}

fn check_shape(
    context: &'static str,
    ok: bool,
    expected: (usize, usize, usize),
    got: (usize, usize, usize),
) -> Result<(), ShapeError> {
    if ok {
        Ok(())
    } else {
        Err(ShapeError::Mismatch {
            context,
            expected: shape3_string(expected.0, expected.1, expected.2),
            got: shape3_string(got.0, got.1, got.2),
        })
    }
}

// ---------------------------------------------------------------------------
// Pixelwise linear (1x1)
// ---------------------------------------------------------------------------

/// `out[c,h,w] = sum_k weight[c,k] * input[k,h,w] + bias[c]`.
pub fn linear_pixelwise_forward<F: Real>(
    input: &Tensor<F>,
    weight: &ParamTensor<F>,
    bias: &ParamTensor<F>,
) -> Result<Tensor<F>, KernelError> {
    let (ci, h, w) = input.shape();
    let &[co, wci] = weight.shape() else {
        return Err(KernelError::WeightRank {
            context: "linear_pixelwise",
            expected: 2,
            got: weight.shape().len(),
        });
    };
    check_shape(
        "linear_pixelwise",
        wci == ci && bias.len() == co,
        (co, ci, 1),
        (co, wci, bias.len()),
    )?;

    let mut out = Tensor::zeros(co, h, w);
    for c_out in 0..co {
        let b = bias.value()[c_out];
        out.channel_mut(c_out).fill(b);
        for c_in in 0..ci {
            let wv = weight.value()[c_out * ci + c_in];
            let src = input.channel(c_in);
            let dst = out.channel_mut(c_out);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wv * *s;
            }
        }
    }
    Ok(out)
}

/// Backward of [`linear_pixelwise_forward`]; accumulates into the parameter
/// gradients and returns the gradient with respect to the input.
pub fn linear_pixelwise_backward<F: Real>(
    input: &Tensor<F>,
    weight: &mut ParamTensor<F>,
    bias: &mut ParamTensor<F>,
    grad_out: &Tensor<F>,
) -> Tensor<F> {
    let (ci, h, w) = input.shape();
    let co = grad_out.channels();
    debug_assert_eq!(grad_out.shape(), (co, h, w));
    debug_assert_eq!(weight.shape(), &[co, ci]);

    let mut grad_in = Tensor::zeros(ci, h, w);
    for c_out in 0..co {
        let gout = grad_out.channel(c_out);
        bias.grad_mut()[c_out] += gout.iter().copied().sum::<F>();
        for c_in in 0..ci {
            let wv = weight.value()[c_out * ci + c_in];
            let src = input.channel(c_in);
            let mut dot = F::zero();
            {
                let dst = grad_in.channel_mut(c_in);
                for ((d, g), s) in dst.iter_mut().zip(gout).zip(src) {
                    *d += wv * *g;
                    dot += *g * *s;
                }
            }
            weight.grad_mut()[c_out * ci + c_in] += dot;
        }
    }
    grad_in
}

// ---------------------------------------------------------------------------
// 3x3 convolution, zero padding 1, stride 1 or 2
// ---------------------------------------------------------------------------

fn conv_out_size(h: usize, w: usize, stride: usize) -> (usize, usize) {
    match stride {
        1 => (h, w),
        _ => (h / 2, w / 2),
    }
}

/// Direct 3x3 convolution with zero padding 1. Stride 1 preserves the
/// spatial size; stride 2 halves it (input dimensions must be even).
pub fn conv3x3_forward<F: Real>(
    input: &Tensor<F>,
    weight: &ParamTensor<F>,
    bias: &ParamTensor<F>,
    stride: usize,
) -> Result<Tensor<F>, KernelError> {
    let (ci, h, w) = input.shape();
    if stride != 1 && stride != 2 {
        return Err(KernelError::BadStride(stride));
    }
    if stride == 2 && (h % 2 != 0 || w % 2 != 0) {
        return Err(KernelError::OddStride2Input { h, w });
    }
    let &[co, wci, kh, kw] = weight.shape() else {
        return Err(KernelError::WeightRank {
            context: "conv3x3",
            expected: 4,
            got: weight.shape().len(),
        });
    };
    check_shape(
        "conv3x3",
        wci == ci && kh == 3 && kw == 3 && bias.len() == co,
        (co, ci, 9),
        (co, wci, kh * kw),
    )?;

    let (oh, ow) = conv_out_size(h, w, stride);
    let mut out = Tensor::zeros(co, oh, ow);
    for c_out in 0..co {
        out.channel_mut(c_out).fill(bias.value()[c_out]);
        for c_in in 0..ci {
            let wbase = ((c_out * ci) + c_in) * 9;
            let wk = &weight.value()[wbase..wbase + 9];
            if stride == 1 {
                conv_rows_stride1(input, c_in, &mut out, c_out, wk);
            } else {
                conv_rows_stride2(input, c_in, &mut out, c_out, wk);
            }
        }
    }
    Ok(out)
}

/// Accumulate one (c_out, c_in) pair at stride 1. Row interiors run as a
/// single fused pass over three shifted slices, which the compiler
/// vectorizes.
fn conv_rows_stride1<F: Real>(
    input: &Tensor<F>,
    c_in: usize,
    out: &mut Tensor<F>,
    c_out: usize,
    wk: &[F],
) {
    let (h, w) = (input.height(), input.width());
    for ky in 0..3 {
        let (w0, w1, w2) = (wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]);
        for oy in 0..h {
            let iy = oy + ky;
            if iy < 1 || iy > h {
                continue;
            }
            let src = input.row(c_in, iy - 1);
            let dst = out.row_mut(c_out, oy);
            if w >= 2 {
                dst[0] += w1 * src[0] + w2 * src[1];
                dst[w - 1] += w0 * src[w - 2] + w1 * src[w - 1];
            } else {
                dst[0] += w1 * src[0];
                continue;
            }
            let (left, mid, right) = (&src[..w - 2], &src[1..w - 1], &src[2..]);
            let inner = &mut dst[1..w - 1];
            for i in 0..inner.len() {
                inner[i] += w0 * left[i] + w1 * mid[i] + w2 * right[i];
            }
        }
    }
}

fn conv_rows_stride2<F: Real>(
    input: &Tensor<F>,
    c_in: usize,
    out: &mut Tensor<F>,
    c_out: usize,
    wk: &[F],
) {
    let (h, w) = (input.height(), input.width());
    let oh = h / 2;
    for ky in 0..3 {
        let (w0, w1, w2) = (wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]);
        for oy in 0..oh {
            let iy = (oy * 2 + ky).wrapping_sub(1);
            if iy >= h {
                continue;
            }
            let src = input.row(c_in, iy);
            let dst = out.row_mut(c_out, oy);
            for (ox, d) in dst.iter_mut().enumerate() {
                let ix = ox * 2;
                // Columns ix-1, ix, ix+1 of the padded input.
                let mut acc = w1 * src[ix];
                if ix >= 1 {
                    acc += w0 * src[ix - 1];
                }
                if ix + 1 < w {
                    acc += w2 * src[ix + 1];
                }
                *d += acc;
            }
        }
    }
}

/// Backward of [`conv3x3_forward`]; accumulates weight/bias gradients and
/// returns the gradient with respect to the input.
pub fn conv3x3_backward<F: Real>(
    input: &Tensor<F>,
    weight: &mut ParamTensor<F>,
    bias: &mut ParamTensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
) -> Tensor<F> {
    let (ci, h, w) = input.shape();
    let (co, oh, ow) = grad_out.shape();
    debug_assert_eq!(conv_out_size(h, w, stride), (oh, ow));
    debug_assert_eq!(weight.shape(), &[co, ci, 3, 3]);

    let mut grad_in = Tensor::zeros(ci, h, w);
    for c_out in 0..co {
        bias.grad_mut()[c_out] += grad_out.channel(c_out).iter().copied().sum::<F>();
        for c_in in 0..ci {
            let wbase = ((c_out * ci) + c_in) * 9;
            // Weight values and gradients share the ParamTensor; work on
            // copies of the 3x3 blocks to keep the borrows simple.
            let mut wk = [F::zero(); 9];
            wk.copy_from_slice(&weight.value()[wbase..wbase + 9]);
            let mut wg = [F::zero(); 9];
            if stride == 1 {
                backprop_pair_stride1(input, c_in, grad_out, c_out, &mut grad_in, &wk, &mut wg);
            } else {
                backprop_pair_stride2(input, c_in, grad_out, c_out, &mut grad_in, &wk, &mut wg);
            }
            for (g, d) in weight.grad_mut()[wbase..wbase + 9].iter_mut().zip(wg) {
                *g += d;
            }
        }
    }
    grad_in
}

fn backprop_pair_stride1<F: Real>(
    input: &Tensor<F>,
    c_in: usize,
    grad_out: &Tensor<F>,
    c_out: usize,
    grad_in: &mut Tensor<F>,
    wk: &[F],
    wg: &mut [F; 9],
) {
    let (h, w) = (input.height(), input.width());
    for ky in 0..3 {
        let (w0, w1, w2) = (wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]);
        for oy in 0..h {
            let iy = oy + ky;
            if iy < 1 || iy > h {
                continue;
            }
            let iy = iy - 1;
            let gout = grad_out.row(c_out, oy);
            let src = input.row(c_in, iy);

            // dL/dinput: transpose of the forward taps.
            {
                let din = grad_in.row_mut(c_in, iy);
                if w >= 2 {
                    din[0] += w1 * gout[0] + w0 * gout[1];
                    din[w - 1] += w2 * gout[w - 2] + w1 * gout[w - 1];
                    let (gl, gm, gr) = (&gout[..w - 2], &gout[1..w - 1], &gout[2..]);
                    let inner = &mut din[1..w - 1];
                    for i in 0..inner.len() {
                        inner[i] += w2 * gl[i] + w1 * gm[i] + w0 * gr[i];
                    }
                } else {
                    din[0] += w1 * gout[0];
                }
            }

            // dL/dweight: dot products of grad_out rows with shifted input rows.
            let mut d0 = F::zero();
            let mut d1 = F::zero();
            let mut d2 = F::zero();
            if w >= 2 {
                d1 += gout[0] * src[0];
                d2 += gout[0] * src[1];
                d0 += gout[w - 1] * src[w - 2];
                d1 += gout[w - 1] * src[w - 1];
                let (sl, sm, sr) = (&src[..w - 2], &src[1..w - 1], &src[2..]);
                let gm = &gout[1..w - 1];
                for i in 0..gm.len() {
                    d0 += gm[i] * sl[i];
                    d1 += gm[i] * sm[i];
                    d2 += gm[i] * sr[i];
                }
            } else {
                d1 += gout[0] * src[0];
            }
            wg[ky * 3] += d0;
            wg[ky * 3 + 1] += d1;
            wg[ky * 3 + 2] += d2;
        }
    }
}

fn backprop_pair_stride2<F: Real>(
    input: &Tensor<F>,
    c_in: usize,
    grad_out: &Tensor<F>,
    c_out: usize,
    grad_in: &mut Tensor<F>,
    wk: &[F],
    wg: &mut [F; 9],
) {
    let (h, w) = (input.height(), input.width());
    let (oh, ow) = (h / 2, w / 2);
    for ky in 0..3 {
        for oy in 0..oh {
            let iy = (oy * 2 + ky).wrapping_sub(1);
            if iy >= h {
                continue;
            }
            let gout = grad_out.row(c_out, oy);
            let src = input.row(c_in, iy);
            let din = grad_in.row_mut(c_in, iy);
            for ox in 0..ow {
                let g = gout[ox];
                let ix = ox * 2;
                din[ix] += wk[ky * 3 + 1] * g;
                wg[ky * 3 + 1] += g * src[ix];
                if ix >= 1 {
                    din[ix - 1] += wk[ky * 3] * g;
                    wg[ky * 3] += g * src[ix - 1];
                }
                if ix + 1 < w {
                    din[ix + 1] += wk[ky * 3 + 2] * g;
                    wg[ky * 3 + 2] += g * src[ix + 1];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

/// `x if x >= 0 else slope*x`. The subgradient at exactly 0 is 1.
pub fn leaky_relu_forward<F: Real>(input: &Tensor<F>, slope: F) -> Tensor<F> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < F::zero() {
            *v *= slope;
        }
    }
    out
}

pub fn leaky_relu_backward<F: Real>(input: &Tensor<F>, grad_out: &Tensor<F>, slope: F) -> Tensor<F> {
    debug_assert!(input.same_shape(grad_out));
    let mut grad_in = grad_out.clone();
    for (g, x) in grad_in.data_mut().iter_mut().zip(input.data()) {
        if *x < F::zero() {
            *g *= slope;
        }
    }
    grad_in
}

/// Zero every channel at pixels where the mask is false. Backward is the
/// same masking applied to the gradient.
pub fn zero_invalid<F: Real>(input: &Tensor<F>, mask: &Mask) -> Tensor<F> {
    let mut out = input.clone();
    mask_channels(&mut out, mask);
    out
}

pub fn mask_channels<F: Real>(t: &mut Tensor<F>, mask: &Mask) {
    debug_assert_eq!((t.height(), t.width()), (mask.height(), mask.width()));
    for c in 0..t.channels() {
        for (v, &keep) in t.channel_mut(c).iter_mut().zip(mask.as_slice()) {
            if !keep {
                *v = F::zero();
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Channel softmax
// ---------------------------------------------------------------------------

/// Per-pixel softmax over the channel axis, stabilized by max subtraction.
pub fn softmax_channel_forward<F: Real>(logits: &Tensor<F>) -> Tensor<F> {
    let (k, h, w) = logits.shape();
    let px = h * w;
    let mut maxes = vec![F::neg_infinity(); px];
    for c in 0..k {
        for (m, &v) in maxes.iter_mut().zip(logits.channel(c)) {
            if v > *m {
                *m = v;
            }
        }
    }
    let mut out = Tensor::zeros(k, h, w);
    let mut sums = vec![F::zero(); px];
    for c in 0..k {
        let src = logits.channel(c);
        let dst = out.channel_mut(c);
        for i in 0..px {
            let e = (src[i] - maxes[i]).exp();
            dst[i] = e;
            sums[i] += e;
        }
    }
    for c in 0..k {
        for (v, &s) in out.channel_mut(c).iter_mut().zip(&sums) {
            *v /= s;
        }
    }
    out
}

/// Backward of the channel softmax given its probabilities.
pub fn softmax_channel_backward<F: Real>(probs: &Tensor<F>, grad_probs: &Tensor<F>) -> Tensor<F> {
    let (k, h, w) = probs.shape();
    let px = h * w;
    let mut dots = vec![F::zero(); px];
    for c in 0..k {
        for ((d, &p), &g) in dots
            .iter_mut()
            .zip(probs.channel(c))
            .zip(grad_probs.channel(c))
        {
            *d += p * g;
        }
    }
    let mut grad_logits = Tensor::zeros(k, h, w);
    for c in 0..k {
        let dst = grad_logits.channel_mut(c);
        let p = probs.channel(c);
        let g = grad_probs.channel(c);
        for i in 0..px {
            dst[i] = p[i] * (g[i] - dots[i]);
        }
    }
    grad_logits
}

// ---------------------------------------------------------------------------
// Channel statistics and affine normalization
// ---------------------------------------------------------------------------

/// Internals saved for the backward pass through channel statistics.
#[derive(Debug, Clone)]
pub struct ChannelStatsCtx<F> {
    /// Population std before flooring; backward treats floored channels as
    /// constants.
    pub raw_std: Vec<F>,
    pub valid_count: usize,
}

/// Per-channel mean and population standard deviation over valid pixels.
pub fn channel_stats<F: Real>(
    input: &Tensor<F>,
    mask: &Mask,
) -> Result<ChannelStats<F>, KernelError> {
    channel_stats_with_ctx(input, mask).map(|(s, _)| s)
}

pub fn channel_stats_with_ctx<F: Real>(
    input: &Tensor<F>,
    mask: &Mask,
) -> Result<(ChannelStats<F>, ChannelStatsCtx<F>), KernelError> {
    let (c_n, h, w) = input.shape();
    debug_assert_eq!((h, w), (mask.height(), mask.width()));
    let n = mask.count_valid();
    if n == 0 {
        return Err(ShapeError::EmptyMask {
            context: "channel_stats",
        }
        .into());
    }
    let inv_n = F::one() / real::<F>(n as f64);
    let mut mean = Vec::with_capacity(c_n);
    let mut raw_std = Vec::with_capacity(c_n);
    for c in 0..c_n {
        let ch = input.channel(c);
        let mut acc = F::zero();
        for (&v, &keep) in ch.iter().zip(mask.as_slice()) {
            if keep {
                acc += v;
            }
        }
        let mu = acc * inv_n;
        let mut sq = F::zero();
        for (&v, &keep) in ch.iter().zip(mask.as_slice()) {
            if keep {
                let d = v - mu;
                sq += d * d;
            }
        }
        mean.push(mu);
        raw_std.push((sq * inv_n).sqrt());
    }
    let mut stats = ChannelStats {
        mean,
        std: raw_std.clone(),
    };
    stats.floor_std();
    Ok((
        stats,
        ChannelStatsCtx {
            raw_std,
            valid_count: n,
        },
    ))
}

/// Propagate gradients on (mean, std) back to the input. Channels whose raw
/// std fell below the floor contribute no std gradient.
pub fn channel_stats_backward<F: Real>(
    input: &Tensor<F>,
    mask: &Mask,
    stats: &ChannelStats<F>,
    ctx: &ChannelStatsCtx<F>,
    grad_mean: &[F],
    grad_std: &[F],
    grad_input: &mut Tensor<F>,
) {
    let (c_n, _, _) = input.shape();
    let floor = real::<F>(EPS_FLOOR);
    let inv_n = F::one() / real::<F>(ctx.valid_count as f64);
    for c in 0..c_n {
        let mu = stats.mean[c];
        let raw = ctx.raw_std[c];
        let dmu_term = grad_mean[c] * inv_n;
        let std_active = raw >= floor && raw > F::zero();
        let dstd_scale = if std_active {
            grad_std[c] * inv_n / raw
        } else {
            F::zero()
        };
        let src = input.channel(c);
        let dst = grad_input.channel_mut(c);
        for ((d, &v), &keep) in dst.iter_mut().zip(src).zip(mask.as_slice()) {
            if keep {
                *d += dmu_term + dstd_scale * (v - mu);
            }
        }
    }
}

/// `(input - mean)/std` per channel.
pub fn normalize_channels<F: Real>(input: &Tensor<F>, stats: &ChannelStats<F>) -> Tensor<F> {
    let mut out = input.clone();
    for c in 0..out.channels() {
        let mu = stats.mean[c];
        let inv = F::one() / stats.std[c];
        for v in out.channel_mut(c) {
            *v = (*v - mu) * inv;
        }
    }
    out
}

/// `input*std + mean` per channel; inverse of [`normalize_channels`] when the
/// std was not floored.
pub fn denormalize_channels<F: Real>(input: &Tensor<F>, stats: &ChannelStats<F>) -> Tensor<F> {
    let mut out = input.clone();
    for c in 0..out.channels() {
        let mu = stats.mean[c];
        let s = stats.std[c];
        for v in out.channel_mut(c) {
            *v = *v * s + mu;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Cross entropy
// ---------------------------------------------------------------------------

/// Mean negative log-probability of the target class over included pixels.
///
/// Returns the scalar loss and the gradient with respect to the logits
/// (`(softmax - onehot)/N` on included pixels, zero elsewhere).
pub fn cross_entropy<F: Real>(
    logits: &Tensor<F>,
    targets: &LabelImage,
    include: &Mask,
) -> Result<(F, Tensor<F>), KernelError> {
    let (k, h, w) = logits.shape();
    debug_assert_eq!((h, w), (targets.height(), targets.width()));
    debug_assert_eq!((h, w), (include.height(), include.width()));
    let px = h * w;

    let mut n = 0usize;
    for (i, &inc) in include.as_slice().iter().enumerate() {
        if inc {
            let t = targets.as_slice()[i];
            if usize::from(t) >= k {
                return Err(KernelError::TargetOutOfRange { id: t, classes: k });
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(KernelError::AllPixelsExcluded);
    }
    let inv_n = F::one() / real::<F>(n as f64);

    // Streaming passes: per-pixel max, then exp sums, then loss and gradient.
    let mut maxes = vec![F::neg_infinity(); px];
    for c in 0..k {
        for (m, &v) in maxes.iter_mut().zip(logits.channel(c)) {
            if v > *m {
                *m = v;
            }
        }
    }
    let mut sums = vec![F::zero(); px];
    for c in 0..k {
        for (i, &v) in logits.channel(c).iter().enumerate() {
            sums[i] += (v - maxes[i]).exp();
        }
    }

    let mut loss = F::zero();
    let mut grad = Tensor::zeros(k, h, w);
    for c in 0..k {
        let src = logits.channel(c);
        let dst = grad.channel_mut(c);
        for i in 0..px {
            if !include.as_slice()[i] {
                continue;
            }
            let p = (src[i] - maxes[i]).exp() / sums[i];
            let is_target = usize::from(targets.as_slice()[i]) == c;
            if is_target {
                loss -= (src[i] - maxes[i] - sums[i].ln()) * inv_n;
                dst[i] = (p - F::one()) * inv_n;
            } else {
                dst[i] = p * inv_n;
            }
        }
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Nearest-neighbor 2x upsampling
// ---------------------------------------------------------------------------

pub fn upsample2_forward<F: Real>(input: &Tensor<F>) -> Tensor<F> {
    let (c_n, h, w) = input.shape();
    let mut out = Tensor::zeros(c_n, h * 2, w * 2);
    for c in 0..c_n {
        for y in 0..h {
            let src = input.row(c, y);
            for dy in 0..2 {
                let dst = out.row_mut(c, y * 2 + dy);
                for x in 0..w {
                    dst[2 * x] = src[x];
                    dst[2 * x + 1] = src[x];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Real>(grad_out: &Tensor<F>) -> Tensor<F> {
    let (c_n, oh, ow) = grad_out.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut grad_in = Tensor::zeros(c_n, h, w);
    for c in 0..c_n {
        for y in 0..h {
            let dst = grad_in.row_mut(c, y);
            for dy in 0..2 {
                let src = grad_out.row(c, y * 2 + dy);
                for x in 0..w {
                    dst[x] += src[2 * x] + src[2 * x + 1];
                }
            }
        }
    }
    grad_in
}

#[cfg(test)]
mod tests;
