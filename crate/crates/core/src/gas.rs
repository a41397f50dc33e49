//! Geometric Abnormality Suppression.
//!
//! A small pixelwise classifier learns, without labels, to tell geometric
//! stem features apart from Gaussian noise: positives are the features plus
//! a faint perturbation, negatives are pure noise maps. At inference the
//! normal-class probability weights the stem features, pulling abnormal
//! pixels toward zero before the backbone sees them.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::kernels::{
    cross_entropy, leaky_relu_backward, leaky_relu_forward, linear_pixelwise_backward,
    linear_pixelwise_forward, softmax_channel_backward, softmax_channel_forward, KernelError,
};
use crate::real::{real, Real};
use crate::tensor::{LabelImage, Mask, ParamRole, ParamTensor, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GasError {
    #[error("{what} = {value} is invalid: {why}")]
    BadConfig {
        what: &'static str,
        value: f64,
        why: &'static str,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Hyperparameters of the abnormality branch.
#[derive(Debug, Clone, PartialEq)]
pub struct GasConfig {
    /// Positive-perturbation scale.
    pub gamma: f64,
    /// Negative-distribution mean.
    pub mu_n: f64,
    /// Negative-distribution standard deviation.
    pub sigma_n: f64,
    /// Hidden pixelwise blocks before the final 2-channel layer.
    pub blocks: usize,
    pub hidden_width: usize,
    /// Negative maps averaged per loss evaluation.
    pub negatives: usize,
    pub leaky_slope: f64,
    /// Cut the loss gradient into the stem features.
    pub stop_grad_stem: bool,
    /// Apply the abnormality weighting during training as well as
    /// inference.
    pub weight_in_training: bool,
}

impl Default for GasConfig {
    fn default() -> Self {
        GasConfig {
            gamma: 0.02,
            mu_n: 0.0,
            sigma_n: 1.0,
            blocks: 2,
            hidden_width: 32,
            negatives: 1,
            leaky_slope: 0.1,
            stop_grad_stem: false,
            weight_in_training: true,
        }
    }
}

impl GasConfig {
    pub fn validate(&self) -> Result<(), GasError> {
        if !(self.gamma >= 0.0) {
            return Err(GasError::BadConfig {
                what: "gamma",
                value: self.gamma,
                why: "must be non-negative",
            });
        }
        if !(self.sigma_n > 0.0) {
            return Err(GasError::BadConfig {
                what: "sigma_n",
                value: self.sigma_n,
                why: "must be positive",
            });
        }
        if self.hidden_width == 0 {
            return Err(GasError::BadConfig {
                what: "hidden_width",
                value: 0.0,
                why: "must be at least 1",
            });
        }
        if self.negatives == 0 {
            return Err(GasError::BadConfig {
                what: "negatives",
                value: 0.0,
                why: "must be at least 1",
            });
        }
        Ok(())
    }
}

/// Learnable layers of the abnormality network: `blocks` hidden pixelwise
/// linear layers with leaky-ReLU, then a final 2-channel linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GasParams<F> {
    pub layers: Vec<(ParamTensor<F>, ParamTensor<F>)>,
}

impl<F: Real> GasParams<F> {
    /// He-style random init for hidden layers; the final layer starts at
    /// zero so the untrained classifier is exactly symmetric.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        cfg: &GasConfig,
        rng: &mut R,
    ) -> Result<Self, GasError> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.blocks + 1);
        let mut fan_in = in_channels;
        for _ in 0..cfg.blocks {
            let scale = real::<F>((2.0 / fan_in as f64).sqrt());
            let weight = ParamTensor::from_values(
                &[cfg.hidden_width, fan_in],
                ParamRole::Weight,
                (0..cfg.hidden_width * fan_in)
                    .map(|_| F::standard_normal(rng) * scale)
                    .collect(),
            );
            let bias = ParamTensor::zeros(&[cfg.hidden_width], ParamRole::Bias);
            layers.push((weight, bias));
            fan_in = cfg.hidden_width;
        }
        layers.push((
            ParamTensor::zeros(&[2, fan_in], ParamRole::Weight),
            ParamTensor::zeros(&[2], ParamRole::Bias),
        ));
        Ok(GasParams { layers })
    }

    pub fn zero_grads(&mut self) {
        for (w, b) in &mut self.layers {
            w.zero_grad();
            b.zero_grad();
        }
    }
}

/// `F_geo + gamma * eps` with elementwise standard-normal `eps`.
pub fn make_positive<F: Real, R: Rng + ?Sized>(
    f_geo: &Tensor<F>,
    gamma: f64,
    rng: &mut R,
) -> Tensor<F> {
    let g = real::<F>(gamma);
    let mut out = f_geo.clone();
    for v in out.data_mut() {
        *v += g * F::standard_normal(rng);
    }
    out
}

/// An i.i.d. `N(mu_n, sigma_n^2)` feature map of the requested shape.
pub fn sample_negative<F: Real, R: Rng + ?Sized>(
    channels: usize,
    height: usize,
    width: usize,
    mu_n: f64,
    sigma_n: f64,
    rng: &mut R,
) -> Tensor<F> {
    let mu = real::<F>(mu_n);
    let sigma = real::<F>(sigma_n);
    Tensor::from_fn(channels, height, width, |_, _, _| {
        mu + sigma * F::standard_normal(rng)
    })
}

/// Intermediates of one abnormality forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct AbnormalityCtx<F> {
    /// Input of each linear layer, in order.
    layer_inputs: Vec<Tensor<F>>,
    /// Pre-activation output of each hidden layer.
    pre_acts: Vec<Tensor<F>>,
    probs: Tensor<F>,
}

impl<F: Real> AbnormalityCtx<F> {
    pub fn probs(&self) -> &Tensor<F> {
        &self.probs
    }
}

/// Run the abnormality network: logits and per-pixel class probabilities.
/// Channel 0 is the normal-class probability.
pub fn abnormality_forward<F: Real>(
    f: &Tensor<F>,
    params: &GasParams<F>,
    cfg: &GasConfig,
) -> Result<(Tensor<F>, Tensor<F>), GasError> {
    let (logits, ctx) = abnormality_forward_ctx(f, params, cfg)?;
    Ok((logits, ctx.probs))
}

pub fn abnormality_forward_ctx<F: Real>(
    f: &Tensor<F>,
    params: &GasParams<F>,
    cfg: &GasConfig,
) -> Result<(Tensor<F>, AbnormalityCtx<F>), GasError> {
    let slope = real::<F>(cfg.leaky_slope);
    let hidden = params.layers.len() - 1;
    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    let mut pre_acts = Vec::with_capacity(hidden);
    let mut x = f.clone();
    for (w, b) in &params.layers[..hidden] {
        let z = linear_pixelwise_forward(&x, w, b)?;
        layer_inputs.push(x);
        x = leaky_relu_forward(&z, slope);
        pre_acts.push(z);
    }
    let (w, b) = &params.layers[hidden];
    let logits = linear_pixelwise_forward(&x, w, b)?;
    layer_inputs.push(x);
    let probs = softmax_channel_forward(&logits);
    Ok((
        logits.clone(),
        AbnormalityCtx {
            layer_inputs,
            pre_acts,
            probs,
        },
    ))
}

/// Backprop a logit gradient through the network; accumulates parameter
/// gradients and returns the gradient with respect to the input map.
pub fn abnormality_backward<F: Real>(
    params: &mut GasParams<F>,
    cfg: &GasConfig,
    ctx: &AbnormalityCtx<F>,
    grad_logits: &Tensor<F>,
) -> Tensor<F> {
    let slope = real::<F>(cfg.leaky_slope);
    let hidden = params.layers.len() - 1;
    let (w, b) = &mut params.layers[hidden];
    let mut grad = linear_pixelwise_backward(&ctx.layer_inputs[hidden], w, b, grad_logits);
    for i in (0..hidden).rev() {
        grad = leaky_relu_backward(&ctx.pre_acts[i], &grad, slope);
        let (w, b) = &mut params.layers[i];
        grad = linear_pixelwise_backward(&ctx.layer_inputs[i], w, b, &grad);
    }
    grad
}

/// Loss output: the scalar and the gradient that flows back into the stem
/// (zero when `stop_grad_stem` is set). Parameter gradients accumulate
/// inside `params`.
#[derive(Debug, Clone)]
pub struct GasLossOut<F> {
    pub loss: F,
    pub grad_f_geo: Tensor<F>,
}

/// Self-supervised abnormality loss: cross-entropy pushing perturbed stem
/// features toward "normal" and Gaussian maps toward "abnormal", both
/// restricted to the valid mask. Returns the sum of the two terms; the
/// negative term averages over `cfg.negatives` maps.
pub fn gas_loss<F: Real, R: Rng + ?Sized>(
    f_geo: &Tensor<F>,
    params: &mut GasParams<F>,
    cfg: &GasConfig,
    valid: &Mask,
    rng: &mut R,
) -> Result<GasLossOut<F>, GasError> {
    gas_loss_scaled(f_geo, params, cfg, valid, F::one(), rng)
}

/// [`gas_loss`] with every gradient seed multiplied by `scale`, so a loss
/// weight (or batch average) applies to the accumulated parameter grads.
/// The returned loss is unscaled.
pub fn gas_loss_scaled<F: Real, R: Rng + ?Sized>(
    f_geo: &Tensor<F>,
    params: &mut GasParams<F>,
    cfg: &GasConfig,
    valid: &Mask,
    scale: F,
    rng: &mut R,
) -> Result<GasLossOut<F>, GasError> {
    cfg.validate()?;
    let (c, h, w) = f_geo.shape();

    // Positive term: target class 0 ("normal").
    let positive = make_positive(f_geo, cfg.gamma, rng);
    let (logits, ctx) = abnormality_forward_ctx(&positive, params, cfg)?;
    let target_pos = LabelImage::filled(h, w, 0);
    let (loss_pos, mut grad_logits) = cross_entropy(&logits, &target_pos, valid)?;
    grad_logits.scale(scale);
    let grad_pos = abnormality_backward(params, cfg, &ctx, &grad_logits);

    // Negative term: target class 1 ("abnormal"), averaged over draws.
    let target_neg = LabelImage::filled(h, w, 1);
    let inv_n = F::one() / real::<F>(cfg.negatives as f64);
    let mut loss_neg = F::zero();
    for _ in 0..cfg.negatives {
        let negative = sample_negative::<F, R>(c, h, w, cfg.mu_n, cfg.sigma_n, rng);
        let (logits, ctx) = abnormality_forward_ctx(&negative, params, cfg)?;
        let (term, mut grad_logits) = cross_entropy(&logits, &target_neg, valid)?;
        loss_neg += term * inv_n;
        grad_logits.scale(inv_n * scale);
        // Negative maps are noise, not activations; their input gradient is
        // discarded but parameter gradients accumulate.
        let _ = abnormality_backward(params, cfg, &ctx, &grad_logits);
    }

    let grad_f_geo = if cfg.stop_grad_stem {
        Tensor::zeros(c, h, w)
    } else {
        grad_pos
    };
    Ok(GasLossOut {
        loss: loss_pos + loss_neg,
        grad_f_geo,
    })
}

/// Intermediates of one weighting pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct GasWeightCtx<F> {
    net: AbnormalityCtx<F>,
    f_geo: Tensor<F>,
    w_plus: Vec<F>,
    valid: Mask,
}

impl<F: Real> GasWeightCtx<F> {
    /// The per-pixel normal-probability weight, zero at invalid pixels.
    pub fn w_plus(&self) -> &[F] {
        &self.w_plus
    }
}

/// Weight stem features by their normal-class probability:
/// `F_hat[c,p] = W_plus[p] * F_geo[c,p]`, with invalid pixels forced to
/// weight zero.
pub fn gas_weight<F: Real>(
    f_geo: &Tensor<F>,
    params: &GasParams<F>,
    cfg: &GasConfig,
    valid: &Mask,
) -> Result<(Tensor<F>, GasWeightCtx<F>), GasError> {
    let (_, ctx) = abnormality_forward_ctx(f_geo, params, cfg)?;
    let px = f_geo.pixels();
    let mut w_plus = vec![F::zero(); px];
    for (i, wv) in w_plus.iter_mut().enumerate() {
        if valid.as_slice()[i] {
            *wv = ctx.probs.data()[i];
        }
    }
    let mut f_hat = f_geo.clone();
    for c in 0..f_geo.channels() {
        for (v, &wv) in f_hat.channel_mut(c).iter_mut().zip(&w_plus) {
            *v *= wv;
        }
    }
    Ok((
        f_hat,
        GasWeightCtx {
            net: ctx,
            f_geo: f_geo.clone(),
            w_plus,
            valid: valid.clone(),
        },
    ))
}

/// Full backward of [`gas_weight`]: the weight is a function of the
/// features, so the gradient has a direct term and a term through the
/// abnormality network.
pub fn gas_weight_backward<F: Real>(
    params: &mut GasParams<F>,
    cfg: &GasConfig,
    ctx: &GasWeightCtx<F>,
    grad_f_hat: &Tensor<F>,
) -> Tensor<F> {
    let (c_n, h, w) = ctx.f_geo.shape();
    let px = h * w;

    // Direct term: dL/dF_geo += W_plus * dL/dF_hat.
    let mut grad_f_geo = grad_f_hat.clone();
    for c in 0..c_n {
        for (g, &wv) in grad_f_geo.channel_mut(c).iter_mut().zip(&ctx.w_plus) {
            *g *= wv;
        }
    }

    // Weight term: dL/dW_plus[p] = sum_c dL/dF_hat[c,p] * F_geo[c,p],
    // zero at invalid pixels where the weight is pinned.
    let mut grad_probs = Tensor::zeros(2, h, w);
    {
        let gw = grad_probs.channel_mut(0);
        for c in 0..c_n {
            let gf = grad_f_hat.channel(c);
            let fg = ctx.f_geo.channel(c);
            for i in 0..px {
                if ctx.valid.as_slice()[i] {
                    gw[i] += gf[i] * fg[i];
                }
            }
        }
    }
    let grad_logits = softmax_channel_backward(&ctx.net.probs, &grad_probs);
    let through_net = abnormality_backward(params, cfg, &ctx.net, &grad_logits);
    grad_f_geo.add_assign(&through_net);
    grad_f_geo
}

/// Rank-based ROC-AUC of scores separating positives from negatives, with
/// tie-averaged ranks. Used to audit the learned weighting.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> f64 {
    assert!(!pos.is_empty() && !neg.is_empty(), "roc_auc needs both classes");
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(core::cmp::Ordering::Equal));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks are 1-based; ties share the average rank of their block.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn)
}
