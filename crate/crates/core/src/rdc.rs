//! Reflectance Distortion Calibration.
//!
//! A learnable Source Style Memory Bank stores T style rows in feature
//! space. Each pixel of the reflectance stem retrieves a convex mix of
//! rows via cosine attention; the channel statistics of the retrieved map
//! act as source-domain style, and the features are re-normalized onto
//! them (AdaIN-style). Training augments the input statistics so the
//! memory must undo the perturbation; inference calibrates directly.
//!
//! All statistics run over valid pixels only, and every standard
//! deviation is floored at [`EPS_FLOOR`].

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::kernels::{channel_stats_backward, channel_stats_with_ctx, ChannelStatsCtx, KernelError};
use crate::real::{real, Real};
use crate::tensor::{ChannelStats, Mask, ParamRole, ParamTensor, Tensor, EPS_FLOOR};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RdcError {
    #[error("{what} = {value} is invalid: {why}")]
    BadConfig {
        what: &'static str,
        value: f64,
        why: &'static str,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdcConfig {
    /// Style rows in the memory bank (T).
    pub bank_rows: usize,
    /// Softmax temperature for the attention over rows.
    pub temperature: f64,
    /// Half-width of the statistic augmentation during training: scale
    /// factors are drawn uniformly from `[1-jitter, 1+jitter]`. The full
    /// 0.5 keeps sigma positive; smaller values keep retrieval keys closer
    /// to the clean style.
    pub jitter: f64,
}

impl Default for RdcConfig {
    fn default() -> Self {
        RdcConfig {
            bank_rows: 64,
            temperature: 1.0,
            jitter: 0.5,
        }
    }
}

impl RdcConfig {
    pub fn validate(&self) -> Result<(), RdcError> {
        if self.bank_rows == 0 {
            return Err(RdcError::BadConfig {
                what: "bank_rows",
                value: 0.0,
                why: "must be at least 1",
            });
        }
        if !(self.temperature > 0.0) {
            return Err(RdcError::BadConfig {
                what: "temperature",
                value: self.temperature,
                why: "must be positive",
            });
        }
        if !self.jitter.is_finite() || !(0.0..=0.5).contains(&self.jitter) {
            return Err(RdcError::BadConfig {
                what: "jitter",
                value: self.jitter,
                why: "must lie in [0, 0.5]",
            });
        }
        Ok(())
    }
}

/// Learnable `T x C` style matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleMemoryBank<F> {
    pub rows: ParamTensor<F>,
}

impl<F: Real> StyleMemoryBank<F> {
    /// i.i.d. standard-normal rows; a row is redrawn while its norm stays
    /// below 1e-3, so cosine similarity is always defined.
    pub fn init<R: Rng + ?Sized>(t: usize, c: usize, rng: &mut R) -> Result<Self, RdcError> {
        if t == 0 || c == 0 {
            return Err(RdcError::BadConfig {
                what: "bank shape",
                value: (t * c) as f64,
                why: "rows and channels must be at least 1",
            });
        }
        let min_norm = real::<F>(1e-3);
        let mut values = vec![F::zero(); t * c];
        for row in values.chunks_mut(c) {
            loop {
                for v in row.iter_mut() {
                    *v = F::standard_normal(rng);
                }
                let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
                if norm >= min_norm {
                    break;
                }
            }
        }
        Ok(StyleMemoryBank {
            rows: ParamTensor::from_values(&[t, c], ParamRole::Memory, values),
        })
    }

    pub fn t(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn c(&self) -> usize {
        self.rows.shape()[1]
    }
}

/// Output of one style retrieval, with enough context for backprop.
#[derive(Debug, Clone)]
pub struct RetrievedStyle<F> {
    /// `T x H x W` attention over memory rows; each pixel sums to 1.
    pub attention: Tensor<F>,
    /// `C x H x W` retrieved style map, a per-pixel convex mix of rows.
    pub v: Tensor<F>,
    /// Channel statistics of `v` over valid pixels.
    pub stats: ChannelStats<F>,
    /// Valid pixels whose feature norm was exactly zero; they received
    /// uniform attention.
    pub zero_norm_pixels: usize,
    input: Tensor<F>,
    feat_norms: Vec<F>,
    row_norms: Vec<F>,
    stats_ctx: ChannelStatsCtx<F>,
}

/// Cosine-attention retrieval: similarity of every pixel feature against
/// every memory row (epsilon-guarded norms, zero-norm features score 0
/// toward all rows), softmax over rows, convex mix, channel statistics
/// over valid pixels.
pub fn retrieve_style<F: Real>(
    f: &Tensor<F>,
    bank: &StyleMemoryBank<F>,
    cfg: &RdcConfig,
    valid: &Mask,
) -> Result<RetrievedStyle<F>, RdcError> {
    cfg.validate()?;
    let (c_n, h, w) = f.shape();
    if bank.c() != c_n {
        return Err(KernelError::Shape(crate::tensor::ShapeError::Mismatch {
            context: "retrieve_style",
            expected: alloc::format!("{} feature channels", bank.c()),
            got: alloc::format!("{c_n} feature channels"),
        })
        .into());
    }
    let t_n = bank.t();
    let px = h * w;
    let eps = real::<F>(EPS_FLOOR);
    let inv_temp = real::<F>(1.0 / cfg.temperature);

    let row_norms: Vec<F> = bank
        .rows
        .value()
        .chunks(c_n)
        .map(|row| row.iter().map(|&v| v * v).sum::<F>().sqrt())
        .collect();

    let mut attention = Tensor::zeros(t_n, h, w);
    let mut v_map = Tensor::zeros(c_n, h, w);
    let mut feat_norms = vec![F::zero(); px];
    let mut zero_norm_pixels = 0usize;
    let mut feat = vec![F::zero(); c_n];
    let mut scores = vec![F::zero(); t_n];
    let mut v_px = vec![F::zero(); c_n];
    for p in 0..px {
        for (c, fv) in feat.iter_mut().enumerate() {
            *fv = f.data()[c * px + p];
        }
        let norm = feat.iter().map(|&v| v * v).sum::<F>().sqrt();
        feat_norms[p] = norm;
        if norm == F::zero() {
            if valid.as_slice()[p] {
                zero_norm_pixels += 1;
            }
            scores.iter_mut().for_each(|s| *s = F::zero());
        } else {
            let guard_f = norm.max(eps);
            for (j, s) in scores.iter_mut().enumerate() {
                let row = &bank.rows.value()[j * c_n..(j + 1) * c_n];
                let dot = row.iter().zip(&feat).map(|(&m, &fv)| m * fv).sum::<F>();
                *s = dot / (guard_f * row_norms[j].max(eps));
            }
        }

        // Stable softmax over rows at this pixel.
        let mut max_s = F::neg_infinity();
        for &s in &scores {
            max_s = max_s.max(s * inv_temp);
        }
        let mut sum = F::zero();
        for (j, &s) in scores.iter().enumerate() {
            let e = (s * inv_temp - max_s).exp();
            attention.data_mut()[j * px + p] = e;
            sum += e;
        }
        v_px.iter_mut().for_each(|v| *v = F::zero());
        for j in 0..t_n {
            let a = attention.data()[j * px + p] / sum;
            attention.data_mut()[j * px + p] = a;
            let row = &bank.rows.value()[j * c_n..(j + 1) * c_n];
            for (vv, &m) in v_px.iter_mut().zip(row) {
                *vv += a * m;
            }
        }
        for (c, &vv) in v_px.iter().enumerate() {
            v_map.data_mut()[c * px + p] = vv;
        }
    }

    let (stats, stats_ctx) = channel_stats_with_ctx(&v_map, valid)?;
    Ok(RetrievedStyle {
        attention,
        v: v_map,
        stats,
        zero_norm_pixels,
        input: f.clone(),
        feat_norms,
        row_norms,
        stats_ctx,
    })
}

/// Backprop a gradient on the retrieved map `v` through attention and
/// cosine similarity; accumulates the bank gradient and adds the feature
/// gradient into `grad_f`.
fn retrieve_backward<F: Real>(
    bank: &mut StyleMemoryBank<F>,
    cfg: &RdcConfig,
    style: &RetrievedStyle<F>,
    grad_v: &Tensor<F>,
    grad_f: &mut Tensor<F>,
) {
    let (c_n, h, w) = style.v.shape();
    let t_n = style.attention.channels();
    let px = h * w;
    let eps = real::<F>(EPS_FLOOR);
    let inv_temp = real::<F>(1.0 / cfg.temperature);

    let mut grad_rows = vec![F::zero(); t_n * c_n];
    let mut feat = vec![F::zero(); c_n];
    let mut gv = vec![F::zero(); c_n];
    let mut grad_att = vec![F::zero(); t_n];
    let mut grad_scores = vec![F::zero(); t_n];
    for p in 0..px {
        let mut any = false;
        for (c, g) in gv.iter_mut().enumerate() {
            *g = grad_v.data()[c * px + p];
            any |= *g != F::zero();
        }
        if !any {
            continue;
        }
        for (c, fv) in feat.iter_mut().enumerate() {
            *fv = style.input.data()[c * px + p];
        }

        // v = sum_j a_j * m_j.
        for j in 0..t_n {
            let a = style.attention.data()[j * px + p];
            let row = &bank.rows.value()[j * c_n..(j + 1) * c_n];
            let mut dot = F::zero();
            for (c, (&m, &g)) in row.iter().zip(&gv).enumerate() {
                grad_rows[j * c_n + c] += a * g;
                dot += m * g;
            }
            grad_att[j] = dot;
        }

        // Softmax backward over rows; zero-norm pixels scored a constant,
        // so nothing flows further there.
        let norm = style.feat_norms[p];
        if norm == F::zero() {
            continue;
        }
        let mut inner = F::zero();
        for j in 0..t_n {
            inner += style.attention.data()[j * px + p] * grad_att[j];
        }
        for j in 0..t_n {
            let a = style.attention.data()[j * px + p];
            grad_scores[j] = a * (grad_att[j] - inner) * inv_temp;
        }

        // Cosine backward: s = (f . m) / (max(|f|,eps) * max(|m|,eps)).
        let guard_f = norm.max(eps);
        for j in 0..t_n {
            let ds = grad_scores[j];
            if ds == F::zero() {
                continue;
            }
            let row = &bank.rows.value()[j * c_n..(j + 1) * c_n];
            let row_norm = style.row_norms[j];
            let guard_m = row_norm.max(eps);
            let inv = F::one() / (guard_f * guard_m);
            let dot = row.iter().zip(&feat).map(|(&m, &fv)| m * fv).sum::<F>();
            let f_term = if norm >= eps {
                dot / (guard_f * guard_f * guard_m * norm)
            } else {
                F::zero()
            };
            let m_term = if row_norm >= eps {
                dot / (guard_f * guard_m * guard_m * row_norm)
            } else {
                F::zero()
            };
            for c in 0..c_n {
                grad_f.data_mut()[c * px + p] += ds * (row[c] * inv - f_term * feat[c]);
                grad_rows[j * c_n + c] += ds * (feat[c] * inv - m_term * row[c]);
            }
        }
    }
    for (g, d) in bank.rows.grad_mut().iter_mut().zip(grad_rows) {
        *g += d;
    }
}

/// Per-channel augmentation draws, centered on 0.5 so that the applied
/// factor `draw + 0.5` is centered on 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw<F> {
    pub alpha: Vec<F>,
    pub beta: Vec<F>,
}

impl<F: Real> AugmentDraw<F> {
    /// The draw that makes augmentation the identity map.
    pub fn identity(channels: usize) -> Self {
        let half = real::<F>(0.5);
        AugmentDraw {
            alpha: vec![half; channels],
            beta: vec![half; channels],
        }
    }

    /// Uniform draws on `[0.5 - jitter, 0.5 + jitter]`; the full half-width
    /// 0.5 recovers draws on (0, 1).
    pub fn sample<R: Rng + ?Sized>(channels: usize, jitter: f64, rng: &mut R) -> Self {
        let half = real::<F>(0.5);
        let width = real::<F>(2.0 * jitter);
        let draw = |rng: &mut R| {
            (0..channels)
                .map(|_| half + width * (F::unit_uniform(rng) - half))
                .collect()
        };
        let alpha = draw(rng);
        let beta = draw(rng);
        AugmentDraw { alpha, beta }
    }
}

/// Shift a feature map onto perturbed statistics:
/// `mu_aug = (alpha+0.5)*mu_ref`, `sigma_aug = (beta+0.5)*sigma_ref`,
/// content preserved. Invalid pixels stay zero.
pub fn augment_stats<F: Real>(
    f: &Tensor<F>,
    draw: &AugmentDraw<F>,
    valid: &Mask,
) -> Result<Tensor<F>, RdcError> {
    let (stats, _) = channel_stats_with_ctx(f, valid)?;
    let half = real::<F>(0.5);
    let mut out = Tensor::zeros(f.channels(), f.height(), f.width());
    for c in 0..f.channels() {
        let mu = stats.mean[c];
        let sigma = stats.std[c];
        let mu_aug = (draw.alpha[c] + half) * mu;
        let sigma_aug = (draw.beta[c] + half) * sigma;
        let src = f.channel(c);
        let dst = out.channel_mut(c);
        for ((d, &v), &keep) in dst.iter_mut().zip(src).zip(valid.as_slice()) {
            if keep {
                *d = sigma_aug * (v - mu) / sigma + mu_aug;
            }
        }
    }
    Ok(out)
}

/// Re-normalize `f_ref` onto the target statistics:
/// `sigma_src * (f - mu_ref)/sigma_ref + mu_src` on valid pixels, zero
/// elsewhere. The reference statistics come from `f_ref` itself.
pub fn calibrate<F: Real>(
    f_ref: &Tensor<F>,
    stats_src: &ChannelStats<F>,
    valid: &Mask,
) -> Result<Tensor<F>, RdcError> {
    let (stats_ref, _) = channel_stats_with_ctx(f_ref, valid)?;
    Ok(calibrate_with(f_ref, &stats_ref, stats_src, valid))
}

fn calibrate_with<F: Real>(
    f_ref: &Tensor<F>,
    stats_ref: &ChannelStats<F>,
    stats_src: &ChannelStats<F>,
    valid: &Mask,
) -> Tensor<F> {
    let mut out = Tensor::zeros(f_ref.channels(), f_ref.height(), f_ref.width());
    for c in 0..f_ref.channels() {
        let mu_r = stats_ref.mean[c];
        let inv_sr = F::one() / stats_ref.std[c];
        let mu_s = stats_src.mean[c];
        let sigma_s = stats_src.std[c];
        let src = f_ref.channel(c);
        let dst = out.channel_mut(c);
        for ((d, &v), &keep) in dst.iter_mut().zip(src).zip(valid.as_slice()) {
            if keep {
                *d = sigma_s * (v - mu_r) * inv_sr + mu_s;
            }
        }
    }
    out
}

/// Forward result of the RDC training path.
#[derive(Debug, Clone)]
pub struct RdcTrainOut<F> {
    /// Calibrated reflectance features, ready for fusion.
    pub f_hat: Tensor<F>,
    pub l_sc: F,
    pub l_sa: F,
    pub l_rdc: F,
    /// Diagnostic from retrieval over the augmented features.
    pub zero_norm_pixels: usize,
}

/// Everything the backward pass needs from the forward pass.
#[derive(Debug)]
pub struct RdcTrainCtx<F> {
    f_ref: Tensor<F>,
    valid: Mask,
    stats_ref: ChannelStats<F>,
    ctx_ref: ChannelStatsCtx<F>,
    draw: AugmentDraw<F>,
    style: RetrievedStyle<F>,
    f_hat: Tensor<F>,
    /// `(f_ref - mu_ref)/sigma_ref` on valid pixels.
    q: Tensor<F>,
    valid_count: usize,
}

/// Training path: augment the reference statistics, retrieve style from
/// the augmented map, calibrate the original features with the retrieved
/// statistics, and score semantic consistency plus style alignment.
pub fn rdc_forward_train<F: Real, R: Rng + ?Sized>(
    f_ref: &Tensor<F>,
    bank: &StyleMemoryBank<F>,
    cfg: &RdcConfig,
    valid: &Mask,
    rng: &mut R,
) -> Result<(RdcTrainOut<F>, RdcTrainCtx<F>), RdcError> {
    let draw = AugmentDraw::sample(f_ref.channels(), cfg.jitter, rng);
    rdc_forward_train_with(f_ref, bank, cfg, valid, draw)
}

/// Training path with explicit augmentation draws (the identity draw
/// reproduces the inference path exactly).
pub fn rdc_forward_train_with<F: Real>(
    f_ref: &Tensor<F>,
    bank: &StyleMemoryBank<F>,
    cfg: &RdcConfig,
    valid: &Mask,
    draw: AugmentDraw<F>,
) -> Result<(RdcTrainOut<F>, RdcTrainCtx<F>), RdcError> {
    cfg.validate()?;
    let (c_n, h, w) = f_ref.shape();
    let (stats_ref, ctx_ref) = channel_stats_with_ctx(f_ref, valid)?;
    let n = ctx_ref.valid_count;

    // Normalized content, reused by augmentation and calibration.
    let mut q = Tensor::zeros(c_n, h, w);
    let half = real::<F>(0.5);
    let mut f_aug = Tensor::zeros(c_n, h, w);
    for c in 0..c_n {
        let mu = stats_ref.mean[c];
        let inv_s = F::one() / stats_ref.std[c];
        let mu_aug = (draw.alpha[c] + half) * mu;
        let sigma_aug = (draw.beta[c] + half) * stats_ref.std[c];
        let src = f_ref.channel(c);
        let qc = q.channel_mut(c);
        for ((d, &v), &keep) in qc.iter_mut().zip(src).zip(valid.as_slice()) {
            if keep {
                *d = (v - mu) * inv_s;
            }
        }
        let dst = f_aug.channel_mut(c);
        for ((d, &qv), &keep) in dst.iter_mut().zip(q.channel(c)).zip(valid.as_slice()) {
            if keep {
                *d = sigma_aug * qv + mu_aug;
            }
        }
    }

    let style = retrieve_style(&f_aug, bank, cfg, valid)?;
    let f_hat = calibrate_with(f_ref, &stats_ref, &style.stats, valid);

    // Semantic consistency: mean per-pixel Euclidean distance to the
    // original features over valid pixels.
    let inv_n = F::one() / real::<F>(n as f64);
    let mut l_sc = F::zero();
    for p in 0..h * w {
        if !valid.as_slice()[p] {
            continue;
        }
        let mut sq = F::zero();
        for c in 0..c_n {
            let d = f_hat.channel(c)[p] - f_ref.channel(c)[p];
            sq += d * d;
        }
        l_sc += sq.sqrt() * inv_n;
    }

    // Style alignment: channel-vector 2-norms of the stat mismatch.
    let mut sa_mu = F::zero();
    let mut sa_sigma = F::zero();
    for c in 0..c_n {
        let dm = style.stats.mean[c] - stats_ref.mean[c];
        let ds = style.stats.std[c] - stats_ref.std[c];
        sa_mu += dm * dm;
        sa_sigma += ds * ds;
    }
    let l_sa = sa_mu.sqrt() + sa_sigma.sqrt();

    let out = RdcTrainOut {
        f_hat: f_hat.clone(),
        l_sc,
        l_sa,
        l_rdc: l_sc + l_sa,
        zero_norm_pixels: style.zero_norm_pixels,
    };
    let ctx = RdcTrainCtx {
        f_ref: f_ref.clone(),
        valid: valid.clone(),
        stats_ref,
        ctx_ref,
        draw,
        style,
        f_hat,
        q,
        valid_count: n,
    };
    Ok((out, ctx))
}

/// Backward of the RDC training path. `grad_f_hat` carries any upstream
/// gradient on the calibrated map (from fusion); pass `None` when only the
/// RDC losses pull on the graph. Accumulates the bank gradient and returns
/// the gradient with respect to the reflectance stem features.
pub fn rdc_backward_train<F: Real>(
    bank: &mut StyleMemoryBank<F>,
    cfg: &RdcConfig,
    ctx: &RdcTrainCtx<F>,
    grad_f_hat: Option<&Tensor<F>>,
) -> Tensor<F> {
    rdc_backward_train_scaled(bank, cfg, ctx, grad_f_hat, F::one())
}

/// [`rdc_backward_train`] with the loss-derived gradient seeds multiplied
/// by `loss_scale`; the upstream `grad_f_hat` is used as given.
pub fn rdc_backward_train_scaled<F: Real>(
    bank: &mut StyleMemoryBank<F>,
    cfg: &RdcConfig,
    ctx: &RdcTrainCtx<F>,
    grad_f_hat: Option<&Tensor<F>>,
    loss_scale: F,
) -> Tensor<F> {
    let (c_n, h, w) = ctx.f_ref.shape();
    let px = h * w;
    let inv_n = loss_scale / real::<F>(ctx.valid_count as f64);
    let half = real::<F>(0.5);

    let mut grad_f_ref = Tensor::zeros(c_n, h, w);
    let mut g_mu_r = vec![F::zero(); c_n];
    let mut g_sigma_r = vec![F::zero(); c_n];
    let mut g_mu_s = vec![F::zero(); c_n];
    let mut g_sigma_s = vec![F::zero(); c_n];

    // L_SC gradient on f_hat, plus the direct -f_ref term; then any
    // upstream fusion gradient on f_hat.
    let mut g_hat = Tensor::zeros(c_n, h, w);
    for p in 0..px {
        if !ctx.valid.as_slice()[p] {
            continue;
        }
        let mut sq = F::zero();
        for c in 0..c_n {
            let d = ctx.f_hat.channel(c)[p] - ctx.f_ref.channel(c)[p];
            sq += d * d;
        }
        let norm = sq.sqrt();
        if norm > F::zero() {
            let scale = inv_n / norm;
            for c in 0..c_n {
                let d = ctx.f_hat.channel(c)[p] - ctx.f_ref.channel(c)[p];
                g_hat.channel_mut(c)[p] = d * scale;
                grad_f_ref.channel_mut(c)[p] -= d * scale;
            }
        }
    }
    if let Some(up) = grad_f_hat {
        g_hat.add_assign(up);
    }

    // Calibration backward: f_hat = sigma_s * q + mu_s.
    for c in 0..c_n {
        let sigma_s = ctx.style.stats.std[c];
        let sigma_r = ctx.stats_ref.std[c];
        let ratio = sigma_s / sigma_r;
        let gh = g_hat.channel(c);
        let qc = ctx.q.channel(c);
        let gf = grad_f_ref.channel_mut(c);
        let mut sum_g = F::zero();
        let mut sum_gq = F::zero();
        for ((&g, &qv), (&keep, out)) in gh
            .iter()
            .zip(qc)
            .zip(ctx.valid.as_slice().iter().zip(gf.iter_mut()))
        {
            if keep {
                *out += g * ratio;
                sum_g += g;
                sum_gq += g * qv;
            }
        }
        g_sigma_s[c] += sum_gq;
        g_mu_s[c] += sum_g;
        g_mu_r[c] -= sum_g * ratio;
        g_sigma_r[c] -= sum_gq * ratio;
    }

    // L_SA backward onto both stat vectors.
    let mut nm = F::zero();
    let mut ns = F::zero();
    for c in 0..c_n {
        let dm = ctx.style.stats.mean[c] - ctx.stats_ref.mean[c];
        let ds = ctx.style.stats.std[c] - ctx.stats_ref.std[c];
        nm += dm * dm;
        ns += ds * ds;
    }
    let (nm, ns) = (nm.sqrt(), ns.sqrt());
    for c in 0..c_n {
        if nm > F::zero() {
            let g = loss_scale * (ctx.style.stats.mean[c] - ctx.stats_ref.mean[c]) / nm;
            g_mu_s[c] += g;
            g_mu_r[c] -= g;
        }
        if ns > F::zero() {
            let g = loss_scale * (ctx.style.stats.std[c] - ctx.stats_ref.std[c]) / ns;
            g_sigma_s[c] += g;
            g_sigma_r[c] -= g;
        }
    }

    // Retrieved-stat gradients flow into the retrieved map, then through
    // attention and cosine similarity into the bank and the augmented map.
    let mut grad_v = Tensor::zeros(c_n, h, w);
    channel_stats_backward(
        &ctx.style.v,
        &ctx.valid,
        &ctx.style.stats,
        &ctx.style.stats_ctx,
        &g_mu_s,
        &g_sigma_s,
        &mut grad_v,
    );
    let mut grad_f_aug = Tensor::zeros(c_n, h, w);
    retrieve_backward(bank, cfg, &ctx.style, &grad_v, &mut grad_f_aug);

    // Augmentation backward. With sigma_aug proportional to sigma_ref the
    // map reduces to f_aug = (beta+0.5)*f_ref + (alpha-beta)*mu_ref on
    // valid pixels, so the sigma_ref path cancels exactly.
    for c in 0..c_n {
        let b = ctx.draw.beta[c] + half;
        let a_minus_b = ctx.draw.alpha[c] - ctx.draw.beta[c];
        let ga = grad_f_aug.channel(c);
        let gf = grad_f_ref.channel_mut(c);
        let mut sum_g = F::zero();
        for ((&g, &keep), out) in ga.iter().zip(ctx.valid.as_slice()).zip(gf.iter_mut()) {
            if keep {
                *out += b * g;
                sum_g += g;
            }
        }
        g_mu_r[c] += a_minus_b * sum_g;
    }

    // Reference-stat gradients back to the features.
    channel_stats_backward(
        &ctx.f_ref,
        &ctx.valid,
        &ctx.stats_ref,
        &ctx.ctx_ref,
        &g_mu_r,
        &g_sigma_r,
        &mut grad_f_ref,
    );
    grad_f_ref
}

/// Inference path: retrieve style from the unaugmented features and
/// calibrate onto it.
pub fn rdc_inference<F: Real>(
    f_ref: &Tensor<F>,
    bank: &StyleMemoryBank<F>,
    cfg: &RdcConfig,
    valid: &Mask,
) -> Result<Tensor<F>, RdcError> {
    let style = retrieve_style(f_ref, bank, cfg, valid)?;
    calibrate(f_ref, &style.stats, valid)
}
