//! Segmentation network, loss assembly, and training loop.
//!
//! The model reads the five projected planes, runs them through either a
//! single merged stem (baseline) or split geometric/reflectance stems,
//! optionally applies abnormality suppression to the geometric branch and
//! style calibration to the reflectance branch, fuses by elementwise sum,
//! and finishes with a small encoder-decoder plus a pixelwise head.
//!
//! Training minimizes `L_SEG + w_gas * L_GAS + w_rdc * L_RDC` with AdamW
//! and a one-cycle learning-rate schedule. Everything is deterministic
//! given the master seed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::classes;
use crate::gas::{
    gas_loss_scaled, gas_weight, gas_weight_backward, GasConfig, GasError, GasParams,
};
use crate::kernels::{
    conv3x3_backward, conv3x3_forward, cross_entropy, leaky_relu_backward, leaky_relu_forward,
    linear_pixelwise_backward, linear_pixelwise_forward, mask_channels, upsample2_backward,
    upsample2_forward, KernelError,
};
use crate::projection::NUM_PLANES;
use crate::rdc::{
    calibrate, rdc_backward_train_scaled, rdc_forward_train, rdc_inference, retrieve_style,
    RdcConfig, RdcError, StyleMemoryBank,
};
use crate::real::{real, Real};
use crate::rng::stream;
use crate::tensor::{LabelImage, Mask, ParamRole, ParamTensor, Tensor};

/// Planes 0..3 (x, y, z, depth) feed the geometric stem.
pub const GEO_PLANES: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetError {
    #[error("{what} = {value} is invalid: {why}")]
    BadConfig {
        what: &'static str,
        value: f64,
        why: &'static str,
    },
    #[error("input is {got_h}x{got_w} but the backbone needs H and W divisible by 4")]
    BadInputSize { got_h: usize, got_w: usize },
    #[error("expected {expected} input planes, got {got}")]
    BadPlaneCount { expected: usize, got: usize },
    #[error("{toggle} is enabled but the model was built without its parameters")]
    ToggleWithoutParams { toggle: &'static str },
    #[error("no training samples")]
    NoSamples,
    #[error("non-finite loss at epoch {epoch}, step {step}; batch images {batch:?}")]
    NonFinite {
        epoch: usize,
        step: usize,
        batch: Vec<usize>,
    },
    #[error(transparent)]
    Gas(#[from] GasError),
    #[error(transparent)]
    Rdc(#[from] RdcError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Stem output channels (C); both branches and the fused map use it.
    pub stem_channels: usize,
    /// Channel widths after the two stride-2 stages.
    pub enc_channels: (usize, usize),
    /// Predicted classes; the ignore id is never predicted.
    pub num_classes: usize,
    /// Label excluded from the segmentation loss.
    pub ignore_label: u16,
    pub leaky_slope: f64,
    /// One stem over all five planes (false) or geometric + reflectance
    /// stems (true). GAS and RDC require split stems.
    pub split_stems: bool,
    pub use_gas: bool,
    pub use_rdc: bool,
    pub gas: GasConfig,
    pub rdc: RdcConfig,
    pub gas_loss_weight: f64,
    pub rdc_loss_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stem_channels: 32,
            enc_channels: (64, 128),
            num_classes: classes::NUM_FOREGROUND,
            ignore_label: classes::IGNORE,
            leaky_slope: 0.1,
            split_stems: true,
            use_gas: true,
            use_rdc: true,
            gas: GasConfig::default(),
            rdc: RdcConfig::default(),
            gas_loss_weight: 1.0,
            rdc_loss_weight: 1.0,
        }
    }
}

impl ModelConfig {
    /// Merged stem, no GAS, no RDC; the capacity-fair comparison model.
    pub fn baseline() -> Self {
        ModelConfig {
            split_stems: false,
            use_gas: false,
            use_rdc: false,
            ..ModelConfig::default()
        }
    }

    pub fn with_toggles(&self, split_stems: bool, use_gas: bool, use_rdc: bool) -> Self {
        ModelConfig {
            split_stems,
            use_gas,
            use_rdc,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.stem_channels == 0 {
            return Err(NetError::BadConfig {
                what: "stem_channels",
                value: 0.0,
                why: "must be at least 1",
            });
        }
        if self.enc_channels.0 == 0 || self.enc_channels.1 == 0 {
            return Err(NetError::BadConfig {
                what: "enc_channels",
                value: 0.0,
                why: "must be at least 1",
            });
        }
        if self.num_classes < 2 {
            return Err(NetError::BadConfig {
                what: "num_classes",
                value: self.num_classes as f64,
                why: "need at least 2 classes",
            });
        }
        if (self.use_gas || self.use_rdc) && !self.split_stems {
            return Err(NetError::BadConfig {
                what: "split_stems",
                value: 0.0,
                why: "GAS and RDC act on separate stems; enable split_stems",
            });
        }
        for (name, w) in [
            ("gas_loss_weight", self.gas_loss_weight),
            ("rdc_loss_weight", self.rdc_loss_weight),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(NetError::BadConfig {
                    what: name,
                    value: w,
                    why: "loss weights must be finite and nonnegative",
                });
            }
        }
        self.gas.validate()?;
        self.rdc.validate()?;
        Ok(())
    }
}

/// One ablation row: which structural toggles are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub name: &'static str,
    pub split_stems: bool,
    pub use_gas: bool,
    pub use_rdc: bool,
}

/// Toggle grid for the ablation harness, baseline first, full model last.
pub const ABLATION_VARIANTS: [VariantSpec; 5] = [
    VariantSpec {
        name: "baseline",
        split_stems: false,
        use_gas: false,
        use_rdc: false,
    },
    VariantSpec {
        name: "split",
        split_stems: true,
        use_gas: false,
        use_rdc: false,
    },
    VariantSpec {
        name: "split+gas",
        split_stems: true,
        use_gas: true,
        use_rdc: false,
    },
    VariantSpec {
        name: "split+rdc",
        split_stems: true,
        use_gas: false,
        use_rdc: true,
    },
    VariantSpec {
        name: "full",
        split_stems: true,
        use_gas: true,
        use_rdc: true,
    },
];

#[derive(Debug, Clone)]
pub struct ConvLayer<F> {
    pub w: ParamTensor<F>,
    pub b: ParamTensor<F>,
}

impl<F: Real> ConvLayer<F> {
    fn conv3x3<R: Rng + ?Sized>(ci: usize, co: usize, rng: &mut R) -> Self {
        let std = (2.0 / (ci * 9) as f64).sqrt();
        let mut w = ParamTensor::zeros(&[co, ci, 3, 3], ParamRole::Weight);
        for v in w.value_mut() {
            *v = F::standard_normal(rng) * real::<F>(std);
        }
        ConvLayer {
            w,
            b: ParamTensor::zeros(&[co], ParamRole::Bias),
        }
    }

    fn linear<R: Rng + ?Sized>(ci: usize, co: usize, rng: &mut R) -> Self {
        let std = (1.0 / ci as f64).sqrt();
        let mut w = ParamTensor::zeros(&[co, ci], ParamRole::Weight);
        for v in w.value_mut() {
            *v = F::standard_normal(rng) * real::<F>(std);
        }
        ConvLayer {
            w,
            b: ParamTensor::zeros(&[co], ParamRole::Bias),
        }
    }
}

#[derive(Debug, Clone)]
pub enum StemParams<F> {
    Merged(Vec<ConvLayer<F>>),
    Split {
        geo: Vec<ConvLayer<F>>,
        refl: Vec<ConvLayer<F>>,
    },
}

#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    pub stems: StemParams<F>,
    pub gas: Option<GasParams<F>>,
    pub bank: Option<StyleMemoryBank<F>>,
    pub enc1: ConvLayer<F>,
    pub enc2: ConvLayer<F>,
    pub mid: ConvLayer<F>,
    pub up1: ConvLayer<F>,
    pub up2: ConvLayer<F>,
    pub head: ConvLayer<F>,
}

impl<F: Real> ModelParams<F> {
    /// Walk every parameter tensor in a fixed order; the optimizer and the
    /// checkpoint format both rely on this order being stable.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &ParamTensor<F>)) {
        let mut layers = |name: &str, ls: &[ConvLayer<F>]| {
            for (i, l) in ls.iter().enumerate() {
                f(&format!("{name}{i}.w"), &l.w);
                f(&format!("{name}{i}.b"), &l.b);
            }
        };
        match &self.stems {
            StemParams::Merged(ls) => layers("stem_m", ls),
            StemParams::Split { geo, refl } => {
                layers("stem_g", geo);
                layers("stem_r", refl);
            }
        }
        if let Some(gas) = &self.gas {
            for (i, (w, b)) in gas.layers.iter().enumerate() {
                f(&format!("gas{i}.w"), w);
                f(&format!("gas{i}.b"), b);
            }
        }
        if let Some(bank) = &self.bank {
            f("bank", &bank.rows);
        }
        for (name, l) in [
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("mid", &self.mid),
            ("up1", &self.up1),
            ("up2", &self.up2),
            ("head", &self.head),
        ] {
            f(&format!("{name}.w"), &l.w);
            f(&format!("{name}.b"), &l.b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ParamTensor<F>)) {
        let mut layers = |name: &str, ls: &mut [ConvLayer<F>]| {
            for (i, l) in ls.iter_mut().enumerate() {
                f(&format!("{name}{i}.w"), &mut l.w);
                f(&format!("{name}{i}.b"), &mut l.b);
            }
        };
        match &mut self.stems {
            StemParams::Merged(ls) => layers("stem_m", ls),
            StemParams::Split { geo, refl } => {
                layers("stem_g", geo);
                layers("stem_r", refl);
            }
        }
        if let Some(gas) = &mut self.gas {
            for (i, (w, b)) in gas.layers.iter_mut().enumerate() {
                f(&format!("gas{i}.w"), w);
                f(&format!("gas{i}.b"), b);
            }
        }
        if let Some(bank) = &mut self.bank {
            f("bank", &mut bank.rows);
        }
        for (name, l) in [
            ("enc1", &mut self.enc1),
            ("enc2", &mut self.enc2),
            ("mid", &mut self.mid),
            ("up1", &mut self.up1),
            ("up2", &mut self.up2),
            ("head", &mut self.head),
        ] {
            f(&format!("{name}.w"), &mut l.w);
            f(&format!("{name}.b"), &mut l.b);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.len());
        n
    }

    pub fn zero_grads(&mut self) {
        self.visit_mut(&mut |_, p| p.zero_grad());
    }
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub params: ModelParams<F>,
}

impl<F: Real> Model<F> {
    /// Deterministic initialization: every tensor draws from its own named
    /// stream of the master seed, so layout changes elsewhere cannot shift
    /// the values.
    pub fn init(cfg: ModelConfig, master_seed: u64) -> Result<Self, NetError> {
        cfg.validate()?;
        let c = cfg.stem_channels;
        let (c1, c2) = cfg.enc_channels;
        let conv = |name: &str, ci: usize, co: usize| {
            ConvLayer::conv3x3(ci, co, &mut stream(master_seed, name, &[]))
        };

        let stems = if cfg.split_stems {
            StemParams::Split {
                geo: vec![
                    conv("init.stem_g0", GEO_PLANES, c),
                    conv("init.stem_g1", c, c),
                ],
                refl: vec![
                    conv("init.stem_r0", NUM_PLANES - GEO_PLANES, c),
                    conv("init.stem_r1", c, c),
                ],
            }
        } else {
            StemParams::Merged(vec![
                conv("init.stem_m0", NUM_PLANES, c),
                conv("init.stem_m1", c, c),
            ])
        };
        let gas = if cfg.use_gas {
            Some(GasParams::init(
                c,
                &cfg.gas,
                &mut stream(master_seed, "init.gas", &[]),
            )?)
        } else {
            None
        };
        let bank = if cfg.use_rdc {
            Some(StyleMemoryBank::init(
                cfg.rdc.bank_rows,
                c,
                &mut stream(master_seed, "init.bank", &[]),
            )?)
        } else {
            None
        };
        let params = ModelParams {
            stems,
            gas,
            bank,
            enc1: conv("init.enc1", c, c1),
            enc2: conv("init.enc2", c1, c2),
            mid: conv("init.mid", c2, c2),
            up1: conv("init.up1", c2, c1),
            up2: conv("init.up2", c1, c),
            head: ConvLayer::linear(c, cfg.num_classes, &mut stream(master_seed, "init.head", &[])),
        };
        Ok(Model { cfg, params })
    }
}

/// Elementwise-sum fusion of the two branch maps.
pub fn fuse<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

/// Copy a contiguous channel range into its own tensor.
fn select_channels<F: Real>(t: &Tensor<F>, lo: usize, hi: usize) -> Tensor<F> {
    let (_, h, w) = t.shape();
    let mut out = Tensor::zeros(hi - lo, h, w);
    for c in lo..hi {
        out.channel_mut(c - lo).copy_from_slice(t.channel(c));
    }
    out
}

/// Intermediates of one stem pass: conv input and pre-activation per layer.
struct StemCtx<F> {
    inputs: Vec<Tensor<F>>,
    pre_acts: Vec<Tensor<F>>,
}

fn stem_forward<F: Real>(
    layers: &[ConvLayer<F>],
    input: &Tensor<F>,
    valid: &Mask,
    slope: F,
) -> Result<(Tensor<F>, StemCtx<F>), NetError> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre_acts = Vec::with_capacity(layers.len());
    let mut x = input.clone();
    for layer in layers {
        let pre = conv3x3_forward(&x, &layer.w, &layer.b, 1)?;
        inputs.push(x);
        x = leaky_relu_forward(&pre, slope);
        pre_acts.push(pre);
    }
    mask_channels(&mut x, valid);
    Ok((x, StemCtx { inputs, pre_acts }))
}

/// Gradient through a stem; invalid pixels were zeroed after the last
/// activation, so their gradient is cut before entering the layers.
fn stem_backward<F: Real>(
    layers: &mut [ConvLayer<F>],
    ctx: &StemCtx<F>,
    valid: &Mask,
    slope: F,
    grad_out: &Tensor<F>,
) {
    let mut g = grad_out.clone();
    mask_channels(&mut g, valid);
    for (layer, (input, pre)) in layers
        .iter_mut()
        .zip(ctx.inputs.iter().zip(&ctx.pre_acts))
        .rev()
    {
        g = leaky_relu_backward(pre, &g, slope);
        g = conv3x3_backward(input, &mut layer.w, &mut layer.b, &g, 1);
    }
}

/// Intermediates of one backbone pass.
#[derive(Debug)]
struct BackboneCtx<F> {
    fused: Tensor<F>,
    e1_pre: Tensor<F>,
    e1: Tensor<F>,
    e2_pre: Tensor<F>,
    e2: Tensor<F>,
    m_pre: Tensor<F>,
    u1_up: Tensor<F>,
    u1_pre: Tensor<F>,
    u2_up: Tensor<F>,
    u2_pre: Tensor<F>,
    u2: Tensor<F>,
}

fn backbone_forward<F: Real>(
    p: &ModelParams<F>,
    fused: Tensor<F>,
    slope: F,
) -> Result<(Tensor<F>, BackboneCtx<F>), NetError> {
    let (_, h, w) = fused.shape();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(NetError::BadInputSize { got_h: h, got_w: w });
    }
    let e1_pre = conv3x3_forward(&fused, &p.enc1.w, &p.enc1.b, 2)?;
    let e1 = leaky_relu_forward(&e1_pre, slope);
    let e2_pre = conv3x3_forward(&e1, &p.enc2.w, &p.enc2.b, 2)?;
    let e2 = leaky_relu_forward(&e2_pre, slope);
    let m_pre = conv3x3_forward(&e2, &p.mid.w, &p.mid.b, 1)?;
    let m = leaky_relu_forward(&m_pre, slope);
    let u1_up = upsample2_forward(&m);
    let u1_pre = conv3x3_forward(&u1_up, &p.up1.w, &p.up1.b, 1)?;
    let u1 = fuse(&leaky_relu_forward(&u1_pre, slope), &e1);
    let u2_up = upsample2_forward(&u1);
    let u2_pre = conv3x3_forward(&u2_up, &p.up2.w, &p.up2.b, 1)?;
    let u2 = fuse(&leaky_relu_forward(&u2_pre, slope), &fused);
    let logits = linear_pixelwise_forward(&u2, &p.head.w, &p.head.b)?;
    Ok((
        logits,
        BackboneCtx {
            fused,
            e1_pre,
            e1,
            e2_pre,
            e2,
            m_pre,
            u1_up,
            u1_pre,
            u2_up,
            u2_pre,
            u2,
        },
    ))
}

fn backbone_backward<F: Real>(
    p: &mut ModelParams<F>,
    ctx: &BackboneCtx<F>,
    slope: F,
    grad_logits: &Tensor<F>,
) -> Tensor<F> {
    let g_u2 = linear_pixelwise_backward(&ctx.u2, &mut p.head.w, &mut p.head.b, grad_logits);
    let grad_fused_skip = g_u2.clone();
    let g = leaky_relu_backward(&ctx.u2_pre, &g_u2, slope);
    let g = conv3x3_backward(&ctx.u2_up, &mut p.up2.w, &mut p.up2.b, &g, 1);
    let g_u1 = upsample2_backward(&g);
    let g_e1_skip = g_u1.clone();
    let g = leaky_relu_backward(&ctx.u1_pre, &g_u1, slope);
    let g = conv3x3_backward(&ctx.u1_up, &mut p.up1.w, &mut p.up1.b, &g, 1);
    let g_m = upsample2_backward(&g);
    let g = leaky_relu_backward(&ctx.m_pre, &g_m, slope);
    let g_e2 = conv3x3_backward(&ctx.e2, &mut p.mid.w, &mut p.mid.b, &g, 1);
    let g = leaky_relu_backward(&ctx.e2_pre, &g_e2, slope);
    let mut g_e1 = conv3x3_backward(&ctx.e1, &mut p.enc2.w, &mut p.enc2.b, &g, 2);
    g_e1.add_assign(&g_e1_skip);
    let g = leaky_relu_backward(&ctx.e1_pre, &g_e1, slope);
    let mut g_fused = conv3x3_backward(&ctx.fused, &mut p.enc1.w, &mut p.enc1.b, &g, 2);
    g_fused.add_assign(&grad_fused_skip);
    g_fused
}

/// One training sample: standardized planes, validity, pixel labels.
#[derive(Debug, Clone)]
pub struct TrainSample<F> {
    pub planes: Tensor<F>,
    pub valid: Mask,
    pub labels: LabelImage,
}

/// Loss parts for one image; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageLosses<F> {
    pub total: F,
    pub seg: F,
    pub gas: F,
    pub rdc: F,
}

impl<F: Real> Model<F> {
    fn check_planes(&self, planes: &Tensor<F>) -> Result<(), NetError> {
        if planes.channels() != NUM_PLANES {
            return Err(NetError::BadPlaneCount {
                expected: NUM_PLANES,
                got: planes.channels(),
            });
        }
        Ok(())
    }

    /// Forward + backward on one image. Parameter gradients accumulate
    /// unscaled; the optimizer divides by the batch size.
    pub fn train_image<R: Rng + ?Sized>(
        &mut self,
        sample: &TrainSample<F>,
        rng: &mut R,
    ) -> Result<ImageLosses<F>, NetError> {
        self.check_planes(&sample.planes)?;
        let slope = real::<F>(self.cfg.leaky_slope);
        let valid = &sample.valid;
        let w_gas = real::<F>(self.cfg.gas_loss_weight);
        let w_rdc = real::<F>(self.cfg.rdc_loss_weight);

        enum StemRun<F> {
            Merged(StemCtx<F>),
            Split {
                geo_ctx: StemCtx<F>,
                refl_ctx: StemCtx<F>,
            },
        }

        // Stems.
        let (fused_input, stem_run, l_gas, l_rdc, gas_w_ctx, rdc_ctx) =
            match &self.params.stems {
                StemParams::Merged(layers) => {
                    let (f, ctx) = stem_forward(layers, &sample.planes, valid, slope)?;
                    (f, StemRun::Merged(ctx), F::zero(), F::zero(), None, None)
                }
                StemParams::Split { geo, refl } => {
                    let geo_in = select_channels(&sample.planes, 0, GEO_PLANES);
                    let refl_in = select_channels(&sample.planes, GEO_PLANES, NUM_PLANES);
                    let (f_geo, geo_ctx) = stem_forward(geo, &geo_in, valid, slope)?;
                    let (f_ref, refl_ctx) = stem_forward(refl, &refl_in, valid, slope)?;

                    let mut l_gas = F::zero();
                    let mut gas_w_ctx = None;
                    let mut f_hat_geo = f_geo.clone();
                    if self.cfg.use_gas {
                        let gas = self
                            .params
                            .gas
                            .as_mut()
                            .ok_or(NetError::ToggleWithoutParams { toggle: "use_gas" })?;
                        let out =
                            gas_loss_scaled(&f_geo, gas, &self.cfg.gas, valid, w_gas, rng)?;
                        l_gas = out.loss;
                        if self.cfg.gas.weight_in_training {
                            let (weighted, ctx) = gas_weight(&f_geo, gas, &self.cfg.gas, valid)?;
                            f_hat_geo = weighted;
                            gas_w_ctx = Some((Some(ctx), out.grad_f_geo));
                        } else {
                            gas_w_ctx = Some((None, out.grad_f_geo));
                        }
                    }

                    let mut l_rdc = F::zero();
                    let mut rdc_ctx = None;
                    let mut f_hat_ref = f_ref.clone();
                    if self.cfg.use_rdc {
                        let bank = self
                            .params
                            .bank
                            .as_ref()
                            .ok_or(NetError::ToggleWithoutParams { toggle: "use_rdc" })?;
                        let (out, ctx) =
                            rdc_forward_train(&f_ref, bank, &self.cfg.rdc, valid, rng)?;
                        l_rdc = out.l_rdc;
                        f_hat_ref = out.f_hat;
                        rdc_ctx = Some(ctx);
                    }

                    (
                        fuse(&f_hat_geo, &f_hat_ref),
                        StemRun::Split { geo_ctx, refl_ctx },
                        l_gas,
                        l_rdc,
                        gas_w_ctx,
                        rdc_ctx,
                    )
                }
            };

        // Backbone, head, segmentation loss.
        let (logits, bb_ctx) = backbone_forward(&self.params, fused_input, slope)?;
        let include = seg_include_mask(valid, &sample.labels, self.cfg.ignore_label);
        let (l_seg, grad_logits) = cross_entropy(&logits, &sample.labels, &include)?;

        // Backward.
        let grad_fused = backbone_backward(&mut self.params, &bb_ctx, slope, &grad_logits);
        match stem_run {
            StemRun::Merged(ctx) => {
                if let StemParams::Merged(layers) = &mut self.params.stems {
                    stem_backward(layers, &ctx, valid, slope, &grad_fused);
                }
            }
            StemRun::Split { geo_ctx, refl_ctx } => {
                // Geometric branch: fusion gradient through the weighting
                // (when applied), plus the abnormality-loss gradient.
                let mut grad_f_geo = match gas_w_ctx {
                    Some((Some(w_ctx), loss_grad)) => {
                        let gas = self.params.gas.as_mut().expect("gas params checked");
                        let mut g =
                            gas_weight_backward(gas, &self.cfg.gas, &w_ctx, &grad_fused);
                        g.add_assign(&loss_grad);
                        g
                    }
                    Some((None, loss_grad)) => {
                        let mut g = grad_fused.clone();
                        g.add_assign(&loss_grad);
                        g
                    }
                    None => grad_fused.clone(),
                };
                mask_channels(&mut grad_f_geo, valid);

                // Reflectance branch: fusion gradient through calibration.
                let mut grad_f_ref = match rdc_ctx {
                    Some(ctx) => {
                        let bank = self.params.bank.as_mut().expect("bank params checked");
                        rdc_backward_train_scaled(
                            bank,
                            &self.cfg.rdc,
                            &ctx,
                            Some(&grad_fused),
                            w_rdc,
                        )
                    }
                    None => grad_fused,
                };
                mask_channels(&mut grad_f_ref, valid);

                if let StemParams::Split { geo, refl } = &mut self.params.stems {
                    stem_backward(geo, &geo_ctx, valid, slope, &grad_f_geo);
                    stem_backward(refl, &refl_ctx, valid, slope, &grad_f_ref);
                }
            }
        }

        Ok(ImageLosses {
            total: l_seg + w_gas * l_gas + w_rdc * l_rdc,
            seg: l_seg,
            gas: l_gas,
            rdc: l_rdc,
        })
    }

    /// Inference forward pass: no losses, no gradients; GAS weighting and
    /// RDC calibration apply whenever their toggles are on.
    pub fn forward_eval(&self, planes: &Tensor<F>, valid: &Mask) -> Result<Tensor<F>, NetError> {
        self.check_planes(planes)?;
        let slope = real::<F>(self.cfg.leaky_slope);
        let fused = match &self.params.stems {
            StemParams::Merged(layers) => stem_forward(layers, planes, valid, slope)?.0,
            StemParams::Split { geo, refl } => {
                let geo_in = select_channels(planes, 0, GEO_PLANES);
                let refl_in = select_channels(planes, GEO_PLANES, NUM_PLANES);
                let (f_geo, _) = stem_forward(geo, &geo_in, valid, slope)?;
                let (f_ref, _) = stem_forward(refl, &refl_in, valid, slope)?;
                let f_hat_geo = if self.cfg.use_gas {
                    let gas = self
                        .params
                        .gas
                        .as_ref()
                        .ok_or(NetError::ToggleWithoutParams { toggle: "use_gas" })?;
                    gas_weight(&f_geo, gas, &self.cfg.gas, valid)?.0
                } else {
                    f_geo
                };
                let f_hat_ref = if self.cfg.use_rdc {
                    let bank = self
                        .params
                        .bank
                        .as_ref()
                        .ok_or(NetError::ToggleWithoutParams { toggle: "use_rdc" })?;
                    rdc_inference(&f_ref, bank, &self.cfg.rdc, valid)?
                } else {
                    f_ref
                };
                fuse(&f_hat_geo, &f_hat_ref)
            }
        };
        Ok(backbone_forward(&self.params, fused, slope)?.0)
    }

    /// Per-pixel argmax over the class logits.
    pub fn predict(&self, planes: &Tensor<F>, valid: &Mask) -> Result<LabelImage, NetError> {
        let logits = self.forward_eval(planes, valid)?;
        let (k, h, w) = logits.shape();
        let mut out = LabelImage::filled(h, w, 0);
        for p in 0..h * w {
            let mut best = 0usize;
            let mut best_v = logits.channel(0)[p];
            for c in 1..k {
                let v = logits.channel(c)[p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out.as_slice_mut()[p] = best as u16;
        }
        Ok(out)
    }

    /// Geometric-stem features, for analysis outside the training loop.
    /// Split-stem models only.
    pub fn geo_stem_features(
        &self,
        planes: &Tensor<F>,
        valid: &Mask,
    ) -> Result<Tensor<F>, NetError> {
        self.check_planes(planes)?;
        let slope = real::<F>(self.cfg.leaky_slope);
        match &self.params.stems {
            StemParams::Split { geo, .. } => {
                let geo_in = select_channels(planes, 0, GEO_PLANES);
                Ok(stem_forward(geo, &geo_in, valid, slope)?.0)
            }
            StemParams::Merged(_) => Err(NetError::ToggleWithoutParams {
                toggle: "split_stems",
            }),
        }
    }

    /// Like [`forward_eval`](Self::forward_eval) but also hands back the
    /// module intermediates worth looking at: the abnormality weight map
    /// and the memory attention. Both are `None` when the corresponding
    /// toggle is off or the stem is merged.
    pub fn forward_inspect(
        &self,
        planes: &Tensor<F>,
        valid: &Mask,
    ) -> Result<InspectOut<F>, NetError> {
        self.check_planes(planes)?;
        let slope = real::<F>(self.cfg.leaky_slope);
        let mut w_plus = None;
        let mut attention = None;
        let fused = match &self.params.stems {
            StemParams::Merged(layers) => stem_forward(layers, planes, valid, slope)?.0,
            StemParams::Split { geo, refl } => {
                let geo_in = select_channels(planes, 0, GEO_PLANES);
                let refl_in = select_channels(planes, GEO_PLANES, NUM_PLANES);
                let (f_geo, _) = stem_forward(geo, &geo_in, valid, slope)?;
                let (f_ref, _) = stem_forward(refl, &refl_in, valid, slope)?;
                let f_hat_geo = if self.cfg.use_gas {
                    let gas = self
                        .params
                        .gas
                        .as_ref()
                        .ok_or(NetError::ToggleWithoutParams { toggle: "use_gas" })?;
                    let (f_hat, ctx) = gas_weight(&f_geo, gas, &self.cfg.gas, valid)?;
                    let (_, h, w) = f_geo.shape();
                    let mut map = Tensor::zeros(1, h, w);
                    map.channel_mut(0).copy_from_slice(ctx.w_plus());
                    w_plus = Some(map);
                    f_hat
                } else {
                    f_geo
                };
                let f_hat_ref = if self.cfg.use_rdc {
                    let bank = self
                        .params
                        .bank
                        .as_ref()
                        .ok_or(NetError::ToggleWithoutParams { toggle: "use_rdc" })?;
                    let style = retrieve_style(&f_ref, bank, &self.cfg.rdc, valid)?;
                    let out = calibrate(&f_ref, &style.stats, valid)?;
                    attention = Some(style.attention);
                    out
                } else {
                    f_ref
                };
                fuse(&f_hat_geo, &f_hat_ref)
            }
        };
        let logits = backbone_forward(&self.params, fused, slope)?.0;
        Ok(InspectOut {
            logits,
            w_plus,
            attention,
        })
    }
}

/// Eval-time intermediates exposed for qualitative rendering.
#[derive(Debug, Clone)]
pub struct InspectOut<F> {
    pub logits: Tensor<F>,
    /// `1 x H x W` normal-probability weight, zero at invalid pixels.
    pub w_plus: Option<Tensor<F>>,
    /// `T x H x W` attention over memory rows.
    pub attention: Option<Tensor<F>>,
}

/// Pixels that count toward the segmentation loss: valid and not ignore.
pub fn seg_include_mask(valid: &Mask, labels: &LabelImage, ignore: u16) -> Mask {
    let (h, w) = (valid.height(), valid.width());
    let mut out = valid.clone();
    for (keep, &l) in out.as_slice_mut().iter_mut().zip(labels.as_slice()) {
        if l == ignore {
            *keep = false;
        }
    }
    debug_assert_eq!((labels.height(), labels.width()), (h, w));
    out
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

/// AdamW with decoupled weight decay. Decay applies to weights and memory
/// rows, never to biases, and is multiplied by the current learning rate.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over every parameter. `grad_scale` folds the batch
    /// average into the step (gradients accumulate unscaled).
    pub fn step(&mut self, params: &mut ModelParams<F>, lr: f64, grad_scale: f64) {
        if self.m.is_empty() {
            params.visit(&mut |_, p| {
                self.m.push(vec![F::zero(); p.len()]);
                self.v.push(vec![F::zero(); p.len()]);
            });
        }
        self.step += 1;
        let b1 = real::<F>(self.beta1);
        let b2 = real::<F>(self.beta2);
        let one = F::one();
        let corr1 = real::<F>(1.0 - self.beta1.powi(self.step as i32));
        let corr2 = real::<F>(1.0 - self.beta2.powi(self.step as i32));
        let eps = real::<F>(self.eps);
        let lr_f = real::<F>(lr);
        let scale = real::<F>(grad_scale);
        let mut idx = 0usize;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, p| {
            let decay = match p.role() {
                ParamRole::Weight | ParamRole::Memory => real::<F>(self.weight_decay),
                ParamRole::Bias => F::zero(),
            };
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            let grads = p.grad().to_vec();
            for (i, (val, g0)) in p.value_mut().iter_mut().zip(grads).enumerate() {
                let g = g0 * scale;
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                *val = *val - lr_f * (m_hat / (v_hat.sqrt() + eps) + decay * *val);
            }
            idx += 1;
        });
    }
}

/// One-cycle learning rate: linear warmup from peak/25 to the peak at 30%
/// of the steps, then cosine decay to peak/100 at the last step.
pub fn onecycle_lr(peak: f64, step: usize, total_steps: usize) -> f64 {
    debug_assert!(total_steps >= 1);
    let start = peak / 25.0;
    let end = peak / 100.0;
    let last = (total_steps - 1) as f64;
    let warm_end = (0.3 * last).round();
    let s = (step as f64).min(last);
    if s <= warm_end {
        if warm_end == 0.0 {
            return start;
        }
        start + (peak - start) * (s / warm_end)
    } else {
        let frac = (s - warm_end) / (last - warm_end);
        end + (peak - end) * 0.5 * (1.0 + (core::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub master_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            peak_lr: 0.0025,
            weight_decay: 0.01,
            master_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.epochs == 0 {
            return Err(NetError::BadConfig {
                what: "epochs",
                value: 0.0,
                why: "must be at least 1",
            });
        }
        if self.batch_size == 0 {
            return Err(NetError::BadConfig {
                what: "batch_size",
                value: 0.0,
                why: "must be at least 1",
            });
        }
        if !self.peak_lr.is_finite() || self.peak_lr < 0.0 {
            return Err(NetError::BadConfig {
                what: "peak_lr",
                value: self.peak_lr,
                why: "must be finite and nonnegative",
            });
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(NetError::BadConfig {
                what: "weight_decay",
                value: self.weight_decay,
                why: "must be finite and nonnegative",
            });
        }
        Ok(())
    }
}

/// Mean loss parts over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub total: f64,
    pub seg: f64,
    pub gas: f64,
    pub rdc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<EpochLoss>,
    pub optimizer_steps: usize,
}

/// Full training run: shuffled batches, AdamW, one-cycle schedule. A
/// non-finite loss aborts with the offending epoch, step, and batch.
pub fn train<F: Real>(
    model: &mut Model<F>,
    samples: &[TrainSample<F>],
    cfg: &TrainConfig,
) -> Result<TrainReport, NetError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(NetError::NoSamples);
    }
    let n = samples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        optimizer_steps: 0,
    };

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = stream(cfg.master_seed, "train.shuffle", &[epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        let mut sums = EpochLoss {
            total: 0.0,
            seg: 0.0,
            gas: 0.0,
            rdc: 0.0,
        };
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.params.zero_grads();
            for &i in batch {
                let mut rng = stream(
                    cfg.master_seed,
                    "train.noise",
                    &[epoch as u64, step as u64, i as u64],
                );
                let losses = model.train_image(&samples[i], &mut rng)?;
                if !losses.total.as_f64().is_finite() {
                    return Err(NetError::NonFinite {
                        epoch,
                        step,
                        batch: batch.to_vec(),
                    });
                }
                sums.total += losses.total.as_f64();
                sums.seg += losses.seg.as_f64();
                sums.gas += losses.gas.as_f64();
                sums.rdc += losses.rdc.as_f64();
            }
            let lr = onecycle_lr(cfg.peak_lr, report.optimizer_steps, total_steps);
            opt.step(&mut model.params, lr, 1.0 / batch.len() as f64);
            report.optimizer_steps += 1;
        }
        let inv = 1.0 / n as f64;
        report.epoch_losses.push(EpochLoss {
            total: sums.total * inv,
            seg: sums.seg * inv,
            gas: sums.gas * inv,
            rdc: sums.rdc * inv,
        });
    }
    Ok(report)
}
