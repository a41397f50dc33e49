use super::gradcheck::{central_diff_check, DEFAULT_STEP, DEFAULT_TOL};
use super::*;
use crate::real::Real;
use crate::rng::stream;
use crate::tensor::{LabelImage, Mask, ParamRole, ParamTensor, Tensor};

fn randn_tensor(c: usize, h: usize, w: usize, name: &str) -> Tensor<f64> {
    let mut rng = stream(7, name, &[]);
    Tensor::from_fn(c, h, w, |_, _, _| f64::standard_normal(&mut rng))
}

fn randn_vec(n: usize, name: &str) -> Vec<f64> {
    let mut rng = stream(7, name, &[]);
    (0..n).map(|_| f64::standard_normal(&mut rng)).collect()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn param(shape: &[usize], role: ParamRole, name: &str) -> ParamTensor<f64> {
    let n: usize = shape.iter().product();
    ParamTensor::from_values(shape, role, randn_vec(n, name))
}

#[test]
fn linear_pixelwise_matches_hand_example() {
    let input = Tensor::from_vec(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]);
    let weight = ParamTensor::from_values(&[1, 2], ParamRole::Weight, vec![10.0, 100.0]);
    let bias = ParamTensor::from_values(&[1], ParamRole::Bias, vec![0.5]);
    let out = linear_pixelwise_forward(&input, &weight, &bias).unwrap();
    assert_eq!(out.data(), &[10.0 * 1.0 + 100.0 * 3.0 + 0.5, 10.0 * 2.0 + 100.0 * 4.0 + 0.5]);
}

#[test]
fn linear_pixelwise_rejects_channel_mismatch() {
    let input = Tensor::<f64>::zeros(3, 2, 2);
    let weight = ParamTensor::from_values(&[1, 2], ParamRole::Weight, vec![0.0; 2]);
    let bias = ParamTensor::from_values(&[1], ParamRole::Bias, vec![0.0]);
    assert!(linear_pixelwise_forward(&input, &weight, &bias).is_err());
}

#[test]
fn linear_pixelwise_gradients_match_finite_differences() {
    let input = randn_tensor(3, 2, 4, "lin-in");
    let weight = param(&[2, 3], ParamRole::Weight, "lin-w");
    let bias = param(&[2], ParamRole::Bias, "lin-b");
    let cot = randn_tensor(2, 2, 4, "lin-cot");

    let mut w = weight.clone();
    let mut b = bias.clone();
    let grad_in = linear_pixelwise_backward(&input, &mut w, &mut b, &cot);

    let mut x = input.data().to_vec();
    let rep = central_diff_check(&mut x, grad_in.data(), &[], DEFAULT_STEP, |x| {
        let t = Tensor::from_vec(3, 2, 4, x.to_vec());
        dot(&linear_pixelwise_forward(&t, &weight, &bias).unwrap(), &cot)
    });
    assert!(rep.passes(DEFAULT_TOL), "input defect {}", rep.max_defect);

    let mut x = weight.value().to_vec();
    let rep = central_diff_check(&mut x, w.grad(), &[], DEFAULT_STEP, |x| {
        let wt = ParamTensor::from_values(&[2, 3], ParamRole::Weight, x.to_vec());
        dot(&linear_pixelwise_forward(&input, &wt, &bias).unwrap(), &cot)
    });
    assert!(rep.passes(DEFAULT_TOL), "weight defect {}", rep.max_defect);

    let mut x = bias.value().to_vec();
    let rep = central_diff_check(&mut x, b.grad(), &[], DEFAULT_STEP, |x| {
        let bt = ParamTensor::from_values(&[2], ParamRole::Bias, x.to_vec());
        dot(&linear_pixelwise_forward(&input, &weight, &bt).unwrap(), &cot)
    });
    assert!(rep.passes(DEFAULT_TOL), "bias defect {}", rep.max_defect);
}

fn delta_kernel(co: usize, ci: usize, ky: usize, kx: usize) -> ParamTensor<f64> {
    let mut w = vec![0.0; co * ci * 9];
    for c in 0..co.min(ci) {
        w[((c * ci) + c) * 9 + ky * 3 + kx] = 1.0;
    }
    ParamTensor::from_values(&[co, ci, 3, 3], ParamRole::Weight, w)
}

#[test]
fn conv3x3_identity_kernel_is_identity() {
    let input = randn_tensor(2, 4, 6, "conv-id");
    let weight = delta_kernel(2, 2, 1, 1);
    let bias = ParamTensor::from_values(&[2], ParamRole::Bias, vec![0.0; 2]);
    let out = conv3x3_forward(&input, &weight, &bias, 1).unwrap();
    assert_eq!(out.data(), input.data());
}

#[test]
fn conv3x3_zero_kernel_yields_bias() {
    let input = randn_tensor(1, 3, 3, "conv-zero");
    let weight = ParamTensor::from_values(&[2, 1, 3, 3], ParamRole::Weight, vec![0.0; 18]);
    let bias = ParamTensor::from_values(&[2], ParamRole::Bias, vec![1.5, -2.0]);
    let out = conv3x3_forward(&input, &weight, &bias, 1).unwrap();
    assert!(out.channel(0).iter().all(|&v| v == 1.5));
    assert!(out.channel(1).iter().all(|&v| v == -2.0));
}

#[test]
fn conv3x3_shift_kernel_shifts_with_zero_padding() {
    // Tap (ky=1, kx=0) reads the left neighbor; column 0 sees the zero pad.
    let input = Tensor::from_vec(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]);
    let weight = delta_kernel(1, 1, 1, 0);
    let bias = ParamTensor::from_values(&[1], ParamRole::Bias, vec![0.0]);
    let out = conv3x3_forward(&input, &weight, &bias, 1).unwrap();
    assert_eq!(out.data(), &[0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn conv3x3_stride2_picks_even_grid() {
    let input = Tensor::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f64);
    let weight = delta_kernel(1, 1, 1, 1);
    let bias = ParamTensor::from_values(&[1], ParamRole::Bias, vec![0.0]);
    let out = conv3x3_forward(&input, &weight, &bias, 2).unwrap();
    assert_eq!(out.shape(), (1, 2, 2));
    assert_eq!(out.data(), &[0.0, 2.0, 8.0, 10.0]);
}

#[test]
fn conv3x3_rejects_bad_strides_and_odd_inputs() {
    let input = Tensor::<f64>::zeros(1, 4, 4);
    let weight = delta_kernel(1, 1, 1, 1);
    let bias = ParamTensor::from_values(&[1], ParamRole::Bias, vec![0.0]);
    assert!(matches!(
        conv3x3_forward(&input, &weight, &bias, 3),
        Err(KernelError::BadStride(3))
    ));
    let odd = Tensor::<f64>::zeros(1, 3, 4);
    assert!(matches!(
        conv3x3_forward(&odd, &weight, &bias, 2),
        Err(KernelError::OddStride2Input { .. })
    ));
}

#[test]
fn conv3x3_gradients_match_finite_differences() {
    for stride in [1usize, 2] {
        let input = randn_tensor(2, 4, 6, "conv-in");
        let weight = param(&[3, 2, 3, 3], ParamRole::Weight, "conv-w");
        let bias = param(&[3], ParamRole::Bias, "conv-b");
        let (oh, ow) = if stride == 1 { (4, 6) } else { (2, 3) };
        let cot = randn_tensor(3, oh, ow, "conv-cot");

        let mut w = weight.clone();
        let mut b = bias.clone();
        let grad_in = conv3x3_backward(&input, &mut w, &mut b, &cot, stride);

        let mut x = input.data().to_vec();
        let rep = central_diff_check(&mut x, grad_in.data(), &[], DEFAULT_STEP, |x| {
            let t = Tensor::from_vec(2, 4, 6, x.to_vec());
            dot(&conv3x3_forward(&t, &weight, &bias, stride).unwrap(), &cot)
        });
        assert!(rep.passes(DEFAULT_TOL), "stride {stride} input defect {}", rep.max_defect);

        let mut x = weight.value().to_vec();
        let rep = central_diff_check(&mut x, w.grad(), &[], DEFAULT_STEP, |x| {
            let wt = ParamTensor::from_values(&[3, 2, 3, 3], ParamRole::Weight, x.to_vec());
            dot(&conv3x3_forward(&input, &wt, &bias, stride).unwrap(), &cot)
        });
        assert!(rep.passes(DEFAULT_TOL), "stride {stride} weight defect {}", rep.max_defect);

        let mut x = bias.value().to_vec();
        let rep = central_diff_check(&mut x, b.grad(), &[], DEFAULT_STEP, |x| {
            let bt = ParamTensor::from_values(&[3], ParamRole::Bias, x.to_vec());
            dot(&conv3x3_forward(&input, &weight, &bt, stride).unwrap(), &cot)
        });
        assert!(rep.passes(DEFAULT_TOL), "stride {stride} bias defect {}", rep.max_defect);
    }
}

#[test]
fn leaky_relu_values_and_subgradient() {
    let input = Tensor::from_vec(1, 1, 3, vec![-2.0, 0.0, 3.0]);
    let out = leaky_relu_forward(&input, 0.1);
    assert_eq!(out.data(), &[-0.2, 0.0, 3.0]);
    let ones = Tensor::from_vec(1, 1, 3, vec![1.0; 3]);
    let grad = leaky_relu_backward(&input, &ones, 0.1);
    // x = 0 takes the positive branch.
    assert_eq!(grad.data(), &[0.1, 1.0, 1.0]);
}

#[test]
fn zero_invalid_masks_all_channels() {
    let input = Tensor::from_vec(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]);
    let mask = Mask::from_vec(1, 2, vec![true, false]);
    let out = zero_invalid(&input, &mask);
    assert_eq!(out.data(), &[1.0, 0.0, 3.0, 0.0]);
}

#[test]
fn softmax_matches_two_logit_oracle() {
    let logits = Tensor::from_vec(2, 1, 1, vec![1.0f64, -1.0]);
    let p = softmax_channel_forward(&logits);
    assert!((p.data()[0] - 0.8808).abs() < 1e-4);
    assert!((p.data()[1] - 0.1192).abs() < 1e-4);
}

#[test]
fn softmax_is_shift_invariant_and_normalized() {
    let logits = randn_tensor(5, 3, 4, "sm-shift");
    let mut shifted = logits.clone();
    for v in shifted.data_mut() {
        *v += 123.0;
    }
    let p = softmax_channel_forward(&logits);
    let q = softmax_channel_forward(&shifted);
    for (a, b) in p.data().iter().zip(q.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    for i in 0..12 {
        let s: f64 = (0..5).map(|c| p.channel(c)[i]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let logits = randn_tensor(4, 2, 3, "sm-in");
    let cot = randn_tensor(4, 2, 3, "sm-cot");
    let probs = softmax_channel_forward(&logits);
    let grad = softmax_channel_backward(&probs, &cot);
    let mut x = logits.data().to_vec();
    let rep = central_diff_check(&mut x, grad.data(), &[], DEFAULT_STEP, |x| {
        let t = Tensor::from_vec(4, 2, 3, x.to_vec());
        dot(&softmax_channel_forward(&t), &cot)
    });
    assert!(rep.passes(DEFAULT_TOL), "defect {}", rep.max_defect);
}

#[test]
fn channel_stats_matches_two_value_oracle() {
    let input = Tensor::from_vec(1, 1, 2, vec![1.0f64, 3.0]);
    let mask = Mask::new_true(1, 2);
    let stats = channel_stats(&input, &mask).unwrap();
    assert!((stats.mean[0] - 2.0).abs() < 1e-12);
    assert!((stats.std[0] - 1.0).abs() < 1e-12);
}

#[test]
fn channel_stats_floors_constant_channels() {
    let input = Tensor::from_vec(1, 1, 3, vec![4.0; 3]);
    let mask = Mask::new_true(1, 3);
    let stats = channel_stats(&input, &mask).unwrap();
    assert_eq!(stats.std[0], crate::tensor::EPS_FLOOR);
}

#[test]
fn channel_stats_ignores_invalid_pixels() {
    let input = Tensor::from_vec(1, 1, 3, vec![1.0f64, 100.0, 3.0]);
    let mask = Mask::from_vec(1, 3, vec![true, false, true]);
    let (stats, ctx) = channel_stats_with_ctx(&input, &mask).unwrap();
    assert_eq!(ctx.valid_count, 2);
    assert!((stats.mean[0] - 2.0).abs() < 1e-12);
    assert!((stats.std[0] - 1.0).abs() < 1e-12);
}

#[test]
fn channel_stats_rejects_empty_mask() {
    let input = Tensor::<f64>::zeros(1, 1, 3);
    let mask = Mask::new_false(1, 3);
    assert!(channel_stats(&input, &mask).is_err());
}

#[test]
fn channel_stats_gradient_matches_finite_differences() {
    let input = randn_tensor(3, 2, 4, "stats-in");
    let mask = Mask::from_vec(
        2,
        4,
        vec![true, true, false, true, true, false, true, true],
    );
    let a = randn_vec(3, "stats-a");
    let b = randn_vec(3, "stats-b");

    let (stats, ctx) = channel_stats_with_ctx(&input, &mask).unwrap();
    let mut grad = Tensor::zeros(3, 2, 4);
    channel_stats_backward(&input, &mask, &stats, &ctx, &a, &b, &mut grad);

    let mut x = input.data().to_vec();
    let rep = central_diff_check(&mut x, grad.data(), &[], DEFAULT_STEP, |x| {
        let t = Tensor::from_vec(3, 2, 4, x.to_vec());
        let s = channel_stats(&t, &mask).unwrap();
        (0..3).map(|c| a[c] * s.mean[c] + b[c] * s.std[c]).sum()
    });
    assert!(rep.passes(DEFAULT_TOL), "defect {}", rep.max_defect);
}

#[test]
fn normalize_denormalize_round_trip() {
    let input = randn_tensor(2, 3, 3, "norm-rt");
    let mask = Mask::new_true(3, 3);
    let stats = channel_stats(&input, &mask).unwrap();
    let normed = normalize_channels(&input, &stats);
    let back = denormalize_channels(&normed, &stats);
    for (a, b) in input.data().iter().zip(back.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn denormalize_matches_affine_oracle() {
    // Values {1,3} normalized by their own stats give {-1,1}; mapping onto
    // mean 0, std 2 gives {-2,2}.
    let input = Tensor::from_vec(1, 1, 2, vec![1.0f64, 3.0]);
    let own = channel_stats(&input, &Mask::new_true(1, 2)).unwrap();
    let target = crate::tensor::ChannelStats {
        mean: vec![0.0],
        std: vec![2.0],
    };
    let out = denormalize_channels(&normalize_channels(&input, &own), &target);
    assert_eq!(out.data(), &[-2.0, 2.0]);
}

#[test]
fn cross_entropy_uniform_logits_give_ln_k() {
    let logits = Tensor::<f64>::zeros(2, 1, 4);
    let targets = LabelImage::filled(1, 4, 0);
    let include = Mask::new_true(1, 4);
    let (loss, grad) = cross_entropy(&logits, &targets, &include).unwrap();
    assert!((loss - core::f64::consts::LN_2).abs() < 1e-12);
    // Per-pixel gradient sums to zero.
    for i in 0..4 {
        let s = grad.channel(0)[i] + grad.channel(1)[i];
        assert!(s.abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_skips_excluded_pixels() {
    let mut logits = Tensor::<f64>::zeros(2, 1, 2);
    logits.channel_mut(0)[1] = 50.0;
    let targets = LabelImage::from_vec(1, 2, vec![0, 1]);
    let include = Mask::from_vec(1, 2, vec![true, false]);
    let (loss, grad) = cross_entropy(&logits, &targets, &include).unwrap();
    assert!((loss - core::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(grad.channel(0)[1], 0.0);
    assert_eq!(grad.channel(1)[1], 0.0);
}

#[test]
fn cross_entropy_rejects_bad_targets_and_empty_include() {
    let logits = Tensor::<f64>::zeros(2, 1, 2);
    let targets = LabelImage::from_vec(1, 2, vec![0, 2]);
    let include = Mask::new_true(1, 2);
    assert!(matches!(
        cross_entropy(&logits, &targets, &include),
        Err(KernelError::TargetOutOfRange { id: 2, classes: 2 })
    ));
    let ok_targets = LabelImage::filled(1, 2, 0);
    assert!(matches!(
        cross_entropy(&logits, &ok_targets, &Mask::new_false(1, 2)),
        Err(KernelError::AllPixelsExcluded)
    ));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let logits = randn_tensor(4, 2, 3, "ce-in");
    let targets = LabelImage::from_vec(2, 3, vec![0, 3, 1, 2, 0, 1]);
    let include = Mask::from_vec(2, 3, vec![true, true, false, true, true, true]);
    let (_, grad) = cross_entropy(&logits, &targets, &include).unwrap();
    let mut x = logits.data().to_vec();
    let rep = central_diff_check(&mut x, grad.data(), &[], DEFAULT_STEP, |x| {
        let t = Tensor::from_vec(4, 2, 3, x.to_vec());
        cross_entropy(&t, &targets, &include).unwrap().0
    });
    assert!(rep.passes(DEFAULT_TOL), "defect {}", rep.max_defect);
}

#[test]
fn upsample2_repeats_pixels_and_backward_sums() {
    let input = Tensor::from_vec(1, 1, 2, vec![1.0, 2.0]);
    let up = upsample2_forward(&input);
    assert_eq!(up.shape(), (1, 2, 4));
    assert_eq!(up.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);

    let grad_out = Tensor::from_fn(1, 2, 4, |_, y, x| (y * 4 + x) as f64);
    let grad_in = upsample2_backward(&grad_out);
    assert_eq!(grad_in.data(), &[0.0 + 1.0 + 4.0 + 5.0, 2.0 + 3.0 + 6.0 + 7.0]);
}

#[test]
fn upsample2_satisfies_the_adjoint_identity() {
    let x = randn_tensor(2, 3, 4, "up-x");
    let y = randn_tensor(2, 6, 8, "up-y");
    let lhs = dot(&upsample2_forward(&x), &y);
    let rhs = dot(&x, &upsample2_backward(&y));
    assert!((lhs - rhs).abs() < 1e-10);
}
