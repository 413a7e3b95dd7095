//! Properties and worked examples for the network engine.

mod common;

use common::{fd_gradients, grad_toy_spec, random_batch, random_params, relative_errors, trainable_vecs};
use lcnn_core::nn::{
    avgpool_forward, backward, batchnorm_infer, conv2d_forward, dense_forward, forward,
    forward_single, softmax, Activation, ArchConfig, BatchNormParams, DenseParams, LayerParams,
    NetworkParams,
};
use lcnn_core::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn conv_scalar_product_example() {
    // 1x1x1 input [2], one 1x1 filter [3], bias 0 -> [6]
    let input = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
    let weights = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
    let out = conv2d_forward(&input, &weights, &[0.0]).unwrap();
    assert_eq!(out.data(), &[6.0]);
}

#[test]
fn conv_zero_padding_tap_counts() {
    // all-ones 3x3 input, all-ones 3x3 filter: center sees 9 taps, corners 4
    let input = Tensor::from_vec(&[1, 3, 3, 1], vec![1.0; 9]).unwrap();
    let weights = Tensor::from_vec(&[1, 3, 3, 1], vec![1.0; 9]).unwrap();
    let out = conv2d_forward(&input, &weights, &[0.0]).unwrap();
    assert_eq!(out.data()[out.idx4(0, 1, 1, 0)], 9.0);
    for (y, x) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        assert_eq!(out.data()[out.idx4(0, y, x, 0)], 4.0);
    }
    for (y, x) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
        assert_eq!(out.data()[out.idx4(0, y, x, 0)], 6.0);
    }
}

#[test]
fn conv_full_input_keeps_spatial_size() {
    // random 40x51x1 input, 16 3x3 filters -> 40x51x16
    let input = Tensor::from_vec(
        &[1, 40, 51, 1],
        (0..40 * 51).map(|i| ((i * 37 % 101) as f32) / 50.0 - 1.0).collect(),
    )
    .unwrap();
    let weights = Tensor::from_vec(&[16, 3, 3, 1], vec![0.1; 16 * 9]).unwrap();
    let out = conv2d_forward(&input, &weights, &vec![0.0; 16]).unwrap();
    assert_eq!(out.shape(), &[1, 40, 51, 16]);
}

#[test]
fn conv_channel_mismatch_rejected() {
    let input = Tensor::from_vec(&[1, 2, 2, 3], vec![0.0; 12]).unwrap();
    let weights = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0; 2]).unwrap();
    let err = conv2d_forward(&input, &weights, &[0.0]).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
}

#[test]
fn batchnorm_identity_and_arithmetic() {
    let params = BatchNormParams::<f64> {
        gamma: vec![1.0],
        beta: vec![0.0],
        moving_mean: vec![0.0],
        moving_variance: vec![1.0],
    };
    let input = Tensor::from_vec(&[1, 1, 3, 1], vec![-1.0, 0.5, 2.0]).unwrap();
    let out = batchnorm_infer(&input, &params).unwrap();
    // epsilon shifts the denominator slightly away from exactly 1
    for (o, i) in out.data().iter().zip(input.data()) {
        assert!((o - i).abs() < 1e-3);
    }

    // gamma=2, beta=1, mean=3, var=4, x=5 -> 2*(5-3)/2 + 1 = 3 (up to eps)
    let params = BatchNormParams::<f64> {
        gamma: vec![2.0],
        beta: vec![1.0],
        moving_mean: vec![3.0],
        moving_variance: vec![4.0],
    };
    let input = Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]).unwrap();
    let out = batchnorm_infer(&input, &params).unwrap();
    assert!((out.data()[0] - 3.0).abs() < 1e-3);
}

#[test]
fn batchnorm_train_constant_batch_gives_beta() {
    use lcnn_core::nn::batchnorm_train;
    let mut params = BatchNormParams::<f64> {
        gamma: vec![1.5, 0.5],
        beta: vec![0.25, -1.0],
        moving_mean: vec![0.0, 0.0],
        moving_variance: vec![1.0, 1.0],
    };
    let input = Tensor::from_vec(&[2, 2, 1, 2], [[7.0, -3.0]; 4].concat()).unwrap();
    let out = batchnorm_train(&input, &mut params, 0.99).unwrap();
    for px in out.data().chunks_exact(2) {
        assert!((px[0] - 0.25).abs() < 1e-12);
        assert!((px[1] + 1.0).abs() < 1e-12);
    }
    // moving stats moved toward the batch stats
    assert!((params.moving_mean[0] - 0.07).abs() < 1e-12);
    assert!((params.moving_variance[0] - 0.99).abs() < 1e-12);
}

#[test]
fn batchnorm_nonpositive_variance_rejected() {
    let params = BatchNormParams::<f32> {
        gamma: vec![1.0],
        beta: vec![0.0],
        moving_mean: vec![0.0],
        moving_variance: vec![0.0],
    };
    let input = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
    assert!(batchnorm_infer(&input, &params).is_err());
}

#[test]
fn batchnorm_infer_matches_folded_affine_form() {
    // the infer-mode map is affine per channel: computing it as
    // gamma*(x-m)/sqrt(v+eps)+beta and as a*x+b must agree
    let params = BatchNormParams::<f32> {
        gamma: vec![1.3, -0.7, 0.2],
        beta: vec![0.1, 2.0, -0.5],
        moving_mean: vec![0.4, -1.0, 3.0],
        moving_variance: vec![0.9, 2.5, 0.04],
    };
    let input = Tensor::from_vec(
        &[1, 2, 2, 3],
        (0..12).map(|i| i as f32 * 0.7 - 4.0).collect(),
    )
    .unwrap();
    let out = batchnorm_infer(&input, &params).unwrap();
    let eps = 1e-3f32;
    for (px_in, px_out) in input.data().chunks_exact(3).zip(out.data().chunks_exact(3)) {
        for c in 0..3 {
            let a = params.gamma[c] / (params.moving_variance[c] + eps).sqrt();
            let b = params.beta[c] - a * params.moving_mean[c];
            assert!((px_out[c] - (a * px_in[c] + b)).abs() < 1e-6);
        }
    }
}

#[test]
fn avgpool_examples() {
    let input = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = avgpool_forward(&input, 2, 2).unwrap();
    assert_eq!(out.shape(), &[1, 1, 1, 1]);
    assert_eq!(out.data(), &[2.5]);

    let input = Tensor::<f32>::zeros(&[1, 40, 51, 16]);
    let out = avgpool_forward(&input, 5, 5).unwrap();
    assert_eq!(out.shape(), &[1, 8, 10, 16]);

    let input = Tensor::<f32>::zeros(&[1, 8, 10, 32]);
    let out = avgpool_forward(&input, 4, 10).unwrap();
    assert_eq!(out.shape(), &[1, 2, 1, 32]);

    let input = Tensor::<f32>::zeros(&[1, 3, 3, 1]);
    assert!(avgpool_forward(&input, 4, 1).is_err());
}

#[test]
fn avgpool_discards_remainder() {
    // 3x3 pooled 2x2 keeps only the top-left window
    let input = Tensor::from_vec(
        &[1, 3, 3, 1],
        vec![1.0, 2.0, 100.0, 3.0, 4.0, 100.0, 100.0, 100.0, 100.0],
    )
    .unwrap();
    let out = avgpool_forward(&input, 2, 2).unwrap();
    assert_eq!(out.shape(), &[1, 1, 1, 1]);
    assert_eq!(out.data(), &[2.5]);
}

#[test]
fn dense_examples() {
    // identity weights pass input through
    let params = DenseParams::<f32> {
        weights: Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        bias: vec![0.0, 0.0],
    };
    let input = Tensor::from_vec(&[1, 2], vec![0.3, -0.8]).unwrap();
    let out = dense_forward(&input, &params, Activation::None).unwrap();
    assert_eq!(out.data(), input.data());

    // x=[1,-1], W=[[1],[1]], b=[0], relu -> [0]
    let params = DenseParams::<f32> {
        weights: Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap(),
        bias: vec![0.0],
    };
    let input = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
    let out = dense_forward(&input, &params, Activation::Relu).unwrap();
    assert_eq!(out.data(), &[0.0]);

    // length mismatch rejected
    let input = Tensor::from_vec(&[1, 3], vec![0.0; 3]).unwrap();
    assert!(dense_forward(&input, &params, Activation::None).is_err());
}

#[test]
fn softmax_examples() {
    let p = softmax(&[0.0f64, 0.0]);
    assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);

    let p = softmax(&[1000.0f64, 0.0]);
    assert!(p.iter().all(|v| v.is_finite()));
    assert!(p[0] > 0.999999 && p[1] < 1e-6);
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_shift_invariant(
        logits in proptest::collection::vec(-300.0f64..300.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&logits);
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));

        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_boundary_smaller_than_interior_for_positive_filters(
        kernel in prop_oneof![Just(3usize), Just(5usize)],
        fill in 0.1f32..2.0,
        weight in 0.05f32..1.5,
    ) {
        let (h, w) = (8usize, 9usize);
        let input = Tensor::filled(&[1, h, w, 1], fill);
        let weights = Tensor::filled(&[1, kernel, kernel, 1], weight);
        let out = conv2d_forward(&input, &weights, &[0.0]).unwrap();
        let interior = out.data()[out.idx4(0, h / 2, w / 2, 0)];
        let pad = kernel / 2;
        for y in 0..h {
            for x in 0..w {
                let v = out.data()[out.idx4(0, y, x, 0)];
                let on_border = y < pad || x < pad || y >= h - pad || x >= w - pad;
                if on_border {
                    prop_assert!(v.abs() < interior.abs());
                } else {
                    prop_assert!((v - interior).abs() < 1e-5);
                }
            }
        }
    }
}

#[test]
fn forward_full_architecture_probability_vector() {
    let spec = ArchConfig::default().build();
    let params = NetworkParams::<f32>::init(&spec, 2).unwrap();
    let input = Tensor::from_vec(
        &[40, 51, 1],
        (0..40 * 51).map(|i| ((i % 83) as f32) / 40.0 - 1.0).collect(),
    )
    .unwrap();
    let probs = forward_single(&spec, &params, &input).unwrap();
    assert_eq!(probs.len(), 10);
    let sum: f32 = probs.iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
    assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn zero_classifier_weights_give_uniform_output() {
    let spec = ArchConfig::default().build();
    let mut params = NetworkParams::<f32>::init(&spec, 2).unwrap();
    if let Some(LayerParams::Dense(p)) = params.layers.last_mut() {
        for v in p.weights.data_mut() {
            *v = 0.0;
        }
        p.bias.iter_mut().for_each(|v| *v = 0.0);
    }
    let input = Tensor::filled(&[40, 51, 1], 0.37);
    let probs = forward_single(&spec, &params, &input).unwrap();
    for p in probs {
        assert!((p - 0.1).abs() < 1e-7);
    }
}

#[test]
fn batched_forward_matches_per_example_forward() {
    let spec = grad_toy_spec();
    let params = random_params(&spec, 5);
    let (batch, _) = random_batch(&spec, 4, 5);
    let trace = forward(&spec, &params, &batch, false).unwrap();
    let (h, w, c) = spec.input_shape;
    let per = h * w * c;
    for b in 0..4 {
        let single = Tensor::from_vec(
            &[h, w, c],
            batch.data()[b * per..(b + 1) * per].to_vec(),
        )
        .unwrap();
        let probs = forward_single(&spec, &params, &single).unwrap();
        let row = &trace.probabilities.data()[b * spec.class_count..(b + 1) * spec.class_count];
        assert_eq!(row, probs.as_slice(), "example {b}");
    }
}

#[test]
fn inference_is_bitwise_repeatable() {
    let spec = ArchConfig::default().build();
    let params = NetworkParams::<f32>::init(&spec, 3).unwrap();
    let (batch, _) = random_batch(&spec, 2, 9);
    let a = forward(&spec, &params, &batch, false).unwrap();
    let b = forward(&spec, &params, &batch, false).unwrap();
    assert_eq!(a.probabilities, b.probabilities);
}

#[test]
fn forward_outputs_finite_on_finite_input() {
    let spec = grad_toy_spec();
    for seed in 0..5 {
        let params = random_params(&spec, seed);
        let (batch, _) = random_batch(&spec, 3, seed + 100);
        let trace = forward(&spec, &params, &batch, true).unwrap();
        assert!(trace.probabilities.all_finite());
        for t in &trace.layer_outputs {
            assert!(t.all_finite());
        }
    }
}

#[test]
fn classifier_logit_gradient_is_probs_minus_labels_over_batch() {
    let spec = grad_toy_spec();
    let params = random_params(&spec, 17);
    let (batch, labels) = random_batch(&spec, 4, 17);
    let result = backward(&spec, &params, &batch, &labels).unwrap();
    // classifier bias gradient = sum_b (p - y)/B; check against a training
    // forward by finite differences on the bias alone would re-derive it;
    // instead verify the mean-invariance: duplicating the batch leaves all
    // gradients unchanged.
    let mut dup_data = batch.data().to_vec();
    dup_data.extend_from_slice(batch.data());
    let dup_batch = Tensor::from_vec(
        &[8, spec.input_shape.0, spec.input_shape.1, spec.input_shape.2],
        dup_data,
    )
    .unwrap();
    let mut dup_labels = labels.data().to_vec();
    dup_labels.extend_from_slice(labels.data());
    let dup_labels = Tensor::from_vec(&[8, spec.class_count], dup_labels).unwrap();
    let dup = backward(&spec, &params, &dup_batch, &dup_labels).unwrap();
    assert!((result.loss - dup.loss).abs() < 1e-6);
    for (a, b) in result.grads.tensors.iter().zip(&dup.grads.tensors) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }
}

#[test]
fn gradients_match_finite_differences_on_4x4_toy_net() {
    let spec = grad_toy_spec();
    let params32 = random_params(&spec, 42);
    let (batch32, labels32) = random_batch(&spec, 3, 42);

    let params64 = params32.cast::<f64>();
    let batch64 = batch32.cast::<f64>();
    let labels64 = labels32.cast::<f64>();

    let analytic64 = backward(&spec, &params64, &batch64, &labels64).unwrap();
    let analytic64_vecs: Vec<Vec<f64>> = analytic64.grads.tensors;
    let fd = fd_gradients(&spec, &params64, &batch64, &labels64, 1e-4, &analytic64_vecs, 1e-4);

    // 64-bit analytic against the oracle
    for (name, err) in params64
        .trainable_names()
        .iter()
        .zip(relative_errors(&analytic64_vecs, &fd))
    {
        assert!(err < 1e-5, "{name}: relative error {err}");
    }

    // 32-bit analytic against the same oracle, spec tolerance 1e-3
    let analytic32 = backward(&spec, &params32, &batch32, &labels32).unwrap();
    let analytic32_vecs: Vec<Vec<f64>> = analytic32
        .grads
        .tensors
        .iter()
        .map(|t| t.iter().map(|v| *v as f64).collect())
        .collect();
    for (name, err) in params32
        .trainable_names()
        .iter()
        .zip(relative_errors(&analytic32_vecs, &fd))
    {
        assert!(err < 1e-3, "{name}: relative error {err}");
    }
}

#[test]
fn backward_rejects_nan_input_loss() {
    let spec = grad_toy_spec();
    let params = random_params(&spec, 1);
    let (mut batch, labels) = random_batch(&spec, 2, 1);
    batch.data_mut()[0] = f32::NAN;
    assert!(backward(&spec, &params, &batch, &labels).is_err());
}
