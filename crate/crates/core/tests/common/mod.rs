//! Shared helpers for the integration tests: tiny architectures, parameter
//! randomization, and a central finite-difference gradient oracle that is
//! independent of the analytic backward pass.

#![allow(dead_code)]

use lcnn_core::nn::{training_loss, Activation, ArchConfig, NetworkParams, NetworkSpec};
use lcnn_core::tensor::{Scalar, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Small full-vocabulary network on a 4x4 input: three conv+BN blocks with
/// tanh/relu/tanh, two pools, dense tanh, softmax classifier.
pub fn grad_toy_spec() -> NetworkSpec {
    ArchConfig {
        conv_filters: [2, 2, 3],
        kernel: 3,
        activations: [
            Activation::Tanh,
            Activation::Relu,
            Activation::Tanh,
            Activation::Tanh,
        ],
        dense_units: 5,
        class_count: 3,
        input_shape: (4, 4, 1),
        pools: [(2, 2), (2, 2)],
    }
    .build()
}

/// Glorot init plus uniform jitter on every trainable tensor so biases,
/// betas and gammas are not at their symmetric defaults.
pub fn random_params(spec: &NetworkSpec, seed: u64) -> NetworkParams<f32> {
    let mut params = NetworkParams::<f32>::init(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    params.for_each_trainable_mut(|t| {
        for v in t {
            *v += rng.random_range(-0.2..0.2f32);
        }
    });
    params
}

pub fn random_batch(
    spec: &NetworkSpec,
    batch: usize,
    seed: u64,
) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed_270b);
    let (h, w, c) = spec.input_shape;
    let data = (0..batch * h * w * c)
        .map(|_| rng.random_range(-1.0..1.0f32))
        .collect();
    let input = Tensor::from_vec(&[batch, h, w, c], data).unwrap();
    let mut labels = vec![0.0f32; batch * spec.class_count];
    for b in 0..batch {
        let class = rng.random_range(0..spec.class_count);
        labels[b * spec.class_count + class] = 1.0;
    }
    let labels = Tensor::from_vec(&[batch, spec.class_count], labels).unwrap();
    (input, labels)
}

pub fn trainable_vecs<T: Scalar>(params: &NetworkParams<T>) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    params.for_each_trainable(|t| out.push(t.iter().map(|v| v.to_f64()).collect()));
    out
}

fn perturbed(
    params: &NetworkParams<f64>,
    tensor_idx: usize,
    elem_idx: usize,
    delta: f64,
) -> NetworkParams<f64> {
    let mut out = params.clone();
    let mut at = 0usize;
    out.for_each_trainable_mut(|t| {
        if at == tensor_idx {
            t[elem_idx] += delta;
        }
        at += 1;
    });
    out
}

/// Central finite differences of the training-mode loss with respect to
/// every trainable tensor, in f64. Entries whose first estimate disagrees
/// with the analytic value are re-estimated with a much smaller step: a
/// genuine gradient bug stays wrong at every step size, while an artifact
/// from a relu kink inside the +-h window disappears.
pub fn fd_gradients(
    spec: &NetworkSpec,
    params: &NetworkParams<f64>,
    batch: &Tensor<f64>,
    labels: &Tensor<f64>,
    h: f64,
    analytic: &[Vec<f64>],
    guard: f64,
) -> Vec<Vec<f64>> {
    let sizes: Vec<usize> = trainable_vecs(params).iter().map(|t| t.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for (ti, n) in sizes.iter().enumerate() {
        let mut grad = vec![0.0f64; *n];
        for e in 0..*n {
            let fd_at = |step: f64| {
                let plus = training_loss(spec, &perturbed(params, ti, e, step), batch, labels)
                    .expect("finite loss");
                let minus = training_loss(spec, &perturbed(params, ti, e, -step), batch, labels)
                    .expect("finite loss");
                (plus - minus) / (2.0 * step)
            };
            let mut fd = fd_at(h);
            let a = analytic[ti][e];
            if (fd - a).abs() > guard * a.abs().max(1.0) {
                fd = fd_at(h / 64.0);
            }
            grad[e] = fd;
        }
        out.push(grad);
    }
    out
}

/// Per-tensor vector-norm relative error between two gradient sets.
pub fn relative_errors(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            let diff: f64 = x
                .iter()
                .zip(y)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = nx.max(ny);
            // conv biases feeding batch-norm have a mathematically zero
            // gradient (the mean subtraction absorbs any bias shift); both
            // sides then hold only rounding residue, ~1e-7 in f32
            if denom < 1e-6 {
                0.0
            } else {
                diff / denom
            }
        })
        .collect()
}

/// Minimal PCM16 mono WAV encoding for test fixtures.
pub fn wav_bytes(samples: &[i16], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}
