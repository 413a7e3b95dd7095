//! Analytic backward pass for the mean categorical cross-entropy loss.
//!
//! Training mode throughout: batch normalization uses the batch statistics
//! of the forward pass, and the returned statistics let the caller fold
//! them into the moving averages. Moving statistics carry no gradient.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::forward::{avgpool_forward, batch_stats, conv2d_forward, dense_forward, softmax_in_place};
use crate::nn::{Activation, LayerParams, LayerSpec, NetworkParams, NetworkSpec, BN_EPSILON};
use crate::tensor::{Scalar, Tensor};

/// Gradient tensors in the canonical trainable order (see
/// [`NetworkParams::for_each_trainable`]).
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    pub tensors: Vec<Vec<T>>,
}

/// Loss, gradients and the per-batch-norm-layer batch statistics of one
/// training-mode forward/backward pass.
#[derive(Debug, Clone)]
pub struct BackwardResult<T = f32> {
    pub loss: T,
    pub grads: Gradients<T>,
    /// `(layer index, batch mean, batch variance)` for every batch-norm
    /// layer, for the caller's moving-average update.
    pub bn_stats: Vec<(usize, Vec<T>, Vec<T>)>,
}

struct ForwardCache<T> {
    /// Output of every layer (post-activation where applicable).
    outputs: Vec<Tensor<T>>,
    /// Batch-norm internals per layer index: (x_hat, mean, var).
    bn: Vec<Option<(Tensor<T>, Vec<T>, Vec<T>)>>,
    probabilities: Tensor<T>,
}

fn check_labels<T: Scalar>(labels: &Tensor<T>, batch: usize, classes: usize) -> Result<()> {
    if labels.shape() != [batch, classes] {
        return Err(Error::shape(
            "labels",
            format!("[{batch}, {classes}] one-hot rows"),
            format!("{:?}", labels.shape()),
        ));
    }
    Ok(())
}

fn train_forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    batch: &Tensor<T>,
) -> Result<ForwardCache<T>> {
    let b = batch.shape()[0];
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(spec.layers.len());
    let mut bn: Vec<Option<(Tensor<T>, Vec<T>, Vec<T>)>> = vec![None; spec.layers.len()];
    let mut cur = batch.clone();
    let eps = T::from_f64(BN_EPSILON);

    for (i, (layer, lp)) in spec.layers.iter().zip(&params.layers).enumerate() {
        cur = match (layer, lp) {
            (LayerSpec::Conv2D { .. }, LayerParams::Conv(p)) => {
                conv2d_forward(&cur, &p.weights, &p.bias)?
            }
            (LayerSpec::BatchNorm { activation }, LayerParams::BatchNorm(p)) => {
                let (mean, var) = batch_stats(&cur)?;
                let c = mean.len();
                let inv_std: Vec<T> = var.iter().map(|v| T::ONE / (*v + eps).sqrt()).collect();
                let mut x_hat = cur.clone();
                for px in x_hat.data_mut().chunks_exact_mut(c) {
                    for ((v, m), s) in px.iter_mut().zip(&mean).zip(&inv_std) {
                        *v = (*v - *m) * *s;
                    }
                }
                let mut out = x_hat.clone();
                for px in out.data_mut().chunks_exact_mut(c) {
                    for ((v, g), be) in px.iter_mut().zip(&p.gamma).zip(&p.beta) {
                        *v = activation.apply(*v * *g + *be);
                    }
                }
                bn[i] = Some((x_hat, mean, var));
                out
            }
            (LayerSpec::AvgPool { pool_h, pool_w }, LayerParams::None) => {
                avgpool_forward(&cur, *pool_h, *pool_w)?
            }
            (LayerSpec::Flatten, LayerParams::None) => {
                let n = cur.len() / b;
                cur.reshaped(&[b, n])?
            }
            (LayerSpec::Dense { activation, .. }, LayerParams::Dense(p)) => {
                dense_forward(&cur, p, *activation)?
            }
            (LayerSpec::SoftmaxClassifier, LayerParams::Dense(p)) => {
                let mut logits = dense_forward(&cur, p, Activation::None)?;
                for row in logits.data_mut().chunks_exact_mut(spec.class_count) {
                    softmax_in_place(row);
                }
                logits
            }
            _ => {
                return Err(Error::InvalidSpec(format!(
                    "layer {i}: params variant does not match spec layer"
                )))
            }
        };
        outputs.push(cur.clone());
    }
    let probabilities = outputs
        .last()
        .cloned()
        .ok_or_else(|| Error::InvalidSpec("network has no layers".into()))?;
    Ok(ForwardCache {
        outputs,
        bn,
        probabilities,
    })
}

fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>) -> T {
    let batch = probs.shape()[0];
    let mut total = T::ZERO;
    for (p, y) in probs.data().iter().zip(labels.data()) {
        if *y != T::ZERO {
            total -= *y * p.ln();
        }
    }
    total / T::from_f64(batch as f64)
}

/// Training-mode loss of a batch: mean categorical cross-entropy under
/// batch-statistics normalization. Pure; used as the target function for
/// finite-difference gradient verification.
pub fn training_loss<T: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    batch: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<T> {
    check_labels(labels, batch.shape()[0], spec.class_count)?;
    let cache = train_forward(spec, params, batch)?;
    Ok(cross_entropy(&cache.probabilities, labels))
}

/// Analytic gradients of the mean cross-entropy over the batch with respect
/// to every trainable tensor.
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    batch: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<BackwardResult<T>> {
    let b = match *batch.shape() {
        [b, _, _, _] => b,
        _ => {
            return Err(Error::shape(
                "training batch",
                "rank-4 tensor [batch, h, w, c]",
                format!("{:?}", batch.shape()),
            ))
        }
    };
    check_labels(labels, b, spec.class_count)?;
    // relu's max() semantics would silently absorb a NaN instead of
    // propagating it into the loss check below
    if !batch.all_finite() {
        return Err(Error::NonFinite("training batch input".into()));
    }
    let cache = train_forward(spec, params, batch)?;
    let loss = cross_entropy(&cache.probabilities, labels);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss over batch of {b} (diverged or zero probability assigned to a label)"
        )));
    }

    // d(mean CE)/d(logits) = (p - y) / B
    let inv_b = T::from_f64(1.0 / b as f64);
    let mut upstream = cache.probabilities.clone();
    for (g, y) in upstream.data_mut().iter_mut().zip(labels.data()) {
        *g = (*g - *y) * inv_b;
    }

    // gradient tensors per layer, assembled in reverse
    let mut per_layer: Vec<Vec<Vec<T>>> = vec![Vec::new(); spec.layers.len()];
    let mut bn_stats = Vec::new();

    for i in (0..spec.layers.len()).rev() {
        let layer_input = if i == 0 {
            batch
        } else {
            &cache.outputs[i - 1]
        };
        match (&spec.layers[i], &params.layers[i]) {
            (LayerSpec::SoftmaxClassifier, LayerParams::Dense(p)) => {
                // upstream already holds d(loss)/d(logits)
                let (dw, db, dx) = dense_backward(layer_input, p, &upstream);
                per_layer[i] = vec![dw, db];
                upstream = dx;
            }
            (LayerSpec::Dense { activation, .. }, LayerParams::Dense(p)) => {
                let mut dz = upstream;
                for (g, y) in dz.data_mut().iter_mut().zip(cache.outputs[i].data()) {
                    *g *= activation.grad_from_output(*y);
                }
                let (dw, db, dx) = dense_backward(layer_input, p, &dz);
                per_layer[i] = vec![dw, db];
                upstream = dx;
            }
            (LayerSpec::Flatten, LayerParams::None) => {
                upstream = upstream.reshaped(layer_input.shape())?;
            }
            (LayerSpec::AvgPool { pool_h, pool_w }, LayerParams::None) => {
                upstream = avgpool_backward(layer_input.shape(), &upstream, *pool_h, *pool_w);
            }
            (LayerSpec::BatchNorm { activation }, LayerParams::BatchNorm(p)) => {
                let (x_hat, mean, var) = cache.bn[i]
                    .as_ref()
                    .expect("batch-norm cache populated in forward");
                let mut dz = upstream;
                for (g, y) in dz.data_mut().iter_mut().zip(cache.outputs[i].data()) {
                    *g *= activation.grad_from_output(*y);
                }
                let (dgamma, dbeta, dx) = batchnorm_backward(&dz, x_hat, var, &p.gamma);
                per_layer[i] = vec![dgamma, dbeta];
                bn_stats.push((i, mean.clone(), var.clone()));
                upstream = dx;
            }
            (LayerSpec::Conv2D { .. }, LayerParams::Conv(p)) => {
                let (dw, db) = conv2d_backward_params(layer_input, &p.weights, &upstream);
                per_layer[i] = vec![dw, db];
                if i > 0 {
                    upstream = conv2d_backward_input(layer_input.shape(), &p.weights, &upstream);
                }
            }
            _ => {
                return Err(Error::InvalidSpec(format!(
                    "layer {i}: params variant does not match spec layer"
                )))
            }
        }
    }

    bn_stats.reverse();
    let tensors = per_layer.into_iter().flatten().collect();
    Ok(BackwardResult {
        loss,
        grads: Gradients { tensors },
        bn_stats,
    })
}

fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &crate::nn::DenseParams<T>,
    dz: &Tensor<T>,
) -> (Vec<T>, Vec<T>, Tensor<T>) {
    let (b, n) = (input.shape()[0], input.shape()[1]);
    let units = params.bias.len();
    let w = params.weights.data();
    let mut dw = vec![T::ZERO; n * units];
    let mut db = vec![T::ZERO; units];
    let mut dx = Tensor::zeros(&[b, n]);
    for bi in 0..b {
        let x_row = &input.data()[bi * n..(bi + 1) * n];
        let dz_row = &dz.data()[bi * units..(bi + 1) * units];
        for (dbv, dzv) in db.iter_mut().zip(dz_row) {
            *dbv += *dzv;
        }
        for (i, xv) in x_row.iter().enumerate() {
            let dw_row = &mut dw[i * units..(i + 1) * units];
            for (dwv, dzv) in dw_row.iter_mut().zip(dz_row) {
                *dwv += *xv * *dzv;
            }
        }
        let dx_row = &mut dx.data_mut()[bi * n..(bi + 1) * n];
        for (i, dxv) in dx_row.iter_mut().enumerate() {
            let w_row = &w[i * units..(i + 1) * units];
            let mut acc = T::ZERO;
            for (wv, dzv) in w_row.iter().zip(dz_row) {
                acc += *wv * *dzv;
            }
            *dxv = acc;
        }
    }
    (dw, db, dx)
}

fn avgpool_backward<T: Scalar>(
    input_shape: &[usize],
    dout: &Tensor<T>,
    pool_h: usize,
    pool_w: usize,
) -> Tensor<T> {
    let (b, h, w, c) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (oh, ow) = (dout.shape()[1], dout.shape()[2]);
    let inv = T::from_f64(1.0 / (pool_h * pool_w) as f64);
    let mut din = Tensor::zeros(&[b, h, w, c]);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let d_base = ((bi * oh + oy) * ow + ox) * c;
                for dy in 0..pool_h {
                    let iy = oy * pool_h + dy;
                    for dx in 0..pool_w {
                        let ix = ox * pool_w + dx;
                        let in_base = ((bi * h + iy) * w + ix) * c;
                        for ch in 0..c {
                            din.data_mut()[in_base + ch] = dout.data()[d_base + ch] * inv;
                        }
                    }
                }
            }
        }
    }
    din
}

/// Batch-norm backward under batch statistics:
/// `dx = gamma * inv_std * (dz - mean(dz) - x_hat * mean(dz * x_hat))`.
fn batchnorm_backward<T: Scalar>(
    dz: &Tensor<T>,
    x_hat: &Tensor<T>,
    var: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Tensor<T>) {
    let c = var.len();
    let n = (dz.len() / c) as f64;
    let eps = T::from_f64(BN_EPSILON);
    let inv_n = T::from_f64(1.0 / n);

    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for (dz_px, xh_px) in dz.data().chunks_exact(c).zip(x_hat.data().chunks_exact(c)) {
        for ch in 0..c {
            dgamma[ch] += dz_px[ch] * xh_px[ch];
            dbeta[ch] += dz_px[ch];
        }
    }

    let inv_std: Vec<T> = var.iter().map(|v| T::ONE / (*v + eps).sqrt()).collect();
    let mean_dz: Vec<T> = dbeta.iter().map(|v| *v * inv_n).collect();
    let mean_dz_xhat: Vec<T> = dgamma.iter().map(|v| *v * inv_n).collect();

    let mut dx = dz.clone();
    for (dx_px, xh_px) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(x_hat.data().chunks_exact(c))
    {
        for ch in 0..c {
            dx_px[ch] = gamma[ch]
                * inv_std[ch]
                * (dx_px[ch] - mean_dz[ch] - xh_px[ch] * mean_dz_xhat[ch]);
        }
    }
    (dgamma, dbeta, dx)
}

fn conv2d_backward_params<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    dout: &Tensor<T>,
) -> (Vec<T>, Vec<T>) {
    let (b, h, w, cin) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (filters, kh, kw) = (weights.shape()[0], weights.shape()[1], weights.shape()[2]);
    let pad_top = (kh - 1) / 2;
    let pad_left = (kw - 1) / 2;
    let in_data = input.data();
    let dout_data = dout.data();

    // one sequential pass over dout per batch chunk, accumulating into a
    // small [tap, c, f] buffer whose inner dimension vectorizes; the chunk
    // count is fixed so the ordered reduction below is deterministic for
    // any thread count
    let chunk = b.div_ceil(8).max(1);
    let partials: Vec<(Vec<T>, Vec<T>)> = (0..b.div_ceil(chunk))
        .into_par_iter()
        .map(|ci| {
            let mut dwt = vec![T::ZERO; kh * kw * cin * filters];
            let mut db = vec![T::ZERO; filters];
            for bi in (ci * chunk)..((ci + 1) * chunk).min(b) {
                for y in 0..h {
                    for x in 0..w {
                        let base = ((bi * h + y) * w + x) * filters;
                        let dout_px = &dout_data[base..base + filters];
                        for (dbv, d) in db.iter_mut().zip(dout_px) {
                            *dbv += *d;
                        }
                        for dy in 0..kh {
                            let iy = y + dy;
                            if iy < pad_top || iy - pad_top >= h {
                                continue;
                            }
                            let iy = iy - pad_top;
                            for dx in 0..kw {
                                let ix = x + dx;
                                if ix < pad_left || ix - pad_left >= w {
                                    continue;
                                }
                                let ix = ix - pad_left;
                                let in_base = ((bi * h + iy) * w + ix) * cin;
                                let in_px = &in_data[in_base..in_base + cin];
                                let tap = (dy * kw + dx) * cin;
                                for (c, iv) in in_px.iter().enumerate() {
                                    let row = &mut dwt[(tap + c) * filters..(tap + c + 1) * filters];
                                    for (a, d) in row.iter_mut().zip(dout_px) {
                                        *a += *iv * *d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (dwt, db)
        })
        .collect();

    let mut dwt_total = vec![T::ZERO; kh * kw * cin * filters];
    let mut db = vec![T::ZERO; filters];
    for (dwt, db_part) in &partials {
        for (a, v) in dwt_total.iter_mut().zip(dwt) {
            *a += *v;
        }
        for (a, v) in db.iter_mut().zip(db_part) {
            *a += *v;
        }
    }
    // back to the weight layout [f, dy, dx, c]
    let mut dw = vec![T::ZERO; filters * kh * kw * cin];
    for tap in 0..(kh * kw) {
        for c in 0..cin {
            let row = &dwt_total[(tap * cin + c) * filters..(tap * cin + c + 1) * filters];
            for (f, v) in row.iter().enumerate() {
                dw[(f * kh * kw + tap) * cin + c] = *v;
            }
        }
    }
    (dw, db)
}

fn conv2d_backward_input<T: Scalar>(
    input_shape: &[usize],
    weights: &Tensor<T>,
    dout: &Tensor<T>,
) -> Tensor<T> {
    let (b, h, w, cin) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (filters, kh, kw) = (weights.shape()[0], weights.shape()[1], weights.shape()[2]);
    let pad_top = (kh - 1) / 2;
    let pad_left = (kw - 1) / 2;
    let w_data = weights.data();
    let dout_data = dout.data();

    let mut din = Tensor::zeros(&[b, h, w, cin]);
    din.data_mut()
        .par_chunks_mut(h * w * cin)
        .enumerate()
        .for_each(|(bi, din_b)| {
            let dout_b = &dout_data[bi * h * w * filters..(bi + 1) * h * w * filters];
            for y in 0..h {
                for x in 0..w {
                    for f in 0..filters {
                        let d = dout_b[(y * w + x) * filters + f];
                        if d == T::ZERO {
                            continue;
                        }
                        for dy in 0..kh {
                            let iy = y + dy;
                            if iy < pad_top || iy - pad_top >= h {
                                continue;
                            }
                            let iy = iy - pad_top;
                            for dx in 0..kw {
                                let ix = x + dx;
                                if ix < pad_left || ix - pad_left >= w {
                                    continue;
                                }
                                let ix = ix - pad_left;
                                let w_px = &w_data[((f * kh + dy) * kw + dx) * cin
                                    ..((f * kh + dy) * kw + dx) * cin + cin];
                                let din_px =
                                    &mut din_b[(iy * w + ix) * cin..(iy * w + ix) * cin + cin];
                                for (dv, wv) in din_px.iter_mut().zip(w_px) {
                                    *dv += d * *wv;
                                }
                            }
                        }
                    }
                }
            }
        });
    din
}
