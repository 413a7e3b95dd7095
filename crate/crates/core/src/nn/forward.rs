//! Inference-mode layer operations and the composed forward pass.
//!
//! Activations are `[batch, height, width, channels]` throughout; the
//! channel dimension is innermost so the convolution inner product runs on
//! contiguous memory for both the input row and the filter slice.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{Activation, BatchNormParams, DenseParams, LayerParams, LayerSpec, NetworkParams, NetworkSpec, BN_EPSILON};
use crate::tensor::{Scalar, Tensor};

/// Per-layer outputs captured during a forward pass, plus the final
/// probability rows (one per batch example).
#[derive(Debug, Clone)]
pub struct ForwardTrace<T = f32> {
    /// Output of every layer in order; empty unless capture was requested.
    /// A conv layer's entry holds the pre-batch-norm feature maps, the
    /// following batch-norm entry the post-activation maps.
    pub layer_outputs: Vec<Tensor<T>>,
    /// `[batch, class_count]`, rows summing to one.
    pub probabilities: Tensor<T>,
}

/// Feature maps to substitute instead of computing, keyed by conv block
/// ordinal (0 = first conv layer). Each entry carries the target channel
/// and a `[batch, h, w]` post-activation map taken from a provider network.
#[derive(Debug, Clone, Default)]
pub struct ConvOverrides<T = f32> {
    pub per_conv: BTreeMap<usize, Vec<(usize, Tensor<T>)>>,
}

impl<T: Scalar> ConvOverrides<T> {
    pub fn new() -> Self {
        ConvOverrides {
            per_conv: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.per_conv.values().all(|v| v.is_empty())
    }
}

fn rank4<'a, T: Scalar>(t: &'a Tensor<T>, context: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::shape(
            context,
            "rank-4 tensor [batch, h, w, channels]",
            format!("{:?}", t.shape()),
        )),
    }
}

/// Stride-1 convolution with `same` zero padding: output spatial size equals
/// input spatial size and out-of-bounds taps contribute zero.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
) -> Result<Tensor<T>> {
    conv2d_forward_skipping(input, weights, bias, None)
}

/// Convolution variant that leaves the listed output channels at zero; used
/// by deduplicated ensemble inference, which substitutes those maps from a
/// provider network instead of computing them.
pub(crate) fn conv2d_forward_skipping<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    skip: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let (b, h, w, cin) = rank4(input, "conv2d input")?;
    let (filters, kh, kw, wcin) = match *weights.shape() {
        [f, kh, kw, c] => (f, kh, kw, c),
        _ => {
            return Err(Error::shape(
                "conv2d weights",
                "rank-4 tensor [filters, kh, kw, in_channels]",
                format!("{:?}", weights.shape()),
            ))
        }
    };
    if wcin != cin {
        return Err(Error::shape(
            "conv2d input channels",
            format!("{wcin} (from weights)"),
            format!("{cin} (from input)"),
        ));
    }
    if bias.len() != filters {
        return Err(Error::shape(
            "conv2d bias",
            format!("{filters}"),
            format!("{}", bias.len()),
        ));
    }
    if let Some(s) = skip {
        if s.len() != filters {
            return Err(Error::shape(
                "conv2d skip mask",
                format!("{filters}"),
                format!("{}", s.len()),
            ));
        }
    }
    let pad_top = (kh - 1) / 2;
    let pad_left = (kw - 1) / 2;

    // weights transposed to [dy, dx, c, f]: the inner loop then updates
    // `filters` independent accumulators from one contiguous row, which
    // vectorizes (a single-accumulator dot product is a serial float chain)
    let w_data = weights.data();
    let mut wt = vec![T::ZERO; kh * kw * cin * filters];
    for f in 0..filters {
        for dy in 0..kh {
            for dx in 0..kw {
                for c in 0..cin {
                    wt[((dy * kw + dx) * cin + c) * filters + f] =
                        w_data[((f * kh + dy) * kw + dx) * cin + c];
                }
            }
        }
    }

    let mut out = Tensor::zeros(&[b, h, w, filters]);
    let in_data = input.data();
    let in_stride = h * w * cin;
    out.data_mut()
        .par_chunks_mut(h * w * filters)
        .enumerate()
        .for_each(|(bi, out_b)| {
            let in_b = &in_data[bi * in_stride..(bi + 1) * in_stride];
            for y in 0..h {
                for x in 0..w {
                    let out_px = &mut out_b[(y * w + x) * filters..(y * w + x) * filters + filters];
                    out_px.copy_from_slice(bias);
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
                            let in_px = &in_b[(iy * w + ix) * cin..(iy * w + ix) * cin + cin];
                            let wt_tap = &wt[(dy * kw + dx) * cin * filters
                                ..((dy * kw + dx) * cin + cin) * filters];
                            for (c, iv) in in_px.iter().enumerate() {
                                let w_row = &wt_tap[c * filters..(c + 1) * filters];
                                for (acc, wv) in out_px.iter_mut().zip(w_row) {
                                    *acc += *iv * *wv;
                                }
                            }
                        }
                    }
                    if let Some(s) = skip {
                        for (f, v) in out_px.iter_mut().enumerate() {
                            if s[f] {
                                *v = T::ZERO;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Per-channel mean and biased variance over batch and spatial positions.
pub(crate) fn batch_stats<T: Scalar>(input: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (b, h, w, c) = rank4(input, "batchnorm input")?;
    let n = (b * h * w) as f64;
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for px in input.data().chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += *v;
        }
    }
    let inv_n = T::from_f64(1.0 / n);
    for m in &mut mean {
        *m *= inv_n;
    }
    for px in input.data().chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
            let d = *v - *m;
            *s += d * d;
        }
    }
    for s in &mut var {
        *s *= inv_n;
    }
    Ok((mean, var))
}

fn normalize_with<T: Scalar>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
    mean: &[T],
    var: &[T],
) -> Tensor<T> {
    let c = mean.len();
    let eps = T::from_f64(BN_EPSILON);
    let scale: Vec<T> = params
        .gamma
        .iter()
        .zip(var)
        .map(|(g, v)| *g / (*v + eps).sqrt())
        .collect();
    let shift: Vec<T> = params
        .beta
        .iter()
        .zip(&scale)
        .zip(mean)
        .map(|((b, s), m)| *b - *s * *m)
        .collect();
    let mut out = input.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for ((v, s), sh) in px.iter_mut().zip(&scale).zip(&shift) {
            *v = *v * *s + *sh;
        }
    }
    out
}

/// Inference-mode batch normalization using the stored moving statistics.
pub fn batchnorm_infer<T: Scalar>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
) -> Result<Tensor<T>> {
    let (_, _, _, c) = rank4(input, "batchnorm input")?;
    if params.gamma.len() != c {
        return Err(Error::shape(
            "batchnorm channels",
            format!("{}", params.gamma.len()),
            format!("{c}"),
        ));
    }
    if params.moving_variance.iter().any(|v| *v <= T::ZERO) {
        return Err(Error::InvalidSpec(
            "batchnorm moving variance must be strictly positive".into(),
        ));
    }
    Ok(normalize_with(
        input,
        params,
        &params.moving_mean,
        &params.moving_variance,
    ))
}

/// Training-mode batch normalization: normalizes with the batch statistics
/// and folds them into the moving averages.
pub fn batchnorm_train<T: Scalar>(
    input: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    momentum: f64,
) -> Result<Tensor<T>> {
    let (_, _, _, c) = rank4(input, "batchnorm input")?;
    if params.gamma.len() != c {
        return Err(Error::shape(
            "batchnorm channels",
            format!("{}", params.gamma.len()),
            format!("{c}"),
        ));
    }
    let (mean, var) = batch_stats(input)?;
    let out = normalize_with(input, params, &mean, &var);
    let m = T::from_f64(momentum);
    let one_minus = T::from_f64(1.0 - momentum);
    for (mm, bm) in params.moving_mean.iter_mut().zip(&mean) {
        *mm = *mm * m + *bm * one_minus;
    }
    for (mv, bv) in params.moving_variance.iter_mut().zip(&var) {
        *mv = *mv * m + *bv * one_minus;
    }
    Ok(out)
}

/// Non-overlapping average pooling, stride equal to the pool size; trailing
/// rows/columns that do not fill a window are discarded.
pub fn avgpool_forward<T: Scalar>(
    input: &Tensor<T>,
    pool_h: usize,
    pool_w: usize,
) -> Result<Tensor<T>> {
    let (b, h, w, c) = rank4(input, "avgpool input")?;
    if pool_h == 0 || pool_w == 0 || pool_h > h || pool_w > w {
        return Err(Error::shape(
            "avgpool window",
            format!("window within {h}x{w}"),
            format!("{pool_h}x{pool_w}"),
        ));
    }
    let oh = h / pool_h;
    let ow = w / pool_w;
    let mut out = Tensor::zeros(&[b, oh, ow, c]);
    let inv = T::from_f64(1.0 / (pool_h * pool_w) as f64);
    let in_data = input.data();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let out_base = ((bi * oh + oy) * ow + ox) * c;
                for dy in 0..pool_h {
                    let iy = oy * pool_h + dy;
                    for dx in 0..pool_w {
                        let ix = ox * pool_w + dx;
                        let in_base = ((bi * h + iy) * w + ix) * c;
                        for ch in 0..c {
                            out.data_mut()[out_base + ch] += in_data[in_base + ch];
                        }
                    }
                }
                for ch in 0..c {
                    out.data_mut()[out_base + ch] *= inv;
                }
            }
        }
    }
    Ok(out)
}

/// Fully connected layer on `[batch, inputs]` rows: `act(x W + b)` with the
/// weight matrix stored `[inputs, outputs]`.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &DenseParams<T>,
    activation: Activation,
) -> Result<Tensor<T>> {
    let (b, n) = match *input.shape() {
        [b, n] => (b, n),
        _ => {
            return Err(Error::shape(
                "dense input",
                "rank-2 tensor [batch, inputs]",
                format!("{:?}", input.shape()),
            ))
        }
    };
    let (rows, units) = match *params.weights.shape() {
        [r, u] => (r, u),
        _ => {
            return Err(Error::shape(
                "dense weights",
                "rank-2 tensor [inputs, outputs]",
                format!("{:?}", params.weights.shape()),
            ))
        }
    };
    if rows != n {
        return Err(Error::shape(
            "dense input length",
            format!("{rows} (from weights)"),
            format!("{n} (from input)"),
        ));
    }
    if params.bias.len() != units {
        return Err(Error::shape(
            "dense bias",
            format!("{units}"),
            format!("{}", params.bias.len()),
        ));
    }
    let mut out = Tensor::zeros(&[b, units]);
    let w = params.weights.data();
    for bi in 0..b {
        let row = &input.data()[bi * n..(bi + 1) * n];
        let out_row = &mut out.data_mut()[bi * units..(bi + 1) * units];
        out_row.copy_from_slice(&params.bias);
        for (i, xv) in row.iter().enumerate() {
            let w_row = &w[i * units..(i + 1) * units];
            for (o, wv) in out_row.iter_mut().zip(w_row) {
                *o += *xv * *wv;
            }
        }
        for o in out_row.iter_mut() {
            *o = activation.apply(*o);
        }
    }
    Ok(out)
}

/// Numerically stabilized softmax of a single logit vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row
        .iter()
        .copied()
        .fold(T::from_f64(f64::NEG_INFINITY), |a, b| a.max(b));
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Composed inference pass over a batch `[batch, h, w, c]`. With `capture`
/// set, every layer's output is retained in the trace.
pub fn forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    input: &Tensor<T>,
    capture: bool,
) -> Result<ForwardTrace<T>> {
    forward_with_overrides(spec, params, input, &ConvOverrides::new(), capture)
}

/// Forward pass in which selected conv feature maps are substituted from
/// another network's trace instead of being computed. Overridden channels
/// are skipped in the convolution and their post-activation values replaced
/// after the batch-norm layer.
pub fn forward_with_overrides<T: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    input: &Tensor<T>,
    overrides: &ConvOverrides<T>,
    capture: bool,
) -> Result<ForwardTrace<T>> {
    let (b, h, w, c) = rank4(input, "network input")?;
    if (h, w, c) != spec.input_shape {
        return Err(Error::shape(
            "network input",
            format!("{:?}", spec.input_shape),
            format!("({h}, {w}, {c})"),
        ));
    }
    if params.layers.len() != spec.layers.len() {
        return Err(Error::shape(
            "network params",
            format!("{} layers", spec.layers.len()),
            format!("{} layers", params.layers.len()),
        ));
    }

    let mut layer_outputs = Vec::new();
    let mut cur = input.clone();
    let mut conv_ordinal = 0usize;
    // overrides awaiting substitution at the batch-norm following their conv
    let mut pending: Option<&[(usize, Tensor<T>)]> = None;

    for (i, (layer, lp)) in spec.layers.iter().zip(&params.layers).enumerate() {
        cur = match (layer, lp) {
            (LayerSpec::Conv2D { .. }, LayerParams::Conv(p)) => {
                let entries = overrides.per_conv.get(&conv_ordinal).map(|v| v.as_slice());
                conv_ordinal += 1;
                let out = match entries {
                    Some(list) if !list.is_empty() => {
                        let mut skip = vec![false; p.bias.len()];
                        for (ch, map) in list {
                            if *ch >= skip.len() {
                                return Err(Error::SharePlan(format!(
                                    "override channel {ch} out of range for layer {i}"
                                )));
                            }
                            if map.shape() != [b, cur.shape()[1], cur.shape()[2]] {
                                return Err(Error::shape(
                                    format!("override map for layer {i} channel {ch}"),
                                    format!("[{b}, {}, {}]", cur.shape()[1], cur.shape()[2]),
                                    format!("{:?}", map.shape()),
                                ));
                            }
                            skip[*ch] = true;
                        }
                        pending = Some(list);
                        conv2d_forward_skipping(&cur, &p.weights, &p.bias, Some(&skip))?
                    }
                    _ => {
                        pending = None;
                        conv2d_forward(&cur, &p.weights, &p.bias)?
                    }
                };
                out
            }
            (LayerSpec::BatchNorm { activation }, LayerParams::BatchNorm(p)) => {
                let mut out = batchnorm_infer(&cur, p)?;
                for v in out.data_mut() {
                    *v = activation.apply(*v);
                }
                if let Some(list) = pending.take() {
                    let (ob, oh, ow, oc) = rank4(&out, "batchnorm output")?;
                    debug_assert_eq!(ob, b);
                    for (ch, map) in list {
                        let map_data = map.data();
                        for bi in 0..ob {
                            for y in 0..oh {
                                for x in 0..ow {
                                    let idx = ((bi * oh + y) * ow + x) * oc + ch;
                                    out.data_mut()[idx] = map_data[(bi * oh + y) * ow + x];
                                }
                            }
                        }
                    }
                }
                out
            }
            (LayerSpec::AvgPool { pool_h, pool_w }, LayerParams::None) => {
                avgpool_forward(&cur, *pool_h, *pool_w)?
            }
            (LayerSpec::Flatten, LayerParams::None) => {
                let n = cur.len() / b;
                cur.reshaped(&[b, n])?
            }
            (LayerSpec::Dense { units: _, activation }, LayerParams::Dense(p)) => {
                dense_forward(&cur, p, *activation)?
            }
            (LayerSpec::SoftmaxClassifier, LayerParams::Dense(p)) => {
                let mut logits = dense_forward(&cur, p, Activation::None)?;
                let classes = spec.class_count;
                for row in logits.data_mut().chunks_exact_mut(classes) {
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
        if capture {
            layer_outputs.push(cur.clone());
        }
    }

    Ok(ForwardTrace {
        layer_outputs,
        probabilities: cur,
    })
}

/// Convenience wrapper: runs a single `[h, w, c]` example and returns its
/// probability vector.
pub fn forward_single<T: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    example: &Tensor<T>,
) -> Result<Vec<T>> {
    let (h, w, c) = match *example.shape() {
        [h, w, c] => (h, w, c),
        _ => {
            return Err(Error::shape(
                "network input",
                "rank-3 tensor [h, w, c]",
                format!("{:?}", example.shape()),
            ))
        }
    };
    let batch = Tensor::from_vec(&[1, h, w, c], example.data().to_vec())?;
    let trace = forward(spec, params, &batch, false)?;
    Ok(trace.probabilities.data().to_vec())
}
