//! Post-training per-tensor INT8 affine quantization.
//!
//! Storage-only scheme: parameters are stored as int8 codes with one
//! (scale, zero point) pair per tensor and dequantized back to float before
//! compute. The quantization range always includes zero, so a real 0.0 maps
//! to an exact code and constant tensors dequantize exactly; this also makes
//! requantization of a dequantized tensor reproduce the same codes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerParams, NetworkParams, NetworkSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    /// Integer code representing real 0.0; always in [-128, 127].
    pub zero_point: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<i8>,
    pub params: QuantParams,
}

/// A whole network at INT8 storage precision: the spec, one quantized
/// payload per stored tensor (canonical order) and the conv provenance
/// table carried over unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub spec: NetworkSpec,
    pub tensors: Vec<QuantizedTensor>,
    pub provenance: Vec<Vec<u32>>,
}

/// Quantizes one tensor with an asymmetric affine code:
/// `scale = (max - min) / 255` over the zero-extended range,
/// `q = clamp(round(x / scale) + zero_point, -128, 127)` with
/// round-half-to-even.
pub fn quantize_tensor(values: &[f32]) -> Result<QuantizedTensor> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tensor being quantized".into()));
    }
    let mut lo = 0f32;
    let mut hi = 0f32;
    for v in values {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let scale = if hi == lo {
        1.0f32 // all-zero tensor after zero extension
    } else {
        ((hi as f64 - lo as f64) / 255.0) as f32
    };
    let zero_point = (-128.0 - (lo as f64 / scale as f64))
        .round_ties_even()
        .clamp(-128.0, 127.0) as i32;
    let codes = values
        .iter()
        .map(|v| {
            let q = (*v as f64 / scale as f64).round_ties_even() as i64 + zero_point as i64;
            q.clamp(-128, 127) as i8
        })
        .collect();
    Ok(QuantizedTensor {
        codes,
        params: QuantParams { scale, zero_point },
    })
}

#[inline]
pub fn dequantize_value(params: QuantParams, code: i8) -> f32 {
    (code as i32 - params.zero_point) as f32 * params.scale
}

pub fn dequantize_tensor(t: &QuantizedTensor) -> Vec<f32> {
    t.codes
        .iter()
        .map(|c| dequantize_value(t.params, *c))
        .collect()
}

/// Quantizes every stored tensor of a model (weights, biases, batch-norm
/// parameters and moving statistics alike).
pub fn quantize_network(spec: &NetworkSpec, params: &NetworkParams<f32>) -> Result<QuantizedModel> {
    params.validate(spec)?;
    let mut tensors = Vec::new();
    let mut failed = None;
    params.for_each_tensor(|t| {
        if failed.is_none() {
            match quantize_tensor(t) {
                Ok(q) => tensors.push(q),
                Err(e) => failed = Some(e),
            }
        }
    });
    if let Some(e) = failed {
        return Err(e);
    }
    let provenance = params
        .layers
        .iter()
        .filter_map(|l| match l {
            LayerParams::Conv(p) => Some(p.provenance.clone()),
            _ => None,
        })
        .collect();
    Ok(QuantizedModel {
        spec: spec.clone(),
        tensors,
        provenance,
    })
}

/// Reconstructs float parameters for inference. Moving variances are
/// floored at the smallest positive float: a channel variance that
/// quantized to the code for 0.0 would otherwise violate the
/// strictly-positive invariant, and the floor is invisible next to the
/// batch-norm epsilon.
pub fn dequantize_network(model: &QuantizedModel) -> Result<(NetworkSpec, NetworkParams<f32>)> {
    let shapes = model.spec.tensor_shapes()?;
    if shapes.len() != model.tensors.len() {
        return Err(Error::shape(
            "quantized model tensors",
            format!("{}", shapes.len()),
            format!("{}", model.tensors.len()),
        ));
    }
    for (shape, t) in shapes.iter().zip(&model.tensors) {
        let n: usize = shape.iter().product();
        if t.codes.len() != n {
            return Err(Error::shape(
                "quantized tensor payload",
                format!("{n}"),
                format!("{}", t.codes.len()),
            ));
        }
    }

    let mut it = shapes.iter().zip(&model.tensors);
    let mut next_vec = || -> Vec<f32> {
        let (_, t) = it.next().expect("tensor count checked above");
        dequantize_tensor(t)
    };
    let mut prov_it = model.provenance.iter();
    let mut layers = Vec::with_capacity(model.spec.layers.len());
    for (i, layer) in model.spec.layers.iter().enumerate() {
        use crate::nn::LayerSpec;
        layers.push(match layer {
            LayerSpec::Conv2D {
                filters,
                kernel_h,
                kernel_w,
                ..
            } => {
                let weights = next_vec();
                let bias = next_vec();
                let in_c = weights.len() / (filters * kernel_h * kernel_w);
                crate::nn::LayerParams::Conv(crate::nn::ConvParams {
                    weights: Tensor::from_vec(&[*filters, *kernel_h, *kernel_w, in_c], weights)?,
                    bias,
                    provenance: prov_it
                        .next()
                        .ok_or_else(|| {
                            Error::InvalidSpec(format!("layer {i}: missing provenance table"))
                        })?
                        .clone(),
                })
            }
            LayerSpec::BatchNorm { .. } => {
                let gamma = next_vec();
                let beta = next_vec();
                let moving_mean = next_vec();
                let moving_variance = next_vec()
                    .into_iter()
                    .map(|v| v.max(f32::MIN_POSITIVE))
                    .collect();
                crate::nn::LayerParams::BatchNorm(crate::nn::BatchNormParams {
                    gamma,
                    beta,
                    moving_mean,
                    moving_variance,
                })
            }
            LayerSpec::Dense { units, .. } => {
                let weights = next_vec();
                let bias = next_vec();
                let inputs = weights.len() / units;
                crate::nn::LayerParams::Dense(crate::nn::DenseParams {
                    weights: Tensor::from_vec(&[inputs, *units], weights)?,
                    bias,
                })
            }
            LayerSpec::SoftmaxClassifier => {
                let weights = next_vec();
                let bias = next_vec();
                let inputs = weights.len() / model.spec.class_count;
                crate::nn::LayerParams::Dense(crate::nn::DenseParams {
                    weights: Tensor::from_vec(&[inputs, model.spec.class_count], weights)?,
                    bias,
                })
            }
            LayerSpec::AvgPool { .. } | LayerSpec::Flatten => crate::nn::LayerParams::None,
        });
    }
    let params = NetworkParams { layers };
    params.validate(&model.spec)?;
    Ok((model.spec.clone(), params))
}
