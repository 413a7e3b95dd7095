//! Parameter, MAC and size accounting for a [`NetworkSpec`].
//!
//! Conventions, chosen so the accounting of pruned variants stays additive
//! and consistent across the toolkit:
//! - Conv2D: `C_out * (k_h * k_w * C_in + 1)` parameters and
//!   `H_out * W_out * C_out * k_h * k_w * C_in` MACs.
//! - BatchNorm: 4 parameters per channel (gamma, beta, and both moving
//!   statistics all ship with the model) and no MACs.
//! - AvgPool: no parameters, `H_out * W_out * C * p_h * p_w` MACs.
//! - Dense/classifier: `(in + 1) * out` parameters and `in * out` MACs.
//! - Bias adds, activations and softmax are not counted as MACs.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io;
use crate::nn::{LayerSpec, NetworkSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerComplexity {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

/// Deployment limits a model must fit into. Defaults to the
/// Cortex-M4-class budget of 128K parameters and 30M MACs per inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintGate {
    pub max_params: u64,
    pub max_macs: u64,
}

impl Default for ConstraintGate {
    fn default() -> Self {
        ConstraintGate {
            max_params: 128_000,
            max_macs: 30_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateReport {
    pub params_ok: bool,
    pub macs_ok: bool,
    /// `max - actual`; negative when the budget is exceeded.
    pub params_slack: i64,
    pub macs_slack: i64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub arch: String,
    pub layers: Vec<LayerComplexity>,
    pub total_params: u64,
    pub total_macs: u64,
    /// Exact on-disk size of the float32 model container.
    pub float32_file_bytes: u64,
    /// Exact on-disk size of the int8 model container.
    pub int8_file_bytes: u64,
    pub gate: Option<GateReport>,
}

fn layer_name(layer: &LayerSpec, conv_seen: &mut usize, pool_seen: &mut usize) -> String {
    match layer {
        LayerSpec::Conv2D { .. } => {
            *conv_seen += 1;
            format!("conv{}", *conv_seen)
        }
        LayerSpec::BatchNorm { .. } => format!("bn{}", *conv_seen),
        LayerSpec::AvgPool { .. } => {
            *pool_seen += 1;
            format!("pool{}", *pool_seen)
        }
        LayerSpec::Flatten => "flatten".into(),
        LayerSpec::Dense { .. } => "dense".into(),
        LayerSpec::SoftmaxClassifier => "classifier".into(),
    }
}

fn per_layer(spec: &NetworkSpec) -> Result<Vec<LayerComplexity>> {
    let shapes = spec.validate()?;
    let mut out = Vec::with_capacity(spec.layers.len());
    let mut conv_seen = 0;
    let mut pool_seen = 0;
    for (i, layer) in spec.layers.iter().enumerate() {
        let (in_h, in_w, in_c) = spec.layer_input_shape(&shapes, i);
        let (out_h, out_w, out_c) = shapes[i];
        let (params, macs) = match *layer {
            LayerSpec::Conv2D {
                filters,
                kernel_h,
                kernel_w,
                ..
            } => {
                let kernel = (kernel_h * kernel_w * in_c) as u64;
                (
                    filters as u64 * (kernel + 1),
                    (out_h * out_w * filters) as u64 * kernel,
                )
            }
            LayerSpec::BatchNorm { .. } => (4 * in_c as u64, 0),
            LayerSpec::AvgPool { pool_h, pool_w } => (
                0,
                (out_h * out_w * out_c) as u64 * (pool_h * pool_w) as u64,
            ),
            LayerSpec::Flatten => (0, 0),
            LayerSpec::Dense { units, .. } => {
                let inputs = (in_h * in_w * in_c) as u64;
                ((inputs + 1) * units as u64, inputs * units as u64)
            }
            LayerSpec::SoftmaxClassifier => {
                let inputs = (in_h * in_w * in_c) as u64;
                let outputs = spec.class_count as u64;
                ((inputs + 1) * outputs, inputs * outputs)
            }
        };
        out.push(LayerComplexity {
            name: layer_name(layer, &mut conv_seen, &mut pool_seen),
            params,
            macs,
        });
    }
    Ok(out)
}

/// Total trainable-plus-stored parameter count under the conventions above.
pub fn count_params(spec: &NetworkSpec) -> Result<u64> {
    Ok(per_layer(spec)?.iter().map(|l| l.params).sum())
}

/// Total multiply-accumulate operations for one inference.
pub fn count_macs(spec: &NetworkSpec) -> Result<u64> {
    Ok(per_layer(spec)?.iter().map(|l| l.macs).sum())
}

/// MAC count when some conv filters are not computed (their feature maps
/// arrive from elsewhere). `skipped` pairs a conv block ordinal (0 = first
/// conv layer) with the number of its filters to skip; downstream layers
/// still consume the full feature-map stack and are unchanged.
pub fn count_macs_skipping(spec: &NetworkSpec, skipped: &[(usize, usize)]) -> Result<u64> {
    let shapes = spec.validate()?;
    let layers = per_layer(spec)?;
    let conv_layers = spec.conv_layers();
    let mut total: u64 = layers.iter().map(|l| l.macs).sum();
    for &(ordinal, count) in skipped {
        let li = *conv_layers.get(ordinal).ok_or_else(|| {
            crate::error::Error::SharePlan(format!("no conv block with ordinal {ordinal}"))
        })?;
        let (out_h, out_w, out_c) = shapes[li];
        if count > out_c {
            return Err(crate::error::Error::SharePlan(format!(
                "cannot skip {count} of {out_c} filters in conv block {ordinal}"
            )));
        }
        debug_assert_eq!(layers[li].macs % out_c as u64, 0);
        let per_filter = layers[li].macs / out_c as u64;
        total -= per_filter * count as u64;
        let _ = (out_h, out_w);
    }
    Ok(total)
}

/// Full accounting of a spec: per-layer and total parameters and MACs plus
/// the exact container sizes at both precisions.
pub fn analyze(spec: &NetworkSpec) -> Result<ComplexityReport> {
    let layers = per_layer(spec)?;
    let total_params = layers.iter().map(|l| l.params).sum();
    let total_macs = layers.iter().map(|l| l.macs).sum();
    Ok(ComplexityReport {
        arch: spec.arch_string(),
        layers,
        total_params,
        total_macs,
        float32_file_bytes: io::serialized_len(spec, io::Precision::Float32)? as u64,
        int8_file_bytes: io::serialized_len(spec, io::Precision::Int8)? as u64,
        gate: None,
    })
}

/// Evaluates a report against a gate, returning per-constraint outcomes and
/// slack.
pub fn check_constraints(report: &ComplexityReport, gate: &ConstraintGate) -> GateReport {
    let params_ok = report.total_params <= gate.max_params;
    let macs_ok = report.total_macs <= gate.max_macs;
    GateReport {
        params_ok,
        macs_ok,
        params_slack: gate.max_params as i64 - report.total_params as i64,
        macs_slack: gate.max_macs as i64 - report.total_macs as i64,
        passed: params_ok && macs_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchConfig, Activation};

    #[test]
    fn lone_dense_params() {
        // (10 + 1) * 10
        let spec = NetworkSpec {
            input_shape: (1, 1, 10),
            layers: vec![LayerSpec::Flatten, LayerSpec::SoftmaxClassifier],
            class_count: 10,
        };
        assert_eq!(count_params(&spec).unwrap(), 110);
    }

    #[test]
    fn one_by_one_conv_single_mac() {
        let spec = NetworkSpec {
            input_shape: (1, 1, 1),
            layers: vec![
                LayerSpec::Conv2D {
                    filters: 1,
                    kernel_h: 1,
                    kernel_w: 1,
                    activation: Activation::None,
                },
                LayerSpec::BatchNorm {
                    activation: Activation::None,
                },
                LayerSpec::Flatten,
                LayerSpec::SoftmaxClassifier,
            ],
            class_count: 2,
        };
        let layers = per_layer(&spec).unwrap();
        assert_eq!(layers[0].macs, 1);
    }

    #[test]
    fn default_arch_reference_counts() {
        let spec = ArchConfig::default().build();
        assert_eq!(count_params(&spec).unwrap(), 14886);
        assert_eq!(count_macs(&spec).unwrap(), 5_404_520);
    }

    #[test]
    fn params_additive_over_layers() {
        let spec = ArchConfig::default().build();
        let report = analyze(&spec).unwrap();
        let sum: u64 = report.layers.iter().map(|l| l.params).sum();
        assert_eq!(sum, report.total_params);
        let sum: u64 = report.layers.iter().map(|l| l.macs).sum();
        assert_eq!(sum, report.total_macs);
    }

    #[test]
    fn gate_slack_reported() {
        let spec = ArchConfig::default().build();
        let report = analyze(&spec).unwrap();
        let gate = check_constraints(&report, &ConstraintGate::default());
        assert!(gate.passed);
        assert_eq!(gate.params_slack, 128_000 - 14886);
    }

    #[test]
    fn skipping_filters_reduces_conv_macs_only() {
        let spec = ArchConfig::default().build();
        let full = count_macs(&spec).unwrap();
        let skipped = count_macs_skipping(&spec, &[(0, 7)]).unwrap();
        // C1 per-filter cost: 40*51*3*3*1
        assert_eq!(full - skipped, 7 * 40 * 51 * 9);
    }
}
