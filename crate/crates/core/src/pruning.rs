//! Similarity-based filter pruning.
//!
//! Per conv layer: measure cosine similarity between flattened filter
//! weight vectors, greedily pair the most similar filters, drop the weaker
//! (smaller l1 norm) member of each pair, then rebuild the network so every
//! downstream tensor stays consistent. Surviving filters keep their
//! provenance ids, which is what lets feature maps of two differently
//! pruned children of one parent be matched later.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::nn::{ConvParams, LayerParams, LayerSpec, NetworkParams, NetworkSpec};
use crate::tensor::Tensor;

/// Cosine similarities between the flattened filters of one conv layer.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub conv_ordinal: usize,
    pub n: usize,
    /// Row-major n x n, symmetric with unit diagonal.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Pruning instructions for one conv layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub conv_ordinal: usize,
    /// Ordered (kept_index, removed_index) pairs; indices refer to the
    /// parent network's filter positions.
    pub pairs: Vec<(usize, usize)>,
    /// Provenance ids of the filters that survive this layer's pruning.
    pub surviving_provenance: Vec<u32>,
}

/// Per-layer pruning plan; serializable for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PrunePlan {
    pub layers: Vec<LayerPlan>,
}

impl PrunePlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn conv_at<'a>(
    spec: &NetworkSpec,
    params: &'a NetworkParams<f32>,
    conv_ordinal: usize,
) -> Result<(usize, &'a ConvParams<f32>)> {
    let conv_layers = spec.conv_layers();
    let li = *conv_layers.get(conv_ordinal).ok_or_else(|| {
        Error::PrunePlan(format!(
            "no conv layer with ordinal {conv_ordinal} (network has {})",
            conv_layers.len()
        ))
    })?;
    match &params.layers[li] {
        LayerParams::Conv(p) => Ok((li, p)),
        _ => Err(Error::PrunePlan(format!(
            "layer {li} is not a conv layer"
        ))),
    }
}

fn flat_filters(conv: &ConvParams<f32>) -> (usize, usize, Vec<f64>) {
    let n = conv.bias.len();
    let width = conv.weights.len() / n;
    let flat: Vec<f64> = conv.weights.data().iter().map(|v| *v as f64).collect();
    (n, width, flat)
}

/// Cosine similarity between the flattened weight vectors of every filter
/// pair in one conv layer (bias excluded). Rejects zero-norm filters, for
/// which the cosine is undefined.
pub fn filter_similarity(
    spec: &NetworkSpec,
    params: &NetworkParams<f32>,
    conv_ordinal: usize,
) -> Result<SimilarityMatrix> {
    let (_, conv) = conv_at(spec, params, conv_ordinal)?;
    let (n, width, flat) = flat_filters(conv);
    let norms: Vec<f64> = (0..n)
        .map(|f| {
            flat[f * width..(f + 1) * width]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    if let Some(f) = norms.iter().position(|v| *v == 0.0) {
        return Err(Error::PrunePlan(format!(
            "filter {f} in conv block {conv_ordinal} has zero norm; cosine similarity undefined"
        )));
    }
    let mut values = vec![0.0f64; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let dot: f64 = flat[i * width..(i + 1) * width]
                .iter()
                .zip(&flat[j * width..(j + 1) * width])
                .map(|(a, b)| a * b)
                .sum();
            let sim = dot / (norms[i] * norms[j]);
            values[i * n + j] = sim;
            values[j * n + i] = sim;
        }
    }
    Ok(SimilarityMatrix {
        conv_ordinal,
        n,
        values,
    })
}

/// Greedy closest-pair selection: repeatedly takes the highest-similarity
/// pair among filters not yet paired. Within a pair the filter with the
/// smaller l1 norm is removed (tie broken toward removing the higher
/// index). Ties in similarity resolve to the lexicographically smallest
/// index pair, so the result is deterministic.
pub fn select_redundant(
    matrix: &SimilarityMatrix,
    l1_norms: &[f64],
    count: usize,
) -> Result<Vec<(usize, usize)>> {
    let n = matrix.n;
    if l1_norms.len() != n {
        return Err(Error::PrunePlan(format!(
            "l1 norm vector length {} does not match {n} filters",
            l1_norms.len()
        )));
    }
    if 2 * count > n {
        return Err(Error::PrunePlan(format!(
            "cannot remove {count} of {n} filters: pairing needs 2*{count} <= {n}"
        )));
    }
    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            edges.push((i, j));
        }
    }
    edges.sort_by(|a, b| {
        matrix
            .get(b.0, b.1)
            .total_cmp(&matrix.get(a.0, a.1))
            .then(a.cmp(b))
    });
    let mut used = vec![false; n];
    let mut pairs = Vec::with_capacity(count);
    for (i, j) in edges {
        if pairs.len() == count {
            break;
        }
        if used[i] || used[j] {
            continue;
        }
        used[i] = true;
        used[j] = true;
        let remove_j = l1_norms[j] < l1_norms[i] || (l1_norms[j] == l1_norms[i] && j > i);
        pairs.push(if remove_j { (i, j) } else { (j, i) });
    }
    debug_assert_eq!(pairs.len(), count);
    Ok(pairs)
}

/// Builds a pruning plan for the given per-conv-block removal counts
/// (`counts[k]` filters removed from conv block `k`; zero skips the block).
pub fn plan_prune(
    spec: &NetworkSpec,
    params: &NetworkParams<f32>,
    counts: &[usize],
) -> Result<PrunePlan> {
    let conv_layers = spec.conv_layers();
    if counts.len() > conv_layers.len() {
        return Err(Error::PrunePlan(format!(
            "{} prune counts given but the network has {} conv layers",
            counts.len(),
            conv_layers.len()
        )));
    }
    let mut layers = Vec::new();
    for (ordinal, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let matrix = filter_similarity(spec, params, ordinal)?;
        let (_, conv) = conv_at(spec, params, ordinal)?;
        let (n, width, flat) = flat_filters(conv);
        let l1: Vec<f64> = (0..n)
            .map(|f| flat[f * width..(f + 1) * width].iter().map(|v| v.abs()).sum())
            .collect();
        let pairs = select_redundant(&matrix, &l1, count)?;
        let removed: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
        let surviving_provenance = conv
            .provenance
            .iter()
            .enumerate()
            .filter_map(|(i, id)| (!removed.contains(&i)).then_some(*id))
            .collect();
        layers.push(LayerPlan {
            conv_ordinal: ordinal,
            pairs,
            surviving_provenance,
        });
    }
    Ok(PrunePlan { layers })
}

fn gather_rows(weights: &Tensor<f32>, row_width: usize, rows: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.len() * row_width);
    for r in rows {
        out.extend_from_slice(&weights.data()[r * row_width..(r + 1) * row_width]);
    }
    out
}

fn validate_layer_plan(plan: &LayerPlan, filters: usize) -> Result<BTreeSet<usize>> {
    let mut seen = BTreeSet::new();
    for &(kept, removed) in &plan.pairs {
        if kept >= filters || removed >= filters {
            return Err(Error::PrunePlan(format!(
                "conv block {}: pair ({kept}, {removed}) out of range for {filters} filters",
                plan.conv_ordinal
            )));
        }
        if kept == removed || !seen.insert(kept) || !seen.insert(removed) {
            return Err(Error::PrunePlan(format!(
                "conv block {}: filter index appears in more than one pair",
                plan.conv_ordinal
            )));
        }
    }
    Ok(plan.pairs.iter().map(|p| p.1).collect())
}

/// Performs the surgery described by a plan: removed conv filters are
/// deleted together with their bias and batch-norm channel parameters, the
/// next conv layer drops the matching kernel input slices, and when the
/// pruned maps feed the flattened dense input, the matching weight rows
/// (`(h * W + w) * C + c` under (height, width, channel) row-major flatten
/// order) are dropped. Surviving filters keep their provenance ids.
pub fn apply_prune(
    spec: &NetworkSpec,
    params: &NetworkParams<f32>,
    plan: &PrunePlan,
) -> Result<(NetworkSpec, NetworkParams<f32>)> {
    params.validate(spec)?;
    let mut seen_ordinals = BTreeSet::new();
    for layer_plan in &plan.layers {
        if !seen_ordinals.insert(layer_plan.conv_ordinal) {
            return Err(Error::PrunePlan(format!(
                "conv block {} pruned twice in one plan",
                layer_plan.conv_ordinal
            )));
        }
    }

    let mut new_spec = spec.clone();
    let mut new_params = params.clone();
    let shapes = spec.validate()?;
    let conv_layers = spec.conv_layers();

    for layer_plan in &plan.layers {
        let li = *conv_layers.get(layer_plan.conv_ordinal).ok_or_else(|| {
            Error::PrunePlan(format!(
                "no conv layer with ordinal {}",
                layer_plan.conv_ordinal
            ))
        })?;
        let filters = match &spec.layers[li] {
            LayerSpec::Conv2D { filters, .. } => *filters,
            _ => unreachable!("conv_layers() returns conv indices"),
        };
        let removed = validate_layer_plan(layer_plan, filters)?;
        let kept: Vec<usize> = (0..filters).filter(|f| !removed.contains(f)).collect();

        // the pruned conv layer itself
        let conv = match &mut new_params.layers[li] {
            LayerParams::Conv(p) => p,
            _ => unreachable!(),
        };
        let width = conv.weights.len() / filters;
        let new_weights = gather_rows(&conv.weights, width, &kept);
        let kh = conv.weights.shape()[1];
        let kw = conv.weights.shape()[2];
        let cin = conv.weights.shape()[3];
        conv.weights = Tensor::from_vec(&[kept.len(), kh, kw, cin], new_weights)?;
        conv.bias = kept.iter().map(|f| conv.bias[*f]).collect();
        conv.provenance = kept.iter().map(|f| conv.provenance[*f]).collect();
        if !layer_plan.surviving_provenance.is_empty()
            && layer_plan.surviving_provenance != conv.provenance
        {
            return Err(Error::PrunePlan(format!(
                "conv block {}: surviving provenance in plan does not match params",
                layer_plan.conv_ordinal
            )));
        }
        match &mut new_spec.layers[li] {
            LayerSpec::Conv2D { filters, .. } => *filters = kept.len(),
            _ => unreachable!(),
        }

        // its batch-norm (the spec invariant guarantees it sits at li + 1)
        if let LayerParams::BatchNorm(bn) = &mut new_params.layers[li + 1] {
            bn.gamma = kept.iter().map(|f| bn.gamma[*f]).collect();
            bn.beta = kept.iter().map(|f| bn.beta[*f]).collect();
            bn.moving_mean = kept.iter().map(|f| bn.moving_mean[*f]).collect();
            bn.moving_variance = kept.iter().map(|f| bn.moving_variance[*f]).collect();
        } else {
            return Err(Error::PrunePlan(format!(
                "layer {li} is not followed by a batch-norm layer"
            )));
        }

        // downstream consumer of the pruned channels
        let (mut h, mut w, _) = shapes[li];
        let mut consumer_found = false;
        for j in (li + 2)..spec.layers.len() {
            match &spec.layers[j] {
                LayerSpec::AvgPool { pool_h, pool_w } => {
                    h /= pool_h;
                    w /= pool_w;
                }
                LayerSpec::Flatten | LayerSpec::BatchNorm { .. } => {}
                LayerSpec::Conv2D { .. } => {
                    let next = match &mut new_params.layers[j] {
                        LayerParams::Conv(p) => p,
                        _ => unreachable!(),
                    };
                    let [f2, kh2, kw2, cin2] = [
                        next.weights.shape()[0],
                        next.weights.shape()[1],
                        next.weights.shape()[2],
                        next.weights.shape()[3],
                    ];
                    debug_assert_eq!(cin2, filters);
                    let mut data = Vec::with_capacity(f2 * kh2 * kw2 * kept.len());
                    let old = next.weights.data();
                    for tap in 0..(f2 * kh2 * kw2) {
                        let base = tap * cin2;
                        for c in &kept {
                            data.push(old[base + c]);
                        }
                    }
                    next.weights = Tensor::from_vec(&[f2, kh2, kw2, kept.len()], data)?;
                    consumer_found = true;
                    break;
                }
                LayerSpec::Dense { .. } | LayerSpec::SoftmaxClassifier => {
                    let dense = match &mut new_params.layers[j] {
                        LayerParams::Dense(p) => p,
                        _ => unreachable!(),
                    };
                    let units = dense.weights.shape()[1];
                    let old_rows = dense.weights.shape()[0];
                    debug_assert_eq!(old_rows, h * w * filters);
                    let mut data = Vec::with_capacity(h * w * kept.len() * units);
                    let old = dense.weights.data();
                    for pos in 0..(h * w) {
                        for c in &kept {
                            let row = pos * filters + c;
                            data.extend_from_slice(&old[row * units..(row + 1) * units]);
                        }
                    }
                    dense.weights = Tensor::from_vec(&[h * w * kept.len(), units], data)?;
                    consumer_found = true;
                    break;
                }
            }
        }
        if !consumer_found {
            return Err(Error::PrunePlan(format!(
                "conv block {} has no downstream consumer to re-wire",
                layer_plan.conv_ordinal
            )));
        }
    }

    new_params.validate(&new_spec)?;
    Ok((new_spec, new_params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexity::count_params;
    use crate::nn::ArchConfig;

    fn table_net(seed: u64) -> (NetworkSpec, NetworkParams<f32>) {
        let spec = ArchConfig::default().build();
        let params = NetworkParams::init(&spec, seed).unwrap();
        (spec, params)
    }

    fn set_filter(conv: &mut ConvParams<f32>, f: usize, values: &[f32]) {
        let n = conv.bias.len();
        let width = conv.weights.len() / n;
        assert_eq!(values.len(), width);
        conv.weights.data_mut()[f * width..(f + 1) * width].copy_from_slice(values);
    }

    #[test]
    fn identical_and_orthogonal_filters() {
        let (spec, mut params) = table_net(0);
        let conv = match &mut params.layers[0] {
            LayerParams::Conv(p) => p,
            _ => unreachable!(),
        };
        let width = conv.weights.len() / conv.bias.len();
        let mut f0 = vec![0.0; width];
        f0[0] = 1.0;
        let mut f1 = vec![0.0; width];
        f1[1] = 1.0;
        let f2: Vec<f32> = f0.iter().map(|v| v * 2.0).collect();
        set_filter(conv, 0, &f0);
        set_filter(conv, 1, &f1);
        set_filter(conv, 2, &f2);
        let m = filter_similarity(&spec, &params, 0).unwrap();
        assert!((m.get(0, 1) - 0.0).abs() < 1e-12, "orthogonal");
        assert!((m.get(0, 2) - 1.0).abs() < 1e-12, "scale invariant");
        assert!((m.get(0, 0) - 1.0).abs() < 1e-12, "unit diagonal");
        assert_eq!(m.get(1, 2), m.get(2, 1), "symmetric");
    }

    #[test]
    fn zero_norm_filter_rejected_by_name() {
        let (spec, mut params) = table_net(0);
        let conv = match &mut params.layers[0] {
            LayerParams::Conv(p) => p,
            _ => unreachable!(),
        };
        let width = conv.weights.len() / conv.bias.len();
        set_filter(conv, 5, &vec![0.0; width]);
        let err = filter_similarity(&spec, &params, 0).unwrap_err();
        assert!(err.to_string().contains("filter 5"), "{err}");
    }

    #[test]
    fn duplicate_pair_selected_and_weaker_removed() {
        let (spec, mut params) = table_net(3);
        let conv = match &mut params.layers[0] {
            LayerParams::Conv(p) => p,
            _ => unreachable!(),
        };
        let width = conv.weights.len() / conv.bias.len();
        // filters 3 and 9: same direction, filter 9 weaker
        let strong: Vec<f32> = (0..width).map(|i| (i as f32 + 1.0) * 0.1).collect();
        let weak: Vec<f32> = strong.iter().map(|v| v * 0.5).collect();
        set_filter(conv, 3, &strong);
        set_filter(conv, 9, &weak);
        let plan = plan_prune(&spec, &params, &[1]).unwrap();
        assert_eq!(plan.layers.len(), 1);
        assert_eq!(plan.layers[0].pairs, vec![(3, 9)]);
    }

    #[test]
    fn selection_is_deterministic_across_reruns() {
        let (spec, params) = table_net(11);
        let a = plan_prune(&spec, &params, &[1, 0, 2]).unwrap();
        let b = plan_prune(&spec, &params, &[1, 0, 2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn count_too_large_rejected() {
        let (spec, params) = table_net(0);
        // C1 has 16 filters; 9 pairs would need 18 distinct filters
        assert!(plan_prune(&spec, &params, &[9]).is_err());
        assert!(plan_prune(&spec, &params, &[8]).is_ok());
    }

    #[test]
    fn reference_arch_strings_and_param_counts_after_surgery() {
        let (spec, params) = table_net(21);
        let cases: [(&[usize; 3], &str, u64); 3] = [
            (&[4, 0, 0], "12-16-32-100", 14254),
            (&[0, 4, 0], "16-12-32-100", 13138),
            (&[4, 4, 10], "12-12-22-100", 9520),
        ];
        for (counts, arch, expected) in cases {
            let plan = plan_prune(&spec, &params, counts).unwrap();
            let (pruned_spec, pruned_params) = apply_prune(&spec, &params, &plan).unwrap();
            assert_eq!(pruned_spec.arch_string(), arch);
            assert_eq!(count_params(&pruned_spec).unwrap(), expected);
            pruned_params.validate(&pruned_spec).unwrap();
        }
    }

    #[test]
    fn surviving_filters_keep_provenance() {
        let (spec, params) = table_net(5);
        let plan = plan_prune(&spec, &params, &[4]).unwrap();
        let (_, pruned) = apply_prune(&spec, &params, &plan).unwrap();
        let conv = match &pruned.layers[0] {
            LayerParams::Conv(p) => p,
            _ => unreachable!(),
        };
        assert_eq!(conv.provenance, plan.layers[0].surviving_provenance);
        assert_eq!(conv.provenance.len(), 12);
        let removed: Vec<u32> = plan.layers[0].pairs.iter().map(|p| p.1 as u32).collect();
        for id in &conv.provenance {
            assert!(!removed.contains(id));
        }
    }
}
