//! Ensembles of pruned networks: probability aggregation, cross-network
//! feature-map similarity, and deduplicated inference that substitutes
//! feature maps several members compute identically.
//!
//! Members descend from one parent network, so filters are matched across
//! members by provenance id rather than by position.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::complexity;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    forward, forward_with_overrides, ConvOverrides, LayerParams, LayerSpec, NetworkParams,
    NetworkSpec,
};
use crate::tensor::Tensor;
use crate::trainer::{metrics_from_probs, Evaluation};

#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub name: String,
    pub spec: NetworkSpec,
    pub params: NetworkParams<f32>,
}

/// Ordered member list; predictions aggregate by arithmetic mean.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<EnsembleMember>,
}

impl Ensemble {
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::SharePlan("ensemble needs at least one member".into()))?;
        let (shape, classes) = (first.spec.input_shape, first.spec.class_count);
        for m in &members {
            m.params.validate(&m.spec)?;
            if m.spec.input_shape != shape || m.spec.class_count != classes {
                return Err(Error::shape(
                    format!("ensemble member {}", m.name),
                    format!("input {shape:?}, {classes} classes"),
                    format!(
                        "input {:?}, {} classes",
                        m.spec.input_shape, m.spec.class_count
                    ),
                ));
            }
        }
        Ok(Ensemble { members })
    }

    /// Total parameters across members (ensembles ship every member).
    pub fn total_params(&self) -> Result<u64> {
        let mut total = 0;
        for m in &self.members {
            total += complexity::count_params(&m.spec)?;
        }
        Ok(total)
    }

    pub fn total_macs(&self) -> Result<u64> {
        let mut total = 0;
        for m in &self.members {
            total += complexity::count_macs(&m.spec)?;
        }
        Ok(total)
    }
}

/// Elementwise arithmetic mean of probability vectors.
pub fn aggregate(rows: &[&[f32]]) -> Result<Vec<f32>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::SharePlan("nothing to aggregate".into()))?;
    let n = first.len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n {
            return Err(Error::shape(
                format!("probability vector {i}"),
                format!("{n}"),
                format!("{}", r.len()),
            ));
        }
    }
    let mut out = vec![0.0f32; n];
    for r in rows {
        for (o, v) in out.iter_mut().zip(*r) {
            *o += *v;
        }
    }
    let inv = 1.0 / rows.len() as f32;
    for o in &mut out {
        *o *= inv;
    }
    Ok(out)
}

/// Aggregated squared error between two members' feature maps at one conv
/// block, per matched provenance id: the sum over all evaluation examples
/// and spatial positions of squared differences of the post-activation
/// maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseEntry {
    pub provenance_id: u32,
    pub index_a: usize,
    pub index_b: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub member_a: usize,
    pub member_b: usize,
    pub conv_ordinal: usize,
    pub entries: Vec<MseEntry>,
}

impl MseReport {
    /// Re-addresses the report to ensemble member positions (the compare
    /// function itself labels the models 0 and 1).
    pub fn with_members(mut self, a: usize, b: usize) -> Self {
        self.member_a = a;
        self.member_b = b;
        self
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("provenance_id,index_a,index_b,aggregated_mse\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.provenance_id, e.index_a, e.index_b, e.mse
            ));
        }
        out
    }
}

fn bn_layer_of(spec: &NetworkSpec, conv_ordinal: usize) -> Result<usize> {
    let conv_layers = spec.conv_layers();
    let li = *conv_layers.get(conv_ordinal).ok_or_else(|| {
        Error::SharePlan(format!("no conv block with ordinal {conv_ordinal}"))
    })?;
    match spec.layers.get(li + 1) {
        Some(LayerSpec::BatchNorm { .. }) => Ok(li + 1),
        _ => Err(Error::InvalidSpec(format!(
            "conv layer {li} not followed by batch-norm"
        ))),
    }
}

fn conv_provenance<'a>(
    spec: &NetworkSpec,
    params: &'a NetworkParams<f32>,
    conv_ordinal: usize,
) -> Result<&'a [u32]> {
    let li = spec.conv_layers()[conv_ordinal];
    match &params.layers[li] {
        LayerParams::Conv(p) => Ok(&p.provenance),
        _ => Err(Error::InvalidSpec(format!("layer {li} is not conv"))),
    }
}

/// Compares the post-activation feature maps of two models at one conv
/// block over a dataset, matched by provenance id. Fails when the models
/// share no provenance at that block.
pub fn feature_map_mse(
    a: &EnsembleMember,
    b: &EnsembleMember,
    conv_ordinal: usize,
    dataset: &Dataset,
) -> Result<MseReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let bn_a = bn_layer_of(&a.spec, conv_ordinal)?;
    let bn_b = bn_layer_of(&b.spec, conv_ordinal)?;
    let prov_a = conv_provenance(&a.spec, &a.params, conv_ordinal)?;
    let prov_b = conv_provenance(&b.spec, &b.params, conv_ordinal)?;
    let mut matched: Vec<(u32, usize, usize)> = Vec::new();
    for (ia, id) in prov_a.iter().enumerate() {
        if let Some(ib) = prov_b.iter().position(|x| x == id) {
            matched.push((*id, ia, ib));
        }
    }
    if matched.is_empty() {
        return Err(Error::SharePlan(format!(
            "no common provenance between {} and {} at conv block {conv_ordinal}",
            a.name, b.name
        )));
    }

    let mut sums = vec![0.0f64; matched.len()];
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(64) {
        let (batch, _) = dataset.batch(chunk)?;
        let trace_a = forward(&a.spec, &a.params, &batch, true)?;
        let trace_b = forward(&b.spec, &b.params, &batch, true)?;
        let map_a = &trace_a.layer_outputs[bn_a];
        let map_b = &trace_b.layer_outputs[bn_b];
        let (n, h, w, ca) = (
            map_a.shape()[0],
            map_a.shape()[1],
            map_a.shape()[2],
            map_a.shape()[3],
        );
        let cb = map_b.shape()[3];
        for bi in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let base_a = ((bi * h + y) * w + x) * ca;
                    let base_b = ((bi * h + y) * w + x) * cb;
                    for (s, (_, ia, ib)) in sums.iter_mut().zip(&matched) {
                        let d = map_a.data()[base_a + ia] as f64 - map_b.data()[base_b + ib] as f64;
                        *s += d * d;
                    }
                }
            }
        }
    }

    Ok(MseReport {
        member_a: 0,
        member_b: 1,
        conv_ordinal,
        entries: matched
            .into_iter()
            .zip(sums)
            .map(|((id, ia, ib), mse)| MseEntry {
                provenance_id: id,
                index_a: ia,
                index_b: ib,
                mse,
            })
            .collect(),
    })
}

/// One feature-map substitution: the consumer copies the provider's map
/// instead of computing its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareEdge {
    pub provider_member: usize,
    pub conv_ordinal: usize,
    pub provider_index: usize,
    pub consumer_member: usize,
    pub consumer_index: usize,
    pub aggregated_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SharePlan {
    pub edges: Vec<ShareEdge>,
}

impl SharePlan {
    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Builds a share plan from pairwise MSE reports: every matched map with
/// aggregated MSE at or below the threshold becomes a share edge. Chains
/// collapse: within each connected group of members sharing one provenance
/// id, the earliest member in ensemble order provides for all others.
pub fn build_share_plan(
    ensemble: &Ensemble,
    reports: &[MseReport],
    threshold: f64,
) -> Result<SharePlan> {
    let n = ensemble.members.len();
    // provenance id + conv ordinal -> adjacency among member indices
    let mut groups: BTreeMap<(usize, u32), Vec<(usize, usize, f64)>> = BTreeMap::new();
    for report in reports {
        if report.member_a >= n || report.member_b >= n || report.member_a == report.member_b {
            return Err(Error::SharePlan(format!(
                "report references members {} and {} in an ensemble of {n}",
                report.member_a, report.member_b
            )));
        }
        for e in &report.entries {
            if e.mse <= threshold {
                groups
                    .entry((report.conv_ordinal, e.provenance_id))
                    .or_default()
                    .push((report.member_a, report.member_b, e.mse));
            }
        }
    }

    fn find(parent: &mut BTreeMap<usize, usize>, m: usize) -> usize {
        let mut root = m;
        while let Some(&p) = parent.get(&root) {
            if p == root {
                break;
            }
            root = p;
        }
        parent.insert(m, root);
        root
    }

    let mut edges = Vec::new();
    for ((conv_ordinal, provenance_id), links) in groups {
        // connected components over member indices, linked by passing
        // edges; parent pointers always decrease, so the component root is
        // the earliest member
        let mut parent: BTreeMap<usize, usize> = BTreeMap::new();
        for (a, b, _) in &links {
            let ra = find(&mut parent, *a);
            let rb = find(&mut parent, *b);
            if ra != rb {
                parent.insert(ra.max(rb), ra.min(rb));
            }
        }
        let members_in_group: Vec<usize> = {
            let mut set: Vec<usize> = links
                .iter()
                .flat_map(|(a, b, _)| [*a, *b])
                .collect();
            set.sort_unstable();
            set.dedup();
            set
        };
        for m in members_in_group {
            let root = find(&mut parent, m);
            if root == m {
                continue; // provider of its component
            }
            let best_mse = links
                .iter()
                .filter(|(a, b, _)| *a == m || *b == m)
                .map(|(_, _, mse)| *mse)
                .fold(f64::INFINITY, f64::min);
            let provider_index = member_channel(ensemble, root, conv_ordinal, provenance_id)?;
            let consumer_index = member_channel(ensemble, m, conv_ordinal, provenance_id)?;
            edges.push(ShareEdge {
                provider_member: root,
                conv_ordinal,
                provider_index,
                consumer_member: m,
                consumer_index,
                aggregated_mse: best_mse,
            });
        }
    }
    edges.sort_by_key(|e| (e.consumer_member, e.conv_ordinal, e.consumer_index));
    Ok(SharePlan { edges })
}

fn member_channel(
    ensemble: &Ensemble,
    member: usize,
    conv_ordinal: usize,
    provenance_id: u32,
) -> Result<usize> {
    let m = &ensemble.members[member];
    let prov = conv_provenance(&m.spec, &m.params, conv_ordinal)?;
    prov.iter().position(|id| *id == provenance_id).ok_or_else(|| {
        Error::SharePlan(format!(
            "member {} has no filter with provenance {provenance_id} at conv block {conv_ordinal}",
            m.name
        ))
    })
}

/// Accounting of one deduplicated ensemble configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupAccounting {
    pub shared_maps: usize,
    /// MACs the consumers skip per inference.
    pub macs_saved: u64,
    /// Parameters the consumers would not need to ship (kernel slice, bias
    /// and 4 batch-norm values per shared filter).
    pub params_saved: u64,
    pub ensemble_params: u64,
    pub plain_macs: u64,
    pub dedup_macs: u64,
    /// Largest absolute probability difference against plain aggregation
    /// observed on the inputs seen so far.
    pub max_drift: f64,
}

fn validate_plan(ensemble: &Ensemble, plan: &SharePlan) -> Result<()> {
    let n = ensemble.members.len();
    let mut seen = std::collections::BTreeSet::new();
    for e in &plan.edges {
        if e.provider_member >= n || e.consumer_member >= n {
            return Err(Error::SharePlan(format!(
                "edge references member {} in an ensemble of {n}",
                e.provider_member.max(e.consumer_member)
            )));
        }
        if e.provider_member >= e.consumer_member {
            return Err(Error::SharePlan(
                "provider must precede consumer in ensemble order".into(),
            ));
        }
        if !seen.insert((e.consumer_member, e.conv_ordinal, e.consumer_index)) {
            return Err(Error::SharePlan(format!(
                "consumer map (member {}, block {}, channel {}) appears twice",
                e.consumer_member, e.conv_ordinal, e.consumer_index
            )));
        }
        for (member, index) in [
            (e.provider_member, e.provider_index),
            (e.consumer_member, e.consumer_index),
        ] {
            let m = &ensemble.members[member];
            let conv_layers = m.spec.conv_layers();
            let li = *conv_layers.get(e.conv_ordinal).ok_or_else(|| {
                Error::SharePlan(format!(
                    "member {} has no conv block {}",
                    m.name, e.conv_ordinal
                ))
            })?;
            let filters = match &m.spec.layers[li] {
                LayerSpec::Conv2D { filters, .. } => *filters,
                _ => unreachable!(),
            };
            if index >= filters {
                return Err(Error::SharePlan(format!(
                    "channel {index} out of range for member {} conv block {}",
                    m.name, e.conv_ordinal
                )));
            }
        }
    }
    Ok(())
}

fn extract_channel(map: &Tensor<f32>, channel: usize) -> Tensor<f32> {
    let (b, h, w, c) = (
        map.shape()[0],
        map.shape()[1],
        map.shape()[2],
        map.shape()[3],
    );
    let mut out = Vec::with_capacity(b * h * w);
    for px in map.data().chunks_exact(c) {
        out.push(px[channel]);
    }
    Tensor::from_vec(&[b, h, w], out).expect("sized by construction")
}

/// Static (input-independent) accounting of a plan.
pub fn plan_accounting(ensemble: &Ensemble, plan: &SharePlan) -> Result<DedupAccounting> {
    validate_plan(ensemble, plan)?;
    let mut macs_saved = 0u64;
    let mut params_saved = 0u64;
    for e in &plan.edges {
        let m = &ensemble.members[e.consumer_member];
        let shapes = m.spec.validate()?;
        let li = m.spec.conv_layers()[e.conv_ordinal];
        let (kh, kw) = match &m.spec.layers[li] {
            LayerSpec::Conv2D {
                kernel_h, kernel_w, ..
            } => (*kernel_h, *kernel_w),
            _ => unreachable!(),
        };
        let (in_h, in_w, in_c) = m.spec.layer_input_shape(&shapes, li);
        let (out_h, out_w, _) = shapes[li];
        debug_assert_eq!((in_h, in_w), (out_h, out_w));
        macs_saved += (out_h * out_w * kh * kw * in_c) as u64;
        params_saved += (kh * kw * in_c + 1 + 4) as u64;
    }
    let plain_macs = ensemble.total_macs()?;
    Ok(DedupAccounting {
        shared_maps: plan.edges.len(),
        macs_saved,
        params_saved,
        ensemble_params: ensemble.total_params()?,
        plain_macs,
        dedup_macs: plain_macs - macs_saved,
        max_drift: 0.0,
    })
}

/// Runs the ensemble over one batch. Members are evaluated in order;
/// consumers substitute each shared map from the provider's already
/// computed trace, then predictions aggregate by arithmetic mean.
/// Returns the aggregated probabilities and accounting including the
/// drift against plain (no-sharing) aggregation on this batch.
pub fn ensemble_infer(
    ensemble: &Ensemble,
    plan: &SharePlan,
    batch: &Tensor<f32>,
) -> Result<(Tensor<f32>, DedupAccounting)> {
    let mut accounting = plan_accounting(ensemble, plan)?;
    let n_members = ensemble.members.len();
    let is_provider: Vec<bool> = (0..n_members)
        .map(|m| plan.edges.iter().any(|e| e.provider_member == m))
        .collect();

    // plain pass (providers keep their traces; they are identical in the
    // dedup pass because overrides never touch a map that feeds itself)
    let mut plain_probs: Vec<Tensor<f32>> = Vec::with_capacity(n_members);
    let mut dedup_traces: Vec<Option<crate::nn::ForwardTrace<f32>>> = Vec::new();
    let mut dedup_probs: Vec<Tensor<f32>> = Vec::with_capacity(n_members);
    for (mi, member) in ensemble.members.iter().enumerate() {
        let consumer_edges: Vec<&ShareEdge> = plan
            .edges
            .iter()
            .filter(|e| e.consumer_member == mi)
            .collect();
        let mut overrides = ConvOverrides::new();
        for e in &consumer_edges {
            let provider_trace = dedup_traces[e.provider_member]
                .as_ref()
                .expect("providers precede consumers and keep captures");
            let bn_idx = bn_layer_of(&ensemble.members[e.provider_member].spec, e.conv_ordinal)?;
            let map = extract_channel(&provider_trace.layer_outputs[bn_idx], e.provider_index);
            overrides
                .per_conv
                .entry(e.conv_ordinal)
                .or_default()
                .push((e.consumer_index, map));
        }
        let capture = is_provider[mi];
        let dedup_trace = if consumer_edges.is_empty() && !capture {
            None
        } else {
            Some(forward_with_overrides(
                &member.spec,
                &member.params,
                batch,
                &overrides,
                capture,
            )?)
        };
        let plain_trace = if consumer_edges.is_empty() {
            match &dedup_trace {
                Some(t) => t.clone(),
                None => forward(&member.spec, &member.params, batch, false)?,
            }
        } else {
            forward(&member.spec, &member.params, batch, false)?
        };
        dedup_probs.push(
            dedup_trace
                .as_ref()
                .map(|t| t.probabilities.clone())
                .unwrap_or_else(|| plain_trace.probabilities.clone()),
        );
        plain_probs.push(plain_trace.probabilities);
        dedup_traces.push(dedup_trace);
    }

    let classes = ensemble.members[0].spec.class_count;
    let batch_n = batch.shape()[0];
    let mut plain_agg = vec![0.0f32; batch_n * classes];
    let mut dedup_agg = vec![0.0f32; batch_n * classes];
    for (p, d) in plain_probs.iter().zip(&dedup_probs) {
        for (o, v) in plain_agg.iter_mut().zip(p.data()) {
            *o += *v;
        }
        for (o, v) in dedup_agg.iter_mut().zip(d.data()) {
            *o += *v;
        }
    }
    let inv = 1.0 / n_members as f32;
    for (a, b) in plain_agg.iter_mut().zip(&mut dedup_agg) {
        *a *= inv;
        *b *= inv;
    }
    let drift = plain_agg
        .iter()
        .zip(&dedup_agg)
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    accounting.max_drift = drift;
    Ok((
        Tensor::from_vec(&[batch_n, classes], dedup_agg)?,
        accounting,
    ))
}

/// Evaluates the ensemble (optionally deduplicated) over a labeled dataset.
pub fn evaluate_ensemble(
    ensemble: &Ensemble,
    plan: &SharePlan,
    dataset: &Dataset,
) -> Result<(Evaluation, DedupAccounting)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = ensemble.members[0].spec.class_count;
    let mut accounting = plan_accounting(ensemble, plan)?;
    let mut probs = Vec::with_capacity(dataset.len() * classes);
    let mut labels = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(64) {
        let (batch, _) = dataset.batch(chunk)?;
        let (p, acc) = ensemble_infer(ensemble, plan, &batch)?;
        accounting.max_drift = accounting.max_drift.max(acc.max_drift);
        probs.extend_from_slice(p.data());
        labels.extend(chunk.iter().map(|i| dataset.examples[*i].label));
    }
    let probs = Tensor::from_vec(&[dataset.len(), classes], probs)?;
    let eval = metrics_from_probs(&probs, &labels, classes)?;
    Ok((eval, accounting))
}
