//! Network description and parameter storage for the fixed layer vocabulary:
//! same-padded stride-1 convolutions, batch normalization, average pooling,
//! flatten, dense and a softmax classifier head.

mod backward;
mod forward;

pub use backward::{backward, training_loss, BackwardResult, Gradients};
pub use forward::{
    avgpool_forward, batchnorm_infer, batchnorm_train, conv2d_forward, dense_forward, forward,
    forward_single, forward_with_overrides, softmax, ConvOverrides, ForwardTrace,
};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Elementwise nonlinearity applied at the end of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    None,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::None => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::ZERO),
        }
    }

    /// Derivative expressed in terms of the activation output.
    pub fn grad_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::None => T::ONE,
            Activation::Tanh => T::ONE - y * y,
            Activation::Relu => {
                if y > T::ZERO {
                    T::ONE
                } else {
                    T::ZERO
                }
            }
        }
    }
}

/// One layer of the network. Convolutions are stride-1 with `same`
/// zero-padding; pooling is non-overlapping with stride equal to the pool
/// size and trailing remainder discarded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2D {
        filters: usize,
        kernel_h: usize,
        kernel_w: usize,
        activation: Activation,
    },
    BatchNorm {
        activation: Activation,
    },
    AvgPool {
        pool_h: usize,
        pool_w: usize,
    },
    Flatten,
    Dense {
        units: usize,
        activation: Activation,
    },
    SoftmaxClassifier,
}

/// Full architecture description: the unit of complexity accounting and of
/// pruning surgery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// (height, width, channels) of a single input.
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

/// Per-layer output shape, `(height, width, channels)`. Flattened and dense
/// outputs are `(1, 1, n)`.
pub type Shape3 = (usize, usize, usize);

impl NetworkSpec {
    /// Derives every layer's output shape and checks the structural
    /// invariants: positive dimensions everywhere, every Conv2D immediately
    /// followed by a BatchNorm, pools no larger than their input, and a
    /// SoftmaxClassifier as the final layer.
    pub fn validate(&self) -> Result<Vec<Shape3>> {
        if self.class_count == 0 {
            return Err(Error::InvalidSpec("class_count must be >= 1".into()));
        }
        let (h0, w0, c0) = self.input_shape;
        if h0 == 0 || w0 == 0 || c0 == 0 {
            return Err(Error::InvalidSpec(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Conv2D {
                    filters,
                    kernel_h,
                    kernel_w,
                    ..
                } => {
                    if filters == 0 || kernel_h == 0 || kernel_w == 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: conv dimensions must be >= 1"
                        )));
                    }
                    match self.layers.get(i + 1) {
                        Some(LayerSpec::BatchNorm { .. }) => {}
                        _ => {
                            return Err(Error::InvalidSpec(format!(
                                "layer {i}: Conv2D must be immediately followed by BatchNorm"
                            )))
                        }
                    }
                    (cur.0, cur.1, filters)
                }
                LayerSpec::BatchNorm { .. } => cur,
                LayerSpec::AvgPool { pool_h, pool_w } => {
                    if pool_h == 0 || pool_w == 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: pool dimensions must be >= 1"
                        )));
                    }
                    if pool_h > cur.0 || pool_w > cur.1 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: pool {pool_h}x{pool_w} larger than input {}x{}",
                            cur.0, cur.1
                        )));
                    }
                    (cur.0 / pool_h, cur.1 / pool_w, cur.2)
                }
                LayerSpec::Flatten => (1, 1, cur.0 * cur.1 * cur.2),
                LayerSpec::Dense { units, .. } => {
                    if units == 0 {
                        return Err(Error::InvalidSpec(format!("layer {i}: units must be >= 1")));
                    }
                    (1, 1, units)
                }
                LayerSpec::SoftmaxClassifier => (1, 1, self.class_count),
            };
            if cur.0 == 0 || cur.1 == 0 || cur.2 == 0 {
                return Err(Error::InvalidSpec(format!(
                    "layer {i}: derived output shape {cur:?} has a zero dimension"
                )));
            }
            shapes.push(cur);
        }
        match self.layers.last() {
            Some(LayerSpec::SoftmaxClassifier) => {}
            _ => {
                return Err(Error::InvalidSpec(
                    "final layer must be SoftmaxClassifier".into(),
                ))
            }
        }
        Ok(shapes)
    }

    /// Input shape of layer `i` (output shape of the previous layer).
    pub fn layer_input_shape(&self, shapes: &[Shape3], i: usize) -> Shape3 {
        if i == 0 {
            self.input_shape
        } else {
            shapes[i - 1]
        }
    }

    /// Indices of the conv layers, in network order. Conv block `k`
    /// ("C1" is `k = 0`) lives at `conv_layers()[k]`, its batch-norm at the
    /// following index.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, LayerSpec::Conv2D { .. }).then_some(i))
            .collect()
    }

    /// Shapes of every stored tensor in canonical order (conv weights and
    /// bias, the four batch-norm vectors, dense weights and bias), derived
    /// from the spec alone. This order is the serialization and
    /// quantization order.
    pub fn tensor_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.validate()?;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (in_h, in_w, in_c) = self.layer_input_shape(&shapes, i);
            match *layer {
                LayerSpec::Conv2D {
                    filters,
                    kernel_h,
                    kernel_w,
                    ..
                } => {
                    out.push(vec![filters, kernel_h, kernel_w, in_c]);
                    out.push(vec![filters]);
                }
                LayerSpec::BatchNorm { .. } => {
                    for _ in 0..4 {
                        out.push(vec![in_c]);
                    }
                }
                LayerSpec::Dense { units, .. } => {
                    out.push(vec![in_h * in_w * in_c, units]);
                    out.push(vec![units]);
                }
                LayerSpec::SoftmaxClassifier => {
                    out.push(vec![in_h * in_w * in_c, self.class_count]);
                    out.push(vec![self.class_count]);
                }
                LayerSpec::AvgPool { .. } | LayerSpec::Flatten => {}
            }
        }
        Ok(out)
    }

    /// Compact architecture string, conv filter counts then dense units,
    /// e.g. "16-16-32-100".
    pub fn arch_string(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv2D { filters, .. } => parts.push(filters.to_string()),
                LayerSpec::Dense { units, .. } => parts.push(units.to_string()),
                _ => {}
            }
        }
        parts.join("-")
    }
}

/// Configurable knobs of the three-conv audio-scene architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub conv_filters: [usize; 3],
    pub kernel: usize,
    /// Activations for (C1, C2, C3, Dense).
    pub activations: [Activation; 4],
    pub dense_units: usize,
    pub class_count: usize,
    pub input_shape: (usize, usize, usize),
    pub pools: [(usize, usize); 2],
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            conv_filters: [16, 16, 32],
            kernel: 3,
            activations: [
                Activation::Tanh,
                Activation::Relu,
                Activation::Tanh,
                Activation::Tanh,
            ],
            dense_units: 100,
            class_count: 10,
            input_shape: (40, 51, 1),
            pools: [(5, 5), (4, 10)],
        }
    }
}

impl ArchConfig {
    /// Parses a "c1-c2-c3-dense" architecture string; all other knobs keep
    /// their defaults.
    pub fn parse(arch: &str) -> Result<Self> {
        let fields: Vec<usize> = arch
            .split('-')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad architecture string {arch:?}")))
            })
            .collect::<Result<_>>()?;
        if fields.len() != 4 {
            return Err(Error::Config(format!(
                "architecture string {arch:?} must have 4 fields (c1-c2-c3-dense)"
            )));
        }
        Ok(ArchConfig {
            conv_filters: [fields[0], fields[1], fields[2]],
            dense_units: fields[3],
            ..ArchConfig::default()
        })
    }

    /// Builds the spec: conv+BN blocks for C1..C3, pooling after C2 and C3,
    /// then flatten, dense and the classifier.
    pub fn build(&self) -> NetworkSpec {
        let [a1, a2, a3, ad] = self.activations;
        let conv = |filters: usize| LayerSpec::Conv2D {
            filters,
            kernel_h: self.kernel,
            kernel_w: self.kernel,
            activation: Activation::None,
        };
        NetworkSpec {
            input_shape: self.input_shape,
            layers: vec![
                conv(self.conv_filters[0]),
                LayerSpec::BatchNorm { activation: a1 },
                conv(self.conv_filters[1]),
                LayerSpec::BatchNorm { activation: a2 },
                LayerSpec::AvgPool {
                    pool_h: self.pools[0].0,
                    pool_w: self.pools[0].1,
                },
                conv(self.conv_filters[2]),
                LayerSpec::BatchNorm { activation: a3 },
                LayerSpec::AvgPool {
                    pool_h: self.pools[1].0,
                    pool_w: self.pools[1].1,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: self.dense_units,
                    activation: ad,
                },
                LayerSpec::SoftmaxClassifier,
            ],
            class_count: self.class_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `[filters, kernel_h, kernel_w, in_channels]`.
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    /// Filter identity, stable across pruning surgery: traces each filter
    /// back to its index in the original unpruned parent network.
    pub provenance: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub moving_mean: Vec<T>,
    pub moving_variance: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T = f32> {
    /// `[inputs, outputs]`.
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T = f32> {
    Conv(ConvParams<T>),
    BatchNorm(BatchNormParams<T>),
    Dense(DenseParams<T>),
    None,
}

/// All learned tensors of a network, aligned index-for-index with the
/// owning spec's layer list.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T = f32> {
    pub layers: Vec<LayerParams<T>>,
}

/// Normalization epsilon inside the batch-norm denominator.
pub const BN_EPSILON: f64 = 1e-3;
/// Momentum of the exponential moving average tracking batch statistics.
pub const BN_MOMENTUM: f64 = 0.99;

impl<T: Scalar> NetworkParams<T> {
    /// Fresh parameters: Glorot-uniform conv/dense weights, zero biases,
    /// identity batch-norm (gamma 1, beta 0, mean 0, variance 1) and
    /// provenance ids numbering each conv layer's filters 0..n.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let (in_h, in_w, in_c) = spec.layer_input_shape(&shapes, i);
            let _ = (in_h, in_w);
            let params = match *layer {
                LayerSpec::Conv2D {
                    filters,
                    kernel_h,
                    kernel_w,
                    ..
                } => {
                    let fan_in = (kernel_h * kernel_w * in_c) as f64;
                    let fan_out = (kernel_h * kernel_w * filters) as f64;
                    let weights = glorot_uniform(
                        &mut rng,
                        &[filters, kernel_h, kernel_w, in_c],
                        fan_in,
                        fan_out,
                    );
                    LayerParams::Conv(ConvParams {
                        weights,
                        bias: vec![T::ZERO; filters],
                        provenance: (0..filters as u32).collect(),
                    })
                }
                LayerSpec::BatchNorm { .. } => LayerParams::BatchNorm(BatchNormParams {
                    gamma: vec![T::ONE; in_c],
                    beta: vec![T::ZERO; in_c],
                    moving_mean: vec![T::ZERO; in_c],
                    moving_variance: vec![T::ONE; in_c],
                }),
                LayerSpec::Dense { units, .. } => {
                    let inputs = in_h * in_w * in_c;
                    let weights =
                        glorot_uniform(&mut rng, &[inputs, units], inputs as f64, units as f64);
                    LayerParams::Dense(DenseParams {
                        weights,
                        bias: vec![T::ZERO; units],
                    })
                }
                LayerSpec::SoftmaxClassifier => {
                    let inputs = in_h * in_w * in_c;
                    let weights = glorot_uniform(
                        &mut rng,
                        &[inputs, spec.class_count],
                        inputs as f64,
                        spec.class_count as f64,
                    );
                    LayerParams::Dense(DenseParams {
                        weights,
                        bias: vec![T::ZERO; spec.class_count],
                    })
                }
                LayerSpec::AvgPool { .. } | LayerSpec::Flatten => LayerParams::None,
            };
            layers.push(params);
        }
        Ok(NetworkParams { layers })
    }

    /// Checks tensor shapes against the owning spec, positive moving
    /// variances and per-layer provenance uniqueness.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let shapes = spec.validate()?;
        if self.layers.len() != spec.layers.len() {
            return Err(Error::shape(
                "NetworkParams::validate",
                format!("{} layers", spec.layers.len()),
                format!("{} layers", self.layers.len()),
            ));
        }
        for (i, (layer, params)) in spec.layers.iter().zip(&self.layers).enumerate() {
            let (in_h, in_w, in_c) = spec.layer_input_shape(&shapes, i);
            match (layer, params) {
                (
                    LayerSpec::Conv2D {
                        filters,
                        kernel_h,
                        kernel_w,
                        ..
                    },
                    LayerParams::Conv(p),
                ) => {
                    let expected = [*filters, *kernel_h, *kernel_w, in_c];
                    if p.weights.shape() != expected {
                        return Err(Error::shape(
                            format!("layer {i} conv weights"),
                            format!("{expected:?}"),
                            format!("{:?}", p.weights.shape()),
                        ));
                    }
                    if p.bias.len() != *filters || p.provenance.len() != *filters {
                        return Err(Error::shape(
                            format!("layer {i} conv bias/provenance"),
                            format!("{filters}"),
                            format!("{}/{}", p.bias.len(), p.provenance.len()),
                        ));
                    }
                    let mut seen = p.provenance.clone();
                    seen.sort_unstable();
                    seen.dedup();
                    if seen.len() != p.provenance.len() {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: duplicate provenance ids"
                        )));
                    }
                }
                (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm(p)) => {
                    for (name, v) in [
                        ("gamma", &p.gamma),
                        ("beta", &p.beta),
                        ("moving_mean", &p.moving_mean),
                        ("moving_variance", &p.moving_variance),
                    ] {
                        if v.len() != in_c {
                            return Err(Error::shape(
                                format!("layer {i} batchnorm {name}"),
                                format!("{in_c}"),
                                format!("{}", v.len()),
                            ));
                        }
                    }
                    if p.moving_variance.iter().any(|v| *v <= T::ZERO) {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: moving variance must be strictly positive"
                        )));
                    }
                }
                (LayerSpec::Dense { units, .. }, LayerParams::Dense(p)) => {
                    let inputs = in_h * in_w * in_c;
                    if p.weights.shape() != [inputs, *units] || p.bias.len() != *units {
                        return Err(Error::shape(
                            format!("layer {i} dense"),
                            format!("[{inputs}, {units}]"),
                            format!("{:?}", p.weights.shape()),
                        ));
                    }
                }
                (LayerSpec::SoftmaxClassifier, LayerParams::Dense(p)) => {
                    let inputs = in_h * in_w * in_c;
                    if p.weights.shape() != [inputs, spec.class_count]
                        || p.bias.len() != spec.class_count
                    {
                        return Err(Error::shape(
                            format!("layer {i} classifier"),
                            format!("[{inputs}, {}]", spec.class_count),
                            format!("{:?}", p.weights.shape()),
                        ));
                    }
                }
                (LayerSpec::AvgPool { .. } | LayerSpec::Flatten, LayerParams::None) => {}
                _ => {
                    return Err(Error::InvalidSpec(format!(
                        "layer {i}: params variant does not match spec layer"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Visits every trainable tensor in canonical order: per layer, conv
    /// weights then bias, batch-norm gamma then beta, dense weights then
    /// bias. Moving batch-norm statistics are not trainable.
    pub fn for_each_trainable_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        for layer in &mut self.layers {
            match layer {
                LayerParams::Conv(p) => {
                    f(p.weights.data_mut());
                    f(&mut p.bias);
                }
                LayerParams::BatchNorm(p) => {
                    f(&mut p.gamma);
                    f(&mut p.beta);
                }
                LayerParams::Dense(p) => {
                    f(p.weights.data_mut());
                    f(&mut p.bias);
                }
                LayerParams::None => {}
            }
        }
    }

    pub fn for_each_trainable(&self, mut f: impl FnMut(&[T])) {
        for layer in &self.layers {
            match layer {
                LayerParams::Conv(p) => {
                    f(p.weights.data());
                    f(&p.bias);
                }
                LayerParams::BatchNorm(p) => {
                    f(&p.gamma);
                    f(&p.beta);
                }
                LayerParams::Dense(p) => {
                    f(p.weights.data());
                    f(&p.bias);
                }
                LayerParams::None => {}
            }
        }
    }

    /// Names of the trainable tensors, aligned with the canonical order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::Conv(_) => {
                    names.push(format!("layer{i}.conv.weights"));
                    names.push(format!("layer{i}.conv.bias"));
                }
                LayerParams::BatchNorm(_) => {
                    names.push(format!("layer{i}.bn.gamma"));
                    names.push(format!("layer{i}.bn.beta"));
                }
                LayerParams::Dense(_) => {
                    names.push(format!("layer{i}.dense.weights"));
                    names.push(format!("layer{i}.dense.bias"));
                }
                LayerParams::None => {}
            }
        }
        names
    }

    /// Visits every stored tensor including moving statistics; the order is
    /// the serialization and quantization order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&[T])) {
        for layer in &self.layers {
            match layer {
                LayerParams::Conv(p) => {
                    f(p.weights.data());
                    f(&p.bias);
                }
                LayerParams::BatchNorm(p) => {
                    f(&p.gamma);
                    f(&p.beta);
                    f(&p.moving_mean);
                    f(&p.moving_variance);
                }
                LayerParams::Dense(p) => {
                    f(p.weights.data());
                    f(&p.bias);
                }
                LayerParams::None => {}
            }
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        for layer in &mut self.layers {
            match layer {
                LayerParams::Conv(p) => {
                    f(p.weights.data_mut());
                    f(&mut p.bias);
                }
                LayerParams::BatchNorm(p) => {
                    f(&mut p.gamma);
                    f(&mut p.beta);
                    f(&mut p.moving_mean);
                    f(&mut p.moving_variance);
                }
                LayerParams::Dense(p) => {
                    f(p.weights.data_mut());
                    f(&mut p.bias);
                }
                LayerParams::None => {}
            }
        }
    }

    /// Total stored scalar count (includes moving statistics).
    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|t| n += t.len());
        n
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let recast = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        NetworkParams {
            layers: self
                .layers
                .iter()
                .map(|layer| match layer {
                    LayerParams::Conv(p) => LayerParams::Conv(ConvParams {
                        weights: p.weights.cast(),
                        bias: recast(&p.bias),
                        provenance: p.provenance.clone(),
                    }),
                    LayerParams::BatchNorm(p) => LayerParams::BatchNorm(BatchNormParams {
                        gamma: recast(&p.gamma),
                        beta: recast(&p.beta),
                        moving_mean: recast(&p.moving_mean),
                        moving_variance: recast(&p.moving_variance),
                    }),
                    LayerParams::Dense(p) => LayerParams::Dense(DenseParams {
                        weights: p.weights.cast(),
                        bias: recast(&p.bias),
                    }),
                    LayerParams::None => LayerParams::None,
                })
                .collect(),
        }
    }
}

fn glorot_uniform<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: f64,
    fan_out: f64,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out)).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-limit..limit)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product consistent by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_arch_validates_with_expected_shapes() {
        let spec = ArchConfig::default().build();
        let shapes = spec.validate().unwrap();
        assert_eq!(shapes[0], (40, 51, 16)); // C1
        assert_eq!(shapes[3], (40, 51, 16)); // C2 + BN
        assert_eq!(shapes[4], (8, 10, 16)); // P1
        assert_eq!(shapes[6], (8, 10, 32)); // C3 + BN
        assert_eq!(shapes[7], (2, 1, 32)); // P2
        assert_eq!(shapes[8], (1, 1, 64)); // flatten
        assert_eq!(shapes[9], (1, 1, 100)); // dense
        assert_eq!(shapes[10], (1, 1, 10)); // classifier
        assert_eq!(spec.arch_string(), "16-16-32-100");
    }

    #[test]
    fn conv_without_bn_rejected() {
        let mut spec = ArchConfig::default().build();
        spec.layers.remove(1);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn pool_larger_than_input_rejected() {
        let spec = NetworkSpec {
            input_shape: (3, 3, 1),
            layers: vec![
                LayerSpec::AvgPool { pool_h: 4, pool_w: 1 },
                LayerSpec::Flatten,
                LayerSpec::SoftmaxClassifier,
            ],
            class_count: 2,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn arch_parse_round_trips() {
        let cfg = ArchConfig::parse("12-12-22-100").unwrap();
        assert_eq!(cfg.conv_filters, [12, 12, 22]);
        assert_eq!(cfg.dense_units, 100);
        assert_eq!(cfg.build().arch_string(), "12-12-22-100");
        assert!(ArchConfig::parse("12-12").is_err());
        assert!(ArchConfig::parse("a-b-c-d").is_err());
    }

    #[test]
    fn init_matches_spec_and_is_seed_deterministic() {
        let spec = ArchConfig::default().build();
        let a = NetworkParams::<f32>::init(&spec, 7).unwrap();
        let b = NetworkParams::<f32>::init(&spec, 7).unwrap();
        let c = NetworkParams::<f32>::init(&spec, 8).unwrap();
        a.validate(&spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn trainable_excludes_moving_stats() {
        let spec = ArchConfig::default().build();
        let params = NetworkParams::<f32>::init(&spec, 0).unwrap();
        let mut trainable = 0usize;
        params.for_each_trainable(|t| trainable += t.len());
        let mut all = 0usize;
        params.for_each_tensor(|t| all += t.len());
        // moving mean + variance: 2 per batch-norm channel (16 + 16 + 32)
        assert_eq!(all - trainable, 2 * (16 + 16 + 32));
    }
}
