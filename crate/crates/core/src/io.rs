//! Bit-exact model container and dataset manifest handling.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! header    magic "LCNN" | version u16 | precision u8 | reserved u8
//! spec      input h/w/c u32 | class_count u32 | layer_count u32
//!           per layer: kind u8 | activation u8 | reserved u16 | 4 x u32
//! prov      per conv layer: filter_count x u32 provenance ids
//! payload   tensors in canonical order
//!           float32: raw f32 values
//!           int8:    scale f32 | zero_point i32 | raw i8 codes
//! ```
//!
//! The payload length is derivable from the spec section alone, so a
//! truncated file is detected with the exact offset where data ran out.
//! Files are written to a temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::{
    Activation, BatchNormParams, ConvParams, DenseParams, LayerParams, LayerSpec, NetworkParams,
    NetworkSpec,
};
use crate::quant::{QuantParams, QuantizedModel, QuantizedTensor};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LCNN";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Float32,
    Int8,
}

/// The ten acoustic scene classes of the dataset convention this toolkit
/// targets; manifest labels must come from this vocabulary.
pub const SCENE_LABELS: [&str; 10] = [
    "airport",
    "bus",
    "metro",
    "metro_station",
    "park",
    "public_square",
    "shopping_mall",
    "street_pedestrian",
    "street_traffic",
    "tram",
];

/// A model loaded from disk, at whichever precision it was stored.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Float32 {
        spec: NetworkSpec,
        params: NetworkParams<f32>,
    },
    Int8(QuantizedModel),
}

impl LoadedModel {
    /// Float32 view of the model, dequantizing if needed.
    pub fn into_float(self) -> Result<(NetworkSpec, NetworkParams<f32>)> {
        match self {
            LoadedModel::Float32 { spec, params } => Ok((spec, params)),
            LoadedModel::Int8(qm) => crate::quant::dequantize_network(&qm),
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        match self {
            LoadedModel::Float32 { spec, .. } => spec,
            LoadedModel::Int8(qm) => &qm.spec,
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            LoadedModel::Float32 { .. } => Precision::Float32,
            LoadedModel::Int8(_) => Precision::Int8,
        }
    }
}

// ---------------------------------------------------------------- encoding

fn encode_spec(spec: &NetworkSpec, out: &mut Vec<u8>) {
    let (h, w, c) = spec.input_shape;
    for v in [h as u32, w as u32, c as u32, spec.class_count as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(spec.layers.len() as u32).to_le_bytes());
    for layer in &spec.layers {
        let (kind, act, fields): (u8, Activation, [u32; 4]) = match *layer {
            LayerSpec::Conv2D {
                filters,
                kernel_h,
                kernel_w,
                activation,
            } => (
                0,
                activation,
                [filters as u32, kernel_h as u32, kernel_w as u32, 0],
            ),
            LayerSpec::BatchNorm { activation } => (1, activation, [0; 4]),
            LayerSpec::AvgPool { pool_h, pool_w } => (
                2,
                Activation::None,
                [pool_h as u32, pool_w as u32, 0, 0],
            ),
            LayerSpec::Flatten => (3, Activation::None, [0; 4]),
            LayerSpec::Dense { units, activation } => (4, activation, [units as u32, 0, 0, 0]),
            LayerSpec::SoftmaxClassifier => (5, Activation::None, [0; 4]),
        };
        out.push(kind);
        out.push(match act {
            Activation::None => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        });
        out.extend_from_slice(&0u16.to_le_bytes());
        for f in fields {
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp_path = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("model")
        )),
        None => PathBuf::from(format!(
            ".{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("model")
        )),
    };
    let mut f = fs::File::create(&tmp_path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp_path, path)?;
    Ok(())
}

/// Serializes a float32 model to bytes.
pub fn encode_model_f32(spec: &NetworkSpec, params: &NetworkParams<f32>) -> Result<Vec<u8>> {
    params.validate(spec)?;
    let mut out = Vec::with_capacity(serialized_len(spec, Precision::Float32)?);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(0); // precision float32
    out.push(0);
    encode_spec(spec, &mut out);
    for layer in &params.layers {
        if let LayerParams::Conv(p) = layer {
            for id in &p.provenance {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
    }
    params.for_each_tensor(|t| {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    Ok(out)
}

/// Serializes an int8 model to bytes.
pub fn encode_model_int8(model: &QuantizedModel) -> Result<Vec<u8>> {
    let expected = tensor_sizes(&model.spec)?;
    if expected.len() != model.tensors.len() {
        return Err(Error::shape(
            "quantized model tensors",
            format!("{}", expected.len()),
            format!("{}", model.tensors.len()),
        ));
    }
    let mut out = Vec::with_capacity(serialized_len(&model.spec, Precision::Int8)?);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(1); // precision int8
    out.push(0);
    encode_spec(&model.spec, &mut out);
    for prov in &model.provenance {
        for id in prov {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    for (t, n) in model.tensors.iter().zip(&expected) {
        if t.codes.len() != *n {
            return Err(Error::shape(
                "quantized tensor payload",
                format!("{n}"),
                format!("{}", t.codes.len()),
            ));
        }
        out.extend_from_slice(&t.params.scale.to_le_bytes());
        out.extend_from_slice(&t.params.zero_point.to_le_bytes());
        out.extend(t.codes.iter().map(|v| *v as u8));
    }
    Ok(out)
}

/// Writes a float32 model atomically.
pub fn save_model(path: impl AsRef<Path>, spec: &NetworkSpec, params: &NetworkParams<f32>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_model_f32(spec, params)?)
}

/// Writes an int8 model atomically.
pub fn save_model_int8(path: impl AsRef<Path>, model: &QuantizedModel) -> Result<()> {
    write_atomic(path.as_ref(), &encode_model_int8(model)?)
}

// ---------------------------------------------------------------- decoding

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.offset as u64,
                reason: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        let b = self.take(4, what)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(4 * n, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset as u64,
            reason: reason.into(),
        }
    }
}

fn decode_spec(r: &mut Reader) -> Result<NetworkSpec> {
    let h = r.u32("input height")? as usize;
    let w = r.u32("input width")? as usize;
    let c = r.u32("input channels")? as usize;
    let class_count = r.u32("class count")? as usize;
    let layer_count = r.u32("layer count")? as usize;
    if layer_count > 1024 {
        return Err(r.err(format!("implausible layer count {layer_count}")));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let kind = r.u8("layer kind")?;
        let act = match r.u8("layer activation")? {
            0 => Activation::None,
            1 => Activation::Tanh,
            2 => Activation::Relu,
            other => return Err(r.err(format!("unknown activation tag {other}"))),
        };
        r.u16("layer reserved")?;
        let f: Vec<usize> = (0..4)
            .map(|_| r.u32("layer field").map(|v| v as usize))
            .collect::<Result<_>>()?;
        layers.push(match kind {
            0 => LayerSpec::Conv2D {
                filters: f[0],
                kernel_h: f[1],
                kernel_w: f[2],
                activation: act,
            },
            1 => LayerSpec::BatchNorm { activation: act },
            2 => LayerSpec::AvgPool {
                pool_h: f[0],
                pool_w: f[1],
            },
            3 => LayerSpec::Flatten,
            4 => LayerSpec::Dense {
                units: f[0],
                activation: act,
            },
            5 => LayerSpec::SoftmaxClassifier,
            other => return Err(r.err(format!("unknown layer kind tag {other}"))),
        });
    }
    Ok(NetworkSpec {
        input_shape: (h, w, c),
        layers,
        class_count,
    })
}

fn tensor_sizes(spec: &NetworkSpec) -> Result<Vec<usize>> {
    Ok(spec
        .tensor_shapes()?
        .iter()
        .map(|s| s.iter().product())
        .collect())
}

/// Exact byte length of the container for this spec at the given precision;
/// derivable without any parameter data.
pub fn serialized_len(spec: &NetworkSpec, precision: Precision) -> Result<usize> {
    let sizes = tensor_sizes(spec)?;
    let scalar_total: usize = sizes.iter().sum();
    let conv_filters: usize = spec
        .layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv2D { filters, .. } => *filters,
            _ => 0,
        })
        .sum();
    let header = 8;
    let spec_len = 20 + 20 * spec.layers.len();
    let prov = 4 * conv_filters;
    let payload = match precision {
        Precision::Float32 => 4 * scalar_total,
        Precision::Int8 => scalar_total + 8 * sizes.len(),
    };
    Ok(header + spec_len + prov + payload)
}

/// Parses a model container from bytes.
pub fn decode_model(bytes: &[u8]) -> Result<LoadedModel> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(r.err(format!(
            "unsupported format version {version} (supported: {FORMAT_VERSION})"
        )));
    }
    let precision = match r.u8("precision tag")? {
        0 => Precision::Float32,
        1 => Precision::Int8,
        other => return Err(r.err(format!("unknown precision tag {other}"))),
    };
    r.u8("reserved")?;
    let spec = decode_spec(&mut r)?;
    spec.validate()
        .map_err(|e| r.err(format!("stored spec invalid: {e}")))?;

    let mut provenance = Vec::new();
    for layer in &spec.layers {
        if let LayerSpec::Conv2D { filters, .. } = layer {
            let mut ids = Vec::with_capacity(*filters);
            for _ in 0..*filters {
                ids.push(r.u32("provenance id")?);
            }
            provenance.push(ids);
        }
    }

    let shapes = spec.tensor_shapes()?;
    match precision {
        Precision::Float32 => {
            let mut tensors: Vec<Vec<f32>> = Vec::with_capacity(shapes.len());
            for s in &shapes {
                tensors.push(r.f32_vec(s.iter().product(), "float32 tensor payload")?);
            }
            if r.offset != bytes.len() {
                return Err(r.err(format!("{} trailing bytes", bytes.len() - r.offset)));
            }
            let params = assemble_params(&spec, &shapes, tensors, &provenance)?;
            params.validate(&spec)?;
            Ok(LoadedModel::Float32 { spec, params })
        }
        Precision::Int8 => {
            let mut tensors = Vec::with_capacity(shapes.len());
            for s in &shapes {
                let n: usize = s.iter().product();
                let scale = r.f32("quant scale")?;
                let zero_point = r.i32("quant zero point")?;
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(r.err(format!("invalid quant scale {scale}")));
                }
                let codes = r
                    .take(n, "int8 tensor payload")?
                    .iter()
                    .map(|b| *b as i8)
                    .collect();
                tensors.push(QuantizedTensor {
                    codes,
                    params: QuantParams { scale, zero_point },
                });
            }
            if r.offset != bytes.len() {
                return Err(r.err(format!("{} trailing bytes", bytes.len() - r.offset)));
            }
            Ok(LoadedModel::Int8(QuantizedModel {
                spec,
                tensors,
                provenance,
            }))
        }
    }
}

fn assemble_params(
    spec: &NetworkSpec,
    shapes: &[Vec<usize>],
    tensors: Vec<Vec<f32>>,
    provenance: &[Vec<u32>],
) -> Result<NetworkParams<f32>> {
    let mut it = shapes.iter().zip(tensors);
    let mut next = |what: &str| {
        it.next()
            .ok_or_else(|| Error::Format {
                offset: 0,
                reason: format!("missing tensor {what}"),
            })
    };
    let mut prov_it = provenance.iter();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        layers.push(match layer {
            LayerSpec::Conv2D { .. } => {
                let (shape, w) = next("conv weights")?;
                let (_, b) = next("conv bias")?;
                LayerParams::Conv(ConvParams {
                    weights: Tensor::from_vec(shape, w)?,
                    bias: b,
                    provenance: prov_it
                        .next()
                        .ok_or_else(|| Error::Format {
                            offset: 0,
                            reason: "missing provenance table".into(),
                        })?
                        .clone(),
                })
            }
            LayerSpec::BatchNorm { .. } => {
                let (_, gamma) = next("bn gamma")?;
                let (_, beta) = next("bn beta")?;
                let (_, mean) = next("bn moving mean")?;
                let (_, var) = next("bn moving variance")?;
                LayerParams::BatchNorm(BatchNormParams {
                    gamma,
                    beta,
                    moving_mean: mean,
                    moving_variance: var,
                })
            }
            LayerSpec::Dense { .. } | LayerSpec::SoftmaxClassifier => {
                let (shape, w) = next("dense weights")?;
                let (_, b) = next("dense bias")?;
                LayerParams::Dense(DenseParams {
                    weights: Tensor::from_vec(shape, w)?,
                    bias: b,
                })
            }
            LayerSpec::AvgPool { .. } | LayerSpec::Flatten => LayerParams::None,
        });
    }
    Ok(NetworkParams { layers })
}

/// Reads a model container from disk.
pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let bytes = fs::read(path.as_ref())?;
    decode_model(&bytes)
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: String,
    pub label_index: usize,
}

/// Validated list of (file, scene label) pairs with a fixed 10-class
/// vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
}

/// Reads a `path,label` CSV, rejecting unknown labels and duplicate paths.
/// Row numbers in errors are 1-based data rows (the header is row 0).
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "path" || &headers[1] != "label" {
        return Err(Error::Manifest {
            row: 0,
            reason: format!("expected header \"path,label\", got {headers:?}"),
        });
    }
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() < 2 {
            return Err(Error::Manifest {
                row,
                reason: "expected two columns path,label".into(),
            });
        }
        let p = PathBuf::from(&record[0]);
        let label = record[1].to_string();
        let label_index = SCENE_LABELS
            .iter()
            .position(|l| *l == label)
            .ok_or_else(|| Error::Manifest {
                row,
                reason: format!(
                    "unknown label {label:?}; expected one of {:?}",
                    SCENE_LABELS
                ),
            })?;
        if !seen.insert(p.clone()) {
            return Err(Error::Manifest {
                row,
                reason: format!("duplicate path {:?}", p),
            });
        }
        rows.push(ManifestRow {
            path: p,
            label,
            label_index,
        });
    }
    Ok(DatasetManifest { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchConfig;
    use std::io::Write as _;

    #[test]
    fn float32_round_trip_is_bitwise() {
        let spec = ArchConfig {
            conv_filters: [3, 2, 4],
            input_shape: (10, 12, 1),
            pools: [(2, 2), (2, 3)],
            dense_units: 7,
            class_count: 4,
            ..ArchConfig::default()
        }
        .build();
        let params = NetworkParams::<f32>::init(&spec, 3).unwrap();
        let bytes = encode_model_f32(&spec, &params).unwrap();
        assert_eq!(bytes.len(), serialized_len(&spec, Precision::Float32).unwrap());
        match decode_model(&bytes).unwrap() {
            LoadedModel::Float32 {
                spec: spec2,
                params: params2,
            } => {
                assert_eq!(spec, spec2);
                assert_eq!(params, params2);
            }
            _ => panic!("expected float32 model"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let spec = ArchConfig::default().build();
        let params = NetworkParams::<f32>::init(&spec, 0).unwrap();
        let bytes = encode_model_f32(&spec, &params).unwrap();
        let err = decode_model(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset > 0),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let err = decode_model(b"NOPE").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn float32_payload_is_4x_param_count() {
        let spec = ArchConfig::default().build();
        let f32_len = serialized_len(&spec, Precision::Float32).unwrap();
        let int8_len = serialized_len(&spec, Precision::Int8).unwrap();
        let params = crate::complexity::count_params(&spec).unwrap() as usize;
        let overhead = 8 + 20 + 20 * spec.layers.len() + 4 * 64;
        assert_eq!(f32_len, overhead + 4 * params);
        // 22 tensors: 2+4 per conv block (x3), 2 dense, 2 classifier
        assert_eq!(int8_len, overhead + params + 8 * 22);
    }

    #[test]
    fn manifest_rejects_unknown_label_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");

        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "path,label\na.wav,bus\nb.wav,beach").unwrap();
        drop(f);
        let err = read_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("beach"), "{err}");
        assert!(err.to_string().contains("row 2"), "{err}");

        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "path,label\na.wav,bus\na.wav,tram").unwrap();
        drop(f);
        let err = read_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");

        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "path,label\na.wav,bus\nb.wav,tram").unwrap();
        drop(f);
        let m = read_manifest(&p).unwrap();
        assert_eq!(m.rows.len(), 2);
        assert_eq!(m.rows[1].label_index, 9);
    }
}
