//! On-disk model container.
//!
//! A model is a directory holding `manifest.toml` plus one binary blob per
//! weight or bias array:
//!
//! | precision | weights                         | biases                     |
//! |-----------|---------------------------------|----------------------------|
//! | float32   | `*.w.f32`, little-endian `f32`  | `*.b.f32`, little-endian `f32` |
//! | mf_dfp    | `*.w.po2`, packed 4-bit codes   | `*.b.i32`, little-endian `i32` at frac `m + 7` |
//!
//! Blob names are derived from the layer index and name, so saving the same
//! network twice produces byte-identical directories.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::graph::{
    validate_graph, Bias, LayerOp, LayerSpec, NetworkDef, Precision, Shape3, Violation, Weights,
};
use crate::po2::{pack4, unpack4, Po2Blob, Po2Error};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const FORMAT_NAME: &str = "mfdfp-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("model not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },
    #[error("missing blob {0}")]
    MissingBlob(PathBuf),
    #[error("blob {path} has {actual} bytes, expected {expected}")]
    BlobLength {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch at layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },
    #[error("invalid network: {}", join(.0))]
    Invalid(Vec<Violation>),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Po2(#[from] Po2Error),
}

fn join(vs: &[Violation]) -> String {
    vs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub precision: Precision,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    pub classes: usize,
    #[serde(default)]
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outputs: Option<usize>,
    /// `[height, width]`
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default)]
    pub m: i32,
    #[serde(default)]
    pub n: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
}

impl LayerEntry {
    fn from_spec(index: usize, layer: &LayerSpec, precision: Precision) -> Self {
        let mut e = LayerEntry {
            name: layer.name.clone(),
            kind: layer.op.kind().to_string(),
            in_channels: None,
            out_channels: None,
            inputs: None,
            outputs: None,
            kernel: None,
            stride: None,
            padding: None,
            m: layer.m,
            n: layer.n,
            weights: None,
            bias: None,
        };
        match layer.op {
            LayerOp::Convolution {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                e.in_channels = Some(in_channels);
                e.out_channels = Some(out_channels);
                e.kernel = Some([kernel_h, kernel_w]);
                e.stride = Some(stride);
                e.padding = Some(padding);
            }
            LayerOp::FullyConnected { inputs, outputs } => {
                e.inputs = Some(inputs);
                e.outputs = Some(outputs);
            }
            LayerOp::MaxPool { kernel, stride } | LayerOp::AvgPool { kernel, stride } => {
                e.kernel = Some([kernel, kernel]);
                e.stride = Some(stride);
            }
            LayerOp::Relu => {}
        }
        let (wext, bext) = match precision {
            Precision::Float32 => ("w.f32", "b.f32"),
            Precision::MfDfp => ("w.po2", "b.i32"),
        };
        let stem = blob_stem(index, &layer.name);
        if layer.weights.is_some() {
            e.weights = Some(format!("{stem}.{wext}"));
        }
        if layer.bias.is_some() {
            e.bias = Some(format!("{stem}.{bext}"));
        }
        e
    }

    fn op(&self) -> Result<LayerOp, String> {
        let need = |v: Option<usize>, field: &str| {
            v.ok_or_else(|| format!("{} layer '{}' lacks `{field}`", self.kind, self.name))
        };
        let kernel = || {
            self.kernel
                .ok_or_else(|| format!("{} layer '{}' lacks `kernel`", self.kind, self.name))
        };
        match self.kind.as_str() {
            "convolution" => {
                let [kernel_h, kernel_w] = kernel()?;
                Ok(LayerOp::Convolution {
                    in_channels: need(self.in_channels, "in_channels")?,
                    out_channels: need(self.out_channels, "out_channels")?,
                    kernel_h,
                    kernel_w,
                    stride: self.stride.unwrap_or(1),
                    padding: self.padding.unwrap_or(0),
                })
            }
            "fully_connected" => Ok(LayerOp::FullyConnected {
                inputs: need(self.inputs, "inputs")?,
                outputs: need(self.outputs, "outputs")?,
            }),
            "max_pool" | "avg_pool" => {
                let [kh, kw] = kernel()?;
                if kh != kw {
                    return Err(format!("pool layer '{}' needs a square kernel", self.name));
                }
                let stride = self.stride.unwrap_or(kh);
                Ok(if self.kind == "max_pool" {
                    LayerOp::MaxPool { kernel: kh, stride }
                } else {
                    LayerOp::AvgPool { kernel: kh, stride }
                })
            }
            "relu" => Ok(LayerOp::Relu),
            other => Err(format!("unknown layer kind '{other}'")),
        }
    }
}

fn blob_stem(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{index:03}_{clean}")
}

impl Manifest {
    pub fn from_network(net: &NetworkDef) -> Self {
        Manifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            precision: net.precision,
            input_shape: net.input_shape.dims(),
            classes: net.classes,
            layers: net
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerEntry::from_spec(i, l, net.precision))
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ContainerError + '_ {
    move |source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn manifest_path(dir: &Path) -> PathBuf {
    if dir.is_file() {
        dir.to_path_buf()
    } else {
        dir.join(MANIFEST_FILE)
    }
}

/// Parse a manifest without touching any blobs.
pub fn read_manifest(path: &Path) -> Result<Manifest, ContainerError> {
    let file = manifest_path(path);
    if !file.exists() {
        return Err(ContainerError::MissingFile(file));
    }
    let text = fs::read_to_string(&file).map_err(io_err(&file))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| ContainerError::MalformedManifest {
            path: file.clone(),
            reason: e.to_string(),
        })?;
    if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
        return Err(ContainerError::MalformedManifest {
            path: file,
            reason: format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            ),
        });
    }
    Ok(manifest)
}

fn read_blob(dir: &Path, name: &str, expected: usize) -> Result<Vec<u8>, ContainerError> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(ContainerError::MissingBlob(path));
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.len() != expected {
        return Err(ContainerError::BlobLength {
            path,
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn i32s(bytes: &[u8]) -> Vec<i32> {
    bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn build(manifest: &Manifest, dir: &Path, with_blobs: bool) -> Result<NetworkDef, ContainerError> {
    let malformed = |reason: String| ContainerError::MalformedManifest {
        path: dir.join(MANIFEST_FILE),
        reason,
    };
    let [c, h, w] = manifest.input_shape;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let op = entry.op().map_err(malformed)?;
        let mut layer = LayerSpec::new(entry.name.clone(), op).with_radix(entry.m, entry.n);
        if with_blobs {
            let (wc, bc) = op.param_counts();
            if let Some(name) = &entry.weights {
                layer.weights = Some(match manifest.precision {
                    Precision::Float32 => Weights::Float(f32s(&read_blob(dir, name, 4 * wc)?)),
                    Precision::MfDfp => {
                        let bytes = read_blob(dir, name, crate::po2::packed_len(wc))?;
                        Weights::Po2(unpack4(&Po2Blob::from_bytes(wc, bytes)?)?)
                    }
                });
            }
            if let Some(name) = &entry.bias {
                let bytes = read_blob(dir, name, 4 * bc)?;
                layer.bias = Some(match manifest.precision {
                    Precision::Float32 => Bias::Float(f32s(&bytes)),
                    Precision::MfDfp => Bias::Fixed(i32s(&bytes)),
                });
            }
        }
        layers.push(layer);
    }
    Ok(NetworkDef {
        input_shape: Shape3::new(c, h, w),
        precision: manifest.precision,
        classes: manifest.classes,
        layers,
    })
}

fn check(net: &NetworkDef, structural_only: bool) -> Result<(), ContainerError> {
    let violations: Vec<_> = validate_graph(net)
        .into_iter()
        .filter(|v| !structural_only || v.rule.is_structural())
        .collect();
    if let Some(v) = violations
        .iter()
        .find(|v| v.rule == crate::graph::Rule::ShapeMismatch)
    {
        return Err(ContainerError::ShapeMismatch {
            layer: v.layer.unwrap_or(0),
            detail: v.detail.clone(),
        });
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(ContainerError::Invalid(violations))
    }
}

/// Load and fully validate a model directory (or manifest path).
pub fn load_model(path: &Path) -> Result<NetworkDef, ContainerError> {
    let manifest = read_manifest(path)?;
    let dir = manifest_path(path)
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let net = build(&manifest, &dir, true)?;
    check(&net, false)?;
    Ok(net)
}

/// Load only the topology: blobs are neither required nor read.
pub fn load_topology(path: &Path) -> Result<NetworkDef, ContainerError> {
    let manifest = read_manifest(path)?;
    let net = build(&manifest, Path::new(""), false)?;
    check(&net, true)?;
    Ok(net)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ContainerError> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn save_model(net: &NetworkDef, dir: &Path) -> Result<(), ContainerError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest::from_network(net);
    for (layer, entry) in net.layers.iter().zip(&manifest.layers) {
        if let (Some(weights), Some(name)) = (&layer.weights, &entry.weights) {
            let bytes = match weights {
                Weights::Float(w) => w.iter().flat_map(|x| x.to_le_bytes()).collect(),
                Weights::Po2(w) => pack4(w).into_bytes(),
            };
            write_file(&dir.join(name), &bytes)?;
        }
        if let (Some(bias), Some(name)) = (&layer.bias, &entry.bias) {
            let bytes: Vec<u8> = match bias {
                Bias::Float(b) => b.iter().flat_map(|x| x.to_le_bytes()).collect(),
                Bias::Fixed(b) => b.iter().flat_map(|x| x.to_le_bytes()).collect(),
            };
            write_file(&dir.join(name), &bytes)?;
        }
    }
    write_file(&dir.join(MANIFEST_FILE), manifest.to_toml().as_bytes())
}
