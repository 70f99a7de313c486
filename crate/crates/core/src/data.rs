//! Dataset and teacher-logit files, plus a synthetic Gaussian-blob generator.
//!
//! All files are little-endian.
//!
//! Tensor file: magic `MFDT`, `u8` element type (1 = f32), `u8` rank,
//! `u16` reserved (0), `rank × u32` dimensions, then the elements. The first
//! dimension counts samples; the rest is either `[features]` or `[c, h, w]`.
//!
//! Label file: magic `MFLB`, `u32` count, then `count × u32` class indices.
//!
//! Teacher-logit file: magic `MFDFPTL1`, `u32` sample count, `u32` class
//! count, `u8` zero-mean flag, three zero bytes, then per sample a `u32`
//! sample index followed by `classes × f64` logits, in increasing index order.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::engine::{float_forward, EngineError};
use crate::graph::{NetworkDef, Precision, Shape3};

const TENSOR_MAGIC: &[u8; 4] = b"MFDT";
const LABEL_MAGIC: &[u8; 4] = b"MFLB";
const LOGIT_MAGIC: &[u8; 8] = b"MFDFPTL1";
const DTYPE_F32: u8 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{inputs} inputs but {labels} labels")]
    CountMismatch { inputs: usize, labels: usize },
    #[error("sample {index}: label {label} outside {classes} classes")]
    LabelRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("sample {index}: non-finite value")]
    NonFinite { index: usize },
    #[error("input shape {expected} expected, dataset has {actual}")]
    ShapeMismatch { expected: Shape3, actual: Shape3 },
    #[error("teacher network must be float32")]
    NotFloat,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Malformed {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Little-endian cursor over a byte slice.
struct Reader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.bytes.len() < n {
            return Err(malformed(self.path, "truncated"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn finish(&self) -> Result<(), DataError> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(malformed(self.path, format!("{} trailing bytes", self.bytes.len())))
        }
    }
}

/// Labelled samples sharing one CHW input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: Shape3,
    pub classes: usize,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        shape: Shape3,
        classes: usize,
        inputs: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> Result<Self, DataError> {
        if inputs.len() != labels.len() {
            return Err(DataError::CountMismatch {
                inputs: inputs.len(),
                labels: labels.len(),
            });
        }
        for (index, (x, &label)) in inputs.iter().zip(&labels).enumerate() {
            if x.len() != shape.len() {
                return Err(DataError::ShapeMismatch {
                    expected: shape,
                    actual: Shape3::flat(x.len()),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { index });
            }
            if label >= classes {
                return Err(DataError::LabelRange {
                    index,
                    label,
                    classes,
                });
            }
        }
        Ok(Self {
            shape,
            classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// The samples at `indices`, re-indexed from zero.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            shape: self.shape,
            classes: self.classes,
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Split into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Read a tensor file and a label file. `classes` defaults to one more
    /// than the largest label.
    pub fn load(
        inputs: &Path,
        labels: &Path,
        classes: Option<usize>,
    ) -> Result<Self, DataError> {
        let (dims, values) = read_tensor_file(inputs)?;
        let labels = read_label_file(labels)?;
        let shape = match dims[1..] {
            [n] => Shape3::flat(n),
            [c, h, w] => Shape3::new(c, h, w),
            _ => return Err(malformed(inputs, format!("unsupported rank {}", dims.len()))),
        };
        let per = shape.len();
        let samples: Vec<Vec<f64>> = values
            .chunks(per.max(1))
            .take(dims[0])
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect();
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Self::new(shape, classes, samples, labels)
    }

    /// Write inputs (as f32) and labels.
    pub fn save(&self, inputs: &Path, labels: &Path) -> Result<(), DataError> {
        let mut dims = vec![self.len()];
        if self.shape.height == 1 && self.shape.width == 1 {
            dims.push(self.shape.channels);
        } else {
            dims.extend(self.shape.dims());
        }
        let flat: Vec<f32> = self.inputs.iter().flatten().map(|&v| v as f32).collect();
        write_tensor_file(inputs, &dims, &flat)?;
        write_label_file(labels, &self.labels)
    }
}

pub fn write_tensor_file(path: &Path, dims: &[usize], data: &[f32]) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Dimensions and elements of a tensor file.
pub fn read_tensor_file(path: &Path) -> Result<(Vec<usize>, Vec<f32>), DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut r = Reader { bytes: &bytes, path };
    if r.take(4)? != TENSOR_MAGIC {
        return Err(malformed(path, "not a tensor file"));
    }
    let head = r.take(4)?;
    if head[0] != DTYPE_F32 {
        return Err(malformed(path, format!("unsupported element type {}", head[0])));
    }
    let rank = head[1] as usize;
    if rank < 2 {
        return Err(malformed(path, "rank must be at least 2"));
    }
    let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
    let count: usize = dims.iter().product();
    let data = r
        .take(4 * count)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    r.finish()?;
    Ok((dims, data))
}

pub fn write_label_file(path: &Path, labels: &[usize]) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(8 + 4 * labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_label_file(path: &Path) -> Result<Vec<usize>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut r = Reader { bytes: &bytes, path };
    if r.take(4)? != LABEL_MAGIC {
        return Err(malformed(path, "not a label file"));
    }
    let n = r.u32()? as usize;
    let labels = (0..n).map(|_| r.u32().map(|l| l as usize)).collect::<Result<_, _>>()?;
    r.finish()?;
    Ok(labels)
}

/// Parameters of [`synthetic_blobs`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub features: usize,
    pub per_class: usize,
    /// Distance of every class centre from the origin.
    pub radius: f64,
    /// Standard deviation of the isotropic noise around each centre.
    pub spread: f64,
    pub seed: u64,
}

/// Gaussian clusters around random centres, in shuffled order.
pub fn synthetic_blobs(spec: &BlobSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centres: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.features).map(|_| unit.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x * spec.radius / norm).collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..spec.classes * spec.per_class).map(|i| i % spec.classes).collect();
    order.shuffle(&mut rng);
    let inputs = order
        .iter()
        .map(|&c| {
            centres[c]
                .iter()
                .map(|m| m + spec.spread * unit.sample(&mut rng))
                .collect()
        })
        .collect();
    Dataset::new(Shape3::flat(spec.features), spec.classes, inputs, order).expect("consistent by construction")
}

/// Float-network logits for every sample of a dataset, keyed by sample index.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLogits {
    pub classes: usize,
    pub zero_mean: bool,
    pub logits: Vec<Vec<f64>>,
}

impl TeacherLogits {
    pub fn get(&self, index: usize) -> &[f64] {
        &self.logits[index]
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.len() * (4 + 8 * self.classes));
        out.extend_from_slice(LOGIT_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&[self.zero_mean as u8, 0, 0, 0]);
        for (i, z) in self.logits.iter().enumerate() {
            out.extend_from_slice(&(i as u32).to_le_bytes());
            for v in z {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let mut r = Reader { bytes: &bytes, path };
        if r.take(8)? != LOGIT_MAGIC {
            return Err(malformed(path, "not a teacher-logit file"));
        }
        let count = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let flags = r.take(4)?;
        if flags[0] > 1 || flags[1..] != [0, 0, 0] {
            return Err(malformed(path, "bad flag bytes"));
        }
        let mut logits = Vec::with_capacity(count);
        for expected in 0..count {
            let index = r.u32()? as usize;
            if index != expected {
                return Err(malformed(path, format!("sample index {index} where {expected} expected")));
            }
            let z: Vec<f64> = (0..classes).map(|_| r.f64()).collect::<Result<_, _>>()?;
            if z.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { index });
            }
            logits.push(z);
        }
        r.finish()?;
        Ok(Self {
            classes,
            zero_mean: flags[0] == 1,
            logits,
        })
    }
}

/// Pre-softmax outputs of a float network on every sample, optionally mean-centred.
pub fn extract_teacher_logits(
    float_net: &NetworkDef,
    data: &Dataset,
    zero_mean: bool,
) -> Result<TeacherLogits, DataError> {
    if float_net.precision != Precision::Float32 {
        return Err(DataError::NotFloat);
    }
    if float_net.input_shape.len() != data.shape.len() {
        return Err(DataError::ShapeMismatch {
            expected: float_net.input_shape,
            actual: data.shape,
        });
    }
    let logits = data
        .inputs
        .iter()
        .enumerate()
        .map(|(index, x)| {
            let mut z = float_forward(float_net, x)?;
            if zero_mean {
                let m = z.iter().sum::<f64>() / z.len() as f64;
                z.iter_mut().for_each(|v| *v -= m);
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { index });
            }
            Ok(z)
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(TeacherLogits {
        classes: float_net.classes,
        zero_mean,
        logits,
    })
}
