//! `.ditf` / `.ditq` checkpoint files.
//!
//! Both start with a 4-byte magic, a little-endian `u32` version and the
//! seven config fields as little-endian `i32` in the order `dim, hidden_dim,
//! n_layers, n_heads, n_kv_heads, vocab_size, max_seq_len`. The tensors of
//! [`ModelConfig::tensor_specs`] follow in that order.
//!
//! * `DITF`: every tensor as row-major little-endian `f32`.
//! * `DITQ`: vectors as `f32`; every matrix as a record `{u8 b, u32 M,
//!   u32 N, 2^b f32 centroids, ceil(M*N*b/8) payload bytes, 1 guard byte}`.
//!   After the last tensor comes a trailer holding the per-matrix error
//!   bound: `u32 count` then `count` `f32` values in matrix order.

use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;

use super::{ModelConfig, RuntimeError, TensorKind, TensorSpec};
use crate::bitcodec::{payload_len, PackedBuffer};
use crate::quantizer::{quantize_matrix, Codebook, Matrix, QuantConfig, QuantizedMatrix};

pub const FLOAT_MAGIC: [u8; 4] = *b"DITF";
pub const QUANT_MAGIC: [u8; 4] = *b"DITQ";
pub const FORMAT_VERSION: u32 = 1;

/// A full-precision model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// One entry per [`ModelConfig::tensor_specs`] item, same order.
    pub tensors: Vec<Arc<[f32]>>,
}

/// One tensor of a compressed model.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantizedTensor {
    Dense(Arc<[f32]>),
    Quantized(Arc<QuantizedMatrix>),
}

/// A model whose matrices are codebook-quantized; gain vectors stay `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCheckpoint {
    pub config: ModelConfig,
    pub tensors: Vec<QuantizedTensor>,
}

/// Uniform draw in `[-1, 1)` from the top 24 bits of one output.
fn unit(rng: &mut SplitMix64) -> f32 {
    (rng.next_u64() >> 40) as f32 / (1u64 << 23) as f32 - 1.0
}

fn io_context(e: io::Error, what: &str) -> RuntimeError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        RuntimeError::Truncated(what.to_string())
    } else {
        RuntimeError::Io(e)
    }
}

fn write_header(w: &mut impl Write, magic: [u8; 4], c: &ModelConfig) -> io::Result<()> {
    w.write_all(&magic)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    for v in [
        c.dim,
        c.hidden_dim,
        c.n_layers,
        c.n_heads,
        c.n_kv_heads,
        c.vocab_size,
        c.max_seq_len,
    ] {
        w.write_i32::<LE>(v as i32)?;
    }
    Ok(())
}

fn read_header(r: &mut &[u8], magic: [u8; 4]) -> Result<ModelConfig, RuntimeError> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)
        .map_err(|e| io_context(e, "the header"))?;
    if found != magic {
        return Err(RuntimeError::BadMagic(found));
    }
    let version = r
        .read_u32::<LE>()
        .map_err(|e| io_context(e, "the header"))?;
    if version != FORMAT_VERSION {
        return Err(RuntimeError::UnsupportedVersion(version));
    }
    let mut f = [0i32; 7];
    r.read_i32_into::<LE>(&mut f)
        .map_err(|e| io_context(e, "the header"))?;
    if f.iter().any(|&v| v <= 0) {
        return Err(RuntimeError::InvalidConfig(format!(
            "non-positive field in {f:?}"
        )));
    }
    let [dim, hidden_dim, n_layers, n_heads, n_kv_heads, vocab_size, max_seq_len] =
        f.map(|v| v as usize);
    let config = ModelConfig {
        dim,
        hidden_dim,
        n_layers,
        n_heads,
        n_kv_heads,
        vocab_size,
        max_seq_len,
    };
    config.validate()?;
    Ok(config)
}

fn write_f32s(w: &mut impl Write, v: &[f32]) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&bytes)
}

fn read_f32s(r: &mut &[u8], n: usize, what: &str) -> Result<Vec<f32>, RuntimeError> {
    let mut v = vec![0f32; n];
    r.read_f32_into::<LE>(&mut v)
        .map_err(|e| io_context(e, what))?;
    Ok(v)
}

fn finish(r: &[u8]) -> Result<(), RuntimeError> {
    match r.len() {
        0 => Ok(()),
        n => Err(RuntimeError::TrailingBytes(n)),
    }
}

impl Checkpoint {
    /// Random weights: matrices uniform in `±1/sqrt(cols)`, gains `1 ± 0.1`.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self, RuntimeError> {
        config.validate()?;
        let mut rng = SplitMix64::seed_from_u64(seed);
        let tensors = config
            .tensor_specs()
            .iter()
            .map(|s| {
                let v: Vec<f32> = match s.kind {
                    TensorKind::Matrix => {
                        let scale = 1.0 / (s.cols as f32).sqrt();
                        (0..s.len()).map(|_| unit(&mut rng) * scale).collect()
                    }
                    TensorKind::Vector => {
                        (0..s.len()).map(|_| 1.0 + 0.1 * unit(&mut rng)).collect()
                    }
                };
                v.into()
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn new(config: ModelConfig, tensors: Vec<Arc<[f32]>>) -> Result<Self, RuntimeError> {
        config.validate()?;
        let specs = config.tensor_specs();
        if tensors.len() != specs.len() {
            return Err(RuntimeError::InvalidConfig(format!(
                "{} tensors given, {} required",
                tensors.len(),
                specs.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if t.len() != s.len() {
                return Err(RuntimeError::ExtentMismatch {
                    tensor: s.name.clone(),
                    expected: (s.rows, s.cols),
                    actual: (1, t.len()),
                });
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn tensor(&self, name: &str) -> Option<&Arc<[f32]>> {
        let idx = self
            .config
            .tensor_specs()
            .iter()
            .position(|s| s.name == name)?;
        self.tensors.get(idx)
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        write_header(w, FLOAT_MAGIC, &self.config)?;
        for t in &self.tensors {
            write_f32s(w, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RuntimeError> {
        let mut r = bytes;
        let config = read_header(&mut r, FLOAT_MAGIC)?;
        let tensors = config
            .tensor_specs()
            .iter()
            .map(|s| read_f32s(&mut r, s.len(), &format!("tensor `{}`", s.name)).map(Arc::from))
            .collect::<Result<_, _>>()?;
        finish(r)?;
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RuntimeError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, RuntimeError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedCheckpoint, RuntimeError> {
    QuantizedCheckpoint::from_bytes(&std::fs::read(path)?)
}

/// Loads either format, telling them apart by magic.
pub fn load_model(path: impl AsRef<Path>) -> Result<super::Model, RuntimeError> {
    let bytes = std::fs::read(path)?;
    match bytes.get(..4) {
        Some(m) if m == QUANT_MAGIC => Ok(super::Model::quantized(
            QuantizedCheckpoint::from_bytes(&bytes)?,
        )),
        _ => Ok(super::Model::float(Checkpoint::from_bytes(&bytes)?)),
    }
}

fn write_record(w: &mut impl Write, q: &QuantizedMatrix) -> io::Result<()> {
    w.write_u8(q.bit_width())?;
    w.write_u32::<LE>(q.rows() as u32)?;
    w.write_u32::<LE>(q.cols() as u32)?;
    write_f32s(w, q.codebook().centroids())?;
    w.write_all(q.indices().as_bytes())
}

/// A matrix record as stored: bit width, extent, codebook and packed indices.
type RawRecord = (u8, usize, usize, Vec<f32>, Vec<u8>);

/// Reads one matrix record; the error bound arrives later with the trailer.
fn read_record(r: &mut &[u8], spec: &TensorSpec) -> Result<RawRecord, RuntimeError> {
    let what = format!("matrix `{}`", spec.name);
    let ctx = |e| io_context(e, &what);
    let bits = r.read_u8().map_err(ctx)?;
    let rows = r.read_u32::<LE>().map_err(ctx)? as usize;
    let cols = r.read_u32::<LE>().map_err(ctx)? as usize;
    if (rows, cols) != (spec.rows, spec.cols) {
        return Err(RuntimeError::ExtentMismatch {
            tensor: spec.name.clone(),
            expected: (spec.rows, spec.cols),
            actual: (rows, cols),
        });
    }
    if !(1..=crate::bitcodec::MAX_BIT_WIDTH).contains(&bits) {
        return Err(
            crate::quantizer::QuantError::from(crate::bitcodec::CodecError::BitWidth(bits)).into(),
        );
    }
    let centroids = read_f32s(r, 1 << bits, &what)?;
    let mut bytes = vec![0u8; payload_len(rows * cols, bits) + 1];
    r.read_exact(&mut bytes).map_err(ctx)?;
    Ok((bits, rows, cols, centroids, bytes))
}

impl QuantizedCheckpoint {
    pub fn quantized_matrices(&self) -> impl Iterator<Item = (String, &QuantizedMatrix)> {
        self.config
            .tensor_specs()
            .into_iter()
            .zip(&self.tensors)
            .filter_map(|(s, t)| match t {
                QuantizedTensor::Quantized(q) => Some((s.name, &**q)),
                QuantizedTensor::Dense(_) => None,
            })
    }

    /// Reconstructed full-precision weights.
    pub fn dequantize(&self) -> Checkpoint {
        let tensors = self
            .tensors
            .iter()
            .map(|t| match t {
                QuantizedTensor::Dense(v) => v.clone(),
                QuantizedTensor::Quantized(q) => crate::quantizer::dequantize(q).into_vec().into(),
            })
            .collect();
        Checkpoint {
            config: self.config,
            tensors,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        write_header(w, QUANT_MAGIC, &self.config)?;
        let mut eps = Vec::new();
        for t in &self.tensors {
            match t {
                QuantizedTensor::Dense(v) => write_f32s(w, v)?,
                QuantizedTensor::Quantized(q) => {
                    write_record(w, q)?;
                    eps.push(q.epsilon());
                }
            }
        }
        w.write_u32::<LE>(eps.len() as u32)?;
        write_f32s(w, &eps)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RuntimeError> {
        let mut r = bytes;
        let config = read_header(&mut r, QUANT_MAGIC)?;
        let specs = config.tensor_specs();
        let mut pending = Vec::with_capacity(specs.len());
        for s in &specs {
            pending.push(match s.kind {
                TensorKind::Vector => {
                    Err(read_f32s(&mut r, s.len(), &format!("vector `{}`", s.name))?)
                }
                TensorKind::Matrix => Ok(read_record(&mut r, s)?),
            });
        }
        let count = r
            .read_u32::<LE>()
            .map_err(|e| io_context(e, "the error-bound trailer"))? as usize;
        let matrices = specs
            .iter()
            .filter(|s| s.kind == TensorKind::Matrix)
            .count();
        if count != matrices {
            return Err(RuntimeError::InvalidConfig(format!(
                "error-bound trailer lists {count} matrices, the config has {matrices}"
            )));
        }
        let mut eps = read_f32s(&mut r, count, "the error-bound trailer")?.into_iter();
        finish(r)?;

        let tensors = pending
            .into_iter()
            .map(|p| {
                Ok(match p {
                    Err(v) => QuantizedTensor::Dense(v.into()),
                    Ok((bits, rows, cols, centroids, bytes)) => {
                        let codebook = Codebook::new(centroids, bits)?;
                        let indices = PackedBuffer::from_parts(bytes, rows * cols, bits)
                            .map_err(crate::quantizer::QuantError::from)?;
                        let eps = eps.next().expect("count checked");
                        QuantizedTensor::Quantized(Arc::new(QuantizedMatrix::from_parts(
                            rows, cols, codebook, indices, eps,
                        )?))
                    }
                })
            })
            .collect::<Result<_, RuntimeError>>()?;
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RuntimeError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }
}

/// Quantizes every matrix of `ckpt` independently with `cfg`; gain vectors
/// are copied. With `cfg.parallel` matrices are processed concurrently,
/// which does not change the result.
pub fn quantize_checkpoint(
    ckpt: &Checkpoint,
    cfg: &QuantConfig,
) -> Result<QuantizedCheckpoint, RuntimeError> {
    let specs = ckpt.config.tensor_specs();
    let one = |(s, t): (&TensorSpec, &Arc<[f32]>)| -> Result<QuantizedTensor, RuntimeError> {
        Ok(match s.kind {
            TensorKind::Vector => QuantizedTensor::Dense(t.clone()),
            TensorKind::Matrix => {
                let m = Matrix::new(s.rows, s.cols, t.to_vec())?;
                QuantizedTensor::Quantized(Arc::new(quantize_matrix(&m, cfg)?))
            }
        })
    };
    let tensors = if cfg.parallel {
        specs
            .par_iter()
            .zip(ckpt.tensors.par_iter())
            .map(one)
            .collect::<Result<_, _>>()?
    } else {
        specs
            .iter()
            .zip(&ckpt.tensors)
            .map(one)
            .collect::<Result<_, _>>()?
    };
    Ok(QuantizedCheckpoint {
        config: ckpt.config,
        tensors,
    })
}
