//! A small llama-style transformer: checkpoint formats, forward-pass
//! synthesis as a loop program, and autoregressive generation on top of the
//! loop-IR interpreter.
//!
//! One decoding step is a single [`Program`](crate::loopir::Program) whose
//! matrix-vector products are plain loop nests. Running it unoptimized
//! interprets those nests element by element; running it through
//! [`gemvpass::optimize`](crate::gemvpass::optimize) first turns every nest
//! into a kernel call.

mod bench;
mod engine;
mod format;
mod synth;

use serde::Serialize;
use thiserror::Error;

use crate::loopir::InterpError;
use crate::quantizer::QuantError;

pub use bench::BenchReport;
pub use engine::{
    generate, random_tokens, Engine, Generation, Model, RunMode, Sampling, TokenTelemetry,
};
pub use format::{
    load_checkpoint, load_model, load_quantized, quantize_checkpoint, Checkpoint,
    QuantizedCheckpoint, QuantizedTensor, FLOAT_MAGIC, FORMAT_VERSION, QUANT_MAGIC,
};
pub use synth::synthesize_forward_program;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("not a checkpoint: magic {:?}", String::from_utf8_lossy(.0))]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file ends inside {0}")]
    Truncated(String),
    #[error("tensor `{tensor}` is {actual:?}, config requires {expected:?}")]
    ExtentMismatch {
        tensor: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("{0} unexpected bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{requested} positions requested, the model supports {max}")]
    ContextOverflow { requested: usize, max: usize },
    #[error("token {token} outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("the prompt must contain at least one token")]
    EmptyPrompt,
    #[error("mode `{mode}` needs {needs} weights")]
    ModeMismatch { mode: RunMode, needs: &'static str },
    #[error("benchmark produced no tokens")]
    EmptyRun,
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Transformer shape. All fields are positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    /// The desk-scale toy model used throughout the tests.
    fn default() -> Self {
        Self {
            dim: 64,
            hidden_dim: 172,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 4,
            vocab_size: 256,
            max_seq_len: 256,
        }
    }
}

/// Whether a tensor is a 1-D gain vector or a 2-D weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Vector,
    Matrix,
}

/// Name and extent of one checkpoint tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorSpec {
    pub name: String,
    pub kind: TensorKind,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    fn matrix(name: String, rows: usize, cols: usize) -> Self {
        Self {
            name,
            kind: TensorKind::Matrix,
            rows,
            cols,
        }
    }

    fn vector(name: String, len: usize) -> Self {
        Self {
            name,
            kind: TensorKind::Vector,
            rows: 1,
            cols: len,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let fields = [
            ("dim", self.dim),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields
            .iter()
            .find(|(_, v)| *v == 0 || *v > i32::MAX as usize)
        {
            return Err(RuntimeError::InvalidConfig(format!(
                "{name} must be a positive i32"
            )));
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return Err(RuntimeError::InvalidConfig(
                "dim must be divisible by n_heads".into(),
            ));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(RuntimeError::InvalidConfig(
                "n_kv_heads must divide n_heads".into(),
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(RuntimeError::InvalidConfig(
                "head dimension must be even for rotary embedding".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// Every tensor in file order: the token embedding, then per layer the
    /// attention norm, `wq`, `wk`, `wv`, `wo`, the feed-forward norm, `w1`,
    /// `w2`, `w3`, and finally the output norm and the classifier. Matrices
    /// are `[out, in]`, so each one feeds a `y = W x` product (the embedding
    /// is read row by row instead).
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let (d, h, kv) = (self.dim, self.hidden_dim, self.kv_dim());
        let mut specs = vec![TensorSpec::matrix(
            "tok_embeddings".into(),
            self.vocab_size,
            d,
        )];
        for l in 0..self.n_layers {
            specs.extend([
                TensorSpec::vector(format!("l{l}_attn_norm"), d),
                TensorSpec::matrix(format!("l{l}_wq"), d, d),
                TensorSpec::matrix(format!("l{l}_wk"), kv, d),
                TensorSpec::matrix(format!("l{l}_wv"), kv, d),
                TensorSpec::matrix(format!("l{l}_wo"), d, d),
                TensorSpec::vector(format!("l{l}_ffn_norm"), d),
                TensorSpec::matrix(format!("l{l}_w1"), h, d),
                TensorSpec::matrix(format!("l{l}_w2"), d, h),
                TensorSpec::matrix(format!("l{l}_w3"), h, d),
            ]);
        }
        specs.push(TensorSpec::vector("final_norm".into(), d));
        specs.push(TensorSpec::matrix("classifier".into(), self.vocab_size, d));
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_specs().iter().map(TensorSpec::len).sum()
    }

    /// Default per-token work estimate: two flops per parameter.
    pub fn per_token_gflops(&self) -> f64 {
        2.0 * self.parameter_count() as f64 / 1e9
    }
}
