//! Quantize, compile and run small transformer models.
//!
//! The pipeline has two halves. Weight matrices are compressed into a codebook
//! of `2^b` centroids plus bit-packed per-weight indices ([`quantizer`],
//! [`bitcodec`]), with a hard bound on the resulting GEMV output error
//! ([`kernels::error_bound`]). The forward pass is emitted as a loop-nest IR
//! ([`loopir`]) in which every matrix-vector product is a plain loop nest; the
//! [`gemvpass`] recognizes those nests and replaces them with calls to the
//! optimized or codebook-indexed kernels ([`kernels`]). [`runtime`] ties it
//! together: checkpoint formats, program synthesis and token generation.
//!
//! Numeric kernels and the clustering routines are generic over [`Scalar`]
//! (`f32` and `f64`); storage formats are fixed to `f32`.

pub mod bitcodec;
pub mod gemvpass;
pub mod kernels;
pub mod loopir;
pub mod quantizer;
pub mod runtime;
mod scalar;

pub use scalar::Scalar;

pub use bitcodec::{pack_bits, unpack_bits, PackedBuffer};
pub use kernels::{Layout, Transpose};
pub use quantizer::{Codebook, QuantConfig, QuantizedMatrix};

/// Dense matrix with `f32` storage, the storage type of every checkpoint tensor.
pub type MatrixF32 = quantizer::Matrix<f32>;
/// Dense matrix with `f64` storage, used by reference computations.
pub type MatrixF64 = quantizer::Matrix<f64>;
pub type GemvParamsF32 = kernels::GemvParams<f32>;
pub type GemvParamsF64 = kernels::GemvParams<f64>;
pub type BoundReportF32 = kernels::BoundReport<f32>;
pub type BoundReportF64 = kernels::BoundReport<f64>;
