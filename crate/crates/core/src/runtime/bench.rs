use serde::Serialize;

use super::{Generation, RuntimeError};

/// Throughput, latency, effective compute rate and energy of a decode run.
///
/// Power is supplied by the caller, never measured, so energy per token is
/// simply `watts / tokens_per_second`. Memory is the accounted size of the
/// bound buffers rather than process RSS.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub tokens: usize,
    pub seconds: f64,
    pub tokens_per_second: f64,
    pub latency_ms_per_token: f64,
    pub per_token_gflops: f64,
    pub effective_gflops: f64,
    pub watts: f64,
    pub energy_joules_per_token: f64,
    pub peak_data_bytes: usize,
}

impl BenchReport {
    pub fn from_rate(
        tokens_per_second: f64,
        per_token_gflops: f64,
        watts: f64,
        peak_data_bytes: usize,
    ) -> Result<Self, RuntimeError> {
        if !(tokens_per_second.is_finite() && tokens_per_second > 0.0) {
            return Err(RuntimeError::EmptyRun);
        }
        Ok(Self {
            tokens: 0,
            seconds: 0.0,
            tokens_per_second,
            latency_ms_per_token: 1000.0 / tokens_per_second,
            per_token_gflops,
            effective_gflops: per_token_gflops * tokens_per_second,
            watts,
            energy_joules_per_token: watts / tokens_per_second,
            peak_data_bytes,
        })
    }

    /// Rates over every executed step of `run`, prompt positions included.
    pub fn from_generation(
        run: &Generation,
        per_token_gflops: f64,
        watts: f64,
        peak_data_bytes: usize,
    ) -> Result<Self, RuntimeError> {
        let tokens = run.telemetry.len();
        let seconds = run.seconds();
        if tokens == 0 || seconds <= 0.0 {
            return Err(RuntimeError::EmptyRun);
        }
        Ok(Self {
            tokens,
            seconds,
            ..Self::from_rate(
                tokens as f64 / seconds,
                per_token_gflops,
                watts,
                peak_data_bytes,
            )?
        })
    }
}
