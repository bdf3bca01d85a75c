use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::Serialize;

use super::format::{Checkpoint, QuantizedCheckpoint, QuantizedTensor};
use super::{synthesize_forward_program, ModelConfig, RuntimeError};
use crate::gemvpass::{optimize, MatchReport};
use crate::loopir::intrinsics;
use crate::loopir::{Buffer, Env, ExecOptions, GemvRecord, Interpreter, Program};

/// How a decoding step is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Full-precision weights, loop nests interpreted as written.
    Naive,
    /// Full-precision weights, nests rewritten to kernel calls.
    Optimized,
    /// Quantized weights decoded element by element inside the loop nests.
    QuantizedNaive,
    /// Quantized weights, nests rewritten to the codebook kernel.
    Quantized,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [
        RunMode::Naive,
        RunMode::Optimized,
        RunMode::QuantizedNaive,
        RunMode::Quantized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Naive => "naive",
            RunMode::Optimized => "optimized",
            RunMode::QuantizedNaive => "quantized-naive",
            RunMode::Quantized => "quantized",
        }
    }

    pub fn uses_quantized_weights(self) -> bool {
        matches!(self, RunMode::QuantizedNaive | RunMode::Quantized)
    }

    pub fn runs_pass(self) -> bool {
        matches!(self, RunMode::Optimized | RunMode::Quantized)
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown mode `{s}` (expected naive, optimized, quantized-naive or quantized)"
                )
            })
    }
}

/// Weights to run, shared between engines.
#[derive(Debug, Clone)]
pub enum Model {
    Float(Arc<Checkpoint>),
    Quantized {
        weights: Arc<QuantizedCheckpoint>,
        /// Full-precision weights for bound-triggered fallback and shadow checks.
        reference: Option<Arc<Checkpoint>>,
    },
}

impl Model {
    pub fn float(c: Checkpoint) -> Self {
        Model::Float(Arc::new(c))
    }

    pub fn quantized(q: QuantizedCheckpoint) -> Self {
        Model::Quantized {
            weights: Arc::new(q),
            reference: None,
        }
    }

    /// Attaches full-precision weights to a quantized model.
    pub fn with_reference(self, c: Checkpoint) -> Self {
        match self {
            Model::Quantized { weights, .. } => Model::Quantized {
                weights,
                reference: Some(Arc::new(c)),
            },
            float => float,
        }
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Float(c) => c.config,
            Model::Quantized { weights, .. } => weights.config,
        }
    }
}

/// Temperature 0 is greedy decoding; ties go to the lowest token id.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Sampling {
    pub temperature: f32,
    pub seed: u64,
}

/// A synthesized forward step bound to a model.
pub struct Engine {
    mode: RunMode,
    config: ModelConfig,
    program: Program,
    pass: Option<MatchReport>,
    interp: Interpreter,
    env: Env,
    options: ExecOptions,
}

impl Engine {
    /// Synthesizes the step program for `mode` and binds the weights.
    /// Full-precision modes on a quantized model use its reference weights
    /// when attached and the dequantized weights otherwise.
    pub fn new(model: &Model, mode: RunMode) -> Result<Self, RuntimeError> {
        let config = model.config();
        config.validate()?;
        let mut env = Env::new();
        let specs = config.tensor_specs();
        match (model, mode.uses_quantized_weights()) {
            (Model::Float(c), false) => bind_float(&mut env, c, &specs),
            (
                Model::Quantized {
                    reference: Some(c), ..
                },
                false,
            ) => bind_float(&mut env, c, &specs),
            (
                Model::Quantized {
                    weights,
                    reference: None,
                },
                false,
            ) => bind_float(&mut env, &weights.dequantize(), &specs),
            (Model::Float(_), true) => {
                return Err(RuntimeError::ModeMismatch {
                    mode,
                    needs: "quantized",
                })
            }
            (Model::Quantized { weights, reference }, true) => {
                for ((s, t), r) in specs.iter().zip(&weights.tensors).zip(0..) {
                    let fallback = reference.as_ref().map(|c| c.tensors[r].clone());
                    let buf = match t {
                        QuantizedTensor::Dense(v) => Buffer::Shared(v.clone()),
                        QuantizedTensor::Quantized(m) => Buffer::Quantized {
                            matrix: m.clone(),
                            fallback,
                        },
                    };
                    env.insert(s.name.clone(), buf);
                }
            }
        }
        let cache = config.n_layers * config.max_seq_len * config.kv_dim();
        for (name, len) in [
            ("x", config.dim),
            ("xb", config.dim),
            ("xb2", config.dim),
            ("q", config.dim),
            ("k", config.kv_dim()),
            ("v", config.kv_dim()),
            ("hb", config.hidden_dim),
            ("hb2", config.hidden_dim),
            ("logits", config.vocab_size),
            ("key_cache", cache),
            ("value_cache", cache),
        ] {
            env.insert(name, Buffer::Dense(vec![0.0; len]));
        }

        let mut program = synthesize_forward_program(&config, mode.uses_quantized_weights());
        let mut pass = None;
        if mode.runs_pass() {
            let result = optimize(&program);
            program = result.program;
            pass = Some(result.report);
        }
        let interp = Interpreter::new(&program)?;
        Ok(Self {
            mode,
            config,
            program,
            pass,
            interp,
            env,
            options: ExecOptions::default(),
        })
    }

    pub fn mode(&self) -> RunMode {
        self.mode
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    /// Match report of the GEMV pass, for modes that run it.
    pub fn pass_report(&self) -> Option<&MatchReport> {
        self.pass.as_ref()
    }

    pub fn set_options(&mut self, options: ExecOptions) {
        self.options = options;
    }

    /// Clears the key/value cache.
    pub fn reset(&mut self) {
        for name in ["key_cache", "value_cache"] {
            if let Some(v) = self.env.dense_mut(name) {
                v.fill(0.0);
            }
        }
    }

    /// Runs one step for `token` at `pos`, leaving scores in [`Engine::logits`].
    pub fn forward(&mut self, token: usize, pos: usize) -> Result<Vec<GemvRecord>, RuntimeError> {
        if token >= self.config.vocab_size {
            return Err(RuntimeError::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            });
        }
        if pos >= self.config.max_seq_len {
            return Err(RuntimeError::ContextOverflow {
                requested: pos + 1,
                max: self.config.max_seq_len,
            });
        }
        self.env
            .set_param("token", token as i64)
            .set_param("pos", pos as i64);
        Ok(self.interp.run_with(&mut self.env, &self.options)?)
    }

    pub fn logits(&self) -> &[f32] {
        self.env.dense("logits").expect("logits buffer is dense")
    }

    /// Bytes held by all bound buffers: weights in their stored form plus
    /// activations and cache.
    pub fn live_bytes(&self) -> usize {
        self.env.buffers.values().map(Buffer::live_bytes).sum()
    }
}

fn bind_float(env: &mut Env, c: &Checkpoint, specs: &[super::TensorSpec]) {
    for (s, t) in specs.iter().zip(&c.tensors) {
        env.insert(s.name.clone(), Buffer::Shared(t.clone()));
    }
}

/// One executed step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenTelemetry {
    pub position: usize,
    pub input_token: usize,
    /// The sampled token; `None` while the prompt is being consumed.
    pub sampled: Option<usize>,
    pub latency_ms: f64,
    /// Quantized products whose measured deviation exceeded their bound.
    pub bound_violations: usize,
    pub gemv: Vec<GemvRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub telemetry: Vec<TokenTelemetry>,
}

impl Generation {
    pub fn seconds(&self) -> f64 {
        self.telemetry.iter().map(|t| t.latency_ms).sum::<f64>() / 1000.0
    }

    pub fn bound_violations(&self) -> usize {
        self.telemetry.iter().map(|t| t.bound_violations).sum()
    }

    /// One JSON object per step.
    pub fn telemetry_jsonl(&self) -> String {
        self.telemetry
            .iter()
            .map(|t| serde_json::to_string(t).expect("telemetry serializes") + "\n")
            .collect()
    }
}

fn sample(logits: &[f32], sampling: &Sampling, rng: &mut SplitMix64) -> usize {
    if sampling.temperature <= 0.0 {
        return intrinsics::argmax(logits);
    }
    let mut p: Vec<f32> = logits.iter().map(|l| l / sampling.temperature).collect();
    intrinsics::softmax(&mut p);
    let r = (rng.next_u64() >> 40) as f32 / (1u64 << 24) as f32;
    let mut cdf = 0.0;
    for (i, pi) in p.iter().enumerate() {
        cdf += pi;
        if r < cdf {
            return i;
        }
    }
    p.len() - 1
}

/// `n` token ids drawn uniformly from the vocabulary.
pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    (0..n)
        .map(|_| (rng.next_u64() % vocab as u64) as usize)
        .collect()
}

/// Feeds `prompt` and then samples `steps` tokens.
///
/// The prompt is consumed one position at a time; the scores after its last
/// token give the first sampled token, which is fed back, and so on. The
/// cache is cleared first, so equal inputs give equal outputs.
pub fn generate(
    engine: &mut Engine,
    prompt: &[usize],
    steps: usize,
    sampling: &Sampling,
) -> Result<Generation, RuntimeError> {
    let Some(&first) = prompt.first() else {
        return Err(RuntimeError::EmptyPrompt);
    };
    let max = engine.config.max_seq_len;
    if prompt.len() + steps > max {
        return Err(RuntimeError::ContextOverflow {
            requested: prompt.len() + steps,
            max,
        });
    }
    engine.reset();
    let mut rng = SplitMix64::seed_from_u64(sampling.seed);
    let n_steps = if steps == 0 {
        0
    } else {
        prompt.len() + steps - 1
    };
    let mut tokens = Vec::with_capacity(steps);
    let mut telemetry = Vec::with_capacity(n_steps);
    let mut token = first;
    for pos in 0..n_steps {
        let start = Instant::now();
        let gemv = engine.forward(token, pos)?;
        let sampled =
            (pos + 1 >= prompt.len()).then(|| sample(engine.logits(), sampling, &mut rng));
        let latency_ms = start.elapsed().as_secs_f64() * 1000.0;
        let bound_violations = gemv
            .iter()
            .filter(|r| matches!((&r.bound, r.deviation), (Some(b), Some(d)) if d > b.inf_bound))
            .count();
        telemetry.push(TokenTelemetry {
            position: pos,
            input_token: token,
            sampled,
            latency_ms,
            bound_violations,
            gemv,
        });
        token = match sampled {
            Some(t) => {
                tokens.push(t);
                t
            }
            None => prompt[pos + 1],
        };
    }
    Ok(Generation { tokens, telemetry })
}
