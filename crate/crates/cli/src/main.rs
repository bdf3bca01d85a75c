//! `lowbit`: quantize checkpoints, optimize loop programs, run and measure
//! the synthesized model.
//!
//! Exit status is 0 on success, 1 when `verify` finds a violation and 2 for
//! usage, format and I/O errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lowbit_core::gemvpass;
use lowbit_core::loopir::{parse, ExecOptions};
use lowbit_core::quantizer::QuantConfig;
use lowbit_core::runtime::{
    generate, load_checkpoint, load_model, quantize_checkpoint, random_tokens,
    synthesize_forward_program, BenchReport, Checkpoint, Engine, Model, ModelConfig,
    QuantizedCheckpoint, RunMode, Sampling, TensorKind, QUANT_MAGIC,
};

#[derive(Parser)]
#[command(
    name = "lowbit",
    version,
    about = "Low-bit codebook quantization and GEMV-rewriting inference toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialized full-precision checkpoint.
    Init(InitArgs),
    /// Quantize every weight matrix of a checkpoint.
    Quantize(QuantizeArgs),
    /// Write the loop program of one decoding step.
    Synth(SynthArgs),
    /// Rewrite GEMV loop nests of a program into kernel calls.
    Optimize(OptimizeArgs),
    /// Generate tokens.
    Run(RunArgs),
    /// Check error bounds and path equivalence between a checkpoint and its quantized form.
    Verify(VerifyArgs),
    /// Measure decoding throughput and derived compute and energy rates.
    Bench(BenchArgs),
    /// Show config, tensor shapes, error bounds and size ratio of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 172)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 4)]
    n_kv_heads: usize,
    #[arg(long, default_value_t = 256)]
    vocab_size: usize,
    #[arg(long, default_value_t = 256)]
    max_seq_len: usize,
}

impl ConfigArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            hidden_dim: self.hidden_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            vocab_size: self.vocab_size,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 3)]
    bits: u8,
    #[arg(long)]
    out: PathBuf,
    /// Refinement iteration cap.
    #[arg(long, default_value_t = 100)]
    max_iterations: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Take the model shape from this checkpoint instead of the config flags.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Declare weight matrices as quantized buffers.
    #[arg(long)]
    quantized: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-nest match report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PromptArgs {
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',', conflicts_with = "text")]
    prompt: Vec<usize>,
    /// Prompt text, one token per byte.
    #[arg(long)]
    text: Option<String>,
}

impl PromptArgs {
    fn tokens(&self) -> Vec<usize> {
        match &self.text {
            Some(t) => t.bytes().map(usize::from).collect(),
            None if self.prompt.is_empty() => vec![0],
            None => self.prompt.clone(),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value_t = 0.0)]
    temperature: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// naive, optimized, quantized-naive or quantized; defaults by model kind.
    #[arg(long)]
    mode: Option<RunMode>,
    /// Switch a quantized product to full precision when its bound exceeds this.
    #[arg(long)]
    bound_threshold: Option<f32>,
    /// Full-precision checkpoint used for fallback and bound checks.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// JSON-lines telemetry output.
    #[arg(long)]
    telemetry: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Full-precision checkpoint.
    #[arg(long)]
    model_a: PathBuf,
    /// Quantized checkpoint of the same model.
    #[arg(long)]
    model_b: PathBuf,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tokens generated per trial.
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 32)]
    steps: usize,
    #[arg(long)]
    mode: Option<RunMode>,
    /// Assumed power draw.
    #[arg(long, default_value_t = 18.0)]
    watts: f64,
    /// Work per token; defaults to two flops per parameter.
    #[arg(long)]
    per_token_gflops: Option<f64>,
    /// Skip the measurement and derive the report from this rate.
    #[arg(long)]
    tokens_per_second: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Init(a) => init(a),
        Command::Quantize(a) => quantize(a),
        Command::Synth(a) => synth(a),
        Command::Optimize(a) => optimize(a),
        Command::Run(a) => run(a),
        Command::Verify(a) => verify(a),
        Command::Bench(a) => bench(a),
        Command::Inspect(a) => inspect(a),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| match e.downcast::<VerifyFailed>() {
        Ok(_) => Ok(ExitCode::from(1)),
        Err(e) => Err(e),
    })
}

/// Raised by `verify` so that `main` can exit with status 1.
#[derive(Debug)]
struct VerifyFailed;

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("verification failed")
    }
}

impl std::error::Error for VerifyFailed {}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_float(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("reading {}", path.display()))
}

fn init(a: InitArgs) -> Result<()> {
    let ckpt = Checkpoint::random(a.config.config(), a.seed)?;
    write(&a.out, ckpt.to_bytes())?;
    println!(
        "wrote {} ({} parameters)",
        a.out.display(),
        ckpt.config.parameter_count()
    );
    Ok(())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let ckpt = read_float(&a.input)?;
    let cfg = QuantConfig {
        bit_width: a.bits,
        max_iterations: a.max_iterations,
        ..QuantConfig::default()
    };
    let q = quantize_checkpoint(&ckpt, &cfg)?;
    let bytes = q.to_bytes();
    write(&a.out, &bytes)?;
    let float_len = ckpt.to_bytes().len();
    println!(
        "wrote {} ({} bytes, {:.4} of {} full-precision bytes)",
        a.out.display(),
        bytes.len(),
        bytes.len() as f64 / float_len as f64,
        float_len
    );
    print_epsilons(&q);
    Ok(())
}

fn print_epsilons(q: &QuantizedCheckpoint) {
    println!(
        "{:<16} {:>6} {:>6} {:>4} {:>12}",
        "matrix", "rows", "cols", "bits", "epsilon"
    );
    for (name, m) in q.quantized_matrices() {
        println!(
            "{:<16} {:>6} {:>6} {:>4} {:>12.6e}",
            name,
            m.rows(),
            m.cols(),
            m.bit_width(),
            m.epsilon()
        );
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let config = match &a.model {
        Some(p) => load_model(p)
            .with_context(|| format!("reading {}", p.display()))?
            .config(),
        None => a.config.config(),
    };
    config.validate()?;
    let program = synthesize_forward_program(&config, a.quantized);
    write(&a.out, program.to_string())?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn optimize(a: OptimizeArgs) -> Result<()> {
    let text =
        fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let program = parse(&text).with_context(|| format!("parsing {}", a.input.display()))?;
    let result = gemvpass::optimize(&program);
    write(&a.out, result.program.to_string())?;
    if let Some(r) = &a.report {
        write(r, result.report.to_json())?;
    }
    println!("{:<10} {:<12} {:<10} detail", "function", "path", "status");
    for n in &result.report.nests {
        let path = n
            .path
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(".");
        let (status, detail) = match (&n.reason, &n.gemv) {
            (Some(reason), _) => (reason.to_string(), n.detail.clone().unwrap_or_default()),
            (None, Some(g)) => (
                if n.rewritten { "rewritten" } else { "matched" }.to_string(),
                format!(
                    "{:?} M={} N={} {}*{} lda={}",
                    g.layout, g.m, g.n, g.matrix, g.x, g.lda
                ),
            ),
            (None, None) => ("matched".into(), String::new()),
        };
        println!("{:<10} {:<12} {:<10} {}", n.function, path, status, detail);
    }
    println!(
        "{} nests: {} rewritten, {} skipped",
        result.report.nests_scanned, result.report.rewritten, result.report.skipped
    );
    Ok(())
}

/// Loads `path`, attaching `reference` to a quantized model.
fn model_with_reference(path: &Path, reference: Option<&Path>) -> Result<Model> {
    let model = load_model(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(match reference {
        Some(r) => {
            let c = read_float(r)?;
            if c.config != model.config() {
                bail!(
                    "{} and {} have different configs",
                    path.display(),
                    r.display()
                );
            }
            model.with_reference(c)
        }
        None => model,
    })
}

fn default_mode(model: &Model) -> RunMode {
    match model {
        Model::Float(_) => RunMode::Optimized,
        Model::Quantized { .. } => RunMode::Quantized,
    }
}

fn run(a: RunArgs) -> Result<()> {
    let model = model_with_reference(&a.model, a.reference.as_deref())?;
    let mode = a.mode.unwrap_or_else(|| default_mode(&model));
    let mut engine = Engine::new(&model, mode)?;
    let has_reference = matches!(
        model,
        Model::Quantized {
            reference: Some(_),
            ..
        }
    );
    engine.set_options(ExecOptions {
        bound_threshold: a.bound_threshold,
        shadow: has_reference && mode.uses_quantized_weights(),
        record: true,
    });
    let prompt = a.prompt.tokens();
    let sampling = Sampling {
        temperature: a.temperature,
        seed: a.seed,
    };
    let out = generate(&mut engine, &prompt, a.steps, &sampling)?;
    if let Some(t) = &a.telemetry {
        write(t, out.telemetry_jsonl())?;
    }
    println!(
        "{}",
        out.tokens
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    );
    if a.prompt.text.is_some() {
        let bytes: Vec<u8> = out.tokens.iter().map(|&t| t.min(255) as u8).collect();
        println!("{}", String::from_utf8_lossy(&bytes));
    }
    let fallbacks: usize = out
        .telemetry
        .iter()
        .flat_map(|t| &t.gemv)
        .filter(|r| r.fallback)
        .count();
    eprintln!(
        "mode {mode}: {} steps in {:.1} ms, {} fallbacks, {} bound violations",
        out.telemetry.len(),
        out.seconds() * 1000.0,
        fallbacks,
        out.bound_violations()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct TrialReport {
    trial: usize,
    prompt: Vec<usize>,
    naive: Vec<usize>,
    optimized: Vec<usize>,
    quantized: Vec<usize>,
    gemv_checks: usize,
    bound_violations: usize,
    max_ratio: f32,
}

fn verify(a: VerifyArgs) -> Result<()> {
    let float = read_float(&a.model_a)?;
    let quant =
        match load_model(&a.model_b).with_context(|| format!("reading {}", a.model_b.display()))? {
            Model::Quantized { weights, .. } => (*weights).clone(),
            Model::Float(_) => bail!("{} is not a quantized checkpoint", a.model_b.display()),
        };
    if quant.config != float.config {
        bail!("the two checkpoints have different configs");
    }
    let config = float.config;
    let steps = a.steps.min(config.max_seq_len.saturating_sub(4)).max(1);
    let float_model = Model::float(float.clone());
    let quant_model = Model::quantized(quant).with_reference(float);
    let mut naive = Engine::new(&float_model, RunMode::Naive)?;
    let mut optimized = Engine::new(&float_model, RunMode::Optimized)?;
    let mut quantized = Engine::new(&quant_model, RunMode::Quantized)?;
    quantized.set_options(ExecOptions {
        shadow: true,
        record: true,
        ..ExecOptions::default()
    });

    let greedy = Sampling::default();
    let mut reports = Vec::new();
    let mut ok = true;
    for trial in 0..a.trials {
        let prompt = random_tokens(3, config.vocab_size, a.seed.wrapping_add(trial as u64));
        let n = generate(&mut naive, &prompt, steps, &greedy)?;
        let o = generate(&mut optimized, &prompt, steps, &greedy)?;
        let q = generate(&mut quantized, &prompt, steps, &greedy)?;
        let checks: Vec<_> = q.telemetry.iter().flat_map(|t| &t.gemv).collect();
        let max_ratio = checks
            .iter()
            .filter_map(|r| Some(r.deviation? / r.bound.as_ref()?.inf_bound.max(f32::MIN_POSITIVE)))
            .fold(0.0f32, f32::max);
        let r = TrialReport {
            trial,
            prompt,
            naive: n.tokens,
            optimized: o.tokens,
            gemv_checks: checks.len(),
            bound_violations: q.bound_violations(),
            quantized: q.tokens,
            max_ratio,
        };
        let pass = r.naive == r.optimized && r.bound_violations == 0;
        println!(
            "trial {:>3}: paths {} | {} quantized products checked, {} violations, max deviation/bound {:.3} -> {}",
            trial,
            if r.naive == r.optimized { "agree" } else { "DIFFER" },
            r.gemv_checks,
            r.bound_violations,
            r.max_ratio,
            if pass { "ok" } else { "FAIL" }
        );
        ok &= pass;
        reports.push(r);
    }
    if let Some(p) = &a.report {
        write(p, serde_json::to_string_pretty(&reports)?)?;
    }
    if ok {
        println!("verify: pass");
        Ok(())
    } else {
        println!("verify: FAIL");
        Err(VerifyFailed.into())
    }
}

fn bench(a: BenchArgs) -> Result<()> {
    let model = load_model(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let config = model.config();
    let gflops = a
        .per_token_gflops
        .unwrap_or_else(|| config.per_token_gflops());
    let mode = a.mode.unwrap_or_else(|| default_mode(&model));
    let engine = Engine::new(&model, mode)?;
    let report = match a.tokens_per_second {
        Some(rate) => BenchReport::from_rate(rate, gflops, a.watts, engine.live_bytes())?,
        None => {
            let mut engine = engine;
            let steps = a.steps.min(config.max_seq_len - 1);
            let run = generate(&mut engine, &[0], steps, &Sampling::default())?;
            BenchReport::from_generation(&run, gflops, a.watts, engine.live_bytes())?
        }
    };
    println!("mode                 {mode}");
    println!("tokens/s             {:.3}", report.tokens_per_second);
    println!("latency ms/token     {:.3}", report.latency_ms_per_token);
    println!("effective GFLOP/s    {:.3}", report.effective_gflops);
    println!("energy J/token       {:.3}", report.energy_joules_per_token);
    println!("peak data bytes      {}", report.peak_data_bytes);
    if let Some(p) = &a.out {
        write(p, serde_json::to_string(&report)? + "\n")?;
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let model = load_model(&a.model)?;
    let config = model.config();
    let float_len = 36 + 4 * config.parameter_count();
    println!("{}", serde_json::to_string_pretty(&config)?);
    println!(
        "format {}, {} bytes, {:.4} of the full-precision size ({} bytes)",
        if bytes.starts_with(&QUANT_MAGIC) {
            "quantized"
        } else {
            "full-precision"
        },
        bytes.len(),
        bytes.len() as f64 / float_len as f64,
        float_len
    );
    match &model {
        Model::Quantized { weights, .. } => print_epsilons(weights),
        Model::Float(_) => {
            println!("{:<16} {:>6} {:>6}", "tensor", "rows", "cols");
            for s in config.tensor_specs() {
                let rows = if s.kind == TensorKind::Vector {
                    1
                } else {
                    s.rows
                };
                println!("{:<16} {:>6} {:>6}", s.name, rows, s.cols);
            }
        }
    }
    Ok(())
}
