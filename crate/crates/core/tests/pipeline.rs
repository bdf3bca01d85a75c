use std::sync::Arc;

use lowbit_core::gemvpass::optimize;
use lowbit_core::loopir::{interpret, parse, Buffer, Env, ExecOptions, Interpreter};
use lowbit_core::quantizer::{dequantize, quantize_matrix, Matrix};
use lowbit_core::runtime::{synthesize_forward_program, ModelConfig};
use lowbit_core::QuantConfig;
use proptest::prelude::*;

/// One `out = beta*out + alpha*W*x` nest over an `m x n` matrix stored row-
/// or column-major. `tag` keeps names unique when nests share a function.
fn nest(
    m: usize,
    n: usize,
    col_major: bool,
    alpha: f32,
    beta: f32,
    out: &str,
    tag: &str,
) -> String {
    let (i, k) = (format!("i{tag}"), format!("k{tag}"));
    let index = if col_major {
        format!("{k}*{m} + {i}")
    } else {
        format!("{i}*{n} + {k}")
    };
    format!(
        "  for {i} in 0..{m} {{\n    acc s{tag} = 0.0\n    for {k} in 0..{n} {{\n      \
         let a{tag} = load W[{index}]\n      let b{tag} = load x[{k}]\n      s{tag} += a{tag} * b{tag}\n    }}\n    \
         let t{tag} = mul s{tag}, {alpha:?}\n    let old{tag} = load {out}[{i}]\n    \
         let r{tag} = fma old{tag}, {beta:?}, t{tag}\n    store {out}[{i}] = r{tag}\n  }}\n"
    )
}

fn nest_program(m: usize, n: usize, col_major: bool, alpha: f32, beta: f32) -> String {
    format!(
        "buffer W[{}]\nbuffer x[{n}]\nbuffer y[{m}]\nfunc main {{\n{}}}\n",
        m * n,
        nest(m, n, col_major, alpha, beta, "y", "")
    )
}

/// f64 reference for the same product over a flat matrix.
fn oracle(
    w: &[f32],
    (m, n, col_major): (usize, usize, bool),
    x: &[f32],
    y: &[f32],
    (alpha, beta): (f32, f32),
) -> Vec<f64> {
    (0..m)
        .map(|i| {
            let dot: f64 = (0..n)
                .map(|k| {
                    let a = if col_major {
                        w[k * m + i]
                    } else {
                        w[i * n + k]
                    };
                    a as f64 * x[k] as f64
                })
                .sum();
            beta as f64 * y[i] as f64 + alpha as f64 * dot
        })
        .collect()
}

fn run(program: &str, w: Buffer, x: &[f32], y: &[f32]) -> Vec<f32> {
    let p = parse(program).unwrap();
    let mut env = Env::new();
    env.insert("W", w)
        .insert("x", Buffer::Dense(x.to_vec()))
        .insert("y", Buffer::Dense(y.to_vec()));
    interpret(&p, &mut env).unwrap();
    env.dense("y").unwrap().to_vec()
}

fn assert_close(got: &[f32], want: &[f64], tol: f64) {
    for (g, w) in got.iter().zip(want) {
        assert!(
            (*g as f64 - w).abs() <= tol * w.abs().max(1.0),
            "{g} vs {w}"
        );
    }
}

#[test]
fn synthesized_programs_print_and_reparse() {
    let config = ModelConfig::default();
    for quantized in [false, true] {
        let p = synthesize_forward_program(&config, quantized);
        assert_eq!(parse(&p.to_string()).unwrap(), p);
        let optimized = optimize(&p).program;
        assert_eq!(parse(&optimized.to_string()).unwrap(), optimized);
    }
}

#[test]
fn independent_nests_are_all_rewritten() {
    let src = format!(
        "buffer W[12]\nbuffer x[4]\nbuffer y[3]\nbuffer z[3]\nfunc main {{\n{}{}}}\n",
        nest(3, 4, false, 1.0, 0.0, "y", "_a"),
        nest(3, 4, true, 2.0, 1.0, "z", "_b"),
    );
    let p = parse(&src).unwrap();
    let out = optimize(&p);
    assert_eq!(
        (out.report.matched, out.report.rewritten),
        (2, 2),
        "{}",
        out.program
    );
    assert_eq!(out.program.to_string().matches("call gemv(").count(), 2);

    let w: Vec<f32> = (0..12).map(|v| v as f32 - 5.5).collect();
    let x = [1.0, -2.0, 0.5, 3.0];
    let results: Vec<Vec<f32>> = [&p, &out.program]
        .iter()
        .map(|prog| {
            let mut env = Env::new();
            env.insert("W", Buffer::Dense(w.clone()))
                .insert("x", Buffer::Dense(x.to_vec()))
                .insert("y", Buffer::Dense(vec![1.0; 3]))
                .insert("z", Buffer::Dense(vec![1.0; 3]));
            interpret(prog, &mut env).unwrap();
            [env.dense("y").unwrap(), env.dense("z").unwrap()].concat()
        })
        .collect();
    let want = [
        oracle(&w, (3, 4, false), &x, &[1.0; 3], (1.0, 0.0)),
        oracle(&w, (3, 4, true), &x, &[1.0; 3], (2.0, 1.0)),
    ]
    .concat();
    assert_close(&results[0], &want, 1e-6);
    assert_close(&results[1], &want, 1e-6);
}

#[test]
fn bound_threshold_switches_to_fallback() {
    let (m, n) = (4, 8);
    let w = Matrix::from_fn(m, n, |i, k| ((i * n + k) as f32 * 0.37).sin());
    let q = Arc::new(quantize_matrix(&w, &QuantConfig::with_bits(2)).unwrap());
    let p = optimize(&parse(&nest_program(m, n, false, 1.0, 0.0)).unwrap()).program;
    let x = vec![1.0f32; n];

    let mut env = Env::new();
    env.insert(
        "W",
        Buffer::Quantized {
            matrix: q,
            fallback: Some(Arc::from(w.as_slice())),
        },
    )
    .insert("x", Buffer::Dense(x.clone()))
    .insert("y", Buffer::Dense(vec![0.0; m]));
    let records = Interpreter::new(&p)
        .unwrap()
        .run_with(
            &mut env,
            &ExecOptions {
                bound_threshold: Some(0.0),
                shadow: false,
                record: true,
            },
        )
        .unwrap();
    assert_eq!(records.len(), 1);
    assert!(records[0].quantized && records[0].fallback);
    let want = oracle(w.as_slice(), (m, n, false), &x, &[0.0; 4], (1.0, 0.0));
    assert_close(env.dense("y").unwrap(), &want, 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Rewriting a nest whose matrix is bound to a compressed buffer gives
    /// the product of the dequantized matrix, before and after the pass.
    #[test]
    fn quantized_operand_rewrite_matches_dequantized_product(
        m in 1usize..12,
        n in 1usize..12,
        col_major: bool,
        alpha in prop::sample::select(vec![1.0f32, -0.5, 2.0]),
        beta in prop::sample::select(vec![0.0f32, 1.0, 0.25]),
        bits in 1u8..=4,
        seed in any::<u32>(),
    ) {
        let len = m * n;
        let w: Vec<f32> = (0..len).map(|v| ((v as u32 ^ seed) as f32 * 0.013).sin()).collect();
        let x: Vec<f32> = (0..n).map(|k| (k as f32 * 0.7 + seed as f32).cos()).collect();
        let y: Vec<f32> = (0..m).map(|i| i as f32 * 0.5 - 1.0).collect();
        // Row-major nests match the matrix shape and take the direct sketch
        // path; column-major ones go through the dequantizing fallback.
        let (rows, cols) = if col_major { (n, m) } else { (m, n) };
        let q = Arc::new(quantize_matrix(
            &Matrix::new(rows, cols, w.clone()).unwrap(),
            &QuantConfig::with_bits(bits),
        ).unwrap());
        let w_hat = dequantize(&q).into_vec();
        let want = oracle(&w_hat, (m, n, col_major), &x, &y, (alpha, beta));

        let src = nest_program(m, n, col_major, alpha, beta);
        let optimized = optimize(&parse(&src).unwrap());
        prop_assert_eq!(optimized.report.rewritten, 1);
        let bind = || Buffer::Quantized { matrix: q.clone(), fallback: None };
        let before = run(&src, bind(), &x, &y);
        let after = run(&optimized.program.to_string(), bind(), &x, &y);
        assert_close(&before, &want, 1e-5);
        assert_close(&after, &want, 1e-5);
    }
}
