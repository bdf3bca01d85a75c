use std::fmt::Write;

use super::{ModelConfig, TensorKind};
use crate::loopir::{parse, Program};

/// Emits one decoding step of the model as a loop program.
///
/// Run-time parameters `token` and `pos` select the input token and its
/// position. Every weight matrix is a buffer named after its tensor, and
/// every product `out = W in` is written as the canonical nest
///
/// ```text
/// for i_W in 0..M {
///   acc s_W = 0.0
///   for k_W in 0..N {
///     let w_W = load W[i_W*N + k_W]
///     let v_W = load in[k_W]
///     s_W += w_W * v_W
///   }
///   store out[i_W] = s_W
/// }
/// ```
///
/// Names are suffixed with the tensor name because every scalar and loop
/// variable of a function must be distinct.
///
/// Normalization, rotary embedding, attention over the cache and the SiLU
/// gate are intrinsic calls; residual additions and the gate product are
/// single loops. The step leaves the next-token scores in `logits`. With
/// `quantized`, the weight matrices are declared as quantized buffers.
pub fn synthesize_forward_program(config: &ModelConfig, quantized: bool) -> Program {
    let text = ForwardText::new(config, quantized).build();
    parse(&text).expect("synthesized program parses")
}

struct ForwardText<'a> {
    c: &'a ModelConfig,
    quantized: bool,
    out: String,
}

impl<'a> ForwardText<'a> {
    fn new(c: &'a ModelConfig, quantized: bool) -> Self {
        Self {
            c,
            quantized,
            out: String::new(),
        }
    }

    fn line(&mut self, indent: usize, s: impl AsRef<str>) {
        let _ = writeln!(
            self.out,
            "{:indent$}{}",
            "",
            s.as_ref(),
            indent = indent * 2
        );
    }

    fn gemv(&mut self, w: &str, input: &str, output: &str, m: &str, n: &str) {
        self.line(1, format!("# {output} = {w} * {input}"));
        self.line(1, format!("for i_{w} in 0..{m} {{"));
        self.line(2, format!("acc s_{w} = 0.0"));
        self.line(2, format!("for k_{w} in 0..{n} {{"));
        self.line(3, format!("let w_{w} = load {w}[i_{w}*{n} + k_{w}]"));
        self.line(3, format!("let v_{w} = load {input}[k_{w}]"));
        self.line(3, format!("s_{w} += w_{w} * v_{w}"));
        self.line(2, "}");
        self.line(2, format!("store {output}[i_{w}] = s_{w}"));
        self.line(1, "}");
    }

    /// `dst[i] = dst[i] (op) src[i]` for `i < n`.
    fn elementwise(&mut self, tag: &str, op: &str, dst: &str, src: &str, n: &str) {
        self.line(1, format!("for i_{tag} in 0..{n} {{"));
        self.line(2, format!("let a_{tag} = load {dst}[i_{tag}]"));
        self.line(2, format!("let b_{tag} = load {src}[i_{tag}]"));
        self.line(2, format!("let r_{tag} = {op} a_{tag}, b_{tag}"));
        self.line(2, format!("store {dst}[i_{tag}] = r_{tag}"));
        self.line(1, "}");
    }

    fn build(mut self) -> String {
        let c = *self.c;
        self.line(
            0,
            "# one decoding step; scores for the next token end up in `logits`",
        );
        for (name, v) in [
            ("dim", c.dim),
            ("hidden", c.hidden_dim),
            ("kv_dim", c.kv_dim()),
            ("vocab", c.vocab_size),
            ("head_dim", c.head_dim()),
            ("n_heads", c.n_heads),
            ("n_kv_heads", c.n_kv_heads),
            ("seq_len", c.max_seq_len),
        ] {
            self.line(0, format!("param {name} = {v}"));
        }
        self.line(0, "param token");
        self.line(0, "param pos");
        for s in c.tensor_specs() {
            let flag = if self.quantized && s.kind == TensorKind::Matrix {
                " quantized"
            } else {
                ""
            };
            match s.kind {
                TensorKind::Matrix => self.line(
                    0,
                    format!("buffer {}[{}, {}]{flag}", s.name, s.rows, s.cols),
                ),
                TensorKind::Vector => self.line(0, format!("buffer {}[{}]", s.name, s.cols)),
            }
        }
        let cache = c.n_layers * c.max_seq_len * c.kv_dim();
        for (name, len) in [
            ("x", c.dim),
            ("xb", c.dim),
            ("xb2", c.dim),
            ("q", c.dim),
            ("k", c.kv_dim()),
            ("v", c.kv_dim()),
            ("hb", c.hidden_dim),
            ("hb2", c.hidden_dim),
            ("logits", c.vocab_size),
            ("key_cache", cache),
            ("value_cache", cache),
        ] {
            self.line(0, format!("buffer {name}[{len}]"));
        }

        self.line(0, "");
        self.line(0, "func main {");
        self.line(1, "call embed(x, tok_embeddings, token, dim)");
        for l in 0..c.n_layers {
            let w = |t: &str| format!("l{l}_{t}");
            self.line(1, format!("# layer {l}"));
            self.line(1, format!("call rmsnorm(xb, x, {}, dim)", w("attn_norm")));
            self.gemv(&w("wq"), "xb", "q", "dim", "dim");
            self.gemv(&w("wk"), "xb", "k", "kv_dim", "dim");
            self.gemv(&w("wv"), "xb", "v", "kv_dim", "dim");
            self.line(1, "call rope(q, k, pos, dim, kv_dim, head_dim)");
            self.line(
                1,
                format!("call attention(xb, q, k, v, key_cache, value_cache, {l}, pos, n_heads, n_kv_heads, head_dim, seq_len)"),
            );
            self.gemv(&w("wo"), "xb", "xb2", "dim", "dim");
            self.elementwise(&w("res1"), "add", "x", "xb2", "dim");
            self.line(1, format!("call rmsnorm(xb, x, {}, dim)", w("ffn_norm")));
            self.gemv(&w("w1"), "xb", "hb", "hidden", "dim");
            self.gemv(&w("w3"), "xb", "hb2", "hidden", "dim");
            self.line(1, "call silu(hb, hidden)");
            self.elementwise(&w("gate"), "mul", "hb", "hb2", "hidden");
            self.gemv(&w("w2"), "hb", "xb", "dim", "hidden");
            self.elementwise(&w("res2"), "add", "x", "xb", "dim");
        }
        self.line(1, "call rmsnorm(xb, x, final_norm, dim)");
        self.gemv("classifier", "xb", "logits", "vocab", "dim");
        self.line(0, "}");
        self.out
    }
}
