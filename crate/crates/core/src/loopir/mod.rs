//! A small structured loop-nest IR.
//!
//! Programs declare integer parameters and `f32` buffers, then give one or
//! more functions made of counted loops, scalar loads and arithmetic,
//! accumulator recurrences, stores and opaque intrinsic calls. Memory
//! accesses are affine in the enclosing induction variables, with either
//! integer or symbolic (parameter) coefficients.
//!
//! # Text form
//!
//! ```text
//! # comments run to the end of the line
//! param lda = 4              # compile-time constant
//! param pos                  # bound at run time through the environment
//! buffer A[2, 4] quantized   # the flag is metadata: A may be stored quantized
//! buffer x[4]
//! buffer y[2]
//!
//! func main {
//!   for i in 0..2 {
//!     acc s = 0.0
//!     for k in 0..4 {
//!       let a = load A[i*lda + k]   # also A[i, k] and A[i][k]
//!       let b = load x[k]
//!       s += a * b                  # or `s += t` for a plain scalar
//!     }
//!     let r = mul s, 2.0            # mul / add take two operands, fma three
//!     store y[i] = r
//!   }
//!   call softmax(y, 2)
//! }
//! ```
//!
//! `fma a, b, c` computes `a*b + c`. An accumulator is re-initialized each
//! time its `acc` statement executes and may only be updated from inside a
//! loop nested below that statement. Scalars are single-assignment: every
//! name is defined by exactly one statement.

mod interp;
pub mod intrinsics;
mod parse;
mod print;
mod validate;

pub use interp::{interpret, Buffer, Env, ExecOptions, GemvRecord, InterpError, Interpreter};
pub use parse::{parse, ParseError, ParseErrorKind};
pub use validate::{validate, Diagnostic, DiagnosticKind};

use crate::kernels::{Layout, Transpose};

/// A whole program: declarations plus functions. `main` is the entry point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Program {
    pub params: Vec<ParamDecl>,
    pub buffers: Vec<BufferDecl>,
    pub functions: Vec<Function>,
}

impl Program {
    pub fn param(&self, name: &str) -> Option<&ParamDecl> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn buffer(&self, name: &str) -> Option<&BufferDecl> {
        self.buffers.iter().find(|b| b.name == name)
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn main(&self) -> Option<&Function> {
        self.function("main")
    }
}

/// `param NAME [= VALUE]`. Parameters without a value are supplied at run time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamDecl {
    pub name: String,
    pub value: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferDecl {
    pub name: String,
    pub shape: Shape,
    /// Marks weight matrices that may be bound to a quantized operand.
    pub quantized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn extent(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Function {
    pub name: String,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    Loop(Loop),
    /// `let dest = load buffer[index]`
    Load {
        dest: String,
        access: Access,
    },
    /// `store buffer[index] = value`
    Store {
        access: Access,
        value: Operand,
    },
    /// `let dest = mul|add|fma ...`
    BinOp {
        dest: String,
        op: ArithOp,
    },
    /// `acc name = value`
    AccumInit {
        name: String,
        value: f32,
    },
    /// `name += term`
    AccumUpdate {
        name: String,
        term: AccumTerm,
    },
    Call(Call),
}

/// `for iv in lower..upper { body }`; zero trips when `upper <= lower`.
#[derive(Debug, Clone, PartialEq)]
pub struct Loop {
    pub iv: String,
    pub lower: AffineExpr,
    pub upper: AffineExpr,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArithOp {
    Mul(Operand, Operand),
    Add(Operand, Operand),
    /// `a * b + c`
    Fma(Operand, Operand, Operand),
}

impl ArithOp {
    pub fn operands(&self) -> Vec<&Operand> {
        match self {
            ArithOp::Mul(a, b) | ArithOp::Add(a, b) => vec![a, b],
            ArithOp::Fma(a, b, c) => vec![a, b, c],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Var(String),
    Const(f32),
}

impl Operand {
    pub fn var(name: impl Into<String>) -> Self {
        Operand::Var(name.into())
    }

    pub fn as_var(&self) -> Option<&str> {
        match self {
            Operand::Var(v) => Some(v),
            Operand::Const(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AccumTerm {
    Product(Operand, Operand),
    Value(Operand),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Call {
    pub name: String,
    pub args: Vec<Arg>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arg {
    /// A buffer, parameter or induction variable.
    Name(String),
    Int(i64),
    Float(f32),
    Layout(Layout),
    Transpose(Transpose),
}

/// `buffer[index]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Access {
    pub buffer: String,
    pub index: Index,
}

impl Access {
    pub fn flat(buffer: impl Into<String>, index: AffineExpr) -> Self {
        Access {
            buffer: buffer.into(),
            index: Index::Flat(index),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Index {
    /// `A[e]`
    Flat(AffineExpr),
    /// `A[r, c]` on a matrix buffer.
    Pair(AffineExpr, AffineExpr),
    /// `A[r][c]` on a matrix buffer.
    Nested(AffineExpr, AffineExpr),
}

/// `sum(coef * var) + offset`, each variable appearing at most once.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AffineExpr {
    pub terms: Vec<Term>,
    pub offset: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub var: String,
    pub coef: Coef,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Coef {
    Const(i64),
    /// A named parameter, typically a leading dimension.
    Param(String),
}

impl AffineExpr {
    pub fn constant(offset: i64) -> Self {
        AffineExpr {
            terms: Vec::new(),
            offset,
        }
    }

    pub fn var(name: impl Into<String>) -> Self {
        AffineExpr::constant(0).plus(name, Coef::Const(1))
    }

    /// Appends `coef * var`; the caller keeps variables distinct.
    pub fn plus(mut self, var: impl Into<String>, coef: Coef) -> Self {
        self.terms.push(Term {
            var: var.into(),
            coef,
        });
        self
    }

    pub fn with_offset(mut self, offset: i64) -> Self {
        self.offset = offset;
        self
    }

    pub fn coef_of(&self, var: &str) -> Option<&Coef> {
        self.terms.iter().find(|t| t.var == var).map(|t| &t.coef)
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    /// Names used as variables or symbolic coefficients.
    pub fn symbols(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().flat_map(|t| {
            let coef = match &t.coef {
                Coef::Param(p) => Some(p.as_str()),
                Coef::Const(_) => None,
            };
            std::iter::once(t.var.as_str()).chain(coef)
        })
    }
}

/// Kind of a call argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgKind {
    Buffer,
    Int,
    Float,
    Layout,
    Transpose,
}

/// The opaque operations a program may call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Intrinsic {
    /// `gemv(layout, trans, m, n, alpha, A, lda, x, incx, beta, y, incy)`
    Gemv,
    /// `rmsnorm(out, in, weight, n)`
    Rmsnorm,
    /// `softmax(buf, n)`, in place over the first `n` elements.
    Softmax,
    /// `rope(q, k, pos, dim, kv_dim, head_dim)`
    Rope,
    /// `silu(buf, n)`, in place.
    Silu,
    /// `argmax(dst, src, n)` writes the index (as a float) to `dst[0]`.
    Argmax,
    /// `embed(out, table, token, dim)` copies row `token` of the table.
    Embed,
    /// `attention(out, q, k, v, kcache, vcache, layer, pos, n_heads, n_kv_heads, head_dim, seq_len)`
    Attention,
}

impl Intrinsic {
    pub const ALL: [Intrinsic; 8] = [
        Intrinsic::Gemv,
        Intrinsic::Rmsnorm,
        Intrinsic::Softmax,
        Intrinsic::Rope,
        Intrinsic::Silu,
        Intrinsic::Argmax,
        Intrinsic::Embed,
        Intrinsic::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Intrinsic::Gemv => "gemv",
            Intrinsic::Rmsnorm => "rmsnorm",
            Intrinsic::Softmax => "softmax",
            Intrinsic::Rope => "rope",
            Intrinsic::Silu => "silu",
            Intrinsic::Argmax => "argmax",
            Intrinsic::Embed => "embed",
            Intrinsic::Attention => "attention",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|i| i.name() == name)
    }

    pub fn signature(self) -> &'static [ArgKind] {
        use ArgKind::*;
        match self {
            Intrinsic::Gemv => &[
                Layout, Transpose, Int, Int, Float, Buffer, Int, Buffer, Int, Float, Buffer, Int,
            ],
            Intrinsic::Rmsnorm => &[Buffer, Buffer, Buffer, Int],
            Intrinsic::Softmax | Intrinsic::Silu => &[Buffer, Int],
            Intrinsic::Rope => &[Buffer, Buffer, Int, Int, Int, Int],
            Intrinsic::Argmax => &[Buffer, Buffer, Int],
            Intrinsic::Embed => &[Buffer, Buffer, Int, Int],
            Intrinsic::Attention => &[
                Buffer, Buffer, Buffer, Buffer, Buffer, Buffer, Int, Int, Int, Int, Int, Int,
            ],
        }
    }

    /// Positions of the buffer arguments this intrinsic writes.
    pub fn written_args(self) -> &'static [usize] {
        match self {
            Intrinsic::Gemv => &[10],
            Intrinsic::Rmsnorm
            | Intrinsic::Softmax
            | Intrinsic::Silu
            | Intrinsic::Argmax
            | Intrinsic::Embed => &[0],
            Intrinsic::Rope => &[0, 1],
            Intrinsic::Attention => &[0, 4, 5],
        }
    }
}

/// Pre-order visit of every statement in `body`, descending into loops.
pub fn walk<'a>(body: &'a [Stmt], f: &mut impl FnMut(&'a Stmt)) {
    for s in body {
        f(s);
        if let Stmt::Loop(l) = s {
            walk(&l.body, f);
        }
    }
}

/// Depth of the deepest loop nest in `body` (0 for straight-line code).
pub fn nest_depth(body: &[Stmt]) -> usize {
    body.iter()
        .map(|s| match s {
            Stmt::Loop(l) => 1 + nest_depth(&l.body),
            _ => 0,
        })
        .max()
        .unwrap_or(0)
}
