use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use super::intrinsics::{self, AttentionShape};
use super::*;
use crate::kernels::{self, BoundReport, GemvParams, KernelError};
use crate::quantizer::QuantizedMatrix;

/// Contents bound to a declared buffer.
#[derive(Debug, Clone)]
pub enum Buffer {
    /// Writable activations.
    Dense(Vec<f32>),
    /// Read-only values shared between runs, typically weights.
    Shared(Arc<[f32]>),
    /// A compressed weight matrix, optionally with its full-precision source
    /// for bound-triggered fallback and shadow checks.
    Quantized {
        matrix: Arc<QuantizedMatrix>,
        fallback: Option<Arc<[f32]>>,
    },
}

impl Buffer {
    pub fn len(&self) -> usize {
        match self {
            Buffer::Dense(v) => v.len(),
            Buffer::Shared(v) => v.len(),
            Buffer::Quantized { matrix, .. } => matrix.rows() * matrix.cols(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The values, unless they are only available in compressed form.
    pub fn as_dense(&self) -> Option<&[f32]> {
        match self {
            Buffer::Dense(v) => Some(v),
            Buffer::Shared(v) => Some(v),
            Buffer::Quantized { .. } => None,
        }
    }

    /// Bytes held live by this binding (compressed size for quantized data).
    pub fn live_bytes(&self) -> usize {
        match self {
            Buffer::Dense(v) => v.len() * 4,
            Buffer::Shared(v) => v.len() * 4,
            Buffer::Quantized { matrix, .. } => matrix.storage_bytes(),
        }
    }

    #[inline]
    fn load(&self, i: usize) -> f32 {
        match self {
            Buffer::Dense(v) => v[i],
            Buffer::Shared(v) => v[i],
            Buffer::Quantized { matrix, .. } => matrix.get_flat(i),
        }
    }
}

/// Buffer contents and run-time parameter values.
#[derive(Debug, Clone, Default)]
pub struct Env {
    pub buffers: BTreeMap<String, Buffer>,
    pub params: BTreeMap<String, i64>,
}

impl Env {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, buffer: Buffer) -> &mut Self {
        self.buffers.insert(name.into(), buffer);
        self
    }

    pub fn set_param(&mut self, name: impl Into<String>, value: i64) -> &mut Self {
        self.params.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Buffer> {
        self.buffers.get(name)
    }

    pub fn dense(&self, name: &str) -> Option<&[f32]> {
        self.buffers.get(name).and_then(Buffer::as_dense)
    }

    pub fn dense_mut(&mut self, name: &str) -> Option<&mut Vec<f32>> {
        match self.buffers.get_mut(name) {
            Some(Buffer::Dense(v)) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InterpError {
    #[error("invalid program: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("program has no `main` function")]
    NoMain,
    #[error("buffer `{0}` is not bound")]
    Unbound(String),
    #[error("buffer `{name}` holds {actual} elements, declared {expected}")]
    Extent {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("parameter `{0}` is not bound")]
    ParamUnbound(String),
    #[error("out-of-bounds access to `{buffer}` at index {index:?} (extent {extent:?})")]
    OutOfBounds {
        buffer: String,
        index: Vec<i64>,
        extent: Vec<usize>,
    },
    #[error("buffer `{0}` is read-only")]
    ReadOnly(String),
    #[error("`{intrinsic}`: {message}")]
    Intrinsic {
        intrinsic: &'static str,
        message: String,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Instrumentation switches for [`Interpreter::run_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExecOptions {
    /// Quantized GEMVs whose error bound exceeds this switch to the
    /// full-precision fallback when one is bound.
    pub bound_threshold: Option<f32>,
    /// Also evaluate quantized GEMVs on the fallback and record the deviation.
    pub shadow: bool,
    /// Collect a [`GemvRecord`] per `gemv` call.
    pub record: bool,
}

/// One executed `gemv` intrinsic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GemvRecord {
    pub matrix: String,
    pub m: usize,
    pub n: usize,
    pub quantized: bool,
    /// The full-precision fallback was used instead of the compressed matrix.
    pub fallback: bool,
    /// Error bound of the quantized product, scaled by `|alpha|`.
    pub bound: Option<BoundReport<f32>>,
    /// Max-norm distance to the full-precision product (shadow runs only).
    pub deviation: Option<f32>,
}

#[derive(Debug, Clone, Copy)]
enum LInt {
    Const(i64),
    Slot(usize),
}

impl LInt {
    #[inline]
    fn eval(self, ints: &[i64]) -> i64 {
        match self {
            LInt::Const(c) => c,
            LInt::Slot(s) => ints[s],
        }
    }
}

#[derive(Debug, Clone)]
struct LAffine {
    terms: Vec<(usize, LInt)>,
    offset: i64,
}

impl LAffine {
    #[inline]
    fn eval(&self, ints: &[i64]) -> i64 {
        let mut v = self.offset;
        for &(slot, coef) in &self.terms {
            v += ints[slot] * coef.eval(ints);
        }
        v
    }
}

#[derive(Debug, Clone)]
enum LIndex {
    Flat(LAffine),
    Two(LAffine, LAffine, usize, usize),
}

#[derive(Debug, Clone, Copy)]
enum LOperand {
    Slot(usize),
    Const(f32),
}

#[derive(Debug, Clone)]
enum LArg {
    Buf(usize),
    Int(LInt),
    Float(f32),
    Layout(Layout),
    Trans(Transpose),
}

#[derive(Debug, Clone)]
enum LStmt {
    Loop {
        iv: usize,
        lo: LAffine,
        hi: LAffine,
        body: Vec<LStmt>,
    },
    Load {
        dest: usize,
        buf: usize,
        idx: LIndex,
    },
    Store {
        buf: usize,
        idx: LIndex,
        val: LOperand,
    },
    Mul(usize, LOperand, LOperand),
    Add(usize, LOperand, LOperand),
    Fma(usize, LOperand, LOperand, LOperand),
    Init(usize, f32),
    AccProduct(usize, LOperand, LOperand),
    AccValue(usize, LOperand),
    Call(Intrinsic, Vec<LArg>),
}

/// A validated program lowered to slot-addressed form, reusable across runs.
#[derive(Debug, Clone)]
pub struct Interpreter {
    body: Vec<LStmt>,
    buffers: Vec<BufferDecl>,
    params: Vec<ParamDecl>,
    int_slots: usize,
    scalar_slots: usize,
}

struct Lowering<'p> {
    prog: &'p Program,
    ints: HashMap<String, usize>,
    scalars: HashMap<String, usize>,
    buffers: HashMap<&'p str, usize>,
}

impl Lowering<'_> {
    fn int_slot(&mut self, name: &str) -> usize {
        let next = self.ints.len();
        *self.ints.entry(name.to_string()).or_insert(next)
    }

    fn scalar_slot(&mut self, name: &str) -> usize {
        let next = self.scalars.len();
        *self.scalars.entry(name.to_string()).or_insert(next)
    }

    fn affine(&mut self, e: &AffineExpr) -> LAffine {
        let terms = e
            .terms
            .iter()
            .map(|t| {
                let coef = match &t.coef {
                    Coef::Const(c) => LInt::Const(*c),
                    Coef::Param(p) => LInt::Slot(self.int_slot(p)),
                };
                (self.int_slot(&t.var), coef)
            })
            .collect();
        LAffine {
            terms,
            offset: e.offset,
        }
    }

    fn index(&mut self, a: &Access) -> (usize, LIndex) {
        let buf = self.buffers[a.buffer.as_str()];
        let idx = match &a.index {
            Index::Flat(e) => LIndex::Flat(self.affine(e)),
            Index::Pair(r, c) | Index::Nested(r, c) => {
                let Shape::Matrix(rows, cols) = self.prog.buffers[buf].shape else {
                    unreachable!("validated")
                };
                LIndex::Two(self.affine(r), self.affine(c), rows, cols)
            }
        };
        (buf, idx)
    }

    fn operand(&mut self, o: &Operand) -> LOperand {
        match o {
            Operand::Var(v) => LOperand::Slot(self.scalar_slot(v)),
            Operand::Const(c) => LOperand::Const(*c),
        }
    }

    fn block(&mut self, body: &[Stmt]) -> Vec<LStmt> {
        body.iter().map(|s| self.stmt(s)).collect()
    }

    fn stmt(&mut self, s: &Stmt) -> LStmt {
        match s {
            Stmt::Loop(l) => LStmt::Loop {
                lo: self.affine(&l.lower),
                hi: self.affine(&l.upper),
                iv: self.int_slot(&l.iv),
                body: self.block(&l.body),
            },
            Stmt::Load { dest, access } => {
                let (buf, idx) = self.index(access);
                LStmt::Load {
                    dest: self.scalar_slot(dest),
                    buf,
                    idx,
                }
            }
            Stmt::Store { access, value } => {
                let (buf, idx) = self.index(access);
                LStmt::Store {
                    buf,
                    idx,
                    val: self.operand(value),
                }
            }
            Stmt::BinOp { dest, op } => {
                let d = self.scalar_slot(dest);
                match op {
                    ArithOp::Mul(a, b) => LStmt::Mul(d, self.operand(a), self.operand(b)),
                    ArithOp::Add(a, b) => LStmt::Add(d, self.operand(a), self.operand(b)),
                    ArithOp::Fma(a, b, c) => {
                        LStmt::Fma(d, self.operand(a), self.operand(b), self.operand(c))
                    }
                }
            }
            Stmt::AccumInit { name, value } => LStmt::Init(self.scalar_slot(name), *value),
            Stmt::AccumUpdate { name, term } => {
                let d = self.scalar_slot(name);
                match term {
                    AccumTerm::Product(a, b) => {
                        LStmt::AccProduct(d, self.operand(a), self.operand(b))
                    }
                    AccumTerm::Value(v) => LStmt::AccValue(d, self.operand(v)),
                }
            }
            Stmt::Call(c) => {
                let intrinsic = Intrinsic::from_name(&c.name).expect("validated");
                let args = intrinsic
                    .signature()
                    .iter()
                    .zip(&c.args)
                    .map(|(kind, a)| match (kind, a) {
                        (ArgKind::Buffer, Arg::Name(n)) => LArg::Buf(self.buffers[n.as_str()]),
                        (ArgKind::Int, Arg::Name(n)) => LArg::Int(LInt::Slot(self.int_slot(n))),
                        (ArgKind::Int, Arg::Int(v)) => LArg::Int(LInt::Const(*v)),
                        (ArgKind::Float, Arg::Float(v)) => LArg::Float(*v),
                        (ArgKind::Float, Arg::Int(v)) => LArg::Float(*v as f32),
                        (_, Arg::Layout(l)) => LArg::Layout(*l),
                        (_, Arg::Transpose(t)) => LArg::Trans(*t),
                        _ => unreachable!("validated"),
                    })
                    .collect();
                LStmt::Call(intrinsic, args)
            }
        }
    }
}

impl Interpreter {
    /// Validates `prog` and lowers its `main` function.
    pub fn new(prog: &Program) -> Result<Self, InterpError> {
        let diags = validate(prog);
        if !diags.is_empty() {
            return Err(InterpError::Invalid(diags));
        }
        let main = prog.main().ok_or(InterpError::NoMain)?;
        let mut low = Lowering {
            prog,
            ints: HashMap::new(),
            scalars: HashMap::new(),
            buffers: prog
                .buffers
                .iter()
                .enumerate()
                .map(|(i, b)| (b.name.as_str(), i))
                .collect(),
        };
        // Parameters take the first integer slots, in declaration order.
        for p in &prog.params {
            low.int_slot(&p.name);
        }
        let body = low.block(&main.body);
        Ok(Interpreter {
            body,
            buffers: prog.buffers.clone(),
            params: prog.params.clone(),
            int_slots: low.ints.len(),
            scalar_slots: low.scalars.len(),
        })
    }

    pub fn run(&self, env: &mut Env) -> Result<(), InterpError> {
        self.run_with(env, &ExecOptions::default()).map(|_| ())
    }

    /// Executes `main` against `env`, returning per-GEMV records when
    /// `opts.record` is set. Buffers stay bound in `env` even on error.
    pub fn run_with(
        &self,
        env: &mut Env,
        opts: &ExecOptions,
    ) -> Result<Vec<GemvRecord>, InterpError> {
        let mut ints = vec![0i64; self.int_slots];
        for (slot, p) in self.params.iter().enumerate() {
            ints[slot] = match p.value {
                Some(v) => v,
                None => *env
                    .params
                    .get(&p.name)
                    .ok_or_else(|| InterpError::ParamUnbound(p.name.clone()))?,
            };
        }

        let mut bufs = Vec::with_capacity(self.buffers.len());
        let mut failure = None;
        for decl in &self.buffers {
            match env.buffers.remove(&decl.name) {
                Some(b) if b.len() == decl.shape.extent() => bufs.push(b),
                Some(b) => {
                    failure = Some(InterpError::Extent {
                        name: decl.name.clone(),
                        expected: decl.shape.extent(),
                        actual: b.len(),
                    });
                    bufs.push(b);
                    break;
                }
                None => {
                    failure = Some(InterpError::Unbound(decl.name.clone()));
                    break;
                }
            }
        }

        let result = match failure {
            Some(e) => Err(e),
            None => {
                let mut m = Machine {
                    decls: &self.buffers,
                    bufs: &mut bufs,
                    ints,
                    scalars: vec![0.0; self.scalar_slots],
                    opts,
                    records: Vec::new(),
                };
                m.exec(&self.body).map(|()| m.records)
            }
        };
        for (decl, b) in self.buffers.iter().zip(bufs) {
            env.buffers.insert(decl.name.clone(), b);
        }
        result
    }
}

/// Validates, lowers and runs `prog` once.
pub fn interpret(prog: &Program, env: &mut Env) -> Result<(), InterpError> {
    Interpreter::new(prog)?.run(env)
}

struct Machine<'a> {
    decls: &'a [BufferDecl],
    bufs: &'a mut Vec<Buffer>,
    ints: Vec<i64>,
    scalars: Vec<f32>,
    opts: &'a ExecOptions,
    records: Vec<GemvRecord>,
}

impl Machine<'_> {
    #[inline]
    fn val(&self, o: LOperand) -> f32 {
        match o {
            LOperand::Slot(s) => self.scalars[s],
            LOperand::Const(c) => c,
        }
    }

    fn name(&self, buf: usize) -> String {
        self.decls[buf].name.clone()
    }

    #[inline]
    fn locate(&self, buf: usize, idx: &LIndex) -> Result<usize, InterpError> {
        match idx {
            LIndex::Flat(e) => {
                let i = e.eval(&self.ints);
                let extent = self.bufs[buf].len();
                if i < 0 || i as usize >= extent {
                    return Err(InterpError::OutOfBounds {
                        buffer: self.name(buf),
                        index: vec![i],
                        extent: vec![extent],
                    });
                }
                Ok(i as usize)
            }
            LIndex::Two(r, c, rows, cols) => {
                let (i, j) = (r.eval(&self.ints), c.eval(&self.ints));
                if i < 0 || j < 0 || i as usize >= *rows || j as usize >= *cols {
                    return Err(InterpError::OutOfBounds {
                        buffer: self.name(buf),
                        index: vec![i, j],
                        extent: vec![*rows, *cols],
                    });
                }
                Ok(i as usize * cols + j as usize)
            }
        }
    }

    fn exec(&mut self, body: &[LStmt]) -> Result<(), InterpError> {
        for s in body {
            match s {
                LStmt::Loop { iv, lo, hi, body } => {
                    let (lo, hi) = (lo.eval(&self.ints), hi.eval(&self.ints));
                    for v in lo..hi {
                        self.ints[*iv] = v;
                        self.exec(body)?;
                    }
                }
                LStmt::Load { dest, buf, idx } => {
                    let i = self.locate(*buf, idx)?;
                    self.scalars[*dest] = self.bufs[*buf].load(i);
                }
                LStmt::Store { buf, idx, val } => {
                    let i = self.locate(*buf, idx)?;
                    let v = self.val(*val);
                    match &mut self.bufs[*buf] {
                        Buffer::Dense(d) => d[i] = v,
                        _ => return Err(InterpError::ReadOnly(self.name(*buf))),
                    }
                }
                LStmt::Mul(d, a, b) => self.scalars[*d] = self.val(*a) * self.val(*b),
                LStmt::Add(d, a, b) => self.scalars[*d] = self.val(*a) + self.val(*b),
                LStmt::Fma(d, a, b, c) => {
                    self.scalars[*d] = self.val(*a) * self.val(*b) + self.val(*c)
                }
                LStmt::Init(d, v) => self.scalars[*d] = *v,
                LStmt::AccProduct(d, a, b) => self.scalars[*d] += self.val(*a) * self.val(*b),
                LStmt::AccValue(d, a) => self.scalars[*d] += self.val(*a),
                LStmt::Call(intrinsic, args) => self.call(*intrinsic, args)?,
            }
        }
        Ok(())
    }

    fn call(&mut self, intrinsic: Intrinsic, args: &[LArg]) -> Result<(), InterpError> {
        // Calls are rare next to loads and stores; a snapshot of the integer
        // slots keeps argument decoding independent of buffer borrows.
        let ints = self.ints.clone();
        let call = CallArgs {
            args,
            ints: &ints,
            intrinsic,
        };
        match intrinsic {
            Intrinsic::Gemv => self.gemv(&call),
            Intrinsic::Rmsnorm => {
                let (out, inp, w, n) = (call.buf(0), call.buf(1), call.buf(2), call.usize(3)?);
                let weights = self.dense(&call, w, n)?.to_vec();
                let input = self.dense(&call, inp, n)?.to_vec();
                let o = self.writable(&call, out, n)?;
                intrinsics::rmsnorm(&mut o[..n], &input, &weights);
                Ok(())
            }
            Intrinsic::Softmax | Intrinsic::Silu => {
                let (b, n) = (call.buf(0), call.usize(1)?);
                let v = &mut self.writable(&call, b, n)?[..n];
                if intrinsic == Intrinsic::Softmax {
                    intrinsics::softmax(v)
                } else {
                    intrinsics::silu(v)
                }
                Ok(())
            }
            Intrinsic::Rope => {
                let (q, k) = (call.buf(0), call.buf(1));
                let (pos, dim, kv_dim, hd) = (
                    call.usize(2)?,
                    call.usize(3)?,
                    call.usize(4)?,
                    call.usize(5)?,
                );
                if q == k || hd == 0 || hd % 2 != 0 || kv_dim > dim || dim % 2 != 0 {
                    return Err(
                        call.fail("needs distinct q/k, an even head size and kv_dim <= dim")
                    );
                }
                self.writable(&call, q, dim)?;
                self.writable(&call, k, kv_dim)?;
                let [Buffer::Dense(qv), Buffer::Dense(kv)] =
                    self.bufs.get_disjoint_mut([q, k]).expect("distinct")
                else {
                    unreachable!("checked writable")
                };
                intrinsics::rope(&mut qv[..dim], &mut kv[..kv_dim], pos, hd);
                Ok(())
            }
            Intrinsic::Argmax => {
                let (dst, src, n) = (call.buf(0), call.buf(1), call.usize(2)?);
                if n == 0 {
                    return Err(call.fail("empty input"));
                }
                let best = intrinsics::argmax(&self.dense(&call, src, n)?[..n]);
                self.writable(&call, dst, 1)?[0] = best as f32;
                Ok(())
            }
            Intrinsic::Embed => {
                let (out, table, token, dim) =
                    (call.buf(0), call.buf(1), call.usize(2)?, call.usize(3)?);
                let start = token * dim;
                if start + dim > self.bufs[table].len() {
                    return Err(InterpError::OutOfBounds {
                        buffer: self.name(table),
                        index: vec![(start + dim) as i64 - 1],
                        extent: vec![self.bufs[table].len()],
                    });
                }
                let mut row = vec![0.0f32; dim];
                match &self.bufs[table] {
                    Buffer::Quantized { matrix, .. } if matrix.cols() == dim => {
                        let mut codes = vec![0u8; dim];
                        matrix
                            .decode_row(token, &mut codes, &mut row)
                            .map_err(|e| call.fail(&e.to_string()))?;
                    }
                    b => row
                        .iter_mut()
                        .enumerate()
                        .for_each(|(i, r)| *r = b.load(start + i)),
                }
                self.writable(&call, out, dim)?[..dim].copy_from_slice(&row);
                Ok(())
            }
            Intrinsic::Attention => self.attention(&call),
        }
    }

    fn attention(&mut self, call: &CallArgs<'_>) -> Result<(), InterpError> {
        let [out, q, k, v, kc, vc] = [0, 1, 2, 3, 4, 5].map(|i| call.buf(i));
        let (layer, pos) = (call.usize(6)?, call.usize(7)?);
        let shape = AttentionShape {
            n_heads: call.usize(8)?,
            n_kv_heads: call.usize(9)?,
            head_dim: call.usize(10)?,
            seq_len: call.usize(11)?,
        };
        if shape.n_kv_heads == 0
            || !shape.n_heads.is_multiple_of(shape.n_kv_heads)
            || pos >= shape.seq_len
        {
            return Err(call.fail("heads must group evenly and pos must be below seq_len"));
        }
        let (dim, kv_dim) = (shape.dim(), shape.kv_dim());
        let layer_len = shape.seq_len * kv_dim;
        let base = layer * layer_len;
        let distinct = [out, kc, vc];
        if [q, k, v].iter().any(|b| distinct.contains(b)) || out == kc || out == vc || kc == vc {
            return Err(call.fail("output, caches and inputs must be distinct buffers"));
        }
        let qv = self.dense(call, q, dim)?.to_vec();
        let kv = self.dense(call, k, kv_dim)?[..kv_dim].to_vec();
        let vv = self.dense(call, v, kv_dim)?[..kv_dim].to_vec();
        self.writable(call, kc, base + layer_len)?;
        self.writable(call, vc, base + layer_len)?;
        self.writable(call, out, dim)?;
        let [Buffer::Dense(o), Buffer::Dense(kcache), Buffer::Dense(vcache)] =
            self.bufs.get_disjoint_mut([out, kc, vc]).expect("distinct")
        else {
            unreachable!("checked writable")
        };
        let slot = base + pos * kv_dim;
        kcache[slot..slot + kv_dim].copy_from_slice(&kv);
        vcache[slot..slot + kv_dim].copy_from_slice(&vv);
        intrinsics::attention(
            &mut o[..dim],
            &qv,
            &kcache[base..base + layer_len],
            &vcache[base..base + layer_len],
            pos,
            shape,
        );
        Ok(())
    }

    fn gemv(&mut self, call: &CallArgs<'_>) -> Result<(), InterpError> {
        let p = GemvParams {
            layout: call.layout(0),
            trans: call.trans(1),
            m: call.usize(2)?,
            n: call.usize(3)?,
            alpha: call.float(4),
            lda: call.usize(6)?,
            incx: call.usize(8)?,
            beta: call.float(9),
            incy: call.usize(11)?,
        };
        let (a, x, y) = (call.buf(5), call.buf(7), call.buf(10));
        if y == a || y == x {
            return Err(call.fail("output aliases an input"));
        }
        let Buffer::Dense(mut yv) = std::mem::replace(&mut self.bufs[y], Buffer::Dense(Vec::new()))
        else {
            return Err(InterpError::ReadOnly(self.name(y)));
        };
        let result = self.gemv_into(call, &p, a, x, &mut yv);
        self.bufs[y] = Buffer::Dense(yv);
        let record = result?;
        if self.opts.record {
            self.records.push(record);
        }
        Ok(())
    }

    fn gemv_into(
        &self,
        call: &CallArgs<'_>,
        p: &GemvParams<f32>,
        a: usize,
        x: usize,
        y: &mut [f32],
    ) -> Result<GemvRecord, InterpError> {
        let xv = self.bufs[x]
            .as_dense()
            .ok_or_else(|| call.fail("vector operand is quantized"))?;
        let mut record = GemvRecord {
            matrix: self.name(a),
            m: p.m,
            n: p.n,
            quantized: false,
            fallback: false,
            bound: None,
            deviation: None,
        };
        match &self.bufs[a] {
            Buffer::Dense(av) => kernels::gemv_opt(av, xv, y, p)?,
            Buffer::Shared(av) => kernels::gemv_opt(av, xv, y, p)?,
            Buffer::Quantized { matrix, fallback } => {
                record.quantized = true;
                p.validate(matrix.rows() * matrix.cols(), xv.len(), y.len())?;
                let xs: Vec<f32> = (0..p.x_len()).map(|k| xv[k * p.incx]).collect();
                let mut bound = kernels::error_bound(matrix.epsilon(), &xs, p.y_len());
                let scale = p.alpha.abs();
                if scale != 1.0 {
                    bound.inf_bound = round_up(bound.inf_bound as f64 * scale as f64);
                    bound.l2_bound = round_up(bound.l2_bound as f64 * scale as f64);
                }
                bound.threshold_exceeded = self
                    .opts
                    .bound_threshold
                    .is_some_and(|t| bound.inf_bound > t);
                let before = self.opts.shadow.then(|| y.to_vec());
                match fallback {
                    Some(fb) if bound.threshold_exceeded => {
                        kernels::gemv_opt(fb, xv, y, p)?;
                        record.fallback = true;
                    }
                    _ => kernels::gemv_sketch(matrix, xv, y, p)?,
                }
                if let (Some(mut reference), Some(fb)) = (before, fallback) {
                    kernels::gemv_opt(fb, xv, &mut reference, p)?;
                    let dev = (0..p.y_len())
                        .map(|i| (y[i * p.incy] - reference[i * p.incy]).abs())
                        .fold(0.0f32, f32::max);
                    record.deviation = Some(dev);
                }
                record.bound = Some(bound);
            }
        }
        Ok(record)
    }

    /// Read access to the first `n` elements of a dense-readable buffer.
    fn dense(&self, call: &CallArgs<'_>, buf: usize, n: usize) -> Result<&[f32], InterpError> {
        let b = &self.bufs[buf];
        let v = b
            .as_dense()
            .ok_or_else(|| call.fail(&format!("`{}` is quantized", self.name(buf))))?;
        if n > v.len() {
            return Err(self.overrun(buf, n));
        }
        Ok(v)
    }

    fn writable(
        &mut self,
        _call: &CallArgs<'_>,
        buf: usize,
        n: usize,
    ) -> Result<&mut Vec<f32>, InterpError> {
        if n > self.bufs[buf].len() {
            return Err(self.overrun(buf, n));
        }
        let name = self.name(buf);
        match &mut self.bufs[buf] {
            Buffer::Dense(v) => Ok(v),
            _ => Err(InterpError::ReadOnly(name)),
        }
    }

    fn overrun(&self, buf: usize, n: usize) -> InterpError {
        InterpError::OutOfBounds {
            buffer: self.name(buf),
            index: vec![n as i64 - 1],
            extent: vec![self.bufs[buf].len()],
        }
    }
}

fn round_up(v: f64) -> f32 {
    <f32 as crate::Scalar>::from_f64_upward(v)
}

struct CallArgs<'a> {
    args: &'a [LArg],
    ints: &'a [i64],
    intrinsic: Intrinsic,
}

impl CallArgs<'_> {
    fn fail(&self, message: &str) -> InterpError {
        InterpError::Intrinsic {
            intrinsic: self.intrinsic.name(),
            message: message.to_string(),
        }
    }

    fn buf(&self, i: usize) -> usize {
        match self.args[i] {
            LArg::Buf(b) => b,
            _ => unreachable!("validated"),
        }
    }

    fn usize(&self, i: usize) -> Result<usize, InterpError> {
        let LArg::Int(v) = self.args[i] else {
            unreachable!("validated")
        };
        let v = v.eval(self.ints);
        usize::try_from(v).map_err(|_| self.fail(&format!("argument {} is negative ({v})", i + 1)))
    }

    fn float(&self, i: usize) -> f32 {
        match self.args[i] {
            LArg::Float(v) => v,
            _ => unreachable!("validated"),
        }
    }

    fn layout(&self, i: usize) -> Layout {
        match self.args[i] {
            LArg::Layout(l) => l,
            _ => unreachable!("validated"),
        }
    }

    fn trans(&self, i: usize) -> Transpose {
        match self.args[i] {
            LArg::Trans(t) => t,
            _ => unreachable!("validated"),
        }
    }
}
