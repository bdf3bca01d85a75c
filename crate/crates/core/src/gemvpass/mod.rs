//! Recognizes matrix-vector products written as loop nests and replaces them
//! with a single `gemv` intrinsic call.
//!
//! The pass has three stages:
//!
//! 1. [`find_candidates`] scans every loop nest. A nest of depth two whose
//!    inner loop is a multiply-add reduction over affine loads, followed by
//!    a store of the (optionally scaled) result into an output vector, is a
//!    candidate. The structure is recognized with the combinators in
//!    [`matchers`].
//! 2. [`check_legality`] rejects candidates with interfering statements or
//!    aliased operands and infers the matrix layout from the access offset:
//!    `i*lda + k` is row-major, `k*lda + i` column-major.
//! 3. [`rewrite`] inserts the call after the nest, removes the store and lets
//!    dead-code cleanup delete the now-unused loops.
//!
//! Nests that are rejected are left untouched, and running the pass on its
//! own output changes nothing.

mod cleanup;
pub mod matchers;

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::kernels::{Layout, Transpose};
use crate::loopir::{AffineExpr, Arg, Call, Coef, Index, Loop, Program, Shape, Stmt};

pub use cleanup::dead_loop_cleanup;
pub use matchers::{
    match_array_access, match_gemv_reduction, match_store_of_vector, one_of, AccessMatch,
    AccessVariant, Defs, Matcher, ReductionMatch, StoreForm, StoreMatch, VectorAccess,
};

/// Why a loop nest was not rewritten.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    /// A single loop, not a nest.
    NotDeepEnough,
    /// An index scaled by a run-time quantity or another loop variable.
    NonAffine,
    /// Statements beyond the reduction and its result store.
    ExtraSideEffect,
    /// The matrix access fits neither `i*lda + k` nor `k*lda + i`.
    LayoutUnknown,
    /// The matrix, input and output are not three distinct buffers.
    Aliased,
    /// The input or output vector is not read with unit stride from element 0.
    Strided,
    /// A two-index access that walks the matrix by column.
    Transposed,
    /// No multiply-add reduction stored into an output vector.
    NoReduction,
}

impl SkipReason {
    pub fn code(self) -> &'static str {
        match self {
            SkipReason::NotDeepEnough => "not-deep-enough",
            SkipReason::NonAffine => "non-affine",
            SkipReason::ExtraSideEffect => "extra-side-effect",
            SkipReason::LayoutUnknown => "layout-unknown",
            SkipReason::Aliased => "aliased",
            SkipReason::Strided => "strided",
            SkipReason::Transposed => "transposed",
            SkipReason::NoReduction => "no-reduction",
        }
    }
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// A structurally matched GEMV nest.
#[derive(Debug, Clone, PartialEq)]
pub struct GemvCandidate {
    pub function: String,
    /// Statement indices from the function body down to the outer loop.
    pub path: Vec<usize>,
    pub iv_i: String,
    pub iv_k: String,
    pub m: Arg,
    pub n: Arg,
    pub reduction: ReductionMatch,
    pub store: StoreMatch,
    /// Position of the result store in the outer loop body.
    pub store_index: usize,
    /// Combined scale of the reduction and the store.
    pub alpha: f32,
    pub beta: f32,
    /// Filled in once [`check_legality`] accepts the candidate.
    pub layout: Option<Layout>,
    pub lda: Option<Arg>,
}

impl GemvCandidate {
    pub fn matrix(&self) -> &str {
        &self.reduction.matrix.buffer
    }

    pub fn vector(&self) -> &str {
        &self.reduction.vector.buffer
    }

    pub fn output(&self) -> &str {
        &self.store.output.buffer
    }

    /// The replacement call; `None` until the layout is known.
    pub fn call(&self) -> Option<Call> {
        Some(Call {
            name: "gemv".into(),
            args: vec![
                Arg::Layout(self.layout?),
                Arg::Transpose(Transpose::NoTrans),
                self.m.clone(),
                self.n.clone(),
                Arg::Float(self.alpha),
                Arg::Name(self.matrix().into()),
                self.lda.clone()?,
                Arg::Name(self.vector().into()),
                Arg::Int(1),
                Arg::Float(self.beta),
                Arg::Name(self.output().into()),
                Arg::Int(1),
            ],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Legality {
    Accept { layout: Layout, lda: Arg },
    Reject { reason: SkipReason, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NestStatus {
    Candidate(Box<GemvCandidate>),
    Skipped { reason: SkipReason, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestOutcome {
    pub function: String,
    pub path: Vec<usize>,
    pub outer_iv: String,
    pub status: NestStatus,
}

/// Every scanned nest, each either an accepted candidate or skipped with a reason.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchOutcome {
    pub nests: Vec<NestOutcome>,
}

impl MatchOutcome {
    pub fn candidates(&self) -> impl Iterator<Item = &GemvCandidate> {
        self.nests.iter().filter_map(|n| match &n.status {
            NestStatus::Candidate(c) => Some(&**c),
            NestStatus::Skipped { .. } => None,
        })
    }

    pub fn skipped(&self) -> impl Iterator<Item = (&NestOutcome, SkipReason)> {
        self.nests.iter().filter_map(|n| match &n.status {
            NestStatus::Skipped { reason, .. } => Some((n, *reason)),
            NestStatus::Candidate(_) => None,
        })
    }
}

fn skip(reason: SkipReason, detail: impl Into<String>) -> (SkipReason, String) {
    (reason, detail.into())
}

/// Scans all loop nests of every function. Nests of depth two are matched;
/// deeper nests are scanned for depth-two nests inside them.
pub fn find_candidates(p: &Program) -> MatchOutcome {
    let mut out = MatchOutcome::default();
    for f in &p.functions {
        scan(p, &f.name, &f.body, &mut Vec::new(), &mut out);
    }
    out
}

fn scan(p: &Program, function: &str, body: &[Stmt], path: &mut Vec<usize>, out: &mut MatchOutcome) {
    for (idx, s) in body.iter().enumerate() {
        let Stmt::Loop(l) = s else { continue };
        path.push(idx);
        let depth = crate::loopir::nest_depth(std::slice::from_ref(s));
        if depth > 2 {
            scan(p, function, &l.body, path, out);
        } else {
            let status = match analyze(p, function, path, l) {
                Err((reason, detail)) => NestStatus::Skipped { reason, detail },
                Ok(mut c) => match check_legality(&c, p) {
                    Legality::Accept { layout, lda } => {
                        c.layout = Some(layout);
                        c.lda = Some(lda);
                        NestStatus::Candidate(Box::new(c))
                    }
                    Legality::Reject { reason, detail } => NestStatus::Skipped { reason, detail },
                },
            };
            out.nests.push(NestOutcome {
                function: function.into(),
                path: path.clone(),
                outer_iv: l.iv.clone(),
                status,
            });
        }
        path.pop();
    }
}

/// Extent of `0..upper` as a call argument: a constant or a bare parameter.
fn extent_arg(lower: &AffineExpr, upper: &AffineExpr) -> Option<Arg> {
    if *lower != AffineExpr::constant(0) {
        return None;
    }
    match upper.terms.as_slice() {
        [] if upper.offset > 0 => Some(Arg::Int(upper.offset)),
        [t] if upper.offset == 0 && t.coef == Coef::Const(1) => Some(Arg::Name(t.var.clone())),
        _ => None,
    }
}

fn indices_of(s: &Stmt) -> Vec<&Index> {
    match s {
        Stmt::Load { access, .. } | Stmt::Store { access, .. } => vec![&access.index],
        _ => vec![],
    }
}

fn index_exprs(ix: &Index) -> Vec<&AffineExpr> {
    match ix {
        Index::Flat(e) => vec![e],
        Index::Pair(a, b) | Index::Nested(a, b) => vec![a, b],
    }
}

/// Structural match of one depth-two nest.
fn analyze(
    p: &Program,
    function: &str,
    path: &[usize],
    outer: &Loop,
) -> Result<GemvCandidate, (SkipReason, String)> {
    let wrapped = [Stmt::Loop(outer.clone())];
    let nest = &wrapped[..];
    if crate::loopir::nest_depth(nest) < 2 {
        return Err(skip(SkipReason::NotDeepEnough, "single loop"));
    }

    // Coefficients must be compile-time: constants or parameters with a value.
    let mut non_affine = None;
    crate::loopir::walk(nest, &mut |s| {
        for ix in indices_of(s) {
            for e in index_exprs(ix) {
                for t in &e.terms {
                    if let Coef::Param(c) = &t.coef {
                        if p.param(c).and_then(|d| d.value).is_none() && non_affine.is_none() {
                            non_affine =
                                Some(format!("`{}` scaled by run-time value `{c}`", t.var));
                        }
                    }
                }
            }
        }
    });
    if let Some(detail) = non_affine {
        return Err(skip(SkipReason::NonAffine, detail));
    }

    let loops: Vec<(usize, &Loop)> = outer
        .body
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match s {
            Stmt::Loop(l) => Some((i, l)),
            _ => None,
        })
        .collect();
    let [(loop_index, inner)] = loops.as_slice() else {
        return Err(skip(
            SkipReason::ExtraSideEffect,
            "more than one inner loop",
        ));
    };
    let (m, n) = match (
        extent_arg(&outer.lower, &outer.upper),
        extent_arg(&inner.lower, &inner.upper),
    ) {
        (Some(m), Some(n)) => (m, n),
        _ => {
            return Err(skip(
                SkipReason::NoReduction,
                "loops must run from 0 to a constant or parameter",
            ))
        }
    };

    let defs = Defs::collect(nest);
    let reduction =
        match_gemv_reduction(&inner.body, &defs, &outer.iv, &inner.iv).ok_or_else(|| {
            skip(
                SkipReason::NoReduction,
                "inner loop is not a multiply-add reduction",
            )
        })?;
    let acc = reduction.accumulator.as_str();
    let zero_init = outer.body[..*loop_index]
        .iter()
        .any(|s| matches!(s, Stmt::AccumInit { name, value } if name == acc && *value == 0.0));
    if !zero_init {
        return Err(skip(
            SkipReason::NoReduction,
            format!("accumulator `{acc}` is not reset to zero before the inner loop"),
        ));
    }

    let stores: Vec<usize> = (0..outer.body.len())
        .filter(|&i| matches!(outer.body[i], Stmt::Store { .. }))
        .collect();
    let store_index = match stores.as_slice() {
        [] => return Err(skip(SkipReason::NoReduction, "no result store")),
        [s] if s > loop_index => *s,
        [_] => {
            return Err(skip(
                SkipReason::NoReduction,
                "result stored before the reduction",
            ))
        }
        _ => {
            return Err(skip(
                SkipReason::ExtraSideEffect,
                "more than one store in the outer loop",
            ))
        }
    };
    let store = match_store_of_vector(&outer.body[store_index], acc, &defs, &outer.iv).ok_or_else(
        || {
            skip(
                SkipReason::NoReduction,
                "store is not a scaled reduction result",
            )
        },
    )?;

    Ok(GemvCandidate {
        function: function.into(),
        path: path.to_vec(),
        iv_i: outer.iv.clone(),
        iv_k: inner.iv.clone(),
        m,
        n,
        alpha: reduction.alpha * store.alpha,
        beta: store.beta,
        reduction,
        store,
        store_index,
        layout: None,
        lda: None,
    })
}

fn loop_at<'a>(body: &'a [Stmt], path: &[usize]) -> Option<&'a Loop> {
    let (first, rest) = path.split_first()?;
    match body.get(*first)? {
        Stmt::Loop(l) if rest.is_empty() => Some(l),
        Stmt::Loop(l) => loop_at(&l.body, rest),
        _ => None,
    }
}

fn body_at_mut<'a>(body: &'a mut Vec<Stmt>, parents: &[usize]) -> Option<&'a mut Vec<Stmt>> {
    match parents.split_first() {
        None => Some(body),
        Some((first, rest)) => match body.get_mut(*first)? {
            Stmt::Loop(l) => body_at_mut(&mut l.body, rest),
            _ => None,
        },
    }
}

/// Names a statement list needs to compute `roots`, following definitions
/// made in that same list.
fn chain(stmts: &[Stmt], roots: Vec<String>) -> std::collections::HashSet<String> {
    let mut seen = std::collections::HashSet::new();
    let mut todo = roots;
    while let Some(name) = todo.pop() {
        if !seen.insert(name.clone()) {
            continue;
        }
        for s in stmts {
            if let Stmt::BinOp { dest, op } = s {
                if *dest == name {
                    todo.extend(
                        op.operands()
                            .into_iter()
                            .filter_map(|o| o.as_var())
                            .map(str::to_string),
                    );
                }
            }
        }
    }
    seen
}

fn footprint_violation(outer: &Loop, c: &GemvCandidate) -> Option<String> {
    let acc = &c.reduction.accumulator;
    let inner_pos = outer.body.iter().position(|s| matches!(s, Stmt::Loop(_)))?;
    let Stmt::Loop(inner) = &outer.body[inner_pos] else {
        unreachable!()
    };

    let update_ops = inner.body.iter().find_map(|s| match s {
        Stmt::AccumUpdate { name, term } if name == acc => Some(match term {
            crate::loopir::AccumTerm::Product(a, b) => vec![a, b],
            crate::loopir::AccumTerm::Value(v) => vec![v],
        }),
        _ => None,
    })?;
    let inner_chain = chain(
        &inner.body,
        update_ops
            .into_iter()
            .filter_map(|o| o.as_var())
            .map(str::to_string)
            .collect(),
    );
    for s in &inner.body {
        let ok = match s {
            Stmt::Load { dest, .. } | Stmt::BinOp { dest, .. } => inner_chain.contains(dest),
            Stmt::AccumUpdate { name, .. } => name == acc,
            _ => false,
        };
        if !ok {
            return Some(format!("inner loop also contains `{}`", first_line(s)));
        }
    }

    let Stmt::Store { value, .. } = &outer.body[c.store_index] else {
        return Some("store moved".into());
    };
    let outer_chain = chain(
        &outer.body,
        value.as_var().map(str::to_string).into_iter().collect(),
    );
    for (i, s) in outer.body.iter().enumerate() {
        let ok = match s {
            Stmt::Load { dest, .. } | Stmt::BinOp { dest, .. } => outer_chain.contains(dest),
            Stmt::AccumInit { name, .. } => name == acc,
            Stmt::Loop(_) => i == inner_pos,
            Stmt::Store { .. } => i == c.store_index,
            _ => false,
        };
        if !ok {
            return Some(format!("outer loop also contains `{}`", first_line(s)));
        }
    }
    None
}

fn first_line(s: &Stmt) -> String {
    let prog = Program {
        functions: vec![crate::loopir::Function {
            name: String::new(),
            body: vec![s.clone()],
        }],
        ..Default::default()
    };
    prog.to_string()
        .lines()
        .nth(1)
        .unwrap_or("")
        .trim()
        .to_string()
}

fn coef_arg(c: &Coef) -> Arg {
    match c {
        Coef::Const(v) => Arg::Int(*v),
        Coef::Param(p) => Arg::Name(p.clone()),
    }
}

fn arg_value(p: &Program, a: &Arg) -> Option<i64> {
    match a {
        Arg::Int(v) => Some(*v),
        Arg::Name(n) => p.param(n).and_then(|d| d.value),
        _ => None,
    }
}

/// Checks that rewriting `c` is safe and infers the matrix layout.
pub fn check_legality(c: &GemvCandidate, p: &Program) -> Legality {
    let reject = |reason, detail: &str| Legality::Reject {
        reason,
        detail: detail.to_string(),
    };
    let Some(outer) = p
        .function(&c.function)
        .and_then(|f| loop_at(&f.body, &c.path))
        .filter(|l| l.iv == c.iv_i)
    else {
        return reject(
            SkipReason::NoReduction,
            "candidate does not refer to a loop nest of this program",
        );
    };

    let (a, x, y) = (c.matrix(), c.vector(), c.output());
    if a == x || a == y || x == y {
        return reject(
            SkipReason::Aliased,
            "matrix, input and output must be distinct buffers",
        );
    }
    if let Some(detail) = footprint_violation(outer, c) {
        return reject(SkipReason::ExtraSideEffect, &detail);
    }
    if !c.reduction.vector_match.is_unit() {
        return reject(SkipReason::Strided, "input vector is not read as x[k]");
    }
    if !c.store.output_match.is_unit() {
        return reject(SkipReason::Strided, "output vector is not written as y[i]");
    }

    let am = &c.reduction.matrix_match;
    let (layout, lda) = match am.variant {
        AccessVariant::TwoIndex | AccessVariant::NestedIndirection => {
            if am.swapped {
                return reject(SkipReason::Transposed, "matrix is indexed [k][i]");
            }
            let Some(Shape::Matrix(_, cols)) = p.buffer(a).map(|b| b.shape) else {
                return reject(
                    SkipReason::LayoutUnknown,
                    "two-index access to a buffer without a matrix shape",
                );
            };
            (Layout::RowMajor, Arg::Int(cols as i64))
        }
        AccessVariant::PhiTimesLd => {
            let lda = coef_arg(am.row_coef.as_ref().expect("flat access"));
            (
                if am.swapped {
                    Layout::ColMajor
                } else {
                    Layout::RowMajor
                },
                lda,
            )
        }
        AccessVariant::AffineFunction => {
            return reject(
                SkipReason::LayoutUnknown,
                "offset is neither i*lda + k nor k*lda + i",
            );
        }
    };
    // `i + k` reads both ways with lda = 1; one of them may be legal when a
    // dimension is 1.
    let mut readings = vec![(layout, lda.clone())];
    if am.variant == AccessVariant::PhiTimesLd && lda == Arg::Int(1) {
        let other = match layout {
            Layout::RowMajor => Layout::ColMajor,
            Layout::ColMajor => Layout::RowMajor,
        };
        readings.push((other, lda));
    }
    let mut first_failure = None;
    for (layout, lda) in readings {
        match lda_failure(p, c, layout, &lda) {
            None => return Legality::Accept { layout, lda },
            Some(detail) => {
                first_failure.get_or_insert(detail);
            }
        }
    }
    reject(
        SkipReason::LayoutUnknown,
        first_failure.expect("at least one reading"),
    )
}

/// Why `lda` cannot be the leading dimension of the candidate's matrix in
/// `layout`: it must be positive and cover a full row (row-major) or column.
fn lda_failure(p: &Program, c: &GemvCandidate, layout: Layout, lda: &Arg) -> Option<&'static str> {
    let span = if layout == Layout::RowMajor {
        &c.n
    } else {
        &c.m
    };
    match (arg_value(p, lda), arg_value(p, span)) {
        (Some(l), _) if l <= 0 => Some("non-positive leading dimension"),
        (Some(l), Some(s)) if l < s => Some("leading dimension smaller than the row length"),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error("candidate has not been accepted by the legality check")]
    NotAccepted,
    #[error("candidate no longer matches the program: {0}")]
    Inconsistent(String),
}

/// Replaces the candidate nest with a `gemv` call. On any inconsistency the
/// error is returned and the caller keeps the original program.
pub fn rewrite(p: &Program, c: &GemvCandidate) -> Result<Program, RewriteError> {
    let call = c.call().ok_or(RewriteError::NotAccepted)?;
    let inconsistent = |m: &str| RewriteError::Inconsistent(m.to_string());
    let mut out = p.clone();
    let func = out
        .functions
        .iter_mut()
        .find(|f| f.name == c.function)
        .ok_or_else(|| inconsistent("function not found"))?;
    let (&idx, parents) = c
        .path
        .split_last()
        .ok_or_else(|| inconsistent("empty path"))?;
    let body = body_at_mut(&mut func.body, parents)
        .ok_or_else(|| inconsistent("path does not lead to a loop"))?;
    let Some(Stmt::Loop(mut nest)) = body.get(idx).cloned() else {
        return Err(inconsistent("no loop at path"));
    };
    if nest.iv != c.iv_i {
        return Err(inconsistent("outer loop variable differs"));
    }
    match nest.body.get(c.store_index) {
        Some(Stmt::Store { access, .. }) if *access == c.store.output => {}
        _ => return Err(inconsistent("result store not found")),
    }

    // Call at the nest's exit, store removed, then the emptied nest cleaned up.
    nest.body.remove(c.store_index);
    let mut leftover = vec![Stmt::Loop(nest)];
    cleanup::cleanup_block(&mut leftover);
    if !leftover.is_empty() {
        return Err(inconsistent(
            "loop nest still has live statements after cleanup",
        ));
    }
    body[idx] = Stmt::Call(call);
    Ok(out)
}

/// Output of [`optimize`].
#[derive(Debug, Clone)]
pub struct PassResult {
    pub program: Program,
    pub outcome: MatchOutcome,
    pub report: MatchReport,
}

/// Runs the whole pass: match, check, rewrite every accepted nest.
pub fn optimize(p: &Program) -> PassResult {
    let outcome = find_candidates(p);
    let mut program = p.clone();
    let mut rewritten = vec![false; outcome.nests.len()];
    let mut failures = vec![None; outcome.nests.len()];
    // Later nests first, so earlier paths stay valid.
    let mut order: Vec<usize> = (0..outcome.nests.len()).collect();
    order.sort_by(|&a, &b| {
        let (na, nb) = (&outcome.nests[a], &outcome.nests[b]);
        (&na.function, &nb.path).cmp(&(&nb.function, &na.path))
    });
    for i in order {
        if let NestStatus::Candidate(c) = &outcome.nests[i].status {
            match rewrite(&program, c) {
                Ok(next) => {
                    program = next;
                    rewritten[i] = true;
                }
                Err(e) => failures[i] = Some(e.to_string()),
            }
        }
    }
    let report = MatchReport::new(&outcome, &rewritten, &failures);
    PassResult {
        program,
        outcome,
        report,
    }
}

/// Parameters of a rewritten GEMV, as strings for the report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GemvSummary {
    pub layout: Layout,
    pub trans: Transpose,
    pub m: String,
    pub n: String,
    pub alpha: f32,
    pub beta: f32,
    pub matrix: String,
    pub lda: String,
    pub x: String,
    pub y: String,
    pub access: AccessVariant,
    pub store_form: StoreForm,
}

/// One record per scanned nest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NestRecord {
    pub function: String,
    pub path: Vec<usize>,
    pub outer_iv: String,
    pub matched: bool,
    pub rewritten: bool,
    pub reason: Option<SkipReason>,
    pub detail: Option<String>,
    pub gemv: Option<GemvSummary>,
}

/// Machine-readable summary of a pass run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchReport {
    pub nests_scanned: usize,
    pub matched: usize,
    pub rewritten: usize,
    pub skipped: usize,
    pub nests: Vec<NestRecord>,
}

impl MatchReport {
    fn new(outcome: &MatchOutcome, rewritten: &[bool], failures: &[Option<String>]) -> Self {
        let nests: Vec<NestRecord> = outcome
            .nests
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let (reason, detail, gemv) = match &n.status {
                    NestStatus::Skipped { reason, detail } => {
                        (Some(*reason), Some(detail.clone()), None)
                    }
                    NestStatus::Candidate(c) => (
                        None,
                        failures[i].clone(),
                        Some(GemvSummary {
                            layout: c.layout.expect("accepted"),
                            trans: Transpose::NoTrans,
                            m: c.m.to_string(),
                            n: c.n.to_string(),
                            alpha: c.alpha,
                            beta: c.beta,
                            matrix: c.matrix().into(),
                            lda: c.lda.as_ref().map(ToString::to_string).unwrap_or_default(),
                            x: c.vector().into(),
                            y: c.output().into(),
                            access: c.reduction.matrix_match.variant,
                            store_form: c.store.form,
                        }),
                    ),
                };
                NestRecord {
                    function: n.function.clone(),
                    path: n.path.clone(),
                    outer_iv: n.outer_iv.clone(),
                    matched: gemv.is_some(),
                    rewritten: rewritten[i],
                    reason,
                    detail,
                    gemv,
                }
            })
            .collect();
        MatchReport {
            nests_scanned: nests.len(),
            matched: nests.iter().filter(|n| n.matched).count(),
            rewritten: nests.iter().filter(|n| n.rewritten).count(),
            skipped: nests.iter().filter(|n| !n.matched).count(),
            nests,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loopir::{interpret, parse, Buffer, Env};
    use proptest::prelude::*;

    const LISTING: &str = "\
param M = 3
param N = 5
buffer A[15]
buffer x[5]
buffer y[3]
func main {
  for i in 0..M {
    acc sum = 0.0
    for k in 0..N {
      let a = load A[i*N + k]
      let b = load x[k]
      sum += a * b
    }
    store y[i] = sum
  }
}
";

    fn only_reason(src: &str) -> SkipReason {
        let out = find_candidates(&parse(src).unwrap());
        assert_eq!(out.candidates().count(), 0, "{src}");
        let reasons: Vec<_> = out.skipped().map(|(_, r)| r).collect();
        assert_eq!(reasons.len(), 1, "{reasons:?}");
        reasons[0]
    }

    fn gemv_nest(header: &str, matrix_index: &str, store: &str) -> String {
        format!(
            "{header}\nfunc main {{\n  for i in 0..3 {{\n    acc s = 0.0\n    for k in 0..4 {{\n      \
             let a = load A[{matrix_index}]\n      let b = load x[k]\n      s += a * b\n    }}\n{store}\n  }}\n}}\n"
        )
    }

    /// The body of [`gemv_nest`] without declarations or the function wrapper.
    fn nest_body(matrix_index: &str, store: &str) -> String {
        let full = gemv_nest("", matrix_index, store);
        let start = full.find("  for i").unwrap();
        full[start..full.len() - 2].to_string()
    }

    const DECLS: &str = "buffer A[12]\nbuffer x[4]\nbuffer y[3]";

    #[test]
    fn plain_nest_becomes_row_major_call() {
        let p = parse(LISTING).unwrap();
        let out = optimize(&p);
        let c: Vec<_> = out.outcome.candidates().collect();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].layout, Some(Layout::RowMajor));
        assert_eq!((c[0].alpha, c[0].beta), (1.0, 0.0));
        assert_eq!(c[0].lda, Some(Arg::Name("N".into())));
        let expected = parse(
            "param M = 3\nparam N = 5\nbuffer A[15]\nbuffer x[5]\nbuffer y[3]\n\
             func main {\n  call gemv(RowMajor, NoTrans, M, N, 1.0, A, N, x, 1, 0.0, y, 1)\n}",
        )
        .unwrap();
        assert_eq!(out.program, expected);
        assert_eq!(out.report.rewritten, 1);
    }

    #[test]
    fn call_matches_hand_computed_product() {
        let p = optimize(&parse(LISTING).unwrap()).program;
        let a: Vec<f32> = (0..15).map(|v| v as f32).collect();
        let mut env = Env::new();
        env.insert("A", Buffer::Dense(a))
            .insert("x", Buffer::Dense(vec![1.0, 0.0, 2.0, 0.0, -1.0]))
            .insert("y", Buffer::Dense(vec![9.0; 3]));
        interpret(&p, &mut env).unwrap();
        // Row r is [5r, 5r+1, ..., 5r+4]; dot with x is 5r + 2(5r+2) - (5r+4) = 10r.
        assert_eq!(env.dense("y").unwrap(), &[0.0, 10.0, 20.0]);
    }

    #[test]
    fn store_forms_give_alpha_and_beta() {
        let src = gemv_nest(
            DECLS,
            "i*4 + k",
            "    let t = mul s, 2.0\n    let old = load y[i]\n    let r = fma old, 0.5, t\n    store y[i] = r",
        );
        let out = find_candidates(&parse(&src).unwrap());
        let c = out.candidates().next().expect("matched");
        assert_eq!((c.alpha, c.beta), (2.0, 0.5));
    }

    #[test]
    fn column_major_from_swapped_offset() {
        let src = gemv_nest(DECLS, "k*3 + i", "    store y[i] = s");
        let c = find_candidates(&parse(&src).unwrap())
            .candidates()
            .next()
            .cloned()
            .unwrap();
        assert_eq!(c.layout, Some(Layout::ColMajor));
        assert_eq!(c.lda, Some(Arg::Int(3)));
    }

    #[test]
    fn unit_coefficient_index_takes_the_legal_layout() {
        // One output row, so `k*1 + i` can only be a column-major matrix.
        let src = "buffer A[4]\nbuffer x[4]\nbuffer y[1]\nfunc main {\n  for i in 0..1 {\n    \
                   acc s = 0.0\n    for k in 0..4 {\n      let a = load A[k*1 + i]\n      \
                   let b = load x[k]\n      s += a * b\n    }\n    store y[i] = s\n  }\n}";
        let out = optimize(&parse(src).unwrap());
        assert_eq!(out.report.rewritten, 1);
        let c = out.outcome.candidates().next().unwrap();
        assert_eq!(
            (c.layout, c.lda.clone()),
            (Some(Layout::ColMajor), Some(Arg::Int(1)))
        );
    }

    #[test]
    fn single_loop_is_not_deep_enough() {
        let single = "buffer x[4]\nbuffer y[4]\nfunc main {\n  for k in 0..4 {\n    let a = load x[k]\n    store y[k] = a\n  }\n}";
        assert_eq!(only_reason(single), SkipReason::NotDeepEnough);
    }

    #[test]
    fn extra_store_into_matrix_is_a_side_effect() {
        let src = gemv_nest(DECLS, "i*4 + k", "    store y[i] = s").replace(
            "      s += a * b\n",
            "      s += a * b\n      store A[i*4 + k] = b\n",
        );
        assert_eq!(only_reason(&src), SkipReason::ExtraSideEffect);
    }

    #[test]
    fn extra_load_of_output_is_a_side_effect() {
        let src = gemv_nest(DECLS, "i*4 + k", "    store y[i] = s").replace(
            "      let b = load x[k]\n",
            "      let b = load x[k]\n      let c = load y[k]\n",
        );
        assert_eq!(only_reason(&src), SkipReason::ExtraSideEffect);
    }

    #[test]
    fn runtime_scaled_index_is_non_affine() {
        let src = gemv_nest(
            &format!("param lda\n{DECLS}"),
            "i*lda + k",
            "    store y[i] = s",
        );
        assert_eq!(only_reason(&src), SkipReason::NonAffine);
    }

    #[test]
    fn shared_buffers_are_aliased() {
        let src = "buffer A[16]\nbuffer y[4]\nfunc main {\n  for i in 0..4 {\n    acc s = 0.0\n    for k in 0..4 {\n      \
                   let a = load A[i*4 + k]\n      let b = load A[k]\n      s += a * b\n    }\n    store y[i] = s\n  }\n}";
        assert_eq!(only_reason(src), SkipReason::Aliased);
    }

    #[test]
    fn other_rejections() {
        let strided = gemv_nest(DECLS, "i*4 + k", "    store y[i] = s")
            .replace("load x[k]", "load x[k*1 + 0]");
        assert!(
            find_candidates(&parse(&strided).unwrap())
                .candidates()
                .count()
                == 1
        );
        let big = "buffer A[12]\nbuffer x[8]\nbuffer y[3]";
        let strided =
            gemv_nest(big, "i*4 + k", "    store y[i] = s").replace("load x[k]", "load x[k*2]");
        assert_eq!(only_reason(&strided), SkipReason::Strided);
        let two = "buffer A[4, 3]\nbuffer x[4]\nbuffer y[3]";
        assert_eq!(
            only_reason(&gemv_nest(two, "k, i", "    store y[i] = s")),
            SkipReason::Transposed
        );
        assert_eq!(
            only_reason(&gemv_nest(DECLS, "i*4 + k + 1", "    store y[i] = s")),
            SkipReason::LayoutUnknown
        );
        assert_eq!(
            only_reason(&gemv_nest(DECLS, "i*2 + k", "    store y[i] = s")),
            SkipReason::LayoutUnknown
        );
        let no_red = gemv_nest(DECLS, "i*4 + k", "    store y[i] = 1.0");
        assert_eq!(only_reason(&no_red), SkipReason::NoReduction);
    }

    #[test]
    fn rejected_nests_are_left_alone_and_pass_is_idempotent() {
        let copy = "  for j in 0..3 {\n    let v = load y[j]\n    store z[j] = v\n  }\n";
        let src = format!(
            "{DECLS}\nbuffer z[3]\nfunc main {{\n{copy}{}}}\n",
            nest_body("i*4 + k", "    store y[i] = s")
        );
        let p = parse(&src).unwrap();
        let once = optimize(&p);
        assert_eq!((once.report.rewritten, once.report.skipped), (1, 1));
        assert!(once.program.to_string().contains(copy), "{}", once.program);
        let twice = optimize(&once.program);
        assert_eq!(twice.program, once.program);
        assert_eq!(twice.report.rewritten, 0);
    }

    #[test]
    fn nests_inside_deeper_loops_are_found() {
        let body = nest_body("i*4 + k", "    store y[i] = s");
        let src = format!("{DECLS}\nfunc main {{\n for t in 0..2 {{\n{body} }}\n}}\n");
        let out = optimize(&parse(&src).unwrap());
        assert_eq!(out.report.nests[0].path, vec![0, 0]);
        assert_eq!(out.report.rewritten, 1);
        assert!(
            out.program
                .to_string()
                .contains("for t in 0..2 {\n    call gemv("),
            "{}",
            out.program
        );
    }

    #[test]
    fn report_serializes_reason_codes() {
        let src = gemv_nest(DECLS, "i*4 + k + 1", "    store y[i] = s");
        let json = optimize(&parse(&src).unwrap()).report.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["nests"][0]["reason"], "layout-unknown");
        assert_eq!(v["skipped"], 1);
    }

    #[test]
    fn rewrite_refuses_stale_candidates() {
        let p = parse(LISTING).unwrap();
        let c = find_candidates(&p).candidates().next().cloned().unwrap();
        let other = parse("buffer y[1]\nfunc main { store y[0] = 1.0 }").unwrap();
        assert!(matches!(
            rewrite(&other, &c),
            Err(RewriteError::Inconsistent(_))
        ));
        let mut unaccepted = c.clone();
        unaccepted.layout = None;
        assert_eq!(rewrite(&p, &unaccepted), Err(RewriteError::NotAccepted));
    }

    fn two_nest_program(alpha: f32, beta: f32, col_major: bool) -> String {
        let index = if col_major { "k*3 + i" } else { "i*4 + k" };
        let store = format!(
            "    let t = mul s, {alpha:?}\n    let old = load y[i]\n    let r = fma old, {beta:?}, t\n    store y[i] = r"
        );
        let first = nest_body(index, &store);
        let second = "  for j in 0..4 {\n    acc u = 0.0\n    for c in 0..3 {\n      let w = load B[j, c]\n      \
                      let v = load y[c]\n      u += w * v\n    }\n    store z[j] = u\n  }\n";
        format!("{DECLS}\nbuffer B[4, 3]\nbuffer z[4]\nfunc main {{\n{first}{second}}}\n")
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn rewrite_preserves_results(
            a in prop::collection::vec(-2.0f32..2.0, 12),
            b in prop::collection::vec(-2.0f32..2.0, 12),
            x in prop::collection::vec(-2.0f32..2.0, 4),
            y in prop::collection::vec(-2.0f32..2.0, 3),
            alpha in -2.0f32..2.0,
            beta in -1.0f32..1.0,
            col_major: bool,
        ) {
            let p = parse(&two_nest_program(alpha, beta, col_major)).unwrap();
            let out = optimize(&p);
            prop_assert_eq!(out.report.rewritten, 2);
            prop_assert!(!out.program.to_string().contains("for "));
            let run = |prog: &Program| {
                let mut env = Env::new();
                env.insert("A", Buffer::Dense(a.clone()))
                    .insert("B", Buffer::Dense(b.clone()))
                    .insert("x", Buffer::Dense(x.clone()))
                    .insert("y", Buffer::Dense(y.clone()))
                    .insert("z", Buffer::Dense(vec![0.0; 4]));
                interpret(prog, &mut env).unwrap();
                (env.dense("y").unwrap().to_vec(), env.dense("z").unwrap().to_vec())
            };
            let (want_y, want_z) = run(&p);
            let (got_y, got_z) = run(&out.program);
            for (g, w) in got_y.iter().chain(&got_z).zip(want_y.iter().chain(&want_z)) {
                prop_assert!((g - w).abs() <= 1e-5 * w.abs().max(1.0), "{} vs {}", g, w);
            }
        }
    }
}
