//! Composable matchers over IR nodes.
//!
//! A [`Matcher`] is a predicate that also extracts a value. Matchers compose
//! by disjunction ([`one_of`], [`Matcher::or`]), transformation
//! ([`Matcher::map`]) and by nesting, e.g. "a load whose access matches P".
//! Scalar operands are resolved through [`Defs`], the map from each scalar
//! name to the statement defining it, which plays the role of use-def chains.

use std::collections::HashMap;
use std::rc::Rc;

use crate::loopir::{Access, AccumTerm, AffineExpr, ArithOp, Coef, Index, Operand, Stmt};

type MatchFn<'a, I, O> = Rc<dyn Fn(&I) -> Option<O> + 'a>;

/// A predicate over `I` that yields an `O` on success.
pub struct Matcher<'a, I: ?Sized, O> {
    f: MatchFn<'a, I, O>,
}

impl<I: ?Sized, O> Clone for Matcher<'_, I, O> {
    fn clone(&self) -> Self {
        Matcher { f: self.f.clone() }
    }
}

impl<'a, I: ?Sized + 'a, O: 'a> Matcher<'a, I, O> {
    pub fn new(f: impl Fn(&I) -> Option<O> + 'a) -> Self {
        Matcher { f: Rc::new(f) }
    }

    pub fn matches(&self, input: &I) -> Option<O> {
        (self.f)(input)
    }

    /// Tries `self`, then `other`.
    pub fn or(self, other: Self) -> Self {
        Matcher::new(move |i| self.matches(i).or_else(|| other.matches(i)))
    }

    pub fn map<P: 'a>(self, f: impl Fn(O) -> P + 'a) -> Matcher<'a, I, P> {
        Matcher::new(move |i| self.matches(i).map(&f))
    }

    pub fn filter(self, pred: impl Fn(&O) -> bool + 'a) -> Self {
        Matcher::new(move |i| self.matches(i).filter(&pred))
    }
}

/// Disjunction over variants: the first alternative that matches wins.
pub fn one_of<'a, I: ?Sized + 'a, O: 'a>(
    alternatives: Vec<Matcher<'a, I, O>>,
) -> Matcher<'a, I, O> {
    Matcher::new(move |i| alternatives.iter().find_map(|m| m.matches(i)))
}

/// Defining statement of every scalar in a region.
#[derive(Debug, Default)]
pub struct Defs<'a> {
    map: HashMap<&'a str, &'a Stmt>,
}

impl<'a> Defs<'a> {
    /// Collects definitions from `body`, descending into loops.
    pub fn collect(body: &'a [Stmt]) -> Self {
        let mut defs = Defs::default();
        crate::loopir::walk(body, &mut |s| {
            let name = match s {
                Stmt::Load { dest, .. } | Stmt::BinOp { dest, .. } => Some(dest),
                Stmt::AccumInit { name, .. } => Some(name),
                _ => None,
            };
            if let Some(n) = name {
                defs.map.insert(n.as_str(), s);
            }
        });
        defs
    }

    pub fn get(&self, name: &str) -> Option<&'a Stmt> {
        self.map.get(name).copied()
    }

    fn of(&self, op: &Operand) -> Option<&'a Stmt> {
        op.as_var().and_then(|v| self.get(v))
    }
}

/// How a two-dimensional access is spelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum AccessVariant {
    /// `A[r][c]`
    NestedIndirection,
    /// `A[r*ld + c]`
    PhiTimesLd,
    /// `A[r, c]`
    TwoIndex,
    /// Any other `A[a*r + b*c + d]`.
    AffineFunction,
}

/// Result of [`match_array_access`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessMatch {
    pub variant: AccessVariant,
    /// The variables were found in the order `(iv2, iv1)`.
    pub swapped: bool,
    /// Coefficients of the row and column variable (in matched order) for
    /// flat accesses; `None` for the two-index forms, whose row stride is the
    /// declared column count.
    pub row_coef: Option<Coef>,
    pub col_coef: Option<Coef>,
    pub offset: i64,
}

fn is_plain_var(e: &AffineExpr, iv: &str) -> bool {
    e.offset == 0 && e.terms.len() == 1 && e.terms[0].var == iv && e.terms[0].coef == Coef::Const(1)
}

fn names_iv(c: &Coef, ivs: &[&str]) -> bool {
    matches!(c, Coef::Param(p) if ivs.contains(&p.as_str()))
}

/// `OneOf` over the four spellings of a two-dimensional access in `(iv1, iv2)`.
#[allow(clippy::type_complexity)]
fn access_forms<'a>(
    iv1: &'a str,
    iv2: &'a str,
) -> (
    Matcher<'a, Index, AccessMatch>,
    Matcher<'a, Index, AccessMatch>,
) {
    let nested = Matcher::new(move |ix: &Index| match ix {
        Index::Nested(r, c) if is_plain_var(r, iv1) && is_plain_var(c, iv2) => Some(AccessMatch {
            variant: AccessVariant::NestedIndirection,
            swapped: false,
            row_coef: None,
            col_coef: None,
            offset: 0,
        }),
        _ => None,
    });
    let two_index = Matcher::new(move |ix: &Index| match ix {
        Index::Pair(r, c) if is_plain_var(r, iv1) && is_plain_var(c, iv2) => Some(AccessMatch {
            variant: AccessVariant::TwoIndex,
            swapped: false,
            row_coef: None,
            col_coef: None,
            offset: 0,
        }),
        _ => None,
    });
    let affine = Matcher::new(move |ix: &Index| {
        let Index::Flat(e) = ix else { return None };
        if e.terms.len() != 2 {
            return None;
        }
        let row = e.coef_of(iv1)?.clone();
        let col = e.coef_of(iv2)?.clone();
        if names_iv(&row, &[iv1, iv2]) || names_iv(&col, &[iv1, iv2]) {
            return None;
        }
        Some(AccessMatch {
            variant: AccessVariant::AffineFunction,
            swapped: false,
            row_coef: Some(row),
            col_coef: Some(col),
            offset: e.offset,
        })
    });
    // `iv1*ld + iv2` is the affine form with a unit column step and no offset.
    let phi_times_ld = affine
        .clone()
        .filter(|m| m.offset == 0 && m.col_coef == Some(Coef::Const(1)))
        .map(|m| AccessMatch {
            variant: AccessVariant::PhiTimesLd,
            ..m
        });
    let specific = one_of(vec![nested, phi_times_ld, two_index]);
    (specific, affine)
}

/// The specific access forms over `(iv1, iv2)`, then the general affine one.
pub fn array_access<'a>(iv1: &'a str, iv2: &'a str) -> Matcher<'a, Index, AccessMatch> {
    let (specific, affine) = access_forms(iv1, iv2);
    specific.or(affine)
}

/// Matches a two-dimensional access over `(iv1, iv2)`. The specific forms
/// are also tried in the swapped order `(iv2, iv1)` before falling back to
/// the general affine form.
pub fn match_array_access(index: &Index, iv1: &str, iv2: &str) -> Option<AccessMatch> {
    let (specific, affine) = access_forms(iv1, iv2);
    let (swapped, _) = access_forms(iv2, iv1);
    let swapped = swapped.map(|m| AccessMatch { swapped: true, ..m });
    one_of(vec![specific, swapped, affine]).matches(index)
}

/// A one-dimensional access `v[stride*iv + offset]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VectorAccess {
    pub stride: Coef,
    pub offset: i64,
}

impl VectorAccess {
    pub fn is_unit(&self) -> bool {
        self.stride == Coef::Const(1) && self.offset == 0
    }
}

pub fn vector_access<'a>(iv: &'a str) -> Matcher<'a, Index, VectorAccess> {
    Matcher::new(move |ix: &Index| match ix {
        Index::Flat(e)
            if e.terms.len() == 1 && e.terms[0].var == iv && !names_iv(&e.terms[0].coef, &[iv]) =>
        {
            Some(VectorAccess {
                stride: e.terms[0].coef.clone(),
                offset: e.offset,
            })
        }
        _ => None,
    })
}

/// A scalar defined by a load whose index matches `index`; yields the access and the match.
pub fn load_of<'a, O: 'a>(
    defs: &'a Defs<'a>,
    index: Matcher<'a, Index, O>,
) -> Matcher<'a, Operand, (&'a Access, O)> {
    Matcher::new(move |op: &Operand| match defs.of(op)? {
        Stmt::Load { access, .. } => index.matches(&access.index).map(|m| (access, m)),
        _ => None,
    })
}

pub fn constant<'a>() -> Matcher<'a, Operand, f32> {
    Matcher::new(|op: &Operand| match op {
        Operand::Const(c) => Some(*c),
        Operand::Var(_) => None,
    })
}

/// The named scalar itself.
pub fn var<'a>(name: &'a str) -> Matcher<'a, Operand, ()> {
    Matcher::new(move |op: &Operand| (op.as_var() == Some(name)).then_some(()))
}

/// `mul l, r` in either operand order.
pub fn c_mul<'a, A: 'a, B: 'a>(
    defs: &'a Defs<'a>,
    l: Matcher<'a, Operand, A>,
    r: Matcher<'a, Operand, B>,
) -> Matcher<'a, Operand, (A, B)> {
    Matcher::new(move |op: &Operand| match defs.of(op)? {
        Stmt::BinOp {
            op: ArithOp::Mul(a, b),
            ..
        } => l
            .matches(a)
            .zip(r.matches(b))
            .or_else(|| l.matches(b).zip(r.matches(a))),
        _ => None,
    })
}

/// `add l, r` in either operand order.
pub fn c_add<'a, A: 'a, B: 'a>(
    defs: &'a Defs<'a>,
    l: Matcher<'a, Operand, A>,
    r: Matcher<'a, Operand, B>,
) -> Matcher<'a, Operand, (A, B)> {
    Matcher::new(move |op: &Operand| match defs.of(op)? {
        Stmt::BinOp {
            op: ArithOp::Add(a, b),
            ..
        } => l
            .matches(a)
            .zip(r.matches(b))
            .or_else(|| l.matches(b).zip(r.matches(a))),
        _ => None,
    })
}

/// `c * v`, `v * c` or plain `v`; yields the scale (1 when absent).
pub fn scaled_or_v<'a, A: 'a>(
    defs: &'a Defs<'a>,
    v: Matcher<'a, Operand, A>,
) -> Matcher<'a, Operand, (f32, A)> {
    let scaled = c_mul(defs, constant(), v.clone());
    one_of(vec![v.map(|a| (1.0, a)), scaled])
}

/// The multiply-add at the heart of a GEMV reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionMatch {
    pub accumulator: String,
    pub matrix: Access,
    pub matrix_match: AccessMatch,
    pub vector: Access,
    pub vector_match: VectorAccess,
    pub alpha: f32,
}

/// Matches `acc += A[..i..k..] * x[..k..]` in `body`, including the forms
/// that build the product (and an optional constant scale) in temporaries.
/// Exactly one accumulator update must be present.
pub fn match_gemv_reduction(
    body: &[Stmt],
    defs: &Defs<'_>,
    iv_i: &str,
    iv_k: &str,
) -> Option<ReductionMatch> {
    let mut updates = body.iter().filter_map(|s| match s {
        Stmt::AccumUpdate { name, term } => Some((name, term)),
        _ => None,
    });
    let (acc, term) = updates.next()?;
    if updates.next().is_some() {
        return None;
    }
    let a_load = load_of(
        defs,
        Matcher::new(|ix: &Index| match_array_access(ix, iv_i, iv_k)),
    );
    let x_load = load_of(defs, vector_access(iv_k));
    let product = |l: &Operand, r: &Operand| {
        a_load
            .matches(l)
            .zip(x_load.matches(r))
            .or_else(|| a_load.matches(r).zip(x_load.matches(l)))
    };
    let (alpha, ((a, am), (x, xm))) = match term {
        AccumTerm::Product(l, r) => (1.0, product(l, r)?),
        AccumTerm::Value(v) => {
            let mul = Matcher::new(move |op: &Operand| match defs.of(op)? {
                Stmt::BinOp {
                    op: ArithOp::Mul(l, r),
                    ..
                } => product(l, r),
                _ => None,
            });
            scaled_or_v(defs, mul).matches(v)?
        }
    };
    Some(ReductionMatch {
        accumulator: acc.clone(),
        matrix: a.clone(),
        matrix_match: am,
        vector: x.clone(),
        vector_match: xm,
        alpha,
    })
}

/// Which of the accepted output forms a store uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum StoreForm {
    /// `y[i] = alpha * sum`
    Scaled,
    /// `y[i] = fma(y[i], beta, alpha * sum)`
    BetaCombined,
    /// `y[i] = beta * y[i] + alpha * sum`
    BetaPlusAlpha,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreMatch {
    pub output: Access,
    pub output_match: VectorAccess,
    pub alpha: f32,
    pub beta: f32,
    pub form: StoreForm,
}

/// Matches the store of a reduction result into `y[..i..]`. Absent scales
/// default to `alpha = 1`, `beta = 0`; any read of `y` must use the same
/// element that is stored.
pub fn match_store_of_vector(
    store: &Stmt,
    accumulator: &str,
    defs: &Defs<'_>,
    iv_i: &str,
) -> Option<StoreMatch> {
    let Stmt::Store { access, value } = store else {
        return None;
    };
    let output_match = vector_access(iv_i).matches(&access.index)?;
    let sum = scaled_or_v(defs, var(accumulator)).map(|(alpha, ())| alpha);
    let y_read = load_of(
        defs,
        Matcher::new(|ix: &Index| (*ix == access.index).then_some(())),
    )
    .filter(|(a, ())| a.buffer == access.buffer)
    .map(|_| ());

    let scaled = sum.clone().map(|alpha| (StoreForm::Scaled, alpha, 0.0));
    let fused = Matcher::new(|op: &Operand| match defs.of(op)? {
        Stmt::BinOp {
            op: ArithOp::Fma(a, b, c),
            ..
        } => {
            let beta = y_read
                .matches(a)
                .and(constant().matches(b))
                .or_else(|| y_read.matches(b).and(constant().matches(a)))?;
            Some((StoreForm::BetaCombined, sum.matches(c)?, beta))
        }
        _ => None,
    });
    let combined = c_add(defs, scaled_or_v(defs, y_read.clone()), sum.clone())
        .map(|((beta, ()), alpha)| (StoreForm::BetaPlusAlpha, alpha, beta));

    let (form, alpha, beta) = one_of(vec![scaled, fused, combined]).matches(value)?;
    Some(StoreMatch {
        output: access.clone(),
        output_match,
        alpha,
        beta,
        form,
    })
}
