use std::collections::HashSet;
use std::fmt;

use super::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiagnosticKind {
    DuplicateDeclaration,
    UndeclaredBuffer,
    UndeclaredName,
    /// A scalar or induction variable defined twice.
    Redefinition,
    NotAnAccumulator,
    /// An accumulator update that is not inside a loop nested below its init.
    AccumulatorOutsideLoop,
    /// An index variable appearing in more than one term.
    RepeatedVariable,
    /// A symbolic coefficient that does not name a parameter.
    InvalidCoefficient,
    /// Two-index access on a vector buffer.
    IndexRank,
    UnknownIntrinsic,
    ArgumentMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub function: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "in `{}`: {}", self.function, self.message)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum ScalarKind {
    Value,
    Accum { depth: usize },
}

struct Checker<'p> {
    prog: &'p Program,
    function: String,
    diags: Vec<Diagnostic>,
    /// Every scalar and induction variable name defined so far in the function.
    defined: HashSet<String>,
    scalars: Vec<(String, ScalarKind)>,
    ivs: Vec<String>,
}

/// Checks declarations, scoping, single assignment, accumulator placement,
/// index well-formedness and intrinsic signatures. Returns an empty list iff
/// the program is well formed.
pub fn validate(prog: &Program) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut names = HashSet::new();
    let decl_names = prog
        .params
        .iter()
        .map(|p| &p.name)
        .chain(prog.buffers.iter().map(|b| &b.name));
    for name in decl_names {
        if !names.insert(name.as_str()) {
            diags.push(Diagnostic {
                kind: DiagnosticKind::DuplicateDeclaration,
                function: String::new(),
                message: format!("`{name}` declared more than once"),
            });
        }
    }
    let mut funcs = HashSet::new();
    for f in &prog.functions {
        if !funcs.insert(f.name.as_str()) {
            diags.push(Diagnostic {
                kind: DiagnosticKind::DuplicateDeclaration,
                function: f.name.clone(),
                message: format!("function `{}` defined more than once", f.name),
            });
        }
        let mut c = Checker {
            prog,
            function: f.name.clone(),
            diags: Vec::new(),
            defined: HashSet::new(),
            scalars: Vec::new(),
            ivs: Vec::new(),
        };
        c.block(&f.body);
        diags.append(&mut c.diags);
    }
    diags
}

impl Checker<'_> {
    fn report(&mut self, kind: DiagnosticKind, message: String) {
        self.diags.push(Diagnostic {
            kind,
            function: self.function.clone(),
            message,
        });
    }

    fn block(&mut self, body: &[Stmt]) {
        let scalars = self.scalars.len();
        for s in body {
            self.stmt(s);
        }
        self.scalars.truncate(scalars);
    }

    fn define(&mut self, name: &str) {
        if self.prog.param(name).is_some()
            || self.prog.buffer(name).is_some()
            || !self.defined.insert(name.to_string())
        {
            self.report(
                DiagnosticKind::Redefinition,
                format!("`{name}` is already defined"),
            );
        }
    }

    fn scalar(&self, name: &str) -> Option<ScalarKind> {
        self.scalars
            .iter()
            .rev()
            .find(|(n, _)| n == name)
            .map(|(_, k)| *k)
    }

    fn operand(&mut self, op: &Operand) {
        if let Operand::Var(v) = op {
            if self.scalar(v).is_none() {
                self.report(
                    DiagnosticKind::UndeclaredName,
                    format!("scalar `{v}` is not in scope"),
                );
            }
        }
    }

    fn is_int_symbol(&self, name: &str) -> bool {
        self.prog.param(name).is_some() || self.ivs.iter().any(|iv| iv == name)
    }

    fn affine(&mut self, e: &AffineExpr) {
        let mut seen = HashSet::new();
        for t in &e.terms {
            if !self.is_int_symbol(&t.var) {
                self.report(
                    DiagnosticKind::UndeclaredName,
                    format!("index variable `{}` is not in scope", t.var),
                );
            }
            if !seen.insert(t.var.as_str()) {
                self.report(
                    DiagnosticKind::RepeatedVariable,
                    format!("`{}` appears in more than one term", t.var),
                );
            }
            if let Coef::Param(p) = &t.coef {
                if self.prog.param(p).is_none() {
                    self.report(
                        DiagnosticKind::InvalidCoefficient,
                        format!("coefficient `{p}` is not a parameter"),
                    );
                }
            }
        }
    }

    fn access(&mut self, a: &Access) {
        let Some(decl) = self.prog.buffer(&a.buffer) else {
            self.report(
                DiagnosticKind::UndeclaredBuffer,
                format!("buffer `{}` is not declared", a.buffer),
            );
            return;
        };
        match &a.index {
            Index::Flat(e) => self.affine(e),
            Index::Pair(r, c) | Index::Nested(r, c) => {
                if !matches!(decl.shape, Shape::Matrix(..)) {
                    self.report(
                        DiagnosticKind::IndexRank,
                        format!("two-index access to vector buffer `{}`", a.buffer),
                    );
                }
                self.affine(r);
                self.affine(c);
            }
        }
    }

    fn stmt(&mut self, s: &Stmt) {
        match s {
            Stmt::Loop(l) => {
                self.affine(&l.lower);
                self.affine(&l.upper);
                self.define(&l.iv);
                self.ivs.push(l.iv.clone());
                self.block(&l.body);
                self.ivs.pop();
            }
            Stmt::Load { dest, access } => {
                self.access(access);
                self.define(dest);
                self.scalars.push((dest.clone(), ScalarKind::Value));
            }
            Stmt::Store { access, value } => {
                self.access(access);
                self.operand(value);
            }
            Stmt::BinOp { dest, op } => {
                for o in op.operands() {
                    self.operand(o);
                }
                self.define(dest);
                self.scalars.push((dest.clone(), ScalarKind::Value));
            }
            Stmt::AccumInit { name, .. } => {
                self.define(name);
                let depth = self.ivs.len();
                self.scalars
                    .push((name.clone(), ScalarKind::Accum { depth }));
            }
            Stmt::AccumUpdate { name, term } => {
                match self.scalar(name) {
                    None => self.report(
                        DiagnosticKind::UndeclaredName,
                        format!("accumulator `{name}` is not in scope"),
                    ),
                    Some(ScalarKind::Value) => self.report(
                        DiagnosticKind::NotAnAccumulator,
                        format!("`{name}` is not an accumulator"),
                    ),
                    Some(ScalarKind::Accum { depth }) if depth >= self.ivs.len() => self.report(
                        DiagnosticKind::AccumulatorOutsideLoop,
                        format!("update of `{name}` is not inside a loop below its initialization"),
                    ),
                    Some(_) => {}
                }
                match term {
                    AccumTerm::Product(a, b) => {
                        self.operand(a);
                        self.operand(b);
                    }
                    AccumTerm::Value(v) => self.operand(v),
                }
            }
            Stmt::Call(call) => self.call(call),
        }
    }

    fn call(&mut self, call: &Call) {
        let Some(intrinsic) = Intrinsic::from_name(&call.name) else {
            self.report(
                DiagnosticKind::UnknownIntrinsic,
                format!("unknown intrinsic `{}`", call.name),
            );
            return;
        };
        let sig = intrinsic.signature();
        if sig.len() != call.args.len() {
            self.report(
                DiagnosticKind::ArgumentMismatch,
                format!(
                    "`{}` takes {} arguments, got {}",
                    call.name,
                    sig.len(),
                    call.args.len()
                ),
            );
            return;
        }
        for (pos, (kind, arg)) in sig.iter().zip(&call.args).enumerate() {
            let ok = match (kind, arg) {
                (ArgKind::Buffer, Arg::Name(n)) => self.prog.buffer(n).is_some(),
                (ArgKind::Int, Arg::Int(_)) => true,
                (ArgKind::Int, Arg::Name(n)) => self.is_int_symbol(n),
                (ArgKind::Float, Arg::Float(_) | Arg::Int(_)) => true,
                (ArgKind::Layout, Arg::Layout(_)) => true,
                (ArgKind::Transpose, Arg::Transpose(_)) => true,
                _ => false,
            };
            if !ok {
                self.report(
                    DiagnosticKind::ArgumentMismatch,
                    format!(
                        "argument {} of `{}` must be {kind:?}, got `{arg}`",
                        pos + 1,
                        call.name
                    ),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(text: &str) -> Vec<DiagnosticKind> {
        validate(&parse(text).unwrap())
            .into_iter()
            .map(|d| d.kind)
            .collect()
    }

    #[test]
    fn well_formed_program_has_no_diagnostics() {
        let text = "param n = 2\nbuffer A[2, 2]\nbuffer x[2]\nbuffer y[2]\nfunc main {\n for i in 0..n {\n  acc s = 0.0\n  for k in 0..n {\n   let a = load A[i, k]\n   let b = load x[k]\n   s += a * b\n  }\n  store y[i] = s\n }\n call softmax(y, n)\n}";
        assert_eq!(kinds(text), vec![]);
    }

    #[test]
    fn accumulator_rules() {
        assert_eq!(
            kinds("func main { acc s = 0.0\n s += 1.0 }"),
            vec![DiagnosticKind::AccumulatorOutsideLoop]
        );
        assert_eq!(
            kinds("func main { acc s = 0.0\n let t = add s, 1.0\n for i in 0..2 { t += s } }"),
            vec![DiagnosticKind::NotAnAccumulator]
        );
        assert_eq!(
            kinds("func main { for i in 0..2 { s += 1.0 } }"),
            vec![DiagnosticKind::UndeclaredName]
        );
    }

    #[test]
    fn single_assignment_and_scoping() {
        assert_eq!(
            kinds("func main { let t = add 1.0, 2.0\n let t = add 1.0, 2.0 }"),
            vec![DiagnosticKind::Redefinition]
        );
        assert_eq!(
            kinds("buffer y[1]\nfunc main { for i in 0..1 { let t = add 1.0, 2.0 }\n store y[0] = t }"),
            vec![DiagnosticKind::UndeclaredName]
        );
        assert_eq!(
            kinds("func main { for i in 0..1 { for i in 0..1 { } } }"),
            vec![DiagnosticKind::Redefinition]
        );
    }

    #[test]
    fn index_and_call_checks() {
        assert_eq!(
            kinds("buffer v[4]\nfunc main { for i in 0..2 { let a = load v[i][0] } }"),
            vec![DiagnosticKind::IndexRank]
        );
        assert_eq!(
            kinds("buffer v[4]\nfunc main { call frobnicate(v) \n call softmax(v) \n call softmax(4, v) }"),
            vec![
                DiagnosticKind::UnknownIntrinsic,
                DiagnosticKind::ArgumentMismatch,
                DiagnosticKind::ArgumentMismatch,
                DiagnosticKind::ArgumentMismatch,
            ]
        );
        assert_eq!(
            kinds("param n\nparam n\nfunc main {}"),
            vec![DiagnosticKind::DuplicateDeclaration]
        );
    }

    #[test]
    fn in_memory_programs_are_checked_too() {
        let prog = Program {
            params: vec![],
            buffers: vec![BufferDecl {
                name: "v".into(),
                shape: Shape::Vector(4),
                quantized: false,
            }],
            functions: vec![Function {
                name: "main".into(),
                body: vec![Stmt::Loop(Loop {
                    iv: "i".into(),
                    lower: AffineExpr::constant(0),
                    upper: AffineExpr::constant(2),
                    body: vec![Stmt::Load {
                        dest: "a".into(),
                        access: Access::flat(
                            "w",
                            AffineExpr::var("i")
                                .plus("i", Coef::Const(2))
                                .plus("j", Coef::Param("ld".into())),
                        ),
                    }],
                })],
            }],
        };
        let kinds: Vec<_> = validate(&prog).into_iter().map(|d| d.kind).collect();
        assert_eq!(kinds, vec![DiagnosticKind::UndeclaredBuffer]);
        let mut prog = prog;
        prog.buffers[0].name = "w".into();
        let kinds: Vec<_> = validate(&prog).into_iter().map(|d| d.kind).collect();
        assert_eq!(
            kinds,
            vec![
                DiagnosticKind::RepeatedVariable,
                DiagnosticKind::UndeclaredName,
                DiagnosticKind::InvalidCoefficient,
            ]
        );
    }
}
