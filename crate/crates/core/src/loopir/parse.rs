use std::collections::HashSet;

use thiserror::Error;

use super::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{column}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("use of undeclared buffer `{0}`")]
    UndeclaredBuffer(String),
    #[error("unknown index variable `{0}`")]
    UnknownName(String),
    #[error("index expression is not affine: {0}")]
    NonAffine(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Float(f32),
    Punct(&'static str),
    Eof,
}

impl std::fmt::Display for Tok {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Int(v) => write!(f, "`{v}`"),
            Tok::Float(v) => write!(f, "`{v:?}`"),
            Tok::Punct(p) => write!(f, "`{p}`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

const PUNCT: [&str; 12] = ["..", "+=", "{", "}", "[", "]", "(", ")", ",", "=", "+", "-"];

fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let column = i + 1;
            let at = |tok| Spanned {
                tok,
                line: ln + 1,
                column,
            };
            if c.is_whitespace() {
                i += 1;
            } else if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(at(Tok::Ident(chars[start..i].iter().collect())));
            } else if c.is_ascii_digit() {
                let start = i;
                let mut float = false;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                    float = true;
                    i += 1;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].is_ascii_digit() {
                        float = true;
                        i = j;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let s: String = chars[start..i].iter().collect();
                let tok = if float {
                    s.parse().map(Tok::Float).ok()
                } else {
                    s.parse().map(Tok::Int).ok()
                };
                let tok = tok.ok_or_else(|| ParseError {
                    line: ln + 1,
                    column,
                    kind: ParseErrorKind::Syntax(format!("bad number `{s}`")),
                })?;
                out.push(at(tok));
            } else if c == '*' {
                out.push(at(Tok::Punct("*")));
                i += 1;
            } else {
                let rest: String = chars[i..chars.len().min(i + 2)].iter().collect();
                let p = PUNCT
                    .iter()
                    .find(|p| rest.starts_with(**p))
                    .ok_or_else(|| ParseError {
                        line: ln + 1,
                        column,
                        kind: ParseErrorKind::Syntax(format!("unexpected character `{c}`")),
                    })?;
                out.push(at(Tok::Punct(p)));
                i += p.len();
            }
        }
    }
    let (line, column) = out.last().map_or((1, 1), |s| (s.line, s.column + 1));
    out.push(Spanned {
        tok: Tok::Eof,
        line,
        column,
    });
    Ok(out)
}

/// Parses the text form documented in the [module docs](super).
pub fn parse(text: &str) -> Result<Program, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        params: HashSet::new(),
        buffers: HashSet::new(),
        ivs: Vec::new(),
    };
    p.program()
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    params: HashSet<String>,
    buffers: HashSet<String>,
    ivs: Vec<String>,
}

/// One product in a sum: integer factor times symbols.
struct Product {
    scale: i64,
    symbols: Vec<String>,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, ahead: usize) -> &Tok {
        &self.toks[(self.pos + ahead).min(self.toks.len() - 1)].tok
    }

    fn error_here(&self, kind: ParseErrorKind) -> ParseError {
        let t = &self.toks[self.pos];
        ParseError {
            line: t.line,
            column: t.column,
            kind,
        }
    }

    fn error_at(&self, pos: usize, kind: ParseErrorKind) -> ParseError {
        let t = &self.toks[pos];
        ParseError {
            line: t.line,
            column: t.column,
            kind,
        }
    }

    fn unexpected(&self, wanted: &str) -> ParseError {
        self.error_here(ParseErrorKind::Syntax(format!(
            "expected {wanted}, found {}",
            self.peek()
        )))
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, p: &str) -> bool {
        if matches!(self.peek(), Tok::Punct(q) if *q == p) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, p: &str) -> Result<(), ParseError> {
        if self.eat(p) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{p}`")))
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.is_keyword(kw) {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{kw}`")))
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek() {
            Tok::Ident(s) => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            _ => Err(self.unexpected("identifier")),
        }
    }

    fn int(&mut self) -> Result<i64, ParseError> {
        let negative = self.eat("-");
        match self.peek() {
            Tok::Int(v) => {
                let v = *v;
                self.bump();
                Ok(if negative { -v } else { v })
            }
            _ => Err(self.unexpected("integer")),
        }
    }

    fn extent(&mut self) -> Result<usize, ParseError> {
        let at = self.pos;
        let v = self.int()?;
        usize::try_from(v).ok().filter(|&v| v > 0).ok_or_else(|| {
            self.error_at(
                at,
                ParseErrorKind::Syntax(format!("extent must be positive, got {v}")),
            )
        })
    }

    fn program(&mut self) -> Result<Program, ParseError> {
        let mut prog = Program::default();
        loop {
            match self.peek() {
                Tok::Eof => return Ok(prog),
                Tok::Ident(kw) if kw == "param" => {
                    self.bump();
                    let name = self.ident()?;
                    let value = if self.eat("=") {
                        Some(self.int()?)
                    } else {
                        None
                    };
                    self.params.insert(name.clone());
                    prog.params.push(ParamDecl { name, value });
                }
                Tok::Ident(kw) if kw == "buffer" => {
                    self.bump();
                    let name = self.ident()?;
                    self.expect("[")?;
                    let first = self.extent()?;
                    let shape = if self.eat(",") {
                        Shape::Matrix(first, self.extent()?)
                    } else {
                        Shape::Vector(first)
                    };
                    self.expect("]")?;
                    let quantized = self.is_keyword("quantized");
                    if quantized {
                        self.bump();
                    }
                    self.buffers.insert(name.clone());
                    prog.buffers.push(BufferDecl {
                        name,
                        shape,
                        quantized,
                    });
                }
                Tok::Ident(kw) if kw == "func" => {
                    self.bump();
                    let name = self.ident()?;
                    let body = self.block()?;
                    prog.functions.push(Function { name, body });
                }
                _ => return Err(self.unexpected("`param`, `buffer` or `func`")),
            }
        }
    }

    fn block(&mut self) -> Result<Vec<Stmt>, ParseError> {
        self.expect("{")?;
        let mut body = Vec::new();
        while !self.eat("}") {
            body.push(self.stmt()?);
        }
        Ok(body)
    }

    fn stmt(&mut self) -> Result<Stmt, ParseError> {
        let kw = match self.peek() {
            Tok::Ident(s) => s.clone(),
            _ => return Err(self.unexpected("statement")),
        };
        match kw.as_str() {
            "for" => {
                self.bump();
                let iv = self.ident()?;
                self.keyword("in")?;
                let lower = self.affine()?;
                self.expect("..")?;
                let upper = self.affine()?;
                self.ivs.push(iv.clone());
                let body = self.block();
                self.ivs.pop();
                Ok(Stmt::Loop(Loop {
                    iv,
                    lower,
                    upper,
                    body: body?,
                }))
            }
            "let" => {
                self.bump();
                let dest = self.ident()?;
                self.expect("=")?;
                let op = self.ident()?;
                match op.as_str() {
                    "load" => Ok(Stmt::Load {
                        dest,
                        access: self.access()?,
                    }),
                    "mul" | "add" => {
                        let a = self.operand()?;
                        self.expect(",")?;
                        let b = self.operand()?;
                        let op = if op == "mul" {
                            ArithOp::Mul(a, b)
                        } else {
                            ArithOp::Add(a, b)
                        };
                        Ok(Stmt::BinOp { dest, op })
                    }
                    "fma" => {
                        let a = self.operand()?;
                        self.expect(",")?;
                        let b = self.operand()?;
                        self.expect(",")?;
                        let c = self.operand()?;
                        Ok(Stmt::BinOp {
                            dest,
                            op: ArithOp::Fma(a, b, c),
                        })
                    }
                    _ => Err(self.error_at(
                        self.pos - 1,
                        ParseErrorKind::Syntax(format!("unknown operation `{op}`")),
                    )),
                }
            }
            "acc" => {
                self.bump();
                let name = self.ident()?;
                self.expect("=")?;
                let value = self.float()?;
                Ok(Stmt::AccumInit { name, value })
            }
            "store" => {
                self.bump();
                let access = self.access()?;
                self.expect("=")?;
                let value = self.operand()?;
                Ok(Stmt::Store { access, value })
            }
            "call" => {
                self.bump();
                let name = self.ident()?;
                self.expect("(")?;
                let mut args = Vec::new();
                if !self.eat(")") {
                    loop {
                        args.push(self.arg()?);
                        if self.eat(")") {
                            break;
                        }
                        self.expect(",")?;
                    }
                }
                Ok(Stmt::Call(Call { name, args }))
            }
            _ if matches!(self.peek_at(1), Tok::Punct("+=")) => {
                let name = self.ident()?;
                self.bump();
                let a = self.operand()?;
                let term = if self.eat("*") {
                    AccumTerm::Product(a, self.operand()?)
                } else {
                    AccumTerm::Value(a)
                };
                Ok(Stmt::AccumUpdate { name, term })
            }
            _ => Err(self.unexpected("statement")),
        }
    }

    fn float(&mut self) -> Result<f32, ParseError> {
        let negative = self.eat("-");
        let v = match self.peek() {
            Tok::Float(v) => *v,
            Tok::Int(v) => *v as f32,
            _ => return Err(self.unexpected("number")),
        };
        self.bump();
        Ok(if negative { -v } else { v })
    }

    fn operand(&mut self) -> Result<Operand, ParseError> {
        match self.peek() {
            Tok::Ident(_) => Ok(Operand::Var(self.ident()?)),
            _ => Ok(Operand::Const(self.float()?)),
        }
    }

    fn arg(&mut self) -> Result<Arg, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(match s.as_str() {
                    "RowMajor" => Arg::Layout(Layout::RowMajor),
                    "ColMajor" => Arg::Layout(Layout::ColMajor),
                    "NoTrans" => Arg::Transpose(Transpose::NoTrans),
                    "Trans" => Arg::Transpose(Transpose::Trans),
                    _ => Arg::Name(s),
                })
            }
            Tok::Int(_) => Ok(Arg::Int(self.int()?)),
            Tok::Float(_) => Ok(Arg::Float(self.float()?)),
            Tok::Punct("-") => match self.peek_at(1) {
                Tok::Int(_) => Ok(Arg::Int(self.int()?)),
                _ => Ok(Arg::Float(self.float()?)),
            },
            _ => Err(self.unexpected("argument")),
        }
    }

    fn access(&mut self) -> Result<Access, ParseError> {
        let at = self.pos;
        let buffer = self.ident()?;
        if !self.buffers.contains(&buffer) {
            return Err(self.error_at(at, ParseErrorKind::UndeclaredBuffer(buffer)));
        }
        self.expect("[")?;
        let first = self.affine()?;
        let index = if self.eat(",") {
            let second = self.affine()?;
            self.expect("]")?;
            Index::Pair(first, second)
        } else {
            self.expect("]")?;
            if self.eat("[") {
                let second = self.affine()?;
                self.expect("]")?;
                Index::Nested(first, second)
            } else {
                Index::Flat(first)
            }
        };
        Ok(Access { buffer, index })
    }

    fn affine(&mut self) -> Result<AffineExpr, ParseError> {
        let mut expr = AffineExpr::default();
        let mut negative = self.eat("-");
        loop {
            let at = self.pos;
            let prod = self.product()?;
            self.add_product(&mut expr, prod, negative, at)?;
            if self.eat("+") {
                negative = false;
            } else if self.eat("-") {
                negative = true;
            } else {
                return Ok(expr);
            }
        }
    }

    fn product(&mut self) -> Result<Product, ParseError> {
        let mut prod = Product {
            scale: 1,
            symbols: Vec::new(),
        };
        loop {
            match self.peek().clone() {
                Tok::Int(v) => {
                    self.bump();
                    prod.scale = prod.scale.checked_mul(v).ok_or_else(|| {
                        self.error_at(
                            self.pos - 1,
                            ParseErrorKind::Syntax("integer overflow".into()),
                        )
                    })?;
                }
                Tok::Ident(s) => {
                    if !self.params.contains(&s) && !self.ivs.contains(&s) {
                        return Err(self.error_here(ParseErrorKind::UnknownName(s)));
                    }
                    self.bump();
                    prod.symbols.push(s);
                }
                _ => return Err(self.unexpected("index term")),
            }
            if !self.eat("*") {
                return Ok(prod);
            }
        }
    }

    fn add_product(
        &self,
        expr: &mut AffineExpr,
        prod: Product,
        negative: bool,
        at: usize,
    ) -> Result<(), ParseError> {
        let non_affine = |msg: String| self.error_at(at, ParseErrorKind::NonAffine(msg));
        let scale = if negative { -prod.scale } else { prod.scale };
        let (var, coef) = match prod.symbols.as_slice() {
            [] => {
                expr.offset += scale;
                return Ok(());
            }
            [v] => (v.clone(), Coef::Const(scale)),
            [a, b] => {
                let (a_iv, b_iv) = (self.ivs.contains(a), self.ivs.contains(b));
                if a_iv && b_iv {
                    return Err(non_affine(format!(
                        "product of induction variables `{a}*{b}`"
                    )));
                }
                if scale != 1 {
                    return Err(non_affine(format!(
                        "scaled symbolic coefficient in `{a}*{b}`"
                    )));
                }
                // The induction variable (if any) is the variable, the other the coefficient.
                if b_iv {
                    (b.clone(), Coef::Param(a.clone()))
                } else {
                    (a.clone(), Coef::Param(b.clone()))
                }
            }
            _ => {
                return Err(non_affine(format!(
                    "product of {} symbols",
                    prod.symbols.len()
                )))
            }
        };
        if let Some(t) = expr.terms.iter_mut().find(|t| t.var == var) {
            match (&mut t.coef, coef) {
                (Coef::Const(c), Coef::Const(d)) => *c += d,
                _ => {
                    return Err(non_affine(format!(
                        "`{var}` appears with a symbolic coefficient more than once"
                    )))
                }
            }
        } else {
            expr.terms.push(Term { var, coef });
        }
        expr.terms.retain(|t| t.coef != Coef::Const(0));
        Ok(())
    }
}
