use std::fmt::{self, Display, Formatter, Write};

use super::*;

impl Display for Program {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            match p.value {
                Some(v) => writeln!(f, "param {} = {v}", p.name)?,
                None => writeln!(f, "param {}", p.name)?,
            }
        }
        for b in &self.buffers {
            match b.shape {
                Shape::Vector(n) => write!(f, "buffer {}[{n}]", b.name)?,
                Shape::Matrix(r, c) => write!(f, "buffer {}[{r}, {c}]", b.name)?,
            }
            writeln!(f, "{}", if b.quantized { " quantized" } else { "" })?;
        }
        for func in &self.functions {
            if !self.params.is_empty() || !self.buffers.is_empty() {
                writeln!(f)?;
            }
            writeln!(f, "func {} {{", func.name)?;
            write_block(f, &func.body, 1)?;
            writeln!(f, "}}")?;
        }
        Ok(())
    }
}

fn write_block(f: &mut Formatter<'_>, body: &[Stmt], depth: usize) -> fmt::Result {
    for s in body {
        write_stmt(f, s, depth)?;
    }
    Ok(())
}

fn write_stmt(f: &mut Formatter<'_>, s: &Stmt, depth: usize) -> fmt::Result {
    let pad = "  ".repeat(depth);
    match s {
        Stmt::Loop(l) => {
            writeln!(f, "{pad}for {} in {}..{} {{", l.iv, l.lower, l.upper)?;
            write_block(f, &l.body, depth + 1)?;
            writeln!(f, "{pad}}}")
        }
        Stmt::Load { dest, access } => writeln!(f, "{pad}let {dest} = load {access}"),
        Stmt::Store { access, value } => writeln!(f, "{pad}store {access} = {value}"),
        Stmt::BinOp { dest, op } => match op {
            ArithOp::Mul(a, b) => writeln!(f, "{pad}let {dest} = mul {a}, {b}"),
            ArithOp::Add(a, b) => writeln!(f, "{pad}let {dest} = add {a}, {b}"),
            ArithOp::Fma(a, b, c) => writeln!(f, "{pad}let {dest} = fma {a}, {b}, {c}"),
        },
        Stmt::AccumInit { name, value } => writeln!(f, "{pad}acc {name} = {value:?}"),
        Stmt::AccumUpdate { name, term } => match term {
            AccumTerm::Product(a, b) => writeln!(f, "{pad}{name} += {a} * {b}"),
            AccumTerm::Value(v) => writeln!(f, "{pad}{name} += {v}"),
        },
        Stmt::Call(c) => writeln!(f, "{pad}{c}"),
    }
}

impl Display for Call {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        write!(f, "call {}(", self.name)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}")?;
        }
        f.write_char(')')
    }
}

impl Display for Arg {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self {
            Arg::Name(n) => f.write_str(n),
            Arg::Int(v) => write!(f, "{v}"),
            Arg::Float(v) => write!(f, "{v:?}"),
            Arg::Layout(Layout::RowMajor) => f.write_str("RowMajor"),
            Arg::Layout(Layout::ColMajor) => f.write_str("ColMajor"),
            Arg::Transpose(Transpose::NoTrans) => f.write_str("NoTrans"),
            Arg::Transpose(Transpose::Trans) => f.write_str("Trans"),
        }
    }
}

impl Display for Operand {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Var(v) => f.write_str(v),
            // Debug keeps a '.' or exponent, so constants never read back as integers.
            Operand::Const(c) => write!(f, "{c:?}"),
        }
    }
}

impl Display for Access {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match &self.index {
            Index::Flat(e) => write!(f, "{}[{e}]", self.buffer),
            Index::Pair(r, c) => write!(f, "{}[{r}, {c}]", self.buffer),
            Index::Nested(r, c) => write!(f, "{}[{r}][{c}]", self.buffer),
        }
    }
}

impl Display for AffineExpr {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for t in &self.terms {
            let (negative, body) = match &t.coef {
                Coef::Const(1) => (false, t.var.clone()),
                Coef::Const(-1) => (true, t.var.clone()),
                Coef::Const(c) if *c < 0 => (true, format!("{}*{}", t.var, c.unsigned_abs())),
                Coef::Const(c) => (false, format!("{}*{c}", t.var)),
                Coef::Param(p) => (false, format!("{}*{p}", t.var)),
            };
            match (first, negative) {
                (true, true) => write!(f, "-{body}")?,
                (true, false) => f.write_str(&body)?,
                (false, true) => write!(f, " - {body}")?,
                (false, false) => write!(f, " + {body}")?,
            }
            first = false;
        }
        match (first, self.offset) {
            (true, o) => write!(f, "{o}"),
            (false, 0) => Ok(()),
            (false, o) if o < 0 => write!(f, " - {}", o.unsigned_abs()),
            (false, o) => write!(f, " + {o}"),
        }
    }
}
