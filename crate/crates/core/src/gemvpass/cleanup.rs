use std::collections::HashSet;

use crate::loopir::{walk, AccumTerm, Program, Stmt};

/// Removes scalar definitions nobody reads and loops left with empty bodies,
/// repeating until nothing changes. Stores and calls are always kept.
///
/// An accumulator that is only ever updated, never read, is dead together
/// with its updates. Dropping an unused load also drops the bounds check it
/// would have performed.
pub fn dead_loop_cleanup(p: &Program) -> Program {
    let mut out = p.clone();
    for f in &mut out.functions {
        cleanup_block(&mut f.body);
    }
    out
}

/// [`dead_loop_cleanup`] on one statement list.
pub(crate) fn cleanup_block(body: &mut Vec<Stmt>) {
    loop {
        let used = uses(body);
        if !prune(body, &used) {
            return;
        }
    }
}

fn uses(body: &[Stmt]) -> HashSet<String> {
    let mut used = HashSet::new();
    walk(body, &mut |s| {
        let ops: Vec<_> = match s {
            Stmt::Store { value, .. } => vec![value],
            Stmt::BinOp { op, .. } => op.operands(),
            // An update reads its accumulator only to write it back.
            Stmt::AccumUpdate {
                term: AccumTerm::Product(a, b),
                ..
            } => vec![a, b],
            Stmt::AccumUpdate {
                term: AccumTerm::Value(v),
                ..
            } => vec![v],
            _ => vec![],
        };
        used.extend(
            ops.into_iter()
                .filter_map(|o| o.as_var())
                .map(str::to_string),
        );
    });
    used
}

fn prune(body: &mut Vec<Stmt>, used: &HashSet<String>) -> bool {
    let before = body.len();
    let mut changed = false;
    for s in body.iter_mut() {
        if let Stmt::Loop(l) = s {
            changed |= prune(&mut l.body, used);
        }
    }
    body.retain(|s| match s {
        Stmt::Load { dest, .. } | Stmt::BinOp { dest, .. } => used.contains(dest),
        Stmt::AccumInit { name, .. } | Stmt::AccumUpdate { name, .. } => used.contains(name),
        Stmt::Loop(l) => !l.body.is_empty(),
        Stmt::Store { .. } | Stmt::Call(_) => true,
    });
    changed || body.len() != before
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loopir::parse;

    #[test]
    fn removes_dead_chains_and_empty_loops() {
        let p = parse(
            "buffer A[4]\nbuffer y[4]\nfunc main {\n for i in 0..4 {\n  acc s = 0.0\n  for k in 0..4 {\n   let a = load A[k]\n   s += a\n  }\n  let t = mul s, 2.0\n }\n for j in 0..4 {\n  let b = load A[j]\n  store y[j] = b\n }\n call softmax(y, 4)\n}",
        )
        .unwrap();
        let q = dead_loop_cleanup(&p);
        let expected = parse(
            "buffer A[4]\nbuffer y[4]\nfunc main {\n for j in 0..4 {\n  let b = load A[j]\n  store y[j] = b\n }\n call softmax(y, 4)\n}",
        )
        .unwrap();
        assert_eq!(q, expected);
        assert_eq!(dead_loop_cleanup(&q), q);
    }
}
