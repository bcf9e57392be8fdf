//! Shared fixtures: the canonical fusion-opportunity patterns and the two
//! factorization / classification inner-loop expressions.

use fuseplan_core::hop::{HopDag, LeafMeta};
use fuseplan_core::parser::parse_script;
use std::collections::BTreeMap;

/// sum of a chain of element-wise multiplies: intermediates elimination.
pub const INTERMEDIATES: &str = "R = sum(X * Y * Z)\n";

/// t(X) %*% (X %*% v): single pass over X.
pub const SINGLE_PASS: &str = "R = t(X) %*% (X %*% v)\n";

/// two full aggregates sharing X: multi-aggregate.
pub const MULTI_AGG: &str = "a = sum(X * Y)\nb = sum(X * Z)\n";

/// sparsity exploitation across an outer-product chain.
pub const SPARSE_OUTER: &str = "R = sum(X * log(U %*% t(V) + 1e-15))\n";

/// low-rank factorization update rule (sparse driver + cell epilogue).
pub const FACTOR_UPDATE: &str = "O = ((X != 0) * (U %*% t(V))) %*% V + 1e-6 * U * r\n";

/// multinomial classification inner loop (row-chain with a CSE).
pub const LOGREG_INNER: &str = "\
Q = P[, 1:2] * (X %*% v)
H = t(X) %*% (Q - P[, 1:2] * rowSums(Q))
";

/// `LOGREG_INNER` generalized over the class count.
pub fn logreg_script(k: u64) -> String {
    format!(
        "Q = P[, 1:{k}] * (X %*% v)\nH = t(X) %*% (Q - P[, 1:{k}] * rowSums(Q))\n"
    )
}

/// template-switch pattern: a cell plan would destroy the outer template.
pub const TEMPLATE_SWITCH: &str = "R = Y + X * (U %*% t(V))\n";

pub fn meta(entries: &[(&str, u64, u64, f64)]) -> BTreeMap<String, LeafMeta> {
    entries
        .iter()
        .map(|(n, r, c, s)| {
            (
                n.to_string(),
                LeafMeta {
                    rows: *r,
                    cols: *c,
                    sparsity: *s,
                },
            )
        })
        .collect()
}

pub fn build(script: &str, m: &[(&str, u64, u64, f64)]) -> HopDag {
    let mut dag = parse_script(script).expect("fixture parses");
    dag.propagate_sizes(&meta(m)).expect("fixture propagates");
    dag
}

/// Leaf metadata for `LOGREG_INNER` at a given scale (X: n x m, k classes-1).
pub fn logreg_meta(n: u64, m: u64, k: u64) -> Vec<(&'static str, u64, u64, f64)> {
    vec![
        ("X", n, m, 1.0),
        ("P", n, k + 1, 1.0),
        ("v", m, k, 1.0),
    ]
}
