//! Parser and reference-interpreter checks. The expected values for the
//! classification inner loop come from a naive oracle written directly
//! against the math, independent of the runtime's operator implementations.

mod common;

use common::*;
use fuseplan_core::error::Error;
use fuseplan_core::hop::{BinaryOp, Op};
use fuseplan_core::matrix::Matrix;
use fuseplan_core::parser::{parse_script, unparse};
use fuseplan_core::reference::reference_eval;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

// ---- independent naive matrix routines (the oracle's oracle) ----

fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    #[allow(clippy::needless_range_loop)]
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i][p] * b[p][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

fn naive_transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, n) = (a.len(), a[0].len());
    (0..n).map(|j| (0..m).map(|i| a[i][j]).collect()).collect()
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|r| (0..m.cols()).map(|c| m.get(r, c)).collect())
        .collect()
}

#[test]
fn parse_examples() {
    // sum of an element-wise multiply chain: 2 mults, 1 aggregate, 3 leaves
    let dag = parse_script("R = sum(X*Y*Z)\n").unwrap();
    let mults = dag
        .nodes()
        .iter()
        .filter(|h| matches!(h.op, Op::Binary(BinaryOp::Mult)))
        .count();
    assert_eq!(mults, 2);
    assert_eq!(dag.leaves().len(), 3);

    // t(X) %*% (X %*% v): two multiplies and a transpose over shared X
    let dag = parse_script("R = t(X)%*%(X%*%v)\n").unwrap();
    assert_eq!(
        dag.nodes().iter().filter(|h| h.op == Op::MatMul).count(),
        2
    );
    assert_eq!(
        dag.nodes().iter().filter(|h| h.op == Op::Transpose).count(),
        1
    );
    let x = dag
        .nodes()
        .iter()
        .find(|h| matches!(&h.op, Op::Read(n) if n == "X"))
        .unwrap();
    assert_eq!(dag.consumers(x.id).len(), 2, "X shared via CSE");

    // the classification inner loop shares Q between two consumers
    let dag = parse_script(LOGREG_INNER).unwrap();
    let q = dag
        .nodes()
        .iter()
        .find(|h| matches!(h.op, Op::Binary(BinaryOp::Mult)) && dag.consumers(h.id).len() == 2)
        .expect("CSE-shared Q node");
    assert_eq!(dag.consumers(q.id).len(), 2);
    // the column indexing is shared too (single node, two consumers)
    let rix = dag
        .nodes()
        .iter()
        .filter(|h| matches!(h.op, Op::ColIndex { .. }))
        .count();
    assert_eq!(rix, 1);
}

#[test]
fn parse_errors() {
    match parse_script("R = sum(X\n") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
        other => panic!("expected parse error, got {other:?}"),
    }
    match parse_script("R = foo(X)\n") {
        Err(Error::UnknownFunction(f)) => assert_eq!(f, "foo"),
        other => panic!("expected unknown function, got {other:?}"),
    }
    match parse_script("R = sum(X, Y)\n") {
        Err(Error::ArityMismatch { name, expected, got }) => {
            assert_eq!((name.as_str(), expected, got), ("sum", 1, 2));
        }
        other => panic!("expected arity mismatch, got {other:?}"),
    }
}

#[test]
fn shape_errors_carry_both_nodes() {
    let mut dag = parse_script("R = X %*% Y\n").unwrap();
    let err = dag
        .propagate_sizes(&meta(&[("X", 10, 3, 1.0), ("Y", 4, 2, 1.0)]))
        .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("X") && msg.contains("Y"), "{msg}");
}

#[test]
fn unparse_is_a_fixpoint() {
    for script in [
        INTERMEDIATES,
        SINGLE_PASS,
        MULTI_AGG,
        SPARSE_OUTER,
        FACTOR_UPDATE,
        LOGREG_INNER,
        TEMPLATE_SWITCH,
        "R = ifelse(X > 0.5, X, 0 - X) + min(X, Y)\n",
        "R = cbind(X[, 1:2], Y) %*% v\n",
    ] {
        let canonical = unparse(&parse_script(script).unwrap());
        let reparsed = unparse(&parse_script(&canonical).unwrap());
        assert_eq!(canonical, reparsed, "fixpoint on:\n{script}");
    }
}

#[test]
fn logreg_against_naive_oracle() {
    // random 20x5 X, 5-col P, k=2, checked against hand-rolled math
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Matrix::rand_dense(20, 5, &mut rng);
    let p = Matrix::rand_dense(20, 5, &mut rng);
    let v = Matrix::rand_dense(5, 2, &mut rng);

    let mut dag = parse_script(LOGREG_INNER).unwrap();
    dag.propagate_sizes(&meta(&[("X", 20, 5, 1.0), ("P", 20, 5, 1.0), ("v", 5, 2, 1.0)]))
        .unwrap();
    // dims propagate exactly
    let h_id = dag.outputs.iter().find(|(n, _)| n == "H").unwrap().1;
    assert_eq!(dag.node(h_id).dims, fuseplan_core::hop::Dims::new(5, 2));

    let bindings: BTreeMap<String, Matrix> = [
        ("X".to_string(), x.clone()),
        ("P".to_string(), p.clone()),
        ("v".to_string(), v.clone()),
    ]
    .into();
    let got = reference_eval(&dag, &bindings).unwrap();

    // naive: Q = P[,1:2] . (X v); H = t(X) (Q - P[,1:2] . rowSums(Q))
    let (xr, pr, vr) = (to_rows(&x), to_rows(&p), to_rows(&v));
    let xv = naive_matmul(&xr, &vr);
    let pk: Vec<Vec<f64>> = pr.iter().map(|row| row[0..2].to_vec()).collect();
    let q: Vec<Vec<f64>> = (0..20)
        .map(|i| (0..2).map(|j| pk[i][j] * xv[i][j]).collect())
        .collect();
    let rowsums: Vec<f64> = q.iter().map(|r| r.iter().sum()).collect();
    let inner: Vec<Vec<f64>> = (0..20)
        .map(|i| (0..2).map(|j| q[i][j] - pk[i][j] * rowsums[i]).collect())
        .collect();
    let h = naive_matmul(&naive_transpose(&xr), &inner);

    let got_h = &got.outputs["H"];
    for r in 0..5 {
        for c in 0..2 {
            let err = (got_h.get(r, c) - h[r][c]).abs() / h[r][c].abs().max(1e-300);
            assert!(err <= 1e-12, "H[{r},{c}] off by {err:e}");
        }
    }
}

#[test]
fn reference_counts_one_read_per_consumed_intermediate() {
    let mut dag = parse_script("R = sum(exp(X) * exp(X))\n").unwrap();
    dag.propagate_sizes(&meta(&[("X", 4, 4, 1.0)])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bindings: BTreeMap<String, Matrix> =
        [("X".to_string(), Matrix::rand_dense(4, 4, &mut rng))].into();
    let r = reference_eval(&dag, &bindings).unwrap();
    // exp(X) shared: one read of X, the shared intermediate read twice
    assert_eq!(r.counters.reads_of("X"), 1);
    assert_eq!(r.intermediates, 2); // exp node + mult node
}
