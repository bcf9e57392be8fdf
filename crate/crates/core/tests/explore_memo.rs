//! Memo-table exploration against the pinned group contents of the
//! classification inner-loop DAG, plus structural invariants.

mod common;

use common::*;
use fuseplan_core::config::Config;
use fuseplan_core::explore::{ofmc_explore, prune_dominated, MemoEntry, MemoTable, NO_REF};
use fuseplan_core::hop::{AggDir, BinaryOp, HopDag, HopId, Op};
use fuseplan_core::templates::{CloseStatus, TemplateKind};

fn find(dag: &HopDag, pred: impl Fn(&fuseplan_core::hop::Hop) -> bool) -> HopId {
    dag.nodes()
        .iter()
        .find(|h| pred(h))
        .map(|h| h.id)
        .expect("node present")
}

fn entry(t: TemplateKind, refs: &[i64], closed: CloseStatus) -> MemoEntry {
    MemoEntry {
        template: t,
        refs: refs.to_vec(),
        closed,
    }
}

fn set_eq(a: &[MemoEntry], b: &[MemoEntry]) -> bool {
    a.len() == b.len() && a.iter().all(|e| b.contains(e))
}

/// The final multiply's group holds exactly the three Row alternatives:
/// fuse left, fuse right, fuse both.
#[test]
fn logreg_final_multiply_group_is_exactly_three_row_entries() {
    let dag = build(LOGREG_INNER, &logreg_meta(20, 5, 2));
    let memo = ofmc_explore(&dag, &Config::default());

    let t_node = find(&dag, |h| h.op == Op::Transpose);
    let minus = find(&dag, |h| matches!(h.op, Op::Binary(BinaryOp::Sub)));
    let final_mm = find(&dag, |h| {
        h.op == Op::MatMul && h.inputs[0] == t_node && h.inputs[1] == minus
    });

    let expected = vec![
        entry(
            TemplateKind::Row,
            &[t_node as i64, NO_REF],
            CloseStatus::ClosedValid,
        ),
        entry(
            TemplateKind::Row,
            &[NO_REF, minus as i64],
            CloseStatus::ClosedValid,
        ),
        entry(
            TemplateKind::Row,
            &[t_node as i64, minus as i64],
            CloseStatus::ClosedValid,
        ),
    ];
    let got = memo.group(final_mm);
    assert!(
        set_eq(got, &expected),
        "expected exactly the three Row entries, got {:?}",
        got.iter().map(|e| e.notation()).collect::<Vec<_>>()
    );
}

/// rowSums closes the Cell template, so its group never holds a no-reference
/// Cell entry; the Row alternative stays open.
#[test]
fn rowsums_group_has_no_bare_cell_entry() {
    let dag = build(LOGREG_INNER, &logreg_meta(20, 5, 2));
    let memo = ofmc_explore(&dag, &Config::default());
    let rs = find(&dag, |h| matches!(h.op, Op::Agg(_, AggDir::Row)));
    let group = memo.group(rs);
    assert!(!group.is_empty());
    assert!(group
        .iter()
        .all(|e| !(e.template == TemplateKind::Cell && e.ref_count() == 0)));
    assert!(group.iter().any(|e| e.template == TemplateKind::Row
        && e.closed == CloseStatus::OpenValid));
    // the fused Cell alternative is closed-valid
    assert!(group.iter().any(|e| e.template == TemplateKind::Cell
        && e.ref_count() == 1
        && e.closed == CloseStatus::ClosedValid));
}

/// Every surviving group reference targets an existing group holding at least
/// one compatible referencable entry; group sizes stay within the 2^inputs * |T| bound.
#[test]
fn reference_validity_and_entry_bound() {
    for (script, m) in [
        (LOGREG_INNER.to_string(), logreg_meta(20, 5, 2)),
        (
            FACTOR_UPDATE.to_string(),
            vec![
                ("X", 2000, 2000, 0.01),
                ("U", 2000, 20, 1.0),
                ("V", 2000, 20, 1.0),
                ("r", 2000, 1, 1.0),
            ],
        ),
        (
            SPARSE_OUTER.to_string(),
            vec![("X", 2000, 2000, 0.01), ("U", 2000, 20, 1.0), ("V", 2000, 20, 1.0)],
        ),
    ] {
        let dag = build(&script, &m);
        let memo = ofmc_explore(&dag, &Config::default());
        for (&gid, entries) in memo.groups() {
            assert!(entries.len() <= 32, "group {gid} exceeds entry bound");
            for e in entries {
                for (j, r) in e.refs.iter().enumerate() {
                    if *r == NO_REF {
                        continue;
                    }
                    let input = dag.node(gid).inputs[j];
                    assert_eq!(*r as HopId, input, "refs follow input positions");
                    assert!(
                        memo.group(input).iter().any(|s| s.closed.referencable()
                            && e.template.compatible_child(s.template)),
                        "dangling reference {} -> {} in {}",
                        gid,
                        input,
                        e.notation()
                    );
                }
            }
        }
    }
}

/// Each operator is visited exactly once even with shared subexpressions.
#[test]
fn exploration_is_single_pass() {
    let dag = build(LOGREG_INNER, &logreg_meta(20, 5, 2));
    let memo = ofmc_explore(&dag, &Config::default());
    let reachable = dag.len(); // every node reachable from the root here
    assert_eq!(memo.explored_ops, reachable);
}

/// A single element-wise multiply over two leaves only yields the bare open
/// Cell entry.
#[test]
fn single_mult_over_leaves() {
    let dag = build("R = X * Y\n", &[("X", 10, 10, 1.0), ("Y", 10, 10, 1.0)]);
    let memo = ofmc_explore(&dag, &Config::default());
    let mult = find(&dag, |h| matches!(h.op, Op::Binary(BinaryOp::Mult)));
    assert_eq!(
        memo.group(mult),
        &[entry(
            TemplateKind::Cell,
            &[NO_REF, NO_REF],
            CloseStatus::OpenValid
        )]
    );
}

/// The factorization update keeps the Outer chain and the Cell epilogue in
/// separate groups: the closed Outer plan cannot be referenced upward.
#[test]
fn factor_update_groups_stay_unmerged() {
    let dag = build(
        FACTOR_UPDATE,
        &[
            ("X", 2000, 2000, 0.01),
            ("U", 2000, 20, 1.0),
            ("V", 2000, 20, 1.0),
            ("r", 2000, 1, 1.0),
        ],
    );
    let memo = ofmc_explore(&dag, &Config::default());

    // the closing multiply by V carries Outer entries
    let uv = find(&dag, |h| {
        h.op == Op::MatMul && dag.node(h.inputs[1]).op == Op::Transpose
    });
    let chain_mult = find(&dag, |h| {
        matches!(h.op, Op::Binary(BinaryOp::Mult))
            && h.inputs.iter().any(|i| dag.node(*i).op.is_comparison())
    });
    let right_mm = find(&dag, |h| {
        h.op == Op::MatMul && h.inputs[0] == chain_mult
    });
    assert!(memo
        .group(right_mm)
        .iter()
        .any(|e| e.template == TemplateKind::Outer && e.closed == CloseStatus::ClosedValid));
    assert!(memo.contains(uv));

    // the closed Outer plan never extends into the + root: no Outer entry
    // there, and the epilogue is covered by Cell plans (an overlapping Row
    // alternative may coexist; selection decides)
    let plus = find(&dag, |h| matches!(h.op, Op::Binary(BinaryOp::Add)));
    let group = memo.group(plus);
    assert!(!group.is_empty());
    assert!(group.iter().all(|e| e.template != TemplateKind::Outer));
    let epilogue = dag.node(plus).inputs[1] as i64;
    assert!(group
        .iter()
        .any(|e| e.template == TemplateKind::Cell && e.refs[1] == epilogue));
}

/// Exploring from different root orders yields set-equal memo tables.
#[test]
fn exploration_order_independence() {
    let mut dag = build(MULTI_AGG, &[
        ("X", 50, 50, 1.0),
        ("Y", 50, 50, 1.0),
        ("Z", 50, 50, 1.0),
    ]);
    let memo_a = ofmc_explore(&dag, &Config::default());
    dag.outputs.reverse();
    let memo_b = ofmc_explore(&dag, &Config::default());
    let collect = |m: &MemoTable| -> Vec<(HopId, Vec<String>)> {
        m.groups()
            .map(|(id, es)| {
                let mut ns: Vec<String> = es.iter().map(|e| e.notation()).collect();
                ns.sort();
                (*id, ns)
            })
            .collect()
    };
    assert_eq!(collect(&memo_a), collect(&memo_b));
}

/// Dominated-plan pruning drops the subset entry when the superset entry only
/// references single-consumer groups, and keeps both otherwise.
#[test]
fn dominated_pruning_rules() {
    let dag = build(LOGREG_INNER, &logreg_meta(20, 5, 2));
    let t_node = find(&dag, |h| h.op == Op::Transpose) as i64;
    let minus = find(&dag, |h| matches!(h.op, Op::Binary(BinaryOp::Sub)));
    let q_node = dag.node(minus).inputs[0]; // the CSE with two consumers
    let other = dag.node(minus).inputs[1] as i64;

    // R(t,-1) dominated by R(t,minus): both referenced groups single-consumer
    let mut entries = vec![
        entry(TemplateKind::Row, &[t_node, NO_REF], CloseStatus::ClosedValid),
        entry(
            TemplateKind::Row,
            &[t_node, minus as i64],
            CloseStatus::ClosedValid,
        ),
    ];
    // reconstruct the final multiply context for consumer counts
    prune_dominated(&dag, &mut entries);
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].refs, vec![t_node, minus as i64]);

    // R(-1,other) not dominated by R(q,other): q has multiple consumers
    let mut entries = vec![
        entry(TemplateKind::Row, &[NO_REF, other], CloseStatus::OpenValid),
        entry(
            TemplateKind::Row,
            &[q_node as i64, other],
            CloseStatus::OpenValid,
        ),
    ];
    prune_dominated(&dag, &mut entries);
    assert_eq!(entries.len(), 2);

    // different template kinds never dominate each other
    let mut entries = vec![
        entry(TemplateKind::Cell, &[NO_REF, other], CloseStatus::OpenValid),
        entry(TemplateKind::Row, &[t_node, other], CloseStatus::OpenValid),
    ];
    prune_dominated(&dag, &mut entries);
    assert_eq!(entries.len(), 2);
}

/// Open-phase toggling: two mergeable inputs expand to the full product.
#[test]
fn create_plans_toggle_product() {
    let dag = build(
        "R = (X * Y) - (X / Y)\n",
        &[("X", 10, 10, 1.0), ("Y", 10, 10, 1.0)],
    );
    let memo = ofmc_explore(&dag, &Config::default());
    let sub = find(&dag, |h| matches!(h.op, Op::Binary(BinaryOp::Sub)));
    let group = memo.group(sub);
    let cell: Vec<&MemoEntry> = group
        .iter()
        .filter(|e| e.template == TemplateKind::Cell)
        .collect();
    assert_eq!(cell.len(), 4, "full toggle product over two mergeable inputs");
}
