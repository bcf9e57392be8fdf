//! Plan partitions and interesting points.
//!
//! Partitions are connected components over fusion references; nodes of
//! separate partitions are not reachable via fusion, so they are optimized
//! and costed independently. The per-partition search space is the boolean
//! cube over interesting points: materialization-point consumer edges and
//! template switches.

use crate::explore::MemoTable;
use crate::hop::{HopDag, HopId};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Serialize)]
pub struct PlanPartition {
    pub members: BTreeSet<HopId>,
    /// Members never referenced from within the partition.
    pub roots: BTreeSet<HopId>,
    /// Non-member producers read by members.
    pub inputs: BTreeSet<HopId>,
    /// Members with more than one consumer, excluding roots.
    pub mat_points: BTreeSet<HopId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum PointKind {
    MatPointConsumer,
    TemplateSwitch,
}

/// One boolean fusion decision: assigning true severs fusion across the edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct InterestingPoint {
    pub kind: PointKind,
    pub consumer: HopId,
    pub target: HopId,
}

/// Connected components over the union of all surviving fusion references.
pub fn find_partitions(memo: &MemoTable, dag: &HopDag) -> Vec<PlanPartition> {
    let nodes: Vec<HopId> = memo.groups().map(|(id, _)| *id).collect();
    let index: BTreeMap<HopId, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    let mut referenced: BTreeSet<HopId> = BTreeSet::new();
    for (&h, entries) in memo.groups() {
        for e in entries {
            for g in e.referenced_groups() {
                referenced.insert(g);
                if let (Some(&a), Some(&b)) = (index.get(&h), index.get(&g)) {
                    adj[a].push(b);
                    adj[b].push(a);
                }
            }
        }
    }
    let mut seen = vec![false; nodes.len()];
    let mut out = Vec::new();
    for start in 0..nodes.len() {
        if seen[start] {
            continue;
        }
        let mut members = BTreeSet::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            members.insert(nodes[i]);
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        let roots: BTreeSet<HopId> = members
            .iter()
            .copied()
            .filter(|m| !referenced.contains(m))
            .collect();
        let mut inputs = BTreeSet::new();
        for &m in &members {
            for &i in &dag.node(m).inputs {
                if !members.contains(&i) {
                    inputs.insert(i);
                }
            }
        }
        let mat_points: BTreeSet<HopId> = members
            .iter()
            .copied()
            .filter(|&m| dag.consumers(m).len() > 1 && !roots.contains(&m))
            .collect();
        out.push(PlanPartition {
            members,
            roots,
            inputs,
            mat_points,
        });
    }
    out
}

/// Whether any entry at `consumer` carries a fusion reference to `target`.
fn edge_referenced(memo: &MemoTable, dag: &HopDag, consumer: HopId, target: HopId) -> bool {
    memo.group(consumer).iter().any(|e| {
        e.refs
            .iter()
            .enumerate()
            .any(|(j, r)| *r != crate::explore::NO_REF && dag.node(consumer).inputs[j] == target)
    })
}

/// Materialization-point consumer edges (one decision per data dependency)
/// plus template-switch edges, deduplicated, in DAG order.
pub fn interesting_points(
    p: &PlanPartition,
    memo: &MemoTable,
    dag: &HopDag,
) -> Vec<InterestingPoint> {
    let mut points: Vec<InterestingPoint> = Vec::new();
    let mut seen: BTreeSet<(HopId, HopId)> = BTreeSet::new();
    for &m in &p.mat_points {
        for &c in dag.consumers(m) {
            if p.members.contains(&c) && edge_referenced(memo, dag, c, m) && seen.insert((c, m)) {
                points.push(InterestingPoint {
                    kind: PointKind::MatPointConsumer,
                    consumer: c,
                    target: m,
                });
            }
        }
    }
    for &g in &p.members {
        for &inp in &dag.node(g).inputs {
            if !p.members.contains(&inp) || !edge_referenced(memo, dag, g, inp) {
                continue;
            }
            let below = memo.template_kinds(inp);
            let here = memo.template_kinds(g);
            if below.difference(&here).next().is_some() && seen.insert((g, inp)) {
                points.push(InterestingPoint {
                    kind: PointKind::TemplateSwitch,
                    consumer: g,
                    target: inp,
                });
            }
        }
    }
    points.sort_by_key(|pt| (pt.consumer, pt.target, pt.kind));
    points
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::explore::ofmc_explore;
    use crate::hop::LeafMeta;
    use crate::parser::parse_script;

    fn build(script: &str, meta: &[(&str, u64, u64, f64)]) -> (HopDag, MemoTable) {
        let mut dag = parse_script(script).unwrap();
        let meta: BTreeMap<String, LeafMeta> = meta
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
            .collect();
        dag.propagate_sizes(&meta).unwrap();
        let memo = ofmc_explore(&dag, &Config::default());
        (dag, memo)
    }

    #[test]
    fn no_fusible_ops_means_zero_partitions() {
        let (dag, memo) = build("R = t(t(X))\n", &[("X", 10, 20, 1.0)]);
        assert_eq!(find_partitions(&memo, &dag).len(), 0);
    }

    #[test]
    fn full_close_boundary_yields_adjacent_partitions() {
        // colSums closes every template, so the chain above it is a separate
        // adjacent partition
        let (dag, memo) = build(
            "R = sum(exp(colSums(X * Y)))\n",
            &[("X", 100, 50, 1.0), ("Y", 100, 50, 1.0)],
        );
        let parts = find_partitions(&memo, &dag);
        assert_eq!(parts.len(), 2);
        // adjacency: one partition's input is the other's root
        let (a, b) = (&parts[0], &parts[1]);
        let adjacent = a.roots.iter().any(|r| b.inputs.contains(r))
            || b.roots.iter().any(|r| a.inputs.contains(r));
        assert!(adjacent);
    }

    #[test]
    fn logreg_single_partition_contains_cse_mat_point() {
        let (dag, memo) = build(
            "Q = P[, 1:2] * (X %*% v)\nH = t(X) %*% (Q - P[, 1:2] * rowSums(Q))\n",
            &[("X", 20, 5, 1.0), ("P", 20, 3, 1.0), ("v", 5, 2, 1.0)],
        );
        let parts = find_partitions(&memo, &dag);
        assert_eq!(parts.len(), 1);
        let q = dag
            .nodes()
            .iter()
            .find(|h| {
                matches!(h.op, crate::hop::Op::Binary(crate::hop::BinaryOp::Mult))
                    && dag.consumers(h.id).len() == 2
            })
            .unwrap()
            .id;
        assert!(parts[0].mat_points.contains(&q));
        let pts = interesting_points(&parts[0], &memo, &dag);
        let q_edges = pts.iter().filter(|p| p.target == q).count();
        assert_eq!(q_edges, 2, "one decision per consumer edge of the CSE");
    }

    #[test]
    fn template_switch_detected_on_outer_chain() {
        let (dag, memo) = build(
            "R = Y + X * (U %*% t(V))\n",
            &[
                ("Y", 2000, 2000, 1.0),
                ("X", 2000, 2000, 0.01),
                ("U", 2000, 50, 1.0),
                ("V", 2000, 50, 1.0),
            ],
        );
        let parts = find_partitions(&memo, &dag);
        assert_eq!(parts.len(), 1);
        let pts = interesting_points(&parts[0], &memo, &dag);
        assert!(
            pts.iter().any(|p| p.kind == PointKind::TemplateSwitch),
            "expected a switch point into the outer subexpression, got {pts:?}"
        );
    }

    #[test]
    fn uniform_chain_has_no_points() {
        let (dag, memo) = build(
            "R = exp(X * Y) - X\n",
            &[("X", 30, 30, 1.0), ("Y", 30, 30, 1.0)],
        );
        let parts = find_partitions(&memo, &dag);
        assert_eq!(parts.len(), 1);
        // X is a leaf, not a partition member, so its reuse is not a point
        assert!(interesting_points(&parts[0], &memo, &dag).is_empty());
    }
}
