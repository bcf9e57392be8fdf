//! Plan enumeration over interesting points.
//!
//! The exponential space of boolean assignments is linearized from negative
//! to positive decisions, so the maximal-fusion plan is costed first and
//! yields a good upper bound immediately. Two prunings skip whole areas:
//! a cost-based skip-ahead (lower bound vs. the running best) and a
//! structural branch that solves independent sub-problems behind a cut set.

use crate::config::Config;
use crate::cost::{filter_for_assignment, lower_bound, partition_cost, static_lower_bound, StaticBound};
use crate::explore::MemoTable;
use crate::hop::{HopDag, HopId};
use crate::partition::{InterestingPoint, PlanPartition};
use serde::Serialize;
use std::collections::BTreeSet;

#[derive(Debug, Default, Clone, Serialize)]
pub struct EnumStats {
    pub evaluated: u64,
    pub skipped_cost: u64,
    pub skipped_structural: u64,
}

/// A valid cut set over layout positions: materializing its points splits the
/// remaining points into independent sub-problems S1 and S2 (which exclude
/// the cut set itself).
#[derive(Debug, Clone, Serialize)]
pub struct CutSet {
    pub points: Vec<usize>,
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReachabilityGraph {
    /// Point indices in enumeration order: best cut set first, then S1, S2.
    pub layout: Vec<usize>,
    /// All valid candidates, ascending by score; the first drives enumeration.
    pub cut_sets: Vec<CutSet>,
}

/// Cut-set score: enumeration volume left outside the split plus the volume
/// of the independent sub-problems.
pub fn cut_set_score(cs_len: usize, n: usize, s1_len: usize, s2_len: usize) -> f64 {
    let cs = cs_len as f64;
    ((2f64.powf(cs) - 1.0) / 2f64.powf(cs)) * 2f64.powf(n as f64)
        + (1.0 / 2f64.powf(cs)) * (2f64.powf(s1_len as f64) + 2f64.powf(s2_len as f64))
}

fn descendants(dag: &HopDag, members: &BTreeSet<HopId>, start: HopId) -> BTreeSet<HopId> {
    let mut out = BTreeSet::new();
    let mut stack = vec![start];
    while let Some(n) = stack.pop() {
        for &i in &dag.node(n).inputs {
            if members.contains(&i) && out.insert(i) {
                stack.push(i);
            }
        }
    }
    out
}

/// Hops reachable from the partition roots without crossing the cut edges.
fn reachable_from_roots(
    dag: &HopDag,
    part: &PlanPartition,
    cut_edges: &BTreeSet<(HopId, HopId)>,
) -> BTreeSet<HopId> {
    let mut seen: BTreeSet<HopId> = BTreeSet::new();
    let mut stack: Vec<HopId> = part.roots.iter().copied().collect();
    seen.extend(part.roots.iter().copied());
    while let Some(n) = stack.pop() {
        for &i in &dag.node(n).inputs {
            if !part.members.contains(&i) || cut_edges.contains(&(n, i)) {
                continue;
            }
            if seen.insert(i) {
                stack.push(i);
            }
        }
    }
    seen
}

fn classify(
    dag: &HopDag,
    part: &PlanPartition,
    points: &[InterestingPoint],
    cand: &[usize],
) -> Option<(Vec<usize>, Vec<usize>)> {
    let cut_edges: BTreeSet<(HopId, HopId)> = cand
        .iter()
        .map(|&i| (points[i].consumer, points[i].target))
        .collect();
    let above = reachable_from_roots(dag, part, &cut_edges);
    let mut below: BTreeSet<HopId> = BTreeSet::new();
    for &i in cand {
        let t = points[i].target;
        below.insert(t);
        below.extend(descendants(dag, &part.members, t));
    }
    let mut s1 = Vec::new();
    let mut s2 = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if cand.contains(&i) {
            continue;
        }
        let in_below = below.contains(&p.consumer) || below.contains(&p.target);
        let in_above = above.contains(&p.consumer) && above.contains(&p.target);
        match (in_above, in_below) {
            (true, true) => return None, // not separated
            (true, false) => s1.push(i),
            (false, true) => s2.push(i),
            (false, false) => return None, // unattributable point
        }
    }
    if s1.is_empty() || s2.is_empty() {
        return None;
    }
    Some((s1, s2))
}

/// Builds the reachability graph: candidate cut sets are single points,
/// composite points sharing a materialization target, and non-overlapping
/// pairs of the top-scored singles.
pub fn build_reachability_graph(
    dag: &HopDag,
    cfg: &Config,
    part: &PlanPartition,
    points: &[InterestingPoint],
) -> Option<ReachabilityGraph> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let mut candidates: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    // composite points of equivalent inputs: all consumer edges of one target
    let targets: BTreeSet<HopId> = points.iter().map(|p| p.target).collect();
    for t in targets {
        let group: Vec<usize> = (0..n).filter(|&i| points[i].target == t).collect();
        if group.len() > 1 {
            candidates.push(group);
        }
    }
    let mut valid: Vec<CutSet> = Vec::new();
    for cand in &candidates {
        if let Some((s1, s2)) = classify(dag, part, points, cand) {
            valid.push(CutSet {
                points: cand.clone(),
                score: cut_set_score(cand.len(), n, s1.len(), s2.len()),
                s1,
                s2,
            });
        }
    }
    // non-overlapping pairs of the best singles
    let mut singles: Vec<&CutSet> = valid.iter().filter(|c| c.points.len() == 1).collect();
    singles.sort_by(|a, b| a.score.partial_cmp(&b.score).unwrap());
    let top: Vec<usize> = singles
        .iter()
        .take(cfg.cut_set_pair_candidates)
        .map(|c| c.points[0])
        .collect();
    let mut pairs = Vec::new();
    for (ai, &a) in top.iter().enumerate() {
        for &b in &top[ai + 1..] {
            let cand = vec![a.min(b), a.max(b)];
            if let Some((s1, s2)) = classify(dag, part, points, &cand) {
                pairs.push(CutSet {
                    score: cut_set_score(2, n, s1.len(), s2.len()),
                    points: cand,
                    s1,
                    s2,
                });
            }
        }
    }
    valid.extend(pairs);
    if valid.is_empty() {
        return None;
    }
    valid.sort_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .unwrap()
            .then_with(|| a.points.cmp(&b.points))
    });

    // layout: best cut set first, then its sub-problems, then stragglers
    let best = valid[0].clone();
    let mut layout: Vec<usize> = Vec::with_capacity(n);
    layout.extend(&best.points);
    layout.extend(&best.s1);
    layout.extend(&best.s2);
    for i in 0..n {
        if !layout.contains(&i) {
            layout.push(i);
        }
    }
    // re-express cut sets in layout positions
    let pos_of = |orig: usize| layout.iter().position(|&l| l == orig).unwrap();
    let remap = |v: &[usize]| -> Vec<usize> {
        let mut m: Vec<usize> = v.iter().map(|&i| pos_of(i)).collect();
        m.sort_unstable();
        m
    };
    let cut_sets = valid
        .iter()
        .map(|c| CutSet {
            points: remap(&c.points),
            s1: remap(&c.s1),
            s2: remap(&c.s2),
            score: c.score,
        })
        .collect();
    Some(ReachabilityGraph { layout, cut_sets })
}

/// Number of plans covered by the skip-ahead after a failed lower-bound test:
/// 2^(n - x - 1) where x is the last true position.
pub fn skip_count(n: usize, q_active: &[bool]) -> u64 {
    debug_assert_eq!(q_active.len(), n);
    match q_active.iter().rposition(|&b| b) {
        Some(x) => 1u64 << (n - 1 - x),
        None => 1,
    }
}

pub struct EnumOutcome {
    /// Assignment over the points in layout order.
    pub q: Vec<bool>,
    pub cost: f64,
    pub stats: EnumStats,
    /// Set when the point count exceeded the cap and fuse-all was used.
    pub fallback: bool,
}

/// Finds the cost-minimal assignment for one partition. Returns the points in
/// enumeration (layout) order alongside the result.
pub fn optimize_partition(
    memo: &MemoTable,
    dag: &HopDag,
    cfg: &Config,
    part: &PlanPartition,
    points: &[InterestingPoint],
) -> (Vec<InterestingPoint>, EnumOutcome) {
    let mut stats = EnumStats::default();
    if points.is_empty() {
        let cost = partition_cost(memo, dag, cfg, part, &Default::default(), f64::INFINITY);
        stats.evaluated = 1;
        return (
            Vec::new(),
            EnumOutcome {
                q: Vec::new(),
                cost,
                stats,
                fallback: false,
            },
        );
    }
    if points.len() > cfg.max_interesting_points {
        let cost = partition_cost(memo, dag, cfg, part, &Default::default(), f64::INFINITY);
        stats.evaluated = 1;
        return (
            points.to_vec(),
            EnumOutcome {
                q: vec![false; points.len()],
                cost,
                stats,
                fallback: true,
            },
        );
    }
    let rg = if cfg.pruning.structural {
        build_reachability_graph(dag, cfg, part, points)
    } else {
        None
    };
    let ordered: Vec<InterestingPoint> = match &rg {
        Some(rg) => rg.layout.iter().map(|&i| points[i]).collect(),
        None => points.to_vec(),
    };
    let static_cost = static_lower_bound(memo, dag, cfg, part);
    let n = ordered.len();
    let active: Vec<usize> = (0..n).collect();
    let base = vec![false; n];
    let (q, cost) = scan(
        memo, dag, cfg, part, &ordered, rg.as_ref(), &active, &base, static_cost, &mut stats,
    );
    (
        ordered,
        EnumOutcome {
            q,
            cost,
            stats,
            fallback: false,
        },
    )
}

/// The linear scan with skip-ahead (one enumeration). Returns the best full
/// assignment over `points` (active positions varied, others from `base_q`).
#[allow(clippy::too_many_arguments)]
fn scan(
    memo: &MemoTable,
    dag: &HopDag,
    cfg: &Config,
    part: &PlanPartition,
    points: &[InterestingPoint],
    rg: Option<&ReachabilityGraph>,
    active: &[usize],
    base_q: &[bool],
    static_cost: StaticBound,
    stats: &mut EnumStats,
) -> (Vec<bool>, f64) {
    let n = active.len();
    let total: u64 = 1u64 << n;
    let mut best_q: Option<Vec<bool>> = None;
    let mut upper = f64::INFINITY;
    let mut consumed: u64 = 0; // local identity: evaluated + skipped == total

    // the structural branch triggers at exactly (cut set true, rest false)
    let trigger = rg.and_then(|g| g.cut_sets.first()).map(|cs| {
        let mut t = 0u64;
        for &p in &cs.points {
            t |= 1u64 << (n - 1 - p);
        }
        t
    });

    let mut j: u64 = 0;
    while j < total {
        let mut q = base_q.to_vec();
        let mut q_active = vec![false; n];
        for (i, &pos) in active.iter().enumerate() {
            let bit = (j >> (n - 1 - i)) & 1 == 1;
            q_active[i] = bit;
            q[pos] = bit;
        }
        let mut pskip: u64 = 0;

        if Some(j) == trigger {
            // independent sub-problems behind the materialized cut set
            let cs = rg.unwrap().cut_sets.first().unwrap();
            pskip = (1u64 << (n - cs.points.len())) - 1;
            for sub in [&cs.s1, &cs.s2] {
                let (sub_q, _) =
                    scan(memo, dag, cfg, part, points, None, sub, &q, static_cost, stats);
                for (&pos, &bit) in sub.iter().zip(sub_q.iter()) {
                    q[pos] = bit;
                }
            }
            stats.skipped_structural += pskip;
        } else if cfg.pruning.cost_based && best_q.is_some() {
            let lb = lower_bound(static_cost, dag, cfg, points, &q);
            if lb >= upper {
                let skip = skip_count(n, &q_active);
                stats.skipped_cost += skip;
                consumed += skip;
                j += skip;
                continue;
            }
        }

        let cost = partition_cost(
            memo,
            dag,
            cfg,
            part,
            &filter_for_assignment(points, &q),
            upper,
        );
        stats.evaluated += 1;
        consumed += 1 + pskip;
        if best_q.is_none() || cost < upper {
            debug_assert!(cost <= upper, "upper bound is monotone non-increasing");
            upper = cost;
            best_q = Some(q);
        }
        j += 1 + pskip;
    }
    debug_assert_eq!(consumed, total, "evaluated + skipped plans cover the space");
    (best_q.expect("nonempty scan"), upper)
}

/// Exhaustive reference enumeration over all 2^n assignments; the optimality
/// oracle for the skip-ahead scan (identical cost function, no pruning).
pub fn exhaustive_min(
    memo: &MemoTable,
    dag: &HopDag,
    cfg: &Config,
    part: &PlanPartition,
    points: &[InterestingPoint],
) -> (Vec<bool>, f64) {
    let n = points.len();
    assert!(n <= 24, "exhaustive oracle capped for sanity");
    let mut best = (vec![false; n], f64::INFINITY);
    for j in 0..(1u64 << n) {
        let q: Vec<bool> = (0..n).map(|i| (j >> (n - 1 - i)) & 1 == 1).collect();
        let c = partition_cost(
            memo,
            dag,
            cfg,
            part,
            &filter_for_assignment(points, &q),
            f64::INFINITY,
        );
        if c < best.1 {
            best = (q, c);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_formula() {
        // |cs|=1, n=4, |S1|=1, |S2|=2: 0.5*16 + 0.5*(2+4) = 11
        assert_eq!(cut_set_score(1, 4, 1, 2), 11.0);
        // a 2-point cut of the same space scores worse than a balanced single
        assert!(cut_set_score(1, 4, 1, 2) < cut_set_score(2, 4, 1, 1));
    }

    #[test]
    fn skip_counts() {
        // prefix (F,T,F,F): last true at index 1 -> skip 2^(4-1-1) = 4
        assert_eq!(skip_count(4, &[false, true, false, false]), 4);
        assert_eq!(skip_count(4, &[true, false, false, false]), 8);
        assert_eq!(skip_count(4, &[false, false, false, true]), 1);
        assert_eq!(skip_count(4, &[false; 4]), 1);
    }
}
