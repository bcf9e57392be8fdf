//! Candidate exploration: populates the memoization table with all valid
//! partial fusion plans in one bottom-up pass, then prunes.
//!
//! The memo table groups partial plans per operator, like groups and group
//! expressions in a Cascades-style optimizer, but used purely as a compact
//! plan representation. An entry's input list holds group references or -1
//! (materialized input) by input position.

use crate::config::Config;
use crate::hop::{Hop, HopDag, HopId};
use crate::templates::{
    self, close, find_sparse_driver, fuse, merge, open, CloseStatus, TemplateKind, ALL_TEMPLATES,
};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

pub const NO_REF: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoEntry {
    pub template: TemplateKind,
    /// Group reference or -1 per input position.
    pub refs: Vec<i64>,
    pub closed: CloseStatus,
}

impl MemoEntry {
    pub fn ref_count(&self) -> usize {
        self.refs.iter().filter(|r| **r != NO_REF).count()
    }

    pub fn referenced_groups(&self) -> impl Iterator<Item = HopId> + '_ {
        self.refs.iter().filter(|r| **r != NO_REF).map(|r| *r as HopId)
    }

    /// Positions that carry a reference.
    fn ref_positions(&self) -> BTreeSet<usize> {
        self.refs
            .iter()
            .enumerate()
            .filter(|(_, r)| **r != NO_REF)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn notation(&self) -> String {
        let refs: Vec<String> = self.refs.iter().map(|r| r.to_string()).collect();
        format!("{}({})", self.template.short(), refs.join(","))
    }
}

#[derive(Debug, Default, Clone)]
pub struct MemoTable {
    groups: BTreeMap<HopId, Vec<MemoEntry>>,
    processed: BTreeSet<HopId>,
    /// Number of process steps, asserted equal to reachable operators.
    pub explored_ops: usize,
}

impl MemoTable {
    pub fn new() -> Self {
        MemoTable::default()
    }

    pub fn group(&self, id: HopId) -> &[MemoEntry] {
        self.groups.get(&id).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn groups(&self) -> impl Iterator<Item = (&HopId, &Vec<MemoEntry>)> {
        self.groups.iter()
    }

    pub fn contains(&self, id: HopId) -> bool {
        self.groups.contains_key(&id)
    }

    /// Distinct template kinds among entries that may still be referenced.
    pub fn referencable_templates(&self, id: HopId) -> Vec<TemplateKind> {
        let mut kinds = Vec::new();
        for e in self.group(id) {
            if e.closed.referencable() && !kinds.contains(&e.template) {
                kinds.push(e.template);
            }
        }
        kinds
    }

    pub fn template_kinds(&self, id: HopId) -> BTreeSet<TemplateKind> {
        self.group(id).iter().map(|e| e.template).collect()
    }

    fn has_compatible_open(&self, id: HopId, parent: TemplateKind) -> bool {
        self.group(id)
            .iter()
            .any(|e| e.closed.referencable() && parent.compatible_child(e.template))
    }

    /// Memo dump in machine-readable group notation.
    pub fn to_json(&self, dag: &HopDag) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (id, entries) in &self.groups {
            let list: Vec<serde_json::Value> = entries
                .iter()
                .map(|e| {
                    serde_json::json!({
                        "type": format!("{:?}", e.template),
                        "refs": e.refs,
                        "closed": format!("{:?}", e.closed),
                    })
                })
                .collect();
            map.insert(
                format!("{} {}", id, dag.node(*id).op.mnemonic()),
                serde_json::Value::Array(list),
            );
        }
        serde_json::Value::Object(map)
    }
}

/// Bottom-up exploration of all valid partial fusion plans (one pass, each
/// operator visited exactly once; explicit stack to survive deep DAGs).
pub fn ofmc_explore(dag: &HopDag, cfg: &Config) -> MemoTable {
    assert!(dag.is_propagated(), "exploration relies on known sizes");
    let mut memo = MemoTable::new();
    let mut stack: Vec<(HopId, bool)> = Vec::new();
    for (_, root) in &dag.outputs {
        stack.push((*root, false));
    }
    // also cover detached roots when outputs are a subset
    for root in dag.roots() {
        stack.push((root, false));
    }
    while let Some((id, expanded)) = stack.pop() {
        if memo.processed.contains(&id) {
            continue;
        }
        if expanded {
            process_operator(dag, &mut memo, id, cfg);
            memo.processed.insert(id);
            memo.explored_ops += 1;
        } else {
            stack.push((id, true));
            for &i in dag.node(id).inputs.iter().rev() {
                if !memo.processed.contains(&i) {
                    stack.push((i, false));
                }
            }
        }
    }
    memo
}

fn process_operator(dag: &HopDag, memo: &mut MemoTable, id: HopId, cfg: &Config) {
    let h = dag.node(id);
    if h.op.is_leaf() {
        return;
    }
    let mut entries: Vec<MemoEntry> = Vec::new();
    let push = |e: MemoEntry, entries: &mut Vec<MemoEntry>| {
        if !entries.contains(&e) {
            entries.push(e);
        }
    };

    // open initial operator plans
    for t in ALL_TEMPLATES {
        if open(t, dag, h, cfg) {
            for e in create_plans(dag, memo, h, None, t, cfg) {
                push(e, &mut entries);
            }
        }
    }
    // fuse and merge plans from the inputs
    for (j, &inp) in h.inputs.iter().enumerate() {
        for t in memo.referencable_templates(inp) {
            if fuse(t, dag, h, dag.node(inp), cfg) {
                for e in create_plans(dag, memo, h, Some(j), t, cfg) {
                    push(e, &mut entries);
                }
            }
        }
    }
    // close plans where required; closed-invalid entries never survive
    for e in entries.iter_mut() {
        let mut status = close(e.template, dag, h, cfg);
        if e.template == TemplateKind::Outer && status == CloseStatus::ClosedValid {
            let region = entry_region(dag, memo, id, e);
            if find_sparse_driver(dag, &region, id, cfg).is_none() {
                status = CloseStatus::ClosedInvalid;
            }
        }
        e.closed = status;
    }
    entries.retain(|e| e.closed != CloseStatus::ClosedInvalid);

    prune_redundant(&mut entries);
    if cfg.effective_dominated_pruning() {
        prune_dominated(dag, &mut entries);
    }

    debug_assert!(
        entries.len() <= 32,
        "entry bound exceeded at {}: {}",
        dag.describe(id),
        entries.len()
    );
    if !entries.is_empty() {
        memo.groups.insert(id, entries);
    }
}

/// Base entry referencing `fused_in` (if any), expanded over every subset of
/// the remaining inputs that satisfies the pair-wise merge condition.
pub fn create_plans(
    dag: &HopDag,
    memo: &MemoTable,
    h: &Hop,
    fused_in: Option<usize>,
    t: TemplateKind,
    cfg: &Config,
) -> Vec<MemoEntry> {
    let arity = h.inputs.len();
    let mut base = vec![NO_REF; arity];
    if let Some(j) = fused_in {
        base[j] = h.inputs[j] as i64;
    }
    let mergeable: Vec<usize> = (0..arity)
        .filter(|&j| {
            Some(j) != fused_in
                && memo.has_compatible_open(h.inputs[j], t)
                && merge(t, dag, h, dag.node(h.inputs[j]), cfg)
        })
        .collect();
    let mut out = Vec::with_capacity(1 << mergeable.len());
    for mask in 0..(1u32 << mergeable.len()) {
        let mut refs = base.clone();
        for (bit, &j) in mergeable.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                refs[j] = h.inputs[j] as i64;
            }
        }
        out.push(MemoEntry {
            template: t,
            refs,
            closed: CloseStatus::OpenValid,
        });
    }
    out
}

/// Removes duplicates and valid closed entries without group references.
pub fn prune_redundant(entries: &mut Vec<MemoEntry>) {
    let mut seen: Vec<MemoEntry> = Vec::new();
    entries.retain(|e| {
        if seen.contains(e) {
            return false;
        }
        seen.push(e.clone());
        !(e.closed == CloseStatus::ClosedValid && e.ref_count() == 0)
    });
}

/// Heuristic-only pruning: an entry is dominated when another entry of the
/// same template references a strict superset of its inputs and all of that
/// entry's references target single-consumer operators.
pub fn prune_dominated(dag: &HopDag, entries: &mut Vec<MemoEntry>) {
    let snapshot = entries.clone();
    entries.retain(|e| {
        !snapshot.iter().any(|d| {
            d.template == e.template
                && d.ref_positions().is_superset(&e.ref_positions())
                && d.ref_count() > e.ref_count()
                && d.referenced_groups().all(|g| dag.consumers(g).len() == 1)
        })
    });
}

/// Validity filter on fusion references applied by a selection.
#[derive(Debug, Default, Clone)]
pub struct RefFilter {
    /// Severed consumer -> input edges (true-assigned interesting points).
    pub invalid_edges: BTreeSet<(HopId, HopId)>,
    /// Materialize every multi-consumer intermediate (fuse-no-redundancy).
    pub sever_multi_consumer: bool,
}

impl RefFilter {
    pub fn allows(&self, dag: &HopDag, consumer: HopId, input: HopId) -> bool {
        if self.invalid_edges.contains(&(consumer, input)) {
            return false;
        }
        if self.sever_multi_consumer && dag.consumers(input).len() > 1 {
            return false;
        }
        true
    }

    fn entry_valid(&self, dag: &HopDag, h: &Hop, e: &MemoEntry) -> bool {
        e.refs
            .iter()
            .enumerate()
            .all(|(j, r)| *r == NO_REF || self.allows(dag, h.id, h.inputs[j]))
    }
}

/// Best entry for `h` under a filter: maximal fusion references first, then
/// template preference (sparsity exploitation wins ties), then stable order.
pub fn get_best<'m>(
    memo: &'m MemoTable,
    dag: &HopDag,
    cfg: &Config,
    id: HopId,
    parent: Option<TemplateKind>,
    filter: &RefFilter,
) -> Option<&'m MemoEntry> {
    let h = dag.node(id);
    let mut best: Option<&MemoEntry> = None;
    for e in memo.group(id) {
        let usable = match parent {
            None => e.closed.root_usable(),
            Some(p) => e.closed.referencable() && p.compatible_child(e.template),
        };
        if !usable || !filter.entry_valid(dag, h, e) {
            continue;
        }
        if parent.is_none() && e.template == TemplateKind::Outer {
            // an Outer plan is only a valid operator root with a sparse driver
            let region = resolve_region(memo, dag, cfg, id, e, filter);
            if find_sparse_driver(dag, &region, id, cfg).is_none() {
                continue;
            }
        }
        let better = match best {
            None => true,
            Some(b) => {
                (e.ref_count(), e.template.preference()) > (b.ref_count(), b.template.preference())
                    || ((e.ref_count(), e.template.preference())
                        == (b.ref_count(), b.template.preference())
                        && e.refs < b.refs)
            }
        };
        if better {
            best = Some(e);
        }
    }
    best
}

/// Covered operators implied by choosing `entry` at `root`, resolving group
/// references through the deterministic best-entry choice.
pub fn resolve_region(
    memo: &MemoTable,
    dag: &HopDag,
    cfg: &Config,
    root: HopId,
    entry: &MemoEntry,
    filter: &RefFilter,
) -> BTreeSet<HopId> {
    let mut region = BTreeSet::new();
    let mut chosen = BTreeMap::new();
    region.insert(root);
    chosen.insert(root, entry.clone());
    walk_refs(memo, dag, cfg, root, entry, filter, &mut region, &mut chosen);
    region
}

/// A fully resolved fused-operator plan rooted at one hop.
#[derive(Debug, Clone)]
pub struct ResolvedPlan {
    pub root: HopId,
    pub template: TemplateKind,
    pub region: BTreeSet<HopId>,
    pub chosen: BTreeMap<HopId, MemoEntry>,
}

/// Resolves the best fused plan rooted at `id`, or None when the hop stays a
/// basic operator.
pub fn resolve_plan(
    memo: &MemoTable,
    dag: &HopDag,
    cfg: &Config,
    id: HopId,
    filter: &RefFilter,
) -> Option<ResolvedPlan> {
    let entry = get_best(memo, dag, cfg, id, None, filter)?.clone();
    let mut region = BTreeSet::new();
    let mut chosen = BTreeMap::new();
    region.insert(id);
    chosen.insert(id, entry.clone());
    walk_refs(memo, dag, cfg, id, &entry, filter, &mut region, &mut chosen);
    Some(ResolvedPlan {
        root: id,
        template: entry.template,
        region,
        chosen,
    })
}

fn walk_refs(
    memo: &MemoTable,
    dag: &HopDag,
    cfg: &Config,
    id: HopId,
    entry: &MemoEntry,
    filter: &RefFilter,
    region: &mut BTreeSet<HopId>,
    chosen: &mut BTreeMap<HopId, MemoEntry>,
) {
    for (j, r) in entry.refs.iter().enumerate() {
        if *r == NO_REF {
            continue;
        }
        let input = dag.node(id).inputs[j];
        if region.contains(&input) {
            continue;
        }
        let sub = get_best(memo, dag, cfg, input, Some(entry.template), filter);
        let sub = match sub {
            Some(s) => s.clone(),
            // reference into a group whose entries were all filtered away:
            // treat as materialized input
            None => continue,
        };
        region.insert(input);
        chosen.insert(input, sub.clone());
        walk_refs(memo, dag, cfg, input, &sub, filter, region, chosen);
    }
}

/// Region implied by one entry during exploration (close-time validation).
fn entry_region(dag: &HopDag, memo: &MemoTable, id: HopId, entry: &MemoEntry) -> BTreeSet<HopId> {
    let mut region = BTreeSet::new();
    region.insert(id);
    let mut stack: Vec<(HopId, MemoEntry)> = vec![(id, entry.clone())];
    while let Some((n, e)) = stack.pop() {
        for (j, r) in e.refs.iter().enumerate() {
            if *r == NO_REF {
                continue;
            }
            let input = dag.node(n).inputs[j];
            if !region.insert(input) {
                continue;
            }
            // optimistic union over compatible referencable sub-entries
            for sub in memo.group(input) {
                if sub.closed.referencable() && e.template.compatible_child(sub.template) {
                    stack.push((input, sub.clone()));
                }
            }
        }
    }
    region
}

/// Deletes entries whose references cross severed edges; the remaining memo
/// drives CPlan construction.
pub fn apply_selection(memo: &mut MemoTable, dag: &HopDag, filter: &RefFilter) {
    let ids: Vec<HopId> = memo.groups.keys().copied().collect();
    for id in ids {
        let h = dag.node(id).clone();
        if let Some(entries) = memo.groups.get_mut(&id) {
            entries.retain(|e| filter.entry_valid(dag, &h, e));
            if entries.is_empty() {
                memo.groups.remove(&id);
            }
        }
    }
}

pub use templates::NON_FUSIBLE;
