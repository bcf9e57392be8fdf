//! End-to-end: parse -> explore -> select -> construct -> execute, checked
//! against the unfused reference interpreter.

mod common;

use common::*;
use fuseplan_core::config::{Config, SelectionMode};
use fuseplan_core::cplan::Variant;
use fuseplan_core::exec::{optimize_and_run, PlanCache};
use fuseplan_core::hop::LeafMeta;
use fuseplan_core::matrix::Matrix;
use fuseplan_core::reference::reference_eval;
use fuseplan_core::templates::TemplateKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn gen_bindings(
    meta: &[(&str, u64, u64, f64)],
    seed: u64,
) -> BTreeMap<String, Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (n, r, c, s) in meta {
        let m = if *s >= 1.0 {
            Matrix::rand_dense(*r as usize, *c as usize, &mut rng)
        } else {
            Matrix::rand_sparse(*r as usize, *c as usize, *s, &mut rng)
        };
        out.insert(n.to_string(), m);
    }
    out
}

fn check_equivalence(script: &str, meta: &[(&str, u64, u64, f64)], cfg: &Config, seed: u64, tol: f64) {
    let dag = build(script, meta);
    let bindings = gen_bindings(meta, seed);
    let reference = reference_eval(&dag, &bindings).expect("reference evaluates");
    let mut cache = PlanCache::new();
    let (_, _, result) = optimize_and_run(&dag, cfg, &bindings, &mut cache).expect("fused runs");
    for (name, want) in &reference.outputs {
        let got = &result.outputs[name];
        let err = want.max_rel_error(got);
        assert!(
            err <= tol,
            "{script}: output '{name}' deviates by {err:e} (seed {seed})"
        );
    }
}

fn small_cfg() -> Config {
    Config {
        outer_min_cells: 1,
        ..Config::default()
    }
}

#[test]
fn intermediates_chain_fused_matches_reference() {
    for seed in 0..5 {
        check_equivalence(
            INTERMEDIATES,
            &[("X", 17, 9, 1.0), ("Y", 17, 9, 1.0), ("Z", 17, 9, 1.0)],
            &Config::default(),
            seed,
            1e-9,
        );
    }
}

#[test]
fn single_pass_chain_fused_matches_reference() {
    for seed in 0..5 {
        check_equivalence(
            SINGLE_PASS,
            &[("X", 23, 7, 1.0), ("v", 7, 1, 1.0)],
            &Config::default(),
            seed,
            1e-9,
        );
    }
}

#[test]
fn multi_agg_fused_matches_reference() {
    for seed in 0..5 {
        check_equivalence(
            MULTI_AGG,
            &[("X", 19, 11, 1.0), ("Y", 19, 11, 1.0), ("Z", 19, 11, 0.3)],
            &Config::default(),
            seed,
            1e-9,
        );
    }
}

#[test]
fn sparse_outer_fused_matches_reference() {
    for seed in 0..5 {
        check_equivalence(
            SPARSE_OUTER,
            &[("X", 40, 30, 0.1), ("U", 40, 4, 1.0), ("V", 30, 4, 1.0)],
            &small_cfg(),
            seed,
            1e-6, // log in the chain
        );
    }
}

#[test]
fn factor_update_fused_matches_reference() {
    for seed in 0..5 {
        check_equivalence(
            FACTOR_UPDATE,
            &[
                ("X", 35, 25, 0.15),
                ("U", 35, 4, 1.0),
                ("V", 25, 4, 1.0),
                ("r", 35, 1, 1.0),
            ],
            &small_cfg(),
            seed,
            1e-9,
        );
    }
}

#[test]
fn logreg_fused_matches_reference() {
    // random 50x7 feature matrix, 3 classes-1
    let script = logreg_script(3);
    for seed in 0..5 {
        check_equivalence(
            &script,
            &[("X", 50, 7, 1.0), ("P", 50, 4, 1.0), ("v", 7, 3, 1.0)],
            &Config::default(),
            seed,
            1e-9,
        );
    }
}

#[test]
fn template_switch_fused_matches_reference() {
    for seed in 0..3 {
        check_equivalence(
            TEMPLATE_SWITCH,
            &[
                ("Y", 40, 30, 1.0),
                ("X", 40, 30, 0.1),
                ("U", 40, 4, 1.0),
                ("V", 30, 4, 1.0),
            ],
            &small_cfg(),
            seed,
            1e-9,
        );
    }
}

#[test]
fn sparse_inputs_match_dense_inputs() {
    // same logical values through both storages give identical results
    let meta = [("X", 20, 12, 0.3), ("Y", 20, 12, 1.0), ("Z", 20, 12, 1.0)];
    let dag = build(INTERMEDIATES, &meta);
    let bindings = gen_bindings(&meta, 7);
    let mut dense_b = bindings.clone();
    for (_, v) in dense_b.iter_mut() {
        *v = v.to_dense();
    }
    let r1 = reference_eval(&dag, &bindings).unwrap();
    let r2 = reference_eval(&dag, &dense_b).unwrap();
    for (k, v) in &r1.outputs {
        assert_eq!(
            v.get(0, 0).to_bits(),
            r2.outputs[k].get(0, 0).to_bits(),
            "bitwise equality across storages"
        );
    }
}

#[test]
fn trivial_sums() {
    // sum(X*Y*Z) with all-ones 2x2 inputs is 4, one pass per input,
    // no materialized intermediates
    let meta = [("X", 2, 2, 1.0), ("Y", 2, 2, 1.0), ("Z", 2, 2, 1.0)];
    let dag = build(INTERMEDIATES, &meta);
    let ones = Matrix::dense(2, 2, vec![1.0; 4]);
    let bindings: BTreeMap<String, Matrix> = ["X", "Y", "Z"]
        .iter()
        .map(|n| (n.to_string(), ones.clone()))
        .collect();
    let mut cache = PlanCache::new();
    let (_, cplans, result) =
        optimize_and_run(&dag, &Config::default(), &bindings, &mut cache).unwrap();
    assert_eq!(result.outputs["R"].as_scalar(), 4.0);
    assert_eq!(cplans.len(), 1);
    assert_eq!(result.intermediates, 0);
    assert_eq!(result.total.genexec_calls, 4);
    for n in ["X", "Y", "Z"] {
        assert_eq!(result.total.reads_of(n), 1, "single pass over {n}");
    }
}

#[test]
fn identity_chain() {
    // t(X) %*% (X %*% v) with X = identity is v itself
    let meta = [("X", 3, 3, 1.0), ("v", 3, 1, 1.0)];
    let dag = build(SINGLE_PASS, &meta);
    let eye = Matrix::dense(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let v = Matrix::dense(3, 1, vec![1.0, 2.0, 3.0]);
    let bindings: BTreeMap<String, Matrix> =
        [("X".to_string(), eye), ("v".to_string(), v)].into();
    let r = reference_eval(&dag, &bindings).unwrap();
    assert_eq!(r.outputs["R"].dense_data(), &[1.0, 2.0, 3.0]);
    let mut cache = PlanCache::new();
    let (_, _, fused) =
        optimize_and_run(&dag, &Config::default(), &bindings, &mut cache).unwrap();
    assert_eq!(fused.outputs["R"].dense_data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn single_pass_reads_x_once_fused_twice_unfused() {
    let meta = [("X", 30, 8, 1.0), ("v", 8, 1, 1.0)];
    let dag = build(SINGLE_PASS, &meta);
    let bindings = gen_bindings(&meta, 3);
    let reference = reference_eval(&dag, &bindings).unwrap();
    assert_eq!(reference.counters.reads_of("X"), 2);
    let mut cache = PlanCache::new();
    let (_, cplans, result) =
        optimize_and_run(&dag, &Config::default(), &bindings, &mut cache).unwrap();
    assert_eq!(cplans.len(), 1, "one fused operator covers the chain");
    assert_eq!(result.total.reads_of("X"), 1);
}

#[test]
fn multi_agg_consolidation_reads_x_once() {
    let meta = [("X", 25, 10, 1.0), ("Y", 25, 10, 1.0), ("Z", 25, 10, 1.0)];
    let dag = build(MULTI_AGG, &meta);
    let bindings = gen_bindings(&meta, 5);

    let mut cache = PlanCache::new();
    let (_, cplans, result) =
        optimize_and_run(&dag, &Config::default(), &bindings, &mut cache).unwrap();
    let magg: Vec<_> = cplans
        .iter()
        .filter(|p| p.template == TemplateKind::MultiAgg)
        .collect();
    assert_eq!(magg.len(), 1, "cost-based selection compiles one multi-aggregate");
    assert_eq!(magg[0].out_hops.len(), 2);
    assert_eq!(result.total.reads_of("X"), 1);

    // fuse-all keeps two separate aggregates, reading X twice
    let cfg_fa = Config {
        selection_mode: SelectionMode::FuseAll,
        ..Config::default()
    };
    let mut cache = PlanCache::new();
    let (_, cplans_fa, result_fa) =
        optimize_and_run(&dag, &cfg_fa, &bindings, &mut cache).unwrap();
    assert!(cplans_fa
        .iter()
        .all(|p| p.template != TemplateKind::MultiAgg));
    assert_eq!(result_fa.total.reads_of("X"), 2);

    // and both agree numerically
    for k in ["a", "b"] {
        assert!(result.outputs[k].max_rel_error(&result_fa.outputs[k]) <= 1e-9);
    }
}

#[test]
fn factor_update_constructs_outer_and_cell_plans() {
    let cfg = small_cfg();
    let meta = [
        ("X", 2000, 1500, 0.01),
        ("U", 2000, 20, 1.0),
        ("V", 1500, 20, 1.0),
        ("r", 2000, 1, 1.0),
    ];
    let dag = build(FACTOR_UPDATE, &meta);
    let mut memo = fuseplan_core::explore::ofmc_explore(&dag, &cfg);
    let sel = fuseplan_core::select::select_plans(&mut memo, &dag, &cfg);
    let cplans =
        fuseplan_core::cplan::construct_cplans(&dag, &memo, &cfg, &sel.filter, sel.mode).unwrap();
    assert_eq!(cplans.len(), 2, "outer chain plus cell epilogue");
    let outer = cplans
        .iter()
        .find(|p| p.template == TemplateKind::Outer)
        .expect("outer operator survives cost-based selection");
    assert!(matches!(outer.variant, Variant::OuterRightMm(_)));
    assert_eq!(outer.main.name, "X");
    let cell = cplans
        .iter()
        .find(|p| p.template == TemplateKind::Cell)
        .expect("cell epilogue");
    assert!(matches!(cell.variant, Variant::CellNoAgg));
}

#[test]
fn logreg_single_row_plan_with_ring_buffer_of_five() {
    let cfg = Config::default();
    let meta = logreg_meta(200, 50, 2);
    let dag = build(LOGREG_INNER, &meta);
    let mut memo = fuseplan_core::explore::ofmc_explore(&dag, &cfg);
    let sel = fuseplan_core::select::select_plans(&mut memo, &dag, &cfg);
    let cplans =
        fuseplan_core::cplan::construct_cplans(&dag, &memo, &cfg, &sel.filter, sel.mode).unwrap();
    assert_eq!(cplans.len(), 1, "the whole expression fuses into one operator");
    let row = &cplans[0];
    assert_eq!(row.template, TemplateKind::Row);
    assert!(matches!(row.variant, Variant::RowColTAgg));
    assert_eq!(row.main.name, "X");
    assert_eq!(row.ring_buffer_size, 5);
    // six large intermediates eliminated (covered non-root non-reorg nodes)
    let eliminated = row
        .covered
        .iter()
        .filter(|&&h| {
            h != row.out_hops[0]
                && dag.node(h).op != fuseplan_core::hop::Op::Transpose
        })
        .count();
    assert_eq!(eliminated, 6);
}

#[test]
fn plan_cache_hits_on_reoptimization() {
    let meta = logreg_meta(30, 6, 2);
    let dag = build(LOGREG_INNER, &meta);
    let bindings = gen_bindings(&meta, 11);
    let cfg = Config::default();
    let mut cache = PlanCache::new();
    let (_, cplans1, _) = optimize_and_run(&dag, &cfg, &bindings, &mut cache).unwrap();
    assert_eq!(cache.hits, 0);
    let misses_first = cache.misses;
    let (_, cplans2, _) = optimize_and_run(&dag, &cfg, &bindings, &mut cache).unwrap();
    assert_eq!(cache.misses, misses_first, "second pass is 100% cache hits");
    assert_eq!(cache.hits, misses_first);
    // bit-identical emitted source
    let src1: Vec<String> = cplans1.iter().map(fuseplan_core::emit::emit_source).collect();
    let src2: Vec<String> = cplans2.iter().map(fuseplan_core::emit::emit_source).collect();
    assert_eq!(src1, src2);
}

#[test]
fn emitted_source_matches_row_primitive_sequence() {
    let cfg = Config::default();
    let meta = logreg_meta(200, 50, 2);
    let dag = build(LOGREG_INNER, &meta);
    let mut memo = fuseplan_core::explore::ofmc_explore(&dag, &cfg);
    let sel = fuseplan_core::select::select_plans(&mut memo, &dag, &cfg);
    let cplans =
        fuseplan_core::cplan::construct_cplans(&dag, &memo, &cfg, &sel.filter, sel.mode).unwrap();
    let src = fuseplan_core::emit::emit_source(&cplans[0]);
    let expected = [
        "getVector",
        "vectMatMult",
        "vectMult",
        "vectSum",
        "vectMult",
        "vectMinus",
        "vectOuterMultAdd",
    ];
    let mut pos = 0;
    for prim in expected {
        let found = src[pos..]
            .find(prim)
            .unwrap_or_else(|| panic!("primitive {prim} missing after {pos} in:\n{src}"));
        pos += found + prim.len();
    }
}

#[test]
fn sparse_safe_matches_forced_dense() {
    // marking sparse-safe never changes results vs dense iteration over the
    // same logical values
    let meta = [("X", 30, 20, 0.2), ("Y", 30, 20, 1.0), ("Z", 30, 20, 1.0)];
    let dag = build(INTERMEDIATES, &meta);
    let sparse_b = gen_bindings(&meta, 9);
    let mut dense_b = sparse_b.clone();
    for v in dense_b.values_mut() {
        *v = v.to_dense();
    }
    let cfg = Config::default();
    let mut cache = PlanCache::new();
    let (_, _, r_sparse) = optimize_and_run(&dag, &cfg, &sparse_b, &mut cache).unwrap();
    let (_, _, r_dense) = optimize_and_run(&dag, &cfg, &dense_b, &mut cache).unwrap();
    assert_eq!(
        r_sparse.outputs["R"].as_scalar().to_bits(),
        r_dense.outputs["R"].as_scalar().to_bits()
    );
}
