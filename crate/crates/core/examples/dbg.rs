use fuseplan_core::config::Config;
use fuseplan_core::exec::{optimize_and_run, PlanCache};
use fuseplan_core::fuzz::{random_bindings, random_dag, FuzzParams};
use fuseplan_core::reference::reference_eval;

fn main() {
    let seed: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let which = std::env::args().nth(2);
    let fd = random_dag(seed, &FuzzParams::default());
    println!("{}", fuseplan_core::parser::unparse(&fd.dag));
    for h in fd.dag.nodes() {
        println!("{} {} inputs {:?} {} s={:.4} consumers {:?}", h.id, h.op.mnemonic(), h.inputs, h.dims, h.sparsity, fd.dag.consumers(h.id));
    }
    let cfg = Config { outer_min_cells: 64, ..Config::default() };
    let bindings = random_bindings(&fd, seed, cfg.sparse_threshold);
    let reference = reference_eval(&fd.dag, &bindings).unwrap();
    let mut cache = PlanCache::new();
    let (_sel, cplans, fused) = optimize_and_run(&fd.dag, &cfg, &bindings, &mut cache).unwrap();
    for p in &cplans {
        println!("PLAN {:?} {} main={}#{} out={:?} covered={:?} sides={:?}", p.template, p.variant_name(), p.main.name, p.main.hop, p.out_hops, p.covered, p.sides.iter().map(|s| format!("{}#{}", s.name, s.hop)).collect::<Vec<_>>());
        if which.is_some() {
            println!("{}", fuseplan_core::emit::emit_source(p));
        }
    }
    for (name, want) in &reference.outputs {
        let got = &fused.outputs[name];
        let err = want.max_rel_error(got);
        println!("{name}: err={err:e}");
        if err > 1e-9 && which.is_some() {
            for r in 0..want.rows().min(6) {
                for c in 0..want.cols().min(6) {
                    print!("({:.3},{:.3}) ", want.get(r,c), got.get(r,c));
                }
                println!();
            }
        }
    }
}
