use fuseplan_core::config::Config;
use fuseplan_core::exec::{optimize_and_run, PlanCache};
use fuseplan_core::fuzz::{random_bindings, random_dag, FuzzParams};
use fuseplan_core::reference::reference_eval;

fn main() {
    let n: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let cfg = Config { outer_min_cells: 64, ..Config::default() };
    let mut bad = 0;
    for seed in 0..n {
        let fd = random_dag(seed, &FuzzParams::default());
        let bindings = random_bindings(&fd, seed, cfg.sparse_threshold);
        let reference = reference_eval(&fd.dag, &bindings).unwrap();
        let mut cache = PlanCache::new();
        match optimize_and_run(&fd.dag, &cfg, &bindings, &mut cache) {
            Ok((_, _, fused)) => {
                for (name, want) in &reference.outputs {
                    let err = want.max_rel_error(&fused.outputs[name]);
                    if err > 1e-9 {
                        println!("seed {seed} {name} err {err:e}");
                        bad += 1;
                    }
                }
            }
            Err(e) => {
                println!("seed {seed} ERROR {e}");
                bad += 1;
            }
        }
    }
    println!("done, {bad} failures / {n} seeds");
}
