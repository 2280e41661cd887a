//! Solves the hindsight model of each held-out desk episode and prints node
//! counts and times. Usage: `hindsight_sweep [start] [end]`.

use std::time::Instant;

use ppa_dagger::generate::GenConfig;
use ppa_dagger::harness::EvalConfig;
use ppa_dagger::milp::{build_ppa_model, solve_mip, SolveLimits};
use ppa_dagger::ppa::CostParams;

fn main() {
    let start: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let end: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let gen = GenConfig::desk();
    let params = CostParams::desk();
    let eval = EvalConfig::default();
    let all = Instant::now();
    for e in start..end {
        let ep = eval.episode(&gen, e);
        let m = build_ppa_model(&ep.patients, &params.fresh_residual(), &params).unwrap();
        let t = Instant::now();
        let s = solve_mip(&m.model, &SolveLimits::default().with_time_limit(600.0)).unwrap();
        println!(
            "ep {e} K {} obj {} nodes {} {:.2}s {:?}",
            ep.patients.len(),
            s.objective,
            s.stats.nodes,
            t.elapsed().as_secs_f64(),
            s.status
        );
    }
    println!("total {:.1}s", all.elapsed().as_secs_f64());
}
