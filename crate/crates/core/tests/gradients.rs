//! Finite-difference suites for every differentiable block.

use std::time::Instant;

use attnmask::gradsuite::{run_group, SuiteGroup, SUITE_SEEDS};

#[test]
fn all_suites_pass_over_twenty_seeds() {
    let start = Instant::now();
    let mut failed = Vec::new();
    for group in SuiteGroup::ALL {
        for o in run_group(group, SUITE_SEEDS).unwrap() {
            println!(
                "{:<14} seeds={} failures={} redraws={} worst={:.3e} (seed {}, input {:?})",
                o.name, o.seeds, o.failures, o.redraws, o.worst.max_rel_err, o.worst_seed, o.worst.worst
            );
            if !o.passed() {
                failed.push(o.name.clone());
            }
        }
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    assert!(failed.is_empty(), "failing suites: {failed:?}");
}
