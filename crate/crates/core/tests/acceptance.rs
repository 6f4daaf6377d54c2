//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion.
//! Failures are reported but only fail the process when
//! `STEP_ACCEPTANCE_STRICT=1`, so a workspace test run still reaches the
//! remaining targets.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::Outcome;

const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn report(results: &mut Vec<bool>, n: usize, role: &str, outcome: Outcome, started: Instant) {
    let status = if outcome.passed { "PASS" } else { "FAIL" };
    println!(
        "criterion {n} ({role}): {status}: {} [{:.1}s]",
        outcome.detail,
        started.elapsed().as_secs_f64()
    );
    results.push(outcome.passed);
}

fn main() -> ExitCode {
    let mut results = Vec::new();

    let t = Instant::now();
    report(&mut results, 1, "gradient integrity", common::grad_check(&[0, 1, 2]), t);

    let t = Instant::now();
    report(&mut results, 2, "mining oracle", common::mining_oracle(1000), t);

    let t = Instant::now();
    report(&mut results, 3, "curriculum schedule", common::curriculum_exact(100), t);

    let data = common::synthetic_dataset();
    let first = common::train_default(&data, 0);

    let t = Instant::now();
    report(&mut results, 4, "frozen model contract", common::frozen_contract(&data, &first), t);

    let t = Instant::now();
    let second = common::train_default(&data, 0);
    report(&mut results, 5, "determinism", common::determinism(&first, &second), t);

    let t = Instant::now();
    report(&mut results, 6, "end-to-end learnability", common::learnability(&data, &first), t);

    let t = Instant::now();
    let (means, per_seed) = common::ablation_table(&data, &ABLATION_SEEDS);
    println!("ablation recall@1 per seed:");
    for (seed, rows) in ABLATION_SEEDS.iter().zip(&per_seed) {
        let cells: Vec<String> = rows.iter().map(|r| format!("{} {:.3}", r.model, r.recall_at_1)).collect();
        println!("  seed {seed}: {}", cells.join(", "));
    }
    report(&mut results, 7, "ablation ordering", common::ablation_ordering(&means), t);

    let t = Instant::now();
    report(&mut results, 8, "metric correctness", common::metric_oracles(200), t);

    let t = Instant::now();
    report(&mut results, 9, "secondary fusion degeneracy", common::lambda_zero_degeneracy(&data, 40), t);

    let t = Instant::now();
    report(&mut results, 10, "rgcn permutation equivariance", common::permutation_equivariance(100), t);

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    let strict = std::env::var("STEP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if passed == results.len() || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
