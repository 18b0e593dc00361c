//! Acceptance report: one PASS/FAIL/SKIP line per criterion. Exits non-zero
//! when any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::Outcome;

type Check = fn() -> Outcome;

fn main() -> ExitCode {
    let criteria: [(&str, Check); 10] = [
        ("mips-equals-nearest-neighbour", common::mips_equals_nn),
        ("gradient-oracle", common::gradient_oracle),
        ("matcher-learnability", common::learnability),
        ("vokenization-exactness", common::vokenization_exactness),
        ("revokenization", common::revokenization),
        ("loss-arithmetic", common::loss_arithmetic),
        ("statistics-properties", common::stats_properties),
        ("dataset-grounding-ratio", common::dataset_grounding),
        ("boltzmann-retrieval", common::boltzmann_retrieval),
        ("storage-round-trips", common::storage_round_trips),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let tag = match outcome {
            Outcome::Pass(_) => "PASS",
            Outcome::Fail(_) => {
                failed += 1;
                "FAIL"
            }
            Outcome::Skip(_) => "SKIP",
        };
        println!(
            "{tag} {name}: {} [{:.1}s]",
            outcome.detail(),
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} criteria, {failed} failed", criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
