//! Acceptance suite: one pass/fail line per criterion.
//!
//! Run everything with `cargo test --release -p codegan-core --test acceptance`,
//! or pick criteria by number: `... --test acceptance -- 1 2 3`.

mod baselines;
mod oracles;
mod support;
mod training;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use support::{Check, Shared};

type Criterion = (u32, &'static str, fn(&mut Shared) -> Check);

const CRITERIA: [Criterion; 10] = [
    (1, "warp oracles", oracles::warp_oracles),
    (2, "gradient checks", oracles::gradient_checks),
    (3, "loss closed forms", oracles::loss_closed_forms),
    (4, "spatial transformer", training::spatial_transformer),
    (5, "inpainting", training::inpainting),
    (6, "paired end-to-end run", training::paired_run),
    (7, "unpaired pipeline", training::unpaired_run),
    (8, "example-specific refinement", training::refinement),
    (9, "determinism", baselines::determinism),
    (
        10,
        "nearest-neighbour baseline",
        baselines::nearest_neighbour,
    ),
];

fn main() -> ExitCode {
    let selected: BTreeSet<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut shared = Shared::default();
    let mut failures = 0;
    let mut ran = 0;
    for (id, name, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(|| check(&mut shared))) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => support::Outcome::fail(format!("error: {e}")),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                support::Outcome::fail(format!("panicked: {msg}"))
            }
        };
        if !outcome.pass {
            failures += 1;
        }
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] {id} {name}: {} ({:.1}s)",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
