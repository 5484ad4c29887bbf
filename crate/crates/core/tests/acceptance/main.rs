//! Acceptance gate: runs every criterion and prints one PASS/FAIL line each.
//!
//! Built with `harness = false`, so `cargo test` runs `main` directly.
//! Positional arguments select criteria by id substring, for example
//! `cargo test --test acceptance -- c07`. The toy training experiments use
//! reduced token budgets unless `DISTILL_ACCEPT_FULL=1` is set.

#[path = "../common/mod.rs"]
mod common;
mod criteria;
mod toy;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

/// `Ok(detail)` on pass, `Err(detail)` on failure.
pub type Outcome = Result<String, String>;

/// State shared between criteria; the toy experiments feed three of them.
#[derive(Default)]
pub struct Shared {
    toy: Option<Result<toy::Results, String>>,
}

impl Shared {
    pub fn toy(&mut self) -> Result<&toy::Results, String> {
        if self.toy.is_none() {
            self.toy = Some(toy::run_all().map_err(|e| format!("toy experiment failed: {e}")));
        }
        self.toy.as_ref().expect("just set").as_ref().map_err(Clone::clone)
    }
}

struct Criterion {
    id: &'static str,
    title: &'static str,
    run: fn(&mut Shared) -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: "c01", title: "gradient suite", run: criteria::gradients },
    Criterion { id: "c02", title: "causality", run: criteria::causality },
    Criterion { id: "c03", title: "truncation exactness", run: criteria::truncation },
    Criterion { id: "c04", title: "KD degeneracy", run: criteria::kd_degeneracy },
    Criterion { id: "c05", title: "FLOPs reproduction", run: criteria::flops_reproduction },
    Criterion { id: "c06", title: "drop-gap equivalence", run: criteria::drop_gap },
    Criterion { id: "c07", title: "toy recovery", run: toy::recovery },
    Criterion { id: "c08", title: "location ablation", run: toy::location },
    Criterion { id: "c09", title: "teacher-free vs KD", run: toy::headline },
    Criterion { id: "c10", title: "eval-harness oracle", run: criteria::eval_oracle },
    Criterion { id: "c11", title: "operational", run: criteria::operational },
];

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    match p.downcast::<String>() {
        Ok(s) => *s,
        Err(p) => p.downcast_ref::<&str>().map(|s| s.to_string()).unwrap_or_else(|| "panic".into()),
    }
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    let mut ran = 0;
    println!("\nacceptance criteria");
    for c in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| c.id.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| (c.run)(&mut shared)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(p))));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {}: {detail} [{secs:.1}s]", c.id, c.title),
            Err(detail) => {
                println!("FAIL {} {}: {detail} [{secs:.1}s]", c.id, c.title);
                failed.push(c.id);
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
