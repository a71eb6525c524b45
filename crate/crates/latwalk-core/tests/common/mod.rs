//! Shared fixtures for the integration suites.
//!
//! Each test binary compiles its own copy and uses a different subset of
//! these helpers, so the unused-item lint is silenced here.
#![allow(dead_code)]

use std::sync::Arc;

use latwalk_core::{KilledSystem, KillingSet, LatticePoint, PotentialTable, StepLaw};

pub fn p(x1: i64, x2: i64) -> LatticePoint {
    LatticePoint { x1, x2 }
}

pub fn law(name: &str) -> StepLaw {
    StepLaw::builtin(name).expect("builtin law")
}

pub fn table(law: &StepLaw, tol: f64) -> Arc<PotentialTable> {
    Arc::new(PotentialTable::new(law, tol).expect("potential table"))
}

pub fn system(table: Arc<PotentialTable>, points: &[LatticePoint], base: i64) -> KilledSystem {
    let set = KillingSet::new(points).expect("killing set");
    KilledSystem::with_solve_radius(set, table, base).expect("killed system")
}

/// Dense copy of the potential kernel on the square `[-half, half]^2`,
/// indexed by `dense_idx`; turns per-point quadrature lookups into array
/// reads for the exhaustive identity scans.
pub fn dense_a(table: &PotentialTable, half: i64) -> Vec<f64> {
    let side = (2 * half + 1) as usize;
    let mut out = vec![0.0; side * side];
    for d2 in -half..=half {
        for d1 in -half..=half {
            out[dense_idx(d1, d2, half)] = table.a(p(d1, d2)).expect("a(x)");
        }
    }
    out
}

pub fn dense_idx(d1: i64, d2: i64, half: i64) -> usize {
    let side = (2 * half + 1) as usize;
    (d2 + half) as usize * side + (d1 + half) as usize
}
