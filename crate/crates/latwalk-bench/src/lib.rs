//! Shared fixtures for the benchmark suite.

use std::sync::Arc;

use latwalk_core::{KilledSystem, KillingSet, PotentialTable, StepLaw, ORIGIN};

/// The simple random walk law.
pub fn srw() -> StepLaw {
    StepLaw::builtin("srw").expect("builtin law")
}

/// Origin-singleton killed system for the simple random walk, with a small
/// solve radius so setup stays cheap.
pub fn srw_origin_system(base_radius: i64) -> KilledSystem {
    let set = KillingSet::new(&[ORIGIN]).expect("origin set");
    let table = Arc::new(PotentialTable::new(&srw(), 1e-10).expect("table"));
    KilledSystem::with_solve_radius(set, table, base_radius).expect("system")
}
