//! Exact and Monte Carlo potential theory for two-dimensional lattice random
//! walks: step-law admission, exact evolution kernels (free and killed on a
//! finite set), the potential kernel, harmonic measure and related Green
//! functions, simulation estimators, and a verification harness comparing
//! exact finite-size quantities against their asymptotic predictions.

pub mod error;
pub mod grid;
pub mod harness;
pub mod harmonic;
pub mod kernels;
pub mod killed;
pub mod model;
pub mod montecarlo;
pub mod numerics;
pub mod potential;

pub use error::{Error, Result};
pub use harness::{
    predicted_value, ratio_series, run_experiment, ExperimentConfig, FreeKernel, LawId, ParamGrid,
    Params, RatioReport, RatioRow,
};
pub use harmonic::{green_singleton, KilledSystem, KillingSet};
pub use kernels::{evolve_free, FieldSlice, Window};
pub use killed::{
    escape_probability, evolve_killed, evolve_killed_captures, first_hitting_law,
    green_partial_sums, sigma_law_singleton, AbsorptionLog, EscapeSolve, GreenEstimate,
    KilledFieldSlice, SigmaLaw,
};
pub use montecarlo::{
    mc_confinement, mc_escape, mc_overshoot, mc_overshoot_tail, EstimateWithCI, SamplerConfig,
};
pub use potential::{potential_a, PotentialTable};
pub use model::{AnisotropicCoords, LatticePoint, StepLaw, SupportAtom, ORIGIN};
