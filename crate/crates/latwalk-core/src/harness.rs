//! Comparison harness: exact finite-horizon quantities next to their
//! asymptotic predictions.
//!
//! Each supported comparison law pairs an exact quantity of the killed walk
//! (computed by dynamic programming or a truncated solve) with a closed-form
//! prediction built from the potential-theoretic constants of the step law.
//! [`ratio_series`] evaluates both along a parameter grid and reports the
//! exact/predicted ratios; [`run_experiment`] persists a reproducible bundle
//! (config echo, CSV, JSON report, manifest) for one configured series.

use std::fmt;
use std::io::Write as IoWrite;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use dashmap::DashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonic::{KilledSystem, KillingSet};
use crate::kernels::{evolve_free, FieldSlice};
use crate::killed::{
    escape_probability, evolve_killed, evolve_killed_captures, ABSORPTION_LOG_HORIZON,
    ABSORPTION_LOG_MAX_SET,
};
use crate::model::{LatticePoint, StepLaw, ORIGIN};
use crate::numerics::{exp_e1, KahanSum};
use crate::potential::PotentialTable;

/// Default admissibility margin for diffusive-regime laws: grid rows must
/// satisfy `max(|x|, |y|) < margin * sqrt(n)`.
pub const DEFAULT_REGIME_MARGIN: f64 = 4.0;

/// Identifier of one comparison law understood by the harness.
///
/// The identifiers are opaque report labels (they appear verbatim in CLI
/// arguments, CSV rows, and manifests); each maps to a fixed pairing of an
/// exact quantity with its asymptotic prediction, documented on
/// [`predicted_value`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum LawId {
    /// Kernel of the killed walk between two fixed points, diffusive regime.
    #[serde(rename = "THM1")]
    Thm1,
    /// Joint law of the hitting time and hitting point.
    #[serde(rename = "COR1")]
    Cor1,
    /// Escape probability to a large circle before hitting the set.
    #[serde(rename = "PROP1_ESCAPE")]
    Prop1Escape,
    /// Return-time law of the origin singleton at a fixed nearby start.
    #[serde(rename = "LEM1_RETURN")]
    Lem1Return,
    /// Hitting-time law of the origin singleton from a far (but diffusive)
    /// start.
    #[serde(rename = "LEM1_FAR")]
    Lem1Far,
    /// Cumulative hitting probability of the origin singleton.
    #[serde(rename = "LEM3_CDF")]
    Lem3Cdf,
    /// Killed kernel far from the set, where killing is negligible.
    #[serde(rename = "PROP3_FREE")]
    Prop3Free,
    /// Killed kernel with the start near the set and the target diffusive.
    #[serde(rename = "PROP4_HALF")]
    Prop4Half,
    /// Marginal law of the hitting time (hitting point summed out).
    #[serde(rename = "SIGMA_MARGINAL")]
    SigmaMarginal,
}

impl LawId {
    /// Every supported identifier, in report order.
    pub const ALL: [LawId; 9] = [
        LawId::Thm1,
        LawId::Cor1,
        LawId::Prop1Escape,
        LawId::Lem1Return,
        LawId::Lem1Far,
        LawId::Lem3Cdf,
        LawId::Prop3Free,
        LawId::Prop4Half,
        LawId::SigmaMarginal,
    ];

    /// The report label, as it appears in CSV rows and CLI arguments.
    pub fn as_str(self) -> &'static str {
        match self {
            LawId::Thm1 => "THM1",
            LawId::Cor1 => "COR1",
            LawId::Prop1Escape => "PROP1_ESCAPE",
            LawId::Lem1Return => "LEM1_RETURN",
            LawId::Lem1Far => "LEM1_FAR",
            LawId::Lem3Cdf => "LEM3_CDF",
            LawId::Prop3Free => "PROP3_FREE",
            LawId::Prop4Half => "PROP4_HALF",
            LawId::SigmaMarginal => "SIGMA_MARGINAL",
        }
    }

    /// Whether the scale parameter is a truncation radius (`R`) rather than a
    /// step count (`n`).
    pub fn scale_is_radius(self) -> bool {
        matches!(self, LawId::Prop1Escape)
    }

    /// Whether the law takes a target point `y` in addition to the start.
    pub fn takes_target(self) -> bool {
        matches!(
            self,
            LawId::Thm1 | LawId::Cor1 | LawId::Prop3Free | LawId::Prop4Half
        )
    }

    /// Whether the prediction involves a free-kernel factor `p^n(.)`.
    fn needs_free_kernel(self) -> bool {
        matches!(
            self,
            LawId::Thm1
                | LawId::Cor1
                | LawId::Lem1Far
                | LawId::Prop3Free
                | LawId::Prop4Half
                | LawId::SigmaMarginal
        )
    }

    /// Whether the law is defined only for the origin singleton set.
    fn requires_origin_singleton(self) -> bool {
        matches!(self, LawId::Lem1Return | LawId::Lem1Far | LawId::Lem3Cdf)
    }
}

impl fmt::Display for LawId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LawId {
    type Err = Error;

    fn from_str(s: &str) -> Result<LawId> {
        LawId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| {
                Error::ConfigInvalid(format!(
                    "unknown law id {s:?}; expected one of {}",
                    LawId::ALL.map(LawId::as_str).join(", ")
                ))
            })
    }
}

/// One parameter point of a comparison law: the scale (`n` or `R`), the start
/// `x`, and the target `y` where the law takes one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Params {
    /// Step count `n`, or truncation radius `R` for radius-scaled laws.
    pub scale: u64,
    /// Start point of the walk.
    pub x: LatticePoint,
    /// Target point (kernel target, or hitting point for joint laws).
    pub y: Option<LatticePoint>,
}

/// A parameter grid for [`ratio_series`]: one `(x, y)` pair swept over a
/// sorted list of scales.
#[derive(Clone, Debug)]
pub struct ParamGrid {
    scales: Vec<u64>,
    /// Start point shared by every row.
    pub x: LatticePoint,
    /// Target point shared by every row, where the law takes one.
    pub y: Option<LatticePoint>,
    /// Diffusive-regime admissibility margin (see [`DEFAULT_REGIME_MARGIN`]).
    pub regime_margin: f64,
}

impl ParamGrid {
    /// Build a grid from raw scales (sorted and deduplicated here) and the
    /// common start/target pair.
    pub fn new(scales: &[u64], x: LatticePoint, y: Option<LatticePoint>) -> Result<ParamGrid> {
        let mut s = scales.to_vec();
        s.sort_unstable();
        s.dedup();
        if s.is_empty() {
            return Err(Error::ConfigInvalid("parameter grid is empty".into()));
        }
        if s[0] < 2 {
            return Err(Error::ConfigInvalid(format!(
                "grid scales must be at least 2, got {}",
                s[0]
            )));
        }
        Ok(ParamGrid {
            scales: s,
            x,
            y,
            regime_margin: DEFAULT_REGIME_MARGIN,
        })
    }

    /// Replace the regime margin (must be positive).
    pub fn with_regime_margin(mut self, margin: f64) -> Result<ParamGrid> {
        if !(margin > 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "regime margin must be positive, got {margin}"
            )));
        }
        self.regime_margin = margin;
        Ok(self)
    }

    /// The sorted, deduplicated scales.
    pub fn scales(&self) -> &[u64] {
        &self.scales
    }
}

/// Cache of free-walk kernels `p^n(.)` from the origin, shared process-wide.
///
/// Each horizon is evolved in its own default window so a slice's bytes
/// depend only on the law and `n`, never on which other horizons happen to be
/// requested together with it.
static FREE_SLICES: OnceLock<DashMap<(String, u64), Arc<FieldSlice>>> = OnceLock::new();

/// Free-walk transition kernels from the origin at a fixed set of horizons.
#[derive(Clone, Debug)]
pub struct FreeKernel {
    slices: Vec<(u64, Arc<FieldSlice>)>,
}

impl FreeKernel {
    /// Compute (or fetch from the process-wide cache) the kernels at every
    /// horizon in `ns`.
    pub fn build(law: &StepLaw, ns: &[u64]) -> Result<FreeKernel> {
        let cache = FREE_SLICES.get_or_init(DashMap::new);
        let mut wanted = ns.to_vec();
        wanted.sort_unstable();
        wanted.dedup();
        let mut slices = Vec::with_capacity(wanted.len());
        for n in wanted {
            let key = (law.hash().to_string(), n);
            let slice = match cache.get(&key) {
                Some(hit) => Arc::clone(&hit),
                None => {
                    let run = evolve_free(law, ORIGIN, None, &[n])?;
                    let fresh = Arc::new(run.into_iter().next().expect("one capture requested"));
                    cache.insert(key, Arc::clone(&fresh));
                    fresh
                }
            };
            slices.push((n, slice));
        }
        Ok(FreeKernel { slices })
    }

    /// Kernel value `p^n(dz)` for a displacement `dz` from the origin.
    ///
    /// `n` must be one of the horizons the kernel was built for.
    pub fn value(&self, n: u64, dz: LatticePoint) -> f64 {
        let i = self
            .slices
            .binary_search_by_key(&n, |&(m, _)| m)
            .expect("horizon was requested at build time");
        self.slices[i].1.value(dz)
    }
}

/// Whether `p^n(dz)` vanishes identically because the walk alternates between
/// the two parity classes of the lattice.
pub fn parity_vanishes(law: &StepLaw, n: u64, dz: LatticePoint) -> bool {
    law.is_bipartite() && dz.parity() != (n % 2) as u8
}

/// Closed-form asymptotic prediction for comparison law `id` at `params`.
///
/// Writing `k` for the potential-scale constant of the step law, `u` for the
/// equilibrium weight of the killing set, `u^` for the weight of the reflected
/// set under the reflected law, `nu` for the period, and `p^n` for the free
/// kernel, the predictions are:
///
/// | id              | prediction                                        |
/// |-----------------|---------------------------------------------------|
/// | `THM1`          | `4 k^2 u(x) u^(-y) (ln n)^-2 p^n(y - x)`          |
/// | `COR1`          | `4 k^2 u(x) u^(-y) (ln n)^-2 p^n(y - x)`, `y` in the set |
/// | `PROP1_ESCAPE`  | `k u(x) / ln R`                                   |
/// | `LEM1_RETURN`   | `2 nu k u(x) / (n (ln n)^2)`                      |
/// | `LEM1_FAR`      | `4 k (ln|x|) (ln n)^-2 p^n(-x)`                   |
/// | `LEM3_CDF`      | `E1(|x~|^2 / (2 s^2 n)) / ln n`                   |
/// | `PROP3_FREE`    | `p^n(y - x)`                                      |
/// | `PROP4_HALF`    | `2 k u(x) (ln n)^-1 p^n(y - x)`                   |
/// | `SIGMA_MARGINAL`| `4 k^2 u(x) (ln n)^-2 p^n(-x)`                    |
///
/// where `|x~|` is the isotropized norm of `x`, `s^2` the per-axis variance
/// after isotropization, and `E1` the exponential integral. Natural
/// logarithms throughout.
///
/// Returns [`Error::ParityZero`] when the free-kernel factor vanishes because
/// of parity, so callers can skip the row rather than divide by zero.
pub fn predicted_value(id: LawId, sys: &KilledSystem, params: &Params) -> Result<f64> {
    let free = if id.needs_free_kernel() {
        Some(FreeKernel::build(sys.law(), &[params.scale])?)
    } else {
        None
    };
    predicted_with(id, sys, params, free.as_ref())
}

fn predicted_with(
    id: LawId,
    sys: &KilledSystem,
    params: &Params,
    free: Option<&FreeKernel>,
) -> Result<f64> {
    validate_params(id, sys, params)?;
    let law = sys.law();
    let k = law.kappa();
    let n = params.scale;
    let x = params.x;
    let ln_n = (n as f64).ln();

    // Free-kernel factor with its displacement, for the laws that have one.
    let kernel_factor = |dz: LatticePoint| -> Result<f64> {
        if parity_vanishes(law, n, dz) {
            return Err(Error::ParityZero);
        }
        let p = free
            .expect("free kernel supplied for kernel-factor laws")
            .value(n, dz);
        if !(p > 0.0) {
            return Err(Error::InvariantViolation(format!(
                "free kernel vanished at n={n}, displacement ({}, {}) without a parity reason",
                dz.x1, dz.x2
            )));
        }
        Ok(p)
    };

    match id {
        LawId::Thm1 | LawId::Cor1 => {
            let y = params.y.expect("validated");
            let p = kernel_factor(y - x)?;
            let u = sys.u(x)?;
            let u_dual = sys.dual_system()?.u(-y)?;
            Ok(4.0 * k * k * u * u_dual / (ln_n * ln_n) * p)
        }
        LawId::Prop1Escape => {
            let u = sys.u(x)?;
            Ok(k * u / ln_n)
        }
        LawId::Lem1Return => {
            let u = sys.u(x)?;
            let nu = law.period() as f64;
            Ok(2.0 * nu * k * u / (n as f64 * ln_n * ln_n))
        }
        LawId::Lem1Far => {
            let p = kernel_factor(-x)?;
            Ok(4.0 * k * x.norm().ln() / (ln_n * ln_n) * p)
        }
        LawId::Lem3Cdf => {
            let s_sq = law.sigma() * law.sigma();
            let arg = law.tilde_norm(x).powi(2) / (2.0 * s_sq * n as f64);
            Ok(exp_e1(arg) / ln_n)
        }
        LawId::Prop3Free => kernel_factor(params.y.expect("validated") - x),
        LawId::Prop4Half => {
            let p = kernel_factor(params.y.expect("validated") - x)?;
            let u = sys.u(x)?;
            Ok(2.0 * k * u / ln_n * p)
        }
        LawId::SigmaMarginal => {
            let p = kernel_factor(-x)?;
            let u = sys.u(x)?;
            Ok(4.0 * k * k * u / (ln_n * ln_n) * p)
        }
    }
}

fn validate_params(id: LawId, sys: &KilledSystem, params: &Params) -> Result<()> {
    if params.scale < 2 {
        return Err(Error::ConfigInvalid(format!(
            "scale must be at least 2, got {}",
            params.scale
        )));
    }
    match (id.takes_target(), params.y) {
        (true, None) => {
            return Err(Error::ConfigInvalid(format!(
                "law {id} requires a target point y"
            )));
        }
        (false, Some(_)) => {
            return Err(Error::ConfigInvalid(format!(
                "law {id} does not take a target point y"
            )));
        }
        _ => {}
    }
    if id == LawId::Cor1 {
        let xi = params.y.expect("checked above");
        if !sys.set().contains(xi) {
            return Err(Error::ConfigInvalid(format!(
                "hitting point ({}, {}) is not in the killing set",
                xi.x1, xi.x2
            )));
        }
    }
    if id.requires_origin_singleton() && !sys.set().is_singleton_at_origin() {
        return Err(Error::ConfigInvalid(format!(
            "law {id} is defined for the origin singleton set only"
        )));
    }
    if id == LawId::Lem1Far && params.x.norm_sq() < 4 {
        return Err(Error::ConfigInvalid(
            "far-regime start must satisfy |x| >= 2".into(),
        ));
    }
    if id == LawId::Lem3Cdf && params.x.is_origin() {
        return Err(Error::ConfigInvalid(
            "cumulative hitting law needs a start away from the origin".into(),
        ));
    }
    Ok(())
}

/// Regime admissibility of a single grid row: diffusive-regime laws require
/// `max(|x|, |y|) < margin * sqrt(n)`; the far-kernel law requires the
/// opposite (`min(|x|, |y|) >= sqrt(n)`); escape requires `|x| < R`.
fn check_regime(id: LawId, scale: u64, x: LatticePoint, y: Option<LatticePoint>, margin: f64) -> Result<()> {
    let xn = x.norm();
    let yn = y.map_or(xn, LatticePoint::norm);
    match id {
        LawId::Prop1Escape => {
            if xn >= scale as f64 {
                return Err(Error::ConfigInvalid(format!(
                    "start |x| = {xn:.1} does not lie inside the escape circle R = {scale}"
                )));
            }
        }
        LawId::Prop3Free => {
            let floor = (scale as f64).sqrt();
            if xn.min(yn) < floor {
                return Err(Error::ConfigInvalid(format!(
                    "far-kernel regime needs min(|x|, |y|) >= sqrt(n) = {floor:.1} at n = {scale}"
                )));
            }
        }
        _ => {
            let cap = margin * (scale as f64).sqrt();
            if xn.max(yn) >= cap {
                return Err(Error::ConfigInvalid(format!(
                    "grid row at n = {scale} leaves the diffusive regime: \
                     max(|x|, |y|) = {:.1} >= {margin} * sqrt(n) = {cap:.1}",
                    xn.max(yn)
                )));
            }
        }
    }
    Ok(())
}

/// One emitted comparison row.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RatioRow {
    /// Scale parameter (step count `n`, or radius `R` for escape).
    pub scale: u64,
    /// Start point.
    pub x: LatticePoint,
    /// Target point, where the law takes one.
    pub y: Option<LatticePoint>,
    /// Exact finite-horizon value.
    pub exact: f64,
    /// Asymptotic prediction.
    pub predicted: f64,
    /// `exact / predicted`.
    pub ratio: f64,
}

/// A grid row that was omitted from the table, with the reason.
#[derive(Clone, Debug, Serialize)]
pub struct SkippedRow {
    /// Scale parameter of the omitted row.
    pub scale: u64,
    /// Human-readable reason for the omission.
    pub reason: String,
}

/// Provenance and tolerances of a [`RatioReport`].
#[derive(Clone, Debug, Serialize)]
pub struct ReportMetadata {
    /// Canonical hash of the step law.
    pub law_hash: String,
    /// Seed echoed from the experiment config (unused by exact series).
    pub seed: u64,
    /// Residual tolerance of the truncated harmonic solves.
    pub solver_tolerance: f64,
    /// Absolute tolerance of the potential-kernel quadrature.
    pub potential_tolerance: f64,
    /// Regime margin the grid was validated against.
    pub regime_margin: f64,
    /// Wall-clock duration of the series in milliseconds.
    pub wall_ms: u64,
}

/// Output of [`ratio_series`]: emitted rows, skipped rows, and provenance.
#[derive(Clone, Debug, Serialize)]
pub struct RatioReport {
    /// The comparison law.
    pub law: LawId,
    /// Emitted rows, sorted by scale.
    pub rows: Vec<RatioRow>,
    /// Omitted rows with reasons (parity zeros, leakage floor).
    pub skipped: Vec<SkippedRow>,
    /// Provenance and tolerances.
    pub metadata: ReportMetadata,
}

impl RatioReport {
    /// The emitted row at the largest scale, if any row was emitted.
    pub fn final_row(&self) -> Option<&RatioRow> {
        self.rows.last()
    }

    /// Serialize the rows as CSV with the fixed header
    /// `law_id,param_n_or_R,x1,x2,y1,y2,exact,predicted,ratio`.
    pub fn write_csv<W: IoWrite>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "law_id,param_n_or_R,x1,x2,y1,y2,exact,predicted,ratio")?;
        for row in &self.rows {
            let (y1, y2) = match row.y {
                Some(y) => (y.x1.to_string(), y.x2.to_string()),
                None => (String::new(), String::new()),
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{:.17e},{:.17e},{:.17e}",
                self.law, row.scale, row.x.x1, row.x.x2, y1, y2, row.exact, row.predicted, row.ratio
            )?;
        }
        Ok(())
    }

    /// The CSV table as an owned string.
    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}

/// Evaluate the exact quantity of `id` at every scale of the grid.
///
/// Returns `(scale, exact, leakage_floor)` triples; the floor is the window
/// leakage of the evolution that produced the value, used to drop rows whose
/// exact value is numerically indistinguishable from truncation error.
fn exact_series(id: LawId, sys: &KilledSystem, grid: &ParamGrid) -> Result<Vec<(u64, f64, f64)>> {
    let scales = grid.scales();
    let x = grid.x;
    match id {
        LawId::Prop1Escape => scales
            .iter()
            .map(|&r| {
                let solve = escape_probability(sys, r as i64)?;
                Ok((r, solve.value(x), 0.0))
            })
            .collect(),
        LawId::Thm1 | LawId::Prop3Free | LawId::Prop4Half => {
            let y = grid.y.expect("validated");
            let slices = evolve_killed_captures(sys, x, None, scales)?;
            Ok(scales
                .iter()
                .zip(&slices)
                .map(|(&n, s)| (n, s.value(y), s.leakage()))
                .collect())
        }
        LawId::Cor1 => {
            let xi = grid.y.expect("validated");
            let j = sys.set().index_of(xi).ok_or_else(|| {
                Error::ConfigInvalid(format!(
                    "hitting point ({}, {}) is not in the killing set",
                    xi.x1, xi.x2
                ))
            })?;
            let n_max = *scales.last().expect("grid nonempty");
            if n_max > ABSORPTION_LOG_HORIZON {
                return Err(Error::ConfigInvalid(format!(
                    "joint hitting law needs the full absorption log, \
                     which covers scales up to {ABSORPTION_LOG_HORIZON} (got {n_max})"
                )));
            }
            if sys.set().len() > ABSORPTION_LOG_MAX_SET {
                return Err(Error::ConfigInvalid(format!(
                    "joint hitting law supports sets of up to {ABSORPTION_LOG_MAX_SET} points"
                )));
            }
            let run = evolve_killed(sys, x, n_max, None)?;
            Ok(scales
                .iter()
                .map(|&n| {
                    let row = run.log.row(n).expect("horizon checked against the log");
                    (n, row[j], run.leakage())
                })
                .collect())
        }
        LawId::SigmaMarginal | LawId::Lem1Return => {
            let n_max = *scales.last().expect("grid nonempty");
            let run = evolve_killed(sys, x, n_max, None)?;
            let per_time = run.log.per_time();
            Ok(scales
                .iter()
                .map(|&n| (n, per_time[n as usize], run.leakage()))
                .collect())
        }
        LawId::Lem1Far => {
            let n_max = *scales.last().expect("grid nonempty");
            let run = evolve_killed(sys, x, n_max, None)?;
            let per_time = run.log.per_time();
            Ok(scales
                .iter()
                .map(|&n| (n, per_time[n as usize], run.leakage()))
                .collect())
        }
        LawId::Lem3Cdf => {
            let n_max = *scales.last().expect("grid nonempty");
            let run = evolve_killed(sys, x, n_max, None)?;
            let per_time = run.log.per_time();
            let mut acc = KahanSum::new();
            let mut cumulative = Vec::with_capacity(per_time.len());
            for &v in per_time {
                acc.add(v);
                cumulative.push(acc.value());
            }
            Ok(scales
                .iter()
                .map(|&n| (n, cumulative[n as usize], run.leakage()))
                .collect())
        }
    }
}

/// Compare exact values against predictions along a grid.
///
/// Rows are emitted sorted by scale with `ratio = exact / predicted`. A row
/// is skipped (with a logged reason) when its prediction vanishes by parity
/// or when the exact value does not clear the window leakage floor; if no row
/// survives and at least one parity skip occurred, the whole series fails
/// with [`Error::ParityZero`]. Negative exact values are an invariant
/// violation.
pub fn ratio_series(id: LawId, sys: &KilledSystem, grid: &ParamGrid) -> Result<RatioReport> {
    let t0 = Instant::now();
    for &s in grid.scales() {
        check_regime(id, s, grid.x, grid.y, grid.regime_margin)?;
        validate_params(
            id,
            sys,
            &Params {
                scale: s,
                x: grid.x,
                y: grid.y,
            },
        )?;
    }

    let exact = exact_series(id, sys, grid)?;
    let free = if id.needs_free_kernel() {
        Some(FreeKernel::build(sys.law(), grid.scales())?)
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut parity_skips = 0usize;
    for (scale, exact_value, floor) in exact {
        if exact_value < 0.0 {
            return Err(Error::InvariantViolation(format!(
                "exact value {exact_value:.3e} is negative at scale {scale}"
            )));
        }
        let params = Params {
            scale,
            x: grid.x,
            y: grid.y,
        };
        let predicted = match predicted_with(id, sys, &params, free.as_ref()) {
            Ok(p) => p,
            Err(Error::ParityZero) => {
                parity_skips += 1;
                skipped.push(SkippedRow {
                    scale,
                    reason: format!(
                        "prediction vanishes by parity (exact value {exact_value:.3e})"
                    ),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        if !(predicted > 0.0) {
            return Err(Error::InvariantViolation(format!(
                "prediction {predicted:.3e} is not positive at scale {scale}"
            )));
        }
        let leak_floor = 64.0 * floor;
        if exact_value <= leak_floor {
            skipped.push(SkippedRow {
                scale,
                reason: format!(
                    "exact value {exact_value:.3e} does not clear the window \
                     leakage floor {leak_floor:.3e}"
                ),
            });
            continue;
        }
        rows.push(RatioRow {
            scale,
            x: grid.x,
            y: grid.y,
            exact: exact_value,
            predicted,
            ratio: exact_value / predicted,
        });
    }

    if rows.is_empty() {
        if parity_skips > 0 && parity_skips == skipped.len() {
            return Err(Error::ParityZero);
        }
        let reasons: Vec<&str> = skipped.iter().map(|s| s.reason.as_str()).collect();
        return Err(Error::ConfigInvalid(format!(
            "no usable grid rows: {}",
            reasons.join("; ")
        )));
    }

    Ok(RatioReport {
        law: id,
        rows,
        skipped,
        metadata: ReportMetadata {
            law_hash: sys.law().hash().to_string(),
            seed: 0,
            solver_tolerance: sys.solver_tolerance(),
            potential_tolerance: sys.table().abs_error(),
            regime_margin: grid.regime_margin,
            wall_ms: t0.elapsed().as_millis() as u64,
        },
    })
}

/// Declarative description of one comparison experiment.
///
/// `law` is a builtin law name or a path to a law JSON file; `set` uses the
/// `"x1,x2;x1,x2"` point-list syntax. Optional fields tune solver radius,
/// tolerances, and the acceptance checks applied to the finished table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Builtin step-law name or path to a law JSON file.
    pub law: String,
    /// Killing set, as a `"x1,x2;x1,x2"` list.
    pub set: String,
    /// Comparison law identifier (see [`LawId`]).
    pub law_id: String,
    /// Start point.
    pub x: (i64, i64),
    /// Target point, for laws that take one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<(i64, i64)>,
    /// Grid of scales (`n` values, or `R` values for escape).
    pub grid: Vec<u64>,
    /// Seed echoed into the report metadata and manifest.
    #[serde(default)]
    pub seed: u64,
    /// Truncation radius for the harmonic solves (default 256).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve_radius: Option<i64>,
    /// Diffusive-regime margin (default 4).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime_margin: Option<f64>,
    /// Absolute tolerance for the potential-kernel quadrature (default 1e-10).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential_tolerance: Option<f64>,
    /// If set, the final row's ratio must land in `[lo, hi]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_ratio_band: Option<[f64; 2]>,
    /// If set, `|ratio - 1|` must be non-increasing from this row index on
    /// (0-based; use 1 to exempt the first row).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation_nonincreasing_from: Option<usize>,
}

impl ExperimentConfig {
    /// Parse a config from a JSON string.
    pub fn from_json_str(s: &str) -> Result<ExperimentConfig> {
        Ok(serde_json::from_str(s)?)
    }

    /// Load a config from a JSON file.
    pub fn from_json_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::from_json_str(&text)
    }
}

#[derive(Serialize)]
struct Manifest {
    version: &'static str,
    law_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    law_hash: Option<String>,
    seed: u64,
    threads: usize,
    wall_ms: u64,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Run one configured experiment and persist a reproducible bundle under
/// `out_dir`: `config.json` (echo), `report.csv`, `report.json`, and
/// `manifest.json`.
///
/// On failure the manifest still records the error (status `"error"`), so a
/// bundle directory always explains itself; the error is also returned.
/// Same config, same seed: the CSV bytes are identical run to run.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RatioReport> {
    let t0 = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    write_json_file(&out_dir.join("config.json"), config)?;

    let result = execute_experiment(config);
    let (status, law_hash, error) = match &result {
        Ok(report) => ("ok", Some(report.metadata.law_hash.clone()), None),
        Err(e) => ("error", None, Some(e.to_string())),
    };
    if let Ok(report) = &result {
        let mut csv = Vec::new();
        report.write_csv(&mut csv)?;
        std::fs::write(out_dir.join("report.csv"), csv)?;
        write_json_file(&out_dir.join("report.json"), report)?;
    }
    write_json_file(
        &out_dir.join("manifest.json"),
        &Manifest {
            version: env!("CARGO_PKG_VERSION"),
            law_id: config.law_id.clone(),
            law_hash,
            seed: config.seed,
            threads: rayon::current_num_threads(),
            wall_ms: t0.elapsed().as_millis() as u64,
            status,
            error,
        },
    )?;
    result
}

fn execute_experiment(config: &ExperimentConfig) -> Result<RatioReport> {
    let id = LawId::from_str(&config.law_id)?;
    let law = StepLaw::resolve(&config.law)?;
    let set = KillingSet::parse(&config.set)?;
    let tol = config.potential_tolerance.unwrap_or(1e-10);
    let table = Arc::new(PotentialTable::new(&law, tol)?);
    let sys = match config.solve_radius {
        Some(r) => KilledSystem::with_solve_radius(set, table, r)?,
        None => KilledSystem::new(set, table)?,
    };

    let x = LatticePoint {
        x1: config.x.0,
        x2: config.x.1,
    };
    let y = config.y.map(|(y1, y2)| LatticePoint { x1: y1, x2: y2 });
    let mut grid = ParamGrid::new(&config.grid, x, y)?;
    if let Some(m) = config.regime_margin {
        grid = grid.with_regime_margin(m)?;
    }

    let mut report = ratio_series(id, &sys, &grid)?;
    report.metadata.seed = config.seed;

    if let Some([lo, hi]) = config.final_ratio_band {
        let last = report.final_row().expect("series has rows");
        if !(last.ratio >= lo && last.ratio <= hi) {
            return Err(Error::InvariantViolation(format!(
                "final ratio {:.4} at scale {} lies outside the configured band [{lo}, {hi}]",
                last.ratio, last.scale
            )));
        }
    }
    if let Some(from) = config.deviation_nonincreasing_from {
        let start = from.max(1);
        for i in start..report.rows.len() {
            let prev = (report.rows[i - 1].ratio - 1.0).abs();
            let here = (report.rows[i].ratio - 1.0).abs();
            if here > prev + 1e-12 {
                return Err(Error::InvariantViolation(format!(
                    "|ratio - 1| increased from {prev:.4} to {here:.4} between scales {} and {}",
                    report.rows[i - 1].scale,
                    report.rows[i].scale
                )));
            }
        }
    }
    Ok(report)
}
