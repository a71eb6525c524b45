//! Evolution of the walk killed on a finite set.
//!
//! The free evolver pushes probability mass one step at a time; here every
//! step ends by draining the mass that just landed on the killing set into
//! an absorption log.  This yields, exactly and within one window:
//!
//! * killed heat-kernel slices `p_A^n(start, .)`,
//! * the joint law of the hitting time and hitting point (finite horizon),
//! * Green partial sums with a documented tail correction,
//! * and, via the relaxation solver, exact escape probabilities from discs.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::harmonic::{DirichletSolve, KilledSystem, KillingSet, MAX_TRUNCATION_RADIUS};
use crate::kernels::{Evolver, FieldSlice, Window};
use crate::model::{LatticePoint, StepLaw, ORIGIN};
use crate::numerics::KahanSum;

/// Longest horizon for which the full `(time, point)` absorption table is
/// retained; beyond it only per-time and per-point marginals accumulate.
pub const ABSORPTION_LOG_HORIZON: u64 = 1 << 14;

/// Largest killing set for which the full absorption table is retained.
pub const ABSORPTION_LOG_MAX_SET: usize = 16;

/// Default number of killed steps summed by [`green_partial_sums`] when the
/// caller does not choose a horizon.
pub const DEFAULT_GREEN_STEPS: u64 = 1 << 12;

/// Record of the mass absorbed by the killing set during an evolution.
///
/// Entry `(k, j)` of the full table is the probability that the walk first
/// hits the set at time `k` and does so at the `j`-th killing point.  The
/// full table covers times `1..=logged_steps`; the per-time and per-point
/// marginals always cover the whole run.
#[derive(Clone, Debug)]
pub struct AbsorptionLog {
    points: Vec<LatticePoint>,
    /// Time-major with stride `points.len()`, rows for times `1..=logged`.
    full: Option<Vec<f64>>,
    logged: u64,
    /// Index `k` holds the total mass absorbed at step `k`; entry 0 is zero
    /// (the walk is never absorbed before its first step).
    per_time: Vec<f64>,
    per_point: Vec<f64>,
}

impl AbsorptionLog {
    /// Killing points, in the set's canonical order.
    pub fn points(&self) -> &[LatticePoint] {
        &self.points
    }

    /// Number of steps the evolution ran.
    pub fn steps(&self) -> u64 {
        self.per_time.len() as u64 - 1
    }

    /// Number of initial steps covered by the full `(time, point)` table.
    pub fn logged_steps(&self) -> u64 {
        self.logged
    }

    /// Absorption split over the killing points at time `k`, if the full
    /// table covers that time.  Time 0 carries no absorption.
    pub fn row(&self, k: u64) -> Option<&[f64]> {
        if k == 0 || k > self.logged {
            return None;
        }
        let m = self.points.len();
        let lo = (k as usize - 1) * m;
        self.full.as_ref().map(|f| &f[lo..lo + m])
    }

    /// Absorption at the killing point `xi` for every time `0..=steps`.
    /// Needs the full table to cover the whole run.
    pub fn column(&self, xi: LatticePoint) -> Result<Vec<f64>> {
        let j = self
            .points
            .iter()
            .position(|&q| q == xi)
            .ok_or_else(|| {
                Error::ConfigInvalid(format!(
                    "({}, {}) is not a killing point of this log",
                    xi.x1, xi.x2
                ))
            })?;
        let full = self.full.as_ref().filter(|_| self.logged == self.steps());
        let full = full.ok_or_else(|| {
            Error::ConfigInvalid(
                "absorption log kept only per-time and per-point marginals for \
                 this run (horizon or set size exceeded)"
                    .into(),
            )
        })?;
        let m = self.points.len();
        let mut out = Vec::with_capacity(self.per_time.len());
        out.push(0.0);
        for k in 0..self.steps() as usize {
            out.push(full[k * m + j]);
        }
        Ok(out)
    }

    /// Total absorption at time `k` for every `k` in `0..=steps`.
    pub fn per_time(&self) -> &[f64] {
        &self.per_time
    }

    /// Total absorption at each killing point over the whole run, in the
    /// order of [`AbsorptionLog::points`].
    pub fn per_point(&self) -> &[f64] {
        &self.per_point
    }

    /// Total absorbed mass: the probability of hitting the set within the
    /// run, compensated summation over the per-time marginal.
    pub fn total(&self) -> f64 {
        let mut acc = KahanSum::new();
        for &v in &self.per_time {
            acc.add(v);
        }
        acc.value()
    }
}

/// A snapshot of the killed evolution: the live field, the mass absorbed so
/// far, and the absorption log.
#[derive(Clone, Debug)]
pub struct KilledFieldSlice {
    /// Live mass `p_A^n(start, .)`; zero on the killing set for `n >= 1`.
    pub slice: FieldSlice,
    /// Total mass absorbed by the set so far (compensated sum).
    pub killed_mass: f64,
    pub log: AbsorptionLog,
}

impl KilledFieldSlice {
    /// Live mass at `z` (zero outside the window).
    pub fn value(&self, z: LatticePoint) -> f64 {
        self.slice.value(z)
    }

    pub fn n(&self) -> u64 {
        self.slice.n
    }

    /// Mass lost over the window boundary so far.
    pub fn leakage(&self) -> f64 {
        self.slice.leakage
    }

    /// Total surviving mass in the window.
    pub fn live_mass(&self) -> f64 {
        self.slice.total_mass()
    }
}

/// Free evolver plus the end-of-step drain of the killing set.
struct KilledEvolver {
    ev: Evolver,
    points: Vec<LatticePoint>,
    log_full: bool,
    full: Vec<f64>,
    per_time: Vec<f64>,
    per_point: Vec<f64>,
    killed: KahanSum,
}

impl KilledEvolver {
    fn new(
        law: &StepLaw,
        points: &[LatticePoint],
        start: LatticePoint,
        window: Window,
    ) -> Result<KilledEvolver> {
        let ev = Evolver::new(law, start, window)?;
        for &xi in points {
            if !ev.grid().in_disc(xi) {
                return Err(Error::ConfigInvalid(format!(
                    "killing point ({}, {}) lies outside the evolution window",
                    xi.x1, xi.x2
                )));
            }
        }
        let log_full = points.len() <= ABSORPTION_LOG_MAX_SET;
        Ok(KilledEvolver {
            ev,
            points: points.to_vec(),
            log_full,
            full: Vec::new(),
            per_time: vec![0.0],
            per_point: vec![0.0; points.len()],
            killed: KahanSum::new(),
        })
    }

    /// One step of the killed walk: push mass, then drain the set.  A start
    /// on the set is not drained at time 0, so runs started there produce
    /// first-return quantities.
    fn step(&mut self) {
        self.ev.step();
        let record = self.log_full && self.ev.n() <= ABSORPTION_LOG_HORIZON;
        let mut row_total = 0.0;
        for (j, &xi) in self.points.iter().enumerate() {
            let v = self.ev.drain_cell(xi);
            if record {
                self.full.push(v);
            }
            self.per_point[j] += v;
            self.killed.add(v);
            row_total += v;
        }
        self.per_time.push(row_total);
    }

    fn value(&self, z: LatticePoint) -> f64 {
        self.ev.value(z)
    }

    fn snapshot(&self) -> KilledFieldSlice {
        KilledFieldSlice {
            slice: self.ev.snapshot(),
            killed_mass: self.killed.value(),
            log: AbsorptionLog {
                points: self.points.clone(),
                full: self.log_full.then(|| self.full.clone()),
                logged: if self.log_full {
                    self.ev.n().min(ABSORPTION_LOG_HORIZON)
                } else {
                    0
                },
                per_time: self.per_time.clone(),
                per_point: self.per_point.clone(),
            },
        }
    }
}

/// Evolve the killed walk from `start` and return snapshots at the requested
/// step counts.  The window defaults to [`Window::default_for`] at the
/// largest capture time and must contain every killing point.
pub fn evolve_killed_captures(
    sys: &KilledSystem,
    start: LatticePoint,
    window: Option<Window>,
    captures: &[u64],
) -> Result<Vec<KilledFieldSlice>> {
    if captures.is_empty() {
        return Err(Error::ConfigInvalid("no capture times requested".into()));
    }
    let mut times: Vec<u64> = captures.to_vec();
    times.sort_unstable();
    times.dedup();
    let n_final = *times.last().unwrap();
    let window = window.unwrap_or_else(|| Window::default_for(sys.law(), start, n_final));
    let mut kev = KilledEvolver::new(sys.law(), sys.set().points(), start, window)?;
    let mut out = Vec::with_capacity(times.len());
    let mut next_capture = 0usize;
    if times[0] == 0 {
        out.push(kev.snapshot());
        next_capture = 1;
    }
    for k in 1..=n_final {
        kev.step();
        if next_capture < times.len() && times[next_capture] == k {
            out.push(kev.snapshot());
            next_capture += 1;
        }
    }
    Ok(out)
}

/// Evolve the killed walk for `n` steps and return the final snapshot.
pub fn evolve_killed(
    sys: &KilledSystem,
    start: LatticePoint,
    n: u64,
    window: Option<Window>,
) -> Result<KilledFieldSlice> {
    let mut slices = evolve_killed_captures(sys, start, window, &[n])?;
    Ok(slices.pop().expect("one capture requested"))
}

/// Joint law of the hitting time and a fixed hitting point: entry `k` is the
/// probability that the walk from `start` first hits the set at time `k` and
/// lands on `xi`.  Exact up to window leakage; needs `n_max` within the
/// logging horizon and a set small enough for the full table.
pub fn first_hitting_law(
    sys: &KilledSystem,
    start: LatticePoint,
    xi: LatticePoint,
    n_max: u64,
    window: Option<Window>,
) -> Result<Vec<f64>> {
    if !sys.set().contains(xi) {
        return Err(Error::ConfigInvalid(format!(
            "hitting target ({}, {}) is not in the killing set",
            xi.x1, xi.x2
        )));
    }
    if n_max > ABSORPTION_LOG_HORIZON {
        return Err(Error::ConfigInvalid(format!(
            "horizon {n_max} exceeds the full absorption log limit {ABSORPTION_LOG_HORIZON}"
        )));
    }
    if sys.set().len() > ABSORPTION_LOG_MAX_SET {
        return Err(Error::ConfigInvalid(format!(
            "killing set of {} points exceeds the full absorption log limit {}",
            sys.set().len(),
            ABSORPTION_LOG_MAX_SET
        )));
    }
    let slice = evolve_killed(sys, start, n_max, window)?;
    slice.log.column(xi)
}

/// Law of the first hitting time of the origin, with its running total.
#[derive(Clone, Debug)]
pub struct SigmaLaw {
    /// Entry `k` is the probability that the origin is first hit at step `k`.
    pub density: Vec<f64>,
    /// Entry `k` is the probability that the origin is hit by step `k`
    /// (compensated prefix sums of the density).
    pub cumulative: Vec<f64>,
}

/// Law of the first hitting time of the origin for a walk from `x`, up to
/// `n_max` steps.  A start at the origin itself gives the first-return law.
pub fn sigma_law_singleton(
    law: &StepLaw,
    x: LatticePoint,
    n_max: u64,
    window: Option<Window>,
) -> Result<SigmaLaw> {
    let window = window.unwrap_or_else(|| Window::default_for(law, x, n_max));
    let mut kev = KilledEvolver::new(law, &[ORIGIN], x, window)?;
    for _ in 0..n_max {
        kev.step();
    }
    let density = kev.per_time.clone();
    let mut cumulative = Vec::with_capacity(density.len());
    let mut acc = KahanSum::new();
    for &v in &density {
        acc.add(v);
        cumulative.push(acc.value());
    }
    Ok(SigmaLaw {
        density,
        cumulative,
    })
}

/// Escape probabilities from a disc: for every `x` in the open disc of the
/// given radius, the probability that the walk from `x` leaves the disc
/// before hitting the killing set (for `x` in the set: before returning to
/// it).  Backed by one converged relaxation solve, so the values satisfy the
/// harmonic balance exactly up to the recorded residual.
#[derive(Debug)]
pub struct EscapeSolve {
    set: KillingSet,
    solve: Arc<DirichletSolve>,
}

impl EscapeSolve {
    pub fn set(&self) -> &KillingSet {
        &self.set
    }

    pub fn radius(&self) -> i64 {
        self.solve.radius()
    }

    /// Worst harmonic-balance defect of the underlying solve.
    pub fn residual(&self) -> f64 {
        self.solve.residual()
    }

    pub fn sweeps(&self) -> u64 {
        self.solve.sweeps()
    }

    /// Escape probability from `x`: 1 outside the disc, a one-step average
    /// on the set itself.
    pub fn value(&self, x: LatticePoint) -> f64 {
        self.solve.escape_value(x)
    }

    /// All in-disc points with their escape probabilities, row by row.
    pub fn iter(&self) -> impl Iterator<Item = (LatticePoint, f64)> + '_ {
        let grid = self.solve.grid();
        let r = grid.radius();
        (-r..=r)
            .filter_map(move |d2| grid.disc_row(d2).map(|(lo, hi)| (d2, lo..=hi)))
            .flat_map(move |(d2, cols)| {
                cols.map(move |d1| {
                    let x = LatticePoint { x1: d1, x2: d2 };
                    (x, self.solve.escape_value(x))
                })
            })
    }
}

/// Solve the escape problem for the system's killing set on the disc of
/// radius `r`.  The disc must contain the set with two cells to spare.
pub fn escape_probability(sys: &KilledSystem, r: i64) -> Result<EscapeSolve> {
    let set = sys.set();
    let max_norm = set
        .points()
        .iter()
        .map(|q| q.norm())
        .fold(0.0f64, f64::max);
    let needed = (max_norm.floor() as i64 + 1).max(set.diameter().ceil() as i64 + 2);
    if r < needed {
        return Err(Error::RadiusTooSmall { given: r, needed });
    }
    if r > MAX_TRUNCATION_RADIUS {
        return Err(Error::ConfigInvalid(format!(
            "escape radius {r} beyond the supported {MAX_TRUNCATION_RADIUS}"
        )));
    }
    let solve = sys.solve_at(r)?;
    Ok(EscapeSolve {
        set: set.clone(),
        solve,
    })
}

/// A Green value split into its computed and estimated parts.
///
/// `value = partial_sum + tail_correction`; the neglected remainder is
/// smaller than the tail correction itself once the horizon is past the
/// diffusive scale of the endpoints, so `tail_correction` doubles as the
/// documented error bound on `value`.
#[derive(Clone, Debug)]
pub struct GreenEstimate {
    pub value: f64,
    /// Exact killed partial sum `sum_{k <= steps} p_A^k(x, y)` (up to window
    /// leakage).
    pub partial_sum: f64,
    /// Estimated remainder `sum_{k > steps}`, from the hitting asymptotics:
    /// `2 kappa u_A(x) u'(-y) / ln steps`, where `u'` belongs to the
    /// direction-reversed system.
    pub tail_correction: f64,
    pub steps: u64,
    /// Mass lost over the window boundary during the evolution.
    pub leakage: f64,
}

/// Green function of the killed walk by explicit summation:
/// `sum_k P_x[S_k = y, set not yet hit]` over `k <= n_max`, plus a tail
/// correction.  The window defaults to one sized for the horizon around the
/// farthest of `x`, `y`, and the killing points.
pub fn green_partial_sums(
    sys: &KilledSystem,
    x: LatticePoint,
    y: LatticePoint,
    n_max: Option<u64>,
    window: Option<Window>,
) -> Result<GreenEstimate> {
    let n = n_max.unwrap_or(DEFAULT_GREEN_STEPS);
    if n < 2 {
        return Err(Error::ConfigInvalid(
            "green partial sums need a horizon of at least 2 steps".into(),
        ));
    }
    let law = sys.law();
    let window = window.unwrap_or_else(|| {
        let r = sys
            .set()
            .points()
            .iter()
            .chain([&x, &y])
            .map(|&q| law.default_window_radius(q, n))
            .max()
            .expect("killing sets are nonempty");
        Window::new(ORIGIN, r)
    });
    let mut kev = KilledEvolver::new(law, sys.set().points(), x, window)?;
    let mut acc = KahanSum::new();
    if x == y {
        acc.add(1.0);
    }
    for _ in 0..n {
        kev.step();
        acc.add(kev.value(y));
    }
    let u_fwd = sys.u(x)?;
    let u_rev = sys.dual_system()?.u(-y)?;
    let tail = 2.0 * law.kappa() * u_fwd * u_rev / (n as f64).ln();
    let partial = acc.value();
    Ok(GreenEstimate {
        value: partial + tail,
        partial_sum: partial,
        tail_correction: tail,
        steps: n,
        leakage: kev.ev.leakage(),
    })
}
