//! The potential kernel `a(x)` of an admissible step law.
//!
//! `a(x) = sum_n [p^n(0) - p^n(-x)]` is computed through its Fourier
//! representation `a(x) = (2 pi)^-2 \int_{[-pi,pi]^2} Re[(1 - e^{i theta.x}) /
//! (1 - phi(theta))] d theta`, where `phi` is the characteristic function of
//! the law. The integrand's only singularity (theta = 0) is removable along
//! every ray, so the square is integrated in polar form: two angular panels
//! covering half the square (the integrand is even), Gauss-Legendre in the
//! angle and in the radius, with the radial extent following the square's
//! boundary. Node sets are cached per refinement level; a value is accepted
//! when two consecutive levels agree within the table tolerance.

use dashmap::DashMap;
use gauss_quad::GaussLegendre;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::kernels::Evolver;
use crate::model::{LatticePoint, StepLaw, ORIGIN};
use crate::numerics::KahanSum;

/// Nodes per panel per dimension at each refinement level.
const LEVELS: &[usize] = &[
    16, 24, 32, 48, 64, 96, 128, 192, 256, 384, 512, 768, 1024, 1536, 2048,
];

/// Levels at least this large are kept in a small recently-used cache instead
/// of the permanent per-level cache (their node tables are tens of MB).
const BIG_LEVEL: usize = 1024;

/// Precomputed quadrature nodes: coordinates and the weights into which the
/// law-dependent factor `1/(1 - phi)` has been folded. For a symmetric law
/// the imaginary weight vanishes identically and `wim` is empty.
struct NodeSet {
    th1: Vec<f64>,
    th2: Vec<f64>,
    wre: Vec<f64>,
    wim: Vec<f64>,
}

fn build_node_set(law: &StepLaw, n: usize) -> NodeSet {
    let gl = GaussLegendre::new(NonZeroUsize::new(n).unwrap());
    let angle_nodes: Vec<(f64, f64)> = gl.iter().copied().collect();
    let symmetric = law.is_symmetric();
    let m = 2 * n * n;
    let mut ns = NodeSet {
        th1: Vec::with_capacity(m),
        th2: Vec::with_capacity(m),
        wre: Vec::with_capacity(m),
        wim: if symmetric { Vec::new() } else { Vec::with_capacity(m) },
    };
    let four_pi_sq = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
    // Panels k=0 (angles around 0) and k=1 (around pi/2) cover the upper half
    // of the square; evenness of the integrand doubles them.
    for k in 0..2 {
        let mid = k as f64 * std::f64::consts::FRAC_PI_2;
        let half = std::f64::consts::FRAC_PI_4;
        for &(ta, wa_raw) in &angle_nodes {
            let alpha = mid + half * ta;
            let w_alpha = half * wa_raw;
            let rho = std::f64::consts::PI / (alpha - mid).cos();
            let (sin_a, cos_a) = alpha.sin_cos();
            for &(tr, wr_raw) in &angle_nodes {
                let r = 0.5 * rho * (tr + 1.0);
                let w_r = 0.5 * rho * wr_raw;
                let theta = [r * cos_a, r * sin_a];
                let (re, im) = law.one_minus_char_fn(theta);
                let den = re * re + im * im;
                let w = 2.0 * w_alpha * w_r * r / four_pi_sq;
                ns.th1.push(theta[0]);
                ns.th2.push(theta[1]);
                ns.wre.push(w * re / den);
                if !symmetric {
                    ns.wim.push(-w * im / den);
                }
            }
        }
    }
    ns
}

fn eval_node_set(ns: &NodeSet, x: LatticePoint) -> f64 {
    let x1 = x.x1 as f64;
    let x2 = x.x2 as f64;
    let mut acc = KahanSum::new();
    if ns.wim.is_empty() {
        for i in 0..ns.th1.len() {
            let s_half = 0.5 * (ns.th1[i] * x1 + ns.th2[i] * x2);
            let sh = s_half.sin();
            acc.add(2.0 * sh * sh * ns.wre[i]);
        }
    } else {
        for i in 0..ns.th1.len() {
            let s_half = 0.5 * (ns.th1[i] * x1 + ns.th2[i] * x2);
            let (sh, ch) = s_half.sin_cos();
            acc.add(2.0 * sh * (sh * ns.wre[i] + ch * ns.wim[i]));
        }
    }
    acc.value()
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    law_hash: String,
    tol: f64,
    entries: Vec<(i64, i64, f64)>,
}

/// Memoized, certified potential-kernel values for one step law.
///
/// Values are computed on demand; lookups of the same point are idempotent
/// and thread-safe. Tables can be persisted to JSON keyed by the law's hash.
pub struct PotentialTable {
    law: StepLaw,
    tol: f64,
    values: DashMap<LatticePoint, f64>,
    small_levels: Mutex<HashMap<usize, Arc<NodeSet>>>,
    big_levels: Mutex<Vec<(usize, Arc<NodeSet>)>>,
}

impl PotentialTable {
    pub fn new(law: &StepLaw, tol: f64) -> Result<PotentialTable> {
        if !(tol > 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "potential tolerance must be positive, got {tol}"
            )));
        }
        Ok(PotentialTable {
            law: law.clone(),
            tol,
            values: DashMap::new(),
            small_levels: Mutex::new(HashMap::new()),
            big_levels: Mutex::new(Vec::new()),
        })
    }

    pub fn law(&self) -> &StepLaw {
        &self.law
    }

    /// Certified absolute error bound on every returned value.
    pub fn abs_error(&self) -> f64 {
        self.tol
    }

    /// Largest Euclidean norm among the cached points.
    pub fn radius(&self) -> i64 {
        self.values
            .iter()
            .map(|e| e.key().norm().ceil() as i64)
            .max()
            .unwrap_or(0)
    }

    pub fn cached_len(&self) -> usize {
        self.values.len()
    }

    fn node_set(&self, idx: usize) -> Arc<NodeSet> {
        let n = LEVELS[idx];
        if n < BIG_LEVEL {
            let mut cache = self.small_levels.lock().unwrap();
            cache
                .entry(idx)
                .or_insert_with(|| Arc::new(build_node_set(&self.law, n)))
                .clone()
        } else {
            let mut cache = self.big_levels.lock().unwrap();
            if let Some(pos) = cache.iter().position(|(i, _)| *i == idx) {
                let entry = cache.remove(pos);
                cache.push(entry.clone());
                return entry.1;
            }
            let ns = Arc::new(build_node_set(&self.law, n));
            if cache.len() >= 2 {
                cache.remove(0);
            }
            cache.push((idx, ns.clone()));
            ns
        }
    }

    fn base_level(x: LatticePoint) -> usize {
        // Both quadrature dimensions see ~|x| oscillations of the integrand
        // across the domain; resolve them with margin.
        let target = 16.0 + 2.2 * x.norm();
        LEVELS
            .iter()
            .position(|&n| n as f64 >= target)
            .unwrap_or(LEVELS.len() - 1)
    }

    fn quadrature(&self, x: LatticePoint) -> Result<f64> {
        let mut idx = Self::base_level(x);
        if idx + 1 >= LEVELS.len() {
            // Certification needs two levels above the oscillation scale;
            // beyond the ladder the point is out of reach.
            return Err(Error::QuadratureNonConvergent {
                x1: x.x1,
                x2: x.x2,
                achieved: f64::INFINITY,
                tol: self.tol,
            });
        }
        let mut prev = eval_node_set(&self.node_set(idx), x);
        let mut achieved = f64::INFINITY;
        while idx + 1 < LEVELS.len() {
            idx += 1;
            let next = eval_node_set(&self.node_set(idx), x);
            achieved = (next - prev).abs();
            if achieved <= self.tol {
                return Ok(next);
            }
            prev = next;
        }
        Err(Error::QuadratureNonConvergent {
            x1: x.x1,
            x2: x.x2,
            achieved,
            tol: self.tol,
        })
    }

    /// The potential kernel `a(x)`.
    pub fn a(&self, x: LatticePoint) -> Result<f64> {
        if x.is_origin() {
            return Ok(0.0);
        }
        // For symmetric laws a(-x) = a(x); canonicalizing the key makes the
        // equality hold bitwise and halves the work.
        let key = if self.law.is_symmetric() { x.max(-x) } else { x };
        if let Some(v) = self.values.get(&key) {
            return Ok(*v);
        }
        let v = self.quadrature(key)?;
        self.values.insert(key, v);
        Ok(v)
    }

    /// `a_dagger(x) = delta(x, 0) + a(x)`.
    pub fn a_dagger(&self, x: LatticePoint) -> Result<f64> {
        Ok(if x.is_origin() { 1.0 } else { self.a(x)? })
    }

    /// Persist all cached values as JSON keyed by the law hash.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut entries: Vec<(i64, i64, f64)> = self
            .values
            .iter()
            .map(|e| (e.key().x1, e.key().x2, *e.value()))
            .collect();
        entries.sort_by_key(|&(x1, x2, _)| (x1, x2));
        let file = CacheFile {
            law_hash: self.law.hash().to_string(),
            tol: self.tol,
            entries,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    /// Load a cache written by [`save`](Self::save); the file must belong to
    /// the same law.
    pub fn load(path: &std::path::Path, law: &StepLaw) -> Result<PotentialTable> {
        let file: CacheFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.law_hash != law.hash() {
            return Err(Error::ConfigInvalid(format!(
                "potential cache at {} was built for a different law",
                path.display()
            )));
        }
        let table = PotentialTable::new(law, file.tol)?;
        for (x1, x2, v) in file.entries {
            table.values.insert(LatticePoint::new(x1, x2), v);
        }
        Ok(table)
    }
}

/// One-shot evaluation of `a(x)` (builds a throwaway table; prefer
/// [`PotentialTable`] when several values are needed).
pub fn potential_a(law: &StepLaw, x: LatticePoint, tol: f64) -> Result<f64> {
    PotentialTable::new(law, tol)?.a(x)
}

/// Independent estimate of `a(x)` by truncating the defining series at `N`
/// terms, for several points from a single exact evolution.
///
/// Partial sums oscillate for period-2 laws, so the average of the last two
/// partial sums is returned; the remaining error decays like `1/N`. This is a
/// cross-check oracle, not the production path.
pub fn potential_series_oracle_multi(
    law: &StepLaw,
    xs: &[LatticePoint],
    n_terms: u64,
) -> Result<Vec<f64>> {
    if n_terms < 2 {
        return Err(Error::ConfigInvalid("series oracle needs N >= 2".into()));
    }
    let window = crate::kernels::Window::default_for(law, ORIGIN, n_terms);
    let mut ev = Evolver::new(law, ORIGIN, window)?;
    // S_0 = p^0(0) - p^0(-x).
    let mut sums: Vec<KahanSum> = xs
        .iter()
        .map(|&x| {
            let mut k = KahanSum::new();
            k.add(if x.is_origin() { 0.0 } else { 1.0 });
            k
        })
        .collect();
    let mut penultimate = vec![0.0f64; xs.len()];
    for n in 1..=n_terms {
        ev.step();
        let at_zero = ev.value(ORIGIN);
        for (s, &x) in sums.iter_mut().zip(xs) {
            s.add(at_zero - ev.value(-x));
        }
        if n == n_terms - 1 {
            for (p, s) in penultimate.iter_mut().zip(&sums) {
                *p = s.value();
            }
        }
    }
    if ev.leakage() > 1e-10 {
        return Err(Error::WindowTooSmall {
            reason: format!(
                "series oracle window leaked {:.3e} by N={n_terms}",
                ev.leakage()
            ),
        });
    }
    Ok(sums
        .iter()
        .zip(&penultimate)
        .map(|(s, &p)| 0.5 * (s.value() + p))
        .collect())
}

pub fn potential_series_oracle(law: &StepLaw, x: LatticePoint, n_terms: u64) -> Result<f64> {
    Ok(potential_series_oracle_multi(law, &[x], n_terms)?[0])
}

/// Estimate the constant term `c*` in `a(x) = kappa^-1 ln|x~| + c* + o(1)`.
///
/// Returns `(estimate, spread)`: the mean of `a(x) - kappa^-1 ln|x~|` over
/// sample points at the largest radius, and the maximal deviation of the
/// per-point values (across all radii) from that mean. The spread shrinks as
/// the radii grow.
pub fn estimate_cstar(table: &PotentialTable, radii: &[i64]) -> Result<(f64, f64)> {
    if radii.is_empty() || radii.windows(2).any(|w| w[0] >= w[1]) || radii[0] < 2 {
        return Err(Error::ConfigInvalid(
            "estimate_cstar needs increasing radii >= 2".into(),
        ));
    }
    let law = table.law();
    let sample = |r: i64| -> Vec<LatticePoint> {
        let d = ((r as f64) / std::f64::consts::SQRT_2).round() as i64;
        vec![
            LatticePoint::new(r, 0),
            LatticePoint::new(-r, 0),
            LatticePoint::new(0, r),
            LatticePoint::new(0, -r),
            LatticePoint::new(d, d),
            LatticePoint::new(d, -d),
            LatticePoint::new(-d, d),
            LatticePoint::new(-d, -d),
        ]
    };
    let kappa_inv = 1.0 / law.kappa();
    let mut per_radius: Vec<Vec<f64>> = Vec::with_capacity(radii.len());
    for &r in radii {
        let mut vals = Vec::with_capacity(8);
        for x in sample(r) {
            vals.push(table.a(x)? - kappa_inv * law.tilde_norm(x).ln());
        }
        per_radius.push(vals);
    }
    let last = per_radius.last().unwrap();
    let estimate = last.iter().sum::<f64>() / last.len() as f64;
    let spread = per_radius
        .iter()
        .flatten()
        .map(|v| (v - estimate).abs())
        .fold(0.0f64, f64::max);
    Ok((estimate, spread))
}
