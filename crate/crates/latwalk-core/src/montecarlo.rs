//! Path sampling: replicated Monte Carlo estimates of escape, overshoot, and
//! confinement probabilities, built as independent checks on the exact
//! solvers.
//!
//! Determinism is a hard guarantee here: every replica owns a counter-based
//! RNG stream keyed by `(seed, replica index)`, replicas are accumulated in
//! fixed-size chunks, and chunk results are merged by a pairwise tree that
//! depends only on the replica count.  Estimates are therefore bit-identical
//! no matter how many worker threads run the chunks.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harmonic::KilledSystem;
use crate::model::{LatticePoint, StepLaw};

/// Default per-path safety cap.  Escape and hitting times on the supported
/// configurations exceed this with probability far below the statistical
/// resolution, so truncation never biases a shipped estimate.
pub const DEFAULT_MAX_STEPS: u64 = 10_000_000;

/// Largest tolerated fraction of truncated paths before an estimate is
/// refused outright.
pub const TRUNCATION_LIMIT: f64 = 1e-4;

/// Replicas per accumulation chunk.  Fixed: estimates are a pure function of
/// `(seed, replicas, max_steps)`, so this is part of the output contract.
const REPLICA_CHUNK: u64 = 4096;

/// Seed, replica count, and the per-path step cap for one sampling run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub seed: u64,
    pub replicas: u64,
    pub max_steps: u64,
}

impl SamplerConfig {
    pub fn new(seed: u64, replicas: u64) -> SamplerConfig {
        SamplerConfig {
            seed,
            replicas,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    pub fn with_max_steps(mut self, max_steps: u64) -> SamplerConfig {
        self.max_steps = max_steps;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(Error::ConfigInvalid("need at least one replica".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::ConfigInvalid("need a positive step cap".into()));
        }
        Ok(())
    }
}

/// A sampled mean with its standard error and the truncation bookkeeping.
#[derive(Clone, Copy, Debug)]
pub struct EstimateWithCI {
    pub mean: f64,
    pub std_error: f64,
    /// Replicas that resolved (did not hit the step cap); the mean averages
    /// over exactly these.
    pub replicas_used: u64,
    /// Fraction of all requested replicas that hit the step cap.
    pub truncated_fraction: f64,
}

/// Exact cumulative thresholds on the full 64-bit range: atom `i` is drawn
/// iff the raw draw lies in `[thresholds[i-1], thresholds[i])`.  Built from
/// the law's exact rational weights, so the sampled law is the admitted law
/// to the last ulp of the generator.
struct StepSampler {
    steps: Vec<LatticePoint>,
    thresholds: Vec<u128>,
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.abs()
}

impl StepSampler {
    fn new(law: &StepLaw) -> StepSampler {
        let mut den: i128 = 1;
        for atom in law.support() {
            den = den / gcd(den, atom.den) * atom.den;
        }
        assert!(
            den < (1 << 62),
            "step-law denominators too large for exact threshold sampling"
        );
        let mut steps = Vec::with_capacity(law.support().len());
        let mut thresholds = Vec::with_capacity(law.support().len());
        let mut cum: i128 = 0;
        for atom in law.support() {
            cum += atom.num * (den / atom.den);
            steps.push(atom.step);
            thresholds.push((cum as u128) * (1u128 << 64) / den as u128);
        }
        debug_assert_eq!(*thresholds.last().unwrap(), 1u128 << 64);
        StepSampler { steps, thresholds }
    }

    #[inline]
    fn draw(&self, rng: &mut ChaCha8Rng) -> LatticePoint {
        let r = rng.next_u64() as u128;
        let mut i = 0;
        while r >= self.thresholds[i] {
            i += 1;
        }
        self.steps[i]
    }
}

enum PathOutcome {
    Value(f64),
    Truncated,
}

#[derive(Clone, Copy, Default)]
struct Acc {
    sum: f64,
    sumsq: f64,
    used: u64,
    truncated: u64,
}

fn merge(a: Acc, b: Acc) -> Acc {
    Acc {
        sum: a.sum + b.sum,
        sumsq: a.sumsq + b.sumsq,
        used: a.used + b.used,
        truncated: a.truncated + b.truncated,
    }
}

fn pairwise(accs: &[Acc]) -> Acc {
    match accs.len() {
        0 => Acc::default(),
        1 => accs[0],
        n => merge(pairwise(&accs[..n / 2]), pairwise(&accs[n / 2..])),
    }
}

/// Run one path per replica index on its own RNG stream and accumulate.
fn run_replicas<F>(cfg: &SamplerConfig, replica: F) -> Acc
where
    F: Fn(&mut ChaCha8Rng) -> PathOutcome + Sync,
{
    let chunks = cfg.replicas.div_ceil(REPLICA_CHUNK);
    let accs: Vec<Acc> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REPLICA_CHUNK;
            let hi = (lo + REPLICA_CHUNK).min(cfg.replicas);
            let mut acc = Acc::default();
            for idx in lo..hi {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(idx);
                match replica(&mut rng) {
                    PathOutcome::Value(v) => {
                        acc.sum += v;
                        acc.sumsq += v * v;
                        acc.used += 1;
                    }
                    PathOutcome::Truncated => acc.truncated += 1,
                }
            }
            acc
        })
        .collect();
    pairwise(&accs)
}

fn truncation_checked(acc: Acc, cfg: &SamplerConfig) -> Result<Acc> {
    let fraction = acc.truncated as f64 / cfg.replicas as f64;
    if fraction > TRUNCATION_LIMIT {
        return Err(Error::ExcessTruncation {
            fraction,
            limit: TRUNCATION_LIMIT,
        });
    }
    Ok(acc)
}

/// Estimate for a 0/1 event with the binomial standard error.
fn binomial_estimate(acc: Acc, cfg: &SamplerConfig) -> Result<EstimateWithCI> {
    let acc = truncation_checked(acc, cfg)?;
    let n = acc.used as f64;
    let p = acc.sum / n;
    Ok(EstimateWithCI {
        mean: p,
        std_error: (p * (1.0 - p) / n).sqrt(),
        replicas_used: acc.used,
        truncated_fraction: acc.truncated as f64 / cfg.replicas as f64,
    })
}

/// Estimate for a real-valued path functional with the sample standard error.
fn mean_estimate(acc: Acc, cfg: &SamplerConfig) -> Result<EstimateWithCI> {
    let acc = truncation_checked(acc, cfg)?;
    let n = acc.used as f64;
    let mean = acc.sum / n;
    let std_error = if acc.used < 2 {
        0.0
    } else {
        ((acc.sumsq / n - mean * mean).max(0.0) / (n - 1.0)).sqrt()
    };
    Ok(EstimateWithCI {
        mean,
        std_error,
        replicas_used: acc.used,
        truncated_fraction: acc.truncated as f64 / cfg.replicas as f64,
    })
}

fn require_inside_disc(x: LatticePoint, r: i64, what: &str) -> Result<()> {
    if x.norm_sq() >= (r as i128) * (r as i128) {
        return Err(Error::ConfigInvalid(format!(
            "{what} ({}, {}) lies outside the open disc of radius {r}",
            x.x1, x.x2
        )));
    }
    Ok(())
}

/// Frequency of escaping the disc of radius `r` before hitting the killing
/// set, for paths from `x`.  A start on the set counts later arrivals as
/// returns, matching the one-step convention of the exact solve.
pub fn mc_escape(
    sys: &KilledSystem,
    x: LatticePoint,
    r: i64,
    cfg: &SamplerConfig,
) -> Result<EstimateWithCI> {
    cfg.validate()?;
    let r_sq = (r as i128) * (r as i128);
    for &xi in sys.set().points() {
        if xi.norm_sq() >= r_sq {
            return Err(Error::RadiusTooSmall {
                given: r,
                needed: (xi.norm_sq() as f64).sqrt().floor() as i64 + 1,
            });
        }
    }
    require_inside_disc(x, r, "escape start")?;
    let sampler = StepSampler::new(sys.law());
    let set = sys.set();
    let acc = run_replicas(cfg, |rng| {
        let mut s = x;
        for _ in 0..cfg.max_steps {
            s = s + sampler.draw(rng);
            if s.norm_sq() >= r_sq {
                return PathOutcome::Value(1.0);
            }
            if set.contains(s) {
                return PathOutcome::Value(0.0);
            }
        }
        PathOutcome::Truncated
    });
    binomial_estimate(acc, cfg)
}

/// Mean relative overshoot `E[(|S_tau| - r) / r]` over the exit from the
/// disc of radius `r`, for paths from `x`.
pub fn mc_overshoot(
    law: &StepLaw,
    x: LatticePoint,
    r: i64,
    cfg: &SamplerConfig,
) -> Result<EstimateWithCI> {
    cfg.validate()?;
    require_inside_disc(x, r, "overshoot start")?;
    let sampler = StepSampler::new(law);
    let r_sq = (r as i128) * (r as i128);
    let acc = run_replicas(cfg, |rng| {
        let mut s = x;
        for _ in 0..cfg.max_steps {
            s = s + sampler.draw(rng);
            if s.norm_sq() >= r_sq {
                return PathOutcome::Value((s.norm() - r as f64) / r as f64);
            }
        }
        PathOutcome::Truncated
    });
    mean_estimate(acc, cfg)
}

/// Frequency of the exit point overshooting by more than `h` cells:
/// `P_x[|S_tau| > r + h]` for the exit from the disc of radius `r`.
pub fn mc_overshoot_tail(
    law: &StepLaw,
    x: LatticePoint,
    r: i64,
    h: f64,
    cfg: &SamplerConfig,
) -> Result<EstimateWithCI> {
    cfg.validate()?;
    require_inside_disc(x, r, "overshoot start")?;
    let sampler = StepSampler::new(law);
    let r_sq = (r as i128) * (r as i128);
    let cut = r as f64 + h;
    let acc = run_replicas(cfg, |rng| {
        let mut s = x;
        for _ in 0..cfg.max_steps {
            s = s + sampler.draw(rng);
            if s.norm_sq() >= r_sq {
                return PathOutcome::Value(if s.norm() > cut { 1.0 } else { 0.0 });
            }
        }
        PathOutcome::Truncated
    });
    binomial_estimate(acc, cfg)
}

/// Probability that the first coordinate of a walk from the origin stays
/// strictly inside `(-r, r)` for `n` steps.
pub fn mc_confinement(
    law: &StepLaw,
    r: i64,
    n: u64,
    cfg: &SamplerConfig,
) -> Result<EstimateWithCI> {
    cfg.validate()?;
    if r <= 0 {
        return Err(Error::ConfigInvalid("confinement needs a positive strip".into()));
    }
    if n > cfg.max_steps {
        return Err(Error::ConfigInvalid(format!(
            "confinement horizon {n} exceeds the step cap {}",
            cfg.max_steps
        )));
    }
    let sampler = StepSampler::new(law);
    let acc = run_replicas(cfg, |rng| {
        let mut s1: i64 = 0;
        for _ in 0..n {
            s1 += sampler.draw(rng).x1;
            if s1.abs() >= r {
                return PathOutcome::Value(0.0);
            }
        }
        PathOutcome::Value(1.0)
    });
    binomial_estimate(acc, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonic::KillingSet;
    use crate::killed::{escape_probability, first_hitting_law};
    use crate::model::ORIGIN;
    use crate::numerics::linear_fit;
    use crate::potential::PotentialTable;
    use std::sync::Arc;
    use std::sync::OnceLock;

    fn p(x1: i64, x2: i64) -> LatticePoint {
        LatticePoint { x1, x2 }
    }

    fn srw_table() -> Arc<PotentialTable> {
        static T: OnceLock<Arc<PotentialTable>> = OnceLock::new();
        T.get_or_init(|| {
            Arc::new(PotentialTable::new(&StepLaw::builtin("srw").unwrap(), 1e-10).unwrap())
        })
        .clone()
    }

    fn origin_system() -> &'static KilledSystem {
        static S: OnceLock<KilledSystem> = OnceLock::new();
        S.get_or_init(|| {
            let set = KillingSet::new(&[ORIGIN]).unwrap();
            KilledSystem::with_solve_radius(set, srw_table(), 64).unwrap()
        })
    }

    #[test]
    fn thresholds_are_exact_binary_fractions() {
        let s = StepSampler::new(&StepLaw::builtin("srw").unwrap());
        let q = 1u128 << 62;
        assert_eq!(s.thresholds, vec![q, 2 * q, 3 * q, 4 * q]);
        let lazy = StepSampler::new(&StepLaw::builtin("lazy-srw").unwrap());
        assert_eq!(*lazy.thresholds.last().unwrap(), 1u128 << 64);
        assert_eq!(lazy.thresholds.len(), 5);
    }

    #[test]
    fn escape_agrees_with_exact_solve_on_tiny_disc() {
        let sys = origin_system();
        let exact = escape_probability(sys, 2).unwrap().value(p(1, 1));
        let cfg = SamplerConfig::new(7, 1_000_000);
        let est = mc_escape(sys, p(1, 1), 2, &cfg).unwrap();
        assert_eq!(est.replicas_used, 1_000_000);
        assert_eq!(est.truncated_fraction, 0.0);
        assert!(
            (est.mean - exact).abs() < 3.0 * est.std_error,
            "mc {:.6} vs exact {:.6} with se {:.2e}",
            est.mean,
            exact,
            est.std_error
        );
    }

    #[test]
    fn forced_exit_gives_certain_escape() {
        // Steps of length 5 and 6 always leave a radius-2 disc in one move
        // and never land on the origin first.
        let law = StepLaw::from_support(&[
            (p(5, 0), 1, 8),
            (p(-5, 0), 1, 8),
            (p(0, 5), 1, 8),
            (p(0, -5), 1, 8),
            (p(6, 0), 1, 8),
            (p(-6, 0), 1, 8),
            (p(0, 6), 1, 8),
            (p(0, -6), 1, 8),
        ])
        .unwrap();
        let table = Arc::new(PotentialTable::new(&law, 1e-6).unwrap());
        let set = KillingSet::new(&[ORIGIN]).unwrap();
        let sys = KilledSystem::with_solve_radius(set, table, 64).unwrap();
        let est = mc_escape(&sys, p(1, 1), 2, &SamplerConfig::new(1, 10_000)).unwrap();
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.std_error, 0.0);
        assert_eq!(est.truncated_fraction, 0.0);
    }

    #[test]
    fn standard_error_scales_binomially() {
        let sys = origin_system();
        let small = mc_escape(sys, p(1, 1), 2, &SamplerConfig::new(3, 50_000)).unwrap();
        let big = mc_escape(sys, p(1, 1), 2, &SamplerConfig::new(3, 200_000)).unwrap();
        let ratio = big.std_error / small.std_error;
        assert!(
            (0.4..=0.6).contains(&ratio),
            "quadrupling replicas should halve the standard error, got {ratio:.3}"
        );
    }

    #[test]
    fn overshoot_is_bounded_by_the_support() {
        let law = StepLaw::builtin("longstep").unwrap();
        let est = mc_overshoot(&law, ORIGIN, 32, &SamplerConfig::new(5, 10_000)).unwrap();
        assert!(est.mean > 0.0);
        assert!(est.mean <= 3.0 / 32.0, "step length caps the overshoot");
        assert_eq!(est.truncated_fraction, 0.0);
    }

    #[test]
    fn unit_steps_never_overshoot_past_one() {
        let law = StepLaw::builtin("srw").unwrap();
        let est =
            mc_overshoot_tail(&law, ORIGIN, 8, 1.0, &SamplerConfig::new(11, 20_000)).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn relative_overshoot_decreases_with_radius() {
        let law = StepLaw::builtin("longstep").unwrap();
        let cfg = SamplerConfig::new(17, 30_000);
        let mut means = Vec::new();
        for r in [32, 64, 128] {
            means.push(mc_overshoot(&law, ORIGIN, r, &cfg).unwrap().mean);
        }
        assert!(
            means[0] > means[1] && means[1] > means[2],
            "relative overshoot must shrink: {means:?}"
        );
    }

    #[test]
    fn confinement_decays_geometrically_in_the_scaled_horizon() {
        let law = StepLaw::builtin("srw").unwrap();
        let r = 10;
        let cfg = SamplerConfig::new(23, 100_000);
        let trivial = mc_confinement(&law, r, 0, &cfg).unwrap();
        assert_eq!(trivial.mean, 1.0);
        assert_eq!(trivial.std_error, 0.0);

        let ns = [200u64, 400, 800];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut ests = Vec::new();
        for &n in &ns {
            let est = mc_confinement(&law, r, n, &cfg).unwrap();
            assert!(est.mean > 0.0);
            xs.push(n as f64 / (r * r) as f64);
            ys.push(est.mean.log2());
            ests.push(est);
        }
        // Strict decrease with clear CI separation.
        for w in ests.windows(2) {
            assert!(
                w[0].mean - 3.0 * w[0].std_error > w[1].mean + 3.0 * w[1].std_error,
                "confinement must decay: {:?}",
                ests.iter().map(|e| e.mean).collect::<Vec<_>>()
            );
        }
        let (slope, _, r2) = linear_fit(&xs, &ys);
        assert!(slope < 0.0);
        assert!(r2 > 0.9, "log-probability must be nearly affine, r2 = {r2:.3}");
    }

    #[test]
    fn estimates_do_not_depend_on_worker_count() {
        let sys = origin_system();
        let cfg = SamplerConfig::new(29, 10_000);
        let run = || {
            let est = mc_escape(sys, p(1, 1), 2, &cfg).unwrap();
            (est.mean.to_bits(), est.std_error.to_bits())
        };
        let solo = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(run);
        let duo = rayon::ThreadPoolBuilder::new()
            .num_threads(2)
            .build()
            .unwrap()
            .install(run);
        assert_eq!(solo, duo);
        assert_eq!(solo, run());
    }

    #[test]
    fn runaway_paths_raise_truncation_errors() {
        let sys = origin_system();
        let cfg = SamplerConfig::new(31, 2_000).with_max_steps(50);
        match mc_escape(sys, p(1, 0), 64, &cfg) {
            Err(Error::ExcessTruncation { fraction, .. }) => assert!(fraction > 0.1),
            other => panic!("expected truncation refusal, got {other:?}"),
        }
    }

    #[test]
    fn generous_caps_leave_no_truncation() {
        let sys = origin_system();
        let r = 16;
        let cfg = SamplerConfig::new(37, 5_000).with_max_steps(100 * (r as u64) * (r as u64));
        let est = mc_escape(sys, p(1, 0), r, &cfg).unwrap();
        assert_eq!(est.truncated_fraction, 0.0);
        assert_eq!(est.replicas_used, 5_000);
    }

    #[test]
    fn finite_horizon_hitting_split_matches_the_exact_law() {
        // Sample the category {first hit is xi within 64 steps} for both
        // points of a pair set and compare against the exact absorption
        // columns; unconditional hitting is out of reach for sampling (2D
        // walks hit logarithmically slowly) but the finite-horizon split is
        // a clean cross-check.
        let set = KillingSet::new(&[ORIGIN, p(1, 0)]).unwrap();
        let sys = KilledSystem::with_solve_radius(set, srw_table(), 64).unwrap();
        let start = p(2, 0);
        let horizon = 64u64;
        let exact: Vec<f64> = [ORIGIN, p(1, 0)]
            .iter()
            .map(|&xi| {
                first_hitting_law(&sys, start, xi, horizon, None)
                    .unwrap()
                    .iter()
                    .sum::<f64>()
            })
            .collect();

        let sampler = StepSampler::new(sys.law());
        let replicas = 200_000u64;
        let mut hits = [0u64; 2];
        for idx in 0..replicas {
            let mut rng = ChaCha8Rng::seed_from_u64(41);
            rng.set_stream(idx);
            let mut s = start;
            for _ in 0..horizon {
                s = s + sampler.draw(&mut rng);
                if s.is_origin() {
                    hits[0] += 1;
                    break;
                }
                if s == p(1, 0) {
                    hits[1] += 1;
                    break;
                }
            }
        }
        for j in 0..2 {
            let freq = hits[j] as f64 / replicas as f64;
            let se = (freq * (1.0 - freq) / replicas as f64).sqrt();
            assert!(
                (freq - exact[j]).abs() < 3.0 * se,
                "point {j}: sampled {freq:.5} vs exact {:.5} with se {se:.2e}",
                exact[j]
            );
        }
    }
}
