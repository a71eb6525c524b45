//! Step laws of two-dimensional lattice random walks and their basic invariants.
//!
//! A step law is a finitely supported probability distribution on the integer
//! lattice with exact zero mean and nondegenerate covariance. Admissibility
//! (zero mean, full lattice support, nondegenerate covariance) is checked in
//! exact integer arithmetic when the law is built; everything downstream is
//! allowed to assume it.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::ops::{Add, Neg, Sub};

use crate::error::{Error, Result};

/// A point of the integer lattice.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct LatticePoint {
    pub x1: i64,
    pub x2: i64,
}

pub const ORIGIN: LatticePoint = LatticePoint { x1: 0, x2: 0 };

impl LatticePoint {
    pub const fn new(x1: i64, x2: i64) -> Self {
        Self { x1, x2 }
    }

    /// Squared Euclidean norm, exact.
    pub fn norm_sq(self) -> i128 {
        (self.x1 as i128) * (self.x1 as i128) + (self.x2 as i128) * (self.x2 as i128)
    }

    pub fn norm(self) -> f64 {
        (self.norm_sq() as f64).sqrt()
    }

    /// Chebyshev (max-coordinate) norm.
    pub fn cheb(self) -> i64 {
        self.x1.abs().max(self.x2.abs())
    }

    pub fn is_origin(self) -> bool {
        self.x1 == 0 && self.x2 == 0
    }

    /// Coordinate-sum parity: 0 or 1.
    pub fn parity(self) -> u8 {
        ((self.x1 + self.x2).rem_euclid(2)) as u8
    }

    pub fn dot_f64(self, v: [f64; 2]) -> f64 {
        self.x1 as f64 * v[0] + self.x2 as f64 * v[1]
    }
}

impl Add for LatticePoint {
    type Output = LatticePoint;
    fn add(self, o: LatticePoint) -> LatticePoint {
        LatticePoint::new(self.x1 + o.x1, self.x2 + o.x2)
    }
}

impl Sub for LatticePoint {
    type Output = LatticePoint;
    fn sub(self, o: LatticePoint) -> LatticePoint {
        LatticePoint::new(self.x1 - o.x1, self.x2 - o.x2)
    }
}

impl Neg for LatticePoint {
    type Output = LatticePoint;
    fn neg(self) -> LatticePoint {
        LatticePoint::new(-self.x1, -self.x2)
    }
}

impl fmt::Display for LatticePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x1, self.x2)
    }
}

/// One support atom: a step with its probability, both as a float and as the
/// exact normalized rational num/den it was rounded from.
#[derive(Clone, Copy, Debug)]
pub struct SupportAtom {
    pub step: LatticePoint,
    pub prob: f64,
    pub num: i128,
    pub den: i128,
}

/// Coordinates of a lattice point in the walk-adapted frame, together with the
/// adapted norm. The frame rescales by the symmetric square root of the
/// inverse covariance so that the walk is isotropic with per-axis variance
/// `sigma^2` in it.
#[derive(Clone, Copy, Debug)]
pub struct AnisotropicCoords {
    pub coords: [f64; 2],
    pub norm: f64,
}

/// An admissible step law.
#[derive(Clone, Debug)]
pub struct StepLaw {
    support: Vec<SupportAtom>,
    q: [[f64; 2]; 2],
    det_q: f64,
    kappa: f64,
    sigma: f64,
    sigma_axis: f64,
    period: u32,
    symmetric: bool,
    bipartite: bool,
    max_step_cheb: i64,
    tilde_matrix: [[f64; 2]; 2],
    hash: String,
}

fn gcd_i128(a: i128, b: i128) -> i128 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Triangularize integer row vectors by unimodular row operations and return
/// the diagonal. Row swaps and additions preserve the generated lattice; the
/// diagonal entry in the last column is the least positive generator of the
/// lattice's intersection with that axis once the earlier columns are pivoted.
fn lattice_diagonal<const D: usize>(mut rows: Vec<[i128; D]>) -> [i128; D] {
    let mut diag = [0i128; D];
    let mut top = 0usize;
    for col in 0..D {
        loop {
            // Pivot: row (>= top) with the smallest nonzero entry in `col`.
            let mut pivot: Option<usize> = None;
            for (i, r) in rows.iter().enumerate().skip(top) {
                if r[col] != 0 && pivot.map_or(true, |p| r[col].abs() < rows[p][col].abs()) {
                    pivot = Some(i);
                }
            }
            let Some(p) = pivot else { break };
            rows.swap(top, p);
            let mut reduced_all = true;
            let head = rows[top];
            for r in rows.iter_mut().skip(top + 1) {
                if r[col] != 0 {
                    let q = r[col].div_euclid(head[col]);
                    for k in 0..D {
                        r[k] -= q * head[k];
                    }
                    if r[col] != 0 {
                        reduced_all = false;
                    }
                }
            }
            if reduced_all {
                diag[col] = head[col].abs();
                top += 1;
                break;
            }
        }
    }
    diag
}

/// Symmetric square root of a symmetric positive definite 2x2 matrix.
fn spd_sqrt(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let s = det.sqrt();
    let t = (m[0][0] + m[1][1] + 2.0 * s).sqrt();
    [
        [(m[0][0] + s) / t, m[0][1] / t],
        [m[1][0] / t, (m[1][1] + s) / t],
    ]
}

#[derive(Serialize, Deserialize)]
struct LawJson {
    support: Vec<[i64; 4]>,
}

impl StepLaw {
    /// Build a law from `(step, weight numerator, weight denominator)` atoms.
    /// Weights are positive rationals and are normalized exactly; admissibility
    /// (zero mean, nondegenerate covariance, full-lattice support) is verified
    /// in exact arithmetic.
    pub fn from_support(atoms: &[(LatticePoint, i64, i64)]) -> Result<StepLaw> {
        if atoms.is_empty() {
            return Err(Error::InvalidLaw("empty support".into()));
        }
        let mut reduced: Vec<(LatticePoint, i128, i128)> = Vec::with_capacity(atoms.len());
        for &(z, num, den) in atoms {
            if num <= 0 || den <= 0 {
                return Err(Error::InvalidLaw(format!(
                    "weight {num}/{den} at {z} is not a positive rational"
                )));
            }
            if z.cheb() > 1 << 20 {
                return Err(Error::InvalidLaw(format!("step {z} unreasonably large")));
            }
            let g = gcd_i128(num as i128, den as i128);
            reduced.push((z, num as i128 / g, den as i128 / g));
        }
        reduced.sort_by_key(|&(z, _, _)| z);
        for w in reduced.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidLaw(format!("duplicate support point {}", w[0].0)));
            }
        }

        // Common denominator; weights need not sum to 1, they are normalized.
        let mut common_den: i128 = 1;
        for &(_, _, den) in &reduced {
            let g = gcd_i128(common_den, den);
            common_den = common_den
                .checked_mul(den / g)
                .ok_or_else(|| Error::InvalidLaw("weight denominators overflow".into()))?;
        }
        let mut counts: Vec<i128> = Vec::with_capacity(reduced.len());
        for &(_, num, den) in &reduced {
            let c = num
                .checked_mul(common_den / den)
                .ok_or_else(|| Error::InvalidLaw("weights overflow".into()))?;
            counts.push(c);
        }
        let mut total: i128 = counts.iter().sum();
        // Canonicalize so equivalent weight vectors produce identical atoms.
        let g_all = counts.iter().fold(total, |g, &c| gcd_i128(g, c));
        if g_all > 1 {
            for c in &mut counts {
                *c /= g_all;
            }
            total /= g_all;
        }

        // Exact zero-mean check.
        let mean1: i128 = reduced.iter().zip(&counts).map(|(&(z, _, _), &c)| c * z.x1 as i128).sum();
        let mean2: i128 = reduced.iter().zip(&counts).map(|(&(z, _, _), &c)| c * z.x2 as i128).sum();
        if mean1 != 0 || mean2 != 0 {
            return Err(Error::NonZeroMean { mean1, mean2, den: total });
        }

        // Covariance (exact rationals rounded once).
        let m11: i128 = reduced.iter().zip(&counts).map(|(&(z, _, _), &c)| c * (z.x1 as i128).pow(2)).sum();
        let m22: i128 = reduced.iter().zip(&counts).map(|(&(z, _, _), &c)| c * (z.x2 as i128).pow(2)).sum();
        let m12: i128 = reduced
            .iter()
            .zip(&counts)
            .map(|(&(z, _, _), &c)| c * z.x1 as i128 * z.x2 as i128)
            .sum();
        // det(Q) = (m11*m22 - m12^2)/total^2, exactly zero iff support is collinear.
        if m11 * m22 - m12 * m12 == 0 {
            return Err(Error::DegenerateCovariance);
        }
        let q = [
            [m11 as f64 / total as f64, m12 as f64 / total as f64],
            [m12 as f64 / total as f64, m22 as f64 / total as f64],
        ];

        // Full lattice support: the subgroup generated by the steps (for a
        // zero-mean law the reachable semigroup is that subgroup) must be the
        // whole lattice. A proper sublattice of finite index is exactly the
        // case where the characteristic function returns to 1 at a nonzero
        // dual point of the torus.
        let rows2: Vec<[i128; 2]> = reduced.iter().map(|&(z, _, _)| [z.x1 as i128, z.x2 as i128]).collect();
        let d2 = lattice_diagonal::<2>(rows2);
        if d2[0] == 0 || d2[1] == 0 {
            return Err(Error::Reducible);
        }
        let index = d2[0] * d2[1];
        if index != 1 {
            return Err(Error::CharFnUnitCircleZero { index });
        }

        // Period: least positive n with (0,0,n) in the lattice spanned by
        // (step, 1) over all steps. Reachability arguments (zero mean makes
        // the reachable set a group coset) identify this with gcd of the
        // return times.
        let rows3: Vec<[i128; 3]> = reduced
            .iter()
            .map(|&(z, _, _)| [z.x1 as i128, z.x2 as i128, 1])
            .collect();
        let d3 = lattice_diagonal::<3>(rows3);
        debug_assert!(d3[0] != 0 && d3[1] != 0 && d3[2] != 0);
        let period = d3[2] as u32;

        let support: Vec<SupportAtom> = reduced
            .iter()
            .zip(&counts)
            .map(|(&(z, _, _), &c)| SupportAtom {
                step: z,
                prob: c as f64 / total as f64,
                num: c,
                den: total,
            })
            .collect();

        let symmetric = support.iter().all(|a| {
            support
                .binary_search_by_key(&(-a.step), |b| b.step)
                .map(|j| support[j].num == a.num)
                .unwrap_or(false)
        });
        let bipartite = support.iter().all(|a| a.step.parity() == 1);
        let max_step_cheb = support.iter().map(|a| a.step.cheb()).max().unwrap();

        let det_q = q[0][0] * q[1][1] - q[0][1] * q[1][0];
        let kappa = std::f64::consts::PI * det_q.sqrt();
        let sigma = det_q.powf(0.25);
        // Largest per-direction standard deviation (eigenvalue of Q).
        let half_tr = 0.5 * (q[0][0] + q[1][1]);
        let disc = (0.25 * (q[0][0] - q[1][1]).powi(2) + q[0][1] * q[0][1]).sqrt();
        let sigma_axis = (half_tr + disc).sqrt();

        let q_inv = [
            [q[1][1] / det_q, -q[0][1] / det_q],
            [-q[1][0] / det_q, q[0][0] / det_q],
        ];
        let root = spd_sqrt(q_inv);
        let tilde_matrix = [
            [sigma * root[0][0], sigma * root[0][1]],
            [sigma * root[1][0], sigma * root[1][1]],
        ];

        let mut hasher = Sha256::new();
        for a in &support {
            hasher.update(format!("{},{},{},{};", a.step.x1, a.step.x2, a.num, a.den));
        }
        let hash = format!("{:x}", hasher.finalize());

        Ok(StepLaw {
            support,
            q,
            det_q,
            kappa,
            sigma,
            sigma_axis,
            period,
            symmetric,
            bipartite,
            max_step_cheb,
            tilde_matrix,
            hash,
        })
    }

    /// Named built-in laws.
    pub fn builtin(name: &str) -> Result<StepLaw> {
        let p = LatticePoint::new;
        match name {
            "srw" => Self::from_support(&[
                (p(1, 0), 1, 4),
                (p(-1, 0), 1, 4),
                (p(0, 1), 1, 4),
                (p(0, -1), 1, 4),
            ]),
            "lazy-srw" => Self::from_support(&[
                (p(0, 0), 1, 2),
                (p(1, 0), 1, 8),
                (p(-1, 0), 1, 8),
                (p(0, 1), 1, 8),
                (p(0, -1), 1, 8),
            ]),
            "kings" => Self::from_support(&[
                (p(1, 0), 1, 8),
                (p(-1, 0), 1, 8),
                (p(0, 1), 1, 8),
                (p(0, -1), 1, 8),
                (p(1, 1), 1, 8),
                (p(1, -1), 1, 8),
                (p(-1, 1), 1, 8),
                (p(-1, -1), 1, 8),
            ]),
            "longstep" => Self::from_support(&[
                (p(3, 0), 1, 8),
                (p(-3, 0), 1, 8),
                (p(0, 3), 1, 8),
                (p(0, -3), 1, 8),
                (p(1, 0), 1, 8),
                (p(-1, 0), 1, 8),
                (p(0, 1), 1, 8),
                (p(0, -1), 1, 8),
            ]),
            other => Err(Error::InvalidLaw(format!("unknown builtin law '{other}'"))),
        }
    }

    /// Parse `{"support": [[dx, dy, num, den], ...]}`.
    pub fn from_json_str(s: &str) -> Result<StepLaw> {
        let parsed: LawJson = serde_json::from_str(s)?;
        let atoms: Vec<(LatticePoint, i64, i64)> = parsed
            .support
            .iter()
            .map(|&[dx, dy, num, den]| (LatticePoint::new(dx, dy), num, den))
            .collect();
        Self::from_support(&atoms)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<StepLaw> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Resolve a CLI-style law argument: builtin name or a JSON file path.
    pub fn resolve(spec: &str) -> Result<StepLaw> {
        if let Ok(law) = Self::builtin(spec) {
            return Ok(law);
        }
        let path = std::path::Path::new(spec);
        if path.exists() {
            Self::from_json_file(path)
        } else {
            Err(Error::InvalidLaw(format!(
                "'{spec}' is neither a builtin law nor an existing file"
            )))
        }
    }

    pub fn to_json(&self) -> String {
        let support: Vec<[i64; 4]> = self
            .support
            .iter()
            .map(|a| [a.step.x1, a.step.x2, a.num as i64, a.den as i64])
            .collect();
        serde_json::to_string(&LawJson { support }).unwrap()
    }

    /// The reflected law `z -> p(-z)`.
    pub fn reflected(&self) -> StepLaw {
        let atoms: Vec<(LatticePoint, i64, i64)> = self
            .support
            .iter()
            .map(|a| (-a.step, a.num as i64, a.den as i64))
            .collect();
        Self::from_support(&atoms).expect("reflection preserves admissibility")
    }

    pub fn support(&self) -> &[SupportAtom] {
        &self.support
    }

    /// Covariance matrix `Q` of one step.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        self.q
    }

    pub fn det_q(&self) -> f64 {
        self.det_q
    }

    /// `kappa = pi * sqrt(det Q)`.
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// `sigma = (det Q)^(1/4)`: per-axis standard deviation in the adapted frame.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Largest per-direction standard deviation; used to size windows.
    pub fn sigma_axis(&self) -> f64 {
        self.sigma_axis
    }

    /// Period: gcd of the possible return times to the origin.
    pub fn period(&self) -> u32 {
        self.period
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// True when every step has odd coordinate sum, so the walk alternates
    /// between the even and odd sublattices.
    pub fn is_bipartite(&self) -> bool {
        self.bipartite
    }

    pub fn max_step_cheb(&self) -> i64 {
        self.max_step_cheb
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Characteristic function at `theta` as `(re, im)`. For symmetric laws the
    /// imaginary part is identically zero and is returned as exact 0.
    pub fn char_fn(&self, theta: [f64; 2]) -> (f64, f64) {
        let mut re = 0.0;
        let mut im = 0.0;
        for a in &self.support {
            let s = a.step.dot_f64(theta);
            re += a.prob * s.cos();
            if !self.symmetric {
                im += a.prob * s.sin();
            }
        }
        (re, im)
    }

    /// `1 - char_fn(theta)` as `(re, im)`, computed without cancellation near
    /// the origin: the real part is a sum of nonnegative `2 sin^2` terms.
    pub fn one_minus_char_fn(&self, theta: [f64; 2]) -> (f64, f64) {
        let mut re = 0.0;
        let mut im = 0.0;
        for a in &self.support {
            let h = (0.5 * a.step.dot_f64(theta)).sin();
            re += a.prob * 2.0 * h * h;
            if !self.symmetric {
                im -= a.prob * a.step.dot_f64(theta).sin();
            }
        }
        (re, im)
    }

    /// Coordinates of `x` in the walk-adapted frame.
    pub fn tilde(&self, x: LatticePoint) -> AnisotropicCoords {
        let m = self.tilde_matrix;
        let coords = [
            m[0][0] * x.x1 as f64 + m[0][1] * x.x2 as f64,
            m[1][0] * x.x1 as f64 + m[1][1] * x.x2 as f64,
        ];
        AnisotropicCoords {
            coords,
            norm: coords[0].hypot(coords[1]),
        }
    }

    /// Adapted norm of `x`.
    pub fn tilde_norm(&self, x: LatticePoint) -> f64 {
        self.tilde(x).norm
    }

    /// Default window radius for an `n`-step evolution started at `start`:
    /// enough that the mass ever leaving the window is far below any quantity
    /// the kernels are used for. For the simple random walk this is the usual
    /// `|start| + 6 sqrt(n)`.
    pub fn default_window_radius(&self, start: LatticePoint, n: u64) -> i64 {
        self.window_radius_with(start, n, 8.5)
    }

    /// Window radius with an explicit diffusive-margin constant `c`:
    /// `cheb(start) + ceil(c * sigma_axis * sqrt(n)) + 2`. The default margin
    /// is 8.5; smaller values trade window leakage for speed.
    pub fn window_radius_with(&self, start: LatticePoint, n: u64, c: f64) -> i64 {
        start.cheb() + (c * self.sigma_axis * (n as f64).sqrt()).ceil() as i64 + 2
    }
}
