//! Small numerical utilities: compensated summation, the exponential
//! integral, and least-squares line fitting.

/// Kahan–Babuska compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Exponential integral `E1(x) = integral_x^inf exp(-t)/t dt` for `x > 0`.
///
/// Power series around 0 for small arguments, a continued fraction (modified
/// Lentz) for large ones; both converge to full double precision in their
/// regime and agree on the overlap.
pub fn exp_e1(x: f64) -> f64 {
    assert!(x > 0.0, "exp_e1 requires a positive argument, got {x}");
    if x <= 1.2 {
        e1_series(x)
    } else {
        e1_continued_fraction(x)
    }
}

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

fn e1_series(x: f64) -> f64 {
    // E1(x) = -gamma - ln x + sum_{k>=1} (-1)^{k+1} x^k / (k * k!)
    let mut sum = 0.0f64;
    let mut term = 1.0f64;
    for k in 1..200 {
        let kf = k as f64;
        term *= x / kf;
        let contrib = term / kf;
        sum = if k % 2 == 1 { sum + contrib } else { sum - contrib };
        if contrib < 1e-18 * sum.abs().max(1.0) {
            break;
        }
    }
    -EULER_GAMMA - x.ln() + sum
}

fn e1_continued_fraction(x: f64) -> f64 {
    // E1(x) = exp(-x) / (x + 1 - 1^2/(x + 3 - 2^2/(x + 5 - ...)))
    let tiny = 1e-300;
    let mut b = x + 1.0;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for k in 1..400 {
        let a = -((k * k) as f64);
        b += 2.0;
        d = b + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x).exp() * h
}

/// Least-squares line `y = slope * x + intercept` with the coefficient of
/// determination.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two points to fit a line");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    assert!(sxx > 0.0, "abscissae are all equal");
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}
