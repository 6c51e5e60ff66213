//! Calibration diagnostics and the special functions they need.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::EigenGaussian;
use crate::error::{Error, Result};
use crate::rng::standard_normal;

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const SQRT_2PI: f64 = 2.506_628_274_631_000_5;
/// Default number of PIT histogram bins.
pub const PIT_BINS: usize = 20;
/// Largest sample Shapiro–Wilk accepts.
pub const SW_MAX_N: usize = 5000;

// ---------------------------------------------------------------------------
// special functions

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.5 {
        return 1.0 - erf_series(x);
    }
    if x > 27.3 {
        return 0.0;
    }
    // Continued fraction 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))), modified Lentz.
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for n in 1..500 {
        let a = n as f64 * 0.5;
        d = x + a * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = x + a / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() * FRAC_1_SQRT_PI / f
}

/// `erf(x) = 2/sqrt(pi) e^{-x²} Σ 2^n x^{2n+1} / (2n+1)!!`, all terms positive.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let x2 = 2.0 * x * x;
    for n in 1..200 {
        term *= x2 / (2 * n + 1) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    2.0 * FRAC_1_SQRT_PI * (-x * x).exp() * sum
}

pub fn erf(x: f64) -> f64 {
    if x.abs() < 2.5 {
        x.signum() * erf_series(x.abs())
    } else {
        1.0 - erfc(x)
    }
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Upper tail `1 - Φ(x)`, accurate far into the tail.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// Inverse standard normal CDF: rational initial guess refined by Halley steps.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    if p == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if p == 1.0 {
        return Ok(f64::INFINITY);
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let p_low = 0.02425;
    let mut x = if p < p_low {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };
    for _ in 0..2 {
        let e = if x < 0.0 { normal_cdf(x) - p } else { (1.0 - p) - normal_sf(x) };
        let u = e * SQRT_2PI * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || !(x >= 0.0) {
        return Err(Error::Domain(format!("incomplete gamma needs a > 0, x >= 0 (a={a}, x={x})")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    let log_prefactor = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..10_000 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        Ok((sum * log_prefactor.exp()).min(1.0))
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        Ok((1.0 - log_prefactor.exp() * h).max(0.0))
    }
}

pub fn chi2_cdf(x: f64, dof: usize) -> Result<f64> {
    if x < 0.0 || x.is_nan() {
        return Err(Error::Domain(format!("chi-squared argument must be >= 0, got {x}")));
    }
    if dof == 0 {
        return Err(Error::Domain("chi-squared needs at least one degree of freedom".into()));
    }
    gamma_p(0.5 * dof as f64, 0.5 * x)
}

// ---------------------------------------------------------------------------
// hypothesis tests

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub reject_at: Option<f64>,
}

impl TestResult {
    fn new(statistic: f64, p_value: f64, n: usize) -> Self {
        TestResult { statistic, p_value: p_value.clamp(0.0, 1.0), n, reject_at: None }
    }

    /// Mark the significance level this result is judged at.
    pub fn at(mut self, alpha: f64) -> Self {
        self.reject_at = Some(alpha);
        self
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Survival function of the Kolmogorov distribution, `P(K > t)`.
pub fn kolmogorov_sf(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    if t < 1.18 {
        let y = -PI * PI / (8.0 * t * t);
        let s: f64 = (1..=8).map(|k| ((2 * k - 1) as f64).powi(2) * y).map(f64::exp).sum();
        (1.0 - SQRT_2PI / t * s).clamp(0.0, 1.0)
    } else {
        let s: f64 = (1..=100)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (k * k) as f64 * t * t).exp()
            })
            .sum();
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// One-sample Kolmogorov–Smirnov test against a continuous CDF.
pub fn ks_test<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> Result<TestResult> {
    if sample.is_empty() {
        return Err(Error::Domain("KS test needs a non-empty sample".into()));
    }
    if sample.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("KS sample"));
    }
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in xs.iter().enumerate() {
        let f = cdf(*x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let en = n.sqrt();
    let p = kolmogorov_sf((en + 0.12 + 0.11 / en) * d);
    Ok(TestResult::new(d, p, xs.len()))
}

pub fn ks_uniform(sample: &[f64]) -> Result<TestResult> {
    ks_test(sample, |x| x.clamp(0.0, 1.0))
}

pub fn ks_chi2(sample: &[f64], dof: usize) -> Result<TestResult> {
    if sample.iter().any(|x| *x < 0.0) {
        return Err(Error::Domain("chi-squared sample has negative values".into()));
    }
    chi2_cdf(0.0, dof)?;
    ks_test(sample, |x| chi2_cdf(x, dof).unwrap_or(f64::NAN))
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, ci| acc * x + ci)
}

/// Shapiro–Wilk W test with Royston's coefficient and p-value approximations.
pub fn shapiro_wilk(sample: &[f64]) -> Result<TestResult> {
    const C1: [f64; 6] = [0.0, 0.221_157, -0.147_981, -2.071_19, 4.434_685, -2.706_056];
    const C2: [f64; 6] = [0.0, 0.042_981, -0.293_762, -1.752_461, 5.682_633, -3.582_633];
    const C3: [f64; 4] = [0.544, -0.399_78, 0.025_054, -6.714e-4];
    const C4: [f64; 4] = [1.3822, -0.778_57, 0.062_767, -0.002_032_2];
    const C5: [f64; 4] = [-1.5861, -0.310_82, -0.083_751, 0.003_891_5];
    const C6: [f64; 3] = [-0.4803, -0.082_676, 0.003_030_2];
    const GAMMA: [f64; 2] = [-2.273, 0.459];

    let n = sample.len();
    if !(3..=SW_MAX_N).contains(&n) {
        return Err(Error::Domain(format!("Shapiro-Wilk needs 3 <= n <= {SW_MAX_N}, got {n}")));
    }
    if sample.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Shapiro-Wilk sample"));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let range = x[n - 1] - x[0];
    if range < 1e-19 || range <= 1e-12 * x[0].abs().max(x[n - 1].abs()) {
        return Err(Error::Degenerate(format!("Shapiro-Wilk sample of {n} has zero range")));
    }

    // Coefficients for the upper half, largest first.
    let half = n / 2;
    let an = n as f64;
    let mut a = vec![0.0; half];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let m: Vec<f64> = (0..half)
            .map(|i| -normal_quantile((i as f64 + 1.0 - 0.375) / (an + 0.25)).expect("in (0,1)"))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) + m[0] / ssumm2;
        let (fac, first_scaled) = if n > 5 {
            let a2 = poly(&C2, rsn) + m[1] / ssumm2;
            let num = summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1];
            let den = 1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2;
            a[1] = a2;
            ((num / den).sqrt(), 2)
        } else {
            let num = summ2 - 2.0 * m[0] * m[0];
            let den = 1.0 - 2.0 * a1 * a1;
            ((num / den).sqrt(), 1)
        };
        a[0] = a1;
        for i in first_scaled..half {
            a[i] = m[i] / fac;
        }
    }

    // Full antisymmetric coefficient vector paired with the sorted sample.
    let coef = |i: usize| -> f64 {
        let j = n - 1 - i;
        match i.cmp(&j) {
            std::cmp::Ordering::Less => -a[i],
            std::cmp::Ordering::Greater => a[j],
            std::cmp::Ordering::Equal => 0.0,
        }
    };
    let xs: Vec<f64> = x.iter().map(|v| v / range).collect();
    let mean_x = xs.iter().sum::<f64>() / an;
    let mean_a = (0..n).map(coef).sum::<f64>() / an;
    let (mut ssa, mut ssx, mut sax) = (0.0, 0.0, 0.0);
    for (i, xi) in xs.iter().enumerate() {
        let da = coef(i) - mean_a;
        let dx = xi - mean_x;
        ssa += da * da;
        ssx += dx * dx;
        sax += da * dx;
    }
    let root = (ssa * ssx).sqrt();
    let w1 = (root - sax) * (root + sax) / (ssa * ssx);
    let w = 1.0 - w1;

    if n == 3 {
        let w = w.max(0.75);
        let p = 1.0 - 6.0 / PI * w.sqrt().acos();
        return Ok(TestResult::new(w, p, n));
    }
    let y = w1.ln();
    let p = if n <= 11 {
        let gamma = poly(&GAMMA, an);
        if y >= gamma {
            1e-19
        } else {
            let y = -(gamma - y).ln();
            let m = poly(&C3, an);
            let s = poly(&C4, an).exp();
            normal_sf((y - m) / s)
        }
    } else {
        let ln_n = an.ln();
        let m = poly(&C5, ln_n);
        let s = poly(&C6, ln_n).exp();
        normal_sf((y - m) / s)
    };
    Ok(TestResult::new(w, p, n))
}

/// Benjamini–Hochberg step-up procedure. Returns the reject mask in input order.
pub fn bh_fdr(p_values: &[f64], q: f64) -> Result<Vec<bool>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("FDR level must lie in (0, 1), got {q}")));
    }
    if p_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Domain("p-values must lie in [0, 1]".into()));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]));
    let cutoff = order
        .iter()
        .enumerate()
        .filter(|(k, &i)| p_values[i] <= (k + 1) as f64 * q / m as f64)
        .map(|(k, _)| k + 1)
        .max()
        .unwrap_or(0);
    let mut mask = vec![false; m];
    for &i in &order[..cutoff] {
        mask[i] = true;
    }
    Ok(mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwSummary {
    /// Fraction of tested dimensions not rejected under FDR control.
    pub pass_rate: f64,
    pub tested: usize,
    /// Dimensions with fewer than 3 observations, left out.
    pub skipped: usize,
    /// Constant dimensions; counted as rejected.
    pub degenerate: usize,
}

/// Per-dimension Shapiro–Wilk with Benjamini–Hochberg control at level `q`.
/// Samples longer than the test's maximum use their first 5000 values.
pub fn sw_pass_rate(dims: &[Vec<f64>], q: f64) -> Result<SwSummary> {
    let mut p_values = Vec::new();
    let (mut skipped, mut degenerate) = (0, 0);
    for d in dims {
        if d.len() < 3 {
            skipped += 1;
            continue;
        }
        match shapiro_wilk(&d[..d.len().min(SW_MAX_N)]) {
            Ok(r) => p_values.push(r.p_value),
            Err(Error::Degenerate(_)) => {
                degenerate += 1;
                p_values.push(0.0);
            }
            Err(e) => return Err(e),
        }
    }
    let tested = p_values.len();
    if tested == 0 {
        return Err(Error::Domain("no dimension has enough observations for Shapiro-Wilk".into()));
    }
    let rejected = bh_fdr(&p_values, q)?.iter().filter(|r| **r).count();
    Ok(SwSummary { pass_rate: (tested - rejected) as f64 / tested as f64, tested, skipped, degenerate })
}

// ---------------------------------------------------------------------------
// marginal scores

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("predictive std must be positive, got {sigma}")));
    }
    Ok(())
}

pub fn pit(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(normal_cdf((y - mu) / sigma))
}

/// Counts of `values` in `bins` equal-width bins over [0, 1].
pub fn pit_histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for u in values {
        let b = ((u * bins as f64) as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

/// Fraction of `(mu, sigma, y)` triples inside the central `nominal` interval.
pub fn coverage(mu: &[f64], sigma: &[f64], y: &[f64], nominal: f64) -> Result<f64> {
    if !(nominal > 0.0 && nominal < 1.0) {
        return Err(Error::Domain(format!("nominal level must lie in (0, 1), got {nominal}")));
    }
    if mu.len() != y.len() || sigma.len() != y.len() {
        return Err(Error::Dimension { expected: y.len(), got: mu.len().min(sigma.len()) });
    }
    if y.is_empty() {
        return Err(Error::Domain("coverage of an empty sample".into()));
    }
    let z = normal_quantile(0.5 + 0.5 * nominal)?;
    let inside = mu
        .iter()
        .zip(sigma)
        .zip(y)
        .filter(|((m, s), v)| (*v - *m).abs() <= z * **s)
        .count();
    Ok(inside as f64 / y.len() as f64)
}

/// Coverage of central intervals read off sorted ensemble members.
pub fn ensemble_coverage(samples: &[Vec<f64>], y: &[f64], nominal: f64) -> Result<f64> {
    if samples.len() != y.len() || y.is_empty() {
        return Err(Error::Dimension { expected: y.len(), got: samples.len() });
    }
    let mut inside = 0;
    for (s, v) in samples.iter().zip(y) {
        if s.is_empty() {
            return Err(Error::Domain("empty ensemble".into()));
        }
        let mut s = s.clone();
        s.sort_by(f64::total_cmp);
        let lo = empirical_quantile(&s, 0.5 - 0.5 * nominal);
        let hi = empirical_quantile(&s, 0.5 + 0.5 * nominal);
        if (lo..=hi).contains(v) {
            inside += 1;
        }
    }
    Ok(inside as f64 / y.len() as f64)
}

/// Linear-interpolated quantile of sorted data.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> f64 {
    if sigma <= 0.0 {
        return (y - mu).abs();
    }
    let z = (y - mu) / sigma;
    sigma * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - FRAC_1_SQRT_PI)
}

/// `E|X - y| - E|X - X'| / 2` over the ensemble members.
pub fn crps_ensemble(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("empty ensemble".into()));
    }
    let m = samples.len() as f64;
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let term1 = s.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    // Σ_i Σ_j |x_i - x_j| = 2 Σ_i (2i - m + 1) x_(i) for sorted, 0-based i
    let pair: f64 = s.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - m + 1.0) * x).sum::<f64>();
    Ok(term1 - pair / (m * m))
}

pub fn mse(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() || y.is_empty() {
        return Err(Error::Dimension { expected: y.len(), got: pred.len() });
    }
    Ok(pred.iter().zip(y).map(|(p, v)| (p - v).powi(2)).sum::<f64>() / y.len() as f64)
}

pub fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

// ---------------------------------------------------------------------------
// joint shape

/// Which residual enters the Mahalanobis statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualMode {
    /// `y - μ`: calibrated beliefs give `E[m] = d`.
    Mean,
    /// `y - ŷ` with `ŷ` one draw from the belief: `E[m] = 2d`.
    Sample { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisSummary {
    pub ks: TestResult,
    pub mean: f64,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl MahalanobisSummary {
    /// `mean(m) / d`.
    pub fn mean_ratio(&self) -> f64 {
        self.mean / self.dim as f64
    }
}

/// Squared Mahalanobis distances of targets under their beliefs, tested against χ²_d.
pub fn mahalanobis_suite(
    beliefs: &[EigenGaussian],
    targets: &[Vec<f64>],
    mode: ResidualMode,
) -> Result<MahalanobisSummary> {
    if beliefs.len() != targets.len() || beliefs.is_empty() {
        return Err(Error::Dimension { expected: beliefs.len(), got: targets.len() });
    }
    let dim = beliefs[0].dim();
    let mut rng = match mode {
        ResidualMode::Sample { seed } => Some(crate::rng::stream_rng(seed, crate::rng::AUX_STREAM_BASE)),
        ResidualMode::Mean => None,
    };
    let mut values = Vec::with_capacity(beliefs.len());
    for (b, y) in beliefs.iter().zip(targets) {
        if b.dim() != dim || y.len() != dim {
            return Err(Error::Dimension { expected: dim, got: y.len().min(b.dim()) });
        }
        let m = match rng.as_mut() {
            None => b.whiten(y).mahalanobis(),
            Some(rng) => {
                let draw = b.sample(rng, 1).pop().expect("one draw");
                // whiten(y - draw + μ) = Λ⁻¹Uᵀ(y - draw)
                let shifted: Vec<f64> =
                    y.iter().zip(&draw).zip(&b.mean).map(|((v, d), m)| v - d + m).collect();
                b.whiten(&shifted).mahalanobis()
            }
        };
        values.push(m);
    }
    let ks = ks_chi2(&values, dim)?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(MahalanobisSummary { ks, mean, dim, values })
}

/// Draw `count` standard normals; test helper shared with the acceptance suite.
pub fn normal_draws<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<f64> {
    (0..count).map(|_| standard_normal(rng)).collect()
}
