//! Gaussian predictive laws in eigenframe form.
//!
//! A belief is parameterized by a translation `t_y`, nonnegative eigenvalues
//! `lambdas` and an orthogonal frame `U = H_R ... H_1` built from Householder
//! reflections. Samples are `U Λ Uᵀ (y0 + t_y)` with `y0 ~ N(0, I)`, so the law
//! is `N(U Λ Uᵀ t_y, U Λ² Uᵀ)`. The frame is never materialized.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal;

/// Floor applied to eigenvalues when dividing by them.
pub const LAMBDA_MIN: f64 = 1e-6;
/// Interval for the raw scale `c`; eigenvalues are `1 + c`.
pub const SCALE_BOUNDS: (f64, f64) = (-1.0, 4.5);
pub const TRANSLATION_BOUNDS: (f64, f64) = (-15.0, 15.0);
pub const DEFAULT_REFLECTIONS: usize = 24;
/// Generators shorter than this act as the identity.
pub const DEGENERATE_GENERATOR: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-9;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn check_generator(index: usize, v: &[f64]) -> Result<bool> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < DEGENERATE_GENERATOR {
        return Ok(false);
    }
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::Normalization { index, norm });
    }
    Ok(true)
}

#[inline]
fn reflect(v: &[f64], x: &mut [f64]) {
    let dot: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    let k = 2.0 * dot;
    x.iter_mut().zip(v).for_each(|(xi, vi)| *xi -= k * vi);
}

/// `Ux` (reflections applied `H_1` first) or `Uᵀx` (`H_R` first), in place.
/// Generators must already be validated.
pub(crate) fn rotate_in_place(hh_vectors: &[Vec<f64>], x: &mut [f64], transpose: bool) {
    let live = |v: &&Vec<f64>| {
        v.iter().map(|c| c * c).sum::<f64>() >= DEGENERATE_GENERATOR * DEGENERATE_GENERATOR
    };
    if transpose {
        hh_vectors.iter().rev().filter(live).for_each(|v| reflect(v, x));
    } else {
        hh_vectors.iter().filter(live).for_each(|v| reflect(v, x));
    }
}

/// Apply the frame `U` (or `Uᵀ`) to `x` by sequential reflections `x - 2v(vᵀx)`.
pub fn apply_rotation(hh_vectors: &[Vec<f64>], x: &[f64], transpose: bool) -> Result<Vec<f64>> {
    for (i, v) in hh_vectors.iter().enumerate() {
        if v.len() != x.len() {
            return Err(Error::Dimension { expected: x.len(), got: v.len() });
        }
        check_generator(i, v)?;
    }
    let mut out = x.to_vec();
    rotate_in_place(hh_vectors, &mut out, transpose);
    Ok(out)
}

fn validate_frame(d: usize, lambdas: &[f64], hh_vectors: &mut [Vec<f64>]) -> Result<()> {
    if lambdas.len() != d {
        return Err(Error::Dimension { expected: d, got: lambdas.len() });
    }
    if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Domain("eigenvalues must be finite and nonnegative".into()));
    }
    for (i, v) in hh_vectors.iter_mut().enumerate() {
        if v.len() != d {
            return Err(Error::Dimension { expected: d, got: v.len() });
        }
        if !check_generator(i, v)? {
            v.iter_mut().for_each(|c| *c = 0.0);
        }
    }
    Ok(())
}

/// Result of projecting a residual into the eigenframe.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenResidual {
    /// `Uᵀ(y - μ)`.
    pub r: Vec<f64>,
    /// `r_i / max(λ_i, LAMBDA_MIN)`.
    pub z: Vec<f64>,
}

impl EigenResidual {
    /// Squared Mahalanobis distance.
    pub fn mahalanobis(&self) -> f64 {
        self.z.iter().map(|z| z * z).sum()
    }
}

/// `N(mean, U Λ² Uᵀ)` with an explicit mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenGaussian {
    pub mean: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub hh_vectors: Vec<Vec<f64>>,
}

impl EigenGaussian {
    pub fn new(mean: Vec<f64>, lambdas: Vec<f64>, mut hh_vectors: Vec<Vec<f64>>) -> Result<Self> {
        validate_frame(mean.len(), &lambdas, &mut hh_vectors)?;
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("belief mean"));
        }
        Ok(EigenGaussian { mean, lambdas, hh_vectors })
    }

    /// Independent coordinates with the given standard deviations.
    pub fn diagonal(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        EigenGaussian::new(mean, std, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn whiten(&self, y: &[f64]) -> EigenResidual {
        let mut r: Vec<f64> = y.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        rotate_in_place(&self.hh_vectors, &mut r, true);
        let z = r.iter().zip(&self.lambdas).map(|(ri, l)| ri / l.max(LAMBDA_MIN)).collect();
        EigenResidual { r, z }
    }

    pub fn nll(&self, y: &[f64]) -> f64 {
        let res = self.whiten(y);
        let log_det: f64 = self.lambdas.iter().map(|l| 2.0 * l.max(LAMBDA_MIN).ln()).sum();
        0.5 * (log_det + res.mahalanobis()) + 0.5 * self.dim() as f64 * LN_2PI
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                let mut x: Vec<f64> = (0..self.dim()).map(|_| standard_normal(rng)).collect();
                rotate_in_place(&self.hh_vectors, &mut x, true);
                x.iter_mut().zip(&self.lambdas).for_each(|(xi, l)| *xi *= l);
                rotate_in_place(&self.hh_vectors, &mut x, false);
                x.iter_mut().zip(&self.mean).for_each(|(xi, m)| *xi += m);
                x
            })
            .collect()
    }

    /// Dense covariance `U Λ² Uᵀ`.
    pub fn covariance(&self) -> Array2<f64> {
        let d = self.dim();
        let mut cov = Array2::zeros((d, d));
        for j in 0..d {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            rotate_in_place(&self.hh_vectors, &mut e, true);
            e.iter_mut().zip(&self.lambdas).for_each(|(x, l)| *x *= l * l);
            rotate_in_place(&self.hh_vectors, &mut e, false);
            cov.column_mut(j).iter_mut().zip(&e).for_each(|(c, v)| *c = *v);
        }
        cov
    }

    /// `sqrt(diag Σ)`, computed as `‖Λ Uᵀ e_i‖`.
    pub fn marginal_std(&self) -> Vec<f64> {
        if self.hh_vectors.iter().all(|v| v.iter().all(|c| *c == 0.0)) {
            return self.lambdas.clone();
        }
        let d = self.dim();
        (0..d)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                rotate_in_place(&self.hh_vectors, &mut e, true);
                e.iter().zip(&self.lambdas).map(|(x, l)| (x * l).powi(2)).sum::<f64>().sqrt()
            })
            .collect()
    }

    /// Squared 2-Wasserstein distance to `N(target_mean, sigma2 I)`.
    pub fn w2_squared_to_isotropic(&self, target_mean: &[f64], sigma2: f64) -> Result<f64> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::Domain(format!("target variance must be nonnegative, got {sigma2}")));
        }
        if target_mean.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: target_mean.len() });
        }
        let s = sigma2.sqrt();
        let dm: f64 = self.mean.iter().zip(target_mean).map(|(a, b)| (a - b).powi(2)).sum();
        let dl: f64 = self.lambdas.iter().map(|l| (l - s).powi(2)).sum();
        Ok(dm + dl)
    }

    pub fn w2_to_isotropic(&self, target_mean: &[f64], sigma2: f64) -> Result<f64> {
        self.w2_squared_to_isotropic(target_mean, sigma2).map(f64::sqrt)
    }
}

/// Belief in transport form: samples `U Λ Uᵀ (y0 + t_y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub t_y: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub hh_vectors: Vec<Vec<f64>>,
}

impl GaussianBelief {
    pub fn new(t_y: Vec<f64>, lambdas: Vec<f64>, mut hh_vectors: Vec<Vec<f64>>) -> Result<Self> {
        validate_frame(t_y.len(), &lambdas, &mut hh_vectors)?;
        if t_y.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("belief translation"));
        }
        Ok(GaussianBelief { t_y, lambdas, hh_vectors })
    }

    pub fn dim(&self) -> usize {
        self.t_y.len()
    }

    /// Apply `U Λ Uᵀ`.
    fn transport(&self, x: &mut [f64]) {
        rotate_in_place(&self.hh_vectors, x, true);
        x.iter_mut().zip(&self.lambdas).for_each(|(xi, l)| *xi *= l);
        rotate_in_place(&self.hh_vectors, x, false);
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = self.t_y.clone();
        self.transport(&mut m);
        m
    }

    pub fn mean_and_cov(&self) -> (Vec<f64>, Array2<f64>) {
        let e = self.to_eigen();
        let cov = e.covariance();
        (e.mean, cov)
    }

    pub fn to_eigen(&self) -> EigenGaussian {
        EigenGaussian {
            mean: self.mean(),
            lambdas: self.lambdas.clone(),
            hh_vectors: self.hh_vectors.clone(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                let mut x: Vec<f64> =
                    self.t_y.iter().map(|t| standard_normal(rng) + t).collect();
                self.transport(&mut x);
                x
            })
            .collect()
    }

    pub fn nll(&self, y: &[f64]) -> f64 {
        self.to_eigen().nll(y)
    }

    pub fn whiten(&self, y: &[f64]) -> EigenResidual {
        self.to_eigen().whiten(y)
    }

    pub fn w2_squared_to_isotropic(&self, target_mean: &[f64], sigma2: f64) -> Result<f64> {
        self.to_eigen().w2_squared_to_isotropic(target_mean, sigma2)
    }
}

fn check_bounds(lo: f64, hi: f64) -> Result<(f64, f64)> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("soft bound needs lo < hi, got [{lo}, {hi}]")));
    }
    Ok((0.5 * (lo + hi), 0.5 * (hi - lo)))
}

/// `u (1 + u^16)^(-1/16)`: identity near zero, saturates at ±1.
fn squash(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        u * (1.0 + u.powi(16)).powf(-1.0 / 16.0)
    } else {
        u.signum() * (1.0 + u.powi(-16)).powf(-1.0 / 16.0)
    }
}

fn squash_grad(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        (1.0 + u.powi(16)).powf(-17.0 / 16.0)
    } else {
        // (1 + u^16)^(-17/16) = |u|^-17 (1 + u^-16)^(-17/16)
        u.abs().powi(-17) * (1.0 + u.powi(-16)).powf(-17.0 / 16.0)
    }
}

/// Smooth monotone map of the real line onto `(lo, hi)`, linear to within
/// about 1e-6 on the middle half of the interval.
pub fn soft_bound(x: f64, lo: f64, hi: f64) -> Result<f64> {
    let (mid, half) = check_bounds(lo, hi)?;
    Ok(mid + half * squash((x - mid) / half))
}

pub fn soft_bound_grad(x: f64, lo: f64, hi: f64) -> Result<f64> {
    let (mid, half) = check_bounds(lo, hi)?;
    Ok(squash_grad((x - mid) / half))
}

/// Inverse of [`soft_bound`] on the open interval.
pub fn soft_bound_inverse(y: f64, lo: f64, hi: f64) -> Result<f64> {
    let (mid, half) = check_bounds(lo, hi)?;
    let v = (y - mid) / half;
    if v.abs() >= 1.0 {
        return Err(Error::Domain(format!("{y} lies outside the open interval ({lo}, {hi})")));
    }
    Ok(mid + half * v * (1.0 - v.powi(16)).powf(-1.0 / 16.0))
}
