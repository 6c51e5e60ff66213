//! Ground-truth trajectory generation.
//!
//! Deterministic ODEs are advanced with classical RK4, SDEs with
//! Euler-Maruyama, and the discrete-time families with their own recursions.
//! All arithmetic is `f64`; the state is recorded after every step, so the
//! sampling interval equals the solver step.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, standard_normal, StreamRng};

pub type Params = BTreeMap<String, f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Lorenz63,
    Rossler,
    Chua,
    Lorenz96,
    #[serde(rename = "OU")]
    Ou,
    DoubleWell,
    #[serde(rename = "SLDS")]
    Slds,
    SeasonalAR,
    #[serde(rename = "GARCH")]
    Garch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Rk4,
    EulerMaruyama,
    Discrete,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Lorenz63 => "lorenz63",
            Family::Rossler => "rossler",
            Family::Chua => "chua",
            Family::Lorenz96 => "lorenz96",
            Family::Ou => "ou",
            Family::DoubleWell => "double_well",
            Family::Slds => "slds",
            Family::SeasonalAR => "seasonal_ar",
            Family::Garch => "garch",
        }
    }

    pub fn required_params(self) -> &'static [&'static str] {
        match self {
            Family::Lorenz63 => &["sigma", "rho", "beta"],
            Family::Rossler => &["a", "b", "c"],
            Family::Chua => &["alpha", "beta", "m0", "m1"],
            Family::Lorenz96 => &["forcing"],
            Family::Ou => &["theta", "mu", "sigma"],
            Family::DoubleWell => &["a", "sigma"],
            Family::Slds => &["A1", "Q1", "A2", "Q2", "p11", "p22"],
            Family::SeasonalAR => &["S", "phi", "sigma", "a0", "amp_drift_per_step"],
            Family::Garch => &["omega", "alpha", "beta"],
        }
    }

    pub fn method(self) -> Method {
        match self {
            Family::Lorenz63 | Family::Rossler | Family::Chua | Family::Lorenz96 => Method::Rk4,
            Family::Ou | Family::DoubleWell => Method::EulerMaruyama,
            Family::Slds | Family::SeasonalAR | Family::Garch => Method::Discrete,
        }
    }

    /// Fixed state dimension, `None` for Lorenz-96 whose dimension is configurable.
    pub fn fixed_dim(self) -> Option<usize> {
        match self {
            Family::Lorenz63 | Family::Rossler | Family::Chua => Some(3),
            Family::Lorenz96 => None,
            _ => Some(1),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub family: Family,
    pub params: Params,
    pub dim: usize,
    pub dt: f64,
    pub n_steps: usize,
    pub initial_cond: Vec<f64>,
    pub method: Method,
    pub rng_seed: u64,
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        match self.family.fixed_dim() {
            Some(d) if d != self.dim => {
                return Err(Error::Dimension { expected: d, got: self.dim });
            }
            None if self.dim < 4 => {
                return Err(Error::Config(format!(
                    "lorenz96 needs dim >= 4, got {}",
                    self.dim
                )));
            }
            _ => {}
        }
        if self.initial_cond.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: self.initial_cond.len() });
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be positive".into()));
        }
        if self.method != self.family.method() {
            return Err(Error::Config(format!(
                "{} must use {:?}, got {:?}",
                self.family,
                self.family.method(),
                self.method
            )));
        }
        Model::resolve(self.family, &self.params).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShockKind {
    None,
    Param,
    StateEps,
    Switch,
}

/// How a `StateEps` shock perturbs the state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateEpsMode {
    /// `x_i += eps` on every coordinate.
    #[default]
    Additive,
    /// `x_i *= 1 + eps` on every coordinate.
    Multiplicative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShockSpec {
    pub kind: ShockKind,
    pub shock_frac: f64,
    #[serde(default)]
    pub param_updates: Params,
    #[serde(default)]
    pub state_eps: f64,
    #[serde(default)]
    pub state_eps_mode: StateEpsMode,
    #[serde(default)]
    pub switch_state: Option<Vec<f64>>,
}

pub const DEFAULT_SHOCK_FRAC: f64 = 0.35;

impl Default for ShockSpec {
    fn default() -> Self {
        ShockSpec::none()
    }
}

impl ShockSpec {
    pub fn none() -> Self {
        ShockSpec {
            kind: ShockKind::None,
            shock_frac: DEFAULT_SHOCK_FRAC,
            param_updates: Params::new(),
            state_eps: 0.0,
            state_eps_mode: StateEpsMode::Additive,
            switch_state: None,
        }
    }

    pub fn param(updates: &[(&str, f64)]) -> Self {
        ShockSpec { kind: ShockKind::Param, param_updates: to_params(updates), ..Self::none() }
    }

    pub fn state_eps(eps: f64) -> Self {
        ShockSpec { kind: ShockKind::StateEps, state_eps: eps, ..Self::none() }
    }

    pub fn switch(updates: &[(&str, f64)], state: Option<Vec<f64>>) -> Self {
        ShockSpec {
            kind: ShockKind::Switch,
            param_updates: to_params(updates),
            switch_state: state,
            ..Self::none()
        }
    }

    /// Step index at which the shock is applied, `None` for unshocked runs.
    pub fn shock_step(&self, n_steps: usize) -> Option<usize> {
        match self.kind {
            ShockKind::None => None,
            _ => Some((self.shock_frac * n_steps as f64).floor() as usize),
        }
    }

    pub fn validate(&self, spec: &SystemSpec) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shock_frac) {
            return Err(Error::Config(format!("shock_frac {} outside [0, 1]", self.shock_frac)));
        }
        if self.kind == ShockKind::Param && self.param_updates.is_empty() {
            return Err(Error::Config("param shock without parameter updates".into()));
        }
        let known = spec.family.required_params();
        if let Some(name) = self.param_updates.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::Config(format!("{} has no parameter `{name}`", spec.family)));
        }
        if let Some(state) = &self.switch_state {
            if state.len() != spec.dim {
                return Err(Error::Dimension { expected: spec.dim, got: state.len() });
            }
        }
        if self.kind == ShockKind::StateEps && !self.state_eps.is_finite() {
            return Err(Error::Config("state_eps must be finite".into()));
        }
        let mut shocked = spec.params.clone();
        shocked.extend(self.param_updates.iter().map(|(k, v)| (k.clone(), *v)));
        Model::resolve(spec.family, &shocked).map(|_| ())
    }
}

pub fn to_params(pairs: &[(&str, f64)]) -> Params {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// `n_steps x dim`, row `k` is the state after step `k + 1`.
    pub values: Array2<f64>,
    pub spec: SystemSpec,
    pub shock: ShockSpec,
    pub shock_step: Option<usize>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Parameters resolved into a typed form, so the inner loops avoid map lookups.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Model {
    Lorenz63 { sigma: f64, rho: f64, beta: f64 },
    Rossler { a: f64, b: f64, c: f64 },
    Chua { alpha: f64, beta: f64, m0: f64, m1: f64 },
    Lorenz96 { forcing: f64 },
    Ou { theta: f64, mu: f64, sigma: f64 },
    DoubleWell { a: f64, sigma: f64 },
    Slds(SldsParams),
    SeasonalAr(SeasonalArParams),
    Garch(GarchParams),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SldsParams {
    pub a: [f64; 2],
    pub q: [f64; 2],
    pub stay: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeasonalArParams {
    pub period: f64,
    pub phi: f64,
    pub sigma: f64,
    pub a0: f64,
    pub amp_drift_per_step: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GarchParams {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl GarchParams {
    pub fn stationary_variance(&self) -> f64 {
        self.omega / (1.0 - self.alpha - self.beta)
    }
}

fn get(params: &Params, family: Family, name: &str) -> Result<f64> {
    let v = *params
        .get(name)
        .ok_or_else(|| Error::Config(format!("{family} requires parameter `{name}`")))?;
    if !v.is_finite() {
        return Err(Error::Config(format!("{family} parameter `{name}` is not finite")));
    }
    Ok(v)
}

fn probability(v: f64, name: &str) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(Error::Config(format!("probability `{name}` = {v} outside [0, 1]")))
    }
}

fn nonnegative(v: f64, name: &str) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(Error::Config(format!("`{name}` = {v} must be nonnegative")))
    }
}

impl Model {
    fn resolve(family: Family, p: &Params) -> Result<Model> {
        let g = |name: &str| get(p, family, name);
        Ok(match family {
            Family::Lorenz63 => Model::Lorenz63 { sigma: g("sigma")?, rho: g("rho")?, beta: g("beta")? },
            Family::Rossler => Model::Rossler { a: g("a")?, b: g("b")?, c: g("c")? },
            Family::Chua => {
                Model::Chua { alpha: g("alpha")?, beta: g("beta")?, m0: g("m0")?, m1: g("m1")? }
            }
            Family::Lorenz96 => Model::Lorenz96 { forcing: g("forcing")? },
            Family::Ou => Model::Ou {
                theta: g("theta")?,
                mu: g("mu")?,
                sigma: nonnegative(g("sigma")?, "sigma")?,
            },
            Family::DoubleWell => {
                Model::DoubleWell { a: g("a")?, sigma: nonnegative(g("sigma")?, "sigma")? }
            }
            Family::Slds => Model::Slds(SldsParams {
                a: [g("A1")?, g("A2")?],
                q: [nonnegative(g("Q1")?, "Q1")?, nonnegative(g("Q2")?, "Q2")?],
                stay: [probability(g("p11")?, "p11")?, probability(g("p22")?, "p22")?],
            }),
            Family::SeasonalAR => {
                let period = g("S")?;
                if period <= 0.0 {
                    return Err(Error::Config(format!("seasonal period S = {period} must be positive")));
                }
                Model::SeasonalAr(SeasonalArParams {
                    period,
                    phi: g("phi")?,
                    sigma: nonnegative(g("sigma")?, "sigma")?,
                    a0: g("a0")?,
                    amp_drift_per_step: g("amp_drift_per_step")?,
                })
            }
            Family::Garch => {
                let gp = GarchParams {
                    omega: nonnegative(g("omega")?, "omega")?,
                    alpha: nonnegative(g("alpha")?, "alpha")?,
                    beta: nonnegative(g("beta")?, "beta")?,
                };
                if gp.alpha + gp.beta >= 1.0 {
                    return Err(Error::Config(format!(
                        "GARCH alpha + beta = {} must be < 1 for a stationary start",
                        gp.alpha + gp.beta
                    )));
                }
                Model::Garch(gp)
            }
        })
    }

    /// Time derivative (ODEs) or drift (SDEs).
    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            Model::Lorenz63 { sigma, rho, beta } => {
                out[0] = sigma * (x[1] - x[0]);
                out[1] = x[0] * (rho - x[2]) - x[1];
                out[2] = x[0] * x[1] - beta * x[2];
            }
            Model::Rossler { a, b, c } => {
                out[0] = -x[1] - x[2];
                out[1] = x[0] + a * x[1];
                out[2] = b + x[2] * (x[0] - c);
            }
            Model::Chua { alpha, beta, m0, m1 } => {
                let h = m1 * x[0] + 0.5 * (m0 - m1) * ((x[0] + 1.0).abs() - (x[0] - 1.0).abs());
                out[0] = alpha * (x[1] - x[0] - h);
                out[1] = x[0] - x[1] + x[2];
                out[2] = -beta * x[1];
            }
            Model::Lorenz96 { forcing } => {
                let d = x.len();
                for j in 0..d {
                    let xp1 = x[(j + 1) % d];
                    let xm1 = x[(j + d - 1) % d];
                    let xm2 = x[(j + d - 2) % d];
                    out[j] = (xp1 - xm2) * xm1 - x[j] + forcing;
                }
            }
            Model::Ou { theta, mu, .. } => out[0] = theta * (mu - x[0]),
            Model::DoubleWell { a, .. } => out[0] = a * x[0] - x[0] * x[0] * x[0],
            Model::Slds(_) | Model::SeasonalAr(_) | Model::Garch(_) => {
                unreachable!("discrete families have no continuous-time right-hand side")
            }
        }
    }

    fn diffusion(&self) -> f64 {
        match *self {
            Model::Ou { sigma, .. } | Model::DoubleWell { sigma, .. } => sigma,
            _ => 0.0,
        }
    }

    fn is_continuous(&self) -> bool {
        !matches!(self, Model::Slds(_) | Model::SeasonalAr(_) | Model::Garch(_))
    }
}

fn check_dim(family: Family, state: &[f64]) -> Result<()> {
    match family.fixed_dim() {
        Some(d) if d != state.len() => Err(Error::Dimension { expected: d, got: state.len() }),
        None if state.len() < 4 => Err(Error::Dimension { expected: 4, got: state.len() }),
        _ => Ok(()),
    }
}

/// Exact right-hand side of the ODE (or SDE drift) for `family` at `state`.
pub fn system_rhs(family: Family, params: &Params, state: &[f64]) -> Result<Vec<f64>> {
    check_dim(family, state)?;
    let model = Model::resolve(family, params)?;
    if !model.is_continuous() {
        return Err(Error::Config(format!("{family} is discrete-time and has no right-hand side")));
    }
    let mut out = vec![0.0; state.len()];
    model.rhs(state, &mut out);
    Ok(out)
}

/// One classical fourth-order Runge-Kutta step.
pub fn rk4_step<F>(mut rhs: F, state: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = state.len();
    let k1 = rhs(state);
    let mut tmp: Vec<f64> = (0..n).map(|i| state[i] + 0.5 * dt * k1[i]).collect();
    let k2 = rhs(&tmp);
    tmp.iter_mut().enumerate().for_each(|(i, t)| *t = state[i] + 0.5 * dt * k2[i]);
    let k3 = rhs(&tmp);
    tmp.iter_mut().enumerate().for_each(|(i, t)| *t = state[i] + dt * k3[i]);
    let k4 = rhs(&tmp);
    let next: Vec<f64> = (0..n)
        .map(|i| state[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    let stages_finite = [&k1, &k2, &k3, &k4].iter().all(|k| k.iter().all(|v| v.is_finite()));
    if !stages_finite || next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rk4 stage"));
    }
    Ok(next)
}

/// One Euler-Maruyama step with diagonal diffusion: `x + f(x) dt + g(x) sqrt(dt) xi`.
pub fn em_step<D, G, R>(mut drift: D, mut diffusion: G, state: &[f64], dt: f64, rng: &mut R) -> Result<Vec<f64>>
where
    D: FnMut(&[f64]) -> Vec<f64>,
    G: FnMut(&[f64]) -> Vec<f64>,
    R: Rng + ?Sized,
{
    let f = drift(state);
    let g = diffusion(state);
    let sq = dt.sqrt();
    let next: Vec<f64> = (0..state.len())
        .map(|i| state[i] + f[i] * dt + g[i] * sq * standard_normal(rng))
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("euler-maruyama step"));
    }
    Ok(next)
}

/// Hidden state carried by the discrete-time families.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Latent {
    /// SLDS regime, 0 or 1.
    pub regime: usize,
    /// GARCH conditional variance of the previous step.
    pub variance: f64,
}

impl Default for Latent {
    fn default() -> Self {
        Latent { regime: 0, variance: f64::NAN }
    }
}

/// SLDS update given its two draws: `u` uniform on [0,1) decides the regime
/// transition, then `x' = A_s x + sqrt(Q_s) xi` in the new regime.
pub fn slds_update(p: &SldsParams, x: f64, regime: usize, u: f64, xi: f64) -> (f64, usize) {
    let next = if u < p.stay[regime] { regime } else { 1 - regime };
    (p.a[next] * x + p.q[next].sqrt() * xi, next)
}

/// Seasonal AR value at time `t` given `x_{t-1}` and an innovation draw.
pub fn seasonal_ar_update(p: &SeasonalArParams, x_prev: f64, t: usize, eps: f64) -> f64 {
    let amp = p.a0 + t as f64 * p.amp_drift_per_step;
    amp * (2.0 * std::f64::consts::PI * t as f64 / p.period).cos() + p.phi * x_prev + p.sigma * eps
}

/// GARCH(1,1) conditional variance `omega + alpha x_{t-1}^2 + beta var_{t-1}`.
pub fn garch_variance(p: &GarchParams, x_prev: f64, var_prev: f64) -> f64 {
    p.omega + p.alpha * x_prev * x_prev + p.beta * var_prev
}

/// One step of a discrete-time family. Returns the new observable state and latent.
pub fn discrete_step<R: Rng + ?Sized>(
    family: Family,
    params: &Params,
    state: &[f64],
    latent: Latent,
    t: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Latent)> {
    check_dim(family, state)?;
    let model = Model::resolve(family, params)?;
    discrete_model_step(&model, state[0], latent, t, rng).map(|(x, l)| (vec![x], l))
}

fn discrete_model_step<R: Rng + ?Sized>(
    model: &Model,
    x: f64,
    latent: Latent,
    t: usize,
    rng: &mut R,
) -> Result<(f64, Latent)> {
    match model {
        Model::Slds(p) => {
            let u: f64 = rng.random();
            let xi = standard_normal(rng);
            let (x, regime) = slds_update(p, x, latent.regime, u, xi);
            Ok((x, Latent { regime, ..latent }))
        }
        Model::SeasonalAr(p) => Ok((seasonal_ar_update(p, x, t, standard_normal(rng)), latent)),
        Model::Garch(p) => {
            let var = if t == 0 || !latent.variance.is_finite() {
                p.stationary_variance()
            } else {
                garch_variance(p, x, latent.variance)
            };
            Ok((var.sqrt() * standard_normal(rng), Latent { variance: var, ..latent }))
        }
        _ => Err(Error::Config("not a discrete-time family".into())),
    }
}

/// Integrate `spec` for `n_steps`, applying `shock` at its shock step.
///
/// Rows before the shock step are bitwise identical to the unshocked run with
/// the same seed: the shock touches neither the RNG stream nor earlier steps.
pub fn simulate(spec: &SystemSpec, shock: &ShockSpec) -> Result<Trajectory> {
    spec.validate()?;
    shock.validate(spec)?;
    let n = spec.n_steps;
    let dim = spec.dim;
    let shock_step = shock.shock_step(n);

    let mut params = spec.params.clone();
    let mut model = Model::resolve(spec.family, &params)?;
    let mut rng: StreamRng = rng::stream_rng(spec.rng_seed, rng::TRAJECTORY_STREAM);
    let mut state = spec.initial_cond.clone();
    let mut latent = Latent::default();
    let mut values = Array2::<f64>::zeros((n, dim));
    let mut deriv = vec![0.0; dim];
    let sq_dt = spec.dt.sqrt();

    let blowup = |step| Error::Blowup { system: spec.family.name().to_string(), step };

    for k in 0..n {
        if shock_step == Some(k) {
            match shock.kind {
                ShockKind::None => {}
                ShockKind::Param => {
                    params.extend(shock.param_updates.iter().map(|(a, b)| (a.clone(), *b)));
                    model = Model::resolve(spec.family, &params)?;
                }
                ShockKind::StateEps => {
                    for x in state.iter_mut() {
                        match shock.state_eps_mode {
                            StateEpsMode::Additive => *x += shock.state_eps,
                            StateEpsMode::Multiplicative => *x *= 1.0 + shock.state_eps,
                        }
                    }
                }
                ShockKind::Switch => {
                    params.extend(shock.param_updates.iter().map(|(a, b)| (a.clone(), *b)));
                    model = Model::resolve(spec.family, &params)?;
                    if let Some(s) = &shock.switch_state {
                        state.clone_from(s);
                    }
                }
            }
        }

        match spec.method {
            Method::Rk4 => {
                let m = model;
                state = rk4_step(
                    |x| {
                        let mut out = vec![0.0; x.len()];
                        m.rhs(x, &mut out);
                        out
                    },
                    &state,
                    spec.dt,
                )
                .map_err(|_| blowup(k))?;
            }
            Method::EulerMaruyama => {
                model.rhs(&state, &mut deriv);
                let g = model.diffusion();
                for i in 0..dim {
                    state[i] += deriv[i] * spec.dt + g * sq_dt * standard_normal(&mut rng);
                }
            }
            Method::Discrete => {
                let (x, l) = discrete_model_step(&model, state[0], latent, k, &mut rng)?;
                state[0] = x;
                latent = l;
            }
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(blowup(k));
        }
        values.row_mut(k).iter_mut().zip(&state).for_each(|(dst, src)| *dst = *src);
    }

    Ok(Trajectory { values, spec: spec.clone(), shock: shock.clone(), shock_step })
}
