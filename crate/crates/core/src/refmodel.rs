//! A small trainable forecaster with a spectral Gaussian head.
//!
//! An affine encoder maps the normalized, flattened context to, per coordinate
//! block of `H` horizon steps: `H` raw translations, `H` raw scales and `R`
//! raw Householder generators. Raw outputs pass through soft bounds
//! (`t_y ∈ [-15, 15]`, `c ∈ [-1, 4.5]`, `λ = 1 + c`) and generator
//! normalization. Training minimizes the eigenframe NLL by full-batch descent
//! with exact reverse-mode gradients.

use std::io::{Read, Write};

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{
    soft_bound, soft_bound_grad, soft_bound_inverse, EigenGaussian,
    GaussianBelief, DEFAULT_REFLECTIONS, DEGENERATE_GENERATOR, LAMBDA_MIN, SCALE_BOUNDS,
    TRANSLATION_BOUNDS,
};
use crate::error::{Error, Result};
use crate::rng::{self, standard_normal};
use crate::stats::crps_ensemble;
use crate::titration::WindowSet;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context_len: usize,
    pub horizon: usize,
    pub dim: usize,
    #[serde(default = "default_reflections")]
    pub reflections: usize,
    /// Let the generators depend on the context; otherwise they are learned biases
    /// and every window shares one frame.
    #[serde(default)]
    pub context_frame: bool,
    /// Let the scales depend on the context; otherwise every window gets the
    /// same learned spectrum (a homoscedastic head).
    #[serde(default = "default_true")]
    pub context_scale: bool,
}

fn default_true() -> bool {
    true
}

fn default_reflections() -> usize {
    DEFAULT_REFLECTIONS
}

impl ModelConfig {
    pub fn new(context_len: usize, horizon: usize, dim: usize) -> Self {
        ModelConfig { context_len, horizon, dim, reflections: DEFAULT_REFLECTIONS, context_frame: false, context_scale: true }
    }

    fn n_features(&self) -> usize {
        1 + self.context_len * self.dim
    }

    fn frame_features(&self) -> usize {
        if self.context_frame {
            self.n_features()
        } else {
            1
        }
    }

    fn head_len(&self) -> usize {
        2 * self.horizon * self.n_features()
    }

    fn frame_len(&self) -> usize {
        self.reflections * self.horizon * self.frame_features()
    }

    fn block_len(&self) -> usize {
        self.head_len() + self.frame_len()
    }
}

/// Per-coordinate affine normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(dim: usize) -> Self {
        Scaler { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Fit on every context value of a window set. Near-constant coordinates keep unit scale.
    pub fn fit(set: &WindowSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::Config("cannot fit a scaler on an empty window set".into()));
        }
        let mut mean = vec![0.0; set.dim];
        let mut sq = vec![0.0; set.dim];
        let mut count = 0.0;
        for w in &set.windows {
            for row in w.context.rows() {
                for (j, v) in row.iter().enumerate() {
                    mean[j] += v;
                    sq[j] += v * v;
                }
                count += 1.0;
            }
        }
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                let var = (s / count - *m * *m).max(0.0);
                if var.sqrt() > 1e-8 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Scaler { mean, std })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    Adam,
}

/// How generator gradients are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    /// Central differences for the frame weights; exact gradients elsewhere.
    FiniteDifferenceFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub optimizer: Optimizer,
    pub clip_norm: f64,
    /// Samples per window for sampled metrics in the loss curve.
    pub samples: usize,
    pub eval_every: usize,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub gradient_mode: GradientMode,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            max_steps: 600,
            optimizer: Optimizer::Adam,
            clip_norm: 10.0,
            samples: 8,
            eval_every: 10,
            patience: 10,
            seed: 1955,
            gradient_mode: GradientMode::Analytic,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefModel {
    pub config: ModelConfig,
    pub scaler: Scaler,
    /// Per block: translation and scale rows (`2H × F`), then generator rows.
    pub weights: Vec<f64>,
}

/// Precomputed design matrix and normalized targets.
pub struct Batch {
    features: Array2<f64>,
    /// One `N × H` matrix per coordinate block.
    targets: Vec<Array2<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct BlockGrad {
    nll: f64,
    t_raw: Vec<f64>,
    c_raw: Vec<f64>,
    frame: Vec<f64>,
}

/// NLL of one block in normalized units, and its gradient with respect to the raw head outputs.
fn block_nll(t_raw: &[f64], c_raw: &[f64], frame_raw: &[f64], y: &[f64], want_grad: bool) -> BlockGrad {
    let h = y.len();
    let (tlo, thi) = TRANSLATION_BOUNDS;
    let (clo, chi) = SCALE_BOUNDS;
    let t: Vec<f64> = t_raw.iter().map(|x| soft_bound(*x, tlo, thi).expect("valid bounds")).collect();
    let lam: Vec<f64> = c_raw.iter().map(|x| 1.0 + soft_bound(*x, clo, chi).expect("valid bounds")).collect();
    let gens: Vec<Option<(Vec<f64>, f64)>> = frame_raw
        .chunks(h)
        .map(|w| {
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            (norm >= DEGENERATE_GENERATOR).then(|| (w.iter().map(|x| x / norm).collect(), norm))
        })
        .collect();

    let reflect = |v: &[f64], x: &mut [f64]| {
        let k = 2.0 * v.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>();
        x.iter_mut().zip(v).for_each(|(xi, vi)| *xi -= k * vi);
    };
    let mut p = y.to_vec();
    let mut q = t.clone();
    for (v, _) in gens.iter().rev().flatten() {
        reflect(v, &mut p);
        reflect(v, &mut q);
    }
    let lt: Vec<f64> = lam.iter().map(|l| l.max(LAMBDA_MIN)).collect();
    let r: Vec<f64> = (0..h).map(|i| p[i] - lam[i] * q[i]).collect();
    let nll = (0..h).map(|i| lt[i].ln() + 0.5 * (r[i] / lt[i]).powi(2)).sum::<f64>() + 0.5 * h as f64 * LN_2PI;
    if !want_grad {
        return BlockGrad { nll, t_raw: Vec::new(), c_raw: Vec::new(), frame: Vec::new() };
    }

    let a: Vec<f64> = (0..h).map(|i| r[i] / (lt[i] * lt[i])).collect();
    let g_lam: Vec<f64> = (0..h)
        .map(|i| {
            let direct = if lam[i] > LAMBDA_MIN { 1.0 / lt[i] - r[i] * r[i] / lt[i].powi(3) } else { 0.0 };
            direct - a[i] * q[i]
        })
        .collect();
    let mut gp = a.clone();
    let mut gq: Vec<f64> = (0..h).map(|i| -lam[i] * a[i]).collect();
    let mut frame = vec![0.0; frame_raw.len()];
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    // Uᵀ applied H_1 last, so the backward pass starts at H_1.
    for (k, g) in gens.iter().enumerate() {
        let Some((v, norm)) = g else { continue };
        reflect(v, &mut p);
        reflect(v, &mut q);
        let (vp, vq, gpv, gqv) = (dot(v, &p), dot(v, &q), dot(&gp, v), dot(&gq, v));
        let gv: Vec<f64> =
            (0..h).map(|i| -2.0 * (vp * gp[i] + gpv * p[i] + vq * gq[i] + gqv * q[i])).collect();
        let vg = dot(v, &gv);
        for i in 0..h {
            frame[k * h + i] = (gv[i] - v[i] * vg) / norm;
            gp[i] -= 2.0 * v[i] * gpv;
            gq[i] -= 2.0 * v[i] * gqv;
        }
    }
    let t_grad = (0..h).map(|i| gq[i] * soft_bound_grad(t_raw[i], tlo, thi).expect("valid bounds")).collect();
    let c_grad = (0..h).map(|i| g_lam[i] * soft_bound_grad(c_raw[i], clo, chi).expect("valid bounds")).collect();
    BlockGrad { nll, t_raw: t_grad, c_raw: c_grad, frame }
}

impl RefModel {
    /// Zero encoder weights, raw-scale bias at `λ = 1`, random unit generator biases.
    pub fn new(config: ModelConfig, scaler: Scaler, seed: u64) -> Result<Self> {
        if config.context_len == 0 || config.horizon == 0 || config.dim == 0 {
            return Err(Error::Config(format!("invalid model shape {config:?}")));
        }
        if scaler.mean.len() != config.dim || scaler.std.len() != config.dim {
            return Err(Error::Dimension { expected: config.dim, got: scaler.mean.len() });
        }
        let (h, f, ff) = (config.horizon, config.n_features(), config.frame_features());
        let mut weights = vec![0.0; config.dim * config.block_len()];
        let scale_bias = soft_bound_inverse(0.0, SCALE_BOUNDS.0, SCALE_BOUNDS.1)?;
        let mut rng = rng::stream_rng(seed, rng::AUX_STREAM_BASE + 1);
        for b in 0..config.dim {
            let base = b * config.block_len();
            for i in 0..h {
                weights[base + (h + i) * f] = scale_bias;
            }
            let frame = base + config.head_len();
            for row in 0..config.reflections * h {
                weights[frame + row * ff] = standard_normal(&mut rng);
            }
        }
        Ok(RefModel { config, scaler, weights })
    }

    pub fn n_weights(&self) -> usize {
        self.weights.len()
    }

    fn check_context(&self, context: ArrayView2<'_, f64>) -> Result<()> {
        let c = &self.config;
        if context.nrows() != c.context_len {
            return Err(Error::Dimension { expected: c.context_len, got: context.nrows() });
        }
        if context.ncols() != c.dim {
            return Err(Error::Dimension { expected: c.dim, got: context.ncols() });
        }
        Ok(())
    }

    fn features(&self, context: ArrayView2<'_, f64>) -> Vec<f64> {
        let mut phi = Vec::with_capacity(self.config.n_features());
        phi.push(1.0);
        for row in context.rows() {
            for (j, v) in row.iter().enumerate() {
                phi.push((v - self.scaler.mean[j]) / self.scaler.std[j]);
            }
        }
        phi
    }

    fn head(&self, block: usize) -> ArrayView2<'_, f64> {
        let c = &self.config;
        let base = block * c.block_len();
        ArrayView2::from_shape((2 * c.horizon, c.n_features()), &self.weights[base..base + c.head_len()])
            .expect("layout")
    }

    fn frame(&self, block: usize) -> ArrayView2<'_, f64> {
        let c = &self.config;
        let base = block * c.block_len() + c.head_len();
        ArrayView2::from_shape((c.reflections * c.horizon, c.frame_features()), &self.weights[base..base + c.frame_len()])
            .expect("layout")
    }

    /// Raw head outputs of one block: (translations, scales, generators).
    fn raw_outputs(&self, block: usize, phi: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.config.horizon;
        let phi = ndarray::ArrayView1::from(phi);
        let head = self.head(block).dot(&phi);
        let frame = self.frame(block);
        let gens = frame.dot(&phi.slice(s![..frame.ncols()]));
        (head.slice(s![..h]).to_vec(), head.slice(s![h..]).to_vec(), gens.to_vec())
    }

    fn belief_from_raw(&self, t_raw: &[f64], c_raw: &[f64], frame_raw: &[f64]) -> Result<GaussianBelief> {
        let h = self.config.horizon;
        let (tlo, thi) = TRANSLATION_BOUNDS;
        let (clo, chi) = SCALE_BOUNDS;
        let t = t_raw.iter().map(|x| soft_bound(*x, tlo, thi)).collect::<Result<Vec<_>>>()?;
        let lam = c_raw.iter().map(|x| soft_bound(*x, clo, chi).map(|c| 1.0 + c)).collect::<Result<Vec<_>>>()?;
        let hh = frame_raw
            .chunks(h)
            .map(|w| {
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < DEGENERATE_GENERATOR {
                    vec![0.0; h]
                } else {
                    w.iter().map(|x| x / norm).collect()
                }
            })
            .collect();
        GaussianBelief::new(t, lam, hh)
    }

    /// Beliefs in normalized units, one per coordinate block.
    pub fn forecast_normalized(&self, context: ArrayView2<'_, f64>) -> Result<Vec<GaussianBelief>> {
        self.check_context(context)?;
        let phi = self.features(context);
        if phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("context"));
        }
        (0..self.config.dim)
            .map(|b| {
                let (t, c, g) = self.raw_outputs(b, &phi);
                self.belief_from_raw(&t, &c, &g)
            })
            .collect()
    }

    /// Beliefs in data units, one per coordinate block.
    pub fn forecast(&self, context: ArrayView2<'_, f64>) -> Result<Vec<EigenGaussian>> {
        let blocks = self.forecast_normalized(context)?;
        blocks
            .into_iter()
            .enumerate()
            .map(|(j, b)| {
                let (m, s) = (self.scaler.mean[j], self.scaler.std[j]);
                let e = b.to_eigen();
                EigenGaussian::new(
                    e.mean.iter().map(|x| m + s * x).collect(),
                    e.lambdas.iter().map(|l| s * l).collect(),
                    e.hh_vectors,
                )
            })
            .collect()
    }

    pub fn batch(&self, set: &WindowSet) -> Result<Batch> {
        let c = &self.config;
        if set.geometry.context_len != c.context_len || set.geometry.horizon != c.horizon || set.dim != c.dim {
            return Err(Error::Config(format!(
                "window set (L={}, H={}, dim={}) does not match model (L={}, H={}, dim={})",
                set.geometry.context_len, set.geometry.horizon, set.dim, c.context_len, c.horizon, c.dim
            )));
        }
        let n = set.len();
        let mut features = Array2::zeros((n, c.n_features()));
        let mut targets = vec![Array2::zeros((n, c.horizon)); c.dim];
        for (i, w) in set.windows.iter().enumerate() {
            let phi = self.features(w.context.view());
            features.row_mut(i).iter_mut().zip(&phi).for_each(|(d, s)| *d = *s);
            for (j, t) in targets.iter_mut().enumerate() {
                let (m, s) = (self.scaler.mean[j], self.scaler.std[j]);
                t.row_mut(i).iter_mut().zip(w.target.column(j)).for_each(|(d, v)| *d = (v - m) / s);
            }
        }
        if features.iter().chain(targets.iter().flat_map(|t| t.iter())).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("training windows"));
        }
        Ok(Batch { features, targets })
    }

    /// Mean NLL per window (summed over blocks) in normalized units.
    pub fn batch_nll(&self, batch: &Batch) -> f64 {
        self.loss_and_grad(batch, false).0
    }

    pub fn mean_nll(&self, set: &WindowSet) -> Result<f64> {
        Ok(self.batch_nll(&self.batch(set)?))
    }

    /// Mean NLL and, if asked, its exact gradient with respect to every weight.
    pub fn loss_and_grad(&self, batch: &Batch, want_grad: bool) -> (f64, Vec<f64>) {
        let c = self.config;
        let (h, ff) = (c.horizon, c.frame_features());
        let n = batch.len();
        let mut grad = if want_grad { vec![0.0; self.weights.len()] } else { Vec::new() };
        let mut total = 0.0;
        for b in 0..c.dim {
            let head_out = batch.features.dot(&self.head(b).t());
            let frame = self.frame(b);
            let frame_out = batch.features.slice(s![.., ..ff]).dot(&frame.t());
            let mut g_head = Array2::<f64>::zeros((n, 2 * h));
            let mut g_frame = Array2::<f64>::zeros((n, c.reflections * h));
            for i in 0..n {
                let out = head_out.row(i);
                let out = out.as_slice().expect("contiguous");
                let fr = frame_out.row(i);
                let y = batch.targets[b].row(i);
                let bg = block_nll(
                    &out[..h],
                    &out[h..],
                    fr.as_slice().expect("contiguous"),
                    y.as_slice().expect("contiguous"),
                    want_grad,
                );
                total += bg.nll;
                if want_grad {
                    let mut row = g_head.row_mut(i);
                    row.slice_mut(s![..h]).iter_mut().zip(&bg.t_raw).for_each(|(d, s)| *d = *s);
                    row.slice_mut(s![h..]).iter_mut().zip(&bg.c_raw).for_each(|(d, s)| *d = *s);
                    g_frame.row_mut(i).iter_mut().zip(&bg.frame).for_each(|(d, s)| *d = *s);
                }
            }
            if want_grad {
                let base = b * c.block_len();
                let mut gh = g_head.t().dot(&batch.features);
                if !c.context_scale {
                    gh.slice_mut(s![h.., 1..]).fill(0.0);
                }
                grad[base..base + c.head_len()].iter_mut().zip(gh.iter()).for_each(|(d, s)| *d = s / n as f64);
                let gf = g_frame.t().dot(&batch.features.slice(s![.., ..ff]));
                let fb = base + c.head_len();
                grad[fb..fb + c.frame_len()].iter_mut().zip(gf.iter()).for_each(|(d, s)| *d = s / n as f64);
            }
        }
        (total / n as f64, grad)
    }

    fn frame_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let c = &self.config;
        (0..c.dim)
            .map(|b| {
                let start = b * c.block_len() + c.head_len();
                start..start + c.frame_len()
            })
            .collect()
    }

    /// Central-difference gradient at the given weights.
    fn numeric_grad(&mut self, batch: &Batch, indices: impl IntoIterator<Item = usize>, step: f64) -> Vec<(usize, f64)> {
        indices
            .into_iter()
            .map(|k| {
                let w0 = self.weights[k];
                self.weights[k] = w0 + step;
                let up = self.batch_nll(batch);
                self.weights[k] = w0 - step;
                let down = self.batch_nll(batch);
                self.weights[k] = w0;
                (k, (up - down) / (2.0 * step))
            })
            .collect()
    }

    /// Average sampled CRPS per value in data units, with `samples` draws per window.
    pub fn sampled_crps(&self, set: &WindowSet, samples: usize, seed: u64) -> Result<f64> {
        let mut rng = rng::stream_rng(seed, rng::AUX_STREAM_BASE + 2);
        let mut total = 0.0;
        let mut count = 0usize;
        for w in &set.windows {
            for (j, b) in self.forecast(w.context.view())?.iter().enumerate() {
                let draws = b.sample(&mut rng, samples);
                for (hstep, y) in w.target.column(j).iter().enumerate() {
                    let member: Vec<f64> = draws.iter().map(|d| d[hstep]).collect();
                    total += crps_ensemble(&member, *y)?;
                    count += 1;
                }
            }
        }
        Ok(total / count.max(1) as f64)
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        let ck = Checkpoint { version: CHECKPOINT_VERSION, model: self.clone() };
        serde_json::to_writer(out, &ck)?;
        Ok(())
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(input)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", ck.version)));
        }
        let m = ck.model;
        if m.weights.len() != m.config.dim * m.config.block_len() || m.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Format("checkpoint weights do not match the model layout".into()));
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: RefModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub val_crps: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: RefModel,
    pub curve: Vec<LossRecord>,
    pub best_step: usize,
}

impl TrainOutcome {
    pub fn write_curve_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,train_nll,val_nll,val_crps")?;
        for r in &self.curve {
            writeln!(out, "{},{:.9},{:.9},{:.9}", r.step, r.train_nll, r.val_nll, r.val_crps)?;
        }
        Ok(())
    }
}

fn clip(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
}

/// Full-batch training with early stopping on validation NLL. Returns the best
/// model seen, so its validation NLL never exceeds the initial one.
pub fn train(model: &RefModel, train_set: &WindowSet, val_set: &WindowSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training needs non-empty train and validation sets".into()));
    }
    if !(cfg.learning_rate > 0.0) || cfg.eval_every == 0 || cfg.samples == 0 {
        return Err(Error::Config(format!("invalid training configuration {cfg:?}")));
    }
    let train_batch = model.batch(train_set)?;
    let val_batch = model.batch(val_set)?;
    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_val = current.batch_nll(&val_batch);
    let mut best_step = 0;
    let mut curve = Vec::new();
    let mut since_best = 0;
    let (mut m1, mut m2) = (vec![0.0; model.n_weights()], vec![0.0; model.n_weights()]);
    let frame_ranges = model.frame_ranges();

    for step in 0..=cfg.max_steps {
        let (loss, mut grad) = current.loss_and_grad(&train_batch, true);
        if !loss.is_finite() {
            return Err(Error::Training { step, reason: format!("training NLL became {loss}") });
        }
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let val = current.batch_nll(&val_batch);
            if !val.is_finite() {
                return Err(Error::Training { step, reason: format!("validation NLL became {val}") });
            }
            let crps = current.sampled_crps(val_set, cfg.samples, cfg.seed)?;
            curve.push(LossRecord { step, train_nll: loss, val_nll: val, val_crps: crps });
            if val < best_val {
                best_val = val;
                best = current.clone();
                best_step = step;
                since_best = 0;
            } else if step > 0 {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
        if step == cfg.max_steps {
            break;
        }
        if cfg.gradient_mode == GradientMode::FiniteDifferenceFrame {
            for r in &frame_ranges {
                for (k, g) in current.numeric_grad(&train_batch, r.clone(), 1e-5) {
                    grad[k] = g;
                }
            }
        }
        if cfg.weight_decay > 0.0 {
            grad.iter_mut().zip(&current.weights).for_each(|(g, w)| *g += cfg.weight_decay * w);
        }
        clip(&mut grad, cfg.clip_norm);
        match cfg.optimizer {
            Optimizer::GradientDescent => {
                current.weights.iter_mut().zip(&grad).for_each(|(w, g)| *w -= cfg.learning_rate * g);
            }
            Optimizer::Adam => {
                let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                let t = (step + 1) as i32;
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                for k in 0..grad.len() {
                    m1[k] = b1 * m1[k] + (1.0 - b1) * grad[k];
                    m2[k] = b2 * m2[k] + (1.0 - b2) * grad[k] * grad[k];
                    current.weights[k] -= cfg.learning_rate * (m1[k] / c1) / ((m2[k] / c2).sqrt() + eps);
                }
            }
        }
        if current.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Training { step, reason: "weights became non-finite".into() });
        }
    }
    Ok(TrainOutcome { model: best, curve, best_step })
}

/// Largest relative error between analytic and central-difference gradients
/// over `count` weights drawn from the translation, scale and frame rows.
pub fn grad_check(model: &RefModel, set: &WindowSet, count: usize, seed: u64) -> Result<f64> {
    let batch = model.batch(set)?;
    if batch.is_empty() {
        return Err(Error::Config("gradient check needs a non-empty batch".into()));
    }
    let (_, analytic) = model.loss_and_grad(&batch, true);
    let c = model.config;
    let half = c.horizon * c.n_features();
    let mut rng = rng::stream_rng(seed, rng::AUX_STREAM_BASE + 3);
    let picks: Vec<usize> = (0..count)
        .map(|i| {
            let b = rng.random_range(0..c.dim) * c.block_len();
            match i % 3 {
                0 => b + rng.random_range(0..half),
                1 => b + half + rng.random_range(0..half),
                _ => b + c.head_len() + rng.random_range(0..c.frame_len()),
            }
        })
        .collect();
    let mut probe = model.clone();
    let numeric = probe.numeric_grad(&batch, picks, 1e-5);
    Ok(numeric
        .into_iter()
        .map(|(k, n)| (analytic[k] - n).abs() / analytic[k].abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max))
}

/// Check that a belief honors the head's bounds.
pub fn within_head_bounds(b: &GaussianBelief) -> bool {
    let (clo, chi) = SCALE_BOUNDS;
    let (tlo, thi) = TRANSLATION_BOUNDS;
    b.lambdas.iter().all(|l| (1.0 + clo..=1.0 + chi).contains(l))
        && b.t_y.iter().all(|t| (tlo..=thi).contains(t))
        && b.hh_vectors.iter().all(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            n < DEGENERATE_GENERATOR || (n - 1.0).abs() < 1e-9
        })
}
