//! Ensemble block-bootstrap prediction intervals (EnbPI) around a point forecaster.
//!
//! `B` replicas are fit on block-bootstrap resamples of the training windows.
//! Out-of-bag residuals `|y - f|`, one pool per (horizon step, coordinate),
//! set the interval half-width at the `ceil((1-α)(n+1))`-th order statistic.
//! Test residuals join the pools (dropping the oldest) once their targets
//! have been fully observed at the next forecast origin.

use std::collections::VecDeque;
use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refmodel::{self, ModelConfig, RefModel, Scaler, TrainConfig};
use crate::rng;
use crate::stats::wilson_interval;
use crate::titration::WindowSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnbpiConfig {
    pub block_len: usize,
    pub n_bootstrap: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Feed test residuals back into the pools as targets become observed.
    pub online: bool,
}

impl Default for EnbpiConfig {
    fn default() -> Self {
        EnbpiConfig { block_len: 48, n_bootstrap: 5, alpha: 0.1, seed: 1955, online: true }
    }
}

impl EnbpiConfig {
    fn validate(&self) -> Result<()> {
        if self.block_len == 0 || self.n_bootstrap < 2 || !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("invalid EnbPI configuration {self:?}")));
        }
        Ok(())
    }
}

/// `B` index sequences of length `n`, each a concatenation of contiguous
/// blocks whose starts are drawn uniformly from `0..=n-block_len`.
pub fn block_bootstrap_indices(n: usize, cfg: &EnbpiConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    if n < cfg.block_len {
        return Err(Error::Sizing { required: cfg.block_len, available: n });
    }
    let mut rng = rng::stream_rng(cfg.seed, rng::AUX_STREAM_BASE + 4);
    let max_start = n - cfg.block_len;
    Ok((0..cfg.n_bootstrap)
        .map(|_| {
            let mut seq = Vec::with_capacity(n + cfg.block_len);
            while seq.len() < n {
                let start = rng.random_range(0..=max_start);
                seq.extend(start..start + cfg.block_len);
            }
            seq.truncate(n);
            seq
        })
        .collect())
}

/// A fitted point forecaster: context `L × dim` to forecast `H × dim`.
pub trait PointModel {
    fn predict(&self, context: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

pub trait BaseLearner {
    type Model: PointModel;
    fn fit(&self, train: &WindowSet, val: &WindowSet) -> Result<Self::Model>;
}

/// Repeats the last observed value over the horizon.
#[derive(Clone, Copy, Debug, Default)]
pub struct LastValue;

pub struct LastValueModel {
    horizon: usize,
}

impl PointModel for LastValueModel {
    fn predict(&self, context: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let last = context.rows().into_iter().next_back().ok_or_else(|| Error::Config("empty context".into()))?;
        Ok(Array2::from_shape_fn((self.horizon, context.ncols()), |(_, j)| last[j]))
    }
}

impl BaseLearner for LastValue {
    type Model = LastValueModel;
    fn fit(&self, train: &WindowSet, _val: &WindowSet) -> Result<LastValueModel> {
        Ok(LastValueModel { horizon: train.geometry.horizon })
    }
}

/// The reference model's predictive mean.
#[derive(Clone, Debug)]
pub struct RefModelMean {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl PointModel for RefModel {
    fn predict(&self, context: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let blocks = self.forecast(context)?;
        let h = self.config.horizon;
        Ok(Array2::from_shape_fn((h, blocks.len()), |(i, j)| blocks[j].mean[i]))
    }
}

impl BaseLearner for RefModelMean {
    type Model = RefModel;
    fn fit(&self, train: &WindowSet, val: &WindowSet) -> Result<RefModel> {
        let init = RefModel::new(self.model, Scaler::fit(train)?, self.seed)?;
        Ok(refmodel::train(&init, train, val, &self.train)?.model)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interval {
    pub lo: Array2<f64>,
    pub hi: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct EnbpiOutput {
    pub point: Vec<Array2<f64>>,
    pub intervals: Vec<Interval>,
    /// Training windows that were out of bag for at least one replica.
    pub oob_windows: usize,
}

impl EnbpiOutput {
    /// Fraction of test values inside their interval, with the count.
    pub fn coverage(&self, test: &WindowSet) -> (f64, usize) {
        let mut inside = 0;
        let mut total = 0;
        for (iv, w) in self.intervals.iter().zip(&test.windows) {
            for ((lo, hi), y) in iv.lo.iter().zip(iv.hi.iter()).zip(w.target.iter()) {
                inside += usize::from(*lo <= *y && *y <= *hi);
                total += 1;
            }
        }
        (inside as f64 / total.max(1) as f64, total)
    }

    pub fn write_intervals<W: Write>(&self, mut out: W, test: &WindowSet) -> Result<()> {
        #[derive(Serialize)]
        struct Rec<'a> {
            window_id: &'a str,
            lo: Vec<Vec<f64>>,
            hi: Vec<Vec<f64>>,
        }
        let rows = |a: &Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect();
        for (iv, w) in self.intervals.iter().zip(&test.windows) {
            let id = test.window_id(w);
            serde_json::to_writer(&mut out, &Rec { window_id: &id, lo: rows(&iv.lo), hi: rows(&iv.hi) })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Coverage summary CSV with a 95% Wilson interval.
pub fn write_coverage_csv<W: Write>(mut out: W, label: &str, nominal: f64, coverage: f64, n: usize) -> Result<()> {
    let hits = (coverage * n as f64).round() as usize;
    let (lo, hi) = wilson_interval(hits, n, 1.959_963_984_540_054);
    writeln!(out, "label,nominal,coverage,n,ci_lo,ci_hi")?;
    writeln!(out, "{label},{nominal},{coverage:.6},{n},{lo:.6},{hi:.6}")?;
    Ok(())
}

/// Half-width from a residual pool: the `ceil((1-α)(n+1))`-th smallest value.
pub fn conformal_width(pool: &[f64], alpha: f64) -> Result<f64> {
    let n = pool.len();
    let k = ((1.0 - alpha) * (n as f64 + 1.0)).ceil() as usize;
    if n == 0 || k > n {
        return Err(Error::Degenerate(format!(
            "residual pool of {n} is too small for level {alpha}"
        )));
    }
    let mut sorted = pool.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k.max(1) - 1])
}

fn mean_prediction<M: PointModel>(models: &[&M], context: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut acc: Option<Array2<f64>> = None;
    for m in models {
        let p = m.predict(context)?;
        acc = Some(match acc {
            None => p,
            Some(a) => a + p,
        });
    }
    Ok(acc.expect("at least one model") / models.len() as f64)
}

pub fn enbpi_intervals<L: BaseLearner>(
    learner: &L,
    train: &WindowSet,
    val: &WindowSet,
    test: &WindowSet,
    cfg: &EnbpiConfig,
) -> Result<EnbpiOutput> {
    let n = train.len();
    let boot = block_bootstrap_indices(n, cfg)?;
    let models = boot.iter().map(|idx| learner.fit(&train.select(idx), val)).collect::<Result<Vec<_>>>()?;
    let (h, dim) = (train.geometry.horizon, train.dim);

    let mut in_bag = vec![vec![false; n]; boot.len()];
    for (b, idx) in boot.iter().enumerate() {
        idx.iter().for_each(|&i| in_bag[b][i] = true);
    }
    let mut pools: Vec<VecDeque<f64>> = vec![VecDeque::new(); h * dim];
    let mut oob_windows = 0;
    for (i, w) in train.windows.iter().enumerate() {
        let oob: Vec<&L::Model> = models.iter().enumerate().filter(|(b, _)| !in_bag[*b][i]).map(|(_, m)| m).collect();
        if oob.is_empty() {
            continue;
        }
        oob_windows += 1;
        let pred = mean_prediction(&oob, w.context.view())?;
        for ((k, p), y) in pred.iter().enumerate().zip(w.target.iter()) {
            pools[k].push_back((y - p).abs());
        }
    }

    let all: Vec<&L::Model> = models.iter().collect();
    let mut point = Vec::with_capacity(test.len());
    let mut intervals = Vec::with_capacity(test.len());
    let mut next_release = 0;
    for (k, w) in test.windows.iter().enumerate() {
        if cfg.online {
            // a window's target is observed once the clock passes its end; a
            // new realization starts a new series, so everything before it is observed
            while next_release < k && {
                let done = &test.windows[next_release];
                done.realization != w.realization || w.start >= done.start + h
            } {
                let done = &test.windows[next_release];
                let p: &Array2<f64> = &point[next_release];
                for ((q, pv), y) in p.iter().enumerate().zip(done.target.iter()) {
                    pools[q].pop_front();
                    pools[q].push_back((y - pv).abs());
                }
                next_release += 1;
            }
        }
        let pred = mean_prediction(&all, w.context.view())?;
        let mut lo = pred.clone();
        let mut hi = pred.clone();
        for (q, pool) in pools.iter().enumerate() {
            let width = conformal_width(&pool.iter().copied().collect::<Vec<_>>(), cfg.alpha)?;
            let (i, j) = (q / dim, q % dim);
            lo[[i, j]] -= width;
            hi[[i, j]] += width;
        }
        point.push(pred);
        intervals.push(Interval { lo, hi });
    }
    Ok(EnbpiOutput { point, intervals, oob_windows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::chi2_cdf;

    #[test]
    fn single_block_covers_everything() {
        let cfg = EnbpiConfig { block_len: 10, ..Default::default() };
        for seq in block_bootstrap_indices(10, &cfg).unwrap() {
            assert_eq!(seq, (0..10).collect::<Vec<_>>());
        }
        assert!(matches!(block_bootstrap_indices(9, &cfg), Err(Error::Sizing { .. })));
    }

    #[test]
    fn bootstrap_is_seeded_and_contiguous() {
        let cfg = EnbpiConfig { block_len: 7, n_bootstrap: 4, ..Default::default() };
        let a = block_bootstrap_indices(100, &cfg).unwrap();
        assert_eq!(a, block_bootstrap_indices(100, &cfg).unwrap());
        for seq in &a {
            assert_eq!(seq.len(), 100);
            for chunk in seq.chunks(7) {
                assert!(chunk.windows(2).all(|p| p[1] == p[0] + 1));
            }
        }
    }

    #[test]
    fn block_starts_are_uniform() {
        let cfg = EnbpiConfig { block_len: 5, n_bootstrap: 10_000, ..Default::default() };
        let n = 14; // starts 0..=9, three blocks per sequence
        let seqs = block_bootstrap_indices(n, &cfg).unwrap();
        let mut counts = [0usize; 10];
        for s in &seqs {
            counts[s[0]] += 1;
        }
        let expect = seqs.len() as f64 / 10.0;
        let stat: f64 = counts.iter().map(|c| (*c as f64 - expect).powi(2) / expect).sum();
        let p = 1.0 - chi2_cdf(stat, 9).unwrap();
        assert!(p > 0.01, "chi2 {stat} p {p}");
    }

    #[test]
    fn width_order_statistic() {
        let pool: Vec<f64> = (1..=19).map(f64::from).collect();
        // ceil(0.9 * 20) = 18
        assert_eq!(conformal_width(&pool, 0.1).unwrap(), 18.0);
        assert_eq!(conformal_width(&[0.0; 30], 0.1).unwrap(), 0.0);
        assert!(matches!(conformal_width(&[1.0; 5], 0.1), Err(Error::Degenerate(_))));
        assert!(conformal_width(&pool, 0.05).unwrap() >= conformal_width(&pool, 0.2).unwrap());
    }
}
