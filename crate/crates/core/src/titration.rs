//! Observation-noise titration and forecasting windows.
//!
//! A trajectory is split chronologically 0.7 / 0.2 / 0.1 into train, val and
//! test segments. Each segment receives its own Gaussian noise sub-stream, and
//! is then cut into `(context, target)` windows that never cross a segment
//! boundary. Every window keeps the pre-noise target alongside the noisy one.

use std::io::{BufRead, Write};
use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::rng::{self, standard_normal};

pub const DEFAULT_CONTEXT_LEN: usize = 336;
/// Injected noise levels swept by default.
pub const DEFAULT_SIGMA_SWEEP: [f64; 4] = [0.0, 0.25, 1.0, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TitrationLevel {
    pub sigma_inj: f64,
    pub noise_seed: u64,
}

impl TitrationLevel {
    pub fn new(sigma_inj: f64, noise_seed: u64) -> Result<Self> {
        if !(sigma_inj >= 0.0 && sigma_inj.is_finite()) {
            return Err(Error::Config(format!("sigma_inj must be finite and >= 0, got {sigma_inj}")));
        }
        Ok(TitrationLevel { sigma_inj, noise_seed })
    }
}

/// Per-time observation noise standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseSchedule {
    Constant(f64),
    /// One standard deviation per time step of the series being corrupted.
    PerStep(Vec<f64>),
}

impl NoiseSchedule {
    fn sigma_at(&self, t: usize) -> f64 {
        match self {
            NoiseSchedule::Constant(s) => *s,
            NoiseSchedule::PerStep(v) => v[t],
        }
    }

    fn is_zero(&self) -> bool {
        match self {
            NoiseSchedule::Constant(s) => *s == 0.0,
            NoiseSchedule::PerStep(v) => v.iter().all(|s| *s == 0.0),
        }
    }
}

/// Add `N(0, sigma(t)^2)` noise to every entry of `clean`, drawing row by row.
pub fn corrupt<R: rand::Rng + ?Sized>(
    clean: ArrayView2<'_, f64>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if let NoiseSchedule::PerStep(v) = schedule {
        if v.len() != clean.nrows() {
            return Err(Error::Dimension { expected: clean.nrows(), got: v.len() });
        }
        if v.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("noise schedule must be finite and nonnegative".into()));
        }
    }
    if schedule.is_zero() {
        return Ok(clean.to_owned());
    }
    let mut out = clean.to_owned();
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        let sd = schedule.sigma_at(t);
        for v in row.iter_mut() {
            *v += sd * standard_normal(rng);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct NoisySeries {
    pub clean: Array2<f64>,
    pub noisy: Array2<f64>,
}

/// Corrupt a whole trajectory at a constant level.
pub fn inject_noise(traj: &Trajectory, level: &TitrationLevel) -> Result<NoisySeries> {
    let mut rng = rng::stream_rng(level.noise_seed, rng::NOISE_STREAM_BASE);
    let noisy = corrupt(traj.values.view(), &NoiseSchedule::Constant(level.sigma_inj), &mut rng)?;
    Ok(NoisySeries { clean: traj.values.clone(), noisy })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub context_len: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Geometry {
    /// Default evaluation geometry: stride `H/2`.
    pub fn new(context_len: usize, horizon: usize) -> Self {
        Geometry { context_len, horizon, stride: (horizon / 2).max(1) }
    }

    pub fn with_stride(self, stride: usize) -> Self {
        Geometry { stride, ..self }
    }

    pub fn span(&self) -> usize {
        self.context_len + self.horizon
    }

    /// Windows that fit in a segment of length `n`.
    pub fn count(&self, n: usize) -> usize {
        if n < self.span() {
            0
        } else {
            (n - self.span()) / self.stride + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::Config(format!("invalid window geometry {self:?}")));
        }
        Ok(())
    }
}

/// Chronological 0.7 / 0.2 / 0.1 segment bounds for a series of length `n`.
pub fn split_bounds(n: usize) -> [Range<usize>; 3] {
    let train_end = n * 7 / 10;
    let val_end = n * 9 / 10;
    [0..train_end, train_end..val_end, val_end..n]
}

/// Shortest series whose three segments each hold at least one window.
pub fn minimum_length(geometry: &Geometry) -> usize {
    let span = geometry.span();
    let mut n = span;
    while split_bounds(n).iter().any(|r| r.len() < span) {
        n += 1;
    }
    n
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Index within its split and realization.
    pub index: usize,
    /// Noise realization the window was drawn from.
    pub realization: u64,
    /// Absolute time index of the first context row.
    pub start: usize,
    pub context: Array2<f64>,
    pub target: Array2<f64>,
    pub clean_target: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub split: Split,
    pub sigma: f64,
    pub geometry: Geometry,
    pub dim: usize,
    pub windows: Vec<Window>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window_id(&self, w: &Window) -> String {
        format!("r{}-{}-{:05}", w.realization, self.split.as_str(), w.index)
    }

    /// Window subset in the given order, duplicates allowed (bootstrap resamples).
    pub fn select(&self, indices: &[usize]) -> WindowSet {
        WindowSet {
            windows: indices.iter().map(|&i| self.windows[i].clone()).collect(),
            ..self.empty_like()
        }
    }

    fn empty_like(&self) -> WindowSet {
        WindowSet {
            split: self.split,
            sigma: self.sigma,
            geometry: self.geometry,
            dim: self.dim,
            windows: Vec::new(),
        }
    }

    /// Concatenate sets sharing split and geometry (e.g. several noise realizations).
    pub fn concat(sets: &[WindowSet]) -> Result<WindowSet> {
        let first = sets.first().ok_or_else(|| Error::Config("no window sets to concatenate".into()))?;
        let mut out = first.empty_like();
        for s in sets {
            if s.geometry != first.geometry || s.dim != first.dim {
                return Err(Error::Config("window sets differ in geometry".into()));
            }
            out.windows.extend(s.windows.iter().cloned());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct TitrationSet {
    pub level: TitrationLevel,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

impl TitrationSet {
    pub fn split(&self, split: Split) -> &WindowSet {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn window_segment(
    noisy: ArrayView2<'_, f64>,
    clean: ArrayView2<'_, f64>,
    offset: usize,
    geometry: &Geometry,
    split: Split,
    sigma: f64,
    realization: u64,
) -> WindowSet {
    let (l, h) = (geometry.context_len, geometry.horizon);
    let windows = (0..geometry.count(noisy.nrows()))
        .map(|i| {
            let s0 = i * geometry.stride;
            Window {
                index: i,
                realization,
                start: offset + s0,
                context: noisy.slice(s![s0..s0 + l, ..]).to_owned(),
                target: noisy.slice(s![s0 + l..s0 + l + h, ..]).to_owned(),
                clean_target: clean.slice(s![s0 + l..s0 + l + h, ..]).to_owned(),
            }
        })
        .collect();
    WindowSet { split, sigma, geometry: *geometry, dim: noisy.ncols(), windows }
}

/// Split an already corrupted series and its clean counterpart into windows.
pub fn split_and_window(
    noisy: ArrayView2<'_, f64>,
    clean: ArrayView2<'_, f64>,
    geometry: &Geometry,
    sigma: f64,
) -> Result<[WindowSet; 3]> {
    geometry.validate()?;
    if noisy.dim() != clean.dim() {
        return Err(Error::Dimension { expected: clean.nrows(), got: noisy.nrows() });
    }
    let n = noisy.nrows();
    let required = minimum_length(geometry);
    if n < required {
        return Err(Error::Sizing { required, available: n });
    }
    let bounds = split_bounds(n);
    Ok(Split::ALL.map(|split| {
        let r = bounds[split.index() as usize].clone();
        window_segment(
            noisy.slice(s![r.clone(), ..]),
            clean.slice(s![r.clone(), ..]),
            r.start,
            geometry,
            split,
            sigma,
            0,
        )
    }))
}

/// Full titration of one trajectory at one level: split, corrupt each segment
/// from its own noise sub-stream, window.
pub fn titrate(traj: &Trajectory, level: &TitrationLevel, geometry: &Geometry) -> Result<TitrationSet> {
    titrate_realization(traj, level, geometry, 0)
}

/// As [`titrate`], for the `realization`-th noise realization at this level.
pub fn titrate_realization(
    traj: &Trajectory,
    level: &TitrationLevel,
    geometry: &Geometry,
    realization: u64,
) -> Result<TitrationSet> {
    geometry.validate()?;
    let n = traj.n_steps();
    let required = minimum_length(geometry);
    if n < required {
        return Err(Error::Sizing { required, available: n });
    }
    let seed = rng::realization_seed(level.noise_seed, realization);
    let bounds = split_bounds(n);
    let sets = Split::ALL.map(|split| {
        let r = bounds[split.index() as usize].clone();
        let clean = traj.values.slice(s![r.clone(), ..]);
        let mut rng = rng::stream_rng(seed, rng::NOISE_STREAM_BASE + split.index());
        let noisy = corrupt(clean, &NoiseSchedule::Constant(level.sigma_inj), &mut rng)
            .expect("constant schedule is valid");
        window_segment(noisy.view(), clean, r.start, geometry, split, level.sigma_inj, realization)
    });
    let [train, val, test] = sets;
    Ok(TitrationSet { level: *level, train, val, test })
}

/// One line of the window exchange file. Values are single precision.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowRecord {
    pub window_id: String,
    pub split: Split,
    pub sigma: f64,
    pub realization: u64,
    pub start: usize,
    pub context: Vec<Vec<f32>>,
    pub target: Vec<Vec<f32>>,
    pub clean_target: Vec<Vec<f32>>,
}

fn to_f32_rows(a: &Array2<f64>) -> Vec<Vec<f32>> {
    a.rows().into_iter().map(|r| r.iter().map(|v| *v as f32).collect()).collect()
}

fn from_rows(rows: &[Vec<f32>], dim: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(Error::Dimension { expected: dim, got: r.len() });
        }
        out.row_mut(i).iter_mut().zip(r).for_each(|(d, s)| *d = f64::from(*s));
    }
    Ok(out)
}

/// Write windows as JSON lines.
pub fn write_windows<W: Write>(out: &mut W, set: &WindowSet) -> Result<()> {
    for w in &set.windows {
        let rec = WindowRecord {
            window_id: set.window_id(w),
            split: set.split,
            sigma: set.sigma,
            realization: w.realization,
            start: w.start,
            context: to_f32_rows(&w.context),
            target: to_f32_rows(&w.target),
            clean_target: to_f32_rows(&w.clean_target),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read window records, keeping their ids.
pub fn read_windows<R: BufRead>(input: R) -> Result<Vec<(WindowRecord, Window)>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: WindowRecord = serde_json::from_str(&line)?;
        let dim = rec.context.first().map_or(0, Vec::len);
        let index = rec
            .window_id
            .rsplit('-')
            .next()
            .and_then(|s| s.parse().ok())
            .unwrap_or(out.len());
        let w = Window {
            index,
            realization: rec.realization,
            start: rec.start,
            context: from_rows(&rec.context, dim)?,
            target: from_rows(&rec.target, dim)?,
            clean_target: from_rows(&rec.clean_target, dim)?,
        };
        out.push((rec, w));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate, to_params, Family, Method, ShockSpec, SystemSpec};

    fn ou(n: usize) -> Trajectory {
        let spec = SystemSpec {
            family: Family::Ou,
            params: to_params(&[("theta", 0.2), ("mu", 0.0), ("sigma", 0.3)]),
            dim: 1,
            dt: 0.5,
            n_steps: n,
            initial_cond: vec![0.0],
            method: Method::EulerMaruyama,
            rng_seed: 3,
        };
        simulate(&spec, &ShockSpec::none()).unwrap()
    }

    #[test]
    fn zero_sigma_is_bitwise_identity() {
        let t = ou(200);
        let s = inject_noise(&t, &TitrationLevel::new(0.0, 1).unwrap()).unwrap();
        assert_eq!(s.noisy, t.values);
    }

    #[test]
    fn unit_noise_moments() {
        let clean = Array2::<f64>::zeros((1_000_000, 1));
        let mut rng = rng::stream_rng(99, 1);
        let y = corrupt(clean.view(), &NoiseSchedule::Constant(1.0), &mut rng).unwrap();
        let n = y.len() as f64;
        let mean = y.sum() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.004, "mean {mean}");
        assert!((0.99..=1.01).contains(&var), "var {var}");
    }

    #[test]
    fn per_step_schedule() {
        let clean = Array2::<f64>::zeros((3, 2));
        let mut rng = rng::stream_rng(1, 1);
        let y = corrupt(clean.view(), &NoiseSchedule::PerStep(vec![0.0, 1.0, 0.0]), &mut rng).unwrap();
        assert_eq!(y.row(0).sum(), 0.0);
        assert_ne!(y.row(1).sum(), 0.0);
        assert_eq!(y.row(2).sum(), 0.0);
        assert!(corrupt(clean.view(), &NoiseSchedule::PerStep(vec![1.0]), &mut rng).is_err());
    }

    #[test]
    fn split_arithmetic() {
        let [a, b, c] = split_bounds(10_000);
        assert_eq!((a.end, b.end, c.end), (7000, 9000, 10_000));
        let t = ou(10_000);
        let g = Geometry::new(336, 64).with_stride(1);
        let set = titrate(&t, &TitrationLevel::new(0.5, 2).unwrap(), &g).unwrap();
        let last_train_end = set.train.windows.iter().map(|w| w.start + g.span()).max().unwrap();
        assert!(last_train_end <= 7000);
        assert_eq!(set.test.len(), 1000 - 336 - 64 + 1);
    }

    #[test]
    fn test_window_count_matches_counting_oracle() {
        for (n, stride) in [(5000usize, 1usize), (5000, 7), (6130, 32), (8000, 13)] {
            let g = Geometry::new(100, 20).with_stride(stride);
            let clean = Array2::<f64>::zeros((n, 1));
            let [_, _, test] = split_and_window(clean.view(), clean.view(), &g, 0.0).unwrap();
            // brute force: enumerate every start inside the test segment
            let seg = split_bounds(n)[2].clone();
            let brute = (seg.start..seg.end)
                .step_by(stride)
                .filter(|s0| s0 + g.span() <= seg.end)
                .count();
            assert_eq!(test.len(), brute);
            if n % 10 == 0 {
                assert_eq!(test.len(), (n / 10 - 120) / stride + 1);
            }
        }
    }

    #[test]
    fn too_short_names_minimum() {
        let t = ou(1000);
        let g = Geometry::new(336, 64);
        match titrate(&t, &TitrationLevel::new(0.1, 0).unwrap(), &g) {
            Err(Error::Sizing { required, available }) => {
                assert_eq!(available, 1000);
                assert_eq!(required, minimum_length(&g));
                assert!((3990..=4000).contains(&required), "{required}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn windows_do_not_leak_and_keep_clean_targets() {
        let t = ou(8000);
        let g = Geometry::new(50, 10);
        let level = TitrationLevel::new(0.3, 5).unwrap();
        let set = titrate(&t, &level, &g).unwrap();
        let bounds = split_bounds(8000);
        for (split, r) in Split::ALL.iter().zip(bounds.iter()) {
            for w in &set.split(*split).windows {
                assert!(w.start >= r.start && w.start + g.span() <= r.end);
                let t0 = w.start + g.context_len;
                assert_eq!(w.clean_target, t.values.slice(s![t0..t0 + 10, ..]));
            }
        }
    }

    #[test]
    fn targets_are_clean_plus_regenerated_noise() {
        let t = ou(4000);
        let g = Geometry::new(30, 10).with_stride(10);
        let level = TitrationLevel::new(0.7, 8).unwrap();
        let set = titrate(&t, &level, &g).unwrap();
        let seg = split_bounds(4000)[2].clone();
        let mut rng = rng::stream_rng(rng::realization_seed(8, 0), rng::NOISE_STREAM_BASE + 2);
        let noise: Vec<f64> = (0..seg.len()).map(|_| 0.7 * standard_normal(&mut rng)).collect();
        for w in &set.test.windows {
            for h in 0..10 {
                let t_abs = w.start + g.context_len + h;
                let expect = t.values[[t_abs, 0]] + noise[t_abs - seg.start];
                assert_eq!(w.target[[h, 0]], expect);
            }
        }
    }

    #[test]
    fn noise_seeds_change_noise_not_signal() {
        let t = ou(4000);
        let g = Geometry::new(30, 10);
        let a = titrate(&t, &TitrationLevel::new(0.5, 1).unwrap(), &g).unwrap();
        let b = titrate(&t, &TitrationLevel::new(0.5, 2).unwrap(), &g).unwrap();
        assert_eq!(a.test.windows[0].clean_target, b.test.windows[0].clean_target);
        assert_ne!(a.test.windows[0].target, b.test.windows[0].target);
    }

    #[test]
    fn shock_lands_mid_train() {
        let n = 35_999;
        let shock_step = ShockSpec::param(&[("mu", 1.0)]).shock_step(n).unwrap();
        let train = split_bounds(n)[0].clone();
        let frac = shock_step as f64 / train.len() as f64;
        assert!((frac - 0.5).abs() < 1e-3, "{frac}");
    }

    #[test]
    fn jsonl_roundtrip_is_single_precision() {
        let t = ou(4000);
        let g = Geometry::new(30, 10);
        let set = titrate(&t, &TitrationLevel::new(0.5, 1).unwrap(), &g).unwrap();
        let mut buf = Vec::new();
        write_windows(&mut buf, &set.test).unwrap();
        let back = read_windows(buf.as_slice()).unwrap();
        assert_eq!(back.len(), set.test.len());
        let (rec, w) = &back[3];
        assert_eq!(rec.window_id, "r0-test-00003");
        let orig = &set.test.windows[3];
        assert_eq!(w.start, orig.start);
        assert_eq!(w.target[[2, 0]], f64::from(orig.target[[2, 0]] as f32));
    }
}
