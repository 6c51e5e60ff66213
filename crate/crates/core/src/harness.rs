//! Scenario registry, experiment configuration, prediction exchange and the
//! evaluate/report pipeline that turns forecasts into a calibration stamp.
//!
//! File formats (all versioned):
//!
//! * `manifest.json`: the resolved experiment, shock step and SHA-256 of every
//!   generated file. Evaluation re-simulates and refuses to run on a mismatch.
//! * `trajectories/seed_<seed>.csv`: clean trajectory, one row per step.
//! * `windows/sigma_<σ>/H<h>/<split>.jsonl`: [`WindowRecord`] lines.
//! * predictions: [`PredictionRecord`] lines, one per test window.
//! * `reports/report_H<h>.{json,csv,md}`: [`DiagnosticsReport`].

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::belief::EigenGaussian;
use crate::dynamics::{simulate, Family, ShockSpec, SystemSpec, Trajectory};
use crate::error::{Error, Result};
use crate::refmodel::{self, ModelConfig, RefModel, Scaler, TrainConfig, TrainOutcome};
use crate::stats::{
    self, binomial_se, crps_ensemble, crps_gaussian, ks_uniform, mahalanobis_suite,
    normal_quantile, pit_histogram, wilson_interval, ResidualMode, SwSummary, TestResult, PIT_BINS,
};
use crate::titration::{
    titrate_realization, write_windows, Geometry, Split, TitrationLevel, WindowSet,
    DEFAULT_CONTEXT_LEN,
};

pub const FORMAT_VERSION: u32 = 1;
pub const OUTPUT_ENV: &str = "SHOCKBENCH_OUT";
const Z95: f64 = 1.959_963_984_540_054;

// ---------------------------------------------------------------------------
// scenario registry

const SCENARIOS: &[&str] = &[
    "LORENZ_MAIN",
    "ROSSLER_MAIN",
    "CHUA_MAIN",
    "LORENZ_BASE",
    "LORENZ_PARAM",
    "LORENZ_STATE",
    "LORENZ_SWITCH",
    "ROSSLER_BASE",
    "ROSSLER_PARAM",
    "LORENZ96_BASE",
    "LORENZ96_SWITCH",
    "CHUA_BASE",
    "CHUA_PARAM",
    "CHUA_SWITCH",
    "OU_BASE",
    "OU_PARAM",
    "SLDS_BASE",
    "SLDS_PARAM",
    "SLDS_SWITCH",
    "DOUBLEWELL_BASE",
    "DOUBLEWELL_PARAM",
    "DOUBLEWELL_SWITCH",
    "SEASONAL_AR_BASE",
    "SEASONAL_AR_PARAM",
    "GARCH_BASE",
    "GARCH_PARAM",
];

pub const DEFAULT_TRAJECTORY_SEED: u64 = 1955;

pub fn scenario_ids() -> &'static [&'static str] {
    SCENARIOS
}

fn system(family: Family, dt: f64, n_steps: usize, ic: &[f64], params: &[(&str, f64)]) -> SystemSpec {
    SystemSpec {
        family,
        params: crate::dynamics::to_params(params),
        dim: ic.len(),
        dt,
        n_steps,
        initial_cond: ic.to_vec(),
        method: family.method(),
        rng_seed: DEFAULT_TRAJECTORY_SEED,
    }
}

/// Resolve a registry id to its system and shock.
pub fn scenario(id: &str) -> Result<(SystemSpec, ShockSpec)> {
    let lorenz = |n| {
        system(Family::Lorenz63, 0.01, n, &[1.0, 0.98, 1.1], &[("sigma", 10.0), ("rho", 28.0), ("beta", 8.0 / 3.0)])
    };
    let rossler = |n| system(Family::Rossler, 0.01, n, &[1.0, 1.0, 1.0], &[("a", 0.2), ("b", 0.2), ("c", 5.7)]);
    let chua = |n| {
        system(
            Family::Chua,
            0.005,
            n,
            &[0.1, 0.0, 0.0],
            &[("alpha", 15.6), ("beta", 28.0), ("m0", -8.0 / 7.0), ("m1", -5.0 / 7.0)],
        )
    };
    let l96 = || system(Family::Lorenz96, 0.007, 55000, &[1.01, 1.0, 1.0, 1.0, 1.0, 1.0], &[("forcing", 8.0)]);
    let ou = || system(Family::Ou, 0.5, 25000, &[0.0], &[("theta", 0.2), ("mu", 0.0), ("sigma", 0.3)]);
    let slds = || {
        system(
            Family::Slds,
            0.01,
            25000,
            &[0.0],
            &[("A1", 0.9), ("Q1", 0.05), ("A2", 0.98), ("Q2", 0.35), ("p11", 0.94), ("p22", 0.95)],
        )
    };
    let dw = || system(Family::DoubleWell, 0.5, 25000, &[1.0], &[("a", 1.5), ("sigma", 0.25)]);
    let sar = || {
        system(
            Family::SeasonalAR,
            0.01,
            25000,
            &[0.0],
            &[("S", 24.0), ("phi", 0.5), ("sigma", 0.2), ("a0", 1.0), ("amp_drift_per_step", 0.0)],
        )
    };
    let garch = || system(Family::Garch, 0.01, 25000, &[0.0], &[("omega", 0.01), ("alpha", 0.06), ("beta", 0.90)]);
    let none = ShockSpec::none;

    let out = match id {
        "LORENZ_MAIN" => (lorenz(25000), none()),
        "ROSSLER_MAIN" => (rossler(25000), none()),
        "CHUA_MAIN" => (chua(35000), none()),
        "LORENZ_BASE" => (lorenz(35999), none()),
        "LORENZ_PARAM" => (
            lorenz(35999),
            ShockSpec::param(&[("sigma", 10.1), ("rho", 28.1), ("beta", 8.1 / 3.0)]),
        ),
        "LORENZ_STATE" => (lorenz(35999), ShockSpec::state_eps(0.9)),
        "LORENZ_SWITCH" => (
            lorenz(35999),
            ShockSpec::switch(&[("rho", 28.1)], Some(vec![1.002, 0.982, 1.102])),
        ),
        "ROSSLER_BASE" => (rossler(35999), none()),
        "ROSSLER_PARAM" => (rossler(35999), ShockSpec::param(&[("a", 0.25), ("b", 0.25), ("c", 5.75)])),
        "LORENZ96_BASE" => (l96(), none()),
        "LORENZ96_SWITCH" => (
            l96(),
            ShockSpec::switch(&[("forcing", 9.0)], Some(vec![0.99, 1.02, 1.02, 1.03, 1.01, 1.01])),
        ),
        "CHUA_BASE" => (chua(35999), none()),
        "CHUA_PARAM" => (
            chua(35999),
            ShockSpec::param(&[("alpha", 15.9), ("beta", 28.5), ("m0", -8.1 / 7.0), ("m1", -5.2 / 7.0)]),
        ),
        "CHUA_SWITCH" => (chua(35999), ShockSpec::switch(&[], Some(vec![0.11, 0.01, 0.02]))),
        "OU_BASE" => (ou(), none()),
        "OU_PARAM" => (ou(), ShockSpec::param(&[("mu", 0.5)])),
        "SLDS_BASE" => (slds(), none()),
        "SLDS_PARAM" => (
            slds(),
            ShockSpec::param(&[("A1", 0.83), ("Q1", 0.5), ("A2", 0.97), ("Q2", 0.3), ("p11", 0.96), ("p22", 0.92)]),
        ),
        "SLDS_SWITCH" => (
            slds(),
            ShockSpec::switch(
                &[("A1", 0.87), ("Q1", 0.07), ("A2", 0.99), ("Q2", 0.45), ("p11", 0.90), ("p22", 0.95)],
                None,
            ),
        ),
        "DOUBLEWELL_BASE" => (dw(), none()),
        "DOUBLEWELL_PARAM" => (dw(), ShockSpec::param(&[("a", 1.0), ("sigma", 0.35)])),
        "DOUBLEWELL_SWITCH" => (dw(), ShockSpec::switch(&[("a", 1.0), ("sigma", 0.35)], None)),
        "SEASONAL_AR_BASE" => (sar(), none()),
        "SEASONAL_AR_PARAM" => (sar(), ShockSpec::param(&[("a0", 1.4), ("sigma", 0.35), ("phi", 0.8)])),
        "GARCH_BASE" => (garch(), none()),
        "GARCH_PARAM" => (garch(), ShockSpec::param(&[("omega", 0.03), ("alpha", 0.15), ("beta", 0.70)])),
        "KS_BASE" | "KS_PARAM" => return Err(Error::OutOfScope(id.to_string())),
        _ => {
            return Err(Error::UnknownScenario { id: id.to_string(), available: SCENARIOS.join(", ") });
        }
    };
    Ok(out)
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// `N(clean target, σ²)`: the exact law of the noisy target given the clean path.
    TrueLaw,
    /// Same mean, half the true standard deviation.
    HalfStd,
    /// Same mean, a fixed standard deviation regardless of the data's noise level.
    FixedSigma(f64),
}

impl OracleKind {
    fn label(&self) -> String {
        match self {
            OracleKind::TrueLaw => "oracle:true_law".into(),
            OracleKind::HalfStd => "oracle:half_std".into(),
            OracleKind::FixedSigma(s) => format!("oracle:fixed_sigma={s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForecasterSource {
    Oracle { oracle: OracleKind },
    RefModel { checkpoint: PathBuf },
    /// Prediction file; `{h}` in the path is replaced by the horizon.
    External { predictions: PathBuf },
}

impl Default for ForecasterSource {
    fn default() -> Self {
        ForecasterSource::Oracle { oracle: OracleKind::TrueLaw }
    }
}

impl ForecasterSource {
    pub fn label(&self) -> String {
        let name = |p: &Path| p.file_name().map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into());
        match self {
            ForecasterSource::Oracle { oracle } => oracle.label(),
            ForecasterSource::RefModel { checkpoint } => format!("ref_model:{}", name(checkpoint)),
            ForecasterSource::External { predictions } => format!("external:{}", name(predictions)),
        }
    }
}

/// Thresholds of the pass/fail stamp. These are policy, printed with the raw numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StampPolicy {
    /// FDR level for the per-dimension Shapiro–Wilk tests.
    pub q: f64,
    /// Coverage may deviate from nominal by this many binomial standard errors.
    pub coverage_se: f64,
    pub mahalanobis_alpha: f64,
    /// SW pass rate must reach `1 - q - sw_slack`.
    pub sw_slack: f64,
    /// Minimum fraction of test windows with a prediction.
    pub min_prediction_fraction: f64,
}

impl Default for StampPolicy {
    fn default() -> Self {
        StampPolicy { q: 0.05, coverage_se: 3.0, mahalanobis_alpha: 0.01, sw_slack: 0.05, min_prediction_fraction: 0.95 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub sigmas: Vec<f64>,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_context_len")]
    pub context_len: usize,
    /// Window stride; half the horizon when absent.
    #[serde(default)]
    pub stride: Option<usize>,
    /// Overrides the registry's trajectory length.
    #[serde(default)]
    pub n_steps: Option<usize>,
    #[serde(default = "default_trajectory_seeds")]
    pub trajectory_seeds: Vec<u64>,
    #[serde(default = "default_noise_realizations")]
    pub noise_realizations: usize,
    #[serde(default = "default_noise_seed")]
    pub noise_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Splits written as window files by `generate`.
    #[serde(default = "default_export_splits")]
    pub export_splits: Vec<Split>,
    #[serde(default)]
    pub forecaster: ForecasterSource,
    #[serde(default)]
    pub stamp: StampPolicy,
    #[serde(default)]
    pub model: Option<ModelOptions>,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Architecture knobs of the reference model; the rest follows from the windows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub reflections: usize,
    pub context_frame: bool,
    pub context_scale: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1, 1);
        ModelOptions { reflections: m.reflections, context_frame: m.context_frame, context_scale: m.context_scale }
    }
}

fn default_horizons() -> Vec<usize> {
    vec![64]
}
fn default_context_len() -> usize {
    DEFAULT_CONTEXT_LEN
}
fn default_trajectory_seeds() -> Vec<u64> {
    vec![DEFAULT_TRAJECTORY_SEED]
}
fn default_noise_realizations() -> usize {
    3
}
fn default_noise_seed() -> u64 {
    2024
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("shockbench-out")
}
fn default_export_splits() -> Vec<Split> {
    vec![Split::Test]
}

impl ExperimentConfig {
    /// Defaults everywhere except the scenario and sweep.
    pub fn new(scenario: &str, sigmas: &[f64]) -> Self {
        ExperimentConfig {
            scenario: scenario.to_string(),
            sigmas: sigmas.to_vec(),
            horizons: default_horizons(),
            context_len: default_context_len(),
            stride: None,
            n_steps: None,
            trajectory_seeds: default_trajectory_seeds(),
            noise_realizations: default_noise_realizations(),
            noise_seed: default_noise_seed(),
            output_dir: default_output_dir(),
            export_splits: default_export_splits(),
            forecaster: ForecasterSource::default(),
            stamp: StampPolicy::default(),
            model: None,
            train: TrainConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        scenario(&self.scenario)?;
        if self.sigmas.is_empty() {
            return Err(Error::Config("sigma sweep is empty".into()));
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("noise level {s} must be finite and nonnegative")));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config("horizons must be a nonempty list of positive lengths".into()));
        }
        if self.trajectory_seeds.is_empty() || self.noise_realizations == 0 {
            return Err(Error::Config("need at least one trajectory seed and one noise realization".into()));
        }
        for &h in &self.horizons {
            self.geometry(h).validate()?;
        }
        Ok(())
    }

    pub fn geometry(&self, horizon: usize) -> Geometry {
        let g = Geometry::new(self.context_len, horizon);
        match self.stride {
            Some(s) => g.with_stride(s),
            None => g,
        }
    }

    /// Output directory, relative paths resolved against `root` (the
    /// `SHOCKBENCH_OUT` variable in the CLI).
    pub fn output_path(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) => r.join(&self.output_dir),
            None => self.output_dir.clone(),
        }
    }

    /// Registry system with the configured overrides, one per trajectory seed.
    pub fn systems(&self) -> Result<(Vec<SystemSpec>, ShockSpec)> {
        let (base, shock) = scenario(&self.scenario)?;
        let specs = self
            .trajectory_seeds
            .iter()
            .map(|&seed| SystemSpec { rng_seed: seed, n_steps: self.n_steps.unwrap_or(base.n_steps), ..base.clone() })
            .collect();
        Ok((specs, shock))
    }

    fn model_config(&self, horizon: usize, dim: usize) -> ModelConfig {
        let mut m = ModelConfig::new(self.context_len, horizon, dim);
        if let Some(o) = self.model {
            m.reflections = o.reflections;
            m.context_frame = o.context_frame;
            m.context_scale = o.context_scale;
        }
        m
    }
}

// ---------------------------------------------------------------------------
// experiment data

/// Simulated trajectories of one experiment, shared by every pipeline stage.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub trajectories: Vec<Trajectory>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (specs, shock) = config.systems()?;
        let trajectories = specs.iter().map(|s| simulate(s, &shock)).collect::<Result<Vec<_>>>()?;
        Ok(Experiment { config, trajectories })
    }

    pub fn dim(&self) -> usize {
        self.trajectories[0].dim()
    }

    /// All windows of one split at one level, trajectories × noise
    /// realizations concatenated. Realization ids run `t * R + r`.
    pub fn windows(&self, sigma: f64, horizon: usize, split: Split) -> Result<WindowSet> {
        let g = self.config.geometry(horizon);
        let level = TitrationLevel::new(sigma, self.config.noise_seed)?;
        let r = self.config.noise_realizations;
        let mut sets = Vec::with_capacity(self.trajectories.len() * r);
        for (t, traj) in self.trajectories.iter().enumerate() {
            for k in 0..r {
                let ts = titrate_realization(traj, &level, &g, (t * r + k) as u64)?;
                sets.push(ts.split(split).clone());
            }
        }
        WindowSet::concat(&sets)
    }
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub engine_version: String,
    pub config: ExperimentConfig,
    pub systems: Vec<SystemSpec>,
    pub shock: ShockSpec,
    pub shock_step: Option<usize>,
    /// Relative path → SHA-256 hex digest.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sigma_dir(sigma: f64) -> String {
    format!("sigma_{sigma}")
}

fn trajectory_csv(traj: &Trajectory) -> String {
    let mut s = String::new();
    let header: Vec<String> = (0..traj.dim()).map(|j| format!("x{j}")).collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for row in traj.values.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn write_tracked(root: &Path, rel: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, bytes)?;
    files.insert(rel.to_string(), sha256_hex(bytes));
    Ok(())
}

fn window_bytes(set: &WindowSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_windows(&mut buf, set)?;
    Ok(buf)
}

/// Simulate, titrate and write trajectories, window files and the manifest.
pub fn generate(exp: &Experiment, out: &Path) -> Result<Manifest> {
    let cfg = &exp.config;
    let mut files = BTreeMap::new();
    for traj in &exp.trajectories {
        let rel = format!("trajectories/seed_{}.csv", traj.spec.rng_seed);
        write_tracked(out, &rel, trajectory_csv(traj).as_bytes(), &mut files)?;
    }
    for &sigma in &cfg.sigmas {
        for &h in &cfg.horizons {
            for &split in &cfg.export_splits {
                let set = exp.windows(sigma, h, split)?;
                let rel = format!("windows/{}/H{h}/{}.jsonl", sigma_dir(sigma), split.as_str());
                write_tracked(out, &rel, &window_bytes(&set)?, &mut files)?;
            }
        }
    }
    let first = &exp.trajectories[0];
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        systems: exp.trajectories.iter().map(|t| t.spec.clone()).collect(),
        shock: first.shock.clone(),
        shock_step: first.shock_step,
        files,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("manifest version {} is not {FORMAT_VERSION}", m.format_version)));
    }
    Ok(m)
}

/// Check that re-simulated trajectories hash to the manifest's digests.
pub fn verify_manifest(exp: &Experiment, manifest: &Manifest) -> Result<()> {
    for traj in &exp.trajectories {
        let rel = format!("trajectories/seed_{}.csv", traj.spec.rng_seed);
        let want = manifest.files.get(&rel).ok_or_else(|| Error::Format(format!("manifest lacks {rel}")))?;
        let got = sha256_hex(trajectory_csv(traj).as_bytes());
        if &got != want {
            return Err(Error::Format(format!("{rel}: digest {got} does not match manifest {want}")));
        }
    }
    Ok(())
}

/// Write window files for selected splits at one level (no manifest).
pub fn write_titration(exp: &Experiment, sigma: f64, horizon: usize, splits: &[Split], out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for &split in splits {
        let set = exp.windows(sigma, horizon, split)?;
        let path = out.join(format!("windows/{}/H{horizon}/{}.jsonl", sigma_dir(sigma), split.as_str()));
        fs::create_dir_all(path.parent().expect("nested path"))?;
        fs::write(&path, window_bytes(&set)?)?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// reference model

/// Train the reference model on one level's train split, early-stopped on val.
pub fn train_ref(exp: &Experiment, sigma: f64, horizon: usize) -> Result<TrainOutcome> {
    let train = exp.windows(sigma, horizon, Split::Train)?;
    let val = exp.windows(sigma, horizon, Split::Val)?;
    let cfg = exp.config.model_config(horizon, exp.dim());
    let init = RefModel::new(cfg, Scaler::fit(&train)?, exp.config.train.seed)?;
    refmodel::train(&init, &train, &val, &exp.config.train)
}

// ---------------------------------------------------------------------------
// prediction exchange

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefBlock {
    pub mean: Vec<f64>,
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub hh_vectors: Vec<Vec<f64>>,
}

/// Forecast payload. Arrays are indexed `[horizon step][coordinate]` except
/// spectral blocks, which hold one `H`-dimensional belief per coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum Payload {
    SpectralBelief { blocks: Vec<BeliefBlock> },
    MeanStd { mean: Vec<Vec<f64>>, std: Vec<Vec<f64>> },
    Ensemble { samples: Vec<Vec<Vec<f64>>> },
}

impl Payload {
    pub fn form(&self) -> &'static str {
        match self {
            Payload::SpectralBelief { .. } => "spectral_belief",
            Payload::MeanStd { .. } => "mean_std",
            Payload::Ensemble { .. } => "ensemble",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub version: u32,
    pub sigma: f64,
    pub horizon: usize,
    pub window_id: String,
    #[serde(flatten)]
    pub payload: Payload,
}

pub fn write_predictions<W: Write>(mut out: W, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(input: R) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if rec.version != FORMAT_VERSION {
            return Err(Error::Format(format!("line {}: version {} is not {FORMAT_VERSION}", i + 1, rec.version)));
        }
        out.push(rec);
    }
    Ok(out)
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Oracle forecasts for every window of a set.
pub fn oracle_predictions(kind: OracleKind, set: &WindowSet) -> Vec<PredictionRecord> {
    let std = match kind {
        OracleKind::TrueLaw => set.sigma,
        OracleKind::HalfStd => 0.5 * set.sigma,
        OracleKind::FixedSigma(s) => s,
    };
    set.windows
        .iter()
        .map(|w| PredictionRecord {
            version: FORMAT_VERSION,
            sigma: set.sigma,
            horizon: set.geometry.horizon,
            window_id: set.window_id(w),
            payload: Payload::MeanStd {
                mean: rows(&w.clean_target),
                std: vec![vec![std; set.dim]; set.geometry.horizon],
            },
        })
        .collect()
}

pub fn model_predictions(model: &RefModel, set: &WindowSet) -> Result<Vec<PredictionRecord>> {
    set.windows
        .iter()
        .map(|w| {
            let blocks = model
                .forecast(w.context.view())?
                .into_iter()
                .map(|b| BeliefBlock { mean: b.mean, lambdas: b.lambdas, hh_vectors: b.hh_vectors })
                .collect();
            Ok(PredictionRecord {
                version: FORMAT_VERSION,
                sigma: set.sigma,
                horizon: set.geometry.horizon,
                window_id: set.window_id(w),
                payload: Payload::SpectralBelief { blocks },
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stamp {
    Pass,
    Fail,
    /// Coverage passed but the eigenframe tests could not run (ensemble form).
    Untested,
}

impl Stamp {
    pub fn as_str(self) -> &'static str {
        match self {
            Stamp::Pass => "PASS",
            Stamp::Fail => "FAIL",
            Stamp::Untested => "UNTESTED",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBlock {
    pub sigma: f64,
    pub horizon: usize,
    pub form: String,
    pub windows_total: usize,
    pub windows_evaluated: usize,
    pub windows_missing: usize,
    /// `(window, step, coordinate)` triples scored.
    pub observations: usize,
    pub coverage_50: f64,
    pub coverage_90: f64,
    pub pit_histogram: Option<Vec<usize>>,
    pub pit_ks: Option<TestResult>,
    pub mahalanobis_ks: Option<TestResult>,
    pub mahalanobis_mean_ratio: Option<f64>,
    pub sw: Option<SwSummary>,
    pub crps: f64,
    pub mse: f64,
    pub stamp: Stamp,
    pub notes: Vec<String>,
}

enum Forecast {
    Gaussian(Vec<EigenGaussian>),
    Ensemble(Vec<Array2<f64>>),
}

fn to_forecast(rec: &PredictionRecord, h: usize, dim: usize) -> Result<Forecast> {
    let bad = |what: &str| Error::Format(format!("{}: {what}", rec.window_id));
    let check_grid = |g: &[Vec<f64>]| g.len() == h && g.iter().all(|r| r.len() == dim);
    match &rec.payload {
        Payload::SpectralBelief { blocks } => {
            if blocks.len() != dim {
                return Err(bad("one belief block per coordinate expected"));
            }
            let beliefs = blocks
                .iter()
                .map(|b| {
                    if b.mean.len() != h {
                        return Err(bad("belief block length differs from the horizon"));
                    }
                    EigenGaussian::new(b.mean.clone(), b.lambdas.clone(), b.hh_vectors.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Forecast::Gaussian(beliefs))
        }
        Payload::MeanStd { mean, std } => {
            if !check_grid(mean) || !check_grid(std) {
                return Err(bad("mean/std arrays must be horizon × dim"));
            }
            let beliefs = (0..dim)
                .map(|j| {
                    EigenGaussian::diagonal(mean.iter().map(|r| r[j]).collect(), std.iter().map(|r| r[j]).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Forecast::Gaussian(beliefs))
        }
        Payload::Ensemble { samples } => {
            if samples.is_empty() || !samples.iter().all(|s| check_grid(s)) {
                return Err(bad("ensemble members must be horizon × dim"));
            }
            let members = samples
                .iter()
                .map(|s| Array2::from_shape_fn((h, dim), |(i, j)| s[i][j]))
                .collect();
            Ok(Forecast::Ensemble(members))
        }
    }
}

fn coverage_ok(rate: f64, nominal: f64, n: usize, policy: &StampPolicy) -> bool {
    (rate - nominal).abs() <= policy.coverage_se * binomial_se(nominal, n)
}

/// Score the predictions for one test set.
pub fn evaluate_block(set: &WindowSet, predictions: &[PredictionRecord], policy: &StampPolicy) -> Result<CalibrationBlock> {
    let (h, dim) = (set.geometry.horizon, set.dim);
    let by_id: HashMap<&str, &PredictionRecord> = predictions.iter().map(|p| (p.window_id.as_str(), p)).collect();
    let ids: Vec<String> = set.windows.iter().map(|w| set.window_id(w)).collect();
    if let Some(stray) = predictions.iter().find(|p| !ids.contains(&p.window_id)) {
        return Err(Error::Format(format!("prediction for unknown window {}", stray.window_id)));
    }

    let mut notes = Vec::new();
    let mut forms = Vec::new();
    let mut gaussian: Vec<(Vec<EigenGaussian>, &Array2<f64>)> = Vec::new();
    let mut ensemble: Vec<(Vec<Array2<f64>>, &Array2<f64>)> = Vec::new();
    for (w, id) in set.windows.iter().zip(&ids) {
        let Some(rec) = by_id.get(id.as_str()) else { continue };
        if !forms.contains(&rec.payload.form()) {
            forms.push(rec.payload.form());
        }
        match to_forecast(rec, h, dim)? {
            Forecast::Gaussian(b) => gaussian.push((b, &w.target)),
            Forecast::Ensemble(e) => ensemble.push((e, &w.target)),
        }
    }
    if forms.len() > 1 {
        return Err(Error::Format(format!("mixed prediction forms {forms:?} in one set")));
    }
    let total = set.len();
    let evaluated = gaussian.len() + ensemble.len();
    let missing = total - evaluated;
    if total == 0 || (evaluated as f64) < policy.min_prediction_fraction * total as f64 {
        return Err(Error::Format(format!(
            "predictions cover {evaluated} of {total} test windows, below the required {:.0}%",
            100.0 * policy.min_prediction_fraction
        )));
    }
    if missing > 0 {
        notes.push(format!("{missing} of {total} windows had no prediction"));
    }

    let mut block = if ensemble.is_empty() {
        score_gaussian(&gaussian, h, dim, policy, &mut notes)?
    } else {
        notes.push("ensemble form: PIT, Mahalanobis and Shapiro-Wilk tests skipped".into());
        score_ensemble(&ensemble, h, dim, policy)?
    };
    block.sigma = set.sigma;
    block.horizon = h;
    block.form = forms.first().copied().unwrap_or("none").to_string();
    block.windows_total = total;
    block.windows_evaluated = evaluated;
    block.windows_missing = missing;
    block.notes = notes;
    Ok(block)
}

fn empty_block() -> CalibrationBlock {
    CalibrationBlock {
        sigma: 0.0,
        horizon: 0,
        form: String::new(),
        windows_total: 0,
        windows_evaluated: 0,
        windows_missing: 0,
        observations: 0,
        coverage_50: 0.0,
        coverage_90: 0.0,
        pit_histogram: None,
        pit_ks: None,
        mahalanobis_ks: None,
        mahalanobis_mean_ratio: None,
        sw: None,
        crps: 0.0,
        mse: 0.0,
        stamp: Stamp::Fail,
        notes: Vec::new(),
    }
}

fn score_gaussian(
    items: &[(Vec<EigenGaussian>, &Array2<f64>)],
    h: usize,
    dim: usize,
    policy: &StampPolicy,
    notes: &mut Vec<String>,
) -> Result<CalibrationBlock> {
    let z50 = normal_quantile(0.75)?;
    let z90 = normal_quantile(0.95)?;
    let (mut in50, mut in90, mut n) = (0usize, 0usize, 0usize);
    let (mut crps, mut sq) = (0.0, 0.0);
    let mut pits = Vec::new();
    let mut beliefs = Vec::with_capacity(items.len() * dim);
    let mut targets = Vec::with_capacity(items.len() * dim);
    // one Shapiro-Wilk sample per (eigendirection, coordinate)
    let mut sw_dims = vec![Vec::with_capacity(items.len()); h * dim];
    for (blocks, target) in items {
        for (j, b) in blocks.iter().enumerate() {
            let y: Vec<f64> = target.column(j).to_vec();
            let sd = b.marginal_std();
            for i in 0..h {
                let r = y[i] - b.mean[i];
                in50 += usize::from(r.abs() <= z50 * sd[i]);
                in90 += usize::from(r.abs() <= z90 * sd[i]);
                crps += crps_gaussian(b.mean[i], sd[i], y[i]);
                sq += r * r;
                n += 1;
                if sd[i] > 0.0 {
                    pits.push(stats::normal_cdf(r / sd[i]));
                }
            }
            let res = b.whiten(&y);
            for (k, z) in res.z.iter().enumerate() {
                sw_dims[k * dim + j].push(*z);
            }
            beliefs.push(b.clone());
            targets.push(y);
        }
    }
    let mut block = empty_block();
    block.observations = n;
    block.coverage_50 = in50 as f64 / n as f64;
    block.coverage_90 = in90 as f64 / n as f64;
    block.crps = crps / n as f64;
    block.mse = sq / n as f64;
    if pits.len() < n {
        notes.push(format!("{} observations with zero predictive spread left out of the PIT", n - pits.len()));
    }
    if !pits.is_empty() {
        block.pit_histogram = Some(pit_histogram(&pits, PIT_BINS));
        block.pit_ks = Some(ks_uniform(&pits)?.at(policy.mahalanobis_alpha));
    }
    let maha = mahalanobis_suite(&beliefs, &targets, ResidualMode::Mean)?;
    block.mahalanobis_ks = Some(maha.ks.at(policy.mahalanobis_alpha));
    block.mahalanobis_mean_ratio = Some(maha.mean_ratio());
    match stats::sw_pass_rate(&sw_dims, policy.q) {
        Ok(sw) => {
            if sw.degenerate > 0 {
                notes.push(format!("{} constant whitened dimensions counted as rejected", sw.degenerate));
            }
            block.sw = Some(sw);
        }
        Err(Error::Domain(msg)) => notes.push(format!("Shapiro-Wilk skipped: {msg}")),
        Err(e) => return Err(e),
    }
    let pass = coverage_ok(block.coverage_50, 0.5, n, policy)
        && coverage_ok(block.coverage_90, 0.9, n, policy)
        && block.mahalanobis_ks.is_some_and(|k| k.p_value > policy.mahalanobis_alpha)
        && block.sw.is_some_and(|s| s.pass_rate >= 1.0 - policy.q - policy.sw_slack);
    block.stamp = if pass { Stamp::Pass } else { Stamp::Fail };
    Ok(block)
}

fn score_ensemble(
    items: &[(Vec<Array2<f64>>, &Array2<f64>)],
    h: usize,
    dim: usize,
    policy: &StampPolicy,
) -> Result<CalibrationBlock> {
    let mut members = Vec::new();
    let mut ys = Vec::new();
    let (mut crps, mut sq) = (0.0, 0.0);
    for (ens, target) in items {
        for i in 0..h {
            for j in 0..dim {
                let s: Vec<f64> = ens.iter().map(|m| m[[i, j]]).collect();
                let y = target[[i, j]];
                let mean = s.iter().sum::<f64>() / s.len() as f64;
                crps += crps_ensemble(&s, y)?;
                sq += (y - mean).powi(2);
                members.push(s);
                ys.push(y);
            }
        }
    }
    let n = ys.len();
    let mut block = empty_block();
    block.observations = n;
    block.coverage_50 = stats::ensemble_coverage(&members, &ys, 0.5)?;
    block.coverage_90 = stats::ensemble_coverage(&members, &ys, 0.9)?;
    block.crps = crps / n as f64;
    block.mse = sq / n as f64;
    let cov = coverage_ok(block.coverage_50, 0.5, n, policy) && coverage_ok(block.coverage_90, 0.9, n, policy);
    block.stamp = if cov { Stamp::Untested } else { Stamp::Fail };
    Ok(block)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub format_version: u32,
    pub scenario: String,
    pub forecaster: String,
    pub horizon: usize,
    pub policy: StampPolicy,
    pub blocks: Vec<CalibrationBlock>,
    pub threshold: String,
}

/// "passes at σ=a, fails at σ=b": where the stamp first flips along the sweep.
pub fn threshold_line(forecaster: &str, horizon: usize, blocks: &[CalibrationBlock]) -> String {
    let mut sorted: Vec<&CalibrationBlock> = blocks.iter().collect();
    sorted.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
    let first_fail = sorted.iter().position(|b| b.stamp != Stamp::Pass);
    let tail = match first_fail {
        None => match sorted.last() {
            Some(b) => format!("passes at every σ up to {}", b.sigma),
            None => "no levels evaluated".into(),
        },
        Some(0) => format!("fails from σ={} ({})", sorted[0].sigma, sorted[0].stamp.as_str()),
        Some(k) => format!(
            "passes at σ={}, fails at σ={} ({})",
            sorted[k - 1].sigma,
            sorted[k].sigma,
            sorted[k].stamp.as_str()
        ),
    };
    format!("{forecaster} H={horizon}: {tail}")
}

fn predictions_for(exp: &Experiment, set: &WindowSet, cache: &mut Option<RefModel>) -> Result<Vec<PredictionRecord>> {
    match &exp.config.forecaster {
        ForecasterSource::Oracle { oracle } => Ok(oracle_predictions(*oracle, set)),
        ForecasterSource::RefModel { checkpoint } => {
            if cache.is_none() {
                *cache = Some(RefModel::load(BufReader::new(File::open(checkpoint)?))?);
            }
            let model = cache.as_ref().expect("loaded");
            if model.config.horizon != set.geometry.horizon || model.config.dim != set.dim {
                return Err(Error::Config(format!(
                    "checkpoint forecasts H={} dim={}, windows are H={} dim={}",
                    model.config.horizon, model.config.dim, set.geometry.horizon, set.dim
                )));
            }
            model_predictions(model, set)
        }
        ForecasterSource::External { predictions } => {
            let path = predictions.to_string_lossy().replace("{h}", &set.geometry.horizon.to_string());
            let all = read_predictions(BufReader::new(File::open(&path)?))?;
            Ok(all
                .into_iter()
                .filter(|p| p.horizon == set.geometry.horizon && p.sigma == set.sigma)
                .collect())
        }
    }
}

/// Evaluate the configured forecaster on the test split at every (σ, H).
pub fn evaluate(exp: &Experiment) -> Result<Vec<DiagnosticsReport>> {
    let cfg = &exp.config;
    let label = cfg.forecaster.label();
    let mut cache = None;
    let mut reports = Vec::new();
    for &h in &cfg.horizons {
        let mut blocks = Vec::new();
        for &sigma in &cfg.sigmas {
            let set = exp.windows(sigma, h, Split::Test)?;
            let preds = predictions_for(exp, &set, &mut cache)?;
            blocks.push(evaluate_block(&set, &preds, &cfg.stamp)?);
        }
        reports.push(DiagnosticsReport {
            format_version: FORMAT_VERSION,
            scenario: cfg.scenario.clone(),
            forecaster: label.clone(),
            horizon: h,
            policy: cfg.stamp.clone(),
            threshold: threshold_line(&label, h, &blocks),
            blocks,
        });
    }
    Ok(reports)
}

/// Evaluate and write `reports/report_H<h>.{json,csv,md}`; returns the paths.
pub fn evaluate_to_dir(exp: &Experiment, out: &Path) -> Result<(Vec<DiagnosticsReport>, Vec<PathBuf>)> {
    let manifest = out.join("manifest.json");
    if manifest.exists() {
        verify_manifest(exp, &read_manifest(&manifest)?)?;
    }
    let reports = evaluate(exp)?;
    let dir = out.join("reports");
    fs::create_dir_all(&dir)?;
    let mut paths = Vec::new();
    for r in &reports {
        let stem = dir.join(format!("report_H{}", r.horizon));
        let json = stem.with_extension("json");
        fs::write(&json, serde_json::to_string_pretty(r)? + "\n")?;
        let csv = stem.with_extension("csv");
        write_report_csv(BufWriter::new(File::create(&csv)?), std::slice::from_ref(r))?;
        let md = stem.with_extension("md");
        fs::write(&md, report_markdown(std::slice::from_ref(r)))?;
        paths.extend([json, csv, md]);
    }
    Ok((reports, paths))
}

pub fn read_report(path: &Path) -> Result<DiagnosticsReport> {
    let r: DiagnosticsReport = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if r.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("report version {} is not {FORMAT_VERSION}", r.format_version)));
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// tables

pub const EMPTY_CELL: &str = "—";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub scenario: String,
    pub sigma: f64,
    pub metric: &'static str,
    pub value: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

pub const TABLE_METRICS: [&str; 3] = ["cov50", "cov90", "sw"];

/// Long-format metric rows of a block, in a fixed order.
pub fn block_rows(scenario: &str, b: &CalibrationBlock) -> Vec<MetricRow> {
    let wilson = |rate: f64, n: usize| wilson_interval((rate * n as f64).round() as usize, n, Z95);
    let row = |metric, value: Option<f64>, ci| MetricRow { scenario: scenario.to_string(), sigma: b.sigma, metric, value, ci };
    vec![
        row("cov50", Some(b.coverage_50), Some(wilson(b.coverage_50, b.observations))),
        row("cov90", Some(b.coverage_90), Some(wilson(b.coverage_90, b.observations))),
        row("sw", b.sw.map(|s| s.pass_rate), b.sw.map(|s| wilson(s.pass_rate, s.tested))),
        row("pit_ks_p", b.pit_ks.map(|t| t.p_value), None),
        row("mahalanobis_ks_p", b.mahalanobis_ks.map(|t| t.p_value), None),
        row("mahalanobis_mean_ratio", b.mahalanobis_mean_ratio, None),
        row("crps", Some(b.crps), None),
        row("mse", Some(b.mse), None),
    ]
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| EMPTY_CELL.to_string(), |x| format!("{x:.6}"))
}

pub fn write_report_csv<W: Write>(mut out: W, reports: &[DiagnosticsReport]) -> Result<()> {
    writeln!(out, "scenario,sigma,metric,value,ci_lo,ci_hi")?;
    for r in reports {
        for b in &r.blocks {
            for m in block_rows(&r.scenario, b) {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    m.scenario,
                    m.sigma,
                    m.metric,
                    cell(m.value),
                    cell(m.ci.map(|c| c.0)),
                    cell(m.ci.map(|c| c.1))
                )?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Markdown tables: coverage and normality by σ, then accuracy, stamps and threshold lines.
pub fn report_markdown(reports: &[DiagnosticsReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = writeln!(s, "## {} | {} | H={}\n", r.scenario, r.forecaster, r.horizon);
        s.push_str("| σ | cov50 | cov90 | SW pass | PIT KS p | Mahalanobis KS p | CRPS | MSE | stamp |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for b in &r.blocks {
            let f3 = |v: Option<f64>| v.map_or_else(|| EMPTY_CELL.to_string(), |x| format!("{x:.3}"));
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                b.sigma,
                f3(Some(b.coverage_50)),
                f3(Some(b.coverage_90)),
                f3(b.sw.map(|x| x.pass_rate)),
                f3(b.pit_ks.map(|t| t.p_value)),
                f3(b.mahalanobis_ks.map(|t| t.p_value)),
                f3(Some(b.crps)),
                f3(Some(b.mse)),
                b.stamp.as_str()
            );
        }
        s.push('\n');
        let notes: Vec<String> = r
            .blocks
            .iter()
            .flat_map(|b| b.notes.iter().map(move |n| format!("- σ={}: {n}", b.sigma)))
            .collect();
        if !notes.is_empty() {
            s.push_str(&notes.join("\n"));
            s.push_str("\n\n");
        }
        let p = &r.policy;
        let _ = writeln!(
            s,
            "Stamp policy: coverage within {}·SE of nominal at 50% and 90%, Mahalanobis KS p > {}, SW pass rate ≥ {:.4} (BH q = {}).\n",
            p.coverage_se,
            p.mahalanobis_alpha,
            1.0 - p.q - p.sw_slack,
            p.q
        );
        let _ = writeln!(s, "{}\n", r.threshold);
    }
    s
}
