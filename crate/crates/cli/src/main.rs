use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use shockbench::harness::{
    self, evaluate_to_dir, generate, oracle_predictions, read_report, report_markdown, scenario_ids, train_ref,
    write_predictions, write_report_csv, write_titration, Experiment, ExperimentConfig, ForecasterSource, OracleKind,
};
use shockbench::titration::Split;

#[derive(Parser)]
#[command(name = "shockbench", version, about = "Noise-titration benchmark for probabilistic forecasters")]
struct Cli {
    /// Root for relative output directories.
    #[arg(long, global = true, env = harness::OUTPUT_ENV)]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario id, overrides the config.
    #[arg(long)]
    scenario: Option<String>,
    /// Noise levels, overrides the config's sweep. Repeatable.
    #[arg(long = "sigma")]
    sigmas: Vec<f64>,
    /// Horizons, overrides the config. Repeatable.
    #[arg(long = "horizon")]
    horizons: Vec<usize>,
    /// Output directory, overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.scenario) {
            (Some(path), _) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            (None, Some(id)) => ExperimentConfig::new(id, &[]),
            (None, None) => bail!("pass --config or --scenario"),
        };
        if let Some(id) = &self.scenario {
            cfg.scenario = id.clone();
        }
        if !self.sigmas.is_empty() {
            cfg.sigmas = self.sigmas.clone();
        }
        if !self.horizons.is_empty() {
            cfg.horizons = self.horizons.clone();
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Markdown,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// List the scenario registry.
    Scenarios,
    /// Simulate trajectories, write window files and the manifest.
    Generate(ExperimentArgs),
    /// Write window files for chosen splits at one noise level.
    Titrate {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long = "split", value_enum, default_values_t = [SplitArg::Train, SplitArg::Val, SplitArg::Test])]
        splits: Vec<SplitArg>,
    },
    /// Train the reference model at one noise level and horizon.
    TrainRef {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Checkpoint path; defaults to `<out>/ref_sigma_<σ>_H<h>.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write oracle forecasts for the test windows in the exchange format.
    Oracle {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value = "true-law")]
        kind: String,
        /// Output file; defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score forecasts on the test split and write reports.
    Evaluate {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Score this prediction file instead of the config's forecaster.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Score this reference-model checkpoint instead of the config's forecaster.
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
    },
    /// Merge report JSON files into one table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "markdown")]
        format: ReportFormat,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn parse_oracle(kind: &str) -> Result<OracleKind> {
    Ok(match kind {
        "true-law" | "true_law" => OracleKind::TrueLaw,
        "half-std" | "half_std" => OracleKind::HalfStd,
        other => match other.strip_prefix("fixed-sigma=").or_else(|| other.strip_prefix("fixed_sigma=")) {
            Some(v) => OracleKind::FixedSigma(v.parse().with_context(|| format!("bad sigma in `{other}`"))?),
            None => bail!("unknown oracle `{other}`; use true-law, half-std or fixed-sigma=<std>"),
        },
    })
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.out_root.as_deref();
    match cli.command {
        Command::Scenarios => {
            for id in scenario_ids() {
                println!("{id}");
            }
        }
        Command::Generate(args) => {
            let cfg = args.resolve()?;
            let out = cfg.output_path(root);
            let exp = Experiment::new(cfg)?;
            let manifest = generate(&exp, &out)?;
            for (path, digest) in &manifest.files {
                println!("{digest}  {path}");
            }
            match manifest.shock_step {
                Some(k) => println!("shock applied at step {k}"),
                None => println!("no shock"),
            }
            println!("manifest written to {}", out.join("manifest.json").display());
        }
        Command::Titrate { exp, splits } => {
            let cfg = exp.resolve()?;
            let out = cfg.output_path(root);
            let splits: Vec<Split> = splits.into_iter().map(Split::from).collect();
            let experiment = Experiment::new(cfg)?;
            for &sigma in &experiment.config.sigmas {
                for &h in &experiment.config.horizons {
                    for p in write_titration(&experiment, sigma, h, &splits, &out)? {
                        println!("{}", p.display());
                    }
                }
            }
        }
        Command::TrainRef { exp, checkpoint } => {
            let cfg = exp.resolve()?;
            let (sigma, h) = match (cfg.sigmas.as_slice(), cfg.horizons.as_slice()) {
                ([s], [h]) => (*s, *h),
                _ => bail!("train-ref needs exactly one --sigma and one --horizon"),
            };
            let out = cfg.output_path(root);
            let experiment = Experiment::new(cfg)?;
            let outcome = train_ref(&experiment, sigma, h)?;
            let path = checkpoint.unwrap_or_else(|| out.join(format!("ref_sigma_{sigma}_H{h}.json")));
            outcome.model.save(sink(Some(&path))?)?;
            outcome.write_curve_csv(sink(Some(&path.with_extension("curve.csv")))?)?;
            let best = outcome.curve.iter().find(|r| r.step == outcome.best_step);
            println!(
                "checkpoint {} (best step {}, val NLL {})",
                path.display(),
                outcome.best_step,
                best.map_or_else(|| "n/a".into(), |r| format!("{:.6}", r.val_nll))
            );
        }
        Command::Oracle { exp, kind, output } => {
            let cfg = exp.resolve()?;
            let kind = parse_oracle(&kind)?;
            let experiment = Experiment::new(cfg)?;
            let mut w = sink(output.as_deref())?;
            for &h in &experiment.config.horizons {
                for &sigma in &experiment.config.sigmas {
                    let set = experiment.windows(sigma, h, Split::Test)?;
                    write_predictions(&mut w, &oracle_predictions(kind, &set))?;
                }
            }
            w.flush()?;
        }
        Command::Evaluate { exp, predictions, checkpoint } => {
            let mut cfg = exp.resolve()?;
            if let Some(p) = predictions {
                cfg.forecaster = ForecasterSource::External { predictions: p };
            }
            if let Some(c) = checkpoint {
                cfg.forecaster = ForecasterSource::RefModel { checkpoint: c };
            }
            let out = cfg.output_path(root);
            let experiment = Experiment::new(cfg)?;
            let (reports, paths) = evaluate_to_dir(&experiment, &out)?;
            for r in &reports {
                for b in &r.blocks {
                    println!(
                        "σ={} H={}: cov50 {:.4} cov90 {:.4} windows {}/{} {}",
                        b.sigma,
                        b.horizon,
                        b.coverage_50,
                        b.coverage_90,
                        b.windows_evaluated,
                        b.windows_total,
                        b.stamp.as_str()
                    );
                }
                println!("{}", r.threshold);
            }
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Command::Report { reports, format, output } => {
            let loaded = reports.iter().map(|p| read_report(p)).collect::<shockbench::Result<Vec<_>>>()?;
            let mut w = sink(output.as_deref())?;
            match format {
                ReportFormat::Markdown => w.write_all(report_markdown(&loaded).as_bytes())?,
                ReportFormat::Csv => write_report_csv(&mut w, &loaded)?,
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
