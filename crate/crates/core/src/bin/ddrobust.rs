use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ddrobust::experiment::{self, ExperimentConfig, SigmaSweep};
use ddrobust::lti::TrainingData;
use ddrobust::mc::Mode;
use ddrobust::sensitivity::{BSource, JacobianBundle};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "ddrobust",
    version,
    about = "Instability bounds for data-driven controllers under perturbed training data"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long = "b-source", global = true, value_enum)]
    b_source: Option<BSourceArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    FirstOrder,
}

#[derive(Clone, Copy, ValueEnum)]
enum BSourceArg {
    True,
    Identified,
}

#[derive(Args)]
struct Upstream {
    /// Training data artifact from `collect`; regenerated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct Sweep {
    /// Evaluate a single σ instead of the configured sweep.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the plant and record training data.
    Collect,
    /// Evaluate the controller map on the training data.
    Design(Upstream),
    /// Finite-difference sensitivity of the map on the perturbation support.
    Jacobian(Upstream),
    /// Closed-form instability bounds over the σ sweep.
    Bounds {
        #[command(flatten)]
        upstream: Upstream,
        /// Jacobian artifact from `jacobian`; recomputed when omitted.
        #[arg(long)]
        jacobian: Option<PathBuf>,
        #[command(flatten)]
        sweep: Sweep,
    },
    /// Monte Carlo estimate of the instability probability over the σ sweep.
    Mc {
        #[command(flatten)]
        upstream: Upstream,
        #[arg(long)]
        jacobian: Option<PathBuf>,
        #[command(flatten)]
        sweep: Sweep,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Bounds and Monte Carlo estimate side by side.
    Fig1 {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Largest sensitivity norm against the data horizon.
    Fig2,
}

fn load_config(global: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = global.mode {
        cfg.mode = match mode {
            ModeArg::Exact => Mode::Exact,
            ModeArg::FirstOrder => Mode::FirstOrder,
        };
    }
    if let Some(b) = global.b_source {
        cfg.b_source = match b {
            BSourceArg::True => BSource::True,
            BSourceArg::Identified => BSource::Identified,
        };
    }
    Ok(cfg)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {what} artifact {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {what} artifact {}", path.display()))
}

fn write_outputs<T: Serialize>(out: &Path, stem: &str, value: &T, csv: &str) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let json = out.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", json.display()))?;
    let csv_path = out.join(format!("{stem}.csv"));
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    println!("wrote {} and {}", json.display(), csv_path.display());
    Ok(())
}

fn data(cfg: &ExperimentConfig, upstream: &Upstream) -> Result<TrainingData> {
    match &upstream.data {
        Some(path) => read_json(path, "training data"),
        None => Ok(experiment::collect_data(cfg)?),
    }
}

fn bundle(
    cfg: &ExperimentConfig,
    data: &TrainingData,
    path: &Option<PathBuf>,
) -> Result<JacobianBundle> {
    match path {
        Some(path) => read_json(path, "jacobian"),
        None => {
            let support = experiment::support(cfg, data)?;
            Ok(experiment::jacobian(cfg, data, &support)?)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    match &cli.command {
        Command::Bounds { sweep, .. } | Command::Mc { sweep, .. } => {
            if let Some(s) = sweep.sigma {
                cfg.sigmas = SigmaSweep::Values(vec![s]);
            }
        }
        _ => {}
    }
    if let Command::Mc {
        trials: Some(t), ..
    }
    | Command::Fig1 { trials: Some(t) } = &cli.command
    {
        cfg.trials = *t;
    }
    cfg.validate()?;
    let out = &cli.global.out;

    match &cli.command {
        Command::Collect => {
            let data = experiment::collect_data(&cfg)?;
            write_outputs(out, "data", &data, &experiment::collect_csv(&data))
        }
        Command::Design(upstream) => {
            let data = data(&cfg, upstream)?;
            let design = experiment::design(&cfg, &data)?;
            write_outputs(out, "controller", &design, &experiment::design_csv(&design))?;
            if !design.stable {
                bail!(
                    "designed controller is not stabilizing: rho(A+BK) = {}",
                    design.rho
                );
            }
            Ok(())
        }
        Command::Jacobian(upstream) => {
            let data = data(&cfg, upstream)?;
            let bundle = bundle(&cfg, &data, &None)?;
            write_outputs(out, "jacobian", &bundle, &experiment::jacobian_csv(&bundle))?;
            if !bundle.failures.is_empty() {
                bail!("{} Jacobian column(s) failed", bundle.failures.len());
            }
            Ok(())
        }
        Command::Bounds {
            upstream, jacobian, ..
        } => {
            let data = data(&cfg, upstream)?;
            let bundle = bundle(&cfg, &data, jacobian)?;
            let points = experiment::bounds_sweep(&cfg, &data, &bundle)?;
            write_outputs(out, "bounds", &points, &experiment::bounds_csv(&points))
        }
        Command::Mc {
            upstream, jacobian, ..
        } => {
            let data = data(&cfg, upstream)?;
            let bundle = match (cfg.mode, jacobian) {
                (Mode::Exact, None) => None,
                _ => Some(bundle(&cfg, &data, jacobian)?),
            };
            let points = experiment::mc_sweep(&cfg, &data, bundle.as_ref())?;
            write_outputs(out, "mc", &points, &experiment::mc_csv(&points))
        }
        Command::Fig1 { .. } => {
            let fig = experiment::run_fig1(&cfg)?;
            for row in &fig.rows {
                if let Some(e) = &row.error {
                    eprintln!("sigma {}: {e}", row.sigma);
                }
            }
            write_outputs(out, "fig1", &fig, &experiment::fig1_csv(&fig))
        }
        Command::Fig2 => {
            let rows = experiment::run_fig2(&cfg)?;
            write_outputs(out, "fig2", &rows, &experiment::fig2_csv(&rows))
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
