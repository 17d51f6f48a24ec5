use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use diamond_cf::experiment::{self, ExperimentSpec, Manifest};
use diamond_cf::plot;
use diamond_cf::trainer::{self, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "diamond-cf", version, about = "Learned compress-and-forward for the Gaussian diamond relay channel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a single configuration (JSON TrainConfig).
    Train {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Keep the best of this many derived seeds.
        #[arg(long, default_value_t = 1)]
        replicates: usize,
    },
    /// Run an experiment spec: sweeps, bounds, CSVs, manifest and plots.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// External baseline points (CSV with rate,bits and optional label).
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Write the bounds CSV of an experiment spec without training.
    Bounds {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a stored run and print its metrics as JSON.
    Eval {
        /// Run record JSON (model bundle alongside).
        #[arg(long)]
        run: PathBuf,
    },
    /// Export curve plots of a finished experiment.
    Plot {
        /// Experiment manifest.json.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Export region plots of a stored run.
    Regions {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = plot::DEFAULT_RESOLUTION)]
        resolution: usize,
    },
}

fn read_config(path: &Path) -> anyhow::Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: TrainConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train { spec, seed, out, replicates } => {
            let mut cfg = read_config(&spec)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let record = trainer::best_of(&cfg, replicates);
            let (path, _) = experiment::save_run(&out, &record)?;
            println!("{}", path.display());
            if let trainer::RunStatus::Failed { diagnostic } = &record.status {
                eprintln!("run failed: {diagnostic}");
            }
            Ok(record.completed())
        }
        Command::Sweep { spec, seed, out, workers, overlay } => {
            let mut s = ExperimentSpec::load(&spec)?;
            if let Some(seed) = seed {
                s = s.with_seed(seed);
            }
            let res = experiment::run_experiment(&s, out.as_deref(), workers, overlay.as_deref())?;
            println!("{}", res.manifest_path.display());
            for stem in &res.manifest.incomplete {
                eprintln!("incomplete run: {stem}");
            }
            Ok(res.manifest.all_completed())
        }
        Command::Bounds { spec, out } => {
            let s = ExperimentSpec::load(&spec)?;
            let cfgs = s.expand()?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(experiment::BOUNDS_CSV);
            experiment::write_csv(&path, &experiment::bound_rows(&cfgs, &s.bounds)?)?;
            println!("{}", path.display());
            Ok(true)
        }
        Command::Eval { run } => {
            let record = experiment::load_run(&run)?;
            let Some(models) = &record.models else {
                bail!("no model bundle next to {}", run.display());
            };
            let (metrics, _) = trainer::evaluate(models, &record.config)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            Ok(true)
        }
        Command::Plot { manifest, overlay } => {
            let m = Manifest::load(&manifest)?;
            let dir = manifest.parent().unwrap_or(Path::new("."));
            for p in plot::export_curves(&m, dir, overlay.as_deref())? {
                println!("{}", p.display());
            }
            Ok(m.all_completed())
        }
        Command::Regions { run, out, resolution } => {
            let record = experiment::load_run(&run)?;
            for p in plot::write_regions(&record, &out, resolution)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
