use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use scal_core::active::Scorer;
use scal_core::datasets::{load_features, save_features, FeatureFormat};
use scal_core::experiment::{self, preset, ExperimentConfig};
use scal_core::flatconf::FlatConfig;
use scal_core::strategies::StrategyKind;
use scal_core::Error;

/// Active learning experiments with supervised contrastive features.
#[derive(Debug, Parser)]
#[command(name = "scal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train, test and OOD feature files.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory that receives train/test/ood files.
        #[arg(long)]
        out: PathBuf,
        /// `csv` or `binary`.
        #[arg(long, default_value = "csv")]
        format: FeatureFormat,
    },
    /// Run every (strategy x seed) cell of an experiment.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run only this seed (overrides `experiment.seeds`).
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated strategies (overrides `experiment.strategies`).
        #[arg(long)]
        strategy: Option<String>,
        /// Run directory (overrides `experiment.out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a finished run directory.
    Report {
        run_dir: PathBuf,
    },
    /// Score a feature file against a saved checkpoint.
    Score {
        /// A cell's `model.bin`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature file (`.csv` or binary).
        #[arg(long)]
        input: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    config: Option<PathBuf>,
    /// Start from a built-in preset.
    #[arg(long)]
    preset: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn flat(&self) -> Result<FlatConfig> {
        let mut c = match (&self.config, &self.preset) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("pass either a config file or --preset, not both".into()).into())
            }
            (Some(path), None) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
                FlatConfig::parse(&text)?
            }
            (None, Some(name)) => preset(name)?,
            (None, None) => {
                return Err(Error::Config(format!(
                    "no config given; pass a config file or --preset ({})",
                    experiment::PRESETS.join(" | ")
                ))
                .into())
            }
        };
        for assignment in &self.set {
            c.set_assignment(assignment)?;
        }
        Ok(c)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if err.is_config_error() => 2,
        Some(err) if err.is_data_error() => 3,
        _ => 4,
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gen {
            config,
            seed,
            out,
            format,
        } => {
            let mut c = config.flat()?;
            if let Some(seed) = seed {
                c.set("data.seed", seed);
            }
            gen(&c, &out, format)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            config,
            seed,
            strategy,
            out,
        } => {
            let mut c = config.flat()?;
            if let Some(seed) = seed {
                c.set("experiment.seeds", seed);
            }
            if let Some(s) = strategy {
                c.set("experiment.strategies", s);
            }
            if let Some(out) = out {
                c.set("experiment.out", out.display());
            }
            run(&c)
        }
        Command::Report { run_dir } => {
            let report = experiment::report(&run_dir)?;
            print!("{}", report.render());
            Ok(ExitCode::SUCCESS)
        }
        Command::Score { checkpoint, input, out } => {
            score(&checkpoint, &input, out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn gen(c: &FlatConfig, out: &Path, format: FeatureFormat) -> Result<()> {
    let config = ExperimentConfig::from_flat(c)?;
    if !matches!(config.data, experiment::DataSource::Synthetic { .. }) {
        return Err(Error::Config("gen needs data.source = synthetic".into()).into());
    }
    let prepared = config.prepare()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ext = format.extension();
    let mut files = vec![("train", &prepared.pool), ("test", &prepared.eval.test)];
    if let Some(ood) = &prepared.eval.ood {
        files.push(("ood", ood));
    }
    for (name, data) in files {
        let path = out.join(format!("{name}.{ext}"));
        save_features(data, &path, format).with_context(|| format!("writing {}", path.display()))?;
        log::info!("wrote {} ({} rows)", path.display(), data.n());
    }
    Ok(())
}

fn run(c: &FlatConfig) -> Result<ExitCode> {
    let config = ExperimentConfig::from_flat(c)?;
    log::info!(
        "{} strategies x {} seeds -> {}",
        config.strategies.len(),
        config.seeds.len(),
        config.out_dir.display()
    );
    let summary = experiment::run_experiment(&config)?;
    let failed: Vec<_> = summary.failed().collect();
    for cell in &failed {
        eprintln!(
            "cell {} seed {} failed: {}",
            cell.strategy,
            cell.seed,
            cell.error.as_deref().unwrap_or_default()
        );
    }
    println!("{}", summary.out_dir.display());
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(4))
    }
}

fn score(checkpoint: &Path, input: &Path, out: Option<&Path>) -> Result<()> {
    let scorer = Scorer::load(checkpoint)?;
    let data = load_features(input, FeatureFormat::from_path(input))?;
    let scored = scorer.score(&data)?;
    let predicted = match scored.predicted {
        Some(p) => p,
        None => argmax_rows(&scorer.model().predict_proba(&data)?),
    };
    let scores = match scorer.strategy() {
        StrategyKind::Random => vec![None; data.n()],
        StrategyKind::Coreset => scorer.ood_scores(&data)?.into_iter().map(Some).collect(),
        _ => scored.scores.into_iter().map(Some).collect(),
    };
    let sink: Box<dyn Write> = match out {
        Some(path) => Box::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = BufWriter::new(sink);
    writeln!(w, "id,predicted,score")?;
    for ((id, p), s) in data.ids().iter().zip(predicted).zip(scores) {
        match s {
            Some(s) => writeln!(w, "{id},{p},{s}")?,
            None => writeln!(w, "{id},{p},")?,
        }
    }
    w.flush()?;
    Ok(())
}

fn argmax_rows(p: &scal_core::nalgebra::DMatrix<f64>) -> Vec<usize> {
    p.row_iter().map(|r| r.transpose().argmax().0).collect()
}
