use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ppa_dagger::dagger::training_episode;
use ppa_dagger::harness::{
    eval_seed_audit, evaluate_artifact, report, run_baselines, train_to_dir, with_workers, workers_from_env,
    write_metrics_csv, write_report_csv, write_timing_csv, HarnessError, Instance, RunConfig,
};
use ppa_dagger::milp::{export_mps, SolveLimits};
use ppa_dagger::rng::{Purpose, RngStream};

#[derive(Parser)]
#[command(
    name = "ppa",
    version,
    about = "Imitation learning workbench for physician-to-patient assignment"
)]
struct Cli {
    /// Worker threads; overrides PPA_WORKERS.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a corpus of sampled sessions plus a manifest.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Draw the training sessions of the config instead of a fresh corpus.
        #[arg(long)]
        training: bool,
    },
    /// Solve one deterministic instance and print the solution as JSON.
    Solve {
        instance: PathBuf,
        #[arg(long)]
        time_limit: Option<f64>,
        #[arg(long)]
        node_limit: Option<u64>,
    },
    /// Write the deterministic model of an instance in MPS format.
    ExportMps {
        instance: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the greedy, two-stage and hindsight policies.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run DAgger and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model artifact on the config's evaluation block.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise run directories.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_instance(path: &Path) -> Result<Instance, HarnessError> {
    let inst: Instance = serde_json::from_slice(&fs::read(path)?)?;
    inst.validate()?;
    Ok(inst)
}

fn write_metrics(dir: &Path, rows: &[ppa_dagger::harness::MetricsRow]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    write_metrics_csv(rows, fs::File::create(dir.join("metrics.csv"))?)?;
    write_timing_csv(rows, fs::File::create(dir.join("timing.csv"))?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let workers = cli.workers.unwrap_or_else(workers_from_env);
    match cli.command {
        Command::Gen {
            config,
            n,
            out,
            training,
        } => {
            let cfg = RunConfig::load(&config)?;
            fs::create_dir_all(&out)?;
            let mut files = Vec::with_capacity(n);
            for i in 0..n {
                let ep = if training {
                    training_episode(&cfg.gen, cfg.master_seed, i)
                } else {
                    ppa_dagger::generate::sample_episode(
                        &cfg.gen,
                        RngStream::new(cfg.master_seed, Purpose::CorpusEpisode).episode(i as u64),
                    )
                };
                let name = format!("episode_{i:05}.jsonl");
                ep.write_jsonl(
                    cfg.costs.physicians(),
                    BufWriter::new(fs::File::create(out.join(&name))?),
                )?;
                files.push(serde_json::json!({ "file": name, "seed": ep.seed, "patients": ep.len() }));
            }
            let manifest = serde_json::json!({
                "master_seed": cfg.master_seed,
                "physicians": cfg.costs.physicians(),
                "training": training,
                "episodes": files,
            });
            fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        }
        Command::Solve {
            instance,
            time_limit,
            node_limit,
        } => {
            let limits = SolveLimits {
                time_limit,
                node_limit,
                gap_limit: None,
            };
            let sol = read_instance(&instance)?.solve(&limits)?;
            println!("{}", serde_json::to_string_pretty(&sol)?);
        }
        Command::ExportMps { instance, out } => {
            let model = read_instance(&instance)?.model()?;
            let bytes = export_mps(&model).map_err(|e| HarnessError::Config(e.to_string()))?;
            fs::write(out, bytes)?;
        }
        Command::Baseline { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let evals = with_workers(workers, || run_baselines(&cfg))??;
            let rows: Vec<_> = evals.iter().map(|e| e.row.clone()).collect();
            write_metrics(&out, &rows)?;
            fs::write(out.join("config.toml"), cfg.to_toml())?;
            let seeds = eval_seed_audit(&cfg.eval, &cfg.gen);
            fs::write(out.join("eval_seeds.json"), serde_json::to_vec(&seeds)?)?;
        }
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            with_workers(workers, || train_to_dir(&cfg, &out))??;
        }
        Command::Evaluate { config, model, out } => {
            let cfg = RunConfig::load(&config)?;
            let ev = with_workers(workers, || evaluate_artifact(&cfg, &model))??;
            write_metrics(&out, &[ev.row])?;
        }
        Command::Report { runs, out } => {
            let rows = report(&runs)?;
            match out {
                Some(path) => write_report_csv(&rows, fs::File::create(path)?)?,
                None => write_report_csv(&rows, std::io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

fn error_kind(e: &HarnessError) -> &'static str {
    match e {
        HarnessError::Config(_) | HarnessError::Toml(_) => "config",
        HarnessError::NoEpisodes => "config",
        HarnessError::Io(_) => "io",
        HarnessError::Json(_) | HarnessError::Csv(_) => "format",
        HarnessError::Expert(_) => "solver",
        HarnessError::Learner(_) => "model",
        HarnessError::Ppa(_) => "instance",
        HarnessError::Dagger(_) => "training",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = serde_json::json!({ "error": "usage", "message": e.to_string() });
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": error_kind(&e), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}
