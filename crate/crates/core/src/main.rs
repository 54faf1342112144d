use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dpat::checkpoint::{load_checkpoint, read_manifest};
use dpat::config::{default_provenance, ExperimentConfig, Preset};
use dpat::harness::report::{overlay_runs, short, PLOT_FILE};
use dpat::harness::{build_task_stream, compute_metrics, score_split, write_report, AccuracyMatrix, Experiment, RunOptions, SelectionMode};
use dpat::trainer::{PreparedClip, TrainMode};
use dpat::DpatError;

const CACHE_ENV: &str = "DPAT_CACHE_DIR";

#[derive(Parser)]
#[command(name = "dpat", version, about = "Continual video action recognition with decoupled prompt-adapter tuning")]
struct Cli {
    /// Print every default with its provenance and exit.
    #[arg(long)]
    print_defaults: bool,
    /// Preset used by --print-defaults.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblateArg {
    TemporalAdapter,
    AllAdapters,
    AgnosticPrefix,
    AllPrefixes,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Dpat,
    Joint,
    DualpromptLoss,
}

#[derive(Subcommand)]
enum Command {
    /// Run a continual experiment and write its report directory.
    Train {
        /// TOML config; missing sections take the desk preset values.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Run seed (initialization and shuffling).
        #[arg(long)]
        seed: Option<u64>,
        /// Report directory; defaults to runs/<fingerprint>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Switch off a component; repeatable.
        #[arg(long, value_enum)]
        ablate: Vec<AblateArg>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Use the true task id instead of key matching at evaluation.
        #[arg(long)]
        oracle: bool,
    },
    /// Evaluate a checkpoint on the test splits of its stream.
    Eval {
        /// Checkpoint directory (`.../checkpoints/task-<t>`).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config; defaults to the config.toml of the checkpoint's run.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
    },
    /// Plot learning curves of one or more run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output SVG; defaults to <first run>/learning_curve.svg for one run
        /// and <first run>/learning_curve_overlay.svg for several.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<DpatError> for Failure {
    fn from(e: DpatError) -> Self {
        match e {
            DpatError::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = if cli.print_defaults {
        print_defaults(cli.preset);
        Ok(())
    } else {
        match cli.command {
            None => Err(Failure::Config("no command given; see --help".into())),
            Some(Command::Train {
                config,
                preset,
                seed,
                out,
                ablate,
                mode,
                oracle,
            }) => cmd_train(config.as_deref(), preset, seed, out, &ablate, mode, oracle),
            Some(Command::Eval {
                checkpoint,
                config,
                oracle,
            }) => cmd_eval(&checkpoint, config.as_deref(), oracle),
            Some(Command::Report { runs, out }) => cmd_report(&runs, out),
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn print_defaults(preset: Preset) {
    let cfg = ExperimentConfig::preset(preset);
    let rows = default_provenance(&cfg);
    let w = rows.iter().map(|r| r.field.len()).max().unwrap_or(0);
    let v = rows.iter().map(|r| r.value.len()).max().unwrap_or(0);
    for r in rows {
        println!("{:w$}  {:v$}  {}", r.field, r.value, r.source);
    }
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

fn resolve_config(
    config: Option<&Path>,
    preset: Option<Preset>,
    seed: Option<u64>,
    ablate: &[AblateArg],
    mode: Option<ModeArg>,
) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(preset.unwrap_or(Preset::Desk)),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for a in ablate {
        let ab = &mut cfg.train.ablation;
        match a {
            AblateArg::TemporalAdapter => ab.temporal_adapter = true,
            AblateArg::AllAdapters => ab.all_adapters = true,
            AblateArg::AgnosticPrefix => ab.agnostic_prefix = true,
            AblateArg::AllPrefixes => ab.all_prefixes = true,
        }
    }
    if let Some(m) = mode {
        cfg.train.mode = match m {
            ModeArg::Dpat => TrainMode::Dpat,
            ModeArg::Joint => TrainMode::Joint,
            ModeArg::DualpromptLoss => TrainMode::DualpromptLoss,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(
    config: Option<&Path>,
    preset: Option<Preset>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    ablate: &[AblateArg],
    mode: Option<ModeArg>,
    oracle: bool,
) -> Result<(), Failure> {
    let cfg = resolve_config(config, preset, seed, ablate, mode)?;
    let out = out.unwrap_or_else(|| PathBuf::from("runs").join(short(&cfg.fingerprint())));
    std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())
        .map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    log::info!("run {} -> {}", short(&cfg.fingerprint()), out.display());

    let dataset = cfg.load_dataset(cache_dir().as_deref())?;
    let options = RunOptions {
        selection: if oracle {
            SelectionMode::Oracle
        } else {
            SelectionMode::Matched
        },
        checkpoint_dir: Some(out.join("checkpoints")),
    };
    let mut exp = Experiment::new(cfg, &dataset, options)?;
    let outcome = exp.run_to_end();
    let report = exp.report()?;
    match outcome {
        Ok(()) => {
            write_report(&out, &report, None)?;
            println!("{}", report.metrics_csv().trim_end());
            Ok(())
        }
        Err(e) => {
            let msg = format!("failed after {} tasks: {e}", exp.tasks_done());
            write_report(&out, &report, Some(&msg))?;
            Err(Failure::Runtime(msg))
        }
    }
}

fn cmd_eval(checkpoint: &Path, config: Option<&Path>, oracle: bool) -> Result<(), Failure> {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .and_then(Path::parent)
            .map(|run| run.join("config.toml"))
            .ok_or_else(|| Failure::Config("pass --config for a checkpoint outside a run directory".into()))?,
    };
    let cfg = ExperimentConfig::load(&config_path)?;
    let (model, info) = load_checkpoint(checkpoint)?;
    if info.config_hash != cfg.fingerprint() {
        log::warn!("checkpoint was written under config {}, evaluating with {}", short(&info.config_hash), short(&cfg.fingerprint()));
    }
    let dataset = cfg.load_dataset(cache_dir().as_deref())?;
    let stream = build_task_stream(&dataset, cfg.stream.tasks, cfg.stream.seed)?;
    if info.task > stream.len() {
        return Err(Failure::Runtime(format!(
            "checkpoint covers {} tasks, stream has {}",
            info.task,
            stream.len()
        )));
    }
    let selection = if oracle {
        SelectionMode::Oracle
    } else {
        SelectionMode::Matched
    };
    let prepared = |m: &dpat::model::DpatModel, t: usize| -> Result<Vec<PreparedClip>, Failure> {
        Ok(stream.tasks[t - 1]
            .test
            .iter()
            .map(|c| PreparedClip::new(c, m))
            .collect::<Result<Vec<_>, _>>()?)
    };
    let (mut matched, mut total, mut acc_sum) = (0, 0, 0.0);
    for t in 1..=info.task {
        let score = score_split(&model, &prepared(&model, t)?, t, selection)?;
        println!("task {t} accuracy {}", score.accuracy());
        matched += score.matched;
        total += score.total;
        acc_sum += score.accuracy();
    }
    println!("matching accuracy {}", matched as f64 / total as f64);
    println!("mean accuracy over {} tasks {}", info.task, acc_sum / info.task as f64);

    // full R when every earlier task boundary was checkpointed next to this one
    if info.task == stream.len() && info.task >= 2 {
        if let Some(root) = checkpoint.parent() {
            let dirs: Vec<PathBuf> = (1..=info.task).map(|j| root.join(format!("task-{j}"))).collect();
            if dirs.iter().all(|d| read_manifest(d).is_ok()) {
                let mut r = AccuracyMatrix::new(info.task);
                for (j, dir) in dirs.iter().enumerate() {
                    let (m, _) = load_checkpoint(dir)?;
                    for i in 1..=j + 1 {
                        r.set(j + 1, i, score_split(&m, &prepared(&m, i)?, i, selection)?.accuracy())?;
                    }
                }
                let (acc, bwf) = compute_metrics(&r)?;
                println!("acc {acc}");
                println!("bwf {bwf}");
            }
        }
    }
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: Option<PathBuf>) -> Result<(), Failure> {
    let dirs: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
    let svg = overlay_runs(&dirs)?;
    let out = out.unwrap_or_else(|| {
        if runs.len() == 1 {
            runs[0].join(PLOT_FILE)
        } else {
            runs[0].join("learning_curve_overlay.svg")
        }
    });
    std::fs::write(&out, svg).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    println!("{}", out.display());
    Ok(())
}
