use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use coverlab_core::agent::{check_architecture, ActionMode};
use coverlab_core::analysis::relation_contributions;
use coverlab_core::config::{load_config, Config};
use coverlab_core::eval::{evaluate, Controller};
use coverlab_core::gradcheck::run_suite;
use coverlab_core::nn::checkpoint::{load_params, save_optimizer, save_params};
use coverlab_core::observation::TeamObserver;
use coverlab_core::parallel::Exec;
use coverlab_core::render::{render_frame, write_ppm};
use coverlab_core::replay::replay;
use coverlab_core::sim::EnvState;
use coverlab_core::trace::{load_trace, synthetic_trace, write_trace};
use coverlab_core::trainer::{hyperparameter_search, train};
use coverlab_core::Error;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "coverlab",
    version,
    about = "Train and evaluate relational sensor-coverage agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file, or "default" for built-in defaults.
    #[arg(long, default_value = "default")]
    config: String,
    /// Override a config key, e.g. --set trainer.lr=0.01 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<Config> {
        let cfg = if self.config == "default" {
            coverlab_core::config::config_from_str("", Path::new("<defaults>"), &self.overrides)?
        } else {
            load_config(Path::new(&self.config), &self.overrides)?
        };
        Ok(cfg)
    }
}

#[derive(Args)]
struct PolicyArgs {
    /// Baseline controller: idle, random, random-noop or lawnmower.
    #[arg(long, conflicts_with = "checkpoint")]
    baseline: Option<String>,
    /// Parameter checkpoint of a learned agent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Action selection for learned agents (defaults to eval.action_mode).
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ActionMode>,
}

fn parse_mode(s: &str) -> Result<ActionMode, String> {
    match s {
        "deterministic" => Ok(ActionMode::Deterministic),
        "stochastic" => Ok(ActionMode::Stochastic),
        other => Err(format!(
            "unknown mode {other:?} (deterministic or stochastic)"
        )),
    }
}

impl PolicyArgs {
    fn controller(&self, cfg: &Config) -> anyhow::Result<Controller> {
        match (&self.baseline, &self.checkpoint) {
            (Some(name), None) => Ok(Controller::baseline(name)?),
            (None, Some(path)) => {
                let params = load_params(path)?;
                check_architecture(&params).with_context(|| path.display().to_string())?;
                Ok(Controller::Learned {
                    params: Arc::new(params),
                    aggregation: cfg.agent.aggregation,
                    mode: self.mode.unwrap_or(cfg.eval.action_mode),
                })
            }
            _ => Err(Error::Usage("give exactly one of --baseline or --checkpoint".into()).into()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write its checkpoint and training log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Parameter checkpoint path; optimizer state goes to <out>.opt.
        #[arg(long)]
        out: PathBuf,
        /// Line-delimited JSON training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Random hyperparameter search; prints ranked runs as JSON lines.
    Search {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory receiving one checkpoint per successful run.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a baseline or checkpoint; prints the report as JSON.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run episodes one after another instead of in parallel.
        #[arg(long)]
        sequential: bool,
    },
    /// Drive simulated sensors over a detection trace.
    Replay {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 1)]
        sensors: u32,
        #[arg(long)]
        seed: Option<u64>,
        /// Write one PPM frame per step into this directory.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Relation contributions of a checkpoint along one simulated episode.
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of steps to analyze.
        #[arg(long, default_value_t = 20)]
        steps: u32,
        /// Output directory (defaults to render.output_dir).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Render simulator frames under a baseline controller.
    Render {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "lawnmower")]
        baseline: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 20)]
        steps: u32,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference gradient checks; fails when any error reaches 1e-4.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Print the default configuration, or validate a config file.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
        /// Print the resolved configuration instead of the defaults reference.
        #[arg(long)]
        resolved: bool,
    },
    /// Write a detection trace recorded from a simulated episode.
    SynthTrace {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Probability of dropping each detection.
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
    },
}

fn write_log_file(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn optimizer_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train {
            config,
            out: ck,
            log,
        } => {
            let cfg = config.load()?;
            let mut log_writer = log.as_deref().map(write_log_file).transpose()?;
            let sink = log_writer.as_mut().map(|w| w as &mut (dyn Write + Send));
            let outcome = train(&cfg.trainer, &cfg.agent, &cfg.env, sink)?;
            if let Some(w) = log_writer.as_mut() {
                w.flush()?;
            }
            save_params(&ck, &outcome.params)?;
            save_optimizer(&optimizer_path(&ck), &outcome.optimizer)?;
            writeln!(
                out,
                "{}",
                serde_json::json!({
                    "checkpoint": ck,
                    "env_steps": outcome.env_steps,
                    "updates": outcome.updates,
                    "episodes": outcome.episodes.len(),
                })
            )?;
        }
        Command::Search { config, out_dir } => {
            let cfg = config.load()?;
            let runs = hyperparameter_search(
                &cfg.search,
                &cfg.trainer,
                &cfg.agent,
                &cfg.env,
                &cfg.eval,
                cfg.seed,
            )?;
            if let Some(dir) = &out_dir {
                ensure_dir(dir)?;
            }
            for (rank, run) in runs.iter().enumerate() {
                if let (Some(dir), Some(p)) = (&out_dir, &run.params) {
                    save_params(&dir.join(format!("agent{}.ck", run.agent)), p)?;
                }
                let mut v = serde_json::to_value(run)?;
                v["rank"] = rank.into();
                writeln!(out, "{v}")?;
            }
        }
        Command::Eval {
            config,
            policy,
            episodes,
            seed,
            sequential,
        } => {
            let cfg = config.load()?;
            let ctl = policy.controller(&cfg)?;
            let exec = if sequential {
                Exec::Sequential
            } else {
                cfg.eval.exec
            };
            let report = evaluate(
                &ctl,
                &cfg.env,
                episodes.unwrap_or(cfg.eval.episodes),
                seed.unwrap_or(cfg.seed),
                exec,
            )?;
            writeln!(out, "{}", report.to_json())?;
        }
        Command::Replay {
            config,
            policy,
            trace,
            sensors,
            seed,
            frames,
        } => {
            let cfg = config.load()?;
            let ctl = policy.controller(&cfg)?;
            let trace = load_trace(&trace)?;
            if let Some(dir) = &frames {
                ensure_dir(dir)?;
            }
            let scale = cfg.render.scale / trace.scene.width.max(trace.scene.height);
            let report = replay(
                &trace,
                &ctl,
                sensors,
                &cfg.env,
                seed.unwrap_or(cfg.seed),
                |s| {
                    if let Some(dir) = &frames {
                        let img = render_frame(s, 0, None, scale)?;
                        write_ppm(&img, &dir.join(format!("frame_{:05}.ppm", s.t)))?;
                    }
                    Ok(())
                },
            )?;
            writeln!(out, "{}", report.to_json())?;
        }
        Command::Analyze {
            config,
            checkpoint,
            seed,
            steps,
            out_dir,
        } => {
            let cfg = config.load()?;
            let params = load_params(&checkpoint)?;
            check_architecture(&params)?;
            let dir = out_dir.unwrap_or_else(|| cfg.render.output_dir.clone());
            ensure_dir(&dir)?;
            let ctl = Controller::Learned {
                params: Arc::new(params.clone()),
                aggregation: cfg.agent.aggregation,
                mode: cfg.eval.action_mode,
            };
            let seed = seed.unwrap_or(cfg.seed);
            let mut state = EnvState::init_episode(&cfg.env, seed)?;
            let mut actor = ctl.start(seed);
            let mut observer = TeamObserver::new();
            let mut sidecar = write_log_file(&dir.join("contributions.jsonl"))?;
            for _ in 0..steps {
                if state.is_done() {
                    break;
                }
                let sets = observer.observe(&state)?;
                if sets[0].n_rows() > 0 {
                    let report = relation_contributions(
                        &params,
                        &sets[0],
                        cfg.agent.aggregation,
                        cfg.analysis.kl_direction,
                    )?;
                    writeln!(
                        sidecar,
                        "{}",
                        serde_json::to_string(&report.sidecar(state.t))?
                    )?;
                    let img = render_frame(&state, 0, Some(&report), cfg.render.scale)?;
                    write_ppm(&img, &dir.join(format!("analyze_{:05}.ppm", state.t)))?;
                }
                let actions = actor.act(&state)?;
                state.step(&actions)?;
            }
            sidecar.flush()?;
            writeln!(out, "{}", serde_json::json!({ "output_dir": dir }))?;
        }
        Command::Render {
            config,
            baseline,
            seed,
            steps,
            out_dir,
        } => {
            let cfg = config.load()?;
            let ctl = Controller::baseline(&baseline)?;
            let dir = out_dir.unwrap_or_else(|| cfg.render.output_dir.clone());
            ensure_dir(&dir)?;
            let seed = seed.unwrap_or(cfg.seed);
            let mut state = EnvState::init_episode(&cfg.env, seed)?;
            let mut actor = ctl.start(seed);
            let mut written = 0;
            for _ in 0..=steps {
                let img = render_frame(&state, 0, None, cfg.render.scale)?;
                write_ppm(&img, &dir.join(format!("frame_{:05}.ppm", state.t)))?;
                written += 1;
                if state.is_done() {
                    break;
                }
                let actions = actor.act(&state)?;
                state.step(&actions)?;
            }
            writeln!(
                out,
                "{}",
                serde_json::json!({ "output_dir": dir, "frames": written })
            )?;
        }
        Command::Gradcheck { seeds } => {
            let reports = run_suite(seeds)?;
            let worst = reports
                .iter()
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                .context("no checks ran")?;
            let checked: usize = reports.iter().map(|r| r.checked).sum();
            writeln!(
                out,
                "max relative error {:.3e} ({}) over {checked} coordinates in {} checks",
                worst.max_rel_error,
                worst.name,
                reports.len()
            )?;
            if let Some(bad) = reports.iter().find(|r| !r.passes(GRADCHECK_TOLERANCE)) {
                bail!(
                    "gradient check failed: {} has relative error {:.3e}",
                    bad.name,
                    bad.max_rel_error
                );
            }
        }
        Command::Config { config, resolved } => {
            if resolved {
                write!(out, "{}", config.load()?.to_toml())?;
            } else {
                config.load()?;
                write!(out, "{}", Config::reference())?;
            }
        }
        Command::SynthTrace {
            config,
            out: path,
            seed,
            dropout,
        } => {
            let cfg = config.load()?;
            let trace = synthetic_trace(&cfg.env, seed.unwrap_or(cfg.seed), dropout)?;
            write_trace(&trace, &path)?;
            writeln!(
                out,
                "{}",
                serde_json::json!({ "trace": path, "frames": trace.frames.len(), "tracks": trace.track_ids().len() })
            )?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Usage(_)) | Some(Error::Config(_)) | Some(Error::Parse { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("coverlab: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
