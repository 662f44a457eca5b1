//! Command-line front end: training, validation, gradient checks, ablations,
//! the live steering server and offline replays.

use std::ffi::OsString;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use diffloco_core::ablation::{run_ablation, Ablation};
use diffloco_core::checkpoint::Checkpoint;
use diffloco_core::gradcheck::{grad_check, GradCheckOptions};
use diffloco_core::session::{replay, write_jsonl, GoalScript, Session};
use diffloco_core::trainer::{train, validate, Backend, TrainConfig};
use diffloco_core::load_design;

pub mod serve;

/// Exit code for usage errors (bad flags, missing input files).
pub const EXIT_USAGE: i32 = 2;
/// Exit code for runtime failures, including a failed gradient check.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "diffloco", version, about = "Differentiable soft-robot locomotion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Ms,
    Mpm,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a controller.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print normalized validation losses of a checkpoint.
    Validate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare backpropagated gradients against finite differences.
    GradCheck {
        #[arg(long)]
        design: PathBuf,
        #[arg(long, value_enum, default_value = "ms")]
        backend: BackendArg,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = GradCheckOptions::default().eps)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training config supplying simulator and network settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the full method and an ablated variant and print the comparison.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// OP, AF, BS, PS, SV, TG, LD or ACT.
        #[arg(long)]
        name: String,
        #[arg(long, default_value = "designs/quadruped.json")]
        design: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Directory for per-run logs and checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a checkpoint over WebSocket for interactive steering.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Frames over which a new target is approached linearly.
        #[arg(long, default_value_t = 0)]
        ramp_frames: usize,
    },
    /// Play a goal script through a checkpoint and dump the frames.
    Replay {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        goals: PathBuf,
        #[arg(long)]
        dump: PathBuf,
        #[arg(long, default_value_t = 0)]
        ramp_frames: usize,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
    /// The command ran but its check did not pass.
    Check,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} file `{}` not found", path.display())))
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
        Err(Failure::Check) => EXIT_FAILURE,
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Train { config, design, out: dir, seed } => {
            require(&config, "config")?;
            require(&design, "design")?;
            let mut cfg = TrainConfig::load(&config).context("loading config")?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let agent = load_design(&design).context("loading design")?;
            let outcome = match train(&cfg, &agent, Some(&dir)) {
                Ok(o) => o,
                Err(e) => {
                    if let Some(p) = e.partial.as_ref().and_then(|p| p.checkpoints.last()) {
                        eprintln!("last good checkpoint: {}", p.display());
                    }
                    return Err(Failure::Runtime(e.into()));
                }
            };
            writeln!(out, "trained {} iterations; outputs in {}", cfg.iterations, dir.display()).ok();
            if let Some(v) = outcome.final_validation() {
                writeln!(
                    out,
                    "normalized validation: task {:.3} run {:.3} jump {:.3}",
                    v.normalized.task, v.normalized.run, v.normalized.jump
                )
                .ok();
            }
            Ok(())
        }
        Command::Validate { checkpoint } => {
            require(&checkpoint, "checkpoint")?;
            let ckpt = Checkpoint::load(&checkpoint).context("loading checkpoint")?;
            let design = ckpt.agent().context("checkpoint design")?;
            let params = ckpt.params().context("checkpoint network")?;
            let v = validate(&params, &ckpt.config, &design).context("validation")?;
            writeln!(
                out,
                "normalized validation: task {:.3} run {:.3} jump {:.3}",
                v.task, v.run, v.jump
            )
            .ok();
            Ok(())
        }
        Command::GradCheck { design, backend, steps, eps, seed, config } => {
            require(&design, "design")?;
            let mut cfg = match config {
                Some(c) => {
                    require(&c, "config")?;
                    TrainConfig::load(&c).context("loading config")?
                }
                None => TrainConfig::default(),
            };
            cfg.backend = match backend {
                BackendArg::Ms => Backend::MassSpring,
                BackendArg::Mpm => Backend::Mpm,
            };
            let agent = load_design(&design).context("loading design")?;
            let report = grad_check(&cfg, &agent, &GradCheckOptions { steps, eps, seed }).context("gradient check")?;
            writeln!(
                out,
                "{} parameters, {} steps: max relative error {:.3e} (parameter {}), norm-wise {:.3e}, {:.1} s",
                report.num_params,
                report.steps,
                report.max_rel_error,
                report.worst_param,
                report.norm_rel_error,
                report.elapsed.as_secs_f64()
            )
            .ok();
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            writeln!(out, "{verdict} (threshold {:e})", report.threshold()).ok();
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Check)
            }
        }
        Command::Ablate { config, name, design, seeds, out: dir } => {
            require(&config, "config")?;
            require(&design, "design")?;
            let ablation: Ablation = name.parse().map_err(|e: diffloco_core::Error| Failure::Usage(e.to_string()))?;
            let cfg = TrainConfig::load(&config).context("loading config")?;
            let agent = load_design(&design).context("loading design")?;
            let report = run_ablation(&cfg, &agent, &[ablation], &seeds, dir.as_deref()).context("ablation")?;
            write!(out, "{}", report.table()).ok();
            if let Some(d) = dir {
                let path = d.join("ablation.json");
                std::fs::write(&path, serde_json::to_string_pretty(&report).context("encoding report")?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::Serve { checkpoint, port, host, ramp_frames } => {
            require(&checkpoint, "checkpoint")?;
            let ckpt = Checkpoint::load(&checkpoint).context("loading checkpoint")?;
            let session = Session::from_checkpoint(&ckpt).context("starting session")?.with_ramp(ramp_frames);
            let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
            rt.block_on(async {
                let server = serve::start(session, SocketAddr::new(host, port), Default::default()).await?;
                writeln!(out, "serving on ws://{}", server.addr).ok();
                out.flush().ok();
                tokio::signal::ctrl_c().await.context("waiting for ctrl-c")?;
                server.shutdown();
                anyhow::Ok(())
            })?;
            Ok(())
        }
        Command::Replay { checkpoint, goals, dump, ramp_frames } => {
            require(&checkpoint, "checkpoint")?;
            require(&goals, "goals")?;
            let ckpt = Checkpoint::load(&checkpoint).context("loading checkpoint")?;
            let script = GoalScript::load(&goals).context("loading goal script")?;
            let mut session = Session::from_checkpoint(&ckpt).context("starting session")?.with_ramp(ramp_frames);
            let messages = replay(&mut session, &script);
            write_jsonl(&messages, &dump).context("writing frames")?;
            writeln!(out, "wrote {} messages to {}", messages.len(), dump.display()).ok();
            Ok(())
        }
    }
}
