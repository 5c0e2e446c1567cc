use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use servoclone::config::RunConfig;
use servoclone::control::ControlConfig;
use servoclone::dataset::{generate_expert_dataset, DemoDataset};
use servoclone::eval::{
    emit_report, eval_poses, evaluate, pose_set_hash, run_ablation, AblationReport, AblationSetup, CheckpointResult,
    EvalPose, PolicySource,
};
use servoclone::expert::{Band, ExpertPolicy};
use servoclone::geometry::Pose;
use servoclone::neural::checkpoint::{self, DataSummary};
use servoclone::neural::train_with_progress;
use servoclone::teleop::{Clock, TeleopServer, TeleopSession};
use servoclone::{ConfigError, DatasetError, EvalError, NeuralError, TeleopError};

#[derive(Parser)]
#[command(name = "servoclone", version, about = "Behavior cloning for eye-in-hand visual servoing")]
struct Cli {
    /// TOML or JSON config file. Defaults to $SERVOCLONE_CONFIG, then to
    /// built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SourceArg {
    Expert,
    Teleop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Trained,
    Expert,
    Untrained,
}

#[derive(Subcommand)]
enum Command {
    /// Record demonstrations into a dataset directory.
    Record {
        /// Active demonstration time to record.
        #[arg(long)]
        minutes: f64,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SourceArg::Expert)]
        source: SourceArg,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Teleop only: interface to listen on.
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Teleop only: port, 0 picks a free one.
        #[arg(long, default_value_t = 8765)]
        port: u16,
    },
    /// Train a policy network on a dataset.
    Train {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the evaluation protocol with a trained model or the scripted expert.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long, required_unless_present = "oracle")]
        model: Option<PathBuf>,
        /// Evaluate the scripted expert instead of a model.
        #[arg(long, conflicts_with = "model")]
        oracle: bool,
        /// JSON list of start poses; defaults to the seeded protocol poses.
        #[arg(long)]
        poses: Option<PathBuf>,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Success rate against demonstration time over the configured checkpoints.
    Ablate {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// What to evaluate at each checkpoint.
        #[arg(long, value_enum, default_value_t = PolicyArg::Trained)]
        policy: PolicyArg,
    },
    /// Serve one live teleoperation session and save its dataset.
    TeleopServe {
        /// Interface to listen on.
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Port, 0 picks a free one.
        #[arg(long, default_value_t = 8765)]
        port: u16,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Advance one control period per twist message instead of the wall clock.
        #[arg(long)]
        lockstep: bool,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// A failed run: printed as one JSON line on stderr.
struct Failure {
    kind: &'static str,
    code: u8,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, code: u8, message: impl ToString) -> Self {
        Failure { kind, code, message: message.to_string() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new("config", 3, e)
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        let kind = match e {
            DatasetError::Io { .. } => "io",
            _ => "dataset",
        };
        Failure::new(kind, 4, e)
    }
}

impl From<NeuralError> for Failure {
    fn from(e: NeuralError) -> Self {
        let kind = match e {
            NeuralError::Io { .. } => "io",
            NeuralError::Checkpoint { .. } => "checkpoint",
            _ => "training",
        };
        Failure::new(kind, 5, e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Dataset(d) => d.into(),
            EvalError::Neural(n) => n.into(),
            EvalError::InsufficientData { .. } | EvalError::Config(_) => Failure::new("config", 3, e),
            EvalError::Io { .. } => Failure::new("io", 4, e),
            EvalError::Control(_) => Failure::new("eval", 6, e),
        }
    }
}

impl From<TeleopError> for Failure {
    fn from(e: TeleopError) -> Self {
        match e {
            TeleopError::Bind { .. } => Failure::new("bind", 7, e),
            TeleopError::Dataset(d) => d.into(),
            _ => Failure::new("teleop", 7, e),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new("io", 4, format!("{}: {e}", path.display()))
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::Record { minutes, out, source, seed, host, port } => {
            if !(minutes > 0.0 && minutes.is_finite()) {
                return Err(Failure::new("usage", 2, format!("--minutes must be positive, got {minutes}")));
            }
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.teleop.seed = s;
            }
            cfg.validate()?;
            match source {
                SourceArg::Expert => record_expert(&cfg, minutes, &out),
                SourceArg::Teleop => serve_teleop(&cfg, &host, port, &out, Some(minutes * 60.0)),
            }
        }
        Command::Train { data, out, seed, epochs } => {
            override_training(&mut cfg, seed, epochs)?;
            train(&cfg, &data, &out)
        }
        Command::Eval { model, oracle, poses, out, seed } => {
            override_training(&mut cfg, seed, None)?;
            eval(&cfg, model.as_deref().filter(|_| !oracle), poses.as_deref(), &out)
        }
        Command::Ablate { data, out, seed, epochs, policy } => {
            override_training(&mut cfg, seed, epochs)?;
            let policy = match policy {
                PolicyArg::Trained => PolicySource::Trained,
                PolicyArg::Expert => PolicySource::Expert,
                PolicyArg::Untrained => PolicySource::Untrained,
            };
            ablate(&cfg, &data, &out, policy)
        }
        Command::TeleopServe { host, port, out, lockstep, seed } => {
            if lockstep {
                cfg.teleop.clock = Clock::Lockstep;
            }
            if let Some(s) = seed {
                cfg.teleop.seed = s;
            }
            cfg.validate()?;
            serve_teleop(&cfg, &host, port, &out, None)
        }
    }
}

fn override_training(cfg: &mut RunConfig, seed: Option<u64>, epochs: Option<usize>) -> Result<(), Failure> {
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(())
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), Failure> {
    cfg.echo_to(dir).map_err(|e| io_failure(dir, e))
}

fn record_expert(cfg: &RunConfig, minutes: f64, out: &Path) -> Result<(), Failure> {
    log(&format!("recording {minutes} min of expert demonstrations"));
    let ds = generate_expert_dataset(&cfg.world, &cfg.expert, &cfg.control, &cfg.recording, minutes, cfg.seed)?;
    ds.save(out)?;
    let back = DemoDataset::load(out)?;
    if back != ds {
        return Err(Failure::new("dataset", 4, "dataset did not read back identically"));
    }
    echo_config(cfg, out)?;
    println!(
        "{}",
        json!({ "frames": ds.frame_count(), "episodes": ds.episodes.len(), "demo_minutes": ds.total_minutes() })
    );
    Ok(())
}

fn serve_teleop(cfg: &RunConfig, host: &str, port: u16, out: &Path, limit: Option<f64>) -> Result<(), Failure> {
    let server = TeleopServer::bind(format!("{host}:{port}"))?;
    let mut session = TeleopSession::new(
        cfg.world.clone(),
        cfg.control,
        cfg.teleop,
        cfg.recording.record_rate,
        None,
        Some(out.to_path_buf()),
    )?;
    if let Some(l) = limit {
        session = session.with_demo_limit(l);
    }
    println!("listening ws://{}", server.local_addr());
    std::io::stdout().flush().ok();
    let summary = server.serve_session(session)?;
    DemoDataset::load(out)?;
    echo_config(cfg, out)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), Failure> {
    let ds = DemoDataset::load(data)?;
    ds.check_dims(cfg.world.camera.width, cfg.world.camera.height)?;
    log(&format!("training on {} frames ({:.2} min)", ds.frame_count(), ds.total_minutes()));
    let (net, report) = train_with_progress(&ds, &cfg.train, |e, l| log(&format!("epoch {e} loss {l:.6}")))?;
    let summary = DataSummary { demo_minutes: ds.total_minutes(), frames: ds.frame_count() };
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    checkpoint::save(&net, &cfg.train, Some(summary), out)?;
    checkpoint::load(out)?;
    let side = out.with_extension("train.json");
    let text = serde_json::to_string_pretty(&json!({ "report": report, "config": cfg.to_json() }))
        .expect("report serializes");
    std::fs::write(&side, text).map_err(|e| io_failure(&side, e))?;
    println!("{}", json!({ "checkpoint": out, "final_loss": report.epoch_losses.last() }));
    Ok(())
}

fn eval(cfg: &RunConfig, model: Option<&Path>, poses: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let world = &cfg.world;
    let poses = match poses {
        Some(path) => {
            let text = std::fs::read(path).map_err(|e| io_failure(path, e))?;
            let list: Vec<Pose> = serde_json::from_slice(&text)
                .map_err(|e| Failure::new("config", 3, format!("{}: {e}", path.display())))?;
            list.into_iter()
                .enumerate()
                .map(|(index, pose)| {
                    let d = (pose.position - world.hover_point()).norm();
                    let band = if d <= Band::Near.range().1 { Band::Near } else { Band::Far };
                    EvalPose { index, band, pose }
                })
                .collect()
        }
        None => eval_poses(world, &cfg.ablation)?,
    };
    let ctrl: &ControlConfig = &cfg.control;
    let trials = cfg.ablation.trials_per_pose;
    let (policy, minutes, frames, outcomes) = match model {
        Some(path) => {
            let (net, header) = checkpoint::load(path)?;
            if net.input_dims() != (world.camera.width, world.camera.height) {
                return Err(Failure::new("checkpoint", 5, "model input size does not match the camera"));
            }
            let data = header.data.unwrap_or(DataSummary { demo_minutes: 0.0, frames: 0 });
            let outcomes = evaluate(world, ctrl, &poses, trials, cfg.train.seed, |_| {
                Box::new(net.clone()) as Box<dyn servoclone::control::Policy>
            })?;
            (PolicySource::Trained, data.demo_minutes, data.frames, outcomes)
        }
        None => {
            let outcomes = evaluate(world, ctrl, &poses, trials, cfg.train.seed, |s| {
                Box::new(ExpertPolicy::new(world, cfg.expert, s))
            })?;
            (PolicySource::Expert, 0.0, 0, outcomes)
        }
    };
    let successes = outcomes.iter().filter(|o| o.success).count();
    let n = outcomes.len();
    let report = AblationReport {
        policy,
        pose_set_hash: pose_set_hash(&poses),
        poses,
        total_trials: n,
        checkpoints: vec![CheckpointResult {
            minutes,
            frames,
            episodes: 0,
            train: None,
            train_seconds: 0.0,
            successes,
            trials: n,
            success_rate: successes as f64 / n.max(1) as f64,
            outcomes,
        }],
    };
    emit_report(&report, out, Some(&cfg.to_json()))?;
    println!("{}", json!({ "successes": successes, "trials": n }));
    Ok(())
}

fn ablate(cfg: &RunConfig, data: &Path, out: &Path, policy: PolicySource) -> Result<(), Failure> {
    let ds = DemoDataset::load(data)?;
    let setup = AblationSetup {
        world: &cfg.world,
        ctrl: &cfg.control,
        expert: &cfg.expert,
        train: &cfg.train,
        ablation: &cfg.ablation,
        policy,
    };
    let report = run_ablation(&ds, &setup, log)?;
    emit_report(&report, out, Some(&cfg.to_json()))?;
    let csv = out.join("results.csv");
    let written = std::fs::read_to_string(&csv).map_err(|e| io_failure(&csv, e))?;
    if written.lines().count() != report.checkpoints.len() + 1 {
        return Err(Failure::new("io", 4, "results.csv did not read back"));
    }
    println!("{}", json!({ "successes": report.success_counts(), "trials": report.total_trials }));
    Ok(())
}
