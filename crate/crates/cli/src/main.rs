use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use frappe_core::alignment::{DistilledTeacher, TeacherEncoder};
use frappe_core::autograd::{faulty_op_check, registered_ops, OP_TOLERANCE, PIPELINE_TOLERANCE};
use frappe_core::checkpoint::{load_checkpoint, load_tensors, save_checkpoint};
use frappe_core::env::{
    append_eval_csv, generate_datasets, DataCounts, DataOptions, DataPyramid, Difficulty, Source,
    TaskSpec,
};
use frappe_core::pipeline::{
    distill_on_data, evaluate_policy, mid_train, pipeline_gradcheck, post_train, Policy,
    TrainConfig, METRICS_FILE,
};
use frappe_core::FrappeError;
use log::info;
use serde::Serialize;

const TEACHER_FILE: &str = "distilled.frap";
const MANIFEST_FILE: &str = "manifest.json";
const EVAL_FILE: &str = "eval.csv";
const OP_INSTANCES: usize = 10;

#[derive(Parser)]
#[command(
    name = "frappe",
    version,
    about = "Toy future-representation alignment pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the robot, task-specific ego and web ego datasets.
    GenData(GenDataArgs),
    /// Distill the teacher encoders into one student.
    Distill(TrainArgs),
    /// Mid-training: full parameters, one prefix stream, distilled teacher.
    MidTrain(MidArgs),
    /// Post-training: frozen backbone, one expert per teacher.
    PostTrain(PostArgs),
    /// Roll a checkpoint out in the toy environment.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// List the tensors stored in a checkpoint.
    Inspect { checkpoint: PathBuf },
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 50)]
    robot: usize,
    #[arg(long, default_value_t = 0)]
    ego_task: usize,
    #[arg(long, default_value_t = 0)]
    ego_web: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MidArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Distilled teacher checkpoint; distilled on the data when absent.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args)]
struct PostArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Mid-training checkpoint to start from.
    #[arg(long)]
    init: PathBuf,
    /// Train prefixes only, without LoRA.
    #[arg(long)]
    no_lora: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "easy")]
    difficulty: Difficulty,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 5, value_parser = parse_steps)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    instruction: usize,
    /// Mix the expert streams: `auto` uses them when the checkpoint has them.
    #[arg(long, value_enum, default_value_t = Experts::Auto)]
    experts: Experts,
    /// Directory receiving the success-rate CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_steps(s: &str) -> Result<usize, String> {
    match s {
        "3" => Ok(3),
        "5" => Ok(5),
        _ => Err(format!("denoising steps must be 3 or 5, got {s}")),
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Experts {
    Auto,
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Ops,
    Pipeline,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Scope::Ops)]
    scope: Scope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Map<String, serde_json::Value>,
    seed: u64,
    version: String,
    out: String,
    started: u64,
    finished: Option<u64>,
}

impl RunManifest {
    fn begin(
        command: &str,
        config: Option<&TrainConfig>,
        seed: u64,
        out: &Path,
    ) -> anyhow::Result<Self> {
        let mut map = serde_json::Map::new();
        if let Some(cfg) = config {
            for line in cfg.to_kv().lines() {
                if let Some((k, v)) = line.split_once('=') {
                    map.insert(k.trim().into(), v.trim().into());
                }
            }
        }
        let m = Self {
            command: command.into(),
            config: map,
            seed,
            version: version(),
            out: out.display().to_string(),
            started: now(),
            finished: None,
        };
        m.write(out)?;
        Ok(m)
    }

    fn write(&self, out: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }

    fn finish(mut self, out: &Path) -> anyhow::Result<()> {
        self.finished = Some(now());
        self.write(out)
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn version() -> String {
    let described = std::process::Command::new("git")
        .args(["describe", "--tags", "--always", "--dirty"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    match described {
        Some(d) if !d.is_empty() => format!("v{}-{d}", env!("CARGO_PKG_VERSION")),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Exit 2 for anything the caller got wrong, 1 for everything else.
struct Failure {
    usage: bool,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let usage = matches!(
            error.downcast_ref::<FrappeError>(),
            Some(FrappeError::Config(_))
        );
        Self { usage, error }
    }
}

impl From<FrappeError> for Failure {
    fn from(e: FrappeError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn load_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(dir: &Path) -> anyhow::Result<DataPyramid> {
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    let data = DataPyramid::load(dir)?;
    info!(
        "data: {} robot, {} ego-task, {} ego-web episodes",
        data.robot.len(),
        data.ego_task.len(),
        data.ego_web.len()
    );
    Ok(data)
}

fn gen_data(a: &GenDataArgs) -> Result<(), Failure> {
    let manifest = RunManifest::begin("gen-data", None, a.seed, &a.out)?;
    let counts = DataCounts {
        robot: a.robot,
        ego_task: a.ego_task,
        ego_web: a.ego_web,
    };
    let data = generate_datasets(counts, &DataOptions::default(), a.seed)?;
    data.save(&a.out)?;
    for s in Source::ALL {
        println!(
            "{} {} episodes",
            a.out.join(s.file_name()).display(),
            data.get(s).len()
        );
    }
    manifest.finish(&a.out)?;
    Ok(())
}

fn distill(a: &TrainArgs) -> Result<(), Failure> {
    let cfg = load_config(a)?;
    let data = load_data(&a.data)?;
    let manifest = RunManifest::begin("distill", Some(&cfg), cfg.seed, &a.out)?;
    let d = distill_on_data(&TeacherEncoder::all(), &data, &cfg)?;
    let csv: String = std::iter::once("step,loss".to_string())
        .chain(d.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")))
        .collect::<Vec<_>>()
        .join("\n");
    let metrics = a.out.join(METRICS_FILE);
    fs::write(&metrics, csv + "\n").with_context(|| format!("writing {}", metrics.display()))?;
    let path = a.out.join(TEACHER_FILE);
    save_checkpoint(&path, d.student.params())?;
    println!(
        "distilled teacher {} (final loss {:.4})",
        path.display(),
        d.losses.last().copied().unwrap_or(f64::NAN)
    );
    manifest.finish(&a.out)?;
    Ok(())
}

fn mid(a: &MidArgs) -> Result<(), Failure> {
    let t = &a.train;
    let cfg = load_config(t)?;
    let data = load_data(&t.data)?;
    let manifest = RunManifest::begin("mid-train", Some(&cfg), cfg.seed, &t.out)?;
    let teacher = match &a.teacher {
        Some(p) => DistilledTeacher::from_store(load_checkpoint(p)?)?,
        None => {
            info!("no --teacher given, distilling on the training data");
            let student = distill_on_data(&TeacherEncoder::all(), &data, &cfg)?.student;
            save_checkpoint(&t.out.join(TEACHER_FILE), student.params())?;
            student
        }
    };
    let (policy, report) = mid_train(&teacher, &data, &cfg, Some(&t.out))?;
    summarize("mid-train", &report.action_series(), &report.align_series());
    println!("policy hash {}", policy.hash());
    manifest.finish(&t.out)?;
    Ok(())
}

fn post(a: &PostArgs) -> Result<(), Failure> {
    let t = &a.train;
    let cfg = load_config(t)?;
    let data = load_data(&t.data)?;
    let policy = Policy::load(&a.init)?;
    let manifest = RunManifest::begin("post-train", Some(&cfg), cfg.seed, &t.out)?;
    let (policy, report) = post_train(
        policy,
        &TeacherEncoder::all(),
        &data,
        &cfg,
        !a.no_lora,
        Some(&t.out),
    )?;
    summarize(
        "post-train",
        &report.action_series(),
        &report.align_series(),
    );
    println!(
        "trainable {} of {} parameters; policy hash {}",
        report.trainable,
        report.total_params,
        policy.hash()
    );
    manifest.finish(&t.out)?;
    Ok(())
}

fn summarize(stage: &str, action: &[f64], align: &[f64]) {
    let ends = |s: &[f64]| match (s.first(), s.last()) {
        (Some(a), Some(b)) => format!("{a:.4} -> {b:.4}"),
        _ => "n/a".into(),
    };
    println!(
        "{stage}: action loss {}, align loss {}",
        ends(action),
        ends(align)
    );
}

fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let policy = Policy::load(&a.checkpoint)?;
    let use_experts = match a.experts {
        Experts::Auto => policy.experts.is_some(),
        Experts::On => true,
        Experts::Off => false,
    };
    let task = TaskSpec::new(a.instruction, a.difficulty)?;
    let r = evaluate_policy(&policy, use_experts, &task, a.episodes, a.steps, a.seed)?;
    println!(
        "success {}/{} ({:.3}) difficulty {} steps {} experts {}",
        r.successes,
        r.episodes,
        r.rate(),
        a.difficulty,
        a.steps,
        use_experts
    );
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        append_eval_csv(&dir.join(EVAL_FILE), &task, &r, a.seed)?;
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool, Failure> {
    let mut ok = true;
    match a.scope {
        Scope::Ops => {
            let mut ops = registered_ops();
            if a.inject_fault {
                ops.push(faulty_op_check());
            }
            for op in ops {
                let e = op.run(a.seed, OP_INSTANCES)?;
                let pass = e < OP_TOLERANCE;
                ok &= pass;
                println!(
                    "{:<20} {e:.3e} {}",
                    op.name,
                    if pass { "ok" } else { "FAIL" }
                );
            }
        }
        Scope::Pipeline => {
            for c in pipeline_gradcheck(a.seed)? {
                let e = c.max_rel_err();
                let pass = e < PIPELINE_TOLERANCE;
                ok &= pass;
                println!(
                    "{:<20} {e:.3e} {}",
                    c.stage,
                    if pass { "ok" } else { "FAIL" }
                );
            }
        }
    }
    Ok(ok)
}

fn inspect(path: &Path) -> Result<(), Failure> {
    let tensors = load_tensors(path)?;
    let mut total = 0;
    for (name, t) in &tensors {
        if !name.starts_with("meta.") {
            total += t.numel();
        }
        println!("{name} {:?}", t.shape());
    }
    println!("{} tensors, {total} parameters", tensors.len());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool, Failure> {
    match &cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Distill(a) => distill(a)?,
        Command::MidTrain(a) => mid(a)?,
        Command::PostTrain(a) => post(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::Inspect { checkpoint } => inspect(checkpoint)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FRAPPE_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(if f.usage { 2 } else { 1 })
        }
    }
}
