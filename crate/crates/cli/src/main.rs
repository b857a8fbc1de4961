use clap::{Args, Parser, Subcommand, ValueEnum};
use lad_core::config::RunConfig;
use lad_core::corpus::{self, generate_corpus, load_samples, BehaviorRecord};
use lad_core::eval::{evaluate, write_sample_log, EvalConfig, Mpc};
use lad_core::expert::{ExpertConfig, RuleExpert};
use lad_core::glm::{load_checkpoint, save_checkpoint, Model, ModelState};
use lad_core::rpo::Stage;
use lad_core::serving::{serve, GsuBuffer, Service};
use lad_core::train::train;
use lad_core::vocab::Vocabulary;
use lad_core::LadError;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

/// Personalized query auto-completion: data generation, training,
/// evaluation and serving.
///
/// Settings come from built-in defaults, then `--config`, then `--set`, then
/// the subcommand's own flags. Set LAD_LOG (e.g. `LAD_LOG=debug`) to change
/// log verbosity.
#[derive(Debug, Parser)]
#[command(name = "lad", version)]
struct Cli {
    /// Flat JSON config file; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData(GenArgs),
    /// Train a model (generation stage or reject preference stage).
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metrics report.
    Eval(EvalArgs),
    /// Run the HTTP completion service.
    Serve(ServeArgs),
    /// Generate completions for one prefix and print them as JSON.
    Complete(CompleteArgs),
    /// Evaluate the most-popular-completion baseline.
    Mpc(MpcArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Glm,
    Rpo,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
    /// Dataset directory or training file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to start from; a fresh model is built when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Toxic-token manifest for the quality scorer (required for `rpo`).
    #[arg(long)]
    expert: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// JSON-lines file receiving one record per optimizer step.
    #[arg(long)]
    metrics_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Dataset directory or test file.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Toxic-token manifest; defaults to the one next to the data.
    #[arg(long)]
    expert: Option<PathBuf>,
    /// Per-sample generation log.
    #[arg(long)]
    sample_log: Option<PathBuf>,
    /// Evaluate only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    addr: Option<String>,
    /// Behavior log loaded into the memory bank at start and on refresh.
    #[arg(long)]
    behavior_log: Option<PathBuf>,
    /// Append-only journal of recent queries, replayed at start.
    #[arg(long)]
    gsu_journal: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompleteArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    prefix: String,
    /// Recent queries, oldest first. Repeatable.
    #[arg(long = "short")]
    short: Vec<String>,
    /// Long-term queries, oldest first. Repeatable.
    #[arg(long = "long")]
    long: Vec<String>,
}

#[derive(Debug, Args)]
struct MpcArgs {
    /// Dataset directory holding the train and test files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Test file; defaults to the one in the dataset directory.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    expert: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LAD_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                LadError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> lad_core::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| LadError::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(cfg, a),
        Command::Train(a) => train_cmd(cfg, a),
        Command::Eval(a) => eval_cmd(cfg, a),
        Command::Serve(a) => serve_cmd(cfg, a),
        Command::Complete(a) => complete_cmd(cfg, a),
        Command::Mpc(a) => mpc_cmd(cfg, a),
    }
}

/// `path` itself when it is a file, else `path/name`.
fn data_file(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn data_dir_of(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn scorer(cfg: &RunConfig, manifest: PathBuf, vocab: &Vocabulary) -> lad_core::Result<RuleExpert> {
    ExpertConfig {
        kind: cfg.expert_kind,
        manifest,
        epsilon: cfg.epsilon,
    }
    .build(Some(vocab.chars()))
}

fn require_checkpoint(p: Option<PathBuf>) -> lad_core::Result<PathBuf> {
    p.ok_or_else(|| LadError::Config("--checkpoint is required".into()))
}

fn gen_data(mut cfg: RunConfig, a: GenArgs) -> lad_core::Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(u) = a.users {
        cfg.num_users = u;
    }
    let out = a.out.unwrap_or(cfg.data_dir.clone());
    let c = generate_corpus(&cfg.gen_config(), &out)?;
    log::info!(
        "wrote {} train and {} test samples to {}",
        c.train.len(),
        c.test.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(mut cfg: RunConfig, a: TrainArgs) -> lad_core::Result<()> {
    if let Some(s) = a.stage {
        cfg.stage = match s {
            StageArg::Glm => Stage::Glm,
            StageArg::Rpo => Stage::Rpo,
        };
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.peak_lr = v;
    }
    if a.expert.is_some() {
        cfg.expert = a.expert;
    }
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    if a.metrics_log.is_some() {
        cfg.metrics_log = a.metrics_log;
    }
    if cfg.stage == Stage::Rpo && cfg.expert.is_none() {
        return Err(LadError::Config("the rpo stage requires --expert".into()));
    }
    let tcfg = cfg.train_config();
    tcfg.validate()?;
    let data = a.data.unwrap_or(cfg.data_dir.clone());
    let samples = load_samples(&data_file(&data, corpus::TRAIN_FILE))?;
    let mut model: ModelState = match &cfg.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            let vocab = Vocabulary::build(cfg.gen_config().alphabet().into_iter().chain([' ']))?;
            Model::new(cfg.hyper(), vocab, cfg.init_seed)?
        }
    };
    let expert = match cfg.expert_config() {
        Some(e) if cfg.stage == Stage::Rpo => Some(scorer(&cfg, e.manifest, model.vocab())?),
        _ => None,
    };
    let mut log_file = match &cfg.metrics_log {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| LadError::Io { path: p.clone(), source: e })?,
        )),
        None => None,
    };
    let report = train(
        &mut model,
        &samples,
        expert.as_ref().map(|e| e as &dyn lad_core::expert::QualityScorer),
        &tcfg,
        log_file.as_mut().map(|w| w as &mut dyn Write),
    )?;
    if let (Some(w), Some(p)) = (log_file.as_mut(), &cfg.metrics_log) {
        w.flush().map_err(|e| LadError::Io { path: p.clone(), source: e })?;
    }
    save_checkpoint(&model, &cfg.out)?;
    log::info!(
        "trained {} steps in {:.1}s, final generation loss {:.4}, saved {}",
        report.history.len(),
        report.wall_time,
        report.recent_loss_glm(10),
        cfg.out.display()
    );
    Ok(())
}

fn eval_cmd(mut cfg: RunConfig, a: EvalArgs) -> lad_core::Result<()> {
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint;
    }
    if let Some(r) = a.report {
        cfg.report = r;
    }
    if a.expert.is_some() {
        cfg.expert = a.expert;
    }
    if a.sample_log.is_some() {
        cfg.sample_log = a.sample_log;
    }
    let data = a.data.unwrap_or(cfg.data_dir.clone());
    let model = load_checkpoint(&require_checkpoint(cfg.checkpoint.clone())?)?;
    let mut samples = load_samples(&data_file(&data, corpus::TEST_FILE))?;
    if let Some(n) = a.limit {
        samples.truncate(n);
    }
    let manifest = cfg
        .expert
        .clone()
        .unwrap_or_else(|| data_dir_of(&data).join(corpus::TOXIC_MANIFEST_FILE));
    let expert = scorer(&cfg, manifest, model.vocab())?;
    let ecfg = EvalConfig {
        decode: cfg.decode_config(),
        n_g: cfg.n_g,
    };
    let (report, logs) = evaluate(&model, &samples, &expert, &ecfg)?;
    report.write(&cfg.report)?;
    if let Some(p) = &cfg.sample_log {
        write_sample_log(&logs, p)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn serve_cmd(mut cfg: RunConfig, a: ServeArgs) -> lad_core::Result<()> {
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint;
    }
    if let Some(v) = a.addr {
        cfg.addr = v;
    }
    if a.behavior_log.is_some() {
        cfg.behavior_log = a.behavior_log;
    }
    if a.gsu_journal.is_some() {
        cfg.gsu_journal = a.gsu_journal;
    }
    let model = match &cfg.checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => {
            log::warn!("no checkpoint given; completion requests will return 503");
            None
        }
    };
    let gsu = match &cfg.gsu_journal {
        Some(p) => GsuBuffer::with_journal(cfg.gsu_capacity, p)?,
        None => GsuBuffer::new(cfg.gsu_capacity),
    };
    let label = cfg
        .checkpoint
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    let mut service = Service::new(model, gsu, cfg.decode_config(), label);
    if let Some(p) = &cfg.behavior_log {
        service = service.with_behavior_log(p);
    }
    if cfg.behavior_log.is_some() && cfg.checkpoint.is_some() {
        let r = service.refresh_from_log()?;
        log::info!("memory bank generation {} with {} users", r.generation, r.users);
    }
    let service = Arc::new(service);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| LadError::Io { path: PathBuf::from("<runtime>"), source: e })?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.addr)
            .await
            .map_err(|e| LadError::Io { path: PathBuf::from(&cfg.addr), source: e })?;
        serve(service, listener).await
    })
}

fn complete_cmd(mut cfg: RunConfig, a: CompleteArgs) -> lad_core::Result<()> {
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint;
    }
    let model = load_checkpoint(&require_checkpoint(cfg.checkpoint.clone())?)?;
    let capacity = model.hyper().short_max.max(1);
    let service = Service::new(Some(model), GsuBuffer::new(capacity), cfg.decode_config(), "");
    let user = "cli";
    for q in &a.short {
        service.record_event(user, q)?;
    }
    if !a.long.is_empty() {
        service.refresh(&[BehaviorRecord {
            user_id: user.into(),
            queries: a.long,
        }])?;
    }
    let r = service.complete(user, &a.prefix)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

fn mpc_cmd(mut cfg: RunConfig, a: MpcArgs) -> lad_core::Result<()> {
    if let Some(r) = a.report {
        cfg.report = r;
    }
    if a.expert.is_some() {
        cfg.expert = a.expert;
    }
    let dir = a.data.unwrap_or(cfg.data_dir.clone());
    let train = load_samples(&data_file(&dir, corpus::TRAIN_FILE))?;
    let test = load_samples(&a.test.unwrap_or_else(|| dir.join(corpus::TEST_FILE)))?;
    let manifest = cfg
        .expert
        .clone()
        .unwrap_or_else(|| data_dir_of(&dir).join(corpus::TOXIC_MANIFEST_FILE));
    let vocab = Vocabulary::build(cfg.gen_config().alphabet().into_iter().chain([' ']))?;
    let expert = scorer(&cfg, manifest, &vocab)?;
    let report = Mpc::fit(&train).evaluate(&test, &expert, cfg.n_g)?;
    report.write(&cfg.report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
