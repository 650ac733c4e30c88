use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cerberus_core::backends::{Backends, BackendsConfig};
use cerberus_core::cascade::{process_stream, read_verdicts, write_verdicts, CascadeConfig, Mode, PreparedPool, SharedPool};
use cerberus_core::eval::{compute_report, duplicate_normals, DatasetManifest};
use cerberus_core::evolution::{apply_f2c, apply_uil, collect_f2c, enqueue_uil, FeedbackKind, FeedbackQueue, UilDecision};
use cerberus_core::induction::{induce_rulebase, InductionConfig};
use cerberus_core::rulebase::{default_perturbed_labels, load_label_list, load_rulebase, save_rulebase, Params, RuleKind, RuleStore};
use cerberus_core::synth::{Scenario, SynthConfig};
use cerberus_service::{serve_blocking, ServiceConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cerberus", version, about = "Cascaded rule-based video anomaly detection")]
struct Cli {
    /// Backend configuration (TOML). Without it every role uses the offline mock.
    #[arg(long, global = true)]
    backends: Option<PathBuf>,

    /// Seed for the mock backends.
    #[arg(long, global = true, default_value_t = 0)]
    mock_seed: u64,

    /// Embedding dimension for the mock backends.
    #[arg(long, global = true, default_value_t = 64)]
    mock_dim: usize,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a rulebase from the normal frames of a manifest.
    Induce(InduceArgs),
    /// Run the cascade over a manifest and write verdicts.
    Detect(DetectArgs),
    /// Score verdicts against manifest labels.
    Eval(EvalArgs),
    #[command(subcommand)]
    Dataset(DatasetCommand),
    #[command(subcommand)]
    Evolve(EvolveCommand),
    #[command(subcommand)]
    Rules(RulesCommand),
    /// Serve the operator HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct FramesArgs {
    /// Frame manifest (JSONL).
    #[arg(long)]
    manifest: PathBuf,
    /// Directory that relative frame paths resolve against (default: the manifest's directory).
    #[arg(long)]
    frames: Option<PathBuf>,
}

impl FramesArgs {
    fn load(&self) -> Result<DatasetManifest> {
        let mut m = DatasetManifest::load(&self.manifest).with_context(|| format!("loading {}", self.manifest.display()))?;
        if let Some(dir) = &self.frames {
            m.base_dir = dir.clone();
        }
        Ok(m)
    }
}

#[derive(Args)]
struct InduceArgs {
    #[command(flatten)]
    input: FramesArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    segment_len: usize,
    #[arg(long, default_value_t = 8)]
    stride: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Perturbed label list, one per line (default: built-in list).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    rulebase: PathBuf,
    #[command(flatten)]
    input: FramesArgs,
    #[arg(long, default_value = "both")]
    mode: Mode,
    #[arg(long)]
    out: PathBuf,
    /// Write rendered prompted frames here.
    #[arg(long)]
    dump_prompts: Option<PathBuf>,
    /// Enqueue abnormal frames for operator review.
    #[arg(long)]
    queue: Option<PathBuf>,
    /// Also write a metrics report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    coarse_workers: usize,
    #[arg(long, default_value_t = 1)]
    fine_workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    verdicts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    recall_target: f64,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Duplicate normal frames until anomalies make up the target ratio.
    Dup {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        target_ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic stream: frames, manifest and matching rulebase.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        frames: usize,
        #[arg(long, default_value_t = 0.1)]
        anomaly_fraction: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum EvolveCommand {
    /// Queue frames the caption stage cleared and fold them into new normal rules.
    F2c {
        #[arg(long)]
        rulebase: PathBuf,
        #[arg(long)]
        verdicts: PathBuf,
        #[arg(long, default_value = "feedback.jsonl")]
        queue: PathBuf,
        #[command(flatten)]
        input: FramesArgs,
        #[arg(long, default_value_t = 4)]
        max_in_flight: usize,
    },
    #[command(subcommand)]
    Uil(UilCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum QueueKind {
    Uil,
    F2c,
}

#[derive(Subcommand)]
enum UilCommand {
    /// List pending items.
    List {
        #[arg(long, default_value = "feedback.jsonl")]
        queue: PathBuf,
        #[arg(long, value_enum, default_value = "uil")]
        kind: QueueKind,
        /// One JSON object per line instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Confirm an anomaly, optionally adding a rule describing it.
    Confirm {
        id: u64,
        #[arg(long)]
        rulebase: PathBuf,
        #[arg(long, default_value = "feedback.jsonl")]
        queue: PathBuf,
        #[arg(long)]
        rule: Option<String>,
    },
    /// Mark a detection as a false alarm.
    Reject {
        id: u64,
        #[arg(long)]
        rulebase: PathBuf,
        #[arg(long, default_value = "feedback.jsonl")]
        queue: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Anomaly,
    Normal,
}

#[derive(Subcommand)]
enum RulesCommand {
    /// Print the rulebase.
    List {
        #[arg(long)]
        rulebase: PathBuf,
    },
    /// Add an operator rule.
    Add {
        #[arg(long)]
        rulebase: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, value_enum, default_value = "anomaly")]
        kind: KindArg,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8787)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long)]
    rulebase: PathBuf,
    #[arg(long)]
    verdicts: PathBuf,
    #[arg(long, default_value = "feedback.jsonl")]
    queue: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Directory of dumped prompt frames to serve under /frames/.
    #[arg(long)]
    frames_dir: Option<PathBuf>,
    /// Require `Authorization: Bearer <token>`.
    #[arg(long, env = "CERBERUS_TOKEN")]
    token: Option<String>,
}

fn backends(cli: &Cli) -> Result<Backends> {
    match &cli.backends {
        Some(path) => {
            let config = BackendsConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
            Ok(Backends::from_config(&config)?)
        }
        None => Ok(Backends::mock(cli.mock_seed, cli.mock_dim)),
    }
}

fn induce(cli: &Cli, args: &InduceArgs) -> Result<()> {
    let manifest = args.input.load()?;
    let normal: Vec<_> = manifest.entries.iter().filter(|e| !e.is_anomaly()).map(|e| e.meta()).collect();
    let labels = match &args.labels {
        Some(path) => load_label_list(path)?,
        None => default_perturbed_labels(),
    };
    let params = Params { k: args.k, segment_len: args.segment_len, ..Params::default() };
    let mut config = InductionConfig::new(params, labels);
    config.stride = args.stride;
    config.max_in_flight = args.max_in_flight;
    let rb = induce_rulebase(&normal, &manifest.disk_store(), &backends(cli)?, &config)?;
    save_rulebase(&rb, &args.out)?;
    println!("{} normal rules from {} frames -> {}", rb.normal_rules.len(), normal.len(), args.out.display());
    Ok(())
}

fn detect(cli: &Cli, args: &DetectArgs) -> Result<()> {
    let rb = load_rulebase(&args.rulebase).with_context(|| format!("loading {}", args.rulebase.display()))?;
    let manifest = args.input.load()?;
    let backends = backends(cli)?;
    let pools = SharedPool::new(PreparedPool::build(&rb, &backends)?);
    let mut config = CascadeConfig::new(args.mode, rb.params.clone());
    config.dump_prompts = args.dump_prompts.clone();
    config.coarse_workers = args.coarse_workers;
    config.fine_workers = args.fine_workers;
    let (records, stats) = process_stream(&manifest.frames(), &manifest.disk_store(), &pools, &backends, &config)?;
    write_verdicts(&args.out, &records)?;
    let abnormal = records.iter().filter(|r| r.final_label.is_abnormal()).count();
    println!(
        "{} frames: {} static, {} escalated (rho {:.3}), {} abnormal, {} failed, {:.1} fps",
        stats.frames,
        stats.static_frames,
        stats.escalated,
        stats.rho(),
        abnormal,
        stats.failed_frames,
        stats.frames as f64 / stats.wall_s.max(1e-9)
    );
    if let Some(path) = &args.queue {
        let ids = FeedbackQueue::open(path)?.enqueue(enqueue_uil(&records))?;
        println!("queued {} frames for review in {}", ids.len(), path.display());
    }
    if let Some(path) = &args.report {
        let mut report = compute_report(&manifest, &records, Some(stats.wall_s), config.recall_target)?;
        report.mode = args.mode;
        report.save(path)?;
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let records = read_verdicts(&args.verdicts)?;
    let report = compute_report(&manifest, &records, None, args.recall_target)?;
    report.save(&args.out)?;
    let auc = report.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    println!(
        "AUC {auc}, precision {:.3}, recall {:.3}, filtering {:.3} -> {}",
        report.precision,
        report.recall,
        report.filtering_proportion,
        args.out.display()
    );
    Ok(())
}

fn dataset(cmd: &DatasetCommand) -> Result<()> {
    match cmd {
        DatasetCommand::Dup { manifest, target_ratio, out } => {
            let m = DatasetManifest::load(manifest)?;
            let dup = duplicate_normals(&m, *target_ratio)?;
            if out.parent() != manifest.parent() {
                eprintln!("note: frame paths stay relative to {}", m.base_dir.display());
            }
            dup.save(out)?;
            println!("{} -> {} frames, anomaly ratio {:.4}", m.len(), dup.len(), dup.anomaly_ratio());
        }
        DatasetCommand::Synth { out, frames, anomaly_fraction, seed } => {
            let s = Scenario::generate(SynthConfig {
                frames: *frames,
                anomaly_fraction: *anomaly_fraction,
                seed: *seed,
                ..SynthConfig::default()
            })?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            s.write_frames(out)?;
            s.manifest()?.save(out.join("manifest.jsonl"))?;
            save_rulebase(&s.rulebase, out.join("rulebase.json"))?;
            println!("{} frames ({} anomalous) in {}", s.frames.len(), s.labels().iter().filter(|a| **a).count(), out.display());
        }
    }
    Ok(())
}

fn open_queue(path: &Path) -> Result<FeedbackQueue> {
    FeedbackQueue::open(path).with_context(|| format!("opening {}", path.display()))
}

fn evolve(cli: &Cli, cmd: &EvolveCommand) -> Result<()> {
    match cmd {
        EvolveCommand::F2c { rulebase, verdicts, queue, input, max_in_flight } => {
            let rules = RuleStore::open(rulebase)?;
            let mut q = open_queue(queue)?;
            let queued = q.enqueue(collect_f2c(&read_verdicts(verdicts)?))?;
            let manifest = input.load()?;
            let out = apply_f2c(&rules, &mut q, None, &manifest.disk_store(), &backends(cli)?, *max_in_flight)?;
            println!(
                "{} new candidates, {} applied, {} rules added, rulebase v{}",
                queued.len(),
                out.items.len(),
                out.rules_added,
                out.rulebase_version
            );
        }
        EvolveCommand::Uil(UilCommand::List { queue, kind, json }) => {
            let q = open_queue(queue)?;
            let kind = match kind {
                QueueKind::Uil => FeedbackKind::UilPending,
                QueueKind::F2c => FeedbackKind::F2cCandidate,
            };
            let mut out = std::io::stdout().lock();
            for item in q.pending(kind) {
                if *json {
                    writeln!(out, "{}", serde_json::to_string(item)?)?;
                } else {
                    writeln!(
                        out,
                        "{:>5}  {:<24} {:<12} seq {:<6} score {:.3}  {}",
                        item.id,
                        item.frame_id,
                        item.scene,
                        item.seq,
                        item.evidence.anomaly_score,
                        item.evidence.caption.as_deref().unwrap_or("-")
                    )?;
                }
            }
        }
        EvolveCommand::Uil(UilCommand::Confirm { id, rulebase, queue, rule }) => {
            decide(rulebase, queue, *id, UilDecision::Confirm { rule_text: rule.clone() })?;
        }
        EvolveCommand::Uil(UilCommand::Reject { id, rulebase, queue }) => {
            decide(rulebase, queue, *id, UilDecision::Reject)?;
        }
    }
    Ok(())
}

fn decide(rulebase: &Path, queue: &Path, id: u64, decision: UilDecision) -> Result<()> {
    let rules = RuleStore::open(rulebase)?;
    let mut q = open_queue(queue)?;
    let out = apply_uil(&rules, &mut q, id, &decision, None)?;
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn rules(cmd: &RulesCommand) -> Result<()> {
    match cmd {
        RulesCommand::List { rulebase } => {
            let rb = load_rulebase(rulebase)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "version {}", rb.version)?;
            for r in &rb.normal_rules {
                writeln!(out, "normal   {}", r.text)?;
            }
            for r in &rb.custom_anomaly_rules {
                writeln!(out, "anomaly  {}", r.text)?;
            }
            writeln!(out, "{} perturbed labels", rb.perturbed_labels.len())?;
        }
        RulesCommand::Add { rulebase, text, kind } => {
            let kind = match kind {
                KindArg::Anomaly => RuleKind::Anomaly,
                KindArg::Normal => RuleKind::Normal,
            };
            let (_, rb) = RuleStore::open(rulebase)?.update(None, |rb| rb.add_custom_rule(text, kind))?;
            println!("rulebase v{}", rb.version);
        }
    }
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        rulebase: args.rulebase.clone(),
        verdicts: args.verdicts.clone(),
        queue: args.queue.clone(),
        metrics: args.metrics.clone(),
        frames_dir: args.frames_dir.clone(),
        token: args.token.clone(),
    };
    serve_blocking(config, SocketAddr::new(args.host, args.port))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Induce(args) => induce(cli, args),
        Command::Detect(args) => detect(cli, args),
        Command::Eval(args) => eval(args),
        Command::Dataset(cmd) => dataset(cmd),
        Command::Evolve(cmd) => evolve(cli, cmd),
        Command::Rules(cmd) => rules(cmd),
        Command::Serve(args) => serve(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    if let Err(e) = validate(&cli).and_then(|_| run(&cli)) {
        let broken_pipe = e.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe);
        if broken_pipe {
            return ExitCode::SUCCESS;
        }
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

fn validate(cli: &Cli) -> Result<()> {
    if let Command::Dataset(DatasetCommand::Dup { target_ratio, .. }) = &cli.command {
        if !(*target_ratio > 0.0 && *target_ratio < 1.0) {
            bail!("--target-ratio must be in (0, 1)");
        }
    }
    Ok(())
}
