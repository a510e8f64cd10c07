//! `fairfab` command line: bag tooling, the peak workload, the registry and
//! broker servers, an endpoint worker, client calls, and the quickstart demo.
//!
//! Exit codes: 0 when the requested operation's postcondition held, 1 on
//! operational failure (or a failed validation / FAIR verdict), 2 on usage
//! errors.

pub mod quickstart;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{IsTerminal, Write};
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bag::{self, ChecksumAlgorithm};
use crate::config::{CliConfig, ConfigFile, Overrides};
use crate::faircheck::FairChecker;
use crate::http::{serve_until_interrupted, shutdown_signal};
use crate::metadata::{render_human, render_machine, ElementType, Record};
use crate::peaks::{
    export_servable, nn_forward, positions_from_tensor, read_patches, synth_dataset, train_tiny, write_patches,
    ParamDistribution, PeakPosition, Precision, TinyNetWeights, TrainConfig,
};
use crate::registry::{registry_router, Registry, RegistryApi, RegistryClient};
use crate::tasking::{
    broker_router, wait_for, Broker, BrokerApi, BrokerClient, BrokerConfig, EndpointConfig, EndpointWorker,
    ExecutionProfile, InputReference, SandboxConfig, TaskStatus, TaskSubmission, Tensor,
};
use crate::uq::{error_stats, euclidean_errors, trust_gate};

#[derive(Debug, Parser)]
#[command(name = "fairfab", version, about = "FAIR model publication and remote inference fabric")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config file (lowest precedence after built-in defaults).
    #[arg(long, global = true, env = "FAIRFAB_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "FAIRFAB_REGISTRY_URL")]
    pub registry_url: Option<String>,
    #[arg(long, global = true, env = "FAIRFAB_BROKER_URL")]
    pub broker_url: Option<String>,
    /// Registry store directory (used by `serve registry`).
    #[arg(long, global = true, env = "FAIRFAB_STORE")]
    pub store: Option<PathBuf>,
    /// Broker state directory (used by `serve broker`); in-memory when unset.
    #[arg(long, global = true, env = "FAIRFAB_BROKER_STATE")]
    pub broker_state: Option<PathBuf>,
    /// Servable runner executable substituted for `$RUNNER`.
    #[arg(long, global = true, env = "FAIRFAB_RUNNER_PATH")]
    pub runner: Option<PathBuf>,
    /// p95 trust gate in pixels.
    #[arg(long, global = true, env = "FAIRFAB_TRUST_THRESHOLD")]
    pub trust_threshold: Option<f64>,
    /// Cross-profile agreement tolerance in pixels.
    #[arg(long, global = true, env = "FAIRFAB_TOLERANCE")]
    pub tolerance: Option<f64>,
    #[arg(long, global = true, env = "FAIRFAB_TASK_TIMEOUT_SECS")]
    pub task_timeout_secs: Option<u64>,
    /// Emit machine-format JSON documents on stdout.
    #[arg(long, global = true)]
    pub machine: bool,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create, validate and identify dataset bags.
    #[command(subcommand)]
    Bag(BagCommand),
    /// Write synthetic peak patches to a BPK1 file.
    Synth(SynthArgs),
    /// Train the peak regressor on a BPK1 file.
    Train(TrainArgs),
    /// Package trained weights as a servable archive.
    Export(ExportArgs),
    /// Run the registry or broker server until interrupted.
    #[command(subcommand)]
    Serve(ServeCommand),
    /// Run an endpoint worker.
    #[command(subcommand)]
    Endpoint(EndpointCommand),
    /// Publish a model or dataset to the registry.
    #[command(subcommand)]
    Publish(PublishCommand),
    /// Fetch an entry's metadata.
    Get(GetArgs),
    /// Submit an inference task.
    Invoke(InvokeArgs),
    /// Show a task's state.
    Status { task_id: String },
    /// Fetch a completed task's result.
    Result(ResultArgs),
    /// Uncertainty quantification.
    #[command(subcommand)]
    Uq(UqCommand),
    /// Grade a published model against the FAIR propositions.
    Faircheck(FaircheckArgs),
    /// End-to-end demo on a clean store.
    Quickstart(QuickstartArgs),
}

#[derive(Debug, Subcommand)]
pub enum BagCommand {
    Create {
        source: PathBuf,
        dest: PathBuf,
        #[arg(long, default_value = "sha256")]
        algorithm: String,
        /// bag-info entry, repeatable.
        #[arg(long = "info", value_name = "KEY=VALUE")]
        info: Vec<String>,
    },
    Validate {
        bag: PathBuf,
    },
    Minid {
        bag: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noise standard deviation as a fraction of amplitude.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ServeCommand {
    Registry {
        /// Listen address; defaults to the host and port of the registry URL.
        #[arg(long)]
        listen: Option<String>,
    },
    Broker {
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PrecisionArg {
    StrictF32,
    F64Accumulate,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::StrictF32 => Precision::StrictF32,
            PrecisionArg::F64Accumulate => Precision::F64Accumulate,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum EndpointCommand {
    Run {
        #[arg(long)]
        name: String,
        #[arg(long, value_enum, default_value = "strict-f32")]
        precision: PrecisionArg,
        #[arg(long, default_value_t = 1)]
        slots: u32,
    },
}

#[derive(Debug, Subcommand)]
pub enum PublishCommand {
    /// `servable_digest` is filled in from the blob when absent.
    Model {
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        servable: PathBuf,
    },
    /// `minid` is filled in from the bag when empty.
    Dataset {
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        bag: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Machine,
    Human,
}

#[derive(Debug, Args)]
pub struct GetArgs {
    pub identifier: String,
    #[arg(long, value_enum, default_value = "machine")]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct InvokeArgs {
    pub model: String,
    /// Local BPK1 file sent inline.
    #[arg(long, conflicts_with_all = ["tensor", "dataset"])]
    pub input: Option<PathBuf>,
    /// Raw little-endian float32 tensor file, sent inline with `--shape`.
    #[arg(long, requires = "shape", conflicts_with = "dataset")]
    pub tensor: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<u64>>,
    /// Published dataset holding the input, with `--path` inside its bag.
    #[arg(long, requires = "path")]
    pub dataset: Option<String>,
    #[arg(long)]
    pub path: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub start: u64,
    /// Records to send; all remaining when omitted.
    #[arg(long)]
    pub count: Option<u64>,
    /// Endpoint name or id; chosen by the broker when omitted.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Block until the task finishes and print its result.
    #[arg(long)]
    pub wait: bool,
    /// With `--wait`, write the raw result bytes here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ResultArgs {
    pub task_id: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum UqCommand {
    /// Error statistics of predictions against BPK1 truths.
    Report {
        /// BPK1 file with truths.
        #[arg(long)]
        data: PathBuf,
        /// Raw [n,2] float32 predictions (e.g. from `result --out`).
        #[arg(long, conflicts_with = "weights")]
        predictions: Option<PathBuf>,
        /// Weights to evaluate locally instead.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "strict-f32")]
        precision: PrecisionArg,
    },
}

#[derive(Debug, Args)]
pub struct FaircheckArgs {
    pub identifier: String,
    /// Withdrawn fixture entry for the tombstone probe.
    #[arg(long, env = "FAIRFAB_TOMBSTONE")]
    pub tombstone: Option<String>,
}

#[derive(Debug, Args)]
pub struct QuickstartArgs {
    /// Must be empty or absent; a temporary directory when omitted.
    #[arg(long)]
    pub workdir: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub train_count: usize,
    #[arg(long, default_value_t = 1024)]
    pub test_count: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// Parses `argv` (including the program name) and runs it with the real
/// standard streams.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    // Unlocked handles: worker threads log to stderr while a command runs.
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render();
            let _ = if code == 0 { write!(out, "{rendered}") } else { write!(err, "{}", rendered.ansi()) };
            return code;
        }
    };
    init_logging(cli.global.verbose);
    match dispatch(cli, out, err) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .try_init();
}

fn load_config(g: &GlobalArgs) -> anyhow::Result<CliConfig> {
    let file = match &g.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let over = Overrides {
        registry_url: g.registry_url.clone(),
        broker_url: g.broker_url.clone(),
        store: g.store.clone(),
        broker_state: g.broker_state.clone(),
        runner: g.runner.clone(),
        trust_threshold: g.trust_threshold,
        tolerance: g.tolerance,
        task_timeout_secs: g.task_timeout_secs,
        tombstone_fixture: None,
    };
    Ok(CliConfig::resolve(over, file)?)
}

fn emit_json<T: serde::Serialize>(out: &mut dyn Write, value: &T) -> anyhow::Result<()> {
    let v = crate::metadata::canonical_value(&serde_json::to_value(value)?);
    writeln!(out, "{}", serde_json::to_string_pretty(&v)?)?;
    Ok(())
}

fn listen_addr(explicit: Option<&str>, url: &str) -> anyhow::Result<SocketAddr> {
    let spec = match explicit {
        Some(s) => s.to_string(),
        None => {
            let u = url::Url::parse(url)?;
            format!("{}:{}", u.host_str().unwrap_or("127.0.0.1"), u.port_or_known_default().unwrap_or(80))
        }
    };
    spec.to_socket_addrs()?.next().ok_or_else(|| anyhow!("{spec} resolves to no address"))
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<bool> {
    let machine = cli.global.machine;
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Bag(cmd) => bag_cmd(cmd, machine, out, err),
        Command::Synth(a) => {
            let dist = ParamDistribution::with_noise(a.noise);
            let patches = synth_dataset(a.count, &dist, a.seed)?;
            std::fs::write(&a.out, write_patches(&patches)).with_context(|| format!("writing {}", a.out.display()))?;
            if machine {
                emit_json(out, &serde_json::json!({"path": a.out, "count": patches.len(), "seed": a.seed}))?;
            } else {
                writeln!(out, "wrote {} patches to {}", patches.len(), a.out.display())?;
            }
            Ok(true)
        }
        Command::Train(a) => {
            let bytes = std::fs::read(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
            let data = read_patches(&bytes, None)?;
            let config = TrainConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                learning_rate: a.learning_rate,
                patience: a.patience,
                validation_fraction: a.validation_fraction,
                seed: a.seed,
            };
            let trained = train_tiny(&data, &config)?;
            std::fs::write(&a.out, trained.weights.to_bytes())?;
            let best = trained.best();
            if machine {
                emit_json(
                    out,
                    &serde_json::json!({
                        "weights": a.out,
                        "epochs_run": trained.log.len(),
                        "best_epoch": trained.best_epoch,
                        "stopped_early": trained.stopped_early,
                        "val_mean_error": best.val_mean_error,
                        "fingerprint": trained.weights.fingerprint(),
                    }),
                )?;
            } else {
                for e in &trained.log {
                    writeln!(err, "epoch {:>4} train {:.5} val {:.5} mean error {:.4} px", e.epoch, e.train_loss, e.val_loss, e.val_mean_error)?;
                }
                writeln!(
                    out,
                    "best epoch {} of {}: validation mean error {:.4} px; weights in {}",
                    trained.best_epoch,
                    trained.log.len(),
                    best.val_mean_error,
                    a.out.display()
                )?;
            }
            Ok(true)
        }
        Command::Export(a) => {
            let w = TinyNetWeights::from_bytes(&std::fs::read(&a.weights)?)?;
            let blob = export_servable(&w);
            std::fs::write(&a.out, &blob)?;
            let digest = bag::sha256_hex(&blob);
            if machine {
                emit_json(out, &serde_json::json!({"path": a.out, "servable_digest": digest, "bytes": blob.len()}))?;
            } else {
                writeln!(out, "servable {} ({} bytes) sha256 {digest}", a.out.display(), blob.len())?;
            }
            Ok(true)
        }
        Command::Serve(ServeCommand::Registry { listen }) => {
            let addr = listen_addr(listen.as_deref(), &cfg.registry_url)?;
            let registry = Arc::new(Registry::open(&cfg.store)?);
            writeln!(err, "registry store {} ({} entries) on http://{addr}/", cfg.store.display(), registry.len())?;
            serve_until_interrupted(registry_router(registry), addr)?;
            Ok(true)
        }
        Command::Serve(ServeCommand::Broker { listen }) => {
            let addr = listen_addr(listen.as_deref(), &cfg.broker_url)?;
            let registry: Arc<dyn RegistryApi> = Arc::new(RegistryClient::new(&cfg.registry_url)?);
            let clock = Arc::new(crate::clock::SystemClock);
            let broker = match &cfg.broker_state {
                Some(dir) => Broker::open(registry, clock, BrokerConfig::default(), dir)?,
                None => Broker::with_clock(registry, clock, BrokerConfig::default()),
            };
            writeln!(err, "broker on http://{addr}/ using registry {}", cfg.registry_url)?;
            serve_until_interrupted(broker_router(Arc::new(broker)), addr)?;
            Ok(true)
        }
        Command::Endpoint(EndpointCommand::Run { name, precision, slots }) => {
            let broker = Arc::new(BrokerClient::new(&cfg.broker_url)?);
            let registry = Arc::new(RegistryClient::new(&cfg.registry_url)?);
            let sandbox = SandboxConfig::new(&cfg.runner).with_timeout(cfg.task_timeout);
            let profile = ExecutionProfile::new(precision.into(), slots);
            let worker = EndpointWorker::register(broker, registry, EndpointConfig::new(name.clone(), profile, sandbox))?;
            writeln!(err, "endpoint {name} registered as {} ({})", worker.endpoint_id(), profile.precision)?;
            let stop = Arc::new(AtomicBool::new(false));
            let flag = stop.clone();
            std::thread::spawn(move || {
                if let Ok(rt) = tokio::runtime::Builder::new_current_thread().enable_all().build() {
                    rt.block_on(shutdown_signal());
                    flag.store(true, std::sync::atomic::Ordering::Release);
                }
            });
            worker.run_until(&stop);
            Ok(true)
        }
        Command::Publish(cmd) => publish_cmd(cmd, &cfg, machine, out),
        Command::Get(a) => {
            let registry = RegistryClient::new(&cfg.registry_url)?;
            let doc = registry.get_metadata(&a.identifier)?;
            match (a.format, machine) {
                (FormatArg::Human, false) => write!(out, "{}", render_human(&doc.record)?)?,
                (FormatArg::Machine, false) => {
                    write!(out, "{}", render_machine(&doc.record)?)?;
                    writeln!(err, "state: {:?}", doc.state)?;
                }
                (_, true) => emit_json(out, &doc)?,
            }
            Ok(true)
        }
        Command::Invoke(a) => invoke_cmd(a, &cfg, machine, out),
        Command::Status { task_id } => {
            let broker = BrokerClient::new(&cfg.broker_url)?;
            let view = broker.poll_task(&task_id)?;
            if machine {
                emit_json(out, &view)?;
            } else {
                writeln!(out, "{} {} (attempts {})", view.task_id, view.status, view.attempts)?;
                if let Some(ep) = view.leased_to.as_deref().or(view.assigned_endpoint.as_deref()) {
                    writeln!(out, "endpoint: {ep}")?;
                }
                if let Some(r) = &view.result {
                    writeln!(out, "result: {} {:?} sha256 {}", r.element_type.name(), r.shape, r.digest)?;
                }
                if let Some(d) = &view.error_detail {
                    writeln!(out, "error: {d}")?;
                }
            }
            Ok(view.status != TaskStatus::Failed)
        }
        Command::Result(a) => {
            let broker = BrokerClient::new(&cfg.broker_url)?;
            let t = broker.fetch_result(&a.task_id)?;
            print_tensor(&t, a.out.as_deref(), machine, out)?;
            Ok(true)
        }
        Command::Uq(UqCommand::Report { data, predictions, weights, precision }) => {
            let patches = read_patches(&std::fs::read(&data)?, None)?;
            let truths: Vec<PeakPosition> = patches
                .iter()
                .enumerate()
                .map(|(i, p)| p.truth.ok_or_else(|| anyhow!("record {i} of {} has no truth", data.display())))
                .collect::<anyhow::Result<_>>()?;
            let preds = match (predictions, weights) {
                (Some(p), None) => positions_from_tensor(&std::fs::read(&p)?)?,
                (None, Some(w)) => nn_forward(&TinyNetWeights::from_bytes(&std::fs::read(&w)?)?, &patches, precision.into())?,
                _ => bail!("give exactly one of --predictions or --weights"),
            };
            let report = error_stats(&euclidean_errors(&preds, &truths)?, cfg.trust_threshold)?;
            if machine {
                emit_json(out, &report)?;
            } else {
                writeln!(out, "{}", trust_gate(&report).justification)?;
            }
            Ok(true)
        }
        Command::Faircheck(a) => {
            let registry = RegistryClient::new(&cfg.registry_url)?;
            let broker = BrokerClient::new(&cfg.broker_url)?;
            let mut checker = FairChecker::new(&registry, Some(&broker));
            checker.tolerance = cfg.tolerance;
            checker.task_timeout = cfg.task_timeout;
            checker.tombstone_fixture = a.tombstone.or(cfg.tombstone_fixture.clone());
            let report = checker.fair_report(&a.identifier)?;
            if machine {
                write!(out, "{}", report.to_json())?;
                writeln!(err, "{}", report.summary_table())?;
            } else {
                writeln!(out, "{}", report.summary_table())?;
            }
            Ok(report.overall)
        }
        Command::Quickstart(a) => {
            let tmp;
            let workdir = match a.workdir {
                Some(w) => {
                    if w.exists() && std::fs::read_dir(&w)?.next().is_some() {
                        bail!("{} is not empty; quickstart needs a clean store", w.display());
                    }
                    w
                }
                None => {
                    tmp = tempfile::Builder::new().prefix("fairfab-quickstart-").tempdir()?;
                    tmp.path().to_path_buf()
                }
            };
            let mut opts = quickstart::QuickstartOptions::new(workdir, cfg.runner.clone());
            opts.train_count = a.train_count;
            opts.test_count = a.test_count;
            opts.train.epochs = a.epochs;
            opts.seed = a.seed;
            opts.train.seed = a.seed;
            opts.trust_threshold = cfg.trust_threshold;
            opts.tolerance = cfg.tolerance;
            opts.task_timeout = cfg.task_timeout;
            let report = if machine {
                let r = quickstart::run(opts, err)?;
                write!(out, "{}", r.to_json())?;
                writeln!(err, "{}", r.summary_table())?;
                r
            } else {
                let r = quickstart::run(opts, out)?;
                writeln!(out, "{}", r.summary_table())?;
                r
            };
            Ok(report.overall)
        }
    }
}

fn bag_cmd(cmd: BagCommand, machine: bool, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<bool> {
    match cmd {
        BagCommand::Create { source, dest, algorithm, info } => {
            let alg: ChecksumAlgorithm = algorithm.parse()?;
            let mut map = BTreeMap::new();
            for kv in info {
                let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--info expects KEY=VALUE, got {kv:?}"))?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
            let created = bag::create_bag(&source, &dest, alg, &map)?;
            let minid = bag::mint_minid(&dest)?;
            if machine {
                emit_json(
                    out,
                    &serde_json::json!({"bag": dest, "payload_entries": created.payload_entries, "minid": minid}),
                )?;
            } else {
                writeln!(out, "created {} with {} payload files; {minid}", dest.display(), created.payload_entries.len())?;
            }
            Ok(true)
        }
        BagCommand::Validate { bag } => {
            let report = bag::validate_bag(&bag)?;
            if machine {
                emit_json(out, &report)?;
            } else if report.valid {
                writeln!(out, "valid")?;
            } else {
                writeln!(out, "invalid")?;
            }
            if !report.valid {
                for p in &report.missing_files {
                    writeln!(err, "missing: {p}")?;
                }
                for c in &report.corrupted_files {
                    writeln!(err, "corrupted: {} (expected {}, got {})", c.path, c.expected, c.actual)?;
                }
                for p in &report.extra_files {
                    writeln!(err, "extra: {p}")?;
                }
            }
            Ok(report.valid)
        }
        BagCommand::Minid { bag } => {
            let minid = bag::mint_minid(&bag)?;
            if machine {
                emit_json(out, &minid)?;
            } else {
                writeln!(out, "{minid}")?;
            }
            Ok(true)
        }
    }
}

/// Publish documents may leave the identifier, digest and minid blank; the
/// registry validates the completed record.
fn read_record(path: &Path, doc: &str) -> anyhow::Result<Record> {
    serde_json::from_str(doc).with_context(|| format!("{} is not a metadata record", path.display()))
}

fn publish_cmd(cmd: PublishCommand, cfg: &CliConfig, machine: bool, out: &mut dyn Write) -> anyhow::Result<bool> {
    let registry = RegistryClient::new(&cfg.registry_url)?;
    let id = match cmd {
        PublishCommand::Model { record, servable } => {
            let doc = std::fs::read_to_string(&record).with_context(|| format!("reading {}", record.display()))?;
            let Record::Model(mut m) = read_record(&record, &doc)? else { bail!("{} is not a model record", record.display()) };
            let blob = std::fs::read(&servable)?;
            m.servable_digest.get_or_insert_with(|| bag::sha256_hex(&blob));
            registry.publish_model(m, &blob)?
        }
        PublishCommand::Dataset { record, bag: bag_dir } => {
            let doc = std::fs::read_to_string(&record).with_context(|| format!("reading {}", record.display()))?;
            let Record::Dataset(mut d) = read_record(&record, &doc)? else {
                bail!("{} is not a dataset record", record.display())
            };
            if d.minid.is_empty() {
                d.minid = bag::mint_minid(&bag_dir)?.identifier;
            }
            registry.publish_dataset(d, &bag::pack_bag(&bag_dir)?)?
        }
    };
    if machine {
        emit_json(out, &serde_json::json!({ "identifier": id }))?;
    } else {
        writeln!(out, "{id}")?;
    }
    Ok(true)
}

fn invoke_cmd(a: InvokeArgs, cfg: &CliConfig, machine: bool, out: &mut dyn Write) -> anyhow::Result<bool> {
    let input = match (&a.input, &a.tensor, &a.dataset) {
        (Some(path), None, None) => {
            let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let all = read_patches(&bytes, None)?;
            let start = a.start as usize;
            let count = a.count.map(|c| c as usize).unwrap_or(all.len().saturating_sub(start));
            let slice = all.get(start..start + count).ok_or_else(|| anyhow!("slice {start}+{count} exceeds {}", all.len()))?;
            let t = Tensor::new(ElementType::Float32, vec![slice.len() as u64, 1, 11, 11], crate::peaks::patches_to_tensor(slice))?;
            InputReference::inline(&t)
        }
        (None, Some(path), None) => {
            let shape = a.shape.clone().unwrap_or_default();
            let t = Tensor::new(ElementType::Float32, shape, std::fs::read(path)?)?;
            InputReference::inline(&t)
        }
        (None, None, Some(ds)) => {
            let count = a.count.ok_or_else(|| anyhow!("--count is required with --dataset"))?;
            InputReference::DatasetSlice {
                identifier: ds.clone(),
                path: a.path.clone().unwrap_or_default(),
                start: a.start,
                count,
            }
        }
        _ => bail!("give exactly one of --input, --tensor or --dataset"),
    };
    let broker = BrokerClient::new(&cfg.broker_url)?;
    let mut sub = TaskSubmission::new(&a.model, input);
    if let Some(ep) = a.endpoint {
        sub = sub.on(ep);
    }
    let task_id = broker.submit_task(sub)?;
    if !a.wait {
        if machine {
            emit_json(out, &serde_json::json!({ "task_id": task_id }))?;
        } else {
            writeln!(out, "{task_id}")?;
        }
        return Ok(true);
    }
    let view = wait_for(&broker, &task_id, cfg.task_timeout + Duration::from_secs(30))?;
    if view.status != TaskStatus::Completed {
        bail!("task {task_id} failed: {}", view.error_detail.unwrap_or_default());
    }
    let t = broker.fetch_result(&task_id)?;
    print_tensor(&t, a.out.as_deref(), machine, out)?;
    Ok(true)
}

fn print_tensor(t: &Tensor, path: Option<&Path>, machine: bool, out: &mut dyn Write) -> anyhow::Result<()> {
    if let Some(p) = path {
        std::fs::write(p, &t.data)?;
    }
    let values = t.to_f32().ok_or_else(|| anyhow!("result is {}, expected float32", t.element_type.name()))?;
    if machine {
        emit_json(out, &serde_json::json!({"element_type": t.element_type, "shape": t.shape, "data": values}))?;
    } else if path.is_none() {
        let width = t.shape.last().copied().unwrap_or(1).max(1) as usize;
        for row in values.chunks(width) {
            writeln!(out, "{}", row.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" "))?;
        }
    } else {
        writeln!(out, "wrote {:?} {} result to {}", t.shape, t.element_type.name(), path.unwrap_or(Path::new("")).display())?;
    }
    Ok(())
}
