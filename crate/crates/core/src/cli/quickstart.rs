//! The end-to-end demo behind `fairfab quickstart`: synthesize peaks, train
//! and export the regressor, publish datasets and the model, stand up a
//! broker with one endpoint per execution profile, invoke, and grade.
//!
//! [`stage`] leaves every service running so tests can poke at the staged
//! state before [`Staged::shutdown`].

use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use anyhow::{bail, ensure, Context};

use crate::bag::{self, ChecksumAlgorithm};
use crate::clock::SystemClock;
use crate::faircheck::{FairChecker, FairReport, TOMBSTONE_KEYWORD};
use crate::http::{spawn_server, ServerHandle};
use crate::metadata::{
    Author, DatasetRecord, Dependency, ModelRecord, TensorExample, UqMetric, WorkedExample,
    DEFAULT_DATASET_LICENSE,
};
use crate::peaks::{
    export_servable, input_signature, nn_forward, output_signature, positions_from_tensor, splitmix64, synth_dataset,
    train_tiny, write_patches, ParamDistribution, PeakPatch, PeakPosition, Precision, TinyNetWeights, TrainConfig,
};
use crate::registry::{registry_router, Registry, RegistryApi, RegistryClient};
use crate::tasking::{
    broker_router, wait_for, Broker, BrokerApi, BrokerClient, BrokerConfig, EndpointConfig, EndpointWorker,
    ExecutionProfile, InputReference, SandboxConfig, TaskStatus, TaskSubmission, Tensor,
};
use crate::uq::{consistency_check, error_stats, euclidean_errors, ConsistencyReport, UqReport};

pub const SAMPLE_FILE: &str = "data/test.bpk";
const TRAIN_FILE: &str = "train.bpk";

#[derive(Debug, Clone)]
pub struct QuickstartOptions {
    pub workdir: PathBuf,
    pub runner: PathBuf,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub trust_threshold: f64,
    pub tolerance: f64,
    pub task_timeout: Duration,
    /// One endpoint is started per entry.
    pub profiles: Vec<(String, Precision)>,
}

impl QuickstartOptions {
    pub fn new(workdir: impl Into<PathBuf>, runner: impl Into<PathBuf>) -> Self {
        QuickstartOptions {
            workdir: workdir.into(),
            runner: runner.into(),
            train_count: 2000,
            test_count: 1024,
            seed: 7,
            train: TrainConfig {
                epochs: 50,
                batch_size: 32,
                learning_rate: 0.01,
                patience: 10,
                validation_fraction: 0.2,
                seed: 7,
            },
            trust_threshold: crate::uq::DEFAULT_TRUST_THRESHOLD_PX,
            tolerance: crate::uq::DEFAULT_CONSISTENCY_TOLERANCE_PX,
            task_timeout: Duration::from_secs(120),
            profiles: vec![
                ("sim-strict-f32".into(), Precision::StrictF32),
                ("sim-f64-accumulate".into(), Precision::F64Accumulate),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagedIds {
    pub model: String,
    pub training_dataset: String,
    pub sample_set: String,
    pub sample_minid: String,
    pub tombstone: String,
}

struct RunningEndpoint {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

pub struct Staged {
    pub options: QuickstartOptions,
    pub ids: StagedIds,
    pub registry: Arc<Registry>,
    pub registry_client: Arc<RegistryClient>,
    pub broker_client: Arc<BrokerClient>,
    pub weights: TinyNetWeights,
    pub servable: Vec<u8>,
    pub test_set: Vec<PeakPatch>,
    pub uq: UqReport,
    registry_server: Option<ServerHandle>,
    broker_server: Option<ServerHandle>,
    endpoints: Vec<RunningEndpoint>,
}

/// Results of running the sample set once per execution profile.
#[derive(Debug, Clone)]
pub struct ProfileRuns {
    pub outputs: Vec<(String, Tensor)>,
    pub consistency: ConsistencyReport,
    pub uq: UqReport,
    pub matches_direct: bool,
}

fn local() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

fn author() -> Author {
    Author { name: "FAIR Fabric Quickstart".into(), contact: Some("quickstart@example.org".into()) }
}

fn year() -> i64 {
    use chrono::Datelike;
    chrono::Utc::now().year() as i64
}

fn make_bag(workdir: &Path, name: &str, files: &[(&str, &[u8])]) -> anyhow::Result<PathBuf> {
    let src = workdir.join("src").join(name);
    std::fs::create_dir_all(&src)?;
    for (rel, bytes) in files {
        std::fs::write(src.join(rel), bytes)?;
    }
    let dest = workdir.join("bags").join(name);
    let info = BTreeMap::from([
        ("Source-Organization".to_string(), "fair-fabric quickstart".to_string()),
        ("External-Description".to_string(), format!("{name} peaks")),
    ]);
    bag::create_bag(&src, &dest, ChecksumAlgorithm::Sha256, &info).with_context(|| format!("bagging {name}"))?;
    Ok(dest)
}

fn dataset_record(title: &str, description: &str, keywords: &[&str], minid: String) -> DatasetRecord {
    DatasetRecord {
        identifier: String::new(),
        identifier_type: None,
        title: title.into(),
        authors: vec![author()],
        publication_year: year(),
        description: description.into(),
        keywords: keywords.iter().map(|k| k.to_string()).collect(),
        license: DEFAULT_DATASET_LICENSE.into(),
        format_label: "BPK1".into(),
        minid,
        related_identifiers: Vec::new(),
    }
}

fn publish_bag(registry: &dyn RegistryApi, record: DatasetRecord, bag_dir: &Path) -> anyhow::Result<String> {
    let archive = bag::pack_bag(bag_dir)?;
    Ok(registry.publish_dataset(record, &archive)?)
}

/// Stages everything up to (not including) the profile runs and the FAIR
/// report. Progress lines go to `log`.
pub fn stage(options: QuickstartOptions, log: &mut dyn Write) -> anyhow::Result<Staged> {
    let wd = &options.workdir;
    std::fs::create_dir_all(wd).with_context(|| format!("creating {}", wd.display()))?;
    ensure!(options.runner.is_file(), "runner executable {} not found", options.runner.display());

    let dist = ParamDistribution::default();
    let train_set = synth_dataset(options.train_count, &dist, splitmix64(options.seed))?;
    let test_set = synth_dataset(options.test_count, &dist, splitmix64(options.seed.wrapping_add(2)))?;
    writeln!(log, "synth: {} training and {} test patches (noise {})", train_set.len(), test_set.len(), dist.noise_sigma)?;

    let trained = train_tiny(&train_set, &options.train)?;
    let best = trained.best();
    writeln!(
        log,
        "train: {} epochs, best epoch {} with validation mean error {:.4} px",
        trained.log.len(),
        trained.best_epoch,
        best.val_mean_error
    )?;
    let weights = trained.weights;
    let servable = export_servable(&weights);
    let digest = bag::sha256_hex(&servable);
    writeln!(log, "export: servable {} bytes, sha256 {digest}", servable.len())?;

    let predictions = nn_forward(&weights, &test_set, Precision::StrictF32)?;
    let truths: Vec<PeakPosition> = test_set.iter().map(|p| p.truth.expect("synthetic truth")).collect();
    let uq = error_stats(&euclidean_errors(&predictions, &truths)?, options.trust_threshold)?;
    writeln!(log, "uq: {}", crate::uq::trust_gate(&uq).justification)?;

    let registry = Arc::new(Registry::open(wd.join("registry"))?);
    let registry_server = spawn_server(registry_router(registry.clone()), local())?;
    let registry_client = Arc::new(RegistryClient::new(&registry_server.url())?);
    writeln!(log, "registry: listening on {}", registry_server.url())?;

    let train_bag = make_bag(wd, "training", &[(TRAIN_FILE, &write_patches(&train_set))])?;
    let train_minid = bag::mint_minid(&train_bag)?.identifier;
    let training_dataset = publish_bag(
        registry_client.as_ref(),
        dataset_record("Synthetic Bragg peak training set", "11x11 synthetic peak patches with truths", &["bragg", "training"], train_minid),
        &train_bag,
    )?;
    let sample_bag = make_bag(wd, "sample", &[("test.bpk", &write_patches(&test_set))])?;
    let sample_minid = bag::mint_minid(&sample_bag)?.identifier;
    let sample_set = publish_bag(
        registry_client.as_ref(),
        dataset_record("Synthetic Bragg peak sample test set", "held-out patches for re-running the model", &["bragg", "sample-set"], sample_minid.clone()),
        &sample_bag,
    )?;
    let tomb_bag = make_bag(wd, "tombstone", &[("README.txt", b"withdrawn fixture\n")])?;
    let tomb_minid = bag::mint_minid(&tomb_bag)?.identifier;
    let tombstone = publish_bag(
        registry_client.as_ref(),
        dataset_record("Withdrawn fixture", "kept only as a tombstone probe", &[TOMBSTONE_KEYWORD], tomb_minid),
        &tomb_bag,
    )?;
    registry_client.withdraw(&tombstone)?;
    writeln!(log, "publish: training {training_dataset}, sample {sample_set} ({sample_minid}), tombstone {tombstone}")?;

    let example_in = &test_set[0];
    let example_out = crate::peaks::nn_forward_f32(&weights, &[example_in.intensities], Precision::StrictF32)?;
    let record = ModelRecord {
        identifier: String::new(),
        identifier_type: None,
        title: "BraggNN-lite sub-pixel peak localizer".into(),
        authors: vec![author()],
        publication_year: year(),
        description: "Predicts the sub-pixel center of a Bragg peak from an 11x11 intensity patch".into(),
        keywords: vec!["bragg".into(), "peak-localization".into(), "regression".into()],
        input_signature: input_signature(),
        output_signature: output_signature(),
        dependencies: vec![Dependency { name: "fair-fabric".into(), version: env!("CARGO_PKG_VERSION").into() }],
        training_dataset_id: Some(training_dataset.clone()),
        sample_set_id: Some(sample_minid.clone()),
        uq_metric: Some(UqMetric {
            metric: "euclidean_distance".into(),
            units: "pixels".into(),
            trust_threshold: options.trust_threshold,
            report: Some(uq.clone()),
        }),
        license: "Apache-2.0".into(),
        servable_digest: Some(digest),
        instructions: Some(format!(
            "Submit float32 patches shaped [n,1,11,11] (row-major, pixel (i,j) centered at (i+0.5, j+0.5)); \
             the output is [n,2] peak positions in pixels. The sample set {sample_minid} holds {} test patches \
             in {SAMPLE_FILE}.",
            test_set.len()
        )),
        worked_example: Some(WorkedExample {
            input: TensorExample { shape: vec![1, 1, 11, 11], data: example_in.intensities.to_vec() },
            output: TensorExample { shape: vec![1, 2], data: example_out[0].to_vec() },
        }),
    };
    let model = registry_client.publish_model(record, &servable)?;
    writeln!(log, "publish: model {model}")?;

    let broker_api: Arc<dyn RegistryApi> = registry_client.clone();
    let broker = Arc::new(Broker::with_clock(broker_api, Arc::new(SystemClock), BrokerConfig::default()));
    let broker_server = spawn_server(broker_router(broker), local())?;
    let broker_client = Arc::new(BrokerClient::new(&broker_server.url())?);
    writeln!(log, "broker: listening on {}", broker_server.url())?;

    let mut endpoints = Vec::new();
    for (name, precision) in &options.profiles {
        let sandbox = SandboxConfig::new(&options.runner).with_timeout(options.task_timeout);
        let cfg = EndpointConfig::new(name.clone(), ExecutionProfile::new(*precision, 2), sandbox);
        let worker = EndpointWorker::register(broker_client.clone(), registry_client.clone(), cfg)?;
        writeln!(log, "endpoint: {name} ({precision}) registered as {}", worker.endpoint_id())?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::Builder::new()
            .name(format!("endpoint-{name}"))
            .spawn(move || worker.run_until(&flag))?;
        endpoints.push(RunningEndpoint { stop, thread: Some(thread) });
    }

    Ok(Staged {
        ids: StagedIds { model, training_dataset, sample_set, sample_minid, tombstone },
        options,
        registry,
        registry_client,
        broker_client,
        weights,
        servable,
        test_set,
        uq,
        registry_server: Some(registry_server),
        broker_server: Some(broker_server),
        endpoints,
    })
}

impl Staged {
    pub fn registry_url(&self) -> String {
        self.registry_server.as_ref().map(ServerHandle::url).unwrap_or_default()
    }

    pub fn broker_url(&self) -> String {
        self.broker_server.as_ref().map(ServerHandle::url).unwrap_or_default()
    }

    pub fn checker(&self) -> FairChecker<'_> {
        let mut c = FairChecker::new(self.registry_client.as_ref(), Some(self.broker_client.as_ref()));
        c.tolerance = self.options.tolerance;
        c.task_timeout = self.options.task_timeout;
        c.tombstone_fixture = Some(self.ids.tombstone.clone());
        c
    }

    /// Runs the whole sample set on every endpoint through the broker.
    pub fn run_profiles(&self) -> anyhow::Result<ProfileRuns> {
        let n = self.test_set.len() as u64;
        let broker: &dyn BrokerApi = self.broker_client.as_ref();
        let mut task_ids = Vec::new();
        for (name, _) in &self.options.profiles {
            let input = InputReference::DatasetSlice {
                identifier: self.ids.sample_set.clone(),
                path: SAMPLE_FILE.into(),
                start: 0,
                count: n,
            };
            task_ids.push((name.clone(), broker.submit_task(TaskSubmission::new(&self.ids.model, input).on(name))?));
        }
        let mut outputs = Vec::new();
        for (name, id) in task_ids {
            let view = wait_for(broker, &id, self.options.task_timeout)?;
            if view.status != TaskStatus::Completed {
                bail!("task {id} on {name} {}: {}", view.status, view.error_detail.unwrap_or_default());
            }
            outputs.push((name, broker.fetch_result(&id)?));
        }
        ensure!(outputs.len() >= 2, "need two profiles for a consistency check");
        let direct = crate::peaks::nn_forward_f32(
            &self.weights,
            &self.test_set.iter().map(|p| p.intensities).collect::<Vec<_>>(),
            Precision::StrictF32,
        )?;
        let direct_bytes = crate::peaks::positions_to_tensor(&direct);
        let matches_direct = outputs[0].1.data == direct_bytes;
        let a = positions_from_tensor(&outputs[0].1.data)?;
        let b = positions_from_tensor(&outputs[1].1.data)?;
        let consistency = consistency_check(&a, &b, self.options.tolerance)?;
        let truths: Vec<PeakPosition> = self.test_set.iter().map(|p| p.truth.expect("synthetic truth")).collect();
        let uq = error_stats(&euclidean_errors(&a, &truths)?, self.options.trust_threshold)?;
        Ok(ProfileRuns { outputs, consistency, uq, matches_direct })
    }

    pub fn fair_report(&self) -> anyhow::Result<FairReport> {
        Ok(self.checker().fair_report(&self.ids.model)?)
    }

    /// Stops endpoints and servers. Also done on drop.
    pub fn shutdown(mut self) {
        self.stop_all();
    }

    fn stop_all(&mut self) {
        for ep in &self.endpoints {
            ep.stop.store(true, Ordering::Release);
        }
        for ep in &mut self.endpoints {
            if let Some(t) = ep.thread.take() {
                let _ = t.join();
            }
        }
        if let Some(s) = self.broker_server.take() {
            s.shutdown();
        }
        if let Some(s) = self.registry_server.take() {
            s.shutdown();
        }
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        self.stop_all();
    }
}

/// The full demo. Returns the FAIR report; the caller prints it.
pub fn run(options: QuickstartOptions, log: &mut dyn Write) -> anyhow::Result<FairReport> {
    let staged = stage(options, log)?;
    let runs = staged.run_profiles()?;
    for (name, t) in &runs.outputs {
        writeln!(log, "invoke: {name} returned {:?} ({} bytes, sha256 {})", t.shape, t.data.len(), &bag::sha256_hex(&t.data)[..16])?;
    }
    writeln!(
        log,
        "reproducibility: broker result {} direct execution",
        if runs.matches_direct { "is byte-identical to" } else { "DIFFERS from" }
    )?;
    writeln!(
        log,
        "consistency: max |Δ| {:.3e} px at tolerance {:.0e} → {}",
        runs.consistency.max_abs_deviation,
        runs.consistency.tolerance,
        if runs.consistency.pass { "pass" } else { "fail" }
    )?;
    writeln!(log, "uq (via broker): {}", crate::uq::trust_gate(&runs.uq).justification)?;
    let report = staged.fair_report()?;
    staged.shutdown();
    ensure!(runs.matches_direct, "broker-mediated result differs from direct execution");
    Ok(report)
}
