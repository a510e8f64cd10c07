#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use fair_fabric::bag::{self, ChecksumAlgorithm};
use fair_fabric::http::{spawn_server, ServerHandle};
use fair_fabric::metadata::{
    Author, DatasetRecord, Dependency, ModelRecord, TensorExample, UqMetric, WorkedExample, DEFAULT_DATASET_LICENSE,
};
use fair_fabric::peaks::{
    export_servable, input_signature, nn_forward_f32, output_signature, synth_dataset, write_patches,
    ParamDistribution, PeakPatch, Precision, TinyNetWeights,
};
use fair_fabric::registry::{registry_router, Registry, RegistryApi, RegistryClient};
use fair_fabric::tasking::{
    broker_router, Broker, BrokerApi, BrokerClient, EndpointConfig, EndpointWorker, ExecutionProfile,
    SandboxConfig, Tensor,
};

pub fn runner() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_fairfab-runner"))
}

pub fn local() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

pub fn author() -> Author {
    Author { name: "Test Author".into(), contact: Some("author@example.org".into()) }
}

pub fn model_record(weights: &TinyNetWeights, servable: &[u8], sample_set: Option<String>) -> ModelRecord {
    let example_in = [1.0f32; 121];
    let example_out = nn_forward_f32(weights, &[example_in], Precision::StrictF32).unwrap();
    ModelRecord {
        identifier: String::new(),
        identifier_type: None,
        title: "Peak localizer under test".into(),
        authors: vec![author()],
        publication_year: 2024,
        description: "Sub-pixel peak centers from 11x11 patches".into(),
        keywords: vec!["bragg".into()],
        input_signature: input_signature(),
        output_signature: output_signature(),
        dependencies: vec![Dependency { name: "fair-fabric".into(), version: "0.1.0".into() }],
        training_dataset_id: None,
        sample_set_id: sample_set,
        uq_metric: Some(UqMetric {
            metric: "euclidean_distance".into(),
            units: "pixels".into(),
            trust_threshold: 0.688,
            report: None,
        }),
        license: "Apache-2.0".into(),
        servable_digest: Some(bag::sha256_hex(servable)),
        instructions: Some("submit [n,1,11,11] float32 patches".into()),
        worked_example: Some(WorkedExample {
            input: TensorExample { shape: vec![1, 1, 11, 11], data: example_in.to_vec() },
            output: TensorExample { shape: vec![1, 2], data: example_out[0].to_vec() },
        }),
    }
}

pub fn dataset_record(title: &str, minid: String) -> DatasetRecord {
    DatasetRecord {
        identifier: String::new(),
        identifier_type: None,
        title: title.into(),
        authors: vec![author()],
        publication_year: 2024,
        description: "synthetic peak patches".into(),
        keywords: vec!["bragg".into()],
        license: DEFAULT_DATASET_LICENSE.into(),
        format_label: "BPK1".into(),
        minid,
        related_identifiers: Vec::new(),
    }
}

/// Bags `files` under `root/<name>` and returns the bag directory.
pub fn make_bag(root: &Path, name: &str, files: &[(&str, &[u8])]) -> PathBuf {
    let src = root.join("src").join(name);
    std::fs::create_dir_all(&src).unwrap();
    for (rel, bytes) in files {
        let p = src.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, bytes).unwrap();
    }
    let dest = root.join("bags").join(name);
    bag::create_bag(&src, &dest, ChecksumAlgorithm::Sha256, &BTreeMap::new()).unwrap();
    dest
}

pub fn patches(n: usize, seed: u64) -> Vec<PeakPatch> {
    synth_dataset(n, &ParamDistribution::default(), seed).unwrap()
}

pub fn patch_tensor(p: &[PeakPatch]) -> Tensor {
    let flat: Vec<f32> = p.iter().flat_map(|x| x.intensities).collect();
    Tensor::from_f32(vec![p.len() as u64, 1, 11, 11], &flat).unwrap()
}

pub struct Endpoint {
    pub id: String,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn start_endpoint(
    broker: Arc<dyn BrokerApi>,
    registry: Arc<dyn RegistryApi>,
    name: &str,
    precision: Precision,
    slots: u32,
) -> Endpoint {
    let sandbox = SandboxConfig::new(runner()).with_timeout(Duration::from_secs(60));
    let mut cfg = EndpointConfig::new(name, ExecutionProfile::new(precision, slots), sandbox);
    cfg.poll_interval = Duration::from_millis(10);
    let worker = EndpointWorker::register(broker, registry, cfg).unwrap();
    let id = worker.endpoint_id().to_string();
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = std::thread::spawn(move || worker.run_until(&flag));
    Endpoint { id, stop, thread: Some(thread) }
}

/// Registry and broker behind real HTTP servers, with a published model and
/// a published sample dataset (`data/sample.bpk`).
pub struct Fabric {
    pub dir: tempfile::TempDir,
    pub registry: Arc<Registry>,
    pub registry_client: Arc<RegistryClient>,
    pub broker_client: Arc<BrokerClient>,
    pub weights: TinyNetWeights,
    pub servable: Vec<u8>,
    pub model: String,
    pub dataset: String,
    pub sample: Vec<PeakPatch>,
    pub registry_server: Option<ServerHandle>,
    pub broker_server: Option<ServerHandle>,
}

impl Fabric {
    pub fn start() -> Fabric {
        let dir = tempfile::tempdir().unwrap();
        let registry = Arc::new(Registry::open(dir.path().join("registry")).unwrap());
        let registry_server = spawn_server(registry_router(registry.clone()), local()).unwrap();
        let registry_client = Arc::new(RegistryClient::new(&registry_server.url()).unwrap());

        let sample = patches(32, 99);
        let bag_dir = make_bag(dir.path(), "sample", &[("sample.bpk", &write_patches(&sample))]);
        let minid = bag::mint_minid(&bag_dir).unwrap().identifier;
        let dataset = registry_client
            .publish_dataset(dataset_record("Sample peaks", minid.clone()), &bag::pack_bag(&bag_dir).unwrap())
            .unwrap();

        let weights = TinyNetWeights::glorot(5);
        let servable = export_servable(&weights);
        let model = registry_client.publish_model(model_record(&weights, &servable, Some(minid)), &servable).unwrap();

        let broker_registry: Arc<dyn RegistryApi> = registry_client.clone();
        let broker = Arc::new(Broker::new(broker_registry));
        let broker_server = spawn_server(broker_router(broker), local()).unwrap();
        let broker_client = Arc::new(BrokerClient::new(&broker_server.url()).unwrap());
        Fabric {
            dir,
            registry,
            registry_client,
            broker_client,
            weights,
            servable,
            model,
            dataset,
            sample,
            registry_server: Some(registry_server),
            broker_server: Some(broker_server),
        }
    }

    pub fn registry_url(&self) -> String {
        self.registry_server.as_ref().unwrap().url()
    }

    pub fn broker_url(&self) -> String {
        self.broker_server.as_ref().unwrap().url()
    }

    pub fn endpoint(&self, name: &str, precision: Precision, slots: u32) -> Endpoint {
        start_endpoint(self.broker_client.clone(), self.registry_client.clone(), name, precision, slots)
    }
}
