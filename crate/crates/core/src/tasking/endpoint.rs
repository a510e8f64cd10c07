//! Endpoint worker: heartbeats, leases tasks up to its slot count, runs each
//! in the sandbox and reports the outcome.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::sandbox::{execute_servable, SandboxConfig};
use super::{BrokerApi, ExecutionProfile, InputReference, LeasedTask, TaskOutcome, Tensor};
use crate::bag::{read_archived_payload, sha256_hex};
use crate::error::{FabricError, Result};
use crate::metadata::ElementType;
use crate::peaks::{patches_to_tensor, read_patches};
use crate::registry::RegistryApi;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub name: String,
    pub profile: ExecutionProfile,
    pub sandbox: SandboxConfig,
    /// Idle wait between empty lease attempts.
    pub poll_interval: Duration,
    /// Heartbeat cadence while tasks are executing; must stay well under the
    /// broker's liveness window.
    pub heartbeat_interval: Duration,
}

impl EndpointConfig {
    pub fn new(name: impl Into<String>, profile: ExecutionProfile, sandbox: SandboxConfig) -> Self {
        EndpointConfig {
            name: name.into(),
            profile,
            sandbox,
            poll_interval: Duration::from_millis(100),
            heartbeat_interval: Duration::from_secs(5),
        }
    }
}

pub struct EndpointWorker {
    broker: Arc<dyn BrokerApi>,
    registry: Arc<dyn RegistryApi>,
    config: EndpointConfig,
    endpoint_id: String,
    servables: Mutex<HashMap<String, Arc<Vec<u8>>>>,
    datasets: Mutex<HashMap<(String, String), Arc<Vec<u8>>>>,
}

impl EndpointWorker {
    /// Registers with the broker under `config.name`.
    pub fn register(broker: Arc<dyn BrokerApi>, registry: Arc<dyn RegistryApi>, config: EndpointConfig) -> Result<Self> {
        let endpoint_id = broker.register_endpoint(&config.name, config.profile)?;
        Ok(EndpointWorker {
            broker,
            registry,
            config,
            endpoint_id,
            servables: Mutex::new(HashMap::new()),
            datasets: Mutex::new(HashMap::new()),
        })
    }

    pub fn endpoint_id(&self) -> &str {
        &self.endpoint_id
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// One heartbeat + lease + execute round. Returns how many tasks ran.
    pub fn run_once(&self) -> Result<usize> {
        self.broker.heartbeat(&self.endpoint_id)?;
        let leased = self.broker.lease_tasks(&self.endpoint_id, self.config.profile.worker_slots as usize)?;
        if leased.is_empty() {
            return Ok(0);
        }
        let done = AtomicBool::new(false);
        let reports: Vec<Result<()>> = std::thread::scope(|s| {
            let ticker = s.spawn(|| {
                let step = Duration::from_millis(20);
                let mut since = Duration::ZERO;
                while !done.load(Ordering::Acquire) {
                    std::thread::sleep(step);
                    since += step;
                    if since >= self.config.heartbeat_interval {
                        since = Duration::ZERO;
                        if let Err(e) = self.broker.heartbeat(&self.endpoint_id) {
                            tracing::warn!(endpoint = %self.endpoint_id, "heartbeat failed: {e}");
                        }
                    }
                }
            });
            let handles: Vec<_> = leased.iter().map(|task| s.spawn(move || self.process(task))).collect();
            let out = handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(FabricError::Internal("worker panicked".into())))).collect();
            done.store(true, Ordering::Release);
            let _ = ticker.join();
            out
        });
        for r in &reports {
            if let Err(e) = r {
                tracing::warn!(endpoint = %self.endpoint_id, "report failed: {e}");
            }
        }
        Ok(leased.len())
    }

    /// Loops until `stop` is set. Transient broker errors are logged and retried.
    pub fn run_until(&self, stop: &AtomicBool) {
        while !stop.load(Ordering::Acquire) {
            match self.run_once() {
                Ok(0) => sleep_unless(stop, self.config.poll_interval),
                Ok(_) => {}
                Err(e) => {
                    tracing::warn!(endpoint = %self.endpoint_id, "broker round failed: {e}");
                    sleep_unless(stop, self.config.poll_interval.max(Duration::from_millis(500)));
                }
            }
        }
    }

    fn process(&self, task: &LeasedTask) -> Result<()> {
        self.broker.start_task(&self.endpoint_id, &task.task_id)?;
        let outcome = match self.execute(task) {
            Ok(t) => TaskOutcome::Success(t),
            Err(detail) => {
                tracing::info!(task = %task.task_id, "task failed: {detail}");
                TaskOutcome::Failure(detail)
            }
        };
        self.broker.report_result(&self.endpoint_id, &task.task_id, outcome)?;
        Ok(())
    }

    /// Failure details are prefixed with a short class, e.g. `timeout: ...`.
    fn execute(&self, task: &LeasedTask) -> std::result::Result<Tensor, String> {
        let servable = self.servable(&task.model_identifier, &task.servable_digest).map_err(|e| format!("fetch: {e}"))?;
        let input = self.resolve_input(&task.input).map_err(|e| format!("input: {e}"))?;
        execute_servable(&servable, &task.model_identifier, &input, self.config.profile.precision, &self.config.sandbox)
            .map_err(|e| format!("{}: {e}", e.class()))
    }

    fn servable(&self, model: &str, digest: &str) -> Result<Arc<Vec<u8>>> {
        if let Some(s) = self.servables.lock().expect("cache lock").get(digest) {
            return Ok(s.clone());
        }
        let bytes = self.registry.download_artifact(model)?;
        let actual = sha256_hex(&bytes);
        if actual != digest {
            return Err(FabricError::Integrity(format!("servable for {model} hashes to {actual}, task pins {digest}")));
        }
        let bytes = Arc::new(bytes);
        self.servables.lock().expect("cache lock").insert(digest.to_string(), bytes.clone());
        Ok(bytes)
    }

    fn resolve_input(&self, input: &InputReference) -> Result<Tensor> {
        match input {
            InputReference::Inline { element_type, shape, data_base64 } => {
                let data = B64.decode(data_base64).map_err(|e| FabricError::validation(e.to_string()))?;
                Tensor::new(*element_type, shape.clone(), data).map_err(|e| FabricError::validation(e.to_string()))
            }
            InputReference::DatasetSlice { identifier, path, start, count } => {
                let key = (identifier.clone(), path.clone());
                let cached = self.datasets.lock().expect("cache lock").get(&key).cloned();
                let file = match cached {
                    Some(f) => f,
                    None => {
                        let archive = self.registry.download_artifact(identifier)?;
                        let file = read_archived_payload(&archive, path)
                            .map_err(|e| FabricError::Integrity(format!("{identifier}: {e}")))?;
                        let file = Arc::new(file);
                        self.datasets.lock().expect("cache lock").insert(key, file.clone());
                        file
                    }
                };
                let patches = read_patches(&file, Some((*start as usize, *count as usize)))
                    .map_err(|e| FabricError::validation(format!("{identifier}:{path}: {e}")))?;
                Tensor::new(ElementType::Float32, vec![patches.len() as u64, 1, 11, 11], patches_to_tensor(&patches))
                    .map_err(|e| FabricError::Internal(e.to_string()))
            }
        }
    }
}

fn sleep_unless(stop: &AtomicBool, total: Duration) {
    let step = Duration::from_millis(20);
    let mut slept = Duration::ZERO;
    while slept < total && !stop.load(Ordering::Acquire) {
        std::thread::sleep(step);
        slept += step;
    }
}
