//! Task broker: accepts inference tasks against published models and hands
//! them to endpoints through expiring leases.
//!
//! Lifecycle: `pending → leased → running → completed | failed`. A lease
//! that is not renewed by a heartbeat within the lease window returns the
//! task to `pending` and increments its attempt counter. Results are
//! write-once.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::protocol::Tensor;
use super::{
    BrokerApi, EndpointInfo, EndpointState, ExecutionProfile, InputReference, LeasedTask, ResultRef, TaskOutcome,
    TaskStatus, TaskSubmission, TaskView, Transition,
};
use crate::bag::sha256_hex;
use crate::clock::{Clock, Millis, SystemClock};
use crate::error::{FabricError, Result};
use crate::metadata::{ElementType, Record};
use crate::registry::{EntryState, RegistryApi};

pub const DEFAULT_LEASE_MS: Millis = 60_000;
pub const DEFAULT_LIVENESS_MS: Millis = 30_000;
pub const INLINE_INPUT_CAP: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerConfig {
    pub lease_ms: Millis,
    pub liveness_ms: Millis,
    pub inline_cap: usize,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig { lease_ms: DEFAULT_LEASE_MS, liveness_ms: DEFAULT_LIVENESS_MS, inline_cap: INLINE_INPUT_CAP }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EndpointEntry {
    endpoint_id: String,
    name: String,
    profile: ExecutionProfile,
    last_heartbeat: Millis,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaskEntry {
    seq: u64,
    task_id: String,
    model_identifier: String,
    servable_digest: String,
    input: InputReference,
    requested_endpoint: Option<String>,
    assigned_endpoint: Option<String>,
    smoke: bool,
    status: TaskStatus,
    attempts: u32,
    leased_to: Option<String>,
    lease_expires_at: Millis,
    submitted_at: Millis,
    result: Option<ResultRef>,
    error_detail: Option<String>,
    history: Vec<Transition>,
    #[serde(skip)]
    result_data: Option<Arc<Vec<u8>>>,
}

impl TaskEntry {
    fn view(&self) -> TaskView {
        TaskView {
            task_id: self.task_id.clone(),
            model_identifier: self.model_identifier.clone(),
            status: self.status,
            attempts: self.attempts,
            requested_endpoint: self.requested_endpoint.clone(),
            assigned_endpoint: self.assigned_endpoint.clone(),
            leased_to: self.leased_to.clone(),
            smoke: self.smoke,
            submitted_at: self.submitted_at,
            result: self.result.clone(),
            error_detail: self.error_detail.clone(),
            history: self.history.clone(),
        }
    }

    fn transition(&mut self, status: TaskStatus, at: Millis, endpoint_id: Option<&str>) {
        self.status = status;
        self.history.push(Transition { status, at, endpoint_id: endpoint_id.map(str::to_string) });
    }

    fn holds_lease(&self, endpoint_id: &str) -> bool {
        matches!(self.status, TaskStatus::Leased | TaskStatus::Running) && self.leased_to.as_deref() == Some(endpoint_id)
    }
}

#[derive(Default)]
struct State {
    endpoints: BTreeMap<String, EndpointEntry>,
    tasks: BTreeMap<u64, TaskEntry>,
    by_id: HashMap<String, u64>,
    next_task: u64,
    next_endpoint: u64,
}

pub struct Broker {
    registry: Arc<dyn RegistryApi>,
    clock: Arc<dyn Clock>,
    config: BrokerConfig,
    state_dir: Option<PathBuf>,
    state: Mutex<State>,
}

impl Broker {
    pub fn new(registry: Arc<dyn RegistryApi>) -> Self {
        Self::with_clock(registry, Arc::new(SystemClock), BrokerConfig::default())
    }

    pub fn with_clock(registry: Arc<dyn RegistryApi>, clock: Arc<dyn Clock>, config: BrokerConfig) -> Self {
        Broker { registry, clock, config, state_dir: None, state: Mutex::new(State::default()) }
    }

    /// A broker whose endpoints, tasks and results survive restarts in `dir`.
    pub fn open(
        registry: Arc<dyn RegistryApi>,
        clock: Arc<dyn Clock>,
        config: BrokerConfig,
        dir: impl Into<PathBuf>,
    ) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("tasks"))?;
        fs::create_dir_all(dir.join("results"))?;
        let mut state = State::default();
        let endpoints_file = dir.join("endpoints.json");
        if endpoints_file.exists() {
            let eps: Vec<EndpointEntry> = serde_json::from_slice(&fs::read(&endpoints_file)?)
                .map_err(|e| FabricError::Internal(format!("{}: {e}", endpoints_file.display())))?;
            for ep in eps {
                state.next_endpoint = state.next_endpoint.max(parse_seq(&ep.endpoint_id) + 1);
                state.endpoints.insert(ep.endpoint_id.clone(), ep);
            }
        }
        for dirent in fs::read_dir(dir.join("tasks"))? {
            let path = dirent?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let mut task: TaskEntry = serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| FabricError::Internal(format!("{}: {e}", path.display())))?;
            if task.status == TaskStatus::Completed {
                let data = fs::read(dir.join("results").join(format!("{}.bin", task.task_id)))?;
                task.result_data = Some(Arc::new(data));
            }
            state.next_task = state.next_task.max(task.seq + 1);
            state.by_id.insert(task.task_id.clone(), task.seq);
            state.tasks.insert(task.seq, task);
        }
        Ok(Broker { registry, clock, config, state_dir: Some(dir), state: Mutex::new(state) })
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    fn persist_task(&self, task: &TaskEntry) -> Result<()> {
        let Some(dir) = &self.state_dir else { return Ok(()) };
        if let (TaskStatus::Completed, Some(data)) = (task.status, &task.result_data) {
            let path = dir.join("results").join(format!("{}.bin", task.task_id));
            if !path.exists() {
                atomic_write(&path, data)?;
            }
        }
        let bytes = serde_json::to_vec(task).map_err(|e| FabricError::Internal(e.to_string()))?;
        atomic_write(&dir.join("tasks").join(format!("{}.json", task.task_id)), &bytes)
    }

    fn persist_endpoints(&self, state: &State) -> Result<()> {
        let Some(dir) = &self.state_dir else { return Ok(()) };
        let eps: Vec<&EndpointEntry> = state.endpoints.values().collect();
        let bytes = serde_json::to_vec_pretty(&eps).map_err(|e| FabricError::Internal(e.to_string()))?;
        atomic_write(&dir.join("endpoints.json"), &bytes)
    }

    fn is_online(&self, ep: &EndpointEntry, now: Millis) -> bool {
        now.saturating_sub(ep.last_heartbeat) <= self.config.liveness_ms
    }

    /// Returns expired leases to `pending`.
    fn sweep(&self, state: &mut State, now: Millis) -> Result<()> {
        let mut expired = Vec::new();
        for task in state.tasks.values_mut() {
            if matches!(task.status, TaskStatus::Leased | TaskStatus::Running) && task.lease_expires_at <= now {
                tracing::debug!(task = %task.task_id, endpoint = ?task.leased_to, "lease expired");
                task.leased_to = None;
                task.attempts += 1;
                task.transition(TaskStatus::Pending, now, None);
                expired.push(task.seq);
            }
        }
        for seq in expired {
            self.persist_task(&state.tasks[&seq])?;
        }
        Ok(())
    }

    fn resolve_endpoint<'a>(state: &'a State, name_or_id: &str) -> Option<&'a EndpointEntry> {
        state.endpoints.get(name_or_id).or_else(|| state.endpoints.values().find(|e| e.name == name_or_id))
    }

    fn endpoint_info(&self, state: &State, ep: &EndpointEntry, now: Millis) -> EndpointInfo {
        let outstanding = state.tasks.values().filter(|t| t.holds_lease(&ep.endpoint_id)).count();
        EndpointInfo {
            endpoint_id: ep.endpoint_id.clone(),
            name: ep.name.clone(),
            profile: ep.profile,
            last_heartbeat: ep.last_heartbeat,
            state: if self.is_online(ep, now) { EndpointState::Online } else { EndpointState::Offline },
            outstanding,
        }
    }

    /// Online endpoint with the fewest leased-or-assigned tasks, ties by name.
    fn pick_endpoint(&self, state: &State, now: Millis) -> Option<String> {
        let mut load: HashMap<&str, usize> = HashMap::new();
        for t in state.tasks.values() {
            let owner = match t.status {
                TaskStatus::Leased | TaskStatus::Running => t.leased_to.as_deref(),
                TaskStatus::Pending if t.requested_endpoint.is_none() => t.assigned_endpoint.as_deref(),
                TaskStatus::Pending => t.requested_endpoint.as_deref(),
                _ => None,
            };
            if let Some(o) = owner {
                *load.entry(o).or_default() += 1;
            }
        }
        state
            .endpoints
            .values()
            .filter(|e| self.is_online(e, now))
            .min_by(|a, b| {
                let la = load.get(a.endpoint_id.as_str()).copied().unwrap_or(0);
                let lb = load.get(b.endpoint_id.as_str()).copied().unwrap_or(0);
                la.cmp(&lb).then_with(|| a.name.cmp(&b.name))
            })
            .map(|e| e.endpoint_id.clone())
    }

    fn task_mut<'a>(state: &'a mut State, task_id: &str) -> Result<&'a mut TaskEntry> {
        let seq = *state.by_id.get(task_id).ok_or_else(|| FabricError::NotFound(format!("no task {task_id}")))?;
        Ok(state.tasks.get_mut(&seq).expect("index is consistent"))
    }

    /// Checks the model and input against the registry and returns the
    /// servable digest to pin on the task.
    fn admit(&self, sub: &TaskSubmission) -> Result<String> {
        let doc = self.registry.get_metadata(&sub.model_identifier)?;
        if doc.state == EntryState::Withdrawn {
            return Err(FabricError::Gone(format!("model {} was withdrawn", sub.model_identifier)));
        }
        let model = match &doc.record {
            Record::Model(m) => m,
            Record::Dataset(_) => {
                return Err(FabricError::validation(format!("{} is a dataset, not a model", sub.model_identifier)));
            }
        };
        let (element_type, shape) = match &sub.input {
            InputReference::Inline { element_type, shape, data_base64 } => {
                if data_base64.len() / 4 * 3 > self.config.inline_cap {
                    return Err(FabricError::validation(format!(
                        "inline input exceeds the {} MiB cap; publish it as a dataset and reference a slice",
                        self.config.inline_cap >> 20
                    )));
                }
                let data = B64
                    .decode(data_base64)
                    .map_err(|e| FabricError::validation(format!("inline input is not valid base64: {e}")))?;
                Tensor::new(*element_type, shape.clone(), data).map_err(|e| FabricError::validation(e.to_string()))?;
                (*element_type, shape.clone())
            }
            InputReference::DatasetSlice { identifier, count, .. } => {
                let ds = self.registry.get_metadata(identifier)?;
                if ds.state == EntryState::Withdrawn {
                    return Err(FabricError::Gone(format!("dataset {identifier} was withdrawn")));
                }
                if ds.record.as_dataset().is_none() {
                    return Err(FabricError::validation(format!("{identifier} is not a dataset")));
                }
                if *count == 0 {
                    return Err(FabricError::validation("dataset slice must select at least one record"));
                }
                (ElementType::Float32, vec![*count, 1, 11, 11])
            }
        };
        model.input_signature.check(element_type, &shape).map_err(|e| FabricError::Validation {
            message: format!("input does not match the input signature {}: {e}", model.input_signature.describe()),
            violations: Vec::new(),
            bag_report: None,
        })?;
        model
            .servable_digest
            .clone()
            .ok_or_else(|| FabricError::Integrity(format!("model {} has no servable digest", sub.model_identifier)))
    }
}

fn parse_seq(id: &str) -> u64 {
    id.rsplit('-').next().and_then(|s| s.parse().ok()).unwrap_or(0)
}

fn atomic_write(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl BrokerApi for Broker {
    fn register_endpoint(&self, name: &str, profile: ExecutionProfile) -> Result<String> {
        if profile.worker_slots == 0 {
            return Err(FabricError::validation("worker_slots must be at least 1"));
        }
        if name.trim().is_empty() {
            return Err(FabricError::validation("endpoint name must not be empty"));
        }
        let now = self.clock.now_ms();
        let mut state = self.state.lock().expect("broker lock");
        if state.endpoints.values().any(|e| e.name == name) {
            return Err(FabricError::Conflict(format!("endpoint name {name} is taken")));
        }
        state.next_endpoint += 1;
        let id = format!("ep-{:04}", state.next_endpoint);
        state.endpoints.insert(
            id.clone(),
            EndpointEntry { endpoint_id: id.clone(), name: name.to_string(), profile, last_heartbeat: now },
        );
        self.persist_endpoints(&state)?;
        tracing::info!(endpoint = %id, name, precision = %profile.precision, slots = profile.worker_slots, "endpoint registered");
        Ok(id)
    }

    fn heartbeat(&self, endpoint_id: &str) -> Result<EndpointInfo> {
        let now = self.clock.now_ms();
        let mut state = self.state.lock().expect("broker lock");
        self.sweep(&mut state, now)?;
        let ep = state
            .endpoints
            .get_mut(endpoint_id)
            .ok_or_else(|| FabricError::NotFound(format!("no endpoint {endpoint_id}")))?;
        ep.last_heartbeat = now;
        let mut renewed = Vec::new();
        for t in state.tasks.values_mut() {
            if t.holds_lease(endpoint_id) {
                t.lease_expires_at = now + self.config.lease_ms;
                renewed.push(t.seq);
            }
        }
        for seq in renewed {
            self.persist_task(&state.tasks[&seq])?;
        }
        self.persist_endpoints(&state)?;
        let ep = &state.endpoints[endpoint_id];
        Ok(self.endpoint_info(&state, ep, now))
    }

    fn list_endpoints(&self) -> Result<Vec<EndpointInfo>> {
        let now = self.clock.now_ms();
        let mut state = self.state.lock().expect("broker lock");
        self.sweep(&mut state, now)?;
        Ok(state.endpoints.values().map(|e| self.endpoint_info(&state, e, now)).collect())
    }

    fn submit_task(&self, sub: TaskSubmission) -> Result<String> {
        let servable_digest = self.admit(&sub)?;
        let now = self.clock.now_ms();
        let mut state = self.state.lock().expect("broker lock");
        self.sweep(&mut state, now)?;
        let requested = match &sub.requested_endpoint {
            Some(r) => Some(
                Self::resolve_endpoint(&state, r)
                    .ok_or_else(|| FabricError::NotFound(format!("no endpoint {r}")))?
                    .endpoint_id
                    .clone(),
            ),
            None => None,
        };
        let assigned = match &requested {
            Some(r) => Some(r.clone()),
            None => self.pick_endpoint(&state, now),
        };
        let seq = state.next_task;
        state.next_task += 1;
        let task_id = format!("task-{seq:08}");
        let mut task = TaskEntry {
            seq,
            task_id: task_id.clone(),
            model_identifier: sub.model_identifier,
            servable_digest,
            input: sub.input,
            requested_endpoint: requested,
            assigned_endpoint: assigned,
            smoke: sub.smoke,
            status: TaskStatus::Pending,
            attempts: 0,
            leased_to: None,
            lease_expires_at: 0,
            submitted_at: now,
            result: None,
            error_detail: None,
            history: Vec::new(),
            result_data: None,
        };
        task.transition(TaskStatus::Pending, now, None);
        self.persist_task(&task)?;
        state.by_id.insert(task_id.clone(), seq);
        state.tasks.insert(seq, task);
        Ok(task_id)
    }

    fn lease_tasks(&self, endpoint_id: &str, max: usize) -> Result<Vec<LeasedTask>> {
        let now = self.clock.now_ms();
        let mut state = self.state.lock().expect("broker lock");
        self.sweep(&mut state, now)?;
        let ep = state.endpoints.get(endpoint_id).ok_or_else(|| FabricError::NotFound(format!("no endpoint {endpoint_id}")))?;
        if !self.is_online(ep, now) {
            return Err(FabricError::Unavailable(format!("endpoint {endpoint_id} is offline; send a heartbeat first")));
        }
        let online: HashMap<String, bool> =
            state.endpoints.values().map(|e| (e.endpoint_id.clone(), self.is_online(e, now))).collect();
        let mut leased = Vec::new();
        for task in state.tasks.values_mut() {
            if leased.len() >= max {
                break;
            }
            if task.status != TaskStatus::Pending {
                continue;
            }
            let eligible = match (&task.requested_endpoint, &task.assigned_endpoint) {
                (Some(r), _) => r == endpoint_id,
                (None, Some(a)) => a == endpoint_id || !online.get(a).copied().unwrap_or(false),
                (None, None) => true,
            };
            if !eligible {
                continue;
            }
            task.leased_to = Some(endpoint_id.to_string());
            task.lease_expires_at = now + self.config.lease_ms;
            task.transition(TaskStatus::Leased, now, Some(endpoint_id));
            leased.push(task.seq);
        }
        let mut out = Vec::with_capacity(leased.len());
        for seq in leased {
            let t = &state.tasks[&seq];
            self.persist_task(t)?;
            out.push(LeasedTask {
                task_id: t.task_id.clone(),
                model_identifier: t.model_identifier.clone(),
                servable_digest: t.servable_digest.clone(),
                input: t.input.clone(),
                attempt: t.attempts,
                lease_expires_at: t.lease_expires_at,
                smoke: t.smoke,
            });
        }
        Ok(out)
    }

    fn start_task(&self, endpoint_id: &str, task_id: &str) -> Result<TaskView> {
        let now = self.clock.now_ms();
        let mut state = self.state.lock().expect("broker lock");
        self.sweep(&mut state, now)?;
        let task = Self::task_mut(&mut state, task_id)?;
        if !task.holds_lease(endpoint_id) {
            return Err(FabricError::Forbidden(format!("task {task_id} is not leased to {endpoint_id}")));
        }
        if task.status == TaskStatus::Leased {
            task.transition(TaskStatus::Running, now, Some(endpoint_id));
        }
        let view = task.view();
        let task = task.clone();
        self.persist_task(&task)?;
        Ok(view)
    }

    fn report_result(&self, endpoint_id: &str, task_id: &str, outcome: TaskOutcome) -> Result<TaskView> {
        let now = self.clock.now_ms();
        let mut state = self.state.lock().expect("broker lock");
        self.sweep(&mut state, now)?;
        let task = Self::task_mut(&mut state, task_id)?;
        match (task.status, &outcome) {
            (TaskStatus::Completed, TaskOutcome::Success(t)) => {
                let digest = sha256_hex(&t.data);
                let stored = task.result.as_ref().map(|r| r.digest.as_str());
                return if stored == Some(digest.as_str()) {
                    Ok(task.view())
                } else {
                    Err(FabricError::Integrity(format!("task {task_id} already completed with a different result")))
                };
            }
            (TaskStatus::Failed, TaskOutcome::Failure(detail)) => {
                return if task.error_detail.as_deref() == Some(detail.as_str()) {
                    Ok(task.view())
                } else {
                    Err(FabricError::Integrity(format!("task {task_id} already failed with a different detail")))
                };
            }
            (TaskStatus::Completed | TaskStatus::Failed, _) => {
                return Err(FabricError::Integrity(format!("task {task_id} already has a different outcome")));
            }
            _ => {}
        }
        if !task.holds_lease(endpoint_id) {
            return Err(FabricError::Forbidden(format!("task {task_id} is not leased to {endpoint_id}")));
        }
        if task.status == TaskStatus::Leased {
            task.transition(TaskStatus::Running, now, Some(endpoint_id));
        }
        match outcome {
            TaskOutcome::Success(t) => {
                t.check_len().map_err(|e| FabricError::validation(e.to_string()))?;
                task.result = Some(ResultRef {
                    digest: sha256_hex(&t.data),
                    element_type: t.element_type,
                    shape: t.shape,
                    bytes: t.data.len() as u64,
                });
                task.result_data = Some(Arc::new(t.data));
                task.transition(TaskStatus::Completed, now, Some(endpoint_id));
            }
            TaskOutcome::Failure(detail) => {
                task.error_detail = Some(detail);
                task.transition(TaskStatus::Failed, now, Some(endpoint_id));
            }
        }
        task.leased_to = None;
        let view = task.view();
        let task = task.clone();
        self.persist_task(&task)?;
        Ok(view)
    }

    fn poll_task(&self, task_id: &str) -> Result<TaskView> {
        let now = self.clock.now_ms();
        let mut state = self.state.lock().expect("broker lock");
        self.sweep(&mut state, now)?;
        Ok(Self::task_mut(&mut state, task_id)?.view())
    }

    fn fetch_result(&self, task_id: &str) -> Result<Tensor> {
        let state = self.state.lock().expect("broker lock");
        let seq = state.by_id.get(task_id).ok_or_else(|| FabricError::NotFound(format!("no task {task_id}")))?;
        let task = &state.tasks[seq];
        match (&task.result, &task.result_data) {
            (Some(r), Some(data)) => Ok(Tensor { element_type: r.element_type, shape: r.shape.clone(), data: data.to_vec() }),
            _ => Err(FabricError::Conflict(format!("task {task_id} is {}, no result available", task.status.name()))),
        }
    }

    fn list_tasks(&self, include_smoke: bool) -> Result<Vec<TaskView>> {
        let now = self.clock.now_ms();
        let mut state = self.state.lock().expect("broker lock");
        self.sweep(&mut state, now)?;
        Ok(state.tasks.values().filter(|t| include_smoke || !t.smoke).map(TaskEntry::view).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::metadata::fixtures;
    use crate::peaks::Precision;
    use crate::registry::Registry;

    struct Fixture {
        _dir: tempfile::TempDir,
        registry: Arc<Registry>,
        clock: ManualClock,
        broker: Broker,
        model: String,
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(1_000_000);
        let registry = Arc::new(Registry::open_with_clock(dir.path().join("reg"), Arc::new(clock.clone())).unwrap());
        let blob = b"not executed in these tests".to_vec();
        let mut rec = fixtures::model();
        rec.servable_digest = Some(sha256_hex(&blob));
        let model = registry.publish_model(rec, &blob).unwrap();
        let broker = Broker::with_clock(registry.clone(), Arc::new(clock.clone()), BrokerConfig::default());
        Fixture { _dir: dir, registry, clock, broker, model }
    }

    fn patches(n: u64) -> InputReference {
        let t = Tensor::from_f32(vec![n, 1, 11, 11], &vec![1.0; n as usize * 121]).unwrap();
        InputReference::inline(&t)
    }

    fn profile() -> ExecutionProfile {
        ExecutionProfile::new(Precision::StrictF32, 2)
    }

    fn result(v: f32) -> TaskOutcome {
        TaskOutcome::Success(Tensor::from_f32(vec![1, 2], &[v, v]).unwrap())
    }

    #[test]
    fn endpoint_registration_and_liveness() {
        let f = fixture();
        let id = f.broker.register_endpoint("thetagpu-sim", ExecutionProfile::new(Precision::StrictF32, 4)).unwrap();
        assert_eq!(f.broker.list_endpoints().unwrap()[0].state, EndpointState::Online);
        assert!(matches!(f.broker.register_endpoint("thetagpu-sim", profile()), Err(FabricError::Conflict(_))));
        let zero = ExecutionProfile::new(Precision::StrictF32, 0);
        assert!(matches!(f.broker.register_endpoint("x", zero), Err(FabricError::Validation { .. })));
        f.clock.advance(DEFAULT_LIVENESS_MS);
        assert_eq!(f.broker.list_endpoints().unwrap()[0].state, EndpointState::Online);
        f.clock.advance(1);
        assert_eq!(f.broker.list_endpoints().unwrap()[0].state, EndpointState::Offline);
        assert!(matches!(f.broker.lease_tasks(&id, 1), Err(FabricError::Unavailable(_))));
        assert_eq!(f.broker.heartbeat(&id).unwrap().state, EndpointState::Online);
    }

    #[test]
    fn submission_guards() {
        let f = fixture();
        assert!(f.broker.submit_task(TaskSubmission::new(&f.model, patches(16384))).is_ok());
        let bad = Tensor::from_f32(vec![2, 1, 12, 11], &[0.0; 2 * 12 * 11]).unwrap();
        match f.broker.submit_task(TaskSubmission::new(&f.model, InputReference::inline(&bad))) {
            Err(FabricError::Validation { message, .. }) => assert!(message.contains("dimension 2"), "{message}"),
            other => panic!("{other:?}"),
        }
        let unknown = TaskSubmission::new("local-doi:10.99999/ffffffff", patches(1));
        assert!(matches!(f.broker.submit_task(unknown), Err(FabricError::NotFound(_))));
        let no_ep = TaskSubmission::new(&f.model, patches(1)).on("nowhere");
        assert!(matches!(f.broker.submit_task(no_ep), Err(FabricError::NotFound(_))));
        f.registry.withdraw(&f.model).unwrap();
        assert!(matches!(f.broker.submit_task(TaskSubmission::new(&f.model, patches(1))), Err(FabricError::Gone(_))));
    }

    #[test]
    fn inline_cap_is_enforced() {
        let f = fixture();
        let small = Broker::with_clock(
            f.registry.clone(),
            Arc::new(f.clock.clone()),
            BrokerConfig { inline_cap: 1000, ..Default::default() },
        );
        let err = small.submit_task(TaskSubmission::new(&f.model, patches(8))).unwrap_err();
        assert!(err.to_string().contains("cap"), "{err}");
    }

    #[test]
    fn lease_respects_max_and_expires() {
        let f = fixture();
        let ep = f.broker.register_endpoint("a", profile()).unwrap();
        let ids: Vec<String> =
            (0..3).map(|_| f.broker.submit_task(TaskSubmission::new(&f.model, patches(1))).unwrap()).collect();
        let leased = f.broker.lease_tasks(&ep, 2).unwrap();
        assert_eq!(leased.iter().map(|t| &t.task_id).collect::<Vec<_>>(), [&ids[0], &ids[1]]);
        assert_eq!(f.broker.poll_task(&ids[0]).unwrap().status, TaskStatus::Leased);
        assert_eq!(f.broker.poll_task(&ids[2]).unwrap().status, TaskStatus::Pending);

        // Heartbeats renew the lease; silence lets it lapse.
        f.clock.advance(DEFAULT_LEASE_MS - 1);
        f.broker.heartbeat(&ep).unwrap();
        f.clock.advance(DEFAULT_LEASE_MS - 1);
        assert_eq!(f.broker.poll_task(&ids[0]).unwrap().status, TaskStatus::Leased);
        f.clock.advance(1);
        let v = f.broker.poll_task(&ids[0]).unwrap();
        assert_eq!((v.status, v.attempts), (TaskStatus::Pending, 1));
        assert!(v.history_is_legal());
        // The stale lease holder can no longer report.
        assert!(matches!(f.broker.report_result(&ep, &ids[0], result(1.0)), Err(FabricError::Forbidden(_))));
    }

    #[test]
    fn results_are_write_once() {
        let f = fixture();
        let a = f.broker.register_endpoint("a", profile()).unwrap();
        let b = f.broker.register_endpoint("b", profile()).unwrap();
        let id = f.broker.submit_task(TaskSubmission::new(&f.model, patches(1)).on("a")).unwrap();
        assert!(f.broker.lease_tasks(&b, 5).unwrap().is_empty());
        assert_eq!(f.broker.lease_tasks(&a, 5).unwrap().len(), 1);
        assert!(matches!(f.broker.start_task(&b, &id), Err(FabricError::Forbidden(_))));
        f.broker.start_task(&a, &id).unwrap();
        assert!(matches!(f.broker.report_result(&b, &id, result(1.0)), Err(FabricError::Forbidden(_))));
        let first = f.broker.report_result(&a, &id, result(1.0)).unwrap();
        assert_eq!(first.status, TaskStatus::Completed);
        assert_eq!(f.broker.report_result(&a, &id, result(1.0)).unwrap(), first);
        assert!(matches!(f.broker.report_result(&a, &id, result(2.0)), Err(FabricError::Integrity(_))));
        let failure = TaskOutcome::Failure("boom".into());
        assert!(matches!(f.broker.report_result(&a, &id, failure), Err(FabricError::Integrity(_))));
        assert_eq!(f.broker.fetch_result(&id).unwrap().to_f32().unwrap(), [1.0, 1.0]);
        let polled = f.broker.poll_task(&id).unwrap();
        assert_eq!(polled, f.broker.poll_task(&id).unwrap());
        assert!(polled.history_is_legal());
        let statuses: Vec<TaskStatus> = polled.history.iter().map(|t| t.status).collect();
        assert_eq!(statuses, [TaskStatus::Pending, TaskStatus::Leased, TaskStatus::Running, TaskStatus::Completed]);
    }

    #[test]
    fn failures_carry_detail() {
        let f = fixture();
        let a = f.broker.register_endpoint("a", profile()).unwrap();
        let id = f.broker.submit_task(TaskSubmission::new(&f.model, patches(1))).unwrap();
        f.broker.lease_tasks(&a, 1).unwrap();
        let v = f.broker.report_result(&a, &id, TaskOutcome::Failure("timeout: 1s".into())).unwrap();
        assert_eq!(v.status, TaskStatus::Failed);
        assert_eq!(v.error_detail.as_deref(), Some("timeout: 1s"));
        assert!(v.history_is_legal());
        assert!(matches!(f.broker.fetch_result(&id), Err(FabricError::Conflict(_))));
    }

    #[test]
    fn assignment_prefers_least_loaded_then_name() {
        let f = fixture();
        let b = f.broker.register_endpoint("b", profile()).unwrap();
        let a = f.broker.register_endpoint("a", profile()).unwrap();
        let t1 = f.broker.submit_task(TaskSubmission::new(&f.model, patches(1))).unwrap();
        let t2 = f.broker.submit_task(TaskSubmission::new(&f.model, patches(1))).unwrap();
        assert_eq!(f.broker.poll_task(&t1).unwrap().assigned_endpoint.as_deref(), Some(a.as_str()));
        assert_eq!(f.broker.poll_task(&t2).unwrap().assigned_endpoint.as_deref(), Some(b.as_str()));
        // `a` only sees its own task while `b` is alive.
        let got: Vec<String> = f.broker.lease_tasks(&a, 5).unwrap().into_iter().map(|t| t.task_id).collect();
        assert_eq!(got, [t1]);
        // Once `b` goes quiet its assignment is up for grabs.
        f.clock.advance(DEFAULT_LIVENESS_MS + 1);
        f.broker.heartbeat(&a).unwrap();
        let got: Vec<String> = f.broker.lease_tasks(&a, 5).unwrap().into_iter().map(|t| t.task_id).collect();
        assert_eq!(got, [t2]);
    }

    #[test]
    fn smoke_tasks_are_filtered() {
        let f = fixture();
        f.broker.submit_task(TaskSubmission::new(&f.model, patches(1))).unwrap();
        f.broker.submit_task(TaskSubmission::new(&f.model, patches(1)).smoke()).unwrap();
        assert_eq!(f.broker.list_tasks(false).unwrap().len(), 1);
        assert_eq!(f.broker.list_tasks(true).unwrap().len(), 2);
    }

    #[test]
    fn state_survives_restart() {
        let f = fixture();
        let dir = f._dir.path().join("broker");
        let clock: Arc<dyn Clock> = Arc::new(f.clock.clone());
        let (ep, done, pending) = {
            let b = Broker::open(f.registry.clone(), clock.clone(), BrokerConfig::default(), &dir).unwrap();
            let ep = b.register_endpoint("a", profile()).unwrap();
            let done = b.submit_task(TaskSubmission::new(&f.model, patches(1))).unwrap();
            let pending = b.submit_task(TaskSubmission::new(&f.model, patches(1))).unwrap();
            b.lease_tasks(&ep, 1).unwrap();
            b.report_result(&ep, &done, result(3.0)).unwrap();
            (ep, done, pending)
        };
        let b = Broker::open(f.registry.clone(), clock, BrokerConfig::default(), &dir).unwrap();
        assert_eq!(b.poll_task(&done).unwrap().status, TaskStatus::Completed);
        assert_eq!(b.fetch_result(&done).unwrap().to_f32().unwrap(), [3.0, 3.0]);
        assert_eq!(b.poll_task(&pending).unwrap().status, TaskStatus::Pending);
        assert_eq!(b.list_endpoints().unwrap()[0].endpoint_id, ep);
        let next = b.submit_task(TaskSubmission::new(&f.model, patches(1))).unwrap();
        assert!(next != done && next != pending);
    }
}
