//! Fire-and-forget remote execution: a broker queues inference tasks against
//! published models, endpoints lease and run them as sandboxed servables and
//! report write-once results.

pub mod broker;
pub mod endpoint;
mod http;
pub mod protocol;
pub mod runner;
pub mod sandbox;
pub mod servable;

use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::error::Result;
use crate::metadata::ElementType;
use crate::peaks::Precision;

pub use broker::{Broker, BrokerConfig};
pub use endpoint::{EndpointConfig, EndpointWorker};
pub use http::{broker_router, BrokerClient};
pub use protocol::Tensor;
pub use sandbox::{execute_servable, ExecError, SandboxConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionProfile {
    pub precision: Precision,
    pub worker_slots: u32,
}

impl ExecutionProfile {
    pub fn new(precision: Precision, worker_slots: u32) -> Self {
        ExecutionProfile { precision, worker_slots }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointState {
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointInfo {
    pub endpoint_id: String,
    pub name: String,
    pub profile: ExecutionProfile,
    pub last_heartbeat: Millis,
    pub state: EndpointState,
    /// Tasks currently leased or running on this endpoint.
    pub outstanding: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Leased,
    Running,
    Completed,
    Failed,
}

impl TaskStatus {
    pub fn name(self) -> &'static str {
        match self {
            TaskStatus::Pending => "pending",
            TaskStatus::Leased => "leased",
            TaskStatus::Running => "running",
            TaskStatus::Completed => "completed",
            TaskStatus::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStatus::Completed | TaskStatus::Failed)
    }

    /// Legal single steps. `leased|running → pending` is lease expiry.
    pub fn can_follow(self, prev: TaskStatus) -> bool {
        use TaskStatus::*;
        matches!(
            (prev, self),
            (Pending, Leased)
                | (Leased, Running)
                | (Running, Completed)
                | (Running, Failed)
                | (Leased, Pending)
                | (Running, Pending)
        )
    }
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a task's input tensor comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputReference {
    Inline { element_type: ElementType, shape: Vec<u64>, data_base64: String },
    /// Records `start..start+count` of a BPK1 file inside a published dataset bag.
    DatasetSlice { identifier: String, path: String, start: u64, count: u64 },
}

impl InputReference {
    pub fn inline(t: &Tensor) -> Self {
        InputReference::Inline { element_type: t.element_type, shape: t.shape.clone(), data_base64: B64.encode(&t.data) }
    }

    pub fn describe(&self) -> String {
        match self {
            InputReference::Inline { element_type, shape, .. } => format!("inline {} {shape:?}", element_type.name()),
            InputReference::DatasetSlice { identifier, path, start, count } => {
                format!("{identifier}:{path}[{start}..{}]", start + count)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSubmission {
    pub model_identifier: String,
    pub input: InputReference,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requested_endpoint: Option<String>,
    /// Marks ephemeral probe tasks so they can be filtered from history.
    #[serde(default)]
    pub smoke: bool,
}

impl TaskSubmission {
    pub fn new(model_identifier: impl Into<String>, input: InputReference) -> Self {
        TaskSubmission { model_identifier: model_identifier.into(), input, requested_endpoint: None, smoke: false }
    }

    pub fn on(mut self, endpoint: impl Into<String>) -> Self {
        self.requested_endpoint = Some(endpoint.into());
        self
    }

    pub fn smoke(mut self) -> Self {
        self.smoke = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub status: TaskStatus,
    pub at: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultRef {
    pub digest: String,
    pub element_type: ElementType,
    pub shape: Vec<u64>,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub model_identifier: String,
    pub status: TaskStatus,
    pub attempts: u32,
    pub requested_endpoint: Option<String>,
    pub assigned_endpoint: Option<String>,
    pub leased_to: Option<String>,
    pub smoke: bool,
    pub submitted_at: Millis,
    pub result: Option<ResultRef>,
    pub error_detail: Option<String>,
    pub history: Vec<Transition>,
}

impl TaskView {
    /// Whether the recorded history is a legal walk of the lifecycle.
    pub fn history_is_legal(&self) -> bool {
        let mut it = self.history.iter().map(|t| t.status);
        if it.next() != Some(TaskStatus::Pending) {
            return false;
        }
        let mut prev = TaskStatus::Pending;
        for s in it {
            if !s.can_follow(prev) {
                return false;
            }
            prev = s;
        }
        prev == self.status && (self.result.is_some() == (self.status == TaskStatus::Completed))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeasedTask {
    pub task_id: String,
    pub model_identifier: String,
    pub servable_digest: String,
    pub input: InputReference,
    pub attempt: u32,
    pub lease_expires_at: Millis,
    pub smoke: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskOutcome {
    Success(Tensor),
    Failure(String),
}

/// Operations shared by the in-process broker and the HTTP client.
pub trait BrokerApi: Send + Sync {
    fn register_endpoint(&self, name: &str, profile: ExecutionProfile) -> Result<String>;
    fn heartbeat(&self, endpoint_id: &str) -> Result<EndpointInfo>;
    fn list_endpoints(&self) -> Result<Vec<EndpointInfo>>;
    fn submit_task(&self, submission: TaskSubmission) -> Result<String>;
    fn lease_tasks(&self, endpoint_id: &str, max: usize) -> Result<Vec<LeasedTask>>;
    fn start_task(&self, endpoint_id: &str, task_id: &str) -> Result<TaskView>;
    fn report_result(&self, endpoint_id: &str, task_id: &str, outcome: TaskOutcome) -> Result<TaskView>;
    fn poll_task(&self, task_id: &str) -> Result<TaskView>;
    fn fetch_result(&self, task_id: &str) -> Result<Tensor>;
    fn list_tasks(&self, include_smoke: bool) -> Result<Vec<TaskView>>;
}

/// Polls until the task reaches a terminal state or `timeout` passes.
pub fn wait_for(api: &dyn BrokerApi, task_id: &str, timeout: std::time::Duration) -> Result<TaskView> {
    let deadline = std::time::Instant::now() + timeout;
    let mut delay = std::time::Duration::from_millis(5);
    loop {
        let view = api.poll_task(task_id)?;
        if view.status.is_terminal() {
            return Ok(view);
        }
        if std::time::Instant::now() >= deadline {
            return Err(crate::error::FabricError::Unavailable(format!(
                "task {task_id} still {} after {timeout:?}",
                view.status
            )));
        }
        std::thread::sleep(delay);
        delay = (delay * 2).min(std::time::Duration::from_millis(200));
    }
}
