use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{
    BrokerApi, EndpointInfo, ExecutionProfile, LeasedTask, Tensor, TaskOutcome, TaskSubmission, TaskView,
};
use crate::bag::sha256_hex;
use crate::error::{FabricError, Result};
use crate::http::{blocking, encode_segment, ApiResult, HttpClient, BODY_LIMIT};
use crate::metadata::ElementType;

#[derive(Debug, Serialize, Deserialize)]
struct RegisterEndpoint {
    name: String,
    profile: ExecutionProfile,
}

#[derive(Debug, Serialize, Deserialize)]
struct Registered {
    endpoint_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Submitted {
    task_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LeaseRequest {
    max: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct StartRequest {
    endpoint_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum WireOutcome {
    Success { element_type: ElementType, shape: Vec<u64>, data_base64: String },
    Failure { detail: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportRequest {
    endpoint_id: String,
    outcome: WireOutcome,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ListParams {
    #[serde(default)]
    include_smoke: bool,
}

impl From<&TaskOutcome> for WireOutcome {
    fn from(o: &TaskOutcome) -> Self {
        match o {
            TaskOutcome::Success(t) => WireOutcome::Success {
                element_type: t.element_type,
                shape: t.shape.clone(),
                data_base64: B64.encode(&t.data),
            },
            TaskOutcome::Failure(detail) => WireOutcome::Failure { detail: detail.clone() },
        }
    }
}

impl TryFrom<WireOutcome> for TaskOutcome {
    type Error = FabricError;

    fn try_from(w: WireOutcome) -> Result<Self> {
        Ok(match w {
            WireOutcome::Success { element_type, shape, data_base64 } => {
                let data = B64
                    .decode(data_base64)
                    .map_err(|e| FabricError::validation(format!("result is not valid base64: {e}")))?;
                TaskOutcome::Success(
                    Tensor::new(element_type, shape, data).map_err(|e| FabricError::validation(e.to_string()))?,
                )
            }
            WireOutcome::Failure { detail } => TaskOutcome::Failure(detail),
        })
    }
}

type Shared = Arc<dyn BrokerApi>;

/// REST routes:
/// `POST /endpoints`, `GET /endpoints`, `POST /endpoints/{id}/heartbeat`,
/// `POST /endpoints/{id}/lease`, `POST /tasks`, `GET /tasks`, `GET /tasks/{id}`,
/// `POST /tasks/{id}/start`, `GET|POST /tasks/{id}/result`.
pub fn broker_router(broker: Arc<dyn BrokerApi>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/endpoints", post(register).get(list_endpoints))
        .route("/endpoints/{id}/heartbeat", post(heartbeat))
        .route("/endpoints/{id}/lease", post(lease))
        .route("/tasks", post(submit).get(list_tasks))
        .route("/tasks/{id}", get(poll))
        .route("/tasks/{id}/start", post(start))
        .route("/tasks/{id}/result", get(fetch_result).post(report))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(broker)
}

async fn register(State(b): State<Shared>, Json(body): Json<RegisterEndpoint>) -> ApiResult<impl IntoResponse> {
    let endpoint_id = blocking(move || b.register_endpoint(&body.name, body.profile)).await?;
    Ok((StatusCode::CREATED, Json(Registered { endpoint_id })))
}

async fn list_endpoints(State(b): State<Shared>) -> ApiResult<Json<Vec<EndpointInfo>>> {
    Ok(Json(blocking(move || b.list_endpoints()).await?))
}

async fn heartbeat(State(b): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<EndpointInfo>> {
    Ok(Json(blocking(move || b.heartbeat(&id)).await?))
}

async fn lease(
    State(b): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<LeaseRequest>,
) -> ApiResult<Json<Vec<LeasedTask>>> {
    Ok(Json(blocking(move || b.lease_tasks(&id, body.max)).await?))
}

async fn submit(State(b): State<Shared>, Json(body): Json<TaskSubmission>) -> ApiResult<impl IntoResponse> {
    let task_id = blocking(move || b.submit_task(body)).await?;
    Ok((StatusCode::CREATED, Json(Submitted { task_id })))
}

async fn list_tasks(State(b): State<Shared>, Query(p): Query<ListParams>) -> ApiResult<Json<Vec<TaskView>>> {
    Ok(Json(blocking(move || b.list_tasks(p.include_smoke)).await?))
}

async fn poll(State(b): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<TaskView>> {
    Ok(Json(blocking(move || b.poll_task(&id)).await?))
}

async fn start(
    State(b): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<StartRequest>,
) -> ApiResult<Json<TaskView>> {
    Ok(Json(blocking(move || b.start_task(&body.endpoint_id, &id)).await?))
}

async fn fetch_result(State(b): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let t = blocking(move || b.fetch_result(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], t.data))
}

async fn report(
    State(b): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<ReportRequest>,
) -> ApiResult<Json<TaskView>> {
    Ok(Json(
        blocking(move || {
            let outcome = TaskOutcome::try_from(body.outcome)?;
            b.report_result(&body.endpoint_id, &id, outcome)
        })
        .await?,
    ))
}

/// Blocking HTTP client for a remote broker.
#[derive(Debug, Clone)]
pub struct BrokerClient {
    http: HttpClient,
}

impl BrokerClient {
    pub fn new(base_url: &str) -> Result<Self> {
        Ok(BrokerClient { http: HttpClient::new(base_url)? })
    }

    fn at(&self, path: &str) -> Result<url::Url> {
        self.http.url(path)
    }
}

impl BrokerApi for BrokerClient {
    fn register_endpoint(&self, name: &str, profile: ExecutionProfile) -> Result<String> {
        let r: Registered =
            self.http.post_json(self.at("endpoints")?, &RegisterEndpoint { name: name.to_string(), profile })?;
        Ok(r.endpoint_id)
    }

    fn heartbeat(&self, endpoint_id: &str) -> Result<EndpointInfo> {
        let url = self.at(&format!("endpoints/{}/heartbeat", encode_segment(endpoint_id)))?;
        self.http.post_json(url, &serde_json::json!({}))
    }

    fn list_endpoints(&self) -> Result<Vec<EndpointInfo>> {
        self.http.get_json(self.at("endpoints")?)
    }

    fn submit_task(&self, submission: TaskSubmission) -> Result<String> {
        let s: Submitted = self.http.post_json(self.at("tasks")?, &submission)?;
        Ok(s.task_id)
    }

    fn lease_tasks(&self, endpoint_id: &str, max: usize) -> Result<Vec<LeasedTask>> {
        let url = self.at(&format!("endpoints/{}/lease", encode_segment(endpoint_id)))?;
        self.http.post_json(url, &LeaseRequest { max })
    }

    fn start_task(&self, endpoint_id: &str, task_id: &str) -> Result<TaskView> {
        let url = self.at(&format!("tasks/{}/start", encode_segment(task_id)))?;
        self.http.post_json(url, &StartRequest { endpoint_id: endpoint_id.to_string() })
    }

    fn report_result(&self, endpoint_id: &str, task_id: &str, outcome: TaskOutcome) -> Result<TaskView> {
        let url = self.at(&format!("tasks/{}/result", encode_segment(task_id)))?;
        let body = ReportRequest { endpoint_id: endpoint_id.to_string(), outcome: WireOutcome::from(&outcome) };
        self.http.post_json(url, &body)
    }

    fn poll_task(&self, task_id: &str) -> Result<TaskView> {
        self.http.get_json(self.at(&format!("tasks/{}", encode_segment(task_id)))?)
    }

    fn fetch_result(&self, task_id: &str) -> Result<Tensor> {
        let view = self.poll_task(task_id)?;
        let data = self.http.get_bytes(self.at(&format!("tasks/{}/result", encode_segment(task_id)))?)?;
        let Some(r) = view.result else {
            return Err(FabricError::Conflict(format!("task {task_id} is {}, no result available", view.status)));
        };
        if sha256_hex(&data) != r.digest {
            return Err(FabricError::Integrity(format!("result of {task_id} does not match digest {}", r.digest)));
        }
        Tensor::new(r.element_type, r.shape, data).map_err(|e| FabricError::Integrity(e.to_string()))
    }

    fn list_tasks(&self, include_smoke: bool) -> Result<Vec<TaskView>> {
        let mut url = self.at("tasks")?;
        url.query_pairs_mut().append_pair("include_smoke", if include_smoke { "true" } else { "false" });
        self.http.get_json(url)
    }
}
