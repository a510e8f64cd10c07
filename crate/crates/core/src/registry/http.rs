use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{EntryDocument, Published, RegistryApi, SearchHit, SearchQuery};
use crate::error::{FabricError, Result};
use crate::http::{blocking, encode_segment, ApiResult, HttpClient, BODY_LIMIT};
use crate::metadata::{DatasetRecord, ModelRecord};

#[derive(Debug, Serialize, Deserialize)]
struct PublishModel {
    record: ModelRecord,
    servable_base64: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PublishDataset {
    record: DatasetRecord,
    bag_archive_base64: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct SearchParams {
    #[serde(default)]
    q: Option<String>,
    #[serde(default)]
    keyword: Option<String>,
    #[serde(default)]
    author: Option<String>,
    #[serde(default)]
    year: Option<i64>,
    #[serde(default)]
    minid: Option<String>,
}

fn decode_b64(field: &str, s: &str) -> Result<Vec<u8>> {
    B64.decode(s).map_err(|e| FabricError::validation(format!("{field} is not valid base64: {e}")))
}

type Shared = Arc<dyn RegistryApi>;

/// REST routes:
/// `POST /models`, `POST /datasets`, `GET /entries/{id}`,
/// `GET /entries/{id}/artifact`, `DELETE /entries/{id}/artifact`, `GET /search`.
pub fn registry_router(registry: Arc<dyn RegistryApi>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/models", post(publish_model))
        .route("/datasets", post(publish_dataset))
        .route("/entries/{id}", get(get_entry))
        .route("/entries/{id}/artifact", get(get_artifact).delete(withdraw))
        .route("/search", get(search))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(registry)
}

async fn publish_model(State(reg): State<Shared>, Json(body): Json<PublishModel>) -> ApiResult<impl IntoResponse> {
    let id = blocking(move || {
        let blob = decode_b64("servable_base64", &body.servable_base64)?;
        reg.publish_model(body.record, &blob)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(Published { identifier: id })))
}

async fn publish_dataset(State(reg): State<Shared>, Json(body): Json<PublishDataset>) -> ApiResult<impl IntoResponse> {
    let id = blocking(move || {
        let archive = decode_b64("bag_archive_base64", &body.bag_archive_base64)?;
        reg.publish_dataset(body.record, &archive)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(Published { identifier: id })))
}

async fn get_entry(State(reg): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<EntryDocument>> {
    Ok(Json(blocking(move || reg.get_metadata(&id)).await?))
}

async fn get_artifact(State(reg): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let bytes = blocking(move || reg.download_artifact(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes))
}

async fn withdraw(State(reg): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<EntryDocument>> {
    Ok(Json(blocking(move || reg.withdraw(&id)).await?))
}

async fn search(State(reg): State<Shared>, Query(p): Query<SearchParams>) -> ApiResult<Json<Vec<SearchHit>>> {
    let query = SearchQuery {
        terms: p.q.as_deref().map(|q| SearchQuery::text(q).terms).unwrap_or_default(),
        keyword: p.keyword,
        author: p.author,
        year: p.year,
        minid: p.minid,
    };
    Ok(Json(blocking(move || reg.search(&query)).await?))
}

/// Blocking HTTP client for a remote registry.
#[derive(Debug, Clone)]
pub struct RegistryClient {
    http: HttpClient,
}

impl RegistryClient {
    pub fn new(base_url: &str) -> Result<Self> {
        Ok(RegistryClient { http: HttpClient::new(base_url)? })
    }

    fn entry_url(&self, id: &str, suffix: &str) -> Result<url::Url> {
        self.http.url(&format!("entries/{}{suffix}", encode_segment(id)))
    }
}

impl RegistryApi for RegistryClient {
    fn publish_model(&self, record: ModelRecord, servable: &[u8]) -> Result<String> {
        let body = PublishModel { record, servable_base64: B64.encode(servable) };
        let p: Published = self.http.post_json(self.http.url("models")?, &body)?;
        Ok(p.identifier)
    }

    fn publish_dataset(&self, record: DatasetRecord, bag_archive: &[u8]) -> Result<String> {
        let body = PublishDataset { record, bag_archive_base64: B64.encode(bag_archive) };
        let p: Published = self.http.post_json(self.http.url("datasets")?, &body)?;
        Ok(p.identifier)
    }

    fn get_metadata(&self, identifier: &str) -> Result<EntryDocument> {
        self.http.get_json(self.entry_url(identifier, "")?)
    }

    fn download_artifact(&self, identifier: &str) -> Result<Vec<u8>> {
        let bytes = self.http.get_bytes(self.entry_url(identifier, "/artifact")?)?;
        let doc = self.get_metadata(identifier)?;
        let digest = crate::bag::sha256_hex(&bytes);
        if digest != doc.artifact_sha256 {
            return Err(FabricError::Integrity(format!(
                "downloaded artifact hashes to {digest}, registry records {}",
                doc.artifact_sha256
            )));
        }
        Ok(bytes)
    }

    fn withdraw(&self, identifier: &str) -> Result<EntryDocument> {
        self.http.delete_json(self.entry_url(identifier, "/artifact")?)
    }

    fn search(&self, query: &SearchQuery) -> Result<Vec<SearchHit>> {
        let mut url = self.http.url("search")?;
        {
            let mut pairs = url.query_pairs_mut();
            if !query.terms.is_empty() {
                pairs.append_pair("q", &query.terms.join(" "));
            }
            if let Some(k) = &query.keyword {
                pairs.append_pair("keyword", k);
            }
            if let Some(a) = &query.author {
                pairs.append_pair("author", a);
            }
            if let Some(y) = query.year {
                pairs.append_pair("year", &y.to_string());
            }
            if let Some(m) = &query.minid {
                pairs.append_pair("minid", m);
            }
        }
        self.http.get_json(url)
    }
}
