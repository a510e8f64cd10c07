//! Publication service for models and datasets: identifier minting,
//! metadata and artifact retrieval, search, and tombstones.

mod http;
mod store;

use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::error::Result;
use crate::metadata::{DatasetRecord, ModelRecord, Record};

pub use http::{registry_router, RegistryClient};
pub use store::{mint_identifier, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryState {
    Published,
    Withdrawn,
}

/// What `GET /entries/{id}` returns: the full record plus lifecycle state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryDocument {
    pub record: Record,
    pub state: EntryState,
    pub published_at: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub withdrawn_at: Option<Millis>,
    /// sha256 of the stored artifact bytes (servable blob, or bag archive).
    pub artifact_sha256: String,
}

impl EntryDocument {
    pub fn identifier(&self) -> &str {
        self.record.identifier()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchQuery {
    #[serde(default)]
    pub terms: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minid: Option<String>,
}

impl SearchQuery {
    pub fn text(q: &str) -> Self {
        SearchQuery { terms: q.split_whitespace().map(str::to_string).collect(), ..Default::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.iter().all(|t| t.trim().is_empty())
            && self.keyword.is_none()
            && self.author.is_none()
            && self.year.is_none()
            && self.minid.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub identifier: String,
    pub title: String,
    pub resource_type: String,
    pub state: EntryState,
    pub score: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Published {
    pub identifier: String,
}

/// Operations shared by the in-process store and the HTTP client.
pub trait RegistryApi: Send + Sync {
    fn publish_model(&self, record: ModelRecord, servable: &[u8]) -> Result<String>;
    /// `bag_archive` is a bag packed with [`crate::bag::pack_bag`].
    fn publish_dataset(&self, record: DatasetRecord, bag_archive: &[u8]) -> Result<String>;
    fn get_metadata(&self, identifier: &str) -> Result<EntryDocument>;
    fn download_artifact(&self, identifier: &str) -> Result<Vec<u8>>;
    fn withdraw(&self, identifier: &str) -> Result<EntryDocument>;
    fn search(&self, query: &SearchQuery) -> Result<Vec<SearchHit>>;
}
