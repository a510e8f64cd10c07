//! Servable packaging: a deterministic tar holding `servable.json` plus
//! payload files (model weights, scripts).
//!
//! `entry` is the argv run inside the sandbox scratch directory. An
//! argument equal to `$RUNNER` is replaced by the endpoint's configured
//! runner executable, so archives carry weights but no host binaries.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bag::append_deterministic;
use crate::metadata::IoSignature;

pub const PROTOCOL_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "servable.json";
pub const RUNNER_PLACEHOLDER: &str = "$RUNNER";
const MAX_SERVABLE_BYTES: u64 = 512 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ServableError {
    #[error("servable archive: {0}")]
    Archive(String),
    #[error("servable manifest: {0}")]
    Manifest(String),
    #[error("servable i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServableManifest {
    pub protocol_version: u32,
    pub entry: Vec<String>,
    pub input_signature: IoSignature,
    pub output_signature: IoSignature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Servable {
    pub manifest: ServableManifest,
    pub files: BTreeMap<String, Vec<u8>>,
}

fn check_name(name: &str) -> Result<(), ServableError> {
    let ok = !name.is_empty()
        && !name.starts_with('/')
        && name.split('/').all(|seg| !seg.is_empty() && seg != "." && seg != "..")
        && !name.contains('\\');
    if ok {
        Ok(())
    } else {
        Err(ServableError::Archive(format!("illegal member name {name:?}")))
    }
}

impl Servable {
    pub fn new(manifest: ServableManifest, files: BTreeMap<String, Vec<u8>>) -> Result<Self, ServableError> {
        let s = Servable { manifest, files };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<(), ServableError> {
        if self.manifest.protocol_version != PROTOCOL_VERSION {
            return Err(ServableError::Manifest(format!(
                "protocol_version {} is not supported (expected {PROTOCOL_VERSION})",
                self.manifest.protocol_version
            )));
        }
        if self.manifest.entry.is_empty() {
            return Err(ServableError::Manifest("entry command is empty".into()));
        }
        for name in self.files.keys() {
            check_name(name)?;
            if name == MANIFEST_NAME {
                return Err(ServableError::Archive(format!("{MANIFEST_NAME} is reserved")));
            }
        }
        Ok(())
    }

    /// Deterministic archive bytes: manifest first, then files in name order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut builder = tar::Builder::new(Vec::new());
        let manifest = serde_json::to_vec_pretty(&crate::metadata::canonical_value(
            &serde_json::to_value(&self.manifest).expect("manifest serializes"),
        ))
        .expect("value serializes");
        append_deterministic(&mut builder, MANIFEST_NAME, &manifest).expect("in-memory tar");
        for (name, bytes) in &self.files {
            append_deterministic(&mut builder, name, bytes).expect("in-memory tar");
        }
        builder.into_inner().expect("in-memory tar")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ServableError> {
        let mut manifest = None;
        let mut files = BTreeMap::new();
        let mut ar = tar::Archive::new(bytes);
        let entries = ar.entries().map_err(|e| ServableError::Archive(e.to_string()))?;
        for entry in entries {
            let entry = entry.map_err(|e| ServableError::Archive(e.to_string()))?;
            if entry.header().entry_type() != tar::EntryType::Regular {
                return Err(ServableError::Archive("only regular files are allowed".into()));
            }
            let name = entry.path().map_err(|e| ServableError::Archive(e.to_string()))?.to_string_lossy().into_owned();
            check_name(&name)?;
            let mut data = Vec::new();
            entry.take(MAX_SERVABLE_BYTES).read_to_end(&mut data)?;
            if name == MANIFEST_NAME {
                let m: ServableManifest =
                    serde_json::from_slice(&data).map_err(|e| ServableError::Manifest(e.to_string()))?;
                manifest = Some(m);
            } else if files.insert(name.clone(), data).is_some() {
                return Err(ServableError::Archive(format!("duplicate member {name}")));
            }
        }
        let manifest = manifest.ok_or_else(|| ServableError::Manifest(format!("{MANIFEST_NAME} missing")))?;
        Servable::new(manifest, files)
    }

    pub fn unpack_into(&self, dir: &Path) -> Result<(), ServableError> {
        for (name, bytes) in &self.files {
            let target = dir.join(name);
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(target, bytes)?;
        }
        Ok(())
    }

    /// Entry argv with the runner placeholder substituted.
    pub fn command(&self, runner: &Path) -> Vec<String> {
        self.manifest
            .entry
            .iter()
            .map(|a| if a == RUNNER_PLACEHOLDER { runner.to_string_lossy().into_owned() } else { a.clone() })
            .collect()
    }
}
