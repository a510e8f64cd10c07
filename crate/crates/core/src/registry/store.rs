//! File-backed registry store.
//!
//! Layout under the root:
//!
//! ```text
//! entries/<hex(identifier)>/entry.json    EntryDocument
//! entries/<hex(identifier)>/artifact.bin  servable blob or packed bag (absent once withdrawn)
//! staging/                                 scratch for atomic publishes
//! ```
//!
//! A publish is assembled in `staging/` and renamed into place, so an entry
//! is either fully visible or absent. The in-memory index is rebuilt by
//! scanning `entries/` on open.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use sha2::{Digest, Sha256};

use super::{EntryDocument, EntryState, RegistryApi, SearchHit, SearchQuery};
use crate::bag::{self, BagError};
use crate::clock::{Clock, SystemClock};
use crate::error::{FabricError, Result};
use crate::metadata::{canonical_json, DatasetRecord, ModelRecord, Record, IDENTIFIER_PREFIX, IDENTIFIER_TYPE};

const ENTRY_FILE: &str = "entry.json";
const ARTIFACT_FILE: &str = "artifact.bin";

pub struct Registry {
    root: PathBuf,
    clock: Arc<dyn Clock>,
    index: RwLock<BTreeMap<String, EntryDocument>>,
    writer: Mutex<()>,
}

fn io_ctx(path: &Path) -> impl Fn(std::io::Error) -> FabricError + '_ {
    move |e| FabricError::Io(format!("{}: {e}", path.display()))
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_ctx(path))?;
    f.write_all(bytes).map_err(io_ctx(path))?;
    f.sync_all().map_err(io_ctx(path))
}

fn entry_json(doc: &EntryDocument) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(&crate::metadata::canonical_value(
        &serde_json::to_value(doc).expect("entry serializes"),
    ))
    .expect("value serializes");
    v.push(b'\n');
    v
}

/// `local-doi:10.99999/` + the first 8 hex chars of sha256 over the
/// canonical record with identifier fields blanked.
pub fn mint_identifier(record: &Record) -> String {
    let mut blank = record.clone();
    blank.set_identifier(String::new(), None);
    let digest = hex::encode(Sha256::digest(canonical_json(&blank.to_value()).as_bytes()));
    format!("{IDENTIFIER_PREFIX}{}", &digest[..8])
}

fn assign_identifier(record: &mut Record) {
    if record.identifier().trim().is_empty() {
        let id = mint_identifier(record);
        record.set_identifier(id, Some(IDENTIFIER_TYPE.to_string()));
    }
}

fn check_record(record: &Record) -> Result<()> {
    let violations = record.violations();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(FabricError::Validation {
            message: format!("record has {} metadata violation(s)", violations.len()),
            violations,
            bag_report: None,
        })
    }
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

fn bag_error(e: BagError) -> FabricError {
    match e {
        BagError::Invalid(report) => FabricError::Validation {
            message: "bag failed validation".into(),
            violations: Vec::new(),
            bag_report: Some(report),
        },
        other => FabricError::validation(format!("bag rejected: {other}")),
    }
}

impl Registry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        Self::open_with_clock(root, Arc::new(SystemClock))
    }

    pub fn open_with_clock(root: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self> {
        let root = root.into();
        let entries = root.join("entries");
        let staging = root.join("staging");
        fs::create_dir_all(&entries).map_err(io_ctx(&entries))?;
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io_ctx(&staging))?;
        }
        fs::create_dir_all(&staging).map_err(io_ctx(&staging))?;

        let mut index = BTreeMap::new();
        for dirent in fs::read_dir(&entries).map_err(io_ctx(&entries))? {
            let path = dirent.map_err(io_ctx(&entries))?.path();
            let file = path.join(ENTRY_FILE);
            let doc: EntryDocument = match fs::read(&file).map_err(|e| e.to_string()).and_then(|b| {
                serde_json::from_slice(&b).map_err(|e| e.to_string())
            }) {
                Ok(doc) => doc,
                Err(e) => {
                    tracing::warn!(path = %file.display(), error = %e, "skipping unreadable registry entry");
                    continue;
                }
            };
            index.insert(doc.identifier().to_string(), doc);
        }
        tracing::debug!(root = %root.display(), entries = index.len(), "registry opened");
        Ok(Registry { root, clock, index: RwLock::new(index), writer: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Directory holding one entry's files.
    pub fn entry_dir(&self, identifier: &str) -> PathBuf {
        self.root.join("entries").join(hex::encode(identifier.as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("index lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Publishes a bag directory, as opposed to a packed archive.
    pub fn publish_dataset_dir(&self, record: DatasetRecord, bag_path: &Path) -> Result<String> {
        let report = bag::validate_bag(bag_path).map_err(bag_error)?;
        if !report.valid {
            return Err(bag_error(BagError::Invalid(report)));
        }
        let archive = bag::pack_bag(bag_path).map_err(bag_error)?;
        self.publish_dataset(record, &archive)
    }

    fn commit(&self, doc: EntryDocument, artifact: &[u8]) -> Result<String> {
        let id = doc.identifier().to_string();
        let _guard = self.writer.lock().expect("writer lock");
        if self.index.read().expect("index lock").contains_key(&id) {
            return Err(FabricError::Conflict(format!("identifier {id} is already registered")));
        }
        let target = self.entry_dir(&id);
        if target.exists() {
            return Err(FabricError::Conflict(format!("identifier {id} already has a store entry")));
        }
        let staging = self.root.join("staging");
        let tmp = tempfile::Builder::new().prefix("publish-").tempdir_in(&staging).map_err(io_ctx(&staging))?;
        write_synced(&tmp.path().join(ARTIFACT_FILE), artifact)?;
        write_synced(&tmp.path().join(ENTRY_FILE), &entry_json(&doc))?;
        let tmp_path = tmp.keep();
        if let Err(e) = fs::rename(&tmp_path, &target) {
            let _ = fs::remove_dir_all(&tmp_path);
            return Err(FabricError::Io(format!("commit {id}: {e}")));
        }
        self.index.write().expect("index lock").insert(id.clone(), doc);
        tracing::info!(identifier = %id, "published");
        Ok(id)
    }

    fn document(&self, identifier: &str) -> Result<EntryDocument> {
        self.index
            .read()
            .expect("index lock")
            .get(identifier)
            .cloned()
            .ok_or_else(|| FabricError::NotFound(format!("no entry {identifier}")))
    }
}

impl RegistryApi for Registry {
    fn publish_model(&self, record: ModelRecord, servable: &[u8]) -> Result<String> {
        let mut record = Record::Model(record);
        assign_identifier(&mut record);
        check_record(&record)?;
        let digest = bag::sha256_hex(servable);
        match record.as_model().and_then(|m| m.servable_digest.as_deref()) {
            Some(d) if d == digest => {}
            Some(d) => {
                return Err(FabricError::Integrity(format!("servable digest {digest} does not match record {d}")));
            }
            None => return Err(FabricError::Integrity("record has no servable_digest".into())),
        }
        let doc = EntryDocument {
            record,
            state: EntryState::Published,
            published_at: self.clock.now_ms(),
            withdrawn_at: None,
            artifact_sha256: digest,
        };
        self.commit(doc, servable)
    }

    fn publish_dataset(&self, record: DatasetRecord, bag_archive: &[u8]) -> Result<String> {
        let mut record = Record::Dataset(record);
        assign_identifier(&mut record);
        check_record(&record)?;
        let staging = self.root.join("staging");
        let tmp = tempfile::Builder::new().prefix("bag-").tempdir_in(&staging).map_err(io_ctx(&staging))?;
        let dir = tmp.path().join("bag");
        bag::unpack_bag(bag_archive, &dir).map_err(bag_error)?;
        let report = bag::validate_bag(&dir).map_err(bag_error)?;
        if !report.valid {
            return Err(bag_error(BagError::Invalid(report)));
        }
        let minid = bag::mint_minid(&dir).map_err(bag_error)?;
        let claimed = &record.as_dataset().expect("dataset record").minid;
        if minid.identifier != *claimed {
            return Err(FabricError::Integrity(format!("bag minid {minid} does not match record {claimed}")));
        }
        let archive = bag::pack_bag(&dir).map_err(bag_error)?;
        let doc = EntryDocument {
            record,
            state: EntryState::Published,
            published_at: self.clock.now_ms(),
            withdrawn_at: None,
            artifact_sha256: bag::sha256_hex(&archive),
        };
        self.commit(doc, &archive)
    }

    fn get_metadata(&self, identifier: &str) -> Result<EntryDocument> {
        self.document(identifier)
    }

    fn download_artifact(&self, identifier: &str) -> Result<Vec<u8>> {
        let doc = self.document(identifier)?;
        if doc.state == EntryState::Withdrawn {
            return Err(FabricError::Gone(format!("artifact of {identifier} was withdrawn")));
        }
        let path = self.entry_dir(identifier).join(ARTIFACT_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(match self.document(identifier)?.state {
                    EntryState::Withdrawn => FabricError::Gone(format!("artifact of {identifier} was withdrawn")),
                    EntryState::Published => FabricError::Integrity(format!("artifact of {identifier} is missing from the store")),
                });
            }
            Err(e) => return Err(io_ctx(&path)(e)),
        };
        let digest = bag::sha256_hex(&bytes);
        if digest != doc.artifact_sha256 {
            return Err(FabricError::Integrity(format!(
                "stored artifact of {identifier} hashes to {digest}, expected {}",
                doc.artifact_sha256
            )));
        }
        Ok(bytes)
    }

    fn withdraw(&self, identifier: &str) -> Result<EntryDocument> {
        let _guard = self.writer.lock().expect("writer lock");
        let mut doc = self.document(identifier)?;
        if doc.state == EntryState::Withdrawn {
            return Ok(doc);
        }
        doc.state = EntryState::Withdrawn;
        doc.withdrawn_at = Some(self.clock.now_ms());
        let dir = self.entry_dir(identifier);
        let tmp = dir.join(format!("{ENTRY_FILE}.tmp"));
        write_synced(&tmp, &entry_json(&doc))?;
        fs::rename(&tmp, dir.join(ENTRY_FILE)).map_err(io_ctx(&dir))?;
        let artifact = dir.join(ARTIFACT_FILE);
        match fs::remove_file(&artifact) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_ctx(&artifact)(e)),
        }
        self.index.write().expect("index lock").insert(identifier.to_string(), doc.clone());
        tracing::info!(identifier, "withdrawn");
        Ok(doc)
    }

    fn search(&self, query: &SearchQuery) -> Result<Vec<SearchHit>> {
        if query.is_empty() {
            return Err(FabricError::validation("a search needs at least one term or filter"));
        }
        let terms: Vec<String> = query.terms.iter().flat_map(|t| tokens(t).collect::<Vec<_>>()).collect();
        let index = self.index.read().expect("index lock");
        let mut hits = Vec::new();
        for (id, doc) in index.iter() {
            let r = &doc.record;
            if let Some(k) = &query.keyword {
                if !r.keywords().iter().any(|x| x.eq_ignore_ascii_case(k)) {
                    continue;
                }
            }
            if let Some(a) = &query.author {
                let a = a.to_lowercase();
                if !r.authors().iter().any(|x| x.name.to_lowercase().contains(&a)) {
                    continue;
                }
            }
            if query.year.is_some_and(|y| y != r.publication_year()) {
                continue;
            }
            if let Some(m) = &query.minid {
                if r.as_dataset().is_none_or(|d| &d.minid != m) {
                    continue;
                }
            }
            let score = if terms.is_empty() {
                0
            } else {
                let text = format!("{} {} {}", r.title(), r.description(), r.keywords().join(" "));
                let score = tokens(&text).filter(|t| terms.contains(t)).count() as u64;
                if score == 0 {
                    continue;
                }
                score
            };
            let resource_type = match r {
                Record::Model(_) => "model",
                Record::Dataset(_) => "dataset",
            };
            hits.push(SearchHit {
                identifier: id.clone(),
                title: r.title().to_string(),
                resource_type: resource_type.to_string(),
                state: doc.state,
                score,
            });
        }
        hits.sort_by(|a, b| b.score.cmp(&a.score).then_with(|| a.identifier.cmp(&b.identifier)));
        Ok(hits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::metadata::fixtures;
    use tempfile::TempDir;

    fn registry() -> (TempDir, Registry) {
        let tmp = TempDir::new().unwrap();
        let reg = Registry::open_with_clock(tmp.path(), Arc::new(ManualClock::new(1_700_000_000_000))).unwrap();
        (tmp, reg)
    }

    fn model_with(blob: &[u8], id: &str) -> ModelRecord {
        let mut m = fixtures::model();
        m.identifier = id.to_string();
        m.servable_digest = Some(bag::sha256_hex(blob));
        m
    }

    #[test]
    fn publish_get_download_withdraw() {
        let (_t, reg) = registry();
        let blob = b"servable bytes".to_vec();
        let id = reg.publish_model(model_with(&blob, ""), &blob).unwrap();
        assert!(id.starts_with("local-doi:10.99999/"));
        assert_eq!(id.len(), "local-doi:10.99999/".len() + 8);
        let doc = reg.get_metadata(&id).unwrap();
        assert_eq!(doc.state, EntryState::Published);
        assert_eq!(doc.record.as_model().unwrap().identifier_type.as_deref(), Some("local-doi"));
        assert_eq!(reg.download_artifact(&id).unwrap(), blob);
        assert_eq!(reg.download_artifact(&id).unwrap(), blob);

        let w = reg.withdraw(&id).unwrap();
        assert_eq!(w.state, EntryState::Withdrawn);
        assert_eq!(reg.withdraw(&id).unwrap(), w);
        assert!(matches!(reg.download_artifact(&id), Err(FabricError::Gone(_))));
        assert_eq!(reg.get_metadata(&id).unwrap().record, doc.record);
        assert!(!reg.entry_dir(&id).join(ARTIFACT_FILE).exists());
    }

    #[test]
    fn guards() {
        let (_t, reg) = registry();
        let blob = b"abc".to_vec();
        let rec = model_with(&blob, "");
        assert!(matches!(reg.publish_model(rec.clone(), b"abd"), Err(FabricError::Integrity(_))));
        assert!(reg.is_empty());
        reg.publish_model(rec.clone(), &blob).unwrap();
        assert!(matches!(reg.publish_model(rec, &blob), Err(FabricError::Conflict(_))));
        assert!(matches!(reg.get_metadata("local-doi:10.99999/00000000"), Err(FabricError::NotFound(_))));
        assert!(matches!(reg.withdraw("nope"), Err(FabricError::NotFound(_))));

        let mut bad = model_with(&blob, "x");
        bad.title.clear();
        match reg.publish_model(bad, &blob) {
            Err(FabricError::Validation { violations, .. }) => assert!(violations.iter().any(|v| v.field == "title")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn caller_identifier_is_honored() {
        let (_t, reg) = registry();
        let blob = b"abc".to_vec();
        let id = reg.publish_model(model_with(&blob, "local-doi:10.99999/custom01"), &blob).unwrap();
        assert_eq!(id, "local-doi:10.99999/custom01");
    }

    #[test]
    fn survives_restart() {
        let tmp = TempDir::new().unwrap();
        let (a, b) = {
            let reg = Registry::open(tmp.path()).unwrap();
            let a = reg.publish_model(model_with(b"1", "local-doi:10.99999/a"), b"1").unwrap();
            let b = reg.publish_model(model_with(b"2", "local-doi:10.99999/b"), b"2").unwrap();
            reg.withdraw(&b).unwrap();
            (reg.get_metadata(&a).unwrap(), reg.get_metadata(&b).unwrap())
        };
        let reg = Registry::open(tmp.path()).unwrap();
        assert_eq!(reg.get_metadata(a.identifier()).unwrap(), a);
        assert_eq!(reg.get_metadata(b.identifier()).unwrap(), b);
        assert_eq!(reg.download_artifact(a.identifier()).unwrap(), b"1");
        assert!(matches!(reg.download_artifact(b.identifier()), Err(FabricError::Gone(_))));
    }

    #[test]
    fn dataset_publish_checks_bag_and_minid() {
        let (tmp, reg) = registry();
        let src = tmp.path().join("src");
        fs::create_dir_all(&src).unwrap();
        fs::write(src.join("p.bin"), b"patches").unwrap();
        let bag_dir = tmp.path().join("bag");
        bag::create_bag(&src, &bag_dir, bag::ChecksumAlgorithm::Sha256, &Default::default()).unwrap();
        let minid = bag::mint_minid(&bag_dir).unwrap();

        let mut rec = fixtures::dataset();
        rec.identifier.clear();
        rec.minid = "minid:aaaaaaaaaaaa".into();
        assert!(matches!(reg.publish_dataset_dir(rec.clone(), &bag_dir), Err(FabricError::Integrity(_))));

        rec.minid = minid.identifier.clone();
        let id = reg.publish_dataset_dir(rec.clone(), &bag_dir).unwrap();
        let archive = reg.download_artifact(&id).unwrap();
        let out = tmp.path().join("out");
        bag::unpack_bag(&archive, &out).unwrap();
        assert_eq!(bag::mint_minid(&out).unwrap(), minid);

        fs::write(bag_dir.join("data/p.bin"), b"patchez").unwrap();
        rec.title = "other".into();
        match reg.publish_dataset_dir(rec, &bag_dir) {
            Err(FabricError::Validation { bag_report: Some(r), .. }) => {
                assert_eq!(r.corrupted_files[0].path, "data/p.bin");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn search_scores_and_orders() {
        let (_t, reg) = registry();
        let mut a = model_with(b"a", "local-doi:10.99999/bbbb");
        a.title = "Bragg peak locator".into();
        a.keywords = vec!["xray".into(), "peaks".into()];
        let mut b = model_with(b"b", "local-doi:10.99999/aaaa");
        b.title = "Another model".into();
        b.description = "bragg bragg bragg".into();
        b.keywords = vec!["xray".into()];
        reg.publish_model(a, b"a").unwrap();
        reg.publish_model(b, b"b").unwrap();
        reg.withdraw("local-doi:10.99999/aaaa").unwrap();

        let hits = reg.search(&SearchQuery::text("Bragg peak locator")).unwrap();
        assert_eq!(hits[0].identifier, "local-doi:10.99999/bbbb");

        let hits = reg.search(&SearchQuery { keyword: Some("XRAY".into()), ..Default::default() }).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.identifier.as_str()).collect();
        assert_eq!(ids, ["local-doi:10.99999/aaaa", "local-doi:10.99999/bbbb"]);
        assert_eq!(hits[0].state, EntryState::Withdrawn);

        assert!(reg.search(&SearchQuery { keyword: Some("none".into()), ..Default::default() }).unwrap().is_empty());
        assert!(reg.search(&SearchQuery::default()).is_err());
    }

    #[test]
    fn concurrent_same_identifier_has_one_winner() {
        let (_t, reg) = registry();
        let reg = Arc::new(reg);
        let results: Vec<Result<String>> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..8)
                .map(|_| {
                    let reg = reg.clone();
                    s.spawn(move || reg.publish_model(model_with(b"x", "local-doi:10.99999/same"), b"x"))
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
        assert!(results.iter().filter(|r| r.is_err()).all(|r| matches!(r, Err(FabricError::Conflict(_)))));
    }
}
