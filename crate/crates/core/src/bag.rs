//! BagIt-style dataset packages with checksum manifests and content-derived
//! identifiers.
//!
//! On-disk layout (BagIt 1.0 structural subset):
//!
//! ```text
//! <bag>/bagit.txt             BagIt-Version + Tag-File-Character-Encoding
//! <bag>/bag-info.txt          "Key: Value" lines
//! <bag>/manifest-<alg>.txt    "<hex digest>  <path>\n", sorted byte-wise by path
//! <bag>/fetch.txt             optional, "<url>\t<length>\t<path>\n"
//! <bag>/data/...              payload
//! ```
//!
//! Remote entries listed in `fetch.txt` also appear in the manifest, so a
//! "holey" bag validates while they are absent locally and is checked
//! against its digest once the file is fetched.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256, Sha512};
use walkdir::WalkDir;

pub const BAGIT_TXT: &str = "BagIt-Version: 1.0\nTag-File-Character-Encoding: UTF-8\n";
pub const MINID_PREFIX: &str = "minid:";

#[derive(Debug, thiserror::Error)]
pub enum BagError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed bag: {0}")]
    Structure(String),
    #[error("symbolic link rejected: {0}")]
    SymlinkRejected(PathBuf),
    #[error("bag failed validation")]
    Invalid(ValidationReport),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BagError + '_ {
    move |source| BagError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ChecksumAlgorithm {
    #[default]
    Sha256,
    Sha512,
}

impl ChecksumAlgorithm {
    pub fn name(self) -> &'static str {
        match self {
            ChecksumAlgorithm::Sha256 => "sha256",
            ChecksumAlgorithm::Sha512 => "sha512",
        }
    }

    pub fn hex_len(self) -> usize {
        match self {
            ChecksumAlgorithm::Sha256 => 64,
            ChecksumAlgorithm::Sha512 => 128,
        }
    }

    pub fn manifest_name(self) -> String {
        format!("manifest-{}.txt", self.name())
    }

    fn hasher(self) -> Hasher {
        match self {
            ChecksumAlgorithm::Sha256 => Hasher::Sha256(Sha256::new()),
            ChecksumAlgorithm::Sha512 => Hasher::Sha512(Sha512::new()),
        }
    }

    /// Hex digest of an in-memory buffer.
    pub fn digest_bytes(self, bytes: &[u8]) -> String {
        let mut h = self.hasher();
        h.update(bytes);
        h.finish()
    }

    pub fn digest_file(self, path: &Path) -> Result<(u64, String), BagError> {
        let mut file = File::open(path).map_err(io_err(path))?;
        let mut h = self.hasher();
        let mut buf = vec![0u8; 64 * 1024];
        let mut len = 0u64;
        loop {
            let n = file.read(&mut buf).map_err(io_err(path))?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
            len += n as u64;
        }
        Ok((len, h.finish()))
    }

    pub fn is_valid_digest(self, digest: &str) -> bool {
        digest.len() == self.hex_len() && digest.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
    }
}

impl FromStr for ChecksumAlgorithm {
    type Err = BagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "" => Err(BagError::Config("checksum algorithm must not be empty".into())),
            "sha256" => Ok(ChecksumAlgorithm::Sha256),
            "sha512" => Ok(ChecksumAlgorithm::Sha512),
            other => Err(BagError::Config(format!("unsupported checksum algorithm `{other}`"))),
        }
    }
}

enum Hasher {
    Sha256(Sha256),
    Sha512(Sha512),
}

impl Hasher {
    fn update(&mut self, bytes: &[u8]) {
        match self {
            Hasher::Sha256(h) => h.update(bytes),
            Hasher::Sha512(h) => h.update(bytes),
        }
    }

    fn finish(self) -> String {
        match self {
            Hasher::Sha256(h) => hex::encode(h.finalize()),
            Hasher::Sha512(h) => hex::encode(h.finalize()),
        }
    }
}

/// Lowercase hex sha256 of a buffer.
pub fn sha256_hex(bytes: &[u8]) -> String {
    ChecksumAlgorithm::Sha256.digest_bytes(bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadEntry {
    pub path: String,
    pub length: u64,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteEntry {
    pub url: String,
    pub length: u64,
    pub digest: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub root: PathBuf,
    pub payload_entries: Vec<PayloadEntry>,
    pub bag_info: BTreeMap<String, String>,
    pub remote_entries: Vec<RemoteEntry>,
    pub checksum_algorithm: ChecksumAlgorithm,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Minid {
    pub identifier: String,
    pub source_digest: String,
}

impl fmt::Display for Minid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.identifier)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedFile {
    pub path: String,
    pub expected: String,
    pub actual: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ValidationReport {
    pub valid: bool,
    pub missing_files: Vec<String>,
    pub corrupted_files: Vec<CorruptedFile>,
    pub extra_files: Vec<String>,
}

impl ValidationReport {
    fn finalize(mut self) -> Self {
        self.missing_files.sort();
        self.extra_files.sort();
        self.corrupted_files.sort_by(|a, b| a.path.cmp(&b.path));
        self.valid = self.missing_files.is_empty() && self.corrupted_files.is_empty() && self.extra_files.is_empty();
        self
    }
}

/// Checks the payload path rules: `data/` prefix, no empty, `.` or `..` segments.
pub fn check_payload_path(path: &str) -> Result<(), BagError> {
    let rest = path
        .strip_prefix("data/")
        .ok_or_else(|| BagError::InvalidEntry(format!("`{path}` is not under data/")))?;
    if rest.is_empty() || rest.split('/').any(|seg| seg.is_empty() || seg == "." || seg == "..") {
        return Err(BagError::InvalidEntry(format!("`{path}` has an empty or relative segment")));
    }
    Ok(())
}

// BagIt requires CR, LF and % to be percent-encoded in manifest paths.
fn encode_manifest_path(path: &str) -> String {
    path.replace('%', "%25").replace('\n', "%0A").replace('\r', "%0D")
}

fn decode_manifest_path(path: &str) -> String {
    path.replace("%0A", "\n").replace("%0a", "\n").replace("%0D", "\r").replace("%0d", "\r").replace("%25", "%")
}

/// Manifest bytes for the given entries: sorted byte-wise by path, LF-only.
pub fn canonical_manifest<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut lines: Vec<(&str, &str)> = entries.into_iter().collect();
    lines.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    let mut out = String::new();
    for (path, digest) in lines {
        out.push_str(digest);
        out.push_str("  ");
        out.push_str(&encode_manifest_path(path));
        out.push('\n');
    }
    out
}

/// Copies `source_dir` into a new bag at `dest` and writes the tag files.
///
/// `dest` must not exist or must be an empty directory. Symbolic links
/// anywhere under `source_dir` are rejected before anything is written.
pub fn create_bag(
    source_dir: &Path,
    dest: &Path,
    algorithm: ChecksumAlgorithm,
    info: &BTreeMap<String, String>,
) -> Result<Bag, BagError> {
    let meta = fs::symlink_metadata(source_dir).map_err(io_err(source_dir))?;
    if meta.file_type().is_symlink() {
        return Err(BagError::SymlinkRejected(source_dir.to_path_buf()));
    }
    if !meta.is_dir() {
        return Err(BagError::Config(format!("{} is not a directory", source_dir.display())));
    }

    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in WalkDir::new(source_dir).follow_links(false).min_depth(1) {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(source_dir).to_path_buf();
            BagError::Io { path, source: e.into() }
        })?;
        let ft = entry.file_type();
        if ft.is_symlink() {
            return Err(BagError::SymlinkRejected(entry.path().to_path_buf()));
        }
        if !ft.is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(source_dir).expect("walkdir yields children of its root");
        let rel = rel
            .to_str()
            .ok_or_else(|| BagError::InvalidEntry(format!("non UTF-8 path {}", rel.display())))?
            .replace(std::path::MAIN_SEPARATOR, "/");
        let bag_path = format!("data/{rel}");
        check_payload_path(&bag_path)?;
        files.push((bag_path, entry.path().to_path_buf()));
    }
    files.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));

    if dest.exists() {
        let mut it = fs::read_dir(dest).map_err(io_err(dest))?;
        if it.next().is_some() {
            return Err(BagError::Config(format!("destination {} is not empty", dest.display())));
        }
    }
    let data_dir = dest.join("data");
    fs::create_dir_all(&data_dir).map_err(io_err(&data_dir))?;

    let mut payload_entries = Vec::with_capacity(files.len());
    for (bag_path, src) in &files {
        let target = dest.join(bag_path);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let (length, digest) = copy_and_digest(src, &target, algorithm)?;
        payload_entries.push(PayloadEntry { path: bag_path.clone(), length, digest });
    }

    let mut bag_info = info.clone();
    bag_info
        .entry("Bagging-Date".to_string())
        .or_insert_with(|| chrono::Utc::now().format("%Y-%m-%d").to_string());
    let total: u64 = payload_entries.iter().map(|e| e.length).sum();
    bag_info.insert("Payload-Oxum".to_string(), format!("{total}.{}", payload_entries.len()));

    write_file(&dest.join("bagit.txt"), BAGIT_TXT.as_bytes())?;
    write_file(&dest.join("bag-info.txt"), render_bag_info(&bag_info)?.as_bytes())?;
    let manifest = canonical_manifest(payload_entries.iter().map(|e| (e.path.as_str(), e.digest.as_str())));
    write_file(&dest.join(algorithm.manifest_name()), manifest.as_bytes())?;

    Ok(Bag {
        root: dest.to_path_buf(),
        payload_entries,
        bag_info,
        remote_entries: Vec::new(),
        checksum_algorithm: algorithm,
    })
}

fn copy_and_digest(src: &Path, dst: &Path, algorithm: ChecksumAlgorithm) -> Result<(u64, String), BagError> {
    let mut input = File::open(src).map_err(io_err(src))?;
    let mut out = BufWriter::new(File::create(dst).map_err(io_err(dst))?);
    let mut h = algorithm.hasher();
    let mut buf = vec![0u8; 64 * 1024];
    let mut len = 0u64;
    loop {
        let n = input.read(&mut buf).map_err(io_err(src))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        out.write_all(&buf[..n]).map_err(io_err(dst))?;
        len += n as u64;
    }
    out.flush().map_err(io_err(dst))?;
    Ok((len, h.finish()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), BagError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn render_bag_info(info: &BTreeMap<String, String>) -> Result<String, BagError> {
    let mut out = String::new();
    for (k, v) in info {
        if k.is_empty() || k.contains(':') || k.contains('\n') || v.contains('\n') {
            return Err(BagError::Config(format!("bag-info entry `{k}` cannot be written as a tag line")));
        }
        out.push_str(&format!("{k}: {v}\n"));
    }
    Ok(out)
}

fn parse_bag_info(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|line| line.split_once(':'))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Manifests present in the bag, sha256 first.
fn manifests(bag_path: &Path) -> Vec<(ChecksumAlgorithm, PathBuf)> {
    [ChecksumAlgorithm::Sha256, ChecksumAlgorithm::Sha512]
        .into_iter()
        .map(|alg| (alg, bag_path.join(alg.manifest_name())))
        .filter(|(_, p)| p.is_file())
        .collect()
}

fn parse_manifest(path: &Path, algorithm: ChecksumAlgorithm) -> Result<Vec<(String, String)>, BagError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (digest, rel) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| BagError::Structure(format!("{}:{}: expected `<digest>  <path>`", path.display(), lineno + 1)))?;
        let rel = decode_manifest_path(rel.trim_start());
        if !algorithm.is_valid_digest(digest) {
            return Err(BagError::Structure(format!(
                "{}:{}: `{digest}` is not a lowercase {} digest",
                path.display(),
                lineno + 1,
                algorithm.name()
            )));
        }
        check_payload_path(&rel).map_err(|e| BagError::Structure(e.to_string()))?;
        if !seen.insert(rel.clone()) {
            return Err(BagError::Structure(format!("{}: duplicate path `{rel}`", path.display())));
        }
        out.push((rel, digest.to_string()));
    }
    Ok(out)
}

fn parse_fetch(bag_path: &Path) -> Result<Vec<(String, u64, String)>, BagError> {
    let path = bag_path.join("fetch.txt");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let [url, length, target] = parts[..] else {
            return Err(BagError::Structure(format!("fetch.txt:{}: expected three tab-separated fields", lineno + 1)));
        };
        let length = length
            .parse()
            .map_err(|_| BagError::Structure(format!("fetch.txt:{}: bad length `{length}`", lineno + 1)))?;
        check_payload_path(target).map_err(|e| BagError::Structure(e.to_string()))?;
        out.push((url.to_string(), length, target.to_string()));
    }
    Ok(out)
}

fn require_structure(bag_path: &Path) -> Result<Vec<(ChecksumAlgorithm, PathBuf)>, BagError> {
    if !bag_path.join("bagit.txt").is_file() {
        return Err(BagError::Structure(format!("{} has no bagit.txt", bag_path.display())));
    }
    let found = manifests(bag_path);
    if found.is_empty() {
        return Err(BagError::Structure(format!("{} has no payload manifest", bag_path.display())));
    }
    Ok(found)
}

/// Loads a bag's declared contents from its tag files without checking payload.
pub fn open_bag(bag_path: &Path) -> Result<Bag, BagError> {
    let found = require_structure(bag_path)?;
    let (algorithm, manifest_path) = found[0].clone();
    let entries = parse_manifest(&manifest_path, algorithm)?;
    let fetch = parse_fetch(bag_path)?;
    let digests: BTreeMap<&str, &str> = entries.iter().map(|(p, d)| (p.as_str(), d.as_str())).collect();
    let remote_entries = fetch
        .iter()
        .map(|(url, length, target)| {
            let digest = digests
                .get(target.as_str())
                .ok_or_else(|| BagError::Structure(format!("fetch target `{target}` is missing from the manifest")))?;
            Ok(RemoteEntry { url: url.clone(), length: *length, digest: digest.to_string(), target: target.clone() })
        })
        .collect::<Result<Vec<_>, BagError>>()?;
    let remote_targets: BTreeSet<&str> = fetch.iter().map(|(_, _, t)| t.as_str()).collect();
    let mut payload_entries = Vec::new();
    for (path, digest) in &entries {
        if remote_targets.contains(path.as_str()) {
            continue;
        }
        let length = fs::metadata(bag_path.join(path)).map(|m| m.len()).unwrap_or(0);
        payload_entries.push(PayloadEntry { path: path.clone(), length, digest: digest.clone() });
    }
    let info_path = bag_path.join("bag-info.txt");
    let bag_info = match fs::read_to_string(&info_path) {
        Ok(text) => parse_bag_info(&text),
        Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeMap::new(),
        Err(e) => return Err(BagError::Io { path: info_path, source: e }),
    };
    Ok(Bag { root: bag_path.to_path_buf(), payload_entries, bag_info, remote_entries, checksum_algorithm: algorithm })
}

/// Recomputes every payload digest and reports each mismatch. Read-only.
///
/// A missing manifest or `bagit.txt` is a structural error, not a failed
/// validation. Remote entries that are absent locally are not missing.
pub fn validate_bag(bag_path: &Path) -> Result<ValidationReport, BagError> {
    let found = require_structure(bag_path)?;
    let remote: BTreeSet<String> = parse_fetch(bag_path)?.into_iter().map(|(_, _, t)| t).collect();
    let mut report = ValidationReport::default();
    let mut declared = BTreeSet::new();

    for (algorithm, manifest_path) in &found {
        for (rel, expected) in parse_manifest(manifest_path, *algorithm)? {
            declared.insert(rel.clone());
            let file = bag_path.join(&rel);
            match fs::symlink_metadata(&file) {
                Ok(m) if m.is_file() => {
                    let (_, actual) = algorithm.digest_file(&file)?;
                    if actual != expected {
                        report.corrupted_files.push(CorruptedFile { path: rel, expected, actual });
                    }
                }
                Ok(_) => report.corrupted_files.push(CorruptedFile { path: rel, expected, actual: String::new() }),
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    if !remote.contains(&rel) && !report.missing_files.contains(&rel) {
                        report.missing_files.push(rel);
                    }
                }
                Err(e) => return Err(BagError::Io { path: file, source: e }),
            }
        }
    }

    let data_dir = bag_path.join("data");
    if data_dir.is_dir() {
        for entry in WalkDir::new(&data_dir).follow_links(false).min_depth(1) {
            let entry = entry.map_err(|e| BagError::Io { path: data_dir.clone(), source: e.into() })?;
            if entry.file_type().is_dir() {
                continue;
            }
            let rel = entry.path().strip_prefix(bag_path).expect("walk is rooted in the bag");
            let rel = rel.to_string_lossy().replace(std::path::MAIN_SEPARATOR, "/");
            if !declared.contains(&rel) {
                report.extra_files.push(rel);
            }
        }
    }
    // The same corrupted file can be reported once per manifest.
    report.corrupted_files.dedup_by(|a, b| a.path == b.path);
    Ok(report.finalize())
}

/// Content-derived identifier: sha256 over the canonical manifest bytes,
/// top 60 bits, base32 (RFC 4648 alphabet, lowercase, no padding).
///
/// Refuses to mint for a bag that does not validate.
pub fn mint_minid(bag_path: &Path) -> Result<Minid, BagError> {
    let report = validate_bag(bag_path)?;
    if !report.valid {
        return Err(BagError::Invalid(report));
    }
    let found = manifests(bag_path);
    let (algorithm, manifest_path) = &found[0];
    let entries = parse_manifest(manifest_path, *algorithm)?;
    let canonical = canonical_manifest(entries.iter().map(|(p, d)| (p.as_str(), d.as_str())));
    Ok(minid_from_manifest_bytes(canonical.as_bytes()))
}

pub fn minid_from_manifest_bytes(canonical: &[u8]) -> Minid {
    let digest = Sha256::digest(canonical);
    let source_digest = hex::encode(digest);
    let mut top = [0u8; 8];
    top.copy_from_slice(&digest[..8]);
    let bits60 = u64::from_be_bytes(top) >> 4;
    Minid { identifier: format!("{MINID_PREFIX}{}", base32_60(bits60)), source_digest }
}

const BASE32_ALPHABET: &[u8; 32] = b"abcdefghijklmnopqrstuvwxyz234567";

// 60 bits encode to exactly twelve 5-bit symbols, most significant first.
fn base32_60(value: u64) -> String {
    (0..12).rev().map(|i| BASE32_ALPHABET[((value >> (i * 5)) & 0x1f) as usize] as char).collect()
}

/// Records a remote payload element in `fetch.txt` and the manifest.
///
/// The target must be a fresh `data/` path; on a conflict the bag on disk
/// is left untouched.
pub fn add_remote_entry(bag: Bag, url: &str, length: u64, digest: &str, target: &str) -> Result<Bag, BagError> {
    check_payload_path(target)?;
    if url.is_empty() || url.contains('\t') || url.contains('\n') {
        return Err(BagError::InvalidEntry(format!("url `{url}` cannot be written to fetch.txt")));
    }
    let algorithm = bag.checksum_algorithm;
    if !algorithm.is_valid_digest(digest) {
        return Err(BagError::InvalidEntry(format!("`{digest}` is not a lowercase {} digest", algorithm.name())));
    }
    if bag.payload_entries.iter().any(|e| e.path == target) || bag.remote_entries.iter().any(|e| e.target == target) {
        return Err(BagError::Conflict(format!("`{target}` is already in the bag")));
    }

    let manifest_path = bag.root.join(algorithm.manifest_name());
    let mut entries = parse_manifest(&manifest_path, algorithm)?;
    entries.push((target.to_string(), digest.to_string()));
    let manifest = canonical_manifest(entries.iter().map(|(p, d)| (p.as_str(), d.as_str())));

    let fetch_path = bag.root.join("fetch.txt");
    let mut fetch = match fs::read_to_string(&fetch_path) {
        Ok(s) => s,
        Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(BagError::Io { path: fetch_path, source: e }),
    };
    fetch.push_str(&format!("{url}\t{length}\t{target}\n"));
    write_file(&fetch_path, fetch.as_bytes())?;
    write_file(&manifest_path, manifest.as_bytes())?;

    let mut bag = bag;
    bag.remote_entries.push(RemoteEntry {
        url: url.to_string(),
        length,
        digest: digest.to_string(),
        target: target.to_string(),
    });
    Ok(bag)
}

/// Deterministic tar serialization of a bag directory (entries sorted,
/// zeroed mtimes and ownership). Used to move bags over the wire.
pub fn pack_bag(bag_path: &Path) -> Result<Vec<u8>, BagError> {
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in WalkDir::new(bag_path).follow_links(false).min_depth(1) {
        let entry = entry.map_err(|e| BagError::Io { path: bag_path.to_path_buf(), source: e.into() })?;
        if entry.file_type().is_symlink() {
            return Err(BagError::SymlinkRejected(entry.path().to_path_buf()));
        }
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(bag_path).expect("walk is rooted in the bag");
            files.push((rel.to_string_lossy().replace(std::path::MAIN_SEPARATOR, "/"), entry.path().to_path_buf()));
        }
    }
    files.sort();
    let mut builder = tar::Builder::new(Vec::new());
    for (rel, path) in files {
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        append_deterministic(&mut builder, &rel, &bytes).map_err(io_err(&path))?;
    }
    builder.into_inner().map_err(io_err(bag_path))
}

pub(crate) fn append_deterministic(builder: &mut tar::Builder<Vec<u8>>, path: &str, bytes: &[u8]) -> io::Result<()> {
    let mut header = tar::Header::new_ustar();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_entry_type(tar::EntryType::Regular);
    builder.append_data(&mut header, path, bytes)
}

/// Unpacks a tar produced by [`pack_bag`] into `dest`, rejecting entries
/// that would land outside it.
pub fn unpack_bag(archive: &[u8], dest: &Path) -> Result<(), BagError> {
    fs::create_dir_all(dest).map_err(io_err(dest))?;
    let mut ar = tar::Archive::new(archive);
    for entry in ar.entries().map_err(io_err(dest))? {
        let mut entry = entry.map_err(io_err(dest))?;
        if entry.header().entry_type() != tar::EntryType::Regular {
            return Err(BagError::InvalidEntry("bag archives may only contain regular files".into()));
        }
        let rel = entry.path().map_err(io_err(dest))?.into_owned();
        if rel.is_absolute() || rel.components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
            return Err(BagError::InvalidEntry(format!("archive entry {} escapes the bag", rel.display())));
        }
        let target = dest.join(&rel);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        entry.unpack(&target).map_err(io_err(&target))?;
    }
    Ok(())
}

/// Reads one payload file out of a packed bag, checking it against the
/// sha256 manifest carried in the same archive.
pub fn read_archived_payload(archive: &[u8], rel: &str) -> Result<Vec<u8>, BagError> {
    check_payload_path(rel)?;
    let mut manifest = None;
    let mut payload = None;
    let mut ar = tar::Archive::new(archive);
    let here = Path::new(rel);
    for entry in ar.entries().map_err(io_err(here))? {
        let mut entry = entry.map_err(io_err(here))?;
        let name = entry.path().map_err(io_err(here))?.to_string_lossy().into_owned();
        if name == "manifest-sha256.txt" || name == rel {
            let mut buf = Vec::new();
            io::Read::read_to_end(&mut entry, &mut buf).map_err(io_err(here))?;
            if name == rel {
                payload = Some(buf);
            } else {
                manifest = Some(buf);
            }
        }
    }
    let payload = payload.ok_or_else(|| BagError::Structure(format!("{rel} is not in the bag")))?;
    let manifest = manifest.ok_or_else(|| BagError::Structure("bag has no manifest-sha256.txt".into()))?;
    let manifest = String::from_utf8_lossy(&manifest);
    let expected = manifest
        .lines()
        .filter_map(|l| l.split_once("  "))
        .find(|(_, p)| *p == rel)
        .map(|(d, _)| d.to_string())
        .ok_or_else(|| BagError::Structure(format!("{rel} is not in the manifest")))?;
    let actual = sha256_hex(&payload);
    if actual != expected {
        let report = ValidationReport {
            corrupted_files: vec![CorruptedFile { path: rel.to_string(), expected, actual }],
            ..Default::default()
        };
        return Err(BagError::Invalid(report.finalize()));
    }
    Ok(payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn write(root: &Path, rel: &str, bytes: &[u8]) {
        let p = root.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, bytes).unwrap();
    }

    fn bag_of(files: &[(&str, &[u8])]) -> (TempDir, PathBuf) {
        let tmp = TempDir::new().unwrap();
        let src = tmp.path().join("src");
        fs::create_dir_all(&src).unwrap();
        for (rel, bytes) in files {
            write(&src, rel, bytes);
        }
        let dest = tmp.path().join("bag");
        create_bag(&src, &dest, ChecksumAlgorithm::Sha256, &BTreeMap::new()).unwrap();
        (tmp, dest)
    }

    #[test]
    fn two_files_give_two_sorted_manifest_lines() {
        let (_t, bag) = bag_of(&[("sub/b.bin", b"\x00\x01"), ("a.txt", b"a")]);
        let manifest = fs::read_to_string(bag.join("manifest-sha256.txt")).unwrap();
        let paths: Vec<&str> = manifest.lines().map(|l| l.split_once("  ").unwrap().1).collect();
        assert_eq!(paths, ["data/a.txt", "data/sub/b.bin"]);
        assert!(bag.join("bagit.txt").is_file());
        assert!(bag.join("bag-info.txt").is_file());
    }

    #[test]
    fn empty_dir_gives_valid_empty_bag() {
        let (_t, bag) = bag_of(&[]);
        assert_eq!(fs::read_to_string(bag.join("manifest-sha256.txt")).unwrap(), "");
        assert!(validate_bag(&bag).unwrap().valid);
    }

    #[test]
    fn hello_digest_matches_known_sha256() {
        // sha256("hello\n") as printed by coreutils sha256sum.
        let (_t, bag) = bag_of(&[("hello.txt", b"hello\n")]);
        let manifest = fs::read_to_string(bag.join("manifest-sha256.txt")).unwrap();
        assert_eq!(manifest, "5891b5b522d5df086d0ff0b110fbd9d21bb4fc7163af34d08286a2e846f6be03  data/hello.txt\n");
    }

    #[test]
    fn empty_algorithm_is_config_error() {
        assert!(matches!("".parse::<ChecksumAlgorithm>(), Err(BagError::Config(_))));
        assert_eq!("SHA512".parse::<ChecksumAlgorithm>().unwrap(), ChecksumAlgorithm::Sha512);
    }

    #[test]
    fn flipped_bit_reports_exactly_that_file() {
        let (_t, bag) = bag_of(&[("a.txt", b"alpha"), ("b.txt", b"beta")]);
        let target = bag.join("data/b.txt");
        let mut bytes = fs::read(&target).unwrap();
        bytes[2] ^= 0x01;
        fs::write(&target, &bytes).unwrap();
        let report = validate_bag(&bag).unwrap();
        assert!(!report.valid);
        assert_eq!(report.corrupted_files.len(), 1);
        assert_eq!(report.corrupted_files[0].path, "data/b.txt");
        assert_eq!(report.corrupted_files[0].actual, sha256_hex(&bytes));
    }

    #[test]
    fn deleted_file_is_missing() {
        let (_t, bag) = bag_of(&[("a.txt", b"alpha"), ("b.txt", b"beta")]);
        fs::remove_file(bag.join("data/a.txt")).unwrap();
        let report = validate_bag(&bag).unwrap();
        assert!(!report.valid);
        assert_eq!(report.missing_files, ["data/a.txt"]);
        assert!(report.corrupted_files.is_empty());
    }

    #[test]
    fn stray_file_is_extra() {
        let (_t, bag) = bag_of(&[("a.txt", b"alpha")]);
        write(&bag, "data/zzz.txt", b"stray");
        let report = validate_bag(&bag).unwrap();
        assert_eq!(report.extra_files, ["data/zzz.txt"]);
        assert!(!report.valid);
    }

    #[test]
    fn missing_manifest_is_structural() {
        let (_t, bag) = bag_of(&[("a.txt", b"alpha")]);
        fs::remove_file(bag.join("manifest-sha256.txt")).unwrap();
        assert!(matches!(validate_bag(&bag), Err(BagError::Structure(_))));
    }

    #[test]
    fn minid_is_stable_and_content_derived() {
        let (_t1, a) = bag_of(&[("x.bin", b"payload")]);
        let m1 = mint_minid(&a).unwrap();
        assert_eq!(m1, mint_minid(&a).unwrap());
        assert!(m1.identifier.starts_with("minid:"));
        assert_eq!(m1.identifier.len(), "minid:".len() + 12);

        // Different bag-info, same payload.
        let tmp = TempDir::new().unwrap();
        let src = tmp.path().join("src");
        write(&src, "x.bin", b"payload");
        let mut info = BTreeMap::new();
        info.insert("Bagging-Date".to_string(), "1999-01-01".to_string());
        info.insert("Contact-Name".to_string(), "someone else".to_string());
        create_bag(&src, &tmp.path().join("bag"), ChecksumAlgorithm::Sha256, &info).unwrap();
        assert_eq!(mint_minid(&tmp.path().join("bag")).unwrap(), m1);

        let (_t3, c) = bag_of(&[("x.bin", b"paylobd")]);
        assert_ne!(mint_minid(&c).unwrap(), m1);
    }

    #[test]
    fn invalid_bag_refuses_to_mint() {
        let (_t, bag) = bag_of(&[("a.txt", b"alpha")]);
        fs::write(bag.join("data/a.txt"), b"alphA").unwrap();
        assert!(matches!(mint_minid(&bag), Err(BagError::Invalid(r)) if r.corrupted_files.len() == 1));
    }

    #[test]
    fn remote_entries_make_a_holey_bag() {
        let (_t, path) = bag_of(&[("local.txt", b"here")]);
        let bag = open_bag(&path).unwrap();
        let digest = sha256_hex(b"remote contents");
        let bag = add_remote_entry(bag, "https://example.org/r.bin", 15, &digest, "data/remote/r.bin").unwrap();
        let fetch = fs::read_to_string(path.join("fetch.txt")).unwrap();
        assert_eq!(fetch.lines().count(), 1);
        assert_eq!(fetch.matches('\t').count(), 2);
        assert!(validate_bag(&path).unwrap().valid);

        let before_fetch = fetch.clone();
        let before_manifest = fs::read_to_string(path.join("manifest-sha256.txt")).unwrap();
        let err = add_remote_entry(bag.clone(), "https://example.org/other", 1, &digest, "data/remote/r.bin");
        assert!(matches!(err, Err(BagError::Conflict(_))));
        let err = add_remote_entry(bag, "https://example.org/other", 1, &digest, "data/local.txt");
        assert!(matches!(err, Err(BagError::Conflict(_))));
        assert_eq!(fs::read_to_string(path.join("fetch.txt")).unwrap(), before_fetch);
        assert_eq!(fs::read_to_string(path.join("manifest-sha256.txt")).unwrap(), before_manifest);

        let reopened = open_bag(&path).unwrap();
        assert_eq!(reopened.remote_entries.len(), 1);
        assert_eq!(reopened.payload_entries.len(), 1);

        // Once fetched, the remote file is checked against its digest.
        write(&path, "data/remote/r.bin", b"remote contents");
        assert!(validate_bag(&path).unwrap().valid);
        write(&path, "data/remote/r.bin", b"tampered content");
        assert_eq!(validate_bag(&path).unwrap().corrupted_files.len(), 1);
    }

    #[cfg(unix)]
    #[test]
    fn symlinks_are_rejected() {
        let tmp = TempDir::new().unwrap();
        let src = tmp.path().join("src");
        write(&src, "a.txt", b"a");
        std::os::unix::fs::symlink("/etc/hostname", src.join("link")).unwrap();
        let err = create_bag(&src, &tmp.path().join("bag"), ChecksumAlgorithm::Sha256, &BTreeMap::new());
        assert!(matches!(err, Err(BagError::SymlinkRejected(_))));
        assert!(!tmp.path().join("bag").exists());
    }

    #[test]
    fn sha512_bags_validate() {
        let tmp = TempDir::new().unwrap();
        let src = tmp.path().join("src");
        write(&src, "a.txt", b"alpha");
        let dest = tmp.path().join("bag");
        create_bag(&src, &dest, ChecksumAlgorithm::Sha512, &BTreeMap::new()).unwrap();
        assert!(dest.join("manifest-sha512.txt").is_file());
        assert!(validate_bag(&dest).unwrap().valid);
        assert_eq!(open_bag(&dest).unwrap().checksum_algorithm, ChecksumAlgorithm::Sha512);
    }

    #[test]
    fn pack_unpack_preserves_minid() {
        let (_t, bag) = bag_of(&[("a.txt", b"alpha"), ("d/b.txt", b"beta")]);
        let packed = pack_bag(&bag).unwrap();
        assert_eq!(packed, pack_bag(&bag).unwrap());
        let tmp = TempDir::new().unwrap();
        unpack_bag(&packed, tmp.path()).unwrap();
        assert_eq!(mint_minid(tmp.path()).unwrap(), mint_minid(&bag).unwrap());
    }

    #[test]
    fn payload_path_rules() {
        assert!(check_payload_path("data/a/b").is_ok());
        assert!(check_payload_path("a/b").is_err());
        assert!(check_payload_path("data/../x").is_err());
        assert!(check_payload_path("data/").is_err());
    }

    #[test]
    fn manifest_paths_with_newlines_are_encoded() {
        let text = canonical_manifest([("data/a\nb%c", "00")]);
        assert_eq!(text, "00  data/a%0Ab%25c\n");
        assert_eq!(decode_manifest_path("data/a%0Ab%25c"), "data/a\nb%c");
    }
}
