//! Pass/Fail grading of a published model against the four FAIR
//! propositions. Every proposition clause maps to one named sub-check; a
//! principle passes iff all of its sub-checks pass.
//!
//! Checks only read the registry and submit ephemeral smoke tasks (flagged
//! `smoke`) to the broker. The tombstone probe uses a dedicated withdrawn
//! fixture entry, never the model under test.

use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::bag;
use crate::clock::{format_rfc3339, Clock, SystemClock};
use crate::error::{FabricError, Result};
use crate::metadata::{render_human, render_machine, parse_record, ElementType, ModelRecord, Record, TensorExample};
use crate::peaks::{read_patch_count, PeakPosition, PATCH_SIZE};
use crate::registry::{EntryState, RegistryApi, SearchQuery};
use crate::tasking::{wait_for, BrokerApi, EndpointState, InputReference, TaskStatus, TaskSubmission, Tensor};
use crate::uq::{consistency_check, DEFAULT_CONSISTENCY_TOLERANCE_PX};

/// Keyword that marks the withdrawn entry used by the tombstone probe.
pub const TOMBSTONE_KEYWORD: &str = "tombstone-fixture";
pub const SIMULATION_NOTE: &str =
    "simulation: disparate hardware is represented by distinct endpoint execution profiles (numeric accumulation modes)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Principle {
    Findable,
    Accessible,
    Interoperable,
    Reusable,
}

impl Principle {
    pub const ALL: [Principle; 4] =
        [Principle::Findable, Principle::Accessible, Principle::Interoperable, Principle::Reusable];

    pub fn name(self) -> &'static str {
        match self {
            Principle::Findable => "findable",
            Principle::Accessible => "accessible",
            Principle::Interoperable => "interoperable",
            Principle::Reusable => "reusable",
        }
    }

    /// Names of the sub-checks this principle runs, in order.
    pub fn sub_check_names(self) -> &'static [&'static str] {
        match self {
            Principle::Findable => &[
                "identifier_resolves",
                "metadata_valid",
                "signatures_present",
                "dependencies_versioned",
                "instructions_present",
                "sample_set_resolves",
            ],
            Principle::Accessible => &["metadata_retrievable", "artifact_download", "smoke_inference", "tombstone_probe"],
            Principle::Interoperable => &["distinct_profiles", "cross_profile_consistency", "metadata_renders"],
            Principle::Reusable => {
                &["worked_example_reexecutes", "sample_set_conforms", "uq_report_present", "provenance_complete"]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubCheck {
    pub name: String,
    pub passed: bool,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub principle: Principle,
    pub passed: bool,
    pub sub_checks: Vec<SubCheck>,
}

impl CheckResult {
    fn new(principle: Principle, sub_checks: Vec<SubCheck>) -> Self {
        debug_assert_eq!(
            sub_checks.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(),
            principle.sub_check_names()
        );
        CheckResult { principle, passed: sub_checks.iter().all(|s| s.passed), sub_checks }
    }

    pub fn sub_check(&self, name: &str) -> Option<&SubCheck> {
        self.sub_checks.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairReport {
    pub model_identifier: String,
    pub checks: Vec<CheckResult>,
    pub overall: bool,
    pub generated_at: String,
    pub note: String,
}

impl FairReport {
    pub fn check(&self, p: Principle) -> &CheckResult {
        self.checks.iter().find(|c| c.principle == p).expect("all four principles are present")
    }

    /// `(principle, sub-check)` pairs that failed.
    pub fn failures(&self) -> Vec<(Principle, String)> {
        self.checks
            .iter()
            .flat_map(|c| c.sub_checks.iter().filter(|s| !s.passed).map(move |s| (c.principle, s.name.clone())))
            .collect()
    }

    /// Same outcome and evidence, ignoring the timestamp.
    pub fn same_outcome(&self, other: &FairReport) -> bool {
        self.model_identifier == other.model_identifier && self.checks == other.checks && self.overall == other.overall
    }

    pub fn to_json(&self) -> String {
        let v = crate::metadata::canonical_value(&serde_json::to_value(self).expect("report serializes"));
        let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
        s.push('\n');
        s
    }

    /// Plain-text table; the last line is `FAIR overall: PASS|FAIL`.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "FAIR report for {}", self.model_identifier);
        let _ = writeln!(out, "{:<14} {:<28} {:<6} evidence", "principle", "sub-check", "result");
        for c in &self.checks {
            for s in &c.sub_checks {
                let _ = writeln!(out, "{:<14} {:<28} {:<6} {}", c.principle.name(), s.name, verdict(s.passed), s.evidence);
            }
        }
        for c in &self.checks {
            let _ = writeln!(out, "{:<14} {}", c.principle.name(), verdict(c.passed));
        }
        let _ = writeln!(out, "note: {}", self.note);
        let _ = write!(out, "FAIR overall: {}", verdict(self.overall));
        out
    }
}

fn verdict(b: bool) -> &'static str {
    if b {
        "PASS"
    } else {
        "FAIL"
    }
}

fn pass(name: &str, evidence: impl Into<String>) -> SubCheck {
    SubCheck { name: name.into(), passed: true, evidence: evidence.into() }
}

fn fail(name: &str, evidence: impl Into<String>) -> SubCheck {
    SubCheck { name: name.into(), passed: false, evidence: evidence.into() }
}

fn check(name: &str, r: std::result::Result<String, String>) -> SubCheck {
    match r {
        Ok(e) => pass(name, e),
        Err(e) => fail(name, e),
    }
}

pub struct FairChecker<'a> {
    pub registry: &'a dyn RegistryApi,
    pub broker: Option<&'a dyn BrokerApi>,
    /// Withdrawn entry probed by the tombstone check; when `None`, the first
    /// search hit carrying [`TOMBSTONE_KEYWORD`] is used.
    pub tombstone_fixture: Option<String>,
    pub tolerance: f64,
    pub task_timeout: Duration,
    pub clock: &'a dyn Clock,
}

impl<'a> FairChecker<'a> {
    pub fn new(registry: &'a dyn RegistryApi, broker: Option<&'a dyn BrokerApi>) -> Self {
        FairChecker {
            registry,
            broker,
            tombstone_fixture: None,
            tolerance: DEFAULT_CONSISTENCY_TOLERANCE_PX,
            task_timeout: Duration::from_secs(120),
            clock: &SystemClock,
        }
    }

    fn model(&self, id: &str) -> std::result::Result<(ModelRecord, EntryState), String> {
        let doc = self.registry.get_metadata(id).map_err(|e| e.to_string())?;
        match doc.record {
            Record::Model(m) => Ok((m, doc.state)),
            Record::Dataset(_) => Err(format!("{id} is a dataset, not a model")),
        }
    }

    /// Resolves a sample-set reference (minid or registry identifier) to a dataset entry.
    fn resolve_dataset(&self, reference: &str) -> std::result::Result<(String, EntryState), String> {
        if reference.starts_with(bag::MINID_PREFIX) {
            let q = SearchQuery { minid: Some(reference.to_string()), ..Default::default() };
            let hits = self.registry.search(&q).map_err(|e| e.to_string())?;
            let hit = hits.into_iter().next().ok_or_else(|| format!("no registry entry carries {reference}"))?;
            Ok((hit.identifier, hit.state))
        } else {
            let doc = self.registry.get_metadata(reference).map_err(|e| format!("{reference}: {e}"))?;
            if doc.record.as_dataset().is_none() {
                return Err(format!("{reference} is not a dataset"));
            }
            Ok((reference.to_string(), doc.state))
        }
    }

    /// Runs the worked example as a smoke task, optionally pinned to one endpoint.
    fn smoke(&self, model: &str, example: &TensorExample, endpoint: Option<&str>) -> std::result::Result<Tensor, String> {
        let broker = self.broker.ok_or("no broker configured")?;
        let input = Tensor::new(ElementType::Float32, example.shape.clone(), example.to_le_bytes())
            .map_err(|e| format!("worked example input: {e}"))?;
        let mut sub = TaskSubmission::new(model, InputReference::inline(&input)).smoke();
        if let Some(ep) = endpoint {
            sub = sub.on(ep);
        }
        let id = broker.submit_task(sub).map_err(|e| e.to_string())?;
        let view = wait_for(broker, &id, self.task_timeout).map_err(|e| e.to_string())?;
        match view.status {
            TaskStatus::Completed => broker.fetch_result(&id).map_err(|e| e.to_string()),
            _ => Err(format!("smoke task failed: {}", view.error_detail.unwrap_or_default())),
        }
    }

    fn online_endpoints(&self) -> std::result::Result<Vec<crate::tasking::EndpointInfo>, String> {
        let broker = self.broker.ok_or("no broker configured")?;
        let eps = broker.list_endpoints().map_err(|e| e.to_string())?;
        Ok(eps.into_iter().filter(|e| e.state == EndpointState::Online).collect())
    }

    pub fn check_findable(&self, id: &str) -> CheckResult {
        let model = self.model(id);
        let with = |f: &dyn Fn(&ModelRecord) -> std::result::Result<String, String>| match &model {
            Ok((m, _)) => f(m),
            Err(e) => Err(format!("record unavailable: {e}")),
        };
        let subs = vec![
            check(
                "identifier_resolves",
                model.as_ref().map(|(m, s)| format!("{} resolves ({})", m.identifier, state_name(*s))).map_err(Clone::clone),
            ),
            check(
                "metadata_valid",
                with(&|m| {
                    let v = Record::Model(m.clone()).violations();
                    if v.is_empty() {
                        Ok("0 violations".into())
                    } else {
                        Err(v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
                    }
                }),
            ),
            check(
                "signatures_present",
                with(&|m| {
                    if m.input_signature.shape.is_empty() || m.output_signature.shape.is_empty() {
                        Err("input or output signature has no dimensions".into())
                    } else {
                        Ok(format!("in {} → out {}", m.input_signature.describe(), m.output_signature.describe()))
                    }
                }),
            ),
            check(
                "dependencies_versioned",
                with(&|m| {
                    if m.dependencies.is_empty() {
                        return Err("no dependencies declared".into());
                    }
                    let unversioned: Vec<&str> =
                        m.dependencies.iter().filter(|d| d.version.trim().is_empty()).map(|d| d.name.as_str()).collect();
                    if unversioned.is_empty() {
                        Ok(m.dependencies.iter().map(|d| format!("{}={}", d.name, d.version)).collect::<Vec<_>>().join(", "))
                    } else {
                        Err(format!("unversioned: {}", unversioned.join(", ")))
                    }
                }),
            ),
            check(
                "instructions_present",
                with(&|m| match m.instructions.as_deref().map(str::trim) {
                    Some(t) if !t.is_empty() => Ok(format!("{} chars of instructions", t.chars().count())),
                    _ => Err("no usage instructions".into()),
                }),
            ),
            check(
                "sample_set_resolves",
                with(&|m| {
                    let r = m.sample_set_id.as_deref().ok_or("no sample_set_id")?;
                    let (ds, state) = self.resolve_dataset(r).map_err(|e| format!("sample set {r}: {e}"))?;
                    Ok(format!("{r} → {ds} ({})", state_name(state)))
                }),
            ),
        ];
        CheckResult::new(Principle::Findable, subs)
    }

    pub fn check_accessible(&self, id: &str) -> CheckResult {
        let model = self.model(id);
        let subs = vec![
            check(
                "metadata_retrievable",
                self.registry
                    .get_metadata(id)
                    .map_err(|e| e.to_string())
                    .and_then(|doc| {
                        let machine = render_machine(&doc.record).map_err(|e| e.to_string())?;
                        Ok(format!("GET /entries/{{id}} → {} bytes of JSON ({})", machine.len(), state_name(doc.state)))
                    }),
            ),
            check(
                "artifact_download",
                model.as_ref().map_err(Clone::clone).and_then(|(m, _)| {
                    let bytes = self.registry.download_artifact(id).map_err(|e| e.to_string())?;
                    let digest = bag::sha256_hex(&bytes);
                    match m.servable_digest.as_deref() {
                        Some(d) if d == digest => Ok(format!("{} bytes, sha256 {}…", bytes.len(), &digest[..12])),
                        Some(d) => Err(format!("downloaded digest {digest} != recorded {d}")),
                        None => Err("record has no servable_digest".into()),
                    }
                }),
            ),
            check(
                "smoke_inference",
                model.as_ref().map_err(Clone::clone).and_then(|(m, _)| {
                    let ex = m.worked_example.as_ref().ok_or("no bundled example input")?;
                    if self.online_endpoint_count()? == 0 {
                        return Err("no endpoint online".into());
                    }
                    let out = self.smoke(id, &ex.input, None)?;
                    m.output_signature
                        .check(out.element_type, &out.shape)
                        .map_err(|e| format!("output violates signature: {e}"))?;
                    Ok(format!("example input {:?} → output {:?}", ex.input.shape, out.shape))
                }),
            ),
            check("tombstone_probe", self.tombstone_probe()),
        ];
        CheckResult::new(Principle::Accessible, subs)
    }

    fn online_endpoint_count(&self) -> std::result::Result<usize, String> {
        Ok(self.online_endpoints().map_err(|e| format!("no endpoint: {e}"))?.len())
    }

    fn tombstone_probe(&self) -> std::result::Result<String, String> {
        let fixture = match &self.tombstone_fixture {
            Some(f) => f.clone(),
            None => {
                let q = SearchQuery { keyword: Some(TOMBSTONE_KEYWORD.into()), ..Default::default() };
                let hits = self.registry.search(&q).map_err(|e| e.to_string())?;
                hits.into_iter()
                    .find(|h| h.state == EntryState::Withdrawn)
                    .map(|h| h.identifier)
                    .ok_or("no withdrawn tombstone fixture in the registry")?
            }
        };
        let doc = self.registry.get_metadata(&fixture).map_err(|e| format!("fixture {fixture}: {e}"))?;
        if doc.state != EntryState::Withdrawn {
            return Err(format!("fixture {fixture} is not withdrawn"));
        }
        match self.registry.download_artifact(&fixture) {
            Err(FabricError::Gone(_)) => {
                Ok(format!("withdrawn fixture {fixture}: metadata retrievable, artifact gone"))
            }
            Ok(_) => Err(format!("withdrawn fixture {fixture} still serves its artifact")),
            Err(e) => Err(format!("fixture {fixture}: expected gone, got {e}")),
        }
    }

    pub fn check_interoperable(&self, id: &str) -> CheckResult {
        let model = self.model(id);
        let profiles = self.online_endpoints().map(|eps| {
            // First online endpoint (by name) for each distinct precision.
            let mut eps = eps;
            eps.sort_by(|a, b| a.name.cmp(&b.name));
            let mut picked: Vec<crate::tasking::EndpointInfo> = Vec::new();
            for e in eps {
                if !picked.iter().any(|p| p.profile.precision == e.profile.precision) {
                    picked.push(e);
                }
            }
            picked
        });
        let distinct = match &profiles {
            Ok(p) if p.len() >= 2 => Ok(format!(
                "{} ({SIMULATION_NOTE})",
                p.iter().map(|e| format!("{}={}", e.name, e.profile.precision)).collect::<Vec<_>>().join(", ")
            )),
            Ok(p) => Err(format!("insufficient profiles: {} distinct online execution profile(s)", p.len())),
            Err(e) => Err(format!("insufficient profiles: {e}")),
        };
        let consistency = match (&distinct, &profiles, &model) {
            (Err(_), _, _) => Err("insufficient profiles".to_string()),
            (_, _, Err(e)) => Err(e.clone()),
            (Ok(_), Ok(eps), Ok((m, _))) => (|| {
                let ex = m.worked_example.as_ref().ok_or("no bundled example input")?;
                let mut outs = Vec::new();
                for e in eps.iter().take(2) {
                    let out = self
                        .smoke(id, &ex.input, Some(&e.endpoint_id))
                        .map_err(|err| format!("{} ({}): {err}", e.name, e.profile.precision))?;
                    outs.push(positions(&out)?);
                }
                let r = consistency_check(&outs[0], &outs[1], self.tolerance).map_err(|e| e.to_string())?;
                let line = format!(
                    "{} vs {}: max |Δ| {:.3e} px, tolerance {:.0e}",
                    eps[0].profile.precision, eps[1].profile.precision, r.max_abs_deviation, r.tolerance
                );
                if r.pass {
                    Ok(line)
                } else {
                    Err(line)
                }
            })(),
            (Ok(_), Err(e), _) => Err(e.clone()),
        };
        let renders = model.as_ref().map_err(Clone::clone).and_then(|(m, _)| {
            let rec = Record::Model(m.clone());
            let machine = render_machine(&rec).map_err(|e| e.to_string())?;
            let back = parse_record(&machine).map_err(|e| e.to_string())?;
            if back != rec {
                return Err("machine rendering does not round-trip".into());
            }
            let html = render_human(&rec).map_err(|e| e.to_string())?;
            Ok(format!("JSON {} bytes (round-trips), HTML {} bytes", machine.len(), html.len()))
        });
        let subs = vec![
            check("distinct_profiles", distinct),
            check("cross_profile_consistency", consistency),
            check("metadata_renders", renders),
        ];
        CheckResult::new(Principle::Interoperable, subs)
    }

    pub fn check_reusable(&self, id: &str) -> CheckResult {
        let model = self.model(id);
        let with = |f: &dyn Fn(&ModelRecord) -> std::result::Result<String, String>| match &model {
            Ok((m, _)) => f(m),
            Err(e) => Err(format!("record unavailable: {e}")),
        };
        let subs = vec![
            check(
                "worked_example_reexecutes",
                with(&|m| {
                    let ex = m.worked_example.as_ref().ok_or("no worked example")?;
                    let out = self.smoke(id, &ex.input, None)?;
                    let got = out.to_f32().ok_or("output is not float32")?;
                    if out.shape != ex.output.shape || got.len() != ex.output.data.len() {
                        return Err(format!("output shape {:?} != recorded {:?}", out.shape, ex.output.shape));
                    }
                    let dev = got.iter().zip(&ex.output.data).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
                    if dev <= self.tolerance {
                        Ok(format!("re-executed, max |Δ| {dev:.3e} ≤ {:.0e}", self.tolerance))
                    } else {
                        Err(format!("re-executed output deviates by {dev:.3e} > {:.0e}", self.tolerance))
                    }
                }),
            ),
            check("sample_set_conforms", with(&|m| self.sample_set_conforms(m))),
            check(
                "uq_report_present",
                with(&|m| {
                    let uq = m.uq_metric.as_ref().ok_or("no uq_metric")?;
                    if !(uq.trust_threshold > 0.0) {
                        return Err(format!("trust threshold {} is not positive", uq.trust_threshold));
                    }
                    let r = uq.report.as_ref().ok_or("uq_metric carries no report")?;
                    Ok(format!(
                        "{} p95 {:.3} vs threshold {} {} → {}",
                        uq.metric, r.p95_error, uq.trust_threshold, uq.units, r.verdict
                    ))
                }),
            ),
            check(
                "provenance_complete",
                with(&|m| {
                    let mut missing = Vec::new();
                    if m.authors.is_empty() {
                        missing.push("authors");
                    }
                    if !(1990..=2100).contains(&m.publication_year) {
                        missing.push("publication_year");
                    }
                    if m.dependencies.is_empty() {
                        missing.push("dependencies");
                    }
                    let Some(train) = m.training_dataset_id.as_deref() else {
                        missing.push("training_dataset_id");
                        return Err(format!("missing: {}", missing.join(", ")));
                    };
                    if !missing.is_empty() {
                        return Err(format!("missing: {}", missing.join(", ")));
                    }
                    let (ds, _) = self.resolve_dataset(train).map_err(|e| format!("training dataset {train}: {e}"))?;
                    Ok(format!("{} author(s), {}, trained on {ds}", m.authors.len(), m.publication_year))
                }),
            ),
        ];
        CheckResult::new(Principle::Reusable, subs)
    }

    fn sample_set_conforms(&self, m: &ModelRecord) -> std::result::Result<String, String> {
        let r = m.sample_set_id.as_deref().ok_or("no sample_set_id")?;
        let (ds, _) = self.resolve_dataset(r).map_err(|e| format!("sample set {r}: {e}"))?;
        let archive = self.registry.download_artifact(&ds).map_err(|e| format!("sample set {ds}: {e}"))?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        bag::unpack_bag(&archive, dir.path()).map_err(|e| e.to_string())?;
        let report = bag::validate_bag(dir.path()).map_err(|e| e.to_string())?;
        if !report.valid {
            return Err(format!("sample bag {ds} fails validation"));
        }
        let opened = bag::open_bag(dir.path()).map_err(|e| e.to_string())?;
        let mut total = 0usize;
        for entry in opened.payload_entries.iter().filter(|e| e.path.ends_with(".bpk")) {
            let bytes = std::fs::read(dir.path().join(&entry.path)).map_err(|e| e.to_string())?;
            let n = read_patch_count(&bytes).map_err(|e| format!("{}: {e}", entry.path))?;
            let shape = [n as u64, 1, PATCH_SIZE as u64, PATCH_SIZE as u64];
            m.input_signature.check(ElementType::Float32, &shape).map_err(|e| {
                format!("{}: sample shape {shape:?} vs signature {}: {e}", entry.path, m.input_signature.describe())
            })?;
            total += n;
        }
        if total == 0 {
            return Err(format!("sample bag {ds} holds no patch files"));
        }
        Ok(format!("{ds}: {total} samples conform to {}", m.input_signature.describe()))
    }

    /// Runs the four checks in order. Unknown identifiers are an error, not a failed report.
    pub fn fair_report(&self, id: &str) -> Result<FairReport> {
        self.registry.get_metadata(id)?;
        let checks = vec![
            self.check_findable(id),
            self.check_accessible(id),
            self.check_interoperable(id),
            self.check_reusable(id),
        ];
        let overall = checks.iter().all(|c| c.passed);
        Ok(FairReport {
            model_identifier: id.to_string(),
            checks,
            overall,
            generated_at: format_rfc3339(self.clock.now_ms()),
            note: SIMULATION_NOTE.to_string(),
        })
    }
}

fn state_name(s: EntryState) -> &'static str {
    match s {
        EntryState::Published => "published",
        EntryState::Withdrawn => "withdrawn",
    }
}

fn positions(t: &Tensor) -> std::result::Result<Vec<PeakPosition>, String> {
    let v = t.to_f32().ok_or("output is not float32")?;
    if v.len() % 2 != 0 {
        return Err(format!("output of {} values is not a list of 2D positions", v.len()));
    }
    Ok(v.chunks_exact(2).map(|c| PeakPosition { x: c[0] as f64, y: c[1] as f64 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_check_names_are_unique() {
        let mut all: Vec<&str> = Principle::ALL.iter().flat_map(|p| p.sub_check_names().iter().copied()).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn principle_passes_iff_all_sub_checks_pass() {
        let names = Principle::Interoperable.sub_check_names();
        let mut subs: Vec<SubCheck> = names.iter().map(|n| pass(n, "ok")).collect();
        assert!(CheckResult::new(Principle::Interoperable, subs.clone()).passed);
        subs[1].passed = false;
        assert!(!CheckResult::new(Principle::Interoperable, subs).passed);
    }
}
