//! DataCite-style metadata for published models and datasets.
//!
//! The machine format is UTF-8 JSON with recursively sorted keys; the
//! human format is a standalone HTML page. [`validate_value`] is the single
//! source of schema rules and never panics on arbitrary JSON.

mod render;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::uq::UqReport;

pub use render::{canonical_json, canonical_value, render_human, render_machine, RenderFormat};
pub use validate::{validate_document, validate_value};

pub const IDENTIFIER_PREFIX: &str = "local-doi:10.99999/";
pub const IDENTIFIER_TYPE: &str = "local-doi";
pub const DEFAULT_DATASET_LICENSE: &str = "CC-BY-4.0";
pub const YEAR_RANGE: std::ops::RangeInclusive<i64> = 1990..=2100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Violation { field: field.into(), rule: rule.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetadataError {
    #[error("metadata document does not parse: {0}")]
    Parse(String),
    #[error("metadata record is invalid: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    Float32,
    Float64,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::Float32 => 4,
            ElementType::Float64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementType::Float32 => "float32",
            ElementType::Float64 => "float64",
        }
    }
}

/// One tensor dimension; only the leading (batch) dimension may be variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Option<u64>", into = "Option<u64>")]
pub enum Dim {
    Variable,
    Fixed(u64),
}

impl From<Option<u64>> for Dim {
    fn from(v: Option<u64>) -> Self {
        v.map_or(Dim::Variable, Dim::Fixed)
    }
}

impl From<Dim> for Option<u64> {
    fn from(d: Dim) -> Self {
        match d {
            Dim::Variable => None,
            Dim::Fixed(n) => Some(n),
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Variable => f.write_str("variable"),
            Dim::Fixed(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoSignature {
    pub element_type: ElementType,
    pub shape: Vec<Dim>,
    #[serde(default)]
    pub semantic_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SignatureMismatch {
    #[error("element type {got} does not match signature type {expected}")]
    ElementType { expected: &'static str, got: &'static str },
    #[error("rank {got} does not match signature rank {expected}")]
    Rank { expected: usize, got: usize },
    #[error("dimension {index}: expected {expected}, got {got}")]
    Dimension { index: usize, expected: String, got: u64 },
}

impl IoSignature {
    pub fn new(element_type: ElementType, shape: Vec<Dim>, semantic_label: impl Into<String>) -> Self {
        IoSignature { element_type, shape, semantic_label: semantic_label.into() }
    }

    /// Checks a concrete tensor shape against the signature.
    pub fn check(&self, element_type: ElementType, shape: &[u64]) -> Result<(), SignatureMismatch> {
        if element_type != self.element_type {
            return Err(SignatureMismatch::ElementType { expected: self.element_type.name(), got: element_type.name() });
        }
        if shape.len() != self.shape.len() {
            return Err(SignatureMismatch::Rank { expected: self.shape.len(), got: shape.len() });
        }
        for (index, (want, &got)) in self.shape.iter().zip(shape).enumerate() {
            let ok = match want {
                Dim::Variable => got >= 1,
                Dim::Fixed(n) => *n == got,
            };
            if !ok {
                let expected = match want {
                    Dim::Variable => ">= 1".to_string(),
                    Dim::Fixed(n) => n.to_string(),
                };
                return Err(SignatureMismatch::Dimension { index, expected, got });
            }
        }
        Ok(())
    }

    /// Shape with the variable leading dimension bound to `batch`.
    pub fn bind(&self, batch: u64) -> Vec<u64> {
        self.shape
            .iter()
            .map(|d| match d {
                Dim::Variable => batch,
                Dim::Fixed(n) => *n,
            })
            .collect()
    }

    pub fn describe(&self) -> String {
        let dims: Vec<String> = self.shape.iter().map(ToString::to_string).collect();
        format!("{}[{}]", self.element_type.name(), dims.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Author {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dependency {
    pub name: String,
    pub version: String,
}

/// Uncertainty metric descriptor with the trust gate and, once computed,
/// the error report backing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqMetric {
    pub metric: String,
    pub units: String,
    pub trust_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<UqReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorExample {
    pub shape: Vec<u64>,
    pub data: Vec<f32>,
}

impl TensorExample {
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// A bundled input with its expected output, used to re-run the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkedExample {
    pub input: TensorExample,
    pub output: TensorExample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub identifier: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identifier_type: Option<String>,
    pub title: String,
    pub authors: Vec<Author>,
    pub publication_year: i64,
    #[serde(default)]
    pub description: String,
    pub keywords: Vec<String>,
    pub input_signature: IoSignature,
    pub output_signature: IoSignature,
    #[serde(default)]
    pub dependencies: Vec<Dependency>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_dataset_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_set_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uq_metric: Option<UqMetric>,
    #[serde(default)]
    pub license: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub servable_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructions: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worked_example: Option<WorkedExample>,
}

impl ModelRecord {
    /// The signatures the broker enforces at invocation time.
    pub fn extract_signature(&self) -> (IoSignature, IoSignature) {
        (self.input_signature.clone(), self.output_signature.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelatedIdentifier {
    pub relation: String,
    pub identifier: String,
}

fn default_dataset_license() -> String {
    DEFAULT_DATASET_LICENSE.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub identifier: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identifier_type: Option<String>,
    pub title: String,
    pub authors: Vec<Author>,
    pub publication_year: i64,
    #[serde(default)]
    pub description: String,
    pub keywords: Vec<String>,
    #[serde(default = "default_dataset_license")]
    pub license: String,
    #[serde(default)]
    pub format_label: String,
    pub minid: String,
    #[serde(default)]
    pub related_identifiers: Vec<RelatedIdentifier>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "resource_type", rename_all = "lowercase")]
pub enum Record {
    Model(ModelRecord),
    Dataset(DatasetRecord),
}

impl Record {
    pub fn identifier(&self) -> &str {
        match self {
            Record::Model(m) => &m.identifier,
            Record::Dataset(d) => &d.identifier,
        }
    }

    pub fn set_identifier(&mut self, id: String, id_type: Option<String>) {
        match self {
            Record::Model(m) => {
                m.identifier = id;
                m.identifier_type = id_type;
            }
            Record::Dataset(d) => {
                d.identifier = id;
                d.identifier_type = id_type;
            }
        }
    }

    pub fn title(&self) -> &str {
        match self {
            Record::Model(m) => &m.title,
            Record::Dataset(d) => &d.title,
        }
    }

    pub fn description(&self) -> &str {
        match self {
            Record::Model(m) => &m.description,
            Record::Dataset(d) => &d.description,
        }
    }

    pub fn keywords(&self) -> &[String] {
        match self {
            Record::Model(m) => &m.keywords,
            Record::Dataset(d) => &d.keywords,
        }
    }

    pub fn authors(&self) -> &[Author] {
        match self {
            Record::Model(m) => &m.authors,
            Record::Dataset(d) => &d.authors,
        }
    }

    pub fn publication_year(&self) -> i64 {
        match self {
            Record::Model(m) => m.publication_year,
            Record::Dataset(d) => d.publication_year,
        }
    }

    pub fn as_model(&self) -> Option<&ModelRecord> {
        match self {
            Record::Model(m) => Some(m),
            Record::Dataset(_) => None,
        }
    }

    pub fn as_dataset(&self) -> Option<&DatasetRecord> {
        match self {
            Record::Dataset(d) => Some(d),
            Record::Model(_) => None,
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("records always serialize")
    }

    /// Schema violations of this record; empty when valid.
    pub fn violations(&self) -> Vec<Violation> {
        validate_value(&self.to_value())
    }
}

/// Validates and then deserializes a machine-format document.
pub fn parse_record(document: &str) -> Result<Record, MetadataError> {
    let value: serde_json::Value = serde_json::from_str(document).map_err(|e| MetadataError::Parse(e.to_string()))?;
    parse_record_value(&value)
}

pub fn parse_record_value(value: &serde_json::Value) -> Result<Record, MetadataError> {
    if !value.is_object() {
        return Err(MetadataError::Parse("document is not a key/value object".into()));
    }
    let violations = validate_value(value);
    if !violations.is_empty() {
        return Err(MetadataError::Invalid(violations));
    }
    serde_json::from_value(value.clone()).map_err(|e| MetadataError::Parse(e.to_string()))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn patch_input() -> IoSignature {
        IoSignature::new(
            ElementType::Float32,
            vec![Dim::Variable, Dim::Fixed(1), Dim::Fixed(11), Dim::Fixed(11)],
            "intensity patch",
        )
    }

    pub fn position_output() -> IoSignature {
        IoSignature::new(ElementType::Float32, vec![Dim::Variable, Dim::Fixed(2)], "peak position")
    }

    pub fn model() -> ModelRecord {
        ModelRecord {
            identifier: "local-doi:10.99999/0badc0de".into(),
            identifier_type: Some(IDENTIFIER_TYPE.into()),
            title: "Peak localizer".into(),
            authors: vec![Author { name: "Ada Example".into(), contact: Some("ada@example.org".into()) }],
            publication_year: 2022,
            description: "Predicts sub-pixel peak centers".into(),
            keywords: vec!["bragg".into(), "peaks".into()],
            input_signature: patch_input(),
            output_signature: position_output(),
            dependencies: vec![Dependency { name: "fair-fabric".into(), version: "0.1.0".into() }],
            training_dataset_id: Some("local-doi:10.99999/00000001".into()),
            sample_set_id: Some("minid:abcdefghijkl".into()),
            uq_metric: Some(UqMetric {
                metric: "euclidean_distance".into(),
                units: "pixels".into(),
                trust_threshold: 0.688,
                report: None,
            }),
            license: "Apache-2.0".into(),
            servable_digest: Some("ab".repeat(32)),
            instructions: Some("submit [n,1,11,11] float32 patches".into()),
            worked_example: Some(WorkedExample {
                input: TensorExample { shape: vec![1, 2], data: vec![0.5, 1.5] },
                output: TensorExample { shape: vec![1, 2], data: vec![5.5, 5.5] },
            }),
        }
    }

    pub fn dataset() -> DatasetRecord {
        DatasetRecord {
            identifier: "local-doi:10.99999/feedface".into(),
            identifier_type: Some(IDENTIFIER_TYPE.into()),
            title: "Synthetic peaks".into(),
            authors: vec![Author { name: "Ada Example".into(), contact: None }],
            publication_year: 2022,
            description: "11x11 patches".into(),
            keywords: vec!["bragg".into()],
            license: DEFAULT_DATASET_LICENSE.into(),
            format_label: "BPK1".into(),
            minid: "minid:abcdefghijkl".into(),
            related_identifiers: vec![RelatedIdentifier {
                relation: "IsSupplementTo".into(),
                identifier: "local-doi:10.99999/0badc0de".into(),
            }],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn signature_check_names_the_dimension() {
        let sig = patch_input();
        assert!(sig.check(ElementType::Float32, &[16384, 1, 11, 11]).is_ok());
        let err = sig.check(ElementType::Float32, &[4, 1, 12, 11]).unwrap_err();
        assert_eq!(err, SignatureMismatch::Dimension { index: 2, expected: "11".into(), got: 12 });
        assert!(err.to_string().contains("dimension 2"));
        assert!(matches!(sig.check(ElementType::Float64, &[1, 1, 11, 11]), Err(SignatureMismatch::ElementType { .. })));
        assert!(matches!(sig.check(ElementType::Float32, &[1, 11, 11]), Err(SignatureMismatch::Rank { .. })));
        assert!(sig.check(ElementType::Float32, &[0, 1, 11, 11]).is_err());
    }

    #[test]
    fn reference_signatures() {
        let (input, output) = model().extract_signature();
        assert_eq!(input.shape, vec![Dim::Variable, Dim::Fixed(1), Dim::Fixed(11), Dim::Fixed(11)]);
        assert_eq!(input.element_type, ElementType::Float32);
        assert_eq!(output.shape, vec![Dim::Variable, Dim::Fixed(2)]);
        assert_eq!(input.bind(7), vec![7, 1, 11, 11]);
    }

    #[test]
    fn dims_serialize_as_null_or_int() {
        let json = serde_json::to_string(&patch_input()).unwrap();
        assert!(json.contains("[null,1,11,11]"), "{json}");
    }

    #[test]
    fn non_object_is_a_parse_error() {
        assert!(matches!(parse_record("[1,2]"), Err(MetadataError::Parse(_))));
        assert!(matches!(parse_record("{nope"), Err(MetadataError::Parse(_))));
    }

    #[test]
    fn dataset_license_defaults() {
        let mut v = Record::Dataset(dataset()).to_value();
        v.as_object_mut().unwrap().remove("license");
        let Record::Dataset(d) = parse_record_value(&v).unwrap() else { panic!() };
        assert_eq!(d.license, DEFAULT_DATASET_LICENSE);
    }
}
