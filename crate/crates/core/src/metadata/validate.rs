use serde_json::{Map, Value};

use super::{MetadataError, Violation, YEAR_RANGE};
use crate::uq::UqReport;

/// Parses a machine-format document and lists its schema violations.
///
/// A document that is not JSON, or whose top level is not an object, is a
/// parse error rather than a validation failure.
pub fn validate_document(document: &str) -> Result<Vec<Violation>, MetadataError> {
    let value: Value = serde_json::from_str(document).map_err(|e| MetadataError::Parse(e.to_string()))?;
    if !value.is_object() {
        return Err(MetadataError::Parse("document is not a key/value object".into()));
    }
    Ok(validate_value(&value))
}

const MODEL_FIELDS: &[&str] = &[
    "resource_type",
    "identifier",
    "identifier_type",
    "title",
    "authors",
    "publication_year",
    "description",
    "keywords",
    "input_signature",
    "output_signature",
    "dependencies",
    "training_dataset_id",
    "sample_set_id",
    "uq_metric",
    "license",
    "servable_digest",
    "instructions",
    "worked_example",
];

const DATASET_FIELDS: &[&str] = &[
    "resource_type",
    "identifier",
    "identifier_type",
    "title",
    "authors",
    "publication_year",
    "description",
    "keywords",
    "license",
    "format_label",
    "minid",
    "related_identifiers",
];

/// Lists every schema violation in `value`. Total over arbitrary JSON.
pub fn validate_value(value: &Value) -> Vec<Violation> {
    let mut out = Vec::new();
    let Some(obj) = value.as_object() else {
        out.push(Violation::new("$", "document must be a key/value object"));
        return out;
    };
    let kind = match obj.get("resource_type") {
        None => {
            out.push(Violation::new("resource_type", "is required"));
            None
        }
        Some(Value::String(s)) if s == "model" || s == "dataset" => Some(s.as_str()),
        Some(_) => {
            out.push(Violation::new("resource_type", "must be \"model\" or \"dataset\""));
            None
        }
    };

    required_string(obj, "identifier", &mut out);
    optional_string(obj, "identifier_type", &mut out);
    required_string(obj, "title", &mut out);
    authors(obj, &mut out);
    publication_year(obj, &mut out);
    optional_string(obj, "description", &mut out);
    string_list(obj, "keywords", true, &mut out);
    optional_string(obj, "license", &mut out);

    match kind {
        Some("model") => {
            unknown_fields(obj, MODEL_FIELDS, "", &mut out);
            signature(obj, "input_signature", &mut out);
            signature(obj, "output_signature", &mut out);
            dependencies(obj, &mut out);
            optional_nonempty_string(obj, "training_dataset_id", &mut out);
            optional_nonempty_string(obj, "sample_set_id", &mut out);
            uq_metric(obj, &mut out);
            servable_digest(obj, &mut out);
            optional_string(obj, "instructions", &mut out);
            worked_example(obj, &mut out);
        }
        Some(_) => {
            unknown_fields(obj, DATASET_FIELDS, "", &mut out);
            optional_string(obj, "format_label", &mut out);
            match obj.get("minid") {
                None => out.push(Violation::new("minid", "is required")),
                Some(Value::String(s)) if s.starts_with(crate::bag::MINID_PREFIX) && s.len() > 6 => {}
                Some(_) => out.push(Violation::new("minid", "must be a `minid:` identifier")),
            }
            related_identifiers(obj, &mut out);
        }
        None => {}
    }
    out
}

fn unknown_fields(obj: &Map<String, Value>, allowed: &[&str], prefix: &str, out: &mut Vec<Violation>) {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            out.push(Violation::new(format!("{prefix}{key}"), "is not a recognized field"));
        }
    }
}

fn required_string(obj: &Map<String, Value>, field: &str, out: &mut Vec<Violation>) {
    match obj.get(field) {
        None => out.push(Violation::new(field, "is required")),
        Some(Value::String(s)) if !s.trim().is_empty() => {}
        Some(Value::String(_)) => out.push(Violation::new(field, "must not be empty")),
        Some(_) => out.push(Violation::new(field, "must be a string")),
    }
}

fn optional_string(obj: &Map<String, Value>, field: &str, out: &mut Vec<Violation>) {
    if let Some(v) = obj.get(field) {
        if !v.is_string() {
            out.push(Violation::new(field, "must be a string"));
        }
    }
}

fn optional_nonempty_string(obj: &Map<String, Value>, field: &str, out: &mut Vec<Violation>) {
    if obj.contains_key(field) {
        required_string(obj, field, out);
    }
}

fn string_list(obj: &Map<String, Value>, field: &str, required: bool, out: &mut Vec<Violation>) {
    match obj.get(field) {
        None if required => out.push(Violation::new(field, "is required")),
        None => {}
        Some(Value::Array(items)) => {
            if required && items.is_empty() {
                out.push(Violation::new(field, "needs at least one entry"));
            }
            for (i, item) in items.iter().enumerate() {
                match item {
                    Value::String(s) if !s.trim().is_empty() => {}
                    _ => out.push(Violation::new(format!("{field}[{i}]"), "must be a non-empty string")),
                }
            }
        }
        Some(_) => out.push(Violation::new(field, "must be a list of strings")),
    }
}

fn authors(obj: &Map<String, Value>, out: &mut Vec<Violation>) {
    let items = match obj.get("authors") {
        None => return out.push(Violation::new("authors", "is required")),
        Some(Value::Array(items)) => items,
        Some(_) => return out.push(Violation::new("authors", "must be a list")),
    };
    if items.is_empty() {
        out.push(Violation::new("authors", "needs at least one author"));
    }
    for (i, item) in items.iter().enumerate() {
        let prefix = format!("authors[{i}]");
        let Some(a) = item.as_object() else {
            out.push(Violation::new(prefix, "must be an object with `name`"));
            continue;
        };
        match a.get("name") {
            Some(Value::String(s)) if !s.trim().is_empty() => {}
            _ => out.push(Violation::new(format!("{prefix}.name"), "must be a non-empty string")),
        }
        if let Some(c) = a.get("contact") {
            if !c.is_string() {
                out.push(Violation::new(format!("{prefix}.contact"), "must be a string"));
            }
        }
        unknown_fields(a, &["name", "contact"], &format!("{prefix}."), out);
    }
}

fn publication_year(obj: &Map<String, Value>, out: &mut Vec<Violation>) {
    match obj.get("publication_year") {
        None => out.push(Violation::new("publication_year", "is required")),
        Some(v) => match v.as_i64() {
            Some(y) if YEAR_RANGE.contains(&y) => {}
            Some(_) => out.push(Violation::new(
                "publication_year",
                format!("must be between {} and {}", YEAR_RANGE.start(), YEAR_RANGE.end()),
            )),
            None => out.push(Violation::new("publication_year", "must be an integer year")),
        },
    }
}

fn signature(obj: &Map<String, Value>, field: &str, out: &mut Vec<Violation>) {
    let sig = match obj.get(field) {
        None => return out.push(Violation::new(field, "is required")),
        Some(Value::Object(sig)) => sig,
        Some(_) => return out.push(Violation::new(field, "must be an object")),
    };
    match sig.get("element_type") {
        Some(Value::String(s)) if s == "float32" || s == "float64" => {}
        _ => out.push(Violation::new(format!("{field}.element_type"), "must be \"float32\" or \"float64\"")),
    }
    match sig.get("shape") {
        Some(Value::Array(dims)) if !dims.is_empty() => {
            for (i, d) in dims.iter().enumerate() {
                let name = format!("{field}.shape[{i}]");
                match d {
                    Value::Null if i == 0 => {}
                    Value::Null => out.push(Violation::new(name, "only the leading dimension may be variable")),
                    v => match v.as_u64() {
                        Some(n) if n >= 1 => {}
                        _ => out.push(Violation::new(name, "must be a positive integer")),
                    },
                }
            }
        }
        Some(Value::Array(_)) => out.push(Violation::new(format!("{field}.shape"), "must have at least one dimension")),
        _ => out.push(Violation::new(format!("{field}.shape"), "is required and must be a list")),
    }
    if let Some(l) = sig.get("semantic_label") {
        if !l.is_string() {
            out.push(Violation::new(format!("{field}.semantic_label"), "must be a string"));
        }
    }
    unknown_fields(sig, &["element_type", "shape", "semantic_label"], &format!("{field}."), out);
}

fn dependencies(obj: &Map<String, Value>, out: &mut Vec<Violation>) {
    let items = match obj.get("dependencies") {
        None => return,
        Some(Value::Array(items)) => items,
        Some(_) => return out.push(Violation::new("dependencies", "must be a list")),
    };
    for (i, item) in items.iter().enumerate() {
        let prefix = format!("dependencies[{i}]");
        let Some(d) = item.as_object() else {
            out.push(Violation::new(prefix, "must be an object with `name` and `version`"));
            continue;
        };
        for key in ["name", "version"] {
            match d.get(key) {
                Some(Value::String(s)) if !s.trim().is_empty() => {}
                _ => out.push(Violation::new(format!("{prefix}.{key}"), "must be a non-empty string")),
            }
        }
        unknown_fields(d, &["name", "version"], &format!("{prefix}."), out);
    }
}

fn uq_metric(obj: &Map<String, Value>, out: &mut Vec<Violation>) {
    let m = match obj.get("uq_metric") {
        None => return,
        Some(Value::Object(m)) => m,
        Some(_) => return out.push(Violation::new("uq_metric", "must be an object")),
    };
    for key in ["metric", "units"] {
        match m.get(key) {
            Some(Value::String(s)) if !s.trim().is_empty() => {}
            _ => out.push(Violation::new(format!("uq_metric.{key}"), "must be a non-empty string")),
        }
    }
    match m.get("trust_threshold").and_then(Value::as_f64) {
        Some(t) if t.is_finite() && t > 0.0 => {}
        _ => out.push(Violation::new("uq_metric.trust_threshold", "must be a positive number")),
    }
    if let Some(r) = m.get("report") {
        if serde_json::from_value::<UqReport>(r.clone()).is_err() {
            out.push(Violation::new("uq_metric.report", "is not a well-formed error report"));
        }
    }
    unknown_fields(m, &["metric", "units", "trust_threshold", "report"], "uq_metric.", out);
}

fn servable_digest(obj: &Map<String, Value>, out: &mut Vec<Violation>) {
    match obj.get("servable_digest") {
        None => {}
        Some(Value::String(s)) if s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) => {}
        Some(_) => out.push(Violation::new("servable_digest", "must be a lowercase hex sha256 digest")),
    }
}

fn tensor(value: Option<&Value>, field: &str, out: &mut Vec<Violation>) {
    let Some(Value::Object(t)) = value else {
        return out.push(Violation::new(field, "must be an object with `shape` and `data`"));
    };
    let mut count: Option<u64> = Some(1);
    match t.get("shape") {
        Some(Value::Array(dims)) if !dims.is_empty() => {
            for (i, d) in dims.iter().enumerate() {
                match d.as_u64() {
                    Some(n) if n >= 1 => count = count.and_then(|c| c.checked_mul(n)),
                    _ => {
                        out.push(Violation::new(format!("{field}.shape[{i}]"), "must be a positive integer"));
                        count = None;
                    }
                }
            }
        }
        _ => {
            out.push(Violation::new(format!("{field}.shape"), "must be a non-empty list"));
            count = None;
        }
    }
    match t.get("data") {
        Some(Value::Array(items)) => {
            if items.iter().any(|v| !v.as_f64().is_some_and(|x| x.is_finite() && (x.abs() <= f32::MAX as f64))) {
                out.push(Violation::new(format!("{field}.data"), "must contain finite float32 numbers"));
            } else if let Some(c) = count {
                if c != items.len() as u64 {
                    out.push(Violation::new(
                        format!("{field}.data"),
                        format!("has {} values but the shape needs {c}", items.len()),
                    ));
                }
            }
        }
        _ => out.push(Violation::new(format!("{field}.data"), "must be a list of numbers")),
    }
    unknown_fields(t, &["shape", "data"], &format!("{field}."), out);
}

fn worked_example(obj: &Map<String, Value>, out: &mut Vec<Violation>) {
    let ex = match obj.get("worked_example") {
        None => return,
        Some(Value::Object(ex)) => ex,
        Some(_) => return out.push(Violation::new("worked_example", "must be an object")),
    };
    tensor(ex.get("input"), "worked_example.input", out);
    tensor(ex.get("output"), "worked_example.output", out);
    unknown_fields(ex, &["input", "output"], "worked_example.", out);
}

fn related_identifiers(obj: &Map<String, Value>, out: &mut Vec<Violation>) {
    let items = match obj.get("related_identifiers") {
        None => return,
        Some(Value::Array(items)) => items,
        Some(_) => return out.push(Violation::new("related_identifiers", "must be a list")),
    };
    for (i, item) in items.iter().enumerate() {
        let prefix = format!("related_identifiers[{i}]");
        let Some(r) = item.as_object() else {
            out.push(Violation::new(prefix, "must be an object"));
            continue;
        };
        for key in ["relation", "identifier"] {
            match r.get(key) {
                Some(Value::String(s)) if !s.trim().is_empty() => {}
                _ => out.push(Violation::new(format!("{prefix}.{key}"), "must be a non-empty string")),
            }
        }
        unknown_fields(r, &["relation", "identifier"], &format!("{prefix}."), out);
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::super::*;
    use super::*;

    fn model_value() -> Value {
        Record::Model(model()).to_value()
    }

    #[test]
    fn complete_records_have_no_violations() {
        assert!(validate_value(&model_value()).is_empty());
        assert!(validate_value(&Record::Dataset(dataset()).to_value()).is_empty());
    }

    #[test]
    fn missing_authors_is_exactly_one_violation() {
        let mut v = model_value();
        v.as_object_mut().unwrap().remove("authors");
        let violations = validate_value(&v);
        assert_eq!(violations.len(), 1, "{violations:?}");
        assert_eq!(violations[0].field, "authors");
    }

    #[test]
    fn zero_dimension_is_named() {
        let mut v = model_value();
        v["input_signature"]["shape"] = serde_json::json!([0, 11, 11]);
        let violations = validate_value(&v);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].field, "input_signature.shape[0]");
        assert!(violations[0].rule.contains("positive"));
    }

    #[test]
    fn only_leading_dimension_may_be_variable() {
        let mut v = model_value();
        v["output_signature"]["shape"] = serde_json::json!([null, null]);
        let violations = validate_value(&v);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].field, "output_signature.shape[1]");
    }

    #[test]
    fn year_and_dependency_rules() {
        let mut v = model_value();
        v["publication_year"] = serde_json::json!(1850);
        v["dependencies"] = serde_json::json!([{"name": "torch", "version": ""}]);
        let fields: Vec<String> = validate_value(&v).into_iter().map(|x| x.field).collect();
        assert_eq!(fields, ["publication_year", "dependencies[0].version"]);
    }

    #[test]
    fn each_mandatory_omission_is_reported() {
        for field in ["identifier", "title", "authors", "publication_year", "keywords", "input_signature", "output_signature"] {
            let mut v = model_value();
            v.as_object_mut().unwrap().remove(field);
            let violations = validate_value(&v);
            assert!(violations.iter().any(|x| x.field == field), "{field}: {violations:?}");
        }
        for field in ["identifier", "title", "authors", "publication_year", "keywords", "minid"] {
            let mut v = Record::Dataset(dataset()).to_value();
            v.as_object_mut().unwrap().remove(field);
            assert!(validate_value(&v).iter().any(|x| x.field == field), "{field}");
        }
    }

    #[test]
    fn unknown_fields_are_flagged() {
        let mut v = model_value();
        v["colour"] = serde_json::json!("blue");
        let violations = validate_value(&v);
        assert_eq!(violations, vec![Violation::new("colour", "is not a recognized field")]);
    }

    #[test]
    fn worked_example_count_must_match_shape() {
        let mut v = model_value();
        v["worked_example"]["input"]["shape"] = serde_json::json!([1, 3]);
        let violations = validate_value(&v);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].field, "worked_example.input.data");
    }

    #[test]
    fn odd_documents_do_not_panic() {
        for doc in ["null", "1", "\"x\"", "[]", "{}", r#"{"resource_type": 3}"#, r#"{"authors": [null, 1, {}]}"#] {
            let v: Value = serde_json::from_str(doc).unwrap();
            assert!(!validate_value(&v).is_empty(), "{doc}");
        }
        assert!(matches!(validate_document("[]"), Err(MetadataError::Parse(_))));
    }
}
