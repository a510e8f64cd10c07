use serde_json::{Map, Value};

use super::{MetadataError, Record};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderFormat {
    Machine,
    Human,
}

/// Rebuilds `value` with every object's keys in ascending order.
pub fn canonical_value(value: &Value) -> Value {
    match value {
        Value::Object(obj) => {
            let mut keys: Vec<&String> = obj.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), canonical_value(&obj[k]));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(canonical_value).collect()),
        other => other.clone(),
    }
}

/// Compact JSON with sorted keys.
pub fn canonical_json(value: &Value) -> String {
    serde_json::to_string(&canonical_value(value)).expect("json values always serialize")
}

fn ensure_valid(record: &Record) -> Result<Value, MetadataError> {
    let value = record.to_value();
    let violations = super::validate_value(&value);
    if violations.is_empty() {
        Ok(value)
    } else {
        Err(MetadataError::Invalid(violations))
    }
}

/// Machine format: pretty-printed JSON, keys sorted, trailing newline.
pub fn render_machine(record: &Record) -> Result<String, MetadataError> {
    let value = ensure_valid(record)?;
    let mut s = serde_json::to_string_pretty(&canonical_value(&value)).expect("json values always serialize");
    s.push('\n');
    Ok(s)
}

/// Human format: a self-contained HTML page listing every field.
pub fn render_human(record: &Record) -> Result<String, MetadataError> {
    let value = ensure_valid(record)?;
    let title = escape(record.title());
    let mut body = String::new();
    body.push_str(&format!("<h1>{title}</h1>\n"));
    body.push_str(&format!("<p class=\"identifier\">{}</p>\n", escape(record.identifier())));
    let authors: Vec<String> = record.authors().iter().map(|a| escape(&a.name)).collect();
    body.push_str(&format!("<p class=\"authors\">{}</p>\n", authors.join(", ")));
    render_value(&canonical_value(&value), &mut body);
    Ok(format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{title}</title>\n\
         <style>body{{font-family:sans-serif;max-width:60em;margin:2em auto}}dt{{font-weight:bold}}</style>\n\
         </head>\n<body>\n{body}</body>\n</html>\n"
    ))
}

fn render_value(value: &Value, out: &mut String) {
    match value {
        Value::Object(obj) => {
            out.push_str("<dl>\n");
            for (k, v) in obj {
                out.push_str(&format!("<dt>{}</dt>\n<dd>", escape(k)));
                render_value(v, out);
                out.push_str("</dd>\n");
            }
            out.push_str("</dl>\n");
        }
        Value::Array(items) if items.iter().all(|v| v.is_number()) => {
            let nums: Vec<String> = items.iter().map(Value::to_string).collect();
            out.push_str(&format!("<code>[{}]</code>", nums.join(", ")));
        }
        Value::Array(items) => {
            out.push_str("<ul>\n");
            for v in items {
                out.push_str("<li>");
                render_value(v, out);
                out.push_str("</li>\n");
            }
            out.push_str("</ul>\n");
        }
        Value::String(s) => out.push_str(&escape(s)),
        Value::Null => out.push_str("<em>variable</em>"),
        other => out.push_str(&other.to_string()),
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::super::*;
    use super::*;

    #[test]
    fn machine_round_trip() {
        for record in [Record::Model(model()), Record::Dataset(dataset())] {
            let doc = render_machine(&record).unwrap();
            assert!(validate_document(&doc).unwrap().is_empty());
            assert_eq!(parse_record(&doc).unwrap(), record);
        }
    }

    #[test]
    fn machine_keys_are_sorted() {
        let doc = render_machine(&Record::Model(model())).unwrap();
        let top: Vec<&str> = doc
            .lines()
            .filter(|l| l.starts_with("  \"") && !l.starts_with("   "))
            .map(|l| l.trim().split('"').nth(1).unwrap())
            .collect();
        let mut sorted = top.clone();
        sorted.sort();
        assert_eq!(top, sorted);
        assert!(top.contains(&"identifier_type"));
    }

    #[test]
    fn identifier_and_type_travel_together() {
        let v: Value = serde_json::from_str(&render_machine(&Record::Model(model())).unwrap()).unwrap();
        assert_eq!(v["identifier"], "local-doi:10.99999/0badc0de");
        assert_eq!(v["identifier_type"], "local-doi");
    }

    #[test]
    fn human_page_lists_title_id_and_authors() {
        let mut m = model();
        m.authors.push(Author { name: "Grace <Hopper>".into(), contact: None });
        let html = render_human(&Record::Model(m)).unwrap();
        assert!(html.starts_with("<!DOCTYPE html>"));
        assert!(html.contains("Peak localizer"));
        assert!(html.contains("local-doi:10.99999/0badc0de"));
        assert!(html.contains("Ada Example"));
        assert!(html.contains("Grace &lt;Hopper&gt;"));
        assert!(html.contains("servable_digest"));
    }

    #[test]
    fn invalid_records_are_refused() {
        let mut m = model();
        m.keywords.clear();
        let r = Record::Model(m);
        assert!(matches!(render_machine(&r), Err(MetadataError::Invalid(_))));
        assert!(matches!(render_human(&r), Err(MetadataError::Invalid(_))));
    }
}
