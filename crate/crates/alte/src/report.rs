//! Result envelopes and rendering: JSON output, significance-star tables,
//! tidy CSV, and atomic file writes.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Significance stars at the 0.1 / 0.05 / 0.01 levels.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Writes via a temporary file in the target directory followed by a rename,
/// so a partial run never leaves a corrupt artifact.
pub fn write_atomic<P: AsRef<Path>>(path: P, content: &str) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(content.as_bytes())?;
    tmp.flush()?;
    tmp.persist(path)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Serializes to pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// One rendered row of an estimate table.
#[derive(Debug, Clone)]
pub struct TableRow {
    pub label: String,
    /// One (estimate, se, p) cell per column; None renders blank.
    pub cells: Vec<Option<(f64, f64, f64)>>,
}

/// Renders an estimation table in the journal layout: one column per method,
/// `estimate[stars]` over `(se)`.
pub fn render_table(title: &str, columns: &[String], rows: &[TableRow]) -> String {
    let width = 14usize;
    let label_width = rows
        .iter()
        .map(|r| r.label.len())
        .chain([12])
        .max()
        .unwrap_or(12)
        + 2;
    let mut out = String::new();
    out.push_str(title);
    out.push('\n');
    let total = label_width + columns.len() * (width + 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    out.push_str(&format!("{:<label_width$}", ""));
    for c in columns {
        out.push_str(&format!("{c:>width$} "));
    }
    out.push('\n');
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{:<label_width$}", row.label));
        for cell in &row.cells {
            match cell {
                Some((est, _, p)) => {
                    out.push_str(&format!("{:>width$} ", format!("{est:.3}{}", stars(*p))));
                }
                None => out.push_str(&format!("{:>width$} ", "")),
            }
        }
        out.push('\n');
        out.push_str(&format!("{:<label_width$}", ""));
        for cell in &row.cells {
            match cell {
                Some((_, se, _)) => {
                    out.push_str(&format!("{:>width$} ", format!("({se:.3})")));
                }
                None => out.push_str(&format!("{:>width$} ", "")),
            }
        }
        out.push('\n');
    }
    out.push_str(&"-".repeat(total));
    out.push('\n');
    out.push_str("*** p<0.01, ** p<0.05, * p<0.1\n");
    out
}

/// Validates a JSON value against the subset of JSON Schema used by the
/// shipped schema files: `type`, `properties`, `required`, `items`, `enum`.
/// Returns the path of the first violation.
pub fn validate_schema(value: &Value, schema: &Value) -> std::result::Result<(), String> {
    validate_at(value, schema, "$")
}

fn type_matches(value: &Value, ty: &str) -> bool {
    match ty {
        "object" => value.is_object(),
        "array" => value.is_array(),
        "string" => value.is_string(),
        "number" => value.is_number(),
        "integer" => value.is_i64() || value.is_u64(),
        "boolean" => value.is_boolean(),
        "null" => value.is_null(),
        _ => false,
    }
}

fn validate_at(value: &Value, schema: &Value, path: &str) -> std::result::Result<(), String> {
    let obj = match schema.as_object() {
        Some(o) => o,
        None => return Ok(()),
    };
    if let Some(ty) = obj.get("type") {
        let ok = match ty {
            Value::String(s) => type_matches(value, s),
            Value::Array(options) => options
                .iter()
                .filter_map(|t| t.as_str())
                .any(|s| type_matches(value, s)),
            _ => true,
        };
        if !ok {
            return Err(format!("{path}: expected type {ty}, got {value}"));
        }
    }
    if let Some(allowed) = obj.get("enum").and_then(|e| e.as_array()) {
        if !allowed.contains(value) {
            return Err(format!("{path}: value {value} not in enum"));
        }
    }
    if let Some(required) = obj.get("required").and_then(|r| r.as_array()) {
        for key in required.iter().filter_map(|k| k.as_str()) {
            if value.get(key).is_none() {
                return Err(format!("{path}: missing required key `{key}`"));
            }
        }
    }
    if let Some(props) = obj.get("properties").and_then(|p| p.as_object()) {
        for (key, sub) in props {
            if let Some(v) = value.get(key) {
                validate_at(v, sub, &format!("{path}.{key}"))?;
            }
        }
    }
    if let Some(items) = obj.get("items") {
        if let Some(arr) = value.as_array() {
            for (i, v) in arr.iter().enumerate() {
                validate_at(v, items, &format!("{path}[{i}]"))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn stars_thresholds() {
        assert_eq!(stars(0.005), "***");
        assert_eq!(stars(0.03), "**");
        assert_eq!(stars(0.07), "*");
        assert_eq!(stars(0.2), "");
    }

    #[test]
    fn atomic_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x/result.json");
        write_atomic(&path, "{\"a\":1}\n").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "{\"a\":1}\n");
        // overwrite keeps the new content
        write_atomic(&path, "{\"a\":2}\n").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "{\"a\":2}\n");
    }

    #[test]
    fn schema_validator_catches_violations() {
        let schema = json!({
            "type": "object",
            "required": ["tau_hat", "se"],
            "properties": {
                "tau_hat": {"type": "number"},
                "se": {"type": "number"},
                "estimator": {"type": "string", "enum": ["dim", "stacked"]},
                "weights": {"type": "array", "items": {"type": "number"}}
            }
        });
        let good = json!({"tau_hat": 1.0, "se": 0.2, "estimator": "dim", "weights": [0.5, 0.5]});
        assert!(validate_schema(&good, &schema).is_ok());
        let missing = json!({"tau_hat": 1.0});
        assert!(validate_schema(&missing, &schema).is_err());
        let bad_enum = json!({"tau_hat": 1.0, "se": 0.2, "estimator": "other"});
        assert!(validate_schema(&bad_enum, &schema).is_err());
        let bad_item = json!({"tau_hat": 1.0, "se": 0.2, "weights": [0.5, "x"]});
        assert!(validate_schema(&bad_item, &schema).is_err());
    }

    #[test]
    fn table_renders_stars_and_ses() {
        let rows = vec![TableRow {
            label: "treat (full)".into(),
            cells: vec![Some((0.384, 0.196, 0.05)), None],
        }];
        let t = render_table("Estimates", &["WSI".into(), "SUR".into()], &rows);
        assert!(t.contains("0.384*"));
        assert!(t.contains("(0.196)"));
    }
}
