//! Strict validator for the JSON-Schema subset used by the report schemas:
//! `type`, `const`, `properties`, `required`, `additionalProperties: false`,
//! `items`, `minItems`, numeric bounds, `$ref` into `#/$defs`, and the
//! `sha256-hex` string format. Unknown schema keywords are rejected so the
//! schema files cannot silently drift past what is checked.

use serde_json::Value;

const KEYWORDS: &[&str] = &[
    "$id",
    "$defs",
    "$ref",
    "type",
    "const",
    "properties",
    "required",
    "additionalProperties",
    "items",
    "minItems",
    "minimum",
    "maximum",
    "exclusiveMinimum",
    "format",
];

pub fn validate(schema: &Value, doc: &Value) -> Result<(), String> {
    check(schema, schema, doc, "$")
}

fn resolve<'a>(root: &'a Value, reference: &str) -> Result<&'a Value, String> {
    let name = reference
        .strip_prefix("#/$defs/")
        .ok_or_else(|| format!("unsupported $ref {reference}"))?;
    root["$defs"]
        .get(name)
        .ok_or_else(|| format!("dangling $ref {reference}"))
}

fn check(root: &Value, schema: &Value, doc: &Value, at: &str) -> Result<(), String> {
    let obj = schema
        .as_object()
        .ok_or_else(|| format!("{at}: schema node is not an object"))?;
    if let Some(k) = obj.keys().find(|k| !KEYWORDS.contains(&k.as_str())) {
        return Err(format!("{at}: unsupported schema keyword '{k}'"));
    }
    if let Some(r) = obj.get("$ref") {
        return check(root, resolve(root, r.as_str().unwrap_or(""))?, doc, at);
    }
    if let Some(c) = obj.get("const") {
        if c != doc {
            return Err(format!("{at}: expected {c}, found {doc}"));
        }
    }
    if let Some(t) = obj.get("type").and_then(Value::as_str) {
        let ok = match t {
            "object" => doc.is_object(),
            "array" => doc.is_array(),
            "string" => doc.is_string(),
            "number" => doc.is_number(),
            "integer" => doc.is_u64() || doc.is_i64(),
            other => return Err(format!("{at}: unsupported type '{other}'")),
        };
        if !ok {
            return Err(format!("{at}: expected {t}, found {doc}"));
        }
    }
    if let Some(x) = doc.as_f64() {
        let bound = |k: &str| obj.get(k).and_then(Value::as_f64);
        if bound("minimum").is_some_and(|m| x < m)
            || bound("maximum").is_some_and(|m| x > m)
            || bound("exclusiveMinimum").is_some_and(|m| x <= m)
        {
            return Err(format!("{at}: {x} out of bounds"));
        }
    }
    if obj.get("format").and_then(Value::as_str) == Some("sha256-hex") {
        let s = doc.as_str().unwrap_or("");
        if s.len() != 64
            || !s
                .chars()
                .all(|c| c.is_ascii_digit() || ('a'..='f').contains(&c))
        {
            return Err(format!("{at}: '{s}' is not a lowercase sha256 digest"));
        }
    }
    if let Some(map) = doc.as_object() {
        let props = obj.get("properties").and_then(Value::as_object);
        for req in obj
            .get("required")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
        {
            let key = req.as_str().unwrap_or("");
            if !map.contains_key(key) {
                return Err(format!("{at}: missing required '{key}'"));
            }
        }
        for (key, value) in map {
            match props.and_then(|p| p.get(key)) {
                Some(sub) => check(root, sub, value, &format!("{at}.{key}"))?,
                None if obj.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    return Err(format!("{at}: unexpected property '{key}'"));
                }
                None => {}
            }
        }
    }
    if let Some(items) = doc.as_array() {
        if let Some(min) = obj.get("minItems").and_then(Value::as_u64) {
            if (items.len() as u64) < min {
                return Err(format!("{at}: {} items, need at least {min}", items.len()));
            }
        }
        if let Some(sub) = obj.get("items") {
            for (i, item) in items.iter().enumerate() {
                check(root, sub, item, &format!("{at}[{i}]"))?;
            }
        }
    }
    Ok(())
}
