use std::collections::BTreeSet;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::SchemaError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyType {
    Text,
    Number,
    Date,
    Boolean,
    Options,
    Array,
}

impl PropertyType {
    pub fn as_str(self) -> &'static str {
        match self {
            PropertyType::Text => "text",
            PropertyType::Number => "number",
            PropertyType::Date => "date",
            PropertyType::Boolean => "boolean",
            PropertyType::Options => "options",
            PropertyType::Array => "array",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SchemaProperty {
    pub id: String,
    pub name: String,
    pub system_name: String,
    #[serde(rename = "type")]
    pub prop_type: PropertyType,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction_hints: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collection_id: Option<String>,
    #[serde(default = "one")]
    pub version: u32,
}

fn one() -> u32 {
    1
}

impl SchemaProperty {
    pub fn new(system_name: &str, name: &str, prop_type: PropertyType, description: &str) -> Self {
        Self {
            id: format!("prop-{system_name}"),
            name: name.to_string(),
            system_name: system_name.to_string(),
            prop_type,
            description: description.to_string(),
            extraction_hints: None,
            options: None,
            collection_id: None,
            version: 1,
        }
    }

    pub fn with_options(mut self, options: &[&str]) -> Self {
        self.options = Some(options.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn with_hints(mut self, hints: &str) -> Self {
        self.extraction_hints = Some(hints.to_string());
        self
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let bad = |why: &str| Err(SchemaError::InvalidProperty(format!("{}: {why}", self.system_name)));
        if self.id.trim().is_empty() || self.name.trim().is_empty() || self.system_name.trim().is_empty() {
            return bad("id, name and systemName are required");
        }
        let has_options = self.options.as_ref().is_some_and(|o| !o.is_empty());
        match (self.prop_type, has_options) {
            (PropertyType::Options, false) => bad("options type requires a non-empty option list"),
            (t, true) if t != PropertyType::Options => bad("only options-typed properties carry options"),
            _ => Ok(()),
        }
    }

    /// Text used to embed the property for relevance selection.
    pub fn metadata_text(&self) -> String {
        let mut s = format!("{} {}", self.name, self.description);
        if let Some(h) = &self.extraction_hints {
            s.push(' ');
            s.push_str(h);
        }
        if let Some(o) = &self.options {
            s.push(' ');
            s.push_str(&o.join(" "));
        }
        s
    }

    /// Validates and normalizes a raw extracted value against the declared type.
    ///
    /// Numbers parse leniently (currency symbols, thousands separators,
    /// k/m suffixes); options, booleans and dates must match exactly.
    pub fn coerce(&self, raw: &Value) -> Result<TypedValue, String> {
        match self.prop_type {
            PropertyType::Text => match raw {
                Value::String(s) if !s.trim().is_empty() => Ok(TypedValue::Text(s.trim().to_string())),
                Value::Number(n) => Ok(TypedValue::Text(n.to_string())),
                _ => Err(format!("expected text, got {raw}")),
            },
            PropertyType::Number => match raw {
                Value::Number(n) => n.as_f64().map(TypedValue::Number).ok_or_else(|| "non-finite number".into()),
                Value::String(s) => parse_lenient_number(s)
                    .map(TypedValue::Number)
                    .ok_or_else(|| format!("expected number, got {s:?}")),
                _ => Err(format!("expected number, got {raw}")),
            },
            PropertyType::Date => match raw {
                Value::String(s) => NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
                    .map(TypedValue::Date)
                    .map_err(|_| format!("expected YYYY-MM-DD date, got {s:?}")),
                _ => Err(format!("expected date, got {raw}")),
            },
            PropertyType::Boolean => match raw {
                Value::Bool(b) => Ok(TypedValue::Boolean(*b)),
                Value::String(s) if s == "true" => Ok(TypedValue::Boolean(true)),
                Value::String(s) if s == "false" => Ok(TypedValue::Boolean(false)),
                _ => Err(format!("expected boolean, got {raw}")),
            },
            PropertyType::Options => {
                let Value::String(s) = raw else {
                    return Err(format!("expected option, got {raw}"));
                };
                let declared = self.options.as_deref().unwrap_or_default();
                if declared.iter().any(|o| o == s) {
                    Ok(TypedValue::Option(s.clone()))
                } else {
                    Err(format!("{s:?} is not a declared option"))
                }
            }
            PropertyType::Array => match raw {
                Value::Array(items) => {
                    let mut out = Vec::with_capacity(items.len());
                    for it in items {
                        match it {
                            Value::String(s) if !s.trim().is_empty() => out.push(s.trim().to_string()),
                            Value::Number(n) => out.push(n.to_string()),
                            _ => return Err(format!("array items must be strings, got {it}")),
                        }
                    }
                    if out.is_empty() {
                        return Err("empty array".into());
                    }
                    Ok(TypedValue::Array(out))
                }
                Value::String(s) if !s.trim().is_empty() => Ok(TypedValue::Array(vec![s.trim().to_string()])),
                _ => Err(format!("expected array, got {raw}")),
            },
        }
    }
}

/// Parses "$450,000", "1.2M", "30k", "12%" and plain numerals.
pub fn parse_lenient_number(s: &str) -> Option<f64> {
    let mut t: String = s
        .trim()
        .chars()
        .filter(|c| !matches!(c, '$' | '€' | '£' | ',' | '_' | ' ' | '%'))
        .collect();
    let mut mult = 1.0;
    if let Some(last) = t.chars().last() {
        let m = match last.to_ascii_lowercase() {
            'k' => Some(1e3),
            'm' => Some(1e6),
            'b' => Some(1e9),
            _ => None,
        };
        if let Some(m) = m {
            mult = m;
            t.pop();
        }
    }
    let v: f64 = t.parse().ok()?;
    v.is_finite().then_some(v * mult)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TypedValue {
    Boolean(bool),
    Number(f64),
    Date(NaiveDate),
    Array(Vec<String>),
    Text(String),
    Option(String),
}

impl fmt::Display for TypedValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TypedValue::Text(s) | TypedValue::Option(s) => f.write_str(s),
            TypedValue::Number(n) if n.fract() == 0.0 && n.abs() < 1e15 => write!(f, "{}", *n as i64),
            TypedValue::Number(n) => write!(f, "{n}"),
            TypedValue::Date(d) => write!(f, "{}", d.format("%Y-%m-%d")),
            TypedValue::Boolean(b) => write!(f, "{b}"),
            TypedValue::Array(v) => f.write_str(&v.join(", ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Schema {
    pub id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default = "one")]
    pub version: u32,
    pub properties: Vec<SchemaProperty>,
}

impl Schema {
    pub fn new(id: &str, name: &str, properties: Vec<SchemaProperty>) -> Self {
        Self {
            id: id.to_string(),
            name: name.to_string(),
            description: String::new(),
            version: 1,
            properties,
        }
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.properties.is_empty() {
            return Err(SchemaError::EmptySchema);
        }
        let mut seen = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for p in &self.properties {
            p.validate()?;
            if !seen.insert(p.system_name.as_str()) {
                return Err(SchemaError::InvalidProperty(format!(
                    "duplicate systemName {}",
                    p.system_name
                )));
            }
            if !ids.insert(p.id.as_str()) {
                return Err(SchemaError::InvalidProperty(format!("duplicate id {}", p.id)));
            }
        }
        Ok(())
    }

    pub fn property(&self, id: &str) -> Option<&SchemaProperty> {
        self.properties.iter().find(|p| p.id == id || p.system_name == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.properties.iter().position(|p| p.id == id)
    }
}
