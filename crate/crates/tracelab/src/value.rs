//! The serializable value universe shared by tool inputs, tool outputs,
//! trace records and dataset files.
//!
//! Every value maps 1:1 onto a JSON document. Maps are ordered, so the
//! canonical encoding of a value is byte-stable across runs.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A JSON-compatible runtime value.
///
/// Integers and floats are kept distinct so that schema export and shape
/// validation can tell them apart; on the wire both are JSON numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Number(f64),
    Text(String),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
}

/// Argument maps passed to tools; ordered for canonical encoding.
pub type ValueMap = BTreeMap<String, Value>;

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, Value>> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Value::Int(_) | Value::Number(_))
    }

    /// Canonical JSON encoding. Map keys are sorted by construction, so the
    /// same value always encodes to the same bytes.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("value is always JSON-encodable")
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Number(n) => write!(f, "{n}"),
            Value::Text(s) => write!(f, "{s}"),
            other => write!(f, "{}", other.to_canonical_json()),
        }
    }
}

impl From<f64> for Value {
    fn from(n: f64) -> Self {
        Value::Number(n)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

/// Hex-encoded SHA-256 over the canonical encoding of an argument map.
/// Stable under key reordering because the map is ordered.
pub fn args_digest(args: &ValueMap) -> String {
    let mut hasher = Sha256::new();
    for (k, v) in args {
        hasher.update(k.as_bytes());
        hasher.update([0u8]);
        hasher.update(v.to_canonical_json().as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

/// Short content digest used for deterministic ids and file names.
pub fn short_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(&hasher.finalize()[..6])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_preserves_variants() {
        let v = Value::Map(BTreeMap::from([
            ("f".to_string(), Value::Number(3.5)),
            ("i".to_string(), Value::Int(3)),
            ("b".to_string(), Value::Bool(true)),
            ("t".to_string(), Value::Text("CCO".to_string())),
            (
                "l".to_string(),
                Value::List(vec![Value::Int(1), Value::Number(2.25)]),
            ),
        ]));
        let json = v.to_canonical_json();
        let back: Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn integers_stay_integers_through_json() {
        let back: Value = serde_json::from_str("3").unwrap();
        assert_eq!(back, Value::Int(3));
        let back: Value = serde_json::from_str("3.0").unwrap();
        assert!(matches!(back, Value::Number(_)));
    }

    #[test]
    fn args_digest_ignores_insertion_order() {
        let mut a = ValueMap::new();
        a.insert("x".into(), Value::Int(1));
        a.insert("y".into(), Value::Int(2));
        let mut b = ValueMap::new();
        b.insert("y".into(), Value::Int(2));
        b.insert("x".into(), Value::Int(1));
        assert_eq!(args_digest(&a), args_digest(&b));
        b.insert("x".into(), Value::Int(7));
        assert_ne!(args_digest(&a), args_digest(&b));
    }
}
