//! Canonical JSON encoding.
//!
//! Every digested or signed payload goes through [`to_canonical_bytes`]:
//! UTF-8, object keys sorted lexicographically, no insignificant whitespace,
//! integers only. Probabilities are carried as fixed-precision decimal
//! strings (see [`decimal`]) so no float ever reaches the encoder.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::digest::Digest;

/// Digits after the decimal point for serialized probabilities.
pub const DECIMAL_PLACES: usize = 12;

#[derive(Debug, Error)]
pub enum CanonicalError {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("floating-point number at {0} is not allowed in canonical payloads")]
    Float(String),
}

/// Serialize `value` to canonical JSON bytes.
pub fn to_canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, CanonicalError> {
    let v = serde_json::to_value(value)?;
    reject_floats(&v, "$")?;
    // serde_json's map is ordered (BTreeMap) unless `preserve_order` is enabled.
    Ok(serde_json::to_vec(&v)?)
}

pub fn canonical_digest<T: Serialize + ?Sized>(value: &T) -> Result<Digest, CanonicalError> {
    Ok(Digest::of(&to_canonical_bytes(value)?))
}

pub fn from_slice<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, CanonicalError> {
    Ok(serde_json::from_slice(bytes)?)
}

/// True when `bytes` is exactly the canonical encoding of the JSON it contains.
pub fn is_canonical(bytes: &[u8]) -> bool {
    match serde_json::from_slice::<Value>(bytes) {
        Ok(v) => reject_floats(&v, "$").is_ok() && serde_json::to_vec(&v).ok().as_deref() == Some(bytes),
        Err(_) => false,
    }
}

fn reject_floats(v: &Value, path: &str) -> Result<(), CanonicalError> {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => Err(CanonicalError::Float(path.to_string())),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .try_for_each(|(i, x)| reject_floats(x, &format!("{path}[{i}]"))),
        Value::Object(map) => map
            .iter()
            .try_for_each(|(k, x)| reject_floats(x, &format!("{path}.{k}"))),
        _ => Ok(()),
    }
}

/// Fixed-precision decimal rendering of a probability.
pub fn format_decimal(x: f64) -> String {
    format!("{:.*}", DECIMAL_PLACES, x)
}

pub fn parse_decimal(s: &str) -> Result<f64, std::num::ParseFloatError> {
    s.trim().parse::<f64>()
}

/// Round a value through its serialized form, so every party computes with
/// exactly the number that appears on the wire.
pub fn quantize(x: f64) -> f64 {
    parse_decimal(&format_decimal(x)).unwrap_or(x)
}

/// `#[serde(with = "decimal")]` for `f64` fields.
pub mod decimal {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format_decimal(*x))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        super::parse_decimal(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use std::collections::HashMap;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Probe {
        zeta: u64,
        alpha: String,
        #[serde(with = "decimal")]
        p: f64,
    }

    #[test]
    fn keys_sorted_and_compact() {
        let v = Probe { zeta: 3, alpha: "a b".into(), p: 0.0028 };
        let bytes = to_canonical_bytes(&v).unwrap();
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            r#"{"alpha":"a b","p":"0.002800000000","zeta":3}"#
        );
        assert!(is_canonical(&bytes));
        let back: Probe = from_slice(&bytes).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn hash_map_order_does_not_leak() {
        let mut a = HashMap::new();
        let mut b = HashMap::new();
        for i in 0..50u64 {
            a.insert(format!("k{i}"), i);
        }
        for i in (0..50u64).rev() {
            b.insert(format!("k{i}"), i);
        }
        assert_eq!(to_canonical_bytes(&a).unwrap(), to_canonical_bytes(&b).unwrap());
    }

    #[test]
    fn floats_rejected() {
        let err = to_canonical_bytes(&serde_json::json!({"a": [1, 2.5]})).unwrap_err();
        assert!(matches!(err, CanonicalError::Float(p) if p == "$.a[1]"));
    }

    #[test]
    fn whitespace_is_not_canonical() {
        assert!(!is_canonical(br#"{"a": 1}"#));
        assert!(!is_canonical(br#"{"b":1,"a":2}"#));
        assert!(is_canonical(br#"{"a":2,"b":1}"#));
    }

    #[test]
    fn quantize_is_idempotent() {
        for x in [0.05, 0.1 + 0.2, 1.0 / 3.0, 0.0, 1.0] {
            let q = quantize(x);
            assert_eq!(quantize(q), q);
            assert!((q - x).abs() <= 5e-13);
        }
    }
}
