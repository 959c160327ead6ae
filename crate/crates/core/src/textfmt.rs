//! Fixed-precision real formatting for persisted documents.
//!
//! Reals are written with 17 significant digits, enough to round-trip every
//! finite `f64` bit for bit.

use serde_json::Value;

pub(crate) fn real_text(x: f64) -> String {
    format!("{x:.16e}")
}

/// JSON number holding `x` with 17 significant digits.
///
/// Non-finite values have no JSON representation and become `null`.
pub(crate) fn real(x: f64) -> Value {
    if !x.is_finite() {
        return Value::Null;
    }
    serde_json::from_str(&real_text(x)).expect("formatted real is valid JSON")
}

pub(crate) fn reals(xs: impl IntoIterator<Item = f64>) -> Value {
    Value::Array(xs.into_iter().map(real).collect())
}

pub(crate) fn to_pretty(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("JSON value serializes");
    s.push('\n');
    s
}
