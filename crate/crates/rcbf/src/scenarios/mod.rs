//! Benchmark scenarios and their parameter schemas.

pub mod acc;
pub mod multirotor;

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Where a parameter value comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Stated in the method's source description.
    Paper,
    /// Standard benchmark convention.
    ExternalConvention,
    /// Chosen for this implementation (see the README).
    Tuned,
    /// Set by the user's configuration.
    Override,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Paper => "paper",
            Provenance::ExternalConvention => "external-convention",
            Provenance::Tuned => "tuned",
            Provenance::Override => "override",
        })
    }
}

/// One entry of a scenario parameter schema.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub key: &'static str,
    pub value: Value,
    pub provenance: Provenance,
}

/// Flat key/value view of a scenario's parameters.
pub trait ParamSchema {
    fn params(&self) -> Vec<ParamEntry>;
    fn set_param(&mut self, key: &str, value: &Value) -> Result<()>;

    fn keys(&self) -> Vec<&'static str> {
        self.params().into_iter().map(|p| p.key).collect()
    }
}

pub(crate) fn entry(key: &'static str, value: impl Serialize, provenance: Provenance) -> ParamEntry {
    ParamEntry { key, value: serde_json::to_value(value).expect("plain data serialises"), provenance }
}

pub(crate) fn as_f64(key: &str, v: &Value) -> Result<f64> {
    let x = v
        .as_f64()
        .ok_or_else(|| Error::param(key, format!("expected a number, got {v}")))?;
    if !x.is_finite() {
        return Err(Error::param(key, "must be finite"));
    }
    Ok(x)
}

pub(crate) fn as_vec(key: &str, v: &Value, len: Option<usize>) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::param(key, format!("expected an array, got {v}")))?;
    if let Some(n) = len {
        if arr.len() != n {
            return Err(Error::param(key, format!("expected {n} entries, got {}", arr.len())));
        }
    }
    arr.iter().map(|x| as_f64(key, x)).collect()
}

pub(crate) fn as_arr<const N: usize>(key: &str, v: &Value) -> Result<[f64; N]> {
    let v = as_vec(key, v, Some(N))?;
    Ok(v.try_into().expect("length checked"))
}

pub(crate) fn unknown(key: &str) -> Error {
    Error::param(key, "unknown parameter")
}

/// Uniform draw range `[lo, hi]`.
pub(crate) fn check_range(key: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0] <= r[1]) {
        return Err(Error::param(key, "range lower end exceeds upper end"));
    }
    Ok(())
}
