//! Canonical structured text: JSON with object keys sorted and no
//! insignificant whitespace. Used for bundles, reports and wire frames.

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Compact canonical JSON. `serde_json::Value` keeps object keys in a
/// `BTreeMap`, so going through it sorts every level.
pub fn to_canonical<T: Serialize + ?Sized>(v: &T) -> String {
    let value = serde_json::to_value(v).expect("serializable value");
    serde_json::to_string(&value).expect("json")
}

/// Indented canonical JSON for files meant to be read by people.
pub fn to_canonical_pretty<T: Serialize + ?Sized>(v: &T) -> String {
    let value = serde_json::to_value(v).expect("serializable value");
    let mut s = serde_json::to_string_pretty(&value).expect("json");
    s.push('\n');
    s
}

pub fn from_canonical<T: DeserializeOwned>(s: &str) -> Result<T, serde_json::Error> {
    serde_json::from_str(s)
}
