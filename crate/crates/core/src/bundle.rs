//! TOML persistence for speculations and device state.
//!
//! ```toml
//! table = "0808...."                  # hex table blob
//! subpaths = "subpath 1 08000010 08000024\n"
//!
//! [prefix]
//! len = 2
//! prefix_marker = "a5a5"
//! subpath_marker = "5a5a"
//! ```
//!
//! Every key is optional; a missing key means the stage is off.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::huffman::{HuffmanError, HuffmanTable};
use crate::prefix::{PrefixConfig, PrefixError};
use crate::protocol::StoredSpeculation;
use crate::subpath::{parse_specs, specs_to_text, SubPathError};

#[derive(Debug, Error)]
pub enum BundleError {
    #[error(transparent)]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Write(#[from] toml::ser::Error),
    #[error("bad hex in `{field}`")]
    Hex { field: &'static str },
    #[error(transparent)]
    Table(#[from] HuffmanError),
    #[error(transparent)]
    Prefix(#[from] PrefixError),
    #[error(transparent)]
    SubPath(#[from] SubPathError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixRecord {
    pub len: u8,
    pub prefix_marker: String,
    pub subpath_marker: String,
}

/// Serialized form of [`StoredSpeculation`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeculationBundle {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subpaths: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<PrefixRecord>,
}

fn unhex(s: &str, field: &'static str) -> Result<Vec<u8>, BundleError> {
    hex::decode(s.trim()).map_err(|_| BundleError::Hex { field })
}

impl SpeculationBundle {
    pub fn from_speculation(spec: &StoredSpeculation) -> Self {
        SpeculationBundle {
            table: spec.table.as_ref().map(|t| hex::encode(t.to_bytes())),
            subpaths: spec.subpaths.as_deref().map(specs_to_text),
            prefix: spec.prefix.as_ref().map(|p| PrefixRecord {
                len: p.prefix_len() as u8,
                prefix_marker: hex::encode(p.prefix_marker()),
                subpath_marker: hex::encode(p.subpath_marker()),
            }),
        }
    }

    pub fn to_speculation(&self) -> Result<StoredSpeculation, BundleError> {
        let table = match &self.table {
            Some(h) => Some(HuffmanTable::from_bytes(&unhex(h, "table")?)?),
            None => None,
        };
        let prefix = match &self.prefix {
            Some(r) => Some(PrefixConfig::new(
                r.len,
                unhex(&r.prefix_marker, "prefix_marker")?,
                unhex(&r.subpath_marker, "subpath_marker")?,
            )?),
            None => None,
        };
        let subpaths = match &self.subpaths {
            Some(text) => Some(parse_specs(text)?).filter(|s| !s.is_empty()),
            None => None,
        };
        Ok(StoredSpeculation {
            table,
            prefix,
            subpaths,
        })
    }
}

impl StoredSpeculation {
    pub fn to_toml(&self) -> Result<String, BundleError> {
        Ok(toml::to_string(&SpeculationBundle::from_speculation(self))?)
    }

    pub fn from_toml(text: &str) -> Result<Self, BundleError> {
        toml::from_str::<SpeculationBundle>(text)?.to_speculation()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Address, SubPathId};
    use crate::subpath::SubPathSpec;

    #[test]
    fn empty_bundle_is_all_off() {
        let s = StoredSpeculation::from_toml("").unwrap();
        assert_eq!(s, StoredSpeculation::default());
        assert_eq!(s.to_toml().unwrap(), "");
    }

    #[test]
    fn full_round_trip() {
        let mut f = [1u64; 256];
        f[7] = 1000;
        let spec = StoredSpeculation {
            table: Some(HuffmanTable::build(&f)),
            prefix: Some(PrefixConfig::with_marker_bytes(2, 0x33, 0x44).unwrap()),
            subpaths: Some(vec![SubPathSpec::new(
                SubPathId::new(1).unwrap(),
                vec![Address(0x0800_0010), Address(0x0800_0024)],
            )]),
        };
        let text = spec.to_toml().unwrap();
        assert!(text.contains("prefix_marker = \"3333\""));
        assert_eq!(StoredSpeculation::from_toml(&text).unwrap(), spec);
    }

    #[test]
    fn bad_fields() {
        assert!(matches!(
            StoredSpeculation::from_toml("table = \"zz\""),
            Err(BundleError::Hex { field: "table" })
        ));
        assert!(matches!(
            StoredSpeculation::from_toml("table = \"00\""),
            Err(BundleError::Table(_))
        ));
        assert!(matches!(
            StoredSpeculation::from_toml("[prefix]\nlen = 2\nprefix_marker = \"a5\"\nsubpath_marker = \"5a5a\""),
            Err(BundleError::Prefix(_))
        ));
    }
}
