//! Dataset manifests: the ordered item records whose canonical encoding
//! defines a dataset version's root hash.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{self, CanonicalError};
use crate::digest::Digest;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest encoding: {0}")]
    Encoding(#[from] CanonicalError),
    #[error("item at position {position} is malformed: {reason}")]
    Malformed { position: usize, reason: String },
    #[error("dataset has no items")]
    Empty,
    #[error("item {0} is not in the dataset")]
    ItemUnavailable(u64),
}

impl DatasetError {
    pub fn category(&self) -> &'static str {
        match self {
            DatasetError::Io(_) => "io",
            DatasetError::Encoding(_) | DatasetError::Malformed { .. } | DatasetError::Empty => "malformed-manifest",
            DatasetError::ItemUnavailable(_) => "item-unavailable",
        }
    }
}

/// One leaf of a dataset version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub index: u64,
    pub item_id: String,
    pub content_hash: Digest,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct ItemPreimage<'a> {
    index: u64,
    item_id: &'a str,
    metadata: &'a BTreeMap<String, String>,
}

impl DatasetItem {
    pub fn new(index: u64, item_id: impl Into<String>, metadata: BTreeMap<String, String>) -> Self {
        let mut item = DatasetItem { index, item_id: item_id.into(), content_hash: Digest::ZERO, metadata };
        item.content_hash = item.compute_content_hash();
        item
    }

    /// SHA-256 of the canonical `{index, item_id, metadata}` record.
    pub fn compute_content_hash(&self) -> Digest {
        canonical::canonical_digest(&ItemPreimage {
            index: self.index,
            item_id: &self.item_id,
            metadata: &self.metadata,
        })
        .expect("item preimage has no floats")
    }

    pub fn hash_matches(&self) -> bool {
        self.content_hash == self.compute_content_hash()
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }
}

/// A validated dataset manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    items: Vec<DatasetItem>,
    root_hash: Digest,
}

impl Dataset {
    pub fn from_items(items: Vec<DatasetItem>) -> Result<Self, DatasetError> {
        if items.is_empty() {
            return Err(DatasetError::Empty);
        }
        for (position, item) in items.iter().enumerate() {
            if item.index != position as u64 {
                return Err(DatasetError::Malformed {
                    position,
                    reason: format!("index {} does not match position", item.index),
                });
            }
            if !item.hash_matches() {
                return Err(DatasetError::Malformed { position, reason: "content_hash mismatch".into() });
            }
        }
        let root_hash = canonical::canonical_digest(&items)?;
        Ok(Dataset { items, root_hash })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let items: Vec<DatasetItem> = canonical::from_slice(bytes)?;
        Self::from_items(items)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Canonical manifest bytes; their SHA-256 is the root hash.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(&self.items).expect("manifest has no floats")
    }

    pub fn root_hash(&self) -> Digest {
        self.root_hash
    }

    pub fn len(&self) -> u64 {
        self.items.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn item(&self, index: u64) -> Result<&DatasetItem, DatasetError> {
        usize::try_from(index)
            .ok()
            .and_then(|i| self.items.get(i))
            .ok_or(DatasetError::ItemUnavailable(index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(i: u64) -> DatasetItem {
        let mut m = BTreeMap::new();
        m.insert("license".to_string(), "MIT".to_string());
        DatasetItem::new(i, format!("item-{i}"), m)
    }

    #[test]
    fn root_hash_is_digest_of_canonical_manifest() {
        let ds = Dataset::from_items((0..3).map(item).collect()).unwrap();
        assert_eq!(ds.root_hash(), Digest::of(&ds.canonical_bytes()));
        let again = Dataset::from_bytes(&ds.canonical_bytes()).unwrap();
        assert_eq!(again.root_hash(), ds.root_hash());
    }

    #[test]
    fn pretty_printed_manifest_has_same_root() {
        let ds = Dataset::from_items((0..3).map(item).collect()).unwrap();
        let pretty = serde_json::to_vec_pretty(ds.items()).unwrap();
        assert_eq!(Dataset::from_bytes(&pretty).unwrap().root_hash(), ds.root_hash());
    }

    #[test]
    fn tampered_item_rejected() {
        let mut items: Vec<_> = (0..3).map(item).collect();
        items[1].metadata.insert("license".into(), "GPL-3.0-only".into());
        assert!(matches!(Dataset::from_items(items), Err(DatasetError::Malformed { position: 1, .. })));
    }

    #[test]
    fn index_must_match_position() {
        let items = vec![item(0), item(2)];
        assert!(matches!(Dataset::from_items(items), Err(DatasetError::Malformed { position: 1, .. })));
        assert!(matches!(Dataset::from_items(vec![]), Err(DatasetError::Empty)));
    }

    #[test]
    fn item_lookup() {
        let ds = Dataset::from_items((0..3).map(item).collect()).unwrap();
        assert_eq!(ds.item(2).unwrap().item_id, "item-2");
        assert!(matches!(ds.item(3), Err(DatasetError::ItemUnavailable(3))));
    }
}
