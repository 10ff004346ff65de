//! Region-description catalog (JSON Lines) and overlap filtering.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingStore, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image_id: Option<String>,
}

/// Description texts keyed by id, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescriptionCatalog {
    entries: Vec<CatalogEntry>,
    index: HashMap<String, usize>,
}

impl DescriptionCatalog {
    pub fn new(entries: Vec<CatalogEntry>) -> Result<Self, StoreError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.id.is_empty() {
                return Err(StoreError::Catalog {
                    line: i + 1,
                    reason: "empty id".into(),
                });
            }
            if index.insert(e.id.clone(), i).is_some() {
                return Err(StoreError::Catalog {
                    line: i + 1,
                    reason: format!("duplicate id {:?}", e.id),
                });
            }
        }
        Ok(Self { entries, index })
    }

    pub fn parse(text: &str) -> Result<Self, StoreError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: CatalogEntry =
                serde_json::from_str(line).map_err(|e| StoreError::Catalog {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).expect("catalog entries serialize");
            out.write_all(b"\n").unwrap();
        }
        out
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&CatalogEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn text(&self, id: &str) -> Option<&str> {
        self.get(id).map(|e| e.text.as_str())
    }

    /// Every catalog id must have a row in `store`.
    pub fn check_against(&self, store: &EmbeddingStore) -> Result<(), StoreError> {
        for (i, e) in self.entries.iter().enumerate() {
            if store.position(&e.id).is_none() {
                return Err(StoreError::Catalog {
                    line: i + 1,
                    reason: format!("id {:?} has no row in the description store", e.id),
                });
            }
        }
        Ok(())
    }
}

/// Drop every entry whose source image is excluded. Entries without a
/// source image are always kept.
pub fn overlap_filter(
    catalog: &DescriptionCatalog,
    excluded_image_ids: &HashSet<String>,
) -> DescriptionCatalog {
    let kept = catalog
        .entries
        .iter()
        .filter(|e| {
            e.source_image_id
                .as_ref()
                .is_none_or(|src| !excluded_image_ids.contains(src))
        })
        .cloned()
        .collect();
    DescriptionCatalog::new(kept).expect("subset of a valid catalog is valid")
}

/// One id per line; blank lines and `#` comments are ignored.
pub fn read_exclusion_list(path: impl AsRef<Path>) -> Result<HashSet<String>, StoreError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}
