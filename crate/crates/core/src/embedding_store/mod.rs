//! ID-addressed embedding matrices.
//!
//! Every vector that enters the pipeline goes through an [`EmbeddingStore`]:
//! image features, region-description features and sentence features alike.
//! Rows are stored as `f32`; all reductions downstream accumulate in `f64`.

mod catalog;
mod format;

use std::collections::HashMap;
use std::path::Path;

pub use catalog::{overlap_filter, read_exclusion_list, CatalogEntry, DescriptionCatalog};
pub use format::{decode_store, encode_store, FORMAT_VERSION, MAGIC};

/// Tolerance on row norms for a store flagged as normalized.
pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error("unsupported format version {version} at byte {offset}")]
    UnsupportedVersion { offset: usize, version: u16 },
    #[error("truncated payload at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("dimension/count mismatch at byte {offset}: {reason}")]
    ShapeMismatch { offset: usize, reason: String },
    #[error("duplicate id {id:?} at byte {offset}")]
    DuplicateId { offset: usize, id: String },
    #[error("invalid id at byte {offset}: {reason}")]
    InvalidId { offset: usize, reason: String },
    #[error("checksum mismatch at byte {offset}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        offset: usize,
        stored: u32,
        computed: u32,
    },
    #[error("non-finite value in row {id:?}")]
    NonFinite { id: String },
    #[error("row {id:?} has norm {norm} but the store is flagged normalized")]
    NotNormalized { id: String, norm: f64 },
    #[error("row {id:?} has zero norm")]
    ZeroNorm { id: String },
    #[error("invalid store: {0}")]
    Invalid(String),
    #[error("catalog line {line}: {reason}")]
    Catalog { line: usize, reason: String },
}

/// Row-major matrix of `f32` vectors addressed by unique string ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingStore {
    /// Build a store from ids and a flat row-major buffer.
    ///
    /// The `normalized` flag is trusted only after every row passes the norm check.
    pub fn new(
        ids: Vec<String>,
        dim: usize,
        data: Vec<f32>,
        normalized: bool,
    ) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::Invalid("dim must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(StoreError::Invalid(format!(
                "{} ids with dim {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if id.is_empty() {
                return Err(StoreError::Invalid(format!("row {row} has an empty id")));
            }
            if index.insert(id.clone(), row).is_some() {
                return Err(StoreError::Invalid(format!("duplicate id {id:?}")));
            }
        }
        let store = Self {
            ids,
            index,
            dim,
            data,
            normalized,
        };
        store.check_rows()?;
        Ok(store)
    }

    /// Build a store from `(id, vector)` pairs.
    pub fn from_rows<I, S>(rows: I, normalized: bool) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut dim = None;
        for (id, row) in rows {
            let id = id.into();
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(StoreError::Invalid(format!(
                        "row {id:?} has dim {}, expected {d}",
                        row.len()
                    )))
                }
                Some(_) => {}
            }
            ids.push(id);
            data.extend_from_slice(&row);
        }
        let dim = dim.ok_or_else(|| StoreError::Invalid("store has no rows".into()))?;
        Self::new(ids, dim, data, normalized)
    }

    fn check_rows(&self) -> Result<(), StoreError> {
        for (row, id) in self.ids.iter().enumerate() {
            let v = self.row(row);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(StoreError::NonFinite { id: id.clone() });
            }
            if self.normalized {
                let norm = l2_norm(v);
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(StoreError::NotNormalized {
                        id: id.clone(),
                        norm,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Raw row-major payload.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|row| self.row(row))
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(id, v)| (id.as_str(), v))
    }

    /// Rows whose id satisfies `keep`, in the original file order.
    pub fn retain<F>(&self, mut keep: F) -> Result<Self, StoreError>
    where
        F: FnMut(&str) -> bool,
    {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (id, v) in self.rows() {
            if keep(id) {
                ids.push(id.to_owned());
                data.extend_from_slice(v);
            }
        }
        Self::new(ids, self.dim, data, self.normalized)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        decode_store(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let path = path.as_ref();
        std::fs::write(path, encode_store(self)).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Free-function spelling of [`EmbeddingStore::load`].
pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore, StoreError> {
    EmbeddingStore::load(path)
}

pub fn save_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<(), StoreError> {
    store.save(path)
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Scale every row to unit Euclidean norm.
///
/// Rows already within `1e-7` of unit norm are left untouched, which keeps the
/// operation idempotent at the bit level for normalized input.
pub fn l2_normalize(store: &EmbeddingStore) -> Result<EmbeddingStore, StoreError> {
    let mut data = Vec::with_capacity(store.data.len());
    for (id, v) in store.rows() {
        let norm = l2_norm(v);
        if norm == 0.0 {
            return Err(StoreError::ZeroNorm { id: id.to_owned() });
        }
        if (norm - 1.0).abs() <= 1e-7 {
            data.extend_from_slice(v);
        } else {
            data.extend(v.iter().map(|&x| (f64::from(x) / norm) as f32));
        }
    }
    EmbeddingStore::new(store.ids.clone(), store.dim, data, true)
}

/// Normalize a single vector in `f64`. Returns `None` for a zero vector.
pub fn normalize_vector(v: &[f32]) -> Option<Vec<f32>> {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}
