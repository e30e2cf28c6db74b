//! `PTEB1` embedding files and binding of embedding rows to documents.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! b"PTEB1"
//! u32 count
//! u32 dim
//! count × (UTF-8 id, 0x00)
//! count × dim × f32, row-major
//! ```
//!
//! Values are kept exactly as stored; nothing is normalised on load.

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::corpus::{AlignedCorpus, Document};
use crate::nnkernel::Matrix;

pub const MAGIC: &[u8; 5] = b"PTEB1";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic header, expected PTEB1")]
    BadMagic,
    #[error("truncated embedding file")]
    Truncated,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("non-finite value in row {0}")]
    NonFiniteValue(usize),
    #[error("document id {0} is not valid UTF-8")]
    InvalidId(usize),
    #[error("duplicate embedding id {0:?}")]
    DuplicateId(String),
    #[error("{0} trailing bytes after the embedding payload")]
    TrailingBytes(usize),
    #[error("missing embeddings for {} document(s): {}", .0.len(), .0.join(", "))]
    MissingEmbedding(Vec<String>),
    #[error("no embeddings bound for language {0:?}")]
    UnboundLanguage(String),
}

/// Dense per-document vectors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, ids: Vec<String>, values: Vec<f32>) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::DimMismatch {
                expected: 1,
                found: 0,
            });
        }
        if values.len() != ids.len() * dim {
            return Err(EmbedError::DimMismatch {
                expected: ids.len() * dim,
                found: values.len(),
            });
        }
        if let Some(row) = values
            .chunks_exact(dim)
            .position(|r| r.iter().any(|v| !v.is_finite()))
        {
            return Err(EmbedError::NonFiniteValue(row));
        }
        Ok(Self { dim, ids, values })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self, EmbedError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(EmbedError::DimMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(dim, ids, values)
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

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id_bytes: usize = self.ids.iter().map(|s| s.len() + 1).sum();
        let mut out = Vec::with_capacity(13 + id_bytes + self.values.len() * 4);
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(self.ids.len() as u32).unwrap();
        out.write_u32::<LittleEndian>(self.dim as u32).unwrap();
        for id in &self.ids {
            out.extend_from_slice(id.as_bytes());
            out.push(0);
        }
        for &v in &self.values {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            // A short prefix of the magic is a truncated file, not a foreign one.
            if bytes.len() < MAGIC.len() && MAGIC.starts_with(bytes) {
                return Err(EmbedError::Truncated);
            }
            return Err(EmbedError::BadMagic);
        }
        let mut cur = Cursor::new(&bytes[MAGIC.len()..]);
        let count = cur.read_u32::<LittleEndian>().map_err(|_| EmbedError::Truncated)? as usize;
        let dim = cur.read_u32::<LittleEndian>().map_err(|_| EmbedError::Truncated)? as usize;
        if dim == 0 {
            return Err(EmbedError::DimMismatch {
                expected: 1,
                found: 0,
            });
        }
        let rest = &bytes[MAGIC.len() + 8..];
        let mut ids = Vec::with_capacity(count.min(rest.len()));
        let mut offset = 0;
        for i in 0..count {
            let end = rest[offset..]
                .iter()
                .position(|&b| b == 0)
                .ok_or(EmbedError::Truncated)?;
            let id = std::str::from_utf8(&rest[offset..offset + end])
                .map_err(|_| EmbedError::InvalidId(i))?;
            ids.push(id.to_owned());
            offset += end + 1;
        }
        let payload = &rest[offset..];
        let needed = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or(EmbedError::Truncated)?;
        if payload.len() < needed {
            return Err(EmbedError::Truncated);
        }
        if payload.len() > needed {
            return Err(EmbedError::TrailingBytes(payload.len() - needed));
        }
        let mut values = vec![0f32; count * dim];
        let mut reader = payload;
        reader
            .read_f32_into::<LittleEndian>(&mut values)
            .map_err(|_| EmbedError::Truncated)?;
        Self::new(dim, ids, values)
    }
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix, EmbedError> {
    let bytes = std::fs::read(path).map_err(|source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    EmbeddingMatrix::from_bytes(&bytes)
}

pub fn write_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<(), EmbedError> {
    std::fs::write(path, m.to_bytes()).map_err(|source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Documents paired with their embedding rows, in document order.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundDataset {
    pub ids: Vec<String>,
    pub features: Matrix,
}

impl BoundDataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Binds each document to the embedding row with the same ID.
pub fn attach(docs: &[Document], emb: &EmbeddingMatrix) -> Result<BoundDataset, EmbedError> {
    let mut index: HashMap<&str, usize> = HashMap::with_capacity(emb.len());
    for (i, id) in emb.ids().iter().enumerate() {
        if index.insert(id.as_str(), i).is_some() {
            return Err(EmbedError::DuplicateId(id.clone()));
        }
    }
    let missing: Vec<String> = docs
        .iter()
        .filter(|d| !index.contains_key(d.id.as_str()))
        .map(|d| d.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EmbedError::MissingEmbedding(missing));
    }
    let mut features = Matrix::zeros(docs.len(), emb.dim());
    for (r, d) in docs.iter().enumerate() {
        let src = emb.row(index[d.id.as_str()]);
        for (dst, &v) in features.row_mut(r).iter_mut().zip(src) {
            *dst = v as f64;
        }
    }
    Ok(BoundDataset {
        ids: docs.iter().map(|d| d.id.clone()).collect(),
        features,
    })
}

/// Every language of an aligned corpus bound to its embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundAligned {
    pub pivot: String,
    pub sets: BTreeMap<String, BoundDataset>,
}

impl BoundAligned {
    pub fn get(&self, lang: &str) -> Result<&BoundDataset, EmbedError> {
        self.sets
            .get(lang)
            .ok_or_else(|| EmbedError::UnboundLanguage(lang.to_owned()))
    }

    pub fn pivot_set(&self) -> Result<&BoundDataset, EmbedError> {
        self.get(&self.pivot)
    }

    /// Non-pivot languages in lexicographic order.
    pub fn target_languages(&self) -> Vec<&str> {
        self.sets
            .keys()
            .filter(|l| **l != self.pivot)
            .map(String::as_str)
            .collect()
    }
}

pub fn attach_aligned(
    corpus: &AlignedCorpus,
    embeddings: &BTreeMap<String, EmbeddingMatrix>,
) -> Result<BoundAligned, EmbedError> {
    let mut sets = BTreeMap::new();
    for (lang, docs) in corpus.languages.iter().zip(&corpus.docs) {
        let emb = embeddings
            .get(lang)
            .ok_or_else(|| EmbedError::UnboundLanguage(lang.clone()))?;
        sets.insert(lang.clone(), attach(docs, emb)?);
    }
    Ok(BoundAligned {
        pivot: corpus.pivot.clone(),
        sets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingMatrix {
        EmbeddingMatrix::new(
            4,
            vec!["a".into(), "b".into()],
            (0..8).map(|v| v as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_two_rows() {
        let m = sample();
        let back = EmbeddingMatrix::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back.row(0), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(back.row(1), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(back.ids(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn exact_header_bytes() {
        let m = EmbeddingMatrix::new(1, vec!["x".into()], vec![1.0]).unwrap();
        assert_eq!(
            m.to_bytes(),
            vec![b'P', b'T', b'E', b'B', b'1', 1, 0, 0, 0, 1, 0, 0, 0, b'x', 0, 0, 0, 0x80, 0x3f]
        );
    }

    #[test]
    fn read_errors() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(
            EmbeddingMatrix::from_bytes(b"XXXXX\0\0\0\0"),
            Err(EmbedError::BadMagic)
        ));
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&bytes[..bytes.len() - 1]),
            Err(EmbedError::Truncated)
        ));
        assert!(matches!(EmbeddingMatrix::from_bytes(b"PTE"), Err(EmbedError::Truncated)));
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&bytes),
            Err(EmbedError::NonFiniteValue(1))
        ));
        let mut extra = sample().to_bytes();
        extra.push(0);
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&extra),
            Err(EmbedError::TrailingBytes(1))
        ));
    }

    #[test]
    fn non_finite_row_index() {
        let mut values = vec![0.5f32; 5 * 2];
        values[3 * 2 + 1] = f32::INFINITY;
        let ids = (0..5).map(|i| format!("d{i}")).collect();
        assert!(matches!(
            EmbeddingMatrix::new(2, ids, values),
            Err(EmbedError::NonFiniteValue(3))
        ));
    }

    #[test]
    fn attach_by_id_and_missing() {
        let m = sample();
        let docs = vec![
            Document::from_tokens("b", "en", ["x"]).unwrap(),
            Document::from_tokens("a", "en", ["y"]).unwrap(),
        ];
        let bound = attach(&docs, &m).unwrap();
        assert_eq!(bound.features.row(0), &[4.0, 5.0, 6.0, 7.0]);
        let docs = vec![
            Document::from_tokens("a", "en", ["x"]).unwrap(),
            Document::from_tokens("q", "en", ["x"]).unwrap(),
            Document::from_tokens("r", "en", ["x"]).unwrap(),
        ];
        match attach(&docs, &m) {
            Err(EmbedError::MissingEmbedding(ids)) => assert_eq!(ids, vec!["q", "r"]),
            other => panic!("{other:?}"),
        }
    }
}
