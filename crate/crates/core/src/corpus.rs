//! Document ingestion, vocabularies and bag-of-words vectors.
//!
//! Documents arrive as JSON lines (`{"id", "lang", "text"}`); a manifest ties
//! one such file per language together with per-language stopword lists.
//! Alignment across languages is by document ID, never by file position.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("document id must be non-empty")]
    EmptyId,
    #[error("no non-stopword token in the corpus")]
    EmptyVocabulary,
    #[error("vocabulary cap must be at least 1")]
    ZeroCap,
    #[error("duplicate document id {id:?} in language {lang}")]
    DuplicateId { lang: String, id: String },
    #[error("document {id:?} declares language {found:?} but is listed under {expected:?}")]
    LanguageMismatch {
        id: String,
        expected: String,
        found: String,
    },
    #[error("alignment mismatch: language {lang} has no document {key:?}")]
    AlignmentMismatch { lang: String, key: String },
    #[error("length mismatch: {pivot} has {expected} documents but {lang} has {found}")]
    LengthMismatch {
        pivot: String,
        lang: String,
        expected: usize,
        found: usize,
    },
    #[error("manifest has no file for pivot language {0:?}")]
    MissingPivot(String),
    #[error("duplicate token {0:?} in vocabulary file")]
    DuplicateToken(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Whitespace split, strip leading/trailing non-alphanumerics, lowercase.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub language: String,
    pub tokens: Vec<String>,
}

impl Document {
    pub fn from_text(id: &str, language: &str, text: &str) -> Result<Self, CorpusError> {
        Self::from_tokens(id, language, tokenize(text))
    }

    /// Tokens are lowercased on the way in.
    pub fn from_tokens<S: AsRef<str>>(
        id: &str,
        language: &str,
        tokens: impl IntoIterator<Item = S>,
    ) -> Result<Self, CorpusError> {
        if id.is_empty() {
            return Err(CorpusError::EmptyId);
        }
        Ok(Self {
            id: id.to_owned(),
            language: language.to_owned(),
            tokens: tokens.into_iter().map(|t| t.as_ref().to_lowercase()).collect(),
        })
    }
}

/// One line of a document file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocRecord {
    pub id: String,
    pub lang: String,
    pub text: String,
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut docs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        docs.push(Document::from_text(&rec.id, &rec.lang, &rec.text)?);
    }
    Ok(docs)
}

pub fn write_documents(path: &Path, records: &[DocRecord]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// One token per line; blank lines ignored; lowercased.
pub fn read_stopwords(path: &Path) -> Result<HashSet<String>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_lowercase)
        .collect())
}

/// Frequency-ordered vocabulary.
///
/// Entries are sorted by descending corpus frequency with lexicographic
/// tie-breaking; a vocabulary read back from a plain token list carries
/// frequency 0 for every entry (the file records only the order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    entries: Vec<(String, u64)>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_entries(entries: Vec<(String, u64)>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (tok, _)) in entries.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(CorpusError::DuplicateToken(tok.clone()));
            }
        }
        Ok(Self { entries, index })
    }

    /// Vocabulary in the given order, with unknown frequencies.
    pub fn from_token_list<S: AsRef<str>>(
        tokens: impl IntoIterator<Item = S>,
    ) -> Result<Self, CorpusError> {
        Self::from_entries(tokens.into_iter().map(|t| (t.as_ref().to_owned(), 0)).collect())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, pos: usize) -> &str {
        &self.entries[pos].0
    }

    pub fn frequency(&self, pos: usize) -> u64 {
        self.entries[pos].1
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(t, _)| t.as_str())
    }

    pub fn entries(&self) -> &[(String, u64)] {
        &self.entries
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        for (tok, _) in &self.entries {
            writeln!(w, "{tok}").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_token_list(text.lines())
    }
}

/// The `cap` most frequent non-stopword types, ties broken lexicographically.
pub fn build_vocab(
    docs: &[Document],
    cap: usize,
    stopwords: &HashSet<String>,
) -> Result<Vocab, CorpusError> {
    if cap == 0 {
        return Err(CorpusError::ZeroCap);
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for doc in docs {
        for tok in &doc.tokens {
            if !stopwords.contains(tok) {
                *freq.entry(tok.as_str()).or_default() += 1;
            }
        }
    }
    if freq.is_empty() {
        return Err(CorpusError::EmptyVocabulary);
    }
    let mut entries: Vec<(String, u64)> = freq.into_iter().map(|(t, c)| (t.to_owned(), c)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(cap);
    Vocab::from_entries(entries)
}

/// Sparse term counts keyed by vocabulary position, sorted by position.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BowVector {
    counts: Vec<(usize, u32)>,
}

impl BowVector {
    /// Builds from `(position, count)` pairs; zero counts are dropped and
    /// repeated positions summed.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, u32)>) -> Self {
        let mut map: BTreeMap<usize, u32> = BTreeMap::new();
        for (pos, c) in pairs {
            if c > 0 {
                *map.entry(pos).or_default() += c;
            }
        }
        Self {
            counts: map.into_iter().collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.counts.iter().copied()
    }

    pub fn get(&self, pos: usize) -> u32 {
        self.counts
            .binary_search_by_key(&pos, |&(p, _)| p)
            .map_or(0, |i| self.counts[i].1)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn nnz(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Dense count vector of the given width.
    pub fn to_dense(&self, width: usize) -> Vec<f64> {
        let mut v = vec![0.0; width];
        for &(p, c) in &self.counts {
            v[p] = c as f64;
        }
        v
    }
}

/// Counts of in-vocabulary tokens; out-of-vocabulary tokens are dropped.
pub fn vectorize(doc: &Document, vocab: &Vocab) -> BowVector {
    BowVector::from_pairs(
        doc.tokens
            .iter()
            .filter_map(|t| vocab.position(t))
            .map(|p| (p, 1)),
    )
}

pub fn vectorize_all(docs: &[Document], vocab: &Vocab) -> Vec<BowVector> {
    docs.par_iter().map(|d| vectorize(d, vocab)).collect()
}

/// Corpus manifest: `{"pivot", "files": {lang: path}, "stopwords": {lang: path}}`.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub pivot: String,
    pub files: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub stopwords: BTreeMap<String, PathBuf>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn new(
        pivot: &str,
        files: BTreeMap<String, PathBuf>,
        stopwords: BTreeMap<String, PathBuf>,
    ) -> Self {
        Self {
            pivot: pivot.to_owned(),
            files,
            stopwords,
            base_dir: PathBuf::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut m: CorpusManifest = serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if !m.files.contains_key(&m.pivot) {
            return Err(CorpusError::MissingPivot(m.pivot));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// The language's stopword set; empty when the manifest lists none.
    pub fn stopwords_for(&self, lang: &str) -> Result<HashSet<String>, CorpusError> {
        match self.stopwords.get(lang) {
            Some(p) => read_stopwords(&self.resolve(p)),
            None => Ok(HashSet::new()),
        }
    }

    /// Pivot first, then the remaining languages in lexicographic order.
    pub fn languages(&self) -> Vec<String> {
        let mut langs = vec![self.pivot.clone()];
        langs.extend(self.files.keys().filter(|l| **l != self.pivot).cloned());
        langs
    }
}

/// Per-language document lists aligned by index on a shared ID.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedCorpus {
    pub pivot: String,
    /// Pivot first.
    pub languages: Vec<String>,
    pub docs: Vec<Vec<Document>>,
}

impl AlignedCorpus {
    /// Aligns every language to the pivot's document order by ID.
    pub fn align(pivot: &str, mut by_lang: BTreeMap<String, Vec<Document>>) -> Result<Self, CorpusError> {
        let pivot_docs = by_lang
            .remove(pivot)
            .ok_or_else(|| CorpusError::MissingPivot(pivot.to_owned()))?;
        let mut seen = HashSet::new();
        for d in &pivot_docs {
            if !seen.insert(d.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    lang: pivot.to_owned(),
                    id: d.id.clone(),
                });
            }
        }
        let mut languages = vec![pivot.to_owned()];
        let mut aligned = Vec::with_capacity(by_lang.len());
        for (lang, docs) in by_lang {
            let mut by_id: HashMap<String, Document> = HashMap::with_capacity(docs.len());
            let found = docs.len();
            for d in docs {
                if by_id.contains_key(&d.id) {
                    return Err(CorpusError::DuplicateId { lang, id: d.id });
                }
                by_id.insert(d.id.clone(), d);
            }
            let mut ordered = Vec::with_capacity(pivot_docs.len());
            for p in &pivot_docs {
                match by_id.remove(&p.id) {
                    Some(d) => ordered.push(d),
                    None => {
                        return Err(CorpusError::AlignmentMismatch {
                            lang,
                            key: p.id.clone(),
                        })
                    }
                }
            }
            if found != pivot_docs.len() {
                return Err(CorpusError::LengthMismatch {
                    pivot: pivot.to_owned(),
                    lang,
                    expected: pivot_docs.len(),
                    found,
                });
            }
            languages.push(lang);
            aligned.push(ordered);
        }
        let mut docs = vec![pivot_docs];
        docs.extend(aligned);
        Ok(Self {
            pivot: pivot.to_owned(),
            languages,
            docs,
        })
    }

    pub fn len(&self) -> usize {
        self.docs[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pivot_docs(&self) -> &[Document] {
        &self.docs[0]
    }

    pub fn docs_for(&self, lang: &str) -> Option<&[Document]> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .map(|i| self.docs[i].as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = (&str, &[Document])> {
        self.languages[1..]
            .iter()
            .map(String::as_str)
            .zip(self.docs[1..].iter().map(Vec::as_slice))
    }
}

/// Reads every language file listed in the manifest (in parallel) and aligns
/// them on the pivot's document order.
pub fn load_aligned_corpus(manifest_path: &Path) -> Result<AlignedCorpus, CorpusError> {
    let manifest = CorpusManifest::read(manifest_path)?;
    load_from_manifest(&manifest)
}

pub fn load_from_manifest(manifest: &CorpusManifest) -> Result<AlignedCorpus, CorpusError> {
    let loaded: Vec<(String, Vec<Document>)> = manifest
        .files
        .par_iter()
        .map(|(lang, p)| {
            let docs = read_documents(&manifest.resolve(p))?;
            for d in &docs {
                if d.language != *lang {
                    return Err(CorpusError::LanguageMismatch {
                        id: d.id.clone(),
                        expected: lang.clone(),
                        found: d.language.clone(),
                    });
                }
            }
            Ok((lang.clone(), docs))
        })
        .collect::<Result<_, CorpusError>>()?;
    AlignedCorpus::align(&manifest.pivot, loaded.into_iter().collect())
}

/// Set of distinct tokens of a document (used for document-frequency counts).
pub fn distinct_tokens(doc: &Document) -> BTreeSet<&str> {
    doc.tokens.iter().map(String::as_str).collect()
}
