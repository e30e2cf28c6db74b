//! Collapsed Gibbs sampling LDA, topic-count sweeps and bootstrap labels.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BowVector, Document, Vocab};
use crate::eval;
use crate::nnkernel::RngStream;

const CHECKPOINT_MAGIC: &[u8; 5] = b"PTLDA";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LdaError {
    #[error("document {0} has no in-vocabulary tokens")]
    EmptyDocument(usize),
    #[error("topic count must be at least 2, got {0}")]
    TooFewTopics(usize),
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty topic grid")]
    EmptyGrid,
    #[error("top-word lists are empty")]
    NoTopLists,
    #[error("{docs} documents but {fallbacks} fallback labels")]
    FallbackLength { docs: usize, fallbacks: usize },
    #[error("invalid hyperparameter {name} = {value}")]
    InvalidHyperparameter { name: &'static str, value: f64 },
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
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
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdaParams {
    pub tau: usize,
    pub iterations: usize,
    /// Symmetric document-topic prior; `None` means `50 / tau`.
    pub alpha: Option<f64>,
    pub eta: f64,
    pub seed: u64,
}

impl LdaParams {
    pub fn new(tau: usize, iterations: usize, seed: u64) -> Self {
        Self {
            tau,
            iterations,
            alpha: None,
            eta: 0.01,
            seed,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.tau as f64)
    }
}

/// Count tables of a collapsed Gibbs sampler state.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    pub tau: usize,
    pub vocab_size: usize,
    pub alpha: f64,
    pub eta: f64,
    /// `tau × vocab_size`, row-major.
    pub n_kw: Vec<u32>,
    /// `docs × tau`, row-major.
    pub n_dk: Vec<u32>,
    pub n_k: Vec<u32>,
    /// Word ids of every token, per document.
    pub words: Vec<Vec<u32>>,
    /// Topic of every token, parallel to `words`.
    pub assignments: Vec<Vec<u32>>,
}

impl LdaModel {
    pub fn num_docs(&self) -> usize {
        self.words.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.words.iter().map(Vec::len).sum()
    }

    #[inline]
    pub fn topic_word(&self, k: usize, w: usize) -> u32 {
        self.n_kw[k * self.vocab_size + w]
    }

    #[inline]
    pub fn doc_topic(&self, d: usize, k: usize) -> u32 {
        self.n_dk[d * self.tau + k]
    }

    pub fn doc_topic_row(&self, d: usize) -> &[u32] {
        &self.n_dk[d * self.tau..(d + 1) * self.tau]
    }

    /// Recounts every table from the assignments and compares.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut n_kw = vec![0u32; self.tau * self.vocab_size];
        let mut n_dk = vec![0u32; self.num_docs() * self.tau];
        let mut n_k = vec![0u32; self.tau];
        for (d, (ws, zs)) in self.words.iter().zip(&self.assignments).enumerate() {
            if ws.len() != zs.len() {
                return Err(format!("doc {d}: {} words vs {} assignments", ws.len(), zs.len()));
            }
            for (&w, &z) in ws.iter().zip(zs) {
                let (w, z) = (w as usize, z as usize);
                if z >= self.tau || w >= self.vocab_size {
                    return Err(format!("doc {d}: out of range token ({w}, {z})"));
                }
                n_kw[z * self.vocab_size + w] += 1;
                n_dk[d * self.tau + z] += 1;
                n_k[z] += 1;
            }
        }
        if n_kw != self.n_kw {
            return Err("topic-word table inconsistent".into());
        }
        if n_dk != self.n_dk {
            return Err("document-topic table inconsistent".into());
        }
        if n_k != self.n_k {
            return Err("topic totals inconsistent".into());
        }
        for k in 0..self.tau {
            let row: u64 = (0..self.vocab_size).map(|w| self.topic_word(k, w) as u64).sum();
            if row != self.n_k[k] as u64 {
                return Err(format!("topic {k}: row sum {row} != n_k {}", self.n_k[k]));
            }
        }
        for (d, ws) in self.words.iter().enumerate() {
            let row: u64 = self.doc_topic_row(d).iter().map(|&c| c as u64).sum();
            if row != ws.len() as u64 {
                return Err(format!("doc {d}: row sum {row} != length {}", ws.len()));
            }
        }
        Ok(())
    }

    /// Normalised sampling distribution for token `pos` of document `doc`,
    /// with that token's own assignment removed from the counts:
    /// `p(z = k) ∝ (n_dk + α)(n_kw + η) / (n_k + Vη)`.
    pub fn conditional(&self, doc: usize, pos: usize) -> Vec<f64> {
        let w = self.words[doc][pos] as usize;
        let cur = self.assignments[doc][pos] as usize;
        let v_eta = self.vocab_size as f64 * self.eta;
        let mut p: Vec<f64> = (0..self.tau)
            .map(|k| {
                let own = (k == cur) as u32;
                let ndk = (self.doc_topic(doc, k) - own) as f64;
                let nkw = (self.topic_word(k, w) - own) as f64;
                let nk = (self.n_k[k] - own) as f64;
                (ndk + self.alpha) * (nkw + self.eta) / (nk + v_eta)
            })
            .collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        p
    }

    /// Document-topic argmax per document (ties to the lower topic id).
    pub fn doc_argmax(&self) -> Vec<usize> {
        (0..self.num_docs())
            .map(|d| {
                let row = self.doc_topic_row(d);
                let mut best = 0;
                for k in 1..self.tau {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Smoothed topic proportions of one document.
    pub fn doc_theta(&self, d: usize) -> Vec<f64> {
        let len = self.words[d].len() as f64;
        let denom = len + self.tau as f64 * self.alpha;
        self.doc_topic_row(d)
            .iter()
            .map(|&c| (c as f64 + self.alpha) / denom)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let w = &mut out;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        w.write_u32::<LittleEndian>(self.tau as u32).unwrap();
        w.write_u32::<LittleEndian>(self.vocab_size as u32).unwrap();
        w.write_u32::<LittleEndian>(self.num_docs() as u32).unwrap();
        w.write_f64::<LittleEndian>(self.alpha).unwrap();
        w.write_f64::<LittleEndian>(self.eta).unwrap();
        for table in [&self.n_kw, &self.n_dk, &self.n_k] {
            for &c in table.iter() {
                w.write_u32::<LittleEndian>(c).unwrap();
            }
        }
        for (ws, zs) in self.words.iter().zip(&self.assignments) {
            w.write_u32::<LittleEndian>(ws.len() as u32).unwrap();
            for (&word, &z) in ws.iter().zip(zs) {
                w.write_u32::<LittleEndian>(word).unwrap();
                w.write_u32::<LittleEndian>(z).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LdaError> {
        let bad = |m: &str| LdaError::BadCheckpoint(m.to_owned());
        if !bytes.starts_with(CHECKPOINT_MAGIC) {
            return Err(bad("bad magic"));
        }
        let mut r = Cursor::new(&bytes[CHECKPOINT_MAGIC.len()..]);
        let trunc = |_| bad("truncated");
        let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != CHECKPOINT_VERSION {
            return Err(LdaError::BadCheckpoint(format!("unsupported version {version}")));
        }
        let tau = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let vocab_size = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let docs = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let alpha = r.read_f64::<LittleEndian>().map_err(trunc)?;
        let eta = r.read_f64::<LittleEndian>().map_err(trunc)?;
        let remaining = bytes.len().saturating_sub(CHECKPOINT_MAGIC.len() + r.position() as usize);
        let table_len = tau * vocab_size + docs * tau + tau;
        if table_len.saturating_mul(4) > remaining {
            return Err(bad("truncated"));
        }
        let mut read_table = |n: usize| -> Result<Vec<u32>, LdaError> {
            let mut v = vec![0u32; n];
            r.read_u32_into::<LittleEndian>(&mut v).map_err(trunc)?;
            Ok(v)
        };
        let n_kw = read_table(tau * vocab_size)?;
        let n_dk = read_table(docs * tau)?;
        let n_k = read_table(tau)?;
        let mut words = Vec::with_capacity(docs);
        let mut assignments = Vec::with_capacity(docs);
        for _ in 0..docs {
            let len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            let mut ws = Vec::with_capacity(len.min(bytes.len()));
            let mut zs = Vec::with_capacity(len.min(bytes.len()));
            for _ in 0..len {
                ws.push(r.read_u32::<LittleEndian>().map_err(trunc)?);
                zs.push(r.read_u32::<LittleEndian>().map_err(trunc)?);
            }
            words.push(ws);
            assignments.push(zs);
        }
        if (r.position() as usize) + CHECKPOINT_MAGIC.len() != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let model = Self {
            tau,
            vocab_size,
            alpha,
            eta,
            n_kw,
            n_dk,
            n_k,
            words,
            assignments,
        };
        model.check_invariants().map_err(LdaError::BadCheckpoint)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), LdaError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| LdaError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, LdaError> {
        let bytes = std::fs::read(path).map_err(|source| LdaError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Sequential collapsed Gibbs sampler over a fixed corpus.
pub struct GibbsSampler {
    model: LdaModel,
    rng: RngStream,
    weights: Vec<f64>,
}

impl GibbsSampler {
    /// Expands bags of words into token sequences (ascending word id) and
    /// assigns every token a uniformly random initial topic.
    pub fn new(bows: &[BowVector], vocab_size: usize, params: &LdaParams) -> Result<Self, LdaError> {
        if params.tau < 2 {
            return Err(LdaError::TooFewTopics(params.tau));
        }
        if params.iterations == 0 {
            return Err(LdaError::NoIterations);
        }
        if bows.is_empty() {
            return Err(LdaError::EmptyCorpus);
        }
        let alpha = params.alpha();
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LdaError::InvalidHyperparameter { name: "alpha", value: alpha });
        }
        if !(params.eta > 0.0 && params.eta.is_finite()) {
            return Err(LdaError::InvalidHyperparameter { name: "eta", value: params.eta });
        }
        let tau = params.tau;
        let mut rng = RngStream::new(params.seed);
        let mut model = LdaModel {
            tau,
            vocab_size,
            alpha,
            eta: params.eta,
            n_kw: vec![0; tau * vocab_size],
            n_dk: vec![0; bows.len() * tau],
            n_k: vec![0; tau],
            words: Vec::with_capacity(bows.len()),
            assignments: Vec::with_capacity(bows.len()),
        };
        for (d, bow) in bows.iter().enumerate() {
            if bow.is_empty() {
                return Err(LdaError::EmptyDocument(d));
            }
            let mut ws = Vec::with_capacity(bow.total() as usize);
            for (w, c) in bow.iter() {
                debug_assert!(w < vocab_size);
                ws.extend(std::iter::repeat(w as u32).take(c as usize));
            }
            let zs: Vec<u32> = ws.iter().map(|_| rng.below(tau) as u32).collect();
            for (&w, &z) in ws.iter().zip(&zs) {
                model.n_kw[z as usize * vocab_size + w as usize] += 1;
                model.n_dk[d * tau + z as usize] += 1;
                model.n_k[z as usize] += 1;
            }
            model.words.push(ws);
            model.assignments.push(zs);
        }
        Ok(Self {
            model,
            rng,
            weights: vec![0.0; tau],
        })
    }

    /// One full pass resampling every token in corpus order.
    pub fn sweep(&mut self) {
        let m = &mut self.model;
        let tau = m.tau;
        let v = m.vocab_size;
        let v_eta = v as f64 * m.eta;
        for d in 0..m.words.len() {
            for i in 0..m.words[d].len() {
                let w = m.words[d][i] as usize;
                let old = m.assignments[d][i] as usize;
                m.n_kw[old * v + w] -= 1;
                m.n_dk[d * tau + old] -= 1;
                m.n_k[old] -= 1;
                let mut total = 0.0;
                for k in 0..tau {
                    total += (m.n_dk[d * tau + k] as f64 + m.alpha) * (m.n_kw[k * v + w] as f64 + m.eta)
                        / (m.n_k[k] as f64 + v_eta);
                    self.weights[k] = total;
                }
                let u = self.rng.uniform() * total;
                let new = self.weights.iter().position(|&c| u < c).unwrap_or(tau - 1);
                m.assignments[d][i] = new as u32;
                m.n_kw[new * v + w] += 1;
                m.n_dk[d * tau + new] += 1;
                m.n_k[new] += 1;
            }
        }
    }

    pub fn model(&self) -> &LdaModel {
        &self.model
    }

    pub fn into_model(self) -> LdaModel {
        self.model
    }
}

/// Trains LDA for `params.iterations` sweeps and returns the final state.
pub fn gibbs_train(bows: &[BowVector], vocab_size: usize, params: &LdaParams) -> Result<LdaModel, LdaError> {
    let mut sampler = GibbsSampler::new(bows, vocab_size, params)?;
    for _ in 0..params.iterations {
        sampler.sweep();
    }
    Ok(sampler.into_model())
}

/// Per topic, the `k` word ids with the highest counts; ties are broken by
/// the token string, lexicographically.
pub fn top_word_ids(model: &LdaModel, vocab: &Vocab, k: usize) -> Vec<Vec<usize>> {
    (0..model.tau)
        .map(|t| rank_words(|w| model.topic_word(t, w) as f64, vocab, k))
        .collect()
}

pub fn top_words(model: &LdaModel, vocab: &Vocab, k: usize) -> Vec<Vec<String>> {
    ids_to_tokens(&top_word_ids(model, vocab, k), vocab)
}

pub fn ids_to_tokens(ids: &[Vec<usize>], vocab: &Vocab) -> Vec<Vec<String>> {
    ids.iter()
        .map(|t| t.iter().map(|&w| vocab.token(w).to_owned()).collect())
        .collect()
}

/// The `k` positions with the highest score, descending, ties lexicographic.
pub(crate) fn rank_words(score: impl Fn(usize) -> f64, vocab: &Vocab, k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..vocab.len()).collect();
    ids.sort_by(|&a, &b| {
        score(b)
            .total_cmp(&score(a))
            .then_with(|| vocab.token(a).cmp(vocab.token(b)))
    });
    ids.truncate(k);
    ids
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicLabels {
    pub num_topics: usize,
    pub labels: Vec<usize>,
}

/// Labels plus diagnostics of how they were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub labels: TopicLabels,
    /// Documents that shared no token with any top list.
    pub fallback_count: usize,
    /// Fraction of documents whose label differs from the posterior argmax.
    pub disagreement_rate: f64,
}

/// Labels each document with the topic whose top list covers the most of its
/// tokens, counted with multiplicity. Ties go to the lower topic id; a
/// document with no covered token takes `fallback[d]` (the LDA posterior
/// argmax).
pub fn bootstrap_labels(
    docs: &[Document],
    top_lists: &[Vec<String>],
    fallback: &[usize],
) -> Result<LabelSummary, LdaError> {
    if top_lists.is_empty() {
        return Err(LdaError::NoTopLists);
    }
    if docs.len() != fallback.len() {
        return Err(LdaError::FallbackLength {
            docs: docs.len(),
            fallbacks: fallback.len(),
        });
    }
    let tau = top_lists.len();
    let mut owners: std::collections::HashMap<&str, Vec<usize>> = std::collections::HashMap::new();
    for (k, list) in top_lists.iter().enumerate() {
        for tok in list {
            let v = owners.entry(tok.as_str()).or_default();
            if v.last() != Some(&k) {
                v.push(k);
            }
        }
    }
    let mut labels = Vec::with_capacity(docs.len());
    let mut fallback_count = 0;
    let mut disagreements = 0;
    let mut counts = vec![0usize; tau];
    for (d, doc) in docs.iter().enumerate() {
        counts.fill(0);
        for tok in &doc.tokens {
            if let Some(ks) = owners.get(tok.as_str()) {
                for &k in ks {
                    counts[k] += 1;
                }
            }
        }
        let mut best = 0;
        for k in 1..tau {
            if counts[k] > counts[best] {
                best = k;
            }
        }
        let label = if counts[best] == 0 {
            fallback_count += 1;
            fallback[d]
        } else {
            best
        };
        if label != fallback[d] {
            disagreements += 1;
        }
        labels.push(label.min(tau - 1));
    }
    Ok(LabelSummary {
        labels: TopicLabels {
            num_topics: tau,
            labels,
        },
        fallback_count,
        disagreement_rate: if docs.is_empty() {
            0.0
        } else {
            disagreements as f64 / docs.len() as f64
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRecord {
    id: String,
    topic: usize,
}

/// JSON lines `{"id": str, "topic": int}`.
pub fn write_labels(path: &Path, ids: &[String], labels: &TopicLabels) -> Result<(), LdaError> {
    let io = |source| LdaError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for (id, &topic) in ids.iter().zip(&labels.labels) {
        let line = serde_json::to_string(&LabelRecord {
            id: id.clone(),
            topic,
        })
        .expect("label serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, usize)>, LdaError> {
    let io = |source| LdaError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| LdaError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push((rec.id, rec.topic));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub grid: Vec<usize>,
    pub iterations: usize,
    pub alpha: Option<f64>,
    pub eta: f64,
    pub seed: u64,
    pub top_n: usize,
    pub npmi_eps: f64,
}

impl SweepConfig {
    pub fn new(grid: Vec<usize>, iterations: usize, seed: u64) -> Self {
        Self {
            grid,
            iterations,
            alpha: None,
            eta: 0.01,
            seed,
            top_n: 10,
            npmi_eps: eval::DEFAULT_NPMI_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_tau: usize,
    /// `(tau, mean NPMI)` in grid order.
    pub table: Vec<(usize, f64)>,
}

/// Trains one model per grid point (in parallel, each with its own seed
/// stream) and picks the topic count with the highest NPMI coherence over
/// `bows`; ties go to the earlier grid entry.
pub fn sweep_topics(bows: &[BowVector], vocab: &Vocab, cfg: &SweepConfig) -> Result<SweepResult, LdaError> {
    if cfg.grid.is_empty() {
        return Err(LdaError::EmptyGrid);
    }
    let base = RngStream::new(cfg.seed);
    let table: Vec<(usize, f64)> = cfg
        .grid
        .par_iter()
        .map(|&tau| {
            let params = LdaParams {
                tau,
                iterations: cfg.iterations,
                alpha: cfg.alpha,
                eta: cfg.eta,
                seed: base.fork(tau as u64).seed(),
            };
            let model = gibbs_train(bows, vocab.len(), &params)?;
            let tops = top_word_ids(&model, vocab, cfg.top_n);
            let score = eval::npmi_from_ids(&tops, bows, cfg.npmi_eps)?;
            Ok((tau, score.mean))
        })
        .collect::<Result<_, LdaError>>()?;
    let mut best = 0;
    for i in 1..table.len() {
        if table[i].1 > table[best].1 {
            best = i;
        }
    }
    Ok(SweepResult {
        best_tau: table[best].0,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bow(pairs: &[(usize, u32)]) -> BowVector {
        BowVector::from_pairs(pairs.iter().copied())
    }

    #[test]
    fn single_doc_conservation() {
        let m = gibbs_train(&[bow(&[(0, 3)])], 1, &LdaParams::new(2, 5, 1)).unwrap();
        assert_eq!(m.doc_topic_row(0).iter().sum::<u32>(), 3);
        m.check_invariants().unwrap();
    }

    #[test]
    fn errors() {
        assert!(matches!(
            gibbs_train(&[bow(&[(0, 1)]), bow(&[])], 1, &LdaParams::new(2, 1, 0)),
            Err(LdaError::EmptyDocument(1))
        ));
        assert!(matches!(
            gibbs_train(&[bow(&[(0, 1)])], 1, &LdaParams::new(1, 1, 0)),
            Err(LdaError::TooFewTopics(1))
        ));
        assert!(matches!(
            gibbs_train(&[bow(&[(0, 1)])], 1, &LdaParams::new(2, 0, 0)),
            Err(LdaError::NoIterations)
        ));
    }

    #[test]
    fn two_docs_separate() {
        let bows = vec![bow(&[(0, 10)]), bow(&[(1, 10)])];
        let mut params = LdaParams::new(2, 200, 17);
        params.alpha = Some(0.1);
        let m = gibbs_train(&bows, 2, &params).unwrap();
        for d in 0..2 {
            let row = m.doc_topic_row(d);
            let major = *row.iter().max().unwrap();
            assert!(major as f64 >= 0.9 * 10.0, "doc {d}: {row:?}");
        }
        assert_ne!(m.doc_argmax()[0], m.doc_argmax()[1]);
    }

    #[test]
    fn deterministic_given_seed() {
        let bows = vec![bow(&[(0, 3), (2, 1)]), bow(&[(1, 4)]), bow(&[(0, 1), (1, 1), (2, 2)])];
        let a = gibbs_train(&bows, 3, &LdaParams::new(3, 20, 99)).unwrap();
        let b = gibbs_train(&bows, 3, &LdaParams::new(3, 20, 99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn top_words_ties() {
        let vocab = Vocab::from_token_list(["y", "x"]).unwrap();
        let mut m = gibbs_train(&[bow(&[(0, 1), (1, 1)])], 2, &LdaParams::new(2, 1, 0)).unwrap();
        m.n_kw = vec![3, 3, 1, 5];
        assert_eq!(top_words(&m, &vocab, 2)[0], vec!["x", "y"]);
        assert_eq!(top_words(&m, &vocab, 1)[1], vec!["x"]);
    }

    #[test]
    fn bootstrap_fallback_and_ties() {
        let docs = vec![
            Document::from_tokens("a", "en", ["p", "q"]).unwrap(),
            Document::from_tokens("b", "en", ["zzz"]).unwrap(),
        ];
        let tops = vec![vec!["p".to_string()], vec!["q".to_string()]];
        let s = bootstrap_labels(&docs, &tops, &[1, 1]).unwrap();
        assert_eq!(s.labels.labels, vec![0, 1]);
        assert_eq!(s.fallback_count, 1);
        assert!((s.disagreement_rate - 0.5).abs() < 1e-15);
        assert!(matches!(bootstrap_labels(&docs, &[], &[0, 0]), Err(LdaError::NoTopLists)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let bows = vec![bow(&[(0, 3), (2, 1)]), bow(&[(1, 4)])];
        let m = gibbs_train(&bows, 3, &LdaParams::new(2, 3, 5)).unwrap();
        let back = LdaModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(m, back);
        let mut bytes = m.to_bytes();
        bytes.pop();
        assert!(LdaModel::from_bytes(&bytes).is_err());
    }
}
