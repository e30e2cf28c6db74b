//! Planted-topic corpora for end-to-end checks.
//!
//! Each topic owns a disjoint block of words `t{k}w{j}`. A document draws a
//! dominant topic and takes most of its tokens from it, the rest from the
//! other topics. The target language is a token-for-token translation with
//! a `_{lang}` suffix. Document embeddings are the empirical topic shares
//! times per-topic centroids; the target side adds `σ·ε` with a fixed `ε`
//! per seed, so sweeping `σ` scales one noise draw.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::corpus::{write_documents, CorpusError, CorpusManifest, DocRecord, Document};
use crate::embedstore::{write_embeddings, EmbedError, EmbeddingMatrix};
use crate::nnkernel::{Matrix, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub docs: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub doc_len: usize,
    /// Fraction of tokens drawn from the dominant topic.
    pub dominant_share: f64,
    pub dim: usize,
    /// Standard deviation of each centroid coordinate.
    pub centroid_scale: f64,
    pub pivot: String,
    pub target: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            docs: 1000,
            topics: 4,
            words_per_topic: 10,
            doc_len: 40,
            dominant_share: 0.85,
            dim: 32,
            centroid_scale: 0.5,
            pivot: "en".into(),
            target: "xx".into(),
            seed: 0,
        }
    }
}

pub fn topic_word(k: usize, j: usize) -> String {
    format!("t{k}w{j}")
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub ids: Vec<String>,
    pub pivot_docs: Vec<Document>,
    pub target_docs: Vec<Document>,
    pub dominant: Vec<usize>,
    /// Empirical topic share of each document's tokens (docs × topics).
    pub shares: Matrix,
    /// Noise-free embeddings (docs × dim).
    pub clean: Matrix,
    /// Standard normal draw added to the target side, scaled by `σ`.
    pub noise: Matrix,
}

impl SynthCorpus {
    pub fn generate(config: &SynthConfig) -> Self {
        assert!(config.topics >= 2 && config.words_per_topic >= 1 && config.doc_len >= 1);
        let base = RngStream::new(config.seed);
        let mut centroid_rng = base.fork(0);
        let mut doc_rng = base.fork(1);
        let mut noise_rng = base.fork(2);
        let (tau, dim) = (config.topics, config.dim);

        let centroids = Matrix::from_vec(
            tau,
            dim,
            (0..tau * dim).map(|_| config.centroid_scale * centroid_rng.standard_normal()).collect(),
        )
        .expect("centroid shape");

        let mut ids = Vec::with_capacity(config.docs);
        let mut pivot_docs = Vec::with_capacity(config.docs);
        let mut target_docs = Vec::with_capacity(config.docs);
        let mut dominant = Vec::with_capacity(config.docs);
        let mut shares = Matrix::zeros(config.docs, tau);
        for d in 0..config.docs {
            let id = format!("doc{d:05}");
            let main = doc_rng.below(tau);
            let mut tokens = Vec::with_capacity(config.doc_len);
            for _ in 0..config.doc_len {
                let k = if doc_rng.random::<f64>() < config.dominant_share {
                    main
                } else {
                    let other = doc_rng.below(tau - 1);
                    if other >= main {
                        other + 1
                    } else {
                        other
                    }
                };
                let j = doc_rng.below(config.words_per_topic);
                shares[(d, k)] += 1.0 / config.doc_len as f64;
                tokens.push(topic_word(k, j));
            }
            let translated: Vec<String> = tokens.iter().map(|t| format!("{t}_{}", config.target)).collect();
            pivot_docs.push(Document::from_tokens(&id, &config.pivot, &tokens).expect("non-empty id"));
            target_docs.push(Document::from_tokens(&id, &config.target, &translated).expect("non-empty id"));
            ids.push(id);
            dominant.push(main);
        }
        let clean = shares.matmul(&centroids).expect("share × centroid shapes agree");
        let noise = Matrix::from_vec(
            config.docs,
            dim,
            (0..config.docs * dim).map(|_| noise_rng.standard_normal()).collect(),
        )
        .expect("noise shape");
        Self {
            config: config.clone(),
            ids,
            pivot_docs,
            target_docs,
            dominant,
            shares,
            clean,
            noise,
        }
    }

    pub fn pivot_embeddings(&self) -> EmbeddingMatrix {
        self.embeddings_with(0.0)
    }

    /// Target-language embeddings: clean vectors plus `sigma` times the
    /// stored noise draw.
    pub fn target_embeddings(&self, sigma: f64) -> EmbeddingMatrix {
        self.embeddings_with(sigma)
    }

    fn embeddings_with(&self, sigma: f64) -> EmbeddingMatrix {
        let values = self
            .clean
            .as_slice()
            .iter()
            .zip(self.noise.as_slice())
            .map(|(&c, &e)| (c + sigma * e) as f32)
            .collect();
        EmbeddingMatrix::new(self.config.dim, self.ids.clone(), values).expect("finite embeddings")
    }

    /// Writes document files, a corpus manifest and both embedding files
    /// into `dir`.
    pub fn write_fixture(&self, dir: &Path, sigma: f64) -> Result<FixturePaths, FixtureError> {
        std::fs::create_dir_all(dir).map_err(|source| FixtureError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut files = BTreeMap::new();
        let mut embeddings = BTreeMap::new();
        for (lang, docs) in [(&self.config.pivot, &self.pivot_docs), (&self.config.target, &self.target_docs)] {
            let records: Vec<DocRecord> = docs
                .iter()
                .map(|d| DocRecord {
                    id: d.id.clone(),
                    lang: lang.clone(),
                    text: d.tokens.join(" "),
                })
                .collect();
            let name = format!("docs.{lang}.jsonl");
            write_documents(&dir.join(&name), &records)?;
            files.insert(lang.clone(), PathBuf::from(name));

            let emb = if *lang == self.config.pivot {
                self.pivot_embeddings()
            } else {
                self.target_embeddings(sigma)
            };
            let path = dir.join(format!("emb.{lang}.pteb"));
            write_embeddings(&path, &emb)?;
            embeddings.insert(lang.clone(), path);
        }
        let manifest = dir.join("corpus.json");
        CorpusManifest::new(&self.config.pivot, files, BTreeMap::new()).write(&manifest)?;
        Ok(FixturePaths { manifest, embeddings })
    }
}

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub manifest: PathBuf,
    pub embeddings: BTreeMap<String, PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}
