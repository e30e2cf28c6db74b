//! Configuration-driven orchestration: ingest → LDA → labels → train →
//! evaluate → report.
//!
//! Every stage writes under the run's output directory and records each file
//! it produced, with its SHA-256, in `MANIFEST.json`. A `.lock` file keeps a
//! second writer out of the same directory.

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{build_vocab, load_from_manifest, vectorize_all, AlignedCorpus, BowVector, CorpusManifest, Vocab};
use crate::embedstore::{attach_aligned, read_embeddings, BoundAligned};
use crate::eval::{self, EvalReport};
use crate::lda::{self, LabelSummary, LdaModel, LdaParams, SweepConfig, SweepResult};
use crate::nnkernel::{AdamConfig, Matrix};
use crate::ntm::{self, EpochLog, ModelKind, NtmConfig, NtmModel, Precision, TrainingData};
use crate::TOOLKIT_VERSION;

pub const MANIFEST_FILE: &str = "MANIFEST.json";
const LOCK_FILE: &str = ".lock";

fn default_tau() -> usize {
    100
}
fn default_eta() -> f64 {
    0.01
}
fn default_iterations() -> usize {
    400
}
fn default_epochs() -> usize {
    60
}
fn default_lr() -> f64 {
    2e-3
}
fn default_batch() -> usize {
    64
}
fn default_dropout() -> f64 {
    0.2
}
fn default_hidden() -> Vec<usize> {
    vec![100, 100]
}
fn default_cap() -> usize {
    5000
}
fn default_top_n() -> usize {
    10
}
fn default_models() -> Vec<ModelKind> {
    vec![ModelKind::ProdLda, ModelKind::Ctm, ModelKind::Tcctm]
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_model() -> ModelKind {
    ModelKind::Tcctm
}

/// A run configuration, read from TOML. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus manifest (JSON).
    pub manifest: PathBuf,
    /// PTEB1 file per language.
    #[serde(default)]
    pub embeddings: BTreeMap<String, PathBuf>,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    #[serde(default = "default_tau")]
    pub tau: usize,
    /// Topic count of the LDA run that produces labels; `τ` when unset.
    #[serde(default)]
    pub labels_tau: Option<usize>,
    /// Classification weight; only valid for `tcctm` (default 1.0 there).
    #[serde(default)]
    pub lambda: Option<f64>,
    /// LDA document-topic concentration; `50/τ` when unset.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Symmetric Dirichlet parameter behind the encoder prior; `1/τ` when unset.
    #[serde(default)]
    pub prior_alpha: Option<f64>,
    #[serde(default = "default_iterations")]
    pub lda_iterations: usize,
    /// Topic counts compared by NPMI in the LDA stage; empty skips the sweep.
    #[serde(default)]
    pub tau_grid: Vec<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_cap")]
    pub vocab_cap: usize,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Seeds of the `repro` grid; `[seed]` when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_models")]
    pub repro_models: Vec<ModelKind>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn join_fields(errors: &[FieldError]) -> String {
    errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {}", join_fields(.0))]
    ConfigInvalid(Vec<FieldError>),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn StdError + Send + Sync>,
    },
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
}

impl PipelineError {
    /// 1 for configuration problems, 2 for everything that failed at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::ConfigInvalid(_) => 1,
            _ => 2,
        }
    }

    fn stage(stage: &'static str, source: impl StdError + Send + Sync + 'static) -> Self {
        PipelineError::Stage {
            stage,
            source: Box::new(source),
        }
    }

    fn message(stage: &'static str, msg: impl Into<String>) -> Self {
        PipelineError::Stage {
            stage,
            source: msg.into().into(),
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::ConfigInvalid(vec![FieldError {
        field: field.into(),
        message: message.into(),
    }])
}

impl RunConfig {
    /// A config with every default, pointing at `manifest`.
    pub fn with_manifest(manifest: impl Into<PathBuf>) -> Self {
        let mut cfg: RunConfig = toml::from_str("manifest = \"\"").expect("defaults parse");
        cfg.manifest = manifest.into();
        cfg
    }

    /// Parses TOML and resolves relative paths against `base_dir`. Does not
    /// validate.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| invalid("config", e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.manifest);
        resolve(&mut cfg.output_dir);
        cfg.embeddings.values_mut().for_each(resolve);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid("config", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.seeds = vec![seed];
        }
        if let Some(p) = o.precision {
            self.precision = p;
        }
        if let Some(out) = &o.output_dir {
            self.output_dir = out.clone();
        }
    }

    pub fn labels_tau(&self) -> usize {
        self.labels_tau.unwrap_or(self.tau)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(1.0)
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut errs = Vec::new();
        let mut bad = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.into(),
                message,
            })
        };
        if self.tau < 2 {
            bad("tau", format!("must be >= 2, got {}", self.tau));
        }
        if let Some(t) = self.labels_tau {
            if t < 2 {
                bad("labels_tau", format!("must be >= 2, got {t}"));
            }
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                bad("lambda", format!("must be >= 0, got {l}"));
            }
            if self.model != ModelKind::Tcctm {
                bad("lambda", "lambda requires tcctm".into());
            }
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                bad("alpha", format!("must be > 0, got {a}"));
            }
        }
        if let Some(a) = self.prior_alpha {
            if !(a > 0.0 && a.is_finite()) {
                bad("prior_alpha", format!("must be > 0, got {a}"));
            }
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            bad("eta", format!("must be > 0, got {}", self.eta));
        }
        if self.lda_iterations == 0 {
            bad("lda_iterations", "must be >= 1".into());
        }
        if let Some(t) = self.tau_grid.iter().find(|&&t| t < 2) {
            bad("tau_grid", format!("entries must be >= 2, got {t}"));
        }
        if self.epochs == 0 {
            bad("epochs", "must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad("lr", format!("must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            bad("batch_size", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad("dropout", format!("must be in [0, 1), got {}", self.dropout));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            bad("hidden", "needs at least one layer and every size >= 1".into());
        }
        if self.vocab_cap == 0 {
            bad("vocab_cap", "must be >= 1".into());
        }
        if self.top_n < 2 {
            bad("top_n", "must be >= 2".into());
        }
        if self.repro_models.is_empty() {
            bad("repro_models", "must list at least one model".into());
        }
        if !self.manifest.is_file() {
            bad("manifest", format!("{} does not exist", self.manifest.display()));
        }
        for (lang, p) in &self.embeddings {
            if !p.is_file() {
                bad(&format!("embeddings.{lang}"), format!("{} does not exist", p.display()));
            }
        }
        if self.embeddings.is_empty() && self.model != ModelKind::ProdLda {
            bad("embeddings", format!("model {} needs embedding files", self.model));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::ConfigInvalid(errs))
        }
    }

    /// SHA-256 of the config with the output directory blanked, so the same
    /// experiment hashes equally wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn ntm_config(&self, kind: ModelKind, input_dim: usize, vocab_size: usize, seed: u64) -> NtmConfig {
        let mut c = NtmConfig::new(kind, input_dim, vocab_size, self.tau);
        if kind == ModelKind::Tcctm {
            c.label_topics = Some(self.labels_tau());
            c.lambda = self.lambda();
        }
        c.hidden = self.hidden.clone();
        c.dropout = self.dropout;
        c.prior_alpha = self.prior_alpha;
        c.epochs = self.epochs;
        c.batch_size = self.batch_size;
        c.adam = AdamConfig::with_lr(self.lr);
        c.seed = seed;
        c.precision = self.precision;
        c
    }
}

/// Contents of `MANIFEST.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    /// Stage name → artifact paths (relative to the output directory).
    pub stages: BTreeMap<String, Vec<String>>,
    /// Artifact path → SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, PipelineError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::stage("manifest", e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::stage("manifest", e))
}

/// An output directory held for writing.
struct Run {
    dir: PathBuf,
    lock: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn open(config: &RunConfig) -> Result<Self, PipelineError> {
        let dir = config.output_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::stage("output", e))?;
        let lock = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(PipelineError::Locked(dir));
            }
            Err(e) => return Err(PipelineError::stage("output", e)),
        }
        let hash = config.hash();
        let manifest = match read_manifest(&dir) {
            Ok(m) if m.config_sha256 == hash => m,
            _ => RunManifest {
                toolkit_version: TOOLKIT_VERSION.to_owned(),
                config_sha256: hash,
                seeds: config.seeds(),
                stages: BTreeMap::new(),
                artifacts: BTreeMap::new(),
            },
        };
        Ok(Self { dir, lock, manifest })
    }

    fn record(&mut self, stage: &str, paths: &[PathBuf]) -> Result<(), PipelineError> {
        let entry = self.manifest.stages.entry(stage.to_owned()).or_default();
        for p in paths {
            let rel = p
                .strip_prefix(&self.dir)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/");
            let digest = sha256_file(p).map_err(|e| PipelineError::stage("manifest", e))?;
            if !entry.contains(&rel) {
                entry.push(rel.clone());
            }
            self.manifest.artifacts.insert(rel, digest);
        }
        entry.sort();
        Ok(())
    }

    fn finish(self) -> Result<RunManifest, PipelineError> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| PipelineError::stage("manifest", e))?;
        Ok(self.manifest.clone())
    }
}

impl Drop for Run {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

/// Loaded corpus with per-language vocabularies and bags of words.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: AlignedCorpus,
    pub vocabs: BTreeMap<String, Vocab>,
    pub bows: BTreeMap<String, Vec<BowVector>>,
}

impl Prepared {
    pub fn pivot_vocab(&self) -> &Vocab {
        &self.vocabs[&self.corpus.pivot]
    }

    pub fn pivot_bows(&self) -> &[BowVector] {
        &self.bows[&self.corpus.pivot]
    }

    pub fn pivot_ids(&self) -> Vec<String> {
        self.corpus.pivot_docs().iter().map(|d| d.id.clone()).collect()
    }
}

pub fn prepare(config: &RunConfig) -> Result<Prepared, PipelineError> {
    let st = |e| PipelineError::stage("ingest", e);
    let manifest = CorpusManifest::read(&config.manifest).map_err(st)?;
    let corpus = load_from_manifest(&manifest).map_err(st)?;
    let mut vocabs = BTreeMap::new();
    let mut bows = BTreeMap::new();
    for (lang, docs) in corpus.languages.iter().zip(&corpus.docs) {
        let stop = manifest.stopwords_for(lang).map_err(st)?;
        let vocab = build_vocab(docs, config.vocab_cap, &stop).map_err(st)?;
        bows.insert(lang.clone(), vectorize_all(docs, &vocab));
        vocabs.insert(lang.clone(), vocab);
    }
    Ok(Prepared { corpus, vocabs, bows })
}

fn write_text(stage: &'static str, path: PathBuf, text: &str) -> Result<PathBuf, PipelineError> {
    std::fs::write(&path, text).map_err(|e| PipelineError::stage(stage, e))?;
    Ok(path)
}

fn write_json<T: Serialize>(stage: &'static str, path: PathBuf, value: &T) -> Result<PathBuf, PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write_text(stage, path, &(text + "\n"))
}

fn mkdir(stage: &'static str, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::stage(stage, e))
}

#[derive(Serialize)]
struct BowRecord<'a> {
    id: &'a str,
    counts: Vec<(usize, u32)>,
}

fn write_ingest(prep: &Prepared, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for (lang, docs) in prep.corpus.languages.iter().zip(&prep.corpus.docs) {
        let vp = dir.join(format!("vocab.{lang}.txt"));
        prep.vocabs[lang].write(&vp).map_err(|e| PipelineError::stage("ingest", e))?;
        out.push(vp);
        let mut text = String::new();
        for (doc, bow) in docs.iter().zip(&prep.bows[lang]) {
            let rec = BowRecord {
                id: &doc.id,
                counts: bow.iter().collect(),
            };
            text.push_str(&serde_json::to_string(&rec).expect("bow serializes"));
            text.push('\n');
        }
        out.push(write_text("ingest", dir.join(format!("bow.{lang}.jsonl")), &text)?);
    }
    Ok(out)
}

/// Builds vocabularies and bag-of-words caches for every language.
pub fn cmd_ingest(config: &RunConfig) -> Result<RunManifest, PipelineError> {
    config.validate()?;
    let mut run = Run::open(config)?;
    let prep = prepare(config)?;
    let files = write_ingest(&prep, &run.dir)?;
    run.record("ingest", &files)?;
    run.finish()
}

#[derive(Debug, Clone)]
pub struct LdaOutput {
    pub model: LdaModel,
    pub labels: LabelSummary,
    pub sweep: Option<SweepResult>,
}

fn write_sweep(dir: &Path, sweep: &SweepResult) -> Result<PathBuf, PipelineError> {
    let mut text = String::from("tau,npmi\n");
    for (tau, npmi) in &sweep.table {
        text.push_str(&format!("{tau},{npmi}\n"));
    }
    write_text("lda", dir.join("lda_sweep.csv"), &text)
}

fn label_from_model(
    config: &RunConfig,
    prep: &Prepared,
    model: &LdaModel,
    dir: &Path,
    stage: &'static str,
) -> Result<(LabelSummary, Vec<PathBuf>), PipelineError> {
    let tops = lda::top_words(model, prep.pivot_vocab(), config.top_n);
    let summary = lda::bootstrap_labels(prep.corpus.pivot_docs(), &tops, &model.doc_argmax())
        .map_err(|e| PipelineError::stage(stage, e))?;
    let lp = dir.join("labels.jsonl");
    lda::write_labels(&lp, &prep.pivot_ids(), &summary.labels).map_err(|e| PipelineError::stage(stage, e))?;
    let sp = write_json(stage, dir.join("label_summary.json"), &summary)?;
    let tp = write_json(stage, dir.join("lda_topics.json"), &tops)?;
    Ok((summary, vec![lp, sp, tp]))
}

fn run_lda(
    config: &RunConfig,
    prep: &Prepared,
    seed: u64,
    dir: &Path,
    with_sweep: bool,
) -> Result<(LdaOutput, Vec<PathBuf>), PipelineError> {
    let st = |e| PipelineError::stage("lda", e);
    mkdir("lda", dir)?;
    let mut files = Vec::new();
    let sweep = if with_sweep && !config.tau_grid.is_empty() {
        let mut sc = SweepConfig::new(config.tau_grid.clone(), config.lda_iterations, seed);
        sc.alpha = config.alpha;
        sc.eta = config.eta;
        sc.top_n = config.top_n;
        let result = lda::sweep_topics(prep.pivot_bows(), prep.pivot_vocab(), &sc).map_err(st)?;
        files.push(write_sweep(dir, &result)?);
        Some(result)
    } else {
        None
    };
    let params = LdaParams {
        tau: config.labels_tau(),
        iterations: config.lda_iterations,
        alpha: config.alpha,
        eta: config.eta,
        seed,
    };
    let model = lda::gibbs_train(prep.pivot_bows(), prep.pivot_vocab().len(), &params).map_err(st)?;
    let ckpt = dir.join("lda.ckpt");
    model.save(&ckpt).map_err(st)?;
    files.push(ckpt);
    let (labels, label_files) = label_from_model(config, prep, &model, dir, "lda")?;
    files.extend(label_files);
    Ok((LdaOutput { model, labels, sweep }, files))
}

/// Optional τ sweep, LDA at the label topic count, and bootstrap labels.
pub fn cmd_lda(config: &RunConfig) -> Result<LdaOutput, PipelineError> {
    config.validate()?;
    let mut run = Run::open(config)?;
    let prep = prepare(config)?;
    let dir = run.dir.clone();
    let (out, files) = run_lda(config, &prep, config.seed, &dir, true)?;
    run.record("lda", &files)?;
    run.finish()?;
    Ok(out)
}

/// Regenerates labels from an existing LDA checkpoint (default
/// `<out>/lda.ckpt`).
pub fn cmd_label(config: &RunConfig, checkpoint: Option<&Path>) -> Result<LabelSummary, PipelineError> {
    config.validate()?;
    let mut run = Run::open(config)?;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.dir.join("lda.ckpt"));
    let model = LdaModel::load(&ckpt).map_err(|e| PipelineError::stage("label", e))?;
    let prep = prepare(config)?;
    if model.num_docs() != prep.corpus.len() {
        return Err(PipelineError::message(
            "label",
            format!(
                "checkpoint has {} documents but the corpus has {}",
                model.num_docs(),
                prep.corpus.len()
            ),
        ));
    }
    let dir = run.dir.clone();
    let (summary, files) = label_from_model(config, &prep, &model, &dir, "label")?;
    run.record("label", &files)?;
    run.finish()?;
    Ok(summary)
}

pub fn bind_embeddings(config: &RunConfig, corpus: &AlignedCorpus) -> Result<BoundAligned, PipelineError> {
    let st = |e| PipelineError::stage("embed", e);
    let mut mats = BTreeMap::new();
    for (lang, p) in &config.embeddings {
        mats.insert(lang.clone(), read_embeddings(p).map_err(st)?);
    }
    attach_aligned(corpus, &mats).map_err(st)
}

fn encoder_input(kind: ModelKind, prep: &Prepared, bound: Option<&BoundAligned>) -> Result<Matrix, PipelineError> {
    if kind == ModelKind::ProdLda {
        return Ok(TrainingData::from_bows(prep.pivot_bows().to_vec(), prep.pivot_vocab().len()).features);
    }
    let bound = bound.ok_or_else(|| PipelineError::message("train", format!("{kind} needs embeddings")))?;
    Ok(bound
        .pivot_set()
        .map_err(|e| PipelineError::stage("train", e))?
        .features
        .clone())
}

fn run_train(
    config: &RunConfig,
    kind: ModelKind,
    prep: &Prepared,
    bound: Option<&BoundAligned>,
    labels: Option<&[usize]>,
    seed: u64,
    dir: &Path,
) -> Result<(NtmModel, Vec<EpochLog>, Vec<PathBuf>), PipelineError> {
    let st = |e| PipelineError::stage("train", e);
    mkdir("train", dir)?;
    let features = encoder_input(kind, prep, bound)?;
    let data = TrainingData {
        features,
        bows: prep.pivot_bows().to_vec(),
        labels: if kind == ModelKind::Tcctm {
            labels.map(<[usize]>::to_vec)
        } else {
            None
        },
    };
    let ncfg = config.ntm_config(kind, data.features.cols(), prep.pivot_vocab().len(), seed);
    ncfg.validate().map_err(st)?;
    let (model, log) = ntm::train(&data, &ncfg).map_err(st)?;
    let ckpt = dir.join("model.ckpt");
    model.save(&ckpt).map_err(st)?;
    let mut text = String::new();
    for entry in &log {
        text.push_str(&serde_json::to_string(entry).expect("log serializes"));
        text.push('\n');
    }
    let lp = write_text("train", dir.join("train_log.jsonl"), &text)?;
    Ok((model, log, vec![ckpt, lp]))
}

/// Labels aligned to the pivot document order, read from `labels.jsonl`.
fn labels_in_order(path: &Path, ids: &[String]) -> Result<Vec<usize>, PipelineError> {
    let st = |e| PipelineError::stage("train", e);
    let map: BTreeMap<String, usize> = lda::read_labels(path).map_err(st)?.into_iter().collect();
    ids.iter()
        .map(|id| {
            map.get(id)
                .copied()
                .ok_or_else(|| PipelineError::message("train", format!("no label for document {id:?}")))
        })
        .collect()
}

/// Trains `config.model`. TCCTM reads `<out>/labels.jsonl`, running the LDA
/// stage first when it is missing.
pub fn cmd_train(config: &RunConfig) -> Result<(NtmModel, Vec<EpochLog>), PipelineError> {
    config.validate()?;
    let mut run = Run::open(config)?;
    let prep = prepare(config)?;
    let dir = run.dir.clone();
    let bound = if config.model == ModelKind::ProdLda {
        None
    } else {
        Some(bind_embeddings(config, &prep.corpus)?)
    };
    let labels = if config.model == ModelKind::Tcctm {
        let lp = dir.join("labels.jsonl");
        if !lp.is_file() {
            let (_, files) = run_lda(config, &prep, config.seed, &dir, false)?;
            run.record("lda", &files)?;
        }
        Some(labels_in_order(&lp, &prep.pivot_ids())?)
    } else {
        None
    };
    let (model, log, files) = run_train(
        config,
        config.model,
        &prep,
        bound.as_ref(),
        labels.as_deref(),
        config.seed,
        &dir,
    )?;
    run.record("train", &files)?;
    run.finish()?;
    Ok((model, log))
}

fn run_eval(
    config: &RunConfig,
    model: &NtmModel,
    prep: &Prepared,
    bound: Option<&BoundAligned>,
    seed: u64,
    dir: &Path,
) -> Result<(EvalReport, Vec<PathBuf>), PipelineError> {
    let st = |e| PipelineError::stage("eval", e);
    let kind = model.kind();
    let features = encoder_input(kind, prep, bound).map_err(|e| match e {
        PipelineError::Stage { source, .. } => PipelineError::Stage { stage: "eval", source },
        other => other,
    })?;
    let transfer = if kind == ModelKind::ProdLda { None } else { bound };
    let mut report = eval::evaluate(model, prep.pivot_vocab(), prep.pivot_bows(), &features, transfer, seed).map_err(st)?;
    report.top_words = model.top_words(prep.pivot_vocab(), config.top_n);
    let files = eval::write_report(dir, &report).map_err(st)?;
    Ok((report, files))
}

/// Evaluates a trained model (default `<out>/model.ckpt`).
pub fn cmd_eval(config: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport, PipelineError> {
    config.validate()?;
    let mut run = Run::open(config)?;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.dir.join("model.ckpt"));
    let model = NtmModel::load(&ckpt).map_err(|e| PipelineError::stage("eval", e))?;
    let prep = prepare(config)?;
    let bound = if model.kind() == ModelKind::ProdLda {
        None
    } else {
        Some(bind_embeddings(config, &prep.corpus)?)
    };
    let dir = run.dir.clone();
    let (report, files) = run_eval(config, &model, &prep, bound.as_ref(), config.seed, &dir)?;
    run.record("eval", &files)?;
    run.finish()?;
    Ok(report)
}

/// Per-model results of a `repro` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    /// NPMI per seed, in seed order.
    pub npmi: Vec<f64>,
    pub median_npmi: f64,
    /// Language → Match % per seed.
    pub match_pct: BTreeMap<String, Vec<f64>>,
    pub mean_kl: BTreeMap<String, Vec<f64>>,
    pub random_match_pct: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproSummary {
    pub seeds: Vec<u64>,
    pub tau: usize,
    pub sweep: Option<SweepResult>,
    pub label_disagreement: Vec<f64>,
    pub models: BTreeMap<ModelKind, ModelSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn summary_csv(s: &ReproSummary) -> String {
    let mut out = String::from("model,seed,npmi\n");
    for (kind, m) in &s.models {
        for (seed, v) in s.seeds.iter().zip(&m.npmi) {
            out.push_str(&format!("{kind},{seed},{v}\n"));
        }
        out.push_str(&format!("{kind},median,{}\n", m.median_npmi));
    }
    out
}

/// The full grid: for each seed, LDA labels then every model in
/// `repro_models`, each trained and evaluated under `seed_<s>/<model>/`.
pub fn cmd_repro(config: &RunConfig) -> Result<ReproSummary, PipelineError> {
    config.validate()?;
    let mut run = Run::open(config)?;
    let prep = prepare(config)?;
    let root = run.dir.clone();
    let ingest_files = write_ingest(&prep, &root)?;
    run.record("ingest", &ingest_files)?;
    let needs_embeddings = config.repro_models.iter().any(|k| *k != ModelKind::ProdLda);
    let bound = if needs_embeddings {
        Some(bind_embeddings(config, &prep.corpus)?)
    } else {
        None
    };
    let needs_labels = config.repro_models.contains(&ModelKind::Tcctm);
    let seeds = config.seeds();
    let mut summary = ReproSummary {
        seeds: seeds.clone(),
        tau: config.tau,
        sweep: None,
        label_disagreement: Vec::new(),
        models: BTreeMap::new(),
    };
    for (i, &seed) in seeds.iter().enumerate() {
        let seed_dir = root.join(format!("seed_{seed}"));
        let labels = if needs_labels || (i == 0 && !config.tau_grid.is_empty()) {
            let (out, files) = run_lda(config, &prep, seed, &seed_dir.join("lda"), i == 0)?;
            run.record("lda", &files)?;
            if i == 0 {
                summary.sweep = out.sweep.clone();
            }
            summary.label_disagreement.push(out.labels.disagreement_rate);
            Some(out.labels.labels.labels)
        } else {
            None
        };
        for &kind in &config.repro_models {
            let dir = seed_dir.join(kind.name());
            let (model, _, train_files) = run_train(config, kind, &prep, bound.as_ref(), labels.as_deref(), seed, &dir)?;
            run.record("train", &train_files)?;
            let (report, eval_files) = run_eval(config, &model, &prep, bound.as_ref(), seed, &dir)?;
            run.record("eval", &eval_files)?;
            log::info!("seed {seed} {kind}: npmi {:.4}", report.npmi);
            let entry = summary.models.entry(kind).or_insert_with(|| ModelSummary {
                npmi: Vec::new(),
                median_npmi: f64::NAN,
                match_pct: BTreeMap::new(),
                mean_kl: BTreeMap::new(),
                random_match_pct: BTreeMap::new(),
            });
            entry.npmi.push(report.npmi);
            for (lang, v) in &report.match_pct {
                entry.match_pct.entry(lang.clone()).or_default().push(*v);
            }
            for (lang, v) in &report.mean_kl {
                entry.mean_kl.entry(lang.clone()).or_default().push(*v);
            }
            for (lang, v) in &report.random_match_pct {
                entry.random_match_pct.entry(lang.clone()).or_default().push(*v);
            }
        }
    }
    for m in summary.models.values_mut() {
        m.median_npmi = median(&m.npmi);
    }
    let sj = write_json("repro", root.join("summary.json"), &summary)?;
    let sc = write_text("repro", root.join("summary.csv"), &summary_csv(&summary))?;
    run.record("repro", &[sj, sc])?;
    run.finish()?;
    Ok(summary)
}

/// Writes a commented TOML file holding every default value.
pub fn write_default_config(path: &Path, manifest: &Path) -> std::io::Result<()> {
    let cfg = RunConfig::with_manifest(manifest);
    let mut f = File::create(path)?;
    f.write_all(cfg.to_toml_string().as_bytes())
}
