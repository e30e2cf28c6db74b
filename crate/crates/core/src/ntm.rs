//! ProdLDA, CTM and TCCTM.
//!
//! All three share one architecture: an inference network
//! `input → (dense → softplus) × L → dropout → {μ, log σ²}` with batch
//! normalisation on both heads, a reparameterised logistic-normal sample
//! `θ = softmax(z)`, and a product-of-experts decoder
//! `softmax(bn(θ·β))` that reconstructs the pivot-language bag of words.
//! ProdLDA feeds the bag of words to the encoder, CTM feeds a document
//! embedding, and TCCTM adds a classification layer on `θ` trained against
//! bootstrap topic labels with weight `λ`.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BowVector, Vocab};
use crate::nnkernel::{
    adam_step, dropout, log_softmax_rows, sample_gaussian, softmax_backward, softmax_rows,
    Activation, AdamConfig, BatchNorm, BatchNormCache, Dense, DenseOut, KernelError, Matrix, Param,
    RngStream,
};

const CHECKPOINT_MAGIC: &[u8; 5] = b"PTNTM";
const CHECKPOINT_VERSION: u32 = 1;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Error)]
pub enum NtmError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("input width {found} does not match the model's {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("model has no classification head")]
    NoHead,
    #[error("topic-classification training needs labels")]
    MissingLabels,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset has {features} feature rows but {bows} bags of words")]
    DatasetLength { features: usize, bows: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Mean and variance of the logistic-normal approximation to a Dirichlet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub mu0: Vec<f64>,
    pub var0: Vec<f64>,
}

/// Laplace approximation of `Dir(alpha)` in the softmax basis:
/// `μ₀ₖ = log αₖ − mean(log α)`,
/// `σ₀²ₖ = (1/αₖ)(1 − 2/τ) + (1/τ²) Σᵢ 1/αᵢ`.
pub fn laplace_prior_from(alpha: &[f64]) -> Result<PriorParams, NtmError> {
    let tau = alpha.len();
    if tau < 2 {
        return Err(NtmError::InvalidConfig(format!("prior needs at least 2 topics, got {tau}")));
    }
    if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(NtmError::InvalidConfig(format!("Dirichlet concentration must be positive, got {a}")));
    }
    let t = tau as f64;
    let mean_log = alpha.iter().map(|a| a.ln()).sum::<f64>() / t;
    let sum_inv: f64 = alpha.iter().map(|a| 1.0 / a).sum();
    Ok(PriorParams {
        mu0: alpha.iter().map(|a| a.ln() - mean_log).collect(),
        var0: alpha
            .iter()
            .map(|a| (1.0 / a) * (1.0 - 2.0 / t) + sum_inv / (t * t))
            .collect(),
    })
}

/// Symmetric-concentration prior. `μ₀` is exactly zero.
pub fn laplace_prior(alpha: f64, tau: usize) -> Result<PriorParams, NtmError> {
    let mut p = laplace_prior_from(&vec![alpha; tau])?;
    // log α − log α can differ from 0 by one ulp after averaging.
    p.mu0.iter_mut().for_each(|m| *m = 0.0);
    Ok(p)
}

/// `KL(N(μ, diag e^{log σ²}) ‖ N(μ₀, diag σ₀²))`.
pub fn kl_gauss(mu: &[f64], log_var: &[f64], prior: &PriorParams) -> f64 {
    let mut s = 0.0;
    for k in 0..mu.len() {
        let var0 = prior.var0[k];
        let diff = prior.mu0[k] - mu[k];
        s += log_var[k].exp() / var0 + diff * diff / var0 - 1.0 + var0.ln() - log_var[k];
    }
    0.5 * s
}

/// Negative ELBO of one document: `−Σ_w bow_w log recon_w + KL`.
pub fn elbo_loss(bow: &BowVector, recon: &[f64], mu: &[f64], log_var: &[f64], prior: &PriorParams) -> f64 {
    let rec: f64 = bow.iter().map(|(w, c)| -(c as f64) * recon[w].ln()).sum();
    rec + kl_gauss(mu, log_var, prior)
}

/// `−log softmax(logits)[label]`.
pub fn nll(logits: &[f64], label: usize) -> Result<f64, NtmError> {
    if label >= logits.len() {
        return Err(NtmError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// `elbo + λ · NLL(softmax(logits), label)`.
pub fn tcctm_loss(elbo: f64, logits: &[f64], label: usize, lambda: f64) -> Result<f64, NtmError> {
    let nll = nll(logits, label)?;
    if lambda == 0.0 {
        return Ok(elbo);
    }
    Ok(elbo + lambda * nll)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Bow,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    ProdLda,
    Ctm,
    Tcctm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ProdLda => "prodlda",
            ModelKind::Ctm => "ctm",
            ModelKind::Tcctm => "tcctm",
        }
    }

    pub fn input_mode(self) -> InputMode {
        match self {
            ModelKind::ProdLda => InputMode::Bow,
            _ => InputMode::Embedding,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "prodlda" => Ok(Self::ProdLda),
            "ctm" => Ok(Self::Ctm),
            "tcctm" => Ok(Self::Tcctm),
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(format!("unknown precision {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtmConfig {
    pub input_mode: InputMode,
    pub input_dim: usize,
    pub vocab_size: usize,
    pub tau: usize,
    /// Number of classification targets; a head is built iff present.
    pub label_topics: Option<usize>,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub batch_norm: bool,
    /// Symmetric Dirichlet concentration of the prior; `None` means `1/τ`.
    pub prior_alpha: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lambda: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl NtmConfig {
    /// Defaults: two 100-unit hidden layers, dropout 0.2, 60 epochs, batch
    /// 64, learning rate 2e-3, λ = 1.
    pub fn new(kind: ModelKind, input_dim: usize, vocab_size: usize, tau: usize) -> Self {
        Self {
            input_mode: kind.input_mode(),
            input_dim,
            vocab_size,
            tau,
            label_topics: (kind == ModelKind::Tcctm).then_some(tau),
            hidden: vec![100, 100],
            dropout: 0.2,
            batch_norm: true,
            prior_alpha: None,
            epochs: 60,
            batch_size: 64,
            adam: AdamConfig::with_lr(2e-3),
            lambda: 1.0,
            seed: 0,
            precision: Precision::F64,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match (self.input_mode, self.label_topics) {
            (InputMode::Bow, _) => ModelKind::ProdLda,
            (InputMode::Embedding, None) => ModelKind::Ctm,
            (InputMode::Embedding, Some(_)) => ModelKind::Tcctm,
        }
    }

    pub fn prior_alpha(&self) -> f64 {
        self.prior_alpha.unwrap_or(1.0 / self.tau as f64)
    }

    pub fn validate(&self) -> Result<(), NtmError> {
        let bad = |m: String| Err(NtmError::InvalidConfig(m));
        if self.tau < 2 {
            return bad(format!("tau must be >= 2, got {}", self.tau));
        }
        if self.input_dim == 0 || self.vocab_size == 0 {
            return bad("input and vocabulary widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be non-empty and positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if matches!(self.label_topics, Some(n) if n < 2) {
            return bad("classification head needs at least 2 classes".into());
        }
        if !(self.adam.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.adam.lr));
        }
        Ok(())
    }
}

/// Encoder outputs for a batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub mu: Matrix,
    pub log_var: Matrix,
    pub z: Matrix,
    pub theta: Matrix,
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub nll: f64,
}

/// Activations cached by a training-mode forward pass.
#[derive(Debug, Clone)]
struct Tape {
    x: Matrix,
    bow: Matrix,
    hidden: Vec<DenseOut>,
    drop_mask: Option<Matrix>,
    enc: Matrix,
    mu_out: DenseOut,
    lv_out: DenseOut,
    mu_cache: Option<BatchNormCache>,
    lv_cache: Option<BatchNormCache>,
    mu: Matrix,
    lv_raw: Matrix,
    lv: Matrix,
    eps: Matrix,
    theta: Matrix,
    dec_cache: Option<BatchNormCache>,
    log_recon: Matrix,
    head: Option<(DenseOut, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct NtmModel {
    pub config: NtmConfig,
    pub encoder: Vec<Dense>,
    pub mu_head: Dense,
    pub logvar_head: Dense,
    pub mu_bn: Option<BatchNorm>,
    pub logvar_bn: Option<BatchNorm>,
    /// `τ × |V|` topic-word weights.
    pub beta: Param,
    pub decoder_bn: Option<BatchNorm>,
    pub head: Option<Dense>,
    pub prior: PriorParams,
    tape: Option<Tape>,
}

fn xavier(rows: usize, cols: usize, rng: &mut RngStream) -> Param {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Param::uniform(rows, cols, bound, rng)
}

impl NtmModel {
    pub fn new(config: NtmConfig) -> Result<Self, NtmError> {
        config.validate()?;
        let mut rng = RngStream::new(config.seed).fork(0);
        let mut encoder = Vec::with_capacity(config.hidden.len());
        let mut width = config.input_dim;
        for &h in &config.hidden {
            encoder.push(Dense::init(width, h, &mut rng));
            width = h;
        }
        let tau = config.tau;
        let bn = |n| config.batch_norm.then(|| BatchNorm::new(n, false));
        Ok(Self {
            mu_head: Dense::init(width, tau, &mut rng),
            logvar_head: Dense::init(width, tau, &mut rng),
            mu_bn: bn(tau),
            logvar_bn: bn(tau),
            beta: xavier(tau, config.vocab_size, &mut rng),
            decoder_bn: bn(config.vocab_size),
            head: config.label_topics.map(|n| Dense::init(tau, n, &mut rng)),
            prior: laplace_prior(config.prior_alpha(), tau)?,
            encoder,
            config,
            tape: None,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind()
    }

    pub fn tau(&self) -> usize {
        self.config.tau
    }

    fn check_width(&self, x: &Matrix) -> Result<(), NtmError> {
        if x.cols() != self.config.input_dim {
            return Err(NtmError::WidthMismatch {
                expected: self.config.input_dim,
                found: x.cols(),
            });
        }
        Ok(())
    }

    /// Every trainable parameter, in a fixed order (also the checkpoint order).
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps: Vec<&mut Param> = Vec::new();
        for layer in &mut self.encoder {
            ps.extend(layer.params_mut());
        }
        ps.extend(self.mu_head.params_mut());
        ps.extend(self.logvar_head.params_mut());
        for bn in [&mut self.mu_bn, &mut self.logvar_bn].into_iter().flatten() {
            ps.extend(bn.params_mut());
        }
        ps.push(&mut self.beta);
        if let Some(bn) = &mut self.decoder_bn {
            ps.extend(bn.params_mut());
        }
        if let Some(h) = &mut self.head {
            ps.extend(h.params_mut());
        }
        ps
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn encoder_trunk(&self, x: &Matrix) -> Result<(Vec<DenseOut>, Matrix), NtmError> {
        let mut outs: Vec<DenseOut> = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let input = outs.last().map_or(x, |o| &o.output);
            let out = layer.forward(input, Activation::Softplus)?;
            outs.push(out);
        }
        let h = outs.last().map(|o| o.output.clone()).unwrap_or_else(|| x.clone());
        Ok((outs, h))
    }

    /// Inference network.
    ///
    /// Training mode uses batch statistics (without touching the running
    /// estimates), dropout and a reparameterised sample, `θ = softmax(z)`.
    /// Evaluation mode uses running statistics and `θ = softmax(μ)`.
    pub fn encode(&self, x: &Matrix, rng: &mut RngStream, train: bool) -> Result<Encoded, NtmError> {
        self.check_width(x)?;
        let (_, h) = self.encoder_trunk(x)?;
        let (h, _) = dropout(&h, self.config.dropout, train, rng);
        let mu_pre = self.mu_head.forward(&h, Activation::Identity)?.output;
        let lv_pre = self.logvar_head.forward(&h, Activation::Identity)?.output;
        let norm = |bn: &Option<BatchNorm>, m: Matrix| -> Result<Matrix, NtmError> {
            Ok(match bn {
                None => m,
                Some(bn) if train => bn.clone().forward_train(&m)?.0,
                Some(bn) => bn.forward_eval(&m)?,
            })
        };
        let mu = norm(&self.mu_bn, mu_pre)?;
        let log_var = norm(&self.logvar_bn, lv_pre)?.map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
        if train {
            let (z, _) = sample_gaussian(&mu, &log_var, rng)?;
            let theta = softmax_rows(&z);
            Ok(Encoded { mu, log_var, z, theta })
        } else {
            let theta = softmax_rows(&mu);
            Ok(Encoded {
                z: mu.clone(),
                mu,
                log_var,
                theta,
            })
        }
    }

    /// Word distributions `softmax(bn(θ·β))` with running decoder statistics.
    pub fn decode(&self, theta: &Matrix) -> Result<Matrix, NtmError> {
        let logits = theta.matmul(&self.beta.value)?;
        let logits = match &self.decoder_bn {
            Some(bn) => bn.forward_eval(&logits)?,
            None => logits,
        };
        Ok(softmax_rows(&logits))
    }

    /// Deterministic topic distributions (`softmax(μ)`), one row per input row.
    pub fn infer_theta(&self, features: &Matrix) -> Result<Matrix, NtmError> {
        Ok(self.encode(features, &mut RngStream::new(0), false)?.theta)
    }

    /// Classification-head logits on evaluation-mode `θ`.
    pub fn head_logits(&self, features: &Matrix) -> Result<Matrix, NtmError> {
        let head = self.head.as_ref().ok_or(NtmError::NoHead)?;
        let theta = self.infer_theta(features)?;
        Ok(head.forward(&theta, Activation::Identity)?.output)
    }

    pub fn classify_topic(&self, features: &Matrix) -> Result<Vec<usize>, NtmError> {
        let logits = self.head_logits(features)?;
        Ok(logits.row_iter().map(crate::argmax).collect())
    }

    /// Training-mode forward pass over a batch; caches activations for
    /// [`NtmModel::backward`] and returns batch-mean losses. The NLL term
    /// is included when the model has a head and labels are given.
    pub fn forward_train(
        &mut self,
        x: &Matrix,
        bows: &[BowVector],
        labels: Option<&[usize]>,
        rng: &mut RngStream,
    ) -> Result<LossParts, NtmError> {
        self.check_width(x)?;
        let n = x.rows();
        if bows.len() != n {
            return Err(NtmError::DatasetLength {
                features: n,
                bows: bows.len(),
            });
        }
        let v = self.config.vocab_size;
        let mut bow = Matrix::zeros(n, v);
        for (i, b) in bows.iter().enumerate() {
            for (w, c) in b.iter() {
                if w >= v {
                    return Err(NtmError::WidthMismatch { expected: v, found: w + 1 });
                }
                bow[(i, w)] = c as f64;
            }
        }
        let (hidden, h) = self.encoder_trunk(x)?;
        let (enc, drop_mask) = dropout(&h, self.config.dropout, true, rng);
        let mu_out = self.mu_head.forward(&enc, Activation::Identity)?;
        let lv_out = self.logvar_head.forward(&enc, Activation::Identity)?;
        let (mu, mu_cache) = match &mut self.mu_bn {
            Some(bn) => {
                let (y, c) = bn.forward_train(&mu_out.output)?;
                (y, Some(c))
            }
            None => (mu_out.output.clone(), None),
        };
        let (lv_raw, lv_cache) = match &mut self.logvar_bn {
            Some(bn) => {
                let (y, c) = bn.forward_train(&lv_out.output)?;
                (y, Some(c))
            }
            None => (lv_out.output.clone(), None),
        };
        let lv = lv_raw.map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
        let (z, eps) = sample_gaussian(&mu, &lv, rng)?;
        let theta = softmax_rows(&z);
        let logits = theta.matmul(&self.beta.value)?;
        let (dec, dec_cache) = match &mut self.decoder_bn {
            Some(bn) => {
                let (y, c) = bn.forward_train(&logits)?;
                (y, Some(c))
            }
            None => (logits, None),
        };
        let log_recon = log_softmax_rows(&dec);

        let head = match (&self.head, labels) {
            (Some(head), Some(labels)) => {
                if labels.len() != n {
                    return Err(NtmError::DatasetLength {
                        features: n,
                        bows: labels.len(),
                    });
                }
                Some((head.forward(&theta, Activation::Identity)?, labels.to_vec()))
            }
            _ => None,
        };

        let mut parts = LossParts::default();
        for i in 0..n {
            let rec: f64 = bows[i].iter().map(|(w, c)| -(c as f64) * log_recon[(i, w)]).sum();
            let kl = kl_gauss(mu.row(i), lv.row(i), &self.prior);
            let elbo = rec + kl;
            let total = match &head {
                Some((out, labels)) => {
                    let nll_i = nll(out.output.row(i), labels[i])?;
                    parts.nll += nll_i;
                    tcctm_loss(elbo, out.output.row(i), labels[i], self.config.lambda)?
                }
                None => elbo,
            };
            parts.reconstruction += rec;
            parts.kl += kl;
            parts.elbo += elbo;
            parts.total += total;
        }
        let inv = 1.0 / n as f64;
        parts.reconstruction *= inv;
        parts.kl *= inv;
        parts.elbo *= inv;
        parts.nll *= inv;
        parts.total *= inv;

        self.tape = Some(Tape {
            x: x.clone(),
            bow,
            hidden,
            drop_mask,
            enc,
            mu_out,
            lv_out,
            mu_cache,
            lv_cache,
            mu,
            lv_raw,
            lv,
            eps,
            theta,
            dec_cache,
            log_recon,
            head,
        });
        Ok(parts)
    }

    /// Accumulates gradients of the last [`NtmModel::forward_train`] loss
    /// into every parameter.
    pub fn backward(&mut self) -> Result<(), NtmError> {
        let tape = self.tape.take().ok_or(KernelError::CalledBeforeForward)?;
        let t = &tape;
        let n = t.x.rows();
        let inv = 1.0 / n as f64;
        let tau = self.config.tau;

        // Reconstruction: d/d dec of −Σ bow·log softmax(dec) = N·recon − bow.
        let mut d_dec = Matrix::zeros(n, self.config.vocab_size);
        for i in 0..n {
            let total: f64 = t.bow.row(i).iter().sum();
            let lr = t.log_recon.row(i);
            let b = t.bow.row(i);
            for (w, d) in d_dec.row_mut(i).iter_mut().enumerate() {
                *d = inv * (total * lr[w].exp() - b[w]);
            }
        }
        let d_logits = match (&mut self.decoder_bn, &t.dec_cache) {
            (Some(bn), Some(c)) => bn.backward(c, &d_dec)?,
            _ => d_dec,
        };
        self.beta.accumulate(&t.theta.t_matmul(&d_logits)?)?;
        let mut d_theta = d_logits.matmul_t(&self.beta.value)?;

        if let (Some(head), Some((out, labels))) = (&mut self.head, &t.head) {
            let mut d_out = softmax_rows(&out.output);
            for (i, &l) in labels.iter().enumerate() {
                d_out[(i, l)] -= 1.0;
            }
            d_out.scale(self.config.lambda * inv);
            let d = head.backward(&t.theta, out, &d_out, Activation::Identity)?;
            d_theta.add_assign(&d)?;
        }

        let d_z = softmax_backward(&t.theta, &d_theta);
        let mut d_mu = d_z.clone();
        let mut d_lv = Matrix::zeros(n, tau);
        for i in 0..n {
            for k in 0..tau {
                let var0 = self.prior.var0[k];
                let lv = t.lv[(i, k)];
                d_mu[(i, k)] += inv * (t.mu[(i, k)] - self.prior.mu0[k]) / var0;
                let mut g = d_z[(i, k)] * t.eps[(i, k)] * 0.5 * (0.5 * lv).exp()
                    + inv * 0.5 * (lv.exp() / var0 - 1.0);
                let raw = t.lv_raw[(i, k)];
                if !(LOG_VAR_MIN..=LOG_VAR_MAX).contains(&raw) {
                    g = 0.0;
                }
                d_lv[(i, k)] = g;
            }
        }
        let d_mu_pre = match (&mut self.mu_bn, &t.mu_cache) {
            (Some(bn), Some(c)) => bn.backward(c, &d_mu)?,
            _ => d_mu,
        };
        let d_lv_pre = match (&mut self.logvar_bn, &t.lv_cache) {
            (Some(bn), Some(c)) => bn.backward(c, &d_lv)?,
            _ => d_lv,
        };
        let mut d_enc = self
            .mu_head
            .backward(&t.enc, &t.mu_out, &d_mu_pre, Activation::Identity)?;
        d_enc.add_assign(&self.logvar_head.backward(&t.enc, &t.lv_out, &d_lv_pre, Activation::Identity)?)?;
        let mut d_h = match &t.drop_mask {
            Some(mask) => d_enc.zip_map(mask, |g, m| g * m)?,
            None => d_enc,
        };
        for i in (0..self.encoder.len()).rev() {
            let input = if i == 0 { &t.x } else { &t.hidden[i - 1].output };
            d_h = self.encoder[i].backward(input, &t.hidden[i], &d_h, Activation::Softplus)?;
        }
        Ok(())
    }

    /// Per topic, the `k` vocabulary tokens with the largest `β` weights.
    pub fn top_words(&self, vocab: &Vocab, k: usize) -> Vec<Vec<String>> {
        crate::lda::ids_to_tokens(&self.top_word_ids(vocab, k), vocab)
    }

    pub fn top_word_ids(&self, vocab: &Vocab, k: usize) -> Vec<Vec<usize>> {
        (0..self.tau())
            .map(|t| crate::lda::rank_words(|w| self.beta.value[(t, w)], vocab, k))
            .collect()
    }

    fn batch_norms(&self) -> Vec<&BatchNorm> {
        [&self.mu_bn, &self.logvar_bn, &self.decoder_bn]
            .into_iter()
            .flatten()
            .collect()
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        [&mut self.mu_bn, &mut self.logvar_bn, &mut self.decoder_bn]
            .into_iter()
            .flatten()
            .collect()
    }

    /// Rounds every stored value to the nearest `f32`.
    fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            for v in p.value.as_mut_slice() {
                *v = *v as f32 as f64;
            }
        }
        for bn in self.batch_norms_mut() {
            for v in bn.running_mean.iter_mut().chain(bn.running_var.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Versioned binary checkpoint: config (JSON), prior, every parameter
    /// value and the running batch-norm statistics.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        out.write_u32::<LittleEndian>(cfg.len() as u32).unwrap();
        out.extend_from_slice(&cfg);
        let put = |out: &mut Vec<u8>, vals: &[f64]| {
            out.write_u32::<LittleEndian>(vals.len() as u32).unwrap();
            for &v in vals {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
        };
        put(&mut out, &self.prior.mu0);
        put(&mut out, &self.prior.var0);
        let mut me = self.clone();
        for p in me.params_mut() {
            put(&mut out, p.value.as_slice());
        }
        for bn in self.batch_norms() {
            put(&mut out, &bn.running_mean);
            put(&mut out, &bn.running_var);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NtmError> {
        let bad = |m: &str| NtmError::BadCheckpoint(m.to_owned());
        if !bytes.starts_with(CHECKPOINT_MAGIC) {
            return Err(bad("bad magic"));
        }
        let mut r = Cursor::new(&bytes[CHECKPOINT_MAGIC.len()..]);
        let trunc = |_| bad("truncated");
        let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != CHECKPOINT_VERSION {
            return Err(NtmError::BadCheckpoint(format!("unsupported version {version}")));
        }
        let cfg_len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let start = r.position() as usize;
        let body = &bytes[CHECKPOINT_MAGIC.len()..];
        let cfg_bytes = body.get(start..start + cfg_len).ok_or_else(|| bad("truncated"))?;
        let config: NtmConfig =
            serde_json::from_slice(cfg_bytes).map_err(|e| NtmError::BadCheckpoint(e.to_string()))?;
        r.set_position((start + cfg_len) as u64);
        let mut take = |expected: usize| -> Result<Vec<f64>, NtmError> {
            let n = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            if n != expected {
                return Err(NtmError::BadCheckpoint(format!("expected {expected} values, found {n}")));
            }
            let mut v = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut v).map_err(trunc)?;
            Ok(v)
        };
        let mut model = Self::new(config)?;
        let tau = model.tau();
        model.prior = PriorParams {
            mu0: take(tau)?,
            var0: take(tau)?,
        };
        for p in model.params_mut() {
            let vals = take(p.value.as_slice().len())?;
            p.value.as_mut_slice().copy_from_slice(&vals);
        }
        for bn in model.batch_norms_mut() {
            bn.running_mean = take(bn.features)?;
            bn.running_var = take(bn.features)?;
        }
        if r.position() as usize != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), NtmError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| NtmError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, NtmError> {
        let bytes = std::fs::read(path).map_err(|source| NtmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Encoder inputs, reconstruction targets and optional labels, row-aligned.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub features: Matrix,
    pub bows: Vec<BowVector>,
    pub labels: Option<Vec<usize>>,
}

impl TrainingData {
    /// Bag-of-words input (ProdLDA): the encoder sees the raw counts.
    pub fn from_bows(bows: Vec<BowVector>, vocab_size: usize) -> Self {
        let mut features = Matrix::zeros(bows.len(), vocab_size);
        for (i, b) in bows.iter().enumerate() {
            for (w, c) in b.iter() {
                features[(i, w)] = c as f64;
            }
        }
        Self {
            features,
            bows,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.bows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bows.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub elbo_part: f64,
    pub nll_part: f64,
}

/// Mini-batch index lists; a trailing singleton batch is folded into the
/// previous one so training-mode batch normalisation always sees ≥ 2 rows.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().map_or(false, |b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Trains a model with Adam for `config.epochs` epochs over shuffled
/// mini-batches. Deterministic given `config.seed`.
pub fn train(data: &TrainingData, config: &NtmConfig) -> Result<(NtmModel, Vec<EpochLog>), NtmError> {
    if data.is_empty() {
        return Err(NtmError::EmptyDataset);
    }
    if data.features.rows() != data.len() {
        return Err(NtmError::DatasetLength {
            features: data.features.rows(),
            bows: data.len(),
        });
    }
    let labels = match config.label_topics {
        Some(classes) => {
            let labels = data.labels.as_ref().ok_or(NtmError::MissingLabels)?;
            if labels.len() != data.len() {
                return Err(NtmError::DatasetLength {
                    features: data.len(),
                    bows: labels.len(),
                });
            }
            if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
                return Err(NtmError::LabelOutOfRange { label, classes });
            }
            Some(labels.as_slice())
        }
        None => None,
    };
    let mut model = NtmModel::new(config.clone())?;
    model.check_width(&data.features)?;
    let base = RngStream::new(config.seed);
    let mut shuffle_rng = base.fork(1);
    let mut noise_rng = base.fork(2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        let (mut total, mut elbo, mut nll_sum) = (0.0, 0.0, 0.0);
        for batch in batches(&order, config.batch_size) {
            let x = data.features.select_rows(&batch);
            let bows: Vec<BowVector> = batch.iter().map(|&i| data.bows[i].clone()).collect();
            let batch_labels: Option<Vec<usize>> = labels.map(|l| batch.iter().map(|&i| l[i]).collect());
            let parts = model.forward_train(&x, &bows, batch_labels.as_deref(), &mut noise_rng)?;
            model.backward()?;
            adam_step(model.params_mut(), &config.adam);
            model.zero_grad();
            if config.precision == Precision::F32 {
                model.round_to_f32();
            }
            let m = batch.len() as f64;
            total += parts.total * m;
            elbo += parts.elbo * m;
            nll_sum += parts.nll * m;
        }
        let n = data.len() as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            mean_loss: total / n,
            elbo_part: elbo / n,
            nll_part: nll_sum / n,
        };
        log::debug!("epoch {} loss {:.4}", entry.epoch, entry.mean_loss);
        log.push(entry);
    }
    Ok((model, log))
}
