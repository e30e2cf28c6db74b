//! Topic quality and cross-lingual transfer metrics.
//!
//! Everything except the thin model wrappers operates on plain topic
//! distributions (rows of a [`Matrix`]), so the metrics can be checked
//! against hand-built θ fixtures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::argmax;
use crate::corpus::{BowVector, Vocab};
use crate::embedstore::{BoundAligned, EmbedError};
use crate::nnkernel::{Matrix, RngStream};
use crate::ntm::{NtmError, NtmModel};

/// Joint-probability smoothing for NPMI.
pub const DEFAULT_NPMI_EPS: f64 = 1e-12;
/// Floor applied to θ entries before taking logs in KL.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty reference corpus")]
    EmptyReference,
    #[error("topic {0} has fewer than 2 top words")]
    ShortTopList(usize),
    #[error("no topic has a scorable word pair")]
    NoValidPairs,
    #[error("theta sets differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("random baseline needs at least 2 aligned documents")]
    TooFewDocuments,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Ntm(#[from] NtmError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(String),
}

/// Mean NPMI plus per-topic scores and everything that had to be skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpmiScore {
    pub mean: f64,
    /// `None` for topics without a scorable pair.
    pub per_topic: Vec<Option<f64>>,
    /// Top-list tokens missing from the vocabulary or with zero document
    /// frequency in the reference corpus.
    pub skipped_tokens: Vec<String>,
}

/// NPMI of one pair from document frequencies over `n` documents, clamped
/// to `[-1, 1]`. A pair present in every document scores 1.
pub fn npmi_pair(df_i: usize, df_j: usize, df_ij: usize, n: usize, eps: f64) -> f64 {
    let n = n as f64;
    let p_i = df_i as f64 / n;
    let p_j = df_j as f64 / n;
    let p_ij = df_ij as f64 / n;
    if p_ij >= 1.0 {
        return 1.0;
    }
    let joint = p_ij + eps;
    let v = (joint / (p_i * p_j)).ln() / -joint.ln();
    v.clamp(-1.0, 1.0)
}

fn doc_sets(reference: &[BowVector], words: impl Iterator<Item = usize>) -> BTreeMap<usize, Vec<u32>> {
    let mut sets: BTreeMap<usize, Vec<u32>> = words.map(|w| (w, Vec::new())).collect();
    for (d, bow) in reference.iter().enumerate() {
        for (w, _) in bow.iter() {
            if let Some(s) = sets.get_mut(&w) {
                s.push(d as u32);
            }
        }
    }
    sets
}

fn intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// NPMI coherence of word-id top lists with binary document co-occurrence
/// over `reference`. Words with zero document frequency are reported and
/// their pairs skipped.
pub fn npmi_from_ids(top_ids: &[Vec<usize>], reference: &[BowVector], eps: f64) -> Result<NpmiScore, EvalError> {
    score_npmi(top_ids, reference, eps, Vec::new(), |w| w.to_string())
}

fn score_npmi(
    top_ids: &[Vec<usize>],
    reference: &[BowVector],
    eps: f64,
    mut skipped: Vec<String>,
    name: impl Fn(usize) -> String,
) -> Result<NpmiScore, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let sets = doc_sets(reference, top_ids.iter().flatten().copied());
    for (&w, s) in &sets {
        if s.is_empty() {
            skipped.push(name(w));
        }
    }
    let n = reference.len();
    let per_topic: Vec<Option<f64>> = top_ids
        .iter()
        .map(|list| {
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for a in 0..list.len() {
                for b in a + 1..list.len() {
                    let (si, sj) = (&sets[&list[a]], &sets[&list[b]]);
                    if si.is_empty() || sj.is_empty() {
                        continue;
                    }
                    sum += npmi_pair(si.len(), sj.len(), intersection_len(si, sj), n, eps);
                    pairs += 1;
                }
            }
            (pairs > 0).then(|| sum / pairs as f64)
        })
        .collect();
    let scored: Vec<f64> = per_topic.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(EvalError::NoValidPairs);
    }
    skipped.sort();
    skipped.dedup();
    Ok(NpmiScore {
        mean: scored.iter().sum::<f64>() / scored.len() as f64,
        per_topic,
        skipped_tokens: skipped,
    })
}

/// Mean NPMI over topics; each topic's score is the mean over all pairs of
/// its top tokens.
pub fn npmi_coherence(
    top_lists: &[Vec<String>],
    vocab: &Vocab,
    reference: &[BowVector],
    eps: f64,
) -> Result<NpmiScore, EvalError> {
    let mut absent = Vec::new();
    let mut ids = Vec::with_capacity(top_lists.len());
    for (k, list) in top_lists.iter().enumerate() {
        if list.len() < 2 {
            return Err(EvalError::ShortTopList(k));
        }
        let mut row = Vec::with_capacity(list.len());
        for tok in list {
            match vocab.position(tok) {
                Some(p) => row.push(p),
                None => {
                    log::warn!("top word {tok:?} is not in the vocabulary; its pairs are skipped");
                    absent.push(tok.clone());
                }
            }
        }
        ids.push(row);
    }
    score_npmi(&ids, reference, eps, absent, |w| vocab.token(w).to_owned())
}

fn check_pair(pivot: &Matrix, target: &Matrix) -> Result<(), EvalError> {
    if pivot.shape() != target.shape() {
        return Err(EvalError::ShapeMismatch(pivot.shape(), target.shape()));
    }
    Ok(())
}

/// Percentage of rows whose argmax topics agree.
pub fn match_rate(pivot: &Matrix, target: &Matrix) -> Result<f64, EvalError> {
    check_pair(pivot, target)?;
    if pivot.rows() == 0 {
        return Ok(0.0);
    }
    let hits = pivot
        .row_iter()
        .zip(target.row_iter())
        .filter(|(p, t)| argmax(p) == argmax(t))
        .count();
    Ok(100.0 * hits as f64 / pivot.rows() as f64)
}

/// `Σ_k p_k (log p_k − log q_k)` with both sides floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = a.max(KL_FLOOR);
            let b = b.max(KL_FLOOR);
            a * (a.ln() - b.ln())
        })
        .sum()
}

pub fn mean_kl(pivot: &Matrix, target: &Matrix) -> Result<f64, EvalError> {
    check_pair(pivot, target)?;
    if pivot.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = pivot
        .row_iter()
        .zip(target.row_iter())
        .map(|(p, q)| kl_divergence(p, q))
        .sum();
    Ok(total / pivot.rows() as f64)
}

/// Match and KL after uniformly permuting the pivot rows.
pub fn shuffled_baseline(pivot: &Matrix, target: &Matrix, rng: &mut RngStream) -> Result<(f64, f64), EvalError> {
    check_pair(pivot, target)?;
    if pivot.rows() < 2 {
        return Err(EvalError::TooFewDocuments);
    }
    let mut order: Vec<usize> = (0..pivot.rows()).collect();
    order.shuffle(rng);
    let shuffled = pivot.select_rows(&order);
    Ok((match_rate(&shuffled, target)?, mean_kl(&shuffled, target)?))
}

/// Expected shuffled Match in percent: `100 · Σ_k p_k q_k` over the argmax
/// marginals of both sides.
pub fn expected_random_match(pivot: &Matrix, target: &Matrix) -> f64 {
    let tau = pivot.cols();
    let n = pivot.rows() as f64;
    let p = topic_histogram(pivot);
    let q = topic_histogram(target);
    100.0 * (0..tau).map(|k| p[k] as f64 / n * q[k] as f64 / n).sum::<f64>()
}

/// Row-normalised pivot→target argmax confusion and per-topic precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// `matrix[e][t] = P(target argmax = t | pivot argmax = e)`.
    pub matrix: Vec<Vec<f64>>,
    /// Pivot topics with no documents; their rows are all zero.
    pub empty_rows: Vec<usize>,
    /// `precision[k]` = docs with both argmaxes `k` / docs with target argmax `k`.
    pub precision: Vec<f64>,
}

pub fn confusion_and_precision(pivot: &Matrix, target: &Matrix) -> Result<Confusion, EvalError> {
    check_pair(pivot, target)?;
    let tau = pivot.cols();
    let mut counts = vec![vec![0usize; tau]; tau];
    for (p, t) in pivot.row_iter().zip(target.row_iter()) {
        counts[argmax(p)][argmax(t)] += 1;
    }
    let mut empty_rows = Vec::new();
    let matrix = counts
        .iter()
        .enumerate()
        .map(|(e, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                empty_rows.push(e);
                vec![0.0; tau]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();
    let precision = (0..tau)
        .map(|k| {
            let col: usize = counts.iter().map(|r| r[k]).sum();
            if col == 0 {
                0.0
            } else {
                counts[k][k] as f64 / col as f64
            }
        })
        .collect();
    Ok(Confusion {
        matrix,
        empty_rows,
        precision,
    })
}

/// Number of rows whose argmax is each topic.
pub fn topic_histogram(theta: &Matrix) -> Vec<usize> {
    let mut h = vec![0; theta.cols()];
    for row in theta.row_iter() {
        h[argmax(row)] += 1;
    }
    h
}

/// θ for every bound language, inferred in parallel.
pub fn infer_all(model: &NtmModel, bound: &BoundAligned) -> Result<BTreeMap<String, Matrix>, EvalError> {
    bound
        .sets
        .par_iter()
        .map(|(lang, set)| Ok((lang.clone(), model.infer_theta(&set.features)?)))
        .collect()
}

fn pivot_and_targets(
    model: &NtmModel,
    bound: &BoundAligned,
) -> Result<(Matrix, Vec<(String, Matrix)>), EvalError> {
    bound.pivot_set()?;
    let mut thetas = infer_all(model, bound)?;
    let pivot = thetas.remove(&bound.pivot).expect("pivot bound");
    Ok((pivot, thetas.into_iter().collect()))
}

pub fn match_metric(model: &NtmModel, bound: &BoundAligned) -> Result<BTreeMap<String, f64>, EvalError> {
    let (pivot, targets) = pivot_and_targets(model, bound)?;
    targets
        .iter()
        .map(|(lang, t)| Ok((lang.clone(), match_rate(&pivot, t)?)))
        .collect()
}

pub fn kl_metric(model: &NtmModel, bound: &BoundAligned) -> Result<BTreeMap<String, f64>, EvalError> {
    let (pivot, targets) = pivot_and_targets(model, bound)?;
    targets
        .iter()
        .map(|(lang, t)| Ok((lang.clone(), mean_kl(&pivot, t)?)))
        .collect()
}

/// Per-language `(match %, mean KL)` against a shuffled pivot side; each
/// language uses its own forked stream of `seed`.
pub fn random_baseline(
    model: &NtmModel,
    bound: &BoundAligned,
    seed: u64,
) -> Result<BTreeMap<String, (f64, f64)>, EvalError> {
    let (pivot, targets) = pivot_and_targets(model, bound)?;
    let base = RngStream::new(seed);
    targets
        .iter()
        .enumerate()
        .map(|(i, (lang, t))| {
            let mut rng = base.fork(i as u64);
            Ok((lang.clone(), shuffled_baseline(&pivot, t, &mut rng)?))
        })
        .collect()
}

pub fn confusion_metric(model: &NtmModel, bound: &BoundAligned) -> Result<BTreeMap<String, Confusion>, EvalError> {
    let (pivot, targets) = pivot_and_targets(model, bound)?;
    targets
        .iter()
        .map(|(lang, t)| Ok((lang.clone(), confusion_and_precision(&pivot, t)?)))
        .collect()
}

pub fn topic_counts(model: &NtmModel, features: &Matrix) -> Result<Vec<usize>, EvalError> {
    Ok(topic_histogram(&model.infer_theta(features)?))
}

/// Everything measured for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub tau: usize,
    pub npmi: f64,
    pub npmi_per_topic: Vec<Option<f64>>,
    pub top_words: Vec<Vec<String>>,
    pub match_pct: BTreeMap<String, f64>,
    pub mean_kl: BTreeMap<String, f64>,
    pub random_match_pct: BTreeMap<String, f64>,
    pub random_mean_kl: BTreeMap<String, f64>,
    pub confusion: BTreeMap<String, Confusion>,
    pub topic_counts_pivot: Vec<usize>,
}

/// Full report. `reference` is the pivot bag-of-words corpus for NPMI;
/// `pivot_features` are the encoder inputs of that corpus. Cross-lingual
/// metrics are computed only when `bound` is given.
pub fn evaluate(
    model: &NtmModel,
    vocab: &Vocab,
    reference: &[BowVector],
    pivot_features: &Matrix,
    bound: Option<&BoundAligned>,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let top_words = model.top_words(vocab, 10);
    let npmi = npmi_coherence(&top_words, vocab, reference, DEFAULT_NPMI_EPS)?;
    let mut report = EvalReport {
        model: model.kind().to_string(),
        tau: model.tau(),
        npmi: npmi.mean,
        npmi_per_topic: npmi.per_topic,
        top_words,
        match_pct: BTreeMap::new(),
        mean_kl: BTreeMap::new(),
        random_match_pct: BTreeMap::new(),
        random_mean_kl: BTreeMap::new(),
        confusion: BTreeMap::new(),
        topic_counts_pivot: topic_counts(model, pivot_features)?,
    };
    if let Some(bound) = bound {
        let (pivot, targets) = pivot_and_targets(model, bound)?;
        let base = RngStream::new(seed);
        for (i, (lang, t)) in targets.iter().enumerate() {
            report.match_pct.insert(lang.clone(), match_rate(&pivot, t)?);
            report.mean_kl.insert(lang.clone(), mean_kl(&pivot, t)?);
            if pivot.rows() >= 2 {
                let (m, k) = shuffled_baseline(&pivot, t, &mut base.fork(i as u64))?;
                report.random_match_pct.insert(lang.clone(), m);
                report.random_mean_kl.insert(lang.clone(), k);
            }
            report.confusion.insert(lang.clone(), confusion_and_precision(&pivot, t)?);
        }
    }
    Ok(report)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_confusion_csv(path: &Path, c: &Confusion) -> Result<(), EvalError> {
    let tau = c.matrix.len();
    let mut out = String::from("pivot_topic");
    for t in 0..tau {
        out.push_str(&format!(",{t}"));
    }
    out.push('\n');
    for (e, row) in c.matrix.iter().enumerate() {
        out.push_str(&e.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Heatmap of a row-normalised confusion matrix: white at 0, dark blue at 1,
/// `cell` pixels per entry.
pub fn write_confusion_png(path: &Path, c: &Confusion, cell: u32) -> Result<(), EvalError> {
    let tau = c.matrix.len() as u32;
    let side = (tau * cell).max(1);
    let img = image::RgbImage::from_fn(side, side, |x, y| {
        let v = c.matrix[(y / cell) as usize][(x / cell) as usize].clamp(0.0, 1.0);
        let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
        image::Rgb([lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0)])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| EvalError::Image(e.to_string()))
}

/// Writes `report.json` and, per language, `confusion.<lang>.csv` and
/// `confusion.<lang>.png` under `dir`. Returns the written paths.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&json, text + "\n").map_err(io_err(&json))?;
    let mut written = vec![json];
    for (lang, c) in &report.confusion {
        let csv = dir.join(format!("confusion.{lang}.csv"));
        write_confusion_csv(&csv, c)?;
        let png = dir.join(format!("confusion.{lang}.png"));
        write_confusion_png(&png, c, 4)?;
        written.push(csv);
        written.push(png);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn npmi_perfect_pair_tends_to_one() {
        // Tokens 0 and 1 appear together in half the documents, never apart.
        let mut reference = Vec::new();
        for d in 0..10 {
            reference.push(if d % 2 == 0 {
                BowVector::from_pairs([(0, 1), (1, 2)])
            } else {
                BowVector::from_pairs([(2, 1)])
            });
        }
        let s = npmi_from_ids(&[vec![0, 1]], &reference, DEFAULT_NPMI_EPS).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-6, "{}", s.mean);
        let looser = npmi_from_ids(&[vec![0, 1]], &reference, 1e-3).unwrap();
        assert!(looser.mean < s.mean + 1e-12);
    }

    #[test]
    fn npmi_never_cooccurring_is_low() {
        let reference = vec![
            BowVector::from_pairs([(0, 1)]),
            BowVector::from_pairs([(1, 1)]),
            BowVector::from_pairs([(2, 1)]),
        ];
        let s = npmi_from_ids(&[vec![0, 1]], &reference, DEFAULT_NPMI_EPS).unwrap();
        assert!(s.mean < -0.9 && s.mean >= -1.0);
    }

    #[test]
    fn npmi_skips_absent_tokens() {
        let vocab = Vocab::from_token_list(["a", "b", "c"]).unwrap();
        let reference = vec![BowVector::from_pairs([(0, 1), (1, 1)]), BowVector::from_pairs([(2, 1)])];
        let tops = vec![vec!["a".to_string(), "b".to_string(), "zzz".to_string()]];
        let s = npmi_coherence(&tops, &vocab, &reference, DEFAULT_NPMI_EPS).unwrap();
        assert_eq!(s.skipped_tokens, vec!["zzz"]);
        assert!(s.mean > 0.9);
        assert!(matches!(
            npmi_coherence(&[vec!["a".into()]], &vocab, &reference, 1e-12),
            Err(EvalError::ShortTopList(0))
        ));
        assert!(matches!(
            npmi_coherence(&tops, &vocab, &[], 1e-12),
            Err(EvalError::EmptyReference)
        ));
    }

    #[test]
    fn identical_thetas() {
        let t = rows(&[&[0.7, 0.2, 0.1], &[0.1, 0.1, 0.8]]);
        assert_eq!(match_rate(&t, &t).unwrap(), 100.0);
        assert_eq!(mean_kl(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn kl_nonnegative_with_floor() {
        assert!(kl_divergence(&[1.0, 0.0], &[0.0, 1.0]) > 0.0);
        assert!(kl_divergence(&[0.5, 0.5], &[0.9, 0.1]) > 0.0);
    }

    #[test]
    fn confusion_identity_and_stripe() {
        let p = rows(&[&[0.9, 0.05, 0.05], &[0.05, 0.9, 0.05], &[0.05, 0.05, 0.9]]);
        let c = confusion_and_precision(&p, &p).unwrap();
        for (i, row) in c.matrix.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(c.precision, vec![1.0; 3]);

        let stripe = rows(&[&[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0]]);
        let c = confusion_and_precision(&p, &stripe).unwrap();
        for row in &c.matrix {
            assert_eq!(row[2], 1.0);
        }
        assert_eq!(c.precision, vec![0.0, 0.0, 1.0 / 3.0]);
    }

    #[test]
    fn empty_confusion_row_flagged() {
        let p = rows(&[&[0.9, 0.1], &[0.8, 0.2]]);
        let c = confusion_and_precision(&p, &p).unwrap();
        assert_eq!(c.empty_rows, vec![1]);
        assert_eq!(c.matrix[1], vec![0.0, 0.0]);
    }

    #[test]
    fn baseline_reproducible() {
        let p = rows(&[&[0.9, 0.1], &[0.2, 0.8], &[0.6, 0.4], &[0.3, 0.7]]);
        let a = shuffled_baseline(&p, &p, &mut RngStream::new(5)).unwrap();
        let b = shuffled_baseline(&p, &p, &mut RngStream::new(5)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            shuffled_baseline(&rows(&[&[1.0, 0.0]]), &rows(&[&[1.0, 0.0]]), &mut RngStream::new(0)),
            Err(EvalError::TooFewDocuments)
        ));
    }

    #[test]
    fn histogram_one_doc() {
        assert_eq!(topic_histogram(&rows(&[&[0.1, 0.6, 0.3]])), vec![0, 1, 0]);
    }
}
