//! Reconstruction metrics on token-id sequences.
//!
//! All sequence metrics are single-reference and computed on ids, never on
//! detokenized text. Corpus scores are macro averages of per-sentence scores.
//!
//! * token F1 / ROUGE-1: F1 of the clipped unigram multiset overlap
//! * ROUGE-L: F1 from the longest common subsequence
//! * BLEU-n: geometric mean of clipped n-gram precisions for orders `1..=n`
//!   times the brevity penalty `exp(min(0, 1 - |ref|/|pred|))`. A zero
//!   precision, or an order longer than the prediction, contributes
//!   [`BLEU_EPSILON`] instead of 0.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BLEU_EPSILON: f64 = 1e-9;

fn check_ref<T>(reference: &[T]) -> Result<()> {
    if reference.is_empty() {
        return Err(Error::Empty("reference sequence is empty"));
    }
    Ok(())
}

fn counts<T: Hash + Eq>(items: impl Iterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

/// `sum_t min(count_pred(t), count_ref(t))` over n-grams of order `n`.
fn clipped_overlap(pred: &[u32], reference: &[u32], n: usize) -> usize {
    if pred.len() < n || reference.len() < n {
        return 0;
    }
    let r = counts(reference.windows(n));
    counts(pred.windows(n)).iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum()
}

fn f1(overlap: usize, pred_len: usize, ref_len: usize) -> f64 {
    if overlap == 0 || pred_len == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred_len as f64;
    let r = overlap as f64 / ref_len as f64;
    2.0 * p * r / (p + r)
}

pub fn token_f1(pred: &[u32], reference: &[u32]) -> Result<f64> {
    check_ref(reference)?;
    Ok(f1(clipped_overlap(pred, reference, 1), pred.len(), reference.len()))
}

/// Same quantity as [`token_f1`]; reported separately for table parity.
pub fn rouge_1(pred: &[u32], reference: &[u32]) -> Result<f64> {
    token_f1(pred, reference)
}

/// Length of the longest common subsequence, `O(|a| |b|)` time and
/// `O(min)` memory.
pub fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut row = vec![0usize; short.len() + 1];
    for &x in long {
        let mut diag = 0;
        for (j, &y) in short.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[short.len()]
}

pub fn rouge_l(pred: &[u32], reference: &[u32]) -> Result<f64> {
    check_ref(reference)?;
    Ok(f1(lcs_len(pred, reference), pred.len(), reference.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BleuOrder {
    One = 1,
    Two = 2,
    Four = 4,
}

impl BleuOrder {
    pub fn from_usize(n: usize) -> Result<Self> {
        match n {
            1 => Ok(BleuOrder::One),
            2 => Ok(BleuOrder::Two),
            4 => Ok(BleuOrder::Four),
            _ => Err(Error::InvalidArgument(format!("BLEU order must be 1, 2 or 4, got {n}"))),
        }
    }
}

/// Clipped precision for order `n`, with the epsilon floor applied.
pub fn bleu_precision(pred: &[u32], reference: &[u32], n: usize) -> f64 {
    if pred.len() < n {
        return BLEU_EPSILON;
    }
    let matches = clipped_overlap(pred, reference, n);
    if matches == 0 {
        BLEU_EPSILON
    } else {
        matches as f64 / (pred.len() - n + 1) as f64
    }
}

pub fn brevity_penalty(pred_len: usize, ref_len: usize) -> f64 {
    if pred_len == 0 {
        return 0.0;
    }
    (1.0 - ref_len as f64 / pred_len as f64).min(0.0).exp()
}

pub fn bleu_n(pred: &[u32], reference: &[u32], order: BleuOrder) -> Result<f64> {
    check_ref(reference)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let n = order as usize;
    let log_mean = (1..=n).map(|k| bleu_precision(pred, reference, k).ln()).sum::<f64>() / n as f64;
    Ok(brevity_penalty(pred.len(), reference.len()) * log_mean.exp())
}

/// Cosine similarity of two equal-length non-zero vectors.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceScores {
    pub cosine: Option<f64>,
    pub token_f1: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_4: f64,
    pub rouge_1: f64,
    pub rouge_l: f64,
}

impl SentenceScores {
    pub fn compute(pred: &[u32], reference: &[u32], cosine: Option<f64>) -> Result<Self> {
        Ok(SentenceScores {
            cosine,
            token_f1: token_f1(pred, reference)?,
            bleu_1: bleu_n(pred, reference, BleuOrder::One)?,
            bleu_2: bleu_n(pred, reference, BleuOrder::Two)?,
            bleu_4: bleu_n(pred, reference, BleuOrder::Four)?,
            rouge_1: rouge_1(pred, reference)?,
            rouge_l: rouge_l(pred, reference)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Unweighted mean of per-sentence scores.
    #[default]
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cosine: Option<f64>,
    pub token_f1: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_4: f64,
    pub rouge_1: f64,
    pub rouge_l: f64,
    pub aggregation: Aggregation,
    /// Definition choices baked into the numbers.
    pub variant_notes: Vec<String>,
    pub per_sentence: Vec<SentenceScores>,
}

pub const METRIC_NOTES: [&str; 3] = [
    "rouge_1 is the unigram F1 (not recall-only)",
    "BLEU: single reference, clipped precisions, add-epsilon 1e-9 for empty orders",
    "scores computed on token ids",
];

/// Macro-averaged metrics over `(prediction, reference)` pairs, with cosine
/// included only when every pair has an embedding pair.
pub fn score_corpus(
    predictions: &[Vec<u32>],
    references: &[Vec<u32>],
    embedding_pairs: Option<&[(Vec<f64>, Vec<f64>)]>,
) -> Result<MetricReport> {
    if predictions.len() != references.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions but {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("no sentence pairs to score"));
    }
    if let Some(e) = embedding_pairs {
        if e.len() != predictions.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} embedding pairs for {} sentences",
                e.len(),
                predictions.len()
            )));
        }
    }
    let score_one = |i: usize| -> Result<SentenceScores> {
        let cos = embedding_pairs.map(|e| cosine(&e[i].0, &e[i].1)).transpose()?;
        SentenceScores::compute(&predictions[i], &references[i], cos)
    };
    #[cfg(feature = "parallel")]
    let per_sentence: Vec<SentenceScores> = {
        use rayon::prelude::*;
        (0..predictions.len()).into_par_iter().map(score_one).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let per_sentence: Vec<SentenceScores> = (0..predictions.len()).map(score_one).collect::<Result<_>>()?;

    let n = per_sentence.len() as f64;
    let mean = |f: fn(&SentenceScores) -> f64| per_sentence.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        cosine: embedding_pairs.map(|_| per_sentence.iter().filter_map(|s| s.cosine).sum::<f64>() / n),
        token_f1: mean(|s| s.token_f1),
        bleu_1: mean(|s| s.bleu_1),
        bleu_2: mean(|s| s.bleu_2),
        bleu_4: mean(|s| s.bleu_4),
        rouge_1: mean(|s| s.rouge_1),
        rouge_l: mean(|s| s.rouge_l),
        aggregation: Aggregation::Macro,
        variant_notes: METRIC_NOTES.iter().map(|s| s.to_string()).collect(),
        per_sentence,
    })
}

/// Column order of the CSV form.
pub const CSV_COLUMNS: [&str; 8] = ["row", "cosine", "token_f1", "bleu_1", "bleu_2", "bleu_4", "rouge_1", "rouge_l"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl MetricReport {
    /// One row per sentence (`row` = index) and a final `mean` row. Floats
    /// use Rust's shortest round-trip formatting.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(CSV_COLUMNS)?;
        let row = |label: String, c: Option<f64>, v: [f64; 6]| {
            let mut r = vec![label, fmt_opt(c)];
            r.extend(v.iter().map(|x| format!("{x:?}")));
            r
        };
        for (i, s) in self.per_sentence.iter().enumerate() {
            w.write_record(row(i.to_string(), s.cosine, [s.token_f1, s.bleu_1, s.bleu_2, s.bleu_4, s.rouge_1, s.rouge_l]))?;
        }
        w.write_record(row(
            "mean".into(),
            self.cosine,
            [self.token_f1, self.bleu_1, self.bleu_2, self.bleu_4, self.rouge_1, self.rouge_l],
        ))?;
        w.flush()?;
        Ok(())
    }
}
