//! Browser bindings for three interactive views: the token bound as a
//! function of accuracy, an editable joint table with its exact quantities,
//! and live probe training on a synthetic corpus.
//!
//! Each view has a plain Rust entry point (tested natively) and a thin
//! `wasm_bindgen` wrapper that returns JSON or a float array.

use serde::Serialize;
use tokenmi::bounds::{fano_token_bound, BoundConfig, BoundVariant, LogBase};
use tokenmi::oracle::{exact_conditional_entropy, exact_fano_bound, exact_mi, map_decoder_accuracy, DiscreteJoint};
use tokenmi::probe::{train_probe, TrainConfig};
use tokenmi::report::{evaluate, EvalOptions};
use tokenmi::{synth, Result};
use wasm_bindgen::prelude::*;

fn bound_config(bits: bool, exact: bool) -> BoundConfig {
    BoundConfig {
        log_base: if bits { LogBase::Bit } else { LogBase::Nat },
        variant: BoundVariant::UniformPrior,
        include_vocab_gap_term: exact,
    }
}

/// Token bound at `points` evenly spaced accuracies in `[0, 1]`.
pub fn bound_curve(vocab_size: u64, bits: bool, exact: bool, points: usize) -> Result<Vec<f64>> {
    let cfg = bound_config(bits, exact);
    let steps = points.max(2) - 1;
    (0..=steps).map(|i| fano_token_bound(i as f64 / steps as f64, vocab_size, &cfg, None)).collect()
}

#[derive(Debug, Serialize)]
pub struct JointSummary {
    pub mi: f64,
    pub token_entropy: f64,
    pub conditional_entropy: f64,
    pub map_accuracy: f64,
    pub decoder: Vec<u32>,
    pub uniform_tokens: bool,
    /// Exact-form bound at the MAP accuracy, nats.
    pub fano_bound: f64,
    pub slack: f64,
}

/// Exact quantities of a `|V| x |Omega|` table given row by row.
pub fn summarize_joint(rows: &[Vec<f64>]) -> Result<JointSummary> {
    let joint = DiscreteJoint::from_rows(rows)?;
    let mi = exact_mi(&joint);
    let map = map_decoder_accuracy(&joint);
    let fano_bound = exact_fano_bound(map.accuracy.min(1.0), rows.len());
    Ok(JointSummary {
        mi,
        token_entropy: joint.token_entropy(),
        conditional_entropy: exact_conditional_entropy(&joint),
        map_accuracy: map.accuracy,
        decoder: map.decoder,
        uniform_tokens: joint.has_uniform_tokens(1e-9),
        fano_bound,
        slack: mi - fano_bound,
    })
}

#[derive(Debug, Serialize)]
pub struct TrainingSummary {
    pub epoch_losses: Vec<f64>,
    pub p_rec: f64,
    pub token_f1: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub token_bound: f64,
}

/// Trains a probe on a noisy one-hot corpus and scores it on fresh sentences
/// drawn with the same noise.
pub fn train_synthetic(vocab: usize, sentences: usize, noise: f64, epochs: usize, seed: u64) -> Result<TrainingSummary> {
    let train = synth::separable_corpus(vocab, sentences, (3, 12), noise, seed)?;
    let test = synth::separable_corpus(vocab, sentences.div_ceil(4), (3, 12), noise, seed.wrapping_add(1))?;
    let config = TrainConfig { epochs, learning_rate: 0.01, validation_fraction: 0.0, early_stop_patience: 0, seed, ..TrainConfig::default() };
    let (probe, report) = train_probe(&train, vocab, &config)?;
    let eval = evaluate(&probe, &test, &EvalOptions::default())?;
    Ok(TrainingSummary {
        epoch_losses: report.epoch_losses,
        p_rec: eval.bounds.p_rec,
        token_f1: eval.metrics.token_f1,
        bleu_4: eval.metrics.bleu_4,
        rouge_l: eval.metrics.rouge_l,
        token_bound: eval.bounds.token_bound,
    })
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = boundCurve)]
pub fn bound_curve_js(vocab_size: u32, bits: bool, exact: bool, points: u32) -> std::result::Result<Vec<f64>, JsError> {
    bound_curve(vocab_size as u64, bits, exact, points as usize).map_err(js_err)
}

/// `rows_json` is a JSON array of rows; returns a JSON summary.
#[wasm_bindgen(js_name = summarizeJoint)]
pub fn summarize_joint_js(rows_json: &str) -> std::result::Result<String, JsError> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(rows_json).map_err(js_err)?;
    let s = summarize_joint(&rows).map_err(js_err)?;
    serde_json::to_string(&s).map_err(js_err)
}

#[wasm_bindgen(js_name = trainSynthetic)]
pub fn train_synthetic_js(vocab: u32, sentences: u32, noise: f64, epochs: u32, seed: u32) -> std::result::Result<String, JsError> {
    let s = train_synthetic(vocab as usize, sentences as usize, noise, epochs as usize, seed as u64).map_err(js_err)?;
    serde_json::to_string(&s).map_err(js_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_endpoints() {
        let c = bound_curve(1001, false, false, 11).unwrap();
        assert_eq!(c.len(), 11);
        assert_eq!(c[0], 0.0);
        assert!((c[10] - 1000f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_joint_summary() {
        let s = summarize_joint(&[vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap();
        assert!((s.mi - 0.192_744_757_021_757_5).abs() < 1e-12);
        assert!((s.map_accuracy - 0.8).abs() < 1e-15);
        assert!(s.uniform_tokens);
        assert!(s.slack >= 0.0);
    }

    #[test]
    fn bad_table_is_an_error() {
        assert!(summarize_joint(&[vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn low_noise_training_recovers_tokens() {
        let s = train_synthetic(8, 120, 0.05, 4, 0).unwrap();
        assert!(s.p_rec > 0.95, "{s:?}");
        assert_eq!(s.epoch_losses.len(), 4);
    }
}
