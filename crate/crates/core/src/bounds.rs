//! Mutual-information lower bounds from token recoverability.
//!
//! With token accuracy `p` over a vocabulary of size `V`, Fano's inequality
//! gives `H(t|E) <= H_b(p) + (1-p) log(V-1)`, hence
//!
//! ```text
//! I(t;E) >= H(t) - H_b(p) - (1-p) log(V-1)
//! ```
//!
//! Under a uniform token prior `H(t) = log V` this is
//! `p log(V-1) - H_b(p) + [log V - log(V-1)]`; the bracketed term is dropped
//! by default (it vanishes for large vocabularies). Sentence-level MI is
//! bounded below by the sum of token-level MIs plus `Delta`, the (non-positive)
//! gap between the joint token entropy and the sum of marginal entropies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::SentenceRecord;
use crate::probe::RecoverabilityResult;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Nat,
    Bit,
}

impl LogBase {
    /// Converts a value in nats into this base.
    pub fn from_nats(self, nats: f64) -> f64 {
        match self {
            LogBase::Nat => nats,
            LogBase::Bit => nats / std::f64::consts::LN_2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundVariant {
    /// `H(t) = log |V|`.
    #[default]
    UniformPrior,
    /// `H(t)` replaced by a caller-supplied corpus entropy.
    EmpiricalEntropy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub log_base: LogBase,
    pub variant: BoundVariant,
    /// Adds `log|V| - log(|V|-1)` to the uniform-prior bound.
    pub include_vocab_gap_term: bool,
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// `x ln x` with `0 ln 0 = 0`.
#[inline]
pub(crate) fn xlnx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Binary entropy in nats.
pub fn binary_entropy_nats(p: f64) -> Result<f64> {
    check_probability(p)?;
    // max(0) absorbs a -0.0 at the endpoints
    Ok((-xlnx(p) - xlnx(1.0 - p)).max(0.0))
}

pub fn binary_entropy(p: f64, base: LogBase) -> Result<f64> {
    Ok(base.from_nats(binary_entropy_nats(p)?))
}

/// Fano lower bound on the average token-level MI, in `config.log_base`.
///
/// `token_entropy_nats` is required for [`BoundVariant::EmpiricalEntropy`] and
/// ignored otherwise. The empirical variant is already the exact form, so the
/// vocabulary gap flag does not apply to it.
pub fn fano_token_bound(
    p_rec: f64,
    vocab_size: u64,
    config: &BoundConfig,
    token_entropy_nats: Option<f64>,
) -> Result<f64> {
    Ok(config.log_base.from_nats(fano_token_bound_nats(p_rec, vocab_size, config, token_entropy_nats)?))
}

fn fano_token_bound_nats(p_rec: f64, vocab_size: u64, config: &BoundConfig, token_entropy: Option<f64>) -> Result<f64> {
    check_probability(p_rec)?;
    if vocab_size < 2 {
        return Err(Error::InvalidArgument(format!("vocabulary size must be >= 2, got {vocab_size}")));
    }
    let v = vocab_size as f64;
    let log_vm1 = (v - 1.0).ln();
    let hb = binary_entropy_nats(p_rec)?;
    match config.variant {
        BoundVariant::UniformPrior => {
            let mut bound = p_rec * log_vm1 - hb;
            if config.include_vocab_gap_term {
                // ln V - ln(V-1) = -ln(1 - 1/V)
                bound += -(-1.0 / v).ln_1p();
            }
            Ok(bound)
        }
        BoundVariant::EmpiricalEntropy => {
            let h = token_entropy.ok_or_else(|| {
                Error::InvalidArgument("empirical-entropy bound needs a token entropy estimate".into())
            })?;
            if !h.is_finite() || h < 0.0 {
                return Err(Error::InvalidArgument(format!("token entropy must be finite and >= 0, got {h}")));
            }
            Ok(h - hb - (1.0 - p_rec) * log_vm1)
        }
    }
}

/// `sum(token_mi) + delta`, the compositional lower bound on `I(S;E)`.
pub fn sentence_bound(token_mi_values: &[f64], delta: f64) -> Result<f64> {
    if delta > 0.0 {
        return Err(Error::InvalidArgument(format!(
            "delta = {delta} > 0 is impossible: joint entropy never exceeds the sum of marginals"
        )));
    }
    Ok(token_mi_values.iter().sum::<f64>() + delta)
}

/// Plug-in unigram entropy (nats) of all token positions in `records`.
pub fn empirical_token_entropy(records: &[SentenceRecord]) -> Result<f64> {
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for r in records {
        for &t in &r.tokens {
            *counts.entry(t).or_default() += 1;
        }
    }
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(Error::Empty("no tokens to estimate entropy from"));
    }
    Ok(plugin_entropy(counts.values().copied(), total))
}

fn plugin_entropy(counts: impl Iterator<Item = u64>, total: u64) -> f64 {
    let n = total as f64;
    -counts.map(|c| xlnx(c as f64 / n)).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaOrder {
    /// Tokens treated as independent: Delta is 0.
    Unigram,
    /// Stationary first-order Markov chain over tokens.
    BigramMarkov,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimate {
    /// Average over sentences, in nats, clamped to `<= 0`.
    pub delta: f64,
    /// `H(t_{k+1} | t_k) - H(t)` in nats (0 for unigram).
    pub per_transition: f64,
    pub mean_len: f64,
    pub order: DeltaOrder,
    pub caveat: String,
}

/// Plug-in estimate of `Delta = H(t_1..t_n) - sum H(t_i)` from corpus counts.
///
/// Marginals use the stationary unigram distribution of all positions. Under
/// the bigram model the joint entropy of an `n`-token sentence is
/// `H(t) + (n-1) H(t'|t)`, so `Delta(n) = (n-1) (H(t'|t) - H(t))`; the result
/// averages `Delta(n)` over the corpus.
pub fn estimate_delta(records: &[SentenceRecord], order: DeltaOrder) -> Result<DeltaEstimate> {
    if records.is_empty() {
        return Err(Error::Empty("cannot estimate delta from an empty corpus"));
    }
    let mean_len = records.iter().map(|r| r.len() as f64).sum::<f64>() / records.len() as f64;
    match order {
        DeltaOrder::Unigram => Ok(DeltaEstimate {
            delta: 0.0,
            per_transition: 0.0,
            mean_len,
            order,
            caveat: "Δ estimated under a token-independence assumption (Δ = 0), not exact".into(),
        }),
        DeltaOrder::BigramMarkov => {
            let unigram = empirical_token_entropy(records)?;
            let mut pairs: BTreeMap<(u32, u32), u64> = BTreeMap::new();
            let mut firsts: BTreeMap<u32, u64> = BTreeMap::new();
            for r in records {
                for w in r.tokens.windows(2) {
                    *pairs.entry((w[0], w[1])).or_default() += 1;
                    *firsts.entry(w[0]).or_default() += 1;
                }
            }
            let n_pairs: u64 = firsts.values().sum();
            let conditional = if n_pairs == 0 {
                unigram
            } else {
                plugin_entropy(pairs.values().copied(), n_pairs) - plugin_entropy(firsts.values().copied(), n_pairs)
            };
            let per_transition = (conditional - unigram).min(0.0);
            let delta = records.iter().map(|r| (r.len().saturating_sub(1)) as f64 * per_transition).sum::<f64>()
                / records.len() as f64;
            Ok(DeltaEstimate {
                delta: delta.min(0.0),
                per_transition,
                mean_len,
                order,
                caveat: "Δ estimated from plug-in bigram counts under a stationary Markov assumption, not exact".into(),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIBoundReport {
    pub p_rec: f64,
    pub vocab_size: u64,
    pub log_base: LogBase,
    pub variant: BoundVariant,
    pub include_vocab_gap_term: bool,
    /// Lower bound on the average token-level MI.
    pub token_bound: f64,
    pub token_entropy: Option<f64>,
    pub mean_sentence_len: f64,
    pub sentence_bound: Option<f64>,
    pub delta: Option<f64>,
    pub caveats: Vec<String>,
}

pub const CAVEAT_UNIFORM: &str = "uniform-prior assumption: H(t) = log|V| is assumed; real token distributions are skewed";
pub const CAVEAT_EMPIRICAL: &str = "H(t) is a plug-in corpus estimate";
pub const CAVEAT_GAP_DROPPED: &str = "large-vocabulary form: the log|V| - log(|V|-1) term is dropped";
pub const CAVEAT_DECODER: &str =
    "recoverability comes from a fixed linear probe, not the optimal decoder; the bound holds for any decoder but may be loose";
pub const CAVEAT_NEGATIVE: &str = "token bound is negative (vacuous)";
pub const CAVEAT_NO_DELTA: &str = "Δ not estimated; sentence bound omitted";

/// Token bound for the aggregate `p_rec` and, when `delta` is given, the
/// sentence bound `mean_len * token_bound + Delta`.
pub fn bound_report(
    result: &RecoverabilityResult,
    vocab_size: u64,
    config: &BoundConfig,
    delta: Option<&DeltaEstimate>,
    token_entropy_nats: Option<f64>,
) -> Result<MIBoundReport> {
    if result.per_sentence.is_empty() {
        return Err(Error::Empty("recoverability result has no sentences"));
    }
    let base = config.log_base;
    let token_bound_nats = fano_token_bound_nats(result.p_rec, vocab_size, config, token_entropy_nats)?;
    let mean_len = result.mean_sentence_len();
    let mut caveats = vec![CAVEAT_DECODER.to_string()];
    match config.variant {
        BoundVariant::UniformPrior => {
            caveats.push(CAVEAT_UNIFORM.to_string());
            if !config.include_vocab_gap_term {
                caveats.push(CAVEAT_GAP_DROPPED.to_string());
            }
        }
        BoundVariant::EmpiricalEntropy => caveats.push(CAVEAT_EMPIRICAL.to_string()),
    }
    if token_bound_nats < 0.0 {
        caveats.push(CAVEAT_NEGATIVE.to_string());
    }
    let (sentence, delta_out) = match delta {
        Some(d) => {
            caveats.push(d.caveat.clone());
            let s = mean_len * token_bound_nats + d.delta.min(0.0);
            (Some(base.from_nats(s)), Some(base.from_nats(d.delta)))
        }
        None => {
            caveats.push(CAVEAT_NO_DELTA.to_string());
            (None, None)
        }
    };
    Ok(MIBoundReport {
        p_rec: result.p_rec,
        vocab_size,
        log_base: base,
        variant: config.variant,
        include_vocab_gap_term: config.include_vocab_gap_term,
        token_bound: base.from_nats(token_bound_nats),
        token_entropy: token_entropy_nats.map(|h| base.from_nats(h)),
        mean_sentence_len: mean_len,
        sentence_bound: sentence,
        delta: delta_out,
        caveats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::{PositionCount, SentenceAccuracy};
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    const NAT: BoundConfig =
        BoundConfig { log_base: LogBase::Nat, variant: BoundVariant::UniformPrior, include_vocab_gap_term: false };

    fn result(p_rec: f64, n: usize) -> RecoverabilityResult {
        let correct = (p_rec * n as f64).round() as usize;
        RecoverabilityResult {
            p_rec,
            correct: correct as u64,
            total: n as u64,
            per_sentence: vec![SentenceAccuracy { id: 0, n, correct, accuracy: p_rec }],
            per_position: vec![PositionCount::default(); n],
        }
    }

    #[test]
    fn binary_entropy_values() {
        assert!((binary_entropy_nats(0.5).unwrap() - LN_2).abs() < 1e-15);
        assert_eq!(binary_entropy_nats(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy_nats(1.0).unwrap(), 0.0);
        // -0.9 ln 0.9 - 0.1 ln 0.1
        assert!((binary_entropy_nats(0.9).unwrap() - 0.325_082_973_391_448_3).abs() < 1e-12);
        assert!((binary_entropy(0.5, LogBase::Bit).unwrap() - 1.0).abs() < 1e-15);
        assert!(binary_entropy_nats(1.5).is_err());
        assert!(binary_entropy_nats(-0.1).is_err());
        assert!(binary_entropy_nats(f64::NAN).is_err());
    }

    #[test]
    fn fano_anchor_values() {
        let b = fano_token_bound(1.0, 1001, &NAT, None).unwrap();
        assert!((b - 1000f64.ln()).abs() < 1e-12);
        assert_eq!(fano_token_bound(0.0, 57, &NAT, None).unwrap(), 0.0);
        let b = fano_token_bound(0.8, 2, &NAT, None).unwrap();
        assert!((b + 0.500_402_423_538_187_9).abs() < 1e-12);
        let gap = BoundConfig { include_vocab_gap_term: true, ..NAT };
        let b = fano_token_bound(1.0, 1001, &gap, None).unwrap();
        assert!((b - 1001f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fano_errors() {
        assert!(fano_token_bound(0.5, 1, &NAT, None).is_err());
        assert!(fano_token_bound(1.1, 10, &NAT, None).is_err());
        let emp = BoundConfig { variant: BoundVariant::EmpiricalEntropy, ..NAT };
        assert!(fano_token_bound(0.5, 10, &emp, None).is_err());
        assert!(fano_token_bound(0.5, 10, &emp, Some(-1.0)).is_err());
    }

    #[test]
    fn empirical_variant_equals_uniform_exact_form_at_log_v() {
        let emp = BoundConfig { variant: BoundVariant::EmpiricalEntropy, ..NAT };
        let gap = BoundConfig { include_vocab_gap_term: true, ..NAT };
        for p in [0.0, 0.1, 0.5, 0.93, 1.0] {
            let a = fano_token_bound(p, 50, &emp, Some(50f64.ln())).unwrap();
            let b = fano_token_bound(p, 50, &gap, None).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sentence_bound_cases() {
        assert!((sentence_bound(&[0.5, 0.3], 0.0).unwrap() - 0.8).abs() < 1e-15);
        let a = 1.25;
        assert!((sentence_bound(&[a, a], LN_2 - 2.0 * LN_2).unwrap() - (2.0 * a - LN_2)).abs() < 1e-15);
        assert_eq!(sentence_bound(&[], 0.0).unwrap(), 0.0);
        assert!(sentence_bound(&[1.0], 0.1).is_err());
    }

    #[test]
    fn report_composes_sentence_bound() {
        let d = DeltaEstimate { delta: 0.0, per_transition: 0.0, mean_len: 3.0, order: DeltaOrder::Unigram, caveat: "c".into() };
        let r = bound_report(&result(1.0, 3), 1001, &NAT, Some(&d), None).unwrap();
        assert!((r.sentence_bound.unwrap() - 3.0 * 1000f64.ln()).abs() < 1e-12);
        let r = bound_report(&result(1.0, 3), 1001, &NAT, None, None).unwrap();
        assert!(r.sentence_bound.is_none());
        assert!(r.caveats.iter().any(|c| c == CAVEAT_NO_DELTA));
        assert!(r.caveats.iter().any(|c| c == CAVEAT_UNIFORM));
    }

    #[test]
    fn report_flags_negative_bound() {
        let r = bound_report(&result(0.5, 2), 2, &NAT, None, None).unwrap();
        assert!(r.token_bound < 0.0);
        assert!(r.caveats.iter().any(|c| c == CAVEAT_NEGATIVE));
    }

    fn sent(id: u64, tokens: Vec<u32>) -> SentenceRecord {
        let n = tokens.len();
        SentenceRecord::new(id, tokens, vec![0.0; n], 1).unwrap()
    }

    #[test]
    fn delta_on_constant_corpus_is_zero() {
        let recs: Vec<_> = (0..5).map(|i| sent(i, vec![3; 6])).collect();
        let d = estimate_delta(&recs, DeltaOrder::BigramMarkov).unwrap();
        assert_eq!(d.delta, 0.0);
        assert_eq!(empirical_token_entropy(&recs).unwrap(), 0.0);
        assert!(estimate_delta(&[], DeltaOrder::Unigram).is_err());
    }

    #[test]
    fn delta_on_alternating_corpus() {
        // 0,1,0,1,... : unigram entropy ln 2, conditional entropy 0
        let recs: Vec<_> = (0..4).map(|i| sent(i, (0..5).map(|k| ((k + i) % 2) as u32).collect())).collect();
        let d = estimate_delta(&recs, DeltaOrder::BigramMarkov).unwrap();
        let h1 = empirical_token_entropy(&recs).unwrap();
        assert!((d.per_transition + h1).abs() < 1e-12);
        assert!((d.delta + 4.0 * h1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bit_base_is_nat_over_ln2(p in 0.0f64..=1.0, v in 2u64..100_000, gap in any::<bool>()) {
            let nat = BoundConfig { include_vocab_gap_term: gap, ..NAT };
            let bit = BoundConfig { log_base: LogBase::Bit, ..nat };
            let a = fano_token_bound(p, v, &nat, None).unwrap();
            let b = fano_token_bound(p, v, &bit, None).unwrap();
            prop_assert!((b - a / LN_2).abs() <= 1e-12 * b.abs().max(1e-300));
        }

        #[test]
        fn bound_never_below_worst_case(p in 0.0f64..=1.0, v in 2u64..5000) {
            prop_assume!(p >= 1.0 / v as f64);
            let b = fano_token_bound(p, v, &NAT, None).unwrap();
            let floor = -binary_entropy_nats(1.0 / v as f64).unwrap();
            prop_assert!(b >= floor - 1e-12);
        }

        #[test]
        fn sentence_bound_below_token_sum(vals in prop::collection::vec(-5.0f64..5.0, 0..10), delta in -10.0f64..=0.0) {
            let s = sentence_bound(&vals, delta).unwrap();
            prop_assert!(s <= vals.iter().sum::<f64>() + 1e-12);
        }
    }

    #[test]
    fn fano_monotone_above_chance() {
        for v in [2u64, 3, 10, 1000, 50_000] {
            let lo = 1.0 / v as f64;
            let mut prev = f64::NEG_INFINITY;
            for k in 0..=2000 {
                let p = lo + (1.0 - lo) * k as f64 / 2000.0;
                let b = fano_token_bound(p, v, &NAT, None).unwrap();
                assert!(b >= prev - 1e-12, "v={v} p={p}");
                prev = b;
            }
        }
    }
}
