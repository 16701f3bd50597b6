//! Exact information quantities on small finite joints.
//!
//! Everything here is computed by exhaustive summation at `f64` with
//! compensated (Neumaier) accumulation, and serves as ground truth for the
//! bounds in [`crate::bounds`]. Alphabets are capped at 16 symbols and
//! sentences at 4 tokens.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::bounds::{binary_entropy_nats, fano_token_bound, BoundConfig, BoundVariant, LogBase};
use crate::{Error, Result};

pub const MAX_ALPHABET: usize = 16;
pub const MAX_SENTENCE_LEN: usize = 4;
pub const MAX_CELLS: usize = 1 << 20;
/// Normalisation tolerance for probability tables.
pub const SUM_TOLERANCE: f64 = 1e-12;
/// Allowed negative slack in inequality checks.
pub const SLACK_TOLERANCE: f64 = 1e-9;

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn entropy(probs: &[f64]) -> f64 {
    -compensated_sum(probs.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }))
}

fn check_table(prob: &[f64]) -> Result<()> {
    if let Some(p) = prob.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::InvalidTable(format!("entry {p} is negative or non-finite")));
    }
    let total = compensated_sum(prob.iter().copied());
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidTable(format!("entries sum to {total}")));
    }
    Ok(())
}

fn check_alphabet(name: &str, size: usize) -> Result<()> {
    if size == 0 || size > MAX_ALPHABET {
        return Err(Error::InvalidTable(format!("{name} alphabet size {size} outside 1..={MAX_ALPHABET}")));
    }
    Ok(())
}

/// Joint distribution of one token `t` and an observation symbol `e`,
/// stored row-major as `prob[t * obs + e]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    pub tokens: usize,
    pub obs: usize,
    pub prob: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(tokens: usize, obs: usize, prob: Vec<f64>) -> Result<Self> {
        check_alphabet("token", tokens)?;
        check_alphabet("observation", obs)?;
        if prob.len() != tokens * obs {
            return Err(Error::InvalidTable(format!("{} entries for a {tokens}x{obs} table", prob.len())));
        }
        check_table(&prob)?;
        Ok(DiscreteJoint { tokens, obs, prob })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let obs = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != obs) {
            return Err(Error::InvalidTable("ragged rows".into()));
        }
        Self::new(rows.len(), obs, rows.concat())
    }

    /// `p(t, e) = p(e | t) / V`: the token marginal is exactly uniform.
    pub fn with_uniform_tokens(conditionals: &[Vec<f64>]) -> Result<Self> {
        let v = conditionals.len() as f64;
        let rows: Vec<Vec<f64>> = conditionals.iter().map(|r| r.iter().map(|p| p / v).collect()).collect();
        Self::from_rows(&rows)
    }

    /// Product of two marginals.
    pub fn independent(token_marginal: &[f64], obs_marginal: &[f64]) -> Result<Self> {
        let prob = token_marginal.iter().flat_map(|&a| obs_marginal.iter().map(move |&b| a * b)).collect();
        Self::new(token_marginal.len(), obs_marginal.len(), prob)
    }

    pub fn p(&self, t: usize, e: usize) -> f64 {
        self.prob[t * self.obs + e]
    }

    pub fn token_marginal(&self) -> Vec<f64> {
        (0..self.tokens).map(|t| compensated_sum((0..self.obs).map(|e| self.p(t, e)))).collect()
    }

    pub fn obs_marginal(&self) -> Vec<f64> {
        (0..self.obs).map(|e| compensated_sum((0..self.tokens).map(|t| self.p(t, e)))).collect()
    }

    pub fn token_entropy(&self) -> f64 {
        entropy(&self.token_marginal())
    }

    /// True when the token marginal is uniform within `tol`.
    pub fn has_uniform_tokens(&self, tol: f64) -> bool {
        let u = 1.0 / self.tokens as f64;
        self.token_marginal().iter().all(|p| (p - u).abs() <= tol)
    }
}

/// `I(t; e) = sum p(t,e) ln(p(t,e) / (p(t) p(e)))` in nats.
pub fn exact_mi(joint: &DiscreteJoint) -> f64 {
    let pt = joint.token_marginal();
    let pe = joint.obs_marginal();
    let terms = (0..joint.tokens).flat_map(|t| {
        let pe = &pe;
        let pt = pt[t];
        (0..joint.obs).map(move |e| {
            let p = joint.p(t, e);
            if p > 0.0 {
                p * (p / (pt * pe[e])).ln()
            } else {
                0.0
            }
        })
    });
    compensated_sum(terms)
}

/// `H(t | e) = -sum p(t,e) ln(p(t,e) / p(e))` in nats.
pub fn exact_conditional_entropy(joint: &DiscreteJoint) -> f64 {
    let pe = joint.obs_marginal();
    let terms = (0..joint.tokens).flat_map(|t| {
        let pe = &pe;
        (0..joint.obs).map(move |e| {
            let p = joint.p(t, e);
            if p > 0.0 {
                -p * (p / pe[e]).ln()
            } else {
                0.0
            }
        })
    });
    compensated_sum(terms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapDecoder {
    pub accuracy: f64,
    /// Token chosen for each observation symbol.
    pub decoder: Vec<u32>,
}

/// Success probability of an arbitrary decoder `e -> decoder[e]`.
pub fn decoder_accuracy(joint: &DiscreteJoint, decoder: &[u32]) -> Result<f64> {
    if decoder.len() != joint.obs || decoder.iter().any(|&t| t as usize >= joint.tokens) {
        return Err(Error::InvalidArgument("decoder does not match the joint's alphabets".into()));
    }
    Ok(compensated_sum(decoder.iter().enumerate().map(|(e, &t)| joint.p(t as usize, e))))
}

/// The Bayes-optimal decoder: each `e` maps to `argmax_t p(t, e)` (ties to the
/// smallest `t`).
pub fn map_decoder_accuracy(joint: &DiscreteJoint) -> MapDecoder {
    let decoder: Vec<u32> = (0..joint.obs)
        .map(|e| {
            let mut best = 0;
            for t in 1..joint.tokens {
                if joint.p(t, e) > joint.p(best, e) {
                    best = t;
                }
            }
            best as u32
        })
        .collect();
    let accuracy = compensated_sum(decoder.iter().enumerate().map(|(e, &t)| joint.p(t as usize, e)));
    MapDecoder { accuracy, decoder }
}

/// Joint distribution of `n` tokens and one observation symbol.
/// Index order is `(t_1, ..., t_n, e)` with `t_1` most significant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceJoint {
    pub n: usize,
    pub vocab: usize,
    pub obs: usize,
    pub prob: Vec<f64>,
}

impl SentenceJoint {
    pub fn new(n: usize, vocab: usize, obs: usize, prob: Vec<f64>) -> Result<Self> {
        if n == 0 || n > MAX_SENTENCE_LEN {
            return Err(Error::InvalidTable(format!("sentence length {n} outside 1..={MAX_SENTENCE_LEN}")));
        }
        check_alphabet("token", vocab)?;
        check_alphabet("observation", obs)?;
        let cells = vocab.pow(n as u32) * obs;
        if cells > MAX_CELLS {
            return Err(Error::TooLarge { cells, limit: MAX_CELLS });
        }
        if prob.len() != cells {
            return Err(Error::InvalidTable(format!("{} entries, expected {cells}", prob.len())));
        }
        check_table(&prob)?;
        Ok(SentenceJoint { n, vocab, obs, prob })
    }

    fn decode(&self, mut idx: usize, tokens: &mut [usize]) -> usize {
        let e = idx % self.obs;
        idx /= self.obs;
        for slot in tokens.iter_mut().rev() {
            *slot = idx % self.vocab;
            idx /= self.vocab;
        }
        e
    }

    /// Marginal over the token positions in `keep` (in the given order),
    /// optionally keeping `e` as the last axis.
    pub fn marginal(&self, keep: &[usize], keep_obs: bool) -> Vec<f64> {
        let size = self.vocab.pow(keep.len() as u32) * if keep_obs { self.obs } else { 1 };
        let mut acc: Vec<(f64, f64)> = vec![(0.0, 0.0); size];
        let mut toks = vec![0usize; self.n];
        for (idx, &p) in self.prob.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let e = self.decode(idx, &mut toks);
            let mut j = 0;
            for &k in keep {
                j = j * self.vocab + toks[k];
            }
            if keep_obs {
                j = j * self.obs + e;
            }
            // per-cell Neumaier accumulation
            let (s, c) = &mut acc[j];
            let t = *s + p;
            if s.abs() >= p {
                *c += (*s - t) + p;
            } else {
                *c += (p - t) + *s;
            }
            *s = t;
        }
        acc.into_iter().map(|(s, c)| s + c).collect()
    }

    /// 2-D joint of token `i` and `e`.
    pub fn token_joint(&self, i: usize) -> Result<DiscreteJoint> {
        let m = self.marginal(&[i], true);
        // renormalise away rounding so the strict sum check passes
        let total = compensated_sum(m.iter().copied());
        DiscreteJoint::new(self.vocab, self.obs, m.into_iter().map(|p| p / total).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceQuantities {
    /// `I(S; E)`.
    pub i_se: f64,
    /// `I(t_i; E)` per position.
    pub per_token_mi: Vec<f64>,
    /// `H(t_1..t_n) - sum H(t_i)`.
    pub delta: f64,
    pub h_s: f64,
    pub h_s_given_e: f64,
    /// `H(t_i | E)`.
    pub token_cond_entropy: Vec<f64>,
    /// `H(t_i | E, t_1..t_{i-1})`.
    pub chain_terms: Vec<f64>,
    /// MAP accuracy of recovering `t_i` from `E` alone.
    pub per_token_map_accuracy: Vec<f64>,
}

/// Exhaustive evaluation of every quantity in the compositional bound.
pub fn exact_sentence_quantities(sj: &SentenceJoint) -> Result<SentenceQuantities> {
    let all: Vec<usize> = (0..sj.n).collect();
    let h_se = entropy(&sj.prob);
    let h_s = entropy(&sj.marginal(&all, false));
    let h_e = entropy(&sj.marginal(&[], true));
    let i_se = h_s + h_e - h_se;

    let mut per_token_mi = Vec::with_capacity(sj.n);
    let mut token_cond_entropy = Vec::with_capacity(sj.n);
    let mut chain_terms = Vec::with_capacity(sj.n);
    let mut per_token_map_accuracy = Vec::with_capacity(sj.n);
    let mut sum_h_t = 0.0;
    let mut prev_prefix_e = h_e;
    for i in 0..sj.n {
        let h_t = entropy(&sj.marginal(&[i], false));
        let h_te = entropy(&sj.marginal(&[i], true));
        sum_h_t += h_t;
        per_token_mi.push(h_t + h_e - h_te);
        token_cond_entropy.push(h_te - h_e);
        let h_prefix_e = entropy(&sj.marginal(&all[..=i], true));
        chain_terms.push(h_prefix_e - prev_prefix_e);
        prev_prefix_e = h_prefix_e;
        per_token_map_accuracy.push(map_decoder_accuracy(&sj.token_joint(i)?).accuracy);
    }
    Ok(SentenceQuantities {
        i_se,
        per_token_mi,
        delta: h_s - sum_h_t,
        h_s,
        h_s_given_e: h_se - h_e,
        token_cond_entropy,
        chain_terms,
        per_token_map_accuracy,
    })
}

/// Flat-Dirichlet sample over `cells` entries.
pub fn dirichlet_flat<R: Rng>(rng: &mut R, cells: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..cells).map(|_| Exp1.sample(rng)).collect();
    let total = compensated_sum(raw.iter().copied());
    raw.into_iter().map(|x| x / total).collect()
}

/// Random joint with an exactly uniform token marginal: each row `p(e|t)` is
/// an independent flat-Dirichlet draw.
pub fn random_uniform_token_joint<R: Rng>(rng: &mut R, tokens: usize, obs: usize, sparse: bool) -> Result<DiscreteJoint> {
    let rows: Vec<Vec<f64>> = (0..tokens)
        .map(|_| {
            let mut row = dirichlet_flat(rng, obs);
            if sparse {
                // keep one random cell, zero roughly half of the rest
                let keep = rng.random_range(0..obs);
                for (e, p) in row.iter_mut().enumerate() {
                    if e != keep && rng.random_bool(0.5) {
                        *p = 0.0;
                    }
                }
                let total = compensated_sum(row.iter().copied());
                row.iter_mut().for_each(|p| *p /= total);
            }
            row
        })
        .collect();
    DiscreteJoint::with_uniform_tokens(&rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// `I(S;E) >= sum I(t_i;E) + Delta`.
    CompositionalBound,
    /// Exact-form Fano bound with the MAP decoder.
    FanoMap,
    /// Exact-form Fano bound with a random suboptimal decoder.
    FanoRandomDecoder,
    /// `H(S|E) = sum H(t_i | E, t_<i)`.
    ChainRule,
    /// `H(t_i|E) >= H(t_i | E, t_<i)`.
    Conditioning,
    /// `mean H_b(p_i) <= H_b(mean p_i)`.
    Jensen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "snake_case")]
pub enum FailureTable {
    Token(DiscreteJoint),
    Sentence(SentenceJoint),
    Accuracies(Vec<f64>),
}

/// One evaluated inequality. `slack = lhs - rhs` must be `>= -1e-9`; for the
/// chain-rule identity `slack = -|lhs - rhs|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub kind: CheckKind,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn inequality(kind: CheckKind, lhs: f64, rhs: f64, detail: String) -> Self {
        CheckOutcome { kind, lhs, rhs, slack: lhs - rhs, detail }
    }

    pub fn passed(&self) -> bool {
        self.slack >= -SLACK_TOLERANCE
    }

    /// Holds with equality (within tolerance).
    pub fn tight(&self) -> bool {
        self.slack.abs() <= SLACK_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub trial: u64,
    pub outcome: CheckOutcome,
    pub table: FailureTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub trials: u64,
    pub checks_run: u64,
    pub tolerance: f64,
    /// Smallest slack seen per check kind.
    pub min_slack: BTreeMap<CheckKind, f64>,
    pub tight_checks: u64,
    pub failures: Vec<Failure>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Exact-form token bound in nats: `p ln(V-1) - H_b(p) + ln V - ln(V-1)`.
pub fn exact_fano_bound(p: f64, vocab: usize) -> f64 {
    let cfg = BoundConfig { log_base: LogBase::Nat, variant: BoundVariant::UniformPrior, include_vocab_gap_term: true };
    // p comes from a decoder on a valid table; clamp rounding just above 1
    fano_token_bound(p.clamp(0.0, 1.0), vocab as u64, &cfg, None).unwrap_or(f64::NAN)
}

/// Signature of a token-bound formula under test, `(accuracy, |V|) -> nats`.
pub type TokenBoundFn<'a> = &'a (dyn Fn(f64, usize) -> f64 + Sync);

/// Checks `I(t;E) >= bound(accuracy(g), V)` for the MAP decoder and every
/// decoder in `extra_decoders`. The joint should have a uniform token marginal.
pub fn check_token_joint(joint: &DiscreteJoint, extra_decoders: &[Vec<u32>], bound: TokenBoundFn) -> Result<Vec<CheckOutcome>> {
    let mi = exact_mi(joint);
    let map = map_decoder_accuracy(joint);
    let mut out = vec![CheckOutcome::inequality(
        CheckKind::FanoMap,
        mi,
        bound(map.accuracy, joint.tokens),
        format!("MAP accuracy {:.12}", map.accuracy),
    )];
    for d in extra_decoders {
        let acc = decoder_accuracy(joint, d)?;
        out.push(CheckOutcome::inequality(
            CheckKind::FanoRandomDecoder,
            mi,
            bound(acc, joint.tokens),
            format!("decoder {d:?} accuracy {acc:.12}"),
        ));
    }
    Ok(out)
}

/// Checks the compositional bound, the chain rule, conditioning and the
/// Jensen step (on per-token MAP accuracies) for one sentence joint.
pub fn check_sentence_joint(sj: &SentenceJoint) -> Result<Vec<CheckOutcome>> {
    let q = exact_sentence_quantities(sj)?;
    let mut out = Vec::new();
    let rhs = compensated_sum(q.per_token_mi.iter().copied()) + q.delta;
    out.push(CheckOutcome::inequality(CheckKind::CompositionalBound, q.i_se, rhs, format!("delta {:.12}", q.delta)));
    let chain = compensated_sum(q.chain_terms.iter().copied());
    out.push(CheckOutcome {
        kind: CheckKind::ChainRule,
        lhs: q.h_s_given_e,
        rhs: chain,
        slack: -(q.h_s_given_e - chain).abs(),
        detail: String::new(),
    });
    for (i, (&h, &c)) in q.token_cond_entropy.iter().zip(&q.chain_terms).enumerate() {
        out.push(CheckOutcome::inequality(CheckKind::Conditioning, h, c, format!("token {i}")));
    }
    out.push(check_jensen(&q.per_token_map_accuracy)?);
    Ok(out)
}

/// `H_b(mean p) >= mean H_b(p)`.
pub fn check_jensen(accuracies: &[f64]) -> Result<CheckOutcome> {
    if accuracies.is_empty() {
        return Err(Error::Empty("no accuracies"));
    }
    let n = accuracies.len() as f64;
    let mean = (compensated_sum(accuracies.iter().copied()) / n).clamp(0.0, 1.0);
    let hb: Vec<f64> = accuracies.iter().map(|&p| binary_entropy_nats(p.clamp(0.0, 1.0))).collect::<Result<_>>()?;
    let mean_hb = compensated_sum(hb) / n;
    Ok(CheckOutcome::inequality(CheckKind::Jensen, binary_entropy_nats(mean)?, mean_hb, format!("mean accuracy {mean:.12}")))
}

/// Number of random suboptimal decoders checked per trial.
pub const RANDOM_DECODERS: usize = 5;

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn run_trial(seed: u64, trial: u64, bound: TokenBoundFn) -> Result<Vec<(CheckOutcome, FailureTable)>> {
    let mut rng = trial_rng(seed, trial);
    let mut out = Vec::new();
    let sparse = trial % 10 == 9;

    // Compositional bound, chain rule, conditioning, Jensen
    let n = rng.random_range(2..=3);
    let vocab: usize = rng.random_range(2..=3);
    let obs = rng.random_range(2..=4);
    let cells = vocab.pow(n as u32) * obs;
    let mut prob = dirichlet_flat(&mut rng, cells);
    if sparse {
        for p in prob.iter_mut() {
            if rng.random_bool(0.5) {
                *p = 0.0;
            }
        }
        let keep = rng.random_range(0..cells);
        prob[keep] += 1e-3;
        let total = compensated_sum(prob.iter().copied());
        prob.iter_mut().for_each(|p| *p /= total);
    }
    let sj = SentenceJoint::new(n, vocab, obs, prob)?;
    for o in check_sentence_joint(&sj)? {
        out.push((o, FailureTable::Sentence(sj.clone())));
    }

    // Exact-form Fano bound under a uniform token marginal
    let tokens = rng.random_range(2..=6);
    let obs = rng.random_range(2..=6);
    let joint = random_uniform_token_joint(&mut rng, tokens, obs, sparse)?;
    let decoders: Vec<Vec<u32>> = (0..RANDOM_DECODERS)
        .map(|_| (0..obs).map(|_| rng.random_range(0..tokens as u32)).collect())
        .collect();
    for o in check_token_joint(&joint, &decoders, bound)? {
        out.push((o, FailureTable::Token(joint.clone())));
    }

    // Jensen on an unconstrained accuracy vector
    let len = rng.random_range(1..=8);
    let accs: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..=1.0)).collect();
    out.push((check_jensen(&accs)?, FailureTable::Accuracies(accs)));
    Ok(out)
}

/// Runs `trials` independent randomized checks of every inequality using the
/// exact-form Fano bound. Failures are data, not errors.
pub fn verify_bounds(seed: u64, trials: u64) -> Result<VerificationReport> {
    verify_bounds_with(seed, trials, &exact_fano_bound)
}

/// [`verify_bounds`] with a caller-supplied token-bound formula, so the
/// harness itself can be mutation-tested.
pub fn verify_bounds_with(seed: u64, trials: u64, bound: TokenBoundFn) -> Result<VerificationReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    #[cfg(feature = "parallel")]
    let per_trial: Vec<_> = {
        use rayon::prelude::*;
        (0..trials).into_par_iter().map(|t| run_trial(seed, t, bound)).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let per_trial: Vec<_> = (0..trials).map(|t| run_trial(seed, t, bound)).collect::<Result<_>>()?;

    let mut report = VerificationReport {
        seed,
        trials,
        checks_run: 0,
        tolerance: SLACK_TOLERANCE,
        min_slack: BTreeMap::new(),
        tight_checks: 0,
        failures: Vec::new(),
    };
    for (trial, outcomes) in per_trial.into_iter().enumerate() {
        for (o, table) in outcomes {
            report.checks_run += 1;
            let slot = report.min_slack.entry(o.kind).or_insert(f64::INFINITY);
            *slot = slot.min(o.slack);
            if o.tight() {
                report.tight_checks += 1;
            }
            if !o.passed() || o.slack.is_nan() {
                report.failures.push(Failure { trial: trial as u64, outcome: o, table });
            }
        }
    }
    Ok(report)
}
