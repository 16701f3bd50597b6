//! Synthetic corpora with known structure.
//!
//! The basic construction embeds token `t` as the one-hot vector `e_t` in
//! `R^|V|` plus i.i.d. Gaussian noise, so a linear probe can recover tokens
//! perfectly at low noise and degrades smoothly as noise grows.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::SentenceRecord;
use crate::{Error, Result};

/// Noisy one-hot corpus. `noise_for_len(n)` gives the noise standard deviation
/// for a sentence of `n` tokens; tokens are uniform over the vocabulary.
pub fn noisy_onehot_corpus(
    vocab: usize,
    sentences: usize,
    len_range: (usize, usize),
    noise_for_len: impl Fn(usize) -> f64,
    seed: u64,
) -> Result<Vec<SentenceRecord>> {
    let token_seqs = uniform_token_sequences(vocab, sentences, len_range, seed)?;
    embed_onehot(&token_seqs, vocab, noise_for_len, seed.wrapping_add(0x9e37_79b9))
}

/// Separable corpus: `d = |V|`, constant noise.
pub fn separable_corpus(vocab: usize, sentences: usize, len_range: (usize, usize), noise: f64, seed: u64) -> Result<Vec<SentenceRecord>> {
    noisy_onehot_corpus(vocab, sentences, len_range, |_| noise, seed)
}

pub fn uniform_token_sequences(vocab: usize, sentences: usize, len_range: (usize, usize), seed: u64) -> Result<Vec<Vec<u32>>> {
    let (lo, hi) = len_range;
    if vocab < 2 || lo == 0 || lo > hi {
        return Err(Error::InvalidArgument(format!("bad synthetic corpus shape: |V|={vocab}, lengths {lo}..={hi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..sentences)
        .map(|_| {
            let n = rng.random_range(lo..=hi);
            (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
        })
        .collect())
}

/// Embeds fixed token sequences as noisy one-hots.
pub fn embed_onehot(
    token_seqs: &[Vec<u32>],
    vocab: usize,
    noise_for_len: impl Fn(usize) -> f64,
    seed: u64,
) -> Result<Vec<SentenceRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    token_seqs
        .iter()
        .enumerate()
        .map(|(i, toks)| {
            let sigma = noise_for_len(toks.len());
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let mut emb = Vec::with_capacity(toks.len() * vocab);
            for &t in toks {
                for k in 0..vocab {
                    let base = if k == t as usize { 1.0 } else { 0.0 };
                    emb.push((base + normal.sample(&mut rng)) as f32);
                }
            }
            SentenceRecord::new(i as u64, toks.clone(), emb, vocab)
        })
        .collect()
}

/// Same tokens and noise draws as `records`, but embedding coordinates are
/// shuffled by a random permutation: the embedding of token `t` becomes the
/// one-hot of `perm[t]`, breaking a probe trained on the original layout.
pub fn permute_embedding_axes(records: &[SentenceRecord], seed: u64) -> Vec<SentenceRecord> {
    let dim = records.first().map_or(0, |r| r.dim);
    let mut perm: Vec<usize> = (0..dim).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    records
        .iter()
        .map(|r| {
            let mut emb = vec![0.0f32; r.embeddings.len()];
            for row in 0..r.rows() {
                for k in 0..dim {
                    emb[row * dim + perm[k]] = r.embeddings[row * dim + k];
                }
            }
            SentenceRecord { id: r.id, tokens: r.tokens.clone(), embeddings: emb, dim }
        })
        .collect()
}

/// One corpus per layer sharing the same token sequences, with noise level
/// `schedule[k]` at layer `k`.
pub fn layer_family(
    vocab: usize,
    sentences: usize,
    len_range: (usize, usize),
    schedule: &[f64],
    seed: u64,
) -> Result<Vec<Vec<SentenceRecord>>> {
    let seqs = uniform_token_sequences(vocab, sentences, len_range, seed)?;
    schedule
        .iter()
        .enumerate()
        .map(|(k, &sigma)| embed_onehot(&seqs, vocab, |_| sigma, seed.wrapping_add(1 + k as u64)))
        .collect()
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary_distribution(transition: &[Vec<f64>]) -> Vec<f64> {
    let k = transition.len();
    let mut pi = vec![1.0 / k as f64; k];
    for _ in 0..10_000 {
        let mut next = vec![0.0; k];
        for (i, row) in transition.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                next[j] += pi[i] * p;
            }
        }
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    pi
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (probs.len() - 1) as u32
}

/// Token sequences from a first-order Markov chain started in its stationary
/// distribution. Embeddings are zero (dimension 1); only tokens matter here.
pub fn markov_corpus(transition: &[Vec<f64>], sentences: usize, len: usize, seed: u64) -> Result<Vec<SentenceRecord>> {
    let k = transition.len();
    if k < 2 || transition.iter().any(|r| r.len() != k) || len == 0 {
        return Err(Error::InvalidArgument("transition matrix must be square with >= 2 states".into()));
    }
    let pi = stationary_distribution(transition);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sentences)
        .map(|i| {
            let mut toks = Vec::with_capacity(len);
            let mut s = sample_index(&mut rng, &pi);
            toks.push(s);
            for _ in 1..len {
                s = sample_index(&mut rng, &transition[s as usize]);
                toks.push(s);
            }
            SentenceRecord::new(i as u64, toks, vec![0.0], 1)
        })
        .collect()
}
