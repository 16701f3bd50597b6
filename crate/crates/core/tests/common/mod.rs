#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tokenmi::corpus::{write_dump_file, DumpHeader, Manifest, SentenceRecord};

pub fn tokenmi() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tokenmi"))
}

/// Runs the CLI and returns its output; panics if it cannot be spawned.
pub fn run(args: &[&str]) -> Output {
    tokenmi().args(args).output().expect("spawn tokenmi")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Writes `records` as a dump with a manifest sidecar and returns its path.
pub fn write_dump(dir: &Path, name: &str, records: &[SentenceRecord], vocab: u32, layer: u16, domain: &str) -> PathBuf {
    let path = dir.join(name);
    let dim = records.first().map_or(1, |r| r.dim) as u32;
    let mut manifest = Manifest::new("synthetic-onehot", domain, layer);
    manifest.tokenizer_id = "synthetic".into();
    write_dump_file(&path, records, &DumpHeader::new(vocab, dim, layer), &manifest).expect("write dump");
    path
}

pub fn json_file(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).expect("read json")).expect("parse json")
}

/// Naive reference metrics, written independently of the library: n-grams
/// are materialized as vectors and counted by linear scan.
pub mod naive {
    fn ngrams(s: &[u32], n: usize) -> Vec<Vec<u32>> {
        if s.len() < n {
            return Vec::new();
        }
        (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
    }

    fn count(list: &[Vec<u32>], g: &[u32]) -> usize {
        list.iter().filter(|x| x.as_slice() == g).count()
    }

    pub fn clipped(pred: &[u32], reference: &[u32], n: usize) -> usize {
        let p = ngrams(pred, n);
        let r = ngrams(reference, n);
        let mut seen: Vec<Vec<u32>> = Vec::new();
        let mut total = 0;
        for g in &p {
            if seen.contains(g) {
                continue;
            }
            seen.push(g.clone());
            total += count(&p, g).min(count(&r, g));
        }
        total
    }

    fn f1(o: usize, p: usize, r: usize) -> f64 {
        if o == 0 {
            return 0.0;
        }
        let prec = o as f64 / p as f64;
        let rec = o as f64 / r as f64;
        2.0 * prec * rec / (prec + rec)
    }

    pub fn token_f1(pred: &[u32], reference: &[u32]) -> f64 {
        f1(clipped(pred, reference, 1), pred.len(), reference.len())
    }

    pub fn lcs(a: &[u32], b: &[u32]) -> usize {
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in (0..a.len()).rev() {
            for j in (0..b.len()).rev() {
                t[i][j] = if a[i] == b[j] { 1 + t[i + 1][j + 1] } else { t[i + 1][j].max(t[i][j + 1]) };
            }
        }
        t[0][0]
    }

    pub fn rouge_l(pred: &[u32], reference: &[u32]) -> f64 {
        f1(lcs(pred, reference), pred.len(), reference.len())
    }

    pub fn bleu(pred: &[u32], reference: &[u32], n_max: usize) -> f64 {
        if pred.is_empty() {
            return 0.0;
        }
        let mut prod = 1.0f64;
        for n in 1..=n_max {
            let p = if pred.len() < n {
                1e-9
            } else {
                let m = clipped(pred, reference, n);
                if m == 0 {
                    1e-9
                } else {
                    m as f64 / (pred.len() + 1 - n) as f64
                }
            };
            prod *= p;
        }
        let bp = if pred.len() < reference.len() { (1.0 - reference.len() as f64 / pred.len() as f64).exp() } else { 1.0 };
        bp * prod.powf(1.0 / n_max as f64)
    }
}
