//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always reach the output.

mod common;

use std::panic::{catch_unwind, UnwindSafe};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenmi::bounds::{binary_entropy_nats, fano_token_bound, BoundConfig, LogBase};
use tokenmi::corpus::{read_dump, validate_dump, write_dump, DumpHeader, SentenceRecord, ViolationKind, HEADER_LEN};
use tokenmi::metrics::{bleu_n, rouge_1, rouge_l, token_f1, BleuOrder};
use tokenmi::oracle::{exact_mi, CheckKind, DiscreteJoint, VerificationReport};
use tokenmi::probe::{train_probe, LinearProbe, ProbeBatch, TrainConfig, WeightInit};
use tokenmi::synth;

use common::{naive, path_str, run, write_dump as write_dump_file};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn oracle_suite() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("verify.json");
    let started = Instant::now();
    let res = run(&["oracle-verify", "--seed", "0", "--trials", "1000", "--out", path_str(&out)]);
    let elapsed = started.elapsed();
    ensure(res.status.code() == Some(0), || format!("exit {:?}: {}", res.status.code(), String::from_utf8_lossy(&res.stderr)))?;
    let env = common::json_file(&out);
    let report: VerificationReport = serde_json::from_value(env["report"].clone()).map_err(|e| e.to_string())?;
    ensure(report.failures.is_empty(), || format!("{} failures", report.failures.len()))?;
    for kind in [
        CheckKind::CompositionalBound,
        CheckKind::FanoMap,
        CheckKind::FanoRandomDecoder,
        CheckKind::ChainRule,
        CheckKind::Conditioning,
    ] {
        let slack = report.min_slack.get(&kind).copied().ok_or(format!("{kind:?} never checked"))?;
        ensure(slack >= -1e-9, || format!("{kind:?} min slack {slack}"))?;
    }
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{} checks, 0 failures, {:.2}s", report.checks_run, elapsed.as_secs_f64()))
}

fn anchors() -> Outcome {
    let mi = exact_mi(&DiscreteJoint::from_rows(&[vec![0.4, 0.1], vec![0.1, 0.4]]).map_err(|e| e.to_string())?);
    ensure((mi - 0.192_745).abs() <= 1e-6, || format!("exact_mi = {mi}"))?;
    let hb = binary_entropy_nats(0.5).map_err(|e| e.to_string())?;
    ensure((hb - std::f64::consts::LN_2).abs() <= 1e-12, || format!("H_b(0.5) = {hb}"))?;
    let exact = BoundConfig { log_base: LogBase::Nat, include_vocab_gap_term: true, ..BoundConfig::default() };
    let simple = BoundConfig::default();
    for cfg in [exact, simple] {
        let b = fano_token_bound(1.0, 1001, &cfg, None).map_err(|e| e.to_string())?;
        let want = if cfg.include_vocab_gap_term { 1001f64.ln() } else { 1000f64.ln() };
        ensure((b - want).abs() <= 1e-12, || format!("fano_token_bound(1, 1001) = {b}, want {want}"))?;
    }
    Ok(format!("MI {mi:.9}, H_b(0.5) = ln 2, bound(1, 1001) = ln 1000 (large-|V| form)"))
}

fn gradient_check() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for inst in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let vocab = rng.random_range(2..=9);
        let dim = rng.random_range(1..=7);
        let m = rng.random_range(1..=6);
        let mut probe = LinearProbe::init(dim, vocab, WeightInit::ScaledGaussian, inst).map_err(|e| e.to_string())?;
        probe.bias = Array1::from_shape_simple_fn(vocab, || rng.random_range(-1.0..1.0));
        let inputs = Array2::from_shape_simple_fn((m, dim), || rng.random_range(-2.0..2.0));
        let targets = (0..m).map(|_| rng.random_range(0..vocab as u32)).collect();
        let batch = ProbeBatch::new(inputs, targets).map_err(|e| e.to_string())?;
        let g = probe.loss_and_grad(&batch).map_err(|e| e.to_string())?;

        let h = 1e-5;
        let loss = |p: &LinearProbe| p.loss_and_grad(&batch).map(|g| g.loss).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for v in 0..vocab {
            for k in 0..dim {
                let mut plus = probe.clone();
                plus.weights[[v, k]] += h;
                let mut minus = probe.clone();
                minus.weights[[v, k]] -= h;
                numeric.push((loss(&plus) - loss(&minus)) / (2.0 * h));
                analytic.push(g.grad_weights[[v, k]]);
            }
            let mut plus = probe.clone();
            plus.bias[v] += h;
            let mut minus = probe.clone();
            minus.bias[v] -= h;
            numeric.push((loss(&plus) - loss(&minus)) / (2.0 * h));
            analytic.push(g.grad_bias[v]);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    let elapsed = started.elapsed();
    ensure(worst < 1e-4, || format!("worst relative error {worst:e}"))?;
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("100 instances, worst relative error {worst:.2e}, {:.2}s", elapsed.as_secs_f64()))
}

fn probe_convergence() -> Outcome {
    let vocab = 64;
    let records = synth::separable_corpus(vocab, 2000, (5, 15), 0.01, 11).map_err(|e| e.to_string())?;

    let zero = LinearProbe::init(vocab, vocab, WeightInit::Zeros, 0).map_err(|e| e.to_string())?;
    let batch = ProbeBatch::from_records(&records[..32], vocab).map_err(|e| e.to_string())?;
    let loss = zero.loss_and_grad(&batch).map_err(|e| e.to_string())?.loss;
    let want = batch.len() as f64 * vocab as f64 * std::f64::consts::LN_2;
    ensure((loss - want).abs() <= 1e-6 * want, || format!("zero-init loss {loss}, want {want}"))?;

    let config = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let (_, report) = train_probe(&records, vocab, &config).map_err(|e| e.to_string())?;
    let p = report.final_validation_recoverability.ok_or("no validation split")?;
    ensure(p >= 0.99, || format!("held-out p_rec {p} after {} epochs", report.epochs_run))?;
    Ok(format!("held-out p_rec {p:.4} after {} epochs; zero-init loss = m|V|ln2", report.epochs_run))
}

fn metric_equivalence() -> Outcome {
    let (a, b, c, d) = (0, 1, 2, 3);
    let third = 2.0 / 3.0;
    let exact = [
        ("token_f1", token_f1(&[a, b, b], &[a, b, c])),
        ("bleu_1", bleu_n(&[a, b, a], &[a, b, c], BleuOrder::One)),
        ("rouge_l", rouge_l(&[a, b, d], &[a, b, c])),
    ];
    for (name, v) in exact {
        let v = v.map_err(|e| e.to_string())?;
        ensure((v - third).abs() <= f64::EPSILON, || format!("{name} anchor = {v}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let vocab = rng.random_range(1..=50u32);
        let lp = rng.random_range(0..=30);
        let lr = rng.random_range(1..=30);
        let pred: Vec<u32> = (0..lp).map(|_| rng.random_range(0..vocab)).collect();
        let reference: Vec<u32> = (0..lr).map(|_| rng.random_range(0..vocab)).collect();
        let pairs = [
            (token_f1(&pred, &reference), naive::token_f1(&pred, &reference)),
            (rouge_1(&pred, &reference), naive::token_f1(&pred, &reference)),
            (rouge_l(&pred, &reference), naive::rouge_l(&pred, &reference)),
            (bleu_n(&pred, &reference, BleuOrder::One), naive::bleu(&pred, &reference, 1)),
            (bleu_n(&pred, &reference, BleuOrder::Two), naive::bleu(&pred, &reference, 2)),
            (bleu_n(&pred, &reference, BleuOrder::Four), naive::bleu(&pred, &reference, 4)),
        ];
        for (got, want) in pairs {
            let got = got.map_err(|e| e.to_string())?;
            worst = worst.max((got - want).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("anchors exact, 10^4 random pairs, max deviation {worst:.1e}"))
}

fn random_records(rng: &mut ChaCha8Rng, count: usize, vocab: u32, dim: usize) -> Vec<SentenceRecord> {
    (0..count as u64)
        .map(|id| {
            let n = rng.random_range(1..=12);
            let tokens = (0..n).map(|_| rng.random_range(0..vocab)).collect();
            let emb = (0..n * dim)
                .map(|_| loop {
                    let v = f32::from_bits(rng.random());
                    if v.is_finite() {
                        break v;
                    }
                })
                .collect();
            SentenceRecord::new(id, tokens, emb, dim).unwrap()
        })
        .collect()
}

fn dump_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (vocab, dim) = (300u32, 6usize);
    let records = random_records(&mut rng, 1000, vocab, dim);
    let header = DumpHeader::new(vocab, dim as u32, 3);
    let mut bytes = Vec::new();
    write_dump(&records, &header, &mut bytes).map_err(|e| e.to_string())?;
    let back: Vec<SentenceRecord> =
        read_dump(bytes.as_slice()).map_err(|e| e.to_string())?.collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    ensure(back.len() == records.len(), || "record count changed".into())?;
    for (x, y) in records.iter().zip(&back) {
        let bits = |r: &SentenceRecord| r.embeddings.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(x.tokens == y.tokens && bits(x) == bits(y), || format!("record {} differs", x.id))?;
    }
    ensure(validate_dump(bytes.as_slice()).map_err(|e| e.to_string())?.passed(), || "clean dump flagged".into())?;

    // byte offset of record `k`
    let offset = |k: usize| {
        HEADER_LEN as usize + records[..k].iter().map(|r| 4 + 4 * r.len() + 4 * r.embeddings.len()).sum::<usize>()
    };
    let detect = |bytes: &[u8], kind: ViolationKind, record: u64| -> Result<(), String> {
        let rep = validate_dump(bytes).map_err(|e| e.to_string())?;
        ensure(rep.violations.iter().any(|v| v.kind == kind && v.record == record), || {
            format!("{kind:?} at record {record} not reported: {:?}", rep.violations)
        })
    };

    let k = 417;
    let mut nan = bytes.clone();
    let at = offset(k) + 4 + 4 * records[k].len() + 4 * 3;
    nan[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    detect(&nan, ViolationKind::NonFinite, k as u64)?;

    let k = 802;
    let mut overflow = bytes.clone();
    let at = offset(k) + 4;
    overflow[at..at + 4].copy_from_slice(&vocab.to_le_bytes());
    detect(&overflow, ViolationKind::TokenOutOfRange, k as u64)?;

    let truncated = &bytes[..offset(999) + 10];
    detect(truncated, ViolationKind::Truncated, 999)?;
    Ok("1000 records bit-exact; NaN, id overflow and truncation detected at their records".into())
}

fn layer_sweep_shape() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let vocab = 16;
    let family = synth::layer_family(vocab, 600, (4, 10), &[1.0, 0.05, 1.0], 7).map_err(|e| e.to_string())?;
    let mut args = vec!["layer-sweep".to_string()];
    for (k, recs) in family.iter().enumerate() {
        let p = write_dump_file(dir.path(), &format!("layer{k}.mipd"), recs, vocab as u32, k as u16, "synthetic");
        args.extend(["--dump".to_string(), path_str(&p).to_string()]);
    }
    let out = dir.path().join("sweep.csv");
    args.extend(["--format", "csv", "--epochs", "5", "--lr", "0.01", "--seed", "0", "--out", path_str(&out)].map(String::from));
    let res = common::tokenmi().args(&args).output().map_err(|e| e.to_string())?;
    ensure(res.status.success(), || String::from_utf8_lossy(&res.stderr).into_owned())?;

    let mut reader = csv::Reader::from_path(&out).map_err(|e| e.to_string())?;
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let col = headers.iter().position(|h| h == "token_f1").ok_or("no token_f1 column")?;
    let f1: Vec<f64> = reader
        .records()
        .map(|r| r.map_err(|e| e.to_string()).and_then(|r| r[col].parse::<f64>().map_err(|e| e.to_string())))
        .collect::<Result<_, _>>()?;
    ensure(f1.len() == 3, || format!("{} rows", f1.len()))?;
    ensure(f1[1] > f1[0] && f1[1] > f1[2], || format!("token F1 by layer {f1:?}"))?;
    Ok(format!("token F1 by layer {:.3} < {:.3} > {:.3}", f1[0], f1[1], f1[2]))
}

fn check(name: &str, f: impl FnOnce() -> Outcome + UnwindSafe) -> bool {
    let outcome = catch_unwind(f).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    match outcome {
        Ok(detail) => {
            println!("PASS  {name}: {detail}");
            true
        }
        Err(why) => {
            println!("FAIL  {name}: {why}");
            false
        }
    }
}

fn main() {
    let results = [
        check("oracle bound suite (seed 0, 1000 trials)", oracle_suite),
        check("hand-computed anchors", anchors),
        check("gradient check vs central differences", gradient_check),
        check("probe convergence on separable corpus", probe_convergence),
        check("metric oracle equivalence", metric_equivalence),
        check("dump round-trip and fault detection", dump_round_trip),
        check("layer-sweep inverted-U shape", layer_sweep_shape),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
