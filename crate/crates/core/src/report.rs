//! Experiment drivers: per-domain tables, layer sweeps and length buckets.
//!
//! Each driver returns a plain serializable report. Row types are flat so the
//! CSV and JSON forms carry identical values.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bounds::{bound_report, empirical_token_entropy, estimate_delta, BoundConfig, BoundVariant, DeltaOrder, MIBoundReport};
use crate::corpus::{bucket_by_length, load_dump, manifest_path, read_manifest, BucketEdges, DumpHeader, Manifest, SentenceRecord};
use crate::metrics::{score_corpus, MetricReport};
use crate::probe::{predict_corpus, recoverability_from_predictions, split_indices, train_probe, LinearProbe, TrainConfig, TrainReport};
use crate::{Error, Result, TOOL_VERSION};

/// Where a dataset came from; embedded in every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputInfo {
    pub path: String,
    pub header: DumpHeader,
    pub manifest: Option<Manifest>,
}

/// A loaded dump ready for evaluation.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub info: InputInfo,
    pub records: Vec<SentenceRecord>,
}

impl Dataset {
    pub fn label(&self) -> String {
        match &self.info.manifest {
            Some(m) if !m.domain_tag.is_empty() => m.domain_tag.clone(),
            _ => self.info.path.clone(),
        }
    }
}

/// Output wrapper carrying provenance alongside the report body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub tool_version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputInfo>,
    pub report: T,
}

impl<T> Envelope<T> {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value, inputs: Vec<InputInfo>, report: T) -> Self {
        Envelope { tool_version: TOOL_VERSION.to_string(), command: command.to_string(), seed, config, inputs, report }
    }
}

/// Loads a dump and, when present, its manifest sidecar.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (header, records) = load_dump(path)?;
    let manifest = if manifest_path(path).exists() { Some(read_manifest(path)?) } else { None };
    Ok(Dataset { info: InputInfo { path: path.display().to_string(), header, manifest }, records })
}

/// Options shared by every evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub bounds: BoundConfig,
    /// Estimate Delta and emit a sentence bound.
    pub delta_order: Option<DeltaOrder>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub sentences: usize,
    pub positions: u64,
    pub metrics: MetricReport,
    pub bounds: MIBoundReport,
}

/// Recoverability, reconstruction metrics and MI bounds of `probe` on
/// `records`.
pub fn evaluate(probe: &LinearProbe, records: &[SentenceRecord], opts: &EvalOptions) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::Empty("no records to evaluate"));
    }
    let preds = predict_corpus(probe, records)?;
    let rec = recoverability_from_predictions(records, &preds)?;
    let refs: Vec<Vec<u32>> = records.iter().map(|r| r.tokens.clone()).collect();
    let metrics = score_corpus(&preds, &refs, None)?;
    let delta = opts.delta_order.map(|o| estimate_delta(records, o)).transpose()?;
    let h_emp = match opts.bounds.variant {
        BoundVariant::EmpiricalEntropy => Some(empirical_token_entropy(records)?),
        BoundVariant::UniformPrior => None,
    };
    let mut bounds = bound_report(&rec, probe.vocab_size() as u64, &opts.bounds, delta.as_ref(), h_emp)?;
    if records.iter().any(SentenceRecord::is_pooled) {
        bounds.caveats.push("mean-pooled embeddings: every position is decoded from the same vector (experimental)".into());
    }
    Ok(Evaluation { sentences: records.len(), positions: rec.total, metrics, bounds })
}

pub(crate) fn check_compatible(probe: &LinearProbe, ds: &Dataset) -> Result<()> {
    let h = &ds.info.header;
    if h.dim as usize != probe.dim() || h.vocab_size as usize != probe.vocab_size() {
        let probe_src = probe
            .trained_on
            .as_ref()
            .map(|m| format!("{}/{} layer {}", m.model_name, m.domain_tag, m.layer))
            .unwrap_or_else(|| "unknown".into());
        let dump_src = ds
            .info
            .manifest
            .as_ref()
            .map(|m| format!("{}/{} layer {}", m.model_name, m.domain_tag, m.layer))
            .unwrap_or_else(|| "no manifest".into());
        return Err(Error::DimensionMismatch(format!(
            "probe (|V|={}, d={}, trained on {probe_src}) does not fit {} (|V|={}, d={}, {dump_src})",
            probe.vocab_size(),
            probe.dim(),
            ds.info.path,
            h.vocab_size,
            h.dim
        )));
    }
    Ok(())
}

/// Flat row shared by the domain, layer and length tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub sentences: usize,
    pub p_rec: f64,
    pub token_bound: f64,
    pub cosine: Option<f64>,
    pub token_f1: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_4: f64,
    pub rouge_1: f64,
    pub rouge_l: f64,
}

impl MetricRow {
    fn from_eval(label: String, e: &Evaluation) -> Self {
        let m = &e.metrics;
        MetricRow {
            label,
            sentences: e.sentences,
            p_rec: e.bounds.p_rec,
            token_bound: e.bounds.token_bound,
            cosine: m.cosine,
            token_f1: m.token_f1,
            bleu_1: m.bleu_1,
            bleu_2: m.bleu_2,
            bleu_4: m.bleu_4,
            rouge_1: m.rouge_1,
            rouge_l: m.rouge_l,
        }
    }

    fn columns(&self) -> [(&'static str, f64); 8] {
        [
            ("p_rec", self.p_rec),
            ("token_bound", self.token_bound),
            ("token_f1", self.token_f1),
            ("bleu_1", self.bleu_1),
            ("bleu_2", self.bleu_2),
            ("bleu_4", self.bleu_4),
            ("rouge_1", self.rouge_1),
            ("rouge_l", self.rouge_l),
        ]
    }
}

/// Column names each row is best in (ties flag every maximal row).
pub fn best_flags(rows: &[MetricRow]) -> Vec<Vec<String>> {
    let mut flags = vec![Vec::new(); rows.len()];
    if rows.is_empty() {
        return flags;
    }
    for c in 0..rows[0].columns().len() {
        let best = rows.iter().map(|r| r.columns()[c].1).fold(f64::NEG_INFINITY, f64::max);
        for (i, r) in rows.iter().enumerate() {
            let (name, v) = r.columns()[c];
            if v == best {
                flags[i].push(name.to_string());
            }
        }
    }
    flags
}

/// Flat so it serializes to CSV unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub label: String,
    pub sentences: usize,
    pub p_rec: f64,
    pub token_bound: f64,
    pub cosine: Option<f64>,
    pub token_f1: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_4: f64,
    pub rouge_1: f64,
    pub rouge_l: f64,
    /// `;`-separated columns where this row is best.
    pub best: String,
}

impl DomainRow {
    fn new(m: MetricRow, best: String) -> Self {
        DomainRow {
            label: m.label,
            sentences: m.sentences,
            p_rec: m.p_rec,
            token_bound: m.token_bound,
            cosine: m.cosine,
            token_f1: m.token_f1,
            bleu_1: m.bleu_1,
            bleu_2: m.bleu_2,
            bleu_4: m.bleu_4,
            rouge_1: m.rouge_1,
            rouge_l: m.rouge_l,
            best,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub rows: Vec<DomainRow>,
    pub evaluations: Vec<Evaluation>,
}

/// One probe evaluated on several domain dumps.
pub fn domain_report(probe: &LinearProbe, datasets: &[Dataset], opts: &EvalOptions) -> Result<DomainReport> {
    if datasets.is_empty() {
        return Err(Error::Empty("no inputs"));
    }
    let mut rows = Vec::new();
    let mut evaluations = Vec::new();
    for ds in datasets {
        check_compatible(probe, ds)?;
        let e = evaluate(probe, &ds.records, opts)?;
        rows.push(MetricRow::from_eval(ds.label(), &e));
        evaluations.push(e);
    }
    let flags = best_flags(&rows);
    let rows = rows.into_iter().zip(flags).map(|(m, f)| DomainRow::new(m, f.join(";"))).collect();
    Ok(DomainReport { rows, evaluations })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: u16,
    pub normalized_depth: f64,
    pub sentences: usize,
    pub p_rec: f64,
    pub token_bound: f64,
    pub token_f1: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_4: f64,
    pub rouge_1: f64,
    pub rouge_l: f64,
    pub epochs_run: usize,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSweep {
    pub rows: Vec<LayerRow>,
    pub train_reports: Vec<TrainReport>,
}

/// Trains a fresh probe per layer (same config and seed) and evaluates it on
/// that layer's held-out sentences (all sentences when there is no split).
pub fn layer_sweep(layers: &[Dataset], train: &TrainConfig, opts: &EvalOptions) -> Result<LayerSweep> {
    if layers.is_empty() {
        return Err(Error::Empty("no inputs"));
    }
    check_same_family(layers)?;
    let mut order: Vec<&Dataset> = layers.iter().collect();
    order.sort_by_key(|d| d.info.header.layer);
    let max_layer = order.last().map_or(0, |d| d.info.header.layer);

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for ds in order {
        let vocab = ds.info.header.vocab_size as usize;
        let (probe, report) = train_probe(&ds.records, vocab, train)?;
        let (_, val_idx) = split_indices(ds.records.len(), train.validation_fraction, train.seed);
        let held_out: Vec<SentenceRecord> = if val_idx.is_empty() {
            ds.records.clone()
        } else {
            val_idx.iter().map(|&i| ds.records[i].clone()).collect()
        };
        let e = evaluate(&probe, &held_out, opts)?;
        let layer = ds.info.header.layer;
        let m = MetricRow::from_eval(String::new(), &e);
        rows.push(LayerRow {
            layer,
            normalized_depth: if max_layer == 0 { 0.0 } else { layer as f64 / max_layer as f64 },
            sentences: m.sentences,
            p_rec: m.p_rec,
            token_bound: m.token_bound,
            token_f1: m.token_f1,
            bleu_1: m.bleu_1,
            bleu_2: m.bleu_2,
            bleu_4: m.bleu_4,
            rouge_1: m.rouge_1,
            rouge_l: m.rouge_l,
            epochs_run: report.epochs_run,
            final_train_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        });
        reports.push(report);
    }
    Ok(LayerSweep { rows, train_reports: reports })
}

fn check_same_family(layers: &[Dataset]) -> Result<()> {
    let first = &layers[0];
    let mut seen = std::collections::BTreeSet::new();
    for ds in layers {
        let (a, b) = (&first.info.header, &ds.info.header);
        if a.vocab_size != b.vocab_size || ds.records.len() != first.records.len() {
            return Err(Error::InvalidArgument(format!(
                "{} and {} do not share a vocabulary and corpus",
                first.info.path, ds.info.path
            )));
        }
        if let (Some(ma), Some(mb)) = (&first.info.manifest, &ds.info.manifest) {
            if ma.model_name != mb.model_name || ma.domain_tag != mb.domain_tag {
                return Err(Error::InvalidArgument(format!(
                    "inconsistent manifests: {}/{} vs {}/{}",
                    ma.model_name, ma.domain_tag, mb.model_name, mb.domain_tag
                )));
            }
        }
        if !seen.insert(b.layer) {
            return Err(Error::InvalidArgument(format!("layer {} appears twice", b.layer)));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    pub lower: Option<usize>,
    pub upper: Option<usize>,
    pub count: usize,
    pub empty: bool,
    pub p_rec: Option<f64>,
    pub token_bound: Option<f64>,
    pub token_f1: Option<f64>,
    pub bleu_1: Option<f64>,
    pub bleu_2: Option<f64>,
    pub bleu_4: Option<f64>,
    pub rouge_1: Option<f64>,
    pub rouge_l: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthReport {
    pub edges: Vec<usize>,
    pub rows: Vec<BucketRow>,
}

/// Metrics per length bucket; empty buckets are flagged rather than fatal.
pub fn length_report(probe: &LinearProbe, ds: &Dataset, edges: &BucketEdges, opts: &EvalOptions) -> Result<LengthReport> {
    check_compatible(probe, ds)?;
    let mut rows = Vec::new();
    for b in bucket_by_length(&ds.records, edges) {
        let recs: Vec<SentenceRecord> = b.records.iter().map(|r| (*r).clone()).collect();
        let e = if recs.is_empty() { None } else { Some(evaluate(probe, &recs, opts)?) };
        let m = e.as_ref().map(|e| MetricRow::from_eval(b.label.clone(), e));
        rows.push(BucketRow {
            bucket: b.label.clone(),
            lower: b.range.map(|r| r.0),
            upper: b.range.map(|r| r.1),
            count: recs.len(),
            empty: recs.is_empty(),
            p_rec: m.as_ref().map(|m| m.p_rec),
            token_bound: m.as_ref().map(|m| m.token_bound),
            token_f1: m.as_ref().map(|m| m.token_f1),
            bleu_1: m.as_ref().map(|m| m.bleu_1),
            bleu_2: m.as_ref().map(|m| m.bleu_2),
            bleu_4: m.as_ref().map(|m| m.bleu_4),
            rouge_1: m.as_ref().map(|m| m.rouge_1),
            rouge_l: m.as_ref().map(|m| m.rouge_l),
        });
    }
    Ok(LengthReport { edges: edges.edges().to_vec(), rows })
}

/// Writes serializable rows as CSV with a header line.
pub fn write_csv_rows<W: Write, T: Serialize>(sink: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
