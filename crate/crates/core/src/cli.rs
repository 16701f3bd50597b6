//! `tokenmi` command-line interface.
//!
//! Exit codes: 0 success, 1 a check failed (oracle failures, dump
//! violations), 2 usage or runtime error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::bounds::{bound_report, estimate_delta, BoundConfig, BoundVariant, DeltaOrder, LogBase};
use crate::corpus::{open_dump, validate_dump, write_dump_file, BucketEdges, DumpHeader, Manifest};
use crate::oracle::{verify_bounds_with, TokenBoundFn};
use crate::probe::{recoverability, train_probe, LinearProbe, Optimizer, TrainConfig, WeightInit};
use crate::report::{
    domain_report, evaluate, layer_sweep, length_report, load_dataset, write_csv_rows, Dataset, Envelope, EvalOptions,
};
use crate::{synth, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "tokenmi", version, about = "Token recoverability probes and mutual-information bounds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a linear probe on a dump and save it.
    TrainProbe(TrainProbeArgs),
    /// Evaluate a probe on a dump: recoverability, metrics, bounds.
    EvalProbe(EvalProbeArgs),
    /// Evaluate one probe on several domain dumps.
    DomainReport(DomainReportArgs),
    /// Train and evaluate one probe per layer dump.
    LayerSweep(LayerSweepArgs),
    /// Metrics per sentence-length bucket.
    LengthReport(LengthReportArgs),
    /// Fano and compositional bounds from an accuracy or a probe.
    MiBound(MiBoundArgs),
    /// Check every inequality against exact values on random joints.
    OracleVerify(OracleVerifyArgs),
    /// Check a dump for format and content violations.
    ValidateDump(ValidateDumpArgs),
    /// Write a synthetic dump family with known structure.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LogBaseArg {
    Nat,
    Bit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Uniform,
    Empirical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DeltaArg {
    None,
    Unigram,
    Bigram,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Zeros,
    Gaussian,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    #[arg(long, value_enum, default_value_t = LogBaseArg::Nat)]
    pub log_base: LogBaseArg,
    #[arg(long, value_enum, default_value_t = VariantArg::Uniform)]
    pub bound_variant: VariantArg,
    /// Keep the `log|V| - log(|V|-1)` term in the uniform-prior bound.
    #[arg(long)]
    pub exact_gap: bool,
    /// Token-dependence model used to estimate Delta for the sentence bound.
    #[arg(long, value_enum, default_value_t = DeltaArg::Bigram)]
    pub delta: DeltaArg,
}

impl BoundArgs {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            bounds: BoundConfig {
                log_base: match self.log_base {
                    LogBaseArg::Nat => LogBase::Nat,
                    LogBaseArg::Bit => LogBase::Bit,
                },
                variant: match self.bound_variant {
                    VariantArg::Uniform => BoundVariant::UniformPrior,
                    VariantArg::Empirical => BoundVariant::EmpiricalEntropy,
                },
                include_vocab_gap_term: self.exact_gap,
            },
            delta_order: match self.delta {
                DeltaArg::None => None,
                DeltaArg::Unigram => Some(DeltaOrder::Unigram),
                DeltaArg::Bigram => Some(DeltaOrder::BigramMarkov),
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value_t = InitArg::Zeros)]
    pub init: InitArg,
    /// Fraction of sentences held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            learning_rate: self.lr,
            optimizer: match self.optimizer {
                OptimizerArg::Adam => Optimizer::Adam,
                OptimizerArg::Sgd => Optimizer::Sgd,
            },
            seed: self.seed,
            weight_init: match self.init {
                InitArg::Zeros => WeightInit::Zeros,
                InitArg::Gaussian => WeightInit::ScaledGaussian,
            },
            early_stop_patience: self.patience,
            validation_fraction: self.validation_fraction,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainProbeArgs {
    #[arg(long)]
    pub dump: PathBuf,
    /// Probe file to write; `<out>.json` holds its metadata.
    #[arg(long)]
    pub out: PathBuf,
    /// Training report path; defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalProbeArgs {
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub dump: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub bounds: BoundArgs,
}

#[derive(Debug, Args)]
pub struct DomainReportArgs {
    #[arg(long)]
    pub probe: PathBuf,
    /// One dump per domain (repeatable).
    #[arg(long = "dump")]
    pub dumps: Vec<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub bounds: BoundArgs,
}

#[derive(Debug, Args)]
pub struct LayerSweepArgs {
    /// One dump per layer (repeatable).
    #[arg(long = "dump")]
    pub dumps: Vec<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub bounds: BoundArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct LengthReportArgs {
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub dump: PathBuf,
    /// Ascending bucket edges, e.g. `0,50,100,300`.
    #[arg(long)]
    pub buckets: Option<String>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub bounds: BoundArgs,
}

#[derive(Debug, Args)]
pub struct MiBoundArgs {
    /// Token accuracy in [0, 1]; alternative to --probe/--dump.
    #[arg(long, conflicts_with_all = ["probe", "dump"], requires = "vocab_size")]
    pub p_rec: Option<f64>,
    #[arg(long)]
    pub vocab_size: Option<u64>,
    /// Mean sentence length for the sentence bound with --p-rec.
    #[arg(long, default_value_t = 1.0)]
    pub mean_len: f64,
    #[arg(long, requires = "dump")]
    pub probe: Option<PathBuf>,
    #[arg(long, requires = "probe")]
    pub dump: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub bounds: BoundArgs,
}

#[derive(Debug, Args)]
pub struct OracleVerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ValidateDumpArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Noisy one-hot embeddings, constant noise.
    Separable,
    /// Same as separable with a permuted embedding basis.
    Permuted,
    /// Noise grows with sentence length.
    Lengths,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::Separable)]
    pub kind: SynthKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 500)]
    pub sentences: usize,
    #[arg(long, default_value_t = 4)]
    pub min_len: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    /// Noise standard deviation (per-token slope for `lengths`).
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub layer: u16,
    #[arg(long, default_value = "synthetic")]
    pub domain: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `std::env::args` and runs; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::TrainProbe(a) => cmd_train(a),
        Command::EvalProbe(a) => cmd_eval(a),
        Command::DomainReport(a) => cmd_domain(a),
        Command::LayerSweep(a) => cmd_layers(a),
        Command::LengthReport(a) => cmd_lengths(a),
        Command::MiBound(a) => cmd_mi_bound(a),
        Command::OracleVerify(a) => oracle_verify(&a, &crate::oracle::exact_fano_bound),
        Command::ValidateDump(a) => cmd_validate(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Path { path: path.into(), source: e })
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => {
            let mut w = create(p)?;
            serde_json::to_writer_pretty(&mut w, value)?;
            writeln!(w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            serde_json::to_writer_pretty(&mut w, value)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

/// JSON writes the whole envelope. CSV writes `rows` and puts the envelope
/// minus the report body in `<out>.meta.json` (stderr without `--out`).
fn emit<T: Serialize, R: Serialize>(output: &OutputArgs, envelope: &Envelope<T>, rows: &[R]) -> Result<()> {
    match output.format {
        Format::Json => write_json(output.out.as_deref(), envelope),
        Format::Csv => {
            let meta = Envelope::new(
                &envelope.command,
                envelope.seed,
                envelope.config.clone(),
                envelope.inputs.clone(),
                serde_json::Value::Null,
            );
            let meta = Envelope { tool_version: envelope.tool_version.clone(), ..meta };
            match &output.out {
                Some(p) => {
                    write_csv_rows(create(p)?, rows)?;
                    write_json(Some(&meta_path(p)), &meta)?;
                }
                None => {
                    write_csv_rows(io::stdout().lock(), rows)?;
                    eprintln!("{}", serde_json::to_string(&meta)?);
                }
            }
            Ok(())
        }
    }
}

pub fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn report_path(probe: &Path) -> PathBuf {
    let mut s = probe.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

fn cmd_train(a: TrainProbeArgs) -> Result<i32> {
    let ds = load_dataset(&a.dump)?;
    let config = a.train.config();
    let (mut probe, report) = train_probe(&ds.records, ds.info.header.vocab_size as usize, &config)?;
    probe.trained_on = ds.info.manifest.clone();
    probe.save(&a.out)?;
    let path = a.report.unwrap_or_else(|| report_path(&a.out));
    let env = Envelope::new("train-probe", Some(config.seed), serde_json::to_value(&config)?, vec![ds.info], report);
    write_json(Some(&path), &env)?;
    Ok(0)
}

fn load_probe(path: &Path) -> Result<LinearProbe> {
    LinearProbe::load(path)
}

/// Training seed of a probe, recorded in evaluation outputs.
fn probe_seed(probe: &LinearProbe) -> Option<u64> {
    probe.config.as_ref().map(|c| c.seed)
}

fn cmd_eval(a: EvalProbeArgs) -> Result<i32> {
    let probe = load_probe(&a.probe)?;
    let ds = load_dataset(&a.dump)?;
    crate::report::check_compatible(&probe, &ds)?;
    let opts = a.bounds.options();
    let eval = evaluate(&probe, &ds.records, &opts)?;
    let config = json!({ "probe": a.probe.display().to_string(), "eval": opts });
    let env = Envelope::new("eval-probe", probe_seed(&probe), config, vec![ds.info], eval);
    match a.output.format {
        Format::Json => write_json(a.output.out.as_deref(), &env),
        Format::Csv => {
            let meta = Envelope::new("eval-probe", env.seed, env.config.clone(), env.inputs.clone(), &env.report.bounds);
            match &a.output.out {
                Some(p) => {
                    env.report.metrics.write_csv(create(p)?)?;
                    write_json(Some(&meta_path(p)), &meta)?;
                }
                None => {
                    env.report.metrics.write_csv(io::stdout().lock())?;
                    eprintln!("{}", serde_json::to_string(&meta)?);
                }
            }
            Ok(())
        }
    }?;
    Ok(0)
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<Dataset>> {
    paths.iter().map(|p| load_dataset(p)).collect()
}

fn cmd_domain(a: DomainReportArgs) -> Result<i32> {
    let probe = load_probe(&a.probe)?;
    let datasets = load_all(&a.dumps)?;
    let opts = a.bounds.options();
    let report = domain_report(&probe, &datasets, &opts)?;
    let config = json!({ "probe": a.probe.display().to_string(), "trained_on": probe.trained_on, "eval": opts });
    let inputs = datasets.into_iter().map(|d| d.info).collect();
    let rows = report.rows.clone();
    emit(&a.output, &Envelope::new("domain-report", probe_seed(&probe), config, inputs, report), &rows)?;
    Ok(0)
}

fn cmd_layers(a: LayerSweepArgs) -> Result<i32> {
    let datasets = load_all(&a.dumps)?;
    let train = a.train.config();
    let opts = a.bounds.options();
    let report = layer_sweep(&datasets, &train, &opts)?;
    let config = json!({ "train": train, "eval": opts });
    let inputs = datasets.into_iter().map(|d| d.info).collect();
    let rows = report.rows.clone();
    emit(&a.output, &Envelope::new("layer-sweep", Some(train.seed), config, inputs, report), &rows)?;
    Ok(0)
}

fn cmd_lengths(a: LengthReportArgs) -> Result<i32> {
    let probe = load_probe(&a.probe)?;
    let ds = load_dataset(&a.dump)?;
    let edges = match &a.buckets {
        Some(s) => BucketEdges::parse(s)?,
        None => BucketEdges::default(),
    };
    let opts = a.bounds.options();
    let report = length_report(&probe, &ds, &edges, &opts)?;
    for r in report.rows.iter().filter(|r| r.empty) {
        eprintln!("warning: bucket {} is empty", r.bucket);
    }
    let config = json!({ "probe": a.probe.display().to_string(), "buckets": edges.edges(), "eval": opts });
    let rows = report.rows.clone();
    emit(&a.output, &Envelope::new("length-report", probe_seed(&probe), config, vec![ds.info], report), &rows)?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct BoundRow {
    p_rec: f64,
    vocab_size: u64,
    token_bound: f64,
    mean_sentence_len: f64,
    delta: Option<f64>,
    sentence_bound: Option<f64>,
}

fn cmd_mi_bound(a: MiBoundArgs) -> Result<i32> {
    let opts = a.bounds.options();
    let mut seed = None;
    let (report, inputs) = match (a.p_rec, &a.probe, &a.dump) {
        (Some(p), _, _) => {
            let vocab = a.vocab_size.ok_or_else(|| Error::InvalidArgument("--vocab-size is required with --p-rec".into()))?;
            if opts.bounds.variant == BoundVariant::EmpiricalEntropy {
                return Err(Error::InvalidArgument("the empirical variant needs a corpus: use --probe and --dump".into()));
            }
            if !(a.mean_len.is_finite() && a.mean_len > 0.0) {
                return Err(Error::InvalidArgument("--mean-len must be positive".into()));
            }
            let n = a.mean_len.round().max(1.0) as u64;
            // a synthetic result carrying the aggregate accuracy and length
            let correct = (p * n as f64).round() as u64;
            let result = crate::probe::RecoverabilityResult {
                p_rec: p,
                correct,
                total: n,
                per_sentence: vec![crate::probe::SentenceAccuracy { id: 0, n: n as usize, correct: correct as usize, accuracy: p }],
                per_position: Vec::new(),
            };
            let mut report = bound_report(&result, vocab, &opts.bounds, None, None)?;
            report.mean_sentence_len = a.mean_len;
            let tb_nats = match opts.bounds.log_base {
                LogBase::Nat => report.token_bound,
                LogBase::Bit => report.token_bound * std::f64::consts::LN_2,
            };
            report.sentence_bound = Some(opts.bounds.log_base.from_nats(a.mean_len * tb_nats));
            report.caveats.retain(|c| c != crate::bounds::CAVEAT_NO_DELTA);
            report.caveats.push("Δ not supplied; sentence bound assumes Δ = 0 (independent tokens)".into());
            (report, Vec::new())
        }
        (None, Some(probe), Some(dump)) => {
            let probe = load_probe(probe)?;
            seed = probe_seed(&probe);
            let ds = load_dataset(dump)?;
            crate::report::check_compatible(&probe, &ds)?;
            let rec = recoverability(&probe, &ds.records)?;
            let delta = opts.delta_order.map(|o| estimate_delta(&ds.records, o)).transpose()?;
            let h = match opts.bounds.variant {
                BoundVariant::EmpiricalEntropy => Some(crate::bounds::empirical_token_entropy(&ds.records)?),
                BoundVariant::UniformPrior => None,
            };
            (bound_report(&rec, probe.vocab_size() as u64, &opts.bounds, delta.as_ref(), h)?, vec![ds.info])
        }
        _ => return Err(Error::InvalidArgument("give either --p-rec with --vocab-size, or --probe with --dump".into())),
    };
    let row = BoundRow {
        p_rec: report.p_rec,
        vocab_size: report.vocab_size,
        token_bound: report.token_bound,
        mean_sentence_len: report.mean_sentence_len,
        delta: report.delta,
        sentence_bound: report.sentence_bound,
    };
    let config = json!({ "eval": opts, "p_rec": a.p_rec, "vocab_size": a.vocab_size, "mean_len": a.mean_len });
    emit(&a.output, &Envelope::new("mi-bound", seed, config, inputs, report), &[row])?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct FailureRow {
    trial: u64,
    kind: String,
    lhs: f64,
    rhs: f64,
    slack: f64,
    detail: String,
}

/// Runs the oracle harness with `bound` as the token-bound formula under
/// test. Returns 1 and reports every failing table when any check fails.
pub fn oracle_verify(a: &OracleVerifyArgs, bound: TokenBoundFn) -> Result<i32> {
    let report = verify_bounds_with(a.seed, a.trials, bound)?;
    let code = if report.passed() { 0 } else { 1 };
    let config = json!({ "seed": a.seed, "trials": a.trials });
    let rows: Vec<FailureRow> = report
        .failures
        .iter()
        .map(|f| FailureRow {
            trial: f.trial,
            kind: format!("{:?}", f.outcome.kind),
            lhs: f.outcome.lhs,
            rhs: f.outcome.rhs,
            slack: f.outcome.slack,
            detail: f.outcome.detail.clone(),
        })
        .collect();
    eprintln!(
        "oracle-verify: {} trials, {} checks, {} failures",
        report.trials,
        report.checks_run,
        report.failures.len()
    );
    if let Some(f) = report.failures.first() {
        eprintln!("first failing table: {}", serde_json::to_string(&f.table)?);
    }
    emit(&a.output, &Envelope::new("oracle-verify", Some(a.seed), config, Vec::new(), report), &rows)?;
    Ok(code)
}

fn cmd_validate(a: ValidateDumpArgs) -> Result<i32> {
    let file = File::open(&a.dump).map_err(|e| Error::Path { path: a.dump.clone(), source: e })?;
    let report = validate_dump(io::BufReader::new(file))?;
    let code = if report.passed() { 0 } else { 1 };
    for v in &report.violations {
        eprintln!("{}: {v:?}", a.dump.display());
    }
    let config = json!({ "dump": a.dump.display().to_string() });
    let rows = report.violations.clone();
    emit(&a.output, &Envelope::new("validate-dump", None, config, Vec::new(), report), &rows)?;
    Ok(code)
}

fn cmd_synth(a: SynthArgs) -> Result<i32> {
    let range = (a.min_len, a.max_len);
    let records = match a.kind {
        SynthKind::Separable => synth::separable_corpus(a.vocab_size, a.sentences, range, a.noise, a.seed)?,
        SynthKind::Permuted => {
            let base = synth::separable_corpus(a.vocab_size, a.sentences, range, a.noise, a.seed)?;
            synth::permute_embedding_axes(&base, a.seed.wrapping_add(1))
        }
        SynthKind::Lengths => {
            synth::noisy_onehot_corpus(a.vocab_size, a.sentences, range, |n| a.noise * n as f64, a.seed)?
        }
    };
    let header = DumpHeader::new(a.vocab_size as u32, a.vocab_size as u32, a.layer);
    let manifest = Manifest::new("synthetic-onehot", a.domain.clone(), a.layer);
    let n = write_dump_file(&a.out, &records, &header, &manifest)?;
    // reopen to confirm the file parses
    open_dump(&a.out)?;
    eprintln!("wrote {} records ({n} bytes) to {}", records.len(), a.out.display());
    Ok(0)
}
