//! Command-line entry point wiring every pipeline stage.
//!
//! All randomness derives from `--seed`: each stage draws from its own
//! generator seeded with the global seed mixed with the stage name, so
//! adding or skipping a stage never shifts another stage's stream.
//! Checkpoints are written next to a `<checkpoint>.json` file holding the
//! model configuration needed to load them.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::{pairwise_accuracy, train_coherence, CoherenceConfig, CoherenceModel};
use crate::corpus::{
    self, generate_oracle_labels, io_err, load_corpus, read_labels, sample_coherence_triplet, tokenize,
    write_corpus, write_labels, CorpusError, Document, Record, Sentence, Vocabulary,
};
use crate::decode::{beam_search, lead3_decisions, read_summaries, write_summaries, SummaryRecord};
use crate::extractor::{pretrain, Extractor, ExtractorConfig, LabeledDocument};
use crate::numeric::{load_checkpoint, save_checkpoint, NumericError};
use crate::reinforce::{train_rnes, CoherenceScorer, RlConfig};
use crate::rouge::{combined_rouge, RewardWeights, RougeReport};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Parser)]
#[command(name = "rnes", version, about = "Extractive summarization trained with ROUGE and coherence rewards")]
struct Cli {
    /// Global seed; every stage derives its own generator from it.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads for batch gradients and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Clean a raw corpus and build its vocabulary.
    Preprocess(PreprocessArgs),
    /// Generate greedy oracle extraction labels.
    Label(LabelArgs),
    /// Train the coherence model on adjacent-sentence triplets.
    TrainCoherence(TrainCoherenceArgs),
    /// Supervised pretraining of the extractor on oracle labels.
    Pretrain(PretrainArgs),
    /// REINFORCE training of a pretrained extractor.
    TrainRnes(TrainRnesArgs),
    /// Write one summary per document.
    Summarize(SummarizeArgs),
    /// Mean ROUGE of a summary file against corpus highlights.
    Evaluate(EvaluateArgs),
    /// Coherence score of one sentence pair.
    ScoreCoherence(ScoreCoherenceArgs),
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = corpus::DEFAULT_VOCAB_SIZE)]
    vocab_size: usize,
    #[arg(long, default_value_t = corpus::DEFAULT_MAX_SENTENCES)]
    max_sentences: usize,
}

#[derive(Debug, Args)]
struct LabelArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = corpus::ORACLE_MAX_SELECTED)]
    max_selected: usize,
}

#[derive(Debug, Args)]
struct TrainCoherenceArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 3)]
    window: usize,
    #[arg(long, value_delimiter = ',', default_value = "128,256,512")]
    filters: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "512,256")]
    fc_units: Vec<usize>,
    #[arg(long, default_value_t = corpus::DEFAULT_MAX_LEN)]
    max_len: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Triplets sampled per document (default: one per adjacent pair).
    #[arg(long)]
    triplets_per_doc: Option<usize>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Label file from `label`; generated on the fly when omitted.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    embed_dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
    kernel_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "128,256,256")]
    kernel_filters: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    gru_hidden: usize,
    #[arg(long, default_value_t = 512)]
    doc_dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "512,256")]
    mlp_hidden: Vec<usize>,
    #[arg(long, default_value_t = corpus::DEFAULT_MAX_LEN)]
    max_len: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
}

#[derive(Debug, Args)]
struct TrainRnesArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    pretrain_checkpoint: PathBuf,
    /// Required unless `--lambda 0`.
    #[arg(long)]
    coherence_checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    #[arg(long, default_value_t = 0.001)]
    alpha: f64,
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    /// Width of the logged moving averages.
    #[arg(long, default_value_t = 100)]
    window: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Beam,
    Lead3,
}

#[derive(Debug, Args)]
struct SummarizeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Beam)]
    method: Method,
    /// Extractor checkpoint, required for beam search.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Vocabulary, required for beam search.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = crate::decode::DEFAULT_BEAM)]
    beam: usize,
    #[arg(long, default_value_t = crate::decode::DEFAULT_MAX_SELECTED)]
    max_selected: usize,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    reference: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreCoherenceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    first: String,
    #[arg(long)]
    second: String,
}

/// Model configuration stored beside a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", content = "config", rename_all = "snake_case")]
pub enum SavedConfig {
    Coherence(CoherenceConfig),
    Extractor(ExtractorConfig),
}

pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_model(checkpoint: &Path, config: &SavedConfig, params: &crate::numeric::ParamStore) -> Result<(), CliError> {
    save_checkpoint(params, checkpoint)?;
    let side = config_path(checkpoint);
    let json = serde_json::to_string_pretty(config).expect("configs serialize");
    std::fs::write(&side, json + "\n").map_err(io_err(&side))?;
    Ok(())
}

fn load_config(checkpoint: &Path) -> Result<SavedConfig, CliError> {
    let side = config_path(checkpoint);
    let text = std::fs::read_to_string(&side).map_err(io_err(&side))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: side,
        message: e.to_string(),
    })
}

pub fn load_extractor(checkpoint: &Path) -> Result<Extractor, CliError> {
    match load_config(checkpoint)? {
        SavedConfig::Extractor(c) => Ok(Extractor::from_params(c, load_checkpoint(checkpoint)?)?),
        SavedConfig::Coherence(_) => Err(CliError::Config {
            path: config_path(checkpoint),
            message: "expected an extractor checkpoint, found a coherence model".into(),
        }),
    }
}

pub fn load_coherence(checkpoint: &Path) -> Result<CoherenceModel, CliError> {
    match load_config(checkpoint)? {
        SavedConfig::Coherence(c) => Ok(CoherenceModel::from_params(c, load_checkpoint(checkpoint)?)?),
        SavedConfig::Extractor(_) => Err(CliError::Config {
            path: config_path(checkpoint),
            message: "expected a coherence checkpoint, found an extractor".into(),
        }),
    }
}

/// Generator for one pipeline stage: the global seed mixed with an FNV-1a
/// hash of the stage name.
pub fn stage_rng(seed: u64, stage: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Runs the command line `argv` (program name first), printing reports to
/// standard output. Returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run_with_output(argv, &mut std::io::stdout())
}

/// Like [`run`] with reports written to `out`.
pub fn run_with_output<I, T>(argv: I, out: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return 2;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(&cli, out)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    match &cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Label(a) => label(a),
        Command::TrainCoherence(a) => train_coherence_stage(a, cli.seed),
        Command::Pretrain(a) => pretrain_stage(a, cli.seed),
        Command::TrainRnes(a) => train_rnes_stage(a, cli.seed),
        Command::Summarize(a) => summarize(a),
        Command::Evaluate(a) => evaluate(a, out),
        Command::ScoreCoherence(a) => score_coherence(a, out),
    }
}

fn preprocess(a: &PreprocessArgs) -> Result<(), CliError> {
    let records = load_corpus(&a.input, a.max_sentences)?;
    let vocab = Vocabulary::build(records.iter(), a.vocab_size)?;
    write_corpus(&a.output, &records)?;
    vocab.save(&a.vocab)?;
    info!("preprocessed {} documents, vocabulary of {}", records.len(), vocab.len());
    Ok(())
}

/// Token-level view of a corpus; ids are irrelevant for labeling.
fn text_documents(records: &[Record]) -> Result<Vec<Document>, CliError> {
    let vocab = Vocabulary::specials_only();
    records
        .iter()
        .map(|r| Document::encode(r, &vocab, corpus::DEFAULT_MAX_LEN).map_err(CliError::from))
        .collect()
}

fn oracle_labels(docs: &[Document], max_selected: usize) -> Vec<(String, Vec<bool>)> {
    let weights = RewardWeights::default();
    docs.iter()
        .map(|d| {
            let l = generate_oracle_labels(d, |c, r| combined_rouge(c, r, weights), max_selected);
            (d.id.clone(), l.labels)
        })
        .collect()
}

fn label(a: &LabelArgs) -> Result<(), CliError> {
    let records = load_corpus(&a.corpus, usize::MAX)?;
    let docs = text_documents(&records)?;
    let labels = oracle_labels(&docs, a.max_selected);
    write_labels(&a.output, &labels)?;
    info!("labeled {} documents", labels.len());
    Ok(())
}

fn encode_all(records: &[Record], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Document>, CliError> {
    records
        .iter()
        .map(|r| Document::encode(r, vocab, max_len).map_err(CliError::from))
        .collect()
}

fn train_coherence_stage(a: &TrainCoherenceArgs, seed: u64) -> Result<(), CliError> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let records = load_corpus(&a.corpus, usize::MAX)?;
    let docs = encode_all(&records, &vocab, a.max_len)?;
    let mut rng = stage_rng(seed, "train-coherence");
    let mut triplets = Vec::new();
    for d in &docs {
        let k = a.triplets_per_doc.unwrap_or(d.len().saturating_sub(1));
        for _ in 0..k {
            if let Some(t) = sample_coherence_triplet(d, &mut rng) {
                triplets.push(t);
            }
        }
    }
    if triplets.is_empty() {
        return Err(CliError::Invalid(
            "no coherence triplets: documents need at least three sentences".into(),
        ));
    }
    let config = CoherenceConfig {
        vocab_size: vocab.len(),
        embed_dim: a.embed_dim,
        window: a.window,
        conv_filters: a.filters.clone(),
        fc_units: a.fc_units.clone(),
        max_len: a.max_len,
        lr: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
    };
    info!("training coherence model on {} triplets", triplets.len());
    let (model, _) = train_coherence(&triplets, config.clone(), &mut rng)?;
    info!("training pairwise accuracy {:.4}", pairwise_accuracy(&model, &triplets)?);
    save_model(&a.out, &SavedConfig::Coherence(config), &model.params)
}

fn pretrain_stage(a: &PretrainArgs, seed: u64) -> Result<(), CliError> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let records = load_corpus(&a.corpus, usize::MAX)?;
    let docs = encode_all(&records, &vocab, a.max_len)?;
    let labels = match &a.labels {
        Some(path) => read_labels(path)?,
        None => oracle_labels(&docs, corpus::ORACLE_MAX_SELECTED),
    };
    let by_id: HashMap<&str, &Vec<bool>> = labels.iter().map(|(id, l)| (id.as_str(), l)).collect();
    let mut data = Vec::with_capacity(docs.len());
    for doc in docs {
        let l = by_id
            .get(doc.id.as_str())
            .ok_or_else(|| CliError::Invalid(format!("no labels for document `{}`", doc.id)))?;
        if l.len() != doc.len() {
            return Err(CliError::Invalid(format!(
                "document `{}` has {} sentences but {} labels",
                doc.id,
                doc.len(),
                l.len()
            )));
        }
        data.push(LabeledDocument {
            labels: (*l).clone(),
            doc,
        });
    }
    let config = ExtractorConfig {
        vocab_size: vocab.len(),
        embed_dim: a.embed_dim,
        kernel_sizes: a.kernel_sizes.clone(),
        kernel_filters: a.kernel_filters.clone(),
        gru_hidden: a.gru_hidden,
        doc_dim: a.doc_dim,
        mlp_hidden: a.mlp_hidden.clone(),
        max_len: a.max_len,
        lr: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
    };
    let mut rng = stage_rng(seed, "pretrain");
    let (model, _) = pretrain(&data, config.clone(), &mut rng)?;
    save_model(&a.out, &SavedConfig::Extractor(config), &model.params)
}

/// Scores nothing; stands in when coherence rewards are disabled.
struct NoCoherence;

impl CoherenceScorer for NoCoherence {
    fn coherence(&self, _: &Sentence, _: &Sentence) -> Result<f64, NumericError> {
        Err(NumericError::Contract("coherence scored without a coherence model".into()))
    }
}

fn train_rnes_stage(a: &TrainRnesArgs, seed: u64) -> Result<(), CliError> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let mut model = load_extractor(&a.pretrain_checkpoint)?;
    let records = load_corpus(&a.corpus, usize::MAX)?;
    let docs = encode_all(&records, &vocab, model.config.max_len)?;
    let config = RlConfig {
        lambda: a.lambda,
        alpha: a.alpha,
        weights: RewardWeights::default(),
        steps: a.steps,
        window: a.window,
    };
    let mut rng = stage_rng(seed, "train-rnes");
    let log = match &a.coherence_checkpoint {
        Some(path) => {
            let coh = load_coherence(path)?;
            train_rnes(&mut model, &docs, &coh, &config, &mut rng)?
        }
        None if a.lambda == 0.0 => train_rnes(&mut model, &docs, &NoCoherence, &config, &mut rng)?,
        None => {
            return Err(CliError::Invalid(
                "--coherence-checkpoint is required when --lambda is not 0".into(),
            ))
        }
    };
    if let Some(avg) = log.moving_average(a.window) {
        info!("final moving-average objective {avg:.4}");
    }
    save_model(&a.out, &SavedConfig::Extractor(model.config.clone()), &model.params)
}

fn summarize(a: &SummarizeArgs) -> Result<(), CliError> {
    let records = load_corpus(&a.corpus, usize::MAX)?;
    let mut out = Vec::with_capacity(records.len());
    match a.method {
        Method::Lead3 => {
            for doc in text_documents(&records)? {
                out.push(SummaryRecord::new(&doc, &lead3_decisions(&doc))?);
            }
        }
        Method::Beam => {
            let (ckpt, vocab) = match (&a.checkpoint, &a.vocab) {
                (Some(c), Some(v)) => (c, v),
                _ => {
                    return Err(CliError::Invalid(
                        "beam search needs --checkpoint and --vocab".into(),
                    ))
                }
            };
            let model = load_extractor(ckpt)?;
            let vocab = Vocabulary::load(vocab)?;
            let docs = encode_all(&records, &vocab, model.config.max_len)?;
            use rayon::prelude::*;
            let decoded: Vec<Result<SummaryRecord, NumericError>> = docs
                .par_iter()
                .map(|doc| {
                    let d = beam_search(&model, doc, a.beam, a.max_selected)?;
                    SummaryRecord::new(doc, &d.decisions)
                })
                .collect();
            for r in decoded {
                out.push(r?);
            }
        }
    }
    write_summaries(&a.output, &out)?;
    info!("wrote {} summaries to {}", out.len(), a.output.display());
    Ok(())
}

/// Mean ROUGE of `system` summaries against the highlights of the matching
/// `reference` records.
pub fn evaluate_summaries(system: &[SummaryRecord], reference: &[Record]) -> Result<RougeReport, CliError> {
    let by_id: HashMap<&str, &Record> = reference.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut reports = Vec::with_capacity(system.len());
    for s in system {
        let r = by_id
            .get(s.id.as_str())
            .ok_or_else(|| CliError::Invalid(format!("no reference for document `{}`", s.id)))?;
        let cand: Vec<String> = s.summary.iter().flat_map(|t| tokenize(t)).collect();
        let refs: Vec<String> = r.highlights.iter().flat_map(|t| tokenize(t)).collect();
        reports.push(RougeReport::compute(&cand, &refs));
    }
    if reports.is_empty() {
        return Err(CliError::Invalid("no summaries to evaluate".into()));
    }
    Ok(RougeReport::mean(&reports))
}

pub fn format_report(report: &RougeReport, documents: usize) -> String {
    let mut s = format!("documents {documents}\n{:<8} {:>9} {:>9} {:>9}\n", "metric", "recall", "precision", "f1");
    for (name, r) in [
        ("ROUGE-1", report.rouge1),
        ("ROUGE-2", report.rouge2),
        ("ROUGE-L", report.rouge_l),
    ] {
        s += &format!("{name:<8} {:>9.4} {:>9.4} {:>9.4}\n", r.recall, r.precision, r.f1);
    }
    s
}

fn evaluate(a: &EvaluateArgs, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let system = read_summaries(&a.system)?;
    let reference = load_corpus(&a.reference, usize::MAX)?;
    let report = evaluate_summaries(&system, &reference)?;
    out.write_all(format_report(&report, system.len()).as_bytes())
        .map_err(|e| CliError::Invalid(format!("cannot write report: {e}")))
}

fn score_coherence(a: &ScoreCoherenceArgs, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let model = load_coherence(&a.checkpoint)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let len = model.config.max_len;
    let s = model.score_sentences(&Sentence::new(&a.first, &vocab, len), &Sentence::new(&a.second, &vocab, len))?;
    writeln!(out, "{s:.6}").map_err(|e| CliError::Invalid(format!("cannot write score: {e}")))
}
