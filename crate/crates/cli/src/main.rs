//! `casematch` command-line driver.
//!
//! Every output file starts with provenance (config hash and seed): `#` lines for
//! JSONL and CSV, a `provenance` object for JSON. Failures print one JSON line
//! `{"error": kind, "message": ...}` on stderr and exit nonzero.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use casematch::checkpoint::{Checkpoint, ModelKind};
use casematch::config::{config_hash, InputMode, TrainConfig};
use casematch::data::{generate_synthetic_corpus, load_jsonl, mask_alignments, save_jsonl, SyntheticConfig};
use casematch::extract::export_alignment_heatmap;
use casematch::io::{provenance_header, write_atomic};
use casematch::iot::{trace_to_csv, train_extractor};
use casematch::matching::{matcher_trace_to_csv, train_matcher};
use casematch::metrics::MetricsReport;
use casematch::pipeline::{
    evaluate_predictions, extract_corpus, extract_pair, matcher_examples, predict_pairs, score_extractions, sweep_csv, sweep_labels,
    PairPrediction, SWEEP_RATIOS,
};
use casematch::types::CasePairRecord;

#[derive(Parser)]
#[command(name = "casematch", version, about = "Rationale alignment and explainable case matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted synthetic corpus as JSONL.
    Generate(GenerateArgs),
    /// Train the stage-1 rationale extractor.
    TrainExtract(TrainExtractArgs),
    /// Run a trained extractor over a corpus.
    Extract(ExtractArgs),
    /// Train the stage-3 matcher on stage-1 extractions.
    TrainMatch(TrainMatchArgs),
    /// Predict match labels and explanations.
    Predict(PredictArgs),
    /// Score predictions against the gold labels of a corpus.
    Eval(EvalArgs),
    /// Train the extractor at several alignment-label ratios and seeds.
    SweepLabels(SweepArgs),
    /// Dump the transport plan of one pair and its thresholded alignments.
    Heatmap(HeatmapArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Planted,
}

/// Hyper-parameter overrides shared by the training commands.
#[derive(Args, Clone)]
struct HyperArgs {
    /// Base configuration the other flags override.
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    gamma3: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Epochs of the stage being trained.
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate of the stage being trained.
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size of the stage being trained.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    input_mode: Option<InputMode>,
}

#[derive(Clone, Copy)]
enum Stage {
    Extract,
    Match,
}

impl HyperArgs {
    fn base(&self) -> TrainConfig {
        match self.preset {
            Preset::Default => TrainConfig::default(),
            Preset::Planted => TrainConfig::planted(),
        }
    }

    fn apply(&self, mut c: TrainConfig, stage: Stage) -> TrainConfig {
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(c.seed, self.seed);
        set!(c.gamma, self.gamma);
        set!(c.gamma1, self.gamma1);
        set!(c.gamma2, self.gamma2);
        set!(c.gamma3, self.gamma3);
        set!(c.epsilon, self.epsilon);
        set!(c.tau, self.tau);
        set!(c.input_mode, self.input_mode);
        match stage {
            Stage::Extract => {
                set!(c.epochs1, self.epochs);
                set!(c.eta1, self.lr);
                set!(c.batch1, self.batch);
            }
            Stage::Match => {
                set!(c.epochs3, self.epochs);
                set!(c.eta3, self.lr);
                set!(c.batch3, self.batch);
            }
        }
        c
    }
}

fn parse_mode(s: &str) -> Result<InputMode, String> {
    InputMode::parse(s).ok_or_else(|| {
        let known: Vec<&str> = InputMode::ALL.iter().map(|m| m.as_str()).collect();
        format!("unknown input mode `{s}`, expected one of {}", known.join(", "))
    })
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Standard deviation of the per-sentence embedding noise.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
}

#[derive(Args)]
struct TrainExtractArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; the loss trace goes to `<stem>.loss.csv` beside it.
    #[arg(long)]
    out: PathBuf,
    /// Fraction of alignment labels kept for training.
    #[arg(long, default_value_t = 1.0)]
    label_ratio: f64,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct TrainMatchArgs {
    #[arg(long)]
    data: PathBuf,
    /// Stage-1 checkpoint used to extract rationales.
    #[arg(long)]
    extractor: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    extractor: PathBuf,
    #[arg(long)]
    matcher: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
    /// Label ratios, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_RATIOS.to_vec())]
    ratios: Vec<f64>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Plan CSV path; the thresholded matrix goes to `<stem>.aligned.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Pair id; defaults to the first record.
    #[arg(long)]
    pair: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
}

/// Failure reported as a single JSON line.
struct Failure {
    kind: &'static str,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, message: impl Display) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }
}

impl From<casematch::Error> for Failure {
    fn from(e: casematch::Error) -> Self {
        Failure::new(e.kind(), e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::new("json", e)
    }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Provenance {
    command: String,
    config_hash: String,
    seed: u64,
}

impl Provenance {
    fn of(command: &str, config: &TrainConfig) -> Self {
        Self {
            command: command.into(),
            config_hash: config.hash(),
            seed: config.seed,
        }
    }

    fn header(&self) -> String {
        provenance_header(&self.command, &self.config_hash, self.seed)
    }
}

#[derive(Serialize, Deserialize)]
struct PredictionFile {
    provenance: Provenance,
    predictions: Vec<PairPrediction>,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            report_failure(&Failure::new("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            report_failure(&f);
            ExitCode::FAILURE
        }
    }
}

fn report_failure(f: &Failure) {
    eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
}

fn run(command: Command) -> CliResult<serde_json::Value> {
    match command {
        Command::Generate(a) => generate(a),
        Command::TrainExtract(a) => train_extract(a),
        Command::Extract(a) => extract(a),
        Command::TrainMatch(a) => train_match(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::SweepLabels(a) => sweep(a),
        Command::Heatmap(a) => heatmap(a),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// `<stem><suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn load_data(path: &Path) -> CliResult<Vec<CasePairRecord>> {
    if !path.exists() {
        return Err(Failure::new("io", format!("data file {} does not exist", path.display())));
    }
    let records = load_jsonl(path)?;
    if records.is_empty() {
        return Err(Failure::new("empty_input", format!("{} holds no records", path.display())));
    }
    Ok(records)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(Failure::new("io", format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

/// Embedding width of the corpus; the extractor shapes follow it.
fn with_data_dim(mut config: TrainConfig, records: &[CasePairRecord]) -> TrainConfig {
    config.arch.embed_dim = records[0].x.dim();
    config
}

fn check_dim(config: &TrainConfig, records: &[CasePairRecord]) -> CliResult<()> {
    let d = records[0].x.dim();
    if d != config.arch.embed_dim {
        return Err(Failure::new(
            "dimension_mismatch",
            format!("data embeddings have width {d}, model expects {}", config.arch.embed_dim),
        ));
    }
    Ok(())
}

fn with_tau(mut config: TrainConfig, tau: Option<f64>) -> CliResult<TrainConfig> {
    if let Some(t) = tau {
        config.tau = t;
    }
    config.validate()?;
    Ok(config)
}

fn generate(a: GenerateArgs) -> CliResult<serde_json::Value> {
    let config = SyntheticConfig {
        pairs: a.pairs,
        dim: a.dim,
        noise_scale: a.noise,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    let records = generate_synthetic_corpus(&config)?;
    let header = provenance_header("generate", &config_hash(&config), config.seed);
    save_jsonl(&records, &a.out, &header)?;
    Ok(json!({ "command": "generate", "pairs": records.len(), "out": path_str(&a.out) }))
}

fn train_extract(a: TrainExtractArgs) -> CliResult<serde_json::Value> {
    let records = load_data(&a.data)?;
    let config = with_data_dim(a.hyper.apply(a.hyper.base(), Stage::Extract), &records);
    config.validate()?;
    let masked = mask_alignments(&records, a.label_ratio, config.seed)?;
    let (params, trace) = train_extractor(&masked, &config)?;
    Checkpoint::new(ModelKind::Extractor, &params, &config).save(&a.out)?;
    let prov = Provenance::of("train-extract", &config);
    let loss = sibling(&a.out, ".loss.csv");
    write_atomic(&loss, format!("{}{}", prov.header(), trace_to_csv(&trace)).as_bytes())?;
    let last = trace.last().map(|e| e.losses.total);
    Ok(json!({
        "command": "train-extract",
        "checkpoint": path_str(&a.out),
        "loss_csv": path_str(&loss),
        "final_loss": last,
    }))
}

#[derive(Serialize)]
struct ExtractionLine<'a> {
    id: &'a str,
    labels_x: &'a [casematch::RationaleKind],
    labels_y: &'a [casematch::RationaleKind],
    #[serde(flatten)]
    extraction: &'a casematch::ExtractionResult,
}

fn extract(a: ExtractArgs) -> CliResult<serde_json::Value> {
    let records = load_data(&a.data)?;
    let ckpt = load_checkpoint(&a.model)?;
    let params = ckpt.extractor()?;
    let config = with_tau(ckpt.config.clone(), a.tau)?;
    check_dim(&config, &records)?;
    let extractions = extract_corpus(&params, &records, &config)?;
    let mut out = Provenance::of("extract", &config).header();
    for (r, e) in records.iter().zip(&extractions) {
        let line = ExtractionLine {
            id: &r.id,
            labels_x: &e.labels_x,
            labels_y: &e.labels_y,
            extraction: &e.extraction,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    write_atomic(&a.out, out.as_bytes())?;
    let gold = records
        .iter()
        .all(|r| r.x.rationale_labels.is_some() && r.y.rationale_labels.is_some());
    let metrics = if gold {
        Some(score_extractions(&records, &extractions)?)
    } else {
        None
    };
    Ok(json!({ "command": "extract", "out": path_str(&a.out), "metrics": metrics }))
}

fn train_match(a: TrainMatchArgs) -> CliResult<serde_json::Value> {
    let records = load_data(&a.data)?;
    let ckpt = load_checkpoint(&a.extractor)?;
    let extractor = ckpt.extractor()?;
    let config = a.hyper.apply(ckpt.config.clone(), Stage::Match);
    config.validate()?;
    check_dim(&config, &records)?;
    let extractions = extract_corpus(&extractor, &records, &config)?;
    let examples = matcher_examples(&records, &extractions, config.input_mode)?;
    let (params, trace) = train_matcher(&examples, &config)?;
    Checkpoint::new(ModelKind::Matcher, &params, &config).save(&a.out)?;
    let prov = Provenance::of("train-match", &config);
    let loss = sibling(&a.out, ".loss.csv");
    write_atomic(&loss, format!("{}{}", prov.header(), matcher_trace_to_csv(&trace)).as_bytes())?;
    Ok(json!({
        "command": "train-match",
        "checkpoint": path_str(&a.out),
        "loss_csv": path_str(&loss),
        "input_mode": config.input_mode.as_str(),
    }))
}

fn predict(a: PredictArgs) -> CliResult<serde_json::Value> {
    let records = load_data(&a.data)?;
    let extractor = load_checkpoint(&a.extractor)?.extractor()?;
    let mckpt = load_checkpoint(&a.matcher)?;
    let matcher = mckpt.matcher()?;
    let config = with_tau(mckpt.config.clone(), a.tau)?;
    check_dim(&config, &records)?;
    let extractions = extract_corpus(&extractor, &records, &config)?;
    let predictions = predict_pairs(&matcher, &records, &extractions, config.input_mode)?;
    let file = PredictionFile {
        provenance: Provenance::of("predict", &config),
        predictions,
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    write_atomic(&a.out, text.as_bytes())?;
    Ok(json!({ "command": "predict", "pairs": file.predictions.len(), "out": path_str(&a.out) }))
}

fn eval(a: EvalArgs) -> CliResult<serde_json::Value> {
    let records = load_data(&a.data)?;
    if !a.predictions.exists() {
        return Err(Failure::new(
            "io",
            format!("predictions file {} does not exist", a.predictions.display()),
        ));
    }
    let text = std::fs::read_to_string(&a.predictions).map_err(casematch::Error::from)?;
    let file: PredictionFile = serde_json::from_str(&text)?;
    let report = evaluate_predictions(&records, &file.predictions)?;
    let prov = Provenance {
        command: "eval".into(),
        ..file.provenance
    };
    let mut out = serde_json::to_string_pretty(&MetricsFile {
        provenance: &prov,
        report: &report,
    })?;
    out.push('\n');
    write_atomic(&a.out, out.as_bytes())?;
    Ok(json!({
        "command": "eval",
        "accuracy": report.accuracy,
        "f1": report.f1,
        "extraction_f1": report.extraction.as_ref().map(|e| e.f1),
        "out": path_str(&a.out),
    }))
}

fn sweep(a: SweepArgs) -> CliResult<serde_json::Value> {
    let records = load_data(&a.data)?;
    let config = with_data_dim(a.hyper.apply(a.hyper.base(), Stage::Extract), &records);
    config.validate()?;
    if a.seeds.is_empty() || a.ratios.is_empty() {
        return Err(Failure::new("invalid_config", "sweep needs at least one seed and one ratio"));
    }
    let rows = sweep_labels(&records, &config, &a.ratios, &a.seeds)?;
    let prov = Provenance::of("sweep-labels", &config);
    write_atomic(&a.out, format!("{}{}", prov.header(), sweep_csv(&rows)).as_bytes())?;
    Ok(json!({ "command": "sweep-labels", "rows": rows.len(), "out": path_str(&a.out) }))
}

fn heatmap(a: HeatmapArgs) -> CliResult<serde_json::Value> {
    let records = load_data(&a.data)?;
    let ckpt = load_checkpoint(&a.model)?;
    let params = ckpt.extractor()?;
    let config = with_tau(ckpt.config.clone(), a.tau)?;
    check_dim(&config, &records)?;
    let record = match &a.pair {
        Some(id) => records
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| Failure::new("empty_input", format!("no pair with id {id}")))?,
        None => &records[0],
    };
    let e = extract_pair(&params, record, &config)?;
    let prov = Provenance::of("heatmap", &config);
    let preamble = format!("{}# pair={}\n", prov.header(), record.id);
    let files = export_alignment_heatmap(&e.plan.plan, &e.labels_x, &e.labels_y, config.tau, &a.out, &preamble)?;
    Ok(json!({
        "command": "heatmap",
        "pair": record.id,
        "plan": path_str(&files.plan),
        "aligned": path_str(&files.aligned),
    }))
}
