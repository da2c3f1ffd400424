//! Command-line interface. Each command is a thin wrapper over the library.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use policyprobe_core::data::{sample_train_sets, LabeledExample};
use policyprobe_core::eval::{correlations, exemplar_severity_experiment, rank_mislabel_candidates, run_ablation_suite};
use policyprobe_core::optim::Adam;
use policyprobe_core::prompt::{Exemplar, HardPrompt, Spacing};
use policyprobe_core::scorer::{Scorer, ScorerConfig};
use policyprobe_core::synth::{synth_dataset, world_corpus, SynthConfig};
use policyprobe_core::tuner::{init_soft_prompt_with, tune_from, InitMode, SoftPrompt, TuneConfig, TuneError};
use policyprobe_core::FrozenModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{load_backbone, load_soft_prompt, save_backbone, save_soft_prompt};
use crate::config::{load_prompt, Config};
use crate::report::{ablation_text, eval_text, evaluate, f3, reference, roc_csv, table};
use crate::service::{self, App, ServiceOptions};
use crate::store::{ingest, to_examples, write_jsonl, Format, Record, Source, Store};
use crate::{fixture, store};

#[derive(Parser, Debug)]
#[command(name = "policyprobe", version, about = "Policy-violation detection by prompting a small frozen language model")]
pub struct Cli {
    /// Seed for randomized commands; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain a backbone on synthetic world documents.
    Pretrain(PretrainArgs),
    /// Tune a soft prompt on a labeled dataset.
    Tune(TuneArgs),
    /// Classify one comment: answer, explanation, citations, keywords and score.
    Classify(ClassifyArgs),
    /// Yes/No scores for a comment or a dataset.
    Score(ScoreArgs),
    /// Accuracy and AUC on a labeled dataset.
    Evaluate(EvaluateArgs),
    /// Run every prompt variant on a labeled dataset.
    Ablate(DatasetArgs),
    /// Count Yes answers with and without an extra exemplar.
    ExemplarExp(ExemplarArgs),
    /// Correlate scores with average rater ratings.
    Correlate(DatasetArgs),
    /// Examples whose rating disagrees most with the score.
    Mislabels(MislabelArgs),
    /// Validate a JSONL/CSV dataset and normalize it or add it to a store.
    Ingest(IngestArgs),
    /// Generate a synthetic labeled dataset or pretraining documents.
    Synth(SynthArgs),
    /// Balanced test split and size-graded training samples.
    Split(SplitArgs),
    /// Run the review workflow service.
    Serve(ServeArgs),
    /// Rewrite a store file without torn lines.
    Compact(CompactArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Backbone checkpoint (default: the config file's, then the bundled fixture).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Hard prompt JSON (default: the built-in desk prompt).
    #[arg(long)]
    pub prompt: Option<PathBuf>,
    #[arg(long)]
    pub soft_prompt: Option<PathBuf>,
    /// Leave the hard prompt out of the context.
    #[arg(long)]
    pub no_hard_prompt: bool,
    #[arg(long, value_enum)]
    pub spacing: Option<SpacingArg>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum SpacingArg {
    Spaced,
    Unspaced,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum InitArg {
    VocabCopy,
    Random,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum FormatArg {
    Jsonl,
    Csv,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Jsonl => Format::Jsonl,
            FormatArg::Csv => Format::Csv,
        }
    }
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// World documents to generate.
    #[arg(long, default_value_t = fixture::WORLD_DOCS)]
    pub docs: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seed for the world corpus (the global --seed drives training).
    #[arg(long, default_value_t = fixture::WORLD_SEED)]
    pub world_seed: u64,
    /// Pretraining settings as JSON; defaults to the fixture's.
    #[arg(long)]
    pub pretrain_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this soft prompt and its optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_prefix: Option<usize>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Evaluate on the held-out split every this many steps.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Share of the dataset held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub validation_frac: f64,
    /// Write the training log here as JSON.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub comment: String,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    pub comment: Option<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Decode full responses too (slower).
    #[arg(long)]
    pub decode: bool,
    /// Write ROC curve points as CSV.
    #[arg(long)]
    pub roc_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExemplarArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Exemplar JSON appended as the last exemplar.
    #[arg(long)]
    pub exemplar: PathBuf,
}

#[derive(Args, Debug)]
pub struct MislabelArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Append the records to this store (default: the config file's when
    /// --out is not given).
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Write the validated records as JSONL.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Dataset,
    Corpus,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "dataset")]
    pub kind: SynthKind,
    #[arg(long)]
    pub toxic_frac: Option<f64>,
    #[arg(long)]
    pub raters: Option<usize>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long, default_value_t = 500)]
    pub test_size: usize,
    /// Training sample sizes, ascending.
    #[arg(long, value_delimiter = ',', default_value = "50,100,200,500")]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lease_secs: Option<f64>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompactArgs {
    #[arg(long)]
    pub store: PathBuf,
}

/// Parse and run; returns the process exit code.
pub fn main_with_args<I: IntoIterator<Item = String>>(args: I) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Invalid flag combinations caught after parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

struct Ctx {
    config: Config,
    seed: Option<u64>,
    json: bool,
}

impl Ctx {
    fn seed(&self) -> Result<u64> {
        self.seed.or(self.config.seed).ok_or_else(|| usage("this command needs --seed or a seed in the config file"))
    }

    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) -> Result<()> {
        let mut out = std::io::stdout().lock();
        if self.json {
            serde_json::to_writer_pretty(&mut out, value)?;
            writeln!(out)?;
        } else {
            write!(out, "{}", text())?;
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    config.apply_env(|k| std::env::var(k).ok())?;
    let ctx = Ctx { config, seed: cli.seed, json: cli.json };
    match cli.command {
        Command::Pretrain(a) => pretrain(&ctx, a),
        Command::Tune(a) => tune(&ctx, a),
        Command::Classify(a) => classify(&ctx, a),
        Command::Score(a) => score(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
        Command::ExemplarExp(a) => exemplar_exp(&ctx, a),
        Command::Correlate(a) => correlate(&ctx, a),
        Command::Mislabels(a) => mislabels(&ctx, a),
        Command::Ingest(a) => ingest_cmd(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Split(a) => split(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
        Command::Compact(a) => compact(&ctx, a),
    }
}

/// Everything needed to score: backbone, hash, hard prompt, soft prompt.
struct Loaded {
    model: Arc<FrozenModel>,
    hash: String,
    prompt: HardPrompt,
    soft: Option<(SoftPrompt, Option<Adam>)>,
    scorer: ScorerConfig,
}

impl Loaded {
    fn soft(&self) -> Option<&SoftPrompt> {
        self.soft.as_ref().map(|(s, _)| s)
    }

    fn scorer(&self) -> Result<Scorer<Arc<FrozenModel>>> {
        Ok(Scorer::new(self.model.clone(), self.soft(), &self.prompt, self.scorer)?)
    }
}

fn load(ctx: &Ctx, a: &ModelArgs) -> Result<Loaded> {
    let path = a.model.clone().or_else(|| ctx.config.model.clone()).unwrap_or_else(fixture::backbone_path);
    let (model, hash) = load_backbone(&path)?;
    let mut prompt = load_prompt(a.prompt.as_deref().or(ctx.config.prompt.as_deref()))?;
    if let Some(s) = a.spacing {
        prompt = prompt.with_spacing(match s {
            SpacingArg::Spaced => Spacing::Spaced,
            SpacingArg::Unspaced => Spacing::Unspaced,
        });
    }
    let soft = match a.soft_prompt.as_deref().or(ctx.config.soft_prompt.as_deref()) {
        Some(p) => Some(load_soft_prompt(p, &hash)?),
        None => None,
    };
    let mut scorer = ctx.config.scorer;
    if a.no_hard_prompt {
        scorer.include_hard_prompt = false;
    }
    if let Some(n) = a.max_new_tokens {
        scorer.max_new_tokens = n;
    }
    Ok(Loaded { model: Arc::new(model), hash, prompt, soft, scorer })
}

fn read_dataset(path: &Path, format: Option<FormatArg>) -> Result<Vec<Record>> {
    let f = match format {
        Some(f) => f.into(),
        None => Format::from_path(path)?,
    };
    ingest(path, f)
}

fn pretrain(ctx: &Ctx, a: PretrainArgs) -> Result<()> {
    let seed = ctx.seed()?;
    let mut cfg = match &a.pretrain_config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => fixture::pretrain_config(),
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let corpus = world_corpus(a.docs, a.world_seed);
    let quiet = ctx.json;
    let mut progress = |p: &policyprobe_core::pretrain::PretrainProgress| {
        if !quiet && (p.heldout.is_some() || p.step.is_multiple_of(50)) {
            let held = p.heldout.map_or(String::new(), |h| format!(" heldout {h:.4}"));
            eprintln!("step {:>6} loss {:.4} lr {:.5}{held}", p.step, p.loss, p.lr);
        }
    };
    let (model, report) = policyprobe_core::pretrain::pretrain_backbone(&corpus, &cfg, seed, &mut progress)?;
    let hash = save_backbone(&model, &a.out)?;
    #[derive(Serialize)]
    struct Out<'a> {
        path: &'a Path,
        hash: &'a str,
        final_heldout: Option<f64>,
    }
    let final_heldout = report.heldout_loss.last().map(|&(_, l)| l);
    ctx.emit(&Out { path: &a.out, hash: &hash, final_heldout }, || format!("wrote {} (sha256 {hash})\n", a.out.display()))
}

fn tune(ctx: &Ctx, a: TuneArgs) -> Result<()> {
    let seed = ctx.seed()?;
    let mut m = a.model.clone();
    // The resumed prompt, not the configured one, is the starting point.
    m.soft_prompt = None;
    let loaded = load(ctx, &m)?;
    let mut cfg: TuneConfig = ctx.config.tune;
    cfg.seed = seed;
    cfg.include_hard_prompt = loaded.scorer.include_hard_prompt;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.n_prefix {
        cfg.n_prefix = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = a.init {
        cfg.init = match v {
            InitArg::VocabCopy => InitMode::VocabCopy,
            InitArg::Random => InitMode::Random,
        };
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if !(0.0..1.0).contains(&a.validation_frac) {
        return Err(usage("--validation-frac must be in [0, 1)"));
    }
    let data = to_examples(&read_dataset(&a.dataset, None)?);
    let (train, validation) = holdout(data, a.validation_frac, seed);
    let (soft, mut adam) = match &a.resume {
        Some(p) => {
            let (s, adam) = load_soft_prompt(p, &loaded.hash)?;
            let n = s.embeddings.len();
            (s, adam.unwrap_or_else(|| Adam::new(n)))
        }
        None => {
            let s = init_soft_prompt_with(&loaded.model, cfg.n_prefix, cfg.seed, cfg.init)?;
            let n = s.embeddings.len();
            (s, Adam::new(n))
        }
    };
    let quiet = ctx.json;
    let mut observe = |p: &policyprobe_core::tuner::TuneProgress| {
        if quiet {
            return;
        }
        if let Some(e) = p.eval {
            eprintln!("step {:>5} loss {:.4} validation balanced_acc {:.3} auc {:.3}", p.step, p.loss, e.balanced_acc, e.auc);
        } else if p.step.is_multiple_of(10) {
            eprintln!("step {:>5} loss {:.4} grad_norm {:.3}", p.step, p.loss, p.grad_norm);
        }
    };
    let t0 = std::time::Instant::now();
    let (soft, mut log) = match tune_from(&loaded.model, &loaded.prompt, &train, &validation, &cfg, soft, &mut adam, Some(&mut observe)) {
        Ok(r) => r,
        Err(TuneError::Diverged { step, last_good }) => {
            let keep = a.out.with_extension("last_good.bin");
            save_soft_prompt(&last_good, &loaded.hash, None, &keep)?;
            bail!("training diverged at step {step}; the last finite soft prompt is in {}", keep.display());
        }
        Err(TuneError::Core(e)) => return Err(e.into()),
    };
    log.wall_time_ms = Some(t0.elapsed().as_secs_f64() * 1e3);
    save_soft_prompt(&soft, &loaded.hash, Some(&adam), &a.out)?;
    if let Some(p) = &a.log {
        std::fs::write(p, serde_json::to_vec_pretty(&log)?)?;
    }
    #[derive(Serialize)]
    struct Out<'a> {
        out: &'a Path,
        step_count: u64,
        train: usize,
        validation: usize,
        final_loss: Option<f64>,
        evals: &'a [policyprobe_core::tuner::EvalPoint],
    }
    let out = Out { out: &a.out, step_count: soft.step_count, train: train.len(), validation: validation.len(), final_loss: log.losses.last().copied(), evals: &log.evals };
    ctx.emit(&out, || {
        let mut s = format!("wrote {} after {} steps on {} examples\n", a.out.display(), soft.step_count, train.len());
        if let Some(e) = log.evals.last() {
            s.push_str(&format!("validation balanced_acc {:.3} auc {:.3}\n", e.balanced_acc, e.auc));
        }
        s
    })
}

/// Seeded split off a validation share.
fn holdout(mut data: Vec<LabeledExample>, frac: f64, seed: u64) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    use rand::seq::SliceRandom;
    let k = (data.len() as f64 * frac).round() as usize;
    if k == 0 {
        return (data, Vec::new());
    }
    data.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let validation = data.split_off(data.len() - k);
    (data, validation)
}

fn classify(ctx: &Ctx, a: ClassifyArgs) -> Result<()> {
    let loaded = load(ctx, &a.model)?;
    let t0 = std::time::Instant::now();
    let mut c = loaded.scorer()?.classify(&a.comment)?;
    c.latency_ms = Some(t0.elapsed().as_secs_f64() * 1e3);
    // A classification is structured data, so JSON is the default output.
    serde_json::to_writer_pretty(std::io::stdout().lock(), &c)?;
    println!();
    Ok(())
}

#[derive(Serialize)]
struct ScoreRow {
    id: String,
    #[serde(flatten)]
    score: Option<policyprobe_core::scorer::ScoreResult>,
    error: Option<String>,
}

fn score(ctx: &Ctx, a: ScoreArgs) -> Result<()> {
    let loaded = load(ctx, &a.model)?;
    let scorer = loaded.scorer()?;
    let items: Vec<(String, String)> = match (&a.comment, &a.dataset) {
        (Some(c), _) => vec![("comment".into(), c.clone())],
        (None, Some(p)) => read_dataset(p, a.format)?.into_iter().map(|r| (r.id, r.text)).collect(),
        (None, None) => return Err(usage("give --comment or --dataset")),
    };
    let texts: Vec<&str> = items.iter().map(|(_, t)| t.as_str()).collect();
    let rows: Vec<ScoreRow> = scorer
        .batch_score(&texts)
        .into_iter()
        .zip(&items)
        .map(|(r, (id, _))| match r {
            Ok(s) => ScoreRow { id: id.clone(), score: Some(s), error: None },
            Err(e) => ScoreRow { id: id.clone(), score: None, error: Some(e.to_string()) },
        })
        .collect();
    ctx.emit(&rows, || {
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| match &r.score {
                Some(s) => vec![r.id.clone(), s.answer.to_string(), f3(s.score), f3(s.certainty), f3(s.mass), String::new()],
                None => vec![r.id.clone(), "-".into(), "-".into(), "-".into(), "-".into(), r.error.clone().unwrap_or_default()],
            })
            .collect();
        table(&["id", "answer", "score", "certainty", "mass", "error"], &body)
    })
}

fn evaluate_cmd(ctx: &Ctx, a: EvaluateArgs) -> Result<()> {
    let loaded = load(ctx, &a.data.model)?;
    let data = to_examples(&read_dataset(&a.data.dataset, a.data.format)?);
    let report = evaluate(&loaded.scorer()?, &data, a.decode)?;
    if let Some(p) = &a.roc_csv {
        std::fs::write(p, roc_csv(&report.roc))?;
    }
    ctx.emit(&report, || eval_text(&report))
}

fn ablate(ctx: &Ctx, a: DatasetArgs) -> Result<()> {
    let loaded = load(ctx, &a.model)?;
    let data = to_examples(&read_dataset(&a.dataset, a.format)?);
    let rows = run_ablation_suite(&loaded.model, loaded.soft(), &loaded.prompt, &data, loaded.scorer)?;
    #[derive(Serialize)]
    struct Out<'a> {
        rows: &'a [policyprobe_core::eval::AblationRow],
        reference: Vec<crate::report::ReferenceAblation>,
    }
    ctx.emit(&Out { rows: &rows, reference: reference().ablation }, || ablation_text(&rows))
}

fn exemplar_exp(ctx: &Ctx, a: ExemplarArgs) -> Result<()> {
    let loaded = load(ctx, &a.data.model)?;
    let extra: Exemplar = serde_json::from_str(&std::fs::read_to_string(&a.exemplar)?).with_context(|| format!("parsing {}", a.exemplar.display()))?;
    let comments: Vec<String> = read_dataset(&a.data.dataset, a.data.format)?.into_iter().map(|r| r.text).collect();
    let (base, augmented) = exemplar_severity_experiment(&loaded.model, loaded.soft(), &loaded.prompt, &extra, &comments, loaded.scorer)?;
    #[derive(Serialize)]
    struct Out {
        comments: usize,
        base_yes: usize,
        augmented_yes: usize,
        reference: crate::report::ReferenceSeverity,
    }
    let r = reference().exemplar_severity;
    let text = table(
        &["prompt", "yes", "of", "reference_yes"],
        &[
            vec!["base".into(), base.to_string(), comments.len().to_string(), format!("{} of {}", r.base_yes, r.comments)],
            vec!["augmented".into(), augmented.to_string(), comments.len().to_string(), format!("{} of {}", r.augmented_yes, r.comments)],
        ],
    );
    ctx.emit(&Out { comments: comments.len(), base_yes: base, augmented_yes: augmented, reference: r }, || text)
}

/// Scores and average ratings for the records that have ratings.
fn scores_and_ratings(loaded: &Loaded, records: &[Record]) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    let scorer = loaded.scorer()?;
    let (mut idx, mut scores, mut ratings) = (Vec::new(), Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        let Some(avg) = r.avg_rating() else { continue };
        let s = scorer.score(&r.text).with_context(|| format!("scoring {}", r.id))?;
        idx.push(i);
        scores.push(s.score);
        ratings.push(avg);
    }
    if idx.is_empty() {
        bail!("no records carry ratings");
    }
    Ok((idx, scores, ratings))
}

fn correlate(ctx: &Ctx, a: DatasetArgs) -> Result<()> {
    let loaded = load(ctx, &a.model)?;
    let records = read_dataset(&a.dataset, a.format)?;
    let (_, scores, ratings) = scores_and_ratings(&loaded, &records)?;
    let report = correlations(&scores, &ratings)?;
    ctx.emit(&report, || {
        let mut rows = vec![vec!["this run".into(), f3(report.pearson), f3(report.spearman), f3(report.kendall_tau)]];
        for r in reference().correlation {
            rows.push(vec![format!("reference {}", r.setting), f3(r.pearson), f3(r.spearman), f3(r.kendall_tau)]);
        }
        format!("{} rated examples\n{}", scores.len(), table(&["", "pearson", "spearman", "kendall_tau"], &rows))
    })
}

fn mislabels(ctx: &Ctx, a: MislabelArgs) -> Result<()> {
    let loaded = load(ctx, &a.data.model)?;
    let records = read_dataset(&a.data.dataset, a.data.format)?;
    let (idx, scores, ratings) = scores_and_ratings(&loaded, &records)?;
    let ranked = rank_mislabel_candidates(&ratings, &scores)?;
    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        text: &'a str,
        label: store::Label,
        rating: f64,
        score: f64,
        gap: f64,
    }
    let rows: Vec<Row> = ranked
        .iter()
        .take(a.top)
        .map(|c| {
            let r = &records[idx[c.index]];
            Row { id: &r.id, text: &r.text, label: r.label, rating: c.rating, score: c.score, gap: c.gap }
        })
        .collect();
    ctx.emit(&rows, || {
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let mut t: String = r.text.chars().take(60).collect();
                if r.text.chars().count() > 60 {
                    t.push_str("...");
                }
                vec![r.id.to_string(), f3(r.gap), f3(r.rating), f3(r.score), format!("{:?}", r.label).to_lowercase(), t]
            })
            .collect();
        table(&["id", "gap", "rating", "score", "label", "text"], &body)
    })
}

fn ingest_cmd(ctx: &Ctx, a: IngestArgs) -> Result<()> {
    let records = read_dataset(&a.input, a.format)?;
    if let Some(out) = &a.out {
        write_jsonl(out, &records)?;
    }
    let store_path = a.store.clone().or_else(|| if a.out.is_none() { ctx.config.store.clone() } else { None });
    if store_path.is_none() && a.out.is_none() {
        return Err(usage("ingest needs --store or --out"));
    }
    let mut appended = 0;
    if let Some(p) = &store_path {
        let p = p.as_path();
        let mut store = Store::open(p)?;
        if let Some(dup) = records.iter().find(|r| store.contains(&r.id)) {
            bail!("id {:?} is already in {}", dup.id, p.display());
        }
        for r in &records {
            store.append(r.clone())?;
            appended += 1;
        }
    }
    #[derive(Serialize)]
    struct Out {
        records: usize,
        toxic: usize,
        appended: usize,
    }
    let toxic = records.iter().filter(|r| r.label.is_toxic()).count();
    ctx.emit(&Out { records: records.len(), toxic, appended }, || format!("{} records ({toxic} toxic), {appended} appended\n", records.len()))
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let seed = ctx.seed()?;
    if a.kind == SynthKind::Corpus {
        let docs = world_corpus(a.n, seed);
        std::fs::write(&a.out, docs.join("\n\n"))?;
        return ctx.emit(&serde_json::json!({ "documents": docs.len() }), || format!("wrote {} documents to {}\n", docs.len(), a.out.display()));
    }
    let mut cfg = SynthConfig::default();
    if let Some(f) = a.toxic_frac {
        cfg.toxic_frac = f;
    }
    if let Some(r) = a.raters {
        cfg.raters = r;
    }
    let data = synth_dataset(a.n, seed, &cfg)?;
    let records: Vec<Record> = data.iter().enumerate().map(|(i, e)| Record::from_example(format!("synth-{i}"), e, Source::Synthetic)).collect();
    write_records(&a.out, &records, a.format)?;
    let toxic = data.iter().filter(|e| e.toxic).count();
    ctx.emit(&serde_json::json!({ "records": records.len(), "toxic": toxic }), || format!("wrote {} records ({toxic} toxic) to {}\n", records.len(), a.out.display()))
}

fn write_records(path: &Path, records: &[Record], format: Option<FormatArg>) -> Result<()> {
    let f = match format {
        Some(f) => f.into(),
        None => Format::from_path(path)?,
    };
    match f {
        Format::Jsonl => write_jsonl(path, records),
        Format::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(["id", "text", "label", "ratings", "source"])?;
            for r in records {
                let ratings = r.ratings.as_ref().map(|v| v.iter().map(u8::to_string).collect::<Vec<_>>().join(";")).unwrap_or_default();
                let label = if r.label.is_toxic() { "toxic" } else { "nontoxic" };
                let source = serde_json::to_value(r.source)?.as_str().unwrap_or_default().to_string();
                w.write_record([r.id.as_str(), r.text.as_str(), label, &ratings, &source])?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn split(ctx: &Ctx, a: SplitArgs) -> Result<()> {
    let seed = ctx.seed()?;
    if a.sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(usage("--sizes must be ascending"));
    }
    let records = read_dataset(&a.dataset, a.format)?;
    // Carry ids through the core sampler by position.
    let tagged: Vec<LabeledExample> = records.iter().enumerate().map(|(i, r)| LabeledExample::new(i.to_string(), r.label.is_toxic())).collect();
    let (test, trains) = sample_train_sets(&tagged, a.test_size, &a.sizes, seed)?;
    let pick = |set: &[LabeledExample]| -> Vec<Record> { set.iter().map(|e| records[e.comment.parse::<usize>().expect("position tag")].clone()).collect() };
    std::fs::create_dir_all(&a.out_dir)?;
    write_jsonl(&a.out_dir.join("test.jsonl"), &pick(&test))?;
    let mut files = vec![("test".to_string(), test.len())];
    for (n, t) in a.sizes.iter().zip(&trains) {
        write_jsonl(&a.out_dir.join(format!("train_{n}.jsonl")), &pick(t))?;
        files.push((format!("train_{n}"), t.len()));
    }
    #[derive(Serialize)]
    struct Out {
        seed: u64,
        files: Vec<(String, usize)>,
    }
    let text = table(&["split", "examples"], &files.iter().map(|(f, n)| vec![f.clone(), n.to_string()]).collect::<Vec<_>>());
    ctx.emit(&Out { seed, files }, || text)
}

fn serve(ctx: &Ctx, a: ServeArgs) -> Result<()> {
    let loaded = load(ctx, &a.model)?;
    let mut settings = ctx.config.service.clone();
    if let Some(v) = a.listen {
        settings.listen = v;
    }
    if let Some(v) = a.tau {
        settings.tau = v;
    }
    if let Some(v) = a.lease_secs {
        settings.lease_secs = v;
    }
    if a.static_dir.is_some() {
        settings.static_dir = a.static_dir;
    }
    settings.validate().map_err(|e| usage(e.to_string()))?;
    let store_path = a.store.or_else(|| ctx.config.store.clone()).ok_or_else(|| usage("serve needs --store or a store in the config file"))?;
    let store = Store::open(&store_path)?;
    if store.torn_tail {
        eprintln!("warning: dropped a torn final line from {}", store_path.display());
    }
    let listen = settings.listen.clone();
    let options = ServiceOptions {
        settings,
        scorer: loaded.scorer,
        tune: ctx.config.tune,
        prompt_path: a.model.prompt.clone().or_else(|| ctx.config.prompt.clone()),
        soft_prompt_path: a.model.soft_prompt.clone().or_else(|| ctx.config.soft_prompt.clone()),
    };
    let app = App::new(Some((loaded.model, loaded.hash)), loaded.prompt, loaded.soft, store, options)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let (listener, addr) = service::bind(&listen).await?;
        eprintln!("listening on http://{addr}");
        service::serve(app, listener).await
    })
}

fn compact(ctx: &Ctx, a: CompactArgs) -> Result<()> {
    let mut store = Store::open(&a.store)?;
    let torn = store.torn_tail;
    store.compact()?;
    ctx.emit(&serde_json::json!({ "records": store.len(), "dropped_torn_line": torn }), || format!("{} records, torn line dropped: {torn}\n", store.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse() {
        let c = Cli::try_parse_from(["policyprobe", "--seed", "3", "mislabels", "--dataset", "d.jsonl", "--top", "5"]).unwrap();
        assert_eq!(c.seed, Some(3));
        assert!(matches!(c.command, Command::Mislabels(MislabelArgs { top: 5, .. })));
        let c = Cli::try_parse_from(["policyprobe", "split", "--dataset", "d.jsonl", "--out-dir", "x", "--sizes", "50,100", "--json"]).unwrap();
        assert!(c.json);
        let Command::Split(s) = c.command else { panic!() };
        assert_eq!(s.sizes, vec![50, 100]);
        assert!(Cli::try_parse_from(["policyprobe", "classify"]).is_err());
        assert!(Cli::try_parse_from(["policyprobe", "score", "--comment", "a", "--dataset", "b"]).is_err());
        assert!(Cli::try_parse_from(["policyprobe", "bogus"]).is_err());
    }

    #[test]
    fn holdout_is_seeded_and_sized() {
        let data: Vec<LabeledExample> = (0..50).map(|i| LabeledExample::new(i.to_string(), i % 2 == 0)).collect();
        let (t, v) = holdout(data.clone(), 0.1, 4);
        assert_eq!((t.len(), v.len()), (45, 5));
        assert_eq!(holdout(data.clone(), 0.1, 4), (t, v));
        assert_eq!(holdout(data, 0.0, 4).1.len(), 0);
    }

    #[test]
    fn usage_errors_exit_two() {
        let code = main_with_args(["policyprobe", "--nope"].map(String::from));
        assert_eq!(code, ExitCode::from(2));
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d.jsonl");
        let code = main_with_args(["policyprobe", "synth", "--n", "4", "--out", out.to_str().unwrap()].map(String::from));
        assert_eq!(code, ExitCode::from(2));
        std::fs::write(&out, "not json\n{}\n").unwrap();
        let code = main_with_args(["policyprobe", "compact", "--store", out.to_str().unwrap()].map(String::from));
        assert_eq!(code, ExitCode::from(1));
    }
}
