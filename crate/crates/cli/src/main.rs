mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use chirpe_core::attribution::{MethodChoice, DEFAULT_PERMUTATIONS};
use chirpe_core::classifier::{classify_remote, majority_vote, predict_text, ClassifierError, LinearModel, Prediction, TrainConfig};
use chirpe_core::corpus::{generate_with_gold, Corpus, CorpusError, Label, SynthSpec, TranscriptFormat};
use chirpe_core::evaluation::{
    compute_metrics, make_split, nested_cv, run_ablation, AblationSettings, Arm, EvalError, Unit,
};
use chirpe_core::explainer::ExplainError;
use chirpe_core::feedback::{analyze, FeedbackError, RatingsMatrix, DEFAULT_ALPHA};
use chirpe_core::gateway::{GatewayError, HttpGenerator, JsonClient, TextGenerator};
use chirpe_core::hashing::sha256_hex;
use chirpe_core::pipeline::{
    attribute_summary, preprocess, run_pipeline, run_transcripts, segment_id, summarize_transcript, train_pipeline_model,
    PipelineError, SegmentPrediction, TranscriptPrediction, BUNDLES_DIR,
};
use chirpe_core::segmenter::{threshold_sweep, QuestionBank, SegmentError, SegmentRecord};
use chirpe_core::summarizer::{SummaryError, SummaryPolicy};
use clap::{Parser, Subcommand};
use serde::Serialize;

use config::{Config, GlobalArgs};

const PRECEDENCE: &str = "\
Settings precedence: command-line flags, then CHIRPE_* environment variables, \
then the --config TOML file, then built-in defaults.

Exit status: 0 on success, 1 on invalid input or configuration, 2 when an \
external service (text generation or remote classifier) fails.";

#[derive(Debug, Parser)]
#[command(name = "chirpe", version, about = "Segment, classify and explain clinical interview transcripts", after_help = PRECEDENCE)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labelled corpus with gold segments
    Synth {
        /// Number of participants
        #[arg(long, default_value_t = 100)]
        participants: usize,
        /// Visits per participant, `n` or `lo-hi`
        #[arg(long, default_value = "1")]
        visits: String,
        /// Share of CHR participants
        #[arg(long, default_value_t = chirpe_core::corpus::DEFAULT_CHR_FRACTION)]
        chr_fraction: f64,
        /// Probability that an interviewer question is paraphrased
        #[arg(long, default_value_t = 0.0)]
        paraphrase_noise: f64,
        /// Probability of a misleading preamble before the first question
        #[arg(long, default_value_t = 0.0)]
        distractor_rate: f64,
        /// Probability that a CHR answer is symptomatic
        #[arg(long, default_value_t = 0.8)]
        symptomatic_rate: f64,
        /// Transcript file format: txt or json
        #[arg(long, default_value = "txt")]
        format: String,
    },
    /// Split transcripts into symptom-domain segments
    Segment {
        /// Comma-separated thresholds to score against gold segments
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Summarise every segment
    Summarize,
    /// Train the linear classifier on the train+dev pool
    Train {
        /// Select the config by nested grouped CV over the full grid
        #[arg(long)]
        grid: bool,
        /// Folds for --grid
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Predict transcript labels by majority vote over segments
    Classify {
        /// Score summaries on a remote classifier instead of --model; the URL
        /// defaults to --classifier-url
        #[arg(long, num_args = 0..=1, default_missing_value = "", value_name = "URL")]
        remote: Option<String>,
    },
    /// Shapley attributions for every segment summary
    Attribute {
        /// auto, exact, linear or sampled
        #[arg(long, default_value = "auto")]
        method: String,
        /// Permutations for the sampled method
        #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
        permutations: usize,
    },
    /// Write explanation bundles
    Explain {
        /// Formats to render; every bundle carries all of them
        #[arg(long, default_value = "all")]
        formats: String,
    },
    /// Four-arm ablation on one shared split
    Evaluate {
        /// `all` or a comma-separated subset of baseline, summary_only, segmentation_only, proposed
        #[arg(long, default_value = "all")]
        arms: String,
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Participant-grouped 64/16/20 split
    Split,
    /// Descriptives, repeated-measures ANOVA and Holm-adjusted pairwise tests
    FeedbackStats {
        /// Ratings CSV: rater id, then one column per format
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        scale_min: i64,
        #[arg(long, default_value_t = 5)]
        scale_max: i64,
    },
    /// Segment, summarise, classify, attribute and explain a corpus
    Pipeline,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Segment { .. } => "segment",
            Command::Summarize => "summarize",
            Command::Train { .. } => "train",
            Command::Classify { .. } => "classify",
            Command::Attribute { .. } => "attribute",
            Command::Explain { .. } => "explain",
            Command::Evaluate { .. } => "evaluate",
            Command::Split => "split",
            Command::FeedbackStats { .. } => "feedback-stats",
            Command::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    External(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::External(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::External(m) => m,
        }
    }
}

fn gateway_failure(g: &GatewayError, context: String) -> Failure {
    match g {
        GatewayError::NotConfigured(_) | GatewayError::InvalidRequest(_) => Failure::Invalid(context),
        _ => Failure::External(context),
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e.gateway() {
            Some(g) => gateway_failure(g, e.to_string()),
            None => invalid(e),
        }
    }
}

impl From<SummaryError> for Failure {
    fn from(e: SummaryError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<ClassifierError> for Failure {
    fn from(e: ClassifierError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<ExplainError> for Failure {
    fn from(e: ExplainError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<SegmentError> for Failure {
    fn from(e: SegmentError) -> Self {
        invalid(e)
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        invalid(e)
    }
}

impl From<FeedbackError> for Failure {
    fn from(e: FeedbackError) -> Self {
        invalid(e)
    }
}

struct Ctx {
    cfg: Config,
    command: &'static str,
}

impl Ctx {
    /// Writes `body` to `out/name` and logs its hash.
    fn write(&self, name: &str, body: &str) -> Result<PathBuf, Failure> {
        let path = self.cfg.out.join(name);
        chirpe_core::pipeline::write_file(&path, body)?;
        tracing::info!(command = self.command, artifact = name, sha256 = %sha256_hex(body.as_bytes()), "wrote");
        Ok(path)
    }

    fn stage<T>(&self, stage: &str, f: impl FnOnce() -> Result<T, Failure>) -> Result<T, Failure> {
        let started = Instant::now();
        let r = f();
        tracing::info!(command = self.command, stage, ms = started.elapsed().as_millis() as u64, ok = r.is_ok(), "stage");
        r
    }

    fn bank(&self) -> Result<QuestionBank, Failure> {
        match &self.cfg.bank {
            Some(p) => Ok(QuestionBank::load(p)?),
            None => Ok(QuestionBank::psychs_default()),
        }
    }

    fn corpus(&self) -> Result<Corpus, Failure> {
        let dir = self.cfg.corpus.as_ref().ok_or_else(|| invalid("--corpus is required"))?;
        let c = Corpus::load_dir(dir)?;
        if c.is_empty() {
            return Err(invalid(format!("corpus {} has no transcripts", dir.display())));
        }
        tracing::info!(command = self.command, transcripts = c.len(), "corpus loaded");
        Ok(c)
    }

    fn model(&self) -> Result<LinearModel, Failure> {
        let path = self.cfg.model.as_ref().ok_or_else(|| invalid("--model is required"))?;
        Ok(LinearModel::load(path)?)
    }

    /// Text generator for the LLM policies.
    fn generator(&self) -> Result<Option<Box<dyn TextGenerator>>, Failure> {
        if self.cfg.policy == SummaryPolicy::Extractive {
            return Ok(None);
        }
        match self.cfg.llm_endpoint() {
            Some(g) => Ok(Some(Box::new(HttpGenerator::new(JsonClient::new(g))))),
            None if self.cfg.policy == SummaryPolicy::Llm => Err(invalid("policy llm needs --llm-url")),
            None => {
                tracing::warn!(command = self.command, "no --llm-url; summaries use the extractive fallback");
                Ok(None)
            }
        }
    }
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(&r).expect("serialisable"));
        out.push('\n');
    }
    out
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s
}

fn parse_visits(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || invalid(format!("--visits {s:?} is not `n` or `lo-hi`"));
    match s.split_once('-') {
        Some((a, b)) => Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?)),
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

fn parse_thresholds(s: &str) -> Result<Vec<u32>, Failure> {
    s.split(',')
        .map(|x| x.trim().parse::<u32>().ok().filter(|&t| t <= 100).ok_or_else(|| invalid(format!("bad threshold {x:?}"))))
        .collect()
}

fn run(command: Command, ctx: &Ctx) -> Result<(), Failure> {
    let cfg = &ctx.cfg;
    match command {
        Command::Synth {
            participants,
            visits,
            chr_fraction,
            paraphrase_noise,
            distractor_rate,
            symptomatic_rate,
            format,
        } => {
            let format = match format.as_str() {
                "txt" => TranscriptFormat::LabeledText,
                "json" => TranscriptFormat::Json,
                other => return Err(invalid(format!("unknown format {other:?}"))),
            };
            let spec = SynthSpec {
                n_participants: participants,
                transcripts_per_participant: parse_visits(&visits)?,
                chr_fraction,
                paraphrase_noise,
                seed: cfg.seed,
                distractor_rate,
                symptomatic_rate,
            };
            let bank = ctx.bank()?;
            let corpus = ctx.stage("synth", || Ok(generate_with_gold(&spec, &bank)?))?;
            corpus.write_dir(&cfg.out, format)?;
            ctx.write("synth_spec.json", &pretty(&spec))?;
            println!("wrote {} transcripts to {}", corpus.len(), cfg.out.display());
        }
        Command::Segment { sweep } => {
            let bank = ctx.bank()?;
            let corpus = ctx.corpus()?;
            let matcher = chirpe_core::segmenter::Matcher::new(&bank)?;
            let rows = ctx.stage("segment", || {
                Ok(corpus
                    .transcripts
                    .iter()
                    .flat_map(|t| {
                        matcher.segment(t, cfg.threshold).into_iter().map(|s| SegmentRecord {
                            transcript_id: t.transcript_id.clone(),
                            segment: s,
                        })
                    })
                    .collect::<Vec<_>>())
            })?;
            ctx.write("segments.jsonl", &jsonl(&rows))?;
            if let Some(list) = sweep {
                let thresholds = parse_thresholds(&list)?;
                let gold = corpus.with_gold()?;
                let table = ctx.stage("sweep", || Ok(threshold_sweep(&gold, &bank, &thresholds)?))?;
                ctx.write("sweep.json", &pretty(&table))?;
                println!("{:>9}  {:>9}  {:>9}  {:>9}", "threshold", "precision", "recall", "f1");
                for r in &table {
                    println!(
                        "{:>9}  {:>9.4}  {:>9.4}  {:>9.4}",
                        r.threshold, r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1
                    );
                }
            } else {
                println!("{} segments across {} transcripts", rows.len(), corpus.len());
            }
        }
        Command::Summarize => {
            let bank = ctx.bank()?;
            let corpus = ctx.corpus()?;
            let generator = ctx.generator()?;
            let pre = preprocess(&bank, &cfg.pipeline(), generator.as_deref())?;
            let records = ctx.stage("summarize", || {
                let mut out = Vec::new();
                for t in &corpus.transcripts {
                    out.extend(summarize_transcript(t, &pre)?.into_iter().map(|(_, s)| s));
                }
                Ok(out)
            })?;
            ctx.write("summaries.jsonl", &jsonl(&records))?;
            println!("{} summaries", records.len());
        }
        Command::Train { grid, folds } => {
            let bank = ctx.bank()?;
            let corpus = ctx.corpus()?;
            let generator = ctx.generator()?;
            let pcfg = cfg.pipeline();
            let pre = preprocess(&bank, &pcfg, generator.as_deref())?;
            let (model, plan) = if grid {
                let plan = make_split(&corpus, cfg.seed)?;
                let units: Vec<Unit> = plan
                    .pool()
                    .iter()
                    .map(|id| pre.unit(corpus.get(id).expect("split ids come from the corpus"), Arm::Proposed))
                    .collect::<Result<_, _>>()?;
                let refs: Vec<&Unit> = units.iter().collect();
                let cv = ctx.stage("nested_cv", || Ok(nested_cv(&refs, &TrainConfig::grid(), folds, &cfg.model_settings())?))?;
                #[derive(Serialize)]
                struct Report<'a> {
                    best: TrainConfig,
                    grid: &'a [chirpe_core::evaluation::GridResult],
                    outer: &'a [chirpe_core::evaluation::OuterFold],
                }
                ctx.write(
                    "train_report.json",
                    &pretty(&Report {
                        best: cv.best,
                        grid: &cv.grid,
                        outer: &cv.outer,
                    }),
                )?;
                (cv.model, plan)
            } else {
                ctx.stage("train", || Ok(train_pipeline_model(&corpus, &pre, &pcfg)?))?
            };
            ctx.write("model.json", &model.to_json())?;
            ctx.write("split.json", &pretty(&plan))?;
            println!(
                "trained on {} transcripts, vocabulary {}, lr {} batch {} epochs {} wd {}",
                plan.train.len() + plan.dev.len(),
                model.vocab.len(),
                model.config.learning_rate,
                model.config.batch_size,
                model.config.epochs,
                model.config.weight_decay
            );
        }
        Command::Classify { remote } => {
            let bank = ctx.bank()?;
            let corpus = ctx.corpus()?;
            let generator = ctx.generator()?;
            let pre = preprocess(&bank, &cfg.pipeline(), generator.as_deref())?;
            let client = match remote.as_deref() {
                None => None,
                Some("") => Some(JsonClient::new(
                    cfg.classifier_endpoint().ok_or_else(|| invalid("--remote needs a URL or --classifier-url"))?,
                )),
                Some(url) => Some(JsonClient::new(cfg.endpoint(url))),
            };
            let model = if client.is_some() { None } else { Some(ctx.model()?) };
            let preds = ctx.stage("classify", || {
                let mut out = Vec::new();
                for t in &corpus.transcripts {
                    let pieces = summarize_transcript(t, &pre)?;
                    let texts: Vec<String> = pieces.iter().map(|(_, s)| s.final_text.clone()).collect();
                    let seg: Vec<Prediction> = match (&client, &model) {
                        (Some(c), _) => classify_remote(c, &texts, cfg.decision_threshold)?,
                        (None, Some(m)) => texts
                            .iter()
                            .map(|x| predict_text(m, x, cfg.max_chunk_tokens, cfg.decision_threshold))
                            .collect::<Result<_, _>>()?,
                        (None, None) => unreachable!("a model or client is always present"),
                    };
                    let vote = majority_vote(&seg)?;
                    out.push(TranscriptPrediction {
                        transcript_id: t.transcript_id.clone(),
                        gold: t.label,
                        label: vote.label,
                        prob_chr: vote.prob_chr,
                        segments: pieces
                            .iter()
                            .zip(&seg)
                            .enumerate()
                            .map(|(i, ((p, _), s))| SegmentPrediction {
                                segment_id: segment_id(p, i),
                                domain_id: p.domain_id,
                                prob_chr: s.prob_chr,
                                label: s.label,
                            })
                            .collect(),
                    });
                }
                Ok(out)
            })?;
            ctx.write("predictions.jsonl", &jsonl(&preds))?;
            if preds.iter().all(|p| p.gold.is_some()) {
                let gold: Vec<Label> = preds.iter().map(|p| p.gold.expect("checked")).collect();
                let pred: Vec<Label> = preds.iter().map(|p| p.label).collect();
                let scores: Vec<f64> = preds.iter().map(|p| p.prob_chr).collect();
                let m = compute_metrics(&gold, &pred, Some(&scores))?;
                ctx.write("metrics.json", &pretty(&m))?;
                println!("accuracy {:.4} f1 {:.4} over {} transcripts", m.accuracy, m.f1, preds.len());
            } else {
                println!("{} transcripts classified", preds.len());
            }
        }
        Command::Attribute { method, permutations } => {
            let mut choice: MethodChoice = method.parse().map_err(invalid)?;
            if let MethodChoice::Sampled { .. } = choice {
                choice = MethodChoice::Sampled {
                    n_perms: permutations,
                    seed: cfg.seed,
                };
            }
            let bank = ctx.bank()?;
            let corpus = ctx.corpus()?;
            let model = ctx.model()?;
            let generator = ctx.generator()?;
            let pre = preprocess(&bank, &cfg.pipeline(), generator.as_deref())?;
            let maps = ctx.stage("attribute", || {
                let mut out = Vec::new();
                for t in &corpus.transcripts {
                    for (i, (p, s)) in summarize_transcript(t, &pre)?.into_iter().enumerate() {
                        out.push(attribute_summary(&model, &s.final_text, &segment_id(&p, i), p.domain_id, choice)?);
                    }
                }
                Ok(out)
            })?;
            ctx.write("attributions.jsonl", &jsonl(&maps))?;
            println!("{} attribution maps", maps.len());
        }
        Command::Explain { formats } => {
            if formats != "all" {
                return Err(invalid(format!("--formats {formats:?}: only `all` is supported")));
            }
            let bank = ctx.bank()?;
            let corpus = ctx.corpus()?;
            let model = ctx.model()?;
            let generator = ctx.generator()?;
            let pcfg = cfg.pipeline();
            let pre = preprocess(&bank, &pcfg, generator.as_deref())?;
            let root = cfg.out.join(BUNDLES_DIR);
            let runs = ctx.stage("explain", || Ok(run_transcripts(&corpus.transcripts, &model, &pre, &pcfg.model, &root, cfg.jobs)?))?;
            for r in &runs {
                tracing::info!(command = ctx.command, bundle = %r.bundle_dir.display(), files = r.bundle_files, "bundle");
            }
            println!("{} bundles in {}", runs.len(), root.display());
        }
        Command::Evaluate { arms, folds } => {
            let arms = Arm::parse_list(&arms).map_err(invalid)?;
            let bank = ctx.bank()?;
            let corpus = ctx.corpus()?;
            let generator = ctx.generator()?;
            let pre = preprocess(&bank, &cfg.pipeline(), generator.as_deref())?;
            let settings = AblationSettings {
                model: cfg.model_settings(),
                grid: TrainConfig::grid(),
                folds,
                split_seed: cfg.seed,
            };
            let report = ctx.stage("evaluate", || Ok(run_ablation(&corpus, &arms, &pre, &settings)?))?;
            ctx.write("ablation.csv", &report.to_csv())?;
            ctx.write("ablation.json", &report.to_json())?;
            let text = format!("{}\n{}", report.table(), report.tradeoff_table());
            ctx.write("ablation.txt", &text)?;
            print!("{text}");
        }
        Command::Split => {
            let corpus = ctx.corpus()?;
            let plan = make_split(&corpus, cfg.seed)?;
            ctx.write("split.json", &pretty(&plan))?;
            println!("train {} dev {} test {}", plan.train.len(), plan.dev.len(), plan.test.len());
        }
        Command::FeedbackStats {
            input,
            alpha,
            scale_min,
            scale_max,
        } => {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(invalid(format!("alpha {alpha} is outside (0, 1)")));
            }
            let file = std::fs::File::open(&input).map_err(|e| invalid(format!("cannot open {}: {e}", input.display())))?;
            let m = RatingsMatrix::from_csv(file, (scale_min, scale_max))?;
            let report = analyze(&m, alpha)?;
            ctx.write("feedback_report.json", &report.to_json())?;
            let table = report.table();
            ctx.write("feedback_table.txt", &table)?;
            print!("{table}");
        }
        Command::Pipeline => {
            let bank = ctx.bank()?;
            let corpus = ctx.corpus()?;
            let model = match &cfg.model {
                Some(_) => Some(ctx.model()?),
                None => None,
            };
            let generator = ctx.generator()?;
            let report = ctx.stage("pipeline", || Ok(run_pipeline(&corpus, &bank, model, generator.as_deref(), &cfg.pipeline(), &cfg.out)?))?;
            if let Some(m) = &report.test_metrics {
                println!("held-out accuracy {:.4} f1 {:.4}", m.accuracy, m.f1);
            }
            println!("{} bundles, {} predicted CHR", report.bundles.len(), report.n_chr_predicted);
        }
    }
    Ok(())
}

fn init_logging(filter: &str) {
    let filter = tracing_subscriber::EnvFilter::try_new(filter).unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match Config::resolve(&cli.global) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    init_logging(&cfg.log_level);
    let command = cli.command.name();
    tracing::info!(
        command,
        seed = cfg.seed,
        config = %serde_json::to_string(&cfg).expect("serialisable"),
        "resolved config"
    );
    let ctx = Ctx { cfg, command };
    match run(cli.command, &ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            tracing::error!(command, code = f.code(), error = f.message(), "failed");
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
