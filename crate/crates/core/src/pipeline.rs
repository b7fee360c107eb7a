//! End-to-end run: segment, summarise, classify, attribute and explain every
//! transcript of a corpus, writing one bundle per transcript.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_tokens, AttributionError, AttributionMap, Baseline, Method, MethodChoice};
use crate::classifier::{majority_vote, predict_text, tokenize, ClassifierError, LinearModel, Prediction, TrainConfig};
use crate::corpus::{Corpus, Label, Transcript};
use crate::evaluation::{compute_metrics, fit, make_split, EvalError, Metrics, ModelSettings, Preprocess, SplitPlan, Unit};
use crate::explainer::{build_bundle, explain_transcript, ExplainError, SegmentArtifact};
use crate::gateway::{GatewayError, GenSettings, TextGenerator};
use crate::hashing::sha256_hex;
use crate::segmenter::{QuestionBank, SegmentError, DEFAULT_THRESHOLD};
use crate::summarizer::{summarize_segment, SegmentText, SummaryError, SummaryPolicy, SummaryRecord};
use crate::DomainId;

pub const SEGMENTS_FILE: &str = "segments.jsonl";
pub const SUMMARIES_FILE: &str = "summaries.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const ATTRIBUTIONS_FILE: &str = "attributions.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const REPORT_FILE: &str = "pipeline_report.json";
pub const BUNDLES_DIR: &str = "bundles";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Summary(#[from] SummaryError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("I/O error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl PipelineError {
    /// The gateway failure underneath, if any.
    pub fn gateway(&self) -> Option<&GatewayError> {
        match self {
            PipelineError::Summary(SummaryError::Gateway(g)) => Some(g),
            PipelineError::Explain(ExplainError::Gateway(g)) => Some(g),
            PipelineError::Eval(EvalError::Summary(SummaryError::Gateway(g))) => Some(g),
            PipelineError::Classifier(ClassifierError::Gateway(g)) => Some(g),
            _ => None,
        }
    }
}

pub fn write_file(path: &Path, body: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::Io {
            path: parent.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    std::fs::write(path, body).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seg_threshold: u32,
    pub policy: SummaryPolicy,
    pub gen: GenSettings,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub split_seed: u64,
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seg_threshold: DEFAULT_THRESHOLD,
            policy: SummaryPolicy::Extractive,
            gen: GenSettings::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            split_seed: 42,
            jobs: 1,
        }
    }
}

/// Stable id for the `index`-th piece of a transcript.
pub fn segment_id(piece: &SegmentText, index: usize) -> String {
    let domain = piece.domain_id.map_or_else(|| "all".to_string(), |d| d.to_string());
    format!("{}#{index:02}-{domain}", piece.transcript_id)
}

/// Segments and their summaries; a transcript without anchors is one piece.
pub fn summarize_transcript(t: &Transcript, pre: &Preprocess<'_>) -> Result<Vec<(SegmentText, SummaryRecord)>, PipelineError> {
    pre.pieces(t, true)
        .into_iter()
        .map(|p| {
            let s = summarize_segment(&p, pre.gateway, pre.policy, &pre.gen)?;
            Ok((p, s))
        })
        .collect()
}

/// Attribution over the summary tokens. A summary sharing no token with the
/// vocabulary gets an all-zero map at the bias.
pub fn attribute_summary(
    model: &LinearModel,
    summary: &str,
    id: &str,
    domain: Option<DomainId>,
    choice: MethodChoice,
) -> Result<AttributionMap, PipelineError> {
    let tokens = tokenize(summary);
    match attribute_tokens(model, &tokens, id, domain, choice, &Baseline::Empty) {
        Ok(m) => Ok(m),
        Err(AttributionError::EmptyVocabOverlap) => Ok(AttributionMap {
            segment: id.to_string(),
            domain_id: domain,
            phi: vec![0.0; tokens.len()],
            tokens,
            baseline_value: model.bias,
            full_value: model.bias,
            method: Method::Linear,
            max_se: None,
        }),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPrediction {
    pub segment_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_id: Option<DomainId>,
    pub prob_chr: f64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptPrediction {
    pub transcript_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Label>,
    pub label: Label,
    /// Share of segments voting CHR.
    pub prob_chr: f64,
    pub segments: Vec<SegmentPrediction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptRun {
    pub summaries: Vec<SummaryRecord>,
    pub prediction: TranscriptPrediction,
    pub maps: Vec<AttributionMap>,
    pub bundle_dir: PathBuf,
    pub bundle_files: usize,
}

/// All stages for one transcript; the bundle goes under `bundles_root`.
pub fn run_transcript(
    t: &Transcript,
    model: &LinearModel,
    pre: &Preprocess<'_>,
    settings: &ModelSettings,
    bundles_root: &Path,
) -> Result<TranscriptRun, PipelineError> {
    let pieces = summarize_transcript(t, pre)?;
    let mut seg_preds: Vec<Prediction> = Vec::with_capacity(pieces.len());
    let mut segments = Vec::with_capacity(pieces.len());
    let mut preds = Vec::with_capacity(pieces.len());
    let mut maps = Vec::with_capacity(pieces.len());
    let mut summaries = Vec::with_capacity(pieces.len());
    for (i, (piece, summary)) in pieces.into_iter().enumerate() {
        let id = segment_id(&piece, i);
        let p = predict_text(model, &summary.final_text, settings.max_chunk_tokens, settings.decision_threshold)?;
        preds.push(SegmentPrediction {
            segment_id: id.clone(),
            domain_id: piece.domain_id,
            prob_chr: p.prob_chr,
            label: p.label,
        });
        seg_preds.push(p);
        let map = attribute_summary(model, &summary.final_text, &id, piece.domain_id, MethodChoice::Auto)?;
        maps.push(map.clone());
        segments.push(SegmentArtifact {
            segment: piece,
            summary: summary.final_text.clone(),
            summary_backend: summary.backend,
            map,
        });
        summaries.push(summary);
    }
    let vote = majority_vote(&seg_preds)?;
    let artifacts = match explain_transcript(&t.transcript_id, vote.label, vote.prob_chr, segments.clone(), model, pre.gateway, &pre.gen) {
        Err(ExplainError::Gateway(e)) if pre.policy == SummaryPolicy::LlmWithFallback => {
            tracing::warn!(transcript = %t.transcript_id, error = %e, "narrative falls back to the excerpt");
            explain_transcript(&t.transcript_id, vote.label, vote.prob_chr, segments, model, None, &pre.gen)?
        }
        other => other?,
    };
    let bundle = build_bundle(&artifacts, bundles_root)?;
    Ok(TranscriptRun {
        summaries,
        prediction: TranscriptPrediction {
            transcript_id: t.transcript_id.clone(),
            gold: t.label,
            label: vote.label,
            prob_chr: vote.prob_chr,
            segments: preds,
        },
        maps,
        bundle_dir: bundle.dir,
        bundle_files: bundle.manifest.files.len(),
    })
}

/// [`run_transcript`] over `transcripts` on at most `jobs` threads, results
/// in input order.
pub fn run_transcripts(
    transcripts: &[Transcript],
    model: &LinearModel,
    pre: &Preprocess<'_>,
    settings: &ModelSettings,
    bundles_root: &Path,
    jobs: usize,
) -> Result<Vec<TranscriptRun>, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    pool.install(|| {
        transcripts
            .par_iter()
            .map(|t| run_transcript(t, model, pre, settings, bundles_root))
            .collect()
    })
}

/// Preprocessing configured from `cfg`.
pub fn preprocess<'a>(bank: &'a QuestionBank, cfg: &PipelineConfig, gateway: Option<&'a dyn TextGenerator>) -> Result<Preprocess<'a>, PipelineError> {
    let mut pre = Preprocess::new(bank, cfg.seg_threshold)?;
    pre.policy = cfg.policy;
    pre.gateway = gateway;
    pre.gen = cfg.gen;
    Ok(pre)
}

/// Trains on the train+dev pool of the seeded split, summarising as the
/// pipeline does at prediction time.
pub fn train_pipeline_model(corpus: &Corpus, pre: &Preprocess<'_>, cfg: &PipelineConfig) -> Result<(LinearModel, SplitPlan), PipelineError> {
    let plan = make_split(corpus, cfg.split_seed)?;
    let units: Vec<Unit> = plan
        .pool()
        .iter()
        .map(|id| {
            let t = corpus.get(id).expect("split ids come from the corpus");
            pre.unit(t, crate::evaluation::Arm::Proposed)
        })
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Unit> = units.iter().collect();
    Ok((fit(&refs, cfg.train, &cfg.model)?, plan))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitPlan>,
    /// Held-out metrics when the model was trained here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_metrics: Option<Metrics>,
    pub n_transcripts: usize,
    pub n_chr_predicted: usize,
    pub bundles: Vec<String>,
    /// sha256 of every top-level output file, by name.
    pub outputs: Vec<(String, String)>,
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(out, "{}", serde_json::to_string(&r).expect("serialisable"));
    }
    out
}

/// Runs every stage over `corpus` and writes all outputs under `out_dir`.
///
/// With `model == None` a model is trained on the split pool first and
/// test-set metrics are reported. Transcripts run in parallel on at most
/// `cfg.jobs` threads; outputs are written in corpus order.
pub fn run_pipeline(
    corpus: &Corpus,
    bank: &QuestionBank,
    model: Option<LinearModel>,
    gateway: Option<&dyn TextGenerator>,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<PipelineReport, PipelineError> {
    if corpus.is_empty() {
        return Err(PipelineError::Config("corpus is empty".into()));
    }
    let pre = preprocess(bank, cfg, gateway)?;
    let started = std::time::Instant::now();
    let (model, split) = match model {
        Some(m) => (m, None),
        None => {
            let (m, plan) = train_pipeline_model(corpus, &pre, cfg)?;
            (m, Some(plan))
        }
    };
    tracing::info!(stage = "train", ms = started.elapsed().as_millis() as u64, vocab = model.vocab.len(), "model ready");

    let bundles_root = out_dir.join(BUNDLES_DIR);
    let started = std::time::Instant::now();
    let runs = run_transcripts(&corpus.transcripts, &model, &pre, &cfg.model, &bundles_root, cfg.jobs)?;
    tracing::info!(stage = "explain", ms = started.elapsed().as_millis() as u64, n = runs.len(), "bundles written");

    let test_metrics = match &split {
        Some(plan) => {
            let test: Vec<&TranscriptPrediction> = runs
                .iter()
                .map(|r| &r.prediction)
                .filter(|p| plan.test.binary_search(&p.transcript_id).is_ok())
                .collect();
            let gold: Vec<Label> = test.iter().map(|p| p.gold.expect("split requires labels")).collect();
            let pred: Vec<Label> = test.iter().map(|p| p.label).collect();
            let scores: Vec<f64> = test.iter().map(|p| p.prob_chr).collect();
            Some(compute_metrics(&gold, &pred, Some(&scores))?)
        }
        None => None,
    };

    let mut seg_rows = Vec::new();
    for t in &corpus.transcripts {
        for s in pre.matcher.segment(t, cfg.seg_threshold) {
            seg_rows.push(crate::segmenter::SegmentRecord {
                transcript_id: t.transcript_id.clone(),
                segment: s,
            });
        }
    }
    let files = [
        (SEGMENTS_FILE, jsonl(&seg_rows)),
        (SUMMARIES_FILE, jsonl(runs.iter().flat_map(|r| &r.summaries))),
        (PREDICTIONS_FILE, jsonl(runs.iter().map(|r| &r.prediction))),
        (ATTRIBUTIONS_FILE, jsonl(runs.iter().flat_map(|r| &r.maps))),
        (MODEL_FILE, model.to_json()),
    ];
    let mut outputs = Vec::new();
    for (name, body) in &files {
        write_file(&out_dir.join(name), body)?;
        outputs.push((name.to_string(), sha256_hex(body.as_bytes())));
    }
    for (name, hash) in &outputs {
        tracing::info!(artifact = %name, sha256 = %hash, "wrote");
    }
    let report = PipelineReport {
        config: cfg.clone(),
        split,
        test_metrics,
        n_transcripts: runs.len(),
        n_chr_predicted: runs.iter().filter(|r| r.prediction.label.is_chr()).count(),
        bundles: runs
            .iter()
            .map(|r| r.bundle_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
        outputs,
    };
    let mut body = serde_json::to_string_pretty(&report).expect("serialisable");
    body.push('\n');
    write_file(&out_dir.join(REPORT_FILE), &body)?;
    Ok(report)
}
