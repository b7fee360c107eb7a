//! Participant-grouped splits, nested cross-validation over the training
//! grid, transcript-level metrics and the four-arm ablation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classifier::{majority_vote, predict_text, train_on_texts, ClassifierError, LinearModel, TrainConfig};
use crate::corpus::{Corpus, Label, Transcript};
use crate::gateway::{GenSettings, TextGenerator};
use crate::hashing::str_key;
use crate::segmenter::{Matcher, QuestionBank, SegmentError};
use crate::summarizer::{summarize_segment, SegmentText, SummaryError, SummaryPolicy};

pub const SPLIT_FRACTIONS: [f64; 3] = [0.64, 0.16, 0.20];
pub const CLASS_TOLERANCE: f64 = 0.05;
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("transcript {0} has no label")]
    MissingLabel(String),
    #[error("test set contains a single class")]
    SingleClassTestSet,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Summary(#[from] SummaryError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

/// What a split needs to know about one transcript.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitItem {
    pub transcript_id: String,
    pub participant_id: String,
    pub label: Label,
}

impl SplitItem {
    pub fn from_transcript(t: &Transcript) -> Result<Self, EvalError> {
        Ok(Self {
            transcript_id: t.transcript_id.clone(),
            participant_id: t.participant_id.clone(),
            label: t.label.ok_or_else(|| EvalError::MissingLabel(t.transcript_id.clone()))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetBalance {
    pub size: usize,
    pub chr_fraction: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
    pub corpus_chr_fraction: f64,
    pub balance: [SetBalance; 3],
}

impl SplitPlan {
    pub fn pool(&self) -> Vec<String> {
        let mut v: Vec<String> = self.train.iter().chain(&self.dev).cloned().collect();
        v.sort();
        v
    }

    pub fn sets(&self) -> [&[String]; 3] {
        [&self.train, &self.dev, &self.test]
    }
}

struct Group<'a> {
    key: u64,
    participant: &'a str,
    members: Vec<&'a SplitItem>,
    chr: usize,
}

fn groups<'a>(items: &'a [SplitItem], seed: u64) -> Vec<Group<'a>> {
    let mut by: BTreeMap<&str, Vec<&SplitItem>> = BTreeMap::new();
    for it in items {
        by.entry(it.participant_id.as_str()).or_default().push(it);
    }
    let mut out: Vec<Group<'a>> = by
        .into_iter()
        .map(|(p, members)| Group {
            key: str_key(seed, p),
            participant: p,
            chr: members.iter().filter(|m| m.label.is_chr()).count(),
            members,
        })
        .collect();
    out.sort_by(|a, b| {
        b.members
            .len()
            .cmp(&a.members.len())
            .then(a.key.cmp(&b.key))
            .then(a.participant.cmp(b.participant))
    });
    out
}

/// Transcript quotas per set: nearest integers to `fractions * n` summing to `n`.
fn quotas(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut q: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut left = n - q.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        q[i] += 1;
        left -= 1;
    }
    q
}

/// Greedy assignment of participant groups, largest first, to the set with
/// the largest combined size and class deficit among sets with room.
fn assign<'a>(groups: &[Group<'a>], fractions: &[f64], n: usize, n_chr: usize) -> Vec<Vec<&'a SplitItem>> {
    let k = fractions.len();
    let quota = quotas(n, fractions);
    let chr_target: Vec<f64> = fractions.iter().map(|f| f * n_chr as f64).collect();
    let hc_target: Vec<f64> = fractions.iter().map(|f| f * (n - n_chr) as f64).collect();
    let mut sets: Vec<Vec<&SplitItem>> = vec![Vec::new(); k];
    let mut chr = vec![0usize; k];
    for g in groups {
        let size = g.members.len();
        let hc = size - g.chr;
        let score = |s: usize, sets: &[Vec<&SplitItem>]| {
            let size_def = (quota[s] as f64 - sets[s].len() as f64) / (quota[s].max(1) as f64);
            let rel = |target: f64, have: usize| if target > 0.0 { (target - have as f64) / target } else { 0.0 };
            let class_def = (g.chr as f64 * rel(chr_target[s], chr[s])
                + hc as f64 * rel(hc_target[s], sets[s].len() - chr[s]))
                / size as f64;
            size_def + class_def
        };
        let with_room: Vec<usize> = (0..k).filter(|&s| sets[s].len() + size <= quota[s]).collect();
        let candidates: Vec<usize> = if with_room.is_empty() { (0..k).collect() } else { with_room };
        let mut best = candidates[0];
        for &s in &candidates[1..] {
            if score(s, &sets) > score(best, &sets) {
                best = s;
            }
        }
        chr[best] += g.chr;
        sets[best].extend(g.members.iter().copied());
    }
    sets
}

fn chr_fraction(items: &[&SplitItem]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    items.iter().filter(|i| i.label.is_chr()).count() as f64 / items.len() as f64
}

/// 64/16/20 split grouped by participant and stratified by label.
pub fn make_split_items(items: &[SplitItem], seed: u64) -> Result<SplitPlan, EvalError> {
    let n = items.len();
    let ids: BTreeSet<&str> = items.iter().map(|i| i.transcript_id.as_str()).collect();
    if ids.len() != n {
        return Err(EvalError::InvalidInput("duplicate transcript ids".into()));
    }
    let gs = groups(items, seed);
    if gs.len() < 3 {
        return Err(EvalError::InfeasibleSplit(format!("{} participants cannot fill three sets", gs.len())));
    }
    let biggest = gs[0].members.len();
    if biggest as f64 > SPLIT_FRACTIONS[0] * n as f64 {
        return Err(EvalError::InfeasibleSplit(format!(
            "participant {} owns {biggest} of {n} transcripts",
            gs[0].participant
        )));
    }
    let n_chr = items.iter().filter(|i| i.label.is_chr()).count();
    let sets = assign(&gs, &SPLIT_FRACTIONS, n, n_chr);
    if let Some(i) = sets.iter().position(Vec::is_empty) {
        return Err(EvalError::InfeasibleSplit(format!("set {i} is empty")));
    }
    let corpus_frac = n_chr as f64 / n as f64;
    let balance = |s: &Vec<&SplitItem>| {
        let f = chr_fraction(s);
        SetBalance {
            size: s.len(),
            chr_fraction: f,
            within_tolerance: (f - corpus_frac).abs() <= CLASS_TOLERANCE + 1e-12,
        }
    };
    let ids_of = |s: &Vec<&SplitItem>| {
        let mut v: Vec<String> = s.iter().map(|i| i.transcript_id.clone()).collect();
        v.sort();
        v
    };
    let plan = SplitPlan {
        seed,
        fractions: SPLIT_FRACTIONS,
        train: ids_of(&sets[0]),
        dev: ids_of(&sets[1]),
        test: ids_of(&sets[2]),
        corpus_chr_fraction: corpus_frac,
        balance: [balance(&sets[0]), balance(&sets[1]), balance(&sets[2])],
    };
    verify_split(&plan, items)?;
    Ok(plan)
}

pub fn make_split(corpus: &Corpus, seed: u64) -> Result<SplitPlan, EvalError> {
    let items = corpus
        .transcripts
        .iter()
        .map(SplitItem::from_transcript)
        .collect::<Result<Vec<_>, _>>()?;
    make_split_items(&items, seed)
}

/// Disjointness, coverage and participant integrity.
pub fn verify_split(plan: &SplitPlan, items: &[SplitItem]) -> Result<(), EvalError> {
    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    for (s, ids) in plan.sets().iter().enumerate() {
        for id in ids.iter() {
            if owner.insert(id.as_str(), s).is_some() {
                return Err(EvalError::InfeasibleSplit(format!("{id} assigned twice")));
            }
        }
    }
    if owner.len() != items.len() {
        return Err(EvalError::InfeasibleSplit("split does not cover the corpus".into()));
    }
    let mut participant_set: BTreeMap<&str, usize> = BTreeMap::new();
    for it in items {
        let s = *owner
            .get(it.transcript_id.as_str())
            .ok_or_else(|| EvalError::InfeasibleSplit(format!("{} unassigned", it.transcript_id)))?;
        if *participant_set.entry(it.participant_id.as_str()).or_insert(s) != s {
            return Err(EvalError::InfeasibleSplit(format!("participant {} spans sets", it.participant_id)));
        }
    }
    Ok(())
}

/// `k` participant-grouped folds, each as a list of indices into `items`.
pub fn group_folds(items: &[SplitItem], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    let gs = groups(items, seed);
    if gs.len() < 2 {
        return Err(EvalError::InfeasibleSplit(format!("{} participants cannot form folds", gs.len())));
    }
    let k = k.clamp(2, gs.len());
    let index: BTreeMap<&str, usize> = items.iter().enumerate().map(|(i, it)| (it.transcript_id.as_str(), i)).collect();
    let n_chr = items.iter().filter(|i| i.label.is_chr()).count();
    let sets = assign(&gs, &vec![1.0 / k as f64; k], items.len(), n_chr);
    Ok(sets
        .into_iter()
        .map(|s| {
            let mut v: Vec<usize> = s.iter().map(|it| index[it.transcript_id.as_str()]).collect();
            v.sort_unstable();
            v
        })
        .filter(|f| !f.is_empty())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn count(labels: &[Label], predicted: &[Label]) -> Self {
        let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
        for (y, p) in labels.iter().zip(predicted) {
            match (y.is_chr(), p.is_chr()) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    /// Absent when the labels contain a single class.
    pub auc: Option<f64>,
    pub confusion: Confusion,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_confusion(c: Confusion, auc: Option<f64>) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            accuracy: ratio(c.tp + c.tn, c.tp + c.fp + c.tn + c.fn_),
            precision,
            recall,
            specificity: ratio(c.tn, c.tn + c.fp),
            f1,
            auc,
            confusion: c,
        }
    }
}

/// Mann-Whitney AUC with midranks for tied scores. CHR is the positive class.
pub fn auc(labels: &[Label], scores: &[f64]) -> Result<f64, EvalError> {
    if labels.len() != scores.len() {
        return Err(EvalError::InvalidInput("labels and scores differ in length".into()));
    }
    let n_pos = labels.iter().filter(|l| l.is_chr()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassTestSet);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k].is_chr() {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Threshold-free metrics from labels and hard predictions, with AUC from
/// `scores` when given and both classes are present.
pub fn compute_metrics(labels: &[Label], predicted: &[Label], scores: Option<&[f64]>) -> Result<Metrics, EvalError> {
    if labels.len() != predicted.len() {
        return Err(EvalError::InvalidInput("labels and predictions differ in length".into()));
    }
    let auc = match scores {
        Some(s) => match auc(labels, s) {
            Ok(a) => Some(a),
            Err(EvalError::SingleClassTestSet) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    Ok(Metrics::from_confusion(Confusion::count(labels, predicted), auc))
}

/// One transcript prepared for an arm: a label and the texts it is scored on.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub item: SplitItem,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub min_frequency: usize,
    pub max_chunk_tokens: usize,
    pub decision_threshold: f64,
    pub seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            min_frequency: 1,
            max_chunk_tokens: crate::classifier::DEFAULT_MAX_CHUNK_TOKENS,
            decision_threshold: crate::classifier::DEFAULT_DECISION_THRESHOLD,
            seed: 42,
        }
    }
}

pub fn fit(units: &[&Unit], config: TrainConfig, s: &ModelSettings) -> Result<LinearModel, EvalError> {
    let docs: Vec<(String, Label)> = units
        .iter()
        .flat_map(|u| u.texts.iter().map(|t| (t.clone(), u.item.label)))
        .collect();
    Ok(train_on_texts(&docs, s.min_frequency, s.max_chunk_tokens, config, s.seed)?)
}

/// Majority-vote label and CHR vote share per unit.
pub fn predict_units(model: &LinearModel, units: &[&Unit], s: &ModelSettings) -> Result<(Vec<Label>, Vec<f64>), EvalError> {
    let mut labels = Vec::with_capacity(units.len());
    let mut scores = Vec::with_capacity(units.len());
    for u in units {
        let segs = u
            .texts
            .iter()
            .map(|t| predict_text(model, t, s.max_chunk_tokens, s.decision_threshold))
            .collect::<Result<Vec<_>, _>>()?;
        let p = majority_vote(&segs)?;
        labels.push(p.label);
        scores.push(p.prob_chr);
    }
    Ok((labels, scores))
}

pub fn evaluate_model(model: &LinearModel, units: &[&Unit], s: &ModelSettings) -> Result<Metrics, EvalError> {
    let (pred, scores) = predict_units(model, units, s)?;
    let labels: Vec<Label> = units.iter().map(|u| u.item.label).collect();
    compute_metrics(&labels, &pred, Some(&scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub config: TrainConfig,
    pub fold_f1: Vec<f64>,
    pub mean_f1: f64,
}

/// Grid search by mean grouped-CV F1. Grid order breaks ties, so the grid
/// from [`TrainConfig::grid`] prefers lower learning rate, then smaller
/// batch, fewer epochs and lower weight decay.
pub fn grid_search(units: &[&Unit], grid: &[TrainConfig], k: usize, s: &ModelSettings) -> Result<(TrainConfig, Vec<GridResult>), EvalError> {
    if grid.is_empty() {
        return Err(EvalError::InvalidInput("empty grid".into()));
    }
    let items: Vec<SplitItem> = units.iter().map(|u| u.item.clone()).collect();
    let folds = group_folds(&items, k, s.seed)?;
    let mut results = Vec::with_capacity(grid.len());
    for &config in grid {
        let mut fold_f1 = Vec::with_capacity(folds.len());
        for fold in &folds {
            let held: BTreeSet<usize> = fold.iter().copied().collect();
            let train: Vec<&Unit> = (0..units.len()).filter(|i| !held.contains(i)).map(|i| units[i]).collect();
            let test: Vec<&Unit> = fold.iter().map(|&i| units[i]).collect();
            let model = fit(&train, config, s)?;
            fold_f1.push(evaluate_model(&model, &test, s)?.f1);
        }
        let mean_f1 = fold_f1.iter().sum::<f64>() / fold_f1.len() as f64;
        results.push(GridResult { config, fold_f1, mean_f1 });
    }
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if r.mean_f1 > results[best].mean_f1 {
            best = i;
        }
    }
    Ok((results[best].config, results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterFold {
    pub fold: usize,
    pub n_test: usize,
    pub config: TrainConfig,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedCvResult {
    pub best: TrainConfig,
    pub grid: Vec<GridResult>,
    pub outer: Vec<OuterFold>,
    pub model: LinearModel,
}

/// Nested grouped CV over the pooled training data.
///
/// Each outer fold runs its own inner grid search and is scored on its held
/// participants. The reported best config comes from a grid search over the
/// whole pool, and the returned model is retrained on the whole pool with it.
pub fn nested_cv(units: &[&Unit], grid: &[TrainConfig], k: usize, s: &ModelSettings) -> Result<NestedCvResult, EvalError> {
    let items: Vec<SplitItem> = units.iter().map(|u| u.item.clone()).collect();
    let outer_folds = group_folds(&items, k, s.seed)?;
    let mut outer = Vec::with_capacity(outer_folds.len());
    for (fold, held) in outer_folds.iter().enumerate() {
        let held_set: BTreeSet<usize> = held.iter().copied().collect();
        let train: Vec<&Unit> = (0..units.len()).filter(|i| !held_set.contains(i)).map(|i| units[i]).collect();
        let test: Vec<&Unit> = held.iter().map(|&i| units[i]).collect();
        let (config, _) = grid_search(&train, grid, k, s)?;
        let model = fit(&train, config, s)?;
        outer.push(OuterFold {
            fold,
            n_test: test.len(),
            config,
            metrics: evaluate_model(&model, &test, s)?,
        });
    }
    let (best, grid_results) = grid_search(units, grid, k, s)?;
    let model = fit(units, best, s)?;
    Ok(NestedCvResult {
        best,
        grid: grid_results,
        outer,
        model,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    SummaryOnly,
    SegmentationOnly,
    Proposed,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::SummaryOnly, Arm::SegmentationOnly, Arm::Proposed];

    pub fn key(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::SummaryOnly => "summary_only",
            Arm::SegmentationOnly => "segmentation_only",
            Arm::Proposed => "proposed",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Arm::Baseline => "Baseline",
            Arm::SummaryOnly => "Summ only",
            Arm::SegmentationOnly => "Seg only",
            Arm::Proposed => "Proposed (Summ + Seg)",
        }
    }

    pub fn segmented(self) -> bool {
        matches!(self, Arm::SegmentationOnly | Arm::Proposed)
    }

    pub fn summarised(self) -> bool {
        matches!(self, Arm::SummaryOnly | Arm::Proposed)
    }

    /// `"all"` or a comma-separated list of arm keys.
    pub fn parse_list(s: &str) -> Result<Vec<Arm>, String> {
        if s.trim() == "all" {
            return Ok(Arm::ALL.to_vec());
        }
        let mut out = Vec::new();
        for part in s.split(',') {
            let arm = Arm::ALL
                .into_iter()
                .find(|a| a.key() == part.trim())
                .ok_or_else(|| format!("unknown arm {:?}", part.trim()))?;
            if !out.contains(&arm) {
                out.push(arm);
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Preprocessing shared by ablation arms and the pipeline.
pub struct Preprocess<'a> {
    pub matcher: Matcher<'a>,
    pub seg_threshold: u32,
    pub policy: SummaryPolicy,
    pub gateway: Option<&'a dyn TextGenerator>,
    pub gen: GenSettings,
}

impl<'a> Preprocess<'a> {
    pub fn new(bank: &'a QuestionBank, seg_threshold: u32) -> Result<Self, EvalError> {
        Ok(Self {
            matcher: Matcher::new(bank)?,
            seg_threshold,
            policy: SummaryPolicy::Extractive,
            gateway: None,
            gen: GenSettings::default(),
        })
    }

    /// Segments of `t`, or the whole transcript when nothing is anchored.
    pub fn pieces(&self, t: &Transcript, segmented: bool) -> Vec<SegmentText> {
        if segmented {
            let segs = self.matcher.segment(t, self.seg_threshold);
            if !segs.is_empty() {
                return segs.iter().map(|s| SegmentText::from_segment(t, s)).collect();
            }
        }
        vec![SegmentText::whole(t)]
    }

    pub fn text(&self, piece: &SegmentText, summarised: bool) -> Result<String, EvalError> {
        if summarised {
            Ok(summarize_segment(piece, self.gateway, self.policy, &self.gen)?.final_text)
        } else {
            Ok(piece.render())
        }
    }

    pub fn unit(&self, t: &Transcript, arm: Arm) -> Result<Unit, EvalError> {
        let texts = self
            .pieces(t, arm.segmented())
            .iter()
            .map(|p| self.text(p, arm.summarised()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Unit {
            item: SplitItem::from_transcript(t)?,
            texts,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSettings {
    pub model: ModelSettings,
    pub grid: Vec<TrainConfig>,
    pub folds: usize,
    pub split_seed: u64,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            model: ModelSettings::default(),
            grid: TrainConfig::grid(),
            folds: DEFAULT_FOLDS,
            split_seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub best_config: TrainConfig,
    pub metrics: Metrics,
    pub cv_mean_f1: f64,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitPlan,
    pub rows: Vec<ArmResult>,
}

/// Trains and tests one arm on a fixed plan.
pub fn run_arm(corpus: &Corpus, plan: &SplitPlan, arm: Arm, pre: &Preprocess<'_>, s: &AblationSettings) -> Result<(ArmResult, LinearModel), EvalError> {
    let unit_of = |id: &String| -> Result<Unit, EvalError> {
        let t = corpus
            .get(id)
            .ok_or_else(|| EvalError::InvalidInput(format!("plan names unknown transcript {id}")))?;
        pre.unit(t, arm)
    };
    let pool: Vec<Unit> = plan.pool().iter().map(unit_of).collect::<Result<_, _>>()?;
    let test: Vec<Unit> = plan.test.iter().map(unit_of).collect::<Result<_, _>>()?;
    let pool_refs: Vec<&Unit> = pool.iter().collect();
    let test_refs: Vec<&Unit> = test.iter().collect();
    let cv = nested_cv(&pool_refs, &s.grid, s.folds, &s.model)?;
    let metrics = evaluate_model(&cv.model, &test_refs, &s.model)?;
    let cv_mean_f1 = cv.grid.iter().find(|g| g.config == cv.best).map_or(0.0, |g| g.mean_f1);
    tracing::info!(arm = arm.key(), acc = metrics.accuracy, f1 = metrics.f1, "arm evaluated");
    Ok((
        ArmResult {
            arm,
            best_config: cv.best,
            metrics,
            cv_mean_f1,
            test_ids: plan.test.clone(),
        },
        cv.model,
    ))
}

/// Every requested arm on one shared split.
pub fn run_ablation(corpus: &Corpus, arms: &[Arm], pre: &Preprocess<'_>, s: &AblationSettings) -> Result<EvalReport, EvalError> {
    let split = make_split(corpus, s.split_seed)?;
    let rows = arms
        .iter()
        .map(|&arm| run_arm(corpus, &split, arm, pre, s).map(|(r, _)| r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport { split, rows })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "arm,acc,f1,prec,rec,spec,auc,tp,fp,tn,fn";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let c = m.confusion;
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}",
                r.arm.key(),
                m.accuracy,
                m.f1,
                m.precision,
                m.recall,
                m.specificity,
                m.auc.map_or_else(|| "NA".to_string(), |a| format!("{a:.6}")),
                c.tp,
                c.fp,
                c.tn,
                c.fn_
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serialisable");
        s.push('\n');
        s
    }

    /// Acc, F1, Prec and Rec per arm, then specificity and AUC.
    pub fn table(&self) -> String {
        let mut out = format!("{:<24}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}\n", "Arm", "Acc", "F1", "Prec", "Rec", "Spec", "AUC");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{:<24}{:>8.4}{:>8.4}{:>8.4}{:>8.4}{:>8.4}{:>8}",
                r.arm.title(),
                m.accuracy,
                m.f1,
                m.precision,
                m.recall,
                m.specificity,
                fmt_opt(m.auc)
            );
        }
        out
    }

    /// Recall against specificity per arm.
    pub fn tradeoff_table(&self) -> String {
        let mut out = format!("{:<24}{:>8}{:>13}\n", "Arm", "Recall", "Specificity");
        for r in &self.rows {
            let _ = writeln!(out, "{:<24}{:>8.4}{:>13.4}", r.arm.title(), r.metrics.recall, r.metrics.specificity);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn items(spec: &[(&str, &str, bool)]) -> Vec<SplitItem> {
        spec.iter()
            .map(|(t, p, c)| SplitItem {
                transcript_id: t.to_string(),
                participant_id: p.to_string(),
                label: Label::from_chr(*c),
            })
            .collect()
    }

    fn ten_balanced() -> Vec<SplitItem> {
        (0..10)
            .map(|i| SplitItem {
                transcript_id: format!("t{i}"),
                participant_id: format!("p{i}"),
                label: Label::from_chr(i % 2 == 0),
            })
            .collect()
    }

    #[test]
    fn ten_participants_split_six_two_two() {
        let plan = make_split_items(&ten_balanced(), 42).unwrap();
        assert_eq!((plan.train.len(), plan.dev.len(), plan.test.len()), (6, 2, 2));
        let all: BTreeSet<&String> = plan.train.iter().chain(&plan.dev).chain(&plan.test).collect();
        assert_eq!(all.len(), 10);
        for b in &plan.balance {
            assert!(b.within_tolerance, "{b:?}");
        }
    }

    #[test]
    fn single_participant_infeasible() {
        let it = items(&[("a", "p", true), ("b", "p", false), ("c", "p", true)]);
        assert!(matches!(make_split_items(&it, 1), Err(EvalError::InfeasibleSplit(_))));
    }

    #[test]
    fn dominant_participant_infeasible() {
        let mut spec: Vec<(String, String, bool)> = (0..7).map(|i| (format!("a{i}"), "big".to_string(), true)).collect();
        spec.extend((0..3).map(|i| (format!("b{i}"), format!("q{i}"), false)));
        let it: Vec<SplitItem> = spec
            .iter()
            .map(|(t, p, c)| SplitItem {
                transcript_id: t.clone(),
                participant_id: p.clone(),
                label: Label::from_chr(*c),
            })
            .collect();
        assert!(matches!(make_split_items(&it, 1), Err(EvalError::InfeasibleSplit(_))));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let it = ten_balanced();
        assert_eq!(make_split_items(&it, 7).unwrap(), make_split_items(&it, 7).unwrap());
    }

    #[test]
    fn quotas_round_to_nearest() {
        assert_eq!(quotas(10, &SPLIT_FRACTIONS), vec![6, 2, 2]);
        assert_eq!(quotas(100, &SPLIT_FRACTIONS), vec![64, 16, 20]);
        assert_eq!(quotas(7, &[0.2; 5]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn auc_example() {
        let labels = [Label::Chr, Label::Chr, Label::Hc, Label::Hc];
        let a = auc(&labels, &[0.8, 0.4, 0.4, 0.2]).unwrap();
        assert!((a - 0.875).abs() < 1e-15);
        assert!(matches!(auc(&[Label::Chr], &[0.3]), Err(EvalError::SingleClassTestSet)));
    }

    #[test]
    fn perfect_predictions() {
        let labels = [Label::Chr, Label::Hc, Label::Chr];
        let m = compute_metrics(&labels, &labels, Some(&[0.9, 0.1, 0.8])).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.auc, Some(1.0));
        let single = compute_metrics(&[Label::Chr], &[Label::Chr], Some(&[0.7])).unwrap();
        assert_eq!(single.auc, None);
        assert_eq!(single.recall, 1.0);
    }

    #[test]
    fn tradeoff_pair_from_counts() {
        let m = Metrics::from_confusion(Confusion { tp: 13, fp: 6, tn: 25, fn_: 1 }, None);
        assert!((m.recall - 0.9286).abs() < 5e-5);
        assert!((m.specificity - 0.8065).abs() < 5e-5);
        assert_eq!(format!("{:.4} {:.4}", m.recall, m.specificity), "0.9286 0.8065");
    }

    #[test]
    fn folds_keep_participants_together() {
        let it = items(&[
            ("a1", "a", true),
            ("a2", "a", true),
            ("b1", "b", false),
            ("c1", "c", true),
            ("c2", "c", false),
            ("d1", "d", true),
            ("e1", "e", false),
            ("f1", "f", true),
        ]);
        let folds = group_folds(&it, 5, 3).unwrap();
        assert_eq!(folds.iter().map(Vec::len).sum::<usize>(), it.len());
        for f in &folds {
            for &i in f {
                for (j, other) in it.iter().enumerate() {
                    if other.participant_id == it[i].participant_id {
                        assert!(f.contains(&j));
                    }
                }
            }
        }
    }

    fn unit(id: usize, chr: bool) -> Unit {
        let word = if chr { "whispers shadows" } else { "garden calm" };
        Unit {
            item: SplitItem {
                transcript_id: format!("t{id:02}"),
                participant_id: format!("p{id:02}"),
                label: Label::from_chr(chr),
            },
            texts: vec![format!("they said {word} today"), format!("again {word}")],
        }
    }

    #[test]
    fn grid_of_one_and_dominance() {
        let units: Vec<Unit> = (0..12).map(|i| unit(i, i % 3 != 0)).collect();
        let refs: Vec<&Unit> = units.iter().collect();
        let s = ModelSettings::default();
        let only = TrainConfig::default();
        let r = nested_cv(&refs, &[only], 3, &s).unwrap();
        assert_eq!(r.best, only);
        assert_eq!(r.outer.len(), 3);
        // a near-zero learning rate leaves the weights at zero
        let weak = TrainConfig {
            learning_rate: 1e-300,
            batch_size: 16,
            epochs: 2,
            ..only
        };
        let strong = TrainConfig {
            learning_rate: 0.1,
            ..only
        };
        let (best, results) = grid_search(&refs, &[weak, strong], 3, &s).unwrap();
        assert_eq!(best, strong, "{results:?}");
    }

    #[test]
    fn report_formats() {
        let m = Metrics::from_confusion(Confusion { tp: 13, fp: 6, tn: 25, fn_: 1 }, Some(0.9));
        let r = EvalReport {
            split: make_split_items(&ten_balanced(), 1).unwrap(),
            rows: vec![ArmResult {
                arm: Arm::Proposed,
                best_config: TrainConfig::default(),
                metrics: m,
                cv_mean_f1: 0.5,
                test_ids: vec![],
            }],
        };
        let csv = r.to_csv();
        assert!(csv.starts_with("arm,acc,f1,prec,rec,spec,auc,tp,fp,tn,fn\nproposed,"));
        assert!(csv.trim_end().ends_with(",0.900000,13,6,25,1"));
        let table = r.table();
        let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(&header[1..5], &["Acc", "F1", "Prec", "Rec"]);
        assert!(r.tradeoff_table().contains("0.9286       0.8065"));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert!(v["split"]["test"].is_array());
    }

    #[test]
    fn arm_lists() {
        assert_eq!(Arm::parse_list("all").unwrap().len(), 4);
        assert_eq!(Arm::parse_list("proposed,baseline").unwrap(), vec![Arm::Baseline, Arm::Proposed]);
        assert!(Arm::parse_list("nope").is_err());
    }

    fn brute_auc(labels: &[Label], scores: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, li) in labels.iter().enumerate() {
            for (j, lj) in labels.iter().enumerate() {
                if li.is_chr() && !lj.is_chr() {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    proptest! {
        #[test]
        fn metrics_match_oracle(v in prop::collection::vec((any::<bool>(), any::<bool>(), 0u8..6), 2..60)) {
            let labels: Vec<Label> = v.iter().map(|x| Label::from_chr(x.0)).collect();
            let pred: Vec<Label> = v.iter().map(|x| Label::from_chr(x.1)).collect();
            let scores: Vec<f64> = v.iter().map(|x| f64::from(x.2) / 5.0).collect();
            let m = compute_metrics(&labels, &pred, Some(&scores)).unwrap();
            let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
            for (y, p) in labels.iter().zip(&pred) {
                match (y.is_chr(), p.is_chr()) { (true, true) => tp += 1, (false, true) => fp += 1, (false, false) => tn += 1, _ => fn_ += 1 }
            }
            prop_assert_eq!(m.confusion, Confusion { tp, fp, tn, fn_ });
            prop_assert!((m.accuracy - (tp + tn) as f64 / v.len() as f64).abs() < 1e-12);
            let both = labels.iter().any(|l| l.is_chr()) && labels.iter().any(|l| !l.is_chr());
            if both {
                prop_assert!((m.auc.unwrap() - brute_auc(&labels, &scores)).abs() < 1e-12);
            } else {
                prop_assert!(m.auc.is_none());
            }
        }

        #[test]
        fn auc_monotone_invariant(v in prop::collection::vec((any::<bool>(), -5.0f64..5.0), 2..40)) {
            let labels: Vec<Label> = v.iter().map(|x| Label::from_chr(x.0)).collect();
            let s: Vec<f64> = v.iter().map(|x| x.1).collect();
            let t: Vec<f64> = s.iter().map(|x| (x * 0.7).exp() + 3.0).collect();
            if let (Ok(a), Ok(b)) = (auc(&labels, &s), auc(&labels, &t)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn split_integrity(n_part in 3usize..40, seed in any::<u64>(), visits in prop::collection::vec(1usize..4, 40), chr in prop::collection::vec(any::<bool>(), 40)) {
            let mut it = Vec::new();
            for p in 0..n_part {
                for v in 0..visits[p] {
                    it.push(SplitItem { transcript_id: format!("p{p}_v{v}"), participant_id: format!("p{p}"), label: Label::from_chr(chr[p]) });
                }
            }
            match make_split_items(&it, seed) {
                Ok(plan) => prop_assert!(verify_split(&plan, &it).is_ok()),
                Err(EvalError::InfeasibleSplit(_)) => {}
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
