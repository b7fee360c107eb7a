//! Fuzzy mapping of interviewer turns onto PSYCHS symptom domains.
//!
//! Every interviewer turn is scored against every template question with a
//! token-sort Levenshtein ratio. Turns scoring at or above the threshold open a
//! new domain segment, provided the domain does not move backwards in interview
//! order. Everything before the first anchor is unassigned.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Speaker, Transcript};
use crate::domain::DomainId;
use crate::text::tokenize;

/// Default matching threshold (percent).
pub const DEFAULT_THRESHOLD: u32 = 80;

const DEFAULT_BANK_JSON: &str = include_str!("../data/psychs_bank.json");

#[derive(Debug, thiserror::Error)]
pub enum SegmentError {
    #[error("question bank contains no questions")]
    EmptyBank,
    #[error("invalid question bank: {0}")]
    InvalidBank(String),
    #[error("segment {domain} covers turns {start}..={end} but transcript has {n_turns} turns")]
    IndexOutOfRange {
        domain: DomainId,
        start: usize,
        end: usize,
        n_turns: usize,
    },
    #[error("no gold segmentation for transcript {0}")]
    MissingGold(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankDomain {
    pub id: DomainId,
    pub questions: Vec<String>,
}

/// Canonical template questions per domain, in interview order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BankFile", into = "BankFile")]
pub struct QuestionBank {
    domains: Vec<BankDomain>,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    domains: Vec<BankDomain>,
}

impl TryFrom<BankFile> for QuestionBank {
    type Error = String;

    fn try_from(file: BankFile) -> Result<Self, Self::Error> {
        QuestionBank::new(file.domains).map_err(|e| e.to_string())
    }
}

impl From<QuestionBank> for BankFile {
    fn from(bank: QuestionBank) -> Self {
        BankFile {
            domains: bank.domains,
        }
    }
}

impl QuestionBank {
    /// Domain ids must be strictly increasing in P-order (which also makes them
    /// unique) and every question must be non-blank. A bank may cover a subset
    /// of the 15 domains.
    pub fn new(domains: Vec<BankDomain>) -> Result<Self, SegmentError> {
        for pair in domains.windows(2) {
            if pair[0].id >= pair[1].id {
                return Err(SegmentError::InvalidBank(format!(
                    "domain {} listed after {}",
                    pair[1].id, pair[0].id
                )));
            }
        }
        for d in &domains {
            if d.questions.iter().any(|q| q.trim().is_empty()) {
                return Err(SegmentError::InvalidBank(format!("blank question in {}", d.id)));
            }
        }
        Ok(Self { domains })
    }

    /// The shipped PSYCHS bank covering P1-P15.
    pub fn psychs_default() -> Self {
        serde_json::from_str(DEFAULT_BANK_JSON).expect("shipped question bank is valid")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, SegmentError> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn load(path: &Path) -> Result<Self, SegmentError> {
        Self::from_json(&std::fs::read(path)?)
    }

    pub fn domains(&self) -> &[BankDomain] {
        &self.domains
    }

    pub fn questions(&self, id: DomainId) -> &[String] {
        self.domains
            .iter()
            .find(|d| d.id == id)
            .map(|d| d.questions.as_slice())
            .unwrap_or(&[])
    }

    pub fn question_count(&self) -> usize {
        self.domains.iter().map(|d| d.questions.len()).sum()
    }

    pub fn is_complete(&self) -> bool {
        self.domains.len() == usize::from(crate::domain::DOMAIN_COUNT)
    }
}

/// A contiguous, inclusive turn range assigned to one domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub domain_id: DomainId,
    pub turn_start: usize,
    pub turn_end: usize,
    pub anchor_score: u32,
}

/// One line of the segment JSONL output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub transcript_id: String,
    #[serde(flatten)]
    pub segment: Segment,
}

/// Lowercase, strip punctuation, sort tokens.
pub fn normalize_for_matching(s: &str) -> String {
    let mut tokens = tokenize(s);
    tokens.sort_unstable();
    tokens.join(" ")
}

/// Edit distance over Unicode scalar values, two-row dynamic programme.
pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn ratio(a: &[char], b: &[char]) -> u32 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 100;
    }
    let kept = longest - levenshtein(a, b);
    // round-half-up of 100 * kept / longest in integer arithmetic
    ((200 * kept + longest) / (2 * longest)) as u32
}

/// Token-sort similarity in `0..=100`.
pub fn similarity(a: &str, b: &str) -> u32 {
    let na: Vec<char> = normalize_for_matching(a).chars().collect();
    let nb: Vec<char> = normalize_for_matching(b).chars().collect();
    ratio(&na, &nb)
}

/// Pre-normalised bank for repeated scoring.
pub struct Matcher<'a> {
    bank: &'a QuestionBank,
    normalized: Vec<(DomainId, Vec<Vec<char>>)>,
    histograms: Vec<Vec<CharHistogram>>,
}

/// Character counts, for a cheap lower bound on edit distance.
struct CharHistogram(BTreeMap<char, usize>);

impl CharHistogram {
    fn of(s: &[char]) -> Self {
        let mut m = BTreeMap::new();
        for &c in s {
            *m.entry(c).or_insert(0) += 1;
        }
        Self(m)
    }
}

/// Each edit removes at most one surplus character from either side, so the
/// distance is at least the larger one-sided surplus.
fn ratio_upper_bound(a: &CharHistogram, b: &CharHistogram, la: usize, lb: usize) -> u32 {
    let surplus = |x: &CharHistogram, y: &CharHistogram| {
        x.0.iter()
            .map(|(c, &n)| n.saturating_sub(y.0.get(c).copied().unwrap_or(0)))
            .sum::<usize>()
    };
    let longest = la.max(lb);
    if longest == 0 {
        return 100;
    }
    let lower = surplus(a, b).max(surplus(b, a));
    let kept = longest - lower;
    ((200 * kept + longest) / (2 * longest)) as u32
}

impl<'a> Matcher<'a> {
    pub fn new(bank: &'a QuestionBank) -> Result<Self, SegmentError> {
        if bank.question_count() == 0 {
            return Err(SegmentError::EmptyBank);
        }
        let normalized: Vec<(DomainId, Vec<Vec<char>>)> = bank
            .domains
            .iter()
            .map(|d| {
                let qs = d
                    .questions
                    .iter()
                    .map(|q| normalize_for_matching(q).chars().collect())
                    .collect();
                (d.id, qs)
            })
            .collect();
        let histograms = normalized
            .iter()
            .map(|(_, qs)| qs.iter().map(|q| CharHistogram::of(q)).collect())
            .collect();
        Ok(Self {
            bank,
            normalized,
            histograms,
        })
    }

    pub fn bank(&self) -> &QuestionBank {
        self.bank
    }

    /// Best `(domain, score)` for an utterance; equal scores resolve to the
    /// lower P index.
    ///
    /// Questions are scored in order of an upper bound on their ratio and the
    /// scan stops once no remaining bound can beat the current best, so the
    /// result equals a full scan.
    pub fn best_match(&self, utterance: &str) -> (DomainId, u32) {
        let norm: Vec<char> = normalize_for_matching(utterance).chars().collect();
        let hist = CharHistogram::of(&norm);
        let mut bounded: Vec<(u32, usize, DomainId, &[char])> = Vec::new();
        let mut pos = 0;
        for ((id, questions), hists) in self.normalized.iter().zip(&self.histograms) {
            for (q, h) in questions.iter().zip(hists) {
                bounded.push((ratio_upper_bound(&hist, h, norm.len(), q.len()), pos, *id, q));
                pos += 1;
            }
        }
        bounded.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut best: Option<(u32, usize, DomainId)> = None;
        for (bound, pos, id, q) in bounded {
            if let Some((s, p, _)) = best {
                if bound < s || (bound == s && pos > p) {
                    break;
                }
            }
            let score = ratio(&norm, q);
            if best.is_none_or(|(s, p, _)| score > s || (score == s && pos < p)) {
                best = Some((score, pos, id));
            }
        }
        let (score, _, id) = best.expect("matcher has at least one question");
        (id, score)
    }

    /// Interviewer turns whose best score reaches `threshold`, before the
    /// interview-order filter is applied.
    pub fn candidate_anchors(&self, t: &Transcript, threshold: u32) -> Vec<(usize, DomainId, u32)> {
        t.turns
            .iter()
            .filter(|turn| turn.speaker == Speaker::Interviewer)
            .map(|turn| {
                let (d, s) = self.best_match(&turn.text);
                (turn.index, d, s)
            })
            .filter(|&(_, _, s)| s >= threshold)
            .collect()
    }

    pub fn segment(&self, t: &Transcript, threshold: u32) -> Vec<Segment> {
        let mut anchors: Vec<(usize, DomainId, u32)> = Vec::new();
        for (turn, domain, score) in self.candidate_anchors(t, threshold) {
            match anchors.last() {
                None => anchors.push((turn, domain, score)),
                // same domain: the turn stays inside the open segment
                Some(&(_, current, _)) if domain > current => anchors.push((turn, domain, score)),
                Some(_) => {}
            }
        }
        segments_from_anchors(&anchors, t.turns.len())
    }
}

pub(crate) fn segments_from_anchors(anchors: &[(usize, DomainId, u32)], n_turns: usize) -> Vec<Segment> {
    anchors
        .iter()
        .enumerate()
        .map(|(i, &(start, domain_id, anchor_score))| Segment {
            domain_id,
            turn_start: start,
            turn_end: anchors.get(i + 1).map_or(n_turns - 1, |next| next.0 - 1),
            anchor_score,
        })
        .collect()
}

pub fn segment_transcript(
    t: &Transcript,
    bank: &QuestionBank,
    threshold: u32,
) -> Result<Vec<Segment>, SegmentError> {
    Ok(Matcher::new(bank)?.segment(t, threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub const PERFECT: Prf = Prf {
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };

    pub fn from_counts(tp: usize, predicted: usize, actual: usize) -> Self {
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationEval {
    pub per_domain: BTreeMap<DomainId, Prf>,
    pub macro_avg: Prf,
}

/// Per-turn domain labels (`None` for unassigned turns).
pub fn turn_labels(segments: &[Segment], n_turns: usize) -> Result<Vec<Option<DomainId>>, SegmentError> {
    let mut labels = vec![None; n_turns];
    for s in segments {
        if s.turn_start > s.turn_end || s.turn_end >= n_turns {
            return Err(SegmentError::IndexOutOfRange {
                domain: s.domain_id,
                start: s.turn_start,
                end: s.turn_end,
                n_turns,
            });
        }
        labels[s.turn_start..=s.turn_end].fill(Some(s.domain_id));
    }
    Ok(labels)
}

/// Turn-level precision/recall/F1 per domain, macro-averaged over every domain
/// that appears in either segmentation. When neither segmentation assigns any
/// turn the agreement is perfect by convention.
pub fn evaluate_segmentation(
    pred: &[Segment],
    gold: &[Segment],
    n_turns: usize,
) -> Result<SegmentationEval, SegmentError> {
    let p = turn_labels(pred, n_turns)?;
    let g = turn_labels(gold, n_turns)?;
    let domains: BTreeSet<DomainId> = p.iter().chain(g.iter()).flatten().copied().collect();
    let per_domain: BTreeMap<DomainId, Prf> = domains
        .iter()
        .map(|&d| {
            let tp = p.iter().zip(&g).filter(|(a, b)| **a == Some(d) && **b == Some(d)).count();
            let predicted = p.iter().filter(|a| **a == Some(d)).count();
            let actual = g.iter().filter(|b| **b == Some(d)).count();
            (d, Prf::from_counts(tp, predicted, actual))
        })
        .collect();
    let macro_avg = if per_domain.is_empty() {
        Prf::PERFECT
    } else {
        mean_prf(per_domain.values())
    };
    Ok(SegmentationEval {
        per_domain,
        macro_avg,
    })
}

fn mean_prf<'a>(items: impl Iterator<Item = &'a Prf>) -> Prf {
    let (mut n, mut p, mut r, mut f) = (0usize, 0.0, 0.0, 0.0);
    for x in items {
        n += 1;
        p += x.precision;
        r += x.recall;
        f += x.f1;
    }
    let n = n.max(1) as f64;
    Prf {
        precision: p / n,
        recall: r / n,
        f1: f / n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: u32,
    #[serde(flatten)]
    pub macro_avg: Prf,
}

/// Macro P/R/F1 per threshold, averaged over transcripts, rows in input order.
pub fn threshold_sweep(
    corpus: &[(&Transcript, &[Segment])],
    bank: &QuestionBank,
    thresholds: &[u32],
) -> Result<Vec<SweepRow>, SegmentError> {
    let matcher = Matcher::new(bank)?;
    thresholds
        .iter()
        .map(|&threshold| {
            let evals = corpus
                .iter()
                .map(|(t, gold)| {
                    let pred = matcher.segment(t, threshold);
                    evaluate_segmentation(&pred, gold, t.turns.len()).map(|e| e.macro_avg)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SweepRow {
                threshold,
                macro_avg: mean_prf(evals.iter()),
            })
        })
        .collect()
}
