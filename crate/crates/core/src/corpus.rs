//! Speaker-labelled transcripts: parsing, validation, corpus directories and a
//! deterministic synthetic generator for desk-scale experiments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::segmenter::{segments_from_anchors, similarity, Matcher, QuestionBank, Segment, SegmentRecord};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed input{}: {reason}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    Malformed {
        context: Option<String>,
        reason: String,
    },
    #[error("input is not valid UTF-8")]
    Encoding(#[from] std::str::Utf8Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn malformed(reason: impl Into<String>) -> CorpusError {
    CorpusError::Malformed {
        context: None,
        reason: reason.into(),
    }
}

impl CorpusError {
    fn with_context(self, ctx: &str) -> Self {
        match self {
            CorpusError::Malformed { context: None, reason } => CorpusError::Malformed {
                context: Some(ctx.to_string()),
                reason,
            },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    Interviewer,
    Interviewee,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::Interviewer => "Interviewer",
            Speaker::Interviewee => "Interviewee",
        }
    }
}

/// Risk label: clinical high-risk (CHR-P) or healthy control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "CHR")]
    Chr,
    #[serde(rename = "HC")]
    Hc,
}

impl Label {
    pub fn is_chr(self) -> bool {
        self == Label::Chr
    }

    pub fn from_chr(chr: bool) -> Self {
        if chr {
            Label::Chr
        } else {
            Label::Hc
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Chr => "CHR",
            Label::Hc => "HC",
        })
    }
}

impl std::str::FromStr for Label {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "CHR" => Ok(Label::Chr),
            "HC" => Ok(Label::Hc),
            other => Err(malformed(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub index: usize,
}

/// An interview with ordered, gapless speaker turns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub transcript_id: String,
    pub participant_id: String,
    pub label: Option<Label>,
    pub turns: Vec<Turn>,
}

impl Transcript {
    pub fn new(
        transcript_id: impl Into<String>,
        participant_id: impl Into<String>,
        label: Option<Label>,
        turns: Vec<Turn>,
    ) -> Result<Self, CorpusError> {
        let t = Transcript {
            transcript_id: transcript_id.into(),
            participant_id: participant_id.into(),
            label,
            turns,
        };
        t.validate()?;
        Ok(t)
    }

    /// Builds turns from `(speaker, text)` pairs, assigning indices in order.
    pub fn from_pairs(
        transcript_id: impl Into<String>,
        participant_id: impl Into<String>,
        label: Option<Label>,
        pairs: impl IntoIterator<Item = (Speaker, String)>,
    ) -> Result<Self, CorpusError> {
        let turns = pairs
            .into_iter()
            .enumerate()
            .map(|(index, (speaker, text))| Turn { speaker, text, index })
            .collect();
        Self::new(transcript_id, participant_id, label, turns)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.transcript_id.trim().is_empty() {
            return Err(malformed("empty transcript_id"));
        }
        if self.participant_id.trim().is_empty() {
            return Err(malformed("empty participant_id"));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.index != i {
                return Err(malformed(format!("turn index {} at position {i}", turn.index)));
            }
            if turn.text.trim().is_empty() {
                return Err(malformed(format!("empty turn at index {i}")));
            }
        }
        for speaker in [Speaker::Interviewer, Speaker::Interviewee] {
            if !self.turns.iter().any(|t| t.speaker == speaker) {
                return Err(malformed(format!("no {} turn", speaker.tag())));
            }
        }
        Ok(())
    }

    /// Turns `start..=end` rendered as `Speaker: text` lines.
    pub fn render_turns(&self, start: usize, end: usize) -> String {
        self.turns[start..=end]
            .iter()
            .map(|t| format!("{}: {}", t.speaker.tag(), t.text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn render_all(&self) -> String {
        self.render_turns(0, self.turns.len() - 1)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&TranscriptFile::from(self)).expect("serialisable");
        s.push('\n');
        s
    }

    pub fn to_labeled_text(&self) -> String {
        let mut out = format!("# transcript_id: {}\n# participant_id: {}\n", self.transcript_id, self.participant_id);
        if let Some(label) = self.label {
            out.push_str(&format!("# label: {label}\n"));
        }
        for t in &self.turns {
            out.push_str(&format!("{}: {}\n", t.speaker.tag(), crate::text::normalize_whitespace(&t.text)));
        }
        out
    }

    pub fn serialize(&self, format: TranscriptFormat) -> String {
        match format {
            TranscriptFormat::Json => self.to_json(),
            TranscriptFormat::LabeledText => self.to_labeled_text(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptFormat {
    Json,
    LabeledText,
}

impl TranscriptFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "json" => Some(Self::Json),
            "txt" => Some(Self::LabeledText),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Json => "json",
            Self::LabeledText => "txt",
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TranscriptFile {
    transcript_id: String,
    participant_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<Label>,
    turns: Vec<TurnFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnFile {
    speaker: Speaker,
    text: String,
}

impl From<&Transcript> for TranscriptFile {
    fn from(t: &Transcript) -> Self {
        TranscriptFile {
            transcript_id: t.transcript_id.clone(),
            participant_id: t.participant_id.clone(),
            label: t.label,
            turns: t
                .turns
                .iter()
                .map(|turn| TurnFile {
                    speaker: turn.speaker,
                    text: turn.text.clone(),
                })
                .collect(),
        }
    }
}

/// Parses one transcript. Turn text is trimmed.
///
/// Labelled text consists of `Interviewer:` / `Interviewee:` lines; optional
/// `# transcript_id:`, `# participant_id:` and `# label:` header lines supply
/// metadata. Without them the transcript id defaults to `"transcript"` and the
/// participant id to the transcript id (corpus loading overrides both from the
/// manifest or file name).
pub fn parse_transcript(raw: &[u8], format: TranscriptFormat) -> Result<Transcript, CorpusError> {
    let text = std::str::from_utf8(raw)?;
    match format {
        TranscriptFormat::Json => parse_json(text),
        TranscriptFormat::LabeledText => parse_labeled_text(text),
    }
}

fn parse_json(text: &str) -> Result<Transcript, CorpusError> {
    let file: TranscriptFile = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    Transcript::from_pairs(
        file.transcript_id,
        file.participant_id,
        file.label,
        file.turns.into_iter().map(|t| (t.speaker, t.text.trim().to_string())),
    )
}

fn parse_labeled_text(text: &str) -> Result<Transcript, CorpusError> {
    let mut headers: BTreeMap<&str, &str> = BTreeMap::new();
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            if let Some((k, v)) = header.split_once(':') {
                headers.insert(k.trim(), v.trim());
            }
            continue;
        }
        let (speaker, rest) = if let Some(rest) = line.strip_prefix("Interviewer:") {
            (Speaker::Interviewer, rest)
        } else if let Some(rest) = line.strip_prefix("Interviewee:") {
            (Speaker::Interviewee, rest)
        } else {
            let tag = line.split(':').next().unwrap_or(line);
            return Err(malformed(format!("line {}: unknown speaker tag {tag:?}", lineno + 1)));
        };
        let rest = rest.trim();
        if rest.is_empty() {
            return Err(malformed(format!("line {}: empty turn", lineno + 1)));
        }
        pairs.push((speaker, rest.to_string()));
    }
    let transcript_id = headers.get("transcript_id").copied().unwrap_or("transcript");
    let participant_id = headers.get("participant_id").copied().unwrap_or(transcript_id);
    let label = headers.get("label").map(|l| l.parse()).transpose()?;
    Transcript::from_pairs(transcript_id, participant_id, label, pairs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub transcript_id: String,
    pub participant_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub transcripts: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GOLD_FILE: &str = "gold_segments.jsonl";

/// A set of transcripts with unique ids, optionally with gold segmentations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub transcripts: Vec<Transcript>,
    pub gold: BTreeMap<String, Vec<Segment>>,
}

impl Corpus {
    pub fn new(transcripts: Vec<Transcript>) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for t in &transcripts {
            if !seen.insert(t.transcript_id.as_str()) {
                return Err(malformed(format!("duplicate transcript_id {:?}", t.transcript_id)));
            }
        }
        Ok(Self {
            transcripts,
            gold: BTreeMap::new(),
        })
    }

    pub fn get(&self, transcript_id: &str) -> Option<&Transcript> {
        self.transcripts.iter().find(|t| t.transcript_id == transcript_id)
    }

    pub fn len(&self) -> usize {
        self.transcripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transcripts.is_empty()
    }

    /// Transcripts paired with their gold segments; errors if any is missing.
    pub fn with_gold(&self) -> Result<Vec<(&Transcript, &[Segment])>, crate::segmenter::SegmentError> {
        self.transcripts
            .iter()
            .map(|t| {
                self.gold
                    .get(&t.transcript_id)
                    .map(|g| (t, g.as_slice()))
                    .ok_or_else(|| crate::segmenter::SegmentError::MissingGold(t.transcript_id.clone()))
            })
            .collect()
    }

    pub fn manifest(&self, format: TranscriptFormat) -> CorpusManifest {
        CorpusManifest {
            transcripts: self
                .transcripts
                .iter()
                .map(|t| ManifestEntry {
                    transcript_id: t.transcript_id.clone(),
                    participant_id: t.participant_id.clone(),
                    label: t.label,
                    file: format!("{}.{}", t.transcript_id, format.extension()),
                })
                .collect(),
        }
    }

    /// Writes one file per transcript, `manifest.json`, and gold segments when present.
    pub fn write_dir(&self, dir: &Path, format: TranscriptFormat) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir)?;
        let manifest = self.manifest(format);
        for (t, entry) in self.transcripts.iter().zip(&manifest.transcripts) {
            std::fs::write(dir.join(&entry.file), t.serialize(format))?;
        }
        let mut m = serde_json::to_string_pretty(&manifest)?;
        m.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), m)?;
        if !self.gold.is_empty() {
            let mut lines = String::new();
            for t in &self.transcripts {
                for s in self.gold.get(&t.transcript_id).into_iter().flatten() {
                    let rec = SegmentRecord {
                        transcript_id: t.transcript_id.clone(),
                        segment: *s,
                    };
                    lines.push_str(&serde_json::to_string(&rec)?);
                    lines.push('\n');
                }
            }
            std::fs::write(dir.join(GOLD_FILE), lines)?;
        }
        Ok(())
    }

    /// Loads a corpus directory. With a manifest, files are read in manifest
    /// order and manifest metadata overrides file headers; without one, every
    /// `.json`/`.txt` file is read in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self, CorpusError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut transcripts = Vec::new();
        if manifest_path.exists() {
            let manifest: CorpusManifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
            for entry in manifest.transcripts {
                let path = dir.join(&entry.file);
                let format = TranscriptFormat::from_path(&path)
                    .ok_or_else(|| malformed(format!("unsupported file {}", entry.file)))?;
                let mut t = parse_transcript(&std::fs::read(&path)?, format).map_err(|e| e.with_context(&entry.file))?;
                t.transcript_id = entry.transcript_id;
                t.participant_id = entry.participant_id;
                if entry.label.is_some() {
                    t.label = entry.label;
                }
                transcripts.push(t);
            }
        } else {
            let mut paths: Vec<_> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| TranscriptFormat::from_path(p).is_some())
                .collect();
            paths.sort();
            for path in paths {
                let format = TranscriptFormat::from_path(&path).expect("filtered");
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                let raw = std::fs::read(&path)?;
                let mut t = parse_transcript(&raw, format).map_err(|e| e.with_context(&name))?;
                if format == TranscriptFormat::LabeledText && !String::from_utf8_lossy(&raw).contains("# transcript_id:") {
                    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("transcript");
                    if t.participant_id == t.transcript_id {
                        t.participant_id = stem.to_string();
                    }
                    t.transcript_id = stem.to_string();
                }
                transcripts.push(t);
            }
        }
        let mut corpus = Corpus::new(transcripts)?;
        let gold_path = dir.join(GOLD_FILE);
        if gold_path.exists() {
            for line in std::fs::read_to_string(gold_path)?.lines().filter(|l| !l.trim().is_empty()) {
                let rec: SegmentRecord = serde_json::from_str(line)?;
                corpus.gold.entry(rec.transcript_id).or_default().push(rec.segment);
            }
        }
        Ok(corpus)
    }
}

/// Parameters of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_participants: usize,
    /// Inclusive range of visits per participant.
    pub transcripts_per_participant: (usize, usize),
    pub chr_fraction: f64,
    /// Probability that an interviewer question is paraphrased.
    pub paraphrase_noise: f64,
    pub seed: u64,
    /// Probability that a transcript opens with a preamble carrying
    /// label-misleading small talk and a near-miss interviewer remark.
    #[serde(default)]
    pub distractor_rate: f64,
    /// Probability that a CHR participant's answer in a given domain is symptomatic.
    #[serde(default = "default_symptomatic_rate")]
    pub symptomatic_rate: f64,
}

fn default_symptomatic_rate() -> f64 {
    0.8
}

/// Class balance of the reference cohort (CHR-P share).
pub const DEFAULT_CHR_FRACTION: f64 = 0.836;

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_participants: 100,
            transcripts_per_participant: (1, 1),
            chr_fraction: DEFAULT_CHR_FRACTION,
            paraphrase_noise: 0.0,
            seed: 1,
            distractor_rate: 0.0,
            symptomatic_rate: default_symptomatic_rate(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let (lo, hi) = self.transcripts_per_participant;
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if self.n_participants == 0 {
            return Err(malformed("n_participants must be positive"));
        }
        if lo == 0 || lo > hi {
            return Err(malformed("transcripts_per_participant must be a positive range"));
        }
        if !(self.chr_fraction > 0.0 && self.chr_fraction < 1.0) {
            return Err(malformed("chr_fraction must lie in (0,1)"));
        }
        if !unit(self.paraphrase_noise) || !unit(self.distractor_rate) || !unit(self.symptomatic_rate) {
            return Err(malformed("probabilities must lie in [0,1]"));
        }
        Ok(())
    }
}

/// Minimum token-sort similarity a paraphrase keeps to its source question.
pub const PARAPHRASE_FLOOR: u32 = 70;

const SYNONYMS: &[(&str, &str)] = &[
    ("ever", "at any point"),
    ("felt", "sensed"),
    ("feel", "sense"),
    ("feeling", "sense"),
    ("people", "others"),
    ("strange", "odd"),
    ("odd", "weird"),
    ("unusual", "out of the ordinary"),
    ("things", "stuff"),
    ("thought", "believed"),
    ("thinking", "wondering"),
    ("worried", "concerned"),
    ("noticed", "seen"),
    ("different", "changed"),
    ("seemed", "appeared"),
    ("sense", "feeling"),
    ("body", "physical self"),
    ("heard", "picked up"),
    ("someone", "somebody"),
    ("anything", "something"),
    ("important", "significant"),
    ("experience", "encounter"),
    ("real", "genuine"),
    ("trouble", "difficulty"),
    ("special", "particular"),
];

const SYMPTOM_LEADS: &[&str] = &["Sometimes", "Lately", "Most nights", "Every week", "When I am stressed", "Recently"];

const SYMPTOM_CLAUSES: &[&str] = &[
    "I hear whispers when nobody is around",
    "I feel like strangers are watching me",
    "my thoughts get jumbled and I lose track",
    "I see shadows moving at the corner of my eye",
    "the television seems to send me special messages",
    "I worry that people are plotting against me",
    "everything around me feels unreal and distorted",
    "I get intense guilt that I cannot explain",
    "I notice strange smells that nobody else notices",
    "my body feels altered like something changed inside",
    "I believe I have powers that others lack",
    "it feels like someone is controlling my thoughts",
    "I hear my name being called in empty rooms",
    "I get frightened that I am being followed",
    "familiar faces look strange and threatening",
    "I keep dwelling on it and it distresses me",
];

const CONTROL_LEADS: &[&str] = &["No", "Not really", "Honestly", "I would say", "Generally", "Thankfully"];

const CONTROL_CLAUSES: &[&str] = &[
    "nothing like that has happened to me",
    "things have been pretty normal",
    "I sleep well and feel fine most days",
    "I have never noticed anything like that",
    "my friends and family keep me relaxed",
    "everything seems ordinary and calm",
    "I feel settled and comfortable",
    "life has been steady and routine",
    "I stay busy with sport and hobbies",
    "I feel confident and grounded",
];

const NEUTRAL_SENTENCES: &[&str] = &[
    "I guess it depends on the day.",
    "I was at school most of the week.",
    "My sister lives nearby.",
    "Work has been busy.",
    "Let me think about that for a second.",
    "We moved house last year.",
];

const GREETINGS: &[&str] = &[
    "Thanks for coming in today, how have things been going?",
    "Before we start, is this a good time to talk?",
    "Great, are you comfortable and ready to begin?",
];

/// A generated corpus with its ground-truth segmentation.
pub type SynthCorpus = Corpus;

/// Generates transcripts only.
pub fn generate_corpus(spec: &SynthSpec, bank: &QuestionBank) -> Result<Vec<Transcript>, CorpusError> {
    Ok(generate_with_gold(spec, bank)?.transcripts)
}

/// Generates a corpus together with gold segments.
///
/// Each transcript walks the bank domains in order: one interviewer question per
/// domain followed by an interviewee answer. Participants receive a fixed label;
/// exactly `round(chr_fraction * n_participants)` of them are CHR.
pub fn generate_with_gold(spec: &SynthSpec, bank: &QuestionBank) -> Result<SynthCorpus, CorpusError> {
    spec.validate()?;
    let matcher = Matcher::new(bank).map_err(|e| malformed(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let n_chr = ((spec.chr_fraction * spec.n_participants as f64).round() as usize).clamp(0, spec.n_participants);
    let mut labels: Vec<Label> = (0..spec.n_participants).map(|i| Label::from_chr(i < n_chr)).collect();
    labels.shuffle(&mut rng);

    let width = spec.n_participants.to_string().len().max(3);
    let mut transcripts = Vec::new();
    let mut gold = BTreeMap::new();
    for (p, &label) in labels.iter().enumerate() {
        let participant_id = format!("p{:0width$}", p + 1);
        let visits = rng.random_range(spec.transcripts_per_participant.0..=spec.transcripts_per_participant.1);
        for v in 0..visits {
            let transcript_id = format!("{participant_id}_v{}", v + 1);
            let (t, segments) = generate_transcript(spec, &matcher, &mut rng, transcript_id, participant_id.clone(), label)?;
            gold.insert(t.transcript_id.clone(), segments);
            transcripts.push(t);
        }
    }
    let mut corpus = Corpus::new(transcripts)?;
    corpus.gold = gold;
    Ok(corpus)
}

fn generate_transcript(
    spec: &SynthSpec,
    matcher: &Matcher<'_>,
    rng: &mut ChaCha8Rng,
    transcript_id: String,
    participant_id: String,
    label: Label,
) -> Result<(Transcript, Vec<Segment>), CorpusError> {
    let mut pairs: Vec<(Speaker, String)> = Vec::new();
    if rng.random_bool(spec.distractor_rate) {
        push_preamble(matcher, rng, label, &mut pairs);
    }
    let mut anchors = Vec::new();
    for domain in matcher.bank().domains() {
        if domain.questions.is_empty() {
            continue;
        }
        let source = domain.questions.choose(rng).expect("non-empty");
        let question = if rng.random_bool(spec.paraphrase_noise) {
            paraphrase(source, rng)
        } else {
            source.clone()
        };
        anchors.push((pairs.len(), domain.id, similarity(&question, source)));
        pairs.push((Speaker::Interviewer, question));
        pairs.push((Speaker::Interviewee, answer(spec, rng, label)));
    }
    let n_turns = pairs.len();
    let t = Transcript::from_pairs(transcript_id, participant_id, Some(label), pairs)?;
    Ok((t, segments_from_anchors(&anchors, n_turns)))
}

fn answer(spec: &SynthSpec, rng: &mut ChaCha8Rng, label: Label) -> String {
    let symptomatic = label == Label::Chr && rng.random_bool(spec.symptomatic_rate);
    let n = rng.random_range(1..=3);
    let mut sentences = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && rng.random_bool(0.25) {
            sentences.push(NEUTRAL_SENTENCES.choose(rng).expect("non-empty").to_string());
        } else {
            sentences.push(class_sentence(rng, symptomatic));
        }
    }
    sentences.join(" ")
}

fn class_sentence(rng: &mut ChaCha8Rng, symptomatic: bool) -> String {
    let (leads, clauses) = if symptomatic {
        (SYMPTOM_LEADS, SYMPTOM_CLAUSES)
    } else {
        (CONTROL_LEADS, CONTROL_CLAUSES)
    };
    format!("{}, {}.", leads.choose(rng).expect("non-empty"), clauses.choose(rng).expect("non-empty"))
}

/// Small talk whose interviewee content points at the opposite label, plus an
/// interviewer remark that resembles (but does not closely match) a template
/// question from a random domain.
fn push_preamble(matcher: &Matcher<'_>, rng: &mut ChaCha8Rng, label: Label, pairs: &mut Vec<(Speaker, String)>) {
    pairs.push((Speaker::Interviewer, GREETINGS.choose(rng).expect("non-empty").to_string()));
    let misleading = label == Label::Hc;
    let chat: Vec<String> = (0..4).map(|_| class_sentence(rng, misleading)).collect();
    pairs.push((Speaker::Interviewee, format!("I was just telling my friend about a film. {}", chat.join(" "))));
    if let Some(remark) = near_miss(matcher, rng) {
        pairs.push((Speaker::Interviewer, remark));
        let chat: Vec<String> = (0..3).map(|_| class_sentence(rng, misleading)).collect();
        pairs.push((Speaker::Interviewee, chat.join(" ")));
    }
}

/// A heavy paraphrase whose best bank score lands in `70..80`.
fn near_miss(matcher: &Matcher<'_>, rng: &mut ChaCha8Rng) -> Option<String> {
    let domains: Vec<_> = matcher.bank().domains().iter().filter(|d| !d.questions.is_empty()).collect();
    for _ in 0..200 {
        let d = domains.choose(rng)?;
        let source = d.questions.choose(rng)?;
        let mut candidate = source.clone();
        for _ in 0..12 {
            let next = edit_once(&candidate, rng);
            if similarity(&next, source) < PARAPHRASE_FLOOR {
                break;
            }
            candidate = next;
            let (_, best) = matcher.best_match(&candidate);
            if (70..80).contains(&best) {
                return Some(candidate);
            }
        }
    }
    None
}

/// Random synonym substitutions and word drops, stopping before similarity to
/// the source would fall below [`PARAPHRASE_FLOOR`]. At least one edit is
/// always attempted.
pub fn paraphrase(source: &str, rng: &mut impl Rng) -> String {
    let target_edits = rng.random_range(1..=6);
    let mut current = source.to_string();
    for _ in 0..target_edits {
        let next = edit_once(&current, rng);
        if similarity(&next, source) < PARAPHRASE_FLOOR {
            break;
        }
        current = next;
    }
    current
}

fn edit_once(sentence: &str, rng: &mut impl Rng) -> String {
    let mut words: Vec<String> = sentence.split_whitespace().map(str::to_string).collect();
    if words.len() < 2 {
        return sentence.to_string();
    }
    let substitutable: Vec<usize> = words
        .iter()
        .enumerate()
        .filter(|(_, w)| synonym(w).is_some())
        .map(|(i, _)| i)
        .collect();
    if !substitutable.is_empty() && rng.random_bool(0.6) {
        let i = *substitutable.choose(rng).expect("non-empty");
        let (core, tail) = split_trailing_punct(&words[i]);
        let replacement = synonym(core).expect("filtered");
        let replacement = if core.chars().next().is_some_and(char::is_uppercase) {
            capitalise(replacement)
        } else {
            replacement.to_string()
        };
        words[i] = format!("{replacement}{tail}");
    } else {
        // keep the first word so the sentence still reads as a question
        let i = rng.random_range(1..words.len());
        let removed = words.remove(i);
        let (_, tail) = split_trailing_punct(&removed);
        if !tail.is_empty() {
            if let Some(prev) = words.get_mut(i - 1) {
                let (core, _) = split_trailing_punct(prev);
                *prev = format!("{core}{tail}");
            }
        }
    }
    words.join(" ")
}

fn synonym(word: &str) -> Option<&'static str> {
    let (core, _) = split_trailing_punct(word);
    let lower = core.to_lowercase();
    SYNONYMS.iter().find(|(w, _)| *w == lower).map(|(_, s)| *s)
}

fn split_trailing_punct(word: &str) -> (&str, &str) {
    let end = word.trim_end_matches(|c: char| !c.is_alphanumeric()).len();
    word.split_at(end)
}

fn capitalise(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_line_labeled_text() {
        let t = parse_transcript(b"Interviewer: How are you?\nInterviewee: Fine.\n", TranscriptFormat::LabeledText).unwrap();
        assert_eq!(t.turns.len(), 2);
        assert_eq!(t.turns[0].index, 0);
        assert_eq!(t.turns[1].index, 1);
        assert_eq!(t.turns[0].speaker, Speaker::Interviewer);
        assert_eq!(t.turns[1].text, "Fine.");
        assert_eq!(t.label, None);
    }

    #[test]
    fn unknown_speaker_tag() {
        let err = parse_transcript(b"Doctor: hello\nInterviewee: hi", TranscriptFormat::LabeledText).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { .. }), "{err}");
        assert!(err.to_string().contains("Doctor"));
    }

    #[test]
    fn empty_turn_and_missing_speaker() {
        assert!(parse_transcript(b"Interviewer:   \nInterviewee: hi", TranscriptFormat::LabeledText).is_err());
        assert!(parse_transcript(b"Interviewer: a\nInterviewer: b", TranscriptFormat::LabeledText).is_err());
    }

    #[test]
    fn invalid_utf8_is_encoding_error() {
        let err = parse_transcript(&[0x49, 0x6e, 0xff, 0xfe], TranscriptFormat::LabeledText).unwrap_err();
        assert!(matches!(err, CorpusError::Encoding(_)));
    }

    #[test]
    fn headers_supply_metadata() {
        let raw = "# transcript_id: T9\n# participant_id: P3\n# label: HC\nInterviewer: q\nInterviewee: a\n";
        let t = parse_transcript(raw.as_bytes(), TranscriptFormat::LabeledText).unwrap();
        assert_eq!((t.transcript_id.as_str(), t.participant_id.as_str(), t.label), ("T9", "P3", Some(Label::Hc)));
        let again = parse_transcript(t.to_labeled_text().as_bytes(), TranscriptFormat::LabeledText).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn json_rejects_unknown_fields() {
        let raw = r#"{"transcript_id":"a","participant_id":"b","dob":"2000","turns":[]}"#;
        assert!(parse_transcript(raw.as_bytes(), TranscriptFormat::Json).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let t = parse_transcript(b"Interviewer: q\nInterviewee: a", TranscriptFormat::LabeledText).unwrap();
        assert!(Corpus::new(vec![t.clone(), t]).is_err());
    }

    #[test]
    fn zero_noise_questions_are_verbatim() {
        let bank = QuestionBank::psychs_default();
        let spec = SynthSpec {
            n_participants: 10,
            seed: 1,
            ..SynthSpec::default()
        };
        let corpus = generate_with_gold(&spec, &bank).unwrap();
        assert_eq!(corpus.len(), 10);
        let all_questions: BTreeSet<&str> = bank.domains().iter().flat_map(|d| d.questions.iter().map(String::as_str)).collect();
        for t in &corpus.transcripts {
            let asked: Vec<&str> = t
                .turns
                .iter()
                .filter(|x| x.speaker == Speaker::Interviewer)
                .map(|x| x.text.as_str())
                .collect();
            assert_eq!(asked.len(), 15);
            assert!(asked.iter().all(|q| all_questions.contains(q)));
            for (d, q) in bank.domains().iter().zip(&asked) {
                assert!(d.questions.iter().any(|x| x == q));
            }
            assert_eq!(corpus.gold[&t.transcript_id].len(), 15);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let bank = QuestionBank::psychs_default();
        let spec = SynthSpec {
            n_participants: 12,
            transcripts_per_participant: (1, 3),
            paraphrase_noise: 0.5,
            distractor_rate: 0.5,
            seed: 99,
            ..SynthSpec::default()
        };
        let a = generate_with_gold(&spec, &bank).unwrap();
        let b = generate_with_gold(&spec, &bank).unwrap();
        let bytes = |c: &Corpus| c.transcripts.iter().map(Transcript::to_json).collect::<String>();
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(a.gold, b.gold);
        let other = generate_with_gold(&SynthSpec { seed: 100, ..spec }, &bank).unwrap();
        assert_ne!(bytes(&a), bytes(&other));
    }

    #[test]
    fn labels_constant_per_participant() {
        let bank = QuestionBank::psychs_default();
        let spec = SynthSpec {
            n_participants: 30,
            transcripts_per_participant: (1, 4),
            ..SynthSpec::default()
        };
        let corpus = generate_with_gold(&spec, &bank).unwrap();
        let mut by_participant: BTreeMap<&str, BTreeSet<Label>> = BTreeMap::new();
        for t in &corpus.transcripts {
            by_participant.entry(&t.participant_id).or_default().insert(t.label.unwrap());
        }
        assert_eq!(by_participant.len(), 30);
        assert!(by_participant.values().all(|s| s.len() == 1));
    }

    #[test]
    fn paraphrases_stay_above_floor() {
        let bank = QuestionBank::psychs_default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in bank.domains() {
            for q in &d.questions {
                for _ in 0..5 {
                    let p = paraphrase(q, &mut rng);
                    assert!(similarity(&p, q) >= PARAPHRASE_FLOOR, "{q} -> {p}");
                }
            }
        }
    }

    #[test]
    fn spec_validation() {
        let bad = SynthSpec {
            chr_fraction: 1.0,
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthSpec {
            paraphrase_noise: 1.5,
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthSpec {
            transcripts_per_participant: (2, 1),
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn corpus_dir_round_trip() {
        let bank = QuestionBank::psychs_default();
        let spec = SynthSpec {
            n_participants: 4,
            paraphrase_noise: 0.3,
            seed: 3,
            ..SynthSpec::default()
        };
        let corpus = generate_with_gold(&spec, &bank).unwrap();
        for format in [TranscriptFormat::Json, TranscriptFormat::LabeledText] {
            let dir = tempfile::tempdir().unwrap();
            corpus.write_dir(dir.path(), format).unwrap();
            let back = Corpus::load_dir(dir.path()).unwrap();
            assert_eq!(back, corpus);
        }
    }

    #[test]
    fn manifestless_dir_uses_file_stems() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), "Interviewer: q\nInterviewee: a\n").unwrap();
        std::fs::write(dir.path().join("a.txt"), "Interviewer: q\nInterviewee: a\n").unwrap();
        let c = Corpus::load_dir(dir.path()).unwrap();
        let ids: Vec<&str> = c.transcripts.iter().map(|t| t.transcript_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }
}
