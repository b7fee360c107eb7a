//! The five explanation formats and the per-transcript bundle.
//!
//! Colour convention everywhere: positive phi (toward CHR) is red, negative
//! phi (toward control) is blue.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{
    attribute_tokens, domain_scores, select_anchor, sentence_scores, sentence_token_spans, top_words_all, AttributionError,
    AttributionMap, Baseline, DomainScore, MethodChoice, SentenceScore,
};
use crate::classifier::LinearModel;
use crate::corpus::{Label, Speaker};
use crate::domain::DomainId;
use crate::gateway::{GatewayError, GenRequest, GenSettings, TextGenerator};
use crate::hashing::sha256_hex;
use crate::summarizer::{Backend, SegmentText};
use crate::text::{normalize_whitespace, sentence_spans, split_sentences, tokenize, tokenize_with_spans};

pub const RED: (u8, u8, u8) = (214, 39, 40);
pub const BLUE: (u8, u8, u8) = (31, 119, 180);
const NEUTRAL: &str = "#999999";

pub const WORD_BARS_FILE: &str = "word_bars.svg";
pub const HEATMAP_FILE: &str = "heatmap.html";
pub const SYMPTOM_PLOT_FILE: &str = "symptom_plot.svg";
pub const SENTENCE_SUMMARY_FILE: &str = "sentence_summary.txt";
pub const NARRATIVE_FILE: &str = "narrative.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const DEFAULT_TOP_WORDS: usize = 10;
pub const NARRATIVE_MAX_SENTENCES: usize = 3;
pub const MULTIPLE_NARRATIVE_DOMAINS: usize = 3;

const DESCRIPTION_HEAD: &str =
    "You are an expert clinical interviewer. Rewrite the excerpt into ONE clinician-friendly paragraph (max 3 sentences) describing ";
const DESCRIPTION_MID: &str = ".\nExcerpt: ";
const QUOTE_HEAD: &str = "Provide ONLY the interviewee quote (enclosed in double quotation marks) that clearly illustrates ";
const QUOTE_SUPPORTS: &str = " and supports \"";
const QUOTE_MID: &str = "\". Output the quote and nothing else.\nTranscript: ";
const QUOTE_TAIL: &str = "\nQuote:";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExplainError {
    #[error("nothing to render")]
    EmptyInput,
    #[error("attribution tokens do not align with the text: {0}")]
    TokenTextMismatch(String),
    #[error("original segment text is missing")]
    MissingSegmentText,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error("I/O error on {artifact}: {reason}")]
    Io { artifact: String, reason: String },
}

fn io_err(artifact: impl Into<String>) -> impl FnOnce(std::io::Error) -> ExplainError {
    let artifact = artifact.into();
    move |e| ExplainError::Io {
        artifact,
        reason: e.to_string(),
    }
}

pub fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn hex((r, g, b): (u8, u8, u8)) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn sign_colour(v: f64) -> String {
    if v > 0.0 {
        hex(RED)
    } else if v < 0.0 {
        hex(BLUE)
    } else {
        NEUTRAL.to_string()
    }
}

fn max_abs(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

const SVG_WIDTH: f64 = 640.0;
const LABEL_WIDTH: f64 = 200.0;
const VALUE_WIDTH: f64 = 70.0;
const ROW: f64 = 24.0;
const BAR: f64 = 16.0;
const TOP: f64 = 36.0;

fn svg_open(out: &mut String, height: f64, title: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_WIDTH:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {SVG_WIDTH:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        SVG_WIDTH / 2.0,
        xml_escape(title)
    );
}

/// Horizontal bars of `|net_phi|`, scaled to the largest magnitude.
pub fn render_word_bars(top_words: &[(String, f64)]) -> Result<String, ExplainError> {
    if top_words.is_empty() {
        return Err(ExplainError::EmptyInput);
    }
    let span = SVG_WIDTH - LABEL_WIDTH - VALUE_WIDTH - 10.0;
    let max = max_abs(top_words.iter().map(|(_, v)| *v));
    let height = TOP + ROW * top_words.len() as f64 + 10.0;
    let mut out = String::new();
    svg_open(&mut out, height, "Top contributing words");
    for (i, (word, v)) in top_words.iter().enumerate() {
        let y = TOP + ROW * i as f64;
        let w = if max > 0.0 { span * v.abs() / max } else { 0.0 };
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            LABEL_WIDTH - 6.0,
            y + BAR - 4.0,
            xml_escape(word)
        );
        let _ = writeln!(
            out,
            "<rect x=\"{LABEL_WIDTH:.1}\" y=\"{y:.1}\" width=\"{w:.2}\" height=\"{BAR:.1}\" fill=\"{}\"/>",
            sign_colour(*v)
        );
        let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{:.1}\">{v:+.4}</text>", LABEL_WIDTH + w + 4.0, y + BAR - 4.0);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// One text block of a heatmap.
pub struct HeatmapSection<'a> {
    pub title: Option<String>,
    pub text: &'a str,
    pub map: &'a AttributionMap,
}

fn check_alignment(text: &str, map: &AttributionMap) -> Result<Vec<(String, std::ops::Range<usize>)>, ExplainError> {
    let spans = tokenize_with_spans(text);
    if spans.len() != map.tokens.len() || map.phi.len() != map.tokens.len() {
        return Err(ExplainError::TokenTextMismatch(format!(
            "{} tokens in text, {} in map",
            spans.len(),
            map.tokens.len()
        )));
    }
    if let Some((i, _)) = spans.iter().zip(&map.tokens).enumerate().find(|(_, ((a, _), b))| a != *b) {
        return Err(ExplainError::TokenTextMismatch(format!(
            "token {i}: text has {:?}, map has {:?}",
            spans[i].0, map.tokens[i]
        )));
    }
    Ok(spans)
}

/// Inline token heatmap; opacity is `|phi|` over the largest `|phi|` across all sections.
pub fn render_heatmap_sections(sections: &[HeatmapSection<'_>]) -> Result<String, ExplainError> {
    if sections.is_empty() {
        return Err(ExplainError::EmptyInput);
    }
    let aligned: Vec<_> = sections
        .iter()
        .map(|s| check_alignment(s.text, s.map))
        .collect::<Result<_, _>>()?;
    let max = max_abs(sections.iter().flat_map(|s| s.map.phi.iter().copied()));
    let mut out = String::new();
    out.push_str("<html xmlns=\"http://www.w3.org/1999/xhtml\">\n<head>\n<meta charset=\"utf-8\"/>\n<title>Token heatmap</title>\n</head>\n");
    out.push_str("<body style=\"font-family: sans-serif; line-height: 1.8; max-width: 48em;\">\n");
    let legend = format!(
        "<p style=\"font-size: 0.9em;\"><span style=\"background-color: rgba({},{},{},1)\">red</span> pushes toward CHR, <span style=\"background-color: rgba({},{},{},1)\">blue</span> toward control; darker is stronger.</p>\n",
        RED.0, RED.1, RED.2, BLUE.0, BLUE.1, BLUE.2
    );
    out.push_str(&legend);
    for (section, spans) in sections.iter().zip(&aligned) {
        if let Some(t) = &section.title {
            let _ = writeln!(out, "<h3>{}</h3>", xml_escape(t));
        }
        out.push_str("<p>");
        let mut cursor = 0;
        for ((_, range), phi) in spans.iter().zip(&section.map.phi) {
            out.push_str(&xml_escape(&section.text[cursor..range.start]));
            let (r, g, b) = if *phi < 0.0 { BLUE } else { RED };
            let alpha = if max > 0.0 { phi.abs() / max } else { 0.0 };
            let _ = write!(
                out,
                "<span style=\"background-color: rgba({r},{g},{b},{alpha:.3})\" title=\"{phi:+.4}\">{}</span>",
                xml_escape(&section.text[range.clone()])
            );
            cursor = range.end;
        }
        out.push_str(&xml_escape(&section.text[cursor..]));
        out.push_str("</p>\n");
    }
    out.push_str("</body>\n</html>\n");
    Ok(out)
}

pub fn render_heatmap(text: &str, map: &AttributionMap) -> Result<String, ExplainError> {
    render_heatmap_sections(&[HeatmapSection { title: None, text, map }])
}

/// Signed horizontal bars from a central zero axis, one per domain in P order.
pub fn render_symptom_plot(scores: &[DomainScore]) -> Result<String, ExplainError> {
    if scores.is_empty() {
        return Err(ExplainError::EmptyInput);
    }
    let mut sorted: Vec<&DomainScore> = scores.iter().collect();
    sorted.sort_by_key(|s| s.domain_id);
    let half = (SVG_WIDTH - LABEL_WIDTH - 20.0) / 2.0;
    let axis = LABEL_WIDTH + half;
    let max = max_abs(sorted.iter().map(|s| s.mean_net));
    let height = TOP + ROW * sorted.len() as f64 + 30.0;
    let mut out = String::new();
    svg_open(&mut out, height, "Mean net attribution per symptom domain");
    for (i, s) in sorted.iter().enumerate() {
        let y = TOP + ROW * i as f64;
        let len = if max > 0.0 { half * s.mean_net.abs() / max } else { 0.0 };
        let x = if s.mean_net < 0.0 { axis - len } else { axis };
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            LABEL_WIDTH - 6.0,
            y + BAR - 4.0,
            xml_escape(&s.domain_id.label())
        );
        let _ = writeln!(
            out,
            "<rect x=\"{x:.2}\" y=\"{y:.1}\" width=\"{len:.2}\" height=\"{BAR:.1}\" fill=\"{}\"><title>{:+.6}</title></rect>",
            sign_colour(s.mean_net),
            s.mean_net
        );
    }
    let bottom = TOP + ROW * sorted.len() as f64;
    let _ = writeln!(
        out,
        "<line x1=\"{axis:.2}\" y1=\"{:.1}\" x2=\"{axis:.2}\" y2=\"{bottom:.1}\" stroke=\"#000000\" stroke-width=\"1\"/>",
        TOP - 4.0
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{}\">control</text>",
        LABEL_WIDTH,
        bottom + 18.0,
        hex(BLUE)
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" fill=\"{}\">CHR-P</text>",
        SVG_WIDTH - 20.0,
        bottom + 18.0,
        hex(RED)
    );
    out.push_str("</svg>\n");
    Ok(out)
}

fn header(domain: Option<DomainId>) -> String {
    match domain {
        Some(d) => format!("[{}]", d.label()),
        None => "[Whole interview]".to_string(),
    }
}

/// `"[<id> <name>]\n<sentence>"`.
pub fn sentence_summary(anchor: &SentenceScore, domain: Option<DomainId>) -> String {
    format!("{}\n{}", header(domain), anchor.text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarrativePrompts {
    pub excerpt: String,
    pub description: String,
    pub quote: String,
}

fn symptom(domain: Option<DomainId>) -> String {
    match domain {
        Some(d) => d.name().to_string(),
        None => "the reported experiences".to_string(),
    }
}

pub fn description_prompt(symptom: &str, excerpt: &str) -> String {
    [DESCRIPTION_HEAD, symptom, DESCRIPTION_MID, excerpt].concat()
}

pub fn quote_prompt(symptom: &str, anchor: &str, segment: &str) -> String {
    [QUOTE_HEAD, symptom, QUOTE_SUPPORTS, anchor, QUOTE_MID, segment, QUOTE_TAIL].concat()
}

/// The anchor with one sentence of context on each side, clamped at the ends.
pub fn context_excerpt(sentences: &[&str], anchor_index: usize) -> String {
    let lo = anchor_index.saturating_sub(1);
    let hi = (anchor_index + 1).min(sentences.len() - 1);
    sentences[lo..=hi].join(" ")
}

pub fn build_narrative_prompts(
    anchor: &SentenceScore,
    summary_sentences: &[&str],
    segment_text: &str,
    domain: Option<DomainId>,
) -> Result<NarrativePrompts, ExplainError> {
    if segment_text.trim().is_empty() {
        return Err(ExplainError::MissingSegmentText);
    }
    if anchor.index >= summary_sentences.len() {
        return Err(ExplainError::InvalidInput(format!(
            "anchor sentence {} of {}",
            anchor.index,
            summary_sentences.len()
        )));
    }
    let excerpt = context_excerpt(summary_sentences, anchor.index);
    let name = symptom(domain);
    Ok(NarrativePrompts {
        description: description_prompt(&name, &excerpt),
        quote: quote_prompt(&name, &anchor.text, segment_text),
        excerpt,
    })
}

/// Leading `max` sentences of `text`.
pub fn truncate_sentences(text: &str, max: usize) -> String {
    let spans = sentence_spans(text);
    match (spans.first(), spans.get(max.saturating_sub(1)).or(spans.last())) {
        (Some(first), Some(last)) if max > 0 => text[first.start..last.end].to_string(),
        _ => String::new(),
    }
}

fn strip_quote_marks(s: &str) -> &str {
    s.trim()
        .trim_start_matches(['"', '\u{201c}', '\u{201d}'])
        .trim_end_matches(['"', '\u{201c}', '\u{201d}'])
        .trim()
}

/// Whitespace-normalised substring test.
pub fn quote_in_segment(quote: &str, segment: &str) -> bool {
    let q = normalize_whitespace(quote);
    !q.is_empty() && normalize_whitespace(segment).contains(&q)
}

/// Interviewee sentence of the original segment with the highest mean phi
/// under `model` (earliest on ties, first sentence when nothing is in vocabulary).
pub fn fallback_quote(model: &LinearModel, segment: &SegmentText) -> Result<String, ExplainError> {
    let sentences = segment.interviewee_sentences();
    let Some(first) = sentences.first() else {
        return Err(ExplainError::MissingSegmentText);
    };
    let joined = sentences.join(" ");
    let tokens = tokenize(&joined);
    match attribute_tokens(model, &tokens, "quote", segment.domain_id, MethodChoice::Linear, &Baseline::Empty) {
        Ok(map) => {
            let spans = sentence_token_spans(&joined);
            let scores = sentence_scores(&map, &spans)?;
            Ok(select_anchor(&scores)?.text.clone())
        }
        Err(AttributionError::EmptyVocabOverlap) => Ok(first.to_string()),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NarrativeBackend {
    Llm,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Narrative {
    pub domain_id: Option<DomainId>,
    /// Description as produced, before sentence truncation.
    pub description: String,
    pub paragraph: String,
    pub quote: String,
    pub backend: NarrativeBackend,
    /// The generated quote failed the substring check and was replaced.
    pub quote_fallback: bool,
}

impl Narrative {
    pub fn text(&self) -> String {
        format!("{}\n{}\n\"{}\"", header(self.domain_id), self.paragraph, self.quote)
    }
}

/// Narrative paragraph plus a verbatim interviewee quote.
///
/// With a gateway, the description and the quote are generated; a quote not
/// found in `segment_text` is replaced by `fallback_quote`. Without one, the
/// excerpt itself is the paragraph.
pub fn narrative_summary(
    gateway: Option<&dyn TextGenerator>,
    prompts: &NarrativePrompts,
    domain: Option<DomainId>,
    segment_text: &str,
    fallback_quote: &str,
    settings: &GenSettings,
) -> Result<Narrative, ExplainError> {
    let Some(g) = gateway else {
        return Ok(Narrative {
            domain_id: domain,
            description: prompts.excerpt.clone(),
            paragraph: truncate_sentences(&prompts.excerpt, NARRATIVE_MAX_SENTENCES),
            quote: fallback_quote.to_string(),
            backend: NarrativeBackend::Fallback,
            quote_fallback: false,
        });
    };
    let description = g.generate(&GenRequest::new(prompts.description.clone(), settings)?)?.text;
    let raw_quote = g.generate(&GenRequest::new(prompts.quote.clone(), settings)?)?.text;
    let candidate = strip_quote_marks(&raw_quote);
    let accepted = quote_in_segment(candidate, segment_text);
    if !accepted {
        tracing::warn!("generated quote not found in segment; using fallback quote");
    }
    Ok(Narrative {
        domain_id: domain,
        paragraph: truncate_sentences(description.trim(), NARRATIVE_MAX_SENTENCES),
        description,
        quote: if accepted {
            normalize_whitespace(candidate)
        } else {
            fallback_quote.to_string()
        },
        backend: NarrativeBackend::Llm,
        quote_fallback: !accepted,
    })
}

/// Everything the bundle needs about one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentArtifact {
    pub segment: SegmentText,
    pub summary: String,
    pub summary_backend: Backend,
    pub map: AttributionMap,
}

impl SegmentArtifact {
    pub fn id(&self) -> &str {
        &self.map.segment
    }
}

/// Highest-scoring summary sentence across segments, with its segment index.
pub fn transcript_anchor(segments: &[SegmentArtifact]) -> Result<(usize, SentenceScore), ExplainError> {
    let mut best: Option<(usize, SentenceScore)> = None;
    for (k, seg) in segments.iter().enumerate() {
        let spans = sentence_token_spans(&seg.summary);
        if spans.is_empty() {
            continue;
        }
        let scores = sentence_scores(&seg.map, &spans)?;
        let top = select_anchor(&scores)?;
        if best.as_ref().is_none_or(|(_, b)| top.mean_phi > b.mean_phi) {
            best = Some((k, top.clone()));
        }
    }
    best.ok_or(ExplainError::Attribution(AttributionError::NoSentences))
}

/// Narrative for one segment, anchored at its best summary sentence.
pub fn segment_narrative(
    seg: &SegmentArtifact,
    anchor: &SentenceScore,
    model: &LinearModel,
    gateway: Option<&dyn TextGenerator>,
    settings: &GenSettings,
) -> Result<Narrative, ExplainError> {
    let sentences = split_sentences(&seg.summary);
    let raw = seg.segment.render();
    let prompts = build_narrative_prompts(anchor, &sentences, &raw, seg.segment.domain_id)?;
    let quote = fallback_quote(model, &seg.segment)?;
    narrative_summary(gateway, &prompts, seg.segment.domain_id, &raw, &quote, settings)
}

/// Narratives for the domains with the largest `|mean_net|`, strongest first.
pub fn multiple_narratives(
    segments: &[SegmentArtifact],
    model: &LinearModel,
    gateway: Option<&dyn TextGenerator>,
    settings: &GenSettings,
) -> Result<Vec<Narrative>, ExplainError> {
    let maps: Vec<AttributionMap> = segments.iter().map(|s| s.map.clone()).collect();
    let mut scores = domain_scores(&maps);
    scores.sort_by(|a, b| b.mean_net.abs().total_cmp(&a.mean_net.abs()).then(a.domain_id.cmp(&b.domain_id)));
    let mut out = Vec::new();
    for s in scores.iter().take(MULTIPLE_NARRATIVE_DOMAINS) {
        let group: Vec<SegmentArtifact> = segments
            .iter()
            .filter(|x| x.segment.domain_id == Some(s.domain_id))
            .cloned()
            .collect();
        let (k, anchor) = transcript_anchor(&group)?;
        out.push(segment_narrative(&group[k], &anchor, model, gateway, settings)?);
    }
    Ok(out)
}

/// Inputs for one transcript's bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptArtifacts {
    pub transcript_id: String,
    pub label: Label,
    pub prob_chr: f64,
    pub segments: Vec<SegmentArtifact>,
    /// Present for CHR-predicted transcripts.
    pub narrative: Option<Narrative>,
    pub anchor: Option<(usize, SentenceScore)>,
}

/// Computes the anchor and (for CHR predictions) the narrative.
pub fn explain_transcript(
    transcript_id: &str,
    label: Label,
    prob_chr: f64,
    segments: Vec<SegmentArtifact>,
    model: &LinearModel,
    gateway: Option<&dyn TextGenerator>,
    settings: &GenSettings,
) -> Result<TranscriptArtifacts, ExplainError> {
    let mut out = TranscriptArtifacts {
        transcript_id: transcript_id.to_string(),
        label,
        prob_chr,
        segments,
        narrative: None,
        anchor: None,
    };
    if label.is_chr() {
        let (k, anchor) = transcript_anchor(&out.segments)?;
        out.narrative = Some(segment_narrative(&out.segments[k], &anchor, model, gateway, settings)?);
        out.anchor = Some((k, anchor));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub sha256: String,
    pub backend: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestInput {
    pub kind: String,
    pub id: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub transcript_id: String,
    pub label: Label,
    pub files: Vec<ManifestFile>,
    pub inputs: Vec<ManifestInput>,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationBundle {
    pub transcript_id: String,
    pub label: Label,
    pub dir: PathBuf,
    pub manifest: Manifest,
}

/// Renders every file of a bundle in memory, manifest last.
pub fn render_bundle(a: &TranscriptArtifacts) -> Result<(Vec<(String, String)>, Manifest), ExplainError> {
    if a.segments.is_empty() {
        return Err(ExplainError::EmptyInput);
    }
    let maps: Vec<AttributionMap> = a.segments.iter().map(|s| s.map.clone()).collect();
    let mut files: Vec<(String, String)> = Vec::new();
    let mut entries = Vec::new();
    let mut notes = Vec::new();
    let mut add = |files: &mut Vec<(String, String)>, name: &str, body: String, backend: &str, flags: Vec<String>| {
        entries.push(ManifestFile {
            name: name.to_string(),
            sha256: sha256_hex(&body),
            backend: backend.to_string(),
            flags,
        });
        files.push((name.to_string(), body));
    };

    let words = top_words_all(&maps, DEFAULT_TOP_WORDS);
    add(&mut files, WORD_BARS_FILE, render_word_bars(&words)?, "native", Vec::new());

    let sections: Vec<HeatmapSection<'_>> = a
        .segments
        .iter()
        .map(|s| HeatmapSection {
            title: Some(header(s.segment.domain_id)),
            text: &s.summary,
            map: &s.map,
        })
        .collect();
    add(&mut files, HEATMAP_FILE, render_heatmap_sections(&sections)?, "native", Vec::new());

    let scores = domain_scores(&maps);
    if scores.is_empty() {
        notes.push("no domain segments; symptom plot shows no bars".to_string());
        add(&mut files, SYMPTOM_PLOT_FILE, render_empty_symptom_plot(), "native", Vec::new());
    } else {
        add(&mut files, SYMPTOM_PLOT_FILE, render_symptom_plot(&scores)?, "native", Vec::new());
    }

    match (&a.anchor, &a.narrative) {
        (Some((k, anchor)), Some(n)) => {
            let seg = &a.segments[*k];
            let backend = match seg.summary_backend {
                Backend::Llm => "llm",
                Backend::Extractive => "extractive",
            };
            add(
                &mut files,
                SENTENCE_SUMMARY_FILE,
                sentence_summary(anchor, seg.segment.domain_id),
                backend,
                Vec::new(),
            );
            let (nb, flags) = match (n.backend, n.quote_fallback) {
                (NarrativeBackend::Llm, false) => ("llm", Vec::new()),
                (NarrativeBackend::Llm, true) => ("llm", vec!["quote_not_found".to_string()]),
                (NarrativeBackend::Fallback, _) => ("fallback", Vec::new()),
            };
            add(&mut files, NARRATIVE_FILE, n.text(), nb, flags);
        }
        _ => notes.push(format!(
            "predicted {}: sentence-level and narrative summaries are produced for CHR predictions only",
            a.label
        )),
    }

    let mut inputs = Vec::new();
    for s in &a.segments {
        inputs.push(ManifestInput {
            kind: "summary".into(),
            id: s.id().to_string(),
            sha256: sha256_hex(&s.summary),
        });
        inputs.push(ManifestInput {
            kind: "attribution".into(),
            id: s.id().to_string(),
            sha256: sha256_hex(s.map.to_json()),
        });
    }
    let manifest = Manifest {
        transcript_id: a.transcript_id.clone(),
        label: a.label,
        files: entries,
        inputs,
        notes,
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("serialisable");
    json.push('\n');
    files.push((MANIFEST_FILE.to_string(), json));
    Ok((files, manifest))
}

fn render_empty_symptom_plot() -> String {
    let mut out = String::new();
    svg_open(&mut out, TOP + 10.0, "Mean net attribution per symptom domain");
    out.push_str("</svg>\n");
    out
}

/// File-system-safe directory name for a transcript.
pub fn bundle_dir_name(transcript_id: &str) -> String {
    transcript_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

/// Writes the bundle to `<out_root>/<transcript_id>/`, replacing any previous one.
///
/// Files go to a sibling temporary directory that is renamed into place.
pub fn build_bundle(a: &TranscriptArtifacts, out_root: &Path) -> Result<ExplanationBundle, ExplainError> {
    let (files, manifest) = render_bundle(a)?;
    std::fs::create_dir_all(out_root).map_err(io_err(out_root.display().to_string()))?;
    let name = bundle_dir_name(&a.transcript_id);
    let dir = out_root.join(&name);
    let tmp = out_root.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(io_err(tmp.display().to_string()))?;
    }
    std::fs::create_dir(&tmp).map_err(io_err(tmp.display().to_string()))?;
    for (file, body) in &files {
        std::fs::write(tmp.join(file), body).map_err(io_err(file.clone()))?;
    }
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(io_err(dir.display().to_string()))?;
    }
    std::fs::rename(&tmp, &dir).map_err(io_err(dir.display().to_string()))?;
    Ok(ExplanationBundle {
        transcript_id: a.transcript_id.clone(),
        label: a.label,
        dir,
        manifest,
    })
}

/// Re-hashes the files of a written bundle against its manifest.
pub fn verify_bundle(dir: &Path) -> Result<Manifest, ExplainError> {
    let raw = std::fs::read(dir.join(MANIFEST_FILE)).map_err(io_err(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| ExplainError::Io {
        artifact: MANIFEST_FILE.into(),
        reason: e.to_string(),
    })?;
    for f in &manifest.files {
        let body = std::fs::read(dir.join(&f.name)).map_err(io_err(f.name.clone()))?;
        if sha256_hex(&body) != f.sha256 {
            return Err(ExplainError::Io {
                artifact: f.name.clone(),
                reason: "content hash differs from manifest".into(),
            });
        }
    }
    Ok(manifest)
}

/// Pairs summaries with attribution maps by segment id.
pub fn join_artifacts(
    segments: Vec<(SegmentText, String, Backend, String)>,
    maps: &[AttributionMap],
) -> Result<Vec<SegmentArtifact>, ExplainError> {
    segments
        .into_iter()
        .map(|(segment, summary, summary_backend, id)| {
            let map = maps.iter().find(|m| m.segment == id).cloned().ok_or_else(|| ExplainError::Io {
                artifact: format!("attribution map for {id}"),
                reason: "not found".into(),
            })?;
            Ok(SegmentArtifact {
                segment,
                summary,
                summary_backend,
                map,
            })
        })
        .collect()
}

/// Interviewee turns of a segment as plain text.
pub fn interviewee_text(segment: &SegmentText) -> String {
    segment
        .turns
        .iter()
        .filter(|(s, _)| *s == Speaker::Interviewee)
        .map(|(_, t)| t.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::Method;
    use crate::classifier::{ClassWeights, TrainConfig, Vocab};
    use crate::gateway::{EchoGenerator, ScriptedGenerator};

    fn map_for(text: &str, phi_of: impl Fn(&str) -> f64, domain: Option<u8>, id: &str) -> AttributionMap {
        let tokens = tokenize(text);
        AttributionMap {
            segment: id.into(),
            domain_id: domain.and_then(DomainId::new),
            phi: tokens.iter().map(|t| phi_of(t)).collect(),
            full_value: tokens.iter().map(|t| phi_of(t)).sum(),
            tokens,
            baseline_value: 0.0,
            method: Method::Linear,
            max_se: None,
        }
    }

    fn parse(doc: &str) {
        roxmltree::Document::parse(doc).unwrap_or_else(|e| panic!("{e}\n{doc}"));
    }

    #[test]
    fn word_bars_single_full_red() {
        let svg = render_word_bars(&[("voices".into(), 1.0)]).unwrap();
        parse(&svg);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let bar = doc
            .descendants()
            .find(|n| n.has_tag_name("rect") && n.attribute("fill") == Some("#d62728"))
            .unwrap();
        assert_eq!(bar.attribute("width"), Some("360.00"));
        assert_eq!(render_word_bars(&[]), Err(ExplainError::EmptyInput));
    }

    #[test]
    fn word_bars_zero_and_negative() {
        let svg = render_word_bars(&[("a".into(), -0.5), ("b&c".into(), 0.0)]).unwrap();
        parse(&svg);
        assert!(svg.contains("width=\"0.00\""));
        assert!(svg.contains("#1f77b4"));
        assert!(svg.contains("b&amp;c"));
    }

    #[test]
    fn heatmap_opacity_rules() {
        let text = "Voices, voices!";
        let m = map_for(text, |_| 0.2, None, "s");
        let html = render_heatmap(text, &m).unwrap();
        parse(&html);
        assert_eq!(html.matches("0.200)").count(), 0);
        assert_eq!(html.matches(",1.000)\"").count(), 2);
        assert!(html.contains("</span>, <span"));
        let z = map_for(text, |_| 0.0, None, "s");
        assert_eq!(render_heatmap(text, &z).unwrap().matches(",0.000)\"").count(), 2);
    }

    #[test]
    fn heatmap_sign_hue() {
        let text = "good bad";
        let m = map_for(text, |t| if t == "bad" { 1.0 } else { -0.5 }, None, "s");
        let html = render_heatmap(text, &m).unwrap();
        assert!(html.contains("rgba(31,119,180,0.500)\" title=\"-0.5000\">good"));
        assert!(html.contains("rgba(214,39,40,1.000)\" title=\"+1.0000\">bad"));
    }

    #[test]
    fn heatmap_mismatch() {
        let m = map_for("one two", |_| 1.0, None, "s");
        assert!(matches!(render_heatmap("one three", &m), Err(ExplainError::TokenTextMismatch(_))));
        assert!(matches!(render_heatmap("one", &m), Err(ExplainError::TokenTextMismatch(_))));
    }

    fn score(d: u8, v: f64) -> DomainScore {
        DomainScore {
            domain_id: DomainId::new(d).unwrap(),
            mean_net: v,
            n_tokens: 3,
        }
    }

    #[test]
    fn symptom_plot_axis_and_mirror() {
        let svg = render_symptom_plot(&[score(3, 0.0)]).unwrap();
        parse(&svg);
        assert!(svg.contains("width=\"0.00\""));
        let svg = render_symptom_plot(&[score(2, -0.4), score(1, 0.4)]).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let bars: Vec<_> = doc
            .descendants()
            .filter(|n| n.has_tag_name("rect") && n.attribute("height") == Some("16.0"))
            .collect();
        assert_eq!(bars.len(), 2);
        // P1 first (positive, right of axis), then P2 mirrored to the left
        let x0: f64 = bars[0].attribute("x").unwrap().parse().unwrap();
        let x1: f64 = bars[1].attribute("x").unwrap().parse().unwrap();
        let w: f64 = bars[0].attribute("width").unwrap().parse().unwrap();
        assert_eq!(bars[0].attribute("width"), bars[1].attribute("width"));
        assert!((x1 + w - x0).abs() < 0.01);
        assert_eq!(bars[0].attribute("fill"), Some("#d62728"));
        assert_eq!(bars[1].attribute("fill"), Some("#1f77b4"));
        assert_eq!(render_symptom_plot(&[]), Err(ExplainError::EmptyInput));
    }

    #[test]
    fn sentence_summary_format() {
        let a = SentenceScore {
            index: 0,
            text: "They admit to constantly dwelling on past problems.".into(),
            mean_phi: 0.3,
        };
        assert_eq!(
            sentence_summary(&a, DomainId::new(4)),
            "[P4 Ideas of Guilt]\nThey admit to constantly dwelling on past problems."
        );
    }

    #[test]
    fn excerpt_clamps() {
        let s = ["A.", "B.", "C.", "D."];
        assert_eq!(context_excerpt(&s, 0), "A. B.");
        assert_eq!(context_excerpt(&s, 2), "B. C. D.");
        assert_eq!(context_excerpt(&s, 3), "C. D.");
        assert_eq!(context_excerpt(&s[..1], 0), "A.");
        for n in 1..8 {
            let v: Vec<&str> = s.iter().cycle().take(n).copied().collect();
            for i in 0..n {
                assert!(split_sentences(&context_excerpt(&v, i)).len() <= 3);
            }
        }
    }

    #[test]
    fn prompt_errors() {
        let a = SentenceScore {
            index: 1,
            text: "B.".into(),
            mean_phi: 0.0,
        };
        assert_eq!(
            build_narrative_prompts(&a, &["A.", "B."], "  ", None),
            Err(ExplainError::MissingSegmentText)
        );
        assert!(build_narrative_prompts(&a, &["A."], "x", None).is_err());
    }

    #[test]
    fn truncation() {
        assert_eq!(truncate_sentences("A b. C d! E? F g.", 3), "A b. C d! E?");
        assert_eq!(truncate_sentences("Only one", 3), "Only one");
        assert_eq!(truncate_sentences("", 3), "");
    }

    fn prompts() -> NarrativePrompts {
        NarrativePrompts {
            excerpt: "They feel guilty. It happens weekly.".into(),
            description: "DESC PROMPT".into(),
            quote: "QUOTE PROMPT".into(),
        }
    }

    #[test]
    fn narrative_validates_quotes() {
        let seg = "Interviewer: Guilt?\nInterviewee: I keep   thinking about it. Every week.";
        let s = GenSettings::default();
        let good = ScriptedGenerator::new([Ok("Para one. Two. Three. Four.".into()), Ok("\"I keep thinking about it.\"".into())]);
        let n = narrative_summary(Some(&good), &prompts(), DomainId::new(4), seg, "Every week.", &s).unwrap();
        assert_eq!(n.paragraph, "Para one. Two. Three.");
        assert_eq!(n.quote, "I keep thinking about it.");
        assert!(!n.quote_fallback);
        assert_eq!(n.text(), "[P4 Ideas of Guilt]\nPara one. Two. Three.\n\"I keep thinking about it.\"");

        let bad = ScriptedGenerator::new([Ok("Para.".into()), Ok("\"I never said this.\"".into())]);
        let n = narrative_summary(Some(&bad), &prompts(), DomainId::new(4), seg, "Every week.", &s).unwrap();
        assert!(n.quote_fallback);
        assert_eq!(n.quote, "Every week.");

        let n = narrative_summary(Some(&EchoGenerator), &prompts(), None, seg, "Every week.", &s).unwrap();
        assert_eq!(n.description, "DESC PROMPT");

        let n = narrative_summary(None, &prompts(), None, seg, "Every week.", &s).unwrap();
        assert_eq!(n.backend, NarrativeBackend::Fallback);
        assert_eq!(n.paragraph, prompts().excerpt);
    }

    fn model() -> LinearModel {
        let vocab: Vocab = serde_json::from_value(serde_json::json!(["guilty", "voices", "weekly"])).unwrap();
        LinearModel {
            vocab,
            weights: vec![0.5, 1.0, 0.2],
            bias: -0.1,
            class_weights: ClassWeights { chr: 1.0, hc: 1.0 },
            config: TrainConfig::default(),
            seed: 0,
            loss_history: Vec::new(),
        }
    }

    fn artifact(domain: u8, summary: &str, answer: &str) -> SegmentArtifact {
        let m = model();
        let seg = SegmentText {
            transcript_id: "t1".into(),
            domain_id: DomainId::new(domain),
            turns: vec![(Speaker::Interviewer, "Question?".into()), (Speaker::Interviewee, answer.into())],
        };
        let id = format!("t1:P{domain}");
        let map = attribute_tokens(&m, &tokenize(summary), id, seg.domain_id, MethodChoice::Auto, &Baseline::Empty).unwrap();
        SegmentArtifact {
            segment: seg,
            summary: summary.into(),
            summary_backend: Backend::Extractive,
            map,
        }
    }

    fn artifacts(label: Label) -> TranscriptArtifacts {
        let segs = vec![
            artifact(4, "They feel guilty. It is weekly.", "I feel guilty. Often."),
            artifact(5, "Nothing new here. They hear voices.", "Sometimes I hear voices outside. It is fine."),
        ];
        explain_transcript("t1", label, 0.9, segs, &model(), None, &GenSettings::default()).unwrap()
    }

    #[test]
    fn fallback_quote_is_best_interviewee_sentence() {
        let a = artifact(5, "They hear voices.", "It is fine. Sometimes I hear voices outside.");
        assert_eq!(fallback_quote(&model(), &a.segment).unwrap(), "Sometimes I hear voices outside.");
        let b = artifact(5, "They hear voices.", "Nothing at all. Really.");
        assert_eq!(fallback_quote(&model(), &b.segment).unwrap(), "Nothing at all.");
    }

    #[test]
    fn anchor_across_segments() {
        let a = artifacts(Label::Chr);
        let (k, anchor) = a.anchor.clone().unwrap();
        assert_eq!(k, 1);
        assert_eq!(anchor.text, "They hear voices.");
        let n = a.narrative.unwrap();
        assert!(quote_in_segment(&n.quote, &a.segments[1].segment.render()));
        assert!(n.text().starts_with("[P5 Jealous Ideas]\n"));
    }

    #[test]
    fn bundle_writes_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let a = artifacts(Label::Chr);
        let b = build_bundle(&a, dir.path()).unwrap();
        let names: Vec<&str> = b.manifest.files.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, vec![WORD_BARS_FILE, HEATMAP_FILE, SYMPTOM_PLOT_FILE, SENTENCE_SUMMARY_FILE, NARRATIVE_FILE]);
        assert_eq!(std::fs::read_dir(&b.dir).unwrap().count(), 6);
        for f in [WORD_BARS_FILE, HEATMAP_FILE, SYMPTOM_PLOT_FILE] {
            parse(&std::fs::read_to_string(b.dir.join(f)).unwrap());
        }
        assert_eq!(verify_bundle(&b.dir).unwrap(), b.manifest);
        let first = std::fs::read(b.dir.join(MANIFEST_FILE)).unwrap();
        build_bundle(&a, dir.path()).unwrap();
        assert_eq!(std::fs::read(b.dir.join(MANIFEST_FILE)).unwrap(), first);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn hc_bundle_has_graphs_only() {
        let dir = tempfile::tempdir().unwrap();
        let b = build_bundle(&artifacts(Label::Hc), dir.path()).unwrap();
        assert_eq!(b.manifest.files.len(), 3);
        assert!(b.manifest.notes[0].contains("CHR predictions only"));
    }

    #[test]
    fn missing_attribution_is_named() {
        let a = artifact(4, "They feel guilty.", "I feel guilty.");
        let err = join_artifacts(
            vec![(a.segment.clone(), a.summary.clone(), Backend::Extractive, "t1:P9".into())],
            std::slice::from_ref(&a.map),
        )
        .unwrap_err();
        assert!(matches!(&err, ExplainError::Io { artifact, .. } if artifact.contains("t1:P9")));
    }

    #[test]
    fn multiple_narratives_top_domains() {
        let a = artifacts(Label::Chr);
        let ns = multiple_narratives(&a.segments, &model(), None, &GenSettings::default()).unwrap();
        assert_eq!(ns.len(), 2);
        assert_eq!(ns[0].domain_id, DomainId::new(5));
    }
}
