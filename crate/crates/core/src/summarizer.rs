//! Third-person summaries of interview segments.
//!
//! The LLM route issues two prompts per segment: a first-pass clinician-style
//! rewrite and a refinement pass that receives the draft. The extractive route
//! is a deterministic offline stand-in.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Speaker, Transcript};
use crate::domain::DomainId;
use crate::gateway::{GatewayError, GenRequest, GenSettings, TextGenerator};
use crate::segmenter::Segment;
use crate::text::{content_words, split_sentences};

const FIRST_PASS_HEAD: &str = "You are an expert clinical interviewer. Summarise the following interview segment in a single third person paragraph, covering what was asked and the detailed response.\nInterview segment: ";
const FIRST_PASS_TAIL: &str = "\nDraft summary:";

const SECOND_PASS_HEAD: &str = "Here is a transcript segment and an initial draft summary. Improve the summary by adding any important information from the segment that was missed. Keep third person narration, one coherent paragraph, and no bullet points.\nInterview segment: ";
const SECOND_PASS_MID: &str = "\nDraft summary: ";
const SECOND_PASS_TAIL: &str = "\nImproved summary:";

/// Interviewee sentences kept by the extractive route.
pub const EXTRACTIVE_SENTENCES: usize = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SummaryError {
    #[error("segment text is empty")]
    EmptySegment,
    #[error("draft summary is empty")]
    EmptyDraft,
    #[error("segment has no interviewee content")]
    NoIntervieweeContent,
    #[error("policy requires a gateway but none is configured")]
    MissingGateway,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub fn build_first_pass_prompt(segment_text: &str) -> Result<String, SummaryError> {
    if segment_text.trim().is_empty() {
        return Err(SummaryError::EmptySegment);
    }
    Ok([FIRST_PASS_HEAD, segment_text, FIRST_PASS_TAIL].concat())
}

pub fn build_second_pass_prompt(segment_text: &str, draft: &str) -> Result<String, SummaryError> {
    if segment_text.trim().is_empty() {
        return Err(SummaryError::EmptySegment);
    }
    if draft.trim().is_empty() {
        return Err(SummaryError::EmptyDraft);
    }
    Ok([SECOND_PASS_HEAD, segment_text, SECOND_PASS_MID, draft, SECOND_PASS_TAIL].concat())
}

/// The turns of one segment (or of a whole transcript when `domain_id` is `None`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentText {
    pub transcript_id: String,
    pub domain_id: Option<DomainId>,
    pub turns: Vec<(Speaker, String)>,
}

impl SegmentText {
    pub fn from_segment(t: &Transcript, s: &Segment) -> Self {
        Self {
            transcript_id: t.transcript_id.clone(),
            domain_id: Some(s.domain_id),
            turns: t.turns[s.turn_start..=s.turn_end]
                .iter()
                .map(|x| (x.speaker, x.text.clone()))
                .collect(),
        }
    }

    pub fn whole(t: &Transcript) -> Self {
        Self {
            transcript_id: t.transcript_id.clone(),
            domain_id: None,
            turns: t.turns.iter().map(|x| (x.speaker, x.text.clone())).collect(),
        }
    }

    /// `Speaker: text` lines joined by newlines.
    pub fn render(&self) -> String {
        self.turns
            .iter()
            .map(|(s, text)| format!("{}: {}", s.tag(), text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn topic(&self) -> String {
        match self.domain_id {
            Some(d) => d.name().to_lowercase(),
            None => "their experiences across the interview".to_string(),
        }
    }

    pub fn interviewee_sentences(&self) -> Vec<&str> {
        self.turns
            .iter()
            .filter(|(s, _)| *s == Speaker::Interviewee)
            .flat_map(|(_, text)| split_sentences(text))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Llm,
    Extractive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SummaryPolicy {
    Llm,
    #[default]
    Extractive,
    LlmWithFallback,
}

impl std::str::FromStr for SummaryPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llm" => Ok(Self::Llm),
            "extractive" => Ok(Self::Extractive),
            "llm_with_fallback" => Ok(Self::LlmWithFallback),
            other => Err(format!("unknown summarize policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub transcript_id: String,
    pub domain_id: Option<DomainId>,
    pub segment_text: String,
    pub draft: String,
    #[serde(rename = "final")]
    pub final_text: String,
    pub backend: Backend,
}

/// `"The interviewee was asked about <topic>. They responded: <top sentences>."`
///
/// The top sentences are the interviewee sentences with the most content
/// words (ties to the earlier sentence), reported in their original order.
pub fn extractive_summary(segment: &SegmentText) -> Result<String, SummaryError> {
    let sentences = segment.interviewee_sentences();
    if sentences.is_empty() {
        return Err(SummaryError::NoIntervieweeContent);
    }
    let mut ranked: Vec<(usize, usize)> = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| (i, content_words(s).len()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep: Vec<usize> = ranked.iter().take(EXTRACTIVE_SENTENCES).map(|(i, _)| *i).collect();
    keep.sort_unstable();
    let quoted = keep.iter().map(|&i| sentences[i]).collect::<Vec<_>>().join(" ");
    let terminal = if quoted.ends_with(['.', '?', '!', '"', '\u{201d}']) { "" } else { "." };
    Ok(format!(
        "The interviewee was asked about {}. They responded: {quoted}{terminal}",
        segment.topic()
    ))
}

pub fn summarize_segment(
    segment: &SegmentText,
    gateway: Option<&dyn TextGenerator>,
    policy: SummaryPolicy,
    settings: &GenSettings,
) -> Result<SummaryRecord, SummaryError> {
    let segment_text = segment.render();
    let extractive = |segment_text: String| -> Result<SummaryRecord, SummaryError> {
        let summary = extractive_summary(segment)?;
        Ok(SummaryRecord {
            transcript_id: segment.transcript_id.clone(),
            domain_id: segment.domain_id,
            segment_text,
            draft: summary.clone(),
            final_text: summary,
            backend: Backend::Extractive,
        })
    };
    match policy {
        SummaryPolicy::Extractive => extractive(segment_text),
        SummaryPolicy::Llm => {
            let gateway = gateway.ok_or(SummaryError::MissingGateway)?;
            two_pass(segment, segment_text, gateway, settings)
        }
        SummaryPolicy::LlmWithFallback => match gateway {
            Some(g) => match two_pass(segment, segment_text.clone(), g, settings) {
                Ok(rec) => Ok(rec),
                Err(e) => {
                    tracing::warn!(transcript = %segment.transcript_id, error = %e, "summary falls back to extractive");
                    extractive(segment_text)
                }
            },
            None => extractive(segment_text),
        },
    }
}

fn two_pass(
    segment: &SegmentText,
    segment_text: String,
    gateway: &dyn TextGenerator,
    settings: &GenSettings,
) -> Result<SummaryRecord, SummaryError> {
    let first = build_first_pass_prompt(&segment_text)?;
    let draft = gateway.generate(&GenRequest::new(first, settings)?)?.text.trim().to_string();
    if draft.is_empty() {
        return Err(SummaryError::EmptyDraft);
    }
    let second = build_second_pass_prompt(&segment_text, &draft)?;
    let final_text = gateway.generate(&GenRequest::new(second, settings)?)?.text.trim().to_string();
    if final_text.is_empty() {
        return Err(GatewayError::ProtocolError("empty refinement reply".into()).into());
    }
    Ok(SummaryRecord {
        transcript_id: segment.transcript_id.clone(),
        domain_id: segment.domain_id,
        segment_text,
        draft,
        final_text,
        backend: Backend::Llm,
    })
}

/// Jaccard similarity over content-word sets; two empty sets are identical.
pub fn lexical_similarity(a: &str, b: &str) -> f64 {
    let sa: BTreeSet<String> = content_words(a).into_iter().collect();
    let sb: BTreeSet<String> = content_words(b).into_iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FailingGenerator, ScriptedGenerator};

    fn seg(turns: &[(Speaker, &str)]) -> SegmentText {
        SegmentText {
            transcript_id: "t1".into(),
            domain_id: DomainId::new(4),
            turns: turns.iter().map(|(s, t)| (*s, t.to_string())).collect(),
        }
    }

    #[test]
    fn first_pass_slot() {
        let p = build_first_pass_prompt("Interviewer: q. Interviewee: a.").unwrap();
        assert!(p.starts_with("You are an expert clinical interviewer."));
        assert!(p.contains("Interview segment: Interviewer: q. Interviewee: a.\nDraft summary:"));
        assert_eq!(build_first_pass_prompt(""), Err(SummaryError::EmptySegment));
    }

    #[test]
    fn second_pass_errors() {
        assert_eq!(build_second_pass_prompt(" ", "d"), Err(SummaryError::EmptySegment));
        assert_eq!(build_second_pass_prompt("s", ""), Err(SummaryError::EmptyDraft));
    }

    #[test]
    fn extractive_single_sentence() {
        let s = seg(&[(Speaker::Interviewer, "Any guilt?"), (Speaker::Interviewee, "I dwell on past problems.")]);
        assert_eq!(
            extractive_summary(&s).unwrap(),
            "The interviewee was asked about ideas of guilt. They responded: I dwell on past problems."
        );
    }

    #[test]
    fn extractive_adds_period_when_missing() {
        let s = seg(&[(Speaker::Interviewer, "Any guilt?"), (Speaker::Interviewee, "not really")]);
        assert!(extractive_summary(&s).unwrap().ends_with("They responded: not really."));
    }

    #[test]
    fn extractive_picks_two_richest_in_order() {
        let s = seg(&[
            (Speaker::Interviewer, "Tell me more."),
            (Speaker::Interviewee, "Yes. I hear whispers at night constantly. Hmm."),
            (Speaker::Interviewee, "It is what it is. Strangers follow me downtown daily."),
        ]);
        let out = extractive_summary(&s).unwrap();
        assert!(out.ends_with("They responded: I hear whispers at night constantly. Strangers follow me downtown daily."), "{out}");
    }

    #[test]
    fn extractive_requires_interviewee() {
        let s = seg(&[(Speaker::Interviewer, "Hello?")]);
        assert_eq!(extractive_summary(&s), Err(SummaryError::NoIntervieweeContent));
    }

    #[test]
    fn policy_dispatch() {
        let s = seg(&[(Speaker::Interviewer, "q?"), (Speaker::Interviewee, "I hear voices.")]);
        let settings = GenSettings::default();
        let rec = summarize_segment(&s, None, SummaryPolicy::Extractive, &settings).unwrap();
        assert_eq!(rec.final_text, extractive_summary(&s).unwrap());
        assert_eq!(rec.backend, Backend::Extractive);

        let failing = FailingGenerator(GatewayError::TransportError("down".into()));
        let rec = summarize_segment(&s, Some(&failing), SummaryPolicy::LlmWithFallback, &settings).unwrap();
        assert_eq!(rec.backend, Backend::Extractive);
        assert!(matches!(
            summarize_segment(&s, Some(&failing), SummaryPolicy::Llm, &settings),
            Err(SummaryError::Gateway(GatewayError::TransportError(_)))
        ));
        assert_eq!(
            summarize_segment(&s, None, SummaryPolicy::Llm, &settings),
            Err(SummaryError::MissingGateway)
        );
    }

    #[test]
    fn llm_two_pass_threads_draft() {
        let s = seg(&[(Speaker::Interviewer, "q?"), (Speaker::Interviewee, "I hear voices.")]);
        let stub = ScriptedGenerator::new([Ok("DRAFT-123".to_string()), Ok("FINAL".to_string())]);
        let rec = summarize_segment(&s, Some(&stub), SummaryPolicy::Llm, &GenSettings::default()).unwrap();
        let reqs = stub.requests();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[0].prompt, build_first_pass_prompt(&s.render()).unwrap());
        assert!(reqs[1].prompt.contains("Draft summary: DRAFT-123\n"));
        assert_eq!((rec.draft.as_str(), rec.final_text.as_str(), rec.backend), ("DRAFT-123", "FINAL", Backend::Llm));
    }

    #[test]
    fn empty_llm_draft_degrades_under_fallback() {
        let s = seg(&[(Speaker::Interviewer, "q?"), (Speaker::Interviewee, "I hear voices.")]);
        let stub = ScriptedGenerator::new([Ok("   ".to_string())]);
        let rec = summarize_segment(&s, Some(&stub), SummaryPolicy::LlmWithFallback, &GenSettings::default()).unwrap();
        assert_eq!(rec.backend, Backend::Extractive);
    }

    #[test]
    fn lexical_similarity_cases() {
        assert_eq!(lexical_similarity("voices at night", "voices at night"), 1.0);
        assert_eq!(lexical_similarity("a b", "c d"), 0.0);
        assert_eq!(lexical_similarity("voices shadows", "sleep calm"), 0.0);
        assert!((lexical_similarity("voices shadows night", "voices night calm") - 0.5).abs() < 1e-12);
    }

    #[test]
    fn record_serialises_final_field() {
        let rec = SummaryRecord {
            transcript_id: "t".into(),
            domain_id: DomainId::new(1),
            segment_text: "s".into(),
            draft: "d".into(),
            final_text: "f".into(),
            backend: Backend::Extractive,
        };
        let v = serde_json::to_value(&rec).unwrap();
        assert_eq!(v["final"], "f");
        assert_eq!(v["domain_id"], "P1");
        assert_eq!(v["backend"], "extractive");
    }
}
