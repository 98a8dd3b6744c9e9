//! Deterministic slot-filled rationales.

use std::collections::HashMap;

use crate::stream::{speaker_tag, HighAct, LowAct};

use super::chain::LinearizedChain;

/// An anchor as named in a rationale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorMention {
    pub speaker: u8,
    pub start: u64,
    pub end: u64,
    pub topic: String,
}

fn low_phrase(low: LowAct) -> &'static str {
    match low {
        LowAct::Continuation => "keeps the floor",
        LowAct::TurnTaking => "takes the turn",
        LowAct::Interruption => "cuts in",
        LowAct::Backchannel => "trades a backchannel",
    }
}

/// Most frequent word of at least three characters; ties go to the earliest.
/// Falls back to the first word, then to `"silence"`.
pub fn topic_of(text: &str) -> String {
    let words: Vec<&str> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in words.iter().filter(|w| w.chars().count() >= 3) {
        *counts.entry(w).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for w in words.iter().filter(|w| w.chars().count() >= 3) {
        let c = counts[w];
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((w, c));
        }
    }
    best.map(|(w, _)| w)
        .or_else(|| words.first().copied())
        .unwrap_or("silence")
        .to_string()
}

/// The fixed rationale wording shared by the template backend and the
/// synthetic corpus.
pub fn render_rationale(speaker: u8, high: HighAct, low: LowAct, query_text: &str, anchors: &[AnchorMention]) -> String {
    let heard = if query_text.trim().is_empty() {
        "a silent second".to_string()
    } else {
        format!("\"{}\"", query_text.trim())
    };
    let mut out = format!(
        "{} {} ({}) with {} intent, grounded in {}",
        speaker_tag(speaker),
        low_phrase(low),
        low,
        high,
        heard
    );
    if anchors.is_empty() {
        out.push_str(" alone.");
    } else {
        let refs: Vec<String> = anchors
            .iter()
            .map(|a| format!("{} from {} at {}-{}s", a.topic, speaker_tag(a.speaker), a.start, a.end))
            .collect();
        out.push_str(" and earlier ");
        out.push_str(&refs.join(", "));
        out.push('.');
    }
    out
}

/// Template rationale for a chain. Chains without a query segment describe
/// nothing and yield an empty string.
pub fn template_rationale(chain: &LinearizedChain) -> String {
    let Some(q) = chain.query() else {
        return String::new();
    };
    let anchors: Vec<AnchorMention> = chain
        .anchors()
        .map(|a| AnchorMention {
            speaker: a.speaker,
            start: a.start,
            end: a.end,
            topic: topic_of(&a.text),
        })
        .collect();
    render_rationale(q.speaker, q.high, q.low, &q.text, &anchors)
}
