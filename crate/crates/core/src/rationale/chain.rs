//! Decoding condition assembly and the tagged text form of an evidence chain.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::{GotGraph, SecondNode, SentenceNode};
use crate::selector::SelectionResult;
use crate::stream::{speaker_tag, HighAct, LowAct};
use crate::{Error, Result};

/// Default number of recent committed sentences kept in the condition.
pub const DEFAULT_RECENT: usize = 3;

/// Everything the generator may look at for tick `t`.
#[derive(Clone, Debug)]
pub struct DecodingCondition {
    pub t: u64,
    pub anchors: Vec<SentenceNode>,
    pub recent: Vec<SentenceNode>,
    pub pending: Vec<SecondNode>,
    pub query: SecondNode,
}

impl DecodingCondition {
    /// Largest tick referenced by any element (sentence ends are exclusive).
    pub fn latest_tick(&self) -> u64 {
        let sent = self
            .anchors
            .iter()
            .chain(&self.recent)
            .map(|s| s.end.saturating_sub(1));
        let sec = self.pending.iter().map(|n| n.tick);
        sent.chain(sec).fold(self.query.tick, u64::max)
    }
}

/// Assembles the condition for the selection's tick.
///
/// Anchors win over recent sentences when both name the same node. Pending
/// seconds are the query channel's unfolded seconds before `t`.
pub fn build_condition(graph: &GotGraph, selection: &SelectionResult, r: usize) -> Result<DecodingCondition> {
    let t = selection.t;
    if graph.current_tick() != Some(t) {
        return Err(Error::invalid(format!(
            "stale selection for tick {t}, graph is at {:?}",
            graph.current_tick()
        )));
    }
    let query = graph.query_node(t)?.clone();
    let mut anchors = Vec::with_capacity(selection.anchors.len());
    for &id in &selection.anchors {
        let s = graph
            .sentences()
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::invalid(format!("anchor {id} is not in the graph")))?;
        if s.end > t {
            return Err(Error::invalid(format!("anchor {id} ends after tick {t}")));
        }
        anchors.push(s.clone());
    }
    anchors.sort_by_key(|s| (s.start, s.end, s.channel, s.id));
    anchors.dedup_by_key(|s| s.id);
    let taken: BTreeSet<u64> = anchors.iter().map(|s| s.id).collect();
    let recent = graph
        .recent_sentences(r, t)
        .into_iter()
        .filter(|s| !taken.contains(&s.id))
        .cloned()
        .collect();
    let pending = graph
        .pending_seconds(query.channel, t)
        .into_iter()
        .cloned()
        .collect();
    Ok(DecodingCondition {
        t,
        anchors,
        recent,
        pending,
        query,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    Anchor,
    Sent,
    Sec,
    Query,
}

impl SegmentKind {
    pub fn tag(self) -> &'static str {
        match self {
            SegmentKind::Anchor => "[ANCHOR]",
            SegmentKind::Sent => "[SENT]",
            SegmentKind::Sec => "[SEC]",
            SegmentKind::Query => "[QUERY]",
        }
    }

    fn from_tag(s: &str) -> Option<Self> {
        Some(match s {
            "[ANCHOR]" => SegmentKind::Anchor,
            "[SENT]" => SegmentKind::Sent,
            "[SEC]" => SegmentKind::Sec,
            "[QUERY]" => SegmentKind::Query,
            _ => return None,
        })
    }

    fn is_sentence(self) -> bool {
        matches!(self, SegmentKind::Anchor | SegmentKind::Sent)
    }
}

/// One element of the chain. `end` is exclusive; seconds span one tick.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub speaker: u8,
    pub start: u64,
    pub end: u64,
    pub high: HighAct,
    pub low: LowAct,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearizedChain {
    pub segments: Vec<Segment>,
    pub text: String,
}

impl LinearizedChain {
    pub fn query(&self) -> Option<&Segment> {
        self.segments.last().filter(|s| s.kind == SegmentKind::Query)
    }

    pub fn anchors(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.kind == SegmentKind::Anchor)
    }
}

impl fmt::Display for LinearizedChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

fn argmax4(p: &[f64; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

fn sentence_segment(kind: SegmentKind, s: &SentenceNode) -> Segment {
    Segment {
        kind,
        speaker: s.speaker,
        start: s.start,
        end: s.end,
        high: HighAct::from_index(argmax4(&s.high_mean)).unwrap_or(HighAct::Constatives),
        low: LowAct::from_index(argmax4(&s.low_mean)).unwrap_or(LowAct::Continuation),
        text: s.text.clone(),
    }
}

fn second_segment(kind: SegmentKind, n: &SecondNode) -> Segment {
    Segment {
        kind,
        speaker: n.speaker,
        start: n.tick,
        end: n.tick + 1,
        high: n.labels.high,
        low: n.labels.low,
        text: n.text.clone(),
    }
}

/// Orders the context far to near and puts the query last.
pub fn linearize(cond: &DecodingCondition) -> LinearizedChain {
    let mut segs: Vec<Segment> = cond
        .anchors
        .iter()
        .map(|s| sentence_segment(SegmentKind::Anchor, s))
        .chain(cond.recent.iter().map(|s| sentence_segment(SegmentKind::Sent, s)))
        .chain(cond.pending.iter().map(|n| second_segment(SegmentKind::Sec, n)))
        .collect();
    segs.sort_by_key(|s| (s.start, s.end, s.speaker, s.kind));
    segs.push(second_segment(SegmentKind::Query, &cond.query));
    from_segments(segs)
}

/// Renders segments into the tagged text form without reordering them.
pub fn from_segments(segments: Vec<Segment>) -> LinearizedChain {
    let text = segments.iter().map(render_segment).collect::<Vec<_>>().join(" ");
    LinearizedChain { segments, text }
}

fn render_segment(s: &Segment) -> String {
    let span = if s.kind.is_sentence() {
        format!("{}-{}", s.start, s.end)
    } else {
        s.start.to_string()
    };
    let mut out = format!(
        "{} spk={} t={} high={} low={}",
        s.kind.tag(),
        speaker_tag(s.speaker),
        span,
        s.high,
        s.low
    );
    if !s.text.is_empty() {
        out.push(' ');
        out.push_str(&escape(&s.text));
    }
    out
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if c == '[' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

fn unescape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                out.push(n);
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Splits at every unescaped `[`.
fn split_segments(text: &str) -> Vec<&str> {
    let mut starts = Vec::new();
    let mut escaped = false;
    for (i, c) in text.char_indices() {
        if escaped {
            escaped = false;
        } else if c == '\\' {
            escaped = true;
        } else if c == '[' {
            starts.push(i);
        }
    }
    let mut out = Vec::with_capacity(starts.len());
    for (k, &s) in starts.iter().enumerate() {
        let e = starts.get(k + 1).copied().unwrap_or(text.len());
        out.push(&text[s..e]);
    }
    out
}

fn parse_speaker(s: &str) -> Result<u8> {
    match s {
        "A" => Ok(0),
        "B" => Ok(1),
        _ => Err(Error::data(format!("bad speaker tag {s:?}"))),
    }
}

fn parse_field<'a>(part: Option<&'a str>, key: &str) -> Result<&'a str> {
    part.and_then(|p| p.strip_prefix(key))
        .and_then(|p| p.strip_prefix('='))
        .ok_or_else(|| Error::data(format!("missing {key}= field")))
}

fn parse_segment(chunk: &str) -> Result<Segment> {
    let mut fields = chunk.splitn(6, ' ');
    let tag = fields.next().unwrap_or_default();
    let kind = SegmentKind::from_tag(tag).ok_or_else(|| Error::data(format!("unknown segment tag {tag:?}")))?;
    let speaker = parse_speaker(parse_field(fields.next(), "spk")?)?;
    let span = parse_field(fields.next(), "t")?;
    let bad_span = || Error::data(format!("bad span {span:?}"));
    let (start, end) = if kind.is_sentence() {
        let (a, b) = span.split_once('-').ok_or_else(bad_span)?;
        (a.parse().map_err(|_| bad_span())?, b.parse().map_err(|_| bad_span())?)
    } else {
        let a: u64 = span.parse().map_err(|_| bad_span())?;
        (a, a + 1)
    };
    let high = HighAct::from_str(parse_field(fields.next(), "high")?)?;
    let low = LowAct::from_str(parse_field(fields.next(), "low")?)?;
    let text = fields.next().map(unescape).unwrap_or_default();
    Ok(Segment {
        kind,
        speaker,
        start,
        end,
        high,
        low,
        text,
    })
}

/// Inverse of the rendering used by [`linearize`].
pub fn parse_chain(text: &str) -> Result<LinearizedChain> {
    let chunks = split_segments(text);
    if chunks.is_empty() && !text.is_empty() {
        return Err(Error::data("chain text has no segment tags"));
    }
    let last = chunks.len().saturating_sub(1);
    let mut segments = Vec::with_capacity(chunks.len());
    for (i, chunk) in chunks.into_iter().enumerate() {
        let body = if i < last {
            chunk
                .strip_suffix(' ')
                .ok_or_else(|| Error::data("segments must be separated by a space"))?
        } else {
            chunk
        };
        segments.push(parse_segment(body)?);
    }
    Ok(LinearizedChain {
        segments,
        text: text.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{SecondRecord, SpeechActPair};
    use proptest::prelude::*;

    fn rec(t: u64, speaker: u8, text: &str, end: bool) -> SecondRecord {
        SecondRecord {
            audio_id: "d".into(),
            t,
            speaker,
            text: text.into(),
            emb_acoustic: vec![0.0; 2],
            emb_semantic: vec![0.0; 2],
            vad: [speaker == 0, speaker == 1],
            sentence_end: end,
            gold: None,
        }
    }

    fn lab() -> SpeechActPair {
        SpeechActPair::certain(HighAct::Constatives, LowAct::Continuation)
    }

    fn selection(t: u64, anchors: Vec<u64>) -> SelectionResult {
        SelectionResult {
            t,
            candidate_ids: anchors.clone(),
            scores: vec![1.0; anchors.len()],
            tau: 0.0,
            mask: vec![true; anchors.len()],
            anchors,
        }
    }

    /// Runs records through the graph; returns it positioned at the last tick
    /// (after begin, before end).
    fn replay(records: &[SecondRecord]) -> GotGraph {
        let mut g = GotGraph::new(90).unwrap();
        let n = records.len();
        for (i, r) in records.iter().enumerate() {
            let key = g.begin_tick(r, &lab()).unwrap();
            if i + 1 < n {
                g.end_tick(r, key);
            }
        }
        g
    }

    #[test]
    fn query_only_condition() {
        let g = replay(&[rec(0, 0, "hello", false)]);
        let c = build_condition(&g, &selection(0, vec![]), 3).unwrap();
        assert!(c.anchors.is_empty() && c.recent.is_empty() && c.pending.is_empty());
        let chain = linearize(&c);
        assert_eq!(chain.text, "[QUERY] spk=A t=0 high=Constatives low=Continuation hello");
    }

    #[test]
    fn query_format_matches_definition() {
        let mut segs = Vec::new();
        segs.push(Segment {
            kind: SegmentKind::Query,
            speaker: 0,
            start: 12,
            end: 13,
            high: HighAct::Constatives,
            low: LowAct::Continuation,
            text: "<text>".into(),
        });
        assert_eq!(
            from_segments(segs).text,
            "[QUERY] spk=A t=12 high=Constatives low=Continuation <text>"
        );
    }

    #[test]
    fn anchor_in_recent_appears_once() {
        let recs = vec![
            rec(0, 0, "a", false),
            rec(1, 0, "b", true),
            rec(2, 1, "c", true),
            rec(3, 0, "q", false),
        ];
        let g = replay(&recs);
        let ids: Vec<u64> = g.sentences().iter().map(|s| s.id).collect();
        assert_eq!(ids.len(), 2);
        let c = build_condition(&g, &selection(3, vec![ids[0]]), 3).unwrap();
        assert_eq!(c.anchors.len(), 1);
        assert_eq!(c.recent.len(), 1);
        let chain = linearize(&c);
        let kinds: Vec<SegmentKind> = chain.segments.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, vec![SegmentKind::Anchor, SegmentKind::Sent, SegmentKind::Query]);
        assert!(chain.text.starts_with("[ANCHOR] spk=A t=0-2 "));
    }

    #[test]
    fn two_anchors_and_query_ascending() {
        let recs = vec![
            rec(0, 0, "x", true),
            rec(1, 1, "y", true),
            rec(2, 0, "z", false),
        ];
        let g = replay(&recs);
        let c = build_condition(&g, &selection(2, vec![1, 0]), 0).unwrap();
        let chain = linearize(&c);
        assert_eq!(chain.segments.len(), 3);
        assert_eq!(chain.segments[0].start, 0);
        assert_eq!(chain.segments[1].start, 1);
        assert_eq!(chain.segments[2].kind, SegmentKind::Query);
    }

    #[test]
    fn stale_selection_rejected() {
        let g = replay(&[rec(0, 0, "a", false), rec(1, 0, "b", false)]);
        assert!(build_condition(&g, &selection(0, vec![]), 3).is_err());
        assert!(build_condition(&g, &selection(1, vec![7]), 3).is_err());
    }

    #[test]
    fn pending_seconds_cover_open_sentence() {
        let recs = vec![rec(0, 0, "a", true), rec(1, 0, "b", false), rec(2, 0, "c", false)];
        let g = replay(&recs);
        let c = build_condition(&g, &selection(2, vec![]), 3).unwrap();
        assert_eq!(c.pending.iter().map(|n| n.tick).collect::<Vec<_>>(), vec![1]);
        assert_eq!(c.recent.len(), 1);
    }

    #[test]
    fn escaped_text_round_trips() {
        let seg = Segment {
            kind: SegmentKind::Sec,
            speaker: 1,
            start: 4,
            end: 5,
            high: HighAct::Directives,
            low: LowAct::Backchannel,
            text: r"see [QUERY] and a \ slash ".into(),
        };
        let q = Segment {
            kind: SegmentKind::Query,
            text: String::new(),
            start: 5,
            end: 6,
            ..seg.clone()
        };
        let chain = from_segments(vec![seg, q]);
        assert_eq!(parse_chain(&chain.text).unwrap(), chain);
    }

    fn arb_segment() -> impl Strategy<Value = Segment> {
        (
            0..4usize,
            0..2u8,
            0..500u64,
            1..40u64,
            0..4usize,
            0..4usize,
            "[ -~]{0,20}",
        )
            .prop_map(|(k, speaker, start, len, h, l, text)| {
                let kind = [SegmentKind::Anchor, SegmentKind::Sent, SegmentKind::Sec, SegmentKind::Query][k];
                let end = if kind.is_sentence() { start + len } else { start + 1 };
                Segment {
                    kind,
                    speaker,
                    start,
                    end,
                    high: HighAct::from_index(h).unwrap(),
                    low: LowAct::from_index(l).unwrap(),
                    text,
                }
            })
    }

    proptest! {
        #[test]
        fn parse_recovers_segments(segs in prop::collection::vec(arb_segment(), 0..8)) {
            let chain = from_segments(segs);
            prop_assert_eq!(parse_chain(&chain.text).unwrap(), chain);
        }

        #[test]
        fn condition_is_causal_and_ordered(
            plan in prop::collection::vec((0..2u8, prop::bool::weighted(0.3)), 1..60),
            pick in prop::collection::vec(any::<bool>(), 0..60),
            r in 0..5usize,
        ) {
            let recs: Vec<SecondRecord> = plan
                .iter()
                .enumerate()
                .map(|(t, &(s, e))| rec(t as u64, s, &format!("w{t}"), e))
                .collect();
            let g = replay(&recs);
            let t = recs.len() as u64 - 1;
            let (_, cands) = g.candidate_view(t).unwrap();
            let anchors: Vec<u64> = cands
                .iter()
                .zip(pick.iter().chain(std::iter::repeat(&false)))
                .filter(|(_, &p)| p)
                .map(|(s, _)| s.id)
                .collect();
            let c = build_condition(&g, &selection(t, anchors.clone()), r).unwrap();
            prop_assert!(c.latest_tick() <= t);
            prop_assert_eq!(c.anchors.iter().map(|s| s.id).collect::<Vec<_>>().len(), anchors.len());
            for s in &c.recent {
                prop_assert!(!anchors.contains(&s.id));
            }
            let chain = linearize(&c);
            let n = chain.segments.len();
            prop_assert_eq!(chain.segments[n - 1].kind, SegmentKind::Query);
            for w in chain.segments[..n - 1].windows(2) {
                prop_assert!((w[0].start, w[0].end) <= (w[1].start, w[1].end));
            }
            for s in &chain.segments {
                prop_assert!(s.end <= t + 1);
            }
        }
    }
}
