//! Sliding-window graph of second nodes and committed sentence nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{SecondRecord, SpeechActPair};

/// Per-second node. `block` refers to the audio block by tick index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondNode {
    pub tick: u64,
    pub channel: u8,
    /// Speaker tag observed for this second.
    pub speaker: u8,
    pub text: String,
    pub block: u64,
    /// False for the listener side of an overlapped second.
    pub primary: bool,
    pub labels: SpeechActPair,
    #[serde(skip)]
    pub emb: Vec<f64>,
}

/// Folded run of seconds covering `[start, end)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceNode {
    pub id: u64,
    pub start: u64,
    pub end: u64,
    pub channel: u8,
    pub speaker: u8,
    pub text: String,
    pub n_seconds: usize,
    /// Mean of the per-second label one-hots.
    pub high_mean: [f64; 4],
    pub low_mean: [f64; 4],
    #[serde(skip)]
    pub emb_mean: Vec<f64>,
}

impl SentenceNode {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeKey {
    pub tick: u64,
    pub channel: u8,
}

#[derive(Clone, Debug, Serialize)]
pub struct GraphSnapshot<'a> {
    pub t: Option<u64>,
    pub seconds: &'a [SecondNode],
    pub sentences: &'a [SentenceNode],
}

#[derive(Clone, Debug)]
pub struct GotGraph {
    window: u64,
    current: Option<u64>,
    seconds: Vec<SecondNode>,
    sentences: Vec<SentenceNode>,
    next_id: u64,
    silence_commit: Option<u32>,
    silent_run: [u32; 2],
}

impl GotGraph {
    pub fn new(window: u64) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("window must be >= 1 second".into()));
        }
        Ok(Self {
            window,
            current: None,
            seconds: Vec::new(),
            sentences: Vec::new(),
            next_id: 0,
            silence_commit: None,
            silent_run: [0; 2],
        })
    }

    /// Also commit a channel's pending seconds after `ticks` unvoiced seconds.
    pub fn with_silence_commit(mut self, ticks: Option<u32>) -> Self {
        self.silence_commit = ticks.filter(|&n| n > 0);
        self
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    pub fn current_tick(&self) -> Option<u64> {
        self.current
    }

    pub fn seconds(&self) -> &[SecondNode] {
        &self.seconds
    }

    pub fn sentences(&self) -> &[SentenceNode] {
        &self.sentences
    }

    pub fn snapshot(&self) -> GraphSnapshot<'_> {
        GraphSnapshot {
            t: self.current,
            seconds: &self.seconds,
            sentences: &self.sentences,
        }
    }

    pub fn snapshot_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.snapshot())?)
    }

    /// Adds the nodes for one second and returns the key of its primary node.
    ///
    /// The primary node sits on the only voiced channel, or on the record's
    /// speaker channel when both or neither are voiced. During overlap the
    /// other voiced channel gets a text-less secondary node.
    pub fn append_second(&mut self, record: &SecondRecord, labels: &SpeechActPair) -> Result<NodeKey> {
        if let Some(cur) = self.current {
            if record.t != cur + 1 {
                return Err(Error::data(format!(
                    "graph expects tick {}, got {}",
                    cur + 1,
                    record.t
                )));
            }
        }
        if record.speaker > 1 {
            return Err(Error::data(format!("speaker {} out of range", record.speaker)));
        }
        let voiced: Vec<u8> = (0..2u8).filter(|&c| record.vad[c as usize]).collect();
        let primary = if voiced.len() == 1 { voiced[0] } else { record.speaker };
        self.current = Some(record.t);
        self.seconds.push(SecondNode {
            tick: record.t,
            channel: primary,
            speaker: record.speaker,
            text: record.text.clone(),
            block: record.t,
            primary: true,
            labels: labels.clone(),
            emb: record.emb_semantic.clone(),
        });
        if voiced.len() == 2 {
            let other = 1 - primary;
            self.seconds.push(SecondNode {
                tick: record.t,
                channel: other,
                speaker: other,
                text: String::new(),
                block: record.t,
                primary: false,
                labels: labels.clone(),
                emb: record.emb_semantic.clone(),
            });
        }
        Ok(NodeKey {
            tick: record.t,
            channel: primary,
        })
    }

    pub fn has_pending(&self, channel: u8) -> bool {
        self.seconds.iter().any(|n| n.channel == channel)
    }

    /// Folds the channel's pending seconds with tick `< end_tick` into a
    /// sentence. Returns `None` (and logs) when nothing is pending.
    pub fn commit_sentence(&mut self, channel: u8, end_tick: u64) -> Option<SentenceNode> {
        let (folded, kept): (Vec<SecondNode>, Vec<SecondNode>) = std::mem::take(&mut self.seconds)
            .into_iter()
            .partition(|n| n.channel == channel && n.tick < end_tick);
        self.seconds = kept;
        if folded.is_empty() {
            log::warn!("commit on channel {channel} before tick {end_tick}: nothing pending");
            return None;
        }
        let start = folded[0].tick;
        let end = folded[folded.len() - 1].tick + 1;

        let mut votes = [0usize; 2];
        for n in &folded {
            votes[n.speaker.min(1) as usize] += 1;
        }
        let speaker = if votes[0] == votes[1] {
            folded[0].speaker
        } else if votes[0] > votes[1] {
            0
        } else {
            1
        };

        let text = folded
            .iter()
            .map(|n| n.text.trim())
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        let mut high_mean = [0.0; 4];
        let mut low_mean = [0.0; 4];
        for n in &folded {
            high_mean[n.labels.high.index()] += 1.0;
            low_mean[n.labels.low.index()] += 1.0;
        }
        let k = folded.len() as f64;
        high_mean.iter_mut().chain(low_mean.iter_mut()).for_each(|v| *v /= k);

        let primaries: Vec<&SecondNode> = folded.iter().filter(|n| n.primary).collect();
        let pool: Vec<&SecondNode> = if primaries.is_empty() {
            folded.iter().collect()
        } else {
            primaries
        };
        let dim = pool[0].emb.len();
        let mut emb_mean = vec![0.0; dim];
        for n in &pool {
            for (m, v) in emb_mean.iter_mut().zip(&n.emb) {
                *m += v;
            }
        }
        emb_mean.iter_mut().for_each(|v| *v /= pool.len() as f64);

        let node = SentenceNode {
            id: self.next_id,
            start,
            end,
            channel,
            speaker,
            text,
            n_seconds: folded.len(),
            high_mean,
            low_mean,
            emb_mean,
        };
        self.next_id += 1;
        self.sentences.push(node.clone());
        Some(node)
    }

    /// Applies the optional silence rule for the current record. Returns the
    /// sentences it committed.
    pub fn observe_silence(&mut self, record: &SecondRecord) -> Vec<SentenceNode> {
        let Some(limit) = self.silence_commit else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for c in 0..2u8 {
            if record.vad[c as usize] {
                self.silent_run[c as usize] = 0;
                continue;
            }
            self.silent_run[c as usize] += 1;
            if self.silent_run[c as usize] == limit && self.has_pending(c) {
                out.extend(self.commit_sentence(c, record.t + 1));
            }
        }
        out
    }

    /// Start of a tick: adds the second's nodes, then evicts expired ones.
    pub fn begin_tick(&mut self, record: &SecondRecord, labels: &SpeechActPair) -> Result<NodeKey> {
        let key = self.append_second(record, labels)?;
        self.evict_expired();
        Ok(key)
    }

    /// End of a tick: a flagged sentence end commits the primary channel
    /// through this second, then the silence rule runs.
    pub fn end_tick(&mut self, record: &SecondRecord, key: NodeKey) -> Vec<SentenceNode> {
        let mut out = Vec::new();
        if record.sentence_end {
            out.extend(self.commit_sentence(key.channel, record.t + 1));
        }
        out.extend(self.observe_silence(record));
        out
    }

    /// Drops sentences with `end <= t - W` and seconds with `tick < t - W`.
    pub fn evict_expired(&mut self) -> usize {
        let Some(t) = self.current else { return 0 };
        let Some(lo) = t.checked_sub(self.window) else {
            return 0;
        };
        let before = self.seconds.len() + self.sentences.len();
        self.seconds.retain(|n| n.tick >= lo);
        self.sentences.retain(|s| s.end > lo);
        before - self.seconds.len() - self.sentences.len()
    }

    pub fn query_node(&self, t: u64) -> Result<&SecondNode> {
        self.seconds
            .iter()
            .find(|n| n.tick == t && n.primary)
            .ok_or_else(|| Error::invalid(format!("no second node at tick {t}")))
    }

    /// Query node at `t` plus completed sentences intersecting `[t - W, t)`,
    /// ordered by start.
    pub fn candidate_view(&self, t: u64) -> Result<(&SecondNode, Vec<&SentenceNode>)> {
        let q = self.query_node(t)?;
        let lo = t.saturating_sub(self.window);
        let mut c: Vec<&SentenceNode> = self
            .sentences
            .iter()
            .filter(|s| s.end <= t && s.end > lo)
            .collect();
        c.sort_by_key(|s| (s.start, s.end, s.channel, s.id));
        Ok((q, c))
    }

    /// The channel's unfolded seconds strictly before `t`.
    pub fn pending_seconds(&self, channel: u8, t: u64) -> Vec<&SecondNode> {
        self.seconds
            .iter()
            .filter(|n| n.channel == channel && n.tick < t)
            .collect()
    }

    /// The last `r` committed sentences, oldest first.
    pub fn recent_sentences(&self, r: usize, t: u64) -> Vec<&SentenceNode> {
        let done: Vec<&SentenceNode> = self.sentences.iter().filter(|s| s.end <= t).collect();
        done[done.len().saturating_sub(r)..].to_vec()
    }
}
