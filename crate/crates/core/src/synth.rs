//! Deterministic synthetic dialogues with planted, recoverable structure.
//!
//! Turn ownership evolves in clusters: a single ownership flip (turn-taking)
//! or a burst of 2-3 flips on consecutive seconds (interruption), followed by
//! a tail of at least three seconds held by the new owner. Tails may contain
//! a backchannel pair: the other speaker's one-second acknowledgment and the
//! owner's resumption. Cluster mix and tail length are solved from the
//! low-level prior, so the per-second label marginals match it in
//! expectation.
//!
//! Embeddings carry the labels: the acoustic vector holds a low-level class
//! centroid, the semantic vector a high-level centroid plus a topic code.
//! Gold anchors at second `t` are the completed sentences in the window that
//! share the topic of `t`'s sentence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::graph::{GotGraph, SentenceNode};
use crate::rationale::{build_condition, linearize, template_rationale, DEFAULT_RECENT};
use crate::rng::{item_rng, stream_rng, STREAM_SPLIT, STREAM_SYNTH};
use crate::selector::SelectionResult;
use crate::stream::{Gold, HighAct, LowAct, SecondRecord, SpeechActPair};
use crate::{Error, Result};

/// Seconds an ownership flip must be clear of other flips to count as
/// turn-taking rather than interruption.
pub const FLIP_WINDOW: usize = 3;
/// Shortest run held by an owner after a cluster of flips.
pub const MIN_TAIL: usize = FLIP_WINDOW;
const INT_FLIPS_MEAN: f64 = 2.5;

const FILLERS: [&str; 12] = ["so", "we", "it", "to", "do", "go", "up", "on", "in", "at", "me", "my"];
const ACKS: [&str; 3] = ["mm", "ok", "ya"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub dialogues: usize,
    pub duration_s: usize,
    pub emb_dim: usize,
    /// Distance of each class centroid from the origin.
    pub margin: f64,
    pub noise: f64,
    pub topic_scale: f64,
    /// Constatives, Directives, Commissives, Acknowledgments.
    pub high_prior: [f64; 4],
    /// Continuation, TurnTaking, Interruption, Backchannel.
    pub low_prior: [f64; 4],
    /// Target mean anchors per second; sets the topic count.
    pub anchors_mean: f64,
    /// Reported target only; spacing is not controlled.
    pub anchor_spacing_mean: f64,
    /// Fixed topic count instead of the one derived from `anchors_mean`.
    pub topics: Option<usize>,
    /// Chance a sentence repeats the previous sentence's high label.
    pub high_persistence: f64,
    pub pause_prob: f64,
    pub gap_prob: f64,
    pub backchannel_overlap_prob: f64,
    pub max_sentence_ticks: usize,
    pub window: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            dialogues: 200,
            duration_s: 60,
            emb_dim: 16,
            margin: 2.0,
            noise: 0.5,
            topic_scale: 3.0,
            high_prior: [0.5418, 0.1893, 0.1237, 0.1443],
            low_prior: [0.6477, 0.1903, 0.0907, 0.0713],
            anchors_mean: 3.92,
            anchor_spacing_mean: 60.55,
            topics: None,
            high_persistence: 0.3,
            pause_prob: 0.1,
            gap_prob: 0.3,
            backchannel_overlap_prob: 0.5,
            max_sentence_ticks: 8,
            window: 90,
        }
    }
}

/// Cluster parameters solved from the low-level prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPlan {
    /// Probability that a cluster is an interruption burst.
    pub burst_prob: f64,
    /// Expected tail length beyond [`MIN_TAIL`].
    pub extra_tail_mean: f64,
    /// Expected backchannel pairs per cluster (at most one).
    pub backchannel_prob: f64,
    /// Expected sentences per second.
    pub sentence_rate: f64,
}

fn normalize(p: &[f64; 4], what: &str) -> Result<[f64; 4]> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-2 {
        return Err(Error::Config(format!("{what} sums to {s}, expected 1")));
    }
    Ok(p.map(|v| v / s))
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.dialogues == 0 || self.duration_s == 0 {
            return bad("dialogues and duration must be positive");
        }
        if self.emb_dim < 9 {
            return bad("emb_dim must be at least 9 (8 centroid dims plus topic code)");
        }
        if !(self.margin > 0.0) || !(self.topic_scale > 0.0) || !(self.noise >= 0.0) {
            return bad("margin and topic_scale must be positive, noise non-negative");
        }
        if !(self.anchors_mean > 0.0) || !(self.anchor_spacing_mean > 0.0) {
            return bad("anchor statistics must be positive");
        }
        for (name, p) in [
            ("high_persistence", self.high_persistence),
            ("pause_prob", self.pause_prob),
            ("gap_prob", self.gap_prob),
            ("backchannel_overlap_prob", self.backchannel_overlap_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.max_sentence_ticks < 2 || self.window == 0 {
            return bad("max_sentence_ticks must be >= 2 and window >= 1");
        }
        if self.topics == Some(0) {
            return bad("topics must be positive");
        }
        normalize(&self.high_prior, "high_prior")?;
        self.plan()?;
        Ok(())
    }

    /// Solves the cluster mix for the low prior, or explains why the prior
    /// cannot be realized.
    pub fn plan(&self) -> Result<ClusterPlan> {
        let [_, tt, int, bc] = normalize(&self.low_prior, "low_prior")?;
        let clusters = tt + int / INT_FLIPS_MEAN;
        if clusters <= 0.0 {
            return Err(Error::Config("low_prior needs some turn-taking or interruption mass".into()));
        }
        let burst_prob = (int / INT_FLIPS_MEAN) / clusters;
        let ticks_per_cluster = 1.0 / clusters;
        let flips = (tt + int) / clusters;
        let tail = ticks_per_cluster - flips;
        if tail < MIN_TAIL as f64 {
            return Err(Error::Config(format!(
                "low_prior implies {tail:.3}-second tails; at least {MIN_TAIL} are needed"
            )));
        }
        let backchannel_prob = bc / 2.0 / clusters;
        if backchannel_prob > 1.0 {
            return Err(Error::Config("low_prior has more backchannel mass than clusters can hold".into()));
        }
        let sentences = (1.0 - burst_prob) + burst_prob * INT_FLIPS_MEAN + backchannel_prob;
        Ok(ClusterPlan {
            burst_prob,
            extra_tail_mean: tail - MIN_TAIL as f64,
            backchannel_prob,
            sentence_rate: sentences * clusters,
        })
    }

    /// Topic count: expected candidates per second over the anchor target.
    pub fn topic_count(&self) -> Result<usize> {
        if let Some(k) = self.topics {
            return Ok(k);
        }
        let plan = self.plan()?;
        let n = self.duration_s;
        let w = self.window as usize;
        let mean_window = (0..n).map(|t| t.min(w) as f64).sum::<f64>() / n as f64;
        let cands = plan.sentence_rate * mean_window;
        let k = (cands / self.anchors_mean).round() as usize;
        Ok(k.clamp(1, self.emb_dim - 8))
    }
}

/// One generated second before embedding and replay.
#[derive(Clone, Debug)]
struct Tick {
    speaker: u8,
    owner: u8,
    low: LowAct,
    voiced: [bool; 2],
    sentence: usize,
}

#[derive(Clone, Debug)]
struct Sentence {
    high: HighAct,
    topic: usize,
}

struct Builder<'a> {
    cfg: &'a ScenarioConfig,
    high_prior: [f64; 4],
    topics: usize,
    ticks: Vec<Tick>,
    sentences: Vec<Sentence>,
    last_high: Option<HighAct>,
    owner_sentence: Option<(usize, usize)>,
}

fn draw_index(rng: &mut ChaCha8Rng, p: &[f64; 4]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    3
}

impl Builder<'_> {
    fn new_sentence(&mut self, rng: &mut ChaCha8Rng, topic: Option<usize>) -> usize {
        let high = match self.last_high {
            Some(h) if rng.random::<f64>() < self.cfg.high_persistence => h,
            _ => HighAct::ALL[draw_index(rng, &self.high_prior)],
        };
        self.last_high = Some(high);
        let topic = topic.unwrap_or_else(|| rng.random_range(0..self.topics));
        self.sentences.push(Sentence { high, topic });
        self.sentences.len() - 1
    }

    fn current_topic(&self) -> Option<usize> {
        self.owner_sentence.map(|(s, _)| self.sentences[s].topic)
    }

    /// A second spoken by the owner inside their turn.
    fn owner_tick(&mut self, rng: &mut ChaCha8Rng, owner: u8, low: LowAct, silent_ok: bool) {
        let (sent, len) = match self.owner_sentence {
            Some((s, n)) if n < self.cfg.max_sentence_ticks => (s, n),
            prev => {
                let topic = prev.map(|(s, _)| self.sentences[s].topic);
                (self.new_sentence(rng, topic), 0)
            }
        };
        self.owner_sentence = Some((sent, len + 1));
        let silent = silent_ok && rng.random::<f64>() < self.cfg.pause_prob;
        let mut voiced = [false; 2];
        voiced[owner as usize] = !silent;
        self.ticks.push(Tick {
            speaker: owner,
            owner,
            low,
            voiced,
            sentence: sent,
        });
    }

    /// A one-second sentence by `speaker`, overlapped by the other side.
    fn short_tick(&mut self, rng: &mut ChaCha8Rng, speaker: u8, owner: u8, low: LowAct, overlap: bool, topic: Option<usize>) {
        let sent = self.new_sentence(rng, topic);
        let mut voiced = [false; 2];
        voiced[speaker as usize] = true;
        voiced[1 - speaker as usize] = overlap;
        self.ticks.push(Tick {
            speaker,
            owner,
            low,
            voiced,
            sentence: sent,
        });
    }

    fn tail(&mut self, rng: &mut ChaCha8Rng, plan: &ClusterPlan, owner: u8, extra: &Poisson<f64>) {
        let g = MIN_TAIL + extra.sample(rng) as usize;
        let bc_at = (rng.random::<f64>() < plan.backchannel_prob).then(|| rng.random_range(0..=g - 2));
        let mut i = 0;
        while i < g {
            if bc_at == Some(i) {
                let overlap = rng.random::<f64>() < self.cfg.backchannel_overlap_prob;
                let topic = self.current_topic();
                self.short_tick(rng, 1 - owner, owner, LowAct::Backchannel, overlap, topic);
                self.owner_tick(rng, owner, LowAct::Backchannel, false);
                i += 2;
            } else {
                self.owner_tick(rng, owner, LowAct::Continuation, true);
                i += 1;
            }
        }
    }
}

/// Re-derives low-level labels from speaker and turn-ownership traces.
///
/// An unchanged speaker is continuation. A speaker change without an
/// ownership change is a backchannel. An ownership change is an
/// interruption when another ownership change lies within
/// [`FLIP_WINDOW`] - 1 seconds, and turn-taking otherwise.
pub fn derive_low_labels(speakers: &[u8], owners: &[u8]) -> Vec<LowAct> {
    let n = speakers.len();
    let flips: Vec<usize> = (1..n).filter(|&t| owners[t] != owners[t - 1]).collect();
    (0..n)
        .map(|t| {
            if t == 0 || speakers[t] == speakers[t - 1] {
                LowAct::Continuation
            } else if !flips.contains(&t) {
                LowAct::Backchannel
            } else if flips.iter().any(|&f| f != t && f.abs_diff(t) < FLIP_WINDOW) {
                LowAct::Interruption
            } else {
                LowAct::TurnTaking
            }
        })
        .collect()
}

/// One dialogue plus the latent traces it was generated from.
#[derive(Clone, Debug)]
pub struct SynthDialogue {
    pub records: Vec<SecondRecord>,
    pub owners: Vec<u8>,
    pub topics: Vec<usize>,
}

fn embed(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig, high: HighAct, low: LowAct, topic: usize) -> (Vec<f64>, Vec<f64>) {
    let d = cfg.emb_dim;
    let normal = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut noise = |v: &mut Vec<f64>| {
        if cfg.noise > 0.0 {
            v.iter_mut().for_each(|x| *x += normal.sample(rng));
        }
    };
    let mut acoustic = vec![0.0; d];
    acoustic[low.index()] = cfg.margin;
    let mut semantic = vec![0.0; d];
    semantic[4 + high.index()] = cfg.margin;
    semantic[8 + topic % (d - 8)] = cfg.topic_scale;
    noise(&mut acoustic);
    noise(&mut semantic);
    (acoustic, semantic)
}

fn tick_text(rng: &mut ChaCha8Rng, low: LowAct, speaker_is_owner: bool, topic: usize) -> String {
    if low == LowAct::Backchannel && !speaker_is_owner {
        let ack = ACKS[rng.random_range(0..ACKS.len())];
        return format!("{ack} topic{topic}");
    }
    let a = FILLERS[rng.random_range(0..FILLERS.len())];
    let b = FILLERS[rng.random_range(0..FILLERS.len())];
    format!("topic{topic} {a} {b}")
}

/// Generates dialogue `index` of the corpus.
pub fn synth_dialogue(cfg: &ScenarioConfig, index: usize) -> Result<SynthDialogue> {
    cfg.validate()?;
    let plan = cfg.plan()?;
    let topics = cfg.topic_count()?;
    let mut rng = item_rng(cfg.seed, STREAM_SYNTH, index as u64);
    let extra = Poisson::new(plan.extra_tail_mean.max(1e-12)).map_err(|e| Error::Config(e.to_string()))?;
    let n = cfg.duration_s;
    let mut b = Builder {
        cfg,
        high_prior: normalize(&cfg.high_prior, "high_prior")?,
        topics,
        ticks: Vec::with_capacity(n + 8),
        sentences: Vec::new(),
        last_high: None,
        owner_sentence: None,
    };

    let mut owner: u8 = rng.random_range(0..2);
    b.tail(&mut rng, &plan, owner, &extra);
    while b.ticks.len() < n {
        if rng.random::<f64>() < plan.burst_prob {
            let flips = if rng.random::<bool>() { 2 } else { 3 };
            for k in 0..flips {
                owner = 1 - owner;
                if k + 1 < flips {
                    b.short_tick(&mut rng, owner, owner, LowAct::Interruption, true, None);
                } else {
                    b.owner_sentence = None;
                    b.owner_tick(&mut rng, owner, LowAct::Interruption, false);
                    if let Some(t) = b.ticks.last_mut() {
                        t.voiced = [true, true];
                    }
                }
            }
        } else {
            owner = 1 - owner;
            b.owner_sentence = None;
            let gap = rng.random::<f64>() < cfg.gap_prob;
            b.owner_tick(&mut rng, owner, LowAct::TurnTaking, false);
            if gap {
                if let Some(t) = b.ticks.last_mut() {
                    t.voiced = [false, false];
                }
            }
        }
        b.tail(&mut rng, &plan, owner, &extra);
    }
    b.ticks.truncate(n);

    // A sentence ends on its last second, which must be voiced so the
    // sentence has text.
    let mut last_of = vec![usize::MAX; b.sentences.len()];
    for (t, tk) in b.ticks.iter().enumerate() {
        last_of[tk.sentence] = t;
    }
    let mut ends = vec![false; n];
    for &t in last_of.iter().filter(|&&t| t != usize::MAX) {
        ends[t] = true;
        let sp = b.ticks[t].speaker as usize;
        b.ticks[t].voiced[sp] = true;
    }

    let audio_id = format!("synth-{}-{index:05}", cfg.seed);
    let mut records = Vec::with_capacity(n);
    let mut owners = Vec::with_capacity(n);
    let mut tick_topics = Vec::with_capacity(n);
    for (t, tk) in b.ticks.iter().enumerate() {
        let s = &b.sentences[tk.sentence];
        let (acoustic, semantic) = embed(&mut rng, cfg, s.high, tk.low, s.topic);
        let text = if tk.voiced[tk.speaker as usize] {
            tick_text(&mut rng, tk.low, tk.speaker == tk.owner, s.topic)
        } else {
            String::new()
        };
        records.push(SecondRecord {
            audio_id: audio_id.clone(),
            t: t as u64,
            speaker: tk.speaker,
            text,
            emb_acoustic: acoustic,
            emb_semantic: semantic,
            vad: tk.voiced,
            sentence_end: ends[t],
            gold: Some(Gold {
                high: s.high,
                low: tk.low,
                anchors: Vec::new(),
                rationale: None,
            }),
        });
        owners.push(tk.owner);
        tick_topics.push(s.topic);
    }
    plant_anchors(&mut records, &tick_topics, cfg.window)?;
    Ok(SynthDialogue {
        records,
        owners,
        topics: tick_topics,
    })
}

/// Replays the dialogue through a graph with gold labels, marks same-topic
/// candidates as anchors and renders the gold rationale from them.
fn plant_anchors(records: &mut [SecondRecord], topics: &[usize], window: u64) -> Result<()> {
    let mut g = GotGraph::new(window)?;
    for i in 0..records.len() {
        let r = &records[i];
        let gold = r.gold.as_ref().expect("synth records carry gold");
        let labels = SpeechActPair::certain(gold.high, gold.low);
        let key = g.begin_tick(r, &labels)?;
        let (_, cands) = g.candidate_view(r.t)?;
        let sentence_topic = |s: &SentenceNode| topics[(s.end - 1) as usize];
        let anchors: Vec<u64> = cands
            .iter()
            .filter(|s| sentence_topic(s) == topics[i])
            .map(|s| s.id)
            .collect();
        let selection = SelectionResult {
            t: r.t,
            candidate_ids: cands.iter().map(|s| s.id).collect(),
            scores: Vec::new(),
            tau: 0.0,
            mask: vec![true; cands.len()],
            anchors: anchors.clone(),
        };
        let chain = linearize(&build_condition(&g, &selection, DEFAULT_RECENT)?);
        let rationale = template_rationale(&chain);
        let r = &mut records[i];
        let gold = r.gold.as_mut().expect("synth records carry gold");
        gold.anchors = anchors;
        gold.rationale = Some(rationale);
        g.end_tick(&records[i], key);
    }
    Ok(())
}

pub fn synth_corpus(cfg: &ScenarioConfig) -> Result<Vec<SynthDialogue>> {
    cfg.validate()?;
    (0..cfg.dialogues).map(|i| synth_dialogue(cfg, i)).collect()
}

/// Corpus records only, one inner vector per dialogue.
pub fn synth_stream(cfg: &ScenarioConfig) -> Result<Vec<Vec<SecondRecord>>> {
    Ok(synth_corpus(cfg)?.into_iter().map(|d| d.records).collect())
}

/// One line of the labels file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelLine {
    pub audio_id: String,
    pub t: u64,
    pub high: HighAct,
    pub low: LowAct,
    pub anchors: Vec<u64>,
    pub rationale: String,
}

pub fn label_lines(records: &[SecondRecord]) -> Vec<LabelLine> {
    records
        .iter()
        .filter_map(|r| {
            r.gold.as_ref().map(|g| LabelLine {
                audio_id: r.audio_id.clone(),
                t: r.t,
                high: g.high,
                low: g.low,
                anchors: g.anchors.clone(),
                rationale: g.rationale.clone().unwrap_or_default(),
            })
        })
        .collect()
}

/// Dialogue-level split into train/validation/test index sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles dialogue indices with the split stream and cuts them by
/// `ratios`, rounding the first two parts.
pub fn split(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Config("split ratios must be non-negative".into()));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {sum}, expected 1")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut stream_rng(seed, STREAM_SPLIT));
    let n_train = ((n as f64) * ratios[0]).round() as usize;
    let n_val = (((n as f64) * ratios[1]).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let mut parts = [
        idx[..n_train].to_vec(),
        idx[n_train..n_train + n_val].to_vec(),
        idx[n_train + n_val..].to_vec(),
    ];
    parts.iter_mut().for_each(|p| p.sort_unstable());
    let [train, val, test] = parts;
    Ok(Split { train, val, test })
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.6, 0.2, 0.2];

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn small(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            seed,
            dialogues: 3,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn default_plan_matches_prior_budget() {
        let p = ScenarioConfig::default().plan().unwrap();
        assert!((p.burst_prob - 0.1601).abs() < 1e-3, "{p:?}");
        assert!((p.extra_tail_mean - 0.1733).abs() < 1e-3, "{p:?}");
        assert!((p.backchannel_prob - 0.1573).abs() < 1e-3, "{p:?}");
        assert_eq!(ScenarioConfig::default().topic_count().unwrap(), 2);
    }

    #[test]
    fn infeasible_priors_rejected() {
        let mut c = ScenarioConfig::default();
        c.low_prior = [0.2, 0.6, 0.1, 0.1];
        assert!(c.validate().is_err());
        c.low_prior = [1.0, 0.0, 0.0, 0.0];
        assert!(c.validate().is_err());
        c = ScenarioConfig::default();
        c.high_prior = [0.5, 0.5, 0.5, 0.5];
        assert!(c.validate().is_err());
        c = ScenarioConfig::default();
        c.emb_dim = 8;
        assert!(c.validate().is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = serde_json::to_string(&synth_stream(&small(42)).unwrap()).unwrap();
        let b = serde_json::to_string(&synth_stream(&small(42)).unwrap()).unwrap();
        let c = serde_json::to_string(&synth_stream(&small(43)).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn labels_follow_speaker_and_ownership_traces() {
        for d in synth_corpus(&small(7)).unwrap() {
            let speakers: Vec<u8> = d.records.iter().map(|r| r.speaker).collect();
            let derived = derive_low_labels(&speakers, &d.owners);
            for (r, want) in d.records.iter().zip(derived) {
                assert_eq!(r.gold.as_ref().unwrap().low, want, "{}@{}", r.audio_id, r.t);
                let unchanged = r.t == 0 || speakers[r.t as usize - 1] == r.speaker;
                assert_eq!(want == LowAct::Continuation, unchanged);
            }
        }
    }

    #[test]
    fn noiseless_embeddings_are_centroid_separable() {
        let mut c = small(3);
        c.noise = 0.0;
        for r in synth_stream(&c).unwrap().iter().flatten() {
            let g = r.gold.as_ref().unwrap();
            let low = (0..4).max_by(|&a, &b| r.emb_acoustic[a].total_cmp(&r.emb_acoustic[b])).unwrap();
            let high = (4..8).max_by(|&a, &b| r.emb_semantic[a].total_cmp(&r.emb_semantic[b])).unwrap() - 4;
            assert_eq!((high, low), (g.high.index(), g.low.index()));
        }
    }

    #[test]
    fn anchors_precede_and_sit_in_window() {
        let mut c = small(5);
        c.duration_s = 150;
        c.window = 40;
        for d in synth_corpus(&c).unwrap() {
            let mut g = GotGraph::new(c.window).unwrap();
            for r in &d.records {
                let gold = r.gold.as_ref().unwrap();
                let key = g.begin_tick(r, &SpeechActPair::certain(gold.high, gold.low)).unwrap();
                for id in &gold.anchors {
                    let s = g.sentences().iter().find(|s| s.id == *id).unwrap();
                    assert!(s.end <= r.t && s.end + c.window > r.t);
                    assert_eq!(d.topics[(s.end - 1) as usize], d.topics[r.t as usize]);
                }
                assert!(gold.rationale.as_ref().is_some_and(|t| !t.is_empty()));
                g.end_tick(r, key);
            }
        }
    }

    #[test]
    fn marginals_converge_to_priors() {
        let cfg = ScenarioConfig {
            dialogues: 100,
            duration_s: 1000,
            ..ScenarioConfig::default()
        };
        let mut hi = [0usize; 4];
        let mut lo = [0usize; 4];
        let mut n = 0;
        for d in synth_corpus(&cfg).unwrap() {
            for r in d.records {
                let g = r.gold.unwrap();
                hi[g.high.index()] += 1;
                lo[g.low.index()] += 1;
                n += 1;
            }
        }
        assert_eq!(n, 100_000);
        let hp = normalize(&cfg.high_prior, "").unwrap();
        for i in 0..4 {
            assert!((hi[i] as f64 / n as f64 - hp[i]).abs() <= 0.02, "high {i}: {hi:?}");
            assert!((lo[i] as f64 / n as f64 - cfg.low_prior[i]).abs() <= 0.02, "low {i}: {lo:?}");
        }
    }

    #[test]
    fn split_sizes() {
        let s = split(10, DEFAULT_SPLIT, 42).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let s = split(10, [1.0, 0.0, 0.0], 42).unwrap();
        assert_eq!(s.train.len(), 10);
        assert!(split(10, [0.5, 0.2, 0.2], 42).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 0..300usize, a in 0.0..1.0f64, b in 0.0..1.0f64, seed in any::<u64>()) {
            let r0 = a;
            let r1 = (1.0 - a) * b;
            let r2 = 1.0 - r0 - r1;
            let s = split(n, [r0, r1, r2], seed).unwrap();
            let all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            let set: BTreeSet<usize> = all.iter().copied().collect();
            prop_assert_eq!(all.len(), n);
            prop_assert_eq!(set, (0..n).collect::<BTreeSet<_>>());
            prop_assert_eq!(&s, &split(n, [r0, r1, r2], seed).unwrap());
        }
    }
}
