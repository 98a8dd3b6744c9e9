//! Stream data model: audio signals, per-second records, speech-act labels,
//! and strictly causal windowed access.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    channels: Vec<Vec<f64>>,
    sample_rate_hz: u32,
}

impl AudioSignal {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if channels.is_empty() || channels.len() > 2 {
            return Err(Error::invalid(format!(
                "expected 1 or 2 channels, got {}",
                channels.len()
            )));
        }
        if channels.len() == 2 && channels[0].len() != channels[1].len() {
            return Err(Error::shape(format!(
                "channel lengths differ: {} vs {}",
                channels[0].len(),
                channels[1].len()
            )));
        }
        Ok(Self {
            channels,
            sample_rate_hz,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate_hz)
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `w0 * ch0[i] + w1 * ch1[i]` per sample.
pub fn downmix_to_mono(signal: &AudioSignal, weights: (f64, f64)) -> Result<AudioSignal> {
    if signal.channel_count() != 2 {
        return Err(Error::invalid("downmix needs a two-channel signal"));
    }
    if !weights.0.is_finite() || !weights.1.is_finite() {
        return Err(Error::invalid("downmix weights must be finite"));
    }
    let mixed = signal.channels[0]
        .iter()
        .zip(&signal.channels[1])
        .map(|(a, b)| weights.0 * a + weights.1 * b)
        .collect();
    AudioSignal::mono(mixed, signal.sample_rate_hz)
}

/// One-second blocks of a mono signal; the final block is zero-padded.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPartition {
    pub blocks: Vec<Vec<f64>>,
    pub pad_len: usize,
}

impl BlockPartition {
    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    /// The original samples: all blocks joined with the padding trimmed.
    pub fn concat_trimmed(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.blocks.concat();
        out.truncate(out.len() - self.pad_len);
        out
    }
}

pub fn partition_blocks(signal: &AudioSignal) -> Result<BlockPartition> {
    if signal.channel_count() != 1 {
        return Err(Error::invalid("block partitioning needs a mono signal"));
    }
    if signal.sample_rate_hz != CANONICAL_SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "expected {CANONICAL_SAMPLE_RATE} Hz input, got {} Hz (resample upstream)",
            signal.sample_rate_hz
        )));
    }
    let block = signal.sample_rate_hz as usize;
    let samples = signal.channel(0);
    let n = samples.len().div_ceil(block);
    let pad_len = n * block - samples.len();
    let blocks = samples
        .chunks(block)
        .map(|c| {
            let mut b = c.to_vec();
            b.resize(block, 0.0);
            b
        })
        .collect();
    Ok(BlockPartition { blocks, pad_len })
}

macro_rules! label_enum {
    ($name:ident { $($variant:ident),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: [$name; 4] = [$($name::$variant),+];

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => stringify!($variant)),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| Error::data(format!("unknown {} label {s:?}", stringify!($name))))
            }
        }
    };
}

label_enum!(HighAct {
    Constatives,
    Directives,
    Commissives,
    Acknowledgments,
});

label_enum!(LowAct {
    Continuation,
    TurnTaking,
    Interruption,
    Backchannel,
});

pub const SIMPLEX_TOL: f64 = 1e-9;

/// Joint high/low prediction with class probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechActPair {
    pub high: HighAct,
    pub low: LowAct,
    pub p_high: [f64; 4],
    pub p_low: [f64; 4],
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

fn check_simplex(p: &[f64; 4], what: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numeric(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Numeric(format!("{what} sums to {s}")));
    }
    Ok(())
}

impl SpeechActPair {
    /// Labels taken as the argmax of each distribution (first index on ties).
    pub fn from_probs(p_high: [f64; 4], p_low: [f64; 4]) -> Self {
        Self {
            high: HighAct::ALL[argmax4(&p_high)],
            low: LowAct::ALL[argmax4(&p_low)],
            p_high,
            p_low,
        }
    }

    /// One-hot distributions on the given labels.
    pub fn certain(high: HighAct, low: LowAct) -> Self {
        let mut p_high = [0.0; 4];
        let mut p_low = [0.0; 4];
        p_high[high.index()] = 1.0;
        p_low[low.index()] = 1.0;
        Self {
            high,
            low,
            p_high,
            p_low,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_simplex(&self.p_high, "p_high")?;
        check_simplex(&self.p_low, "p_low")?;
        if self.p_high[self.high.index()] < self.p_high[argmax4(&self.p_high)] {
            return Err(Error::invalid("high label disagrees with argmax of p_high"));
        }
        if self.p_low[self.low.index()] < self.p_low[argmax4(&self.p_low)] {
            return Err(Error::invalid("low label disagrees with argmax of p_low"));
        }
        Ok(())
    }
}

/// Gold annotation attached to a record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gold {
    pub high: HighAct,
    pub low: LowAct,
    #[serde(default)]
    pub anchors: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

/// One second of observable input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecondRecord {
    pub audio_id: String,
    pub t: u64,
    pub speaker: u8,
    pub text: String,
    pub emb_acoustic: Vec<f64>,
    pub emb_semantic: Vec<f64>,
    pub vad: [bool; 2],
    pub sentence_end: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Gold>,
}

const RECORD_FIELDS: [&str; 9] = [
    "audio_id",
    "t",
    "speaker",
    "text",
    "emb_acoustic",
    "emb_semantic",
    "vad",
    "sentence_end",
    "gold",
];

impl SecondRecord {
    pub fn speaker_tag(&self) -> &'static str {
        speaker_tag(self.speaker)
    }

    pub fn validate_shape(&self) -> Result<()> {
        if self.speaker > 1 {
            return Err(Error::data(format!(
                "{}@{}: speaker must be 0 or 1, got {}",
                self.audio_id, self.t, self.speaker
            )));
        }
        if self.emb_acoustic.is_empty() || self.emb_semantic.is_empty() {
            return Err(Error::data(format!(
                "{}@{}: empty embedding",
                self.audio_id, self.t
            )));
        }
        if self
            .emb_acoustic
            .iter()
            .chain(&self.emb_semantic)
            .any(|v| !v.is_finite())
        {
            return Err(Error::data(format!(
                "{}@{}: non-finite embedding value",
                self.audio_id, self.t
            )));
        }
        Ok(())
    }
}

pub fn speaker_tag(channel: u8) -> &'static str {
    match channel {
        0 => "A",
        1 => "B",
        _ => "?",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IngestMode {
    /// Unknown fields and malformed lines abort ingestion.
    #[default]
    Strict,
    /// Unknown fields are dropped; malformed lines are skipped with a warning.
    Lenient,
}

#[derive(Debug, Default)]
pub struct StreamLoad {
    pub records: Vec<SecondRecord>,
    pub skipped: usize,
}

/// Checks stream-level invariants that one line cannot see: strictly
/// increasing ticks per dialogue and constant embedding widths.
#[derive(Default)]
struct StreamValidator {
    last_tick: HashMap<String, u64>,
    dims: HashMap<String, (usize, usize)>,
}

impl StreamValidator {
    fn check(&mut self, r: &SecondRecord) -> Result<()> {
        r.validate_shape()?;
        if let Some(&prev) = self.last_tick.get(&r.audio_id) {
            if r.t <= prev {
                return Err(Error::data(format!(
                    "{}: tick {} does not follow {}",
                    r.audio_id, r.t, prev
                )));
            }
        }
        let dims = (r.emb_acoustic.len(), r.emb_semantic.len());
        if let Some(&d) = self.dims.get(&r.audio_id) {
            if d != dims {
                return Err(Error::data(format!(
                    "{}@{}: embedding dims {:?} changed from {:?}",
                    r.audio_id, r.t, dims, d
                )));
            }
        }
        self.last_tick.insert(r.audio_id.clone(), r.t);
        self.dims.insert(r.audio_id.clone(), dims);
        Ok(())
    }
}

fn parse_line(line: &str, mode: IngestMode) -> Result<SecondRecord> {
    match mode {
        IngestMode::Strict => Ok(serde_json::from_str(line)?),
        IngestMode::Lenient => {
            let mut value: serde_json::Value = serde_json::from_str(line)?;
            if let Some(obj) = value.as_object_mut() {
                obj.retain(|k, _| RECORD_FIELDS.contains(&k.as_str()));
            }
            Ok(serde_json::from_value(value)?)
        }
    }
}

/// Reads a JSON Lines stream. Blank lines are ignored.
pub fn read_stream(reader: impl BufRead, mode: IngestMode) -> Result<StreamLoad> {
    let mut load = StreamLoad::default();
    let mut validator = StreamValidator::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = parse_line(&line, mode).and_then(|r| validator.check(&r).map(|_| r));
        match (parsed, mode) {
            (Ok(r), _) => load.records.push(r),
            (Err(e), IngestMode::Strict) => {
                return Err(Error::data(format!("line {}: {e}", lineno + 1)))
            }
            (Err(e), IngestMode::Lenient) => {
                log::warn!("skipping line {}: {e}", lineno + 1);
                load.skipped += 1;
            }
        }
    }
    Ok(load)
}

pub fn read_stream_file(path: &std::path::Path, mode: IngestMode) -> Result<StreamLoad> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_stream(std::io::BufReader::new(file), mode)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: impl IntoIterator<Item = T>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

/// Splits a mixed stream into dialogues, in order of first appearance.
pub fn group_dialogues(records: Vec<SecondRecord>) -> Vec<Vec<SecondRecord>> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut out: Vec<Vec<SecondRecord>> = Vec::new();
    for r in records {
        let slot = *index.entry(r.audio_id.clone()).or_insert_with(|| {
            out.push(Vec::new());
            out.len() - 1
        });
        out[slot].push(r);
    }
    out
}

/// Records with tick in `[t - w, t)`; `records` must be sorted by tick.
pub fn causal_window(records: &[SecondRecord], t: u64, w: u64) -> &[SecondRecord] {
    let lo = t.saturating_sub(w);
    let start = records.partition_point(|r| r.t < lo);
    let end = records.partition_point(|r| r.t < t);
    &records[start..end.max(start)]
}
