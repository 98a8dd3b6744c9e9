//! Classification scores, the low-given-high label matrix, agreement rates,
//! turn-taking event statistics and latency summaries.
//!
//! Everything here is a fold over its input; count-based results merge by
//! addition so dialogues can be scored independently.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::stream::{HighAct, LowAct};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR / (P + R)`, and 0 when `P + R = 0`.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Gold or predicted at least once.
    pub fn is_present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// One-vs-rest counts for each of `k` classes.
pub fn confusion_counts(preds: &[usize], golds: &[usize], k: usize) -> Result<Vec<ConfusionCounts>> {
    if preds.len() != golds.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("no labels to score"));
    }
    if let Some(&bad) = preds.iter().chain(golds).find(|&&c| c >= k) {
        return Err(Error::invalid(format!("class {bad} out of range for {k} classes")));
    }
    let mut out = vec![ConfusionCounts::default(); k];
    for (&p, &g) in preds.iter().zip(golds) {
        for (c, cc) in out.iter_mut().enumerate() {
            match (p == c, g == c) {
                (true, true) => cc.tp += 1,
                (true, false) => cc.fp += 1,
                (false, true) => cc.fn_ += 1,
                (false, false) => cc.tn += 1,
            }
        }
    }
    Ok(out)
}

pub fn f1_per_class(preds: &[usize], golds: &[usize], k: usize) -> Result<Vec<f64>> {
    Ok(confusion_counts(preds, golds, k)?.iter().map(|c| c.f1()).collect())
}

/// Mean F1 over classes that occur in the gold labels or the predictions.
pub fn macro_f1(counts: &[ConfusionCounts]) -> f64 {
    let present: Vec<f64> = counts.iter().filter(|c| c.is_present()).map(|c| c.f1()).collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Exact AUC as `P(s+ > s-) + P(s+ = s-)/2`, via midranks.
///
/// `None` when either class is missing.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<Option<f64>> {
    if scores.len() != positive.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, to keep midranks integral.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the midrank (i + j + 2) / 2.
        let mid2 = (i + j + 2) as u128;
        let pos_here = idx[i..=j].iter().filter(|&&k| positive[k]).count() as u128;
        rank2_pos += mid2 * pos_here;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    let u2 = rank2_pos - np * (np + 1);
    Ok(Some(u2 as f64 / (2 * np * nn) as f64))
}

/// One-vs-rest AUC per class from an `n x k` score table.
pub fn auc_ovr(scores: &[Vec<f64>], golds: &[usize], k: usize) -> Result<Vec<Option<f64>>> {
    if scores.len() != golds.len() {
        return Err(Error::shape("score rows and gold labels differ in length"));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != k) {
        return Err(Error::shape(format!("score row of width {}, expected {k}", row.len())));
    }
    (0..k)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let y: Vec<bool> = golds.iter().map(|&g| g == c).collect();
            auc_binary(&s, &y)
        })
        .collect()
}

/// Row `h` is the empirical distribution of low labels among ticks whose
/// high label is `h`. Rows with no ticks stay zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMatrix {
    pub rows: [[f64; 4]; 4],
    pub counts: [[u64; 4]; 4],
    pub row_totals: [u64; 4],
}

impl ConditionalMatrix {
    pub fn empty_rows(&self) -> Vec<HighAct> {
        HighAct::ALL.into_iter().filter(|h| self.row_totals[h.index()] == 0).collect()
    }

    pub fn row(&self, h: HighAct) -> [f64; 4] {
        self.rows[h.index()]
    }

    fn from_counts(counts: [[u64; 4]; 4]) -> Self {
        let mut rows = [[0.0; 4]; 4];
        let mut row_totals = [0; 4];
        for h in 0..4 {
            row_totals[h] = counts[h].iter().sum();
            if row_totals[h] > 0 {
                for l in 0..4 {
                    rows[h][l] = counts[h][l] as f64 / row_totals[h] as f64;
                }
            }
        }
        Self {
            rows,
            counts,
            row_totals,
        }
    }

    pub fn merge(&self, other: &ConditionalMatrix) -> Self {
        let mut c = self.counts;
        for (h, row) in c.iter_mut().enumerate() {
            for (l, v) in row.iter_mut().enumerate() {
                *v += other.counts[h][l];
            }
        }
        Self::from_counts(c)
    }
}

pub fn conditional_low_given_high(pairs: &[(HighAct, LowAct)]) -> ConditionalMatrix {
    let mut counts = [[0u64; 4]; 4];
    for &(h, l) in pairs {
        counts[h.index()][l.index()] += 1;
    }
    ConditionalMatrix::from_counts(counts)
}

/// Mean of a `T x R` matrix of 0/1 agreement judgments.
pub fn hma(agreements: &[Vec<u8>]) -> Result<f64> {
    let t = agreements.len();
    let r = agreements.first().map_or(0, |row| row.len());
    if t == 0 || r == 0 {
        return Err(Error::invalid("agreement matrix is empty"));
    }
    let mut ones = 0u64;
    for row in agreements {
        if row.len() != r {
            return Err(Error::shape("agreement rows differ in length"));
        }
        for &a in row {
            match a {
                0 => {}
                1 => ones += 1,
                _ => return Err(Error::invalid(format!("agreement entry {a} is not 0 or 1"))),
            }
        }
    }
    Ok(ones as f64 / (t * r) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventType {
    #[serde(rename = "IPU")]
    Ipu,
    Pause,
    Gap,
    Overlap,
}

impl EventType {
    pub const ALL: [EventType; 4] = [EventType::Ipu, EventType::Pause, EventType::Gap, EventType::Overlap];

    pub fn name(self) -> &'static str {
        match self {
            EventType::Ipu => "IPU",
            EventType::Pause => "Pause",
            EventType::Gap => "Gap",
            EventType::Overlap => "Overlap",
        }
    }
}

/// Minimum silent run lengths, in ticks, for a pause or gap to count.
/// Shorter interior silences are left unclassified.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventThresholds {
    pub min_pause_ticks: usize,
    pub min_gap_ticks: usize,
}

impl Default for EventThresholds {
    fn default() -> Self {
        Self {
            min_pause_ticks: 1,
            min_gap_ticks: 1,
        }
    }
}

/// Raw event counts and tick totals; adds across dialogues.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub counts: [u64; 4],
    pub ticks: [u64; 4],
    /// Leading, trailing and sub-threshold silence.
    pub other_silence_ticks: u64,
    pub total_ticks: u64,
}

impl EventCounts {
    pub fn merge(&mut self, other: &EventCounts) {
        for i in 0..4 {
            self.counts[i] += other.counts[i];
            self.ticks[i] += other.ticks[i];
        }
        self.other_silence_ticks += other.other_silence_ticks;
        self.total_ticks += other.total_ticks;
    }

    pub fn count(&self, e: EventType) -> u64 {
        self.counts[e as usize]
    }

    pub fn duration_ticks(&self, e: EventType) -> u64 {
        self.ticks[e as usize]
    }

    pub fn table(&self, tick_seconds: f64) -> Result<EventTable> {
        if self.total_ticks == 0 {
            return Err(Error::invalid("zero-length trace"));
        }
        if !(tick_seconds > 0.0) {
            return Err(Error::invalid("tick length must be positive"));
        }
        let minutes = self.total_ticks as f64 * tick_seconds / 60.0;
        let rows = EventType::ALL
            .iter()
            .map(|&e| EventRow {
                event: e,
                count: self.count(e),
                per_minute: self.count(e) as f64 / minutes,
                duration_ticks: self.duration_ticks(e),
                percent: 100.0 * self.duration_ticks(e) as f64 / self.total_ticks as f64,
            })
            .collect();
        Ok(EventTable {
            rows,
            total_ticks: self.total_ticks,
            minutes,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub event: EventType,
    pub count: u64,
    pub per_minute: f64,
    pub duration_ticks: u64,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventTable {
    pub rows: Vec<EventRow>,
    pub total_ticks: u64,
    pub minutes: f64,
}

impl EventTable {
    pub fn row(&self, e: EventType) -> &EventRow {
        &self.rows[e as usize]
    }

    /// `event_type,events_per_min,cumulative_duration_pct`, one line per type.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("event_type,events_per_min,cumulative_duration_pct\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.4},{:.4}", r.event.name(), r.per_minute, r.percent);
        }
        out
    }
}

fn runs(trace: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < trace.len() {
        if trace[i] {
            let s = i;
            while i < trace.len() && trace[i] {
                i += 1;
            }
            out.push((s, i));
        } else {
            i += 1;
        }
    }
    out
}

/// Segments two VAD traces into IPUs, pauses, gaps and overlaps.
///
/// IPUs are maximal voiced runs per channel. Overlaps are maximal runs with
/// both channels voiced. An interior silent run is a pause when a channel
/// voiced just before it is also voiced just after it, and a gap otherwise.
/// IPU duration counts ticks with exactly one channel voiced.
pub fn event_counts(a: &[bool], b: &[bool], th: &EventThresholds) -> Result<EventCounts> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("VAD traces of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("zero-length trace"));
    }
    let n = a.len();
    let mut ev = EventCounts {
        total_ticks: n as u64,
        ..EventCounts::default()
    };
    ev.counts[EventType::Ipu as usize] = (runs(a).len() + runs(b).len()) as u64;
    let both: Vec<bool> = a.iter().zip(b).map(|(&x, &y)| x && y).collect();
    ev.counts[EventType::Overlap as usize] = runs(&both).len() as u64;
    ev.ticks[EventType::Overlap as usize] = both.iter().filter(|&&v| v).count() as u64;
    ev.ticks[EventType::Ipu as usize] = a.iter().zip(b).filter(|(&x, &y)| x != y).count() as u64;

    let silent: Vec<bool> = a.iter().zip(b).map(|(&x, &y)| !x && !y).collect();
    for (s, e) in runs(&silent) {
        let len = e - s;
        if s == 0 || e == n {
            ev.other_silence_ticks += len as u64;
            continue;
        }
        let same = (a[s - 1] && a[e]) || (b[s - 1] && b[e]);
        let (kind, min) = if same {
            (EventType::Pause, th.min_pause_ticks)
        } else {
            (EventType::Gap, th.min_gap_ticks)
        };
        if len >= min {
            ev.counts[kind as usize] += 1;
            ev.ticks[kind as usize] += len as u64;
        } else {
            ev.other_silence_ticks += len as u64;
        }
    }
    Ok(ev)
}

pub fn event_statistics(a: &[bool], b: &[bool], tick_seconds: f64, th: &EventThresholds) -> Result<EventTable> {
    event_counts(a, b, th)?.table(tick_seconds)
}

/// Summary of wall-clock samples in milliseconds. `std` divides by `n`;
/// percentiles use the nearest-rank rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
    /// `(upper bucket edge in ms, count)`; the last edge is infinite.
    pub histogram: Vec<(f64, u64)>,
}

pub const HISTOGRAM_EDGES_MS: [f64; 12] = [0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0];

fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

pub fn latency_profile(samples_ms: &[f64]) -> Result<LatencyStats> {
    if samples_ms.is_empty() {
        return Err(Error::invalid("no latency samples"));
    }
    if samples_ms.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite latency sample"));
    }
    let n = samples_ms.len();
    let mean = samples_ms.iter().sum::<f64>() / n as f64;
    let var = samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
    let mut sorted = samples_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut histogram: Vec<(f64, u64)> = HISTOGRAM_EDGES_MS
        .iter()
        .copied()
        .chain([f64::INFINITY])
        .map(|e| (e, 0))
        .collect();
    for &s in &sorted {
        let slot = histogram.iter().position(|(e, _)| s <= *e).unwrap_or(histogram.len() - 1);
        histogram[slot].1 += 1;
    }
    Ok(LatencyStats {
        n,
        mean,
        std: var.sqrt(),
        p50: nearest_rank(&sorted, 0.5),
        p95: nearest_rank(&sorted, 0.95),
        max: sorted[n - 1],
        histogram,
    })
}

/// Relative gap between the summed stage means and the end-to-end mean.
pub fn stage_sum_discrepancy(stages: &BTreeMap<String, LatencyStats>, total: &LatencyStats) -> f64 {
    let sum: f64 = stages.values().map(|s| s.mean).sum();
    if total.mean == 0.0 {
        sum.abs()
    } else {
        (sum - total.mean).abs() / total.mean
    }
}

/// Per-class scores keyed by label name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelScores {
    pub f1: BTreeMap<String, f64>,
    pub macro_f1: f64,
    /// Missing classes map to `null`.
    pub auc: BTreeMap<String, Option<f64>>,
    pub counts: BTreeMap<String, ConfusionCounts>,
}

impl LevelScores {
    pub fn compute(names: &[&str], preds: &[usize], golds: &[usize], probs: &[Vec<f64>]) -> Result<Self> {
        let k = names.len();
        let counts = confusion_counts(preds, golds, k)?;
        let auc = auc_ovr(probs, golds, k)?;
        Ok(Self {
            f1: names.iter().zip(&counts).map(|(n, c)| (n.to_string(), c.f1())).collect(),
            macro_f1: macro_f1(&counts),
            auc: names.iter().zip(auc).map(|(n, a)| (n.to_string(), a)).collect(),
            counts: names.iter().zip(counts).map(|(n, c)| (n.to_string(), c)).collect(),
        })
    }
}

/// Everything `eval` reports, serialized as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ticks: usize,
    pub high: LevelScores,
    pub low: LevelScores,
    pub conditional_gold: ConditionalMatrix,
    pub conditional_pred: ConditionalMatrix,
    pub hma_high: Option<f64>,
    pub hma_low: Option<f64>,
    /// Anchor decisions pooled over `(tick, candidate)` pairs.
    pub anchors: Option<ConfusionCounts>,
    pub events: Option<EventTable>,
    pub latency: BTreeMap<String, LatencyStats>,
    pub std_definition: String,
    pub f1_unit: String,
}

pub fn high_names() -> Vec<&'static str> {
    HighAct::ALL.iter().map(|h| h.name()).collect()
}

pub fn low_names() -> Vec<&'static str> {
    LowAct::ALL.iter().map(|l| l.name()).collect()
}
