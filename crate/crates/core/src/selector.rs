//! Evidence selection over the candidate view.
//!
//! The query second and its candidate sentences are embedded as node
//! features and mixed by one fully connected attention layer. Only the
//! query's attention row carries an additive bias built from relational
//! cues (time gap, speaker match). A bilinear head scores each candidate
//! against the query and a second head predicts a query-dependent
//! threshold.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GotGraph, SecondNode, SentenceNode};
use crate::numeric::layers::{AttnBlock, Dense};
use crate::numeric::{AdamW, Bound, ParamStore, Tape, Tensor2, TrainConfig, Var};
use crate::rng::{stream_rng, STREAM_SELECTOR_INIT, STREAM_SELECTOR_TRAIN};
use crate::stream::{SecondRecord, SpeechActPair};

pub const CHECKPOINT_FORMAT: &str = "turnsight.selector/v1";

/// Non-embedding node features: query flag, speaker match, log gap, log length.
const BASE_FEATURES: usize = 4;
const LABEL_FEATURES: usize = 8;
const REL_FEATURES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    pub emb_dim: usize,
    pub hidden: usize,
    pub ff_hidden: usize,
    pub temperature: f64,
    pub lambda_count: f64,
    pub lambda_rank: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            emb_dim: 16,
            hidden: 32,
            ff_hidden: 32,
            temperature: 1.0,
            lambda_count: 0.01,
            lambda_rank: 0.1,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 || self.hidden == 0 || self.ff_hidden == 0 {
            return Err(Error::Config("selector widths must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("selector temperature must be > 0".into()));
        }
        if self.lambda_count < 0.0 || self.lambda_rank < 0.0 {
            return Err(Error::Config("selector loss weights must be >= 0".into()));
        }
        Ok(())
    }

    fn n_features(&self) -> usize {
        BASE_FEATURES + self.emb_dim + LABEL_FEATURES
    }
}

/// Scores, threshold and anchors for one tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub t: u64,
    pub candidate_ids: Vec<u64>,
    pub scores: Vec<f64>,
    pub tau: f64,
    /// Which candidates took part in scoring.
    pub mask: Vec<bool>,
    /// Selected sentence ids, oldest first.
    pub anchors: Vec<u64>,
}

/// `(s - tau) / T`.
pub fn threshold_align(scores: &[f64], tau: f64, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    Ok(scores.iter().map(|s| (s - tau) / temperature).collect())
}

/// Indices with `s > tau`, ordered by start time (then index).
pub fn select_anchors(scores: &[f64], tau: f64, starts: &[u64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] > tau).collect();
    idx.sort_by_key(|&j| (starts[j], j));
    idx
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub wbce: f64,
    pub count: f64,
    pub rank: f64,
}

/// Loss weights for [`selector_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda_count: f64,
    pub lambda_rank: f64,
}

struct LossVars {
    total: Var,
    wbce: Var,
    count: Var,
    rank: Option<Var>,
}

fn check_loss_inputs(n: usize, y: &[f64], mask: &[bool], w: &LossWeights) -> Result<()> {
    if y.len() != n || mask.len() != n {
        return Err(Error::shape(format!(
            "{n} logits, {} labels, {} mask entries",
            y.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("selector loss with every candidate masked"));
    }
    if !(w.alpha > 0.0) {
        return Err(Error::invalid(format!("positive weight must be > 0, got {}", w.alpha)));
    }
    Ok(())
}

/// Builds the three selector loss terms for `logits` (`1 x n`) on `tape`.
fn loss_on_tape(tape: &mut Tape, logits: Var, y: &[f64], mask: &[bool], w: &LossWeights) -> LossVars {
    let n = y.len();
    let m: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let n_in: f64 = m.iter().sum();

    let neg = tape.scale(logits, -1.0);
    let sp_neg = tape.softplus(neg);
    let sp_pos = tape.softplus(logits);
    let pos_w: Vec<f64> = (0..n).map(|j| w.alpha * y[j] * m[j]).collect();
    let neg_w: Vec<f64> = (0..n).map(|j| (1.0 - y[j]) * m[j]).collect();
    let pw = tape.constant(Tensor2::row_vector(&pos_w));
    let nw = tape.constant(Tensor2::row_vector(&neg_w));
    let a = tape.mul(sp_neg, pw);
    let b = tape.mul(sp_pos, nw);
    let ab = tape.add(a, b);
    let s = tape.sum(ab);
    let wbce = tape.scale(s, 1.0 / n_in);

    let sig = tape.sigmoid(logits);
    let mv = tape.constant(Tensor2::row_vector(&m));
    let soft = tape.mul(sig, mv);
    let soft = tape.sum(soft);
    let target: f64 = (0..n).map(|j| y[j] * m[j]).sum();
    let diff = tape.add_scalar(soft, -target);
    let count = tape.square(diff);

    let positives: Vec<(usize, usize)> = (0..n).filter(|&j| mask[j] && y[j] > 0.5).map(|j| (0, j)).collect();
    let rank = if positives.is_empty() {
        None
    } else {
        let k = positives.len() as f64;
        let hidden: crate::numeric::Mask = mask.iter().map(|&b| !b).collect();
        let ls = tape.log_softmax_rows(logits, Some(hidden));
        let picked = tape.gather(ls, positives);
        let sum = tape.sum(picked);
        Some(tape.scale(sum, -1.0 / k))
    };

    let c = tape.scale(count, w.lambda_count);
    let mut total = tape.add(wbce, c);
    if let Some(r) = rank {
        let r = tape.scale(r, w.lambda_rank);
        total = tape.add(total, r);
    }
    LossVars {
        total,
        wbce,
        count,
        rank,
    }
}

/// Weighted BCE + count + rank loss on threshold-aligned logits.
pub fn selector_loss(logits: &[f64], y: &[f64], mask: &[bool], w: &LossWeights) -> Result<LossParts> {
    check_loss_inputs(logits.len(), y, mask, w)?;
    let mut tape = Tape::new();
    let l = tape.constant(Tensor2::row_vector(logits));
    let v = loss_on_tape(&mut tape, l, y, mask, w);
    Ok(LossParts {
        total: tape.scalar(v.total),
        wbce: tape.scalar(v.wbce),
        count: tape.scalar(v.count),
        rank: v.rank.map_or(0.0, |r| tape.scalar(r)),
    })
}

/// Loss builder over a single logit row bound as parameter 0 (for gradient checks).
pub fn selector_loss_fn(
    y: Vec<f64>,
    mask: Vec<bool>,
    w: LossWeights,
) -> impl Fn(&mut Tape, &Bound) -> Var {
    move |tape: &mut Tape, p: &Bound| loss_on_tape(tape, p.get(0), &y, &mask, &w).total
}

/// Features for one tick: query row first, then candidates in view order.
#[derive(Clone, Debug)]
pub struct TickFeatures {
    pub x: Tensor2,
    pub rel: Tensor2,
    pub ids: Vec<u64>,
    pub starts: Vec<u64>,
}

fn push_labels(row: &mut Vec<f64>, high: &[f64; 4], low: &[f64; 4]) {
    row.extend_from_slice(high);
    row.extend_from_slice(low);
}

fn one_hots(p: &SpeechActPair) -> ([f64; 4], [f64; 4]) {
    let mut h = [0.0; 4];
    let mut l = [0.0; 4];
    h[p.high.index()] = 1.0;
    l[p.low.index()] = 1.0;
    (h, l)
}

pub fn featurize(q: &SecondNode, cands: &[&SentenceNode], t: u64, emb_dim: usize) -> Result<TickFeatures> {
    let check = |len: usize| {
        if len != emb_dim {
            Err(Error::shape(format!("node embedding width {len}, selector expects {emb_dim}")))
        } else {
            Ok(())
        }
    };
    check(q.emb.len())?;
    let f = BASE_FEATURES + emb_dim + LABEL_FEATURES;
    let mut x = Vec::with_capacity((cands.len() + 1) * f);
    let mut rel = Vec::with_capacity(cands.len() * REL_FEATURES);
    x.extend_from_slice(&[1.0, 1.0, 0.0, 2f64.ln()]);
    x.extend_from_slice(&q.emb);
    let (h, l) = one_hots(&q.labels);
    push_labels(&mut x, &h, &l);
    for c in cands {
        check(c.emb_mean.len())?;
        let same = if c.speaker == q.speaker { 1.0 } else { 0.0 };
        let gap = ((t.saturating_sub(c.end)) as f64).ln_1p();
        x.extend_from_slice(&[0.0, same, gap, (c.len() as f64).ln_1p()]);
        x.extend_from_slice(&c.emb_mean);
        push_labels(&mut x, &c.high_mean, &c.low_mean);
        rel.extend_from_slice(&[gap, same]);
    }
    Ok(TickFeatures {
        x: Tensor2::from_vec(cands.len() + 1, f, x)?,
        rel: Tensor2::from_vec(cands.len(), REL_FEATURES, rel)?,
        ids: cands.iter().map(|c| c.id).collect(),
        starts: cands.iter().map(|c| c.start).collect(),
    })
}

/// One supervised tick.
#[derive(Clone, Debug)]
pub struct SelectorSample {
    pub t: u64,
    pub features: TickFeatures,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Layout {
    input: Dense,
    block: AttnBlock,
    rel_w: usize,
    bilinear: usize,
    score_w: usize,
    score_b: usize,
    tau: Dense,
}

#[derive(Clone, Debug)]
pub struct Selector {
    cfg: SelectorConfig,
    params: ParamStore,
    layout: Layout,
}

struct ScoreVars {
    scores: Var,
    tau: Var,
}

impl Selector {
    pub fn new(cfg: SelectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, STREAM_SELECTOR_INIT);
        let mut p = ParamStore::new();
        let h = cfg.hidden;
        let input = Dense::register(&mut p, "input", cfg.n_features(), h, &mut rng);
        let block = AttnBlock::register(&mut p, "attn", h, cfg.ff_hidden, &mut rng);
        let rel_w = p.insert("rel.w", Tensor2::zeros(1, REL_FEATURES));
        let bilinear = p.insert_random("score.bilinear", h, h, &mut rng);
        let score_w = p.insert("score.w", Tensor2::zeros(1, h));
        let score_b = p.insert("score.b", Tensor2::zeros(1, 1));
        let tau = Dense::register(&mut p, "tau", h, 1, &mut rng);
        Ok(Self {
            cfg,
            params: p,
            layout: Layout {
                input,
                block,
                rel_w,
                bilinear,
                score_w,
                score_b,
                tau,
            },
        })
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, CHECKPOINT_FORMAT)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.params.load(path, CHECKPOINT_FORMAT)
    }

    /// Additive attention bias: relational cues on the query row's candidate
    /// columns, zero everywhere else.
    fn bias_on_tape(&self, tape: &mut Tape, p: &Bound, f: &TickFeatures) -> Option<Var> {
        let n = f.x.rows();
        if n < 2 {
            return None;
        }
        let rel = tape.constant(f.rel.clone());
        let row = tape.matmul_nt(p.get(self.layout.rel_w), rel);
        Some(tape.place(row, n, n, 0, 1))
    }

    fn scores_on_tape(&self, tape: &mut Tape, p: &Bound, f: &TickFeatures) -> ScoreVars {
        let l = &self.layout;
        let n = f.x.rows();
        let m = n - 1;
        let x = tape.constant(f.x.clone());
        let h0 = l.input.forward(tape, p, x);
        let h0 = tape.tanh(h0);
        let bias = self.bias_on_tape(tape, p, f);
        let h1 = l.block.attend(tape, p, h0, None, bias, None);
        let h = l.block.feed_forward(tape, p, h1);
        let hq = tape.select_rows(h, vec![0]);
        let tau = l.tau.forward(tape, p, hq);
        let scores = if m > 0 {
            let hc = tape.select_rows(h, (1..n).collect());
            let u = tape.matmul(hq, p.get(l.bilinear));
            let bil = tape.matmul_nt(u, hc);
            let lin = tape.matmul_nt(p.get(l.score_w), hc);
            let s = tape.add(bil, lin);
            let ones = tape.constant(Tensor2::filled(1, m, 1.0));
            let b = tape.mul_scalar_var(ones, p.get(l.score_b));
            tape.add(s, b)
        } else {
            tape.constant(Tensor2::zeros(1, 0))
        };
        ScoreVars { scores, tau }
    }

    fn logits_on_tape(&self, tape: &mut Tape, sv: &ScoreVars) -> Var {
        let m = tape.value(sv.scores).cols();
        let ones = tape.constant(Tensor2::filled(1, m, 1.0));
        let t = tape.mul_scalar_var(ones, sv.tau);
        let d = tape.sub(sv.scores, t);
        tape.scale(d, 1.0 / self.cfg.temperature)
    }

    pub fn score_features(&self, f: &TickFeatures) -> Result<(Vec<f64>, f64)> {
        if f.x.cols() != self.cfg.n_features() {
            return Err(Error::shape(format!(
                "{} node features, selector expects {}",
                f.x.cols(),
                self.cfg.n_features()
            )));
        }
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let sv = self.scores_on_tape(&mut tape, &p, f);
        let scores = tape.value(sv.scores).data().to_vec();
        let tau = tape.scalar(sv.tau);
        if !tau.is_finite() || scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite selector output".into()));
        }
        Ok((scores, tau))
    }

    /// Candidate scores and the query threshold.
    pub fn score_candidates(&self, q: &SecondNode, cands: &[&SentenceNode], t: u64) -> Result<(Vec<f64>, f64)> {
        let f = featurize(q, cands, t, self.cfg.emb_dim)?;
        self.score_features(&f)
    }

    pub fn select(&self, q: &SecondNode, cands: &[&SentenceNode], t: u64) -> Result<SelectionResult> {
        let f = featurize(q, cands, t, self.cfg.emb_dim)?;
        let (scores, tau) = self.score_features(&f)?;
        let anchors = select_anchors(&scores, tau, &f.starts)
            .into_iter()
            .map(|j| f.ids[j])
            .collect();
        Ok(SelectionResult {
            t,
            mask: vec![true; scores.len()],
            candidate_ids: f.ids,
            scores,
            tau,
            anchors,
        })
    }

    fn weights(&self, alpha: f64) -> LossWeights {
        LossWeights {
            alpha,
            lambda_count: self.cfg.lambda_count,
            lambda_rank: self.cfg.lambda_rank,
        }
    }

    /// Summed selector loss over samples, for gradient checks.
    pub fn loss_fn<'a>(&'a self, samples: &'a [SelectorSample], alpha: f64) -> impl Fn(&mut Tape, &Bound) -> Var + 'a {
        let w = self.weights(alpha);
        move |tape: &mut Tape, p: &Bound| {
            let mut acc: Option<Var> = None;
            for s in samples {
                let sv = self.scores_on_tape(tape, p, &s.features);
                let lg = self.logits_on_tape(tape, &sv);
                let mask = vec![true; s.y.len()];
                let v = loss_on_tape(tape, lg, &s.y, &mask, &w).total;
                acc = Some(match acc {
                    Some(a) => tape.add(a, v),
                    None => v,
                });
            }
            acc.expect("at least one sample")
        }
    }

    /// One optimizer step on the batch-mean loss. Returns summed parts.
    pub fn train_step(&mut self, batch: &[&SelectorSample], alpha: f64, opt: &mut AdamW) -> Result<LossParts> {
        let w = self.weights(alpha);
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let mut parts = LossParts::default();
        let mut acc: Option<Var> = None;
        for s in batch {
            if s.y.is_empty() {
                continue;
            }
            let sv = self.scores_on_tape(&mut tape, &p, &s.features);
            let lg = self.logits_on_tape(&mut tape, &sv);
            let mask = vec![true; s.y.len()];
            let v = loss_on_tape(&mut tape, lg, &s.y, &mask, &w);
            parts.total += tape.scalar(v.total);
            parts.wbce += tape.scalar(v.wbce);
            parts.count += tape.scalar(v.count);
            parts.rank += v.rank.map_or(0.0, |r| tape.scalar(r));
            acc = Some(match acc {
                Some(a) => tape.add(a, v.total),
                None => v.total,
            });
        }
        let Some(total) = acc else { return Ok(parts) };
        if !parts.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite selector loss {}", parts.total)));
        }
        let mean = tape.scale(total, 1.0 / batch.len() as f64);
        let grads = tape.backward(mean);
        opt.step(&mut self.params, grads)?;
        Ok(parts)
    }

    /// Trains on non-empty samples; returns the positive weight used and
    /// the per-epoch mean total loss.
    pub fn train(&mut self, samples: &[SelectorSample], tc: &TrainConfig, seed: u64) -> Result<SelectorTrainReport> {
        tc.validate()?;
        let usable: Vec<&SelectorSample> = samples.iter().filter(|s| !s.y.is_empty()).collect();
        if usable.is_empty() {
            return Err(Error::data("no selector samples with candidates"));
        }
        let alpha = positive_weight(samples)?;
        let steps = usable.len().div_ceil(tc.batch_size) * tc.epochs;
        let mut opt = AdamW::new(tc.optim.clone(), &self.params, steps);
        let mut rng = stream_rng(seed, STREAM_SELECTOR_TRAIN);
        let mut order = usable;
        let mut report = SelectorTrainReport {
            alpha,
            epoch_losses: Vec::new(),
        };
        for epoch in 0..tc.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(tc.batch_size) {
                total += self.train_step(chunk, alpha, &mut opt)?.total;
            }
            let mean = total / order.len() as f64;
            log::info!("selector epoch {}: mean loss {mean:.5}", epoch + 1);
            report.epoch_losses.push(mean);
        }
        Ok(report)
    }

    pub fn evaluate(&self, samples: &[SelectorSample]) -> Result<SelectionEval> {
        let mut ev = SelectionEval::default();
        let mut ticks = 0usize;
        for s in samples.iter().filter(|s| !s.y.is_empty()) {
            let (scores, tau) = self.score_features(&s.features)?;
            let logits = threshold_align(&scores, tau, self.cfg.temperature)?;
            for (j, &l) in logits.iter().enumerate() {
                let pred = l > 0.0;
                let gold = s.y[j] > 0.5;
                match (pred, gold) {
                    (true, true) => ev.tp += 1,
                    (true, false) => ev.fp += 1,
                    (false, true) => ev.fn_ += 1,
                    _ => {}
                }
                ev.mean_soft_count += crate::numeric::ops::sigmoid_scalar(l);
            }
            ev.mean_true_count += s.y.iter().sum::<f64>();
            ticks += 1;
        }
        if ticks > 0 {
            ev.mean_soft_count /= ticks as f64;
            ev.mean_true_count /= ticks as f64;
        }
        ev.ticks = ticks;
        Ok(ev)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectorTrainReport {
    pub alpha: f64,
    pub epoch_losses: Vec<f64>,
}

/// Micro-averaged anchor decisions over `(tick, candidate)` pairs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SelectionEval {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ticks: usize,
    pub mean_soft_count: f64,
    pub mean_true_count: f64,
}

impl SelectionEval {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// `N_neg / N_pos` over all candidate slots of the samples.
pub fn positive_weight(samples: &[SelectorSample]) -> Result<f64> {
    let pos: f64 = samples.iter().flat_map(|s| &s.y).sum();
    let all: usize = samples.iter().map(|s| s.y.len()).sum();
    if pos == 0.0 {
        return Err(Error::data("training split has no positive anchors"));
    }
    Ok((all as f64 - pos) / pos)
}

/// Replays dialogues through a graph with gold labels on the nodes and
/// collects one sample per tick. Gold anchor ids index the replayed graph.
pub fn collect_samples(dialogues: &[Vec<SecondRecord>], window: u64, emb_dim: usize) -> Result<Vec<SelectorSample>> {
    let mut out = Vec::new();
    for recs in dialogues {
        let mut g = GotGraph::new(window)?;
        for r in recs {
            let gold = r.gold.as_ref().ok_or_else(|| {
                Error::data(format!("{}@{} has no gold annotation", r.audio_id, r.t))
            })?;
            let labels = SpeechActPair::certain(gold.high, gold.low);
            let key = g.begin_tick(r, &labels)?;
            let (q, cands) = g.candidate_view(r.t)?;
            let features = featurize(q, &cands, r.t, emb_dim)?;
            let y = features
                .ids
                .iter()
                .map(|id| if gold.anchors.contains(id) { 1.0 } else { 0.0 })
                .collect();
            out.push(SelectorSample {
                t: r.t,
                features,
                y,
            });
            g.end_tick(r, key);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use crate::stream::{HighAct, LowAct};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn w(alpha: f64) -> LossWeights {
        LossWeights {
            alpha,
            lambda_count: 0.01,
            lambda_rank: 0.1,
        }
    }

    fn small_cfg() -> SelectorConfig {
        SelectorConfig {
            emb_dim: 3,
            hidden: 5,
            ff_hidden: 4,
            ..Default::default()
        }
    }

    fn query(rng: &mut impl Rng) -> SecondNode {
        SecondNode {
            tick: 50,
            channel: 0,
            speaker: 0,
            text: "q".into(),
            block: 50,
            primary: true,
            labels: SpeechActPair::certain(HighAct::ALL[rng.random_range(0..4)], LowAct::ALL[rng.random_range(0..4)]),
            emb: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn sentence(id: u64, rng: &mut impl Rng) -> SentenceNode {
        let start = rng.random_range(0..40);
        let mut h = [0.0; 4];
        h[rng.random_range(0..4)] = 1.0;
        SentenceNode {
            id,
            start,
            end: start + rng.random_range(1..8),
            channel: rng.random_range(0..2),
            speaker: rng.random_range(0..2),
            text: String::new(),
            n_seconds: 1,
            high_mean: h,
            low_mean: [0.25; 4],
            emb_mean: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn threshold_align_examples() {
        assert_eq!(threshold_align(&[0.7], 0.7, 1.0).unwrap(), vec![0.0]);
        assert!(threshold_align(&[0.0], 0.0, 0.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s: f64 = rng.random_range(-5.0..5.0);
            let tau: f64 = rng.random_range(-5.0..5.0);
            let t: f64 = rng.random_range(0.1..3.0);
            assert_eq!(threshold_align(&[s], tau, t).unwrap()[0], (s - tau) / t);
        }
    }

    #[test]
    fn select_anchors_examples() {
        assert_eq!(select_anchors(&[0.9, 0.2, 0.7], 0.5, &[1, 2, 3]), vec![0, 2]);
        assert!(select_anchors(&[0.1, 0.2], 0.5, &[1, 2]).is_empty());
        assert_eq!(select_anchors(&[0.9, 0.8], 0.5, &[9, 3]), vec![1, 0]);
    }

    #[test]
    fn select_anchors_matches_filter_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.random_range(0..20);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let st: Vec<u64> = (0..n).map(|_| rng.random_range(0..10)).collect();
            let tau = rng.random_range(-1.0..1.0);
            let mut oracle: Vec<(u64, usize)> = (0..n).filter(|&j| s[j] > tau).map(|j| (st[j], j)).collect();
            oracle.sort();
            let want: Vec<usize> = oracle.into_iter().map(|(_, j)| j).collect();
            assert_eq!(select_anchors(&s, tau, &st), want);
        }
    }

    #[test]
    fn loss_examples() {
        let y = [1.0, 0.0, 1.0];
        let m = [true; 3];
        let p = selector_loss(&[40.0, -40.0, 40.0], &y, &m, &w(2.0)).unwrap();
        assert!(p.wbce < 1e-15 && p.count < 1e-15);
        let p = selector_loss(&[0.0; 5], &[0.0, 1.0, 0.0, 0.0, 0.0], &[true; 5], &w(1.0)).unwrap();
        assert!((p.rank - 5f64.ln()).abs() < 1e-12);
        let p = selector_loss(&[0.0, 0.0, 9.0], &[0.0, 1.0, 0.0], &[true, true, false], &w(1.0)).unwrap();
        assert!((p.rank - 2f64.ln()).abs() < 1e-12);
        let p = selector_loss(&[0.3, -0.2], &[0.0, 0.0], &[true; 2], &w(1.0)).unwrap();
        assert_eq!(p.rank, 0.0);
        assert!(selector_loss(&[0.0], &[1.0], &[false], &w(1.0)).is_err());
    }

    #[test]
    fn loss_terms_combine_with_weights() {
        let l = [0.4, -1.2, 2.0, 0.1];
        let y = [1.0, 0.0, 1.0, 0.0];
        let m = [true, true, true, false];
        let zero = LossWeights {
            alpha: 1.5,
            lambda_count: 0.0,
            lambda_rank: 0.0,
        };
        let p = selector_loss(&l, &y, &m, &zero).unwrap();
        assert_eq!(p.total, p.wbce);
        // closed-form oracle
        let sp = |x: f64| (1.0 + x.exp()).ln();
        let wbce = (1.5 * sp(-0.4) + sp(-1.2) + 1.5 * sp(-2.0)) / 3.0;
        assert!((p.wbce - wbce).abs() < 1e-14);
        let sg = |x: f64| 1.0 / (1.0 + (-x).exp());
        let count = (sg(0.4) + sg(-1.2) + sg(2.0) - 2.0).powi(2);
        assert!((p.count - count).abs() < 1e-14);
        let lse = (0.4f64.exp() + (-1.2f64).exp() + 2.0f64.exp()).ln();
        let rank = ((lse - 0.4) + (lse - 2.0)) / 2.0;
        assert!((p.rank - rank).abs() < 1e-14);
    }

    #[test]
    fn loss_gradient_wrt_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(1..8);
            let y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
            mask[0] = true;
            let mut store = ParamStore::new();
            store.insert("logits", Tensor2::from_vec(1, n, (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap());
            let r = grad_check(&store, selector_loss_fn(y, mask, w(2.5)), None, &mut rng);
            assert!(r.max_rel_err <= 1e-3, "{r:?}");
        }
    }

    #[test]
    fn empty_view_has_threshold_and_no_anchors() {
        let s = Selector::new(small_cfg(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = query(&mut rng);
        let r = s.select(&q, &[], 50).unwrap();
        assert!(r.scores.is_empty() && r.anchors.is_empty());
        assert!(r.tau.is_finite());
    }

    #[test]
    fn identical_candidates_score_identically() {
        let s = Selector::new(small_cfg(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = query(&mut rng);
        let a = sentence(0, &mut rng);
        let mut b = a.clone();
        b.id = 1;
        let (scores, _) = s.score_candidates(&q, &[&a, &b], 50).unwrap();
        assert_eq!(scores[0], scores[1]);
    }

    #[test]
    fn permutation_equivariance() {
        let mut s = Selector::new(small_cfg(), 3).unwrap();
        s.params_mut().get_mut("rel.w").unwrap().data_mut().copy_from_slice(&[0.7, -0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..30 {
            let q = query(&mut rng);
            let n = rng.random_range(1..8);
            let cands: Vec<SentenceNode> = (0..n).map(|i| sentence(i, &mut rng)).collect();
            let refs: Vec<&SentenceNode> = cands.iter().collect();
            let (s0, t0) = s.score_candidates(&q, &refs, 50).unwrap();
            let mut perm: Vec<usize> = (0..n as usize).collect();
            perm.shuffle(&mut rng);
            let prefs: Vec<&SentenceNode> = perm.iter().map(|&i| &cands[i]).collect();
            let (s1, t1) = s.score_candidates(&q, &prefs, 50).unwrap();
            assert!((t0 - t1).abs() < 1e-12);
            for (k, &i) in perm.iter().enumerate() {
                assert!((s1[k] - s0[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relational_bias_touches_only_query_row() {
        let mut s = Selector::new(small_cfg(), 4).unwrap();
        s.params_mut().get_mut("rel.w").unwrap().data_mut().copy_from_slice(&[0.9, 1.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = query(&mut rng);
        let cands: Vec<SentenceNode> = (0..4).map(|i| sentence(i, &mut rng)).collect();
        let refs: Vec<&SentenceNode> = cands.iter().collect();
        let f = featurize(&q, &refs, 50, 3).unwrap();
        let mut tape = Tape::new();
        let p = tape.bind(s.params());
        let b = s.bias_on_tape(&mut tape, &p, &f).unwrap();
        let bias = tape.value(b);
        for i in 0..5 {
            for j in 0..5 {
                if i == 0 && j > 0 {
                    assert!(bias.get(i, j) > 0.0);
                } else {
                    assert_eq!(bias.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn selector_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = Selector::new(small_cfg(), 9).unwrap();
        s.params_mut().get_mut("rel.w").unwrap().data_mut().copy_from_slice(&[0.3, 0.5]);
        s.params_mut().get_mut("score.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.2);
        let samples: Vec<SelectorSample> = (0..3)
            .map(|k| {
                let q = query(&mut rng);
                let cands: Vec<SentenceNode> = (0..k + 2).map(|i| sentence(i as u64, &mut rng)).collect();
                let refs: Vec<&SentenceNode> = cands.iter().collect();
                let f = featurize(&q, &refs, 50, 3).unwrap();
                let y = (0..k + 2).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
                SelectorSample { t: 50, features: f, y }
            })
            .collect();
        let r = grad_check(s.params(), s.loss_fn(&samples, 1.7), None, &mut rng);
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
    }

    #[test]
    fn positive_weight_is_neg_over_pos() {
        let f = TickFeatures {
            x: Tensor2::zeros(1, 1),
            rel: Tensor2::zeros(0, 2),
            ids: vec![],
            starts: vec![],
        };
        let mk = |y: Vec<f64>| SelectorSample { t: 0, features: f.clone(), y };
        let s = vec![mk(vec![1.0, 0.0, 0.0]), mk(vec![0.0, 1.0, 0.0, 0.0, 0.0]), mk(vec![])];
        assert_eq!(positive_weight(&s).unwrap(), 3.0);
        assert!(positive_weight(&[mk(vec![0.0])]).is_err());
    }
}
