//! Hierarchical per-second speech-act predictor.
//!
//! Acoustic and semantic embeddings are fused by an elementwise gate and
//! projected to a shared latent. Two causal attention decoders read the last
//! `context` latents; the high-level state modulates the low-level state
//! (FiLM) before the two classification heads.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::layers::{cross_entropy_sum, AttnBlock, Dense};
use crate::numeric::ops::softmax_rowwise;
use crate::numeric::{AdamW, Bound, Mask, ParamStore, Tape, Tensor2, TrainConfig, Var};
use crate::rng::{stream_rng, STREAM_PERCEIVER_INIT, STREAM_PERCEIVER_TRAIN};
use crate::stream::{SecondRecord, SpeechActPair};

pub const CHECKPOINT_FORMAT: &str = "turnsight.perceiver/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceiverConfig {
    /// Width of both input embeddings.
    pub emb_dim: usize,
    pub hidden: usize,
    pub ff_hidden: usize,
    /// Number of past seconds (current included) each decoder attends over.
    pub context: usize,
    pub depth: usize,
    /// Slope of the temporal attention penalty `-beta * (i - j)`.
    pub beta: f64,
    pub learn_beta: bool,
}

impl Default for PerceiverConfig {
    fn default() -> Self {
        Self {
            emb_dim: 16,
            hidden: 32,
            ff_hidden: 32,
            context: 10,
            depth: 1,
            beta: 0.1,
            learn_beta: false,
        }
    }
}

impl PerceiverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 || self.hidden == 0 || self.ff_hidden == 0 || self.depth == 0 {
            return Err(Error::Config("perceiver widths and depth must be positive".into()));
        }
        if self.context == 0 {
            return Err(Error::Config("perceiver context must be >= 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layout {
    gate_b: usize,
    gate_e: usize,
    gate_bias: usize,
    proj: Dense,
    dec_h: Vec<AttnBlock>,
    dec_l: Vec<AttnBlock>,
    beta_h: Option<usize>,
    beta_l: Option<usize>,
    film: Dense,
    head_h: Dense,
    head_l: Dense,
}

#[derive(Clone, Debug)]
pub struct Perceiver {
    cfg: PerceiverConfig,
    params: ParamStore,
    layout: Layout,
}

/// Per-dialogue ring buffer of fused latents.
#[derive(Clone, Debug, Default)]
pub struct PerceiverState {
    latents: VecDeque<Vec<f64>>,
    last_tick: Option<u64>,
}

impl PerceiverState {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn last_tick(&self) -> Option<u64> {
        self.last_tick
    }
}

/// Stacked context windows, one block per sample, with a block-diagonal
/// causal mask.
struct WindowBatch {
    hb: Tensor2,
    he: Tensor2,
    /// `i - j` for visible pairs, 0 elsewhere.
    dist: Tensor2,
    mask: Mask,
    last_rows: Vec<usize>,
}

impl WindowBatch {
    fn new(hb: Tensor2, he: Tensor2, lens: &[usize]) -> Self {
        let n: usize = lens.iter().sum();
        let mut dist = Tensor2::zeros(n, n);
        let mut mask = vec![true; n * n];
        let mut last_rows = Vec::with_capacity(lens.len());
        let mut off = 0;
        for &len in lens {
            for i in 0..len {
                for j in 0..=i {
                    dist.set(off + i, off + j, (i - j) as f64);
                    mask[(off + i) * n + off + j] = false;
                }
            }
            off += len;
            last_rows.push(off - 1);
        }
        Self {
            hb,
            he,
            dist,
            mask: mask.into(),
            last_rows,
        }
    }
}

struct Forward {
    logits_h: Var,
    logits_l: Var,
}

fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().max(1e-300).ln()
    }
}

impl Perceiver {
    pub fn new(cfg: PerceiverConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, STREAM_PERCEIVER_INIT);
        let mut p = ParamStore::new();
        let (d, h) = (cfg.emb_dim, cfg.hidden);
        let gate_b = p.insert_random("gate.w_b", d, d, &mut rng);
        let gate_e = p.insert_random("gate.w_e", d, d, &mut rng);
        let gate_bias = p.insert("gate.b", Tensor2::zeros(1, d));
        let proj = Dense::register(&mut p, "proj", d, h, &mut rng);
        let dec_h = (0..cfg.depth)
            .map(|l| AttnBlock::register(&mut p, &format!("dec_h.{l}"), h, cfg.ff_hidden, &mut rng))
            .collect();
        let dec_l = (0..cfg.depth)
            .map(|l| AttnBlock::register(&mut p, &format!("dec_l.{l}"), h, cfg.ff_hidden, &mut rng))
            .collect();
        let (beta_h, beta_l) = if cfg.learn_beta {
            let raw = Tensor2::scalar(softplus_inverse(cfg.beta));
            (
                Some(p.insert("dec_h.beta", raw.clone())),
                Some(p.insert("dec_l.beta", raw)),
            )
        } else {
            (None, None)
        };
        let mut film_bias = vec![1.0; h];
        film_bias.extend(std::iter::repeat_n(0.0, h));
        let film = Dense::register_const(&mut p, "film", h, &film_bias);
        let head_h = Dense::register(&mut p, "head_h", h, 4, &mut rng);
        let head_l = Dense::register(&mut p, "head_l", h, 4, &mut rng);
        Ok(Self {
            cfg,
            params: p,
            layout: Layout {
                gate_b,
                gate_e,
                gate_bias,
                proj,
                dec_h,
                dec_l,
                beta_h,
                beta_l,
                film,
                head_h,
                head_l,
            },
        })
    }

    pub fn config(&self) -> &PerceiverConfig {
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

    fn check_dims(&self, hb: &[f64], he: &[f64]) -> Result<()> {
        if hb.len() != self.cfg.emb_dim || he.len() != self.cfg.emb_dim {
            return Err(Error::shape(format!(
                "embeddings of width {} and {}, model expects {}",
                hb.len(),
                he.len(),
                self.cfg.emb_dim
            )));
        }
        Ok(())
    }

    /// Returns `(gate, fused, latent)`.
    fn fuse_on_tape(&self, tape: &mut Tape, p: &Bound, hb: Var, he: Var) -> (Var, Var, Var) {
        let l = &self.layout;
        let a = tape.matmul(hb, p.get(l.gate_b));
        let b = tape.matmul(he, p.get(l.gate_e));
        let s = tape.add(a, b);
        let s = tape.add_row(s, p.get(l.gate_bias));
        let lambda = tape.sigmoid(s);
        let neg = tape.scale(lambda, -1.0);
        let keep = tape.add_scalar(neg, 1.0);
        let from_b = tape.mul(keep, hb);
        let from_e = tape.mul(lambda, he);
        let e = tape.add(from_b, from_e);
        let z = l.proj.forward(tape, p, e);
        let z = tape.tanh(z);
        (lambda, e, z)
    }

    fn decoder(
        &self,
        tape: &mut Tape,
        p: &Bound,
        blocks: &[AttnBlock],
        beta: Option<usize>,
        z: Var,
        dist: &Tensor2,
        mask: &Mask,
    ) -> Var {
        let bias = match beta {
            Some(idx) => {
                let b = tape.softplus(p.get(idx));
                let d = tape.constant(dist.map(|v| -v));
                tape.mul_scalar_var(d, b)
            }
            None => {
                let beta = self.cfg.beta;
                tape.constant(dist.map(|v| -beta * v))
            }
        };
        let mut x = z;
        for blk in blocks {
            x = blk.forward(tape, p, x, Some(bias), Some(mask.clone()));
        }
        x
    }

    /// Returns `(z_high, z_low)` at the rows in `last_rows`.
    fn decode_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        dist: &Tensor2,
        mask: &Mask,
        last_rows: &[usize],
    ) -> (Var, Var) {
        let l = &self.layout;
        let xh = self.decoder(tape, p, &l.dec_h, l.beta_h, z, dist, mask);
        let xl = self.decoder(tape, p, &l.dec_l, l.beta_l, z, dist, mask);
        let zh = tape.select_rows(xh, last_rows.to_vec());
        let zl = tape.select_rows(xl, last_rows.to_vec());
        (zh, zl)
    }

    fn film_on_tape(&self, tape: &mut Tape, p: &Bound, zh: Var, zl: Var) -> Var {
        let h = self.cfg.hidden;
        let gb = self.layout.film.forward(tape, p, zh);
        let gamma = tape.slice_cols(gb, 0, h);
        let eta = tape.slice_cols(gb, h, 2 * h);
        let m = tape.mul(gamma, zl);
        tape.add(m, eta)
    }

    fn heads_on_tape(&self, tape: &mut Tape, p: &Bound, zh: Var, zl: Var) -> Forward {
        let m = self.film_on_tape(tape, p, zh, zl);
        Forward {
            logits_h: self.layout.head_h.forward(tape, p, zh),
            logits_l: self.layout.head_l.forward(tape, p, m),
        }
    }

    fn forward_batch(&self, tape: &mut Tape, p: &Bound, batch: &WindowBatch) -> Forward {
        let hb = tape.constant(batch.hb.clone());
        let he = tape.constant(batch.he.clone());
        let (_, _, z) = self.fuse_on_tape(tape, p, hb, he);
        let (zh, zl) = self.decode_on_tape(tape, p, z, &batch.dist, &batch.mask, &batch.last_rows);
        self.heads_on_tape(tape, p, zh, zl)
    }

    /// Gate and fused vector for one second.
    pub fn gated_fuse(&self, hb: &[f64], he: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dims(hb, he)?;
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let hbv = tape.constant(Tensor2::row_vector(hb));
        let hev = tape.constant(Tensor2::row_vector(he));
        let (lambda, e, _) = self.fuse_on_tape(&mut tape, &p, hbv, hev);
        Ok((tape.value(lambda).data().to_vec(), tape.value(e).data().to_vec()))
    }

    /// Decoder states at the newest buffered second.
    pub fn decode_states(&self, state: &PerceiverState) -> Result<(Vec<f64>, Vec<f64>)> {
        if state.is_empty() {
            return Err(Error::invalid("decode_states on an empty buffer"));
        }
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let (zh, zl) = self.decode_buffer(&mut tape, &p, state);
        Ok((tape.value(zh).data().to_vec(), tape.value(zl).data().to_vec()))
    }

    fn decode_buffer(&self, tape: &mut Tape, p: &Bound, state: &PerceiverState) -> (Var, Var) {
        let n = state.len();
        let rows: Vec<Vec<f64>> = state.latents.iter().cloned().collect();
        let z = tape.constant(Tensor2::from_rows(&rows).expect("latent rows"));
        let shape = WindowBatch::new(Tensor2::zeros(0, 0), Tensor2::zeros(0, 0), &[n]);
        self.decode_on_tape(tape, p, z, &shape.dist, &shape.mask, &shape.last_rows)
    }

    /// `gamma * z_low + eta` with `(gamma, eta)` predicted from `z_high`.
    pub fn film_modulate(&self, zh: &[f64], zl: &[f64]) -> Result<Vec<f64>> {
        let h = self.cfg.hidden;
        if zh.len() != h || zl.len() != h {
            return Err(Error::shape(format!("FiLM expects width {h}")));
        }
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let a = tape.constant(Tensor2::row_vector(zh));
        let b = tape.constant(Tensor2::row_vector(zl));
        let m = self.film_on_tape(&mut tape, &p, a, b);
        Ok(tape.value(m).data().to_vec())
    }

    /// Consumes one second and predicts its speech acts.
    pub fn predict_step(&self, record: &SecondRecord, state: &mut PerceiverState) -> Result<SpeechActPair> {
        self.check_dims(&record.emb_acoustic, &record.emb_semantic)?;
        if let Some(prev) = state.last_tick {
            if record.t <= prev {
                return Err(Error::data(format!(
                    "perceiver received tick {} after {}",
                    record.t, prev
                )));
            }
        }
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let hb = tape.constant(Tensor2::row_vector(&record.emb_acoustic));
        let he = tape.constant(Tensor2::row_vector(&record.emb_semantic));
        let (_, _, z) = self.fuse_on_tape(&mut tape, &p, hb, he);
        state.latents.push_back(tape.value(z).data().to_vec());
        while state.latents.len() > self.cfg.context {
            state.latents.pop_front();
        }
        state.last_tick = Some(record.t);
        let (zh, zl) = self.decode_buffer(&mut tape, &p, state);
        let f = self.heads_on_tape(&mut tape, &p, zh, zl);
        let ph = softmax_rowwise(tape.value(f.logits_h))?;
        let pl = softmax_rowwise(tape.value(f.logits_l))?;
        let pair = SpeechActPair::from_probs(to4(ph.data()), to4(pl.data()));
        if !pair.p_high.iter().chain(&pair.p_low).all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite probabilities at tick {}", record.t)));
        }
        Ok(pair)
    }

    /// Runs a fresh state over a whole dialogue.
    pub fn predict_dialogue(&self, records: &[SecondRecord]) -> Result<Vec<SpeechActPair>> {
        let mut state = PerceiverState::default();
        records.iter().map(|r| self.predict_step(r, &mut state)).collect()
    }

    fn build_batch(&self, windows: &[&[SecondRecord]]) -> Result<(WindowBatch, Vec<usize>, Vec<usize>)> {
        let d = self.cfg.emb_dim;
        let mut hb = Vec::new();
        let mut he = Vec::new();
        let mut lens = Vec::with_capacity(windows.len());
        let mut yh = Vec::with_capacity(windows.len());
        let mut yl = Vec::with_capacity(windows.len());
        for w in windows {
            let last = w.last().ok_or_else(|| Error::invalid("empty training window"))?;
            let gold = last.gold.as_ref().ok_or_else(|| {
                Error::data(format!("{}@{} has no gold labels", last.audio_id, last.t))
            })?;
            yh.push(gold.high.index());
            yl.push(gold.low.index());
            let take = w.len().min(self.cfg.context);
            for r in &w[w.len() - take..] {
                self.check_dims(&r.emb_acoustic, &r.emb_semantic)?;
                hb.extend_from_slice(&r.emb_acoustic);
                he.extend_from_slice(&r.emb_semantic);
            }
            lens.push(take);
        }
        let n: usize = lens.iter().sum();
        let batch = WindowBatch::new(
            Tensor2::from_vec(n, d, hb)?,
            Tensor2::from_vec(n, d, he)?,
            &lens,
        );
        Ok((batch, yh, yl))
    }

    fn loss_on_tape(&self, tape: &mut Tape, p: &Bound, batch: &WindowBatch, yh: &[usize], yl: &[usize]) -> Var {
        let f = self.forward_batch(tape, p, batch);
        let a = cross_entropy_sum(tape, f.logits_h, yh);
        let b = cross_entropy_sum(tape, f.logits_l, yl);
        tape.add(a, b)
    }

    /// Summed high + low cross-entropy over the samples. Each window ends at
    /// the supervised second and carries its preceding context.
    pub fn perceiver_loss(&self, windows: &[&[SecondRecord]]) -> Result<f64> {
        let (batch, yh, yl) = self.build_batch(windows)?;
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let loss = self.loss_on_tape(&mut tape, &p, &batch, &yh, &yl);
        Ok(tape.scalar(loss))
    }

    /// Builds the loss for gradient checking against the current parameters.
    pub fn loss_fn<'a>(&'a self, windows: &[&[SecondRecord]]) -> Result<impl Fn(&mut Tape, &Bound) -> Var + 'a> {
        let (batch, yh, yl) = self.build_batch(windows)?;
        Ok(move |tape: &mut Tape, p: &Bound| self.loss_on_tape(tape, p, &batch, &yh, &yl))
    }

    /// One optimizer step on the batch-mean loss. Returns the summed loss.
    pub fn train_step(&mut self, windows: &[&[SecondRecord]], opt: &mut AdamW) -> Result<f64> {
        let (batch, yh, yl) = self.build_batch(windows)?;
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let loss = self.loss_on_tape(&mut tape, &p, &batch, &yh, &yl);
        let mean = tape.scale(loss, 1.0 / windows.len() as f64);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite perceiver loss {value}")));
        }
        let grads = tape.backward(mean);
        opt.step(&mut self.params, grads)?;
        Ok(value)
    }

    /// Shuffled mini-batch training over every second of every dialogue.
    pub fn train(&mut self, dialogues: &[Vec<SecondRecord>], tc: &TrainConfig, seed: u64) -> Result<TrainReport> {
        tc.validate()?;
        let samples: Vec<(usize, usize)> = dialogues
            .iter()
            .enumerate()
            .flat_map(|(d, recs)| (0..recs.len()).map(move |i| (d, i)))
            .collect();
        if samples.is_empty() {
            return Err(Error::data("no training seconds"));
        }
        let steps_per_epoch = samples.len().div_ceil(tc.batch_size);
        let mut opt = AdamW::new(tc.optim.clone(), &self.params, steps_per_epoch * tc.epochs);
        let mut rng = stream_rng(seed, STREAM_PERCEIVER_TRAIN);
        let mut order = samples;
        let mut report = TrainReport::default();
        let k = self.cfg.context;
        for epoch in 0..tc.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(tc.batch_size) {
                let windows: Vec<&[SecondRecord]> = chunk
                    .iter()
                    .map(|&(d, i)| &dialogues[d][(i + 1).saturating_sub(k)..=i])
                    .collect();
                total += self.train_step(&windows, &mut opt)?;
            }
            let mean = total / order.len() as f64;
            log::info!("perceiver epoch {}: mean loss {mean:.5}", epoch + 1);
            report.epoch_losses.push(mean);
        }
        Ok(report)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss for each epoch.
    pub epoch_losses: Vec<f64>,
}

fn to4(v: &[f64]) -> [f64; 4] {
    [v[0], v[1], v[2], v[3]]
}
