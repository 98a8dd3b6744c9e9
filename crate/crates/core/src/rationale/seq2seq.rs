//! Small attention encoder-decoder for the trainable rationale backend.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::numeric::layers::{cross_entropy_sum, Attention, AttnBlock, Dense};
use crate::numeric::{AdamW, Bound, Mask, ParamStore, Tape, TrainConfig, Var};
use crate::rng::{stream_rng, STREAM_DECODER_INIT, STREAM_DECODER_TRAIN};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "turnsight.decoder/v1";
const WEIGHTS_FORMAT: &str = "turnsight.decoder.weights/v1";

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
const GLUE: &str = "##";

/// Splits on whitespace and around every non-alphanumeric character.
///
/// A token written directly after the previous one (no whitespace between)
/// carries a `##` prefix so [`detokenize`] can restore the spacing.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut spaced = true;
    let push = |tok: &str, spaced: &mut bool, out: &mut Vec<String>| {
        if *spaced || out.is_empty() {
            out.push(tok.to_string());
        } else {
            out.push(format!("{GLUE}{tok}"));
        }
        *spaced = false;
    };
    for c in text.chars() {
        if c.is_whitespace() {
            if !word.is_empty() {
                push(&word, &mut spaced, &mut out);
                word.clear();
            }
            spaced = true;
        } else if c.is_alphanumeric() {
            word.push(c);
        } else {
            if !word.is_empty() {
                push(&word, &mut spaced, &mut out);
                word.clear();
            }
            push(&c.to_string(), &mut spaced, &mut out);
        }
    }
    if !word.is_empty() {
        push(&word, &mut spaced, &mut out);
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        match t.strip_prefix(GLUE) {
            Some(rest) if !rest.is_empty() => out.push_str(rest),
            _ => {
                if i > 0 {
                    out.push(' ');
                }
                out.push_str(t);
            }
        }
    }
    out
}

/// Closed token inventory. Ids 0..3 are `<bos>`, `<eos>`, `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const BOS: usize = 0;
    pub const EOS: usize = 1;
    pub const UNK: usize = 2;

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != BOS || tokens[1] != EOS || tokens[2] != UNK {
            return Err(Error::data("vocabulary must start with <bos>, <eos>, <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Every token of `texts`, sorted, after the three specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(tokenize(t));
        }
        let mut tokens: Vec<String> = [BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(set.into_iter().filter(|t| t != BOS && t != EOS && t != UNK));
        Self::from_tokens(tokens).expect("specials are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub ff_hidden: usize,
    /// Source tokens kept (the most recent ones).
    pub max_src: usize,
    /// Longest target, including the end marker.
    pub max_tgt: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            ff_hidden: 64,
            max_src: 128,
            max_tgt: 96,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.ff_hidden == 0 || self.max_src == 0 || self.max_tgt == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// One training pair after tokenization. `target` ends with `<eos>`.
#[derive(Clone, Debug)]
pub struct EncodedPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    cfg: DecoderConfig,
    vocab: Vocab,
    params: ParamStore,
    emb: usize,
    pos_src: usize,
    pos_tgt: usize,
    enc: AttnBlock,
    dec_self: Attention,
    dec_cross: AttnBlock,
    out: Dense,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecoderCheckpoint {
    format: String,
    config: DecoderConfig,
    vocab: Vec<String>,
    weights: serde_json::Value,
}

fn causal_mask(m: usize) -> Mask {
    (0..m * m).map(|k| k % m > k / m).collect::<Vec<_>>().into()
}

impl Seq2Seq {
    pub fn new(cfg: DecoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, STREAM_DECODER_INIT);
        let d = cfg.d_model;
        let mut params = ParamStore::new();
        let emb = params.insert_random("emb", vocab.len(), d, &mut rng);
        let pos_src = params.insert_random("pos_src", cfg.max_src, d, &mut rng);
        let pos_tgt = params.insert_random("pos_tgt", cfg.max_tgt, d, &mut rng);
        let enc = AttnBlock::register(&mut params, "enc", d, cfg.ff_hidden, &mut rng);
        let dec_self = Attention::register(&mut params, "dec_self", d, &mut rng);
        let dec_cross = AttnBlock::register(&mut params, "dec_cross", d, cfg.ff_hidden, &mut rng);
        let out = Dense::register(&mut params, "out", d, vocab.len(), &mut rng);
        Ok(Self {
            cfg,
            vocab,
            params,
            emb,
            pos_src,
            pos_tgt,
            enc,
            dec_self,
            dec_cross,
            out,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = DecoderCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.cfg.clone(),
            vocab: self.vocab.tokens.clone(),
            weights: serde_json::from_str(&self.params.to_json(WEIGHTS_FORMAT)?)?,
        };
        let body = serde_json::to_string(&ckpt)?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds the model from a checkpoint, vocabulary included.
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: DecoderCheckpoint = serde_json::from_str(&body)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::data(format!("unexpected checkpoint format {:?}", ckpt.format)));
        }
        let mut model = Self::new(ckpt.config, Vocab::from_tokens(ckpt.vocab)?, 0)?;
        model.params.load_json(&ckpt.weights.to_string(), WEIGHTS_FORMAT)?;
        Ok(model)
    }

    /// Source ids, unknown tokens mapped to `<unk>`, keeping the last
    /// `max_src` tokens.
    pub fn encode_source(&self, chain: &str) -> Vec<usize> {
        let toks = tokenize(chain);
        let skip = toks.len().saturating_sub(self.cfg.max_src);
        let mut ids: Vec<usize> = toks[skip..]
            .iter()
            .map(|t| self.vocab.id(t).unwrap_or(Vocab::UNK))
            .collect();
        if ids.is_empty() {
            ids.push(Vocab::EOS);
        }
        ids
    }

    /// Target ids with the end marker appended. Unknown tokens are an error.
    pub fn encode_target(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for t in tokenize(text) {
            ids.push(
                self.vocab
                    .id(&t)
                    .ok_or_else(|| Error::invalid(format!("target token {t:?} is not in the vocabulary")))?,
            );
        }
        ids.push(Vocab::EOS);
        self.check_target(&ids)?;
        Ok(ids)
    }

    fn check_target(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::invalid("empty target"));
        }
        if ids.len() > self.cfg.max_tgt {
            return Err(Error::invalid(format!(
                "target of {} tokens exceeds the limit of {}",
                ids.len(),
                self.cfg.max_tgt
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab.len()) {
            return Err(Error::invalid(format!("token id {bad} is outside the vocabulary")));
        }
        Ok(())
    }

    pub fn encode_pair(&self, chain: &str, rationale: &str) -> Result<EncodedPair> {
        Ok(EncodedPair {
            source: self.encode_source(chain),
            target: self.encode_target(rationale)?,
        })
    }

    fn embed(&self, tape: &mut Tape, p: &Bound, ids: &[usize], pos: usize) -> Var {
        let e = tape.select_rows(p.get(self.emb), ids.to_vec());
        let q = tape.select_rows(p.get(pos), (0..ids.len()).collect());
        tape.add(e, q)
    }

    fn encode_on_tape(&self, tape: &mut Tape, p: &Bound, src: &[usize]) -> Var {
        let x = self.embed(tape, p, src, self.pos_src);
        self.enc.forward(tape, p, x, None, None)
    }

    /// Logits for every decoder position given the prefix `inputs`.
    fn decode_on_tape(&self, tape: &mut Tape, p: &Bound, memory: Var, inputs: &[usize]) -> Var {
        let h = self.embed(tape, p, inputs, self.pos_tgt);
        let h = self.dec_self.forward(tape, p, h, None, None, Some(causal_mask(inputs.len())));
        let h = self.dec_cross.attend(tape, p, h, Some(memory), None, None);
        let h = self.dec_cross.feed_forward(tape, p, h);
        self.out.forward(tape, p, h)
    }

    /// Teacher-forced NLL of `target` (which should end with `<eos>`).
    fn nll_on_tape(&self, tape: &mut Tape, p: &Bound, pair: &EncodedPair) -> Var {
        let memory = self.encode_on_tape(tape, p, &pair.source);
        let mut inputs = Vec::with_capacity(pair.target.len());
        inputs.push(Vocab::BOS);
        inputs.extend_from_slice(&pair.target[..pair.target.len() - 1]);
        let logits = self.decode_on_tape(tape, p, memory, &inputs);
        cross_entropy_sum(tape, logits, &pair.target)
    }

    /// `-sum_n log p(y_n | y_<n, chain)` over the given target ids.
    pub fn nll_ids(&self, source: &[usize], target: &[usize]) -> Result<f64> {
        self.check_target(target)?;
        let pair = EncodedPair {
            source: source.to_vec(),
            target: target.to_vec(),
        };
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let v = self.nll_on_tape(&mut tape, &p, &pair);
        Ok(tape.scalar(v))
    }

    /// NLL of the rationale text (plus its end marker) given the chain.
    pub fn decoder_nll(&self, chain: &str, rationale: &str) -> Result<f64> {
        let pair = self.encode_pair(chain, rationale)?;
        self.nll_ids(&pair.source, &pair.target)
    }

    /// Summed NLL over `pairs`, for gradient checks.
    pub fn loss_fn<'a>(&'a self, pairs: &'a [EncodedPair]) -> impl Fn(&mut Tape, &Bound) -> Var + 'a {
        move |tape: &mut Tape, p: &Bound| {
            let parts: Vec<Var> = pairs.iter().map(|pr| self.nll_on_tape(tape, p, pr)).collect();
            let all = tape.concat_cols(parts);
            tape.sum(all)
        }
    }

    /// Greedy decoding until `<eos>` or the length limit. `<bos>` is never
    /// emitted.
    pub fn generate_ids(&self, source: &[usize]) -> Vec<usize> {
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let memory = self.encode_on_tape(&mut tape, &p, source);
        let mut inputs = vec![Vocab::BOS];
        let mut out = Vec::new();
        while out.len() < self.cfg.max_tgt {
            let logits = self.decode_on_tape(&mut tape, &p, memory, &inputs);
            let row = tape.value(logits).row(inputs.len() - 1);
            let mut best = Vocab::EOS;
            for (j, &v) in row.iter().enumerate() {
                if j != Vocab::BOS && v > row[best] {
                    best = j;
                }
            }
            out.push(best);
            if best == Vocab::EOS {
                break;
            }
            inputs.push(best);
        }
        out
    }

    pub fn generate(&self, chain: &str) -> String {
        let ids = self.generate_ids(&self.encode_source(chain));
        let toks: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != Vocab::EOS)
            .map(|&i| self.vocab.token(i))
            .collect();
        detokenize(&toks)
    }

    pub fn train_step(&mut self, batch: &[&EncodedPair], opt: &mut AdamW) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let parts: Vec<Var> = batch.iter().map(|pr| self.nll_on_tape(&mut tape, &p, pr)).collect();
        let all = tape.concat_cols(parts);
        let total = tape.sum(all);
        let value = tape.scalar(total);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite decoder loss {value}")));
        }
        let mean = tape.scale(total, 1.0 / batch.len() as f64);
        let grads = tape.backward(mean);
        opt.step(&mut self.params, grads)?;
        Ok(value)
    }

    /// Mini-batch training on (chain, rationale) pairs.
    pub fn train(&mut self, pairs: &[EncodedPair], tc: &TrainConfig, seed: u64) -> Result<DecoderTrainReport> {
        tc.validate()?;
        if pairs.is_empty() {
            return Err(Error::data("no decoder training pairs"));
        }
        for pr in pairs {
            self.check_target(&pr.target)?;
        }
        let steps_per_epoch = pairs.len().div_ceil(tc.batch_size);
        let mut opt = AdamW::new(tc.optim.clone(), &self.params, steps_per_epoch * tc.epochs);
        let mut rng = stream_rng(seed, STREAM_DECODER_TRAIN);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut report = DecoderTrainReport::default();
        for epoch in 0..tc.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(tc.batch_size) {
                let batch: Vec<&EncodedPair> = chunk.iter().map(|&i| &pairs[i]).collect();
                total += self.train_step(&batch, &mut opt)?;
            }
            let mean = total / pairs.len() as f64;
            log::debug!("decoder epoch {}: mean nll {mean:.5}", epoch + 1);
            report.epoch_losses.push(mean);
        }
        report.steps = opt.steps_taken();
        Ok(report)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DecoderTrainReport {
    /// Mean per-pair NLL for each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}
