//! Parameter layouts and forward passes for the small attention blocks
//! shared by the trainable models.

use rand::Rng;

use super::params::ParamStore;
use super::tape::{Bound, Mask, Tape, Var};
use super::tensor::Tensor2;

/// Indices of a dense `x W + b` layer inside a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.insert_random(format!("{prefix}.w"), d_in, d_out, rng);
        let b = store.insert(format!("{prefix}.b"), Tensor2::zeros(1, d_out));
        Self { w, b }
    }

    /// Zero weight, bias set to `bias`.
    pub fn register_const(store: &mut ParamStore, prefix: &str, d_in: usize, bias: &[f64]) -> Self {
        let w = store.insert(format!("{prefix}.w"), Tensor2::zeros(d_in, bias.len()));
        let b = store.insert(format!("{prefix}.b"), Tensor2::row_vector(bias));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        tape.affine(x, p.get(self.w), p.get(self.b))
    }
}

/// Single-head attention projections with an output residual.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

impl Attention {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: store.insert_random(format!("{prefix}.wq"), d, d, rng),
            wk: store.insert_random(format!("{prefix}.wk"), d, d, rng),
            wv: store.insert_random(format!("{prefix}.wv"), d, d, rng),
            wo: store.insert_random(format!("{prefix}.wo"), d, d, rng),
        }
    }

    /// `x + attn(x W_q, src W_k, src W_v) W_o`, where `src` is `memory` for
    /// cross-attention and `x` otherwise.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        memory: Option<Var>,
        bias: Option<Var>,
        mask: Option<Mask>,
    ) -> Var {
        let src = memory.unwrap_or(x);
        let q = tape.matmul(x, p.get(self.wq));
        let k = tape.matmul(src, p.get(self.wk));
        let v = tape.matmul(src, p.get(self.wv));
        let a = tape.attention(q, k, v, bias, mask);
        let o = tape.matmul(a, p.get(self.wo));
        tape.add(x, o)
    }
}

/// Residual tanh feed-forward layer.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub inner: Dense,
    pub outer: Dense,
}

impl FeedForward {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            inner: Dense::register(store, &format!("{prefix}.ff_in"), d, d_ff, rng),
            outer: Dense::register(store, &format!("{prefix}.ff_out"), d_ff, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = self.inner.forward(tape, p, x);
        let h = tape.tanh(h);
        let h = self.outer.forward(tape, p, h);
        tape.add(x, h)
    }
}

/// Attention followed by a feed-forward layer, both residual.
#[derive(Clone, Copy, Debug)]
pub struct AttnBlock {
    pub attn: Attention,
    pub ff: FeedForward,
}

impl AttnBlock {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            attn: Attention::register(store, prefix, d, rng),
            ff: FeedForward::register(store, prefix, d, d_ff, rng),
        }
    }

    pub fn attend(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        memory: Option<Var>,
        bias: Option<Var>,
        mask: Option<Mask>,
    ) -> Var {
        self.attn.forward(tape, p, x, memory, bias, mask)
    }

    pub fn feed_forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        self.ff.forward(tape, p, x)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        bias: Option<Var>,
        mask: Option<Mask>,
    ) -> Var {
        let h = self.attend(tape, p, x, None, bias, mask);
        self.feed_forward(tape, p, h)
    }
}

/// `-sum log softmax(logits)[row, target]` over the rows of `logits`.
pub fn cross_entropy_sum(tape: &mut Tape, logits: Var, targets: &[usize]) -> Var {
    let lp = tape.log_softmax_rows(logits, None);
    let picked = tape.gather(lp, targets.iter().copied().enumerate().collect());
    let s = tape.sum(picked);
    tape.scale(s, -1.0)
}
