//! Band-masked local self-attention, full self-attention and token-segment
//! top-down cross-attention, with exact score-evaluation accounting.

pub(crate) mod kernel;
mod mask;

use serde::{Deserialize, Serialize};

pub use mask::{build_mask, BoolMask, FullWindow, MaskSpec, Window};

use crate::error::{Error, Result};
use crate::nn::{LayerNormParams, LinearParams};
use crate::param::ParamStore;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Counts query-key dot products (summed over heads).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    score_evals: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn score_evals(&self) -> u64 {
        self.score_evals
    }

    pub fn add(&mut self, n: u64) {
        self.score_evals += n;
    }

    pub fn reset(&mut self) {
        self.score_evals = 0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub window: Window,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize, window: Window) -> Result<Self> {
        if n_heads == 0 || d_model == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} must be a positive multiple of n_heads {n_heads}"
            )));
        }
        window.validate()?;
        Ok(AttentionConfig { d_model, n_heads, window })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Query, key, value and output projections of one attention block.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
}

impl AttentionParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut RngStream) -> Self {
        AttentionParams {
            q: LinearParams::init(store, &format!("{prefix}.q"), d, d, true, rng),
            k: LinearParams::init(store, &format!("{prefix}.k"), d, d, true, rng),
            v: LinearParams::init(store, &format!("{prefix}.v"), d, d, true, rng),
            o: LinearParams::init(store, &format!("{prefix}.o"), d, d, true, rng),
        }
    }
}

/// Projects the inputs, attends under `mask` and applies the output
/// projection. Returns the `n x d` attention branch (no residual).
pub fn multi_head_attention(
    tape: &Tape,
    query_in: &Var,
    key_in: &Var,
    value_in: &Var,
    params: &AttentionParams,
    n_heads: usize,
    mask: &MaskSpec,
    counter: &mut OpCounter,
) -> Result<Var> {
    let q = params.q.forward(tape, query_in)?;
    let k = params.k.forward(tape, key_in)?;
    let v = params.v.forward(tape, value_in)?;
    let ctx = tape.attention(&q, &k, &v, n_heads, mask, counter)?;
    params.o.forward(tape, &ctx)
}

/// Self-attention restricted to a band of total width `w`. Only the banded
/// scores are ever computed or stored.
pub fn local_self_attention(
    tape: &Tape,
    x: &Var,
    params: &AttentionParams,
    n_heads: usize,
    window: Window,
    counter: &mut OpCounter,
) -> Result<Var> {
    window.validate()?;
    multi_head_attention(tape, x, x, x, params, n_heads, &MaskSpec::Band(window), counter)
}

/// Parameters of the token-segment cross-attention update.
#[derive(Clone, Debug)]
pub struct CrossAttentionParams {
    pub attn: AttentionParams,
    pub norm: LayerNormParams,
}

impl CrossAttentionParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut RngStream) -> Self {
        CrossAttentionParams {
            attn: AttentionParams::init(store, &format!("{prefix}.attn"), d, rng),
            norm: LayerNormParams::init(store, &format!("{prefix}.norm"), d),
        }
    }
}

/// Top-down correction of token states by segment states:
/// `e_i + LayerNorm(W_o concat_h sum_j alpha_ij f_v(s_j))`, with `alpha` the
/// scaled softmax of `f_q(e_i) . f_k(s_j)` over segments.
pub fn cross_attention_topdown(
    tape: &Tape,
    tokens: &Var,
    segments: &Var,
    params: &CrossAttentionParams,
    n_heads: usize,
    eps: f64,
    counter: &mut OpCounter,
) -> Result<Var> {
    let (m, _) = segments.value().dims2()?;
    if m == 0 {
        return Err(Error::Usage("top-down cross-attention needs at least one segment".into()));
    }
    let branch =
        multi_head_attention(tape, tokens, segments, segments, &params.attn, n_heads, &MaskSpec::Full, counter)?;
    let normed = params.norm.forward(tape, &branch, eps)?;
    tape.add(tokens, &normed)
}

/// Predicted score evaluations, per head, for one layer of each attention kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreBudget {
    pub local: u64,
    pub segment: u64,
    pub cross: u64,
}

/// Number of admitted pairs in a length-`n` band mask of window `w`.
pub fn band_popcount(n: usize, window: Window) -> u64 {
    let n = n as u64;
    match window.half_width() {
        Some(h) if (h as u64) + 1 < n => {
            let h = h as u64;
            n * (2 * h + 1) - h * (h + 1)
        }
        _ => n * n,
    }
}

pub fn count_budget(n: usize, window: Window, m: usize) -> ScoreBudget {
    ScoreBudget {
        local: band_popcount(n, window),
        segment: (m as u64) * (m as u64),
        cross: (n as u64) * (m as u64),
    }
}

/// Dense per-head attention weights for the given projected queries and keys.
/// Masked entries are exactly zero.
pub fn attention_weights(q: &Tensor, k: &Tensor, n_heads: usize, mask: &MaskSpec) -> Result<Vec<Tensor>> {
    let (n, _) = q.dims2()?;
    let (m, _) = k.dims2()?;
    let resolved = kernel::Resolved::new(mask, n, m)?;
    let zeros = Tensor::zeros(k.shape());
    let fwd = kernel::forward(q, k, &zeros, n_heads, &resolved, true)?;
    let probs = fwd.probs.expect("weights requested");
    let total = resolved.admitted() as usize;
    let mut out = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut dense = Tensor::zeros(&[n, m]);
        let mut slot = h * total;
        for i in 0..n {
            let cols: Vec<usize> = match resolved.cols(i) {
                kernel::Cols::Range(r) => r.collect(),
                kernel::Cols::List(l) => l.to_vec(),
            };
            for j in cols {
                dense.row_mut(i)[j] = probs.data()[slot];
                slot += 1;
            }
        }
        out.push(dense);
    }
    Ok(out)
}
