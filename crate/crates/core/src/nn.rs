//! Parameterized building blocks: affine maps, layer norm, feed-forward.

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};

/// Standard deviation of the normal initializer for embedding tables.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearParams {
    /// Weights are drawn from N(0, 1/din), so unit-variance inputs give
    /// unit-variance outputs.
    pub fn init(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, bias: bool, rng: &mut RngStream) -> Self {
        let w = store.add_normal(format!("{prefix}.w"), &[din, dout], (din as f64).recip().sqrt(), rng);
        let b = bias.then(|| store.add_zeros(format!("{prefix}.b"), &[dout]));
        LinearParams { w, b }
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.linear(x, &w, b.as_ref())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.add_ones(format!("{prefix}.gain"), &[d]),
            bias: store.add_zeros(format!("{prefix}.bias"), &[d]),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Var, eps: f64) -> Result<Var> {
        tape.layer_norm(x, &tape.param(self.gain), &tape.param(self.bias), eps)
    }
}

/// Position-wise feed-forward sublayer: `LayerNorm(x + W2 gelu(W1 x + b1) + b2)`.
#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub up: LinearParams,
    pub down: LinearParams,
    pub norm: LayerNormParams,
}

impl FfnParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut RngStream) -> Self {
        FfnParams {
            up: LinearParams::init(store, &format!("{prefix}.up"), d, hidden, true, rng),
            down: LinearParams::init(store, &format!("{prefix}.down"), hidden, d, true, rng),
            norm: LayerNormParams::init(store, &format!("{prefix}.norm"), d),
        }
    }
}

pub fn ffn_block(tape: &Tape, x: &Var, params: &FfnParams, eps: f64, dropout: f64) -> Result<Var> {
    let h = tape.gelu(&params.up.forward(tape, x)?)?;
    let y = params.down.forward(tape, &h)?;
    let y = tape.dropout(&y, dropout)?;
    let sum = tape.add(x, &y)?;
    params.norm.forward(tape, &sum, eps)
}

/// Residual add followed by layer norm (post-norm sublayer wrapper).
pub fn add_and_norm(tape: &Tape, x: &Var, branch: &Var, norm: &LayerNormParams, eps: f64, dropout: f64) -> Result<Var> {
    let branch = tape.dropout(branch, dropout)?;
    let sum = tape.add(x, &branch)?;
    norm.forward(tape, &sum, eps)
}
