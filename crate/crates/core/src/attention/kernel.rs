//! Scaled dot-product attention over a sparse admissibility pattern.
//!
//! Scores are only evaluated for admitted `(row, col)` pairs, and attention
//! weights are stored compactly (one slot per admitted pair). A band pattern
//! therefore costs `O(N w)` in both time and memory, while a full pattern
//! materializes the dense `heads x N x M` weight tensor.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::mask::MaskSpec;

/// Admitted key columns for one query row.
pub(crate) enum Cols<'a> {
    Range(Range<usize>),
    List(&'a [usize]),
}

impl Cols<'_> {
    pub(crate) fn len(&self) -> usize {
        match self {
            Cols::Range(r) => r.len(),
            Cols::List(l) => l.len(),
        }
    }
}

/// A [`MaskSpec`] resolved against concrete sizes.
pub(crate) enum Pattern {
    Full,
    Causal,
    Band { half: usize },
    Lists(Vec<Vec<usize>>),
}

pub(crate) struct Resolved {
    pub n_rows: usize,
    pub n_cols: usize,
    pattern: Pattern,
}

impl Resolved {
    pub(crate) fn new(spec: &MaskSpec, n_rows: usize, n_cols: usize) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::Usage(format!("attention over empty axis ({n_rows}x{n_cols})")));
        }
        let pattern = match spec {
            MaskSpec::Full => Pattern::Full,
            MaskSpec::Causal => Pattern::Causal,
            MaskSpec::Band(w) => {
                if n_rows != n_cols {
                    return Err(Error::Usage(format!(
                        "band mask needs a square pattern, got {n_rows}x{n_cols}"
                    )));
                }
                match w.half_width() {
                    Some(half) => Pattern::Band { half },
                    None => Pattern::Full,
                }
            }
            MaskSpec::Explicit(m) => {
                if m.n_rows() != n_rows || m.n_cols() != n_cols {
                    return Err(Error::Shape(format!(
                        "explicit mask is {}x{}, attention is {n_rows}x{n_cols}",
                        m.n_rows(),
                        m.n_cols()
                    )));
                }
                let lists: Vec<Vec<usize>> = (0..n_rows)
                    .map(|i| (0..n_cols).filter(|&j| m.get(i, j)).collect())
                    .collect();
                if let Some(i) = lists.iter().position(Vec::is_empty) {
                    return Err(Error::Usage(format!("mask row {i} admits no column")));
                }
                Pattern::Lists(lists)
            }
        };
        if matches!(pattern, Pattern::Causal) && n_cols < n_rows {
            return Err(Error::Usage("causal mask needs n_cols >= n_rows".into()));
        }
        Ok(Resolved { n_rows, n_cols, pattern })
    }

    pub(crate) fn cols(&self, i: usize) -> Cols<'_> {
        match &self.pattern {
            Pattern::Full => Cols::Range(0..self.n_cols),
            Pattern::Causal => Cols::Range(0..i + 1),
            Pattern::Band { half } => {
                Cols::Range(i.saturating_sub(*half)..(i + half + 1).min(self.n_cols))
            }
            Pattern::Lists(l) => Cols::List(&l[i]),
        }
    }

    /// Number of admitted pairs, i.e. score evaluations per head.
    pub(crate) fn admitted(&self) -> u64 {
        (0..self.n_rows).map(|i| self.cols(i).len() as u64).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.n_rows + 1);
        let mut acc = 0;
        off.push(0);
        for i in 0..self.n_rows {
            acc += self.cols(i).len();
            off.push(acc);
        }
        off
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) struct Forward {
    pub out: Tensor,
    /// `heads * admitted` weights, head-major; `None` unless requested.
    pub probs: Option<Tensor>,
    pub score_evals: u64,
}

fn check_inputs(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize, usize)> {
    let (n, d) = q.dims2()?;
    let (m, dk) = k.dims2()?;
    let (mv, dv) = v.dims2()?;
    if dk != d || dv != d || mv != m {
        return Err(Error::Shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("d_model {d} not divisible by {heads} heads")));
    }
    Ok((n, m, d))
}

/// Multi-head attention core on already-projected `q` (n x d), `k`, `v`
/// (m x d). Heads are contiguous column blocks; outputs are concatenated.
pub(crate) fn forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: &Resolved,
    keep_probs: bool,
) -> Result<Forward> {
    let (n, m, d) = check_inputs(q, k, v, heads)?;
    if mask.n_rows != n || mask.n_cols != m {
        return Err(Error::Shape(format!(
            "mask {}x{} vs attention {n}x{m}",
            mask.n_rows, mask.n_cols
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offsets = mask.offsets();
    let total = offsets[n];
    // Scores for every admitted pair are materialized, heads * admitted entries.
    let mut probs = Tensor::zeros(&[heads * total]);
    let mut out = vec![0.0; n * d];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    for h in 0..heads {
        let hc = h * dh..(h + 1) * dh;
        for i in 0..n {
            let cols = mask.cols(i);
            let len = cols.len();
            let qi = &qd[i * d + hc.start..i * d + hc.end];
            let base = h * total + offsets[i];
            let p = &mut probs.data_mut()[base..base + len];
            let mut fill = |it: &mut dyn Iterator<Item = usize>| {
                for (slot, j) in it.enumerate() {
                    p[slot] = dot(qi, &kd[j * d + hc.start..j * d + hc.end]) * scale;
                }
            };
            match &cols {
                Cols::Range(r) => fill(&mut r.clone()),
                Cols::List(l) => fill(&mut l.iter().copied()),
            }
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in p.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            let inv = 1.0 / sum;
            for x in p.iter_mut() {
                *x *= inv;
            }
            let oi = &mut out[i * d + hc.start..i * d + hc.end];
            let mut accumulate = |it: &mut dyn Iterator<Item = usize>| {
                for (slot, j) in it.enumerate() {
                    let w = p[slot];
                    let vj = &vd[j * d + hc.start..j * d + hc.end];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            };
            match &cols {
                Cols::Range(r) => accumulate(&mut r.clone()),
                Cols::List(l) => accumulate(&mut l.iter().copied()),
            }
        }
    }
    let score_evals = heads as u64 * total as u64;
    Ok(Forward {
        out: Tensor::from_parts(vec![n, d], out),
        probs: keep_probs.then_some(probs),
        score_evals,
    })
}

/// Gradients of [`forward`] with respect to `q`, `k` and `v`.
pub(crate) fn backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: &Resolved,
    probs: &Tensor,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let m = k.shape()[0];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offsets = mask.offsets();
    let total = offsets[n];
    let (qd, kd, vd, god) = (q.data(), k.data(), v.data(), dout.data());
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; m * d];
    let mut dv = vec![0.0; m * d];
    let mut dp = Vec::new();

    for h in 0..heads {
        let hc = h * dh..(h + 1) * dh;
        for i in 0..n {
            let cols = mask.cols(i);
            let base = h * total + offsets[i];
            let p = &probs.data()[base..base + cols.len()];
            let gi = &god[i * d + hc.start..i * d + hc.end];
            let qi = &qd[i * d + hc.start..i * d + hc.end];
            let idx: Vec<usize> = match &cols {
                Cols::Range(r) => r.clone().collect(),
                Cols::List(l) => l.to_vec(),
            };
            dp.clear();
            for (slot, &j) in idx.iter().enumerate() {
                dp.push(dot(gi, &vd[j * d + hc.start..j * d + hc.end]));
                let dvj = &mut dv[j * d + hc.start..j * d + hc.end];
                for (x, g) in dvj.iter_mut().zip(gi) {
                    *x += p[slot] * g;
                }
            }
            let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for (slot, &j) in idx.iter().enumerate() {
                let ds = p[slot] * (dp[slot] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &kd[j * d + hc.start..j * d + hc.end];
                let dqi = &mut dq[i * d + hc.start..i * d + hc.end];
                for (x, kv) in dqi.iter_mut().zip(kj) {
                    *x += ds * kv;
                }
                let dkj = &mut dk[j * d + hc.start..j * d + hc.end];
                for (x, qv) in dkj.iter_mut().zip(qi) {
                    *x += ds * qv;
                }
            }
        }
    }
    (
        Tensor::from_parts(vec![n, d], dq),
        Tensor::from_parts(vec![m, d], dk),
        Tensor::from_parts(vec![m, d], dv),
    )
}
