//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable op executed through a [`Tape`] with gradients enabled
//! appends one node; [`Tape::backward`] walks the nodes in exact reverse
//! execution order. An inference tape records nothing, so intermediate values
//! are freed as soon as their [`Var`] handles drop.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::attention::kernel::{self, Resolved};
use crate::attention::{MaskSpec, OpCounter};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::pooling::PoolPlan;
use crate::rng::RngStream;
use crate::tensor::{gemm, Tensor};

const NO_NODE: usize = usize::MAX;

/// A value produced under a tape.
#[derive(Clone)]
pub struct Var {
    id: usize,
    value: Rc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value)
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add,
    Scale { s: f64 },
    Sum { a: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Gelu { x: Var },
    LayerNorm { g: Var, xhat: Tensor, inv_std: Vec<f64> },
    Softmax { y: Rc<Tensor> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols { a: Var, b: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, mask: Resolved, probs: Tensor },
    Pool { e: Var, plan: Rc<PoolPlan> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor, count: usize },
    BceLogits { logits: Var, labels: Vec<f64> },
    Dropout { keep: Vec<f64> },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    leaves: HashMap<usize, Tensor>,
    visit_order: Vec<usize>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Gradient with respect to a leaf created by [`Tape::leaf`].
    pub fn wrt(&self, var: &Var) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    /// Node ids in the order backward visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    record: bool,
    nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
    dropout_rng: RefCell<Option<RngStream>>,
}

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2 / pi)

// 0.5 (1 + tanh(u)) == sigmoid(2u), which needs a single exp.
fn gelu_gate(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

fn gelu_scalar(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Tanh-approximated GELU, exposed for oracles and tests.
pub fn gelu(x: f64) -> f64 {
    gelu_scalar(x)
}

impl<'p> Tape<'p> {
    /// A recording tape; gradients can be taken.
    pub fn new(store: &'p ParamStore) -> Self {
        Self::build(store, true)
    }

    /// A non-recording tape for inference.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self::build(store, false)
    }

    fn build(store: &'p ParamStore, record: bool) -> Self {
        Tape {
            store,
            record,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
            dropout_rng: RefCell::new(None),
        }
    }

    /// Enables dropout draws from `rng`; without it dropout is the identity.
    pub fn with_dropout_rng(self, rng: RngStream) -> Self {
        *self.dropout_rng.borrow_mut() = Some(rng);
        self
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        let value = Rc::new(value);
        if !self.record {
            return Var { id: NO_NODE, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, inputs });
        Var { id, value }
    }

    /// A constant input. Gradients with respect to it are available through
    /// [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.borrow().get(&id) {
            return v.clone();
        }
        let value = self.store.get(id).value_rc();
        let var = if self.record {
            let mut nodes = self.nodes.borrow_mut();
            let nid = nodes.len();
            nodes.push(Node { op: Op::Param(id), inputs: vec![] });
            Var { id: nid, value }
        } else {
            Var { id: NO_NODE, value }
        };
        self.param_vars.borrow_mut().insert(id, var.clone());
        var
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&self, a: &Var, b: &Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: &Var, b: &Var, trans_b: bool) -> Result<Var> {
        let (m, k) = a.value.dims2()?;
        let (br, bc) = b.value.dims2()?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}{}",
                a.shape(),
                b.shape(),
                if trans_b { "^T" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.value.data(), false, b.value.data(), trans_b, 0.0, &mut out);
        let out = Tensor::from_parts(vec![m, n], out);
        check_finite("matmul", &out)?;
        Ok(self.push(
            Op::MatMul { a: a.clone(), b: b.clone(), trans_b },
            vec![a.id, b.id],
            out,
        ))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", a.shape(), b.shape())));
        }
        let mut out = (*a.value).clone();
        out.add_assign(&b.value);
        check_finite("add", &out)?;
        Ok(self.push(Op::Add, vec![a.id, b.id], out))
    }

    pub fn scale(&self, a: &Var, s: f64) -> Result<Var> {
        let out = a.value.map(|x| x * s);
        check_finite("scale", &out)?;
        Ok(self.push(Op::Scale { s }, vec![a.id], out))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, a: &Var) -> Result<Var> {
        let out = Tensor::scalar(a.value.sum());
        check_finite("sum", &out)?;
        Ok(self.push(Op::Sum { a: a.clone() }, vec![a.id], out))
    }

    /// `x W + b` along the last axis; `w` is `din x dout`.
    pub fn linear(&self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let (din, dout) = w.value.dims2()?;
        if x.value.last_dim() != din || x.value.ndim() == 0 {
            return Err(Error::Shape(format!(
                "linear input {:?} vs weight {:?}",
                x.shape(),
                w.shape()
            )));
        }
        if let Some(b) = b {
            if b.shape() != [dout] {
                return Err(Error::Shape(format!("bias {:?} for output width {dout}", b.shape())));
            }
        }
        let rows = x.value.rows();
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            for r in out.chunks_mut(dout) {
                r.copy_from_slice(b.value.data());
            }
        }
        gemm(rows, din, dout, x.value.data(), false, w.value.data(), false, if b.is_some() { 1.0 } else { 0.0 }, &mut out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::from_parts(shape, out);
        check_finite("linear", &out)?;
        let mut inputs = vec![x.id, w.id];
        if let Some(b) = b {
            inputs.push(b.id);
        }
        Ok(self.push(Op::Linear { x: x.clone(), w: w.clone(), b: b.cloned() }, inputs, out))
    }

    pub fn gelu(&self, x: &Var) -> Result<Var> {
        let out = x.value.map(gelu_scalar);
        check_finite("gelu", &out)?;
        Ok(self.push(Op::Gelu { x: x.clone() }, vec![x.id], out))
    }

    /// Normalizes each position over the last axis, then applies `gain` and
    /// `bias`. `eps` is added to the variance inside the square root.
    pub fn layer_norm(&self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let d = x.value.last_dim();
        if d < 2 {
            return Err(Error::Config(format!("layer norm over width {d} (< 2)")));
        }
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer norm width {d} with gain {:?}, bias {:?}",
                gain.shape(),
                bias.shape()
            )));
        }
        let rows = x.value.rows();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(rows);
        let (g, b) = (gain.value.data(), bias.value.data());
        for r in 0..rows {
            let xr = x.value.row(r);
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            let hr = xhat.row_mut(r);
            for (h, v) in hr.iter_mut().zip(xr) {
                *h = (v - mean) * inv;
            }
            let hr = xhat.row(r).to_vec();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = hr[j] * g[j] + b[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let saved = if self.record { xhat } else { Tensor::zeros(&[0]) };
        Ok(self.push(
            Op::LayerNorm { g: gain.clone(), xhat: saved, inv_std },
            vec![x.id, gain.id, bias.id],
            out,
        ))
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    pub fn softmax_rows(&self, x: &Var) -> Result<Var> {
        let out = softmax_rows(&x.value)?;
        let out = Rc::new(out);
        if !self.record {
            return Ok(Var { id: NO_NODE, value: out });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op: Op::Softmax { y: Rc::clone(&out) }, inputs: vec![x.id] });
        Ok(Var { id, value: out })
    }

    /// Selects rows of a matrix; repeated ids are allowed.
    pub fn gather_rows(&self, table: &Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = table.value.dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("row id {bad} out of range for table of {n} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(table.value.row(i));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], out);
        Ok(self.push(Op::Gather { table: table.clone(), ids: ids.to_vec() }, vec![table.id], out))
    }

    /// `[a | b]` along columns.
    pub fn concat_cols(&self, a: &Var, b: &Var) -> Result<Var> {
        let (n, da) = a.value.dims2()?;
        let (nb, db) = b.value.dims2()?;
        if n != nb {
            return Err(Error::Shape(format!("concat rows {n} vs {nb}")));
        }
        let mut out = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            out.extend_from_slice(a.value.row(r));
            out.extend_from_slice(b.value.row(r));
        }
        let out = Tensor::from_parts(vec![n, da + db], out);
        Ok(self.push(Op::ConcatCols { a: a.clone(), b: b.clone() }, vec![a.id, b.id], out))
    }

    /// Multi-head scaled dot-product attention on projected inputs.
    /// Adds the number of query-key dot products to `counter`.
    pub fn attention(
        &self,
        q: &Var,
        k: &Var,
        v: &Var,
        heads: usize,
        mask: &MaskSpec,
        counter: &mut OpCounter,
    ) -> Result<Var> {
        let (n, _) = q.value.dims2()?;
        let (m, _) = k.value.dims2()?;
        let resolved = Resolved::new(mask, n, m)?;
        let fwd = kernel::forward(&q.value, &k.value, &v.value, heads, &resolved, self.record)?;
        counter.add(fwd.score_evals);
        check_finite("attention", &fwd.out)?;
        let probs = fwd.probs.unwrap_or_else(|| Tensor::zeros(&[0]));
        Ok(self.push(
            Op::Attention { q: q.clone(), k: k.clone(), v: v.clone(), heads, mask: resolved, probs },
            vec![q.id, k.id, v.id],
            fwd.out,
        ))
    }

    /// Sparse pooling `S = P E` described by `plan`.
    pub fn pool(&self, e: &Var, plan: &Rc<PoolPlan>) -> Result<Var> {
        let out = plan.apply(&e.value)?;
        check_finite("pool", &out)?;
        Ok(self.push(Op::Pool { e: e.clone(), plan: Rc::clone(plan) }, vec![e.id], out))
    }

    /// Mean negative log-likelihood over positions whose target is not
    /// `pad_id`. `logits` is `T x V`.
    pub fn cross_entropy(&self, logits: &Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let (t, v) = logits.value.dims2()?;
        if targets.len() != t {
            return Err(Error::Shape(format!("{t} logit rows vs {} targets", targets.len())));
        }
        let masked: Vec<Option<usize>> = targets.iter().map(|&x| (x != pad_id).then_some(x)).collect();
        let count = masked.iter().flatten().count();
        if count == 0 {
            return Err(Error::Input("cross entropy over an all-pad target".into()));
        }
        if let Some(&bad) = masked.iter().flatten().find(|&&x| x >= v) {
            return Err(Error::Input(format!("target id {bad} outside vocabulary of {v}")));
        }
        let probs = softmax_rows(&logits.value)?;
        let mut loss = 0.0;
        for (r, tgt) in masked.iter().enumerate() {
            if let Some(tgt) = tgt {
                let row = logits.value.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                loss += lse - row[*tgt];
            }
        }
        let out = Tensor::scalar(loss / count as f64);
        check_finite("cross_entropy", &out)?;
        Ok(self.push(
            Op::CrossEntropy { logits: logits.clone(), targets: masked, probs, count },
            vec![logits.id],
            out,
        ))
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against 0/1 `labels`.
    pub fn bce_with_logits(&self, logits: &Var, labels: &[f64]) -> Result<Var> {
        if logits.value.numel() != labels.len() || labels.is_empty() {
            return Err(Error::Shape(format!(
                "{} logits vs {} labels",
                logits.value.numel(),
                labels.len()
            )));
        }
        let loss = logits
            .value
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / labels.len() as f64;
        let out = Tensor::scalar(loss);
        check_finite("bce_with_logits", &out)?;
        Ok(self.push(
            Op::BceLogits { logits: logits.clone(), labels: labels.to_vec() },
            vec![logits.id],
            out,
        ))
    }

    /// Inverted dropout with drop probability `p`. Identity when `p == 0` or
    /// no dropout stream is attached.
    pub fn dropout(&self, a: &Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let mut rng_slot = self.dropout_rng.borrow_mut();
        let Some(rng) = rng_slot.as_mut().filter(|_| p > 0.0) else {
            return Ok(a.clone());
        };
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..a.value.numel()).map(|_| if rng.bernoulli(p) { 0.0 } else { scale }).collect();
        drop(rng_slot);
        let data = a.value.data().iter().zip(&keep).map(|(x, k)| x * k).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.push(Op::Dropout { keep }, vec![a.id], out))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Usage("backward on an inference tape".into()));
        }
        if loss.value.numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got {:?}", loss.shape())));
        }
        if loss.id == NO_NODE {
            return Err(Error::Usage("loss was not produced under this tape".into()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss.shape(), 1.0));
        let mut out = Gradients { params: Vec::new(), leaves: HashMap::new(), visit_order: Vec::new() };

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(g) = grads[id].take() else { continue };
            out.visit_order.push(id);
            let input_grads = match &node.op {
                Op::Leaf => {
                    out.leaves.insert(id, g);
                    continue;
                }
                Op::Param(pid) => {
                    out.params.push((*pid, g));
                    continue;
                }
                op => backward_op(op, &g)?,
            };
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[*input] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    if d == 0 {
        return Err(Error::Shape("softmax over an empty axis".into()));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Input(format!("softmax row {r} has no finite entry")));
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "softmax_rows".into() });
    }
    Ok(out)
}

fn matmul_grads(a: &Tensor, b: &Tensor, trans_b: bool, g: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = g.shape()[1];
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    if trans_b {
        // out = a b^T, b: n x k
        gemm(m, n, k, g.data(), false, b.data(), false, 0.0, &mut da);
        gemm(n, m, k, g.data(), true, a.data(), false, 0.0, &mut db);
        (Tensor::from_parts(vec![m, k], da), Tensor::from_parts(vec![n, k], db))
    } else {
        gemm(m, n, k, g.data(), false, b.data(), true, 0.0, &mut da);
        gemm(k, m, n, a.data(), true, g.data(), false, 0.0, &mut db);
        (Tensor::from_parts(vec![m, k], da), Tensor::from_parts(vec![k, n], db))
    }
}

fn backward_op(op: &Op, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    Ok(match op {
        Op::Leaf | Op::Param(_) => unreachable!("leaves handled by caller"),
        Op::MatMul { a, b, trans_b } => {
            let (da, db) = matmul_grads(&a.value, &b.value, *trans_b, g);
            vec![Some(da), Some(db)]
        }
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Scale { s, .. } => vec![Some(g.map(|x| x * s))],
        Op::Sum { a } => vec![Some(Tensor::full(a.shape(), g.item()?))],
        Op::Linear { x, w, b } => {
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            let rows = x.value.rows();
            let mut dx = vec![0.0; rows * din];
            gemm(rows, dout, din, g.data(), false, w.value.data(), true, 0.0, &mut dx);
            let mut dw = vec![0.0; din * dout];
            gemm(din, rows, dout, x.value.data(), true, g.data(), false, 0.0, &mut dw);
            let mut grads = vec![
                Some(Tensor::from_parts(x.shape().to_vec(), dx)),
                Some(Tensor::from_parts(vec![din, dout], dw)),
            ];
            if b.is_some() {
                let mut db = vec![0.0; dout];
                for r in g.data().chunks(dout) {
                    for (acc, v) in db.iter_mut().zip(r) {
                        *acc += v;
                    }
                }
                grads.push(Some(Tensor::from_parts(vec![dout], db)));
            }
            grads
        }
        Op::Gelu { x } => {
            let data = x.value.data().iter().zip(g.data()).map(|(&xv, gv)| gelu_grad(xv) * gv).collect();
            vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
        }
        Op::LayerNorm { g: gain, xhat, inv_std } => {
            let d = xhat.last_dim();
            let rows = xhat.rows();
            let gv = gain.value.data();
            let mut dx = Tensor::zeros(xhat.shape());
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            let mut dxhat = vec![0.0; d];
            for r in 0..rows {
                let gr = g.row(r);
                let hr = xhat.row(r);
                for j in 0..d {
                    dg[j] += gr[j] * hr[j];
                    db[j] += gr[j];
                    dxhat[j] = gr[j] * gv[j];
                }
                let mean_dh = dxhat.iter().sum::<f64>() / d as f64;
                let mean_dh_h = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                let inv = inv_std[r];
                for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                    *o = inv * (dxhat[j] - mean_dh - hr[j] * mean_dh_h);
                }
            }
            vec![
                Some(dx),
                Some(Tensor::from_parts(vec![d], dg)),
                Some(Tensor::from_parts(vec![d], db)),
            ]
        }
        Op::Softmax { y } => {
            let mut dx = (**y).clone();
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = g.row(r);
                let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                    *o = yr[j] * (gr[j] - inner);
                }
            }
            vec![Some(dx)]
        }
        Op::Gather { table, ids } => {
            let mut dt = Tensor::zeros(table.shape());
            for (r, &i) in ids.iter().enumerate() {
                for (o, v) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            vec![Some(dt)]
        }
        Op::ConcatCols { a, b } => {
            let da_w = a.value.last_dim();
            let db_w = b.value.last_dim();
            let n = a.value.rows();
            let mut da = Vec::with_capacity(n * da_w);
            let mut db = Vec::with_capacity(n * db_w);
            for r in 0..n {
                let gr = g.row(r);
                da.extend_from_slice(&gr[..da_w]);
                db.extend_from_slice(&gr[da_w..]);
            }
            vec![
                Some(Tensor::from_parts(a.shape().to_vec(), da)),
                Some(Tensor::from_parts(b.shape().to_vec(), db)),
            ]
        }
        Op::Attention { q, k, v, heads, mask, probs } => {
            let (dq, dk, dv) = kernel::backward(&q.value, &k.value, &v.value, *heads, mask, probs, g);
            vec![Some(dq), Some(dk), Some(dv)]
        }
        Op::Pool { e, plan } => vec![Some(plan.transpose_apply(g, e.shape()))],
        Op::CrossEntropy { logits, targets, probs, count } => {
            let scale = g.item()? / *count as f64;
            let mut dl = Tensor::zeros(logits.shape());
            for (r, tgt) in targets.iter().enumerate() {
                if let Some(tgt) = tgt {
                    let pr = probs.row(r);
                    let out = dl.row_mut(r);
                    for (o, p) in out.iter_mut().zip(pr) {
                        *o = p * scale;
                    }
                    out[*tgt] -= scale;
                }
            }
            vec![Some(dl)]
        }
        Op::BceLogits { logits, labels } => {
            let scale = g.item()? / labels.len() as f64;
            let data = logits
                .value
                .data()
                .iter()
                .zip(labels)
                .map(|(&z, &y)| (1.0 / (1.0 + (-z).exp()) - y) * scale)
                .collect();
            vec![Some(Tensor::from_parts(logits.shape().to_vec(), data))]
        }
        Op::Dropout { keep } => {
            let data = g.data().iter().zip(keep).map(|(a, b)| a * b).collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        }
    })
}
