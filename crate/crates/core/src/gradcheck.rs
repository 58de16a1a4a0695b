//! Central finite-difference checks of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::model::TopDownModel;
use crate::param::ParamStore;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Anything that owns a parameter store.
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

impl HasParams for TopDownModel {
    fn params(&self) -> &ParamStore {
        TopDownModel::params(self)
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        TopDownModel::params_mut(self)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Coordinates sampled per tensor; `None` checks all of them.
    pub sample: Option<usize>,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, sample: None, floor: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradReport {
    fn record(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some(Mismatch { tensor: tensor.to_string(), index, analytic, numeric });
        }
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn coordinates(numel: usize, sample: Option<usize>, rng: &mut RngStream) -> Vec<usize> {
    match sample {
        Some(s) if s < numel => {
            // Partial Fisher-Yates: distinct coordinates.
            let mut idx: Vec<usize> = (0..numel).collect();
            for i in 0..s {
                let j = i + rng.below(numel - i);
                idx.swap(i, j);
            }
            idx.truncate(s);
            idx
        }
        _ => (0..numel).collect(),
    }
}

fn scalar(v: &Var) -> Result<f64> {
    v.value().item()
}

/// Checks gradients of `f` with respect to the leaf `inputs`.
pub fn check_inputs(
    inputs: &[Tensor],
    opts: &GradCheckOptions,
    rng: &mut RngStream,
    f: impl Fn(&Tape, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let store = ParamStore::new();
    let analytic: Vec<Tensor> = {
        let tape = Tape::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(&out)?;
        vars.iter()
            .map(|v| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference(&store);
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        scalar(&f(&tape, &vars)?)
    };
    let mut report = GradReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for c in coordinates(inputs[t].numel(), opts.sample, rng) {
            let orig = work[t].data()[c];
            work[t].data_mut()[c] = orig + opts.h;
            let plus = eval(&work)?;
            work[t].data_mut()[c] = orig - opts.h;
            let minus = eval(&work)?;
            work[t].data_mut()[c] = orig;
            report.record(&format!("input {t}"), c, grad.data()[c], (plus - minus) / (2.0 * opts.h), opts.floor);
        }
    }
    Ok(report)
}

/// Checks gradients of `loss` with respect to every parameter of `subject`.
pub fn check_params<M: HasParams>(
    subject: &mut M,
    opts: &GradCheckOptions,
    rng: &mut RngStream,
    loss: impl Fn(&M, &Tape) -> Result<Var>,
) -> Result<GradReport> {
    let analytic: Vec<Tensor> = {
        let tape = Tape::new(subject.params());
        let out = loss(subject, &tape)?;
        let grads = tape.backward(&out)?;
        subject
            .params()
            .iter()
            .map(|(id, p)| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value().shape())))
            .collect()
    };
    let eval = |m: &M| -> Result<f64> {
        let tape = Tape::inference(m.params());
        scalar(&loss(m, &tape)?)
    };
    let ids: Vec<_> = subject.params().ids().collect();
    let mut report = GradReport::default();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let name = subject.params().get(id).name.clone();
        let numel = grad.numel();
        for c in coordinates(numel, opts.sample, rng) {
            let orig = subject.params().get(id).value().data()[c];
            subject.params_mut().get_mut(id).value_mut().data_mut()[c] = orig + opts.h;
            let plus = eval(subject)?;
            subject.params_mut().get_mut(id).value_mut().data_mut()[c] = orig - opts.h;
            let minus = eval(subject)?;
            subject.params_mut().get_mut(id).value_mut().data_mut()[c] = orig;
            report.record(&name, c, grad.data()[c], (plus - minus) / (2.0 * opts.h), opts.floor);
        }
    }
    if report.checked == 0 {
        return Err(Error::Usage("gradient check found no coordinates".into()));
    }
    Ok(report)
}
