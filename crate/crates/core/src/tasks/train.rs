use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TaskInstance, TaskSpec};
use crate::attention::OpCounter;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PoolingInputs, PoolingMode, Strategy, TopDownModel, EOS_ID};
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Validation interval in steps; the last step is always validated.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop once the validation metric reaches this value.
    #[serde(default)]
    pub stop_at: Option<f64>,
}

fn default_batch() -> usize {
    8
}
fn default_eval_every() -> usize {
    250
}
fn default_eval_size() -> usize {
    128
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: default_batch(),
            adam: AdamConfig::default(),
            eval_every: default_eval_every(),
            eval_size: default_eval_size(),
            seed: 0,
            stop_at: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_size == 0 {
            return Err(Error::Config(
                "batch_size, eval_every and eval_size must be positive".into(),
            ));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub token_acc: f64,
    pub seq_acc: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub token_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss of every step, in order.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    /// Step whose parameters were retained (0 = initial parameters).
    pub best_step: usize,
    /// Validation metric of the retained parameters.
    pub final_metric: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

fn config_hash(model: &ModelConfig, task: &TaskSpec, train: &TrainConfig, kind: &str) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update(model.to_json().as_bytes());
    h.update(serde_json::to_vec(task).expect("task serializes"));
    h.update(serde_json::to_vec(train).expect("train config serializes"));
    hex::encode(h.finalize())
}

/// Pooling side inputs for `inst` under the model's pooling mode: nothing for
/// avg, the instance's oracle labels for oracle_ada, and raw tagger logits
/// for ada.
pub fn pooling_inputs(
    model: &TopDownModel,
    inst: &TaskInstance,
    tagger: Option<&TopDownModel>,
) -> Result<PoolingInputs> {
    match model.config().pooling_mode {
        PoolingMode::Avg => Ok(PoolingInputs::none()),
        PoolingMode::OracleAda => inst
            .labels
            .clone()
            .map(PoolingInputs::labels)
            .ok_or_else(|| Error::Config("oracle_ada pooling needs instances with labels".into())),
        PoolingMode::Ada => {
            let tagger = tagger.ok_or_else(|| Error::Config("ada pooling needs a trained tagger".into()))?;
            Ok(PoolingInputs::weights(tagger.importance_weights(&inst.source)?))
        }
    }
}

/// Greedy or beam decoding of every instance, scored by exact match.
pub fn eval_accuracy(
    model: &TopDownModel,
    tasks: &[TaskInstance],
    strategy: Strategy,
    tagger: Option<&TopDownModel>,
) -> Result<EvalMetrics> {
    if tasks.is_empty() {
        return Err(Error::Usage("evaluation needs at least one instance".into()));
    }
    let (mut hit_tokens, mut total_tokens, mut hit_seqs) = (0usize, 0usize, 0usize);
    for inst in tasks {
        let pooling = pooling_inputs(model, inst, tagger)?;
        let out = model.generate(&inst.source, &pooling, strategy, inst.target.len() + 1, EOS_ID)?;
        hit_tokens += inst
            .target
            .iter()
            .enumerate()
            .filter(|&(i, t)| out.get(i) == Some(t))
            .count();
        total_tokens += inst.target.len();
        if out.len() == inst.target.len() + 1
            && out[..inst.target.len()] == inst.target[..]
            && out.last() == Some(&EOS_ID)
        {
            hit_seqs += 1;
        }
    }
    Ok(EvalMetrics {
        token_acc: hit_tokens as f64 / total_tokens.max(1) as f64,
        seq_acc: hit_seqs as f64 / tasks.len() as f64,
        count: tasks.len(),
    })
}

/// Token-level precision, recall and F1 of `logit >= 0` against the labels.
/// With no positive labels and no positive predictions F1 is 1.
pub fn eval_tagger(tagger: &TopDownModel, tasks: &[TaskInstance]) -> Result<TaggerMetrics> {
    let (mut tp, mut fp, mut fn_, mut correct, mut total) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for inst in tasks {
        let labels = inst
            .labels
            .as_ref()
            .ok_or_else(|| Error::Task("tagger evaluation needs labels".into()))?;
        let weights = tagger.importance_weights(&inst.source)?;
        for (&z, &y) in weights.as_slice().iter().zip(labels.as_slice()) {
            let pred = z >= 0.0;
            let gold = y == 1;
            match (pred, gold) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
            correct += usize::from(pred == gold);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Usage("tagger evaluation needs at least one token".into()));
    }
    let precision = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if tp + fp + fn_ == 0 {
        1.0
    } else if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(TaggerMetrics {
        precision,
        recall,
        f1,
        token_acc: correct as f64 / total as f64,
    })
}

fn aborted(step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { op } => Error::TrainingAborted {
            step,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Shared loop: Adam on mean batch loss, periodic validation, best-metric
/// parameter retention.
fn run(
    model: &mut TopDownModel,
    task: &TaskSpec,
    cfg: &TrainConfig,
    hash: String,
    loss_fn: impl Fn(&TopDownModel, &Tape, &TaskInstance) -> Result<Var>,
    validate: impl Fn(&TopDownModel, &[TaskInstance]) -> Result<f64>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed);
    let mut data_rng = root.split_named("train-data");
    let dropout_root = root.split_named("dropout");
    let validation = task.sample(&mut root.split_named("validation"), cfg.eval_size)?;
    let mut adam = Adam::new(model.params(), cfg.adam);
    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.steps),
        evals: Vec::new(),
        best_step: 0,
        final_metric: None,
        seed: cfg.seed,
        config_hash: hash,
    };
    let mut best: Option<(f64, Vec<crate::tensor::Tensor>)> = None;
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 1..=cfg.steps {
        model.params_mut().zero_grads();
        let mut total = 0.0;
        for b in 0..cfg.batch_size {
            let inst = task.generate(&mut data_rng)?;
            let grads = {
                let mut tape = Tape::new(model.params());
                if model.config().dropout > 0.0 {
                    tape = tape.with_dropout_rng(dropout_root.split(((step * cfg.batch_size) + b) as u64));
                }
                let loss = loss_fn(model, &tape, &inst).map_err(|e| aborted(step, e))?;
                let value = loss.value().item()?;
                if !value.is_finite() {
                    return Err(Error::TrainingAborted {
                        step,
                        reason: format!("loss is {value}"),
                    });
                }
                total += value;
                let scaled = tape.scale(&loss, scale)?;
                tape.backward(&scaled).map_err(|e| aborted(step, e))?
            };
            model.params_mut().accumulate(&grads);
        }
        adam.step(model.params_mut()).map_err(|e| aborted(step, e))?;
        report.losses.push(total * scale);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let metric = validate(model, &validation)?;
            report.evals.push(EvalPoint { step, metric });
            if best.as_ref().map_or(true, |(m, _)| metric > *m) {
                best = Some((metric, model.params().snapshot()));
                report.best_step = step;
                report.final_metric = Some(metric);
            }
            if cfg.stop_at.is_some_and(|target| metric >= target) {
                break;
            }
        }
    }
    if let Some((_, snapshot)) = best {
        model.params_mut().restore(&snapshot)?;
    }
    model.params_mut().zero_grads();
    Ok(report)
}

/// Trains a sequence-to-sequence model on draws from `task`, keeping the
/// parameters with the best validation token accuracy. An `ada` model needs
/// `tagger`; the summarizer of the importance pipeline is trained with
/// `oracle_ada` instead.
pub fn train(
    model: &mut TopDownModel,
    task: &TaskSpec,
    cfg: &TrainConfig,
    tagger: Option<&TopDownModel>,
) -> Result<TrainReport> {
    let hash = config_hash(model.config(), task, cfg, "seq2seq");
    run(
        model,
        task,
        cfg,
        hash,
        |m, tape, inst| {
            let pooling = pooling_inputs(m, inst, tagger)?;
            m.sequence_loss(tape, &inst.source, &inst.target, &pooling)
        },
        |m, val| Ok(eval_accuracy(m, val, Strategy::Greedy, tagger)?.token_acc),
    )
}

/// Trains an importance tagger (encoder plus per-token sigmoid head) with
/// binary cross-entropy on labeled instances. The tagger's own segments use
/// average pooling.
pub fn train_tagger(config: &ModelConfig, task: &TaskSpec, cfg: &TrainConfig) -> Result<(TopDownModel, TrainReport)> {
    let mut config = config.clone();
    config.pooling_mode = PoolingMode::Avg;
    let mut tagger = TopDownModel::new_tagger(config, cfg.seed)?;
    let hash = config_hash(tagger.config(), task, cfg, "tagger");
    let report = run(
        &mut tagger,
        task,
        cfg,
        hash,
        |m, tape, inst| {
            let labels = inst
                .labels
                .as_ref()
                .ok_or_else(|| Error::Task("tagger training needs labels".into()))?;
            let logits = m.tag_logits(tape, &inst.source, &mut OpCounter::new())?;
            tape.bce_with_logits(&logits, &labels.to_f64())
        },
        |m, val| Ok(eval_tagger(m, val)?.f1),
    )?;
    Ok((tagger, report))
}
