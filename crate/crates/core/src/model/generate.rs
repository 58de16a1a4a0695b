use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{PoolingInputs, TokenStates, TopDownModel, BOS_ID};
use crate::attention::OpCounter;
use crate::error::{Error, Result};
use crate::tape::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(Strategy::Greedy);
        }
        let width = s
            .strip_prefix("beam")
            .map(|rest| rest.trim_start_matches([':', '=', '(']).trim_end_matches(')'))
            .and_then(|w| w.parse::<usize>().ok())
            .filter(|&w| w > 0);
        width
            .map(Strategy::Beam)
            .ok_or_else(|| Error::Config(format!("unknown decoding strategy {s:?} (greedy or beam:<width>)")))
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
    done: bool,
}

impl Hypothesis {
    fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }
}

/// Higher normalized score first, then lexicographically smaller tokens.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.tokens.cmp(&b.tokens))
}

impl TopDownModel {
    fn next_logits(&self, tape: &Tape, generated: &[usize], enc: &TokenStates) -> Result<Vec<f64>> {
        let mut prefix = Vec::with_capacity(generated.len() + 1);
        prefix.push(BOS_ID);
        prefix.extend_from_slice(generated);
        let logits = self.decode(tape, &prefix, enc, &mut OpCounter::new())?;
        let last = logits.value().rows() - 1;
        Ok(logits.value().row(last).to_vec())
    }

    /// Decodes a continuation of at most `max_len` tokens. The output ends
    /// with `eos_id` when the model emits it.
    pub fn generate(
        &self,
        source: &[usize],
        pooling: &PoolingInputs,
        strategy: Strategy,
        max_len: usize,
        eos_id: usize,
    ) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::Usage("max_len must be at least 1".into()));
        }
        let max_len = max_len.min(self.config.max_positions);
        let tape = Tape::inference(&self.params);
        let enc = self.encode(&tape, source, pooling, &mut OpCounter::new())?;
        match strategy {
            Strategy::Greedy => {
                let mut out = Vec::new();
                while out.len() < max_len {
                    let next = argmax(&self.next_logits(&tape, &out, &enc)?);
                    out.push(next);
                    if next == eos_id {
                        break;
                    }
                }
                Ok(out)
            }
            Strategy::Beam(width) => self.beam_search(&tape, &enc, width, max_len, eos_id),
        }
    }

    fn beam_search(&self, tape: &Tape, enc: &TokenStates, width: usize, max_len: usize, eos_id: usize) -> Result<Vec<usize>> {
        if width == 0 {
            return Err(Error::Config("beam width must be positive".into()));
        }
        let mut beams = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, done: false }];
        for _ in 0..max_len {
            if beams.iter().all(|h| h.done) {
                break;
            }
            let mut candidates = Vec::new();
            for hyp in &beams {
                if hyp.done {
                    candidates.push(hyp.clone());
                    continue;
                }
                let lp = log_softmax(&self.next_logits(tape, &hyp.tokens, enc)?);
                let mut order: Vec<usize> = (0..lp.len()).collect();
                order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                for &tok in order.iter().take(width) {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok);
                    candidates.push(Hypothesis { tokens, log_prob: hyp.log_prob + lp[tok], done: tok == eos_id });
                }
            }
            candidates.sort_by(rank);
            candidates.truncate(width);
            beams = candidates;
        }
        beams.sort_by(rank);
        Ok(beams.swap_remove(0).tokens)
    }
}
