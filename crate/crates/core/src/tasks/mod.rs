//! Synthetic tasks, the training loop and importance-tagger training.

mod train;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use train::{
    eval_accuracy, eval_tagger, pooling_inputs, train, train_tagger, EvalMetrics, TaggerMetrics, TrainConfig,
    TrainReport,
};

use crate::error::{Error, Result};
use crate::model::FIRST_FREE_ID;
use crate::pooling::ImportanceLabels;
use crate::rng::RngStream;

/// Marks the key in a keyvalue source.
pub const KEY_ID: usize = FIRST_FREE_ID;
/// Final token of a keyvalue source.
pub const QUERY_ID: usize = FIRST_FREE_ID + 1;
/// First value id of a keyvalue task.
pub const FIRST_VALUE_ID: usize = FIRST_FREE_ID + 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "labels_serde")]
    pub labels: Option<ImportanceLabels>,
}

mod labels_serde {
    use super::ImportanceLabels;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(labels: &Option<ImportanceLabels>, s: S) -> Result<S::Ok, S::Error> {
        labels.as_ref().map(|l| l.as_slice().to_vec()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<ImportanceLabels>, D::Error> {
        Option::<Vec<u8>>::deserialize(d)?
            .map(|v| ImportanceLabels::new(v).map_err(serde::de::Error::custom))
            .transpose()
    }
}

/// Random task-token ids (pad, bos and eos are never drawn).
fn draw_tokens(rng: &mut RngStream, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.range_inclusive(lo, hi - 1)).collect()
}

/// Copy task: the target repeats the source.
pub fn gen_copy_task(rng: &mut RngStream, min_len: usize, max_len: usize, vocab: usize) -> Result<TaskInstance> {
    if vocab <= FIRST_FREE_ID {
        return Err(Error::Task(format!(
            "copy task needs vocab >= {} (got {vocab})",
            FIRST_FREE_ID + 1
        )));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::Task(format!("bad copy length range {min_len}..={max_len}")));
    }
    let n = rng.range_inclusive(min_len, max_len);
    let source = draw_tokens(rng, n, FIRST_FREE_ID, vocab);
    Ok(TaskInstance {
        target: source.clone(),
        source,
        labels: None,
    })
}

/// Keyvalue task: `[KEY, v, filler.., QUERY]` with target `[v]`. The value
/// sits `n - 2` positions before QUERY, which must exceed `n1 * floor(w/2)`
/// so that it lies outside the receptive field of `n1` local layers of
/// window `w`.
pub fn gen_keyvalue_task(
    rng: &mut RngStream,
    n: usize,
    w: usize,
    n1: usize,
    n_values: usize,
    vocab: usize,
) -> Result<TaskInstance> {
    let first_filler = FIRST_VALUE_ID + n_values;
    if n_values == 0 || vocab <= first_filler {
        return Err(Error::Task(format!(
            "keyvalue task with {n_values} values needs vocab > {first_filler} (got {vocab})"
        )));
    }
    let radius = n1 * (w / 2);
    if n < radius + 3 {
        return Err(Error::Task(format!(
            "keyvalue length {n} cannot place the value beyond distance {radius}"
        )));
    }
    let value = FIRST_VALUE_ID + rng.below(n_values);
    let mut source = draw_tokens(rng, n, first_filler, vocab);
    source[0] = KEY_ID;
    source[1] = value;
    source[n - 1] = QUERY_ID;
    let mut labels = vec![0u8; n];
    labels[0] = 1;
    labels[1] = 1;
    Ok(TaskInstance {
        source,
        target: vec![value],
        labels: Some(ImportanceLabels::new(labels)?),
    })
}

/// Keyvalue instances of every length `8, 16, 24, ..` that can hold the value
/// outside the receptive field, up to and including `n`, drawn uniformly.
/// Short documents give the top-down path an easy signal early in training.
pub fn keyvalue_curriculum(n: usize, w: usize, n1: usize, n_values: usize, vocab: usize) -> Result<TaskSpec> {
    let shortest = n1 * (w / 2) + 3;
    if n < shortest {
        return Err(Error::Task(format!("keyvalue length {n} cannot place the value beyond distance {}", shortest - 3)));
    }
    let mut lengths: Vec<usize> = (1..).map(|i| 8 * i).skip_while(|&l| l < shortest).take_while(|&l| l < n).collect();
    lengths.push(n);
    Ok(TaskSpec::Mixture {
        tasks: lengths.into_iter().map(|n| TaskSpec::KeyValue { n, w, n1, n_values, vocab }).collect(),
    })
}

/// Tagging rule: every occurrence of `marked` is important.
pub fn gen_mark_task(
    rng: &mut RngStream,
    min_len: usize,
    max_len: usize,
    vocab: usize,
    marked: usize,
) -> Result<TaskInstance> {
    if !(FIRST_FREE_ID..vocab).contains(&marked) {
        return Err(Error::Task(format!(
            "marked id {marked} outside task ids {FIRST_FREE_ID}..{vocab}"
        )));
    }
    let copy = gen_copy_task(rng, min_len, max_len, vocab)?;
    let labels = copy.source.iter().map(|&t| u8::from(t == marked)).collect();
    Ok(TaskInstance {
        labels: Some(ImportanceLabels::new(labels)?),
        ..copy
    })
}

/// A source of training and evaluation instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskSpec {
    Copy {
        min_len: usize,
        max_len: usize,
        vocab: usize,
    },
    KeyValue {
        n: usize,
        w: usize,
        n1: usize,
        n_values: usize,
        vocab: usize,
    },
    Mark {
        min_len: usize,
        max_len: usize,
        vocab: usize,
        marked: usize,
    },
    /// Uniform draws from a fixed collection.
    Fixed { instances: Vec<TaskInstance> },
    /// Each draw picks one of the component tasks uniformly.
    Mixture { tasks: Vec<TaskSpec> },
}

impl TaskSpec {
    pub fn generate(&self, rng: &mut RngStream) -> Result<TaskInstance> {
        match self {
            TaskSpec::Copy {
                min_len,
                max_len,
                vocab,
            } => gen_copy_task(rng, *min_len, *max_len, *vocab),
            TaskSpec::KeyValue {
                n,
                w,
                n1,
                n_values,
                vocab,
            } => gen_keyvalue_task(rng, *n, *w, *n1, *n_values, *vocab),
            TaskSpec::Mark {
                min_len,
                max_len,
                vocab,
                marked,
            } => gen_mark_task(rng, *min_len, *max_len, *vocab, *marked),
            TaskSpec::Fixed { instances } => {
                if instances.is_empty() {
                    return Err(Error::Task("empty fixed task set".into()));
                }
                Ok(instances[rng.below(instances.len())].clone())
            }
            TaskSpec::Mixture { tasks } => {
                if tasks.is_empty() {
                    return Err(Error::Task("empty task mixture".into()));
                }
                tasks[rng.below(tasks.len())].generate(rng)
            }
        }
    }

    pub fn sample(&self, rng: &mut RngStream, count: usize) -> Result<Vec<TaskInstance>> {
        (0..count).map(|_| self.generate(rng)).collect()
    }

    /// Longest target the task produces, for bounding generation.
    pub fn max_target_len(&self) -> usize {
        match self {
            TaskSpec::Copy { max_len, .. } | TaskSpec::Mark { max_len, .. } => *max_len,
            TaskSpec::KeyValue { .. } => 1,
            TaskSpec::Fixed { instances } => instances.iter().map(|i| i.target.len()).max().unwrap_or(1),
            TaskSpec::Mixture { tasks } => tasks.iter().map(TaskSpec::max_target_len).max().unwrap_or(1),
        }
    }
}

pub fn write_jsonl(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TaskInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: TaskInstance =
            serde_json::from_str(&line).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(inst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_targets_equal_sources() {
        let mut rng = RngStream::new(1);
        for _ in 0..10_000 {
            let t = gen_copy_task(&mut rng, 1, 12, 10).unwrap();
            assert_eq!(t.source, t.target);
            assert!((1..=12).contains(&t.source.len()));
            assert!(t.source.iter().all(|&x| (FIRST_FREE_ID..10).contains(&x)));
        }
        let t = gen_copy_task(&mut rng, 1, 1, 4).unwrap();
        assert_eq!((t.source.len(), t.target.len()), (1, 1));
        assert!(gen_copy_task(&mut rng, 1, 3, 3).is_err());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = TaskSpec::KeyValue {
            n: 64,
            w: 8,
            n1: 2,
            n_values: 16,
            vocab: 32,
        };
        let a = spec.sample(&mut RngStream::new(5), 50).unwrap();
        let b = spec.sample(&mut RngStream::new(5), 50).unwrap();
        let c = spec.sample(&mut RngStream::new(6), 50).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn keyvalue_places_value_outside_receptive_field() {
        let mut rng = RngStream::new(2);
        for n in [11, 64] {
            for _ in 0..1_000 {
                let t = gen_keyvalue_task(&mut rng, n, 8, 2, 16, 32).unwrap();
                assert_eq!(t.source.len(), n);
                assert_eq!(t.source[n - 1], QUERY_ID);
                let key = t.source.iter().position(|&x| x == KEY_ID).unwrap();
                assert_eq!(key, 0);
                let v = t.source[key + 1];
                assert_eq!(t.target, vec![v]);
                assert!((FIRST_VALUE_ID..FIRST_VALUE_ID + 16).contains(&v));
                assert_eq!(t.source.iter().filter(|&&x| x == KEY_ID || x == QUERY_ID).count(), 2);
                assert_eq!(
                    t.source
                        .iter()
                        .filter(|&&x| (FIRST_VALUE_ID..FIRST_VALUE_ID + 16).contains(&x))
                        .count(),
                    1
                );
                let labels = t.labels.unwrap();
                assert_eq!(labels.count_ones(), 2);
                assert_eq!((labels.as_slice()[0], labels.as_slice()[1]), (1, 1));
            }
        }
        // Radius N1 * floor(w/2) = 8; in the shortest legal document the
        // value at 1 is 9 positions before QUERY at 10, with only fillers between.
        let t = gen_keyvalue_task(&mut rng, 11, 8, 2, 16, 32).unwrap();
        assert!(t.source[2..10].iter().all(|&x| x >= FIRST_VALUE_ID + 16));
    }

    #[test]
    fn mixture_draws_from_every_component() {
        let spec = TaskSpec::Mixture {
            tasks: [12, 20, 28].map(|n| TaskSpec::KeyValue { n, w: 8, n1: 2, n_values: 16, vocab: 32 }).to_vec(),
        };
        let mut seen = std::collections::BTreeMap::new();
        for inst in spec.sample(&mut RngStream::new(4), 300).unwrap() {
            *seen.entry(inst.source.len()).or_insert(0) += 1;
        }
        assert_eq!(seen.keys().copied().collect::<Vec<_>>(), vec![12, 20, 28]);
        assert!(seen.values().all(|&c| c > 60), "{seen:?}");
        assert_eq!(spec.max_target_len(), 1);
        assert!(TaskSpec::Mixture { tasks: vec![] }.generate(&mut RngStream::new(0)).is_err());
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<TaskSpec>(&json).unwrap(), spec);
    }

    #[test]
    fn curriculum_lengths() {
        let lengths = |spec: TaskSpec| match spec {
            TaskSpec::Mixture { tasks } => tasks
                .iter()
                .map(|t| match t {
                    TaskSpec::KeyValue { n, .. } => *n,
                    _ => unreachable!(),
                })
                .collect::<Vec<_>>(),
            _ => unreachable!(),
        };
        assert_eq!(lengths(keyvalue_curriculum(64, 8, 2, 16, 32).unwrap()), vec![16, 24, 32, 40, 48, 56, 64]);
        assert_eq!(lengths(keyvalue_curriculum(20, 8, 2, 16, 32).unwrap()), vec![16, 20]);
        assert_eq!(lengths(keyvalue_curriculum(11, 8, 2, 16, 32).unwrap()), vec![11]);
        assert!(keyvalue_curriculum(10, 8, 2, 16, 32).is_err());
    }

    #[test]
    fn keyvalue_rejects_short_documents() {
        let mut rng = RngStream::new(3);
        assert!(matches!(
            gen_keyvalue_task(&mut rng, 10, 8, 2, 16, 32),
            Err(Error::Task(_))
        ));
        assert!(gen_keyvalue_task(&mut rng, 11, 8, 2, 16, 32).is_ok());
        assert!(gen_keyvalue_task(&mut rng, 64, 8, 2, 16, 21).is_err());
    }

    #[test]
    fn mark_task_labels_the_marked_id() {
        let mut rng = RngStream::new(4);
        for _ in 0..200 {
            let t = gen_mark_task(&mut rng, 5, 20, 12, 7).unwrap();
            let labels = t.labels.unwrap();
            for (tok, l) in t.source.iter().zip(labels.as_slice()) {
                assert_eq!(*l == 1, *tok == 7);
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        let spec = TaskSpec::KeyValue {
            n: 20,
            w: 4,
            n1: 2,
            n_values: 4,
            vocab: 16,
        };
        let mut items = spec.sample(&mut RngStream::new(1), 5).unwrap();
        items.push(gen_copy_task(&mut RngStream::new(2), 2, 4, 8).unwrap());
        write_jsonl(&path, &items).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"labels\":["));
        assert!(!text.lines().last().unwrap().contains("labels"));
        assert_eq!(read_jsonl(&path).unwrap(), items);
    }

    #[test]
    fn spec_serializes_with_task_tag() {
        let spec = TaskSpec::Copy {
            min_len: 1,
            max_len: 4,
            vocab: 8,
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"task\":\"copy\""));
        assert_eq!(serde_json::from_str::<TaskSpec>(&json).unwrap(), spec);
    }
}
