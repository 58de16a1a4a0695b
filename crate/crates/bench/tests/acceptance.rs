//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero if any failed.
//!
//! Numeric arguments select criteria: `cargo test --test acceptance -- 7 9`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::process::ExitCode;
use std::rc::Rc;
use std::time::Instant;

use topdown_bench::ablate::{ablate, all_modes, AblateConfig};
use topdown_bench::bench::{bench_cell, BenchConfig, BenchRecord, Variant};
use topdown_bench::rouge::{rouge, rouge_l, rouge_n, RougeScore};
use topdown_core::attention::{
    build_mask, local_self_attention, multi_head_attention, AttentionParams, MaskSpec, OpCounter, Window,
};
use topdown_core::gradcheck::{check_params, GradCheckOptions};
use topdown_core::model::{
    load_checkpoint, save_checkpoint, DecoderMemory, ModelConfig, PoolingInputs, PoolingMode, Strategy, TopDownMode,
    TopDownModel, FIRST_FREE_ID,
};
use topdown_core::optim::AdamConfig;
use topdown_core::param::ParamStore;
use topdown_core::pooling::{
    build_importance_labels, pool_average, pool_weighted, ImportanceWeights, SegmentationSpec, Stopwords,
};
use topdown_core::rng::RngStream;
use topdown_core::tape::Tape;
use topdown_core::tasks::{
    eval_accuracy, eval_tagger, keyvalue_curriculum, train, train_tagger, TaskSpec, TrainConfig,
};
use topdown_core::Tensor;

type Outcome = Result<String, String>;

fn check(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("oracle equivalence", oracle_equivalence),
        ("complexity ledger", complexity_ledger),
        ("memory sub-quadratic", memory_ratio),
        ("gradient integrity", gradient_integrity),
        ("locality/globality separation", locality_separation),
        ("task separation", task_separation),
        ("pooling fidelity", pooling_fidelity),
        ("tagger pipeline", tagger_pipeline),
        ("rouge correctness", rouge_correctness),
        ("determinism and persistence", determinism),
        ("ablation harness", ablation_harness),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {tag} {name} ({secs:.1}s): {detail}");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn random_tensor(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn random_tokens(n: usize, vocab: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..n)
        .map(|_| FIRST_FREE_ID + rng.below(vocab - FIRST_FREE_ID))
        .collect()
}

fn value(store: &ParamStore, id: topdown_core::param::ParamId) -> Tensor {
    store.get(id).value().clone()
}

/// `x W + b` by scalar loops.
fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (n, din) = x.dims2().unwrap();
    let dout = w.shape()[1];
    (0..n)
        .map(|i| {
            (0..dout)
                .map(|o| b.data()[o] + (0..din).map(|c| x.get(i, c) * w.get(c, o)).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Dense multi-head attention: every pair is scored, inadmissible pairs are
/// dropped before the softmax.
fn dense_attention(x: &Tensor, store: &ParamStore, p: &AttentionParams, heads: usize, radius: usize) -> Tensor {
    let q = affine(x, &value(store, p.q.w), &value(store, p.q.b.unwrap()));
    let k = affine(x, &value(store, p.k.w), &value(store, p.k.b.unwrap()));
    let v = affine(x, &value(store, p.v.w), &value(store, p.v.b.unwrap()));
    let (n, d) = x.dims2().unwrap();
    let dh = d / heads;
    let mut ctx = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let admitted: Vec<usize> = (0..n).filter(|&j| i.abs_diff(j) <= radius).collect();
            let max = admitted.iter().map(|&j| scores[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = admitted.iter().map(|&j| (scores[j] - max).exp()).sum();
            for &j in &admitted {
                let a = (scores[j] - max).exp() / z;
                for c in cols.clone() {
                    ctx[i][c] += a * v[j][c];
                }
            }
        }
    }
    let ctx = Tensor::from_rows(&ctx).unwrap();
    Tensor::from_rows(&affine(&ctx, &value(store, p.o.w), &value(store, p.o.b.unwrap()))).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let mut rng = RngStream::new(101);
    let (mut worst, mut saturated) = (0.0f64, 0);
    for case in 0..100 {
        let n = rng.range_inclusive(1, 64);
        let heads = [1, 2, 4][rng.below(3)];
        let d = heads * rng.range_inclusive(1, 4);
        let w = 2 * rng.range_inclusive(1, n + 1);
        let window = Window::new(w).unwrap();
        let mut store = ParamStore::new();
        let params = AttentionParams::init(&mut store, "attn", d, &mut rng);
        let x = random_tensor(n, d, &mut rng);
        let tape = Tape::inference(&store);
        let xv = tape.leaf(x.clone());
        let band = local_self_attention(&tape, &xv, &params, heads, window, &mut OpCounter::new()).unwrap();
        let diff = band
            .value()
            .max_abs_diff(&dense_attention(&x, &store, &params, heads, w / 2));
        worst = worst.max(diff);
        if diff > 1e-10 {
            return Err(format!("case {case} (N={n}, w={w}, heads={heads}): max diff {diff:e}"));
        }
        if w >= 2 * (n - 1) {
            saturated += 1;
            let full = multi_head_attention(
                &tape,
                &xv,
                &xv,
                &xv,
                &params,
                heads,
                &MaskSpec::Full,
                &mut OpCounter::new(),
            )
            .unwrap();
            let same_mask =
                build_mask(&MaskSpec::Band(window), n, n).unwrap() == build_mask(&MaskSpec::Full, n, n).unwrap();
            if !same_mask || !band.value().bit_eq(full.value()) {
                return Err(format!(
                    "case {case} (N={n}, w={w}): saturated band differs from full attention"
                ));
            }
        }
    }
    check(
        saturated > 0,
        format!("100 configs, max diff {worst:.2e}, {saturated} saturated bit-identical"),
    )
}

/// Admitted pairs counted one by one.
fn brute_band(n: usize, w: Window) -> u64 {
    let mut count = 0;
    for i in 0..n {
        for j in 0..n {
            if w.half_width().map_or(true, |h| i.abs_diff(j) <= h) {
                count += 1;
            }
        }
    }
    count
}

fn segment_count(n: usize, k: usize, d_s: usize) -> u64 {
    // Windows start at 0, d_s, 2 d_s, ... until one reaches the last token.
    let mut m = 1;
    let mut start = 0;
    while start + k < n {
        start += d_s;
        m += 1;
    }
    m
}

fn complexity_ledger() -> Outcome {
    // Long-document segment geometry at a narrow width.
    let base = ModelConfig {
        d_model: 16,
        n_heads: 2,
        ..ModelConfig::paper()
    };
    let (n1, n2, n3) = (base.n1 as u64, base.n2 as u64, base.n3 as u64);
    let heads = base.n_heads as u64;
    let ns = [128usize, 256, 512, 1024];
    let config = BenchConfig::new(base.clone(), ns.to_vec(), vec![]);
    let mut measured: HashMap<(Variant, usize, usize), u64> = HashMap::new();
    let evals = |r: &BenchRecord| {
        r.score_evals
            .ok_or_else(|| format!("{} N={} failed: {}", r.variant, r.n, r.status))
    };
    for &n in &ns {
        let nn = n as u64;
        for w in [8usize, 32, 64] {
            let b = brute_band(n, Window::Finite(w));
            let m = segment_count(n, base.k, base.d_s);
            for (variant, per_head) in [
                (Variant::TopdownCross, n1 * b + n2 * m * m + n3 * (b + nn * m)),
                (Variant::TopdownConcat, n1 * b + n2 * m * m + n3 * b),
                (Variant::LocalOnly, n1 * b),
            ] {
                let got = evals(&bench_cell(&config, variant, n, Window::Finite(w)))?;
                if got != heads * per_head {
                    return Err(format!(
                        "{variant} N={n} w={w}: counted {got}, ledger {}",
                        heads * per_head
                    ));
                }
                measured.insert((variant, n, w), got);
            }
        }
        let got = evals(&bench_cell(&config, Variant::Full, n, Window::FULL))?;
        let want = heads * (n1 + n3) * nn * nn;
        if got != want {
            return Err(format!("full N={n}: counted {got}, expected {want}"));
        }
        measured.insert((Variant::Full, n, 0), got);
    }
    let mut lines = Vec::new();
    let mut ok = true;
    for pair in ns.windows(2) {
        let full = measured[&(Variant::Full, pair[1], 0)] as f64 / measured[&(Variant::Full, pair[0], 0)] as f64;
        ok &= full == 4.0;
        for w in [8usize, 32, 64] {
            let r = measured[&(Variant::TopdownCross, pair[1], w)] as f64
                / measured[&(Variant::TopdownCross, pair[0], w)] as f64;
            // The N*M cross term is quadratic in N, so the bound is asserted
            // only where the band term dominates.
            if w >= 32 {
                ok &= r < 2.6;
            }
            lines.push(format!("{}->{} w={w} x{r:.3}", pair[0], pair[1]));
        }
    }
    check(
        ok,
        format!("36 cells exact, full x4.000; cross doublings [{}]", lines.join(", ")),
    )
}

fn memory_ratio() -> Outcome {
    let config = BenchConfig::new(ModelConfig::desk(), vec![1024], vec![Window::Finite(64)]);
    let cross = bench_cell(&config, Variant::TopdownCross, 1024, Window::Finite(64));
    let full = bench_cell(&config, Variant::Full, 1024, Window::FULL);
    let (Some(c), Some(f)) = (cross.peak_bytes, full.peak_bytes) else {
        return Err(format!("bench failed: {} / {}", cross.status, full.status));
    };
    let ratio = c as f64 / f as f64;
    check(ratio < 0.25, format!("cross {c} B, full {f} B, ratio {ratio:.3}"))
}

fn gradient_integrity() -> Outcome {
    let mut model = TopDownModel::new(ModelConfig::desk(), 4).unwrap();
    let mut rng = RngStream::new(44);
    let source = random_tokens(12, 32, &mut rng);
    let target = random_tokens(5, 32, &mut rng);
    let opts = GradCheckOptions {
        sample: Some(20),
        ..GradCheckOptions::default()
    };
    let report = check_params(&mut model, &opts, &mut rng, |m, tape| {
        m.sequence_loss(tape, &source, &target, &PoolingInputs::none())
    })
    .map_err(|e| e.to_string())?;
    check(
        report.max_rel_err <= 1e-4,
        format!(
            "{} coordinates, max rel err {:.2e}, worst {:?}",
            report.checked, report.max_rel_err, report.worst
        ),
    )
}

fn encode_row(model: &TopDownModel, tokens: &[usize], row: usize) -> Vec<f64> {
    let tape = Tape::inference(model.params());
    let out = model
        .encode(&tape, tokens, &PoolingInputs::none(), &mut OpCounter::new())
        .unwrap();
    out.states.value().row(row).to_vec()
}

fn flip(tokens: &mut [usize], at: usize) {
    tokens[at] = if tokens[at] == FIRST_FREE_ID {
        FIRST_FREE_ID + 1
    } else {
        FIRST_FREE_ID
    };
}

fn locality_separation() -> Outcome {
    let n = 64;
    let mut cfg = ModelConfig {
        max_positions: n,
        ..ModelConfig::desk()
    };
    cfg.topdown_mode = TopDownMode::None;
    let radius = cfg.n1 * cfg.w.half_width().unwrap();
    let model = TopDownModel::new(cfg.clone(), 5).unwrap();
    let base = random_tokens(n, cfg.vocab_size, &mut RngStream::new(55));
    let mut probes = 0;
    for q in [0, 17, 40, 63] {
        let reference = encode_row(&model, &base, q);
        for j in (0..n).filter(|&j| j.abs_diff(q) > radius) {
            let mut t = base.clone();
            flip(&mut t, j);
            probes += 1;
            if encode_row(&model, &t, q) != reference {
                return Err(format!(
                    "none mode: position {q} moved when token {j} changed (radius {radius})"
                ));
            }
        }
    }
    cfg.topdown_mode = TopDownMode::Cross;
    let mut sensitivities = Vec::new();
    for seed in 0..5 {
        let model = TopDownModel::new(cfg.clone(), seed).unwrap();
        let base = random_tokens(n, cfg.vocab_size, &mut RngStream::new(500 + seed));
        let mut moved = base.clone();
        flip(&mut moved, 0);
        let (a, b) = (encode_row(&model, &base, n - 1), encode_row(&model, &moved, n - 1));
        sensitivities.push(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    let hits = sensitivities.iter().filter(|&&s| s > 1e-9).count();
    check(
        hits >= 4,
        format!(
            "none: {probes} far perturbations bit-invariant; cross: {hits}/5 seeds sensitive at distance {} ({})",
            n - 1,
            sensitivities
                .iter()
                .map(|s| format!("{s:.1e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

const KV_N: usize = 64;
const KV_W: usize = 8;
const KV_N1: usize = 2;
const KV_VALUES: usize = 16;
const KV_VOCAB: usize = 32;

fn keyvalue_test() -> TaskSpec {
    TaskSpec::KeyValue {
        n: KV_N,
        w: KV_W,
        n1: KV_N1,
        n_values: KV_VALUES,
        vocab: KV_VOCAB,
    }
}

/// Desk model for the keyvalue task. The decoder reads only the final encoder
/// state, so the value must travel to the query position inside the encoder.
fn keyvalue_model(mode: TopDownMode, pooling: PoolingMode) -> ModelConfig {
    ModelConfig {
        max_positions: KV_N,
        topdown_mode: mode,
        pooling_mode: pooling,
        decoder_memory: DecoderMemory::Last,
        ..ModelConfig::desk()
    }
}

fn keyvalue_budget(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        adam: AdamConfig {
            lr: 3e-4,
            ..AdamConfig::default()
        },
        eval_every: 250,
        eval_size: 128,
        seed,
        stop_at: Some(1.0),
    }
}

fn keyvalue_accuracy(model: &TopDownModel, tagger: Option<&TopDownModel>) -> f64 {
    let test = keyvalue_test()
        .sample(&mut RngStream::new(2024).split_named("acceptance-test"), 1024)
        .unwrap();
    eval_accuracy(model, &test, Strategy::Greedy, tagger).unwrap().token_acc
}

#[derive(Clone, Copy, Debug)]
struct KvRun {
    /// Held-out accuracy after the scripted budget.
    acc: f64,
    steps: usize,
    /// Validation accuracy at step 500, or 1.0 if training stopped before.
    early: f64,
}

thread_local! {
    static KV_RUNS: RefCell<Vec<((TopDownMode, PoolingMode, u64), KvRun)>> = const { RefCell::new(Vec::new()) };
    static KV_TAGGER: RefCell<Option<Rc<TopDownModel>>> = const { RefCell::new(None) };
}

fn tagger_budget() -> TrainConfig {
    TrainConfig {
        steps: 600,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        eval_every: 100,
        eval_size: 64,
        stop_at: Some(1.0),
        ..TrainConfig::default()
    }
}

/// Tagger trained on the keyvalue importance labels (KEY and value positions).
fn keyvalue_tagger() -> Rc<TopDownModel> {
    KV_TAGGER.with_borrow_mut(|slot| {
        slot.get_or_insert_with(|| {
            let curriculum = keyvalue_curriculum(KV_N, KV_W, KV_N1, KV_VALUES, KV_VOCAB).unwrap();
            let cfg = ModelConfig {
                max_positions: KV_N,
                ..ModelConfig::desk()
            };
            Rc::new(train_tagger(&cfg, &curriculum, &tagger_budget()).unwrap().0)
        })
        .clone()
    })
}

/// One keyvalue model trained with the scripted budget, shared between
/// criteria.
fn keyvalue_run(mode: TopDownMode, pooling: PoolingMode, seed: u64) -> KvRun {
    let key = (mode, pooling, seed);
    if let Some(run) = KV_RUNS.with_borrow(|runs| runs.iter().find(|(k, _)| *k == key).map(|&(_, r)| r)) {
        return run;
    }
    let curriculum = keyvalue_curriculum(KV_N, KV_W, KV_N1, KV_VALUES, KV_VOCAB).unwrap();
    let tagger = (pooling == PoolingMode::Ada).then(keyvalue_tagger);
    let tagger = tagger.as_deref();
    let mut model = TopDownModel::new(keyvalue_model(mode, pooling), seed).unwrap();
    let report = train(&mut model, &curriculum, &keyvalue_budget(3000, seed), tagger).unwrap();
    let early = report
        .evals
        .iter()
        .filter(|e| e.step <= 500)
        .last()
        .map_or(0.0, |e| e.metric);
    let run = KvRun {
        acc: keyvalue_accuracy(&model, tagger),
        steps: report.losses.len(),
        early,
    };
    KV_RUNS.with_borrow_mut(|runs| runs.push((key, run)));
    run
}

fn task_separation() -> Outcome {
    let chance = 1.0 / KV_VALUES as f64;
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3 {
        for mode in [TopDownMode::Cross, TopDownMode::None] {
            let run = keyvalue_run(mode, PoolingMode::Avg, seed);
            ok &= match mode {
                TopDownMode::None => (run.acc - chance).abs() <= 0.05,
                _ => run.acc >= 0.90,
            };
            lines.push(format!("seed {seed} {mode:?} {:.3} ({} steps)", run.acc, run.steps));
        }
    }
    check(ok, format!("chance {chance:.4}; {}", lines.join(", ")))
}

/// Scalar-loop segment pooling: window `j` starts at `j * stride`, covers
/// `kernel` slots, and slots past the document hold zero vectors.
fn pool_oracle(e: &Tensor, weights: Option<&[f64]>, kernel: usize, stride: usize) -> Vec<Vec<f64>> {
    let (n, d) = e.dims2().unwrap();
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let real: Vec<usize> = (start..(start + kernel).min(n)).collect();
        let mut row = vec![0.0; d];
        match weights {
            None => {
                for &i in &real {
                    for c in 0..d {
                        row[c] += e.get(i, c) / kernel as f64;
                    }
                }
            }
            Some(p) => {
                let max = real.iter().map(|&i| p[i]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = real.iter().map(|&i| (p[i] - max).exp()).sum();
                for &i in &real {
                    let a = (p[i] - max).exp() / z;
                    for c in 0..d {
                        row[c] += a * e.get(i, c);
                    }
                }
            }
        }
        out.push(row);
        if start + kernel >= n {
            return out;
        }
        start += stride;
    }
}

fn max_diff(a: &Tensor, b: &[Vec<f64>]) -> f64 {
    if a.rows() != b.len() {
        return f64::INFINITY;
    }
    (0..b.len())
        .flat_map(|j| a.row(j).iter().zip(&b[j]).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

fn pooling_fidelity() -> Outcome {
    let mut rng = RngStream::new(707);
    let (mut worst, mut padded, mut worst_const) = (0.0f64, 0, 0.0f64);
    for case in 0..1000 {
        let n = rng.range_inclusive(1, 60);
        let d = rng.range_inclusive(1, 6);
        let kernel = rng.range_inclusive(1, 12);
        let stride = rng.range_inclusive(1, kernel);
        let spec = SegmentationSpec::new(kernel, stride).unwrap();
        let e = random_tensor(n, d, &mut rng);
        let p: Vec<f64> = (0..n).map(|_| 3.0 * rng.normal()).collect();
        let avg = pool_average(&e, &spec).unwrap();
        let weighted = pool_weighted(&e, &ImportanceWeights::new(p.clone()).unwrap(), &spec).unwrap();
        let want_avg = pool_oracle(&e, None, kernel, stride);
        if want_avg
            .last()
            .map_or(false, |_| (want_avg.len() - 1) * stride + kernel > n)
        {
            padded += 1;
        }
        let diff = max_diff(&avg, &want_avg).max(max_diff(&weighted, &pool_oracle(&e, Some(&p), kernel, stride)));
        worst = worst.max(diff);
        if diff > 1e-12 {
            return Err(format!("case {case} (N={n}, k={kernel}, d_s={stride}): diff {diff:e}"));
        }
        // Constant weights: the plain mean of the real tokens in each window.
        let c = rng.normal();
        let flat = pool_weighted(&e, &ImportanceWeights::new(vec![c; n]).unwrap(), &spec).unwrap();
        let means: Vec<Vec<f64>> = (0..want_avg.len())
            .map(|j| {
                let real: Vec<usize> = (j * stride..(j * stride + kernel).min(n)).collect();
                (0..d)
                    .map(|col| real.iter().map(|&i| e.get(i, col)).sum::<f64>() / real.len() as f64)
                    .collect()
            })
            .collect();
        let diff = max_diff(&flat, &means);
        worst_const = worst_const.max(diff);
        if diff > 1e-12 {
            return Err(format!(
                "case {case}: constant weights differ from the window mean by {diff:e}"
            ));
        }
    }
    check(
        padded > 0,
        format!(
            "1000 cases ({padded} with padded tails), max diff {worst:.1e}; constant-weight max diff {worst_const:.1e}"
        ),
    )
}

fn tagger_pipeline() -> Outcome {
    // Hand-traced labels. "cats" and "dogs" lose their plural s; "Running"
    // stems to "runn", which is not "run"; "and" is a stopword.
    let cases: [(&[&str], &[&str], Stopwords, &[u8]); 4] = [
        (
            &["the", "cats", "ran"],
            &["cat", "runs"],
            Stopwords::from_words(["the"]),
            &[0, 1, 0],
        ),
        (
            &["Running", "dogs", "and", "cats", "sleep"],
            &["runs", "dog", "cat", "and"],
            Stopwords::default(),
            &[0, 1, 0, 1, 0],
        ),
        (&["Cats", "CAT", "cat"], &["cat"], Stopwords::empty(), &[1, 1, 1]),
        (&["nothing", "matches"], &[], Stopwords::default(), &[0, 0]),
    ];
    for (doc, reference, stop, want) in &cases {
        let got = build_importance_labels(doc, reference, stop);
        if got.as_slice() != *want {
            return Err(format!(
                "labels for {doc:?} vs {reference:?}: got {:?}, want {want:?}",
                got.as_slice()
            ));
        }
    }

    // A tagger learns the rule "token 7 is important".
    let mark = TaskSpec::Mark {
        min_len: 8,
        max_len: 32,
        vocab: 32,
        marked: 7,
    };
    let tagger_cfg = ModelConfig {
        max_positions: KV_N,
        ..ModelConfig::desk()
    };
    let (tagger, _) = train_tagger(&tagger_cfg, &mark, &tagger_budget()).map_err(|e| e.to_string())?;
    let held_out = mark
        .sample(&mut RngStream::new(31).split_named("acceptance-mark"), 512)
        .unwrap();
    let f1 = eval_tagger(&tagger, &held_out).unwrap().f1;
    if f1 < 0.99 {
        return Err(format!("mark-rule tagger F1 {f1:.4} < 0.99"));
    }

    // Pooling variants on keyvalue, each trained with the scripted budget.
    let kv_tagger = keyvalue_tagger();
    let kv_f1 = eval_tagger(
        &kv_tagger,
        &keyvalue_test().sample(&mut RngStream::new(32), 256).unwrap(),
    )
    .unwrap()
    .f1;
    let modes = [PoolingMode::OracleAda, PoolingMode::Ada, PoolingMode::Avg];
    let runs: Vec<Vec<KvRun>> = modes
        .iter()
        .map(|&m| (0..5).map(|seed| keyvalue_run(TopDownMode::Cross, m, seed)).collect())
        .collect();
    let mean = |xs: &[KvRun], f: fn(&KvRun) -> f64| xs.iter().map(f).sum::<f64>() / xs.len() as f64;
    let acc: Vec<f64> = runs.iter().map(|r| mean(r, |k| k.acc)).collect();
    // Rank trend over seeds: each step down the ordering may lose at most
    // this much mean accuracy.
    let eps = 0.02;
    let summary = modes
        .iter()
        .zip(&runs)
        .map(|(m, r)| {
            format!(
                "{m:?} acc {:.3} steps {:.0} step-500 val {:.3}",
                mean(r, |k| k.acc),
                mean(r, |k| k.steps as f64),
                mean(r, |k| k.early)
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    check(
        acc[0] >= acc[1] - eps && acc[1] >= acc[2] - eps,
        format!(
            "{} label cases; mark F1 {f1:.4}; keyvalue tagger F1 {kv_f1:.4}; means over 5 seeds: {summary}",
            cases.len()
        ),
    )
}

/// Clipped n-gram overlap by pairing each hypothesis gram with an unused
/// equal reference gram.
fn overlap_oracle(reference: &[u8], hypothesis: &[u8], n: usize) -> (usize, usize, usize) {
    let grams = |s: &[u8]| -> Vec<Vec<u8>> {
        if s.len() < n {
            Vec::new()
        } else {
            (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
        }
    };
    let (r, h) = (grams(reference), grams(hypothesis));
    let mut used = vec![false; r.len()];
    let mut hits = 0;
    for g in &h {
        if let Some(j) = (0..r.len()).find(|&j| !used[j] && r[j] == *g) {
            used[j] = true;
            hits += 1;
        }
    }
    (hits, h.len(), r.len())
}

fn is_subsequence(needle: &[u8], hay: &[u8]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|x| it.any(|y| y == x))
}

/// Longest common subsequence by trying every subsequence of the shorter side.
fn lcs_by_subsets(a: &[u8], b: &[u8]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    let mut picked = Vec::with_capacity(short.len());
    for mask in 0u32..1 << short.len() {
        let size = mask.count_ones() as usize;
        if size <= best {
            continue;
        }
        picked.clear();
        picked.extend((0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| short[i]));
        if is_subsequence(&picked, long) {
            best = size;
        }
    }
    best
}

/// Longest common subsequence from the recursive definition, memoized.
fn lcs_recursive(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut [Option<usize>], w: usize) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo[i * w + j] {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo, w)
        } else {
            go(a, b, i + 1, j, memo, w).max(go(a, b, i, j + 1, memo, w))
        };
        memo[i * w + j] = Some(v);
        v
    }
    let w = b.len() + 1;
    go(a, b, 0, 0, &mut vec![None; (a.len() + 1) * w], w)
}

fn score_oracle(overlap: usize, hyp: usize, reference: usize) -> (f64, f64, f64) {
    if hyp == 0 || reference == 0 || overlap == 0 {
        return (0.0, 0.0, 0.0);
    }
    let (p, r) = (overlap as f64 / hyp as f64, overlap as f64 / reference as f64);
    (p, r, 2.0 * p * r / (p + r))
}

fn agrees(got: RougeScore, want: (f64, f64, f64)) -> bool {
    (got.precision - want.0).abs() <= 1e-12 && (got.recall - want.1).abs() <= 1e-12 && (got.f1 - want.2).abs() <= 1e-12
}

/// Every string over {0,1,2,3} of length at most `max_len`.
fn all_strings(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|s: &Vec<u8>| {
                (0..4u8).map(move |c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

fn compare_pair(reference: &[u8], hypothesis: &[u8], lcs: usize) -> Result<(), String> {
    for n in [1, 2] {
        let (o, h, r) = overlap_oracle(reference, hypothesis, n);
        if !agrees(rouge_n(reference, hypothesis, n).unwrap(), score_oracle(o, h, r)) {
            return Err(format!("ROUGE-{n} of ref {reference:?} hyp {hypothesis:?}"));
        }
    }
    if !agrees(
        rouge_l(reference, hypothesis),
        score_oracle(lcs, hypothesis.len(), reference.len()),
    ) {
        return Err(format!("ROUGE-L of ref {reference:?} hyp {hypothesis:?}"));
    }
    Ok(())
}

fn rouge_correctness() -> Outcome {
    let fixture = rouge("the cat sat", "the cat");
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    if !(close(fixture.rouge1.f1, 0.8) && close(fixture.rouge2.f1, 2.0 / 3.0) && close(fixture.rouge_l.f1, 0.8)) {
        return Err(format!("fixtures: {fixture:?}"));
    }
    let strings = all_strings(10);
    // Every ordered pair of strings up to length 5.
    let short: Vec<&Vec<u8>> = strings.iter().filter(|s| s.len() <= 5).collect();
    for a in &short {
        for b in &short {
            compare_pair(a, b, lcs_by_subsets(a, b))?;
        }
    }
    // Every string up to length 10 against two drawn partners up to length 10.
    let mut rng = RngStream::new(909);
    for s in &strings {
        for _ in 0..2 {
            let len = rng.below(11);
            let t: Vec<u8> = (0..len).map(|_| rng.below(4) as u8).collect();
            let lcs = lcs_recursive(s, &t);
            if s.len().min(t.len()) <= 6 && lcs != lcs_by_subsets(s, &t) {
                return Err(format!("LCS oracles disagree on {s:?} {t:?}"));
            }
            compare_pair(s, &t, lcs)?;
            compare_pair(&t, s, lcs)?;
        }
    }
    Ok(format!(
        "fixtures F1 0.8 / 0.667 / 0.8; {} exhaustive pairs up to length 5; {} strings up to length 10 with 4 partnered pairs each",
        short.len() * short.len(),
        strings.len()
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        max_positions: 64,
        ..ModelConfig::desk()
    };
    let task = TaskSpec::Copy {
        min_len: 4,
        max_len: 12,
        vocab: 32,
    };
    let budget = TrainConfig {
        steps: 40,
        eval_every: 20,
        eval_size: 16,
        seed: 7,
        ..TrainConfig::default()
    };
    let run = |seed: u64, name: &str| {
        let mut model = TopDownModel::new(cfg.clone(), seed).unwrap();
        let report = train(&mut model, &task, &TrainConfig { seed, ..budget.clone() }, None).unwrap();
        let path = dir.path().join(name);
        save_checkpoint(&model, &path).unwrap();
        (model, report, std::fs::read(&path).unwrap(), path)
    };
    let (model_a, report_a, bytes_a, path_a) = run(7, "a.tdtx");
    let (_, report_b, bytes_b, _) = run(7, "b.tdtx");
    let (_, report_c, bytes_c, _) = run(8, "c.tdtx");
    let bits = |r: &topdown_core::tasks::TrainReport| r.losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    if report_a != report_b || bits(&report_a) != bits(&report_b) {
        return Err("same seed and config gave different train reports".into());
    }
    if bytes_a != bytes_b {
        return Err("same seed and config gave different checkpoint bytes".into());
    }
    if report_a == report_c || bytes_a == bytes_c {
        return Err("a different seed reproduced the same run".into());
    }
    let loaded = load_checkpoint(&path_a).map_err(|e| e.to_string())?;
    let tokens = random_tokens(48, 32, &mut RngStream::new(70));
    let encode = |m: &TopDownModel| {
        let tape = Tape::inference(m.params());
        m.encode(&tape, &tokens, &PoolingInputs::none(), &mut OpCounter::new())
            .unwrap()
            .states
            .value()
            .clone()
    };
    check(
        encode(&model_a).bit_eq(&encode(&loaded)),
        format!(
            "{} losses and {} checkpoint bytes reproduced; reload encodes bit-identically",
            report_a.losses.len(),
            bytes_a.len()
        ),
    )
}

fn ablation_harness() -> Outcome {
    let n = 16;
    let config = AblateConfig {
        model: ModelConfig {
            max_positions: 64,
            decoder_memory: DecoderMemory::Last,
            ..ModelConfig::desk()
        },
        task: TaskSpec::KeyValue {
            n,
            w: KV_W,
            n1: KV_N1,
            n_values: KV_VALUES,
            vocab: KV_VOCAB,
        },
        train: TrainConfig {
            steps: 150,
            adam: AdamConfig {
                lr: 3e-4,
                ..AdamConfig::default()
            },
            eval_every: 150,
            eval_size: 32,
            ..TrainConfig::default()
        },
        windows: vec![8, 2, 4],
        modes: all_modes(),
        seeds: vec![0, 1, 2],
        test_size: 256,
    };
    let table = ablate(&config, |_| {}).map_err(|e| e.to_string())?;
    let layout: Vec<(TopDownMode, usize)> = table.rows.iter().map(|r| (r.mode, r.w)).collect();
    let want: Vec<(TopDownMode, usize)> = all_modes()
        .into_iter()
        .flat_map(|m| [2, 4, 8].map(|w| (m, w)))
        .collect();
    if layout != want || table.rows.iter().any(|r| r.accuracies.len() != 3) {
        return Err(format!("row layout {layout:?}"));
    }
    for mode in all_modes() {
        let means: Vec<f64> = [2, 4, 8].iter().map(|&w| table.row(mode, w).unwrap().mean).collect();
        let monotone = means.windows(2).all(|p| p[1] >= p[0]);
        if table.monotone_by_mode.iter().find(|(m, _)| *m == mode).map(|p| p.1) != Some(monotone) {
            return Err(format!("{mode:?} monotone flag disagrees with means {means:?}"));
        }
    }
    // The value sits n - 2 tokens from the query, beyond N1 * w / 2 for every
    // window in the sweep, so the none rows cannot beat chance.
    let chance = 1.0 / KV_VALUES as f64;
    let none: Vec<f64> = [2, 4, 8]
        .iter()
        .map(|&w| table.row(TopDownMode::None, w).unwrap().mean)
        .collect();
    let summary = table
        .rows
        .iter()
        .map(|r| format!("{:?}/{} {:.3}", r.mode, r.w, r.mean))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        none.iter().all(|m| (m - chance).abs() <= 0.05),
        format!("window_monotone={} rows [{summary}]", table.window_monotone),
    )
}
