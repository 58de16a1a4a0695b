//! Complexity and memory sweeps over sequence length, window and encoder
//! variant. Each cell runs a full encode on an inference tape and records the
//! counted score evaluations, the median wall time and the peak tracked
//! tensor allocation.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use topdown_core::attention::{count_budget, OpCounter, Window};
use topdown_core::memory::measure_peak;
use topdown_core::model::{ModelConfig, PoolingInputs, TopDownMode, TopDownModel, FIRST_FREE_ID};
use topdown_core::rng::RngStream;
use topdown_core::tape::Tape;

use crate::error::{BenchError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Unbounded self-attention over `N1 + N3` token layers, no segments.
    #[serde(rename = "full")]
    Full,
    /// The bottom-up stack alone.
    #[serde(rename = "local-only")]
    LocalOnly,
    #[serde(rename = "topdown-cross")]
    TopdownCross,
    #[serde(rename = "topdown-concat")]
    TopdownConcat,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::LocalOnly, Variant::TopdownCross, Variant::TopdownConcat];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::LocalOnly => "local-only",
            Variant::TopdownCross => "topdown-cross",
            Variant::TopdownConcat => "topdown-concat",
        }
    }

    /// The encoder configuration this variant runs for a length-`n` input.
    pub fn model_config(self, base: &ModelConfig, n: usize, w: Window) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.max_positions = cfg.max_positions.max(n);
        cfg.w = w;
        match self {
            Variant::Full => {
                cfg.w = Window::FULL;
                cfg.n1 = base.n1 + base.n3;
                cfg.topdown_mode = TopDownMode::None;
            }
            Variant::LocalOnly => cfg.topdown_mode = TopDownMode::None,
            Variant::TopdownCross => cfg.topdown_mode = TopDownMode::Cross,
            Variant::TopdownConcat => cfg.topdown_mode = TopDownMode::Concat,
        }
        cfg
    }

    /// Closed-form score evaluations of one encode, summed over heads.
    pub fn expected_score_evals(self, cfg: &ModelConfig, n: usize) -> Result<u64> {
        let m = cfg.segmentation()?.num_segments(n);
        let b = count_budget(n, cfg.w, m);
        let per_head = match cfg.topdown_mode {
            TopDownMode::None => cfg.n1 as u64 * b.local,
            TopDownMode::Concat => cfg.n1 as u64 * b.local + cfg.n2 as u64 * b.segment + cfg.n3 as u64 * b.local,
            TopDownMode::Cross => {
                cfg.n1 as u64 * b.local + cfg.n2 as u64 * b.segment + cfg.n3 as u64 * (b.local + b.cross)
            }
        };
        Ok(per_head * cfg.n_heads as u64)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| BenchError::Config(format!("unknown variant {s:?}")))
    }
}

mod window_str {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};
    use topdown_core::attention::Window;

    pub fn serialize<S: Serializer>(w: &Window, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(w)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Window, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// One cell of a sweep. Measurements are empty when the cell failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub variant: Variant,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(with = "window_str")]
    pub w: Window,
    #[serde(rename = "M")]
    pub m: usize,
    pub score_evals: Option<u64>,
    pub wall_ms_median: Option<f64>,
    pub peak_bytes: Option<u64>,
    pub seed: u64,
    /// Max minus min wall time over the trials.
    pub wall_ms_spread: Option<f64>,
    /// `ok` or `failed: <reason>`.
    pub status: String,
}

impl BenchRecord {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub ns: Vec<usize>,
    #[serde(with = "windows_str")]
    pub windows: Vec<Window>,
    #[serde(default = "all_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Cells whose largest single score tensor would exceed this many bytes
    /// are recorded as failed without running.
    #[serde(default)]
    pub max_score_bytes: Option<u64>,
}

mod windows_str {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};
    use topdown_core::attention::Window;

    pub fn serialize<S: Serializer>(ws: &[Window], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(ws.iter().map(|w| w.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Window>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Item {
            Int(usize),
            Str(String),
        }
        Vec::<Item>::deserialize(d)?
            .into_iter()
            .map(|item| match item {
                Item::Int(w) => Window::new(w).map_err(D::Error::custom),
                Item::Str(s) => s.parse().map_err(D::Error::custom),
            })
            .collect()
    }
}

fn all_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

fn default_trials() -> usize {
    3
}

impl BenchConfig {
    pub fn new(model: ModelConfig, ns: Vec<usize>, windows: Vec<Window>) -> Self {
        BenchConfig {
            model,
            ns,
            windows,
            variants: all_variants(),
            trials: default_trials(),
            seed: 0,
            max_score_bytes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.windows.is_empty() || self.variants.is_empty() {
            return Err(BenchError::Config("bench grid needs at least one N, window and variant".into()));
        }
        if self.trials < 3 {
            return Err(BenchError::Config(format!("bench needs at least 3 trials, got {}", self.trials)));
        }
        if self.ns.contains(&0) {
            return Err(BenchError::Config("sequence lengths must be positive".into()));
        }
        self.model.validate()?;
        Ok(())
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2.0
    }
}

/// Bytes of the largest score tensor one attention call of `cfg` allocates.
fn largest_score_tensor(cfg: &ModelConfig, n: usize) -> Result<u64> {
    let m = cfg.segmentation()?.num_segments(n);
    let b = count_budget(n, cfg.w, m);
    let pairs = match cfg.topdown_mode {
        TopDownMode::None => b.local,
        _ => b.local.max(b.segment).max(b.cross),
    };
    Ok(pairs * cfg.n_heads as u64 * 8)
}

fn measure_cell(cfg: &ModelConfig, variant: Variant, n: usize, trials: usize, seed: u64) -> Result<(u64, f64, f64, u64)> {
    let model = TopDownModel::new(cfg.clone(), seed)?;
    let mut rng = RngStream::new(seed).split_named("bench-tokens");
    let tokens: Vec<usize> = (0..n).map(|_| FIRST_FREE_ID + rng.below(cfg.vocab_size - FIRST_FREE_ID)).collect();
    let pooling = PoolingInputs::none();
    let encode = |counter: &mut OpCounter| -> Result<()> {
        let tape = Tape::inference(model.params());
        model.encode(&tape, &tokens, &pooling, counter)?;
        Ok(())
    };

    // Warm-up run doubles as the counted and memory-measured pass.
    let mut counter = OpCounter::new();
    let (res, peak) = measure_peak(|| encode(&mut counter));
    res?;
    let expected = variant.expected_score_evals(cfg, n)?;
    if counter.score_evals() != expected {
        return Err(BenchError::Mismatch(format!(
            "counted {} score evaluations, closed form gives {expected}",
            counter.score_evals()
        )));
    }
    let mut times = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut c = OpCounter::new();
        let start = Instant::now();
        encode(&mut c)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let spread = times.iter().copied().fold(f64::NEG_INFINITY, f64::max) - times.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((expected, median(&mut times), spread, peak as u64))
}

/// Runs one cell. Failures are recorded in the returned record's status.
pub fn bench_cell(config: &BenchConfig, variant: Variant, n: usize, w: Window) -> BenchRecord {
    let cfg = variant.model_config(&config.model, n, w);
    let m = match cfg.topdown_mode {
        TopDownMode::None => 0,
        _ => cfg.segmentation().map(|s| s.num_segments(n)).unwrap_or(0),
    };
    let mut record = BenchRecord {
        variant,
        n,
        w: cfg.w,
        m,
        score_evals: None,
        wall_ms_median: None,
        peak_bytes: None,
        seed: config.seed,
        wall_ms_spread: None,
        status: "ok".into(),
    };
    let outcome = cfg.validate().map_err(BenchError::from).and_then(|()| {
        if let Some(limit) = config.max_score_bytes {
            let need = largest_score_tensor(&cfg, n)?;
            if need > limit {
                return Err(BenchError::Config(format!("score tensor of {need} bytes exceeds limit {limit}")));
            }
        }
        measure_cell(&cfg, variant, n, config.trials, config.seed)
    });
    match outcome {
        Ok((evals, wall, spread, peak)) => {
            record.score_evals = Some(evals);
            record.wall_ms_median = Some(wall);
            record.wall_ms_spread = Some(spread);
            record.peak_bytes = Some(peak);
        }
        Err(e) => record.status = format!("failed: {e}"),
    }
    record
}

/// Every (variant, N, w) cell in that nesting order. The full variant ignores
/// the window, so it runs once per N.
pub fn bench_sweep(config: &BenchConfig) -> Result<Vec<BenchRecord>> {
    config.validate()?;
    let mut records = Vec::new();
    for &variant in &config.variants {
        for &n in &config.ns {
            if variant == Variant::Full {
                records.push(bench_cell(config, variant, n, Window::FULL));
                continue;
            }
            for &w in &config.windows {
                records.push(bench_cell(config, variant, n, w));
            }
        }
    }
    Ok(records)
}

pub fn write_csv<W: Write>(records: &[BenchRecord], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for r in records {
        writer.serialize(r)?;
    }
    writer.flush().map_err(|e| BenchError::io("<csv output>", e))?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<BenchRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    reader.deserialize().map(|r| r.map_err(BenchError::from)).collect()
}

pub fn write_json<W: Write>(records: &[BenchRecord], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, records)?;
    Ok(())
}

pub fn read_json<R: Read>(input: R) -> Result<Vec<BenchRecord>> {
    Ok(serde_json::from_reader(input)?)
}
