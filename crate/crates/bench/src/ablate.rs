//! Top-down update ablation: every (update mode, window) cell is trained on
//! the same synthetic task over several seeds and scored on held-out draws.

use serde::{Deserialize, Serialize};
use topdown_core::attention::Window;
use topdown_core::model::{ModelConfig, Strategy, TopDownMode, TopDownModel};
use topdown_core::rng::RngStream;
use topdown_core::tasks::{eval_accuracy, train, TaskSpec, TrainConfig};

use crate::error::{BenchError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub windows: Vec<usize>,
    #[serde(default = "all_modes")]
    pub modes: Vec<TopDownMode>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

pub fn all_modes() -> Vec<TopDownMode> {
    vec![TopDownMode::Cross, TopDownMode::Concat, TopDownMode::None]
}

fn default_test_size() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: TopDownMode,
    pub w: usize,
    /// Held-out token accuracy, one entry per seed.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across seeds.
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// Per mode: mean accuracy never decreases as the window grows.
    pub monotone_by_mode: Vec<(TopDownMode, bool)>,
    /// All modes are monotone in the window size.
    pub window_monotone: bool,
    /// cross >= concat >= none in mean accuracy at every window; `None` when
    /// a mode is missing from the sweep.
    pub cross_concat_none_ordering: Option<bool>,
}

impl AblationTable {
    pub fn row(&self, mode: TopDownMode, w: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode && r.w == w)
    }
}

impl AblateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() < 3 {
            return Err(BenchError::Config(format!("ablation needs at least 3 seeds, got {}", self.seeds.len())));
        }
        if self.windows.is_empty() || self.modes.is_empty() {
            return Err(BenchError::Config("ablation needs at least one window and one mode".into()));
        }
        if self.test_size == 0 {
            return Err(BenchError::Config("test_size must be positive".into()));
        }
        for &w in &self.windows {
            Window::new(w)?;
        }
        Ok(())
    }
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_cell(config: &AblateConfig, mode: TopDownMode, w: usize, seed: u64) -> Result<f64> {
    let mut model_cfg = config.model.clone();
    model_cfg.topdown_mode = mode;
    model_cfg.w = Window::new(w)?;
    let mut model = TopDownModel::new(model_cfg, seed)?;
    let train_cfg = TrainConfig { seed, ..config.train.clone() };
    train(&mut model, &config.task, &train_cfg, None)?;
    let test = config.task.sample(&mut RngStream::new(seed).split_named("ablate-test"), config.test_size)?;
    Ok(eval_accuracy(&model, &test, Strategy::Greedy, None)?.token_acc)
}

/// Trains and scores every cell. `progress` is called after each cell.
pub fn ablate(config: &AblateConfig, mut progress: impl FnMut(&AblationRow)) -> Result<AblationTable> {
    config.validate()?;
    let mut windows = config.windows.clone();
    windows.sort_unstable();
    windows.dedup();
    let mut rows = Vec::new();
    for &mode in &config.modes {
        for &w in &windows {
            let accuracies = config.seeds.iter().map(|&s| run_cell(config, mode, w, s)).collect::<Result<Vec<_>>>()?;
            let (mean, sd) = mean_sd(&accuracies);
            let row = AblationRow { mode, w, accuracies, mean, sd };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(summarize(config.seeds.clone(), rows))
}

/// Computes the trend flags for a finished set of rows.
pub fn summarize(seeds: Vec<u64>, rows: Vec<AblationRow>) -> AblationTable {
    let mut modes: Vec<TopDownMode> = Vec::new();
    for r in &rows {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    let monotone_by_mode: Vec<(TopDownMode, bool)> = modes
        .iter()
        .map(|&mode| {
            let mut cells: Vec<&AblationRow> = rows.iter().filter(|r| r.mode == mode).collect();
            cells.sort_by_key(|r| r.w);
            (mode, cells.windows(2).all(|p| p[1].mean >= p[0].mean))
        })
        .collect();
    let window_monotone = monotone_by_mode.iter().all(|&(_, m)| m);
    let find = |mode: TopDownMode, w: usize| rows.iter().find(|r| r.mode == mode && r.w == w).map(|r| r.mean);
    let mut ws: Vec<usize> = rows.iter().map(|r| r.w).collect();
    ws.sort_unstable();
    ws.dedup();
    let ordering = ws
        .iter()
        .map(|&w| {
            let (c, k, n) = (find(TopDownMode::Cross, w)?, find(TopDownMode::Concat, w)?, find(TopDownMode::None, w)?);
            Some(c >= k && k >= n)
        })
        .collect::<Option<Vec<bool>>>()
        .map(|flags| flags.into_iter().all(|f| f));
    AblationTable { seeds, rows, monotone_by_mode, window_monotone, cross_concat_none_ordering: ordering }
}
