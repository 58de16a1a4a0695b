//! The `tdt` command line.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use topdown_core::attention::{count_budget, Window};
use topdown_core::model::{
    load_checkpoint, save_checkpoint, DecoderMemory, ModelConfig, ModelKind, PoolingInputs, Strategy, TopDownModel, Vocab, EOS_ID,
    FIRST_FREE_ID,
};
use topdown_core::pooling::{build_importance_labels, Stopwords};
use topdown_core::rng::RngStream;
use topdown_core::tasks::{
    eval_accuracy, eval_tagger, keyvalue_curriculum, pooling_inputs, train, train_tagger, TaskInstance, TaskSpec, TrainConfig, FIRST_VALUE_ID,
};

use crate::ablate::{ablate, all_modes, AblateConfig};
use crate::bench::{bench_sweep, write_csv, write_json, BenchConfig, Variant};
use crate::error::{BenchError, Result};

pub const SEED_ENV: &str = "TDT_SEED";

#[derive(Debug, Parser)]
#[command(name = "tdt", about = "Top-down transformer toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Paper,
    Desk,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration file; its schema depends on the subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed. The TDT_SEED environment variable takes precedence.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint to --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// copy, keyvalue, keyvalue-mix (lengths up to 64), mark, or a task JSON file.
        #[arg(long, default_value = "copy")]
        task: String,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 3e-4)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Train an importance tagger instead of a sequence-to-sequence model.
        #[arg(long)]
        tagger: bool,
    },
    /// Score a checkpoint on freshly drawn task instances.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "copy")]
        task: String,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value = "greedy")]
        strategy: String,
        /// Tagger checkpoint for ada pooling.
        #[arg(long)]
        tagger: Option<PathBuf>,
    },
    /// Decode one source sequence.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Whitespace separated token ids.
        #[arg(long, conflicts_with = "text")]
        tokens: Option<String>,
        /// Text encoded with --vocab.
        #[arg(long, requires = "vocab")]
        text: Option<String>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value = "greedy")]
        strategy: String,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
    },
    /// Build importance labels or run a trained tagger.
    Tag {
        #[command(subcommand)]
        action: TagAction,
    },
    /// Complexity and memory sweep.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long = "N", value_delimiter = ',', default_values_t = [128, 256, 512, 1024])]
        n: Vec<usize>,
        #[arg(long = "w", value_delimiter = ',', default_values = ["8", "32", "64"])]
        w: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long, default_value_t = 3)]
        trials: usize,
    },
    /// Update-mode by window ablation on the keyvalue task.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 8])]
        windows: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
    },
    /// Per-head score evaluations of one layer of each attention kind.
    Budget {
        #[arg(long = "N")]
        n: usize,
        /// Window width or "full".
        #[arg(long = "w")]
        w: String,
        #[arg(long = "M")]
        m: usize,
    },
}

#[derive(Debug, Subcommand)]
enum TagAction {
    /// Mark document words that also occur in the reference.
    Labels {
        #[arg(long)]
        document: String,
        #[arg(long)]
        reference: String,
        /// One stopword per line; replaces the built-in list.
        #[arg(long)]
        stopwords: Option<PathBuf>,
    },
    /// Print per-token importance logits of a tagger checkpoint.
    Run {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokens: String,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 2 for usage or configuration errors,
/// 3 for runtime failures.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let seed_env = std::env::var(SEED_ENV).ok();
    run_cli_with(argv, seed_env.as_deref(), &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

pub fn run_cli_with<I, T>(argv: I, seed_env: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    2
                }
            };
        }
    };
    match execute(cli.command, seed_env, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_config() {
                2
            } else {
                3
            }
        }
    }
}

fn resolve_seed(flag: Option<u64>, env: Option<&str>) -> Result<u64> {
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| BenchError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        None => Ok(flag.unwrap_or(0)),
    }
}

fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BenchError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
}

fn model_config(common: &Common) -> Result<ModelConfig> {
    let cfg = match &common.config {
        Some(path) => read_json_file(path)?,
        None => match common.preset {
            Preset::Paper => ModelConfig::paper(),
            Preset::Desk => ModelConfig::desk(),
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Built-in task for `name` sized to `cfg`, or a task JSON file.
fn resolve_task(name: &str, cfg: &ModelConfig) -> Result<TaskSpec> {
    let vocab = cfg.vocab_size;
    let max_len = 16.min(cfg.max_positions.saturating_sub(1)).max(1);
    match name {
        "copy" => Ok(TaskSpec::Copy { min_len: 1, max_len, vocab }),
        "mark" => Ok(TaskSpec::Mark { min_len: 1, max_len, vocab, marked: FIRST_FREE_ID }),
        "keyvalue" | "keyvalue-mix" => {
            let w = match cfg.w {
                Window::Finite(w) => w,
                Window::Full(_) => {
                    return Err(BenchError::Config("the keyvalue task needs a finite window".into()));
                }
            };
            let n_values = 16.min(vocab.saturating_sub(FIRST_VALUE_ID + 1));
            let n = 64.min(cfg.max_positions);
            if name == "keyvalue" {
                Ok(TaskSpec::KeyValue { n, w, n1: cfg.n1, n_values, vocab })
            } else {
                Ok(keyvalue_curriculum(n, w, cfg.n1, n_values, vocab)?)
            }
        }
        path => read_json_file(Path::new(path)),
    }
}

fn parse_ids(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|t| t.parse().map_err(|_| BenchError::Usage(format!("token id {t:?} is not an unsigned integer"))))
        .collect()
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    s.parse().map_err(|e: topdown_core::Error| BenchError::Usage(e.to_string()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| BenchError::io(path, e))
}

fn emit_json<T: serde::Serialize>(value: &T, dest: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    match dest {
        Some(path) => {
            let mut w = create(path)?;
            serde_json::to_writer_pretty(&mut w, value)?;
            w.flush().map_err(|e| BenchError::io(path, e))
        }
        None => {
            serde_json::to_writer_pretty(&mut *out, value)?;
            writeln!(out).map_err(|e| BenchError::io("<stdout>", e))
        }
    }
}

fn line(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| BenchError::io("<stdout>", e))
}

fn execute(command: Command, seed_env: Option<&str>, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train { common, task, steps, lr, batch, tagger } => {
            let seed = resolve_seed(common.seed, seed_env)?;
            let cfg = model_config(&common)?;
            let spec = resolve_task(&task, &cfg)?;
            let mut train_cfg = TrainConfig { steps, batch_size: batch, seed, ..TrainConfig::default() };
            train_cfg.adam.lr = lr;
            let (model, report) = if tagger {
                train_tagger(&cfg, &spec, &train_cfg)?
            } else {
                let mut model = TopDownModel::new(cfg, seed)?;
                let report = train(&mut model, &spec, &train_cfg, None)?;
                (model, report)
            };
            let path = common.out.unwrap_or_else(|| PathBuf::from("model.tdtx"));
            save_checkpoint(&model, &path)?;
            emit_json(&report, None, out)?;
            line(out, format_args!("checkpoint written to {}", path.display()))
        }
        Command::Eval { common, checkpoint, task, count, strategy, tagger } => {
            let seed = resolve_seed(common.seed, seed_env)?;
            let model = load_checkpoint(&checkpoint)?;
            let spec = resolve_task(&task, model.config())?;
            let tasks = spec.sample(&mut RngStream::new(seed).split_named("eval"), count)?;
            if model.kind() == ModelKind::Tagger {
                return emit_json(&eval_tagger(&model, &tasks)?, common.out.as_deref(), out);
            }
            let tagger = tagger.map(|p| load_checkpoint(&p)).transpose()?;
            let metrics = eval_accuracy(&model, &tasks, parse_strategy(&strategy)?, tagger.as_ref())?;
            emit_json(&metrics, common.out.as_deref(), out)
        }
        Command::Generate { common: _, checkpoint, tokens, text, vocab, strategy, max_len } => {
            let model = load_checkpoint(&checkpoint)?;
            let vocab = vocab.map(|p| Vocab::load(&p)).transpose()?;
            let source = match (&tokens, &text, &vocab) {
                (Some(ids), _, _) => parse_ids(ids)?,
                (None, Some(text), Some(v)) => v.encode(text)?,
                _ => return Err(BenchError::Usage("generate needs --tokens or --text with --vocab".into())),
            };
            let inst = TaskInstance { source: source.clone(), target: Vec::new(), labels: None };
            let pooling = pooling_inputs(&model, &inst, None).unwrap_or_else(|_| PoolingInputs::none());
            let ids = model.generate(&source, &pooling, parse_strategy(&strategy)?, max_len, EOS_ID)?;
            match &vocab {
                Some(v) => line(out, v.decode(&ids)?),
                None => line(out, ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")),
            }
        }
        Command::Tag { action: TagAction::Labels { document, reference, stopwords } } => {
            let stop = match stopwords {
                Some(p) => Stopwords::load(&p)?,
                None => Stopwords::default(),
            };
            let doc: Vec<&str> = document.split_whitespace().collect();
            let reference: Vec<&str> = reference.split_whitespace().collect();
            let labels = build_importance_labels(&doc, &reference, &stop);
            line(out, labels.as_slice().iter().map(u8::to_string).collect::<Vec<_>>().join(" "))
        }
        Command::Tag { action: TagAction::Run { checkpoint, tokens } } => {
            let model = load_checkpoint(&checkpoint)?;
            if model.kind() != ModelKind::Tagger {
                return Err(BenchError::Usage(format!("{} is not a tagger checkpoint", checkpoint.display())));
            }
            let weights = model.importance_weights(&parse_ids(&tokens)?)?;
            line(out, weights.as_slice().iter().map(|w| format!("{w:.6}")).collect::<Vec<_>>().join(" "))
        }
        Command::Bench { common, n, w, variants, trials } => {
            let seed = resolve_seed(common.seed, seed_env)?;
            let mut cfg: BenchConfig = match &common.config {
                Some(path) => read_json_file(path)?,
                None => {
                    let windows = w.iter().map(|s| s.parse::<Window>()).collect::<topdown_core::Result<Vec<_>>>()?;
                    let mut cfg = BenchConfig::new(model_config(&common)?, n, windows);
                    if let Some(v) = variants {
                        cfg.variants = v.iter().map(|s| s.parse::<Variant>()).collect::<Result<_>>()?;
                    }
                    cfg.trials = trials;
                    cfg
                }
            };
            if common.seed.is_some() || seed_env.is_some() {
                cfg.seed = seed;
            }
            let records = bench_sweep(&cfg)?;
            match (&common.out, common.format) {
                (Some(path), Format::Csv) => {
                    let mut w = create(path)?;
                    write_csv(&records, &mut w)?;
                    w.flush().map_err(|e| BenchError::io(path, e))?;
                }
                (Some(path), Format::Json) => {
                    let mut w = create(path)?;
                    write_json(&records, &mut w)?;
                    w.flush().map_err(|e| BenchError::io(path, e))?;
                }
                (None, Format::Csv) => write_csv(&records, &mut *out)?,
                (None, Format::Json) => emit_json(&records, None, out)?,
            }
            Ok(())
        }
        Command::Ablate { common, windows, seeds, steps } => {
            if common.format == Format::Csv {
                return Err(BenchError::Usage("ablate only emits json".into()));
            }
            let cfg: AblateConfig = match &common.config {
                Some(path) => read_json_file(path)?,
                None => {
                    // The decoder reads only the QUERY row, so the value can reach
                    // it only through the encoder.
                    let mut model = model_config(&common)?;
                    model.decoder_memory = DecoderMemory::Last;
                    model.max_positions = model.max_positions.min(64);
                    let task_window = windows.iter().copied().max().unwrap_or(8);
                    let mut base = model.clone();
                    base.w = Window::new(task_window)?;
                    let task = resolve_task("keyvalue-mix", &base)?;
                    let train_cfg = TrainConfig { steps, ..TrainConfig::default() };
                    AblateConfig { model, task, train: train_cfg, windows, modes: all_modes(), seeds, test_size: 256 }
                }
            };
            let table = ablate(&cfg, |_| {})?;
            emit_json(&table, common.out.as_deref(), out)
        }
        Command::Budget { n, w, m } => {
            let window: Window = w.parse()?;
            let b = count_budget(n, window, m);
            line(out, format_args!("local={} segment={} cross={}", b.local, b.segment, b.cross))
        }
    }
}
