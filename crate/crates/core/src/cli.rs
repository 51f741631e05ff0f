//! Experiment runner behind the `specrl` binary.
//!
//! Config files are TOML:
//!
//! ```toml
//! schema_version = 1
//!
//! [train]
//! seed = 7
//! lenience = "e^0.5"
//!
//! [output]
//! dir = "runs/demo"
//!
//! [sweep]
//! lenience = ["1", "e^0.2", "e^0.5", "e^0.8", "e^1.0"]
//! ```
//!
//! Every `[train]` field except `seed` has a default; unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{epoch_overlap, EpochResponses, MetricsWriter, OverlapReport, RougeVariant};
use crate::spec_rollout::Lenience;
use crate::trainer::{run_experiment, run_with, RolloutMode, RunOutput, TraceRecord, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub metrics_file: String,
    /// Write the final rollout cache next to the metrics.
    pub save_cache: bool,
    /// Write every response to `trace.jsonl` for later overlap analysis.
    pub trace: bool,
    /// Run a vanilla twin first so non-vanilla runs can report speedup.
    pub paired_baseline: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            metrics_file: "metrics.csv".into(),
            save_cache: true,
            trace: true,
            paired_baseline: true,
        }
    }
}

/// A lenience written either as a string (`"e^0.5"`, `"inf"`) or a number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LenienceToken {
    Text(String),
    Number(f64),
}

impl LenienceToken {
    pub fn text(&self) -> String {
        match self {
            LenienceToken::Text(s) => s.clone(),
            LenienceToken::Number(x) => x.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lenience: Vec<LenienceToken>,
}

impl ExperimentConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            train,
            output: OutputConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::parse(path, line, e.message().to_string())
        })?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                config.schema_version
            )));
        }
        config.train.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub rollout_mode: Option<RolloutMode>,
    pub lenience: Option<Lenience>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) -> Result<()> {
        if let Some(out) = &self.out {
            config.output.dir = out.clone();
        }
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if let Some(mode) = self.rollout_mode {
            config.train.rollout_mode = mode;
        }
        if let Some(l) = self.lenience {
            config.train.lenience = l;
        }
        config.train.validate()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in trace {
        let line = serde_json::to_string(r).expect("trace record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn fmt_opt(x: f64, digits: usize) -> String {
    if x.is_nan() {
        "-".into()
    } else {
        format!("{x:.digits$}")
    }
}

/// Runs one experiment and writes its metrics CSV, final policy, trace and
/// cache snapshot into the output directory. Rows reach the CSV as soon as
/// they exist, so a diverging run leaves its completed steps on disk.
pub fn cmd_train(config: &ExperimentConfig, log: &mut dyn Write) -> Result<RunOutput> {
    config.train.validate()?;
    let dir = &config.output.dir;
    create_dir(dir)?;

    let baseline = if config.train.rollout_mode != RolloutMode::Vanilla && config.output.paired_baseline {
        let mut vanilla = config.train.clone();
        vanilla.rollout_mode = RolloutMode::Vanilla;
        Some(run_experiment(&vanilla)?.baseline())
    } else {
        None
    };

    let metrics_path = dir.join(&config.output.metrics_file);
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let mut sink = |row: &crate::metrics::MetricsRow| -> Result<()> {
        writer.write(row)?;
        if row.step.is_none() {
            let _ = writeln!(
                log,
                "epoch {:>3}  reward {:.3}  generated {:>7}  reused {:>7}  speedup {}  prefix {:.2}  full-reuse {:.3}  rouge1 {}  entropy {:.3}  kl {:.2e}  clip {:.3}",
                row.epoch,
                row.mean_reward,
                row.tokens_generated,
                row.tokens_reused,
                fmt_opt(row.speedup, 2),
                row.mean_prefix_len,
                row.full_reuse_ratio,
                fmt_opt(row.rouge1, 3),
                row.entropy,
                row.kl,
                row.clip_fraction,
            );
        }
        Ok(())
    };
    let run = run_with(&config.train, baseline.as_ref(), &mut sink)?;

    run.policy.save(&dir.join("policy.json"))?;
    if config.output.save_cache {
        run.cache.persist(&dir.join("cache.jsonl"))?;
    }
    if config.output.trace {
        write_trace(&dir.join("trace.jsonl"), &run.trace)?;
    }
    Ok(run)
}

/// Per-epoch sweep record, one per (lenience, epoch).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEpochRow {
    pub lenience: String,
    pub epoch: usize,
    pub tokens_generated: u64,
    pub tokens_reused: u64,
    pub speedup: f64,
    pub mean_prefix_len: f64,
    pub full_reuse_ratio: f64,
    pub mean_reward: f64,
}

/// Whole-run totals per lenience: tokens, speedup, reward.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummaryRow {
    pub lenience: String,
    pub tokens_generated: u64,
    pub speedup: f64,
    pub final_reward: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub baseline: RunOutput,
    pub runs: Vec<(Lenience, RunOutput)>,
    pub epochs: Vec<SweepEpochRow>,
    pub summary: Vec<SweepSummaryRow>,
}

pub fn parse_lenience_list(tokens: &[LenienceToken]) -> Result<Vec<Lenience>> {
    if tokens.is_empty() {
        return Err(Error::InvalidConfig("sweep lenience list is empty".into()));
    }
    tokens
        .iter()
        .map(|t| match t {
            LenienceToken::Number(x) => Lenience::finite(*x),
            LenienceToken::Text(s) => s.parse::<Lenience>(),
        }
        .map_err(|_| Error::InvalidConfig(format!("cannot parse lenience `{}`", t.text()))))
        .collect()
}

/// One spec_rl training run per lenience, all sharing the config seed, plus
/// a vanilla run with the same seed for speedups. Writes `sweep.csv` (per
/// epoch) and `sweep_summary.csv` (whole run).
pub fn cmd_sweep(config: &ExperimentConfig, tokens: &[LenienceToken], log: &mut dyn Write) -> Result<SweepOutput> {
    let levels = parse_lenience_list(tokens)?;
    let dir = &config.output.dir;
    create_dir(dir)?;

    let mut vanilla = config.train.clone();
    vanilla.rollout_mode = RolloutMode::Vanilla;
    let baseline = run_experiment(&vanilla)?;
    let base_tokens = baseline.baseline();

    let runs: Vec<(Lenience, RunOutput)> = levels
        .par_iter()
        .map(|&l| {
            let mut c = config.train.clone();
            c.rollout_mode = RolloutMode::SpecRl;
            c.lenience = l;
            c.validate()?;
            let run = run_with(&c, Some(&base_tokens), &mut |_| Ok(()))?;
            Ok((l, run))
        })
        .collect::<Result<_>>()?;

    let mut epochs = Vec::new();
    let mut summary = Vec::new();
    let base_total: u64 = base_tokens.epoch_tokens.iter().sum();
    for (l, run) in &runs {
        for e in &run.epochs {
            epochs.push(SweepEpochRow {
                lenience: l.to_string(),
                epoch: e.epoch,
                tokens_generated: e.tokens_generated,
                tokens_reused: e.tokens_reused,
                speedup: e.speedup_vs_baseline,
                mean_prefix_len: e.mean_verified_prefix_len,
                full_reuse_ratio: e.full_reuse_ratio,
                mean_reward: e.mean_reward,
            });
        }
        let total = run.tokens_from_epoch(1);
        let row = SweepSummaryRow {
            lenience: l.to_string(),
            tokens_generated: total,
            speedup: base_total as f64 / total as f64,
            final_reward: run.epochs.last().map_or(f64::NAN, |e| e.mean_reward),
        };
        let _ = writeln!(
            log,
            "lenience {:>8}  tokens {:>8}  speedup {:.2}x  final reward {:.3}",
            row.lenience, row.tokens_generated, row.speedup, row.final_reward
        );
        summary.push(row);
    }

    let path = dir.join("sweep.csv");
    let mut w = csv_writer(&path)?;
    for r in &epochs {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join("sweep_summary.csv");
    let mut w = csv_writer(&path)?;
    for r in &summary {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    Ok(SweepOutput {
        baseline,
        runs,
        epochs,
        summary,
    })
}

/// Reads a trace JSONL file into per-epoch responses.
pub fn read_trace(path: &Path) -> Result<BTreeMap<usize, EpochResponses>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<usize, EpochResponses> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TraceRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        let slots = out.entry(r.epoch).or_default().entry(r.prompt_id).or_default();
        if slots.len() <= r.slot {
            slots.resize(r.slot + 1, Vec::new());
        }
        slots[r.slot] = r.tokens;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct OverlapRow {
    previous_epoch: usize,
    epoch: usize,
    mean_rouge1: f64,
    prompts: usize,
    empty_references: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct PromptOverlapRow {
    epoch: usize,
    prompt_id: u32,
    rouge1: f64,
}

/// ROUGE-1 overlap between every pair of consecutive epochs in a trace.
/// Writes `overlap.csv` and `overlap_per_prompt.csv` into `out_dir`.
pub fn cmd_analyze(trace: &Path, out_dir: &Path, log: &mut dyn Write) -> Result<Vec<OverlapReport>> {
    let epochs = read_trace(trace)?;
    let keys: Vec<usize> = epochs.keys().copied().collect();
    for w in keys.windows(2) {
        if w[1] != w[0] + 1 {
            return Err(Error::MalformedInput(format!(
                "trace skips epoch {} (jumps from {} to {})",
                w[0] + 1,
                w[0],
                w[1]
            )));
        }
    }
    create_dir(out_dir)?;
    let mut reports = Vec::new();
    for w in keys.windows(2) {
        reports.push(epoch_overlap(w[1], &epochs[&w[0]], &epochs[&w[1]], RougeVariant::Recall)?);
    }

    let path = out_dir.join("overlap.csv");
    let mut summary = csv_writer(&path)?;
    let per_path = out_dir.join("overlap_per_prompt.csv");
    let mut per = csv_writer(&per_path)?;
    for r in &reports {
        summary.serialize(OverlapRow {
            previous_epoch: r.epoch - 1,
            epoch: r.epoch,
            mean_rouge1: r.mean_rouge1,
            prompts: r.per_prompt.len(),
            empty_references: r.empty_references,
        })?;
        for (&prompt_id, &rouge1) in epochs[&r.epoch].keys().zip(&r.per_prompt) {
            per.serialize(PromptOverlapRow {
                epoch: r.epoch,
                prompt_id,
                rouge1,
            })?;
        }
        let _ = writeln!(log, "epoch {:>3} vs {:>3}  rouge1 {:.4}", r.epoch, r.epoch - 1, r.mean_rouge1);
    }
    summary.flush().map_err(|e| Error::io(&path, e))?;
    per.flush().map_err(|e| Error::io(&per_path, e))?;
    Ok(reports)
}

#[derive(Debug, Parser)]
#[command(name = "specrl", about = "Speculative rollout reuse on a toy RL task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train once and write metrics, policy, cache and trace.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
        #[arg(long)]
        rollout_mode: Option<RolloutMode>,
        #[arg(long)]
        lenience: Option<Lenience>,
    },
    /// Train once per lenience value with a shared seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
        /// Lenience values; repeat the flag to list several. Replaces the
        /// config's sweep list.
        #[arg(long)]
        lenience: Vec<String>,
    },
    /// Overlap between consecutive epochs of a trace file.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli, log: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed_override,
            rollout_mode,
            lenience,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            Overrides {
                out,
                seed: seed_override,
                rollout_mode,
                lenience,
            }
            .apply(&mut cfg)?;
            cmd_train(&cfg, log).map(|_| ())
        }
        Command::Sweep {
            config,
            out,
            seed_override,
            lenience,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            Overrides {
                out,
                seed: seed_override,
                ..Overrides::default()
            }
            .apply(&mut cfg)?;
            let tokens = if lenience.is_empty() {
                cfg.sweep.lenience.clone()
            } else {
                lenience.into_iter().map(LenienceToken::Text).collect()
            };
            cmd_sweep(&cfg, &tokens, log).map(|_| ())
        }
        Command::Analyze { trace, out } => cmd_analyze(&trace, &out, log).map(|_| ()),
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match dispatch(cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
