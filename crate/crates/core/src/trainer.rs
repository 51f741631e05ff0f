//! Toy RL-with-verifiable-rewards loop.
//!
//! The task is digitwise modular addition: the prompt `a1..ad + b1..bd`
//! must be answered with `c1..cd <eos>` where `ci = (ai + bi) mod 10`.
//! Each epoch visits every prompt exactly once, `group_size` rollouts per
//! prompt. Rollouts come from one of three modes:
//!
//! * vanilla: sample every response from scratch;
//! * spec_rl: verify last epoch's response for the same (prompt, slot) and
//!   regenerate only after the first rejection;
//! * random_reuse: keep a uniformly random prefix of last epoch's response.
//!
//! Every rollout slot draws from its own (prompt, slot, epoch) substream, so
//! results do not depend on batch order or thread scheduling.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{CachedRollout, RolloutCache};
use crate::error::{Error, Result};
use crate::metrics::{epoch_overlap, EpochResponses, MetricsRow, RougeVariant};
use crate::policy::{Policy, PromptId, TokenId, Trajectory, UpdateConfig, UpdateSample, Vocab};
use crate::rng::{rollout_stream, substream, DOMAIN_DATASET, DOMAIN_SHUFFLE};
use crate::spec_rollout::{
    random_reuse_rollout, speculative_rollout, Lenience, ResumeMode, VerificationResult,
};

pub const PLUS: TokenId = 10;
pub const EOS: TokenId = 11;
pub const VOCAB_SIZE: u32 = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub id: PromptId,
    pub tokens: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

/// Digitwise modular-sum task over a fixed, seeded prompt set.
#[derive(Debug, Clone)]
pub struct ModularSumTask {
    digits: usize,
    prompts: Vec<Prompt>,
}

impl ModularSumTask {
    pub fn vocab() -> Vocab {
        Vocab::new(VOCAB_SIZE, EOS).expect("task vocabulary is valid")
    }

    /// Draws `num_prompts` distinct prompts with `digits` digits per operand.
    pub fn new(digits: usize, num_prompts: usize, seed: u64) -> Result<Self> {
        if digits == 0 {
            return Err(Error::InvalidConfig("digits must be positive".into()));
        }
        let space = 10u128.checked_pow(2 * digits as u32);
        if space.is_some_and(|s| (num_prompts as u128) > s) {
            return Err(Error::InvalidConfig(format!(
                "{num_prompts} distinct prompts requested but only {} exist with {digits} digits",
                space.unwrap_or(0)
            )));
        }
        let mut rng = substream(seed, &[DOMAIN_DATASET]);
        let mut seen = HashSet::new();
        let mut prompts = Vec::with_capacity(num_prompts);
        while prompts.len() < num_prompts {
            let tokens: Vec<TokenId> = (0..2 * digits + 1)
                .map(|i| if i == digits { PLUS } else { rng.gen_range(0..10) })
                .collect();
            if seen.insert(tokens.clone()) {
                let target = Self::answer(&tokens)?;
                prompts.push(Prompt {
                    id: prompts.len() as PromptId,
                    tokens,
                    target,
                });
            }
        }
        Ok(Self { digits, prompts })
    }

    /// Answer digits (without eos) for a prompt `a + b`.
    pub fn answer(prompt: &[TokenId]) -> Result<Vec<TokenId>> {
        let bad = || Error::MalformedInput(format!("not a modular-sum prompt: {prompt:?}"));
        let plus = prompt.iter().position(|&t| t == PLUS).ok_or_else(bad)?;
        let (a, b) = (&prompt[..plus], &prompt[plus + 1..]);
        if a.len() != b.len() || a.is_empty() || a.iter().chain(b).any(|&t| t > 9) {
            return Err(bad());
        }
        Ok(a.iter().zip(b).map(|(x, y)| (x + y) % 10).collect())
    }

    pub fn digits(&self) -> usize {
        self.digits
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn prompt(&self, id: PromptId) -> &Prompt {
        &self.prompts[id as usize]
    }

    /// Smallest context window that can see both operand digits of every answer digit.
    pub fn sufficient_window(&self) -> usize {
        2 * self.digits + 1
    }

    /// Starting policy with partial competence: along each prompt's correct
    /// path the right token gets `prior_logit`, everything else 0.
    pub fn base_policy(&self, window: usize, prior_logit: f64) -> Result<Policy> {
        let mut policy = Policy::uniform(Self::vocab(), window)?;
        for p in &self.prompts {
            let mut history = p.tokens.clone();
            let path: Vec<TokenId> = p.target.iter().copied().chain([EOS]).collect();
            for &next in &path {
                let mut row = vec![0.0; VOCAB_SIZE as usize];
                row[next as usize] = prior_logit;
                policy.set_logits(&history, row)?;
                history.push(next);
            }
        }
        Ok(policy)
    }
}

/// Binary verifiable reward: 1 iff the response, up to and excluding eos,
/// equals the target digits.
pub fn reward(prompt: &Prompt, response: &[TokenId]) -> f64 {
    let body = match response.iter().position(|&t| t == EOS) {
        Some(i) => &response[..i],
        None => response,
    };
    if body == prompt.target.as_slice() {
        1.0
    } else {
        0.0
    }
}

/// Group-relative advantages `(r - mean) / (std + 1e-6)` with population std.
/// A group with identical rewards gets all-zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + 1e-6)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Vanilla,
    #[default]
    SpecRl,
    RandomReuse,
}

impl std::str::FromStr for RolloutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(RolloutMode::Vanilla),
            "spec_rl" | "spec-rl" => Ok(RolloutMode::SpecRl),
            "random_reuse" | "random-reuse" => Ok(RolloutMode::RandomReuse),
            other => Err(Error::InvalidConfig(format!("unknown rollout mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for RolloutMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RolloutMode::Vanilla => "vanilla",
            RolloutMode::SpecRl => "spec_rl",
            RolloutMode::RandomReuse => "random_reuse",
        })
    }
}

fn default_lenience() -> Lenience {
    Lenience::exp(0.5).expect("e^0.5 is finite")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::steps_per_epoch")]
    pub steps_per_epoch: usize,
    #[serde(default = "defaults::prompts_per_batch")]
    pub prompts_per_batch: usize,
    #[serde(default = "defaults::group_size")]
    pub group_size: usize,
    #[serde(default = "defaults::max_len")]
    pub max_len: usize,
    #[serde(default = "defaults::digits")]
    pub digits: usize,
    /// Context window; defaults to the task's sufficient window.
    #[serde(default)]
    pub window: Option<usize>,
    /// Logit bonus of the correct token in the starting policy.
    #[serde(default = "defaults::prior_logit")]
    pub prior_logit: f64,
    #[serde(default = "default_lenience")]
    pub lenience: Lenience,
    #[serde(default)]
    pub resume_mode: ResumeMode,
    #[serde(default)]
    pub rollout_mode: RolloutMode,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::kl_coef")]
    pub kl_coef: f64,
    #[serde(default = "defaults::clip")]
    pub clip_low: f64,
    #[serde(default = "defaults::clip")]
    pub clip_high: f64,
    /// Gradient steps taken on each rollout batch.
    #[serde(default = "defaults::updates_per_batch")]
    pub updates_per_batch: usize,
}

mod defaults {
    pub fn epochs() -> usize {
        10
    }
    pub fn steps_per_epoch() -> usize {
        4
    }
    pub fn prompts_per_batch() -> usize {
        64
    }
    pub fn group_size() -> usize {
        8
    }
    pub fn max_len() -> usize {
        32
    }
    pub fn digits() -> usize {
        2
    }
    pub fn prior_logit() -> f64 {
        3.5
    }
    pub fn learning_rate() -> f64 {
        256.0
    }
    pub fn kl_coef() -> f64 {
        1e-4
    }
    pub fn clip() -> f64 {
        0.2
    }
    pub fn updates_per_batch() -> usize {
        2
    }
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            epochs: defaults::epochs(),
            steps_per_epoch: defaults::steps_per_epoch(),
            prompts_per_batch: defaults::prompts_per_batch(),
            group_size: defaults::group_size(),
            max_len: defaults::max_len(),
            digits: defaults::digits(),
            window: None,
            prior_logit: defaults::prior_logit(),
            lenience: default_lenience(),
            resume_mode: ResumeMode::default(),
            rollout_mode: RolloutMode::default(),
            learning_rate: defaults::learning_rate(),
            kl_coef: defaults::kl_coef(),
            clip_low: defaults::clip(),
            clip_high: defaults::clip(),
            updates_per_batch: defaults::updates_per_batch(),
        }
    }

    pub fn num_prompts(&self) -> usize {
        self.steps_per_epoch * self.prompts_per_batch
    }

    pub fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            learning_rate: self.learning_rate,
            clip_low: self.clip_low,
            clip_high: self.clip_high,
            kl_coef: self.kl_coef,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("prompts_per_batch", self.prompts_per_batch),
            ("max_len", self.max_len),
            ("digits", self.digits),
            ("updates_per_batch", self.updates_per_batch),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.group_size < 2 {
            return Err(Error::InvalidConfig(
                "group_size must be at least 2 for group-relative advantages".into(),
            ));
        }
        if self.window == Some(0) {
            return Err(Error::InvalidConfig("window must be positive".into()));
        }
        let finite = [
            ("learning_rate", self.learning_rate),
            ("kl_coef", self.kl_coef),
            ("clip_low", self.clip_low),
            ("clip_high", self.clip_high),
            ("prior_logit", self.prior_logit),
        ];
        if let Some((name, _)) = finite.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "{name} must be finite and non-negative"
            )));
        }
        self.resume_mode.validate(self.lenience)
    }
}

/// One rollout slot after generation.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub slot: usize,
    pub trajectory: Trajectory,
    /// Present for spec_rl cache hits only.
    pub verification: Option<VerificationResult>,
    pub cache_hit: bool,
    pub reused_tokens: usize,
    pub generated_tokens: usize,
    pub fully_reused: bool,
}

/// Token counts of a reference run, used for speedup.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBaseline {
    pub step_tokens: Vec<u64>,
    pub epoch_tokens: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub epoch: usize,
    /// Global step, starting at 1.
    pub step: usize,
    pub samples: usize,
    pub tokens_generated: u64,
    pub tokens_reused: u64,
    pub response_tokens: u64,
    pub speedup: f64,
    pub mean_prefix_len: f64,
    pub full_reuse_ratio: f64,
    pub rouge1: f64,
    pub mean_reward: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub samples: usize,
    pub tokens_generated: u64,
    pub tokens_reused: u64,
    pub response_tokens: u64,
    pub speedup_vs_baseline: f64,
    pub mean_verified_prefix_len: f64,
    pub full_reuse_ratio: f64,
    /// NaN in the first epoch, which has nothing to compare against.
    pub rouge1_overlap: f64,
    pub mean_reward: f64,
    pub entropy: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

impl StepMetrics {
    pub fn to_row(&self) -> MetricsRow {
        MetricsRow {
            epoch: self.epoch,
            step: Some(self.step),
            tokens_generated: self.tokens_generated,
            tokens_reused: self.tokens_reused,
            speedup: self.speedup,
            mean_prefix_len: self.mean_prefix_len,
            full_reuse_ratio: self.full_reuse_ratio,
            rouge1: self.rouge1,
            mean_reward: self.mean_reward,
            entropy: self.entropy,
            kl: self.kl,
            clip_fraction: self.clip_fraction,
        }
    }
}

impl EpochMetrics {
    pub fn to_row(&self) -> MetricsRow {
        MetricsRow {
            epoch: self.epoch,
            step: None,
            tokens_generated: self.tokens_generated,
            tokens_reused: self.tokens_reused,
            speedup: self.speedup_vs_baseline,
            mean_prefix_len: self.mean_verified_prefix_len,
            full_reuse_ratio: self.full_reuse_ratio,
            rouge1: self.rouge1_overlap,
            mean_reward: self.mean_reward,
            entropy: self.entropy,
            kl: self.mean_kl,
            clip_fraction: self.clip_fraction,
        }
    }
}

/// One response as recorded in the trace file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub prompt_id: PromptId,
    pub slot: usize,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: TrainConfig,
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochMetrics>,
    pub policy: Policy,
    pub cache: RolloutCache,
    pub trace: Vec<TraceRecord>,
}

impl RunOutput {
    pub fn baseline(&self) -> TokenBaseline {
        TokenBaseline {
            step_tokens: self.steps.iter().map(|s| s.tokens_generated).collect(),
            epoch_tokens: self.epochs.iter().map(|e| e.tokens_generated).collect(),
        }
    }

    /// Generated tokens summed over epochs `from..`, 1-based.
    pub fn tokens_from_epoch(&self, from: usize) -> u64 {
        self.epochs
            .iter()
            .filter(|e| e.epoch >= from)
            .map(|e| e.tokens_generated)
            .sum()
    }

    /// Per-row metrics in CSV order: each epoch's steps followed by its summary.
    pub fn rows(&self) -> Vec<MetricsRow> {
        let mut rows = Vec::new();
        for e in &self.epochs {
            rows.extend(self.steps.iter().filter(|s| s.epoch == e.epoch).map(StepMetrics::to_row));
            rows.push(e.to_row());
        }
        rows
    }
}

fn speedup(baseline: Option<u64>, generated: u64, mode: RolloutMode) -> f64 {
    match (baseline, mode) {
        (Some(b), _) => b as f64 / generated as f64,
        (None, RolloutMode::Vanilla) => 1.0,
        (None, _) => f64::NAN,
    }
}

/// Generates every (prompt, slot) rollout of one batch and scores rewards.
#[allow(clippy::too_many_arguments)]
pub fn rollout_batch(
    policy: &Policy,
    task: &ModularSumTask,
    batch: &[PromptId],
    cache: &RolloutCache,
    snapshots: &HashMap<u64, Policy>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<Vec<RolloutRecord>> {
    let jobs: Vec<(PromptId, usize)> = batch
        .iter()
        .flat_map(|&p| (0..config.group_size).map(move |s| (p, s)))
        .collect();
    jobs.par_iter()
        .map(|&(prompt_id, slot)| {
            let prompt = task.prompt(prompt_id);
            let mut stream = rollout_stream(config.seed, prompt_id, slot, epoch);
            let cached = match config.rollout_mode {
                RolloutMode::Vanilla => None,
                _ => cache.get(prompt_id, slot),
            };
            if let Some(c) = cached {
                if c.epoch >= epoch {
                    return Err(Error::Internal(format!(
                        "cache entry from epoch {} reused in epoch {epoch}",
                        c.epoch
                    )));
                }
            }
            let mut record = match cached {
                None => {
                    let (response, gen_probs) =
                        policy.sample_continuation(&prompt.tokens, &[], config.max_len, &mut stream)?;
                    let n = response.len();
                    RolloutRecord {
                        slot,
                        trajectory: Trajectory {
                            prompt_id,
                            prompt: prompt.tokens.clone(),
                            response,
                            gen_probs,
                            reward: 0.0,
                        },
                        verification: None,
                        cache_hit: false,
                        reused_tokens: 0,
                        generated_tokens: n,
                        fully_reused: false,
                    }
                }
                Some(c) if config.rollout_mode == RolloutMode::SpecRl => {
                    let old = match config.resume_mode {
                        ResumeMode::Resample => None,
                        ResumeMode::ExactResidual => {
                            Some(snapshots.get(&c.policy_version).ok_or_else(|| {
                                Error::Internal(format!(
                                    "missing policy snapshot {}",
                                    c.policy_version
                                ))
                            })?)
                        }
                    };
                    let (trajectory, v) = speculative_rollout(
                        policy,
                        prompt_id,
                        &prompt.tokens,
                        c,
                        config.lenience,
                        config.resume_mode,
                        old,
                        config.max_len,
                        &mut stream,
                    )?;
                    RolloutRecord {
                        slot,
                        trajectory,
                        cache_hit: true,
                        reused_tokens: v.reused_tokens,
                        generated_tokens: v.generated_tokens,
                        fully_reused: v.fully_reused,
                        verification: Some(v),
                    }
                }
                Some(c) => {
                    let (trajectory, reused) = random_reuse_rollout(
                        policy,
                        prompt_id,
                        &prompt.tokens,
                        c,
                        config.max_len,
                        &mut stream,
                    )?;
                    let generated = trajectory.response.len() - reused;
                    RolloutRecord {
                        slot,
                        trajectory,
                        verification: None,
                        cache_hit: true,
                        reused_tokens: reused,
                        generated_tokens: generated,
                        fully_reused: generated == 0,
                    }
                }
            };
            record.trajectory.reward = reward(prompt, &record.trajectory.response);
            Ok(record)
        })
        .collect()
}

struct Accum {
    samples: usize,
    generated: u64,
    reused: u64,
    response: u64,
    prefix_sum: u64,
    full: usize,
    reward_sum: f64,
    // Token-weighted update statistics.
    tokens: u64,
    entropy_sum: f64,
    kl_sum: f64,
    clip_sum: f64,
}

impl Accum {
    fn new() -> Self {
        Self {
            samples: 0,
            generated: 0,
            reused: 0,
            response: 0,
            prefix_sum: 0,
            full: 0,
            reward_sum: 0.0,
            tokens: 0,
            entropy_sum: 0.0,
            kl_sum: 0.0,
            clip_sum: 0.0,
        }
    }

    fn add_records(&mut self, records: &[RolloutRecord]) {
        for r in records {
            self.samples += 1;
            self.generated += r.generated_tokens as u64;
            self.reused += r.reused_tokens as u64;
            self.response += r.trajectory.response.len() as u64;
            self.prefix_sum += r.reused_tokens as u64;
            self.full += usize::from(r.fully_reused);
            self.reward_sum += r.trajectory.reward;
        }
    }

    fn add_update(&mut self, tokens: u64, entropy: f64, kl: f64, clip: f64) {
        self.tokens += tokens;
        self.entropy_sum += entropy * tokens as f64;
        self.kl_sum += kl * tokens as f64;
        self.clip_sum += clip * tokens as f64;
    }

    fn merge(&mut self, o: &Accum) {
        self.samples += o.samples;
        self.generated += o.generated;
        self.reused += o.reused;
        self.response += o.response;
        self.prefix_sum += o.prefix_sum;
        self.full += o.full;
        self.reward_sum += o.reward_sum;
        self.tokens += o.tokens;
        self.entropy_sum += o.entropy_sum;
        self.kl_sum += o.kl_sum;
        self.clip_sum += o.clip_sum;
    }

    fn per_sample(&self, x: f64) -> f64 {
        x / self.samples.max(1) as f64
    }

    fn per_token(&self, x: f64) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            x / self.tokens as f64
        }
    }
}

/// Runs the full experiment without a token baseline.
pub fn run_experiment(config: &TrainConfig) -> Result<RunOutput> {
    run_with(config, None, &mut |_| Ok(()))
}

/// Runs a vanilla baseline and then `config` with the same seed; the second
/// run's speedups are relative to the first. Returns (baseline, run).
pub fn run_paired(config: &TrainConfig) -> Result<(RunOutput, RunOutput)> {
    let mut vanilla = config.clone();
    vanilla.rollout_mode = RolloutMode::Vanilla;
    let base = run_experiment(&vanilla)?;
    let run = run_with(config, Some(&base.baseline()), &mut |_| Ok(()))?;
    Ok((base, run))
}

/// Runs the experiment, handing every metrics row to `sink` as soon as it is
/// complete, so a failing run still leaves its finished rows behind.
pub fn run_with(
    config: &TrainConfig,
    baseline: Option<&TokenBaseline>,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<RunOutput> {
    config.validate()?;
    let task = ModularSumTask::new(config.digits, config.num_prompts(), config.seed)?;
    let window = config.window.unwrap_or_else(|| task.sufficient_window());
    let mut policy = task.base_policy(window, config.prior_logit)?;
    let update_cfg = config.update_config();

    let mut cache = RolloutCache::new(config.group_size);
    let mut snapshots: HashMap<u64, Policy> = HashMap::new();
    let mut version: u64 = 0;
    let keep_snapshots = config.rollout_mode == RolloutMode::SpecRl
        && config.resume_mode == ResumeMode::ExactResidual;

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut trace = Vec::new();
    let mut global_step = 0usize;
    let ids: Vec<PromptId> = task.prompts().iter().map(|p| p.id).collect();

    for epoch in 1..=config.epochs {
        let mut order = ids.clone();
        order.shuffle(&mut substream(config.seed, &[DOMAIN_SHUFFLE, epoch as u64]));

        let mut epoch_acc = Accum::new();
        let mut pending: Vec<(PromptId, usize, CachedRollout)> = Vec::new();
        let mut prev_responses = EpochResponses::new();
        let mut curr_responses = EpochResponses::new();

        for batch in order.chunks(config.prompts_per_batch) {
            global_step += 1;
            if keep_snapshots {
                snapshots.insert(version, policy.clone());
            }
            let records = rollout_batch(&policy, &task, batch, &cache, &snapshots, config, epoch)?;

            let mut acc = Accum::new();
            acc.add_records(&records);
            if acc.generated + acc.reused != acc.response {
                return Err(Error::Internal(format!(
                    "token accounting broken at step {global_step}: {} + {} != {}",
                    acc.generated, acc.reused, acc.response
                )));
            }

            // Overlap of this batch against last epoch's responses.
            let mut step_prev = EpochResponses::new();
            let mut step_curr = EpochResponses::new();
            for &p in batch {
                let prev: Option<Vec<Vec<TokenId>>> = (0..config.group_size)
                    .map(|s| cache.get(p, s).map(|c| c.response.clone()))
                    .collect();
                if let Some(prev) = prev {
                    step_prev.insert(p, prev);
                }
            }
            for (i, r) in records.iter().enumerate() {
                let p = batch[i / config.group_size];
                step_curr.entry(p).or_default().push(r.trajectory.response.clone());
            }
            let rouge = if step_prev.len() == batch.len() {
                epoch_overlap(epoch, &step_prev, &step_curr, RougeVariant::Recall)?.mean_rouge1
            } else {
                f64::NAN
            };
            prev_responses.extend(step_prev);
            curr_responses.extend(step_curr);

            // Group-relative advantages, one group per prompt.
            let mut advantages = Vec::with_capacity(records.len());
            for group in records.chunks(config.group_size) {
                let rewards: Vec<f64> = group.iter().map(|r| r.trajectory.reward).collect();
                advantages.extend(group_advantages(&rewards));
            }
            let samples: Vec<UpdateSample<'_>> = records
                .iter()
                .zip(&advantages)
                .map(|(r, &a)| UpdateSample {
                    trajectory: &r.trajectory,
                    advantage: a,
                    old_probs: &r.trajectory.gen_probs,
                })
                .collect();

            let reference = policy.clone();
            let mut entropy = 0.0;
            let mut kl = 0.0;
            let mut clip = 0.0;
            let mut tokens = 0;
            for k in 0..config.updates_per_batch {
                let (next, stats) = policy.update(&samples, &update_cfg, &reference)?;
                if k == 0 {
                    entropy = stats.mean_entropy;
                    tokens = stats.tokens as u64;
                }
                clip += stats.clip_fraction / config.updates_per_batch as f64;
                kl = stats.mean_kl;
                policy = next;
            }
            version += 1;
            acc.add_update(tokens, entropy, kl, clip);

            for r in &records {
                let t = &r.trajectory;
                pending.push((
                    t.prompt_id,
                    r.slot,
                    CachedRollout {
                        prompt_id: t.prompt_id,
                        response: t.response.clone(),
                        old_probs: t.gen_probs.clone(),
                        epoch,
                        reward: t.reward,
                        policy_version: version - 1,
                    },
                ));
                trace.push(TraceRecord {
                    epoch,
                    prompt_id: t.prompt_id,
                    slot: r.slot,
                    tokens: t.response.clone(),
                });
            }

            let base = baseline.and_then(|b| b.step_tokens.get(global_step - 1).copied());
            let m = StepMetrics {
                epoch,
                step: global_step,
                samples: acc.samples,
                tokens_generated: acc.generated,
                tokens_reused: acc.reused,
                response_tokens: acc.response,
                speedup: speedup(base, acc.generated, config.rollout_mode),
                mean_prefix_len: acc.per_sample(acc.prefix_sum as f64),
                full_reuse_ratio: acc.per_sample(acc.full as f64),
                rouge1: rouge,
                mean_reward: acc.per_sample(acc.reward_sum),
                entropy: acc.per_token(acc.entropy_sum),
                kl: acc.per_token(acc.kl_sum),
                clip_fraction: acc.per_token(acc.clip_sum),
            };
            sink(&m.to_row())?;
            steps.push(m);
            epoch_acc.merge(&acc);
        }

        // Cache writes happen only at the epoch boundary.
        for (p, s, c) in pending {
            cache.put(p, s, c)?;
        }
        if keep_snapshots {
            let live: HashSet<u64> = cache.iter().map(|(_, _, c)| c.policy_version).collect();
            snapshots.retain(|v, _| live.contains(v));
        }

        let rouge = if prev_responses.len() == curr_responses.len() {
            epoch_overlap(epoch, &prev_responses, &curr_responses, RougeVariant::Recall)?.mean_rouge1
        } else {
            f64::NAN
        };
        let base = baseline.and_then(|b| b.epoch_tokens.get(epoch - 1).copied());
        let e = EpochMetrics {
            epoch,
            samples: epoch_acc.samples,
            tokens_generated: epoch_acc.generated,
            tokens_reused: epoch_acc.reused,
            response_tokens: epoch_acc.response,
            speedup_vs_baseline: speedup(base, epoch_acc.generated, config.rollout_mode),
            mean_verified_prefix_len: epoch_acc.per_sample(epoch_acc.prefix_sum as f64),
            full_reuse_ratio: epoch_acc.per_sample(epoch_acc.full as f64),
            rouge1_overlap: rouge,
            mean_reward: epoch_acc.per_sample(epoch_acc.reward_sum),
            entropy: epoch_acc.per_token(epoch_acc.entropy_sum),
            mean_kl: epoch_acc.per_token(epoch_acc.kl_sum),
            clip_fraction: epoch_acc.per_token(epoch_acc.clip_sum),
        };
        sink(&e.to_row())?;
        epochs.push(e);
    }

    Ok(RunOutput {
        config: config.clone(),
        steps,
        epochs,
        policy,
        cache,
        trace,
    })
}

/// Groups trace records by epoch.
pub fn trace_by_epoch(trace: &[TraceRecord]) -> BTreeMap<usize, EpochResponses> {
    let mut out: BTreeMap<usize, EpochResponses> = BTreeMap::new();
    for r in trace {
        let slots = out.entry(r.epoch).or_default().entry(r.prompt_id).or_default();
        if slots.len() <= r.slot {
            slots.resize(r.slot + 1, Vec::new());
        }
        slots[r.slot] = r.tokens.clone();
    }
    out
}
