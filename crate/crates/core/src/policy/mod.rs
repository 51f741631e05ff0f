//! Finite-vocabulary contextual softmax policy.
//!
//! The policy maps the last `window` tokens of the running history
//! (prompt followed by the response so far) to a logit vector. Histories
//! shorter than the window are left-padded with a reserved pad symbol that
//! lies outside the token id range, so short prefixes get their own keys.
//!
//! Probabilities are exposed as plain probabilities; anything that forms a
//! ratio of two probabilities goes through log space first
//! (`p_new / p_old == exp(ln p_new - ln p_old)`).

mod checkpoint;
mod update;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::UniformStream;

pub use update::{UpdateConfig, UpdateSample, UpdateStats};

pub type TokenId = u32;
pub type PromptId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: u32,
    eos: TokenId,
}

impl Vocab {
    pub fn new(size: u32, eos: TokenId) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidConfig(format!(
                "vocabulary needs at least 2 tokens, got {size}"
            )));
        }
        if eos >= size {
            return Err(Error::InvalidConfig(format!(
                "eos id {eos} outside vocabulary of size {size}"
            )));
        }
        Ok(Self { size, eos })
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    /// Pad symbol used only inside context keys.
    pub fn pad(&self) -> u64 {
        u64::from(self.size)
    }

    pub fn check(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.size) {
            Some(t) => Err(Error::MalformedInput(format!(
                "token id {t} outside vocabulary of size {}",
                self.size
            ))),
            None => Ok(()),
        }
    }
}

/// Packed encoding of a padded context window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextKey(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    vocab: Vocab,
    window: usize,
    temperature: f64,
    default_logits: Vec<f64>,
    table: HashMap<ContextKey, Vec<f64>>,
}

impl Policy {
    /// All-zero logits everywhere: the uniform policy.
    pub fn uniform(vocab: Vocab, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidConfig("context window must be positive".into()));
        }
        let base = vocab.pad() + 1;
        let fits = (0..window).try_fold(1u64, |acc, _| acc.checked_mul(base));
        if fits.is_none() {
            return Err(Error::InvalidConfig(format!(
                "window {window} over {base} symbols does not fit a 64-bit context key"
            )));
        }
        Ok(Self {
            vocab,
            window,
            temperature: 1.0,
            default_logits: vec![0.0; vocab.size()],
            table: HashMap::new(),
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    /// Logits used by every context without an explicit row.
    pub fn with_default_logits(mut self, logits: Vec<f64>) -> Result<Self> {
        self.check_row(&logits)?;
        self.default_logits = logits;
        Ok(self)
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn default_logits(&self) -> &[f64] {
        &self.default_logits
    }

    /// Number of contexts with an explicit logit row.
    pub fn num_rows(&self) -> usize {
        self.table.len()
    }

    /// Explicit rows in ascending key order.
    pub fn rows(&self) -> Vec<(ContextKey, &[f64])> {
        let mut rows: Vec<_> = self
            .table
            .iter()
            .map(|(k, v)| (*k, v.as_slice()))
            .collect();
        rows.sort_by_key(|(k, _)| *k);
        rows
    }

    fn check_row(&self, logits: &[f64]) -> Result<()> {
        if logits.len() != self.vocab.size() {
            return Err(Error::MalformedInput(format!(
                "logit row has {} entries, vocabulary has {}",
                logits.len(),
                self.vocab.size()
            )));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::MalformedInput("logits must be finite".into()));
        }
        Ok(())
    }

    /// Sets the logits for the context formed by the last `window` tokens of `history`.
    pub fn set_logits(&mut self, history: &[TokenId], logits: Vec<f64>) -> Result<()> {
        let key = self.context_key(history)?;
        self.set_row(key, logits)
    }

    pub fn set_row(&mut self, key: ContextKey, logits: Vec<f64>) -> Result<()> {
        self.check_row(&logits)?;
        self.table.insert(key, logits);
        Ok(())
    }

    /// Mutable access to a row, materializing it from the default logits.
    pub(crate) fn row_mut(&mut self, key: ContextKey) -> &mut Vec<f64> {
        let default = &self.default_logits;
        self.table.entry(key).or_insert_with(|| default.clone())
    }

    pub fn logits(&self, key: ContextKey) -> &[f64] {
        self.table
            .get(&key)
            .map(Vec::as_slice)
            .unwrap_or(&self.default_logits)
    }

    /// Key of the context that predicts the token following `history`.
    pub fn context_key(&self, history: &[TokenId]) -> Result<ContextKey> {
        self.vocab.check(history)?;
        Ok(self.key_unchecked(history))
    }

    fn key_unchecked(&self, history: &[TokenId]) -> ContextKey {
        let base = self.vocab.pad() + 1;
        let start = history.len().saturating_sub(self.window);
        let tail = &history[start..];
        let pad_count = self.window - tail.len();
        let symbols = std::iter::repeat_n(self.vocab.pad(), pad_count)
            .chain(tail.iter().map(|&t| u64::from(t)));
        ContextKey(symbols.fold(0u64, |acc, s| acc * base + s))
    }

    /// Key for predicting position `i` of `response` given `prompt`.
    pub(crate) fn key_at(&self, prompt: &[TokenId], response: &[TokenId], i: usize) -> ContextKey {
        let base = self.vocab.pad() + 1;
        let total = prompt.len() + i;
        let start = total.saturating_sub(self.window);
        let pad_count = self.window - (total - start);
        let symbol = |j: usize| {
            if j < prompt.len() {
                u64::from(prompt[j])
            } else {
                u64::from(response[j - prompt.len()])
            }
        };
        let symbols = std::iter::repeat_n(self.vocab.pad(), pad_count)
            .chain((start..total).map(symbol));
        ContextKey(symbols.fold(0u64, |acc, s| acc * base + s))
    }

    /// Log-probabilities for a context key.
    pub fn log_dist_for_key(&self, key: ContextKey) -> Vec<f64> {
        log_softmax(self.logits(key), self.temperature)
    }

    pub fn dist_for_key(&self, key: ContextKey) -> Vec<f64> {
        softmax(self.logits(key), self.temperature)
    }

    /// Next-token distribution after `context`.
    pub fn next_token_dist(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.dist_for_key(self.context_key(context)?))
    }

    /// Per-token log-probabilities of `response` given `prompt`.
    pub fn score_log(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        self.vocab.check(prompt)?;
        self.vocab.check(response)?;
        Ok((0..response.len())
            .map(|i| {
                let z = self.logits(self.key_at(prompt, response, i));
                log_softmax_at(z, self.temperature, response[i] as usize)
            })
            .collect())
    }

    /// Probability of each response token given the prompt and the
    /// preceding response tokens.
    pub fn score_sequence(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        if response.is_empty() {
            return Err(Error::MalformedInput("cannot score an empty response".into()));
        }
        Ok(self
            .score_log(prompt, response)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    /// Samples one token from the context's distribution. Returns the token
    /// and its probability.
    pub(crate) fn sample_at(
        &self,
        key: ContextKey,
        stream: &mut dyn UniformStream,
    ) -> (TokenId, f64) {
        let dist = self.dist_for_key(key);
        let token = sample_categorical(&dist, stream.next_uniform());
        (token as TokenId, dist[token])
    }

    /// Autoregressive sampling after `prefix` until eos or until the
    /// response reaches `max_len` tokens.
    pub fn sample_continuation(
        &self,
        prompt: &[TokenId],
        prefix: &[TokenId],
        max_len: usize,
        stream: &mut dyn UniformStream,
    ) -> Result<(Vec<TokenId>, Vec<f64>)> {
        self.vocab.check(prompt)?;
        self.vocab.check(prefix)?;
        if prefix.len() > max_len {
            return Err(Error::MalformedInput(format!(
                "prefix of length {} exceeds max_len {max_len}",
                prefix.len()
            )));
        }
        let mut response = prefix.to_vec();
        let mut probs = Vec::new();
        while response.last() != Some(&self.vocab.eos()) && response.len() < max_len {
            let key = self.key_at(prompt, &response, response.len());
            let (token, p) = self.sample_at(key, stream);
            response.push(token);
            probs.push(p);
        }
        Ok((response.split_off(prefix.len()), probs))
    }

    /// Mean Shannon entropy (nats) of the next-token distribution over `contexts`.
    pub fn entropy(&self, contexts: &[Vec<TokenId>]) -> Result<f64> {
        if contexts.is_empty() {
            return Err(Error::MalformedInput("entropy needs at least one context".into()));
        }
        let mut total = 0.0;
        for ctx in contexts {
            total += entropy_of_key(self, self.context_key(ctx)?);
        }
        Ok(total / contexts.len() as f64)
    }
}

pub(crate) fn entropy_of_key(policy: &Policy, key: ContextKey) -> f64 {
    let logp = policy.log_dist_for_key(key);
    -logp.iter().map(|&l| l.exp() * l).sum::<f64>()
}

/// Exact categorical KL(p || q) from log-probabilities.
pub(crate) fn kl_from_logs(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum::<f64>()
        .max(0.0)
}

/// Mean entropy over `contexts`; see [`Policy::entropy`].
pub fn policy_entropy(policy: &Policy, contexts: &[Vec<TokenId>]) -> Result<f64> {
    policy.entropy(contexts)
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    log_softmax(logits, temperature)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Floor on log-probabilities: `ln` of the smallest positive normal f64.
/// Keeps every probability strictly positive after `exp`, even when the
/// logit spread is large enough to underflow.
pub const LOG_PROB_FLOOR: f64 = -708.3964185322641;

pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let lse = log_sum_exp(logits, temperature);
    logits
        .iter()
        .map(|&z| (z / temperature - lse).max(LOG_PROB_FLOOR))
        .collect()
}

fn log_softmax_at(logits: &[f64], temperature: f64, index: usize) -> f64 {
    (logits[index] / temperature - log_sum_exp(logits, temperature)).max(LOG_PROB_FLOOR)
}

fn log_sum_exp(logits: &[f64], temperature: f64) -> f64 {
    let max = logits
        .iter()
        .map(|&z| z / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    max + logits
        .iter()
        .map(|&z| (z / temperature - max).exp())
        .sum::<f64>()
        .ln()
}

/// Inverse-CDF draw from a probability vector. Falls back to the last
/// index with positive mass when rounding leaves `u` above the total.
pub fn sample_categorical(dist: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.iter()
        .rposition(|&p| p > 0.0)
        .expect("distribution has no positive mass")
}

/// A prompt-conditioned response together with the probabilities under the
/// policy that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: PromptId,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub gen_probs: Vec<f64>,
    pub reward: f64,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        if self.gen_probs.len() != self.response.len() {
            return Err(Error::MalformedInput(format!(
                "trajectory for prompt {} has {} tokens but {} probabilities",
                self.prompt_id,
                self.response.len(),
                self.gen_probs.len()
            )));
        }
        if let Some(p) = self.gen_probs.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::MalformedInput(format!(
                "generation probability {p} outside (0, 1]"
            )));
        }
        Ok(())
    }
}
