//! Clipped-surrogate policy-gradient step with a KL penalty.
//!
//! Objective maximized by one step of gradient ascent:
//!
//! ```text
//! J = (1/B) * sum_seq sum_tok [ min(r*A, clip(r, 1-eps_low, 1+eps_high)*A)
//!                               - kl_coef * KL(pi(.|ctx) || pi_ref(.|ctx)) ]
//! ```
//!
//! where `B` is the number of sequences, `r = pi(tok|ctx) / old_prob` and
//! `pi_ref` is the policy snapshot taken before the batch's first update.

use std::collections::HashMap;

use super::{kl_from_logs, ContextKey, Policy, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateConfig {
    pub learning_rate: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_coef: f64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            clip_low: 0.2,
            clip_high: 0.2,
            kl_coef: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UpdateSample<'a> {
    pub trajectory: &'a Trajectory,
    pub advantage: f64,
    pub old_probs: &'a [f64],
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    /// Share of tokens whose clipped branch binds.
    pub clip_fraction: f64,
    /// Mean per-token KL(updated || reference).
    pub mean_kl: f64,
    /// Mean per-token entropy of the pre-update policy.
    pub mean_entropy: f64,
    pub tokens: usize,
}

fn check_batch(policy: &Policy, batch: &[UpdateSample<'_>]) -> Result<()> {
    for s in batch {
        if !s.advantage.is_finite() {
            return Err(Error::MalformedInput(format!(
                "non-finite advantage {}",
                s.advantage
            )));
        }
        let t = s.trajectory;
        if s.old_probs.len() != t.response.len() {
            return Err(Error::MalformedInput(format!(
                "prompt {}: {} old probabilities for {} response tokens",
                t.prompt_id,
                s.old_probs.len(),
                t.response.len()
            )));
        }
        if s.old_probs.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::MalformedInput(format!(
                "prompt {}: old probability outside (0, 1]",
                t.prompt_id
            )));
        }
        policy.vocab.check(&t.prompt)?;
        policy.vocab.check(&t.response)?;
    }
    Ok(())
}

struct Gradient {
    rows: HashMap<ContextKey, Vec<f64>>,
    clipped: usize,
    tokens: usize,
    entropy_sum: f64,
    // Contexts in visiting order, for KL reporting after the step.
    visited: Vec<ContextKey>,
}

impl Policy {
    fn surrogate_gradient(
        &self,
        batch: &[UpdateSample<'_>],
        config: &UpdateConfig,
        reference: &Policy,
    ) -> Gradient {
        let n_seq = batch.len().max(1) as f64;
        let inv_t = 1.0 / self.temperature;
        let mut grad = Gradient {
            rows: HashMap::new(),
            clipped: 0,
            tokens: 0,
            entropy_sum: 0.0,
            visited: Vec::new(),
        };
        for s in batch {
            let t = s.trajectory;
            let a = s.advantage;
            for (i, &tok) in t.response.iter().enumerate() {
                let key = self.key_at(&t.prompt, &t.response, i);
                let logp = self.log_dist_for_key(key);
                let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
                let ratio = (logp[tok as usize] - s.old_probs[i].ln()).exp();

                let clipped = (a > 0.0 && ratio > 1.0 + config.clip_high)
                    || (a < 0.0 && ratio < 1.0 - config.clip_low);

                let row = grad
                    .rows
                    .entry(key)
                    .or_insert_with(|| vec![0.0; p.len()]);
                if !clipped {
                    // d(r*A)/dz_j = A * r * (1[j == tok] - p_j) / T
                    let scale = a * ratio * inv_t / n_seq;
                    for (j, g) in row.iter_mut().enumerate() {
                        let onehot = if j == tok as usize { 1.0 } else { 0.0 };
                        *g += scale * (onehot - p[j]);
                    }
                }
                if config.kl_coef != 0.0 {
                    // dKL(p||q)/dz_j = p_j * (ln p_j - ln q_j - KL) / T
                    let logq = reference.log_dist_for_key(key);
                    let kl: f64 = p
                        .iter()
                        .zip(logp.iter().zip(&logq))
                        .map(|(&pj, (&lp, &lq))| pj * (lp - lq))
                        .sum();
                    let scale = config.kl_coef * inv_t / n_seq;
                    for (j, g) in row.iter_mut().enumerate() {
                        *g -= scale * p[j] * (logp[j] - logq[j] - kl);
                    }
                }

                grad.clipped += usize::from(clipped);
                grad.tokens += 1;
                grad.entropy_sum -= p.iter().zip(&logp).map(|(&x, &l)| x * l).sum::<f64>();
                grad.visited.push(key);
            }
        }
        grad
    }

    /// Analytic gradient of the objective with respect to every logit row
    /// touched by the batch.
    pub fn objective_gradient(
        &self,
        batch: &[UpdateSample<'_>],
        config: &UpdateConfig,
        reference: &Policy,
    ) -> Result<HashMap<ContextKey, Vec<f64>>> {
        check_batch(self, batch)?;
        Ok(self.surrogate_gradient(batch, config, reference).rows)
    }

    /// One gradient-ascent step on the clipped surrogate.
    pub fn update(
        &self,
        batch: &[UpdateSample<'_>],
        config: &UpdateConfig,
        reference: &Policy,
    ) -> Result<(Policy, UpdateStats)> {
        check_batch(self, batch)?;
        if reference.vocab != self.vocab || reference.window != self.window {
            return Err(Error::InvalidConfig(
                "reference policy has a different vocabulary or window".into(),
            ));
        }
        let grad = self.surrogate_gradient(batch, config, reference);

        let mut keys: Vec<_> = grad.rows.keys().copied().collect();
        keys.sort();
        if let Some(k) = keys
            .iter()
            .find(|k| grad.rows[k].iter().any(|g| !g.is_finite()))
        {
            return Err(Error::Divergence(format!(
                "non-finite gradient for context {}",
                k.0
            )));
        }

        let mut next = self.clone();
        for key in keys {
            let g = &grad.rows[&key];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let row = next.row_mut(key);
            for (z, dz) in row.iter_mut().zip(g) {
                *z += config.learning_rate * dz;
            }
            if row.iter().any(|z| !z.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite logits for context {} after step",
                    key.0
                )));
            }
        }

        let tokens = grad.tokens;
        let denom = tokens.max(1) as f64;
        let kl_sum: f64 = grad
            .visited
            .iter()
            .map(|&k| kl_from_logs(&next.log_dist_for_key(k), &reference.log_dist_for_key(k)))
            .sum();
        let stats = UpdateStats {
            clip_fraction: grad.clipped as f64 / denom,
            mean_kl: kl_sum / denom,
            mean_entropy: grad.entropy_sum / denom,
            tokens,
        };
        Ok((next, stats))
    }
}
