//! Speculative verification and reuse of a cached rollout.
//!
//! A cached response drawn from an older policy acts as the draft. The
//! current policy scores every draft token in one pass, each token gets the
//! acceptance probability `min(1, lenience * p_new / p_old)`, and the draft
//! is scanned left to right with one uniform per token until the first
//! rejection. The accepted prefix is kept and the current policy generates
//! the rest.
//!
//! Two ways of producing the token at the rejection position are supported:
//!
//! * [`ResumeMode::Resample`] samples it from the current policy's full
//!   next-token distribution. This is what the reuse procedure prescribes,
//!   and it is *not* distribution-exact even at lenience 1.
//! * [`ResumeMode::ExactResidual`] samples it from the normalized residual
//!   `max(0, p_new - p_old)`, the classical speculative-sampling correction.
//!   With lenience 1 the output is then distributed exactly as the current
//!   policy's own samples. It needs the old policy's full distribution at
//!   the rejection position.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::CachedRollout;
use crate::error::{Error, Result};
use crate::policy::{sample_categorical, Policy, PromptId, TokenId, Trajectory};
use crate::rng::UniformStream;

/// Multiplicative relaxation of the acceptance ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lenience {
    /// No reuse: every draft token is rejected.
    Zero,
    Finite { value: f64, log_value: f64 },
    /// Full reuse: every draft token is accepted.
    Infinite,
}

impl Lenience {
    pub fn finite(value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "finite lenience must be positive, got {value}"
            )));
        }
        Ok(Lenience::Finite {
            value,
            log_value: value.ln(),
        })
    }

    /// `e^x`, keeping `x` as the stored log value.
    pub fn exp(x: f64) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::InvalidConfig(format!("lenience exponent {x} is not finite")));
        }
        let value = x.exp();
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::InvalidConfig(format!("e^{x} is out of range")));
        }
        Ok(Lenience::Finite { value, log_value: x })
    }

    pub fn one() -> Self {
        Lenience::Finite {
            value: 1.0,
            log_value: 0.0,
        }
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Lenience::Finite { value, .. } if *value == 1.0)
    }

    /// Position on the extended real line, used for ordering.
    pub fn as_f64(&self) -> f64 {
        match *self {
            Lenience::Zero => 0.0,
            Lenience::Finite { value, .. } => value,
            Lenience::Infinite => f64::INFINITY,
        }
    }
}

impl PartialOrd for Lenience {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.as_f64().partial_cmp(&other.as_f64())
    }
}

/// Accepts `0`, `inf`, plain positive decimals and `e^x`.
impl FromStr for Lenience {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let bad = || Error::InvalidConfig(format!("unparseable lenience `{s}`"));
        match t.to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "+inf" | "∞" => return Ok(Lenience::Infinite),
            _ => {}
        }
        if let Some(exp) = t.strip_prefix("e^") {
            let exp = exp.trim_start_matches('{').trim_end_matches('}');
            let x: f64 = exp.parse().map_err(|_| bad())?;
            return Lenience::exp(x).map_err(|_| bad());
        }
        let v: f64 = t.parse().map_err(|_| bad())?;
        if v == 0.0 {
            Ok(Lenience::Zero)
        } else if v == f64::INFINITY {
            Ok(Lenience::Infinite)
        } else {
            Lenience::finite(v).map_err(|_| bad())
        }
    }
}

impl fmt::Display for Lenience {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Lenience::Zero => write!(f, "0"),
            Lenience::Infinite => write!(f, "inf"),
            Lenience::Finite { value, log_value } => {
                let exponent = log_value.to_string();
                let plain = value.to_string();
                // Prefer `e^x` when the value was built from a short exponent.
                if value != 1.0 && exponent.len() < plain.len() {
                    write!(f, "e^{exponent}")
                } else {
                    write!(f, "{plain}")
                }
            }
        }
    }
}

impl Serialize for Lenience {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Lenience {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => v.to_string().parse(),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResumeMode {
    #[default]
    Resample,
    ExactResidual,
}

impl ResumeMode {
    pub fn validate(&self, lenience: Lenience) -> Result<()> {
        if *self == ResumeMode::ExactResidual && !lenience.is_one() {
            return Err(Error::InvalidConfig(format!(
                "exact_residual resume requires lenience 1, got {lenience}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationResult {
    pub accept_probs: Vec<f64>,
    /// Uniforms actually drawn; scanning stops at the first rejection.
    pub uniforms: Vec<f64>,
    /// 1-based; `len + 1` when the whole draft is accepted.
    pub rejection_position: usize,
    pub reused_tokens: usize,
    pub generated_tokens: usize,
    pub fully_reused: bool,
}

fn check_probs(name: &str, probs: &[f64]) -> Result<()> {
    match probs.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        Some(p) => Err(Error::MalformedInput(format!(
            "{name} probability {p} outside (0, 1]"
        ))),
        None => Ok(()),
    }
}

/// `min(1, lenience * new / old)` per token, evaluated in log space.
pub fn acceptance_probs(old_probs: &[f64], new_probs: &[f64], lenience: Lenience) -> Result<Vec<f64>> {
    if old_probs.len() != new_probs.len() {
        return Err(Error::MalformedInput(format!(
            "{} old probabilities vs {} new probabilities",
            old_probs.len(),
            new_probs.len()
        )));
    }
    check_probs("old", old_probs)?;
    check_probs("new", new_probs)?;
    Ok(match lenience {
        Lenience::Zero => vec![0.0; old_probs.len()],
        Lenience::Infinite => vec![1.0; old_probs.len()],
        Lenience::Finite { log_value, .. } => old_probs
            .iter()
            .zip(new_probs)
            .map(|(&p_old, &p_new)| (log_value + p_new.ln() - p_old.ln()).exp().min(1.0))
            .collect(),
    })
}

/// Scans the draft in order and returns the first position whose uniform
/// exceeds its acceptance probability (1-based), plus the uniforms drawn.
pub fn find_rejection(accept_probs: &[f64], stream: &mut dyn UniformStream) -> (usize, Vec<f64>) {
    let mut uniforms = Vec::with_capacity(accept_probs.len());
    for (i, &alpha) in accept_probs.iter().enumerate() {
        let u = stream.next_uniform();
        uniforms.push(u);
        if u > alpha {
            return (i + 1, uniforms);
        }
    }
    (accept_probs.len() + 1, uniforms)
}

/// Normalized positive part of `target - draft`. `None` when it has no mass.
pub fn residual_distribution(target: &[f64], draft: &[f64]) -> Option<Vec<f64>> {
    let diff: Vec<f64> = target
        .iter()
        .zip(draft)
        .map(|(&q, &p)| (q - p).max(0.0))
        .collect();
    let mass: f64 = diff.iter().sum();
    (mass > 0.0).then(|| diff.into_iter().map(|d| d / mass).collect())
}

/// What the resume step needs to know about the rejection position.
#[derive(Debug, Clone, Copy)]
pub enum RejectionContext<'a> {
    /// Resample the rejected position from the current policy.
    Fresh,
    /// Old policy's next-token distribution at the rejection position.
    Residual { old_next: &'a [f64] },
}

/// Generates the suffix starting at the rejection position.
pub fn resume(
    policy: &Policy,
    prompt: &[TokenId],
    verified_prefix: &[TokenId],
    rejection: RejectionContext<'_>,
    max_len: usize,
    stream: &mut dyn UniformStream,
) -> Result<(Vec<TokenId>, Vec<f64>)> {
    let old_next = match rejection {
        RejectionContext::Fresh => {
            return policy.sample_continuation(prompt, verified_prefix, max_len, stream)
        }
        RejectionContext::Residual { old_next } => old_next,
    };
    policy.vocab().check(prompt)?;
    policy.vocab().check(verified_prefix)?;
    if verified_prefix.len() >= max_len || verified_prefix.last() == Some(&policy.vocab().eos()) {
        return Err(Error::Internal(
            "rejection position lies past the end of the response".into(),
        ));
    }
    if old_next.len() != policy.vocab().size() {
        return Err(Error::MalformedInput(format!(
            "old distribution has {} entries, vocabulary has {}",
            old_next.len(),
            policy.vocab().size()
        )));
    }
    let key = policy.key_at(prompt, verified_prefix, verified_prefix.len());
    let target = policy.dist_for_key(key);
    let residual = residual_distribution(&target, old_next).ok_or_else(|| {
        Error::Internal("residual distribution is identically zero at a rejection".into())
    })?;
    let first = sample_categorical(&residual, stream.next_uniform()) as TokenId;

    let mut prefix = verified_prefix.to_vec();
    prefix.push(first);
    let (rest, rest_probs) = policy.sample_continuation(prompt, &prefix, max_len, stream)?;
    let mut suffix = vec![first];
    suffix.extend(rest);
    // Store the current policy's probability of the token, as for reused tokens.
    let mut probs = vec![target[first as usize]];
    probs.extend(rest_probs);
    Ok((suffix, probs))
}

/// Verifies a cached rollout under `policy`, keeps the accepted prefix and
/// regenerates the remainder.
///
/// The returned trajectory's `gen_probs` hold the current policy's
/// probabilities for every token: re-scored ones for the reused prefix and
/// sampling probabilities for the generated suffix. `old_policy` is only
/// consulted in [`ResumeMode::ExactResidual`]. The trajectory's reward is
/// left at 0 for the caller to fill in.
#[allow(clippy::too_many_arguments)]
pub fn speculative_rollout(
    policy: &Policy,
    prompt_id: PromptId,
    prompt: &[TokenId],
    cached: &CachedRollout,
    lenience: Lenience,
    mode: ResumeMode,
    old_policy: Option<&Policy>,
    max_len: usize,
    stream: &mut dyn UniformStream,
) -> Result<(Trajectory, VerificationResult)> {
    mode.validate(lenience)?;
    if cached.prompt_id != prompt_id {
        return Err(Error::MalformedInput(format!(
            "cached rollout belongs to prompt {}, not {prompt_id}",
            cached.prompt_id
        )));
    }
    cached.validate()?;
    if max_len == 0 {
        return Err(Error::InvalidConfig("max_len must be positive".into()));
    }

    // Cached tokens beyond the current budget are never verified.
    let len = cached.response.len().min(max_len);
    let draft = &cached.response[..len];
    let new_probs = if draft.is_empty() {
        Vec::new()
    } else {
        policy.score_sequence(prompt, draft)?
    };
    let accept_probs = acceptance_probs(&cached.old_probs[..len], &new_probs, lenience)?;
    let (n, uniforms) = find_rejection(&accept_probs, stream);

    let prefix = &draft[..n - 1];
    let mut response = prefix.to_vec();
    let mut gen_probs = new_probs[..n - 1].to_vec();
    let fully_reused = n == len + 1;
    let mut generated = 0;
    if !fully_reused {
        let old_next;
        let rejection = match mode {
            ResumeMode::Resample => RejectionContext::Fresh,
            ResumeMode::ExactResidual => {
                let old = old_policy.ok_or_else(|| {
                    Error::InvalidConfig("exact_residual resume needs the old policy".into())
                })?;
                old_next = old.dist_for_key(old.key_at(prompt, prefix, prefix.len()));
                RejectionContext::Residual { old_next: &old_next }
            }
        };
        let (suffix, probs) = resume(policy, prompt, prefix, rejection, max_len, stream)?;
        generated = suffix.len();
        response.extend(suffix);
        gen_probs.extend(probs);
    }

    let trajectory = Trajectory {
        prompt_id,
        prompt: prompt.to_vec(),
        response,
        gen_probs,
        reward: 0.0,
    };
    let result = VerificationResult {
        accept_probs,
        uniforms,
        rejection_position: n,
        reused_tokens: n - 1,
        generated_tokens: generated,
        fully_reused,
    };
    Ok((trajectory, result))
}

/// Reuse baseline: the rejection position is uniform on `1..=len+1`
/// regardless of the policies, then generation resumes from the current
/// policy. Returns the trajectory and the number of reused tokens.
pub fn random_reuse_rollout(
    policy: &Policy,
    prompt_id: PromptId,
    prompt: &[TokenId],
    cached: &CachedRollout,
    max_len: usize,
    stream: &mut dyn UniformStream,
) -> Result<(Trajectory, usize)> {
    cached.validate()?;
    let len = cached.response.len().min(max_len);
    let draft = &cached.response[..len];
    let u = stream.next_uniform();
    let n = ((u * (len + 1) as f64).floor() as usize).min(len) + 1;
    let prefix = &draft[..n - 1];
    let mut gen_probs = if prefix.is_empty() {
        Vec::new()
    } else {
        policy.score_sequence(prompt, prefix)?
    };
    let mut response = prefix.to_vec();
    if n <= len {
        let (suffix, probs) =
            resume(policy, prompt, prefix, RejectionContext::Fresh, max_len, stream)?;
        response.extend(suffix);
        gen_probs.extend(probs);
    }
    let trajectory = Trajectory {
        prompt_id,
        prompt: prompt.to_vec(),
        response,
        gen_probs,
        reward: 0.0,
    };
    Ok((trajectory, n - 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Vocab;
    use crate::rng::{substream, ReplayStream};
    use proptest::prelude::*;

    fn cached(prompt_id: u32, response: Vec<u32>, old_probs: Vec<f64>) -> CachedRollout {
        CachedRollout {
            prompt_id,
            response,
            old_probs,
            epoch: 1,
            reward: 0.0,
            policy_version: 0,
        }
    }

    #[test]
    fn lenience_parsing() {
        assert_eq!("0".parse::<Lenience>().unwrap(), Lenience::Zero);
        assert_eq!("inf".parse::<Lenience>().unwrap(), Lenience::Infinite);
        assert!("1".parse::<Lenience>().unwrap().is_one());
        let l: Lenience = "e^0.5".parse().unwrap();
        assert!((l.as_f64() - 1.648721).abs() < 1e-6);
        assert_eq!(l.to_string(), "e^0.5");
        assert!("e^x".parse::<Lenience>().is_err());
        assert!("-1".parse::<Lenience>().is_err());
        let err = "banana".parse::<Lenience>().unwrap_err().to_string();
        assert!(err.contains("banana"));
    }

    #[test]
    fn lenience_ordering() {
        let l1 = Lenience::one();
        let l2 = Lenience::exp(0.5).unwrap();
        assert!(Lenience::Zero < l1 && l1 < l2 && l2 < Lenience::Infinite);
    }

    #[test]
    fn acceptance_examples() {
        let p = [0.3, 0.6, 1.0];
        assert_eq!(acceptance_probs(&p, &p, Lenience::one()).unwrap(), vec![1.0; 3]);
        let a = acceptance_probs(&[0.5], &[0.25], Lenience::exp(0.5).unwrap()).unwrap();
        assert!((a[0] - 0.824361).abs() < 1e-6);
        assert_eq!(
            acceptance_probs(&[0.9, 0.1], &[0.01, 0.2], Lenience::Infinite).unwrap(),
            vec![1.0, 1.0]
        );
        assert_eq!(
            acceptance_probs(&[0.9, 0.1], &[0.9, 0.2], Lenience::Zero).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn acceptance_rejects_bad_input() {
        assert!(acceptance_probs(&[0.5], &[0.5, 0.5], Lenience::one()).is_err());
        assert!(acceptance_probs(&[0.0], &[0.5], Lenience::one()).is_err());
        assert!(acceptance_probs(&[0.5], &[1.5], Lenience::one()).is_err());
    }

    #[test]
    fn rejection_scan() {
        let mut s = ReplayStream::new(vec![0.3, 0.7, 0.1]);
        let (n, u) = find_rejection(&[1.0, 0.5, 1.0], &mut s);
        assert_eq!(n, 2);
        assert_eq!(u, vec![0.3, 0.7]);
        assert_eq!(s.consumed(), 2);

        let mut rng = substream(1, &[]);
        let (n, u) = find_rejection(&[1.0; 5], &mut rng);
        assert_eq!((n, u.len()), (6, 5));
        let (n, u) = find_rejection(&[0.0; 5], &mut rng);
        assert_eq!((n, u.len()), (1, 1));
    }

    #[test]
    fn residual_example() {
        let r = residual_distribution(&[0.8, 0.2], &[0.5, 0.5]).unwrap();
        assert_eq!(r, vec![1.0, 0.0]);
        assert!(residual_distribution(&[0.5, 0.5], &[0.5, 0.5]).is_none());
    }

    #[test]
    fn residual_resume_picks_only_positive_mass_token() {
        // vocab {a=0, eos=1}; target (0.8, 0.2), old (0.5, 0.5).
        let v = Vocab::new(2, 1).unwrap();
        let p = Policy::uniform(v, 1)
            .unwrap()
            .with_default_logits(vec![4f64.ln(), 0.0])
            .unwrap();
        let mut rng = substream(9, &[]);
        for _ in 0..50 {
            let (suffix, _) = resume(
                &p,
                &[0],
                &[],
                RejectionContext::Residual { old_next: &[0.5, 0.5] },
                1,
                &mut rng,
            )
            .unwrap();
            assert_eq!(suffix, vec![0]);
        }
    }

    #[test]
    fn residual_guard_reports_internal_error() {
        let v = Vocab::new(2, 1).unwrap();
        let p = Policy::uniform(v, 1).unwrap();
        let mut rng = substream(9, &[]);
        let err = resume(
            &p,
            &[0],
            &[],
            RejectionContext::Residual { old_next: &[0.5, 0.5] },
            2,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Internal(_)));
    }

    #[test]
    fn resample_resume_follows_near_deterministic_policy() {
        let v = Vocab::new(3, 2).unwrap();
        let p = Policy::uniform(v, 2)
            .unwrap()
            .with_default_logits(vec![50.0, 0.0, 0.0])
            .unwrap();
        let mut rng = substream(2, &[]);
        let (suffix, _) = resume(&p, &[1], &[1, 1], RejectionContext::Fresh, 5, &mut rng).unwrap();
        assert_eq!(suffix, vec![0, 0, 0]);
    }

    #[test]
    fn identical_policy_reuses_everything() {
        let v = Vocab::new(4, 3).unwrap();
        let mut p = Policy::uniform(v, 2).unwrap();
        p.set_logits(&[0], vec![0.4, 0.1, -0.3, 0.0]).unwrap();
        let mut rng = substream(4, &[]);
        let (resp, probs) = p.sample_continuation(&[0], &[], 6, &mut rng).unwrap();
        let c = cached(7, resp.clone(), probs);
        let (t, r) = speculative_rollout(
            &p, 7, &[0], &c, Lenience::one(), ResumeMode::Resample, None, 6, &mut rng,
        )
        .unwrap();
        assert!(r.fully_reused);
        assert_eq!(r.generated_tokens, 0);
        assert_eq!(t.response, resp);
        assert_eq!(t.gen_probs, c.old_probs);
    }

    #[test]
    fn zero_lenience_regenerates_from_scratch() {
        let v = Vocab::new(4, 3).unwrap();
        let p = Policy::uniform(v, 2).unwrap();
        let c = cached(1, vec![0, 1, 3], vec![0.25; 3]);
        let mut a = substream(8, &[]);
        let (t, r) = speculative_rollout(
            &p, 1, &[2], &c, Lenience::Zero, ResumeMode::Resample, None, 6, &mut a,
        )
        .unwrap();
        assert_eq!(r.rejection_position, 1);
        assert_eq!(r.reused_tokens, 0);
        assert_eq!(r.uniforms.len(), 1);
        // After the one verification draw the stream continues exactly like a vanilla rollout.
        let mut b = substream(8, &[]);
        b.next_uniform();
        let (vanilla, _) = p.sample_continuation(&[2], &[], 6, &mut b).unwrap();
        assert_eq!(t.response, vanilla);
    }

    #[test]
    fn infinite_lenience_returns_the_draft() {
        let v = Vocab::new(4, 3).unwrap();
        let p = Policy::uniform(v, 2)
            .unwrap()
            .with_default_logits(vec![-5.0, 5.0, 0.0, 0.0])
            .unwrap();
        let c = cached(1, vec![0, 0, 3], vec![0.9, 0.9, 0.9]);
        let mut rng = substream(8, &[]);
        let (t, r) = speculative_rollout(
            &p, 1, &[2], &c, Lenience::Infinite, ResumeMode::Resample, None, 6, &mut rng,
        )
        .unwrap();
        assert!(r.fully_reused);
        assert_eq!(t.response, c.response);
        // Reused tokens carry the current policy's probabilities.
        assert_eq!(t.gen_probs, p.score_sequence(&[2], &c.response).unwrap());
    }

    #[test]
    fn truncates_draft_to_budget() {
        let v = Vocab::new(3, 2).unwrap();
        let p = Policy::uniform(v, 1).unwrap();
        let c = cached(0, vec![0, 1, 0, 1, 2], vec![1.0 / 3.0; 5]);
        let mut rng = substream(3, &[]);
        let (t, r) = speculative_rollout(
            &p, 0, &[0], &c, Lenience::one(), ResumeMode::Resample, None, 3, &mut rng,
        )
        .unwrap();
        assert_eq!(r.accept_probs.len(), 3);
        assert!(r.fully_reused);
        assert_eq!(t.response, vec![0, 1, 0]);
    }

    #[test]
    fn exact_residual_requires_unit_lenience() {
        let v = Vocab::new(3, 2).unwrap();
        let p = Policy::uniform(v, 1).unwrap();
        let c = cached(0, vec![0, 2], vec![0.5, 0.5]);
        let mut rng = substream(3, &[]);
        let err = speculative_rollout(
            &p,
            0,
            &[0],
            &c,
            Lenience::exp(0.5).unwrap(),
            ResumeMode::ExactResidual,
            Some(&p),
            4,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn wrong_prompt_rejected() {
        let v = Vocab::new(3, 2).unwrap();
        let p = Policy::uniform(v, 1).unwrap();
        let c = cached(4, vec![0, 2], vec![0.5, 0.5]);
        let mut rng = substream(3, &[]);
        assert!(speculative_rollout(
            &p, 5, &[0], &c, Lenience::one(), ResumeMode::Resample, None, 4, &mut rng
        )
        .is_err());
    }

    #[test]
    fn random_reuse_keeps_a_prefix() {
        let v = Vocab::new(3, 2).unwrap();
        let p = Policy::uniform(v, 1).unwrap();
        let c = cached(0, vec![0, 1, 0, 2], vec![1.0 / 3.0; 4]);
        let mut rng = substream(3, &[]);
        let mut seen = [false; 5];
        for _ in 0..200 {
            let (t, reused) = random_reuse_rollout(&p, 0, &[1], &c, 8, &mut rng).unwrap();
            assert_eq!(&t.response[..reused], &c.response[..reused]);
            assert_eq!(t.gen_probs.len(), t.response.len());
            seen[reused] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..12).prop_flat_map(|n| {
            (
                proptest::collection::vec(1e-4f64..=1.0, n),
                proptest::collection::vec(1e-4f64..=1.0, n),
                proptest::collection::vec(1e-9f64..1.0, n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn rejection_position_monotone_in_lenience(
            (old, new, us) in arb_instance(),
            x1 in -3.0f64..3.0,
            dx in 0.0f64..3.0,
        ) {
            let settings = [
                Lenience::Zero,
                Lenience::exp(x1).unwrap(),
                Lenience::exp(x1 + dx).unwrap(),
                Lenience::Infinite,
            ];
            let mut last = 0;
            for l in settings {
                let a = acceptance_probs(&old, &new, l).unwrap();
                let (n, drawn) = find_rejection(&a, &mut ReplayStream::new(us.clone()));
                prop_assert!(n >= last);
                prop_assert_eq!(drawn.len(), n.min(old.len()));
                for i in 0..n - 1 {
                    prop_assert!(drawn[i] <= a[i]);
                }
                if n <= old.len() {
                    prop_assert!(drawn[n - 1] > a[n - 1]);
                }
                last = n;
            }
        }

        #[test]
        fn token_accounting_holds(seed in any::<u64>(), lx in -2.0f64..2.0) {
            let v = Vocab::new(4, 3).unwrap();
            let mut rng = substream(seed, &[]);
            let mut old = Policy::uniform(v, 2).unwrap();
            let mut new = Policy::uniform(v, 2).unwrap();
            for a in 0..4u32 {
                let r1 = (0..4).map(|_| rng.next_uniform() * 2.0 - 1.0).collect();
                let r2 = (0..4).map(|_| rng.next_uniform() * 2.0 - 1.0).collect();
                old.set_logits(&[a], r1).unwrap();
                new.set_logits(&[a], r2).unwrap();
            }
            let (resp, probs) = old.sample_continuation(&[0], &[], 6, &mut rng).unwrap();
            let c = cached(0, resp, probs);
            for l in [Lenience::Zero, Lenience::exp(lx).unwrap(), Lenience::Infinite] {
                let (t, r) = speculative_rollout(
                    &new, 0, &[0], &c, l, ResumeMode::Resample, None, 6, &mut rng,
                ).unwrap();
                prop_assert_eq!(r.reused_tokens + r.generated_tokens, t.response.len());
                prop_assert_eq!(r.reused_tokens, r.rejection_position - 1);
                prop_assert_eq!(r.fully_reused, r.rejection_position == c.response.len() + 1);
                prop_assert_eq!(t.gen_probs.len(), t.response.len());
                if l == Lenience::Zero { prop_assert_eq!(r.reused_tokens, 0); }
                if l == Lenience::Infinite { prop_assert!(r.fully_reused && r.generated_tokens == 0); }
            }
        }
    }
}
