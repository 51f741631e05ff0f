//! Brute-force sequence distributions on tiny instances.
//!
//! These enumerators integrate analytically over every source of
//! randomness (draft draws, acceptance uniforms, continuations), so the
//! resulting distributions carry no Monte Carlo noise. They exist to
//! ground-truth the samplers in [`crate::policy`] and [`crate::spec_rollout`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hexfloat;
use crate::policy::{Policy, TokenId};
use crate::spec_rollout::{acceptance_probs, residual_distribution, Lenience, ResumeMode};

/// Largest `vocab^max_len` the enumerators accept.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Probability of every terminated response (ends in eos or reaches max_len).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SequenceDistribution {
    probs: BTreeMap<Vec<TokenId>, f64>,
}

impl SequenceDistribution {
    pub fn new() -> Self {
        Self::default()
    }

    fn add(&mut self, seq: Vec<TokenId>, p: f64) {
        *self.probs.entry(seq).or_insert(0.0) += p;
    }

    pub fn prob(&self, seq: &[TokenId]) -> f64 {
        self.probs.get(seq).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Entries in canonical (lexicographic) sequence order.
    pub fn iter(&self) -> impl Iterator<Item = (&[TokenId], f64)> {
        self.probs.iter().map(|(k, &v)| (k.as_slice(), v))
    }

    /// Total-variation distance `0.5 * sum |p - q|` over the union of supports.
    pub fn tv_distance(&self, other: &SequenceDistribution) -> f64 {
        let mut sum = 0.0;
        for (seq, &p) in &self.probs {
            sum += (p - other.prob(seq)).abs();
        }
        for (seq, &q) in &other.probs {
            if !self.probs.contains_key(seq) {
                sum += q;
            }
        }
        0.5 * sum
    }

    /// Text dump: a header line, then `tokens<TAB>hex-bits<TAB>decimal` per
    /// sequence, with `-` standing for the empty sequence.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# specrl sequence-distribution v1\n");
        for (seq, p) in self.iter() {
            let toks = if seq.is_empty() {
                "-".to_string()
            } else {
                seq.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
            };
            out.push_str(&format!("{toks}\t{}\t{p}\n", hexfloat::encode(p)));
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("# specrl sequence-distribution v1") {
            return Err(Error::parse(path, 1, "missing distribution header"));
        }
        let mut dist = SequenceDistribution::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(path, lineno, "expected 3 tab-separated fields"));
            }
            let seq = if fields[0] == "-" {
                Vec::new()
            } else {
                fields[0]
                    .split(',')
                    .map(|t| t.parse::<TokenId>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::parse(path, lineno, format!("bad token: {e}")))?
            };
            let p = hexfloat::decode(fields[1])
                .ok_or_else(|| Error::parse(path, lineno, "bad probability bits"))?;
            if dist.probs.insert(seq, p).is_some() {
                return Err(Error::parse(path, lineno, "duplicate sequence"));
            }
        }
        Ok(dist)
    }
}

fn guard(policy: &Policy, max_len: usize) -> Result<()> {
    let sequences = (policy.vocab().size() as u128).checked_pow(max_len as u32);
    match sequences {
        Some(n) if n <= ENUMERATION_LIMIT => Ok(()),
        _ => Err(Error::TooLarge {
            sequences: sequences.unwrap_or(u128::MAX),
            limit: ENUMERATION_LIMIT,
        }),
    }
}

/// Depth-first extension of `prefix` under `policy`, in token order.
fn extend(
    policy: &Policy,
    prompt: &[TokenId],
    prefix: &mut Vec<TokenId>,
    weight: f64,
    max_len: usize,
    out: &mut SequenceDistribution,
) {
    if weight == 0.0 {
        return;
    }
    if prefix.len() >= max_len || prefix.last() == Some(&policy.vocab().eos()) {
        out.add(prefix.clone(), weight);
        return;
    }
    let dist = policy.dist_for_key(policy.key_at(prompt, prefix, prefix.len()));
    for (t, &p) in dist.iter().enumerate() {
        prefix.push(t as TokenId);
        extend(policy, prompt, prefix, weight * p, max_len, out);
        prefix.pop();
    }
}

/// Exact distribution of `policy.sample_continuation(prompt, [], max_len)`.
pub fn enumerate_direct(policy: &Policy, prompt: &[TokenId], max_len: usize) -> Result<SequenceDistribution> {
    guard(policy, max_len)?;
    policy.vocab().check(prompt)?;
    let mut out = SequenceDistribution::new();
    extend(policy, prompt, &mut Vec::new(), 1.0, max_len, &mut out);
    Ok(out)
}

/// Exact output distribution of a speculative rollout whose draft is a
/// fresh sample from `old`, verified and resumed under `new`.
pub fn enumerate_spec(
    new: &Policy,
    old: &Policy,
    prompt: &[TokenId],
    max_len: usize,
    lenience: Lenience,
    mode: ResumeMode,
) -> Result<SequenceDistribution> {
    mode.validate(lenience)?;
    if new.vocab() != old.vocab() {
        return Err(Error::InvalidConfig("policies have different vocabularies".into()));
    }
    let drafts = enumerate_direct(old, prompt, max_len)?;
    let mut out = SequenceDistribution::new();
    for (draft, p_draft) in drafts.iter() {
        if draft.is_empty() {
            out.add(Vec::new(), p_draft);
            continue;
        }
        let old_probs = old.score_sequence(prompt, draft)?;
        let new_probs = new.score_sequence(prompt, draft)?;
        let alpha = acceptance_probs(&old_probs, &new_probs, lenience)?;

        // Probability that every token before the current one was accepted.
        let mut reach = p_draft;
        for (i, &a) in alpha.iter().enumerate() {
            let reject = reach * (1.0 - a);
            if reject > 0.0 {
                let mut prefix = draft[..i].to_vec();
                match mode {
                    ResumeMode::Resample => {
                        extend(new, prompt, &mut prefix, reject, max_len, &mut out);
                    }
                    ResumeMode::ExactResidual => {
                        let target = new.dist_for_key(new.key_at(prompt, &prefix, i));
                        let draft_dist = old.dist_for_key(old.key_at(prompt, &prefix, i));
                        let residual = residual_distribution(&target, &draft_dist).ok_or_else(|| {
                            Error::Internal("residual distribution is identically zero".into())
                        })?;
                        for (t, &r) in residual.iter().enumerate() {
                            prefix.push(t as TokenId);
                            extend(new, prompt, &mut prefix, reject * r, max_len, &mut out);
                            prefix.pop();
                        }
                    }
                }
            }
            reach *= a;
        }
        out.add(draft.to_vec(), reach);
    }
    Ok(out)
}

/// A canonical tiny instance checked into the repository together with its
/// frozen expected distributions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleFixture {
    pub name: String,
    pub prompt: Vec<TokenId>,
    pub max_len: usize,
    pub new_policy: serde_json::Value,
    pub old_policy: serde_json::Value,
}

impl OracleFixture {
    pub fn new(name: &str, prompt: Vec<TokenId>, max_len: usize, new: &Policy, old: &Policy) -> Self {
        let to_value = |p: &Policy| {
            serde_json::from_str(&p.to_checkpoint_string()).expect("checkpoint is valid json")
        };
        Self {
            name: name.to_string(),
            prompt,
            max_len,
            new_policy: to_value(new),
            old_policy: to_value(old),
        }
    }

    pub fn policies(&self) -> Result<(Policy, Policy)> {
        Ok((
            Policy::from_checkpoint_str(&self.new_policy.to_string())?,
            Policy::from_checkpoint_str(&self.old_policy.to_string())?,
        ))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("fixture serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn load_distribution(path: &Path) -> Result<SequenceDistribution> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SequenceDistribution::from_text(&text, path)
}
