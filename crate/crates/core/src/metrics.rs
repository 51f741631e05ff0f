//! Redundancy and training-dynamics measurements, plus the CSV metrics sink.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy::{kl_from_logs, Policy, PromptId, TokenId};

/// Which ROUGE-1 number to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RougeVariant {
    /// Multiset unigram recall against the reference.
    #[default]
    Recall,
    F1,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RougeScore {
    pub value: f64,
    /// Set when the reference was empty; `value` is then 0.
    pub empty_reference: bool,
}

fn counts(tokens: &[TokenId]) -> BTreeMap<TokenId, usize> {
    let mut m = BTreeMap::new();
    for &t in tokens {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

fn multiset_intersection(a: &[TokenId], b: &[TokenId]) -> usize {
    let cb = counts(b);
    counts(a)
        .iter()
        .map(|(t, &n)| n.min(cb.get(t).copied().unwrap_or(0)))
        .sum()
}

/// ROUGE-1 of `candidate` against `reference`.
pub fn rouge1_with(reference: &[TokenId], candidate: &[TokenId], variant: RougeVariant) -> RougeScore {
    if reference.is_empty() {
        return RougeScore {
            value: 0.0,
            empty_reference: true,
        };
    }
    let hits = multiset_intersection(reference, candidate) as f64;
    let recall = hits / reference.len() as f64;
    let value = match variant {
        RougeVariant::Recall => recall,
        RougeVariant::F1 => {
            if hits == 0.0 {
                0.0
            } else {
                let precision = hits / candidate.len() as f64;
                2.0 * precision * recall / (precision + recall)
            }
        }
    };
    RougeScore {
        value,
        empty_reference: false,
    }
}

/// Unigram multiset recall: `|ref ∩ cand| / |ref|`.
pub fn rouge1(reference: &[TokenId], candidate: &[TokenId]) -> RougeScore {
    rouge1_with(reference, candidate, RougeVariant::Recall)
}

/// Responses of one epoch, per prompt, indexed by group slot.
pub type EpochResponses = BTreeMap<PromptId, Vec<Vec<TokenId>>>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub epoch: usize,
    pub mean_rouge1: f64,
    /// Mean over slots, one value per prompt in ascending prompt order.
    pub per_prompt: Vec<f64>,
    pub empty_references: usize,
}

/// ROUGE-1 of every current response against the same slot's response in
/// the previous epoch, averaged per prompt and then over prompts.
pub fn epoch_overlap(
    epoch: usize,
    prev: &EpochResponses,
    curr: &EpochResponses,
    variant: RougeVariant,
) -> Result<OverlapReport> {
    let mut missing: Vec<PromptId> = prev
        .keys()
        .filter(|k| !curr.contains_key(k))
        .chain(curr.keys().filter(|k| !prev.contains_key(k)))
        .copied()
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        return Err(Error::KeyMismatch { missing });
    }
    let mut per_prompt = Vec::with_capacity(curr.len());
    let mut empty_references = 0;
    for (prompt, now) in curr {
        let before = &prev[prompt];
        let pairs = before.len().min(now.len());
        if pairs == 0 {
            return Err(Error::MalformedInput(format!(
                "prompt {prompt} has no paired slots"
            )));
        }
        let mut sum = 0.0;
        for (r, c) in before.iter().zip(now) {
            let score = rouge1_with(r, c, variant);
            empty_references += usize::from(score.empty_reference);
            sum += score.value;
        }
        per_prompt.push(sum / pairs as f64);
    }
    let mean_rouge1 = if per_prompt.is_empty() {
        0.0
    } else {
        per_prompt.iter().sum::<f64>() / per_prompt.len() as f64
    };
    Ok(OverlapReport {
        epoch,
        mean_rouge1,
        per_prompt,
        empty_references,
    })
}

/// Mean exact categorical KL(new || old) over the given contexts.
pub fn kl_estimate(new: &Policy, old: &Policy, contexts: &[Vec<TokenId>]) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::MalformedInput("kl_estimate needs at least one context".into()));
    }
    if new.vocab() != old.vocab() {
        return Err(Error::MalformedInput("policies have different vocabularies".into()));
    }
    let mut total = 0.0;
    for ctx in contexts {
        let p = new.log_dist_for_key(new.context_key(ctx)?);
        let q = old.log_dist_for_key(old.context_key(ctx)?);
        total += kl_from_logs(&p, &q);
    }
    Ok(total / contexts.len() as f64)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant or there are fewer than two points.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// One line of the metrics CSV. `step` is empty on per-epoch summary rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: Option<usize>,
    pub tokens_generated: u64,
    pub tokens_reused: u64,
    pub speedup: f64,
    pub mean_prefix_len: f64,
    pub full_reuse_ratio: f64,
    pub rouge1: f64,
    pub mean_reward: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

/// Append-only CSV sink; every row is flushed as it is written.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner: csv::Writer::from_writer(file),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush().map_err(|e| Error::io("metrics csv", e))
    }
}
