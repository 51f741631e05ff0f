// Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use specrl::oracle::OracleFixture;
use specrl::policy::{ContextKey, UpdateConfig, UpdateSample};
use specrl::rng::{substream, UniformStream};
use specrl::{Policy, TokenId, Trajectory, Vocab};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/oracle")
}

pub const FIXTURE_NAMES: [&str; 5] = ["two_token", "v2_len2", "v3_len2", "v3_len3", "v4_len3"];

// Two-token instance, worked by hand. Draft `a` (prob 1/2) is always
// accepted since 0.8/0.5 > 1. Draft eos (prob 1/2) is accepted with
// 0.2/0.5 = 0.4; otherwise a fresh draw from (0.8, 0.2) follows.
//   P(a)   = 0.5 + 0.5 * 0.6 * 0.8 = 0.74
//   P(eos) = 0.5 * 0.4 + 0.5 * 0.6 * 0.2 = 0.26
// Against the target (0.8, 0.2): TV = 0.06.
pub const HAND_P_A: f64 = 0.74;
pub const HAND_P_EOS: f64 = 0.26;
pub const HAND_TV: f64 = 0.06;

pub fn two_token_policies() -> (Policy, Policy) {
    let v = Vocab::new(2, 1).unwrap();
    let new = Policy::uniform(v, 1)
        .unwrap()
        .with_default_logits(vec![4f64.ln(), 0.0])
        .unwrap();
    let old = Policy::uniform(v, 1).unwrap();
    (new, old)
}

fn random_row(rng: &mut impl UniformStream, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.next_uniform() - 0.5) * scale).collect()
}

/// Random tabular policy with an explicit row for every history that
/// `prompt` plus up to `max_len - 1` response tokens can produce.
pub fn random_policy(vocab: Vocab, window: usize, prompt: &[TokenId], max_len: usize, seed: u64) -> Policy {
    let mut rng = substream(seed, &[]);
    let n = vocab.size();
    let mut p = Policy::uniform(vocab, window)
        .unwrap()
        .with_default_logits(random_row(&mut rng, n, 3.0))
        .unwrap();
    let mut frontier = vec![prompt.to_vec()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for h in frontier {
            p.set_logits(&h, random_row(&mut rng, n, 3.0)).unwrap();
            for t in 0..n as TokenId {
                if t != vocab.eos() {
                    let mut e = h.clone();
                    e.push(t);
                    next.push(e);
                }
            }
        }
        frontier = next;
    }
    p
}

pub fn build_fixture(name: &str) -> OracleFixture {
    match name {
        "two_token" => {
            let (new, old) = two_token_policies();
            OracleFixture::new(name, vec![0], 1, &new, &old)
        }
        _ => {
            let (size, max_len, seed) = match name {
                "v2_len2" => (2, 2, 21),
                "v3_len2" => (3, 2, 32),
                "v3_len3" => (3, 3, 33),
                "v4_len3" => (4, 3, 43),
                other => panic!("unknown fixture {other}"),
            };
            let vocab = Vocab::new(size, size - 1).unwrap();
            let prompt = vec![0];
            let new = random_policy(vocab, 2, &prompt, max_len, seed);
            let old = random_policy(vocab, 2, &prompt, max_len, seed + 1000);
            OracleFixture::new(name, prompt, max_len, &new, &old)
        }
    }
}

pub fn load_fixture(name: &str) -> OracleFixture {
    OracleFixture::load(&fixture_dir().join(format!("{name}.json"))).unwrap()
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle. The objective below is written from the
// formula, independent of the library's gradient code:
//   J = (1/B) sum_seq sum_tok [min(r A, clip(r) A) - c KL(pi || pi_ref)]

fn my_log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

pub struct FdInstance {
    pub policy: Policy,
    pub reference: Policy,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
    pub old_probs: Vec<Vec<f64>>,
    pub config: UpdateConfig,
}

impl FdInstance {
    pub fn samples(&self) -> Vec<UpdateSample<'_>> {
        self.trajectories
            .iter()
            .zip(&self.advantages)
            .zip(&self.old_probs)
            .map(|((t, &a), o)| UpdateSample {
                trajectory: t,
                advantage: a,
                old_probs: o,
            })
            .collect()
    }

    fn history_key(p: &Policy, t: &Trajectory, i: usize) -> ContextKey {
        let mut h = t.prompt.clone();
        h.extend_from_slice(&t.response[..i]);
        p.context_key(&h).unwrap()
    }

    pub fn objective(&self, policy: &Policy) -> f64 {
        let c = &self.config;
        let mut total = 0.0;
        for ((t, &a), old) in self.trajectories.iter().zip(&self.advantages).zip(&self.old_probs) {
            for (i, &tok) in t.response.iter().enumerate() {
                let key = Self::history_key(policy, t, i);
                let lp = my_log_softmax(policy.logits(key));
                let lq = my_log_softmax(self.reference.logits(key));
                let r = lp[tok as usize].exp() / old[i];
                let clipped_r = r.clamp(1.0 - c.clip_low, 1.0 + c.clip_high);
                let surrogate = (r * a).min(clipped_r * a);
                let kl: f64 = lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum();
                total += surrogate - c.kl_coef * kl;
            }
        }
        total / self.trajectories.len() as f64
    }

    /// Ratios `pi / old` of every token, for checking that none sits on a
    /// clip boundary.
    pub fn ratios(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (t, old) in self.trajectories.iter().zip(&self.old_probs) {
            for (i, &tok) in t.response.iter().enumerate() {
                let key = Self::history_key(&self.policy, t, i);
                out.push(my_log_softmax(self.policy.logits(key))[tok as usize].exp() / old[i]);
            }
        }
        out
    }
}

/// 3-token vocabulary (eos = 2), window 2, two-step sequences. Old
/// probabilities are skewed so that some tokens sit inside the clip range
/// and some outside it in each direction.
pub fn fd_instance() -> FdInstance {
    let vocab = Vocab::new(3, 2).unwrap();
    let prompt = vec![0, 1];
    let policy = random_policy(vocab, 2, &prompt, 2, 501);
    let reference = random_policy(vocab, 2, &prompt, 2, 502);
    let responses: Vec<Vec<TokenId>> = vec![vec![0, 1], vec![1, 2], vec![0, 0], vec![1, 1], vec![0, 2]];
    let advantages = vec![1.3, -0.7, 0.9, -1.1, 0.4];
    // Multipliers for old = pi * m: ratio = 1/m.
    let skews = [[1.0, 0.6], [1.6, 1.05], [0.95, 1.5], [0.7, 1.0], [1.1, 0.9]];
    let mut trajectories = Vec::new();
    let mut old_probs = Vec::new();
    for (resp, skew) in responses.iter().zip(&skews) {
        let probs = policy.score_sequence(&prompt, resp).unwrap();
        old_probs.push(probs.iter().zip(skew).map(|(p, m)| (p * m).min(1.0)).collect());
        trajectories.push(Trajectory {
            prompt_id: 0,
            prompt: prompt.clone(),
            response: resp.clone(),
            gen_probs: probs,
            reward: 0.0,
        });
    }
    FdInstance {
        policy,
        reference,
        trajectories,
        advantages,
        old_probs,
        config: UpdateConfig {
            learning_rate: 1.0,
            clip_low: 0.2,
            clip_high: 0.2,
            kl_coef: 0.3,
        },
    }
}

pub struct FdReport {
    pub max_rel_error: f64,
    pub params: usize,
    pub clipped_tokens: usize,
    pub unclipped_tokens: usize,
}

/// Central differences with step `h` over every logit of every table row,
/// compared with the library's analytic gradient.
pub fn fd_check(inst: &FdInstance, h: f64) -> FdReport {
    let samples = inst.samples();
    let analytic: HashMap<ContextKey, Vec<f64>> = inst
        .policy
        .objective_gradient(&samples, &inst.config, &inst.reference)
        .unwrap();
    let mut max_rel: f64 = 0.0;
    let mut params = 0;
    let rows: Vec<(ContextKey, Vec<f64>)> =
        inst.policy.rows().into_iter().map(|(k, r)| (k, r.to_vec())).collect();
    for (key, row) in rows {
        for j in 0..row.len() {
            let mut plus = inst.policy.clone();
            let mut minus = inst.policy.clone();
            let mut rp = row.clone();
            rp[j] += h;
            plus.set_row(key, rp).unwrap();
            let mut rm = row.clone();
            rm[j] -= h;
            minus.set_row(key, rm).unwrap();
            let fd = (inst.objective(&plus) - inst.objective(&minus)) / (2.0 * h);
            let an = analytic.get(&key).map_or(0.0, |g| g[j]);
            let scale = fd.abs().max(an.abs());
            let rel = if scale < 1e-9 { (fd - an).abs() } else { (fd - an).abs() / scale };
            max_rel = max_rel.max(rel);
            params += 1;
        }
    }
    let ratios = inst.ratios();
    let c = &inst.config;
    let clipped_tokens = ratios
        .iter()
        .zip(inst.advantages.iter().flat_map(|&a| [a, a]))
        .filter(|(&r, a)| (*a > 0.0 && r > 1.0 + c.clip_high) || (*a < 0.0 && r < 1.0 - c.clip_low))
        .count();
    FdReport {
        max_rel_error: max_rel,
        params,
        clipped_tokens,
        unclipped_tokens: ratios.len() - clipped_tokens,
    }
}
