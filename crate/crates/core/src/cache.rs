//! Previous-epoch rollout store.
//!
//! One entry per (prompt, group slot). Writing a slot replaces whatever was
//! there, so the cache never holds more than one generation per slot.
//!
//! Snapshot format: a JSON header line followed by one JSON record per
//! filled slot, ordered by (prompt, slot). Floats are stored as hex bit
//! patterns.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hexfloat;
use crate::policy::{PromptId, TokenId};

const FORMAT: &str = "specrl-cache";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedRollout {
    pub prompt_id: PromptId,
    pub response: Vec<TokenId>,
    #[serde(with = "hexfloat::vec")]
    pub old_probs: Vec<f64>,
    /// Epoch in which this response was produced.
    pub epoch: usize,
    #[serde(with = "hexfloat")]
    pub reward: f64,
    /// Global update step of the policy that produced the probabilities.
    pub policy_version: u64,
}

impl CachedRollout {
    pub fn validate(&self) -> Result<()> {
        if self.old_probs.len() != self.response.len() {
            return Err(Error::MalformedInput(format!(
                "cached rollout for prompt {} has {} tokens but {} probabilities",
                self.prompt_id,
                self.response.len(),
                self.old_probs.len()
            )));
        }
        if let Some(p) = self.old_probs.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::MalformedInput(format!(
                "cached probability {p} outside (0, 1]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutCache {
    group_size: usize,
    entries: BTreeMap<PromptId, Vec<Option<CachedRollout>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    group_size: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    slot: usize,
    #[serde(flatten)]
    rollout: CachedRollout,
}

impl RolloutCache {
    pub fn new(group_size: usize) -> Self {
        Self {
            group_size,
            entries: BTreeMap::new(),
        }
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn get(&self, prompt_id: PromptId, slot: usize) -> Option<&CachedRollout> {
        self.entries.get(&prompt_id)?.get(slot)?.as_ref()
    }

    pub fn put(&mut self, prompt_id: PromptId, slot: usize, rollout: CachedRollout) -> Result<()> {
        if slot >= self.group_size {
            return Err(Error::MalformedInput(format!(
                "slot {slot} out of range for group size {}",
                self.group_size
            )));
        }
        if rollout.prompt_id != prompt_id {
            return Err(Error::MalformedInput(format!(
                "rollout for prompt {} stored under prompt {prompt_id}",
                rollout.prompt_id
            )));
        }
        rollout.validate()?;
        let slots = self
            .entries
            .entry(prompt_id)
            .or_insert_with(|| vec![None; self.group_size]);
        slots[slot] = Some(rollout);
        Ok(())
    }

    /// Number of filled slots.
    pub fn len(&self) -> usize {
        self.entries
            .values()
            .map(|s| s.iter().filter(|e| e.is_some()).count())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Filled slots in (prompt, slot) order.
    pub fn iter(&self) -> impl Iterator<Item = (PromptId, usize, &CachedRollout)> {
        self.entries.iter().flat_map(|(&p, slots)| {
            slots
                .iter()
                .enumerate()
                .filter_map(move |(s, e)| e.as_ref().map(|r| (p, s, r)))
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            group_size: self.group_size,
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for (_, slot, rollout) in self.iter() {
            let rec = Record {
                slot,
                rollout: rollout.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        w.flush()
    }

    pub fn read_from<R: BufRead>(r: R, path: &Path) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e))?,
            None => return Err(Error::parse(path, 1, "missing header line")),
        };
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| Error::parse(path, 1, format!("bad header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::parse(
                path,
                1,
                format!("unsupported snapshot {} v{}", header.format, header.version),
            ));
        }
        let mut cache = RolloutCache::new(header.group_size);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
            let prompt = rec.rollout.prompt_id;
            if cache.get(prompt, rec.slot).is_some() {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("duplicate record for prompt {prompt} slot {}", rec.slot),
                ));
            }
            cache
                .put(prompt, rec.slot, rec.rollout)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        }
        Ok(cache)
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, UniformStream};
    use proptest::prelude::*;

    fn rollout(prompt_id: u32, epoch: usize, tokens: &[u32]) -> CachedRollout {
        CachedRollout {
            prompt_id,
            response: tokens.to_vec(),
            old_probs: tokens.iter().map(|&t| 1.0 / (t as f64 + 2.0)).collect(),
            epoch,
            reward: 1.0,
            policy_version: epoch as u64,
        }
    }

    #[test]
    fn empty_cache_misses() {
        let c = RolloutCache::new(4);
        assert!(c.get(0, 0).is_none());
        assert!(c.is_empty());
    }

    #[test]
    fn put_then_get() {
        let mut c = RolloutCache::new(2);
        let r = rollout(3, 1, &[1, 2]);
        c.put(3, 1, r.clone()).unwrap();
        assert_eq!(c.get(3, 1), Some(&r));
        assert!(c.get(3, 0).is_none());
    }

    #[test]
    fn refresh_replaces_previous_epoch() {
        let mut c = RolloutCache::new(1);
        c.put(0, 0, rollout(0, 1, &[1])).unwrap();
        c.put(0, 0, rollout(0, 2, &[2, 2])).unwrap();
        let got = c.get(0, 0).unwrap();
        assert_eq!(got.epoch, 2);
        assert_eq!(got.response, vec![2, 2]);
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn put_rejects_malformed() {
        let mut c = RolloutCache::new(2);
        let mut r = rollout(0, 1, &[1, 2]);
        r.old_probs.pop();
        assert!(c.put(0, 0, r).is_err());
        assert!(c.put(0, 2, rollout(0, 1, &[1])).is_err());
        assert!(c.put(1, 0, rollout(0, 1, &[1])).is_err());
    }

    #[test]
    fn bulk_put_is_bounded_by_capacity() {
        let mut c = RolloutCache::new(8);
        for epoch in 1..=2 {
            for p in 0..6144u32 {
                for s in 0..8 {
                    c.put(p, s, rollout(p, epoch, &[p % 7, s as u32])).unwrap();
                }
            }
        }
        assert_eq!(c.len(), 6144 * 8);
        assert_eq!(c.get(6143, 7).unwrap().epoch, 2);
        assert_eq!(c.get(17, 3).unwrap().response, vec![17 % 7, 3]);
    }

    #[test]
    fn empty_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let c = RolloutCache::new(3);
        c.persist(&path).unwrap();
        assert_eq!(RolloutCache::load(&path).unwrap(), c);
    }

    #[test]
    fn single_entry_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let mut c = RolloutCache::new(1);
        let mut r = rollout(9, 4, &[0, 1, 2]);
        r.old_probs = vec![0.1 + 0.2, 1e-300, 1.0 - f64::EPSILON];
        c.put(9, 0, r.clone()).unwrap();
        c.persist(&path).unwrap();
        let back = RolloutCache::load(&path).unwrap();
        let got = back.get(9, 0).unwrap();
        for (a, b) in got.old_probs.iter().zip(&r.old_probs) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupt_record_names_line() {
        let text = format!(
            "{{\"format\":\"specrl-cache\",\"version\":1,\"group_size\":1}}\n{}\nnot json\n",
            serde_json::to_string(&Record {
                slot: 0,
                rollout: rollout(0, 1, &[1])
            })
            .unwrap()
        );
        let err = RolloutCache::read_from(text.as_bytes(), Path::new("snap")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn thousand_entry_round_trip() {
        let mut rng = substream(77, &[]);
        let mut c = RolloutCache::new(4);
        for i in 0..1000u32 {
            let len = 1 + (rng.next_uniform() * 10.0) as usize;
            let r = CachedRollout {
                prompt_id: i / 4,
                response: (0..len).map(|_| (rng.next_uniform() * 12.0) as u32).collect(),
                old_probs: (0..len).map(|_| rng.next_uniform()).collect(),
                epoch: 1 + (i % 5) as usize,
                reward: rng.next_uniform(),
                policy_version: u64::from(i),
            };
            c.put(i / 4, (i % 4) as usize, r).unwrap();
        }
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(RolloutCache::read_from(&buf[..], Path::new("mem")).unwrap(), c);
    }

    proptest! {
        #[test]
        fn snapshot_round_trip(
            entries in proptest::collection::vec(
                (0u32..50, 0usize..3, proptest::collection::vec((0u32..12, 1e-12f64..=1.0), 0..6)),
                0..40,
            )
        ) {
            let mut c = RolloutCache::new(3);
            for (p, s, toks) in entries {
                let r = CachedRollout {
                    prompt_id: p,
                    response: toks.iter().map(|t| t.0).collect(),
                    old_probs: toks.iter().map(|t| t.1).collect(),
                    epoch: 1,
                    reward: 0.0,
                    policy_version: 0,
                };
                c.put(p, s, r).unwrap();
            }
            let mut buf = Vec::new();
            c.write_to(&mut buf).unwrap();
            prop_assert_eq!(RolloutCache::read_from(&buf[..], Path::new("mem")).unwrap(), c);
        }
    }
}
