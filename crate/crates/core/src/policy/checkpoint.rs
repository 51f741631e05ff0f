//! Versioned JSON checkpoint. Every float is stored as its bit pattern, so
//! save followed by load reproduces the policy exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ContextKey, Policy, Vocab};
use crate::error::{Error, Result};
use crate::hexfloat;

const FORMAT: &str = "specrl-policy";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Row {
    context: u64,
    #[serde(with = "hexfloat::vec")]
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    vocab_size: u32,
    eos: u32,
    window: usize,
    #[serde(with = "hexfloat")]
    temperature: f64,
    #[serde(with = "hexfloat::vec")]
    default_logits: Vec<f64>,
    rows: Vec<Row>,
}

impl Policy {
    pub fn to_checkpoint_string(&self) -> String {
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            vocab_size: self.vocab.size,
            eos: self.vocab.eos,
            window: self.window,
            temperature: self.temperature,
            default_logits: self.default_logits.clone(),
            rows: self
                .rows()
                .into_iter()
                .map(|(k, z)| Row {
                    context: k.0,
                    logits: z.to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)
            .map_err(|e| Error::MalformedInput(format!("policy checkpoint: {e}")))?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::MalformedInput(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        let vocab = Vocab::new(file.vocab_size, file.eos)?;
        let mut policy = Policy::uniform(vocab, file.window)?
            .with_temperature(file.temperature)?
            .with_default_logits(file.default_logits)?;
        let mut table = HashMap::with_capacity(file.rows.len());
        for row in file.rows {
            policy.check_row(&row.logits)?;
            if table.insert(ContextKey(row.context), row.logits).is_some() {
                return Err(Error::MalformedInput(format!(
                    "duplicate context {} in checkpoint",
                    row.context
                )));
            }
        }
        policy.table = table;
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}
