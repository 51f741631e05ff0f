//! Speculative reuse of previous-epoch rollouts for RL with verifiable rewards,
//! at a scale where every claim can be checked exactly.
//!
//! * [`policy`]: tabular contextual softmax policy with sampling, scoring and
//!   a clipped-surrogate update.
//! * [`spec_rollout`]: verify a cached rollout under the current policy,
//!   keep the accepted prefix, regenerate the rest.
//! * [`cache`]: previous-epoch rollout store with lossless snapshots.
//! * [`trainer`]: toy digitwise-sum task and the epoch loop in vanilla,
//!   speculative and random-reuse modes.
//! * [`metrics`]: ROUGE-1 overlap, KL, rank correlation, metrics CSV.
//! * [`oracle`]: exact sequence distributions by enumeration.
//! * [`cli`]: the `train`, `sweep` and `analyze` commands.

pub mod cache;
pub mod cli;
pub mod error;
pub mod hexfloat;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod spec_rollout;
pub mod trainer;

pub use cache::{CachedRollout, RolloutCache};
pub use error::{Error, Result};
pub use policy::{Policy, PromptId, TokenId, Trajectory, Vocab};
pub use spec_rollout::{Lenience, ResumeMode, VerificationResult};
