//! Train for a few epochs, write the rollout cache and policy to disk, read
//! them back and verify the cached responses under the reloaded policy.
//!
//! cargo run --release --example cache_persistence

use specrl::rng::substream;
use specrl::spec_rollout::speculative_rollout;
use specrl::trainer::{run_experiment, ModularSumTask, TrainConfig};
use specrl::{Policy, ResumeMode, RolloutCache};

fn main() -> specrl::Result<()> {
    let mut config = TrainConfig::new(4);
    config.epochs = 3;
    let run = run_experiment(&config)?;

    let dir = std::env::temp_dir().join("specrl_cache_persistence");
    std::fs::create_dir_all(&dir).expect("temp dir is writable");
    run.cache.persist(&dir.join("cache.jsonl"))?;
    run.policy.save(&dir.join("policy.json"))?;

    let cache = RolloutCache::load(&dir.join("cache.jsonl"))?;
    let policy = Policy::load(&dir.join("policy.json"))?;
    assert_eq!(cache, run.cache);
    assert_eq!(policy, run.policy);
    println!("{} cache entries and {} policy rows round-trip through {}", cache.len(), policy.num_rows(), dir.display());

    let task = ModularSumTask::new(config.digits, config.num_prompts(), config.seed)?;
    let (mut reused, mut total, mut full) = (0, 0, 0);
    for (prompt_id, slot, cached) in cache.iter() {
        let prompt = &task.prompt(prompt_id).tokens;
        let mut rng = substream(99, &[u64::from(prompt_id), slot as u64]);
        let (_, v) = speculative_rollout(
            &policy, prompt_id, prompt, cached, config.lenience, ResumeMode::Resample, None, config.max_len, &mut rng,
        )?;
        reused += v.reused_tokens;
        total += cached.response.len();
        full += usize::from(v.fully_reused);
    }
    println!(
        "next epoch at lenience {}: {reused}/{total} cached tokens accepted, {full}/{} responses fully reused",
        config.lenience,
        cache.len()
    );
    Ok(())
}
