//! Paired vanilla and speculative training on the digitwise-sum task with
//! the default configuration, printed epoch by epoch.
//!
//! cargo run --release --example toy_training [seed]

use specrl::trainer::{run_paired, RolloutMode, TrainConfig};

fn main() -> specrl::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut config = TrainConfig::new(seed);
    config.rollout_mode = RolloutMode::SpecRl;
    let (vanilla, spec) = run_paired(&config)?;

    println!("seed {seed}, lenience {}, {} prompts x {} rollouts", config.lenience, config.num_prompts(), config.group_size);
    println!("epoch  reward(van)  reward(spec)  tokens(van)  tokens(spec)  speedup  prefix  full-reuse  clip");
    for (v, s) in vanilla.epochs.iter().zip(&spec.epochs) {
        println!(
            "{:>5}  {:>11.3}  {:>12.3}  {:>11}  {:>12}  {:>7.2}  {:>6.2}  {:>10.3}  {:.3}",
            v.epoch, v.mean_reward, s.mean_reward, v.tokens_generated, s.tokens_generated,
            s.speedup_vs_baseline, s.mean_verified_prefix_len, s.full_reuse_ratio, s.clip_fraction
        );
    }
    let ratio = spec.tokens_from_epoch(2) as f64 / vanilla.tokens_from_epoch(2) as f64;
    println!("tokens generated from epoch 2 on: {:.1}% of vanilla", 100.0 * ratio);
    Ok(())
}
