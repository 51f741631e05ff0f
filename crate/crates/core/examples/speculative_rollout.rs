//! Verify one cached response under a newer policy at several lenience
//! values. Every run replays the same uniforms, so a larger lenience never
//! rejects earlier.
//!
//! cargo run --example speculative_rollout

use specrl::rng::substream;
use specrl::spec_rollout::{acceptance_probs, speculative_rollout};
use specrl::{CachedRollout, Lenience, Policy, ResumeMode, Vocab};

fn main() -> specrl::Result<()> {
    let vocab = Vocab::new(4, 3)?;
    let old = Policy::uniform(vocab, 1)?.with_default_logits(vec![1.0, 1.0, 0.0, -1.0])?;
    let mut new = old.clone();
    new.set_logits(&[0], vec![0.0, 2.0, 0.0, -1.0])?;
    new.set_logits(&[1], vec![1.5, 0.0, 0.0, 0.5])?;

    let prompt = [2];
    let (draft, old_probs) = old.sample_continuation(&prompt, &[], 8, &mut substream(1, &[]))?;
    let new_probs = new.score_sequence(&prompt, &draft)?;
    println!("draft      {draft:?}");
    println!("p_old      {old_probs:.3?}");
    println!("p_new      {new_probs:.3?}");

    let cached = CachedRollout {
        prompt_id: 0,
        response: draft.clone(),
        old_probs: old_probs.clone(),
        epoch: 1,
        reward: 0.0,
        policy_version: 0,
    };
    for text in ["0", "e^-0.5", "1", "e^0.5", "e^1", "inf"] {
        let l: Lenience = text.parse()?;
        let alpha = acceptance_probs(&old_probs, &new_probs, l)?;
        let (t, v) = speculative_rollout(&new, 0, &prompt, &cached, l, ResumeMode::Resample, None, 8, &mut substream(11, &[]))?;
        println!(
            "l = {text:>6}  alpha {alpha:.2?}  reject at {}  reused {}  generated {}  -> {:?}",
            v.rejection_position, v.reused_tokens, v.generated_tokens, t.response
        );
    }
    Ok(())
}
