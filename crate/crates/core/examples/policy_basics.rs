//! Build a small tabular policy, sample from it, score what came out and
//! save it as a checkpoint.
//!
//! cargo run --example policy_basics

use specrl::rng::substream;
use specrl::{Policy, Vocab};

fn main() -> specrl::Result<()> {
    // Tokens 0..3, token 3 is eos. Contexts are the last two tokens.
    let vocab = Vocab::new(4, 3)?;
    let mut policy = Policy::uniform(vocab, 2)?.with_default_logits(vec![0.5, 0.0, -0.5, 0.2])?;
    policy.set_logits(&[0, 1], vec![2.0, 0.0, 0.0, -1.0])?;
    policy.set_logits(&[1, 0], vec![0.0, 0.0, 0.0, 3.0])?;

    let prompt = [0, 1];
    println!("p(. | 0 1) = {:.3?}", policy.next_token_dist(&prompt)?);

    let mut rng = substream(7, &[]);
    for _ in 0..5 {
        let (response, probs) = policy.sample_continuation(&prompt, &[], 6, &mut rng)?;
        let rescored = policy.score_sequence(&prompt, &response)?;
        assert_eq!(probs, rescored);
        println!("{response:?}  probs {probs:.3?}");
    }
    println!("entropy at the prompt: {:.4} nats", policy.entropy(&[prompt.to_vec()])?);

    let path = std::env::temp_dir().join("specrl_policy_basics.json");
    policy.save(&path)?;
    assert_eq!(Policy::load(&path)?, policy);
    println!("checkpoint round-trips through {}", path.display());
    Ok(())
}
