//! Exact output distributions of speculative reuse, by enumeration.
//!
//! Two-token vocabulary, one-step responses: the old policy is uniform and
//! the new one puts 0.8 on token `a`. Resampling the rejected position from
//! the new policy skews the output towards the draft once the acceptance
//! probability of `a` saturates at 1 (lenience above 1/1.6). The residual
//! correction recovers the new policy exactly at lenience 1.
//!
//! cargo run --example oracle_fidelity

use specrl::oracle::{enumerate_direct, enumerate_spec};
use specrl::{Lenience, Policy, ResumeMode, Vocab};

fn main() -> specrl::Result<()> {
    let vocab = Vocab::new(2, 1)?;
    let new = Policy::uniform(vocab, 1)?.with_default_logits(vec![4f64.ln(), 0.0])?;
    let old = Policy::uniform(vocab, 1)?;
    let prompt = [0];
    let (a, eos) = ([0], [1]);

    let direct = enumerate_direct(&new, &prompt, 1)?;
    println!("{:<22} P(a) {:.4}  P(eos) {:.4}", "new policy", direct.prob(&a), direct.prob(&eos));
    for l in [Lenience::Zero, Lenience::exp(-0.5)?, Lenience::one(), Lenience::exp(0.5)?, Lenience::Infinite] {
        let d = enumerate_spec(&new, &old, &prompt, 1, l, ResumeMode::Resample)?;
        println!(
            "{:<22} P(a) {:.4}  P(eos) {:.4}  tv {:.4}",
            format!("resample, l = {l}"),
            d.prob(&a),
            d.prob(&eos),
            d.tv_distance(&direct)
        );
    }
    let exact = enumerate_spec(&new, &old, &prompt, 1, Lenience::one(), ResumeMode::ExactResidual)?;
    println!(
        "{:<22} P(a) {:.4}  P(eos) {:.4}  tv {:.1e}",
        "residual, l = 1",
        exact.prob(&a),
        exact.prob(&eos),
        exact.tv_distance(&direct)
    );
    Ok(())
}
