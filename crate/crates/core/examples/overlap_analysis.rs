//! How much of each epoch's output repeats the previous epoch's, measured
//! with unigram ROUGE-1 on a vanilla run.
//!
//! cargo run --release --example overlap_analysis

use specrl::metrics::{epoch_overlap, spearman, RougeVariant};
use specrl::trainer::{run_experiment, trace_by_epoch, RolloutMode, TrainConfig};

fn main() -> specrl::Result<()> {
    let mut config = TrainConfig::new(1);
    config.rollout_mode = RolloutMode::Vanilla;
    let run = run_experiment(&config)?;
    let epochs = trace_by_epoch(&run.trace);

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for e in 2..=config.epochs {
        let recall = epoch_overlap(e, &epochs[&(e - 1)], &epochs[&e], RougeVariant::Recall)?;
        let f1 = epoch_overlap(e, &epochs[&(e - 1)], &epochs[&e], RougeVariant::F1)?;
        let reward = run.epochs[e - 1].mean_reward;
        println!(
            "epoch {e:>2} vs {:>2}: rouge1 recall {:.3}  f1 {:.3}  reward {reward:.3}",
            e - 1,
            recall.mean_rouge1,
            f1.mean_rouge1
        );
        xs.push(e as f64);
        ys.push(recall.mean_rouge1);
    }
    match spearman(&xs, &ys) {
        Some(rho) => println!("Spearman rho of overlap against epoch: {rho:.3}"),
        None => println!("overlap is constant"),
    }
    Ok(())
}
