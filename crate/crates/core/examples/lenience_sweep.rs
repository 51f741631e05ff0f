//! One training run per lenience value, all from the same seed, against a
//! vanilla baseline. Writes sweep.csv and sweep_summary.csv.
//!
//! cargo run --release --example lenience_sweep [out_dir]

use specrl::cli::{cmd_sweep, ExperimentConfig, LenienceToken};
use specrl::trainer::TrainConfig;

fn main() -> specrl::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/lenience_sweep".into());
    let mut config = ExperimentConfig::new(TrainConfig::new(1));
    config.output.dir = out.into();
    let levels: Vec<LenienceToken> = ["0", "1", "e^0.2", "e^0.5", "e^0.8", "e^1.0", "inf"]
        .iter()
        .map(|s| LenienceToken::Text(s.to_string()))
        .collect();

    let sweep = cmd_sweep(&config, &levels, &mut std::io::stdout())?;
    let base: u64 = sweep.baseline.tokens_from_epoch(1);
    println!("vanilla tokens {base}, final reward {:.3}", sweep.baseline.epochs.last().unwrap().mean_reward);

    println!("\nmean verified prefix length per epoch");
    print!("{:>8}", "epoch");
    for (l, _) in &sweep.runs {
        print!("{:>8}", l.to_string());
    }
    println!();
    for e in 0..config.train.epochs {
        print!("{:>8}", e + 1);
        for (_, run) in &sweep.runs {
            print!("{:>8.2}", run.epochs[e].mean_verified_prefix_len);
        }
        println!();
    }
    println!("\nwrote {}", config.output.dir.display());
    Ok(())
}
