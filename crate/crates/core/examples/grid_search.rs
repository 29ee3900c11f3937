//! Searches the default learning-rate/momentum grid for an oracle probe.
//! Each cell is capped at a few epochs to keep the demo short.

use quantprobe::embeddings::Oracle;
use quantprobe::probes::ProbeConfig;
use quantprobe::synthgen::{generate_dataset, TaskKind, ValueRange};
use quantprobe::training::{grid_search, TrainConfig, DEFAULT_LR_GRID, DEFAULT_MOMENTUM_GRID};

fn main() -> quantprobe::Result<()> {
    let ds = generate_dataset(TaskKind::BasisPoint, ValueRange::new(0.0, 99.9)?, 41, 2_000, 200, None)?;
    let oracle = Oracle::new(8, 0)?;
    let probe = ProbeConfig::for_task(TaskKind::BasisPoint, 8, 1, None)?;
    let base = TrainConfig {
        max_epochs: 30,
        ..TrainConfig::default()
    };

    let outcome = grid_search(&ds, &oracle, &probe, &base, &DEFAULT_LR_GRID, &DEFAULT_MOMENTUM_GRID)?;
    println!("{:>8} {:>8} {:>14} {:>6}", "lr", "momentum", "best val mse", "epoch");
    for c in &outcome.cells {
        let loss = c.result.best_val_loss.map_or("diverged".into(), |l| format!("{l:.4e}"));
        println!("{:>8.0e} {:>8} {loss:>14} {:>6}", c.lr, c.momentum, c.result.best_epoch);
    }
    println!("chosen: lr {:e}, momentum {}", outcome.best.lr, outcome.best.momentum);
    Ok(())
}
