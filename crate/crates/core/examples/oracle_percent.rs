//! Trains one regression probe on oracle embeddings, whose first coordinate
//! is the target itself, and prints the validation curve.

use quantprobe::embeddings::Oracle;
use quantprobe::probes::ProbeConfig;
use quantprobe::synthgen::{generate_dataset, TaskKind, ValueRange};
use quantprobe::training::{train_probe, TrainConfig};

fn main() -> quantprobe::Result<()> {
    let ds = generate_dataset(TaskKind::Percent, ValueRange::new(0.0, 99.9)?, 1, 10_000, 1_000, None)?;
    let oracle = Oracle::new(16, 0)?;
    let probe = ProbeConfig::for_task(TaskKind::Percent, 16, 1, None)?;
    let mut cfg = TrainConfig::default().with_lr(1e-2, 0.5);
    cfg.max_epochs = 200;

    let res = train_probe(&ds, &oracle, &probe, &cfg)?;
    for (i, loss) in res.val_losses.iter().enumerate().step_by(20) {
        println!("epoch {:>4}  val mse {loss:.3e}", i + 1);
    }
    println!(
        "best epoch {} of {}, test RMSE {:.4} ({:.1}s)",
        res.best_epoch, res.epochs_run, res.test_metric, res.wall_time_secs
    );
    Ok(())
}
