//! Runs small repeated experiments for two providers and two tasks, then
//! renders the CSV and the text table and re-reads the CSV.

use quantprobe::embeddings::ProviderSpec;
use quantprobe::experiments::{parse_csv, render_csv, render_table, run_experiment, ExperimentSpec};
use quantprobe::synthgen::{TaskKind, ValueRange};
use quantprobe::training::TrainConfig;

fn main() -> quantprobe::Result<()> {
    let range = ValueRange::new(0.0, 99.9)?;
    let mut reports = Vec::new();
    for provider in [ProviderSpec::oracle(8, 0), ProviderSpec::random(16, 0)] {
        for task in [TaskKind::Percent, TaskKind::Range] {
            let mut spec = ExperimentSpec::new(task, range, provider.clone());
            spec.runs = 3;
            spec.train_size = 1_000;
            spec.test_size = 100;
            spec.train = TrainConfig::default().with_lr(3e-2, 0.7);
            spec.train.max_epochs = 30;
            reports.push(run_experiment(&spec, None)?.report);
        }
    }
    let csv = render_csv(&reports)?;
    print!("{csv}\n{}", render_table(&reports)?);
    assert_eq!(render_table(&parse_csv(&csv)?)?, render_table(&reports)?);
    Ok(())
}
