//! Unit identification with random token vectors and the BiLSTM probe.
//!
//! ```text
//! cargo run --release --example unit_identification -- [TRAIN_SIZE] [MAX_EPOCHS]
//! ```

use quantprobe::embeddings::ProviderSpec;
use quantprobe::experiments::max_len;
use quantprobe::probes::ProbeConfig;
use quantprobe::synthgen::{generate_dataset, TaskKind, UnitLexicon, ValueRange};
use quantprobe::training::{train_probe, TrainConfig};

fn main() -> quantprobe::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("a number"));
    let train = args.next().unwrap_or(3_000);
    let epochs = args.next().unwrap_or(40);

    let lexicon = UnitLexicon::builtin();
    let ds = generate_dataset(TaskKind::UnitId, ValueRange::new(0.0, 99.9)?, 5, train, train / 10, Some(&lexicon))?;
    let provider = ProviderSpec::random(64, 0).open(&ds)?;
    let probe = ProbeConfig::for_task(TaskKind::UnitId, 64, max_len(provider.as_ref(), &ds)?, Some(lexicon.len()))?;
    let mut cfg = TrainConfig::default().with_lr(0.3, 0.7);
    cfg.max_epochs = epochs;

    let res = train_probe(&ds, provider.as_ref(), &probe, &cfg)?;
    println!(
        "{} classes, {} epochs (best {}), test accuracy {:.3}",
        lexicon.len(),
        res.epochs_run,
        res.best_epoch,
        res.test_metric
    );
    Ok(())
}
