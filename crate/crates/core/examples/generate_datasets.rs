//! Generates a small dataset for every task and prints a few examples.
//!
//! ```text
//! cargo run --example generate_datasets -- [OUT_DIR]
//! ```

use quantprobe::synthgen::{DatasetSpec, LogBase, TaskKind, UnitLexicon, ValueRange};

fn main() -> quantprobe::Result<()> {
    let out = std::env::args().nth(1);
    let lexicon = UnitLexicon::builtin();
    let range = ValueRange::new(0.0, 99.9)?;

    for task in TaskKind::ALL {
        let lex = task.is_classification().then_some(&lexicon);
        let ds = DatasetSpec::new(task, range, 7).with_sizes(200, 20).generate(lex)?;
        println!("{task} (metric {})", task.metric().name());
        for ex in ds.train.iter().take(3) {
            match ex.label {
                Some(label) => println!("  {:>24}  -> class {label}", ex.input),
                None => println!("  {:>24}  -> {:?}", ex.input, ex.targets),
            }
        }
        if let Some(dir) = &out {
            let manifest = ds.write_dir(format!("{dir}/{task}"))?;
            println!("  train sha256 {}", manifest.train_sha256);
        }
    }

    let natural = DatasetSpec::new(TaskKind::Order, range, 7)
        .with_sizes(3, 1)
        .with_log_base(LogBase::Natural)
        .generate(None)?;
    println!("order with natural-log targets:");
    for ex in &natural.train {
        println!("  {:>24}  -> {:.4}", ex.input, ex.targets[0]);
    }
    Ok(())
}
