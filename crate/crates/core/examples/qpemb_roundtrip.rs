//! Exports random-vector embeddings for a dataset as QPEMB files, then reads
//! them back through the file-backed provider, the way externally exported
//! encoder states are consumed.

use quantprobe::embeddings::{export_records, read_qpemb, write_qpemb, ProviderSpec};
use quantprobe::synthgen::{generate_dataset, Split, TaskKind, ValueRange};

fn main() -> quantprobe::Result<()> {
    let dir = tempfile::tempdir()?;
    let ds = generate_dataset(TaskKind::Percent, ValueRange::new(0.0, 99.9)?, 3, 100, 10, None)?;
    let source = ProviderSpec::random(32, 0).open(&ds)?;

    for split in [Split::Train, Split::Test] {
        let path = ProviderSpec::expected_file(dir.path(), &ds.split_sha256(split));
        let records = export_records(source.as_ref(), ds.split(split))?;
        write_qpemb(&path, 32, &records)?;
        let back = read_qpemb(&path)?;
        println!(
            "{split}: {} records, dim {}, {} bytes -> {}",
            back.records.len(),
            back.dim,
            std::fs::metadata(&path)?.len(),
            path.file_name().unwrap().to_string_lossy()
        );
    }

    let file = ProviderSpec::FileBacked { dir: dir.path().to_path_buf(), dim: 32 }.open(&ds)?;
    let ex = &ds.test[0];
    let a = source.embed(ex)?;
    let b = file.embed(ex)?;
    let max_diff = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    println!("{:?}: {} rows, max |f64 - f32 stored| = {max_diff:.2e}", ex.input, b.rows());
    Ok(())
}
