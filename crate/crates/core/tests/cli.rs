use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use quantprobe::embeddings::{export_records, write_qpemb, ProviderSpec};
use quantprobe::synthgen::{Dataset, Split};

fn qp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quantprobe"))
        .args(args)
        .env_remove("QUANTPROBE_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_deterministic_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let o = qp(&["gen", "--task", "percent", "--lo", "0.0", "--hi", "99.9", "--seed", "7", "-o", path(dir)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["train.jsonl", "test.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let train = fs::read_to_string(a.join("train.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(train.lines().next().unwrap()).unwrap();
    assert_eq!(header["task"], "percent");
    assert_eq!(train.lines().count(), 10_001);
    assert_eq!(fs::read_to_string(a.join("test.jsonl")).unwrap().lines().count(), 1_001);
}

#[test]
fn gen_rejects_unsatisfiable_order_range() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qp(&["gen", "--task", "order", "--lo", "0.0", "--hi", "0.0", "-o", path(tmp.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!tmp.path().join("train.jsonl").exists());
}

#[test]
fn gen_unit_id_copies_lexicon() {
    let tmp = tempfile::tempdir().unwrap();
    let lex = tmp.path().join("units.in");
    fs::write(&lex, "hours\npercent\neuros\n").unwrap();
    let out = tmp.path().join("d");
    let o = qp(&[
        "gen", "--task", "unit_id", "--lo", "0", "--hi", "99.9", "--train", "50", "--test", "10",
        "--lexicon", path(&lex), "-o", path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("units.txt")).unwrap(), "hours\npercent\neuros\n");
    let train = fs::read_to_string(out.join("train.jsonl")).unwrap();
    for line in train.lines().skip(1) {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["label"].as_u64().unwrap() < 3);
    }
}

#[test]
fn expect_lists_both_split_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    qp(&["gen", "--task", "percent", "--lo", "0", "--hi", "9.9", "--train", "20", "--test", "5", "-o", path(&d)]);
    let o = qp(&["expect", "--dir", path(&d)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let ds = Dataset::read_dir(&d, None).unwrap();
    for (line, split) in lines.iter().zip([Split::Train, Split::Test]) {
        assert!(line.starts_with(&format!("{split}\t")));
        assert!(line.contains(&format!("{}.qpemb", ds.split_sha256(split))));
        assert!(line.ends_with("dim=768"));
    }
}

#[test]
fn expect_rejects_missing_or_corrupt_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qp(&["expect", "--dir", path(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(tmp.path().join("manifest.json"), "{\"task\": \"percent\", ").unwrap();
    let o = qp(&["expect", "--dir", path(tmp.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn run_rejects_zero_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qp(&["run", "--task", "percent", "--lo", "0", "--hi", "99.9", "--runs", "0", "-o", path(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn file_provider_reports_missing_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let emb = tmp.path().join("emb");
    let out = tmp.path().join("out");
    let provider = format!("file:{}", path(&emb));
    let o = qp(&[
        "run", "--task", "percent", "--lo", "0", "--hi", "99.9", "--train", "200", "--test", "20",
        "--runs", "2", "--lr", "0.01", "--provider", &provider, "--dim", "4", "-o", path(&out),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    for run in 0..2 {
        let ds = Dataset::read_dir(out.join("datasets").join(format!("run-{run}")), None).unwrap();
        for split in [Split::Train, Split::Test] {
            assert!(err.contains(&format!("{}.qpemb", ds.split_sha256(split))), "{err}");
        }
    }
}

#[test]
fn file_provider_runs_once_embeddings_exist() {
    let tmp = tempfile::tempdir().unwrap();
    let emb = tmp.path().join("emb");
    let out = tmp.path().join("out");
    fs::create_dir_all(&emb).unwrap();
    let provider = format!("file:{}", path(&emb));
    let args = [
        "run", "--task", "percent", "--lo", "0", "--hi", "99.9", "--train", "300", "--test", "30",
        "--runs", "2", "--lr", "0.01", "--max-epochs", "20", "--provider", &provider, "--dim", "6",
        "--threads", "1", "-o", path(&out),
    ];
    assert_eq!(qp(&args).status.code(), Some(3));

    // Stand-in exporter: random vectors written as QPEMB files.
    let random = ProviderSpec::random(6, 4);
    for run in 0..2 {
        let ds = Dataset::read_dir(out.join("datasets").join(format!("run-{run}")), None).unwrap();
        let p = random.open(&ds).unwrap();
        for split in [Split::Train, Split::Test] {
            let records = export_records(p.as_ref(), ds.split(split)).unwrap();
            let file = ProviderSpec::expected_file(&emb, &ds.split_sha256(split));
            write_qpemb(file, 6, &records).unwrap();
        }
    }
    let o = qp(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains(&format!("file:{}", path(&emb))));
    assert_eq!(fs::read_dir(out.join("manifests")).unwrap().count(), 2);
}

#[test]
fn report_regenerates_table_from_csv_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("exp");
    let o = qp(&[
        "run", "--task", "range", "--lo", "0", "--hi", "99.9", "--train", "300", "--test", "30",
        "--runs", "3", "--lr", "0.01", "--max-epochs", "15", "--provider", "oracle", "--dim", "4",
        "--seed", "11", "-o", path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("report.txt")).unwrap();
    assert_eq!(stdout(&o), table);

    let from_csv = qp(&["report", path(&out)]);
    assert!(from_csv.status.success());
    assert_eq!(stdout(&from_csv), table);

    let merged = tmp.path().join("merged.csv");
    let from_manifests = qp(&["report", "--from-manifests", path(&out), "--csv-out", path(&merged)]);
    assert!(from_manifests.status.success(), "{}", stderr(&from_manifests));
    assert_eq!(stdout(&from_manifests), table);
    assert_eq!(fs::read(&merged).unwrap(), fs::read(out.join("report.csv")).unwrap());

    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let seeds: Vec<&str> = csv
        .lines()
        .skip(1)
        .take(3)
        .map(|l| l.rsplit(',').next().unwrap())
        .collect();
    assert_eq!(seeds, ["11", "12", "13"]);
    assert!(csv.contains(",mean,rmse,"));
    assert!(csv.contains(",std,rmse,"));
}

#[test]
fn single_run_reports_no_std() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qp(&[
        "run", "--task", "percent", "--lo", "0", "--hi", "9.9", "--train", "200", "--test", "20",
        "--runs", "1", "--lr", "0.01", "--max-epochs", "5", "--provider", "oracle", "--dim", "4",
        "-o", path(tmp.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    assert!(csv.contains(",mean,"));
    assert!(!csv.contains(",std,"));
    assert!(!stdout(&o).contains('±'));
}

#[test]
fn grid_command_records_every_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qp(&[
        "grid", "--task", "percent", "--lo", "0", "--hi", "99.9", "--train", "300", "--test", "30",
        "--provider", "oracle", "--dim", "4", "--grid-epochs", "5", "--threads", "1", "-o", path(tmp.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("grid.json")).unwrap()).unwrap();
    assert_eq!(grid["cells"].as_array().unwrap().len(), 24);
    assert!(stdout(&o).contains("best: lr"));
}

#[test]
fn threads_zero_is_a_usage_error() {
    let o = qp(&["--threads", "0", "selftest"]);
    assert_eq!(o.status.code(), Some(2));
}
