use quantprobe::embeddings::{export_records, write_qpemb, EmbeddingProvider, Oracle, ProviderSpec};
use quantprobe::experiments::{max_len, run_experiment, ExperimentSpec};
use quantprobe::metrics::rmse;
use quantprobe::probes::ProbeConfig;
use quantprobe::synthgen::{
    generate_dataset, Dataset, DatasetSpec, LogBase, Split, TaskKind, UnitLexicon, ValueRange,
};
use quantprobe::training::{train_probe, TrainConfig};
use quantprobe::Error;

fn percent(train: usize, test: usize, seed: u64) -> Dataset {
    generate_dataset(TaskKind::Percent, ValueRange::new(0.0, 99.9).unwrap(), seed, train, test, None).unwrap()
}

#[test]
fn oracle_first_component_is_linearly_recoverable() {
    let ds = percent(2_000, 500, 4);
    let oracle = Oracle::new(8, 0).unwrap();
    let xs = |exs: &[quantprobe::synthgen::Example]| -> Vec<f64> {
        exs.iter().map(|e| oracle.embed(e).unwrap().data()[[0, 0]]).collect()
    };
    let (x, y): (Vec<f64>, Vec<f64>) = (xs(&ds.train), ds.train.iter().map(|e| e.targets[0]).collect());
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = cov / var;
    let preds: Vec<f64> = xs(&ds.test).iter().map(|a| my + slope * (a - mx)).collect();
    let targets: Vec<f64> = ds.test.iter().map(|e| e.targets[0]).collect();
    assert!(rmse(&preds, &targets).unwrap() < 0.02);
}

#[test]
fn oracle_probe_reaches_target_within_200_epochs() {
    let ds = percent(10_000, 1_000, 1);
    let oracle = Oracle::new(16, 0).unwrap();
    let probe = ProbeConfig::for_task(TaskKind::Percent, 16, 1, None).unwrap();
    let mut cfg = TrainConfig::default().with_lr(1e-2, 0.5);
    cfg.max_epochs = 200;
    let res = train_probe(&ds, &oracle, &probe, &cfg).unwrap();
    assert!(!res.diverged);
    assert!(res.test_metric <= 0.02, "{}", res.test_metric);
    assert!(res.best_epoch <= res.epochs_run && res.epochs_run <= 200);
    assert_eq!(res.val_losses.len(), res.epochs_run);
}

#[test]
fn file_backed_provider_trains_like_its_source() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = percent(600, 60, 8);
    let source = ProviderSpec::random(8, 1).open(&ds).unwrap();
    for split in [Split::Train, Split::Test] {
        let records = export_records(source.as_ref(), ds.split(split)).unwrap();
        write_qpemb(ProviderSpec::expected_file(tmp.path(), &ds.split_sha256(split)), 8, &records).unwrap();
    }
    let file = ProviderSpec::FileBacked { dir: tmp.path().to_path_buf(), dim: 8 }.open(&ds).unwrap();
    let len = max_len(file.as_ref(), &ds).unwrap();
    assert_eq!(len, max_len(source.as_ref(), &ds).unwrap());
    let probe = ProbeConfig::for_task(TaskKind::Percent, 8, len, None).unwrap().with_hidden(16);
    let mut cfg = TrainConfig::default().with_lr(3e-2, 0.7);
    cfg.batch_size = 32;
    cfg.max_epochs = 20;
    let res = train_probe(&ds, file.as_ref(), &probe, &cfg).unwrap();
    assert!(!res.diverged && res.test_metric.is_finite());

    let wrong_dim = ProviderSpec::FileBacked { dir: tmp.path().to_path_buf(), dim: 9 }.open(&ds);
    assert!(wrong_dim.is_err());
    let other = percent(600, 60, 9);
    let missing = ProviderSpec::FileBacked { dir: tmp.path().to_path_buf(), dim: 8 }.open(&other);
    assert!(matches!(missing, Err(Error::MissingEmbeddings(files)) if files.len() == 2));
}

#[test]
fn dataset_directories_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let lex = UnitLexicon::builtin();
    let range = ValueRange::new(2.5, 60.0).unwrap();
    let cases = [
        DatasetSpec::new(TaskKind::UnitId, range, 1).with_sizes(50, 5).generate(Some(&lex)).unwrap(),
        DatasetSpec::new(TaskKind::Order, range, 2)
            .with_sizes(50, 5)
            .with_log_base(LogBase::Natural)
            .generate(None)
            .unwrap(),
        DatasetSpec::new(TaskKind::Range, range, 3).with_sizes(50, 5).generate(None).unwrap(),
    ];
    for (i, ds) in cases.iter().enumerate() {
        let dir = tmp.path().join(i.to_string());
        ds.write_dir(&dir).unwrap();
        let back = Dataset::read_dir(&dir, ds.lexicon.as_ref()).unwrap();
        assert_eq!(&back, ds);
        assert_eq!(back.split_sha256(Split::Test), ds.split_sha256(Split::Test));
    }
    let unit_dir = tmp.path().join("0");
    assert!(Dataset::read_dir(&unit_dir, None).is_err());
}

#[test]
fn experiment_runs_are_reproducible_and_resampled() {
    let mut spec = ExperimentSpec::new(
        TaskKind::Addition,
        ValueRange::new(0.0, 9.9).unwrap(),
        ProviderSpec::oracle(4, 0),
    );
    spec.runs = 3;
    spec.train_size = 300;
    spec.test_size = 30;
    spec.train = TrainConfig::default().with_lr(1e-2, 0.5);
    spec.train.max_epochs = 10;
    let a = run_experiment(&spec, None).unwrap();
    let b = run_experiment(&spec, None).unwrap();
    assert_eq!(a.report, b.report);
    let digests: Vec<&str> = a.manifests.iter().map(|m| m.dataset.train_sha256.as_str()).collect();
    assert!(digests[0] != digests[1] && digests[1] != digests[2]);
    for (i, m) in a.manifests.iter().enumerate() {
        assert_eq!(m.run_index, i);
        assert_eq!(m.seed, i as u64);
        assert_eq!(m.train.seed, i as u64);
        assert_eq!(m.probe.max_len, 1);
    }
}
