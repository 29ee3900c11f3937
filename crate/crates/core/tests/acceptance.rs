//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; the
//! process exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quantprobe::embeddings::{
    decode_qpemb, encode_qpemb, EmbeddingMatrix, EmbeddingProvider, Oracle, ProviderSpec,
    QpembRecord,
};
use quantprobe::experiments::{run_experiment, ExperimentSpec, Hyper};
use quantprobe::metrics::{accuracy, aggregate, rmse};
use quantprobe::nn::summed_mse;
use quantprobe::probes::{gradient_check, ProbeConfig};
use quantprobe::synthgen::{generate_dataset, Example, TaskKind, ValueRange};
use quantprobe::training::{drive_epochs, select_best, train_probe, TrainConfig};
use quantprobe::Error;

/// Oracle embedding width used for the control experiment.
const ORACLE_DIM: usize = 16;
/// Epoch cap per grid cell in the oracle control.
const ORACLE_GRID_EPOCHS: usize = 60;
/// Random-vector width for the predict-mean comparison.
const BASELINE_DIM: usize = 32;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn percent_range() -> ValueRange {
    ValueRange::new(0.0, 99.9).unwrap()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut details = Vec::new();
    for task in [TaskKind::Percent, TaskKind::Range, TaskKind::UnitId] {
        let cfg = ProbeConfig::for_task(task, 8, 3, Some(3)).unwrap().with_hidden(4);
        let g = gradient_check(&cfg, 17, 5, 1e-5).map_err(|e| e.to_string())?;
        worst = worst.max(g.max_rel_err);
        details.push(format!("{task} {:.1e}", g.max_rel_err));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-4 && secs < 60.0,
        format!("max rel err {} ({secs:.1}s)", details.join(", ")),
    )
}

fn oracle_control() -> Outcome {
    let start = Instant::now();
    let mut spec = ExperimentSpec::new(
        TaskKind::Percent,
        percent_range(),
        ProviderSpec::oracle(ORACLE_DIM, 0),
    );
    spec.base_seed = 1000;
    let Hyper::Grid { lrs, momentums, .. } = Hyper::default_grid() else { unreachable!() };
    spec.hyper = Hyper::Grid {
        lrs,
        momentums,
        max_epochs: Some(ORACLE_GRID_EPOCHS),
    };
    let out = run_experiment(&spec, None).map_err(|e| e.to_string())?;
    let grid = out.grid.as_ref().unwrap();
    let chosen = grid
        .cells
        .iter()
        .find(|c| c.lr == grid.best.lr && c.momentum == grid.best.momentum)
        .unwrap();
    let chosen_loss = chosen.result.best_val_loss.unwrap();
    let minimal = grid
        .cells
        .iter()
        .filter(|c| !c.result.diverged)
        .all(|c| chosen_loss <= c.result.best_val_loss.unwrap_or(f64::INFINITY));
    let mean = out.report.mean();
    let secs = start.elapsed().as_secs_f64();
    ensure(
        mean <= 0.02 && minimal && secs < 600.0,
        format!(
            "grid chose lr {:e} momentum {} (minimal: {minimal}); mean test RMSE {mean:.5} over {} runs ({secs:.0}s)",
            grid.best.lr,
            grid.best.momentum,
            out.report.runs.len()
        ),
    )
}

fn unit_id_random_vectors() -> Outcome {
    let start = Instant::now();
    let mut spec = ExperimentSpec::new(
        TaskKind::UnitId,
        percent_range(),
        ProviderSpec::random(768, 0),
    );
    spec.base_seed = 2000;
    spec.train = TrainConfig::default().with_lr(0.3, 0.7);
    let out = run_experiment(&spec, None).map_err(|e| e.to_string())?;
    let mean = out.report.mean();
    let secs = start.elapsed().as_secs_f64();
    ensure(
        mean >= 0.95 && secs < 3600.0,
        format!("mean accuracy {} over {} runs ({secs:.0}s)", out.report.cell(), out.report.runs.len()),
    )
}

fn baseline_beats_mean() -> Outcome {
    // Percent targets are k/1000 for k uniform on 0..=999; predicting the
    // mean scores the population std of that grid.
    let n = 1000.0f64;
    let predict_mean = ((n * n - 1.0) / 12.0).sqrt() / n;
    let mut spec = ExperimentSpec::new(
        TaskKind::Percent,
        percent_range(),
        ProviderSpec::random(BASELINE_DIM, 0),
    );
    spec.base_seed = 3000;
    spec.train = TrainConfig::default().with_lr(1e-2, 0.7);
    let out = run_experiment(&spec, None).map_err(|e| e.to_string())?;
    let mean = out.report.mean();
    ensure(
        mean < predict_mean,
        format!("mean RMSE {} < predict-mean {predict_mean:.5}", out.report.cell()),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cases: [&[&str]; 2] = [
        &["--task", "percent", "--provider", "oracle", "--dim", "4", "--lr", "0.03"],
        &["--task", "unit_id", "--provider", "random", "--dim", "16", "--lr", "0.3", "--momentum", "0.7"],
    ];
    let mut details = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let mut reports = Vec::new();
        for rep in 0..2 {
            let dir = tmp.path().join(format!("case{i}-{rep}"));
            let mut args = vec!["run", "--threads", "1", "--lo", "0", "--hi", "99.9", "--train", "600", "--test", "60", "--runs", "3", "--max-epochs", "25", "--seed", "5"];
            args.extend_from_slice(case);
            args.extend(["-o", dir.to_str().unwrap()]);
            let o = Command::new(env!("CARGO_BIN_EXE_quantprobe"))
                .args(&args)
                .output()
                .map_err(|e| e.to_string())?;
            if !o.status.success() {
                return Err(String::from_utf8_lossy(&o.stderr).into_owned());
            }
            reports.push(std::fs::read(dir.join("report.csv")).map_err(|e| e.to_string())?);
        }
        let same = reports[0] == reports[1];
        details.push(format!("{} {}", case[1], if same { "identical" } else { "DIFFERENT" }));
        if !same {
            return Err(details.join(", "));
        }
    }
    Ok(format!("report.csv bytes: {}", details.join(", ")))
}

#[allow(clippy::approx_constant)]
fn metric_oracles() -> Outcome {
    let r = rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 5.0]).unwrap();
    let labels: Vec<usize> = (0..1000).map(|i| usize::from(i >= 995)).collect();
    let acc = accuracy(&vec![0; 1000], &labels).unwrap();
    let (m, s) = aggregate(&[1.0, 3.0]).unwrap();
    let out = ndarray::arr2(&[[0.0, 0.0], [0.0, 0.0]]);
    let tgt = ndarray::arr2(&[[1.0, 1.0], [0.0, 2f64.sqrt()]]);
    let (loss, _) = summed_mse(&out, &tgt).unwrap();
    let ok = (r - 1.154701).abs() <= 1e-6
        && acc == 0.995
        && m == 2.0
        && (s - 1.414214).abs() <= 1e-6
        && (loss - 2.0).abs() <= 1e-12;
    ensure(
        ok,
        format!("rmse {r:.6}, accuracy {acc}, aggregate ({m}, {s:.6}), range loss {loss}"),
    )
}

/// Wraps a provider and logs which example ids it was asked for.
struct Recording<'a> {
    inner: &'a dyn EmbeddingProvider,
    log: Mutex<Vec<u64>>,
}

impl EmbeddingProvider for Recording<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, example: &Example) -> quantprobe::Result<EmbeddingMatrix> {
        self.log.lock().unwrap().push(example.id);
        self.inner.embed(example)
    }
}

fn protocol_conformance() -> Outcome {
    let (stop, _) = drive_epochs(1000, 20, |e| Ok(e as f64), |_| {});
    let early = stop.epochs_run == stop.best_epoch + 20 && stop.best_epoch == 1;

    let ds = generate_dataset(TaskKind::Percent, percent_range(), 9, 1000, 100, None).unwrap();
    let oracle = Oracle::new(4, 0).unwrap();
    let rec = Recording {
        inner: &oracle,
        log: Mutex::new(Vec::new()),
    };
    let cfg = ProbeConfig::for_task(TaskKind::Percent, 4, 1, None).unwrap();
    let mut tc = TrainConfig::default().with_lr(1e-2, 0.5);
    tc.max_epochs = 30;
    let res = train_probe(&ds, &rec, &cfg, &tc).map_err(|e| e.to_string())?;
    let log = rec.log.into_inner().unwrap();
    let train_n = ds.train.len() as u64;
    let first_test = log.iter().position(|&id| id >= train_n).unwrap_or(log.len());
    let hygiene = log[..first_test].iter().all(|&id| id < train_n)
        && log[first_test..].iter().all(|&id| id >= train_n)
        && log.len() - first_test == ds.test.len()
        && first_test > 0;

    let tie = select_best(&[(1e-2, 0.5, Some(0.1)), (1e-3, 0.5, Some(0.1))]) == Some(1);
    ensure(
        early && hygiene && tie,
        format!(
            "early stop at epoch {} (best {}), test ids touched once after {} training lookups over {} epochs, tie -> smaller lr: {tie}",
            stop.epochs_run, stop.best_epoch, first_test, res.epochs_run
        ),
    )
}

fn qpemb() -> Outcome {
    let dim = 7usize;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let records: Vec<QpembRecord> = (0..1000u64)
        .map(|i| {
            let n = rng.random_range(1..=6usize);
            let values = (0..n * dim)
                .map(|_| f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF))
                .collect();
            QpembRecord { id: i * 3 + 1, token_count: n, values }
        })
        .collect();
    let bytes = encode_qpemb(dim as u32, &records).map_err(|e| e.to_string())?;
    let back = decode_qpemb(&bytes, "mem").map_err(|e| e.to_string())?;
    let exact = back.records.len() == records.len()
        && back.records.iter().zip(&records).all(|(a, b)| {
            a.id == b.id
                && a.token_count == b.token_count
                && a.values.iter().map(|v| v.to_bits()).eq(b.values.iter().map(|v| v.to_bits()))
        });

    let last_payload = 20 + records[..999].iter().map(|r| 12 + 4 * r.values.len()).sum::<usize>() + 12;
    let truncated = decode_qpemb(&bytes[..bytes.len() - 5], "mem");
    let offset_ok = matches!(truncated, Err(Error::Format { offset, .. }) if offset as usize == last_payload);

    let zero = QpembRecord { id: 0, token_count: 2, values: vec![0.0; 6] };
    let small = encode_qpemb(3, &[zero]).map_err(|e| e.to_string())?;
    // header 4+4+4+8, record 8+4+2*3*4
    let size_ok = small.len() == 20 + 12 + 24;
    ensure(
        exact && offset_ok && size_ok,
        format!(
            "1000-record round trip bit-exact: {exact}; truncation reported at byte {last_payload}: {offset_ok}; 2x3 zero file {} bytes",
            small.len()
        ),
    )
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [Criterion; 8] = [
        ("gradient correctness", gradient_correctness),
        ("metric oracles", metric_oracles),
        ("protocol conformance", protocol_conformance),
        ("qpemb format", qpemb),
        ("determinism", determinism),
        ("oracle control", oracle_control),
        ("baseline beats mean", baseline_beats_mean),
        ("unit identification", unit_id_random_vectors),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if filter.as_ref().is_some_and(|p| !name.contains(p.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
