//! Command-line interface.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 missing data,
//! 4 internal error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{decode_qpemb, encode_qpemb, Oracle, ProviderSpec, QpembRecord, DEFAULT_DIM};
use crate::experiments::{
    load_manifests, parse_csv, probe_config_for, render_csv, render_table, reports_from_manifests,
    run_experiment, ExperimentReport, ExperimentSpec, Hyper, DEFAULT_RUNS,
};
use crate::metrics::{accuracy, aggregate, rmse};
use crate::probes::{gradient_check, ProbeConfig};
use crate::synthgen::{
    DatasetManifest, DatasetSpec, LogBase, Split, TaskKind, UnitLexicon, ValueRange,
    DEFAULT_TEST_SIZE, DEFAULT_TRAIN_SIZE,
};
use crate::training::{
    grid_search, train_probe, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_CLIP_NORM, DEFAULT_LR_GRID,
    DEFAULT_MAX_EPOCHS, DEFAULT_MOMENTUM_GRID, DEFAULT_PATIENCE,
};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "quantprobe", version, about = "Numeracy probes over frozen token embeddings")]
pub struct Cli {
    /// Worker threads for parallel runs; 1 gives fully sequential execution.
    #[arg(long, global = true, env = "QUANTPROBE_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a train/test dataset directory.
    Gen(GenArgs),
    /// Train probes over several freshly sampled datasets and report.
    Run(RunArgs),
    /// Grid-search learning rate and momentum on the search seed.
    Grid(RunArgs),
    /// Rebuild the text table from report CSVs or run manifests.
    Report(ReportArgs),
    /// Quick end-to-end checks of gradients, formats and training.
    Selftest,
    /// List the embedding files a file-backed provider needs for a dataset.
    Expect(ExpectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LogBaseArg {
    Ten,
    Natural,
}

impl From<LogBaseArg> for LogBase {
    fn from(b: LogBaseArg) -> Self {
        match b {
            LogBaseArg::Ten => LogBase::Ten,
            LogBaseArg::Natural => LogBase::Natural,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub task: TaskKind,
    #[arg(long)]
    pub lo: f64,
    #[arg(long)]
    pub hi: f64,
    #[arg(long, default_value_t = DEFAULT_TRAIN_SIZE)]
    pub train: usize,
    #[arg(long, default_value_t = DEFAULT_TEST_SIZE)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Unit list, one per line (unit identification only; default built in).
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ten")]
    pub log_base: LogBaseArg,
}

impl DataArgs {
    fn range(&self) -> Result<ValueRange> {
        ValueRange::new(self.lo, self.hi)
    }

    fn lexicon(&self) -> Result<Option<UnitLexicon>> {
        match (&self.lexicon, self.task.is_classification()) {
            (Some(p), true) => Ok(Some(UnitLexicon::load(p)?)),
            (None, true) => Ok(Some(UnitLexicon::builtin())),
            (Some(_), false) => Err(Error::Config(format!("--lexicon does not apply to {}", self.task))),
            (None, false) => Ok(None),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// random, oracle or file:DIR
    #[arg(long, default_value = "random")]
    pub provider: String,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    pub dim: usize,
    /// Seed of the random-vector table or oracle noise.
    #[arg(long, default_value_t = 0)]
    pub embed_seed: u64,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    pub runs: usize,
    /// Fixed learning rate; without it the default grid is searched.
    #[arg(long, conflicts_with = "grid")]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub momentum: f64,
    #[arg(long)]
    pub grid: bool,
    /// Epoch cap for each grid cell.
    #[arg(long)]
    pub grid_epochs: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_CLIP_NORM)]
    pub clip: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_EPOCHS)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = DEFAULT_PATIENCE)]
    pub patience: usize,
    /// Probe hidden size (default depends on the task).
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Experiment directories or report CSV files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Read run manifests instead of report.csv.
    #[arg(long)]
    pub from_manifests: bool,
    /// Also write the merged CSV here.
    #[arg(long)]
    pub csv_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExpectArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub dir: PathBuf,
    /// Directory the embedding files are expected in (default: --dir).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    pub dim: usize,
}

pub fn parse_provider(text: &str, dim: usize, seed: u64) -> Result<ProviderSpec> {
    let spec = match text {
        "random" => ProviderSpec::random(dim, seed),
        "oracle" => ProviderSpec::oracle(dim, seed),
        _ => match text.strip_prefix("file:") {
            Some(dir) if !dir.is_empty() => ProviderSpec::FileBacked {
                dir: PathBuf::from(dir),
                dim,
            },
            _ => {
                return Err(Error::Config(format!(
                    "provider must be random, oracle or file:DIR, got {text:?}"
                )))
            }
        },
    };
    spec.validate()?;
    Ok(spec)
}

fn experiment_spec(args: &RunArgs) -> Result<ExperimentSpec> {
    let d = &args.data;
    let mut spec = ExperimentSpec::new(d.task, d.range()?, parse_provider(&args.provider, args.dim, args.embed_seed)?);
    spec.lexicon = d.lexicon()?;
    spec.runs = args.runs;
    spec.base_seed = d.seed;
    spec.train_size = d.train;
    spec.test_size = d.test;
    spec.log_base = d.log_base.into();
    spec.hidden_dim = args.hidden;
    spec.train = TrainConfig {
        lr: args.lr.unwrap_or(TrainConfig::default().lr),
        momentum: args.momentum,
        batch_size: args.batch_size,
        clip_norm: args.clip,
        max_epochs: args.max_epochs,
        patience: args.patience,
        ..TrainConfig::default()
    };
    spec.hyper = if args.lr.is_some() && !args.grid {
        Hyper::Fixed
    } else {
        Hyper::Grid {
            lrs: DEFAULT_LR_GRID.to_vec(),
            momentums: DEFAULT_MOMENTUM_GRID.to_vec(),
            max_epochs: args.grid_epochs,
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let d = &args.data;
    let lexicon = d.lexicon()?;
    let ds = DatasetSpec::new(d.task, d.range()?, d.seed)
        .with_sizes(d.train, d.test)
        .with_log_base(d.log_base.into())
        .generate(lexicon.as_ref())?;
    let manifest = ds.write_dir(&args.out)?;
    if let Some(lex) = &lexicon {
        fs::write(args.out.join("units.txt"), lex.to_text())?;
    }
    println!(
        "wrote {} train / {} test {} examples to {}",
        manifest.train_size,
        manifest.test_size,
        manifest.task,
        args.out.display()
    );
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let spec = experiment_spec(args)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("experiment.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    let output = run_experiment(&spec, Some(&args.out))?;
    if let Some(grid) = &output.grid {
        println!("grid choice: lr {:e}, momentum {}", grid.best.lr, grid.best.momentum);
    }
    print!("{}", render_table(std::slice::from_ref(&output.report))?);
    Ok(())
}

fn cmd_grid(args: &RunArgs) -> Result<()> {
    let spec = experiment_spec(args)?;
    let Hyper::Grid { lrs, momentums, max_epochs } = &spec.hyper else {
        return Err(Error::Config("grid does not take --lr".into()));
    };
    let ds = spec.dataset(spec.search_seed())?;
    if let ProviderSpec::FileBacked { .. } = &spec.provider {
        ds.write_dir(args.out.join("datasets").join("search"))?;
    }
    let provider = spec.provider.open(&ds)?;
    let probe = probe_config_for(&spec, provider.as_ref(), &ds)?;
    let mut base = spec.train.clone().with_seed(spec.search_seed());
    if let Some(e) = max_epochs {
        base.max_epochs = *e;
    }
    let outcome = grid_search(&ds, provider.as_ref(), &probe, &base, lrs, momentums)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("grid.json"), serde_json::to_string_pretty(&outcome)? + "\n")?;
    println!("lr\tmomentum\tbest_val_loss\tbest_epoch\tdiverged");
    for c in &outcome.cells {
        let loss = c.result.best_val_loss.map_or("-".to_string(), |l| format!("{l:.6e}"));
        println!("{:e}\t{}\t{loss}\t{}\t{}", c.lr, c.momentum, c.result.best_epoch, c.result.diverged);
    }
    println!("best: lr {:e}, momentum {}", outcome.best.lr, outcome.best.momentum);
    Ok(())
}

fn load_reports(path: &Path, from_manifests: bool) -> Result<Vec<ExperimentReport>> {
    if from_manifests {
        return reports_from_manifests(&load_manifests(path)?);
    }
    let csv_path = if path.is_dir() { path.join("report.csv") } else { path.to_path_buf() };
    parse_csv(&fs::read_to_string(&csv_path)?)
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for p in &args.inputs {
        reports.extend(load_reports(p, args.from_manifests)?);
    }
    if let Some(out) = &args.csv_out {
        fs::write(out, render_csv(&reports)?)?;
    }
    print!("{}", render_table(&reports)?);
    Ok(())
}

fn cmd_expect(args: &ExpectArgs) -> Result<()> {
    if args.dim == 0 {
        return Err(Error::Config("--dim must be positive".into()));
    }
    let path = args.dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::Config(format!("no dataset manifest at {}", path.display())));
    }
    let manifest = DatasetManifest::load(&path)?;
    let dir = args.embeddings.as_deref().unwrap_or(&args.dir);
    for split in [Split::Train, Split::Test] {
        let file = ProviderSpec::expected_file(dir, manifest.sha256(split));
        println!("{split}\t{}\tdim={}", file.display(), args.dim);
    }
    Ok(())
}

fn check(name: &str, ok: bool, detail: String, failures: &mut usize) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    if !ok {
        *failures += 1;
    }
}

#[allow(clippy::approx_constant)]
fn cmd_selftest() -> Result<bool> {
    let mut failures = 0;

    for task in [TaskKind::Percent, TaskKind::Range, TaskKind::UnitId] {
        let cfg = ProbeConfig::for_task(task, 8, 3, Some(3))?.with_hidden(4);
        let g = gradient_check(&cfg, 1, 5, 1e-5)?;
        check(
            &format!("gradients {task}"),
            g.max_rel_err < 1e-4,
            format!("max relative error {:.2e} over {} entries", g.max_rel_err, g.entries),
            &mut failures,
        );
    }

    let r = rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 5.0])?;
    check("rmse", (r - 1.154701).abs() < 1e-6, format!("{r:.6}"), &mut failures);
    let labels: Vec<usize> = (0..1000).map(|i| usize::from(i < 5)).collect();
    let acc = accuracy(&vec![0; 1000], &labels)?;
    check("accuracy", acc == 0.995, format!("{acc}"), &mut failures);
    let (m, s) = aggregate(&[1.0, 3.0])?;
    check("aggregate", m == 2.0 && (s - 1.414214).abs() < 1e-6, format!("({m}, {s:.6})"), &mut failures);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let records: Vec<QpembRecord> = (0..50u64)
        .map(|id| {
            let n = 1 + (id as usize % 4);
            let values = (0..n * 6).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
            QpembRecord { id, token_count: n, values }
        })
        .collect();
    let bytes = encode_qpemb(6, &records)?;
    let back = decode_qpemb(&bytes, "selftest")?;
    check("qpemb round trip", back.records == records, format!("{} bytes", bytes.len()), &mut failures);
    let truncated = decode_qpemb(&bytes[..bytes.len() - 3], "selftest");
    check(
        "qpemb truncation",
        matches!(truncated, Err(Error::Format { .. })),
        truncated.err().map_or("accepted".into(), |e| e.to_string()),
        &mut failures,
    );

    let ds = DatasetSpec::new(TaskKind::Percent, ValueRange::new(0.0, 99.9)?, 1).generate(None)?;
    let oracle = Oracle::new(8, 1)?;
    let cfg = ProbeConfig::for_task(TaskKind::Percent, 8, 1, None)?;
    let mut tc = TrainConfig::default().with_lr(1e-2, 0.5);
    tc.max_epochs = 200;
    let res = train_probe(&ds, &oracle, &cfg, &tc)?;
    check(
        "oracle percent",
        !res.diverged && res.test_metric <= 0.02,
        format!("test rmse {:.4} after {} epochs", res.test_metric, res.epochs_run),
        &mut failures,
    );
    Ok(failures == 0)
}

/// Exit code for an error returned by a command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Format { .. } => EXIT_USAGE,
        Error::MissingEmbeddings(_) | Error::Data(_) => EXIT_MISSING,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        _ => EXIT_INTERNAL,
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| EXIT_OK),
        Command::Run(a) => cmd_run(a).map(|_| EXIT_OK),
        Command::Grid(a) => cmd_grid(a).map(|_| EXIT_OK),
        Command::Report(a) => cmd_report(a).map(|_| EXIT_OK),
        Command::Expect(a) => cmd_expect(a).map(|_| EXIT_OK),
        Command::Selftest => cmd_selftest().map(|ok| if ok { EXIT_OK } else { EXIT_INTERNAL }),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if cli.threads == Some(0) {
        eprintln!("error: --threads must be at least 1");
        return EXIT_USAGE;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INTERNAL;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(err) => {
            if let Error::MissingEmbeddings(files) = &err {
                eprintln!("error: missing embedding files; export these first:");
                for f in files {
                    eprintln!("  {}", f.display());
                }
            } else {
                eprintln!("error: {err}");
            }
            exit_code(&err)
        }
    }
}

pub fn main() -> i32 {
    run_with_args(std::env::args_os())
}
