//! Repeated-run experiments and their reports.
//!
//! An experiment trains one probe per run on a freshly generated dataset
//! (run `i` uses seed `base_seed + i`), optionally after a grid search on
//! seed `base_seed - 1`, and aggregates the test metric across runs.
//!
//! On disk an experiment directory holds `manifests/run-<i>.json`,
//! `report.csv`, `report.txt` and, after a grid search, `grid.json`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingProvider, ProviderSpec};
use crate::metrics::{aggregate, format_cell, MetricKind};
use crate::probes::ProbeConfig;
use crate::synthgen::{
    render_tenths, Dataset, DatasetManifest, DatasetSpec, LogBase, Split, TaskKind, UnitLexicon,
    ValueRange, DEFAULT_TEST_SIZE, DEFAULT_TRAIN_SIZE,
};
use crate::training::{
    grid_search, train_probe, GridOutcome, RunResult, TrainConfig, DEFAULT_LR_GRID,
    DEFAULT_MOMENTUM_GRID,
};
use crate::{Error, Result};

pub const DEFAULT_RUNS: usize = 5;

pub const CSV_COLUMNS: [&str; 10] = [
    "task",
    "range_lo",
    "range_hi",
    "provider",
    "run_index",
    "metric_kind",
    "value",
    "diverged",
    "best_epoch",
    "seed",
];

/// How lr and momentum are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Hyper {
    /// Use `ExperimentSpec::train` as given.
    Fixed,
    /// Grid search on the search seed; `max_epochs` optionally caps each cell.
    Grid {
        lrs: Vec<f64>,
        momentums: Vec<f64>,
        #[serde(default)]
        max_epochs: Option<usize>,
    },
}

impl Hyper {
    pub fn default_grid() -> Self {
        Hyper::Grid {
            lrs: DEFAULT_LR_GRID.to_vec(),
            momentums: DEFAULT_MOMENTUM_GRID.to_vec(),
            max_epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub task: TaskKind,
    pub range: ValueRange,
    pub provider: ProviderSpec,
    pub train: TrainConfig,
    pub hyper: Hyper,
    pub runs: usize,
    pub base_seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    #[serde(default)]
    pub log_base: LogBase,
    /// Overrides the task's default probe hidden size.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    #[serde(skip)]
    pub lexicon: Option<UnitLexicon>,
}

impl ExperimentSpec {
    /// Five runs at full dataset size with default training settings; unit
    /// identification gets the built-in lexicon.
    pub fn new(task: TaskKind, range: ValueRange, provider: ProviderSpec) -> Self {
        ExperimentSpec {
            task,
            range,
            provider,
            train: TrainConfig::default(),
            hyper: Hyper::Fixed,
            runs: DEFAULT_RUNS,
            base_seed: 0,
            train_size: DEFAULT_TRAIN_SIZE,
            test_size: DEFAULT_TEST_SIZE,
            log_base: LogBase::Ten,
            hidden_dim: None,
            lexicon: task.is_classification().then(UnitLexicon::builtin),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        self.provider.validate()?;
        if self.task.is_classification() != self.lexicon.is_some() {
            return Err(Error::Config(format!(
                "task {} {} a unit lexicon",
                self.task,
                if self.lexicon.is_some() { "does not take" } else { "needs" }
            )));
        }
        match &self.hyper {
            Hyper::Fixed => self.train.validate(self.train_size)?,
            Hyper::Grid { lrs, momentums, max_epochs } => {
                if lrs.is_empty() || momentums.is_empty() || *max_epochs == Some(0) {
                    return Err(Error::Config("grid needs lrs, momentums and positive epochs".into()));
                }
            }
        }
        Ok(())
    }

    pub fn run_seed(&self, run_index: usize) -> u64 {
        self.base_seed.wrapping_add(run_index as u64)
    }

    pub fn search_seed(&self) -> u64 {
        self.base_seed.wrapping_sub(1)
    }

    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        DatasetSpec::new(self.task, self.range, seed)
            .with_sizes(self.train_size, self.test_size)
            .with_log_base(self.log_base)
            .generate(self.lexicon.as_ref())
    }
}

/// Everything recorded about one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_index: usize,
    pub seed: u64,
    pub provider_label: String,
    pub provider: ProviderSpec,
    pub dataset: DatasetManifest,
    pub probe: ProbeConfig,
    pub train: TrainConfig,
    pub result: RunResult,
}

/// Per-run line of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_index: usize,
    pub seed: u64,
    pub value: f64,
    pub diverged: bool,
    pub best_epoch: usize,
}

/// Aggregated result of one (task, range, provider) experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub task: TaskKind,
    pub range: ValueRange,
    pub provider: String,
    pub metric: MetricKind,
    pub runs: Vec<RunRecord>,
}

impl ExperimentReport {
    pub fn values(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.value).collect()
    }

    pub fn mean(&self) -> f64 {
        let v = self.values();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Sample standard deviation, absent for a single run.
    pub fn std(&self) -> Option<f64> {
        aggregate(&self.values()).ok().map(|(_, s)| s)
    }

    pub fn diverged_count(&self) -> usize {
        self.runs.iter().filter(|r| r.diverged).count()
    }

    pub fn cell(&self) -> String {
        let mut s = format_cell(self.mean(), self.std());
        let d = self.diverged_count();
        if d > 0 {
            let _ = write!(s, " ({d} div)");
        }
        s
    }

    pub fn from_manifests(manifests: &[RunManifest]) -> Result<Self> {
        let first = manifests
            .first()
            .ok_or_else(|| Error::Report("no run manifests".into()))?;
        let mut runs: Vec<RunRecord> = manifests
            .iter()
            .map(|m| RunRecord {
                run_index: m.run_index,
                seed: m.seed,
                value: m.result.test_metric,
                diverged: m.result.diverged,
                best_epoch: m.result.best_epoch,
            })
            .collect();
        runs.sort_by_key(|r| r.run_index);
        Ok(ExperimentReport {
            task: first.dataset.task,
            range: ValueRange::new(first.dataset.lo, first.dataset.hi)?,
            provider: first.provider_label.clone(),
            metric: first.result.metric,
            runs,
        })
    }
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub manifests: Vec<RunManifest>,
    pub grid: Option<GridOutcome>,
}

impl ExperimentOutput {
    /// Writes manifests, the grid record and both report formats into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let mdir = dir.join("manifests");
        fs::create_dir_all(&mdir)?;
        for m in &self.manifests {
            fs::write(
                mdir.join(format!("run-{}.json", m.run_index)),
                serde_json::to_string_pretty(m)? + "\n",
            )?;
        }
        if let Some(grid) = &self.grid {
            fs::write(dir.join("grid.json"), serde_json::to_string_pretty(grid)? + "\n")?;
        }
        let reports = std::slice::from_ref(&self.report);
        fs::write(dir.join("report.csv"), render_csv(reports)?)?;
        fs::write(dir.join("report.txt"), render_table(reports)?)?;
        Ok(())
    }
}

/// Longest embedding row count over both splits.
pub fn max_len(provider: &dyn EmbeddingProvider, dataset: &Dataset) -> Result<usize> {
    let mut longest = 0;
    for ex in dataset.train.iter().chain(&dataset.test) {
        longest = longest.max(provider.rows(ex)?);
    }
    Ok(longest)
}

/// Probe configuration for `dataset` as seen through `provider`.
pub fn probe_config_for(
    spec: &ExperimentSpec,
    provider: &dyn EmbeddingProvider,
    dataset: &Dataset,
) -> Result<ProbeConfig> {
    let classes = dataset.lexicon.as_ref().map(UnitLexicon::len);
    let cfg = ProbeConfig::for_task(spec.task, provider.dim(), max_len(provider, dataset)?, classes)?;
    Ok(match spec.hidden_dim {
        Some(h) => cfg.with_hidden(h),
        None => cfg,
    })
}

/// Embedding files a file-backed provider needs for `dataset`.
pub fn expected_files(dir: &Path, dataset: &Dataset) -> Vec<PathBuf> {
    [Split::Train, Split::Test]
        .into_iter()
        .map(|s| ProviderSpec::expected_file(dir, &dataset.split_sha256(s)))
        .collect()
}

/// Runs the experiment. With `out`, datasets for a file-backed provider are
/// written under `out/datasets/` before any embedding file is looked up.
pub fn run_experiment(spec: &ExperimentSpec, out: Option<&Path>) -> Result<ExperimentOutput> {
    spec.validate()?;
    let datasets = (0..spec.runs)
        .into_par_iter()
        .map(|i| spec.dataset(spec.run_seed(i)))
        .collect::<Result<Vec<_>>>()?;
    let search = match spec.hyper {
        Hyper::Grid { .. } => Some(spec.dataset(spec.search_seed())?),
        Hyper::Fixed => None,
    };

    if let ProviderSpec::FileBacked { dir, .. } = &spec.provider {
        if let Some(out) = out {
            for (i, ds) in datasets.iter().enumerate() {
                ds.write_dir(out.join("datasets").join(format!("run-{i}")))?;
            }
            if let Some(ds) = &search {
                ds.write_dir(out.join("datasets").join("search"))?;
            }
        }
        let missing: Vec<PathBuf> = search
            .iter()
            .chain(&datasets)
            .flat_map(|ds| expected_files(dir, ds))
            .filter(|p| !p.exists())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingEmbeddings(missing));
        }
    }

    let (train, grid) = match (&spec.hyper, &search) {
        (Hyper::Grid { lrs, momentums, max_epochs }, Some(ds)) => {
            let provider = spec.provider.open(ds)?;
            let probe = probe_config_for(spec, provider.as_ref(), ds)?;
            let mut base = spec.train.clone().with_seed(spec.search_seed());
            if let Some(e) = max_epochs {
                base.max_epochs = *e;
            }
            let outcome = grid_search(ds, provider.as_ref(), &probe, &base, lrs, momentums)?;
            let chosen = spec.train.clone().with_lr(outcome.best.lr, outcome.best.momentum);
            (chosen, Some(outcome))
        }
        _ => (spec.train.clone(), None),
    };

    let manifests = datasets
        .par_iter()
        .enumerate()
        .map(|(i, ds)| {
            let provider = spec.provider.open(ds)?;
            let probe = probe_config_for(spec, provider.as_ref(), ds)?;
            let cfg = train.clone().with_seed(spec.run_seed(i));
            let result = train_probe(ds, provider.as_ref(), &probe, &cfg)?;
            Ok(RunManifest {
                run_index: i,
                seed: spec.run_seed(i),
                provider_label: spec.provider.label(),
                provider: spec.provider.clone(),
                dataset: ds.manifest(),
                probe,
                train: cfg,
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let output = ExperimentOutput {
        report: ExperimentReport::from_manifests(&manifests)?,
        manifests,
        grid,
    };
    if let Some(out) = out {
        output.write_dir(out)?;
    }
    Ok(output)
}

/// Reads every `run-*.json` in `dir/manifests`.
pub fn load_manifests(dir: &Path) -> Result<Vec<RunManifest>> {
    let mdir = dir.join("manifests");
    let mut paths: Vec<PathBuf> = fs::read_dir(&mdir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(&p)?;
        out.push(
            serde_json::from_str(&text)
                .map_err(|e| Error::format(p.display().to_string(), e.line() as u64, e.to_string()))?,
        );
    }
    if out.is_empty() {
        return Err(Error::Report(format!("no run manifests in {}", mdir.display())));
    }
    Ok(out)
}

/// Groups manifests by (task, range, provider), keeping first-seen order.
pub fn reports_from_manifests(manifests: &[RunManifest]) -> Result<Vec<ExperimentReport>> {
    let mut groups: Vec<Vec<RunManifest>> = Vec::new();
    let mut index: HashMap<(TaskKind, u64, u64, String), usize> = HashMap::new();
    for m in manifests {
        let key = (
            m.dataset.task,
            m.dataset.lo.to_bits(),
            m.dataset.hi.to_bits(),
            m.provider_label.clone(),
        );
        let slot = *index.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push(m.clone());
    }
    groups.iter().map(|g| ExperimentReport::from_manifests(g)).collect()
}

fn f64_field(x: f64) -> String {
    format!("{x}")
}

/// One row per run followed by `mean` and (for two or more runs) `std`
/// rows; aggregate rows carry the diverged-run count.
pub fn render_csv(reports: &[ExperimentReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in reports {
        let lo = render_tenths(r.range.lo_tenths());
        let hi = render_tenths(r.range.hi_tenths());
        let base = [r.task.name().to_string(), lo, hi, r.provider.clone()];
        for run in &r.runs {
            let mut row = base.to_vec();
            row.extend([
                run.run_index.to_string(),
                r.metric.name().to_string(),
                f64_field(run.value),
                run.diverged.to_string(),
                run.best_epoch.to_string(),
                run.seed.to_string(),
            ]);
            w.write_record(&row)?;
        }
        let mut aggs = vec![("mean", r.mean())];
        if let Some(s) = r.std() {
            aggs.push(("std", s));
        }
        for (name, v) in aggs {
            let mut row = base.to_vec();
            row.extend([
                name.to_string(),
                r.metric.name().to_string(),
                f64_field(v),
                r.diverged_count().to_string(),
                String::new(),
                String::new(),
            ]);
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

fn parse_field<T: std::str::FromStr>(value: &str, column: &str, line: u64) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format("report.csv", line, format!("bad {column} value {value:?}")))
}

/// Rebuilds reports from per-run CSV rows; aggregate rows are recomputed.
pub fn parse_csv(text: &str) -> Result<Vec<ExperimentReport>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_COLUMNS {
        return Err(Error::format("report.csv", 1, "unexpected columns"));
    }
    let mut reports: Vec<ExperimentReport> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let run_index: usize = match rec[4].parse() {
            Ok(n) => n,
            Err(_) if matches!(&rec[4], "mean" | "std") => continue,
            Err(_) => return Err(Error::format("report.csv", line, "bad run_index")),
        };
        let task: TaskKind = parse_field(&rec[0], "task", line)?;
        let range = ValueRange::new(
            parse_field(&rec[1], "range_lo", line)?,
            parse_field(&rec[2], "range_hi", line)?,
        )?;
        let provider = rec[3].to_string();
        let metric: MetricKind = parse_field(&rec[5], "metric_kind", line)?;
        let run = RunRecord {
            run_index,
            value: parse_field(&rec[6], "value", line)?,
            diverged: parse_field(&rec[7], "diverged", line)?,
            best_epoch: parse_field(&rec[8], "best_epoch", line)?,
            seed: parse_field(&rec[9], "seed", line)?,
        };
        match reports
            .iter_mut()
            .find(|r| r.task == task && r.range == range && r.provider == provider)
        {
            Some(r) => {
                if r.metric != metric {
                    return Err(Error::Report(format!(
                        "line {line}: metric {} mixed with {}",
                        metric.name(),
                        r.metric.name()
                    )));
                }
                r.runs.push(run);
            }
            None => reports.push(ExperimentReport {
                task,
                range,
                provider,
                metric,
                runs: vec![run],
            }),
        }
    }
    for r in &mut reports {
        r.runs.sort_by_key(|x| x.run_index);
    }
    Ok(reports)
}

/// Providers as rows, (task, range) pairs as columns; each cell is
/// `mean±std` to three decimals. A second header line names the metric.
pub fn render_table(reports: &[ExperimentReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Report("nothing to render".into()));
    }
    let mut columns: Vec<(TaskKind, ValueRange, MetricKind)> = Vec::new();
    let mut providers: Vec<&str> = Vec::new();
    for r in reports {
        match columns.iter().find(|c| c.0 == r.task && c.1 == r.range) {
            Some(c) if c.2 != r.metric => {
                return Err(Error::Report(format!(
                    "column {} {} mixes {} and {}",
                    r.task,
                    r.range,
                    c.2.name(),
                    r.metric.name()
                )))
            }
            Some(_) => {}
            None => columns.push((r.task, r.range, r.metric)),
        }
        if !providers.contains(&r.provider.as_str()) {
            providers.push(&r.provider);
        }
    }

    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut head = vec!["provider".to_string()];
    head.extend(columns.iter().map(|(t, r, _)| format!("{t} {r}")));
    grid.push(head);
    let mut kinds = vec![String::new()];
    kinds.extend(columns.iter().map(|c| c.2.name().to_string()));
    grid.push(kinds);
    for p in &providers {
        let mut row = vec![p.to_string()];
        for (t, range, _) in &columns {
            let cell = reports
                .iter()
                .filter(|r| r.provider == *p && r.task == *t && r.range == *range)
                .map(ExperimentReport::cell)
                .next()
                .unwrap_or_else(|| "-".to_string());
            row.push(cell);
        }
        grid.push(row);
    }

    let widths: Vec<usize> = (0..=columns.len())
        .map(|j| grid.iter().map(|row| row[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in grid.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if i == 1 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
    }
    Ok(out)
}
