//! Seeded generation of the six synthetic probing datasets.
//!
//! All numeric values live on a single-decimal grid and are handled internally
//! as integer tenths, so rendering and target computation never depend on
//! binary floating-point rounding of the surface value.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::MetricKind;
use crate::{Error, Result};

/// Default number of training examples per dataset.
pub const DEFAULT_TRAIN_SIZE: usize = 10_000;
/// Default number of test examples per dataset.
pub const DEFAULT_TEST_SIZE: usize = 1_000;

/// Multiplier words for order decoding with their base-10 exponents.
pub const MULTIPLIERS: [(&str, u32); 4] = [
    ("thousand", 3),
    ("million", 6),
    ("billion", 9),
    ("trillion", 12),
];

const DEFAULT_LEXICON: &str = include_str!("../data/units.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Percent,
    BasisPoint,
    Order,
    Range,
    Addition,
    UnitId,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Percent,
        TaskKind::BasisPoint,
        TaskKind::Order,
        TaskKind::Range,
        TaskKind::Addition,
        TaskKind::UnitId,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Percent => "percent",
            TaskKind::BasisPoint => "basispoint",
            TaskKind::Order => "order",
            TaskKind::Range => "range",
            TaskKind::Addition => "addition",
            TaskKind::UnitId => "unitid",
        }
    }

    /// Number of regression targets, or `None` for the classification task.
    pub fn target_arity(self) -> Option<usize> {
        match self {
            TaskKind::Range => Some(2),
            TaskKind::UnitId => None,
            _ => Some(1),
        }
    }

    pub fn metric(self) -> MetricKind {
        match self {
            TaskKind::Order => MetricKind::LogRmse,
            TaskKind::UnitId => MetricKind::Accuracy,
            _ => MetricKind::Rmse,
        }
    }

    pub fn is_classification(self) -> bool {
        self == TaskKind::UnitId
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "percent" | "percents" => Ok(TaskKind::Percent),
            "basispoint" | "basispoints" | "bp" => Ok(TaskKind::BasisPoint),
            "order" | "orders" => Ok(TaskKind::Order),
            "range" | "ranges" => Ok(TaskKind::Range),
            "addition" => Ok(TaskKind::Addition),
            "unitid" | "unit" | "unitidentification" => Ok(TaskKind::UnitId),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

/// Closed interval on the 0.1 grid, stored as integer tenths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "RangeBounds", try_from = "RangeBounds")]
pub struct ValueRange {
    lo: u32,
    hi: u32,
}

#[derive(Serialize, Deserialize)]
struct RangeBounds {
    lo: f64,
    hi: f64,
}

impl From<ValueRange> for RangeBounds {
    fn from(r: ValueRange) -> Self {
        RangeBounds { lo: r.lo(), hi: r.hi() }
    }
}

impl TryFrom<RangeBounds> for ValueRange {
    type Error = Error;

    fn try_from(b: RangeBounds) -> Result<Self> {
        ValueRange::new(b.lo, b.hi)
    }
}

impl ValueRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let lo_t = to_tenths(lo)?;
        let hi_t = to_tenths(hi)?;
        if lo_t > hi_t {
            return Err(Error::Config(format!("invalid range: lo {lo} > hi {hi}")));
        }
        Ok(ValueRange { lo: lo_t, hi: hi_t })
    }

    pub fn from_tenths(lo: u32, hi: u32) -> Result<Self> {
        if lo > hi {
            return Err(Error::Config(format!(
                "invalid range: lo {} > hi {}",
                render_tenths(lo),
                render_tenths(hi)
            )));
        }
        Ok(ValueRange { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        f64::from(self.lo) / 10.0
    }

    pub fn hi(&self) -> f64 {
        f64::from(self.hi) / 10.0
    }

    pub fn lo_tenths(&self) -> u32 {
        self.lo
    }

    pub fn hi_tenths(&self) -> u32 {
        self.hi
    }

    /// Number of grid points in the range.
    pub fn grid_len(&self) -> u64 {
        u64::from(self.hi - self.lo) + 1
    }

    pub fn contains_tenths(&self, k: u32) -> bool {
        (self.lo..=self.hi).contains(&k)
    }
}

impl fmt::Display for ValueRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", render_tenths(self.lo), render_tenths(self.hi))
    }
}

fn to_tenths(x: f64) -> Result<u32> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::Config(format!(
            "range endpoints must be finite and non-negative, got {x}"
        )));
    }
    let scaled = x * 10.0;
    let rounded = scaled.round();
    if (scaled - rounded).abs() > 1e-6 || rounded > f64::from(u32::MAX) {
        return Err(Error::Config(format!(
            "range endpoint {x} is not on the 0.1 grid"
        )));
    }
    Ok(rounded as u32)
}

/// Renders integer tenths with exactly one decimal digit.
pub fn render_tenths(k: u32) -> String {
    format!("{}.{}", k / 10, k % 10)
}

/// Uniform draw over the grid `{lo, lo+0.1, ..., hi}`, as integer tenths.
pub fn sample_tenths<R: Rng + ?Sized>(range: &ValueRange, rng: &mut R) -> u32 {
    rng.random_range(range.lo..=range.hi)
}

/// Uniform draw over the grid `{lo, lo+0.1, ..., hi}`.
pub fn sample_value<R: Rng + ?Sized>(range: &ValueRange, rng: &mut R) -> f64 {
    f64::from(sample_tenths(range, rng)) / 10.0
}

/// Logarithm used for order-decoding targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Ten,
    Natural,
}

impl LogBase {
    fn is_ten(&self) -> bool {
        *self == LogBase::Ten
    }
}

/// Ordered unit vocabulary for unit identification; class index = position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitLexicon {
    units: Vec<String>,
}

impl UnitLexicon {
    pub fn new<S: Into<String>>(units: impl IntoIterator<Item = S>) -> Result<Self> {
        let units: Vec<String> = units.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for (i, u) in units.iter().enumerate() {
            if u.is_empty() {
                return Err(Error::format("<lexicon>", i as u64 + 1, "empty unit"));
            }
            if u.trim() != u {
                return Err(Error::format(
                    "<lexicon>",
                    i as u64 + 1,
                    format!("unit {u:?} has leading or trailing whitespace"),
                ));
            }
            if !seen.insert(u.as_str()) {
                return Err(Error::format(
                    "<lexicon>",
                    i as u64 + 1,
                    format!("duplicate unit {u:?}"),
                ));
            }
        }
        if units.len() < 2 {
            return Err(Error::format(
                "<lexicon>",
                0,
                format!("need at least 2 units, got {}", units.len()),
            ));
        }
        Ok(UnitLexicon { units })
    }

    /// The 173-unit lexicon shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_LEXICON, "<builtin>").expect("shipped lexicon is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses one unit per LF-terminated line. Errors carry 1-based line numbers.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::format(origin, 0, "empty lexicon file"));
        }
        let body = text.strip_suffix('\n').unwrap_or(text);
        let lines: Vec<&str> = body.split('\n').collect();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                return Err(Error::format(origin, i as u64 + 1, "blank line"));
            }
        }
        Self::new(lines).map_err(|e| match e {
            Error::Format { offset, msg, .. } => Error::format(origin, offset, msg),
            other => other,
        })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn unit(&self, index: usize) -> Option<&str> {
        self.units.get(index).map(String::as_str)
    }

    pub fn index_of(&self, unit: &str) -> Option<usize> {
        self.units.iter().position(|u| u == unit)
    }

    /// Canonical file form: one unit per line, LF-terminated.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for u in &self.units {
            s.push_str(u);
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the canonical file form, lowercase hex.
    pub fn sha256(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One synthetic data point.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    pub input: String,
    /// Regression targets; empty for classification examples.
    pub targets: Vec<f64>,
    pub label: Option<usize>,
    pub unit: Option<String>,
}

impl Example {
    /// First target, or the class index for classification examples.
    pub fn primary_value(&self) -> f64 {
        match (self.targets.first(), self.label) {
            (Some(t), _) => *t,
            (None, Some(l)) => l as f64,
            (None, None) => 0.0,
        }
    }
}

/// The random choices behind one example, before rendering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Draw {
    /// Percent, basis point: one value in tenths.
    Single(u32),
    /// Order: nonzero value in tenths and an index into [`MULTIPLIERS`].
    Order { value: u32, multiplier: usize },
    /// Range, addition: two independent values in tenths, in draw order.
    Pair(u32, u32),
    /// Unit identification: value in tenths and lexicon class index.
    Unit { value: u32, class: usize },
}

/// Draws the random choices for one example of `task`.
pub fn draw<R: Rng + ?Sized>(
    task: TaskKind,
    range: &ValueRange,
    rng: &mut R,
    lexicon: Option<&UnitLexicon>,
) -> Result<Draw> {
    check_task_inputs(task, range, lexicon)?;
    Ok(match task {
        TaskKind::Percent | TaskKind::BasisPoint => Draw::Single(sample_tenths(range, rng)),
        TaskKind::Order => {
            // Zero has no logarithm; redraw from the same stream.
            let value = loop {
                let v = sample_tenths(range, rng);
                if v != 0 {
                    break v;
                }
            };
            let multiplier = rng.random_range(0..MULTIPLIERS.len());
            Draw::Order { value, multiplier }
        }
        TaskKind::Range | TaskKind::Addition => {
            let a = sample_tenths(range, rng);
            let b = sample_tenths(range, rng);
            Draw::Pair(a, b)
        }
        TaskKind::UnitId => {
            let value = sample_tenths(range, rng);
            let lex = lexicon.expect("checked above");
            let class = rng.random_range(0..lex.len());
            Draw::Unit { value, class }
        }
    })
}

fn check_task_inputs(
    task: TaskKind,
    range: &ValueRange,
    lexicon: Option<&UnitLexicon>,
) -> Result<()> {
    match (task, lexicon) {
        (TaskKind::UnitId, None) => {
            return Err(Error::Config("unit identification requires a lexicon".into()))
        }
        (t, Some(_)) if t != TaskKind::UnitId => {
            return Err(Error::Config(format!(
                "a lexicon is only valid for unit identification, not {t}"
            )))
        }
        _ => {}
    }
    if task == TaskKind::Order && range.hi_tenths() == 0 {
        return Err(Error::Config(format!(
            "order decoding needs a nonzero value but the range is {range}"
        )));
    }
    Ok(())
}

/// Renders a draw into an [`Example`] with its targets.
pub fn build_example(
    task: TaskKind,
    id: u64,
    draw: &Draw,
    lexicon: Option<&UnitLexicon>,
    log_base: LogBase,
) -> Result<Example> {
    let mismatch = || Error::Config(format!("draw {draw:?} does not fit task {task}"));
    let regression = |input: String, targets: Vec<f64>| Example {
        id,
        input,
        targets,
        label: None,
        unit: None,
    };
    Ok(match (task, draw) {
        (TaskKind::Percent, Draw::Single(k)) => {
            regression(format!("{}%", render_tenths(*k)), vec![f64::from(*k) / 1000.0])
        }
        (TaskKind::BasisPoint, Draw::Single(k)) => regression(
            format!("{} basis points", render_tenths(*k)),
            vec![f64::from(*k) / 100_000.0],
        ),
        (TaskKind::Order, Draw::Order { value, multiplier }) => {
            let (word, exp) = *MULTIPLIERS.get(*multiplier).ok_or_else(mismatch)?;
            if *value == 0 {
                return Err(mismatch());
            }
            regression(
                format!("{} {}", render_tenths(*value), word),
                vec![order_target(*value, exp, log_base)],
            )
        }
        (TaskKind::Range, Draw::Pair(a, b)) => {
            let (lo, hi) = if a <= b { (*a, *b) } else { (*b, *a) };
            regression(
                format!("{}-{}", render_tenths(lo), render_tenths(hi)),
                vec![f64::from(lo) / 10.0, f64::from(hi) / 10.0],
            )
        }
        (TaskKind::Addition, Draw::Pair(a, b)) => regression(
            format!("{} {}", render_tenths(*a), render_tenths(*b)),
            vec![f64::from(a + b) / 10.0],
        ),
        (TaskKind::UnitId, Draw::Unit { value, class }) => {
            let lex = lexicon.ok_or_else(mismatch)?;
            let unit = lex.unit(*class).ok_or_else(mismatch)?;
            Example {
                id,
                input: format!("{} {}", render_tenths(*value), unit),
                targets: Vec::new(),
                label: Some(*class),
                unit: Some(unit.to_string()),
            }
        }
        _ => return Err(mismatch()),
    })
}

/// log(value/10 * 10^exp) in the requested base.
pub fn order_target(value_tenths: u32, exp: u32, base: LogBase) -> f64 {
    let log10 = f64::from(value_tenths).log10() + f64::from(exp) - 1.0;
    match base {
        LogBase::Ten => log10,
        LogBase::Natural => log10 * std::f64::consts::LN_10,
    }
}

/// Draws and renders one example.
pub fn make_example<R: Rng + ?Sized>(
    task: TaskKind,
    id: u64,
    range: &ValueRange,
    rng: &mut R,
    lexicon: Option<&UnitLexicon>,
    log_base: LogBase,
) -> Result<Example> {
    let d = draw(task, range, rng, lexicon)?;
    build_example(task, id, &d, lexicon, log_base)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Everything that determines a dataset's contents.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub task: TaskKind,
    pub range: ValueRange,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub log_base: LogBase,
}

impl DatasetSpec {
    pub fn new(task: TaskKind, range: ValueRange, seed: u64) -> Self {
        DatasetSpec {
            task,
            range,
            seed,
            train_size: DEFAULT_TRAIN_SIZE,
            test_size: DEFAULT_TEST_SIZE,
            log_base: LogBase::Ten,
        }
    }

    pub fn with_sizes(mut self, train: usize, test: usize) -> Self {
        self.train_size = train;
        self.test_size = test;
        self
    }

    pub fn with_log_base(mut self, base: LogBase) -> Self {
        self.log_base = base;
        self
    }

    /// Train examples get ids `0..train_size`, test examples continue from there.
    pub fn generate(&self, lexicon: Option<&UnitLexicon>) -> Result<Dataset> {
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config(format!(
                "dataset sizes must be positive, got {}/{}",
                self.train_size, self.test_size
            )));
        }
        check_task_inputs(self.task, &self.range, lexicon)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let total = (self.train_size + self.test_size) as u64;
        let mut examples = (0..total)
            .map(|id| make_example(self.task, id, &self.range, &mut rng, lexicon, self.log_base))
            .collect::<Result<Vec<_>>>()?;
        let test = examples.split_off(self.train_size);
        Ok(Dataset {
            task: self.task,
            range: self.range,
            seed: self.seed,
            log_base: self.log_base,
            train: examples,
            test,
            lexicon: lexicon.cloned(),
        })
    }
}

/// Generates a dataset with base-10 order targets.
pub fn generate_dataset(
    task: TaskKind,
    range: ValueRange,
    seed: u64,
    train_size: usize,
    test_size: usize,
    lexicon: Option<&UnitLexicon>,
) -> Result<Dataset> {
    DatasetSpec::new(task, range, seed)
        .with_sizes(train_size, test_size)
        .generate(lexicon)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub range: ValueRange,
    pub seed: u64,
    pub log_base: LogBase,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub lexicon: Option<UnitLexicon>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    task: TaskKind,
    lo: f64,
    hi: f64,
    seed: u64,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lexicon_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "LogBase::is_ten")]
    order_log_base: LogBase,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Record {
    Regression {
        id: u64,
        input: String,
        targets: Vec<f64>,
    },
    Class {
        id: u64,
        input: String,
        label: usize,
        unit: String,
    },
}

/// Contents of `manifest.json` in a generated dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: TaskKind,
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    #[serde(default)]
    pub lexicon_sha256: Option<String>,
    #[serde(default)]
    pub order_log_base: LogBase,
    pub train_sha256: String,
    pub test_sha256: String,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.line() as u64, e.to_string()))?;
        if m.train_sha256.len() != 64 || m.test_sha256.len() != 64 {
            return Err(Error::format(
                path.display().to_string(),
                0,
                "split digests must be 64 hex characters",
            ));
        }
        Ok(m)
    }

    pub fn sha256(&self, split: Split) -> &str {
        match split {
            Split::Train => &self.train_sha256,
            Split::Test => &self.test_sha256,
        }
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn lexicon_sha256(&self) -> Option<String> {
        self.lexicon.as_ref().map(UnitLexicon::sha256)
    }

    /// Serializes one split as header line plus one JSON record per line.
    pub fn to_jsonl(&self, split: Split) -> String {
        let header = Header {
            task: self.task,
            lo: self.range.lo(),
            hi: self.range.hi(),
            seed: self.seed,
            split,
            lexicon_sha256: self.lexicon_sha256(),
            order_log_base: self.log_base,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for ex in self.split(split) {
            let rec = match (ex.label, &ex.unit) {
                (Some(label), Some(unit)) => Record::Class {
                    id: ex.id,
                    input: ex.input.clone(),
                    label,
                    unit: unit.clone(),
                },
                _ => Record::Regression {
                    id: ex.id,
                    input: ex.input.clone(),
                    targets: ex.targets.clone(),
                },
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the serialized split; names the split's embedding file.
    pub fn split_sha256(&self, split: Split) -> String {
        sha256_hex(self.to_jsonl(split).as_bytes())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            task: self.task,
            lo: self.range.lo(),
            hi: self.range.hi(),
            seed: self.seed,
            train_size: self.train.len(),
            test_size: self.test.len(),
            lexicon_sha256: self.lexicon_sha256(),
            order_log_base: self.log_base,
            train_sha256: self.split_sha256(Split::Train),
            test_sha256: self.split_sha256(Split::Test),
        }
    }

    /// Writes `train.jsonl`, `test.jsonl` and `manifest.json` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for split in [Split::Train, Split::Test] {
            fs::write(dir.join(split.file_name()), self.to_jsonl(split))?;
        }
        let manifest = self.manifest();
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(manifest)
    }

    /// Reads a directory written by [`Dataset::write_dir`]. The lexicon, when
    /// the task needs one, must be supplied and must match the recorded digest.
    pub fn read_dir(dir: impl AsRef<Path>, lexicon: Option<&UnitLexicon>) -> Result<Self> {
        let dir = dir.as_ref();
        let (train_hdr, train) = read_split(&dir.join(Split::Train.file_name()))?;
        let (test_hdr, test) = read_split(&dir.join(Split::Test.file_name()))?;
        if train_hdr.task != test_hdr.task
            || train_hdr.seed != test_hdr.seed
            || train_hdr.lo != test_hdr.lo
            || train_hdr.hi != test_hdr.hi
        {
            return Err(Error::Data(format!(
                "train and test headers disagree in {}",
                dir.display()
            )));
        }
        if train_hdr.lexicon_sha256 != lexicon.map(UnitLexicon::sha256) {
            return Err(Error::Data(
                "lexicon digest does not match the dataset header".into(),
            ));
        }
        Ok(Dataset {
            task: train_hdr.task,
            range: ValueRange::new(train_hdr.lo, train_hdr.hi)?,
            seed: train_hdr.seed,
            log_base: train_hdr.order_log_base,
            train,
            test,
            lexicon: lexicon.cloned(),
        })
    }
}

fn read_split(path: &Path) -> Result<(Header, Vec<Example>)> {
    let origin = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::format(&origin, 1, "missing header line"))?;
    let header: Header =
        serde_json::from_str(first).map_err(|e| Error::format(&origin, 1, e.to_string()))?;
    let mut examples = Vec::new();
    for (i, line) in lines {
        let rec: Record = serde_json::from_str(line)
            .map_err(|e| Error::format(&origin, i as u64 + 1, e.to_string()))?;
        examples.push(match rec {
            Record::Regression { id, input, targets } => Example {
                id,
                input,
                targets,
                label: None,
                unit: None,
            },
            Record::Class {
                id,
                input,
                label,
                unit,
            } => Example {
                id,
                input,
                targets: Vec::new(),
                label: Some(label),
                unit: Some(unit),
            },
        });
    }
    Ok((header, examples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(lo: f64, hi: f64) -> ValueRange {
        ValueRange::new(lo, hi).unwrap()
    }

    #[test]
    fn singleton_range_always_samples_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_value(&r(0.0, 0.0), &mut rng), 0.0);
        }
    }

    #[test]
    fn samples_stay_on_grid() {
        let range = r(0.0, 99.9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let v = sample_value(&range, &mut rng);
            let scaled = v * 10.0;
            assert!((scaled - scaled.round()).abs() < 1e-9);
            assert!((0.0..=99.9).contains(&v));
        }
    }

    #[test]
    fn grid_mean_matches_midpoint() {
        let range = r(0.0, 99.9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let sum: f64 = (0..n).map(|_| sample_value(&range, &mut rng)).sum();
        let mean = sum / n as f64;
        let expected = (0.0 + 99.9) / 2.0;
        assert!((mean - expected).abs() / expected < 0.01, "mean {mean}");
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(matches!(ValueRange::new(5.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(ValueRange::new(0.05, 1.0), Err(Error::Config(_))));
        assert!(matches!(ValueRange::new(-1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(ValueRange::new(f64::NAN, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn percent_example() {
        let ex = build_example(TaskKind::Percent, 0, &Draw::Single(103), None, LogBase::Ten).unwrap();
        assert_eq!(ex.input, "10.3%");
        assert_eq!(ex.targets, vec![0.103]);
    }

    #[test]
    fn basis_point_example() {
        let ex = build_example(TaskKind::BasisPoint, 0, &Draw::Single(150), None, LogBase::Ten)
            .unwrap();
        assert_eq!(ex.input, "15.0 basis points");
        assert!((ex.targets[0] - 0.0015).abs() < 1e-15);
    }

    #[test]
    fn order_example_matches_worked_value() {
        let d = Draw::Order {
            value: 153,
            multiplier: 2,
        };
        let ex = build_example(TaskKind::Order, 0, &d, None, LogBase::Ten).unwrap();
        assert_eq!(ex.input, "15.3 billion");
        assert!((ex.targets[0] - 10.1847).abs() <= 5e-5, "{}", ex.targets[0]);

        let ln = build_example(TaskKind::Order, 0, &d, None, LogBase::Natural).unwrap();
        assert!((ln.targets[0] - (15.3e9f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn range_endpoints_are_sorted() {
        let ex = build_example(TaskKind::Range, 0, &Draw::Pair(651, 273), None, LogBase::Ten).unwrap();
        assert_eq!(ex.input, "27.3-65.1");
        assert_eq!(ex.targets, vec![27.3, 65.1]);
    }

    #[test]
    fn addition_identity() {
        let ex = build_example(TaskKind::Addition, 0, &Draw::Pair(0, 0), None, LogBase::Ten).unwrap();
        assert_eq!(ex.input, "0.0 0.0");
        assert_eq!(ex.targets, vec![0.0]);
    }

    #[test]
    fn unit_example_carries_label() {
        let lex = UnitLexicon::new(["hours", "percent", "euros"]).unwrap();
        let d = Draw::Unit {
            value: 143,
            class: 0,
        };
        let ex = build_example(TaskKind::UnitId, 0, &d, Some(&lex), LogBase::Ten).unwrap();
        assert_eq!(ex.input, "14.3 hours");
        assert_eq!(ex.label, Some(0));
        assert!(ex.targets.is_empty());
    }

    #[test]
    fn order_on_zero_range_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = make_example(TaskKind::Order, 0, &r(0.0, 0.0), &mut rng, None, LogBase::Ten);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn order_never_renders_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for id in 0..2000 {
            let ex = make_example(TaskKind::Order, id, &r(0.0, 0.3), &mut rng, None, LogBase::Ten)
                .unwrap();
            assert!(!ex.input.starts_with("0.0 "));
            assert!(ex.targets[0].is_finite());
        }
    }

    #[test]
    fn lexicon_requirements() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lex = UnitLexicon::builtin();
        assert!(make_example(TaskKind::UnitId, 0, &r(0.0, 1.0), &mut rng, None, LogBase::Ten).is_err());
        assert!(
            make_example(TaskKind::Percent, 0, &r(0.0, 1.0), &mut rng, Some(&lex), LogBase::Ten)
                .is_err()
        );
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = generate_dataset(TaskKind::Percent, r(0.0, 99.9), 7, 10_000, 1_000, None).unwrap();
        let b = generate_dataset(TaskKind::Percent, r(0.0, 99.9), 7, 10_000, 1_000, None).unwrap();
        assert_eq!(a.to_jsonl(Split::Train), b.to_jsonl(Split::Train));
        assert_eq!(a.to_jsonl(Split::Test), b.to_jsonl(Split::Test));
        assert_eq!(a.train.len(), 10_000);
        assert_eq!(a.test.len(), 1_000);
        let c = generate_dataset(TaskKind::Percent, r(0.0, 99.9), 8, 10_000, 1_000, None).unwrap();
        assert_ne!(a.to_jsonl(Split::Train), c.to_jsonl(Split::Train));
    }

    #[test]
    fn unit_labels_within_lexicon() {
        let lex = UnitLexicon::builtin();
        let ds = generate_dataset(TaskKind::UnitId, r(0.0, 99.9), 1, 2_000, 500, Some(&lex)).unwrap();
        for ex in ds.train.iter().chain(&ds.test) {
            let l = ex.label.unwrap();
            assert!(l <= 172);
            assert_eq!(ex.unit.as_deref(), lex.unit(l));
        }
    }

    #[test]
    fn addition_targets_bounded() {
        let ds = generate_dataset(TaskKind::Addition, r(0.0, 999.9), 4, 5_000, 500, None).unwrap();
        for ex in ds.train.iter().chain(&ds.test) {
            assert!((0.0..=1999.8).contains(&ex.targets[0]));
        }
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(generate_dataset(TaskKind::Percent, r(0.0, 1.0), 0, 0, 10, None).is_err());
    }

    #[test]
    fn lexicon_parsing() {
        let lex = UnitLexicon::parse("hours\npercent\neuros\n", "t").unwrap();
        assert_eq!(lex.len(), 3);
        assert_eq!(lex.index_of("hours"), Some(0));
        assert!(UnitLexicon::parse("hours\neuros\neuros\n", "t").is_err());
        assert!(UnitLexicon::parse("", "t").is_err());
        assert!(UnitLexicon::parse("hours\n\neuros\n", "t").is_err());
        assert!(UnitLexicon::parse("hours\n euros\n", "t").is_err());
        assert!(UnitLexicon::parse("hours\n", "t").is_err());
    }

    #[test]
    fn shipped_lexicon_has_173_units() {
        let lines = DEFAULT_LEXICON.lines().filter(|l| !l.is_empty()).count();
        assert_eq!(lines, 173);
        assert_eq!(UnitLexicon::builtin().len(), lines);
    }

    #[test]
    fn directory_round_trip() {
        let lex = UnitLexicon::builtin();
        let ds = generate_dataset(TaskKind::UnitId, r(0.0, 9.9), 3, 50, 10, Some(&lex)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = ds.write_dir(dir.path()).unwrap();
        assert_eq!(DatasetManifest::load(dir.path().join("manifest.json")).unwrap(), manifest);
        let back = Dataset::read_dir(dir.path(), Some(&lex)).unwrap();
        assert_eq!(back, ds);
        assert!(Dataset::read_dir(dir.path(), None).is_err());
    }
}
