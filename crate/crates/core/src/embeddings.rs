//! Frozen embedding providers and the QPEMB container format.
//!
//! A provider maps one example to a `tokens x dim` matrix. Providers never
//! change after construction, so `embed` is referentially transparent.
//!
//! QPEMB layout, little-endian:
//!
//! ```text
//! header : magic "QPEM" | version u32 = 1 | dim u32 | count u64
//! record : id u64 | token_count u32 | token_count*dim f32, row-major
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::synthgen::{Dataset, Example, Split};
use crate::tokenizer::{build_vocab, tokenize, TokenSeq, Vocabulary, PAD_ID};
use crate::{Error, Result};

/// Embedding width used by the random baseline unless overridden.
pub const DEFAULT_DIM: usize = 768;
/// Standard deviation of the oracle provider's noise columns.
pub const ORACLE_NOISE_STD: f64 = 0.01;

pub const QPEMB_MAGIC: [u8; 4] = *b"QPEM";
pub const QPEMB_VERSION: u32 = 1;
pub const QPEMB_HEADER_LEN: usize = 4 + 4 + 4 + 8;
const RECORD_HEADER_LEN: usize = 8 + 4;

/// Per-token vectors for one example. Entries are finite and there is at
/// least one row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Array2<f64>);

impl EmbeddingMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Data(format!(
                "embedding matrix must be non-empty, got {:?}",
                data.dim()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("embedding matrix has non-finite entries".into()));
        }
        Ok(EmbeddingMatrix(data))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Gaussian table with a zero PAD row. `init_std` defaults to `dim^-1/2`.
pub fn random_table(vocab_size: usize, dim: usize, seed: u64, init_std: Option<f64>) -> Result<Array2<f64>> {
    if vocab_size == 0 || dim == 0 {
        return Err(Error::Config(format!(
            "random table needs positive shape, got {vocab_size}x{dim}"
        )));
    }
    let std = init_std.unwrap_or(1.0 / (dim as f64).sqrt());
    let normal = Normal::new(0.0, std)
        .map_err(|e| Error::Config(format!("invalid init std {std}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = Array2::from_shape_simple_fn((vocab_size, dim), || normal.sample(&mut rng));
    table.row_mut(PAD_ID as usize).fill(0.0);
    Ok(table)
}

/// Serializable description of a provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    RandomVectors {
        dim: usize,
        seed: u64,
        #[serde(default)]
        init_std: Option<f64>,
    },
    Oracle {
        dim: usize,
        seed: u64,
    },
    FileBacked {
        dir: PathBuf,
        dim: usize,
    },
}

impl ProviderSpec {
    pub fn random(dim: usize, seed: u64) -> Self {
        ProviderSpec::RandomVectors {
            dim,
            seed,
            init_std: None,
        }
    }

    pub fn oracle(dim: usize, seed: u64) -> Self {
        ProviderSpec::Oracle { dim, seed }
    }

    pub fn dim(&self) -> usize {
        match self {
            ProviderSpec::RandomVectors { dim, .. }
            | ProviderSpec::Oracle { dim, .. }
            | ProviderSpec::FileBacked { dim, .. } => *dim,
        }
    }

    /// Short name used in reports: `random`, `oracle` or `file:<dir>`.
    pub fn label(&self) -> String {
        match self {
            ProviderSpec::RandomVectors { .. } => "random".into(),
            ProviderSpec::Oracle { .. } => "oracle".into(),
            ProviderSpec::FileBacked { dir, .. } => format!("file:{}", dir.display()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::Config("provider dim must be positive".into()));
        }
        if let ProviderSpec::RandomVectors {
            init_std: Some(s), ..
        } = self
        {
            if !(s.is_finite() && *s > 0.0) {
                return Err(Error::Config(format!("init std must be positive, got {s}")));
            }
        }
        Ok(())
    }

    /// Expected embedding file for one split of a dataset.
    pub fn expected_file(dir: &Path, split_sha256: &str) -> PathBuf {
        dir.join(format!("{split_sha256}.qpemb"))
    }

    /// Instantiates the provider for `dataset`.
    pub fn open(&self, dataset: &Dataset) -> Result<Box<dyn EmbeddingProvider>> {
        self.validate()?;
        Ok(match self {
            ProviderSpec::RandomVectors {
                dim,
                seed,
                init_std,
            } => Box::new(RandomVectors::new(
                build_vocab(dataset.lexicon.as_ref(), &[]),
                *dim,
                *seed,
                *init_std,
            )?),
            ProviderSpec::Oracle { dim, seed } => Box::new(Oracle::new(*dim, *seed)?),
            ProviderSpec::FileBacked { dir, dim } => {
                let files: Vec<PathBuf> = [Split::Train, Split::Test]
                    .into_iter()
                    .map(|s| Self::expected_file(dir, &dataset.split_sha256(s)))
                    .collect();
                let missing: Vec<PathBuf> = files.iter().filter(|p| !p.exists()).cloned().collect();
                if !missing.is_empty() {
                    return Err(Error::MissingEmbeddings(missing));
                }
                Box::new(FileBacked::open(&files, *dim)?)
            }
        })
    }
}

impl fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, example: &Example) -> Result<EmbeddingMatrix>;

    /// Row count `embed` would return.
    fn rows(&self, example: &Example) -> Result<usize> {
        Ok(self.embed(example)?.rows())
    }
}

/// Lookup into a fixed Gaussian table, one row per token.
#[derive(Debug, Clone)]
pub struct RandomVectors {
    vocab: Vocabulary,
    table: Array2<f64>,
}

impl RandomVectors {
    pub fn new(vocab: Vocabulary, dim: usize, seed: u64, init_std: Option<f64>) -> Result<Self> {
        let table = random_table(vocab.len(), dim, seed, init_std)?;
        Ok(RandomVectors { vocab, table })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn embed_tokens(&self, tokens: &TokenSeq) -> Result<EmbeddingMatrix> {
        let ids: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
        EmbeddingMatrix::new(self.table.select(ndarray::Axis(0), &ids))
    }
}

impl EmbeddingProvider for RandomVectors {
    fn dim(&self) -> usize {
        self.table.ncols()
    }

    fn embed(&self, example: &Example) -> Result<EmbeddingMatrix> {
        self.embed_tokens(&tokenize(&example.input, &self.vocab)?)
    }

    fn rows(&self, example: &Example) -> Result<usize> {
        Ok(tokenize(&example.input, &self.vocab)?.len())
    }
}

/// Positive control: a single row whose first entry is the example's first
/// target (or class index) and whose other entries are seeded noise.
#[derive(Debug, Clone)]
pub struct Oracle {
    dim: usize,
    seed: u64,
    noise: Normal<f64>,
}

impl Oracle {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("oracle dim must be positive".into()));
        }
        Ok(Oracle {
            dim,
            seed,
            noise: Normal::new(0.0, ORACLE_NOISE_STD).expect("valid std"),
        })
    }
}

impl EmbeddingProvider for Oracle {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, example: &Example) -> Result<EmbeddingMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ example.id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mut m = Array2::zeros((1, self.dim));
        m[[0, 0]] = example.primary_value();
        for v in m.iter_mut().skip(1) {
            *v = self.noise.sample(&mut rng);
        }
        EmbeddingMatrix::new(m)
    }

    fn rows(&self, _example: &Example) -> Result<usize> {
        Ok(1)
    }
}

/// Matrices exported by an external encoder, keyed by example id.
#[derive(Debug, Clone)]
pub struct FileBacked {
    dim: usize,
    records: HashMap<u64, Array2<f32>>,
}

impl FileBacked {
    pub fn open(paths: &[PathBuf], dim: usize) -> Result<Self> {
        let mut records = HashMap::new();
        for path in paths {
            let file = read_qpemb(path)?;
            if file.dim as usize != dim {
                return Err(Error::Data(format!(
                    "{} has dim {} but the provider expects {dim}",
                    path.display(),
                    file.dim
                )));
            }
            for rec in file.records {
                let id = rec.id;
                let m = Array2::from_shape_vec((rec.token_count, dim), rec.values)
                    .expect("reader validated record size");
                if records.insert(id, m).is_some() {
                    return Err(Error::Data(format!(
                        "example id {id} appears in more than one embedding file"
                    )));
                }
            }
        }
        Ok(FileBacked { dim, records })
    }

    pub fn from_records(dim: usize, records: Vec<QpembRecord>) -> Result<Self> {
        let mut map = HashMap::new();
        for rec in records {
            if rec.values.len() != rec.token_count * dim {
                return Err(Error::Data(format!("record {} has wrong size", rec.id)));
            }
            let id = rec.id;
            let m = Array2::from_shape_vec((rec.token_count, dim), rec.values).expect("size checked");
            if map.insert(id, m).is_some() {
                return Err(Error::Data(format!("duplicate example id {id}")));
            }
        }
        Ok(FileBacked { dim, records: map })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl EmbeddingProvider for FileBacked {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, example: &Example) -> Result<EmbeddingMatrix> {
        let m = self
            .records
            .get(&example.id)
            .ok_or_else(|| Error::Data(format!("example id {} not in embedding files", example.id)))?;
        EmbeddingMatrix::new(m.mapv(f64::from))
    }

    fn rows(&self, example: &Example) -> Result<usize> {
        self.records
            .get(&example.id)
            .map(|m| m.nrows())
            .ok_or_else(|| Error::Data(format!("example id {} not in embedding files", example.id)))
    }
}

/// One stored matrix: `token_count x dim` values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QpembRecord {
    pub id: u64,
    pub token_count: usize,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpembFile {
    pub dim: u32,
    pub records: Vec<QpembRecord>,
}

pub fn encode_qpemb(dim: u32, records: &[QpembRecord]) -> Result<Vec<u8>> {
    if dim == 0 {
        return Err(Error::Data("qpemb dim must be positive".into()));
    }
    let payload: usize = records
        .iter()
        .map(|r| RECORD_HEADER_LEN + 4 * r.values.len())
        .sum();
    let mut buf = Vec::with_capacity(QPEMB_HEADER_LEN + payload);
    buf.extend_from_slice(&QPEMB_MAGIC);
    buf.extend_from_slice(&QPEMB_VERSION.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    let mut seen = std::collections::HashSet::new();
    for rec in records {
        if rec.token_count == 0 || rec.values.len() != rec.token_count * dim as usize {
            return Err(Error::Data(format!(
                "record {} holds {} values, expected {} rows x {dim}",
                rec.id,
                rec.values.len(),
                rec.token_count
            )));
        }
        if !seen.insert(rec.id) {
            return Err(Error::Data(format!("duplicate record id {}", rec.id)));
        }
        let count = u32::try_from(rec.token_count)
            .map_err(|_| Error::Data(format!("record {} too long", rec.id)))?;
        buf.extend_from_slice(&rec.id.to_le_bytes());
        buf.extend_from_slice(&count.to_le_bytes());
        for v in &rec.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.origin,
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_qpemb(bytes: &[u8], origin: &str) -> Result<QpembFile> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        origin,
    };
    let magic = cur.take(4, "magic")?;
    if magic != QPEMB_MAGIC {
        return Err(Error::format(origin, 0, format!("bad magic {magic:?}")));
    }
    let version = cur.u32("version")?;
    if version != QPEMB_VERSION {
        return Err(Error::format(origin, 4, format!("unsupported version {version}")));
    }
    let dim = cur.u32("dim")?;
    if dim == 0 {
        return Err(Error::format(origin, 8, "dim must be positive"));
    }
    let count = cur.u64("count")?;
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let start = cur.pos as u64;
        let id = cur.u64("record id")?;
        let token_count = cur.u32("token count")? as usize;
        if token_count == 0 {
            return Err(Error::format(origin, start + 8, format!("record {id} has no rows")));
        }
        if !seen.insert(id) {
            return Err(Error::format(origin, start, format!("duplicate record id {id}")));
        }
        let n = token_count
            .checked_mul(dim as usize)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(origin, start + 8, "record size overflows"))?;
        let payload_at = cur.pos as u64;
        let raw = cur.take(n, "record payload")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                origin,
                payload_at + 4 * bad as u64,
                format!("non-finite value in record {id}"),
            ));
        }
        records.push(QpembRecord {
            id,
            token_count,
            values,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            origin,
            cur.pos as u64,
            format!("{} trailing bytes after {count} records", bytes.len() - cur.pos),
        ));
    }
    Ok(QpembFile { dim, records })
}

pub fn write_qpemb(path: impl AsRef<Path>, dim: u32, records: &[QpembRecord]) -> Result<()> {
    fs::write(path, encode_qpemb(dim, records)?)?;
    Ok(())
}

pub fn read_qpemb(path: impl AsRef<Path>) -> Result<QpembFile> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_qpemb(&bytes, &path.display().to_string())
}

/// Converts a provider's output for `examples` into QPEMB records.
pub fn export_records(
    provider: &dyn EmbeddingProvider,
    examples: &[Example],
) -> Result<Vec<QpembRecord>> {
    examples
        .iter()
        .map(|ex| {
            let m = provider.embed(ex)?;
            Ok(QpembRecord {
                id: ex.id,
                token_count: m.rows(),
                values: m.data().iter().map(|&v| v as f32).collect(),
            })
        })
        .collect()
}
