//! The three probe architectures and their batch inputs.
//!
//! Regression probes read the zero-padded, row-major flattening of an
//! example's embedding matrix. The unit-identification probe reads the
//! unpadded token sequence through a BiLSTM.

use ndarray::{s, Array1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingMatrix, EmbeddingProvider};
use crate::nn::{
    mse, relu, relu_backward, softmax_xent, summed_mse, BiLstm, Dense, Module, Param, SeqBatch,
    Tensor2,
};
use crate::synthgen::{Example, TaskKind};
use crate::{Error, Result};

pub const DECODING_HIDDEN: usize = 100;
pub const RANGE_HIDDEN: usize = 50;
pub const BILSTM_HIDDEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub task: TaskKind,
    pub embed_dim: usize,
    /// Longest token count over train and test for this dataset and provider.
    pub max_len: usize,
    pub hidden_dim: usize,
    /// Regression outputs, or class count for unit identification.
    pub output_arity: usize,
}

impl ProbeConfig {
    /// Default hidden sizes; `classes` is required for unit identification.
    pub fn for_task(task: TaskKind, embed_dim: usize, max_len: usize, classes: Option<usize>) -> Result<Self> {
        let (hidden_dim, output_arity) = match task {
            TaskKind::UnitId => (
                BILSTM_HIDDEN,
                classes.ok_or_else(|| Error::Config("unit identification needs a class count".into()))?,
            ),
            TaskKind::Range => (RANGE_HIDDEN, 2),
            _ => (DECODING_HIDDEN, 1),
        };
        let cfg = ProbeConfig {
            task,
            embed_dim,
            max_len,
            hidden_dim,
            output_arity,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden_dim = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.max_len == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!("probe sizes must be positive: {self:?}")));
        }
        let arity_ok = match self.task {
            TaskKind::UnitId => self.output_arity >= 2,
            t => Some(self.output_arity) == t.target_arity(),
        };
        if !arity_ok {
            return Err(Error::Config(format!(
                "output arity {} does not fit task {}",
                self.output_arity, self.task
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.max_len * self.embed_dim
    }
}

/// Input of one example, ready for its probe.
#[derive(Debug, Clone, PartialEq)]
pub enum PaddedInput {
    Flat(Array1<f64>),
    Sequence(Tensor2),
}

/// Right-pads with zero rows to `max_len` and flattens row-major.
pub fn pad_and_flatten(matrix: &EmbeddingMatrix, max_len: usize) -> Result<Array1<f64>> {
    if matrix.rows() > max_len {
        return Err(Error::Data(format!(
            "{} rows exceed max_len {max_len}",
            matrix.rows()
        )));
    }
    let mut out = Array1::zeros(max_len * matrix.dim());
    let flat: Vec<f64> = matrix.data().iter().copied().collect();
    out.slice_mut(s![..flat.len()]).assign(&Array1::from(flat));
    Ok(out)
}

pub fn prepare_input(config: &ProbeConfig, matrix: EmbeddingMatrix) -> Result<PaddedInput> {
    if matrix.dim() != config.embed_dim {
        return Err(Error::Data(format!(
            "embedding dim {} differs from probe dim {}",
            matrix.dim(),
            config.embed_dim
        )));
    }
    Ok(match config.task {
        TaskKind::UnitId => {
            if matrix.rows() > config.max_len {
                return Err(Error::Data(format!(
                    "{} rows exceed max_len {}",
                    matrix.rows(),
                    config.max_len
                )));
            }
            PaddedInput::Sequence(matrix.into_inner())
        }
        _ => PaddedInput::Flat(pad_and_flatten(&matrix, config.max_len)?),
    })
}

/// A mini-batch of probe inputs with targets.
#[derive(Debug, Clone)]
pub enum Batch {
    Regression { x: Tensor2, targets: Tensor2 },
    Classification { seqs: SeqBatch, labels: Vec<usize> },
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Regression { x, .. } => x.nrows(),
            Batch::Classification { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embeds `examples` through `provider` and stacks them.
    pub fn build(config: &ProbeConfig, provider: &dyn EmbeddingProvider, examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        match config.task {
            TaskKind::UnitId => {
                let mut seqs = Vec::with_capacity(examples.len());
                let mut labels = Vec::with_capacity(examples.len());
                for ex in examples {
                    let label = ex
                        .label
                        .ok_or_else(|| Error::Data(format!("example {} has no label", ex.id)))?;
                    if label >= config.output_arity {
                        return Err(Error::Data(format!(
                            "label {label} outside {} classes",
                            config.output_arity
                        )));
                    }
                    match prepare_input(config, provider.embed(ex)?)? {
                        PaddedInput::Sequence(m) => seqs.push(m),
                        PaddedInput::Flat(_) => unreachable!(),
                    }
                    labels.push(label);
                }
                Ok(Batch::Classification {
                    seqs: SeqBatch::from_sequences(&seqs)?,
                    labels,
                })
            }
            _ => {
                let width = config.input_width();
                let mut x = Tensor2::zeros((examples.len(), width));
                let mut targets = Tensor2::zeros((examples.len(), config.output_arity));
                for (i, ex) in examples.iter().enumerate() {
                    if ex.targets.len() != config.output_arity {
                        return Err(Error::Data(format!(
                            "example {} has {} targets, probe expects {}",
                            ex.id,
                            ex.targets.len(),
                            config.output_arity
                        )));
                    }
                    let m = provider.embed(ex)?;
                    if m.dim() != config.embed_dim {
                        return Err(Error::Data(format!(
                            "embedding dim {} differs from probe dim {}",
                            m.dim(),
                            config.embed_dim
                        )));
                    }
                    if m.rows() > config.max_len {
                        return Err(Error::Data(format!(
                            "example {} has {} rows, max_len is {}",
                            ex.id,
                            m.rows(),
                            config.max_len
                        )));
                    }
                    let n = m.rows() * m.dim();
                    let mut row = x.row_mut(i);
                    for (dst, src) in row.slice_mut(s![..n]).iter_mut().zip(m.data().iter()) {
                        *dst = *src;
                    }
                    for (j, t) in ex.targets.iter().enumerate() {
                        targets[[i, j]] = *t;
                    }
                }
                Ok(Batch::Regression { x, targets })
            }
        }
    }
}

/// Three dense layers, ReLU after the first two, linear outputs.
#[derive(Debug, Clone)]
pub struct MlpRegressor {
    pub l1: Dense,
    pub l2: Dense,
    pub l3: Dense,
    pre1: Option<Tensor2>,
    pre2: Option<Tensor2>,
}

impl MlpRegressor {
    pub fn new(input: usize, hidden: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        MlpRegressor {
            l1: Dense::new("fc1", input, hidden, rng),
            l2: Dense::new("fc2", hidden, hidden, rng),
            l3: Dense::new("fc3", hidden, outputs, rng),
            pre1: None,
            pre2: None,
        }
    }

    pub fn apply(&self, x: &Tensor2) -> Result<Tensor2> {
        let h1 = relu(&self.l1.apply(&x.view())?);
        let h2 = relu(&self.l2.apply(&h1.view())?);
        self.l3.apply(&h2.view())
    }

    pub fn forward(&mut self, x: Tensor2) -> Result<Tensor2> {
        let pre1 = self.l1.forward(x)?;
        let pre2 = self.l2.forward(relu(&pre1))?;
        let out = self.l3.forward(relu(&pre2))?;
        self.pre1 = Some(pre1);
        self.pre2 = Some(pre2);
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor2, input_grad: bool) -> Result<Option<Tensor2>> {
        let pre1 = self.pre1.take().expect("forward before backward");
        let pre2 = self.pre2.take().expect("forward before backward");
        let d2 = self.l3.backward(dy, true)?.expect("requested");
        let d2 = relu_backward(&pre2, &d2);
        let d1 = self.l2.backward(&d2, true)?.expect("requested");
        let d1 = relu_backward(&pre1, &d1);
        self.l1.backward(&d1, input_grad)
    }
}

impl Module for MlpRegressor {
    fn params(&self) -> Vec<&Param> {
        [&self.l1, &self.l2, &self.l3]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.l1.params_mut();
        v.extend(self.l2.params_mut());
        v.extend(self.l3.params_mut());
        v
    }
}

/// BiLSTM final states of both directions, concatenated, into a softmax layer.
#[derive(Debug, Clone)]
pub struct BiLstmClassifier {
    pub rnn: BiLstm,
    pub out: Dense,
}

impl BiLstmClassifier {
    pub fn new(input: usize, hidden: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let rnn = BiLstm::new(input, hidden, rng);
        let out = Dense::new("classifier", rnn.output_dim(), classes, rng);
        BiLstmClassifier { rnn, out }
    }

    pub fn apply(&self, seqs: &SeqBatch) -> Result<Tensor2> {
        let h = self.rnn.apply(seqs)?;
        self.out.apply(&h.view())
    }

    pub fn forward(&mut self, seqs: SeqBatch) -> Result<Tensor2> {
        let h = self.rnn.forward(seqs)?;
        self.out.forward(h)
    }

    pub fn backward(&mut self, dlogits: &Tensor2, input_grad: bool) -> Result<Option<Tensor2>> {
        let dh = self.out.backward(dlogits, true)?.expect("requested");
        self.rnn.backward(&dh, input_grad)
    }
}

impl Module for BiLstmClassifier {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.rnn.params();
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.rnn.params_mut();
        v.extend(self.out.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum ProbeNet {
    Regressor(MlpRegressor),
    Classifier(BiLstmClassifier),
}

#[derive(Debug, Clone)]
pub struct ProbeModel {
    pub config: ProbeConfig,
    pub net: ProbeNet,
}

/// Builds a freshly initialized probe for `config`.
pub fn build_probe(config: &ProbeConfig, seed: u64) -> Result<ProbeModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = match config.task {
        TaskKind::UnitId => ProbeNet::Classifier(BiLstmClassifier::new(
            config.embed_dim,
            config.hidden_dim,
            config.output_arity,
            &mut rng,
        )),
        _ => ProbeNet::Regressor(MlpRegressor::new(
            config.input_width(),
            config.hidden_dim,
            config.output_arity,
            &mut rng,
        )),
    };
    Ok(ProbeModel {
        config: config.clone(),
        net,
    })
}

fn task_loss(task: TaskKind, out: &Tensor2, targets: &Tensor2) -> Result<(f64, Tensor2)> {
    if task == TaskKind::Range {
        summed_mse(out, targets)
    } else {
        mse(out, targets)
    }
}

impl ProbeModel {
    /// Raw outputs: predictions for regression, logits for classification.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor2> {
        match (&self.net, batch) {
            (ProbeNet::Regressor(m), Batch::Regression { x, .. }) => m.apply(x),
            (ProbeNet::Classifier(m), Batch::Classification { seqs, .. }) => m.apply(seqs),
            _ => Err(Error::Data("batch kind does not match probe".into())),
        }
    }

    /// Task loss on `batch` without touching gradients.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let out = self.predict(batch)?;
        match batch {
            Batch::Regression { targets, .. } => Ok(task_loss(self.config.task, &out, targets)?.0),
            Batch::Classification { labels, .. } => Ok(softmax_xent(&out, labels)?.0),
        }
    }

    /// Task loss on `batch`; parameter gradients are accumulated.
    pub fn loss_and_backward(&mut self, batch: Batch) -> Result<f64> {
        Ok(self.loss_and_backward_inner(batch, false)?.0)
    }

    /// As [`ProbeModel::loss_and_backward`], also returning the input gradient.
    pub fn loss_and_input_grad(&mut self, batch: Batch) -> Result<(f64, Tensor2)> {
        let (l, g) = self.loss_and_backward_inner(batch, true)?;
        Ok((l, g.expect("requested")))
    }

    fn loss_and_backward_inner(&mut self, batch: Batch, input_grad: bool) -> Result<(f64, Option<Tensor2>)> {
        let task = self.config.task;
        match (&mut self.net, batch) {
            (ProbeNet::Regressor(m), Batch::Regression { x, targets }) => {
                let out = m.forward(x)?;
                let (loss, dy) = task_loss(task, &out, &targets)?;
                Ok((loss, m.backward(&dy, input_grad)?))
            }
            (ProbeNet::Classifier(m), Batch::Classification { seqs, labels }) => {
                let logits = m.forward(seqs)?;
                let (loss, dy) = softmax_xent(&logits, &labels)?;
                Ok((loss, m.backward(&dy, input_grad)?))
            }
            _ => Err(Error::Data("batch kind does not match probe".into())),
        }
    }

    pub fn output_width(&self) -> usize {
        match &self.net {
            ProbeNet::Regressor(m) => m.l3.fan_out(),
            ProbeNet::Classifier(m) => m.out.fan_out(),
        }
    }

    /// Parameter values, for best-epoch snapshots.
    pub fn snapshot(&self) -> Vec<Tensor2> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor2]) {
        for (p, v) in self.params_mut().into_iter().zip(snapshot) {
            p.value.assign(v);
        }
    }
}

impl Module for ProbeModel {
    fn params(&self) -> Vec<&Param> {
        match &self.net {
            ProbeNet::Regressor(m) => m.params(),
            ProbeNet::Classifier(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.net {
            ProbeNet::Regressor(m) => m.params_mut(),
            ProbeNet::Classifier(m) => m.params_mut(),
        }
    }
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub entries: usize,
}

/// Relative error with a small floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// A random batch shaped for `config`: Gaussian inputs (unit-identification
/// sequences of random length up to `max_len`), Gaussian targets or uniform
/// labels.
pub fn random_batch(config: &ProbeConfig, size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_shape_fn((r, c), |_| StandardNormal.sample(&mut *rng))
    }
    match config.task {
        TaskKind::UnitId => {
            let mut seqs = Vec::with_capacity(size);
            for _ in 0..size {
                let len = rng.random_range(1..=config.max_len);
                seqs.push(gauss(rng, len, config.embed_dim));
            }
            let labels = (0..size).map(|_| rng.random_range(0..config.output_arity)).collect();
            Ok(Batch::Classification {
                seqs: SeqBatch::from_sequences(&seqs)?,
                labels,
            })
        }
        _ => Ok(Batch::Regression {
            x: gauss(rng, size, config.input_width()),
            targets: gauss(rng, size, config.output_arity),
        }),
    }
}

/// Compares analytic parameter gradients of a freshly built probe against
/// central differences with step `h` on `instances` random batches.
pub fn gradient_check(config: &ProbeConfig, seed: u64, instances: usize, h: f64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut entries = 0;
    for k in 0..instances {
        let mut model = build_probe(config, seed.wrapping_add(k as u64))?;
        let batch = random_batch(config, 4, &mut rng)?;
        model.zero_grad();
        model.loss_and_backward(batch.clone())?;
        let analytic: Vec<Tensor2> = model.params().iter().map(|p| p.grad.clone()).collect();
        for (pi, grad) in analytic.iter().enumerate() {
            for idx in 0..grad.len() {
                let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
                let orig = model.params()[pi].value[[r, c]];
                model.params_mut()[pi].value[[r, c]] = orig + h;
                let up = model.loss(&batch)?;
                model.params_mut()[pi].value[[r, c]] = orig - h;
                let down = model.loss(&batch)?;
                model.params_mut()[pi].value[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                worst = worst.max(rel_err(grad[[r, c]], numeric));
                entries += 1;
            }
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn percent_probe_parameter_count() {
        let cfg = ProbeConfig::for_task(TaskKind::Percent, 768, 5, None).unwrap();
        let p = build_probe(&cfg, 0).unwrap();
        let expected = 3840 * 100 + 100 + 100 * 100 + 100 + 100 + 1;
        assert_eq!(expected, 394_301);
        assert_eq!(p.param_count(), expected);
    }

    #[test]
    fn output_widths_follow_task() {
        let range = build_probe(&ProbeConfig::for_task(TaskKind::Range, 8, 3, None).unwrap(), 0).unwrap();
        assert_eq!(range.output_width(), 2);
        assert_eq!(range.config.hidden_dim, 50);
        let unit =
            build_probe(&ProbeConfig::for_task(TaskKind::UnitId, 8, 3, Some(173)).unwrap(), 0).unwrap();
        assert_eq!(unit.output_width(), 173);
        assert_eq!(unit.config.hidden_dim, 5);
        for task in [TaskKind::Percent, TaskKind::BasisPoint, TaskKind::Order, TaskKind::Addition] {
            let cfg = ProbeConfig::for_task(task, 8, 3, None).unwrap();
            assert_eq!(cfg.hidden_dim, 100);
            assert_eq!(build_probe(&cfg, 0).unwrap().output_width(), 1);
        }
        assert!(ProbeConfig::for_task(TaskKind::UnitId, 8, 3, None).is_err());
    }

    #[test]
    fn padding_rules() {
        let m = EmbeddingMatrix::new(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let v = pad_and_flatten(&m, 4).unwrap();
        assert_eq!(v.len(), 12);
        assert_eq!(v.slice(s![..6]).to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(v.slice(s![6..]).iter().all(|x| *x == 0.0));
        assert_eq!(pad_and_flatten(&m, 2).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(matches!(pad_and_flatten(&m, 1), Err(Error::Data(_))));
    }

    #[test]
    fn unit_inputs_stay_unpadded() {
        let cfg = ProbeConfig::for_task(TaskKind::UnitId, 3, 4, Some(3)).unwrap();
        let m = EmbeddingMatrix::new(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        match prepare_input(&cfg, m).unwrap() {
            PaddedInput::Sequence(s) => assert_eq!(s.nrows(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn range_loss_adds_outputs() {
        let cfg = ProbeConfig::for_task(TaskKind::Range, 1, 1, None).unwrap();
        let mut p = build_probe(&cfg, 0).unwrap();
        // zero network: output equals bias of last layer = 0
        for param in p.params_mut() {
            param.value.fill(0.0);
        }
        let x = Tensor2::zeros((2, 1));
        let perfect = Batch::Regression {
            x: x.clone(),
            targets: Tensor2::zeros((2, 2)),
        };
        assert_eq!(p.loss(&perfect).unwrap(), 0.0);
        // per-output MSEs 0.5 and 1.5
        let batch = Batch::Regression {
            x,
            targets: array![[1.0, 1.0], [0.0, 2.0f64.sqrt()]],
        };
        assert!((p.loss(&batch).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let cfg = ProbeConfig::for_task(TaskKind::UnitId, 2, 3, Some(5)).unwrap();
        let mut p = build_probe(&cfg, 0).unwrap();
        if let ProbeNet::Classifier(c) = &mut p.net {
            c.out.weight.value.fill(0.0);
            c.out.bias.value.fill(0.0);
        }
        let seqs = SeqBatch::from_sequences(&[array![[0.3, -0.2]], array![[1.0, 1.0], [0.0, 2.0]]]).unwrap();
        let batch = Batch::Classification {
            seqs,
            labels: vec![1, 4],
        };
        assert!((p.loss(&batch).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn whole_probe_gradients_match_finite_differences() {
        for task in [TaskKind::Percent, TaskKind::Range, TaskKind::UnitId] {
            let cfg = ProbeConfig::for_task(task, 8, 3, Some(3)).unwrap().with_hidden(4);
            let check = gradient_check(&cfg, 5, 5, 1e-5).unwrap();
            assert!(check.max_rel_err < 1e-4, "{task}: {check:?}");
            assert_eq!(check.entries, 5 * build_probe(&cfg, 0).unwrap().param_count());
        }
    }
}
