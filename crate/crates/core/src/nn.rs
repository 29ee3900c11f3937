//! Minimal differentiable kernel for the probe networks.
//!
//! Layers cache what their backward pass needs during `forward` and
//! accumulate parameter gradients in `backward`. Losses return the scalar
//! value together with the gradient with respect to their input. All
//! arithmetic is `f64`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::{Error, Result};

pub type Tensor2 = Array2<f64>;

/// A trainable tensor with its gradient and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
    pub velocity: Tensor2,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor2) -> Self {
        let shape = value.raw_dim();
        Param {
            name: name.into(),
            value,
            grad: Tensor2::zeros(shape),
            velocity: Tensor2::zeros(shape),
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let v = Tensor2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound));
        Param::new(name, v)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

fn check_shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Result<()> {
    if lhs != rhs {
        return Err(Error::Shape { op, lhs, rhs });
    }
    Ok(())
}

/// `y = x W + b`, with `x: n x in`, `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor2>,
}

impl Dense {
    /// Weights and bias uniform in `±fan_in^-1/2`.
    pub fn new<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Dense {
            weight: Param::uniform(format!("{name}.weight"), fan_in, fan_out, bound, rng),
            bias: Param::uniform(format!("{name}.bias"), 1, fan_out, bound, rng),
            input: None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.ncols()
    }

    /// Forward pass without caching.
    pub fn apply(&self, x: &ArrayView2<f64>) -> Result<Tensor2> {
        check_shape(
            "dense",
            (x.nrows(), x.ncols()),
            (x.nrows(), self.fan_in()),
        )?;
        Ok(x.dot(&self.weight.value) + &self.bias.value)
    }

    pub fn forward(&mut self, x: Tensor2) -> Result<Tensor2> {
        let y = self.apply(&x.view())?;
        self.input = Some(x);
        Ok(y)
    }

    /// Accumulates `dW`, `db`; returns `dx` when `input_grad` is set.
    pub fn backward(&mut self, dy: &Tensor2, input_grad: bool) -> Result<Option<Tensor2>> {
        let x = self
            .input
            .take()
            .expect("dense backward called without a cached forward");
        check_shape("dense backward", dy.dim(), (x.nrows(), self.fan_out()))?;
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut self.weight.grad);
        self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        Ok(input_grad.then(|| dy.dot(&self.weight.value.t())))
    }
}

impl Module for Dense {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn relu(x: &Tensor2) -> Tensor2 {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient mask of ReLU at `x`; the subgradient at 0 is 0.
pub fn relu_mask(x: &Tensor2) -> Tensor2 {
    x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

pub fn relu_backward(x: &Tensor2, dy: &Tensor2) -> Tensor2 {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

/// Mean squared error over all entries, with its gradient.
pub fn mse(pred: &Tensor2, target: &Tensor2) -> Result<(f64, Tensor2)> {
    check_shape("mse", pred.dim(), target.dim())?;
    let n = pred.len() as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

/// Sum over columns of the per-column mean squared error.
pub fn summed_mse(pred: &Tensor2, target: &Tensor2) -> Result<(f64, Tensor2)> {
    check_shape("summed_mse", pred.dim(), target.dim())?;
    let n = pred.nrows() as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

/// Row-wise softmax.
pub fn softmax(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Mean categorical cross-entropy of softmax(logits) against `labels`.
pub fn softmax_xent(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    check_shape("softmax_xent", (logits.nrows(), 1), (labels.len(), 1))?;
    let n = labels.len() as f64;
    let classes = logits.ncols();
    let mut loss = 0.0;
    let mut grad = softmax(logits);
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Data(format!("label {label} out of {classes} classes")));
        }
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        grad[[i, label]] -= 1.0;
    }
    grad /= n;
    Ok((loss / n, grad))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Single-direction LSTM with gate order (input, forget, cell, output).
///
/// `pre = x W_ih + h W_hh + b`, `c' = f*c + i*g`, `h' = o*tanh(c')`.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: Param,
    pub w_hh: Param,
    pub bias: Param,
    hidden: usize,
}

/// Per-step activations kept for backpropagation through time.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    /// Activated gates per step, `T x 4H`.
    gates: Tensor2,
    /// Cell states, `(T+1) x H`, row 0 is the initial state.
    cells: Tensor2,
    /// Hidden states, `(T+1) x H`, row 0 is the initial state.
    hiddens: Tensor2,
}

impl LstmTrace {
    pub fn final_hidden(&self) -> Array1<f64> {
        self.hiddens.row(self.hiddens.nrows() - 1).to_owned()
    }
}

impl Lstm {
    /// Uniform `±hidden^-1/2` init, forget-gate bias set to 1.
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut bias = Param::uniform(format!("{name}.bias"), 1, 4 * hidden, bound, rng);
        bias.value.slice_mut(s![0, hidden..2 * hidden]).fill(1.0);
        Lstm {
            w_ih: Param::uniform(format!("{name}.w_ih"), input, 4 * hidden, bound, rng),
            w_hh: Param::uniform(format!("{name}.w_hh"), hidden, 4 * hidden, bound, rng),
            bias,
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.value.nrows()
    }

    /// `x W_ih + b` for every row of `x`.
    pub fn project(&self, x: &ArrayView2<f64>) -> Result<Tensor2> {
        check_shape(
            "lstm input",
            (x.nrows(), x.ncols()),
            (x.nrows(), self.input_dim()),
        )?;
        Ok(x.dot(&self.w_ih.value) + &self.bias.value)
    }

    /// Runs the recurrence over pre-projected inputs, in the given step order.
    pub fn run(&self, projected: &ArrayView2<f64>, reverse: bool) -> LstmTrace {
        let h = self.hidden;
        let t_len = projected.nrows();
        let mut gates = Tensor2::zeros((t_len, 4 * h));
        let mut cells = Tensor2::zeros((t_len + 1, h));
        let mut hiddens = Tensor2::zeros((t_len + 1, h));
        for step in 0..t_len {
            let src = if reverse { t_len - 1 - step } else { step };
            let pre = &projected.row(src) + &hiddens.row(step).dot(&self.w_hh.value);
            for k in 0..h {
                let i = sigmoid(pre[k]);
                let f = sigmoid(pre[h + k]);
                let g = pre[2 * h + k].tanh();
                let o = sigmoid(pre[3 * h + k]);
                let c = f * cells[[step, k]] + i * g;
                gates[[step, k]] = i;
                gates[[step, h + k]] = f;
                gates[[step, 2 * h + k]] = g;
                gates[[step, 3 * h + k]] = o;
                cells[[step + 1, k]] = c;
                hiddens[[step + 1, k]] = o * c.tanh();
            }
        }
        LstmTrace {
            gates,
            cells,
            hiddens,
        }
    }

    /// Backpropagates `dh_final` through the trace. Accumulates `dW_hh` and
    /// `db`, and returns the gradient w.r.t. the projected inputs (rows in
    /// input order), from which the caller derives `dW_ih` and `dx`.
    pub fn backward_run(&mut self, trace: &LstmTrace, dh_final: &Array1<f64>, reverse: bool) -> Tensor2 {
        let h = self.hidden;
        let t_len = trace.gates.nrows();
        let mut d_pre = Tensor2::zeros((t_len, 4 * h));
        let mut dh = dh_final.clone();
        let mut dc = Array1::<f64>::zeros(h);
        for step in (0..t_len).rev() {
            let dst = if reverse { t_len - 1 - step } else { step };
            let g = trace.gates.row(step);
            let mut da = d_pre.row_mut(dst);
            for k in 0..h {
                let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let c = trace.cells[[step + 1, k]];
                let c_prev = trace.cells[[step, k]];
                let tc = c.tanh();
                let d_o = dh[k] * tc;
                let dck = dc[k] + dh[k] * o * (1.0 - tc * tc);
                da[k] = dck * gg * i * (1.0 - i);
                da[h + k] = dck * c_prev * f * (1.0 - f);
                da[2 * h + k] = dck * i * (1.0 - gg * gg);
                da[3 * h + k] = d_o * o * (1.0 - o);
                dc[k] = dck * f;
            }
            let da = d_pre.row(dst);
            let h_prev = trace.hiddens.row(step);
            for (r, hp) in h_prev.iter().enumerate() {
                self.w_hh.grad.row_mut(r).scaled_add(*hp, &da);
            }
            self.bias.grad.row_mut(0).scaled_add(1.0, &da);
            dh = self.w_hh.value.dot(&da);
        }
        d_pre
    }

    /// Accumulates `dW_ih` from inputs and projected-input gradients.
    pub fn accumulate_input_weights(&mut self, x: &ArrayView2<f64>, d_pre: &Tensor2) {
        general_mat_mul(1.0, &x.t(), d_pre, 1.0, &mut self.w_ih.grad);
    }
}

impl Module for Lstm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w_ih, &self.w_hh, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }
}

/// Bidirectional LSTM over a batch of variable-length sequences. Each
/// sequence yields `[h_fwd_final, h_bwd_final]`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
    cache: Option<BiLstmCache>,
}

#[derive(Debug, Clone)]
struct BiLstmCache {
    x: Tensor2,
    spans: Vec<(usize, usize)>,
    fwd: Vec<LstmTrace>,
    bwd: Vec<LstmTrace>,
}

/// Sequences stacked row-wise with `(start, len)` spans.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    pub x: Tensor2,
    pub spans: Vec<(usize, usize)>,
}

impl SeqBatch {
    pub fn from_sequences(seqs: &[Tensor2]) -> Result<Self> {
        let dim = seqs.first().map(|s| s.ncols()).unwrap_or(0);
        let total: usize = seqs.iter().map(|s| s.nrows()).sum();
        let mut x = Tensor2::zeros((total, dim));
        let mut spans = Vec::with_capacity(seqs.len());
        let mut at = 0;
        for s in seqs {
            check_shape("seq batch", (s.nrows(), s.ncols()), (s.nrows(), dim))?;
            if s.nrows() == 0 {
                return Err(Error::Data("empty sequence".into()));
            }
            x.slice_mut(s![at..at + s.nrows(), ..]).assign(s);
            spans.push((at, s.nrows()));
            at += s.nrows();
        }
        Ok(SeqBatch { x, spans })
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        BiLstm {
            forward: Lstm::new("lstm_fwd", input, hidden, rng),
            backward: Lstm::new("lstm_bwd", input, hidden, rng),
            cache: None,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden()
    }

    fn run_all(&self, batch: &SeqBatch) -> Result<(Vec<LstmTrace>, Vec<LstmTrace>, Tensor2)> {
        let pf = self.forward.project(&batch.x.view())?;
        let pb = self.backward.project(&batch.x.view())?;
        let h = self.forward.hidden();
        let mut out = Tensor2::zeros((batch.len(), 2 * h));
        let mut fwd = Vec::with_capacity(batch.len());
        let mut bwd = Vec::with_capacity(batch.len());
        for (n, &(start, len)) in batch.spans.iter().enumerate() {
            let tf = self.forward.run(&pf.slice(s![start..start + len, ..]), false);
            let tb = self.backward.run(&pb.slice(s![start..start + len, ..]), true);
            out.slice_mut(s![n, ..h]).assign(&tf.final_hidden());
            out.slice_mut(s![n, h..]).assign(&tb.final_hidden());
            fwd.push(tf);
            bwd.push(tb);
        }
        Ok((fwd, bwd, out))
    }

    pub fn apply(&self, batch: &SeqBatch) -> Result<Tensor2> {
        Ok(self.run_all(batch)?.2)
    }

    pub fn forward(&mut self, batch: SeqBatch) -> Result<Tensor2> {
        let (fwd, bwd, out) = self.run_all(&batch)?;
        self.cache = Some(BiLstmCache {
            x: batch.x,
            spans: batch.spans,
            fwd,
            bwd,
        });
        Ok(out)
    }

    /// `dy` is `batch x 2H`. Returns the gradient w.r.t. the stacked inputs
    /// when `input_grad` is set.
    pub fn backward(&mut self, dy: &Tensor2, input_grad: bool) -> Result<Option<Tensor2>> {
        let cache = self
            .cache
            .take()
            .expect("bilstm backward called without a cached forward");
        let h = self.forward.hidden();
        check_shape("bilstm backward", dy.dim(), (cache.spans.len(), 2 * h))?;
        let rows = cache.x.nrows();
        let mut d_pf = Tensor2::zeros((rows, 4 * h));
        let mut d_pb = Tensor2::zeros((rows, 4 * h));
        for (n, &(start, len)) in cache.spans.iter().enumerate() {
            let dh_f = dy.slice(s![n, ..h]).to_owned();
            let dh_b = dy.slice(s![n, h..]).to_owned();
            let df = self.forward.backward_run(&cache.fwd[n], &dh_f, false);
            let db = self.backward.backward_run(&cache.bwd[n], &dh_b, true);
            d_pf.slice_mut(s![start..start + len, ..]).assign(&df);
            d_pb.slice_mut(s![start..start + len, ..]).assign(&db);
        }
        self.forward.accumulate_input_weights(&cache.x.view(), &d_pf);
        self.backward.accumulate_input_weights(&cache.x.view(), &d_pb);
        Ok(input_grad.then(|| {
            d_pf.dot(&self.forward.w_ih.value.t()) + d_pb.dot(&self.backward.w_ih.value.t())
        }))
    }
}

impl Module for BiLstm {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.forward.params();
        v.extend(self.backward.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.forward.params_mut();
        v.extend(self.backward.params_mut());
        v
    }
}

/// Global L2 norm over every gradient buffer.
pub fn global_grad_norm(params: &[&mut Param]) -> f64 {
    params
        .iter()
        .map(|p| p.grad.iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            p.grad *= scale;
        }
    }
    norm
}

/// One SGD step with classical momentum and global-norm clipping:
/// `v <- momentum*v + g`, `p <- p - lr*v`, then gradients are zeroed.
/// Returns the pre-clip gradient norm.
pub fn sgd_step(params: &mut [&mut Param], lr: f64, momentum: f64, clip_norm: f64) -> Result<f64> {
    let norm = global_grad_norm(params);
    if !norm.is_finite() {
        let bad: Vec<&str> = params
            .iter()
            .filter(|p| p.grad.iter().any(|g| !g.is_finite()))
            .map(|p| p.name.as_str())
            .collect();
        return Err(Error::NonFinite(format!("gradient of {}", bad.join(", "))));
    }
    clip_grad_norm(params, clip_norm);
    for p in params.iter_mut() {
        let Param {
            value,
            grad,
            velocity,
            ..
        } = &mut **p;
        velocity.zip_mut_with(grad, |v, &g| *v = momentum * *v + g);
        value.scaled_add(-lr, velocity);
        grad.fill(0.0);
    }
    Ok(norm)
}
