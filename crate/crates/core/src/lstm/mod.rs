//! Stacked LSTM forecaster with a linear output head.
//!
//! Per layer and timestep, with `z = [x_t; a_{t−1}]`:
//!
//! ```text
//! f = σ(W_f z + b_f)     u = σ(W_u z + b_u)     c̃ = tanh(W_c z + b_c)
//! c_t = f ⊙ c_{t−1} + u ⊙ c̃
//! o = σ(W_o z + b_o)     a_t = o ⊙ tanh(c_t)
//! ```
//!
//! Layer `k` reads the hidden-state sequence of layer `k−1`; the last layer's
//! final hidden state feeds `ŷ = W a_T + b`. Every window starts from
//! `a_0 = c_0 = 0`.
//!
//! Batched computations keep one window per matrix row.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_HEADER};
pub use train::{
    adam_step, adam_update, denormalize, forecast, make_sequences, normalize, train, train_matrices,
    train_matrices_with, AdamState,
    TrainReport, Windows,
};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmConfig {
    pub input_size: usize,
    /// Hidden units per layer, bottom first.
    pub layers: Vec<usize>,
    pub sequence_length: usize,
    pub output_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop_patience: Option<usize>,
    pub learning_rate: f64,
    pub seed: u64,
    /// Use every `window_stride`-th training window.
    pub window_stride: usize,
}

impl LstmConfig {
    /// Totals of the three species: two layers, early stopping.
    pub fn case1() -> Self {
        Self {
            input_size: 3,
            layers: vec![64, 32],
            sequence_length: 50,
            output_size: 3,
            batch_size: 64,
            epochs: 100,
            early_stop_patience: Some(5),
            learning_rate: 1e-3,
            seed: 0,
            window_stride: 1,
        }
    }

    /// Full 36-shell state, one small layer, no early stopping.
    pub fn case2() -> Self {
        Self {
            input_size: 108,
            layers: vec![20],
            sequence_length: 50,
            output_size: 108,
            batch_size: 1,
            epochs: 50,
            early_stop_patience: None,
            learning_rate: 1e-3,
            seed: 0,
            window_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequence_length == 0
            || self.layers.is_empty()
            || self.layers.contains(&0)
            || self.input_size == 0
            || self.output_size == 0
            || self.batch_size == 0
            || self.window_stride == 0
        {
            return Err(Error::Invalid(
                "sizes, layers, sequence length, batch size and window stride must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Gate parameters of one layer; every `W` is `hidden x (input + hidden)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerWeights {
    pub w_f: DMatrix<f64>,
    pub w_u: DMatrix<f64>,
    pub w_c: DMatrix<f64>,
    pub w_o: DMatrix<f64>,
    pub b_f: DVector<f64>,
    pub b_u: DVector<f64>,
    pub b_c: DVector<f64>,
    pub b_o: DVector<f64>,
}

impl LstmLayerWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || DMatrix::zeros(hidden, input + hidden);
        let b = || DVector::zeros(hidden);
        Self {
            w_f: w(),
            w_u: w(),
            w_c: w(),
            w_o: w(),
            b_f: b(),
            b_u: b(),
            b_c: b(),
            b_o: b(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_f.nrows()
    }

    pub fn input(&self) -> usize {
        self.w_f.ncols() - self.hidden()
    }

    fn check(&self) -> Result<()> {
        let (h, n) = self.w_f.shape();
        let ok = n > h
            && [&self.w_u, &self.w_c, &self.w_o].iter().all(|w| w.shape() == (h, n))
            && [&self.b_f, &self.b_u, &self.b_c, &self.b_o].iter().all(|b| b.len() == h);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("inconsistent gate weight shapes".into()))
        }
    }

    /// `[W_f; W_u; W_c; W_o]`, `4h x (input + hidden)`.
    fn stacked(&self) -> DMatrix<f64> {
        let (h, n) = self.w_f.shape();
        let mut s = DMatrix::zeros(4 * h, n);
        for (g, w) in [&self.w_f, &self.w_u, &self.w_c, &self.w_o].iter().enumerate() {
            s.rows_mut(g * h, h).copy_from(w);
        }
        s
    }

    fn stacked_bias(&self) -> DVector<f64> {
        let h = self.hidden();
        let mut b = DVector::zeros(4 * h);
        for (g, v) in [&self.b_f, &self.b_u, &self.b_c, &self.b_o].iter().enumerate() {
            b.rows_mut(g * h, h).copy_from(v);
        }
        b
    }

    fn tensors(&self) -> [&[f64]; 8] {
        [
            self.w_f.as_slice(),
            self.w_u.as_slice(),
            self.w_c.as_slice(),
            self.w_o.as_slice(),
            self.b_f.as_slice(),
            self.b_u.as_slice(),
            self.b_c.as_slice(),
            self.b_o.as_slice(),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w_f.as_mut_slice(),
            self.w_u.as_mut_slice(),
            self.w_c.as_mut_slice(),
            self.w_o.as_mut_slice(),
            self.b_f.as_mut_slice(),
            self.b_u.as_mut_slice(),
            self.b_c.as_mut_slice(),
            self.b_o.as_mut_slice(),
        ]
    }
}

/// Per-feature min-max scaling fitted on training data. A feature that is
/// constant at `v` gets the range `[v − 0.5, v + 0.5]` and is listed in
/// `degenerate`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub degenerate: Vec<usize>,
}

impl Normalization {
    pub fn fit(values: &DMatrix<f64>) -> Self {
        let mut n = Normalization {
            min: values.column_iter().map(|c| c.min()).collect(),
            max: values.column_iter().map(|c| c.max()).collect(),
            degenerate: Vec::new(),
        };
        for i in 0..n.min.len() {
            if !(n.max[i] > n.min[i]) {
                n.min[i] -= 0.5;
                n.max[i] += 0.5;
                n.degenerate.push(i);
            }
        }
        n
    }

    pub fn width(&self, i: usize) -> f64 {
        self.max[i] - self.min[i]
    }
}

/// Network weights, configuration and the scaling of its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub config: LstmConfig,
    pub layers: Vec<LstmLayerWeights>,
    /// `output x last hidden`
    pub dense_w: DMatrix<f64>,
    pub dense_b: DVector<f64>,
    pub norm: Normalization,
}

/// Gradients in the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LstmLayerWeights>,
    pub dense_w: DMatrix<f64>,
    pub dense_b: DVector<f64>,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.layers.iter().flat_map(|l| l.tensors()).collect();
        v.push(self.dense_w.as_slice());
        v.push(self.dense_b.as_slice());
        v
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl LstmModel {
    /// Initial weights uniform in `±1/sqrt(fan_in)` with `fan_in = input + hidden`
    /// for gates and `hidden` for the head; forget biases 1, other biases 0.
    /// Normalization starts as the identity.
    pub fn new(config: LstmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut input = config.input_size;
        for &hidden in &config.layers {
            let mut w = LstmLayerWeights::zeros(input, hidden);
            let bound = 1.0 / ((input + hidden) as f64).sqrt();
            for m in [&mut w.w_f, &mut w.w_u, &mut w.w_c, &mut w.w_o] {
                m.iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
            }
            w.b_f.fill(1.0);
            layers.push(w);
            input = hidden;
        }
        let bound = 1.0 / (input as f64).sqrt();
        let dense_w = DMatrix::from_fn(config.output_size, input, |_, _| rng.random_range(-bound..bound));
        let dense_b = DVector::zeros(config.output_size);
        let norm = Normalization {
            min: vec![0.0; config.input_size],
            max: vec![1.0; config.input_size],
            degenerate: Vec::new(),
        };
        Ok(Self {
            config,
            layers,
            dense_w,
            dense_b,
            norm,
        })
    }

    /// Checks that every tensor agrees with the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.layers.len() {
            return Err(Error::Shape(format!(
                "{} weight layers for {} configured",
                self.layers.len(),
                self.config.layers.len()
            )));
        }
        let mut input = self.config.input_size;
        for (k, (w, &h)) in self.layers.iter().zip(&self.config.layers).enumerate() {
            w.check()?;
            if w.hidden() != h || w.input() != input {
                return Err(Error::Shape(format!(
                    "layer {k} is {} -> {}, config says {input} -> {h}",
                    w.input(),
                    w.hidden()
                )));
            }
            input = h;
        }
        if self.dense_w.shape() != (self.config.output_size, input) || self.dense_b.len() != self.config.output_size {
            return Err(Error::Shape("dense head does not match the configuration".into()));
        }
        if self.norm.min.len() != self.config.input_size || self.norm.max.len() != self.config.input_size {
            return Err(Error::Shape("normalization does not match the input size".into()));
        }
        if self.norm.min.iter().zip(&self.norm.max).any(|(a, b)| !(b > a)) {
            return Err(Error::Invalid("normalization needs min < max for every feature".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors in a fixed order: per layer the four gate matrices
    /// then the four biases, then the head weight and bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.layers.iter().flat_map(|l| l.tensors()).collect();
        v.push(self.dense_w.as_slice());
        v.push(self.dense_b.as_slice());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect();
        v.push(self.dense_w.as_mut_slice());
        v.push(self.dense_b.as_mut_slice());
        v
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(|l| LstmLayerWeights::zeros(l.input(), l.hidden())).collect(),
            dense_w: DMatrix::zeros(self.dense_w.nrows(), self.dense_w.ncols()),
            dense_b: DVector::zeros(self.dense_b.len()),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations of one cell step, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct CellCache {
    /// `[x_t, a_{t−1}]`, one row per window.
    pub z: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub c_tilde: DMatrix<f64>,
    pub o: DMatrix<f64>,
    pub c_prev: DMatrix<f64>,
    pub tanh_c: DMatrix<f64>,
}

/// One step for a batch of rows, with the layer's stacked weights
/// pre-transposed (`(input + hidden) x 4h`).
fn step(
    x: &DMatrix<f64>,
    a_prev: &DMatrix<f64>,
    c_prev: &DMatrix<f64>,
    w_t: &DMatrix<f64>,
    bias: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, CellCache) {
    let (b, i) = x.shape();
    let h = a_prev.ncols();
    let mut z = DMatrix::zeros(b, i + h);
    z.columns_mut(0, i).copy_from(x);
    z.columns_mut(i, h).copy_from(a_prev);
    let mut pre = &z * w_t;
    for mut row in pre.row_iter_mut() {
        row += bias.transpose();
    }
    let gate = |g: usize, act: fn(f64) -> f64| pre.columns(g * h, h).map(act);
    let f = gate(0, sigmoid);
    let u = gate(1, sigmoid);
    let c_tilde = gate(2, f64::tanh);
    let o = gate(3, sigmoid);
    let c = f.component_mul(c_prev) + u.component_mul(&c_tilde);
    let tanh_c = c.map(f64::tanh);
    let a = o.component_mul(&tanh_c);
    let cache = CellCache {
        z,
        f,
        u,
        c_tilde,
        o,
        c_prev: c_prev.clone(),
        tanh_c,
    };
    (a, c, cache)
}

/// One cell step for a single input vector.
pub fn cell_forward(
    x_t: &DVector<f64>,
    a_prev: &DVector<f64>,
    c_prev: &DVector<f64>,
    w: &LstmLayerWeights,
) -> Result<(DVector<f64>, DVector<f64>, CellCache)> {
    w.check()?;
    if x_t.len() != w.input() || a_prev.len() != w.hidden() || c_prev.len() != w.hidden() {
        return Err(Error::Shape(format!(
            "cell expects input {} and state {}, got {}, {}, {}",
            w.input(),
            w.hidden(),
            x_t.len(),
            a_prev.len(),
            c_prev.len()
        )));
    }
    let row = |v: &DVector<f64>| DMatrix::from_row_slice(1, v.len(), v.as_slice());
    let (a, c, cache) = step(&row(x_t), &row(a_prev), &row(c_prev), &w.stacked().transpose(), &w.stacked_bias());
    Ok((
        DVector::from_column_slice(a.as_slice()),
        DVector::from_column_slice(c.as_slice()),
        cache,
    ))
}

/// Everything the backward pass needs from a batched forward pass.
pub struct ForwardTrace {
    /// `caches[layer][t]`
    caches: Vec<Vec<CellCache>>,
    last_hidden: DMatrix<f64>,
    pub prediction: DMatrix<f64>,
}

/// Batched forward pass; `inputs[t]` holds timestep `t` of every window
/// (`batch x input_size`). Inputs are in normalized units.
pub fn forward_batch(model: &LstmModel, inputs: &[DMatrix<f64>]) -> Result<ForwardTrace> {
    let b = inputs.first().map_or(0, |x| x.nrows());
    if b == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    if inputs.iter().any(|x| x.shape() != (b, model.config.input_size)) {
        return Err(Error::Shape(format!(
            "every timestep must be {b} x {}",
            model.config.input_size
        )));
    }
    let mut seq: Vec<DMatrix<f64>> = inputs.to_vec();
    let mut caches = Vec::with_capacity(model.layers.len());
    for w in &model.layers {
        let h = w.hidden();
        let (w_t, bias) = (w.stacked().transpose(), w.stacked_bias());
        let mut a = DMatrix::zeros(b, h);
        let mut c = DMatrix::zeros(b, h);
        let mut layer_caches = Vec::with_capacity(seq.len());
        let mut out = Vec::with_capacity(seq.len());
        for (t, x) in seq.iter().enumerate() {
            let (a_next, c_next, cache) = step(x, &a, &c, &w_t, &bias);
            if !a_next.iter().chain(c_next.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFiniteActivation(t));
            }
            a = a_next;
            c = c_next;
            out.push(a.clone());
            layer_caches.push(cache);
        }
        caches.push(layer_caches);
        seq = out;
    }
    let last_hidden = seq.pop().expect("sequence length >= 1");
    let mut prediction = &last_hidden * model.dense_w.transpose();
    for mut row in prediction.row_iter_mut() {
        row += model.dense_b.transpose();
    }
    Ok(ForwardTrace {
        caches,
        last_hidden,
        prediction,
    })
}

/// Prediction for one window (`sequence_length x input_size`, normalized units).
pub fn forward(model: &LstmModel, window: &DMatrix<f64>) -> Result<DVector<f64>> {
    if window.ncols() != model.config.input_size || window.nrows() == 0 {
        return Err(Error::Shape(format!(
            "window is {} x {}, model takes {} features",
            window.nrows(),
            window.ncols(),
            model.config.input_size
        )));
    }
    let inputs: Vec<DMatrix<f64>> = window.row_iter().map(|r| DMatrix::from_iterator(1, r.len(), r.iter().copied())).collect();
    let trace = forward_batch(model, &inputs)?;
    Ok(DVector::from_column_slice(trace.prediction.as_slice()))
}

/// Mean over all entries of the squared difference.
pub fn loss_mse(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction is {:?}, target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len();
    if n == 0 {
        return Err(Error::Invalid("empty loss".into()));
    }
    Ok((pred - target).norm_squared() / n as f64)
}

/// Gradients of the batch MSE by backpropagation through time, plus the loss.
pub fn backward(model: &LstmModel, inputs: &[DMatrix<f64>], targets: &DMatrix<f64>) -> Result<(Gradients, f64)> {
    let trace = forward_batch(model, inputs)?;
    let loss = loss_mse(&trace.prediction, targets)?;
    let mut g = model.zero_gradients();
    let n = targets.len() as f64;
    let d_pred = (&trace.prediction - targets) * (2.0 / n);
    g.dense_w = d_pred.transpose() * &trace.last_hidden;
    g.dense_b = d_pred.row_sum().transpose();

    let t_len = inputs.len();
    // Gradient reaching each hidden state of the current layer from above.
    let mut d_above: Vec<Option<DMatrix<f64>>> = vec![None; t_len];
    d_above[t_len - 1] = Some(&d_pred * &model.dense_w);

    for (k, w) in model.layers.iter().enumerate().rev() {
        let (h, i) = (w.hidden(), w.input());
        let stacked = w.stacked();
        let b = targets.nrows();
        let mut dw = DMatrix::zeros(4 * h, i + h);
        let mut db = DVector::zeros(4 * h);
        let mut dh_next = DMatrix::zeros(b, h);
        let mut dc_next = DMatrix::zeros(b, h);
        let mut d_below: Vec<Option<DMatrix<f64>>> = vec![None; t_len];
        for t in (0..t_len).rev() {
            let cache = &model_cache(&trace, k, t);
            let mut dh = dh_next.clone();
            if let Some(d) = &d_above[t] {
                dh += d;
            }
            let d_o = dh.component_mul(&cache.tanh_c);
            let dc = dh.component_mul(&cache.o).component_mul(&cache.tanh_c.map(|v| 1.0 - v * v)) + &dc_next;
            let d_f = dc.component_mul(&cache.c_prev);
            let d_u = dc.component_mul(&cache.c_tilde);
            let d_ct = dc.component_mul(&cache.u);
            dc_next = dc.component_mul(&cache.f);

            let mut dz = DMatrix::zeros(b, 4 * h);
            let sig = |s: &DMatrix<f64>| s.map(|v| v * (1.0 - v));
            dz.columns_mut(0, h).copy_from(&d_f.component_mul(&sig(&cache.f)));
            dz.columns_mut(h, h).copy_from(&d_u.component_mul(&sig(&cache.u)));
            dz.columns_mut(2 * h, h).copy_from(&d_ct.component_mul(&cache.c_tilde.map(|v| 1.0 - v * v)));
            dz.columns_mut(3 * h, h).copy_from(&d_o.component_mul(&sig(&cache.o)));

            dw += dz.transpose() * &cache.z;
            db += dz.row_sum().transpose();
            let d_in = &dz * &stacked;
            dh_next = d_in.columns(i, h).into_owned();
            if k > 0 {
                d_below[t] = Some(d_in.columns(0, i).into_owned());
            }
        }
        let gl = &mut g.layers[k];
        gl.w_f.copy_from(&dw.rows(0, h));
        gl.w_u.copy_from(&dw.rows(h, h));
        gl.w_c.copy_from(&dw.rows(2 * h, h));
        gl.w_o.copy_from(&dw.rows(3 * h, h));
        gl.b_f.copy_from(&db.rows(0, h));
        gl.b_u.copy_from(&db.rows(h, h));
        gl.b_c.copy_from(&db.rows(2 * h, h));
        gl.b_o.copy_from(&db.rows(3 * h, h));
        d_above = d_below;
    }
    Ok((g, loss))
}

fn model_cache(trace: &ForwardTrace, layer: usize, t: usize) -> &CellCache {
    &trace.caches[layer][t]
}
