use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, forward_batch, loss_mse, Gradients, LstmConfig, LstmModel, Normalization};
use crate::error::{Error, Result};
use crate::popdata::PopulationSeries;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Min-max scales every column to `[0, 1]`. With `norm` given it is reused
/// unchanged and values outside the fitted range pass through unclamped.
/// Constant columns get a width-1 range centred on their value.
pub fn normalize(values: &DMatrix<f64>, norm: Option<&Normalization>) -> Result<(DMatrix<f64>, Normalization)> {
    if let Some(r) = values.row_iter().position(|r| !r.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite(r));
    }
    let norm = match norm {
        Some(n) => {
            if n.min.len() != values.ncols() {
                return Err(Error::Shape(format!(
                    "normalization has {} features, data has {}",
                    n.min.len(),
                    values.ncols()
                )));
            }
            n.clone()
        }
        None => {
            if values.nrows() == 0 {
                return Err(Error::Invalid("cannot fit normalization on no rows".into()));
            }
            Normalization::fit(values)
        }
    };
    let scaled = DMatrix::from_fn(values.nrows(), values.ncols(), |r, c| {
        (values[(r, c)] - norm.min[c]) / norm.width(c)
    });
    Ok((scaled, norm))
}

pub fn denormalize(scaled: &DMatrix<f64>, norm: &Normalization) -> Result<DMatrix<f64>> {
    if norm.min.len() != scaled.ncols() {
        return Err(Error::Shape(format!(
            "normalization has {} features, data has {}",
            norm.min.len(),
            scaled.ncols()
        )));
    }
    Ok(DMatrix::from_fn(scaled.nrows(), scaled.ncols(), |r, c| {
        scaled[(r, c)] * norm.width(c) + norm.min[c]
    }))
}

/// Sliding windows over a `T x F` matrix; window `m` covers rows
/// `starts[m] .. starts[m] + seq_len` and its target is the next row.
#[derive(Debug, Clone)]
pub struct Windows {
    pub data: DMatrix<f64>,
    pub seq_len: usize,
    pub starts: Vec<usize>,
}

impl Windows {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn input(&self, m: usize) -> DMatrix<f64> {
        self.data.rows(self.starts[m], self.seq_len).into_owned()
    }

    pub fn target(&self, m: usize) -> DVector<f64> {
        self.data.row(self.starts[m] + self.seq_len).transpose()
    }

    /// Time-major inputs (`seq_len` matrices of `batch x F`) and the
    /// `batch x F` targets of the selected windows.
    pub fn batch(&self, idx: &[usize]) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
        let f = self.data.ncols();
        let inputs = (0..self.seq_len)
            .map(|t| DMatrix::from_fn(idx.len(), f, |r, c| self.data[(self.starts[idx[r]] + t, c)]))
            .collect();
        let targets = DMatrix::from_fn(idx.len(), f, |r, c| self.data[(self.starts[idx[r]] + self.seq_len, c)]);
        (inputs, targets)
    }
}

/// All `T − seq_len` windows with stride 1.
pub fn make_sequences(scaled: &DMatrix<f64>, seq_len: usize) -> Result<Windows> {
    if seq_len == 0 || scaled.nrows() <= seq_len {
        return Err(Error::Invalid(format!(
            "{} samples cannot hold a window of {seq_len} plus a target",
            scaled.nrows()
        )));
    }
    Ok(Windows {
        data: scaled.clone(),
        seq_len,
        starts: (0..scaled.nrows() - seq_len).collect(),
    })
}

/// First and second moment estimates, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }
}

/// One Adam update of `w` in place; `t` is the 1-based step number.
pub fn adam_update(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64) {
    debug_assert!(t >= 1);
    let c1 = 1.0 - BETA1.powf(t as f64);
    let c2 = 1.0 - BETA2.powf(t as f64);
    for k in 0..w.len() {
        m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
        v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
        let m_hat = m[k] / c1;
        let v_hat = v[k] / c2;
        w[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Advances `state.t` and updates every model parameter in place.
pub fn adam_step(model: &mut LstmModel, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    let n = model.n_params();
    if state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(format!("optimizer state has {} entries, model {n}", state.m.len())));
    }
    state.t += 1;
    let t = state.t;
    let mut offset = 0;
    for (w, g) in model.tensors_mut().into_iter().zip(grads.tensors()) {
        if w.len() != g.len() {
            return Err(Error::Shape("gradient does not match weights".into()));
        }
        let k = w.len();
        adam_update(w, g, &mut state.m[offset..offset + k], &mut state.v[offset..offset + k], lr, t);
        offset += k;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch with the lowest validation loss; its weights are returned.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub wall_seconds: f64,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss` rows; wall time is left out so the file
    /// only depends on seed and data.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for (k, (tr, va)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            s.push_str(&format!("{},{tr},{va}\n", k + 1));
        }
        s
    }
}

struct Split {
    train: Windows,
    val: Windows,
}

/// Trains on the state matrices of `datasets` (see [`train_matrices`]).
pub fn train(config: LstmConfig, datasets: &[PopulationSeries], train_ratio: f64) -> Result<(LstmModel, TrainReport)> {
    let mats: Vec<(String, DMatrix<f64>)> =
        datasets.iter().map(|s| (s.label().to_string(), s.to_matrix())).collect();
    train_matrices(config, &mats, train_ratio)
}

/// Each dataset is split chronologically: windows whose target lies in the
/// first `floor(train_ratio · T)` rows train, the rest validate. Validation
/// windows may read training rows but never train on validation targets.
/// Normalization is fitted on the union of the training rows.
///
/// Each epoch visits the datasets in order and, within one, shuffles its
/// training windows into mini-batches. Hidden state is reset per window.
pub fn train_matrices(
    config: LstmConfig,
    datasets: &[(String, DMatrix<f64>)],
    train_ratio: f64,
) -> Result<(LstmModel, TrainReport)> {
    train_matrices_with(config, datasets, train_ratio, &mut |_, _, _| {})
}

/// [`train_matrices`] with a callback receiving `(epoch, train_loss, val_loss)`.
pub fn train_matrices_with(
    config: LstmConfig,
    datasets: &[(String, DMatrix<f64>)],
    train_ratio: f64,
    progress: &mut dyn FnMut(usize, f64, f64),
) -> Result<(LstmModel, TrainReport)> {
    config.validate()?;
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::Invalid(format!("train ratio {train_ratio} outside (0, 1)")));
    }
    if datasets.is_empty() {
        return Err(Error::Invalid("no datasets".into()));
    }
    let f = config.input_size;
    if config.output_size != f {
        return Err(Error::Shape(format!(
            "forecasting needs output size {} equal to input size {f}",
            config.output_size
        )));
    }
    let seq = config.sequence_length;
    let mut cuts = Vec::with_capacity(datasets.len());
    for (name, m) in datasets {
        if m.ncols() != f {
            return Err(Error::Shape(format!("dataset {name} has {} features, config {f}", m.ncols())));
        }
        let cut = (train_ratio * m.nrows() as f64).floor() as usize;
        if cut <= seq || cut >= m.nrows() {
            return Err(Error::Invalid(format!(
                "dataset {name} is too short: {} samples, {cut} for training, window {seq}",
                m.nrows()
            )));
        }
        cuts.push(cut);
    }

    let mut train_rows = DMatrix::zeros(cuts.iter().sum(), f);
    let mut r = 0;
    for ((_, m), &cut) in datasets.iter().zip(&cuts) {
        train_rows.rows_mut(r, cut).copy_from(&m.rows(0, cut));
        r += cut;
    }
    let (_, norm) = normalize(&train_rows, None)?;
    drop(train_rows);

    let mut splits = Vec::with_capacity(datasets.len());
    for ((_, m), &cut) in datasets.iter().zip(&cuts) {
        let (scaled, _) = normalize(m, Some(&norm))?;
        let all = make_sequences(&scaled, seq)?;
        let (train_starts, val_starts): (Vec<usize>, Vec<usize>) =
            all.starts.iter().partition(|&&s| s + seq < cut);
        let train_starts = train_starts.into_iter().step_by(config.window_stride).collect();
        splits.push(Split {
            train: Windows {
                data: scaled.clone(),
                seq_len: seq,
                starts: train_starts,
            },
            val: Windows {
                data: scaled,
                seq_len: seq,
                starts: val_starts,
            },
        });
    }

    let started = Instant::now();
    let mut model = LstmModel::new(config.clone())?;
    model.norm = norm;
    let mut adam = AdamState::new(model.n_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_ba7c4);
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        stopped_epoch: 0,
        wall_seconds: 0.0,
    };
    let mut best: Option<(f64, LstmModel)> = None;

    for epoch in 1..=config.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for split in &splits {
            let mut order: Vec<usize> = (0..split.train.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let (inputs, targets) = split.train.batch(chunk);
                let (grads, loss) = backward(&model, &inputs, &targets)?;
                adam_step(&mut model, &grads, &mut adam, config.learning_rate)?;
                sum += loss * chunk.len() as f64;
                count += chunk.len();
            }
        }
        let val = evaluate(&model, splits.iter().map(|s| &s.val), config.batch_size.max(256))?;
        let train_loss = sum / count.max(1) as f64;
        progress(epoch, train_loss, val);
        report.train_loss.push(train_loss);
        report.val_loss.push(val);
        report.stopped_epoch = epoch;
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, model.clone()));
            report.best_epoch = epoch;
        }
        if let Some(p) = config.early_stop_patience {
            if epoch - report.best_epoch >= p {
                break;
            }
        }
    }
    if config.early_stop_patience.is_some() {
        if let Some((_, m)) = best {
            model = m;
        }
    } else {
        report.best_epoch = report.stopped_epoch;
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Mean squared error over every window of every set.
fn evaluate<'a>(model: &LstmModel, sets: impl Iterator<Item = &'a Windows>, chunk: usize) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for w in sets {
        let idx: Vec<usize> = (0..w.len()).collect();
        for c in idx.chunks(chunk) {
            let (inputs, targets) = w.batch(c);
            let trace = forward_batch(model, &inputs)?;
            sum += loss_mse(&trace.prediction, &targets)? * targets.len() as f64;
            count += targets.len();
        }
    }
    if count == 0 {
        return Err(Error::Invalid("no validation windows".into()));
    }
    Ok(sum / count as f64)
}

/// Closed-loop forecast from a `seq_len x F` window in physical units.
/// Each prediction is appended and the window slides by one; the result is
/// `horizon x F` in physical units.
pub fn forecast(model: &LstmModel, seed_window: &DMatrix<f64>, horizon: usize) -> Result<DMatrix<f64>> {
    let (seq, f) = (model.config.sequence_length, model.config.input_size);
    if seed_window.shape() != (seq, f) {
        return Err(Error::Shape(format!(
            "seed window is {:?}, model needs {seq} x {f}",
            seed_window.shape()
        )));
    }
    if model.config.output_size != f {
        return Err(Error::Shape("closed-loop forecasting needs output size equal to input size".into()));
    }
    let (mut window, _) = normalize(seed_window, Some(&model.norm))?;
    let mut out = DMatrix::zeros(horizon, f);
    for k in 0..horizon {
        let inputs: Vec<DMatrix<f64>> = window.row_iter().map(|r| DMatrix::from_iterator(1, f, r.iter().copied())).collect();
        let y = forward_batch(model, &inputs)?.prediction;
        out.row_mut(k).copy_from(&y.row(0));
        let mut next = DMatrix::zeros(seq, f);
        next.rows_mut(0, seq - 1).copy_from(&window.rows(1, seq - 1));
        next.row_mut(seq - 1).copy_from(&y.row(0));
        window = next;
    }
    denormalize(&out, &model.norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let m = DMatrix::from_column_slice(3, 1, &[0.0, 5.0, 10.0]);
        let (s, n) = normalize(&m, None).unwrap();
        assert_eq!(s[(1, 0)], 0.5);
        let back = denormalize(&s, &n).unwrap();
        assert!((back - &m).abs().max() < 1e-12);
        let v = DMatrix::from_column_slice(2, 1, &[-5.0, 15.0]);
        let (sv, _) = normalize(&v, Some(&n)).unwrap();
        assert_eq!(sv.as_slice(), &[-0.5, 1.5]);
    }

    #[test]
    fn constant_feature_is_flagged() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 3.0, 2.0]);
        let (s, n) = normalize(&m, None).unwrap();
        assert_eq!(n.degenerate, vec![0]);
        assert_eq!(s.column(0).as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn sequences() {
        let m = DMatrix::from_fn(100, 2, |r, c| (r * 10 + c) as f64);
        let w = make_sequences(&m, 50).unwrap();
        assert_eq!(w.len(), 50);
        assert_eq!(w.input(1), m.rows(1, 50).into_owned());
        assert_eq!(w.target(1), m.row(51).transpose());
        assert_eq!(make_sequences(&m.rows(0, 51).into_owned(), 50).unwrap().len(), 1);
        assert!(make_sequences(&m.rows(0, 50).into_owned(), 50).is_err());
    }

    #[test]
    fn adam_first_step() {
        let mut w = vec![0.5; 4];
        let g = vec![1.0; 4];
        let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
        adam_update(&mut w, &g, &mut m, &mut v, 1e-3, 1);
        for x in w {
            assert!((x - (0.5 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        }
        let mut w = vec![0.25, -3.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        for t in 1..=20 {
            adam_update(&mut w, &[0.0, 0.0], &mut m, &mut v, 1e-2, t);
        }
        assert_eq!(w, vec![0.25, -3.0]);
    }
}
