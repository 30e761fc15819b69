//! Plain-text checkpoint: header, `key = value` configuration lines, then
//! `tensor <name> <rows> <cols>` blocks with one row-major row per line.
//! Floats use shortest round-trip formatting, so a reload is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{LstmConfig, LstmLayerWeights, LstmModel, Normalization};
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "# leocap lstm checkpoint v1";

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

fn push_tensor(out: &mut String, name: &str, rows: usize, cols: usize, at: impl Fn(usize, usize) -> f64) {
    let _ = writeln!(out, "tensor {name} {rows} {cols}");
    for r in 0..rows {
        let row: Vec<f64> = (0..cols).map(|c| at(r, c)).collect();
        let _ = writeln!(out, "{}", join(&row));
    }
}

pub fn write_checkpoint(model: &LstmModel) -> String {
    let c = &model.config;
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_HEADER}");
    let _ = writeln!(s, "input_size = {}", c.input_size);
    let layers: Vec<String> = c.layers.iter().map(|h| h.to_string()).collect();
    let _ = writeln!(s, "layers = {}", layers.join(", "));
    let _ = writeln!(s, "sequence_length = {}", c.sequence_length);
    let _ = writeln!(s, "output_size = {}", c.output_size);
    let _ = writeln!(s, "batch_size = {}", c.batch_size);
    let _ = writeln!(s, "epochs = {}", c.epochs);
    let patience = c.early_stop_patience.map_or("none".to_string(), |p| p.to_string());
    let _ = writeln!(s, "early_stop_patience = {patience}");
    let _ = writeln!(s, "learning_rate = {}", c.learning_rate);
    let _ = writeln!(s, "seed = {}", c.seed);
    let _ = writeln!(s, "window_stride = {}", c.window_stride);
    let _ = writeln!(s, "norm_min = {}", join(&model.norm.min));
    let _ = writeln!(s, "norm_max = {}", join(&model.norm.max));
    let degenerate: Vec<String> = model.norm.degenerate.iter().map(|i| i.to_string()).collect();
    let _ = writeln!(s, "norm_degenerate = {}", degenerate.join(", "));
    for (k, l) in model.layers.iter().enumerate() {
        for (g, w) in ["w_f", "w_u", "w_c", "w_o"].iter().zip([&l.w_f, &l.w_u, &l.w_c, &l.w_o]) {
            push_tensor(&mut s, &format!("layer{k}.{g}"), w.nrows(), w.ncols(), |r, c| w[(r, c)]);
        }
        for (g, b) in ["b_f", "b_u", "b_c", "b_o"].iter().zip([&l.b_f, &l.b_u, &l.b_c, &l.b_o]) {
            push_tensor(&mut s, &format!("layer{k}.{g}"), b.len(), 1, |r, _| b[r]);
        }
    }
    push_tensor(&mut s, "dense.w", model.dense_w.nrows(), model.dense_w.ncols(), |r, c| model.dense_w[(r, c)]);
    push_tensor(&mut s, "dense.b", model.dense_b.len(), 1, |r, _| model.dense_b[r]);
    s
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        for (i, l) in self.iter.by_ref() {
            self.line = i + 1;
            if !l.trim().is_empty() {
                return Ok(l.trim());
            }
        }
        Err(self.err("unexpected end of checkpoint"))
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn value(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next()?;
        match l.split_once('=') {
            Some((k, v)) if k.trim() == key => Ok(v.trim()),
            _ => Err(self.err(format!("expected `{key} = ...`"))),
        }
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.value(key)?;
        v.parse().map_err(|_| self.err(format!("bad value for {key}: {v}")))
    }

    fn floats(&self, s: &str) -> Result<Vec<f64>> {
        s.split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| self.err(format!("bad number {t}"))))
            .collect()
    }

    fn tensor(&mut self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let head = self.next()?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "tensor" || parts[1] != name {
            return Err(self.err(format!("expected tensor {name}")));
        }
        let shape = (parts[2].parse::<usize>().ok(), parts[3].parse::<usize>().ok());
        if shape != (Some(rows), Some(cols)) {
            return Err(self.err(format!("tensor {name} is {}x{}, expected {rows}x{cols}", parts[2], parts[3])));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let l = self.next()?;
            let row = self.floats(l)?;
            if row.len() != cols {
                return Err(self.err(format!("tensor {name}: row has {} values, expected {cols}", row.len())));
            }
            data.extend(row);
        }
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<DVector<f64>> {
        let m = self.tensor(name, len, 1)?;
        Ok(DVector::from_column_slice(m.as_slice()))
    }
}

pub fn read_checkpoint(text: &str) -> Result<LstmModel> {
    let mut p = Lines {
        iter: text.lines().enumerate(),
        line: 0,
    };
    if p.next()? != CHECKPOINT_HEADER {
        return Err(p.err("not a leocap lstm checkpoint (v1)"));
    }
    let input_size = p.parsed("input_size")?;
    let layers_text = p.value("layers")?;
    let layers = layers_text
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| p.err(format!("bad layer size {t}"))))
        .collect::<Result<Vec<_>>>()?;
    let sequence_length = p.parsed("sequence_length")?;
    let output_size = p.parsed("output_size")?;
    let batch_size = p.parsed("batch_size")?;
    let epochs = p.parsed("epochs")?;
    let patience = p.value("early_stop_patience")?;
    let early_stop_patience = match patience {
        "none" => None,
        v => Some(v.parse().map_err(|_| p.err(format!("bad patience {v}")))?),
    };
    let learning_rate = p.parsed("learning_rate")?;
    let seed = p.parsed("seed")?;
    let window_stride = p.parsed("window_stride")?;
    let config = LstmConfig {
        input_size,
        layers,
        sequence_length,
        output_size,
        batch_size,
        epochs,
        early_stop_patience,
        learning_rate,
        seed,
        window_stride,
    };
    config.validate()?;
    let min_text = p.value("norm_min")?;
    let min = p.floats(min_text)?;
    let max_text = p.value("norm_max")?;
    let max = p.floats(max_text)?;
    let degenerate = p
        .value("norm_degenerate")?
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| match t.parse::<usize>() {
            Ok(i) if i < input_size => Ok(i),
            _ => Err(p.err(format!("bad degenerate feature {t}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if min.len() != input_size || max.len() != input_size {
        return Err(p.err(format!("normalization needs {input_size} entries")));
    }

    let mut weights = Vec::with_capacity(config.layers.len());
    let mut input = input_size;
    for (k, &h) in config.layers.iter().enumerate() {
        let n = input + h;
        let w_f = p.tensor(&format!("layer{k}.w_f"), h, n)?;
        let w_u = p.tensor(&format!("layer{k}.w_u"), h, n)?;
        let w_c = p.tensor(&format!("layer{k}.w_c"), h, n)?;
        let w_o = p.tensor(&format!("layer{k}.w_o"), h, n)?;
        let b_f = p.vector(&format!("layer{k}.b_f"), h)?;
        let b_u = p.vector(&format!("layer{k}.b_u"), h)?;
        let b_c = p.vector(&format!("layer{k}.b_c"), h)?;
        let b_o = p.vector(&format!("layer{k}.b_o"), h)?;
        weights.push(LstmLayerWeights {
            w_f,
            w_u,
            w_c,
            w_o,
            b_f,
            b_u,
            b_c,
            b_o,
        });
        input = h;
    }
    let dense_w = p.tensor("dense.w", output_size, input)?;
    let dense_b = p.vector("dense.b", output_size)?;
    if p.next().is_ok() {
        return Err(p.err("trailing content after the last tensor"));
    }
    let model = LstmModel {
        config,
        layers: weights,
        dense_w,
        dense_b,
        norm: Normalization { min, max, degenerate },
    };
    model.validate()?;
    Ok(model)
}

pub fn save_checkpoint(model: &LstmModel, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LstmModel> {
    read_checkpoint(&std::fs::read_to_string(path)?)
}
