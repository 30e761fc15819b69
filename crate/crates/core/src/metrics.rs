//! Percent error of a surrogate against truth.
//!
//! Errors are absolute by default, `100·|pred − truth|/|truth|`. Entries with
//! zero truth have no percent error and are stored as NaN; means skip them.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::popdata::{format_sig, PopulationSeries, Species, CSV_DIGITS};
use crate::sindy::series_var_names;

/// Percent error per time and tracked quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSeries {
    pub times: Vec<f64>,
    pub quantities: Vec<String>,
    /// `values[k][q]`, NaN where undefined.
    pub values: Vec<Vec<f64>>,
    /// Leading steps removed by [`omit_burn_in`].
    pub burn_in_omitted: usize,
    /// Undefined entries skipped when this series was averaged.
    pub skipped: usize,
}

impl ErrorSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn column(&self, q: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[q]).collect()
    }

    /// Largest defined value of quantity `q`, NaN when none is defined.
    pub fn max(&self, q: usize) -> f64 {
        self.values
            .iter()
            .map(|row| row[q])
            .filter(|v| !v.is_nan())
            .fold(f64::NAN, f64::max)
    }

    /// Mean of the defined values of quantity `q`, NaN when none is defined.
    pub fn mean(&self, q: usize) -> f64 {
        let (sum, n) = self
            .values
            .iter()
            .map(|row| row[q])
            .filter(|v| !v.is_nan())
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    /// `(quantity, max, mean)` per tracked quantity.
    pub fn summary(&self) -> Vec<(String, f64, f64)> {
        (0..self.quantities.len())
            .map(|q| (self.quantities[q].clone(), self.max(q), self.mean(q)))
            .collect()
    }
}

fn check_aligned(pred: &PopulationSeries, truth: &PopulationSeries) -> Result<()> {
    if pred.grid().n_shells() != truth.grid().n_shells() {
        return Err(Error::Shape(format!(
            "prediction has {} shells, truth {}",
            pred.grid().n_shells(),
            truth.grid().n_shells()
        )));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "prediction has {} samples, truth {}",
            pred.len(),
            truth.len()
        )));
    }
    let tol = 1e-9 * truth.dt();
    if let Some(k) = (0..pred.len()).find(|&k| (pred.times()[k] - truth.times()[k]).abs() > tol) {
        return Err(Error::Invalid(format!(
            "times differ at sample {k}: {} vs {}",
            pred.times()[k],
            truth.times()[k]
        )));
    }
    Ok(())
}

/// Percent error of one value; NaN for zero truth.
pub fn percent(pred: f64, truth: f64, signed: bool) -> f64 {
    if truth == 0.0 {
        return f64::NAN;
    }
    let e = 100.0 * (pred - truth) / truth.abs();
    if signed {
        e
    } else {
        e.abs()
    }
}

/// Absolute percent error of every state entry.
pub fn percent_error(pred: &PopulationSeries, truth: &PopulationSeries) -> Result<ErrorSeries> {
    percent_error_with(pred, truth, false)
}

/// Percent error of every state entry, signed (`pred > truth` positive) on request.
pub fn percent_error_with(pred: &PopulationSeries, truth: &PopulationSeries, signed: bool) -> Result<ErrorSeries> {
    check_aligned(pred, truth)?;
    let values = pred
        .states()
        .iter()
        .zip(truth.states())
        .map(|(p, t)| {
            p.as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(&a, &b)| percent(a, b, signed))
                .collect()
        })
        .collect();
    Ok(ErrorSeries {
        times: truth.times().to_vec(),
        quantities: series_var_names(truth.grid()),
        values,
        burn_in_omitted: 0,
        skipped: 0,
    })
}

/// Splits a full-grid error into one `S, D, N` series per shell.
pub fn per_shell(err: &ErrorSeries, n_shells: usize) -> Result<Vec<ErrorSeries>> {
    if err.quantities.len() != 3 * n_shells {
        return Err(Error::Shape(format!(
            "{} quantities for {n_shells} shells",
            err.quantities.len()
        )));
    }
    Ok((0..n_shells)
        .map(|i| ErrorSeries {
            times: err.times.clone(),
            quantities: Species::ALL.iter().map(|s| s.symbol().to_string()).collect(),
            values: err
                .values
                .iter()
                .map(|row| (0..3).map(|s| row[s * n_shells + i]).collect())
                .collect(),
            burn_in_omitted: err.burn_in_omitted,
            skipped: 0,
        })
        .collect())
}

/// Per-time mean over shells of each quantity, skipping undefined entries.
pub fn shell_mean_error(per_shell: &[ErrorSeries]) -> Result<ErrorSeries> {
    let first = per_shell
        .first()
        .ok_or_else(|| Error::Invalid("no shells to average".into()))?;
    for (i, e) in per_shell.iter().enumerate() {
        if e.times.len() != first.times.len()
            || e.quantities.len() != first.quantities.len()
            || e.times.iter().zip(&first.times).any(|(a, b)| (a - b).abs() > 1e-9 * b.abs().max(1e-9))
        {
            return Err(Error::Shape(format!("shell series {i} is not aligned with the first")));
        }
    }
    let nq = first.quantities.len();
    let mut skipped = 0;
    let values = (0..first.len())
        .map(|k| {
            (0..nq)
                .map(|q| {
                    let (mut sum, mut n) = (0.0, 0usize);
                    for e in per_shell {
                        let v = e.values[k][q];
                        if v.is_nan() {
                            skipped += 1;
                        } else {
                            sum += v;
                            n += 1;
                        }
                    }
                    if n == 0 {
                        f64::NAN
                    } else {
                        sum / n as f64
                    }
                })
                .collect()
        })
        .collect();
    Ok(ErrorSeries {
        times: first.times.clone(),
        quantities: first.quantities.clone(),
        values,
        burn_in_omitted: first.burn_in_omitted,
        skipped,
    })
}

/// Drops the first `n` steps.
pub fn omit_burn_in(err: &ErrorSeries, n: usize) -> Result<ErrorSeries> {
    if n >= err.len() {
        return Err(Error::Invalid(format!(
            "cannot omit {n} of {} steps",
            err.len()
        )));
    }
    Ok(ErrorSeries {
        times: err.times[n..].to_vec(),
        quantities: err.quantities.clone(),
        values: err.values[n..].to_vec(),
        burn_in_omitted: err.burn_in_omitted + n,
        skipped: err.skipped,
    })
}

pub const ERROR_HEADER: &str = "time_years,quantity,percent_error";

pub fn write_error_csv<W: Write>(mut out: W, err: &ErrorSeries) -> Result<()> {
    writeln!(out, "{ERROR_HEADER}")?;
    for (t, row) in err.times.iter().zip(&err.values) {
        for (q, v) in err.quantities.iter().zip(row) {
            writeln!(out, "{t},{q},{}", format_sig(*v, CSV_DIGITS))?;
        }
    }
    Ok(())
}

/// Reads an error CSV; quantities keep their first-seen order.
pub fn read_error_csv<R: BufRead>(input: R) -> Result<ErrorSeries> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != ERROR_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{ERROR_HEADER}`"),
        });
    }
    let mut times: Vec<f64> = Vec::new();
    let mut quantities: Vec<String> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let bad = |msg: String| Error::Parse { line: lineno, msg };
        if parts.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", parts.len())));
        }
        let t: f64 = parts[0].trim().parse().map_err(|_| bad(format!("bad time `{}`", parts[0])))?;
        let v: f64 = parts[2].trim().parse().map_err(|_| bad(format!("bad value `{}`", parts[2])))?;
        let q = parts[1].trim();
        if times.last() != Some(&t) {
            times.push(t);
            values.push(Vec::new());
        }
        let row = values.last_mut().expect("row pushed above");
        if times.len() == 1 {
            quantities.push(q.to_string());
        } else if quantities.get(row.len()).map(String::as_str) != Some(q) {
            return Err(bad(format!("unexpected quantity `{q}`")));
        }
        row.push(v);
    }
    if times.is_empty() {
        return Err(Error::Invalid("error file has no rows".into()));
    }
    if let Some(k) = values.iter().position(|r| r.len() != quantities.len()) {
        return Err(Error::Invalid(format!("time {} is missing quantities", times[k])));
    }
    Ok(ErrorSeries {
        times,
        quantities,
        values,
        burn_in_omitted: 0,
        skipped: 0,
    })
}
