//! Sparse identification of polynomial dynamics.
//!
//! A model is `ẋ = Ξᵀ θ(x, t)` where `θ` evaluates a library of candidate
//! functions (monomials up to a total degree, optionally `sin ωt`/`cos ωt`)
//! and `Ξ` is found by sequentially thresholded least squares on finite-
//! difference derivatives of sampled data.
//!
//! Library columns are ordered bias first, then by total degree, then
//! lexicographically by variable index: `1, x1, x2, x1², x1x2, x2², ...`,
//! followed by `sin(ω t), cos(ω t)` per frequency.
//!
//! [`fit`] scales every library column and every derivative column to unit
//! RMS before thresholding, so the threshold is a relative contribution and
//! one value is usable for populations of very different magnitude. The
//! stored coefficients are unscaled.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, RankPolicy};
use crate::ode::{self, Trajectory};
use crate::popdata::{format_sig, PopulationSeries, ShellGrid, Species};

/// Centered finite differences with second-order one-sided stencils at both
/// ends. Rows are samples.
pub fn finite_diff(x: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let t = x.nrows();
    if t < 3 {
        return Err(Error::Invalid(format!(
            "finite differences need at least 3 samples, got {t}"
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Invalid("dt must be positive".into()));
    }
    let mut d = DMatrix::zeros(t, x.ncols());
    for c in 0..x.ncols() {
        let col = x.column(c);
        d[(0, c)] = (-3.0 * col[0] + 4.0 * col[1] - col[2]) / (2.0 * dt);
        for k in 1..t - 1 {
            d[(k, c)] = (col[k + 1] - col[k - 1]) / (2.0 * dt);
        }
        d[(t - 1, c)] = (3.0 * col[t - 1] - 4.0 * col[t - 2] + col[t - 3]) / (2.0 * dt);
    }
    Ok(d)
}

/// Which candidate functions make up the library.
#[derive(Debug, Clone, PartialEq)]
pub struct LibrarySpec {
    pub poly_order: usize,
    pub include_bias: bool,
    /// rad/year
    pub trig_frequencies: Vec<f64>,
    pub n_vars: usize,
}

impl LibrarySpec {
    /// Polynomial library with bias and no trigonometric columns.
    pub fn polynomial(n_vars: usize, poly_order: usize) -> Self {
        Self {
            poly_order,
            include_bias: true,
            trig_frequencies: Vec::new(),
            n_vars,
        }
    }

    pub fn with_trig(mut self, frequencies: Vec<f64>) -> Self {
        self.trig_frequencies = frequencies;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.poly_order == 0 || self.n_vars == 0 {
            return Err(Error::Invalid("library needs poly_order >= 1 and n_vars >= 1".into()));
        }
        if self.trig_frequencies.iter().any(|w| !w.is_finite()) {
            return Err(Error::Invalid("trig frequencies must be finite".into()));
        }
        Ok(())
    }

    /// Variable-index multisets of the polynomial columns, bias (empty) first.
    pub fn monomials(&self) -> Vec<Vec<usize>> {
        fn extend(n: usize, degree: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == degree {
                out.push(cur.clone());
                return;
            }
            for v in start..n {
                cur.push(v);
                extend(n, degree, v, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        if self.include_bias {
            out.push(Vec::new());
        }
        for degree in 1..=self.poly_order {
            extend(self.n_vars, degree, 0, &mut Vec::new(), &mut out);
        }
        out
    }

    pub fn n_columns(&self) -> usize {
        let with_bias = binomial(self.n_vars + self.poly_order, self.poly_order);
        with_bias - usize::from(!self.include_bias) + 2 * self.trig_frequencies.len()
    }

    pub fn column_names(&self, vars: &[String]) -> Vec<String> {
        let mut names: Vec<String> = self
            .monomials()
            .iter()
            .map(|m| monomial_name(m, vars))
            .collect();
        for w in &self.trig_frequencies {
            names.push(format!("sin({w}t)"));
            names.push(format!("cos({w}t)"));
        }
        names
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

fn monomial_name(m: &[usize], vars: &[String]) -> String {
    if m.is_empty() {
        return "1".into();
    }
    let mut parts = Vec::new();
    let mut i = 0;
    while i < m.len() {
        let v = m[i];
        let power = m[i..].iter().take_while(|&&u| u == v).count();
        parts.push(if power == 1 {
            vars[v].clone()
        } else {
            format!("{}^{power}", vars[v])
        });
        i += power;
    }
    parts.join("*")
}

/// Evaluates library columns for one sample into `out`.
fn library_row(monomials: &[Vec<usize>], freqs: &[f64], x: &[f64], t: f64, out: &mut [f64]) {
    for (o, m) in out.iter_mut().zip(monomials) {
        *o = m.iter().map(|&v| x[v]).product();
    }
    let base = monomials.len();
    for (k, w) in freqs.iter().enumerate() {
        out[base + 2 * k] = (w * t).sin();
        out[base + 2 * k + 1] = (w * t).cos();
    }
}

/// Library matrix `Θ`, one row per sample of `x` (`T x n_vars`).
pub fn build_library(x: &DMatrix<f64>, times: &[f64], spec: &LibrarySpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if x.ncols() != spec.n_vars {
        return Err(Error::Shape(format!(
            "data has {} variables, library expects {}",
            x.ncols(),
            spec.n_vars
        )));
    }
    if times.len() != x.nrows() {
        return Err(Error::Shape(format!(
            "{} times for {} samples",
            times.len(),
            x.nrows()
        )));
    }
    let monomials = spec.monomials();
    let ncols = spec.n_columns();
    let mut theta = DMatrix::zeros(x.nrows(), ncols);
    let mut row = vec![0.0; ncols];
    let mut sample = vec![0.0; spec.n_vars];
    for r in 0..x.nrows() {
        for (s, v) in sample.iter_mut().zip(x.row(r).iter()) {
            *s = *v;
        }
        if !sample.iter().all(|v| v.is_finite()) || !times[r].is_finite() {
            return Err(Error::NonFinite(r));
        }
        library_row(&monomials, &spec.trig_frequencies, &sample, times[r], &mut row);
        for (c, v) in row.iter().enumerate() {
            theta[(r, c)] = *v;
        }
    }
    Ok(theta)
}

/// Unregularized least-squares coefficients, failing on rank deficiency.
pub fn least_squares(theta: &DMatrix<f64>, xdot: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    linalg::least_squares(theta, xdot, RankPolicy::default())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StlsqOptions {
    pub threshold: f64,
    pub max_iters: usize,
    pub rank: RankPolicy,
}

impl StlsqOptions {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            max_iters: 10,
            rank: RankPolicy::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StlsqOutcome {
    pub xi: DMatrix<f64>,
    /// Number of active coefficients after each solve.
    pub support_sizes: Vec<usize>,
    /// Whether the support stopped changing before `max_iters`.
    pub converged: bool,
}

/// Sequentially thresholded least squares with default options.
pub fn stlsq(
    theta: &DMatrix<f64>,
    xdot: &DMatrix<f64>,
    threshold: f64,
    max_iters: usize,
) -> Result<DMatrix<f64>> {
    let opts = StlsqOptions {
        max_iters,
        ..StlsqOptions::new(threshold)
    };
    stlsq_with(theta, xdot, &opts).map(|o| o.xi)
}

/// Alternates a least-squares solve on each output's active columns with
/// zeroing every coefficient below the threshold, until no further
/// coefficient drops out. Every output keeps its own active set.
pub fn stlsq_with(theta: &DMatrix<f64>, xdot: &DMatrix<f64>, opts: &StlsqOptions) -> Result<StlsqOutcome> {
    if !(opts.threshold >= 0.0) || opts.max_iters == 0 {
        return Err(Error::Invalid("need threshold >= 0 and max_iters >= 1".into()));
    }
    if theta.nrows() != xdot.nrows() {
        return Err(Error::Shape(format!(
            "library has {} rows, derivatives have {}",
            theta.nrows(),
            xdot.nrows()
        )));
    }
    let (ncols, nout) = (theta.ncols(), xdot.ncols());
    let mut support = vec![vec![true; ncols]; nout];
    let mut xi = linalg::least_squares(theta, xdot, opts.rank)?;
    let mut sizes = vec![ncols * nout];
    let mut converged = false;
    for _ in 0..opts.max_iters {
        let next: Vec<Vec<bool>> = (0..nout)
            .map(|k| (0..ncols).map(|j| support[k][j] && xi[(j, k)].abs() >= opts.threshold).collect())
            .collect();
        if next == support {
            converged = true;
            break;
        }
        if let Some(k) = next.iter().position(|s| !s.contains(&true)) {
            return Err(Error::OverSparsified(k));
        }
        support = next;
        xi = solve_supports(theta, xdot, &support, opts.rank)?;
        sizes.push(support.iter().flatten().filter(|&&a| a).count());
    }
    if !converged {
        // Out of iterations: enforce the threshold without another solve.
        for k in 0..nout {
            for j in 0..ncols {
                if xi[(j, k)].abs() < opts.threshold {
                    xi[(j, k)] = 0.0;
                }
            }
            if (0..ncols).all(|j| xi[(j, k)] == 0.0) {
                return Err(Error::OverSparsified(k));
            }
        }
    }
    Ok(StlsqOutcome {
        xi,
        support_sizes: sizes,
        converged,
    })
}

/// Solves each group of outputs sharing an active set on those columns only.
fn solve_supports(
    theta: &DMatrix<f64>,
    xdot: &DMatrix<f64>,
    support: &[Vec<bool>],
    rank: RankPolicy,
) -> Result<DMatrix<f64>> {
    let mut groups: BTreeMap<&Vec<bool>, Vec<usize>> = BTreeMap::new();
    for (k, s) in support.iter().enumerate() {
        groups.entry(s).or_default().push(k);
    }
    let mut xi = DMatrix::zeros(theta.ncols(), xdot.ncols());
    for (active, outputs) in groups {
        let cols: Vec<usize> = (0..active.len()).filter(|&j| active[j]).collect();
        let sub = theta.select_columns(&cols);
        let rhs = xdot.select_columns(&outputs);
        let sol = linalg::least_squares(&sub, &rhs, rank).map_err(|e| match e {
            Error::RankDeficient { column, .. } => Error::RankDeficient {
                column: cols[column],
                name: format!("column {}", cols[column]),
            },
            other => other,
        })?;
        for (a, &k) in outputs.iter().enumerate() {
            for (b, &j) in cols.iter().enumerate() {
                xi[(j, k)] = sol[(b, a)];
            }
        }
    }
    Ok(xi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scaling {
    /// Threshold applies to raw coefficients.
    None,
    /// Library and derivative columns scaled to unit RMS before thresholding.
    UnitRms,
}

/// Knobs of [`fit_with`]. Defaults are tuned on synthetic population data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub threshold: f64,
    pub max_iters: usize,
    pub scaling: Scaling,
    pub rank: RankPolicy,
    /// Use every `stride`-th sample.
    pub stride: usize,
}

impl FitOptions {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            max_iters: 10,
            scaling: Scaling::UnitRms,
            rank: RankPolicy::MinimumNorm { rcond: 1e-5 },
            stride: 1,
        }
    }
}

/// Identified dynamics `ẏ = Ξᵀ θ(x, t)`; for a closed model the outputs are
/// the derivatives of the inputs in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct SindyModel {
    pub spec: LibrarySpec,
    /// `n_columns x n_outputs`
    pub xi: DMatrix<f64>,
    pub var_names: Vec<String>,
    pub output_names: Vec<String>,
    /// Sampling interval of the training data, years.
    pub dt: f64,
    pub threshold: f64,
}

impl SindyModel {
    pub fn new(spec: LibrarySpec, xi: DMatrix<f64>, var_names: Vec<String>) -> Result<Self> {
        let output_names = var_names.clone();
        let m = Self {
            spec,
            xi,
            var_names,
            output_names,
            dt: 0.0,
            threshold: 0.0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.var_names.len() != self.spec.n_vars {
            return Err(Error::Shape(format!(
                "{} variable names for {} variables",
                self.var_names.len(),
                self.spec.n_vars
            )));
        }
        if self.xi.nrows() != self.spec.n_columns() || self.xi.ncols() != self.output_names.len() {
            return Err(Error::Shape(format!(
                "coefficients are {} x {}, library has {} columns and {} outputs",
                self.xi.nrows(),
                self.xi.ncols(),
                self.spec.n_columns(),
                self.output_names.len()
            )));
        }
        Ok(())
    }

    /// Whether outputs are the time derivatives of the inputs.
    pub fn is_closed(&self) -> bool {
        self.output_names == self.var_names
    }

    pub fn column_names(&self) -> Vec<String> {
        self.spec.column_names(&self.var_names)
    }

    /// Evaluator for repeated right-hand-side calls.
    pub fn evaluator(&self) -> Evaluator<'_> {
        Evaluator {
            model: self,
            monomials: self.spec.monomials(),
            row: vec![0.0; self.spec.n_columns()],
        }
    }

    /// `(column, output, coefficient)` of every nonzero coefficient.
    pub fn nonzeros(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for k in 0..self.xi.ncols() {
            for j in 0..self.xi.nrows() {
                let c = self.xi[(j, k)];
                if c != 0.0 {
                    out.push((j, k, c));
                }
            }
        }
        out
    }

    /// Human-readable ODE, one line per output.
    pub fn equations(&self) -> String {
        let names = self.column_names();
        let mut s = String::new();
        for (k, out) in self.output_names.iter().enumerate() {
            let _ = write!(s, "d{out}/dt =");
            let mut any = false;
            for j in 0..self.xi.nrows() {
                let c = self.xi[(j, k)];
                if c == 0.0 {
                    continue;
                }
                let sign = if c < 0.0 { '-' } else { '+' };
                let mag = format_sig(c.abs(), 6);
                if names[j] == "1" {
                    let _ = write!(s, " {sign} {mag}");
                } else {
                    let _ = write!(s, " {sign} {mag} {}", names[j]);
                }
                any = true;
            }
            if !any {
                s.push_str(" 0");
            }
            s.push('\n');
        }
        s
    }

    /// Text serialization: header fields then one `term` line per nonzero
    /// coefficient, printed with 12 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# leocap sindy model v1\n");
        let _ = writeln!(s, "vars = {}", self.var_names.join(", "));
        let _ = writeln!(s, "outputs = {}", self.output_names.join(", "));
        let _ = writeln!(s, "poly_order = {}", self.spec.poly_order);
        let _ = writeln!(s, "include_bias = {}", self.spec.include_bias);
        let freqs: Vec<String> = self.spec.trig_frequencies.iter().map(|w| format!("{w}")).collect();
        let _ = writeln!(s, "trig_frequencies = {}", freqs.join(", "));
        let _ = writeln!(s, "dt = {}", self.dt);
        let _ = writeln!(s, "threshold = {}", self.threshold);
        let names = self.column_names();
        for (j, k, c) in self.nonzeros() {
            let _ = writeln!(s, "term {} {} {}", names[j], self.output_names[k], format_sig(c, 12));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == "# leocap sindy model v1" => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "missing `# leocap sindy model v1` header".into(),
                })
            }
        }
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        let mut terms = Vec::new();
        for (k, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("term ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::Parse {
                        line: k + 1,
                        msg: "term needs `column output coefficient`".into(),
                    });
                }
                let c: f64 = parts[2].parse().map_err(|_| Error::Parse {
                    line: k + 1,
                    msg: format!("bad coefficient `{}`", parts[2]),
                })?;
                terms.push((k + 1, parts[0].to_string(), parts[1].to_string(), c));
            } else if let Some((key, value)) = line.split_once('=') {
                fields.insert(key.trim(), value.trim());
            } else {
                return Err(Error::Parse {
                    line: k + 1,
                    msg: format!("unrecognized line `{line}`"),
                });
            }
        }
        let get = |key: &str| {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("model file is missing `{key}`")))
        };
        let list = |v: &str| -> Vec<String> {
            v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Invalid(format!("`{key}` is not a number")))
        };
        let var_names = list(get("vars")?);
        let output_names = list(get("outputs")?);
        let trig_frequencies = list(get("trig_frequencies")?)
            .iter()
            .map(|w| w.parse().map_err(|_| Error::Invalid(format!("bad frequency `{w}`"))))
            .collect::<Result<Vec<f64>>>()?;
        let spec = LibrarySpec {
            poly_order: num("poly_order")? as usize,
            include_bias: get("include_bias")? == "true",
            trig_frequencies,
            n_vars: var_names.len(),
        };
        spec.validate()?;
        let columns = spec.column_names(&var_names);
        let mut xi = DMatrix::zeros(columns.len(), output_names.len());
        for (line, col, out, c) in terms {
            let j = columns.iter().position(|n| *n == col).ok_or_else(|| Error::Parse {
                line,
                msg: format!("unknown library column `{col}`"),
            })?;
            let k = output_names.iter().position(|n| *n == out).ok_or_else(|| Error::Parse {
                line,
                msg: format!("unknown output `{out}`"),
            })?;
            xi[(j, k)] = c;
        }
        let m = Self {
            spec,
            xi,
            var_names,
            output_names,
            dt: num("dt")?,
            threshold: num("threshold")?,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Reusable buffers for evaluating a model's right-hand side.
pub struct Evaluator<'a> {
    model: &'a SindyModel,
    monomials: Vec<Vec<usize>>,
    row: Vec<f64>,
}

impl Evaluator<'_> {
    /// Writes `Ξᵀ θ(x, t)` into `out` (length `n_outputs`).
    pub fn eval(&mut self, t: f64, x: &[f64], out: &mut [f64]) {
        library_row(&self.monomials, &self.model.spec.trig_frequencies, x, t, &mut self.row);
        let xi = &self.model.xi;
        for (k, o) in out.iter_mut().enumerate() {
            *o = xi.column(k).iter().zip(&self.row).map(|(c, r)| c * r).sum();
        }
    }
}

fn name_column(e: Error, spec: &LibrarySpec, vars: &[String]) -> Error {
    match e {
        Error::RankDeficient { column, .. } => Error::RankDeficient {
            column,
            name: spec.column_names(vars)[column].clone(),
        },
        other => other,
    }
}

fn vstack(parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    if parts.len() == 1 {
        return parts[0].clone();
    }
    let rows = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, parts[0].ncols());
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.nrows()).copy_from(p);
        r += p.nrows();
    }
    out
}

fn rms(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    (values.map(|v| v * v).sum::<f64>() / n as f64).sqrt()
}

/// Fits `Ξ` to samples `x` (`T x n_vars`) at uniform `times`, predicting the
/// derivatives of the variables listed in `outputs`.
pub fn fit_matrix(
    x: &DMatrix<f64>,
    times: &[f64],
    var_names: &[String],
    outputs: &[usize],
    spec: &LibrarySpec,
    opts: &FitOptions,
) -> Result<SindyModel> {
    fit_trajectories(&[(x, times)], var_names, outputs, spec, opts)
}

/// Like [`fit_matrix`] for several trajectories of the same system sampled
/// at the same interval. Derivatives are taken per trajectory and the
/// regression rows stacked.
pub fn fit_trajectories(
    trajectories: &[(&DMatrix<f64>, &[f64])],
    var_names: &[String],
    outputs: &[usize],
    spec: &LibrarySpec,
    opts: &FitOptions,
) -> Result<SindyModel> {
    if opts.stride == 0 {
        return Err(Error::Invalid("stride must be at least 1".into()));
    }
    if trajectories.is_empty() {
        return Err(Error::Invalid("no trajectories to fit".into()));
    }
    let mut thetas = Vec::with_capacity(trajectories.len());
    let mut xdots = Vec::with_capacity(trajectories.len());
    let mut dt = 0.0;
    for (k, (x, times)) in trajectories.iter().enumerate() {
        let rows: Vec<usize> = (0..x.nrows()).step_by(opts.stride).collect();
        let x = x.select_rows(&rows);
        let times: Vec<f64> = rows.iter().map(|&r| times[r]).collect();
        if times.len() < 3 {
            return Err(Error::Invalid(format!(
                "trajectory {k} has fewer than 3 samples"
            )));
        }
        let h = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        if k == 0 {
            dt = h;
        } else if (h - dt).abs() > 1e-9 * dt {
            return Err(Error::Invalid(format!(
                "trajectory {k} is sampled every {h}, the first every {dt}"
            )));
        }
        xdots.push(finite_diff(&x.select_columns(outputs), h)?);
        thetas.push(build_library(&x, &times, spec)?);
    }
    let theta = vstack(&thetas);
    let xdot = vstack(&xdots);
    let stl = StlsqOptions {
        threshold: opts.threshold,
        max_iters: opts.max_iters,
        rank: opts.rank,
    };
    let xi = match opts.scaling {
        Scaling::None => stlsq_with(&theta, &xdot, &stl).map_err(|e| name_column(e, spec, var_names))?.xi,
        Scaling::UnitRms => {
            let t = theta.nrows();
            let unit = |s: f64| if s > 0.0 && s.is_finite() { s } else { 1.0 };
            let col_scale: Vec<f64> = theta.column_iter().map(|c| unit(rms(c.iter().copied(), t))).collect();
            let out_scale: Vec<f64> = xdot.column_iter().map(|c| unit(rms(c.iter().copied(), t))).collect();
            let mut ts = theta;
            for (j, mut c) in ts.column_iter_mut().enumerate() {
                c /= col_scale[j];
            }
            let mut ys = xdot;
            for (k, mut c) in ys.column_iter_mut().enumerate() {
                c /= out_scale[k];
            }
            let mut xi = stlsq_with(&ts, &ys, &stl).map_err(|e| name_column(e, spec, var_names))?.xi;
            for k in 0..xi.ncols() {
                for j in 0..xi.nrows() {
                    xi[(j, k)] *= out_scale[k] / col_scale[j];
                }
            }
            xi
        }
    };
    let model = SindyModel {
        spec: spec.clone(),
        xi,
        var_names: var_names.to_vec(),
        output_names: outputs.iter().map(|&k| var_names[k].clone()).collect(),
        dt,
        threshold: opts.threshold,
    };
    model.validate()?;
    Ok(model)
}

/// Variable names of a series: `S, D, N` for one shell, else `S_1 .. N_n`.
pub fn series_var_names(grid: &ShellGrid) -> Vec<String> {
    let n = grid.n_shells();
    Species::ALL
        .iter()
        .flat_map(|sp| {
            (1..=n).map(move |i| {
                if n == 1 {
                    sp.symbol().to_string()
                } else {
                    format!("{}_{i}", sp.symbol())
                }
            })
        })
        .collect()
}

/// Fits a closed model of every state variable of `series`.
pub fn fit(series: &PopulationSeries, spec: &LibrarySpec, threshold: f64) -> Result<SindyModel> {
    fit_with(series, spec, &FitOptions::new(threshold))
}

pub fn fit_with(series: &PopulationSeries, spec: &LibrarySpec, opts: &FitOptions) -> Result<SindyModel> {
    let names = series_var_names(series.grid());
    let outputs: Vec<usize> = (0..names.len()).collect();
    fit_matrix(&series.to_matrix(), series.times(), &names, &outputs, spec, opts)
}

/// RK4 integration of a closed model. Divergence is reported through
/// [`Trajectory::diverged_at`] with the finite part of the trajectory.
pub fn simulate(model: &SindyModel, x0: &[f64], t0: f64, t_end: f64, dt: f64) -> Result<Trajectory> {
    if !model.is_closed() {
        return Err(Error::Invalid("model outputs are not its inputs' derivatives".into()));
    }
    if x0.len() != model.spec.n_vars {
        return Err(Error::Shape(format!(
            "initial state has {} entries, model has {} variables",
            x0.len(),
            model.spec.n_vars
        )));
    }
    let steps = ode::step_count(t0, t_end, dt)?;
    let mut ev = model.evaluator();
    Ok(ode::rk4(|t, x, dx| ev.eval(t, x, dx), x0, t0, dt, steps))
}

// Shell batches ---------------------------------------------------------------

/// State indices of the 9 regressors of `shell` (1-based) in a species-major
/// state of `n` shells: `S, D, N` of shells `i−1, i, i+1`, species-major.
pub fn batch_columns(shell: usize, n: usize) -> [usize; 9] {
    let mut out = [0; 9];
    for (s, sp) in Species::ALL.iter().enumerate() {
        for (o, neighbour) in [shell - 1, shell, shell + 1].iter().enumerate() {
            out[3 * s + o] = sp.index() * n + neighbour - 1;
        }
    }
    out
}

/// Positions of the middle shell's `S, D, N` within [`batch_columns`].
pub const BATCH_OUTPUTS: [usize; 3] = [1, 4, 7];

#[derive(Debug, Clone)]
pub enum ShellFit {
    Fit(SindyModel),
    Unfit(String),
}

#[derive(Debug, Clone)]
pub struct ShellBatchModel {
    pub grid: ShellGrid,
    /// Interior shells `2..=n−1`, in order.
    pub shells: Vec<(usize, ShellFit)>,
}

impl ShellBatchModel {
    pub fn model(&self, shell: usize) -> Option<&SindyModel> {
        self.shells.iter().find_map(|(s, f)| match f {
            ShellFit::Fit(m) if *s == shell => Some(m),
            _ => None,
        })
    }

    pub fn unfit(&self) -> Vec<(usize, &str)> {
        self.shells
            .iter()
            .filter_map(|(s, f)| match f {
                ShellFit::Unfit(reason) => Some((*s, reason.as_str())),
                _ => None,
            })
            .collect()
    }

    pub fn fitted_shells(&self) -> Vec<usize> {
        self.shells
            .iter()
            .filter(|(_, f)| matches!(f, ShellFit::Fit(_)))
            .map(|(s, _)| *s)
            .collect()
    }
}

/// Fits one 9-variable model per interior shell from the shell and its two
/// neighbours; each model predicts only the middle shell's derivatives.
/// Shells whose data cannot support a fit are recorded as unfit with a reason.
pub fn fit_shell_batches(
    series: &PopulationSeries,
    spec: &LibrarySpec,
    thresholds: &[f64],
    opts: &FitOptions,
) -> Result<ShellBatchModel> {
    let grid = *series.grid();
    let n = grid.n_shells();
    if n < 3 {
        return Err(Error::Invalid("batched fitting needs at least 3 shells".into()));
    }
    if thresholds.len() != n {
        return Err(Error::Shape(format!(
            "{} thresholds for {n} shells",
            thresholds.len()
        )));
    }
    if spec.n_vars != 9 {
        return Err(Error::Invalid("batch library must have 9 variables".into()));
    }
    let all = series.to_matrix();
    let names = series_var_names(&grid);
    let mut shells = Vec::with_capacity(n - 2);
    for shell in 2..n {
        let cols = batch_columns(shell, n);
        let x = all.select_columns(&cols);
        let vars: Vec<String> = cols.iter().map(|&c| names[c].clone()).collect();
        let flat = x.column_iter().position(|c| {
            let mean = c.mean();
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len() as f64;
            var.sqrt() <= 1e-12 * mean.abs().max(1.0)
        });
        let fit = if let Some(c) = flat {
            ShellFit::Unfit(format!("zero-variance regressors ({})", vars[c]))
        } else {
            let o = FitOptions {
                threshold: thresholds[shell - 1],
                ..*opts
            };
            match fit_matrix(&x, series.times(), &vars, &BATCH_OUTPUTS, spec, &o) {
                Ok(m) => ShellFit::Fit(m),
                Err(e) => ShellFit::Unfit(e.to_string()),
            }
        };
        shells.push((shell, fit));
    }
    Ok(ShellBatchModel { grid, shells })
}

/// How shells without their own model, and neighbour regressors, are fed
/// while integrating a batch model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchCoupling {
    /// Fitted shells read each other's integrated state.
    Coupled,
    /// Every shell integrates only its own variables; neighbours follow data.
    Driven,
}

/// Linear interpolation of a series at time `t`, clamped to its span.
fn interpolate(series: &PopulationSeries, t: f64, out: &mut [f64]) {
    let times = series.times();
    let pos = ((t - times[0]) / series.dt()).clamp(0.0, (times.len() - 1) as f64);
    let k = (pos.floor() as usize).min(times.len() - 2);
    let w = pos - k as f64;
    let (a, b) = (series.states()[k].as_slice(), series.states()[k + 1].as_slice());
    for (o, (x, y)) in out.iter_mut().zip(a.iter().zip(b)) {
        *o = x + w * (y - x);
    }
}

/// Output of [`simulate_batches`] on the full time grid.
#[derive(Debug, Clone)]
pub struct BatchTrajectory {
    pub times: Vec<f64>,
    /// Full `3n` states; a shell's entries are NaN after it diverged.
    pub states: Vec<Vec<f64>>,
    /// `(shell, time)` of every fitted shell whose integration blew up.
    pub diverged: Vec<(usize, f64)>,
}

/// Integrates the full `3n` state under a batch model. Shells with no model
/// (the two boundary shells and any unfit shell) follow `truth`, as do all
/// neighbours in [`BatchCoupling::Driven`] mode, where every shell is
/// integrated on its own so one divergence does not end the others.
pub fn simulate_batches(
    batch: &ShellBatchModel,
    truth: &PopulationSeries,
    coupling: BatchCoupling,
    t0: f64,
    t_end: f64,
    dt: f64,
) -> Result<BatchTrajectory> {
    let n = batch.grid.n_shells();
    if truth.grid().n_shells() != n {
        return Err(Error::Shape("truth and model grids differ".into()));
    }
    let steps = ode::step_count(t0, t_end, dt)?;
    let fitted = batch.fitted_shells();
    let mut owned = vec![false; n + 1];
    for &s in &fitted {
        owned[s] = true;
    }
    let times: Vec<f64> = (0..=steps).map(|k| t0 + k as f64 * dt).collect();
    let mut states: Vec<Vec<f64>> = times
        .iter()
        .map(|&t| {
            let mut x = vec![0.0; 3 * n];
            interpolate(truth, t, &mut x);
            x
        })
        .collect();
    let x0 = states[0].clone();
    let mut forced = vec![0.0; 3 * n];
    let mut regs = [0.0; 9];
    let mut d = [0.0; 3];
    let mut diverged = Vec::new();

    // Copies a shell's integrated samples into the full grid, NaN past a blow-up.
    let mut store = |cols: &[usize], traj: &Trajectory, pick: &dyn Fn(&[f64], usize) -> f64| {
        for (k, state) in states.iter_mut().enumerate() {
            for (i, &c) in cols.iter().enumerate() {
                state[c] = traj.states.get(k).map_or(f64::NAN, |s| pick(s, i));
            }
        }
    };

    match coupling {
        BatchCoupling::Driven => {
            for &shell in &fitted {
                let cols = batch_columns(shell, n);
                let own: Vec<usize> = BATCH_OUTPUTS.iter().map(|&p| cols[p]).collect();
                let mut ev = batch.model(shell).expect("fitted").evaluator();
                let start: Vec<f64> = own.iter().map(|&c| x0[c]).collect();
                let traj = ode::rk4(
                    |t, x, dx| {
                        interpolate(truth, t, &mut forced);
                        for (r, &c) in regs.iter_mut().zip(cols.iter()) {
                            *r = forced[c];
                        }
                        for (o, &p) in BATCH_OUTPUTS.iter().enumerate() {
                            regs[p] = x[o];
                        }
                        ev.eval(t, &regs, dx);
                    },
                    &start,
                    t0,
                    dt,
                    steps,
                );
                if let Some(t) = traj.diverged_at {
                    diverged.push((shell, t));
                }
                store(&own, &traj, &|s, i| s[i]);
            }
        }
        BatchCoupling::Coupled => {
            let mut evals: Vec<([usize; 9], Evaluator)> = fitted
                .iter()
                .map(|&s| (batch_columns(s, n), batch.model(s).expect("fitted").evaluator()))
                .collect();
            let traj = ode::rk4(
                |t, x, dx| {
                    interpolate(truth, t, &mut forced);
                    dx.fill(0.0);
                    for (cols, ev) in evals.iter_mut() {
                        for (r, &c) in regs.iter_mut().zip(cols.iter()) {
                            *r = if owned[c % n + 1] { x[c] } else { forced[c] };
                        }
                        ev.eval(t, &regs, &mut d);
                        for (o, &p) in BATCH_OUTPUTS.iter().enumerate() {
                            dx[cols[p]] = d[o];
                        }
                    }
                },
                &x0,
                t0,
                dt,
                steps,
            );
            if let Some(t) = traj.diverged_at {
                diverged.extend(fitted.iter().map(|&s| (s, t)));
            }
            let own: Vec<usize> = (0..3 * n).filter(|&c| owned[c % n + 1]).collect();
            store(&own, &traj, &|s, i| s[own[i]]);
        }
    }
    Ok(BatchTrajectory {
        times,
        states,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn derivative_of_constant_and_quadratic() {
        let c = col(&[3.0; 6]);
        assert!(finite_diff(&c, 0.1).unwrap().iter().all(|&v| v == 0.0));
        let t: Vec<f64> = (0..20).map(|k| k as f64 * 0.1).collect();
        let q = col(&t.iter().map(|t| t * t).collect::<Vec<_>>());
        let d = finite_diff(&q, 0.1).unwrap();
        for k in 0..20 {
            assert!((d[(k, 0)] - 2.0 * t[k]).abs() < 1e-12, "k={k}");
        }
        assert!(finite_diff(&col(&[1.0, 2.0]), 0.1).is_err());
    }

    #[test]
    fn derivative_of_sine_is_second_order() {
        let dt = 0.01;
        let t: Vec<f64> = (0..700).map(|k| k as f64 * dt).collect();
        let x = col(&t.iter().map(|t| t.sin()).collect::<Vec<_>>());
        let d = finite_diff(&x, dt).unwrap();
        let err = t.iter().enumerate().map(|(k, t)| (d[(k, 0)] - t.cos()).abs()).fold(0.0, f64::max);
        assert!(err < 4e-5, "{err}");
    }

    #[test]
    fn library_layout() {
        let spec = LibrarySpec::polynomial(2, 2);
        let names: Vec<String> = vec!["x1".into(), "x2".into()];
        assert_eq!(spec.column_names(&names), ["1", "x1", "x2", "x1^2", "x1*x2", "x2^2"]);
        let x = DMatrix::from_row_slice(1, 2, &[2.0, 3.0]);
        let th = build_library(&x, &[0.0], &spec).unwrap();
        assert_eq!(th.row(0).iter().copied().collect::<Vec<_>>(), [1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(LibrarySpec::polynomial(3, 3).n_columns(), 20);
        let mut nb = LibrarySpec::polynomial(3, 2);
        nb.include_bias = false;
        assert_eq!(nb.n_columns(), 9);
        let trig = LibrarySpec::polynomial(1, 1).with_trig(vec![2.0]);
        let th = build_library(&col(&[5.0]), &[0.5], &trig).unwrap();
        assert_eq!(th.ncols(), 4);
        assert!((th[(0, 2)] - 1f64.sin()).abs() < 1e-15);
        assert!((th[(0, 3)] - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn library_rejects_non_finite_rows() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, f64::NAN, 2.0]);
        assert!(matches!(
            build_library(&x, &[0.0, 1.0, 2.0], &LibrarySpec::polynomial(1, 2)),
            Err(Error::NonFinite(1))
        ));
    }

    #[test]
    fn column_count_matches_multiset_formula() {
        for n in 1..=12usize {
            for order in 1..=3usize {
                let spec = LibrarySpec::polynomial(n, order);
                // Multisets of size <= order drawn from n variables.
                let expect: usize = (0..=order).map(|d| binomial(n + d - 1, d)).sum();
                assert_eq!(spec.n_columns(), expect);
                assert_eq!(spec.monomials().len(), expect);
            }
        }
    }

    fn decay_data(rate: f64) -> (DMatrix<f64>, Vec<f64>) {
        let dt = 1e-3;
        let t: Vec<f64> = (0..2001).map(|k| k as f64 * dt).collect();
        let x = col(&t.iter().map(|t| 1.5 * (rate * t).exp()).collect::<Vec<_>>());
        (x, t)
    }

    #[test]
    fn stlsq_zero_threshold_is_least_squares() {
        let (x, t) = decay_data(-2.0);
        let th = build_library(&x, &t, &LibrarySpec::polynomial(1, 2)).unwrap();
        let xd = finite_diff(&x, 1e-3).unwrap();
        let a = least_squares(&th, &xd).unwrap();
        let b = stlsq(&th, &xd, 0.0, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stlsq_keeps_only_linear_decay() {
        let (x, t) = decay_data(-2.0);
        let th = build_library(&x, &t, &LibrarySpec::polynomial(1, 2)).unwrap();
        let xd = finite_diff(&x, 1e-3).unwrap();
        let xi = stlsq(&th, &xd, 0.1, 10).unwrap();
        assert_eq!(xi[(0, 0)], 0.0);
        assert_eq!(xi[(2, 0)], 0.0);
        assert!((xi[(1, 0)] + 2.0).abs() < 1e-5, "{}", xi[(1, 0)]);
    }

    #[test]
    fn stlsq_reports_over_sparsification() {
        let (x, t) = decay_data(-2.0);
        let th = build_library(&x, &t, &LibrarySpec::polynomial(1, 2)).unwrap();
        let xd = finite_diff(&x, 1e-3).unwrap();
        assert!(matches!(stlsq(&th, &xd, 1e9, 10), Err(Error::OverSparsified(0))));
    }

    #[test]
    fn constant_series_fits_zero() {
        let grid = ShellGrid::new(1, 200.0, 1800.0).unwrap();
        let states = vec![crate::SpeciesVector::from_vec(vec![5.0, 6.0, 7.0], 1).unwrap(); 20];
        let times = (0..20).map(|k| k as f64 * 0.1).collect();
        let s = PopulationSeries::new(times, states, grid, "c").unwrap();
        let m = fit(&s, &LibrarySpec::polynomial(3, 2), 0.0).unwrap();
        assert!(m.xi.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn simulate_decay_and_blow_up() {
        let names = vec!["x".to_string()];
        let mut xi = DMatrix::zeros(3, 1);
        xi[(1, 0)] = -1.0;
        let m = SindyModel::new(LibrarySpec::polynomial(1, 2), xi, names.clone()).unwrap();
        let tr = simulate(&m, &[1.0], 0.0, 2.0, 1e-3).unwrap();
        for (t, s) in tr.times.iter().zip(&tr.states) {
            assert!((s[0] - (-t).exp()).abs() < 1e-8);
        }

        let zero = SindyModel::new(LibrarySpec::polynomial(1, 2), DMatrix::zeros(3, 1), names.clone()).unwrap();
        let tr = simulate(&zero, &[4.0], 0.0, 1.0, 0.1).unwrap();
        assert!(tr.states.iter().all(|s| s[0] == 4.0));

        let mut xi = DMatrix::zeros(3, 1);
        xi[(2, 0)] = 1.0;
        let sq = SindyModel::new(LibrarySpec::polynomial(1, 2), xi, names).unwrap();
        let tr = simulate(&sq, &[1.0], 0.0, 2.0, 1e-3).unwrap();
        let t = tr.diverged_at.expect("blow-up");
        assert!((t - 1.0).abs() < 0.01, "{t}");
    }

    #[test]
    fn model_text_round_trip() {
        let names: Vec<String> = ["S", "D", "N"].iter().map(|s| s.to_string()).collect();
        let spec = LibrarySpec::polynomial(3, 2).with_trig(vec![2.0 * std::f64::consts::PI / 11.0]);
        let mut xi = DMatrix::zeros(spec.n_columns(), 3);
        xi[(0, 0)] = 500.0;
        xi[(1, 0)] = -0.2;
        xi[(1, 1)] = 0.01;
        xi[(4, 2)] = 1.234567890123456e-7;
        xi[(11, 1)] = -3.5;
        let mut m = SindyModel::new(spec, xi, names).unwrap();
        m.dt = 5.0 / 365.25;
        m.threshold = 0.05;
        let text = m.to_text();
        assert!(text.contains("term S^2 N 1.23456789012e-7"), "{text}");
        let back = SindyModel::from_text(&text).unwrap();
        assert_eq!(back.nonzeros().len(), 5);
        assert_eq!(back.xi[(4, 2)], 1.23456789012e-7);
        assert_eq!(back.xi[(0, 0)], 500.0);
        assert_eq!(back.dt, m.dt);
        assert!(m.equations().starts_with("dS/dt = + 500 - 0.2 S\n"));
        assert!(SindyModel::from_text("nonsense").is_err());
    }

    #[test]
    fn batch_columns_layout() {
        // 4 shells: S_1..S_4 = 0..3, D = 4..7, N = 8..11.
        assert_eq!(batch_columns(2, 4), [0, 1, 2, 4, 5, 6, 8, 9, 10]);
        assert_eq!(batch_columns(3, 4), [1, 2, 3, 5, 6, 7, 9, 10, 11]);
    }
}
