//! Population time series: shell grid, per-shell S/D/N state vectors,
//! ensemble statistics and the long-format ensemble CSV.
//!
//! States are stored species-major, `[S_1..S_n, D_1..D_n, N_1..N_n]`, so each
//! species is a contiguous slice. Counts are reals because ensemble means and
//! model outputs are fractional.
//!
//! Averaging over members and summing over shells are both linear, so
//! `totals(ensemble_stats(m).mean)` and the mean of `totals` over members are
//! the same series; callers may apply them in either order.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Altitude discretization of LEO into equal-width spherical shells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShellGrid {
    n_shells: usize,
    base_altitude: f64,
    shell_width: f64,
}

impl ShellGrid {
    pub fn new(n_shells: usize, base_altitude: f64, shell_width: f64) -> Result<Self> {
        if n_shells == 0 {
            return Err(Error::Invalid("grid needs at least one shell".into()));
        }
        if !(shell_width > 0.0) || !base_altitude.is_finite() {
            return Err(Error::Invalid(format!(
                "bad grid geometry: base {base_altitude} km, width {shell_width} km"
            )));
        }
        Ok(Self {
            n_shells,
            base_altitude,
            shell_width,
        })
    }

    /// 36 shells of 50 km from 200 km to 2000 km.
    pub fn leo() -> Self {
        Self {
            n_shells: 36,
            base_altitude: 200.0,
            shell_width: 50.0,
        }
    }

    pub fn n_shells(&self) -> usize {
        self.n_shells
    }

    pub fn base_altitude(&self) -> f64 {
        self.base_altitude
    }

    pub fn shell_width(&self) -> f64 {
        self.shell_width
    }

    pub fn top_altitude(&self) -> f64 {
        self.base_altitude + self.n_shells as f64 * self.shell_width
    }

    /// `[lower, upper)` altitude of shell `i` (1-based).
    pub fn shell_bounds(&self, shell: usize) -> Result<(f64, f64)> {
        if shell == 0 || shell > self.n_shells {
            return Err(Error::UnknownShell {
                shell,
                n_shells: self.n_shells,
            });
        }
        let lo = self.base_altitude + (shell - 1) as f64 * self.shell_width;
        Ok((lo, lo + self.shell_width))
    }

    pub fn mid_altitude(&self, shell: usize) -> Result<f64> {
        let (lo, hi) = self.shell_bounds(shell)?;
        Ok(0.5 * (lo + hi))
    }

    /// One shell spanning the whole grid, used for totals.
    pub fn collapsed(&self) -> Self {
        Self {
            n_shells: 1,
            base_altitude: self.base_altitude,
            shell_width: self.n_shells as f64 * self.shell_width,
        }
    }

    pub fn state_len(&self) -> usize {
        3 * self.n_shells
    }
}

impl Default for ShellGrid {
    fn default() -> Self {
        Self::leo()
    }
}

/// The three object families tracked per shell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Species {
    Active,
    Derelict,
    Debris,
}

impl Species {
    pub const ALL: [Species; 3] = [Species::Active, Species::Derelict, Species::Debris];

    pub fn index(self) -> usize {
        match self {
            Species::Active => 0,
            Species::Derelict => 1,
            Species::Debris => 2,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Species::Active => "S",
            Species::Derelict => "D",
            Species::Debris => "N",
        }
    }
}

impl fmt::Display for Species {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Species-major state `[S.., D.., N..]` of length `3 * n_shells`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesVector(Vec<f64>);

impl SpeciesVector {
    pub fn zeros(n_shells: usize) -> Self {
        Self(vec![0.0; 3 * n_shells])
    }

    pub fn from_vec(values: Vec<f64>, n_shells: usize) -> Result<Self> {
        if values.len() != 3 * n_shells {
            return Err(Error::Shape(format!(
                "state has {} entries, expected {}",
                values.len(),
                3 * n_shells
            )));
        }
        Ok(Self(values))
    }

    /// Builds a state from per-species per-shell slices.
    pub fn from_parts(s: &[f64], d: &[f64], n: &[f64]) -> Result<Self> {
        if s.len() != d.len() || s.len() != n.len() {
            return Err(Error::Shape("S, D, N lengths differ".into()));
        }
        let mut v = Vec::with_capacity(3 * s.len());
        v.extend_from_slice(s);
        v.extend_from_slice(d);
        v.extend_from_slice(n);
        Ok(Self(v))
    }

    pub fn n_shells(&self) -> usize {
        self.0.len() / 3
    }

    pub fn species(&self, sp: Species) -> &[f64] {
        let n = self.n_shells();
        &self.0[sp.index() * n..(sp.index() + 1) * n]
    }

    pub fn species_mut(&mut self, sp: Species) -> &mut [f64] {
        let n = self.n_shells();
        &mut self.0[sp.index() * n..(sp.index() + 1) * n]
    }

    /// Value of `sp` in shell `shell` (1-based).
    pub fn get(&self, sp: Species, shell: usize) -> f64 {
        self.0[sp.index() * self.n_shells() + shell - 1]
    }

    pub fn set(&mut self, sp: Species, shell: usize, value: f64) {
        let n = self.n_shells();
        self.0[sp.index() * n + shell - 1] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// All entries non-negative. Fitted or forecast states may violate this;
    /// it is reported, never clamped.
    pub fn is_physical(&self) -> bool {
        self.0.iter().all(|&v| v >= 0.0)
    }

    pub fn totals(&self) -> [f64; 3] {
        Species::ALL.map(|sp| self.species(sp).iter().sum())
    }
}

/// Uniformly sampled trajectory of species vectors over a shell grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSeries {
    times: Vec<f64>,
    states: Vec<SpeciesVector>,
    grid: ShellGrid,
    label: String,
}

/// Relative tolerance on the spacing of a uniform time grid.
pub const GRID_TOLERANCE: f64 = 1e-9;

/// Index of the first step whose spacing deviates from the mean spacing.
fn non_uniform_step(times: &[f64]) -> Option<usize> {
    let t = times.len();
    let dt = (times[t - 1] - times[0]) / (t - 1) as f64;
    if !(dt > 0.0) {
        return Some(1);
    }
    (0..t - 1)
        .find(|&k| !((times[k + 1] - times[k] - dt).abs() < GRID_TOLERANCE * dt))
        .map(|k| k + 1)
}

impl PopulationSeries {
    pub fn new(
        times: Vec<f64>,
        states: Vec<SpeciesVector>,
        grid: ShellGrid,
        label: impl Into<String>,
    ) -> Result<Self> {
        if times.len() != states.len() {
            return Err(Error::Shape(format!(
                "{} times but {} states",
                times.len(),
                states.len()
            )));
        }
        if times.len() < 2 {
            return Err(Error::Invalid("series needs at least two samples".into()));
        }
        if let Some(bad) = states.iter().position(|s| s.n_shells() != grid.n_shells()) {
            return Err(Error::Shape(format!(
                "state {bad} has {} shells, grid has {}",
                states[bad].n_shells(),
                grid.n_shells()
            )));
        }
        if let Some(index) = non_uniform_step(&times) {
            return Err(Error::NonUniformGrid { sim: 0, index });
        }
        Ok(Self {
            times,
            states,
            grid,
            label: label.into(),
        })
    }

    /// Builds a series from a `T x 3n` row-per-sample matrix.
    pub fn from_matrix(
        times: Vec<f64>,
        values: &DMatrix<f64>,
        grid: ShellGrid,
        label: impl Into<String>,
    ) -> Result<Self> {
        if values.ncols() != grid.state_len() {
            return Err(Error::Shape(format!(
                "matrix has {} columns, grid needs {}",
                values.ncols(),
                grid.state_len()
            )));
        }
        let states = (0..values.nrows())
            .map(|r| SpeciesVector(values.row(r).iter().copied().collect()))
            .collect();
        Self::new(times, states, grid, label)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[SpeciesVector] {
        &self.states
    }

    pub fn grid(&self) -> &ShellGrid {
        &self.grid
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> f64 {
        (self.times[self.len() - 1] - self.times[0]) / (self.len() - 1) as f64
    }

    /// `T x 3n` matrix, one row per sample.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let cols = self.grid.state_len();
        DMatrix::from_fn(self.len(), cols, |r, c| self.states[r].0[c])
    }

    /// Time history of one species in one shell (1-based).
    pub fn trace(&self, sp: Species, shell: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.get(sp, shell)).collect()
    }

    /// Samples `range` of the series.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if end > self.len() || end < start + 2 {
            return Err(Error::Invalid(format!(
                "slice {start}..{end} of a series with {} samples",
                self.len()
            )));
        }
        Ok(Self {
            times: self.times[start..end].to_vec(),
            states: self.states[start..end].to_vec(),
            grid: self.grid,
            label: self.label.clone(),
        })
    }

    /// Every `stride`-th sample starting at the first.
    pub fn subsample(&self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Invalid("stride must be at least 1".into()));
        }
        let idx: Vec<usize> = (0..self.len()).step_by(stride).collect();
        Self::new(
            idx.iter().map(|&k| self.times[k]).collect(),
            idx.iter().map(|&k| self.states[k].clone()).collect(),
            self.grid,
            self.label.clone(),
        )
    }

    /// Index of the sample at `time`, if one lies within grid tolerance.
    pub fn index_of(&self, time: f64) -> Option<usize> {
        let dt = self.dt();
        let k = ((time - self.times[0]) / dt).round();
        if k < 0.0 || k as usize >= self.len() {
            return None;
        }
        let k = k as usize;
        ((self.times[k] - time).abs() <= 1e-6 * dt).then_some(k)
    }

    fn same_axis(&self, other: &Self) -> bool {
        if self.grid != other.grid || self.len() != other.len() {
            return false;
        }
        let tol = GRID_TOLERANCE * self.dt();
        self.times
            .iter()
            .zip(&other.times)
            .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// Per-entry ensemble mean and population standard deviation.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub mean: PopulationSeries,
    pub sigma: PopulationSeries,
    pub n_members: usize,
}

fn check_shared_axis(members: &[PopulationSeries]) -> Result<()> {
    let first = members
        .first()
        .ok_or_else(|| Error::Invalid("empty ensemble".into()))?;
    for (k, m) in members.iter().enumerate().skip(1) {
        if !first.same_axis(m) {
            return Err(Error::Shape(format!(
                "member {k} ({}) does not share times and grid with member 0",
                m.label
            )));
        }
    }
    Ok(())
}

/// Mean and divide-by-n standard deviation across members, per time and entry.
///
/// Uses Welford's single-pass update.
pub fn ensemble_stats(members: &[PopulationSeries]) -> Result<EnsembleStats> {
    check_shared_axis(members)?;
    let first = &members[0];
    let width = first.grid.state_len();
    let mut means = Vec::with_capacity(first.len());
    let mut sigmas = Vec::with_capacity(first.len());
    for k in 0..first.len() {
        let mut mean = vec![0.0; width];
        let mut m2 = vec![0.0; width];
        for (count, member) in members.iter().enumerate() {
            let n = (count + 1) as f64;
            for (j, &x) in member.states[k].0.iter().enumerate() {
                let delta = x - mean[j];
                mean[j] += delta / n;
                m2[j] += delta * (x - mean[j]);
            }
        }
        let n = members.len() as f64;
        sigmas.push(SpeciesVector(
            m2.iter().map(|v| (v.max(0.0) / n).sqrt()).collect(),
        ));
        means.push(SpeciesVector(mean));
    }
    Ok(EnsembleStats {
        mean: PopulationSeries {
            times: first.times.clone(),
            states: means,
            grid: first.grid,
            label: "mean".into(),
        },
        sigma: PopulationSeries {
            times: first.times.clone(),
            states: sigmas,
            grid: first.grid,
            label: "sigma".into(),
        },
        n_members: members.len(),
    })
}

/// Splits members into consecutive groups of `group_size` and averages each.
pub fn group_average(
    members: &[PopulationSeries],
    group_size: usize,
) -> Result<Vec<PopulationSeries>> {
    if group_size == 0 {
        return Err(Error::Invalid("group size must be at least 1".into()));
    }
    let remainder = members.len() % group_size;
    if remainder != 0 {
        return Err(Error::GroupSize {
            count: members.len(),
            group_size,
            remainder,
        });
    }
    check_shared_axis(members)?;
    members
        .chunks(group_size)
        .enumerate()
        .map(|(g, group)| {
            let first = &group[0];
            let states = (0..first.len())
                .map(|k| {
                    let mut acc = vec![0.0; first.grid.state_len()];
                    for m in group {
                        for (a, x) in acc.iter_mut().zip(&m.states[k].0) {
                            *a += x;
                        }
                    }
                    acc.iter_mut().for_each(|a| *a /= group_size as f64);
                    SpeciesVector(acc)
                })
                .collect();
            Ok(PopulationSeries {
                times: first.times.clone(),
                states,
                grid: first.grid,
                label: format!("group {}", g + 1),
            })
        })
        .collect()
}

/// Sums every species over all shells, giving a series on a one-shell grid.
pub fn totals(series: &PopulationSeries) -> PopulationSeries {
    PopulationSeries {
        times: series.times.clone(),
        states: series
            .states
            .iter()
            .map(|s| SpeciesVector(s.totals().to_vec()))
            .collect(),
        grid: series.grid.collapsed(),
        label: series.label.clone(),
    }
}

/// Formats `v` rounded to `digits` significant digits, printed in the
/// shortest form that reads back to the rounded value.
pub fn format_sig(v: f64, digits: usize) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "NaN".into() } else { format!("{v}") };
    }
    let rounded: f64 = format!("{:.*e}", digits.saturating_sub(1), v)
        .parse()
        .expect("formatted float parses");
    let plain = format!("{rounded}");
    let sci = format!("{rounded:e}");
    if plain.len() <= sci.len() {
        plain
    } else {
        sci
    }
}

/// Significant digits written for population values.
pub const CSV_DIGITS: usize = 9;

pub const ENSEMBLE_HEADER: &str = "sim_id,time_years,shell,S,D,N";

/// Writes members as long-format CSV, numbering simulations from 1.
pub fn write_ensemble<W: Write>(out: W, members: &[PopulationSeries]) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "{ENSEMBLE_HEADER}")?;
    for (m, series) in members.iter().enumerate() {
        for (t, state) in series.times.iter().zip(&series.states) {
            for shell in 1..=series.grid.n_shells() {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    m + 1,
                    t,
                    shell,
                    format_sig(state.get(Species::Active, shell), CSV_DIGITS),
                    format_sig(state.get(Species::Derelict, shell), CSV_DIGITS),
                    format_sig(state.get(Species::Debris, shell), CSV_DIGITS),
                )?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_ensemble(path: impl AsRef<Path>, members: &[PopulationSeries]) -> Result<()> {
    write_ensemble(std::fs::File::create(path)?, members)
}

struct PendingSim {
    id: u64,
    times: Vec<f64>,
    states: Vec<SpeciesVector>,
    current: Option<(f64, SpeciesVector, usize)>,
}

impl PendingSim {
    fn new(id: u64) -> Self {
        Self {
            id,
            times: Vec::new(),
            states: Vec::new(),
            current: None,
        }
    }

    fn close_block(&mut self, n_shells: usize, line: usize) -> Result<()> {
        if let Some((t, state, filled)) = self.current.take() {
            if filled != n_shells {
                return Err(Error::Parse {
                    line,
                    msg: format!(
                        "sim {} at t = {t} has {filled} of {n_shells} shells",
                        self.id
                    ),
                });
            }
            self.times.push(t);
            self.states.push(state);
        }
        Ok(())
    }

    fn finish(mut self, grid: ShellGrid, line: usize) -> Result<PopulationSeries> {
        self.close_block(grid.n_shells(), line)?;
        if self.times.len() < 2 {
            return Err(Error::Parse {
                line,
                msg: format!("sim {} has fewer than two time steps", self.id),
            });
        }
        if let Some(index) = non_uniform_step(&self.times) {
            return Err(Error::NonUniformGrid { sim: self.id, index });
        }
        Ok(PopulationSeries {
            times: self.times,
            states: self.states,
            grid,
            label: format!("sim {}", self.id),
        })
    }
}

/// Parses long-format ensemble CSV into one series per simulation id.
pub fn read_ensemble<R: BufRead>(input: R, grid: ShellGrid) -> Result<Vec<PopulationSeries>> {
    let n = grid.n_shells();
    let mut lines = input.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty file".into() })?;
    if header.trim_end_matches('\r') != ENSEMBLE_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{ENSEMBLE_HEADER}`"),
        });
    }
    let mut done = Vec::new();
    let mut sim: Option<PendingSim> = None;
    let mut line_no = 1;
    for line in lines {
        line_no += 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", fields.len())));
        }
        let id: u64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad sim_id `{}`", fields[0])))?;
        if id == 0 {
            return Err(bad("sim_id must be >= 1".into()));
        }
        let num = |k: usize, what: &str| -> Result<f64> {
            let v: f64 = fields[k]
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad {what} `{}`", fields[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(format!("non-finite {what}")))
            }
        };
        let t = num(1, "time_years")?;
        let shell: usize = fields[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad shell `{}`", fields[2])))?;
        if shell == 0 || shell > n {
            return Err(Error::UnknownShell { shell, n_shells: n });
        }
        let (s, d, nn) = (num(3, "S")?, num(4, "D")?, num(5, "N")?);

        match &sim {
            Some(p) if p.id == id => {}
            Some(p) if p.id > id => return Err(bad(format!("sim_id {id} after {}", p.id))),
            _ => {
                if let Some(p) = sim.take() {
                    done.push(p.finish(grid, line_no - 1)?);
                }
                sim = Some(PendingSim::new(id));
            }
        }
        let p = sim.as_mut().expect("pending sim");
        let new_block = match &p.current {
            Some((ct, _, _)) => t != *ct,
            None => true,
        };
        if new_block {
            if let Some((ct, _, _)) = &p.current {
                if t < *ct {
                    return Err(bad(format!("time {t} before {ct} in sim {id}")));
                }
            }
            p.close_block(n, line_no)?;
            p.current = Some((t, SpeciesVector::zeros(n), 0));
        }
        let (_, state, filled) = p.current.as_mut().expect("open block");
        if shell != *filled + 1 {
            return Err(bad(format!(
                "expected shell {} at t = {t}, found {shell}",
                *filled + 1
            )));
        }
        state.set(Species::Active, shell, s);
        state.set(Species::Derelict, shell, d);
        state.set(Species::Debris, shell, nn);
        *filled += 1;
    }
    if let Some(p) = sim.take() {
        done.push(p.finish(grid, line_no)?);
    }
    if done.is_empty() {
        return Err(Error::Parse {
            line: line_no,
            msg: "no data rows".into(),
        });
    }
    Ok(done)
}

/// Reads an ensemble CSV file.
pub fn ingest_ensemble(path: impl AsRef<Path>, grid: ShellGrid) -> Result<Vec<PopulationSeries>> {
    let f = std::fs::File::open(path)?;
    read_ensemble(BufReader::new(f), grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: &[[f64; 3]], label: &str) -> PopulationSeries {
        let grid = ShellGrid::new(1, 200.0, 50.0).unwrap();
        let times = (0..values.len()).map(|k| k as f64 * 0.5).collect();
        let states = values
            .iter()
            .map(|v| SpeciesVector::from_vec(v.to_vec(), 1).unwrap())
            .collect();
        PopulationSeries::new(times, states, grid, label).unwrap()
    }

    #[test]
    fn default_grid_top_is_2000_km() {
        let g = ShellGrid::leo();
        assert_eq!(g.top_altitude(), 2000.0);
        assert_eq!(g.shell_bounds(1).unwrap(), (200.0, 250.0));
        assert_eq!(g.shell_bounds(36).unwrap(), (1950.0, 2000.0));
        assert!(g.shell_bounds(37).is_err());
        assert!(ShellGrid::new(0, 200.0, 50.0).is_err());
        assert!(ShellGrid::new(3, 200.0, 0.0).is_err());
    }

    #[test]
    fn species_vector_layout_is_species_major() {
        let v = SpeciesVector::from_parts(&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(v.get(Species::Derelict, 2), 4.0);
        assert_eq!(v.totals(), [3.0, 7.0, 11.0]);
        assert!(SpeciesVector::from_vec(vec![1.0; 5], 2).is_err());
    }

    #[test]
    fn series_rejects_non_uniform_times() {
        let grid = ShellGrid::new(1, 200.0, 50.0).unwrap();
        let states = vec![SpeciesVector::zeros(1); 3];
        let err = PopulationSeries::new(vec![0.0, 1.0, 3.0], states.clone(), grid, "x");
        assert!(matches!(err, Err(Error::NonUniformGrid { .. })));
        assert!(PopulationSeries::new(vec![0.0], vec![states[0].clone()], grid, "x").is_err());
    }

    #[test]
    fn stats_of_identical_members_have_zero_sigma() {
        let a = series(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], "a");
        let st = ensemble_stats(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(st.mean.states(), a.states());
        assert!(st.sigma.states().iter().flat_map(|s| s.as_slice()).all(|&v| v == 0.0));
        assert_eq!(st.n_members, 3);
    }

    #[test]
    fn stats_of_one_and_three() {
        let a = series(&[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]], "a");
        let b = series(&[[3.0, 3.0, 3.0], [3.0, 3.0, 3.0]], "b");
        let st = ensemble_stats(&[a, b]).unwrap();
        for s in st.mean.states() {
            assert_eq!(s.as_slice(), &[2.0, 2.0, 2.0]);
        }
        for s in st.sigma.states() {
            assert_eq!(s.as_slice(), &[1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn stats_reject_mismatched_members() {
        let a = series(&[[1.0; 3], [1.0; 3]], "a");
        let b = series(&[[1.0; 3], [1.0; 3], [1.0; 3]], "b");
        assert!(ensemble_stats(&[a, b]).is_err());
        assert!(ensemble_stats(&[]).is_err());
    }

    #[test]
    fn group_average_pairs() {
        let m = [
            series(&[[1.0, 2.0, 3.0], [2.0, 2.0, 2.0]], "1"),
            series(&[[3.0, 4.0, 5.0], [4.0, 4.0, 4.0]], "2"),
            series(&[[10.0, 0.0, 1.0], [0.0, 0.0, 0.0]], "3"),
            series(&[[20.0, 2.0, 0.0], [1.0, 1.0, 1.0]], "4"),
        ];
        let g = group_average(&m, 2).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].states()[0].as_slice(), &[2.0, 3.0, 4.0]);
        assert_eq!(g[0].states()[1].as_slice(), &[3.0, 3.0, 3.0]);
        assert_eq!(g[1].states()[0].as_slice(), &[15.0, 1.0, 0.5]);
        assert_eq!(g[1].states()[1].as_slice(), &[0.5, 0.5, 0.5]);

        let same = group_average(&m, 1).unwrap();
        for (a, b) in same.iter().zip(&m) {
            assert_eq!(a.states(), b.states());
        }
        match group_average(&m, 3) {
            Err(Error::GroupSize { remainder, .. }) => assert_eq!(remainder, 1),
            other => panic!("expected group size error, got {other:?}"),
        }
    }

    #[test]
    fn thousand_members_make_hundred_groups() {
        let m: Vec<_> = (0..1000).map(|k| series(&[[k as f64; 3], [1.0; 3]], "m")).collect();
        assert_eq!(group_average(&m, 10).unwrap().len(), 100);
    }

    #[test]
    fn totals_of_uniform_active_population() {
        let grid = ShellGrid::leo();
        let mut state = SpeciesVector::zeros(36);
        state.species_mut(Species::Active).fill(2500.0);
        let s = PopulationSeries::new(vec![0.0, 1.0], vec![state; 2], grid, "x").unwrap();
        let t = totals(&s);
        assert_eq!(t.grid().n_shells(), 1);
        assert_eq!(t.grid().top_altitude(), 2000.0);
        for st in t.states() {
            assert_eq!(st.as_slice(), &[90000.0, 0.0, 0.0]);
        }
        let single = series(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], "s");
        assert_eq!(totals(&single), single);
    }

    #[test]
    fn format_sig_rounds_to_digits() {
        assert_eq!(format_sig(2500.0, 9), "2500");
        assert_eq!(format_sig(0.1234567891234, 9), "0.123456789");
        assert_eq!(format_sig(123456789012.0, 9), "123456789000");
        assert_eq!(format_sig(1.5e-20, 9), "1.5e-20");
        assert_eq!(format_sig(f64::NAN, 9), "NaN");
    }

    fn csv(rows: &[&str]) -> Vec<u8> {
        let mut s = String::from(ENSEMBLE_HEADER);
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s.into_bytes()
    }

    #[test]
    fn reads_minimal_file() {
        let grid = ShellGrid::new(2, 200.0, 50.0).unwrap();
        let data = csv(&[
            "1,0,1,1,2,3",
            "1,0,2,4,5,6",
            "1,0.5,1,1,2,3",
            "1,0.5,2,4,5,6",
            "1,1,1,1,2,3",
            "1,1,2,4,5,6",
        ]);
        let sims = read_ensemble(&data[..], grid).unwrap();
        assert_eq!(sims.len(), 1);
        assert_eq!(sims[0].len(), 3);
        assert_eq!(sims[0].states()[2].as_slice(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn reports_missing_timestep_by_sim() {
        let grid = ShellGrid::new(1, 200.0, 50.0).unwrap();
        let data = csv(&[
            "1,0,1,1,1,1",
            "1,1,1,1,1,1",
            "1,2,1,1,1,1",
            "2,0,1,1,1,1",
            "2,2,1,1,1,1",
            "2,3,1,1,1,1",
        ]);
        let err = read_ensemble(&data[..], grid).unwrap_err();
        assert!(err.to_string().contains("non-uniform grid, sim 2"), "{err}");
    }

    #[test]
    fn reports_bad_rows_with_line_numbers() {
        let grid = ShellGrid::new(1, 200.0, 50.0).unwrap();
        let data = csv(&["1,0,1,1,1,1", "1,1,1,x,1,1"]);
        match read_ensemble(&data[..], grid) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let data = csv(&["1,0,1,1,1,1", "1,1,2,1,1,1"]);
        assert!(matches!(
            read_ensemble(&data[..], grid),
            Err(Error::UnknownShell { shell: 2, .. })
        ));
        let data = csv(&["1,0,1,1,1"]);
        assert!(matches!(read_ensemble(&data[..], grid), Err(Error::Parse { line: 2, .. })));
        assert!(read_ensemble(&b"a,b\n"[..], grid).is_err());
    }
}
