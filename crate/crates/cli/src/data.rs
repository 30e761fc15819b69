use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use leocap_core::popdata::{
    ensemble_stats, format_sig, group_average, read_ensemble, totals, write_ensemble, CSV_DIGITS,
};
use leocap_core::{Error, PopulationSeries, Result, ShellGrid, Species, SpeciesVector};

/// Number of shells in an ensemble CSV (largest shell index).
pub fn count_shells(path: &Path) -> Result<usize> {
    let f = BufReader::new(File::open(path)?);
    let mut max = 0;
    for (k, line) in f.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let shell = line
            .split(',')
            .nth(2)
            .and_then(|s| s.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Parse {
                line: k + 1,
                msg: "missing shell index".into(),
            })?;
        max = max.max(shell);
    }
    if max == 0 {
        return Err(Error::Invalid(format!("{} holds no samples", path.display())));
    }
    Ok(max)
}

/// Reads every member of an ensemble CSV. The grid comes from the parameter
/// file when the shell counts agree; a one-shell file is read as totals.
pub fn load_members(path: &Path, params_grid: &ShellGrid) -> Result<Vec<PopulationSeries>> {
    let n = count_shells(path)?;
    let grid = if n == params_grid.n_shells() {
        *params_grid
    } else if n == 1 {
        params_grid.collapsed()
    } else {
        ShellGrid::new(n, params_grid.base_altitude(), params_grid.shell_width())?
    };
    read_ensemble(BufReader::new(File::open(path)?), grid)
}

/// Member `k` (1-based), or the ensemble mean for `k = 0`.
pub fn select_member(members: &[PopulationSeries], k: usize) -> Result<PopulationSeries> {
    match k {
        0 if members.len() == 1 => Ok(members[0].clone()),
        0 => Ok(ensemble_stats(members)?.mean),
        k => members
            .get(k - 1)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("member {k} requested, file has {}", members.len()))),
    }
}

pub fn grouped(members: Vec<PopulationSeries>, group_size: Option<usize>) -> Result<Vec<PopulationSeries>> {
    match group_size {
        Some(g) => group_average(&members, g),
        None => Ok(members),
    }
}

pub fn to_totals(members: Vec<PopulationSeries>) -> Vec<PopulationSeries> {
    members.iter().map(totals).collect()
}

pub fn save_members(path: &Path, members: &[PopulationSeries]) -> Result<()> {
    write_ensemble(File::create(path)?, members)
}

pub const STATS_HEADER: &str = "time_years,shell,S_mean,D_mean,N_mean,S_3sigma,D_3sigma,N_3sigma";

/// Ensemble mean and three standard deviations per time and shell.
pub fn save_stats(path: &Path, members: &[PopulationSeries]) -> Result<()> {
    let stats = ensemble_stats(members)?;
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{STATS_HEADER}")?;
    let n = stats.mean.grid().n_shells();
    for ((t, m), s) in stats.mean.times().iter().zip(stats.mean.states()).zip(stats.sigma.states()) {
        for shell in 1..=n {
            let mut row = format!("{t},{shell}");
            for sp in Species::ALL {
                row.push(',');
                row.push_str(&format_sig(m.get(sp, shell), CSV_DIGITS));
            }
            for sp in Species::ALL {
                row.push(',');
                row.push_str(&format_sig(3.0 * s.get(sp, shell), CSV_DIGITS));
            }
            writeln!(out, "{row}")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Initial state from a `shell,S,D,N` CSV with one row per shell.
pub fn load_initial_state(path: &Path, n_shells: usize) -> Result<SpeciesVector> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == "shell,S,D,N" => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "expected header `shell,S,D,N`".into(),
            })
        }
    }
    let mut x = SpeciesVector::zeros(n_shells);
    let mut seen = vec![false; n_shells + 1];
    for (k, line) in lines {
        let bad = |msg: String| Error::Parse { line: k + 1, msg };
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", cells.len())));
        }
        let shell: usize = cells[0].parse().map_err(|_| bad(format!("bad shell `{}`", cells[0])))?;
        if shell == 0 || shell > n_shells {
            return Err(Error::UnknownShell { shell, n_shells });
        }
        for (sp, cell) in Species::ALL.iter().zip(&cells[1..]) {
            let v: f64 = cell.parse().map_err(|_| bad(format!("bad number `{cell}`")))?;
            x.set(*sp, shell, v);
        }
        seen[shell] = true;
    }
    if let Some(missing) = (1..=n_shells).find(|&s| !seen[s]) {
        return Err(Error::Invalid(format!("initial state has no row for shell {missing}")));
    }
    Ok(x)
}
