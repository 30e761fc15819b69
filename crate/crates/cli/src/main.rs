//! `leocap`: simulate the source-sink model, identify sparse dynamics,
//! train and run the LSTM forecaster, score predictions and draw plots.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

mod data;
mod svg;

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use leocap_core::lstm::{self, LstmConfig};
use leocap_core::metrics::{self, ErrorSeries};
use leocap_core::popdata::ensemble_stats;
use leocap_core::sindy::{self, BatchCoupling, FitOptions, LibrarySpec, ShellFit};
use leocap_core::ssem::{self, ParamsFile};
use leocap_core::{Error, PopulationSeries, ShellGrid, Species};

use data::{grouped, load_members, save_members, save_stats, select_member, to_totals};

#[derive(Parser, Debug, Serialize)]
#[command(name = "leocap", version, about = "Low-fidelity surrogates of LEO population evolution")]
struct Cli {
    /// Seed for perturbations and network initialisation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Model parameter file; the bundled defaults when omitted.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Integrate the source-sink model and write an ensemble.
    Simulate(SimulateArgs),
    /// Fit sparse polynomial dynamics to population data.
    Identify(IdentifyArgs),
    /// Train an LSTM forecaster.
    Train(TrainArgs),
    /// Closed-loop forecast from a trained checkpoint.
    Forecast(ForecastArgs),
    /// Percent error of a prediction against truth.
    Evaluate(EvaluateArgs),
    /// Draw an SVG chart.
    Plot(PlotArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long, default_value_t = 100.0)]
    years: f64,
    #[arg(long, default_value_t = 5.0)]
    dt_days: f64,
    #[arg(long, default_value_t = 1)]
    n_runs: usize,
    /// Lognormal noise scale applied to each run.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Initial state as a `shell,S,D,N` CSV; otherwise from the parameter file or built in.
    #[arg(long)]
    x0: Option<PathBuf>,
    /// Also write shell-summed totals.
    #[arg(long)]
    totals: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Scope {
    Totals,
    Shells,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Coupling {
    Coupled,
    Driven,
}

#[derive(Args, Debug, Serialize)]
struct IdentifyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Scope::Totals)]
    scope: Scope,
    /// Polynomial order (3 for totals, 2 for shells when omitted).
    #[arg(long)]
    order: Option<usize>,
    /// One threshold, or one per shell (comma separated) for the shells scope.
    #[arg(long, value_delimiter = ',', default_value = "0.01")]
    threshold: Vec<f64>,
    /// Ensemble member to fit (1-based); 0 fits the ensemble mean.
    #[arg(long, default_value_t = 0)]
    member: usize,
    /// Years of re-integration scored against the data; the whole span when omitted.
    #[arg(long)]
    sim_years: Option<f64>,
    #[arg(long, value_enum, default_value_t = Coupling::Coupled)]
    coupling: Coupling,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Network preset: 1 (shell totals) or 2 (full state).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    case: u8,
    /// Average consecutive members in groups of this size before training.
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Train on every n-th window.
    #[arg(long)]
    window_stride: Option<usize>,
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    /// Print one line per epoch to stderr.
    #[arg(long)]
    progress: bool,
}

#[derive(Args, Debug, Serialize)]
struct ForecastArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Series supplying the seed window.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    member: usize,
    #[arg(long, default_value_t = 20.0)]
    horizon_years: f64,
    /// Time of the last observed sample; defaults to the data end minus the horizon.
    #[arg(long)]
    from_years: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Truth member (1-based); 0 uses the ensemble mean.
    #[arg(long, default_value_t = 0)]
    member: usize,
    /// Leading steps left out of the error series.
    #[arg(long, default_value_t = 0)]
    burn_in: usize,
    #[arg(long)]
    signed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PlotKind {
    Population,
    Error,
    Ensemble,
}

#[derive(Args, Debug, Serialize)]
struct PlotArgs {
    #[arg(long, value_enum)]
    kind: PlotKind,
    /// Input CSV files (ensemble format, or error format for `--kind error`).
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "plot.svg")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    burn_in: usize,
    /// Plot one shell instead of the sum over shells.
    #[arg(long)]
    shell: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct ReplayArgs {
    manifest: PathBuf,
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numerical() { 4 } else { 3 },
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

fn numerical(msg: impl Into<String>) -> Failure {
    Failure { code: 4, msg: msg.into() }
}

type Outcome = std::result::Result<Vec<PathBuf>, Failure>;

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    argv: Vec<String>,
    config: &'a Cli,
    outputs: Vec<String>,
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate(_) => "simulate",
        Command::Identify(_) => "identify",
        Command::Train(_) => "train",
        Command::Forecast(_) => "forecast",
        Command::Evaluate(_) => "evaluate",
        Command::Plot(_) => "plot",
        Command::Replay(_) => "replay",
    }
}

fn write_manifest(cli: &Cli, argv: &[String], outputs: &[PathBuf]) -> std::io::Result<()> {
    let command = command_name(&cli.command);
    let manifest = Manifest {
        tool: "leocap",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: cli.seed,
        argv: argv.to_vec(),
        config: cli,
        outputs: outputs
            .iter()
            .map(|p| p.file_name().map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned()))
            .collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
    fs::write(cli.out_dir.join(format!("{command}.manifest.json")), text + "\n")
}

fn load_params(cli: &Cli) -> std::result::Result<ParamsFile, Failure> {
    Ok(match &cli.params {
        Some(p) => ssem::load_params(p)?,
        None => ssem::parse_params(ssem::DEFAULT_PARAMS)?,
    })
}

fn run(cli: &Cli) -> Outcome {
    fs::create_dir_all(&cli.out_dir)?;
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Identify(a) => identify(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Forecast(a) => forecast(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Plot(a) => plot(cli, a),
        Command::Replay(_) => unreachable!("handled in main"),
    }
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Outcome {
    if a.n_runs == 0 {
        return Err(usage("--n-runs must be at least 1"));
    }
    if !(a.dt_days > 0.0 && a.years > 0.0) {
        return Err(usage("--years and --dt-days must be positive"));
    }
    let pf = load_params(cli)?;
    let p = &pf.params;
    let x0 = match (&a.x0, &pf.initial) {
        (Some(path), _) => data::load_initial_state(path, p.grid.n_shells())?,
        (None, Some(x)) => x.clone(),
        (None, None) if p.grid.n_shells() == ShellGrid::leo().n_shells() => ssem::default_initial_state(),
        (None, None) => return Err(usage("no initial state: pass --x0 or add one to the parameter file")),
    };
    let dt = a.dt_days / 365.25;
    leocap_core::ode::step_count(0.0, a.years, dt).map_err(|e| usage(e.to_string()))?;
    let base = ssem::integrate(p, &x0, 0.0, a.years, dt)?;
    let mut members = Vec::with_capacity(a.n_runs);
    for k in 0..a.n_runs {
        let run_seed = cli.seed.wrapping_add((k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let m = if a.noise > 0.0 {
            ssem::perturb(&base, a.noise, run_seed)?
        } else {
            base.clone()
        };
        members.push(m.with_label(format!("sim {}", k + 1)));
    }
    let ensemble = cli.out_dir.join("ensemble.csv");
    let stats = cli.out_dir.join("stats.csv");
    save_members(&ensemble, &members)?;
    save_stats(&stats, &members)?;
    let mut out = vec![ensemble, stats];
    if a.totals {
        let path = cli.out_dir.join("totals.csv");
        save_members(&path, &to_totals(members))?;
        out.push(path);
    }
    eprintln!("simulated {} run(s), {} samples each", a.n_runs, base.len());
    Ok(out)
}

fn identify(cli: &Cli, a: &IdentifyArgs) -> Outcome {
    let pf = load_params(cli)?;
    let members = load_members(&a.data, &pf.params.grid)?;
    let mut series = select_member(&members, a.member)?;
    if a.scope == Scope::Totals && series.grid().n_shells() > 1 {
        series = leocap_core::popdata::totals(&series);
    }
    let t0 = series.times()[0];
    let dt = series.dt();
    let t_end = match a.sim_years {
        Some(y) => t0 + y,
        None => *series.times().last().unwrap(),
    };
    let last = series
        .index_of(t_end)
        .ok_or_else(|| usage(format!("--sim-years {t_end} is not on the data's time grid")))?;
    let truth = series.slice(0, last + 1)?;
    let mut out = Vec::new();
    match a.scope {
        Scope::Totals => {
            let order = a.order.unwrap_or(3);
            let [threshold] = a.threshold[..] else {
                return Err(usage("the totals scope takes a single threshold"));
            };
            let spec = LibrarySpec::polynomial(3, order);
            let model = sindy::fit_with(&series, &spec, &FitOptions::new(threshold))?;
            let path = cli.out_dir.join("model.txt");
            fs::write(&path, model.to_text())?;
            out.push(path);
            let path = cli.out_dir.join("equations.txt");
            fs::write(&path, model.equations())?;
            out.push(path);
            let traj = sindy::simulate(&model, series.states()[0].as_slice(), t0, t_end, dt)?;
            let states: Vec<Vec<f64>> = (0..truth.len())
                .map(|k| traj.states.get(k).cloned().unwrap_or_else(|| vec![f64::NAN; 3]))
                .collect();
            out.extend(write_fit_outputs(cli, &truth, states)?);
            if let Some(t) = traj.diverged_at {
                return Err(numerical(format!("identified model diverged at t = {t} years")));
            }
        }
        Scope::Shells => {
            let order = a.order.unwrap_or(2);
            let n = series.grid().n_shells();
            let thresholds = match a.threshold.len() {
                1 => vec![a.threshold[0]; n],
                k if k == n => a.threshold.clone(),
                k => return Err(usage(format!("{k} thresholds given for {n} shells"))),
            };
            let spec = LibrarySpec::polynomial(9, order);
            let batch = sindy::fit_shell_batches(&series, &spec, &thresholds, &FitOptions::new(thresholds[0]))?;
            let dir = cli.out_dir.join("models");
            fs::create_dir_all(&dir)?;
            let mut equations = String::new();
            for (shell, fit) in &batch.shells {
                if let ShellFit::Fit(m) = fit {
                    let path = dir.join(format!("shell_{shell:02}.txt"));
                    fs::write(&path, m.to_text())?;
                    out.push(path);
                    equations.push_str(&format!("# shell {shell}\n{}\n", m.equations()));
                }
            }
            let mut unfit = String::from("shell,reason\n");
            for s in [1, n] {
                unfit.push_str(&format!("{s},boundary shell\n"));
            }
            for (s, reason) in batch.unfit() {
                unfit.push_str(&format!("{s},{}\n", reason.replace(',', ";")));
            }
            let path = cli.out_dir.join("unfit.csv");
            fs::write(&path, &unfit)?;
            out.push(path);
            let path = cli.out_dir.join("equations.txt");
            fs::write(&path, equations)?;
            out.push(path);
            let fitted = batch.fitted_shells();
            if fitted.is_empty() {
                return Err(numerical(format!("no shell could be fit:\n{unfit}")));
            }
            let coupling = match a.coupling {
                Coupling::Coupled => BatchCoupling::Coupled,
                Coupling::Driven => BatchCoupling::Driven,
            };
            let traj = sindy::simulate_batches(&batch, &series, coupling, t0, t_end, dt)?;
            // Shells without a model have no prediction to score.
            let mut states = traj.states;
            for shell in (1..=n).filter(|s| !fitted.contains(s)) {
                for row in states.iter_mut() {
                    for sp in 0..3 {
                        row[sp * n + shell - 1] = f64::NAN;
                    }
                }
            }
            out.extend(write_fit_outputs(cli, &truth, states)?);
            eprintln!("fitted {} of {} interior shells", fitted.len(), n - 2);
            if let Some((shell, t)) = traj.diverged.first() {
                return Err(numerical(format!(
                    "{} shell model(s) diverged, first shell {shell} at t = {t} years",
                    traj.diverged.len()
                )));
            }
        }
    }
    Ok(out)
}

/// Writes the re-integrated series and its error against `truth`.
fn write_fit_outputs(cli: &Cli, truth: &PopulationSeries, states: Vec<Vec<f64>>) -> std::result::Result<Vec<PathBuf>, Failure> {
    let n = truth.grid().n_shells();
    let states = states
        .into_iter()
        .map(|v| leocap_core::SpeciesVector::from_vec(v, n))
        .collect::<leocap_core::Result<Vec<_>>>()?;
    let sim = PopulationSeries::new(truth.times().to_vec(), states, *truth.grid(), "sindy")?;
    let sim_path = cli.out_dir.join("simulated.csv");
    save_members(&sim_path, std::slice::from_ref(&sim))?;
    let err = metrics::percent_error(&sim, truth)?;
    let err_path = cli.out_dir.join("fit_error.csv");
    metrics::write_error_csv(fs::File::create(&err_path)?, &err)?;
    print_summary(&err);
    Ok(vec![sim_path, err_path])
}

fn print_summary(err: &ErrorSeries) {
    if err.quantities.len() > 6 {
        let n = err.quantities.len() / 3;
        if let Ok(mean) = metrics::per_shell(err, n).and_then(|p| metrics::shell_mean_error(&p)) {
            for (q, max, avg) in mean.summary() {
                println!("{q} (shell mean): max {max:.4}%  mean {avg:.4}%");
            }
            return;
        }
    }
    for (q, max, avg) in err.summary() {
        println!("{q}: max {max:.4}%  mean {avg:.4}%");
    }
}

fn train(cli: &Cli, a: &TrainArgs) -> Outcome {
    let pf = load_params(cli)?;
    let members = grouped(load_members(&a.data, &pf.params.grid)?, a.group_size)?;
    let mut config = if a.case == 1 { LstmConfig::case1() } else { LstmConfig::case2() };
    config.seed = cli.seed;
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        config.learning_rate = lr;
    }
    if let Some(s) = a.window_stride {
        config.window_stride = s;
    }
    let members = if a.case == 1 { to_totals(members) } else { members };
    let width = members[0].grid().state_len();
    if width != config.input_size {
        return Err(Failure {
            code: 3,
            msg: format!(
                "case {} takes {} features per sample, data has {width}",
                a.case, config.input_size
            ),
        });
    }
    let mats: Vec<(String, nalgebra::DMatrix<f64>)> =
        members.iter().map(|m| (m.label().to_string(), m.to_matrix())).collect();
    let progress = a.progress;
    let (model, report) = lstm::train_matrices_with(config, &mats, a.train_ratio, &mut |e, t, v| {
        if progress {
            eprintln!("epoch {e}: train {t:.6e}  validation {v:.6e}");
        }
    })?;
    let ckpt = cli.out_dir.join("checkpoint.txt");
    lstm::save_checkpoint(&model, &ckpt)?;
    let rep = cli.out_dir.join("train_report.csv");
    fs::write(&rep, report.to_csv())?;
    eprintln!(
        "trained {} epoch(s) on {} series, best epoch {}, {:.1} s",
        report.stopped_epoch,
        mats.len(),
        report.best_epoch,
        report.wall_seconds
    );
    Ok(vec![ckpt, rep])
}

fn forecast(cli: &Cli, a: &ForecastArgs) -> Outcome {
    let pf = load_params(cli)?;
    let model = lstm::load_checkpoint(&a.checkpoint)?;
    let mut series = select_member(&load_members(&a.data, &pf.params.grid)?, a.member)?;
    let f = model.config.input_size;
    if series.grid().state_len() != f && f == 3 {
        series = leocap_core::popdata::totals(&series);
    }
    if series.grid().state_len() != f {
        return Err(Failure {
            code: 3,
            msg: format!("checkpoint takes {f} features, data has {}", series.grid().state_len()),
        });
    }
    let dt = series.dt();
    let steps = a.horizon_years / dt;
    if !(steps >= 0.0) || (steps - steps.round()).abs() > 1e-6 * steps.max(1.0) {
        return Err(usage(format!("horizon of {} years is not a whole number of steps", a.horizon_years)));
    }
    let horizon = steps.round() as usize;
    let t_last = *series.times().last().unwrap();
    let from = a.from_years.unwrap_or(t_last - horizon as f64 * dt);
    let end = series
        .index_of(from)
        .ok_or_else(|| usage(format!("--from-years {from} is not on the data's time grid")))?;
    let seq = model.config.sequence_length;
    if end + 1 < seq {
        return Err(usage(format!("need {seq} samples up to t = {from}, data has {}", end + 1)));
    }
    let seed = series.to_matrix().rows(end + 1 - seq, seq).into_owned();
    let pred = lstm::forecast(&model, &seed, horizon)?;
    let path = cli.out_dir.join("forecast.csv");
    if horizon == 0 {
        fs::write(&path, format!("{}\n", leocap_core::popdata::ENSEMBLE_HEADER))?;
        return Ok(vec![path]);
    }
    let t0 = series.times()[end];
    let times = (1..=horizon).map(|k| t0 + k as f64 * dt).collect();
    let out = PopulationSeries::from_matrix(times, &pred, *series.grid(), "forecast")?;
    save_members(&path, &[out])?;
    if let Some(r) = pred.row_iter().position(|r| !r.iter().all(|v| v.is_finite())) {
        return Err(numerical(format!("forecast became non-finite at step {}", r + 1)));
    }
    Ok(vec![path])
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Outcome {
    let pf = load_params(cli)?;
    let pred = select_member(&load_members(&a.pred, &pf.params.grid)?, 1)?;
    let mut truth = select_member(&load_members(&a.truth, &pf.params.grid)?, a.member)?;
    if pred.grid().n_shells() == 1 && truth.grid().n_shells() > 1 {
        truth = leocap_core::popdata::totals(&truth);
    }
    let start = truth
        .index_of(pred.times()[0])
        .ok_or_else(|| Failure {
            code: 3,
            msg: format!("prediction starts at t = {}, not on the truth grid", pred.times()[0]),
        })?;
    if start + pred.len() > truth.len() {
        return Err(Failure {
            code: 3,
            msg: "prediction runs past the end of the truth series".into(),
        });
    }
    let truth = truth.slice(start, start + pred.len())?;
    let mut err = metrics::percent_error_with(&pred, &truth, a.signed)?;
    if a.burn_in > 0 {
        err = metrics::omit_burn_in(&err, a.burn_in)?;
    }
    let mut out = Vec::new();
    let path = cli.out_dir.join("errors.csv");
    metrics::write_error_csv(fs::File::create(&path)?, &err)?;
    out.push(path);
    let n = truth.grid().n_shells();
    let summary_source = if n > 1 {
        let mean = metrics::shell_mean_error(&metrics::per_shell(&err, n)?)?;
        let path = cli.out_dir.join("shell_mean_errors.csv");
        metrics::write_error_csv(fs::File::create(&path)?, &mean)?;
        out.push(path);
        mean
    } else {
        err
    };
    let mut summary = String::from("quantity,max_percent_error,mean_percent_error\n");
    for (q, max, mean) in summary_source.summary() {
        summary.push_str(&format!("{q},{max},{mean}\n"));
        println!("{q}: max {max:.4}%  mean {mean:.4}%");
    }
    let path = cli.out_dir.join("summary.csv");
    fs::write(&path, summary)?;
    out.push(path);
    Ok(out)
}

fn species_trace(s: &PopulationSeries, sp: Species, shell: Option<usize>) -> Vec<f64> {
    match shell {
        Some(k) => s.trace(sp, k),
        None => s.states().iter().map(|x| x.species(sp).iter().sum()).collect(),
    }
}

fn plot(cli: &Cli, a: &PlotArgs) -> Outcome {
    let pf = load_params(cli)?;
    let names: Vec<String> = a
        .input
        .iter()
        .map(|p| p.file_name().map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned()))
        .collect();
    let note = format!("leocap plot kind={:?} inputs={} burn_in={}", a.kind, names.join(";"), a.burn_in).to_lowercase();
    let where_ = a.shell.map_or("all shells".to_string(), |k| format!("shell {k}"));
    let svg = match a.kind {
        PlotKind::Population | PlotKind::Ensemble => {
            let mut sets = Vec::new();
            for p in &a.input {
                let m = load_members(p, &pf.params.grid)?;
                if let Some(k) = a.shell {
                    let n = m[0].grid().n_shells();
                    if k == 0 || k > n {
                        return Err(Error::UnknownShell { shell: k, n_shells: n }.into());
                    }
                }
                sets.push(m);
            }
            let mut panels = Vec::new();
            for sp in Species::ALL {
                let mut panel = svg::Panel {
                    title: format!("{} ({where_})", sp.symbol()),
                    y_label: "objects".into(),
                    lines: Vec::new(),
                    bands: Vec::new(),
                };
                for (members, name) in sets.iter().zip(&names) {
                    let skip = a.burn_in.min(members[0].len());
                    let xs: Vec<f64> = members[0].times()[skip..].to_vec();
                    if a.kind == PlotKind::Ensemble {
                        for m in members {
                            panel.lines.push(svg::Line {
                                label: String::new(),
                                xs: xs.clone(),
                                ys: species_trace(m, sp, a.shell)[skip..].to_vec(),
                                color: Some("#b0b0b0"),
                                width: 0.6,
                            });
                        }
                        let summed: Vec<PopulationSeries> = match a.shell {
                            Some(_) => members.clone(),
                            None => to_totals(members.clone()),
                        };
                        let stats = ensemble_stats(&summed)?;
                        let mean = species_trace(&stats.mean, sp, a.shell.filter(|_| summed[0].grid().n_shells() > 1));
                        let sigma = species_trace(&stats.sigma, sp, a.shell.filter(|_| summed[0].grid().n_shells() > 1));
                        panel.bands.push(svg::Band {
                            xs: xs.clone(),
                            lower: mean.iter().zip(&sigma).map(|(m, s)| m - 3.0 * s).skip(skip).collect(),
                            upper: mean.iter().zip(&sigma).map(|(m, s)| m + 3.0 * s).skip(skip).collect(),
                        });
                        panel.lines.push(svg::Line {
                            label: format!("{name} mean"),
                            xs,
                            ys: mean[skip..].to_vec(),
                            color: Some("#1f4e9c"),
                            width: 1.6,
                        });
                    } else {
                        let s = select_member(members, 0)?;
                        panel.lines.push(svg::Line {
                            label: name.clone(),
                            xs,
                            ys: species_trace(&s, sp, a.shell)[skip..].to_vec(),
                            color: None,
                            width: 1.4,
                        });
                    }
                }
                panels.push(panel);
            }
            let title = if a.kind == PlotKind::Ensemble { "Ensemble with mean and 3-sigma band" } else { "Population" };
            svg::render(title, "time (years)", &note, &panels)
        }
        PlotKind::Error => {
            let mut panels: Vec<svg::Panel> = Vec::new();
            for (p, name) in a.input.iter().zip(&names) {
                let mut err = metrics::read_error_csv(BufReader::new(fs::File::open(p)?))?;
                if err.quantities.len() > 3 && err.quantities.len() % 3 == 0 {
                    err = metrics::shell_mean_error(&metrics::per_shell(&err, err.quantities.len() / 3)?)?;
                }
                if a.burn_in > 0 {
                    err = metrics::omit_burn_in(&err, a.burn_in)?;
                }
                for (q, quantity) in err.quantities.iter().enumerate() {
                    let line = svg::Line {
                        label: name.clone(),
                        xs: err.times.clone(),
                        ys: err.column(q),
                        color: None,
                        width: 1.4,
                    };
                    match panels.iter_mut().find(|pn| pn.title == *quantity) {
                        Some(pn) => pn.lines.push(line),
                        None => panels.push(svg::Panel {
                            title: quantity.clone(),
                            y_label: "percent error".into(),
                            lines: vec![line],
                            bands: Vec::new(),
                        }),
                    }
                }
            }
            if panels.is_empty() {
                return Err(Failure { code: 3, msg: "no error data to plot".into() });
            }
            svg::render("Percent error", "time (years)", &note, &panels)
        }
    };
    let out = cli.out_dir.join(&a.out);
    fs::write(&out, svg)?;
    Ok(vec![out])
}

fn execute(cli: &Cli, argv: &[String]) -> std::result::Result<(), Failure> {
    let outputs = run(cli)?;
    write_manifest(cli, argv, &outputs)?;
    for p in &outputs {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct StoredManifest {
    argv: Vec<String>,
}

fn replay(path: &Path) -> std::result::Result<(), Failure> {
    let text = fs::read_to_string(path)?;
    let stored: StoredManifest =
        serde_json::from_str(&text).map_err(|e| Failure { code: 3, msg: format!("{}: {e}", path.display()) })?;
    let cli = Cli::try_parse_from(&stored.argv).map_err(|e| usage(format!("manifest arguments: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(usage("a manifest cannot replay another replay"));
    }
    execute(&cli, &stored.argv)
}

fn main() -> ExitCode {
    let mut argv: Vec<String> = std::env::args().collect();
    if let Some(first) = argv.first_mut() {
        *first = "leocap".into();
    }
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Replay(r) => replay(&r.manifest),
        _ => execute(&cli, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let _ = writeln!(std::io::stderr(), "error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
