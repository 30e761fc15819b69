//! Multi-shell source-sink evolutionary model of the S/D/N populations.
//!
//! Per shell `i` the right-hand side is
//!
//! ```text
//! S' = λ − S/TOF − α_a φSS S² − (δ+α) φSD S D − (δ+α) φSN S N
//! D' = (1−PMD) S/TOF − δ S D + δ S N − φDD D² − φDN D N + F_D(i+1) − F_D(i)
//! N' = nSS α_a φSS S² + nSD α φSD S D + nSN α φSN S N
//!      + nDD φDD D² + nDN φDN D N + nNN φNN N² + F_N(i+1) − F_N(i)
//! ```
//!
//! Active satellites do not decay. The `PMD·S/TOF` share of retiring
//! satellites leaves the system (successful disposal). The derelict equation
//! is evaluated as written above unless [`DerelictCollisionTerms::Symmetrized`]
//! is selected, which replaces `−δ S D + δ S N` with `+δ φSD S D + δ φSN S N`
//! so derelicts gain exactly the non-avoidance share the active equation loses.
//!
//! # Drag flux
//!
//! Objects of ballistic coefficient `B = C_d A/m` on a circular orbit of
//! radius `a` decay at `ȧ = −ρ B v a` with `v = sqrt(μ/a)`. Each shell uses its
//! mid-altitude density and circular speed. The outflow from shell `i` into
//! shell `i−1` is the shell population times the altitude-loss rate divided
//! by the shell width:
//!
//! ```text
//! F(i) = X(i) · ρ(h_mid, t) · B · v · a · (seconds per year) / 1000 / width   [1/yr]
//! ```
//!
//! Nothing enters the topmost shell from above; outflow from shell 1 leaves
//! the grid.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ode::{self, rk4};
use crate::popdata::{PopulationSeries, ShellGrid, Species, SpeciesVector};

/// Earth gravitational parameter, km³/s².
pub const MU_EARTH: f64 = 398_600.4418;
/// Mean equatorial radius, km.
pub const EARTH_RADIUS: f64 = 6378.137;
/// Julian year, s.
pub const SECONDS_PER_YEAR: f64 = 365.25 * 86_400.0;
/// Five days in years.
pub const FIVE_DAYS: f64 = 5.0 / 365.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityKind {
    StaticExponential,
    OscillatingExponential,
}

/// Exponential atmosphere, optionally modulated by a solar-cycle sinusoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityModel {
    pub kind: DensityKind,
    /// kg/m³ at `h_ref`.
    pub rho0: f64,
    /// km
    pub h_ref: f64,
    /// km
    pub scale_height: f64,
    pub amplitude: f64,
    /// years
    pub period: f64,
}

impl DensityModel {
    pub fn static_exponential(rho0: f64, h_ref: f64, scale_height: f64) -> Result<Self> {
        let m = Self {
            kind: DensityKind::StaticExponential,
            rho0,
            h_ref,
            scale_height,
            amplitude: 0.0,
            period: 11.0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn oscillating(
        rho0: f64,
        h_ref: f64,
        scale_height: f64,
        amplitude: f64,
        period: f64,
    ) -> Result<Self> {
        let m = Self {
            kind: DensityKind::OscillatingExponential,
            rho0,
            h_ref,
            scale_height,
            amplitude,
            period,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho0 > 0.0) || !(self.scale_height > 0.0) {
            return Err(Error::Invalid("density needs rho0 > 0 and scale height > 0".into()));
        }
        if self.kind == DensityKind::OscillatingExponential
            && (!(0.0..1.0).contains(&self.amplitude) || !(self.period > 0.0))
        {
            return Err(Error::Invalid(
                "oscillation amplitude must be in [0, 1) and period > 0".into(),
            ));
        }
        Ok(())
    }

    /// Solar-cycle multiplier at time `t`.
    fn modulation(&self, t: f64) -> f64 {
        match self.kind {
            DensityKind::StaticExponential => 1.0,
            DensityKind::OscillatingExponential => {
                1.0 + self.amplitude * (2.0 * PI * t / self.period).sin()
            }
        }
    }

    fn static_density(&self, altitude: f64) -> f64 {
        self.rho0 * (-(altitude - self.h_ref) / self.scale_height).exp()
    }

    /// Density in kg/m³ at `altitude` km and time `t` years, restricted to the grid.
    pub fn density_at(&self, grid: &ShellGrid, altitude: f64, t: f64) -> Result<f64> {
        let (bottom, top) = (grid.base_altitude(), grid.top_altitude());
        if !(bottom..=top).contains(&altitude) {
            return Err(Error::AltitudeOutOfRange {
                altitude,
                bottom,
                top,
            });
        }
        Ok(self.static_density(altitude) * self.modulation(t))
    }
}

/// Symmetric per-pair coefficient table.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PairTable {
    pub ss: f64,
    pub sd: f64,
    pub sn: f64,
    pub dd: f64,
    pub dn: f64,
    pub nn: f64,
}

impl PairTable {
    pub const KEYS: [&'static str; 6] = ["ss", "sd", "sn", "dd", "dn", "nn"];

    fn as_array(&self) -> [f64; 6] {
        [self.ss, self.sd, self.sn, self.dd, self.dn, self.nn]
    }

    fn from_array(v: [f64; 6]) -> Self {
        Self {
            ss: v[0],
            sd: v[1],
            sn: v[2],
            dd: v[3],
            dn: v[4],
            nn: v[5],
        }
    }
}

/// Form of the active-collision terms in the derelict equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DerelictCollisionTerms {
    /// `−δ S D + δ S N`
    #[default]
    AsPrinted,
    /// `+δ φSD S D + δ φSN S N`
    Symmetrized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsemParams {
    pub grid: ShellGrid,
    /// Launches per year into each shell.
    pub lambda: Vec<f64>,
    /// Operational lifetime, years.
    pub tof: f64,
    /// Post-mission disposal success probability.
    pub pmd: f64,
    /// 1/(year·object)
    pub delta: f64,
    pub alpha: f64,
    pub alpha_a: f64,
    /// Intrinsic collision rates, 1/(year·object).
    pub phi: PairTable,
    /// Fragments per collision.
    pub n_f: PairTable,
    /// `C_d A/m` of derelicts, m²/kg.
    pub ballistic_d: f64,
    /// `C_d A/m` of debris, m²/kg.
    pub ballistic_n: f64,
    pub density: DensityModel,
    pub derelict_terms: DerelictCollisionTerms,
}

impl SsemParams {
    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n_shells();
        if self.lambda.len() != n {
            return Err(Error::Shape(format!(
                "lambda has {} entries for {n} shells",
                self.lambda.len()
            )));
        }
        if !(self.tof > 0.0) {
            return Err(Error::Invalid("tof must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pmd) {
            return Err(Error::Invalid("pmd must lie in [0, 1]".into()));
        }
        let nonneg = self
            .lambda
            .iter()
            .chain(&self.phi.as_array())
            .chain(&self.n_f.as_array())
            .chain(&[self.delta, self.alpha, self.alpha_a, self.ballistic_d, self.ballistic_n])
            .all(|&v| v >= 0.0 && v.is_finite());
        if !nonneg {
            return Err(Error::Invalid(
                "rates, fragment counts and ballistic coefficients must be finite and >= 0".into(),
            ));
        }
        self.density.validate()
    }

    /// Bundled default parameters (non-authoritative, tuned for qualitative
    /// behaviour: steady actives, growing derelicts, accelerating debris).
    pub fn default_leo() -> Self {
        parse_params(DEFAULT_PARAMS)
            .expect("bundled parameter file is valid")
            .params
    }

    /// Removes every collision and drag term, leaving launches and retirement.
    pub fn without_interactions(mut self) -> Self {
        self.phi = PairTable::default();
        self.delta = 0.0;
        self.ballistic_d = 0.0;
        self.ballistic_n = 0.0;
        self
    }
}

/// Initial state shipped with the default parameters.
pub fn default_initial_state() -> SpeciesVector {
    parse_params(DEFAULT_PARAMS)
        .expect("bundled parameter file is valid")
        .initial
        .expect("bundled parameter file has an initial state")
}

/// Altitude lost per year by an object with ballistic coefficient `ballistic`
/// at the middle of `shell`, km/yr.
pub fn altitude_loss_rate(params: &SsemParams, ballistic: f64, shell: usize, t: f64) -> Result<f64> {
    let h = params.grid.mid_altitude(shell)?;
    let rho = params.density.density_at(&params.grid, h, t)?;
    Ok(ballistic * rho * decay_geometry(h))
}

/// `v · a · (s/yr) / 1000` at altitude `h`, so that `ρ B` times it is km/yr.
fn decay_geometry(h: f64) -> f64 {
    let a_km = EARTH_RADIUS + h;
    let v_m = (MU_EARTH / a_km).sqrt() * 1000.0;
    v_m * a_km * 1000.0 * SECONDS_PER_YEAR / 1000.0
}

/// Drag outflow of derelicts and debris from each shell into the one below.
#[derive(Debug, Clone, PartialEq)]
pub struct DragFlux {
    pub derelict: Vec<f64>,
    pub debris: Vec<f64>,
}

impl DragFlux {
    /// Outflow from shell `i` (1-based); zero above the grid.
    pub fn derelict_out(&self, shell: usize) -> f64 {
        self.derelict.get(shell - 1).copied().unwrap_or(0.0)
    }

    pub fn debris_out(&self, shell: usize) -> f64 {
        self.debris.get(shell - 1).copied().unwrap_or(0.0)
    }
}

fn check_state(state: &SpeciesVector, params: &SsemParams) -> Result<()> {
    if state.n_shells() != params.grid.n_shells() {
        return Err(Error::Shape(format!(
            "state has {} shells, params have {}",
            state.n_shells(),
            params.grid.n_shells()
        )));
    }
    Ok(())
}

pub fn drag_flux(state: &SpeciesVector, params: &SsemParams, t: f64) -> Result<DragFlux> {
    check_state(state, params)?;
    let sys = SsemSystem::new(params)?;
    let mut flux = DragFlux {
        derelict: vec![0.0; sys.n],
        debris: vec![0.0; sys.n],
    };
    let m = params.density.modulation(t);
    for i in 0..sys.n {
        flux.derelict[i] = state.get(Species::Derelict, i + 1) * sys.decay_d[i] * m;
        flux.debris[i] = state.get(Species::Debris, i + 1) * sys.decay_n[i] * m;
    }
    Ok(flux)
}

/// Time derivative of the full state.
pub fn ssem_rhs(t: f64, state: &SpeciesVector, params: &SsemParams) -> Result<SpeciesVector> {
    check_state(state, params)?;
    let sys = SsemSystem::new(params)?;
    let mut out = SpeciesVector::zeros(sys.n);
    sys.rhs(t, state.as_slice(), out.as_mut_slice());
    Ok(out)
}

/// Parameters with per-shell drag factors precomputed for repeated evaluation.
#[derive(Debug, Clone)]
pub struct SsemSystem<'a> {
    params: &'a SsemParams,
    n: usize,
    /// Static drag outflow rate per object, 1/yr, before solar modulation.
    decay_d: Vec<f64>,
    decay_n: Vec<f64>,
}

impl<'a> SsemSystem<'a> {
    pub fn new(params: &'a SsemParams) -> Result<Self> {
        params.validate()?;
        let n = params.grid.n_shells();
        let mut decay_d = Vec::with_capacity(n);
        let mut decay_n = Vec::with_capacity(n);
        let width = params.grid.shell_width();
        for shell in 1..=n {
            let h = params.grid.mid_altitude(shell)?;
            let base = params.density.static_density(h) * decay_geometry(h) / width;
            decay_d.push(params.ballistic_d * base);
            decay_n.push(params.ballistic_n * base);
        }
        Ok(Self {
            params,
            n,
            decay_d,
            decay_n,
        })
    }

    pub fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]) {
        let p = self.params;
        let n = self.n;
        let m = p.density.modulation(t);
        let (phi, nf) = (&p.phi, &p.n_f);
        for i in 0..n {
            let (s, d, deb) = (x[i], x[n + i], x[2 * n + i]);
            let ss = phi.ss * s * s;
            let sd = phi.sd * s * d;
            let sn = phi.sn * s * deb;
            let dd = phi.dd * d * d;
            let dn = phi.dn * d * deb;
            let nn = phi.nn * deb * deb;

            let out_d = self.decay_d[i] * m * d;
            let out_n = self.decay_n[i] * m * deb;
            let (in_d, in_n) = if i + 1 < n {
                (
                    self.decay_d[i + 1] * m * x[n + i + 1],
                    self.decay_n[i + 1] * m * x[2 * n + i + 1],
                )
            } else {
                (0.0, 0.0)
            };

            let retire = s / p.tof;
            dx[i] = p.lambda[i] - retire - p.alpha_a * ss - (p.delta + p.alpha) * (sd + sn);

            let active_hits = match p.derelict_terms {
                DerelictCollisionTerms::AsPrinted => -p.delta * s * d + p.delta * s * deb,
                DerelictCollisionTerms::Symmetrized => p.delta * (sd + sn),
            };
            dx[n + i] = (1.0 - p.pmd) * retire + active_hits - dd - dn + in_d - out_d;

            dx[2 * n + i] = nf.ss * p.alpha_a * ss
                + nf.sd * p.alpha * sd
                + nf.sn * p.alpha * sn
                + nf.dd * dd
                + nf.dn * dn
                + nf.nn * nn
                + in_n
                - out_n;
        }
    }
}

/// RK4 trajectory from `t0` to `t_end`, sampled every step.
pub fn integrate(
    params: &SsemParams,
    x0: &SpeciesVector,
    t0: f64,
    t_end: f64,
    dt: f64,
) -> Result<PopulationSeries> {
    check_state(x0, params)?;
    let steps = ode::step_count(t0, t_end, dt)?;
    let sys = SsemSystem::new(params)?;
    let traj = rk4(|t, x, dx| sys.rhs(t, x, dx), x0.as_slice(), t0, dt, steps);
    if let Some(time) = traj.diverged_at {
        return Err(Error::Divergence { time });
    }
    let n = params.grid.n_shells();
    let states = traj
        .states
        .into_iter()
        .map(|v| SpeciesVector::from_vec(v, n))
        .collect::<Result<Vec<_>>>()?;
    PopulationSeries::new(traj.times, states, params.grid, "ssem")
}

/// Mean-preserving multiplicative lognormal noise on every entry,
/// `x · exp(σ z − σ²/2)` with `z ~ N(0, 1)`, clamped at zero.
pub fn perturb(series: &PopulationSeries, noise_scale: f64, seed: u64) -> Result<PopulationSeries> {
    if !(noise_scale >= 0.0) {
        return Err(Error::Invalid("noise scale must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = 0.5 * noise_scale * noise_scale;
    let n = series.grid().n_shells();
    let states = series
        .states()
        .iter()
        .map(|s| {
            let v = s
                .as_slice()
                .iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (x * (noise_scale * z - shift).exp()).max(0.0)
                })
                .collect();
            SpeciesVector::from_vec(v, n)
        })
        .collect::<Result<Vec<_>>>()?;
    PopulationSeries::new(
        series.times().to_vec(),
        states,
        *series.grid(),
        format!("{} (perturbed, seed {seed})", series.label()),
    )
}

// Parameter file ------------------------------------------------------------

/// The default parameter file, bundled into the library.
pub const DEFAULT_PARAMS: &str = include_str!("../data/default_params.txt");

/// Parsed parameter file: model coefficients and an optional initial state.
#[derive(Debug, Clone)]
pub struct ParamsFile {
    pub params: SsemParams,
    pub initial: Option<SpeciesVector>,
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: k + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = key.trim().to_string();
            if map
                .insert(key.clone(), (k + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Parse {
                    line: k + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self { map })
    }

    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn required(&mut self, key: &str) -> Result<(usize, String)> {
        self.take(key)
            .ok_or_else(|| Error::Invalid(format!("parameter file is missing `{key}`")))
    }

    fn number(&mut self, key: &str) -> Result<f64> {
        let (line, v) = self.required(key)?;
        parse_number(&v, line, key)
    }

    fn number_or(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            Some((line, v)) => parse_number(&v, line, key),
            None => Ok(default),
        }
    }

    fn list(&mut self, key: &str, len: usize) -> Result<Option<Vec<f64>>> {
        let Some((line, v)) = self.take(key) else {
            return Ok(None);
        };
        let values = v
            .split(',')
            .map(|x| parse_number(x.trim(), line, key))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != len {
            return Err(Error::Parse {
                line,
                msg: format!("`{key}` has {} values, grid has {len} shells", values.len()),
            });
        }
        Ok(Some(values))
    }
}

fn parse_number(v: &str, line: usize, key: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::Parse {
            line,
            msg: format!("`{key}`: `{v}` is not a finite number"),
        })
}

/// Parses the flat `key = value` parameter format. `#` starts a comment;
/// per-shell arrays are comma separated and must have `n_shells` entries.
pub fn parse_params(text: &str) -> Result<ParamsFile> {
    let mut e = Entries::parse(text)?;
    let n_shells = e.number("n_shells")?;
    if n_shells < 1.0 || n_shells.fract() != 0.0 {
        return Err(Error::Invalid("n_shells must be a positive integer".into()));
    }
    let n = n_shells as usize;
    let grid = ShellGrid::new(n, e.number("base_altitude_km")?, e.number("shell_width_km")?)?;
    let lambda = e
        .list("lambda", n)?
        .ok_or_else(|| Error::Invalid("parameter file is missing `lambda`".into()))?;

    let mut pair = |prefix: &str| -> Result<PairTable> {
        let mut v = [0.0; 6];
        for (slot, k) in v.iter_mut().zip(PairTable::KEYS) {
            *slot = e.number(&format!("{prefix}_{k}"))?;
        }
        Ok(PairTable::from_array(v))
    };
    let phi = pair("phi")?;
    let n_f = pair("nf")?;

    let kind = match e.required("density_kind")? {
        (_, k) if k == "static" => DensityKind::StaticExponential,
        (_, k) if k == "oscillating" => DensityKind::OscillatingExponential,
        (line, k) => {
            return Err(Error::Parse {
                line,
                msg: format!("density_kind must be `static` or `oscillating`, found `{k}`"),
            })
        }
    };
    let density = DensityModel {
        kind,
        rho0: e.number("density_rho0")?,
        h_ref: e.number("density_h_ref_km")?,
        scale_height: e.number("density_scale_height_km")?,
        amplitude: e.number_or("density_amplitude", 0.0)?,
        period: e.number_or("density_period_years", 11.0)?,
    };
    let derelict_terms = match e.take("derelict_collision_terms") {
        None => DerelictCollisionTerms::AsPrinted,
        Some((_, v)) if v == "as-printed" => DerelictCollisionTerms::AsPrinted,
        Some((_, v)) if v == "symmetrized" => DerelictCollisionTerms::Symmetrized,
        Some((line, v)) => {
            return Err(Error::Parse {
                line,
                msg: format!(
                    "derelict_collision_terms must be `as-printed` or `symmetrized`, found `{v}`"
                ),
            })
        }
    };
    let params = SsemParams {
        grid,
        lambda,
        tof: e.number("tof")?,
        pmd: e.number("pmd")?,
        delta: e.number("delta")?,
        alpha: e.number("alpha")?,
        alpha_a: e.number("alpha_a")?,
        phi,
        n_f,
        ballistic_d: e.number("ballistic_d")?,
        ballistic_n: e.number("ballistic_n")?,
        density,
        derelict_terms,
    };
    params.validate()?;

    let initial = match (e.list("initial_s", n)?, e.list("initial_d", n)?, e.list("initial_n", n)?) {
        (Some(s), Some(d), Some(nn)) => Some(SpeciesVector::from_parts(&s, &d, &nn)?),
        (None, None, None) => None,
        _ => {
            return Err(Error::Invalid(
                "initial state needs all of initial_s, initial_d, initial_n".into(),
            ))
        }
    };
    if let Some((key, (line, _))) = e.map.iter().next() {
        return Err(Error::Parse {
            line: *line,
            msg: format!("unknown key `{key}`"),
        });
    }
    Ok(ParamsFile { params, initial })
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamsFile> {
    parse_params(&std::fs::read_to_string(path)?)
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(", ")
}

/// Renders parameters (and optionally an initial state) in the file format.
pub fn format_params(params: &SsemParams, initial: Option<&SpeciesVector>) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    kv("n_shells", params.grid.n_shells().to_string());
    kv("base_altitude_km", format!("{}", params.grid.base_altitude()));
    kv("shell_width_km", format!("{}", params.grid.shell_width()));
    kv("lambda", join(&params.lambda));
    kv("tof", format!("{}", params.tof));
    kv("pmd", format!("{}", params.pmd));
    kv("delta", format!("{}", params.delta));
    kv("alpha", format!("{}", params.alpha));
    kv("alpha_a", format!("{}", params.alpha_a));
    for (k, v) in PairTable::KEYS.iter().zip(params.phi.as_array()) {
        kv(&format!("phi_{k}"), format!("{v}"));
    }
    for (k, v) in PairTable::KEYS.iter().zip(params.n_f.as_array()) {
        kv(&format!("nf_{k}"), format!("{v}"));
    }
    kv("ballistic_d", format!("{}", params.ballistic_d));
    kv("ballistic_n", format!("{}", params.ballistic_n));
    let d = &params.density;
    kv(
        "density_kind",
        match d.kind {
            DensityKind::StaticExponential => "static",
            DensityKind::OscillatingExponential => "oscillating",
        }
        .into(),
    );
    kv("density_rho0", format!("{}", d.rho0));
    kv("density_h_ref_km", format!("{}", d.h_ref));
    kv("density_scale_height_km", format!("{}", d.scale_height));
    kv("density_amplitude", format!("{}", d.amplitude));
    kv("density_period_years", format!("{}", d.period));
    kv(
        "derelict_collision_terms",
        match params.derelict_terms {
            DerelictCollisionTerms::AsPrinted => "as-printed",
            DerelictCollisionTerms::Symmetrized => "symmetrized",
        }
        .into(),
    );
    if let Some(x0) = initial {
        kv("initial_s", join(x0.species(Species::Active)));
        kv("initial_d", join(x0.species(Species::Derelict)));
        kv("initial_n", join(x0.species(Species::Debris)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_shell() -> SsemParams {
        SsemParams {
            grid: ShellGrid::new(1, 500.0, 50.0).unwrap(),
            lambda: vec![0.0],
            tof: 5.0,
            pmd: 0.95,
            delta: 0.0,
            alpha: 0.0,
            alpha_a: 0.0,
            phi: PairTable::default(),
            n_f: PairTable::default(),
            ballistic_d: 0.0,
            ballistic_n: 0.0,
            density: DensityModel::static_exponential(1e-12, 500.0, 60.0).unwrap(),
            derelict_terms: DerelictCollisionTerms::AsPrinted,
        }
    }

    #[test]
    fn density_reference_points() {
        let grid = ShellGrid::leo();
        let m = DensityModel::static_exponential(2e-11, 400.0, 60.0).unwrap();
        assert_eq!(m.density_at(&grid, 400.0, 3.0).unwrap(), 2e-11);
        let e = m.density_at(&grid, 460.0, 0.0).unwrap();
        assert!((e - 2e-11 / std::f64::consts::E).abs() < 1e-24);
        assert!(m.density_at(&grid, 150.0, 0.0).is_err());
        assert!(m.density_at(&grid, 2000.5, 0.0).is_err());

        let osc = DensityModel::oscillating(2e-11, 400.0, 60.0, 0.5, 11.0).unwrap();
        let q = osc.density_at(&grid, 500.0, 11.0 / 4.0).unwrap();
        let st = m.density_at(&grid, 500.0, 0.0).unwrap();
        assert!((q / st - 1.5).abs() < 1e-12);
        assert!(DensityModel::oscillating(2e-11, 400.0, 60.0, 1.0, 11.0).is_err());
        assert!(DensityModel::static_exponential(0.0, 400.0, 60.0).is_err());
    }

    #[test]
    fn zero_state_has_zero_flux_and_rhs() {
        let p = SsemParams::default_leo();
        let zero = SpeciesVector::zeros(36);
        let f = drag_flux(&zero, &p, 1.0).unwrap();
        assert!(f.derelict.iter().chain(&f.debris).all(|&v| v == 0.0));
        let mut p0 = p.clone();
        p0.lambda.fill(0.0);
        let r = ssem_rhs(0.0, &zero, &p0).unwrap();
        assert!(r.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flux_is_linear_in_population() {
        let p = SsemParams::default_leo();
        let x = default_initial_state();
        let mut x2 = x.clone();
        x2.species_mut(Species::Derelict).iter_mut().for_each(|v| *v *= 2.0);
        let a = drag_flux(&x, &p, 2.0).unwrap();
        let b = drag_flux(&x2, &p, 2.0).unwrap();
        for (u, v) in a.derelict.iter().zip(&b.derelict) {
            assert!((2.0 * u - v).abs() <= 1e-12 * v.abs());
        }
        assert_eq!(a.debris, b.debris);
        assert_eq!(a.derelict_out(37), 0.0);
    }

    #[test]
    fn flux_of_one_shell_per_year() {
        // Ballistic coefficient giving exactly 50 km/yr of decay at mid-shell.
        let mut p = one_shell();
        let h = 525.0;
        let rho = 1e-12 * (-(h - 500.0) / 60.0f64).exp();
        let a_m = (EARTH_RADIUS + h) * 1000.0;
        let v = (MU_EARTH * 1e9 / a_m).sqrt();
        let km_per_year_per_b = rho * v * a_m * SECONDS_PER_YEAR / 1000.0;
        p.ballistic_d = 50.0 / km_per_year_per_b;
        assert!((altitude_loss_rate(&p, p.ballistic_d, 1, 0.0).unwrap() - 50.0).abs() < 1e-9);
        let x = SpeciesVector::from_vec(vec![0.0, 10.0, 0.0], 1).unwrap();
        let f = drag_flux(&x, &p, 0.0).unwrap();
        assert!((f.derelict[0] - 10.0).abs() < 1e-9, "{}", f.derelict[0]);
    }

    #[test]
    fn retirement_terms() {
        let p = one_shell();
        let x = SpeciesVector::from_vec(vec![1.0, 0.0, 0.0], 1).unwrap();
        let r = ssem_rhs(0.0, &x, &p).unwrap();
        assert!((r.as_slice()[0] + 0.2).abs() < 1e-15);
        assert!((r.as_slice()[1] - 0.01).abs() < 1e-15);
        assert_eq!(r.as_slice()[2], 0.0);
    }

    #[test]
    fn debris_self_collisions() {
        let mut p = one_shell();
        p.phi.nn = 1e-6;
        p.n_f.nn = 10.0;
        let x = SpeciesVector::from_vec(vec![0.0, 0.0, 1000.0], 1).unwrap();
        let r = ssem_rhs(0.0, &x, &p).unwrap();
        assert!((r.as_slice()[2] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn derelict_term_forms() {
        let mut p = one_shell();
        p.pmd = 1.0;
        p.delta = 1e-3;
        p.phi.sd = 0.5;
        p.phi.sn = 0.25;
        let x = SpeciesVector::from_vec(vec![2.0, 3.0, 4.0], 1).unwrap();
        let printed = ssem_rhs(0.0, &x, &p).unwrap().as_slice()[1];
        assert!((printed - 1e-3 * (-6.0 + 8.0)).abs() < 1e-15);
        p.derelict_terms = DerelictCollisionTerms::Symmetrized;
        let sym = ssem_rhs(0.0, &x, &p).unwrap().as_slice()[1];
        assert!((sym - 1e-3 * (0.5 * 6.0 + 0.25 * 8.0)).abs() < 1e-15);
    }

    #[test]
    fn coupling_is_local() {
        let p = SsemParams::default_leo();
        let x = default_initial_state();
        let base = ssem_rhs(3.0, &x, &p).unwrap();
        for shell in [1, 10, 20, 36] {
            let mut y = x.clone();
            for sp in Species::ALL {
                y.set(sp, shell, y.get(sp, shell) * 1.5 + 7.0);
            }
            let r = ssem_rhs(3.0, &y, &p).unwrap();
            for other in 1..=36 {
                if other + 1 >= shell && other <= shell + 1 {
                    continue;
                }
                for sp in Species::ALL {
                    assert_eq!(r.get(sp, other), base.get(sp, other), "shell {shell} -> {other}");
                }
            }
        }
    }

    #[test]
    fn zero_state_stays_zero() {
        let mut p = SsemParams::default_leo();
        p.lambda.fill(0.0);
        let s = integrate(&p, &SpeciesVector::zeros(36), 0.0, 2.0, FIVE_DAYS * 2.0).is_ok();
        assert!(!s, "2 years is not a multiple of 10 days");
        let s = integrate(&p, &SpeciesVector::zeros(36), 0.0, 10.0 * FIVE_DAYS, FIVE_DAYS).unwrap();
        assert_eq!(s.len(), 11);
        assert!(s.states().iter().all(|x| x.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn decay_matches_exponential() {
        let mut p = one_shell();
        p.pmd = 1.0;
        let x0 = SpeciesVector::from_vec(vec![1000.0, 0.0, 0.0], 1).unwrap();
        let s = integrate(&p, &x0, 0.0, 5.0, 0.01).unwrap();
        let last = s.states().last().unwrap().as_slice()[0];
        let exact = 1000.0 / std::f64::consts::E;
        assert!(((last - exact) / exact).abs() < 1e-8);
        assert_eq!(*s.times().last().unwrap(), 5.0);
    }

    #[test]
    fn divergence_is_reported() {
        let mut p = one_shell();
        p.phi.nn = 1.0;
        p.n_f.nn = 1.0;
        let x0 = SpeciesVector::from_vec(vec![0.0, 0.0, 1.0], 1).unwrap();
        match integrate(&p, &x0, 0.0, 2.0, 1e-3) {
            Err(Error::Divergence { time }) => assert!((time - 1.0).abs() < 0.01),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn perturb_identity_and_determinism() {
        let p = SsemParams::default_leo();
        let s = integrate(&p, &default_initial_state(), 0.0, 20.0 * FIVE_DAYS, FIVE_DAYS).unwrap();
        let same = perturb(&s, 0.0, 1).unwrap();
        assert_eq!(same.states(), s.states());
        let a = perturb(&s, 0.05, 42).unwrap();
        let b = perturb(&s, 0.05, 42).unwrap();
        let c = perturb(&s, 0.05, 43).unwrap();
        assert_eq!(a.states(), b.states());
        assert_ne!(a.states(), c.states());
        assert!(perturb(&s, -1.0, 0).is_err());
    }

    #[test]
    fn params_round_trip() {
        let p = SsemParams::default_leo();
        let x0 = default_initial_state();
        let text = format_params(&p, Some(&x0));
        let back = parse_params(&text).unwrap();
        assert_eq!(back.params, p);
        assert_eq!(back.initial.unwrap(), x0);
    }

    #[test]
    fn params_errors() {
        let good = format_params(&SsemParams::default_leo(), None);
        let short = good.replace("n_shells = 36", "n_shells = 35");
        assert!(matches!(parse_params(&short), Err(Error::Parse { .. })));
        let unknown = format!("{good}bogus = 1\n");
        assert!(parse_params(&unknown).unwrap_err().to_string().contains("bogus"));
        let missing = good.replace("tof = 5\n", "");
        assert!(parse_params(&missing).unwrap_err().to_string().contains("tof"));
        let bad_pmd = good.replace("pmd = 0.95", "pmd = 1.5");
        assert!(parse_params(&bad_pmd).is_err());
    }
}
