//! Experiment orchestration: the vanishing-viscosity sweep, the mollified
//! linear problems with their uniformity and triangle-inequality reports,
//! and the command-line interface.
//!
//! Disk layout under `output_dir`:
//!
//! ```text
//! runs/nl_00 .. nl_NN      nonlinear runs, one per viscosity rung
//! runs/nl_ref              inviscid reference at the finest grid
//! runs/lin_<ell>_ref       linear problem driven by the reference velocity
//! runs/lin_<ell>_kNN       linear problem driven by rung NN's velocity
//! convergence.csv  lemma1.csv  triangle.csv  *.svg
//! ```
//!
//! Every CSV value is written with fixed `{:.12e}` formatting and rows are
//! emitted in ladder order by a single writer, so identical configurations
//! produce byte-identical files regardless of parallelism. Runtime is
//! reported as accepted solver steps, never wall time, for the same reason.

use crate::diagnostics::{
    self, energy_estimate_report_at, pair_distance, pair_distance_at, trajectory_records,
    DiagnosticsError,
};
use crate::evolution::{
    solve, EvolutionError, ForcingMode, ForcingSpec, SaveOptions, SolveMode, SolverConfig,
    Trajectory,
};
use crate::field::TorusGrid;
use crate::initial_data::{ForcingFamily, InitialDataError, InitialDataSpec, PerturbationFamily};
use crate::mollifier::{make_kernel, mollification_error, mollify, MollifierError, MollifierProfile};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing trajectory at {0}: run the nonlinear solves first")]
    MissingTrajectory(PathBuf),
    #[error("solver aborted: {0}")]
    Abort(String),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    InitialData(#[from] InitialDataError),
    #[error(transparent)]
    Mollifier(#[from] MollifierError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which trajectory plays the vanishing-viscosity limit in the sweep table.
/// The inviscid run is a declared proxy for the (possibly non-unique) limit
/// solution, so the table always carries a second column measured against an
/// alternative reference for sensitivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Inviscid solve at the finest configured grid.
    #[default]
    Euler,
    /// The smallest-viscosity rung itself.
    FinestNu,
    /// Extrapolation to zero viscosity from the two finest rungs, assuming
    /// first-order dependence on viscosity.
    Richardson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// First entry: production grid for the rungs; last entry: reference
    /// grid. Must be nondecreasing.
    pub grid_sizes: Vec<usize>,
    /// Strictly decreasing positive viscosities.
    pub nu_ladder: Vec<f64>,
    /// Strictly increasing positive mollification scales.
    pub ell_ladder: Vec<f64>,
    /// Primary Lebesgue exponent (> 1).
    pub p: f64,
    /// Secondary exponent; must satisfy `p_tilde >= max(2, p')` with
    /// `p' = p/(p-1)`.
    pub p_tilde: f64,
    pub initial_family: PerturbationFamily,
    #[serde(default)]
    pub forcing_family: Option<ForcingFamily>,
    pub t_end: f64,
    #[serde(default = "default_dt_max")]
    pub dt_max: f64,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    #[serde(default = "default_stride")]
    pub snapshot_stride: usize,
    #[serde(default = "default_profile")]
    pub mollifier_profile: MollifierProfile,
    #[serde(default)]
    pub reference: ReferenceMode,
    pub output_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_dealias")]
    pub dealias_fraction: f64,
    #[serde(default)]
    pub store_velocity: bool,
}

fn default_dt_max() -> f64 {
    1e-2
}
fn default_cfl() -> f64 {
    0.5
}
fn default_stride() -> usize {
    1
}
fn default_profile() -> MollifierProfile {
    MollifierProfile::Gaussian
}
fn default_parallelism() -> usize {
    1
}
fn default_dealias() -> f64 {
    2.0 / 3.0
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("cannot parse {}: {e}", path.display())))?;
        if let Ok(dir) = std::env::var("VORTEX_OUTPUT_DIR") {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.grid_sizes.is_empty() {
            return bad("grid_sizes must not be empty".into());
        }
        if self.grid_sizes.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("grid_sizes must be nondecreasing, got {:?}", self.grid_sizes));
        }
        for &n in &self.grid_sizes {
            self.grid(n)?;
        }
        if self.nu_ladder.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return bad(format!("nu_ladder must be positive, got {:?}", self.nu_ladder));
        }
        if self.nu_ladder.windows(2).any(|w| w[1] >= w[0]) {
            return bad(format!(
                "nu_ladder must be strictly decreasing, got {:?}",
                self.nu_ladder
            ));
        }
        if self.ell_ladder.iter().any(|v| !(*v > 0.0)) {
            return bad(format!("ell_ladder must be positive, got {:?}", self.ell_ladder));
        }
        if self.ell_ladder.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!(
                "ell_ladder must be strictly increasing, got {:?}",
                self.ell_ladder
            ));
        }
        if !(self.p > 1.0) || !self.p.is_finite() {
            return bad(format!("p must be finite and > 1, got {}", self.p));
        }
        let p_conj = self.p / (self.p - 1.0);
        let p_tilde_floor = p_conj.max(2.0);
        if !(self.p_tilde >= p_tilde_floor) {
            return bad(format!(
                "p_tilde must be >= max(2, p') = {p_tilde_floor}, got {}",
                self.p_tilde
            ));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return bad(format!("t_end must be finite and >= 0, got {}", self.t_end));
        }
        if !(self.dt_max > 0.0) {
            return bad(format!("dt_max must be positive, got {}", self.dt_max));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return bad(format!("cfl must lie in (0, 1], got {}", self.cfl));
        }
        if self.snapshot_stride == 0 {
            return bad("snapshot_stride must be at least 1".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if self.reference == ReferenceMode::Richardson && self.nu_ladder.len() < 2 {
            return bad("richardson reference needs at least two viscosity rungs".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            return bad("output_dir must not be empty".into());
        }
        Ok(())
    }

    pub fn grid(&self, n: usize) -> Result<TorusGrid, HarnessError> {
        TorusGrid::with_dealias_fraction(n, self.dealias_fraction)
            .map_err(|e| HarnessError::Config(format!("grid_sizes entry {n}: {e}")))
    }

    pub fn run_grid(&self) -> Result<TorusGrid, HarnessError> {
        self.grid(self.grid_sizes[0])
    }

    pub fn reference_grid(&self) -> Result<TorusGrid, HarnessError> {
        self.grid(*self.grid_sizes.last().expect("validated nonempty"))
    }

    fn solver_config(&self, grid: TorusGrid, nu: f64) -> SolverConfig {
        SolverConfig {
            grid,
            nu,
            t_end: self.t_end,
            dt_max: self.dt_max,
            cfl: self.cfl,
            p: self.p,
            snapshot_stride: self.snapshot_stride,
        }
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.output_dir.join("runs")
    }

    pub fn rung_dir(&self, k: usize) -> PathBuf {
        self.runs_dir().join(format!("nl_{k:02}"))
    }

    pub fn reference_dir(&self) -> PathBuf {
        self.runs_dir().join("nl_ref")
    }

    pub fn linear_dir(&self, ell: f64, target: LinearTarget) -> PathBuf {
        let suffix = match target {
            LinearTarget::Reference => "ref".to_string(),
            LinearTarget::Rung(k) => format!("k{k:02}"),
        };
        self.runs_dir().join(format!("lin_{ell:e}_{suffix}"))
    }

    /// Initial datum for rung `k`; `None` selects the limiting base datum.
    fn initial_at(&self, nu: Option<f64>, grid: TorusGrid) -> Result<crate::field::SpectralField, HarnessError> {
        Ok(match nu {
            Some(v) => self.initial_family.build(v, grid)?,
            None => self.initial_family.build_base(grid)?,
        })
    }

    fn forcing_at(&self, nu: Option<f64>, grid: TorusGrid) -> Result<ForcingSpec, HarnessError> {
        let Some(family) = &self.forcing_family else {
            return Ok(ForcingSpec::zero());
        };
        Ok(match nu {
            Some(v) => family.build(v, grid)?,
            None => family.build_base(grid)?,
        })
    }
}

/// Reproducible description of how a run's data were constructed; echoed
/// into the trajectory manifest and compared on reload to validate caches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEcho {
    pub initial_family: PerturbationFamily,
    pub forcing_family: Option<ForcingFamily>,
    /// Viscosity the data were built at; `None` means the base (limit) data.
    pub nu_data: Option<f64>,
    /// Mollification scale applied to data and forcing (linear problems).
    pub mollify_ell: Option<f64>,
    pub mollifier_profile: Option<MollifierProfile>,
}

impl RunEcho {
    fn to_value(&self) -> Result<serde_json::Value, HarnessError> {
        Ok(serde_json::to_value(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearTarget {
    /// Mollified problem transported by the reference velocity.
    Reference,
    /// Mollified problem transported by rung `k`'s velocity at its viscosity.
    Rung(usize),
}

/// Load a previously saved run if it is complete and was produced by the
/// same solver config and data recipe.
fn load_cached(dir: &Path, want_cfg: &SolverConfig, want_echo: &serde_json::Value) -> Option<Trajectory> {
    let (traj, manifest) = Trajectory::load(dir).ok()?;
    if manifest.status != "complete" {
        return None;
    }
    if &manifest.config != want_cfg {
        return None;
    }
    if manifest.forcing.as_ref() != Some(want_echo) {
        return None;
    }
    Some(traj)
}

fn solve_and_persist(
    dir: &Path,
    w0: &crate::field::SpectralField,
    scfg: &SolverConfig,
    forcing: &ForcingSpec,
    mode: SolveMode<'_>,
    echo: serde_json::Value,
    store_velocity: bool,
) -> Result<Trajectory, HarnessError> {
    match solve(w0, scfg, forcing, mode) {
        Ok(traj) => {
            let mut opts = SaveOptions::complete();
            opts.store_velocity = store_velocity;
            opts.forcing_echo = Some(echo);
            traj.save(dir, &opts)?;
            Ok(traj)
        }
        Err(abort) => {
            let mut opts = SaveOptions::aborted(&abort.error);
            opts.forcing_echo = Some(echo);
            // Best effort: the partial trajectory is evidence, not a result.
            let _ = abort.partial.save(dir, &opts);
            Err(HarnessError::Abort(abort.error.to_string()))
        }
    }
}

/// Solve (or reload) the nonlinear run at rung `k` of the viscosity ladder.
pub fn ensure_rung(cfg: &ExperimentConfig, k: usize) -> Result<Trajectory, HarnessError> {
    let nu = *cfg
        .nu_ladder
        .get(k)
        .ok_or_else(|| HarnessError::Config(format!("rung {k} outside the ladder")))?;
    let grid = cfg.run_grid()?;
    let scfg = cfg.solver_config(grid, nu);
    let echo = RunEcho {
        initial_family: cfg.initial_family.clone(),
        forcing_family: cfg.forcing_family.clone(),
        nu_data: Some(nu),
        mollify_ell: None,
        mollifier_profile: None,
    }
    .to_value()?;
    let dir = cfg.rung_dir(k);
    if let Some(traj) = load_cached(&dir, &scfg, &echo) {
        return Ok(traj);
    }
    let w0 = cfg.initial_at(Some(nu), grid)?;
    let forcing = cfg.forcing_at(Some(nu), grid)?;
    solve_and_persist(&dir, &w0, &scfg, &forcing, SolveMode::Nonlinear, echo, cfg.store_velocity)
}

/// Solve (or reload) the inviscid reference at the finest grid.
pub fn ensure_reference(cfg: &ExperimentConfig) -> Result<Trajectory, HarnessError> {
    let grid = cfg.reference_grid()?;
    let scfg = cfg.solver_config(grid, 0.0);
    let echo = RunEcho {
        initial_family: cfg.initial_family.clone(),
        forcing_family: cfg.forcing_family.clone(),
        nu_data: None,
        mollify_ell: None,
        mollifier_profile: None,
    }
    .to_value()?;
    let dir = cfg.reference_dir();
    if let Some(traj) = load_cached(&dir, &scfg, &echo) {
        return Ok(traj);
    }
    let w0 = cfg.initial_at(None, grid)?;
    let forcing = cfg.forcing_at(None, grid)?;
    solve_and_persist(&dir, &w0, &scfg, &forcing, SolveMode::Nonlinear, echo, cfg.store_velocity)
}

/// Extrapolate the two finest rungs to zero viscosity assuming the deviation
/// from the limit is first order in viscosity.
fn richardson_reference(
    finest: &Trajectory,
    previous: &Trajectory,
    nu_min: f64,
    nu_prev: f64,
) -> Result<Trajectory, HarnessError> {
    let times = diagnostics::common_times(finest, previous);
    let lever = nu_min / (nu_prev - nu_min);
    let mut snapshots = Vec::with_capacity(times.len());
    for &t in &times {
        let a = finest.vorticity_at(t)?;
        let b = previous.vorticity_at(t)?;
        snapshots.push(a.linear_combination(1.0 + lever, &b, -lever).map_err(EvolutionError::from)?);
    }
    let mut config = finest.config.clone();
    config.nu = 0.0;
    Ok(Trajectory {
        config,
        times,
        snapshots,
        records: Vec::new(),
        steps: finest.steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub nu: f64,
    pub resolution: usize,
    /// Accepted solver steps (deterministic runtime proxy).
    pub runtime_steps: usize,
    /// Distance to the configured reference; `None` when the rung failed.
    pub distance: Option<f64>,
    /// Distance to the alternative reference (sensitivity of the proxy).
    pub alt_distance: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// True when distances strictly decrease along the ladder.
    pub monotone_flag: bool,
}

pub const CONVERGENCE_CSV_HEADER: &str =
    "nu,resolution,runtime_steps,distance,alt_distance,status";

/// Run every rung of the viscosity ladder, measure `sup_t L^p` distances to
/// the reference, and flag monotone decay. Rung failures are recorded as
/// rows, not propagated; a reference failure is fatal.
pub fn run_viscosity_sweep(cfg: &ExperimentConfig) -> Result<ConvergenceTable, HarnessError> {
    cfg.validate()?;
    if cfg.nu_ladder.is_empty() {
        return Ok(ConvergenceTable { rows: Vec::new(), monotone_flag: true });
    }
    std::fs::create_dir_all(cfg.runs_dir())?;
    let euler_reference = ensure_reference(cfg)?;
    let run_grid = cfg.run_grid()?;
    let euler_on_run_grid = euler_reference.restrict_to(run_grid)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<Trajectory, String>> = pool.install(|| {
        use rayon::prelude::*;
        (0..cfg.nu_ladder.len())
            .into_par_iter()
            .map(|k| ensure_rung(cfg, k).map_err(|e| e.to_string()))
            .collect()
    });

    // Pick the configured main reference and the alternative one.
    let finest_ok = outcomes.last().and_then(|r| r.as_ref().ok());
    let richardson = if cfg.reference == ReferenceMode::Richardson {
        let len = cfg.nu_ladder.len();
        match (outcomes[len - 1].as_ref().ok(), outcomes[len - 2].as_ref().ok()) {
            (Some(fine), Some(prev)) => Some(richardson_reference(
                fine,
                prev,
                cfg.nu_ladder[len - 1],
                cfg.nu_ladder[len - 2],
            )?),
            _ => None,
        }
    } else {
        None
    };

    let mut rows = Vec::with_capacity(cfg.nu_ladder.len());
    for (k, outcome) in outcomes.iter().enumerate() {
        let nu = cfg.nu_ladder[k];
        match outcome {
            Ok(traj) => {
                let main_ref: Option<&Trajectory> = match cfg.reference {
                    ReferenceMode::Euler => Some(&euler_on_run_grid),
                    ReferenceMode::FinestNu => finest_ok,
                    ReferenceMode::Richardson => richardson.as_ref(),
                };
                let alt_ref: Option<&Trajectory> = match cfg.reference {
                    ReferenceMode::Euler => finest_ok,
                    _ => Some(&euler_on_run_grid),
                };
                let distance = match main_ref {
                    Some(r) => Some(pair_distance(traj, r, cfg.p)?),
                    None => None,
                };
                let alt_distance = match alt_ref {
                    Some(r) => Some(pair_distance(traj, r, cfg.p)?),
                    None => None,
                };
                rows.push(ConvergenceRow {
                    nu,
                    resolution: traj.grid().n(),
                    runtime_steps: traj.steps,
                    distance,
                    alt_distance,
                    status: if main_ref.is_some() { "ok" } else { "no_reference" }.into(),
                });
            }
            Err(msg) => rows.push(ConvergenceRow {
                nu,
                resolution: run_grid.n(),
                runtime_steps: 0,
                distance: None,
                alt_distance: None,
                status: msg.replace(',', ";"),
            }),
        }
    }
    let ok_distances: Vec<f64> = rows.iter().filter_map(|r| r.distance).collect();
    let monotone_flag = ok_distances.len() == rows.len()
        && ok_distances.windows(2).all(|w| w[1] < w[0]);
    Ok(ConvergenceTable { rows, monotone_flag })
}

pub fn write_convergence_csv(table: &ConvergenceTable, path: &Path) -> Result<(), HarnessError> {
    let mut out = Vec::new();
    writeln!(out, "{CONVERGENCE_CSV_HEADER}")?;
    for r in &table.rows {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
        writeln!(
            out,
            "{:.12e},{},{},{},{},{}",
            r.nu,
            r.resolution,
            r.runtime_steps,
            fmt(r.distance),
            fmt(r.alt_distance),
            r.status
        )?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Solve (or reload) one mollified linear problem: data and forcing are
/// convolved with the scale-`ell` kernel, and the transporting velocity is
/// frozen from the persisted source trajectory.
pub fn run_linear_program(
    cfg: &ExperimentConfig,
    ell: f64,
    target: LinearTarget,
) -> Result<Trajectory, HarnessError> {
    cfg.validate()?;
    if !(ell > 0.0) {
        return Err(HarnessError::Config(format!("ell must be positive, got {ell}")));
    }
    let (source_dir, nu, data_nu) = match target {
        LinearTarget::Reference => (cfg.reference_dir(), 0.0, None),
        LinearTarget::Rung(k) => {
            let nu = *cfg
                .nu_ladder
                .get(k)
                .ok_or_else(|| HarnessError::Config(format!("rung {k} outside the ladder")))?;
            (cfg.rung_dir(k), nu, Some(nu))
        }
    };
    let (source, source_manifest) = Trajectory::load(&source_dir)
        .map_err(|_| HarnessError::MissingTrajectory(source_dir.clone()))?;
    if source_manifest.status != "complete" {
        return Err(HarnessError::MissingTrajectory(source_dir));
    }
    let grid = *source.grid();
    let scfg = cfg.solver_config(grid, nu);
    let echo = RunEcho {
        initial_family: cfg.initial_family.clone(),
        forcing_family: cfg.forcing_family.clone(),
        nu_data: data_nu,
        mollify_ell: Some(ell),
        mollifier_profile: Some(cfg.mollifier_profile),
    }
    .to_value()?;
    let dir = cfg.linear_dir(ell, target);
    if let Some(traj) = load_cached(&dir, &scfg, &echo) {
        return Ok(traj);
    }
    let kernel = make_kernel(grid, ell, cfg.mollifier_profile)?;
    let w0 = mollify(&cfg.initial_at(data_nu, grid)?, &kernel)?;
    let forcing = cfg.forcing_at(data_nu, grid)?.with_mollifier(kernel);
    solve_and_persist(
        &dir,
        &w0,
        &scfg,
        &forcing,
        SolveMode::LinearFrozen(&source),
        echo,
        cfg.store_velocity,
    )
}

/// `int_0^T || g * kernel - g ||_p dt`: closed form for separable forcing,
/// trapezoid over stored snapshots otherwise.
fn forcing_mollification_l1(
    forcing: &ForcingSpec,
    kernel: &crate::mollifier::MollifierKernel,
    p: f64,
    t_end: f64,
) -> Result<f64, HarnessError> {
    if forcing.mollified_by.is_some() {
        return Err(HarnessError::Config(
            "forcing is already mollified; the smoothing error is measured against raw forcing"
                .into(),
        ));
    }
    match &forcing.mode {
        ForcingMode::Zero => Ok(0.0),
        ForcingMode::Analytic { shape, envelope } => {
            Ok(mollification_error(shape, kernel, p)? * envelope.l1_on(t_end))
        }
        ForcingMode::Prescribed(traj) => {
            let mut vals = Vec::with_capacity(traj.times.len());
            for w in &traj.snapshots {
                vals.push(mollification_error(w, kernel, p)?);
            }
            let mut acc = 0.0;
            for i in 1..traj.times.len() {
                let (t0, t1) = (traj.times[i - 1].min(t_end), traj.times[i].min(t_end));
                acc += 0.5 * (t1 - t0) * (vals[i - 1] + vals[i]);
            }
            Ok(acc)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma1Row {
    pub k: usize,
    pub nu: f64,
    /// Measured `sup_t || linear - nonlinear ||_p`.
    pub lhs: f64,
    /// Mollification errors of the datum and the forcing.
    pub rhs: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma1Report {
    pub ell: f64,
    pub rows: Vec<Lemma1Row>,
    pub reference_lhs: f64,
    pub reference_rhs: f64,
    /// Uniformity witness: the worst rung at this scale.
    pub max_lhs_over_k: f64,
}

/// Compare every rung's mollified linear solution against its nonlinear run
/// (and the reference pair), with the smoothing-error bound alongside.
pub fn lemma1_report(cfg: &ExperimentConfig, ell: f64) -> Result<Lemma1Report, HarnessError> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.nu_ladder.len());
    let mut max_lhs = 0.0_f64;
    for k in 0..cfg.nu_ladder.len() {
        let nu = cfg.nu_ladder[k];
        let nl_dir = cfg.rung_dir(k);
        let (nonlinear, _) = Trajectory::load(&nl_dir)
            .map_err(|_| HarnessError::MissingTrajectory(nl_dir))?;
        let linear = load_linear(cfg, ell, LinearTarget::Rung(k))?;
        let lhs = pair_distance(&linear, &nonlinear, cfg.p)?;
        let grid = *nonlinear.grid();
        let kernel = make_kernel(grid, ell, cfg.mollifier_profile)?;
        let w0 = cfg.initial_at(Some(nu), grid)?;
        let rhs = mollification_error(&w0, &kernel, cfg.p)?
            + forcing_mollification_l1(&cfg.forcing_at(Some(nu), grid)?, &kernel, cfg.p, cfg.t_end)?;
        max_lhs = max_lhs.max(lhs);
        rows.push(Lemma1Row { k, nu, lhs, rhs, gap: lhs - rhs });
    }

    let ref_dir = cfg.reference_dir();
    let (reference, _) =
        Trajectory::load(&ref_dir).map_err(|_| HarnessError::MissingTrajectory(ref_dir))?;
    let linear_ref = load_linear(cfg, ell, LinearTarget::Reference)?;
    let reference_lhs = pair_distance(&linear_ref, &reference, cfg.p)?;
    let grid = *reference.grid();
    let kernel = make_kernel(grid, ell, cfg.mollifier_profile)?;
    let w0 = cfg.initial_at(None, grid)?;
    let reference_rhs = mollification_error(&w0, &kernel, cfg.p)?
        + forcing_mollification_l1(&cfg.forcing_at(None, grid)?, &kernel, cfg.p, cfg.t_end)?;

    Ok(Lemma1Report { ell, rows, reference_lhs, reference_rhs, max_lhs_over_k: max_lhs })
}

fn load_linear(cfg: &ExperimentConfig, ell: f64, target: LinearTarget) -> Result<Trajectory, HarnessError> {
    let dir = cfg.linear_dir(ell, target);
    let (traj, manifest) =
        Trajectory::load(&dir).map_err(|_| HarnessError::MissingTrajectory(dir.clone()))?;
    if manifest.status != "complete" {
        return Err(HarnessError::MissingTrajectory(dir));
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriangleRow {
    pub ell: f64,
    pub k: usize,
    pub nu: f64,
    /// `sup_t || rung - reference ||_p`.
    pub total: f64,
    /// `sup_t || rung - linear(rung) ||_p`.
    pub to_linear: f64,
    /// `sup_t || linear(rung) - linear(reference) ||_p`.
    pub mid: f64,
    /// `sup_t || linear(reference) - reference ||_p`.
    pub from_linear: f64,
    /// `max(0, total - (to_linear + mid + from_linear))`; exact norms make
    /// this zero up to rounding when all terms share quadrature times.
    pub violation: f64,
}

/// Evaluate the four-term decomposition
/// `|| rung - ref || <= || rung - lin_k || + || lin_k - lin_ref || + || lin_ref - ref ||`
/// on one `(ell, k)` pair, all terms over one shared set of times.
pub fn triangle_decomposition(
    cfg: &ExperimentConfig,
    ell: f64,
    k: usize,
) -> Result<TriangleRow, HarnessError> {
    cfg.validate()?;
    let nu = *cfg
        .nu_ladder
        .get(k)
        .ok_or_else(|| HarnessError::Config(format!("rung {k} outside the ladder")))?;
    let nl_dir = cfg.rung_dir(k);
    let (rung, _) =
        Trajectory::load(&nl_dir).map_err(|_| HarnessError::MissingTrajectory(nl_dir))?;
    let ref_dir = cfg.reference_dir();
    let (reference, _) =
        Trajectory::load(&ref_dir).map_err(|_| HarnessError::MissingTrajectory(ref_dir))?;
    let lin_k = load_linear(cfg, ell, LinearTarget::Rung(k))?;
    let lin_ref = load_linear(cfg, ell, LinearTarget::Reference)?;

    let run_grid = *rung.grid();
    let reference = reference.restrict_to(run_grid)?;
    let lin_ref = lin_ref.restrict_to(run_grid)?;

    let mut times = diagnostics::common_times(&rung, &reference);
    for t in diagnostics::common_times(&lin_k, &lin_ref) {
        times.push(t);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));

    let total = pair_distance_at(&rung, &reference, cfg.p, &times)?;
    let to_linear = pair_distance_at(&rung, &lin_k, cfg.p, &times)?;
    let mid = pair_distance_at(&lin_k, &lin_ref, cfg.p, &times)?;
    let from_linear = pair_distance_at(&lin_ref, &reference, cfg.p, &times)?;
    let violation = (total - (to_linear + mid + from_linear)).max(0.0);
    Ok(TriangleRow { ell, k, nu, total, to_linear, mid, from_linear, violation })
}

pub const LEMMA1_CSV_HEADER: &str = "ell,role,nu,lhs,rhs,gap";
pub const TRIANGLE_CSV_HEADER: &str = "ell,k,nu,total,to_linear,mid,from_linear,violation";

/// Regenerate `lemma1.csv` and `triangle.csv` from every ladder scale whose
/// linear runs are all present on disk. Scales are emitted in ladder order.
pub fn write_linear_reports(cfg: &ExperimentConfig) -> Result<(usize, usize), HarnessError> {
    let mut lemma_out = Vec::new();
    let mut tri_out = Vec::new();
    writeln!(lemma_out, "{LEMMA1_CSV_HEADER}")?;
    writeln!(tri_out, "{TRIANGLE_CSV_HEADER}")?;
    let mut lemma_rows = 0usize;
    let mut tri_rows = 0usize;
    for &ell in &cfg.ell_ladder {
        let complete = (0..cfg.nu_ladder.len())
            .all(|k| cfg.linear_dir(ell, LinearTarget::Rung(k)).join("manifest.json").exists())
            && cfg
                .linear_dir(ell, LinearTarget::Reference)
                .join("manifest.json")
                .exists();
        if !complete {
            continue;
        }
        let report = lemma1_report(cfg, ell)?;
        for row in &report.rows {
            writeln!(
                lemma_out,
                "{ell:e},k{:02},{:.12e},{:.12e},{:.12e},{:.12e}",
                row.k, row.nu, row.lhs, row.rhs, row.gap
            )?;
            lemma_rows += 1;
        }
        writeln!(
            lemma_out,
            "{ell:e},reference,0e0,{:.12e},{:.12e},{:.12e}",
            report.reference_lhs,
            report.reference_rhs,
            report.reference_lhs - report.reference_rhs
        )?;
        writeln!(
            lemma_out,
            "{ell:e},max_over_k,,{:.12e},,",
            report.max_lhs_over_k
        )?;
        lemma_rows += 2;
        for k in 0..cfg.nu_ladder.len() {
            let row = triangle_decomposition(cfg, ell, k)?;
            writeln!(
                tri_out,
                "{ell:e},{k},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                row.nu, row.total, row.to_linear, row.mid, row.from_linear, row.violation
            )?;
            tri_rows += 1;
        }
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("lemma1.csv"), lemma_out)?;
    std::fs::write(cfg.output_dir.join("triangle.csv"), tri_out)?;
    Ok((lemma_rows, tri_rows))
}

/// Rebuild the forcing a saved run was solved with from its manifest echo.
fn forcing_from_echo(
    echo: Option<&serde_json::Value>,
    grid: TorusGrid,
) -> Result<ForcingSpec, HarnessError> {
    let Some(value) = echo else {
        return Ok(ForcingSpec::zero());
    };
    let echo: RunEcho = serde_json::from_value(value.clone())?;
    let Some(family) = &echo.forcing_family else {
        return Ok(ForcingSpec::zero());
    };
    let mut forcing = match echo.nu_data {
        Some(nu) => family.build(nu, grid)?,
        None => family.build_base(grid)?,
    };
    if let Some(ell) = echo.mollify_ell {
        let profile = echo.mollifier_profile.unwrap_or(MollifierProfile::Gaussian);
        forcing = forcing.with_mollifier(make_kernel(grid, ell, profile)?);
    }
    Ok(forcing)
}

/// Recompute per-snapshot diagnostics and energy-estimate rows for a saved
/// trajectory; writes `diagnostics.csv` and `estimates.csv` into its
/// directory and returns the two row counts.
pub fn diagnose(traj_dir: &Path) -> Result<(usize, usize), HarnessError> {
    let (traj, manifest) = Trajectory::load(traj_dir)?;
    let run_id = traj_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let p = traj.config.p;
    let records = trajectory_records(&traj, p)?;
    let mut diag_out = Vec::new();
    writeln!(diag_out, "{}", diagnostics::DIAGNOSTICS_CSV_HEADER)?;
    diagnostics::write_diagnostics_csv(&mut diag_out, &run_id, &records)?;
    std::fs::write(traj_dir.join("diagnostics.csv"), &diag_out)?;

    let forcing = forcing_from_echo(manifest.forcing.as_ref(), *traj.grid())?;
    let mut estimate_rows = Vec::new();
    let mut exponents = vec![p];
    if (p - 2.0).abs() > 1e-12 {
        exponents.push(2.0);
    }
    for q in exponents {
        estimate_rows.push((run_id.clone(), energy_estimate_report_at(&traj, &forcing, q)?));
    }
    let mut est_out = Vec::new();
    writeln!(est_out, "{}", diagnostics::ESTIMATES_CSV_HEADER)?;
    diagnostics::write_estimates_csv(&mut est_out, &estimate_rows)?;
    std::fs::write(traj_dir.join("estimates.csv"), &est_out)?;
    Ok((records.len(), estimate_rows.len()))
}

/// Minimal line plot with log-scaled axes where the data allow. Every datum
/// is embedded as `data-x`/`data-y` attributes so plots can be checked by
/// parsing, not by eye.
pub fn write_line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64)],
) -> Result<(), HarnessError> {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const ML: f64 = 78.0;
    const MR: f64 = 24.0;
    const MT: f64 = 44.0;
    const MB: f64 = 56.0;
    let finite: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let log_x = finite.iter().all(|(x, _)| *x > 0.0) && !finite.is_empty();
    let log_y = finite.iter().all(|(_, y)| *y > 0.0) && !finite.is_empty();
    let tx = |x: f64| if log_x { x.log10() } else { x };
    let ty = |y: f64| if log_y { y.log10() } else { y };
    let (mut x0, mut x1) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, _)| {
            (lo.min(tx(*x)), hi.max(tx(*x)))
        });
    let (mut y0, mut y1) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, y)| {
            (lo.min(ty(*y)), hi.max(ty(*y)))
        });
    if finite.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let px = |x: f64| ML + (tx(x) - x0) / (x1 - x0) * (W - ML - MR);
    let py = |y: f64| H - MB - (ty(y) - y0) / (y1 - y0) * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        W / 2.0
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#222\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"#222\"/>\n",
        H - MB
    ));
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let vx = if log_x { 10f64.powf(fx) } else { fx };
        let vy = if log_y { 10f64.powf(fy) } else { fy };
        let sx = ML + (W - ML - MR) * i as f64 / 4.0;
        let sy = H - MB - (H - MT - MB) * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{sx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{vx:.2e}</text>\n",
            H - MB + 18.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{sy:.1}\" text-anchor=\"end\">{vy:.2e}</text>\n",
            ML - 8.0
        ));
        svg.push_str(&format!(
            "<line x1=\"{sx:.1}\" y1=\"{:.1}\" x2=\"{sx:.1}\" y2=\"{:.1}\" stroke=\"#222\"/>\n",
            H - MB,
            H - MB + 5.0
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{sy:.1}\" x2=\"{ML}\" y2=\"{sy:.1}\" stroke=\"#222\"/>\n",
            ML - 5.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x_label}</text>\n",
        (ML + W - MR) / 2.0,
        H - 14.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">{y_label}</text>\n",
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0
    ));
    if finite.len() > 1 {
        let pts: Vec<String> = finite
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"#0b62a4\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
    }
    for (x, y) in &finite {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"#0b62a4\" data-x=\"{x:.12e}\" data-y=\"{y:.12e}\"/>\n",
            px(*x),
            py(*y)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect())
}

/// Render `distance_vs_nu.svg` and `distance_vs_ell.svg` from the CSV files
/// in `out_dir`. Returns the plots written.
pub fn report(out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = Vec::new();
    let conv = out_dir.join("convergence.csv");
    if conv.exists() {
        let mut points = Vec::new();
        for row in read_csv_rows(&conv)? {
            if row.len() >= 6 && row[5] == "ok" {
                if let (Ok(nu), Ok(d)) = (row[0].parse::<f64>(), row[3].parse::<f64>()) {
                    points.push((nu, d));
                }
            }
        }
        let path = out_dir.join("distance_vs_nu.svg");
        write_line_plot(
            &path,
            "sup-in-time L^p distance to the reference",
            "viscosity",
            "distance",
            &points,
        )?;
        written.push(path);
    }
    let lemma = out_dir.join("lemma1.csv");
    if lemma.exists() {
        let mut points = Vec::new();
        for row in read_csv_rows(&lemma)? {
            if row.len() >= 4 && row[1] == "max_over_k" {
                if let (Ok(ell), Ok(lhs)) = (row[0].parse::<f64>(), row[3].parse::<f64>()) {
                    points.push((ell, lhs));
                }
            }
        }
        let path = out_dir.join("distance_vs_ell.svg");
        write_line_plot(
            &path,
            "worst-rung linearization distance per mollification scale",
            "mollification scale",
            "max distance over rungs",
            &points,
        )?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Parser, Debug)]
#[command(
    name = "vortex",
    about = "Pseudo-spectral laboratory for 2D incompressible flow in vorticity form",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Replace grid_sizes with this single resolution.
    #[arg(long)]
    grid: Option<usize>,
    /// Override the random seed of seeded initial data and forcing shapes.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the parallelism level.
    #[arg(long)]
    parallel: Option<usize>,
    /// Override the mollifier profile.
    #[arg(long, value_parser = ["gaussian", "bump"])]
    profile: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Solve a single nonlinear run (first ladder rung, or inviscid when the
    /// ladder is empty) and persist it under runs/single.
    Simulate {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the full viscosity ladder and write convergence.csv.
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Solve the mollified linear problems at one scale (all rungs, or one
    /// with --k) and regenerate lemma1.csv and triangle.csv.
    Linearize {
        config: PathBuf,
        #[arg(long)]
        ell: f64,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Recompute diagnostics.csv and estimates.csv for a saved trajectory.
    Diagnose { trajectory_dir: PathBuf },
    /// Render SVG plots from the CSV files in an output directory.
    Report { output_dir: PathBuf },
}

fn apply_seed(spec: &mut InitialDataSpec, seed: u64) {
    if let InitialDataSpec::MultiMode { seed: s, .. } = spec {
        *s = seed;
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, ov: &Overrides) -> Result<(), HarnessError> {
    if let Some(n) = ov.grid {
        cfg.grid_sizes = vec![n];
    }
    if let Some(seed) = ov.seed {
        apply_seed(&mut cfg.initial_family.base, seed);
        if let Some(f) = &mut cfg.forcing_family {
            apply_seed(&mut f.shape, seed);
        }
    }
    if let Some(par) = ov.parallel {
        cfg.parallelism = par;
    }
    if let Some(profile) = &ov.profile {
        cfg.mollifier_profile = match profile.as_str() {
            "gaussian" => MollifierProfile::Gaussian,
            "bump" => MollifierProfile::SmoothBump,
            other => return Err(HarnessError::Config(format!("unknown profile {other}"))),
        };
    }
    cfg.validate()
}

fn load_with_overrides(path: &Path, ov: &Overrides) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(path)?;
    apply_overrides(&mut cfg, ov)?;
    Ok(cfg)
}

const EXIT_OK: i32 = 0;
const EXIT_FAILURE: i32 = 1;
const EXIT_CONFIG: i32 = 2;
const EXIT_ABORT: i32 = 3;

fn exit_code_for(err: &HarnessError) -> i32 {
    match err {
        // Data-recipe and kernel-scale errors surface bad configuration at
        // build time, so they share the configuration exit code.
        HarnessError::Config(_)
        | HarnessError::Json(_)
        | HarnessError::InitialData(_)
        | HarnessError::Mollifier(_) => EXIT_CONFIG,
        HarnessError::Abort(_) => EXIT_ABORT,
        _ => EXIT_FAILURE,
    }
}

/// Entry point behind the `vortex` binary; returns the process exit code.
/// Exit codes: 0 success, 2 configuration failure, 3 solver abort, 1 other
/// operational errors.
pub fn cli_main(args: Vec<String>) -> i32 {
    let mut argv = vec!["vortex".to_string()];
    argv.extend(args);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                EXIT_OK
            } else {
                EXIT_CONFIG
            };
        }
    };
    match run_command(cli.cmd) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn run_command(cmd: Cmd) -> Result<(), HarnessError> {
    let started = std::time::Instant::now();
    match cmd {
        Cmd::Simulate { config, overrides } => {
            let cfg = load_with_overrides(&config, &overrides)?;
            let grid = cfg.run_grid()?;
            let (nu, data_nu) = match cfg.nu_ladder.first() {
                Some(&v) => (v, Some(v)),
                None => (0.0, None),
            };
            let scfg = cfg.solver_config(grid, nu);
            let echo = RunEcho {
                initial_family: cfg.initial_family.clone(),
                forcing_family: cfg.forcing_family.clone(),
                nu_data: data_nu,
                mollify_ell: None,
                mollifier_profile: None,
            }
            .to_value()?;
            let dir = cfg.runs_dir().join("single");
            std::fs::create_dir_all(&dir)?;
            let w0 = cfg.initial_at(data_nu, grid)?;
            let forcing = cfg.forcing_at(data_nu, grid)?;
            let traj = solve_and_persist(
                &dir,
                &w0,
                &scfg,
                &forcing,
                SolveMode::Nonlinear,
                echo,
                cfg.store_velocity,
            )?;
            println!(
                "simulated nu={nu:e} on {n}x{n}: {steps} steps, {snaps} snapshots -> {dir}",
                n = grid.n(),
                steps = traj.steps,
                snaps = traj.times.len(),
                dir = dir.display()
            );
        }
        Cmd::Sweep { config, overrides } => {
            let cfg = load_with_overrides(&config, &overrides)?;
            let table = run_viscosity_sweep(&cfg)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let csv = cfg.output_dir.join("convergence.csv");
            write_convergence_csv(&table, &csv)?;
            for row in &table.rows {
                match row.distance {
                    Some(d) => println!(
                        "nu={:.6e} n={} steps={} distance={:.6e} [{}]",
                        row.nu, row.resolution, row.runtime_steps, d, row.status
                    ),
                    None => println!("nu={:.6e} FAILED: {}", row.nu, row.status),
                }
            }
            println!(
                "monotone decay: {}; table -> {}",
                table.monotone_flag,
                csv.display()
            );
        }
        Cmd::Linearize { config, ell, k, overrides } => {
            let cfg = load_with_overrides(&config, &overrides)?;
            // The linear problems freeze velocities from the nonlinear runs,
            // so make sure those exist before anything else.
            ensure_reference(&cfg)?;
            let rungs: Vec<usize> = match k {
                Some(k) => vec![k],
                None => (0..cfg.nu_ladder.len()).collect(),
            };
            for &k in &rungs {
                ensure_rung(&cfg, k)?;
            }
            run_linear_program(&cfg, ell, LinearTarget::Reference)?;
            for &k in &rungs {
                run_linear_program(&cfg, ell, LinearTarget::Rung(k))?;
            }
            let (lemma_rows, tri_rows) = write_linear_reports(&cfg)?;
            println!(
                "linearized ell={ell:e} for {} rung(s); lemma1.csv ({lemma_rows} rows), triangle.csv ({tri_rows} rows) in {}",
                rungs.len(),
                cfg.output_dir.display()
            );
        }
        Cmd::Diagnose { trajectory_dir } => {
            let (diag_rows, est_rows) = diagnose(&trajectory_dir)?;
            println!(
                "diagnosed {}: {diag_rows} snapshot records, {est_rows} estimate rows",
                trajectory_dir.display()
            );
        }
        Cmd::Report { output_dir } => {
            let written = report(&output_dir)?;
            if written.is_empty() {
                return Err(HarnessError::Config(format!(
                    "no convergence.csv or lemma1.csv found in {}",
                    output_dir.display()
                )));
            }
            for p in &written {
                println!("wrote {}", p.display());
            }
        }
    }
    eprintln!("elapsed: {:.3}s", started.elapsed().as_secs_f64());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_mode_config(out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            grid_sizes: vec![64],
            nu_ladder: vec![0.4, 0.2, 0.1],
            ell_ladder: vec![2.0, 4.0],
            p: 2.0,
            p_tilde: 2.0,
            initial_family: PerturbationFamily {
                base: InitialDataSpec::SingleMode { k: (2, 0), amplitude: 1.0, phase: 0.0 },
                mode: None,
            },
            forcing_family: None,
            t_end: 1.0,
            dt_max: 2e-3,
            cfl: 0.9,
            snapshot_stride: 25,
            mollifier_profile: MollifierProfile::Gaussian,
            reference: ReferenceMode::Euler,
            output_dir: out.to_path_buf(),
            parallelism: 1,
            dealias_fraction: 2.0 / 3.0,
            store_velocity: false,
        }
    }

    #[test]
    fn config_validation_rejects_bad_ladders() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = single_mode_config(dir.path());
        cfg.nu_ladder = vec![0.1, 0.2];
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
        let mut cfg = single_mode_config(dir.path());
        cfg.ell_ladder = vec![4.0, 4.0];
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
        let mut cfg = single_mode_config(dir.path());
        cfg.p = 1.5; // p' = 3, so p_tilde = 2 is too small
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
        let mut cfg = single_mode_config(dir.path());
        cfg.reference = ReferenceMode::Richardson;
        cfg.nu_ladder = vec![0.1];
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let json = r#"{
            "grid_sizes": [32], "nu_ladder": [], "ell_ladder": [],
            "p": 2.0, "p_tilde": 2.0,
            "initial_family": { "base": { "kind": "single_mode", "k": [1, 0], "amplitude": 1.0 } },
            "t_end": 0.1, "output_dir": "out", "mystery_knob": 7
        }"#;
        let parsed: Result<ExperimentConfig, _> = serde_json::from_str(json);
        assert!(parsed.is_err());
    }

    #[test]
    fn empty_ladder_gives_empty_table() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = single_mode_config(dir.path());
        cfg.nu_ladder = Vec::new();
        let table = run_viscosity_sweep(&cfg).unwrap();
        assert!(table.rows.is_empty());
        assert!(table.monotone_flag);
    }

    /// The single-mode fixture has closed-form dynamics, so the whole
    /// pipeline (families, solves, restriction, distances, CSV) can be
    /// checked against exact numbers.
    #[test]
    fn sweep_matches_closed_form_single_mode_distances() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = single_mode_config(dir.path());
        let table = run_viscosity_sweep(&cfg).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert!(table.monotone_flag, "{:?}", table.rows);
        let norm = std::f64::consts::PI * 2.0_f64.sqrt();
        for (row, nu) in table.rows.iter().zip([0.4_f64, 0.2, 0.1]) {
            let expected = (1.0 - (-4.0 * nu).exp()) * norm;
            let got = row.distance.unwrap();
            assert!(
                (got - expected).abs() < 1e-5,
                "nu={nu}: got {got}, want {expected}"
            );
            assert_eq!(row.status, "ok");
            assert!(row.runtime_steps > 0);
        }
        // Alternative reference: the finest rung; its own row reads zero.
        assert_eq!(table.rows[2].alt_distance.unwrap(), 0.0);

        let csv = dir.path().join("convergence.csv");
        write_convergence_csv(&table, &csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with(CONVERGENCE_CSV_HEADER));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn sweep_is_deterministic_across_parallelism() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let mut cfg1 = single_mode_config(dir1.path());
        cfg1.dt_max = 5e-3;
        let mut cfg2 = single_mode_config(dir2.path());
        cfg2.dt_max = 5e-3;
        cfg2.parallelism = 4;
        let t1 = run_viscosity_sweep(&cfg1).unwrap();
        let t2 = run_viscosity_sweep(&cfg2).unwrap();
        let csv1 = dir1.path().join("convergence.csv");
        let csv2 = dir2.path().join("convergence.csv");
        write_convergence_csv(&t1, &csv1).unwrap();
        write_convergence_csv(&t2, &csv2).unwrap();
        assert_eq!(
            std::fs::read(&csv1).unwrap(),
            std::fs::read(&csv2).unwrap(),
            "parallelism must not change the table"
        );
    }

    #[test]
    fn linear_program_requires_persisted_sources() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = single_mode_config(dir.path());
        assert!(matches!(
            run_linear_program(&cfg, 2.0, LinearTarget::Rung(0)),
            Err(HarnessError::MissingTrajectory(_))
        ));
    }

    /// On the single-mode fixture the advection term vanishes identically,
    /// so the linear problems decay in closed form and the uniformity rows
    /// have nearly zero gap between measurement and bound.
    #[test]
    fn linear_pipeline_single_mode_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = single_mode_config(dir.path());
        cfg.dt_max = 5e-3;
        cfg.nu_ladder = vec![0.4, 0.2];
        run_viscosity_sweep(&cfg).unwrap();
        for k in 0..cfg.nu_ladder.len() {
            run_linear_program(&cfg, 2.0, LinearTarget::Rung(k)).unwrap();
        }
        run_linear_program(&cfg, 2.0, LinearTarget::Reference).unwrap();

        let report = lemma1_report(&cfg, 2.0).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            // Measured distance stays within the mollification bound.
            assert!(
                row.lhs <= row.rhs + 1e-6,
                "k={} lhs={} rhs={}",
                row.k,
                row.lhs,
                row.rhs
            );
            // Closed form: both sides equal (1 - multiplier) * ||w0||_2.
            let expected = (1.0 - (-4.0_f64 / 8.0).exp()) * std::f64::consts::PI * 2.0_f64.sqrt();
            assert!((row.rhs - expected).abs() < 1e-10, "rhs {}", row.rhs);
            assert!((row.lhs - expected).abs() < 1e-6, "lhs {}", row.lhs);
        }
        assert!(report.max_lhs_over_k >= report.rows[0].lhs);

        let tri = triangle_decomposition(&cfg, 2.0, 0).unwrap();
        assert!(tri.violation < 1e-10, "violation {}", tri.violation);
        assert!(tri.total > 0.0 && tri.mid > 0.0);

        let (lemma_rows, tri_rows) = write_linear_reports(&cfg).unwrap();
        assert_eq!(lemma_rows, 4); // 2 rungs + reference + max rows
        assert_eq!(tri_rows, 2);
        assert!(dir.path().join("lemma1.csv").exists());
        assert!(dir.path().join("triangle.csv").exists());
    }

    #[test]
    fn svg_plot_embeds_parseable_data_points() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.svg");
        let points = vec![(0.4, 3.5), (0.2, 2.4), (0.1, 1.4)];
        write_line_plot(&path, "test", "x", "y", &points).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut recovered = Vec::new();
        for chunk in text.split("data-x=\"").skip(1) {
            let x: f64 = chunk.split('"').next().unwrap().parse().unwrap();
            let y: f64 = chunk
                .split("data-y=\"")
                .nth(1)
                .unwrap()
                .split('"')
                .next()
                .unwrap()
                .parse()
                .unwrap();
            recovered.push((x, y));
        }
        assert_eq!(recovered, points);
    }

    #[test]
    fn diagnose_writes_record_and_estimate_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = single_mode_config(dir.path());
        cfg.nu_ladder = vec![0.4];
        cfg.t_end = 0.1;
        let _ = run_viscosity_sweep(&cfg).unwrap();
        let rung_dir = cfg.rung_dir(0);
        let (diag_rows, est_rows) = diagnose(&rung_dir).unwrap();
        assert!(diag_rows > 0);
        assert_eq!(est_rows, 1); // p = 2 collapses both exponents
        assert!(rung_dir.join("diagnostics.csv").exists());
        assert!(rung_dir.join("estimates.csv").exists());
    }
}
