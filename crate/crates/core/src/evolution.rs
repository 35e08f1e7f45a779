//! Time integration of the vorticity equation
//!
//! ```text
//! dw/dt + u.grad(w) = nu * lap(w) + g,        u = velocity_from_vorticity(w)
//! ```
//!
//! and of its linear companion where `u` is a prescribed (frozen) velocity.
//!
//! Diffusion is applied exactly through the integrating factor
//! `exp(-nu |k|^2 dt)`; advection and forcing advance with a third-order
//! explicit Runge-Kutta scheme whose stage abscissae increase, so every
//! exponential factor in the scheme decays. With `nu = 0` the scheme reduces
//! to plain third-order Runge-Kutta. The time step adapts each step to
//! `min(dt_max, cfl * spacing / sup|u|)`.

use crate::biot_savart::{velocity_from_vorticity, BiotSavartError, VelocityField};
use crate::diagnostics::DiagnosticsRecord;
use crate::field::{FieldError, PhysicalField, SpectralField, TorusGrid};
use crate::mollifier::{mollify, MollifierError, MollifierKernel};
use crate::snapshot::{read_snapshot, write_snapshot, SnapshotError};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("dt = {dt:.6e} exceeds the admissible step {limit:.6e}")]
    CflViolation { dt: f64, limit: f64 },
    #[error("blow-up detected at t = {time:.6}: sup|w| = {linf:.6e} exceeds {threshold:.6e}")]
    BlowupDetected { time: f64, linf: f64, threshold: f64 },
    #[error("time {requested:.9} is not covered by the stored trajectory on [{lo:.9}, {hi:.9}] (or a snapshot gap is too wide to interpolate)")]
    TrajectoryGap { requested: f64, lo: f64, hi: f64 },
    #[error("forcing must have zero spatial mean")]
    NonZeroMeanForcing,
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    BiotSavart(#[from] BiotSavartError),
    #[error(transparent)]
    Mollifier(#[from] MollifierError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("trajectory io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("diagnostics during solve: {0}")]
    Diagnostics(String),
}

impl From<crate::diagnostics::DiagnosticsError> for EvolutionError {
    fn from(e: crate::diagnostics::DiagnosticsError) -> Self {
        EvolutionError::Diagnostics(e.to_string())
    }
}

/// A solver failure together with the trajectory computed so far.
pub struct SolveAbort {
    pub error: EvolutionError,
    pub partial: Trajectory,
}

impl std::fmt::Debug for SolveAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SolveAbort")
            .field("error", &self.error)
            .field("snapshots", &self.partial.times.len())
            .finish()
    }
}

impl std::fmt::Display for SolveAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for SolveAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Parameters of one evolution run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub grid: TorusGrid,
    /// Viscosity; zero selects the inviscid equation.
    pub nu: f64,
    /// Final time; zero yields a single-snapshot trajectory.
    pub t_end: f64,
    #[serde(default = "default_dt_max")]
    pub dt_max: f64,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    /// Diagnostic Lebesgue exponent recorded along the run.
    #[serde(default = "default_p")]
    pub p: f64,
    /// Keep every `snapshot_stride`-th accepted step (plus both endpoints).
    #[serde(default = "default_stride")]
    pub snapshot_stride: usize,
}

fn default_dt_max() -> f64 {
    1e-2
}
fn default_cfl() -> f64 {
    0.5
}
fn default_p() -> f64 {
    2.0
}
fn default_stride() -> usize {
    1
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        let bad = |msg: String| Err(EvolutionError::InvalidConfig(msg));
        if !(self.nu >= 0.0) || !self.nu.is_finite() {
            return bad(format!("nu must be finite and >= 0, got {}", self.nu));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return bad(format!("t_end must be finite and >= 0, got {}", self.t_end));
        }
        if !(self.dt_max > 0.0) || !self.dt_max.is_finite() {
            return bad(format!("dt_max must be positive, got {}", self.dt_max));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return bad(format!("cfl must lie in (0, 1], got {}", self.cfl));
        }
        if !(self.p > 1.0) {
            return bad(format!("p must exceed 1, got {}", self.p));
        }
        if self.snapshot_stride == 0 {
            return bad("snapshot_stride must be at least 1".into());
        }
        Ok(())
    }
}

/// Temporal envelope of separable forcing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Envelope {
    Constant { value: f64 },
    /// `scale * exp(-rate * t)`.
    ExpDecay { scale: f64, rate: f64 },
}

impl Envelope {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Envelope::Constant { value } => *value,
            Envelope::ExpDecay { scale, rate } => scale * (-rate * t).exp(),
        }
    }

    /// Closed-form `integral of |envelope|` over `[0, t]`.
    pub fn l1_on(&self, t: f64) -> f64 {
        match self {
            Envelope::Constant { value } => value.abs() * t,
            Envelope::ExpDecay { scale, rate } => {
                if rate.abs() < 1e-300 {
                    scale.abs() * t
                } else {
                    scale.abs() * (1.0 - (-rate * t).exp()) / rate
                }
            }
        }
    }
}

/// Right-hand-side forcing for either solver.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingSpec {
    pub mode: ForcingMode,
    /// Convolve the forcing with this kernel before use.
    pub mollified_by: Option<MollifierKernel>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ForcingMode {
    Zero,
    /// `g(t, x) = envelope(t) * shape(x)`.
    Analytic { shape: SpectralField, envelope: Envelope },
    /// Snapshots interpolated linearly in time.
    Prescribed(Box<Trajectory>),
}

impl ForcingSpec {
    pub fn zero() -> Self {
        ForcingSpec { mode: ForcingMode::Zero, mollified_by: None }
    }

    pub fn with_mollifier(mut self, kernel: MollifierKernel) -> Self {
        self.mollified_by = Some(kernel);
        self
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.mode, ForcingMode::Zero)
    }

    /// Resolve into an evaluator on `grid`, applying the mollifier once.
    pub(crate) fn prepare(&self, grid: &TorusGrid) -> Result<ForcingEval, EvolutionError> {
        if let Some(kernel) = &self.mollified_by {
            if kernel.grid() != grid {
                return Err(FieldError::GridMismatch(grid.n(), kernel.grid().n()).into());
            }
        }
        let smooth = |f: &SpectralField| -> Result<SpectralField, EvolutionError> {
            if f.grid() != grid {
                return Err(FieldError::GridMismatch(grid.n(), f.grid().n()).into());
            }
            if f.mean().norm() > 1e-13 * f.coeff_max().max(1e-300) {
                return Err(EvolutionError::NonZeroMeanForcing);
            }
            match &self.mollified_by {
                Some(kernel) => Ok(mollify(f, kernel)?),
                None => Ok(f.clone()),
            }
        };
        match &self.mode {
            ForcingMode::Zero => Ok(ForcingEval::Zero),
            ForcingMode::Analytic { shape, envelope } => Ok(ForcingEval::Separable {
                shape: smooth(shape)?,
                envelope: *envelope,
            }),
            ForcingMode::Prescribed(traj) => {
                if traj.times.is_empty() {
                    return Err(EvolutionError::InvalidConfig(
                        "prescribed forcing trajectory is empty".into(),
                    ));
                }
                let snapshots = traj
                    .snapshots
                    .iter()
                    .map(&smooth)
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(ForcingEval::Sampled { times: traj.times.clone(), snapshots })
            }
        }
    }

    /// Forcing value at time `t` (`None` when identically zero).
    pub fn eval(&self, grid: &TorusGrid, t: f64) -> Result<Option<SpectralField>, EvolutionError> {
        self.prepare(grid)?.at(t)
    }
}

pub(crate) enum ForcingEval {
    Zero,
    Separable { shape: SpectralField, envelope: Envelope },
    Sampled { times: Vec<f64>, snapshots: Vec<SpectralField> },
}

impl ForcingEval {
    pub(crate) fn at(&self, t: f64) -> Result<Option<SpectralField>, EvolutionError> {
        match self {
            ForcingEval::Zero => Ok(None),
            ForcingEval::Separable { shape, envelope } => {
                Ok(Some(shape.scaled(envelope.eval(t)).with_time_tag(t)))
            }
            ForcingEval::Sampled { times, snapshots } => {
                let (i, j, wgt) = bracket(times, t, f64::INFINITY)?;
                let f = snapshots[i].linear_combination(1.0 - wgt, &snapshots[j], wgt)?;
                Ok(Some(f.with_time_tag(t)))
            }
        }
    }
}

/// Locate `t` within sorted `times`. Returns `(left, right, weight)`.
/// `max_gap` bounds the bracketing interval; beyond it the data are
/// considered too sparse to interpolate.
fn bracket(times: &[f64], t: f64, max_gap: f64) -> Result<(usize, usize, f64), EvolutionError> {
    let gap_err = |requested: f64| EvolutionError::TrajectoryGap {
        requested,
        lo: *times.first().unwrap_or(&f64::NAN),
        hi: *times.last().unwrap_or(&f64::NAN),
    };
    if times.is_empty() {
        return Err(gap_err(t));
    }
    let lo = times[0];
    let hi = times[times.len() - 1];
    let slack = 1e-9 * (1.0 + hi.abs().max(lo.abs()));
    if t < lo - slack || t > hi + slack {
        return Err(gap_err(t));
    }
    let t_clamped = t.clamp(lo, hi);
    let idx = times.partition_point(|&s| s <= t_clamped);
    if idx == 0 {
        return Ok((0, 0, 0.0));
    }
    if idx == times.len() {
        return Ok((times.len() - 1, times.len() - 1, 0.0));
    }
    let (a, b) = (idx - 1, idx);
    let width = times[b] - times[a];
    if width > max_gap {
        return Err(gap_err(t));
    }
    if width <= 0.0 {
        return Ok((a, a, 0.0));
    }
    Ok((a, b, (t_clamped - times[a]) / width))
}

/// Snapshots of one evolution run, linearly interpolable in time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub config: SolverConfig,
    pub times: Vec<f64>,
    pub snapshots: Vec<SpectralField>,
    /// Per-snapshot diagnostics (empty for trajectories loaded from disk).
    pub records: Vec<DiagnosticsRecord>,
    /// Accepted solver steps; reported instead of wall time so outputs stay
    /// bit-reproducible.
    pub steps: usize,
}

impl Trajectory {
    pub fn grid(&self) -> &TorusGrid {
        &self.config.grid
    }

    pub fn start_time(&self) -> f64 {
        *self.times.first().unwrap_or(&0.0)
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// Widest admissible snapshot gap: `snapshot_stride` steps of `dt_max`.
    fn max_gap(&self) -> f64 {
        self.config.dt_max * self.config.snapshot_stride as f64 * (1.0 + 1e-6)
    }

    /// Vorticity at time `t`, linearly interpolated between snapshots.
    pub fn vorticity_at(&self, t: f64) -> Result<SpectralField, EvolutionError> {
        let (i, j, wgt) = bracket(&self.times, t, self.max_gap())?;
        if i == j {
            return Ok(self.snapshots[i].clone().with_time_tag(self.times[i]));
        }
        Ok(self.snapshots[i]
            .linear_combination(1.0 - wgt, &self.snapshots[j], wgt)?
            .with_time_tag(t))
    }

    /// Velocity at time `t`. Interpolating the vorticity and inverting is the
    /// same as interpolating the velocity, since the inversion is linear.
    pub fn velocity_at(&self, t: f64) -> Result<VelocityField, EvolutionError> {
        Ok(velocity_from_vorticity(&self.vorticity_at(t)?)?)
    }

    /// Restrict every snapshot to a coarser grid.
    pub fn restrict_to(&self, grid: TorusGrid) -> Result<Trajectory, EvolutionError> {
        let snapshots = self
            .snapshots
            .iter()
            .map(|s| s.restrict_to(grid))
            .collect::<Result<Vec<_>, _>>()?;
        let mut config = self.config.clone();
        config.grid = grid;
        Ok(Trajectory {
            config,
            times: self.times.clone(),
            snapshots,
            records: Vec::new(),
            steps: self.steps,
        })
    }

    /// Persist as a directory of VVF1 files plus `manifest.json`.
    pub fn save(&self, dir: &Path, options: &SaveOptions) -> Result<(), EvolutionError> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.times.len());
        let mut velocity_files = Vec::new();
        for (idx, (t, w)) in self.times.iter().zip(self.snapshots.iter()).enumerate() {
            let name = format!("w_{idx:06}.vvf");
            let nodal = w.to_physical();
            write_snapshot(&dir.join(&name), self.grid().n(), *t, nodal.values())?;
            files.push(name);
            if options.store_velocity {
                let vel = velocity_from_vorticity(w)?;
                let (p1, p2) = vel.to_physical();
                let n1 = format!("u1_{idx:06}.vvf");
                let n2 = format!("u2_{idx:06}.vvf");
                write_snapshot(&dir.join(&n1), self.grid().n(), *t, p1.values())?;
                write_snapshot(&dir.join(&n2), self.grid().n(), *t, p2.values())?;
                velocity_files.push([n1, n2]);
            }
        }
        let manifest = TrajectoryManifest {
            format: MANIFEST_FORMAT.to_string(),
            status: options.status.clone(),
            error: options.error.clone(),
            times: self.times.clone(),
            files,
            velocity_files: if velocity_files.is_empty() {
                None
            } else {
                Some(velocity_files)
            },
            config: self.config.clone(),
            steps: self.steps,
            forcing: options.forcing_echo.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Load a trajectory saved by [`Trajectory::save`].
    pub fn load(dir: &Path) -> Result<(Trajectory, TrajectoryManifest), EvolutionError> {
        let manifest: TrajectoryManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(EvolutionError::InvalidConfig(format!(
                "unknown trajectory format {:?}",
                manifest.format
            )));
        }
        let grid = manifest.config.grid;
        let mut snapshots = Vec::with_capacity(manifest.files.len());
        for (name, t) in manifest.files.iter().zip(manifest.times.iter()) {
            let raw = read_snapshot(&dir.join(name))?;
            if raw.n != grid.n() {
                return Err(EvolutionError::InvalidConfig(format!(
                    "snapshot {name} has grid {} but the manifest says {}",
                    raw.n,
                    grid.n()
                )));
            }
            let nodal = PhysicalField::new(grid, raw.values, *t)?;
            snapshots.push(nodal.to_spectral()?.dealias());
        }
        let traj = Trajectory {
            config: manifest.config.clone(),
            times: manifest.times.clone(),
            snapshots,
            records: Vec::new(),
            steps: manifest.steps,
        };
        Ok((traj, manifest))
    }
}

pub const MANIFEST_FORMAT: &str = "vvf-trajectory-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub format: String,
    pub status: String,
    pub error: Option<String>,
    pub times: Vec<f64>,
    pub files: Vec<String>,
    pub velocity_files: Option<Vec<[String; 2]>>,
    pub config: SolverConfig,
    #[serde(default)]
    pub steps: usize,
    /// Opaque echo of how the forcing was constructed (written by the harness).
    pub forcing: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Default)]
pub struct SaveOptions {
    pub status: String,
    pub error: Option<String>,
    pub store_velocity: bool,
    pub forcing_echo: Option<serde_json::Value>,
}

impl SaveOptions {
    pub fn complete() -> Self {
        SaveOptions {
            status: "complete".into(),
            error: None,
            store_velocity: false,
            forcing_echo: None,
        }
    }

    pub fn aborted(error: &EvolutionError) -> Self {
        SaveOptions {
            status: "aborted".into(),
            error: Some(error.to_string()),
            store_velocity: false,
            forcing_echo: None,
        }
    }
}

/// Which equation [`solve`] integrates.
#[derive(Clone, Copy)]
pub enum SolveMode<'a> {
    /// Velocity recomputed from the evolving vorticity each stage.
    Nonlinear,
    /// Velocity frozen from a stored trajectory, sampled at stage times by
    /// linear interpolation.
    LinearFrozen(&'a Trajectory),
}

/// `u . grad(w)` computed pseudo-spectrally: nodal product of the velocity
/// with the spectral gradient, transformed back, dealiased, mean-projected.
pub fn advection(vel: &VelocityField, w: &SpectralField) -> Result<SpectralField, EvolutionError> {
    if vel.grid() != w.grid() {
        return Err(FieldError::GridMismatch(vel.grid().n(), w.grid().n()).into());
    }
    let (u1, u2) = vel.to_physical();
    let d1 = w.derivative(crate::field::Axis::X1).to_physical();
    let d2 = w.derivative(crate::field::Axis::X2).to_physical();
    let values = u1.values() * d1.values() + u2.values() * d2.values();
    let nodal = PhysicalField::new(*w.grid(), values, w.time_tag())?;
    Ok(nodal.to_spectral()?.dealias())
}

/// Multiply coefficients by the exact diffusion factor `exp(-nu |k|^2 tau)`.
fn damp(f: &SpectralField, nu: f64, tau: f64) -> SpectralField {
    if nu == 0.0 || tau == 0.0 {
        return f.clone();
    }
    f.map_modes(|k1, k2, c| {
        let kk = (k1 * k1 + k2 * k2) as f64;
        c * (-nu * kk * tau).exp()
    })
}

/// One integrating-factor RK3 step (Heun abscissae 0, 1/3, 2/3).
///
/// `rhs(w, t)` must return the advection + forcing part of `dw/dt`.
fn rk3_if_step(
    w: &SpectralField,
    nu: f64,
    t: f64,
    dt: f64,
    rhs: &mut dyn FnMut(&SpectralField, f64) -> Result<SpectralField, EvolutionError>,
) -> Result<SpectralField, EvolutionError> {
    let k1 = rhs(w, t)?;
    let w2 = damp(&w.linear_combination(1.0, &k1, dt / 3.0)?, nu, dt / 3.0);
    let k2 = rhs(&w2, t + dt / 3.0)?;
    let w3 = damp(w, nu, 2.0 * dt / 3.0)
        .linear_combination(1.0, &damp(&k2, nu, dt / 3.0), 2.0 * dt / 3.0)?;
    let k3 = rhs(&w3, t + 2.0 * dt / 3.0)?;
    let mut out = damp(w, nu, dt)
        .linear_combination(1.0, &damp(&k1, nu, dt), dt / 4.0)?
        .linear_combination(1.0, &damp(&k3, nu, dt / 3.0), 3.0 * dt / 4.0)?;
    out.project_zero_mean();
    out.set_time_tag(t + dt);
    Ok(out.dealias())
}

struct NonlinearRhs<'a> {
    forcing: &'a ForcingEval,
    /// Velocity already computed for the step's start state (CFL reuse).
    cached_start: Option<VelocityField>,
}

impl NonlinearRhs<'_> {
    fn eval(&mut self, w: &SpectralField, t: f64) -> Result<SpectralField, EvolutionError> {
        let vel = match self.cached_start.take() {
            Some(v) if v.source_time() == w.time_tag() => v,
            _ => velocity_from_vorticity(w)?,
        };
        let adv = advection(&vel, w)?;
        let mut rhs = match self.forcing.at(t)? {
            Some(g) => g.try_sub(&adv)?,
            None => adv.scaled(-1.0),
        };
        rhs.project_zero_mean();
        Ok(rhs.dealias())
    }
}

struct FrozenRhs<'a> {
    forcing: &'a ForcingEval,
    source: &'a Trajectory,
}

impl FrozenRhs<'_> {
    fn eval(&mut self, theta: &SpectralField, t: f64) -> Result<SpectralField, EvolutionError> {
        let vel = self.source.velocity_at(t)?;
        let adv = advection(&vel, theta)?;
        let mut rhs = match self.forcing.at(t)? {
            Some(g) => g.try_sub(&adv)?,
            None => adv.scaled(-1.0),
        };
        rhs.project_zero_mean();
        Ok(rhs.dealias())
    }
}

/// Advance the nonlinear equation by one step of size `dt`.
///
/// `dt` must respect both `dt_max` and the CFL bound computed from the
/// Biot-Savart velocity of `w`; the simulation time is `w`'s time tag.
pub fn step_nonlinear(
    w: &SpectralField,
    cfg: &SolverConfig,
    forcing: &ForcingSpec,
    dt: f64,
) -> Result<SpectralField, EvolutionError> {
    cfg.validate()?;
    if w.grid() != &cfg.grid {
        return Err(FieldError::GridMismatch(cfg.grid.n(), w.grid().n()).into());
    }
    let eval = forcing.prepare(&cfg.grid)?;
    let vel = velocity_from_vorticity(w)?;
    let limit = admissible_dt(cfg, vel.max_nodal_speed(), f64::INFINITY);
    if dt > limit * (1.0 + 1e-9) {
        return Err(EvolutionError::CflViolation { dt, limit });
    }
    let mut rhs = NonlinearRhs { forcing: &eval, cached_start: Some(vel) };
    rk3_if_step(w, cfg.nu, w.time_tag(), dt, &mut |f, t| rhs.eval(f, t))
}

/// Advance the frozen-velocity linear equation by one step of size `dt`,
/// holding `frozen_u` and `g_snapshot` fixed across the step.
///
/// Time-accurate stage sampling of a moving velocity is what
/// [`solve`] with [`SolveMode::LinearFrozen`] provides; this entry point is
/// the constant-coefficient kernel underneath it.
pub fn step_linear(
    theta: &SpectralField,
    frozen_u: &VelocityField,
    nu: f64,
    g_snapshot: Option<&SpectralField>,
    dt: f64,
) -> Result<SpectralField, EvolutionError> {
    if theta.grid() != frozen_u.grid() {
        return Err(FieldError::GridMismatch(theta.grid().n(), frozen_u.grid().n()).into());
    }
    if !(nu >= 0.0) || !(dt > 0.0) {
        return Err(EvolutionError::InvalidConfig(format!(
            "need nu >= 0 and dt > 0, got nu = {nu}, dt = {dt}"
        )));
    }
    // Hard stability bound (unit Courant number) since no config is supplied.
    let umax = frozen_u.max_nodal_speed();
    if umax > 0.0 {
        let limit = theta.grid().spacing() / umax;
        if dt > limit * (1.0 + 1e-9) {
            return Err(EvolutionError::CflViolation { dt, limit });
        }
    }
    if let Some(g) = g_snapshot {
        if g.grid() != theta.grid() {
            return Err(FieldError::GridMismatch(theta.grid().n(), g.grid().n()).into());
        }
    }
    rk3_if_step(theta, nu, theta.time_tag(), dt, &mut |f, _t| {
        let adv = advection(frozen_u, f)?;
        let mut rhs = match g_snapshot {
            Some(g) => g.try_sub(&adv)?,
            None => adv.scaled(-1.0),
        };
        rhs.project_zero_mean();
        Ok(rhs.dealias())
    })
}

fn admissible_dt(cfg: &SolverConfig, umax: f64, remaining: f64) -> f64 {
    let mut dt = cfg.dt_max.min(remaining);
    if umax > 0.0 {
        dt = dt.min(cfg.cfl * cfg.grid.spacing() / umax);
    }
    dt
}

/// Integrate from `w0` at time zero to `cfg.t_end`.
///
/// The trajectory always contains the initial and final states; intermediate
/// states are kept every `cfg.snapshot_stride` accepted steps. On failure the
/// partial trajectory computed so far is returned inside [`SolveAbort`].
pub fn solve(
    w0: &SpectralField,
    cfg: &SolverConfig,
    forcing: &ForcingSpec,
    mode: SolveMode<'_>,
) -> Result<Trajectory, SolveAbort> {
    let mut traj = Trajectory {
        config: cfg.clone(),
        times: Vec::new(),
        snapshots: Vec::new(),
        records: Vec::new(),
        steps: 0,
    };
    match solve_inner(w0, cfg, forcing, mode, &mut traj) {
        Ok(()) => Ok(traj),
        Err(error) => Err(SolveAbort { error, partial: traj }),
    }
}

fn solve_inner(
    w0: &SpectralField,
    cfg: &SolverConfig,
    forcing: &ForcingSpec,
    mode: SolveMode<'_>,
    traj: &mut Trajectory,
) -> Result<(), EvolutionError> {
    cfg.validate()?;
    if w0.grid() != &cfg.grid {
        return Err(FieldError::GridMismatch(cfg.grid.n(), w0.grid().n()).into());
    }
    if let SolveMode::LinearFrozen(source) = mode {
        if source.grid() != &cfg.grid {
            return Err(FieldError::GridMismatch(cfg.grid.n(), source.grid().n()).into());
        }
    }
    let eval = forcing.prepare(&cfg.grid)?;

    let mut w = w0.dealias().with_time_tag(0.0);
    w.project_zero_mean();
    let initial_linf = w.to_physical().max_abs();
    // "Blow-up" compares against the initial size; a zero initial state has
    // no scale to compare against, so only non-finite values abort then.
    let blowup_threshold = if initial_linf > 0.0 {
        1e6 * initial_linf
    } else {
        f64::INFINITY
    };

    let record = |w: &SpectralField, vel: &VelocityField| {
        crate::diagnostics::snapshot_record(w, vel, cfg.p)
    };

    let start_vel = stage_velocity(&w, 0.0, mode)?;
    traj.times.push(0.0);
    traj.snapshots.push(w.clone());
    traj.records.push(record(&w, &start_vel)?);

    let t_end = cfg.t_end;
    let mut t = 0.0;
    let mut steps_since_snapshot = 0usize;
    let time_slack = 1e-12 * (1.0 + t_end);

    while t < t_end - time_slack {
        let vel = stage_velocity(&w, t, mode)?;
        let mut dt = admissible_dt(cfg, vel.max_nodal_speed(), t_end - t);
        // Land exactly on t_end rather than leaving a sliver step.
        if t_end - t - dt < 1e-9 * dt {
            dt = t_end - t;
        }
        w = match mode {
            SolveMode::Nonlinear => {
                let mut rhs = NonlinearRhs { forcing: &eval, cached_start: Some(vel) };
                rk3_if_step(&w, cfg.nu, t, dt, &mut |f, s| rhs.eval(f, s))?
            }
            SolveMode::LinearFrozen(source) => {
                let mut rhs = FrozenRhs { forcing: &eval, source };
                rk3_if_step(&w, cfg.nu, t, dt, &mut |f, s| rhs.eval(f, s))?
            }
        };
        t += dt;
        if (t_end - t).abs() <= time_slack {
            t = t_end;
        }
        w.set_time_tag(t);
        traj.steps += 1;

        let linf = w.to_physical().max_abs();
        if !linf.is_finite() || linf > blowup_threshold {
            return Err(EvolutionError::BlowupDetected {
                time: t,
                linf,
                threshold: blowup_threshold,
            });
        }

        steps_since_snapshot += 1;
        let at_end = t >= t_end - time_slack;
        if steps_since_snapshot == cfg.snapshot_stride || at_end {
            let vel_now = stage_velocity(&w, t, mode)?;
            traj.times.push(t);
            traj.snapshots.push(w.clone());
            traj.records.push(record(&w, &vel_now)?);
            steps_since_snapshot = 0;
        }
    }
    Ok(())
}

fn stage_velocity(
    w: &SpectralField,
    t: f64,
    mode: SolveMode<'_>,
) -> Result<VelocityField, EvolutionError> {
    match mode {
        SolveMode::Nonlinear => Ok(velocity_from_vorticity(w)?),
        SolveMode::LinearFrozen(source) => source.velocity_at(t),
    }
}
