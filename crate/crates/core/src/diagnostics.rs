//! Norms, estimates, and identities measured on trajectories.
//!
//! Everything here is a pure reader: nothing mutates a trajectory, so all
//! diagnostics may run concurrently over shared data.
//!
//! Quadrature conventions. Space integrals use the uniform nodal sum
//! `sum |v|^p spacing^2`, which is spectrally accurate for periodic smooth
//! integrands. Time integrals use the trapezoid rule over snapshot times.
//! Genuinely singular data are therefore measured as their band-limited
//! proxies; comparisons across resolutions, not against continuum values,
//! are the honest use of those numbers.

use crate::biot_savart::{velocity_from_vorticity, VelocityField};
use crate::evolution::{EvolutionError, ForcingSpec, Trajectory};
use crate::field::{Axis, FieldError, PhysicalField, SpectralField};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("L^p exponent must be >= 1 or infinite, got {0}")]
    BadExponent(f64),
    #[error("trajectory contains no snapshots")]
    EmptyTrajectory,
    #[error("trajectories cannot be aligned at t = {requested:.9}: snapshot gaps exceed the interpolation limit or horizons differ")]
    TimeMisalignment { requested: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("evolution failure during diagnostics: {0}")]
    Evolution(Box<EvolutionError>),
}

impl From<EvolutionError> for DiagnosticsError {
    fn from(e: EvolutionError) -> Self {
        match e {
            EvolutionError::TrajectoryGap { requested, .. } => {
                DiagnosticsError::TimeMisalignment { requested }
            }
            EvolutionError::Field(f) => DiagnosticsError::Field(f),
            other => DiagnosticsError::Evolution(Box::new(other)),
        }
    }
}

/// Smoothing floor for `|w|` inside [`grad_halfp_norm`]: `p < 2` makes
/// `|w|^{p/2}` non-smooth at zeros, so `|w|` is replaced by
/// `sqrt(w^2 + DELTA^2)`.
pub const ABS_SMOOTHING: f64 = 1e-12;

const TORUS_AREA: f64 = 4.0 * std::f64::consts::PI * std::f64::consts::PI;

fn validate_exponent(p: f64) -> Result<(), DiagnosticsError> {
    if p.is_infinite() && p > 0.0 {
        return Ok(());
    }
    if p.is_finite() && p >= 1.0 {
        return Ok(());
    }
    Err(DiagnosticsError::BadExponent(p))
}

/// `(sum |values|^p spacing^2)^{1/p}`; `p = inf` gives the nodal max.
pub fn lp_norm_physical(f: &PhysicalField, p: f64) -> Result<f64, DiagnosticsError> {
    validate_exponent(p)?;
    if p.is_infinite() {
        return Ok(f.max_abs());
    }
    let dx2 = f.grid().spacing() * f.grid().spacing();
    let sum: f64 = f.values().iter().map(|v| v.abs().powf(p)).sum();
    Ok((sum * dx2).powf(1.0 / p))
}

/// L^p norm of the field's nodal values.
pub fn lp_norm(f: &SpectralField, p: f64) -> Result<f64, DiagnosticsError> {
    lp_norm_physical(&f.to_physical(), p)
}

/// `integral of f·g dx` by nodal quadrature.
pub fn inner_product(f: &PhysicalField, g: &PhysicalField) -> Result<f64, DiagnosticsError> {
    f.grid().require_same(g.grid())?;
    let dx2 = f.grid().spacing() * f.grid().spacing();
    let sum: f64 = f
        .values()
        .iter()
        .zip(g.values().iter())
        .map(|(a, b)| a * b)
        .sum();
    Ok(sum * dx2)
}

/// `|| grad ( (w^2 + delta^2)^{p/4} ) ||_{L^2}`, the dissipation integrand of
/// the viscous L^p energy estimate.
pub fn grad_halfp_norm(w: &SpectralField, p: f64) -> Result<f64, DiagnosticsError> {
    validate_exponent(p)?;
    if p.is_infinite() {
        return Err(DiagnosticsError::BadExponent(p));
    }
    let nodal = w.to_physical();
    let d2 = ABS_SMOOTHING * ABS_SMOOTHING;
    let powered: Array2<f64> = nodal.values().mapv(|v| (v * v + d2).powf(p / 4.0));
    let s = PhysicalField::new(*w.grid(), powered, w.time_tag())?
        .to_spectral_keep_mean()?;
    let g1 = lp_norm(&s.derivative(Axis::X1), 2.0)?;
    let g2 = lp_norm(&s.derivative(Axis::X2), 2.0)?;
    Ok(g1.hypot(g2))
}

/// Bounded renormalizing functions with closed-form derivatives: each is
/// bounded with bounded derivative and vanishes at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Renormalizer {
    /// `beta(s) = tanh(s)`.
    Tanh,
    /// `beta(s) = s / (1 + s^2)`.
    Rational,
    /// Identity inside `[-bound, bound]`, saturating smoothly (C^2) outside:
    /// `sign(s) (bound + tanh(|s| - bound))`.
    ClippedIdentity { bound: f64 },
}

impl Renormalizer {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Renormalizer::Tanh => s.tanh(),
            Renormalizer::Rational => s / (1.0 + s * s),
            Renormalizer::ClippedIdentity { bound } => {
                if s.abs() <= *bound {
                    s
                } else {
                    s.signum() * (bound + (s.abs() - bound).tanh())
                }
            }
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        match self {
            Renormalizer::Tanh => {
                let t = s.tanh();
                1.0 - t * t
            }
            Renormalizer::Rational => {
                let q = 1.0 + s * s;
                (1.0 - s * s) / (q * q)
            }
            Renormalizer::ClippedIdentity { bound } => {
                if s.abs() <= *bound {
                    1.0
                } else {
                    let t = (s.abs() - bound).tanh();
                    1.0 - t * t
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        if let Renormalizer::ClippedIdentity { bound } = self {
            if !(*bound > 0.0) || !bound.is_finite() {
                return Err(DiagnosticsError::BadExponent(*bound));
            }
        }
        Ok(())
    }
}

/// Temporal factor of a space-time test function; C^1 and vanishing at
/// `t_end`, as the weak formulations require.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TemporalProfile {
    /// `(1 - t/t_end)^2`.
    RampDown { t_end: f64 },
    /// `cos(pi t / (2 t_end))`.
    CosineHalf { t_end: f64 },
}

impl TemporalProfile {
    pub fn t_end(&self) -> f64 {
        match self {
            TemporalProfile::RampDown { t_end } | TemporalProfile::CosineHalf { t_end } => *t_end,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TemporalProfile::RampDown { t_end } => {
                let r = 1.0 - t / t_end;
                r * r
            }
            TemporalProfile::CosineHalf { t_end } => {
                (std::f64::consts::FRAC_PI_2 * t / t_end).cos()
            }
        }
    }

    pub fn rate(&self, t: f64) -> f64 {
        match self {
            TemporalProfile::RampDown { t_end } => -2.0 / t_end * (1.0 - t / t_end),
            TemporalProfile::CosineHalf { t_end } => {
                let a = std::f64::consts::FRAC_PI_2 / t_end;
                -a * (a * t).sin()
            }
        }
    }
}

/// Separable space-time test function `psi(t, x) = profile(t) shape(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub shape: SpectralField,
    pub profile: TemporalProfile,
}

impl TestFunction {
    pub fn new(shape: SpectralField, profile: TemporalProfile) -> Result<Self, DiagnosticsError> {
        if !(profile.t_end() > 0.0) {
            return Err(DiagnosticsError::BadExponent(profile.t_end()));
        }
        Ok(TestFunction { shape, profile })
    }

    /// Convenience builder: a sum of harmonics, truncated to the grid band.
    pub fn low_modes(
        grid: crate::field::TorusGrid,
        modes: &[((i64, i64), f64, f64)],
        profile: TemporalProfile,
    ) -> Result<Self, DiagnosticsError> {
        let mut shape = SpectralField::zeros(grid);
        for &(k, amplitude, phase) in modes {
            shape = shape.try_add(&SpectralField::harmonic(grid, k, amplitude, phase))?;
        }
        Self::new(shape.dealias(), profile)
    }
}

/// Per-snapshot measurements stored along every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub time: f64,
    /// `(exponent, norm)` pairs, ascending in exponent.
    pub lp_norms: Vec<(f64, f64)>,
    pub linf_norm: f64,
    pub grad_halfp_norm: f64,
    /// Instantaneous chain-rule defect of the renormalization, see
    /// [`renorm_defect`].
    pub renorm_residual: f64,
    pub notes: String,
}

impl DiagnosticsRecord {
    pub fn lp_norm_at(&self, p: f64) -> Option<f64> {
        self.lp_norms
            .iter()
            .find(|(q, _)| (q - p).abs() < 1e-12)
            .map(|(_, v)| *v)
    }

    /// All norms nonnegative and, after normalizing the torus to probability
    /// measure, nondecreasing in the exponent up to and including `L^inf`
    /// (power-mean monotonicity).
    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        let tol = 1e-10;
        let mut prev = -f64::INFINITY;
        let mut prev_p = 0.0;
        for &(p, v) in &self.lp_norms {
            if !(v >= 0.0) {
                return Err(DiagnosticsError::BadExponent(p));
            }
            let normalized = v / TORUS_AREA.powf(1.0 / p);
            let scale = 1.0 + normalized.abs().max(prev.abs());
            if p < prev_p || normalized < prev - tol * scale {
                return Err(DiagnosticsError::BadExponent(p));
            }
            prev = normalized;
            prev_p = p;
        }
        if self.linf_norm + tol * (1.0 + self.linf_norm) < prev {
            return Err(DiagnosticsError::BadExponent(f64::INFINITY));
        }
        if !(self.grad_halfp_norm >= 0.0) || !(self.renorm_residual >= 0.0) {
            return Err(DiagnosticsError::BadExponent(f64::NAN));
        }
        Ok(())
    }
}

/// Instantaneous chain-rule defect of renormalization by `beta`:
/// the L^2 norm of `u.grad(beta(w)) - beta'(w) u.grad(w)` where the first
/// gradient is spectral. Zero for exact fields; measures how far the discrete
/// representation is from commuting with composition.
pub fn renorm_defect(
    w: &SpectralField,
    u: &VelocityField,
    beta: Renormalizer,
) -> Result<f64, DiagnosticsError> {
    w.grid().require_same(u.grid())?;
    beta.validate()?;
    let nodal = w.to_physical();
    let beta_vals: Array2<f64> = nodal.values().mapv(|v| beta.eval(v));
    let beta_prime: Array2<f64> = nodal.values().mapv(|v| beta.derivative(v));
    let b = PhysicalField::new(*w.grid(), beta_vals, w.time_tag())?.to_spectral_keep_mean()?;
    let b1 = b.derivative(Axis::X1).to_physical();
    let b2 = b.derivative(Axis::X2).to_physical();
    let w1 = w.derivative(Axis::X1).to_physical();
    let w2 = w.derivative(Axis::X2).to_physical();
    let (u1, u2) = u.to_physical();
    let defect = u1.values() * &(b1.values() - &(&beta_prime * w1.values()))
        + u2.values() * &(b2.values() - &(&beta_prime * w2.values()));
    lp_norm_physical(&PhysicalField::new(*w.grid(), defect, w.time_tag())?, 2.0)
}

/// The standard record captured at every snapshot: L^p and L^2 norms, the
/// nodal max, the dissipation integrand at `p`, and the tanh chain-rule
/// defect.
pub fn snapshot_record(
    w: &SpectralField,
    u: &VelocityField,
    p: f64,
) -> Result<DiagnosticsRecord, DiagnosticsError> {
    validate_exponent(p)?;
    let nodal = w.to_physical();
    let mut exponents = vec![2.0];
    if p.is_finite() && (p - 2.0).abs() > 1e-12 {
        exponents.push(p);
        exponents.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    let lp_norms = exponents
        .iter()
        .map(|&q| Ok((q, lp_norm_physical(&nodal, q)?)))
        .collect::<Result<Vec<_>, DiagnosticsError>>()?;
    let record = DiagnosticsRecord {
        time: w.time_tag(),
        lp_norms,
        linf_norm: nodal.max_abs(),
        grad_halfp_norm: grad_halfp_norm(w, if p.is_finite() { p } else { 2.0 })?,
        renorm_residual: renorm_defect(w, u, Renormalizer::Tanh)?,
        notes: String::new(),
    };
    record.validate()?;
    Ok(record)
}

/// Recompute per-snapshot records for a trajectory (e.g. one loaded from
/// disk, which carries none).
pub fn trajectory_records(
    traj: &Trajectory,
    p: f64,
) -> Result<Vec<DiagnosticsRecord>, DiagnosticsError> {
    if !traj.records.is_empty()
        && traj.records.len() == traj.times.len()
        && traj.records[0].lp_norm_at(p).is_some()
    {
        return Ok(traj.records.clone());
    }
    traj.snapshots
        .iter()
        .map(|w| {
            let u = velocity_from_vorticity(w).map_err(EvolutionError::from)?;
            snapshot_record(w, &u, p)
        })
        .collect()
}

fn trapezoid(times: &[f64], vals: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(vals.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

fn cumulative_trapezoid(times: &[f64], vals: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..times.len() {
        acc += 0.5 * (times[i] - times[i - 1]) * (vals[i] + vals[i - 1]);
        out.push(acc);
    }
    out
}

/// Ingredients and measured ratios of the L^p energy estimate
/// `sup_t ||w||_p + nu (int ||grad |w|^{p/2}||^2 dt)^{1/p}
///     <~ ||w0||_p + p int ||g||_p dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimateReport {
    pub p: f64,
    pub nu: f64,
    /// `sup_t ||w(t)||_p` over snapshots.
    pub sup_lp: f64,
    /// `nu * (int ||grad |w|^{p/2}||^2_{L^2} dt)^{1/p}`.
    pub dissipation: f64,
    pub initial_lp: f64,
    /// `int_0^T ||g(t)||_p dt` by trapezoid over snapshot times.
    pub forcing_l1lp: f64,
    /// `initial_lp + p * forcing_l1lp`.
    pub rhs: f64,
    /// `sup_lp / rhs`; the estimate's unspecified constant is reported, never
    /// asserted. Zero data with zero forcing reports 0.
    pub ratio: f64,
    /// `(sup_lp + dissipation) / rhs`.
    pub ratio_with_dissipation: f64,
    /// `max(0, sup_lp - rhs)`: violation of the sharp inviscid inequality.
    pub euler_margin: f64,
}

/// Measure the energy estimate on a trajectory at exponent `p`.
pub fn energy_estimate_report_at(
    traj: &Trajectory,
    forcing: &ForcingSpec,
    p: f64,
) -> Result<EnergyEstimateReport, DiagnosticsError> {
    validate_exponent(p)?;
    if traj.times.is_empty() {
        return Err(DiagnosticsError::EmptyTrajectory);
    }
    let grid = *traj.grid();
    let eval = forcing.prepare(&grid)?;
    let mut lp_vals = Vec::with_capacity(traj.times.len());
    let mut grad_sq = Vec::with_capacity(traj.times.len());
    let mut g_lp = Vec::with_capacity(traj.times.len());
    for (t, w) in traj.times.iter().zip(traj.snapshots.iter()) {
        lp_vals.push(lp_norm(w, p)?);
        let gh = if p.is_finite() {
            grad_halfp_norm(w, p)?
        } else {
            0.0
        };
        grad_sq.push(gh * gh);
        g_lp.push(match eval.at(*t)? {
            Some(g) => lp_norm(&g, p)?,
            None => 0.0,
        });
    }
    let sup_lp = lp_vals.iter().fold(0.0_f64, |m, v| m.max(*v));
    let dissipation = if p.is_finite() && traj.config.nu > 0.0 {
        traj.config.nu * trapezoid(&traj.times, &grad_sq).max(0.0).powf(1.0 / p)
    } else {
        0.0
    };
    let initial_lp = lp_vals[0];
    let forcing_l1lp = trapezoid(&traj.times, &g_lp);
    let rhs = initial_lp + if p.is_finite() { p } else { 1.0 } * forcing_l1lp;
    let (ratio, ratio_with_dissipation) = if rhs > 0.0 {
        (sup_lp / rhs, (sup_lp + dissipation) / rhs)
    } else {
        (0.0, 0.0)
    };
    Ok(EnergyEstimateReport {
        p,
        nu: traj.config.nu,
        sup_lp,
        dissipation,
        initial_lp,
        forcing_l1lp,
        rhs,
        ratio,
        ratio_with_dissipation,
        euler_margin: (sup_lp - rhs).max(0.0),
    })
}

/// [`energy_estimate_report_at`] at the trajectory's configured exponent.
pub fn energy_estimate_report(
    traj: &Trajectory,
    forcing: &ForcingSpec,
) -> Result<EnergyEstimateReport, DiagnosticsError> {
    energy_estimate_report_at(traj, forcing, traj.config.p)
}

/// Space-time weak residual of the renormalized equation
/// `d/dt beta(w) + u.grad(beta(w)) = beta'(w) g` tested against
/// `psi(t,x) = profile(t) shape(x)`:
///
/// ```text
/// R = int_0^T int [ beta(w) d(psi)/dt + beta(w) u.grad(psi)
///                   + beta'(w) g psi ] dx dt
///     + int beta(w(0)) psi(0) dx
/// ```
///
/// which vanishes for exact renormalized solutions since `psi(T) = 0` and
/// `div u = 0`. Time quadrature is the trapezoid rule over snapshots, so the
/// returned magnitude shrinks at second order as snapshots refine. Meant for
/// inviscid runs; with viscosity the (negative) dissipation defect is folded
/// into the returned value.
pub fn renorm_residual(
    traj: &Trajectory,
    forcing: &ForcingSpec,
    beta: Renormalizer,
    test_fn: &TestFunction,
) -> Result<f64, DiagnosticsError> {
    beta.validate()?;
    weak_residual_impl(traj, forcing, Some(beta), test_fn)
}

/// The same weak residual with `beta` the identity: the distributional form
/// of the advection equation itself.
pub fn weak_advection_residual(
    traj: &Trajectory,
    forcing: &ForcingSpec,
    test_fn: &TestFunction,
) -> Result<f64, DiagnosticsError> {
    weak_residual_impl(traj, forcing, None, test_fn)
}

fn weak_residual_impl(
    traj: &Trajectory,
    forcing: &ForcingSpec,
    beta: Option<Renormalizer>,
    test_fn: &TestFunction,
) -> Result<f64, DiagnosticsError> {
    if traj.times.is_empty() {
        return Err(DiagnosticsError::EmptyTrajectory);
    }
    let grid = *traj.grid();
    grid.require_same(test_fn.shape.grid())?;
    let eval = forcing.prepare(&grid)?;
    let shape = test_fn.shape.to_physical();
    let shape_d1 = test_fn.shape.derivative(Axis::X1).to_physical();
    let shape_d2 = test_fn.shape.derivative(Axis::X2).to_physical();
    let b = |s: f64| beta.map_or(s, |r| r.eval(s));
    let bp = |s: f64| beta.map_or(1.0, |r| r.derivative(s));

    let mut integrand = Vec::with_capacity(traj.times.len());
    for (t, w) in traj.times.iter().zip(traj.snapshots.iter()) {
        let phi = test_fn.profile.eval(*t);
        let phi_dot = test_fn.profile.rate(*t);
        let nodal = w.to_physical();
        let beta_w: Array2<f64> = nodal.values().mapv(b);
        let vel = velocity_from_vorticity(w).map_err(EvolutionError::from)?;
        let (u1, u2) = vel.to_physical();
        // beta(w) [phi' shape + phi u.grad(shape)]
        let mut point = &beta_w
            * &(phi_dot * shape.values()
                + phi * &(u1.values() * shape_d1.values() + u2.values() * shape_d2.values()));
        if let Some(g) = eval.at(*t)? {
            let gv = g.to_physical();
            let bpw: Array2<f64> = nodal.values().mapv(bp);
            point = point + phi * &(&bpw * &(gv.values() * shape.values()));
        }
        let dx2 = grid.spacing() * grid.spacing();
        integrand.push(point.sum() * dx2);
    }
    let time_part = trapezoid(&traj.times, &integrand);

    let w0 = &traj.snapshots[0].to_physical();
    let beta_w0: Array2<f64> = w0.values().mapv(b);
    let phi0 = test_fn.profile.eval(traj.times[0]);
    let dx2 = grid.spacing() * grid.spacing();
    let initial_part = phi0 * (&beta_w0 * shape.values()).sum() * dx2;

    Ok((time_part + initial_part).abs())
}

/// Max over snapshot times of `| ||w(t)||_2^2 - ||w(0)||_2^2
/// - 2 int_0^t int g w dx ds |`: the L^2 balance an inviscid run satisfies.
pub fn l2_balance_residual(
    traj: &Trajectory,
    forcing: &ForcingSpec,
) -> Result<f64, DiagnosticsError> {
    if traj.times.is_empty() {
        return Err(DiagnosticsError::EmptyTrajectory);
    }
    let grid = *traj.grid();
    let eval = forcing.prepare(&grid)?;
    let mut energy = Vec::with_capacity(traj.times.len());
    let mut work = Vec::with_capacity(traj.times.len());
    for (t, w) in traj.times.iter().zip(traj.snapshots.iter()) {
        let nodal = w.to_physical();
        let e = lp_norm_physical(&nodal, 2.0)?;
        energy.push(e * e);
        work.push(match eval.at(*t)? {
            Some(g) => inner_product(&g.to_physical(), &nodal)?,
            None => 0.0,
        });
    }
    let injected = cumulative_trapezoid(&traj.times, &work);
    let drift = energy
        .iter()
        .zip(injected.iter())
        .map(|(e, i)| (e - energy[0] - 2.0 * i).abs())
        .fold(0.0_f64, f64::max);
    Ok(drift)
}

/// Merge two snapshot-time lists into one sorted deduplicated list.
pub fn common_times(a: &Trajectory, b: &Trajectory) -> Vec<f64> {
    let mut times: Vec<f64> = a.times.iter().chain(b.times.iter()).copied().collect();
    times.sort_by(|x, y| x.partial_cmp(y).unwrap());
    times.dedup_by(|x, y| (*x - *y).abs() <= 1e-12 * (1.0 + y.abs()));
    times
}

/// `sup_t || a(t) - b(t) ||_p` over the given times, interpolating each
/// trajectory linearly where needed.
pub fn pair_distance_at(
    a: &Trajectory,
    b: &Trajectory,
    p: f64,
    times: &[f64],
) -> Result<f64, DiagnosticsError> {
    validate_exponent(p)?;
    a.grid().require_same(b.grid())?;
    if times.is_empty() {
        return Err(DiagnosticsError::EmptyTrajectory);
    }
    let mut sup = 0.0_f64;
    for &t in times {
        let wa = a.vorticity_at(t)?;
        let wb = b.vorticity_at(t)?;
        sup = sup.max(lp_norm(&wa.try_sub(&wb)?, p)?);
    }
    Ok(sup)
}

/// `sup_t || a(t) - b(t) ||_p` over the union of both snapshot-time sets.
pub fn pair_distance(a: &Trajectory, b: &Trajectory, p: f64) -> Result<f64, DiagnosticsError> {
    pair_distance_at(a, b, p, &common_times(a, b))
}

/// One row per `(run, time, metric, value)`, deterministic order and
/// formatting.
pub fn write_diagnostics_csv<W: std::io::Write>(
    out: &mut W,
    run_id: &str,
    records: &[DiagnosticsRecord],
) -> std::io::Result<()> {
    for rec in records {
        for (p, v) in &rec.lp_norms {
            writeln!(
                out,
                "{run_id},{:.12e},lp_norm[{p}],{v:.12e}",
                rec.time
            )?;
        }
        writeln!(out, "{run_id},{:.12e},linf_norm,{:.12e}", rec.time, rec.linf_norm)?;
        writeln!(
            out,
            "{run_id},{:.12e},grad_halfp_norm,{:.12e}",
            rec.time, rec.grad_halfp_norm
        )?;
        writeln!(
            out,
            "{run_id},{:.12e},renorm_residual,{:.12e}",
            rec.time, rec.renorm_residual
        )?;
    }
    Ok(())
}

pub const DIAGNOSTICS_CSV_HEADER: &str = "run,time,metric,value";

pub const ESTIMATES_CSV_HEADER: &str =
    "run,p,nu,sup_lp,dissipation,initial_lp,forcing_l1lp,rhs,ratio,ratio_with_dissipation,euler_margin";

pub fn write_estimates_csv<W: std::io::Write>(
    out: &mut W,
    rows: &[(String, EnergyEstimateReport)],
) -> std::io::Result<()> {
    for (run_id, r) in rows {
        writeln!(
            out,
            "{run_id},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            r.p,
            r.nu,
            r.sup_lp,
            r.dissipation,
            r.initial_lp,
            r.forcing_l1lp,
            r.rhs,
            r.ratio,
            r.ratio_with_dissipation,
            r.euler_margin
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::{solve, SolveMode, SolverConfig};
    use crate::field::TorusGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> TorusGrid {
        TorusGrid::new(n).unwrap()
    }

    fn cosine(g: TorusGrid) -> SpectralField {
        SpectralField::harmonic(g, (1, 0), 1.0, 0.0)
    }

    fn random_field(g: TorusGrid, seed: u64) -> SpectralField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodal = PhysicalField::from_fn(g, |_, _| rng.gen_range(-1.0..1.0));
        nodal.to_spectral().unwrap().dealias()
    }

    const PI: f64 = std::f64::consts::PI;

    #[test]
    fn l2_norm_of_cosine_matches_closed_form() {
        let f = cosine(grid(64));
        let got = lp_norm(&f, 2.0).unwrap();
        assert!((got - PI * 2.0_f64.sqrt()).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn l4_norm_of_cosine_matches_closed_form() {
        let f = cosine(grid(64));
        let got = lp_norm(&f, 4.0).unwrap();
        let expected = (1.5 * PI * PI).powf(0.25);
        assert!((got - expected).abs() < 1e-12, "got {got} want {expected}");
    }

    #[test]
    fn lp_norm_edge_cases() {
        let g = grid(32);
        assert_eq!(lp_norm(&SpectralField::zeros(g), 3.0).unwrap(), 0.0);
        let f = cosine(g);
        assert!((lp_norm(&f, f64::INFINITY).unwrap() - 1.0).abs() < 1e-13);
        assert!(matches!(
            lp_norm(&f, 0.5),
            Err(DiagnosticsError::BadExponent(_))
        ));
        assert!(matches!(
            lp_norm(&f, f64::NAN),
            Err(DiagnosticsError::BadExponent(_))
        ));
    }

    #[test]
    fn lp_norm_is_a_norm_on_random_fields() {
        let g = grid(32);
        for seed in 0..8 {
            let f = random_field(g, seed);
            let h = random_field(g, seed + 100);
            for &p in &[1.0, 1.5, 2.0, 4.0] {
                let nf = lp_norm(&f, p).unwrap();
                let nh = lp_norm(&h, p).unwrap();
                let nsum = lp_norm(&f.try_add(&h).unwrap(), p).unwrap();
                assert!(nsum <= nf + nh + 1e-10, "triangle fails at p={p}");
                let scaled = lp_norm(&f.scaled(-2.5), p).unwrap();
                assert!((scaled - 2.5 * nf).abs() < 1e-10 * (1.0 + nf));
            }
        }
    }

    #[test]
    fn normalized_lp_norms_are_monotone_in_p() {
        let f = random_field(grid(32), 7);
        let mut prev = 0.0;
        for &p in &[1.0, 1.5, 2.0, 3.0, 4.0, 8.0] {
            let v = lp_norm(&f, p).unwrap() / TORUS_AREA.powf(1.0 / p);
            assert!(v >= prev - 1e-10, "not monotone at p={p}");
            prev = v;
        }
        assert!(lp_norm(&f, f64::INFINITY).unwrap() >= prev - 1e-10);
    }

    #[test]
    fn grad_halfp_norm_matches_closed_form_at_p4() {
        // |w|^2 = cos^2(x1) has gradient -sin(2 x1), whose L^2 norm is pi*sqrt(2).
        let f = cosine(grid(64));
        let got = grad_halfp_norm(&f, 4.0).unwrap();
        assert!((got - PI * 2.0_f64.sqrt()).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn renormalizers_are_admissible() {
        let betas = [
            Renormalizer::Tanh,
            Renormalizer::Rational,
            Renormalizer::ClippedIdentity { bound: 2.0 },
        ];
        for beta in betas {
            assert_eq!(beta.eval(0.0), 0.0);
            for i in -40..=40 {
                let s = i as f64 * 0.25;
                assert!(beta.eval(s).abs() <= 3.5, "beta unbounded at {s}");
                assert!(beta.derivative(s).abs() <= 1.0 + 1e-12);
                let h = 1e-6;
                let fd = (beta.eval(s + h) - beta.eval(s - h)) / (2.0 * h);
                assert!(
                    (fd - beta.derivative(s)).abs() < 1e-6,
                    "derivative mismatch for {beta:?} at {s}"
                );
            }
        }
    }

    fn short_run(g: TorusGrid, nu: f64, w0: &SpectralField, t_end: f64) -> Trajectory {
        let cfg = SolverConfig {
            grid: g,
            nu,
            t_end,
            dt_max: 5e-3,
            cfl: 0.5,
            p: 2.0,
            snapshot_stride: 1,
        };
        solve(w0, &cfg, &ForcingSpec::zero(), SolveMode::Nonlinear).unwrap()
    }

    #[test]
    fn energy_report_is_unity_for_steady_euler_mode() {
        let g = grid(32);
        let traj = short_run(g, 0.0, &cosine(g), 0.2);
        let rep = energy_estimate_report(&traj, &ForcingSpec::zero()).unwrap();
        assert!((rep.ratio - 1.0).abs() < 1e-8, "ratio {}", rep.ratio);
        assert_eq!(rep.dissipation, 0.0);
        assert!(rep.euler_margin < 1e-8);
    }

    #[test]
    fn energy_report_all_zero_for_zero_data() {
        let g = grid(16);
        let traj = short_run(g, 0.1, &SpectralField::zeros(g), 0.05);
        let rep = energy_estimate_report(&traj, &ForcingSpec::zero()).unwrap();
        assert_eq!(rep.sup_lp, 0.0);
        assert_eq!(rep.rhs, 0.0);
        assert_eq!(rep.ratio, 0.0);
        assert_eq!(rep.euler_margin, 0.0);
    }

    #[test]
    fn viscous_unforced_ratio_stays_below_one() {
        let g = grid(32);
        let w0 = random_field(g, 3).scaled(0.5);
        let traj = short_run(g, 0.05, &w0, 0.3);
        for p in [1.5, 2.0, 4.0] {
            let rep = energy_estimate_report_at(&traj, &ForcingSpec::zero(), p).unwrap();
            assert!(rep.ratio <= 1.0 + 1e-6, "p={p} ratio {}", rep.ratio);
        }
    }

    #[test]
    fn renorm_residual_vanishes_for_zero_solution() {
        let g = grid(16);
        let traj = short_run(g, 0.0, &SpectralField::zeros(g), 0.1);
        let tf = TestFunction::low_modes(
            g,
            &[((1, 0), 1.0, 0.0)],
            TemporalProfile::RampDown { t_end: 0.1 },
        )
        .unwrap();
        let r = renorm_residual(&traj, &ForcingSpec::zero(), Renormalizer::Tanh, &tf).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn renorm_residual_small_for_steady_mode() {
        let g = grid(32);
        let traj = short_run(g, 0.0, &cosine(g), 0.5);
        let tf = TestFunction::low_modes(
            g,
            &[((1, 1), 0.7, 0.3), ((2, 0), 0.4, 0.0)],
            TemporalProfile::RampDown { t_end: 0.5 },
        )
        .unwrap();
        let r = renorm_residual(&traj, &ForcingSpec::zero(), Renormalizer::Tanh, &tf).unwrap();
        assert!(r < 1e-6, "residual {r}");
    }

    #[test]
    fn clipped_identity_reproduces_plain_weak_residual() {
        let g = grid(32);
        let w0 = random_field(g, 11).scaled(0.3);
        let traj = short_run(g, 0.0, &w0, 0.2);
        let tf = TestFunction::low_modes(
            g,
            &[((1, 2), 1.0, 0.5)],
            TemporalProfile::CosineHalf { t_end: 0.2 },
        )
        .unwrap();
        // sup|w| stays well below the clip bound, so beta is exactly the identity.
        let clipped = renorm_residual(
            &traj,
            &ForcingSpec::zero(),
            Renormalizer::ClippedIdentity { bound: 100.0 },
            &tf,
        )
        .unwrap();
        let plain = weak_advection_residual(&traj, &ForcingSpec::zero(), &tf).unwrap();
        assert!(
            (clipped - plain).abs() < 1e-8,
            "clipped {clipped} plain {plain}"
        );
    }

    #[test]
    fn l2_balance_holds_for_steady_mode() {
        let g = grid(32);
        let traj = short_run(g, 0.0, &cosine(g), 0.3);
        let r = l2_balance_residual(&traj, &ForcingSpec::zero()).unwrap();
        assert!(r < 1e-8, "balance residual {r}");
    }

    #[test]
    fn pair_distance_matches_single_mode_decay_gap() {
        let g = grid(32);
        let w0 = SpectralField::harmonic(g, (2, 0), 1.0, 0.0);
        let mut cfg = SolverConfig {
            grid: g,
            nu: 0.1,
            t_end: 1.0,
            dt_max: 1e-3,
            cfl: 0.9,
            p: 2.0,
            snapshot_stride: 10,
        };
        let viscous = solve(&w0, &cfg, &ForcingSpec::zero(), SolveMode::Nonlinear).unwrap();
        cfg.nu = 0.0;
        let inviscid = solve(&w0, &cfg, &ForcingSpec::zero(), SolveMode::Nonlinear).unwrap();
        let d = pair_distance(&viscous, &inviscid, 2.0).unwrap();
        let expected = (1.0 - (-0.4_f64).exp()) * PI * 2.0_f64.sqrt();
        assert!((d - expected).abs() < 1e-9, "distance {d} want {expected}");
        assert_eq!(pair_distance(&viscous, &viscous, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn pair_distance_rejects_disjoint_horizons() {
        let g = grid(16);
        let w0 = cosine(g);
        let traj_short = short_run(g, 0.0, &w0, 0.1);
        let traj_long = short_run(g, 0.0, &w0, 0.4);
        assert!(matches!(
            pair_distance(&traj_short, &traj_long, 2.0),
            Err(DiagnosticsError::TimeMisalignment { .. })
        ));
    }

    #[test]
    fn shared_time_triangle_inequality_is_exact() {
        let g = grid(16);
        let mk = |amp: f64, nu: f64| {
            let w0 = SpectralField::harmonic(g, (1, 0), amp, 0.0);
            short_run(g, nu, &w0, 0.2)
        };
        let a = mk(1.0, 0.0);
        let b = mk(0.5, 0.1);
        let c = mk(0.8, 0.05);
        let times: Vec<f64> = common_times(&a, &b)
            .into_iter()
            .filter(|t| {
                common_times(&b, &c)
                    .iter()
                    .any(|s| (s - t).abs() < 1e-12)
            })
            .collect();
        let ab = pair_distance_at(&a, &b, 2.0, &times).unwrap();
        let ac = pair_distance_at(&a, &c, 2.0, &times).unwrap();
        let cb = pair_distance_at(&c, &b, 2.0, &times).unwrap();
        assert!(ab <= ac + cb + 1e-10, "ab={ab} ac={ac} cb={cb}");
    }

    #[test]
    fn snapshot_record_validates_and_orders_exponents() {
        let g = grid(32);
        let w = random_field(g, 5);
        let u = velocity_from_vorticity(&w).unwrap();
        let rec = snapshot_record(&w, &u, 1.5).unwrap();
        assert_eq!(rec.lp_norms.len(), 2);
        assert!(rec.lp_norms[0].0 < rec.lp_norms[1].0);
        rec.validate().unwrap();
        assert!(rec.renorm_residual >= 0.0);
    }

    #[test]
    fn csv_emission_is_stable() {
        let g = grid(16);
        let w = cosine(g);
        let u = velocity_from_vorticity(&w).unwrap();
        let rec = snapshot_record(&w, &u, 2.0).unwrap();
        let mut buf1 = Vec::new();
        let mut buf2 = Vec::new();
        write_diagnostics_csv(&mut buf1, "run0", &[rec.clone()]).unwrap();
        write_diagnostics_csv(&mut buf2, "run0", &[rec]).unwrap();
        assert_eq!(buf1, buf2);
        assert!(String::from_utf8(buf1).unwrap().contains("lp_norm[2]"));
    }
}
