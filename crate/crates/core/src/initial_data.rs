//! Reproducible initial vorticity fields, viscosity-indexed data families,
//! and forcing constructors.

use crate::evolution::{Envelope, ForcingMode, ForcingSpec};
use crate::field::{PhysicalField, SpectralField, TorusGrid};
use crate::mollifier::{make_kernel, mollify, MollifierError, MollifierProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum InitialDataError {
    #[error("alpha = {alpha} is not in (0, 2/p) for p = {p}; the field would leave L^p")]
    AlphaOutOfRange { alpha: f64, p: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("perturbation families require nu > 0, got {0}")]
    NonPositiveViscosity(f64),
    #[error(transparent)]
    Mollifier(#[from] MollifierError),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
}

/// Deterministic recipes for initial vorticity. Every construction is
/// mean-free and returns a dealiased spectral field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDataSpec {
    /// `amplitude * cos(k.x + phase)`.
    SingleMode {
        k: (i64, i64),
        amplitude: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Random phases on the band `k_min <= |k| <= k_max` with magnitude
    /// `|k|^-slope`, rescaled so the nodal maximum equals `amplitude`.
    MultiMode {
        seed: u64,
        slope: f64,
        k_min: i64,
        k_max: i64,
        amplitude: f64,
    },
    /// `amplitude * chi(|x - center|) * |x - center|^-alpha`, mean-subtracted.
    /// `chi` is a smooth cutoff vanishing beyond `cutoff_radius`. The
    /// singular point is shifted to a cell center so nodal samples stay
    /// finite; the nodal maximum grows like `n^alpha` under refinement.
    PowerSingularity {
        center: (f64, f64),
        alpha: f64,
        cutoff_radius: f64,
        amplitude: f64,
        /// When set, demand membership in L^p, i.e. `alpha < 2/p`.
        #[serde(default)]
        assert_lp: Option<f64>,
    },
    /// Smoothed indicator of a disk: `amplitude * (1 + tanh(sharpness*(radius - r)))/2`,
    /// mean-subtracted.
    Patchlike {
        center: (f64, f64),
        radius: f64,
        sharpness: f64,
        amplitude: f64,
    },
}

/// Build the initial vorticity described by `spec` on `grid`.
pub fn build_initial(
    spec: &InitialDataSpec,
    grid: TorusGrid,
) -> Result<SpectralField, InitialDataError> {
    match spec {
        InitialDataSpec::SingleMode { k, amplitude, phase } => {
            if *k == (0, 0) {
                return Err(InitialDataError::InvalidParameter(
                    "single-mode wavevector must be nonzero".into(),
                ));
            }
            Ok(SpectralField::harmonic(grid, *k, *amplitude, *phase).dealias())
        }
        InitialDataSpec::MultiMode { seed, slope, k_min, k_max, amplitude } => {
            if *k_min < 1 || k_max < k_min {
                return Err(InitialDataError::InvalidParameter(format!(
                    "need 1 <= k_min <= k_max, got [{k_min}, {k_max}]"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut f = SpectralField::zeros(grid);
            let half = (grid.n() / 2) as i64;
            for k1 in -half + 1..half {
                for k2 in -half + 1..half {
                    // Fill one representative of each conjugate pair:
                    // k1 > 0, or k1 = 0 with k2 > 0.
                    if k1 < 0 || (k1 == 0 && k2 <= 0) {
                        continue;
                    }
                    let mag2 = (k1 * k1 + k2 * k2) as f64;
                    let mag = mag2.sqrt();
                    if mag < *k_min as f64 || mag > *k_max as f64 {
                        continue;
                    }
                    let phase = rng.gen_range(0.0..crate::field::TWO_PI);
                    let c = 0.5
                        * mag.powf(-slope)
                        * num_complex::Complex64::new(phase.cos(), phase.sin());
                    let (i1, i2) = (grid.index_of(k1), grid.index_of(k2));
                    let (j1, j2) = (grid.index_of(-k1), grid.index_of(-k2));
                    f.coeffs_mut()[[i1, i2]] = c;
                    f.coeffs_mut()[[j1, j2]] = c.conj();
                }
            }
            let f = f.dealias();
            let max = f.to_physical().max_abs();
            if max == 0.0 {
                return Err(InitialDataError::InvalidParameter(
                    "requested band contains no modes".into(),
                ));
            }
            Ok(f.scaled(amplitude / max))
        }
        InitialDataSpec::PowerSingularity {
            center,
            alpha,
            cutoff_radius,
            amplitude,
            assert_lp,
        } => {
            if let Some(p) = assert_lp {
                if !(*alpha < 2.0 / p) {
                    return Err(InitialDataError::AlphaOutOfRange { alpha: *alpha, p: *p });
                }
            }
            if !(*alpha > 0.0) {
                return Err(InitialDataError::InvalidParameter(format!(
                    "alpha must be positive, got {alpha}"
                )));
            }
            if !(*cutoff_radius > 0.0 && *cutoff_radius <= std::f64::consts::PI) {
                return Err(InitialDataError::InvalidParameter(format!(
                    "cutoff radius must lie in (0, pi], got {cutoff_radius}"
                )));
            }
            // Place the singular point at a cell center: every node keeps a
            // distance of at least spacing/sqrt(2), so samples stay finite.
            let h = grid.spacing();
            let cx = center.0 + 0.5 * h;
            let cy = center.1 + 0.5 * h;
            let r0 = *cutoff_radius;
            let a = *alpha;
            let nodal = PhysicalField::from_fn(grid, |x, y| {
                let r = torus_distance(x, y, cx, cy);
                smooth_cutoff(r, r0) * r.powf(-a)
            });
            let mean = nodal.mean();
            let centered = PhysicalField::new(
                grid,
                nodal.values().mapv(|v| (v - mean) * amplitude),
                0.0,
            )?;
            Ok(centered.to_spectral()?.dealias())
        }
        InitialDataSpec::Patchlike { center, radius, sharpness, amplitude } => {
            if !(*radius > 0.0 && *radius < std::f64::consts::PI) {
                return Err(InitialDataError::InvalidParameter(format!(
                    "patch radius must lie in (0, pi), got {radius}"
                )));
            }
            let (cx, cy) = *center;
            let (r0, s, amp) = (*radius, *sharpness, *amplitude);
            let nodal = PhysicalField::from_fn(grid, |x, y| {
                let r = torus_distance(x, y, cx, cy);
                amp * 0.5 * (1.0 + (s * (r0 - r)).tanh())
            });
            let mean = nodal.mean();
            let centered =
                PhysicalField::new(grid, nodal.values().mapv(|v| v - mean), 0.0)?;
            Ok(centered.to_spectral()?.dealias())
        }
    }
}

/// Shortest distance on the torus between `(x, y)` and `(cx, cy)`.
fn torus_distance(x: f64, y: f64, cx: f64, cy: f64) -> f64 {
    let p = crate::field::TWO_PI;
    let dx = shortest_offset(x - cx, p);
    let dy = shortest_offset(y - cy, p);
    (dx * dx + dy * dy).sqrt()
}

fn shortest_offset(d: f64, period: f64) -> f64 {
    let mut d = d % period;
    if d > period / 2.0 {
        d -= period;
    } else if d < -period / 2.0 {
        d += period;
    }
    d
}

/// C-infinity cutoff: 1 on `[0, r0/2]`, 0 beyond `r0`, smooth between.
fn smooth_cutoff(r: f64, r0: f64) -> f64 {
    if r <= r0 / 2.0 {
        1.0
    } else if r >= r0 {
        0.0
    } else {
        let s = (r - r0 / 2.0) / (r0 / 2.0);
        let rise = bump_step(1.0 - s);
        let fall = bump_step(s);
        rise / (rise + fall)
    }
}

fn bump_step(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (-1.0 / x).exp()
    }
}

/// How a viscosity-indexed family perturbs its base datum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilyMode {
    /// `w0_nu = w0 * phi_ell` with kernel scale `ell = nu^-beta`.
    MollifyByNu {
        beta: f64,
        profile: MollifierProfile,
    },
    /// `w0_nu = w0 + nu^gamma * amplitude * cos(k.x)` with a fixed
    /// high-frequency wavevector `k`.
    AdditiveHighMode {
        gamma: f64,
        k: (i64, i64),
        amplitude: f64,
    },
}

/// A base datum plus a perturbation converging to it as `nu -> 0`.
/// With no mode the datum is viscosity-independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationFamily {
    pub base: InitialDataSpec,
    #[serde(default)]
    pub mode: Option<FamilyMode>,
}

impl PerturbationFamily {
    /// The limiting datum (`nu = 0`).
    pub fn build_base(&self, grid: TorusGrid) -> Result<SpectralField, InitialDataError> {
        build_initial(&self.base, grid)
    }

    /// The datum at viscosity `nu > 0`.
    pub fn build(&self, nu: f64, grid: TorusGrid) -> Result<SpectralField, InitialDataError> {
        let Some(mode) = &self.mode else {
            return self.build_base(grid);
        };
        if !(nu > 0.0) {
            return Err(InitialDataError::NonPositiveViscosity(nu));
        }
        let base = self.build_base(grid)?;
        match mode {
            FamilyMode::MollifyByNu { beta, profile } => {
                let ell = nu.powf(-beta);
                let kernel = make_kernel(grid, ell, *profile)?;
                Ok(mollify(&base, &kernel)?)
            }
            FamilyMode::AdditiveHighMode { gamma, k, amplitude } => {
                let osc = SpectralField::harmonic(grid, *k, amplitude * nu.powf(*gamma), 0.0)
                    .dealias();
                Ok(base.try_add(&osc)?)
            }
        }
    }

    /// `|| w0_nu - w0 ||_{L^p}` along a viscosity ladder, plus a flag that is
    /// true when the sequence decays monotonically within 5% slack.
    pub fn convergence_profile(
        &self,
        grid: TorusGrid,
        ladder: &[f64],
        p: f64,
    ) -> Result<(Vec<f64>, bool), InitialDataError> {
        let base = self.build_base(grid)?;
        let mut norms = Vec::with_capacity(ladder.len());
        for &nu in ladder {
            let pert = self.build(nu, grid)?;
            let diff = pert.try_sub(&base)?;
            let norm = crate::diagnostics::lp_norm(&diff, p)
                .map_err(|e| InitialDataError::InvalidParameter(e.to_string()))?;
            norms.push(norm);
        }
        let monotone = norms.windows(2).all(|w| w[1] <= w[0] * 1.05);
        Ok((norms, monotone))
    }
}

/// Spatially separable forcing: `g(t, x) = envelope(t) * shape(x)`.
pub fn build_forcing(
    shape: &InitialDataSpec,
    envelope: Envelope,
    grid: TorusGrid,
) -> Result<ForcingSpec, InitialDataError> {
    let field = build_initial(shape, grid)?;
    Ok(ForcingSpec {
        mode: ForcingMode::Analytic { shape: field, envelope },
        mollified_by: None,
    })
}

/// Forcing family mirroring [`PerturbationFamily`]: the shape is perturbed
/// the same way the initial datum is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingFamily {
    pub shape: InitialDataSpec,
    pub envelope: Envelope,
    #[serde(default)]
    pub mode: Option<FamilyMode>,
}

impl ForcingFamily {
    pub fn build_base(&self, grid: TorusGrid) -> Result<ForcingSpec, InitialDataError> {
        build_forcing(&self.shape, self.envelope, grid)
    }

    pub fn build(&self, nu: f64, grid: TorusGrid) -> Result<ForcingSpec, InitialDataError> {
        let Some(mode) = &self.mode else {
            return self.build_base(grid);
        };
        if !(nu > 0.0) {
            return Err(InitialDataError::NonPositiveViscosity(nu));
        }
        let family = PerturbationFamily { base: self.shape.clone(), mode: Some(mode.clone()) };
        let shape = family.build(nu, grid)?;
        Ok(ForcingSpec {
            mode: ForcingMode::Analytic { shape, envelope: self.envelope },
            mollified_by: None,
        })
    }
}
