//! Smooth approximate identities acting as spectral multipliers.
//!
//! A kernel family `phi_ell(x) = ell^2 phi_1(ell x)` concentrates as `ell`
//! grows; convolution with it becomes a Fourier multiplier `m(k)` normalized
//! to `m(0) = 1`. Two profiles are provided:
//!
//! - `Gaussian`: `m(k) = exp(-|k|^2 / (2 ell^2))`, evaluated in closed form;
//! - `SmoothBump`: a compactly supported C-infinity bump of radius `1/ell`,
//!   periodized, sampled on the grid, transformed, and normalized, so the
//!   multiplier reflects the kernel exactly as the grid resolves it.

use crate::field::{FieldError, PhysicalField, SpectralField, TorusGrid};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MollifierError {
    #[error("kernel scale {0} is too coarse; the support must fit in a half period (ell >= 1/pi)")]
    ScaleTooCoarse(f64),
    #[error("grid with n = {n} cannot resolve a bump of scale ell = {ell} (needs n/ell >= 8)")]
    UnresolvedKernel { n: usize, ell: f64 },
    #[error("exponent must satisfy p >= 1, got {0}")]
    BadExponent(f64),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MollifierProfile {
    Gaussian,
    SmoothBump,
}

/// A mollifier fixed to one grid and scale: a real, even multiplier with
/// `m(0) = 1` and `|m(k)| <= 1` up to quadrature dust.
#[derive(Debug, Clone, PartialEq)]
pub struct MollifierKernel {
    grid: TorusGrid,
    ell: f64,
    profile: MollifierProfile,
    multiplier: Array2<f64>,
    /// Set when a Gaussian narrower than the grid resolution was requested;
    /// the kernel is still usable but undersampled.
    resolution_warning: Option<String>,
}

impl MollifierKernel {
    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn ell(&self) -> f64 {
        self.ell
    }

    pub fn profile(&self) -> MollifierProfile {
        self.profile
    }

    pub fn resolution_warning(&self) -> Option<&str> {
        self.resolution_warning.as_deref()
    }

    /// Multiplier value at signed wavevector `(k1, k2)`.
    pub fn multiplier(&self, k1: i64, k2: i64) -> f64 {
        self.multiplier[[self.grid.index_of(k1), self.grid.index_of(k2)]]
    }

    /// Largest multiplier magnitude (should not exceed 1 by more than dust).
    pub fn max_multiplier_abs(&self) -> f64 {
        self.multiplier.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Build a mollification kernel of scale `ell` on `grid`.
///
/// `ell < 1/pi` is rejected for every profile (the nominal support would not
/// fit in a half period). A bump narrower than ~8 grid cells is rejected;
/// the same condition on a Gaussian only sets [`MollifierKernel::resolution_warning`],
/// since its closed-form multiplier stays meaningful.
pub fn make_kernel(
    grid: TorusGrid,
    ell: f64,
    profile: MollifierProfile,
) -> Result<MollifierKernel, MollifierError> {
    if !(ell >= 1.0 / std::f64::consts::PI) {
        return Err(MollifierError::ScaleTooCoarse(ell));
    }
    let n = grid.n();
    let undersampled = (n as f64) * (1.0 / ell) < 8.0;
    let mut resolution_warning = None;
    match profile {
        MollifierProfile::SmoothBump if undersampled => {
            return Err(MollifierError::UnresolvedKernel { n, ell });
        }
        MollifierProfile::Gaussian if undersampled => {
            resolution_warning = Some(format!(
                "gaussian kernel of scale ell = {ell} spans fewer than 8 of the {n} grid cells"
            ));
        }
        _ => {}
    }

    let multiplier = match profile {
        MollifierProfile::Gaussian => {
            let mut m = Array2::zeros((n, n));
            for i1 in 0..n {
                let k1 = grid.wavenumber(i1) as f64;
                for i2 in 0..n {
                    let k2 = grid.wavenumber(i2) as f64;
                    m[[i1, i2]] = (-(k1 * k1 + k2 * k2) / (2.0 * ell * ell)).exp();
                }
            }
            m
        }
        MollifierProfile::SmoothBump => sampled_bump_multiplier(grid, ell)?,
    };

    Ok(MollifierKernel {
        grid,
        ell,
        profile,
        multiplier,
        resolution_warning,
    })
}

/// Sample `exp(-1 / (1 - (ell r)^2))` on the grid (torus distance to the
/// origin), transform, and normalize the zero mode to one. The support has
/// radius `1/ell <= pi`, so the nearest periodic image is the only one.
fn sampled_bump_multiplier(grid: TorusGrid, ell: f64) -> Result<Array2<f64>, MollifierError> {
    let nodal = PhysicalField::from_fn(grid, |x, y| {
        let dx = wrap_to_symmetric(x);
        let dy = wrap_to_symmetric(y);
        let s = ell * ell * (dx * dx + dy * dy);
        if s < 1.0 {
            (-1.0 / (1.0 - s)).exp()
        } else {
            0.0
        }
    });
    let spectral = nodal.to_spectral_keep_mean()?;
    let mass = spectral.mean().re;
    debug_assert!(mass > 0.0, "bump has positive mass");
    let n = grid.n();
    let mut m = Array2::zeros((n, n));
    for i1 in 0..n {
        let p1 = (n - i1) % n;
        for i2 in 0..n {
            let p2 = (n - i2) % n;
            // The bump is even; average the +-k pair to strip odd dust.
            let avg = 0.5 * (spectral.coeffs()[[i1, i2]].re + spectral.coeffs()[[p1, p2]].re);
            m[[i1, i2]] = avg / mass;
        }
    }
    Ok(m)
}

fn wrap_to_symmetric(x: f64) -> f64 {
    let p = crate::field::TWO_PI;
    let mut y = x % p;
    if y >= p / 2.0 {
        y -= p;
    } else if y < -p / 2.0 {
        y += p;
    }
    y
}

/// Convolve a field with the kernel: coefficient-wise multiplication.
pub fn mollify(f: &SpectralField, kernel: &MollifierKernel) -> Result<SpectralField, MollifierError> {
    if f.grid() != kernel.grid() {
        return Err(FieldError::GridMismatch(f.grid().n(), kernel.grid().n()).into());
    }
    let g = *f.grid();
    Ok(f.map_modes(|k1, k2, c| {
        c * kernel.multiplier[[g.index_of(k1), g.index_of(k2)]]
    }))
}

/// `|| f * phi_ell - f ||_{L^p}` by nodal quadrature.
pub fn mollification_error(
    f: &SpectralField,
    kernel: &MollifierKernel,
    p: f64,
) -> Result<f64, MollifierError> {
    if !(p >= 1.0) {
        return Err(MollifierError::BadExponent(p));
    }
    let smoothed = mollify(f, kernel)?;
    let diff = &smoothed - f;
    crate::diagnostics::lp_norm(&diff, p).map_err(|_| MollifierError::BadExponent(p))
}
