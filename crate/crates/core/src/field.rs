//! Band-limited scalar fields on the square torus `[0, 2*pi)^2`.
//!
//! A field lives in two representations: nodal values on the uniform
//! `n x n` grid ([`PhysicalField`]) and Fourier coefficients indexed by
//! integer wavevectors ([`SpectralField`]). The coefficient convention is
//!
//! ```text
//! coeff(k) = (1/n^2) * sum_x values(x) * exp(-i k.x)
//! values(x) = sum_k coeff(k) * exp(+i k.x)
//! ```
//!
//! so band-limited fields carry their continuous Fourier coefficients
//! exactly. Every [`SpectralField`] is Hermitian-symmetric (real nodal
//! values) and has `coeff(0,0) = 0` exactly; the one deliberate exception is
//! the output of [`SpectralField::product_raw`], which keeps the mean of a
//! pointwise product for callers that need it.

use crate::fft::{transform_2d, Direction};
use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Circumference of the torus in each coordinate.
pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("grid size must be an even integer >= 8, got {0}")]
    BadGridSize(usize),
    #[error("dealias fraction must lie in (0, 1], got {0}")]
    BadDealiasFraction(f64),
    #[error("fields live on different grids ({0}x{0} vs {1}x{1})")]
    GridMismatch(usize, usize),
    #[error("physical values contain NaN or infinity")]
    NonFiniteInput,
}

/// Coordinate axis on the torus; `X1` is the first (row) coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X1,
    X2,
}

/// Uniform collocation grid on the torus, together with the dealiasing rule
/// applied to nonlinear products.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTorusGrid")]
pub struct TorusGrid {
    n: usize,
    dealias_fraction: f64,
}

#[derive(Deserialize)]
struct RawTorusGrid {
    n: usize,
    dealias_fraction: f64,
}

impl TryFrom<RawTorusGrid> for TorusGrid {
    type Error = FieldError;
    fn try_from(raw: RawTorusGrid) -> Result<Self, FieldError> {
        TorusGrid::with_dealias_fraction(raw.n, raw.dealias_fraction)
    }
}

impl TorusGrid {
    /// Grid with the standard two-thirds dealiasing rule.
    pub fn new(n: usize) -> Result<Self, FieldError> {
        Self::with_dealias_fraction(n, 2.0 / 3.0)
    }

    pub fn with_dealias_fraction(n: usize, dealias_fraction: f64) -> Result<Self, FieldError> {
        if n < 8 || n % 2 != 0 {
            return Err(FieldError::BadGridSize(n));
        }
        if !(dealias_fraction > 0.0 && dealias_fraction <= 1.0) {
            return Err(FieldError::BadDealiasFraction(dealias_fraction));
        }
        Ok(TorusGrid { n, dealias_fraction })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dealias_fraction(&self) -> f64 {
        self.dealias_fraction
    }

    /// Node spacing `2*pi / n`.
    pub fn spacing(&self) -> f64 {
        TWO_PI / self.n as f64
    }

    /// Largest retained wavenumber component after dealiasing:
    /// modes with `max(|k1|, |k2|)` above this are zeroed by products.
    pub fn dealias_cutoff(&self) -> i64 {
        (self.dealias_fraction * (self.n / 2) as f64).floor() as i64
    }

    /// Coordinate of node index `i` along either axis.
    pub fn node(&self, i: usize) -> f64 {
        TWO_PI * i as f64 / self.n as f64
    }

    /// Signed wavenumber represented by storage index `i` (Nyquist maps to `+n/2`).
    pub fn wavenumber(&self, i: usize) -> i64 {
        let n = self.n as i64;
        let i = i as i64;
        if i <= n / 2 {
            i
        } else {
            i - n
        }
    }

    /// Storage index for a signed wavenumber in `[-n/2, n/2]`.
    pub fn index_of(&self, k: i64) -> usize {
        let n = self.n as i64;
        debug_assert!(k.abs() <= n / 2);
        ((k + n) % n) as usize
    }

    pub(crate) fn require_same(&self, other: &TorusGrid) -> Result<(), FieldError> {
        if self != other {
            return Err(FieldError::GridMismatch(self.n, other.n));
        }
        Ok(())
    }
}

/// Real nodal values on a [`TorusGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalField {
    grid: TorusGrid,
    values: Array2<f64>,
    time_tag: f64,
}

impl PhysicalField {
    pub fn new(grid: TorusGrid, values: Array2<f64>, time_tag: f64) -> Result<Self, FieldError> {
        if values.dim() != (grid.n, grid.n) {
            return Err(FieldError::GridMismatch(grid.n, values.dim().0));
        }
        Ok(PhysicalField { grid, values, time_tag })
    }

    /// Sample a closure at the grid nodes.
    pub fn from_fn(grid: TorusGrid, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let values = Array2::from_shape_fn((grid.n, grid.n), |(i, j)| f(grid.node(i), grid.node(j)));
        PhysicalField { grid, values, time_tag: 0.0 }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn time_tag(&self) -> f64 {
        self.time_tag
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.values.sum() / (self.grid.n * self.grid.n) as f64
    }

    /// Forward transform with zero-mean projection and exact Hermitian symmetry.
    pub fn to_spectral(&self) -> Result<SpectralField, FieldError> {
        let mut f = self.to_spectral_keep_mean()?;
        f.project_zero_mean();
        Ok(f)
    }

    /// Forward transform that keeps the mean in `coeff(0,0)`.
    pub fn to_spectral_keep_mean(&self) -> Result<SpectralField, FieldError> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(FieldError::NonFiniteInput);
        }
        let n = self.grid.n;
        let mut buf: Vec<Complex64> = self
            .values
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        transform_2d(&mut buf, n, Direction::Forward);
        let scale = 1.0 / (n * n) as f64;
        let mut coeffs =
            Array2::from_shape_vec((n, n), buf).expect("buffer length matches grid");
        coeffs.mapv_inplace(|c| c * scale);
        hermitian_symmetrize(&mut coeffs);
        Ok(SpectralField { grid: self.grid, coeffs, time_tag: self.time_tag })
    }
}

/// Enforce `coeff(-k) = conj(coeff(k))` exactly by averaging conjugate pairs.
fn hermitian_symmetrize(coeffs: &mut Array2<Complex64>) {
    let n = coeffs.dim().0;
    for i1 in 0..n {
        let p1 = (n - i1) % n;
        for i2 in 0..n {
            let p2 = (n - i2) % n;
            if (p1, p2) < (i1, i2) {
                continue; // handled when visiting the partner
            }
            if (p1, p2) == (i1, i2) {
                coeffs[[i1, i2]] = Complex64::new(coeffs[[i1, i2]].re, 0.0);
            } else {
                let avg = 0.5 * (coeffs[[i1, i2]] + coeffs[[p1, p2]].conj());
                coeffs[[i1, i2]] = avg;
                coeffs[[p1, p2]] = avg.conj();
            }
        }
    }
}

/// Fourier coefficients of a real zero-mean field on a [`TorusGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    grid: TorusGrid,
    coeffs: Array2<Complex64>,
    time_tag: f64,
}

impl SpectralField {
    pub fn zeros(grid: TorusGrid) -> Self {
        SpectralField {
            grid,
            coeffs: Array2::default((grid.n, grid.n)),
            time_tag: 0.0,
        }
    }

    /// `amplitude * cos(k.x + phase)`, exact coefficients. `k = (0,0)` gives
    /// the zero field (the mean is always projected out).
    pub fn harmonic(grid: TorusGrid, k: (i64, i64), amplitude: f64, phase: f64) -> Self {
        let mut f = Self::zeros(grid);
        if k == (0, 0) {
            return f;
        }
        let c = 0.5 * amplitude * Complex64::new(phase.cos(), phase.sin());
        let (i1, i2) = (grid.index_of(k.0), grid.index_of(k.1));
        let (j1, j2) = (grid.index_of(-k.0), grid.index_of(-k.1));
        f.coeffs[[i1, i2]] = c;
        if (j1, j2) == (i1, i2) {
            // Self-conjugate (Nyquist) mode: cos only, coefficient is real.
            f.coeffs[[i1, i2]] = Complex64::new(amplitude * phase.cos(), 0.0);
        } else {
            f.coeffs[[j1, j2]] = c.conj();
        }
        f
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn time_tag(&self) -> f64 {
        self.time_tag
    }

    pub fn set_time_tag(&mut self, t: f64) {
        self.time_tag = t;
    }

    pub fn with_time_tag(mut self, t: f64) -> Self {
        self.time_tag = t;
        self
    }

    /// Coefficient at signed wavevector `(k1, k2)`.
    pub fn coeff(&self, k1: i64, k2: i64) -> Complex64 {
        self.coeffs[[self.grid.index_of(k1), self.grid.index_of(k2)]]
    }

    pub(crate) fn coeffs(&self) -> &Array2<Complex64> {
        &self.coeffs
    }

    pub(crate) fn coeffs_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.coeffs
    }

    pub fn project_zero_mean(&mut self) {
        self.coeffs[[0, 0]] = Complex64::default();
    }

    /// Mean of the represented function, `coeff(0,0)` (zero except for raw products).
    pub fn mean(&self) -> Complex64 {
        self.coeffs[[0, 0]]
    }

    /// Inverse transform to nodal values (real parts; imaginary dust from the
    /// Hermitian representation is discarded).
    pub fn to_physical(&self) -> PhysicalField {
        let n = self.grid.n;
        let mut buf: Vec<Complex64> = self.coeffs.iter().copied().collect();
        transform_2d(&mut buf, n, Direction::Inverse);
        let values = Array2::from_shape_vec((n, n), buf.iter().map(|c| c.re).collect())
            .expect("buffer length matches grid");
        PhysicalField { grid: self.grid, values, time_tag: self.time_tag }
    }

    /// Apply a wavevector-dependent multiplier `c -> f(k1, k2, c)`.
    pub fn map_modes(&self, f: impl Fn(i64, i64, Complex64) -> Complex64) -> Self {
        let n = self.grid.n;
        let mut out = self.clone();
        for i1 in 0..n {
            let k1 = self.grid.wavenumber(i1);
            for i2 in 0..n {
                let k2 = self.grid.wavenumber(i2);
                out.coeffs[[i1, i2]] = f(k1, k2, self.coeffs[[i1, i2]]);
            }
        }
        out
    }

    /// Spectral derivative along `axis` (multiplication by `i*k`). The
    /// Nyquist row/column is zeroed: an odd-order derivative of a real field
    /// has no consistent Nyquist representation.
    pub fn derivative(&self, axis: Axis) -> Self {
        let nyquist = (self.grid.n / 2) as i64;
        let mut out = self.map_modes(|k1, k2, c| {
            let k = match axis {
                Axis::X1 => k1,
                Axis::X2 => k2,
            };
            if k.abs() == nyquist {
                Complex64::default()
            } else {
                Complex64::new(0.0, k as f64) * c
            }
        });
        out.time_tag = self.time_tag;
        out
    }

    /// Zero every mode with `max(|k1|, |k2|)` beyond the grid's cutoff.
    pub fn dealias(&self) -> Self {
        let cutoff = self.grid.dealias_cutoff();
        self.map_modes(|k1, k2, c| {
            if k1.abs().max(k2.abs()) > cutoff {
                Complex64::default()
            } else {
                c
            }
        })
    }

    /// Pointwise product, dealiased, with the mean projected out
    /// (vorticity equations need zero-mean right-hand sides).
    pub fn product(&self, other: &Self) -> Result<Self, FieldError> {
        let mut f = self.product_raw(other)?;
        f.project_zero_mean();
        Ok(f)
    }

    /// Pointwise product, dealiased, keeping the product mean in `coeff(0,0)`.
    pub fn product_raw(&self, other: &Self) -> Result<Self, FieldError> {
        self.grid.require_same(&other.grid)?;
        let a = self.to_physical();
        let b = other.to_physical();
        let values = &a.values * &b.values;
        let nodal = PhysicalField { grid: self.grid, values, time_tag: self.time_tag };
        Ok(nodal.to_spectral_keep_mean()?.dealias())
    }

    /// Scale all coefficients.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.coeffs.mapv_inplace(|c| c * s);
        out
    }

    /// Restrict to a coarser grid by dropping modes it cannot represent
    /// (spectral truncation, the L2-orthogonal projection).
    pub fn restrict_to(&self, coarse: TorusGrid) -> Result<Self, FieldError> {
        if coarse.n > self.grid.n {
            return Err(FieldError::GridMismatch(self.grid.n, coarse.n));
        }
        if coarse.n == self.grid.n {
            let mut out = self.clone();
            out.grid = coarse;
            return Ok(out.dealias());
        }
        let mut out = SpectralField::zeros(coarse);
        out.time_tag = self.time_tag;
        let half = (coarse.n / 2) as i64;
        for k1 in -half..=half {
            for k2 in -half..=half {
                // Nyquist rows of the coarse grid conflate +-n/2; drop them.
                if k1.abs() == half || k2.abs() == half {
                    continue;
                }
                out.coeffs[[coarse.index_of(k1), coarse.index_of(k2)]] = self.coeff(k1, k2);
            }
        }
        Ok(out.dealias())
    }

    /// `sqrt(sum |coeff|^2)`; by Parseval this is `(2*pi)^-1` times the L2 norm.
    pub fn coeff_l2(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest coefficient magnitude.
    pub fn coeff_max(&self) -> f64 {
        self.coeffs.iter().fold(0.0_f64, |m, c| m.max(c.norm()))
    }

    /// Supremum over modes of `|self - other|` coefficients.
    pub fn coeff_distance(&self, other: &Self) -> Result<f64, FieldError> {
        self.grid.require_same(&other.grid)?;
        let mut max = 0.0_f64;
        for (a, b) in self.coeffs.iter().zip(other.coeffs.iter()) {
            max = max.max((a - b).norm());
        }
        Ok(max)
    }

    pub fn try_add(&self, other: &Self) -> Result<Self, FieldError> {
        self.grid.require_same(&other.grid)?;
        let mut out = self.clone();
        out.coeffs += &other.coeffs;
        Ok(out)
    }

    pub fn try_sub(&self, other: &Self) -> Result<Self, FieldError> {
        self.grid.require_same(&other.grid)?;
        let mut out = self.clone();
        out.coeffs -= &other.coeffs;
        Ok(out)
    }

    /// Checked linear combination `a*self + b*other`.
    pub fn linear_combination(&self, a: f64, other: &Self, b: f64) -> Result<Self, FieldError> {
        self.grid.require_same(&other.grid)?;
        let mut out = self.clone();
        ndarray::Zip::from(&mut out.coeffs)
            .and(&other.coeffs)
            .for_each(|c, &o| *c = *c * a + o * b);
        Ok(out)
    }
}

impl std::ops::Add for &SpectralField {
    type Output = SpectralField;
    fn add(self, rhs: &SpectralField) -> SpectralField {
        self.try_add(rhs).expect("grid mismatch in field addition")
    }
}

impl std::ops::Sub for &SpectralField {
    type Output = SpectralField;
    fn sub(self, rhs: &SpectralField) -> SpectralField {
        self.try_sub(rhs).expect("grid mismatch in field subtraction")
    }
}
