//! Thin wrapper around `rustfft` for unnormalized 2D transforms on square
//! row-major buffers. Plans are cached per thread so callers stay pure
//! functions while each worker reuses its own scratch space.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Clone, Copy)]
pub(crate) enum Direction {
    Forward,
    Inverse,
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

thread_local! {
    static PLAN_CACHE: RefCell<HashMap<usize, Plans>> = RefCell::new(HashMap::new());
}

/// In-place 2D DFT of an `n x n` row-major buffer. No normalization is
/// applied in either direction; callers own the `1/n^2` convention.
pub(crate) fn transform_2d(buf: &mut [Complex64], n: usize, dir: Direction) {
    assert_eq!(buf.len(), n * n, "buffer must hold an n x n grid");
    PLAN_CACHE.with(|cache| {
        let mut cache = cache.borrow_mut();
        let plans = cache.entry(n).or_insert_with(|| {
            let mut planner = FftPlanner::new();
            let forward = planner.plan_fft_forward(n);
            let inverse = planner.plan_fft_inverse(n);
            let scratch_len = forward
                .get_inplace_scratch_len()
                .max(inverse.get_inplace_scratch_len());
            Plans {
                forward,
                inverse,
                scratch: vec![Complex64::default(); scratch_len],
            }
        });
        let fft = match dir {
            Direction::Forward => Arc::clone(&plans.forward),
            Direction::Inverse => Arc::clone(&plans.inverse),
        };
        // Rows (contiguous chunks of length n), then columns via transpose.
        fft.process_with_scratch(buf, &mut plans.scratch);
        transpose_square(buf, n);
        fft.process_with_scratch(buf, &mut plans.scratch);
        transpose_square(buf, n);
    });
}

fn transpose_square(buf: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            buf.swap(i * n + j, j * n + i);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_then_inverse_scales_by_grid_size() {
        let n = 8;
        let mut buf: Vec<Complex64> = (0..n * n)
            .map(|i| Complex64::new(i as f64 * 0.37 - 5.0, 0.0))
            .collect();
        let original = buf.clone();
        transform_2d(&mut buf, n, Direction::Forward);
        transform_2d(&mut buf, n, Direction::Inverse);
        let scale = (n * n) as f64;
        for (a, b) in buf.iter().zip(original.iter()) {
            assert!((a / scale - b).norm() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_dft_on_small_grid() {
        // Direct O(n^4) DFT summation pins the sign and layout conventions.
        let n = 4;
        let vals: Vec<f64> = (0..n * n).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
        let mut buf: Vec<Complex64> = vals.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        transform_2d(&mut buf, n, Direction::Forward);
        for k1 in 0..n {
            for k2 in 0..n {
                let mut acc = Complex64::default();
                for i in 0..n {
                    for j in 0..n {
                        let phase = -2.0 * std::f64::consts::PI
                            * ((k1 * i) as f64 + (k2 * j) as f64)
                            / n as f64;
                        acc += vals[i * n + j] * Complex64::new(phase.cos(), phase.sin());
                    }
                }
                assert!((buf[k1 * n + k2] - acc).norm() < 1e-10);
            }
        }
    }
}
