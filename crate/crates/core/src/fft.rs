//! Multi-dimensional FFTs over row-major arrays and the spectral helpers built
//! on them. Forward transforms are unnormalized; inverse transforms divide by
//! the number of samples.

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::grid::Grid;

/// In-place n-dimensional FFT of a row-major array with the given shape.
pub fn fft_nd(data: &mut [Complex64], shape: &[usize], inverse: bool) {
    let total: usize = shape.iter().product();
    assert_eq!(total, data.len());
    let mut planner = FftPlanner::<f64>::new();
    let mut stride = 1;
    for axis in (0..shape.len()).rev() {
        let n = shape[axis];
        let plan = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        if stride == 1 {
            data.par_chunks_mut(n * 64.max(1)).for_each(|chunk| {
                let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
                plan.process_with_scratch(chunk, &mut scratch);
            });
        } else {
            // gather each line along `axis` into a contiguous buffer
            let outer = total / (n * stride);
            let mut lines = vec![Complex64::new(0.0, 0.0); total];
            lines.par_chunks_mut(n).enumerate().for_each(|(line, buf)| {
                let o = line / stride;
                let s = line % stride;
                let base = o * n * stride + s;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = data[base + i * stride];
                }
            });
            lines.par_chunks_mut(n * 64).for_each(|chunk| {
                let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
                plan.process_with_scratch(chunk, &mut scratch);
            });
            for line in 0..outer * stride {
                let o = line / stride;
                let s = line % stride;
                let base = o * n * stride + s;
                let buf = &lines[line * n..(line + 1) * n];
                for (i, b) in buf.iter().enumerate() {
                    data[base + i * stride] = *b;
                }
            }
        }
        stride *= n;
    }
    if inverse {
        let scale = 1.0 / total as f64;
        data.par_iter_mut().for_each(|z| *z *= scale);
    }
}

/// Forward spectrum (FFT order) of real natural-order samples.
pub fn spectrum(grid: &Grid, values: &[f64]) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_nd(&mut data, grid.points(), false);
    data
}

/// Real part of the inverse transform of an FFT-order spectrum.
pub fn inverse_real(grid: &Grid, spec: &[Complex64]) -> Vec<f64> {
    let mut data = spec.to_vec();
    fft_nd(&mut data, grid.points(), true);
    data.into_iter().map(|z| z.re).collect()
}

/// Applies the Fourier multiplier `m(ξ)` (evaluated at FFT-order frequencies)
/// to a precomputed spectrum and returns real samples.
pub fn apply_multiplier<M>(grid: &Grid, spec: &[Complex64], m: M) -> Vec<f64>
where
    M: Fn(&[f64]) -> f64 + Sync,
{
    let mut data: Vec<Complex64> = spec
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            let xi = grid.fft_node(i);
            z * m(&xi)
        })
        .collect();
    fft_nd(&mut data, grid.points(), true);
    data.into_iter().map(|z| z.re).collect()
}

/// Moves natural-order samples (origin at the center node) to FFT order
/// (origin at index 0).
pub fn ifftshift<T: Copy>(grid: &Grid, values: &[T]) -> Vec<T> {
    let mut out = values.to_vec();
    let dim = grid.dim();
    let mut idx = vec![0usize; dim];
    let mut dst = vec![0usize; dim];
    for (flat, v) in values.iter().enumerate() {
        grid.unravel(flat, &mut idx);
        for a in 0..dim {
            let n = grid.points()[a];
            dst[a] = (idx[a] + n - n / 2) % n;
        }
        out[grid.ravel(&dst)] = *v;
    }
    out
}

/// Inverse of [`ifftshift`].
pub fn fftshift<T: Copy>(grid: &Grid, values: &[T]) -> Vec<T> {
    let mut out = values.to_vec();
    let dim = grid.dim();
    let mut idx = vec![0usize; dim];
    let mut dst = vec![0usize; dim];
    for (flat, v) in values.iter().enumerate() {
        grid.unravel(flat, &mut idx);
        for a in 0..dim {
            let n = grid.points()[a];
            dst[a] = (idx[a] + n / 2) % n;
        }
        out[grid.ravel(&dst)] = *v;
    }
    out
}

/// Circular convolution of natural-order samples `f` with a kernel `k`
/// sampled on the same grid (kernel origin at the center node), times `hⁿ`.
pub fn circular_convolve(grid: &Grid, f: &[f64], kernel: &[f64]) -> Vec<f64> {
    let shifted = ifftshift(grid, kernel);
    let a = spectrum(grid, f);
    let b = spectrum(grid, &shifted);
    let cell = grid.cell_volume();
    let prod: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x * y * cell).collect();
    inverse_real(grid, &prod)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_2d() {
        let g = Grid::new(vec![8, 4], vec![1.0, 1.0]).unwrap();
        let v: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7).sin()).collect();
        let s = spectrum(&g, &v);
        let back = inverse_real(&g, &s);
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn matches_direct_dft() {
        let g = Grid::new(vec![4, 8], vec![1.0, 1.0]).unwrap();
        let v: Vec<f64> = (0..32).map(|i| ((i * i) % 7) as f64 - 3.0).collect();
        let s = spectrum(&g, &v);
        for m0 in 0..4 {
            for m1 in 0..8 {
                let mut acc = Complex64::new(0.0, 0.0);
                for i0 in 0..4 {
                    for i1 in 0..8 {
                        let ph = -2.0
                            * std::f64::consts::PI
                            * ((m0 * i0) as f64 / 4.0 + (m1 * i1) as f64 / 8.0);
                        acc += v[i0 * 8 + i1] * Complex64::from_polar(1.0, ph);
                    }
                }
                assert!((acc - s[m0 * 8 + m1]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn shifts_are_inverse() {
        let g = Grid::new(vec![4, 8], vec![1.0, 1.0]).unwrap();
        let v: Vec<usize> = (0..32).collect();
        let s = ifftshift(&g, &v);
        // center node (2,4) moves to the origin
        assert_eq!(s[0], 2 * 8 + 4);
        assert_eq!(fftshift(&g, &s), v);
    }
}
