//! Dilated kernels, periodic convolutions and the square functions built from
//! a Calderón pair: g-function, area function, ℋ-norm and maximal functions.
//!
//! Product transforms act on a grid `g1 × g2` whose first `n1` axes belong to
//! the first factor.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::calderon::{CalderonPair, Filter};
use crate::dilation::Dilation;
use crate::error::{Error, Result};
use crate::fft;
use crate::grid::{Domain, Field, Grid, GridFunction};

/// Samples `φ_k(x) = b^{-k} φ(A^{-k} x)` on `grid`.
pub fn dilate_kernel(phi: &dyn Field, d: &Dilation, k: i32, grid: &Grid) -> GridFunction {
    let smallest_axis = d.power(k).singular_values().min();
    let h = (0..grid.dim()).map(|a| grid.spacing(a)).fold(0.0, f64::max);
    if h > smallest_axis {
        log::warn!(
            "grid spacing {h} exceeds the compressed feature scale {smallest_axis} at k = {k}"
        );
    }
    let scale = d.det_abs().powi(-k);
    GridFunction::from_fn(grid.clone(), |x| scale * phi.eval(&d.apply_inv_power(k, x)))
}

/// Periodic convolution `(f * g)(x) = Σ_y f(x - y) g(y) hⁿ`; both in natural order.
pub fn convolve(f: &GridFunction, g: &GridFunction) -> Result<GridFunction> {
    f.same_grid(g)?;
    if f.domain != Domain::Space {
        return Err(Error::GridMismatch(
            "convolution expects space-domain samples".into(),
        ));
    }
    let out = fft::circular_convolve(&f.grid, f.values()?, g.values()?);
    GridFunction::real(f.grid.clone(), Domain::Space, out)
}

/// Largest `|f|` on the outer layer (one sixteenth of each axis) relative to `max |f|`.
pub fn padding_defect(f: &GridFunction) -> f64 {
    let grid = &f.grid;
    let vals = f.abs_values();
    let peak = vals.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return 0.0;
    }
    let mut idx = vec![0usize; grid.dim()];
    let mut edge: f64 = 0.0;
    for (i, v) in vals.iter().enumerate() {
        grid.unravel(i, &mut idx);
        let outer = idx
            .iter()
            .zip(grid.points())
            .any(|(&j, &n)| j < n / 16 || j >= n - n / 16);
        if outer {
            edge = edge.max(*v);
        }
    }
    edge / peak
}

/// Coefficient fields `f * X_k` (one factor) or `f * X_{k1,k2}` (two factors).
#[derive(Clone, Debug)]
pub struct ScaleDecomposition {
    pub windows: Vec<(i32, i32)>,
    pub dilations: Vec<Dilation>,
    /// Number of grid axes owned by each factor.
    pub factor_dims: Vec<usize>,
    /// Row-major over scale tuples, last factor fastest.
    pub fields: Vec<GridFunction>,
    /// Fraction of `‖f‖₂²` outside the reproduced band of the window.
    pub truncation_energy: f64,
}

impl ScaleDecomposition {
    pub fn scale_tuples(&self) -> Vec<Vec<i32>> {
        let mut out = vec![vec![]];
        for w in &self.windows {
            let mut next = Vec::new();
            for prefix in &out {
                for k in w.0..=w.1 {
                    let mut v = prefix.clone();
                    v.push(k);
                    next.push(v);
                }
            }
            out = next;
        }
        out
    }

    pub fn grid(&self) -> &Grid {
        &self.fields[0].grid
    }
}

fn check_window(pair: &CalderonPair, window: (i32, i32)) -> Result<()> {
    let (lo, hi) = pair.scales;
    if window.0 > window.1 || window.0 < lo || window.1 > hi {
        return Err(Error::WindowOutsideCertifiedRange {
            lo: window.0,
            hi: window.1,
            cert_lo: lo,
            cert_hi: hi,
        });
    }
    Ok(())
}

/// FFT-order transfer function of the scale-`k` filter on the pair's grid.
fn transfer(pair: &CalderonPair, which: Filter, k: i32) -> Vec<f64> {
    let g = pair.grid();
    (0..g.len())
        .into_par_iter()
        .map(|i| pair.dilated_filter_at(which, k, &g.fft_node(i)))
        .collect()
}

fn filtered(spec: &[Complex64], grid: &Grid, mask: &[f64]) -> Vec<f64> {
    let data: Vec<Complex64> = spec.iter().zip(mask).map(|(z, m)| z * m).collect();
    fft::inverse_real(grid, &data)
}

fn energy_outside(spec: &[Complex64], reproduced: &[f64]) -> f64 {
    let total: f64 = spec.iter().map(|z| z.norm_sqr()).sum();
    if total == 0.0 {
        return 0.0;
    }
    let missing: f64 = spec
        .iter()
        .zip(reproduced)
        .map(|(z, r)| z.norm_sqr() * (1.0 - r).abs())
        .sum();
    missing / total
}

/// One-parameter decomposition `{f * X_k}` for `k` in `window`.
pub fn decompose(
    f: &GridFunction,
    pair: &CalderonPair,
    window: (i32, i32),
    which: Filter,
) -> Result<ScaleDecomposition> {
    check_window(pair, window)?;
    if f.grid != *pair.grid() {
        return Err(Error::GridMismatch("function and pair grids differ".into()));
    }
    let spec = fft::spectrum(&f.grid, f.values()?);
    let scales: Vec<i32> = (window.0..=window.1).collect();
    let masks: Vec<Vec<f64>> = scales.iter().map(|&k| transfer(pair, which, k)).collect();
    let fields: Vec<GridFunction> = masks
        .par_iter()
        .map(|m| {
            GridFunction::real(f.grid.clone(), Domain::Space, filtered(&spec, &f.grid, m))
                .expect("sizes agree")
        })
        .collect();
    let mut reproduced = vec![0.0; f.grid.len()];
    for &k in &scales {
        let p = transfer(pair, Filter::Psi, k);
        let t = transfer(pair, Filter::Theta, k);
        for ((r, a), b) in reproduced.iter_mut().zip(&p).zip(&t) {
            *r += a * b;
        }
    }
    Ok(ScaleDecomposition {
        windows: vec![window],
        dilations: vec![pair.dilation().clone()],
        factor_dims: vec![f.grid.dim()],
        fields,
        truncation_energy: energy_outside(&spec, &reproduced),
    })
}

/// Two-parameter decomposition `{f * X_{k1,k2}}` with tensor filters.
pub fn decompose_product(
    f: &GridFunction,
    pairs: (&CalderonPair, &CalderonPair),
    windows: ((i32, i32), (i32, i32)),
    which: Filter,
) -> Result<ScaleDecomposition> {
    check_window(pairs.0, windows.0)?;
    check_window(pairs.1, windows.1)?;
    let (g1, g2) = (pairs.0.grid(), pairs.1.grid());
    if f.grid != g1.product(g2) {
        return Err(Error::GridMismatch(
            "function grid is not the product of the pair grids".into(),
        ));
    }
    let spec = fft::spectrum(&f.grid, f.values()?);
    let len2 = g2.len();
    let t1: Vec<Vec<f64>> = (windows.0 .0..=windows.0 .1)
        .map(|k| transfer(pairs.0, which, k))
        .collect();
    let t2: Vec<Vec<f64>> = (windows.1 .0..=windows.1 .1)
        .map(|k| transfer(pairs.1, which, k))
        .collect();
    let combos: Vec<(usize, usize)> = (0..t1.len())
        .flat_map(|a| (0..t2.len()).map(move |b| (a, b)))
        .collect();
    let fields: Vec<GridFunction> = combos
        .par_iter()
        .map(|&(a, b)| {
            let mask: Vec<f64> = (0..f.grid.len())
                .map(|i| t1[a][i / len2] * t2[b][i % len2])
                .collect();
            GridFunction::real(
                f.grid.clone(),
                Domain::Space,
                filtered(&spec, &f.grid, &mask),
            )
            .expect("sizes agree")
        })
        .collect();
    let reproduced_factor = |pair: &CalderonPair, w: (i32, i32)| {
        let mut r = vec![0.0; pair.grid().len()];
        for k in w.0..=w.1 {
            let p = transfer(pair, Filter::Psi, k);
            let t = transfer(pair, Filter::Theta, k);
            for ((x, a), b) in r.iter_mut().zip(&p).zip(&t) {
                *x += a * b;
            }
        }
        r
    };
    let r1 = reproduced_factor(pairs.0, windows.0);
    let r2 = reproduced_factor(pairs.1, windows.1);
    let reproduced: Vec<f64> = (0..f.grid.len())
        .map(|i| r1[i / len2] * r2[i % len2])
        .collect();
    Ok(ScaleDecomposition {
        windows: vec![windows.0, windows.1],
        dilations: vec![pairs.0.dilation().clone(), pairs.1.dilation().clone()],
        factor_dims: vec![g1.dim(), g2.dim()],
        fields,
        truncation_energy: energy_outside(&spec, &reproduced),
    })
}

/// Pointwise `(Σ |field|²)^{1/2}`, summed in the stored scale order.
pub fn square_sum(coeffs: &ScaleDecomposition) -> GridFunction {
    let grid = coeffs.grid().clone();
    let mut acc = vec![0.0; grid.len()];
    for field in &coeffs.fields {
        for (a, v) in acc.iter_mut().zip(field.values().expect("real")) {
            *a += v * v;
        }
    }
    GridFunction::real(
        grid,
        Domain::Space,
        acc.into_iter().map(f64::sqrt).collect(),
    )
    .expect("sizes agree")
}

/// `g(f) = (Σ_k |f * ψ_k|²)^{1/2}`.
pub fn g_function(
    f: &GridFunction,
    pair: &CalderonPair,
    window: (i32, i32),
) -> Result<GridFunction> {
    Ok(square_sum(&decompose(f, pair, window, Filter::Psi)?))
}

pub fn g_function_product(
    f: &GridFunction,
    pairs: (&CalderonPair, &CalderonPair),
    windows: ((i32, i32), (i32, i32)),
) -> Result<GridFunction> {
    Ok(square_sum(&decompose_product(
        f,
        pairs,
        windows,
        Filter::Psi,
    )?))
}

/// Natural-order indicator of the rasterized `B_k` on the axes `axes` of `grid`,
/// with the node count.
fn ball_indicator(grid: &Grid, d: &Dilation, k: i32) -> (Vec<f64>, usize) {
    let v = grid.sample(|x| if d.contains(x, k) { 1.0 } else { 0.0 });
    let count = v.iter().filter(|x| **x > 0.0).count();
    (v, count)
}

/// `|{F_k}|_ℋ(x) = (Σ_k avg_{y ∈ B_k} |F_k(x - y)|²)^{1/2}` (products of balls
/// for two factors); averages use the rasterized node count.
pub fn h_norm(coeffs: &ScaleDecomposition) -> Result<GridFunction> {
    let grid = coeffs.grid().clone();
    let tuples = coeffs.scale_tuples();
    let factor_grids: Vec<Grid> = {
        let mut start = 0;
        coeffs
            .factor_dims
            .iter()
            .map(|&n| {
                let g = grid.axes(start..start + n);
                start += n;
                g
            })
            .collect()
    };
    if factor_grids.len() != coeffs.dilations.len() {
        return Err(Error::GridMismatch("factor metadata inconsistent".into()));
    }
    let terms: Vec<Vec<f64>> = tuples
        .par_iter()
        .zip(coeffs.fields.par_iter())
        .map(|(ks, field)| {
            let mut kernel = vec![1.0];
            let mut count = 1usize;
            for ((g, d), &k) in factor_grids.iter().zip(&coeffs.dilations).zip(ks) {
                let (ind, c) = ball_indicator(g, d, k);
                count *= c;
                kernel = kernel
                    .iter()
                    .flat_map(|a| ind.iter().map(move |b| a * b))
                    .collect();
            }
            let norm = 1.0 / (count as f64 * grid.cell_volume());
            for v in kernel.iter_mut() {
                *v *= norm;
            }
            let sq: Vec<f64> = field
                .values()
                .expect("real")
                .iter()
                .map(|v| v * v)
                .collect();
            fft::circular_convolve(&grid, &sq, &kernel)
        })
        .collect();
    let mut acc = vec![0.0; grid.len()];
    for t in &terms {
        for (a, v) in acc.iter_mut().zip(t) {
            *a += v.max(0.0);
        }
    }
    GridFunction::real(
        grid,
        Domain::Space,
        acc.into_iter().map(f64::sqrt).collect(),
    )
}

pub fn area_function(
    f: &GridFunction,
    pair: &CalderonPair,
    window: (i32, i32),
) -> Result<GridFunction> {
    h_norm(&decompose(f, pair, window, Filter::Psi)?)
}

pub fn area_function_product(
    f: &GridFunction,
    pairs: (&CalderonPair, &CalderonPair),
    windows: ((i32, i32), (i32, i32)),
) -> Result<GridFunction> {
    h_norm(&decompose_product(f, pairs, windows, Filter::Psi)?)
}

/// Offsets (grid index vectors) of the rasterized `B_k`.
fn ball_offsets(grid: &Grid, d: &Dilation, k: i32) -> Vec<Vec<i64>> {
    let dim = grid.dim();
    let hw = d.bounding_half_widths(k);
    let ext: Vec<i64> = (0..dim)
        .map(|a| ((hw[a] / grid.spacing(a)).ceil() as i64 + 1).min(grid.points()[a] as i64 / 2))
        .collect();
    let total: i64 = ext.iter().map(|e| 2 * e + 1).product();
    let mut out = Vec::new();
    let mut idx = vec![0i64; dim];
    for flat in 0..total {
        let mut f = flat;
        for a in (0..dim).rev() {
            let w = 2 * ext[a] + 1;
            idx[a] = f % w - ext[a];
            f /= w;
        }
        let y: Vec<f64> = (0..dim).map(|a| idx[a] as f64 * grid.spacing(a)).collect();
        if d.contains(&y, k) {
            out.push(idx.clone());
        }
    }
    out
}

/// Periodic sliding maximum along one axis with half-width `m` nodes.
fn sliding_max_axis(values: &[f64], shape: &[usize], axis: usize, m: usize) -> Vec<f64> {
    let n = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer = values.len() / (n * stride);
    let mut out = vec![0.0; values.len()];
    let m = m.min(n / 2);
    let mut line = vec![0.0; n + 2 * m];
    let mut deque = std::collections::VecDeque::new();
    for o in 0..outer {
        for s in 0..stride {
            let base = o * n * stride + s;
            for (j, slot) in line.iter_mut().enumerate() {
                let i = (j + n - m) % n;
                *slot = values[base + i * stride];
            }
            deque.clear();
            let w = 2 * m + 1;
            for j in 0..line.len() {
                while let Some(&back) = deque.back() {
                    if line[back] <= line[j] {
                        deque.pop_back();
                    } else {
                        break;
                    }
                }
                deque.push_back(j);
                if *deque.front().unwrap() + w <= j {
                    deque.pop_front();
                }
                if j + 1 >= w {
                    let i = j + 1 - w;
                    if i < n {
                        out[base + i * stride] = line[*deque.front().unwrap()];
                    }
                }
            }
        }
    }
    out
}

/// Periodic max-pooling over the rasterized `B_k` of one factor.
fn pool_factor(
    values: &[f64],
    grid: &Grid,
    axes: std::ops::Range<usize>,
    d: &Dilation,
    k: i32,
) -> Vec<f64> {
    let factor = grid.axes(axes.clone());
    if factor.dim() == 1 {
        let offs = ball_offsets(&factor, d, k);
        let m = offs
            .iter()
            .map(|o| o[0].unsigned_abs() as usize)
            .max()
            .unwrap_or(0);
        return sliding_max_axis(values, grid.points(), axes.start, m);
    }
    let offs = ball_offsets(&factor, d, k);
    let pts = grid.points().to_vec();
    let dim = grid.dim();
    (0..values.len())
        .into_par_iter()
        .map_init(
            || (vec![0usize; dim], vec![0usize; dim]),
            |(idx, j), flat| {
                grid.unravel(flat, idx);
                let mut best = f64::NEG_INFINITY;
                for o in &offs {
                    j.copy_from_slice(idx);
                    for (t, a) in axes.clone().enumerate() {
                        let n = pts[a] as i64;
                        j[a] = ((idx[a] as i64 + o[t]).rem_euclid(n)) as usize;
                    }
                    best = best.max(values[grid.ravel(j)]);
                }
                best
            },
        )
        .collect()
}

/// Strong maximal function over scale windows: for each `(k1, k2)` the
/// centered average of `|f|` over `B_{k1} × B_{k2}` is max-pooled over the
/// same rectangle; the result is maxed over scales and with `|f|` itself.
pub fn strong_maximal(
    f: &GridFunction,
    dilations: (&Dilation, &Dilation),
    windows: ((i32, i32), (i32, i32)),
) -> Result<GridFunction> {
    let grid = f.grid.clone();
    let n1 = dilations.0.dim();
    if n1 + dilations.1.dim() != grid.dim() {
        return Err(Error::GridMismatch(
            "dilation dimensions do not add up to the grid".into(),
        ));
    }
    let abs = f.abs_values();
    let g1 = grid.axes(0..n1);
    let g2 = grid.axes(n1..grid.dim());
    let combos: Vec<(i32, i32)> = (windows.0 .0..=windows.0 .1)
        .flat_map(|a| (windows.1 .0..=windows.1 .1).map(move |b| (a, b)))
        .collect();
    let per_scale: Vec<Vec<f64>> = combos
        .par_iter()
        .map(|&(k1, k2)| {
            let (i1, c1) = ball_indicator(&g1, dilations.0, k1);
            let (i2, c2) = ball_indicator(&g2, dilations.1, k2);
            let norm = 1.0 / ((c1 * c2) as f64 * grid.cell_volume());
            let kernel: Vec<f64> = i1
                .iter()
                .flat_map(|a| i2.iter().map(move |b| a * b * norm))
                .collect();
            let avg = fft::circular_convolve(&grid, &abs, &kernel);
            let pooled = pool_factor(&avg, &grid, 0..n1, dilations.0, k1);
            pool_factor(&pooled, &grid, n1..grid.dim(), dilations.1, k2)
        })
        .collect();
    let mut out = abs.clone();
    for s in &per_scale {
        for (o, v) in out.iter_mut().zip(s) {
            *o = o.max(*v);
        }
    }
    GridFunction::real(grid, Domain::Space, out)
}

/// One-parameter analogue of [`strong_maximal`].
pub fn maximal(f: &GridFunction, d: &Dilation, window: (i32, i32)) -> Result<GridFunction> {
    let grid = f.grid.clone();
    if d.dim() != grid.dim() {
        return Err(Error::GridMismatch(
            "dilation and grid dimensions differ".into(),
        ));
    }
    let abs = f.abs_values();
    let per_scale: Vec<Vec<f64>> = (window.0..=window.1)
        .into_par_iter()
        .map(|k| {
            let (ind, c) = ball_indicator(&grid, d, k);
            let norm = 1.0 / (c as f64 * grid.cell_volume());
            let kernel: Vec<f64> = ind.iter().map(|v| v * norm).collect();
            let avg = fft::circular_convolve(&grid, &abs, &kernel);
            pool_factor(&avg, &grid, 0..grid.dim(), d, k)
        })
        .collect();
    let mut out = abs.clone();
    for s in &per_scale {
        for (o, v) in out.iter_mut().zip(s) {
            *o = o.max(*v);
        }
    }
    GridFunction::real(grid, Domain::Space, out)
}

/// `(Σ |f|^p w hⁿ)^{1/p}`; `w = None` means the unit weight.
pub fn lebesgue_norm(f: &GridFunction, p: f64, w: Option<&[f64]>) -> f64 {
    let vals = f.abs_values();
    let cell = f.grid.cell_volume();
    let s: f64 = match w {
        Some(w) => vals.iter().zip(w).map(|(v, wt)| v.powf(p) * wt).sum(),
        None => vals.iter().map(|v| v.powf(p)).sum(),
    };
    (s * cell).powf(1.0 / p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calderon::build_calderon_pair;
    use crate::grid::FnField;
    use std::f64::consts::PI;

    fn gauss(var: f64) -> impl Fn(&[f64]) -> f64 + Sync {
        move |x: &[f64]| (-x[0] * x[0] / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
    }

    #[test]
    fn dilation_preserves_mass_and_matches_fourier_side() {
        let g = Grid::cube(1, 4096, 64.0).unwrap();
        let d = Dilation::scalar(2.0).unwrap();
        let base = FnField::new(1, gauss(1.0));
        let f0 = dilate_kernel(&base, &d, 0, &g);
        assert_eq!(f0, GridFunction::from_fn(g.clone(), gauss(1.0)));
        for k in -3..=3 {
            let fk = dilate_kernel(&base, &d, k, &g);
            assert!((fk.l1_norm() - 1.0).abs() < 1e-10, "{k}");
            let spec = fft::spectrum(&g, &fft::ifftshift(&g, fk.values().unwrap()));
            for m in (0..g.len()).step_by(41).take(100) {
                let xi = g.fft_freq(0, m);
                let want = (-2.0 * PI * PI * (2f64.powi(k) * xi).powi(2)).exp();
                let got = spec[m] * g.cell_volume();
                assert!((got.re - want).abs() < 1e-10 && got.im.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn convolution_identities() {
        let g = Grid::cube(1, 512, 16.0).unwrap();
        let f = GridFunction::from_fn(g.clone(), gauss(1.0));
        let h = GridFunction::from_fn(g.clone(), gauss(0.5));
        let mut delta = vec![0.0; 512];
        delta[256] = 1.0 / g.spacing(0);
        let delta = GridFunction::real(g.clone(), Domain::Space, delta).unwrap();
        let fd = convolve(&f, &delta).unwrap();
        for (a, b) in fd.values().unwrap().iter().zip(f.values().unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
        let fh = convolve(&f, &h).unwrap();
        let hf = convolve(&h, &f).unwrap();
        let want = GridFunction::from_fn(g.clone(), gauss(1.5));
        for ((a, b), c) in fh
            .values()
            .unwrap()
            .iter()
            .zip(hf.values().unwrap())
            .zip(want.values().unwrap())
        {
            assert!((a - b).abs() < 1e-14);
            assert!((a - c).abs() < 1e-8);
        }
        let other = GridFunction::from_fn(Grid::cube(1, 256, 16.0).unwrap(), gauss(1.0));
        assert_eq!(convolve(&f, &other).unwrap_err().name(), "GridMismatch");
    }

    fn band_limited(g: &Grid, centre: f64) -> GridFunction {
        // f̂ supported where 2|ξ| ∈ (centre/1.2, centre*1.2)
        let spec: Vec<Complex64> = (0..g.len())
            .map(|i| {
                let xi = g.fft_freq(0, i).abs() * 2.0;
                let t = (xi / centre).ln() / 1.2f64.ln();
                let bump = if t.abs() < 1.0 {
                    (-1.0 / (1.0 - t * t)).exp()
                } else {
                    0.0
                };
                Complex64::new(bump, 0.0)
            })
            .collect();
        let v = fft::inverse_real(g, &spec);
        GridFunction::real(g.clone(), Domain::Space, fft::fftshift(g, &v)).unwrap()
    }

    #[test]
    fn g_function_basics() {
        let d = Dilation::scalar(2.0).unwrap();
        let g = Grid::cube(1, 1024, 32.0).unwrap();
        let pair = build_calderon_pair(&d, 3, &g, 1e-8).unwrap();
        let zero = GridFunction::zeros(g.clone(), Domain::Space);
        assert_eq!(g_function(&zero, &pair, (-2, 2)).unwrap().max_abs(), 0.0);
        assert_eq!(
            g_function(&zero, &pair, (-5, 2)).unwrap_err().name(),
            "WindowOutsideCertifiedRange"
        );
        let f = band_limited(&g, 1.5);
        let dec = decompose(&f, &pair, (-2, 2), Filter::Psi).unwrap();
        let gf = square_sum(&dec);
        // Parseval over scales
        let lhs: f64 = gf.values().unwrap().iter().map(|v| v * v).sum();
        let rhs: f64 = dec
            .fields
            .iter()
            .map(|fl| fl.values().unwrap().iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert!((lhs - rhs).abs() <= 1e-12 * rhs);
        // scale locality: f̂ lives near ν = 1.5; scales whose shell misses it vanish
        let peak = f.max_abs();
        let mut active = 0;
        for (k, fl) in (-2..=2).zip(&dec.fields) {
            let (lo, hi) = pair.support_in_log_gauge(k);
            let band = (1.5f64 / 1.2).log2()..(1.5f64 * 1.2).log2();
            let overlap = band.start < hi && band.end > lo;
            if overlap {
                active += 1;
            } else {
                assert!(fl.max_abs() <= 1e-10 * peak, "k = {k}");
            }
        }
        assert!(active <= 4);
        // homogeneity and isometry of the symmetric pair
        let mut scaled = f.clone();
        scaled
            .values_mut()
            .unwrap()
            .iter_mut()
            .for_each(|v| *v *= -3.0);
        let gs = g_function(&scaled, &pair, (-2, 2)).unwrap();
        for (a, b) in gs.values().unwrap().iter().zip(gf.values().unwrap()) {
            assert!((a - 3.0 * b).abs() <= 1e-12 * (1.0 + b));
        }
        let nf = lebesgue_norm(&f, 2.0, None);
        let ng = lebesgue_norm(&gf, 2.0, None);
        assert!((ng / nf - 1.0).abs() < 1e-10);
        assert!(dec.truncation_energy < 1e-12);
    }

    #[test]
    fn area_and_g_are_comparable() {
        let d = Dilation::scalar(2.0).unwrap();
        let g = Grid::cube(1, 1024, 32.0).unwrap();
        let pair = build_calderon_pair(&d, 3, &g, 1e-8).unwrap();
        let f = band_limited(&g, 1.5);
        let s = area_function(&f, &pair, (-2, 2)).unwrap();
        let gf = g_function(&f, &pair, (-2, 2)).unwrap();
        let ratio = lebesgue_norm(&s, 2.0, None) / lebesgue_norm(&gf, 2.0, None);
        assert!((0.25..=4.0).contains(&ratio), "{ratio}");
        let zero = GridFunction::zeros(g, Domain::Space);
        assert_eq!(area_function(&zero, &pair, (-2, 2)).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn sliding_max_matches_brute_force() {
        let shape = [6usize, 10];
        let v: Vec<f64> = (0..60).map(|i| ((i * 37) % 17) as f64).collect();
        let out = sliding_max_axis(&v, &shape, 1, 2);
        for r in 0..6 {
            for c in 0..10 {
                let want = (-2i64..=2)
                    .map(|o| v[r * 10 + ((c as i64 + o).rem_euclid(10)) as usize])
                    .fold(f64::MIN, f64::max);
                assert_eq!(out[r * 10 + c], want);
            }
        }
        let out0 = sliding_max_axis(&v, &shape, 0, 1);
        for r in 0..6 {
            for c in 0..10 {
                let want = (-1i64..=1)
                    .map(|o| v[((r as i64 + o).rem_euclid(6)) as usize * 10 + c])
                    .fold(f64::MIN, f64::max);
                assert_eq!(out0[r * 10 + c], want);
            }
        }
    }

    #[test]
    fn strong_maximal_properties() {
        let g1 = Grid::cube(1, 64, 4.0).unwrap();
        let d = Dilation::scalar(2.0).unwrap();
        let grid = g1.product(&g1);
        // indicator of B_0 × B_0
        let f = GridFunction::from_fn(grid.clone(), |x| {
            (d.contains(&x[..1], 0) && d.contains(&x[1..], 0)) as u8 as f64
        });
        let m = strong_maximal(&f, (&d, &d), ((-2, 1), (-2, 1))).unwrap();
        for (i, v) in f.values().unwrap().iter().enumerate() {
            if *v == 1.0 {
                assert!((m.values().unwrap()[i] - 1.0).abs() < 1e-12);
            }
        }
        let smooth = GridFunction::from_fn(grid, |x| {
            (-(x[0] * x[0] + 2.0 * x[1] * x[1])).exp() * (3.0 * x[0]).cos()
        });
        let ms = strong_maximal(&smooth, (&d, &d), ((-3, 1), (-3, 1))).unwrap();
        for (a, b) in ms.values().unwrap().iter().zip(smooth.values().unwrap()) {
            assert!(*a >= b.abs() - 1e-6);
        }
    }

    #[test]
    fn norms() {
        let g = Grid::cube(2, 16, 0.5).unwrap();
        let one = GridFunction::from_fn(g.clone(), |_| 1.0);
        for p in [0.5, 1.0, 2.0, 3.5] {
            assert!((lebesgue_norm(&one, p, None) - 1.0).abs() < 1e-14);
        }
        let f = GridFunction::from_fn(g.clone(), |x| (7.0 * x[0]).sin() + x[1]);
        let h = GridFunction::from_fn(g.clone(), |x| (3.0 * x[1]).cos() - x[0]);
        let mut cf = f.clone();
        cf.values_mut().unwrap().iter_mut().for_each(|v| *v *= -2.5);
        assert!((lebesgue_norm(&cf, 2.0, None) - 2.5 * lebesgue_norm(&f, 2.0, None)).abs() < 1e-13);
        let prod: Vec<f64> = f
            .values()
            .unwrap()
            .iter()
            .zip(h.values().unwrap())
            .map(|(a, b)| a * b)
            .collect();
        let fg = GridFunction::real(g, Domain::Space, prod).unwrap();
        assert!(
            lebesgue_norm(&fg, 1.0, None)
                <= lebesgue_norm(&f, 2.0, None) * lebesgue_norm(&h, 2.0, None)
        );
    }
}
