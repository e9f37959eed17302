//! Frequency-side Calderón pairs `(θ̂, ψ̂)` with `Σ_j ψ̂θ̂((A*)^j ξ) = 1` and
//! the square-root factor `φ̂ = √ψ̂`.
//!
//! The shell bump `η̂` is a C^∞ function of `u(ξ) = log ν(ξ) / log R`, where
//! `ν` is the invariant-ellipsoid gauge of `A* = Aᵀ` and `R` is the largest
//! one-step growth of `ν` under `A*`. It equals 1 for `u ∈ [0, 1]` and
//! vanishes outside `(-1, 2)`. Since `u` grows by at most 1 per application of
//! `A*`, every orbit meets the flat band, so `Σ_j η̂² ≥ 1`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::dilation::Dilation;
use crate::error::{Error, Result};
use crate::fft;
use crate::grid::{Domain, Grid, GridFunction, Samples};

/// Minimum number of frequency cells across the support of each certified filter.
pub const MIN_CELLS_ACROSS: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    /// `θ̂ = ψ̂ = η̂ / √S`.
    Symmetric,
    /// `θ̂ = η̂`, `ψ̂ = η̂ / S`.
    Sharp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Filter {
    Psi,
    Theta,
    Phi,
}

/// C^∞ step from 0 at `t <= 0` to 1 at `t >= 1`.
pub fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / t).exp();
    let b = (-1.0 / (1.0 - t)).exp();
    a / (a + b)
}

/// Shell profile in log-gauge units: flat on `[0, 1]`, supported in `(-1, 2)`.
pub fn shell_profile(u: f64) -> f64 {
    if u <= -1.0 || u >= 2.0 {
        0.0
    } else if u < 0.0 {
        smooth_step(u + 1.0)
    } else if u <= 1.0 {
        1.0
    } else {
        smooth_step(2.0 - u)
    }
}

/// Extreme one-step growth factors `(min, max)` of the `P*`-norm under `A*`.
fn growth_bounds(dual: &Dilation) -> (f64, f64) {
    let form = dual.form();
    let chol = form
        .clone()
        .cholesky()
        .expect("ellipsoid form is positive definite");
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .expect("triangular factor is invertible");
    let a = dual.matrix();
    let m: DMatrix<f64> = &l_inv * a.transpose() * form * a * l_inv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let e = m.symmetric_eigen().eigenvalues;
    let lo = e.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo.sqrt(), hi.sqrt())
}

#[derive(Clone, Debug)]
pub struct CalderonPair {
    dilation: Dilation,
    dual: Dilation,
    order: usize,
    variant: Variant,
    log_step_max: f64,
    log_step_min: f64,
    /// Natural-order frequency samples of the base filters.
    pub psi_hat: GridFunction,
    pub theta_hat: GridFunction,
    pub phi_hat: GridFunction,
    /// Filter scales `k` for which `ψ̂((A*)^k ·)` is resolved and inside the
    /// Nyquist box; the identity is certified where only these contribute.
    pub scales: (i32, i32),
    pub identity_residual: f64,
    pub worst_xi: Vec<f64>,
    pub certified_nodes: usize,
}

impl CalderonPair {
    pub fn dilation(&self) -> &Dilation {
        &self.dilation
    }

    /// The transpose dilation `A*` driving the frequency side.
    pub fn dual(&self) -> &Dilation {
        &self.dual
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn grid(&self) -> &Grid {
        &self.psi_hat.grid
    }

    /// Log-gauge coordinate `u(ξ)`; `-inf` at the origin.
    pub fn log_gauge(&self, xi: &[f64]) -> f64 {
        let nu = self.dual.gauge(xi);
        if nu == 0.0 {
            f64::NEG_INFINITY
        } else {
            nu.ln() / self.log_step_max
        }
    }

    pub fn eta(&self, xi: &[f64]) -> f64 {
        shell_profile(self.log_gauge(xi))
    }

    /// `S(ξ) = Σ_j η̂²((A*)^j ξ)` over all `j ∈ Z`.
    pub fn orbit_sum(&self, xi: &[f64]) -> f64 {
        let u = self.log_gauge(xi);
        if !u.is_finite() {
            return 0.0;
        }
        // u((A*)^j ξ) - u(ξ) lies in [j·ratio, j] for j >= 0
        let ratio = self.log_step_min / self.log_step_max;
        let j0 = (-(u + 1.0) / ratio).floor() as i32 - 1;
        let mut y = self.dual.apply_power(j0, xi);
        let mut total = 0.0;
        let at = self.dual.matrix();
        let n = xi.len();
        for _ in 0..10_000 {
            let uy = self.log_gauge(&y);
            if uy >= 2.0 {
                break;
            }
            let e = shell_profile(uy);
            total += e * e;
            let mut next = vec![0.0; n];
            for (i, v) in next.iter_mut().enumerate() {
                *v = (0..n).map(|c| at[(i, c)] * y[c]).sum();
            }
            y = next;
        }
        total
    }

    pub fn filter_at(&self, which: Filter, xi: &[f64]) -> f64 {
        let e = self.eta(xi);
        if e == 0.0 {
            return 0.0;
        }
        let s = self.orbit_sum(xi);
        match (which, self.variant) {
            (Filter::Psi, Variant::Symmetric) | (Filter::Theta, Variant::Symmetric) => e / s.sqrt(),
            (Filter::Theta, Variant::Sharp) => e,
            (Filter::Psi, Variant::Sharp) => e / s,
            (Filter::Phi, Variant::Symmetric) => e.sqrt() / s.powf(0.25),
            (Filter::Phi, Variant::Sharp) => (e / s).sqrt(),
        }
    }

    /// Transfer function of the dilated filter `X_k(x) = b^{-k} X(A^{-k}x)`,
    /// namely `X̂((A*)^k ξ)`.
    pub fn dilated_filter_at(&self, which: Filter, k: i32, xi: &[f64]) -> f64 {
        let y = self.dual.apply_power(k, xi);
        self.filter_at(which, &y)
    }

    /// Range of the log-gauge `u(ξ)` on the support of the scale-`k` filter.
    pub fn support_in_log_gauge(&self, k: i32) -> (f64, f64) {
        // u((A*)^k ξ) ∈ (-1, 2)
        let (a, b) = (self.log_step_min / self.log_step_max, 1.0);
        if k >= 0 {
            (-1.0 - k as f64 * b, 2.0 - k as f64 * a)
        } else {
            (-1.0 - k as f64 * a, 2.0 - k as f64 * b)
        }
    }

    /// Space-domain samples (natural order) of the dilated filter at scale `k`.
    pub fn space_kernel(&self, which: Filter, k: i32) -> GridFunction {
        let grid = self.grid().clone();
        let spec: Vec<Complex64> = (0..grid.len())
            .into_par_iter()
            .map(|i| Complex64::new(self.dilated_filter_at(which, k, &grid.fft_node(i)), 0.0))
            .collect();
        let mut vals = fft::inverse_real(&grid, &spec);
        let inv_cell = 1.0 / grid.cell_volume();
        for v in vals.iter_mut() {
            *v *= inv_cell;
        }
        GridFunction::real(grid.clone(), Domain::Space, fft::fftshift(&grid, &vals))
            .expect("sizes agree")
    }

    /// Max over nodes of `|Σ_{k in scales} ψ̂θ̂((A*)^k ξ) − 1|` where every
    /// contributing scale lies in `scales`; returns `(residual, worst ξ, count)`.
    pub fn identity_check(&self, scales: (i32, i32)) -> (f64, Vec<f64>, usize) {
        let grid = self.grid();
        let results: Vec<Option<(f64, usize)>> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let xi = grid.node(i, Domain::Frequency);
                if xi.iter().all(|v| *v == 0.0) {
                    return None;
                }
                let below = self.log_gauge(&self.dual.apply_power(scales.0 - 1, &xi));
                let above = self.log_gauge(&self.dual.apply_power(scales.1 + 1, &xi));
                if below > -1.0 || above < 2.0 {
                    return None;
                }
                let mut total = 0.0;
                for k in scales.0..=scales.1 {
                    let y = self.dual.apply_power(k, &xi);
                    total += self.filter_at(Filter::Psi, &y) * self.filter_at(Filter::Theta, &y);
                }
                Some(((total - 1.0).abs(), i))
            })
            .collect();
        let mut worst = (0.0, None);
        let mut count = 0;
        for (r, i) in results.into_iter().flatten() {
            count += 1;
            if r > worst.0 || worst.1.is_none() {
                worst = (r, Some(i));
            }
        }
        let xi = worst
            .1
            .map(|i| grid.node(i, Domain::Frequency))
            .unwrap_or_default();
        (worst.0, xi, count)
    }
}

/// Whether the scale-`k` filter support fits strictly inside the Nyquist box
/// and spans at least [`MIN_CELLS_ACROSS`] frequency cells in every direction.
fn scale_resolved(dual: &Dilation, grid: &Grid, log_step_max: f64, k: i32) -> (bool, bool) {
    let n = grid.dim();
    let r = log_step_max.exp();
    // support: ξᵀ M ξ ∈ (R^{-2}, R^4) with M = A^k P* (Aᵀ)^k / c*
    let ak = dual.power(k);
    let m: DMatrix<f64> = ak.transpose() * dual.form() * &ak / dual.level();
    let m_inv = m.clone().try_inverse().expect("invertible");
    let fits = (0..n).all(|a| r * r * m_inv[(a, a)].sqrt() <= grid.nyquist(a) * (1.0 + 1e-12));
    let lmax = m
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let width = (r * r - 1.0 / r) / lmax.sqrt();
    let cell = (0..n).map(|a| grid.freq_spacing(a)).fold(0.0, f64::max);
    (fits, width >= MIN_CELLS_ACROSS * cell)
}

/// Builds the symmetric pair on `grid` and certifies the identity to `tol`.
pub fn build_calderon_pair(
    d: &Dilation,
    order: usize,
    grid: &Grid,
    tol: f64,
) -> Result<CalderonPair> {
    build_calderon_pair_with(d, order, grid, tol, Variant::Symmetric)
}

pub fn build_calderon_pair_with(
    d: &Dilation,
    order: usize,
    grid: &Grid,
    tol: f64,
    variant: Variant,
) -> Result<CalderonPair> {
    if grid.dim() != d.dim() {
        return Err(Error::GridMismatch(format!(
            "grid has dim {}, dilation {}",
            grid.dim(),
            d.dim()
        )));
    }
    let dual = d.transpose()?;
    let (gmin, gmax) = growth_bounds(&dual);
    let log_step_max = gmax.ln();
    let log_step_min = gmin.ln();
    if !(log_step_min > 0.0) {
        return Err(Error::NotExpansive { modulus: gmin });
    }
    let (fits, wide) = scale_resolved(&dual, grid, log_step_max, 0);
    if !fits || !wide {
        return Err(Error::ResolutionTooCoarse(format!(
            "base filter shell needs {MIN_CELLS_ACROSS} cells across and must fit below Nyquist"
        )));
    }
    let mut lo = 0;
    while lo > -200 && scale_resolved(&dual, grid, log_step_max, lo - 1) == (true, true) {
        lo -= 1;
    }
    let mut hi = 0;
    while hi < 200 && scale_resolved(&dual, grid, log_step_max, hi + 1) == (true, true) {
        hi += 1;
    }

    let blank = |g: &Grid| GridFunction::zeros(g.clone(), Domain::Frequency);
    let mut pair = CalderonPair {
        dilation: d.clone(),
        dual,
        order,
        variant,
        log_step_max,
        log_step_min,
        psi_hat: blank(grid),
        theta_hat: blank(grid),
        phi_hat: blank(grid),
        scales: (lo, hi),
        identity_residual: 0.0,
        worst_xi: vec![],
        certified_nodes: 0,
    };
    let sample = |which: Filter| -> Vec<f64> {
        (0..grid.len())
            .into_par_iter()
            .map(|i| pair.filter_at(which, &grid.node(i, Domain::Frequency)))
            .collect()
    };
    let psi = sample(Filter::Psi);
    let theta = sample(Filter::Theta);
    let phi = sample(Filter::Phi);
    for (p, f) in psi.iter().zip(&phi) {
        if (f * f - p).abs() > 1e-12 {
            return Err(Error::InvalidInput("square-root factor mismatch".into()));
        }
    }
    pair.psi_hat.samples = Samples::Real(psi);
    pair.theta_hat.samples = Samples::Real(theta);
    pair.phi_hat.samples = Samples::Real(phi);

    let (residual, xi, count) = pair.identity_check(pair.scales);
    pair.identity_residual = residual;
    pair.worst_xi = xi.clone();
    pair.certified_nodes = count;
    if count == 0 {
        return Err(Error::ResolutionTooCoarse(format!(
            "no frequency node has its full orbit inside scales {:?}",
            pair.scales
        )));
    }
    if residual > tol {
        return Err(Error::ResidualExceedsTol { residual, tol, xi });
    }
    Ok(pair)
}

fn multi_indices(dim: usize, max_order: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..dim {
        let mut next = Vec::new();
        for v in &out {
            let used: usize = v.iter().sum();
            for e in 0..=(max_order - used) {
                let mut w = v.clone();
                w.push(e);
                next.push(w);
            }
        }
        out = next;
    }
    out.sort_by_key(|g| (g.iter().sum::<usize>(), g.clone()));
    out
}

/// Central difference weights for the `m`-th derivative on offsets `-2..=2`.
fn stencil(m: usize) -> [f64; 5] {
    match m {
        0 => [0.0, 0.0, 1.0, 0.0, 0.0],
        1 => [0.0, -0.5, 0.0, 0.5, 0.0],
        2 => [0.0, 1.0, -2.0, 1.0, 0.0],
        3 => [-0.5, 1.0, 0.0, -1.0, 0.5],
        4 => [1.0, -4.0, 6.0, -4.0, 1.0],
        _ => panic!("derivative order above 4"),
    }
}

/// All moments `|∫ x^γ f|` for `|γ| <= order`.
///
/// Space-domain input uses a Riemann sum. Frequency-domain input (natural
/// order) uses `∫ x^γ f = ∂^γ f̂(0) / (-2πi)^{|γ|}` with central differences
/// at the zero frequency, which requires `order <= 4` per axis.
pub fn moments(f: &GridFunction, order: usize) -> Vec<(Vec<usize>, f64)> {
    let grid = &f.grid;
    let dim = grid.dim();
    let indices = multi_indices(dim, order);
    match f.domain {
        Domain::Space => {
            let vals = f.to_complex();
            let cell = grid.cell_volume();
            indices
                .into_iter()
                .map(|g| {
                    let s: Complex64 = (0..grid.len())
                        .into_par_iter()
                        .map(|i| {
                            let x = grid.node(i, Domain::Space);
                            let mono: f64 =
                                g.iter().zip(&x).map(|(e, xv)| xv.powi(*e as i32)).product();
                            vals[i] * mono
                        })
                        .sum();
                    (g, (s * cell).norm())
                })
                .collect()
        }
        Domain::Frequency => {
            let vals = f.to_complex();
            let center: Vec<usize> = grid.points().iter().map(|n| n / 2).collect();
            indices
                .into_iter()
                .map(|g| {
                    let weights: Vec<[f64; 5]> = g.iter().map(|m| stencil(*m)).collect();
                    let mut acc = Complex64::new(0.0, 0.0);
                    let total = 5usize.pow(dim as u32);
                    let mut idx = vec![0usize; dim];
                    'outer: for flat in 0..total {
                        let mut w = 1.0;
                        let mut rem = flat;
                        for a in (0..dim).rev() {
                            let o = rem % 5;
                            rem /= 5;
                            w *= weights[a][o];
                            let i = center[a] as i64 + o as i64 - 2;
                            if i < 0 || i >= grid.points()[a] as i64 {
                                continue 'outer;
                            }
                            idx[a] = i as usize;
                        }
                        if w != 0.0 {
                            acc += vals[grid.ravel(&idx)] * w;
                        }
                    }
                    let mut scale = 1.0;
                    for (a, m) in g.iter().enumerate() {
                        scale *= grid.freq_spacing(a).powi(*m as i32)
                            * (2.0 * std::f64::consts::PI).powi(*m as i32);
                    }
                    (g, acc.norm() / scale)
                })
                .collect()
        }
    }
}

/// Max absolute moment `|∫ x^γ f|` over `|γ| <= order`.
pub fn moment_check(f: &GridFunction, order: usize) -> f64 {
    moments(f, order)
        .into_iter()
        .map(|(_, v)| v)
        .fold(0.0, f64::max)
}

/// Min of `|f̂(ξ)|` over frequency nodes with `ρ*(ξ) ∈ [b^lo, b^hi)`.
pub fn annulus_lower_bound_check(
    theta_hat: &GridFunction,
    dual: &Dilation,
    shell: (i32, i32),
) -> Result<f64> {
    let grid = &theta_hat.grid;
    let vals = theta_hat.abs_values();
    let mut best: Option<f64> = None;
    for (i, v) in vals.iter().enumerate() {
        let xi = grid.node(i, Domain::Frequency);
        if let Some(j) = dual.shell_index(&xi) {
            if j >= shell.0 && j < shell.1 {
                best = Some(best.map_or(*v, |b: f64| b.min(*v)));
            }
        }
    }
    best.ok_or(Error::EmptyShell)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dyadic() -> (Dilation, Grid) {
        (
            Dilation::scalar(2.0).unwrap(),
            Grid::cube(1, 1024, 32.0).unwrap(),
        )
    }

    #[test]
    fn profile_shape() {
        assert_eq!(shell_profile(0.0), 1.0);
        assert_eq!(shell_profile(1.0), 1.0);
        assert_eq!(shell_profile(-1.0), 0.0);
        assert_eq!(shell_profile(2.0), 0.0);
        assert!((shell_profile(-0.5) - 0.5).abs() < 1e-15);
        assert!((smooth_step(0.3) + smooth_step(0.7) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dyadic_pair_identity_and_range() {
        let (d, g) = dyadic();
        let pair = build_calderon_pair(&d, 3, &g, 1e-8).unwrap();
        assert_eq!(pair.scales, (-2, 2), "{:?}", pair.scales);
        assert!(pair.identity_residual <= 1e-12);
        assert!(pair.certified_nodes > 100);
        // partition locality: at most 4 consecutive scales meet any ξ
        for i in 0..g.len() {
            let xi = g.node(i, Domain::Frequency);
            let active = (-40..40)
                .filter(|k| pair.dilated_filter_at(Filter::Psi, *k, &xi) > 0.0)
                .count();
            assert!(active <= 4);
        }
    }

    #[test]
    fn origin_is_not_covered() {
        let (d, g) = dyadic();
        let pair = build_calderon_pair(&d, 3, &g, 1e-8).unwrap();
        assert_eq!(pair.filter_at(Filter::Psi, &[0.0]), 0.0);
        assert_eq!(pair.orbit_sum(&[0.0]), 0.0);
    }

    #[test]
    fn sharp_variant_identity() {
        let d = Dilation::diagonal(&[1.5, 4.0]).unwrap();
        let g = Grid::cube(2, 1024, 16.0).unwrap();
        let pair = build_calderon_pair_with(&d, 2, &g, 1e-8, Variant::Sharp).unwrap();
        assert!(pair.identity_residual <= 1e-12);
        assert!(pair.certified_nodes > 0);
        for xi in [[0.3, -0.1], [1.0, 0.7], [-0.05, 0.02]] {
            let s: f64 = (-60..60)
                .map(|k| {
                    pair.dilated_filter_at(Filter::Psi, k, &xi)
                        * pair.dilated_filter_at(Filter::Theta, k, &xi)
                })
                .sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coarse_grid_rejected() {
        let d = Dilation::scalar(2.0).unwrap();
        let g = Grid::cube(1, 16, 1.0).unwrap();
        assert_eq!(
            build_calderon_pair(&d, 3, &g, 1e-8).unwrap_err().name(),
            "ResolutionTooCoarse"
        );
        // resolved base shell but no node with its whole orbit in range
        let aniso = Dilation::diagonal(&[1.5, 4.0]).unwrap();
        let g = Grid::cube(2, 512, 8.0).unwrap();
        assert_eq!(
            build_calderon_pair(&aniso, 3, &g, 1e-8).unwrap_err().name(),
            "ResolutionTooCoarse"
        );
    }

    #[test]
    fn annulus_bounds() {
        let (d, g) = dyadic();
        let pair = build_calderon_pair_with(&d, 3, &g, 1e-8, Variant::Sharp).unwrap();
        let flat = annulus_lower_bound_check(&pair.theta_hat, pair.dual(), (0, 1)).unwrap();
        assert!(flat >= 0.5);
        assert_eq!(
            annulus_lower_bound_check(&pair.theta_hat, pair.dual(), (3, 4)).unwrap(),
            0.0
        );
        assert_eq!(
            annulus_lower_bound_check(&pair.theta_hat, pair.dual(), (40, 41))
                .unwrap_err()
                .name(),
            "EmptyShell"
        );
    }

    #[test]
    fn moments_of_simple_functions() {
        let g = Grid::cube(1, 1024, 16.0).unwrap();
        let odd = GridFunction::from_fn(g.clone(), |x| x[0] * (-x[0] * x[0]).exp());
        assert!(moment_check(&odd, 0) < 1e-12);
        let gauss =
            GridFunction::from_fn(g.clone(), |x| (-std::f64::consts::PI * x[0] * x[0]).exp());
        assert!((moment_check(&gauss, 0) - 1.0).abs() < 1e-10);
        // frequency side: Gaussian is self-dual, second moment 1/(2π)
        let gh = GridFunction::from_fn_freq(g, |xi| (-std::f64::consts::PI * xi[0] * xi[0]).exp());
        let m = moments(&gh, 2);
        assert!((m[0].1 - 1.0).abs() < 1e-12);
        assert!(m[1].1 < 1e-12);
        assert!(
            (m[2].1 - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-3,
            "{m:?}"
        );
    }

    #[test]
    fn square_root_round_trip() {
        let (d, g) = dyadic();
        let pair = build_calderon_pair(&d, 3, &g, 1e-8).unwrap();
        let phi = pair.space_kernel(Filter::Phi, 0);
        let psi = pair.space_kernel(Filter::Psi, 0);
        let conv = fft::circular_convolve(&g, phi.values().unwrap(), phi.values().unwrap());
        let scale = psi.max_abs();
        let err = conv
            .iter()
            .zip(psi.values().unwrap())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-8 * scale, "{err}");
    }
}
