//! Normalized bump checks and the telescoping decomposition of a mean-zero
//! function into dilated, mean-zero bumps `ψ = Σ_k b^{-kM} ψ^{(k)}`.
//!
//! Terms are evaluated analytically from the source field. Integrals are
//! computed on per-scale charts: the `k`-th term is supported in `B_k`, so it
//! is integrated and differentiated as `y ↦ ψ^{(k)}(A^k y)` on a fixed box
//! around `B_0`.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::calderon::smooth_step;
use crate::dilation::Dilation;
use crate::error::{Error, Result};
use crate::grid::{Domain, Field, Grid, GridFunction};

/// Cutoff equal to 1 on `r^{-1}Δ ⊇ B_{-1}` and supported in `B_0`,
/// radial in the invariant-ellipsoid gauge.
#[derive(Clone, Debug)]
pub struct Cutoff {
    dilation: Dilation,
    inner: f64,
}

impl Cutoff {
    pub fn new(d: &Dilation) -> Self {
        Cutoff {
            dilation: d.clone(),
            inner: 1.0 / d.expansion_ratio(),
        }
    }

    /// Gauge value below which the cutoff is identically 1.
    pub fn inner(&self) -> f64 {
        self.inner
    }

    /// Transition profile as a function of the gauge.
    pub fn profile(&self, t: f64) -> f64 {
        1.0 - smooth_step((t - self.inner) / (1.0 - self.inner))
    }
}

impl Field for Cutoff {
    fn dim(&self) -> usize {
        self.dilation.dim()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.profile(self.dilation.gauge(x))
    }
}

/// Samples the cutoff on `grid`. `_derivs` is the smoothness order requested
/// by callers; the profile is C^∞, so it only documents intent.
pub fn make_cutoff_theta(d: &Dilation, _derivs: usize, grid: &Grid) -> GridFunction {
    let c = Cutoff::new(d);
    GridFunction::from_fn(grid.clone(), |x| c.eval(x))
}

/// Default chart intervals per axis for dimensions 1, 2, 3.
fn default_chart_points(dim: usize) -> usize {
    match dim {
        1 => 4096,
        2 => 256,
        _ => 48,
    }
}

/// Chart grid over the box `1.25 ×` the bounding box of `B_0`.
fn chart_grid(d: &Dilation, points: usize) -> Grid {
    let hw: Vec<f64> = d
        .bounding_half_widths(0)
        .into_iter()
        .map(|w| 1.25 * w)
        .collect();
    Grid::new(vec![points.next_power_of_two(); d.dim()], hw).expect("valid chart")
}

/// Fourth-order central stencils for derivative orders 0..=4 on offsets -3..=3.
pub(crate) fn stencil(order: usize) -> [f64; 7] {
    match order {
        0 => [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        1 => [
            0.0,
            1.0 / 12.0,
            -2.0 / 3.0,
            0.0,
            2.0 / 3.0,
            -1.0 / 12.0,
            0.0,
        ],
        2 => [
            0.0,
            -1.0 / 12.0,
            4.0 / 3.0,
            -5.0 / 2.0,
            4.0 / 3.0,
            -1.0 / 12.0,
            0.0,
        ],
        3 => [
            1.0 / 8.0,
            -1.0,
            13.0 / 8.0,
            0.0,
            -13.0 / 8.0,
            1.0,
            -1.0 / 8.0,
        ],
        4 => [
            -1.0 / 6.0,
            2.0,
            -13.0 / 2.0,
            28.0 / 3.0,
            -13.0 / 2.0,
            2.0,
            -1.0 / 6.0,
        ],
        _ => panic!("derivative order above 4"),
    }
}

pub(crate) fn multi_indices(dim: usize, max_order: usize) -> Vec<Vec<usize>> {
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
    out
}

/// `max_x |∂^α g(x)|` for every `|α| <= order`, from samples on `grid`,
/// evaluated at nodes where the stencil fits.
fn derivative_sups(grid: &Grid, values: &[f64], order: usize) -> Vec<(Vec<usize>, f64)> {
    let dim = grid.dim();
    multi_indices(dim, order)
        .into_par_iter()
        .map(|alpha| {
            let weights: Vec<[f64; 7]> = alpha.iter().map(|m| stencil(*m)).collect();
            let scale: f64 = alpha
                .iter()
                .enumerate()
                .map(|(a, m)| grid.spacing(a).powi(-(*m as i32)))
                .product();
            let mut best: f64 = 0.0;
            let mut idx = vec![0usize; dim];
            let mut j = vec![0usize; dim];
            'nodes: for flat in 0..grid.len() {
                grid.unravel(flat, &mut idx);
                for a in 0..dim {
                    if idx[a] < 3 || idx[a] + 3 >= grid.points()[a] {
                        continue 'nodes;
                    }
                }
                let mut acc = 0.0;
                for s in 0..7usize.pow(dim as u32) {
                    let mut w = 1.0;
                    let mut rem = s;
                    for a in (0..dim).rev() {
                        let o = rem % 7;
                        rem /= 7;
                        w *= weights[a][o];
                        j[a] = idx[a] + o - 3;
                    }
                    if w != 0.0 {
                        acc += w * values[grid.ravel(&j)];
                    }
                }
                best = best.max((acc * scale).abs());
            }
            (alpha, best)
        })
        .collect()
}

/// Outcome of a normalized-bump check of `f` at scale `k`.
#[derive(Clone, Debug, Serialize)]
pub struct BumpReport {
    pub ok: bool,
    /// Largest `‖∂^α [f(A^k ·)]‖_∞` over `|α| <= N`, and where it occurs.
    pub worst_derivative: f64,
    pub worst_index: Vec<usize>,
    /// Largest `|f(A^k y)|` at chart nodes with `y ∉ B_0`.
    pub support_violation: f64,
    /// Largest relative change of the derivative sups under 2× chart refinement.
    pub refinement_gap: f64,
}

/// Checks `supp f ⊂ B_k` and `‖∂^α [f(A^k ·)]‖_∞ <= 1` for `|α| <= derivs`.
pub fn is_normalized_bump(f: &dyn Field, d: &Dilation, derivs: usize, k: i32) -> BumpReport {
    bump_report(f, d, derivs, k, default_chart_points(d.dim()), 1.0)
}

fn bump_report(
    f: &dyn Field,
    d: &Dilation,
    derivs: usize,
    k: i32,
    points: usize,
    scale: f64,
) -> BumpReport {
    let coarse = chart_grid(d, points);
    let fine = chart_grid(d, 2 * points);
    let sample = |g: &Grid| g.sample(|y| scale * f.eval(&d.apply_power(k, y)));
    let vc = sample(&coarse);
    let vf = sample(&fine);
    let mut support_violation: f64 = 0.0;
    for (i, v) in vf.iter().enumerate() {
        if *v != 0.0 && !d.contains(&fine.node(i, Domain::Space), 0) {
            support_violation = support_violation.max(v.abs());
        }
    }
    let sc = derivative_sups(&coarse, &vc, derivs);
    let sf = derivative_sups(&fine, &vf, derivs);
    let mut worst = (0.0, vec![0; d.dim()]);
    let mut gap: f64 = 0.0;
    for ((alpha, a), (_, b)) in sf.iter().zip(&sc) {
        if *a > worst.0 {
            worst = (*a, alpha.clone());
        }
        let denom = a.abs().max(b.abs());
        if denom > 1e-300 {
            gap = gap.max((a - b).abs() / denom);
        }
    }
    BumpReport {
        ok: worst.0 <= 1.0 + 1e-9 && support_violation == 0.0,
        worst_derivative: worst.0,
        worst_index: worst.1,
        support_violation,
        refinement_gap: gap,
    }
}

/// Audit numbers of one term.
#[derive(Clone, Debug, Serialize)]
pub struct TermAudit {
    pub k: i32,
    pub d: f64,
    pub s: f64,
    /// Measured bump norm of `ψ^{(k)}` (max derivative sup over `|α| <= N`).
    pub norm: f64,
    /// `|∫ψ^{(k)}| / ‖ψ^{(k)}‖₁`.
    pub mean_residual: f64,
    pub l1: f64,
}

/// Bump decomposition of a source field.
pub struct BumpDecomposition<'a> {
    source: &'a dyn Field,
    dilation: Dilation,
    cutoff: Cutoff,
    cutoff_l1: f64,
    pub decay: f64,
    pub derivs: usize,
    pub k_max: i32,
    /// `c` such that every `c^{-1} ψ^{(k)}` is a normalized bump.
    pub c: f64,
    pub audit: Vec<TermAudit>,
    /// Chart samples `y ↦ ψ^{(k)}(A^k y)`.
    pub terms: Vec<GridFunction>,
}

/// Options for [`decompose_bump`].
#[derive(Clone, Debug)]
pub struct BumpOptions {
    pub chart_points: usize,
    /// Relative tolerance for `∫ψ = 0` and for the tail mass.
    pub tol: f64,
}

impl Default for BumpOptions {
    fn default() -> Self {
        BumpOptions {
            chart_points: 0,
            tol: 1e-10,
        }
    }
}

pub fn decompose_bump<'a>(
    psi: &'a dyn Field,
    d: &Dilation,
    decay: f64,
    derivs: usize,
    k_max: i32,
) -> Result<BumpDecomposition<'a>> {
    decompose_bump_with(psi, d, decay, derivs, k_max, &BumpOptions::default())
}

pub fn decompose_bump_with<'a>(
    psi: &'a dyn Field,
    d: &Dilation,
    decay: f64,
    derivs: usize,
    k_max: i32,
    opts: &BumpOptions,
) -> Result<BumpDecomposition<'a>> {
    if !(decay > 0.0) || k_max < 0 {
        return Err(Error::InvalidInput(
            "decay must be positive and k_max >= 0".into(),
        ));
    }
    if psi.dim() != d.dim() {
        return Err(Error::GridMismatch(
            "source and dilation dimensions differ".into(),
        ));
    }
    let points = if opts.chart_points > 0 {
        opts.chart_points
    } else {
        default_chart_points(d.dim())
    };
    let chart = chart_grid(d, points);
    let cell = chart.cell_volume();
    let b = d.det_abs();
    let cutoff = Cutoff::new(d);
    let cutoff_l1: f64 = chart.sample(|y| cutoff.eval(y)).iter().sum::<f64>() * cell;

    // D_k on charts: ψ(A^k y)[θ(y) - θ(A y)], with θ(A y) omitted at k = 0.
    let raw: Vec<Vec<f64>> = (0..=k_max)
        .into_par_iter()
        .map(|k| {
            chart.sample(|y| {
                let ay = d.apply_power(1, y);
                let outer = if k == 0 { 0.0 } else { cutoff.eval(&ay) };
                let band = cutoff.eval(y) - outer;
                if band == 0.0 {
                    0.0
                } else {
                    psi.eval(&d.apply_power(k, y)) * band
                }
            })
        })
        .collect();
    let dk: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(k, v)| b.powi(k as i32) * v.iter().sum::<f64>() * cell)
        .collect();
    let abs_mass: f64 = raw
        .iter()
        .enumerate()
        .map(|(k, v)| b.powi(k as i32) * v.iter().map(|x| x.abs()).sum::<f64>() * cell)
        .sum();

    // tail: mass of ψ outside B_{k_max - 1}, measured on the chart of scale k_max + 1
    let tail: f64 = chart
        .sample(|y| {
            let x = d.apply_power(k_max + 1, y);
            if d.contains(&x, k_max - 1) {
                0.0
            } else {
                psi.eval(&x).abs()
            }
        })
        .iter()
        .sum::<f64>()
        * cell
        * b.powi(k_max + 1);
    if tail > opts.tol * abs_mass.max(f64::MIN_POSITIVE) {
        return Err(Error::TailTooHeavy { mass: tail });
    }
    let total: f64 = dk.iter().sum();
    if total.abs() > opts.tol * abs_mass.max(f64::MIN_POSITIVE) {
        return Err(Error::NotMeanZero { integral: total });
    }

    // s_k = Σ_{j<k} d_j, evaluated as -Σ_{j>=k} d_j to avoid cancellation.
    let mut sk = vec![0.0; dk.len()];
    let mut acc = 0.0;
    for k in (1..dk.len()).rev() {
        acc += dk[k];
        sk[k] = -acc;
    }

    let mut dec = BumpDecomposition {
        source: psi,
        dilation: d.clone(),
        cutoff,
        cutoff_l1,
        decay,
        derivs,
        k_max,
        c: 0.0,
        audit: Vec::new(),
        terms: Vec::new(),
    };
    let d_ref = &dk;
    let s_ref = &sk;
    let measured: Vec<(GridFunction, TermAudit)> = (0..=k_max)
        .into_par_iter()
        .map(|k| {
            let term = |y: &[f64]| dec.chart_term(k, d_ref[k as usize], s_ref[k as usize], y);
            let vals = chart.sample(term);
            let integral: f64 = vals.iter().sum::<f64>() * cell;
            let l1: f64 = vals.iter().map(|v| v.abs()).sum::<f64>() * cell;
            let sups = derivative_sups(&chart, &vals, derivs);
            let norm = sups.iter().map(|s| s.1).fold(0.0, f64::max);
            let gf = GridFunction::real(chart.clone(), Domain::Space, vals).expect("sizes agree");
            // chart integrals are in y; ∫ψ^{(k)}dx = b^k ∫ψ^{(k)}(A^k y) dy
            let audit = TermAudit {
                k,
                d: d_ref[k as usize],
                s: s_ref[k as usize],
                norm,
                mean_residual: if l1 > 0.0 { integral.abs() / l1 } else { 0.0 },
                l1: l1 * b.powi(k),
            };
            (gf, audit)
        })
        .collect();
    for (gf, audit) in measured {
        dec.c = dec.c.max(audit.norm);
        dec.terms.push(gf);
        dec.audit.push(audit);
    }
    Ok(dec)
}

impl<'a> BumpDecomposition<'a> {
    pub fn dilation(&self) -> &Dilation {
        &self.dilation
    }

    pub fn cutoff(&self) -> &Cutoff {
        &self.cutoff
    }

    fn theta_tilde(&self, y: &[f64]) -> f64 {
        self.cutoff.eval(y) / self.cutoff_l1
    }

    /// `ψ^{(k)}(A^k y)` given `d_k` and `s_k`.
    fn chart_term(&self, k: i32, dk: f64, sk: f64, y: &[f64]) -> f64 {
        let d = &self.dilation;
        let b = d.det_abs();
        let ay = d.apply_power(1, y);
        let theta_y = self.cutoff.eval(y);
        let band = if k == 0 {
            theta_y
        } else {
            theta_y - self.cutoff.eval(&ay)
        };
        let main = if band == 0.0 {
            0.0
        } else {
            self.source.eval(&d.apply_power(k, y)) * band
        };
        let tt_y = self.theta_tilde(y);
        let mut corr = -dk * b.powi(-k) * tt_y;
        if k > 0 {
            corr += sk * (b.powi(-(k - 1)) * self.theta_tilde(&ay) - b.powi(-k) * tt_y);
        }
        b.powf(self.decay * k as f64) * (main + corr)
    }

    /// `D_k(x)` before the mean correction.
    pub fn raw_piece(&self, k: i32, x: &[f64]) -> f64 {
        let d = &self.dilation;
        let inner = self.cutoff.eval(&d.apply_inv_power(k, x));
        let outer = if k == 0 {
            0.0
        } else {
            self.cutoff.eval(&d.apply_inv_power(k - 1, x))
        };
        self.source.eval(x) * (inner - outer)
    }

    /// `ψ^{(k)}(x)`.
    pub fn term(&self, k: i32, x: &[f64]) -> f64 {
        let a = &self.audit[k as usize];
        let y = self.dilation.apply_inv_power(k, x);
        self.chart_term(k, a.d, a.s, &y)
    }

    /// `Σ_{k <= k_max} b^{-kM} ψ^{(k)}(x)`.
    pub fn reconstruct(&self, x: &[f64]) -> f64 {
        let b = self.dilation.det_abs();
        (0..=self.k_max)
            .map(|k| b.powf(-self.decay * k as f64) * self.term(k, x))
            .sum()
    }

    /// Left minus right side of the finite Abel summation identity at `x`:
    /// `Σ_{k=1}^{K} s_k[θ̃_{k-1} - θ̃_k] - (Σ_{k=0}^{K} d_k θ̃_k - T θ̃_0)`,
    /// with `θ̃_k(x) = b^{-k}θ̃(A^{-k}x)` and `T = Σ d_k`.
    pub fn abel_defect(&self, x: &[f64]) -> f64 {
        let d = &self.dilation;
        let b = d.det_abs();
        let tt = |k: i32| b.powi(-k) * self.theta_tilde(&d.apply_inv_power(k, x));
        let total: f64 = self.audit.iter().map(|a| a.d).sum();
        let lhs: f64 = (1..=self.k_max)
            .map(|k| self.audit[k as usize].s * (tt(k - 1) - tt(k)))
            .sum();
        let rhs: f64 = (0..=self.k_max)
            .map(|k| self.audit[k as usize].d * tt(k))
            .sum::<f64>()
            - total * tt(0);
        lhs - rhs
    }

    /// Bump check of `c^{-1} ψ^{(k)}` at scale `k`.
    pub fn check_term(&self, k: i32) -> BumpReport {
        let field = crate::grid::FnField::new(self.dilation.dim(), |x: &[f64]| self.term(k, x));
        bump_report(
            &field,
            &self.dilation,
            self.derivs,
            k,
            self.terms[0].grid.points()[0] / 2,
            1.0 / self.c,
        )
    }

    /// Least-squares slope of `ln |d_k|` against `k` over nonzero `d_k`.
    pub fn decay_slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .audit
            .iter()
            .filter(|a| a.d != 0.0)
            .map(|a| (a.k as f64, a.d.abs().ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    }

    /// Certified bound on the omitted terms `k > k_max`.
    pub fn tail_bound(&self) -> f64 {
        let q = self.dilation.det_abs().powf(-self.decay);
        self.c * q.powi(self.k_max + 1) / (1.0 - q)
    }

    /// Writes each chart term as AGF1 plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (a, gf) in self.audit.iter().zip(&self.terms) {
            let name = format!("term_{:03}.agf", a.k);
            gf.save(&dir.join(&name))?;
            files.push(name);
        }
        let manifest = serde_json::json!({
            "M": self.decay,
            "N": self.derivs,
            "c": self.c,
            "k_max": self.k_max,
            "dilation": serde_json::from_str::<serde_json::Value>(&self.dilation.to_json())?,
            "terms": self.audit,
            "files": files,
        });
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }
}
