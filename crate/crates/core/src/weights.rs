//! Weight fields on grids and sampled Muckenhoupt constants.
//!
//! Averages over `x + B_k` are Riemann sums over the rasterized ball, divided
//! by the rasterized node count, so constant weights give exactly 1. Centers
//! are taken at fixed relative positions inside `B_k` (`x = A^k t_j`), which
//! keeps the sample family self-similar across scales.

use rayon::prelude::*;
use serde::Serialize;

use crate::dilation::Dilation;
use crate::error::{Error, Result};
use crate::grid::{Domain, Grid, GridFunction};

/// Closed form attached to a weight, when known.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum WeightForm {
    Unit,
    /// `ρ(x)^alpha`.
    Power {
        alpha: f64,
    },
    /// `ρ1(x1)^alpha1 ρ2(x2)^alpha2`.
    ProductPower {
        alpha1: f64,
        alpha2: f64,
    },
    /// `ρ1(x1)^alpha1 + ρ2(x2)^alpha2`.
    ProductSum {
        alpha1: f64,
        alpha2: f64,
    },
    Sampled,
}

#[derive(Clone, Debug)]
pub enum WeightDilations {
    One(Dilation),
    /// Product space: the first `d1.dim()` grid axes belong to `d1`.
    Pair(Dilation, Dilation),
}

#[derive(Clone, Debug)]
pub struct WeightField {
    pub samples: GridFunction,
    pub dilations: WeightDilations,
    pub form: WeightForm,
}

/// Quasi-norm on grid nodes with the origin replaced by the smallest nonzero
/// value divided by `b`, so negative and positive powers stay finite.
fn regularized_quasi_norm(grid: &Grid, d: &Dilation) -> Vec<f64> {
    let mut rho = grid.sample(|x| d.quasi_norm(x));
    let floor = rho
        .iter()
        .cloned()
        .filter(|v| *v > 0.0)
        .fold(f64::INFINITY, f64::min);
    for r in rho.iter_mut() {
        if *r == 0.0 {
            *r = floor / d.det_abs();
        }
    }
    rho
}

impl WeightField {
    pub fn unit(grid: Grid, d: Dilation) -> Self {
        let n = grid.len();
        WeightField {
            samples: GridFunction::real(grid, Domain::Space, vec![1.0; n]).expect("sizes agree"),
            dilations: WeightDilations::One(d),
            form: WeightForm::Unit,
        }
    }

    /// `ρ(x)^alpha` on a one-parameter grid.
    pub fn power(grid: Grid, d: Dilation, alpha: f64) -> Result<Self> {
        if grid.dim() != d.dim() {
            return Err(Error::GridMismatch(
                "grid and dilation dimensions differ".into(),
            ));
        }
        let v = regularized_quasi_norm(&grid, &d)
            .into_iter()
            .map(|r| r.powf(alpha))
            .collect();
        Ok(WeightField {
            samples: GridFunction::real(grid, Domain::Space, v)?,
            dilations: WeightDilations::One(d),
            form: WeightForm::Power { alpha },
        })
    }

    pub fn product_unit(g1: &Grid, g2: &Grid, d1: Dilation, d2: Dilation) -> Self {
        let grid = g1.product(g2);
        let n = grid.len();
        WeightField {
            samples: GridFunction::real(grid, Domain::Space, vec![1.0; n]).expect("sizes agree"),
            dilations: WeightDilations::Pair(d1, d2),
            form: WeightForm::Unit,
        }
    }

    /// Tensor power weight `ρ1^alpha1 ⊗ ρ2^alpha2` on the product of two grids.
    pub fn product_power(
        g1: &Grid,
        g2: &Grid,
        d1: Dilation,
        d2: Dilation,
        alpha1: f64,
        alpha2: f64,
    ) -> Result<Self> {
        let r1 = regularized_quasi_norm(g1, &d1);
        let r2 = regularized_quasi_norm(g2, &d2);
        let mut v = Vec::with_capacity(r1.len() * r2.len());
        for a in &r1 {
            for b in &r2 {
                v.push(a.powf(alpha1) * b.powf(alpha2));
            }
        }
        Ok(WeightField {
            samples: GridFunction::real(g1.product(g2), Domain::Space, v)?,
            dilations: WeightDilations::Pair(d1, d2),
            form: WeightForm::ProductPower { alpha1, alpha2 },
        })
    }

    /// `ρ1^alpha1 + ρ2^alpha2`, a non-separable product weight.
    pub fn product_sum(
        g1: &Grid,
        g2: &Grid,
        d1: Dilation,
        d2: Dilation,
        alpha1: f64,
        alpha2: f64,
    ) -> Result<Self> {
        let r1 = regularized_quasi_norm(g1, &d1);
        let r2 = regularized_quasi_norm(g2, &d2);
        let mut v = Vec::with_capacity(r1.len() * r2.len());
        for a in &r1 {
            for b in &r2 {
                v.push(a.powf(alpha1) + b.powf(alpha2));
            }
        }
        Ok(WeightField {
            samples: GridFunction::real(g1.product(g2), Domain::Space, v)?,
            dilations: WeightDilations::Pair(d1, d2),
            form: WeightForm::ProductSum { alpha1, alpha2 },
        })
    }

    /// Wraps sampled values after checking positivity.
    pub fn sampled(samples: GridFunction, dilations: WeightDilations) -> Result<Self> {
        let w = WeightField {
            samples,
            dilations,
            form: WeightForm::Sampled,
        };
        w.check_positive()?;
        Ok(w)
    }

    pub fn check_positive(&self) -> Result<()> {
        let v = self.samples.values()?;
        if let Some((index, &value)) = v
            .iter()
            .enumerate()
            .find(|(_, x)| !(**x > 0.0 && x.is_finite()))
        {
            return Err(Error::NonPositive { index, value });
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        self.samples.values().expect("weights are real")
    }

    pub fn grid(&self) -> &Grid {
        &self.samples.grid
    }

    /// Multiplies every sample by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for v in out.samples.values_mut().expect("weights are real") {
            *v *= c;
        }
        out.form = WeightForm::Sampled;
        out
    }
}

/// Parsed weight description, e.g. `unit`, `power:alpha=0.5`,
/// `productpower:alpha1=0.3,alpha2=0.3`.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightSpec {
    Unit,
    Power(f64),
    ProductPower(f64, f64),
    ProductSum(f64, f64),
}

impl WeightSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let (name, args) = text.split_once(':').unwrap_or((text, ""));
        let mut kv = std::collections::HashMap::new();
        for part in args.split(',').filter(|s| !s.trim().is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                Error::Config(format!("weight argument '{part}' is not key=value"))
            })?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad number in '{part}'")))?;
            kv.insert(k.trim().to_string(), v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("weight spec '{text}' needs {k}")))
        };
        match name.trim() {
            "unit" | "one" | "1" => Ok(WeightSpec::Unit),
            "power" => Ok(WeightSpec::Power(get("alpha")?)),
            "productpower" => Ok(WeightSpec::ProductPower(get("alpha1")?, get("alpha2")?)),
            "productsum" => Ok(WeightSpec::ProductSum(get("alpha1")?, get("alpha2")?)),
            other => Err(Error::Config(format!("unknown weight family '{other}'"))),
        }
    }

    /// Builds the weight on a product grid.
    pub fn build_product(
        &self,
        g1: &Grid,
        g2: &Grid,
        d1: &Dilation,
        d2: &Dilation,
    ) -> Result<WeightField> {
        match *self {
            WeightSpec::Unit => Ok(WeightField::product_unit(g1, g2, d1.clone(), d2.clone())),
            WeightSpec::Power(a) => {
                WeightField::product_power(g1, g2, d1.clone(), d2.clone(), a, 0.0)
            }
            WeightSpec::ProductPower(a, b) => {
                WeightField::product_power(g1, g2, d1.clone(), d2.clone(), a, b)
            }
            WeightSpec::ProductSum(a, b) => {
                WeightField::product_sum(g1, g2, d1.clone(), d2.clone(), a, b)
            }
        }
    }

    /// Builds the weight on a one-parameter grid.
    pub fn build(&self, grid: &Grid, d: &Dilation) -> Result<WeightField> {
        match *self {
            WeightSpec::Unit => Ok(WeightField::unit(grid.clone(), d.clone())),
            WeightSpec::Power(a) => WeightField::power(grid.clone(), d.clone(), a),
            _ => Err(Error::Config(
                "product weight requested on a one-parameter grid".into(),
            )),
        }
    }

    /// Known critical index, when the family has one in closed form.
    pub fn critical_index(&self) -> Option<f64> {
        let one = |a: f64| {
            if a >= 0.0 {
                Some(1.0 + a)
            } else if a > -1.0 {
                Some(1.0)
            } else {
                None
            }
        };
        match *self {
            WeightSpec::Unit => Some(1.0),
            WeightSpec::Power(a) => one(a),
            WeightSpec::ProductPower(a, b) => Some(one(a)?.max(one(b)?)),
            WeightSpec::ProductSum(..) => None,
        }
    }
}

/// Result of a sampled A_p estimate.
#[derive(Clone, Debug, Serialize)]
pub struct ApEstimate {
    pub p: f64,
    /// Max over all sampled (center, scale) pairs.
    pub value: f64,
    pub window: (i32, i32),
    pub translates: usize,
    /// Pairs skipped because the ball left the grid.
    pub skipped: usize,
    /// Per-scale maxima `(k, c_k)`.
    pub per_level: Vec<(i32, f64)>,
    /// Running maximum as the window grows one scale at a time.
    pub trend: Vec<f64>,
    /// Asymptotic ratio of successive increments of `c_k^{1/(p-1)}` (of `c_k`
    /// when `p = 1`). Below 1 the estimates converge as the window grows.
    pub increment_ratio: f64,
    /// Per-scale growth of `ln c_k` implied by `increment_ratio`; zero when convergent.
    pub growth_rate: f64,
    /// Projected relative change of the estimate if the scale window doubled.
    /// Infinite when the estimates diverge.
    pub doubling_change: f64,
    /// The estimates converge: `increment_ratio < 1`.
    pub stable: bool,
}

/// Geometric mean of the last three ratios `|d_{k+1} / d_k|` of successive
/// increments of `levels`. Zero when the sequence has stopped moving.
pub fn increment_ratio(levels: &[f64]) -> f64 {
    let scale = levels.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tiny = 1e-12 * scale;
    let tail: Vec<f64> = levels
        .windows(2)
        .map(|w| w[1] - w[0])
        .rev()
        .take(4)
        .collect();
    if tail.first().is_none_or(|d| d.abs() <= tiny) {
        return 0.0;
    }
    let logs: Vec<f64> = tail
        .windows(2)
        .filter(|w| w[1].abs() > tiny)
        .map(|w| (w[0] / w[1]).abs().ln())
        .collect();
    if logs.is_empty() {
        return 1.0;
    }
    (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

/// Relative change over a window doubling regarded as negligible.
pub const STABLE_DOUBLING_CHANGE: f64 = 0.1;

fn relative_centers(dim: usize, translates: usize) -> Vec<Vec<f64>> {
    let per_axis = ((translates.max(1) as f64).powf(1.0 / dim as f64).round() as usize).max(1);
    let ts: Vec<f64> = if per_axis == 1 {
        vec![0.0]
    } else {
        (0..per_axis)
            .map(|i| -1.0 + 2.0 * i as f64 / (per_axis - 1) as f64)
            .collect()
    };
    let mut out = vec![vec![]];
    for _ in 0..dim {
        let mut next = Vec::new();
        for prefix in &out {
            for &t in &ts {
                let mut v = prefix.clone();
                v.push(t);
                next.push(v);
            }
        }
        out = next;
    }
    out
}

/// Per-scale maxima of the A_p functional for a one-parameter weight array.
fn level_maxima(
    values: &[f64],
    grid: &Grid,
    d: &Dilation,
    p: f64,
    k_range: (i32, i32),
    translates: usize,
) -> (Vec<(i32, f64)>, usize) {
    let dim = grid.dim();
    let centers_rel = relative_centers(dim, translates);
    let beta = if p > 1.0 { 1.0 / (p - 1.0) } else { 0.0 };
    let dual: Vec<f64> = if p > 1.0 {
        values.iter().map(|w| w.powf(-beta)).collect()
    } else {
        values.iter().map(|w| 1.0 / w).collect()
    };

    // 1-D fast path: compensated prefix sums, so interval sums keep full
    // relative precision even when the running total is much larger.
    let prefix = |v: &[f64]| {
        let mut c = Vec::with_capacity(v.len() + 1);
        c.push((0.0, 0.0));
        let (mut hi, mut lo) = (0.0f64, 0.0f64);
        for &x in v {
            let s = hi + x;
            let bb = s - hi;
            lo += (hi - (s - bb)) + (x - bb);
            hi = s;
            c.push((hi, lo));
        }
        c
    };
    let span =
        |c: &[(f64, f64)], i0: usize, i1: usize| (c[i1 + 1].0 - c[i0].0) + (c[i1 + 1].1 - c[i0].1);
    let (cw, cd) = if dim == 1 {
        (prefix(values), prefix(&dual))
    } else {
        (vec![], vec![])
    };

    let mut skipped = 0;
    let mut out = Vec::new();
    for k in k_range.0..=k_range.1 {
        // rasterized offsets of B_k
        let hw = d.bounding_half_widths(k);
        let ext: Vec<i64> = (0..dim)
            .map(|a| (hw[a] / grid.spacing(a)).ceil() as i64 + 1)
            .collect();
        let offsets: Vec<Vec<i64>> = if dim == 1 {
            let mut m = 0;
            while m < ext[0] && d.contains(&[(m + 1) as f64 * grid.spacing(0)], k) {
                m += 1;
            }
            vec![vec![-m], vec![m]]
        } else {
            let mut offs = Vec::new();
            let mut idx = vec![0i64; dim];
            let total: i64 = ext.iter().map(|e| 2 * e + 1).product();
            for flat in 0..total {
                let mut f = flat;
                for a in (0..dim).rev() {
                    let w = 2 * ext[a] + 1;
                    idx[a] = f % w - ext[a];
                    f /= w;
                }
                let y: Vec<f64> = (0..dim).map(|a| idx[a] as f64 * grid.spacing(a)).collect();
                if d.contains(&y, k) {
                    offs.push(idx.clone());
                }
            }
            offs
        };
        let lo: Vec<i64> = (0..dim)
            .map(|a| offsets.iter().map(|o| o[a]).min().unwrap_or(0))
            .collect();
        let hi: Vec<i64> = (0..dim)
            .map(|a| offsets.iter().map(|o| o[a]).max().unwrap_or(0))
            .collect();
        let map = d.ball_map(k);
        let evals: Vec<Option<f64>> = centers_rel
            .par_iter()
            .map(|t| {
                let mut c = vec![0i64; dim];
                for a in 0..dim {
                    let x: f64 = (0..dim).map(|b| map[(a, b)] * t[b]).sum();
                    let i = ((x + grid.half_widths()[a]) / grid.spacing(a)).round() as i64;
                    c[a] = i;
                    if i + lo[a] < 0 || i + hi[a] >= grid.points()[a] as i64 {
                        return None;
                    }
                }
                if dim == 1 {
                    let i0 = (c[0] + lo[0]) as usize;
                    let i1 = (c[0] + hi[0]) as usize;
                    let cnt = (i1 - i0 + 1) as f64;
                    let aw = span(&cw, i0, i1) / cnt;
                    let other = if p > 1.0 {
                        (span(&cd, i0, i1) / cnt).powf(p - 1.0)
                    } else {
                        dual[i0..=i1].iter().cloned().fold(0.0, f64::max)
                    };
                    return Some(aw * other);
                }
                let mut sw = 0.0;
                let mut sd = 0.0;
                let mut md: f64 = 0.0;
                let mut idx = vec![0usize; dim];
                for o in &offsets {
                    for a in 0..dim {
                        idx[a] = (c[a] + o[a]) as usize;
                    }
                    let f = grid.ravel(&idx);
                    sw += values[f];
                    sd += dual[f];
                    md = md.max(dual[f]);
                }
                let cnt = offsets.len() as f64;
                let other = if p > 1.0 {
                    (sd / cnt).powf(p - 1.0)
                } else {
                    md
                };
                Some(sw / cnt * other)
            })
            .collect();
        let mut best: Option<f64> = None;
        for e in evals {
            match e {
                Some(v) => best = Some(best.map_or(v, |b: f64| b.max(v))),
                None => skipped += 1,
            }
        }
        if let Some(b) = best {
            out.push((k, b));
        }
    }
    (out, skipped)
}

fn summarize(
    p: f64,
    k_range: (i32, i32),
    translates: usize,
    per_level: Vec<(i32, f64)>,
    skipped: usize,
) -> Result<ApEstimate> {
    if per_level.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let mut trend = Vec::with_capacity(per_level.len());
    let mut run: f64 = 0.0;
    for (_, v) in &per_level {
        run = run.max(*v);
        trend.push(run);
    }
    // c^{1/(p-1)} is the averaged dual weight; its increments settle into the
    // geometric regime far sooner than those of c itself.
    let power = if p > 1.0 { 1.0 / (p - 1.0) } else { 1.0 };
    let roots: Vec<f64> = per_level.iter().map(|(_, v)| v.powf(power)).collect();
    let ratio = increment_ratio(&roots);
    let growth_rate = ratio.max(1.0).ln() / power;
    let span = (per_level.last().unwrap().0 - per_level[0].0).max(1);
    let doubling_change = if ratio >= 1.0 {
        f64::INFINITY
    } else {
        let n = roots.len();
        let last = if n > 1 {
            roots[n - 1] - roots[n - 2]
        } else {
            0.0
        };
        let tail = last.abs() * ratio * (1.0 - ratio.powi(span)) / (1.0 - ratio);
        ((roots[n - 1] + tail) / roots[n - 1]).powf(1.0 / power) - 1.0
    };
    let stable = ratio < 1.0;
    Ok(ApEstimate {
        p,
        value: run,
        window: k_range,
        translates,
        skipped,
        per_level,
        trend,
        increment_ratio: ratio,
        growth_rate,
        doubling_change,
        stable,
    })
}

/// Sampled one-parameter A_p constant of `w` over scales `k_range` with
/// `translates` relative centers per scale. A lower bound for the true constant.
pub fn ap_constant_estimate(
    w: &WeightField,
    p: f64,
    k_range: (i32, i32),
    translates: usize,
) -> Result<ApEstimate> {
    if !(p >= 1.0) {
        return Err(Error::InvalidInput(format!("p must be >= 1, got {p}")));
    }
    let d = match &w.dilations {
        WeightDilations::One(d) => d,
        WeightDilations::Pair(..) => {
            return Err(Error::InvalidInput(
                "use product_ap_estimate for product weights".into(),
            ))
        }
    };
    w.check_positive()?;
    let (per_level, skipped) = level_maxima(w.values(), w.grid(), d, p, k_range, translates);
    summarize(p, k_range, translates, per_level, skipped)
}

/// Sampled product A_p constant: the larger of the slice-wise one-parameter
/// estimates in each factor.
#[derive(Clone, Debug, Serialize)]
pub struct ProductApEstimate {
    pub p: f64,
    pub value: f64,
    /// Estimates on slices `w(x1, ·)` for sampled `x1`.
    pub first_factor_slices: Vec<(Vec<f64>, f64)>,
    /// Estimates on slices `w(·, x2)` for sampled `x2`.
    pub second_factor_slices: Vec<(Vec<f64>, f64)>,
    pub stable: bool,
}

pub fn product_ap_estimate(
    w: &WeightField,
    p: f64,
    k_ranges: ((i32, i32), (i32, i32)),
    translates: usize,
    max_slices: usize,
) -> Result<ProductApEstimate> {
    let (d1, d2) = match &w.dilations {
        WeightDilations::Pair(a, b) => (a, b),
        WeightDilations::One(_) => {
            return Err(Error::InvalidInput(
                "product estimate needs a product weight".into(),
            ))
        }
    };
    w.check_positive()?;
    let grid = w.grid();
    let n1 = d1.dim();
    let g1 = grid.axes(0..n1);
    let g2 = grid.axes(n1..grid.dim());
    let values = w.values();
    let len2 = g2.len();
    let pick = |len: usize| -> Vec<usize> {
        let m = max_slices.max(1).min(len);
        (0..m).map(|i| i * len / m + len / (2 * m)).collect()
    };

    // slices with x1 fixed: functions on g2, estimated with d2
    let s1: Vec<Result<(Vec<f64>, ApEstimate)>> = pick(g1.len())
        .into_par_iter()
        .map(|i1| {
            let slice = &values[i1 * len2..(i1 + 1) * len2];
            let (lv, sk) = level_maxima(slice, &g2, d2, p, k_ranges.1, translates);
            Ok((
                g1.node(i1, Domain::Space),
                summarize(p, k_ranges.1, translates, lv, sk)?,
            ))
        })
        .collect();
    let s2: Vec<Result<(Vec<f64>, ApEstimate)>> = pick(len2)
        .into_par_iter()
        .map(|i2| {
            let slice: Vec<f64> = (0..g1.len()).map(|i1| values[i1 * len2 + i2]).collect();
            let (lv, sk) = level_maxima(&slice, &g1, d1, p, k_ranges.0, translates);
            Ok((
                g2.node(i2, Domain::Space),
                summarize(p, k_ranges.0, translates, lv, sk)?,
            ))
        })
        .collect();
    let mut value: f64 = 0.0;
    let mut stable = true;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for r in s1 {
        let (x, e) = r?;
        value = value.max(e.value);
        stable &= e.stable;
        first.push((x, e.value));
    }
    for r in s2 {
        let (x, e) = r?;
        value = value.max(e.value);
        stable &= e.stable;
        second.push((x, e.value));
    }
    Ok(ProductApEstimate {
        p,
        value,
        first_factor_slices: first,
        second_factor_slices: second,
        stable,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalIndex {
    /// Smallest tested exponent whose estimate changes by less than 10% over a
    /// window doubling; an upper bracket for `q_w`.
    pub p: f64,
    pub flag: &'static str,
    pub all_stable: bool,
    /// `(p, projected doubling change, settled)` for every tested exponent.
    pub scan: Vec<(f64, f64, bool)>,
}

/// Brackets the critical index from above by scanning `p_grid`.
pub fn critical_index_estimate(
    w: &WeightField,
    p_grid: &[f64],
    k_range: (i32, i32),
    translates: usize,
) -> Result<CriticalIndex> {
    if p_grid.windows(2).any(|w| w[1] < w[0]) || p_grid.iter().any(|p| *p <= 1.0) {
        return Err(Error::InvalidInput(
            "exponent grid must be sorted and > 1".into(),
        ));
    }
    let mut scan = Vec::new();
    for &p in p_grid {
        let e = ap_constant_estimate(w, p, k_range, translates)?;
        scan.push((
            p,
            e.doubling_change,
            e.stable && e.doubling_change < STABLE_DOUBLING_CHANGE,
        ));
    }
    let all_stable = scan.iter().all(|s| s.2);
    let first = scan.iter().find(|s| s.2).ok_or(Error::Unstable)?;
    Ok(CriticalIndex {
        p: first.0,
        flag: "upper-bracket",
        all_stable,
        scan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dyadic_grid() -> (Grid, Dilation) {
        (
            Grid::cube(1, 1 << 16, 1024.0).unwrap(),
            Dilation::scalar(2.0).unwrap(),
        )
    }

    #[test]
    fn unit_weight_is_exactly_one() {
        let (g, d) = dyadic_grid();
        let w = WeightField::unit(g, d);
        for p in [1.0, 2.0, 4.0] {
            let e = ap_constant_estimate(&w, p, (-4, 6), 9).unwrap();
            assert_eq!(e.value, 1.0);
            assert!(e.stable);
        }
    }

    #[test]
    fn power_weight_samples_match_closed_form() {
        let (g, d) = dyadic_grid();
        let w = WeightField::power(g.clone(), d.clone(), 0.5).unwrap();
        for (i, v) in w.values().iter().enumerate().step_by(97) {
            let x = g.node(i, Domain::Space);
            if x[0] != 0.0 {
                assert!((v / d.quasi_norm(&x).powf(0.5) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaling_and_monotonicity() {
        let (g, d) = dyadic_grid();
        let w = WeightField::power(g, d, 0.5).unwrap();
        let a = ap_constant_estimate(&w, 2.0, (-4, 4), 9).unwrap();
        let b = ap_constant_estimate(&w.scaled(3.7), 2.0, (-4, 4), 9).unwrap();
        assert!((a.value - b.value).abs() <= 1e-12 * a.value);
        let c = ap_constant_estimate(&w, 3.0, (-4, 4), 9).unwrap();
        let one = ap_constant_estimate(&w, 1.0, (-4, 4), 9).unwrap();
        assert!(c.value <= a.value * (1.0 + 1e-12));
        assert!(a.value <= one.value * (1.0 + 1e-12));
        assert!(a.value >= 1.0);
    }

    #[test]
    fn window_widening_is_stable_inside_the_range() {
        let (g, d) = dyadic_grid();
        let w = WeightField::power(g, d, 0.5).unwrap();
        let a = ap_constant_estimate(&w, 2.0, (-4, 4), 64).unwrap();
        let b = ap_constant_estimate(&w, 2.0, (-6, 6), 64).unwrap();
        assert!(a.value >= 1.0 && a.value.is_finite());
        assert!(
            (b.value / a.value - 1.0).abs() < 0.05,
            "{} {}",
            a.value,
            b.value
        );
        assert!(b.stable);
    }

    #[test]
    fn out_of_range_power_diverges() {
        let (g, d) = dyadic_grid();
        let w = WeightField::power(g, d, 2.5).unwrap();
        let e = ap_constant_estimate(&w, 2.0, (-4, 8), 9).unwrap();
        assert!(!e.stable);
        let v: Vec<f64> = e.per_level.iter().map(|x| x.1).collect();
        assert!(v.windows(2).skip(4).all(|w| w[1] > 1.5 * w[0]));
    }

    #[test]
    fn empty_window_and_nonpositive() {
        let g = Grid::cube(1, 64, 1.0).unwrap();
        let d = Dilation::scalar(2.0).unwrap();
        let w = WeightField::unit(g.clone(), d.clone());
        assert_eq!(
            ap_constant_estimate(&w, 2.0, (8, 10), 9)
                .unwrap_err()
                .name(),
            "EmptyWindow"
        );
        let mut v = vec![1.0; 64];
        v[3] = 0.0;
        let gf = GridFunction::real(g, Domain::Space, v).unwrap();
        assert_eq!(
            WeightField::sampled(gf, WeightDilations::One(d))
                .unwrap_err()
                .name(),
            "NonPositive"
        );
    }

    #[test]
    fn product_tensor_weight_reduces_to_factors() {
        let g = Grid::cube(1, 1 << 12, 64.0).unwrap();
        let d = Dilation::scalar(2.0).unwrap();
        let w = WeightField::product_power(&g, &g, d.clone(), d.clone(), 0.3, 0.3).unwrap();
        let e = product_ap_estimate(&w, 2.0, ((-3, 3), (-3, 3)), 9, 6).unwrap();
        let f =
            ap_constant_estimate(&WeightField::power(g, d, 0.3).unwrap(), 2.0, (-3, 3), 9).unwrap();
        assert!((e.value - f.value).abs() <= 1e-12 * f.value);
        for (_, v) in e.first_factor_slices.iter().chain(&e.second_factor_slices) {
            assert!((v - f.value).abs() <= 1e-12 * f.value);
        }
    }

    #[test]
    fn critical_index_of_unit_weight() {
        let g = Grid::cube(1, 1 << 12, 64.0).unwrap();
        let w = WeightField::unit(g, Dilation::scalar(2.0).unwrap());
        let c = critical_index_estimate(&w, &[1.25, 1.5, 2.0], (-3, 4), 9).unwrap();
        assert_eq!(c.p, 1.25);
        assert!(c.all_stable);
        assert_eq!(c.flag, "upper-bracket");
    }

    #[test]
    fn weight_spec_parsing() {
        assert_eq!(
            WeightSpec::parse("power:alpha=0.5").unwrap(),
            WeightSpec::Power(0.5)
        );
        assert_eq!(
            WeightSpec::parse("productpower:alpha1=0.3,alpha2=0").unwrap(),
            WeightSpec::ProductPower(0.3, 0.0)
        );
        assert!(WeightSpec::parse("power").is_err());
        assert_eq!(WeightSpec::Power(0.5).critical_index(), Some(1.5));
    }
}
