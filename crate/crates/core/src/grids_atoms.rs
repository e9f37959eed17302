//! Dyadic cubes for dilations conjugate to integer diagonal matrices,
//! dyadic rectangles, and rectangular atoms with vanishing slice moments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dilation::Dilation;
use crate::error::{Error, Result};
use crate::grid::{Domain, Grid, GridFunction};
use crate::weights::WeightField;

const CONJ_TOL: f64 = 1e-9;

/// Cube `S·Π_i [α_i m_i^{-k}, (α_i+1) m_i^{-k})` at level `k`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Cube {
    pub level: i32,
    pub index: Vec<i64>,
}

/// Nested cube families for `A = S·diag(m)·S^{-1}` with integers `m_i ≥ 2`,
/// with sandwich constants `(v, u)`.
#[derive(Clone, Debug)]
pub struct DyadicGrid {
    dilation: Dilation,
    conj: DMatrix<f64>,
    conj_inv: DMatrix<f64>,
    factors: Vec<u32>,
    pub v: i32,
    pub u: i32,
    pub levels: (i32, i32),
}

/// Outcome of a sampled sandwich check.
#[derive(Clone, Debug, Serialize)]
pub struct SandwichCertificate {
    pub cubes: usize,
    pub points: usize,
    pub violations: usize,
}

fn integer_diagonal(m: &DMatrix<f64>) -> Option<Vec<u32>> {
    let n = m.nrows();
    let scale = m.amax().max(1.0);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..n {
            if i != j && m[(i, j)].abs() > CONJ_TOL * scale {
                return None;
            }
        }
        let d = m[(i, i)];
        let r = d.round();
        if (d - r).abs() > CONJ_TOL * scale || r < 2.0 {
            return None;
        }
        out.push(r as u32);
    }
    Some(out)
}

/// Nested cubes for a diagonal dilation with integer entries `≥ 2`.
pub fn christ_cubes(d: &Dilation, levels: (i32, i32)) -> Result<DyadicGrid> {
    christ_cubes_with(d, levels, None)
}

/// As [`christ_cubes`], with a conjugating matrix `S` such that `S^{-1}AS`
/// is integer diagonal.
pub fn christ_cubes_with(
    d: &Dilation,
    levels: (i32, i32),
    conj: Option<DMatrix<f64>>,
) -> Result<DyadicGrid> {
    let n = d.dim();
    let conj = conj.unwrap_or_else(|| DMatrix::identity(n, n));
    if conj.nrows() != n || conj.ncols() != n {
        return Err(Error::InvalidInput(
            "conjugating matrix has the wrong shape".into(),
        ));
    }
    let conj_inv = conj
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotAdmissible("conjugating matrix is singular".into()))?;
    let diag = &conj_inv * d.matrix() * &conj;
    let factors = integer_diagonal(&diag).ok_or_else(|| {
        Error::NotAdmissible(format!(
            "S^-1 A S = {:?} is not an integer diagonal matrix",
            diag.as_slice()
        ))
    })?;
    let mut grid = DyadicGrid {
        dilation: d.clone(),
        conj,
        conj_inv,
        factors,
        v: -1,
        u: 0,
        levels,
    };
    let (v, u) = grid
        .search_constants()
        .ok_or_else(|| Error::NotAdmissible("no sandwich constants with |v|, u <= 32".into()))?;
    grid.v = v;
    grid.u = u;
    Ok(grid)
}

impl DyadicGrid {
    pub fn dilation(&self) -> &Dilation {
        &self.dilation
    }

    pub fn factors(&self) -> &[u32] {
        &self.factors
    }

    pub fn dim(&self) -> usize {
        self.factors.len()
    }

    /// Side lengths of level-`k` cubes in the `S`-coordinates.
    fn sides(&self, k: i32) -> Vec<f64> {
        self.factors.iter().map(|&m| (m as f64).powi(-k)).collect()
    }

    /// The level-`k` cube containing `x`.
    pub fn cube_containing(&self, x: &[f64], k: i32) -> Cube {
        let y = &self.conj_inv * DVector::from_column_slice(x);
        let index = y
            .iter()
            .zip(self.sides(k))
            .map(|(c, s)| (c / s).floor() as i64)
            .collect();
        Cube { level: k, index }
    }

    pub fn contains(&self, q: &Cube, x: &[f64]) -> bool {
        self.cube_containing(x, q.level) == *q
    }

    /// `x_Q`, the image of the box midpoint.
    pub fn center(&self, q: &Cube) -> Vec<f64> {
        let s = self.sides(q.level);
        let y: Vec<f64> = q
            .index
            .iter()
            .zip(&s)
            .map(|(a, s)| (*a as f64 + 0.5) * s)
            .collect();
        (&self.conj * DVector::from_vec(y))
            .iter()
            .copied()
            .collect()
    }

    pub fn vertices(&self, q: &Cube) -> Vec<Vec<f64>> {
        let s = self.sides(q.level);
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                let y: Vec<f64> = (0..n)
                    .map(|i| (q.index[i] + ((mask >> i) & 1) as i64) as f64 * s[i])
                    .collect();
                (&self.conj * DVector::from_vec(y))
                    .iter()
                    .copied()
                    .collect()
            })
            .collect()
    }

    /// The level-`k` ancestor (`k ≤ q.level`).
    pub fn ancestor(&self, q: &Cube, k: i32) -> Cube {
        assert!(k <= q.level);
        let index = q
            .index
            .iter()
            .zip(&self.factors)
            .map(|(&a, &m)| a.div_euclid((m as i64).pow((q.level - k) as u32)))
            .collect();
        Cube { level: k, index }
    }

    /// Uniform point of `Q`.
    pub fn sample_in<R: Rng + ?Sized>(&self, rng: &mut R, q: &Cube) -> Vec<f64> {
        let s = self.sides(q.level);
        let y: Vec<f64> = q
            .index
            .iter()
            .zip(&s)
            .map(|(a, s)| (*a as f64 + rng.random::<f64>()) * s)
            .collect();
        (&self.conj * DVector::from_vec(y))
            .iter()
            .copied()
            .collect()
    }

    /// `x_Q + B_{vk−u} ⊂ Q`, exactly: the ellipsoid's support along each
    /// facet normal stays within half the side.
    pub fn inner_ball_fits(&self, q: &Cube, v: i32, u: i32) -> bool {
        let m = self.dilation.ball_map(v * q.level - u);
        let s = self.sides(q.level);
        (0..self.dim()).all(|i| {
            let row = self.conj_inv.row(i);
            let support = (row * &m).norm();
            support <= 0.5 * s[i] * (1.0 + 1e-12)
        })
    }

    /// `Q ⊂ x + B_{vk+u}`: every vertex of `Q` lies in the closed ball.
    pub fn outer_ball_covers(&self, q: &Cube, x: &[f64], v: i32, u: i32) -> bool {
        let j = v * q.level + u;
        self.vertices(q).iter().all(|vx| {
            let rel: Vec<f64> = vx.iter().zip(x).map(|(a, b)| a - b).collect();
            self.dilation.gauge(&self.dilation.apply_inv_power(j, &rel)) <= 1.0 + 1e-12
        })
    }

    /// `Q ⊂ x + B_{vk+u}` for every `x ∈ Q`, via the difference body `Q − Q`.
    fn outer_ball_covers_all(&self, q: &Cube, v: i32, u: i32) -> bool {
        let s = self.sides(q.level);
        let n = self.dim();
        let j = v * q.level + u;
        (0..1usize << n).all(|mask| {
            let y: Vec<f64> = (0..n)
                .map(|i| if (mask >> i) & 1 == 1 { s[i] } else { -s[i] })
                .collect();
            let rel: Vec<f64> = (&self.conj * DVector::from_vec(y))
                .iter()
                .copied()
                .collect();
            self.dilation.gauge(&self.dilation.apply_inv_power(j, &rel)) <= 1.0 + 1e-12
        })
    }

    fn search_constants(&self) -> Option<(i32, i32)> {
        let zero = |k: i32| Cube {
            level: k,
            index: vec![0; self.dim()],
        };
        for v in (-3..=-1).rev() {
            for u in 0..=32 {
                let ok = (self.levels.0..=self.levels.1).all(|k| {
                    let q = zero(k);
                    self.inner_ball_fits(&q, v, u) && self.outer_ball_covers_all(&q, v, u)
                });
                if ok {
                    return Some((v, u));
                }
            }
        }
        None
    }

    /// Both sandwich inclusions on one cube with the given sample points.
    pub fn sandwich_holds(&self, q: &Cube, points: &[Vec<f64>]) -> bool {
        self.inner_ball_fits(q, self.v, self.u)
            && points
                .iter()
                .all(|x| self.outer_ball_covers(q, x, self.v, self.u))
    }

    /// Checks the sandwich on `cubes_per_level` seeded cubes per level with
    /// `points` interior points each, plus nesting of each cube in its parent.
    pub fn certify(&self, cubes_per_level: usize, points: usize, seed: u64) -> SandwichCertificate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cert = SandwichCertificate {
            cubes: 0,
            points: 0,
            violations: 0,
        };
        for k in self.levels.0..=self.levels.1 {
            for _ in 0..cubes_per_level {
                let index = (0..self.dim()).map(|_| rng.random_range(-8..8)).collect();
                let q = Cube { level: k, index };
                let pts: Vec<Vec<f64>> =
                    (0..points).map(|_| self.sample_in(&mut rng, &q)).collect();
                cert.cubes += 1;
                cert.points += pts.len();
                let nested = k == self.levels.0
                    || pts
                        .iter()
                        .all(|x| self.contains(&self.ancestor(&q, k - 1), x));
                if !self.sandwich_holds(&q, &pts) || !nested {
                    cert.violations += 1;
                }
            }
        }
        cert
    }

    /// For every node of `grid`, the number of level-`k` cubes among the
    /// ones met by the nodes that contain it; all ones for a partition.
    pub fn partition_multiplicity(&self, grid: &Grid, k: i32) -> Vec<usize> {
        let nodes: Vec<Vec<f64>> = (0..grid.len())
            .map(|i| grid.node(i, Domain::Space))
            .collect();
        let mut cubes: Vec<Cube> = nodes.iter().map(|x| self.cube_containing(x, k)).collect();
        cubes.sort_by(|a, b| a.index.cmp(&b.index));
        cubes.dedup();
        nodes
            .iter()
            .map(|x| cubes.iter().filter(|q| self.contains(q, x)).count())
            .collect()
    }
}

/// `center + B_scale`.
#[derive(Clone, Debug, Serialize)]
pub struct BallRegion {
    pub center: Vec<f64>,
    pub scale: i32,
}

impl BallRegion {
    pub fn contains(&self, d: &Dilation, x: &[f64]) -> bool {
        let rel: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        d.contains(&rel, self.scale)
    }
}

/// `R = Q1 × Q2`.
#[derive(Clone, Debug, Serialize)]
pub struct Rectangle {
    pub first: Cube,
    pub second: Cube,
}

/// Exponents `(p, q, s⃗)` of a rectangular atom.
#[derive(Clone, Debug, Serialize)]
pub struct Triplet {
    pub p: f64,
    pub q: f64,
    pub orders: (usize, usize),
}

impl Triplet {
    /// Checks `q ≥ 2`, `q > q_w` and `s_i ≥ ⌈(q_w/p − 1)/ζ_{i,−}⌉`.
    pub fn check(&self, q_w: f64, zeta: (f64, f64)) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "atom exponent p = {} outside (0, 1]",
                self.p
            )));
        }
        if !(self.q >= 2.0 && self.q > q_w) {
            return Err(Error::InvalidInput(format!(
                "q = {} must be >= 2 and exceed q_w = {q_w}",
                self.q
            )));
        }
        for (s, z) in [(self.orders.0, zeta.0), (self.orders.1, zeta.1)] {
            let need = ((q_w / self.p - 1.0) / z).ceil().max(0.0) as usize;
            if s < need {
                return Err(Error::InvalidInput(format!(
                    "moment order {s} below the admissible minimum {need}"
                )));
            }
        }
        Ok(())
    }
}

/// Independent re-derivation of the three atom conditions.
#[derive(Clone, Debug, Serialize)]
pub struct AtomCertificate {
    pub support_ok: bool,
    pub moments_ok: bool,
    pub norm_ok: bool,
    /// The projection removed everything.
    pub trivial: bool,
    /// Largest relative slice moment.
    pub moment_residual: f64,
    pub norm: f64,
    pub bound: f64,
    pub weight_mass: f64,
    pub removal_order: String,
}

impl AtomCertificate {
    pub fn valid(&self) -> bool {
        self.support_ok && self.moments_ok && self.norm_ok
    }
}

/// A function on a product grid satisfying the atom conditions for a
/// rectangle `R`.
#[derive(Clone, Debug)]
pub struct RectAtom {
    pub rect: Rectangle,
    pub support: (BallRegion, BallRegion),
    pub triplet: Triplet,
    pub samples: GridFunction,
    pub certificate: AtomCertificate,
}

/// Grids, dilations and the split of the product axes.
pub struct ProductCubes<'a> {
    pub first: &'a DyadicGrid,
    pub second: &'a DyadicGrid,
}

impl ProductCubes<'_> {
    fn support(&self, rect: &Rectangle) -> (BallRegion, BallRegion) {
        let region = |g: &DyadicGrid, q: &Cube| BallRegion {
            center: g.center(q),
            scale: g.v * (q.level - 1) + g.u + 3 * g.dilation.sigma(),
        };
        (
            region(self.first, &rect.first),
            region(self.second, &rect.second),
        )
    }
}

/// `R_{i,γ} = x_{R_i} + B_{v_i(ℓ(R_i)−1)+u_i+5σ_i+γ}`.
pub fn enlargements(
    cubes: &ProductCubes,
    rect: &Rectangle,
    gamma: u32,
) -> (BallRegion, BallRegion) {
    let region = |g: &DyadicGrid, q: &Cube| BallRegion {
        center: g.center(q),
        scale: g.v * (q.level - 1) + g.u + 5 * g.dilation.sigma() + gamma as i32,
    };
    (
        region(cubes.first, &rect.first),
        region(cubes.second, &rect.second),
    )
}

/// Flat indices of the factor grid nodes inside a region.
fn region_nodes(grid: &Grid, d: &Dilation, region: &BallRegion) -> Vec<usize> {
    (0..grid.len())
        .filter(|&i| region.contains(d, &grid.node(i, Domain::Space)))
        .collect()
}

/// Centered, scaled monomials of total degree `≤ order` at `x`.
fn monomials(x: &[f64], center: &[f64], scale: f64, order: usize) -> Vec<f64> {
    let y: Vec<f64> = x.iter().zip(center).map(|(a, c)| (a - c) / scale).collect();
    crate::bump::multi_indices(x.len(), order)
        .iter()
        .map(|alpha| {
            alpha
                .iter()
                .zip(&y)
                .map(|(&e, v)| v.powi(e as i32))
                .product()
        })
        .collect()
}

/// Orthonormal basis (columns) of the monomials restricted to `nodes`.
fn projector(
    grid: &Grid,
    nodes: &[usize],
    center: &[f64],
    scale: f64,
    order: usize,
) -> Result<DMatrix<f64>> {
    let cols = crate::bump::multi_indices(grid.dim(), order).len();
    let mut m = DMatrix::zeros(nodes.len(), cols);
    for (r, &i) in nodes.iter().enumerate() {
        for (c, v) in monomials(&grid.node(i, Domain::Space), center, scale, order)
            .into_iter()
            .enumerate()
        {
            m[(r, c)] = v;
        }
    }
    let qr = m.qr();
    let rdiag = qr.r().diagonal();
    let top = rdiag.amax();
    if rdiag.iter().any(|v| v.abs() <= 1e-10 * top) {
        return Err(Error::DegenerateRectangle {
            nodes: nodes.len(),
            needed: order + 1,
        });
    }
    Ok(qr.q())
}

/// Removes from `v` its projection onto the column span of `q`.
fn remove_projection(q: &DMatrix<f64>, v: &mut [f64]) {
    let x = DVector::from_column_slice(v);
    let coeff = q.transpose() * &x;
    let proj = q * coeff;
    for (a, p) in v.iter_mut().zip(proj.iter()) {
        *a -= p;
    }
}

/// Smallest count of distinct node coordinates along any axis.
fn distinct_per_axis(grid: &Grid, nodes: &[usize]) -> usize {
    let mut idx = vec![0usize; grid.dim()];
    (0..grid.dim())
        .map(|a| {
            let mut seen: Vec<usize> = nodes
                .iter()
                .map(|&i| {
                    grid.unravel(i, &mut idx);
                    idx[a]
                })
                .collect();
            seen.sort_unstable();
            seen.dedup();
            seen.len()
        })
        .min()
        .unwrap_or(0)
}

/// Restricts `f` to `R″`, removes slice moments (first along factor-1
/// slices, then factor-2 slices) and rescales so that
/// `‖a‖_{L^q_w} = w(R)^{1/q − 1/p}`.
pub fn make_rectangular_atom(
    f: &GridFunction,
    cubes: &ProductCubes,
    rect: &Rectangle,
    triplet: &Triplet,
    w: &WeightField,
) -> Result<RectAtom> {
    let (g1, g2, split) = split_grid(&f.grid, cubes)?;
    let (d1, d2) = (cubes.first.dilation(), cubes.second.dilation());
    let support = cubes.support(rect);
    let nodes1 = region_nodes(&g1, d1, &support.0);
    let nodes2 = region_nodes(&g2, d2, &support.1);
    for (nodes, g, s) in [
        (&nodes1, &g1, triplet.orders.0),
        (&nodes2, &g2, triplet.orders.1),
    ] {
        let distinct = distinct_per_axis(g, nodes);
        if nodes.is_empty() || distinct < s + 1 {
            return Err(Error::DegenerateRectangle {
                nodes: distinct,
                needed: s + 1,
            });
        }
    }
    let radius = |d: &Dilation, r: &BallRegion| {
        d.bounding_half_widths(r.scale)
            .iter()
            .copied()
            .fold(0.0, f64::max)
    };
    let q1 = projector(
        &g1,
        &nodes1,
        &support.0.center,
        radius(d1, &support.0),
        triplet.orders.0,
    )?;
    let q2 = projector(
        &g2,
        &nodes2,
        &support.1.center,
        radius(d2, &support.1),
        triplet.orders.1,
    )?;

    let src = f.values()?;
    let mut block = DMatrix::<f64>::zeros(nodes1.len(), nodes2.len());
    for (r, &i) in nodes1.iter().enumerate() {
        for (c, &j) in nodes2.iter().enumerate() {
            block[(r, c)] = src[i * split + j];
        }
    }
    let input_scale = block.amax();
    for c in 0..nodes2.len() {
        let mut col: Vec<f64> = block.column(c).iter().copied().collect();
        remove_projection(&q1, &mut col);
        block.set_column(c, &DVector::from_vec(col));
    }
    for r in 0..nodes1.len() {
        let mut row: Vec<f64> = block.row(r).iter().copied().collect();
        remove_projection(&q2, &mut row);
        for (c, v) in row.into_iter().enumerate() {
            block[(r, c)] = v;
        }
    }

    let mut values = vec![0.0; f.grid.len()];
    for (r, &i) in nodes1.iter().enumerate() {
        for (c, &j) in nodes2.iter().enumerate() {
            values[i * split + j] = block[(r, c)];
        }
    }
    let mass = weight_mass(&f.grid, cubes, rect, w, split)?;
    let bound = mass.powf(1.0 / triplet.q - 1.0 / triplet.p);
    let trivial = block.amax() <= 1e-12 * input_scale.max(f64::MIN_POSITIVE);
    if trivial {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        let current = weighted_norm(&f.grid, &values, w.values(), triplet.q);
        values.iter_mut().for_each(|v| *v *= bound / current);
    }
    let samples = GridFunction::real(f.grid.clone(), Domain::Space, values)?;
    let mut certificate = certify_atom(&samples, cubes, rect, &support, triplet, w)?;
    certificate.trivial = trivial;
    Ok(RectAtom {
        rect: rect.clone(),
        support,
        triplet: triplet.clone(),
        samples,
        certificate,
    })
}

/// One-factor building block: `f` restricted to `x_Q + B_{v(ℓ−1)+u+3σ}`
/// with all moments of degree `≤ order` removed (not normalized).
pub fn factor_atom(
    f: &GridFunction,
    cubes: &DyadicGrid,
    cube: &Cube,
    order: usize,
) -> Result<(GridFunction, BallRegion)> {
    let d = cubes.dilation();
    if f.grid.dim() != d.dim() {
        return Err(Error::GridMismatch(
            "factor atom needs a grid of the dilation's dimension".into(),
        ));
    }
    let region = BallRegion {
        center: cubes.center(cube),
        scale: cubes.v * (cube.level - 1) + cubes.u + 3 * d.sigma(),
    };
    let nodes = region_nodes(&f.grid, d, &region);
    let distinct = distinct_per_axis(&f.grid, &nodes);
    if nodes.is_empty() || distinct < order + 1 {
        return Err(Error::DegenerateRectangle {
            nodes: distinct,
            needed: order + 1,
        });
    }
    let radius = d
        .bounding_half_widths(region.scale)
        .iter()
        .copied()
        .fold(0.0, f64::max);
    let basis = projector(&f.grid, &nodes, &region.center, radius, order)?;
    let src = f.values()?;
    let mut local: Vec<f64> = nodes.iter().map(|&i| src[i]).collect();
    remove_projection(&basis, &mut local);
    let mut values = vec![0.0; f.grid.len()];
    for (&i, v) in nodes.iter().zip(local) {
        values[i] = v;
    }
    Ok((
        GridFunction::real(f.grid.clone(), Domain::Space, values)?,
        region,
    ))
}

/// Largest relative moment `|Σ a x^α| / Σ |a x^α|` over `|α| ≤ order`,
/// monomials centered at `center`.
pub fn moment_residual(a: &GridFunction, center: &[f64], order: usize) -> Result<f64> {
    let vals = a.values()?;
    let mut sums: Vec<(f64, f64)> = Vec::new();
    for (i, v) in vals.iter().enumerate() {
        if *v == 0.0 {
            continue;
        }
        let mono = monomials(&a.grid.node(i, Domain::Space), center, 1.0, order);
        if sums.is_empty() {
            sums = vec![(0.0, 0.0); mono.len()];
        }
        for (s, m) in sums.iter_mut().zip(mono) {
            s.0 += v * m;
            s.1 += (v * m).abs();
        }
    }
    Ok(sums
        .iter()
        .filter(|s| s.1 > 0.0)
        .map(|s| s.0.abs() / s.1)
        .fold(0.0, f64::max))
}

/// Factor grids of a product grid, plus the number of factor-2 nodes.
fn split_grid(grid: &Grid, cubes: &ProductCubes) -> Result<(Grid, Grid, usize)> {
    let n1 = cubes.first.dim();
    let n2 = cubes.second.dim();
    if grid.dim() != n1 + n2 {
        return Err(Error::GridMismatch(format!(
            "product grid has dimension {}, cubes need {}",
            grid.dim(),
            n1 + n2
        )));
    }
    let g1 = grid.axes(0..n1);
    let g2 = grid.axes(n1..n1 + n2);
    let split = g2.len();
    Ok((g1, g2, split))
}

fn weighted_norm(grid: &Grid, values: &[f64], w: &[f64], q: f64) -> f64 {
    let cell = grid.cell_volume();
    let s: f64 = values.iter().zip(w).map(|(a, w)| a.abs().powf(q) * w).sum();
    (s * cell).powf(1.0 / q)
}

/// `w(R)` by node sums over `R1 × R2`.
fn weight_mass(
    grid: &Grid,
    cubes: &ProductCubes,
    rect: &Rectangle,
    w: &WeightField,
    split: usize,
) -> Result<f64> {
    if w.grid() != grid {
        return Err(Error::GridMismatch(
            "weight lives on a different grid".into(),
        ));
    }
    let (g1, g2, _) = split_grid(grid, cubes)?;
    let in1: Vec<usize> = (0..g1.len())
        .filter(|&i| {
            cubes
                .first
                .contains(&rect.first, &g1.node(i, Domain::Space))
        })
        .collect();
    let in2: Vec<usize> = (0..g2.len())
        .filter(|&j| {
            cubes
                .second
                .contains(&rect.second, &g2.node(j, Domain::Space))
        })
        .collect();
    if in1.is_empty() || in2.is_empty() {
        return Err(Error::DegenerateRectangle {
            nodes: 0,
            needed: 1,
        });
    }
    let wv = w.values();
    let s: f64 = in1
        .iter()
        .flat_map(|&i| in2.iter().map(move |&j| wv[i * split + j]))
        .sum();
    Ok(s * grid.cell_volume())
}

/// Recomputes support, slice moments (raw monomials, no projection basis)
/// and the weighted norm from the samples alone.
pub fn certify_atom(
    a: &GridFunction,
    cubes: &ProductCubes,
    rect: &Rectangle,
    support: &(BallRegion, BallRegion),
    triplet: &Triplet,
    w: &WeightField,
) -> Result<AtomCertificate> {
    let (g1, g2, split) = split_grid(&a.grid, cubes)?;
    let (d1, d2) = (cubes.first.dilation(), cubes.second.dilation());
    let vals = a.values()?;
    let inside1: Vec<bool> = (0..g1.len())
        .map(|i| support.0.contains(d1, &g1.node(i, Domain::Space)))
        .collect();
    let inside2: Vec<bool> = (0..g2.len())
        .map(|j| support.1.contains(d2, &g2.node(j, Domain::Space)))
        .collect();
    let support_ok = vals
        .iter()
        .enumerate()
        .all(|(flat, v)| *v == 0.0 || (inside1[flat / split] && inside2[flat % split]));

    let mono1: Vec<Vec<f64>> = (0..g1.len())
        .map(|i| {
            monomials(
                &g1.node(i, Domain::Space),
                &support.0.center,
                1.0,
                triplet.orders.0,
            )
        })
        .collect();
    let mono2: Vec<Vec<f64>> = (0..g2.len())
        .map(|j| {
            monomials(
                &g2.node(j, Domain::Space),
                &support.1.center,
                1.0,
                triplet.orders.1,
            )
        })
        .collect();
    let mut residual: f64 = 0.0;
    // moments in x1 for every x2 slice
    for j in 0..g2.len() {
        for c in 0..mono1[0].len() {
            let (mut s, mut abs) = (0.0, 0.0);
            for i in 0..g1.len() {
                let t = vals[i * split + j] * mono1[i][c];
                s += t;
                abs += t.abs();
            }
            if abs > 0.0 {
                residual = residual.max(s.abs() / abs);
            }
        }
    }
    for i in 0..g1.len() {
        for c in 0..mono2[0].len() {
            let (mut s, mut abs) = (0.0, 0.0);
            for j in 0..g2.len() {
                let t = vals[i * split + j] * mono2[j][c];
                s += t;
                abs += t.abs();
            }
            if abs > 0.0 {
                residual = residual.max(s.abs() / abs);
            }
        }
    }
    let mass = weight_mass(&a.grid, cubes, rect, w, split)?;
    let bound = mass.powf(1.0 / triplet.q - 1.0 / triplet.p);
    let norm = weighted_norm(&a.grid, vals, w.values(), triplet.q);
    Ok(AtomCertificate {
        support_ok,
        moments_ok: residual <= 1e-10,
        norm_ok: norm <= bound * (1.0 + 1e-10),
        trivial: norm == 0.0,
        moment_residual: residual,
        norm,
        bound,
        weight_mass: mass,
        removal_order: "factor-1 slices, then factor-2 slices".into(),
    })
}

impl RectAtom {
    /// Writes `atom.agf` and `certificate.json` into `dir`.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.samples.save(&dir.join("atom.agf"))?;
        let doc = serde_json::json!({
            "rectangle": self.rect,
            "support": [self.support.0, self.support.1],
            "triplet": self.triplet,
            "certificate": self.certificate,
        });
        std::fs::write(
            dir.join("certificate.json"),
            serde_json::to_string_pretty(&doc)?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dyadic_grid() -> DyadicGrid {
        christ_cubes(&Dilation::scalar(2.0).unwrap(), (-4, 4)).unwrap()
    }

    #[test]
    fn dyadic_intervals_have_standard_constants() {
        let g = dyadic_grid();
        assert_eq!((g.v, g.u), (-1, 1));
        let q = g.cube_containing(&[0.3], 2);
        assert_eq!(q.index, vec![1]);
        assert_eq!(g.center(&q), vec![0.375]);
        assert_eq!(g.certify(20, 50, 1).violations, 0);
    }

    #[test]
    fn anisotropic_rectangles() {
        let d = Dilation::diagonal(&[2.0, 4.0]).unwrap();
        let g = christ_cubes(&d, (-3, 3)).unwrap();
        let q = g.cube_containing(&[0.3, 0.3], 1);
        let v = g.vertices(&q);
        assert!((v[1][0] - v[0][0] - 0.5).abs() < 1e-15);
        assert!((v[2][1] - v[0][1] - 0.25).abs() < 1e-15);
        assert_eq!(g.certify(10, 100, 2).violations, 0);
    }

    #[test]
    fn conjugated_grid_is_certified() {
        let th: f64 = 0.4;
        let rot = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let a = &rot * DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0])) * rot.transpose();
        let d = Dilation::new(a).unwrap();
        assert_eq!(
            christ_cubes(&d, (-2, 2)).unwrap_err().name(),
            "NotAdmissible"
        );
        let g = christ_cubes_with(&d, (-2, 2), Some(rot)).unwrap();
        assert_eq!(g.certify(10, 100, 3).violations, 0);
    }

    #[test]
    fn non_integer_dilation_is_rejected() {
        let d = Dilation::diagonal(&[1.5, 4.0]).unwrap();
        assert_eq!(
            christ_cubes(&d, (0, 1)).unwrap_err().name(),
            "NotAdmissible"
        );
    }

    #[test]
    fn cubes_nest_and_partition() {
        let g = dyadic_grid();
        let q = g.cube_containing(&[-0.37], 4);
        let parent = g.ancestor(&q, 1);
        assert_eq!(parent, g.cube_containing(&[-0.37], 1));
        let grid = Grid::cube(1, 64, 2.0).unwrap();
        assert!(g.partition_multiplicity(&grid, 2).iter().all(|&m| m == 1));
    }

    fn setup() -> (DyadicGrid, Grid, WeightField) {
        let g = dyadic_grid();
        let grid = Grid::cube(2, 128, 4.0).unwrap();
        let d = Dilation::scalar(2.0).unwrap();
        let g1 = grid.axes(0..1);
        let w = WeightField::product_unit(&g1, &g1, d.clone(), d);
        (g, grid, w)
    }

    #[test]
    fn constant_input_gives_trivial_atom() {
        let (g, grid, w) = setup();
        let cubes = ProductCubes {
            first: &g,
            second: &g,
        };
        let rect = Rectangle {
            first: g.cube_containing(&[0.1], 1),
            second: g.cube_containing(&[0.1], 1),
        };
        let f = GridFunction::from_fn(grid, |_| 1.0);
        let t = Triplet {
            p: 1.0,
            q: 2.0,
            orders: (0, 0),
        };
        let atom = make_rectangular_atom(&f, &cubes, &rect, &t, &w).unwrap();
        assert!(atom.certificate.trivial);
        assert_eq!(atom.samples.max_abs(), 0.0);
    }

    #[test]
    fn random_atom_is_certified_and_idempotent() {
        let (g, grid, w) = setup();
        let cubes = ProductCubes {
            first: &g,
            second: &g,
        };
        let rect = Rectangle {
            first: g.cube_containing(&[0.1], 0),
            second: g.cube_containing(&[-0.6], 0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..grid.len()).map(|_| rng.random::<f64>() - 0.3).collect();
        let f = GridFunction::real(grid, Domain::Space, vals).unwrap();
        let t = Triplet {
            p: 1.0,
            q: 2.0,
            orders: (1, 1),
        };
        let atom = make_rectangular_atom(&f, &cubes, &rect, &t, &w).unwrap();
        assert!(atom.certificate.valid(), "{:?}", atom.certificate);
        assert!((atom.certificate.norm / atom.certificate.bound - 1.0).abs() < 1e-10);
        let again = make_rectangular_atom(&atom.samples, &cubes, &rect, &t, &w).unwrap();
        let (a, b) = (
            atom.samples.values().unwrap(),
            again.samples.values().unwrap(),
        );
        let scale = atom.samples.max_abs();
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * scale));
    }

    #[test]
    fn enlargements_grow_and_contain_support() {
        let (g, _, _) = setup();
        let cubes = ProductCubes {
            first: &g,
            second: &g,
        };
        let rect = Rectangle {
            first: g.cube_containing(&[0.1], 2),
            second: g.cube_containing(&[0.1], 2),
        };
        let support = cubes.support(&rect);
        let mut prev = enlargements(&cubes, &rect, 0);
        assert!(prev.0.scale >= support.0.scale);
        for gamma in 1..=6 {
            let next = enlargements(&cubes, &rect, gamma);
            assert_eq!(next.0.scale, prev.0.scale + 1);
            prev = next;
        }
    }

    #[test]
    fn tiny_support_is_degenerate() {
        let (g, grid, w) = setup();
        let cubes = ProductCubes {
            first: &g,
            second: &g,
        };
        let rect = Rectangle {
            first: g.cube_containing(&[0.1], 9),
            second: g.cube_containing(&[0.1], 9),
        };
        let f = GridFunction::from_fn(grid, |x| x[0]);
        let t = Triplet {
            p: 1.0,
            q: 2.0,
            orders: (1, 1),
        };
        assert_eq!(
            make_rectangular_atom(&f, &cubes, &rect, &t, &w)
                .unwrap_err()
                .name(),
            "DegenerateRectangle"
        );
    }

    #[test]
    fn triplet_admissibility() {
        let t = Triplet {
            p: 0.5,
            q: 2.0,
            orders: (1, 1),
        };
        assert!(t.check(1.0, (1.0, 1.0)).is_ok());
        let t = Triplet {
            p: 0.5,
            q: 2.0,
            orders: (0, 1),
        };
        assert!(t.check(1.0, (1.0, 1.0)).is_err());
    }
}
