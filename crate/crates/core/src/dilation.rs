//! Expansive dilations and the geometry they induce: the invariant ellipsoid,
//! dilated balls `B_k = A^k Δ`, the step quasi-norm and the sum-law constant.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

use crate::error::{Error, Result};

/// Relative slack on the spectral bounds unless the caller overrides it.
pub const DEFAULT_SPECTRAL_SLACK: f64 = 1e-6;

/// Ball membership compares against `c * (1 - MEMBERSHIP_SLACK)`, so points
/// lying on a ball boundary up to rounding (dyadic grid nodes, for instance)
/// are classified the same way at every scale.
pub const MEMBERSHIP_SLACK: f64 = 1e-12;

const SERIES_TOL: f64 = 1e-14;
const SERIES_MAX_TERMS: usize = 2_000_000;
const POWER_CACHE: i32 = 64;

/// Row-major dense square matrix used on hot paths.
#[derive(Clone, Debug, PartialEq)]
struct Square {
    n: usize,
    a: Vec<f64>,
}

impl Square {
    fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut a = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                a.push(m[(i, j)]);
            }
        }
        Square { n, a }
    }

    fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.a)
    }

    #[inline]
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.a[i * n..(i + 1) * n];
            out[i] = row.iter().zip(x).map(|(r, v)| r * v).sum();
        }
    }
}

/// An expansive matrix together with its derived calculus.
#[derive(Clone, Debug)]
pub struct Dilation {
    matrix: DMatrix<f64>,
    dim: usize,
    det_abs: f64,
    eig_min: f64,
    eig_max: f64,
    lambda_minus: f64,
    lambda_plus: f64,
    form: DMatrix<f64>,
    level: f64,
    expansion_ratio: f64,
    sigma: i32,
    // A^{-k}, k in [-POWER_CACHE, POWER_CACHE], indexed by k + POWER_CACHE.
    inv_powers: Vec<Square>,
    form_sq: Square,
    // A^k sqrt(c) P^{-1/2}: maps the Euclidean unit ball onto B_k (k = 0 here).
    unit_to_delta: DMatrix<f64>,
}

impl PartialEq for Dilation {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix
    }
}

fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let e = sym.symmetric_eigen();
    (e.eigenvalues, e.eigenvectors)
}

fn sym_lambda_max(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m)
        .0
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

fn sym_power(m: &DMatrix<f64>, exponent: f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let d = DMatrix::from_diagonal(&vals.map(|v| v.powf(exponent)));
    &vecs * d * vecs.transpose()
}

/// Volume of the Euclidean unit ball in R^n.
pub fn unit_ball_volume(n: usize) -> f64 {
    // omega_n = pi^{n/2} / Gamma(n/2 + 1), via the two-step recursion.
    let mut omega = [1.0, 2.0];
    for k in 2..=n {
        let next = omega[(k - 2) % 2] * 2.0 * std::f64::consts::PI / k as f64;
        omega[k % 2] = next;
    }
    omega[n % 2]
}

impl Dilation {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        Self::with_slack(matrix, DEFAULT_SPECTRAL_SLACK)
    }

    /// Convenience constructor from row-major entries.
    pub fn from_rows(n: usize, rows: &[f64]) -> Result<Self> {
        if rows.len() != n * n || n == 0 {
            return Err(Error::InvalidInput(format!(
                "expected {} matrix entries, got {}",
                n * n,
                rows.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, n, rows))
    }

    /// Scalar dilation `x -> a x` on the real line.
    pub fn scalar(a: f64) -> Result<Self> {
        Self::from_rows(1, &[a])
    }

    pub fn diagonal(entries: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(entries)))
    }

    pub fn with_slack(matrix: DMatrix<f64>, slack: f64) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::InvalidInput(
                "matrix must be square and nonempty".into(),
            ));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "dilation matrix".into(),
            });
        }
        let n = matrix.nrows();
        let eigs = matrix.complex_eigenvalues();
        let moduli: Vec<f64> = eigs.iter().map(|z| z.norm()).collect();
        let eig_min = moduli.iter().cloned().fold(f64::INFINITY, f64::min);
        let eig_max = moduli.iter().cloned().fold(0.0, f64::max);
        if !(eig_min > 1.0 + 1e-12) {
            return Err(Error::NotExpansive { modulus: eig_min });
        }
        let det_abs = matrix.determinant().abs();
        let inverse = matrix
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidInput("singular matrix".into()))?;

        // P = sum_j (A^{-T})^j (A^{-1})^j.
        let mut form = DMatrix::<f64>::identity(n, n);
        let mut pow = DMatrix::<f64>::identity(n, n);
        let mut converged = false;
        for _ in 0..SERIES_MAX_TERMS {
            pow = &inverse * &pow;
            let term = pow.transpose() * &pow;
            form += &term;
            if sym_lambda_max(&term) < SERIES_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::InvalidInput(
                "ellipsoid series did not converge".into(),
            ));
        }
        let form = (&form + form.transpose()) * 0.5;
        let det_p = form.determinant();
        // |Delta| = c^{n/2} omega_n / sqrt(det P) = 1.
        let level = (det_p.sqrt() / unit_ball_volume(n)).powf(2.0 / n as f64);
        let lmax_p = sym_lambda_max(&form);
        let expansion_ratio = (lmax_p / (lmax_p - 1.0)).sqrt() * (1.0 - 1e-9);

        let p_inv_sqrt = sym_power(&form, -0.5);
        let mut sigma = 1;
        let mut pw = inverse.clone();
        loop {
            let q = &p_inv_sqrt * pw.transpose() * &form * &pw * &p_inv_sqrt;
            if 4.0 * sym_lambda_max(&q) <= 1.0 + 1e-12 {
                break;
            }
            sigma += 1;
            pw = &inverse * pw;
            if sigma > 10_000 {
                return Err(Error::InvalidInput("sigma search did not terminate".into()));
            }
        }

        let mut inv_powers = Vec::with_capacity((2 * POWER_CACHE + 1) as usize);
        {
            let mut neg = Vec::new();
            let mut p = DMatrix::<f64>::identity(n, n);
            for _ in 0..POWER_CACHE {
                p = &matrix * p;
                neg.push(Square::from_dmatrix(&p));
            }
            neg.reverse();
            inv_powers.extend(neg);
            inv_powers.push(Square::from_dmatrix(&DMatrix::identity(n, n)));
            let mut p = DMatrix::<f64>::identity(n, n);
            for _ in 0..POWER_CACHE {
                p = &inverse * p;
                inv_powers.push(Square::from_dmatrix(&p));
            }
        }
        let unit_to_delta = &p_inv_sqrt * level.sqrt();

        Ok(Dilation {
            form_sq: Square::from_dmatrix(&form),
            matrix,
            dim: n,
            det_abs,
            eig_min,
            eig_max,
            lambda_minus: (1.0 - slack) * eig_min,
            lambda_plus: (1.0 + slack) * eig_max,
            form,
            level,
            expansion_ratio,
            sigma,
            inv_powers,
            unit_to_delta,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    /// `b = |det A|`.
    pub fn det_abs(&self) -> f64 {
        self.det_abs
    }
    pub fn lambda_minus(&self) -> f64 {
        self.lambda_minus
    }
    pub fn lambda_plus(&self) -> f64 {
        self.lambda_plus
    }
    pub fn zeta_minus(&self) -> f64 {
        self.lambda_minus.ln() / self.det_abs.ln()
    }
    pub fn zeta_plus(&self) -> f64 {
        self.lambda_plus.ln() / self.det_abs.ln()
    }
    /// Smallest and largest eigenvalue modulus without slack.
    pub fn eigen_moduli(&self) -> (f64, f64) {
        (self.eig_min, self.eig_max)
    }
    /// Ellipsoid form `P` with `Δ = {x : xᵀPx < c}`.
    pub fn form(&self) -> &DMatrix<f64> {
        &self.form
    }
    pub fn level(&self) -> f64 {
        self.level
    }
    pub fn expansion_ratio(&self) -> f64 {
        self.expansion_ratio
    }
    pub fn sigma(&self) -> i32 {
        self.sigma
    }
    /// Quasi-triangle constant `b^σ`.
    pub fn triangle_constant(&self) -> f64 {
        self.det_abs.powi(self.sigma)
    }

    /// Dilation by `Aᵀ`, acting on the frequency side.
    pub fn transpose(&self) -> Result<Dilation> {
        let slack = self.lambda_minus / self.eig_min;
        Dilation::with_slack(self.matrix.transpose(), 1.0 - slack)
    }

    fn inv_power_square(&self, k: i32) -> std::borrow::Cow<'_, Square> {
        if (-POWER_CACHE..=POWER_CACHE).contains(&k) {
            std::borrow::Cow::Borrowed(&self.inv_powers[(k + POWER_CACHE) as usize])
        } else {
            std::borrow::Cow::Owned(Square::from_dmatrix(&self.inv_power(k)))
        }
    }

    /// `A^{-k}` as a dense matrix.
    pub fn inv_power(&self, k: i32) -> DMatrix<f64> {
        if (-POWER_CACHE..=POWER_CACHE).contains(&k) {
            return self.inv_powers[(k + POWER_CACHE) as usize].to_dmatrix();
        }
        let step = if k > 0 { POWER_CACHE } else { -POWER_CACHE };
        let block = self.inv_powers[(step + POWER_CACHE) as usize].to_dmatrix();
        let mut out = DMatrix::<f64>::identity(self.dim, self.dim);
        let mut rem = k;
        while rem.abs() > POWER_CACHE {
            out = &block * out;
            rem -= step;
        }
        self.inv_powers[(rem + POWER_CACHE) as usize].to_dmatrix() * out
    }

    /// `A^k` as a dense matrix.
    pub fn power(&self, k: i32) -> DMatrix<f64> {
        self.inv_power(-k)
    }

    /// `A^{-k} x`.
    pub fn apply_inv_power(&self, k: i32, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.inv_power_square(k).apply(x, &mut out);
        out
    }

    /// `A^k x`.
    pub fn apply_power(&self, k: i32, x: &[f64]) -> Vec<f64> {
        self.apply_inv_power(-k, x)
    }

    /// `xᵀPx`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let n = self.dim;
        let mut s = 0.0;
        for i in 0..n {
            let row = &self.form_sq.a[i * n..(i + 1) * n];
            let pi: f64 = row.iter().zip(x).map(|(r, v)| r * v).sum();
            s += x[i] * pi;
        }
        s
    }

    /// Ellipsoid gauge `sqrt(xᵀPx / c)`: below 1 exactly on `Δ`.
    pub fn gauge(&self, x: &[f64]) -> f64 {
        (self.quad_form(x) / self.level).sqrt()
    }

    /// `x ∈ B_k`.
    pub fn contains(&self, x: &[f64], k: i32) -> bool {
        let mut y = [0.0f64; 8];
        if self.dim <= 8 {
            self.inv_power_square(k).apply(x, &mut y[..self.dim]);
            self.quad_form(&y[..self.dim]) < self.level * (1.0 - MEMBERSHIP_SLACK)
        } else {
            let y = self.apply_inv_power(k, x);
            self.quad_form(&y) < self.level * (1.0 - MEMBERSHIP_SLACK)
        }
    }

    /// The `k` with `x ∈ B_{k+1} \ B_k`, or `None` at the origin.
    pub fn shell_index(&self, x: &[f64]) -> Option<i32> {
        if x.iter().all(|v| *v == 0.0) {
            return None;
        }
        // smallest m with x in B_m; then k = m - 1.
        let (mut lo, mut hi);
        if self.contains(x, 0) {
            hi = 0;
            let mut step = 1;
            lo = -1;
            while self.contains(x, lo) {
                hi = lo;
                step *= 2;
                lo = hi - step;
            }
        } else {
            lo = 0;
            let mut step = 1;
            hi = 1;
            while !self.contains(x, hi) {
                lo = hi;
                step *= 2;
                hi = lo + step;
            }
        }
        // invariant: x not in B_lo, x in B_hi
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.contains(x, mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi - 1)
    }

    /// Step quasi-norm: `b^k` on `B_{k+1} \ B_k`, zero at the origin.
    pub fn quasi_norm(&self, x: &[f64]) -> f64 {
        match self.shell_index(x) {
            None => 0.0,
            Some(k) => self.det_abs.powi(k),
        }
    }

    /// Linear map taking the Euclidean unit ball onto `B_k`.
    pub fn ball_map(&self, k: i32) -> DMatrix<f64> {
        self.power(k) * &self.unit_to_delta
    }

    /// Half-widths of the axis-aligned bounding box of `B_k`.
    pub fn bounding_half_widths(&self, k: i32) -> Vec<f64> {
        let m = self.ball_map(k);
        (0..self.dim).map(|i| m.row(i).norm()).collect()
    }

    /// Uniform sample from `B_k`.
    pub fn sample_ball<R: Rng + ?Sized>(&self, rng: &mut R, k: i32) -> Vec<f64> {
        let z = sample_unit_ball(rng, self.dim);
        let m = self.ball_map(k);
        let v = m * DVector::from_vec(z);
        v.iter().cloned().collect()
    }

    /// Uniform sample from the shell `B_{k+1} \ B_k`.
    pub fn sample_shell<R: Rng + ?Sized>(&self, rng: &mut R, k: i32) -> Vec<f64> {
        loop {
            let x = self.sample_ball(rng, k + 1);
            if !self.contains(&x, k) {
                return x;
            }
        }
    }

    /// JSON description with reals at 17 significant digits.
    pub fn to_json(&self) -> String {
        let num = |v: f64| format!("{:.16e}", v);
        let mat = |m: &DMatrix<f64>| {
            let rows: Vec<String> = (0..m.nrows())
                .map(|i| {
                    let r: Vec<String> = (0..m.ncols()).map(|j| num(m[(i, j)])).collect();
                    format!("[{}]", r.join(", "))
                })
                .collect();
            format!("[{}]", rows.join(", "))
        };
        format!(
            "{{\"matrix\": {}, \"b\": {}, \"P\": {}, \"c\": {}, \"r\": {}, \"sigma\": {}, \"lambda_minus\": {}, \"lambda_plus\": {}}}",
            mat(&self.matrix),
            num(self.det_abs),
            mat(&self.form),
            num(self.level),
            num(self.expansion_ratio),
            self.sigma,
            num(self.lambda_minus),
            num(self.lambda_plus)
        )
    }

    /// Rebuilds a dilation from its JSON description; derived fields are recomputed.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let rows = v["matrix"]
            .as_array()
            .ok_or_else(|| Error::Format("missing matrix".into()))?;
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for r in rows {
            let r = r
                .as_array()
                .ok_or_else(|| Error::Format("bad matrix row".into()))?;
            for e in r {
                entries.push(
                    e.as_f64()
                        .ok_or_else(|| Error::Format("bad matrix entry".into()))?,
                );
            }
        }
        let mut d = Dilation::from_rows(n, &entries)?;
        if let (Some(lm), Some(lp)) = (v["lambda_minus"].as_f64(), v["lambda_plus"].as_f64()) {
            if !(1.0 < lm && lm < d.eig_min && d.eig_max < lp) {
                return Err(Error::Format(
                    "spectral bounds do not bracket the spectrum".into(),
                ));
            }
            d.lambda_minus = lm;
            d.lambda_plus = lp;
        }
        Ok(d)
    }
}

/// Uniform sample from the Euclidean unit ball.
pub fn sample_unit_ball<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let radius = rng.random::<f64>().powf(1.0 / n as f64);
    for v in &mut z {
        *v *= radius / norm;
    }
    z
}

/// Sampled check of the ball sum laws: `B_k + B_l ⊂ B_{max(k,l)+σ}`, and
/// `x ∈ B_k, y ∉ B_{k+σ}` implies `x + y ∉ B_k`. Returns the first witness of
/// failure.
pub fn check_ball_sum_law<R: Rng + ?Sized>(
    d: &Dilation,
    k: i32,
    l: i32,
    samples: usize,
    rng: &mut R,
) -> std::result::Result<(), (Vec<f64>, Vec<f64>)> {
    let s = d.sigma();
    let top = k.max(l) + s;
    for _ in 0..samples {
        let x = d.sample_ball(rng, k);
        let y = d.sample_ball(rng, l);
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        if !d.contains(&sum, top) {
            return Err((x, y));
        }
        // far partner outside B_{k+σ}
        let shell = k + s + rng.random_range(0..3);
        let y = d.sample_shell(rng, shell);
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        if d.contains(&sum, k) {
            return Err((x, y));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dyadic_line() {
        let d = Dilation::scalar(2.0).unwrap();
        assert_eq!(d.det_abs(), 2.0);
        assert_eq!(d.sigma(), 1);
        // P = sum 4^{-j} = 4/3, and |Δ| = 1 forces Δ = (-1/2, 1/2).
        assert!((d.form()[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
        assert!((d.level() - 1.0 / 3.0).abs() < 1e-14);
        assert!(d.contains(&[0.3], 0));
        assert!(!d.contains(&[0.3], -1));
        assert!(!d.contains(&[0.5], 0));
        assert!(d.contains(&[0.4999], 0));
        assert_eq!(d.quasi_norm(&[0.3]), 0.5);
        assert_eq!(d.quasi_norm(&[0.0]), 0.0);
        assert_eq!(d.quasi_norm(&[0.5]), 1.0);
        assert_eq!(d.quasi_norm(&[-3.0]), 4.0);
    }

    #[test]
    fn isotropic_plane_is_a_disk() {
        let d = Dilation::diagonal(&[2.0, 2.0]).unwrap();
        assert_eq!(d.det_abs(), 4.0);
        let radius = 1.0 / std::f64::consts::PI.sqrt();
        for t in 0..16 {
            let a = t as f64 * 0.39;
            let inside = [0.999 * radius * a.cos(), 0.999 * radius * a.sin()];
            let outside = [1.001 * radius * a.cos(), 1.001 * radius * a.sin()];
            assert!(d.contains(&inside, 0));
            assert!(!d.contains(&outside, 0));
        }
    }

    #[test]
    fn containment_chain_for_anisotropic_diagonal() {
        let d = Dilation::diagonal(&[1.5, 4.0]).unwrap();
        assert!((d.det_abs() - 6.0).abs() < 1e-12);
        let r = d.expansion_ratio();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = d.matrix().clone();
        for _ in 0..1000 {
            // boundary point of Δ in a random direction
            let z = sample_unit_ball(&mut rng, 2);
            let norm = (z[0] * z[0] + z[1] * z[1]).sqrt();
            let u = DVector::from_vec(vec![z[0] / norm, z[1] / norm]);
            let bdry = &d.unit_to_delta * u;
            let ab = &a * &bdry;
            // A(∂Δ) lies outside rΔ
            let scaled: Vec<f64> = ab.iter().map(|v| v / r).collect();
            assert!(d.quad_form(&scaled) >= d.level());
            // ∂(rΔ) lies inside AΔ
            let rb: Vec<f64> = bdry.iter().map(|v| v * r).collect();
            assert!(d.contains(&rb, 1));
        }
    }

    #[test]
    fn unit_volume() {
        for m in [
            vec![2.0],
            vec![2.0, 0.0, 0.0, 2.0],
            vec![1.5, 0.0, 0.0, 4.0],
            vec![1.0, 1.0, -1.0, 1.5],
            vec![2.0, 1.0, 0.0, 0.0, 3.0, 0.5, 0.0, 0.0, 1.5],
        ] {
            let n = (m.len() as f64).sqrt() as usize;
            let d = Dilation::from_rows(n, &m).unwrap();
            let vol = d.level().powf(n as f64 / 2.0) * unit_ball_volume(n)
                / d.form().determinant().sqrt();
            assert!((vol - 1.0).abs() < 1e-10, "{vol}");
            // contraction identity A^{-T} P A^{-1} = P - I
            let ai = d.inv_power(1);
            let lhs = ai.transpose() * d.form() * &ai;
            let rhs = d.form() - DMatrix::identity(n, n);
            assert!((lhs - rhs).abs().max() < 1e-12);
        }
    }

    #[test]
    fn shear_is_rejected() {
        let e = Dilation::from_rows(2, &[1.0, 1.0, 0.0, 1.0]).unwrap_err();
        assert_eq!(e.name(), "NotExpansive");
        let e = Dilation::from_rows(1, &[f64::NAN]).unwrap_err();
        assert_eq!(e.name(), "NonFinite");
    }

    #[test]
    fn unit_ball_volumes() {
        assert!((unit_ball_volume(1) - 2.0).abs() < 1e-15);
        assert!((unit_ball_volume(2) - std::f64::consts::PI).abs() < 1e-15);
        assert!((unit_ball_volume(3) - 4.0 / 3.0 * std::f64::consts::PI).abs() < 1e-14);
    }

    #[test]
    fn sum_law_dyadic() {
        let d = Dilation::scalar(2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(check_ball_sum_law(&d, 0, 0, 1000, &mut rng).is_ok());
        assert!(check_ball_sum_law(&d, 3, -2, 1000, &mut rng).is_ok());
    }

    #[test]
    fn json_round_trip_is_bit_stable() {
        let d = Dilation::from_rows(2, &[1.0, 1.0, -1.0, 1.5]).unwrap();
        let s = d.to_json();
        let v: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["sigma"].as_i64().unwrap() as i32, d.sigma());
        let e = Dilation::from_json(&s).unwrap();
        assert_eq!(e.to_json(), s);
        let again = Dilation::from_rows(2, &[1.0, 1.0, -1.0, 1.5]).unwrap();
        assert_eq!(
            again.expansion_ratio().to_bits(),
            d.expansion_ratio().to_bits()
        );
    }

    #[test]
    fn large_powers_match_iteration() {
        let d = Dilation::from_rows(2, &[1.1, 0.2, 0.0, 1.3]).unwrap();
        let direct = d.inv_power(150);
        let mut it = DMatrix::<f64>::identity(2, 2);
        let ai = d.inv_power(1);
        for _ in 0..150 {
            it = &ai * it;
        }
        assert!(((direct - &it).abs().max() / it.abs().max()) < 1e-10);
    }
}
