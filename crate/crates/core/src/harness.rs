//! Experiment configuration, drivers and result files.
//!
//! A config is a UTF-8 `key = value` file; `[section]` headers are allowed
//! and ignored for lookup, so `points` may live under `[grid]` or at the top.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ini::Ini;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::bump::multi_indices;
use crate::calderon::{build_calderon_pair, CalderonPair, Filter};
use crate::dilation::Dilation;
use crate::error::{Error, Result};
use crate::grid::{Domain, Grid, GridFunction};
use crate::grids_atoms::{
    certify_atom, christ_cubes, factor_atom, make_rectangular_atom, moment_residual,
    AtomCertificate, BallRegion, ProductCubes, RectAtom, Rectangle, Triplet,
};
use crate::pasio::{
    apply_factor, apply_pasio, canonical_bumps, check_k1, check_k2, KernelModel, SampleSpec,
};
use crate::transforms::{
    area_function_product, decompose, g_function_product, h_norm, lebesgue_norm,
};
use crate::weights::{WeightField, WeightSpec};

/// Everything an experiment run needs. Unset grid sizes fall back to
/// per-experiment defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub dilation1: String,
    pub dilation2: String,
    pub weight: String,
    pub kernel: Option<String>,
    pub points: Option<usize>,
    pub half_width: Option<f64>,
    pub window: Option<(i32, i32)>,
    pub family: String,
    pub count: usize,
    pub frequency: f64,
    pub p: Option<f64>,
    pub q: f64,
    pub order: usize,
    pub tolerance: f64,
    pub delta: f64,
    pub gamma_max: u32,
    pub moments: (usize, usize),
    pub atom_level: i32,
    pub r: Option<f64>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub tsv: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: "norm".into(),
            dilation1: "2".into(),
            dilation2: "2".into(),
            weight: "unit".into(),
            kernel: None,
            points: None,
            half_width: None,
            window: None,
            family: "packets".into(),
            count: 20,
            frequency: 0.375,
            p: None,
            q: 2.0,
            order: 3,
            tolerance: 1e-8,
            delta: 0.0,
            gamma_max: 5,
            moments: (1, 1),
            atom_level: 0,
            r: None,
            seed: 1,
            out: None,
            tsv: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_pair<T: std::str::FromStr>(key: &str, v: &str) -> Result<(T, T)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("`{key}` expects two comma-separated values")))?;
    Ok((parse_num(key, a)?, parse_num(key, b)?))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = ExperimentConfig::default();
        for (_, props) in ini.iter() {
            for (k, v) in props.iter() {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    /// Sets one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "experiment" => self.experiment = v.into(),
            "dilation" => {
                self.dilation1 = v.into();
                self.dilation2 = v.into();
            }
            "dilation1" => self.dilation1 = v.into(),
            "dilation2" => self.dilation2 = v.into(),
            "weight" => self.weight = v.into(),
            "kernel" => self.kernel = Some(v.into()),
            "points" => self.points = Some(parse_num(key, v)?),
            "half_width" => self.half_width = Some(parse_num(key, v)?),
            "window" => self.window = Some(parse_pair(key, v)?),
            "family" => self.family = v.into(),
            "count" => self.count = parse_num(key, v)?,
            "frequency" => self.frequency = parse_num(key, v)?,
            "p" => self.p = Some(parse_num(key, v)?),
            "q" => self.q = parse_num(key, v)?,
            "order" => self.order = parse_num(key, v)?,
            "tolerance" => self.tolerance = parse_num(key, v)?,
            "delta" => self.delta = parse_num(key, v)?,
            "gamma_max" => self.gamma_max = parse_num(key, v)?,
            "moments" => self.moments = parse_pair(key, v)?,
            "atom_level" => self.atom_level = parse_num(key, v)?,
            "r" => self.r = Some(parse_num(key, v)?),
            "seed" => self.seed = parse_num(key, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            "tsv" => self.tsv = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    fn points_or(&self, default: usize) -> usize {
        self.points.unwrap_or(default)
    }

    fn half_width_or(&self, default: f64) -> f64 {
        self.half_width.unwrap_or(default)
    }

    /// Fully resolved parameters for the manifest.
    pub fn resolved(&self) -> Value {
        let (points, half_width, p, kernel) = match self.experiment.as_str() {
            "t12" => (
                self.points_or(65536),
                self.half_width_or(8192.0),
                self.p.unwrap_or(1.0),
                self.kernel_or("tensorcz:profile=logsine"),
            ),
            "t11" => (
                self.points_or(256),
                self.half_width_or(32.0),
                self.p.unwrap_or(2.0),
                self.kernel_or("tensorcz:profile=sign"),
            ),
            _ => (
                self.points_or(256),
                self.half_width_or(32.0),
                self.p.unwrap_or(2.0),
                self.kernel_or(""),
            ),
        };
        json!({
            "experiment": self.experiment,
            "dilation1": self.dilation1,
            "dilation2": self.dilation2,
            "weight": self.weight,
            "kernel": kernel,
            "points": points,
            "half_width": half_width,
            "window": self.window,
            "family": self.family,
            "count": self.count,
            "frequency": self.frequency,
            "p": p,
            "q": self.q,
            "order": self.order,
            "tolerance": self.tolerance,
            "delta": self.delta,
            "gamma_max": self.gamma_max,
            "moments": self.moments,
            "atom_level": self.atom_level,
            "r": self.r,
            "seed": self.seed,
        })
    }

    fn kernel_or(&self, default: &str) -> String {
        self.kernel.clone().unwrap_or_else(|| default.into())
    }
}

/// Parses `"2"` (with `dim` giving `2·I`), or rows `"2,1;0,3"`.
pub fn parse_dilation(text: &str, dim: Option<usize>) -> Result<Dilation> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|r| {
            r.split(',')
                .map(|v| parse_num("matrix", v))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    if rows.len() == 1 && rows[0].len() == 1 {
        let n = dim.unwrap_or(1);
        return Dilation::diagonal(&vec![rows[0][0]; n]);
    }
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("matrix `{text}` is not square")));
    }
    if let Some(d) = dim {
        if d != n {
            return Err(Error::Config(format!(
                "matrix has dimension {n}, --dim says {d}"
            )));
        }
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Dilation::from_rows(n, &flat)
}

/// CSV-style table with a header row.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path, delimiter: u8) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(delimiter)
            .from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

/// Table plus summary of one run.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub table: Table,
    pub summary: Value,
}

/// Gaussian wave packets `Π_i exp(−(x_i−c_i)²/2s²)·cos(2πξ_i x_i + φ_i)` on a
/// product of two 1-D factors, parameters drawn from `seed`.
pub fn wave_packets(grid: &Grid, count: usize, seed: u64, frequency: f64) -> Vec<GridFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = grid
        .half_widths()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    (0..count)
        .map(|_| {
            let params: Vec<(f64, f64, f64, f64)> = (0..grid.dim())
                .map(|_| {
                    let c = span / 8.0 * (2.0 * rng.random::<f64>() - 1.0);
                    let s = 2.0 + rng.random::<f64>();
                    let xi = frequency * (0.9 + 0.2 * rng.random::<f64>());
                    let phase = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                    (c, s, xi, phase)
                })
                .collect();
            GridFunction::from_fn(grid.clone(), move |x| {
                params
                    .iter()
                    .zip(x)
                    .map(|(&(c, s, xi, ph), &t)| {
                        (-(t - c) * (t - c) / (2.0 * s * s)).exp()
                            * (2.0 * std::f64::consts::PI * xi * t + ph).cos()
                    })
                    .product()
            })
        })
        .collect()
}

fn family(cfg: &ExperimentConfig, grid: &Grid) -> Result<Vec<GridFunction>> {
    match cfg.family.as_str() {
        "packets" => Ok(wave_packets(grid, cfg.count, cfg.seed, cfg.frequency)),
        "zero" => Ok((0..cfg.count)
            .map(|_| GridFunction::zeros(grid.clone(), Domain::Space))
            .collect()),
        other => Err(Error::Config(format!("unknown family `{other}`"))),
    }
}

fn one_dim(cfg: &ExperimentConfig) -> Result<(Dilation, Dilation)> {
    let d1 = parse_dilation(&cfg.dilation1, None)?;
    let d2 = parse_dilation(&cfg.dilation2, None)?;
    if d1.dim() != 1 || d2.dim() != 1 {
        return Err(Error::Config(
            "experiments run on 1-D x 1-D product grids".into(),
        ));
    }
    Ok((d1, d2))
}

fn check_weight(spec: &WeightSpec, p: f64) -> Result<()> {
    match spec.critical_index() {
        Some(q) if p <= q && *spec != WeightSpec::Unit => Err(Error::Config(format!(
            "weight has critical index {q}; p = {p} is outside its A_p range"
        ))),
        None => {
            log::warn!(
                "weight {spec:?} has no closed-form critical index; A_p membership not checked"
            );
            Ok(())
        }
        _ => Ok(()),
    }
}

fn common_window(pairs: &[&CalderonPair], requested: Option<(i32, i32)>) -> Result<(i32, i32)> {
    let mut lo = i32::MIN;
    let mut hi = i32::MAX;
    for p in pairs {
        lo = lo.max(p.scales.0);
        hi = hi.min(p.scales.1);
    }
    if let Some((a, b)) = requested {
        lo = lo.max(a);
        hi = hi.min(b);
    }
    if lo > hi {
        return Err(Error::EmptyWindow);
    }
    Ok((lo, hi))
}

/// Norms of `f`, `S f` and `g f` for each function of the family, on the
/// configured grid and on a 2× refinement (same box).
pub fn run_norm_equivalence(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let (d1, d2) = one_dim(cfg)?;
    let p = cfg.p.unwrap_or(2.0);
    if p <= 1.0 {
        return Err(Error::Config("norm equivalence needs p > 1".into()));
    }
    let wspec = WeightSpec::parse(&cfg.weight)?;
    check_weight(&wspec, p)?;
    let n = cfg.points_or(256);
    let half = cfg.half_width_or(32.0);

    let levels = [n, 2 * n];
    let mut built = Vec::new();
    for &pts in &levels {
        let g = Grid::cube(1, pts, half)?;
        let pair1 = build_calderon_pair(&d1, cfg.order, &g, cfg.tolerance)?;
        let pair2 = build_calderon_pair(&d2, cfg.order, &g, cfg.tolerance)?;
        built.push((g, pair1, pair2));
    }
    let window = {
        let pairs: Vec<&CalderonPair> = built.iter().flat_map(|(_, a, b)| [a, b]).collect();
        common_window(&pairs, cfg.window)?
    };

    let mut table = Table::new(&[
        "function", "points", "norm_f", "norm_s", "norm_g", "ratio_s", "ratio_g", "spread",
    ]);
    let mut ratios: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut spread_max: f64 = 0.0;
    let mut truncation: f64 = 0.0;
    for (g, pair1, pair2) in &built {
        let product = g.product(g);
        let w = wspec.build_product(g, g, &d1, &d2)?;
        let fs = family(cfg, &product)?;
        let mut level = Vec::new();
        for (id, f) in fs.iter().enumerate() {
            let nf = lebesgue_norm(f, p, Some(w.values()));
            let area = area_function_product(f, (pair1, pair2), (window, window))?;
            let gfun = g_function_product(f, (pair1, pair2), (window, window))?;
            let ns = lebesgue_norm(&area, p, Some(w.values()));
            let ng = lebesgue_norm(&gfun, p, Some(w.values()));
            if nf == 0.0 {
                table.push(vec![
                    id.to_string(),
                    g.points()[0].to_string(),
                    num(nf),
                    num(ns),
                    num(ng),
                    String::new(),
                    String::new(),
                    String::new(),
                ]);
                continue;
            }
            let (rs, rg) = (ns / nf, ng / nf);
            let trio = [nf, ns, ng];
            let spread = trio.iter().copied().fold(0.0, f64::max)
                / trio.iter().copied().fold(f64::INFINITY, f64::min);
            spread_max = spread_max.max(spread);
            level.push((rs, rg));
            table.push(vec![
                id.to_string(),
                g.points()[0].to_string(),
                num(nf),
                num(ns),
                num(ng),
                num(rs),
                num(rg),
                num(spread),
            ]);
            let dec = crate::transforms::decompose_product(
                f,
                (pair1, pair2),
                (window, window),
                Filter::Psi,
            )?;
            truncation = truncation.max(dec.truncation_energy);
        }
        ratios.push(level);
    }
    let drift = if ratios.len() == 2 && !ratios[0].is_empty() {
        ratios[0]
            .iter()
            .zip(&ratios[1])
            .map(|(a, b)| ((b.0 / a.0 - 1.0).abs()).max((b.1 / a.1 - 1.0).abs()))
            .fold(0.0, f64::max)
    } else {
        0.0
    };
    let all: Vec<f64> = ratios
        .iter()
        .flatten()
        .flat_map(|(a, b)| [*a, *b])
        .collect();
    let summary = json!({
        "window": [window.0, window.1],
        "functions": cfg.count,
        "min_ratio": all.iter().copied().fold(f64::INFINITY, f64::min),
        "max_ratio": all.iter().copied().fold(0.0, f64::max),
        "spread": spread_max,
        "refinement_drift": drift,
        "truncation_energy": truncation,
        "ratios_skipped": all.is_empty(),
    });
    Ok(ExperimentOutput { table, summary })
}

/// `‖Tf‖_{L^p_w}/‖f‖_{L^p_w}` over the family on two grids, after checking
/// the size and pairing conditions of the kernel.
pub fn run_t11(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let (d1, d2) = one_dim(cfg)?;
    let p = cfg.p.unwrap_or(2.0);
    let wspec = WeightSpec::parse(&cfg.weight)?;
    check_weight(&wspec, p)?;
    let kern = KernelModel::from_spec(&cfg.kernel_or("tensorcz:profile=sign"), &d1, &d2)?;
    let k1 = check_k1(
        &kern,
        (0, 0),
        &SampleSpec {
            max_pairs: 2000,
            ..Default::default()
        },
    )?;
    let bumps1 = canonical_bumps(&d1);
    let bumps2 = canonical_bumps(&d2);
    let set1: Vec<&dyn crate::grid::Field> = bumps1.iter().map(|b| b.as_ref()).collect();
    let set2: Vec<&dyn crate::grid::Field> = bumps2.iter().map(|b| b.as_ref()).collect();
    let k2 = check_k2(&kern, (&set1, &set2), ((-2, 2), (-2, 2)))?;

    let n = cfg.points_or(256);
    let half = cfg.half_width_or(32.0);
    let mut table = Table::new(&[
        "function",
        "points",
        "norm_f",
        "norm_tf",
        "ratio",
        "cauchy_gap",
    ]);
    let mut sups = Vec::new();
    for pts in [n, 2 * n] {
        let g = Grid::cube(1, pts, half)?;
        let product = g.product(&g);
        let w = wspec.build_product(&g, &g, &d1, &d2)?;
        let mut sup: f64 = 0.0;
        for (id, f) in family(cfg, &product)?.iter().enumerate() {
            let app = apply_pasio(&kern, f, (cfg.delta, cfg.delta), 1.0)?;
            let nf = lebesgue_norm(f, p, Some(w.values()));
            let nt = lebesgue_norm(&app.tf, p, Some(w.values()));
            let ratio = if nf > 0.0 { nt / nf } else { f64::NAN };
            if ratio.is_finite() {
                sup = sup.max(ratio);
            }
            table.push(vec![
                id.to_string(),
                pts.to_string(),
                num(nf),
                num(nt),
                num(ratio),
                num(app.gap),
            ]);
        }
        sups.push(sup);
    }
    let drift = if sups[0] > 0.0 {
        (sups[1] / sups[0] - 1.0).abs()
    } else {
        0.0
    };
    let summary = json!({
        "kernel": kern.tag(),
        "k1_constant": k1.worst,
        "k2_constant": k2.worst,
        "k2_cauchy_ratio": k2.details.get("cauchy_ratio"),
        "sup_ratio_coarse": sups[0],
        "sup_ratio_fine": sups[1],
        "refinement_drift": drift,
    });
    Ok(ExperimentOutput { table, summary })
}

/// Tail decay of the square-function mass of `T a` outside the enlarged
/// rectangles `R_{1,γ} × R_{2,γ}`, for a tensor atom `a = a1 ⊗ a2`, tensor
/// kernel and product weight. Everything factorizes, so each factor is
/// computed on its own 1-D grid.
pub fn run_t12_decay(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let (d1, d2) = one_dim(cfg)?;
    let p = cfg.p.unwrap_or(1.0);
    let wspec = WeightSpec::parse(&cfg.weight)?;
    let weight_alphas = match wspec {
        WeightSpec::Unit => (0.0, 0.0),
        WeightSpec::ProductPower(a, b) => (a, b),
        WeightSpec::Power(a) => (a, 0.0),
        WeightSpec::ProductSum(..) => {
            return Err(Error::Config(
                "decay experiment needs a separable weight".into(),
            ))
        }
    };
    let q_w = wspec.critical_index().unwrap_or(1.0);
    let r = cfg.r.unwrap_or(q_w * (1.0 + 1e-3));
    if r <= q_w {
        return Err(Error::Config(format!("r = {r} must exceed q_w = {q_w}")));
    }
    let kern = KernelModel::from_spec(&cfg.kernel_or("tensorcz:profile=logsine"), &d1, &d2)?;
    let (kappa1, kappa2) = kern
        .tensor_factors()
        .ok_or_else(|| Error::Config("decay experiment needs a tensor kernel".into()))?;
    let s = cfg.moments;
    let smooth = check_k1(
        &kern,
        (s.0 + 1, s.1 + 1),
        &SampleSpec {
            shells: (-2, 2),
            per_shell: 2,
            max_pairs: 400,
            seed: cfg.seed,
        },
    )?;

    let n = cfg.points_or(65536);
    let half = cfg.half_width_or(8192.0);
    let grid = Grid::cube(1, n, half)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    struct Factor {
        center: Vec<f64>,
        profile: GridFunction,
        weight: Vec<f64>,
        enlargement: Vec<BallRegion>,
        residual: f64,
        norm_q: f64,
    }

    let mut factors = Vec::new();
    for (d, kappa, s_i, alpha) in [
        (&d1, kappa1, s.0, weight_alphas.0),
        (&d2, kappa2, s.1, weight_alphas.1),
    ] {
        let cubes = christ_cubes(d, (cfg.atom_level - 2, cfg.atom_level + 2))?;
        let anchor: f64 = rng.random::<f64>() * 0.5;
        let cube = cubes.cube_containing(&[anchor], cfg.atom_level);
        let coeffs: Vec<(f64, f64)> = (0..6)
            .map(|_| {
                (
                    rng.random::<f64>() - 0.5,
                    2.0 * std::f64::consts::PI * rng.random::<f64>(),
                )
            })
            .collect();
        let center = cubes.center(&cube);
        let c0 = center[0];
        let raw = GridFunction::from_fn(grid.clone(), |x| {
            coeffs
                .iter()
                .enumerate()
                .map(|(m, (a, ph))| a * (m as f64 * (x[0] - c0) / 4.0 + ph).cos())
                .sum()
        });
        let (atom, support) = factor_atom(&raw, &cubes, &cube, s_i)?;
        let residual = moment_residual(&atom, &support.center, s_i)?;
        let w = if alpha == 0.0 {
            WeightField::unit(grid.clone(), d.clone())
        } else {
            WeightField::power(grid.clone(), d.clone(), alpha)?
        };
        let norm_q = lebesgue_norm(&atom, cfg.q, Some(w.values()));

        let ta = apply_factor(kappa, &atom, 0.0)?;
        let pair = build_calderon_pair(d, cfg.order, &grid, cfg.tolerance)?;
        let window = common_window(&[&pair], Some(cfg.window.unwrap_or((-4, 4))))?;
        let coeffs = decompose(&ta, &pair, window, Filter::Psi)?;
        let profile = h_norm(&coeffs)?;

        let mut enlargement = Vec::new();
        for gamma in 0..=cfg.gamma_max {
            let region = BallRegion {
                center: center.clone(),
                scale: cubes.v * (cube.level - 1) + cubes.u + 5 * d.sigma() + gamma as i32,
            };
            let reach = d.bounding_half_widths(region.scale)[0] + region.center[0].abs();
            if reach > half * (1.0 - 1.0 / 16.0) {
                return Err(Error::WindowTooSmall {
                    gamma: gamma as usize,
                });
            }
            enlargement.push(region);
        }
        factors.push(Factor {
            center,
            profile,
            weight: w.values().to_vec(),
            enlargement,
            residual,
            norm_q,
        });
    }

    let cell = grid.cell_volume();
    let masses = |f: &Factor, d: &Dilation| -> Result<(f64, Vec<f64>)> {
        let vals = f.profile.values()?;
        let total: f64 = vals
            .iter()
            .zip(&f.weight)
            .map(|(h, w)| h.abs().powf(p) * w)
            .sum::<f64>()
            * cell;
        let inside = f
            .enlargement
            .iter()
            .map(|region| {
                (0..grid.len())
                    .filter(|&i| region.contains(d, &[grid.coord(0, i)]))
                    .map(|i| vals[i].abs().powf(p) * f.weight[i])
                    .sum::<f64>()
                    * cell
            })
            .collect();
        Ok((total, inside))
    };
    let (t1, in1) = masses(&factors[0], &d1)?;
    let (t2, in2) = masses(&factors[1], &d2)?;

    let mut table = Table::new(&["gamma", "mass", "log_mass", "inside_1", "inside_2"]);
    let mut pts = Vec::new();
    for gamma in 0..=cfg.gamma_max as usize {
        let mass = (t1 * t2 - in1[gamma] * in2[gamma]).max(0.0);
        if mass > 0.0 {
            pts.push((gamma as f64, mass.ln()));
        }
        table.push(vec![
            gamma.to_string(),
            num(mass),
            num(mass.ln()),
            num(in1[gamma]),
            num(in2[gamma]),
        ]);
    }
    let zero_atom = t1 == 0.0 || t2 == 0.0;
    let slope = if zero_atom || pts.len() <= cfg.gamma_max as usize {
        None
    } else {
        crate::pasio::linear_slope(&pts)
    };
    let eta = |d: &Dilation, s_i: usize| p * (s_i as f64 * d.zeta_minus() + 1.0) - r;
    let (eta1, eta2) = (eta(&d1, s.0), eta(&d2, s.1));
    let rate = (eta1 * d1.det_abs().ln()).min(eta2 * d2.det_abs().ln());
    let target = -0.5 * rate;
    let summary = json!({
        "kernel": kern.tag(),
        "kernel_smoothness_constant": smooth.worst,
        "r": r,
        "q_w": q_w,
        "eta1": eta1,
        "eta2": eta2,
        "proven_slope": -rate,
        "target_slope": target,
        "fitted_slope": slope,
        "passes": slope.map(|v| v <= target),
        "fit_skipped": slope.is_none(),
        "atom_centers": [factors[0].center[0], factors[1].center[0]],
        "atom_moment_residual": factors[0].residual.max(factors[1].residual),
        "atom_norm_q": factors[0].norm_q * factors[1].norm_q,
        "moment_orders": multi_indices(1, s.0).len() + multi_indices(1, s.1).len() - 2,
    });
    Ok(ExperimentOutput { table, summary })
}

/// A batch of random rectangular atoms on a 1-D × 1-D grid.
#[derive(Clone, Debug)]
pub struct AtomBatch {
    pub dilations: (Dilation, Dilation),
    pub weight: WeightSpec,
    pub points: usize,
    pub half_width: f64,
    /// Cube levels are drawn from this inclusive range.
    pub levels: (i32, i32),
    pub triplet: Triplet,
    pub count: usize,
    pub seed: u64,
}

impl Default for AtomBatch {
    fn default() -> Self {
        let dyadic = Dilation::scalar(2.0).expect("dyadic dilation");
        AtomBatch {
            dilations: (dyadic.clone(), dyadic),
            weight: WeightSpec::Unit,
            points: 128,
            half_width: 4.0,
            levels: (1, 3),
            triplet: Triplet {
                p: 1.0,
                q: 2.0,
                orders: (1, 1),
            },
            count: 10,
            seed: 1,
        }
    }
}

/// Builds `count` atoms from uniform noise on random rectangles and
/// re-certifies each one from its samples alone.
pub fn random_atoms(batch: &AtomBatch) -> Result<Vec<(RectAtom, AtomCertificate)>> {
    let (d1, d2) = &batch.dilations;
    if d1.dim() != 1 || d2.dim() != 1 {
        return Err(Error::Config(
            "atom batches run on 1-D x 1-D product grids".into(),
        ));
    }
    let cubes1 = christ_cubes(d1, (batch.levels.0 - 1, batch.levels.1 + 1))?;
    let cubes2 = christ_cubes(d2, (batch.levels.0 - 1, batch.levels.1 + 1))?;
    let cubes = ProductCubes {
        first: &cubes1,
        second: &cubes2,
    };
    let g = Grid::cube(1, batch.points, batch.half_width)?;
    let grid = g.product(&g);
    let w = batch.weight.build_product(&g, &g, d1, d2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(batch.seed);
    let reach = batch.half_width / 2.0;
    (0..batch.count)
        .map(|_| {
            let mut pick = |c: &crate::grids_atoms::DyadicGrid| {
                let level = rng.random_range(batch.levels.0..=batch.levels.1);
                let x = reach * (2.0 * rng.random::<f64>() - 1.0);
                c.cube_containing(&[x], level)
            };
            let rect = Rectangle {
                first: pick(&cubes1),
                second: pick(&cubes2),
            };
            let noise: Vec<f64> = (0..grid.len()).map(|_| rng.random::<f64>() - 0.3).collect();
            let f = GridFunction::real(grid.clone(), Domain::Space, noise)?;
            let atom = make_rectangular_atom(&f, &cubes, &rect, &batch.triplet, &w)?;
            let recheck = certify_atom(
                &atom.samples,
                &cubes,
                &rect,
                &atom.support,
                &batch.triplet,
                &w,
            )?;
            Ok((atom, recheck))
        })
        .collect()
}

/// Dispatches on `cfg.experiment` and writes the outputs when `cfg.out` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let result = match cfg.experiment.as_str() {
        "norm" => run_norm_equivalence(cfg),
        "t11" => run_t11(cfg),
        "t12" => run_t12_decay(cfg),
        other => Err(Error::Config(format!("unknown experiment `{other}`"))),
    };
    if let Some(dir) = &cfg.out {
        write_manifest(cfg, dir, result.as_ref().err())?;
        if let Ok(out) = &result {
            write_outputs(cfg, dir, out)?;
        }
    }
    result
}

/// `<experiment>.csv`, optional `.tsv`, and `<experiment>_summary.json`.
pub fn write_outputs(cfg: &ExperimentConfig, dir: &Path, out: &ExperimentOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    out.table
        .write(&dir.join(format!("{}.csv", cfg.experiment)), b',')?;
    if cfg.tsv {
        out.table
            .write(&dir.join(format!("{}.tsv", cfg.experiment)), b'\t')?;
    }
    std::fs::write(
        dir.join(format!("{}_summary.json", cfg.experiment)),
        serde_json::to_string_pretty(&out.summary)?,
    )?;
    Ok(())
}

/// `manifest.json`: resolved config, library version, and the error if the
/// run aborted.
pub fn write_manifest(cfg: &ExperimentConfig, dir: &Path, error: Option<&Error>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut modules = BTreeMap::new();
    modules.insert("anisoprod", env!("CARGO_PKG_VERSION"));
    let doc = json!({
        "config": cfg.resolved(),
        "versions": modules,
        "status": if error.is_some() { "aborted" } else { "ok" },
        "error": error.map(|e| json!({"name": e.name(), "message": e.to_string()})),
    });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&doc)?,
    )?;
    Ok(())
}
