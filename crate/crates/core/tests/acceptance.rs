//! End-to-end acceptance run. Prints one line per criterion and exits
//! nonzero if any criterion fails.

use std::io::Write;
use std::time::{Duration, Instant};

use anisoprod::bump::{decompose_bump_with, BumpOptions};
use anisoprod::calderon::{build_calderon_pair, moment_check, Filter};
use anisoprod::dilation::{check_ball_sum_law, sample_unit_ball, Dilation};
use anisoprod::fft::circular_convolve;
use anisoprod::grid::{Field, FnField, Grid};
use anisoprod::grids_atoms::christ_cubes;
use anisoprod::harness::{
    random_atoms, run_norm_equivalence, run_t11, run_t12_decay, AtomBatch, ExperimentConfig,
};
use anisoprod::pasio::{
    canonical_bumps, check_k1, check_k2, make_tensor_cz_kernel, smoothed_kernel_bound_check,
    FactorKernel, KernelModel, Profile, SampleSpec, Smoothing,
};
use anisoprod::weights::{ap_constant_estimate, WeightField};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(started: Instant, limit: Duration, detail: String) -> Outcome {
    let spent = started.elapsed();
    ensure(
        spent < limit,
        format!(
            "{detail}; {:.1}s of {}s",
            spent.as_secs_f64(),
            limit.as_secs()
        ),
    )
}

fn dyadic() -> Dilation {
    Dilation::scalar(2.0).unwrap()
}

fn random_expansive(rng: &mut ChaCha8Rng) -> Dilation {
    loop {
        let n = rng.random_range(1..=3);
        let entries: Vec<f64> = (0..n * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut m = DMatrix::from_row_slice(n, n, &entries);
        for i in 0..n {
            m[(i, i)] += if rng.random::<bool>() { 2.0 } else { -2.0 };
        }
        if let Ok(d) = Dilation::new(m) {
            if d.lambda_minus() >= 1.1 && d.lambda_plus() <= 8.0 {
                return d;
            }
        }
    }
}

fn dilation_calculus() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut violations = 0usize;
    let mut dims = Vec::new();
    for _ in 0..10 {
        let d = random_expansive(&mut rng);
        let n = d.dim();
        dims.push(n);
        let b = d.det_abs();
        let h = d.triangle_constant();
        if (h - b.powi(d.sigma())).abs() > 1e-12 * h {
            violations += 1;
        }
        if d.quasi_norm(&vec![0.0; n]) != 0.0 {
            violations += 1;
        }
        let point = |rng: &mut ChaCha8Rng| {
            let k = rng.random_range(-5..=5);
            d.apply_power(k, &sample_unit_ball(rng, n))
        };
        for _ in 0..10_000 {
            let (x, y) = (point(&mut rng), point(&mut rng));
            let rho = d.quasi_norm(&x);
            let positive = x.iter().any(|v| *v != 0.0) == (rho > 0.0);
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            let homogeneous =
                (d.quasi_norm(&d.apply_power(1, &x)) - b * rho).abs() <= 1e-9 * b * rho;
            let sum: Vec<f64> = x.iter().zip(&y).map(|(a, c)| a + c).collect();
            let triangle = d.quasi_norm(&sum) <= h * (rho + d.quasi_norm(&y)) * (1.0 + 1e-12);
            if !(positive && homogeneous && triangle && d.quasi_norm(&neg) == rho) {
                violations += 1;
            }
        }
        for k in -3..=3 {
            for l in -3..=3 {
                if check_ball_sum_law(&d, k, l, 1000, &mut rng).is_err() {
                    violations += 1;
                }
            }
        }
    }
    let detail = format!("10 matrices of dims {dims:?}, {violations} violations");
    ensure(violations == 0, detail.clone())?;
    within(started, Duration::from_secs(60), detail)
}

fn ap_estimator() -> Outcome {
    let started = Instant::now();
    let grid = Grid::cube(1, 1 << 16, 1024.0).unwrap();
    let d = dyadic();
    let unit = WeightField::unit(grid.clone(), d.clone());
    for p in [1.0, 2.0, 4.0] {
        let e = ap_constant_estimate(&unit, p, (-4, 8), 9).map_err(|e| e.to_string())?;
        ensure(
            e.value == 1.0,
            format!("unit weight at p={p} gave {}", e.value),
        )?;
    }
    let mut brackets = Vec::new();
    for p in [1.0f64, 2.0, 4.0] {
        let boundary = p - 1.0;
        let mut flags = Vec::new();
        for step in -6..=6 {
            let alpha = boundary + 0.05 * step as f64;
            if step == 0 {
                continue;
            }
            let w =
                WeightField::power(grid.clone(), d.clone(), alpha).map_err(|e| e.to_string())?;
            let e = ap_constant_estimate(&w, p, (-4, 8), 9).map_err(|e| e.to_string())?;
            flags.push((alpha, e.stable));
        }
        let last_stable = flags
            .iter()
            .filter(|f| f.1)
            .map(|f| f.0)
            .fold(f64::NEG_INFINITY, f64::max);
        let first_unstable = flags
            .iter()
            .filter(|f| !f.1)
            .map(|f| f.0)
            .fold(f64::INFINITY, f64::min);
        let ok = last_stable < first_unstable
            && boundary - last_stable <= 0.1 + 1e-9
            && first_unstable - boundary <= 0.1 + 1e-9;
        brackets.push(format!("p={p}: [{last_stable:.2}, {first_unstable:.2}]"));
        ensure(ok, format!("transition for p={p} at [{last_stable:.2}, {first_unstable:.2}], boundary {boundary}"))?;
    }
    within(
        started,
        Duration::from_secs(120),
        format!("unit weight exact; transitions {}", brackets.join(", ")),
    )
}

fn calderon_pairs() -> Outcome {
    let cases = [
        (dyadic(), Grid::cube(1, 1024, 32.0).unwrap()),
        (
            Dilation::diagonal(&[2.0, 2.0]).unwrap(),
            Grid::cube(2, 512, 32.0).unwrap(),
        ),
        (
            Dilation::diagonal(&[1.5, 4.0]).unwrap(),
            Grid::cube(2, 1024, 16.0).unwrap(),
        ),
    ];
    let mut parts = Vec::new();
    for (d, g) in cases {
        let pair = build_calderon_pair(&d, 3, &g, 1e-8).map_err(|e| e.to_string())?;
        let (residual, _, count) = pair.identity_check(pair.scales);
        ensure(
            residual <= 1e-8 && count > 0,
            format!("identity residual {residual:.2e} on {count} nodes"),
        )?;
        let phi = pair.space_kernel(Filter::Phi, 0);
        let psi = pair.space_kernel(Filter::Psi, 0);
        let conv = circular_convolve(&g, phi.values().unwrap(), phi.values().unwrap());
        let round_trip = conv
            .iter()
            .zip(psi.values().unwrap())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / psi.max_abs();
        ensure(
            round_trip <= 1e-8,
            format!("square-root round trip {round_trip:.2e}"),
        )?;
        // derivatives of the filter at the zero frequency; a windowed Riemann
        // sum would mostly measure truncation of the slowly decaying tail
        let moments = moment_check(&pair.psi_hat, 3);
        ensure(
            moments <= 1e-8,
            format!("moments of psi to order 3: {moments:.2e}"),
        )?;
        parts.push(format!(
            "n={} residual {residual:.1e} round trip {round_trip:.1e} moments {moments:.1e}",
            d.dim()
        ));
    }
    Ok(parts.join("; "))
}

fn gauss(s: f64, x: f64) -> f64 {
    (-x * x / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

fn bump_decomposition() -> Outcome {
    let d = dyadic();
    let psi = FnField::new(1, |x: &[f64]| gauss(0.5, x[0]) - gauss(1.0, x[0]));
    let decay = 4.0;
    let dec = decompose_bump_with(
        &psi,
        &d,
        decay,
        3,
        20,
        &BumpOptions {
            chart_points: 1024,
            tol: 1e-10,
        },
    )
    .map_err(|e| e.to_string())?;
    let sup = gauss(0.5, 0.0) - gauss(1.0, 0.0);
    let reconstruction = (0..=2000)
        .map(|i| -12.0 + 24.0 * i as f64 / 2000.0)
        .map(|x| (dec.reconstruct(&[x]) - psi.eval(&[x])).abs())
        .fold(0.0, f64::max)
        / sup;
    ensure(
        reconstruction <= 1e-8,
        format!("reconstruction error {reconstruction:.2e} of sup"),
    )?;
    for k in 0..=dec.k_max {
        let rep = dec.check_term(k);
        ensure(rep.ok, format!("term {k} fails the bump check: {rep:?}"))?;
        let mean = dec.audit[k as usize].mean_residual;
        ensure(mean <= 1e-10, format!("term {k} mean residual {mean:.2e}"))?;
    }
    let slope = dec.decay_slope().ok_or("no nonzero coefficients")?;
    let limit = -decay * d.det_abs().ln() * 0.95;
    ensure(
        slope <= limit,
        format!("reconstruction {reconstruction:.1e}, 21 terms certified, coefficient slope {slope:.3} (limit {limit:.3})"),
    )
}

fn norm_equivalence() -> Outcome {
    let mut parts = Vec::new();
    for weight in ["unit", "productpower:alpha1=0.3,alpha2=0.3"] {
        let cfg = ExperimentConfig {
            weight: weight.into(),
            p: Some(2.0),
            ..Default::default()
        };
        let out = run_norm_equivalence(&cfg).map_err(|e| e.to_string())?;
        let s = &out.summary;
        let spread = s["spread"].as_f64().unwrap_or(f64::INFINITY);
        let drift = s["refinement_drift"].as_f64().unwrap_or(f64::INFINITY);
        let line = format!("{weight}: spread {spread:.3}, drift {:.2}%", 100.0 * drift);
        ensure(
            spread <= 10.0 && drift <= 0.1 && s["ratios_skipped"] == false,
            line.clone(),
        )?;
        parts.push(line);
    }
    Ok(parts.join("; "))
}

fn kernel_conditions() -> Outcome {
    let d = dyadic();
    let hilbert =
        make_tensor_cz_kernel(&d, &d, Profile::Sign, Profile::Sign).map_err(|e| e.to_string())?;
    let k1 = check_k1(&hilbert, (0, 0), &SampleSpec::default()).map_err(|e| e.to_string())?;
    ensure(
        k1.worst <= 1.0 + 1e-6 && (k1.worst - 1.0).abs() <= 1e-6,
        format!("K1 constant {}", k1.worst),
    )?;
    let bumps = canonical_bumps(&d);
    let set: Vec<&dyn Field> = bumps.iter().map(|b| b.as_ref()).collect();
    let k2 = check_k2(&hilbert, (&set, &set), ((-2, 2), (-2, 2))).map_err(|e| e.to_string())?;
    let ratio = k2.details["cauchy_ratio"];
    let limit = 1.0 / d.det_abs() + 0.1;
    ensure(
        ratio <= limit,
        format!("K2 Cauchy ratio {ratio:.3} above {limit}"),
    )?;
    let flat = KernelModel::tensor_unchecked(
        FactorKernel::new(&d, Profile::Constant).unwrap(),
        FactorKernel::new(&d, Profile::Constant).unwrap(),
    );
    let rejected = check_k2(&flat, (&set, &set), ((0, 0), (0, 0)));
    let name = rejected
        .as_ref()
        .err()
        .map(|e| e.name())
        .unwrap_or("accepted");
    ensure(
        name == "PVNotConvergent",
        format!("constant kernel gave {name}"),
    )?;
    Ok(format!(
        "K1 constant {:.9}, K2 Cauchy ratio {ratio:.3}, constant kernel rejected",
        k1.worst
    ))
}

fn odd_bump() -> impl Field {
    FnField::new(1, |x: &[f64]| {
        let t = 2.0 * x[0];
        if t.abs() >= 1.0 {
            0.0
        } else {
            t * (-1.0 / (1.0 - t * t)).exp() * std::f64::consts::E
        }
    })
}

fn far_field_decay() -> Outcome {
    let d = dyadic();
    let kern = make_tensor_cz_kernel(&d, &d, Profile::LogSine, Profile::LogSine)
        .map_err(|e| e.to_string())?;
    let phi = odd_bump();
    let sm = Smoothing {
        phi: &phi,
        support: 0,
        scale: 0,
        ells: (-3..=12).collect(),
    };
    let rep = smoothed_kernel_bound_check(&kern, &sm, &sm).map_err(|e| e.to_string())?;
    let regimes = rep.regimes.iter().filter(|r| r.is_some()).count();
    ensure(
        regimes == 4,
        format!("only {regimes} of 4 regimes exercised"),
    )?;
    let mut parts = Vec::new();
    for (slope, expected) in [
        (rep.slopes.0, rep.expected.0),
        (rep.slopes.1, rep.expected.1),
    ] {
        let slope = slope.ok_or("far-field fit skipped")?;
        let rel = (slope / expected - 1.0).abs();
        ensure(rel <= 0.1, format!("slope {slope:.3} vs {expected:.3}"))?;
        parts.push(format!("{slope:.3} vs {expected:.3}"));
    }
    Ok(format!("all 4 regimes, slopes {}", parts.join(" and ")))
}

fn operator_boundedness() -> Outcome {
    let started = Instant::now();
    let mut parts = Vec::new();
    for weight in ["unit", "productpower:alpha1=0.5,alpha2=0"] {
        let cfg = ExperimentConfig {
            experiment: "t11".into(),
            weight: weight.into(),
            ..Default::default()
        };
        let out = run_t11(&cfg).map_err(|e| e.to_string())?;
        let s = &out.summary;
        let (coarse, fine) = (
            s["sup_ratio_coarse"].as_f64().unwrap_or(f64::NAN),
            s["sup_ratio_fine"].as_f64().unwrap_or(f64::NAN),
        );
        let drift = s["refinement_drift"].as_f64().unwrap_or(f64::INFINITY);
        let line = format!(
            "{weight}: sup {coarse:.4} -> {fine:.4}, drift {:.2}%",
            100.0 * drift
        );
        ensure(
            coarse.is_finite() && fine.is_finite() && drift <= 0.2,
            line.clone(),
        )?;
        parts.push(line);
    }
    within(started, Duration::from_secs(300), parts.join("; "))
}

fn atom_tail_decay() -> Outcome {
    let started = Instant::now();
    let cfg = ExperimentConfig {
        experiment: "t12".into(),
        ..Default::default()
    };
    let out = run_t12_decay(&cfg).map_err(|e| e.to_string())?;
    let s = &out.summary;
    let slope = s["fitted_slope"].as_f64().ok_or("slope fit skipped")?;
    let eta1 = s["eta1"].as_f64().unwrap_or(f64::NAN);
    let needed = 0.5 * eta1 * 2f64.ln();
    let first_mass: f64 = out.table.rows[0][1]
        .parse()
        .map_err(|_| "unreadable mass")?;
    let detail =
        format!("slope {slope:.3}, required magnitude {needed:.3}, gamma=0 mass {first_mass:.3e}");
    ensure(
        slope < 0.0 && slope.abs() >= needed && first_mass > 0.0 && s["passes"] == true,
        detail.clone(),
    )?;
    within(started, Duration::from_secs(300), detail)
}

fn atoms_and_cubes() -> Outcome {
    let batch = AtomBatch {
        count: 50,
        seed: 7,
        ..Default::default()
    };
    let atoms = random_atoms(&batch).map_err(|e| e.to_string())?;
    let mut worst_moment: f64 = 0.0;
    let mut worst_norm: f64 = 0.0;
    for (atom, recheck) in &atoms {
        ensure(
            recheck.valid(),
            format!(
                "atom on {:?} failed re-certification: {recheck:?}",
                atom.rect
            ),
        )?;
        worst_moment = worst_moment.max(recheck.moment_residual);
        worst_norm = worst_norm
            .max((recheck.norm - atom.certificate.norm).abs() / atom.certificate.norm.max(1e-300));
    }
    ensure(
        atoms.len() == 50 && worst_moment <= 1e-10 && worst_norm <= 1e-10,
        format!(
            "{} atoms, moments {worst_moment:.1e}, norm mismatch {worst_norm:.1e}",
            atoms.len()
        ),
    )?;
    let mut sandwich = Vec::new();
    for d in [dyadic(), Dilation::diagonal(&[2.0, 4.0]).unwrap()] {
        let cubes = christ_cubes(&d, (-3, 3)).map_err(|e| e.to_string())?;
        let cert = cubes.certify(20, 50, 5);
        ensure(
            cert.violations == 0 && cert.cubes > 0,
            format!("sandwich violations {cert:?}"),
        )?;
        sandwich.push(format!("n={}: {} cubes", d.dim(), cert.cubes));
    }
    Ok(format!(
        "50 atoms re-certified (moments {worst_moment:.1e}, norm mismatch {worst_norm:.1e}); sandwich holds ({})",
        sandwich.join(", ")
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("dilation calculus", dilation_calculus),
        ("A_p estimator", ap_estimator),
        ("filter pairs", calderon_pairs),
        ("bump decomposition", bump_decomposition),
        ("square-function equivalence", norm_equivalence),
        ("kernel conditions", kernel_conditions),
        ("smoothed far-field decay", far_field_decay),
        ("operator boundedness", operator_boundedness),
        ("atom tail decay", atom_tail_decay),
        ("atoms and cubes", atoms_and_cubes),
    ];
    let mut failed = 0;
    let mut stdout = std::io::stdout();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        writeln!(
            stdout,
            "criterion {:>2} {tag} [{name}] {detail} ({:.1}s)",
            i + 1,
            started.elapsed().as_secs_f64()
        )
        .unwrap();
    }
    writeln!(
        stdout,
        "acceptance: {} of {} criteria pass",
        criteria.len() - failed,
        criteria.len()
    )
    .unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}
