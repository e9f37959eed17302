use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anisoprod::bump::decompose_bump;
use anisoprod::calderon::build_calderon_pair;
use anisoprod::error::{Error, Result};
use anisoprod::grid::{Field, FnField, Grid, GridFunction};
use anisoprod::grids_atoms::Triplet;
use anisoprod::harness::{
    parse_dilation, random_atoms, run_experiment, wave_packets, AtomBatch, ExperimentConfig,
};
use anisoprod::pasio::{
    apply_pasio, canonical_bumps, check_derived_conditions, check_difference_conditions, check_k1,
    check_k2, check_k3, smoothed_kernel_bound_check, KernelModel, SampleSpec, Smoothing,
};
use anisoprod::transforms::lebesgue_norm;
use anisoprod::weights::{ap_constant_estimate, product_ap_estimate, WeightSpec};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "anisoprod",
    version,
    about = "Anisotropic product-space harmonic analysis toolkit"
)]
struct Cli {
    /// Key-value config file (used by `experiment`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for CSV/JSON/AGF files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Describe a dilation matrix: determinant, ellipsoid form, sigma, eigenvalue moduli.
    Dilation {
        /// `"2"` or rows like `"2,0;0,4"`.
        #[arg(long)]
        matrix: String,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Estimate the A_p constant of a weight.
    Weights {
        #[arg(long, default_value = "unit")]
        weight: String,
        #[arg(long, default_value = "2")]
        dilation: String,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
        #[arg(long, default_value_t = 512)]
        points: usize,
        #[arg(long, default_value_t = 32.0)]
        half_width: f64,
        #[arg(long, default_value = "-4,4", allow_hyphen_values = true)]
        window: String,
        #[arg(long, default_value_t = 64)]
        translates: usize,
    },
    /// Build a Calderón pair and report its certified scales.
    Calderon {
        #[arg(long, default_value = "2")]
        dilation: String,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long, default_value_t = 32.0)]
        half_width: f64,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Bump decomposition of the Gaussian difference g(0.5) - g(1).
    Decompose {
        #[arg(long, default_value = "2")]
        dilation: String,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = 4.0)]
        decay: f64,
        #[arg(long, default_value_t = 3)]
        derivs: usize,
        #[arg(long, default_value_t = 20)]
        k_max: i32,
    },
    /// Check one kernel condition and print the JSON report.
    KernelCheck {
        #[arg(long, default_value = "tensorcz:profile=sign")]
        kernel: String,
        #[arg(long, default_value = "2")]
        dilation1: String,
        #[arg(long, default_value = "2")]
        dilation2: String,
        #[arg(long, value_enum)]
        cond: Condition,
        #[arg(long, default_value = "0,0")]
        orders: String,
        #[arg(long, default_value = "-2,2", allow_hyphen_values = true)]
        k_range: String,
    },
    /// Apply a product singular integral to a function (AGF1 file or a seeded wave packet).
    Apply {
        #[arg(long, default_value = "tensorcz:profile=sign")]
        kernel: String,
        #[arg(long, default_value = "2")]
        dilation1: String,
        #[arg(long, default_value = "2")]
        dilation2: String,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        points: usize,
        #[arg(long, default_value_t = 16.0)]
        half_width: f64,
        #[arg(long, default_value = "0,0")]
        delta: String,
        /// Largest accepted Cauchy gap against the finer truncation.
        #[arg(long, default_value_t = 1.0)]
        tol: f64,
    },
    /// Build and certify random rectangular atoms.
    Atoms {
        #[arg(long, default_value = "2")]
        dilation1: String,
        #[arg(long, default_value = "2")]
        dilation2: String,
        #[arg(long, default_value = "unit")]
        weight: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        points: usize,
        #[arg(long, default_value_t = 4.0)]
        half_width: f64,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        #[arg(long, default_value_t = 2.0)]
        q: f64,
        #[arg(long, default_value = "1,1")]
        moments: String,
    },
    /// Run the experiment described by --config.
    Experiment {
        /// Also write a tab-separated copy of the table.
        #[arg(long)]
        tsv: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Condition {
    #[value(name = "K1")]
    K1,
    #[value(name = "K2")]
    K2,
    #[value(name = "K3")]
    K3,
    Difference,
    Derived,
    Smoothed,
}

fn pair<T: std::str::FromStr>(name: &str, text: &str) -> Result<(T, T)> {
    let bad = || {
        Error::Config(format!(
            "--{name} expects two comma-separated values, got `{text}`"
        ))
    };
    let (a, b) = text.split_once(',').ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        // a closed reader (`| head`) is not an error
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn write_json(out: Option<&Path>, name: &str, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), serde_json::to_string_pretty(value)?)?;
    }
    Ok(())
}

fn gaussian(scale: f64, x: &[f64]) -> f64 {
    let n = x.len() as i32;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    (-r2 / (2.0 * scale * scale)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * scale).powi(n)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let out = cli.out.as_deref();
    match cli.command {
        Command::Dilation { matrix, dim } => {
            let d = parse_dilation(&matrix, dim)?;
            println!("{}", d.to_json());
        }
        Command::Weights {
            weight,
            dilation,
            p,
            points,
            half_width,
            window,
            translates,
        } => {
            let d = parse_dilation(&dilation, None)?;
            let spec = WeightSpec::parse(&weight)?;
            let window: (i32, i32) = pair("window", &window)?;
            let report = match spec {
                WeightSpec::ProductPower(..) | WeightSpec::ProductSum(..) => {
                    let g = Grid::cube(d.dim(), points, half_width)?;
                    let w = spec.build_product(&g, &g, &d, &d)?;
                    serde_json::to_value(product_ap_estimate(
                        &w,
                        p,
                        (window, window),
                        translates,
                        16,
                    )?)?
                }
                _ => {
                    let g = Grid::cube(d.dim(), points, half_width)?;
                    let w = spec.build(&g, &d)?;
                    serde_json::to_value(ap_constant_estimate(&w, p, window, translates)?)?
                }
            };
            write_json(out, "weights.json", &report)?;
            print_json(&report)?;
        }
        Command::Calderon {
            dilation,
            dim,
            points,
            half_width,
            order,
            tol,
        } => {
            let d = parse_dilation(&dilation, dim)?;
            let g = Grid::cube(d.dim(), points, half_width)?;
            let pair = build_calderon_pair(&d, order, &g, tol)?;
            let report = json!({
                "scales": [pair.scales.0, pair.scales.1],
                "identity_residual": pair.identity_residual,
                "worst_xi": pair.worst_xi,
                "certified_nodes": pair.certified_nodes,
                "order": pair.order(),
            });
            if let Some(dir) = out {
                std::fs::create_dir_all(dir)?;
                pair.psi_hat.save(&dir.join("psi_hat.agf"))?;
                pair.theta_hat.save(&dir.join("theta_hat.agf"))?;
                pair.phi_hat.save(&dir.join("phi_hat.agf"))?;
            }
            write_json(out, "calderon.json", &report)?;
            print_json(&report)?;
        }
        Command::Decompose {
            dilation,
            dim,
            decay,
            derivs,
            k_max,
        } => {
            let d = parse_dilation(&dilation, dim)?;
            let psi = FnField::new(d.dim(), |x: &[f64]| gaussian(0.5, x) - gaussian(1.0, x));
            let dec = decompose_bump(&psi, &d, decay, derivs, k_max)?;
            let report = json!({
                "c": dec.c,
                "decay": dec.decay,
                "decay_slope": dec.decay_slope(),
                "tail_bound": dec.tail_bound(),
                "terms": dec.audit,
            });
            if let Some(dir) = out {
                dec.save(dir)?;
            }
            print_json(&report)?;
        }
        Command::KernelCheck {
            kernel,
            dilation1,
            dilation2,
            cond,
            orders,
            k_range,
        } => {
            let d1 = parse_dilation(&dilation1, None)?;
            let d2 = parse_dilation(&dilation2, None)?;
            let kern = KernelModel::from_spec(&kernel, &d1, &d2)?;
            let orders: (usize, usize) = pair("orders", &orders)?;
            let k_range: (i32, i32) = pair("k-range", &k_range)?;
            let spec = SampleSpec {
                seed: seed.unwrap_or(SampleSpec::default().seed),
                ..Default::default()
            };
            let b1 = canonical_bumps(&d1);
            let b2 = canonical_bumps(&d2);
            let s1: Vec<&dyn Field> = b1.iter().map(|b| b.as_ref()).collect();
            let s2: Vec<&dyn Field> = b2.iter().map(|b| b.as_ref()).collect();
            let text = match cond {
                Condition::K1 => check_k1(&kern, orders, &spec)?.to_json(),
                Condition::K2 => check_k2(&kern, (&s1, &s2), (k_range, k_range))?.to_json(),
                Condition::K3 => check_k3(&kern, (&s1, &s2), k_range, &spec)?.to_json(),
                Condition::Difference => {
                    check_difference_conditions(&kern, kern.eps, &spec)?.to_json()
                }
                Condition::Derived => check_derived_conditions(&kern, orders, &spec)?.to_json(),
                Condition::Smoothed => {
                    let ells: Vec<i32> = (-3..=12).collect();
                    let sm1 = Smoothing {
                        phi: s1[1],
                        support: 0,
                        scale: 0,
                        ells: ells.clone(),
                    };
                    let sm2 = Smoothing {
                        phi: s2[1],
                        support: 0,
                        scale: 0,
                        ells,
                    };
                    let rep = smoothed_kernel_bound_check(&kern, &sm1, &sm2)?;
                    let mut doc: serde_json::Value = serde_json::from_str(&rep.report.to_json())?;
                    doc["regimes"] = json!(rep.regimes);
                    doc["slopes"] = json!([rep.slopes.0, rep.slopes.1]);
                    doc["expected_slopes"] = json!([rep.expected.0, rep.expected.1]);
                    serde_json::to_string_pretty(&doc)?
                }
            };
            if let Some(dir) = out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("condition.json"), &text)?;
            }
            println!("{text}");
        }
        Command::Apply {
            kernel,
            dilation1,
            dilation2,
            input,
            points,
            half_width,
            delta,
            tol,
        } => {
            let d1 = parse_dilation(&dilation1, None)?;
            let d2 = parse_dilation(&dilation2, None)?;
            let kern = KernelModel::from_spec(&kernel, &d1, &d2)?;
            let f = match input {
                Some(path) => GridFunction::load(&path)?,
                None => {
                    let g = Grid::cube(1, points, half_width)?;
                    let product = g.product(&g);
                    wave_packets(&product, 1, seed.unwrap_or(1), 0.375).remove(0)
                }
            };
            let delta: (f64, f64) = pair("delta", &delta)?;
            let app = apply_pasio(&kern, &f, delta, tol)?;
            let report = json!({
                "kernel": kern.tag(),
                "delta": [delta.0, delta.1],
                "cauchy_gap": app.gap,
                "norm_f": lebesgue_norm(&f, 2.0, None),
                "norm_tf": lebesgue_norm(&app.tf, 2.0, None),
            });
            if let Some(dir) = out {
                std::fs::create_dir_all(dir)?;
                app.tf.save(&dir.join("tf.agf"))?;
            }
            write_json(out, "apply.json", &report)?;
            print_json(&report)?;
        }
        Command::Atoms {
            dilation1,
            dilation2,
            weight,
            count,
            points,
            half_width,
            p,
            q,
            moments,
        } => {
            let batch = AtomBatch {
                dilations: (
                    parse_dilation(&dilation1, None)?,
                    parse_dilation(&dilation2, None)?,
                ),
                weight: WeightSpec::parse(&weight)?,
                points,
                half_width,
                triplet: Triplet {
                    p,
                    q,
                    orders: pair("moments", &moments)?,
                },
                count,
                seed: seed.unwrap_or(1),
                ..Default::default()
            };
            let atoms = random_atoms(&batch)?;
            let rows: Vec<serde_json::Value> = atoms
                .iter()
                .map(|(atom, recheck)| json!({"rectangle": atom.rect, "certificate": recheck, "valid": recheck.valid()}))
                .collect();
            if let Some(dir) = out {
                for (i, (atom, _)) in atoms.iter().enumerate() {
                    atom.save(&dir.join(format!("atom_{i:03}")))?;
                }
            }
            let report = json!({
                "count": atoms.len(),
                "valid": atoms.iter().filter(|(_, c)| c.valid()).count(),
                "atoms": rows,
            });
            write_json(out, "atoms.json", &report)?;
            print_json(&report)?;
        }
        Command::Experiment { tsv } => {
            let path = cli
                .config
                .ok_or_else(|| Error::Config("experiment needs --config <file>".into()))?;
            let mut cfg = ExperimentConfig::load(&path)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(dir) = out {
                cfg.out = Some(dir.to_path_buf());
            }
            cfg.tsv |= tsv;
            let result = run_experiment(&cfg)?;
            print_json(&result.summary)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("Config: cannot set thread count: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.name());
            ExitCode::from(1)
        }
    }
}
