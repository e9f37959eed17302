use anisoprod::calderon::{build_calderon_pair, Filter};
use anisoprod::dilation::Dilation;
use anisoprod::grid::{Domain, Grid, GridFunction};
use anisoprod::grids_atoms::{
    christ_cubes, make_rectangular_atom, ProductCubes, Rectangle, Triplet,
};
use anisoprod::pasio::{
    apply_pasio, check_k1, make_tensor_cz_kernel, FactorKernel, Profile, SampleSpec,
};
use anisoprod::transforms::lebesgue_norm;
use anisoprod::weights::WeightField;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn skewed() -> Dilation {
    Dilation::from_rows(2, &[2.0, 1.0, 0.0, 3.0]).unwrap()
}

fn point2() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, 2)
        .prop_filter("away from origin", |x| x.iter().any(|v| v.abs() > 1e-6))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quasi_norm_is_homogeneous_and_symmetric(x in point2()) {
        let d = skewed();
        let ax = d.apply_power(1, &x);
        prop_assert!((d.quasi_norm(&ax) / d.quasi_norm(&x) - d.det_abs()).abs() < 1e-9);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert_eq!(d.quasi_norm(&neg), d.quasi_norm(&x));
        prop_assert_eq!(d.shell_index(&ax), d.shell_index(&x).map(|k| k + 1));
    }

    #[test]
    fn quasi_triangle_holds(x in point2(), y in point2()) {
        let d = skewed();
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        prop_assert!(d.quasi_norm(&sum) <= d.triangle_constant() * (d.quasi_norm(&x) + d.quasi_norm(&y)) * (1.0 + 1e-12));
    }

    #[test]
    fn agf1_round_trips(values in prop::collection::vec(-1e6..1e6f64, 8)) {
        let g = Grid::new(vec![4, 2], vec![1.0, 2.5]).unwrap();
        let f = GridFunction::real(g, Domain::Space, values).unwrap();
        let mut buf = Vec::new();
        f.write_agf1(&mut buf).unwrap();
        let back = GridFunction::read_agf1(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.values().unwrap(), f.values().unwrap());
        prop_assert_eq!(back.grid, f.grid);
    }

    #[test]
    fn lebesgue_norm_is_absolutely_homogeneous(c in -10.0..10.0f64, p in 1.0..4.0f64) {
        let g = Grid::cube(1, 64, 4.0).unwrap();
        let f = GridFunction::from_fn(g.clone(), |x| (-x[0] * x[0]).exp() * (3.0 * x[0]).sin());
        let cf = GridFunction::from_fn(g, |x| c * (-x[0] * x[0]).exp() * (3.0 * x[0]).sin());
        let (a, b) = (lebesgue_norm(&f, p, None), lebesgue_norm(&cf, p, None));
        prop_assert!((b - c.abs() * a).abs() <= 1e-12 * (1.0 + b));
    }

    #[test]
    fn factor_kernels_are_dilation_homogeneous(x in 1e-3..1e3f64, sign in prop::bool::ANY) {
        let d = Dilation::scalar(2.0).unwrap();
        let x = if sign { x } else { -x };
        for profile in [Profile::Sign, Profile::LogSine] {
            let k = FactorKernel::new(&d, profile).unwrap();
            let (here, there) = (k.eval(&[x]), k.eval(&[2.0 * x]));
            prop_assert!((there * 2.0 - here).abs() <= 1e-10 * here.abs().max(1e-300));
        }
    }

    #[test]
    fn dyadic_cubes_nest_and_contain_their_points(x in -20.0..20.0f64, level in -3i32..3) {
        let cubes = christ_cubes(&Dilation::scalar(2.0).unwrap(), (-4, 4)).unwrap();
        let q = cubes.cube_containing(&[x], level);
        prop_assert!(cubes.contains(&q, &[x]));
        let parent = cubes.ancestor(&q, level - 1);
        prop_assert!(cubes.contains(&parent, &[x]));
        prop_assert!(cubes.sandwich_holds(&q, &[vec![x]]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn calderon_orbit_sum_is_one(t in 0.05..0.95f64) {
        let d = Dilation::scalar(2.0).unwrap();
        let g = Grid::cube(1, 256, 32.0).unwrap();
        let pair = build_calderon_pair(&d, 3, &g, 1e-8).unwrap();
        // one full dyadic period of frequencies
        let xi = [0.25 * 2f64.powf(t)];
        let total: f64 = (-40..40)
            .map(|k| pair.dilated_filter_at(Filter::Psi, k, &xi) * pair.dilated_filter_at(Filter::Theta, k, &xi))
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-8);
    }

    #[test]
    fn nested_samples_never_raise_the_size_constant(seed in 0u64..1000) {
        let d = Dilation::scalar(2.0).unwrap();
        let k = make_tensor_cz_kernel(&d, &d, Profile::LogSine, Profile::LogSine).unwrap();
        let small = SampleSpec { shells: (-2, 2), per_shell: 2, max_pairs: usize::MAX, seed };
        let large = SampleSpec { per_shell: 4, ..small.clone() };
        let (a, b) = (check_k1(&k, (0, 0), &small).unwrap(), check_k1(&k, (0, 0), &large).unwrap());
        prop_assert!(a.worst <= b.worst * (1.0 + 1e-12));
    }

    #[test]
    fn application_is_linear(a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let d = Dilation::scalar(2.0).unwrap();
        let k = make_tensor_cz_kernel(&d, &d, Profile::Sign, Profile::Sign).unwrap();
        let g = Grid::cube(2, 32, 4.0).unwrap();
        let f = |x: &[f64]| x[0] * (-(x[0] * x[0] + x[1] * x[1])).exp();
        let h = |x: &[f64]| (-(x[0] - 1.0).powi(2) - x[1] * x[1]).exp();
        let tf = apply_pasio(&k, &GridFunction::from_fn(g.clone(), f), (0.0, 0.0), 1.0).unwrap().tf;
        let th = apply_pasio(&k, &GridFunction::from_fn(g.clone(), h), (0.0, 0.0), 1.0).unwrap().tf;
        let combo = GridFunction::from_fn(g, |x| a * f(x) + b * h(x));
        let tc = apply_pasio(&k, &combo, (0.0, 0.0), 1.0).unwrap().tf;
        let (u, v, w) = (tf.values().unwrap(), th.values().unwrap(), tc.values().unwrap());
        let scale = w.iter().fold(1.0f64, |m, z| m.max(z.abs()));
        for i in 0..u.len() {
            prop_assert!((a * u[i] + b * v[i] - w[i]).abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn moment_removal_is_idempotent(seed in 0u64..1000) {
        let d = Dilation::scalar(2.0).unwrap();
        let cubes = christ_cubes(&d, (-4, 6)).unwrap();
        let pc = ProductCubes { first: &cubes, second: &cubes };
        let g1 = Grid::cube(1, 128, 4.0).unwrap();
        let grid = g1.product(&g1);
        let w = WeightField::product_unit(&g1, &g1, d.clone(), d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rect = Rectangle {
            first: cubes.cube_containing(&[rng.random_range(-1.5..1.5)], 2),
            second: cubes.cube_containing(&[rng.random_range(-1.5..1.5)], 3),
        };
        let noise: Vec<f64> = (0..grid.len()).map(|_| rng.random::<f64>() - 0.3).collect();
        let f = GridFunction::real(grid, Domain::Space, noise).unwrap();
        let t = Triplet { p: 1.0, q: 2.0, orders: (1, 1) };
        let once = make_rectangular_atom(&f, &pc, &rect, &t, &w).unwrap();
        let twice = make_rectangular_atom(&once.samples, &pc, &rect, &t, &w).unwrap();
        let scale = once.samples.max_abs();
        for (x, y) in once.samples.values().unwrap().iter().zip(twice.samples.values().unwrap()) {
            prop_assert!((x - y).abs() <= 1e-12 * scale);
        }
    }
}
