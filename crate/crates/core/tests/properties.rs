use std::f64::consts::PI;

use proptest::prelude::*;
use ratstab_core::certify::{
    find_theta_min, krasovskii_value, rational_bound, ConditionReport, FunctionalSpec, StabilityParams, Transform,
};
use ratstab_core::exprlang::{eval, parse, BinOp, Expr, Func, Var};
use ratstab_core::matops::{
    build_companion, delta_theta, lyapunov_residual, solve_lyapunov, symmetric_eigenvalues, Matrix,
};
use ratstab_core::sysmodel::{
    estimate_lipschitz, make_nonlinearity, scale_gains, DomainBox, LipschitzProbe, NonlinearitySource,
};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

/// Orthogonal `Q` from a product of Givens rotations.
fn rotation(n: usize, angles: &[f64]) -> Matrix {
    let mut q = Matrix::identity(n).unwrap();
    let mut k = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let (c, s) = (angles[k].cos(), angles[k].sin());
            let mut g = Matrix::identity(n).unwrap();
            g[(i, i)] = c;
            g[(j, j)] = c;
            g[(i, j)] = -s;
            g[(j, i)] = s;
            q = q.matmul(&g);
            k += 1;
        }
    }
    q
}

proptest! {
    #![proptest_config(config(200))]

    #[test]
    fn lyapunov_solution_on_random_stable_matrices(
        n in 1usize..=5,
        decay in prop::collection::vec(0.2f64..5.0, 5),
        coupling in prop::collection::vec(-2.0f64..2.0, 25),
        angles in prop::collection::vec(0.0f64..(2.0 * PI), 10),
    ) {
        // A = Q (−D + N) Qᵀ with N strictly upper triangular is Hurwitz.
        let mut inner = Matrix::zeros(n).unwrap();
        for i in 0..n {
            inner[(i, i)] = -decay[i];
            for j in (i + 1)..n {
                inner[(i, j)] = coupling[i * 5 + j];
            }
        }
        let q = rotation(n, &angles);
        let a = q.matmul(&inner).matmul(&q.transpose());
        let cert = solve_lyapunov(&a).unwrap();
        let scale = 1.0 + a.max_abs() * cert.solution.max_abs();
        prop_assert!(cert.residual <= 1e-10 * scale, "residual {}", cert.residual);
        prop_assert!((lyapunov_residual(&a, &cert.solution) - cert.residual).abs() <= 1e-12 * scale);
        prop_assert!(cert.min_eig > 0.0);
        prop_assert!(cert.solution.asymmetry() == 0.0);
    }

    #[test]
    fn unstable_spectra_are_rejected(
        n in 1usize..=4,
        shift in 0.1f64..3.0,
        angles in prop::collection::vec(0.0f64..(2.0 * PI), 6),
    ) {
        let mut d = Matrix::identity(n).unwrap().scale(-1.0);
        d[(n - 1, n - 1)] = shift;
        let q = rotation(n, &angles);
        let a = q.matmul(&d).matmul(&q.transpose());
        prop_assert!(solve_lyapunov(&a).is_err());
    }

    #[test]
    fn scaled_gains_are_conjugations(
        n in 1usize..=6,
        theta in 0.5f64..10.0,
        raw in prop::collection::vec(-3.0f64..3.0, 12),
    ) {
        let (l, k) = (&raw[..n], &raw[6..6 + n]);
        let (l_theta, k_theta) = scale_gains(l, k, theta).unwrap();
        let (a, b, c) = build_companion(n).unwrap();
        let delta = delta_theta(theta, n).unwrap();
        let delta_inv = delta_theta(1.0 / theta, n).unwrap();
        // Δ⁻¹ (A + L C) Δ = θ⁻¹ (A + L(θ) C)
        let lhs = delta_inv.matmul(&a.add_outer(l, &c)).matmul(&delta).scale(theta);
        let rhs = a.add_outer(&l_theta, &c);
        prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-9 * (1.0 + rhs.max_abs()));
        // Δ⁻¹ (A + B K) Δ = θ⁻¹ (A + B K(θ))
        let lhs = delta_inv.matmul(&a.add_outer(&b, k)).matmul(&delta).scale(theta);
        let rhs = a.add_outer(&b, &k_theta);
        prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-9 * (1.0 + rhs.max_abs()));
    }

    #[test]
    fn rational_bound_is_monotone(
        lambda1 in 0.05f64..5.0,
        lambda2 in 0.05f64..5.0,
        lambda3 in 0.05f64..5.0,
        r1 in 0.5f64..4.0,
        r2 in 0.5f64..4.0,
        k in 0.1f64..3.0,
        phi in 0.05f64..10.0,
        t in 0.0f64..50.0,
        dt in 0.01f64..10.0,
        dphi in 0.01f64..5.0,
    ) {
        let p = StabilityParams::new(lambda1, lambda2, lambda3, r1, r2, k).unwrap();
        let base = rational_bound(&p, phi, t);
        prop_assert!(rational_bound(&p, phi, t + dt) < base);
        prop_assert!(rational_bound(&p, phi + dphi, t) > base);
    }

    #[test]
    fn functional_sandwich_holds(
        diag in prop::collection::vec(0.2f64..3.0, 3),
        angles in prop::collection::vec(0.0f64..(2.0 * PI), 3),
        theta in 1.1f64..10.0,
        samples in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 11),
    ) {
        let q = rotation(3, &angles);
        let p = q.matmul(&Matrix::diag(&diag).unwrap()).matmul(&q.transpose()).symmetrized();
        let spec = FunctionalSpec::new(p, theta, 1.0, Transform::State).unwrap();
        let (lo, hi) = spec.sandwich_constants();
        let v = krasovskii_value(&spec, 0.1, &samples).unwrap();
        let sq = |s: &Vec<f64>| s.iter().map(|x| x * x).sum::<f64>();
        let now = sq(samples.last().unwrap());
        let peak = samples.iter().map(sq).fold(0.0, f64::max);
        prop_assert!(lo * now <= v + 1e-6, "{} > {v}", lo * now);
        prop_assert!(v <= hi * peak + 1e-6, "{v} > {}", hi * peak);
    }

    #[test]
    fn synthesized_theta_brackets_the_boundary(
        k in 0.05f64..1.0,
        norm_p in 0.5f64..2.0,
        norm_s in 0.5f64..2.0,
    ) {
        let tol = 1e-6;
        if let Ok(theta) = find_theta_min(1.0, norm_p, norm_s, k, 200.0, tol) {
            prop_assert!(ConditionReport::evaluate(theta, 1.0, norm_p, norm_s, k).all_ok());
            if theta > 1.0 {
                let below = ConditionReport::evaluate(theta - tol, 1.0, norm_p, norm_s, k);
                prop_assert!(!below.all_ok());
            }
        }
    }
}

fn arb_var() -> impl Strategy<Value = Var> {
    prop_oneof![
        (1usize..=12).prop_map(Var::X),
        (1usize..=12).prop_map(Var::Xd),
        Just(Var::U),
        Just(Var::T),
    ]
}

fn arb_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (0.0f64..1e6).prop_map(Expr::Num),
        prop::sample::select(vec![0.0, 1.0, 0.5, 1e-12, 3e20, 123456.789]).prop_map(Expr::Num),
        arb_var().prop_map(Expr::Var),
    ];
    leaf.prop_recursive(6, 64, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
            (prop::sample::select(Func::ALL.to_vec()), inner.clone())
                .prop_map(|(f, e)| Expr::Call(f, Box::new(e))),
            (
                prop::sample::select(vec![BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div, BinOp::Pow]),
                inner.clone(),
                inner
            )
                .prop_map(|(op, l, r)| Expr::Binary(op, Box::new(l), Box::new(r))),
        ]
    })
}

proptest! {
    #![proptest_config(config(1000))]

    #[test]
    fn printed_expressions_parse_back(e in arb_expr()) {
        let text = e.to_string();
        prop_assert_eq!(parse(&text).unwrap(), e, "{}", text);
    }

    #[test]
    fn parser_never_panics_on_bytes(bytes in prop::collection::vec(any::<u8>(), 0..4096)) {
        let text = String::from_utf8_lossy(&bytes);
        let _ = parse(&text);
    }

    #[test]
    fn parser_never_panics_on_token_soup(
        tokens in prop::collection::vec(
            prop::sample::select(vec![
                "x1", "xd2", "u", "t", "(", ")", "+", "-", "*", "/", "^", "sin", "cos(", "1.5", "2e3", " ", "x", "foo(", ".", "e",
            ]),
            0..1024,
        )
    ) {
        let text: String = tokens.concat();
        let _ = parse(&text);
    }

    #[test]
    fn expression_matches_builtin_example(
        x1 in -20.0f64..20.0,
        x2 in -20.0f64..20.0,
        xd1 in -20.0f64..20.0,
        xd2 in -20.0f64..20.0,
        u in -1e4f64..1e4,
    ) {
        let builtin = make_nonlinearity(&NonlinearitySource::Registry { name: "paper_example".into(), n: 2 }).unwrap();
        let parsed = make_nonlinearity(&NonlinearitySource::Expressions(vec![
            "x1*cos(x1) + xd1*cos(u)".into(),
            "0".into(),
        ]))
        .unwrap();
        let (x, xd) = ([x1, x2], [xd1, xd2]);
        let want = builtin.eval(&x, &xd, u);
        let got = parsed.eval(&x, &xd, u);
        for i in 0..2 {
            prop_assert!((want[i] - got[i]).abs() <= 1e-15, "{want:?} vs {got:?}");
        }
    }
}

#[test]
fn deep_nesting_is_an_error_not_a_crash() {
    let text = format!("{}1{}", "(".repeat(4096), ")".repeat(4096));
    assert!(parse(&text).is_err());
    let text = "-".repeat(4096) + "1";
    assert!(parse(&text).is_err());
    let text = "2^".repeat(2000) + "1";
    assert!(parse(&text).is_err());
}

#[test]
fn precedence_goldens() {
    let value = |s: &str| eval(&parse(s).unwrap(), &|_| None).unwrap();
    assert_eq!(value("1+2*3"), 7.0);
    assert_eq!(value("2^3^2"), 512.0);
    assert_eq!(value("-2^2"), -4.0);
    assert_eq!(value("(1+2)*3"), 9.0);
    assert_eq!(value("8/4/2"), 1.0);
    assert_eq!(value("2^-1"), 0.5);
}

/// `max |d/dx (x cos x)| = max |cos x − x sin x|` on a dense grid.
fn grid_slope_max(radius: f64) -> f64 {
    let n = 2_000_000;
    (0..=n)
        .map(|i| -radius + 2.0 * radius * i as f64 / n as f64)
        .map(|x| (x.cos() - x * x.sin()).abs())
        .fold(0.0, f64::max)
}

#[test]
fn lipschitz_estimate_matches_grid_oracle() {
    let oracle = grid_slope_max(20.0);
    assert!((oracle - 17.9).abs() <= 0.5, "{oracle}");
    let f = make_nonlinearity(&NonlinearitySource::Registry { name: "paper_example".into(), n: 2 }).unwrap();
    let mut domain = DomainBox::symmetric(2, 20.0);
    // u ≈ 0 keeps cos u ≈ 1 so the delayed term contributes a unit slope
    domain.input = (-1e-9, 1e-9);
    let est = estimate_lipschitz(f.as_ref(), &domain, 20_000, 7).unwrap();
    // the Jacobian norm also sees the delayed column, so allow the ½-width band above the x-partial
    assert!(est >= oracle - 0.5 && est <= (oracle * oracle + 1.0).sqrt() + 0.5, "{est} vs {oracle}");
}

#[test]
fn lipschitz_estimate_grows_with_the_box() {
    let f = make_nonlinearity(&NonlinearitySource::Registry { name: "paper_example".into(), n: 2 }).unwrap();
    let mut probe = LipschitzProbe::new(f.as_ref());
    let mut last = 0.0;
    for (i, r) in [1.0, 5.0, 10.0, 20.0, 30.0].into_iter().enumerate() {
        probe.add_samples(&DomainBox::symmetric(2, r), 500, i as u64).unwrap();
        let est = probe.estimate();
        assert!(est >= last, "radius {r}: {est} < {last}");
        last = est;
    }
}

#[test]
fn spectral_norms_of_random_spd_matrices() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
        let angles: Vec<f64> = (0..15).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let q = rotation(n, &angles);
        let m = q.matmul(&Matrix::diag(&d).unwrap()).matmul(&q.transpose()).symmetrized();
        let mut got = symmetric_eigenvalues(&m);
        let mut want = d.clone();
        want.sort_by(f64::total_cmp);
        got.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-10 * (1.0 + w), "{got:?} vs {want:?}");
        }
    }
}
