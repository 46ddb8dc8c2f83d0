use neuralmd_core::autodiff::Jet2;
use neuralmd_core::physics::*;
use neuralmd_core::spectral::Grid;
use num_complex::Complex64;
use proptest::prelude::*;

fn jet(value: f64, d1: [f64; 2], d2: [f64; 2]) -> Jet2 {
    Jet2 { value, coords: vec![0, 1], d1: d1.to_vec(), d2: d2.to_vec() }
}

fn spec(eps: f64, lambda: f64) -> ProblemSpec {
    ProblemSpec::new(eps, lambda, vec![(-16.0, 16.0)], 1.0, InitialData::Zero).unwrap()
}

/// `a·cos(θ)` jets with `θ = kx + wt + φ`.
fn cos_jet(a: f64, k: f64, w: f64, x: f64, t: f64, phase: f64) -> Jet2 {
    let th = k * x + w * t + phase;
    let (s, c) = th.sin_cos();
    jet(a * c, [-a * k * s, -a * w * s], [-a * k * k * c, -a * w * w * c])
}

/// Root of `−2ω − ε²ω² + k² + 3λa² = 0` near the Schrödinger branch.
fn plane_wave_freq(eps: f64, lambda: f64, k: f64, a: f64) -> f64 {
    let c = k * k + 3.0 * lambda * a * a;
    if eps == 0.0 {
        return c / 2.0;
    }
    let e2 = eps * eps;
    (-2.0 + (4.0 + 4.0 * e2 * c).sqrt()) / (2.0 * e2)
}

const POINTS: [(f64, f64); 10] = [(0.1, 0.2), (-3.0, 0.9), (2.5, 0.05), (7.1, 1.7), (-0.4, 3.3), (1.9, 0.6), (-5.5, 2.2), (0.0, 0.0), (4.4, 4.9), (-1.2, 0.33)];

#[test]
fn plane_waves_solve_the_envelope_equation() {
    // z = a·e^{i(kx + ωt)} in the convention u = e^{it/ε²}z + c.c.
    for &(eps, lambda, k, a) in &[(0.5, 1.0, 1.3, 0.4), (0.1, 1.0, 0.7, 1.1), (1.0, -0.5, 2.0, 0.3), (0.3, 0.0, 1.0, 1.0)] {
        let w = plane_wave_freq(eps, lambda, k, a);
        let s = spec(eps, lambda);
        for &(x, t) in &POINTS {
            let re = cos_jet(a, k, w, x, t, 0.0);
            let im = cos_jet(a, k, w, x, t, -std::f64::consts::FRAC_PI_2);
            let (ri, rr) = nlsw_residual(&re, &im, &s);
            assert!(ri.abs() < 1e-10 && rr.abs() < 1e-10, "eps {eps}: {ri:e} {rr:e}");
        }
    }
}

#[test]
fn dropping_the_wave_term_gives_the_schrodinger_residual() {
    let (k, a, lambda) = (0.9, 0.6, 1.0);
    let w = plane_wave_freq(0.0, lambda, k, a);
    for &(x, t) in &POINTS {
        let re = cos_jet(a, k, w, x, t, 0.0);
        let im = cos_jet(a, k, w, x, t, -std::f64::consts::FRAC_PI_2);
        let (ri, rr) = nlsw_residual_eps(&re, &im, 0.0, lambda, 1);
        assert!(ri.abs() < 1e-12 && rr.abs() < 1e-12);
        // With the wave term the same z leaves exactly ε²·z_tt behind.
        let eps = 0.2;
        let (wi, wr) = nlsw_residual_eps(&re, &im, eps, lambda, 1);
        assert!((wi - eps * eps * im.d2[1]).abs() < 1e-12 && (wr - eps * eps * re.d2[1]).abs() < 1e-12);
    }
}

#[test]
fn exact_envelope_reconstructs_to_the_coupling_residual() {
    for &(eps, lambda) in &[(0.5, 1.0), (0.2, 2.0), (0.7, 0.0)] {
        let (k, a) = (1.1, 0.35);
        let w = plane_wave_freq(eps, lambda, k, a);
        let s = spec(eps, lambda);
        for &(x, t) in &POINTS {
            // 2Re(e^{it/ε²}z) = 2a·cos(kx + (ω + ε⁻²)t)
            let u = cos_jet(2.0 * a, k, w + 1.0 / (eps * eps), x, t, 0.0);
            let z = ComplexPair::new(a * (k * x + w * t).cos(), a * (k * x + w * t).sin());
            let expect = coupling(0.0, z, &s, t);
            let got = nkge_residual(&u, &s);
            assert!((got - expect).abs() < 1e-8, "eps {eps}: {got} vs {expect}");
            if lambda == 0.0 {
                assert!(got.abs() < 1e-8);
            }
        }
    }
}

#[test]
fn prepared_benchmark_data_at_origin() {
    let s = ProblemSpec::benchmark_1d(0.5);
    let g = Grid::for_spec(&s, 256).unwrap();
    let (z0, _) = prepare_z_initial(&s, &g).unwrap();
    let mid = g.coords(0).iter().position(|&x| x == 0.0).unwrap();
    assert!((z0[mid].re - 0.2820948).abs() < 1e-7);
    assert_eq!(z0[mid].im, 0.0);
}

#[test]
fn prepared_constant_and_zero_data() {
    let c = 0.8;
    let s = ProblemSpec::new(0.5, 1.0, vec![(-4.0, 4.0)], 1.0, InitialData::Constant { phi1: c, phi2: 0.0 }).unwrap();
    let g = Grid::for_spec(&s, 16).unwrap();
    let (_, dz0) = prepare_z_initial(&s, &g).unwrap();
    for v in dz0 {
        assert!(v.re.abs() < 1e-15);
        assert!((v.im - 3.0 * c * c * c / 16.0).abs() < 1e-14);
    }
    let s = ProblemSpec::new(0.5, 1.0, vec![(-4.0, 4.0)], 1.0, InitialData::Zero).unwrap();
    let (z0, dz0) = prepare_z_initial(&s, &g).unwrap();
    assert!(z0.iter().chain(&dz0).all(|v| *v == Complex64::new(0.0, 0.0)));
}

#[test]
fn reconstruction_identity_for_analytic_inputs() {
    let eps = 0.3;
    let times: Vec<f64> = (0..20).map(|i| 0.137 * i as f64).collect();
    let xs: Vec<f64> = (0..16).map(|j| -4.0 + 0.5 * j as f64).collect();
    let z: Vec<Vec<ComplexPair>> = times.iter().map(|&t| xs.iter().map(|&x| ComplexPair::new((x - t).cos() * 0.4, (x * t).sin())).collect()).collect();
    let r: Vec<Vec<f64>> = times.iter().map(|&t| xs.iter().map(|&x| 0.1 * x * t).collect()).collect();
    let u = wkb_reconstruct(&z, Some(&r), eps, &times).unwrap();
    for (i, &t) in times.iter().enumerate() {
        let ph = t / (eps * eps);
        for j in 0..xs.len() {
            let hand = 2.0 * (z[i][j].re * ph.cos() - z[i][j].im * ph.sin()) + r[i][j];
            assert!((u[i][j] - hand).abs() <= 1e-14);
        }
    }
}

fn brute_rmae(p: &[Vec<f64>], u: &[Vec<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..u.len() {
        for j in 0..u[i].len() {
            num += (p[i][j] - u[i][j]).abs();
            den += u[i][j].abs();
        }
    }
    (num / den).sqrt()
}

fn brute_rrmse(p: &[Vec<f64>], u: &[Vec<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..u.len() {
        for j in 0..u[i].len() {
            num += (p[i][j] - u[i][j]).powi(2);
            den += u[i][j].powi(2);
        }
    }
    (num / den).sqrt()
}

#[test]
fn metrics_match_brute_force_on_a_shifted_grid() {
    let g = Grid::new(&[32], &[(-16.0, 16.0)]).unwrap();
    let truth: Vec<Vec<f64>> = (0..5).map(|i| g.coords(0).iter().map(|x| (-x * x / 4.0).exp() * (1.0 + 0.1 * i as f64)).collect()).collect();
    for c in [0.01, -0.3, 2.0] {
        let pred: Vec<Vec<f64>> = truth.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
        assert!((rmae(&pred, &truth).unwrap() - brute_rmae(&pred, &truth)).abs() < 1e-14);
        assert!((rrmse(&pred, &truth).unwrap() - brute_rrmse(&pred, &truth)).abs() < 1e-14);
    }
}

proptest! {
    #[test]
    fn rrmse_of_scaled_truth_is_the_scale_offset(c in -5.0f64..5.0, vals in prop::collection::vec(0.1f64..3.0, 1..40)) {
        let truth = vec![vals.clone()];
        let pred = vec![vals.iter().map(|v| c * v).collect::<Vec<_>>()];
        prop_assert!((rrmse(&pred, &truth).unwrap() - (c - 1.0).abs()).abs() <= 1e-12);
    }

    #[test]
    fn criterion_keeps_the_smaller_error(a in prop::collection::vec(-2.0f64..2.0, 8), b in prop::collection::vec(-2.0f64..2.0, 8), u in prop::collection::vec(-2.0f64..2.0, 8)) {
        let (a, b, u) = (vec![a], vec![b], vec![u]);
        let (chosen, _) = error_criterion(&a, &b, &u).unwrap();
        let e = l2_error(chosen, &u).unwrap();
        prop_assert_eq!(e, l2_error(&a, &u).unwrap().min(l2_error(&b, &u).unwrap()));
    }
}

#[test]
fn loss_assembly_matches_hand_sum() {
    let eps = 0.5;
    let s = spec(eps, 1.0);
    let pts = [(0.1, 0.3), (-1.0, 0.8), (2.0, 1.4)];
    let mut terms = LossTerms::<f64>::default();
    let mut hand = 0.0;
    for &(x, t) in &pts {
        let r = cos_jet(0.2, 0.5, 1.5, x, t, 0.3);
        let v = remainder_residual(&r, ComplexPair::new(0.1, 0.2), &s, t);
        terms.res.push(stage2_residual_term(&r, ComplexPair::new(0.1, 0.2), &s, t, 1.0));
        hand += v * v / 3.0;
    }
    let w = LossWeights { w_res: 1.0, w_ic: 1.0, w_bd: 1.0 };
    assert!((assemble_loss_stage2(&terms, &w, 0.0) - hand).abs() < 1e-14);
    let zero = LossTerms::<f64> { res: vec![0.0; 3], ..Default::default() };
    assert_eq!(assemble_loss_stage2(&zero, &w, 0.0), 0.0);
}

#[test]
fn remainder_initial_term_vanishes_for_matching_data() {
    let r = jet(0.0, [0.0, -0.7], [0.0, 0.0]);
    assert_eq!(stage2_ic_term(&r, -0.7, 1), 0.0);
    let (r0, dr0) = prepare_r_initial(&[Complex64::new(0.35, -1.0)]);
    assert_eq!((r0[0], dr0[0]), (0.0, -0.7));
}
