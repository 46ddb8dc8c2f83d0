use neuralmd_core::physics::{InitialData, ProblemSpec};
use neuralmd_core::spectral::*;
use num_complex::Complex64;
use proptest::prelude::*;
use std::f64::consts::PI;

fn bench(eps: f64, t_final: f64) -> ProblemSpec {
    let mut s = ProblemSpec::benchmark_1d(eps);
    s.t_final = t_final;
    s
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn linear_dispersion_oracle() {
    let eps = 0.5;
    let s = ProblemSpec::new(eps, 0.0, vec![(-16.0, 16.0)], 1.0, InitialData::Cosine { mode: 3 }).unwrap();
    let g = Grid::for_spec(&s, 128).unwrap();
    let run = solve_nkge(&s, &g, eps * eps / 64.0, &[0.5, 1.0], 0.25).unwrap();
    let k = 2.0 * PI * 3.0 / 32.0;
    let w = (1.0 + eps * eps * k * k).sqrt() / (eps * eps);
    for (t, f) in run.snapshots.times.iter().zip(&run.snapshots.fields) {
        let exact: Vec<f64> = g.coords(0).iter().map(|x| (k * (x + 16.0)).cos() * (w * t).cos()).collect();
        assert!(max_diff(f, &exact) <= 1e-8);
    }
}

#[test]
fn nkge_time_stepping_is_second_order() {
    let eps = 0.5;
    let s = bench(eps, 1.0);
    let g = Grid::for_spec(&s, 64).unwrap();
    let dt = eps * eps / 4.0;
    let run = |h: f64| solve_nkge(&s, &g, h, &[1.0], 0.25).unwrap().snapshots.fields.remove(0);
    let fine = run(dt / 32.0);
    let errs: Vec<f64> = [1.0, 2.0, 4.0].iter().map(|d| g.l2_norm(&run(dt / d).iter().zip(&fine).map(|(a, b)| a - b).collect::<Vec<_>>())).collect();
    let o1 = (errs[0] / errs[1]).log2();
    let o2 = (errs[1] / errs[2]).log2();
    assert!(o1 >= 1.9 && o2 >= 1.9, "orders {o1} {o2} from {errs:?}");
}

#[test]
fn zero_data_stays_zero() {
    let s = ProblemSpec::new(0.3, 1.0, vec![(-8.0, 8.0)], 1.0, InitialData::Zero).unwrap();
    let g = Grid::for_spec(&s, 32).unwrap();
    let t = [0.5, 1.0];
    assert!(solve_nkge(&s, &g, 0.09 / 64.0, &t, 0.25).unwrap().snapshots.fields.iter().flatten().all(|v| *v == 0.0));
    assert!(solve_nlsw(&s, &g, 1.0 / 256.0, &t).unwrap().fields.iter().flatten().all(|v| *v == Complex64::new(0.0, 0.0)));
    assert!(solve_nlse(&s, &g, 1.0 / 256.0, &t).unwrap().fields.iter().flatten().all(|v| *v == Complex64::new(0.0, 0.0)));
}

#[test]
fn schrodinger_splitting_conserves_mass() {
    let s = bench(0.1, 1.0);
    let g = Grid::for_spec(&s, 256).unwrap();
    let times: Vec<f64> = (0..=10).map(|i| 0.1 * i as f64).collect();
    let z = solve_nlse(&s, &g, 1.0 / 256.0, &times).unwrap();
    let mass = |f: &[Complex64]| f.iter().map(|v| v.norm_sqr()).sum::<f64>() * g.dx(0);
    let m0 = mass(&z.fields[0]);
    for f in &z.fields {
        assert!((mass(f) - m0).abs() <= 1e-10 * m0.max(1.0));
    }
}

#[test]
fn wave_envelope_without_wave_term_is_schrodinger() {
    let s = bench(0.2, 1.0);
    let g = Grid::for_spec(&s, 128).unwrap();
    let t = [0.25, 1.0];
    let a = solve_nlsw_eps(&s, 0.0, &g, 1.0 / 256.0, &t).unwrap();
    let b = solve_nlse(&s, &g, 1.0 / 256.0, &t).unwrap();
    for (fa, fb) in a.fields.iter().zip(&b.fields) {
        assert!(fa.iter().zip(fb).all(|(p, q)| (p - q).norm() <= 1e-8));
    }
}

#[test]
fn unresolved_step_is_refused() {
    let s = bench(0.1, 1.0);
    let g = Grid::for_spec(&s, 32).unwrap();
    match solve_nkge(&s, &g, 0.01, &[1.0], 0.25) {
        Err(SpectralError::Resolution { dt, required }) => {
            assert_eq!(dt, 0.01);
            assert!((required - 0.0025).abs() < 1e-15);
        }
        other => panic!("expected refusal, got {other:?}"),
    }
}

#[test]
fn energy_is_conserved_by_the_reference() {
    let s = bench(0.5, 2.0);
    let g = Grid::for_spec(&s, 128).unwrap();
    let times: Vec<f64> = (1..=4).map(|i| 0.5 * i as f64).collect();
    let run = solve_nkge(&s, &g, 0.25 / 64.0, &times, 0.25).unwrap();
    assert!(run.energy_drift < 1e-5, "drift {}", run.energy_drift);
}

#[test]
fn reconstruction_reference_tracks_the_direct_solver() {
    let eps = 0.1;
    let s = bench(eps, 1.0);
    let g = Grid::for_spec(&s, 128).unwrap();
    let direct = solve_nkge(&s, &g, eps * eps / 64.0, &[1.0], 0.25).unwrap().snapshots.fields.remove(0);
    let cheap = mti_reference(&s, &g, 1.0 / 256.0, &[1.0]).unwrap().fields.remove(0);
    let d: Vec<f64> = direct.iter().zip(&cheap).map(|(a, b)| a - b).collect();
    assert!(g.h1_norm(&d) < 10.0 * eps * eps);
}

#[test]
fn fitted_orders_of_synthetic_data() {
    let eps = [0.2, 0.1, 0.05];
    let sq: Vec<f64> = eps.iter().map(|e| e * e).collect();
    assert!((fit_convergence_order(&eps, &sq).unwrap() - 2.0).abs() < 1e-12);
    assert!((fit_convergence_order(&eps, &eps).unwrap() - 1.0).abs() < 1e-12);
    assert!(fit_convergence_order(&eps[..2], &sq[..2]).is_err());
}

#[test]
fn h1_norm_of_a_resolved_mode() {
    let g = Grid::new(&[64], &[(0.0, 2.0 * PI)]).unwrap();
    let f: Vec<f64> = g.coords(0).iter().map(|x| (3.0 * x).sin()).collect();
    // ‖f‖² = π, ‖f′‖² = 9π
    assert!((g.h1_norm(&f) - (10.0 * PI).sqrt()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn differentiation_is_exact_on_resolved_modes(k in 1usize..=16, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let g = Grid::new(&[64], &[(-3.0, 5.0)]).unwrap();
        let w = 2.0 * PI * k as f64 / 8.0;
        let f: Vec<Complex64> = g.coords(0).iter().map(|x| Complex64::new(a * (w * x).cos() + b * (w * x).sin(), 0.0)).collect();
        let d = g.derivative(&f, 0);
        let l = g.laplacian(&f);
        for (i, x) in g.coords(0).iter().enumerate() {
            let exact = w * (-a * (w * x).sin() + b * (w * x).cos());
            prop_assert!((d[i].re - exact).abs() <= 1e-11 * w.max(1.0));
            prop_assert!((l[i].re + w * w * f[i].re).abs() <= 1e-11 * (w * w).max(1.0));
        }
    }

    #[test]
    fn fft_round_trips(vals in prop::collection::vec(-1.0f64..1.0, 64)) {
        let g = Grid::new(&[8, 8], &[(0.0, 1.0), (0.0, 2.0)]).unwrap();
        let mut data: Vec<Complex64> = vals.iter().map(|v| Complex64::new(*v, -v / 2.0)).collect();
        g.fft(&mut data);
        g.ifft(&mut data);
        for (d, v) in data.iter().zip(&vals) {
            prop_assert!((d.re - v).abs() < 1e-14 && (d.im + v / 2.0).abs() < 1e-14);
        }
    }
}
