//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any criterion fails.

use std::f64::consts::PI;
use std::time::Instant;

use neuralmd_cli::{cmd_baseline, cmd_convergence, cmd_evaluate, cmd_reference, cmd_train, RunConfig, StageSel};
use neuralmd_core::autodiff::{forward_jet, Jet2, ParamTape};
use neuralmd_core::network::{BoundNet, FieldCtx, NetArch, Perturbation};
use neuralmd_core::physics::{stage1_residual_term, wkb_reconstruct, ComplexPair, InitialData, ProblemSpec};
use neuralmd_core::rng::{substream, Stream};
use neuralmd_core::spectral::{solve_nkge, Grid};
use neuralmd_core::training::{
    grad_correlation, stiffness_d, time_avg_correlation_check, train_stage1, FieldProbe, GateState, IcData, NetworkConfig, TrainConfig,
    TrainOutcome,
};
use rand::RngExt;

struct Tally {
    failed: Vec<String>,
}

impl Tally {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(name.to_string());
        }
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn bench(eps: f64) -> ProblemSpec {
    ProblemSpec::benchmark_1d(eps)
}

/// Small random amplitude network with its parameters and a fixed draw of
/// perturbed times.
fn random_net(r: &mut Stream, spec: &ProblemSpec, outputs: usize) -> (NetArch, Vec<f64>, Perturbation) {
    let scales = r.random_range(1..=3);
    let net = NetworkConfig {
        d_model: r.random_range(3..=6),
        modes: r.random_range(1..=3),
        radii: (1..=scales).map(|i| 0.02 * i as f64).collect(),
        counts: (0..scales).map(|_| r.random_range(1..=4)).collect(),
        encoder_hidden: vec![],
        mixer_hidden: r.random_range(2..=4),
        head_hidden: vec![r.random_range(3..=6)],
    };
    let arch = net.build(spec, outputs).unwrap();
    let theta: Vec<f64> = arch.init(r).into_iter().map(|v| 2.0 * v).collect();
    let pert = arch.draw(r);
    (arch, theta, pert)
}

fn autodiff_check() -> (bool, String) {
    let spec = bench(0.5);
    let ic = IcData::new(&spec, 128).unwrap();
    let coords = [0usize, 1];
    let (mut worst_jet, mut worst_grad) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let mut r = substream(i, "acceptance/autodiff");
        let (arch, theta, pert) = random_net(&mut r, &spec, 2);
        let gate = r.random_bool(0.5).then(|| GateState::with_gamma(r.random_range(0.3..1.2)));
        let x = r.random_range(-3.0..3.0);
        let t = r.random_range(0.5..4.5);
        let jets = |x: f64, t: f64, th: &[f64]| {
            let icj = ic.amplitude_jets(&[x], &coords);
            let net = BoundNet { arch: &arch, ctx: FieldCtx { pert: &pert, gate: gate.as_ref(), ic: Some(&icj) } };
            forward_jet(&net, th, &[x, t], &coords).unwrap()
        };
        let h = 1e-4;
        let base = jets(x, t, &theta);
        let (mut ad, mut fd) = (Vec::new(), Vec::new());
        for k in 0..2 {
            let (dx, dt) = if k == 0 { (h, 0.0) } else { (0.0, h) };
            let (p, m) = (jets(x + dx, t + dt, &theta), jets(x - dx, t - dt, &theta));
            for o in 0..2 {
                ad.push(base[o].d1[k]);
                fd.push((p[o].value - m[o].value) / (2.0 * h));
                ad.push(base[o].d2[k]);
                fd.push((p[o].d1[k] - m[o].d1[k]) / (2.0 * h));
            }
        }
        worst_jet = worst_jet.max(rel_err(&ad, &fd));

        let loss = |j: &[Jet2]| stage1_residual_term(&j[0], &j[1], &spec, 0.8);
        let icj = ic.amplitude_jets(&[x], &coords);
        let mut tape = ParamTape::new(&coords, theta.len());
        let out = arch.record(&mut tape, &theta, &[x], t, &FieldCtx { pert: &pert, gate: gate.as_ref(), ic: Some(&icj) }).unwrap();
        let id = {
            let j = tape.jets(out);
            stage1_residual_term(&j[0], &j[1], &spec, 0.8).id()
        };
        let mut g = vec![0.0; theta.len()];
        tape.backward_into(&theta, id, &mut g).unwrap();
        let hp = 1e-5;
        let fdg: Vec<f64> = (0..theta.len())
            .map(|k| {
                let mut a = theta.clone();
                a[k] += hp;
                let mut b = theta.clone();
                b[k] -= hp;
                (loss(&jets(x, t, &a)) - loss(&jets(x, t, &b))) / (2.0 * hp)
            })
            .collect();
        worst_grad = worst_grad.max(rel_err(&g, &fdg));
    }
    (worst_jet < 1e-6 && worst_grad < 1e-6, format!("worst input-jet error {worst_jet:.2e}, worst parameter-gradient error {worst_grad:.2e} over 100 nets"))
}

fn linear_oracle() -> (bool, String) {
    let eps = 0.5;
    let s = ProblemSpec::new(eps, 0.0, vec![(-16.0, 16.0)], 1.0, InitialData::Cosine { mode: 3 }).unwrap();
    let g = Grid::for_spec(&s, 128).unwrap();
    let times: Vec<f64> = (1..=10).map(|i| 0.1 * i as f64).collect();
    let run = solve_nkge(&s, &g, eps * eps / 64.0, &times, 0.25).unwrap();
    let k = 2.0 * PI * 3.0 / 32.0;
    let w = (1.0 + eps * eps * k * k).sqrt() / (eps * eps);
    let mut err = 0.0f64;
    for (t, f) in run.snapshots.times.iter().zip(&run.snapshots.fields) {
        for (v, x) in f.iter().zip(g.coords(0)) {
            err = err.max((v - (k * (x + 16.0)).cos() * (w * t).cos()).abs());
        }
    }
    (err <= 1e-8, format!("max error {err:.2e}"))
}

fn limit_convergence(dir: &std::path::Path) -> (bool, String) {
    let mut cfg = RunConfig::default();
    cfg.output.dir = dir.join("convergence").display().to_string();
    cfg.convergence.eps = vec![0.2, 0.1, 0.05];
    cfg.convergence.times = vec![1.0, 2.0, 3.0, 4.0];
    let out = cmd_convergence(&cfg).unwrap();
    let order = out.orders[0].1;
    let flat = out.eps.iter().zip(&out.curves).all(|(_, c)| {
        let ratio = c.nlsw[3] / c.nlsw[0];
        (0.5..=2.0).contains(&ratio)
    });
    let i01 = out.eps.iter().position(|&e| e == 0.1).unwrap();
    let growth = out.curves[i01].nlse[3] / out.curves[i01].nlse[0];
    let ratios: Vec<String> = out.curves.iter().map(|c| format!("{:.2}", c.nlsw[3] / c.nlsw[0])).collect();
    (
        (1.7..=2.3).contains(&order) && flat && growth >= 2.0,
        format!("order at t=1 {order:.3}, wave-limit ratio t=4/t=1 [{}], Schrodinger-limit growth at eps=0.1 {growth:.2}", ratios.join(", ")),
    )
}

struct RunResult {
    rrmse: f64,
    selected: String,
    minutes: f64,
    stages: Vec<TrainOutcome>,
}

fn neuralmd_run(dir: &std::path::Path, eps: f64) -> RunResult {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.problem.eps = eps;
    cfg.output.dir = dir.join(format!("neuralmd-{eps}")).display().to_string();
    cmd_reference(&cfg).unwrap();
    let t = cmd_train(&cfg, StageSel::Both).unwrap();
    let ev = cmd_evaluate(&cfg).unwrap();
    RunResult {
        rrmse: ev.selected_metrics.rrmse,
        selected: format!("{:?} (amplitude {:.3e}, full {:.3e})", ev.selected, ev.amplitude.rrmse, ev.full.map_or(f64::NAN, |m| m.rrmse)),
        minutes: start.elapsed().as_secs_f64() / 60.0,
        stages: [t.stage1, t.stage2].into_iter().flatten().collect(),
    }
}

fn baseline_run(dir: &std::path::Path, eps: f64) -> f64 {
    let mut cfg = RunConfig::default();
    cfg.problem.eps = eps;
    cfg.output.dir = dir.join(format!("neuralmd-{eps}")).display().to_string();
    cmd_baseline(&cfg).unwrap().1.rrmse
}

fn gate_dynamics(runs: &[&TrainOutcome]) -> (bool, String) {
    let mut ok = true;
    let mut rows = 0;
    for o in runs {
        let mut prev = f64::NEG_INFINITY;
        for r in &o.report.rows {
            ok &= r.gamma >= prev;
            prev = r.gamma;
            rows += 1;
        }
        if let Some(g) = &o.gate {
            ok &= (0..=100).all(|i| (0.0..=1.0).contains(&g.h(0.05 * i as f64, 5.0)));
        }
    }
    let mut g = GateState::default();
    let before = g.gamma;
    let inc = g.update(0.0);
    ok &= inc == 1e-4 && g.gamma == before + inc;
    (ok, format!("{rows} iterations checked, increment at G = 0 is {inc:e}"))
}

fn stiffness_equivalence() -> (bool, String) {
    let spec = bench(0.5);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let mut r = substream(i, "acceptance/stiffness");
        let (arch, theta, pert) = random_net(&mut r, &spec, 1 + (i as usize % 2));
        let probe = FieldProbe { arch: &arch, pert: &pert, gate: None, ic: None, component: 0 };
        let x = [r.random_range(-8.0..8.0)];
        let t = r.random_range(0.1..4.0);
        let dt = r.random_range(0.0..0.5);
        let g = grad_correlation(&probe, &theta, &x, t, dt, None).unwrap();
        let d = stiffness_d(&probe, &theta, &x, t, dt, 1e-6).unwrap();
        worst = worst.max((d - g).abs() / g.max(1e-12));
    }
    (worst < 1e-3, format!("worst relative discrepancy {worst:.2e} over 50 nets"))
}

fn hard_ic() -> (bool, String) {
    let spec = bench(0.5);
    let ic = IcData::new(&spec, 128).unwrap();
    let (mut ev, mut ed) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let mut r = substream(i, "acceptance/hard-ic");
        let (arch, theta, pert) = random_net(&mut r, &spec, 2);
        let x = r.random_range(-16.0..16.0);
        let jets = ic.amplitude_jets(&[x], &[1]);
        let net = BoundNet { arch: &arch, ctx: FieldCtx { pert: &pert, gate: None, ic: Some(&jets) } };
        let out = forward_jet(&net, &theta, &[x, 0.0], &[1]).unwrap();
        for (o, (u0, du0)) in out.iter().zip(jets.u0.iter().zip(&jets.du0)) {
            ev = ev.max((o.value - u0.value).abs());
            ed = ed.max((o.d1[0] - du0.value).abs());
        }
    }
    (ev < 1e-12 && ed < 1e-8, format!("max value error {ev:.2e}, max time-derivative error {ed:.2e}"))
}

fn time_average() -> (bool, String) {
    let spec = bench(0.5);
    let (mut conforming, mut passed) = (0, 0);
    for i in 0..200 {
        let mut r = substream(i, "acceptance/time-average");
        let (arch, theta, pert) = random_net(&mut r, &spec, 1);
        let probe = FieldProbe { arch: &arch, pert: &pert, gate: None, ic: None, component: 0 };
        let c = time_avg_correlation_check(&probe, &theta, 0.05, 5, 1, (0.1, 4.9), &spec.domain, &mut r).unwrap();
        conforming += c.conforming;
        passed += c.passed;
    }
    let frac = if conforming == 0 { 1.0 } else { passed as f64 / conforming as f64 };
    (conforming > 0 && frac >= 0.99, format!("{passed} of {conforming} conforming samples pass ({:.1}%)", 100.0 * frac))
}

fn wkb_identity() -> (bool, String) {
    let eps = 0.3;
    let times: Vec<f64> = (0..25).map(|i| 0.21 * i as f64).collect();
    let xs: Vec<f64> = (0..32).map(|j| -8.0 + 0.5 * j as f64).collect();
    let z: Vec<Vec<ComplexPair>> =
        times.iter().map(|&t| xs.iter().map(|&x| ComplexPair::new((-x * x / 8.0).exp() * t.cos(), (x - t).sin() / 3.0)).collect()).collect();
    let r: Vec<Vec<f64>> = times.iter().map(|&t| xs.iter().map(|&x| 0.01 * x * t * t).collect()).collect();
    let u = wkb_reconstruct(&z, Some(&r), eps, &times).unwrap();
    let mut err = 0.0f64;
    for (i, &t) in times.iter().enumerate() {
        let ph = t / (eps * eps);
        for j in 0..xs.len() {
            err = err.max((u[i][j] - (2.0 * (z[i][j].re * ph.cos() - z[i][j].im * ph.sin()) + r[i][j])).abs());
        }
    }
    (err <= 1e-14, format!("max pointwise difference {err:.1e}"))
}

fn smoke_2d() -> (bool, String) {
    let spec = ProblemSpec::new(0.5, 1.0, vec![(-16.0, 16.0); 2], 5.0, InitialData::Benchmark2d).unwrap();
    let ic = IcData::new(&spec, 64).unwrap();
    let cfg = TrainConfig { adam_iters: 200, lbfgs_iters: 0, ic_grid: 64, ..TrainConfig::default() };
    let start = Instant::now();
    let out = train_stage1(&spec, &NetworkConfig::default(), &cfg, &ic).unwrap();
    let loss: Vec<f64> = out.report.rows.iter().map(|r| r.loss_total).collect();
    let head = loss[..20].iter().sum::<f64>() / 20.0;
    let tail = loss[loss.len() - 20..].iter().sum::<f64>() / 20.0;
    let n = loss.len() as f64;
    let mean_i = (n - 1.0) / 2.0;
    let logs: Vec<f64> = loss.iter().map(|v| v.ln()).collect();
    let mean_l = logs.iter().sum::<f64>() / n;
    let slope = logs.iter().enumerate().map(|(i, l)| (i as f64 - mean_i) * (l - mean_l)).sum::<f64>()
        / (0..loss.len()).map(|i| (i as f64 - mean_i).powi(2)).sum::<f64>();
    (
        tail < head && slope < 0.0,
        format!("mean loss first 20 {head:.3e}, last 20 {tail:.3e}, log-loss slope {slope:.2e}/iter, {:.0} s", start.elapsed().as_secs_f64()),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut tally = Tally { failed: Vec::new() };
    let timed = |f: &dyn Fn() -> (bool, String)| {
        let s = Instant::now();
        let (p, d) = f();
        (p, format!("{d} [{:.1} s]", s.elapsed().as_secs_f64()), s.elapsed().as_secs_f64())
    };

    let (p, d, secs) = timed(&autodiff_check);
    tally.record("criterion 1 (autodiff vs finite differences)", p && secs < 60.0, d);
    let (p, d, secs) = timed(&linear_oracle);
    tally.record("criterion 2 (linear dispersion oracle)", p && secs < 10.0, d);
    let (p, d, secs) = timed(&|| limit_convergence(dir.path()));
    tally.record("criterion 3 (limit-model convergence)", p && secs < 900.0, d);

    let mut runs = Vec::new();
    for eps in [0.5, 0.1] {
        let r = neuralmd_run(dir.path(), eps);
        tally.record(
            &format!("criterion 4 (NeuralMD at eps = {eps})"),
            r.rrmse < 0.05 && r.minutes < 30.0,
            format!("selected rRMSE {:.3e}, {}, {:.1} min", r.rrmse, r.selected, r.minutes),
        );
        runs.push((eps, r));
    }
    let base = baseline_run(dir.path(), 0.1);
    let ours = runs.iter().find(|(e, _)| *e == 0.1).map(|(_, r)| r.rrmse).unwrap();
    tally.record("criterion 5 (baseline contrast at eps = 0.1)", base > 0.5 && ours < 0.05, format!("baseline rRMSE {base:.3e}, NeuralMD rRMSE {ours:.3e}"));

    let outcomes: Vec<&TrainOutcome> = runs.iter().flat_map(|(_, r)| r.stages.iter()).collect();
    let (p, d) = gate_dynamics(&outcomes);
    tally.record("criterion 6 (gate and shift dynamics)", p, d);
    let (p, d, secs) = timed(&stiffness_equivalence);
    tally.record("criterion 7 (stiffness equals gradient correlation)", p && secs < 60.0, d);
    let (p, d, _) = timed(&hard_ic);
    tally.record("criterion 8 (hard initial conditions)", p, d);
    let (p, d, secs) = timed(&time_average);
    tally.record("criterion 9 (time-averaged correlation)", p && secs < 120.0, d);
    let (p, d, _) = timed(&wkb_identity);
    tally.record("criterion 10 (reconstruction identity)", p, d);
    let (p, d, _) = timed(&smoke_2d);
    tally.record("2D smoke test", p, d);

    if tally.failed.is_empty() {
        println!("all acceptance criteria pass");
    } else {
        println!("failed: {}", tally.failed.join("; "));
        std::process::exit(1);
    }
}
