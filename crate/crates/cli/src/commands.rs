use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use neuralmd_core::io::{heatmap_ppm, real_snapshots_csv, complex_snapshots_csv, Checkpoint, FieldData, FieldFile};
use neuralmd_core::physics::{rmae_with, ProblemSpec, Reconstruction};
use neuralmd_core::rng::substream;
use neuralmd_core::spectral::{
    eta_curves, fit_convergence_order, mti_reference, solve_nkge, solve_nlse, solve_nlsw, EtaCurves, Grid, RealSnapshots,
};
use neuralmd_core::training::{
    evaluate_models, normalized_correlation, grad_correlation, predict_baseline, stiffness_d, time_avg_correlation_check, train_baseline,
    train_stage1, train_stage2, CorrelationCheck, Evaluation, FieldProbe, IcData, Metrics, StageTag, TrainError, TrainOutcome,
};

use crate::{CliError, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSel {
    One,
    Two,
    Both,
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("effective_config.toml"), cfg.to_toml())?;
    Ok(dir)
}

fn write_real_field(dir: &Path, stem: &str, grid: &Grid, times: &[f64], fields: &[Vec<f64>]) -> Result<(), CliError> {
    FieldFile::real_snapshots(fields)?.save(&dir.join(format!("{stem}.bin")))?;
    fs::write(dir.join(format!("{stem}.csv")), real_snapshots_csv(grid, times, fields))?;
    Ok(())
}

/// Rows for a heatmap: time against `x` in 1D, otherwise the final snapshot
/// on the `(x0, x1)` plane through the middle of the remaining axes.
fn heat_rows(grid: &Grid, fields: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if grid.dim() == 1 {
        return fields.iter().rev().cloned().collect();
    }
    let last = fields.last().map_or(&[][..], Vec::as_slice);
    let n = grid.n.clone();
    let mid: usize = (2..n.len()).map(|a| (n[a] / 2) * n[a + 1..].iter().product::<usize>()).sum();
    let stride0: usize = n[1..].iter().product();
    let stride1: usize = n[2..].iter().product();
    (0..n[1])
        .rev()
        .map(|j| (0..n[0]).map(|i| last.get(i * stride0 + j * stride1 + mid).copied().unwrap_or(0.0)).collect())
        .collect()
}

fn reference_fields(cfg: &RunConfig, spec: &ProblemSpec, grid: &Grid, times: &[f64]) -> Result<RealSnapshots, CliError> {
    if cfg.reference.direct {
        let dt = cfg.reference.nkge_dt_fraction * spec.eps * spec.eps;
        Ok(solve_nkge(spec, grid, dt, times, cfg.reference.max_dt_fraction)?.snapshots)
    } else {
        Ok(mti_reference(spec, grid, cfg.reference.slow_dt, times)?)
    }
}

/// Output of `reference`.
#[derive(Debug, Clone)]
pub struct ReferenceOutput {
    pub grid: Grid,
    pub nkge: RealSnapshots,
    /// Relative energy drift of the direct run; `None` for the reconstruction.
    pub energy_drift: Option<f64>,
}

pub fn cmd_reference(cfg: &RunConfig) -> Result<ReferenceOutput, CliError> {
    let dir = out_dir(cfg)?;
    let spec = cfg.problem_spec()?;
    let grid = Grid::for_spec(&spec, cfg.reference.grid)?;
    let times = cfg.snapshot_times();
    let (nkge, energy_drift) = if cfg.reference.direct {
        let dt = cfg.reference.nkge_dt_fraction * spec.eps * spec.eps;
        let run = solve_nkge(&spec, &grid, dt, &times, cfg.reference.max_dt_fraction)?;
        let mut e = String::from("t,energy\n");
        for (t, v) in times.iter().zip(&run.energy) {
            let _ = writeln!(e, "{t},{v}");
        }
        fs::write(dir.join("energy.csv"), e)?;
        (run.snapshots, Some(run.energy_drift))
    } else {
        (mti_reference(&spec, &grid, cfg.reference.slow_dt, &times)?, None)
    };
    write_real_field(&dir, "reference_nkge", &grid, &times, &nkge.fields)?;
    fs::write(dir.join("reference_nkge.ppm"), heatmap_ppm(&heat_rows(&grid, &nkge.fields)))?;
    for (stem, z) in [
        ("reference_nlsw", solve_nlsw(&spec, &grid, cfg.reference.slow_dt, &times)?),
        ("reference_nlse", solve_nlse(&spec, &grid, cfg.reference.slow_dt, &times)?),
    ] {
        FieldFile::complex_snapshots(&z.fields)?.save(&dir.join(format!("{stem}.bin")))?;
        fs::write(dir.join(format!("{stem}.csv")), complex_snapshots_csv(&grid, &times, &z.fields))?;
    }
    let mut s = String::from("key,value\n");
    let _ = writeln!(s, "grid,{}", cfg.reference.grid);
    let _ = writeln!(s, "snapshots,{}", times.len());
    if let Some(d) = energy_drift {
        let _ = writeln!(s, "energy_drift,{d}");
    }
    fs::write(dir.join("reference_summary.csv"), s)?;
    Ok(ReferenceOutput { grid, nkge, energy_drift })
}

/// Stage outcomes from `train`.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub stage1: Option<TrainOutcome>,
    pub stage2: Option<TrainOutcome>,
}

fn save_stage(dir: &Path, stem: &str, out: &TrainOutcome, seed: u64) -> Result<(), CliError> {
    out.checkpoint(seed).save(&dir.join(format!("{stem}.ckpt")))?;
    fs::write(dir.join(format!("{stem}_report.csv")), out.report.to_csv())?;
    Ok(())
}

/// Saves the last finite parameters before surfacing a numeric abort.
fn rescue(dir: &Path, stem: &str, e: TrainError) -> CliError {
    if let TrainError::NonFinite { last_good, .. } = &e {
        let _ = last_good.save(&dir.join(format!("{stem}_last_good.ckpt")));
    }
    e.into()
}

fn load_checkpoint(path: &Path, expected: StageTag) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Structural(format!("missing checkpoint {}", path.display())));
    }
    let c = Checkpoint::load(path)?;
    if c.stage != expected {
        return Err(CliError::Structural(format!("{} holds a {:?} network, expected {:?}", path.display(), c.stage, expected)));
    }
    Ok(c)
}

fn stage1_path(dir: &Path, explicit: Option<&String>) -> PathBuf {
    explicit.map_or_else(|| dir.join("stage1.ckpt"), PathBuf::from)
}

pub fn cmd_train(cfg: &RunConfig, stage: StageSel) -> Result<TrainOutput, CliError> {
    let dir = out_dir(cfg)?;
    let spec = cfg.problem_spec()?;
    let net = cfg.network_config()?;
    let tc = cfg.train_config(spec.t_final)?;
    let ic = IcData::new(&spec, tc.ic_grid)?;
    let mut out = TrainOutput::default();
    let mut summary = String::from("stage,iterations,final_loss,final_gamma,lbfgs_fallbacks,resamples,report_hash\n");
    let mut note = |tag: &str, o: &TrainOutcome| {
        let last = o.report.rows.last();
        let _ = writeln!(
            summary,
            "{tag},{},{},{},{},{},{:016x}",
            o.report.rows.len(),
            last.map_or(f64::NAN, |r| r.loss_total),
            o.report.final_gamma().map_or(String::new(), |g| g.to_string()),
            o.report.lbfgs_fallbacks,
            o.report.resamples,
            o.report.hash()
        );
    };
    let stage1_ckpt = if stage == StageSel::Two {
        load_checkpoint(&stage1_path(&dir, cfg.training.stage1_checkpoint.as_ref()), StageTag::Amplitude)?
    } else {
        let o = train_stage1(&spec, &net, &tc, &ic).map_err(|e| rescue(&dir, "stage1", e))?;
        save_stage(&dir, "stage1", &o, tc.seed)?;
        note("1", &o);
        let c = o.checkpoint(tc.seed);
        out.stage1 = Some(o);
        c
    };
    if stage != StageSel::One {
        let o = train_stage2(&spec, &stage1_ckpt, &net, &tc, &ic).map_err(|e| rescue(&dir, "stage2", e))?;
        save_stage(&dir, "stage2", &o, tc.seed)?;
        note("2", &o);
        out.stage2 = Some(o);
    }
    fs::write(dir.join("train_summary.csv"), summary)?;
    Ok(out)
}

fn load_reference(cfg: &RunConfig, dir: &Path, spec: &ProblemSpec, grid: &Grid, times: &[f64]) -> Result<Vec<Vec<f64>>, CliError> {
    let path = cfg.evaluation.reference.as_ref().map_or_else(|| dir.join("reference_nkge.bin"), PathBuf::from);
    if !path.exists() {
        if cfg.evaluation.reference.is_some() {
            return Err(CliError::Structural(format!("missing reference {}", path.display())));
        }
        return Ok(reference_fields(cfg, spec, grid, times)?.fields);
    }
    let f = FieldFile::load(&path)?;
    if f.dims != [times.len(), grid.len()] {
        return Err(CliError::Structural(format!(
            "reference {} has shape {:?}, expected [{}, {}]",
            path.display(),
            f.dims,
            times.len(),
            grid.len()
        )));
    }
    match f.data {
        FieldData::Real(v) => Ok(v.chunks(grid.len()).map(<[f64]>::to_vec).collect()),
        FieldData::Complex(_) => Err(CliError::Structural(format!("reference {} is complex", path.display()))),
    }
}

fn metrics_line(s: &mut String, name: &str, m: &Metrics, pred: Option<&[Vec<f64>]>, truth: &[Vec<f64>], sqrt: bool) -> Result<(), CliError> {
    let rmae = match (sqrt, pred) {
        (false, Some(p)) => rmae_with(p, truth, false)?,
        _ => m.rmae,
    };
    let _ = writeln!(s, "{name},{rmae},{}", m.rrmse);
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Evaluation, CliError> {
    let dir = out_dir(cfg)?;
    let spec = cfg.problem_spec()?;
    let grid = Grid::for_spec(&spec, cfg.reference.grid)?;
    let times = cfg.snapshot_times();
    let s1 = load_checkpoint(&stage1_path(&dir, cfg.evaluation.stage1.as_ref()), StageTag::Amplitude)?;
    let s2 = match (&cfg.evaluation.stage2, cfg.evaluation.use_remainder) {
        (_, false) => None,
        (Some(p), true) => Some(load_checkpoint(Path::new(p), StageTag::Remainder)?),
        (None, true) => {
            let p = dir.join("stage2.ckpt");
            if p.exists() { Some(load_checkpoint(&p, StageTag::Remainder)?) } else { None }
        }
    };
    let truth = load_reference(cfg, &dir, &spec, &grid, &times)?;
    let ic = IcData::new(&spec, cfg.training.ic_grid)?;
    let ev = evaluate_models(&spec, &s1, s2.as_ref(), &ic, cfg.training.hard_ic, &grid, &times, &truth)?;
    let sqrt = cfg.evaluation.rmae_sqrt;
    let mut m = String::from("model,rmae,rrmse\n");
    // Only the selected prediction is kept, so the non-sqrt variant is exact there alone.
    metrics_line(&mut m, "amplitude", &ev.amplitude, None, &truth, true)?;
    if let Some(f) = &ev.full {
        metrics_line(&mut m, "full", f, None, &truth, true)?;
    }
    metrics_line(&mut m, "selected", &ev.selected_metrics, Some(&ev.u_selected), &truth, sqrt)?;
    let _ = writeln!(m, "selection,{},", match ev.selected {
        Reconstruction::AmplitudeOnly => "amplitude",
        Reconstruction::WithRemainder => "full",
    });
    fs::write(dir.join("metrics.csv"), m)?;
    write_real_field(&dir, "prediction", &grid, &times, &ev.u_selected)?;
    let err: Vec<Vec<f64>> = ev.u_selected.iter().zip(&truth).map(|(p, u)| p.iter().zip(u).map(|(a, b)| (a - b).abs()).collect()).collect();
    fs::write(dir.join("prediction.ppm"), heatmap_ppm(&heat_rows(&grid, &ev.u_selected)))?;
    fs::write(dir.join("error.ppm"), heatmap_ppm(&heat_rows(&grid, &err)))?;
    Ok(ev)
}

/// Output of `convergence`.
#[derive(Debug, Clone)]
pub struct ConvergenceOutput {
    pub eps: Vec<f64>,
    pub curves: Vec<EtaCurves>,
    /// Fitted order per time for the wave limit and the Schrödinger limit.
    pub orders: Vec<(f64, f64, f64)>,
}

pub fn cmd_convergence(cfg: &RunConfig) -> Result<ConvergenceOutput, CliError> {
    let dir = out_dir(cfg)?;
    let c = &cfg.convergence;
    let t_max = c.times.iter().copied().fold(0.0, f64::max);
    let mut curves = Vec::with_capacity(c.eps.len());
    let mut rows = String::from("eps,t,eta_nlsw,eta_nlse\n");
    for &eps in &c.eps {
        let mut spec = cfg.problem_spec()?;
        spec.eps = eps;
        spec.t_final = t_max;
        let grid = Grid::for_spec(&spec, c.grid)?;
        let e = eta_curves(&spec, &grid, &c.times, &cfg.reference_steps())?;
        for ((t, w), s) in e.times.iter().zip(&e.nlsw).zip(&e.nlse) {
            let _ = writeln!(rows, "{eps},{t},{w},{s}");
        }
        curves.push(e);
    }
    fs::write(dir.join("eta.csv"), rows)?;
    let mut orders = Vec::new();
    if c.eps.len() >= 3 {
        let mut s = String::from("t,order_nlsw,order_nlse\n");
        for (j, &t) in c.times.iter().enumerate() {
            let w: Vec<f64> = curves.iter().map(|e| e.nlsw[j]).collect();
            let n: Vec<f64> = curves.iter().map(|e| e.nlse[j]).collect();
            let (ow, on) = (fit_convergence_order(&c.eps, &w)?, fit_convergence_order(&c.eps, &n)?);
            let _ = writeln!(s, "{t},{ow},{on}");
            orders.push((t, ow, on));
        }
        fs::write(dir.join("slopes.csv"), s)?;
    }
    Ok(ConvergenceOutput { eps: c.eps.clone(), curves, orders })
}

pub fn cmd_baseline(cfg: &RunConfig) -> Result<(TrainOutcome, Metrics), CliError> {
    let dir = out_dir(cfg)?;
    let spec = cfg.problem_spec()?;
    let tc = cfg.train_config(spec.t_final)?;
    let hidden = vec![cfg.baseline.width; cfg.baseline.depth];
    let o = train_baseline(&spec, &hidden, &tc).map_err(|e| rescue(&dir, "baseline", e))?;
    save_stage(&dir, "baseline", &o, tc.seed)?;
    let grid = Grid::for_spec(&spec, cfg.reference.grid)?;
    let times = cfg.snapshot_times();
    let truth = load_reference(cfg, &dir, &spec, &grid, &times)?;
    let pred = predict_baseline(&o.checkpoint(tc.seed), &grid, &times)?;
    let m = Metrics::of(&pred, &truth)?;
    let mut s = String::from("model,rmae,rrmse\n");
    metrics_line(&mut s, "baseline", &m, Some(&pred), &truth, cfg.evaluation.rmae_sqrt)?;
    fs::write(dir.join("baseline_metrics.csv"), s)?;
    write_real_field(&dir, "baseline_prediction", &grid, &times, &pred)?;
    Ok((o, m))
}

/// One probe row of `diagnose`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub x: Vec<f64>,
    pub t: f64,
    pub dt: f64,
    pub component: usize,
    pub g: f64,
    pub g_norm: f64,
    pub d: f64,
}

#[derive(Debug, Clone)]
pub struct DiagnoseOutput {
    pub rows: Vec<ProbeRow>,
    pub check: CorrelationCheck,
}

/// Gradient-correlation diagnostics on a trained network: the correlation
/// `G`, its normalized form, the perturbation-based stiffness `D` at each
/// configured lag, and the time-averaging check on the raw network.
pub fn cmd_diagnose(cfg: &RunConfig) -> Result<DiagnoseOutput, CliError> {
    let dir = out_dir(cfg)?;
    let spec = cfg.problem_spec()?;
    let dg = &cfg.diagnose;
    let path = dg.checkpoint.as_ref().map_or_else(|| dir.join("stage1.ckpt"), PathBuf::from);
    if !path.exists() {
        return Err(CliError::Structural(format!("missing checkpoint {}", path.display())));
    }
    let ckpt = Checkpoint::load(&path)?;
    let ic = IcData::new(&spec, cfg.training.ic_grid)?;
    let pert = ckpt.arch.stratified();
    let max_dt = dg.dts.iter().copied().fold(0.0, f64::max);
    if max_dt >= spec.t_final {
        return Err(CliError::Config("diagnose lags must be shorter than the final time".into()));
    }
    let mut rows = Vec::new();
    let mut csv = format!("point,component,{},t,dt,G,G_normalized,D\n", (0..spec.dim()).map(|a| format!("x{a}")).collect::<Vec<_>>().join(","));
    for p in 0..dg.points {
        let f = (p as f64 + 0.5) / dg.points.max(1) as f64;
        let x: Vec<f64> = spec.domain.iter().map(|&(a, b)| a + f * (b - a)).collect();
        let t = f * (spec.t_final - max_dt);
        let jets = match (cfg.training.hard_ic, ckpt.stage) {
            (true, StageTag::Amplitude) => Some(ic.amplitude_jets(&x, &[])),
            (true, StageTag::Remainder) => Some(ic.remainder_jets(&x, &[])),
            _ => None,
        };
        for component in 0..ckpt.arch.outputs() {
            let probe = FieldProbe { arch: &ckpt.arch, pert: &pert, gate: ckpt.gate.as_ref(), ic: jets.as_ref(), component };
            for &dt in &dg.dts {
                let row = ProbeRow {
                    x: x.clone(),
                    t,
                    dt,
                    component,
                    g: grad_correlation(&probe, &ckpt.theta, &x, t, dt, None)?,
                    g_norm: normalized_correlation(&probe, &ckpt.theta, &x, t, dt, None)?,
                    d: stiffness_d(&probe, &ckpt.theta, &x, t, dt, dg.lambda_probe)?,
                };
                let xs: Vec<String> = x.iter().map(f64::to_string).collect();
                let _ = writeln!(csv, "{p},{component},{},{t},{dt},{},{},{}", xs.join(","), row.g, row.g_norm, row.d);
                rows.push(row);
            }
        }
    }
    fs::write(dir.join("diagnose.csv"), csv)?;
    let probe = FieldProbe { arch: &ckpt.arch, pert: &pert, gate: ckpt.gate.as_ref(), ic: None, component: 0 };
    let mut rng = substream(cfg.training.seed, "diagnose/time-average");
    let t_range = (dg.region, spec.t_final - dg.region);
    let check = time_avg_correlation_check(&probe, &ckpt.theta, dg.region, dg.k, dg.samples, t_range, &spec.domain, &mut rng)?;
    fs::write(
        dir.join("diagnose_summary.csv"),
        format!("samples,conforming,passed,pass_fraction\n{},{},{},{}\n", check.samples, check.conforming, check.passed, check.pass_fraction()),
    )?;
    Ok(DiagnoseOutput { rows, check })
}
