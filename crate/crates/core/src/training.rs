//! Training loop: gate dynamics, optimizers, gradient-correlation probes,
//! gated collocation resampling and the two pretraining stages.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{batch_loss_grad, AutodiffError, Jet2, ParamTape, Scalar};
use crate::io::Checkpoint;
use crate::network::{Architecture, FieldCtx, IcJets, MlpArch, NetArch, NetworkParams, Perturbation, PerturbConfig, Scale};
use crate::physics::{
    boundary_term, error_criterion, nkge_residual, nlsw_residual, remainder_residual, rmae, rrmse, stage1_ic_term,
    stage2_ic_term, wkb_reconstruct, ComplexPair, LossWeights, PhysicsError, ProblemSpec, Reconstruction,
};
use crate::rng::{substream, Stream};
use crate::spectral::{Grid, PointJet, SpectralError, SpectralField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("non-finite loss at iteration {iter}")]
    NonFinite { iter: usize, last_good: Box<Checkpoint> },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateVariant {
    Tanh,
    ReluTanh,
}

/// Causal time window `h(t)` and its shift dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub alpha: f64,
    pub gamma: f64,
    pub eta: f64,
    pub eps_tol: f64,
    pub delta_max: f64,
    pub variant: GateVariant,
    /// Increment applied by the most recent update.
    pub last_increment: f64,
}

impl Default for GateState {
    fn default() -> Self {
        GateState { alpha: 5.0, gamma: 1.0, eta: 1e-3, eps_tol: 1.0, delta_max: 0.1, variant: GateVariant::Tanh, last_increment: 0.0 }
    }
}

impl GateState {
    pub fn with_gamma(gamma: f64) -> Self {
        GateState { gamma, ..Self::default() }
    }

    pub fn h(&self, t: f64, t_final: f64) -> f64 {
        self.h_derivs(t, t_final).0
    }

    /// `(h, dh/dt, d²h/dt²)`.
    pub fn h_derivs(&self, t: f64, t_final: f64) -> (f64, f64, f64) {
        let k = self.alpha / t_final;
        let s = (self.alpha * (t / t_final - self.gamma)).tanh();
        let sech2 = 1.0 - s * s;
        match self.variant {
            GateVariant::Tanh => ((1.0 - s) / 2.0, -0.5 * k * sech2, k * k * s * sech2),
            GateVariant::ReluTanh => {
                if s < 0.0 {
                    (-s, -k * sech2, 2.0 * k * k * s * sech2)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
        }
    }

    /// `η·min(e^{−eps_tol·G}, Δ_max)`.
    pub fn increment(&self, g: f64) -> f64 {
        self.eta * (-self.eps_tol * g).exp().min(self.delta_max)
    }

    /// Advances `γ` from the correlation value `g` and returns the increment.
    pub fn update(&mut self, g: f64) -> f64 {
        let inc = self.increment(g.max(0.0));
        self.gamma += inc;
        self.last_increment = inc;
        inc
    }

    /// Largest time with `h ≥ floor`, or `None` when no such time is
    /// nonnegative.
    pub fn window_end(&self, t_final: f64, floor: f64) -> Option<f64> {
        let rel = match self.variant {
            GateVariant::Tanh => self.gamma + (1.0 - 2.0 * floor).atanh() / self.alpha,
            GateVariant::ReluTanh => self.gamma - floor.atanh() / self.alpha,
        };
        let end = rel * t_final;
        if end < 0.0 || end.is_nan() {
            None
        } else {
            Some(end)
        }
    }
}

pub fn gate_h(t: f64, t_final: f64, g: &GateState) -> f64 {
    g.h(t, t_final)
}

pub fn gamma_update(g: &GateState, corr: f64) -> GateState {
    let mut n = g.clone();
    n.update(corr);
    n
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            theta[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

pub fn adam_step(st: &mut Adam, grads: &[f64], params: &mut [f64]) {
    st.step(params, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub history: usize,
    pub c1: f64,
    pub shrink: f64,
    pub max_probes: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig { history: 20, c1: 1e-4, shrink: 0.5, max_probes: 25 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lbfgs {
    pub cfg: LbfgsConfig,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    pub fallbacks: usize,
    pub skipped_pairs: usize,
}

/// Result of one accepted L-BFGS step.
#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsStep {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub fell_back: bool,
    pub evaluations: usize,
}

fn vdot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Lbfgs {
    pub fn new(cfg: LbfgsConfig) -> Self {
        Lbfgs { cfg, s: VecDeque::new(), y: VecDeque::new(), fallbacks: 0, skipped_pairs: 0 }
    }

    pub fn reset(&mut self) {
        self.s.clear();
        self.y.clear();
    }

    pub fn history_len(&self) -> usize {
        self.s.len()
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / vdot(&self.y[i], &self.s[i]);
            alpha[i] = rho * vdot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        if k > 0 {
            let scale = vdot(&self.s[k - 1], &self.y[k - 1]) / vdot(&self.y[k - 1], &self.y[k - 1]);
            q.iter_mut().for_each(|v| *v *= scale);
        }
        for i in 0..k {
            let rho = 1.0 / vdot(&self.y[i], &self.s[i]);
            let beta = rho * vdot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// One step from `theta` with known `loss` and `grad`. `f` evaluates the
    /// objective and its gradient; non-finite losses count as rejected probes.
    pub fn step<F>(&mut self, theta: &mut [f64], loss: f64, grad: &[f64], mut f: F) -> Result<LbfgsStep>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        if grad.iter().all(|g| *g == 0.0) {
            return Ok(LbfgsStep { loss, grad: grad.to_vec(), fell_back: false, evaluations: 0 });
        }
        let mut d = self.direction(grad);
        let mut slope = vdot(grad, &d);
        if !(slope < 0.0) {
            self.reset();
            d = grad.iter().map(|g| -g).collect();
            slope = vdot(grad, &d);
        }
        let mut step = if self.s.is_empty() { (1.0 / grad.iter().map(|g| g.abs()).sum::<f64>()).min(1.0) } else { 1.0 };
        let mut trial = vec![0.0; theta.len()];
        let mut evals = 0;
        for _ in 0..self.cfg.max_probes {
            for i in 0..theta.len() {
                trial[i] = theta[i] + step * d[i];
            }
            let (fl, gl) = f(&trial)?;
            evals += 1;
            if fl.is_finite() && fl <= loss + self.cfg.c1 * step * slope {
                let s: Vec<f64> = trial.iter().zip(theta.iter()).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = gl.iter().zip(grad).map(|(a, b)| a - b).collect();
                if vdot(&s, &y) > 0.0 {
                    if self.s.len() == self.cfg.history {
                        self.s.pop_front();
                        self.y.pop_front();
                    }
                    self.s.push_back(s);
                    self.y.push_back(y);
                } else {
                    self.skipped_pairs += 1;
                }
                theta.copy_from_slice(&trial);
                return Ok(LbfgsStep { loss: fl, grad: gl, fell_back: false, evaluations: evals });
            }
            step *= self.cfg.shrink;
        }
        // Conservative gradient step, kept only if it does not increase the loss.
        self.fallbacks += 1;
        self.reset();
        let gn = vdot(grad, grad).sqrt();
        let lr = 1e-3 / gn.max(1.0);
        for i in 0..theta.len() {
            trial[i] = theta[i] - lr * grad[i];
        }
        let (fl, gl) = f(&trial)?;
        evals += 1;
        if fl.is_finite() && fl <= loss {
            theta.copy_from_slice(&trial);
            Ok(LbfgsStep { loss: fl, grad: gl, fell_back: true, evaluations: evals })
        } else {
            Ok(LbfgsStep { loss, grad: grad.to_vec(), fell_back: true, evaluations: evals })
        }
    }
}

pub fn lbfgs_step<F>(st: &mut Lbfgs, params: &mut [f64], loss: f64, grad: &[f64], f: F) -> Result<LbfgsStep>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    st.step(params, loss, grad, f)
}

/// Everything needed to differentiate one scalar network output at a point.
#[derive(Debug, Clone, Copy)]
pub struct FieldProbe<'a> {
    pub arch: &'a NetArch,
    pub pert: &'a Perturbation,
    /// Gate used inside the pooling layer.
    pub gate: Option<&'a GateState>,
    pub ic: Option<&'a IcJets>,
    pub component: usize,
}

impl FieldProbe<'_> {
    /// Output value and its parameter gradient at `(x, t)`.
    pub fn value_grad(&self, theta: &[f64], x: &[f64], t: f64) -> Result<(f64, Vec<f64>)> {
        let mut tape = ParamTape::new(&[], theta.len());
        let out = self.arch.record(&mut tape, theta, x, t, &FieldCtx { pert: self.pert, gate: self.gate, ic: self.ic })?;
        let (id, v) = {
            let jets = tape.jets(out);
            let j = jets.get(self.component).ok_or_else(|| TrainError::Structural("output component out of range".into()))?;
            (j.value.id(), j.value.val())
        };
        let mut g = vec![0.0; theta.len()];
        tape.backward_into(theta, id, &mut g)?;
        Ok((v, g))
    }

    pub fn value(&self, theta: &[f64], x: &[f64], t: f64) -> Result<f64> {
        let out = self.arch.eval(theta, x, t, &FieldCtx { pert: self.pert, gate: self.gate, ic: self.ic })?;
        out.get(self.component).copied().ok_or_else(|| TrainError::Structural("output component out of range".into()))
    }
}

/// `|⟨∂θ u(t), ∂θ u(t+δt)⟩|`, scaled by `√h(t)·√h(t+δt)` when `gate_scale`
/// is given.
pub fn grad_correlation(
    probe: &FieldProbe,
    theta: &[f64],
    x: &[f64],
    t: f64,
    dt: f64,
    gate_scale: Option<(&GateState, f64)>,
) -> Result<f64> {
    let (_, g1) = probe.value_grad(theta, x, t)?;
    let (_, g2) = probe.value_grad(theta, x, t + dt)?;
    let w = gate_scale.map_or(1.0, |(g, tf)| (g.h(t, tf) * g.h(t + dt, tf)).sqrt());
    Ok(w * vdot(&g1, &g2).abs())
}

/// Same correlation normalized by `‖g(t)‖·‖g(t+δt)‖ + 1e-12`.
pub fn normalized_correlation(
    probe: &FieldProbe,
    theta: &[f64],
    x: &[f64],
    t: f64,
    dt: f64,
    gate_scale: Option<(&GateState, f64)>,
) -> Result<f64> {
    let (_, g1) = probe.value_grad(theta, x, t)?;
    let (_, g2) = probe.value_grad(theta, x, t + dt)?;
    let w = gate_scale.map_or(1.0, |(g, tf)| (g.h(t, tf) * g.h(t + dt, tf)).sqrt());
    Ok(w * vdot(&g1, &g2).abs() / (vdot(&g1, &g1).sqrt() * vdot(&g2, &g2).sqrt() + 1e-12))
}

/// `|u_θ(t+δt) − u_{θ−λ∂θu(t)}(t+δt)| / λ` by an actual perturbed forward pass.
pub fn stiffness_d(probe: &FieldProbe, theta: &[f64], x: &[f64], t: f64, dt: f64, lambda_probe: f64) -> Result<f64> {
    let (_, g) = probe.value_grad(theta, x, t)?;
    let moved: Vec<f64> = theta.iter().zip(&g).map(|(p, gi)| p - lambda_probe * gi).collect();
    let a = probe.value(theta, x, t + dt)?;
    let b = probe.value(&moved, x, t + dt)?;
    Ok((a - b).abs() / lambda_probe)
}

/// Pointwise and time-averaged correlations for one configuration, where the
/// averaged construction is `u(s) + (1/k) Σ u(s + δ_i)`.
pub fn averaged_correlation(probe: &FieldProbe, theta: &[f64], x: &[f64], t: f64, dt: f64, offsets: &[f64]) -> Result<(f64, f64, bool)> {
    let (_, ga) = probe.value_grad(theta, x, t)?;
    let (_, gb) = probe.value_grad(theta, x, t + dt)?;
    let mut all = vec![ga.clone(), gb.clone()];
    let mut avg_a = ga.clone();
    let mut avg_b = gb.clone();
    let k = offsets.len();
    for &d in offsets {
        let (_, pa) = probe.value_grad(theta, x, t + d)?;
        let (_, pb) = probe.value_grad(theta, x, t + dt + d)?;
        for i in 0..theta.len() {
            avg_a[i] += pa[i] / k as f64;
            avg_b[i] += pb[i] / k as f64;
        }
        all.push(pa);
        all.push(pb);
    }
    let mut conforming = true;
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            if vdot(&all[i], &all[j]) < 0.0 {
                conforming = false;
            }
        }
    }
    Ok((vdot(&ga, &gb).abs(), vdot(&avg_a, &avg_b).abs(), conforming))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationCheck {
    pub samples: usize,
    pub conforming: usize,
    pub passed: usize,
}

impl CorrelationCheck {
    /// Passing fraction among conforming samples (1 when none conform).
    pub fn pass_fraction(&self) -> f64 {
        if self.conforming == 0 {
            1.0
        } else {
            self.passed as f64 / self.conforming as f64
        }
    }
}

/// Monte Carlo check that time averaging over a region of half-width
/// `region` never lowers the gradient correlation. Offsets are drawn from
/// `[−R/3, R/3]`; `t` from `t_range`, `x` from `x_box`.
#[allow(clippy::too_many_arguments)]
pub fn time_avg_correlation_check(
    probe: &FieldProbe,
    theta: &[f64],
    region: f64,
    k: usize,
    samples: usize,
    t_range: (f64, f64),
    x_box: &[(f64, f64)],
    rng: &mut Stream,
) -> Result<CorrelationCheck> {
    let r3 = region / 3.0;
    let mut out = CorrelationCheck { samples, conforming: 0, passed: 0 };
    for _ in 0..samples {
        let x: Vec<f64> = x_box.iter().map(|&(a, b)| rng.random_range(a..b)).collect();
        let t = rng.random_range(t_range.0..t_range.1);
        let dt = if r3 > 0.0 { rng.random_range(-r3..=r3) } else { 0.0 };
        let offs: Vec<f64> = (0..k).map(|_| if r3 > 0.0 { rng.random_range(-r3..=r3) } else { 0.0 }).collect();
        let (point, avg, conforming) = averaged_correlation(probe, theta, &x, t, dt, &offs)?;
        if conforming {
            out.conforming += 1;
            if avg >= point {
                out.passed += 1;
            }
        }
    }
    Ok(out)
}

/// One space-time collocation point.
#[derive(Debug, Clone, PartialEq)]
pub struct Collocation {
    pub x: Vec<f64>,
    pub t: f64,
}

/// A point on the lower face of `axis`, paired with its periodic image.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPair {
    pub axis: usize,
    pub x: Vec<f64>,
    pub t: f64,
}

impl BoundaryPair {
    pub fn partner(&self, domain: &[(f64, f64)]) -> Vec<f64> {
        let mut p = self.x.clone();
        p[self.axis] = domain[self.axis].1;
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleConfig {
    pub every: usize,
    pub swap_fraction: f64,
    /// Window floor: new times satisfy `h(t) ≥ floor`.
    pub window_floor: f64,
    /// Upper end of the sampling window when the gated window is empty.
    pub fallback_span: f64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig { every: 50, swap_fraction: 0.2, window_floor: 0.05, fallback_span: 0.25 }
    }
}

/// Collocation sets and the residual magnitudes seen at their last evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub residual: Vec<Collocation>,
    pub initial: Vec<Collocation>,
    pub boundary: Vec<BoundaryPair>,
    pub last_residuals: Vec<f64>,
}

/// Time interval new residual points are drawn from.
pub fn sampling_window(gate: Option<&GateState>, t_final: f64, cfg: &ResampleConfig) -> (f64, f64) {
    match gate {
        None => (0.0, t_final),
        Some(g) => match g.window_end(t_final, cfg.window_floor) {
            Some(end) => (0.0, end.min(t_final)),
            None => (0.0, t_final.min(cfg.fallback_span)),
        },
    }
}

fn uniform_point(domain: &[(f64, f64)], rng: &mut Stream) -> Vec<f64> {
    domain.iter().map(|&(a, b)| rng.random_range(a..b)).collect()
}

fn draw_time(window: (f64, f64), rng: &mut Stream) -> f64 {
    if window.1 > window.0 {
        rng.random_range(window.0..=window.1)
    } else {
        window.0
    }
}

impl SamplerState {
    pub fn new(spec: &ProblemSpec, n_res: usize, n_ic: usize, n_bd: usize, window: (f64, f64), rng: &mut Stream) -> Self {
        let d = spec.dim();
        let residual = (0..n_res).map(|_| Collocation { x: uniform_point(&spec.domain, rng), t: draw_time(window, rng) }).collect();
        let initial = (0..n_ic).map(|_| Collocation { x: uniform_point(&spec.domain, rng), t: 0.0 }).collect();
        let boundary = (0..n_bd)
            .map(|i| {
                let axis = i % d;
                let mut x = uniform_point(&spec.domain, rng);
                x[axis] = spec.domain[axis].0;
                BoundaryPair { axis, x, t: rng.random_range(0.0..=spec.t_final) }
            })
            .collect();
        SamplerState { residual, initial, boundary, last_residuals: vec![0.0; n_res] }
    }
}

/// Replaces the residual points with the lowest `h(t)·|residual|` (ties by
/// lowest index) with fresh draws from the gated window. Returns the new
/// state and the indices replaced.
pub fn resample_gated(
    s: &SamplerState,
    residuals: &[f64],
    gate: Option<&GateState>,
    spec: &ProblemSpec,
    cfg: &ResampleConfig,
    rng: &mut Stream,
) -> Result<(SamplerState, Vec<usize>)> {
    if residuals.len() != s.residual.len() {
        return Err(TrainError::Structural("one residual per collocation point required".into()));
    }
    let n_swap = ((cfg.swap_fraction * s.residual.len() as f64).floor() as usize).min(s.residual.len());
    let mut next = s.clone();
    next.last_residuals = residuals.to_vec();
    if n_swap == 0 {
        return Ok((next, Vec::new()));
    }
    let weight = |i: usize| gate.map_or(1.0, |g| g.h(s.residual[i].t, spec.t_final)) * residuals[i].abs();
    let mut order: Vec<usize> = (0..s.residual.len()).collect();
    order.sort_by(|&a, &b| weight(a).total_cmp(&weight(b)).then(a.cmp(&b)));
    let mut swapped: Vec<usize> = order[..n_swap].to_vec();
    swapped.sort_unstable();
    let window = sampling_window(gate, spec.t_final, cfg);
    for &i in &swapped {
        next.residual[i] = Collocation { x: uniform_point(&spec.domain, rng), t: draw_time(window, rng) };
        next.last_residuals[i] = 0.0;
    }
    Ok((next, swapped))
}

/// Prepared initial data `z0`, `∂t z0` as trigonometric interpolants.
#[derive(Debug, Clone)]
pub struct IcData {
    z0: SpectralField,
    dz0: SpectralField,
    dim: usize,
}

fn spatial_jet(pj: &PointJet, imag: bool, scale: f64, coords: &[usize], dim: usize) -> Jet2 {
    let part = |c: num_complex::Complex64| scale * if imag { c.im } else { c.re };
    let mut j = Jet2::constant(part(pj.value), coords);
    for (i, &c) in coords.iter().enumerate() {
        if c < dim {
            j.d1[i] = part(pj.grad[c]);
            j.d2[i] = part(pj.hess_diag[c]);
        }
    }
    j
}

impl IcData {
    pub fn new(spec: &ProblemSpec, n: usize) -> Result<Self> {
        let grid = Grid::for_spec(spec, n)?;
        let (z0, dz0) = crate::physics::prepare_z_initial(spec, &grid)?;
        Ok(IcData { z0: SpectralField::new(&grid, &z0)?, dz0: SpectralField::new(&grid, &dz0)?, dim: spec.dim() })
    }

    /// `(z0(x), ∂t z0(x))`.
    pub fn z_at(&self, x: &[f64]) -> (ComplexPair, ComplexPair) {
        (self.z0.eval(x).value.into(), self.dz0.eval(x).value.into())
    }

    /// Hard-IC jets for the amplitude network (outputs `z_re`, `z_im`).
    pub fn amplitude_jets(&self, x: &[f64], coords: &[usize]) -> IcJets {
        let a = self.z0.eval(x);
        let b = self.dz0.eval(x);
        IcJets {
            u0: vec![spatial_jet(&a, false, 1.0, coords, self.dim), spatial_jet(&a, true, 1.0, coords, self.dim)],
            du0: vec![spatial_jet(&b, false, 1.0, coords, self.dim), spatial_jet(&b, true, 1.0, coords, self.dim)],
        }
    }

    /// Hard-IC jets for the remainder network: `r0 = 0`, `∂t r0 = −2 Re ∂t z0`.
    pub fn remainder_jets(&self, x: &[f64], coords: &[usize]) -> IcJets {
        let b = self.dz0.eval(x);
        IcJets { u0: vec![Jet2::constant(0.0, coords)], du0: vec![spatial_jet(&b, false, -2.0, coords, self.dim)] }
    }

    pub fn remainder_velocity(&self, x: &[f64]) -> f64 {
        -2.0 * self.dz0.eval(x).value.re
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub d_model: usize,
    pub modes: usize,
    pub radii: Vec<f64>,
    pub counts: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub mixer_hidden: usize,
    pub head_hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            d_model: 64,
            modes: 5,
            radii: vec![0.03, 0.05, 0.07],
            counts: vec![3, 5, 7],
            encoder_hidden: Vec::new(),
            mixer_hidden: 8,
            head_hidden: vec![64, 64],
        }
    }
}

impl NetworkConfig {
    pub fn build(&self, spec: &ProblemSpec, outputs: usize) -> Result<NetArch> {
        if self.radii.len() != self.counts.len() {
            return Err(TrainError::Config("radii and counts must have equal length".into()));
        }
        if self.modes == 0 || self.d_model == 0 || self.mixer_hidden == 0 {
            return Err(TrainError::Config("modes, d_model and mixer width must be positive".into()));
        }
        let perturb = PerturbConfig {
            scales: self.radii.iter().zip(&self.counts).map(|(&radius, &count)| Scale { radius, count }).collect(),
            t_final: spec.t_final,
        };
        perturb.validate().map_err(TrainError::Config)?;
        let mut a = Architecture::neuralmd(spec.periods(), self.modes, perturb, outputs);
        a.d_model = self.d_model;
        a.encoder_hidden = self.encoder_hidden.clone();
        a.mixer_hidden = self.mixer_hidden;
        a.head_hidden = self.head_hidden.clone();
        Ok(NetArch::NeuralMd(a))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub gamma0: f64,
    pub eta: f64,
    pub eps_tol: f64,
    pub delta_max: f64,
    pub variant: GateVariant,
}

impl Default for GateConfig {
    fn default() -> Self {
        let g = GateState::default();
        GateConfig { enabled: true, alpha: g.alpha, gamma0: g.gamma, eta: g.eta, eps_tol: g.eps_tol, delta_max: g.delta_max, variant: g.variant }
    }
}

impl GateConfig {
    pub fn state(&self) -> Option<GateState> {
        self.enabled.then(|| GateState {
            alpha: self.alpha,
            gamma: self.gamma0,
            eta: self.eta,
            eps_tol: self.eps_tol,
            delta_max: self.delta_max,
            variant: self.variant,
            last_increment: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam_iters: usize,
    pub lbfgs_iters: usize,
    pub lr: f64,
    pub n_residual: usize,
    pub n_initial: usize,
    pub n_boundary: usize,
    pub weights: LossWeights,
    pub gate: GateConfig,
    /// Weight per-point residuals by `h(t)`.
    pub gated_residual: bool,
    pub probes: usize,
    /// Probe time separation as a fraction of `T`.
    pub probe_dt_fraction: f64,
    pub resample: ResampleConfig,
    pub lbfgs: LbfgsConfig,
    pub hard_ic: bool,
    /// Grid size used to prepare the initial data.
    pub ic_grid: usize,
    pub chunk: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam_iters: 500,
            lbfgs_iters: 500,
            lr: 1e-3,
            n_residual: 1024,
            n_initial: 128,
            n_boundary: 128,
            weights: LossWeights::default(),
            gate: GateConfig::default(),
            gated_residual: true,
            probes: 16,
            probe_dt_fraction: 0.02,
            resample: ResampleConfig::default(),
            lbfgs: LbfgsConfig::default(),
            hard_ic: true,
            ic_grid: 256,
            chunk: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.n_residual == 0 {
            return Err(TrainError::Config("at least one residual point is required".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.resample.swap_fraction) {
            return Err(TrainError::Config("swap fraction must lie in [0, 1]".into()));
        }
        if !(self.probe_dt_fraction >= 0.0 && self.probe_dt_fraction < 1.0) {
            return Err(TrainError::Config("probe separation must lie in [0, 1)".into()));
        }
        if self.gate.enabled && !(self.gate.eta >= 0.0 && self.gate.delta_max >= 0.0 && self.gate.alpha > 0.0) {
            return Err(TrainError::Config("gate parameters must be nonnegative with alpha > 0".into()));
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.adam_iters + self.lbfgs_iters
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageTag {
    Baseline,
    Amplitude,
    Remainder,
}

impl StageTag {
    pub fn code(self) -> u8 {
        match self {
            StageTag::Baseline => 0,
            StageTag::Amplitude => 1,
            StageTag::Remainder => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(StageTag::Baseline),
            1 => Some(StageTag::Amplitude),
            2 => Some(StageTag::Remainder),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Adam,
    Lbfgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub phase: Phase,
    pub loss_total: f64,
    pub loss_res: f64,
    pub loss_ic: f64,
    pub loss_bd: f64,
    pub gamma: f64,
    pub g_mean: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub stage: StageTag,
    pub rows: Vec<IterRecord>,
    pub lbfgs_fallbacks: usize,
    pub resamples: usize,
    pub events: Vec<String>,
}

impl TrainReport {
    /// FNV-1a over every field except wall-clock times.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(&self.seed.to_le_bytes());
        eat(&[self.stage.code()]);
        for r in &self.rows {
            eat(&(r.iter as u64).to_le_bytes());
            eat(&[matches!(r.phase, Phase::Lbfgs) as u8]);
            for v in [r.loss_total, r.loss_res, r.loss_ic, r.loss_bd, r.gamma, r.g_mean] {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        eat(&(self.lbfgs_fallbacks as u64).to_le_bytes());
        eat(&(self.resamples as u64).to_le_bytes());
        for e in &self.events {
            eat(e.as_bytes());
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,loss_total,loss_res,loss_ic,loss_bd,gamma,G_mean,wall_ms\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.iter, r.loss_total, r.loss_res, r.loss_ic, r.loss_bd, r.gamma, r.g_mean, r.wall_ms
            ));
        }
        s
    }

    pub fn final_gamma(&self) -> Option<f64> {
        self.rows.last().map(|r| r.gamma)
    }
}

/// Trained parameters with the gate they were trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub gate: Option<GateState>,
    pub report: TrainReport,
}

impl TrainOutcome {
    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint { arch: self.params.arch.clone(), gate: self.gate.clone(), seed, stage: self.report.stage, theta: self.params.theta.clone() }
    }
}

#[derive(Clone, Copy)]
enum Kind<'a> {
    Amplitude,
    Remainder { frozen: &'a FrozenAmplitude },
    Baseline,
}

/// The trained amplitude network, evaluated deterministically.
#[derive(Debug, Clone)]
pub struct FrozenAmplitude {
    pub arch: NetArch,
    pub theta: Vec<f64>,
    pub gate: Option<GateState>,
    pub hard_ic: bool,
    pert: Perturbation,
}

impl FrozenAmplitude {
    pub fn new(ckpt: &Checkpoint, hard_ic: bool) -> Result<Self> {
        if ckpt.stage != StageTag::Amplitude {
            return Err(TrainError::Structural("the remainder stage needs an amplitude checkpoint".into()));
        }
        if ckpt.theta.len() != ckpt.arch.n_params() {
            return Err(TrainError::Structural("checkpoint parameters do not match its architecture".into()));
        }
        Ok(FrozenAmplitude { pert: ckpt.arch.stratified(), arch: ckpt.arch.clone(), theta: ckpt.theta.clone(), gate: ckpt.gate.clone(), hard_ic })
    }

    pub fn z(&self, ic: &IcData, x: &[f64], t: f64) -> Result<ComplexPair> {
        let jets = self.hard_ic.then(|| ic.amplitude_jets(x, &[]));
        let out = self.arch.eval(&self.theta, x, t, &FieldCtx { pert: &self.pert, gate: self.gate.as_ref(), ic: jets.as_ref() })?;
        Ok(ComplexPair::new(out[0], out[1]))
    }
}

/// Per-item inputs, fixed between resampling events.
#[derive(Debug, Clone)]
enum Item {
    Residual { x: Vec<f64>, t: f64, ic: Option<IcJets>, z: ComplexPair },
    Initial { x: Vec<f64>, ic: Option<IcJets>, target: [f64; 4] },
    Boundary { axis: usize, xa: Vec<f64>, xb: Vec<f64>, t: f64, ic: Option<(IcJets, IcJets)> },
}

struct Objective<'a> {
    kind: Kind<'a>,
    spec: &'a ProblemSpec,
    arch: &'a NetArch,
    weights: LossWeights,
    gate: Option<GateState>,
    gated_residual: bool,
    chunk: usize,
    n_res: usize,
    n_ic: usize,
    n_bd: usize,
}

struct Eval {
    loss: f64,
    grad: Vec<f64>,
    res: f64,
    ic: f64,
    bd: f64,
    magnitudes: Vec<f64>,
}

fn store(a: &AtomicU64, v: f64) {
    a.store(v.to_bits(), Ordering::Relaxed);
}

fn load(a: &AtomicU64) -> f64 {
    f64::from_bits(a.load(Ordering::Relaxed))
}

fn nonfinite_as_inf(e: AutodiffError) -> std::result::Result<f64, AutodiffError> {
    match e {
        AutodiffError::NonFinite { .. } => Ok(f64::INFINITY),
        other => Err(other),
    }
}

impl Objective<'_> {
    fn scale(&self, item: &Item) -> f64 {
        match item {
            Item::Residual { .. } => self.weights.w_res / self.n_res as f64,
            Item::Initial { .. } => self.weights.w_ic / self.n_ic.max(1) as f64,
            Item::Boundary { .. } => self.weights.w_bd / self.n_bd.max(1) as f64,
        }
    }

    /// Adds the scaled item gradient into `grad`; returns `(term, |residual|)`.
    fn item(&self, theta: &[f64], item: &Item, pert: &Perturbation, grad: &mut [f64]) -> std::result::Result<(f64, f64), AutodiffError> {
        let d = self.spec.dim();
        let gate = self.gate.as_ref();
        let scale = self.scale(item);
        match item {
            Item::Residual { x, t, ic, z } => {
                let coords: Vec<usize> = (0..=d).collect();
                let mut tape = ParamTape::new(&coords, theta.len());
                let out = self.arch.record(&mut tape, theta, x, *t, &FieldCtx { pert, gate, ic: ic.as_ref() })?;
                let h = if self.gated_residual { gate.map_or(1.0, |g| g.h(*t, self.spec.t_final)) } else { 1.0 };
                let (id, term, mag) = {
                    let j = tape.jets(out);
                    let (sq, mag) = match self.kind {
                        Kind::Amplitude => {
                            let (a, b) = nlsw_residual(&j[0], &j[1], self.spec);
                            let sq = a * a + b * b;
                            (sq, sq.val().sqrt())
                        }
                        Kind::Remainder { .. } => {
                            let r = remainder_residual(&j[0], *z, self.spec, *t);
                            (r * r, r.val().abs())
                        }
                        Kind::Baseline => {
                            let r = nkge_residual(&j[0], self.spec);
                            (r * r, r.val().abs())
                        }
                    };
                    let term = sq * h;
                    ((term * scale).id(), term.val(), mag)
                };
                tape.backward_into(theta, id, grad)?;
                Ok((term, mag))
            }
            Item::Initial { x, ic, target } => {
                let mut tape = ParamTape::new(&[d], theta.len());
                let out = self.arch.record(&mut tape, theta, x, 0.0, &FieldCtx { pert, gate, ic: ic.as_ref() })?;
                let (id, term) = {
                    let j = tape.jets(out);
                    let term = match self.kind {
                        Kind::Amplitude => stage1_ic_term(
                            &j[0],
                            &j[1],
                            ComplexPair::new(target[0], target[1]),
                            ComplexPair::new(target[2], target[3]),
                            d,
                        ),
                        Kind::Remainder { .. } => stage2_ic_term(&j[0], target[0], d),
                        Kind::Baseline => {
                            let a = j[0].value - target[0];
                            let b = j[0].dt(d) - target[1];
                            a * a + b * b
                        }
                    };
                    ((term * scale).id(), term.val())
                };
                tape.backward_into(theta, id, grad)?;
                Ok((term, 0.0))
            }
            Item::Boundary { axis, xa, xb, t, ic } => {
                let mut tape = ParamTape::new(&[*axis], theta.len());
                let (ica, icb) = match ic {
                    Some((a, b)) => (Some(a), Some(b)),
                    None => (None, None),
                };
                let oa = self.arch.record(&mut tape, theta, xa, *t, &FieldCtx { pert, gate, ic: ica })?;
                let ob = self.arch.record(&mut tape, theta, xb, *t, &FieldCtx { pert, gate, ic: icb })?;
                let (id, term) = {
                    let ja = tape.jets(oa);
                    let jb = tape.jets(ob);
                    let term = boundary_term(&ja, &jb, *axis);
                    ((term * scale).id(), term.val())
                };
                tape.backward_into(theta, id, grad)?;
                Ok((term, 0.0))
            }
        }
    }

    fn eval(&self, theta: &[f64], items: &[Item], perts: &[Perturbation]) -> Result<Eval> {
        let terms: Vec<AtomicU64> = (0..items.len()).map(|_| AtomicU64::new(0)).collect();
        let mags: Vec<AtomicU64> = (0..self.n_res).map(|_| AtomicU64::new(0)).collect();
        let res = batch_loss_grad(items.len(), theta.len(), self.chunk, |i, g| {
            let item = &items[i];
            match self.item(theta, item, &perts[i], g) {
                Ok((term, mag)) => {
                    store(&terms[i], term);
                    if i < self.n_res {
                        store(&mags[i], mag);
                    }
                    Ok(term * self.scale(item))
                }
                Err(e) => {
                    let v = nonfinite_as_inf(e)?;
                    store(&terms[i], v);
                    Ok(v)
                }
            }
        });
        let (loss, grad) = res?;
        let t: Vec<f64> = terms.iter().map(load).collect();
        let mean = |s: &[f64]| if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
        let (a, rest) = t.split_at(self.n_res);
        let (b, c) = rest.split_at(self.n_ic);
        let loss = if grad.iter().all(|g| g.is_finite()) { loss } else { f64::NAN };
        Ok(Eval { loss, grad, res: mean(a), ic: mean(b), bd: mean(c), magnitudes: mags.iter().map(load).collect() })
    }
}

struct StageSetup<'a> {
    kind: Kind<'a>,
    tag: StageTag,
    arch: NetArch,
    ic: Option<&'a IcData>,
}

fn build_items(setup: &StageSetup, spec: &ProblemSpec, s: &SamplerState, hard_ic: bool) -> Result<Vec<Item>> {
    let d = spec.dim();
    let full: Vec<usize> = (0..=d).collect();
    let ic_jets = |x: &[f64], coords: &[usize]| -> Option<IcJets> {
        if !hard_ic {
            return None;
        }
        let ic = setup.ic?;
        match setup.kind {
            Kind::Amplitude => Some(ic.amplitude_jets(x, coords)),
            Kind::Remainder { .. } => Some(ic.remainder_jets(x, coords)),
            Kind::Baseline => None,
        }
    };
    let res_items: Vec<Item> = s
        .residual
        .par_iter()
        .map(|p| -> Result<Item> {
            let z = match (setup.kind, setup.ic) {
                (Kind::Remainder { frozen }, Some(ic)) => frozen.z(ic, &p.x, p.t)?,
                _ => ComplexPair::default(),
            };
            Ok(Item::Residual { x: p.x.clone(), t: p.t, ic: ic_jets(&p.x, &full), z })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut items = res_items;
    let e2 = spec.eps * spec.eps;
    for p in &s.initial {
        let target = match (setup.kind, setup.ic) {
            (Kind::Amplitude, Some(ic)) => {
                let (z0, dz0) = ic.z_at(&p.x);
                [z0.re, z0.im, dz0.re, dz0.im]
            }
            (Kind::Remainder { .. }, Some(ic)) => [ic.remainder_velocity(&p.x), 0.0, 0.0, 0.0],
            _ => {
                let (p1, p2) = spec.phi(&p.x);
                [p1, p2 / e2, 0.0, 0.0]
            }
        };
        items.push(Item::Initial { x: p.x.clone(), ic: ic_jets(&p.x, &[d]), target });
    }
    for b in &s.boundary {
        let xb = b.partner(&spec.domain);
        let ic = match (ic_jets(&b.x, &[b.axis]), ic_jets(&xb, &[b.axis])) {
            (Some(a), Some(c)) => Some((a, c)),
            _ => None,
        };
        items.push(Item::Boundary { axis: b.axis, xa: b.x.clone(), xb, t: b.t, ic });
    }
    Ok(items)
}

fn draw_perts(arch: &NetArch, n: usize, rng: &mut Stream) -> Vec<Perturbation> {
    (0..n).map(|_| arch.draw(rng)).collect()
}

struct Probes {
    points: Vec<Collocation>,
    ic: Vec<Option<IcJets>>,
    dt: f64,
    pert: Perturbation,
}

impl Probes {
    fn new(setup: &StageSetup, spec: &ProblemSpec, cfg: &TrainConfig, rng: &mut Stream) -> Self {
        let dt = cfg.probe_dt_fraction * spec.t_final;
        let points: Vec<Collocation> = (0..cfg.probes)
            .map(|_| Collocation { x: uniform_point(&spec.domain, rng), t: rng.random_range(0.0..=(spec.t_final - dt)) })
            .collect();
        let ic = points
            .iter()
            .map(|p| {
                if !cfg.hard_ic {
                    return None;
                }
                let ic = setup.ic?;
                match setup.kind {
                    Kind::Amplitude => Some(ic.amplitude_jets(&p.x, &[])),
                    Kind::Remainder { .. } => Some(ic.remainder_jets(&p.x, &[])),
                    Kind::Baseline => None,
                }
            })
            .collect();
        Probes { points, ic, dt, pert: setup.arch.stratified() }
    }

    /// Mean normalized, gated correlation over probe points and outputs.
    fn mean(&self, arch: &NetArch, theta: &[f64], gate: Option<&GateState>, t_final: f64) -> Result<f64> {
        if self.points.is_empty() {
            return Ok(0.0);
        }
        let vals: Vec<f64> = self
            .points
            .par_iter()
            .zip(&self.ic)
            .map(|(p, ic)| -> Result<f64> {
                let mut acc = 0.0;
                for c in 0..arch.outputs() {
                    let probe = FieldProbe { arch, pert: &self.pert, gate, ic: ic.as_ref(), component: c };
                    acc += normalized_correlation(&probe, theta, &p.x, p.t, self.dt, gate.map(|g| (g, t_final)))?;
                }
                Ok(acc / arch.outputs() as f64)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn train_generic(spec: &ProblemSpec, cfg: &TrainConfig, setup: StageSetup, init: Option<Vec<f64>>) -> Result<TrainOutcome> {
    spec.validate()?;
    cfg.validate()?;
    let arch = setup.arch.clone();
    let mut theta = match init {
        Some(t) => {
            if t.len() != arch.n_params() {
                return Err(TrainError::Structural("initial parameters do not match the architecture".into()));
            }
            t
        }
        None => arch.init(&mut substream(cfg.seed, &format!("init/{:?}", setup.tag))),
    };
    let mut gate = match setup.kind {
        Kind::Baseline => None,
        _ => cfg.gate.state(),
    };
    let mut sampler_rng = substream(cfg.seed, &format!("sampler/{:?}", setup.tag));
    let mut pert_rng = substream(cfg.seed, &format!("perturbation/{:?}", setup.tag));
    let mut probe_rng = substream(cfg.seed, &format!("probe/{:?}", setup.tag));
    let window = sampling_window(gate.as_ref(), spec.t_final, &cfg.resample);
    let mut sampler = SamplerState::new(spec, cfg.n_residual, cfg.n_initial, cfg.n_boundary, window, &mut sampler_rng);
    let mut items = build_items(&setup, spec, &sampler, cfg.hard_ic)?;
    let probes = Probes::new(&setup, spec, cfg, &mut probe_rng);
    let mut report = TrainReport { seed: cfg.seed, stage: setup.tag, rows: Vec::new(), lbfgs_fallbacks: 0, resamples: 0, events: Vec::new() };
    let mut adam = Adam::new(theta.len(), cfg.lr);
    let mut lbfgs = Lbfgs::new(cfg.lbfgs);
    let mut perts = draw_perts(&arch, items.len(), &mut pert_rng);
    let mut cached: Option<(f64, Vec<f64>)> = None;
    let start = Instant::now();
    let mut last_good = theta.clone();
    let ckpt = |theta: &[f64], gate: &Option<GateState>| Checkpoint {
        arch: arch.clone(),
        gate: gate.clone(),
        seed: cfg.seed,
        stage: setup.tag,
        theta: theta.to_vec(),
    };
    for iter in 0..cfg.iterations() {
        let phase = if iter < cfg.adam_iters { Phase::Adam } else { Phase::Lbfgs };
        if iter > 0 && cfg.resample.every > 0 && iter % cfg.resample.every == 0 {
            let (next, swapped) = resample_gated(&sampler, &sampler.last_residuals, gate.as_ref(), spec, &cfg.resample, &mut sampler_rng)?;
            sampler = next;
            items = build_items(&setup, spec, &sampler, cfg.hard_ic)?;
            report.resamples += 1;
            if !swapped.is_empty() {
                perts = draw_perts(&arch, items.len(), &mut pert_rng);
                cached = None;
                lbfgs.reset();
            }
        }
        if phase == Phase::Adam {
            perts = draw_perts(&arch, items.len(), &mut pert_rng);
        } else if iter == cfg.adam_iters {
            cached = None;
        }
        let objective = Objective {
            kind: setup.kind,
            spec,
            arch: &arch,
            weights: cfg.weights,
            gate: gate.clone(),
            gated_residual: cfg.gated_residual,
            chunk: cfg.chunk,
            n_res: sampler.residual.len(),
            n_ic: sampler.initial.len(),
            n_bd: sampler.boundary.len(),
        };
        let (loss, parts) = match phase {
            Phase::Adam => {
                let ev = objective.eval(&theta, &items, &perts)?;
                if !ev.loss.is_finite() {
                    return Err(TrainError::NonFinite { iter, last_good: Box::new(ckpt(&last_good, &gate)) });
                }
                adam.step(&mut theta, &ev.grad);
                sampler.last_residuals = ev.magnitudes;
                (ev.loss, (ev.res, ev.ic, ev.bd))
            }
            Phase::Lbfgs => {
                let (f0, g0) = match cached.take() {
                    Some(c) => c,
                    None => {
                        let ev = objective.eval(&theta, &items, &perts)?;
                        (ev.loss, ev.grad)
                    }
                };
                if !f0.is_finite() {
                    return Err(TrainError::NonFinite { iter, last_good: Box::new(ckpt(&last_good, &gate)) });
                }
                let mut last = None;
                let step = lbfgs.step(&mut theta, f0, &g0, |th| {
                    let ev = objective.eval(th, &items, &perts)?;
                    let out = (ev.loss, ev.grad.clone());
                    last = Some(ev);
                    Ok(out)
                })?;
                if step.fell_back {
                    report.lbfgs_fallbacks += 1;
                    report.events.push(format!("iteration {iter}: line search failed, gradient step taken"));
                }
                let parts = match last {
                    Some(ev) if ev.loss == step.loss => {
                        sampler.last_residuals = ev.magnitudes.clone();
                        (ev.res, ev.ic, ev.bd)
                    }
                    _ => {
                        let ev = objective.eval(&theta, &items, &perts)?;
                        sampler.last_residuals = ev.magnitudes.clone();
                        (ev.res, ev.ic, ev.bd)
                    }
                };
                cached = Some((step.loss, step.grad));
                (step.loss, parts)
            }
        };
        if !loss.is_finite() || theta.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite { iter, last_good: Box::new(ckpt(&last_good, &gate)) });
        }
        last_good.copy_from_slice(&theta);
        let g_mean = probes.mean(&arch, &theta, gate.as_ref(), spec.t_final)?;
        if let Some(g) = gate.as_mut() {
            g.update(g_mean);
        }
        report.rows.push(IterRecord {
            iter,
            phase,
            loss_total: loss,
            loss_res: parts.0,
            loss_ic: parts.1,
            loss_bd: parts.2,
            gamma: gate.as_ref().map_or(0.0, |g| g.gamma),
            g_mean,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(TrainOutcome { params: NetworkParams::new(arch, theta)?, gate, report })
}

/// Trains the amplitude network `z` on the NLSW residual.
pub fn train_stage1(spec: &ProblemSpec, net: &NetworkConfig, cfg: &TrainConfig, ic: &IcData) -> Result<TrainOutcome> {
    let arch = net.build(spec, 2)?;
    train_generic(spec, cfg, StageSetup { kind: Kind::Amplitude, tag: StageTag::Amplitude, arch, ic: Some(ic) }, None)
}

/// Trains the remainder network `r` against the frozen amplitude network.
pub fn train_stage2(spec: &ProblemSpec, stage1: &Checkpoint, net: &NetworkConfig, cfg: &TrainConfig, ic: &IcData) -> Result<TrainOutcome> {
    let frozen = FrozenAmplitude::new(stage1, cfg.hard_ic)?;
    let arch = net.build(spec, 1)?;
    train_generic(spec, cfg, StageSetup { kind: Kind::Remainder { frozen: &frozen }, tag: StageTag::Remainder, arch, ic: Some(ic) }, None)
}

/// Vanilla tanh network on `u` with soft initial and boundary losses.
pub fn train_baseline(spec: &ProblemSpec, hidden: &[usize], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let arch = NetArch::Mlp(MlpArch { dim: spec.dim(), hidden: hidden.to_vec(), outputs: 1 });
    let mut cfg = cfg.clone();
    cfg.hard_ic = false;
    cfg.gated_residual = false;
    train_generic(spec, &cfg, StageSetup { kind: Kind::Baseline, tag: StageTag::Baseline, arch, ic: None }, None)
}

/// Evaluates a checkpointed network on every `(grid point, time)` pair;
/// `out[i][j]` holds the outputs at `times[i]`, grid point `j`.
pub fn predict(ckpt: &Checkpoint, ic: Option<&IcData>, hard_ic: bool, grid: &Grid, times: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
    let pert = ckpt.arch.stratified();
    let points: Vec<Vec<f64>> = (0..grid.len()).map(|i| grid.point(i)).collect();
    let jets: Vec<Option<IcJets>> = points
        .iter()
        .map(|x| match (hard_ic, ic, ckpt.stage) {
            (true, Some(ic), StageTag::Amplitude) => Some(ic.amplitude_jets(x, &[])),
            (true, Some(ic), StageTag::Remainder) => Some(ic.remainder_jets(x, &[])),
            _ => None,
        })
        .collect();
    times
        .iter()
        .map(|&t| {
            points
                .par_iter()
                .zip(&jets)
                .map(|(x, j)| {
                    ckpt.arch
                        .eval(&ckpt.theta, x, t, &FieldCtx { pert: &pert, gate: ckpt.gate.as_ref(), ic: j.as_ref() })
                        .map_err(TrainError::from)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmae: f64,
    pub rrmse: f64,
}

impl Metrics {
    pub fn of(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Self> {
        Ok(Metrics { rmae: rmae(pred, truth)?, rrmse: rrmse(pred, truth)? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub amplitude: Metrics,
    pub full: Option<Metrics>,
    pub selected: Reconstruction,
    pub selected_metrics: Metrics,
    pub u_selected: Vec<Vec<f64>>,
}

/// Reconstructs `u` from the trained networks and scores it against `truth`.
pub fn evaluate_models(
    spec: &ProblemSpec,
    stage1: &Checkpoint,
    stage2: Option<&Checkpoint>,
    ic: &IcData,
    hard_ic: bool,
    grid: &Grid,
    times: &[f64],
    truth: &[Vec<f64>],
) -> Result<Evaluation> {
    let z: Vec<Vec<ComplexPair>> = predict(stage1, Some(ic), hard_ic, grid, times)?
        .into_iter()
        .map(|snap| snap.into_iter().map(|o| ComplexPair::new(o[0], o[1])).collect())
        .collect();
    let u_amp = wkb_reconstruct(&z, None, spec.eps, times)?;
    let amplitude = Metrics::of(&u_amp, truth)?;
    let Some(s2) = stage2 else {
        return Ok(Evaluation { amplitude, full: None, selected: Reconstruction::AmplitudeOnly, selected_metrics: amplitude, u_selected: u_amp });
    };
    let r: Vec<Vec<f64>> = predict(s2, Some(ic), hard_ic, grid, times)?.into_iter().map(|snap| snap.into_iter().map(|o| o[0]).collect()).collect();
    let u_full = wkb_reconstruct(&z, Some(&r), spec.eps, times)?;
    let full = Metrics::of(&u_full, truth)?;
    let (chosen, tag) = error_criterion(&u_amp, &u_full, truth)?;
    let selected_metrics = if tag == Reconstruction::WithRemainder { full } else { amplitude };
    Ok(Evaluation { amplitude, full: Some(full), selected: tag, selected_metrics, u_selected: chosen.to_vec() })
}

/// Baseline prediction of `u` on the grid.
pub fn predict_baseline(ckpt: &Checkpoint, grid: &Grid, times: &[f64]) -> Result<Vec<Vec<f64>>> {
    Ok(predict(ckpt, None, false, grid, times)?.into_iter().map(|s| s.into_iter().map(|o| o[0]).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_closed_form_values() {
        let g = GateState::with_gamma(0.3);
        assert_eq!(g.h(0.3 * 5.0, 5.0), 0.5);
        let g0 = GateState::with_gamma(0.0);
        assert!((g0.h(5.0, 5.0) - (1.0 - 5f64.tanh()) / 2.0).abs() < 1e-15);
        assert!((g0.h(5.0, 5.0) - 4.5397869e-5).abs() < 1e-12);
        let open = GateState::with_gamma(1.5);
        for i in 0..=10 {
            assert!(open.h(i as f64 / 10.0, 1.0) >= (1.0 - (-2.5f64).tanh()) / 2.0 - 1e-15);
        }
    }

    #[test]
    fn gamma_increments() {
        let g = GateState::default();
        assert_eq!(gamma_update(&g, 0.0).last_increment, g.eta * g.delta_max);
        assert_eq!(g.increment(0.0), 1e-4);
        assert!(g.increment(1e3) < 1e-300);
        let g = GateState { delta_max: 1.0, ..GateState::default() };
        assert!((g.increment(10f64.ln()) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn gate_derivatives_match_differences() {
        for variant in [GateVariant::Tanh, GateVariant::ReluTanh] {
            let g = GateState { variant, gamma: 0.6, ..GateState::default() };
            let (tf, h) = (3.0, 1e-4);
            for &t in &[0.2, 1.1, 1.7] {
                let (_, d1, d2) = g.h_derivs(t, tf);
                let fd1 = (g.h(t + h, tf) - g.h(t - h, tf)) / (2.0 * h);
                let fd2 = (g.h(t + h, tf) - 2.0 * g.h(t, tf) + g.h(t - h, tf)) / (h * h);
                assert!((d1 - fd1).abs() < 1e-6, "{variant:?} {t}");
                assert!((d2 - fd2).abs() < 1e-4, "{variant:?} {t}");
            }
        }
    }

    #[test]
    fn window_end_matches_floor() {
        for variant in [GateVariant::Tanh, GateVariant::ReluTanh] {
            let g = GateState { variant, gamma: 0.4, ..GateState::default() };
            let end = g.window_end(2.0, 0.05).unwrap();
            assert!((g.h(end, 2.0) - 0.05).abs() < 1e-12);
        }
        let closed = GateState::with_gamma(-3.0);
        assert_eq!(closed.window_end(1.0, 0.05), None);
    }

    #[test]
    fn adam_zero_gradient_and_quadratic() {
        let mut a = Adam::new(2, 0.1);
        let mut th = vec![1.0, -2.0];
        a.step(&mut th, &[0.0, 0.0]);
        assert_eq!(th, vec![1.0, -2.0]);
        let mut a = Adam::new(1, 0.1);
        let mut th = vec![1.0];
        // independent scalar recursion
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut losses = vec![1.0];
        for k in 1..=50 {
            let g = [2.0 * th[0]];
            a.step(&mut th, &g);
            let gx = 2.0 * x;
            m = 0.9 * m + 0.1 * gx;
            v = 0.999 * v + 0.001 * gx * gx;
            x -= 0.1 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
            assert!((th[0] - x).abs() < 1e-15);
            losses.push(th[0] * th[0]);
        }
        assert!(losses[..12].windows(2).all(|w| w[1] < w[0]));
        assert!(losses[50] < 1e-4);
    }

    #[test]
    fn lbfgs_solves_quadratic() {
        let n = 10;
        let diag: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = x.iter().zip(&diag).map(|(a, d)| 0.5 * d * (a - 1.0) * (a - 1.0)).sum();
            Ok((v, x.iter().zip(&diag).map(|(a, d)| d * (a - 1.0)).collect()))
        };
        let mut x = vec![0.0; n];
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        let (mut l, mut g) = f(&x).unwrap();
        let mut it = 0;
        while vdot(&g, &g).sqrt() >= 1e-8 && it < 50 {
            let s = opt.step(&mut x, l, &g, f).unwrap();
            l = s.loss;
            g = s.grad;
            it += 1;
        }
        assert!(vdot(&g, &g).sqrt() < 1e-8, "stalled after {it}");
    }

    #[test]
    fn lbfgs_zero_gradient_is_noop() {
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        let mut x = vec![3.0];
        let s = opt.step(&mut x, 1.0, &[0.0], |_| panic!("no evaluation expected")).unwrap();
        assert_eq!(x, vec![3.0]);
        assert_eq!(s.evaluations, 0);
    }

    fn tiny_spec() -> ProblemSpec {
        ProblemSpec::benchmark_1d(0.5)
    }

    #[test]
    fn resample_keeps_sizes_and_window() {
        let spec = tiny_spec();
        let mut rng = substream(1, "s");
        let s = SamplerState::new(&spec, 40, 8, 8, (0.0, 5.0), &mut rng);
        let g = GateState::with_gamma(0.2);
        let res: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let (n, swapped) = resample_gated(&s, &res, Some(&g), &spec, &ResampleConfig::default(), &mut rng).unwrap();
        assert_eq!(swapped.len(), 8);
        assert_eq!(n.residual.len(), 40);
        assert_eq!(n.initial, s.initial);
        for &i in &swapped {
            assert!(g.h(n.residual[i].t, spec.t_final) >= 0.05 - 1e-12);
        }
        let cfg = ResampleConfig { swap_fraction: 0.0, ..ResampleConfig::default() };
        let (same, sw) = resample_gated(&s, &res, Some(&g), &spec, &cfg, &mut rng).unwrap();
        assert!(sw.is_empty());
        assert_eq!(same.residual, s.residual);
    }

    #[test]
    fn resample_ties_go_to_lowest_index() {
        let spec = tiny_spec();
        let mut rng = substream(2, "s");
        let s = SamplerState::new(&spec, 10, 1, 1, (0.0, 5.0), &mut rng);
        let (_, swapped) = resample_gated(&s, &[1.0; 10], None, &spec, &ResampleConfig::default(), &mut rng).unwrap();
        assert_eq!(swapped, vec![0, 1]);
    }

    #[test]
    fn empty_window_falls_back() {
        let g = GateState::with_gamma(-5.0);
        let cfg = ResampleConfig::default();
        assert_eq!(sampling_window(Some(&g), 5.0, &cfg), (0.0, 0.25));
    }

    #[test]
    fn report_hash_ignores_wall_time() {
        let row = IterRecord { iter: 0, phase: Phase::Adam, loss_total: 1.0, loss_res: 0.5, loss_ic: 0.25, loss_bd: 0.25, gamma: 1.0, g_mean: 0.3, wall_ms: 5 };
        let a = TrainReport { seed: 1, stage: StageTag::Amplitude, rows: vec![row.clone()], lbfgs_fallbacks: 0, resamples: 0, events: vec![] };
        let mut b = a.clone();
        b.rows[0].wall_ms = 99;
        assert_eq!(a.hash(), b.hash());
        b.rows[0].loss_res = 0.6;
        assert_ne!(a.hash(), b.hash());
    }
}
