//! PDE-level pieces: problem instances, residuals, initial data,
//! reconstruction and error metrics.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Jet2, Scalar};
use crate::spectral::{Grid, SpectralError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("initial data error: {0}")]
    Data(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error(transparent)]
    Spectral(#[from] Box<SpectralError>),
}

pub type Result<T> = std::result::Result<T, PhysicsError>;

type InitFn = Arc<dyn Fn(&[f64]) -> (f64, f64) + Send + Sync>;

/// Initial-data selector returning `(φ1, φ2)`.
#[derive(Clone)]
pub enum InitialData {
    /// `φ1 = e^{−x²}/√π`, `φ2 = ½ sech(x²) sin x`.
    Benchmark1d,
    /// `φ1 = 3 sin x / (e^{x²/2} + e^{−x²/2})`, `φ2 = 2e^{−x²}/√π`.
    Benchmark1dAlt,
    /// Two Gaussians in `φ1`, one centred Gaussian in `φ2`.
    Benchmark2d,
    Benchmark3d,
    Zero,
    Constant { phi1: f64, phi2: f64 },
    /// `φ1 = cos(2πj(x−a)/L)` along every dimension (product), `φ2 = 0`.
    Cosine { mode: usize },
    Custom(InitFn),
}

impl fmt::Debug for InitialData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialData::Custom(_) => write!(f, "Custom(..)"),
            other => write!(f, "{}", other.name()),
        }
    }
}

impl InitialData {
    pub fn name(&self) -> String {
        match self {
            InitialData::Benchmark1d => "benchmark1d".into(),
            InitialData::Benchmark1dAlt => "benchmark1d-alt".into(),
            InitialData::Benchmark2d => "benchmark2d".into(),
            InitialData::Benchmark3d => "benchmark3d".into(),
            InitialData::Zero => "zero".into(),
            InitialData::Constant { phi1, phi2 } => format!("constant:{phi1},{phi2}"),
            InitialData::Cosine { mode } => format!("cosine:{mode}"),
            InitialData::Custom(_) => "custom".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        Some(match s {
            "benchmark1d" => InitialData::Benchmark1d,
            "benchmark1d-alt" => InitialData::Benchmark1dAlt,
            "benchmark2d" => InitialData::Benchmark2d,
            "benchmark3d" => InitialData::Benchmark3d,
            "zero" => InitialData::Zero,
            _ => {
                if let Some(rest) = s.strip_prefix("cosine:") {
                    InitialData::Cosine { mode: rest.trim().parse().ok()? }
                } else if let Some(rest) = s.strip_prefix("constant:") {
                    let (a, b) = rest.split_once(',')?;
                    InitialData::Constant { phi1: a.trim().parse().ok()?, phi2: b.trim().parse().ok()? }
                } else {
                    return None;
                }
            }
        })
    }

    /// `(φ1(x), φ2(x))` on the given domain.
    pub fn eval(&self, x: &[f64], domain: &[(f64, f64)]) -> (f64, f64) {
        let sqpi = std::f64::consts::PI.sqrt();
        match self {
            InitialData::Benchmark1d => {
                let x = x[0];
                ((-x * x).exp() / sqpi, 0.5 * sech(x * x) * x.sin())
            }
            InitialData::Benchmark1dAlt => {
                let x = x[0];
                (3.0 * x.sin() / ((x * x / 2.0).exp() + (-x * x / 2.0).exp()), 2.0 * (-x * x).exp() / sqpi)
            }
            InitialData::Benchmark2d => {
                let (x, y) = (x[0], x[1]);
                (
                    (-(x + 2.0).powi(2) - y * y).exp() + (-(x - 2.0).powi(2) - y * y).exp(),
                    (-x * x - y * y).exp(),
                )
            }
            InitialData::Benchmark3d => {
                let (x, y, z) = (x[0], x[1], x[2]);
                (2.0 * (-x * x - 2.0 * y * y - 3.0 * z * z).exp(), (-(x + 0.5).powi(2) - y * y - z * z).exp())
            }
            InitialData::Zero => (0.0, 0.0),
            InitialData::Constant { phi1, phi2 } => (*phi1, *phi2),
            InitialData::Cosine { mode } => {
                let mut v = 1.0;
                for (xi, (a, b)) in x.iter().zip(domain) {
                    v *= (2.0 * std::f64::consts::PI * *mode as f64 * (xi - a) / (b - a)).cos();
                }
                (v, 0.0)
            }
            InitialData::Custom(f) => f(x),
        }
    }
}

fn sech(x: f64) -> f64 {
    if x.abs() > 700.0 {
        0.0
    } else {
        1.0 / x.cosh()
    }
}

/// One NKGE instance `ε²u_tt − Δu + ε⁻²u + λu³ = 0` with `u(·,0) = φ1`,
/// `u_t(·,0) = ε⁻²φ2` on a periodic box.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub eps: f64,
    pub lambda: f64,
    pub domain: Vec<(f64, f64)>,
    pub t_final: f64,
    pub init: InitialData,
}

impl ProblemSpec {
    pub fn new(eps: f64, lambda: f64, domain: Vec<(f64, f64)>, t_final: f64, init: InitialData) -> Result<Self> {
        let s = ProblemSpec { eps, lambda, domain, t_final, init };
        s.validate()?;
        Ok(s)
    }

    /// The 1D benchmark on `[−16, 16]`, `λ = 1`, `T = 5`.
    pub fn benchmark_1d(eps: f64) -> Self {
        ProblemSpec { eps, lambda: 1.0, domain: vec![(-16.0, 16.0)], t_final: 5.0, init: InitialData::Benchmark1d }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(PhysicsError::Invalid(format!("eps must lie in (0, 1], got {}", self.eps)));
        }
        if !self.lambda.is_finite() {
            return Err(PhysicsError::Invalid("lambda must be finite".into()));
        }
        if self.domain.is_empty() {
            return Err(PhysicsError::Invalid("domain needs at least one dimension".into()));
        }
        if self.domain.iter().any(|(a, b)| !(b > a) || !a.is_finite() || !b.is_finite()) {
            return Err(PhysicsError::Invalid("each interval needs b > a".into()));
        }
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(PhysicsError::Invalid("final time must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.domain.len()
    }

    pub fn periods(&self) -> Vec<f64> {
        self.domain.iter().map(|(a, b)| b - a).collect()
    }

    pub fn phi(&self, x: &[f64]) -> (f64, f64) {
        self.init.eval(x, &self.domain)
    }
}

/// Value of `z` with real and imaginary parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ComplexPair {
    pub re: f64,
    pub im: f64,
}

impl ComplexPair {
    pub fn new(re: f64, im: f64) -> Self {
        ComplexPair { re, im }
    }
    pub fn norm_sqr(&self) -> f64 {
        self.re * self.re + self.im * self.im
    }
    pub fn to_complex(self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }
}

impl From<Complex64> for ComplexPair {
    fn from(c: Complex64) -> Self {
        ComplexPair { re: c.re, im: c.im }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_res: f64,
    pub w_ic: f64,
    pub w_bd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_res: 1.0, w_ic: 1.0, w_bd: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_res, self.w_ic, self.w_bd].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(PhysicsError::Invalid("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// `ε²u_tt − Δu + ε⁻²u + λu³`.
pub fn nkge_residual<S: Scalar>(u: &Jet2<S>, spec: &ProblemSpec) -> S {
    let d = spec.dim();
    let e2 = spec.eps * spec.eps;
    let v = u.value;
    u.dtt(d) * e2 - u.laplacian(d) + v * (1.0 / e2) + v * v * v * spec.lambda
}

/// The two real projections of `2i z_t + ε² z_tt − Δz + 3λ|z|²z`:
/// `(imaginary part, real part)`.
pub fn nlsw_residual<S: Scalar>(re: &Jet2<S>, im: &Jet2<S>, spec: &ProblemSpec) -> (S, S) {
    nlsw_residual_eps(re, im, spec.eps, spec.lambda, spec.dim())
}

/// Same as [`nlsw_residual`] with an explicit wave coefficient; `eps = 0`
/// gives the Schrödinger limit.
pub fn nlsw_residual_eps<S: Scalar>(re: &Jet2<S>, im: &Jet2<S>, eps: f64, lambda: f64, d: usize) -> (S, S) {
    let e2 = eps * eps;
    let m = (re.value * re.value + im.value * im.value) * (3.0 * lambda);
    let r_im = re.dt(d) * 2.0 + im.dtt(d) * e2 - im.laplacian(d) + m * im.value;
    let r_re = im.dt(d) * (-2.0) + re.dtt(d) * e2 - re.laplacian(d) + m * re.value;
    (r_im, r_re)
}

/// Coupling `f_r(z, r; t)` of the remainder equation.
pub fn coupling<S: Scalar>(r: S, z: ComplexPair, spec: &ProblemSpec, t: f64) -> S {
    let tau = t / (spec.eps * spec.eps);
    let zc = z.to_complex();
    let ph = |k: f64| Complex64::from_polar(1.0, k * tau);
    let a3 = (ph(3.0) * zc * zc * zc).re;
    let a2 = (ph(2.0) * zc * zc).re;
    let a1 = (ph(1.0) * zc).re;
    let lam = spec.lambda;
    r.lift(2.0 * lam * a3) + r * (6.0 * lam * a2) + r * r * (6.0 * lam * a1) + r * (6.0 * lam * z.norm_sqr()) + r * r * r * lam
}

/// `ε²r_tt − Δr + ε⁻²r + f_r`.
pub fn remainder_residual<S: Scalar>(r: &Jet2<S>, z: ComplexPair, spec: &ProblemSpec, t: f64) -> S {
    let d = spec.dim();
    let e2 = spec.eps * spec.eps;
    r.dtt(d) * e2 - r.laplacian(d) + r.value * (1.0 / e2) + coupling(r.value, z, spec, t)
}

/// Checks that `φ1`, `φ2` match across every pair of opposite faces.
pub fn check_periodic(spec: &ProblemSpec, grid: &Grid) -> Result<()> {
    let d = spec.dim();
    for axis in 0..d {
        for idx in 0..grid.len() {
            let mut p = grid.point(idx);
            if grid.multi_index(idx)[axis] != 0 {
                continue;
            }
            p[axis] = spec.domain[axis].0;
            let (a1, a2) = spec.phi(&p);
            p[axis] = spec.domain[axis].1;
            let (b1, b2) = spec.phi(&p);
            if (a1 - b1).abs() > 1e-8 || (a2 - b2).abs() > 1e-8 {
                return Err(PhysicsError::Data(format!("initial data jumps across the boundary of dimension {axis}")));
            }
        }
    }
    Ok(())
}

/// `z0 = ½(φ1 − iφ2)` and `dz0 = (i/2)(−Δz0 + 3λ|z0|²z0)` on the grid.
pub fn prepare_z_initial(spec: &ProblemSpec, grid: &Grid) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    check_periodic(spec, grid)?;
    let z0: Vec<Complex64> = (0..grid.len())
        .map(|i| {
            let (p1, p2) = spec.phi(&grid.point(i));
            Complex64::new(0.5 * p1, -0.5 * p2)
        })
        .collect();
    let lap = grid.laplacian(&z0);
    let half_i = Complex64::new(0.0, 0.5);
    let dz0 = z0
        .iter()
        .zip(&lap)
        .map(|(z, l)| half_i * (-l + 3.0 * spec.lambda * z.norm_sqr() * z))
        .collect();
    Ok((z0, dz0))
}

/// `r0 = 0` and `dr0 = −2 Re(dz0)`.
pub fn prepare_r_initial(dz0: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
    (vec![0.0; dz0.len()], dz0.iter().map(|c| -2.0 * c.re).collect())
}

/// `u = 2[z_re cos(t/ε²) − z_im sin(t/ε²)] + r` with `z[i][j]` the value at
/// time `times[i]`, grid point `j`.
pub fn wkb_reconstruct(z: &[Vec<ComplexPair>], r: Option<&[Vec<f64>]>, eps: f64, times: &[f64]) -> Result<Vec<Vec<f64>>> {
    if z.len() != times.len() {
        return Err(PhysicsError::Structural("one z snapshot per time required".into()));
    }
    if let Some(r) = r {
        if r.len() != z.len() || r.iter().zip(z).any(|(a, b)| a.len() != b.len()) {
            return Err(PhysicsError::Structural("z and r live on different grids".into()));
        }
    }
    let e2 = eps * eps;
    Ok(z
        .iter()
        .zip(times)
        .enumerate()
        .map(|(i, (zs, &t))| {
            let (s, c) = (t / e2).sin_cos();
            zs.iter()
                .enumerate()
                .map(|(j, zj)| 2.0 * (zj.re * c - zj.im * s) + r.map_or(0.0, |r| r[i][j]))
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reconstruction {
    AmplitudeOnly,
    WithRemainder,
}

impl fmt::Display for Reconstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reconstruction::AmplitudeOnly => "amplitude-only",
            Reconstruction::WithRemainder => "with-remainder",
        })
    }
}

fn flat(f: &[Vec<f64>]) -> impl Iterator<Item = f64> + '_ {
    f.iter().flat_map(|r| r.iter().copied())
}

fn check_shapes(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(PhysicsError::Structural("fields live on different grids".into()));
    }
    Ok(())
}

pub fn l2_error(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    check_shapes(pred, truth)?;
    Ok(flat(pred).zip(flat(truth)).map(|(p, u)| (p - u) * (p - u)).sum::<f64>().sqrt())
}

/// Picks the reconstruction with the smaller L² error; ties go to the
/// amplitude-only field.
pub fn error_criterion<'a>(u_amp: &'a [Vec<f64>], u_full: &'a [Vec<f64>], truth: &[Vec<f64>]) -> Result<(&'a [Vec<f64>], Reconstruction)> {
    let ea = l2_error(u_amp, truth)?;
    let ef = l2_error(u_full, truth)?;
    Ok(if ef < ea { (u_full, Reconstruction::WithRemainder) } else { (u_amp, Reconstruction::AmplitudeOnly) })
}

/// `√(Σ|e| / Σ|u|)`, or the plain ratio when `with_sqrt` is false.
pub fn rmae_with(pred: &[Vec<f64>], truth: &[Vec<f64>], with_sqrt: bool) -> Result<f64> {
    check_shapes(pred, truth)?;
    let num: f64 = flat(pred).zip(flat(truth)).map(|(p, u)| (p - u).abs()).sum();
    let den: f64 = flat(truth).map(f64::abs).sum();
    if den == 0.0 {
        return Err(PhysicsError::Metric("truth has zero norm".into()));
    }
    Ok(if with_sqrt { (num / den).sqrt() } else { num / den })
}

pub fn rmae(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    rmae_with(pred, truth, true)
}

/// `√(Σe² / Σu²)`.
pub fn rrmse(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    check_shapes(pred, truth)?;
    let num: f64 = flat(pred).zip(flat(truth)).map(|(p, u)| (p - u) * (p - u)).sum();
    let den: f64 = flat(truth).map(|u| u * u).sum();
    if den == 0.0 {
        return Err(PhysicsError::Metric("truth has zero norm".into()));
    }
    Ok((num / den).sqrt())
}

/// Per-point loss pieces, already squared.
#[derive(Debug, Clone, Default)]
pub struct LossTerms<S> {
    pub res: Vec<S>,
    pub ic: Vec<S>,
    pub bd: Vec<S>,
}

fn mean<S: Scalar>(xs: &[S], zero: S) -> S {
    if xs.is_empty() {
        return zero;
    }
    let mut acc = zero;
    for &x in xs {
        acc = acc + x;
    }
    acc * (1.0 / xs.len() as f64)
}

fn weighted<S: Scalar>(t: &LossTerms<S>, w: &LossWeights, zero: S) -> S {
    mean(&t.res, zero) * w.w_res + mean(&t.ic, zero) * w.w_ic + mean(&t.bd, zero) * w.w_bd
}

/// `w_res·mean(res) + w_ic·mean(ic) + w_bd·mean(bd)` for the amplitude stage.
pub fn assemble_loss_stage1<S: Scalar>(terms: &LossTerms<S>, w: &LossWeights, zero: S) -> S {
    weighted(terms, w, zero)
}

/// Same weighted mean-square assembly for the remainder stage.
pub fn assemble_loss_stage2<S: Scalar>(terms: &LossTerms<S>, w: &LossWeights, zero: S) -> S {
    weighted(terms, w, zero)
}

/// Squared amplitude residual at one point, scaled by the gate weight.
pub fn stage1_residual_term<S: Scalar>(re: &Jet2<S>, im: &Jet2<S>, spec: &ProblemSpec, h: f64) -> S {
    let (a, b) = nlsw_residual(re, im, spec);
    (a * a + b * b) * h
}

/// Mismatch of `z` and `∂t z` against prepared data at `t = 0`.
pub fn stage1_ic_term<S: Scalar>(re: &Jet2<S>, im: &Jet2<S>, z0: ComplexPair, dz0: ComplexPair, d: usize) -> S {
    let a = re.value - z0.re;
    let b = im.value - z0.im;
    let c = re.dt(d) - dz0.re;
    let e = im.dt(d) - dz0.im;
    a * a + b * b + c * c + e * e
}

/// Value and normal-derivative mismatch between paired boundary points.
pub fn boundary_term<S: Scalar>(at_a: &[Jet2<S>], at_b: &[Jet2<S>], axis: usize) -> S {
    let mut acc = at_a[0].value.lift(0.0);
    for (ja, jb) in at_a.iter().zip(at_b) {
        let v = ja.value - jb.value;
        let g = ja.d1(axis).expect("boundary jet needs the normal derivative") - jb.d1(axis).expect("boundary jet needs the normal derivative");
        acc = acc + v * v + g * g;
    }
    acc
}

pub fn stage2_residual_term<S: Scalar>(r: &Jet2<S>, z: ComplexPair, spec: &ProblemSpec, t: f64, h: f64) -> S {
    let v = remainder_residual(r, z, spec, t);
    v * v * h
}

/// `r(·,0)² + (∂t r(·,0) − dr0)²`.
pub fn stage2_ic_term<S: Scalar>(r: &Jet2<S>, dr0: f64, d: usize) -> S {
    let c = r.dt(d) - dr0;
    r.value * r.value + c * c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn jet(value: f64, d1: &[f64], d2: &[f64]) -> Jet2 {
        Jet2 { value, coords: (0..d1.len()).collect(), d1: d1.to_vec(), d2: d2.to_vec() }
    }

    fn spec(eps: f64, lambda: f64) -> ProblemSpec {
        ProblemSpec { eps, lambda, domain: vec![(-16.0, 16.0)], t_final: 1.0, init: InitialData::Zero }
    }

    #[test]
    fn nkge_residual_cases() {
        let s = spec(0.3, 1.0);
        assert_eq!(nkge_residual(&jet(0.0, &[0.0, 0.0], &[0.0, 0.0]), &s), 0.0);
        let s1 = spec(1.0, 1.0);
        let c = 0.7;
        assert!((nkge_residual(&jet(c, &[0.0, 0.0], &[0.0, 0.0]), &s1) - (c + c * c * c)).abs() < 1e-15);
    }

    #[test]
    fn linear_plane_wave_solves_nkge() {
        let s = spec(0.4, 0.0);
        let k = 1.3;
        let w = (1.0 + s.eps * s.eps * k * k).sqrt() / (s.eps * s.eps);
        for &(x, t) in &[(0.1, 0.2), (-3.0, 0.9), (2.5, 0.05)] {
            let (cx, sx) = ((k * x).cos(), (k * x).sin());
            let (ct, st) = ((w * t).cos(), (w * t).sin());
            let u = jet(cx * ct, &[-k * sx * ct, -w * cx * st], &[-k * k * cx * ct, -w * w * cx * ct]);
            assert!(nkge_residual(&u, &s).abs() < 1e-10);
        }
    }

    #[test]
    fn remainder_residual_cases() {
        let s = spec(1.0, 1.0);
        let zero = jet(0.0, &[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(remainder_residual(&zero, ComplexPair::default(), &s, 0.3), 0.0);
        let c = 0.4;
        let rc = jet(c, &[0.0, 0.0], &[0.0, 0.0]);
        assert!((remainder_residual(&rc, ComplexPair::default(), &s, 0.3) - (c + c * c * c)).abs() < 1e-15);
        assert!((remainder_residual(&zero, ComplexPair::new(1.0, 0.0), &s, 0.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn r_initial_cases() {
        let (r0, dr0) = prepare_r_initial(&[Complex64::new(0.0, 0.0), Complex64::new(0.0, 3.0), Complex64::new(1.0, 2.0)]);
        assert_eq!(r0, vec![0.0; 3]);
        assert_eq!(dr0, vec![0.0, 0.0, -2.0]);
    }

    #[test]
    fn wkb_cases() {
        let times = [0.0, 0.4, 1.3];
        let z: Vec<Vec<ComplexPair>> = times.iter().map(|_| vec![ComplexPair::new(1.0, 0.0)]).collect();
        let u = wkb_reconstruct(&z, None, 1.0, &times).unwrap();
        for (ui, t) in u.iter().zip(times) {
            assert!((ui[0] - 2.0 * t.cos()).abs() < 1e-15);
        }
        let eps = 0.3;
        let z: Vec<Vec<ComplexPair>> = times.iter().map(|_| vec![ComplexPair::new(0.0, 1.0)]).collect();
        let u = wkb_reconstruct(&z, None, eps, &times).unwrap();
        for (ui, t) in u.iter().zip(times) {
            assert!((ui[0] + 2.0 * (t / (eps * eps)).sin()).abs() < 1e-15);
        }
        let z: Vec<Vec<ComplexPair>> = times.iter().map(|_| vec![ComplexPair::default(); 2]).collect();
        let r: Vec<Vec<f64>> = times.iter().map(|&t| vec![t, -t]).collect();
        assert_eq!(wkb_reconstruct(&z, Some(&r), eps, &times).unwrap(), r);
        let bad: Vec<Vec<f64>> = times.iter().map(|_| vec![0.0]).collect();
        assert!(wkb_reconstruct(&z, Some(&bad), eps, &times).is_err());
    }

    #[test]
    fn criterion_and_metrics() {
        let truth = vec![vec![1.0, -2.0, 0.5]];
        let off = vec![vec![1.1, -2.0, 0.5]];
        assert_eq!(error_criterion(&off, &truth, &truth).unwrap().1, Reconstruction::WithRemainder);
        assert_eq!(error_criterion(&truth, &off, &truth).unwrap().1, Reconstruction::AmplitudeOnly);
        assert_eq!(error_criterion(&off, &off, &truth).unwrap().1, Reconstruction::AmplitudeOnly);
        assert_eq!(rmae(&truth, &truth).unwrap(), 0.0);
        assert_eq!(rrmse(&truth, &truth).unwrap(), 0.0);
        let double: Vec<Vec<f64>> = vec![truth[0].iter().map(|v| 2.0 * v).collect()];
        assert_eq!(rmae(&double, &truth).unwrap(), 1.0);
        assert_eq!(rrmse(&double, &truth).unwrap(), 1.0);
        let zero = vec![vec![0.0; 3]];
        assert!(matches!(rrmse(&truth, &zero), Err(PhysicsError::Metric(_))));
        assert!((rmae_with(&double, &truth, false).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn loss_assembly_basics() {
        let t = LossTerms { res: vec![0.0; 3], ic: vec![0.0; 2], bd: vec![0.0] };
        assert_eq!(assemble_loss_stage1(&t, &LossWeights::default(), 0.0), 0.0);
        let t = LossTerms { res: vec![1.0, 2.0, 3.0], ic: vec![4.0], bd: vec![5.0] };
        let w = LossWeights { w_res: 1.0, w_ic: 0.0, w_bd: 0.0 };
        assert_eq!(assemble_loss_stage1(&t, &w, 0.0), 2.0);
        let w = LossWeights { w_res: 0.5, w_ic: 2.0, w_bd: 3.0 };
        let brute = 0.5 * (1.0 + 2.0 + 3.0) / 3.0 + 2.0 * 4.0 + 3.0 * 5.0;
        assert!((assemble_loss_stage2(&t, &w, 0.0) - brute).abs() < 1e-14);
    }

    #[test]
    fn init_parsing_round_trips() {
        for s in ["benchmark1d", "benchmark1d-alt", "benchmark2d", "zero", "cosine:3", "constant:0.5,0.25"] {
            assert_eq!(InitialData::parse(s).unwrap().name(), s);
        }
        assert!(InitialData::parse("wavy").is_none());
    }

    #[test]
    fn spec_validation() {
        assert!(ProblemSpec::new(0.0, 1.0, vec![(-1.0, 1.0)], 1.0, InitialData::Zero).is_err());
        assert!(ProblemSpec::new(1.5, 1.0, vec![(-1.0, 1.0)], 1.0, InitialData::Zero).is_err());
        assert!(ProblemSpec::new(0.5, 1.0, vec![(1.0, 1.0)], 1.0, InitialData::Zero).is_err());
        assert!(ProblemSpec::new(0.5, 1.0, vec![(-1.0, 1.0)], 0.0, InitialData::Zero).is_err());
        assert!(ProblemSpec::new(1.0, 1.0, vec![(-1.0, 1.0)], 1.0, InitialData::Zero).is_ok());
    }
}
