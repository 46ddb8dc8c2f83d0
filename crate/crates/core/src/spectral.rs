//! Fourier pseudospectral reference solvers on periodic boxes.
//!
//! NKGE: trigonometric (Gautschi-type, Deuflhard filter) integrator, exact on
//! the linear part. NLSW: second-order exponential time differencing on the
//! `(z, z_t)` system with the linear wave operator propagated exactly. NLSE:
//! Strang splitting.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::physics::{prepare_z_initial, PhysicsError, ProblemSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("time step {dt} does not resolve the fast scale; need dt <= {required}")]
    Resolution { dt: f64, required: f64 },
    #[error("non-finite state at t = {time}")]
    NonFinite { time: f64 },
    #[error("structural error: {0}")]
    Structural(String),
    #[error("initial data error: {0}")]
    Data(String),
}

impl From<PhysicsError> for SpectralError {
    fn from(e: PhysicsError) -> Self {
        match e {
            PhysicsError::Spectral(s) => *s,
            PhysicsError::Data(m) => SpectralError::Data(m),
            other => SpectralError::Structural(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, SpectralError>;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Uniform periodic grid, row-major with the first dimension slowest.
#[derive(Clone)]
pub struct Grid {
    pub n: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    fwd: Vec<Arc<dyn Fft<f64>>>,
    inv: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Grid").field("n", &self.n).field("lo", &self.lo).field("hi", &self.hi).finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, o: &Self) -> bool {
        self.n == o.n && self.lo == o.lo && self.hi == o.hi
    }
}

impl Grid {
    pub fn new(n: &[usize], domain: &[(f64, f64)]) -> Result<Self> {
        if n.len() != domain.len() || n.is_empty() {
            return Err(SpectralError::Structural("one point count per dimension required".into()));
        }
        for &ni in n {
            if ni < 8 || !ni.is_power_of_two() {
                return Err(SpectralError::Structural(format!("grid size {ni} must be a power of two and at least 8")));
            }
        }
        if domain.iter().any(|(a, b)| !(b > a)) {
            return Err(SpectralError::Structural("each interval needs b > a".into()));
        }
        let mut planner = FftPlanner::new();
        let fwd = n.iter().map(|&k| planner.plan_fft_forward(k)).collect();
        let inv = n.iter().map(|&k| planner.plan_fft_inverse(k)).collect();
        Ok(Grid { n: n.to_vec(), lo: domain.iter().map(|d| d.0).collect(), hi: domain.iter().map(|d| d.1).collect(), fwd, inv })
    }

    /// Same point count along every dimension of `spec`'s domain.
    pub fn for_spec(spec: &ProblemSpec, n: usize) -> Result<Self> {
        Grid::new(&vec![n; spec.dim()], &spec.domain)
    }

    pub fn dim(&self) -> usize {
        self.n.len()
    }

    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn length(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn dx(&self, axis: usize) -> f64 {
        self.length(axis) / self.n[axis] as f64
    }

    pub fn cell(&self) -> f64 {
        (0..self.dim()).map(|a| self.dx(a)).product()
    }

    pub fn coords(&self, axis: usize) -> Vec<f64> {
        (0..self.n[axis]).map(|j| self.lo[axis] + j as f64 * self.dx(axis)).collect()
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut m = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            m[a] = idx % self.n[a];
            idx /= self.n[a];
        }
        m
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx).iter().enumerate().map(|(a, &j)| self.lo[a] + j as f64 * self.dx(a)).collect()
    }

    /// Wavenumbers `2πj/L` in FFT order.
    pub fn wavenumbers(&self, axis: usize) -> Vec<f64> {
        let n = self.n[axis] as i64;
        let l = self.length(axis);
        (0..n).map(|j| 2.0 * PI * (if j < n / 2 { j } else { j - n }) as f64 / l).collect()
    }

    /// `|k|²` for every Fourier mode, in storage order.
    pub fn k_squared(&self) -> Vec<f64> {
        let ks: Vec<Vec<f64>> = (0..self.dim()).map(|a| self.wavenumbers(a)).collect();
        (0..self.len()).map(|i| self.multi_index(i).iter().enumerate().map(|(a, &j)| ks[a][j] * ks[a][j]).sum()).collect()
    }

    fn transform(&self, data: &mut [Complex64], forward: bool) {
        let d = self.dim();
        let mut stride = 1;
        for axis in (0..d).rev() {
            let n = self.n[axis];
            let plan = if forward { &self.fwd[axis] } else { &self.inv[axis] };
            if stride == 1 {
                for line in data.chunks_exact_mut(n) {
                    plan.process(line);
                }
            } else {
                let block = n * stride;
                let mut buf = vec![ZERO; n];
                for chunk in data.chunks_exact_mut(block) {
                    for s in 0..stride {
                        for j in 0..n {
                            buf[j] = chunk[j * stride + s];
                        }
                        plan.process(&mut buf);
                        for j in 0..n {
                            chunk[j * stride + s] = buf[j];
                        }
                    }
                }
            }
            stride *= n;
        }
    }

    /// Unnormalized forward transform.
    pub fn fft(&self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    /// Inverse transform including the `1/N` factor.
    pub fn ifft(&self, data: &mut [Complex64]) {
        self.transform(data, false);
        let s = 1.0 / self.len() as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }

    /// Spectral `∂/∂x_axis`; the Nyquist mode is dropped.
    pub fn derivative(&self, f: &[Complex64], axis: usize) -> Vec<Complex64> {
        let ks = self.wavenumbers(axis);
        let half = self.n[axis] / 2;
        let mut g = f.to_vec();
        self.fft(&mut g);
        for (i, v) in g.iter_mut().enumerate() {
            let j = self.multi_index(i)[axis];
            *v *= if j == half { ZERO } else { Complex64::new(0.0, ks[j]) };
        }
        self.ifft(&mut g);
        g
    }

    pub fn laplacian(&self, f: &[Complex64]) -> Vec<Complex64> {
        let k2 = self.k_squared();
        let mut g = f.to_vec();
        self.fft(&mut g);
        for (v, k) in g.iter_mut().zip(&k2) {
            *v *= -k;
        }
        self.ifft(&mut g);
        g
    }

    /// `(‖f‖² + ‖∇f‖²)^{1/2}` of a real field.
    pub fn h1_norm(&self, f: &[f64]) -> f64 {
        let c: Vec<Complex64> = f.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mut s: f64 = f.iter().map(|v| v * v).sum();
        for a in 0..self.dim() {
            s += self.derivative(&c, a).iter().map(|v| v.re * v.re).sum::<f64>();
        }
        (s * self.cell()).sqrt()
    }

    pub fn l2_norm(&self, f: &[f64]) -> f64 {
        (f.iter().map(|v| v * v).sum::<f64>() * self.cell()).sqrt()
    }
}

/// Trigonometric interpolant of grid data, evaluable with derivatives anywhere.
#[derive(Debug, Clone)]
pub struct SpectralField {
    grid: Grid,
    coeffs: Vec<Complex64>,
}

/// Value, gradient and Laplacian-diagonal of a field at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointJet {
    pub value: Complex64,
    pub grad: Vec<Complex64>,
    pub hess_diag: Vec<Complex64>,
}

impl SpectralField {
    pub fn new(grid: &Grid, values: &[Complex64]) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(SpectralError::Structural("field does not match grid".into()));
        }
        let mut c = values.to_vec();
        grid.fft(&mut c);
        let s = 1.0 / grid.len() as f64;
        c.iter_mut().for_each(|v| *v *= s);
        Ok(SpectralField { grid: grid.clone(), coeffs: c })
    }

    /// Evaluates the interpolant; the Nyquist mode is symmetrized to a cosine.
    pub fn eval(&self, x: &[f64]) -> PointJet {
        let d = self.grid.dim();
        // per axis: list of (phase, dphase, ddphase) factors per index
        let factors: Vec<Vec<[Complex64; 3]>> = (0..d)
            .map(|a| {
                let n = self.grid.n[a];
                let ks = self.grid.wavenumbers(a);
                let s = x[a] - self.grid.lo[a];
                let base = Complex64::from_polar(1.0, ks[1] * s);
                let mut out = Vec::with_capacity(n);
                let mut p = Complex64::new(1.0, 0.0);
                let mut pows = Vec::with_capacity(n / 2 + 1);
                for _ in 0..=n / 2 {
                    pows.push(p);
                    p *= base;
                }
                for (j, &k) in ks.iter().enumerate() {
                    let e = if j == n / 2 {
                        let c = (k.abs() * s).cos();
                        let sn = (k.abs() * s).sin();
                        let ka = k.abs();
                        out.push([Complex64::new(c, 0.0), Complex64::new(-ka * sn, 0.0), Complex64::new(-ka * ka * c, 0.0)]);
                        continue;
                    } else if j < n / 2 {
                        pows[j]
                    } else {
                        pows[n - j].conj()
                    };
                    let ik = Complex64::new(0.0, k);
                    out.push([e, ik * e, -k * k * e]);
                }
                out
            })
            .collect();
        let mut value = ZERO;
        let mut grad = vec![ZERO; d];
        let mut hess = vec![ZERO; d];
        for (i, c) in self.coeffs.iter().enumerate() {
            if *c == ZERO {
                continue;
            }
            let m = self.grid.multi_index(i);
            let base: Vec<[Complex64; 3]> = (0..d).map(|a| factors[a][m[a]]).collect();
            let prod_all: Complex64 = base.iter().map(|f| f[0]).product();
            value += c * prod_all;
            for a in 0..d {
                let others: Complex64 = (0..d).filter(|&b| b != a).map(|b| base[b][0]).product();
                grad[a] += c * base[a][1] * others;
                hess[a] += c * base[a][2] * others;
            }
        }
        PointJet { value, grad, hess_diag: hess }
    }
}

/// Snapshots of a real field.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSnapshots {
    pub times: Vec<f64>,
    pub fields: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSnapshots {
    pub times: Vec<f64>,
    pub fields: Vec<Vec<Complex64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NkgeRun {
    pub snapshots: RealSnapshots,
    /// Energy at each snapshot.
    pub energy: Vec<f64>,
    /// `max |E(t) − E(0)| / max(|E(0)|, tiny)`.
    pub energy_drift: f64,
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(SpectralError::Structural("snapshot times must be finite, nonnegative and sorted".into()));
    }
    Ok(())
}

/// Steps `[t0, t1]` into `n` equal substeps no larger than `dt`.
fn substeps(t0: f64, t1: f64, dt: f64) -> (usize, f64) {
    let span = t1 - t0;
    if span <= 0.0 {
        return (0, 0.0);
    }
    let n = (span / dt - 1e-9).ceil().max(1.0) as usize;
    (n, span / n as f64)
}

fn finite(v: &[Complex64]) -> bool {
    v.iter().all(|c| c.re.is_finite() && c.im.is_finite())
}

/// Largest NKGE step accepted for a given `ε`.
pub fn nkge_max_dt(eps: f64, max_fraction: f64) -> f64 {
    max_fraction * eps * eps
}

/// Pseudospectral NKGE solve with snapshots at `times`.
/// Refuses to run when `dt > max_fraction · ε²`.
pub fn solve_nkge(spec: &ProblemSpec, grid: &Grid, dt: f64, times: &[f64], max_fraction: f64) -> Result<NkgeRun> {
    spec.validate().map_err(SpectralError::from)?;
    check_times(times)?;
    let required = nkge_max_dt(spec.eps, max_fraction);
    if !(dt > 0.0) || dt > required {
        return Err(SpectralError::Resolution { dt, required });
    }
    crate::physics::check_periodic(spec, grid).map_err(SpectralError::from)?;
    let e2 = spec.eps * spec.eps;
    let k2 = grid.k_squared();
    let omega: Vec<f64> = k2.iter().map(|k| (1.0 + e2 * k).sqrt() / e2).collect();
    let lam = spec.lambda;
    let n = grid.len();
    let mut u = vec![ZERO; n];
    let mut v = vec![ZERO; n];
    for i in 0..n {
        let (p1, p2) = spec.phi(&grid.point(i));
        u[i] = Complex64::new(p1, 0.0);
        v[i] = Complex64::new(p2 / e2, 0.0);
    }
    let mut uh = u.clone();
    let mut vh = v;
    grid.fft(&mut uh);
    grid.fft(&mut vh);
    let force = |uhat: &[Complex64]| -> (Vec<Complex64>, Vec<f64>) {
        let mut phys = uhat.to_vec();
        grid.ifft(&mut phys);
        let real: Vec<f64> = phys.iter().map(|c| c.re).collect();
        let mut g: Vec<Complex64> = real.iter().map(|&x| Complex64::new(-lam / e2 * x * x * x, 0.0)).collect();
        grid.fft(&mut g);
        (g, real)
    };
    let energy = |uhat: &[Complex64], vhat: &[Complex64]| -> f64 {
        let mut up = uhat.to_vec();
        grid.ifft(&mut up);
        let mut vp = vhat.to_vec();
        grid.ifft(&mut vp);
        let grad2: f64 = uhat.iter().zip(&k2).map(|(c, k)| c.norm_sqr() * k).sum::<f64>() / n as f64;
        let pot: f64 = up.iter().zip(&vp).map(|(a, b)| e2 * b.re * b.re + a.re * a.re / e2 + 0.5 * lam * a.re.powi(4)).sum();
        (grad2 + pot) * grid.cell()
    };
    let (mut g, _) = force(&uh);
    let mut t = 0.0;
    let mut snaps = RealSnapshots { times: Vec::new(), fields: Vec::new() };
    let mut energies = Vec::new();
    let e0 = energy(&uh, &vh);
    for &target in times {
        let (steps, h) = substeps(t, target, dt);
        if steps > 0 {
            let c: Vec<f64> = omega.iter().map(|w| (h * w).cos()).collect();
            let s: Vec<f64> = omega.iter().map(|w| (h * w).sin()).collect();
            let sw: Vec<f64> = omega.iter().zip(&s).map(|(w, s)| s / w).collect();
            let ws: Vec<f64> = omega.iter().zip(&s).map(|(w, s)| w * s).collect();
            let sinc: Vec<f64> = omega.iter().zip(&s).map(|(w, s)| 0.5 * h * h * s / (h * w)).collect();
            for step in 0..steps {
                let mut un = vec![ZERO; n];
                for i in 0..n {
                    un[i] = c[i] * uh[i] + sw[i] * vh[i] + sinc[i] * g[i];
                }
                let (gn, _) = force(&un);
                for i in 0..n {
                    vh[i] = -ws[i] * uh[i] + c[i] * vh[i] + 0.5 * h * (c[i] * g[i] + gn[i]);
                }
                uh = un;
                g = gn;
                if !finite(&uh) || !finite(&vh) {
                    return Err(SpectralError::NonFinite { time: t + (step + 1) as f64 * h });
                }
            }
        }
        t = target;
        let mut up = uh.clone();
        grid.ifft(&mut up);
        snaps.times.push(target);
        snaps.fields.push(up.iter().map(|c| c.re).collect());
        energies.push(energy(&uh, &vh));
    }
    let drift = energies.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max) / e0.abs().max(1e-300);
    Ok(NkgeRun { snapshots: snaps, energy: energies, energy_drift: if e0 == 0.0 { 0.0 } else { drift } })
}

/// `(e^z − 1)/z` and `(e^z − 1 − z)/z²` for complex `z`.
fn phi12(z: Complex64) -> (Complex64, Complex64) {
    if z.norm() < 1e-2 {
        let mut p1 = ZERO;
        let mut p2 = ZERO;
        let mut term = Complex64::new(1.0, 0.0);
        let mut fact1 = 1.0;
        for k in 0..10 {
            // z^k/(k+1)! and z^k/(k+2)!
            fact1 *= (k + 1) as f64;
            p1 += term / fact1;
            p2 += term / (fact1 * (k + 2) as f64);
            term *= z;
        }
        (p1, p2)
    } else {
        let e = z.exp();
        ((e - 1.0) / z, (e - 1.0 - z) / (z * z))
    }
}

struct EtdCoeffs {
    /// Full 2x2 propagator entries.
    e: Vec<[Complex64; 4]>,
    /// Second columns of `hφ1(hL)` and `hφ2(hL)`.
    p1: Vec<[Complex64; 2]>,
    p2: Vec<[Complex64; 2]>,
}

fn etd_coeffs(k2: &[f64], e2: f64, h: f64) -> EtdCoeffs {
    let mut e = Vec::with_capacity(k2.len());
    let mut p1 = Vec::with_capacity(k2.len());
    let mut p2 = Vec::with_capacity(k2.len());
    for &k in k2 {
        let s = (1.0 + e2 * k).sqrt();
        let w_fast = (1.0 + s) / e2;
        let w_slow = -k / (1.0 + s);
        let m1 = Complex64::new(0.0, -w_fast);
        let m2 = Complex64::new(0.0, -w_slow);
        let dm = m1 - m2;
        let (x1, x2) = (m1 * h, m2 * h);
        let (ex1, ex2) = (x1.exp(), x2.exp());
        let (a1, b1) = phi12(x1);
        let (a2, b2) = phi12(x2);
        let col = |f1: Complex64, f2: Complex64| [(f1 - f2) / dm, (m1 * f1 - m2 * f2) / dm];
        e.push([(m1 * ex2 - m2 * ex1) / dm, (ex1 - ex2) / dm, -m1 * m2 * (ex1 - ex2) / dm, (m1 * ex1 - m2 * ex2) / dm]);
        p1.push(col(a1 * h, a2 * h));
        p2.push(col(b1 * h, b2 * h));
    }
    EtdCoeffs { e, p1, p2 }
}

/// Pseudospectral NLSW solve. `eps_wave = 0` drops the wave term and
/// integrates the Schrödinger limit instead.
pub fn solve_nlsw_eps(spec: &ProblemSpec, eps_wave: f64, grid: &Grid, dt: f64, times: &[f64]) -> Result<ComplexSnapshots> {
    if eps_wave == 0.0 {
        return solve_nlse(spec, grid, dt, times);
    }
    check_times(times)?;
    if !(dt > 0.0) {
        return Err(SpectralError::Resolution { dt, required: f64::INFINITY });
    }
    let (z0, dz0) = prepare_z_initial(spec, grid).map_err(SpectralError::from)?;
    let e2 = eps_wave * eps_wave;
    let k2 = grid.k_squared();
    let n = grid.len();
    let lam = spec.lambda;
    let mut zh = z0;
    let mut wh = dz0;
    grid.fft(&mut zh);
    grid.fft(&mut wh);
    let nonlinear = |zhat: &[Complex64]| -> Vec<Complex64> {
        let mut p = zhat.to_vec();
        grid.ifft(&mut p);
        let mut g: Vec<Complex64> = p.iter().map(|z| -3.0 * lam / e2 * z.norm_sqr() * z).collect();
        grid.fft(&mut g);
        g
    };
    let mut out = ComplexSnapshots { times: Vec::new(), fields: Vec::new() };
    let mut t = 0.0;
    for &target in times {
        let (steps, h) = substeps(t, target, dt);
        if steps > 0 {
            let co = etd_coeffs(&k2, e2, h);
            for step in 0..steps {
                let nh = nonlinear(&zh);
                let mut az = vec![ZERO; n];
                let mut aw = vec![ZERO; n];
                for i in 0..n {
                    let [e00, e01, e10, e11] = co.e[i];
                    az[i] = e00 * zh[i] + e01 * wh[i] + co.p1[i][0] * nh[i];
                    aw[i] = e10 * zh[i] + e11 * wh[i] + co.p1[i][1] * nh[i];
                }
                let na = nonlinear(&az);
                for i in 0..n {
                    let dn = na[i] - nh[i];
                    zh[i] = az[i] + co.p2[i][0] * dn;
                    wh[i] = aw[i] + co.p2[i][1] * dn;
                }
                if !finite(&zh) || !finite(&wh) {
                    return Err(SpectralError::NonFinite { time: t + (step + 1) as f64 * h });
                }
            }
        }
        t = target;
        let mut p = zh.clone();
        grid.ifft(&mut p);
        out.times.push(target);
        out.fields.push(p);
    }
    Ok(out)
}

pub fn solve_nlsw(spec: &ProblemSpec, grid: &Grid, dt: f64, times: &[f64]) -> Result<ComplexSnapshots> {
    solve_nlsw_eps(spec, spec.eps, grid, dt, times)
}

/// Strang-split NLSE `2i z_t − Δz + 3λ|z|²z = 0` from `z0 = ½(φ1 − iφ2)`.
pub fn solve_nlse(spec: &ProblemSpec, grid: &Grid, dt: f64, times: &[f64]) -> Result<ComplexSnapshots> {
    check_times(times)?;
    if !(dt > 0.0) {
        return Err(SpectralError::Resolution { dt, required: f64::INFINITY });
    }
    let (mut z, _) = prepare_z_initial(spec, grid).map_err(SpectralError::from)?;
    let k2 = grid.k_squared();
    let lam = spec.lambda;
    let mut out = ComplexSnapshots { times: Vec::new(), fields: Vec::new() };
    let mut t = 0.0;
    for &target in times {
        let (steps, h) = substeps(t, target, dt);
        if steps > 0 {
            let lin: Vec<Complex64> = k2.iter().map(|k| Complex64::from_polar(1.0, 0.5 * k * h)).collect();
            let kick = |z: &mut [Complex64]| {
                for v in z.iter_mut() {
                    *v *= Complex64::from_polar(1.0, 1.5 * lam * v.norm_sqr() * 0.5 * h);
                }
            };
            for step in 0..steps {
                kick(&mut z);
                grid.fft(&mut z);
                for (v, l) in z.iter_mut().zip(&lin) {
                    *v *= l;
                }
                grid.ifft(&mut z);
                kick(&mut z);
                if !finite(&z) {
                    return Err(SpectralError::NonFinite { time: t + (step + 1) as f64 * h });
                }
            }
        }
        t = target;
        out.times.push(target);
        out.fields.push(z.clone());
    }
    Ok(out)
}

/// `u = e^{it/ε²}z + c.c.` for each snapshot.
pub fn reconstruct_u(z: &ComplexSnapshots, eps: f64) -> RealSnapshots {
    let e2 = eps * eps;
    RealSnapshots {
        times: z.times.clone(),
        fields: z
            .fields
            .iter()
            .zip(&z.times)
            .map(|(f, &t)| {
                let ph = Complex64::from_polar(1.0, t / e2);
                f.iter().map(|c| 2.0 * (ph * c).re).collect()
            })
            .collect(),
    }
}

/// Cheap reference: solve the NLSW on the slow scale and reconstruct `u`.
pub fn mti_reference(spec: &ProblemSpec, grid: &Grid, slow_dt: f64, times: &[f64]) -> Result<RealSnapshots> {
    Ok(reconstruct_u(&solve_nlsw(spec, grid, slow_dt, times)?, spec.eps))
}

/// Time-step rules for the reference solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSteps {
    /// NKGE step as a multiple of `ε²`.
    pub nkge_fraction: f64,
    /// Largest accepted NKGE step as a multiple of `ε²`.
    pub max_fraction: f64,
    /// Step for the envelope equations.
    pub slow_dt: f64,
}

impl Default for ReferenceSteps {
    fn default() -> Self {
        ReferenceSteps { nkge_fraction: 1.0 / 64.0, max_fraction: 0.25, slow_dt: 1.0 / 256.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtaCurves {
    pub times: Vec<f64>,
    pub nlsw: Vec<f64>,
    pub nlse: Vec<f64>,
}

/// H¹ distances between the NKGE solution and the reconstructions from
/// both limit models.
pub fn eta_curves(spec: &ProblemSpec, grid: &Grid, times: &[f64], steps: &ReferenceSteps) -> Result<EtaCurves> {
    let e2 = spec.eps * spec.eps;
    let u = solve_nkge(spec, grid, steps.nkge_fraction * e2, times, steps.max_fraction)?.snapshots;
    let w = reconstruct_u(&solve_nlsw(spec, grid, steps.slow_dt, times)?, spec.eps);
    let s = reconstruct_u(&solve_nlse(spec, grid, steps.slow_dt, times)?, spec.eps);
    let dist = |a: &[f64], b: &[f64]| {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        grid.h1_norm(&d)
    };
    Ok(EtaCurves {
        times: times.to_vec(),
        nlsw: u.fields.iter().zip(&w.fields).map(|(a, b)| dist(a, b)).collect(),
        nlse: u.fields.iter().zip(&s.fields).map(|(a, b)| dist(a, b)).collect(),
    })
}

/// Least-squares slope of `log e` against `log ε`.
pub fn fit_convergence_order(eps: &[f64], errors: &[f64]) -> Result<f64> {
    if eps.len() != errors.len() || eps.len() < 3 {
        return Err(SpectralError::Structural("need at least three (eps, error) pairs".into()));
    }
    if eps.iter().chain(errors).any(|v| !(*v > 0.0)) {
        return Err(SpectralError::Structural("eps and errors must be positive".into()));
    }
    let xs: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(SpectralError::Structural("eps values must differ".into()));
    }
    Ok(sxy / sxx)
}
