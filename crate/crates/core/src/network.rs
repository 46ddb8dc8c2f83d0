//! Field networks: the multiscale NeuralMD architecture and a plain tanh MLP
//! used as the baseline.
//!
//! NeuralMD evaluates, for one query `(x, t)`:
//! periodic embedding -> encoder P at `t` and at perturbed times ->
//! gated mean per time region -> mixer M over the scale axis -> head H ->
//! optional hard initial-condition blend.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Jet2, JetModel, NodeId, ParamTape, Result};
use crate::rng::Stream;
use crate::training::GateState;

/// Lower bound on the gate mass in a pooled region.
pub const POOL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    /// Period per spatial dimension.
    pub period: Vec<f64>,
    pub modes: usize,
}

impl EmbeddingSpec {
    pub fn dim(&self) -> usize {
        self.period.len()
    }

    /// Length of `embed` output.
    pub fn len(&self) -> usize {
        2 + 2 * self.modes * self.dim()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `[t, 1, cos(2πx/P), sin(2πx/P), …, cos(2πmx/P), sin(2πmx/P)]`, one trig
/// block per spatial dimension.
pub fn embed(spec: &EmbeddingSpec, x: &[f64], t: f64) -> Vec<f64> {
    let mut f = Vec::with_capacity(spec.len());
    f.push(t);
    f.push(1.0);
    for (i, &xi) in x.iter().enumerate() {
        for k in 1..=spec.modes {
            let w = 2.0 * std::f64::consts::PI * k as f64 / spec.period[i];
            f.push((w * xi).cos());
            f.push((w * xi).sin());
        }
    }
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    /// Region half-width in time units.
    pub radius: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub scales: Vec<Scale>,
    /// Perturbed times are clipped to `[0, t_final]`.
    pub t_final: f64,
}

impl PerturbConfig {
    pub fn model_preset(t_final: f64) -> Self {
        Self::with_radii(&[0.03, 0.05, 0.07], t_final)
    }

    pub fn benchmark_preset(t_final: f64) -> Self {
        Self::with_radii(&[0.01, 0.05, 0.09], t_final)
    }

    pub fn with_radii(radii: &[f64], t_final: f64) -> Self {
        let counts = [3, 5, 7];
        PerturbConfig {
            scales: radii
                .iter()
                .enumerate()
                .map(|(i, &radius)| Scale { radius, count: counts.get(i).copied().unwrap_or(3 + 2 * i) })
                .collect(),
            t_final,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.t_final > 0.0) {
            return Err("final time must be positive".into());
        }
        for (i, s) in self.scales.iter().enumerate() {
            if s.count == 0 {
                return Err(format!("scale {i} has no points"));
            }
            if !(s.radius >= 0.0) || !s.radius.is_finite() {
                return Err(format!("scale {i} has an invalid radius"));
            }
            if i > 0 && s.radius <= self.scales[i - 1].radius {
                return Err("region radii must be strictly increasing".into());
            }
        }
        Ok(())
    }

    pub fn total_points(&self) -> usize {
        1 + self.scales.iter().map(|s| s.count).sum::<usize>()
    }
}

/// Time offsets drawn for one query, one list per scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub offsets: Vec<Vec<f64>>,
}

impl Perturbation {
    pub fn draw(cfg: &PerturbConfig, rng: &mut Stream) -> Self {
        Perturbation {
            offsets: cfg
                .scales
                .iter()
                .map(|s| (0..s.count).map(|_| if s.radius > 0.0 { rng.random_range(-s.radius..=s.radius) } else { 0.0 }).collect())
                .collect(),
        }
    }

    /// Evenly spaced midpoints of each region, used for deterministic evaluation.
    pub fn stratified(cfg: &PerturbConfig) -> Self {
        Perturbation {
            offsets: cfg
                .scales
                .iter()
                .map(|s| (0..s.count).map(|i| s.radius * (-1.0 + (2 * i + 1) as f64 / s.count as f64)).collect())
                .collect(),
        }
    }

    pub fn zero(cfg: &PerturbConfig) -> Self {
        Perturbation { offsets: cfg.scales.iter().map(|s| vec![0.0; s.count]).collect() }
    }

    pub fn none() -> Self {
        Perturbation { offsets: Vec::new() }
    }
}

fn clip_time(t: f64, t_final: f64) -> (f64, f64) {
    if t < 0.0 {
        (0.0, 0.0)
    } else if t > t_final {
        (t_final, 0.0)
    } else {
        (t, 1.0)
    }
}

/// The query point followed by its perturbed copies, grouped per scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedPoints {
    pub x: Vec<f64>,
    pub t: f64,
    pub regions: Vec<Vec<f64>>,
}

impl PerturbedPoints {
    pub fn len(&self) -> usize {
        1 + self.regions.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Draws offsets and returns `(x, t)` with every `(x, clip(t + δ))`.
pub fn perturb(x: &[f64], t: f64, cfg: &PerturbConfig, rng: &mut Stream) -> PerturbedPoints {
    let p = Perturbation::draw(cfg, rng);
    PerturbedPoints {
        x: x.to_vec(),
        t,
        regions: p.offsets.iter().map(|o| o.iter().map(|d| clip_time(t + d, cfg.t_final).0).collect()).collect(),
    }
}

/// Initial value and velocity of every output, as spatial jets, feeding the
/// hard initial-condition blend.
#[derive(Debug, Clone, PartialEq)]
pub struct IcJets {
    pub u0: Vec<Jet2>,
    pub du0: Vec<Jet2>,
}

/// Per-query context for a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FieldCtx<'a> {
    pub pert: &'a Perturbation,
    pub gate: Option<&'a GateState>,
    pub ic: Option<&'a IcJets>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub embedding: EmbeddingSpec,
    pub d_model: usize,
    /// Widths of encoder layers after the first; empty means a single layer.
    pub encoder_hidden: Vec<usize>,
    pub perturb: PerturbConfig,
    pub mixer_hidden: usize,
    pub head_hidden: Vec<usize>,
    pub outputs: usize,
}

impl Architecture {
    pub fn neuralmd(dim_periods: Vec<f64>, modes: usize, perturb: PerturbConfig, outputs: usize) -> Self {
        Architecture {
            embedding: EmbeddingSpec { period: dim_periods, modes },
            d_model: 64,
            encoder_hidden: Vec::new(),
            perturb,
            mixer_hidden: 8,
            head_hidden: vec![64, 64],
            outputs,
        }
    }

    fn layout(&self) -> Layout {
        let d = self.d_model;
        let n_space = self.embedding.len() - 1;
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let w_time = take(d);
        let w_space = take(d * n_space);
        let b0 = take(d);
        let mut encoder = Vec::new();
        let mut prev = d;
        for &w in &self.encoder_hidden {
            encoder.push((take(w * prev), take(w), w));
            prev = w;
        }
        let n_in_mix = 1 + self.perturb.scales.len();
        let mix_w1 = take(self.mixer_hidden * n_in_mix);
        let mix_b1 = take(self.mixer_hidden);
        let mix_w2 = take(self.mixer_hidden);
        let mix_b2 = take(1);
        let mut head = Vec::new();
        for &w in self.head_hidden.iter().chain(std::iter::once(&self.outputs)) {
            head.push((take(w * prev), take(w), w));
            prev = w;
        }
        Layout { w_time, w_space, b0, encoder, mix_w1, mix_b1, mix_w2, mix_b2, n_in_mix, head, total: off }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    w_time: usize,
    w_space: usize,
    b0: usize,
    encoder: Vec<(usize, usize, usize)>,
    mix_w1: usize,
    mix_b1: usize,
    mix_w2: usize,
    mix_b2: usize,
    n_in_mix: usize,
    head: Vec<(usize, usize, usize)>,
    total: usize,
}

/// Plain tanh network on the raw `(x, t)` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpArch {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub outputs: usize,
}

impl MlpArch {
    fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = 0;
        let mut prev = self.dim + 1;
        let mut out = Vec::new();
        for &w in self.hidden.iter().chain(std::iter::once(&self.outputs)) {
            out.push((off, off + w * prev, prev, w));
            off += w * prev + w;
            prev = w;
        }
        out
    }
}

/// Architecture descriptor of any supported field network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NetArch {
    NeuralMd(Architecture),
    Mlp(MlpArch),
}

/// Flat parameter vector tied to its architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub arch: NetArch,
    pub theta: Vec<f64>,
}

impl NetworkParams {
    pub fn new(arch: NetArch, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != arch.n_params() {
            return Err(AutodiffError::Structural(format!(
                "parameter vector has {} entries, architecture needs {}",
                theta.len(),
                arch.n_params()
            )));
        }
        Ok(NetworkParams { arch, theta })
    }

    pub fn init(arch: NetArch, rng: &mut Stream) -> Self {
        let theta = arch.init(rng);
        NetworkParams { arch, theta }
    }
}

fn fill_uniform(theta: &mut [f64], fan_in: usize, rng: &mut Stream) {
    let a = 1.0 / (fan_in as f64).sqrt();
    for v in theta {
        *v = rng.random_range(-a..a);
    }
}

impl NetArch {
    pub fn n_params(&self) -> usize {
        match self {
            NetArch::NeuralMd(a) => a.layout().total,
            NetArch::Mlp(m) => m.layers().last().map(|&(_, b, _, w)| b + w).unwrap_or(0),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            NetArch::NeuralMd(a) => a.embedding.dim(),
            NetArch::Mlp(m) => m.dim,
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            NetArch::NeuralMd(a) => a.outputs,
            NetArch::Mlp(m) => m.outputs,
        }
    }

    pub fn perturb(&self) -> Option<&PerturbConfig> {
        match self {
            NetArch::NeuralMd(a) => Some(&a.perturb),
            NetArch::Mlp(_) => None,
        }
    }

    pub fn draw(&self, rng: &mut Stream) -> Perturbation {
        self.perturb().map_or_else(Perturbation::none, |p| Perturbation::draw(p, rng))
    }

    pub fn stratified(&self) -> Perturbation {
        self.perturb().map_or_else(Perturbation::none, Perturbation::stratified)
    }

    /// Uniform fan-in initialization `U(−1/√fan_in, 1/√fan_in)` per layer.
    pub fn init(&self, rng: &mut Stream) -> Vec<f64> {
        let mut th = vec![0.0; self.n_params()];
        match self {
            NetArch::NeuralMd(a) => {
                let l = a.layout();
                let fan0 = a.embedding.len();
                fill_uniform(&mut th[l.w_time..l.b0 + a.d_model], fan0, rng);
                let mut prev = a.d_model;
                for &(w, _, width) in &l.encoder {
                    fill_uniform(&mut th[w..w + width * prev + width], prev, rng);
                    prev = width;
                }
                fill_uniform(&mut th[l.mix_w1..l.mix_w2], l.n_in_mix, rng);
                fill_uniform(&mut th[l.mix_w2..l.mix_b2 + 1], a.mixer_hidden, rng);
                for &(w, _, width) in &l.head {
                    fill_uniform(&mut th[w..w + width * prev + width], prev, rng);
                    prev = width;
                }
            }
            NetArch::Mlp(m) => {
                for (w, _, n_in, width) in m.layers() {
                    fill_uniform(&mut th[w..w + width * n_in + width], n_in, rng);
                }
            }
        }
        th
    }

    /// Records the network at `(x, t)` on `tape` and returns the output node.
    pub fn record(&self, tape: &mut ParamTape, theta: &[f64], x: &[f64], t: f64, ctx: &FieldCtx) -> Result<NodeId> {
        if theta.len() != self.n_params() {
            return Err(AutodiffError::Structural(format!(
                "parameter vector has {} entries, architecture needs {}",
                theta.len(),
                self.n_params()
            )));
        }
        if x.len() != self.dim() {
            return Err(AutodiffError::Structural("spatial dimension mismatch".into()));
        }
        let raw = match self {
            NetArch::NeuralMd(a) => record_neuralmd(a, tape, theta, x, t, ctx)?,
            NetArch::Mlp(m) => record_mlp(m, tape, theta, x, t)?,
        };
        match ctx.ic {
            Some(ic) => hard_ic_node(tape, theta, raw, ic, t, self.dim()),
            None => Ok(raw),
        }
    }

    /// Plain output values at `(x, t)`.
    pub fn eval(&self, theta: &[f64], x: &[f64], t: f64, ctx: &FieldCtx) -> Result<Vec<f64>> {
        let mut tape = ParamTape::new(&[], theta.len());
        let out = self.record(&mut tape, theta, x, t, ctx)?;
        Ok(tape.values(out).to_vec())
    }
}

fn time_jet(t: f64, slope: f64, coords: &[usize], dim: usize) -> Jet2 {
    let mut j = Jet2::constant(t, coords);
    if let Some(i) = coords.iter().position(|&c| c == dim) {
        j.d1[i] = slope;
    }
    j
}

fn space_features(a: &Architecture, x: &[f64], coords: &[usize]) -> Vec<Jet2> {
    let mut f = Vec::with_capacity(a.embedding.len() - 1);
    f.push(Jet2::constant(1.0, coords));
    for (i, &xi) in x.iter().enumerate() {
        let pos = coords.iter().position(|&c| c == i);
        for k in 1..=a.embedding.modes {
            let w = 2.0 * std::f64::consts::PI * k as f64 / a.embedding.period[i];
            let (s, c) = (w * xi).sin_cos();
            let mut jc = Jet2::constant(c, coords);
            let mut js = Jet2::constant(s, coords);
            if let Some(p) = pos {
                jc.d1[p] = -w * s;
                jc.d2[p] = -w * w * c;
                js.d1[p] = w * c;
                js.d2[p] = -w * w * s;
            }
            f.push(jc);
            f.push(js);
        }
    }
    f
}

fn record_neuralmd(a: &Architecture, tape: &mut ParamTape, theta: &[f64], x: &[f64], t: f64, ctx: &FieldCtx) -> Result<NodeId> {
    let l = a.layout();
    let dim = a.embedding.dim();
    let coords = tape.coords().to_vec();
    if ctx.pert.offsets.len() != a.perturb.scales.len()
        || ctx.pert.offsets.iter().zip(&a.perturb.scales).any(|(o, s)| o.len() != s.count)
    {
        return Err(AutodiffError::Structural("perturbation does not match the configured scales".into()));
    }
    let space = tape.input_jets(&space_features(a, x, &coords))?;
    let shared = tape.affine(theta, space, l.w_space, Some(l.b0), a.d_model)?;
    let encode = |tape: &mut ParamTape, tj: &Jet2| -> Result<NodeId> {
        let pre = tape.add_column(theta, shared, l.w_time, 1, tj)?;
        let mut h = tape.tanh(theta, pre)?;
        for &(w, b, width) in &l.encoder {
            let z = tape.affine(theta, h, w, Some(b), width)?;
            h = tape.tanh(theta, z)?;
        }
        Ok(h)
    };
    let point = encode(tape, &time_jet(t, 1.0, &coords, dim))?;
    let mut mix_in = vec![point];
    for offsets in &ctx.pert.offsets {
        let mut feats = Vec::with_capacity(offsets.len());
        let mut gates = Vec::with_capacity(offsets.len());
        for &d in offsets {
            let (tp, slope) = clip_time(t + d, a.perturb.t_final);
            feats.push(encode(tape, &time_jet(tp, slope, &coords, dim))?);
            gates.push(gate_jet(ctx.gate, tp, slope, a.perturb.t_final, &coords, dim));
        }
        let weights = pooled_weights(&gates);
        mix_in.push(tape.blend(theta, &feats, &weights, None)?);
    }
    let mut hidden = Vec::with_capacity(a.mixer_hidden);
    for j in 0..a.mixer_hidden {
        let z = tape.combine(theta, &mix_in, l.mix_w1 + j * l.n_in_mix, Some(l.mix_b1 + j))?;
        hidden.push(tape.tanh(theta, z)?);
    }
    let mut h = tape.combine(theta, &hidden, l.mix_w2, Some(l.mix_b2))?;
    let n_head = l.head.len();
    for (i, &(w, b, width)) in l.head.iter().enumerate() {
        h = tape.affine(theta, h, w, Some(b), width)?;
        if i + 1 < n_head {
            h = tape.tanh(theta, h)?;
        }
    }
    Ok(h)
}

fn record_mlp(m: &MlpArch, tape: &mut ParamTape, theta: &[f64], x: &[f64], t: f64) -> Result<NodeId> {
    let coords = tape.coords().to_vec();
    let mut inputs: Vec<Jet2> = x.iter().enumerate().map(|(i, &xi)| Jet2::coordinate(xi, i, &coords)).collect();
    inputs.push(Jet2::coordinate(t, m.dim, &coords));
    let mut h = tape.input_jets(&inputs)?;
    let layers = m.layers();
    for (i, &(w, b, _, width)) in layers.iter().enumerate() {
        h = tape.affine(theta, h, w, Some(b), width)?;
        if i + 1 < layers.len() {
            h = tape.tanh(theta, h)?;
        }
    }
    Ok(h)
}

/// Gate value at a perturbed time as a jet in the query time.
fn gate_jet(gate: Option<&GateState>, tp: f64, slope: f64, t_final: f64, coords: &[usize], dim: usize) -> Jet2 {
    let mut j = Jet2::constant(1.0, coords);
    if let Some(g) = gate {
        let (h, h1, h2) = g.h_derivs(tp, t_final);
        j.value = h;
        if let Some(i) = coords.iter().position(|&c| c == dim) {
            j.d1[i] = h1 * slope;
            j.d2[i] = h2 * slope * slope;
        }
    }
    j
}

/// `h_i / max(Σ h, floor)` as jets.
fn pooled_weights(gates: &[Jet2]) -> Vec<Jet2> {
    let coords = gates[0].coords.clone();
    let mut sum = Jet2::constant(0.0, &coords);
    for g in gates {
        sum = sum.add(g);
    }
    if sum.value < POOL_FLOOR {
        return gates
            .iter()
            .map(|g| {
                let mut w = g.clone();
                w.value /= POOL_FLOOR;
                w.d1.iter_mut().for_each(|v| *v /= POOL_FLOOR);
                w.d2.iter_mut().for_each(|v| *v /= POOL_FLOOR);
                w
            })
            .collect();
    }
    let s = sum.value;
    gates
        .iter()
        .map(|g| {
            let mut w = Jet2::constant(g.value / s, &coords);
            for i in 0..coords.len() {
                let (h1, h2, s1, s2) = (g.d1[i], g.d2[i], sum.d1[i], sum.d2[i]);
                w.d1[i] = h1 / s - g.value * s1 / (s * s);
                w.d2[i] = h2 / s - 2.0 * h1 * s1 / (s * s) - g.value * s2 / (s * s) + 2.0 * g.value * s1 * s1 / (s * s * s);
            }
            w
        })
        .collect()
}

/// Blend weights `(1+t)e^{−t}`, `t e^{−t}`, `1 − e^{−t} − t e^{−t}` with their
/// first and second time derivatives.
pub fn ic_blend_weights(t: f64) -> [[f64; 3]; 3] {
    let e = (-t).exp();
    [
        [(1.0 + t) * e, -t * e, (t - 1.0) * e],
        [t * e, (1.0 - t) * e, (t - 2.0) * e],
        [1.0 - e - t * e, t * e, (1.0 - t) * e],
    ]
}

fn blend_jet(w: [f64; 3], t_index: usize, coords: &[usize]) -> Jet2 {
    let mut j = Jet2::constant(w[0], coords);
    if let Some(i) = coords.iter().position(|&c| c == t_index) {
        j.d1[i] = w[1];
        j.d2[i] = w[2];
    }
    j
}

fn hard_ic_node(tape: &mut ParamTape, theta: &[f64], raw: NodeId, ic: &IcJets, t: f64, dim: usize) -> Result<NodeId> {
    let width = tape.width(raw);
    if ic.u0.len() != width || ic.du0.len() != width {
        return Err(AutodiffError::Structural("initial data width does not match outputs".into()));
    }
    let coords = tape.coords().to_vec();
    let [a, b, c] = ic_blend_weights(t);
    let (a, b, c) = (blend_jet(a, dim, &coords), blend_jet(b, dim, &coords), blend_jet(c, dim, &coords));
    let bias: Vec<Jet2> = ic.u0.iter().zip(&ic.du0).map(|(u0, du0)| a.mul(u0).add(&b.mul(du0))).collect();
    tape.blend(theta, &[raw], &[c], Some(&bias))
}

/// Hard initial-condition blend of one output jet, for use outside a tape.
/// `t_index` is the coordinate index of time inside the jets.
pub fn hard_ic_wrap(raw: &Jet2, u0: &Jet2, du0: &Jet2, t: f64, t_index: usize) -> Jet2 {
    let [a, b, c] = ic_blend_weights(t);
    let coords = &raw.coords;
    blend_jet(a, t_index, coords)
        .mul(u0)
        .add(&blend_jet(b, t_index, coords).mul(du0))
        .add(&blend_jet(c, t_index, coords).mul(raw))
}

/// Gated pooling of each region followed by the mixer, on plain values.
/// `params` must be a NeuralMD network; only its mixer weights are used.
pub fn pool_mix(point_feat: &[f64], region_feats: &[Vec<Vec<f64>>], gates: &[Vec<f64>], params: &NetworkParams) -> Result<Vec<f64>> {
    let NetArch::NeuralMd(a) = &params.arch else {
        return Err(AutodiffError::Structural("pool_mix needs a NeuralMD architecture".into()));
    };
    if region_feats.len() != a.perturb.scales.len() || gates.len() != region_feats.len() {
        return Err(AutodiffError::Structural("one feature list per scale required".into()));
    }
    let l = a.layout();
    let theta = &params.theta;
    let mut tape = ParamTape::new(&[], theta.len());
    let point = tape.input(point_feat.len(), point_feat)?;
    let mut mix_in = vec![point];
    for (feats, hs) in region_feats.iter().zip(gates) {
        if feats.len() != hs.len() || feats.is_empty() {
            return Err(AutodiffError::Structural("gate count must match region points".into()));
        }
        let nodes = feats.iter().map(|f| tape.input(f.len(), f)).collect::<Result<Vec<_>>>()?;
        let gj: Vec<Jet2> = hs.iter().map(|&h| Jet2::constant(h, &[])).collect();
        let w = pooled_weights(&gj);
        mix_in.push(tape.blend(theta, &nodes, &w, None)?);
    }
    let mut hidden = Vec::new();
    for j in 0..a.mixer_hidden {
        let z = tape.combine(theta, &mix_in, l.mix_w1 + j * l.n_in_mix, Some(l.mix_b1 + j))?;
        hidden.push(tape.tanh(theta, z)?);
    }
    let out = tape.combine(theta, &hidden, l.mix_w2, Some(l.mix_b2))?;
    Ok(tape.values(out).to_vec())
}

/// Gated region means alone (before mixing), on plain values.
pub fn pool_regions(region_feats: &[Vec<Vec<f64>>], gates: &[Vec<f64>]) -> Vec<Vec<f64>> {
    region_feats
        .iter()
        .zip(gates)
        .map(|(feats, hs)| {
            let s: f64 = hs.iter().sum();
            let denom = s.max(POOL_FLOOR);
            let mut out = vec![0.0; feats[0].len()];
            for (f, h) in feats.iter().zip(hs) {
                for (o, v) in out.iter_mut().zip(f) {
                    *o += h / denom * v;
                }
            }
            out
        })
        .collect()
}

/// Full pipeline at `(x, t)` with freshly drawn perturbations.
pub fn forward_field(params: &NetworkParams, x: &[f64], t: f64, gate: Option<&GateState>, ic: Option<&IcJets>, rng: &mut Stream) -> Result<Vec<f64>> {
    let pert = params.arch.draw(rng);
    params.arch.eval(&params.theta, x, t, &FieldCtx { pert: &pert, gate, ic })
}

/// A network bound to one query context, usable with [`crate::autodiff::forward_jet`].
/// Raw input is `(x.., t)`.
pub struct BoundNet<'a> {
    pub arch: &'a NetArch,
    pub ctx: FieldCtx<'a>,
}

impl JetModel for BoundNet<'_> {
    fn n_params(&self) -> usize {
        self.arch.n_params()
    }
    fn n_inputs(&self) -> usize {
        self.arch.dim() + 1
    }
    fn record(&self, tape: &mut ParamTape, theta: &[f64], input: &[f64]) -> Result<NodeId> {
        let d = self.arch.dim();
        self.arch.record(tape, theta, &input[..d], input[d], &self.ctx)
    }
}

/// Offsets of the mixer's second map inside a NeuralMD parameter vector:
/// `(weights, bias)`.
pub fn mixer_output_offsets(a: &Architecture) -> (usize, usize) {
    let l = a.layout();
    (l.mix_w2, l.mix_b2)
}

/// Offsets of the mixer's first map: `(weights, biases, inputs per row)`.
pub fn mixer_input_offsets(a: &Architecture) -> (usize, usize, usize) {
    let l = a.layout();
    (l.mix_w1, l.mix_b1, l.n_in_mix)
}

/// Offsets of the final head map: `(weights, biases)`.
pub fn head_output_offsets(a: &Architecture) -> (usize, usize) {
    let l = a.layout();
    let &(w, b, _) = l.head.last().expect("head has an output layer");
    (w, b)
}

/// Offset range of the encoder's first layer weights and bias.
pub fn encoder_offsets(a: &Architecture) -> std::ops::Range<usize> {
    let l = a.layout();
    l.w_time..l.b0 + a.d_model
}
