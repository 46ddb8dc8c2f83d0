//! Forward second-order jets recorded on a layer-level reverse tape.
//!
//! Every vector node stores `lanes` copies of its activations: lane 0 is the
//! value, lanes `1..=n` the first derivatives along the wanted coordinates and
//! lanes `n+1..=2n` the matching diagonal second derivatives. A reverse sweep
//! over the tape yields parameter gradients of any scalar built from those
//! lanes, so losses containing `u_tt` and `Δu` differentiate exactly.

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("structural error: {0}")]
    Structural(String),
    #[error("non-finite value produced at layer {layer}")]
    NonFinite { layer: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Arithmetic shared by plain `f64` and tape variables, so residual formulas
/// are written once.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    /// A constant living in the same context as `self`.
    fn lift(&self, c: f64) -> Self;
    fn val(&self) -> f64;
}

impl Scalar for f64 {
    fn lift(&self, c: f64) -> f64 {
        c
    }
    fn val(&self) -> f64 {
        *self
    }
}

/// Value, gradient and diagonal Hessian of one output with respect to a set
/// of raw input coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet2<S = f64> {
    pub value: S,
    /// Coordinate indices (into the raw `(x.., t)` input) carried by `d1`/`d2`.
    pub coords: Vec<usize>,
    pub d1: Vec<S>,
    pub d2: Vec<S>,
}

impl<S: Scalar> Jet2<S> {
    pub fn d1(&self, coord: usize) -> Option<S> {
        self.coords.iter().position(|&c| c == coord).map(|i| self.d1[i])
    }

    /// Second derivative for a coordinate pair. Only diagonal entries are
    /// tracked; off-diagonal pairs return `None`.
    pub fn d2(&self, a: usize, b: usize) -> Option<S> {
        if a != b {
            return None;
        }
        self.coords.iter().position(|&c| c == a).map(|i| self.d2[i])
    }

    /// Sum of `d2` over the first `dim` coordinates. Panics when one is missing.
    pub fn laplacian(&self, dim: usize) -> S {
        let mut acc = self.value.lift(0.0);
        for c in 0..dim {
            acc = acc + self.d2(c, c).expect("jet lacks a spatial second derivative");
        }
        acc
    }

    pub fn dt(&self, dim: usize) -> S {
        self.d1(dim).expect("jet lacks the time derivative")
    }

    pub fn dtt(&self, dim: usize) -> S {
        self.d2(dim, dim).expect("jet lacks the second time derivative")
    }
}

impl Jet2<f64> {
    pub fn constant(value: f64, coords: &[usize]) -> Self {
        Jet2 { value, coords: coords.to_vec(), d1: vec![0.0; coords.len()], d2: vec![0.0; coords.len()] }
    }

    /// The identity map of raw coordinate `coord` evaluated at `value`.
    pub fn coordinate(value: f64, coord: usize, coords: &[usize]) -> Self {
        let mut j = Self::constant(value, coords);
        if let Some(i) = coords.iter().position(|&c| c == coord) {
            j.d1[i] = 1.0;
        }
        j
    }

    /// Lane-major packing `[value, d1.., d2..]`.
    pub fn lanes(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + 2 * self.d1.len());
        v.push(self.value);
        v.extend_from_slice(&self.d1);
        v.extend_from_slice(&self.d2);
        v
    }

    pub fn mul(&self, o: &Jet2) -> Jet2 {
        let n = self.d1.len();
        let mut r = Jet2::constant(self.value * o.value, &self.coords);
        for i in 0..n {
            r.d1[i] = self.d1[i] * o.value + self.value * o.d1[i];
            r.d2[i] = self.d2[i] * o.value + 2.0 * self.d1[i] * o.d1[i] + self.value * o.d2[i];
        }
        r
    }

    pub fn add(&self, o: &Jet2) -> Jet2 {
        let mut r = self.clone();
        r.value += o.value;
        for i in 0..r.d1.len() {
            r.d1[i] += o.d1[i];
            r.d2[i] += o.d2[i];
        }
        r
    }
}

/// Handle to a vector node on a [`ParamTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Handle to a scalar on a [`ParamTape`] that outlives borrows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId {
    tape: u64,
    idx: u32,
}

#[derive(Debug, Clone, Copy)]
enum SOp {
    Leaf(usize),
    Const,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Neg(u32),
    AddC(u32),
    MulC(u32, f64),
}

#[derive(Debug, Clone, Copy)]
struct SNode {
    val: f64,
    op: SOp,
}

#[derive(Debug, Default)]
struct ScalarGraph {
    nodes: RefCell<Vec<SNode>>,
}

/// Scalar variable recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    g: &'t ScalarGraph,
    tape: u64,
    idx: u32,
    v: f64,
}

impl<'t> Var<'t> {
    fn push(&self, val: f64, op: SOp) -> Var<'t> {
        let mut nodes = self.g.nodes.borrow_mut();
        nodes.push(SNode { val, op });
        Var { g: self.g, tape: self.tape, idx: (nodes.len() - 1) as u32, v: val }
    }

    pub fn id(&self) -> VarId {
        VarId { tape: self.tape, idx: self.idx }
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}: {})", self.idx, self.v)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Var<'t>) -> Var<'t> {
        self.push(self.v + o.v, SOp::Add(self.idx, o.idx))
    }
}
impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Var<'t>) -> Var<'t> {
        self.push(self.v - o.v, SOp::Sub(self.idx, o.idx))
    }
}
impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Var<'t>) -> Var<'t> {
        self.push(self.v * o.v, SOp::Mul(self.idx, o.idx))
    }
}
impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.push(-self.v, SOp::Neg(self.idx))
    }
}
impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.push(self.v + c, SOp::AddC(self.idx))
    }
}
impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.push(self.v - c, SOp::AddC(self.idx))
    }
}
impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.push(self.v * c, SOp::MulC(self.idx, c))
    }
}

impl Scalar for Var<'_> {
    fn lift(&self, c: f64) -> Self {
        self.push(c, SOp::Const)
    }
    fn val(&self) -> f64 {
        self.v
    }
}

#[derive(Debug, Clone, Copy)]
enum VOp {
    Input,
    /// `y = W x + b`, `W` row-major `width x n_in`.
    Affine { x: usize, w: usize, b: Option<usize>, n_in: usize },
    /// `y = base + θ[w + j*stride] * c` with `c` a constant scalar jet.
    AddCol { base: usize, w: usize, stride: usize, c: usize },
    Tanh { x: usize },
    /// `y = Σ_s θ[w+s] x_s + θ[b]`.
    Combine { links: usize, n: usize, w: usize, b: Option<usize> },
    /// `y = Σ_s c_s ⊙ x_s + bias` with constant scalar jets `c_s`.
    Blend { links: usize, n: usize, c: usize, bias: Option<usize> },
}

#[derive(Debug, Clone, Copy)]
struct VNode {
    op: VOp,
    off: usize,
    width: usize,
}

/// Reverse tape of layer-level operations on jet vectors.
#[derive(Debug)]
pub struct ParamTape {
    id: u64,
    coords: Vec<usize>,
    lanes: usize,
    n_params: usize,
    nodes: Vec<VNode>,
    links: Vec<usize>,
    val: Vec<f64>,
    adj: Vec<f64>,
    consts: Vec<f64>,
    scalars: ScalarGraph,
    sadj: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl ParamTape {
    /// `coords` lists the raw input coordinates that get derivative lanes.
    pub fn new(coords: &[usize], n_params: usize) -> Self {
        ParamTape {
            id: fresh_id(),
            coords: coords.to_vec(),
            lanes: 1 + 2 * coords.len(),
            n_params,
            nodes: Vec::new(),
            links: Vec::new(),
            val: Vec::new(),
            adj: Vec::new(),
            consts: Vec::new(),
            scalars: ScalarGraph::default(),
            sadj: Vec::new(),
        }
    }

    /// Drop all recorded nodes, keeping buffers. Outstanding ids become invalid.
    pub fn reset(&mut self) {
        self.id = fresh_id();
        self.nodes.clear();
        self.links.clear();
        self.val.clear();
        self.consts.clear();
        self.scalars.nodes.borrow_mut().clear();
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn coords(&self) -> &[usize] {
        &self.coords
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn width(&self, n: NodeId) -> usize {
        self.nodes[n.0].width
    }

    /// Lane-major values of a node.
    pub fn values(&self, n: NodeId) -> &[f64] {
        let nd = self.nodes[n.0];
        &self.val[nd.off..nd.off + nd.width * self.lanes]
    }

    fn alloc(&mut self, op: VOp, width: usize) -> usize {
        let off = self.val.len();
        self.val.resize(off + width * self.lanes, 0.0);
        self.nodes.push(VNode { op, off, width });
        self.nodes.len() - 1
    }

    fn push_const(&mut self, data: &[f64]) -> usize {
        let off = self.consts.len();
        self.consts.extend_from_slice(data);
        off
    }

    fn check_params(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params {
            return Err(AutodiffError::Structural(format!(
                "parameter vector has {} entries, tape expects {}",
                theta.len(),
                self.n_params
            )));
        }
        Ok(())
    }

    fn check_node(&self, n: NodeId) -> Result<()> {
        if n.0 >= self.nodes.len() {
            return Err(AutodiffError::Structural(format!("node {} not on tape", n.0)));
        }
        Ok(())
    }

    /// Constant input node from lane-major data of length `width * lanes`.
    pub fn input(&mut self, width: usize, data: &[f64]) -> Result<NodeId> {
        if data.len() != width * self.lanes {
            return Err(AutodiffError::Structural(format!(
                "input of width {width} needs {} values, got {}",
                width * self.lanes,
                data.len()
            )));
        }
        let k = self.alloc(VOp::Input, width);
        let off = self.nodes[k].off;
        self.val[off..off + data.len()].copy_from_slice(data);
        self.finish(k)
    }

    /// Constant input node built from one jet per unit.
    pub fn input_jets(&mut self, jets: &[Jet2]) -> Result<NodeId> {
        let w = jets.len();
        let mut data = vec![0.0; w * self.lanes];
        for (j, jet) in jets.iter().enumerate() {
            let lanes = jet.lanes();
            if lanes.len() != self.lanes {
                return Err(AutodiffError::Structural("jet lane count mismatch".into()));
            }
            for (l, v) in lanes.into_iter().enumerate() {
                data[l * w + j] = v;
            }
        }
        self.input(w, &data)
    }

    pub fn affine(
        &mut self,
        theta: &[f64],
        x: NodeId,
        w: usize,
        b: Option<usize>,
        n_out: usize,
    ) -> Result<NodeId> {
        self.check_params(theta)?;
        self.check_node(x)?;
        let n_in = self.nodes[x.0].width;
        let end = w + n_in * n_out;
        if end > theta.len() || b.is_some_and(|b| b + n_out > theta.len()) {
            return Err(AutodiffError::Structural("affine parameters out of range".into()));
        }
        let k = self.alloc(VOp::Affine { x: x.0, w, b, n_in }, n_out);
        self.exec(theta, k);
        self.finish(k)
    }

    /// Adds `θ[w + j*stride] * c` to every unit `j` of `base`.
    pub fn add_column(
        &mut self,
        theta: &[f64],
        base: NodeId,
        w: usize,
        stride: usize,
        c: &Jet2,
    ) -> Result<NodeId> {
        self.check_params(theta)?;
        self.check_node(base)?;
        let width = self.nodes[base.0].width;
        if width > 0 && w + (width - 1) * stride >= theta.len() {
            return Err(AutodiffError::Structural("column parameters out of range".into()));
        }
        let c = self.push_const(&c.lanes());
        let k = self.alloc(VOp::AddCol { base: base.0, w, stride, c }, width);
        self.exec(theta, k);
        self.finish(k)
    }

    pub fn tanh(&mut self, theta: &[f64], x: NodeId) -> Result<NodeId> {
        self.check_node(x)?;
        let width = self.nodes[x.0].width;
        let k = self.alloc(VOp::Tanh { x: x.0 }, width);
        self.exec(theta, k);
        self.finish(k)
    }

    /// Parametric linear combination of equally wide nodes.
    pub fn combine(&mut self, theta: &[f64], xs: &[NodeId], w: usize, b: Option<usize>) -> Result<NodeId> {
        self.check_params(theta)?;
        let width = self.common_width(xs)?;
        if w + xs.len() > theta.len() || b.is_some_and(|b| b >= theta.len()) {
            return Err(AutodiffError::Structural("combine parameters out of range".into()));
        }
        let links = self.links.len();
        self.links.extend(xs.iter().map(|n| n.0));
        let k = self.alloc(VOp::Combine { links, n: xs.len(), w, b }, width);
        self.exec(theta, k);
        self.finish(k)
    }

    /// Constant-jet weighted sum `Σ c_s ⊙ x_s (+ bias)`.
    pub fn blend(&mut self, theta: &[f64], xs: &[NodeId], weights: &[Jet2], bias: Option<&[Jet2]>) -> Result<NodeId> {
        if xs.len() != weights.len() {
            return Err(AutodiffError::Structural("blend weight count mismatch".into()));
        }
        let width = self.common_width(xs)?;
        let mut cdata = Vec::with_capacity(weights.len() * self.lanes);
        for wj in weights {
            cdata.extend(wj.lanes());
        }
        if cdata.len() != weights.len() * self.lanes {
            return Err(AutodiffError::Structural("blend weight lane mismatch".into()));
        }
        let c = self.push_const(&cdata);
        let bias = match bias {
            Some(bs) => {
                if bs.len() != width {
                    return Err(AutodiffError::Structural("blend bias width mismatch".into()));
                }
                let mut data = vec![0.0; width * self.lanes];
                for (j, jet) in bs.iter().enumerate() {
                    for (l, v) in jet.lanes().into_iter().enumerate() {
                        data[l * width + j] = v;
                    }
                }
                Some(self.push_const(&data))
            }
            None => None,
        };
        let links = self.links.len();
        self.links.extend(xs.iter().map(|n| n.0));
        let k = self.alloc(VOp::Blend { links, n: xs.len(), c, bias }, width);
        self.exec(theta, k);
        self.finish(k)
    }

    fn common_width(&self, xs: &[NodeId]) -> Result<usize> {
        let first = xs.first().ok_or_else(|| AutodiffError::Structural("empty operand list".into()))?;
        for &x in xs {
            self.check_node(x)?;
        }
        let width = self.nodes[first.0].width;
        if xs.iter().any(|x| self.nodes[x.0].width != width) {
            return Err(AutodiffError::Structural("operand widths differ".into()));
        }
        Ok(width)
    }

    fn finish(&self, k: usize) -> Result<NodeId> {
        let nd = self.nodes[k];
        let s: f64 = self.val[nd.off..nd.off + nd.width * self.lanes].iter().sum();
        if !s.is_finite() {
            return Err(AutodiffError::NonFinite { layer: k });
        }
        Ok(NodeId(k))
    }

    fn exec(&mut self, theta: &[f64], k: usize) {
        let nd = self.nodes[k];
        let lanes = self.lanes;
        let nc = self.coords.len();
        let width = nd.width;
        let (head, tail) = self.val.split_at_mut(nd.off);
        let y = &mut tail[..width * lanes];
        let slice = |n: usize, nodes: &[VNode]| {
            let m = nodes[n];
            (m.off, m.width)
        };
        match nd.op {
            VOp::Input => {}
            VOp::Affine { x, w, b, n_in } => {
                let (xo, _) = slice(x, &self.nodes);
                let xv = &head[xo..xo + n_in * lanes];
                for j in 0..width {
                    let row = &theta[w + j * n_in..w + (j + 1) * n_in];
                    for l in 0..lanes {
                        y[l * width + j] = dot(row, &xv[l * n_in..(l + 1) * n_in]);
                    }
                    if let Some(b) = b {
                        y[j] += theta[b + j];
                    }
                }
            }
            VOp::AddCol { base, w, stride, c } => {
                let (bo, _) = slice(base, &self.nodes);
                y.copy_from_slice(&head[bo..bo + width * lanes]);
                let cj = &self.consts[c..c + lanes];
                for j in 0..width {
                    let wj = theta[w + j * stride];
                    for l in 0..lanes {
                        y[l * width + j] += wj * cj[l];
                    }
                }
            }
            VOp::Tanh { x } => {
                let (xo, _) = slice(x, &self.nodes);
                let xv = &head[xo..xo + width * lanes];
                for j in 0..width {
                    let t = xv[j].tanh();
                    let s = 1.0 - t * t;
                    y[j] = t;
                    for c in 0..nc {
                        let u1 = xv[(1 + c) * width + j];
                        let u2 = xv[(1 + nc + c) * width + j];
                        y[(1 + c) * width + j] = s * u1;
                        y[(1 + nc + c) * width + j] = s * u2 - 2.0 * t * s * u1 * u1;
                    }
                }
            }
            VOp::Combine { links, n, w, b } => {
                y.iter_mut().for_each(|v| *v = 0.0);
                for s in 0..n {
                    let (xo, _) = slice(self.links[links + s], &self.nodes);
                    axpy(theta[w + s], &head[xo..xo + width * lanes], y);
                }
                if let Some(b) = b {
                    for v in &mut y[..width] {
                        *v += theta[b];
                    }
                }
            }
            VOp::Blend { links, n, c, bias } => {
                match bias {
                    Some(bo) => y.copy_from_slice(&self.consts[bo..bo + width * lanes]),
                    None => y.iter_mut().for_each(|v| *v = 0.0),
                }
                for s in 0..n {
                    let (xo, _) = slice(self.links[links + s], &self.nodes);
                    let xv = &head[xo..xo + width * lanes];
                    let cj = &self.consts[c + s * lanes..c + (s + 1) * lanes];
                    jet_scale_add(cj, xv, y, width, nc);
                }
            }
        }
    }

    /// Re-executes every recorded operation with `theta`.
    pub fn replay(&mut self, theta: &[f64]) -> Result<()> {
        self.check_params(theta)?;
        for k in 0..self.nodes.len() {
            self.exec(theta, k);
            self.finish(k)?;
        }
        Ok(())
    }

    /// Jets of every unit of `n`, as tape variables.
    pub fn jets(&self, n: NodeId) -> Vec<Jet2<Var<'_>>> {
        let nd = self.nodes[n.0];
        let nc = self.coords.len();
        (0..nd.width)
            .map(|j| {
                let lane = |l: usize| self.leaf(nd.off + l * nd.width + j);
                Jet2 {
                    value: lane(0),
                    coords: self.coords.clone(),
                    d1: (0..nc).map(|c| lane(1 + c)).collect(),
                    d2: (0..nc).map(|c| lane(1 + nc + c)).collect(),
                }
            })
            .collect()
    }

    /// Jets of every unit of `n` as plain numbers.
    pub fn jets_f64(&self, n: NodeId) -> Vec<Jet2> {
        let nd = self.nodes[n.0];
        let nc = self.coords.len();
        let v = &self.val[nd.off..];
        (0..nd.width)
            .map(|j| Jet2 {
                value: v[j],
                coords: self.coords.clone(),
                d1: (0..nc).map(|c| v[(1 + c) * nd.width + j]).collect(),
                d2: (0..nc).map(|c| v[(1 + nc + c) * nd.width + j]).collect(),
            })
            .collect()
    }

    fn leaf(&self, idx: usize) -> Var<'_> {
        let v = self.val[idx];
        let mut nodes = self.scalars.nodes.borrow_mut();
        nodes.push(SNode { val: v, op: SOp::Leaf(idx) });
        Var { g: &self.scalars, tape: self.id, idx: (nodes.len() - 1) as u32, v }
    }

    /// A free scalar constant on this tape.
    pub fn constant(&self, c: f64) -> Var<'_> {
        let mut nodes = self.scalars.nodes.borrow_mut();
        nodes.push(SNode { val: c, op: SOp::Const });
        Var { g: &self.scalars, tape: self.id, idx: (nodes.len() - 1) as u32, v: c }
    }

    /// Value of a recorded scalar.
    pub fn scalar_value(&self, v: VarId) -> Result<f64> {
        self.check_var(v)?;
        Ok(self.scalars.nodes.borrow()[v.idx as usize].val)
    }

    fn check_var(&self, v: VarId) -> Result<()> {
        if v.tape != self.id || v.idx as usize >= self.scalars.nodes.borrow().len() {
            return Err(AutodiffError::Structural("loss node not on tape".into()));
        }
        Ok(())
    }

    /// Accumulates `∂loss/∂θ` into `grad`.
    pub fn backward_into(&mut self, theta: &[f64], loss: VarId, grad: &mut [f64]) -> Result<()> {
        self.check_params(theta)?;
        self.check_var(loss)?;
        if grad.len() != self.n_params {
            return Err(AutodiffError::Structural("gradient buffer length mismatch".into()));
        }
        self.adj.clear();
        self.adj.resize(self.val.len(), 0.0);
        {
            let snodes = self.scalars.nodes.borrow();
            let n = loss.idx as usize + 1;
            self.sadj.clear();
            self.sadj.resize(n, 0.0);
            self.sadj[n - 1] = 1.0;
            for i in (0..n).rev() {
                let a = self.sadj[i];
                if a == 0.0 {
                    continue;
                }
                match snodes[i].op {
                    SOp::Leaf(idx) => self.adj[idx] += a,
                    SOp::Const => {}
                    SOp::Add(p, q) => {
                        self.sadj[p as usize] += a;
                        self.sadj[q as usize] += a;
                    }
                    SOp::Sub(p, q) => {
                        self.sadj[p as usize] += a;
                        self.sadj[q as usize] -= a;
                    }
                    SOp::Mul(p, q) => {
                        let (vp, vq) = (snodes[p as usize].val, snodes[q as usize].val);
                        self.sadj[p as usize] += a * vq;
                        self.sadj[q as usize] += a * vp;
                    }
                    SOp::Neg(p) => self.sadj[p as usize] -= a,
                    SOp::AddC(p) => self.sadj[p as usize] += a,
                    SOp::MulC(p, c) => self.sadj[p as usize] += a * c,
                }
            }
        }
        for k in (0..self.nodes.len()).rev() {
            self.back(theta, k, grad);
        }
        Ok(())
    }

    fn back(&mut self, theta: &[f64], k: usize, grad: &mut [f64]) {
        let nd = self.nodes[k];
        let lanes = self.lanes;
        let nc = self.coords.len();
        let width = nd.width;
        let (ahead, atail) = self.adj.split_at_mut(nd.off);
        let ybar = &atail[..width * lanes];
        if ybar.iter().all(|&v| v == 0.0) {
            return;
        }
        let val = &self.val;
        let y = &val[nd.off..nd.off + width * lanes];
        match nd.op {
            VOp::Input => {}
            VOp::Affine { x, w, b, n_in } => {
                let xo = self.nodes[x].off;
                let xv = &val[xo..xo + n_in * lanes];
                let xbar = &mut ahead[xo..xo + n_in * lanes];
                for j in 0..width {
                    let row = &theta[w + j * n_in..w + (j + 1) * n_in];
                    let grow = &mut grad[w + j * n_in..w + (j + 1) * n_in];
                    for l in 0..lanes {
                        let yb = ybar[l * width + j];
                        if yb == 0.0 {
                            continue;
                        }
                        axpy(yb, row, &mut xbar[l * n_in..(l + 1) * n_in]);
                        axpy(yb, &xv[l * n_in..(l + 1) * n_in], grow);
                    }
                    if let Some(b) = b {
                        grad[b + j] += ybar[j];
                    }
                }
            }
            VOp::AddCol { base, w, stride, c } => {
                let bo = self.nodes[base].off;
                for (d, s) in ahead[bo..bo + width * lanes].iter_mut().zip(ybar) {
                    *d += s;
                }
                let cj = &self.consts[c..c + lanes];
                for j in 0..width {
                    let mut g = 0.0;
                    for l in 0..lanes {
                        g += ybar[l * width + j] * cj[l];
                    }
                    grad[w + j * stride] += g;
                }
            }
            VOp::Tanh { x } => {
                let xo = self.nodes[x].off;
                let xv = &val[xo..xo + width * lanes];
                let xbar = &mut ahead[xo..xo + width * lanes];
                for j in 0..width {
                    let t = y[j];
                    let s = 1.0 - t * t;
                    let ds = -2.0 * t * s;
                    let dts = s * (1.0 - 3.0 * t * t);
                    let mut v_bar = ybar[j] * s;
                    for c in 0..nc {
                        let i1 = (1 + c) * width + j;
                        let i2 = (1 + nc + c) * width + j;
                        let (u1, u2) = (xv[i1], xv[i2]);
                        let (b1, b2) = (ybar[i1], ybar[i2]);
                        xbar[i2] += b2 * s;
                        xbar[i1] += b1 * s - 4.0 * b2 * t * s * u1;
                        v_bar += b1 * u1 * ds + b2 * (u2 * ds - 2.0 * u1 * u1 * dts);
                    }
                    xbar[j] += v_bar;
                }
            }
            VOp::Combine { links, n, w, b } => {
                for s in 0..n {
                    let xo = self.nodes[self.links[links + s]].off;
                    let xv = &val[xo..xo + width * lanes];
                    grad[w + s] += dot(ybar, xv);
                    axpy(theta[w + s], ybar, &mut ahead[xo..xo + width * lanes]);
                }
                if let Some(b) = b {
                    grad[b] += ybar[..width].iter().sum::<f64>();
                }
            }
            VOp::Blend { links, n, c, .. } => {
                for s in 0..n {
                    let xo = self.nodes[self.links[links + s]].off;
                    let cj = &self.consts[c + s * lanes..c + (s + 1) * lanes];
                    let xbar = &mut ahead[xo..xo + width * lanes];
                    for j in 0..width {
                        let mut vb = cj[0] * ybar[j];
                        for q in 0..nc {
                            let i1 = (1 + q) * width + j;
                            let i2 = (1 + nc + q) * width + j;
                            vb += cj[1 + q] * ybar[i1] + cj[1 + nc + q] * ybar[i2];
                            xbar[i1] += cj[0] * ybar[i1] + 2.0 * cj[1 + q] * ybar[i2];
                            xbar[i2] += cj[0] * ybar[i2];
                        }
                        xbar[j] += vb;
                    }
                }
            }
        }
    }
}

/// `y += c ⊙ x` for a scalar jet `c` and vector jet `x`, lane-major.
fn jet_scale_add(c: &[f64], x: &[f64], y: &mut [f64], width: usize, nc: usize) {
    for j in 0..width {
        let xv = x[j];
        y[j] += c[0] * xv;
        for q in 0..nc {
            let i1 = (1 + q) * width + j;
            let i2 = (1 + nc + q) * width + j;
            y[i1] += c[1 + q] * xv + c[0] * x[i1];
            y[i2] += c[1 + nc + q] * xv + 2.0 * c[1 + q] * x[i1] + c[0] * x[i2];
        }
    }
}

/// Gradient of `loss` with respect to every parameter.
pub fn param_grad(tape: &mut ParamTape, theta: &[f64], loss: VarId) -> Result<Vec<f64>> {
    let mut g = vec![0.0; tape.n_params()];
    tape.backward_into(theta, loss, &mut g)?;
    Ok(g)
}

/// Anything that records its forward pass for one raw input point on a tape.
pub trait JetModel {
    fn n_params(&self) -> usize;
    /// Number of raw input coordinates (spatial dimensions plus time).
    fn n_inputs(&self) -> usize;
    fn record(&self, tape: &mut ParamTape, theta: &[f64], input: &[f64]) -> Result<NodeId>;
}

/// Outputs of `model` at `input`, with derivatives along `wanted` coordinates.
pub fn forward_jet<M: JetModel + ?Sized>(model: &M, theta: &[f64], input: &[f64], wanted: &[usize]) -> Result<Vec<Jet2>> {
    if theta.len() != model.n_params() {
        return Err(AutodiffError::Structural(format!(
            "parameter vector has {} entries, architecture needs {}",
            theta.len(),
            model.n_params()
        )));
    }
    if input.len() != model.n_inputs() || wanted.iter().any(|&c| c >= input.len()) {
        return Err(AutodiffError::Structural("input coordinates do not match the model".into()));
    }
    let mut tape = ParamTape::new(wanted, theta.len());
    let out = model.record(&mut tape, theta, input)?;
    Ok(tape.jets_f64(out))
}

/// Sums per-item losses and gradients in fixed-size chunks, evaluated in
/// parallel and reduced in chunk order, so results do not depend on thread
/// scheduling.
pub fn batch_loss_grad<F>(n_items: usize, n_params: usize, chunk: usize, f: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize, &mut [f64]) -> Result<f64> + Sync,
{
    use rayon::prelude::*;
    let chunk = chunk.max(1);
    let n_chunks = n_items.div_ceil(chunk);
    let parts: Vec<Result<(f64, Vec<f64>)>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut g = vec![0.0; n_params];
            let mut l = 0.0;
            for i in c * chunk..((c + 1) * chunk).min(n_items) {
                l += f(i, &mut g)?;
            }
            Ok((l, g))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n_params];
    for p in parts {
        let (l, g) = p?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}
