//! On-disk formats: checkpoints, binary field files, CSV tables and PPM
//! heatmaps. All binary integers and floats are little-endian.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NetArch;
use crate::spectral::Grid;
use crate::training::{GateState, StageTag};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NMDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FIELD_MAGIC: &[u8; 8] = b"NMDFIELD";
pub const FIELD_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IoError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
}

impl From<std::io::Error> for IoError {
    fn from(e: std::io::Error) -> Self {
        IoError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, IoError>;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(IoError::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(IoError::Format("trailing bytes".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    arch: NetArch,
    gate: Option<GateState>,
}

/// Trained network plus everything needed to evaluate it again.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: NetArch,
    pub gate: Option<GateState>,
    pub seed: u64,
    pub stage: StageTag,
    pub theta: Vec<f64>,
}

impl Checkpoint {
    /// Layout: magic, version, descriptor length and JSON, seed, stage tag,
    /// final gate shift (NaN without a gate), parameter count, parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let desc = serde_json::to_vec(&Descriptor { arch: self.arch.clone(), gate: self.gate.clone() }).expect("descriptor serializes");
        let mut b = Vec::with_capacity(64 + desc.len() + 8 * self.theta.len());
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(desc.len() as u64).to_le_bytes());
        b.extend_from_slice(&desc);
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.push(self.stage.code());
        let gamma = self.gate.as_ref().map_or(f64::NAN, |g| g.gamma);
        b.extend_from_slice(&gamma.to_le_bytes());
        b.extend_from_slice(&(self.theta.len() as u64).to_le_bytes());
        for v in &self.theta {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(IoError::Format("not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(IoError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let n = r.u64()? as usize;
        let desc: Descriptor = serde_json::from_slice(r.take(n)?).map_err(|e| IoError::Format(format!("descriptor: {e}")))?;
        let seed = r.u64()?;
        let stage = StageTag::from_code(r.u8()?).ok_or_else(|| IoError::Format("unknown stage tag".into()))?;
        let gamma = r.f64()?;
        let np = r.u64()? as usize;
        if np != desc.arch.n_params() {
            return Err(IoError::Format(format!("{np} parameters stored, architecture needs {}", desc.arch.n_params())));
        }
        let theta = (0..np).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.done()?;
        let gate = desc.gate.map(|mut g| {
            g.gamma = gamma;
            g
        });
        Ok(Checkpoint { arch: desc.arch, gate, seed, stage, theta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldData {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

impl FieldData {
    fn len(&self) -> usize {
        match self {
            FieldData::Real(v) => v.len(),
            FieldData::Complex(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            FieldData::Real(_) => 0,
            FieldData::Complex(_) => 1,
        }
    }
}

/// Row-major array with its shape, e.g. `[n_times, n_x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub dims: Vec<usize>,
    pub data: FieldData,
}

impl FieldFile {
    pub fn new(dims: Vec<usize>, data: FieldData) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(IoError::Format("payload does not match dimensions".into()));
        }
        Ok(FieldFile { dims, data })
    }

    pub fn real_snapshots(fields: &[Vec<f64>]) -> Result<Self> {
        let n = fields.first().map_or(0, Vec::len);
        Self::new(vec![fields.len(), n], FieldData::Real(fields.concat()))
    }

    pub fn complex_snapshots(fields: &[Vec<Complex64>]) -> Result<Self> {
        let n = fields.first().map_or(0, Vec::len);
        Self::new(vec![fields.len(), n], FieldData::Complex(fields.concat()))
    }

    /// Layout: magic, version, rank, each dimension, dtype tag
    /// (0 real, 1 complex), payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(FIELD_MAGIC);
        b.extend_from_slice(&FIELD_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            b.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        b.push(self.data.tag());
        match &self.data {
            FieldData::Real(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            FieldData::Complex(v) => v.iter().for_each(|c| {
                b.extend_from_slice(&c.re.to_le_bytes());
                b.extend_from_slice(&c.im.to_le_bytes());
            }),
        }
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != FIELD_MAGIC {
            return Err(IoError::Format("not a field file".into()));
        }
        let version = r.u32()?;
        if version != FIELD_VERSION {
            return Err(IoError::Version { found: version, expected: FIELD_VERSION });
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = match r.u8()? {
            0 => FieldData::Real((0..n).map(|_| r.f64()).collect::<Result<_>>()?),
            1 => FieldData::Complex((0..n).map(|_| Ok(Complex64::new(r.f64()?, r.f64()?))).collect::<Result<_>>()?),
            t => return Err(IoError::Format(format!("unknown dtype tag {t}"))),
        };
        r.done()?;
        Ok(FieldFile { dims, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn coord_header(dim: usize) -> String {
    ["x", "y", "z"].iter().take(dim).copied().chain((3..dim).map(|_| "w")).collect::<Vec<_>>().join(",")
}

/// `t, x.., value` rows for real snapshots on `grid`.
pub fn real_snapshots_csv(grid: &Grid, times: &[f64], fields: &[Vec<f64>]) -> String {
    let mut s = format!("t,{},value\n", coord_header(grid.dim()));
    for (t, f) in times.iter().zip(fields) {
        for (i, v) in f.iter().enumerate() {
            let p = grid.point(i);
            let xs: Vec<String> = p.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{t},{},{v}", xs.join(","));
        }
    }
    s
}

/// `t, x.., re, im` rows for complex snapshots on `grid`.
pub fn complex_snapshots_csv(grid: &Grid, times: &[f64], fields: &[Vec<Complex64>]) -> String {
    let mut s = format!("t,{},re,im\n", coord_header(grid.dim()));
    for (t, f) in times.iter().zip(fields) {
        for (i, v) in f.iter().enumerate() {
            let p = grid.point(i);
            let xs: Vec<String> = p.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{t},{},{},{}", xs.join(","), v.re, v.im);
        }
    }
    s
}

fn colormap(v: f64) -> [u8; 3] {
    // Piecewise-linear dark blue -> teal -> yellow.
    let stops = [[13.0, 8.0, 135.0], [33.0, 145.0, 140.0], [253.0, 231.0, 37.0]];
    let v = v.clamp(0.0, 1.0) * 2.0;
    let i = (v.floor() as usize).min(1);
    let f = v - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (stops[i][c] * (1.0 - f) + stops[i + 1][c] * f).round() as u8;
    }
    out
}

/// Binary PPM image of `rows[i][j]` scaled to `[0, max]`; row 0 at the top.
pub fn heatmap_ppm(rows: &[Vec<f64>]) -> Vec<u8> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    let max = rows.iter().flatten().copied().fold(0.0f64, f64::max);
    let mut b = format!("P6\n{w} {h}\n255\n").into_bytes();
    for r in rows {
        for &v in r {
            b.extend_from_slice(&colormap(if max > 0.0 { v / max } else { 0.0 }));
        }
    }
    b
}
