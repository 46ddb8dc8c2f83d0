#![allow(dead_code)]

use neuralmd_core::network::{Architecture, EmbeddingSpec, NetArch, MlpArch, PerturbConfig, Perturbation, Scale};
use neuralmd_core::physics::{InitialData, ProblemSpec};
use neuralmd_core::rng::{substream, Stream};
use neuralmd_core::training::{GateState, GateVariant, IcData};
use rand::RngExt;

pub const T_FINAL: f64 = 5.0;

/// Small NeuralMD network with random sizes.
pub fn small_neuralmd(rng: &mut Stream, dim: usize, outputs: usize) -> NetArch {
    let n_scales = rng.random_range(1..=3);
    let mut radius = 0.0;
    let scales = (0..n_scales)
        .map(|_| {
            radius += rng.random_range(0.01..0.05);
            Scale { radius, count: rng.random_range(1..=4) }
        })
        .collect();
    NetArch::NeuralMd(Architecture {
        embedding: EmbeddingSpec { period: vec![32.0; dim], modes: rng.random_range(1..=3) },
        d_model: rng.random_range(3..=6),
        encoder_hidden: if rng.random_bool(0.5) { vec![rng.random_range(2..=5)] } else { vec![] },
        perturb: PerturbConfig { scales, t_final: T_FINAL },
        mixer_hidden: rng.random_range(2..=4),
        head_hidden: vec![rng.random_range(3..=6)],
        outputs,
    })
}

pub fn small_mlp(rng: &mut Stream, dim: usize) -> NetArch {
    NetArch::Mlp(MlpArch { dim, hidden: vec![rng.random_range(3..=6), rng.random_range(3..=6)], outputs: 1 })
}

/// Initialization scaled up so the tanh layers leave their linear range.
pub fn random_theta(arch: &NetArch, rng: &mut Stream) -> Vec<f64> {
    arch.init(rng).into_iter().map(|v| 2.0 * v).collect()
}

pub fn random_gate(rng: &mut Stream) -> Option<GateState> {
    rng.random_bool(0.5).then(|| {
        let mut g = GateState::with_gamma(rng.random_range(0.3..1.2));
        if rng.random_bool(0.3) {
            g.variant = GateVariant::ReluTanh;
        }
        g
    })
}

pub fn draw(arch: &NetArch, rng: &mut Stream) -> Perturbation {
    arch.draw(rng)
}

pub fn spec_for(dim: usize, eps: f64) -> ProblemSpec {
    let init = match dim {
        1 => InitialData::Benchmark1d,
        2 => InitialData::Benchmark2d,
        _ => InitialData::Benchmark3d,
    };
    ProblemSpec::new(eps, 1.0, vec![(-16.0, 16.0); dim], T_FINAL, init).unwrap()
}

pub fn ic_for(dim: usize) -> IcData {
    IcData::new(&spec_for(dim, 0.5), if dim == 1 { 128 } else { 32 }).unwrap()
}

pub fn rng(name: &str, i: u64) -> Stream {
    substream(i, name)
}

/// `‖a − b‖ / ‖b‖` with a floor on the denominator.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}
