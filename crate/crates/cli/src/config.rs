//! Sectioned TOML run configuration. Every key is optional and falls back to
//! the default shown by `RunConfig::default()`; unknown keys are rejected.

use neuralmd_core::network::PerturbConfig;
use neuralmd_core::physics::{InitialData, LossWeights, ProblemSpec};
use neuralmd_core::spectral::ReferenceSteps;
use neuralmd_core::training::{GateConfig, GateVariant, LbfgsConfig, NetworkConfig, ResampleConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub network: NetworkSection,
    pub training: TrainingSection,
    pub reference: ReferenceSection,
    pub evaluation: EvaluationSection,
    pub convergence: ConvergenceSection,
    pub baseline: BaselineSection,
    pub diagnose: DiagnoseSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    pub eps: f64,
    pub lambda: f64,
    pub dim: usize,
    /// `[a, b]`, shared by every dimension.
    pub domain: [f64; 2],
    pub t_final: f64,
    pub init: String,
}

impl Default for ProblemSection {
    fn default() -> Self {
        ProblemSection { eps: 0.5, lambda: 1.0, dim: 1, domain: [-16.0, 16.0], t_final: 5.0, init: "benchmark1d".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub d_model: usize,
    pub modes: usize,
    /// `model` for radii {0.03, 0.05, 0.07}, `benchmark` for {0.01, 0.05, 0.09}.
    pub preset: String,
    /// Explicit radii; overrides the preset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    pub counts: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub mixer_hidden: usize,
    pub head_hidden: Vec<usize>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let n = NetworkConfig::default();
        NetworkSection {
            d_model: n.d_model,
            modes: n.modes,
            preset: "model".into(),
            radii: None,
            counts: n.counts,
            encoder_hidden: n.encoder_hidden,
            mixer_hidden: n.mixer_hidden,
            head_hidden: n.head_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub seed: u64,
    pub adam_iters: usize,
    pub lbfgs_iters: usize,
    pub lr: f64,
    pub n_residual: usize,
    pub n_initial: usize,
    pub n_boundary: usize,
    pub w_res: f64,
    pub w_ic: f64,
    pub w_bd: f64,
    pub gate: bool,
    pub gate_variant: String,
    pub alpha: f64,
    pub gamma0: f64,
    pub eta: f64,
    pub eps_tol: f64,
    pub delta_max: f64,
    pub gated_residual: bool,
    pub probes: usize,
    pub probe_dt_fraction: f64,
    pub resample_every: usize,
    pub swap_fraction: f64,
    pub window_floor: f64,
    pub fallback_span: f64,
    pub lbfgs_history: usize,
    pub lbfgs_c1: f64,
    pub lbfgs_shrink: f64,
    pub lbfgs_max_probes: usize,
    pub hard_ic: bool,
    pub ic_grid: usize,
    pub chunk: usize,
    /// Amplitude checkpoint for a remainder-only run; defaults to the output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1_checkpoint: Option<String>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection {
            seed: t.seed,
            adam_iters: t.adam_iters,
            lbfgs_iters: t.lbfgs_iters,
            lr: t.lr,
            n_residual: t.n_residual,
            n_initial: t.n_initial,
            n_boundary: t.n_boundary,
            w_res: t.weights.w_res,
            w_ic: t.weights.w_ic,
            w_bd: t.weights.w_bd,
            gate: t.gate.enabled,
            gate_variant: "tanh".into(),
            alpha: t.gate.alpha,
            gamma0: t.gate.gamma0,
            eta: t.gate.eta,
            eps_tol: t.gate.eps_tol,
            delta_max: t.gate.delta_max,
            gated_residual: t.gated_residual,
            probes: t.probes,
            probe_dt_fraction: t.probe_dt_fraction,
            resample_every: t.resample.every,
            swap_fraction: t.resample.swap_fraction,
            window_floor: t.resample.window_floor,
            fallback_span: t.resample.fallback_span,
            lbfgs_history: t.lbfgs.history,
            lbfgs_c1: t.lbfgs.c1,
            lbfgs_shrink: t.lbfgs.shrink,
            lbfgs_max_probes: t.lbfgs.max_probes,
            hard_ic: t.hard_ic,
            ic_grid: t.ic_grid,
            chunk: t.chunk,
            stage1_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSection {
    pub grid: usize,
    /// NKGE step as a multiple of `eps²`.
    pub nkge_dt_fraction: f64,
    pub max_dt_fraction: f64,
    pub slow_dt: f64,
    pub snapshot_dt: f64,
    /// `false` replaces the direct NKGE run with the cheap NLSW reconstruction.
    pub direct: bool,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        let s = ReferenceSteps::default();
        ReferenceSection { grid: 256, nkge_dt_fraction: s.nkge_fraction, max_dt_fraction: s.max_fraction, slow_dt: s.slow_dt, snapshot_dt: 0.1, direct: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub rmae_sqrt: bool,
    pub use_remainder: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2: Option<String>,
    /// NKGE reference field file; recomputed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection { rmae_sqrt: true, use_remainder: true, stage1: None, stage2: None, reference: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSection {
    pub eps: Vec<f64>,
    pub times: Vec<f64>,
    pub grid: usize,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        ConvergenceSection { eps: vec![0.2, 0.1, 0.05], times: vec![1.0, 2.0, 3.0, 4.0], grid: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub depth: usize,
    pub width: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection { depth: 8, width: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub points: usize,
    pub dts: Vec<f64>,
    pub lambda_probe: f64,
    pub region: f64,
    pub k: usize,
    pub samples: usize,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        DiagnoseSection { checkpoint: None, points: 16, dts: vec![0.0, 0.01, 0.05, 0.1], lambda_probe: 1e-6, region: 0.05, k: 5, samples: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "out".into() }
    }
}

fn cfg_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let c: RunConfig = toml::from_str(text).map_err(cfg_err)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.problem_spec()?;
        self.train_config(self.problem.t_final)?.validate().map_err(cfg_err)?;
        self.network_config()?;
        let r = &self.reference;
        if r.grid < 8 || !r.grid.is_power_of_two() {
            return Err(cfg_err("reference.grid must be a power of two and at least 8"));
        }
        if !(r.nkge_dt_fraction > 0.0 && r.slow_dt > 0.0 && r.snapshot_dt > 0.0 && r.max_dt_fraction > 0.0) {
            return Err(cfg_err("reference step sizes must be positive"));
        }
        if self.training.ic_grid < 8 || !self.training.ic_grid.is_power_of_two() {
            return Err(cfg_err("training.ic_grid must be a power of two and at least 8"));
        }
        if self.baseline.depth == 0 || self.baseline.width == 0 {
            return Err(cfg_err("baseline depth and width must be positive"));
        }
        if self.convergence.eps.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(cfg_err("convergence.eps values must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec, CliError> {
        let p = &self.problem;
        let init = InitialData::parse(&p.init).ok_or_else(|| cfg_err(format!("unknown initial data '{}'", p.init)))?;
        let needed = match init {
            InitialData::Benchmark1d | InitialData::Benchmark1dAlt => Some(1),
            InitialData::Benchmark2d => Some(2),
            InitialData::Benchmark3d => Some(3),
            _ => None,
        };
        if p.dim == 0 || needed.is_some_and(|d| d != p.dim) {
            return Err(cfg_err(format!("initial data '{}' does not fit dimension {}", p.init, p.dim)));
        }
        ProblemSpec::new(p.eps, p.lambda, vec![(p.domain[0], p.domain[1]); p.dim], p.t_final, init).map_err(cfg_err)
    }

    pub fn network_config(&self) -> Result<NetworkConfig, CliError> {
        let n = &self.network;
        let radii = match (&n.radii, n.preset.as_str()) {
            (Some(r), _) => r.clone(),
            (None, "model") => PerturbConfig::model_preset(1.0).scales.iter().map(|s| s.radius).collect(),
            (None, "benchmark") => PerturbConfig::benchmark_preset(1.0).scales.iter().map(|s| s.radius).collect(),
            (None, other) => return Err(cfg_err(format!("unknown radii preset '{other}'"))),
        };
        if radii.len() != n.counts.len() {
            return Err(cfg_err("network.counts needs one entry per radius"));
        }
        Ok(NetworkConfig {
            d_model: n.d_model,
            modes: n.modes,
            radii,
            counts: n.counts.clone(),
            encoder_hidden: n.encoder_hidden.clone(),
            mixer_hidden: n.mixer_hidden,
            head_hidden: n.head_hidden.clone(),
        })
    }

    pub fn train_config(&self, _t_final: f64) -> Result<TrainConfig, CliError> {
        let t = &self.training;
        let variant = match t.gate_variant.as_str() {
            "tanh" => GateVariant::Tanh,
            "relu-tanh" => GateVariant::ReluTanh,
            other => return Err(cfg_err(format!("unknown gate variant '{other}'"))),
        };
        Ok(TrainConfig {
            adam_iters: t.adam_iters,
            lbfgs_iters: t.lbfgs_iters,
            lr: t.lr,
            n_residual: t.n_residual,
            n_initial: t.n_initial,
            n_boundary: t.n_boundary,
            weights: LossWeights { w_res: t.w_res, w_ic: t.w_ic, w_bd: t.w_bd },
            gate: GateConfig { enabled: t.gate, alpha: t.alpha, gamma0: t.gamma0, eta: t.eta, eps_tol: t.eps_tol, delta_max: t.delta_max, variant },
            gated_residual: t.gated_residual,
            probes: t.probes,
            probe_dt_fraction: t.probe_dt_fraction,
            resample: ResampleConfig { every: t.resample_every, swap_fraction: t.swap_fraction, window_floor: t.window_floor, fallback_span: t.fallback_span },
            lbfgs: LbfgsConfig { history: t.lbfgs_history, c1: t.lbfgs_c1, shrink: t.lbfgs_shrink, max_probes: t.lbfgs_max_probes },
            hard_ic: t.hard_ic,
            ic_grid: t.ic_grid,
            chunk: t.chunk,
            seed: t.seed,
        })
    }

    pub fn reference_steps(&self) -> ReferenceSteps {
        ReferenceSteps { nkge_fraction: self.reference.nkge_dt_fraction, max_fraction: self.reference.max_dt_fraction, slow_dt: self.reference.slow_dt }
    }

    /// `0, Δ, 2Δ, …, T` with the last entry exactly `T`.
    pub fn snapshot_times(&self) -> Vec<f64> {
        let t = self.problem.t_final;
        let n = (t / self.reference.snapshot_dt).round().max(1.0) as usize;
        (0..=n).map(|i| if i == n { t } else { i as f64 * t / n as f64 }).collect()
    }
}
