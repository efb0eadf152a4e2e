//! Experiment configuration: a TOML document with unknown keys rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use crhlab_core::crhkit::DEFAULT_TAU;
use crhlab_core::netcore::{Activation, Loss, Optimizer, TrainConfig};
use crhlab_core::probes::MomentMode;
use serde::{Deserialize, Serialize};

use crate::error::{RunnerError, RunnerResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default, skip_serializing_if = "SweepConfig::is_empty")]
    pub sweep: SweepConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Sin teacher on isotropic Gaussian inputs, trained online.
    Teacher {
        input_dim: usize,
        units: usize,
        output_dim: usize,
        /// Fixed teacher across seeds when set; otherwise derived from the run seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        teacher_seed: Option<u64>,
    },
    /// Sin teacher on inputs `x = M x'` with a zero-one mixing pattern.
    MixedTeacher {
        input_dim: usize,
        units: usize,
        output_dim: usize,
        phi: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        teacher_seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mix_seed: Option<u64>,
    },
    /// Gaussian blobs with a fixed training set of `n_per_class` per class.
    ClassBlob {
        classes: usize,
        input_dim: usize,
        sigma: f64,
        separation: f64,
        n_per_class: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spec_seed: Option<u64>,
    },
}

impl TaskConfig {
    pub fn input_dim(&self) -> usize {
        match self {
            Self::Teacher { input_dim, .. } | Self::MixedTeacher { input_dim, .. } | Self::ClassBlob { input_dim, .. } => {
                *input_dim
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Self::Teacher { output_dim, .. } | Self::MixedTeacher { output_dim, .. } => *output_dim,
            Self::ClassBlob { classes, .. } => *classes,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Self::ClassBlob { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationName {
    Relu,
    Tanh,
    Sin,
    Identity,
}

impl From<ActivationName> for Activation {
    fn from(a: ActivationName) -> Self {
        match a {
            ActivationName::Relu => Activation::Relu,
            ActivationName::Tanh => Activation::Tanh,
            ActivationName::Sin => Activation::Sin,
            ActivationName::Identity => Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    /// Number of linear layers; `depth − 1` hidden layers of `width` units.
    pub depth: usize,
    pub activation: ActivationName,
    #[serde(default = "yes")]
    pub bias: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn dims(&self, input_dim: usize, output_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(self.width, self.depth.saturating_sub(1)));
        dims.push(output_dim);
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    Momentum {
        beta: f64,
    },
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn adam_eps() -> f64 {
    1e-8
}

impl From<OptimizerConfig> for Optimizer<f64> {
    fn from(o: OptimizerConfig) -> Self {
        match o {
            OptimizerConfig::Sgd => Optimizer::Sgd,
            OptimizerConfig::Momentum { beta } => Optimizer::SgdMomentum { beta },
            OptimizerConfig::Adam { beta1, beta2, eps } => Optimizer::Adam { beta1, beta2, eps },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossName {
    Mse,
    CrossEntropy,
}

impl From<LossName> for Loss {
    fn from(l: LossName) -> Self {
        match l {
            LossName::Mse => Loss::Mse,
            LossName::CrossEntropy => Loss::CrossEntropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    #[serde(default = "sgd")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "mse")]
    pub loss: LossName,
}

fn sgd() -> OptimizerConfig {
    OptimizerConfig::Sgd
}

fn mse() -> LossName {
    LossName::Mse
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Raw,
    CenteredNormalized,
}

impl From<ModeName> for MomentMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Raw => MomentMode::Raw,
            ModeName::CenteredNormalized => MomentMode::CenteredNormalized,
        }
    }
}

/// Step size used in the noise term of the balance equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdtEta {
    /// `η / B`, the weight a single sample receives in a minibatch step.
    PerSample,
    /// The raw learning rate.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Probe every this many steps; 0 probes only at the start and end.
    #[serde(default = "snapshot_every")]
    pub snapshot_every: u64,
    #[serde(default = "eval_samples")]
    pub eval_samples: usize,
    /// Moment mode for alignments, phases and ranks; balance checks always use raw.
    #[serde(default = "centered")]
    pub moment_mode: ModeName,
    /// Probe on fresh samples rather than the training data.
    #[serde(default = "yes")]
    pub holdout: bool,
    #[serde(default = "per_sample")]
    pub fdt_eta: FdtEta,
    #[serde(default = "rank_tol")]
    pub rank_tol: f64,
    /// Eigenvalues per spectral fit.
    #[serde(default = "pah_k")]
    pub pah_k: usize,
    /// Moment mode for the spectral fits.
    #[serde(default = "raw")]
    pub pah_mode: ModeName,
}

fn snapshot_every() -> u64 {
    1000
}

fn eval_samples() -> usize {
    3000
}

fn centered() -> ModeName {
    ModeName::CenteredNormalized
}

fn raw() -> ModeName {
    ModeName::Raw
}

fn per_sample() -> FdtEta {
    FdtEta::PerSample
}

fn rank_tol() -> f64 {
    1e-3
}

fn pah_k() -> usize {
    10
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            snapshot_every: snapshot_every(),
            eval_samples: eval_samples(),
            moment_mode: centered(),
            holdout: true,
            fdt_eta: per_sample(),
            rank_tol: rank_tol(),
            pah_k: pah_k(),
            pah_mode: raw(),
        }
    }
}

/// Named sweep axes; each present axis must be a non-empty list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<Vec<u64>>,
}

impl SweepConfig {
    pub fn is_empty(&self) -> bool {
        self == &Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Relative eigenvalue cutoff for pseudo-inverses and projectors.
    #[serde(default = "rel_tol")]
    pub rel_tol: f64,
}

fn rel_tol() -> f64 {
    crhlab_core::linalg::DEFAULT_REL_TOL
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rel_tol: rel_tol(),
        }
    }
}

/// One coordinate of a sweep grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxisValue {
    WeightDecay(f64),
    BatchSize(usize),
    Width(usize),
    Depth(usize),
    Phi(f64),
    Seed(u64),
}

impl AxisValue {
    pub fn key(&self) -> &'static str {
        match self {
            Self::WeightDecay(_) => "wd",
            Self::BatchSize(_) => "bs",
            Self::Width(_) => "width",
            Self::Depth(_) => "depth",
            Self::Phi(_) => "phi",
            Self::Seed(_) => "seed",
        }
    }
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::WeightDecay(v) | Self::Phi(v) => write!(f, "{}={:e}", self.key(), v),
            Self::BatchSize(v) | Self::Width(v) | Self::Depth(v) => write!(f, "{}={v}", self.key()),
            Self::Seed(v) => write!(f, "{}={v}", self.key()),
        }
    }
}

/// A fully resolved single run.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub axes: Vec<AxisValue>,
    pub config: ExperimentConfig,
}

impl ExperimentConfig {
    pub fn train_config(&self) -> TrainConfig<f64> {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            steps: self.train.steps,
            optimizer: self.train.optimizer.into(),
            seed: self.seed,
            loss: self.train.loss.into(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.model.dims(self.task.input_dim(), self.task.output_dim())
    }

    pub fn validate(&self) -> RunnerResult<()> {
        let bad = |key: &str, msg: String| Err(RunnerError::Invalid { key: key.to_string(), message: msg });
        let t = &self.train;
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return bad("train.learning_rate", format!("must be > 0, got {}", t.learning_rate));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return bad("train.weight_decay", format!("must be >= 0, got {}", t.weight_decay));
        }
        if t.batch_size == 0 {
            return bad("train.batch_size", "must be positive".into());
        }
        if let Err(e) = self.train_config().validate() {
            return bad("train", e.to_string());
        }
        if self.model.width == 0 || self.model.depth == 0 {
            return bad("model", "width and depth must be positive".into());
        }
        let p = &self.probe;
        if p.snapshot_every > 0 && !t.steps.is_multiple_of(p.snapshot_every) {
            return bad(
                "probe.snapshot_every",
                format!("{} does not divide train.steps = {}", p.snapshot_every, t.steps),
            );
        }
        if p.eval_samples < 2 {
            return bad("probe.eval_samples", "need at least 2 samples".into());
        }
        if !(p.rank_tol > 0.0 && p.rank_tol < 1.0) {
            return bad("probe.rank_tol", format!("must lie in (0, 1), got {}", p.rank_tol));
        }
        if p.pah_k < 3 {
            return bad("probe.pah_k", "need at least 3 eigenvalues".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau", format!("must lie in (0, 1), got {}", self.tau));
        }
        match &self.task {
            TaskConfig::Teacher { input_dim, units, output_dim, .. }
            | TaskConfig::MixedTeacher { input_dim, units, output_dim, .. } => {
                if *input_dim == 0 || *units == 0 || *output_dim == 0 {
                    return bad("task", "dims must be positive".into());
                }
                if let TaskConfig::MixedTeacher { phi, .. } = &self.task {
                    if !(0.0..=1.0).contains(phi) {
                        return bad("task.phi", format!("must lie in [0, 1], got {phi}"));
                    }
                }
                if t.loss == LossName::CrossEntropy {
                    return bad("train.loss", "regression tasks need mse".into());
                }
            }
            TaskConfig::ClassBlob { classes, input_dim, sigma, separation, n_per_class, .. } => {
                if *classes < 2 || classes > input_dim {
                    return bad("task.classes", format!("need 2 <= classes <= input_dim, got {classes}"));
                }
                if *n_per_class < 2 {
                    return bad("task.n_per_class", "need at least 2".into());
                }
                if !(*sigma >= 0.0 && *separation >= 4.0 * sigma && *separation > 0.0) {
                    return bad("task.separation", "must be positive and at least 4 sigma".into());
                }
            }
        }
        let s = &self.sweep;
        let axes: [(&str, bool); 6] = [
            ("sweep.weight_decay", s.weight_decay.as_ref().is_some_and(Vec::is_empty)),
            ("sweep.batch_size", s.batch_size.as_ref().is_some_and(Vec::is_empty)),
            ("sweep.width", s.width.as_ref().is_some_and(Vec::is_empty)),
            ("sweep.depth", s.depth.as_ref().is_some_and(Vec::is_empty)),
            ("sweep.phi", s.phi.as_ref().is_some_and(Vec::is_empty)),
            ("sweep.seed", s.seed.as_ref().is_some_and(Vec::is_empty)),
        ];
        if let Some((key, _)) = axes.iter().find(|(_, empty)| *empty) {
            return bad(key, "sweep axes must be non-empty lists".into());
        }
        if s.phi.is_some() && !matches!(self.task, TaskConfig::MixedTeacher { .. }) {
            return bad("sweep.phi", "only mixed-teacher tasks have phi".into());
        }
        Ok(())
    }

    /// Cartesian product of the sweep axes in declaration order, each point a
    /// validated single-run config.
    pub fn grid(&self) -> RunnerResult<Vec<GridPoint>> {
        self.validate()?;
        let s = &self.sweep;
        let mut axes: Vec<Vec<AxisValue>> = Vec::new();
        if let Some(v) = &s.weight_decay {
            axes.push(v.iter().map(|x| AxisValue::WeightDecay(*x)).collect());
        }
        if let Some(v) = &s.batch_size {
            axes.push(v.iter().map(|x| AxisValue::BatchSize(*x)).collect());
        }
        if let Some(v) = &s.width {
            axes.push(v.iter().map(|x| AxisValue::Width(*x)).collect());
        }
        if let Some(v) = &s.depth {
            axes.push(v.iter().map(|x| AxisValue::Depth(*x)).collect());
        }
        if let Some(v) = &s.phi {
            axes.push(v.iter().map(|x| AxisValue::Phi(*x)).collect());
        }
        if let Some(v) = &s.seed {
            axes.push(v.iter().map(|x| AxisValue::Seed(*x)).collect());
        }
        let mut points: Vec<Vec<AxisValue>> = vec![Vec::new()];
        for axis in &axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(*v);
                        q
                    })
                })
                .collect();
        }
        points
            .into_iter()
            .map(|values| {
                let mut c = self.clone();
                c.sweep = SweepConfig::default();
                for v in &values {
                    match *v {
                        AxisValue::WeightDecay(x) => c.train.weight_decay = x,
                        AxisValue::BatchSize(x) => c.train.batch_size = x,
                        AxisValue::Width(x) => c.model.width = x,
                        AxisValue::Depth(x) => c.model.depth = x,
                        AxisValue::Phi(x) => {
                            if let TaskConfig::MixedTeacher { phi, .. } = &mut c.task {
                                *phi = x;
                            }
                        }
                        AxisValue::Seed(x) => c.seed = x,
                    }
                }
                c.validate()?;
                let label = if values.is_empty() {
                    "base".to_string()
                } else {
                    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
                };
                Ok(GridPoint { label, axes: values, config: c })
            })
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses a TOML document; schema errors carry the offending key path.
pub fn parse_config(text: &str) -> RunnerResult<ExperimentConfig> {
    let de = toml::Deserializer::new(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        RunnerError::Schema {
            path: if path == "." { String::new() } else { path },
            message: inner.message().to_string(),
        }
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> RunnerResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))?;
    parse_config(&text)
}

/// Built-in configurations, also shipped as files under `configs/`.
pub const PRESETS: [(&str, &str); 5] = [
    ("fc1", include_str!("../../../configs/fc1.toml")),
    ("fc1-desk", include_str!("../../../configs/fc1-desk.toml")),
    ("fc2-desk", include_str!("../../../configs/fc2-desk.toml")),
    ("tanh-desk", include_str!("../../../configs/tanh-desk.toml")),
    ("blobs", include_str!("../../../configs/blobs.toml")),
];

pub fn preset(name: &str) -> RunnerResult<ExperimentConfig> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| RunnerError::Invalid {
            key: "preset".into(),
            message: format!("unknown preset {name:?}"),
        })?;
    parse_config(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
[task]
kind = "teacher"
input_dim = 4
units = 3
output_dim = 1
[model]
width = 5
depth = 3
activation = "relu"
[train]
learning_rate = 0.1
weight_decay = 1e-4
batch_size = 8
steps = 20
[probe]
snapshot_every = 10
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.probe.eval_samples, 3000);
        assert_eq!(c.probe.moment_mode, ModeName::CenteredNormalized);
        assert_eq!(c.train.optimizer, OptimizerConfig::Sgd);
        assert_eq!(c.dims(), vec![4, 5, 5, 1]);
        assert!(c.model.bias);
    }

    #[test]
    fn round_trip_is_identity() {
        for (name, _) in PRESETS {
            let c = preset(name).unwrap();
            assert_eq!(parse_config(&c.to_toml()).unwrap(), c, "{name}");
        }
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(parse_config(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn missing_key_is_named() {
        let text = MINIMAL.replace("learning_rate = 0.1\n", "");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("learning_rate") && err.contains("train"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected_with_path() {
        let text = MINIMAL.replace("[probe]", "[probe]\nsnapshot_evry = 5");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("snapshot_evry") && err.contains("probe"), "{err}");
        let text = MINIMAL.replace("name = \"t\"", "name = \"t\"\ncolour = 1");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn schedule_must_divide_steps() {
        let text = MINIMAL.replace("snapshot_every = 10", "snapshot_every = 7");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("probe.snapshot_every"), "{err}");
    }

    #[test]
    fn empty_sweep_axis_is_rejected() {
        let text = format!("{MINIMAL}[sweep]\nweight_decay = []\n");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("sweep.weight_decay"), "{err}");
    }

    #[test]
    fn fc1_preset_has_reference_defaults() {
        let c = preset("fc1").unwrap();
        assert_eq!(c.model.depth, 4);
        assert_eq!(c.model.width, 100);
        assert_eq!(c.train.weight_decay, 2e-5);
        assert_eq!(c.train.batch_size, 100);
        assert_eq!(c.task.input_dim(), 100);
        assert_eq!(c.probe.eval_samples, 3000);
        assert!(matches!(c.task, TaskConfig::Teacher { units: 100, output_dim: 1, .. }));
    }

    #[test]
    fn grid_expands_in_axis_order() {
        let text = format!("{MINIMAL}[sweep]\nweight_decay = [1e-5, 1e-3]\nseed = [0, 1, 2]\n");
        let c = parse_config(&text).unwrap();
        let g = c.grid().unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g[0].label, "wd=1e-5,seed=0");
        assert_eq!(g[5].config.train.weight_decay, 1e-3);
        assert_eq!(g[5].config.seed, 2);
        assert!(g.iter().all(|p| p.config.sweep.is_empty()));
        assert_eq!(parse_config(MINIMAL).unwrap().grid().unwrap()[0].label, "base");
    }
}
