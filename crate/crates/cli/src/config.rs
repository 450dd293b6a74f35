//! TOML run configuration. Unknown keys are rejected so typos fail loudly.

use serde::{Deserialize, Serialize};

use fbsde_core::loss::{LossOptions, LossVariant};
use fbsde_core::mlmc::{Marker, NodeMatching};
use fbsde_core::problems::{AffineManufactured, BlackScholesBarenblatt, TerminalPayoff};
use fbsde_core::rng::derive_seed_str;
use fbsde_core::surrogate::{AdamConfig, InputScaling};
use fbsde_core::train::TrainConfig;
use fbsde_core::{Activation, GridKind, Mlp};

use crate::error::CliError;
use crate::problem::AnyProblem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; `--seed` overrides it.
    #[serde(default)]
    pub seed: Option<u64>,
    pub problem: ProblemSection,
    pub grid: GridSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemName {
    Bsb,
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffChoice {
    SquaredNorm,
    Constant,
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub name: ProblemName,
    #[serde(default = "one_usize")]
    pub dim: usize,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "one_f64")]
    pub x0: f64,
    #[serde(default = "one_f64")]
    pub horizon: f64,
    #[serde(default = "default_payoff")]
    pub payoff: PayoffChoice,
    /// Constant term of constant/affine payoffs and of the affine solution.
    #[serde(default)]
    pub payoff_c: f64,
    /// Slope of affine payoffs and of the affine solution, per component.
    #[serde(default = "one_f64")]
    pub payoff_k: f64,
    /// Affine solution: forward drift.
    #[serde(default)]
    pub drift: f64,
    /// Affine solution: time slope of `u`.
    #[serde(default)]
    pub time_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "default_grid_kind")]
    pub kind: GridChoice,
    /// `N = 2^level` steps (the finest level for level-by-level training).
    pub level: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridChoice {
    Uniform,
    Chebyshev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Spatial inputs enter as `(x − X₀)·input_scale`.
    #[serde(default = "one_f64")]
    pub input_scale: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            hidden: default_hidden(),
            activation: default_activation(),
            seed: None,
            input_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Single,
    Multilevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_epsilon: f64,
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "one_f64")]
    pub terminal_gradient_weight: f64,
    #[serde(default)]
    pub weighted: bool,
    /// Defaults to resampling for single-level and fixed paths for
    /// level-by-level training.
    #[serde(default)]
    pub resample_paths: Option<bool>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_eps_points")]
    pub epsilon_points: usize,
    #[serde(default = "default_halfwidth")]
    pub epsilon_halfwidth: f64,
    /// Extra checkpoints after these iteration counts.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_levels")]
    pub levels: Vec<u32>,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<String>,
    #[serde(default = "default_matching")]
    pub matching: String,
    /// `both`, `exact` or `surrogate`.
    #[serde(default = "default_tracks")]
    pub tracks: String,
    #[serde(default)]
    pub max_rel_se: Option<f64>,
    #[serde(default = "default_diag_paths")]
    pub diagnostic_paths: usize,
    #[serde(default)]
    pub out: Option<String>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn one_usize() -> usize {
    1
}
fn one_f64() -> f64 {
    1.0
}
fn default_rate() -> f64 {
    0.05
}
fn default_sigma() -> f64 {
    0.4
}
fn default_payoff() -> PayoffChoice {
    PayoffChoice::SquaredNorm
}
fn default_grid_kind() -> GridChoice {
    GridChoice::Uniform
}
fn default_hidden() -> Vec<usize> {
    vec![32; 4]
}
fn default_activation() -> String {
    "tanh".into()
}
fn default_mode() -> TrainMode {
    TrainMode::Single
}
fn default_batch() -> usize {
    256
}
fn default_iterations() -> usize {
    2000
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_variant() -> String {
    "pathwise".into()
}
fn default_eps_points() -> usize {
    10_000
}
fn default_halfwidth() -> f64 {
    0.5
}
fn default_levels() -> Vec<u32> {
    (2..=8).collect()
}
fn default_paths() -> usize {
    4096
}
fn default_kinds() -> Vec<String> {
    Marker::ALL.iter().map(|m| m.name().to_string()).collect()
}
fn default_matching() -> String {
    "coarse_nodes".into()
}
fn default_tracks() -> String {
    "both".into()
}
fn default_diag_paths() -> usize {
    4
}

/// Seeds resolved from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub master: u64,
    pub network: u64,
    pub train: u64,
    pub experiment: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.problem.dim == 0 {
            return bad("problem.dim must be positive".into());
        }
        if self.grid.level > 20 {
            return bad("grid.level must be at most 20".into());
        }
        if self.train.batch == 0 || self.experiment.paths == 0 {
            return bad("train.batch and experiment.paths must be positive".into());
        }
        if self.experiment.levels.is_empty() {
            return bad("experiment.levels must not be empty".into());
        }
        if self.network.hidden.contains(&0) {
            return bad("network.hidden widths must be positive".into());
        }
        self.activation()?;
        self.variant()?;
        self.markers()?;
        self.matching()?;
        self.tracks()?;
        Ok(())
    }

    pub fn seeds(&self, override_master: Option<u64>) -> Seeds {
        let master = override_master.or(self.seed).unwrap_or(0);
        Seeds {
            master,
            network: self.network.seed.unwrap_or_else(|| derive_seed_str(master, "network")),
            train: self.train.seed.unwrap_or_else(|| derive_seed_str(master, "train")),
            experiment: self.experiment.seed.unwrap_or_else(|| derive_seed_str(master, "experiment")),
        }
    }

    pub fn activation(&self) -> Result<Activation, CliError> {
        self.network
            .activation
            .parse()
            .map_err(|e: fbsde_core::Error| CliError::Config(format!("network.activation: {e}")))
    }

    pub fn variant(&self) -> Result<LossVariant, CliError> {
        self.train
            .variant
            .parse()
            .map_err(|e: fbsde_core::Error| CliError::Config(format!("train.variant: {e}")))
    }

    pub fn markers(&self) -> Result<Vec<Marker>, CliError> {
        self.experiment
            .kinds
            .iter()
            .map(|k| k.parse().map_err(|e: fbsde_core::Error| CliError::Config(format!("experiment.kinds: {e}"))))
            .collect()
    }

    pub fn matching(&self) -> Result<NodeMatching, CliError> {
        match self.experiment.matching.as_str() {
            "coarse_nodes" => Ok(NodeMatching::CoarseNodes),
            "piecewise_constant" => Ok(NodeMatching::PiecewiseConstant),
            other => Err(CliError::Config(format!("experiment.matching: unknown value '{other}'"))),
        }
    }

    /// `(exact, surrogate)` track flags.
    pub fn tracks(&self) -> Result<(bool, bool), CliError> {
        match self.experiment.tracks.as_str() {
            "both" => Ok((true, true)),
            "exact" => Ok((true, false)),
            "surrogate" => Ok((false, true)),
            other => Err(CliError::Config(format!("experiment.tracks: unknown value '{other}'"))),
        }
    }

    pub fn grid_kind(&self) -> GridKind {
        match self.grid.kind {
            GridChoice::Uniform => GridKind::Uniform,
            GridChoice::Chebyshev => GridKind::Chebyshev,
        }
    }

    pub fn build_problem(&self) -> Result<AnyProblem, CliError> {
        let p = &self.problem;
        let d = p.dim;
        match p.name {
            ProblemName::Bsb => {
                let payoff = match p.payoff {
                    PayoffChoice::SquaredNorm => TerminalPayoff::SquaredNorm,
                    PayoffChoice::Constant => TerminalPayoff::Constant(p.payoff_c),
                    PayoffChoice::Affine => TerminalPayoff::Affine {
                        c: p.payoff_c,
                        k: vec![p.payoff_k; d],
                    },
                };
                let bsb = BlackScholesBarenblatt::new(d, p.rate, p.sigma, p.horizon, vec![p.x0; d], payoff)
                    .map_err(|e| CliError::Config(format!("problem: {e}")))?;
                Ok(AnyProblem::Bsb(bsb))
            }
            ProblemName::Affine => {
                if !(p.horizon > 0.0) {
                    return Err(CliError::Config("problem.horizon must be positive".into()));
                }
                Ok(AnyProblem::Affine(AffineManufactured {
                    dim: d,
                    horizon: p.horizon,
                    drift: p.drift,
                    beta: p.sigma,
                    c0: p.payoff_c,
                    ct: p.time_slope,
                    k: vec![p.payoff_k; d],
                    x0: vec![p.x0; d],
                }))
            }
        }
    }

    pub fn build_network(&self, seed: u64) -> Result<Mlp, CliError> {
        let p = &self.problem;
        let net = Mlp::with_hidden(p.dim, &self.network.hidden, self.activation()?, seed)?;
        Ok(net.with_scaling(InputScaling::for_problem(p.dim, p.horizon, p.x0, self.network.input_scale))?)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        Ok(TrainConfig {
            batch: t.batch,
            max_level: self.grid.level,
            iterations: t.iterations,
            adam: AdamConfig {
                learning_rate: t.learning_rate,
                beta1: t.beta1,
                beta2: t.beta2,
                epsilon: t.adam_epsilon,
            },
            variant: self.variant()?,
            loss: LossOptions {
                terminal_gradient_weight: t.terminal_gradient_weight,
                weighted: t.weighted,
            },
            resample_paths: t.resample_paths.unwrap_or(t.mode == TrainMode::Single),
            seed,
            grid_kind: self.grid_kind(),
            epsilon_points: t.epsilon_points,
            epsilon_halfwidth: t.epsilon_halfwidth,
        })
    }
}
