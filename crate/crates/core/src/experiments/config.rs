//! JSON experiment configuration and its validation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dkf::{ConsensusMode, DkfConfig, FusionOptions, FusionWeights, MeanNormalization, MonteCarloSpec};
use crate::error::Error;
use crate::lowner_john::ThetaMode;
use crate::network::{random_connected_graph, Graph, InputTrajectory};
use crate::objective::ObjectiveKind;
use crate::psd::{inverse_spd, SymMat};
use crate::simplex::SolverConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config at `{path}`: {message}")]
    Validation { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Static,
    Dynamic,
    Dkf,
    OracleCheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Static => "static",
            ExperimentKind::Dynamic => "dynamic",
            ExperimentKind::Dkf => "dkf",
            ExperimentKind::OracleCheck => "oracle-check",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveSpec {
    pub kappa: f64,
}

/// `θ̄` as a number or `{"adaptive": {"kappa": κ}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThetaSpec {
    Fixed(f64),
    Adaptive { adaptive: AdaptiveSpec },
}

impl ThetaSpec {
    pub fn to_mode(self) -> ThetaMode {
        match self {
            ThetaSpec::Fixed(t) => ThetaMode::Fixed(t),
            ThetaSpec::Adaptive { adaptive } => ThetaMode::Adaptive { kappa: adaptive.kappa },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSpec {
    /// One-based edge list.
    Explicit { n_nodes: usize, edges: Vec<[usize; 2]> },
    Random { n: usize, edge_prob: f64 },
}

/// A matrix given either as the shape matrix `P` or as its inverse.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatrixSpec {
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Vec<f64>>>,
    #[serde(rename = "P_inv", default, skip_serializing_if = "Option::is_none")]
    pub p_inv: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpec {
    Static {
        #[serde(flatten)]
        matrix: MatrixSpec,
    },
    Oscillatory {
        #[serde(flatten)]
        matrix: MatrixSpec,
        #[serde(rename = "A")]
        a: f64,
        #[serde(rename = "B")]
        b: f64,
        /// Drawn from `omega_range` with the run seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        omega: Option<f64>,
        #[serde(default = "default_omega_range")]
        omega_range: [f64; 2],
        #[serde(default = "default_plane")]
        plane: [usize; 2],
    },
    Sequence {
        matrices: Vec<MatrixSpec>,
    },
}

fn default_omega_range() -> [f64; 2] {
    [1.0, 2.0]
}

fn default_plane() -> [usize; 2] {
    [0, 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusSpec {
    Dynamic { inner_rounds: usize },
    ExactAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionWeightsSpec {
    Propagated,
    LiteralRatio { epsilon_clamp: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationSpec {
    Estimate,
    Tracked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DkfSpec {
    pub n_nodes: usize,
    pub edge_prob: f64,
    pub runs: usize,
    pub horizon: usize,
    pub dt: f64,
    pub w_scale: f64,
    pub mu_range: [f64; 2],
    pub x0: Vec<f64>,
    pub init_std: f64,
    pub init_eig: [f64; 2],
    pub consensus: ConsensusSpec,
    pub fusion_weights: FusionWeightsSpec,
    pub normalization: NormalizationSpec,
    pub local_steps: usize,
    pub cdkf_gain: f64,
    /// Trailing window for the reported MSE ordering.
    pub tail: usize,
}

impl Default for DkfSpec {
    fn default() -> Self {
        let mc = MonteCarloSpec::default();
        Self {
            n_nodes: mc.n_nodes,
            edge_prob: mc.edge_prob,
            runs: mc.runs,
            horizon: mc.horizon,
            dt: mc.dt,
            w_scale: mc.w_scale,
            mu_range: [mc.mu_range.0, mc.mu_range.1],
            x0: mc.x0,
            init_std: mc.init_std,
            init_eig: [mc.init_eig.0, mc.init_eig.1],
            consensus: ConsensusSpec::Dynamic { inner_rounds: 10 },
            fusion_weights: FusionWeightsSpec::Propagated,
            normalization: NormalizationSpec::Tracked,
            local_steps: 1,
            cdkf_gain: 0.1,
            tail: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleCheckSpec {
    pub instances: usize,
    pub node_counts: Vec<usize>,
    pub dims: Vec<usize>,
    /// Grid step for up to three atoms.
    pub grid_step: f64,
    /// Grid step for four or more atoms.
    pub grid_step_large: f64,
    pub eig_range: [f64; 2],
    pub tolerance: f64,
}

impl Default for OracleCheckSpec {
    fn default() -> Self {
        Self {
            instances: 50,
            node_counts: vec![2, 3, 4],
            dims: vec![2, 3],
            grid_step: 0.01,
            grid_step_large: 0.02,
            eig_range: [0.2, 5.0],
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_objective")]
    pub objective: ObjectiveKind,
    /// Fixed `1` for consensus runs and adaptive with `κ = 1` for the
    /// filter when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_bar: Option<ThetaSpec>,
    #[serde(default)]
    pub rounds: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<InputSpec>,
    #[serde(default = "default_oracle_every")]
    pub oracle_every: usize,
    /// Error level that defines the measured `K` of static runs.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dkf: Option<DkfSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_check: Option<OracleCheckSpec>,
    #[serde(default = "default_output")]
    pub output: String,
}

fn default_objective() -> ObjectiveKind {
    ObjectiveKind::NegLogDet
}

fn default_oracle_every() -> usize {
    1
}

fn default_tolerance() -> f64 {
    1e-5
}

fn default_output() -> String {
    "out".into()
}

/// Parses and validates a JSON config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

/// Everything a consensus experiment needs, resolved from the config.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSetup {
    pub graph: Graph,
    pub trajectories: Vec<InputTrajectory>,
    pub theta: ThetaMode,
}

fn to_symmat(rows: &[Vec<f64>], path: &str) -> Result<SymMat, ConfigError> {
    SymMat::from_rows(rows).map_err(|e| invalid(path, e.to_string()))
}

impl MatrixSpec {
    /// The shape matrix `P`, checked to be symmetric positive definite.
    pub fn shape(&self, path: &str) -> Result<SymMat, ConfigError> {
        let pd = |m: &SymMat, p: &str| -> Result<SymMat, ConfigError> {
            inverse_spd(m).map_err(|e| invalid(p, format!("matrix must be positive definite: {e}")))
        };
        match (&self.p, &self.p_inv) {
            (Some(p), None) => {
                let path = format!("{path}.P");
                let m = to_symmat(p, &path)?;
                pd(&m, &path)?;
                Ok(m)
            }
            (None, Some(q)) => {
                let path = format!("{path}.P_inv");
                let m = to_symmat(q, &path)?;
                pd(&m, &path)
            }
            _ => Err(invalid(path, "exactly one of `P` and `P_inv` is required")),
        }
    }
}

impl ExperimentConfig {
    pub fn theta_mode(&self) -> ThetaMode {
        match (self.theta_bar, self.experiment) {
            (Some(t), _) => t.to_mode(),
            (None, ExperimentKind::Dkf) => ThetaMode::Adaptive { kappa: 1.0 },
            (None, _) => ThetaMode::Fixed(1.0),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.solver.validate().map_err(|e| invalid("solver", e.to_string()))?;
        match self.theta_mode() {
            ThetaMode::Fixed(t) if !(t >= 1.0 && t.is_finite()) => {
                return Err(invalid("theta_bar", format!("theta_bar must be >= 1, got {t}")));
            }
            ThetaMode::Adaptive { kappa } if !(kappa > 0.0 && kappa.is_finite()) => {
                return Err(invalid("theta_bar.adaptive.kappa", format!("kappa must be > 0, got {kappa}")));
            }
            _ => {}
        }
        if self.output.is_empty() {
            return Err(invalid("output", "output path must not be empty"));
        }
        match self.experiment {
            ExperimentKind::Static | ExperimentKind::Dynamic => {
                if self.rounds == 0 {
                    return Err(invalid("rounds", "rounds must be >= 1"));
                }
                if !(self.tolerance > 0.0) {
                    return Err(invalid("tolerance", "tolerance must be > 0"));
                }
                self.network_setup()?;
            }
            ExperimentKind::Dkf => {
                self.dkf_setup()?;
            }
            ExperimentKind::OracleCheck => {
                let oc = self.oracle_check.clone().unwrap_or_default();
                if oc.instances == 0 {
                    return Err(invalid("oracle_check.instances", "need at least one instance"));
                }
                if oc.node_counts.is_empty() || oc.node_counts.contains(&0) {
                    return Err(invalid("oracle_check.node_counts", "node counts must be >= 1"));
                }
                if oc.dims.is_empty() || oc.dims.contains(&0) {
                    return Err(invalid("oracle_check.dims", "dimensions must be >= 1"));
                }
                for (name, step) in [("grid_step", oc.grid_step), ("grid_step_large", oc.grid_step_large)] {
                    if !(step > 0.0 && step <= 1.0) {
                        return Err(invalid(format!("oracle_check.{name}"), "grid step must lie in (0, 1]"));
                    }
                }
                if !(oc.eig_range[0] > 0.0 && oc.eig_range[0] <= oc.eig_range[1]) {
                    return Err(invalid("oracle_check.eig_range", "need 0 < low <= high"));
                }
            }
        }
        Ok(())
    }

    /// Graph and per-node trajectories; missing frequencies are drawn from
    /// the seed in node order.
    pub fn network_setup(&self) -> Result<NetworkSetup, ConfigError> {
        let graph = match &self.graph {
            None => return Err(invalid("graph", "graph is required")),
            Some(GraphSpec::Explicit { n_nodes, edges }) => {
                let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e[0], e[1])).collect();
                Graph::from_one_based(*n_nodes, &pairs).map_err(|e| invalid("graph.explicit", e.to_string()))?
            }
            Some(GraphSpec::Random { n, edge_prob }) => {
                random_connected_graph(*n, *edge_prob, self.seed).map_err(|e| invalid("graph.random", e.to_string()))?
            }
        };
        if self.inputs.len() != graph.n_nodes() {
            return Err(invalid(
                "inputs",
                format!("expected {} inputs, got {}", graph.n_nodes(), self.inputs.len()),
            ));
        }
        let mut omega_rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut trajectories = Vec::with_capacity(self.inputs.len());
        for (i, spec) in self.inputs.iter().enumerate() {
            let path = format!("inputs[{i}]");
            let traj = match spec {
                InputSpec::Static { matrix } => InputTrajectory::Static {
                    p0: matrix.shape(&format!("{path}.static"))?,
                },
                InputSpec::Oscillatory {
                    matrix,
                    a,
                    b,
                    omega,
                    omega_range,
                    plane,
                } => {
                    let path = format!("{path}.oscillatory");
                    let [lo, hi] = *omega_range;
                    if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                        return Err(invalid(format!("{path}.omega_range"), "need a finite range with low <= high"));
                    }
                    let omega = match omega {
                        Some(w) => *w,
                        None => omega_rng.random_range(lo..=hi),
                    };
                    InputTrajectory::Oscillatory {
                        p0: matrix.shape(&path)?,
                        a: *a,
                        b: *b,
                        omega,
                        plane: (plane[0], plane[1]),
                    }
                }
                InputSpec::Sequence { matrices } => InputTrajectory::Sequence(
                    matrices
                        .iter()
                        .enumerate()
                        .map(|(k, m)| m.shape(&format!("{path}.sequence.matrices[{k}]")))
                        .collect::<Result<_, _>>()?,
                ),
            };
            traj.validate().map_err(|e| invalid(path.clone(), e.to_string()))?;
            if let InputTrajectory::Sequence(seq) = &traj {
                if seq.len() <= self.rounds {
                    return Err(invalid(
                        format!("{path}.sequence.matrices"),
                        format!("need rounds + 1 = {} matrices, got {}", self.rounds + 1, seq.len()),
                    ));
                }
            }
            trajectories.push(traj);
        }
        let dim = trajectories[0].dim();
        if let Some(i) = trajectories.iter().position(|t| t.dim() != dim) {
            return Err(invalid(format!("inputs[{i}]"), format!("dimension differs from inputs[0] ({dim})")));
        }
        Ok(NetworkSetup {
            graph,
            trajectories,
            theta: self.theta_mode(),
        })
    }

    pub fn dkf_setup(&self) -> Result<(MonteCarloSpec, DkfConfig, usize), ConfigError> {
        let d = self.dkf.clone().unwrap_or_default();
        let path = |f: &str| format!("dkf.{f}");
        if d.n_nodes == 0 {
            return Err(invalid(path("n_nodes"), "need at least one node"));
        }
        if !(d.edge_prob > 0.0 && d.edge_prob <= 1.0) {
            return Err(invalid(path("edge_prob"), "edge probability must lie in (0, 1]"));
        }
        if d.runs == 0 || d.horizon == 0 {
            return Err(invalid(path("runs"), "runs and horizon must be >= 1"));
        }
        if d.tail == 0 || d.tail > d.horizon {
            return Err(invalid(path("tail"), "tail must lie in 1..=horizon"));
        }
        if d.x0.len() != 4 {
            return Err(invalid(path("x0"), "the target state has 4 components"));
        }
        if !(d.mu_range[0] > 0.0 && d.mu_range[0] <= d.mu_range[1]) {
            return Err(invalid(path("mu_range"), "need 0 < low <= high"));
        }
        if !(d.init_eig[0] > 0.0 && d.init_eig[0] <= d.init_eig[1]) {
            return Err(invalid(path("init_eig"), "need 0 < low <= high"));
        }
        if !(d.w_scale >= 0.0) || !(d.init_std >= 0.0) || !d.dt.is_finite() {
            return Err(invalid(path("w_scale"), "noise scales must be >= 0 and dt finite"));
        }
        let mc = MonteCarloSpec {
            n_nodes: d.n_nodes,
            edge_prob: d.edge_prob,
            runs: d.runs,
            horizon: d.horizon,
            dt: d.dt,
            w_scale: d.w_scale,
            mu_range: (d.mu_range[0], d.mu_range[1]),
            x0: d.x0.clone(),
            init_std: d.init_std,
            init_eig: (d.init_eig[0], d.init_eig[1]),
            seed: self.seed,
        };
        let cfg = DkfConfig {
            solver: self.solver,
            objective: self.objective,
            theta: self.theta_mode(),
            fusion: FusionOptions {
                consensus: match d.consensus {
                    ConsensusSpec::Dynamic { inner_rounds } => ConsensusMode::Dynamic { inner_rounds },
                    ConsensusSpec::ExactAverage => ConsensusMode::ExactAverage,
                },
                weights: match d.fusion_weights {
                    FusionWeightsSpec::Propagated => FusionWeights::Propagated,
                    FusionWeightsSpec::LiteralRatio { epsilon_clamp } => FusionWeights::LiteralRatio { epsilon_clamp },
                },
                normalization: match d.normalization {
                    NormalizationSpec::Estimate => MeanNormalization::Estimate,
                    NormalizationSpec::Tracked => MeanNormalization::Tracked,
                },
            },
            local_steps: d.local_steps,
            cdkf_gain: d.cdkf_gain,
        };
        cfg.validate().map_err(|e: Error| invalid("dkf", e.to_string()))?;
        Ok((mc, cfg, d.tail))
    }
}
