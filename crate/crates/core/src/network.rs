//! Synchronous-round network simulator for the distributed program.
//!
//! Node indices are zero-based throughout this module.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lowner_john::{
    init_node, initial_global_weights, local_step, propagate_global_weights, solve_central, NodeState,
    ThetaMode,
};
use crate::objective::{eval_f, ObjectiveKind};
use crate::psd::{cholesky, eigvals_sym, lambda_max, lambda_min, SymMat};
use crate::simplex::{SolverConfig, WeightVector};

/// Slack on the global boundedness bound `λ_max(Qᵢ) ≤ 1/p̲`.
pub const BOUNDEDNESS_SLACK: f64 = 1e-8;

/// Undirected connected graph with closed neighborhoods.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    closed: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from undirected edges; duplicates are merged.
    pub fn new(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::InvalidGraph("graph needs at least one node".into()));
        }
        let mut norm = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= n_nodes || b >= n_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) references a node outside 0..{n_nodes}"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at node {a}")));
            }
            norm.push((a.min(b), a.max(b)));
        }
        norm.sort_unstable();
        norm.dedup();
        let mut closed: Vec<Vec<usize>> = (0..n_nodes).map(|i| vec![i]).collect();
        for &(a, b) in &norm {
            closed[a].push(b);
            closed[b].push(a);
        }
        closed.iter_mut().for_each(|c| c.sort_unstable());
        let g = Self {
            n_nodes,
            edges: norm,
            closed,
        };
        if g.hop_distances(0).iter().any(Option::is_none) {
            return Err(Error::Disconnected);
        }
        Ok(g)
    }

    /// Builds a graph from one-based edge labels.
    pub fn from_one_based(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if edges.iter().any(|&(a, b)| a == 0 || b == 0) {
            return Err(Error::InvalidGraph("one-based edge list contains node 0".into()));
        }
        let shifted: Vec<_> = edges.iter().map(|&(a, b)| (a - 1, b - 1)).collect();
        Self::new(n_nodes, &shifted)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Sorted `(i, j)` pairs with `i < j`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Neighbors of `i` including `i` itself, ascending.
    pub fn closed_neighbors(&self, i: usize) -> &[usize] {
        &self.closed[i]
    }

    /// Number of neighbors other than `i`.
    pub fn degree(&self, i: usize) -> usize {
        self.closed[i].len() - 1
    }

    fn hop_distances(&self, src: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_nodes];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for &v in &self.closed[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn diameter(&self) -> usize {
        (0..self.n_nodes)
            .flat_map(|s| self.hop_distances(s))
            .map(|d| d.expect("graph is connected"))
            .max()
            .unwrap_or(0)
    }

    /// Symmetric doubly stochastic Metropolis weights as a dense matrix.
    pub fn metropolis_weights(&self) -> DMatrix<f64> {
        let n = self.n_nodes;
        let mut a = DMatrix::zeros(n, n);
        for &(i, j) in &self.edges {
            let w = 1.0 / (1.0 + self.degree(i).max(self.degree(j)) as f64);
            a[(i, j)] = w;
            a[(j, i)] = w;
        }
        for i in 0..n {
            let off: f64 = a.row(i).iter().sum();
            a[(i, i)] = 1.0 - off;
        }
        a
    }
}

/// Erdős–Rényi graph with edge probability `edge_prob`, redrawn until
/// connected. Deterministic in `seed`.
pub fn random_connected_graph(n: usize, edge_prob: f64, seed: u64) -> Result<Graph> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    if !(edge_prob > 0.0 && edge_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "edge probability must lie in (0, 1], got {edge_prob}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < edge_prob {
                    edges.push((i, j));
                }
            }
        }
        match Graph::new(n, &edges) {
            Ok(g) => return Ok(g),
            Err(Error::Disconnected) => continue,
            Err(e) => return Err(e),
        }
    }
}

/// Input ellipsoid shape matrices `Pᵢ[k]` of one node.
#[derive(Debug, Clone, PartialEq)]
pub enum InputTrajectory {
    Static {
        p0: SymMat,
    },
    /// `(1 + B·sin ωk)·Rᵀ·P0·R` with `R` a rotation by `A·sin ωk` in `plane`.
    Oscillatory {
        p0: SymMat,
        a: f64,
        b: f64,
        omega: f64,
        plane: (usize, usize),
    },
    Sequence(Vec<SymMat>),
}

impl InputTrajectory {
    pub fn dim(&self) -> usize {
        match self {
            InputTrajectory::Static { p0 } | InputTrajectory::Oscillatory { p0, .. } => p0.dim(),
            InputTrajectory::Sequence(seq) => seq.first().map_or(0, SymMat::dim),
        }
    }

    /// Checks that every matrix the trajectory can produce is PD.
    pub fn validate(&self) -> Result<()> {
        match self {
            InputTrajectory::Static { p0 } => cholesky(p0).map(|_| ()),
            InputTrajectory::Oscillatory {
                p0,
                a,
                b,
                omega,
                plane,
            } => {
                cholesky(p0)?;
                let n = p0.dim();
                if n < 2 {
                    return Err(Error::InvalidArgument(
                        "oscillatory trajectory needs dimension >= 2".into(),
                    ));
                }
                let (p, q) = *plane;
                if p == q || p >= n || q >= n {
                    return Err(Error::InvalidArgument(format!(
                        "rotation plane ({p}, {q}) is invalid for dimension {n}"
                    )));
                }
                if !(b.abs() < 1.0) || !a.is_finite() || !omega.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "oscillation parameters must be finite with |B| < 1 (A={a}, B={b}, omega={omega})"
                    )));
                }
                Ok(())
            }
            InputTrajectory::Sequence(seq) => {
                let first = seq
                    .first()
                    .ok_or_else(|| Error::InvalidArgument("empty input sequence".into()))?;
                for m in seq {
                    if m.dim() != first.dim() {
                        return Err(Error::DimensionMismatch {
                            expected: first.dim(),
                            got: m.dim(),
                        });
                    }
                    cholesky(m)?;
                }
                Ok(())
            }
        }
    }

    pub fn omega(&self) -> Option<f64> {
        match self {
            InputTrajectory::Oscillatory { omega, .. } => Some(*omega),
            _ => None,
        }
    }
}

/// Givens rotation by `angle` in the `(p, q)` plane.
pub fn givens(n: usize, p: usize, q: usize, angle: f64) -> DMatrix<f64> {
    let (s, c) = angle.sin_cos();
    let mut r = DMatrix::identity(n, n);
    r[(p, p)] = c;
    r[(q, q)] = c;
    r[(p, q)] = -s;
    r[(q, p)] = s;
    r
}

pub fn generate_input(traj: &InputTrajectory, k: usize) -> Result<SymMat> {
    match traj {
        InputTrajectory::Static { p0 } => Ok(p0.clone()),
        InputTrajectory::Oscillatory {
            p0,
            a,
            b,
            omega,
            plane,
        } => {
            if k == 0 {
                return Ok(p0.clone());
            }
            let s = (omega * k as f64).sin();
            let r = givens(p0.dim(), plane.0, plane.1, a * s);
            Ok(p0.congruence(&r).scale(1.0 + b * s))
        }
        InputTrajectory::Sequence(seq) => seq
            .get(k)
            .cloned()
            .ok_or(Error::IndexOutOfRange { k, len: seq.len() }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub solver: SolverConfig,
    /// Oracle cadence in rounds; `0` disables it after round 0.
    pub oracle_every: usize,
    /// Run node steps of a round on the rayon pool.
    pub parallel: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            oracle_every: 1,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRecord {
    pub q_star: SymMat,
    pub lambdas: WeightVector,
    pub f_star: f64,
    /// Ascending eigenvalues of `Q*[k]`.
    pub eig_star: Vec<f64>,
    pub fusion_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub k: usize,
    pub inputs: Vec<SymMat>,
    pub q: Vec<SymMat>,
    pub weights: Vec<WeightVector>,
    /// Network-wide weights `wⁱ` of each node, see [`propagate_global_weights`].
    pub global_weights: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub f_node: Vec<f64>,
    /// Ascending eigenvalues of each `Qᵢ[k]`.
    pub eig_node: Vec<Vec<f64>>,
    pub solver_iters: Vec<usize>,
    pub solver_converged: Vec<bool>,
    /// Running minimum input eigenvalue over all nodes and rounds so far.
    pub p_floor: f64,
    pub oracle: Option<OracleRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundHistory {
    pub n_nodes: usize,
    pub dim: usize,
    pub objective: ObjectiveKind,
    /// Oscillation frequency of each node, if any.
    pub omegas: Vec<Option<f64>>,
    pub rounds: Vec<RoundRecord>,
}

fn solve_oracle(inputs: &[SymMat], kind: ObjectiveKind, cfg: &SolverConfig) -> Result<OracleRecord> {
    let sol = solve_central(inputs, &kind, cfg)?;
    let fusion_residual = sol.fusion_residual(inputs)?;
    Ok(OracleRecord {
        eig_star: eigvals_sym(&sol.q_star),
        q_star: sol.q_star,
        lambdas: sol.lambdas,
        f_star: sol.f_star,
        fusion_residual,
    })
}

/// One synchronous round: node `i` sees only `prev[j].q` for `j` in its
/// closed neighborhood and its own new input.
///
/// `order` fixes a sequential evaluation order; `None` runs nodes in
/// parallel. Results are returned indexed by node either way.
pub fn advance_round(
    graph: &Graph,
    prev: &[NodeState],
    inputs: &[SymMat],
    thetas: &[f64],
    kind: ObjectiveKind,
    cfg: &SolverConfig,
    order: Option<&[usize]>,
) -> Result<Vec<NodeState>> {
    let n = graph.n_nodes();
    if prev.len() != n || inputs.len() != n || thetas.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: prev.len().min(inputs.len()).min(thetas.len()),
        });
    }
    let step = |i: usize| -> Result<NodeState> {
        let nbrs: Vec<SymMat> = graph.closed_neighbors(i).iter().map(|&j| prev[j].q.clone()).collect();
        let mut state = prev[i].clone();
        state.theta_bar = thetas[i];
        local_step(&state, &nbrs, inputs[i].clone(), &kind, cfg)
    };
    match order {
        None => (0..n).into_par_iter().map(step).collect(),
        Some(order) => {
            let mut out: Vec<Option<NodeState>> = vec![None; n];
            for &i in order {
                out[i] = Some(step(i)?);
            }
            out.into_iter()
                .enumerate()
                .map(|(i, s)| s.ok_or_else(|| Error::InvalidArgument(format!("node {i} missing from order"))))
                .collect()
        }
    }
}

/// Global weights after a round, from the previous round's vectors.
pub fn advance_global_weights(graph: &Graph, states: &[NodeState], prev: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    states
        .iter()
        .map(|s| {
            let nbrs: Vec<&[f64]> = graph.closed_neighbors(s.id).iter().map(|&j| prev[j].as_slice()).collect();
            propagate_global_weights(s, &nbrs)
        })
        .collect()
}

fn record_round(
    k: usize,
    states: &[NodeState],
    global_weights: &[Vec<f64>],
    kind: ObjectiveKind,
    p_floor: f64,
    oracle: Option<OracleRecord>,
) -> Result<RoundRecord> {
    Ok(RoundRecord {
        k,
        inputs: states.iter().map(|s| s.p.clone()).collect(),
        q: states.iter().map(|s| s.q.clone()).collect(),
        weights: states.iter().map(|s| s.weights.clone()).collect(),
        global_weights: global_weights.to_vec(),
        theta: states.iter().map(|s| s.theta_bar).collect(),
        f_node: states.iter().map(|s| eval_f(kind, &s.q)).collect::<Result<_>>()?,
        eig_node: states.iter().map(|s| eigvals_sym(&s.q)).collect(),
        solver_iters: states.iter().map(|s| s.last_iters).collect(),
        solver_converged: states.iter().map(|s| s.last_converged).collect(),
        p_floor,
        oracle,
    })
}

fn check_global_bound(states: &[NodeState], p_floor: f64) -> Result<()> {
    let bound = 1.0 / p_floor;
    for s in states {
        let lm = lambda_max(&s.q);
        if lm > bound + BOUNDEDNESS_SLACK {
            return Err(Error::BoundednessViolation {
                node: s.id,
                lambda_max: lm,
                bound,
            });
        }
    }
    Ok(())
}

/// Runs the distributed program for `rounds` exchanges after initialization
/// at `k = 0`. The oracle always runs at `k = 0`.
pub fn run_simulation(
    graph: &Graph,
    trajectories: &[InputTrajectory],
    theta: ThetaMode,
    kind: ObjectiveKind,
    rounds: usize,
    opts: &SimOptions,
) -> Result<RoundHistory> {
    let n = graph.n_nodes();
    if trajectories.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: trajectories.len(),
        });
    }
    if rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be >= 1".into()));
    }
    theta.validate()?;
    opts.solver.validate()?;
    let dim = trajectories[0].dim();
    for t in trajectories {
        t.validate()?;
        if t.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: t.dim(),
            });
        }
    }

    let inputs0 = trajectories
        .iter()
        .map(|t| generate_input(t, 0))
        .collect::<Result<Vec<_>>>()?;
    let mut states = inputs0
        .iter()
        .enumerate()
        .map(|(i, p)| init_node(i, p.clone(), theta.initial()))
        .collect::<Result<Vec<_>>>()?;
    let mut p_floor = inputs0.iter().map(lambda_min).fold(f64::INFINITY, f64::min);
    let mut global_w: Vec<Vec<f64>> = (0..n).map(|i| initial_global_weights(i, n)).collect();
    let oracle0 = solve_oracle(&inputs0, kind, &opts.solver)?;
    let mut history = RoundHistory {
        n_nodes: n,
        dim,
        objective: kind,
        omegas: trajectories.iter().map(InputTrajectory::omega).collect(),
        rounds: vec![record_round(0, &states, &global_w, kind, p_floor, Some(oracle0))?],
    };

    for k in 1..=rounds {
        let inputs = trajectories
            .iter()
            .map(|t| generate_input(t, k))
            .collect::<Result<Vec<_>>>()?;
        let thetas = states
            .iter()
            .zip(&inputs)
            .map(|(s, p)| theta.theta(&s.p, p))
            .collect::<Result<Vec<_>>>()?;
        p_floor = inputs.iter().map(lambda_min).fold(p_floor, f64::min);
        let order: Option<Vec<usize>> = (!opts.parallel).then(|| (0..n).collect());
        states = advance_round(graph, &states, &inputs, &thetas, kind, &opts.solver, order.as_deref())?;
        check_global_bound(&states, p_floor)?;
        global_w = advance_global_weights(graph, &states, &global_w)?;
        let oracle = if opts.oracle_every > 0 && k % opts.oracle_every == 0 {
            Some(solve_oracle(&inputs, kind, &opts.solver)?)
        } else {
            None
        };
        history.rounds.push(record_round(k, &states, &global_w, kind, p_floor, oracle)?);
    }
    Ok(history)
}

/// Eigenvalue errors of one round against the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundErrors {
    pub k: usize,
    /// `|qⁱⱼ[k] − q*ⱼ[k]|`, indexed `[node][eig]`.
    pub per_node: Vec<Vec<f64>>,
    /// `|q̃ⱼ[k] − q*ⱼ[k]|` with `q̃ⱼ` the node-averaged j-th eigenvalue.
    pub averaged: Vec<f64>,
}

impl RoundErrors {
    pub fn max_node_error(&self) -> f64 {
        self.per_node.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn max_averaged_error(&self) -> f64 {
        self.averaged.iter().copied().fold(0.0, f64::max)
    }
}

/// Error table for every round that carries an oracle solution.
pub fn eigen_error_metrics(history: &RoundHistory) -> Vec<RoundErrors> {
    let n = history.n_nodes as f64;
    history
        .rounds
        .iter()
        .filter_map(|r| {
            let star = &r.oracle.as_ref()?.eig_star;
            let per_node = r
                .eig_node
                .iter()
                .map(|e| e.iter().zip(star).map(|(a, b)| (a - b).abs()).collect())
                .collect();
            let averaged = (0..star.len())
                .map(|j| {
                    let mean = r.eig_node.iter().map(|e| e[j]).sum::<f64>() / n;
                    (mean - star[j]).abs()
                })
                .collect();
            Some(RoundErrors {
                k: r.k,
                per_node,
                averaged,
            })
        })
        .collect()
}

/// Smallest `K` such that every entry of `errors` from index `K` on is at
/// most `tol`.
pub fn settling_index(errors: &[f64], tol: f64) -> Option<usize> {
    let last_bad = errors.iter().rposition(|&e| !(e <= tol));
    match last_bad {
        None => Some(0),
        Some(i) if i + 1 < errors.len() => Some(i + 1),
        Some(_) => None,
    }
}

/// Empirical tracking band of a dynamic run: `δ` is the largest error over
/// the second half of the series and `K` the first index after which the
/// series never exceeds `δ` again.
pub fn measure_band(errors: &[f64]) -> Option<(usize, f64)> {
    if errors.len() < 2 {
        return None;
    }
    let delta = errors[errors.len() / 2..].iter().copied().fold(0.0, f64::max);
    settling_index(errors, delta).map(|k| (k, delta))
}
