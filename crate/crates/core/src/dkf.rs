//! Distributed Kalman filtering with covariance fusion by the tracked global
//! outer Löwner-John ellipsoid, plus a Kalman-consensus baseline and the
//! centralized filter.
//!
//! Every filter records its predicted estimates `x̄ᵢ[k]`; the MSE metric is
//! computed on those.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lowner_john::{init_node, initial_global_weights, NodeState, ThetaMode};
use crate::network::{advance_global_weights, advance_round, random_connected_graph, Graph};
use crate::objective::ObjectiveKind;
use crate::psd::{cholesky, inverse_spd, random_spd, solve_spd, SymMat};
use crate::simplex::SolverConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    w: SymMat,
    h: Vec<DMatrix<f64>>,
    v: Vec<SymMat>,
}

impl LinearSystem {
    /// `x[k] = A·x[k−1] + w`, `yᵢ[k] = Hᵢ·x[k] + vᵢ` with `w ~ N(0, W)`,
    /// `vᵢ ~ N(0, Vᵢ)`.
    pub fn new(a: DMatrix<f64>, w: SymMat, h: Vec<DMatrix<f64>>, v: Vec<SymMat>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::InvalidMatrix("dynamics matrix must be square and non-empty".into()));
        }
        if w.dim() != n {
            return Err(Error::DimensionMismatch { expected: n, got: w.dim() });
        }
        if !crate::psd::is_psd(&w, Default::default()) {
            return Err(Error::InvalidMatrix("process noise covariance is not PSD".into()));
        }
        if h.is_empty() || h.len() != v.len() {
            return Err(Error::InvalidArgument(format!(
                "need one noise covariance per sensor ({} observation matrices, {} covariances)",
                h.len(),
                v.len()
            )));
        }
        for (hi, vi) in h.iter().zip(&v) {
            if hi.ncols() != n {
                return Err(Error::DimensionMismatch { expected: n, got: hi.ncols() });
            }
            if vi.dim() != hi.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: hi.nrows(),
                    got: vi.dim(),
                });
            }
            cholesky(vi)?;
        }
        Ok(Self { a, w, h, v })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_sensors(&self) -> usize {
        self.h.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn w(&self) -> &SymMat {
        &self.w
    }

    pub fn h(&self, i: usize) -> &DMatrix<f64> {
        &self.h[i]
    }

    pub fn v(&self, i: usize) -> &SymMat {
        &self.v[i]
    }

    /// All sensors as one: stacked `H` and block-diagonal `V`.
    pub fn stacked(&self) -> (DMatrix<f64>, SymMat) {
        let n = self.dim();
        let m: usize = self.h.iter().map(|h| h.nrows()).sum();
        let mut h = DMatrix::zeros(m, n);
        let mut v = DMatrix::zeros(m, m);
        let mut row = 0;
        for (hi, vi) in self.h.iter().zip(&self.v) {
            let r = hi.nrows();
            h.view_mut((row, 0), (r, n)).copy_from(hi);
            v.view_mut((row, row), (r, r)).copy_from(vi.as_matrix());
            row += r;
        }
        (h, SymMat::symmetrize(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x: DVector<f64>,
    pub p: SymMat,
}

/// `x̄ = A·x̂`, `P̄ = A·P̂·Aᵀ + W`.
pub fn kf_predict(state: &FilterState, sys: &LinearSystem) -> FilterState {
    FilterState {
        x: sys.a() * &state.x,
        p: &state.p.sandwich(sys.a()) + sys.w(),
    }
}

/// Kalman measurement update in Joseph form.
pub fn kf_update(pred: &FilterState, y: &DVector<f64>, h: &DMatrix<f64>, v: &SymMat) -> Result<FilterState> {
    let n = pred.x.len();
    if h.ncols() != n || h.nrows() != y.len() || v.dim() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: h.ncols(),
        });
    }
    if y.is_empty() {
        return Ok(pred.clone());
    }
    let ph_t = pred.p.as_matrix() * h.transpose();
    let s = &pred.p.sandwich(h) + v;
    let s_inv = inverse_spd(&s).map_err(|_| Error::SingularInnovation)?;
    let gain = ph_t * s_inv.as_matrix();
    let innovation = y - h * &pred.x;
    let x = &pred.x + &gain * innovation;
    let i_kh = DMatrix::identity(n, n) - &gain * h;
    let p = &pred.p.sandwich(&i_kh) + &v.sandwich(&gain);
    Ok(FilterState { x, p })
}

/// `Q*⁻¹·Σⱼ λⱼ·Pⱼ⁻¹·x̄ⱼ`.
pub fn fuse_mean_exact(
    q_star: &SymMat,
    lambdas: &[f64],
    p_list: &[SymMat],
    xbar_list: &[DVector<f64>],
) -> Result<DVector<f64>> {
    if lambdas.len() != p_list.len() || p_list.len() != xbar_list.len() {
        return Err(Error::DimensionMismatch {
            expected: lambdas.len(),
            got: p_list.len().min(xbar_list.len()),
        });
    }
    let mut acc = DVector::zeros(q_star.dim());
    for ((l, p), x) in lambdas.iter().zip(p_list).zip(xbar_list) {
        if *l != 0.0 {
            acc += solve_spd(p, x)? * *l;
        }
    }
    solve_spd(q_star, &acc)
}

/// Dynamic-consensus trackers of one node: `z` for the weighted
/// information vector, `z_info` for the matching information matrix
/// (column-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusState {
    pub z: DVector<f64>,
    pub u_prev: DVector<f64>,
    pub z_info: DVector<f64>,
    pub u_info_prev: DVector<f64>,
}

impl ConsensusState {
    pub fn zeros(n: usize) -> Self {
        Self {
            z: DVector::zeros(n),
            u_prev: DVector::zeros(n),
            z_info: DVector::zeros(n * n),
            u_info_prev: DVector::zeros(n * n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConsensusMode {
    /// First-order dynamic consensus with Metropolis weights.
    Dynamic { inner_rounds: usize },
    /// Every tracker is set to the exact network average.
    ExactAverage,
}

/// How node `j` scales its contribution `Pⱼ⁻¹·x̄ⱼ` to the network average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FusionWeights {
    /// `N·wʲⱼ`, the node's own entry of its propagated global weights.
    Propagated,
    /// `λ_P / (1 − Σₗ λₗ)` from the local weights, the denominator floored at
    /// `epsilon_clamp`.
    LiteralRatio { epsilon_clamp: f64 },
}

/// Matrix that maps the tracked average back to a state estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeanNormalization {
    /// `x̂ᵢ = Qᵢ⁻¹·zᵢ`.
    Estimate,
    /// `x̂ᵢ = Zᵢ⁻¹·zᵢ` with `Zᵢ` the tracked average of `cⱼ·Pⱼ⁻¹`; falls back
    /// to `Qᵢ` while `Zᵢ` is not positive definite.
    Tracked,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionOptions {
    pub consensus: ConsensusMode,
    pub weights: FusionWeights,
    pub normalization: MeanNormalization,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            consensus: ConsensusMode::Dynamic { inner_rounds: 10 },
            weights: FusionWeights::Propagated,
            normalization: MeanNormalization::Tracked,
        }
    }
}

impl FusionOptions {
    pub fn validate(&self) -> Result<()> {
        if let ConsensusMode::Dynamic { inner_rounds: 0 } = self.consensus {
            return Err(Error::InvalidArgument("inner_rounds must be >= 1".into()));
        }
        if let FusionWeights::LiteralRatio { epsilon_clamp } = self.weights {
            if !(epsilon_clamp > 0.0) {
                return Err(Error::InvalidArgument("epsilon_clamp must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub x_hat: Vec<DVector<f64>>,
    /// Nodes whose ratio denominator hit the floor.
    pub clamp_count: usize,
    /// Nodes that fell back to `Qᵢ` for normalization.
    pub fallback_count: usize,
    /// `maxᵢ ‖zᵢ − mean(u)‖ / ‖mean(u)‖` after mixing.
    pub disagreement: f64,
}

/// Per-node scale `cⱼ` applied to `Pⱼ⁻¹·x̄ⱼ`, and the number of clamps.
pub fn fusion_coefficients(
    nodes: &[NodeState],
    global_weights: &[Vec<f64>],
    weights: FusionWeights,
) -> (Vec<f64>, usize) {
    let n = nodes.len() as f64;
    match weights {
        FusionWeights::Propagated => (
            nodes.iter().map(|s| n * global_weights[s.id][s.id]).collect(),
            0,
        ),
        FusionWeights::LiteralRatio { epsilon_clamp } => {
            let mut clamps = 0;
            let c = nodes
                .iter()
                .map(|s| {
                    let denom = 1.0 - s.neighbor_weight();
                    if denom < epsilon_clamp {
                        clamps += 1;
                    }
                    s.input_weight() / denom.max(epsilon_clamp)
                })
                .collect();
            (c, clamps)
        }
    }
}

fn mean_of(v: &[DVector<f64>]) -> DVector<f64> {
    v.iter().fold(DVector::zeros(v[0].len()), |acc, x| acc + x) / v.len() as f64
}

/// One filter step of dynamic consensus on per-node inputs `u`.
fn track(
    graph: &Graph,
    z: &mut [DVector<f64>],
    u_prev: &mut [DVector<f64>],
    u: &[DVector<f64>],
    mode: ConsensusMode,
) {
    match mode {
        ConsensusMode::ExactAverage => {
            let mean = mean_of(u);
            z.iter_mut().for_each(|zi| *zi = mean.clone());
        }
        ConsensusMode::Dynamic { inner_rounds } => {
            for ((zi, pi), ui) in z.iter_mut().zip(u_prev.iter()).zip(u) {
                *zi += ui - pi;
            }
            let a = graph.metropolis_weights();
            for _ in 0..inner_rounds {
                let old = z.to_vec();
                for (i, zi) in z.iter_mut().enumerate() {
                    for &j in graph.closed_neighbors(i) {
                        if j != i {
                            *zi += (&old[j] - &old[i]) * a[(i, j)];
                        }
                    }
                }
            }
        }
    }
    u_prev.clone_from_slice(u);
}

/// Distributed mean fusion: each node feeds `uⱼ = cⱼ·Pⱼ⁻¹·x̄ⱼ` (and, for
/// tracked normalization, `cⱼ·Pⱼ⁻¹`) to a dynamic consensus and maps its
/// tracked network average back to a state estimate.
pub fn fuse_mean_distributed(
    graph: &Graph,
    nodes: &[NodeState],
    global_weights: &[Vec<f64>],
    xbars: &[DVector<f64>],
    consensus: &mut [ConsensusState],
    opts: &FusionOptions,
) -> Result<FusionOutput> {
    opts.validate()?;
    let n = graph.n_nodes();
    if nodes.len() != n || xbars.len() != n || consensus.len() != n || global_weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: nodes.len(),
        });
    }
    let dim = xbars[0].len();
    let (coeff, clamp_count) = fusion_coefficients(nodes, global_weights, opts.weights);
    let infos = nodes.iter().map(|s| inverse_spd(&s.p)).collect::<Result<Vec<_>>>()?;
    let u: Vec<DVector<f64>> = infos
        .iter()
        .zip(xbars)
        .zip(&coeff)
        .map(|((pinv, x), c)| pinv.mul_vec(x) * *c)
        .collect();

    let (mut z, mut u_prev): (Vec<_>, Vec<_>) = consensus.iter().map(|c| (c.z.clone(), c.u_prev.clone())).unzip();
    track(graph, &mut z, &mut u_prev, &u, opts.consensus);
    let mean = mean_of(&u);
    let scale = mean.norm().max(f64::MIN_POSITIVE);
    let disagreement = z.iter().map(|zi| (zi - &mean).norm() / scale).fold(0.0, f64::max);

    let mut z_info = None;
    if opts.normalization == MeanNormalization::Tracked {
        let ui: Vec<DVector<f64>> = infos
            .iter()
            .zip(&coeff)
            .map(|(pinv, c)| DVector::from_column_slice((pinv.as_matrix() * *c).as_slice()))
            .collect();
        let (mut zm, mut um_prev): (Vec<_>, Vec<_>) =
            consensus.iter().map(|c| (c.z_info.clone(), c.u_info_prev.clone())).unzip();
        track(graph, &mut zm, &mut um_prev, &ui, opts.consensus);
        for ((cs, zmi), pi) in consensus.iter_mut().zip(&zm).zip(um_prev) {
            cs.z_info = zmi.clone();
            cs.u_info_prev = pi;
        }
        z_info = Some(zm);
    }
    for ((cs, zi), pi) in consensus.iter_mut().zip(&z).zip(u_prev) {
        cs.z = zi.clone();
        cs.u_prev = pi;
    }

    let mut fallback_count = 0;
    let mut x_hat = Vec::with_capacity(n);
    for (i, s) in nodes.iter().enumerate() {
        let tracked = z_info.as_ref().and_then(|zm| {
            let m = SymMat::symmetrize(DMatrix::from_column_slice(dim, dim, zm[i].as_slice()));
            solve_spd(&m, &z[i]).ok()
        });
        x_hat.push(match tracked {
            Some(x) => x,
            None => {
                if z_info.is_some() {
                    fallback_count += 1;
                }
                solve_spd(&s.q, &z[i])?
            }
        });
    }
    Ok(FusionOutput {
        x_hat,
        clamp_count,
        fallback_count,
        disagreement,
    })
}

/// Ground truth, measurements and initial predictions of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// `x[k]`, k = 0..horizon.
    pub truth: Vec<DVector<f64>>,
    /// `yᵢ[k]`, indexed `[k][i]`.
    pub measurements: Vec<Vec<DVector<f64>>>,
    /// `(x̄ᵢ[0], P̄ᵢ[0])` of each node.
    pub init: Vec<FilterState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub x0: DVector<f64>,
    pub horizon: usize,
    /// Standard deviation of the initial estimate offsets.
    pub init_std: f64,
    /// Eigenvalue range of the initial covariances.
    pub init_eig: (f64, f64),
}

fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Square-root factor `S` with `S·Sᵀ = M` for PSD `M`.
fn psd_sqrt(m: &SymMat) -> DMatrix<f64> {
    let eig = m.as_matrix().clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d
}

pub fn draw_scenario(sys: &LinearSystem, spec: &ScenarioSpec, seed: u64) -> Result<Scenario> {
    let n = sys.dim();
    if spec.x0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: spec.x0.len() });
    }
    if spec.horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_sqrt = psd_sqrt(sys.w());
    let v_sqrt: Vec<DMatrix<f64>> = (0..sys.n_sensors()).map(|i| psd_sqrt(sys.v(i))).collect();

    let init = (0..sys.n_sensors())
        .map(|_| {
            let x = &spec.x0 + gaussian_vector(&mut rng, n) * spec.init_std;
            let p = random_spd(&mut rng, n, spec.init_eig);
            FilterState { x, p }
        })
        .collect();

    let mut truth = Vec::with_capacity(spec.horizon);
    let mut measurements = Vec::with_capacity(spec.horizon);
    let mut x = spec.x0.clone();
    for k in 0..spec.horizon {
        if k > 0 {
            x = sys.a() * &x + &w_sqrt * gaussian_vector(&mut rng, n);
        }
        let ys = (0..sys.n_sensors())
            .map(|i| sys.h(i) * &x + &v_sqrt[i] * gaussian_vector(&mut rng, v_sqrt[i].nrows()))
            .collect();
        truth.push(x.clone());
        measurements.push(ys);
    }
    Ok(Scenario {
        truth,
        measurements,
        init,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DkfConfig {
    pub solver: SolverConfig,
    pub objective: ObjectiveKind,
    pub theta: ThetaMode,
    pub fusion: FusionOptions,
    /// Local steps of the distributed program per filter step.
    pub local_steps: usize,
    /// Gain constant `c` of the consensus baseline.
    pub cdkf_gain: f64,
}

impl Default for DkfConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            objective: ObjectiveKind::NegLogDet,
            theta: ThetaMode::Adaptive { kappa: 1.0 },
            fusion: FusionOptions::default(),
            local_steps: 1,
            cdkf_gain: 0.1,
        }
    }
}

impl DkfConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.theta.validate()?;
        if self.local_steps == 0 {
            return Err(Error::InvalidArgument("local_steps must be >= 1".into()));
        }
        if !(self.cdkf_gain >= 0.0) {
            return Err(Error::InvalidArgument("cdkf_gain must be >= 0".into()));
        }
        self.fusion.validate()
    }
}

/// Filter output of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct DkfRun {
    /// Predicted estimates `x̄ᵢ[k]`, indexed `[k][i]`.
    pub xbar: Vec<Vec<DVector<f64>>>,
    /// Posterior states after the last step.
    pub posterior: Vec<FilterState>,
    pub clamp_count: usize,
    pub fallback_count: usize,
    pub max_disagreement: f64,
}

fn check_scenario(sys: &LinearSystem, graph: Option<&Graph>, sc: &Scenario) -> Result<()> {
    if let Some(g) = graph {
        if g.n_nodes() != sys.n_sensors() {
            return Err(Error::DimensionMismatch {
                expected: g.n_nodes(),
                got: sys.n_sensors(),
            });
        }
    }
    if sc.init.len() != sys.n_sensors() || sc.measurements.len() != sc.truth.len() || sc.truth.is_empty() {
        return Err(Error::InvalidArgument("scenario does not match the system".into()));
    }
    Ok(())
}

/// The proposed filter: predict, one local step of the distributed program
/// on the predicted covariances, distributed mean fusion with `Qᵢ⁻¹` as the
/// fused prior covariance, then a local measurement update.
pub fn run_dkf_proposed(sys: &LinearSystem, graph: &Graph, sc: &Scenario, cfg: &DkfConfig) -> Result<DkfRun> {
    cfg.validate()?;
    check_scenario(sys, Some(graph), sc)?;
    let n = graph.n_nodes();
    let mut preds = sc.init.clone();
    let mut posts = Vec::with_capacity(n);
    let mut nodes: Vec<NodeState> = Vec::with_capacity(n);
    let mut global_w: Vec<Vec<f64>> = (0..n).map(|i| initial_global_weights(i, n)).collect();
    let mut consensus = vec![ConsensusState::zeros(sys.dim()); n];
    let mut xbar = Vec::with_capacity(sc.truth.len());
    let mut clamp_count = 0;
    let mut fallback_count = 0;
    let mut max_disagreement: f64 = 0.0;

    for k in 0..sc.truth.len() {
        if k > 0 {
            preds = posts.iter().map(|s| kf_predict(s, sys)).collect();
        }
        xbar.push(preds.iter().map(|s| s.x.clone()).collect());

        let priors: Vec<FilterState> = if k == 0 {
            nodes = preds
                .iter()
                .enumerate()
                .map(|(i, s)| init_node(i, s.p.clone(), cfg.theta.initial()))
                .collect::<Result<_>>()?;
            preds.clone()
        } else {
            let inputs: Vec<SymMat> = preds.iter().map(|s| s.p.clone()).collect();
            for step in 0..cfg.local_steps {
                let thetas = if step == 0 {
                    nodes
                        .iter()
                        .zip(&inputs)
                        .map(|(s, p)| cfg.theta.theta(&s.p, p))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    nodes.iter().map(|s| s.theta_bar).collect()
                };
                nodes = advance_round(graph, &nodes, &inputs, &thetas, cfg.objective, &cfg.solver, None)?;
                global_w = advance_global_weights(graph, &nodes, &global_w)?;
            }
            let xs: Vec<DVector<f64>> = preds.iter().map(|s| s.x.clone()).collect();
            let fused = fuse_mean_distributed(
                graph,
                &nodes,
                &global_w,
                &xs,
                &mut consensus,
                &cfg.fusion,
            )?;
            clamp_count += fused.clamp_count;
            fallback_count += fused.fallback_count;
            max_disagreement = max_disagreement.max(fused.disagreement);
            fused
                .x_hat
                .into_iter()
                .zip(&nodes)
                .map(|(x, s)| Ok(FilterState { x, p: inverse_spd(&s.q)? }))
                .collect::<Result<_>>()?
        };

        posts = priors
            .iter()
            .enumerate()
            .map(|(i, s)| kf_update(s, &sc.measurements[k][i], sys.h(i), sys.v(i)))
            .collect::<Result<_>>()?;
    }
    Ok(DkfRun {
        xbar,
        posterior: posts,
        clamp_count,
        fallback_count,
        max_disagreement,
    })
}

/// Kalman-consensus filter: local update, then
/// `x̂ᵢ += γᵢ·P̂ᵢ·Σ_{j ∈ Nᵢ} (x̄ⱼ − x̄ᵢ)` with `γᵢ = c / (1 + ‖P̄ᵢ‖_F)`.
pub fn run_cdkf_baseline(sys: &LinearSystem, graph: &Graph, sc: &Scenario, gain: f64) -> Result<DkfRun> {
    check_scenario(sys, Some(graph), sc)?;
    if !(gain >= 0.0) {
        return Err(Error::InvalidArgument("consensus gain must be >= 0".into()));
    }
    let mut preds = sc.init.clone();
    let mut posts: Vec<FilterState> = Vec::new();
    let mut xbar = Vec::with_capacity(sc.truth.len());
    for k in 0..sc.truth.len() {
        if k > 0 {
            preds = posts.iter().map(|s| kf_predict(s, sys)).collect();
        }
        xbar.push(preds.iter().map(|s| s.x.clone()).collect());
        posts = preds
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut post = kf_update(s, &sc.measurements[k][i], sys.h(i), sys.v(i))?;
                let mut pull = DVector::zeros(s.x.len());
                for &j in graph.closed_neighbors(i) {
                    pull += &preds[j].x - &s.x;
                }
                let gamma = gain / (1.0 + s.p.frobenius_norm());
                post.x += post.p.mul_vec(&pull) * gamma;
                Ok(post)
            })
            .collect::<Result<_>>()?;
    }
    Ok(DkfRun {
        xbar,
        posterior: posts,
        clamp_count: 0,
        fallback_count: 0,
        max_disagreement: 0.0,
    })
}

/// Single filter with every measurement, initialized from node 0's prior.
pub fn run_centralized_kf(sys: &LinearSystem, sc: &Scenario) -> Result<DkfRun> {
    check_scenario(sys, None, sc)?;
    let (h, v) = sys.stacked();
    let mut pred = sc.init[0].clone();
    let mut post = pred.clone();
    let mut xbar = Vec::with_capacity(sc.truth.len());
    for (k, ys) in sc.measurements.iter().enumerate() {
        if k > 0 {
            pred = kf_predict(&post, sys);
        }
        xbar.push(vec![pred.x.clone()]);
        let y = DVector::from_iterator(h.nrows(), ys.iter().flat_map(|y| y.iter().copied()));
        post = kf_update(&pred, &y, &h, &v)?;
    }
    Ok(DkfRun {
        xbar,
        posterior: vec![post],
        clamp_count: 0,
        fallback_count: 0,
        max_disagreement: 0.0,
    })
}

/// `MSE[k] = (1/S)·Σₛ (1/N)·Σᵢ ‖x̄ˢᵢ[k] − xˢ[k]‖²`.
pub fn mse_metric(truths: &[&[DVector<f64>]], runs: &[&DkfRun]) -> Result<Vec<f64>> {
    if truths.len() != runs.len() || runs.is_empty() {
        return Err(Error::InvalidArgument("need one truth trajectory per run".into()));
    }
    let horizon = truths[0].len();
    let mut mse = vec![0.0; horizon];
    for (truth, run) in truths.iter().zip(runs) {
        if truth.len() != horizon || run.xbar.len() != horizon {
            return Err(Error::InvalidArgument("runs have different horizons".into()));
        }
        for (k, (x, est)) in truth.iter().zip(&run.xbar).enumerate() {
            let per_node: f64 = est.iter().map(|e| (e - x).norm_squared()).sum();
            mse[k] += per_node / est.len() as f64;
        }
    }
    let s = runs.len() as f64;
    mse.iter_mut().for_each(|m| *m /= s);
    Ok(mse)
}

/// Planar constant-velocity target `[px, py, vx, vy]` observed by `n_nodes`
/// position sensors; even nodes see `px`, odd nodes see `py`.
pub fn constant_velocity_system(
    n_nodes: usize,
    dt: f64,
    w_scale: f64,
    mu_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<LinearSystem> {
    let mut a = DMatrix::identity(4, 4);
    a[(0, 2)] = dt;
    a[(1, 3)] = dt;
    let w = SymMat::identity(4).scale(w_scale);
    let mut h = Vec::with_capacity(n_nodes);
    let mut v = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        let mut hi = DMatrix::zeros(1, 4);
        hi[(0, i % 2)] = 1.0;
        h.push(hi);
        let mu = rng.random_range(mu_range.0..=mu_range.1);
        v.push(SymMat::from_diagonal(&[mu]));
    }
    LinearSystem::new(a, w, h, v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSpec {
    pub n_nodes: usize,
    pub edge_prob: f64,
    pub runs: usize,
    pub horizon: usize,
    pub dt: f64,
    pub w_scale: f64,
    pub mu_range: (f64, f64),
    pub x0: Vec<f64>,
    pub init_std: f64,
    pub init_eig: (f64, f64),
    pub seed: u64,
}

impl Default for MonteCarloSpec {
    fn default() -> Self {
        Self {
            n_nodes: 10,
            edge_prob: 0.3,
            runs: 20,
            horizon: 100,
            dt: 0.1,
            w_scale: 2e-8,
            mu_range: (0.03, 0.05),
            x0: vec![0.0, 0.0, 1.0, 0.5],
            init_std: 1.0,
            init_eig: (0.5, 2.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloResult {
    pub mse_centralized: Vec<f64>,
    pub mse_proposed: Vec<f64>,
    pub mse_cdkf: Vec<f64>,
    pub clamp_count: usize,
    pub fallback_count: usize,
    pub max_disagreement: f64,
}

/// Seeds of run `s` derived from the experiment seed.
fn run_seed(seed: u64, s: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(s as u64 + 1)
}

/// Independent runs on random connected graphs; all three filters see the
/// same truth, measurements and initial priors within a run.
pub fn run_monte_carlo(spec: &MonteCarloSpec, cfg: &DkfConfig) -> Result<MonteCarloResult> {
    cfg.validate()?;
    if spec.runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    let mut sys_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sys = constant_velocity_system(spec.n_nodes, spec.dt, spec.w_scale, spec.mu_range, &mut sys_rng)?;
    let scenario_spec = ScenarioSpec {
        x0: DVector::from_vec(spec.x0.clone()),
        horizon: spec.horizon,
        init_std: spec.init_std,
        init_eig: spec.init_eig,
    };
    let per_run = (0..spec.runs)
        .into_par_iter()
        .map(|s| {
            let seed = run_seed(spec.seed, s);
            let graph = random_connected_graph(spec.n_nodes, spec.edge_prob, seed)?;
            let sc = draw_scenario(&sys, &scenario_spec, seed)?;
            let central = run_centralized_kf(&sys, &sc)?;
            let proposed = run_dkf_proposed(&sys, &graph, &sc, cfg)?;
            let cdkf = run_cdkf_baseline(&sys, &graph, &sc, cfg.cdkf_gain)?;
            Ok((sc.truth, central, proposed, cdkf))
        })
        .collect::<Result<Vec<_>>>()?;

    let truths: Vec<&[DVector<f64>]> = per_run.iter().map(|r| r.0.as_slice()).collect();
    let pick = |f: fn(&(Vec<DVector<f64>>, DkfRun, DkfRun, DkfRun)) -> &DkfRun| -> Vec<&DkfRun> {
        per_run.iter().map(f).collect()
    };
    Ok(MonteCarloResult {
        mse_centralized: mse_metric(&truths, &pick(|r| &r.1))?,
        mse_proposed: mse_metric(&truths, &pick(|r| &r.2))?,
        mse_cdkf: mse_metric(&truths, &pick(|r| &r.3))?,
        clamp_count: per_run.iter().map(|r| r.2.clamp_count).sum(),
        fallback_count: per_run.iter().map(|r| r.2.fallback_count).sum(),
        max_disagreement: per_run.iter().map(|r| r.2.max_disagreement).fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psd::psd_leq;

    fn scalar_state(x: f64, p: f64) -> FilterState {
        FilterState {
            x: DVector::from_vec(vec![x]),
            p: SymMat::from_diagonal(&[p]),
        }
    }

    #[test]
    fn predict_examples() {
        let h = vec![DMatrix::identity(2, 2)];
        let v = vec![SymMat::identity(2)];
        let s = FilterState {
            x: DVector::from_vec(vec![1.0, -2.0]),
            p: SymMat::identity(2),
        };
        let sys = LinearSystem::new(DMatrix::identity(2, 2), SymMat::zeros(2), h.clone(), v.clone()).unwrap();
        assert_eq!(kf_predict(&s, &sys), s);
        let sys = LinearSystem::new(DMatrix::identity(2, 2) * 2.0, SymMat::zeros(2), h, v).unwrap();
        let p = kf_predict(&s, &sys);
        assert_eq!(p.p, SymMat::identity(2).scale(4.0));
        assert_eq!(p.x, DVector::from_vec(vec![2.0, -4.0]));
    }

    #[test]
    fn predict_matches_hand_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = constant_velocity_system(2, 0.1, 2e-8, (0.03, 0.05), &mut rng).unwrap();
        let s = FilterState {
            x: DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]),
            p: SymMat::from_diagonal(&[1.0, 2.0, 3.0, 4.0]),
        };
        let out = kf_predict(&s, &sys);
        assert_eq!(out.x.as_slice(), &[1.3, 2.4, 3.0, 4.0]);
        // [[1 + 0.01·3, 0, 0.3, 0], [0, 2 + 0.01·4, 0, 0.4], ...] + 2e-8·I
        let expect = SymMat::from_rows(&[
            vec![1.03 + 2e-8, 0.0, 0.3, 0.0],
            vec![0.0, 2.04 + 2e-8, 0.0, 0.4],
            vec![0.3, 0.0, 3.0 + 2e-8, 0.0],
            vec![0.0, 0.4, 0.0, 4.0 + 2e-8],
        ])
        .unwrap();
        assert!((&out.p - &expect).max_abs() < 1e-14);
    }

    #[test]
    fn update_examples() {
        let pred = scalar_state(0.0, 1.0);
        let out = kf_update(&pred, &DVector::from_vec(vec![2.0]), &DMatrix::identity(1, 1), &SymMat::identity(1)).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-15);
        assert!((out.p.get(0, 0) - 0.5).abs() < 1e-15);

        let pred = FilterState {
            x: DVector::from_vec(vec![0.3, 0.1]),
            p: SymMat::identity(2),
        };
        let out = kf_update(&pred, &DVector::from_vec(vec![5.0]), &DMatrix::zeros(1, 2), &SymMat::identity(1)).unwrap();
        assert_eq!(out, pred);

        let out = kf_update(
            &pred,
            &DVector::from_vec(vec![5.0, 5.0]),
            &DMatrix::identity(2, 2),
            &SymMat::identity(2).scale(1e12),
        )
        .unwrap();
        assert!((&out.p - &SymMat::identity(2)).max_abs() < 1e-9);

        let bad = kf_update(&pred, &DVector::from_vec(vec![1.0]), &DMatrix::zeros(1, 2), &SymMat::zeros(1));
        assert_eq!(bad, Err(Error::SingularInnovation));
    }

    #[test]
    fn fuse_exact_examples() {
        let p = SymMat::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let x = DVector::from_vec(vec![1.0, -3.0]);
        let q = inverse_spd(&p).unwrap();
        let out = fuse_mean_exact(&q, &[1.0], &[p.clone()], &[x.clone()]).unwrap();
        assert!((out - &x).norm() < 1e-14);

        let p2 = SymMat::from_diagonal(&[0.5, 3.0]);
        let lam = [0.3, 0.7];
        let q = SymMat::weighted_sum(2, [(0.3, &inverse_spd(&p).unwrap()), (0.7, &inverse_spd(&p2).unwrap())]);
        let out = fuse_mean_exact(&q, &lam, &[p.clone(), p2.clone()], &[x.clone(), x.clone()]).unwrap();
        assert!((out - &x).norm() < 1e-13);
    }

    #[test]
    fn single_node_dkf_is_a_plain_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sys = constant_velocity_system(1, 0.1, 2e-8, (0.03, 0.05), &mut rng).unwrap();
        let spec = ScenarioSpec {
            x0: DVector::from_vec(vec![0.0, 0.0, 1.0, 0.5]),
            horizon: 40,
            init_std: 1.0,
            init_eig: (0.5, 2.0),
        };
        let sc = draw_scenario(&sys, &spec, 3).unwrap();
        let g = Graph::new(1, &[]).unwrap();
        let proposed = run_dkf_proposed(&sys, &g, &sc, &DkfConfig::default()).unwrap();
        let central = run_centralized_kf(&sys, &sc).unwrap();
        let cdkf = run_cdkf_baseline(&sys, &g, &sc, 0.1).unwrap();
        for k in 0..40 {
            assert!((&proposed.xbar[k][0] - &central.xbar[k][0]).norm() <= 1e-10, "k={k}");
            assert!((&cdkf.xbar[k][0] - &central.xbar[k][0]).norm() <= 1e-10, "k={k}");
        }
    }

    #[test]
    fn zero_gain_consensus_is_independent_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sys = constant_velocity_system(3, 0.1, 2e-8, (0.03, 0.05), &mut rng).unwrap();
        let spec = ScenarioSpec {
            x0: DVector::from_vec(vec![0.0, 0.0, 1.0, 0.5]),
            horizon: 20,
            init_std: 1.0,
            init_eig: (0.5, 2.0),
        };
        let sc = draw_scenario(&sys, &spec, 4).unwrap();
        let g = Graph::new(3, &[(0, 1), (1, 2)]).unwrap();
        let joint = run_cdkf_baseline(&sys, &g, &sc, 0.0).unwrap();
        let single_g = Graph::new(1, &[]).unwrap();
        for i in 0..3 {
            let sys_i = LinearSystem::new(
                sys.a().clone(),
                sys.w().clone(),
                vec![sys.h(i).clone()],
                vec![sys.v(i).clone()],
            )
            .unwrap();
            let sc_i = Scenario {
                truth: sc.truth.clone(),
                measurements: sc.measurements.iter().map(|m| vec![m[i].clone()]).collect(),
                init: vec![sc.init[i].clone()],
            };
            let alone = run_cdkf_baseline(&sys_i, &single_g, &sc_i, 0.0).unwrap();
            for k in 0..20 {
                assert_eq!(joint.xbar[k][i], alone.xbar[k][0]);
            }
        }
    }

    #[test]
    fn two_identical_sensors_add_information() {
        let sys = LinearSystem::new(
            DMatrix::identity(2, 2),
            SymMat::zeros(2),
            vec![DMatrix::identity(2, 2); 2],
            vec![SymMat::from_diagonal(&[0.5, 2.0]); 2],
        )
        .unwrap();
        let pbar = SymMat::from_rows(&[vec![1.0, 0.2], vec![0.2, 0.8]]).unwrap();
        let (h, v) = sys.stacked();
        let pred = FilterState {
            x: DVector::zeros(2),
            p: pbar.clone(),
        };
        let post = kf_update(&pred, &DVector::zeros(4), &h, &v).unwrap();
        let info = &inverse_spd(&pbar).unwrap() + &inverse_spd(&SymMat::from_diagonal(&[0.25, 1.0])).unwrap();
        let expect = inverse_spd(&info).unwrap();
        assert!((&post.p - &expect).max_abs() <= 1e-9);
    }

    #[test]
    fn posterior_never_exceeds_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p = random_spd(&mut rng, 3, (0.1, 5.0));
            let h = DMatrix::from_fn(2, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let v = random_spd(&mut rng, 2, (0.01, 1.0));
            let pred = FilterState {
                x: DVector::zeros(3),
                p: p.clone(),
            };
            let post = kf_update(&pred, &DVector::zeros(2), &h, &v).unwrap();
            let slack = &p + &SymMat::identity(3).scale(1e-10);
            assert!(psd_leq(&post.p, &slack, Default::default()).unwrap());
        }
    }

    #[test]
    fn mse_examples() {
        let truth = vec![DVector::from_vec(vec![1.0, 1.0])];
        let run = DkfRun {
            xbar: vec![vec![DVector::from_vec(vec![4.0, 5.0])]],
            posterior: vec![],
            clamp_count: 0,
            fallback_count: 0,
            max_disagreement: 0.0,
        };
        assert_eq!(mse_metric(&[&truth], &[&run]).unwrap(), vec![25.0]);
        let exact = DkfRun {
            xbar: vec![vec![truth[0].clone(); 3]],
            ..run.clone()
        };
        assert_eq!(mse_metric(&[&truth], &[&exact]).unwrap(), vec![0.0]);
    }

    #[test]
    fn mse_matches_two_loop_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truths: Vec<Vec<DVector<f64>>> = (0..3).map(|_| (0..4).map(|_| gaussian_vector(&mut rng, 2)).collect()).collect();
        let runs: Vec<DkfRun> = (0..3)
            .map(|_| DkfRun {
                xbar: (0..4).map(|_| (0..5).map(|_| gaussian_vector(&mut rng, 2)).collect()).collect(),
                posterior: vec![],
                clamp_count: 0,
                fallback_count: 0,
                max_disagreement: 0.0,
            })
            .collect();
        let t: Vec<&[DVector<f64>]> = truths.iter().map(|t| t.as_slice()).collect();
        let r: Vec<&DkfRun> = runs.iter().collect();
        let mse = mse_metric(&t, &r).unwrap();
        for k in 0..4 {
            let mut acc = 0.0;
            for s in 0..3 {
                let mut node_acc = 0.0;
                for i in 0..5 {
                    let d0 = runs[s].xbar[k][i][0] - truths[s][k][0];
                    let d1 = runs[s].xbar[k][i][1] - truths[s][k][1];
                    node_acc += d0 * d0 + d1 * d1;
                }
                acc += node_acc / 5.0;
            }
            assert!((mse[k] - acc / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dynamic_consensus_on_complete_graph_reaches_average() {
        let n = 4;
        let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let g = Graph::new(n, &edges).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nodes: Vec<NodeState> = (0..n)
            .map(|i| {
                let p = random_spd(&mut rng, 2, (0.5, 2.0));
                let mut s = init_node(i, p.clone(), 1.0).unwrap();
                s.q = SymMat::identity(2);
                s
            })
            .collect();
        let gw: Vec<Vec<f64>> = (0..n).map(|_| vec![0.25; n]).collect();
        let xs: Vec<DVector<f64>> = (0..n).map(|_| gaussian_vector(&mut rng, 2)).collect();
        let mut cs = vec![ConsensusState::zeros(2); n];
        let out = fuse_mean_distributed(
            &g,
            &nodes,
            &gw,
            &xs,
            &mut cs,
            &FusionOptions {
                consensus: ConsensusMode::Dynamic { inner_rounds: 200 },
                ..Default::default()
            },
        )
        .unwrap();
        let mut cs2 = vec![ConsensusState::zeros(2); n];
        let exact_opts = FusionOptions {
            consensus: ConsensusMode::ExactAverage,
            ..Default::default()
        };
        let exact = fuse_mean_distributed(&g, &nodes, &gw, &xs, &mut cs2, &exact_opts).unwrap();
        for (a, b) in out.x_hat.iter().zip(&exact.x_hat) {
            assert!((a - b).norm() <= 1e-6);
        }
        assert!(out.disagreement <= 1e-6);
    }

    #[test]
    fn literal_ratio_with_single_node() {
        let p = SymMat::from_diagonal(&[2.0, 0.5]);
        let g = Graph::new(1, &[]).unwrap();
        let mut s = init_node(0, p.clone(), 1.0).unwrap();
        s.weights = crate::simplex::WeightVector::new(vec![1.0, 0.0]).unwrap();
        let x = DVector::from_vec(vec![0.7, -0.2]);
        let mut cs = vec![ConsensusState::zeros(2)];
        let out = fuse_mean_distributed(
            &g,
            &[s],
            &[vec![1.0]],
            &[x.clone()],
            &mut cs,
            &FusionOptions {
                consensus: ConsensusMode::Dynamic { inner_rounds: 3 },
                weights: FusionWeights::LiteralRatio { epsilon_clamp: 1e-8 },
                normalization: MeanNormalization::Estimate,
            },
        )
        .unwrap();
        assert!((&out.x_hat[0] - &x).norm() < 1e-14);
        assert_eq!(out.clamp_count, 0);
    }
}
