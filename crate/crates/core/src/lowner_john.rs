//! The centralized outer Löwner-John program and the node-local step that
//! tracks it over a network.
//!
//! Centrally, `Q*` minimizes `f` over combinations `Σ λⱼ·Pⱼ⁻¹`. Locally, node
//! `i` replaces the inaccessible inputs of other nodes by its neighbors'
//! previous estimates, discounted by `θ̄ ≥ 1`:
//!
//! ```text
//! Qᵢ[k] = argmin f(Q),  Q ⪯ λ_P·Pᵢ[k]⁻¹ + (1/θ̄)·Σ_{j ∈ Nᵢ} λⱼ·Qⱼ[k−1]
//! ```
//!
//! with `Nᵢ` the closed neighborhood of `i`. Both reduce to
//! [`solve_simplex`] over the corresponding atoms.

use crate::error::{Error, Result};
use crate::objective::{AtomSet, Objective};
use crate::psd::{generalized_eigvals, inverse_spd, lambda_max, lambda_min, SymMat};
use crate::simplex::{solve_simplex, SimplexSolution, SolverConfig, WeightVector};

/// Relative slack on the convex-hull bound checked after every local step.
const HULL_BOUND_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub id: usize,
    /// Current input `Pᵢ[k]`.
    pub p: SymMat,
    /// Current estimate `Qᵢ[k]`.
    pub q: SymMat,
    /// `[λ_P, λⱼ for j ∈ Nᵢ ascending]`; all zero before the first step.
    pub weights: WeightVector,
    pub theta_bar: f64,
    /// Smallest input eigenvalue this node has measured so far.
    pub p_floor: f64,
    /// Solver diagnostics of the last step.
    pub last_iters: usize,
    pub last_converged: bool,
}

impl NodeState {
    /// `λ_P`, the weight on the node's own input.
    pub fn input_weight(&self) -> f64 {
        self.weights.as_slice().first().copied().unwrap_or(0.0)
    }

    /// `Σⱼ λⱼ`, the total weight on neighbor estimates.
    pub fn neighbor_weight(&self) -> f64 {
        self.weights.as_slice().iter().skip(1).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralSolution {
    pub q_star: SymMat,
    pub lambdas: WeightVector,
    pub f_star: f64,
    pub iters: usize,
    pub converged: bool,
}

impl CentralSolution {
    /// `‖Q* − Σ λⱼ·Pⱼ⁻¹‖_F` against freshly inverted inputs.
    pub fn fusion_residual(&self, p_list: &[SymMat]) -> Result<f64> {
        let infos = p_list.iter().map(inverse_spd).collect::<Result<Vec<_>>>()?;
        let recombined = SymMat::weighted_sum(
            self.q_star.dim(),
            self.lambdas.as_slice().iter().copied().zip(infos.iter()),
        );
        Ok((&self.q_star - &recombined).frobenius_norm())
    }
}

fn check_same_dim(mats: &[SymMat]) -> Result<usize> {
    let dim = mats
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty input list".into()))?
        .dim();
    if let Some(bad) = mats.iter().find(|m| m.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.dim(),
        });
    }
    Ok(dim)
}

/// Centralized outer Löwner-John ellipsoid of `{y : yᵀPⱼ⁻¹y ≤ 1}`, j = 1..N.
pub fn solve_central<O: Objective + ?Sized>(
    p_list: &[SymMat],
    objective: &O,
    cfg: &SolverConfig,
) -> Result<CentralSolution> {
    check_same_dim(p_list)?;
    let infos = p_list.iter().map(inverse_spd).collect::<Result<Vec<_>>>()?;
    let atoms = AtomSet::new(infos)?;
    let SimplexSolution {
        weights,
        combination,
        value,
        iters,
        converged,
        ..
    } = solve_simplex(objective, &atoms, cfg)?;
    Ok(CentralSolution {
        q_star: combination,
        lambdas: weights,
        f_star: value,
        iters,
        converged,
    })
}

/// State before the first exchange: `Qᵢ[0] = Pᵢ[0]⁻¹`, zero weights.
pub fn init_node(id: usize, p0: SymMat, theta_bar: f64) -> Result<NodeState> {
    check_theta(theta_bar)?;
    let q = inverse_spd(&p0)?;
    let p_floor = lambda_min(&p0);
    Ok(NodeState {
        id,
        p: p0,
        q,
        weights: WeightVector::zeros(1),
        theta_bar,
        p_floor,
        last_iters: 0,
        last_converged: true,
    })
}

fn check_theta(theta_bar: f64) -> Result<()> {
    if !(theta_bar >= 1.0) || !theta_bar.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "theta_bar must be a finite value >= 1, got {theta_bar}"
        )));
    }
    Ok(())
}

/// One round of the distributed program at a single node.
///
/// `neighbor_qs` holds `Qⱼ[k−1]` for every `j` in the closed neighborhood
/// (the node itself included), ordered by ascending node id.
pub fn local_step<O: Objective + ?Sized>(
    state: &NodeState,
    neighbor_qs: &[SymMat],
    p_new: SymMat,
    objective: &O,
    cfg: &SolverConfig,
) -> Result<NodeState> {
    check_theta(state.theta_bar)?;
    if neighbor_qs.is_empty() {
        return Err(Error::InvalidArgument(
            "closed neighborhood must contain the node itself".into(),
        ));
    }
    let discount = 1.0 / state.theta_bar;
    let mut atoms = Vec::with_capacity(neighbor_qs.len() + 1);
    atoms.push(inverse_spd(&p_new)?);
    atoms.extend(neighbor_qs.iter().map(|q| q.scale(discount)));
    check_same_dim(&atoms)?;
    let atoms = AtomSet::new(atoms)?;

    let sol = solve_simplex(objective, &atoms, cfg)?;

    let hull_bound = atoms.atoms().iter().map(lambda_max).fold(f64::MIN, f64::max);
    let q_max = lambda_max(&sol.combination);
    if q_max > hull_bound * (1.0 + HULL_BOUND_RTOL) + 1e-12 {
        return Err(Error::BoundednessViolation {
            node: state.id,
            lambda_max: q_max,
            bound: hull_bound,
        });
    }

    let p_floor = state.p_floor.min(lambda_min(&p_new));
    Ok(NodeState {
        id: state.id,
        p: p_new,
        q: sol.combination,
        weights: sol.weights,
        theta_bar: state.theta_bar,
        p_floor,
        last_iters: sol.iters,
        last_converged: sol.converged,
    })
}

/// Scalar discount from the input change rate: `max(1, κ·λ_max(P_prev·P_new⁻¹))`.
///
/// The eigenvalues of `P_prev·P_new⁻¹` are computed on the similar symmetric
/// pencil `L⁻¹·P_prev·L⁻ᵀ`, `P_new = L·Lᵀ`.
pub fn adaptive_theta(p_prev: &SymMat, p_new: &SymMat, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidArgument(format!("kappa must be > 0, got {kappa}")));
    }
    inverse_spd(p_prev)?;
    let rate = *generalized_eigvals(p_prev, p_new)?.last().expect("dim >= 1");
    Ok((kappa * rate).max(1.0))
}

/// Weights `wⁱ` over all `N` inputs with `Qᵢ[0] = Pᵢ[0]⁻¹`, i.e. the unit vector `eᵢ`.
pub fn initial_global_weights(id: usize, n_nodes: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_nodes];
    w[id] = 1.0;
    w
}

/// Carries the network-wide weights through one local step:
/// `wⁱ[k] = λ_P·eᵢ + (1/θ̄)·Σ_{j ∈ Nᵢ} λⱼ·wʲ[k−1]`.
///
/// For static inputs `Qᵢ[k] = Σₗ wⁱₗ[k]·Pₗ⁻¹` holds exactly, so at
/// equilibrium `wⁱ` recovers the central weights. `neighbor_w` follows the
/// closed-neighborhood order used in [`local_step`].
pub fn propagate_global_weights(state: &NodeState, neighbor_w: &[&[f64]]) -> Result<Vec<f64>> {
    let lam = state.weights.as_slice();
    if lam.len() != neighbor_w.len() + 1 {
        return Err(Error::DimensionMismatch {
            expected: lam.len().saturating_sub(1),
            got: neighbor_w.len(),
        });
    }
    let n = neighbor_w.first().map_or(state.id + 1, |w| w.len());
    if state.id >= n || neighbor_w.iter().any(|w| w.len() != n) {
        return Err(Error::InvalidArgument("global weight vectors have inconsistent length".into()));
    }
    let mut out = vec![0.0; n];
    out[state.id] = lam[0];
    for (l, w) in lam[1..].iter().zip(neighbor_w) {
        let c = l / state.theta_bar;
        for (o, x) in out.iter_mut().zip(w.iter()) {
            *o += c * x;
        }
    }
    Ok(out)
}

/// How each node picks its discount `θ̄` at every round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThetaMode {
    Fixed(f64),
    /// [`adaptive_theta`] on the node's own consecutive inputs.
    Adaptive { kappa: f64 },
}

impl ThetaMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThetaMode::Fixed(t) => check_theta(t),
            ThetaMode::Adaptive { kappa } if kappa > 0.0 && kappa.is_finite() => Ok(()),
            ThetaMode::Adaptive { kappa } => Err(Error::InvalidArgument(format!(
                "kappa must be a finite value > 0, got {kappa}"
            ))),
        }
    }

    /// Discount used at the step that moves the input from `p_prev` to `p_new`.
    pub fn theta(&self, p_prev: &SymMat, p_new: &SymMat) -> Result<f64> {
        match *self {
            ThetaMode::Fixed(t) => Ok(t),
            ThetaMode::Adaptive { kappa } => adaptive_theta(p_prev, p_new, kappa),
        }
    }

    /// Value stored in freshly initialized nodes.
    pub fn initial(&self) -> f64 {
        match *self {
            ThetaMode::Fixed(t) => t,
            ThetaMode::Adaptive { .. } => 1.0,
        }
    }
}

/// Smallest `θ` with `P_new ⪯ θ·P_prev`, i.e. `λ_max(P_new·P_prev⁻¹)`.
///
/// A constant `θ̄` at least this large at every step keeps each local
/// feasible set inside the global one.
pub fn input_growth_rate(p_prev: &SymMat, p_new: &SymMat) -> Result<f64> {
    inverse_spd(p_new)?;
    Ok(*generalized_eigvals(p_new, p_prev)?.last().expect("dim >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{eval_f, ObjectiveKind};
    use crate::simplex::brute_force_simplex;

    fn printed_info() -> Vec<SymMat> {
        [
            [4.6, -3.8, -3.8, 4.2],
            [1.5, -0.2, -0.2, 2.0],
            [9.5, 0.4, 0.4, 2.3],
            [2.8, -2.2, -2.2, 4.5],
            [11.0, 7.9, 7.9, 6.7],
            [11.5, -3.9, -3.9, 3.1],
        ]
        .iter()
        .map(|r| SymMat::from_row_slice(2, r).unwrap())
        .collect()
    }

    fn printed_inputs() -> Vec<SymMat> {
        printed_info().iter().map(|m| inverse_spd(m).unwrap()).collect()
    }

    const NLD: ObjectiveKind = ObjectiveKind::NegLogDet;

    #[test]
    fn central_single_input() {
        let p = printed_inputs()[0].clone();
        let sol = solve_central(&[p.clone()], &NLD, &SolverConfig::default()).unwrap();
        assert_eq!(sol.lambdas.as_slice(), &[1.0]);
        assert!((&sol.q_star - &inverse_spd(&p).unwrap()).max_abs() < 1e-15);
    }

    #[test]
    fn central_nested_ellipsoids() {
        // P₁⁻¹ = 2I ⪰ P₂⁻¹ = I: the first ellipsoid is inside the second.
        let p1 = SymMat::identity(2).scale(0.5);
        let p2 = SymMat::identity(2);
        let sol = solve_central(&[p1, p2], &NLD, &SolverConfig::default()).unwrap();
        assert_eq!(sol.lambdas.as_slice(), &[1.0, 0.0]);
        assert!((&sol.q_star - &SymMat::identity(2).scale(2.0)).max_abs() < 1e-14);
    }

    #[test]
    fn central_first_three_printed_matrices_match_grid() {
        let infos = printed_info();
        let inputs = printed_inputs();
        let sol = solve_central(&inputs[..3], &NLD, &SolverConfig::default()).unwrap();
        let bf = brute_force_simplex(&NLD, &AtomSet::new(infos[..3].to_vec()).unwrap(), 0.01).unwrap();
        assert!((sol.f_star - bf.value).abs() <= 1e-3);
        assert!(sol.f_star <= bf.value + 1e-12);
    }

    #[test]
    fn central_six_printed_matrices_satisfy_kkt() {
        let infos = printed_info();
        let sol = solve_central(&printed_inputs(), &NLD, &SolverConfig::default()).unwrap();
        assert!(sol.converged);
        // KKT on the simplex: every gradient component is ≥ the common value
        // shared by the active atoms.
        let qinv = inverse_spd(&sol.q_star).unwrap();
        let grad: Vec<f64> = infos.iter().map(|a| -qinv.as_matrix().dot(a.as_matrix())).collect();
        let active: Vec<usize> = (0..6).filter(|&l| sol.lambdas.as_slice()[l] > 1e-9).collect();
        let common = active.iter().map(|&l| grad[l]).fold(f64::INFINITY, f64::min);
        for &l in &active {
            assert!((grad[l] - common).abs() <= 1e-6, "{grad:?}");
        }
        for g in &grad {
            assert!(*g >= common - 1e-6, "{grad:?}");
        }
        assert!(sol.fusion_residual(&printed_inputs()).unwrap() <= 1e-8);
    }

    #[test]
    fn init_node_examples() {
        let s = init_node(0, SymMat::identity(2), 1.0).unwrap();
        assert_eq!(s.q, SymMat::identity(2));
        assert_eq!(s.weights.as_slice(), &[0.0]);
        let s = init_node(0, SymMat::from_diagonal(&[2.0, 4.0]), 1.0).unwrap();
        assert!((&s.q - &SymMat::from_diagonal(&[0.5, 0.25])).max_abs() < 1e-15);
        let s = init_node(0, printed_inputs()[0].clone(), 1.0).unwrap();
        assert!((&s.q - &printed_info()[0]).max_abs() < 1e-12);
        assert!(init_node(0, SymMat::identity(2), 0.5).is_err());
        assert!(matches!(
            init_node(0, SymMat::from_diagonal(&[1.0, -1.0]), 1.0),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn isolated_node_is_a_fixed_point() {
        let p = printed_inputs()[2].clone();
        let s0 = init_node(0, p.clone(), 1.0).unwrap();
        let s1 = local_step(&s0, &[s0.q.clone()], p, &NLD, &SolverConfig::default()).unwrap();
        assert!((&s1.q - &s0.q).max_abs() < 1e-14);
        assert_eq!(s1.weights.len(), 2);
        assert!((s1.weights.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn central_optimum_is_an_equilibrium() {
        let inputs = printed_inputs();
        let central = solve_central(&inputs, &NLD, &SolverConfig::default()).unwrap();
        for (i, p) in inputs.iter().enumerate() {
            let mut s = init_node(i, p.clone(), 1.0).unwrap();
            s.q = central.q_star.clone();
            let nbrs = vec![central.q_star.clone(); 3];
            let s1 = local_step(&s, &nbrs, p.clone(), &NLD, &SolverConfig::default()).unwrap();
            assert!((&s1.q - &central.q_star).max_abs() <= 1e-7, "node {i}");
        }
    }

    #[test]
    fn first_step_of_node_one_descends() {
        let inputs = printed_inputs();
        // Node 1 has closed neighborhood {1, 2, 3, 5}.
        let s0 = init_node(0, inputs[0].clone(), 1.0).unwrap();
        let nbrs: Vec<SymMat> = [0, 1, 2, 4].iter().map(|&j| inverse_spd(&inputs[j]).unwrap()).collect();
        let s1 = local_step(&s0, &nbrs, inputs[0].clone(), &NLD, &SolverConfig::default()).unwrap();
        let f0 = eval_f(NLD, &s0.q).unwrap();
        let f1 = eval_f(NLD, &s1.q).unwrap();
        assert!(f1 <= f0, "{f1} > {f0}");
        assert!(f1 < f0 - 1e-3);
        // The returned Q is exactly the reported combination.
        let mut atoms = vec![inverse_spd(&inputs[0]).unwrap()];
        atoms.extend(nbrs.iter().cloned());
        let rec = AtomSet::new(atoms).unwrap().combine(s1.weights.as_slice());
        assert!((&rec - &s1.q).max_abs() <= 1e-12);
        assert!((s1.input_weight() + s1.neighbor_weight() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn adaptive_theta_examples() {
        let p = printed_inputs()[1].clone();
        assert!((adaptive_theta(&p, &p, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let i2 = SymMat::identity(2);
        assert!((adaptive_theta(&i2.scale(2.0), &i2, 1.0).unwrap() - 2.0).abs() < 1e-14);
        // Clamped below at one when inputs grow.
        assert_eq!(adaptive_theta(&i2, &i2.scale(2.0), 1.0).unwrap(), 1.0);
        assert!(adaptive_theta(&i2, &i2, 0.0).is_err());
        assert!((input_growth_rate(&i2, &i2.scale(2.0)).unwrap() - 2.0).abs() < 1e-14);
    }
}
