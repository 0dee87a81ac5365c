//! Ellipsoid-size objectives and their gradients along simplex combinations
//! `M(λ) = Σ λₗ·Aₗ` of positive semidefinite atoms.
//!
//! Any objective that is smooth, strictly convex, unbounded below on the PSD
//! cone and bounded on compact convex subsets fits the solvers in this crate.
//! Implement [`Objective`] to supply a new one; [`ObjectiveKind`] covers the
//! two standard choices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::psd::{cholesky, inverse_spd, is_psd, lambda_min, log_det_spd, PsdTolerance, SymMat};

/// Combinations whose smallest eigenvalue falls below this are rejected.
pub const SINGULAR_EIG_FLOOR: f64 = 1e-12;

/// A matrix objective `f(Q)` together with its matrix gradient `∇f(Q)`.
pub trait Objective {
    fn value(&self, q: &SymMat) -> Result<f64>;

    /// Gradient with respect to `Q` under the trace inner product.
    fn matrix_gradient(&self, q: &SymMat) -> Result<SymMat>;

    /// Value and gradient together; override when they share work.
    fn value_and_matrix_gradient(&self, q: &SymMat) -> Result<(f64, SymMat)> {
        Ok((self.value(q)?, self.matrix_gradient(q)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// `−log det Q`, i.e. the log-volume of the ellipsoid `{y : yᵀQy ≤ 1}` up to a constant.
    NegLogDet,
    /// `tr(Q⁻¹)`, the sum of squared semi-axes.
    TraceInverse,
}

impl Objective for ObjectiveKind {
    fn value(&self, q: &SymMat) -> Result<f64> {
        eval_f(*self, q)
    }

    fn matrix_gradient(&self, q: &SymMat) -> Result<SymMat> {
        Ok(self.value_and_matrix_gradient(q)?.1)
    }

    fn value_and_matrix_gradient(&self, q: &SymMat) -> Result<(f64, SymMat)> {
        let inv = inverse_spd(q)?;
        match self {
            ObjectiveKind::NegLogDet => Ok((-log_det_spd(q)?, inv.scale(-1.0))),
            ObjectiveKind::TraceInverse => {
                let inv2 = SymMat::symmetrize(inv.as_matrix() * inv.as_matrix());
                Ok((inv.trace(), inv2.scale(-1.0)))
            }
        }
    }
}

pub fn eval_f(kind: ObjectiveKind, q: &SymMat) -> Result<f64> {
    match kind {
        ObjectiveKind::NegLogDet => Ok(-log_det_spd(q)?),
        ObjectiveKind::TraceInverse => Ok(inverse_spd(q)?.trace()),
    }
}

/// Ordered list of PSD atoms of a common dimension, at least one of them
/// positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomSet {
    atoms: Vec<SymMat>,
}

impl AtomSet {
    pub fn new(atoms: Vec<SymMat>) -> Result<Self> {
        Self::with_tolerance(atoms, PsdTolerance::default())
    }

    pub fn with_tolerance(atoms: Vec<SymMat>, tol: PsdTolerance) -> Result<Self> {
        let first = atoms
            .first()
            .ok_or_else(|| Error::InvalidAtoms("atom set is empty".into()))?;
        let dim = first.dim();
        for (l, a) in atoms.iter().enumerate() {
            if a.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: a.dim(),
                });
            }
            if !is_psd(a, tol) {
                return Err(Error::InvalidAtoms(format!("atom {l} is not PSD")));
            }
        }
        let any_pd = atoms
            .iter()
            .any(|a| cholesky(a).is_ok() && lambda_min(a) >= SINGULAR_EIG_FLOOR);
        if !any_pd {
            return Err(Error::InfeasibleAtoms);
        }
        Ok(Self { atoms })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].dim()
    }

    pub fn atoms(&self) -> &[SymMat] {
        &self.atoms
    }

    pub fn get(&self, l: usize) -> &SymMat {
        &self.atoms[l]
    }

    /// `M(λ) = Σ λₗ·Aₗ`.
    pub fn combine(&self, weights: &[f64]) -> SymMat {
        debug_assert_eq!(weights.len(), self.len());
        SymMat::weighted_sum(self.dim(), weights.iter().copied().zip(self.atoms.iter()))
    }
}

/// Objective value at `M(λ)` and its gradient in `λ`, whose l-th component
/// is `⟨∇f(M(λ)), Aₗ⟩`.
pub fn combo_value_grad<O: Objective + ?Sized>(
    objective: &O,
    atoms: &AtomSet,
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if weights.len() != atoms.len() {
        return Err(Error::DimensionMismatch {
            expected: atoms.len(),
            got: weights.len(),
        });
    }
    let m = atoms.combine(weights);
    let min_eig = lambda_min(&m);
    if !(min_eig >= SINGULAR_EIG_FLOOR) {
        return Err(Error::SingularCombination { min_eig });
    }
    let (value, g) = objective
        .value_and_matrix_gradient(&m)
        .map_err(|_| Error::SingularCombination { min_eig })?;
    let grad = atoms
        .atoms()
        .iter()
        .map(|a| g.as_matrix().dot(a.as_matrix()))
        .collect();
    Ok((value, grad))
}

/// Objective value only, at `M(λ)`.
pub fn combo_value<O: Objective + ?Sized>(
    objective: &O,
    atoms: &AtomSet,
    weights: &[f64],
) -> Result<f64> {
    let m = atoms.combine(weights);
    let min_eig = lambda_min(&m);
    if !(min_eig >= SINGULAR_EIG_FLOOR) {
        return Err(Error::SingularCombination { min_eig });
    }
    objective
        .value(&m)
        .map_err(|_| Error::SingularCombination { min_eig })
}
