//! Minimization of a combo-objective `λ ↦ f(Σ λₗ·Aₗ)` over the probability
//! simplex, plus an exhaustive lattice search used as a test oracle.
//!
//! Both outer-ellipsoid programs ask for the smallest-`f` matrix `Q` with
//! `Q ⪯ Σ λₗ·Aₗ`, `λ ≥ 0`, `Σ λₗ ≤ 1`. Since `f` decreases in the Löwner
//! order, the optimum takes `Q = Σ λₗ·Aₗ` exactly. Since `f(c·M)` is strictly
//! decreasing in `c > 0` (`f(cM) = f(M) − n·log c` for the log-determinant,
//! `f(M)/c` for the trace of the inverse), the budget `Σ λₗ ≤ 1` is always
//! saturated. What remains is a smooth convex problem over the simplex
//! `{λ ≥ 0, Σ λₗ = 1}`.
//!
//! The solver is Frank-Wolfe with away steps. The linear minimization oracle
//! over the simplex is a coordinate argmin of the gradient (lowest index on
//! ties), iterates stay feasible without projection, and the Frank-Wolfe gap
//! `⟨∇, λ − e_s⟩` certifies `f(λ) − f* ≤ gap`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{combo_value_grad, AtomSet, Objective};
use crate::psd::SymMat;

/// Sum slack accepted by [`WeightVector::new`].
pub const WEIGHT_SUM_SLACK: f64 = 1e-10;

/// Atoms closer than this (relative Frobenius distance) are merged before solving.
const DUPLICATE_RTOL: f64 = 1e-13;

const MAX_STEP_CUTS: usize = 60;
const SECANT_ITERS: usize = 8;

/// Nonnegative weights with total mass at most one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("negative or non-finite weight {w}")));
        }
        let s: f64 = weights.iter().sum();
        if s > 1.0 + WEIGHT_SUM_SLACK {
            return Err(Error::InvalidArgument(format!("weights sum to {s} > 1")));
        }
        Ok(Self(weights))
    }

    pub fn zeros(m: usize) -> Self {
        Self(vec![0.0; m])
    }

    pub fn vertex(m: usize, l: usize) -> Self {
        let mut w = vec![0.0; m];
        w[l] = 1.0;
        Self(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        WeightVector::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Frank-Wolfe duality gap threshold.
    pub gap_tol: f64,
    /// Step contraction factor when a trial step leaves the PD region.
    pub line_search_shrink: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            gap_tol: 1e-9,
            line_search_shrink: 0.5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be positive".into()));
        }
        if !(self.gap_tol > 0.0) {
            return Err(Error::InvalidArgument("gap_tol must be > 0".into()));
        }
        if !(self.line_search_shrink > 0.0 && self.line_search_shrink < 1.0) {
            return Err(Error::InvalidArgument("line_search_shrink must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexSolution {
    /// Optimal weights, one per input atom (duplicates get zero weight).
    pub weights: WeightVector,
    /// `Σ λₗ·Aₗ` at the returned weights.
    pub combination: SymMat,
    pub value: f64,
    pub iters: usize,
    /// Frank-Wolfe gap at the returned weights.
    pub gap: f64,
    /// False when `max_iters` was hit or the line search stalled.
    pub converged: bool,
}

/// Groups atoms that are numerically identical; returns the representative
/// index of each atom and the list of representatives.
fn dedup_atoms(atoms: &AtomSet) -> (Vec<usize>, Vec<usize>) {
    let mut reps: Vec<usize> = Vec::new();
    let mut rep_of = Vec::with_capacity(atoms.len());
    for (l, a) in atoms.atoms().iter().enumerate() {
        let scale = 1.0 + a.frobenius_norm();
        let found = reps
            .iter()
            .position(|&r| (atoms.get(r) - a).frobenius_norm() <= DUPLICATE_RTOL * scale);
        match found {
            Some(pos) => rep_of.push(pos),
            None => {
                rep_of.push(reps.len());
                reps.push(l);
            }
        }
    }
    (rep_of, reps)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f(Σ λₗ·Aₗ)` over the probability simplex.
pub fn solve_simplex<O: Objective + ?Sized>(
    objective: &O,
    atoms: &AtomSet,
    cfg: &SolverConfig,
) -> Result<SimplexSolution> {
    cfg.validate()?;
    let (rep_of, reps) = dedup_atoms(atoms);
    let reduced = if reps.len() == atoms.len() {
        atoms.clone()
    } else {
        AtomSet::new(reps.iter().map(|&r| atoms.get(r).clone()).collect())?
    };
    let m = reduced.len();

    let (x, iters, gap, converged) = if m == 1 {
        (vec![1.0], 0, 0.0, true)
    } else {
        away_step_frank_wolfe(objective, &reduced, cfg)?
    };

    let mut full = vec![0.0; atoms.len()];
    for (pos, &r) in reps.iter().enumerate() {
        full[r] = x[pos];
    }
    debug_assert!(rep_of.iter().all(|&p| p < m));
    let combination = atoms.combine(&full);
    let value = objective.value(&combination)?;
    Ok(SimplexSolution {
        weights: WeightVector::new(full)?,
        combination,
        value,
        iters,
        gap,
        converged,
    })
}

fn away_step_frank_wolfe<O: Objective + ?Sized>(
    objective: &O,
    atoms: &AtomSet,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, usize, f64, bool)> {
    let m = atoms.len();
    let mut x = vec![1.0 / m as f64; m];
    let (mut f, mut g) = combo_value_grad(objective, atoms, &x)?;
    // Running curvature estimate for the first trial step.
    let mut curvature: f64 = 0.0;

    for it in 0..cfg.max_iters {
        let gx = dot(&g, &x);
        let s = argmin_index(&g, |_| true);
        let gap = gx - g[s];
        if gap <= cfg.gap_tol {
            return Ok((x, it, gap.max(0.0), true));
        }
        let v = argmax_index(&g, |l| x[l] > 0.0);
        let away_gap = g[v] - gx;

        let is_fw = gap >= away_gap || x[v] >= 1.0;
        let (d, gamma_max) = if is_fw {
            let mut d: Vec<f64> = x.iter().map(|xi| -xi).collect();
            d[s] += 1.0;
            (d, 1.0)
        } else {
            let mut d = x.clone();
            d[v] -= 1.0;
            (d, x[v] / (1.0 - x[v]))
        };
        let slope = dot(&g, &d);
        debug_assert!(slope < 0.0);
        let d2 = dot(&d, &d);

        let mut gamma = if curvature > 0.0 {
            (-slope / (curvature * d2)).min(gamma_max)
        } else {
            gamma_max
        };

        let step = line_search(objective, atoms, &x, &d, f, slope, gamma, gamma_max, cfg)?;
        let Some(Probe { gamma: new_gamma, f: new_f, grad: new_g, .. }) = step else {
            return Ok((x, it, gap, false));
        };
        gamma = new_gamma;

        assert!(
            new_f <= f + 1e-12 * (1.0 + f.abs()),
            "Frank-Wolfe iterate increased the objective: {f} -> {new_f}"
        );

        if gamma >= gamma_max {
            // Full step: land exactly on the vertex / drop the away atom.
            if is_fw {
                x.iter_mut().for_each(|xi| *xi = 0.0);
                x[s] = 1.0;
            } else {
                for (xi, di) in x.iter_mut().zip(&d) {
                    *xi += gamma_max * di;
                }
                x[v] = 0.0;
            }
        } else {
            for (xi, di) in x.iter_mut().zip(&d) {
                *xi += gamma * di;
            }
        }
        for xi in x.iter_mut() {
            if *xi < 0.0 {
                *xi = 0.0;
            }
        }
        let total: f64 = x.iter().sum();
        x.iter_mut().for_each(|xi| *xi /= total);

        curvature = -slope / (gamma.max(f64::MIN_POSITIVE) * d2);
        f = new_f;
        g = new_g;
        if gamma >= gamma_max {
            // Recompute at the snapped point.
            let (f2, g2) = combo_value_grad(objective, atoms, &x)?;
            f = f2;
            g = g2;
        }
    }
    let gx = dot(&g, &x);
    let s = argmin_index(&g, |_| true);
    let gap = gx - g[s];
    Ok((x, cfg.max_iters, gap, gap <= cfg.gap_tol))
}

/// Finds a decreasing step along `d` in `(0, γ_max]`.
///
/// The trial step is shrunk until the combination is positive definite, then
/// refined toward the root of the directional derivative `φ'(γ) = ⟨∇f, d⟩`
/// by Illinois regula falsi. Working on `φ'` instead of `φ` keeps the search
/// accurate when objective differences are at rounding level. Returns `None`
/// when no decreasing step exists numerically.
#[allow(clippy::too_many_arguments)]
fn line_search<O: Objective + ?Sized>(
    objective: &O,
    atoms: &AtomSet,
    x: &[f64],
    d: &[f64],
    f0: f64,
    slope0: f64,
    mut gamma: f64,
    gamma_max: f64,
    cfg: &SolverConfig,
) -> Result<Option<Probe>> {
    let eval = |gamma: f64| -> Option<Probe> {
        let y: Vec<f64> = x.iter().zip(d).map(|(xi, di)| (xi + gamma * di).max(0.0)).collect();
        combo_value_grad(objective, atoms, &y)
            .ok()
            .map(|(f, g)| Probe { gamma, f, slope: dot(&g, d), grad: g })
    };

    let mut trial = None;
    for _ in 0..MAX_STEP_CUTS {
        if let Some(p) = eval(gamma) {
            trial = Some(p);
            break;
        }
        gamma *= cfg.line_search_shrink;
    }
    let Some(mut hi) = trial else {
        return Ok(None);
    };

    let mut lo_gamma = 0.0;
    let mut lo_slope = slope0;
    let mut best: Option<Probe> = None;
    if hi.slope <= 0.0 {
        if hi.gamma >= gamma_max {
            return Ok(Some(hi));
        }
        // φ still decreasing: try the largest admissible step.
        match eval(gamma_max) {
            Some(p) if p.slope <= 0.0 => return Ok(Some(p)),
            Some(p) => {
                lo_gamma = hi.gamma;
                lo_slope = hi.slope;
                best = Some(hi);
                hi = p;
            }
            None => return Ok(Some(hi)),
        }
    }

    let mut hi_gamma = hi.gamma;
    let mut hi_slope = hi.slope;
    if best.as_ref().is_none_or(|b| hi.f < b.f) {
        best = Some(hi);
    }
    let mut side = 0i8;
    for _ in 0..SECANT_ITERS {
        let c = hi_gamma - hi_slope * (hi_gamma - lo_gamma) / (hi_slope - lo_slope);
        if !(c > lo_gamma && c < hi_gamma) {
            break;
        }
        let Some(p) = eval(c) else { break };
        let sc = p.slope;
        let done = sc.abs() <= 1e-6 * slope0.abs();
        if best.as_ref().is_none_or(|b| p.f < b.f) {
            best = Some(p);
        }
        if done {
            break;
        }
        if sc < 0.0 {
            lo_gamma = c;
            lo_slope = sc;
            if side == -1 {
                hi_slope *= 0.5;
            }
            side = -1;
        } else {
            hi_gamma = c;
            hi_slope = sc;
            if side == 1 {
                lo_slope *= 0.5;
            }
            side = 1;
        }
    }
    match best {
        Some(b) if b.f <= f0 => Ok(Some(b)),
        _ => {
            let mut gamma = hi_gamma;
            for _ in 0..MAX_STEP_CUTS {
                gamma *= cfg.line_search_shrink;
                if let Some(p) = eval(gamma) {
                    if p.f <= f0 {
                        return Ok(Some(p));
                    }
                }
            }
            Ok(None)
        }
    }
}

struct Probe {
    gamma: f64,
    f: f64,
    slope: f64,
    grad: Vec<f64>,
}

fn argmin_index(g: &[f64], admissible: impl Fn(usize) -> bool) -> usize {
    let mut best = usize::MAX;
    for (l, &v) in g.iter().enumerate() {
        if admissible(l) && (best == usize::MAX || v < g[best]) {
            best = l;
        }
    }
    best
}

fn argmax_index(g: &[f64], admissible: impl Fn(usize) -> bool) -> usize {
    let mut best = usize::MAX;
    for (l, &v) in g.iter().enumerate() {
        if admissible(l) && (best == usize::MAX || v > g[best]) {
            best = l;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub weights: WeightVector,
    pub value: f64,
    /// Largest absolute gradient component at the returned lattice point.
    pub grad_bound: f64,
    pub points_evaluated: usize,
}

/// Upper bound on the number of lattice points [`brute_force_simplex`] visits.
pub const MAX_GRID_POINTS: f64 = 1e8;

/// Exhaustive search over the simplex lattice `{λ : λₗ ∈ step·ℕ, Σ λₗ = 1}`.
///
/// Points where the combination is singular are skipped. The minimum over
/// the simplex lies below the returned value by at most roughly
/// `grad_bound · grid_step · √m`.
pub fn brute_force_simplex<O: Objective + ?Sized>(
    objective: &O,
    atoms: &AtomSet,
    grid_step: f64,
) -> Result<BruteForceResult> {
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::InvalidArgument(format!("grid_step must lie in (0, 1], got {grid_step}")));
    }
    let m = atoms.len();
    let divisions = (1.0 / grid_step + 1e-9).floor() as usize;
    let points = lattice_size(divisions, m);
    if points > MAX_GRID_POINTS {
        return Err(Error::GridTooLarge { points });
    }

    let mut counts = vec![0usize; m];
    let mut best: Option<(Vec<f64>, f64, Vec<f64>)> = None;
    let mut evaluated = 0usize;
    let mut weights = vec![0.0; m];
    visit_compositions(&mut counts, 0, divisions, &mut |c| {
        for (w, &ci) in weights.iter_mut().zip(c) {
            *w = ci as f64 / divisions as f64;
        }
        evaluated += 1;
        if let Ok((v, g)) = combo_value_grad(objective, atoms, &weights) {
            if best.as_ref().is_none_or(|b| v < b.1) {
                best = Some((weights.clone(), v, g));
            }
        }
    });
    let (w, value, g) = best.ok_or(Error::InfeasibleAtoms)?;
    Ok(BruteForceResult {
        weights: WeightVector::new(w)?,
        value,
        grad_bound: g.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())),
        points_evaluated: evaluated,
    })
}

/// Number of compositions of `divisions` into `m` nonnegative parts,
/// `C(divisions + m − 1, m − 1)`, as a float to avoid overflow.
fn lattice_size(divisions: usize, m: usize) -> f64 {
    let mut c = 1.0_f64;
    for j in 1..m {
        c *= (divisions + j) as f64 / j as f64;
    }
    c.round()
}

fn visit_compositions(counts: &mut [usize], pos: usize, remaining: usize, f: &mut impl FnMut(&[usize])) {
    if pos + 1 == counts.len() {
        counts[pos] = remaining;
        f(counts);
        return;
    }
    for c in (0..=remaining).rev() {
        counts[pos] = c;
        visit_compositions(counts, pos + 1, remaining - c, f);
    }
}
