//! State-weight elimination and the terminal-penalty Riccati family.
//!
//! The transform solves the linear matrix ODE
//!
//! ```text
//! Φ̇ + Φ A + Aᵀ Φ + Q = 0,    Φ(0) = −G,
//! ```
//!
//! and folds Φ into the quadratic weights,
//!
//! ```text
//! N₁^Φ = N₁ + Φ,   N₂^Φ = N₂ + Φ,
//! S₁^Φ = S₁ + C₁ᵀΦ,   S₂^Φ = S₂ + C₂ᵀΦ,   S₃^Φ = S₃ + BᵀΦ,
//! ```
//!
//! after which the problem carries no initial-state and no running-state
//! cost (G = 0, Q = 0) and the original value is recovered by subtracting
//! E⟨Φ(T)ξ, ξ⟩. All downstream solvers operate on the transformed weights.
//!
//! For each terminal penalty λ > 0 the associated forward problem yields a
//! Lyapunov equation and a Riccati equation, both solved backward from λI:
//!
//! ```text
//! Ṗ₁ + P₁A + AᵀP₁ + Q = 0,
//! Ṗ₂ + P₂A + AᵀP₂ + Q − Σᵢ blockᵢᵀ Wᵢ⁻¹ blockᵢ = 0,
//!     block₁ = C₁ᵀP₂ + S₁,  W₁ = N₁ + P₁,
//!     block₂ = C₂ᵀP₂ + S₂,  W₂ = N₂ + P₂,
//!     block₃ = BᵀP₂  + S₃,  W₃ = R.
//! ```
//!
//! The Riccati solve aborts with a diagnostic as soon as diag(W₁, W₂, W₃)
//! loses uniform positivity — the operational signal that λ is below the
//! admissible range. Admissibility is established by sweeping λ upward, not
//! from an a-priori constant. For admissible λ the solutions are positive
//! and increase in λ, and P₂λ⁻¹ converges to the decoupling kernel as λ
//! grows, which the `gamma` module uses as an independent cross-check.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{LqProblem, SampledCoefficients, SampledWeights, TerminalCondition, TimeGrid};
use crate::ode::{rk4_stacked, Direction, MatrixPath, StackedOde};

/// Default internal RK4 stages per grid cell.
pub const DEFAULT_SUBSTEPS: usize = 4;

/// Default lower bound on the smallest eigenvalue of the block weight matrix
/// before a λ-solve is declared inadmissible.
pub const DEFAULT_POSITIVITY_FLOOR: f64 = 1e-8;

/// A problem with the initial-state and running-state costs eliminated.
///
/// The transformed weight paths satisfy `n1(t_k) = N₁(t_k) + Φ(t_k)` (and so
/// on) exactly at every node. The running weight `q` is identically zero
/// after a genuine transform; it is retained so the same solvers can run
/// untransformed instances (see [`untransformed_view`]).
#[derive(Debug, Clone)]
pub struct TransformedProblem {
    pub base: LqProblem,
    pub substeps: usize,
    pub phi: MatrixPath,
    pub n1: MatrixPath,
    pub n2: MatrixPath,
    pub s1: MatrixPath,
    pub s2: MatrixPath,
    pub s3: MatrixPath,
    pub r: MatrixPath,
    pub q: MatrixPath,
    pub coeff: SampledCoefficients,
    pub(crate) base_weights: SampledWeights,
    pub(crate) phi_active: bool,
}

impl TransformedProblem {
    pub fn grid(&self) -> &TimeGrid {
        &self.base.grid
    }

    pub fn n(&self) -> usize {
        self.base.dims.n
    }

    pub fn m(&self) -> usize {
        self.base.dims.m
    }

    /// E⟨Φ(T)ξ, ξ⟩ in closed form; `None` for sampled terminal data, which
    /// needs a Monte-Carlo evaluation on an ensemble.
    pub fn terminal_correction_exact(&self) -> Option<f64> {
        let phi_t = self.phi.last();
        match &self.base.terminal {
            TerminalCondition::Deterministic(c) => Some((phi_t * c).dot(c)),
            TerminalCondition::AffineInTerminalBm { c, b1, b2 } => {
                let t = self.base.grid.horizon();
                Some((phi_t * c).dot(c) + t * ((phi_t * b1).dot(b1) + (phi_t * b2).dot(b2)))
            }
            TerminalCondition::SampledFunctional(_) => None,
        }
    }

    /// Transformed weights at a stage inside grid cell `cell`, given the
    /// co-integrated Φ stage value. Base weights are read at the cell's left
    /// endpoint.
    pub(crate) fn stage_weights(&self, cell: usize, phi: &DMatrix<f64>) -> StageWeights {
        let w = &self.base_weights;
        if !self.phi_active {
            return StageWeights {
                n1: w.n1[cell].clone(),
                n2: w.n2[cell].clone(),
                s1: w.s1[cell].clone(),
                s2: w.s2[cell].clone(),
                s3: w.s3[cell].clone(),
            };
        }
        StageWeights {
            n1: &w.n1[cell] + phi,
            n2: &w.n2[cell] + phi,
            s1: &w.s1[cell] + self.coeff.c1[cell].transpose() * phi,
            s2: &w.s2[cell] + self.coeff.c2[cell].transpose() * phi,
            s3: &w.s3[cell] + self.coeff.b[cell].transpose() * phi,
        }
    }

    /// Right-hand side of the co-integrated Φ block (zero for an
    /// untransformed view, whose Φ stays identically zero).
    pub(crate) fn phi_rhs(&self, cell: usize, phi: &DMatrix<f64>) -> DMatrix<f64> {
        if !self.phi_active {
            return DMatrix::zeros(self.n(), self.n());
        }
        let a = &self.coeff.a[cell];
        -(phi * a + a.transpose() * phi + &self.base_weights.q[cell])
    }
}

pub(crate) struct StageWeights {
    pub n1: DMatrix<f64>,
    pub n2: DMatrix<f64>,
    pub s1: DMatrix<f64>,
    pub s2: DMatrix<f64>,
    pub s3: DMatrix<f64>,
}

/// Solve the transform equation Φ̇ = −(ΦA + AᵀΦ + Q) forward from Φ(0) = −G,
/// symmetrizing at every internal step.
pub fn solve_phi(p: &LqProblem, substeps: usize) -> Result<MatrixPath> {
    let coeff = SampledCoefficients::from_problem(p)?;
    let weights = SampledWeights::from_problem(p)?;
    let rhs = move |_t: f64, cell: usize, blocks: &[DMatrix<f64>]| -> Result<Vec<DMatrix<f64>>> {
        let phi = &blocks[0];
        let a = &coeff.a[cell];
        Ok(vec![-(phi * a + a.transpose() * phi + &weights.q[cell])])
    };
    let ode = StackedOde { rhs: &rhs, symmetrize: vec![true] };
    let boundary = -&p.weights.g;
    let mut nodes = rk4_stacked(&ode, vec![boundary], Direction::Forward, &p.grid, substeps)?;
    MatrixPath::new(p.grid.clone(), nodes.remove(0))
}

/// Eliminate the initial-state and running-state costs of `p`.
///
/// The identity `original cost = transformed cost − E⟨Φ(T)ξ, ξ⟩` is a
/// property of the continuous problem; the verification layer tests it
/// numerically rather than assuming it.
pub fn apply_cost_transform(p: &LqProblem, substeps: usize) -> Result<TransformedProblem> {
    let phi = solve_phi(p, substeps)?;
    build_transformed(p, phi, substeps, true)
}

/// View an instance as already transformed (Φ ≡ 0), keeping its running
/// state weight `Q`. Lets the λ-family solvers run on raw instances.
pub fn untransformed_view(p: &LqProblem, substeps: usize) -> Result<TransformedProblem> {
    let n = p.dims.n;
    let phi = MatrixPath::constant(p.grid.clone(), DMatrix::zeros(n, n));
    build_transformed(p, phi, substeps, false)
}

fn build_transformed(
    p: &LqProblem,
    phi: MatrixPath,
    substeps: usize,
    phi_active: bool,
) -> Result<TransformedProblem> {
    let coeff = SampledCoefficients::from_problem(p)?;
    let weights = SampledWeights::from_problem(p)?;
    let grid = p.grid.clone();
    let nodes = grid.len();
    let n = p.dims.n;
    let mut n1 = Vec::with_capacity(nodes);
    let mut n2 = Vec::with_capacity(nodes);
    let mut s1 = Vec::with_capacity(nodes);
    let mut s2 = Vec::with_capacity(nodes);
    let mut s3 = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let phik = phi.value(k);
        if phi_active {
            n1.push(&weights.n1[k] + phik);
            n2.push(&weights.n2[k] + phik);
            s1.push(&weights.s1[k] + coeff.c1[k].transpose() * phik);
            s2.push(&weights.s2[k] + coeff.c2[k].transpose() * phik);
            s3.push(&weights.s3[k] + coeff.b[k].transpose() * phik);
        } else {
            n1.push(weights.n1[k].clone());
            n2.push(weights.n2[k].clone());
            s1.push(weights.s1[k].clone());
            s2.push(weights.s2[k].clone());
            s3.push(weights.s3[k].clone());
        }
    }
    let q = if phi_active {
        vec![DMatrix::zeros(n, n); nodes]
    } else {
        weights.q.clone()
    };
    Ok(TransformedProblem {
        base: p.clone(),
        substeps,
        n1: MatrixPath::new(grid.clone(), n1)?,
        n2: MatrixPath::new(grid.clone(), n2)?,
        s1: MatrixPath::new(grid.clone(), s1)?,
        s2: MatrixPath::new(grid.clone(), s2)?,
        s3: MatrixPath::new(grid.clone(), s3)?,
        r: MatrixPath::new(grid.clone(), weights.r.clone())?,
        q: MatrixPath::new(grid.clone(), q)?,
        phi,
        coeff,
        base_weights: weights,
        phi_active,
    })
}

/// One member of the terminal-penalty family.
#[derive(Debug, Clone)]
pub struct LambdaFamilyEntry {
    pub lambda: f64,
    pub p1: MatrixPath,
    pub p2: MatrixPath,
    /// Smallest eigenvalue over all nodes of diag(N₁+P₁, N₂+P₂, R).
    pub block_positivity_margin: f64,
}

/// Solve the Lyapunov member backward from λI.
pub fn solve_lyapunov_lambda(tp: &TransformedProblem, lambda: f64) -> Result<MatrixPath> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let n = tp.n();
    let rhs = |_t: f64, cell: usize, blocks: &[DMatrix<f64>]| -> Result<Vec<DMatrix<f64>>> {
        let p1 = &blocks[0];
        let a = &tp.coeff.a[cell];
        Ok(vec![-(p1 * a + a.transpose() * p1 + tp.q.value(cell))])
    };
    let ode = StackedOde { rhs: &rhs, symmetrize: vec![true] };
    let boundary = DMatrix::identity(n, n) * lambda;
    let mut nodes =
        rk4_stacked(&ode, vec![boundary.clone()], Direction::Backward, tp.grid(), tp.substeps)?;
    let mut values = nodes.remove(0);
    // Terminal node is assigned, not integrated.
    *values.last_mut().unwrap() = boundary;
    MatrixPath::new(tp.grid().clone(), values)
}

/// Solve the Riccati member backward from λI with the default positivity
/// floor. `p1` must live on the same grid; the solve co-integrates the
/// Lyapunov member and Φ so that every RK stage sees consistent values.
pub fn solve_riccati_lambda(
    tp: &TransformedProblem,
    lambda: f64,
    p1: &MatrixPath,
) -> Result<LambdaFamilyEntry> {
    solve_riccati_lambda_with_floor(tp, lambda, p1, DEFAULT_POSITIVITY_FLOOR)
}

/// [`solve_riccati_lambda`] with an explicit positivity floor.
pub fn solve_riccati_lambda_with_floor(
    tp: &TransformedProblem,
    lambda: f64,
    p1: &MatrixPath,
    floor: f64,
) -> Result<LambdaFamilyEntry> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    tp.grid().require_same(p1.grid(), "solve_riccati_lambda")?;

    // Blocks: [Φ, P₁, P₂]. Φ runs backward from its forward-solved terminal
    // value purely to provide stage-consistent transformed weights.
    let rhs = |t: f64, cell: usize, blocks: &[DMatrix<f64>]| -> Result<Vec<DMatrix<f64>>> {
        let phi = &blocks[0];
        let p1s = &blocks[1];
        let p2s = &blocks[2];
        let a = &tp.coeff.a[cell];

        let dphi = tp.phi_rhs(cell, phi);
        let dp1 = -(p1s * a + a.transpose() * p1s + tp.q.value(cell));

        let sw = tp.stage_weights(cell, phi);
        let w1 = &sw.n1 + p1s;
        let w2 = &sw.n2 + p2s;
        let w3 = tp.r.value(cell);
        let margin = linalg::sym_eigmin(&w1)
            .min(linalg::sym_eigmin(&w2))
            .min(linalg::sym_eigmin(w3));
        if margin < floor {
            return Err(Error::LambdaTooSmall { lambda, margin, floor, t });
        }
        let b1 = tp.coeff.c1[cell].transpose() * p2s + &sw.s1;
        let b2 = tp.coeff.c2[cell].transpose() * p2s + &sw.s2;
        let b3 = tp.coeff.b[cell].transpose() * p2s + &sw.s3;
        let quad = quad_term(&b1, &w1)? + quad_term(&b2, &w2)? + quad_term(&b3, w3)?;
        let dp2 = -(p2s * a + a.transpose() * p2s + tp.q.value(cell)) + quad;
        Ok(vec![dphi, dp1, dp2])
    };
    let ode = StackedOde { rhs: &rhs, symmetrize: vec![true, true, true] };
    let n = tp.n();
    let lam_i = DMatrix::identity(n, n) * lambda;
    let boundary = vec![tp.phi.last().clone(), lam_i.clone(), lam_i.clone()];
    let nodes = rk4_stacked(&ode, boundary, Direction::Backward, tp.grid(), tp.substeps)?;

    let mut p1_nodes = nodes[1].clone();
    let mut p2_nodes = nodes[2].clone();
    *p1_nodes.last_mut().unwrap() = lam_i.clone();
    *p2_nodes.last_mut().unwrap() = lam_i;

    // Node-level margin of diag(N₁+P₁, N₂+P₂, R).
    let mut margin = f64::INFINITY;
    for k in 0..tp.grid().len() {
        let w1 = tp.n1.value(k) + &p1_nodes[k];
        let w2 = tp.n2.value(k) + &p2_nodes[k];
        margin = margin
            .min(linalg::sym_eigmin(&w1))
            .min(linalg::sym_eigmin(&w2))
            .min(linalg::sym_eigmin(tp.r.value(k)));
    }

    Ok(LambdaFamilyEntry {
        lambda,
        p1: MatrixPath::new(tp.grid().clone(), p1_nodes)?,
        p2: MatrixPath::new(tp.grid().clone(), p2_nodes)?,
        block_positivity_margin: margin,
    })
}

// blockᵀ W⁻¹ block with an explicit, conditioned inverse.
fn quad_term(block: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if block.amax() == 0.0 {
        return Ok(DMatrix::zeros(block.ncols(), block.ncols()));
    }
    let (inv, rcond) = linalg::invert_with_rcond(w)
        .ok_or_else(|| Error::Blowup("singular block weight in Riccati right-hand side".into()))?;
    if rcond < 1e-10 {
        return Err(Error::Blowup(format!(
            "ill-conditioned block weight in Riccati right-hand side (rcond {rcond:.3e})"
        )));
    }
    Ok(block.transpose() * inv * block)
}

/// Smallest eigenvalues of the pairwise differences P_{i,λ₂} − P_{i,λ₁}.
#[derive(Debug, Clone)]
pub struct PairMonotonicity {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub min_eig_p1: f64,
    pub min_eig_p2: f64,
}

/// Result of the order-monotonicity check across a λ-family.
#[derive(Debug, Clone)]
pub struct MonotonicityReport {
    pub pairs: Vec<PairMonotonicity>,
    pub tolerance: f64,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.pairs
            .iter()
            .all(|p| p.min_eig_p1 > -self.tolerance && p.min_eig_p2 > -self.tolerance)
    }
}

/// For every pair λ₂ > λ₁ record the smallest eigenvalue, over all nodes, of
/// P₁λ₂ − P₁λ₁ and of P₂λ₂ − P₂λ₁. Pairs with equal λ are skipped. Requires
/// at least two entries with distinct λ on a common grid.
pub fn check_lambda_monotonicity(entries: &[LambdaFamilyEntry]) -> Result<MonotonicityReport> {
    if entries.len() < 2 {
        return Err(Error::Config(
            "monotonicity check needs at least two lambda entries".into(),
        ));
    }
    let grid = entries[0].p1.grid().clone();
    for e in entries {
        grid.require_same(e.p1.grid(), "check_lambda_monotonicity")?;
        grid.require_same(e.p2.grid(), "check_lambda_monotonicity")?;
    }
    let distinct = {
        let mut l: Vec<f64> = entries.iter().map(|e| e.lambda).collect();
        l.sort_by(|a, b| a.partial_cmp(b).unwrap());
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(Error::Config(
            "monotonicity check needs at least two distinct lambda values".into(),
        ));
    }
    let mut pairs = Vec::new();
    for lo in entries {
        for hi in entries {
            if hi.lambda <= lo.lambda {
                continue;
            }
            let mut min1 = f64::INFINITY;
            let mut min2 = f64::INFINITY;
            for k in 0..grid.len() {
                min1 = min1.min(linalg::sym_eigmin(&(hi.p1.value(k) - lo.p1.value(k))));
                min2 = min2.min(linalg::sym_eigmin(&(hi.p2.value(k) - lo.p2.value(k))));
            }
            pairs.push(PairMonotonicity {
                lambda_lo: lo.lambda,
                lambda_hi: hi.lambda,
                min_eig_p1: min1,
                min_eig_p2: min2,
            });
        }
    }
    Ok(MonotonicityReport { pairs, tolerance: 1e-8 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        scalar_indefinite_example, CoefficientSet, Dimensions, PathSpec, WeightSet,
    };
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[allow(clippy::too_many_arguments)]
    fn scalar_problem(
        a: f64,
        b: f64,
        g: f64,
        q: f64,
        n1: f64,
        n2: f64,
        r: f64,
        steps: usize,
    ) -> LqProblem {
        LqProblem {
            dims: Dimensions::new(1, 1).unwrap(),
            grid: grid(steps),
            coeffs: CoefficientSet {
                a: PathSpec::scalar(a),
                b: PathSpec::scalar(b),
                c1: PathSpec::scalar(0.0),
                c2: PathSpec::scalar(0.0),
            },
            weights: WeightSet::new(
                DMatrix::from_element(1, 1, g),
                PathSpec::scalar(q),
                PathSpec::scalar(0.0),
                PathSpec::scalar(0.0),
                PathSpec::scalar(0.0),
                PathSpec::scalar(n1),
                PathSpec::scalar(n2),
                PathSpec::scalar(r),
            ),
            terminal: TerminalCondition::zero(1),
        }
    }

    #[test]
    fn phi_closed_form_on_indefinite_example() {
        let p = scalar_indefinite_example(&grid(100)).unwrap();
        let phi = solve_phi(&p, 4).unwrap();
        // Φ̇ = 1 − 2Φ from Φ(0) = 1 gives Φ(t) = (1 + e^{−2t})/2.
        for (k, v) in phi.values().iter().enumerate() {
            let t = phi.grid().node(k);
            let expected = 0.5 * (1.0 + (-2.0 * t).exp());
            assert!((v[(0, 0)] - expected).abs() < 1e-8, "node {k}");
        }
        assert!((phi.last()[(0, 0)] - 0.5676676416183064).abs() < 1e-8);
    }

    #[test]
    fn phi_vanishes_without_state_costs() {
        let p = scalar_problem(1.0, 1.0, 0.0, 0.0, -1.0, -1.0, 5.0, 50);
        let phi = solve_phi(&p, 2).unwrap();
        assert_eq!(
            phi.sup_distance(&MatrixPath::constant(p.grid.clone(), DMatrix::zeros(1, 1)))
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn phi_linear_in_time_for_constant_q() {
        // A = 0, G = 0, Q = q: Φ(t) = −q t, integrated exactly by RK4.
        let p = scalar_problem(0.0, 0.0, 0.0, 2.5, 0.0, 0.0, 1.0, 20);
        let phi = solve_phi(&p, 1).unwrap();
        for (k, v) in phi.values().iter().enumerate() {
            let t = phi.grid().node(k);
            assert_relative_eq!(v[(0, 0)], -2.5 * t, epsilon = 1e-13);
        }
    }

    #[test]
    fn transform_is_identity_when_g_and_q_vanish() {
        let p = scalar_problem(0.7, 1.0, 0.0, 0.0, -1.0, 2.0, 5.0, 40);
        let tp = apply_cost_transform(&p, 2).unwrap();
        let w = SampledWeights::from_problem(&p).unwrap();
        for k in 0..p.grid.len() {
            assert_eq!(tp.n1.value(k)[(0, 0)], w.n1[k][(0, 0)]);
            assert_eq!(tp.n2.value(k)[(0, 0)], w.n2[k][(0, 0)]);
            assert_eq!(tp.s3.value(k)[(0, 0)], 0.0);
        }
    }

    #[test]
    fn transformed_weights_on_indefinite_example() {
        let p = scalar_indefinite_example(&grid(100)).unwrap();
        let tp = apply_cost_transform(&p, 4).unwrap();
        // N₁^Φ(0) = −1 + Φ(0) = 0 exactly (boundary node assigned).
        assert_eq!(tp.n1.value(0)[(0, 0)], 0.0);
        // N₁^Φ(1) = −1 + Φ(1).
        assert!((tp.n1.last()[(0, 0)] - (-0.4323323583816936)).abs() < 1e-8);
        // S₃^Φ = Φ since B = 1 and S₃ = 0.
        assert!((tp.s3.last()[(0, 0)] - 0.5676676416183064).abs() < 1e-8);
        // q ≡ 0 after the transform.
        assert_eq!(tp.q.value(50).amax(), 0.0);
    }

    #[test]
    fn lyapunov_scalar_closed_form() {
        // Transformed problem with A = 1: P₁λ(t) = λ e^{2(1−t)}.
        let p = scalar_indefinite_example(&grid(100)).unwrap();
        let tp = apply_cost_transform(&p, 4).unwrap();
        let p1 = solve_lyapunov_lambda(&tp, 10.0).unwrap();
        let expected0 = 10.0 * (2.0f64).exp();
        assert_relative_eq!(expected0, 73.8905609893065, epsilon = 1e-10);
        assert!((p1.first()[(0, 0)] - expected0).abs() < 1e-6);
        assert_eq!(p1.last()[(0, 0)], 10.0);
    }

    #[test]
    fn lyapunov_constant_when_a_zero() {
        let p = scalar_problem(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 30);
        let tp = apply_cost_transform(&p, 2).unwrap();
        let p1 = solve_lyapunov_lambda(&tp, 3.0).unwrap();
        for v in p1.values() {
            assert_eq!(v[(0, 0)], 3.0);
        }
    }

    #[test]
    fn riccati_separable_closed_form() {
        // A = C = S = Q = 0, B = 1, R = 5: Ṗ₂ = P₂²/5, P₂(T) = λ, hence
        // P₂(t) = 1 / (1/λ + (T−t)/5).
        let p = scalar_problem(0.0, 1.0, 0.0, 0.0, -1.0, -1.0, 5.0, 100);
        let tp = apply_cost_transform(&p, 4).unwrap();
        for (lambda, tol) in [(8.0, 1e-10), (64.0, 1e-6)] {
            let p1 = solve_lyapunov_lambda(&tp, lambda).unwrap();
            let entry = solve_riccati_lambda(&tp, lambda, &p1).unwrap();
            for (k, v) in entry.p2.values().iter().enumerate() {
                let t = entry.p2.grid().node(k);
                let expected = 1.0 / (1.0 / lambda + (1.0 - t) / 5.0);
                assert!(
                    (v[(0, 0)] - expected).abs() < tol,
                    "lambda {lambda}, node {k}: {} vs {expected}",
                    v[(0, 0)]
                );
            }
            assert!(entry.block_positivity_margin > 0.0);
        }
    }

    #[test]
    fn riccati_reduces_to_lyapunov_without_quadratic_terms() {
        // B = 0 and C₁ = C₂ = S = 0 make both equations coincide.
        let p = scalar_problem(0.4, 0.0, 0.0, 0.0, 1.0, 1.0, 2.0, 50);
        let tp = apply_cost_transform(&p, 2).unwrap();
        let p1 = solve_lyapunov_lambda(&tp, 8.0).unwrap();
        let entry = solve_riccati_lambda(&tp, 8.0, &p1).unwrap();
        assert!(entry.p2.sup_distance(&p1).unwrap() < 1e-14);
    }

    #[test]
    fn riccati_on_indefinite_example_completes_at_lambda_64() {
        let p = scalar_indefinite_example(&grid(100)).unwrap();
        let tp = apply_cost_transform(&p, 4).unwrap();
        let p1 = solve_lyapunov_lambda(&tp, 64.0).unwrap();
        let entry = solve_riccati_lambda(&tp, 64.0, &p1).unwrap();
        assert!(entry.block_positivity_margin > 0.0);
    }

    #[test]
    fn negative_control_weight_aborts_as_lambda_too_small() {
        let p = scalar_problem(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 20);
        let tp = apply_cost_transform(&p, 2).unwrap();
        let p1 = solve_lyapunov_lambda(&tp, 100.0).unwrap();
        match solve_riccati_lambda(&tp, 100.0, &p1) {
            Err(Error::LambdaTooSmall { .. }) => {}
            other => panic!("expected lambda-too-small, got {other:?}"),
        }
    }

    #[test]
    fn monotonicity_on_indefinite_example() {
        let p = scalar_indefinite_example(&grid(100)).unwrap();
        let tp = apply_cost_transform(&p, 4).unwrap();
        let entries: Vec<LambdaFamilyEntry> = [64.0, 128.0]
            .iter()
            .map(|&l| {
                let p1 = solve_lyapunov_lambda(&tp, l).unwrap();
                solve_riccati_lambda(&tp, l, &p1).unwrap()
            })
            .collect();
        let report = check_lambda_monotonicity(&entries).unwrap();
        assert!(report.passed(), "{:?}", report.pairs);
        // Positivity of completed solutions, and margins non-decreasing in λ.
        for e in &entries {
            for k in 0..tp.grid().len() {
                assert!(linalg::sym_eigmin(e.p1.value(k)) > -1e-8);
                assert!(linalg::sym_eigmin(e.p2.value(k)) > -1e-8);
            }
        }
        assert!(entries[1].block_positivity_margin >= entries[0].block_positivity_margin - 1e-10);
    }

    #[test]
    fn monotonicity_preconditions() {
        let p = scalar_indefinite_example(&grid(50)).unwrap();
        let tp = apply_cost_transform(&p, 2).unwrap();
        let p1 = solve_lyapunov_lambda(&tp, 64.0).unwrap();
        let e = solve_riccati_lambda(&tp, 64.0, &p1).unwrap();
        assert!(check_lambda_monotonicity(std::slice::from_ref(&e)).is_err());
        // Equal lambdas leave no usable pair.
        assert!(check_lambda_monotonicity(&[e.clone(), e]).is_err());
    }

    #[test]
    fn untransformed_view_solves_raw_lyapunov() {
        // Raw instance with Q = 1, A = 0: P₁λ(t) = λ + (T − t).
        let p = scalar_problem(0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 40);
        let tp = untransformed_view(&p, 2).unwrap();
        let p1 = solve_lyapunov_lambda(&tp, 2.0).unwrap();
        for (k, v) in p1.values().iter().enumerate() {
            let t = p1.grid().node(k);
            assert_relative_eq!(v[(0, 0)], 2.0 + (1.0 - t), epsilon = 1e-12);
        }
    }

    #[test]
    fn terminal_correction_closed_forms() {
        let p = scalar_indefinite_example(&grid(100)).unwrap();
        let tp = apply_cost_transform(&p, 4).unwrap();
        let phi_t = tp.phi.last()[(0, 0)];

        let mut det = tp.clone();
        det.base = det
            .base
            .with_terminal(TerminalCondition::Deterministic(DVector::from_element(1, 2.0)));
        assert_relative_eq!(
            det.terminal_correction_exact().unwrap(),
            4.0 * phi_t,
            epsilon = 1e-12
        );

        let mut aff = tp;
        aff.base = aff.base.with_terminal(TerminalCondition::AffineInTerminalBm {
            c: DVector::from_element(1, 0.0),
            b1: DVector::from_element(1, 1.0),
            b2: DVector::from_element(1, 1.0),
        });
        assert_relative_eq!(
            aff.terminal_correction_exact().unwrap(),
            2.0 * phi_t,
            epsilon = 1e-12
        );
    }
}
