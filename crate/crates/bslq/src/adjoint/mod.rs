//! The adjoint backward equation with filtering.
//!
//! After decoupling, the stochastic offset φ solves the backward equation
//!
//! ```text
//! dφ = [A φ + C₁ β₁ + C₂ β₂ − K φ̂ + L₁ β̂₁ + L₂ β̂₂] dt + β₁ dW₁ + β₂ dW₂,
//! φ(T) = ξ,
//! ```
//!
//! where hats denote filters with respect to the observed filtration and the
//! drift kernels group the filter coefficients:
//!
//! ```text
//! K  = B_Γ R⁻¹ S₃ + C_Γ N_Γ⁻¹ Γ S₂,
//! L₁ = Γ S₁ᵀ,
//! L₂ = C_Γ N_Γ⁻¹ − C₂.
//! ```
//!
//! Two solvers are provided. Terminal data that is affine in the terminal
//! driver values admits an exact solution by undetermined coefficients
//! ([`affine`]); general square-integrable terminal functionals are handled
//! by a regression-based backward scheme on a simulated ensemble ([`lsmc`]).
//! The affine solver doubles as the oracle for the regression solver.

pub mod affine;
pub mod lsmc;
pub mod regression;

use nalgebra::DVector;

use crate::error::Result;
use crate::gamma::GammaSolution;
use crate::model::TimeGrid;
use crate::ode::MatrixPath;
use crate::riccati::TransformedProblem;

pub use affine::{solve_affine_terminal, AffineAdjointSolution};
pub use lsmc::{solve_lsmc_terminal, SampledAdjointSolution};
pub use regression::{BasisSpec, FeatureScope};

/// Adjoint state at one node of one path.
#[derive(Debug, Clone)]
pub struct AdjointValues {
    pub phi: DVector<f64>,
    pub phi_hat: DVector<f64>,
    pub beta1: DVector<f64>,
    pub beta2: DVector<f64>,
    pub beta1_hat: DVector<f64>,
    pub beta2_hat: DVector<f64>,
}

/// Deterministic coefficient groups of the adjoint drift.
#[derive(Debug, Clone)]
pub struct DriftKernels {
    /// Coefficient of −φ̂.
    pub k: MatrixPath,
    /// Coefficient of β̂₁.
    pub l1: MatrixPath,
    /// Coefficient of β̂₂.
    pub l2: MatrixPath,
}

/// Node-level drift kernels from a solved decoupling kernel.
pub fn assemble_drift_kernels(
    gs: &GammaSolution,
    tp: &TransformedProblem,
) -> Result<DriftKernels> {
    let grid = tp.grid();
    gs.gamma.grid().require_same(grid, "assemble_drift_kernels")?;
    let mut k_nodes = Vec::with_capacity(grid.len());
    let mut l1_nodes = Vec::with_capacity(grid.len());
    let mut l2_nodes = Vec::with_capacity(grid.len());
    for idx in 0..grid.len() {
        let gamma = gs.gamma.value(idx);
        let r_inv = crate::linalg::invert_with_rcond(tp.r.value(idx))
            .ok_or_else(|| {
                crate::error::Error::Blowup(format!("control weight R singular at node {idx}"))
            })?
            .0;
        let k = gs.b_gamma.value(idx) * &r_inv * tp.s3.value(idx)
            + gs.c_gamma.value(idx) * gs.n_gamma_inv.value(idx) * gamma * tp.s2.value(idx);
        let l1 = gamma * tp.s1.value(idx).transpose();
        let l2 = gs.c_gamma.value(idx) * gs.n_gamma_inv.value(idx) - &tp.coeff.c2[idx];
        k_nodes.push(k);
        l1_nodes.push(l1);
        l2_nodes.push(l2);
    }
    Ok(DriftKernels {
        k: MatrixPath::new(grid.clone(), k_nodes)?,
        l1: MatrixPath::new(grid.clone(), l1_nodes)?,
        l2: MatrixPath::new(grid.clone(), l2_nodes)?,
    })
}

/// A solved adjoint equation, by either route.
#[derive(Debug, Clone)]
pub enum AdjointSolution {
    Affine(AffineAdjointSolution),
    Sampled(SampledAdjointSolution),
}

impl AdjointSolution {
    pub fn grid(&self) -> &TimeGrid {
        match self {
            AdjointSolution::Affine(a) => a.p.grid(),
            AdjointSolution::Sampled(s) => &s.grid,
        }
    }

    /// Adjoint state at node `k` of path `path`, whose driver values at that
    /// node are (w1, w2).
    pub fn values_at(&self, k: usize, path: usize, w1: f64, w2: f64) -> AdjointValues {
        match self {
            AdjointSolution::Affine(a) => a.values_at(k, w1, w2),
            AdjointSolution::Sampled(s) => s.values_at(k, path, w1, w2),
        }
    }

    /// Bytes identifying the solution content, for provenance stamps.
    pub fn content_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            AdjointSolution::Affine(a) => {
                out.push(b'A');
                for path in [&a.p, &a.q1, &a.q2] {
                    for m in path.values() {
                        for v in m.iter() {
                            out.extend_from_slice(&v.to_bits().to_le_bytes());
                        }
                    }
                }
            }
            AdjointSolution::Sampled(s) => {
                out.push(b'S');
                out.extend_from_slice(&(s.n_paths as u64).to_le_bytes());
                out.extend_from_slice(&(s.basis.degree as u64).to_le_bytes());
                for sl in &s.slices {
                    for m in [&sl.phi, &sl.beta1, &sl.beta2] {
                        for v in m.iter() {
                            out.extend_from_slice(&v.to_bits().to_le_bytes());
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gamma::solve_gamma_direct;
    use crate::model::{scalar_indefinite_example, TimeGrid};
    use crate::riccati::apply_cost_transform;

    #[test]
    fn kernels_vanish_without_cross_weights() {
        // S₂ = S₃ = 0 gives K ≡ 0; Γ ≡ 0 gives L₁ ≡ 0 and L₂ = C₂(N_Γ⁻¹ − I)
        // with N_Γ = I, hence L₂ ≡ 0.
        use crate::model::{CoefficientSet, Dimensions, LqProblem, PathSpec, TerminalCondition, WeightSet};
        let p = LqProblem {
            dims: Dimensions::new(1, 1).unwrap(),
            grid: TimeGrid::new(1.0, 20).unwrap(),
            coeffs: CoefficientSet {
                a: PathSpec::scalar(0.3),
                b: PathSpec::scalar(0.0),
                c1: PathSpec::scalar(0.5),
                c2: PathSpec::scalar(0.8),
            },
            weights: WeightSet::new(
                nalgebra::DMatrix::zeros(1, 1),
                PathSpec::scalar(0.0),
                PathSpec::scalar(0.7),
                PathSpec::scalar(0.0),
                PathSpec::scalar(0.0),
                PathSpec::scalar(-1.0),
                PathSpec::scalar(2.0),
                PathSpec::scalar(3.0),
            ),
            terminal: TerminalCondition::zero(1),
        };
        let tp = apply_cost_transform(&p, 2).unwrap();
        // B = 0 and zero terminal make Γ ≡ 0 here (homogeneous equation).
        let gs = solve_gamma_direct(&tp).unwrap();
        let kernels = assemble_drift_kernels(&gs, &tp).unwrap();
        for k in 0..tp.grid().len() {
            assert_eq!(kernels.k.value(k).amax(), 0.0);
            assert_eq!(kernels.l1.value(k).amax(), 0.0);
            assert_eq!(kernels.l2.value(k).amax(), 0.0);
        }
    }

    #[test]
    fn kernels_finite_on_indefinite_example() {
        let p = scalar_indefinite_example(&TimeGrid::new(1.0, 100).unwrap()).unwrap();
        let tp = apply_cost_transform(&p, 4).unwrap();
        let gs = solve_gamma_direct(&tp).unwrap();
        let kernels = assemble_drift_kernels(&gs, &tp).unwrap();
        // S₁ = S₂ = 0 after transform (C = 0), so L₁ = L₂ = 0 while the
        // control cross-weight S₃^Φ = Φ feeds K = B_Γ R⁻¹ Φ.
        assert_eq!(kernels.l1.value(50).amax(), 0.0);
        assert_eq!(kernels.l2.value(50).amax(), 0.0);
        assert!(kernels.k.value(0)[(0, 0)] > 0.0);
    }
}
