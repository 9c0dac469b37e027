//! Exact adjoint solution for terminal data affine in the terminal drivers.
//!
//! For ξ = c + b₁ W₁(T) + b₂ W₂(T) the ansatz
//! φ(t) = p(t) + q₁(t) W₁(t) + q₂(t) W₂(t) closes the filtered backward
//! equation with deterministic loadings: β₁ = q₁, β₂ = q₂,
//! φ̂ = p + q₂ W₂ (the unobserved driver has zero filter), and matching
//! coefficients gives three linear vector ODEs solved backward:
//!
//! ```text
//! q̇₁ = A q₁,                    q₁(T) = b₁,
//! q̇₂ = (A − K) q₂,              q₂(T) = b₂,
//! ṗ  = (A − K) p + (C₁ + L₁) q₁ + (C₂ + L₂) q₂,   p(T) = c.
//! ```
//!
//! The W₁ load sees no filter correction because the filter of W₁(t) given
//! the observed filtration is zero. There is no regression noise anywhere,
//! which makes this solver the oracle for the Monte-Carlo route.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gamma::{GammaSolution, NGAMMA_RCOND_FLOOR};
use crate::linalg;
use crate::model::TerminalCondition;
use crate::ode::{rk4_stacked, Direction, MatrixPath, StackedOde};
use crate::riccati::TransformedProblem;

use super::{AdjointValues, DriftKernels};

/// Mean part and driver loadings of the affine adjoint solution.
#[derive(Debug, Clone)]
pub struct AffineAdjointSolution {
    /// Mean part p (n×1 path).
    pub p: MatrixPath,
    /// W₁ loading q₁ = β₁ (n×1 path).
    pub q1: MatrixPath,
    /// W₂ loading q₂ = β₂ (n×1 path).
    pub q2: MatrixPath,
}

impl AffineAdjointSolution {
    pub fn values_at(&self, k: usize, w1: f64, w2: f64) -> AdjointValues {
        let p = self.p.value(k);
        let q1 = self.q1.value(k);
        let q2 = self.q2.value(k);
        let phi = p + q1 * w1 + q2 * w2;
        let phi_hat = p + q2 * w2;
        let col = |m: &DMatrix<f64>| DVector::from_column_slice(m.as_slice());
        AdjointValues {
            phi: col(&phi),
            phi_hat: col(&phi_hat),
            beta1: col(q1),
            beta2: col(q2),
            beta1_hat: col(q1),
            beta2_hat: col(q2),
        }
    }

    /// E[φ(t_k)] = p(t_k).
    pub fn mean(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.p.value(k).as_slice())
    }
}

/// Solve the adjoint equation exactly for deterministic or affine terminal
/// data. Kernels are recomputed stage-consistently from co-integrated Φ and
/// Γ; the node-level `kernels` argument pins the grid and documents intent.
pub fn solve_affine_terminal(
    tp: &TransformedProblem,
    gs: &GammaSolution,
    kernels: &DriftKernels,
    terminal: &TerminalCondition,
) -> Result<AffineAdjointSolution> {
    let n = tp.n();
    kernels.k.grid().require_same(tp.grid(), "solve_affine_terminal")?;
    gs.gamma.grid().require_same(tp.grid(), "solve_affine_terminal")?;
    let (c, b1, b2) = match terminal {
        TerminalCondition::Deterministic(c) => {
            (c.clone(), DVector::zeros(n), DVector::zeros(n))
        }
        TerminalCondition::AffineInTerminalBm { c, b1, b2 } => {
            (c.clone(), b1.clone(), b2.clone())
        }
        TerminalCondition::SampledFunctional(f) => {
            return Err(Error::Config(format!(
                "affine adjoint solver cannot handle sampled terminal data ({})",
                f.name
            )))
        }
    };
    if c.len() != n || b1.len() != n || b2.len() != n {
        return Err(Error::Dimension("terminal data must be n-dimensional".into()));
    }

    let r_inv: Vec<DMatrix<f64>> = tp
        .r
        .values()
        .iter()
        .map(|r| {
            linalg::invert_with_rcond(r)
                .map(|(inv, _)| inv)
                .ok_or_else(|| Error::Blowup("control weight R singular".into()))
        })
        .collect::<Result<_>>()?;

    // Blocks: [Φ, Γ, q₁, q₂, p], all backward.
    let rhs = |t: f64, cell: usize, blocks: &[DMatrix<f64>]| -> Result<Vec<DMatrix<f64>>> {
        let phi = &blocks[0];
        let gamma = &blocks[1];
        let q1 = &blocks[2];
        let q2 = &blocks[3];
        let p = &blocks[4];
        let a = &tp.coeff.a[cell];
        let c1 = &tp.coeff.c1[cell];
        let c2 = &tp.coeff.c2[cell];

        let dphi = tp.phi_rhs(cell, phi);
        let sw = tp.stage_weights(cell, phi);
        let n_gamma = DMatrix::identity(n, n) + gamma * &sw.n2;
        let (n_gamma_inv, rcond) =
            linalg::invert_with_rcond(&n_gamma).ok_or(Error::NGammaSingular { t, rcond: 0.0 })?;
        if rcond < NGAMMA_RCOND_FLOOR {
            return Err(Error::NGammaSingular { t, rcond });
        }
        let b_gamma = &tp.coeff.b[cell] + gamma * sw.s3.transpose();
        let c_gamma = c2 + gamma * sw.s2.transpose();
        let dgamma = a * gamma + gamma * a.transpose()
            - &b_gamma * &r_inv[cell] * b_gamma.transpose()
            - &c_gamma * &n_gamma_inv * gamma * c_gamma.transpose();

        let kk = &b_gamma * &r_inv[cell] * &sw.s3 + &c_gamma * &n_gamma_inv * gamma * &sw.s2;
        let l1 = gamma * sw.s1.transpose();
        let l2 = &c_gamma * &n_gamma_inv - c2;

        let a_minus_k = a - &kk;
        let dq1 = a * q1;
        let dq2 = &a_minus_k * q2;
        let dp = &a_minus_k * p + (c1 + &l1) * q1 + (c2 + &l2) * q2;
        Ok(vec![dphi, dgamma, dq1, dq2, dp])
    };
    let ode = StackedOde { rhs: &rhs, symmetrize: vec![true, true, false, false, false] };
    let as_col = |v: &DVector<f64>| DMatrix::from_column_slice(n, 1, v.as_slice());
    let boundary = vec![
        tp.phi.last().clone(),
        DMatrix::zeros(n, n),
        as_col(&b1),
        as_col(&b2),
        as_col(&c),
    ];
    let nodes = rk4_stacked(&ode, boundary, Direction::Backward, tp.grid(), tp.substeps)?;

    let mut q1_nodes = nodes[2].clone();
    let mut q2_nodes = nodes[3].clone();
    let mut p_nodes = nodes[4].clone();
    // Terminal slices are assigned from the data, not integrated.
    *q1_nodes.last_mut().unwrap() = as_col(&b1);
    *q2_nodes.last_mut().unwrap() = as_col(&b2);
    *p_nodes.last_mut().unwrap() = as_col(&c);

    Ok(AffineAdjointSolution {
        p: MatrixPath::new(tp.grid().clone(), p_nodes)?,
        q1: MatrixPath::new(tp.grid().clone(), q1_nodes)?,
        q2: MatrixPath::new(tp.grid().clone(), q2_nodes)?,
    })
}
