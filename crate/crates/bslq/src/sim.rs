//! Closed-loop simulation: the adjoint forward state X, its filter X̂, and
//! the reconstructed optimal processes (Y, Z₁, Z₂, u).
//!
//! With Γ and the adjoint (φ, β₁, β₂) in hand, the optimal adjoint state
//! solves the forward equation
//!
//! ```text
//! dX = [−AᵀX + Ã X̂ + b] dt + [−C₁ᵀX + C̃₁ X̂ + c₁] dW₁
//!     + [−C₂ᵀX + C̃₂ X̂ + c₂] dW₂,   X(0) = 0,
//! ```
//!
//! and its filter satisfies its own equation driven by W₂ alone,
//!
//! ```text
//! dX̂ = [Â X̂ + b̂] dt + [Ĉ₂ X̂ + ĉ₂] dW₂,   Â = Ã − Aᵀ,  Ĉ₂ = C̃₂ − C₂ᵀ.
//! ```
//!
//! X̂ is simulated from this projected equation rather than filtered from X
//! numerically; their consistency is a statistical test in the verification
//! layer, not an assumption. Everything is Euler–Maruyama on pre-generated
//! increments, path-parallel and reproducible for a fixed seed.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::adjoint::{AdjointSolution, AdjointValues};
use crate::ensemble::{BrownianEnsemble, PathArray};
use crate::error::{Error, Result};
use crate::gamma::GammaSolution;
use crate::model::TimeGrid;
use crate::ode::MatrixPath;
use crate::riccati::TransformedProblem;

/// Deterministic closed-loop coefficient paths and the tables behind the
/// random forcings b, c₁, c₂, b̂, ĉ₂ (which close over the adjoint solution
/// at simulation time).
#[derive(Debug, Clone)]
pub struct ClosedLoopCoefficients {
    /// Ã = S₂ᵀ N_Γ⁻¹ Γ C_Γᵀ + S₃ᵀ R⁻¹ B_Γᵀ.
    pub a_tilde: MatrixPath,
    /// C̃₁ = −S₁ Γ.
    pub c1_tilde: MatrixPath,
    /// C̃₂ = N₂ N_Γ⁻¹ Γ C_Γᵀ − S₂ Γ.
    pub c2_tilde: MatrixPath,
    /// Â = Ã − Aᵀ.
    pub a_hat: MatrixPath,
    /// Ĉ₂ = C̃₂ − C₂ᵀ.
    pub c2_hat: MatrixPath,
    // Forcing tables.
    m_phihat: MatrixPath,       // S₂ᵀN_Γ⁻¹ΓS₂ + S₃ᵀR⁻¹S₃
    s2t_ngi_minus_i: MatrixPath, // S₂ᵀ(N_Γ⁻¹ − I)
    s2t_ngi: MatrixPath,        // S₂ᵀN_Γ⁻¹
    n2_ngi: MatrixPath,         // N₂N_Γ⁻¹
    n2_ngi_minus_i: MatrixPath, // N₂(N_Γ⁻¹ − I)
    n2_ngi_gamma_s2: MatrixPath, // N₂N_Γ⁻¹ΓS₂
    i_minus_n2_ngi_gamma_s2: MatrixPath, // (I − N₂N_Γ⁻¹Γ)S₂
    s1: MatrixPath,
    s2: MatrixPath,
    n1: MatrixPath,
    n2: MatrixPath,
    // Transposed base coefficients for the −Aᵀ, −Cᵢᵀ terms of the X drift
    // and diffusions.
    a_t: MatrixPath,
    c1_t: MatrixPath,
    c2_t: MatrixPath,
}

impl ClosedLoopCoefficients {
    /// Drift forcing b = −M φ̂ + S₁ᵀβ₁ + S₂ᵀβ₂ + S₂ᵀ(N_Γ⁻¹−I) β̂₂.
    pub fn forcing_b(&self, k: usize, adj: &AdjointValues) -> DVector<f64> {
        -(self.m_phihat.value(k) * &adj.phi_hat)
            + self.s1.value(k).transpose() * &adj.beta1
            + self.s2.value(k).transpose() * &adj.beta2
            + self.s2t_ngi_minus_i.value(k) * &adj.beta2_hat
    }

    /// W₁-diffusion forcing c₁ = S₁ φ + N₁ β₁.
    pub fn forcing_c1(&self, k: usize, adj: &AdjointValues) -> DVector<f64> {
        self.s1.value(k) * &adj.phi + self.n1.value(k) * &adj.beta1
    }

    /// W₂-diffusion forcing c₂ = S₂ φ − N₂N_Γ⁻¹ΓS₂ φ̂ + N₂ β₂ + N₂(N_Γ⁻¹−I) β̂₂.
    pub fn forcing_c2(&self, k: usize, adj: &AdjointValues) -> DVector<f64> {
        self.s2.value(k) * &adj.phi - self.n2_ngi_gamma_s2.value(k) * &adj.phi_hat
            + self.n2.value(k) * &adj.beta2
            + self.n2_ngi_minus_i.value(k) * &adj.beta2_hat
    }

    /// Filtered drift forcing b̂ = −M φ̂ + S₁ᵀ β̂₁ + S₂ᵀN_Γ⁻¹ β̂₂.
    pub fn forcing_b_hat(&self, k: usize, adj: &AdjointValues) -> DVector<f64> {
        -(self.m_phihat.value(k) * &adj.phi_hat)
            + self.s1.value(k).transpose() * &adj.beta1_hat
            + self.s2t_ngi.value(k) * &adj.beta2_hat
    }

    /// Filtered diffusion forcing ĉ₂ = (I − N₂N_Γ⁻¹Γ)S₂ φ̂ + N₂N_Γ⁻¹ β̂₂.
    pub fn forcing_c2_hat(&self, k: usize, adj: &AdjointValues) -> DVector<f64> {
        self.i_minus_n2_ngi_gamma_s2.value(k) * &adj.phi_hat
            + self.n2_ngi.value(k) * &adj.beta2_hat
    }
}

/// Assemble the closed-loop coefficient paths from Γ and the transformed
/// weights. The adjoint solution is only grid-checked here; the random
/// forcings read it during simulation.
pub fn assemble_closed_loop(
    gs: &GammaSolution,
    adjoint: &AdjointSolution,
    tp: &TransformedProblem,
) -> Result<ClosedLoopCoefficients> {
    let grid = tp.grid();
    gs.gamma.grid().require_same(grid, "assemble_closed_loop")?;
    adjoint.grid().require_same(grid, "assemble_closed_loop")?;
    let n = tp.n();
    let id = DMatrix::<f64>::identity(n, n);
    let len = grid.len();
    let mut a_tilde = Vec::with_capacity(len);
    let mut c1_tilde = Vec::with_capacity(len);
    let mut c2_tilde = Vec::with_capacity(len);
    let mut a_hat = Vec::with_capacity(len);
    let mut c2_hat = Vec::with_capacity(len);
    let mut m_phihat = Vec::with_capacity(len);
    let mut s2t_ngi_minus_i = Vec::with_capacity(len);
    let mut s2t_ngi = Vec::with_capacity(len);
    let mut n2_ngi = Vec::with_capacity(len);
    let mut n2_ngi_minus_i = Vec::with_capacity(len);
    let mut n2_ngi_gamma_s2 = Vec::with_capacity(len);
    let mut i_minus = Vec::with_capacity(len);
    for k in 0..len {
        let gamma = gs.gamma.value(k);
        let ngi = gs.n_gamma_inv.value(k);
        let s2 = tp.s2.value(k);
        let s3 = tp.s3.value(k);
        let n2 = tp.n2.value(k);
        let a = &tp.coeff.a[k];
        let c2 = &tp.coeff.c2[k];
        let r_inv = crate::linalg::invert_with_rcond(tp.r.value(k))
            .ok_or_else(|| Error::Blowup(format!("control weight R singular at node {k}")))?
            .0;
        let at = s2.transpose() * ngi * gamma * gs.c_gamma.value(k).transpose()
            + s3.transpose() * &r_inv * gs.b_gamma.value(k).transpose();
        let c1t = -(tp.s1.value(k) * gamma);
        let c2t = n2 * ngi * gamma * gs.c_gamma.value(k).transpose() - s2 * gamma;
        a_hat.push(&at - a.transpose());
        c2_hat.push(&c2t - c2.transpose());
        a_tilde.push(at);
        c1_tilde.push(c1t);
        c2_tilde.push(c2t);
        m_phihat.push(s2.transpose() * ngi * gamma * s2 + s3.transpose() * &r_inv * s3);
        s2t_ngi_minus_i.push(s2.transpose() * (ngi - &id));
        s2t_ngi.push(s2.transpose() * ngi);
        n2_ngi.push(n2 * ngi);
        n2_ngi_minus_i.push(n2 * (ngi - &id));
        n2_ngi_gamma_s2.push(n2 * ngi * gamma * s2);
        i_minus.push((&id - n2 * ngi * gamma) * s2);
    }
    let path = |v: Vec<DMatrix<f64>>| MatrixPath::new(grid.clone(), v);
    let a_t: Vec<DMatrix<f64>> = tp.coeff.a.iter().map(|m| m.transpose()).collect();
    let c1_t: Vec<DMatrix<f64>> = tp.coeff.c1.iter().map(|m| m.transpose()).collect();
    let c2_t: Vec<DMatrix<f64>> = tp.coeff.c2.iter().map(|m| m.transpose()).collect();
    Ok(ClosedLoopCoefficients {
        a_tilde: path(a_tilde)?,
        c1_tilde: path(c1_tilde)?,
        c2_tilde: path(c2_tilde)?,
        a_hat: path(a_hat)?,
        c2_hat: path(c2_hat)?,
        m_phihat: path(m_phihat)?,
        s2t_ngi_minus_i: path(s2t_ngi_minus_i)?,
        s2t_ngi: path(s2t_ngi)?,
        n2_ngi: path(n2_ngi)?,
        n2_ngi_minus_i: path(n2_ngi_minus_i)?,
        n2_ngi_gamma_s2: path(n2_ngi_gamma_s2)?,
        i_minus_n2_ngi_gamma_s2: path(i_minus)?,
        s1: tp.s1.clone(),
        s2: tp.s2.clone(),
        n1: tp.n1.clone(),
        n2: tp.n2.clone(),
        a_t: path(a_t)?,
        c1_t: path(c1_t)?,
        c2_t: path(c2_t)?,
    })
}

/// Euler step of a linear SDE driven by W₂ only:
/// x_{k+1} = x_k + (A_k x_k + f_k) Δt + (C_k x_k + g_k) ΔW₂.
///
/// `forcings(path, k)` returns (f_k, g_k). Exposed for the trivial-dynamics
/// checks; the production wrappers bind the closed-loop tables.
pub fn euler_forward_w2<F>(
    a: &MatrixPath,
    c: &MatrixPath,
    forcings: F,
    ens: &BrownianEnsemble,
    dim: usize,
) -> Result<PathArray>
where
    F: Fn(usize, usize) -> (DVector<f64>, DVector<f64>) + Sync,
{
    let grid = &ens.grid;
    a.grid().require_same(grid, "euler_forward_w2")?;
    let steps = grid.steps();
    let dt = grid.dt();
    let mut out = PathArray::zeros(ens.n_paths(), grid.len(), dim);
    let errors: Vec<Option<String>> = out
        .par_paths_mut()
        .enumerate()
        .map(|(p, block)| {
            let mut x = DVector::<f64>::zeros(dim);
            block[..dim].fill(0.0);
            for k in 0..steps {
                let (f, g) = forcings(p, k);
                let dw2 = ens.dw2.get(p, k, 0);
                let drift = a.value(k) * &x + f;
                let diff = c.value(k) * &x + g;
                x += drift * dt + diff * dw2;
                if x.iter().any(|v| !v.is_finite()) {
                    return Some(format!("non-finite filtered state on path {p} at step {k}"));
                }
                block[(k + 1) * dim..(k + 2) * dim].copy_from_slice(x.as_slice());
            }
            None
        })
        .collect();
    if let Some(msg) = errors.into_iter().flatten().next() {
        return Err(Error::Blowup(msg));
    }
    Ok(out)
}

/// Simulate the filtered adjoint state X̂ from its projected equation,
/// driven by ΔW₂ only.
pub fn simulate_xhat(
    clc: &ClosedLoopCoefficients,
    adjoint: &AdjointSolution,
    ens: &BrownianEnsemble,
) -> Result<PathArray> {
    let dim = clc.a_hat.value(0).nrows();
    euler_forward_w2(
        &clc.a_hat,
        &clc.c2_hat,
        |p, k| {
            let adj = adjoint.values_at(k, p, ens.w1.get(p, k, 0), ens.w2.get(p, k, 0));
            (clc.forcing_b_hat(k, &adj), clc.forcing_c2_hat(k, &adj))
        },
        ens,
        dim,
    )
}

/// Simulate the full adjoint state X, driven by both increments, with the
/// already-simulated filter path feeding the X̂-coupled terms.
pub fn simulate_x(
    clc: &ClosedLoopCoefficients,
    adjoint: &AdjointSolution,
    ens: &BrownianEnsemble,
    xhat: &PathArray,
) -> Result<PathArray> {
    let grid = &ens.grid;
    clc.a_tilde.grid().require_same(grid, "simulate_x")?;
    if xhat.n_paths() != ens.n_paths() || xhat.n_nodes() != grid.len() {
        return Err(Error::GridMismatch("xhat paths do not match the ensemble".into()));
    }
    let n = clc.a_tilde.value(0).nrows();
    let steps = grid.steps();
    let dt = grid.dt();
    let mut out = PathArray::zeros(ens.n_paths(), grid.len(), n);
    let errors: Vec<Option<String>> = out
        .par_paths_mut()
        .enumerate()
        .map(|(p, block)| {
            let mut x = DVector::<f64>::zeros(n);
            block[..n].fill(0.0);
            for k in 0..steps {
                let adj = adjoint.values_at(k, p, ens.w1.get(p, k, 0), ens.w2.get(p, k, 0));
                let xh = DVector::from_column_slice(xhat.slice(p, k));
                let drift =
                    -(clc.a_t.value(k) * &x) + clc.a_tilde.value(k) * &xh + clc.forcing_b(k, &adj);
                let diff1 = -(clc.c1_t.value(k) * &x)
                    + clc.c1_tilde.value(k) * &xh
                    + clc.forcing_c1(k, &adj);
                let diff2 = -(clc.c2_t.value(k) * &x)
                    + clc.c2_tilde.value(k) * &xh
                    + clc.forcing_c2(k, &adj);
                x += drift * dt + diff1 * ens.dw1.get(p, k, 0) + diff2 * ens.dw2.get(p, k, 0);
                if x.iter().any(|v| !v.is_finite()) {
                    return Some(format!("non-finite adjoint state on path {p} at step {k}"));
                }
                block[(k + 1) * n..(k + 2) * n].copy_from_slice(x.as_slice());
            }
            None
        })
        .collect();
    if let Some(msg) = errors.into_iter().flatten().next() {
        return Err(Error::Blowup(msg));
    }
    Ok(out)
}

/// Provenance stamp carried by simulated ensembles and CSV artifacts.
#[derive(Debug, Clone)]
pub struct ProvenanceStamp {
    pub problem_sha256: String,
    pub gamma_sha256: String,
    pub adjoint_sha256: String,
    pub seed: u64,
}

/// Monte-Carlo paths of every process under the constructed control.
#[derive(Debug, Clone)]
pub struct StatePathEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub x: PathArray,
    pub xhat: PathArray,
    pub y: PathArray,
    pub yhat: PathArray,
    pub z1: PathArray,
    pub z2: PathArray,
    pub u: PathArray,
    pub provenance: ProvenanceStamp,
}

/// Rebuild (Y, Ŷ, Z₁, Z₂, u) from the decoupling algebra:
///
/// ```text
/// Y  = −Γ X̂ + φ,            Ŷ = −Γ X̂ + φ̂,          Z₁ = β₁,
/// Z₂ = N_Γ⁻¹(Γ C_Γᵀ X̂ − Γ S₂ φ̂ + β̂₂) + β₂ − β̂₂,
/// u  = R⁻¹(B_Γᵀ X̂ − S₃ φ̂).
/// ```
///
/// Γ(T) = 0 and φ(T) = ξ make Y(T) = ξ exact per path.
pub fn reconstruct_optimal(
    gs: &GammaSolution,
    adjoint: &AdjointSolution,
    tp: &TransformedProblem,
    ens: &BrownianEnsemble,
    xhat: &PathArray,
) -> Result<(PathArray, PathArray, PathArray, PathArray, PathArray)> {
    let grid = &ens.grid;
    gs.gamma.grid().require_same(grid, "reconstruct_optimal")?;
    tp.grid().require_same(grid, "reconstruct_optimal")?;
    let n = tp.n();
    let m = tp.m();
    let nodes = grid.len();
    let n_paths = ens.n_paths();

    // Per-node reconstruction tables.
    let mut u_from_xhat = Vec::with_capacity(nodes); // R⁻¹B_Γᵀ
    let mut u_from_phihat = Vec::with_capacity(nodes); // R⁻¹S₃
    let mut z2_from_xhat = Vec::with_capacity(nodes); // N_Γ⁻¹ΓC_Γᵀ
    let mut z2_from_phihat = Vec::with_capacity(nodes); // N_Γ⁻¹ΓS₂
    for k in 0..nodes {
        let r_inv = crate::linalg::invert_with_rcond(tp.r.value(k))
            .ok_or_else(|| Error::Blowup(format!("control weight R singular at node {k}")))?
            .0;
        u_from_xhat.push(&r_inv * gs.b_gamma.value(k).transpose());
        u_from_phihat.push(&r_inv * tp.s3.value(k));
        let ngi = gs.n_gamma_inv.value(k);
        let gamma = gs.gamma.value(k);
        z2_from_xhat.push(ngi * gamma * gs.c_gamma.value(k).transpose());
        z2_from_phihat.push(ngi * gamma * tp.s2.value(k));
    }

    let mut y = PathArray::zeros(n_paths, nodes, n);
    let mut yhat = PathArray::zeros(n_paths, nodes, n);
    let mut z1 = PathArray::zeros(n_paths, nodes, n);
    let mut z2 = PathArray::zeros(n_paths, nodes, n);
    let mut u = PathArray::zeros(n_paths, nodes, m);

    y.par_paths_mut()
        .zip(yhat.par_paths_mut())
        .zip(z1.par_paths_mut())
        .zip(z2.par_paths_mut())
        .zip(u.par_paths_mut())
        .enumerate()
        .for_each(|(p, ((((yb, yhb), z1b), z2b), ub))| {
            for k in 0..nodes {
                let adj = adjoint.values_at(k, p, ens.w1.get(p, k, 0), ens.w2.get(p, k, 0));
                let xh = DVector::from_column_slice(xhat.slice(p, k));
                let gamma_xh = gs.gamma.value(k) * &xh;
                let yv = &adj.phi - &gamma_xh;
                let yhv = &adj.phi_hat - &gamma_xh;
                let z2v = &z2_from_xhat[k] * &xh - &z2_from_phihat[k] * &adj.phi_hat
                    + gs.n_gamma_inv.value(k) * &adj.beta2_hat
                    + &adj.beta2
                    - &adj.beta2_hat;
                let uv = &u_from_xhat[k] * &xh - &u_from_phihat[k] * &adj.phi_hat;
                yb[k * n..(k + 1) * n].copy_from_slice(yv.as_slice());
                yhb[k * n..(k + 1) * n].copy_from_slice(yhv.as_slice());
                z1b[k * n..(k + 1) * n].copy_from_slice(adj.beta1.as_slice());
                z2b[k * n..(k + 1) * n].copy_from_slice(z2v.as_slice());
                ub[k * m..(k + 1) * m].copy_from_slice(uv.as_slice());
            }
        });
    Ok((y, yhat, z1, z2, u))
}

/// Run the whole simulation stage: X̂, X, and the reconstructed processes.
pub fn simulate_pipeline(
    tp: &TransformedProblem,
    gs: &GammaSolution,
    adjoint: &AdjointSolution,
    ens: &BrownianEnsemble,
    provenance: ProvenanceStamp,
) -> Result<StatePathEnsemble> {
    let clc = assemble_closed_loop(gs, adjoint, tp)?;
    let xhat = simulate_xhat(&clc, adjoint, ens)?;
    let x = simulate_x(&clc, adjoint, ens, &xhat)?;
    let (y, yhat, z1, z2, u) = reconstruct_optimal(gs, adjoint, tp, ens, &xhat)?;
    Ok(StatePathEnsemble {
        grid: ens.grid.clone(),
        n_paths: ens.n_paths(),
        x,
        xhat,
        y,
        yhat,
        z1,
        z2,
        u,
        provenance,
    })
}
