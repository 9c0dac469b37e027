//! The decoupling kernel Γ of the filtered Hamiltonian system.
//!
//! On a transformed problem (no initial-state or running-state cost) the
//! backward state decouples as Y = −Γ X̂ + φ, where Γ solves
//!
//! ```text
//! Γ̇ − AΓ − ΓAᵀ + B_Γ R⁻¹ B_Γᵀ + C_Γ N_Γ⁻¹ Γ C_Γᵀ = 0,    Γ(T) = 0,
//! N_Γ = I + Γ N₂,   B_Γ = B + Γ S₃ᵀ,   C_Γ = C₂ + Γ S₂ᵀ,
//! ```
//!
//! with all weights transformed. Direct backward integration is the
//! production path. As an independent cross-check, Γ is also obtained as the
//! λ → ∞ limit of P₂λ⁻¹ from the terminal-penalty Riccati family: the
//! distances ‖Γλ − Γ‖∞ must shrink monotonically as λ doubles, and the Γλ
//! must decrease in λ in the positive semi-definite order.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::ode::{rk4_stacked, Direction, MatrixPath, StackedOde};
use crate::riccati::{
    solve_lyapunov_lambda, solve_riccati_lambda, LambdaFamilyEntry, TransformedProblem,
};

/// Reciprocal-condition floor below which N_Γ is declared singular.
pub const NGAMMA_RCOND_FLOOR: f64 = 1e-10;

/// Γ together with its derived node paths and conditioning diagnostics.
#[derive(Debug, Clone)]
pub struct GammaSolution {
    /// Symmetric positive semi-definite kernel with Γ(T) = 0 exactly.
    pub gamma: MatrixPath,
    /// Node-wise (I + Γ N₂)⁻¹.
    pub n_gamma_inv: MatrixPath,
    /// B + Γ S₃ᵀ (n×m).
    pub b_gamma: MatrixPath,
    /// C₂ + Γ S₂ᵀ (n×n).
    pub c_gamma: MatrixPath,
    /// Smallest singular value of N_Γ over all nodes.
    pub min_singular_n_gamma: f64,
}

fn r_inverses(tp: &TransformedProblem) -> Result<Vec<DMatrix<f64>>> {
    tp.r
        .values()
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let (inv, rcond) = linalg::invert_with_rcond(r)
                .ok_or_else(|| Error::Blowup(format!("control weight R singular at node {k}")))?;
            if rcond < 1e-12 {
                return Err(Error::Blowup(format!(
                    "control weight R ill-conditioned at node {k} (rcond {rcond:.3e})"
                )));
            }
            Ok(inv)
        })
        .collect()
}

/// Solve the Γ-equation backward from Γ(T) = 0.
pub fn solve_gamma_direct(tp: &TransformedProblem) -> Result<GammaSolution> {
    let n = tp.n();
    solve_gamma_from_terminal(tp, DMatrix::zeros(n, n))
}

/// Backward Γ-solve from an arbitrary symmetric terminal value.
///
/// The zero terminal is the production case; nonzero terminals serve the
/// integration oracles and the uniqueness probe.
pub fn solve_gamma_from_terminal(
    tp: &TransformedProblem,
    terminal: DMatrix<f64>,
) -> Result<GammaSolution> {
    let n = tp.n();
    linalg::require_square(&terminal, "gamma terminal")?;
    if terminal.nrows() != n {
        return Err(Error::Dimension(format!("gamma terminal value must be {n}x{n}")));
    }
    let r_inv = r_inverses(tp)?;

    // Blocks: [Φ, Γ]; Φ provides stage-consistent transformed weights.
    let rhs = |t: f64, cell: usize, blocks: &[DMatrix<f64>]| -> Result<Vec<DMatrix<f64>>> {
        let phi = &blocks[0];
        let gamma = &blocks[1];
        let a = &tp.coeff.a[cell];
        let dphi = tp.phi_rhs(cell, phi);

        let sw = tp.stage_weights(cell, phi);
        let n_gamma = DMatrix::identity(n, n) + gamma * &sw.n2;
        let (n_gamma_inv, rcond) =
            linalg::invert_with_rcond(&n_gamma).ok_or(Error::NGammaSingular { t, rcond: 0.0 })?;
        if rcond < NGAMMA_RCOND_FLOOR {
            return Err(Error::NGammaSingular { t, rcond });
        }
        let b_gamma = &tp.coeff.b[cell] + gamma * sw.s3.transpose();
        let c_gamma = &tp.coeff.c2[cell] + gamma * sw.s2.transpose();
        let dgamma = a * gamma + gamma * a.transpose()
            - &b_gamma * &r_inv[cell] * b_gamma.transpose()
            - &c_gamma * &n_gamma_inv * gamma * c_gamma.transpose();
        Ok(vec![dphi, dgamma])
    };
    let ode = StackedOde { rhs: &rhs, symmetrize: vec![true, true] };
    let boundary = vec![tp.phi.last().clone(), linalg::symmetric_part(&terminal)];
    let nodes = rk4_stacked(&ode, boundary, Direction::Backward, tp.grid(), tp.substeps)?;

    let mut gamma_nodes = nodes[1].clone();
    *gamma_nodes.last_mut().unwrap() = linalg::symmetric_part(&terminal);
    let gamma = MatrixPath::new(tp.grid().clone(), gamma_nodes)?;
    derive_paths(tp, gamma)
}

// Node-level N_Γ⁻¹, B_Γ, C_Γ and the N_Γ conditioning summary.
fn derive_paths(tp: &TransformedProblem, gamma: MatrixPath) -> Result<GammaSolution> {
    let n = tp.n();
    let id = DMatrix::<f64>::identity(n, n);
    let len = gamma.values().len();
    let mut inv_nodes = Vec::with_capacity(len);
    let mut bg_nodes = Vec::with_capacity(len);
    let mut cg_nodes = Vec::with_capacity(len);
    let mut min_sv = f64::INFINITY;
    for (k, g) in gamma.values().iter().enumerate() {
        let n_gamma = &id + g * tp.n2.value(k);
        let t = tp.grid().node(k);
        let (inv, rcond) =
            linalg::invert_with_rcond(&n_gamma).ok_or(Error::NGammaSingular { t, rcond: 0.0 })?;
        if rcond < NGAMMA_RCOND_FLOOR {
            return Err(Error::NGammaSingular { t, rcond });
        }
        min_sv = min_sv.min(linalg::min_singular_value(&n_gamma));
        inv_nodes.push(inv);
        bg_nodes.push(&tp.coeff.b[k] + g * tp.s3.value(k).transpose());
        cg_nodes.push(&tp.coeff.c2[k] + g * tp.s2.value(k).transpose());
    }
    Ok(GammaSolution {
        n_gamma_inv: MatrixPath::new(tp.grid().clone(), inv_nodes)?,
        b_gamma: MatrixPath::new(tp.grid().clone(), bg_nodes)?,
        c_gamma: MatrixPath::new(tp.grid().clone(), cg_nodes)?,
        min_singular_n_gamma: min_sv,
        gamma,
    })
}

/// Convergence diagnostics of the inverse-Riccati route against a reference.
#[derive(Debug, Clone)]
pub struct LambdaLimitDiagnostics {
    pub lambdas: Vec<f64>,
    /// ‖Γλ − Γ_ref‖∞ (largest absolute entry over all nodes) per λ.
    pub sup_distances: Vec<f64>,
    /// For consecutive λ₁ < λ₂: whether Γλ₁ − Γλ₂ is PSD within 1e-8.
    pub psd_monotone: Vec<bool>,
}

impl LambdaLimitDiagnostics {
    pub fn strictly_decreasing(&self) -> bool {
        self.sup_distances.windows(2).all(|w| w[1] < w[0])
    }
}

/// Γλ = P₂λ⁻¹ for each λ of an increasing list, with convergence
/// diagnostics against `reference` (normally the directly integrated Γ).
///
/// At t = T the inverse is λ⁻¹I exactly. Inadmissible λ propagate the
/// lambda-too-small diagnostic from the Riccati solve.
pub fn gamma_from_riccati_limit(
    tp: &TransformedProblem,
    lambdas: &[f64],
    reference: &MatrixPath,
) -> Result<(Vec<MatrixPath>, LambdaLimitDiagnostics)> {
    if lambdas.is_empty() {
        return Err(Error::Config("lambda list must be nonempty".into()));
    }
    if lambdas.windows(2).any(|w| w[1] <= w[0]) || lambdas[0] <= 0.0 {
        return Err(Error::Config(
            "lambda list must be strictly increasing and positive".into(),
        ));
    }
    tp.grid().require_same(reference.grid(), "gamma_from_riccati_limit")?;
    let n = tp.n();
    let mut paths = Vec::with_capacity(lambdas.len());
    let mut sup = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let p1 = solve_lyapunov_lambda(tp, lambda)?;
        let entry: LambdaFamilyEntry = solve_riccati_lambda(tp, lambda, &p1)?;
        let steps = tp.grid().steps();
        let mut values = Vec::with_capacity(tp.grid().len());
        for k in 0..tp.grid().len() {
            if k == steps {
                values.push(DMatrix::identity(n, n) / lambda);
                continue;
            }
            let p2 = entry.p2.value(k);
            let (inv, rcond) = linalg::invert_with_rcond(p2).ok_or_else(|| {
                Error::Blowup(format!("P2 singular at node {k} for lambda {lambda}"))
            })?;
            if rcond < 1e-12 {
                return Err(Error::Blowup(format!(
                    "P2 ill-conditioned at node {k} for lambda {lambda} (rcond {rcond:.3e})"
                )));
            }
            values.push(linalg::symmetric_part(&inv));
        }
        let path = MatrixPath::new(tp.grid().clone(), values)?;
        sup.push(path.sup_distance(reference)?);
        paths.push(path);
    }
    let mut psd = Vec::new();
    for w in paths.windows(2) {
        let mut min_eig = f64::INFINITY;
        for k in 0..tp.grid().len() {
            min_eig = min_eig.min(linalg::sym_eigmin(&(w[0].value(k) - w[1].value(k))));
        }
        psd.push(min_eig > -1e-8);
    }
    Ok((
        paths,
        LambdaLimitDiagnostics {
            lambdas: lambdas.to_vec(),
            sup_distances: sup,
            psd_monotone: psd,
        },
    ))
}

/// Defect report for a Γ path: the equation residual by central finite
/// differences, positivity of Γ, and the N_Γ · N_Γ⁻¹ = I identity.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    /// Residual magnitude (largest absolute entry) per interior node.
    pub node_residuals: Vec<f64>,
    pub max_residual: f64,
    pub max_residual_node: usize,
    pub min_gamma_eigenvalue: f64,
    pub max_inverse_identity_error: f64,
    pub terminal_norm: f64,
}

/// Recompute the Γ-equation defect of a stored solution. Central finite
/// differences approximate Γ̇ at interior nodes, so the residual of an exact
/// solution is pure discretization error; a corrupted node shows up as a
/// localized spike.
pub fn validate_gamma(gs: &GammaSolution, tp: &TransformedProblem) -> Result<ResidualReport> {
    let grid = tp.grid();
    gs.gamma.grid().require_same(grid, "validate_gamma")?;
    let n = tp.n();
    let id = DMatrix::<f64>::identity(n, n);
    let r_inv = r_inverses(tp)?;
    let dt = grid.dt();

    let mut node_residuals = Vec::with_capacity(grid.len().saturating_sub(2));
    let mut max_res = 0.0f64;
    let mut max_node = 0usize;
    let mut min_eig = f64::INFINITY;
    let mut max_id_err = 0.0f64;
    for k in 0..grid.len() {
        let g = gs.gamma.value(k);
        min_eig = min_eig.min(linalg::sym_eigmin(g));
        let n_gamma = &id + g * tp.n2.value(k);
        max_id_err = max_id_err.max((&n_gamma * gs.n_gamma_inv.value(k) - &id).amax());
        if k == 0 || k == grid.len() - 1 {
            continue;
        }
        let fd = (gs.gamma.value(k + 1) - gs.gamma.value(k - 1)) / (2.0 * dt);
        let a = &tp.coeff.a[k];
        let bg = gs.b_gamma.value(k);
        let cg = gs.c_gamma.value(k);
        let res = fd - a * g - g * a.transpose()
            + bg * &r_inv[k] * bg.transpose()
            + cg * gs.n_gamma_inv.value(k) * g * cg.transpose();
        let mag = res.amax();
        node_residuals.push(mag);
        if mag > max_res {
            max_res = mag;
            max_node = k;
        }
    }
    Ok(ResidualReport {
        node_residuals,
        max_residual: max_res,
        max_residual_node: max_node,
        min_gamma_eigenvalue: min_eig,
        max_inverse_identity_error: max_id_err,
        terminal_norm: gs.gamma.last().amax(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        scalar_indefinite_example, CoefficientSet, Dimensions, LqProblem, PathSpec,
        TerminalCondition, TimeGrid, WeightSet,
    };
    use crate::riccati::apply_cost_transform;
    use approx::assert_relative_eq;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    fn scalar_problem(a: f64, b: f64, c2: f64, n2: f64, r: f64, steps: usize) -> LqProblem {
        LqProblem {
            dims: Dimensions::new(1, 1).unwrap(),
            grid: grid(steps),
            coeffs: CoefficientSet {
                a: PathSpec::scalar(a),
                b: PathSpec::scalar(b),
                c1: PathSpec::scalar(0.0),
                c2: PathSpec::scalar(c2),
            },
            weights: WeightSet::new(
                nalgebra::DMatrix::from_element(1, 1, 0.0),
                PathSpec::scalar(0.0),
                PathSpec::scalar(0.0),
                PathSpec::scalar(0.0),
                PathSpec::scalar(0.0),
                PathSpec::scalar(0.0),
                PathSpec::scalar(n2),
                PathSpec::scalar(r),
            ),
            terminal: TerminalCondition::zero(1),
        }
    }

    #[test]
    fn gamma_constant_slope_exact() {
        // A = 0, C₂ = 0, S = 0, B = 1, R = 5: Γ(t) = (1 − t)/5 exactly.
        let p = scalar_problem(0.0, 1.0, 0.0, -1.0, 5.0, 10);
        let tp = apply_cost_transform(&p, 1).unwrap();
        let gs = solve_gamma_direct(&tp).unwrap();
        for (k, v) in gs.gamma.values().iter().enumerate() {
            let t = gs.gamma.grid().node(k);
            assert!((v[(0, 0)] - (1.0 - t) / 5.0).abs() < 1e-10, "node {k}");
        }
        assert_eq!(gs.gamma.last()[(0, 0)], 0.0);
        assert!(gs.min_singular_n_gamma > 0.0);
    }

    #[test]
    fn gamma_zero_for_homogeneous_equation() {
        let p = scalar_problem(0.9, 0.0, 0.0, -1.0, 2.0, 25);
        let tp = apply_cost_transform(&p, 2).unwrap();
        let gs = solve_gamma_direct(&tp).unwrap();
        assert_eq!(
            gs.gamma
                .sup_distance(&MatrixPath::constant(
                    p.grid.clone(),
                    nalgebra::DMatrix::zeros(1, 1)
                ))
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn gamma_separable_oracle_with_nonzero_terminal() {
        // A = B = 0, C₂ = c, N₂ = ν: Γ̇ = −c²Γ/(1 + νΓ). With Γ(T) = γ₀ the
        // solution satisfies ln Γ(t) + νΓ(t) = ln γ₀ + νγ₀ + c²(T − t).
        let (c, nu, gamma_t) = (1.2, 0.8, 0.5);
        let p = scalar_problem(0.0, 0.0, c, nu, 1.0, 200);
        let tp = apply_cost_transform(&p, 2).unwrap();
        let gs =
            solve_gamma_from_terminal(&tp, nalgebra::DMatrix::from_element(1, 1, gamma_t)).unwrap();
        let rhs_const = gamma_t.ln() + nu * gamma_t;
        for (k, v) in gs.gamma.values().iter().enumerate() {
            let t = gs.gamma.grid().node(k);
            let target = rhs_const + c * c * (1.0 - t);
            // Newton solve of ln x + νx = target.
            let mut x: f64 = 1.0;
            for _ in 0..80 {
                let f = x.ln() + nu * x - target;
                x -= f / (1.0 / x + nu);
                x = x.max(1e-12);
            }
            assert!((v[(0, 0)] - x).abs() < 1e-9, "node {k}: {} vs {x}", v[(0, 0)]);
        }
    }

    #[test]
    fn gamma_direct_rk4_self_consistency() {
        // Successive grid doublings shrink the solution difference at the
        // fourth order: ratio within [12, 20].
        let solve_at = |steps: usize| {
            let p = scalar_indefinite_example(&grid(steps)).unwrap();
            let tp = apply_cost_transform(&p, 1).unwrap();
            solve_gamma_direct(&tp).unwrap().gamma
        };
        let diff = |coarse: &MatrixPath, fine: &MatrixPath| {
            coarse
                .values()
                .iter()
                .enumerate()
                .map(|(k, v)| (v - fine.value(2 * k)).amax())
                .fold(0.0, f64::max)
        };
        let g50 = solve_at(50);
        let g100 = solve_at(100);
        let g200 = solve_at(200);
        let g400 = solve_at(400);
        let d1 = diff(&g50, &g100);
        let d2 = diff(&g100, &g200);
        let d3 = diff(&g200, &g400);
        for ratio in [d1 / d2, d2 / d3] {
            assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn lambda_limit_trivial_inverse() {
        // B = C = S = A = 0: P₂λ ≡ λ so Γλ ≡ 1/λ, converging to Γ ≡ 0.
        let p = scalar_problem(0.0, 0.0, 0.0, 0.0, 1.0, 20);
        let tp = apply_cost_transform(&p, 1).unwrap();
        let gs = solve_gamma_direct(&tp).unwrap();
        let (paths, diag) = gamma_from_riccati_limit(&tp, &[4.0, 8.0, 16.0], &gs.gamma).unwrap();
        for (path, &lambda) in paths.iter().zip(&[4.0, 8.0, 16.0]) {
            for v in path.values() {
                assert_relative_eq!(v[(0, 0)], 1.0 / lambda, epsilon = 1e-12);
            }
        }
        assert!(diag.strictly_decreasing());
        assert!(diag.psd_monotone.iter().all(|&b| b));
    }

    #[test]
    fn lambda_limit_on_indefinite_example() {
        let p = scalar_indefinite_example(&grid(100)).unwrap();
        let tp = apply_cost_transform(&p, 4).unwrap();
        let gs = solve_gamma_direct(&tp).unwrap();
        let lambdas = [64.0, 128.0, 256.0, 512.0];
        let (_, diag) = gamma_from_riccati_limit(&tp, &lambdas, &gs.gamma).unwrap();
        assert!(diag.strictly_decreasing(), "{:?}", diag.sup_distances);
        assert!(diag.psd_monotone.iter().all(|&b| b), "{:?}", diag.psd_monotone);
        // Γ stays PSD and N_Γ well conditioned on this instance.
        for k in 0..tp.grid().len() {
            assert!(linalg::sym_eigmin(gs.gamma.value(k)) > -1e-8);
        }
        assert!(gs.min_singular_n_gamma > 1e-6);
    }

    #[test]
    fn lambda_list_must_increase() {
        let p = scalar_problem(0.0, 1.0, 0.0, 0.0, 5.0, 10);
        let tp = apply_cost_transform(&p, 1).unwrap();
        let gs = solve_gamma_direct(&tp).unwrap();
        assert!(gamma_from_riccati_limit(&tp, &[8.0, 4.0], &gs.gamma).is_err());
    }

    #[test]
    fn residual_report_flags_corruption() {
        let p = scalar_problem(0.0, 1.0, 0.0, -1.0, 5.0, 200);
        let tp = apply_cost_transform(&p, 1).unwrap();
        let gs = solve_gamma_direct(&tp).unwrap();
        let clean = validate_gamma(&gs, &tp).unwrap();
        assert!(clean.max_residual < 1e-6, "max residual {}", clean.max_residual);
        assert_eq!(clean.terminal_norm, 0.0);
        assert!(clean.max_inverse_identity_error < 1e-8);

        let mut corrupted = gs.clone();
        let k_bad = 77;
        corrupted.gamma.values_mut()[k_bad][(0, 0)] += 0.1;
        let report = validate_gamma(&corrupted, &tp).unwrap();
        assert!(report.max_residual > 1.0);
        assert!((report.max_residual_node as i64 - k_bad as i64).abs() <= 1);
    }

    #[test]
    fn uniqueness_probe_contracts_terminal_perturbations() {
        let p = scalar_indefinite_example(&grid(100)).unwrap();
        let tp = apply_cost_transform(&p, 4).unwrap();
        let eps = 1e-10;
        let plus =
            solve_gamma_from_terminal(&tp, nalgebra::DMatrix::from_element(1, 1, eps)).unwrap();
        let minus =
            solve_gamma_from_terminal(&tp, nalgebra::DMatrix::from_element(1, 1, -eps)).unwrap();
        assert!(plus.gamma.sup_distance(&minus.gamma).unwrap() < 1e-8);
    }
}
