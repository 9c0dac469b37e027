//! Fixed-step classical Runge–Kutta integration of matrix-valued ODEs on the
//! problem grid, forward or backward, with blow-up detection and optional
//! per-step symmetrization.
//!
//! Coefficient lookups inside right-hand sides follow the module-wide
//! left-endpoint convention: every stage inside grid cell [t_k, t_{k+1})
//! reads data indexed by k. Solver-internal smooth dependencies (the
//! state-weight transform, the decoupling kernel) are co-integrated as extra
//! blocks of one stacked system so that stage values stay fourth-order
//! consistent.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::TimeGrid;

/// A matrix-valued function sampled at every node of a time grid, stored in
/// forward time order regardless of integration direction.
#[derive(Debug, Clone)]
pub struct MatrixPath {
    grid: TimeGrid,
    values: Vec<DMatrix<f64>>,
}

impl MatrixPath {
    pub fn new(grid: TimeGrid, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "path has {} values for a grid with {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|m| !linalg::all_finite(m)) {
            return Err(Error::Blowup(format!(
                "non-finite path value at node {k} (t = {})",
                grid.node(k)
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: TimeGrid, value: DMatrix<f64>) -> Self {
        let n = grid.len();
        Self { grid, values: vec![value; n] }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn value(&self, k: usize) -> &DMatrix<f64> {
        &self.values[k]
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.values
    }

    pub fn first(&self) -> &DMatrix<f64> {
        &self.values[0]
    }

    pub fn last(&self) -> &DMatrix<f64> {
        &self.values[self.values.len() - 1]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    /// Largest absolute entry over all nodes of `self − other`.
    pub fn sup_distance(&self, other: &MatrixPath) -> Result<f64> {
        self.grid.require_same(&other.grid, "sup_distance")?;
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max))
    }

    /// Node-wise map.
    pub fn map(&self, f: impl Fn(usize, &DMatrix<f64>) -> DMatrix<f64>) -> MatrixPath {
        MatrixPath {
            grid: self.grid.clone(),
            values: self.values.iter().enumerate().map(|(k, m)| f(k, m)).collect(),
        }
    }
}

/// Integration direction: forward from the value at t = 0, or backward from
/// the value at t = T.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Right-hand side contract for [`integrate_matrix_ode`]: `(t, cell, M) ↦
/// dM/dt`, where `cell` is the grid-cell index for left-endpoint coefficient
/// lookups. Evaluation must be deterministic and side-effect free.
pub trait OdeRightHandSide {
    fn eval(&self, t: f64, cell: usize, m: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

impl<F> OdeRightHandSide for F
where
    F: Fn(f64, usize, &DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    fn eval(&self, t: f64, cell: usize, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self(t, cell, m)
    }
}

pub(crate) struct StackedOde<'a> {
    /// `(t, cell, blocks) ↦ d(blocks)/dt`.
    pub rhs: &'a dyn Fn(f64, usize, &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>>,
    /// Blocks to re-symmetrize after every internal step.
    pub symmetrize: Vec<bool>,
}

/// Classical RK4 over the grid with `substeps` internal stages per cell,
/// storing node values for every block. The boundary is assigned exactly at
/// its node (t = 0 forward, t = T backward); it is never re-integrated.
pub(crate) fn rk4_stacked(
    ode: &StackedOde<'_>,
    boundary: Vec<DMatrix<f64>>,
    direction: Direction,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<Vec<Vec<DMatrix<f64>>>> {
    if substeps == 0 {
        return Err(Error::Config("substeps must be >= 1".into()));
    }
    for (i, b) in boundary.iter().enumerate() {
        if !linalg::all_finite(b) {
            return Err(Error::Blowup(format!("non-finite boundary value in block {i}")));
        }
    }
    let nblocks = boundary.len();
    let nnodes = grid.len();
    let mut nodes: Vec<Vec<DMatrix<f64>>> = vec![Vec::with_capacity(nnodes); nblocks];

    let mut state = boundary;
    let cells: Vec<usize> = match direction {
        Direction::Forward => (0..grid.steps()).collect(),
        Direction::Backward => (0..grid.steps()).rev().collect(),
    };

    let push_state = |nodes: &mut Vec<Vec<DMatrix<f64>>>, state: &[DMatrix<f64>]| {
        for (i, m) in state.iter().enumerate() {
            nodes[i].push(m.clone());
        }
    };
    push_state(&mut nodes, &state);

    let h_signed = |cell: usize| {
        let h = (grid.node(cell + 1) - grid.node(cell)) / substeps as f64;
        match direction {
            Direction::Forward => h,
            Direction::Backward => -h,
        }
    };

    for &cell in &cells {
        let h = h_signed(cell);
        let t_start = match direction {
            Direction::Forward => grid.node(cell),
            Direction::Backward => grid.node(cell + 1),
        };
        for s in 0..substeps {
            let t0 = t_start + h * s as f64;
            let k1 = (ode.rhs)(t0, cell, &state)?;
            let s2: Vec<DMatrix<f64>> = state
                .iter()
                .zip(k1.iter())
                .map(|(m, k)| m + k * (h / 2.0))
                .collect();
            let k2 = (ode.rhs)(t0 + h / 2.0, cell, &s2)?;
            let s3: Vec<DMatrix<f64>> = state
                .iter()
                .zip(k2.iter())
                .map(|(m, k)| m + k * (h / 2.0))
                .collect();
            let k3 = (ode.rhs)(t0 + h / 2.0, cell, &s3)?;
            let s4: Vec<DMatrix<f64>> = state
                .iter()
                .zip(k3.iter())
                .map(|(m, k)| m + k * h)
                .collect();
            let k4 = (ode.rhs)(t0 + h, cell, &s4)?;
            for i in 0..nblocks {
                let incr = (&k1[i] + &k2[i] * 2.0 + &k3[i] * 2.0 + &k4[i]) * (h / 6.0);
                state[i] += incr;
                if ode.symmetrize[i] {
                    state[i] = linalg::symmetric_part(&state[i]);
                }
                if !linalg::all_finite(&state[i]) {
                    let t_bad = t0 + h;
                    return Err(Error::Blowup(format!(
                        "block {i} became non-finite near t = {t_bad:.6} (cell {cell}, substep {s})"
                    )));
                }
            }
        }
        push_state(&mut nodes, &state);
    }

    if direction == Direction::Backward {
        for block in &mut nodes {
            block.reverse();
        }
    }
    Ok(nodes)
}

/// Integrate a single matrix ODE on the grid.
///
/// `boundary` is the value at t = 0 (forward) or t = T (backward); the
/// returned path is stored in forward time order with the boundary node
/// assigned exactly. Blow-up (a non-finite value) is reported with the first
/// offending location.
pub fn integrate_matrix_ode<R: OdeRightHandSide>(
    rhs: &R,
    boundary: DMatrix<f64>,
    direction: Direction,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<MatrixPath> {
    let f = |t: f64, cell: usize, blocks: &[DMatrix<f64>]| -> Result<Vec<DMatrix<f64>>> {
        Ok(vec![rhs.eval(t, cell, &blocks[0])?])
    };
    let ode = StackedOde { rhs: &f, symmetrize: vec![false] };
    let mut nodes = rk4_stacked(&ode, vec![boundary], direction, grid, substeps)?;
    MatrixPath::new(grid.clone(), nodes.remove(0))
}

/// Replace each node value by its symmetric part, returning the new path and
/// the largest asymmetry removed. Errors on non-square values.
pub fn symmetrize_path(path: &MatrixPath) -> Result<(MatrixPath, f64)> {
    linalg::require_square(path.value(0), "symmetrize_path")?;
    let mut max_asym: f64 = 0.0;
    let values = path
        .values()
        .iter()
        .map(|m| {
            max_asym = max_asym.max(linalg::asymmetry(m));
            linalg::symmetric_part(m)
        })
        .collect();
    Ok((MatrixPath::new(path.grid().clone(), values)?, max_asym))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn constant_backward_path() {
        let rhs = |_t: f64, _c: usize, _m: &DMatrix<f64>| Ok(DMatrix::zeros(1, 1));
        let p = integrate_matrix_ode(&rhs, scalar(7.5), Direction::Backward, &grid(10), 1).unwrap();
        for v in p.values() {
            assert_eq!(v[(0, 0)], 7.5);
        }
    }

    // dp/dt = 1 - 2p, p(0) = 1 has the closed form p(t) = (1 + e^{-2t})/2,
    // so p(1) = 0.5676676416183064.
    #[test]
    fn linear_scalar_forward_closed_form() {
        let rhs = |_t: f64, _c: usize, m: &DMatrix<f64>| Ok(scalar(1.0 - 2.0 * m[(0, 0)]));
        let p = integrate_matrix_ode(&rhs, scalar(1.0), Direction::Forward, &grid(50), 4).unwrap();
        let expected = 0.5 * (1.0 + (-2.0f64).exp());
        assert_relative_eq!(expected, 0.5676676416183064, epsilon = 1e-15);
        assert!((p.last()[(0, 0)] - expected).abs() < 1e-8);
    }

    // Constant slope is integrated exactly by RK4.
    #[test]
    fn constant_slope_backward_exact() {
        let rhs = |_t: f64, _c: usize, _m: &DMatrix<f64>| Ok(scalar(-1.0 / 5.0));
        let p = integrate_matrix_ode(&rhs, scalar(0.0), Direction::Backward, &grid(10), 1).unwrap();
        for (k, v) in p.values().iter().enumerate() {
            let t = p.grid().node(k);
            assert_relative_eq!(v[(0, 0)], (1.0 - t) / 5.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn fourth_order_convergence_on_smooth_problem() {
        let expected = 0.5 * (1.0 + (-2.0f64).exp());
        let rhs = |_t: f64, _c: usize, m: &DMatrix<f64>| Ok(scalar(1.0 - 2.0 * m[(0, 0)]));
        let err = |n: usize| {
            let p = integrate_matrix_ode(&rhs, scalar(1.0), Direction::Forward, &grid(n), 1).unwrap();
            (p.last()[(0, 0)] - expected).abs()
        };
        for n in [25usize, 50, 100] {
            let ratio = err(n) / err(2 * n);
            assert!(
                (14.0..=18.0).contains(&ratio),
                "order ratio {ratio} out of range at N = {n}"
            );
        }
    }

    #[test]
    fn blow_up_reports_location() {
        // dp/dt = p^3 from p(0)=3 blows up inside [0,1].
        let rhs = |_t: f64, _c: usize, m: &DMatrix<f64>| {
            let v = m[(0, 0)];
            Ok(scalar(v * v * v))
        };
        let res = integrate_matrix_ode(&rhs, scalar(3.0), Direction::Forward, &grid(50), 4);
        match res {
            Err(Error::Blowup(msg)) => assert!(msg.contains("t =")),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn symmetrize_path_examples() {
        let g = grid(2);
        let sym = MatrixPath::constant(g.clone(), DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]));
        let (out, removed) = symmetrize_path(&sym).unwrap();
        assert_eq!(removed, 0.0);
        assert_relative_eq!(out.value(0)[(0, 1)], 0.5);

        let skew = MatrixPath::constant(g.clone(), DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        let (out, removed) = symmetrize_path(&skew).unwrap();
        assert_relative_eq!(removed, 1.0);
        assert_relative_eq!(out.value(0)[(0, 1)], 0.5);
        assert_relative_eq!(out.value(0)[(1, 0)], 0.5);

        let rect = MatrixPath::constant(g, DMatrix::zeros(2, 3));
        assert!(symmetrize_path(&rect).is_err());
    }

    proptest! {
        // Backward integration followed by forward integration from the
        // computed initial value must return to the terminal value.
        #[test]
        fn backward_forward_round_trip(a in -2.0f64..2.0, q in -2.0f64..2.0, pt in -3.0f64..3.0) {
            let g = grid(80);
            let rhs = move |_t: f64, _c: usize, m: &DMatrix<f64>| {
                Ok(scalar(a * m[(0, 0)] + q))
            };
            let back = integrate_matrix_ode(&rhs, scalar(pt), Direction::Backward, &g, 2).unwrap();
            let p0 = back.first().clone();
            let fwd = integrate_matrix_ode(&rhs, p0, Direction::Forward, &g, 2).unwrap();
            prop_assert!((fwd.last()[(0,0)] - pt).abs() < 1e-9);
        }
    }
}
