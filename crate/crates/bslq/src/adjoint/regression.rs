//! Polynomial-basis least squares for conditional-expectation estimates.
//!
//! Conditional expectations given the full filtration regress on monomials in
//! the current driver pair (W₁(t), W₂(t)); filters given the observed
//! filtration regress on monomials in W₂(t) alone. Degenerate columns (for
//! instance every non-constant feature at t = 0) are dropped before the
//! normal equations are formed; a scaled Gram condition number above 1e10 is
//! reported as rank deficiency rather than silently regularized.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Condition-number ceiling for the scaled normal equations.
pub const MAX_GRAM_CONDITION: f64 = 1e10;

/// Which σ-algebra the regression approximates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureScope {
    /// Monomials in (W₁, W₂): conditional expectation given F_t.
    Full,
    /// Monomials in W₂ only: filter given G_t.
    Observed,
}

/// Polynomial basis of total degree ≤ `degree` (1 ≤ degree ≤ 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasisSpec {
    pub degree: usize,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self { degree: 2 }
    }
}

impl BasisSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.degree) {
            return Err(Error::Config(format!(
                "basis degree must be 1..=3, got {}",
                self.degree
            )));
        }
        Ok(())
    }

    /// Monomial exponents (a, b) meaning w1^a · w2^b, constant first.
    pub fn monomials(&self, scope: FeatureScope) -> Vec<(usize, usize)> {
        let mut out = vec![(0, 0)];
        for total in 1..=self.degree {
            match scope {
                FeatureScope::Full => {
                    for a in (0..=total).rev() {
                        out.push((a, total - a));
                    }
                }
                FeatureScope::Observed => out.push((0, total)),
            }
        }
        out
    }

    pub fn len(&self, scope: FeatureScope) -> usize {
        self.monomials(scope).len()
    }

    /// Column indices of the observed-scope features inside the full-scope
    /// feature vector (the observed basis is a sub-basis).
    pub fn embedding(&self) -> Vec<usize> {
        let full = self.monomials(FeatureScope::Full);
        self.monomials(FeatureScope::Observed)
            .iter()
            .map(|m| full.iter().position(|f| f == m).expect("sub-basis"))
            .collect()
    }

    pub fn fill_features(&self, scope: FeatureScope, w1: f64, w2: f64, out: &mut [f64]) {
        for (j, &(a, b)) in self.monomials(scope).iter().enumerate() {
            out[j] = w1.powi(a as i32) * w2.powi(b as i32);
        }
    }
}

/// Factored normal equations of one time slice, reusable across many
/// right-hand sides.
#[derive(Debug, Clone)]
pub struct SliceRegression {
    dim: usize,
    active: Vec<usize>,
    scale: Vec<f64>,
    gram_inv: DMatrix<f64>,
    /// Spectral condition number of the scaled Gram matrix.
    pub condition: f64,
    n_rows: usize,
}

impl SliceRegression {
    /// Fit from a row-major design matrix (`n_rows` × `dim`).
    pub fn fit(design: &[f64], n_rows: usize, dim: usize) -> Result<Self> {
        assert_eq!(design.len(), n_rows * dim);
        if n_rows == 0 {
            return Err(Error::Config("regression needs at least one row".into()));
        }
        // Column scales; drop numerically dead columns (keep the constant).
        let mut maxabs = vec![0.0f64; dim];
        for r in 0..n_rows {
            for j in 0..dim {
                maxabs[j] = maxabs[j].max(design[r * dim + j].abs());
            }
        }
        let active: Vec<usize> = (0..dim)
            .filter(|&j| j == 0 || maxabs[j] > 1e-12)
            .collect();
        let na = active.len();
        let scale: Vec<f64> = active
            .iter()
            .map(|&j| if maxabs[j] > 0.0 { 1.0 / maxabs[j] } else { 1.0 })
            .collect();

        let mut gram = DMatrix::<f64>::zeros(na, na);
        for r in 0..n_rows {
            let row = &design[r * dim..(r + 1) * dim];
            for (ia, &ja) in active.iter().enumerate() {
                let xa = row[ja] * scale[ia];
                for (ib, &jb) in active.iter().enumerate().skip(ia) {
                    gram[(ia, ib)] += xa * row[jb] * scale[ib];
                }
            }
        }
        for ia in 0..na {
            for ib in 0..ia {
                gram[(ia, ib)] = gram[(ib, ia)];
            }
        }
        let eig = gram.clone().symmetric_eigen();
        let mut emin = f64::INFINITY;
        let mut emax = 0.0f64;
        for &e in eig.eigenvalues.iter() {
            emin = emin.min(e);
            emax = emax.max(e);
        }
        let condition = if emin > 0.0 { emax / emin } else { f64::INFINITY };
        if !(condition < MAX_GRAM_CONDITION) {
            return Err(Error::RegressionRankDeficient { cond: condition });
        }
        let gram_inv = gram
            .lu()
            .try_inverse()
            .ok_or(Error::RegressionRankDeficient { cond: condition })?;
        Ok(Self { dim, active, scale, gram_inv, condition, n_rows })
    }

    /// Least-squares coefficients for one right-hand side, in full-basis
    /// indexing (dropped columns get zero).
    pub fn solve(&self, design: &[f64], rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n_rows);
        let na = self.active.len();
        let mut xty = vec![0.0f64; na];
        for r in 0..self.n_rows {
            let row = &design[r * self.dim..(r + 1) * self.dim];
            let y = rhs[r];
            for (ia, &ja) in self.active.iter().enumerate() {
                xty[ia] += row[ja] * self.scale[ia] * y;
            }
        }
        let mut full = vec![0.0f64; self.dim];
        for ia in 0..na {
            let mut c = 0.0;
            for ib in 0..na {
                c += self.gram_inv[(ia, ib)] * xty[ib];
            }
            full[self.active[ia]] = c * self.scale[ia];
        }
        full
    }
}

/// Dot product of a full-basis coefficient vector with a feature row.
#[inline]
pub fn eval_coeffs(coeffs: &[f64], features: &[f64]) -> f64 {
    coeffs.iter().zip(features).map(|(c, x)| c * x).sum()
}
