//! Problem definition: state-equation coefficients, cost weights, terminal
//! data and the uniform time grid, plus structural validation.
//!
//! The controlled state is the n-dimensional backward equation
//!
//! ```text
//! dY = (A Y + B u + C₁ Z₁ + C₂ Z₂) dt + Z₁ dW₁ + Z₂ dW₂,    Y(T) = ξ,
//! ```
//!
//! where only the filtration generated by `W₂` is observed, and the cost is
//!
//! ```text
//! J(ξ;u) = E⟨G Y(0), Y(0)⟩ + E ∫ [⟨Q Y,Y⟩ + 2⟨S₁ Y,Z₁⟩ + 2⟨S₂ Y,Z₂⟩
//!          + 2⟨S₃ Y,u⟩ + ⟨N₁ Z₁,Z₁⟩ + ⟨N₂ Z₂,Z₂⟩ + ⟨R u,u⟩] dt.
//! ```
//!
//! None of the weights is required to be positive semi-definite; solvability
//! rests on uniform convexity of the functional, which is probed empirically
//! by the verification layer rather than assumed here.

use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg;

/// State dimension `n` and control dimension `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dimensions {
    pub n: usize,
    pub m: usize,
}

impl Dimensions {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Dimension(format!(
                "dimensions must be positive, got n={n}, m={m}"
            )));
        }
        Ok(Self { n, m })
    }
}

/// Uniform partition 0 = t₀ < t₁ < … < t_N = T of the horizon.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    nodes: Vec<f64>,
}

impl PartialEq for TimeGrid {
    fn eq(&self, other: &Self) -> bool {
        self.steps == other.steps && self.horizon.to_bits() == other.horizon.to_bits()
    }
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Config("grid must have at least one step".into()));
        }
        let nodes = (0..=steps)
            .map(|k| horizon * k as f64 / steps as f64)
            .collect();
        Ok(Self { horizon, steps, nodes })
    }

    /// Build from explicit nodes, enforcing strictly increasing, uniform
    /// spacing within 1e-12 relative tolerance.
    pub fn from_nodes(nodes: &[f64]) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Config("need at least two grid nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::Config("grid must start at t = 0".into()));
        }
        let steps = nodes.len() - 1;
        let horizon = nodes[steps];
        let dt = horizon / steps as f64;
        for k in 0..steps {
            let gap = nodes[k + 1] - nodes[k];
            if gap <= 0.0 {
                return Err(Error::Config("grid nodes must be strictly increasing".into()));
            }
            if (gap - dt).abs() > 1e-12 * horizon.max(1.0) {
                return Err(Error::Config(format!(
                    "non-uniform spacing at node {k}: {gap} vs {dt}"
                )));
            }
        }
        Self::new(horizon, steps)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes (steps + 1).
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Index of the grid cell containing `t`, by the left-endpoint
    /// convention: cell k covers [t_k, t_{k+1}), and t = T maps to the last
    /// cell.
    pub fn cell_of(&self, t: f64) -> usize {
        if t >= self.horizon {
            return self.steps - 1;
        }
        let raw = (t / self.dt()).floor();
        (raw.max(0.0) as usize).min(self.steps - 1)
    }

    pub fn require_same(&self, other: &Self, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "{what}: grid (T={}, N={}) vs (T={}, N={})",
                self.horizon, self.steps, other.horizon, other.steps
            )));
        }
        Ok(())
    }
}

/// Time dependence of one coefficient or weight matrix.
///
/// All variants are evaluated with the left-endpoint convention: on the grid
/// cell [t_k, t_{k+1}) the matrix in force is the one whose breakpoint (or
/// sample) covers t_k.
#[derive(Debug, Clone)]
pub enum PathSpec {
    /// The same matrix at every time.
    Constant(DMatrix<f64>),
    /// Breakpoints (tᵢ, Mᵢ) with Mᵢ in force on [tᵢ, tᵢ₊₁).
    Piecewise(Vec<(f64, DMatrix<f64>)>),
    /// One matrix per grid node; the node count must match the grid.
    Sampled(Vec<DMatrix<f64>>),
}

impl PathSpec {
    pub fn zero(rows: usize, cols: usize) -> Self {
        PathSpec::Constant(DMatrix::zeros(rows, cols))
    }

    pub fn scalar(v: f64) -> Self {
        PathSpec::Constant(DMatrix::from_element(1, 1, v))
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            PathSpec::Constant(m) => m.shape(),
            PathSpec::Piecewise(segs) => segs.first().map(|(_, m)| m.shape()).unwrap_or((0, 0)),
            PathSpec::Sampled(v) => v.first().map(|m| m.shape()).unwrap_or((0, 0)),
        }
    }
}

/// Evaluate a path specification at every node of `grid`.
///
/// Constant specs replicate the matrix; piecewise specs use the left-closed
/// segment containing each node; sampled specs must provide exactly one
/// matrix per node.
pub fn sample_coefficient(spec: &PathSpec, grid: &TimeGrid) -> Result<Vec<DMatrix<f64>>> {
    match spec {
        PathSpec::Constant(m) => Ok(vec![m.clone(); grid.len()]),
        PathSpec::Piecewise(segs) => {
            if segs.is_empty() {
                return Err(Error::Config("piecewise path needs at least one segment".into()));
            }
            for w in segs.windows(2) {
                if w[1].0 <= w[0].0 {
                    return Err(Error::Config(
                        "piecewise breakpoints must be strictly increasing".into(),
                    ));
                }
                if w[1].1.shape() != w[0].1.shape() {
                    return Err(Error::Dimension(
                        "piecewise segments must share one shape".into(),
                    ));
                }
            }
            if segs[0].0 > 0.0 {
                return Err(Error::Config("first breakpoint must be at t = 0".into()));
            }
            let mut out = Vec::with_capacity(grid.len());
            for k in 0..grid.len() {
                let t = grid.node(k);
                let idx = segs
                    .iter()
                    .rposition(|(s, _)| *s <= t + 1e-15 * grid.horizon().max(1.0))
                    .unwrap_or(0);
                out.push(segs[idx].1.clone());
            }
            Ok(out)
        }
        PathSpec::Sampled(values) => {
            if values.len() != grid.len() {
                return Err(Error::Dimension(format!(
                    "sampled path has {} nodes, grid has {}",
                    values.len(),
                    grid.len()
                )));
            }
            Ok(values.clone())
        }
    }
}

/// State-equation coefficients A (n×n), B (n×m), C₁, C₂ (n×n).
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub a: PathSpec,
    pub b: PathSpec,
    pub c1: PathSpec,
    pub c2: PathSpec,
}

/// One weight with its recorded ingest asymmetry.
#[derive(Debug, Clone)]
struct SymmetrizedWeight {
    spec: PathSpec,
    ingest_asymmetry: f64,
}

fn symmetrize_spec(spec: PathSpec) -> SymmetrizedWeight {
    let mut worst: f64 = 0.0;
    let fix = |m: &DMatrix<f64>, worst: &mut f64| {
        if m.nrows() == m.ncols() {
            *worst = worst.max(linalg::asymmetry(m));
            linalg::symmetric_part(m)
        } else {
            m.clone()
        }
    };
    let spec = match spec {
        PathSpec::Constant(m) => PathSpec::Constant(fix(&m, &mut worst)),
        PathSpec::Piecewise(segs) => PathSpec::Piecewise(
            segs.into_iter().map(|(t, m)| (t, fix(&m, &mut worst))).collect(),
        ),
        PathSpec::Sampled(v) => PathSpec::Sampled(v.iter().map(|m| fix(m, &mut worst)).collect()),
    };
    SymmetrizedWeight { spec, ingest_asymmetry: worst }
}

/// Cost weights. G, Q, N₁, N₂, R are symmetric and are symmetrized on ingest
/// ((M+Mᵀ)/2), recording the removed asymmetry; S₁, S₂ (n×n) and S₃ (m×n)
/// are general. Indefiniteness is allowed throughout.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub g: DMatrix<f64>,
    q: SymmetrizedWeight,
    n1: SymmetrizedWeight,
    n2: SymmetrizedWeight,
    r: SymmetrizedWeight,
    pub s1: PathSpec,
    pub s2: PathSpec,
    pub s3: PathSpec,
    g_ingest_asymmetry: f64,
}

impl WeightSet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        g: DMatrix<f64>,
        q: PathSpec,
        s1: PathSpec,
        s2: PathSpec,
        s3: PathSpec,
        n1: PathSpec,
        n2: PathSpec,
        r: PathSpec,
    ) -> Self {
        let g_asym = linalg::asymmetry(&g);
        Self {
            g: linalg::symmetric_part(&g),
            q: symmetrize_spec(q),
            n1: symmetrize_spec(n1),
            n2: symmetrize_spec(n2),
            r: symmetrize_spec(r),
            s1,
            s2,
            s3,
            g_ingest_asymmetry: g_asym,
        }
    }

    pub fn q(&self) -> &PathSpec {
        &self.q.spec
    }
    pub fn n1(&self) -> &PathSpec {
        &self.n1.spec
    }
    pub fn n2(&self) -> &PathSpec {
        &self.n2.spec
    }
    pub fn r(&self) -> &PathSpec {
        &self.r.spec
    }

    /// Largest asymmetry removed from any symmetric weight on ingest.
    pub fn max_ingest_asymmetry(&self) -> f64 {
        self.g_ingest_asymmetry
            .max(self.q.ingest_asymmetry)
            .max(self.n1.ingest_asymmetry)
            .max(self.n2.ingest_asymmetry)
            .max(self.r.ingest_asymmetry)
    }
}

/// Terminal functional evaluated on a discretized Brownian path.
///
/// `w1` and `w2` hold the driver values at every grid node. The name is used
/// for provenance hashing of problem definitions.
#[derive(Clone)]
pub struct TerminalFunctional {
    pub name: String,
    pub eval: Arc<dyn Fn(&[f64], &[f64]) -> DVector<f64> + Send + Sync>,
}

impl std::fmt::Debug for TerminalFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TerminalFunctional({})", self.name)
    }
}

/// Terminal condition ξ for the backward state.
#[derive(Debug, Clone)]
pub enum TerminalCondition {
    /// ξ = c, a deterministic vector.
    Deterministic(DVector<f64>),
    /// ξ = c + b₁ W₁(T) + b₂ W₂(T).
    AffineInTerminalBm {
        c: DVector<f64>,
        b1: DVector<f64>,
        b2: DVector<f64>,
    },
    /// ξ given path-wise on the simulation ensemble.
    SampledFunctional(TerminalFunctional),
}

impl TerminalCondition {
    pub fn zero(n: usize) -> Self {
        TerminalCondition::Deterministic(DVector::zeros(n))
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            TerminalCondition::Deterministic(c) => Some(c.len()),
            TerminalCondition::AffineInTerminalBm { c, .. } => Some(c.len()),
            TerminalCondition::SampledFunctional(_) => None,
        }
    }
}

/// A complete control problem instance.
#[derive(Debug, Clone)]
pub struct LqProblem {
    pub dims: Dimensions,
    pub grid: TimeGrid,
    pub coeffs: CoefficientSet,
    pub weights: WeightSet,
    pub terminal: TerminalCondition,
}

/// State-equation coefficients evaluated at every grid node, the form used
/// by the integrators and simulators (left-endpoint lookups by cell index).
#[derive(Debug, Clone)]
pub struct SampledCoefficients {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub c1: Vec<DMatrix<f64>>,
    pub c2: Vec<DMatrix<f64>>,
}

impl SampledCoefficients {
    pub fn from_problem(p: &LqProblem) -> Result<Self> {
        Ok(Self {
            a: sample_coefficient(&p.coeffs.a, &p.grid)?,
            b: sample_coefficient(&p.coeffs.b, &p.grid)?,
            c1: sample_coefficient(&p.coeffs.c1, &p.grid)?,
            c2: sample_coefficient(&p.coeffs.c2, &p.grid)?,
        })
    }
}

/// Cost weights evaluated at every grid node.
#[derive(Debug, Clone)]
pub struct SampledWeights {
    pub g: DMatrix<f64>,
    pub q: Vec<DMatrix<f64>>,
    pub s1: Vec<DMatrix<f64>>,
    pub s2: Vec<DMatrix<f64>>,
    pub s3: Vec<DMatrix<f64>>,
    pub n1: Vec<DMatrix<f64>>,
    pub n2: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
}

impl SampledWeights {
    pub fn from_problem(p: &LqProblem) -> Result<Self> {
        Ok(Self {
            g: p.weights.g.clone(),
            q: sample_coefficient(p.weights.q(), &p.grid)?,
            s1: sample_coefficient(&p.weights.s1, &p.grid)?,
            s2: sample_coefficient(&p.weights.s2, &p.grid)?,
            s3: sample_coefficient(&p.weights.s3, &p.grid)?,
            n1: sample_coefficient(p.weights.n1(), &p.grid)?,
            n2: sample_coefficient(p.weights.n2(), &p.grid)?,
            r: sample_coefficient(p.weights.r(), &p.grid)?,
        })
    }
}

/// Outcome of one named structural check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// All structural checks for a problem; the pipeline rejects the problem iff
/// any check failed.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Asymmetry above this bound fails validation; below it the weight is
/// silently repaired on ingest (file round-trip noise).
pub const SYMMETRY_FAIL_TOL: f64 = 1e-8;

fn check_shape(
    checks: &mut Vec<CheckResult>,
    name: &str,
    spec: &PathSpec,
    rows: usize,
    cols: usize,
) {
    let got = spec.shape();
    checks.push(CheckResult {
        name: format!("shape:{name}"),
        passed: got == (rows, cols),
        detail: format!("expected {rows}x{cols}, got {}x{}", got.0, got.1),
    });
}

fn check_finite_path(checks: &mut Vec<CheckResult>, name: &str, spec: &PathSpec, grid: &TimeGrid) {
    let result = sample_coefficient(spec, grid);
    match result {
        Ok(values) => {
            let bad = values.iter().position(|m| !linalg::all_finite(m));
            checks.push(CheckResult {
                name: format!("finite:{name}"),
                passed: bad.is_none(),
                detail: match bad {
                    None => "all nodes finite".into(),
                    Some(k) => format!("non-finite entry at node {k} (t = {})", grid.node(k)),
                },
            });
        }
        Err(e) => checks.push(CheckResult {
            name: format!("finite:{name}"),
            passed: false,
            detail: format!("cannot sample: {e}"),
        }),
    }
}

/// Run every hypothesis-derived structural check: mutually consistent shapes,
/// symmetry of the symmetric weights (against the recorded ingest
/// asymmetry), and finiteness of every coefficient and weight at every grid
/// node. Failures are reported, not raised.
pub fn validate_problem(p: &LqProblem) -> ValidationReport {
    let n = p.dims.n;
    let m = p.dims.m;
    let mut checks = Vec::new();

    check_shape(&mut checks, "A", &p.coeffs.a, n, n);
    check_shape(&mut checks, "B", &p.coeffs.b, n, m);
    check_shape(&mut checks, "C1", &p.coeffs.c1, n, n);
    check_shape(&mut checks, "C2", &p.coeffs.c2, n, n);
    checks.push(CheckResult {
        name: "shape:G".into(),
        passed: p.weights.g.shape() == (n, n),
        detail: format!("expected {n}x{n}, got {}x{}", p.weights.g.nrows(), p.weights.g.ncols()),
    });
    check_shape(&mut checks, "Q", p.weights.q(), n, n);
    check_shape(&mut checks, "S1", &p.weights.s1, n, n);
    check_shape(&mut checks, "S2", &p.weights.s2, n, n);
    check_shape(&mut checks, "S3", &p.weights.s3, m, n);
    check_shape(&mut checks, "N1", p.weights.n1(), n, n);
    check_shape(&mut checks, "N2", p.weights.n2(), n, n);
    check_shape(&mut checks, "R", p.weights.r(), m, m);

    let asym = p.weights.max_ingest_asymmetry();
    checks.push(CheckResult {
        name: "symmetry:weights".into(),
        passed: asym <= SYMMETRY_FAIL_TOL,
        detail: format!("max ingest asymmetry {asym:.3e} (fail above {SYMMETRY_FAIL_TOL:.0e})"),
    });

    check_finite_path(&mut checks, "A", &p.coeffs.a, &p.grid);
    check_finite_path(&mut checks, "B", &p.coeffs.b, &p.grid);
    check_finite_path(&mut checks, "C1", &p.coeffs.c1, &p.grid);
    check_finite_path(&mut checks, "C2", &p.coeffs.c2, &p.grid);
    check_finite_path(&mut checks, "Q", p.weights.q(), &p.grid);
    check_finite_path(&mut checks, "S1", &p.weights.s1, &p.grid);
    check_finite_path(&mut checks, "S2", &p.weights.s2, &p.grid);
    check_finite_path(&mut checks, "S3", &p.weights.s3, &p.grid);
    check_finite_path(&mut checks, "N1", p.weights.n1(), &p.grid);
    check_finite_path(&mut checks, "N2", p.weights.n2(), &p.grid);
    check_finite_path(&mut checks, "R", p.weights.r(), &p.grid);
    checks.push(CheckResult {
        name: "finite:G".into(),
        passed: linalg::all_finite(&p.weights.g),
        detail: "terminal-cost weight".into(),
    });

    let term_ok = match &p.terminal {
        TerminalCondition::Deterministic(c) => {
            c.len() == n && c.iter().all(|x| x.is_finite())
        }
        TerminalCondition::AffineInTerminalBm { c, b1, b2 } => {
            c.len() == n
                && b1.len() == n
                && b2.len() == n
                && c.iter().chain(b1.iter()).chain(b2.iter()).all(|x| x.is_finite())
        }
        TerminalCondition::SampledFunctional(_) => true,
    };
    checks.push(CheckResult {
        name: "terminal:shape-finite".into(),
        passed: term_ok,
        detail: "terminal data must be n-dimensional and finite".into(),
    });

    ValidationReport { checks }
}

/// Canonical one-dimensional instance on [0, 1] with indefinite weights:
/// A = B = 1, C₁ = C₂ = 0, G = Q = N₁ = N₂ = −1, S = 0, R = 5. Its cost
/// functional is uniformly convex with constant 4 even though every state
/// weight is negative, which makes it the standard fixture for the
/// indefinite pipeline. The terminal condition is left at zero; callers
/// supply their own ξ.
///
/// Errors when the grid horizon differs from 1.
pub fn scalar_indefinite_example(grid: &TimeGrid) -> Result<LqProblem> {
    if (grid.horizon() - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "the scalar indefinite example lives on [0,1]; got horizon {}",
            grid.horizon()
        )));
    }
    let dims = Dimensions::new(1, 1)?;
    let coeffs = CoefficientSet {
        a: PathSpec::scalar(1.0),
        b: PathSpec::scalar(1.0),
        c1: PathSpec::scalar(0.0),
        c2: PathSpec::scalar(0.0),
    };
    let weights = WeightSet::new(
        DMatrix::from_element(1, 1, -1.0),
        PathSpec::scalar(-1.0),
        PathSpec::scalar(0.0),
        PathSpec::scalar(0.0),
        PathSpec::scalar(0.0),
        PathSpec::scalar(-1.0),
        PathSpec::scalar(-1.0),
        PathSpec::scalar(5.0),
    );
    Ok(LqProblem {
        dims,
        grid: grid.clone(),
        coeffs,
        weights,
        terminal: TerminalCondition::zero(1),
    })
}

impl LqProblem {
    pub fn with_terminal(mut self, terminal: TerminalCondition) -> Self {
        self.terminal = terminal;
        self
    }
}
