//! Solver and verifier for indefinite backward stochastic linear-quadratic
//! (LQ) control under partial information.
//!
//! The controlled state is a linear backward SDE driven by two Brownian
//! motions of which only the second is observed; the quadratic cost may have
//! indefinite weights. The library computes the optimal feedback control and
//! the value through a deterministic decoupling kernel and a filtered
//! adjoint backward equation, and certifies optimality numerically with
//! independent oracles (variational expansion, stationarity residual, exact
//! scenario-tree quadratic programming).
//!
//! # Pipeline
//!
//! 1. [`model`] — problem definition and structural validation.
//! 2. [`riccati`] — state-weight elimination transform Φ and the
//!    terminal-penalty family of Lyapunov/Riccati equations.
//! 3. [`gamma`] — the decoupling kernel Γ, solved directly and
//!    cross-validated through the inverse-Riccati limit.
//! 4. [`adjoint`] — the filtered adjoint BSDE (closed-form for affine
//!    terminal data, least-squares Monte Carlo otherwise).
//! 5. [`sim`] — closed-loop simulation of the filtered state and
//!    reconstruction of the optimal processes.
//! 6. [`verify`] — cost evaluation, convexity probing, stationarity and
//!    second-order expansion checks, value formula, scenario-tree oracle.
//!
//! # Examples directory
//!
//! Each major capability has a runnable example:
//!
//! ```text
//! cargo run --release --example solve_pipeline      # end-to-end solve
//! cargo run --release --example lambda_sweep        # Riccati family diagnostics
//! cargo run --release --example adjoint_cross_check # affine vs LSMC adjoint
//! cargo run --release --example simulate_and_verify # optimality certificates
//! cargo run --release --example tree_oracle         # exact discrete oracle
//! cargo run --release --example convexity_probe     # uniform-convexity probing
//! cargo run --release --example problem_file_io     # problem files and CSV
//! ```
//!
//! A thin `bslq` binary drives the same pipeline from problem files with the
//! subcommands `solve`, `verify`, `oracle` and `sweep-lambda`.

pub mod adjoint;
pub mod cli;
pub mod config;
pub mod csvio;
pub mod ensemble;
pub mod error;
pub mod gamma;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod riccati;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
pub use model::{
    scalar_indefinite_example, validate_problem, CoefficientSet, Dimensions, LqProblem, PathSpec,
    TerminalCondition, TimeGrid, ValidationReport, WeightSet,
};
pub use ode::{integrate_matrix_ode, symmetrize_path, Direction, MatrixPath};
