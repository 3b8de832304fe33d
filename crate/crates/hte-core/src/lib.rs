//! Hypothesis tests for homogeneous treatment effects in instrumental-variable
//! models.
//!
//! Under effect homogeneity the structural error does not depend on the
//! treatment level, which implies the moment restriction
//! `E[U · X · (W_k − E W_k)] = 0` for the model residual U, a covariate X and
//! an instrument coordinate W_k. This crate estimates that moment two ways and
//! turns each into a bootstrap test:
//!
//! * [`linear::linear_test`] — U from a two-stage least squares fit of a
//!   linear outcome equation;
//! * [`np_test::np_test`] — U from a Tikhonov-regularized nonparametric IV
//!   fit with kernel smoothing (scalar treatment and instrument).
//!
//! Supporting pieces: a pairwise bootstrap engine with a warp-speed
//! accelerator for Monte Carlo studies ([`bootstrap`]), independence
//! pre-tests of the X ⫫ W_k requirement ([`diagnostics`]), and the simulation
//! harness with analytically solvable designs used as oracles ([`sim`]).

pub mod bootstrap;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod kernels;
pub mod linear;
pub mod np_test;
pub mod npiv;
pub mod rng;
pub mod sim;

pub use bootstrap::{bootstrap, warp_speed_pvalues, PValueMode, TestReport, WarpSpeedPool};
pub use dataset::{load_columns, load_csv, ColumnRole, ColumnSpec, Dataset};
pub use diagnostics::{chi_squared_independence, ks_two_sample, IndependenceReport};
pub use error::{Error, Result};
pub use kernels::{
    default_weights, kernel_eval, silverman_bandwidths, Bandwidths, KernelFamily, KernelSpec,
    WeightDensity,
};
pub use linear::{linear_statistic, linear_test, tsls_fit, LinearFit, LinearTestConfig};
pub use np_test::{discrete_npiv_oracle, np_statistic, np_test, DiscreteJoint, NpTestConfig};
pub use npiv::{
    build_matrices, cross_validate_lambda, npiv_fit, tikhonov_solve, BandwidthPolicy, CvResult,
    LambdaPolicy, NpivFit,
};
pub use sim::{
    generate, oracle_checks, run_power_curve, run_size_table, BootstrapEngine, Dgp, OracleCheck,
    OracleReport, SimResult, SimScenario,
};
