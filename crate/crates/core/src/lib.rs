//! Memory capacity of wide treelike committee machines.
//!
//! The crate evaluates the lifted random-duality free energy of a one-hidden
//! layer network with disjoint receptive fields and fixed ±1 output weights,
//! solves its stationarity conditions at lifting levels 1 to 4, and reads off
//! the capacity `α_c` as the zero of the stationary free energy.  A finite-`d`
//! Monte Carlo estimator cross-checks the first-level building block.
//!
//! ```
//! use tcmcap::{capacity, ActivationSpec, Level, SolverConfig};
//!
//! let report = capacity(Level::One, &ActivationSpec::quadratic(), &SolverConfig::default()).unwrap();
//! assert_eq!(report.alpha_c, 4.0);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation;
pub mod error;
pub mod free_energy;
pub mod oracle;
pub mod overlap;
pub mod quadrature;
pub mod solver;
pub mod special;

pub use activation::{ActivationKind, ActivationSpec, MomentSet};
pub use error::{Error, Result};
pub use free_energy::{
    fzt_kernel, ln_fzt, net_term, psi, psi_level1, sphere_term, z_infinity, FztInputs, LiftParams,
};
pub use oracle::{
    convergence_study, mc_estimate, sample_z1, McConfig, McEstimate, StudyRow, Z1Sample,
};
pub use overlap::{
    effective_coeffs, pbar, pbar_erf_closed, pbar_relu_closed, EffectiveFieldCoeffs, OverlapCurve,
};
pub use quadrature::{
    erf_mean_identity, expect1, expect1_kinked, expect2_nested, gauss_hermite, QuadratureGrid,
};
pub use solver::{
    capacity, capacity_from, capacity_pinned, capacity_with_curve, closed_form_gamma_c,
    closed_form_residual, partial2_relation, solve_stationary, CapacityReport, FreeEnergy,
    Iterations, Level, SolverConfig, System, Var, Variant,
};
