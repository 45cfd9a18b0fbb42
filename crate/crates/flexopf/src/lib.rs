//! AC optimal power flow with continuously tunable transmission-line
//! susceptances.
//!
//! A transmission line whose series susceptance can be scaled by a ratio
//! `k ∈ [k_min, k_max]` (a TCSC-style series device) makes the admittance
//! matrix a decision variable and puts the OPF outside the reach of the
//! usual semidefinite relaxation.  This crate implements the circuit
//! transformation that restores convexity: each tunable line is replaced by
//! a constant-susceptance line bridging a pair of transformers that share
//! one continuously adjustable tap ratio `√k`.  The tap correlation is
//! expressible with linear constraints on the lifted Hermitian matrix
//! `W = v·vᴴ`, so the whole problem becomes a standard-form semidefinite
//! program over an augmented network.
//!
//! The pipeline, module by module:
//!
//! - [`network`] — MATPOWER case parsing, per-unit model, flexible-line
//!   configuration, case modifications.
//! - [`transform`] — the transformer-pair equivalent and the augmented
//!   network (two secondary buses and a fictitious coupling conductance
//!   `ε·|b_rated|` per tunable line).
//! - [`formulation`] — assembly of the relaxed problem as a conic program:
//!   one PSD block (real symmetric embedding of `W`), scalar dispatch
//!   variables, quadratic-cost epigraphs, and the optional reactive-power
//!   penalty that promotes rank-one solutions.
//! - [`solver`] — a dense primal-dual interior-point method
//!   (Nesterov–Todd scaling, Mehrotra predictor-corrector) for programs
//!   with nonnegative, second-order and PSD cones, plus an SDPA-format
//!   bridge for cross-checking against external solvers.
//! - [`recovery`] — numeric rank decision, voltage and tuning-ratio
//!   recovery from a rank-one `W`, and the penalized/relaxed
//!   optimality-gap bound.
//! - [`oracle`] — formulation-independent AC feasibility checks and a
//!   brute-force grid oracle for certifying small cases.
//! - [`cli`] — the `flexopf` command-line front end (solve / compare /
//!   validate) and the on-disk report formats.
//!
//! Most capabilities have a runnable demonstration under `examples/`; see
//! the README for the list.

pub mod cli;
pub mod formulation;
pub mod network;
pub mod oracle;
pub mod recovery;
pub mod report;
pub mod sdpa;
pub mod solver;
pub mod transform;

pub use network::{
    apply_case_modifications, parse_flex_config, parse_matpower_case, Branch, Bus, BusKind,
    CaseModifications, FlexConfig, FlexLineSpec, Generator, NetworkCase, NetworkError,
};
pub use transform::{augment, AugmentedNetwork};

/// Complex scalar used throughout (per-unit voltages, admittances, powers).
pub type Complex = num_complex::Complex<f64>;
