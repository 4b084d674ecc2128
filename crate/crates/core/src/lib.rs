//! Real-time nonlinear model predictive control with a two-phase horizon.
//!
//! The first phase (stages `0..M`) keeps hard box constraints and is solved by a
//! structure-exploiting interior-point QP solver. The second phase (stages
//! `M..=N`) replaces the boxes with log-barrier terms, which turns it into an
//! unconstrained QP that a single Riccati backward sweep condenses into a
//! quadratic terminal cost for the first phase.
//!
//! Four controller families share this machinery:
//!
//! * `RTI`: plain real-time iteration over the full horizon.
//! * `PT`: partial tightening, second phase linearized at the shifted iterate.
//! * `CLC`: closed-loop costing, second phase driven by a linearized policy.
//! * `PEPT`: partial tightening whose second-phase linearization point is
//!   generated by an external policy (stage-wise or by rollout).
//!
//! A 12-state quadcopter model, a lemniscate tracking task and a closed-loop
//! simulation harness reproduce the benchmark these controllers are compared on.

// `!(a < b)` is used on purpose so that NaN takes the failure branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controllers;
pub mod error;
pub mod linearization;
pub mod ocp;
pub mod policy;
pub mod qp;
pub mod quadcopter;
pub mod riccati;
pub mod sim;

pub use controllers::{
    Controller, ControllerConfig, ControllerKind, InitStrategy, MpcController, PolicyController,
    SecondPhaseInit, StepReport,
};
pub use error::{Error, Result};
pub use linearization::{StageBounds, StageLinearization, TerminalQuadratic};
pub use ocp::{DiscreteDynamics, OcpSpec, Reference, Trajectory};
pub use policy::{LinearPolicy, Policy, PolicyNet};
pub use qp::{InteriorPointSolver, QpSolution, QpStatus};
pub use quadcopter::{QuadParams, Quadcopter};
pub use riccati::RiccatiSweep;
pub use sim::{EpisodeResult, Task};
