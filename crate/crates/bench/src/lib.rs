//! Problem instances shared by the benchmarks.

use nalgebra::DVector;
use pept_core::linearization::{linearize_trajectory, Linearization};
use pept_core::quadcopter::{benchmark_ocp, Rk4};
use pept_core::sim::sample_initial_state;
use pept_core::{OcpSpec, QuadParams, Quadcopter, Task, Trajectory};

/// Quadcopter QP data linearized along the easy-task reference.
pub struct Instance {
    pub spec: OcpSpec,
    pub lin: Linearization,
    pub x0: DVector<f64>,
}

pub fn quadcopter() -> Quadcopter {
    Quadcopter::new(QuadParams::default()).expect("default parameters are valid")
}

/// Horizon split `m`/`n` with barrier weight `tau`; `m == n` gives the
/// full-horizon problem.
pub fn instance(m: usize, n: usize, tau: f64) -> Instance {
    let quad = quadcopter();
    let spec = benchmark_ocp(m, n, tau);
    let reference = Task::easy().reference_window(0.0, n);
    let traj = Trajectory::new(reference.states.clone(), reference.controls.clone())
        .expect("reference lengths match");
    let dynamics = Rk4::new(quad, spec.dt).expect("positive step");
    let lin = linearize_trajectory(&traj, &reference, &spec, &dynamics)
        .expect("reference lies inside the box");
    Instance {
        spec,
        lin,
        x0: sample_initial_state(0),
    }
}
