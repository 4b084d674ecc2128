//! Double-integrator LQ fixtures for the controller tests.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pept_core::controllers::{InitStrategy, MpcController};
use pept_core::ocp::LinearDynamics;
use pept_core::policy::lqr_policy;
use pept_core::{
    ControllerConfig, OcpSpec, Policy, Reference, StageLinearization, TerminalQuadratic,
};

pub const DT: f64 = 0.1;

pub fn double_integrator() -> LinearDynamics {
    LinearDynamics::new(
        DMatrix::from_row_slice(2, 2, &[1.0, DT, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.5 * DT * DT, DT]),
    )
}

pub fn spec(m: usize, n: usize, v_max: f64) -> OcpSpec {
    let inf = f64::INFINITY;
    OcpSpec {
        n_x: 2,
        n_u: 1,
        control_horizon: m,
        horizon: n,
        dt: DT,
        q: DVector::from_vec(vec![1.0, 0.1]),
        r: DVector::from_vec(vec![0.1]),
        x_lb: DVector::from_vec(vec![-inf, -v_max]),
        x_ub: DVector::from_vec(vec![inf, v_max]),
        u_lb: DVector::from_vec(vec![-inf]),
        u_ub: DVector::from_vec(vec![inf]),
        tau: 1e-2,
        gamma: 1.0,
    }
}

pub fn target(n: usize, p: f64) -> Reference {
    let x = DVector::from_vec(vec![p, 0.0]);
    Reference::constant(&x, &DVector::zeros(1), n)
}

pub fn lqr(spec: &OcpSpec) -> Arc<dyn Policy> {
    Arc::new(
        lqr_policy(
            spec,
            &double_integrator(),
            &DVector::zeros(2),
            &DVector::zeros(1),
        )
        .unwrap(),
    )
}

pub fn controller(cfg: ControllerConfig, base: &OcpSpec) -> MpcController<LinearDynamics> {
    let policy = cfg.kind.needs_policy().then(|| lqr(base));
    MpcController::new(cfg, base, double_integrator(), policy, DVector::zeros(1)).unwrap()
}

pub fn warm(mut cfg: ControllerConfig) -> ControllerConfig {
    cfg.init = InitStrategy::WarmStart;
    cfg
}

/// Stage and terminal data of the LQ tracking problem towards a fixed `x_ref`,
/// written out independently of the linearization code.
pub fn lq_stages(
    base: &OcpSpec,
    x_ref: &DVector<f64>,
    n: usize,
) -> (Vec<StageLinearization>, TerminalQuadratic) {
    let dynamics = double_integrator();
    let q = DMatrix::from_diagonal(&(&base.q * 2.0));
    let r = DMatrix::from_diagonal(&(&base.r * 2.0));
    let stage = StageLinearization {
        a: dynamics.a.clone(),
        b: dynamics.b.clone(),
        c: DVector::zeros(2),
        q_blk: q.clone(),
        r_blk: r,
        s_blk: DMatrix::zeros(1, 2),
        q: -(&q * x_ref),
        r: DVector::zeros(1),
        const_term: 0.0,
        bounds: None,
    };
    let terminal = TerminalQuadratic {
        hessian: q.clone(),
        gradient: -(&q * x_ref),
        constant: 0.0,
    };
    (vec![stage; n], terminal)
}
