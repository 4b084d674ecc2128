//! 12-state quadcopter model, RK4 discretization with exact sensitivities and
//! the lemniscate tracking reference.
//!
//! State layout: position (0..3), world-frame velocity (3..6), roll/pitch/yaw
//! (6..9), body angular rates (9..12). Controls are the four rotor thrusts in N.

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::ocp::{DiscreteDynamics, OcpSpec};

pub const N_X: usize = 12;
pub const N_U: usize = 4;

/// Per-rotor thrust that balances gravity, N.
pub const HOVER_THRUST: f64 = 0.06615;
pub const GRAVITY: f64 = 9.81;
/// Prediction sampling time of the benchmark OCP, s.
pub const PREDICTION_DT: f64 = 0.05;
/// Lemniscate period, s.
pub const LEMNISCATE_PERIOD: f64 = 4.5;

/// Continuous-time model `ẋ = f(x, u)` with analytic Jacobians.
pub trait OdeModel {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;

    /// Returns `(∂f/∂x, ∂f/∂u)`.
    fn rhs_jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)>;
}

/// Linear ODE `ẋ = A x + B u`.
#[derive(Debug, Clone)]
pub struct LinearOde {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl OdeModel for LinearOde {
    fn n_x(&self) -> usize {
        self.a.nrows()
    }

    fn n_u(&self) -> usize {
        self.b.ncols()
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * x + &self.b * u)
    }

    fn rhs_jacobian(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.clone(), self.b.clone()))
    }
}

fn finite(v: DVector<f64>) -> Result<DVector<f64>> {
    if v.iter().all(|e| e.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFinite("integration"))
    }
}

/// One classical RK4 step with the control held constant.
pub fn rk4_step<M: OdeModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    let k1 = model.rhs(x, u)?;
    let k2 = model.rhs(&(x + &k1 * (0.5 * h)), u)?;
    let k3 = model.rhs(&(x + &k2 * (0.5 * h)), u)?;
    let k4 = model.rhs(&(x + &k3 * h), u)?;
    finite(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// RK4 step together with the exact Jacobians of the discrete map, obtained
/// by propagating forward sensitivities through the four stages.
pub fn rk4_sensitivities<M: OdeModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n_x = model.n_x();
    let eye = DMatrix::<f64>::identity(n_x, n_x);

    let k1 = model.rhs(x, u)?;
    let (jx, ju) = model.rhs_jacobian(x, u)?;
    let dk1_x = jx;
    let dk1_u = ju;

    let x2 = x + &k1 * (0.5 * h);
    let k2 = model.rhs(&x2, u)?;
    let (jx, ju) = model.rhs_jacobian(&x2, u)?;
    let dk2_x = &jx * (&eye + &dk1_x * (0.5 * h));
    let dk2_u = &jx * &dk1_u * (0.5 * h) + ju;

    let x3 = x + &k2 * (0.5 * h);
    let k3 = model.rhs(&x3, u)?;
    let (jx, ju) = model.rhs_jacobian(&x3, u)?;
    let dk3_x = &jx * (&eye + &dk2_x * (0.5 * h));
    let dk3_u = &jx * &dk2_u * (0.5 * h) + ju;

    let x4 = x + &k3 * h;
    let k4 = model.rhs(&x4, u)?;
    let (jx, ju) = model.rhs_jacobian(&x4, u)?;
    let dk4_x = &jx * (&eye + &dk3_x * h);
    let dk4_u = &jx * &dk3_u * h + ju;

    let next = finite(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))?;
    let a = eye + (dk1_x + dk2_x * 2.0 + dk3_x * 2.0 + dk4_x) * (h / 6.0);
    let b = (dk1_u + dk2_u * 2.0 + dk3_u * 2.0 + dk4_u) * (h / 6.0);
    Ok((next, a, b))
}

/// Discrete dynamics given by one RK4 step of length `h`.
#[derive(Debug, Clone)]
pub struct Rk4<M> {
    pub model: M,
    pub h: f64,
}

impl<M: OdeModel> Rk4<M> {
    pub fn new(model: M, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "RK4 step must be positive, got {h}"
            )));
        }
        Ok(Self { model, h })
    }
}

impl<M: OdeModel> DiscreteDynamics for Rk4<M> {
    fn n_x(&self) -> usize {
        self.model.n_x()
    }

    fn n_u(&self) -> usize {
        self.model.n_u()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        rk4_step(&self.model, x, u, self.h)
    }

    fn linearize(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        rk4_sensitivities(&self.model, x, u, self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RotorLayout {
    /// Rotors on the diagonals.
    #[default]
    X,
    /// Rotors on the body axes: 1 at +x, 2 at +y, 3 at −x, 4 at −y.
    Plus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadParams {
    /// Mass, kg.
    pub mass: f64,
    /// Diagonal of the inertia matrix, kg·m².
    pub inertia: [f64; 3],
    /// Arm length, m.
    pub arm: f64,
    pub gravity: f64,
    /// Yaw torque per unit thrust, m.
    pub torque_coeff: f64,
    /// Per-rotor hover thrust, N.
    pub u_hover: f64,
    pub layout: RotorLayout,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 4.0 * HOVER_THRUST / GRAVITY,
            inertia: [1.4e-5, 1.4e-5, 2.17e-5],
            arm: 0.0397,
            gravity: GRAVITY,
            torque_coeff: 0.005964552,
            u_hover: HOVER_THRUST,
            layout: RotorLayout::X,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidSpec(msg));
        if !(self.mass > 0.0) || self.inertia.iter().any(|j| !(*j > 0.0)) {
            return invalid("mass and inertia must be positive".into());
        }
        if !(self.arm > 0.0 && self.gravity > 0.0 && self.torque_coeff.is_finite()) {
            return invalid("arm length and gravity must be positive".into());
        }
        let weight = self.mass * self.gravity;
        if ((4.0 * self.u_hover - weight) / weight).abs() > 1e-6 {
            return invalid(format!(
                "hover thrust {} inconsistent with m·g = {weight}",
                self.u_hover
            ));
        }
        Ok(())
    }

    /// Copy with mass and inertia scaled by `factor`; the hover thrust follows.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut p = self.clone();
        p.mass *= factor;
        p.inertia.iter_mut().for_each(|j| *j *= factor);
        p.u_hover *= factor;
        p
    }

    /// Maps rotor thrusts to body moments.
    pub fn moment_matrix(&self) -> Matrix3x4<f64> {
        let k = self.torque_coeff;
        match self.layout {
            RotorLayout::X => {
                let l = self.arm / SQRT_2;
                Matrix3x4::new(
                    -l, -l, l, l, //
                    -l, l, l, -l, //
                    -k, k, -k, k,
                )
            }
            RotorLayout::Plus => {
                let l = self.arm;
                Matrix3x4::new(
                    0.0, l, 0.0, -l, //
                    -l, 0.0, l, 0.0, //
                    -k, k, -k, k,
                )
            }
        }
    }
}

/// The quadcopter ODE.
#[derive(Debug, Clone)]
pub struct Quadcopter {
    params: QuadParams,
    moments: Matrix3x4<f64>,
}

struct Attitude {
    sr: f64,
    cr: f64,
    sp: f64,
    cp: f64,
    sy: f64,
    cy: f64,
}

impl Quadcopter {
    pub fn new(params: QuadParams) -> Result<Self> {
        params.validate()?;
        Ok(Self::new_unchecked(params))
    }

    /// Skips the hover-thrust consistency check, e.g. for a mismatched plant.
    pub fn new_unchecked(params: QuadParams) -> Self {
        let moments = params.moment_matrix();
        Self { params, moments }
    }

    pub fn params(&self) -> &QuadParams {
        &self.params
    }

    pub fn hover_control(&self) -> DVector<f64> {
        DVector::from_element(N_U, self.params.u_hover)
    }

    fn attitude(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<Attitude> {
        check_dim("quadcopter state", N_X, x.len())?;
        check_dim("quadcopter control", N_U, u.len())?;
        if !x.iter().chain(u.iter()).all(|e| e.is_finite()) {
            return Err(Error::NonFinite("quadcopter state or control"));
        }
        let (roll, pitch, yaw) = (x[6], x[7], x[8]);
        if roll.abs() >= FRAC_PI_2 || pitch.abs() >= FRAC_PI_2 {
            return Err(Error::ModelValidity(format!(
                "roll {roll:.4} / pitch {pitch:.4} outside (-π/2, π/2)"
            )));
        }
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        Ok(Attitude {
            sr,
            cr,
            sp,
            cp,
            sy,
            cy,
        })
    }
}

impl OdeModel for Quadcopter {
    fn n_x(&self) -> usize {
        N_X
    }

    fn n_u(&self) -> usize {
        N_U
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let Attitude {
            sr,
            cr,
            sp,
            cp,
            sy,
            cy,
        } = self.attitude(x, u)?;
        let p = &self.params;
        let thrust: f64 = u.sum();
        let w = Vector3::new(x[9], x[10], x[11]);
        let j = Vector3::from(p.inertia);

        // Third column of the ZYX body-to-world rotation.
        let body_z = Vector3::new(cy * sp * cr + sy * sr, sy * sp * cr - cy * sr, cp * cr);
        let acc = body_z * (thrust / p.mass) - Vector3::z() * p.gravity;

        let tp = sp / cp;
        let euler_rates = Vector3::new(
            w.x + sr * tp * w.y + cr * tp * w.z,
            cr * w.y - sr * w.z,
            (sr * w.y + cr * w.z) / cp,
        );

        let torque = self.moments * nalgebra::Vector4::new(u[0], u[1], u[2], u[3]);
        let gyro = w.cross(&j.component_mul(&w));
        let w_dot = (torque - gyro).component_div(&j);

        let mut dx = DVector::zeros(N_X);
        dx.rows_mut(0, 3).copy_from(&x.rows(3, 3));
        dx.rows_mut(3, 3).copy_from(&acc);
        dx.rows_mut(6, 3).copy_from(&euler_rates);
        dx.rows_mut(9, 3).copy_from(&w_dot);
        Ok(dx)
    }

    fn rhs_jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let Attitude {
            sr,
            cr,
            sp,
            cp,
            sy,
            cy,
        } = self.attitude(x, u)?;
        let p = &self.params;
        let thrust: f64 = u.sum();
        let (wx, wy, wz) = (x[9], x[10], x[11]);
        let [jx, jy, jz] = p.inertia;

        let mut fx = DMatrix::zeros(N_X, N_X);
        let mut fu = DMatrix::zeros(N_X, N_U);

        // ṗ = v
        for i in 0..3 {
            fx[(i, 3 + i)] = 1.0;
        }

        // v̇ = (Στ/m)·R e_z − g e_z; columns are ∂(R e_z)/∂(roll, pitch, yaw).
        let body_z = Vector3::new(cy * sp * cr + sy * sr, sy * sp * cr - cy * sr, cp * cr);
        let d_body_z = Matrix3::new(
            -cy * sp * sr + sy * cr,
            cy * cp * cr,
            -sy * sp * cr + cy * sr,
            -sy * sp * sr - cy * cr,
            sy * cp * cr,
            cy * sp * cr + sy * sr,
            -cp * sr,
            -sp * cr,
            0.0,
        );
        let scale = thrust / p.mass;
        for r in 0..3 {
            for c in 0..3 {
                fx[(3 + r, 6 + c)] = scale * d_body_z[(r, c)];
            }
            for c in 0..N_U {
                fu[(3 + r, c)] = body_z[r] / p.mass;
            }
        }

        // Ψ̇ = T(roll, pitch) ω
        let tp = sp / cp;
        let sec2 = 1.0 / (cp * cp);
        let a = sr * wy + cr * wz;
        let b = cr * wy - sr * wz;
        fx[(6, 6)] = tp * b;
        fx[(6, 7)] = a * sec2;
        fx[(6, 9)] = 1.0;
        fx[(6, 10)] = sr * tp;
        fx[(6, 11)] = cr * tp;
        fx[(7, 6)] = -a;
        fx[(7, 10)] = cr;
        fx[(7, 11)] = -sr;
        fx[(8, 6)] = b / cp;
        fx[(8, 7)] = a * sp * sec2;
        fx[(8, 10)] = sr / cp;
        fx[(8, 11)] = cr / cp;

        // ω̇ = J⁻¹(M τ − ω × Jω)
        let gyro = Matrix3::new(
            0.0,
            (jz - jy) * wz,
            (jz - jy) * wy,
            (jx - jz) * wz,
            0.0,
            (jx - jz) * wx,
            (jy - jx) * wy,
            (jy - jx) * wx,
            0.0,
        );
        let inertia = [jx, jy, jz];
        for r in 0..3 {
            for c in 0..3 {
                fx[(9 + r, 9 + c)] = -gyro[(r, c)] / inertia[r];
            }
            for c in 0..N_U {
                fu[(9 + r, c)] = self.moments[(r, c)] / inertia[r];
            }
        }
        Ok((fx, fu))
    }
}

/// Lemniscate state reference and hover control reference at time `t`.
pub fn lemniscate_reference(t: f64, alpha: f64, period: f64) -> (DVector<f64>, DVector<f64>) {
    let rho = 2.0 * PI / period;
    let (s, c) = (rho * t).sin_cos();
    let mut x = DVector::zeros(N_X);
    x[0] = alpha * s;
    x[1] = 0.25 - 0.5 * (1.0 + alpha * s * c);
    x[2] = 0.25 + 0.5 * (1.0 + alpha * s * c);
    x[3] = alpha * rho * c;
    x[4] = 0.25 - 0.5 * alpha * rho * (c * c - s * s);
    x[5] = 0.25 + 0.5 * alpha * rho * (c * c - s * s);
    (x, DVector::from_element(N_U, HOVER_THRUST))
}

/// Upper state bound of the benchmark; the lower bound mirrors it except for
/// the altitude, which is bounded below by 0.
pub fn state_upper_bound() -> DVector<f64> {
    DVector::from_column_slice(&[2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 0.2, 0.2, 0.2, 1.0, 1.0, 1.0])
}

pub fn state_lower_bound() -> DVector<f64> {
    let mut lb = -state_upper_bound();
    lb[2] = 0.0;
    lb
}

/// Benchmark OCP: `Q = diag(5,5,5,0.1·1₈)`, `R = 0.1·I₄`, thrust in
/// `[0.029, 0.148]` N, `dt = 0.05` s.
pub fn benchmark_ocp(control_horizon: usize, horizon: usize, tau: f64) -> OcpSpec {
    let mut q = vec![5.0; 3];
    q.extend([0.1; 9]);
    OcpSpec {
        n_x: N_X,
        n_u: N_U,
        control_horizon,
        horizon,
        dt: PREDICTION_DT,
        q: DVector::from_vec(q),
        r: DVector::from_element(N_U, 0.1),
        x_lb: state_lower_bound(),
        x_ub: state_upper_bound(),
        u_lb: DVector::from_element(N_U, 0.029),
        u_ub: DVector::from_element(N_U, 0.148),
        tau,
        gamma: 1.0,
    }
}
