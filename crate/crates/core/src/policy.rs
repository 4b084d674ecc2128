//! External feedback policies: a one-hidden-layer tanh network loaded from a
//! JSON weight file, and an LQR fallback.

use std::fmt::Debug;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::ocp::{DiscreteDynamics, OcpSpec};

pub const WEIGHTS_VERSION: u32 = 1;

/// State feedback `u = π(x; x_ref)` tracking a reference state.
pub trait Policy: Send + Sync + Debug {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn eval(&self, x: &DVector<f64>, x_ref: &DVector<f64>) -> Result<DVector<f64>>;
    /// `∂π/∂x`, an `n_u × n_x` matrix.
    fn jacobian(&self, x: &DVector<f64>, x_ref: &DVector<f64>) -> Result<DMatrix<f64>>;
}

/// `u = out_offset + out_scale ⊙ (W2·tanh(W1·o + b1) + b2)` with observation
/// `o = (x − x_ref − obs_offset) ⊙ obs_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub obs_offset: DVector<f64>,
    pub obs_scale: DVector<f64>,
    pub out_offset: DVector<f64>,
    pub out_scale: DVector<f64>,
}

/// On-disk weight document; matrices are nested row-major arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub version: u32,
    pub n_obs: usize,
    pub n_u: usize,
    #[serde(rename = "W1")]
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    #[serde(rename = "W2")]
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub obs_offset: Vec<f64>,
    pub obs_scale: Vec<f64>,
    pub out_offset: Vec<f64>,
    pub out_scale: Vec<f64>,
}

fn shape_error(field: &'static str, expected: String, got: String) -> Error {
    Error::ShapeMismatch {
        field,
        expected,
        got,
    }
}

fn vector(field: &'static str, data: &[f64], len: usize) -> Result<DVector<f64>> {
    if data.len() != len {
        return Err(shape_error(
            field,
            format!("[{len}]"),
            format!("[{}]", data.len()),
        ));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(field));
    }
    Ok(DVector::from_column_slice(data))
}

fn matrix(
    field: &'static str,
    rows: &[Vec<f64>],
    n_rows: usize,
    n_cols: usize,
) -> Result<DMatrix<f64>> {
    let expected = format!("[{n_rows}, {n_cols}]");
    if rows.len() != n_rows {
        let got_cols = rows.first().map_or(0, Vec::len);
        return Err(shape_error(
            field,
            expected,
            format!("[{}, {got_cols}]", rows.len()),
        ));
    }
    if let Some(row) = rows.iter().find(|r| r.len() != n_cols) {
        return Err(shape_error(
            field,
            expected,
            format!("[{n_rows}, {}]", row.len()),
        ));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(field));
    }
    Ok(DMatrix::from_fn(n_rows, n_cols, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TryFrom<WeightFile> for PolicyNet {
    type Error = Error;

    fn try_from(f: WeightFile) -> Result<Self> {
        if f.version != WEIGHTS_VERSION {
            return Err(Error::InvalidSpec(format!(
                "unsupported weight file version {} (expected {WEIGHTS_VERSION})",
                f.version
            )));
        }
        let hidden = f.b1.len();
        if hidden == 0 {
            return Err(shape_error("b1", "[hidden > 0]".into(), "[0]".into()));
        }
        Ok(Self {
            w1: matrix("W1", &f.w1, hidden, f.n_obs)?,
            b1: vector("b1", &f.b1, hidden)?,
            w2: matrix("W2", &f.w2, f.n_u, hidden)?,
            b2: vector("b2", &f.b2, f.n_u)?,
            obs_offset: vector("obs_offset", &f.obs_offset, f.n_obs)?,
            obs_scale: vector("obs_scale", &f.obs_scale, f.n_obs)?,
            out_offset: vector("out_offset", &f.out_offset, f.n_u)?,
            out_scale: vector("out_scale", &f.out_scale, f.n_u)?,
        })
    }
}

impl From<&PolicyNet> for WeightFile {
    fn from(net: &PolicyNet) -> Self {
        Self {
            version: WEIGHTS_VERSION,
            n_obs: net.n_obs(),
            n_u: net.out_offset.len(),
            w1: rows_of(&net.w1),
            b1: net.b1.iter().copied().collect(),
            w2: rows_of(&net.w2),
            b2: net.b2.iter().copied().collect(),
            obs_offset: net.obs_offset.iter().copied().collect(),
            obs_scale: net.obs_scale.iter().copied().collect(),
            out_offset: net.out_offset.iter().copied().collect(),
            out_scale: net.out_scale.iter().copied().collect(),
        }
    }
}

impl PolicyNet {
    /// Network with all weights zero: it outputs `out_offset` everywhere.
    pub fn zeros(n_obs: usize, hidden: usize, out_offset: DVector<f64>) -> Self {
        let n_u = out_offset.len();
        Self {
            w1: DMatrix::zeros(hidden, n_obs),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(n_u, hidden),
            b2: DVector::zeros(n_u),
            obs_offset: DVector::zeros(n_obs),
            obs_scale: DVector::from_element(n_obs, 1.0),
            out_offset,
            out_scale: DVector::from_element(n_u, 1.0),
        }
    }

    pub fn n_obs(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: WeightFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&WeightFile::from(self))?)
    }

    pub fn load_weights(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    fn observation(&self, x: &DVector<f64>, x_ref: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("policy state", self.n_obs(), x.len())?;
        check_dim("policy reference", self.n_obs(), x_ref.len())?;
        Ok((x - x_ref - &self.obs_offset).component_mul(&self.obs_scale))
    }

    fn hidden_activation(&self, obs: &DVector<f64>) -> DVector<f64> {
        (&self.w1 * obs + &self.b1).map(f64::tanh)
    }
}

impl Policy for PolicyNet {
    fn n_x(&self) -> usize {
        self.n_obs()
    }

    fn n_u(&self) -> usize {
        self.out_offset.len()
    }

    fn eval(&self, x: &DVector<f64>, x_ref: &DVector<f64>) -> Result<DVector<f64>> {
        let h = self.hidden_activation(&self.observation(x, x_ref)?);
        let u = &self.out_offset + (&self.w2 * h + &self.b2).component_mul(&self.out_scale);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy output"));
        }
        Ok(u)
    }

    fn jacobian(&self, x: &DVector<f64>, x_ref: &DVector<f64>) -> Result<DMatrix<f64>> {
        let h = self.hidden_activation(&self.observation(x, x_ref)?);
        let mut inner = self.w1.clone();
        for (i, mut row) in inner.row_iter_mut().enumerate() {
            row *= 1.0 - h[i] * h[i];
        }
        for (j, mut col) in inner.column_iter_mut().enumerate() {
            col *= self.obs_scale[j];
        }
        let mut jac = &self.w2 * inner;
        for (i, mut row) in jac.row_iter_mut().enumerate() {
            row *= self.out_scale[i];
        }
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy Jacobian"));
        }
        Ok(jac)
    }
}

/// Affine state feedback `u = u_ref + K(x − x_ref)`, optionally squashed into
/// open limits `(lo, hi)` around `u_ref` by a per-side `tanh`. The squashing
/// keeps value and slope at `u_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy {
    pub gain: DMatrix<f64>,
    pub u_ref: DVector<f64>,
    pub limits: Option<(DVector<f64>, DVector<f64>)>,
}

impl LinearPolicy {
    pub fn new(gain: DMatrix<f64>, u_ref: DVector<f64>) -> Self {
        Self {
            gain,
            u_ref,
            limits: None,
        }
    }

    /// Requires `lo < u_ref < hi` componentwise.
    pub fn with_limits(mut self, lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        check_dim("policy lower limit", self.n_u(), lo.len())?;
        check_dim("policy upper limit", self.n_u(), hi.len())?;
        if (0..self.n_u()).any(|i| !(lo[i] < self.u_ref[i] && self.u_ref[i] < hi[i])) {
            return Err(Error::InvalidSpec(
                "policy limits must enclose the reference control".into(),
            ));
        }
        self.limits = Some((lo, hi));
        Ok(self)
    }

    /// Squashed value and slope factor per control.
    fn squash(&self, linear: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let Some((lo, hi)) = &self.limits else {
            return (linear.clone(), DVector::from_element(linear.len(), 1.0));
        };
        let mut value = linear.clone();
        let mut slope = DVector::from_element(linear.len(), 1.0);
        for i in 0..linear.len() {
            let d = linear[i] - self.u_ref[i];
            let h = if d >= 0.0 {
                hi[i] - self.u_ref[i]
            } else {
                self.u_ref[i] - lo[i]
            };
            let t = (d / h).tanh();
            value[i] = self.u_ref[i] + h * t;
            slope[i] = 1.0 - t * t;
        }
        (value, slope)
    }
}

impl Policy for LinearPolicy {
    fn n_x(&self) -> usize {
        self.gain.ncols()
    }

    fn n_u(&self) -> usize {
        self.gain.nrows()
    }

    fn eval(&self, x: &DVector<f64>, x_ref: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("policy state", self.n_x(), x.len())?;
        check_dim("policy reference", self.n_x(), x_ref.len())?;
        Ok(self.squash(&(&self.u_ref + &self.gain * (x - x_ref))).0)
    }

    fn jacobian(&self, x: &DVector<f64>, x_ref: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("policy state", self.n_x(), x.len())?;
        check_dim("policy reference", self.n_x(), x_ref.len())?;
        let (_, slope) = self.squash(&(&self.u_ref + &self.gain * (x - x_ref)));
        let mut jac = self.gain.clone();
        for (i, mut row) in jac.row_iter_mut().enumerate() {
            row *= slope[i];
        }
        Ok(jac)
    }
}

/// Stabilizing solution of the discrete algebraic Riccati equation by value
/// iteration. Returns `(P, K)` with `u = K x`.
pub fn dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    const MAX_ITER: usize = 100_000;
    let mut p = q.clone();
    for iter in 0..MAX_ITER {
        let bt_p = b.transpose() * &p;
        let e = r + &bt_p * b;
        let gain = -e
            .cholesky()
            .ok_or(Error::Factorization {
                stage: iter,
                pivot: f64::NAN,
            })?
            .solve(&(&bt_p * a));
        let mut next = q + a.transpose() * &p * a + (a.transpose() * bt_p.transpose()) * &gain;
        next = (&next + next.transpose()) * 0.5;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::RiccatiDivergence(iter));
        }
        let change = (&next - &p).amax();
        p = next;
        if change <= 1e-13 * p.amax().max(1.0) {
            let bt_p = b.transpose() * &p;
            let e = r + &bt_p * b;
            let gain = -e
                .cholesky()
                .expect("factorized in the last iteration")
                .solve(&(&bt_p * a));
            return Ok((p, gain));
        }
    }
    Err(Error::RiccatiDivergence(MAX_ITER))
}

/// Infinite-horizon LQR around `(x_eq, u_eq)` with the stage weights of
/// `spec`; the gain is applied to the tracking error `x − x_ref`.
pub fn lqr_policy<D: DiscreteDynamics + ?Sized>(
    spec: &OcpSpec,
    dynamics: &D,
    x_eq: &DVector<f64>,
    u_eq: &DVector<f64>,
) -> Result<LinearPolicy> {
    check_dim("LQR state", spec.n_x, x_eq.len())?;
    check_dim("LQR control", spec.n_u, u_eq.len())?;
    let (_, a, b) = dynamics.linearize(x_eq, u_eq)?;
    let q = DMatrix::from_diagonal(&(&spec.q * 2.0));
    let r = DMatrix::from_diagonal(&(&spec.r * 2.0));
    let (_, gain) = dare(&a, &b, &q, &r)?;
    Ok(LinearPolicy::new(gain, u_eq.clone()))
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}
