//! Two-state clock model and constant-velocity motion.
//!
//! A node clock is described by its offset `b` (seconds) and drift `omega`
//! (seconds per second) relative to the reference timescale. Over a step of
//! `dt` seconds the state evolves as
//!
//! ```text
//! [b', omega']^T = Phi(dt) [b, omega]^T + eta,    Phi(dt) = [1  dt]
//!                                                           [0   1]
//! ```
//!
//! where `eta` is zero-mean Gaussian with covariance
//!
//! ```text
//! Q(dt) = [ s_b dt + s_w dt^3 / 3     s_w dt^2 / 2 ]
//!         [ s_w dt^2 / 2              s_w dt       ]
//! ```
//!
//! driven by the offset and drift random-walk intensities `s_b` (seconds)
//! and `s_w` (1/seconds). The same transition matrix and covariance feed the
//! synthesis side and the Kalman filter in [`crate::sync`], so the filter is
//! model-matched by construction.

use nalgebra::{DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Clock offset (seconds) and drift (s/s) at an instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockState {
    pub offset: f64,
    pub drift: f64,
}

impl ClockState {
    pub const ZERO: ClockState = ClockState {
        offset: 0.0,
        drift: 0.0,
    };

    pub fn new(offset: f64, drift: f64) -> Self {
        ClockState { offset, drift }
    }
}

impl Default for ClockState {
    fn default() -> Self {
        ClockState::ZERO
    }
}

/// Random-walk intensities of the clock model: `s_b` drives the offset walk
/// (seconds), `s_omega` the drift walk (1/seconds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockNoiseParams {
    pub s_b: f64,
    pub s_omega: f64,
}

impl ClockNoiseParams {
    pub const ZERO: ClockNoiseParams = ClockNoiseParams {
        s_b: 0.0,
        s_omega: 0.0,
    };

    pub fn new(s_b: f64, s_omega: f64) -> Self {
        ClockNoiseParams { s_b, s_omega }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_b.is_finite() && self.s_b >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "clock noise s_b must be finite and non-negative, got {}",
                self.s_b
            )));
        }
        if !(self.s_omega.is_finite() && self.s_omega >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "clock noise s_omega must be finite and non-negative, got {}",
                self.s_omega
            )));
        }
        Ok(())
    }
}

/// State transition matrix `Phi(dt)` of the clock model.
pub fn transition_matrix(dt: f64) -> Matrix2<f64> {
    Matrix2::new(1.0, dt, 0.0, 1.0)
}

/// Process noise covariance `Q(dt)` accumulated over a step of `dt` seconds.
pub fn process_noise_cov(params: &ClockNoiseParams, dt: f64) -> Result<Matrix2<f64>> {
    params.validate()?;
    if !(dt.is_finite() && dt >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "process noise step must be finite and non-negative, got {dt}"
        )));
    }
    let q00 = params.s_b * dt + params.s_omega * dt.powi(3) / 3.0;
    let q01 = params.s_omega * dt.powi(2) / 2.0;
    let q11 = params.s_omega * dt;
    Ok(Matrix2::new(q00, q01, q01, q11))
}

/// Draws one process noise increment `eta ~ N(0, Q(dt))`.
///
/// Uses the Cholesky factor of `Q` when it exists; a singular `Q` (for
/// example `s_omega = 0`) falls back to an eigendecomposition with negative
/// eigenvalues clamped to zero. Always consumes exactly two standard normal
/// draws from `rng` so that stream consumption does not depend on the
/// parameter values.
pub fn sample_process_noise<R: Rng + ?Sized>(
    params: &ClockNoiseParams,
    dt: f64,
    rng: &mut R,
) -> Result<Vector2<f64>> {
    let q = process_noise_cov(params, dt)?;
    let xi = Vector2::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    let l = match nalgebra::Cholesky::new(q) {
        Some(chol) => chol.unpack(),
        None => {
            let eig = nalgebra::SymmetricEigen::new(q);
            let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            eig.eigenvectors * Matrix2::from_diagonal(&roots)
        }
    };
    Ok(l * xi)
}

/// Advances the clock by `dt` seconds without process noise:
/// `b' = b + omega * dt`, `omega' = omega`.
pub fn propagate_clock_deterministic(state: &ClockState, dt: f64) -> ClockState {
    ClockState {
        offset: state.offset + state.drift * dt,
        drift: state.drift,
    }
}

/// Advances the clock by `dt` seconds, adding one random-walk increment
/// drawn from `Q(dt)`.
pub fn propagate_clock<R: Rng + ?Sized>(
    state: &ClockState,
    dt: f64,
    params: &ClockNoiseParams,
    rng: &mut R,
) -> Result<ClockState> {
    let eta = sample_process_noise(params, dt, rng)?;
    let base = propagate_clock_deterministic(state, dt);
    Ok(ClockState {
        offset: base.offset + eta.x,
        drift: base.drift + eta.y,
    })
}

/// Constant-velocity motion: position after `dt` seconds.
pub fn propagate_position(position: &[f64], velocity: &[f64], dt: f64) -> Vec<f64> {
    assert_eq!(
        position.len(),
        velocity.len(),
        "position and velocity dimensions must match"
    );
    position
        .iter()
        .zip(velocity)
        .map(|(p, v)| p + v * dt)
        .collect()
}

/// Same as [`propagate_position`] for nalgebra vectors.
pub fn propagate_position_vec(position: &DVector<f64>, velocity: &DVector<f64>, dt: f64) -> DVector<f64> {
    position + velocity * dt
}
