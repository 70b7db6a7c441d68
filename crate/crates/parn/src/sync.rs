//! Virtual synchronization of secondary anchors.
//!
//! Every SAN knows its distance to the primary anchor, so each sync TOA is
//! an offset measurement `z(n) = tau_i(n) - d_i1/c = b_i + noise`. A
//! two-state Kalman filter per SAN tracks (offset, drift) through the clock
//! model of [`crate::clock`] and predicts the offset at the instant the
//! device response arrives, together with the prediction variance that the
//! solver uses as that row's synchronization noise. Time differences use
//! SAN-local reception timestamps; their ppm-level scale error against
//! reference time is far below the filter's noise floor.
//!
//! The module also provides the one-shot baseline that conventional
//! asymmetric ranging uses: the latest sync TOA alone, with no drift
//! tracking and measurement variance as the offset variance.

use nalgebra::{Matrix2, Vector2};

use crate::clock::{process_noise_cov, transition_matrix, ClockNoiseParams};
use crate::{Error, Result, SPEED_OF_LIGHT};

/// Kalman state of one SAN clock: `x = [offset, drift]`, covariance `p`,
/// both anchored at the local timestamp `last_update_time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState {
    pub x: Vector2<f64>,
    pub p: Matrix2<f64>,
    pub last_update_time: f64,
}

/// Synchronization output consumed by the solver: predicted SAN clock
/// offset (seconds) and its variance (seconds squared) at the target time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SanSyncEstimate {
    pub anchor_id: u32,
    pub offset: f64,
    pub offset_var: f64,
}

/// Builds the initial filter state from the first two sync measurements:
/// offset from the first TOA, drift from the difference quotient, and a
/// diagonal covariance consistent with those two uses of the measurement
/// noise. The state is anchored at `t_rx_1`.
pub fn init_filter(
    tau_1: f64,
    tau_2: f64,
    t_rx_1: f64,
    t_rx_2: f64,
    d_i1_m: f64,
    sigma_i: f64,
) -> Result<FilterState> {
    let gap = t_rx_2 - t_rx_1;
    if !(gap.is_finite() && gap > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "initialization timestamps must be increasing, gap {gap}"
        )));
    }
    if !(sigma_i.is_finite() && sigma_i > 0.0) {
        return Err(Error::InvalidParameter(
            "measurement sigma must be positive".into(),
        ));
    }
    let b = tau_1 - d_i1_m / SPEED_OF_LIGHT;
    let omega = (tau_2 - tau_1) / gap;
    let p = Matrix2::new(
        sigma_i * sigma_i,
        0.0,
        0.0,
        2.0 * sigma_i * sigma_i / (gap * gap),
    );
    Ok(FilterState {
        x: Vector2::new(b, omega),
        p,
        last_update_time: t_rx_1,
    })
}

/// One predict/update cycle with offset measurement `z = tau - d_i1/c`
/// taken at local time `t_rx`. Covariance arithmetic stays in 2x2 form with
/// a single scalar division for the gain.
pub fn kf_step(
    state: &FilterState,
    z: f64,
    t_rx: f64,
    noise: &ClockNoiseParams,
    sigma_i: f64,
) -> Result<FilterState> {
    let dt = t_rx - state.last_update_time;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "filter update requires increasing timestamps, dt {dt}"
        )));
    }
    if !(sigma_i.is_finite() && sigma_i > 0.0) {
        return Err(Error::InvalidParameter(
            "measurement sigma must be positive".into(),
        ));
    }
    let phi = transition_matrix(dt);
    let q = process_noise_cov(noise, dt)?;
    let x_pred = phi * state.x;
    let p_pred = phi * state.p * phi.transpose() + q;
    let s = p_pred[(0, 0)] + sigma_i * sigma_i;
    let k = Vector2::new(p_pred[(0, 0)] / s, p_pred[(1, 0)] / s);
    let innovation = z - x_pred.x;
    let x = x_pred + k * innovation;
    let ikh = Matrix2::new(1.0 - k.x, 0.0, -k.y, 1.0);
    let mut p = ikh * p_pred;
    // Enforce symmetry lost to rounding.
    let off = 0.5 * (p[(0, 1)] + p[(1, 0)]);
    p[(0, 1)] = off;
    p[(1, 0)] = off;
    Ok(FilterState {
        x,
        p,
        last_update_time: t_rx,
    })
}

/// Predicted offset and prediction variance at `t_target` (local time at or
/// after the last update). Does not advance the filter.
pub fn predict_to(
    state: &FilterState,
    t_target: f64,
    noise: &ClockNoiseParams,
) -> Result<(f64, f64)> {
    let dt = t_target - state.last_update_time;
    if !(dt.is_finite() && dt >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "prediction target precedes the filter state, dt {dt}"
        )));
    }
    let phi = transition_matrix(dt);
    let q = process_noise_cov(noise, dt)?;
    let x_pred = phi * state.x;
    let p_pred = phi * state.p * phi.transpose() + q;
    Ok((x_pred.x, p_pred[(0, 0)]))
}

/// One-shot baseline: offset from the latest sync TOA alone. No drift
/// tracking, so the drift accumulated between the sync reception and the
/// response instant goes uncorrected.
pub fn carn_offset_estimate(
    anchor_id: u32,
    tau_latest: f64,
    d_i1_m: f64,
    sigma_i: f64,
) -> SanSyncEstimate {
    SanSyncEstimate {
        anchor_id,
        offset: tau_latest - d_i1_m / SPEED_OF_LIGHT,
        offset_var: sigma_i * sigma_i,
    }
}

/// Streaming wrapper around one SAN's filter: buffers the first two
/// measurements for initialization, re-initializes after gaps longer than
/// `reinit_gap`, and serves predictions at response reception times.
#[derive(Debug, Clone)]
pub struct SanFilter {
    pub anchor_id: u32,
    d_i1_m: f64,
    sigma_i: f64,
    noise: ClockNoiseParams,
    reinit_gap: f64,
    state: Option<FilterState>,
    pending: Option<(f64, f64)>,
}

impl SanFilter {
    pub const DEFAULT_REINIT_GAP: f64 = 1.0;

    pub fn new(anchor_id: u32, d_i1_m: f64, sigma_i: f64, noise: ClockNoiseParams) -> SanFilter {
        SanFilter {
            anchor_id,
            d_i1_m,
            sigma_i,
            noise,
            reinit_gap: Self::DEFAULT_REINIT_GAP,
            state: None,
            pending: None,
        }
    }

    pub fn with_reinit_gap(mut self, gap: f64) -> SanFilter {
        self.reinit_gap = gap;
        self
    }

    pub fn is_initialized(&self) -> bool {
        self.state.is_some()
    }

    pub fn state(&self) -> Option<&FilterState> {
        self.state.as_ref()
    }

    /// Feeds one sync TOA observed at local time `t_rx_local`.
    pub fn observe(&mut self, tau: f64, t_rx_local: f64) -> Result<()> {
        if let Some(state) = &self.state {
            if t_rx_local - state.last_update_time > self.reinit_gap {
                // Too long blind: drop the track and rebuild from scratch.
                self.state = None;
                self.pending = Some((tau, t_rx_local));
                return Ok(());
            }
            let z = tau - self.d_i1_m / SPEED_OF_LIGHT;
            self.state = Some(kf_step(state, z, t_rx_local, &self.noise, self.sigma_i)?);
            return Ok(());
        }
        match self.pending.take() {
            None => {
                self.pending = Some((tau, t_rx_local));
            }
            Some((tau_1, t_1)) => {
                if t_rx_local - t_1 > self.reinit_gap {
                    self.pending = Some((tau, t_rx_local));
                    return Ok(());
                }
                self.state = Some(init_filter(
                    tau_1,
                    tau,
                    t_1,
                    t_rx_local,
                    self.d_i1_m,
                    self.sigma_i,
                )?);
            }
        }
        Ok(())
    }

    /// Predicted offset and variance at `t_target_local`, or `None` while
    /// the filter has fewer than two measurements.
    pub fn predict(&self, t_target_local: f64) -> Result<Option<SanSyncEstimate>> {
        match &self.state {
            None => Ok(None),
            Some(state) => {
                let (offset, offset_var) = predict_to(state, t_target_local, &self.noise)?;
                Ok(Some(SanSyncEstimate {
                    anchor_id: self.anchor_id,
                    offset,
                    offset_var,
                }))
            }
        }
    }
}

/// Steady-state prediction variance of the offset at `horizon` seconds past
/// an update, for a filter running at a fixed `period`. Iterates the
/// covariance recursion, which does not depend on the measurements, until
/// it settles. Used to seed CRLB reports without simulating.
pub fn steady_state_offset_variance(
    noise: &ClockNoiseParams,
    sigma_i: f64,
    period: f64,
    horizon: f64,
) -> Result<f64> {
    if !(period.is_finite() && period > 0.0 && horizon >= 0.0) {
        return Err(Error::InvalidParameter(
            "steady-state query needs positive period and non-negative horizon".into(),
        ));
    }
    let phi = transition_matrix(period);
    let q = process_noise_cov(noise, period)?;
    let r = sigma_i * sigma_i;
    let mut p = Matrix2::new(r, 0.0, 0.0, 2.0 * r / (period * period));
    for _ in 0..200_000 {
        let p_pred = phi * p * phi.transpose() + q;
        let s = p_pred[(0, 0)] + r;
        let k = Vector2::new(p_pred[(0, 0)] / s, p_pred[(1, 0)] / s);
        let ikh = Matrix2::new(1.0 - k.x, 0.0, -k.y, 1.0);
        let next = ikh * p_pred;
        let delta = (next - p).abs().max();
        p = 0.5 * (next + next.transpose());
        if delta <= 1e-12 * p[(0, 0)].max(1e-300) {
            break;
        }
    }
    let phi_h = transition_matrix(horizon);
    let q_h = process_noise_cov(noise, horizon)?;
    let p_h = phi_h * p * phi_h.transpose() + q_h;
    Ok(p_h[(0, 0)])
}
