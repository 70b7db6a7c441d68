//! Deployment description and TOA measurement synthesis.
//!
//! A scenario is one primary anchor (PAN), at least one secondary anchor
//! (SAN), and one or more user devices (UDs), plus the sync period, clock
//! noise intensities, TOA noise levels, and response schedule. The PAN
//! transmits a sync signal at the start of every epoch; each device answers
//! after its own response delay. The PAN clock is the reference timescale,
//! so its offset and drift are identically zero.
//!
//! [`Simulator`] evolves the SAN clocks as continuous random walks across
//! epochs and synthesizes, per epoch: the SAN sync TOAs `tau_i`, the device
//! sync TOA `tau_u`, and the response TOAs `rho_i` at every anchor, each
//! with the ground truth needed for evaluation. Each SAN clock advances
//! from sync reception to sync reception; its value at a response arrival
//! branches off the sync-time state with a fresh random-walk increment, so
//! response delays may exceed the sync period without the walks running
//! backwards. The device clock moves deterministically between its sync
//! reception and its transmission: that interval is covered by the same
//! drift the estimator is told about, keeping the known-drift solver mode
//! exactly consistent with the synthesis.
//!
//! All randomness is drawn from counter-based streams keyed by
//! `(seed, epoch, lane)`, so any epoch can be reproduced without replaying
//! the ones before it and sweeps that scale noise values consume streams
//! identically across sweep points.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::{
    propagate_clock, propagate_clock_deterministic, propagate_position, ClockNoiseParams,
    ClockState,
};
use crate::{Error, Result, SPEED_OF_LIGHT};

/// Random stream lane for SAN clock walks, sync noise, and dropouts.
pub const LANE_SAN: u64 = 0;
/// Random stream lane for device draws and device-side measurement noise.
pub const LANE_DEVICE: u64 = 1;
/// Random stream lane reserved for estimator input perturbations.
pub const LANE_INPUT: u64 = 2;

/// Counter-based RNG for `(seed, epoch, lane)`. Streams for different keys
/// are independent, and the same key always yields the same stream.
pub fn derived_rng(seed: u64, epoch: u64, lane: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&lane.to_le_bytes());
    key[24..32].copy_from_slice(&0x746f615f65706f63u64.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Euclidean distance between two points of equal dimension, meters.
pub fn pairwise_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dimension mismatch in distance");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Primary,
    Secondary,
}

/// One anchor node. `clock` is its state at reference time zero; the
/// primary anchor must hold the zero state since it defines the timescale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub id: u32,
    pub position: Vec<f64>,
    pub role: Role,
    #[serde(default)]
    pub clock: ClockState,
    /// TOA measurement noise std, expressed as a range (meters).
    pub toa_sigma_m: f64,
}

impl AnchorSpec {
    /// TOA noise std in seconds.
    pub fn sigma_seconds(&self) -> f64 {
        self.toa_sigma_m / SPEED_OF_LIGHT
    }
}

/// How a device's pose and clock evolve across epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeviceMotion {
    /// Deterministic truth: the device starts at `position` at reference
    /// time zero, moves with constant `velocity`, and its clock starts at
    /// (`offset_s`, `drift`) and random-walks across epochs.
    Hold {
        position: Vec<f64>,
        velocity: Vec<f64>,
        offset_s: f64,
        drift: f64,
    },
    /// Survey-style evaluation: a fresh pose and clock are drawn every
    /// epoch. Position is uniform in the axis-aligned cube `center +-
    /// half_side_m`, heading is uniform with speed `speed_m_s`, and the
    /// clock offset and drift are uniform in the given ranges.
    Redraw {
        center: Vec<f64>,
        half_side_m: f64,
        speed_m_s: f64,
        offset_range_s: [f64; 2],
        drift_range: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    /// Delay from sync reception to response transmission, seconds.
    pub response_delay_s: f64,
    /// TOA measurement noise std of the device's sync reception (meters).
    pub toa_sigma_m: f64,
    pub motion: DeviceMotion,
}

impl DeviceSpec {
    pub fn sigma_seconds(&self) -> f64 {
        self.toa_sigma_m / SPEED_OF_LIGHT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub dimension: usize,
    pub sync_period_s: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Probability that one SAN sync TOA is lost in a given epoch.
    #[serde(default)]
    pub dropout_prob: f64,
    /// Minimum separation enforced between response windows, seconds.
    pub schedule_guard_s: f64,
    pub clock_noise: ClockNoiseParams,
    pub anchors: Vec<AnchorSpec>,
    pub devices: Vec<DeviceSpec>,
}

impl Scenario {
    /// The bundled reference deployment: a 200 m square with anchors at the
    /// side midpoints (primary at (100, 0)), one surveyed device in the
    /// 80 m square centered on (100, 100) moving at 5 m/s with offset
    /// uniform in +-1 s and drift uniform in +-20 ppm, 10 ms sync period,
    /// 5 ms response delay, and 5 cm TOA noise everywhere.
    pub fn square_scene() -> Scenario {
        Scenario {
            dimension: 2,
            sync_period_s: 0.01,
            epochs: 10_000,
            seed: 1,
            dropout_prob: 0.0,
            schedule_guard_s: 1e-4,
            clock_noise: ClockNoiseParams::new(1e-21, 5.9e-23),
            anchors: vec![
                AnchorSpec {
                    id: 1,
                    position: vec![100.0, 0.0],
                    role: Role::Primary,
                    clock: ClockState::ZERO,
                    toa_sigma_m: 0.05,
                },
                AnchorSpec {
                    id: 2,
                    position: vec![200.0, 100.0],
                    role: Role::Secondary,
                    clock: ClockState::new(-5e-7, 1e-6),
                    toa_sigma_m: 0.05,
                },
                AnchorSpec {
                    id: 3,
                    position: vec![100.0, 200.0],
                    role: Role::Secondary,
                    clock: ClockState::new(8e-8, 5e-6),
                    toa_sigma_m: 0.05,
                },
                AnchorSpec {
                    id: 4,
                    position: vec![0.0, 100.0],
                    role: Role::Secondary,
                    clock: ClockState::new(2e-1, -3e-6),
                    toa_sigma_m: 0.05,
                },
            ],
            devices: vec![DeviceSpec {
                response_delay_s: 5e-3,
                toa_sigma_m: 0.05,
                motion: DeviceMotion::Redraw {
                    center: vec![100.0, 100.0],
                    half_side_m: 40.0,
                    speed_m_s: 5.0,
                    offset_range_s: [-1.0, 1.0],
                    drift_range: [-20e-6, 20e-6],
                },
            }],
        }
    }

    pub fn primary(&self) -> &AnchorSpec {
        &self.anchors[0]
    }

    /// Distance from each anchor to the primary anchor, meters, aligned
    /// with `anchors` (entry 0 is zero).
    pub fn pan_distances(&self) -> Vec<f64> {
        let p1 = &self.anchors[0].position;
        self.anchors
            .iter()
            .map(|a| pairwise_distance(&a.position, p1))
            .collect()
    }

    /// Sets every TOA noise level (anchors and devices) to `sigma_m` meters.
    pub fn set_toa_sigma_m(&mut self, sigma_m: f64) {
        for a in &mut self.anchors {
            a.toa_sigma_m = sigma_m;
        }
        for d in &mut self.devices {
            d.toa_sigma_m = sigma_m;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension < 1 || self.dimension > 3 {
            return Err(Error::InvalidParameter(format!(
                "dimension must be 1, 2, or 3, got {}",
                self.dimension
            )));
        }
        if !(self.sync_period_s.is_finite() && self.sync_period_s > 0.0) {
            return Err(Error::InvalidParameter(
                "sync period must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidParameter(
                "dropout probability must lie in [0, 1)".into(),
            ));
        }
        self.clock_noise.validate()?;
        if self.anchors.len() < 2 {
            return Err(Error::InvalidParameter(
                "need a primary anchor and at least one secondary anchor".into(),
            ));
        }
        let primaries = self
            .anchors
            .iter()
            .filter(|a| a.role == Role::Primary)
            .count();
        if primaries != 1 {
            return Err(Error::InvalidParameter(format!(
                "exactly one primary anchor required, found {primaries}"
            )));
        }
        if self.anchors[0].role != Role::Primary {
            return Err(Error::InvalidParameter(
                "the primary anchor must be listed first".into(),
            ));
        }
        if self.anchors[0].clock != ClockState::ZERO {
            return Err(Error::InvalidParameter(
                "the primary anchor defines the timescale; its clock must be zero".into(),
            ));
        }
        let mut ids = std::collections::BTreeSet::new();
        for a in &self.anchors {
            if a.id == 0 || !ids.insert(a.id) {
                return Err(Error::InvalidParameter(format!(
                    "anchor ids must be unique and non-zero, offending id {}",
                    a.id
                )));
            }
            if a.position.len() != self.dimension {
                return Err(Error::InvalidParameter(format!(
                    "anchor {} position has dimension {}, expected {}",
                    a.id,
                    a.position.len(),
                    self.dimension
                )));
            }
            if !(a.toa_sigma_m.is_finite() && a.toa_sigma_m >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "anchor {} TOA sigma must be finite and non-negative",
                    a.id
                )));
            }
        }
        if self.devices.is_empty() {
            return Err(Error::InvalidParameter("at least one device required".into()));
        }
        for (k, d) in self.devices.iter().enumerate() {
            if !(d.response_delay_s.is_finite() && d.response_delay_s > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "device {k} response delay must be positive"
                )));
            }
            if !(d.toa_sigma_m.is_finite() && d.toa_sigma_m >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "device {k} TOA sigma must be finite and non-negative"
                )));
            }
            match &d.motion {
                DeviceMotion::Hold {
                    position, velocity, ..
                } => {
                    if position.len() != self.dimension || velocity.len() != self.dimension {
                        return Err(Error::InvalidParameter(format!(
                            "device {k} position/velocity dimension mismatch"
                        )));
                    }
                }
                DeviceMotion::Redraw {
                    center,
                    half_side_m,
                    speed_m_s,
                    offset_range_s,
                    drift_range,
                } => {
                    if center.len() != self.dimension {
                        return Err(Error::InvalidParameter(format!(
                            "device {k} redraw center dimension mismatch"
                        )));
                    }
                    if *half_side_m < 0.0 || *speed_m_s < 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "device {k} redraw extent and speed must be non-negative"
                        )));
                    }
                    if offset_range_s[0] > offset_range_s[1] || drift_range[0] > drift_range[1] {
                        return Err(Error::InvalidParameter(format!(
                            "device {k} redraw ranges must be ordered"
                        )));
                    }
                }
            }
        }
        check_schedule(self)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Scenario> {
        let scenario: Scenario =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Scenario> {
        Scenario::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_toml_string()?)?)
    }

    /// Hex SHA-256 of the canonical JSON encoding, recorded in every output
    /// so results can be tied back to the exact configuration.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// Verifies the response windows: every delay at least one guard after the
/// sync, and adjacent windows separated by at least one guard. Delays may
/// exceed the sync period (the response then lands among later syncs). The
/// guard absorbs propagation times, so it must not shrink below a couple
/// of microseconds or below the longest sync flight time.
pub fn check_schedule(scenario: &Scenario) -> Result<()> {
    let guard = scenario.schedule_guard_s;
    if !(guard.is_finite() && guard >= 2e-6) {
        return Err(Error::Schedule(format!(
            "schedule guard must be at least 2 microseconds, got {guard}"
        )));
    }
    let max_flight = scenario
        .pan_distances()
        .iter()
        .fold(0.0f64, |a, d| a.max(*d))
        / SPEED_OF_LIGHT;
    if guard < max_flight + 1e-6 {
        return Err(Error::Schedule(format!(
            "schedule guard {guard} s does not clear the longest sync flight time {max_flight} s"
        )));
    }
    let mut delays: Vec<f64> = scenario
        .devices
        .iter()
        .map(|d| d.response_delay_s)
        .collect();
    delays.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if let Some(first) = delays.first() {
        if *first < guard {
            return Err(Error::Schedule(format!(
                "first response delay {first} s is inside the sync guard window"
            )));
        }
    }
    for pair in delays.windows(2) {
        if pair[1] - pair[0] < guard {
            return Err(Error::Schedule(format!(
                "response delays {} s and {} s are closer than the guard {guard} s",
                pair[0], pair[1]
            )));
        }
    }
    Ok(())
}

/// Ground-truth state of one device at its response transmission instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserDeviceTruth {
    pub position_at_tx: Vec<f64>,
    pub velocity: Vec<f64>,
    /// Offset and drift at the transmission instant.
    pub clock: ClockState,
    /// TOA noise std of the device's sync reception, seconds.
    pub noise_sigma: f64,
    pub response_delay: f64,
}

/// One synthesized sync TOA: the measurement value `tau`, the local
/// reception timestamp carrying the same noise realization, and the true
/// clock offset at reception for error evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncObservation {
    pub toa: f64,
    pub local_rx: f64,
    pub true_offset: f64,
}

/// One synthesized response TOA at an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseObservation {
    pub toa: f64,
    pub local_rx: f64,
}

/// Measurements and truth generated by one device in one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceEpoch {
    pub device: usize,
    pub truth: UserDeviceTruth,
    /// True response transmission instant, reference time.
    pub t_tx: f64,
    /// True sync reception instant at the device, reference time.
    pub t_rx_sync: f64,
    /// True SAN clock offsets evaluated at each anchor's response arrival
    /// (`t_tx` plus that anchor's flight time), keyed by anchor id.
    pub san_offsets_at_arrival: BTreeMap<u32, f64>,
    /// The device's sync TOA `tau_u`, seconds.
    pub ud_sync_toa: f64,
    /// Response TOA at every anchor, keyed by anchor id (primary included).
    pub responses: BTreeMap<u32, ResponseObservation>,
}

/// Everything synthesized for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMeasurements {
    pub epoch: usize,
    /// Sync transmission instant, reference time.
    pub t_sync_tx: f64,
    /// SAN sync TOAs keyed by anchor id; an id is absent when that epoch's
    /// sync measurement was dropped.
    pub san_sync: BTreeMap<u32, SyncObservation>,
    pub devices: Vec<DeviceEpoch>,
}

struct ClockTrack {
    state: ClockState,
    t: f64,
}

/// Epoch-by-epoch synthesis engine. SAN clocks evolve continuously across
/// epochs; device truth follows each device's [`DeviceMotion`] policy.
pub struct Simulator {
    scenario: Scenario,
    seed: u64,
    epoch: usize,
    san_clocks: Vec<ClockTrack>,
    hold_clocks: Vec<Option<ClockTrack>>,
    pan_distances: Vec<f64>,
}

impl Simulator {
    pub fn new(scenario: Scenario, seed: u64) -> Result<Simulator> {
        scenario.validate()?;
        let san_clocks = scenario
            .anchors
            .iter()
            .map(|a| ClockTrack {
                state: a.clock,
                t: 0.0,
            })
            .collect();
        let hold_clocks = scenario
            .devices
            .iter()
            .map(|d| match &d.motion {
                DeviceMotion::Hold {
                    offset_s, drift, ..
                } => Some(ClockTrack {
                    state: ClockState::new(*offset_s, *drift),
                    t: 0.0,
                }),
                DeviceMotion::Redraw { .. } => None,
            })
            .collect();
        let pan_distances = scenario.pan_distances();
        Ok(Simulator {
            scenario,
            seed,
            epoch: 0,
            san_clocks,
            hold_clocks,
            pan_distances,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Synthesizes the next epoch and advances all evolving state.
    pub fn step(&mut self) -> Result<EpochMeasurements> {
        let epoch = self.epoch;
        let t_sync = epoch as f64 * self.scenario.sync_period_s;
        let dim = self.scenario.dimension;
        let p1 = self.scenario.anchors[0].position.clone();

        // Device draws and device-side noise come from the device lane.
        let mut dev_rng = derived_rng(self.seed, epoch as u64, LANE_DEVICE);
        struct DeviceDraft {
            truth: UserDeviceTruth,
            t_rx_sync: f64,
            t_tx: f64,
            offset_at_rx: f64,
            sync_noise: f64,
            response_noise: Vec<f64>,
        }
        let mut drafts: Vec<DeviceDraft> = Vec::with_capacity(self.scenario.devices.len());
        for (k, dev) in self.scenario.devices.iter().enumerate() {
            let delta = dev.response_delay_s;
            let (p_rx, velocity, clock_at_tx) = match &dev.motion {
                DeviceMotion::Hold {
                    position, velocity, ..
                } => {
                    // Position is deterministic; the clock random-walks from
                    // its last anchor point to this epoch's sync reception.
                    let guess = propagate_position(position, velocity, t_sync);
                    let t_rx = t_sync + pairwise_distance(&p1, &guess) / SPEED_OF_LIGHT;
                    let p_rx = propagate_position(position, velocity, t_rx);
                    let track = self.hold_clocks[k].as_mut().expect("hold device has a clock");
                    let dt = t_rx - track.t;
                    track.state =
                        propagate_clock(&track.state, dt, &self.scenario.clock_noise, &mut dev_rng)?;
                    track.t = t_rx;
                    let clock_at_tx = propagate_clock_deterministic(&track.state, delta);
                    (p_rx, velocity.clone(), clock_at_tx)
                }
                DeviceMotion::Redraw {
                    center,
                    half_side_m,
                    speed_m_s,
                    offset_range_s,
                    drift_range,
                } => {
                    let mut p_rx = Vec::with_capacity(dim);
                    for c in center {
                        p_rx.push(c + half_side_m * dev_rng.random_range(-1.0..=1.0));
                    }
                    let mut heading: Vec<f64> = (0..dim)
                        .map(|_| dev_rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let norm = heading.iter().map(|h| h * h).sum::<f64>().sqrt();
                    if norm < 1e-12 {
                        heading = std::iter::once(1.0)
                            .chain(std::iter::repeat(0.0))
                            .take(dim)
                            .collect();
                    } else {
                        heading.iter_mut().for_each(|h| *h /= norm);
                    }
                    let velocity: Vec<f64> = heading.iter().map(|h| h * speed_m_s).collect();
                    let offset = dev_rng.random_range(offset_range_s[0]..=offset_range_s[1]);
                    let drift = dev_rng.random_range(drift_range[0]..=drift_range[1]);
                    (p_rx, velocity, ClockState::new(offset, drift))
                }
            };
            let t_rx_sync = t_sync + pairwise_distance(&p1, &p_rx) / SPEED_OF_LIGHT;
            let t_tx = t_rx_sync + delta;
            let position_at_tx = propagate_position(&p_rx, &velocity, delta);
            // Within the exchange the device clock moves deterministically,
            // so the offset at sync reception follows from the tx state.
            let offset_at_rx = clock_at_tx.offset - clock_at_tx.drift * delta;
            let sync_noise = dev_rng.sample::<f64, _>(StandardNormal);
            let response_noise: Vec<f64> = (0..self.scenario.anchors.len())
                .map(|_| dev_rng.sample::<f64, _>(StandardNormal))
                .collect();
            drafts.push(DeviceDraft {
                truth: UserDeviceTruth {
                    position_at_tx,
                    velocity,
                    clock: clock_at_tx,
                    noise_sigma: dev.sigma_seconds(),
                    response_delay: delta,
                },
                t_rx_sync,
                t_tx,
                offset_at_rx,
                sync_noise,
                response_noise,
            });
        }

        // SAN clock walks, sync noise, and dropout come from the SAN lane.
        // Each SAN is visited at its sync reception and then at every
        // transmission instant in time order.
        let mut tx_order: Vec<usize> = (0..drafts.len()).collect();
        tx_order.sort_by(|&a, &b| drafts[a].t_tx.partial_cmp(&drafts[b].t_tx).unwrap());

        let mut san_rng = derived_rng(self.seed, epoch as u64, LANE_SAN);
        let mut san_sync = BTreeMap::new();
        // san_offsets_at_arrival[d] maps anchor id to its true offset at
        // the moment device d's response reaches that anchor.
        let mut san_offsets_at_arrival: Vec<BTreeMap<u32, f64>> =
            vec![BTreeMap::new(); drafts.len()];
        for (i, anchor) in self.scenario.anchors.iter().enumerate() {
            let dropped = san_rng.random_range(0.0..1.0) < self.scenario.dropout_prob;
            let noise = san_rng.sample::<f64, _>(StandardNormal);
            let is_primary = anchor.role == Role::Primary;
            let t_rx = t_sync + self.pan_distances[i] / SPEED_OF_LIGHT;
            if is_primary {
                // The primary clock is the reference and never moves; it
                // also does not report a sync TOA to itself.
                for offsets in san_offsets_at_arrival.iter_mut() {
                    offsets.insert(anchor.id, 0.0);
                }
                // Keep stream consumption aligned with secondary anchors:
                // one walk to the sync reception plus one branch per
                // transmission.
                for _ in 0..=tx_order.len() {
                    let _ = san_rng.sample::<f64, _>(StandardNormal);
                    let _ = san_rng.sample::<f64, _>(StandardNormal);
                }
                continue;
            }
            let track = &mut self.san_clocks[i];
            track.state = propagate_clock(
                &track.state,
                t_rx - track.t,
                &self.scenario.clock_noise,
                &mut san_rng,
            )?;
            track.t = t_rx;
            let eps = anchor.sigma_seconds() * noise;
            let toa = self.pan_distances[i] / SPEED_OF_LIGHT + track.state.offset + eps;
            if !dropped {
                san_sync.insert(
                    anchor.id,
                    SyncObservation {
                        toa,
                        local_rx: t_sync + toa,
                        true_offset: track.state.offset,
                    },
                );
            }
            // Arrival-time values branch off the sync-time state instead
            // of advancing the track, so a response delay longer than the
            // sync period cannot run the walk backwards. The guard check
            // keeps every branch interval positive.
            for &d in &tx_order {
                let flight =
                    pairwise_distance(&anchor.position, &drafts[d].truth.position_at_tx)
                        / SPEED_OF_LIGHT;
                let branch = propagate_clock(
                    &track.state,
                    drafts[d].t_tx + flight - track.t,
                    &self.scenario.clock_noise,
                    &mut san_rng,
                )?;
                san_offsets_at_arrival[d].insert(anchor.id, branch.offset);
            }
        }

        let mut devices = Vec::with_capacity(drafts.len());
        for (d, draft) in drafts.into_iter().enumerate() {
            let dev = &self.scenario.devices[d];
            let p_rx = propagate_position(
                &draft.truth.position_at_tx,
                &draft.truth.velocity,
                -dev.response_delay_s,
            );
            let tau_u = pairwise_distance(&p1, &p_rx) / SPEED_OF_LIGHT
                + draft.offset_at_rx
                + dev.sigma_seconds() * draft.sync_noise;
            let mut responses = BTreeMap::new();
            for (i, anchor) in self.scenario.anchors.iter().enumerate() {
                let range =
                    pairwise_distance(&anchor.position, &draft.truth.position_at_tx);
                let b_anchor = san_offsets_at_arrival[d][&anchor.id];
                let eps = anchor.sigma_seconds() * draft.response_noise[i];
                let toa = range / SPEED_OF_LIGHT + b_anchor - draft.truth.clock.offset + eps;
                let local_rx = draft.t_tx + range / SPEED_OF_LIGHT + b_anchor + eps;
                responses.insert(anchor.id, ResponseObservation { toa, local_rx });
            }
            devices.push(DeviceEpoch {
                device: d,
                truth: draft.truth,
                t_tx: draft.t_tx,
                t_rx_sync: draft.t_rx_sync,
                san_offsets_at_arrival: san_offsets_at_arrival[d].clone(),
                ud_sync_toa: tau_u,
                responses,
            });
        }

        self.epoch += 1;
        Ok(EpochMeasurements {
            epoch,
            t_sync_tx: t_sync,
            san_sync,
            devices,
        })
    }
}

/// Synthesizes a single epoch by fast-forwarding a fresh [`Simulator`].
/// Costs O(epoch_index) steps; prefer a long-lived simulator for streams.
pub fn synthesize_epoch(
    scenario: &Scenario,
    seed: u64,
    epoch_index: usize,
) -> Result<EpochMeasurements> {
    let mut sim = Simulator::new(scenario.clone(), seed)?;
    let mut last = None;
    for _ in 0..=epoch_index {
        last = Some(sim.step()?);
    }
    Ok(last.expect("at least one epoch synthesized"))
}
