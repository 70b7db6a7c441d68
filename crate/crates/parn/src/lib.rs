//! Simulation and estimation laboratory for a periodic asymmetric ranging
//! network (PARN).
//!
//! A PARN deployment has one primary anchor node (PAN) that broadcasts a
//! periodic sync signal, a set of receive-only secondary anchor nodes (SANs),
//! and mobile user devices (UDs) that answer each broadcast with a response
//! signal after a fixed delay. Every node timestamps what it hears against
//! its own imperfect clock. The crate provides:
//!
//! * [`clock`]: two-state (offset, drift) random-walk clock model and
//!   constant-velocity motion, shared by synthesis and estimation.
//! * [`scenario`]: deployment description, schedule validation, and
//!   epoch-by-epoch synthesis of sync and response time-of-arrival (TOA)
//!   measurements with ground truth attached.
//! * [`sync`]: per-SAN Kalman filter that turns the sync TOA stream into
//!   virtual synchronization (predicted SAN clock offset at the response
//!   instant plus its variance), and the one-shot baseline it replaces.
//! * [`solver`]: weighted nonlinear least-squares estimation of UD position
//!   and clock offset from one epoch of response TOAs, optionally augmented
//!   with the UD's own sync TOA (Mode 1).
//! * [`analysis`]: Fisher information and CRLB reports, sensitivity of the
//!   Mode 1 estimate to wrong velocity or drift inputs, and diagnostic
//!   transforms for recorded traces.
//! * [`harness`]: deterministic Monte Carlo sweeps over noise and deviation
//!   grids, figure presets with pinned thresholds, and CSV/JSON emission.
//!
//! Clock quantities are stored in seconds everywhere; meters appear only at
//! the solver and reporting boundaries, scaled by [`SPEED_OF_LIGHT`].

pub mod analysis;
pub mod clock;
pub mod harness;
pub mod scenario;
pub mod solver;
pub mod sync;
pub mod trace;

/// Propagation speed used to convert between time and range, in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate geometry: {0}")]
    Geometry(String),
    #[error("schedule conflict: {0}")]
    Schedule(String),
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
