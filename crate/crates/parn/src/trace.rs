//! CSV row schemas and small file helpers shared by the command-line
//! tools: raw measurement traces, synchronization estimates, per-epoch
//! solve records, and content digests for reproducibility checks.
//!
//! Positions are emitted as up to three coordinate columns; unused
//! coordinates stay empty so one schema covers every scenario dimension.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scenario::{hex_string, EpochMeasurements};
use crate::Result;

/// One synthesized TOA. `kind` is `sync_anchor`, `sync_device`, or
/// `response`; `anchor_id` is empty for the device's own sync reception.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub epoch: u64,
    pub kind: String,
    pub anchor_id: Option<u32>,
    pub device: Option<u32>,
    pub toa_s: f64,
    pub local_rx_s: f64,
}

/// Ground truth for one device exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub epoch: u64,
    pub device: u32,
    pub t_rx_sync_s: f64,
    pub t_tx_s: f64,
    pub px_m: f64,
    pub py_m: Option<f64>,
    pub pz_m: Option<f64>,
    pub vx_mps: f64,
    pub vy_mps: Option<f64>,
    pub vz_mps: Option<f64>,
    pub clock_offset_s: f64,
    pub clock_drift: f64,
}

/// One synchronization estimate against truth. `method` is `filtered`
/// (tracking filter prediction) or `snapshot` (latest single measurement).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncEstimateRow {
    pub epoch: u64,
    pub anchor_id: u32,
    pub method: String,
    pub offset_s: f64,
    pub offset_std_s: f64,
    pub true_offset_s: f64,
    pub error_m: f64,
}

/// One per-epoch position/clock solution against truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRow {
    pub epoch: u64,
    pub device: u32,
    pub mode: String,
    pub converged: bool,
    pub iterations: u64,
    pub px_m: f64,
    pub py_m: Option<f64>,
    pub pz_m: Option<f64>,
    pub clock_offset_m: f64,
    pub position_error_m: f64,
    pub clock_error_m: f64,
}

/// Per-epoch lower-bound evaluation at the true geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrlbRow {
    pub epoch: u64,
    pub device: u32,
    pub mode: String,
    pub position_bound_m: f64,
    pub clock_bound_m: f64,
    pub total_bound_m: f64,
}

fn coord(v: &[f64], i: usize) -> Option<f64> {
    v.get(i).copied()
}

/// Flattens one epoch of synthesized measurements into rows.
pub fn measurement_rows(em: &EpochMeasurements) -> Vec<MeasurementRow> {
    let mut rows = Vec::new();
    for (id, obs) in &em.san_sync {
        rows.push(MeasurementRow {
            epoch: em.epoch as u64,
            kind: "sync_anchor".into(),
            anchor_id: Some(*id),
            device: None,
            toa_s: obs.toa,
            local_rx_s: obs.local_rx,
        });
    }
    for dev in &em.devices {
        rows.push(MeasurementRow {
            epoch: em.epoch as u64,
            kind: "sync_device".into(),
            anchor_id: None,
            device: Some(dev.device as u32),
            toa_s: dev.ud_sync_toa,
            local_rx_s: em.t_sync_tx + dev.ud_sync_toa,
        });
        for (id, resp) in &dev.responses {
            rows.push(MeasurementRow {
                epoch: em.epoch as u64,
                kind: "response".into(),
                anchor_id: Some(*id),
                device: Some(dev.device as u32),
                toa_s: resp.toa,
                local_rx_s: resp.local_rx,
            });
        }
    }
    rows
}

/// Extracts the device truth rows for one epoch.
pub fn truth_rows(em: &EpochMeasurements) -> Vec<TruthRow> {
    em.devices
        .iter()
        .map(|dev| TruthRow {
            epoch: em.epoch as u64,
            device: dev.device as u32,
            t_rx_sync_s: dev.t_rx_sync,
            t_tx_s: dev.t_tx,
            px_m: dev.truth.position_at_tx[0],
            py_m: coord(&dev.truth.position_at_tx, 1),
            pz_m: coord(&dev.truth.position_at_tx, 2),
            vx_mps: dev.truth.velocity[0],
            vy_mps: coord(&dev.truth.velocity, 1),
            vz_mps: coord(&dev.truth.velocity, 2),
            clock_offset_s: dev.truth.clock.offset,
            clock_drift: dev.truth.clock.drift,
        })
        .collect()
}

/// Serializes rows to a CSV file with a header derived from the row type.
/// An empty slice produces an empty file because the header is derived
/// from the first row; writers needing a header on empty output must emit
/// it themselves.
pub fn write_csv<T: Serialize, P: AsRef<Path>>(path: P, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads all rows of a CSV file written by [`write_csv`].
pub fn read_csv<T: DeserializeOwned, P: AsRef<Path>>(path: P) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record?);
    }
    Ok(rows)
}

/// Hex SHA-256 digest of a file, for byte-level reproducibility checks.
pub fn file_digest<P: AsRef<Path>>(path: P) -> Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}
