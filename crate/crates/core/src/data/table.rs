use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{FrameSnapshot, VehicleState};

/// Trajectory rows in SI units, sorted by `(vehicle_id, frame)` with no
/// duplicate pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryTable {
    rows: Vec<VehicleState>,
}

impl TrajectoryTable {
    /// Sorts `rows` and validates each one. Input order does not matter.
    pub fn new(mut rows: Vec<VehicleState>) -> Result<Self> {
        rows.sort_by_key(|r| (r.vehicle_id, r.frame));
        for w in rows.windows(2) {
            if (w[0].vehicle_id, w[0].frame) == (w[1].vehicle_id, w[1].frame) {
                return Err(Error::Data(format!(
                    "duplicate row for vehicle {} at frame {}",
                    w[0].vehicle_id, w[0].frame
                )));
            }
        }
        for r in &rows {
            r.validate()?;
        }
        Ok(TrajectoryTable { rows })
    }

    pub fn rows(&self) -> &[VehicleState] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Inclusive `(first, last)` frame.
    pub fn frame_span(&self) -> Option<(u32, u32)> {
        let lo = self.rows.iter().map(|r| r.frame).min()?;
        let hi = self.rows.iter().map(|r| r.frame).max()?;
        Some((lo, hi))
    }

    pub fn vehicle_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.rows.iter().map(|r| r.vehicle_id).collect();
        ids.dedup();
        ids
    }

    pub fn vehicle_count(&self) -> usize {
        self.vehicle_ids().len()
    }

    /// Rows of one vehicle, in frame order.
    pub fn trajectory(&self, vehicle_id: u32) -> &[VehicleState] {
        let start = self.rows.partition_point(|r| r.vehicle_id < vehicle_id);
        let end = self.rows.partition_point(|r| r.vehicle_id <= vehicle_id);
        &self.rows[start..end]
    }

    /// One snapshot per frame in `first..=last`; frames without rows are empty.
    pub fn snapshots(&self, first: u32, last: u32) -> Result<Vec<FrameSnapshot>> {
        let mut buckets: BTreeMap<u32, Vec<VehicleState>> = (first..=last).map(|f| (f, Vec::new())).collect();
        for r in &self.rows {
            if let Some(b) = buckets.get_mut(&r.frame) {
                b.push(*r);
            }
        }
        buckets.into_iter().map(|(f, vs)| FrameSnapshot::new(f, vs)).collect()
    }

    /// SHA-256 over the canonical little-endian encoding of every row.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for r in &self.rows {
            h.update(r.vehicle_id.to_le_bytes());
            h.update(r.frame.to_le_bytes());
            h.update(r.lane_id.to_le_bytes());
            h.update(r.class_id.to_le_bytes());
            h.update(r.y.to_le_bytes());
            h.update(r.v.to_le_bytes());
            h.update(r.a.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
