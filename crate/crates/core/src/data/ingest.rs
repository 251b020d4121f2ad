use std::path::Path;

use super::{sidecar_path, write_atomic, CorpusManifest, TrajectoryTable, UnitSystem, CORPUS_FRAME_RATE_HZ};
use crate::error::{Error, Result};
use crate::graph::VehicleState;

/// Header names for the seven required columns, plus an optional
/// millisecond timestamp used to confirm the frame rate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnMap {
    pub vehicle_id: String,
    pub frame: String,
    pub lane_id: String,
    pub class_id: String,
    pub local_y: String,
    pub velocity: String,
    pub acceleration: String,
    pub global_time: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            vehicle_id: "Vehicle_ID".into(),
            frame: "Frame_ID".into(),
            lane_id: "Lane_ID".into(),
            class_id: "v_Class".into(),
            local_y: "Local_Y".into(),
            velocity: "v_Vel".into(),
            acceleration: "v_Acc".into(),
            global_time: Some("Global_Time".into()),
        }
    }
}

impl ColumnMap {
    fn required(&self) -> [&str; 7] {
        [
            &self.vehicle_id,
            &self.frame,
            &self.lane_id,
            &self.class_id,
            &self.local_y,
            &self.velocity,
            &self.acceleration,
        ]
    }
}

/// Reads a delimited trajectory file into an SI table.
///
/// Rows are order-normalized, so shuffled input yields the same table. A
/// vehicle's frames must form one consecutive run; rows after a gap in that
/// run are rejected and counted in the manifest. A sidecar manifest, when
/// present, must agree with `units` and declare 10 Hz.
pub fn ingest_csv(path: &Path, columns: &ColumnMap, units: UnitSystem) -> Result<(TrajectoryTable, CorpusManifest)> {
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let declared = CorpusManifest::read(&sidecar)?;
        if declared.units != units {
            return Err(Error::Unit(format!(
                "{} declares {:?} but ingestion was asked for {:?}",
                sidecar.display(),
                declared.units,
                units
            )));
        }
        check_rate(declared.frame_rate_hz)?;
    }

    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Schema(format!("{}: {other:?}", path.display())),
        })?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column '{name}'", path.display())))
    };
    let idx: Vec<usize> = columns.required().iter().map(|c| find(c)).collect::<Result<_>>()?;
    let time_idx = columns.global_time.as_deref().and_then(|c| headers.iter().position(|h| h == c));

    let scale = units.to_meters();
    let mut rows = Vec::new();
    let mut times = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let line = line + 2;
        let int = |i: usize, what: &str| -> Result<u32> {
            field(i)
                .parse::<u32>()
                .map_err(|_| Error::Data(format!("line {line}: {what} '{}' is not a non-negative integer", field(i))))
        };
        let real = |i: usize, what: &str| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("line {line}: {what} '{}' is not a number", field(i))))
        };
        let row = VehicleState {
            vehicle_id: int(idx[0], "vehicle id")?,
            frame: int(idx[1], "frame")?,
            lane_id: int(idx[2], "lane id")?,
            class_id: int(idx[3], "class")?,
            y: real(idx[4], "position")? * scale,
            v: real(idx[5], "velocity")? * scale,
            a: real(idx[6], "acceleration")? * scale,
        };
        if let Some(t) = time_idx {
            times.push((row.vehicle_id, row.frame, real(t, "timestamp")?));
        }
        rows.push(row);
    }

    let sorted = TrajectoryTable::new(rows)?;
    if !times.is_empty() {
        times.sort_by_key(|&(v, f, _)| (v, f));
        if let Some(w) = times.windows(2).find(|w| w[0].0 == w[1].0 && w[1].1 > w[0].1) {
            let ms_per_frame = (w[1].2 - w[0].2) / f64::from(w[1].1 - w[0].1);
            check_rate(1000.0 / ms_per_frame)?;
        }
    }

    let mut kept = Vec::with_capacity(sorted.len());
    let mut rejected = 0;
    for run in sorted.rows().chunk_by(|a, b| a.vehicle_id == b.vehicle_id) {
        let contiguous = 1 + run.windows(2).take_while(|w| w[1].frame == w[0].frame + 1).count();
        kept.extend_from_slice(&run[..contiguous]);
        rejected += run.len() - contiguous;
    }
    let table = TrajectoryTable::new(kept)?;
    let source = format!("file:{}", path.file_name().unwrap_or_default().to_string_lossy());
    let manifest = CorpusManifest::describe(source, units, &table, rejected);
    Ok((table, manifest))
}

fn check_rate(hz: f64) -> Result<()> {
    if (hz - CORPUS_FRAME_RATE_HZ).abs() > 1e-6 * CORPUS_FRAME_RATE_HZ {
        return Err(Error::Data(format!(
            "corpus sampled at {hz} Hz; only {CORPUS_FRAME_RATE_HZ} Hz is supported"
        )));
    }
    Ok(())
}

/// Writes the table with NGSIM column names in SI units, plus a sidecar
/// manifest. Floats use shortest round-trip formatting, so re-ingesting
/// with [`UnitSystem::Meters`] reproduces the table exactly.
pub fn export_csv(table: &TrajectoryTable, path: &Path, source: &str) -> Result<CorpusManifest> {
    let c = ColumnMap::default();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(c.required())?;
    for r in table.rows() {
        w.write_record([
            r.vehicle_id.to_string(),
            r.frame.to_string(),
            r.lane_id.to_string(),
            r.class_id.to_string(),
            r.y.to_string(),
            r.v.to_string(),
            r.a.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)?;
    let manifest = CorpusManifest::describe(source, UnitSystem::Meters, table, 0);
    manifest.write(&sidecar_path(path))?;
    Ok(manifest)
}
