use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_file, write_atomic, TrajectoryTable};
use crate::error::{Error, Result};

/// The only accepted sampling rate.
pub const CORPUS_FRAME_RATE_HZ: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitSystem {
    /// Feet, ft/s, ft/s² (NGSIM releases).
    Feet,
    /// Meters, m/s, m/s².
    Meters,
}

impl UnitSystem {
    /// Multiplier taking a length in this system to meters.
    pub fn to_meters(self) -> f64 {
        match self {
            UnitSystem::Feet => crate::graph::FEET_TO_METERS,
            UnitSystem::Meters => 1.0,
        }
    }
}

impl std::str::FromStr for UnitSystem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "feet" | "ft" => Ok(UnitSystem::Feet),
            "meters" | "m" | "si" => Ok(UnitSystem::Meters),
            other => Err(Error::Unit(format!("unknown unit system '{other}' (expected feet or meters)"))),
        }
    }
}

/// Sidecar describing a corpus. `checksum` is [`TrajectoryTable::checksum`]
/// of the SI table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub source: String,
    /// Units of the file the corpus was read from or written to.
    pub units: UnitSystem,
    pub frame_rate_hz: f64,
    pub vehicle_count: usize,
    pub row_count: usize,
    pub frame_span: Option<(u32, u32)>,
    /// Rows dropped during ingestion.
    pub rejected_rows: usize,
    pub checksum: String,
}

impl CorpusManifest {
    pub fn describe(source: impl Into<String>, units: UnitSystem, table: &TrajectoryTable, rejected_rows: usize) -> Self {
        CorpusManifest {
            source: source.into(),
            units,
            frame_rate_hz: CORPUS_FRAME_RATE_HZ,
            vehicle_count: table.vehicle_count(),
            row_count: table.len(),
            frame_span: table.frame_span(),
            rejected_rows,
            checksum: table.checksum(),
        }
    }

    /// Integrity error unless `table` hashes to the recorded checksum.
    pub fn verify(&self, table: &TrajectoryTable) -> Result<()> {
        let actual = table.checksum();
        if actual != self.checksum {
            return Err(Error::Integrity(format!(
                "corpus checksum {actual} does not match manifest {}",
                self.checksum
            )));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&read_file(path)?)?)
    }
}

/// `<file>.manifest.json` beside a corpus file.
pub fn sidecar_path(corpus: &Path) -> PathBuf {
    let mut name = corpus.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    corpus.with_file_name(name)
}
