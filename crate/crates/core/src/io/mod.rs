//! File formats: CSV tables, the newline-delimited trial log, the
//! questionnaire text format, and the run manifest.
//!
//! Every format is plain text, byte-deterministic for a given input, and
//! reloadable into the structures that produced it.

pub mod manifest;
pub mod mdp;
pub mod questionnaire;
pub mod tables;
pub mod trial_log;

pub use manifest::{digest_file, read_manifest, sha256_hex, write_manifest, ArtifactDigest, Manifest};
pub use mdp::{read_transition_models, write_transition_models, TransitionRow};
pub use questionnaire::{default_questionnaire, load_questionnaire, parse_questionnaire};
pub use tables::{
    read_calls, read_responses, write_responses, ComparisonCsvRow, CurvePoint, FunnelRow, GainRow,
    ResponseRow,
};
pub use trial_log::{read_trial_log, write_trial_log};

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub(crate) fn display(path: &Path) -> String {
    path.display().to_string()
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(display(path), e))?;
    Ok(BufWriter::new(file))
}

pub(crate) fn open(path: &Path) -> Result<BufReader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(display(path), e))?;
    Ok(BufReader::new(file))
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(display(path), e))
}

/// Write rows as headered CSV. Row order is the iteration order, so pass
/// deterministically ordered data.
pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut writer = csv::Writer::from_writer(create(path)?);
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::format(display(path), e.to_string()))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(display(path), e))?;
    Ok(())
}

/// Read a headered CSV file into typed rows.
pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_reader(open(path)?);
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record.map_err(|e| Error::format(display(path), e.to_string()))?);
    }
    Ok(rows)
}
