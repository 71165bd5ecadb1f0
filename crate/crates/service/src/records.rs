//! Reader grading records and their append-only log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const READS_FILE: &str = "reads.ndjson";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Diagnosis {
    Benign,
    #[serde(rename = "PCA")]
    Pca,
    #[serde(rename = "HGPIN")]
    Hgpin,
    #[serde(rename = "ASAP")]
    Asap,
    #[serde(rename = "PINATYP")]
    PinAtyp,
    #[serde(rename = "ASAP-HI")]
    AsapHi,
    #[serde(rename = "AIP")]
    Aip,
    #[serde(rename = "BFM")]
    Bfm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub core_id: String,
    pub reader_id: String,
    pub final_diagnosis: Diagnosis,
    /// Grade group, only for carcinoma.
    #[serde(default)]
    pub ggg: Option<u8>,
    pub tumor_percent: f64,
    pub tumor_mm: f64,
    pub cribriform: bool,
    pub idc: bool,
    pub pni: bool,
    /// Set by the server on receipt.
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
}

impl GradeRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ServiceError::InvalidRecord(m));
        if self.reader_id.trim().is_empty() {
            return bad("reader_id is empty".into());
        }
        match (self.final_diagnosis, self.ggg) {
            (Diagnosis::Pca, None) => return bad("PCA requires a grade group".into()),
            (Diagnosis::Pca, Some(g)) if !(1..=5).contains(&g) => return bad(format!("grade group {g} outside 1..5")),
            (d, Some(_)) if d != Diagnosis::Pca => return bad(format!("grade group given for {d:?}")),
            _ => {}
        }
        if !(0.0..=100.0).contains(&self.tumor_percent) {
            return bad(format!("tumor_percent {} outside [0, 100]", self.tumor_percent));
        }
        if !(self.tumor_mm >= 0.0 && self.tumor_mm.is_finite()) {
            return bad(format!("tumor_mm {} must be a non-negative length", self.tumor_mm));
        }
        Ok(())
    }
}

/// Newline-delimited JSON, one record per line. Appends go through a lock
/// and a single `write` on an append-mode file, so lines never interleave.
#[derive(Debug, Default)]
pub struct RecordLog {
    lock: Mutex<()>,
}

impl RecordLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, path: &Path, record: &GradeRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record).map_err(|source| ServiceError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        line.push(b'\n');
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ServiceError::io(path, e))?;
        f.write_all(&line).map_err(|e| ServiceError::io(path, e))?;
        f.sync_data().map_err(|e| ServiceError::io(path, e))
    }

    pub fn read_all(path: &Path) -> Result<Vec<GradeRecord>> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(ServiceError::io(path, e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|source| ServiceError::Json {
                    path: PathBuf::from(path),
                    source,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(d: Diagnosis, ggg: Option<u8>) -> GradeRecord {
        GradeRecord {
            core_id: "c1".into(),
            reader_id: "r1".into(),
            final_diagnosis: d,
            ggg,
            tumor_percent: 30.0,
            tumor_mm: 2.5,
            cribriform: false,
            idc: false,
            pni: true,
            timestamp: None,
        }
    }

    #[test]
    fn grade_group_iff_carcinoma() {
        assert!(record(Diagnosis::Pca, Some(3)).validate().is_ok());
        assert!(record(Diagnosis::Pca, None).validate().is_err());
        assert!(record(Diagnosis::Pca, Some(6)).validate().is_err());
        assert!(record(Diagnosis::Benign, Some(3)).validate().is_err());
        assert!(record(Diagnosis::AsapHi, None).validate().is_ok());
        let mut r = record(Diagnosis::Benign, None);
        r.tumor_percent = 101.0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn diagnosis_names() {
        assert_eq!(serde_json::to_string(&Diagnosis::AsapHi).unwrap(), "\"ASAP-HI\"");
        assert_eq!(serde_json::from_str::<Diagnosis>("\"PINATYP\"").unwrap(), Diagnosis::PinAtyp);
        assert!(serde_json::from_str::<Diagnosis>("\"Cancer\"").is_err());
    }

    #[test]
    fn concurrent_appends_keep_lines_whole() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(READS_FILE);
        let log = RecordLog::new();
        std::thread::scope(|s| {
            for t in 0..8 {
                let (log, path) = (&log, &path);
                s.spawn(move || {
                    for i in 0..25 {
                        let mut r = record(Diagnosis::Pca, Some(1 + (i % 5) as u8));
                        r.reader_id = format!("reader-{t}-{i}-{}", "x".repeat(500));
                        log.append(path, &r).unwrap();
                    }
                });
            }
        });
        assert_eq!(RecordLog::read_all(&path).unwrap().len(), 200);
    }
}
