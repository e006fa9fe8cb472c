//! Per-step metrics log (line-delimited JSON) and wall-time sidecar.
//!
//! The main log holds only deterministic quantities so that two runs from
//! the same seed produce byte-identical files; measured wall time goes to a
//! separate `.timings` sidecar.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::losses::LossBundle;

use super::TrainError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiagRecord {
    pub masked_in_region: usize,
    pub empty_region_samples: usize,
    pub mlm_targets: usize,
    pub itm_negatives: usize,
}

/// One training step. `losses` holds only the objectives that were enabled;
/// `wall_ms` is carried in memory and written to the sidecar, never to the
/// deterministic log line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
    pub total: f64,
    pub lr: f64,
    pub tau: f64,
    pub diag: DiagRecord,
    #[serde(skip)]
    pub wall_ms: f64,
}

impl MetricsRecord {
    pub fn new(
        step: u64,
        epoch: usize,
        bundle: &LossBundle,
        lr: f64,
        tau: f64,
        wall_ms: f64,
    ) -> MetricsRecord {
        let mut losses = BTreeMap::new();
        for (name, v) in bundle.components() {
            if let Some(v) = v {
                losses.insert(name.to_string(), v);
            }
        }
        MetricsRecord {
            step,
            epoch,
            losses,
            total: bundle.total,
            lr,
            tau,
            diag: DiagRecord {
                masked_in_region: bundle.diagnostics.masked_in_region,
                empty_region_samples: bundle.diagnostics.empty_region_samples,
                mlm_targets: bundle.diagnostics.mlm_targets,
                itm_negatives: bundle.diagnostics.itm_negatives,
            },
            wall_ms,
        }
    }
}

pub struct MetricsWriter {
    log: BufWriter<std::fs::File>,
    timings: BufWriter<std::fs::File>,
    last_step: Option<u64>,
}

pub fn timings_path(metrics_path: &Path) -> PathBuf {
    let mut p = metrics_path.as_os_str().to_owned();
    p.push(".timings");
    PathBuf::from(p)
}

impl MetricsWriter {
    /// Append mode so a resumed run extends the same log.
    pub fn open(path: &Path, append: bool) -> Result<MetricsWriter, TrainError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut opts = std::fs::OpenOptions::new();
        opts.create(true).write(true);
        if append {
            opts.append(true);
        } else {
            opts.truncate(true);
        }
        let log = BufWriter::new(opts.open(path)?);
        let timings = BufWriter::new(opts.open(timings_path(path))?);
        Ok(MetricsWriter {
            log,
            timings,
            last_step: None,
        })
    }

    pub fn append(&mut self, rec: &MetricsRecord) -> Result<(), TrainError> {
        if let Some(last) = self.last_step {
            if rec.step <= last {
                return Err(TrainError::Contract(format!(
                    "metrics step {} not increasing past {last}",
                    rec.step
                )));
            }
        }
        self.last_step = Some(rec.step);
        serde_json::to_writer(&mut self.log, rec)
            .map_err(|e| TrainError::Contract(e.to_string()))?;
        self.log.write_all(b"\n")?;
        writeln!(self.timings, "{} {}", rec.step, rec.wall_ms)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.log.flush()?;
        self.timings.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, TrainError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| TrainError::Contract(e.to_string()))?);
    }
    Ok(out)
}
