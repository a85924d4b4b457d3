//! Per-epoch metrics CSV.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

pub const METRICS_HEADER: &str =
    "experiment,epoch,split,rec_l1,perceptual,commitment,codebook,vq,vq_core,gan_generator,lambda,total,codebook_usage_fraction";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub epoch: usize,
    pub split: Split,
    pub rec_l1: f64,
    pub perceptual: f64,
    pub commitment: f64,
    pub codebook: f64,
    pub vq: f64,
    pub vq_core: f64,
    pub gan_generator: f64,
    pub lambda: f64,
    pub total: f64,
    pub codebook_usage_fraction: f64,
}

impl MetricsRow {
    pub fn new(experiment: &str, epoch: usize, split: Split, b: &LossBreakdown, usage: f64) -> Self {
        Self {
            experiment: experiment.to_string(),
            epoch,
            split,
            rec_l1: b.rec_l1,
            perceptual: b.perceptual,
            commitment: b.commitment,
            codebook: b.codebook,
            vq: b.vq,
            vq_core: b.vq_core,
            gan_generator: b.gan_generator,
            lambda: b.lambda_value,
            total: b.total,
            codebook_usage_fraction: usage,
        }
    }

    fn values(&self) -> [f64; 10] {
        [
            self.rec_l1,
            self.perceptual,
            self.commitment,
            self.codebook,
            self.vq,
            self.vq_core,
            self.gan_generator,
            self.lambda,
            self.total,
            self.codebook_usage_fraction,
        ]
    }
}

/// Appends rows to a CSV file, flushing after each one.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    /// Creates (truncates) `path` and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(Self {
            inner: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(bad) = row.values().iter().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite metric {bad} for {} epoch {}",
                row.experiment, row.epoch
            )));
        }
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::contract(format!("unexpected metrics header in {}", path.display())));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_lossless_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let b = LossBreakdown {
            rec_l1: 0.1 + 0.2,
            total: 1.0 / 3.0,
            ..Default::default()
        };
        let rows = vec![
            MetricsRow::new("x", 1, Split::Train, &b, 0.5),
            MetricsRow::new("x", 1, Split::Val, &b, 1.0),
        ];
        let mut w = MetricsWriter::create(&path).unwrap();
        for r in &rows {
            w.append(r).unwrap();
        }
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
        assert!(text.lines().nth(2).unwrap().starts_with("x,1,val,"));
        assert_eq!(read_metrics(&path).unwrap(), rows);
    }

    #[test]
    fn rejects_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(&dir.path().join("m.csv")).unwrap();
        let b = LossBreakdown {
            total: f64::NAN,
            ..Default::default()
        };
        assert!(w.append(&MetricsRow::new("x", 0, Split::Train, &b, 0.5)).is_err());
    }
}
