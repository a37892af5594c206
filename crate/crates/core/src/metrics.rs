//! Per-epoch metrics records (JSON lines) and Top-k accuracy.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which objective an epoch optimised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// CVAE only, backbone side frozen.
    Stage1,
    /// Backbone, attention and classifier; CVAE frozen.
    Stage2,
    /// Single-objective training for variants without a CVAE.
    Joint,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Joint => "joint",
        })
    }
}

/// One line of a metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub variant: String,
    pub epoch: usize,
    pub stage: Stage,
    /// Mean of each loss component over the epoch's batches.
    pub losses: BTreeMap<String, f64>,
    /// Validation accuracy; `None` on epochs that skip evaluation.
    pub top1: Option<f64>,
    pub topk: Option<f64>,
    pub k: usize,
    pub seconds: Option<f64>,
}

impl MetricsRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics records always serialise")
    }
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", r.to_json())?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("metrics line {}: {e}", i + 1))))
        .collect()
}

/// Fraction of rows whose label is the argmax, and whose label is among the
/// `k` highest scores. Ties rank the lower column first.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<(f64, f64)> {
    let [n, c] = logits.shape() else {
        return Err(Error::Data(format!("logits must be rank 2, got {:?}", logits.shape())));
    };
    let (n, c) = (*n, *c);
    if n == 0 {
        return Err(Error::Data("cannot score an empty split".into()));
    }
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for {n} rows", labels.len())));
    }
    let (mut hit1, mut hitk) = (0usize, 0usize);
    for (row, &y) in logits.data().chunks_exact(c).zip(labels) {
        if y >= c {
            return Err(Error::Data(format!("label {y} outside {c} logits")));
        }
        let s = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > s || (v == s && j < y))
            .count();
        hit1 += usize::from(rank == 0);
        hitk += usize::from(rank < k);
    }
    Ok((hit1 as f64 / n as f64, hitk as f64 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_counts_and_ties() {
        let logits = Tensor::new([3, 3], vec![0.1, 0.9, 0.0, 0.5, 0.5, 0.2, 0.3, 0.2, 0.1]).unwrap();
        let (t1, t2) = topk_accuracy(&logits, &[1, 1, 2], 2).unwrap();
        assert_eq!(t1, 1.0 / 3.0);
        assert_eq!(t2, 2.0 / 3.0);
        assert!(topk_accuracy(&logits, &[1, 1], 2).is_err());
        assert!(topk_accuracy(&logits, &[1, 1, 3], 2).is_err());
    }

    #[test]
    fn json_line_round_trip() {
        let r = MetricsRecord {
            run_id: "full-0001".into(),
            variant: "full".into(),
            epoch: 3,
            stage: Stage::Stage2,
            losses: BTreeMap::from([("clf".to_string(), 1.25), ("recon".to_string(), 0.5)]),
            top1: Some(0.5),
            topk: Some(0.75),
            k: 2,
            seconds: None,
        };
        let line = r.to_json();
        assert!(!line.contains('\n'));
        assert!(line.contains("\"stage\":\"stage2\""));
        assert_eq!(serde_json::from_str::<MetricsRecord>(&line).unwrap(), r);
    }
}
