use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Append-only metric rows, written as `step,split,metric,value` CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, step: usize, split: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            step,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    /// Values of one metric in insertion order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        self.series(split, metric).last().map(|&(_, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,split,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.step, r.split, r.metric, r.value
            ));
        }
        out
    }

    /// Last value of every `(split, metric)` pair.
    pub fn summary(&self) -> BTreeMap<String, f64> {
        self.rows
            .iter()
            .map(|r| (format!("{}/{}", r.split, r.metric), r.value))
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
