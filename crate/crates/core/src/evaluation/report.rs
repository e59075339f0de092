//! Metric reports: a JSON record and a flat comma-separated table.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::write_json;

pub const REPORT_VERSION: u32 = 1;

/// Metric names in table order.
pub const METRIC_NAMES: [&str; 9] = ["bleu", "rouge", "ndcg", "hr", "mb_urs", "sb_urs", "asb_urs", "iur", "nrc"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub metrics: BTreeMap<String, f64>,
    /// Per-split metrics when a split analysis was requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub splits: Option<Vec<BTreeMap<String, f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub variance: Option<BTreeMap<String, f64>>,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn new(metrics: BTreeMap<String, f64>, config: serde_json::Value) -> Self {
        Self {
            version: REPORT_VERSION,
            metrics,
            splits: None,
            variance: None,
            config,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rows = std::iter::once(&self.metrics)
            .chain(self.splits.iter().flatten())
            .chain(self.variance.iter());
        for row in rows {
            if let Some((k, v)) = row.iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::Numeric(format!("metric {k} = {v} is not finite")));
            }
        }
        if self.splits.is_some() != self.variance.is_some() {
            return Err(Error::Shape("split values and variance must come together".into()));
        }
        Ok(())
    }

    /// Column names: the standard metrics first, then any others sorted.
    fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = METRIC_NAMES
            .iter()
            .filter(|m| self.metrics.contains_key(**m))
            .map(|m| m.to_string())
            .collect();
        cols.extend(self.metrics.keys().filter(|k| !METRIC_NAMES.contains(&k.as_str())).cloned());
        cols
    }

    pub fn to_csv(&self) -> String {
        let cols = self.columns();
        let mut out = format!("row,{}\n", cols.join(","));
        let mut line = |label: &str, row: &BTreeMap<String, f64>| {
            let vals: Vec<String> = cols
                .iter()
                .map(|c| row.get(c).map_or(String::new(), |v| format!("{v}")))
                .collect();
            out.push_str(&format!("{label},{}\n", vals.join(",")));
        };
        line("all", &self.metrics);
        if let Some(splits) = &self.splits {
            for (i, s) in splits.iter().enumerate() {
                line(&format!("split{}", i + 1), s);
            }
        }
        if let Some(v) = &self.variance {
            line("variance", v);
        }
        out
    }

    /// Write `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(format!("{stem}.json")), self)?;
        let path = dir.join(format!("{stem}.csv"));
        std::fs::write(&path, self.to_csv()).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricReport {
        let metrics: BTreeMap<String, f64> = METRIC_NAMES.iter().enumerate().map(|(i, m)| (m.to_string(), i as f64)).collect();
        MetricReport::new(metrics, serde_json::json!({"seed": 1}))
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut r = report();
        r.splits = Some(vec![r.metrics.clone(), r.metrics.clone()]);
        r.variance = Some(METRIC_NAMES.iter().map(|m| (m.to_string(), 0.0)).collect());
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "row,bleu,rouge,ndcg,hr,mb_urs,sb_urs,asb_urs,iur,nrc");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("variance,"));
    }

    #[test]
    fn non_finite_values_are_refused() {
        let mut r = report();
        r.metrics.insert("iur".into(), f64::NAN);
        assert!(matches!(r.validate(), Err(Error::Numeric(_))));
        let mut r = report();
        r.splits = Some(vec![]);
        assert!(r.validate().is_err());
    }

    #[test]
    fn writes_are_reproducible() {
        let d = tempfile::tempdir().unwrap();
        report().write(d.path(), "a").unwrap();
        report().write(d.path(), "b").unwrap();
        for ext in ["json", "csv"] {
            assert_eq!(
                std::fs::read(d.path().join(format!("a.{ext}"))).unwrap(),
                std::fs::read(d.path().join(format!("b.{ext}"))).unwrap()
            );
        }
    }
}
