use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "pattern,region_or_modality,metric,value";

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    /// Availability over the canonical modality order, e.g. `1011`.
    pub pattern: String,
    pub key: String,
    /// `dice` or `psnr`.
    pub metric: String,
    pub value: f64,
}

/// Long-format table of sweep results, rows grouped by pattern.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<ReportRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.pattern, r.key, r.metric, r.value));
        }
        out
    }

    /// Parses [`SweepReport::to_csv`] output; `path` only labels errors.
    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::format(path, format!("first line must be {CSV_HEADER:?}")));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let bad = |msg: String| Error::format(path, format!("line {}: {msg}", n + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", fields.len())));
            }
            if fields[0].is_empty() || !fields[0].chars().all(|c| c == '0' || c == '1') {
                return Err(bad(format!("bad pattern {:?}", fields[0])));
            }
            let value: f64 = fields[3].parse().map_err(|_| bad(format!("bad value {:?}", fields[3])))?;
            rows.push(ReportRow {
                pattern: fields[0].to_string(),
                key: fields[1].to_string(),
                metric: fields[2].to_string(),
                value,
            });
        }
        Ok(SweepReport { rows })
    }

    /// Distinct patterns in order of first appearance.
    pub fn patterns(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if out.last() != Some(&r.pattern) && !out.contains(&r.pattern) {
                out.push(r.pattern.clone());
            }
        }
        out
    }

    pub fn value(&self, pattern: &str, key: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.pattern == pattern && r.key == key && r.metric == metric)
            .map(|r| r.value)
    }

    /// Mean of a metric over every pattern that reports it.
    pub fn mean(&self, key: &str, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.key == key && r.metric == metric)
            .map(|r| r.value)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let report = SweepReport {
            rows: vec![
                ReportRow {
                    pattern: "1011".into(),
                    key: "WT".into(),
                    metric: "dice".into(),
                    value: 0.1 + 0.2,
                },
                ReportRow {
                    pattern: "1011".into(),
                    key: "T1".into(),
                    metric: "psnr".into(),
                    value: 23.456_789_012_345_67,
                },
            ],
        };
        let back = SweepReport::from_csv(&report.to_csv(), Path::new("r.csv")).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.patterns(), vec!["1011".to_string()]);
    }

    #[test]
    fn rejects_malformed_csv() {
        let p = Path::new("r.csv");
        assert!(SweepReport::from_csv("a,b\n", p).is_err());
        assert!(SweepReport::from_csv(&format!("{CSV_HEADER}\n1x11,WT,dice,0.5\n"), p).is_err());
        assert!(SweepReport::from_csv(&format!("{CSV_HEADER}\n1111,WT,dice\n"), p).is_err());
        assert!(SweepReport::from_csv(&format!("{CSV_HEADER}\n1111,WT,dice,abc\n"), p).is_err());
    }
}
