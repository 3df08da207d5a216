//! Plain-text CSV output with `# key: value` provenance headers.
//!
//! Floats use Rust's shortest round-trip formatting, so parsing a data cell
//! back gives the same `f64` bit pattern.

use std::fmt::Write as _;

use crate::engine::ObservableSeries;

/// Version string embedded in every header.
pub const TOOL_VERSION: &str = concat!("uitsde ", env!("CARGO_PKG_VERSION"));

/// Ordered header fields; `tool` is always first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvHeader {
    pub fields: Vec<(String, String)>,
}

impl CsvHeader {
    pub fn new() -> Self {
        CsvHeader {
            fields: vec![("tool".into(), TOOL_VERSION.into())],
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.push(key, value);
        self
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        // Newlines would end the comment line early.
        let v = value.to_string().replace(['\n', '\r'], " ");
        self.fields.push((key.to_string(), v));
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.fields {
            let _ = writeln!(s, "# {k}: {v}");
        }
        s
    }
}

/// Rows of `time,estimate,stderr,n_effective,blowups`.
pub fn series_csv(header: &CsvHeader, series: &ObservableSeries) -> String {
    let mut s = header.render();
    s.push_str("time,estimate,stderr,n_effective,blowups\n");
    for i in 0..series.times.len() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            series.times[i], series.mean[i], series.stderr[i], series.n_effective[i], series.blowups[i]
        );
    }
    s
}

/// Generic table with a header row.
pub fn table_csv(header: &CsvHeader, columns: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.render();
    s.push_str(&columns.join(","));
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

/// The lines of a CSV that are not `#` comments.
pub fn data_section(csv: &str) -> String {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .fold(String::new(), |mut acc, l| {
            acc.push_str(l);
            acc.push('\n');
            acc
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        let series = ObservableSeries {
            name: "x".into(),
            times: vec![0.0, 0.25],
            mean: vec![0.1 + 0.2, 1.0 / 3.0],
            stderr: vec![0.0, 1e-300],
            n_effective: vec![4, 3],
            blowups: vec![0, 1],
        };
        let csv = series_csv(&CsvHeader::new().with("seed", 7), &series);
        assert!(csv.starts_with("# tool: uitsde "));
        let data = data_section(&csv);
        let row: Vec<&str> = data.lines().nth(2).unwrap().split(',').collect();
        assert_eq!(row[1].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(row[2].parse::<f64>().unwrap(), 1e-300);
        assert_eq!(row[4], "1");
    }
}
