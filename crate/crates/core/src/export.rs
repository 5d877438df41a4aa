//! CSV and JSON output with lossless float formatting.
//!
//! Every CSV starts with one `#` comment line that records the command and
//! seed, followed by a header row.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::Task;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Format {
        path: PathBuf,
        line: u64,
        message: String,
    },
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct CsvTable {
    pub comment: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(comment: impl Into<String>, header: Vec<String>) -> Self {
        Self {
            comment: comment.into(),
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<(), ExportError> {
        let io = |source| ExportError::Io {
            path: path.to_path_buf(),
            source,
        };
        let csv_err = |source| ExportError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut file = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(file, "# {}", self.comment).map_err(io)?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush().map_err(io)
    }
}

/// `prefix_1, …, prefix_k`.
pub fn numbered(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("{prefix}_{i}")).collect()
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), ExportError> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads `t, w_1, …, w_m` rows; `#` lines are comments.
pub fn read_trajectory(path: &Path, m: usize) -> Result<Vec<(f64, Task)>, ExportError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| ExportError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    let format = |line: u64, message: String| ExportError::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = reader
        .headers()
        .map_err(|source| ExportError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    if header.len() != m + 1 {
        return Err(format(
            1,
            format!(
                "expected {} columns (t and {m} task components), found {}",
                m + 1,
                header.len()
            ),
        ));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| ExportError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let values: Vec<f64> = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| format(line, format!("{f:?}: {e}")))
            })
            .collect::<Result<_, _>>()?;
        let task = Task::from_slice(&values[1..]).map_err(|e| format(line, e.to_string()))?;
        if !values[0].is_finite() {
            return Err(format(line, "time stamp is not finite".into()));
        }
        out.push((values[0], task));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [
            0.1,
            -1.0 / 3.0,
            1e-300,
            6.02214076e23,
            f64::MIN_POSITIVE,
            2f64.sqrt(),
        ] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(2.0), "2.0000000000000000e0");
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let mut table = CsvTable::new("test seed=0", vec!["t".into(), "w_1".into(), "w_2".into()]);
        table.push(vec![fmt_f64(0.0), fmt_f64(1.5), fmt_f64(-0.25)]);
        table.push(vec![fmt_f64(0.1), fmt_f64(1.0 / 3.0), fmt_f64(0.0)]);
        table.write(&path).unwrap();
        let back = read_trajectory(&path, 2).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].1[0], 1.0 / 3.0);
        assert!(matches!(
            read_trajectory(&path, 1),
            Err(ExportError::Format { .. })
        ));
    }

    #[test]
    fn malformed_rows_report_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "t,w_1\n0,1\n0.5,abc\n").unwrap();
        match read_trajectory(&path, 1) {
            Err(ExportError::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
