//! Append-only metrics CSV with the fixed header
//! `epoch,ratio,split,ce,kl,acc,lr`. Ratios are written as exact rationals;
//! an empty `kl` means no distillation term was computed.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slicing::WidthRatio;

pub const HEADER: [&str; 7] = ["epoch", "ratio", "split", "ce", "kl", "acc", "lr"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: u32,
    pub ratio: WidthRatio,
    pub split: String,
    pub ce: f64,
    pub kl: Option<f64>,
    pub acc: f64,
    pub lr: f64,
}

pub struct MetricsWriter {
    path: PathBuf,
    writer: csv::Writer<std::fs::File>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

impl MetricsWriter {
    /// Opens `path` for appending, writing the header if the file is new or
    /// empty. An existing file must start with the expected header.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let existing = match std::fs::File::open(path) {
            Ok(f) => {
                let mut first = String::new();
                BufReader::new(f).read_line(&mut first).map_err(|e| Error::io(path, e))?;
                Some(first)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(path, e)),
        };
        let needs_header = match existing.as_deref() {
            None | Some("") => true,
            Some(line) if line.trim_end() == HEADER.join(",") => false,
            Some(line) => {
                return Err(Error::format(path, format!("unexpected metrics header {:?}", line.trim_end())))
            }
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if needs_header {
            writer.write_record(HEADER).map_err(|e| csv_err(path, e))?;
            writer.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row).map_err(|e| csv_err(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads every row of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().ne(HEADER) {
        return Err(Error::format(path, "unexpected metrics header"));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_once_and_rows_append() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let row = MetricsRow {
            epoch: 1,
            ratio: "3/4".parse().unwrap(),
            split: "train".into(),
            ce: 0.5,
            kl: None,
            acc: 0.25,
            lr: 0.001,
        };
        {
            let mut w = MetricsWriter::open(&p).unwrap();
            w.write(&row).unwrap();
        }
        {
            let mut w = MetricsWriter::open(&p).unwrap();
            w.write(&MetricsRow { kl: Some(0.1), ..row.clone() }).unwrap();
        }
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,ratio,split,ce,kl,acc,lr");
        assert_eq!(lines[1], "1,3/4,train,0.5,,0.25,0.001");
        assert_eq!(lines.len(), 3);
        let rows = read_metrics(&p).unwrap();
        assert_eq!(rows[0], row);
        assert_eq!(rows[1].kl, Some(0.1));
    }

    #[test]
    fn foreign_file_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "a,b\n").unwrap();
        assert!(MetricsWriter::open(&p).is_err());
    }
}
