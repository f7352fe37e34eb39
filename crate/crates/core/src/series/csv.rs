use std::fs::File;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::TimeSeries;
use crate::error::{RaftError, Result};

/// Which columns of a CSV file become channels.
///
/// The first column is always the timestamp (or integer index). When
/// `channels` is `None`, every remaining column is loaded in file order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub channels: Option<Vec<String>>,
    pub frequency: Option<String>,
}

impl CsvSchema {
    pub fn univariate(target: impl Into<String>) -> Self {
        Self {
            channels: Some(vec![target.into()]),
            frequency: None,
        }
    }
}

/// Load a headered CSV. Rows are reported 1-based over data rows (the header is not counted).
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TimeSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| RaftError::io(path, e))?;
    let mut reader = ::csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(::csv::Trim::All)
        .from_reader(file);
    let csv_err = |e: ::csv::Error| RaftError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };

    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 {
        return Err(RaftError::Csv {
            path: path.to_path_buf(),
            message: "need a timestamp column and at least one value column".into(),
        });
    }
    let all_channels = &header[1..];

    let mut timestamps = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); all_channels.len()];
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(csv_err)?;
        if record.len() != header.len() {
            return Err(RaftError::RaggedRow {
                row,
                expected: header.len(),
                found: record.len(),
            });
        }
        timestamps.push(record[0].to_string());
        for (col, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell.parse().map_err(|_| RaftError::NonNumeric {
                row,
                column: all_channels[col].clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(RaftError::NonNumeric {
                    row,
                    column: all_channels[col].clone(),
                    value: cell.to_string(),
                });
            }
            columns[col].push(v);
        }
    }
    let t = timestamps.len();
    if t == 0 {
        return Err(RaftError::Empty(format!("{} has no data rows", path.display())));
    }

    let c = all_channels.len();
    let mut values = Array2::zeros((c, t));
    for (ch, col) in columns.into_iter().enumerate() {
        values.row_mut(ch).assign(&ndarray::Array1::from(col));
    }
    let series = TimeSeries::new(values, all_channels.to_vec())?.with_timestamps(timestamps)?;
    let series = match &schema.channels {
        Some(names) => series.select_channels(names)?,
        None => series,
    };
    Ok(match &schema.frequency {
        Some(f) => series.with_frequency(f.clone()),
        None => series,
    })
}

/// Write a series in the same layout [`load_csv`] reads. Integer positions are
/// used as the first column when the series carries no timestamps.
pub fn write_csv(series: &TimeSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = ::csv::Writer::from_path(path).map_err(|e| RaftError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let wrap = |e: ::csv::Error| RaftError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut header = vec!["date".to_string()];
    header.extend(series.channel_names().iter().cloned());
    writer.write_record(&header).map_err(wrap)?;
    let values = series.values();
    for t in 0..series.len() {
        let mut row = Vec::with_capacity(series.n_channels() + 1);
        row.push(match series.timestamps() {
            Some(ts) => ts[t].clone(),
            None => t.to_string(),
        });
        row.extend(values.column(t).iter().map(|v| v.to_string()));
        writer.write_record(&row).map_err(wrap)?;
    }
    writer.flush().map_err(|e| RaftError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_small_file() {
        let f = write_tmp("date,a,b\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3,4\n2020-01-01 02:00:00,5,6.5\n");
        let s = load_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(s.n_channels(), 2);
        assert_eq!(s.len(), 3);
        assert_eq!(s.channel_names(), &["a", "b"]);
        assert_eq!(s.channel(1).to_vec(), vec![2.0, 4.0, 6.5]);
        assert_eq!(s.timestamps().unwrap()[2], "2020-01-01 02:00:00");
    }

    #[test]
    fn reports_non_numeric_row() {
        let f = write_tmp("t,a,b\n0,1,2\n1,1,2\n2,1,2\n3,1,2\n4,1,oops\n5,1,2\n");
        match load_csv(f.path(), &CsvSchema::default()) {
            Err(RaftError::NonNumeric { row, column, .. }) => {
                assert_eq!(row, 5);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
        let msg = load_csv(f.path(), &CsvSchema::default()).unwrap_err().to_string();
        assert!(msg.contains("row 5"), "{msg}");
    }

    #[test]
    fn reports_ragged_and_missing() {
        let f = write_tmp("t,a,b\n0,1,2\n1,1\n");
        assert!(matches!(
            load_csv(f.path(), &CsvSchema::default()),
            Err(RaftError::RaggedRow { row: 2, expected: 3, found: 2 })
        ));
        assert!(matches!(
            load_csv("/nonexistent/file.csv", &CsvSchema::default()),
            Err(RaftError::Io { .. })
        ));
    }

    #[test]
    fn univariate_selection_and_round_trip() {
        let f = write_tmp("date,a,OT\n0,1,2\n1,3,4\n");
        let s = load_csv(f.path(), &CsvSchema::univariate("OT")).unwrap();
        assert_eq!(s.channel_names(), &["OT"]);
        let out = tempfile::NamedTempFile::new().unwrap();
        write_csv(&s, out.path()).unwrap();
        let back = load_csv(out.path(), &CsvSchema::default()).unwrap();
        assert_eq!(back.values(), s.values());
    }
}
