use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use super::bar::{OhlcBar, OhlcSeries, TIMESTAMP_FORMAT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// Header row naming `timestamp,open,high,low,close` in any order.
    #[default]
    Csv,
    /// One JSON object per line with the same field names.
    JsonLines,
}

/// Reads, validates and sorts an hourly OHLC file.
pub fn ingest(path: &Path, format: InputFormat) -> Result<OhlcSeries> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bars = match format {
        InputFormat::Csv => read_csv(file)?,
        InputFormat::JsonLines => read_json_lines(BufReader::new(file))?,
    };
    if bars.is_empty() {
        return Err(Error::NoRows);
    }
    bars.sort_by_key(|b| b.timestamp);
    OhlcSeries::new(bars)
}

fn parse_timestamp(raw: &str, row: usize) -> Result<NaiveDateTime> {
    let ts = NaiveDateTime::parse_from_str(raw, TIMESTAMP_FORMAT).map_err(|e| Error::Parse {
        row,
        msg: format!("bad timestamp `{raw}`: {e}"),
    })?;
    if ts.minute() != 0 || ts.second() != 0 {
        return Err(Error::Parse {
            row,
            msg: format!("timestamp `{raw}` is not on the hour"),
        });
    }
    Ok(ts)
}

/// Parses CSV rows without validating bar invariants. Row numbers in errors
/// are 1-based file lines (the header is line 1).
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<OhlcBar>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            msg: e.to_string(),
        })?
        .clone();
    if headers.is_empty() {
        return Err(Error::NoRows);
    }
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Parse {
                row: 1,
                msg: format!("missing column `{name}`"),
            })
    };
    let idx = [col("timestamp")?, col("open")?, col("high")?, col("low")?, col("close")?];

    let mut bars = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        let field = |k: usize| -> Result<&str> {
            record.get(idx[k]).ok_or_else(|| Error::Parse {
                row,
                msg: "missing field".into(),
            })
        };
        let price = |k: usize| -> Result<f64> {
            let raw = field(k)?;
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                msg: format!("bad price `{raw}`"),
            })
        };
        let timestamp = parse_timestamp(field(0)?, row)?;
        bars.push(OhlcBar::new(timestamp, price(1)?, price(2)?, price(3)?, price(4)?));
    }
    Ok(bars)
}

fn read_json_lines<R: BufRead>(reader: R) -> Result<Vec<OhlcBar>> {
    let mut bars = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bar: OhlcBar = serde_json::from_str(&line).map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        parse_timestamp(&bar.timestamp.format(TIMESTAMP_FORMAT).to_string(), row)?;
        bars.push(bar);
    }
    Ok(bars)
}

/// Writes the canonical `timestamp,open,high,low,close` layout.
pub fn write_csv<W: Write>(series: &OhlcSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Parse {
        row: 0,
        msg: e.to_string(),
    };
    w.write_record(["timestamp", "open", "high", "low", "close"])
        .map_err(err)?;
    for b in series.bars() {
        w.write_record([
            b.timestamp.format(TIMESTAMP_FORMAT).to_string(),
            format!("{}", b.open),
            format!("{}", b.high),
            format!("{}", b.low),
            format!("{}", b.close),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_table_row_in_close_open_high_low_order() {
        let f = write_tmp(
            "timestamp,close,open,high,low\n2020-04-21 22:00:00, 10298.7, 10282.5, 10306.1, 10277.4\n",
        );
        let series = ingest(f.path(), InputFormat::Csv).unwrap();
        let bar = series.bars()[0];
        assert_eq!(bar.close, 10298.7);
        assert_eq!(bar.open, 10282.5);
        assert_eq!(bar.high, 10306.1);
        assert_eq!(bar.low, 10277.4);
    }

    #[test]
    fn empty_file_has_no_rows() {
        let f = write_tmp("");
        assert!(matches!(ingest(f.path(), InputFormat::Csv), Err(Error::NoRows)));
        let f = write_tmp("timestamp,open,high,low,close\n");
        assert_eq!(ingest(f.path(), InputFormat::Csv).unwrap_err().to_string(), "no rows");
    }

    #[test]
    fn inversion_names_timestamp() {
        let f = write_tmp(
            "timestamp,open,high,low,close\n\
             2020-04-21 22:00:00,100,101,99,100\n\
             2020-04-21 23:00:00,100,98,102,100\n",
        );
        let err = ingest(f.path(), InputFormat::Csv).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("2020-04-21 23:00:00"));
        assert!(!err.to_string().contains("22:00:00"));
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = write_tmp(
            "timestamp,open,high,low,close\n\
             2020-04-21 22:00:00,100,101,99,100\n\
             2020-04-21 23:00:00,abc,101,99,100\n",
        );
        match ingest(f.path(), InputFormat::Csv).unwrap_err() {
            Error::Parse { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_timestamp_rejected_and_rows_sorted() {
        let f = write_tmp(
            "timestamp,open,high,low,close\n\
             2020-04-21 23:00:00,100,101,99,100\n\
             2020-04-21 22:00:00,100,101,99,100\n",
        );
        let s = ingest(f.path(), InputFormat::Csv).unwrap();
        assert!(s.bars()[0].timestamp < s.bars()[1].timestamp);
        let f = write_tmp(
            "timestamp,open,high,low,close\n\
             2020-04-21 22:00:00,100,101,99,100\n\
             2020-04-21 22:00:00,100,101,99,100\n",
        );
        assert!(matches!(ingest(f.path(), InputFormat::Csv), Err(Error::Validation(_))));
    }

    #[test]
    fn csv_and_json_lines_agree() {
        let f = write_tmp("timestamp,open,high,low,close\n2020-04-21 22:00:00,100,101,99,100.5\n");
        let a = ingest(f.path(), InputFormat::Csv).unwrap();
        let line = serde_json::to_string(&a.bars()[0]).unwrap();
        let g = write_tmp(&format!("{line}\n"));
        let b = ingest(g.path(), InputFormat::JsonLines).unwrap();
        assert_eq!(a, b);

        let mut out = Vec::new();
        write_csv(&a, &mut out).unwrap();
        assert_eq!(read_csv(out.as_slice()).unwrap(), a.bars());
    }
}
