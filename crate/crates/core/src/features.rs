//! Per-timestamp features, forward returns and fee-thresholded labels.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{GridStream, TickRecord, LEVELS};
use crate::par::{self, Parallelism};
use crate::FEATURE_DIM;

/// Column names of the 13 features, in storage order.
pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "midPrice",
    "diffBidPrice1",
    "diffBidPrice2",
    "diffBidPrice3",
    "diffBidPrice4",
    "diffBidPrice5",
    "diffAskPrice1",
    "diffAskPrice2",
    "diffAskPrice3",
    "diffAskPrice4",
    "diffAskPrice5",
    "diffLastPrice",
    "logVolume",
];

/// Index of `midPrice` in [`FeatureRow::values`].
pub const MID_PRICE: usize = 0;
pub const DIFF_LAST_PRICE: usize = 11;
pub const LOG_VOLUME: usize = 12;

/// Three-way label. Stored as class index 0, 1, 2 for -1, 0, +1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    Down,
    Flat,
    Up,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Down, Class::Flat, Class::Up];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Class::ALL.get(i).copied()
    }

    /// -1, 0 or +1.
    pub fn value(self) -> i8 {
        self as i8 - 1
    }

    pub fn from_value(v: i8) -> Option<Class> {
        match v {
            -1 => Some(Class::Down),
            0 => Some(Class::Flat),
            1 => Some(Class::Up),
            _ => None,
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+}", self.value())
    }
}

/// The 13 features of one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub timestamp: i64,
    pub values: [f64; FEATURE_DIM],
    /// False for crossed books, rows with no prior data, or non-positive
    /// level-1 prices.
    pub valid: bool,
}

impl FeatureRow {
    pub fn mid_price(&self) -> f64 {
        self.values[MID_PRICE]
    }

    pub fn diff_bid_price(&self, level: usize) -> f64 {
        self.values[1 + level]
    }

    pub fn diff_ask_price(&self, level: usize) -> f64 {
        self.values[1 + LEVELS + level]
    }

    pub fn diff_last_price(&self) -> f64 {
        self.values[DIFF_LAST_PRICE]
    }

    pub fn log_volume(&self) -> f64 {
        self.values[LOG_VOLUME]
    }
}

/// Builds the feature row of one snapshot.
pub fn compute_features(record: &TickRecord) -> FeatureRow {
    let bid1 = record.bid_price[0];
    let ask1 = record.ask_price[0];
    let mid = (bid1 + ask1) / 2.0;
    let mut values = [0.0; FEATURE_DIM];
    values[MID_PRICE] = mid;
    for i in 0..LEVELS {
        values[1 + i] = record.bid_price[i] - mid;
        values[1 + LEVELS + i] = record.ask_price[i] - mid;
    }
    values[DIFF_LAST_PRICE] = record.last_price - mid;
    // natural log; no trade in the interval maps to 0, as does volume 1
    values[LOG_VOLUME] = if record.volume > 0.0 { record.volume.ln() } else { 0.0 };
    let valid = bid1 > 0.0 && ask1 > 0.0 && record.is_usable() && values.iter().all(|v| v.is_finite());
    FeatureRow {
        timestamp: record.timestamp,
        values,
        valid,
    }
}

/// Relative mid-price change from `t` to `t + horizon`, or `None` when the
/// horizon runs past the end of the series.
pub fn compute_return(mid: &[f64], t: usize, horizon: usize) -> Option<f64> {
    let end = mid.get(t.checked_add(horizon)?)?;
    let start = mid[t];
    Some((end - start) / start)
}

/// Fee-thresholded class. `|R| == fee` is flat.
pub fn label(forward_return: f64, fee: f64) -> Class {
    if forward_return > fee {
        Class::Up
    } else if forward_return < -fee {
        Class::Down
    } else {
        Class::Flat
    }
}

/// Forward return and label of one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub timestamp: i64,
    /// NaN when the label is invalid.
    pub forward_return: f64,
    pub label: Class,
    pub label_valid: bool,
}

/// Feature rows and labels of a resampled stream, aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub instrument: Arc<str>,
    pub sessions: Vec<i64>,
    pub rows: Vec<FeatureRow>,
    pub labels: Vec<LabeledPoint>,
}

impl FeatureTable {
    /// Features and labels of a grid stream.
    ///
    /// A point is label-valid when it is past the session warm-up, its own
    /// row and the row `horizon` steps ahead are valid, and both lie in the
    /// same session.
    pub fn build(grid: &GridStream, fee: f64, horizon: usize, mode: Parallelism) -> Result<Self> {
        if fee.is_nan() || fee < 0.0 {
            return Err(Error::Config(format!("fee must be non-negative, got {fee}")));
        }
        let rows = par::map_slice(mode, &grid.records, compute_features);
        let mid: Vec<f64> = rows.iter().map(|r| r.mid_price()).collect();
        let labels = par::map_range(mode, rows.len(), |t| {
            let end = t + horizon;
            let ok = grid.label_valid[t]
                && rows[t].valid
                && end < rows.len()
                && grid.sessions[end] == grid.sessions[t]
                && rows[end].valid;
            let r = if ok { compute_return(&mid, t, horizon) } else { None };
            match r {
                Some(r) if r.is_finite() => LabeledPoint {
                    timestamp: rows[t].timestamp,
                    forward_return: r,
                    label: label(r, fee),
                    label_valid: true,
                },
                _ => LabeledPoint {
                    timestamp: rows[t].timestamp,
                    forward_return: f64::NAN,
                    label: Class::Flat,
                    label_valid: false,
                },
            }
        });
        let instrument = grid
            .records
            .first()
            .map(|r| r.instrument.clone())
            .unwrap_or_else(|| Arc::from(""));
        Ok(FeatureTable {
            instrument,
            sessions: grid.sessions.clone(),
            rows,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Label counts over label-valid points, indexed by class.
    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for l in self.labels.iter().filter(|l| l.label_valid) {
            counts[l.label.index()] += 1;
        }
        counts
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let to_err = |e: csv::Error| Error::Format(e.to_string());
        let mut header = vec!["instrument", "session", "timestamp"];
        header.extend(FEATURE_NAMES);
        header.extend(["forwardReturn", "label", "valid", "labelValid"]);
        w.write_record(&header).map_err(to_err)?;
        let flag = |b: bool| if b { "1" } else { "0" }.to_string();
        for ((row, l), s) in self.rows.iter().zip(&self.labels).zip(&self.sessions) {
            let mut f = vec![self.instrument.to_string(), s.to_string(), row.timestamp.to_string()];
            f.extend(row.values.iter().map(|v| v.to_string()));
            f.push(if l.label_valid { l.forward_return.to_string() } else { String::new() });
            f.push(if l.label_valid { l.label.value().to_string() } else { String::new() });
            f.push(flag(row.valid));
            f.push(flag(l.label_valid));
            w.write_record(&f).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut table = FeatureTable {
            instrument: Arc::from(""),
            sessions: Vec::new(),
            rows: Vec::new(),
            labels: Vec::new(),
        };
        const NCOLS: usize = 3 + FEATURE_DIM + 4;
        for (i, row) in rdr.records().enumerate() {
            let line = i as u64 + 2;
            let row = row.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            if row.len() != NCOLS {
                return Err(Error::Parse { line, message: format!("expected {NCOLS} fields, found {}", row.len()) });
            }
            let bad = |what: &str| Error::Parse { line, message: format!("bad {what}") };
            if i == 0 {
                table.instrument = Arc::from(&row[0]);
            }
            table.sessions.push(row[1].parse().map_err(|_| bad("session"))?);
            let timestamp: i64 = row[2].parse().map_err(|_| bad("timestamp"))?;
            let mut values = [0.0; FEATURE_DIM];
            for (j, v) in values.iter_mut().enumerate() {
                *v = row[3 + j].parse().map_err(|_| bad(FEATURE_NAMES[j]))?;
            }
            let base = 3 + FEATURE_DIM;
            let label_valid = &row[base + 3] == "1";
            let (forward_return, label) = if label_valid {
                let r: f64 = row[base].parse().map_err(|_| bad("forwardReturn"))?;
                let v: i8 = row[base + 1].parse().map_err(|_| bad("label"))?;
                (r, Class::from_value(v).ok_or_else(|| bad("label"))?)
            } else {
                (f64::NAN, Class::Flat)
            };
            table.rows.push(FeatureRow { timestamp, values, valid: &row[base + 2] == "1" });
            table.labels.push(LabeledPoint { timestamp, forward_return, label, label_valid });
        }
        Ok(table)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(file))
    }
}
