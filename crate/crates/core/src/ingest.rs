//! Tick file parsing, grid resampling and session warm-up masking.
//!
//! Input files are comma-separated with one L5 snapshot per row:
//!
//! ```text
//! timestamp,lastPrice,volume,cumAmount,cumVolume,bidPrice1..5,bidVolume1..5,askPrice1..5,askVolume1..5
//! ```
//!
//! Timestamps are integer milliseconds (UTC). Sessions are delimited by the
//! local time-of-day boundaries of a [`SessionSchedule`]; within each session
//! the stream is resampled onto a 0.5 s grid anchored at the session start.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::GRID_MS;

pub const LEVELS: usize = 5;

const DAY_MS: i64 = 86_400_000;

/// One 0.5 s L5 order-book snapshot with trade fields.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub timestamp: i64,
    pub last_price: f64,
    /// Contracts traded in the preceding 0.5 s.
    pub volume: f64,
    pub cum_amount: f64,
    pub cum_volume: f64,
    pub bid_price: [f64; LEVELS],
    pub bid_volume: [f64; LEVELS],
    pub ask_price: [f64; LEVELS],
    pub ask_volume: [f64; LEVELS],
    pub instrument: Arc<str>,
    pub flags: TickFlags,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TickFlags {
    /// The book violates level ordering or has bid1 >= ask1. Kept on the
    /// grid so downstream windows can exclude it.
    pub crossed: bool,
    /// Inserted by [`forward_fill`].
    pub filled: bool,
    /// Grid point before the first real record of its session.
    pub no_prior: bool,
}

impl TickRecord {
    /// True when the book satisfies the L5 ordering invariants.
    pub fn book_is_sane(&self) -> bool {
        let bids_ordered = self.bid_price.windows(2).all(|w| w[0] >= w[1]);
        let asks_ordered = self.ask_price.windows(2).all(|w| w[0] <= w[1]);
        bids_ordered
            && asks_ordered
            && self.bid_price[LEVELS - 1] > 0.0
            && self.ask_price[0] > self.bid_price[0]
    }

    /// Usable as a feature row: not crossed and backed by real data.
    pub fn is_usable(&self) -> bool {
        !self.flags.crossed && !self.flags.no_prior
    }
}

/// Column-order descriptor for tick files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TickSchema {
    columns: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Timestamp,
    LastPrice,
    Volume,
    CumAmount,
    CumVolume,
    BidPrice(usize),
    BidVolume(usize),
    AskPrice(usize),
    AskVolume(usize),
}

impl Field {
    fn from_name(name: &str) -> Option<Field> {
        let level = |prefix: &str| -> Option<usize> {
            let n: usize = name.strip_prefix(prefix)?.parse().ok()?;
            (1..=LEVELS).contains(&n).then(|| n - 1)
        };
        Some(match name {
            "timestamp" => Field::Timestamp,
            "lastPrice" => Field::LastPrice,
            "volume" => Field::Volume,
            "cumAmount" => Field::CumAmount,
            "cumVolume" => Field::CumVolume,
            _ => {
                if let Some(i) = level("bidPrice") {
                    Field::BidPrice(i)
                } else if let Some(i) = level("bidVolume") {
                    Field::BidVolume(i)
                } else if let Some(i) = level("askPrice") {
                    Field::AskPrice(i)
                } else {
                    Field::AskVolume(level("askVolume")?)
                }
            }
        })
    }
}

impl TickSchema {
    /// The canonical 25-column layout.
    pub fn canonical() -> Self {
        let mut columns: Vec<String> = ["timestamp", "lastPrice", "volume", "cumAmount", "cumVolume"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for prefix in ["bidPrice", "bidVolume", "askPrice", "askVolume"] {
            columns.extend((1..=LEVELS).map(|i| format!("{prefix}{i}")));
        }
        TickSchema { columns }
    }

    /// A custom column order. Every canonical column must appear exactly once.
    pub fn from_columns<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let columns: Vec<String> = names.iter().map(|s| s.as_ref().trim().to_string()).collect();
        let schema = TickSchema { columns };
        schema.fields()?;
        Ok(schema)
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    fn fields(&self) -> Result<Vec<Field>> {
        let mut fields = Vec::with_capacity(self.columns.len());
        for name in &self.columns {
            let field = Field::from_name(name)
                .ok_or_else(|| Error::Schema(format!("unknown column `{name}`")))?;
            if fields.contains(&field) {
                return Err(Error::Schema(format!("duplicate column `{name}`")));
            }
            fields.push(field);
        }
        if fields.len() != 5 + 4 * LEVELS {
            return Err(Error::Schema(format!(
                "expected {} columns, schema has {}",
                5 + 4 * LEVELS,
                fields.len()
            )));
        }
        Ok(fields)
    }
}

impl Default for TickSchema {
    fn default() -> Self {
        Self::canonical()
    }
}

/// Parses a tick file. The instrument symbol is the file name up to its
/// first dot, so `IF.ticks.csv` holds instrument `IF`.
pub fn parse_tick_file(path: impl AsRef<Path>, schema: &TickSchema) -> Result<Vec<TickRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let instrument = instrument_of(path);
    parse_ticks(std::io::BufReader::new(file), schema, &instrument)
}

/// File name up to its first dot.
pub fn instrument_of(path: &Path) -> String {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

/// Parses tick rows from any reader.
///
/// Rows must be strictly increasing in time. Crossed books are flagged, not
/// dropped.
pub fn parse_ticks<R: Read>(reader: R, schema: &TickSchema, instrument: &str) -> Result<Vec<TickRecord>> {
    let fields = schema.fields()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    if header.len() != schema.columns.len()
        || header.iter().zip(&schema.columns).any(|(h, c)| h != c)
    {
        return Err(Error::Schema(format!(
            "expected `{}`, found `{}`",
            schema.columns.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let instrument: Arc<str> = Arc::from(instrument);
    let mut out: Vec<TickRecord> = Vec::new();
    let mut row = csv::StringRecord::new();
    loop {
        let line = rdr.position().line() + 1;
        match rdr.read_record(&mut row) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(Error::Parse { line, message: e.to_string() }),
        }
        let line = row.position().map_or(line, |p| p.line());
        let rec = parse_row(&row, &fields, line, &instrument)?;
        if let Some(prev) = out.last() {
            if rec.timestamp <= prev.timestamp {
                return Err(Error::NonMonotonic {
                    line,
                    timestamp: rec.timestamp,
                    previous: prev.timestamp,
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

fn parse_row(row: &csv::StringRecord, fields: &[Field], line: u64, instrument: &Arc<str>) -> Result<TickRecord> {
    if row.len() != fields.len() {
        return Err(Error::Parse {
            line,
            message: format!("expected {} fields, found {}", fields.len(), row.len()),
        });
    }
    let mut rec = TickRecord {
        timestamp: 0,
        last_price: 0.0,
        volume: 0.0,
        cum_amount: 0.0,
        cum_volume: 0.0,
        bid_price: [0.0; LEVELS],
        bid_volume: [0.0; LEVELS],
        ask_price: [0.0; LEVELS],
        ask_volume: [0.0; LEVELS],
        instrument: instrument.clone(),
        flags: TickFlags::default(),
    };
    for (raw, field) in row.iter().zip(fields) {
        if let Field::Timestamp = field {
            rec.timestamp = raw.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad timestamp `{raw}`"),
            })?;
            continue;
        }
        let value: f64 = raw.parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad number `{raw}`"),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse { line, message: format!("non-finite value `{raw}`") });
        }
        match *field {
            Field::Timestamp => unreachable!(),
            Field::LastPrice => rec.last_price = value,
            Field::Volume => rec.volume = value,
            Field::CumAmount => rec.cum_amount = value,
            Field::CumVolume => rec.cum_volume = value,
            Field::BidPrice(i) => rec.bid_price[i] = value,
            Field::BidVolume(i) => rec.bid_volume[i] = value,
            Field::AskPrice(i) => rec.ask_price[i] = value,
            Field::AskVolume(i) => rec.ask_volume[i] = value,
        }
    }
    if rec.volume < 0.0 {
        return Err(Error::Parse { line, message: format!("negative volume {}", rec.volume) });
    }
    rec.flags.crossed = !rec.book_is_sane();
    Ok(rec)
}

/// Rounds a price to four decimals for output.
fn price(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Writes records in the canonical layout.
pub fn write_ticks<W: Write>(writer: W, records: &[TickRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(TickSchema::canonical().columns()).map_err(to_err)?;
    let mut fields: Vec<String> = Vec::with_capacity(25);
    for r in records {
        fields.clear();
        fields.push(r.timestamp.to_string());
        fields.push(price(r.last_price).to_string());
        fields.push(r.volume.to_string());
        fields.push(price(r.cum_amount).to_string());
        fields.push(r.cum_volume.to_string());
        fields.extend(r.bid_price.iter().map(|p| price(*p).to_string()));
        fields.extend(r.bid_volume.iter().map(|v| v.to_string()));
        fields.extend(r.ask_price.iter().map(|p| price(*p).to_string()));
        fields.extend(r.ask_volume.iter().map(|v| v.to_string()));
        w.write_record(&fields).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn write_tick_file(path: impl AsRef<Path>, records: &[TickRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ticks(std::io::BufWriter::new(file), records)
}

/// Local time of day in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeOfDay(u32);

impl TimeOfDay {
    pub fn hm(hour: u32, minute: u32) -> Self {
        assert!(hour < 24 && minute < 60);
        TimeOfDay((hour * 60 + minute) * 60_000)
    }

    pub fn millis(self) -> i64 {
        self.0 as i64
    }
}

impl FromStr for TimeOfDay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad time of day `{s}`, expected HH:MM"));
        let (h, m) = s.trim().split_once(':').ok_or_else(bad)?;
        let h: u32 = h.parse().map_err(|_| bad())?;
        let m: u32 = m.parse().map_err(|_| bad())?;
        if h >= 24 || m >= 60 {
            return Err(bad());
        }
        Ok(TimeOfDay::hm(h, m))
    }
}

impl fmt::Display for TimeOfDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let minutes = self.0 / 60_000;
        write!(f, "{:02}:{:02}", minutes / 60, minutes % 60)
    }
}

impl Serialize for TimeOfDay {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TimeOfDay {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Trading-session start times.
///
/// A record belongs to the session whose start is the latest boundary at or
/// before its local time. Records after midnight but before the first
/// boundary belong to the previous evening's session, and evening sessions
/// count toward the following trading day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSchedule {
    pub starts: Vec<TimeOfDay>,
    pub utc_offset_minutes: i32,
}

impl Default for SessionSchedule {
    /// Night session at 23:00 of the previous day, then 09:00, 10:30 and
    /// 13:30, in exchange time (UTC+8).
    fn default() -> Self {
        SessionSchedule {
            starts: vec![
                TimeOfDay::hm(9, 0),
                TimeOfDay::hm(10, 30),
                TimeOfDay::hm(13, 30),
                TimeOfDay::hm(23, 0),
            ],
            utc_offset_minutes: 480,
        }
    }
}

impl SessionSchedule {
    pub fn new(mut starts: Vec<TimeOfDay>, utc_offset_minutes: i32) -> Result<Self> {
        if starts.is_empty() {
            return Err(Error::Config("session schedule needs at least one start".into()));
        }
        starts.sort();
        starts.dedup();
        Ok(SessionSchedule { starts, utc_offset_minutes })
    }

    fn offset_ms(&self) -> i64 {
        self.utc_offset_minutes as i64 * 60_000
    }

    /// Absolute start (UTC ms) of the session containing `timestamp`.
    pub fn session_start(&self, timestamp: i64) -> i64 {
        let local = timestamp + self.offset_ms();
        let day = local.div_euclid(DAY_MS);
        let tod = local.rem_euclid(DAY_MS);
        let start_local = match self.starts.iter().rev().find(|s| s.millis() <= tod) {
            Some(s) => day * DAY_MS + s.millis(),
            None => (day - 1) * DAY_MS + self.starts.last().map_or(0, |s| s.millis()),
        };
        start_local - self.offset_ms()
    }

    /// Trading day (days since the epoch, local) a session is attributed to.
    pub fn trading_day(&self, session_start: i64) -> i64 {
        let local = session_start + self.offset_ms();
        let day = local.div_euclid(DAY_MS);
        if local.rem_euclid(DAY_MS) >= 18 * 3_600_000 {
            day + 1
        } else {
            day
        }
    }

    /// Session start for every record.
    pub fn sessions_of(&self, records: &[TickRecord]) -> Vec<i64> {
        records.iter().map(|r| self.session_start(r.timestamp)).collect()
    }
}

/// Resamples each session onto the 0.5 s grid anchored at the session start.
///
/// Grid point `g` takes the latest record with timestamp in `(g - 0.5 s, g]`
/// with the volumes of all records in that interval summed. Points with no
/// such record copy the previous grid record with `volume = 0` and the fill
/// flag set. Points before the first record of a session have nothing to
/// copy from: they hold a placeholder built from the first record and are
/// flagged `no_prior`. The grid ends at the last record of each session.
///
/// `records` must be sorted by timestamp.
pub fn forward_fill(records: &[TickRecord], schedule: &SessionSchedule) -> Vec<TickRecord> {
    let mut out = Vec::with_capacity(records.len());
    for group in records.chunk_by(|a, b| schedule.session_start(a.timestamp) == schedule.session_start(b.timestamp)) {
        let start = schedule.session_start(group[0].timestamp);
        let cell = |ts: i64| (ts - start + GRID_MS - 1).div_euclid(GRID_MS);
        let first_cell = cell(group[0].timestamp);
        let last_cell = cell(group[group.len() - 1].timestamp);

        for k in 0..first_cell {
            let mut rec = group[0].clone();
            rec.timestamp = start + k * GRID_MS;
            rec.volume = 0.0;
            rec.flags.filled = true;
            rec.flags.no_prior = true;
            out.push(rec);
        }

        let mut next = 0;
        let mut current: Option<TickRecord> = None;
        for k in first_cell..=last_cell {
            let grid_ts = start + k * GRID_MS;
            let mut volume = 0.0;
            let mut latest = None;
            while next < group.len() && group[next].timestamp <= grid_ts {
                volume += group[next].volume;
                latest = Some(&group[next]);
                next += 1;
            }
            let rec = match latest {
                Some(r) => {
                    let mut rec = r.clone();
                    rec.timestamp = grid_ts;
                    rec.volume = volume;
                    rec
                }
                None => {
                    // first_cell always holds a record, so `current` is set
                    let mut rec = current.clone().expect("grid starts at a record");
                    rec.timestamp = grid_ts;
                    rec.volume = 0.0;
                    rec.flags.filled = true;
                    rec
                }
            };
            current = Some(rec.clone());
            out.push(rec);
        }
    }
    out
}

/// Label-validity mask: the first `warmup_len` grid points of every session
/// are invalid, everything else is valid.
pub fn mark_warmup(records: &[TickRecord], schedule: &SessionSchedule, warmup_len: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(records.len());
    let mut current = None;
    let mut pos = 0usize;
    for r in records {
        let s = schedule.session_start(r.timestamp);
        if current != Some(s) {
            current = Some(s);
            pos = 0;
        }
        mask.push(pos >= warmup_len);
        pos += 1;
    }
    mask
}

/// A resampled stream with its session ids and label-validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GridStream {
    pub records: Vec<TickRecord>,
    pub sessions: Vec<i64>,
    pub label_valid: Vec<bool>,
}

impl GridStream {
    pub fn build(raw: &[TickRecord], schedule: &SessionSchedule, warmup_len: usize) -> Self {
        let records = forward_fill(raw, schedule);
        let sessions = schedule.sessions_of(&records);
        let label_valid = mark_warmup(&records, schedule, warmup_len);
        GridStream { records, sessions, label_valid }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes the grid: instrument, session start, the canonical tick
    /// columns and the flag columns.
    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let to_err = |e: csv::Error| Error::Format(e.to_string());
        let mut header = vec!["instrument".to_string(), "session".to_string()];
        header.extend(TickSchema::canonical().columns().iter().cloned());
        header.extend(["crossed", "filled", "noPrior", "labelValid"].map(String::from));
        w.write_record(&header).map_err(to_err)?;
        let flag = |b: bool| if b { "1" } else { "0" }.to_string();
        for ((r, s), lv) in self.records.iter().zip(&self.sessions).zip(&self.label_valid) {
            let mut f = vec![r.instrument.to_string(), s.to_string(), r.timestamp.to_string()];
            f.push(r.last_price.to_string());
            f.push(r.volume.to_string());
            f.push(r.cum_amount.to_string());
            f.push(r.cum_volume.to_string());
            for arr in [&r.bid_price, &r.bid_volume, &r.ask_price, &r.ask_volume] {
                f.extend(arr.iter().map(|v| v.to_string()));
            }
            f.extend([flag(r.flags.crossed), flag(r.flags.filled), flag(r.flags.no_prior), flag(*lv)]);
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
        let fields = TickSchema::canonical().fields()?;
        let mut out = GridStream { records: Vec::new(), sessions: Vec::new(), label_valid: Vec::new() };
        let mut instrument: Arc<str> = Arc::from("");
        for (i, row) in rdr.records().enumerate() {
            let line = i as u64 + 2;
            let row = row.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            if row.len() != 31 {
                return Err(Error::Parse { line, message: format!("expected 31 fields, found {}", row.len()) });
            }
            if *instrument != row[0] {
                instrument = Arc::from(&row[0]);
            }
            let session: i64 = row[1]
                .parse()
                .map_err(|_| Error::Parse { line, message: "bad session".into() })?;
            let tick_fields: csv::StringRecord = row.iter().skip(2).take(25).collect();
            let mut rec = parse_row(&tick_fields, &fields, line, &instrument)?;
            let flag = |s: &str| s == "1";
            rec.flags = TickFlags { crossed: flag(&row[27]), filled: flag(&row[28]), no_prior: flag(&row[29]) };
            out.records.push(rec);
            out.sessions.push(session);
            out.label_valid.push(flag(&row[30]));
        }
        Ok(out)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(file))
    }
}
