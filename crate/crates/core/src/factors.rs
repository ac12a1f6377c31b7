//! Diagnostic factors and factor-times-return accumulation curves.
//!
//! Windows are counted in grid points: 60 points are 30 s, 600 points are
//! 5 min. A factor row at `t` needs 600 points of usable history in the
//! same session, ending at `t`.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::ingest::GridStream;
use crate::par::{self, Parallelism};

pub const SHORT_WINDOW: usize = 60;
pub const LONG_WINDOW: usize = 600;

pub const FACTOR_NAMES: [&str; 8] = [
    "mid_price_mean",
    "mid_price_std",
    "mid_price_skew",
    "mid_price_kurt",
    "volume_pct",
    "prop_quoted_spread",
    "beta",
    "illiquidity",
];

/// Factors at one grid point. Individual factors are `None` when their
/// formula degenerates (zero variance, zero volume).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorRow {
    pub timestamp: i64,
    pub mid_price_mean: Option<f64>,
    pub mid_price_std: Option<f64>,
    pub mid_price_skew: Option<f64>,
    pub mid_price_kurt: Option<f64>,
    pub volume_pct: Option<f64>,
    pub prop_quoted_spread: Option<f64>,
    pub beta: Option<f64>,
    pub illiquidity: Option<f64>,
    /// Enough in-session history to evaluate the windows.
    pub valid: bool,
}

impl FactorRow {
    fn invalid(timestamp: i64) -> Self {
        FactorRow {
            timestamp,
            mid_price_mean: None,
            mid_price_std: None,
            mid_price_skew: None,
            mid_price_kurt: None,
            volume_pct: None,
            prop_quoted_spread: None,
            beta: None,
            illiquidity: None,
            valid: false,
        }
    }

    /// Factors in [`FACTOR_NAMES`] order.
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            self.mid_price_mean,
            self.mid_price_std,
            self.mid_price_skew,
            self.mid_price_kurt,
            self.volume_pct,
            self.prop_quoted_spread,
            self.beta,
            self.illiquidity,
        ]
    }
}

/// Column view of a grid stream used by the factor formulas.
#[derive(Debug, Clone)]
pub struct FactorInput {
    pub instrument: Arc<str>,
    pub timestamp: Vec<i64>,
    pub mid: Vec<f64>,
    pub volume: Vec<f64>,
    pub bid1: Vec<f64>,
    pub ask1: Vec<f64>,
    /// Length of the run of usable same-session points ending at each index.
    pub history: Vec<usize>,
}

impl FactorInput {
    pub fn from_grid(grid: &GridStream) -> Self {
        let n = grid.len();
        let mut history = Vec::with_capacity(n);
        let mut run = 0;
        for (i, r) in grid.records.iter().enumerate() {
            let usable = r.is_usable() && r.bid_price[0] > 0.0 && r.ask_price[0] > 0.0;
            run = if !usable {
                0
            } else if i > 0 && grid.sessions[i] == grid.sessions[i - 1] {
                run + 1
            } else {
                1
            };
            history.push(run);
        }
        FactorInput {
            instrument: grid.records.first().map(|r| r.instrument.clone()).unwrap_or_else(|| Arc::from("")),
            timestamp: grid.records.iter().map(|r| r.timestamp).collect(),
            mid: grid.records.iter().map(|r| (r.bid_price[0] + r.ask_price[0]) / 2.0).collect(),
            volume: grid.records.iter().map(|r| r.volume).collect(),
            bid1: grid.records.iter().map(|r| r.bid_price[0]).collect(),
            ask1: grid.records.iter().map(|r| r.ask_price[0]).collect(),
            history,
        }
    }

    pub fn len(&self) -> usize {
        self.mid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mid.is_empty()
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Factors at index `t`, using only data at or before `t`.
pub fn compute_factors(input: &FactorInput, t: usize) -> FactorRow {
    if input.history[t] < LONG_WINDOW {
        return FactorRow::invalid(input.timestamp[t]);
    }
    let mid = &input.mid[t + 1 - SHORT_WINDOW..=t];
    let vol = &input.volume[t + 1 - SHORT_WINDOW..=t];
    let vol_long = &input.volume[t + 1 - LONG_WINDOW..=t];

    // centre on the latest mid first; nearby prices subtract exactly
    let reference = input.mid[t];
    let centred: Vec<f64> = mid.iter().map(|x| x - reference).collect();
    let shift = mean(&centred);
    let mu = reference + shift;
    let n = mid.len() as f64;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in &centred {
        let d = x - shift;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let std = (m2 / (n - 1.0)).sqrt();
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let degenerate = m2.sqrt() <= 1e-12 * mu.abs();
    let skew = (!degenerate).then(|| m3 / m2.powf(1.5));
    let kurt = (!degenerate).then(|| m4 / (m2 * m2) - 3.0);

    let short_volume: f64 = vol.iter().sum();
    let long_volume: f64 = vol_long.iter().sum();
    let volume_pct = (long_volume > 0.0).then(|| short_volume / long_volume);

    let spread = (input.ask1[t] - input.bid1[t]) / input.mid[t];

    // per-step returns over the short window, regressed on same-step volume
    let returns: Vec<f64> = (t + 1 - SHORT_WINDOW..=t).map(|k| (input.mid[k] - input.mid[k - 1]) / input.mid[k - 1]).collect();
    let (mr, mv) = (mean(&returns), mean(vol));
    let mut cov = 0.0;
    let mut var = 0.0;
    for (r, v) in returns.iter().zip(vol) {
        cov += (r - mr) * (v - mv);
        var += (v - mv) * (v - mv);
    }
    let beta = (var > 0.0).then(|| cov / var);

    let window_return = (input.mid[t] - input.mid[t - SHORT_WINDOW]) / input.mid[t - SHORT_WINDOW];
    let illiquidity = (short_volume > 0.0).then(|| window_return.abs() / short_volume);

    FactorRow {
        timestamp: input.timestamp[t],
        mid_price_mean: Some(mu),
        mid_price_std: Some(if degenerate { 0.0 } else { std }),
        mid_price_skew: skew,
        mid_price_kurt: kurt,
        volume_pct,
        prop_quoted_spread: Some(spread),
        beta,
        illiquidity,
        valid: true,
    }
}

/// Factor rows for every grid point.
pub fn factor_series(input: &FactorInput, mode: Parallelism) -> Vec<FactorRow> {
    par::map_range(mode, input.len(), |t| compute_factors(input, t))
}

/// Running sum of `z(factor)_s * R_s` over points where both are defined.
///
/// The factor is z-scored with mean and population std taken over those
/// same points; a constant factor contributes zero. Entries at undefined
/// points repeat the running value.
pub fn accumulate_factor_return(factor: &[Option<f64>], returns: &[Option<f64>]) -> Vec<f64> {
    assert_eq!(factor.len(), returns.len(), "factor and return series must be aligned");
    let pairs: Vec<(f64, f64)> = factor
        .iter()
        .zip(returns)
        .filter_map(|(f, r)| Some((f.filter(|v| v.is_finite())?, r.filter(|v| v.is_finite())?)))
        .collect();
    let (mu, sd) = if pairs.is_empty() {
        (0.0, 0.0)
    } else {
        let n = pairs.len() as f64;
        let mu = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let var = pairs.iter().map(|p| (p.0 - mu).powi(2)).sum::<f64>() / n;
        (mu, var.sqrt())
    };
    let mut acc = 0.0;
    factor
        .iter()
        .zip(returns)
        .map(|(f, r)| {
            if let (Some(f), Some(r)) = (f, r) {
                if f.is_finite() && r.is_finite() && sd > 0.0 {
                    acc += (f - mu) / sd * r;
                }
            }
            acc
        })
        .collect()
}

/// Accumulation curves for all factors against the table's forward
/// returns, as `[factor][t]`.
pub fn accumulation_curves(rows: &[FactorRow], table: &FeatureTable) -> Result<Vec<Vec<f64>>> {
    if rows.len() != table.len() {
        return Err(Error::Shape(format!("{} factor rows vs {} feature rows", rows.len(), table.len())));
    }
    if let Some((r, l)) = rows.iter().zip(&table.labels).find(|(r, l)| r.timestamp != l.timestamp) {
        return Err(Error::Shape(format!("misaligned timestamps {} vs {}", r.timestamp, l.timestamp)));
    }
    let returns: Vec<Option<f64>> = table.labels.iter().map(|l| l.label_valid.then_some(l.forward_return)).collect();
    Ok((0..FACTOR_NAMES.len())
        .map(|k| {
            let f: Vec<Option<f64>> = rows.iter().map(|r| r.values()[k]).collect();
            accumulate_factor_return(&f, &returns)
        })
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes one factor row per line; undefined factors are empty fields.
pub fn write_factors<W: Write>(writer: W, instrument: &str, rows: &[FactorRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Format(e.to_string());
    let mut header = vec!["instrument", "timestamp"];
    header.extend(FACTOR_NAMES);
    header.push("valid");
    w.write_record(&header).map_err(to_err)?;
    for r in rows {
        let mut f = vec![instrument.to_string(), r.timestamp.to_string()];
        f.extend(r.values().map(opt));
        f.push(if r.valid { "1" } else { "0" }.into());
        w.write_record(&f).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io("<factors>", e))
}

/// Writes `(instrument, factor, timestamp, cumulative)` rows.
pub fn write_accumulation<W: Write>(writer: W, instrument: &str, timestamps: &[i64], curves: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["instrument", "factor", "timestamp", "cumulative"]).map_err(to_err)?;
    for (name, curve) in FACTOR_NAMES.iter().zip(curves) {
        for (ts, v) in timestamps.iter().zip(curve) {
            w.write_record([instrument, name, &ts.to_string(), &v.to_string()]).map_err(to_err)?;
        }
    }
    w.flush().map_err(|e| Error::io("<accumulation>", e))
}

pub fn write_factors_file(path: impl AsRef<Path>, instrument: &str, rows: &[FactorRow]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_factors(std::io::BufWriter::new(file), instrument, rows)
}

pub fn write_accumulation_file(path: impl AsRef<Path>, instrument: &str, timestamps: &[i64], curves: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_accumulation(std::io::BufWriter::new(file), instrument, timestamps, curves)
}
