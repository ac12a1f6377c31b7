//! Rolling sample windows, per-sample normalization, chronological
//! splitting and per-epoch undersampling.
//!
//! # Dataset file layout
//!
//! All integers and floats are little-endian.
//!
//! | offset | type | content |
//! |--------|------|---------|
//! | 0 | `[u8; 4]` | magic `HFTD` |
//! | 4 | `u32` | format version (1) |
//! | 8 | `u64` | sample count `n` |
//! | 16 | `u32` | window length (60) |
//! | 20 | `u32` | feature dimension (13) |
//! | 24 | `[i8; 3]` | label map: class value of index 0, 1, 2 (`-1, 0, 1`) |
//! | 27 | `u8` | reserved (0) |
//! | 28 | `[i64; n]` | window end timestamps |
//! | .. | `[f32; n * window * dim]` | windows, row-major, oldest row first |
//! | .. | `[u8; n]` | class indices |

use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Class, FeatureTable};
use crate::par::{self, Parallelism};
use crate::rng::{self, Stream};
use crate::{FEATURE_DIM, NUM_CLASSES};

const MAGIC: &[u8; 4] = b"HFTD";
const VERSION: u32 = 1;

/// Population std below which a window column normalizes to zeros.
pub const NORM_EPS: f64 = 1e-8;

/// One model input: `window_len x 13` features ending at `t_end`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Row-major, oldest row first.
    pub window: Vec<f64>,
    pub label: Class,
    pub t_end: i64,
}

impl Sample {
    pub fn rows(&self) -> usize {
        self.window.len() / FEATURE_DIM
    }
}

/// Samples plus the number of grid points that could not end a window.
#[derive(Debug, Clone, Default)]
pub struct Assembly {
    pub samples: Vec<Sample>,
    pub skipped: usize,
}

/// One sample per admissible endpoint.
///
/// An endpoint `t` is admissible when its label is valid and the `window`
/// rows ending at `t` are all valid and in the same session.
pub fn assemble_samples(table: &FeatureTable, window: usize, mode: Parallelism) -> Assembly {
    let n = table.len();
    if window == 0 {
        return Assembly { samples: Vec::new(), skipped: n };
    }
    // length of the valid same-session run ending at each row
    let mut run = vec![0usize; n];
    for t in 0..n {
        if table.rows[t].valid {
            run[t] = if t > 0 && table.sessions[t - 1] == table.sessions[t] { run[t - 1] + 1 } else { 1 };
        }
    }
    let ends: Vec<usize> = (0..n)
        .filter(|&t| run[t] >= window && table.labels[t].label_valid)
        .collect();
    let samples = par::map_slice(mode, &ends, |&t| {
        let mut w = Vec::with_capacity(window * FEATURE_DIM);
        for row in &table.rows[t + 1 - window..=t] {
            w.extend_from_slice(&row.values);
        }
        Sample {
            window: w,
            label: table.labels[t].label,
            t_end: table.rows[t].timestamp,
        }
    });
    Assembly {
        skipped: n - samples.len(),
        samples,
    }
}

/// Samples from several streams merged in time order (stable on ties).
pub fn assemble_many(tables: &[FeatureTable], window: usize, mode: Parallelism) -> Assembly {
    let mut all = Assembly::default();
    for t in tables {
        let a = assemble_samples(t, window, mode);
        all.samples.extend(a.samples);
        all.skipped += a.skipped;
    }
    all.samples.sort_by_key(|s| s.t_end);
    all
}

/// Z-scores each feature column of a row-major `rows x dim` window in place
/// using the population std. Columns with std below [`NORM_EPS`] become 0.
pub fn normalize_window(window: &mut [f64], dim: usize) {
    let rows = window.len() / dim;
    if rows == 0 {
        return;
    }
    let n = rows as f64;
    for j in 0..dim {
        let mean = (0..rows).map(|i| window[i * dim + j]).sum::<f64>() / n;
        // low-order part of the mean, lost when rounding it to f64
        let residual = (0..rows).map(|i| window[i * dim + j] - mean).sum::<f64>() / n;
        let centred = |x: f64| (x - mean) - residual;
        let var = (0..rows).map(|i| centred(window[i * dim + j]).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for i in 0..rows {
            let x = &mut window[i * dim + j];
            *x = if std < NORM_EPS { 0.0 } else { centred(*x) / std };
        }
    }
}

pub fn normalize_sample(sample: &Sample) -> Sample {
    let mut out = sample.clone();
    normalize_window(&mut out.window, FEATURE_DIM);
    out
}

/// Time-ordered train/validation/test index ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// 8:1:1 split by count with the rounding remainder going to train.
///
/// When several streams share a timestamp at a boundary, the boundary moves
/// forward past the tie so that every train `t_end` stays strictly before
/// every validation `t_end` (and likewise for validation/test).
pub fn chronological_split(samples: &[Sample]) -> Result<SplitIndex> {
    let n = samples.len();
    if n < 10 {
        return Err(Error::TooFewSamples(n));
    }
    if samples.windows(2).any(|w| w[0].t_end > w[1].t_end) {
        return Err(Error::Config("samples are not in time order".into()));
    }
    let tenth = n / 10;
    let past_ties = |mut b: usize| {
        while b > 0 && b < n && samples[b].t_end == samples[b - 1].t_end {
            b += 1;
        }
        b
    };
    let val_start = past_ties(n - 2 * tenth);
    let test_start = past_ties((n - tenth).max(val_start));
    Ok(SplitIndex {
        train: 0..val_start,
        val: val_start..test_start,
        test: test_start..n,
    })
}

/// How the majority class is subsampled each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum UndersampleRule {
    /// Keep `ceil((n_down + n_up) / 2)` flat samples.
    #[default]
    BalanceToMinorityMean,
    /// Drop this fraction of the flat samples, keep the rest.
    DropFraction { fraction: f64 },
}

pub fn class_counts(labels: &[Class]) -> [usize; NUM_CLASSES] {
    let mut c = [0; NUM_CLASSES];
    for l in labels {
        c[l.index()] += 1;
    }
    c
}

/// Indices of the samples used in one epoch, shuffled.
///
/// Classes -1 and +1 are always kept in full. The flat-class subset is
/// drawn without replacement from a stream derived from `(seed, epoch)`.
pub fn undersample_epoch(labels: &[Class], seed: u64, epoch: usize, rule: UndersampleRule) -> Vec<usize> {
    let counts = class_counts(labels);
    for c in Class::ALL {
        if counts[c.index()] == 0 {
            log::warn!("class {c} has no training samples; undersampling the remaining classes");
        }
    }
    let flat: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Class::Flat).collect();
    let keep = match rule {
        UndersampleRule::BalanceToMinorityMean => {
            (counts[Class::Down.index()] + counts[Class::Up.index()]).div_ceil(2)
        }
        UndersampleRule::DropFraction { fraction } => {
            let f = fraction.clamp(0.0, 1.0);
            (flat.len() as f64 * (1.0 - f)).round() as usize
        }
    }
    .min(flat.len());

    let mut rng = rng::derived(seed, Stream::Undersample, epoch as u64);
    let mut out: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != Class::Flat).collect();
    out.extend(flat.choose_multiple(&mut rng, keep).copied());
    out.shuffle(&mut rng);
    out
}

pub fn write_samples<W: Write>(writer: W, samples: &[Sample]) -> Result<()> {
    let window = samples.first().map_or(crate::WINDOW_LEN, |s| s.rows());
    if samples.iter().any(|s| s.window.len() != window * FEATURE_DIM) {
        return Err(Error::Shape("samples have differing window lengths".into()));
    }
    let mut w = BufWriter::new(writer);
    let io = |e| Error::io("<dataset>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(samples.len() as u64).map_err(io)?;
    w.write_u32::<LittleEndian>(window as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(FEATURE_DIM as u32).map_err(io)?;
    for c in Class::ALL {
        w.write_i8(c.value()).map_err(io)?;
    }
    w.write_u8(0).map_err(io)?;
    for s in samples {
        w.write_i64::<LittleEndian>(s.t_end).map_err(io)?;
    }
    for s in samples {
        for &x in &s.window {
            w.write_f32::<LittleEndian>(x as f32).map_err(io)?;
        }
    }
    for s in samples {
        w.write_u8(s.label.index() as u8).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_samples<R: Read>(reader: R) -> Result<Vec<Sample>> {
    let mut r = BufReader::new(reader);
    let io = |e| Error::io("<dataset>", e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let window = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if dim != FEATURE_DIM {
        return Err(Error::Shape(format!("dataset feature dim {dim}, expected {FEATURE_DIM}")));
    }
    let mut label_map = [0i8; 3];
    for v in &mut label_map {
        *v = r.read_i8().map_err(io)?;
    }
    if label_map != [-1, 0, 1] {
        return Err(Error::Format(format!("unsupported label map {label_map:?}")));
    }
    r.read_u8().map_err(io)?;
    let mut t_end = vec![0i64; n];
    r.read_i64_into::<LittleEndian>(&mut t_end).map_err(io)?;
    let mut flat = vec![0f32; n * window * dim];
    r.read_f32_into::<LittleEndian>(&mut flat).map_err(io)?;
    let mut labels = vec![0u8; n];
    r.read_exact(&mut labels).map_err(io)?;
    let per = window * dim;
    t_end
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (t, l))| {
            let label = Class::from_index(l as usize).ok_or_else(|| Error::Format(format!("bad class index {l}")))?;
            Ok(Sample {
                window: flat[i * per..(i + 1) * per].iter().map(|&x| x as f64).collect(),
                label,
                t_end: t,
            })
        })
        .collect()
}

pub fn write_samples_file(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_samples(file, samples).map_err(|e| relabel(e, path))
}

pub fn read_samples_file(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_samples(file).map_err(|e| relabel(e, path))
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}
