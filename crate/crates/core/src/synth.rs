//! Synthetic L5 tick streams with a tunable predictive signal.
//!
//! The fair price follows a log random walk; quotes sit on the tick grid
//! around it. Each point carries a latent signal
//!
//! ```text
//! x_t = rho * R_t / sigma_R + sqrt(1 - rho^2) * eta_t,   rho = s * max_signal_correlation
//! ```
//!
//! where `R_t` is the realised forward mid return over the label horizon and
//! `eta_t` is standard normal noise. The signal shifts the last trade price
//! inside the spread and tilts the bid/ask volume imbalance at all five
//! levels. Only the former is visible to the 13 model features. With
//! `s = 0` the stream carries no information about future returns.
//!
//! The fee is calibrated after generation so that the label histogram over
//! label-valid points hits the target ratio.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::features::{label, Class};
use crate::ingest::{TickFlags, TickRecord, TimeOfDay, LEVELS};
use crate::par::{self, Parallelism};
use crate::rng::{self, Stream};
use crate::{DEFAULT_HORIZON, GRID_MS, NUM_CLASSES};

/// Largest accepted gap between target and achieved class shares.
pub const RATIO_TOLERANCE: f64 = 0.02;

const DAY_MS: i64 = 86_400_000;
const EVENING_MS: i64 = 18 * 3_600_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub instrument: String,
    pub n_days: usize,
    /// First trading day, in days since 1970-01-01 (exchange time).
    pub start_day: i64,
    pub session_starts: Vec<TimeOfDay>,
    pub utc_offset_minutes: i32,
    /// Grid points per session.
    pub session_points: usize,
    pub base_price: f64,
    pub tick_size: f64,
    /// Per-step standard deviation of the fair log price.
    pub volatility: f64,
    /// Probability of a two-tick spread; otherwise one tick.
    pub wide_spread_prob: f64,
    /// Mean resting volume at level 1.
    pub depth: f64,
    /// Ratio of mean volume between consecutive levels.
    pub depth_decay: f64,
    /// Mean contracts traded per grid step.
    pub volume_intensity: f64,
    /// Injected signal strength in [0, 1].
    pub signal_strength: f64,
    /// Correlation between the latent signal and the scaled forward return
    /// at full signal strength.
    pub max_signal_correlation: f64,
    /// Target label ratio for classes -1, 0, +1.
    pub target_ratio: [f64; NUM_CLASSES],
    pub horizon: usize,
    pub warmup: usize,
    /// Probability that a snapshot is missing from the output.
    pub drop_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            instrument: "SYN".into(),
            n_days: 2,
            start_day: 19_724,
            session_starts: vec![TimeOfDay::hm(9, 0), TimeOfDay::hm(10, 30), TimeOfDay::hm(13, 30), TimeOfDay::hm(23, 0)],
            utc_offset_minutes: 480,
            session_points: 3000,
            base_price: 4000.0,
            tick_size: 0.2,
            volatility: 1.5e-4,
            wide_spread_prob: 0.3,
            depth: 40.0,
            depth_decay: 0.8,
            volume_intensity: 6.0,
            signal_strength: 1.0,
            max_signal_correlation: 0.8,
            target_ratio: [1.0, 8.0, 1.0],
            horizon: DEFAULT_HORIZON,
            warmup: DEFAULT_HORIZON,
            drop_prob: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_days == 0 || self.session_starts.is_empty() {
            return bad("need at least one day and one session".into());
        }
        if self.session_points <= self.horizon + self.warmup {
            return bad(format!(
                "session_points {} must exceed horizon + warmup = {}",
                self.session_points,
                self.horizon + self.warmup
            ));
        }
        if !(self.base_price > 0.0 && self.tick_size > 0.0 && self.volatility >= 0.0) {
            return bad("base_price and tick_size must be positive, volatility non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return bad(format!("signal_strength must be in [0, 1], got {}", self.signal_strength));
        }
        if !(0.0..1.0).contains(&self.max_signal_correlation) {
            return bad(format!("max_signal_correlation must be in [0, 1), got {}", self.max_signal_correlation));
        }
        for (name, p) in [("wide_spread_prob", self.wide_spread_prob), ("drop_prob", self.drop_prob)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        if !(self.depth > 0.0 && self.depth_decay > 0.0 && self.volume_intensity > 0.0) {
            return bad("depth, depth_decay and volume_intensity must be positive".into());
        }
        if self.target_ratio.iter().any(|r| r.is_nan() || *r < 0.0) || self.target_ratio.iter().sum::<f64>() <= 0.0 {
            return bad(format!("bad target_ratio {:?}", self.target_ratio));
        }
        let mut starts: Vec<i64> = self.session_starts.iter().map(|s| s.millis()).collect();
        starts.sort();
        starts.push(starts[0] + DAY_MS);
        let min_gap = starts.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(DAY_MS);
        if self.session_points as i64 * GRID_MS > min_gap {
            return bad(format!("{} points of 0.5 s overrun the next session start", self.session_points));
        }
        Ok(())
    }

    fn rho(&self) -> f64 {
        self.signal_strength * self.max_signal_correlation
    }

    /// UTC start times of the sessions of trading day `day`, ascending.
    /// Evening sessions open on the previous calendar day.
    fn session_times(&self, day: usize) -> Vec<i64> {
        let midnight = (self.start_day + day as i64) * DAY_MS;
        let offset = self.utc_offset_minutes as i64 * 60_000;
        let mut out: Vec<i64> = self
            .session_starts
            .iter()
            .map(|s| {
                let local = if s.millis() >= EVENING_MS { midnight - DAY_MS + s.millis() } else { midnight + s.millis() };
                local - offset
            })
            .collect();
        out.sort();
        out
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Result of fitting the fee to a target label ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeeCalibration {
    pub fee: f64,
    pub counts: [usize; NUM_CLASSES],
    pub shares: [f64; NUM_CLASSES],
}

/// Chooses the fee so that the flat share of `returns` matches the target.
///
/// The fee is placed midway between consecutive sorted `|R|` values. Fails
/// with [`Error::InfeasibleRatio`], reporting what is reachable, when the
/// flat share misses its target by more than [`RATIO_TOLERANCE`] or the
/// target asks for unequal down and up shares.
pub fn calibrate_fee(returns: &[f64], target_ratio: [f64; NUM_CLASSES]) -> Result<FeeCalibration> {
    if returns.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total: f64 = target_ratio.iter().sum();
    let target = target_ratio.map(|r| r / total);
    let mut abs: Vec<f64> = returns.iter().map(|r| r.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let n = abs.len();
    let k = ((target[1] * n as f64).round() as usize).min(n);
    let fee = if k == n {
        abs[n - 1]
    } else if k == 0 {
        abs[0] / 2.0
    } else {
        (abs[k - 1] + abs[k]) / 2.0
    };
    let mut counts = [0usize; NUM_CLASSES];
    for &r in returns {
        counts[label(r, fee).index()] += 1;
    }
    let shares = counts.map(|c| c as f64 / n as f64);
    let below = abs.partition_point(|&a| a < fee) as f64 / n as f64;
    let at_or_below = abs.partition_point(|&a| a <= fee) as f64 / n as f64;
    if (shares[1] - target[1]).abs() > RATIO_TOLERANCE {
        return Err(Error::InfeasibleRatio(format!(
            "flat share {:.4} unreachable: the closest fee {fee:.3e} gives {:.4}; ties in |R| allow flat shares in [{below:.4}, {at_or_below:.4}]",
            target[1], shares[1]
        )));
    }
    // a driftless walk splits the non-flat mass evenly in expectation
    if (target[0] - target[2]).abs() > RATIO_TOLERANCE {
        return Err(Error::InfeasibleRatio(format!(
            "a symmetric fee splits the non-flat share {:.4} evenly, so down/up shares near {:.4}/{:.4} are reachable, not {:.4}/{:.4}",
            1.0 - target[1],
            (1.0 - target[1]) / 2.0,
            (1.0 - target[1]) / 2.0,
            target[0],
            target[2]
        )));
    }
    if (0..NUM_CLASSES).any(|c| (shares[c] - target[c]).abs() > RATIO_TOLERANCE) {
        log::warn!("label shares {shares:.4?} deviate from target {target:.4?}; the stream is too short to average out drift");
    }
    Ok(FeeCalibration { fee, counts, shares })
}

/// Generated stream plus its calibrated fee.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub records: Vec<TickRecord>,
    pub calibration: FeeCalibration,
}

struct DayOutput {
    records: Vec<TickRecord>,
    returns: Vec<f64>,
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn generate_day(cfg: &SynthConfig, day: usize, instrument: &Arc<str>) -> DayOutput {
    let mut rng = rng::derived(cfg.seed, Stream::Synth, day as u64);
    let poisson = Poisson::new(cfg.volume_intensity).expect("validated intensity");
    let p = cfg.session_points;
    let h = cfg.horizon;
    let rho = cfg.rho();
    let noise = (1.0 - rho * rho).sqrt();
    let sigma_r = (cfg.volatility * (h as f64).sqrt()).max(f64::MIN_POSITIVE);
    let tick = cfg.tick_size;

    let mut records = Vec::with_capacity(cfg.session_times(day).len() * p);
    let mut returns = Vec::new();
    let mut log_fair = cfg.base_price.ln();
    let (mut cum_volume, mut cum_amount) = (0.0, 0.0);

    for start in cfg.session_times(day) {
        let mut bids = Vec::with_capacity(p);
        let mut spreads = Vec::with_capacity(p);
        for k in 0..p {
            if k > 0 {
                let z: f64 = rng.sample(StandardNormal);
                log_fair += cfg.volatility * z;
            }
            let fair = log_fair.exp() / tick;
            let wide = rng.random::<f64>() < cfg.wide_spread_prob;
            let (bid, m) = if wide { ((fair - 0.5).floor(), 2.0) } else { (fair.floor(), 1.0) };
            bids.push(bid);
            spreads.push(m);
        }
        let emitted: Vec<bool> = (0..p).map(|k| k == 0 || rng.random::<f64>() >= cfg.drop_prob).collect();

        let price_of = |ticks: f64| round4(ticks * tick);
        let mid_of = |k: usize| (price_of(bids[k]) + price_of(bids[k] + spreads[k])) / 2.0;
        // mid as seen on the resampled grid: dropped points repeat the last one
        let mut grid_mid = Vec::with_capacity(p);
        for k in 0..p {
            let m = if emitted[k] { mid_of(k) } else { grid_mid[k - 1] };
            grid_mid.push(m);
        }
        let forward: Vec<Option<f64>> = (0..p).map(|k| (k + h < p).then(|| (grid_mid[k + h] - grid_mid[k]) / grid_mid[k])).collect();
        returns.extend((cfg.warmup..p).filter_map(|k| forward[k]));

        for k in 0..p {
            let eta: f64 = rng.sample(StandardNormal);
            let x = match forward[k] {
                Some(r) => rho * r / sigma_r + noise * eta,
                None => eta,
            };
            let tilt = (x / 2.0).tanh();
            let mut bid_volume = [0.0; LEVELS];
            let mut ask_volume = [0.0; LEVELS];
            for i in 0..LEVELS {
                let base = cfg.depth * cfg.depth_decay.powi(i as i32);
                let zb: f64 = rng.sample(StandardNormal);
                let za: f64 = rng.sample(StandardNormal);
                bid_volume[i] = (base * (1.0 + 0.5 * tilt) * (0.3 * zb).exp()).round().max(1.0);
                ask_volume[i] = (base * (1.0 - 0.5 * tilt) * (0.3 * za).exp()).round().max(1.0);
            }
            let volume: f64 = poisson.sample(&mut rng);
            if !emitted[k] {
                continue;
            }
            let bid1 = price_of(bids[k]);
            let ask1 = price_of(bids[k] + spreads[k]);
            let mid = (bid1 + ask1) / 2.0;
            let last_price = round4(mid + 0.5 * (ask1 - bid1) * tilt);
            cum_volume += volume;
            cum_amount += volume * last_price;
            records.push(TickRecord {
                timestamp: start + k as i64 * GRID_MS,
                last_price,
                volume,
                cum_amount: round4(cum_amount),
                cum_volume,
                bid_price: std::array::from_fn(|i| price_of(bids[k] - i as f64)),
                bid_volume,
                ask_price: std::array::from_fn(|i| price_of(bids[k] + spreads[k] + i as f64)),
                ask_volume,
                instrument: instrument.clone(),
                flags: TickFlags::default(),
            });
        }
    }
    DayOutput { records, returns }
}

/// Generates the configured stream. Days are independent, each driven by
/// its own derived seed, so the output does not depend on `mode`.
pub fn generate(cfg: &SynthConfig, mode: Parallelism) -> Result<SynthOutput> {
    cfg.validate()?;
    let instrument: Arc<str> = Arc::from(cfg.instrument.as_str());
    let days = par::map_range(mode, cfg.n_days, |d| generate_day(cfg, d, &instrument));
    let returns: Vec<f64> = days.iter().flat_map(|d| d.returns.iter().copied()).collect();
    let calibration = calibrate_fee(&returns, cfg.target_ratio)?;
    let records = days.into_iter().flat_map(|d| d.records).collect();
    Ok(SynthOutput { records, calibration })
}

/// Contents of the metadata file written next to the tick file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub fee: f64,
    pub class_counts: [usize; NUM_CLASSES],
    pub class_shares: [f64; NUM_CLASSES],
    pub records: usize,
    pub config: SynthConfig,
}

impl SynthMeta {
    pub fn new(cfg: &SynthConfig, out: &SynthOutput) -> Self {
        SynthMeta {
            fee: out.calibration.fee,
            class_counts: out.calibration.counts,
            class_shares: out.calibration.shares,
            records: out.records.len(),
            config: cfg.clone(),
        }
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Label of each return under the calibrated fee.
pub fn labels_of(returns: &[f64], fee: f64) -> Vec<Class> {
    returns.iter().map(|&r| label(r, fee)).collect()
}
