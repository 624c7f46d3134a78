//! Load-series ingestion, windowing, normalization, chronological splits,
//! and a synthetic heterogeneous-client generator.
//!
//! A [`LoadSeries`] is a gap-free 15-minute series of load values plus
//! exogenous features. Windowing turns it into `(X_d, Y_d)` samples: `T`
//! feature vectors and `T` past loads predicting the load `L` steps past
//! the window. Splits are chronological and windows are built within each
//! split independently, so no sample straddles a split boundary and no
//! training target leaks past it.
//!
//! The synthetic generator produces per-client series whose empirical
//! mean and variance are calibrated to fixed per-building targets, with
//! client-specific daily shapes, weekend behavior, and weather coupling
//! on top of a weather process shared by all clients.

use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::model::Batch;
use crate::rng::{substream, StreamDomain};

/// Seconds between consecutive samples (15 minutes).
pub const STEP_SECONDS: i64 = 900;
/// Intervals per day.
pub const INTERVALS_PER_DAY: i64 = 96;
/// Number of exogenous features per timestep.
pub const FEATURES: usize = 9;

/// Calibration targets for the eight synthetic building profiles:
/// `(mean kWh, variance)` of the load across time.
pub const SYNTH_PROFILES: [(f64, f64); 8] = [
    (488.04, 10298.24),
    (204.59, 21119.52),
    (176.54, 3505.70),
    (156.63, 2780.87),
    (107.12, 5314.93),
    (59.18, 1906.06),
    (42.32, 888.42),
    (22.08, 137.23),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    /// Timestamps must advance in exact 15-minute steps.
    TimestampGap { row: usize, expected: i64, got: i64 },
    /// Timestamp not aligned to the 15-minute grid.
    OffGrid { row: usize, timestamp: i64 },
    /// Column lengths disagree.
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    /// A value is NaN or infinite.
    NonFinite { row: usize, what: &'static str },
    EmptySeries,
    /// Chronological split needs a minimum number of points.
    TooFewSamples { got: usize, min: usize },
    BadSplitFractions,
    /// Synthetic generator supports at most the configured profiles.
    ProfileOutOfRange { index: usize, profiles: usize },
    TooFewDays { got: usize },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::TimestampGap { row, expected, got } => write!(
                f,
                "timestamp gap at row {row}: expected {expected}, got {got} (15-minute grid)"
            ),
            DataError::OffGrid { row, timestamp } => {
                write!(f, "timestamp {timestamp} at row {row} is not on the 15-minute grid")
            }
            DataError::LengthMismatch { what, expected, got } => {
                write!(f, "column {what} has {got} entries, expected {expected}")
            }
            DataError::NonFinite { row, what } => {
                write!(f, "non-finite {what} value at row {row}")
            }
            DataError::EmptySeries => write!(f, "series has no rows"),
            DataError::TooFewSamples { got, min } => {
                write!(f, "need at least {min} points to split, got {got}")
            }
            DataError::BadSplitFractions => {
                write!(f, "split fractions must be nonnegative and sum to 1")
            }
            DataError::ProfileOutOfRange { index, profiles } => {
                write!(f, "synthetic profile {index} out of range (have {profiles})")
            }
            DataError::TooFewDays { got } => {
                write!(f, "synthetic generator needs at least 2 days, got {got}")
            }
        }
    }
}

impl core::error::Error for DataError {}

/// Static per-building features, constant over the series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildingStatics {
    pub floor_area: f64,
    pub window_area: f64,
    pub roof_area: f64,
    pub cooling_capacity: f64,
}

/// A validated, gap-free 15-minute load series for one client.
#[derive(Debug, Clone)]
pub struct LoadSeries {
    pub client_id: u32,
    /// Timestamp of the first row, epoch seconds, on the 15-minute grid.
    pub start: i64,
    pub load: Vec<f64>,
    pub ghi: Vec<f64>,
    pub temperature: Vec<f64>,
    pub wind_speed: Vec<f64>,
    pub statics: BuildingStatics,
}

/// Interval-of-day index (0..=95) for an on-grid timestamp.
pub fn interval_index(ts: i64) -> i64 {
    ts.rem_euclid(86_400) / STEP_SECONDS
}

/// Day-of-week index, 0 = Monday.
pub fn day_of_week(ts: i64) -> i64 {
    (ts.div_euclid(86_400) + 3).rem_euclid(7)
}

impl LoadSeries {
    /// Build a series from explicit row timestamps, validating the grid.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        client_id: u32,
        timestamps: &[i64],
        load: Vec<f64>,
        ghi: Vec<f64>,
        temperature: Vec<f64>,
        wind_speed: Vec<f64>,
        statics: BuildingStatics,
    ) -> Result<Self, DataError> {
        if timestamps.is_empty() {
            return Err(DataError::EmptySeries);
        }
        for (name, col) in
            [("load", &load), ("ghi", &ghi), ("temperature", &temperature), ("wind", &wind_speed)]
        {
            if col.len() != timestamps.len() {
                return Err(DataError::LengthMismatch {
                    what: name,
                    expected: timestamps.len(),
                    got: col.len(),
                });
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { row, what: name });
            }
        }
        if timestamps[0].rem_euclid(STEP_SECONDS) != 0 {
            return Err(DataError::OffGrid { row: 0, timestamp: timestamps[0] });
        }
        for (row, pair) in timestamps.windows(2).enumerate() {
            let expected = pair[0] + STEP_SECONDS;
            if pair[1] != expected {
                return Err(DataError::TimestampGap { row: row + 1, expected, got: pair[1] });
            }
        }
        Ok(LoadSeries { client_id, start: timestamps[0], load, ghi, temperature, wind_speed, statics })
    }

    pub fn len(&self) -> usize {
        self.load.len()
    }

    pub fn is_empty(&self) -> bool {
        self.load.is_empty()
    }

    pub fn timestamp(&self, row: usize) -> i64 {
        self.start + row as i64 * STEP_SECONDS
    }

    /// The 9-entry exogenous feature vector for one row: interval index,
    /// day of week, the three weather channels, and the four statics.
    pub fn feature_row(&self, row: usize) -> [f64; FEATURES] {
        let ts = self.timestamp(row);
        [
            interval_index(ts) as f64,
            day_of_week(ts) as f64,
            self.ghi[row],
            self.temperature[row],
            self.wind_speed[row],
            self.statics.floor_area,
            self.statics.window_area,
            self.statics.roof_area,
            self.statics.cooling_capacity,
        ]
    }
}

/// One `(X_d, Y_d)` training pair: `T` feature vectors, the `T` past
/// loads, and the target `L` steps past the window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    /// Row-major `[T, features]`.
    pub x: Vec<f64>,
    pub y_hist: Vec<f64>,
    pub y_target: f64,
}

/// Number of windows a series of `len` points yields.
pub fn window_count(len: usize, window: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(window + horizon)
}

/// Slide a `(T, L)` window over the raw series. Sample `d` covers rows
/// `d..d+T` and targets row `d+T+L-1`. Short series yield no samples.
pub fn make_windows(series: &LoadSeries, window: usize, horizon: usize) -> Vec<WindowedSample> {
    let count = window_count(series.len(), window, horizon);
    let mut out = Vec::with_capacity(count);
    for d in 0..count {
        let mut x = Vec::with_capacity(window * FEATURES);
        for row in d..d + window {
            x.extend_from_slice(&series.feature_row(row));
        }
        out.push(WindowedSample {
            x,
            y_hist: series.load[d..d + window].to_vec(),
            y_target: series.load[d + window + horizon - 1],
        });
    }
    out
}

/// Structure-of-arrays sample store for fast minibatch assembly.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub window: usize,
    pub features: usize,
    x: Vec<f64>,
    y_hist: Vec<f64>,
    y_target: Vec<f64>,
}

impl SampleSet {
    pub fn with_capacity(window: usize, features: usize, n: usize) -> Self {
        SampleSet {
            window,
            features,
            x: Vec::with_capacity(n * window * features),
            y_hist: Vec::with_capacity(n * window),
            y_target: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.y_target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_target.is_empty()
    }

    pub fn push(&mut self, x: &[f64], y_hist: &[f64], y_target: f64) {
        debug_assert_eq!(x.len(), self.window * self.features);
        debug_assert_eq!(y_hist.len(), self.window);
        self.x.extend_from_slice(x);
        self.y_hist.extend_from_slice(y_hist);
        self.y_target.push(y_target);
    }

    pub fn sample(&self, i: usize) -> WindowedSample {
        let xw = self.window * self.features;
        WindowedSample {
            x: self.x[i * xw..(i + 1) * xw].to_vec(),
            y_hist: self.y_hist[i * self.window..(i + 1) * self.window].to_vec(),
            y_target: self.y_target[i],
        }
    }

    pub fn targets(&self) -> &[f64] {
        &self.y_target
    }

    /// Append every sample of `other` (same window/feature shape).
    pub fn extend_from(&mut self, other: &SampleSet) {
        debug_assert_eq!(self.window, other.window);
        debug_assert_eq!(self.features, other.features);
        self.x.extend_from_slice(&other.x);
        self.y_hist.extend_from_slice(&other.y_hist);
        self.y_target.extend_from_slice(&other.y_target);
    }

    /// Copy the selected samples into a dense batch.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let xw = self.window * self.features;
        let mut batch = Batch {
            size: indices.len(),
            window: self.window,
            features: self.features,
            x: Vec::with_capacity(indices.len() * xw),
            y_hist: Vec::with_capacity(indices.len() * self.window),
            y_target: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            batch.x.extend_from_slice(&self.x[i * xw..(i + 1) * xw]);
            batch.y_hist.extend_from_slice(&self.y_hist[i * self.window..(i + 1) * self.window]);
            batch.y_target.push(self.y_target[i]);
        }
        batch
    }

    pub fn batch_all(&self) -> Batch {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.gather(&indices)
    }
}

/// Uniform-without-replacement minibatch sampling: a shuffled pass over
/// the dataset, reshuffled when exhausted. Batches larger than the
/// dataset wrap around into the next pass.
#[derive(Debug, Clone)]
pub struct MinibatchCursor {
    order: Vec<u32>,
    pos: usize,
    rng: ChaCha12Rng,
}

impl MinibatchCursor {
    pub fn new(n: usize, rng: ChaCha12Rng) -> Self {
        let mut cursor =
            MinibatchCursor { order: (0..n as u32).collect(), pos: 0, rng };
        cursor.reshuffle();
        cursor
    }

    fn reshuffle(&mut self) {
        // Fisher–Yates.
        for i in (1..self.order.len()).rev() {
            let j = self.rng.random_range(0..=i);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    pub fn next_batch(&mut self, batch: usize, out: &mut Vec<usize>) {
        out.clear();
        if self.order.is_empty() {
            return;
        }
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos] as usize);
            self.pos += 1;
        }
    }
}

/// Chronological split fractions, applied along the time axis.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let ok = self.train >= 0.0
            && self.val >= 0.0
            && self.test >= 0.0
            && libm::fabs(self.train + self.val + self.test - 1.0) < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(DataError::BadSplitFractions)
        }
    }
}

/// Chronological index ranges: `floor(train·n)` / `floor(val·n)` /
/// remainder-to-test.
pub fn split_bounds(
    n: usize,
    spec: &SplitSpec,
) -> Result<(Range<usize>, Range<usize>, Range<usize>), DataError> {
    spec.validate()?;
    if n < 10 {
        return Err(DataError::TooFewSamples { got: n, min: 10 });
    }
    let train_n = libm::floor(spec.train * n as f64) as usize;
    let val_n = libm::floor(spec.val * n as f64) as usize;
    Ok((0..train_n, train_n..train_n + val_n, train_n + val_n..n))
}

/// Per-client normalization fitted on train-split statistics only.
/// Calendar indices map to `[0, 1]` by fixed division; continuous
/// features and the load are z-scored. Zero-variance columns pass through
/// centered with scale 1 and are flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub feat_mean: [f64; FEATURES],
    pub feat_scale: [f64; FEATURES],
    pub feat_flat: [bool; FEATURES],
    pub load_mean: f64,
    pub load_scale: f64,
    pub load_flat: bool,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, libm::sqrt(var))
}

impl Scaler {
    /// Fit on train-split feature rows (row-major `[n, FEATURES]`) and
    /// train-split loads.
    pub fn fit(feature_rows: &[f64], loads: &[f64]) -> Result<Self, DataError> {
        if loads.is_empty() || feature_rows.len() != loads.len() * FEATURES {
            return Err(DataError::LengthMismatch {
                what: "features",
                expected: loads.len() * FEATURES,
                got: feature_rows.len(),
            });
        }
        let n = loads.len();
        let mut feat_mean = [0.0; FEATURES];
        let mut feat_scale = [1.0; FEATURES];
        let mut feat_flat = [false; FEATURES];
        // Calendar columns: fixed [0, 1] mapping.
        feat_scale[0] = 95.0;
        feat_scale[1] = 6.0;
        for col in 2..FEATURES {
            let (mean, std) = mean_std(
                feature_rows.iter().skip(col).step_by(FEATURES).copied(),
                n,
            );
            feat_mean[col] = mean;
            if std > 0.0 {
                feat_scale[col] = std;
            } else {
                feat_scale[col] = 1.0;
                feat_flat[col] = true;
            }
        }
        let (load_mean, load_std) = mean_std(loads.iter().copied(), n);
        let (load_scale, load_flat) = if load_std > 0.0 { (load_std, false) } else { (1.0, true) };
        Ok(Scaler { feat_mean, feat_scale, feat_flat, load_mean, load_scale, load_flat })
    }

    pub fn transform_features(&self, rows: &mut [f64]) {
        for row in rows.chunks_exact_mut(FEATURES) {
            for (col, v) in row.iter_mut().enumerate() {
                *v = (*v - self.feat_mean[col]) / self.feat_scale[col];
            }
        }
    }

    pub fn transform_load(&self, y: f64) -> f64 {
        (y - self.load_mean) / self.load_scale
    }

    /// Inverse of [`Self::transform_load`], for reporting forecasts in kWh.
    pub fn denorm_load(&self, y: f64) -> f64 {
        y * self.load_scale + self.load_mean
    }
}

/// All data a client needs for training and evaluation: normalized
/// windowed splits, the scaler, and raw-kWh test targets with their
/// persistence references.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: u32,
    pub scaler: Scaler,
    pub train: SampleSet,
    pub val: SampleSet,
    pub test: SampleSet,
    /// Raw test targets, kWh, aligned with `test`.
    pub test_actual_kwh: Vec<f64>,
    /// Load `L` steps before each test target, kWh (persistence forecast).
    pub test_persistence_kwh: Vec<f64>,
}

fn window_range(
    series: &LoadSeries,
    scaler: &Scaler,
    range: Range<usize>,
    window: usize,
    horizon: usize,
) -> SampleSet {
    let len = range.len();
    let count = window_count(len, window, horizon);
    let mut rows = Vec::with_capacity(len * FEATURES);
    for row in range.clone() {
        rows.extend_from_slice(&series.feature_row(row));
    }
    scaler.transform_features(&mut rows);
    let loads: Vec<f64> =
        series.load[range].iter().map(|y| scaler.transform_load(*y)).collect();
    let mut set = SampleSet::with_capacity(window, FEATURES, count);
    for d in 0..count {
        set.push(
            &rows[d * FEATURES..(d + window) * FEATURES],
            &loads[d..d + window],
            loads[d + window + horizon - 1],
        );
    }
    set
}

/// Split chronologically, fit the scaler on the train split, normalize,
/// and window each split independently.
pub fn prepare_client(
    series: &LoadSeries,
    window: usize,
    horizon: usize,
    split: &SplitSpec,
) -> Result<ClientDataset, DataError> {
    let (train_r, val_r, test_r) = split_bounds(series.len(), split)?;
    let mut train_rows = Vec::with_capacity(train_r.len() * FEATURES);
    for row in train_r.clone() {
        train_rows.extend_from_slice(&series.feature_row(row));
    }
    let scaler = Scaler::fit(&train_rows, &series.load[train_r.clone()])?;

    let train = window_range(series, &scaler, train_r, window, horizon);
    let val = window_range(series, &scaler, val_r, window, horizon);
    let test = window_range(series, &scaler, test_r.clone(), window, horizon);

    let count = test.len();
    let mut test_actual_kwh = Vec::with_capacity(count);
    let mut test_persistence_kwh = Vec::with_capacity(count);
    for d in 0..count {
        let target_row = test_r.start + d + window + horizon - 1;
        test_actual_kwh.push(series.load[target_row]);
        test_persistence_kwh.push(series.load[target_row - horizon]);
    }
    Ok(ClientDataset {
        client_id: series.client_id,
        scaler,
        train,
        val,
        test,
        test_actual_kwh,
        test_persistence_kwh,
    })
}

// ── synthetic generator ─────────────────────────────────────────────────

// Per-profile daily shape: peak interval, peak width, secondary bump,
// weekend multiplier, and temperature coupling. Spread out so clients
// disagree about when and how load moves.
struct ShapeParams {
    peak: f64,
    width: f64,
    peak2: f64,
    amp2: f64,
    weekend: f64,
    temp_gain: f64,
}

const SHAPES: [ShapeParams; 8] = [
    ShapeParams { peak: 52.0, width: 16.0, peak2: 36.0, amp2: 0.35, weekend: 0.55, temp_gain: 0.25 },
    ShapeParams { peak: 72.0, width: 11.0, peak2: 50.0, amp2: 0.25, weekend: 1.25, temp_gain: -0.15 },
    ShapeParams { peak: 36.0, width: 19.0, peak2: 64.0, amp2: 0.30, weekend: 0.65, temp_gain: 0.35 },
    ShapeParams { peak: 60.0, width: 26.0, peak2: 20.0, amp2: 0.15, weekend: 0.95, temp_gain: 0.05 },
    ShapeParams { peak: 80.0, width: 10.0, peak2: 44.0, amp2: 0.20, weekend: 1.15, temp_gain: -0.25 },
    ShapeParams { peak: 44.0, width: 14.0, peak2: 70.0, amp2: 0.25, weekend: 0.50, temp_gain: 0.40 },
    ShapeParams { peak: 28.0, width: 15.0, peak2: 56.0, amp2: 0.30, weekend: 0.75, temp_gain: -0.05 },
    ShapeParams { peak: 64.0, width: 21.0, peak2: 32.0, amp2: 0.20, weekend: 1.05, temp_gain: 0.15 },
];

// Fraction of the variance target carried by the deterministic profile;
// the rest is Gaussian noise.
const DETERMINISTIC_VARIANCE_FRACTION: f64 = 0.85;

// First row of every synthetic series: a Monday midnight on the grid.
const SYNTH_START: i64 = 1_609_718_400;

fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    // Box–Muller; u is kept away from 1 so the log stays finite.
    let u: f64 = rng.random();
    let v: f64 = rng.random();
    libm::sqrt(-2.0 * libm::log(1.0 - u)) * libm::cos(2.0 * core::f64::consts::PI * v)
}

struct Weather {
    ghi: Vec<f64>,
    temperature: Vec<f64>,
    wind_speed: Vec<f64>,
    temp_z: Vec<f64>,
}

fn gen_weather(n: usize, rng: &mut ChaCha12Rng) -> Weather {
    let mut ghi = Vec::with_capacity(n);
    let mut temperature = Vec::with_capacity(n);
    let mut wind_speed = Vec::with_capacity(n);
    let (mut drift, mut cloud, mut gust) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        let interval = (i as i64).rem_euclid(INTERVALS_PER_DAY) as f64;
        drift = 0.98 * drift + 0.5 * gaussian(rng);
        cloud = 0.95 * cloud + 0.3 * gaussian(rng);
        gust = 0.9 * gust + 0.6 * gaussian(rng);
        // Daily temperature swing peaking mid-afternoon.
        let daily = 6.0 * libm::sin(2.0 * core::f64::consts::PI * (interval - 36.0) / 96.0);
        temperature.push(12.0 + daily + drift);
        // Clear-sky half-sine over 06:00–18:00, modulated by cloud cover.
        let clear = libm::sin(core::f64::consts::PI * (interval - 24.0) / 48.0).max(0.0);
        let cover = 0.65 + 0.35 / (1.0 + libm::exp(-cloud));
        ghi.push(900.0 * clear * cover);
        wind_speed.push(libm::fabs(3.0 + 2.0 * gust));
    }
    let (t_mean, t_std) = mean_std(temperature.iter().copied(), n);
    let temp_z = temperature.iter().map(|t| (t - t_mean) / t_std.max(1e-9)).collect();
    Weather { ghi, temperature, wind_speed, temp_z }
}

fn circular_bump(interval: f64, center: f64, width: f64) -> f64 {
    let raw = libm::fabs(interval - center);
    let d = raw.min(INTERVALS_PER_DAY as f64 - raw);
    libm::exp(-d * d / (2.0 * width * width))
}

fn standardize(values: &mut [f64]) {
    let n = values.len();
    let (mean, std) = mean_std(values.iter().copied(), n);
    let inv = 1.0 / std.max(1e-12);
    for v in values.iter_mut() {
        *v = (*v - mean) * inv;
    }
}

fn gen_client(
    profile_index: usize,
    days: usize,
    seed: u64,
    client_id: u32,
    weather: &Weather,
) -> LoadSeries {
    let (target_mean, target_var) = SYNTH_PROFILES[profile_index];
    let shape = &SHAPES[profile_index];
    let n = days * INTERVALS_PER_DAY as usize;

    // Deterministic profile: a stable base plus narrow daily peaks, with
    // weekend and weather effects modulating the peaks only. The profile
    // stays right-skewed, so rescaling to the variance budget keeps the
    // trough well above zero.
    let mut g: Vec<f64> = (0..n)
        .map(|i| {
            let ts = SYNTH_START + i as i64 * STEP_SECONDS;
            let interval = interval_index(ts) as f64;
            let dow = day_of_week(ts);
            let weekday_factor = if dow >= 5 { shape.weekend } else { 1.0 };
            let temp_mod =
                (1.0 + shape.temp_gain * weather.temp_z[i].clamp(-2.5, 2.5)).max(0.2);
            let bumps = circular_bump(interval, shape.peak, shape.width)
                + shape.amp2 * circular_bump(interval, shape.peak2, shape.width * 0.7);
            0.25 + bumps * weekday_factor * temp_mod
        })
        .collect();
    standardize(&mut g);

    let mut cv_det = libm::sqrt(DETERMINISTIC_VARIANCE_FRACTION * target_var) / target_mean;
    let g_min = g.iter().cloned().fold(f64::INFINITY, f64::min);
    if g_min < 0.0 {
        // Keep the deterministic trough at 10% of the mean or above.
        cv_det = cv_det.min(0.9 / (-g_min));
    }
    let det: Vec<f64> = g.iter().map(|gn| target_mean * (1.0 + cv_det * gn)).collect();

    // Gaussian noise proportional to the deterministic level, scaled so
    // the total empirical variance lands on the target. Level-proportional
    // noise keeps percentage errors meaningful: the load never wanders
    // near zero on high-variance profiles.
    let mut rng = substream(seed, StreamDomain::SynthLoad, client_id as u64, 0);
    let mut eps: Vec<f64> = (0..n).map(|_| gaussian(&mut rng)).collect();
    standardize(&mut eps);
    let det_sq_mean = det.iter().map(|d| d * d).sum::<f64>() / n as f64;
    let noise_var = (target_var - target_mean * target_mean * cv_det * cv_det).max(0.0);
    let mut rho = libm::sqrt(noise_var / det_sq_mean);
    let eps_min = eps.iter().cloned().fold(f64::INFINITY, f64::min);
    if eps_min < 0.0 {
        rho = rho.min(0.9 / (-eps_min));
    }

    let floor_level = 0.005 * target_mean;
    let load: Vec<f64> =
        det.iter().zip(&eps).map(|(d, e)| (d * (1.0 + rho * e)).max(floor_level)).collect();

    let mut statics_rng = substream(seed, StreamDomain::SynthStatics, client_id as u64, 0);
    let floor_area = target_mean * statics_rng.random_range(15.0..25.0);
    let statics = BuildingStatics {
        floor_area,
        window_area: floor_area * statics_rng.random_range(0.08..0.2),
        roof_area: floor_area * statics_rng.random_range(0.3..1.0),
        cooling_capacity: target_mean * statics_rng.random_range(1.5..3.0),
    };

    LoadSeries {
        client_id,
        start: SYNTH_START,
        load,
        ghi: weather.ghi.clone(),
        temperature: weather.temperature.clone(),
        wind_speed: weather.wind_speed.clone(),
        statics,
    }
}

/// Generate series for an explicit list of profile indices (0-based).
/// All clients share one weather draw; loads and statics use per-client
/// substreams keyed by position.
pub fn synth_generate_profiles(
    profiles: &[usize],
    days: usize,
    seed: u64,
) -> Result<Vec<LoadSeries>, DataError> {
    if days < 2 {
        return Err(DataError::TooFewDays { got: days });
    }
    for &p in profiles {
        if p >= SYNTH_PROFILES.len() {
            return Err(DataError::ProfileOutOfRange { index: p, profiles: SYNTH_PROFILES.len() });
        }
    }
    let n = days * INTERVALS_PER_DAY as usize;
    let mut weather_rng = substream(seed, StreamDomain::SynthWeather, 0, 0);
    let weather = gen_weather(n, &mut weather_rng);
    // Client ids are 1-based slot numbers, matching file naming.
    Ok(profiles
        .iter()
        .enumerate()
        .map(|(slot, &p)| gen_client(p, days, seed, slot as u32 + 1, &weather))
        .collect())
}

/// Generate `m` clients using the first `m` calibration profiles.
pub fn synth_generate(m: usize, days: usize, seed: u64) -> Result<Vec<LoadSeries>, DataError> {
    if m > SYNTH_PROFILES.len() {
        return Err(DataError::ProfileOutOfRange { index: m - 1, profiles: SYNTH_PROFILES.len() });
    }
    let profiles: Vec<usize> = (0..m).collect();
    synth_generate_profiles(&profiles, days, seed)
}
