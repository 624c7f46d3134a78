//! Forecast-quality metrics: MASE, MAPE, and pointwise APE series.
//!
//! MASE scales the absolute error by the persistence forecast's error
//! (repeat the load from `L` steps back), so 1.0 marks the naive
//! baseline and anything above it is worse than persistence. MAPE and APE
//! exclude zero actuals rather than dividing by them; exclusions are
//! counted and reported.

use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    Empty,
    /// MASE needs `lag` history points before the first actual.
    ShortHistory { needed: usize, got: usize },
    ZeroLag,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::LengthMismatch { what, expected, got } => {
                write!(f, "{what} has {got} entries, expected {expected}")
            }
            MetricsError::Empty => write!(f, "metrics need at least one point"),
            MetricsError::ShortHistory { needed, got } => {
                write!(f, "persistence reference needs {needed} history points, got {got}")
            }
            MetricsError::ZeroLag => write!(f, "persistence lag must be >= 1"),
        }
    }
}

impl core::error::Error for MetricsError {}

/// MASE value plus a flag for the degenerate case where persistence is
/// perfect (zero denominator → reported as +∞, not an error).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaseOutcome {
    pub value: f64,
    pub zero_denominator: bool,
}

/// Mean absolute scaled error:
/// `Σ|y_t − ŷ_t| / Σ|y_t − y_{t−L}|` over the evaluation horizon.
/// `history` supplies the `lag` values preceding `actual[0]` so the
/// persistence reference exists for the first points.
pub fn mase(
    actual: &[f64],
    forecast: &[f64],
    lag: usize,
    history: &[f64],
) -> Result<MaseOutcome, MetricsError> {
    if lag == 0 {
        return Err(MetricsError::ZeroLag);
    }
    if actual.is_empty() {
        return Err(MetricsError::Empty);
    }
    if forecast.len() != actual.len() {
        return Err(MetricsError::LengthMismatch {
            what: "forecast",
            expected: actual.len(),
            got: forecast.len(),
        });
    }
    if history.len() < lag {
        return Err(MetricsError::ShortHistory { needed: lag, got: history.len() });
    }
    let lagged = |t: usize| {
        if t >= lag {
            actual[t - lag]
        } else {
            history[history.len() - lag + t]
        }
    };
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for t in 0..actual.len() {
        numerator += libm::fabs(actual[t] - forecast[t]);
        denominator += libm::fabs(actual[t] - lagged(t));
    }
    if denominator == 0.0 {
        return Ok(MaseOutcome { value: f64::INFINITY, zero_denominator: true });
    }
    Ok(MaseOutcome { value: numerator / denominator, zero_denominator: false })
}

/// MAPE in percent plus the number of zero-actual points excluded from
/// the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapeOutcome {
    pub percent: f64,
    pub excluded: usize,
}

/// Mean absolute percentage error: `mean(|y_t − ŷ_t| / |y_t|) × 100`,
/// excluding points with `y_t = 0`.
pub fn mape(actual: &[f64], forecast: &[f64]) -> Result<MapeOutcome, MetricsError> {
    if actual.is_empty() {
        return Err(MetricsError::Empty);
    }
    if forecast.len() != actual.len() {
        return Err(MetricsError::LengthMismatch {
            what: "forecast",
            expected: actual.len(),
            got: forecast.len(),
        });
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (y, f) in actual.iter().zip(forecast) {
        if *y == 0.0 {
            continue;
        }
        total += libm::fabs(y - f) / libm::fabs(*y);
        counted += 1;
    }
    let percent = if counted == 0 { 0.0 } else { 100.0 * total / counted as f64 };
    Ok(MapeOutcome { percent, excluded: actual.len() - counted })
}

/// Pointwise absolute percentage errors for plot emission. Zero-actual
/// points carry `None` and are counted as excluded.
pub fn ape_series(actual: &[f64], forecast: &[f64]) -> Result<Vec<Option<f64>>, MetricsError> {
    if forecast.len() != actual.len() {
        return Err(MetricsError::LengthMismatch {
            what: "forecast",
            expected: actual.len(),
            got: forecast.len(),
        });
    }
    Ok(actual
        .iter()
        .zip(forecast)
        .map(|(y, f)| {
            if *y == 0.0 {
                None
            } else {
                Some(100.0 * libm::fabs(y - f) / libm::fabs(*y))
            }
        })
        .collect())
}

/// Per-client evaluation row.
#[derive(Debug, Clone)]
pub struct ClientEval {
    pub client: u32,
    pub mase: f64,
    pub mase_zero_denominator: bool,
    pub mape: f64,
    pub n_points: usize,
    pub n_excluded: usize,
}

/// Evaluation across clients: per-client rows plus the unweighted mean.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<ClientEval>,
    pub aggregate_mase: f64,
    pub aggregate_mape: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ClientEval>) -> Self {
        let n = rows.len().max(1) as f64;
        let aggregate_mase = rows.iter().map(|r| r.mase).sum::<f64>() / n;
        let aggregate_mape = rows.iter().map(|r| r.mape).sum::<f64>() / n;
        EvalReport { rows, aggregate_mase, aggregate_mape }
    }
}
