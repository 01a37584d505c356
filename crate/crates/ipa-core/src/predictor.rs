//! Reference-load forecasting behind a pluggable interface.
//!
//! The adapter provisions for a predicted peak load rather than the current
//! one. Deterministic baselines ship in place of a learned forecaster: a
//! reactive window maximum, the same with a headroom factor, a clairvoyant
//! oracle over the next horizon, and verbatim externally supplied
//! predictions loaded from CSV.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-second request counts starting at `start_time` (absolute seconds).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadSeries {
    pub start_time: u64,
    pub counts: Vec<u64>,
}

impl LoadSeries {
    pub fn new(start_time: u64, counts: Vec<u64>) -> Self {
        Self { start_time, counts }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Absolute second just past the series' last entry.
    pub fn end_time(&self) -> u64 {
        self.start_time + self.counts.len() as u64
    }

    /// Counts in the absolute window `[from, to)`, clamped to the series.
    pub fn window(&self, from: u64, to: u64) -> &[u64] {
        let lo = from.saturating_sub(self.start_time).min(self.counts.len() as u64) as usize;
        let hi = to.saturating_sub(self.start_time).min(self.counts.len() as u64) as usize;
        &self.counts[lo..hi.max(lo)]
    }

    pub fn max(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }
}

/// Reads a trace CSV with `t_s,rps` rows into a load series. Seconds must be
/// contiguous and ascending.
pub fn read_trace_csv(path: &Path) -> Result<LoadSeries, PredictError> {
    let mut reader = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| PredictError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    let mut start_time: Option<u64> = None;
    let mut counts = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| PredictError::Csv {
            row,
            message: e.to_string(),
        })?;
        let get = |idx: usize| record.get(idx).unwrap_or("").trim().to_string();
        let t: u64 = get(0).parse().map_err(|_| PredictError::Csv {
            row,
            message: format!("t_s must be a non-negative integer, got '{}'", get(0)),
        })?;
        let rps: u64 = get(1).parse().map_err(|_| PredictError::Csv {
            row,
            message: format!("rps must be a non-negative integer, got '{}'", get(1)),
        })?;
        match start_time {
            None => start_time = Some(t),
            Some(start) => {
                let expected = start + counts.len() as u64;
                if t != expected {
                    return Err(PredictError::Csv {
                        row,
                        message: format!("expected second {expected}, got {t}"),
                    });
                }
            }
        }
        counts.push(rps);
    }
    Ok(LoadSeries::new(start_time.unwrap_or(0), counts))
}

/// Writes a load series as `t_s,rps` CSV.
pub fn write_trace_csv(series: &LoadSeries, path: &Path) -> Result<(), PredictError> {
    let mut out = String::from("t_s,rps\n");
    for (i, c) in series.counts.iter().enumerate() {
        out.push_str(&format!("{},{}\n", series.start_time + i as u64, c));
    }
    std::fs::write(path, out).map_err(|e| PredictError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Forecasting baseline to use.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictorKind {
    /// Maximum over the trailing window of observed load.
    ReactiveMax,
    /// Reactive maximum scaled by `1 + headroom`.
    WindowMaxHeadroom,
    /// Exact maximum of the next `horizon_s` seconds; requires the future.
    Oracle,
    /// Externally supplied predictions keyed by decision time; the entry at
    /// or latest before the decision time is used verbatim.
    External(BTreeMap<u64, f64>),
}

/// Predictor settings: window for history, horizon for lookahead, headroom
/// margin for the scaled baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSpec {
    pub kind: PredictorKind,
    pub window_s: u32,
    pub horizon_s: u32,
    pub headroom: f64,
}

impl PredictorSpec {
    pub fn new(kind: PredictorKind) -> Self {
        Self {
            kind,
            window_s: 120,
            horizon_s: 20,
            headroom: 0.1,
        }
    }
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self::new(PredictorKind::ReactiveMax)
    }
}

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("oracle predictor requires a future series")]
    MissingFuture,
    #[error("no external prediction at or before second {at}")]
    MissingExternal { at: u64 },
    #[error("series length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("series must be non-empty")]
    EmptySeries,
    #[error("invalid predictor spec: {0}")]
    InvalidSpec(String),
    #[error("failed to read {path}: {message}")]
    Io { path: String, message: String },
    #[error("trace CSV row {row}: {message}")]
    Csv { row: usize, message: String },
}

/// Forecasts the reference load in requests per second.
///
/// `history` must end at the decision time; `future` must start at the
/// decision time and is required only by the oracle.
pub fn predict(
    spec: &PredictorSpec,
    history: &LoadSeries,
    future: Option<&LoadSeries>,
) -> Result<f64, PredictError> {
    if spec.window_s < 1 || spec.horizon_s < 1 {
        return Err(PredictError::InvalidSpec(
            "window_s and horizon_s must be at least 1".into(),
        ));
    }
    if !(spec.headroom >= 0.0) {
        return Err(PredictError::InvalidSpec(format!(
            "headroom must be non-negative, got {}",
            spec.headroom
        )));
    }
    match &spec.kind {
        PredictorKind::ReactiveMax | PredictorKind::WindowMaxHeadroom => {
            if history.is_empty() {
                return Err(PredictError::EmptyHistory);
            }
            let window = spec.window_s as usize;
            let tail = &history.counts[history.counts.len().saturating_sub(window)..];
            let max = tail.iter().copied().max().unwrap_or(0) as f64;
            if matches!(spec.kind, PredictorKind::WindowMaxHeadroom) {
                Ok(max * (1.0 + spec.headroom))
            } else {
                Ok(max)
            }
        }
        PredictorKind::Oracle => {
            let future = future.ok_or(PredictError::MissingFuture)?;
            if future.is_empty() {
                return Err(PredictError::EmptySeries);
            }
            let horizon = (spec.horizon_s as usize).min(future.counts.len());
            Ok(future.counts[..horizon].iter().copied().max().unwrap_or(0) as f64)
        }
        PredictorKind::External(predictions) => {
            let at = history.end_time();
            predictions
                .range(..=at)
                .next_back()
                .map(|(_, &v)| v)
                .ok_or(PredictError::MissingExternal { at })
        }
    }
}

/// Reads `t,predicted_rps` CSV rows for the external predictor.
pub fn read_predictions_csv(path: &Path) -> Result<BTreeMap<u64, f64>, PredictError> {
    let mut reader = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| PredictError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    let mut out = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| PredictError::Csv {
            row,
            message: e.to_string(),
        })?;
        let get = |idx: usize| record.get(idx).unwrap_or("").trim().to_string();
        let t: u64 = get(0).parse().map_err(|_| PredictError::Csv {
            row,
            message: format!("t must be a non-negative integer, got '{}'", get(0)),
        })?;
        let v: f64 = get(1).parse().map_err(|_| PredictError::Csv {
            row,
            message: format!("predicted_rps must be a number, got '{}'", get(1)),
        })?;
        out.insert(t, v);
    }
    Ok(out)
}

/// Symmetric mean absolute percentage error between two equal-length series,
/// in percent. Pairs where both values are zero contribute zero.
pub fn smape(predicted: &[f64], actual: &[f64]) -> Result<f64, PredictError> {
    if predicted.len() != actual.len() {
        return Err(PredictError::LengthMismatch {
            left: predicted.len(),
            right: actual.len(),
        });
    }
    if predicted.is_empty() {
        return Err(PredictError::EmptySeries);
    }
    let mut sum = 0.0;
    for (&p, &a) in predicted.iter().zip(actual) {
        let denom = (p.abs() + a.abs()) / 2.0;
        if denom > 0.0 {
            sum += (p - a).abs() / denom;
        }
    }
    Ok(100.0 * sum / predicted.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: PredictorKind) -> PredictorSpec {
        PredictorSpec::new(kind)
    }

    #[test]
    fn reactive_max_of_constant_history_is_the_constant() {
        let history = LoadSeries::new(0, vec![10; 30]);
        let p = predict(&spec(PredictorKind::ReactiveMax), &history, None).unwrap();
        assert_eq!(p, 10.0);
    }

    #[test]
    fn headroom_scales_the_window_max() {
        let history = LoadSeries::new(0, vec![5, 10, 7]);
        let p = predict(&spec(PredictorKind::WindowMaxHeadroom), &history, None).unwrap();
        assert!((p - 11.0).abs() < 1e-12);
    }

    #[test]
    fn zero_headroom_equals_reactive_max() {
        let history = LoadSeries::new(0, vec![3, 19, 4, 8]);
        let mut s = spec(PredictorKind::WindowMaxHeadroom);
        s.headroom = 0.0;
        let with = predict(&s, &history, None).unwrap();
        let without = predict(&spec(PredictorKind::ReactiveMax), &history, None).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn window_limits_how_far_back_the_max_looks() {
        let mut counts = vec![50u64];
        counts.extend(vec![5u64; 200]);
        let history = LoadSeries::new(0, counts);
        let p = predict(&spec(PredictorKind::ReactiveMax), &history, None).unwrap();
        // default window is 120 seconds; the 50 at t=0 has aged out
        assert_eq!(p, 5.0);
    }

    #[test]
    fn oracle_takes_the_future_window_max() {
        let history = LoadSeries::new(0, vec![1, 1, 1]);
        let future = LoadSeries::new(3, vec![3, 30, 4]);
        let p = predict(&spec(PredictorKind::Oracle), &history, Some(&future)).unwrap();
        assert_eq!(p, 30.0);
    }

    #[test]
    fn oracle_without_future_errors() {
        let history = LoadSeries::new(0, vec![1]);
        assert!(matches!(
            predict(&spec(PredictorKind::Oracle), &history, None),
            Err(PredictError::MissingFuture)
        ));
    }

    #[test]
    fn empty_history_errors() {
        let history = LoadSeries::new(0, vec![]);
        assert!(matches!(
            predict(&spec(PredictorKind::ReactiveMax), &history, None),
            Err(PredictError::EmptyHistory)
        ));
    }

    #[test]
    fn oracle_bounds_every_future_value_within_horizon() {
        let history = LoadSeries::new(0, vec![2; 10]);
        let future = LoadSeries::new(10, vec![4, 9, 2, 17, 3, 8, 1, 1, 20, 5]);
        let s = spec(PredictorKind::Oracle);
        let p = predict(&s, &history, Some(&future)).unwrap();
        for &v in &future.counts[..(s.horizon_s as usize).min(future.len())] {
            assert!(p >= v as f64);
        }
    }

    #[test]
    fn reactive_max_bounds_every_history_value_within_window() {
        let history = LoadSeries::new(0, vec![4, 9, 2, 17, 3, 8, 1, 1, 20, 5]);
        let s = spec(PredictorKind::ReactiveMax);
        let p = predict(&s, &history, None).unwrap();
        let tail = &history.counts[history.len().saturating_sub(s.window_s as usize)..];
        for &v in tail {
            assert!(p >= v as f64);
        }
    }

    #[test]
    fn external_uses_latest_entry_at_or_before_decision_time() {
        let predictions: BTreeMap<u64, f64> = [(0, 7.0), (10, 21.0)].into();
        let history = LoadSeries::new(0, vec![1; 10]); // ends at t=10
        let p = predict(
            &spec(PredictorKind::External(predictions.clone())),
            &history,
            None,
        )
        .unwrap();
        assert_eq!(p, 21.0);

        let earlier = LoadSeries::new(0, vec![1; 5]); // ends at t=5
        let p = predict(&spec(PredictorKind::External(predictions)), &earlier, None).unwrap();
        assert_eq!(p, 7.0);
    }

    #[test]
    fn smape_examples() {
        assert_eq!(smape(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        let p = smape(&[10.0], &[20.0]).unwrap();
        assert!((p - 100.0 * (10.0 / 15.0)).abs() < 1e-12);
        assert_eq!(smape(&[0.0], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn smape_is_symmetric_and_bounded() {
        let a = [3.0, 0.0, 17.5, 4.2, 9.0];
        let b = [1.0, 2.0, 0.0, 4.2, 100.0];
        let ab = smape(&a, &b).unwrap();
        let ba = smape(&b, &a).unwrap();
        assert_eq!(ab, ba);
        assert!((0.0..=200.0).contains(&ab));
    }

    #[test]
    fn smape_length_mismatch_errors() {
        assert!(matches!(
            smape(&[1.0], &[1.0, 2.0]),
            Err(PredictError::LengthMismatch { .. })
        ));
    }
}
