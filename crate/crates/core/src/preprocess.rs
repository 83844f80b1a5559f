//! Variable-length events to fixed-size network inputs.
//!
//! Each of the 37 channel rows is resampled to `width` columns by linear
//! interpolation, the whole matrix is standardized to zero mean and unit
//! population standard deviation, and the event duration is carried as a
//! separate standardized scalar.

use serde::{Deserialize, Serialize};

use crate::event::{duration_seconds, EventMatrix, NoiseEvent, CHANNELS};
use crate::{Error, Result};

/// Minimum population standard deviation accepted by [`normalize`].
pub const MIN_STD: f64 = 1e-9;

/// Dense row-major matrix of levels.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl LevelMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Training-set duration statistics, persisted with the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationStats {
    pub mean: f64,
    pub std: f64,
    pub computed_over: usize,
}

impl DurationStats {
    pub fn standardize(&self, duration: f64) -> f64 {
        (duration - self.mean) / self.std
    }
}

/// Samples `row` (values at integer positions 0..len) at `width` evenly
/// spaced positions spanning the whole row.
pub fn resample_row(row: &[f64], width: usize, out: &mut [f64]) {
    let t = row.len();
    debug_assert!(t >= 2 && width >= 2 && out.len() == width);
    let span = (t - 1) as f64;
    let denom = (width - 1) as f64;
    for (j, slot) in out.iter_mut().enumerate() {
        // j*(t-1) is exact in integers, so endpoints and the identity case are exact.
        let pos = (j * (t - 1)) as f64 / denom;
        let lo = pos.floor() as usize;
        *slot = if lo >= t - 1 || pos >= span {
            row[t - 1]
        } else {
            let frac = pos - lo as f64;
            let (a, b) = (row[lo], row[lo + 1]);
            (a + frac * (b - a)).clamp(a.min(b), a.max(b))
        };
    }
}

/// Resamples every channel of `event` to `width` columns (raw dB).
pub fn interpolate_event(event: &NoiseEvent, width: usize) -> Result<LevelMatrix> {
    let frames = event.frames();
    if frames.len() < 2 {
        return Err(Error::EventTooShort {
            event_id: event.event_id.clone(),
            frames: frames.len(),
        });
    }
    if width < 2 {
        return Err(Error::InvalidConfig(format!("width must be >= 2, got {width}")));
    }
    let mut data = vec![0.0; CHANNELS * width];
    let mut row = vec![0.0; frames.len()];
    for ch in 0..CHANNELS {
        for (slot, f) in row.iter_mut().zip(frames) {
            *slot = f.channel(ch);
        }
        resample_row(&row, width, &mut data[ch * width..(ch + 1) * width]);
    }
    Ok(LevelMatrix::new(CHANNELS, width, data))
}

/// Population mean and standard deviation over all cells.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardizes all cells jointly: `(x - mean) / std`.
pub fn normalize(matrix: &LevelMatrix) -> Result<LevelMatrix> {
    if matrix.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::ShapeMismatch("matrix contains non-finite values".into()));
    }
    let (mean, std) = mean_std(&matrix.data);
    if !(std >= MIN_STD) {
        return Err(Error::DegenerateEvent(format!(
            "population std {std:e} below {MIN_STD:e}"
        )));
    }
    let data = matrix.data.iter().map(|v| (v - mean) / std).collect();
    Ok(LevelMatrix::new(matrix.rows, matrix.cols, data))
}

pub fn fit_duration_stats(events: &[NoiseEvent]) -> Result<DurationStats> {
    if events.len() < 2 {
        return Err(Error::DegenerateDurations);
    }
    let durations: Vec<f64> = events.iter().map(|e| duration_seconds(e) as f64).collect();
    let (mean, std) = mean_std(&durations);
    if std <= 0.0 {
        return Err(Error::DegenerateDurations);
    }
    Ok(DurationStats {
        mean,
        std,
        computed_over: events.len(),
    })
}

pub fn make_event_matrix(
    event: &NoiseEvent,
    width: usize,
    stats: &DurationStats,
) -> Result<EventMatrix> {
    let raw = interpolate_event(event, width)?;
    let norm = normalize(&raw).map_err(|e| match e {
        Error::DegenerateEvent(_) => Error::DegenerateEvent(event.event_id.clone()),
        other => other,
    })?;
    Ok(EventMatrix {
        values: norm.data,
        width,
        duration_feature: stats.standardize(duration_seconds(event) as f64),
        source_event_id: event.event_id.clone(),
    })
}
