//! Domain types shared by every stage of the pipeline.
//!
//! A noise event is a run of one-second spectral frames. Each frame holds
//! 36 third-octave band levels (6.3 Hz to 20 kHz, ascending) followed by
//! the overall A-weighted level, so a frame has 37 channels in total.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// Number of third-octave bands per frame.
pub const BAND_COUNT: usize = 36;
/// Band levels plus the overall level.
pub const CHANNELS: usize = BAND_COUNT + 1;
/// Default number of resampled time columns.
pub const DEFAULT_WIDTH: usize = 37;

/// Plausibility guard for any stored level, in dB.
pub const MIN_LEVEL_DB: f64 = -10.0;
pub const MAX_LEVEL_DB: f64 = 140.0;

const BAND_CENTERS_HZ: [f64; BAND_COUNT] = [
    6.3, 8.0, 10.0, 12.5, 16.0, 20.0, 25.0, 31.5, 40.0, 50.0, 63.0, 80.0, 100.0, 125.0, 160.0,
    200.0, 250.0, 315.0, 400.0, 500.0, 630.0, 800.0, 1000.0, 1250.0, 1600.0, 2000.0, 2500.0,
    3150.0, 4000.0, 5000.0, 6300.0, 8000.0, 10000.0, 12500.0, 16000.0, 20000.0,
];

/// Nominal third-octave center frequencies in Hz, ascending.
pub fn band_centers() -> [f64; BAND_COUNT] {
    BAND_CENTERS_HZ
}

/// One second of spectral data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralFrame {
    band_levels: [f64; BAND_COUNT],
    overall_laeq: f64,
}

impl SpectralFrame {
    pub fn new(band_levels: [f64; BAND_COUNT], overall_laeq: f64) -> Result<Self, String> {
        for (i, v) in band_levels.iter().chain(std::iter::once(&overall_laeq)).enumerate() {
            check_level(*v).map_err(|m| format!("channel {i}: {m}"))?;
        }
        Ok(Self {
            band_levels,
            overall_laeq,
        })
    }

    /// Builds a frame from the 37-channel wire layout (bands then overall).
    pub fn from_channels(channels: &[f64]) -> Result<Self, String> {
        if channels.len() != CHANNELS {
            return Err(format!(
                "expected {CHANNELS} channels, found {}",
                channels.len()
            ));
        }
        let mut bands = [0.0; BAND_COUNT];
        bands.copy_from_slice(&channels[..BAND_COUNT]);
        Self::new(bands, channels[BAND_COUNT])
    }

    pub fn band_levels(&self) -> &[f64; BAND_COUNT] {
        &self.band_levels
    }

    pub fn overall_laeq(&self) -> f64 {
        self.overall_laeq
    }

    /// Channel `i` in wire order; `i == 36` is the overall level.
    pub fn channel(&self, i: usize) -> f64 {
        if i < BAND_COUNT {
            self.band_levels[i]
        } else {
            assert_eq!(i, BAND_COUNT, "channel index out of range");
            self.overall_laeq
        }
    }

    pub fn to_channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(CHANNELS);
        out.extend_from_slice(&self.band_levels);
        out.push(self.overall_laeq);
        out
    }
}

fn check_level(v: f64) -> Result<(), String> {
    if !v.is_finite() {
        return Err(format!("non-finite level {v}"));
    }
    if !(MIN_LEVEL_DB..=MAX_LEVEL_DB).contains(&v) {
        return Err(format!(
            "level {v} outside [{MIN_LEVEL_DB}, {MAX_LEVEL_DB}] dB"
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseClass {
    Aircraft,
    Community,
}

impl NoiseClass {
    pub const ALL: [NoiseClass; 2] = [NoiseClass::Aircraft, NoiseClass::Community];

    /// Position in the network's output vector.
    pub fn index(self) -> usize {
        match self {
            NoiseClass::Aircraft => 0,
            NoiseClass::Community => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseClass::Aircraft => "aircraft",
            NoiseClass::Community => "community",
        }
    }
}

impl std::fmt::Display for NoiseClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NoiseClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "aircraft" => Ok(NoiseClass::Aircraft),
            "community" => Ok(NoiseClass::Community),
            other => Err(format!("unknown class `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Manual,
    Model,
}

/// Labeler recorded for labels that arrive with an imported dataset.
pub const IMPORT_LABELER: &str = "import";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub class: NoiseClass,
    pub provenance: Provenance,
    pub labeler: Option<String>,
    pub labeled_at: DateTime<Utc>,
}

impl ClassLabel {
    pub fn manual(class: NoiseClass, labeler: impl Into<String>, labeled_at: DateTime<Utc>) -> Self {
        Self {
            class,
            provenance: Provenance::Manual,
            labeler: Some(labeler.into()),
            labeled_at,
        }
    }

    pub fn model(class: NoiseClass, labeled_at: DateTime<Utc>) -> Self {
        Self {
            class,
            provenance: Provenance::Model,
            labeler: None,
            labeled_at,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.provenance != Provenance::Manual || self.labeler.is_some()
    }
}

/// A stored segment of the monitoring stream, sampled at 1 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEvent {
    pub event_id: String,
    pub monitor_id: String,
    pub start_time: DateTime<Utc>,
    frames: Vec<SpectralFrame>,
    pub label: Option<ClassLabel>,
}

impl NoiseEvent {
    /// Fails when fewer than two frames are given.
    pub fn new(
        event_id: impl Into<String>,
        monitor_id: impl Into<String>,
        start_time: DateTime<Utc>,
        frames: Vec<SpectralFrame>,
        label: Option<ClassLabel>,
    ) -> crate::Result<Self> {
        let event_id = event_id.into();
        if frames.len() < 2 {
            return Err(crate::Error::EventTooShort {
                event_id,
                frames: frames.len(),
            });
        }
        Ok(Self {
            event_id,
            monitor_id: monitor_id.into(),
            start_time,
            frames,
            label,
        })
    }

    pub fn frames(&self) -> &[SpectralFrame] {
        &self.frames
    }

    pub fn class(&self) -> Option<NoiseClass> {
        self.label.as_ref().map(|l| l.class)
    }

    pub fn with_label(mut self, label: Option<ClassLabel>) -> Self {
        self.label = label;
        self
    }
}

/// Duration in whole seconds; one frame per second.
pub fn duration_seconds(event: &NoiseEvent) -> usize {
    event.frames.len()
}

/// Fixed-size network input: 37 rows by `width` columns, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EventMatrix {
    pub values: Vec<f64>,
    pub width: usize,
    pub duration_feature: f64,
    pub source_event_id: String,
}

impl EventMatrix {
    pub fn rows(&self) -> usize {
        CHANNELS
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.width..(row + 1) * self.width]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Triage {
    AutoClassified,
    QueuedForLabeling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Ordered (aircraft, community).
    pub probabilities: [f64; 2],
    pub entropy: f64,
    pub model_version: String,
    pub triage: Triage,
}

impl Prediction {
    pub fn predicted_class(&self) -> NoiseClass {
        if self.probabilities[1] > self.probabilities[0] {
            NoiseClass::Community
        } else {
            NoiseClass::Aircraft
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn frame(level: f64) -> SpectralFrame {
        SpectralFrame::new([level; BAND_COUNT], level).unwrap()
    }

    fn event(n: usize) -> NoiseEvent {
        let t = Utc.with_ymd_and_hms(2017, 6, 1, 12, 0, 0).unwrap();
        NoiseEvent::new("e", "m", t, vec![frame(60.0); n], None).unwrap()
    }

    #[test]
    fn duration_is_frame_count() {
        assert_eq!(duration_seconds(&event(8)), 8);
        assert_eq!(duration_seconds(&event(2)), 2);
        assert_eq!(duration_seconds(&event(120)), 120);
    }

    #[test]
    fn single_frame_event_rejected() {
        let t = Utc.with_ymd_and_hms(2017, 6, 1, 12, 0, 0).unwrap();
        let err = NoiseEvent::new("e", "m", t, vec![frame(60.0)], None).unwrap_err();
        assert!(matches!(err, crate::Error::EventTooShort { frames: 1, .. }));
    }

    #[test]
    fn band_center_endpoints() {
        let c = band_centers();
        assert_eq!(c.len(), 36);
        assert_eq!(c[0], 6.3);
        assert_eq!(c[35], 20000.0);
    }

    #[test]
    fn band_centers_follow_third_octave_ratio() {
        let c = band_centers();
        let exact = 2f64.powf(1.0 / 3.0);
        for w in c.windows(2) {
            assert!(w[1] > w[0]);
            let ratio = w[1] / w[0];
            assert!((ratio / exact - 1.0).abs() < 0.06, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn frame_guards() {
        assert!(SpectralFrame::from_channels(&[50.0; 36]).is_err());
        assert!(SpectralFrame::from_channels(&[50.0; 37]).is_ok());
        let mut bad = [50.0; 37];
        bad[3] = f64::NAN;
        assert!(SpectralFrame::from_channels(&bad).is_err());
        bad[3] = 141.0;
        assert!(SpectralFrame::from_channels(&bad).is_err());
        bad[3] = -10.0;
        assert!(SpectralFrame::from_channels(&bad).is_ok());
    }

    #[test]
    fn manual_label_requires_labeler() {
        let t = Utc::now();
        assert!(ClassLabel::manual(NoiseClass::Aircraft, "ana", t).is_valid());
        assert!(ClassLabel::model(NoiseClass::Aircraft, t).is_valid());
        let broken = ClassLabel {
            labeler: None,
            ..ClassLabel::manual(NoiseClass::Aircraft, "x", t)
        };
        assert!(!broken.is_valid());
    }
}
