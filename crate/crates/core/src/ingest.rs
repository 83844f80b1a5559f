//! Event dataset I/O and detection of events in continuous level streams.
//!
//! The canonical on-disk format is JSON lines, one event per line:
//!
//! ```text
//! {"event_id": "...", "monitor_id": "...", "start_time": "2017-06-01T12:00:00Z",
//!  "frames": [[f0, ..., f35, overall], ...], "label": "aircraft" | "community" | null}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::event::{ClassLabel, NoiseClass, NoiseEvent, SpectralFrame, IMPORT_LABELER};
use crate::{Error, Result};

/// Parses one Event JSON record. `line` is only used for error context.
pub fn parse_event(text: &str, line: usize) -> Result<NoiseEvent> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::MalformedRecord {
        line,
        message: e.to_string(),
    })?;
    event_from_value(&value, line)
}

pub fn event_from_value(value: &Value, line: usize) -> Result<NoiseEvent> {
    let violation = |field: &str, message: String| Error::SchemaViolation {
        line,
        field: field.to_string(),
        message,
    };
    let obj = value
        .as_object()
        .ok_or_else(|| violation("$", "record is not a JSON object".into()))?;
    let string_field = |name: &str| -> Result<String> {
        obj.get(name)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| violation(name, "missing or not a string".into()))
    };
    let event_id = string_field("event_id")?;
    if event_id.is_empty() {
        return Err(violation("event_id", "must not be empty".into()));
    }
    let monitor_id = string_field("monitor_id")?;
    let start_time: DateTime<Utc> = string_field("start_time")?
        .parse()
        .map_err(|e| violation("start_time", format!("not an RFC 3339 timestamp: {e}")))?;

    let raw_frames = obj
        .get("frames")
        .and_then(Value::as_array)
        .ok_or_else(|| violation("frames", "missing or not an array".into()))?;
    if raw_frames.len() < 2 {
        return Err(violation(
            "frames",
            format!("{} frames, at least 2 are required", raw_frames.len()),
        ));
    }
    let mut frames = Vec::with_capacity(raw_frames.len());
    let mut channels = Vec::with_capacity(crate::event::CHANNELS);
    for (i, raw) in raw_frames.iter().enumerate() {
        let field = format!("frames[{i}]");
        let arr = raw
            .as_array()
            .ok_or_else(|| violation(&field, "frame is not an array".into()))?;
        channels.clear();
        for (j, v) in arr.iter().enumerate() {
            let x = v
                .as_f64()
                .ok_or_else(|| violation(&format!("frames[{i}][{j}]"), "not a number".into()))?;
            channels.push(x);
        }
        frames.push(SpectralFrame::from_channels(&channels).map_err(|m| violation(&field, m))?);
    }

    let label = match obj.get("label") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => {
            let class: NoiseClass = s.parse().map_err(|m| violation("label", m))?;
            Some(ClassLabel::manual(class, IMPORT_LABELER, start_time))
        }
        Some(_) => return Err(violation("label", "must be a string or null".into())),
    };

    NoiseEvent::new(event_id, monitor_id, start_time, frames, label)
}

pub fn event_to_value(event: &NoiseEvent) -> Value {
    let frames: Vec<Vec<f64>> = event.frames().iter().map(SpectralFrame::to_channels).collect();
    json!({
        "event_id": event.event_id,
        "monitor_id": event.monitor_id,
        "start_time": event.start_time,
        "frames": frames,
        "label": event.class().map(NoiseClass::as_str),
    })
}

/// Serializes an event as a single JSON line (no trailing newline).
pub fn event_to_json(event: &NoiseEvent) -> String {
    event_to_value(event).to_string()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    events: Vec<NoiseEvent>,
    class_counts: BTreeMap<NoiseClass, usize>,
}

impl Dataset {
    pub fn new(events: Vec<NoiseEvent>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(events.len());
        for (i, e) in events.iter().enumerate() {
            if !seen.insert(e.event_id.as_str()) {
                return Err(Error::DuplicateEventId {
                    event_id: e.event_id.clone(),
                    line: i + 1,
                });
            }
        }
        let mut class_counts: BTreeMap<NoiseClass, usize> =
            NoiseClass::ALL.iter().map(|c| (*c, 0)).collect();
        for c in events.iter().filter_map(NoiseEvent::class) {
            *class_counts.entry(c).or_default() += 1;
        }
        Ok(Self {
            events,
            class_counts,
        })
    }

    pub fn events(&self) -> &[NoiseEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<NoiseEvent> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn class_counts(&self) -> &BTreeMap<NoiseClass, usize> {
        &self.class_counts
    }

    pub fn count(&self, class: NoiseClass) -> usize {
        self.class_counts.get(&class).copied().unwrap_or(0)
    }

    /// Subset by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let events: Vec<_> = indices.iter().map(|&i| self.events[i].clone()).collect();
        Dataset::new(events).expect("subset of a valid dataset has unique ids")
    }

    /// Concatenation; fails on duplicate ids.
    pub fn union(&self, other: &Dataset) -> Result<Dataset> {
        let mut events = self.events.clone();
        events.extend(other.events.iter().cloned());
        Dataset::new(events)
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let event = parse_event(&line, i + 1)?;
        if !seen.insert(event.event_id.clone()) {
            return Err(Error::DuplicateEventId {
                event_id: event.event_id,
                line: i + 1,
            });
        }
        events.push(event);
    }
    Dataset::new(events)
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for e in dataset.events() {
        writeln!(w, "{}", event_to_json(e)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Draws `n_per_class` labeled events of each class without replacement
/// and returns them in a seeded random order.
pub fn sample_balanced(dataset: &Dataset, n_per_class: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n_per_class * NoiseClass::ALL.len());
    for class in NoiseClass::ALL {
        let mut pool: Vec<usize> = dataset
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.class() == Some(class))
            .map(|(i, _)| i)
            .collect();
        if pool.len() < n_per_class {
            return Err(Error::InsufficientClassCount {
                class: class.to_string(),
                available: pool.len(),
                requested: n_per_class,
            });
        }
        pool.shuffle(&mut rng);
        chosen.extend_from_slice(&pool[..n_per_class]);
    }
    chosen.shuffle(&mut rng);
    Ok(dataset.select(&chosen))
}

/// Overall A-weighted level sampled once per second.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStream {
    samples: Vec<(DateTime<Utc>, f64)>,
}

impl LevelStream {
    pub fn new(samples: Vec<(DateTime<Utc>, f64)>) -> Result<Self> {
        for (i, w) in samples.windows(2).enumerate() {
            if (w[1].0 - w[0].0).num_milliseconds() != 1000 {
                return Err(Error::SchemaViolation {
                    line: i + 2,
                    field: "timestamp".into(),
                    message: format!("samples must be 1 s apart ({} -> {})", w[0].0, w[1].0),
                });
            }
        }
        if let Some((i, _)) = samples.iter().enumerate().find(|(_, s)| !s.1.is_finite()) {
            return Err(Error::SchemaViolation {
                line: i + 1,
                field: "level".into(),
                message: "non-finite level".into(),
            });
        }
        Ok(Self { samples })
    }

    /// Stream starting at `start` with the given levels at 1 Hz.
    pub fn from_levels(start: DateTime<Utc>, levels: &[f64]) -> Result<Self> {
        let samples = levels
            .iter()
            .enumerate()
            .map(|(i, &l)| (start + chrono::Duration::seconds(i as i64), l))
            .collect();
        Self::new(samples)
    }

    pub fn samples(&self) -> &[(DateTime<Utc>, f64)] {
        &self.samples
    }

    pub fn levels(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.1)
    }
}

/// Level a sample must strictly exceed to open an event, in dBA.
pub const ONSET_DBA: f64 = 65.0;
/// Level an open event must stay at or above, in dBA.
pub const SUSTAIN_DBA: f64 = 63.0;
/// Minimum event length in samples.
pub const MIN_EVENT_SECONDS: usize = 8;

/// Returns inclusive `(start, end)` sample indices of every event.
pub fn detect_events(stream: &LevelStream) -> Vec<(usize, usize)> {
    let levels: Vec<f64> = stream.levels().collect();
    let mut events = Vec::new();
    let mut i = 0;
    while i < levels.len() {
        if levels[i] > ONSET_DBA {
            let mut end = i;
            while end + 1 < levels.len() && levels[end + 1] >= SUSTAIN_DBA {
                end += 1;
            }
            if end - i + 1 >= MIN_EVENT_SECONDS {
                events.push((i, end));
            }
            i = end + 1;
        } else {
            i += 1;
        }
    }
    events
}
