//! Entropy triage, the labeling queue and retraining on new labels.

use std::collections::HashMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::event::{ClassLabel, NoiseClass, NoiseEvent, Prediction, Triage};
use crate::ingest::Dataset;
use crate::nn::Network;
use crate::preprocess::make_event_matrix;
use crate::seed::derive_seed;
use crate::training::{predict_matrices, train, TrainConfig, TrainOutcome};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriagePolicy {
    /// Nats; predictions strictly above are queued.
    pub entropy_threshold: f64,
    /// Maximum number of pending entries.
    pub queue_capacity: usize,
    pub retrain_min_new_labels: usize,
}

impl Default for TriagePolicy {
    fn default() -> Self {
        Self {
            entropy_threshold: 0.45,
            queue_capacity: 100_000,
            retrain_min_new_labels: 50,
        }
    }
}

impl TriagePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=std::f64::consts::LN_2).contains(&self.entropy_threshold) {
            return Err(Error::InvalidConfig(format!(
                "entropy_threshold must be in [0, ln 2], got {}",
                self.entropy_threshold
            )));
        }
        if self.queue_capacity == 0 {
            return Err(Error::InvalidConfig("queue_capacity must be >= 1".into()));
        }
        Ok(())
    }
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn prediction_entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("{probs:?}")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("{probs:?} sums to {sum}")));
    }
    Ok(-probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
}

/// Queued iff entropy is strictly above the threshold.
pub fn triage(entropy: f64, policy: &TriagePolicy) -> Triage {
    if entropy > policy.entropy_threshold {
        Triage::QueuedForLabeling
    } else {
        Triage::AutoClassified
    }
}

pub fn make_prediction(probabilities: [f64; 2], model_version: &str, policy: &TriagePolicy) -> Result<Prediction> {
    let entropy = prediction_entropy(&probabilities)?;
    Ok(Prediction {
        probabilities,
        entropy,
        model_version: model_version.to_string(),
        triage: triage(entropy, policy),
    })
}

/// Preprocesses and classifies one event with an infer-mode network.
pub fn predict_event(net: &Network, event: &NoiseEvent, policy: &TriagePolicy) -> Result<Prediction> {
    let matrix = make_event_matrix(event, net.config().input_cols, net.duration_stats())?;
    let probs = predict_matrices(net, std::slice::from_ref(&matrix))?;
    make_prediction(probs[0], net.version(), policy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueStatus {
    Pending,
    Labeled,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub event_id: String,
    pub probabilities: [f64; 2],
    pub entropy: f64,
    pub model_version: String,
    /// Threshold in force when the entry was queued.
    pub threshold: f64,
    pub enqueued_at: DateTime<Utc>,
    pub seq: u64,
    pub status: QueueStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub event_id: String,
    pub class: NoiseClass,
    pub labeler: String,
    pub labeled_at: DateTime<Utc>,
}

impl LabelRecord {
    pub fn to_label(&self) -> ClassLabel {
        ClassLabel::manual(self.class, self.labeler.clone(), self.labeled_at)
    }
}

/// Entries awaiting or past manual labeling, keyed by event id.
#[derive(Debug, Clone, Default)]
pub struct LabelQueue {
    entries: HashMap<String, QueueEntry>,
    capacity: usize,
    next_seq: u64,
    pending: usize,
}

impl LabelQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pending_count(&self) -> usize {
        self.pending
    }

    pub fn get(&self, event_id: &str) -> Option<&QueueEntry> {
        self.entries.get(event_id)
    }

    /// Builds the entry that [`LabelQueue::insert`] would accept.
    pub fn prepare(&self, event_id: &str, prediction: &Prediction, threshold: f64, now: DateTime<Utc>) -> Result<QueueEntry> {
        if !(prediction.entropy > threshold) {
            return Err(Error::InvalidDistribution(format!(
                "entropy {} does not exceed threshold {threshold}",
                prediction.entropy
            )));
        }
        if self.entries.contains_key(event_id) {
            return Err(Error::DuplicateEventId {
                event_id: event_id.to_string(),
                line: 0,
            });
        }
        if self.pending >= self.capacity {
            return Err(Error::QueueFull(self.capacity));
        }
        Ok(QueueEntry {
            event_id: event_id.to_string(),
            probabilities: prediction.probabilities,
            entropy: prediction.entropy,
            model_version: prediction.model_version.clone(),
            threshold,
            enqueued_at: now,
            seq: self.next_seq,
            status: QueueStatus::Pending,
        })
    }

    /// Inserts a prepared or replayed entry.
    pub fn insert(&mut self, entry: QueueEntry) {
        self.next_seq = self.next_seq.max(entry.seq + 1);
        if entry.status == QueueStatus::Pending {
            self.pending += 1;
        }
        if let Some(old) = self.entries.insert(entry.event_id.clone(), entry) {
            if old.status == QueueStatus::Pending {
                self.pending -= 1;
            }
        }
    }

    pub fn enqueue(&mut self, event_id: &str, prediction: &Prediction, threshold: f64, now: DateTime<Utc>) -> Result<&QueueEntry> {
        let entry = self.prepare(event_id, prediction, threshold, now)?;
        self.insert(entry);
        Ok(&self.entries[event_id])
    }

    /// Pending entries by entropy descending, then enqueue time and
    /// sequence ascending.
    pub fn pending(&self, limit: usize) -> Vec<&QueueEntry> {
        let mut v: Vec<&QueueEntry> = self
            .entries
            .values()
            .filter(|e| e.status == QueueStatus::Pending)
            .collect();
        v.sort_by(|a, b| {
            b.entropy
                .total_cmp(&a.entropy)
                .then(a.enqueued_at.cmp(&b.enqueued_at))
                .then(a.seq.cmp(&b.seq))
        });
        v.truncate(limit);
        v
    }

    /// Validates a label submission without changing the queue.
    pub fn check_label(&self, event_id: &str) -> Result<()> {
        match self.entries.get(event_id) {
            None => Err(Error::UnknownEvent(event_id.to_string())),
            Some(e) if e.status == QueueStatus::Labeled => Err(Error::AlreadyLabeled(event_id.to_string())),
            Some(_) => Ok(()),
        }
    }

    /// Marks the entry labeled. Replaying a log calls this directly.
    pub fn apply_label(&mut self, record: &LabelRecord) -> Result<()> {
        self.check_label(&record.event_id)?;
        let e = self.entries.get_mut(&record.event_id).expect("checked");
        if e.status == QueueStatus::Pending {
            self.pending -= 1;
        }
        e.status = QueueStatus::Labeled;
        Ok(())
    }

    pub fn submit_label(
        &mut self,
        event_id: &str,
        class: NoiseClass,
        labeler: &str,
        now: DateTime<Utc>,
    ) -> Result<LabelRecord> {
        let record = LabelRecord {
            event_id: event_id.to_string(),
            class,
            labeler: labeler.to_string(),
            labeled_at: now,
        };
        self.apply_label(&record)?;
        Ok(record)
    }

    pub fn skip(&mut self, event_id: &str) -> Result<()> {
        let e = self
            .entries
            .get_mut(event_id)
            .ok_or_else(|| Error::UnknownEvent(event_id.to_string()))?;
        if e.status == QueueStatus::Pending {
            e.status = QueueStatus::Skipped;
            self.pending -= 1;
        }
        Ok(())
    }
}

/// `v{n+1}` where `n` is the largest numeric suffix among `existing`.
pub fn next_version<'a>(existing: impl IntoIterator<Item = &'a str>) -> String {
    let max = existing
        .into_iter()
        .filter_map(|v| v.strip_prefix('v').and_then(|n| n.parse::<u64>().ok()))
        .max()
        .unwrap_or(0);
    format!("v{}", max + 1)
}

/// Base events with newly labeled events; a new label replaces a base
/// event with the same id.
pub fn merge_labeled(base: &Dataset, labeled: &[NoiseEvent]) -> Result<Dataset> {
    let replaced: std::collections::HashSet<&str> = labeled.iter().map(|e| e.event_id.as_str()).collect();
    let mut events: Vec<NoiseEvent> = base
        .events()
        .iter()
        .filter(|e| !replaced.contains(e.event_id.as_str()))
        .cloned()
        .collect();
    events.extend(labeled.iter().cloned());
    Dataset::new(events)
}

/// Trains a fresh network on `base ∪ labeled`. `new_labels` counts labels
/// added since the previous retrain. The version is `version`; the seed is
/// derived from the configured seed and that version.
pub fn retrain(
    base: &Dataset,
    labeled: &[NoiseEvent],
    new_labels: usize,
    policy: &TriagePolicy,
    config: &TrainConfig,
    force: bool,
    version: &str,
) -> Result<TrainOutcome> {
    if !force && new_labels < policy.retrain_min_new_labels {
        return Err(Error::NotEnoughNewLabels {
            available: new_labels,
            required: policy.retrain_min_new_labels,
        });
    }
    let data = merge_labeled(base, labeled)?;
    let salt = version.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    let run = TrainConfig {
        seed: derive_seed(config.seed, &[0xAC71, salt]),
        ..config.clone()
    };
    let mut out = train(data.events(), None, &run)?;
    out.network.set_version(version);
    Ok(out)
}
