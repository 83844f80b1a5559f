//! File-backed event store, labeling queue and label log.
//!
//! Layout under the data directory:
//!
//! ```text
//! events.jsonl          one StoredEvent per accepted event
//! labels.jsonl          one LabelRecord per manual label
//! queue/entries.jsonl   one QueueEntry per queued event
//! ```
//!
//! Every write is appended and synced before the caller is answered. On
//! open the logs are replayed; an event whose queue entry was lost to a
//! crash between the two appends is re-queued.

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use noisenet_core::active::{LabelQueue, LabelRecord, QueueEntry};
use noisenet_core::event::{ClassLabel, NoiseClass, NoiseEvent, Prediction, Provenance, Triage};
use noisenet_core::ingest::{event_from_value, event_to_value};
use noisenet_core::jsonl::JsonlLog;
use noisenet_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEvent {
    pub received_at: DateTime<Utc>,
    pub event: Value,
    pub prediction: Prediction,
    /// Threshold in force when the event was triaged.
    pub threshold: f64,
}

#[derive(Debug)]
pub struct EventStore {
    events_log: JsonlLog<StoredEvent>,
    labels_log: JsonlLog<LabelRecord>,
    queue_log: JsonlLog<QueueEntry>,
    events: Vec<NoiseEvent>,
    predictions: Vec<Prediction>,
    index: HashMap<String, usize>,
    queue: LabelQueue,
    labels: Vec<LabelRecord>,
}

fn attach_label(event: &mut NoiseEvent, label: ClassLabel) {
    let manual = event
        .label
        .as_ref()
        .is_some_and(|l| l.provenance == Provenance::Manual);
    if label.provenance == Provenance::Manual || !manual {
        event.label = Some(label);
    }
}

impl EventStore {
    pub fn open(dir: &Path, queue_capacity: usize) -> Result<Self> {
        let (events_log, stored) = JsonlLog::<StoredEvent>::open(dir.join("events.jsonl"))?;
        let (queue_log, entries) = JsonlLog::<QueueEntry>::open(dir.join("queue").join("entries.jsonl"))?;
        let (labels_log, labels) = JsonlLog::<LabelRecord>::open(dir.join("labels.jsonl"))?;
        let mut store = Self {
            events_log,
            labels_log,
            queue_log,
            events: Vec::with_capacity(stored.len()),
            predictions: Vec::with_capacity(stored.len()),
            index: HashMap::with_capacity(stored.len()),
            queue: LabelQueue::new(queue_capacity),
            labels: Vec::new(),
        };
        let mut orphans = Vec::new();
        for (i, s) in stored.into_iter().enumerate() {
            let mut event = event_from_value(&s.event, i + 1)?;
            if s.prediction.triage == Triage::AutoClassified {
                attach_label(&mut event, ClassLabel::model(s.prediction.predicted_class(), s.received_at));
            } else {
                orphans.push((event.event_id.clone(), s.threshold, s.received_at));
            }
            store.index.insert(event.event_id.clone(), store.events.len());
            store.events.push(event);
            store.predictions.push(s.prediction);
        }
        for entry in entries {
            store.queue.insert(entry);
        }
        for (id, threshold, at) in orphans {
            if store.queue.get(&id).is_none() {
                let prediction = store.predictions[store.index[&id]].clone();
                let entry = store.queue.prepare(&id, &prediction, threshold, at)?;
                store.queue_log.append(&entry)?;
                store.queue.insert(entry);
            }
        }
        for record in labels {
            store.apply_label(record)?;
        }
        Ok(store)
    }

    fn apply_label(&mut self, record: LabelRecord) -> Result<()> {
        self.queue.apply_label(&record)?;
        if let Some(&i) = self.index.get(&record.event_id) {
            attach_label(&mut self.events[i], record.to_label());
        }
        self.labels.push(record);
        Ok(())
    }

    pub fn contains(&self, event_id: &str) -> bool {
        self.index.contains_key(event_id)
    }

    pub fn get(&self, event_id: &str) -> Option<(&NoiseEvent, &Prediction)> {
        self.index
            .get(event_id)
            .map(|&i| (&self.events[i], &self.predictions[i]))
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Persists a classified event and queues it when triage says so.
    /// Nothing is written if the event would be rejected.
    pub fn ingest(
        &mut self,
        mut event: NoiseEvent,
        prediction: Prediction,
        threshold: f64,
        now: DateTime<Utc>,
    ) -> Result<Option<QueueEntry>> {
        if self.contains(&event.event_id) {
            return Err(Error::DuplicateEventId {
                event_id: event.event_id,
                line: 0,
            });
        }
        let entry = match prediction.triage {
            Triage::QueuedForLabeling => Some(self.queue.prepare(&event.event_id, &prediction, threshold, now)?),
            Triage::AutoClassified => None,
        };
        self.events_log.append(&StoredEvent {
            received_at: now,
            event: event_to_value(&event),
            prediction: prediction.clone(),
            threshold,
        })?;
        if let Some(e) = &entry {
            self.queue_log.append(e)?;
            self.queue.insert(e.clone());
        } else {
            attach_label(&mut event, ClassLabel::model(prediction.predicted_class(), now));
        }
        self.index.insert(event.event_id.clone(), self.events.len());
        self.events.push(event);
        self.predictions.push(prediction);
        Ok(entry)
    }

    pub fn label(&mut self, event_id: &str, class: NoiseClass, labeler: &str, now: DateTime<Utc>) -> Result<LabelRecord> {
        self.queue.check_label(event_id)?;
        let record = LabelRecord {
            event_id: event_id.to_string(),
            class,
            labeler: labeler.to_string(),
            labeled_at: now,
        };
        self.labels_log.append(&record)?;
        self.apply_label(record.clone())?;
        Ok(record)
    }

    pub fn pending(&self, limit: usize) -> Vec<QueueEntry> {
        self.queue.pending(limit).into_iter().cloned().collect()
    }

    pub fn pending_count(&self) -> usize {
        self.queue.pending_count()
    }

    pub fn labels(&self) -> &[LabelRecord] {
        &self.labels
    }

    /// Stored events that carry a manual label from the label log.
    pub fn manually_labeled(&self) -> Vec<NoiseEvent> {
        self.labels
            .iter()
            .filter_map(|r| self.index.get(&r.event_id).map(|&i| self.events[i].clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use noisenet_core::event::{SpectralFrame, BAND_COUNT};

    fn event(id: &str) -> NoiseEvent {
        let frames = (0..5)
            .map(|t| SpectralFrame::new([50.0 + t as f64; BAND_COUNT], 60.0).unwrap())
            .collect();
        NoiseEvent::new(id, "m", at(0), frames, None).unwrap()
    }

    fn at(s: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_700_000_000 + s, 0).unwrap()
    }

    fn prediction(p: f64) -> Prediction {
        let policy = noisenet_core::active::TriagePolicy::default();
        noisenet_core::active::make_prediction([p, 1.0 - p], "v1", &policy).unwrap()
    }

    #[test]
    fn replay_restores_events_queue_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = EventStore::open(dir.path(), 10).unwrap();
            s.ingest(event("a"), prediction(0.99), 0.45, at(1)).unwrap();
            assert!(s.ingest(event("b"), prediction(0.6), 0.45, at(2)).unwrap().is_some());
            s.ingest(event("c"), prediction(0.5), 0.45, at(3)).unwrap();
            s.label("b", NoiseClass::Community, "ana", at(4)).unwrap();
        }
        let s = EventStore::open(dir.path(), 10).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.pending_count(), 1);
        assert_eq!(s.pending(10)[0].event_id, "c");
        assert_eq!(s.labels().len(), 1);
        let (b, _) = s.get("b").unwrap();
        assert_eq!(b.label.as_ref().unwrap().provenance, Provenance::Manual);
        let (a, _) = s.get("a").unwrap();
        assert_eq!(a.label.as_ref().unwrap().provenance, Provenance::Model);
        assert_eq!(s.manually_labeled().len(), 1);
    }

    #[test]
    fn lost_queue_entry_is_recreated() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = EventStore::open(dir.path(), 10).unwrap();
            s.ingest(event("a"), prediction(0.55), 0.45, at(1)).unwrap();
        }
        std::fs::write(dir.path().join("queue/entries.jsonl"), "").unwrap();
        let s = EventStore::open(dir.path(), 10).unwrap();
        assert_eq!(s.pending_count(), 1);
        let s = EventStore::open(dir.path(), 10).unwrap();
        assert_eq!(s.pending_count(), 1);
    }

    #[test]
    fn rejected_ingest_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = EventStore::open(dir.path(), 1).unwrap();
        s.ingest(event("a"), prediction(0.55), 0.45, at(1)).unwrap();
        assert!(matches!(
            s.ingest(event("b"), prediction(0.55), 0.45, at(2)),
            Err(Error::QueueFull(1))
        ));
        assert!(matches!(
            s.ingest(event("a"), prediction(0.99), 0.45, at(3)),
            Err(Error::DuplicateEventId { .. })
        ));
        drop(s);
        let s = EventStore::open(dir.path(), 1).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn label_guards() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = EventStore::open(dir.path(), 10).unwrap();
        s.ingest(event("a"), prediction(0.55), 0.45, at(1)).unwrap();
        s.ingest(event("z"), prediction(0.999), 0.45, at(1)).unwrap();
        s.label("a", NoiseClass::Aircraft, "ana", at(2)).unwrap();
        assert!(matches!(
            s.label("a", NoiseClass::Aircraft, "ana", at(3)),
            Err(Error::AlreadyLabeled(_))
        ));
        assert!(matches!(
            s.label("z", NoiseClass::Aircraft, "ana", at(3)),
            Err(Error::UnknownEvent(_))
        ));
        assert_eq!(s.labels().len(), 1);
    }
}
