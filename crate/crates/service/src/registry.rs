//! Model versions and the active-version pointer.
//!
//! `models/registry.jsonl` records registrations and activations in
//! order; a version's checkpoint and report are written before its
//! registration is appended, so a registered version is always loadable.

use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use noisenet_core::jsonl::JsonlLog;
use noisenet_core::nn::{save_checkpoint, AdamState, Network};
use noisenet_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub version: String,
    pub created_at: DateTime<Utc>,
    /// Label-log length at the time the training snapshot was taken.
    pub labels_used: usize,
    pub summary: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RegistryRecord {
    Registered(ModelInfo),
    Activated { version: String, at: DateTime<Utc> },
}

#[derive(Debug)]
pub struct Registry {
    dir: PathBuf,
    log: JsonlLog<RegistryRecord>,
    versions: Vec<ModelInfo>,
    active: Option<String>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

impl Registry {
    pub fn open(models_dir: &Path) -> Result<Self> {
        let (log, records) = JsonlLog::open(models_dir.join("registry.jsonl"))?;
        let mut versions = Vec::new();
        let mut active = None;
        for r in records {
            match r {
                RegistryRecord::Registered(info) => versions.push(info),
                RegistryRecord::Activated { version, .. } => active = Some(version),
            }
        }
        Ok(Self {
            dir: models_dir.to_path_buf(),
            log,
            versions,
            active,
        })
    }

    pub fn versions(&self) -> &[ModelInfo] {
        &self.versions
    }

    pub fn active(&self) -> Option<&str> {
        self.active.as_deref()
    }

    pub fn get(&self, version: &str) -> Option<&ModelInfo> {
        self.versions.iter().find(|v| v.version == version)
    }

    pub fn checkpoint_path(&self, version: &str) -> PathBuf {
        self.dir.join(version).join("checkpoint.bin")
    }

    /// Largest `labels_used` among registered versions.
    pub fn labels_used(&self) -> usize {
        self.versions.iter().map(|v| v.labels_used).max().unwrap_or(0)
    }

    /// Writes the checkpoint and report, then records the version.
    pub fn register(&mut self, network: &Network, adam: Option<&AdamState>, info: ModelInfo) -> Result<()> {
        let dir = self.dir.join(&info.version);
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        save_checkpoint(network, adam, &dir.join("checkpoint.bin"))?;
        let report = serde_json::to_vec_pretty(&info).expect("model info serializes");
        write_atomic(&dir.join("report.json"), &report)?;
        let record = RegistryRecord::Registered(info);
        self.log.append(&record)?;
        let RegistryRecord::Registered(info) = record else { unreachable!() };
        self.versions.push(info);
        Ok(())
    }

    /// Records the activation. The caller swaps the in-memory model.
    pub fn activate(&mut self, version: &str, at: DateTime<Utc>) -> Result<()> {
        if self.get(version).is_none() {
            return Err(Error::UnknownEvent(version.to_string()));
        }
        self.log.append(&RegistryRecord::Activated {
            version: version.to_string(),
            at,
        })?;
        self.active = Some(version.to_string());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use noisenet_core::nn::{load_checkpoint, NetworkConfig};
    use noisenet_core::preprocess::DurationStats;

    fn net(seed: u64) -> Network {
        let stats = DurationStats {
            mean: 30.0,
            std: 10.0,
            computed_over: 10,
        };
        Network::new(NetworkConfig::default(), seed, stats).unwrap()
    }

    fn info(v: &str, labels_used: usize) -> ModelInfo {
        ModelInfo {
            version: v.into(),
            created_at: Utc::now(),
            labels_used,
            summary: serde_json::json!({}),
        }
    }

    #[test]
    fn registrations_and_activation_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut r = Registry::open(dir.path()).unwrap();
            r.register(&net(1), None, info("v1", 0)).unwrap();
            r.register(&net(2), None, info("v2", 12)).unwrap();
            r.activate("v1", Utc::now()).unwrap();
            r.activate("v2", Utc::now()).unwrap();
            assert!(r.activate("v9", Utc::now()).is_err());
        }
        let r = Registry::open(dir.path()).unwrap();
        assert_eq!(r.versions().len(), 2);
        assert_eq!(r.active(), Some("v2"));
        assert_eq!(r.labels_used(), 12);
        let (loaded, _) = load_checkpoint(&r.checkpoint_path("v2")).unwrap();
        assert_eq!(loaded.params(), net(2).params());
        assert!(dir.path().join("v1/report.json").exists());
    }
}
