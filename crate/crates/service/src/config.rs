use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use noisenet_core::active::TriagePolicy;
use noisenet_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Service settings. Loaded from JSON; `NOISENET_DATA_DIR`,
/// `NOISENET_LISTEN_ADDR`, `NOISENET_ENTROPY_THRESHOLD` and
/// `NOISENET_RETRAIN_MIN_NEW_LABELS` override the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub listen_addr: SocketAddr,
    pub entropy_threshold: f64,
    pub retrain_min_new_labels: usize,
    pub queue_capacity: usize,
    /// Labeled events every retrain starts from.
    pub base_dataset: Option<PathBuf>,
    /// Checkpoint registered and activated when the registry is empty.
    pub initial_model: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let policy = TriagePolicy::default();
        Self {
            data_dir: PathBuf::from("data"),
            listen_addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            entropy_threshold: policy.entropy_threshold,
            retrain_min_new_labels: policy.retrain_min_new_labels,
            queue_capacity: policy.queue_capacity,
            base_dataset: None,
            initial_model: None,
            train: TrainConfig::default(),
        }
    }
}

impl ServiceConfig {
    /// Reads `path` (or starts from defaults) and applies the environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ServiceError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        config.validate()?;
        Ok(config)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ServiceError> {
        fn parse<T: std::str::FromStr>(key: &str, v: String) -> Result<T, ServiceError> {
            v.parse()
                .map_err(|_| ServiceError::Config(format!("{key}: cannot parse `{v}`")))
        }
        if let Some(v) = var("NOISENET_DATA_DIR") {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = var("NOISENET_LISTEN_ADDR") {
            self.listen_addr = parse("NOISENET_LISTEN_ADDR", v)?;
        }
        if let Some(v) = var("NOISENET_ENTROPY_THRESHOLD") {
            self.entropy_threshold = parse("NOISENET_ENTROPY_THRESHOLD", v)?;
        }
        if let Some(v) = var("NOISENET_RETRAIN_MIN_NEW_LABELS") {
            self.retrain_min_new_labels = parse("NOISENET_RETRAIN_MIN_NEW_LABELS", v)?;
        }
        Ok(())
    }

    pub fn policy(&self) -> TriagePolicy {
        TriagePolicy {
            entropy_threshold: self.entropy_threshold,
            queue_capacity: self.queue_capacity,
            retrain_min_new_labels: self.retrain_min_new_labels,
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        self.policy().validate()?;
        self.train.validate()?;
        Ok(())
    }
}
