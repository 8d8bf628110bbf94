//! Training machinery: run configuration, the AdamW optimizer, deterministic
//! batch scheduling, the assembled model pipeline, checkpointing, freeze
//! audits, and the phase drivers themselves.

pub mod checkpoint;
pub mod config;
pub mod freeze;
pub mod optimizer;
pub mod phases;
pub mod pipeline;
pub mod schedule;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use optimizer::{cosine_scale, AdamConfig, AdamW};
pub use pipeline::{Pipeline, TrainPhase};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Fixed file layout inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> RunDir {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ensure(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn phase_dir(&self, phase: &str) -> PathBuf {
        self.root.join(phase)
    }

    pub fn checkpoint_path(&self, phase: &str) -> PathBuf {
        self.phase_dir(phase).join("checkpoint.vxcp")
    }

    pub fn metrics_path(&self, phase: &str) -> PathBuf {
        self.phase_dir(phase).join("metrics.jsonl")
    }

    pub fn snapshot_before_path(&self, phase: &str) -> PathBuf {
        self.phase_dir(phase).join("groups_before.json")
    }

    pub fn snapshot_after_path(&self, phase: &str) -> PathBuf {
        self.phase_dir(phase).join("groups_after.json")
    }

    pub fn access_log_path(&self) -> PathBuf {
        self.root.join("access_log.json")
    }

    pub fn freeze_report_path(&self, phase: &str) -> PathBuf {
        self.phase_dir(phase).join("freeze.txt")
    }

    pub fn dump_dir(&self, phase: &str) -> PathBuf {
        self.phase_dir(phase).join("dump")
    }

    pub fn decodes_path(&self) -> PathBuf {
        self.root.join("decodes.jsonl")
    }

    pub fn report_tsv_path(&self) -> PathBuf {
        self.root.join("report.tsv")
    }

    pub fn report_txt_path(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    /// Writes the config snapshot, or verifies it matches an existing one.
    pub fn persist_config(&self, cfg: &RunConfig, force: bool) -> Result<()> {
        self.ensure()?;
        let path = self.config_path();
        let rendered = cfg.to_toml();
        if path.exists() && !force {
            let existing =
                std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            if existing != rendered {
                return Err(Error::validation(format!(
                    "run directory {} was created with a different configuration; \
                     pass --force to overwrite",
                    self.root.display()
                )));
            }
            return Ok(());
        }
        std::fs::write(&path, rendered).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_stable() {
        let rd = RunDir::new("/tmp/run");
        assert_eq!(rd.checkpoint_path("stage1"), PathBuf::from("/tmp/run/stage1/checkpoint.vxcp"));
        assert_eq!(rd.metrics_path("pretrain"), PathBuf::from("/tmp/run/pretrain/metrics.jsonl"));
        assert_eq!(rd.report_tsv_path(), PathBuf::from("/tmp/run/report.tsv"));
        assert_eq!(rd.dataset_dir(), PathBuf::from("/tmp/run/dataset"));
    }

    #[test]
    fn config_snapshot_guards_reuse() {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDir::new(dir.path().join("run"));
        let cfg = RunConfig::default();
        rd.persist_config(&cfg, false).unwrap();
        // Same config: fine.
        rd.persist_config(&cfg, false).unwrap();

        let mut other = RunConfig::default();
        other.seed = 999;
        let err = rd.persist_config(&other, false).unwrap_err();
        assert!(err.to_string().contains("different configuration"));
        assert!(err.is_validation());
        // Force overwrites.
        rd.persist_config(&other, true).unwrap();
        rd.persist_config(&other, false).unwrap();
    }
}
