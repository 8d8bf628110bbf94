//! Freeze auditing: compares per-group parameter checksums taken before and
//! after a phase against the set of groups that phase was allowed to train.
//! A frozen group whose checksum moved is a hard failure.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub enum GroupVerdict {
    /// Trainable and changed, as expected.
    Trained,
    /// Trainable but the checksum did not move (can be legitimate for a
    /// group with zero gradient, so this is informational).
    TrainableUnchanged,
    /// Frozen and untouched.
    Frozen,
    /// Frozen but the checksum moved: a freeze violation.
    Violated,
}

#[derive(Debug, Clone)]
pub struct FreezeReport {
    pub phase: String,
    pub verdicts: BTreeMap<String, GroupVerdict>,
}

impl FreezeReport {
    pub fn violations(&self) -> Vec<&str> {
        self.verdicts
            .iter()
            .filter(|(_, v)| **v == GroupVerdict::Violated)
            .map(|(g, _)| g.as_str())
            .collect()
    }

    pub fn is_clean(&self) -> bool {
        self.violations().is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = format!("freeze audit: phase {}\n", self.phase);
        for (group, verdict) in &self.verdicts {
            let tag = match verdict {
                GroupVerdict::Trained => "trained",
                GroupVerdict::TrainableUnchanged => "trainable (unchanged)",
                GroupVerdict::Frozen => "frozen",
                GroupVerdict::Violated => "FROZEN GROUP CHANGED",
            };
            out.push_str(&format!("  {group:<22} {tag}\n"));
        }
        out
    }
}

/// Compares checksums and classifies each group.
pub fn freeze_audit(
    phase: &str,
    before: &BTreeMap<String, u64>,
    after: &BTreeMap<String, u64>,
    trainable: &BTreeSet<String>,
) -> Result<FreezeReport> {
    if before.keys().ne(after.keys()) {
        return Err(Error::validation(
            "freeze audit: snapshots cover different parameter groups",
        ));
    }
    for group in trainable {
        if !before.contains_key(group) {
            return Err(Error::validation(format!(
                "freeze audit: declared trainable group {group} does not exist"
            )));
        }
    }
    let mut verdicts = BTreeMap::new();
    for (group, b) in before {
        let a = after[group];
        let changed = a != *b;
        let allowed = trainable.contains(group);
        let verdict = match (allowed, changed) {
            (true, true) => GroupVerdict::Trained,
            (true, false) => GroupVerdict::TrainableUnchanged,
            (false, false) => GroupVerdict::Frozen,
            (false, true) => GroupVerdict::Violated,
        };
        verdicts.insert(group.clone(), verdict);
    }
    Ok(FreezeReport {
        phase: phase.to_string(),
        verdicts,
    })
}

pub fn snapshot(store: &ParamStore) -> BTreeMap<String, u64> {
    store.all_group_checksums().into_iter().collect()
}

pub fn write_snapshot(path: &Path, snap: &BTreeMap<String, u64>) -> Result<()> {
    let json = serde_json::to_string_pretty(snap)
        .map_err(|e| Error::Runtime(format!("snapshot serialize: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_snapshot(path: &Path) -> Result<BTreeMap<String, u64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::validation(format!("snapshot parse: {e}")))
}
