//! Field-level access logging for label-leak audits.
//!
//! Training code reads sample fields only through guarded accessors that
//! record (phase, sample, field) events into a shared log. The audit then
//! proves statements like "no training phase ever read a target-pool label".

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum Field {
    Fmri,
    Video,
    ClassId,
    Caption,
}

impl std::fmt::Display for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Field::Fmri => "fmri",
            Field::Video => "video",
            Field::ClassId => "class_id",
            Field::Caption => "caption",
        };
        f.write_str(s)
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct AccessEvent {
    pub phase: String,
    pub sample_id: u32,
    pub field: Field,
}

/// Shared, deduplicating access log. Cloning produces a handle onto the same
/// underlying log; `scoped` relabels the phase for a sub-section of work.
#[derive(Clone)]
pub struct AccessLog {
    events: Arc<Mutex<BTreeSet<AccessEvent>>>,
    phase: String,
}

impl AccessLog {
    pub fn new(phase: &str) -> Self {
        AccessLog {
            events: Arc::new(Mutex::new(BTreeSet::new())),
            phase: phase.to_string(),
        }
    }

    pub fn scoped(&self, phase: &str) -> AccessLog {
        AccessLog {
            events: Arc::clone(&self.events),
            phase: phase.to_string(),
        }
    }

    pub fn phase(&self) -> &str {
        &self.phase
    }

    pub fn record(&self, sample_id: u32, field: Field) {
        self.events.lock().unwrap().insert(AccessEvent {
            phase: self.phase.clone(),
            sample_id,
            field,
        });
    }

    /// Sorted snapshot of all recorded events.
    pub fn events(&self) -> Vec<AccessEvent> {
        self.events.lock().unwrap().iter().cloned().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.events()).expect("access log serializes")
    }

    pub fn from_json(s: &str) -> crate::Result<Vec<AccessEvent>> {
        serde_json::from_str(s)
            .map_err(|e| crate::Error::validation(format!("access log parse: {e}")))
    }
}

/// One audit rule: in any of `phases`, reading `field` of a sample in
/// `sample_ids` is a violation.
pub struct LeakRule {
    pub name: String,
    pub phases: Vec<String>,
    pub sample_ids: BTreeSet<u32>,
    pub fields: Vec<Field>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LeakFinding {
    pub rule: String,
    pub event: AccessEvent,
}

/// Returns every event that violates a rule; empty means the audit passes.
pub fn audit_access(events: &[AccessEvent], rules: &[LeakRule]) -> Vec<LeakFinding> {
    let mut findings = Vec::new();
    for rule in rules {
        for ev in events {
            if rule.phases.iter().any(|p| p == &ev.phase)
                && rule.sample_ids.contains(&ev.sample_id)
                && rule.fields.contains(&ev.field)
            {
                findings.push(LeakFinding {
                    rule: rule.name.clone(),
                    event: ev.clone(),
                });
            }
        }
    }
    findings
}
