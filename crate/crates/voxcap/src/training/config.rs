//! Run configuration: one TOML tree covering data synthesis, model sizes, and
//! every training phase, with dotted-key overrides and a stable hash.

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::numerics::fnv1a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub da: DaSettings,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            da: DaSettings::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_subjects: usize,
    pub samples_per_subject: usize,
    pub n_classes: usize,
    pub grid: [usize; 3],
    pub t_frames: usize,
    pub f_frames: usize,
    pub frame_size: usize,
    pub noise_sigma: f64,
    pub item_jitter: f64,
    pub subject_gain: f64,
    pub subject_offset: f64,
    pub subject_shift_max: usize,
    pub target_subjects: Vec<u32>,
    pub target_adaptation_fraction: f64,
    pub source_val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_subjects: 4,
            samples_per_subject: 80,
            n_classes: 8,
            grid: [16, 16, 16],
            t_frames: 4,
            f_frames: 4,
            frame_size: 32,
            noise_sigma: 0.1,
            item_jitter: 0.2,
            subject_gain: 0.3,
            subject_offset: 0.1,
            subject_shift_max: 1,
            target_subjects: vec![3],
            target_adaptation_fraction: 0.5,
            source_val_fraction: 0.2,
        }
    }
}

impl DataConfig {
    pub fn synth(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_subjects: self.n_subjects,
            samples_per_subject: self.samples_per_subject,
            n_classes: self.n_classes,
            grid: self.grid,
            t_frames: self.t_frames,
            f_frames: self.f_frames,
            frame_size: self.frame_size,
            noise_sigma: self.noise_sigma,
            item_jitter: self.item_jitter,
            subject_gain: self.subject_gain,
            subject_offset: self.subject_offset,
            subject_shift_max: self.subject_shift_max,
            seed,
        }
    }

    pub fn source_subjects(&self) -> Vec<u32> {
        (0..self.n_subjects as u32)
            .filter(|s| !self.target_subjects.contains(s))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub fmri_depth: usize,
    pub vit_depth: usize,
    pub qformer_depth: usize,
    pub decoder_depth: usize,
    pub n_queries: usize,
    pub patch: usize,
    pub tok_kernel: [usize; 3],
    pub tok_stride: [usize; 3],
    pub tok_channels: usize,
    pub adaptor_rank: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            heads: 4,
            mlp_ratio: 2.0,
            fmri_depth: 4,
            vit_depth: 4,
            qformer_depth: 2,
            decoder_depth: 4,
            n_queries: 32,
            patch: 8,
            tok_kernel: [4, 4, 8],
            tok_stride: [4, 4, 8],
            tok_channels: 64,
            adaptor_rank: 8,
            max_len: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mae_steps: usize,
    pub mae_batch: usize,
    pub mask_ratio: f64,
    pub warmup_steps: usize,
    pub warmup_batch: usize,
    pub lm_steps: usize,
    pub lm_batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mae_steps: 300,
            mae_batch: 8,
            mask_ratio: 0.75,
            warmup_steps: 150,
            warmup_batch: 8,
            lm_steps: 400,
            lm_batch: 8,
            lr: 1e-3,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub alpha: f64,
    pub lr_adaptors: f64,
    pub lr_tokenizer: f64,
    pub weight_decay: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    /// Steps between checkpoint writes.
    pub checkpoint_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            steps: 1000,
            batch_size: 16,
            beta: 0.5,
            alpha: 0.5,
            lr_adaptors: 1e-3,
            lr_tokenizer: 1e-4,
            weight_decay: 0.01,
            tau_init: 0.05,
            tau_min: 0.01,
            tau_max: 0.5,
            checkpoint_every: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub steps: usize,
    pub source_batch: usize,
    pub target_batch: usize,
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Caption failures tolerated per window before the run aborts.
    pub oracle_window: usize,
    pub oracle_max_failure_rate: f64,
    /// Steps between checkpoint writes.
    pub checkpoint_every: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            steps: 600,
            source_batch: 8,
            target_batch: 8,
            lambda: 0.5,
            lr: 1e-3,
            weight_decay: 0.01,
            oracle_window: 100,
            oracle_max_failure_rate: 0.1,
            checkpoint_every: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaSettings {
    pub tau_nc: f64,
    /// Entropy threshold rho; absent means log(C)/2 for C dataset classes.
    pub rho: Option<f64>,
    pub margin: f64,
}

impl Default for DaSettings {
    fn default() -> Self {
        DaSettings {
            tau_nc: 0.5,
            rho: None,
            margin: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub retrieval_batch: usize,
    pub max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            retrieval_batch: 16,
            max_new_tokens: 24,
        }
    }
}

impl RunConfig {
    /// Parses TOML text and applies dotted-key overrides, rejecting unknown keys.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse: {e}")))?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full resolved snapshot, canonical for hashing and run-dir comparison.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth(self.seed).validate()?;
        let d = &self.data;
        if d.target_subjects.is_empty() {
            return Err(Error::Config("no target subjects declared".into()));
        }
        for &t in &d.target_subjects {
            if t as usize >= d.n_subjects {
                return Err(Error::Config(format!(
                    "target subject {t} outside 0..{}",
                    d.n_subjects
                )));
            }
        }
        if d.source_subjects().is_empty() {
            return Err(Error::Config("every subject assigned to the target set".into()));
        }
        for (name, v) in [
            ("data.target_adaptation_fraction", d.target_adaptation_fraction),
            ("data.source_val_fraction", d.source_val_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} outside (0,1)")));
            }
        }
        let m = &self.model;
        if m.d == 0 || m.heads == 0 || m.d % m.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} not divisible by {} heads",
                m.d, m.heads
            )));
        }
        if m.n_queries == 0 || m.adaptor_rank == 0 || m.max_len == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        for (name, v) in [
            ("stage1.beta", self.stage1.beta),
            ("stage1.alpha", self.stage1.alpha),
            ("stage2.lambda", self.stage2.lambda),
            ("pretrain.mask_ratio", self.pretrain.mask_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0,1]")));
            }
        }
        let s1 = &self.stage1;
        if !(s1.tau_min > 0.0 && s1.tau_min <= s1.tau_init && s1.tau_init <= s1.tau_max) {
            return Err(Error::Config(format!(
                "tau bounds must satisfy 0 < min <= init <= max, got {} / {} / {}",
                s1.tau_min, s1.tau_init, s1.tau_max
            )));
        }
        if self.stage1.batch_size < 2 {
            return Err(Error::Config("stage1.batch_size must be >= 2".into()));
        }
        if self.stage2.source_batch == 0 || self.stage2.target_batch == 0 {
            return Err(Error::Config("stage2 batch sizes must be >= 1".into()));
        }
        if self.stage2.oracle_window == 0 {
            return Err(Error::Config("stage2.oracle_window must be >= 1".into()));
        }
        if self.stage1.checkpoint_every == 0 || self.stage2.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        if self.da.tau_nc <= 0.0 || self.da.margin < 0.0 {
            return Err(Error::Config("da.tau_nc must be > 0 and da.margin >= 0".into()));
        }
        if let Some(rho) = self.da.rho {
            if rho <= 0.0 {
                return Err(Error::Config(format!("da.rho = {rho} must be > 0")));
            }
        }
        if self.eval.retrieval_batch < 2 {
            return Err(Error::Config("eval.retrieval_batch must be >= 2".into()));
        }
        Ok(())
    }

    /// Effective entropy threshold for the ES loss.
    pub fn rho(&self) -> f64 {
        self.da
            .rho
            .unwrap_or_else(|| (self.data.n_classes as f64).ln() / 2.0)
    }
}

/// Sets `table[a][b][c] = value` for a dotted key "a.b.c". The value text is
/// parsed as TOML; bare words fall back to strings.
fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed override"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override {key}: {part} is not a table"))
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text, &[]).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = RunConfig::from_toml("banana = 3", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("banana"), "{msg}");
        assert!(err.is_validation());

        let err = RunConfig::from_toml("[stage1]\nwat = 1", &[]).unwrap_err();
        assert!(err.to_string().contains("wat"));
    }

    #[test]
    fn overrides_apply_and_commute() {
        let o1 = ("stage1.steps".to_string(), "7".to_string());
        let o2 = ("seed".to_string(), "9".to_string());
        let a = RunConfig::from_toml("", &[o1.clone(), o2.clone()]).unwrap();
        let b = RunConfig::from_toml("", &[o2, o1]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.stage1.steps, 7);
        assert_eq!(a.seed, 9);
        assert_ne!(a.hash(), RunConfig::default().hash());
    }

    #[test]
    fn override_with_unknown_key_fails() {
        let o = ("stage1.nope".to_string(), "1".to_string());
        let err = RunConfig::from_toml("", &[o]).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn bad_values_rejected() {
        let cases = [
            ("stage1.beta", "1.5"),
            ("data.target_adaptation_fraction", "0.0"),
            ("model.heads", "3"),
            ("data.target_subjects", "[9]"),
            ("stage1.tau_min", "0.9"),
        ];
        for (k, v) in cases {
            let o = (k.to_string(), v.to_string());
            assert!(
                RunConfig::from_toml("", &[o]).is_err(),
                "{k}={v} should be rejected"
            );
        }
    }

    #[test]
    fn rho_defaults_to_half_log_classes() {
        let cfg = RunConfig::default();
        assert!((cfg.rho() - (8.0f64).ln() / 2.0).abs() < 1e-12);
        let o = ("da.rho".to_string(), "0.7".to_string());
        let cfg = RunConfig::from_toml("", &[o]).unwrap();
        assert_eq!(cfg.rho(), 0.7);
    }
}
