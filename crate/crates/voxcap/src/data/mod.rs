//! Paired fMRI / video / caption samples: synthetic generation, subject-wise
//! splits, disk layout, batching, and access-audited field reads.

pub mod batch;
pub mod hygiene;
pub mod io;
pub mod synth;

pub use batch::BatchStream;
pub use hygiene::{audit_access, AccessEvent, AccessLog, Field, LeakRule};
pub use io::{load_dataset, save_dataset};
pub use synth::{generate_synthetic_dataset, SynthConfig};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::{SeedRng, Tensor};

/// The canonical instruction every dataset ships with.
pub const CANONICAL_INSTRUCTION: &str = "What is the main thing happening in the video?";

/// One paired stimulus window. Fields that could leak stimulus identity are
/// private; training paths read them through the [`AccessLog`]-guarded
/// accessors so the leak audit sees every consumed value.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    id: u32,
    subject_id: u32,
    class_id: u32,
    fmri: Tensor,
    video: Tensor,
    caption: String,
    instruction: String,
}

impl Sample {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u32,
        subject_id: u32,
        class_id: u32,
        fmri: Tensor,
        video: Tensor,
        caption: String,
        instruction: String,
    ) -> Self {
        Sample {
            id,
            subject_id,
            class_id,
            fmri,
            video,
            caption,
            instruction,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn subject_id(&self) -> u32 {
        self.subject_id
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    /// fMRI voxels, shape [T, X, Y, Z].
    pub fn fmri(&self, log: &AccessLog) -> &Tensor {
        log.record(self.id, Field::Fmri);
        &self.fmri
    }

    /// Video frames, shape [F, H, W, C].
    pub fn video(&self, log: &AccessLog) -> &Tensor {
        log.record(self.id, Field::Video);
        &self.video
    }

    pub fn class_id(&self, log: &AccessLog) -> u32 {
        log.record(self.id, Field::ClassId);
        self.class_id
    }

    pub fn caption(&self, log: &AccessLog) -> &str {
        log.record(self.id, Field::Caption);
        &self.caption
    }

    /// Unlogged access for dataset plumbing (serialization, generator tests).
    /// Training code must use the guarded accessors instead.
    pub(crate) fn raw(&self) -> RawSample<'_> {
        RawSample {
            class_id: self.class_id,
            fmri: &self.fmri,
            video: &self.video,
            caption: &self.caption,
        }
    }
}

pub(crate) struct RawSample<'a> {
    pub class_id: u32,
    pub fmri: &'a Tensor,
    pub video: &'a Tensor,
    pub caption: &'a str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub grid: [usize; 3],
    pub t_frames: usize,
    pub f_frames: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
    pub classes: Vec<String>,
    pub subjects: Vec<u32>,
}

impl DatasetMeta {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn fmri_shape(&self) -> [usize; 4] {
        [self.t_frames, self.grid[0], self.grid[1], self.grid[2]]
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [self.f_frames, self.frame_h, self.frame_w, self.channels]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(meta: DatasetMeta, samples: Vec<Sample>) -> Result<Self> {
        let ds = Dataset { meta, samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Sample {
        &self.samples[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter()
    }

    fn validate(&self) -> Result<()> {
        let fshape = self.meta.fmri_shape();
        let vshape = self.meta.video_shape();
        for s in &self.samples {
            if s.fmri.shape() != fshape {
                return Err(Error::shape(
                    format!("fmri {:?} for sample {}", fshape, s.id),
                    format!("{:?}", s.fmri.shape()),
                ));
            }
            if s.video.shape() != vshape {
                return Err(Error::shape(
                    format!("video {:?} for sample {}", vshape, s.id),
                    format!("{:?}", s.video.shape()),
                ));
            }
            if s.class_id as usize >= self.meta.n_classes() {
                return Err(Error::validation(format!(
                    "sample {} has class {} but dataset declares {} classes",
                    s.id,
                    s.class_id,
                    self.meta.n_classes()
                )));
            }
            if !self.meta.subjects.contains(&s.subject_id) {
                return Err(Error::validation(format!(
                    "sample {} has undeclared subject {}",
                    s.id, s.subject_id
                )));
            }
        }
        Ok(())
    }

    /// Indices belonging to one subject, in dataset order.
    pub fn subject_indices(&self, subject: u32) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].subject_id == subject)
            .collect()
    }
}

/// Subject-disjoint source/target assignment plus pool fractions.
#[derive(Clone, Debug)]
pub struct SubjectSplit {
    pub source_subjects: BTreeSet<u32>,
    pub target_subjects: BTreeSet<u32>,
    pub target_adaptation_fraction: f64,
    pub source_val_fraction: f64,
}

impl SubjectSplit {
    pub fn new(
        source: impl IntoIterator<Item = u32>,
        target: impl IntoIterator<Item = u32>,
        target_adaptation_fraction: f64,
        source_val_fraction: f64,
    ) -> Result<Self> {
        let source_subjects: BTreeSet<u32> = source.into_iter().collect();
        let target_subjects: BTreeSet<u32> = target.into_iter().collect();
        if source_subjects.is_empty() || target_subjects.is_empty() {
            return Err(Error::validation("split needs source and target subjects"));
        }
        if !source_subjects.is_disjoint(&target_subjects) {
            return Err(Error::validation("source and target subjects overlap"));
        }
        if !(0.0..1.0).contains(&target_adaptation_fraction) || target_adaptation_fraction <= 0.0 {
            return Err(Error::validation(format!(
                "target_adaptation_fraction {target_adaptation_fraction} outside (0,1)"
            )));
        }
        if !(0.0..1.0).contains(&source_val_fraction) || source_val_fraction <= 0.0 {
            return Err(Error::validation(format!(
                "source_val_fraction {source_val_fraction} outside (0,1)"
            )));
        }
        Ok(SubjectSplit {
            source_subjects,
            target_subjects,
            target_adaptation_fraction,
            source_val_fraction,
        })
    }

    /// Class-stratified pool assignment, deterministic under the given seed.
    pub fn materialize(&self, ds: &Dataset, seed: u64) -> Result<SplitPools> {
        for subj in self.source_subjects.iter().chain(self.target_subjects.iter()) {
            if !ds.meta.subjects.contains(subj) {
                return Err(Error::validation(format!("split names unknown subject {subj}")));
            }
        }
        let mut rng = SeedRng::new(seed).derive("split");
        let c = ds.meta.n_classes();

        let partition = |indices: &[usize], held_fraction: f64, rng: &mut SeedRng| {
            // Stratify by class so every pool covers every class when possible.
            let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); c];
            for &i in indices {
                per_class[ds.get(i).raw().class_id as usize].push(i);
            }
            let mut held = Vec::new();
            let mut rest = Vec::new();
            for mut group in per_class {
                rng.shuffle(&mut group);
                let k = (group.len() as f64 * held_fraction).round() as usize;
                held.extend_from_slice(&group[..k]);
                rest.extend_from_slice(&group[k..]);
            }
            held.sort_unstable();
            rest.sort_unstable();
            (held, rest)
        };

        let source_all: Vec<usize> = (0..ds.len())
            .filter(|&i| self.source_subjects.contains(&ds.get(i).subject_id()))
            .collect();
        let target_all: Vec<usize> = (0..ds.len())
            .filter(|&i| self.target_subjects.contains(&ds.get(i).subject_id()))
            .collect();
        if source_all.is_empty() || target_all.is_empty() {
            return Err(Error::validation("split produced an empty pool"));
        }

        let (source_val, source_train) = partition(&source_all, self.source_val_fraction, &mut rng);
        let (target_adapt, target_test) =
            partition(&target_all, self.target_adaptation_fraction, &mut rng);

        Ok(SplitPools {
            source_train,
            source_val,
            target_adapt,
            target_test,
        })
    }
}

/// Materialized index pools. `source_train` feeds every training phase;
/// `target_adapt` exposes fMRI only; `source_val` and `target_test` are
/// evaluation-only.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPools {
    pub source_train: Vec<usize>,
    pub source_val: Vec<usize>,
    pub target_adapt: Vec<usize>,
    pub target_test: Vec<usize>,
}

impl SplitPools {
    pub fn sample_ids(&self, ds: &Dataset, pool: &[usize]) -> BTreeSet<u32> {
        pool.iter().map(|&i| ds.get(i).id()).collect()
    }

    /// The leak rules every training run is audited against.
    pub fn training_leak_rules(&self, ds: &Dataset) -> Vec<LeakRule> {
        let phases = vec!["pretrain".to_string(), "stage1".to_string(), "stage2".to_string()];
        let all_fields = vec![Field::Fmri, Field::Video, Field::ClassId, Field::Caption];
        vec![
            LeakRule {
                name: "target-adaptation labels/videos unread in training".into(),
                phases: phases.clone(),
                sample_ids: self.sample_ids(ds, &self.target_adapt),
                fields: vec![Field::Video, Field::ClassId, Field::Caption],
            },
            LeakRule {
                name: "target-test pool untouched in training".into(),
                phases: phases.clone(),
                sample_ids: self.sample_ids(ds, &self.target_test),
                fields: all_fields.clone(),
            },
            LeakRule {
                name: "source-val pool untouched in training".into(),
                phases,
                sample_ids: self.sample_ids(ds, &self.source_val),
                fields: all_fields,
            },
        ]
    }
}

/// Candidate instruction prompts for instruction tuning.
#[derive(Clone, Debug)]
pub struct InstructionSet {
    instructions: Vec<String>,
}

impl InstructionSet {
    pub fn new(instructions: Vec<String>) -> Result<Self> {
        if instructions.is_empty() {
            return Err(Error::validation("instruction set is empty"));
        }
        if !instructions.iter().any(|i| i == CANONICAL_INSTRUCTION) {
            return Err(Error::validation(format!(
                "instruction set must contain the canonical prompt {CANONICAL_INSTRUCTION:?}"
            )));
        }
        Ok(InstructionSet { instructions })
    }

    pub fn default_set() -> Self {
        InstructionSet {
            instructions: vec![
                CANONICAL_INSTRUCTION.to_string(),
                "Describe the main action in the video.".to_string(),
                "What is the person in the video doing?".to_string(),
            ],
        }
    }

    pub fn all(&self) -> &[String] {
        &self.instructions
    }

    pub fn draw(&self, rng: &mut SeedRng) -> &str {
        &self.instructions[rng.usize_below(self.instructions.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        let meta = DatasetMeta {
            grid: [2, 2, 2],
            t_frames: 1,
            f_frames: 1,
            frame_h: 2,
            frame_w: 2,
            channels: 1,
            classes: vec!["a".into(), "b".into()],
            subjects: vec![0, 1],
        };
        let samples = (0..8)
            .map(|i| {
                Sample::new(
                    i,
                    (i % 2) as u32,
                    ((i / 2) % 2) as u32,
                    Tensor::zeros(&[1, 2, 2, 2]),
                    Tensor::zeros(&[1, 2, 2, 1]),
                    "cap".into(),
                    CANONICAL_INSTRUCTION.into(),
                )
            })
            .collect();
        Dataset::new(meta, samples).unwrap()
    }

    #[test]
    fn dataset_rejects_bad_class() {
        let ds = tiny_dataset();
        let mut samples: Vec<Sample> = ds.iter().cloned().collect();
        samples[0].class_id = 9;
        assert!(Dataset::new(ds.meta.clone(), samples).is_err());
    }

    #[test]
    fn guarded_reads_are_logged() {
        let ds = tiny_dataset();
        let log = AccessLog::new("stage1");
        let _ = ds.get(0).fmri(&log);
        let _ = ds.get(1).class_id(&log);
        let evs = log.events();
        assert_eq!(evs.len(), 2);
        assert_eq!(evs[0].field, Field::Fmri);
        assert_eq!(evs[1].field, Field::ClassId);
    }

    #[test]
    fn split_pools_are_disjoint_and_exhaustive() {
        let ds = tiny_dataset();
        let split = SubjectSplit::new([0], [1], 0.5, 0.25).unwrap();
        let pools = split.materialize(&ds, 7).unwrap();
        let mut all: Vec<usize> = Vec::new();
        all.extend(&pools.source_train);
        all.extend(&pools.source_val);
        all.extend(&pools.target_adapt);
        all.extend(&pools.target_test);
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        for &i in &pools.source_train {
            assert_eq!(ds.get(i).subject_id(), 0);
        }
        for &i in &pools.target_adapt {
            assert_eq!(ds.get(i).subject_id(), 1);
        }
        assert_eq!(pools, split.materialize(&ds, 7).unwrap());
        assert_ne!(pools, split.materialize(&ds, 8).unwrap());
    }

    #[test]
    fn split_rejects_overlap() {
        assert!(SubjectSplit::new([0, 1], [1], 0.5, 0.2).is_err());
    }

    #[test]
    fn instruction_set_requires_canonical_prompt() {
        assert!(InstructionSet::new(vec!["Describe.".into()]).is_err());
        let set = InstructionSet::default_set();
        assert!(set.all().iter().any(|i| i == CANONICAL_INSTRUCTION));
        let mut rng = SeedRng::new(3);
        for _ in 0..10 {
            let drawn = set.draw(&mut rng);
            assert!(set.all().iter().any(|i| i == drawn));
        }
    }
}
