//! Synthetic paired fMRI/video/caption generator.
//!
//! Every class owns a random spatial activation signature (coarse grid
//! upsampled to the full volume) and a temporal envelope; every subject owns a
//! fixed affine gain/offset and a small circular spatial shift (the domain
//! gap); every item draws a shared amplitude latent that modulates both the
//! volume and the video so retrieval carries item-level signal, plus i.i.d.
//! noise.

use crate::data::{Dataset, DatasetMeta, Sample, CANONICAL_INSTRUCTION};
use crate::error::{Error, Result};
use crate::numerics::{SeedRng, Tensor};

/// Action vocabulary for caption templates; class c uses entry c.
pub const ACTIONS: [&str; 12] = [
    "playing squash",
    "riding a horse",
    "playing the piano",
    "dancing in a studio",
    "swimming in a pool",
    "cooking a meal",
    "climbing a wall",
    "lifting weights",
    "throwing a ball",
    "painting a picture",
    "walking a dog",
    "jumping rope",
];

pub fn caption_for_class(class_id: u32) -> Result<String> {
    let action = ACTIONS
        .get(class_id as usize)
        .ok_or_else(|| Error::validation(format!("class {class_id} exceeds template list")))?;
    Ok(format!("In the video, a person is {action}."))
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub samples_per_subject: usize,
    pub n_classes: usize,
    pub grid: [usize; 3],
    pub t_frames: usize,
    pub f_frames: usize,
    pub frame_size: usize,
    pub noise_sigma: f64,
    /// Half-width of the per-item amplitude latent u ~ U(1-j, 1+j).
    pub item_jitter: f64,
    /// Subject gain drawn from 1 ± subject_gain.
    pub subject_gain: f64,
    /// Subject offset drawn from ± subject_offset.
    pub subject_offset: f64,
    /// Maximum circular voxel shift per axis.
    pub subject_shift_max: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
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
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::validation("need at least 2 classes"));
        }
        if self.n_classes > ACTIONS.len() {
            return Err(Error::validation(format!(
                "{} classes exceed the {}-entry caption template list",
                self.n_classes,
                ACTIONS.len()
            )));
        }
        if self.n_subjects < 2 {
            return Err(Error::validation("need at least 2 subjects"));
        }
        if self.grid.iter().any(|&d| d < 8) {
            return Err(Error::validation(format!(
                "grid dims {:?} must each be >= 8",
                self.grid
            )));
        }
        if self.t_frames < 1 || self.f_frames < 1 || self.frame_size < 8 {
            return Err(Error::validation("degenerate temporal/frame config"));
        }
        if self.noise_sigma < 0.0 || self.item_jitter < 0.0 {
            return Err(Error::validation("negative noise amplitude"));
        }
        Ok(())
    }

    fn root_rng(&self) -> SeedRng {
        SeedRng::new(self.seed).derive("synth")
    }
}

const COARSE: usize = 4;

fn upsample3(coarse: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let [x, y, z] = dims;
    let mut out = vec![0.0; x * y * z];
    for ix in 0..x {
        let cx = ix * COARSE / x;
        for iy in 0..y {
            let cy = iy * COARSE / y;
            for iz in 0..z {
                let cz = iz * COARSE / z;
                out[(ix * y + iy) * z + iz] = coarse[(cx * COARSE + cy) * COARSE + cz];
            }
        }
    }
    out
}

fn upsample2(coarse: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let ci = i * COARSE / h;
        for j in 0..w {
            let cj = j * COARSE / w;
            out[i * w + j] = coarse[ci * COARSE + cj];
        }
    }
    out
}

/// Spatial signature of one class, shape [X, Y, Z]. Oracle for probe tests.
pub fn class_signature(cfg: &SynthConfig, class_id: u32) -> Tensor {
    let mut rng = cfg.root_rng().derive(&format!("class_sig/{class_id}"));
    let coarse: Vec<f64> = (0..COARSE * COARSE * COARSE).map(|_| rng.normal()).collect();
    Tensor::from_vec(&cfg.grid, upsample3(&coarse, cfg.grid)).expect("signature shape")
}

/// Temporal envelope of one class, length T.
pub fn class_temporal(cfg: &SynthConfig, class_id: u32) -> Vec<f64> {
    let mut rng = cfg.root_rng().derive(&format!("class_tw/{class_id}"));
    (0..cfg.t_frames).map(|_| rng.uniform_in(0.6, 1.4)).collect()
}

fn video_signature(cfg: &SynthConfig, class_id: u32) -> Vec<f64> {
    let mut rng = cfg.root_rng().derive(&format!("video_sig/{class_id}"));
    let coarse: Vec<f64> = (0..COARSE * COARSE).map(|_| rng.normal()).collect();
    upsample2(&coarse, cfg.frame_size, cfg.frame_size)
}

fn video_temporal(cfg: &SynthConfig, class_id: u32) -> Vec<f64> {
    let mut rng = cfg.root_rng().derive(&format!("video_tw/{class_id}"));
    (0..cfg.f_frames).map(|_| rng.uniform_in(0.6, 1.4)).collect()
}

/// Per-subject nuisance: (gain, offset, circular shift per axis).
pub fn subject_nuisance(cfg: &SynthConfig, subject: u32) -> (f64, f64, [i64; 3]) {
    let mut rng = cfg.root_rng().derive(&format!("subject/{subject}"));
    let gain = rng.uniform_in(1.0 - cfg.subject_gain, 1.0 + cfg.subject_gain);
    let offset = rng.uniform_in(-cfg.subject_offset, cfg.subject_offset);
    let shift = if cfg.subject_shift_max == 0 {
        [0, 0, 0]
    } else {
        let m = cfg.subject_shift_max as i64;
        [
            rng.uniform_in(-(m as f64), m as f64 + 1.0).floor() as i64,
            rng.uniform_in(-(m as f64), m as f64 + 1.0).floor() as i64,
            rng.uniform_in(-(m as f64), m as f64 + 1.0).floor() as i64,
        ]
    };
    (gain, offset, shift)
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;

    let signatures: Vec<Tensor> = (0..cfg.n_classes)
        .map(|c| class_signature(cfg, c as u32))
        .collect();
    let temporals: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|c| class_temporal(cfg, c as u32))
        .collect();
    let vid_sigs: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|c| video_signature(cfg, c as u32))
        .collect();
    let vid_tws: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|c| video_temporal(cfg, c as u32))
        .collect();

    let [gx, gy, gz] = cfg.grid;
    let fs = cfg.frame_size;
    let mut samples = Vec::with_capacity(cfg.n_subjects * cfg.samples_per_subject);
    let mut id: u32 = 0;

    for subject in 0..cfg.n_subjects as u32 {
        let (gain, offset, shift) = subject_nuisance(cfg, subject);
        for k in 0..cfg.samples_per_subject {
            let class_id = (k % cfg.n_classes) as u32;
            let mut rng = cfg.root_rng().derive(&format!("sample/{subject}/{k}"));
            let u = if cfg.item_jitter == 0.0 {
                1.0
            } else {
                rng.uniform_in(1.0 - cfg.item_jitter, 1.0 + cfg.item_jitter)
            };

            let sig = signatures[class_id as usize].data();
            let tw = &temporals[class_id as usize];
            let mut voxels = vec![0.0; cfg.t_frames * gx * gy * gz];
            for t in 0..cfg.t_frames {
                for x in 0..gx {
                    let sx = (x as i64 - shift[0]).rem_euclid(gx as i64) as usize;
                    for y in 0..gy {
                        let sy = (y as i64 - shift[1]).rem_euclid(gy as i64) as usize;
                        for z in 0..gz {
                            let sz = (z as i64 - shift[2]).rem_euclid(gz as i64) as usize;
                            let base = u * tw[t] * sig[(sx * gy + sy) * gz + sz];
                            let noise = if cfg.noise_sigma == 0.0 {
                                0.0
                            } else {
                                cfg.noise_sigma * rng.normal()
                            };
                            voxels[((t * gx + x) * gy + y) * gz + z] =
                                gain * base + offset + noise;
                        }
                    }
                }
            }
            let fmri = Tensor::from_vec(&[cfg.t_frames, gx, gy, gz], voxels)?;

            let vsig = &vid_sigs[class_id as usize];
            let vtw = &vid_tws[class_id as usize];
            let mut pixels = vec![0.0; cfg.f_frames * fs * fs];
            for f in 0..cfg.f_frames {
                for p in 0..fs * fs {
                    let noise = if cfg.noise_sigma == 0.0 {
                        0.0
                    } else {
                        0.5 * cfg.noise_sigma * rng.normal()
                    };
                    pixels[f * fs * fs + p] = u * vtw[f] * vsig[p] + noise;
                }
            }
            let video = Tensor::from_vec(&[cfg.f_frames, fs, fs, 1], pixels)?;

            samples.push(Sample::new(
                id,
                subject,
                class_id,
                fmri,
                video,
                caption_for_class(class_id)?,
                CANONICAL_INSTRUCTION.to_string(),
            ));
            id += 1;
        }
    }

    let meta = DatasetMeta {
        grid: cfg.grid,
        t_frames: cfg.t_frames,
        f_frames: cfg.f_frames,
        frame_h: fs,
        frame_w: fs,
        channels: 1,
        classes: ACTIONS[..cfg.n_classes].iter().map(|s| s.to_string()).collect(),
        subjects: (0..cfg.n_subjects as u32).collect(),
    };
    Dataset::new(meta, samples)
}
