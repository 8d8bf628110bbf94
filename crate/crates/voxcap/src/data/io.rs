//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.json` plus one binary tensor file per
//! sample field. Tensor files carry a 16-byte little-endian header:
//!
//! ```text
//! bytes 0..4   magic "VXTF"
//! byte  4      dtype code (1 = f64 little-endian)
//! byte  5      rank (1..=4)
//! bytes 6..8   reserved, zero
//! bytes 8..16  four u16 dims; dims past the rank are 1
//! ```
//!
//! followed by the row-major payload.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetMeta, Sample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"VXTF";
pub const DTYPE_F64: u8 = 1;
pub const MAX_RANK: usize = 4;

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    if t.rank() == 0 || t.rank() > MAX_RANK {
        return Err(Error::validation(format!(
            "tensor rank {} outside 1..={MAX_RANK}",
            t.rank()
        )));
    }
    for &d in t.shape() {
        if d == 0 || d > u16::MAX as usize {
            return Err(Error::validation(format!("dimension {d} not storable as u16")));
        }
    }
    let mut header = [0u8; 16];
    header[0..4].copy_from_slice(&MAGIC);
    header[4] = DTYPE_F64;
    header[5] = t.rank() as u8;
    for (i, slot) in header[8..16].chunks_exact_mut(2).enumerate() {
        let d = t.shape().get(i).copied().unwrap_or(1) as u16;
        slot.copy_from_slice(&d.to_le_bytes());
    }
    let mut buf = Vec::with_capacity(16 + t.len() * 8);
    buf.extend_from_slice(&header);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if header[0..4] != MAGIC {
        return Err(Error::validation(format!(
            "{}: bad magic {:?}",
            path.display(),
            &header[0..4]
        )));
    }
    if header[4] != DTYPE_F64 {
        return Err(Error::validation(format!(
            "{}: unsupported dtype code {}",
            path.display(),
            header[4]
        )));
    }
    let rank = header[5] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::validation(format!("{}: bad rank {rank}", path.display())));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = u16::from_le_bytes([header[8 + 2 * i], header[9 + 2 * i]]) as usize;
        if d == 0 {
            return Err(Error::validation(format!("{}: zero dimension", path.display())));
        }
        shape.push(d);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 8];
    f.read_exact(&mut payload).map_err(|e| Error::io(path, e))?;
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::validation(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::from_vec(&shape, data)?;
    t.ensure_finite(&format!("tensor file {}", path.display()))?;
    Ok(t)
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct ManifestRow {
    pub id: u32,
    pub subject: u32,
    pub class: u32,
    pub fmri: String,
    pub video: String,
    pub caption: String,
    pub instruction: String,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct Manifest {
    pub grid: [usize; 3],
    pub t_frames: usize,
    pub f_frames: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
    pub classes: Vec<String>,
    pub subjects: Vec<u32>,
    pub samples: Vec<ManifestRow>,
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(ds.len());
    for s in ds.iter() {
        let raw = s.raw();
        let fmri_rel = format!("fmri/{:05}.vxt", s.id());
        let video_rel = format!("video/{:05}.vxt", s.id());
        write_tensor(&dir.join(&fmri_rel), raw.fmri)?;
        write_tensor(&dir.join(&video_rel), raw.video)?;
        rows.push(ManifestRow {
            id: s.id(),
            subject: s.subject_id(),
            class: raw.class_id,
            fmri: fmri_rel,
            video: video_rel,
            caption: raw.caption.to_string(),
            instruction: s.instruction().to_string(),
        });
    }
    let manifest = Manifest {
        grid: ds.meta.grid,
        t_frames: ds.meta.t_frames,
        f_frames: ds.meta.f_frames,
        frame_h: ds.meta.frame_h,
        frame_w: ds.meta.frame_w,
        channels: ds.meta.channels,
        classes: ds.meta.classes.clone(),
        subjects: ds.meta.subjects.clone(),
        samples: rows,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::validation(format!("manifest serialize: {e}")))?;
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Loads a dataset directory. With `fail_fast` the first bad sample aborts;
/// otherwise bad samples are skipped and reported in the diagnostics list.
pub fn load_dataset(dir: &Path, fail_fast: bool) -> Result<(Dataset, Vec<String>)> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("manifest parse: {e}")))?;

    let meta = DatasetMeta {
        grid: manifest.grid,
        t_frames: manifest.t_frames,
        f_frames: manifest.f_frames,
        frame_h: manifest.frame_h,
        frame_w: manifest.frame_w,
        channels: manifest.channels,
        classes: manifest.classes.clone(),
        subjects: manifest.subjects.clone(),
    };
    let mut diagnostics = Vec::new();
    if manifest.samples.is_empty() {
        diagnostics.push("manifest declares zero samples".to_string());
    }

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for row in &manifest.samples {
        match load_row(dir, &meta, row) {
            Ok(s) => samples.push(s),
            Err(e) => {
                let msg = format!("sample {}: {e}", row.id);
                if fail_fast {
                    return Err(Error::validation(msg));
                }
                diagnostics.push(msg);
            }
        }
    }
    let ds = Dataset::new(meta, samples)?;
    Ok((ds, diagnostics))
}

fn load_row(dir: &Path, meta: &DatasetMeta, row: &ManifestRow) -> Result<Sample> {
    if row.class as usize >= meta.classes.len() {
        return Err(Error::validation(format!(
            "class {} not in declared vocabulary of {}",
            row.class,
            meta.classes.len()
        )));
    }
    let fmri = read_tensor(&resolve(dir, &row.fmri))?;
    if fmri.shape() != meta.fmri_shape() {
        return Err(Error::shape(
            format!("fmri {:?}", meta.fmri_shape()),
            format!("{:?}", fmri.shape()),
        ));
    }
    let video = read_tensor(&resolve(dir, &row.video))?;
    if video.shape() != meta.video_shape() {
        return Err(Error::shape(
            format!("video {:?}", meta.video_shape()),
            format!("{:?}", video.shape()),
        ));
    }
    Ok(Sample::new(
        row.id,
        row.subject,
        row.class,
        fmri,
        video,
        row.caption.clone(),
        row.instruction.clone(),
    ))
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}
