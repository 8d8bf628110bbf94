//! Single-file checkpoint container: a JSON header describing parameters,
//! optimizer moments, and the memory pool, followed by little-endian f64
//! blobs. Round-trips are bit-exact, so reloaded models reproduce forward
//! passes and resumed runs reproduce training curves.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain_adaptation::MemoryPool;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::training::optimizer::AdamW;
use crate::training::pipeline::{Pipeline, GROUP_DA_HEAD};

pub const MAGIC: [u8; 4] = *b"VXCP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    t: u64,
    entries: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct PoolHeader {
    ids: Vec<u32>,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    phase: String,
    step: u64,
    config_hash: u64,
    params: Vec<ParamEntry>,
    opt: Option<OptHeader>,
    pool: Option<PoolHeader>,
}

/// In-memory checkpoint contents.
pub struct Checkpoint {
    pub phase: String,
    pub step: u64,
    pub config_hash: u64,
    pub params: Vec<(String, String, Tensor)>,
    pub opt: Option<(u64, Vec<(String, Tensor, Tensor)>)>,
    pub pool: Option<(Vec<u32>, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of a pipeline plus optional optimizer and pool state.
    pub fn capture(
        phase: &str,
        step: u64,
        config_hash: u64,
        pipeline: &Pipeline,
        opt: Option<&AdamW>,
        pool: Option<&MemoryPool>,
    ) -> Checkpoint {
        let store = &pipeline.store;
        let params = store
            .ids()
            .map(|id| {
                (
                    store.name(id).to_string(),
                    store.group(id).to_string(),
                    store.get(id).clone(),
                )
            })
            .collect();
        Checkpoint {
            phase: phase.to_string(),
            step,
            config_hash,
            params,
            opt: opt.map(|o| o.export_state(store)),
            pool: pool.map(|p| (p.ids().to_vec(), p.features().clone())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            phase: self.phase.clone(),
            step: self.step,
            config_hash: self.config_hash,
            params: self
                .params
                .iter()
                .map(|(name, group, t)| ParamEntry {
                    name: name.clone(),
                    group: group.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            opt: self.opt.as_ref().map(|(t, entries)| OptHeader {
                t: *t,
                entries: entries
                    .iter()
                    .map(|(name, m, _)| ParamEntry {
                        name: name.clone(),
                        group: String::new(),
                        shape: m.shape().to_vec(),
                    })
                    .collect(),
            }),
            pool: self.pool.as_ref().map(|(ids, feats)| PoolHeader {
                ids: ids.clone(),
                width: feats.dim(1),
            }),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Runtime(format!("checkpoint header: {e}")))?;

        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let werr = |e| Error::io(path, e);
        w.write_all(&MAGIC).map_err(werr)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(werr)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(werr)?;
        w.write_all(&header_json).map_err(werr)?;
        let mut write_blob = |t: &Tensor| -> Result<()> {
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
            Ok(())
        };
        for (_, _, t) in &self.params {
            write_blob(t)?;
        }
        if let Some((_, entries)) = &self.opt {
            for (_, m, v) in entries {
                write_blob(m)?;
                write_blob(v)?;
            }
        }
        if let Some((_, feats)) = &self.pool {
            write_blob(feats)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let rerr = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(rerr)?;
        if magic != MAGIC {
            return Err(Error::validation(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4).map_err(rerr)?;
        let version = u32::from_le_bytes(buf4);
        if version != VERSION {
            return Err(Error::validation(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8).map_err(rerr)?;
        let header_len = u64::from_le_bytes(buf8) as usize;
        let mut header_json = vec![0u8; header_len];
        r.read_exact(&mut header_json).map_err(rerr)?;
        let header: Header = serde_json::from_slice(&header_json)
            .map_err(|e| Error::validation(format!("checkpoint header parse: {e}")))?;

        let mut read_blob = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
                data.push(f64::from_le_bytes(b));
            }
            Tensor::from_vec(shape, data)
        };
        let mut params = Vec::with_capacity(header.params.len());
        for e in &header.params {
            params.push((e.name.clone(), e.group.clone(), read_blob(&e.shape)?));
        }
        let opt = match &header.opt {
            Some(o) => {
                let mut entries = Vec::with_capacity(o.entries.len());
                for e in &o.entries {
                    let m = read_blob(&e.shape)?;
                    let v = read_blob(&e.shape)?;
                    entries.push((e.name.clone(), m, v));
                }
                Some((o.t, entries))
            }
            None => None,
        };
        let pool = match &header.pool {
            Some(p) => {
                let feats = read_blob(&[p.ids.len(), p.width])?;
                Some((p.ids.clone(), feats))
            }
            None => None,
        };
        Ok(Checkpoint {
            phase: header.phase,
            step: header.step,
            config_hash: header.config_hash,
            params,
            opt,
            pool,
        })
    }

    /// Installs the stored parameters into a freshly initialized pipeline.
    /// Every architecture parameter must be covered; a stored
    /// domain-adaptation head is created on the fly.
    pub fn install(&self, pipeline: &mut Pipeline) -> Result<()> {
        let mut seen = 0usize;
        for (name, group, tensor) in &self.params {
            if group == GROUP_DA_HEAD {
                continue;
            }
            let id = pipeline.store.lookup(name).map_err(|_| {
                Error::validation(format!(
                    "checkpoint parameter {name} unknown to this architecture"
                ))
            })?;
            pipeline.store.set(id, tensor.clone())?;
            seen += 1;
        }
        let expected = pipeline.store.len();
        if seen != expected {
            return Err(Error::validation(format!(
                "checkpoint covers {seen} of {expected} architecture parameters"
            )));
        }
        for (name, group, tensor) in &self.params {
            if group == GROUP_DA_HEAD {
                if name != "da.prototypes" {
                    return Err(Error::validation(format!(
                        "unexpected domain-adaptation parameter {name}"
                    )));
                }
                pipeline.init_da_head(tensor)?;
            }
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, store: &ParamStore, opt: &mut AdamW) -> Result<()> {
        match &self.opt {
            Some((t, entries)) => opt.import_state(store, *t, entries.clone()),
            None => Err(Error::validation("checkpoint has no optimizer state")),
        }
    }

    pub fn restore_pool(&self) -> Result<Option<MemoryPool>> {
        match &self.pool {
            Some((ids, feats)) => Ok(Some(MemoryPool::from_features(ids.clone(), feats.clone())?)),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AccessLog;
    use crate::training::pipeline::test_support::tiny_world;
    use crate::training::pipeline::TrainPhase;
    use crate::training::optimizer::{AdamConfig, AdamW};

    #[test]
    fn round_trip_is_bit_exact() {
        let (cfg, ds, mut p) = tiny_world();
        let log = AccessLog::new("test");
        let probe = ds.get(0).fmri(&log).clone();
        let before = p.fmri_media_tensor(&probe).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.vxcp");
        let ck = Checkpoint::capture("stage1", 17, cfg.hash(), &p, None, None);
        ck.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.phase, "stage1");
        assert_eq!(loaded.config_hash, cfg.hash());

        // Perturb, reinstall, and check the probe forward is restored exactly.
        let tau = p.log_inv_tau;
        p.store
            .set(tau, crate::numerics::Tensor::from_vec(&[1], vec![9.0]).unwrap())
            .unwrap();
        loaded.install(&mut p).unwrap();
        let after = p.fmri_media_tensor(&probe).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn optimizer_and_pool_round_trip() {
        let (cfg, ds, mut p) = tiny_world();
        let groups = TrainPhase::Stage1.trainable();
        let mut opt = AdamW::uniform(AdamConfig::default(), &groups, 1e-3);
        // One real update so moments are nonzero.
        let id = p.log_inv_tau;
        opt.step(
            &mut p.store,
            vec![(id, crate::numerics::Tensor::from_vec(&[1], vec![0.3]).unwrap())],
            1.0,
        )
        .unwrap();

        let feats = crate::numerics::Tensor::from_vec(
            &[2, 32],
            (0..64).map(|i| (i as f64) / 64.0 + 0.1).collect(),
        )
        .unwrap();
        let pool = MemoryPool::from_features(vec![5, 9], feats).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.vxcp");
        Checkpoint::capture("stage2", 3, cfg.hash(), &p, Some(&opt), Some(&pool))
            .save(&path)
            .unwrap();
        let loaded = Checkpoint::load(&path).unwrap();

        let mut opt2 = AdamW::uniform(AdamConfig::default(), &groups, 1e-3);
        loaded.restore_optimizer(&p.store, &mut opt2).unwrap();
        assert_eq!(opt2.steps_taken(), 1);
        let (_, a) = opt.export_state(&p.store);
        let (_, b) = opt2.export_state(&p.store);
        assert_eq!(a.len(), b.len());
        for ((na, ma, va), (nb, mb, vb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ma.data(), mb.data());
            assert_eq!(va.data(), vb.data());
        }

        let pool2 = loaded.restore_pool().unwrap().unwrap();
        assert_eq!(pool2.ids(), pool.ids());
        assert_eq!(pool2.features().data(), pool.features().data());
        assert_eq!(pool2.checksum(), pool.checksum());
        let _ = ds;
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vxcp");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        let err = match Checkpoint::load(&path) {
            Ok(_) => panic!("corrupt file accepted"),
            Err(e) => e,
        };
        assert!(err.to_string().contains("magic"), "{err}");
        assert!(err.is_validation());

        let missing = dir.path().join("absent.vxcp");
        assert!(Checkpoint::load(&missing).is_err());
    }

    #[test]
    fn install_rejects_foreign_parameters() {
        let (cfg, ds, mut p) = tiny_world();
        let mut ck = Checkpoint::capture("stage1", 0, cfg.hash(), &p, None, None);
        ck.params.push((
            "mystery.w".into(),
            "mystery".into(),
            crate::numerics::Tensor::zeros(&[2]),
        ));
        let err = ck.install(&mut p).unwrap_err();
        assert!(err.to_string().contains("mystery.w"));

        let mut ck = Checkpoint::capture("stage1", 0, cfg.hash(), &p, None, None);
        ck.params.pop();
        let err = ck.install(&mut p).unwrap_err();
        assert!(err.to_string().contains("covers"));
        let _ = ds;
    }

    #[test]
    fn da_head_restores_through_install() {
        let (cfg, ds, mut p) = tiny_world();
        let log = AccessLog::new("test");
        let pool: Vec<usize> = (0..8).collect();
        let cents = p.class_centroids(&ds, &pool, &log).unwrap();
        p.init_da_head(&cents).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.vxcp");
        Checkpoint::capture("stage2", 1, cfg.hash(), &p, None, None)
            .save(&path)
            .unwrap();

        let mut fresh = Pipeline::init(&cfg, &ds.meta).unwrap();
        assert!(fresh.da_head.is_none());
        Checkpoint::load(&path).unwrap().install(&mut fresh).unwrap();
        let head = fresh.da_head.as_ref().unwrap();
        assert_eq!(head.n_classes, 2);
        assert_eq!(
            fresh.store.get(head.weights).data(),
            p.store.get(p.da_head.as_ref().unwrap().weights).data()
        );
    }
}
