//! Adam with decoupled weight decay, per-group learning rates, and a cosine
//! step-scale schedule.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Groups exempt from weight decay (scalars like the temperature).
    pub no_decay_groups: BTreeSet<String>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            no_decay_groups: BTreeSet::new(),
        }
    }
}

/// Cosine decay from 1 at step 0 toward 0 at `total` steps.
pub fn cosine_scale(step: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

struct Slot {
    m: Tensor,
    v: Tensor,
}

pub struct AdamW {
    pub cfg: AdamConfig,
    /// Base learning rate per parameter group; groups not listed are an error.
    lrs: BTreeMap<String, f64>,
    slots: HashMap<ParamId, Slot>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, lrs: BTreeMap<String, f64>) -> Self {
        AdamW {
            cfg,
            lrs,
            slots: HashMap::new(),
            t: 0,
        }
    }

    pub fn uniform(cfg: AdamConfig, groups: &BTreeSet<String>, lr: f64) -> Self {
        let lrs = groups.iter().map(|g| (g.clone(), lr)).collect();
        Self::new(cfg, lrs)
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over the given gradients. `lr_scale` multiplies every base
    /// rate (the schedule); decay is decoupled and scaled the same way.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: Vec<(ParamId, Tensor)>,
        lr_scale: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (id, grad) in grads {
            let group = store.group(id).to_string();
            let base = *self.lrs.get(&group).ok_or_else(|| {
                Error::validation(format!("no learning rate declared for group {group}"))
            })?;
            let lr = base * lr_scale;
            let shape = store.get(id).shape().to_vec();
            if grad.shape() != shape.as_slice() {
                return Err(Error::shape(
                    format!("{shape:?} gradient for {}", store.name(id)),
                    format!("{:?}", grad.shape()),
                ));
            }
            let slot = self.slots.entry(id).or_insert_with(|| Slot {
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
            });
            let decay = if self.cfg.no_decay_groups.contains(&group) {
                0.0
            } else {
                self.cfg.weight_decay
            };
            let mut theta = store.get(id).clone();
            {
                let m = slot.m.data_mut();
                let v = slot.v.data_mut();
                let th = theta.data_mut();
                let g = grad.data();
                for i in 0..g.len() {
                    m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                    v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    th[i] -= lr * (mh / (vh.sqrt() + self.cfg.eps) + decay * th[i]);
                }
            }
            store.set(id, theta)?;
        }
        Ok(())
    }

    /// (param name, m, v) triples in stable order, for checkpointing.
    pub fn export_state(&self, store: &ParamStore) -> (u64, Vec<(String, Tensor, Tensor)>) {
        let mut entries: Vec<(String, Tensor, Tensor)> = self
            .slots
            .iter()
            .map(|(&id, s)| (store.name(id).to_string(), s.m.clone(), s.v.clone()))
            .collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        (self.t, entries)
    }

    pub fn import_state(
        &mut self,
        store: &ParamStore,
        t: u64,
        entries: Vec<(String, Tensor, Tensor)>,
    ) -> Result<()> {
        self.t = t;
        self.slots.clear();
        for (name, m, v) in entries {
            let id = store.lookup(&name)?;
            if m.shape() != store.get(id).shape() || v.shape() != m.shape() {
                return Err(Error::shape(
                    format!("{:?} moments for {name}", store.get(id).shape()),
                    format!("{:?} / {:?}", m.shape(), v.shape()),
                ));
            }
            self.slots.insert(id, Slot { m, v });
        }
        Ok(())
    }
}
