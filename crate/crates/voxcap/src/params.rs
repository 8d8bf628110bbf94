//! Central registry of named model parameters.
//!
//! Every weight tensor lives here, addressed by a stable name and grouped into
//! named parameter groups ("tokenizer", "fmri_adaptors", ...). Training stages
//! declare which groups are trainable; the optimizer, checkpointing, and the
//! freeze audit all operate on this registry rather than on scattered model
//! structs.

use std::collections::BTreeSet;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::{checksum_tensor, SeedRng, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(usize);

#[derive(Clone)]
struct Param {
    name: String,
    group: String,
    tensor: Tensor,
}

#[derive(Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, group: &str, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::validation(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group: group.to_string(),
            tensor,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        if tensor.shape() != self.params[id.0].tensor.shape() {
            return Err(Error::shape(
                format!("{:?} for {}", self.params[id.0].tensor.shape(), self.params[id.0].name),
                format!("{:?}", tensor.shape()),
            ));
        }
        self.params[id.0].tensor = tensor;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> &str {
        &self.params[id.0].group
    }

    pub fn lookup(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::validation(format!("unknown parameter {name}")))
    }

    /// All parameter ids in insertion order (stable across identically built models).
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn group_names(&self) -> BTreeSet<String> {
        self.params.iter().map(|p| p.group.clone()).collect()
    }

    pub fn ids_in_group(&self, group: &str) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params[i].group == group)
            .map(ParamId)
            .collect()
    }

    pub fn count_in_groups(&self, groups: &BTreeSet<String>) -> usize {
        self.params
            .iter()
            .filter(|p| groups.contains(&p.group))
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Order-sensitive checksum of one group's tensors, for freeze audits.
    pub fn group_checksum(&self, group: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in self.params.iter().filter(|p| p.group == group) {
            h ^= checksum_tensor(&p.tensor);
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn all_group_checksums(&self) -> Vec<(String, u64)> {
        self.group_names()
            .into_iter()
            .map(|g| {
                let c = self.group_checksum(&g);
                (g, c)
            })
            .collect()
    }

    /// Gaussian init scaled by `std`.
    pub fn init_normal(
        &mut self,
        group: &str,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut SeedRng,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.normal() * std).collect();
        self.insert(group, name, Tensor::from_vec(shape, data)?)
    }

    pub fn init_zeros(&mut self, group: &str, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(group, name, Tensor::zeros(shape))
    }

    pub fn init_full(&mut self, group: &str, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.insert(group, name, Tensor::full(shape, v))
    }
}

/// Binds store parameters into one graph as leaves, caching node ids so a
/// parameter used twice in a forward pass is a single leaf (gradients
/// accumulate onto it).
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable_groups: &'a BTreeSet<String>,
    bound: HashMap<ParamId, NodeId>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable_groups: &'a BTreeSet<String>) -> Self {
        Binder {
            store,
            trainable_groups,
            bound: HashMap::new(),
        }
    }

    pub fn node(&mut self, g: &mut Graph, id: ParamId) -> NodeId {
        if let Some(&n) = self.bound.get(&id) {
            return n;
        }
        let requires = self.trainable_groups.contains(self.store.group(id));
        let n = g.leaf(self.store.get(id).clone(), requires);
        self.bound.insert(id, n);
        n
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Drains accumulated gradients for every bound trainable parameter.
    pub fn collect_grads(
        &self,
        grads: &mut crate::numerics::graph::GradStore,
    ) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for (&pid, &nid) in &self.bound {
            if let Some(gt) = grads.take(nid) {
                out.push((pid, gt));
            }
        }
        out.sort_by_key(|(pid, _)| pid.0);
        out
    }
}

/// Accumulates parameter gradients across multiple graphs within one step.
#[derive(Default)]
pub struct GradAccumulator {
    grads: HashMap<ParamId, Tensor>,
}

impl GradAccumulator {
    pub fn new() -> Self {
        GradAccumulator::default()
    }

    pub fn add(&mut self, id: ParamId, g: Tensor) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.axpy(&g, 1.0),
            None => {
                self.grads.insert(id, g);
            }
        }
    }

    pub fn add_all(&mut self, pairs: Vec<(ParamId, Tensor)>) {
        for (id, g) in pairs {
            self.add(id, g);
        }
    }

    pub fn scale_all(&mut self, k: f64) {
        for g in self.grads.values_mut() {
            *g = g.scale(k);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Drains in stable id order.
    pub fn drain_sorted(&mut self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self.grads.drain().collect();
        out.sort_by_key(|(pid, _)| pid.0);
        out
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (id, g) in &self.grads {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient for parameter id {:?}",
                    id.0
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_store() -> (ParamStore, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let mut rng = SeedRng::new(1);
        let a = s.init_normal("enc", "enc.w", &[3, 3], 0.1, &mut rng).unwrap();
        let b = s.init_zeros("adapt", "adapt.up", &[3, 3]).unwrap();
        (s, a, b)
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut s, _, _) = demo_store();
        assert!(s.insert("enc", "enc.w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn group_checksum_tracks_changes() {
        let (mut s, a, _) = demo_store();
        let before = s.group_checksum("enc");
        assert_eq!(before, s.group_checksum("enc"));
        let mut t = s.get(a).clone();
        t.data_mut()[0] += 1.0;
        s.set(a, t).unwrap();
        assert_ne!(before, s.group_checksum("enc"));
    }

    #[test]
    fn set_rejects_shape_change() {
        let (mut s, a, _) = demo_store();
        assert!(s.set(a, Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn binder_caches_and_marks_trainable() {
        let (s, a, b) = demo_store();
        let trainable: BTreeSet<String> = ["adapt".to_string()].into_iter().collect();
        let mut g = Graph::new();
        let mut binder = Binder::new(&s, &trainable);
        let na1 = binder.node(&mut g, a);
        let na2 = binder.node(&mut g, a);
        assert_eq!(na1, na2);
        let nb = binder.node(&mut g, b);
        assert!(!g.requires(na1));
        assert!(g.requires(nb));
    }

    #[test]
    fn grad_accumulator_sums_and_sorts() {
        let (_, a, b) = demo_store();
        let mut acc = GradAccumulator::new();
        acc.add(b, Tensor::full(&[3, 3], 1.0));
        acc.add(a, Tensor::full(&[3, 3], 2.0));
        acc.add(b, Tensor::full(&[3, 3], 0.5));
        let drained = acc.drain_sorted();
        assert_eq!(drained.len(), 2);
        assert_eq!(drained[0].0, a);
        assert_eq!(drained[1].1.data()[0], 1.5);
    }
}
