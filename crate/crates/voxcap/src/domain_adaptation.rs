//! Cross-subject adaptation: a prototype classifier head, a target-feature
//! memory pool, neighborhood-clustering entropy over pool plus prototypes,
//! and the entropy-separation penalty.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::{checksum_tensor, Tensor};
use crate::params::{Binder, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DaConfig {
    pub tau_nc: f64,
    pub rho: f64,
    pub margin: f64,
}

impl DaConfig {
    /// Defaults with the band center at log(C)/2.
    pub fn for_classes(n_classes: usize) -> Self {
        DaConfig {
            tau_nc: 0.5,
            rho: (n_classes as f64).ln() / 2.0,
            margin: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_nc <= 0.0 {
            return Err(Error::validation(format!("tau_nc {} must be > 0", self.tau_nc)));
        }
        if self.rho < 0.0 || self.margin < 0.0 {
            return Err(Error::validation("rho and margin must be nonnegative"));
        }
        Ok(())
    }
}

/// Classifier whose weight rows double as class prototypes. Rows and input
/// features are L2-normalized before the dot product, so logits are cosine
/// similarities scaled by 1/τ_nc.
pub struct ClassifierHead {
    pub n_classes: usize,
    pub width: usize,
    pub weights: ParamId,
}

impl ClassifierHead {
    pub fn init(
        store: &mut ParamStore,
        group: &str,
        n_classes: usize,
        width: usize,
        init_rows: &Tensor,
    ) -> Result<Self> {
        if init_rows.shape() != [n_classes, width] {
            return Err(Error::shape(
                format!("[{n_classes}, {width}] prototypes"),
                format!("{:?}", init_rows.shape()),
            ));
        }
        let weights = store.insert(group, "da.prototypes", init_rows.clone())?;
        Ok(ClassifierHead {
            n_classes,
            width,
            weights,
        })
    }

    /// Cosine logits [B, C] scaled by 1/τ_nc.
    pub fn class_logits(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        features: NodeId,
        tau_nc: f64,
    ) -> Result<NodeId> {
        let shape = g.value(features).shape();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::shape(
                format!("[B, {}] features", self.width),
                format!("{shape:?}"),
            ));
        }
        let f_n = g.l2_normalize_rows(features)?;
        let w = binder.node(g, self.weights);
        let w_n = g.l2_normalize_rows(w)?;
        let wt = g.transpose(w_n)?;
        let sims = g.matmul(f_n, wt)?;
        g.scale(sims, 1.0 / tau_nc)
    }
}

/// Target-domain feature rows, one per adaptation sample, always unit norm.
#[derive(Clone)]
pub struct MemoryPool {
    features: Tensor,
    ids: Vec<u32>,
    index: BTreeMap<u32, usize>,
}

impl MemoryPool {
    pub fn from_features(ids: Vec<u32>, features: Tensor) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::validation("memory pool must hold at least one row"));
        }
        if features.rank() != 2 || features.dim(0) != n {
            return Err(Error::shape(
                format!("[{n}, d] features"),
                format!("{:?}", features.shape()),
            ));
        }
        let mut index = BTreeMap::new();
        for (row, &id) in ids.iter().enumerate() {
            if index.insert(id, row).is_some() {
                return Err(Error::validation(format!("duplicate pool sample id {id}")));
            }
        }
        let mut pool = MemoryPool {
            features,
            ids,
            index,
        };
        for row in 0..n {
            pool.normalize_row(row)?;
        }
        Ok(pool)
    }

    fn normalize_row(&mut self, row: usize) -> Result<()> {
        let d = self.features.dim(1);
        let data = self.features.data_mut();
        let slice = &mut data[row * d..(row + 1) * d];
        let norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::degenerate(format!("zero-norm feature for pool row {row}")));
        }
        for v in slice.iter_mut() {
            *v /= norm;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.dim(1)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row_of(&self, sample_id: u32) -> Result<usize> {
        self.index.get(&sample_id).copied().ok_or_else(|| {
            Error::validation(format!("sample {sample_id} not in adaptation pool"))
        })
    }

    /// Replaces one row with the L2-normalized new feature.
    pub fn update(&mut self, sample_id: u32, feature: &[f64]) -> Result<()> {
        let row = self.row_of(sample_id)?;
        let d = self.width();
        if feature.len() != d {
            return Err(Error::shape(format!("{d}-wide feature"), format!("{}", feature.len())));
        }
        let data = self.features.data_mut();
        data[row * d..(row + 1) * d].copy_from_slice(feature);
        self.normalize_row(row)
    }

    pub fn checksum(&self) -> u64 {
        checksum_tensor(&self.features)
    }
}

/// Softmax over one sample's candidates: every pool row except its own,
/// then the C prototype rows. Pure form for oracles and probes.
pub fn similarity_distribution(
    f_i: &[f64],
    self_row: usize,
    pool: &MemoryPool,
    prototypes: &Tensor,
    tau_nc: f64,
) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::validation("empty memory pool"));
    }
    let d = pool.width();
    if f_i.len() != d || prototypes.rank() != 2 || prototypes.dim(1) != d {
        return Err(Error::shape(
            format!("{d}-wide feature and [C, {d}] prototypes"),
            format!("{} and {:?}", f_i.len(), prototypes.shape()),
        ));
    }
    if self_row >= pool.len() {
        return Err(Error::validation(format!("pool row {self_row} out of range")));
    }
    let norm = f_i.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::degenerate("zero-norm query feature"));
    }
    let f: Vec<f64> = f_i.iter().map(|v| v / norm).collect();
    let mut dots = Vec::with_capacity(pool.len() - 1 + prototypes.dim(0));
    for row in 0..pool.len() {
        if row == self_row {
            continue;
        }
        let r = &pool.features().data()[row * d..(row + 1) * d];
        dots.push(r.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>());
    }
    for c in 0..prototypes.dim(0) {
        let r = &prototypes.data()[c * d..(c + 1) * d];
        let pn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if pn == 0.0 {
            return Err(Error::degenerate(format!("zero-norm prototype row {c}")));
        }
        dots.push(r.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() / pn);
    }
    let max = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = dots.iter().map(|s| ((s - max) / tau_nc).exp()).collect();
    // Scaling before exponentiation: exp((s - max)/τ) matches exp(s/τ)
    // normalized, with the max subtracted inside for stability.
    let z: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / z).collect())
}

/// Neighborhood-clustering loss: mean over the batch of the entropy of each
/// sample's similarity distribution. Gradients flow to the features and the
/// prototypes; stored pool rows act as constants.
pub fn nc_loss_graph(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    features: NodeId,
    pool_rows: &[usize],
    pool: &MemoryPool,
    head: &ClassifierHead,
    tau_nc: f64,
) -> Result<NodeId> {
    let shape = g.value(features).shape();
    if shape.len() != 2 || shape[1] != pool.width() {
        return Err(Error::shape(
            format!("[B, {}] features", pool.width()),
            format!("{shape:?}"),
        ));
    }
    let b = shape[0];
    if pool_rows.len() != b {
        return Err(Error::shape(format!("{b} pool rows"), format!("{}", pool_rows.len())));
    }
    if let Some(&bad) = pool_rows.iter().find(|&&r| r >= pool.len()) {
        return Err(Error::validation(format!("pool row {bad} out of range")));
    }
    let f_n = g.l2_normalize_rows(features)?;
    let w = binder.node(g, head.weights);
    let w_n = g.l2_normalize_rows(w)?;
    let pool_node = g.constant(pool.features().clone());

    let mut acc: Option<NodeId> = None;
    for (i, &self_row) in pool_rows.iter().enumerate() {
        let keep: Vec<usize> = (0..pool.len()).filter(|&r| r != self_row).collect();
        let mem = g.gather_rows(pool_node, &keep)?;
        let cands = g.concat_rows(&[mem, w_n])?;
        let ct = g.transpose(cands)?;
        let f_i = g.slice_rows(f_n, i, i + 1)?;
        let sims = g.matmul(f_i, ct)?;
        let logits = g.scale(sims, 1.0 / tau_nc)?;
        let p = g.softmax_rows(logits)?;
        let lp = g.log_softmax_rows(logits)?;
        let plp = g.mul(p, lp)?;
        let s = g.sum_all(plp)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    g.scale(acc.expect("B >= 1 checked above"), -1.0 / b as f64)
}

/// Entropy-separation loss over class logits: per row, −|H−ρ| outside the
/// band of half-width m around ρ, zero inside it; batch mean.
pub fn es_loss_graph(g: &mut Graph, class_logits: NodeId, rho: f64, m: f64) -> Result<NodeId> {
    let shape = g.value(class_logits).shape();
    if shape.len() != 2 {
        return Err(Error::shape("[B, C] class logits", format!("{shape:?}")));
    }
    let p = g.softmax_rows(class_logits)?;
    let lp = g.log_softmax_rows(class_logits)?;
    let plp = g.mul(p, lp)?;
    let row_sums = g.sum_rows(plp)?;
    let entropies = g.scale(row_sums, -1.0)?;
    let per_sample = g.es_penalty(entropies, rho, m)?;
    g.mean_all(per_sample)
}
