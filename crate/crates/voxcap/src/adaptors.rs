//! Parameter-efficient trainable surface: nonlinear low-rank adaptors on
//! attention query projections and MLP blocks, plus the projection adaptor
//! into decoder embedding space.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::SeedRng;
use crate::params::{Binder, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Gelu,
    /// Test-mode passthrough for constructed linear cases.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AdaptorSite {
    QueryProj,
    Mlp,
}

impl fmt::Display for AdaptorSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptorSite::QueryProj => "query-proj",
            AdaptorSite::Mlp => "mlp",
        })
    }
}

/// Residual bottleneck h + scale · up(σ(down(h))). Down projection carries a
/// bias; the up projection has none so zero-init up means exact transparency.
#[derive(Clone, Copy, Debug)]
pub struct NonlinearLowRankAdaptor {
    pub width: usize,
    pub rank: usize,
    pub scale: f64,
    pub activation: Activation,
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
}

impl NonlinearLowRankAdaptor {
    pub fn init(
        store: &mut ParamStore,
        group: &str,
        prefix: &str,
        width: usize,
        rank: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if rank == 0 || rank > width {
            return Err(Error::validation(format!(
                "adaptor rank {rank} outside 1..={width}"
            )));
        }
        let std = 1.0 / (width as f64).sqrt();
        let down_w = store.init_normal(group, &format!("{prefix}.down_w"), &[width, rank], std, rng)?;
        let down_b = store.init_zeros(group, &format!("{prefix}.down_b"), &[rank])?;
        let up_w = store.init_zeros(group, &format!("{prefix}.up_w"), &[rank, width])?;
        Ok(NonlinearLowRankAdaptor {
            width,
            rank,
            scale: 1.0,
            activation: Activation::Gelu,
            down_w,
            down_b,
            up_w,
        })
    }

    /// Matrix parameters only: 2·d·r.
    pub fn matrix_params(&self) -> usize {
        2 * self.width * self.rank
    }

    pub fn param_count(&self) -> usize {
        self.matrix_params() + self.rank
    }
}

/// Applies the residual adaptor to h of shape [m, d].
pub fn adaptor_forward(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    h: NodeId,
    a: &NonlinearLowRankAdaptor,
) -> Result<NodeId> {
    let shape = g.value(h).shape();
    if shape.len() != 2 || shape[1] != a.width {
        return Err(Error::shape(
            format!("[m, {}] input", a.width),
            format!("{shape:?}"),
        ));
    }
    let dw = binder.node(g, a.down_w);
    let db = binder.node(g, a.down_b);
    let uw = binder.node(g, a.up_w);
    let low = g.matmul(h, dw)?;
    let low = g.add_bias(low, db)?;
    let act = match a.activation {
        Activation::Gelu => g.gelu(low)?,
        Activation::Identity => low,
    };
    let up = g.matmul(act, uw)?;
    let scaled = g.scale(up, a.scale)?;
    g.add(h, scaled)
}

/// Non-residual two-layer bottleneck d → r' → out_width used to map fMRI
/// latents into decoder embedding space. Both layers carry biases and normal
/// init: its output feeds cosine similarities, so it must not start at zero.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionAdaptor {
    pub in_width: usize,
    pub rank: usize,
    pub out_width: usize,
    pub activation: Activation,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ProjectionAdaptor {
    pub fn init(
        store: &mut ParamStore,
        group: &str,
        in_width: usize,
        rank: usize,
        out_width: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::validation("projection rank must be >= 1"));
        }
        let s1 = 1.0 / (in_width as f64).sqrt();
        let s2 = 1.0 / (rank as f64).sqrt();
        let w1 = store.init_normal(group, "projection.w1", &[in_width, rank], s1, rng)?;
        let b1 = store.init_zeros(group, "projection.b1", &[rank])?;
        let w2 = store.init_normal(group, "projection.w2", &[rank, out_width], s2, rng)?;
        let b2 = store.init_zeros(group, "projection.b2", &[out_width])?;
        Ok(ProjectionAdaptor {
            in_width,
            rank,
            out_width,
            activation: Activation::Gelu,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn forward(&self, g: &mut Graph, binder: &mut Binder<'_>, h: NodeId) -> Result<NodeId> {
        let shape = g.value(h).shape();
        if shape.len() != 2 || shape[1] != self.in_width {
            return Err(Error::shape(
                format!("[m, {}] input", self.in_width),
                format!("{shape:?}"),
            ));
        }
        let w1 = binder.node(g, self.w1);
        let b1 = binder.node(g, self.b1);
        let w2 = binder.node(g, self.w2);
        let b2 = binder.node(g, self.b2);
        let low = g.matmul(h, w1)?;
        let low = g.add_bias(low, b1)?;
        let act = match self.activation {
            Activation::Gelu => g.gelu(low)?,
            Activation::Identity => low,
        };
        let up = g.matmul(act, w2)?;
        g.add_bias(up, b2)
    }

    pub fn param_count(&self) -> usize {
        self.in_width * self.rank + self.rank + self.rank * self.out_width + self.out_width
    }
}

/// Map from (module-id, site) to adaptor. Insertion is append-only; a second
/// insert at the same key is a validation error.
#[derive(Default)]
pub struct AdaptorBank {
    map: BTreeMap<(String, AdaptorSite), NonlinearLowRankAdaptor>,
}

impl AdaptorBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        store: &mut ParamStore,
        group: &str,
        module_id: &str,
        site: AdaptorSite,
        width: usize,
        rank: usize,
        rng: &mut SeedRng,
    ) -> Result<()> {
        let key = (module_id.to_string(), site);
        if self.map.contains_key(&key) {
            return Err(Error::validation(format!(
                "adaptor already inserted at {module_id}/{site}"
            )));
        }
        let prefix = format!("{module_id}.{site}");
        let a = NonlinearLowRankAdaptor::init(store, group, &prefix, width, rank, rng)?;
        self.map.insert(key, a);
        Ok(())
    }

    pub fn get(&self, module_id: &str, site: AdaptorSite) -> Option<&NonlinearLowRankAdaptor> {
        self.map.get(&(module_id.to_string(), site))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.map.values().map(|a| a.param_count()).sum()
    }

    /// Applies the adaptor at (module_id, site) if present, else returns h.
    pub fn apply(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        module_id: &str,
        site: AdaptorSite,
        h: NodeId,
    ) -> Result<NodeId> {
        match self.get(module_id, site) {
            Some(a) => adaptor_forward(g, binder, h, a),
            None => Ok(h),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCounts {
    pub trainable: usize,
    pub frozen: usize,
    pub ratio: f64,
}

/// Splits the store's parameters by trainable group membership.
pub fn count_params(
    store: &ParamStore,
    trainable_groups: &std::collections::BTreeSet<String>,
) -> ParamCounts {
    let trainable = store.count_in_groups(trainable_groups);
    let total = store.total_count();
    let frozen = total - trainable;
    ParamCounts {
        trainable,
        frozen,
        ratio: if total == 0 {
            0.0
        } else {
            trainable as f64 / total as f64
        },
    }
}
