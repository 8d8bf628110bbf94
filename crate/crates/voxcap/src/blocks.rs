//! Pre-LN transformer building blocks shared by every encoder and the
//! decoder. Adaptor hooks sit on the self-attention query projection and on
//! the MLP output, keyed by a module id like "fmri.2".

use crate::adaptors::{AdaptorBank, AdaptorSite};
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::{SeedRng, Tensor};
use crate::params::{Binder, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug)]
struct AttnParams {
    ln_g: ParamId,
    ln_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl AttnParams {
    fn init(
        store: &mut ParamStore,
        group: &str,
        prefix: &str,
        d: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let std = 1.0 / (d as f64).sqrt();
        let mat = |store: &mut ParamStore, name: &str, rng: &mut SeedRng| {
            store.init_normal(group, &format!("{prefix}.{name}"), &[d, d], std, rng)
        };
        let wq = mat(store, "wq", rng)?;
        let wk = mat(store, "wk", rng)?;
        let wv = mat(store, "wv", rng)?;
        let wo = mat(store, "wo", rng)?;
        Ok(AttnParams {
            ln_g: store.init_full(group, &format!("{prefix}.ln_g"), &[d], 1.0)?,
            ln_b: store.init_zeros(group, &format!("{prefix}.ln_b"), &[d])?,
            wq,
            bq: store.init_zeros(group, &format!("{prefix}.bq"), &[d])?,
            wk,
            bk: store.init_zeros(group, &format!("{prefix}.bk"), &[d])?,
            wv,
            bv: store.init_zeros(group, &format!("{prefix}.bv"), &[d])?,
            wo,
            bo: store.init_zeros(group, &format!("{prefix}.bo"), &[d])?,
        })
    }
}

/// Scaled dot-product attention over pre-projected q/k/v, split into heads.
fn attention(
    g: &mut Graph,
    q_full: NodeId,
    k_full: NodeId,
    v_full: NodeId,
    heads: usize,
    causal: bool,
) -> Result<NodeId> {
    let d = g.value(q_full).dim(1);
    let dh = d / heads;
    let lq = g.value(q_full).dim(0);
    let lk = g.value(k_full).dim(0);
    let mask = if causal {
        if lq != lk {
            return Err(Error::validation("causal attention requires square scores"));
        }
        let mut m = Tensor::zeros(&[lq, lk]);
        for i in 0..lq {
            for j in (i + 1)..lk {
                m.data_mut()[i * lk + j] = MASKED;
            }
        }
        Some(g.constant(m))
    } else {
        None
    };
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let q = g.slice_cols(q_full, s, e)?;
        let k = g.slice_cols(k_full, s, e)?;
        let v = g.slice_cols(v_full, s, e)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, scale)?;
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let attn = g.softmax_rows(scores)?;
        outs.push(g.matmul(attn, v)?);
    }
    g.concat_cols(&outs)
}

#[derive(Clone, Copy, Debug)]
struct MlpParams {
    ln_g: ParamId,
    ln_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl MlpParams {
    fn init(
        store: &mut ParamStore,
        group: &str,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        Ok(MlpParams {
            ln_g: store.init_full(group, &format!("{prefix}.ln_g"), &[d], 1.0)?,
            ln_b: store.init_zeros(group, &format!("{prefix}.ln_b"), &[d])?,
            w1: store.init_normal(
                group,
                &format!("{prefix}.w1"),
                &[d, hidden],
                1.0 / (d as f64).sqrt(),
                rng,
            )?,
            b1: store.init_zeros(group, &format!("{prefix}.b1"), &[hidden])?,
            w2: store.init_normal(
                group,
                &format!("{prefix}.w2"),
                &[hidden, d],
                1.0 / (hidden as f64).sqrt(),
                rng,
            )?,
            b2: store.init_zeros(group, &format!("{prefix}.b2"), &[d])?,
        })
    }
}

/// One pre-LN block: x + attn(LN(x)), then x + mlp(LN(x)).
pub struct Block {
    pub module_id: String,
    pub d: usize,
    pub heads: usize,
    attn: AttnParams,
    mlp: MlpParams,
}

impl Block {
    pub fn init(
        store: &mut ParamStore,
        group: &str,
        module_id: &str,
        d: usize,
        heads: usize,
        mlp_ratio: f64,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::validation(format!(
                "width {d} not divisible by heads {heads}"
            )));
        }
        let hidden = ((d as f64) * mlp_ratio).round() as usize;
        if hidden == 0 {
            return Err(Error::validation("mlp hidden width must be >= 1"));
        }
        Ok(Block {
            module_id: module_id.to_string(),
            d,
            heads,
            attn: AttnParams::init(store, group, &format!("{module_id}.attn"), d, rng)?,
            mlp: MlpParams::init(store, group, &format!("{module_id}.mlp"), d, hidden, rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        x: NodeId,
        causal: bool,
        bank: Option<&AdaptorBank>,
    ) -> Result<NodeId> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.d {
            return Err(Error::shape(
                format!("[L, {}] input", self.d),
                format!("{shape:?}"),
            ));
        }
        let a = &self.attn;
        let g1 = binder.node(g, a.ln_g);
        let b1 = binder.node(g, a.ln_b);
        let xn = g.layer_norm(x, g1, b1, LN_EPS)?;
        let proj = |g: &mut Graph, binder: &mut Binder<'_>, inp, w, b| -> Result<NodeId> {
            let wn = binder.node(g, w);
            let bn = binder.node(g, b);
            let p = g.matmul(inp, wn)?;
            g.add_bias(p, bn)
        };
        let mut q = proj(g, binder, xn, a.wq, a.bq)?;
        if let Some(bank) = bank {
            q = bank.apply(g, binder, &self.module_id, AdaptorSite::QueryProj, q)?;
        }
        let k = proj(g, binder, xn, a.wk, a.bk)?;
        let v = proj(g, binder, xn, a.wv, a.bv)?;
        let mixed = attention(g, q, k, v, self.heads, causal)?;
        let out = proj(g, binder, mixed, a.wo, a.bo)?;
        let x = g.add(x, out)?;

        let m = &self.mlp;
        let g2 = binder.node(g, m.ln_g);
        let b2 = binder.node(g, m.ln_b);
        let xn = g.layer_norm(x, g2, b2, LN_EPS)?;
        let h = proj(g, binder, xn, m.w1, m.b1)?;
        let h = g.gelu(h)?;
        let mut h = proj(g, binder, h, m.w2, m.b2)?;
        if let Some(bank) = bank {
            h = bank.apply(g, binder, &self.module_id, AdaptorSite::Mlp, h)?;
        }
        g.add(x, h)
    }
}

/// Q-Former style block: self-attention among queries, cross-attention from
/// queries to a context sequence, then the MLP. Adaptor hooks match Block's
/// (self-attention query projection and MLP output).
pub struct CrossBlock {
    pub module_id: String,
    pub d: usize,
    pub heads: usize,
    self_attn: AttnParams,
    cross_attn: AttnParams,
    mlp: MlpParams,
}

impl CrossBlock {
    pub fn init(
        store: &mut ParamStore,
        group: &str,
        module_id: &str,
        d: usize,
        heads: usize,
        mlp_ratio: f64,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::validation(format!(
                "width {d} not divisible by heads {heads}"
            )));
        }
        let hidden = ((d as f64) * mlp_ratio).round() as usize;
        Ok(CrossBlock {
            module_id: module_id.to_string(),
            d,
            heads,
            self_attn: AttnParams::init(store, group, &format!("{module_id}.self"), d, rng)?,
            cross_attn: AttnParams::init(store, group, &format!("{module_id}.cross"), d, rng)?,
            mlp: MlpParams::init(store, group, &format!("{module_id}.mlp"), d, hidden, rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        queries: NodeId,
        context: NodeId,
        bank: Option<&AdaptorBank>,
    ) -> Result<NodeId> {
        for (node, what) in [(queries, "queries"), (context, "context")] {
            let shape = g.value(node).shape();
            if shape.len() != 2 || shape[1] != self.d {
                return Err(Error::shape(
                    format!("[L, {}] {what}", self.d),
                    format!("{shape:?}"),
                ));
            }
        }
        let proj = |g: &mut Graph, binder: &mut Binder<'_>, inp, w, b| -> Result<NodeId> {
            let wn = binder.node(g, w);
            let bn = binder.node(g, b);
            let p = g.matmul(inp, wn)?;
            g.add_bias(p, bn)
        };

        let a = &self.self_attn;
        let g1 = binder.node(g, a.ln_g);
        let b1 = binder.node(g, a.ln_b);
        let xn = g.layer_norm(queries, g1, b1, LN_EPS)?;
        let mut q = proj(g, binder, xn, a.wq, a.bq)?;
        if let Some(bank) = bank {
            q = bank.apply(g, binder, &self.module_id, AdaptorSite::QueryProj, q)?;
        }
        let k = proj(g, binder, xn, a.wk, a.bk)?;
        let v = proj(g, binder, xn, a.wv, a.bv)?;
        let mixed = attention(g, q, k, v, self.heads, false)?;
        let out = proj(g, binder, mixed, a.wo, a.bo)?;
        let x = g.add(queries, out)?;

        let c = &self.cross_attn;
        let cg = binder.node(g, c.ln_g);
        let cb = binder.node(g, c.ln_b);
        let xn = g.layer_norm(x, cg, cb, LN_EPS)?;
        let q = proj(g, binder, xn, c.wq, c.bq)?;
        let k = proj(g, binder, context, c.wk, c.bk)?;
        let v = proj(g, binder, context, c.wv, c.bv)?;
        let mixed = attention(g, q, k, v, self.heads, false)?;
        let out = proj(g, binder, mixed, c.wo, c.bo)?;
        let x = g.add(x, out)?;

        let m = &self.mlp;
        let g2 = binder.node(g, m.ln_g);
        let b2 = binder.node(g, m.ln_b);
        let xn = g.layer_norm(x, g2, b2, LN_EPS)?;
        let h = proj(g, binder, xn, m.w1, m.b1)?;
        let h = g.gelu(h)?;
        let mut h = proj(g, binder, h, m.w2, m.b2)?;
        if let Some(bank) = bank {
            h = bank.apply(g, binder, &self.module_id, AdaptorSite::Mlp, h)?;
        }
        g.add(x, h)
    }
}

/// Plain affine map, used for bridges, readout heads, and patch embeddings.
#[derive(Clone, Copy, Debug)]
pub struct LinearHead {
    pub w: ParamId,
    pub b: ParamId,
    pub in_width: usize,
    pub out_width: usize,
}

impl LinearHead {
    pub fn init(
        store: &mut ParamStore,
        group: &str,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let std = 1.0 / (in_width as f64).sqrt();
        Ok(LinearHead {
            w: store.init_normal(group, &format!("{prefix}.w"), &[in_width, out_width], std, rng)?,
            b: store.init_zeros(group, &format!("{prefix}.b"), &[out_width])?,
            in_width,
            out_width,
        })
    }

    pub fn init_zeroed(
        store: &mut ParamStore,
        group: &str,
        prefix: &str,
        in_width: usize,
        out_width: usize,
    ) -> Result<Self> {
        Ok(LinearHead {
            w: store.init_zeros(group, &format!("{prefix}.w"), &[in_width, out_width])?,
            b: store.init_zeros(group, &format!("{prefix}.b"), &[out_width])?,
            in_width,
            out_width,
        })
    }

    pub fn forward(&self, g: &mut Graph, binder: &mut Binder<'_>, x: NodeId) -> Result<NodeId> {
        let w = binder.node(g, self.w);
        let b = binder.node(g, self.b);
        let p = g.matmul(x, w)?;
        g.add_bias(p, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use std::collections::BTreeSet;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SeedRng::new(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn run_block(store: &ParamStore, blk: &Block, x: &Tensor, causal: bool) -> Tensor {
        let groups = BTreeSet::new();
        let mut g = Graph::new();
        let mut binder = Binder::new(store, &groups);
        let inp = g.constant(x.clone());
        let out = blk.forward(&mut g, &mut binder, inp, causal, None).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn block_preserves_shape_and_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(1);
        let blk = Block::init(&mut store, "enc", "enc.0", 16, 4, 2.0, &mut rng).unwrap();
        let x = rand(&[6, 16], 2);
        let a = run_block(&store, &blk, &x, false);
        let b = run_block(&store, &blk, &x, false);
        assert_eq!(a.shape(), &[6, 16]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn invalid_head_split_rejected() {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(1);
        assert!(Block::init(&mut store, "enc", "enc.0", 10, 4, 2.0, &mut rng).is_err());
    }

    #[test]
    fn causal_mask_blocks_future_influence() {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(3);
        let blk = Block::init(&mut store, "dec", "dec.0", 8, 2, 2.0, &mut rng).unwrap();
        let x = rand(&[5, 8], 4);
        let mut x2 = x.clone();
        // Perturb a single element of the last row; a uniform row shift would
        // be invisible to pre-LN attention.
        x2.data_mut()[4 * 8] += 1.0;
        let a = run_block(&store, &blk, &x, true);
        let b = run_block(&store, &blk, &x2, true);
        for r in 0..4 {
            for c in 0..8 {
                assert_eq!(a.data()[r * 8 + c], b.data()[r * 8 + c], "row {r} leaked");
            }
        }
        // Without the mask the earlier rows do change.
        let a = run_block(&store, &blk, &x, false);
        let b = run_block(&store, &blk, &x2, false);
        assert!(a.data()[0] != b.data()[0]);
    }

    #[test]
    fn non_causal_block_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(5);
        let blk = Block::init(&mut store, "enc", "enc.1", 12, 3, 2.0, &mut rng).unwrap();
        let x = rand(&[4, 12], 6);
        let perm = [2usize, 0, 3, 1];
        let mut xp = Tensor::zeros(&[4, 12]);
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..12 {
                xp.data_mut()[r * 12 + c] = x.data()[src * 12 + c];
            }
        }
        let y = run_block(&store, &blk, &x, false);
        let yp = run_block(&store, &blk, &xp, false);
        // Softmax normalizers sum key contributions in permuted order, so
        // equality holds to rounding, not bit-exactly.
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..12 {
                let (a, b) = (yp.data()[r * 12 + c], y.data()[src * 12 + c]);
                assert!((a - b).abs() < 1e-12, "({r},{c}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_init_adaptors_leave_block_bit_identical() {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(7);
        let blk = Block::init(&mut store, "enc", "enc.0", 16, 4, 2.0, &mut rng).unwrap();
        let x = rand(&[5, 16], 8);
        let base = run_block(&store, &blk, &x, false);

        let mut bank = AdaptorBank::new();
        bank.insert(&mut store, "bank", "enc.0", AdaptorSite::QueryProj, 16, 4, &mut rng)
            .unwrap();
        bank.insert(&mut store, "bank", "enc.0", AdaptorSite::Mlp, 16, 4, &mut rng)
            .unwrap();
        let groups = BTreeSet::new();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &groups);
        let inp = g.constant(x.clone());
        let out = blk.forward(&mut g, &mut binder, inp, false, Some(&bank)).unwrap();
        assert_eq!(g.value(out).data(), base.data());
    }

    #[test]
    fn cross_block_keeps_query_count_and_reads_context() {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(9);
        let blk = CrossBlock::init(&mut store, "qf", "qf.0", 8, 2, 2.0, &mut rng).unwrap();
        let q = rand(&[3, 8], 10);
        let ctx = rand(&[11, 8], 11);
        let groups = BTreeSet::new();

        let run = |ctx: &Tensor| {
            let mut g = Graph::new();
            let mut binder = Binder::new(&store, &groups);
            let qn = g.constant(q.clone());
            let cn = g.constant(ctx.clone());
            let out = blk.forward(&mut g, &mut binder, qn, cn, None).unwrap();
            g.value(out).clone()
        };
        let y = run(&ctx);
        assert_eq!(y.shape(), &[3, 8]);
        let mut ctx2 = ctx.clone();
        ctx2.data_mut()[0] += 1.0;
        assert!(run(&ctx2).data() != y.data());
    }

    #[test]
    fn block_grad_check_on_trainable_params() {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(13);
        let blk = Block::init(&mut store, "enc", "enc.0", 8, 2, 1.5, &mut rng).unwrap();
        let x = rand(&[4, 8], 14);
        let trainable: BTreeSet<String> = ["enc".to_string()].into_iter().collect();

        let eval = |store: &ParamStore| {
            let mut g = Graph::new();
            let mut binder = Binder::new(store, &trainable);
            let inp = g.constant(x.clone());
            let out = blk.forward(&mut g, &mut binder, inp, true, None).unwrap();
            let sq = g.square(out).unwrap();
            let loss = g.mean_all(sq).unwrap();
            let v = g.value(loss).item();
            let mut grads = g.backward(loss).unwrap();
            (v, binder.collect_grads(&mut grads))
        };

        let (_, grads) = eval(&store);
        // Spot-check a subset to keep runtime modest: one weight from each
        // family plus both layer norms of the attention sublayer.
        let picked: Vec<_> = grads
            .into_iter()
            .filter(|(pid, _)| {
                let n = store.name(*pid);
                n.ends_with("attn.wq")
                    || n.ends_with("attn.ln_g")
                    || n.ends_with("attn.bo")
                    || n.ends_with("mlp.w2")
            })
            .collect();
        assert_eq!(picked.len(), 4);
        for (pid, analytic) in picked {
            let x0 = store.get(pid).clone();
            let rep = grad_check(&x0, &analytic, 1e-5, |t| {
                let mut s2 = store.clone();
                s2.set(pid, t.clone()).unwrap();
                Ok(eval(&s2).0)
            })
            .unwrap();
            assert!(rep.passes(1e-4), "{}: {}", store.name(pid), rep.max_rel_err);
        }
    }
}
