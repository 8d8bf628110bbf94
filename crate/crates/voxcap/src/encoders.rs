//! The three frozen-foundation stand-ins: an fMRI transformer pretrainable by
//! masked autoencoding, a patch-transformer video encoder, and a Q-Former
//! whose 32 learned queries cross-attend to video patches.

use crate::adaptors::AdaptorBank;
use crate::blocks::{Block, CrossBlock, LinearHead, LN_EPS};
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::SeedRng;
#[cfg(test)]
use crate::numerics::Tensor;
use crate::params::{Binder, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::validation("encoder depth must be >= 1"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::validation(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

fn final_norm(
    store: &mut ParamStore,
    group: &str,
    prefix: &str,
    d: usize,
) -> Result<(ParamId, ParamId)> {
    Ok((
        store.init_full(group, &format!("{prefix}.ln_g"), &[d], 1.0)?,
        store.init_zeros(group, &format!("{prefix}.ln_b"), &[d])?,
    ))
}

/// Transformer over fMRI tokens. A learned bridge lifts tokenizer width to
/// encoder width; absolute positional embeddings are added before the blocks.
pub struct FmriEncoder {
    pub cfg: EncoderConfig,
    pub n_tokens: usize,
    pub token_width: usize,
    bridge: LinearHead,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_g: ParamId,
    ln_b: ParamId,
}

impl FmriEncoder {
    pub fn init(
        store: &mut ParamStore,
        group: &str,
        cfg: EncoderConfig,
        n_tokens: usize,
        token_width: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let bridge = LinearHead::init(store, group, "fmri.bridge", token_width, d, rng)?;
        let pos = store.init_normal(group, "fmri.pos", &[n_tokens, d], 0.02, rng)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            blocks.push(Block::init(
                store,
                group,
                &format!("fmri.{i}"),
                d,
                cfg.heads,
                cfg.mlp_ratio,
                rng,
            )?);
        }
        let (ln_g, ln_b) = final_norm(store, group, "fmri.final", d)?;
        Ok(FmriEncoder {
            cfg,
            n_tokens,
            token_width,
            bridge,
            pos,
            blocks,
            ln_g,
            ln_b,
        })
    }

    pub fn module_ids(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.module_id.clone()).collect()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        tokens: NodeId,
        bank: Option<&AdaptorBank>,
    ) -> Result<NodeId> {
        let shape = g.value(tokens).shape();
        if shape != [self.n_tokens, self.token_width] {
            return Err(Error::shape(
                format!("[{}, {}] tokens", self.n_tokens, self.token_width),
                format!("{shape:?}"),
            ));
        }
        let mut x = self.bridge.forward(g, binder, tokens)?;
        let pos = binder.node(g, self.pos);
        x = g.add(x, pos)?;
        for blk in &self.blocks {
            x = blk.forward(g, binder, x, false, bank)?;
        }
        let lg = binder.node(g, self.ln_g);
        let lb = binder.node(g, self.ln_b);
        g.layer_norm(x, lg, lb, LN_EPS)
    }
}

/// Which token positions a masked-autoencoding step hides.
#[derive(Clone, Debug)]
pub struct MaskingPlan {
    pub mask_ratio: f64,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskingPlan {
    pub fn sample(n_tokens: usize, mask_ratio: f64, rng: &mut SeedRng) -> Result<Self> {
        if !(0.0..1.0).contains(&mask_ratio) && mask_ratio != 1.0 {
            return Err(Error::validation(format!(
                "mask_ratio {mask_ratio} outside (0, 1)"
            )));
        }
        let n_masked = ((n_tokens as f64) * mask_ratio).round() as usize;
        if n_masked == 0 {
            return Err(Error::validation("masking plan hides zero tokens"));
        }
        if n_masked >= n_tokens {
            return Err(Error::validation("masking plan leaves zero visible tokens"));
        }
        let mut order: Vec<usize> = (0..n_tokens).collect();
        rng.shuffle(&mut order);
        let mut masked: Vec<usize> = order[..n_masked].to_vec();
        let mut visible: Vec<usize> = order[n_masked..].to_vec();
        masked.sort_unstable();
        visible.sort_unstable();
        Ok(MaskingPlan {
            mask_ratio,
            masked,
            visible,
        })
    }
}

/// MAE-specific parameters: the learned mask token, a shallow decoder block,
/// and a reconstruction head back to tokenizer width. The head starts at zero
/// so an all-zero input reconstructs with exactly zero loss.
pub struct MaeHead {
    mask_token: ParamId,
    dec_block: Block,
    head: LinearHead,
}

impl MaeHead {
    pub fn init(
        store: &mut ParamStore,
        group: &str,
        cfg: &EncoderConfig,
        token_width: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let d = cfg.width;
        Ok(MaeHead {
            mask_token: store.init_normal(group, "mae.mask_token", &[1, d], 0.02, rng)?,
            dec_block: Block::init(store, group, "mae.dec", d, cfg.heads, cfg.mlp_ratio, rng)?,
            head: LinearHead::init_zeroed(store, group, "mae.head", d, token_width)?,
        })
    }
}

/// Masked-reconstruction loss for one sample: encode visible tokens, splice
/// mask tokens back in, decode, and take MSE over masked positions only.
pub fn mae_loss(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    enc: &FmriEncoder,
    mae: &MaeHead,
    tokens: NodeId,
    plan: &MaskingPlan,
) -> Result<NodeId> {
    let l = enc.n_tokens;
    if plan.masked.len() + plan.visible.len() != l {
        return Err(Error::validation("masking plan does not cover the sequence"));
    }
    let bridged = enc.bridge.forward(g, binder, tokens)?;
    let pos = binder.node(g, enc.pos);
    let with_pos = g.add(bridged, pos)?;
    let vis = g.gather_rows(with_pos, &plan.visible)?;
    let mut x = vis;
    for blk in &enc.blocks {
        x = blk.forward(g, binder, x, false, None)?;
    }
    // Splice: rows [0..n_vis) are encoded tokens, row n_vis is the mask token;
    // an index map rebuilds the full ordered sequence.
    let mask_tok = binder.node(g, mae.mask_token);
    let expanded = g.concat_rows(&[x, mask_tok])?;
    let n_vis = plan.visible.len();
    let mut index = vec![n_vis; l];
    for (rank, &i) in plan.visible.iter().enumerate() {
        index[i] = rank;
    }
    let full = g.gather_rows(expanded, &index)?;
    let full = g.add(full, pos)?;
    let decoded = mae.dec_block.forward(g, binder, full, false, None)?;
    let pred = mae.head.forward(g, binder, decoded)?;

    let pred_masked = g.gather_rows(pred, &plan.masked)?;
    let target_masked = g.gather_rows(tokens, &plan.masked)?;
    let neg = g.scale(target_masked, -1.0)?;
    let diff = g.add(pred_masked, neg)?;
    let sq = g.square(diff)?;
    g.mean_all(sq)
}

/// Patch-transformer video encoder (ViT stand-in). Always run without
/// adaptors; frozen after its warm-up.
pub struct VideoEncoder {
    pub cfg: EncoderConfig,
    pub frames: usize,
    pub height: usize,
    pub width_px: usize,
    pub channels: usize,
    pub patch: usize,
    patch_embed: LinearHead,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_g: ParamId,
    ln_b: ParamId,
}

impl VideoEncoder {
    pub fn init(
        store: &mut ParamStore,
        group: &str,
        cfg: EncoderConfig,
        video_shape: [usize; 4],
        patch: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let [f, h, w, c] = video_shape;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::validation(format!(
                "frame {h}x{w} not divisible by patch {patch}"
            )));
        }
        let d = cfg.width;
        let n_patches = f * (h / patch) * (w / patch);
        let patch_dim = patch * patch * c;
        let patch_embed = LinearHead::init(store, group, "vit.patch", patch_dim, d, rng)?;
        let pos = store.init_normal(group, "vit.pos", &[n_patches, d], 0.02, rng)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            blocks.push(Block::init(
                store,
                group,
                &format!("vit.{i}"),
                d,
                cfg.heads,
                cfg.mlp_ratio,
                rng,
            )?);
        }
        let (ln_g, ln_b) = final_norm(store, group, "vit.final", d)?;
        Ok(VideoEncoder {
            cfg,
            frames: f,
            height: h,
            width_px: w,
            channels: c,
            patch,
            patch_embed,
            pos,
            blocks,
            ln_g,
            ln_b,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.frames * (self.height / self.patch) * (self.width_px / self.patch)
    }

    fn patch_offsets(&self) -> Vec<usize> {
        let (h, w, c, p) = (self.height, self.width_px, self.channels, self.patch);
        let mut offsets = Vec::with_capacity(self.patch_count() * p * p * c);
        for f in 0..self.frames {
            for pr in 0..h / p {
                for pc in 0..w / p {
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c {
                                offsets.push(
                                    ((f * h + pr * p + dy) * w + pc * p + dx) * c + ch,
                                );
                            }
                        }
                    }
                }
            }
        }
        offsets
    }

    pub fn forward(&self, g: &mut Graph, binder: &mut Binder<'_>, video: NodeId) -> Result<NodeId> {
        let shape = g.value(video).shape();
        if shape != [self.frames, self.height, self.width_px, self.channels] {
            return Err(Error::shape(
                format!(
                    "[{}, {}, {}, {}] clip",
                    self.frames, self.height, self.width_px, self.channels
                ),
                format!("{shape:?}"),
            ));
        }
        let l = self.patch_count();
        let k = self.patch * self.patch * self.channels;
        let patches = g.gather_flat(video, &self.patch_offsets(), &[l, k])?;
        let mut x = self.patch_embed.forward(g, binder, patches)?;
        let pos = binder.node(g, self.pos);
        x = g.add(x, pos)?;
        for blk in &self.blocks {
            x = blk.forward(g, binder, x, false, None)?;
        }
        let lg = binder.node(g, self.ln_g);
        let lb = binder.node(g, self.ln_b);
        g.layer_norm(x, lg, lb, LN_EPS)
    }
}

/// Q-Former stand-in: learned query tokens contextualized by self-attention
/// and cross-attention to patch tokens. Output length is always n_queries.
pub struct QFormer {
    pub cfg: EncoderConfig,
    pub n_queries: usize,
    queries: ParamId,
    blocks: Vec<CrossBlock>,
    ln_g: ParamId,
    ln_b: ParamId,
}

impl QFormer {
    pub fn init(
        store: &mut ParamStore,
        group: &str,
        cfg: EncoderConfig,
        n_queries: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        cfg.validate()?;
        if n_queries == 0 {
            return Err(Error::validation("n_queries must be >= 1"));
        }
        let d = cfg.width;
        let queries = store.init_normal(group, "qf.queries", &[n_queries, d], 0.02, rng)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            blocks.push(CrossBlock::init(
                store,
                group,
                &format!("qf.{i}"),
                d,
                cfg.heads,
                cfg.mlp_ratio,
                rng,
            )?);
        }
        let (ln_g, ln_b) = final_norm(store, group, "qf.final", d)?;
        Ok(QFormer {
            cfg,
            n_queries,
            queries,
            blocks,
            ln_g,
            ln_b,
        })
    }

    pub fn module_ids(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.module_id.clone()).collect()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        patches: NodeId,
        bank: Option<&AdaptorBank>,
    ) -> Result<NodeId> {
        let shape = g.value(patches).shape();
        if shape.len() != 2 || shape[1] != self.cfg.width {
            return Err(Error::shape(
                format!("[L, {}] patches", self.cfg.width),
                format!("{shape:?}"),
            ));
        }
        if shape[0] == 0 {
            return Err(Error::validation("empty patch sequence"));
        }
        let mut x = binder.node(g, self.queries);
        for blk in &self.blocks {
            x = blk.forward(g, binder, x, patches, bank)?;
        }
        let lg = binder.node(g, self.ln_g);
        let lb = binder.node(g, self.ln_b);
        g.layer_norm(x, lg, lb, LN_EPS)
    }
}
