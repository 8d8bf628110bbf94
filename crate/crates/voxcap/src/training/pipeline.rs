//! The assembled model: tokenizer, encoders, adaptor banks, projection,
//! decoder, temperature, and the optional domain-adaptation head, all living
//! in one parameter store with stable group names.

use std::collections::{BTreeMap, BTreeSet};

use crate::adaptors::{AdaptorBank, AdaptorSite, ProjectionAdaptor};
use crate::blocks::LinearHead;
use crate::data::{AccessLog, Dataset, DatasetMeta, InstructionSet};
use crate::decoder::{Decoder, DecoderConfig, Vocab};
use crate::domain_adaptation::ClassifierHead;
use crate::encoders::{EncoderConfig, FmriEncoder, MaeHead, QFormer, VideoEncoder};
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::{cosine_similarity, SeedRng, Tensor};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tokenizer::{token_grid_shape, Tokenizer, TokenizerConfig};
use crate::training::config::{ModelConfig, RunConfig};

pub const GROUP_TOKENIZER: &str = "tokenizer";
pub const GROUP_FMRI_ENCODER: &str = "fmri_encoder";
pub const GROUP_MAE_HEAD: &str = "mae_head";
pub const GROUP_VIT: &str = "vit";
pub const GROUP_WARMUP_HEAD: &str = "warmup_head";
pub const GROUP_QFORMER: &str = "qformer";
pub const GROUP_FMRI_ADAPTORS: &str = "fmri_adaptors";
pub const GROUP_QFORMER_ADAPTORS: &str = "qformer_adaptors";
pub const GROUP_PROJECTION: &str = "projection_adaptor";
pub const GROUP_DECODER: &str = "decoder";
pub const GROUP_TAU: &str = "tau";
pub const GROUP_DA_HEAD: &str = "da_head";

/// Training phases with their declared trainable sets.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TrainPhase {
    Mae,
    VitWarmup,
    DecoderLm,
    Stage1,
    Stage2,
}

impl TrainPhase {
    pub fn label(&self) -> &'static str {
        match self {
            TrainPhase::Mae => "pretrain",
            TrainPhase::VitWarmup => "pretrain",
            TrainPhase::DecoderLm => "pretrain",
            TrainPhase::Stage1 => "stage1",
            TrainPhase::Stage2 => "stage2",
        }
    }

    pub fn trainable(&self) -> BTreeSet<String> {
        let names: &[&str] = match self {
            TrainPhase::Mae => &[GROUP_FMRI_ENCODER, GROUP_MAE_HEAD],
            TrainPhase::VitWarmup => &[GROUP_VIT, GROUP_WARMUP_HEAD],
            TrainPhase::DecoderLm => &[GROUP_QFORMER, GROUP_DECODER],
            TrainPhase::Stage1 => &[
                GROUP_TOKENIZER,
                GROUP_FMRI_ADAPTORS,
                GROUP_QFORMER_ADAPTORS,
                GROUP_PROJECTION,
                GROUP_TAU,
            ],
            TrainPhase::Stage2 => &[GROUP_PROJECTION, GROUP_DA_HEAD],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

/// Caption template shared by the generator and the surrogate oracle.
pub fn caption_for_label(label: &str) -> String {
    format!("In the video, a person is {label}.")
}

pub struct Pipeline {
    pub model: ModelConfig,
    pub meta: DatasetMeta,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub fmri_encoder: FmriEncoder,
    pub mae_head: MaeHead,
    pub vit: VideoEncoder,
    pub warmup_head: LinearHead,
    pub qformer: QFormer,
    pub fmri_bank: AdaptorBank,
    pub qformer_bank: AdaptorBank,
    pub projection: ProjectionAdaptor,
    pub decoder: Decoder,
    pub log_inv_tau: ParamId,
    pub da_head: Option<ClassifierHead>,
    pub instructions: InstructionSet,
    /// class_id -> surrogate caption, the template oracle's table.
    pub caption_table: BTreeMap<u32, String>,
}

impl Pipeline {
    /// Builds every component deterministically from the config seed. The
    /// domain-adaptation head is absent until Stage II initializes it.
    pub fn init(cfg: &RunConfig, meta: &DatasetMeta) -> Result<Pipeline> {
        cfg.validate()?;
        let m = cfg.model.clone();
        let root = SeedRng::new(cfg.seed);
        let mut store = ParamStore::new();

        let tok_cfg = TokenizerConfig {
            kernel: m.tok_kernel,
            stride: m.tok_stride,
            out_channels: m.tok_channels,
        };
        let (_, _, _, l_tok) = token_grid_shape(meta.grid, &tok_cfg)?;
        if l_tok != m.n_queries {
            return Err(Error::validation(format!(
                "tokenizer yields {l_tok} tokens but the Q-Former emits {}; \
                 token-level reconstruction needs equal counts (adjust kernel/stride)",
                m.n_queries
            )));
        }
        let tokenizer = Tokenizer::init(
            &mut store,
            GROUP_TOKENIZER,
            tok_cfg,
            meta.t_frames,
            &mut root.derive("init/tokenizer"),
        )?;

        let enc_cfg = EncoderConfig {
            depth: m.fmri_depth,
            width: m.d,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
        };
        let fmri_encoder = FmriEncoder::init(
            &mut store,
            GROUP_FMRI_ENCODER,
            enc_cfg.clone(),
            l_tok,
            m.tok_channels,
            &mut root.derive("init/fmri_encoder"),
        )?;
        let mae_head = MaeHead::init(
            &mut store,
            GROUP_MAE_HEAD,
            &enc_cfg,
            m.tok_channels,
            &mut root.derive("init/mae_head"),
        )?;

        let vit = VideoEncoder::init(
            &mut store,
            GROUP_VIT,
            EncoderConfig {
                depth: m.vit_depth,
                width: m.d,
                heads: m.heads,
                mlp_ratio: m.mlp_ratio,
            },
            meta.video_shape(),
            m.patch,
            &mut root.derive("init/vit"),
        )?;
        let warmup_head = LinearHead::init(
            &mut store,
            GROUP_WARMUP_HEAD,
            "warmup",
            m.d,
            meta.n_classes(),
            &mut root.derive("init/warmup_head"),
        )?;

        let qformer = QFormer::init(
            &mut store,
            GROUP_QFORMER,
            EncoderConfig {
                depth: m.qformer_depth,
                width: m.d,
                heads: m.heads,
                mlp_ratio: m.mlp_ratio,
            },
            m.n_queries,
            &mut root.derive("init/qformer"),
        )?;

        let mut fmri_bank = AdaptorBank::new();
        {
            let mut rng = root.derive("init/fmri_adaptors");
            for module_id in fmri_encoder.module_ids() {
                for site in [AdaptorSite::QueryProj, AdaptorSite::Mlp] {
                    fmri_bank.insert(
                        &mut store,
                        GROUP_FMRI_ADAPTORS,
                        &module_id,
                        site,
                        m.d,
                        m.adaptor_rank,
                        &mut rng,
                    )?;
                }
            }
        }
        let mut qformer_bank = AdaptorBank::new();
        {
            let mut rng = root.derive("init/qformer_adaptors");
            for module_id in qformer.module_ids() {
                for site in [AdaptorSite::QueryProj, AdaptorSite::Mlp] {
                    qformer_bank.insert(
                        &mut store,
                        GROUP_QFORMER_ADAPTORS,
                        &module_id,
                        site,
                        m.d,
                        m.adaptor_rank,
                        &mut rng,
                    )?;
                }
            }
        }

        let projection = ProjectionAdaptor::init(
            &mut store,
            GROUP_PROJECTION,
            m.d,
            m.adaptor_rank,
            m.d,
            &mut root.derive("init/projection"),
        )?;

        let instructions = InstructionSet::default_set();
        let caption_table: BTreeMap<u32, String> = meta
            .classes
            .iter()
            .enumerate()
            .map(|(c, label)| (c as u32, caption_for_label(label)))
            .collect();
        let corpus: Vec<String> = caption_table
            .values()
            .cloned()
            .chain(instructions.all().iter().cloned())
            .collect();
        let vocab = Vocab::build(corpus.iter().map(|s| s.as_str()))?;
        let decoder = Decoder::init(
            &mut store,
            GROUP_DECODER,
            DecoderConfig {
                depth: m.decoder_depth,
                width: m.d,
                heads: m.heads,
                mlp_ratio: m.mlp_ratio,
                max_len: m.max_len,
            },
            vocab,
            &mut root.derive("init/decoder"),
        )?;

        let log_inv_tau = store.insert(
            GROUP_TAU,
            "tau.log_inv",
            Tensor::from_vec(&[1], vec![(1.0 / cfg.stage1.tau_init).ln()])?,
        )?;

        Ok(Pipeline {
            model: m,
            meta: meta.clone(),
            store,
            tokenizer,
            fmri_encoder,
            mae_head,
            vit,
            warmup_head,
            qformer,
            fmri_bank,
            qformer_bank,
            projection,
            decoder,
            log_inv_tau,
            da_head: None,
            instructions,
            caption_table,
        })
    }

    pub fn tau(&self) -> f64 {
        (-self.store.get(self.log_inv_tau).data()[0]).exp()
    }

    /// Clamps the learnable temperature into [min, max] after an update.
    pub fn clamp_tau(&mut self, min: f64, max: f64) -> Result<()> {
        let lit = self.store.get(self.log_inv_tau).data()[0];
        let clamped = lit.clamp((1.0 / max).ln(), (1.0 / min).ln());
        if clamped != lit {
            self.store
                .set(self.log_inv_tau, Tensor::from_vec(&[1], vec![clamped])?)?;
        }
        Ok(())
    }

    /// Creates the Stage II classifier head from initial prototype rows.
    /// Loading a checkpoint that already contains one is the other entry point.
    pub fn init_da_head(&mut self, init_rows: &Tensor) -> Result<()> {
        if self.da_head.is_some() {
            return Err(Error::validation("domain-adaptation head already initialized"));
        }
        let head = ClassifierHead::init(
            &mut self.store,
            GROUP_DA_HEAD,
            init_rows.dim(0),
            self.model.d,
            init_rows,
        )?;
        self.da_head = Some(head);
        Ok(())
    }

    /// fMRI path up to the encoder output: tokenizer -> bridge/encoder with
    /// the low-rank adaptor bank. Shape [L, d].
    pub fn fmri_encode_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        fmri: &Tensor,
        adaptors: bool,
    ) -> Result<NodeId> {
        let input = g.constant(fmri.clone());
        let tokens = self.tokenizer.forward(g, binder, input)?;
        let bank = adaptors.then_some(&self.fmri_bank);
        self.fmri_encoder.forward(g, binder, tokens, bank)
    }

    /// Projection-adaptor output tokens and their mean-pooled embedding.
    pub fn project_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        encoded: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let zhat = self.projection.forward(g, binder, encoded)?;
        let pooled = g.mean_pool_rows(zhat)?;
        Ok((zhat, pooled))
    }

    /// Full fMRI path: tokens [L, d] in decoder space plus pooled embedding.
    pub fn fmri_zhat_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        fmri: &Tensor,
    ) -> Result<(NodeId, NodeId)> {
        let enc = self.fmri_encode_graph(g, binder, fmri, true)?;
        self.project_graph(g, binder, enc)
    }

    /// Video path from precomputed ViT patch tokens: Q-Former with adaptors,
    /// returning query tokens and their pooled embedding.
    pub fn video_z_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        vit_tokens: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let z = self.qformer.forward(g, binder, vit_tokens, Some(&self.qformer_bank))?;
        let pooled = g.mean_pool_rows(z)?;
        Ok((z, pooled))
    }

    fn no_grad<T>(&self, f: impl FnOnce(&mut Graph, &mut Binder<'_>) -> Result<T>) -> Result<T> {
        let mut g = Graph::new();
        let none = BTreeSet::new();
        let mut binder = Binder::new(&self.store, &none);
        f(&mut g, &mut binder)
    }

    /// Frozen ViT forward as a plain tensor, for caching.
    pub fn vit_tokens_tensor(&self, video: &Tensor) -> Result<Tensor> {
        self.no_grad(|g, binder| {
            let v = g.constant(video.clone());
            let out = self.vit.forward(g, binder, v)?;
            Ok(g.value(out).clone())
        })
    }

    /// Frozen fMRI encoder output (with adaptor bank) as a plain tensor.
    pub fn fmri_encoded_tensor(&self, fmri: &Tensor) -> Result<Tensor> {
        self.no_grad(|g, binder| {
            let out = self.fmri_encode_graph(g, binder, fmri, true)?;
            Ok(g.value(out).clone())
        })
    }

    /// Decoder media tokens for one fMRI volume series (the zhat tokens).
    pub fn fmri_media_tensor(&self, fmri: &Tensor) -> Result<Tensor> {
        self.no_grad(|g, binder| {
            let (zhat, _) = self.fmri_zhat_graph(g, binder, fmri)?;
            Ok(g.value(zhat).clone())
        })
    }

    /// Decoder media tokens for one video clip (Q-Former output).
    pub fn video_media_tensor(&self, video: &Tensor) -> Result<Tensor> {
        self.no_grad(|g, binder| {
            let v = g.constant(video.clone());
            let patches = self.vit.forward(g, binder, v)?;
            let (z, _) = self.video_z_graph(g, binder, patches)?;
            Ok(g.value(z).clone())
        })
    }

    /// Pooled projection embedding computed from a cached encoder output.
    pub fn pooled_from_encoded(&self, encoded: &Tensor) -> Result<Vec<f64>> {
        self.no_grad(|g, binder| {
            let enc = g.constant(encoded.clone());
            let (_, pooled) = self.project_graph(g, binder, enc)?;
            Ok(g.value(pooled).data().to_vec())
        })
    }

    pub fn fmri_pooled_embed(&self, fmri: &Tensor) -> Result<Vec<f64>> {
        self.no_grad(|g, binder| {
            let (_, pooled) = self.fmri_zhat_graph(g, binder, fmri)?;
            Ok(g.value(pooled).data().to_vec())
        })
    }

    pub fn video_pooled_embed(&self, video: &Tensor) -> Result<Vec<f64>> {
        self.no_grad(|g, binder| {
            let v = g.constant(video.clone());
            let patches = self.vit.forward(g, binder, v)?;
            let (_, pooled) = self.video_z_graph(g, binder, patches)?;
            Ok(g.value(pooled).data().to_vec())
        })
    }

    /// Batch-wise fMRI -> video top-1 retrieval accuracy over fixed,
    /// deterministic batches; the trailing short batch is dropped.
    pub fn retrieval_top1(
        &self,
        ds: &Dataset,
        pool: &[usize],
        batch: usize,
        log: &AccessLog,
    ) -> Result<f64> {
        if batch < 2 || pool.len() < batch {
            return Err(Error::validation(format!(
                "retrieval needs a pool of >= {batch} samples, got {}",
                pool.len()
            )));
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for chunk in pool.chunks_exact(batch) {
            let mut zh = Vec::with_capacity(batch);
            let mut zv = Vec::with_capacity(batch);
            for &idx in chunk {
                let s = ds.get(idx);
                zh.push(self.fmri_pooled_embed(s.fmri(log))?);
                zv.push(self.video_pooled_embed(s.video(log))?);
            }
            for (i, h) in zh.iter().enumerate() {
                let mut best = (f64::NEG_INFINITY, 0usize);
                for (j, v) in zv.iter().enumerate() {
                    let sim = cosine_similarity(h, v)?;
                    if sim > best.0 {
                        best = (sim, j);
                    }
                }
                if best.1 == i {
                    correct += 1;
                }
            }
            total += batch;
        }
        Ok(correct as f64 / total as f64)
    }

    /// Per-class mean of pooled fMRI embeddings over the given samples.
    /// Initial Stage II prototypes; every class must be represented.
    pub fn class_centroids(
        &self,
        ds: &Dataset,
        pool: &[usize],
        log: &AccessLog,
    ) -> Result<Tensor> {
        let c = self.meta.n_classes();
        let d = self.model.d;
        let mut sums = vec![0.0; c * d];
        let mut counts = vec![0usize; c];
        for &idx in pool {
            let s = ds.get(idx);
            let class = s.class_id(log) as usize;
            let e = self.fmri_pooled_embed(s.fmri(log))?;
            for (k, v) in e.iter().enumerate() {
                sums[class * d + k] += v;
            }
            counts[class] += 1;
        }
        for (class, &n) in counts.iter().enumerate() {
            if n == 0 {
                return Err(Error::validation(format!(
                    "class {class} has no samples to build a prototype from"
                )));
            }
            for k in 0..d {
                sums[class * d + k] /= n as f64;
            }
        }
        Tensor::from_vec(&[c, d], sums)
    }

    /// The surrogate caption the template oracle would produce, also used as
    /// the reference during evaluation.
    pub fn reference_caption(&self, class_id: u32) -> Result<&str> {
        self.caption_table
            .get(&class_id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::validation(format!("no caption template for class {class_id}")))
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use crate::training::config::RunConfig;

    /// A few-second config: 2 subjects, tiny grid, shallow blocks.
    pub fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.n_subjects = 2;
        cfg.data.samples_per_subject = 16;
        cfg.data.n_classes = 2;
        cfg.data.grid = [8, 8, 8];
        cfg.data.t_frames = 2;
        cfg.data.f_frames = 2;
        cfg.data.frame_size = 16;
        cfg.data.target_subjects = vec![1];
        cfg.model.d = 32;
        cfg.model.heads = 2;
        cfg.model.fmri_depth = 2;
        cfg.model.vit_depth = 1;
        cfg.model.qformer_depth = 1;
        cfg.model.decoder_depth = 2;
        cfg.model.n_queries = 4;
        cfg.model.patch = 8;
        cfg.model.tok_kernel = [4, 4, 8];
        cfg.model.tok_stride = [4, 4, 8];
        cfg.model.tok_channels = 16;
        cfg.model.adaptor_rank = 4;
        cfg.model.max_len = 40;
        cfg.pretrain.mae_steps = 5;
        cfg.pretrain.warmup_steps = 5;
        cfg.pretrain.lm_steps = 5;
        cfg.pretrain.mae_batch = 4;
        cfg.pretrain.warmup_batch = 4;
        cfg.pretrain.lm_batch = 4;
        cfg.stage1.steps = 5;
        cfg.stage1.batch_size = 4;
        cfg.stage2.steps = 5;
        cfg.stage2.source_batch = 4;
        cfg.stage2.target_batch = 4;
        cfg.eval.retrieval_batch = 4;
        cfg.validate().unwrap();
        cfg
    }

    pub fn tiny_world() -> (RunConfig, Dataset, Pipeline) {
        let cfg = tiny_config();
        let ds = generate_synthetic_dataset(&cfg.data.synth(cfg.seed)).unwrap();
        let p = Pipeline::init(&cfg, &ds.meta).unwrap();
        (cfg, ds, p)
    }
}
