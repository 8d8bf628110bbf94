//! Phase drivers: masked-autoencoder pretraining, ViT warm-up, decoder
//! language-model pretraining, Stage I alignment, and Stage II instruction
//! tuning with domain adaptation.
//!
//! Every driver keys batches and per-step randomness off the absolute step
//! index, so a run split into segments (checkpoint, reload, continue) is
//! bit-identical to an uninterrupted one.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AccessLog, Dataset};
use crate::decoder::{assemble_prompt, CaptionOracle};
use crate::domain_adaptation::{es_loss_graph, nc_loss_graph, MemoryPool};
use crate::encoders::{mae_loss, MaskingPlan};
use crate::error::{Error, Result};
use crate::evaluation::DecodeRecord;
use crate::losses::{
    ce_loss_graph, clip_loss_graph, recon_l2l1_graph, stage1_total_graph, stage2_total_graph,
};
use crate::numerics::graph::Graph;
use crate::numerics::Tensor;
use crate::params::Binder;
use crate::tokenizer::tokenize_tensor;
use crate::training::config::RunConfig;
use crate::training::optimizer::{cosine_scale, AdamConfig, AdamW};
use crate::training::pipeline::{
    Pipeline, TrainPhase, GROUP_FMRI_ADAPTORS, GROUP_PROJECTION, GROUP_QFORMER_ADAPTORS,
    GROUP_TAU, GROUP_TOKENIZER,
};
use crate::training::schedule::{batch_for_step, step_rng};

/// One line of the run's metric log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetric {
    pub phase: String,
    pub step: usize,
    #[serde(flatten)]
    pub values: BTreeMap<String, f64>,
}

impl StepMetric {
    pub fn new(phase: &str, step: usize, values: &[(&str, f64)]) -> StepMetric {
        StepMetric {
            phase: phase.to_string(),
            step,
            values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

/// Collects metric lines in memory and, optionally, appends them to a
/// line-delimited JSON file.
pub struct MetricsSink {
    writer: Option<std::io::BufWriter<std::fs::File>>,
    pub history: Vec<StepMetric>,
}

impl MetricsSink {
    pub fn memory() -> MetricsSink {
        MetricsSink {
            writer: None,
            history: Vec::new(),
        }
    }

    pub fn file(path: &Path) -> Result<MetricsSink> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsSink {
            writer: Some(std::io::BufWriter::new(file)),
            history: Vec::new(),
        })
    }

    pub fn push(&mut self, m: StepMetric) -> Result<()> {
        if let Some(w) = &mut self.writer {
            let line = serde_json::to_string(&m)
                .map_err(|e| Error::Runtime(format!("metric serialize: {e}")))?;
            writeln!(w, "{line}").map_err(|e| Error::Runtime(format!("metric write: {e}")))?;
        }
        self.history.push(m);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush().map_err(|e| Error::Runtime(format!("metric flush: {e}")))?;
        }
        Ok(())
    }

    /// Losses for one phase in step order, for quick curve checks.
    pub fn losses(&self, phase: &str) -> Vec<f64> {
        self.history
            .iter()
            .filter(|m| m.phase == phase)
            .filter_map(|m| m.values.get("loss").copied())
            .collect()
    }
}

fn scalar(g: &Graph, node: crate::numerics::graph::NodeId) -> f64 {
    g.value(node).data()[0]
}

/// NaN policy: abort and dump the offending batch rather than skip it.
fn guard_finite(
    loss: f64,
    phase: &str,
    step: usize,
    ds: &Dataset,
    batch: &[usize],
    dump_dir: Option<&Path>,
) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let ids: Vec<u32> = batch.iter().map(|&i| ds.get(i).id()).collect();
    let mut where_dumped = String::from("no dump directory configured");
    if let Some(dir) = dump_dir {
        let path: PathBuf = dir.join(format!("bad_batch_step{step}.json"));
        let payload = serde_json::json!({
            "phase": phase,
            "step": step,
            "loss": format!("{loss}"),
            "sample_ids": ids,
            "pool_indices": batch,
        });
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(&path, serde_json::to_string_pretty(&payload).unwrap())
            .map_err(|e| Error::io(&path, e))?;
        where_dumped = format!("batch dumped to {}", path.display());
    }
    Err(Error::NonFinite(format!(
        "{phase} loss {loss} at step {step}; {where_dumped}"
    )))
}

// ---------------------------------------------------------------------------
// Pretraining: MAE -> ViT warm-up -> decoder LM
// ---------------------------------------------------------------------------

/// Masked-autoencoder pretraining of the fMRI encoder over frozen tokenizer
/// output.
pub fn run_mae(
    cfg: &RunConfig,
    ds: &Dataset,
    pool: &[usize],
    pipeline: &mut Pipeline,
    sink: &mut MetricsSink,
    log: &AccessLog,
    dump_dir: Option<&Path>,
) -> Result<()> {
    let phase = TrainPhase::Mae;
    let trainable = phase.trainable();
    let mut opt = AdamW::uniform(
        AdamConfig {
            weight_decay: cfg.pretrain.weight_decay,
            ..AdamConfig::default()
        },
        &trainable,
        cfg.pretrain.lr,
    );

    // The tokenizer is frozen here, so its output per sample is a constant.
    let mut token_cache: HashMap<u32, Tensor> = HashMap::new();
    for &idx in pool {
        let s = ds.get(idx);
        token_cache.insert(
            s.id(),
            tokenize_tensor(&pipeline.tokenizer, &pipeline.store, s.fmri(log))?,
        );
    }

    let total = cfg.pretrain.mae_steps;
    let l_tok = pipeline.fmri_encoder.n_tokens;
    for step in 0..total {
        let batch = batch_for_step(pool, cfg.pretrain.mae_batch, cfg.seed, "pretrain/mae", step)?;
        let mut mask_rng = step_rng(cfg.seed, "pretrain/mae/mask", step);
        let (loss_val, grads) = {
            let mut g = Graph::new();
            let mut binder = Binder::new(&pipeline.store, &trainable);
            let mut terms = Vec::with_capacity(batch.len());
            for &idx in &batch {
                let tokens = g.constant(token_cache[&ds.get(idx).id()].clone());
                let plan = MaskingPlan::sample(l_tok, cfg.pretrain.mask_ratio, &mut mask_rng)?;
                terms.push(mae_loss(
                    &mut g,
                    &mut binder,
                    &pipeline.fmri_encoder,
                    &pipeline.mae_head,
                    tokens,
                    &plan,
                )?);
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t)?;
            }
            let loss = g.scale(acc, 1.0 / terms.len() as f64)?;
            let loss_val = scalar(&g, loss);
            let mut gs = g.backward(loss)?;
            (loss_val, binder.collect_grads(&mut gs))
        };
        guard_finite(loss_val, "pretrain/mae", step, ds, &batch, dump_dir)?;
        opt.step(&mut pipeline.store, grads, cosine_scale(step, total))?;
        sink.push(StepMetric::new("pretrain/mae", step, &[("loss", loss_val)]))?;
    }
    Ok(())
}

/// Class-supervised warm-up of the video encoder via a small linear head.
pub fn run_vit_warmup(
    cfg: &RunConfig,
    ds: &Dataset,
    pool: &[usize],
    pipeline: &mut Pipeline,
    sink: &mut MetricsSink,
    log: &AccessLog,
    dump_dir: Option<&Path>,
) -> Result<()> {
    let trainable = TrainPhase::VitWarmup.trainable();
    let mut opt = AdamW::uniform(
        AdamConfig {
            weight_decay: cfg.pretrain.weight_decay,
            ..AdamConfig::default()
        },
        &trainable,
        cfg.pretrain.lr,
    );
    let total = cfg.pretrain.warmup_steps;
    for step in 0..total {
        let batch = batch_for_step(
            pool,
            cfg.pretrain.warmup_batch,
            cfg.seed,
            "pretrain/warmup",
            step,
        )?;
        let (loss_val, grads) = {
            let mut g = Graph::new();
            let mut binder = Binder::new(&pipeline.store, &trainable);
            let mut per_sample = Vec::with_capacity(batch.len());
            for &idx in &batch {
                let s = ds.get(idx);
                let video = g.constant(s.video(log).clone());
                let patches = pipeline.vit.forward(&mut g, &mut binder, video)?;
                let pooled = g.mean_pool_rows(patches)?;
                let logits = pipeline.warmup_head.forward(&mut g, &mut binder, pooled)?;
                per_sample.push((logits, vec![s.class_id(log) as usize]));
            }
            let loss = ce_loss_graph(&mut g, &per_sample)?;
            let loss_val = scalar(&g, loss);
            let mut gs = g.backward(loss)?;
            (loss_val, binder.collect_grads(&mut gs))
        };
        guard_finite(loss_val, "pretrain/warmup", step, ds, &batch, dump_dir)?;
        opt.step(&mut pipeline.store, grads, cosine_scale(step, total))?;
        sink.push(StepMetric::new(
            "pretrain/warmup",
            step,
            &[("loss", loss_val)],
        ))?;
    }
    Ok(())
}

/// Caption language-model pretraining of the decoder (and Q-Former) on
/// video media tokens, with the ViT frozen.
pub fn run_decoder_lm(
    cfg: &RunConfig,
    ds: &Dataset,
    pool: &[usize],
    pipeline: &mut Pipeline,
    sink: &mut MetricsSink,
    log: &AccessLog,
    dump_dir: Option<&Path>,
) -> Result<()> {
    let trainable = TrainPhase::DecoderLm.trainable();
    let mut opt = AdamW::uniform(
        AdamConfig {
            weight_decay: cfg.pretrain.weight_decay,
            ..AdamConfig::default()
        },
        &trainable,
        cfg.pretrain.lr,
    );

    let mut vit_cache: HashMap<u32, Tensor> = HashMap::new();
    for &idx in pool {
        let s = ds.get(idx);
        vit_cache.insert(s.id(), pipeline.vit_tokens_tensor(s.video(log))?);
    }

    let total = cfg.pretrain.lm_steps;
    for step in 0..total {
        let batch = batch_for_step(pool, cfg.pretrain.lm_batch, cfg.seed, "pretrain/lm", step)?;
        let mut irng = step_rng(cfg.seed, "pretrain/lm/instr", step);
        let (loss_val, grads) = {
            let mut g = Graph::new();
            let mut binder = Binder::new(&pipeline.store, &trainable);
            let mut per_sample = Vec::with_capacity(batch.len());
            for &idx in &batch {
                let s = ds.get(idx);
                let patches = g.constant(vit_cache[&s.id()].clone());
                let media = pipeline.qformer.forward(&mut g, &mut binder, patches, None)?;
                let instruction = pipeline.instructions.draw(&mut irng).to_string();
                let asm = assemble_prompt(
                    &pipeline.decoder.vocab,
                    pipeline.model.n_queries,
                    &instruction,
                    Some(s.caption(log)),
                )?;
                let logits = pipeline.decoder.forward_logits(&mut g, &mut binder, media, &asm)?;
                let answer_rows = g.gather_rows(logits, &asm.loss_positions)?;
                per_sample.push((answer_rows, asm.targets));
            }
            let loss = ce_loss_graph(&mut g, &per_sample)?;
            let loss_val = scalar(&g, loss);
            let mut gs = g.backward(loss)?;
            (loss_val, binder.collect_grads(&mut gs))
        };
        guard_finite(loss_val, "pretrain/lm", step, ds, &batch, dump_dir)?;
        opt.step(&mut pipeline.store, grads, cosine_scale(step, total))?;
        sink.push(StepMetric::new("pretrain/lm", step, &[("loss", loss_val)]))?;
    }
    Ok(())
}

/// All three pretraining segments in order, each audited against its own
/// trainable set.
pub fn run_pretrain(
    cfg: &RunConfig,
    ds: &Dataset,
    pool: &[usize],
    pipeline: &mut Pipeline,
    sink: &mut MetricsSink,
    log: &AccessLog,
    dump_dir: Option<&Path>,
) -> Result<Vec<crate::training::freeze::FreezeReport>> {
    use crate::training::freeze::{freeze_audit, snapshot};
    let mut reports = Vec::new();
    let segments: [(&str, TrainPhase); 3] = [
        ("pretrain/mae", TrainPhase::Mae),
        ("pretrain/warmup", TrainPhase::VitWarmup),
        ("pretrain/lm", TrainPhase::DecoderLm),
    ];
    for (name, phase) in segments {
        let before = snapshot(&pipeline.store);
        match phase {
            TrainPhase::Mae => run_mae(cfg, ds, pool, pipeline, sink, log, dump_dir)?,
            TrainPhase::VitWarmup => {
                run_vit_warmup(cfg, ds, pool, pipeline, sink, log, dump_dir)?
            }
            TrainPhase::DecoderLm => {
                run_decoder_lm(cfg, ds, pool, pipeline, sink, log, dump_dir)?
            }
            _ => unreachable!(),
        }
        let after = snapshot(&pipeline.store);
        let report = freeze_audit(name, &before, &after, &phase.trainable())?;
        if !report.is_clean() {
            return Err(Error::Runtime(format!(
                "freeze violation in {name}: {:?}",
                report.violations()
            )));
        }
        reports.push(report);
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Stage I: cross-modal alignment
// ---------------------------------------------------------------------------

/// Stage I trainer. Owns the optimizer and the frozen-ViT cache so a run can
/// be executed in segments with checkpoints in between.
pub struct Stage1Driver {
    pool: Vec<usize>,
    vit_cache: HashMap<u32, Tensor>,
    pub opt: AdamW,
    log: AccessLog,
}

impl Stage1Driver {
    pub fn new(
        cfg: &RunConfig,
        ds: &Dataset,
        pool: Vec<usize>,
        pipeline: &Pipeline,
        base_log: &AccessLog,
    ) -> Result<Stage1Driver> {
        let mut lrs = BTreeMap::new();
        lrs.insert(GROUP_TOKENIZER.to_string(), cfg.stage1.lr_tokenizer);
        for group in [
            GROUP_FMRI_ADAPTORS,
            GROUP_QFORMER_ADAPTORS,
            GROUP_PROJECTION,
            GROUP_TAU,
        ] {
            lrs.insert(group.to_string(), cfg.stage1.lr_adaptors);
        }
        let adam = AdamConfig {
            weight_decay: cfg.stage1.weight_decay,
            no_decay_groups: [GROUP_TAU.to_string()].into_iter().collect(),
            ..AdamConfig::default()
        };
        let opt = AdamW::new(adam, lrs);

        let log = base_log.scoped(TrainPhase::Stage1.label());
        let mut vit_cache = HashMap::new();
        for &idx in &pool {
            let s = ds.get(idx);
            vit_cache.insert(s.id(), pipeline.vit_tokens_tensor(s.video(&log))?);
        }
        Ok(Stage1Driver {
            pool,
            vit_cache,
            opt,
            log,
        })
    }

    /// Runs steps `[from, to)` of the configured schedule.
    pub fn run(
        &mut self,
        cfg: &RunConfig,
        ds: &Dataset,
        pipeline: &mut Pipeline,
        from: usize,
        to: usize,
        sink: &mut MetricsSink,
        dump_dir: Option<&Path>,
    ) -> Result<()> {
        let total = cfg.stage1.steps;
        if to > total || from > to {
            return Err(Error::validation(format!(
                "stage1 segment [{from}, {to}) outside schedule of {total} steps"
            )));
        }
        let trainable = TrainPhase::Stage1.trainable();
        for step in from..to {
            let batch =
                batch_for_step(&self.pool, cfg.stage1.batch_size, cfg.seed, "stage1", step)?;
            let (loss_val, clip_val, recon_val, grads) = {
                let mut g = Graph::new();
                let mut binder = Binder::new(&pipeline.store, &trainable);
                let mut zh_rows = Vec::with_capacity(batch.len());
                let mut zv_rows = Vec::with_capacity(batch.len());
                let mut pairs = Vec::with_capacity(batch.len());
                for &idx in &batch {
                    let s = ds.get(idx);
                    let (zhat, pooled_h) =
                        pipeline.fmri_zhat_graph(&mut g, &mut binder, s.fmri(&self.log))?;
                    let patches = g.constant(self.vit_cache[&s.id()].clone());
                    let (z, pooled_v) = pipeline.video_z_graph(&mut g, &mut binder, patches)?;
                    zh_rows.push(pooled_h);
                    zv_rows.push(pooled_v);
                    // The video tokens are regression targets here: gradients
                    // from the reconstruction term must not reshape the video
                    // branch, or both sides drift to a shared constant and the
                    // contrastive term parks at its uniform saddle. The video
                    // branch keeps learning, through the CLIP term only.
                    let z_target = g.constant(g.value(z).clone());
                    pairs.push((z_target, zhat));
                }
                let zh = g.concat_rows(&zh_rows)?;
                let zv = g.concat_rows(&zv_rows)?;
                let tau_node = binder.node(&mut g, pipeline.log_inv_tau);
                let l_clip = clip_loss_graph(&mut g, zh, zv, tau_node)?;
                let l_recon = recon_l2l1_graph(&mut g, &pairs, cfg.stage1.alpha)?;
                let loss = stage1_total_graph(&mut g, l_clip, l_recon, cfg.stage1.beta)?;
                let vals = (scalar(&g, loss), scalar(&g, l_clip), scalar(&g, l_recon));
                let mut gs = g.backward(loss)?;
                (vals.0, vals.1, vals.2, binder.collect_grads(&mut gs))
            };
            guard_finite(loss_val, "stage1", step, ds, &batch, dump_dir)?;
            self.opt
                .step(&mut pipeline.store, grads, cosine_scale(step, total))?;
            pipeline.clamp_tau(cfg.stage1.tau_min, cfg.stage1.tau_max)?;
            sink.push(StepMetric::new(
                "stage1",
                step,
                &[
                    ("loss", loss_val),
                    ("clip", clip_val),
                    ("recon", recon_val),
                    ("tau", pipeline.tau()),
                ],
            ))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stage II: instruction tuning with domain adaptation
// ---------------------------------------------------------------------------

/// Stage II trainer. Owns the optimizer, the frozen-path feature caches, the
/// target memory pool, and the surrogate-caption oracle.
pub struct Stage2Driver {
    src_pool: Vec<usize>,
    tgt_pool: Vec<usize>,
    src_cache: HashMap<u32, Tensor>,
    tgt_cache: HashMap<u32, Tensor>,
    pub opt: AdamW,
    pub pool: MemoryPool,
    pub oracle: CaptionOracle,
    oracle_window: VecDeque<bool>,
    log: AccessLog,
}

impl Stage2Driver {
    /// Builds caches over the frozen encoder path and initializes the memory
    /// pool from the target adaptation set. The pipeline must already carry a
    /// domain-adaptation head.
    pub fn new(
        cfg: &RunConfig,
        ds: &Dataset,
        src_pool: Vec<usize>,
        tgt_pool: Vec<usize>,
        pipeline: &Pipeline,
        base_log: &AccessLog,
    ) -> Result<Stage2Driver> {
        if pipeline.da_head.is_none() {
            return Err(Error::validation(
                "stage2 needs the domain-adaptation head initialized first",
            ));
        }
        let opt = AdamW::uniform(
            AdamConfig {
                weight_decay: cfg.stage2.weight_decay,
                ..AdamConfig::default()
            },
            &TrainPhase::Stage2.trainable(),
            cfg.stage2.lr,
        );
        let log = base_log.scoped(TrainPhase::Stage2.label());

        let mut src_cache = HashMap::new();
        for &idx in &src_pool {
            let s = ds.get(idx);
            src_cache.insert(s.id(), pipeline.fmri_encoded_tensor(s.fmri(&log))?);
        }
        let mut tgt_cache = HashMap::new();
        let mut ids = Vec::with_capacity(tgt_pool.len());
        let mut feats = Vec::new();
        for &idx in &tgt_pool {
            let s = ds.get(idx);
            let enc = pipeline.fmri_encoded_tensor(s.fmri(&log))?;
            feats.extend(pipeline.pooled_from_encoded(&enc)?);
            tgt_cache.insert(s.id(), enc);
            ids.push(s.id());
        }
        let pool = MemoryPool::from_features(
            ids,
            Tensor::from_vec(&[tgt_pool.len(), pipeline.model.d], feats)?,
        )?;

        Ok(Stage2Driver {
            src_pool,
            tgt_pool,
            src_cache,
            tgt_cache,
            opt,
            pool,
            oracle: CaptionOracle::template(pipeline.caption_table.clone()),
            oracle_window: VecDeque::new(),
            log,
        })
    }

    fn note_oracle(&mut self, cfg: &RunConfig, ok: bool) -> Result<()> {
        self.oracle_window.push_back(ok);
        while self.oracle_window.len() > cfg.stage2.oracle_window {
            self.oracle_window.pop_front();
        }
        let failures = self.oracle_window.iter().filter(|&&b| !b).count();
        let rate = failures as f64 / self.oracle_window.len() as f64;
        // The rate is only meaningful over a full window; a lone failure in
        // the first few calls must not kill the run.
        if self.oracle_window.len() == cfg.stage2.oracle_window
            && rate > cfg.stage2.oracle_max_failure_rate
        {
            return Err(Error::Runtime(format!(
                "caption oracle failure rate {rate:.2} over the last {} calls exceeds {}",
                self.oracle_window.len(),
                cfg.stage2.oracle_max_failure_rate
            )));
        }
        Ok(())
    }

    /// Runs steps `[from, to)` of the configured schedule.
    pub fn run(
        &mut self,
        cfg: &RunConfig,
        ds: &Dataset,
        pipeline: &mut Pipeline,
        from: usize,
        to: usize,
        sink: &mut MetricsSink,
        dump_dir: Option<&Path>,
    ) -> Result<()> {
        let total = cfg.stage2.steps;
        if to > total || from > to {
            return Err(Error::validation(format!(
                "stage2 segment [{from}, {to}) outside schedule of {total} steps"
            )));
        }
        let lambda = cfg.stage2.lambda;
        let trainable = TrainPhase::Stage2.trainable();
        let rho = cfg.rho();
        for step in from..to {
            let src_batch = if lambda > 0.0 {
                batch_for_step(
                    &self.src_pool,
                    cfg.stage2.source_batch,
                    cfg.seed,
                    "stage2/src",
                    step,
                )?
            } else {
                Vec::new()
            };
            let tgt_batch = if lambda < 1.0 {
                batch_for_step(
                    &self.tgt_pool,
                    cfg.stage2.target_batch,
                    cfg.seed,
                    "stage2/tgt",
                    step,
                )?
            } else {
                Vec::new()
            };
            let mut irng = step_rng(cfg.seed, "stage2/instr", step);

            // Surrogate captions come from the oracle outside the graph so
            // failures hit the sliding window before any loss is formed.
            let mut ce_inputs = Vec::with_capacity(src_batch.len());
            for &idx in &src_batch {
                let s = ds.get(idx);
                let class_id = s.class_id(&self.log);
                let label = pipeline
                    .meta
                    .classes
                    .get(class_id as usize)
                    .map(|s| s.as_str())
                    .unwrap_or("unknown");
                let instruction = pipeline.instructions.draw(&mut irng).to_string();
                match self.oracle.surrogate(class_id, label, &instruction) {
                    Ok(caption) => {
                        self.note_oracle(cfg, true)?;
                        ce_inputs.push((s.id(), instruction, caption));
                    }
                    Err(_) => self.note_oracle(cfg, false)?,
                }
            }
            if lambda > 0.0 && ce_inputs.is_empty() {
                return Err(Error::Runtime(format!(
                    "stage2 step {step}: no usable surrogate captions in batch"
                )));
            }

            let (loss_val, ce_val, nc_val, es_val, tgt_features, grads) = {
                let mut g = Graph::new();
                let mut binder = Binder::new(&pipeline.store, &trainable);

                let ce_node = if lambda > 0.0 {
                    let mut per_sample = Vec::with_capacity(ce_inputs.len());
                    for (id, instruction, caption) in &ce_inputs {
                        let enc = g.constant(self.src_cache[id].clone());
                        let (zhat, _) = pipeline.project_graph(&mut g, &mut binder, enc)?;
                        let asm = assemble_prompt(
                            &pipeline.decoder.vocab,
                            pipeline.model.n_queries,
                            instruction,
                            Some(caption),
                        )?;
                        let logits =
                            pipeline.decoder.forward_logits(&mut g, &mut binder, zhat, &asm)?;
                        let answer_rows = g.gather_rows(logits, &asm.loss_positions)?;
                        per_sample.push((answer_rows, asm.targets));
                    }
                    Some(ce_loss_graph(&mut g, &per_sample)?)
                } else {
                    None
                };

                let da_nodes = if lambda < 1.0 {
                    let head = pipeline.da_head.as_ref().unwrap();
                    let mut rows = Vec::with_capacity(tgt_batch.len());
                    let mut pool_rows = Vec::with_capacity(tgt_batch.len());
                    for &idx in &tgt_batch {
                        let s = ds.get(idx);
                        let enc = g.constant(self.tgt_cache[&s.id()].clone());
                        let (_, pooled) = pipeline.project_graph(&mut g, &mut binder, enc)?;
                        rows.push(pooled);
                        pool_rows.push(self.pool.row_of(s.id())?);
                    }
                    let features = g.concat_rows(&rows)?;
                    let nc = nc_loss_graph(
                        &mut g,
                        &mut binder,
                        features,
                        &pool_rows,
                        &self.pool,
                        head,
                        cfg.da.tau_nc,
                    )?;
                    let logits = head.class_logits(&mut g, &mut binder, features, cfg.da.tau_nc)?;
                    let es = es_loss_graph(&mut g, logits, rho, cfg.da.margin)?;
                    let da = g.add(nc, es)?;
                    Some((features, nc, es, da))
                } else {
                    None
                };

                let loss = match (ce_node, &da_nodes) {
                    (Some(ce), Some((_, _, _, da))) => {
                        stage2_total_graph(&mut g, ce, *da, lambda)?
                    }
                    (Some(ce), None) => ce,
                    (None, Some((_, _, _, da))) => *da,
                    (None, None) => {
                        return Err(Error::validation("stage2 with lambda outside [0, 1]"))
                    }
                };
                let loss_val = scalar(&g, loss);
                let ce_val = ce_node.map(|n| scalar(&g, n)).unwrap_or(0.0);
                let (nc_val, es_val) = da_nodes
                    .as_ref()
                    .map(|(_, nc, es, _)| (scalar(&g, *nc), scalar(&g, *es)))
                    .unwrap_or((0.0, 0.0));
                let tgt_features = da_nodes.map(|(f, _, _, _)| g.value(f).clone());
                let mut gs = g.backward(loss)?;
                (
                    loss_val,
                    ce_val,
                    nc_val,
                    es_val,
                    tgt_features,
                    binder.collect_grads(&mut gs),
                )
            };
            guard_finite(loss_val, "stage2", step, ds, &src_batch, dump_dir)?;
            self.opt
                .step(&mut pipeline.store, grads, cosine_scale(step, total))?;

            // Pool rows refresh to the features just used in the loss.
            if let Some(features) = tgt_features {
                let d = features.dim(1);
                for (row, &idx) in tgt_batch.iter().enumerate() {
                    let id = ds.get(idx).id();
                    self.pool
                        .update(id, &features.data()[row * d..(row + 1) * d])?;
                }
            }
            sink.push(StepMetric::new(
                "stage2",
                step,
                &[
                    ("loss", loss_val),
                    ("ce", ce_val),
                    ("nc", nc_val),
                    ("es", es_val),
                ],
            ))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Decoding for evaluation
// ---------------------------------------------------------------------------

/// Greedy-decodes every sample in the pool with its own instruction prompt.
/// Reads are logged under the given log's phase (use an evaluation scope).
pub fn decode_split(
    cfg: &RunConfig,
    ds: &Dataset,
    pool: &[usize],
    pipeline: &Pipeline,
    log: &AccessLog,
) -> Result<Vec<DecodeRecord>> {
    let mut records = Vec::with_capacity(pool.len());
    for &idx in pool {
        let s = ds.get(idx);
        let media = pipeline.fmri_media_tensor(s.fmri(log))?;
        let instruction = s.instruction();
        let (hypothesis, truncated) = pipeline.decoder.generate(
            &pipeline.store,
            &media,
            instruction,
            cfg.eval.max_new_tokens,
        )?;
        records.push(DecodeRecord::new(
            s.subject_id(),
            s.id(),
            instruction,
            s.caption(log),
            &hypothesis,
            truncated,
        )?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{audit_access, SubjectSplit};
    use crate::decoder::CaptionProvider;
    use crate::numerics::SeedRng;
    use crate::training::freeze::{freeze_audit, snapshot};
    use crate::training::pipeline::test_support::tiny_world;

    fn tiny_split(cfg: &RunConfig, ds: &Dataset) -> crate::data::SplitPools {
        let split = SubjectSplit::new(
            cfg.data.source_subjects(),
            cfg.data.target_subjects.iter().copied(),
            cfg.data.target_adaptation_fraction,
            cfg.data.source_val_fraction,
        )
        .unwrap();
        split.materialize(ds, cfg.seed).unwrap()
    }

    #[test]
    fn mae_loss_decreases_on_fixed_batch() {
        let (mut cfg, ds, mut p) = tiny_world();
        cfg.pretrain.mae_steps = 25;
        cfg.pretrain.mae_batch = 4;
        let pool: Vec<usize> = (0..4).collect();
        let log = AccessLog::new("pretrain");
        let mut sink = MetricsSink::memory();
        run_mae(&cfg, &ds, &pool, &mut p, &mut sink, &log, None).unwrap();
        let losses = sink.losses("pretrain/mae");
        assert_eq!(losses.len(), 25);
        assert!(losses.iter().all(|l| l.is_finite()));
        assert!(
            losses[24] < losses[0],
            "{} !< {}",
            losses[24],
            losses[0]
        );
    }

    #[test]
    fn pretrain_respects_freeze_contract() {
        let (cfg, ds, mut p) = tiny_world();
        let pools = tiny_split(&cfg, &ds);
        let log = AccessLog::new("boot");
        let mut sink = MetricsSink::memory();
        let scoped = log.scoped("pretrain");
        let reports =
            run_pretrain(&cfg, &ds, &pools.source_train, &mut p, &mut sink, &scoped, None)
                .unwrap();
        assert_eq!(reports.len(), 3);
        assert!(reports.iter().all(|r| r.is_clean()));
        for phase in ["pretrain/mae", "pretrain/warmup", "pretrain/lm"] {
            assert_eq!(sink.losses(phase).len(), 5, "{phase}");
        }
    }

    #[test]
    fn toy_clip_converges_below_tenth_of_uniform() {
        // Labels-as-embeddings toy: the video side is a fixed orthonormal
        // basis, the fMRI side a learnable matrix. Pure contrastive training
        // must land well under the uniform baseline of 2 log B.
        let b = 4;
        let d = 8;
        let mut store = crate::params::ParamStore::new();
        let mut rng = SeedRng::new(11);
        let mut init = vec![0.0; b * d];
        rng.fill_normal(&mut init, 0.3);
        let theta = store
            .insert("toy", "toy.theta", Tensor::from_vec(&[b, d], init).unwrap())
            .unwrap();
        let mut labels = vec![0.0; b * d];
        for i in 0..b {
            labels[i * d + i] = 1.0;
        }
        let labels = Tensor::from_vec(&[b, d], labels).unwrap();

        let trainable: std::collections::BTreeSet<String> = ["toy".to_string()].into();
        let mut opt = AdamW::uniform(AdamConfig::default(), &trainable, 0.05);
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            let (loss_val, grads) = {
                let mut g = Graph::new();
                let mut binder = Binder::new(&store, &trainable);
                let zh = binder.node(&mut g, theta);
                let zv = g.constant(labels.clone());
                let tau = g.constant(Tensor::from_vec(&[1], vec![(1.0f64 / 0.07).ln()]).unwrap());
                let loss = clip_loss_graph(&mut g, zh, zv, tau).unwrap();
                let loss_val = scalar(&g, loss);
                let mut gs = g.backward(loss).unwrap();
                (loss_val, binder.collect_grads(&mut gs))
            };
            opt.step(&mut store, grads, 1.0).unwrap();
            last = loss_val;
        }
        let uniform = 2.0 * (b as f64).ln();
        assert!(
            last < 0.1 * uniform,
            "converged loss {last} not under {}",
            0.1 * uniform
        );
    }

    #[test]
    fn stage1_runs_clean_and_clamps_tau() {
        let (cfg, ds, mut p) = tiny_world();
        let pools = tiny_split(&cfg, &ds);
        let log = AccessLog::new("boot");
        let before = snapshot(&p.store);
        let mut driver =
            Stage1Driver::new(&cfg, &ds, pools.source_train.clone(), &p, &log).unwrap();
        let mut sink = MetricsSink::memory();
        driver
            .run(&cfg, &ds, &mut p, 0, cfg.stage1.steps, &mut sink, None)
            .unwrap();
        let after = snapshot(&p.store);
        let report =
            freeze_audit("stage1", &before, &after, &TrainPhase::Stage1.trainable()).unwrap();
        assert!(report.is_clean(), "{}", report.render());

        let losses = sink.losses("stage1");
        assert_eq!(losses.len(), cfg.stage1.steps as usize);
        assert!(losses.iter().all(|l| l.is_finite()));
        let tau = p.tau();
        assert!(tau >= cfg.stage1.tau_min && tau <= cfg.stage1.tau_max);
        // Segment bounds are validated.
        assert!(driver
            .run(&cfg, &ds, &mut p, 0, cfg.stage1.steps + 1, &mut sink, None)
            .is_err());
    }

    #[test]
    fn stage1_loss_decreases_on_fixed_batch() {
        let (mut cfg, ds, mut p) = tiny_world();
        cfg.stage1.steps = 15;
        cfg.stage1.batch_size = 4;
        let pool: Vec<usize> = (0..4).collect();
        let log = AccessLog::new("boot");
        let mut driver = Stage1Driver::new(&cfg, &ds, pool, &p, &log).unwrap();
        let mut sink = MetricsSink::memory();
        driver.run(&cfg, &ds, &mut p, 0, 15, &mut sink, None).unwrap();
        let losses = sink.losses("stage1");
        assert!(losses[14] < losses[0], "{} !< {}", losses[14], losses[0]);
    }

    #[test]
    fn stage1_segmented_run_matches_uninterrupted() {
        let (cfg, ds, _) = tiny_world();
        let pools = tiny_split(&cfg, &ds);

        // Uninterrupted reference run.
        let mut p_ref = Pipeline::init(&cfg, &ds.meta).unwrap();
        let log = AccessLog::new("boot");
        let mut d_ref =
            Stage1Driver::new(&cfg, &ds, pools.source_train.clone(), &p_ref, &log).unwrap();
        let mut sink_ref = MetricsSink::memory();
        d_ref
            .run(&cfg, &ds, &mut p_ref, 0, 5, &mut sink_ref, None)
            .unwrap();

        // Segmented run with an optimizer state round-trip in the middle,
        // exactly what checkpoint resume does.
        let mut p_seg = Pipeline::init(&cfg, &ds.meta).unwrap();
        let mut d_seg =
            Stage1Driver::new(&cfg, &ds, pools.source_train.clone(), &p_seg, &log).unwrap();
        let mut sink_seg = MetricsSink::memory();
        d_seg
            .run(&cfg, &ds, &mut p_seg, 0, 3, &mut sink_seg, None)
            .unwrap();
        let (t, entries) = d_seg.opt.export_state(&p_seg.store);
        let mut d_resumed =
            Stage1Driver::new(&cfg, &ds, pools.source_train.clone(), &p_seg, &log).unwrap();
        d_resumed
            .opt
            .import_state(&p_seg.store, t, entries)
            .unwrap();
        d_resumed
            .run(&cfg, &ds, &mut p_seg, 3, 5, &mut sink_seg, None)
            .unwrap();

        assert_eq!(
            p_ref.store.all_group_checksums(),
            p_seg.store.all_group_checksums()
        );
        let a = sink_ref.losses("stage1");
        let b = sink_seg.losses("stage1");
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    fn stage2_ready(
        cfg: &RunConfig,
        ds: &Dataset,
        pools: &crate::data::SplitPools,
        log: &AccessLog,
    ) -> (Pipeline, Stage2Driver) {
        let mut p = Pipeline::init(cfg, &ds.meta).unwrap();
        let scoped = log.scoped("stage2");
        let cents = p.class_centroids(ds, &pools.source_train, &scoped).unwrap();
        p.init_da_head(&cents).unwrap();
        let driver = Stage2Driver::new(
            cfg,
            ds,
            pools.source_train.clone(),
            pools.target_adapt.clone(),
            &p,
            log,
        )
        .unwrap();
        (p, driver)
    }

    #[test]
    fn stage2_lambda_one_never_touches_the_pool() {
        let (mut cfg, ds, _) = tiny_world();
        cfg.stage2.lambda = 1.0;
        let pools = tiny_split(&cfg, &ds);
        let log = AccessLog::new("boot");
        let (mut p, mut driver) = stage2_ready(&cfg, &ds, &pools, &log);
        let checksum = driver.pool.checksum();
        let mut sink = MetricsSink::memory();
        driver
            .run(&cfg, &ds, &mut p, 0, cfg.stage2.steps, &mut sink, None)
            .unwrap();
        assert_eq!(driver.pool.checksum(), checksum);
        // Pure-CE training still moves the loss.
        assert!(sink.losses("stage2").iter().all(|l| l.is_finite()));
    }

    #[test]
    fn stage2_lambda_half_updates_pool_and_logs_components() {
        let (cfg, ds, _) = tiny_world();
        let pools = tiny_split(&cfg, &ds);
        let log = AccessLog::new("boot");
        let (mut p, mut driver) = stage2_ready(&cfg, &ds, &pools, &log);
        let checksum = driver.pool.checksum();
        let before = snapshot(&p.store);
        let mut sink = MetricsSink::memory();
        driver
            .run(&cfg, &ds, &mut p, 0, cfg.stage2.steps, &mut sink, None)
            .unwrap();
        assert_ne!(driver.pool.checksum(), checksum);
        let after = snapshot(&p.store);
        let report =
            freeze_audit("stage2", &before, &after, &TrainPhase::Stage2.trainable()).unwrap();
        assert!(report.is_clean(), "{}", report.render());
        let m = &sink.history[0];
        for key in ["loss", "ce", "nc", "es"] {
            assert!(m.values.contains_key(key), "missing {key}");
        }
    }

    #[test]
    fn stage2_ce_decreases_on_fixed_batch() {
        let (mut cfg, ds, _) = tiny_world();
        cfg.stage2.steps = 12;
        cfg.stage2.lambda = 1.0;
        cfg.stage2.source_batch = 4;
        let pools = tiny_split(&cfg, &ds);
        let log = AccessLog::new("boot");
        let (mut p, _) = stage2_ready(&cfg, &ds, &pools, &log);
        // Single fixed batch: pool of exactly one batch.
        let src: Vec<usize> = pools.source_train[..4].to_vec();
        let mut driver = Stage2Driver::new(
            &cfg,
            &ds,
            src,
            pools.target_adapt.clone(),
            &p,
            &log,
        )
        .unwrap();
        let mut sink = MetricsSink::memory();
        driver.run(&cfg, &ds, &mut p, 0, 12, &mut sink, None).unwrap();
        let losses = sink.losses("stage2");
        assert!(losses[11] < losses[0], "{} !< {}", losses[11], losses[0]);
    }

    struct FlakyProvider;
    impl CaptionProvider for FlakyProvider {
        fn caption(&self, _class_label: &str, _instruction: &str) -> Result<String> {
            Err(Error::Runtime("caption service unavailable".into()))
        }
    }

    #[test]
    fn oracle_failure_rate_aborts_the_run() {
        let (mut cfg, ds, _) = tiny_world();
        cfg.stage2.oracle_window = 4;
        let pools = tiny_split(&cfg, &ds);
        let log = AccessLog::new("boot");
        let (mut p, mut driver) = stage2_ready(&cfg, &ds, &pools, &log);
        driver.oracle = CaptionOracle::External(Box::new(FlakyProvider));
        let mut sink = MetricsSink::memory();
        let err = driver
            .run(&cfg, &ds, &mut p, 0, cfg.stage2.steps, &mut sink, None)
            .unwrap_err();
        assert!(err.to_string().contains("failure rate"), "{err}");
    }

    #[test]
    fn full_run_passes_the_leak_audit_and_violations_are_caught() {
        let (cfg, ds, mut p) = tiny_world();
        let split = SubjectSplit::new(
            cfg.data.source_subjects(),
            cfg.data.target_subjects.iter().copied(),
            cfg.data.target_adaptation_fraction,
            cfg.data.source_val_fraction,
        )
        .unwrap();
        let pools = split.materialize(&ds, cfg.seed).unwrap();
        let log = AccessLog::new("boot");
        let mut sink = MetricsSink::memory();

        let scoped = log.scoped("pretrain");
        run_pretrain(&cfg, &ds, &pools.source_train, &mut p, &mut sink, &scoped, None).unwrap();
        let mut d1 =
            Stage1Driver::new(&cfg, &ds, pools.source_train.clone(), &p, &log).unwrap();
        d1.run(&cfg, &ds, &mut p, 0, cfg.stage1.steps, &mut sink, None)
            .unwrap();
        let s2log = log.scoped("stage2");
        let cents = p.class_centroids(&ds, &pools.source_train, &s2log).unwrap();
        p.init_da_head(&cents).unwrap();
        let mut d2 = Stage2Driver::new(
            &cfg,
            &ds,
            pools.source_train.clone(),
            pools.target_adapt.clone(),
            &p,
            &log,
        )
        .unwrap();
        d2.run(&cfg, &ds, &mut p, 0, cfg.stage2.steps, &mut sink, None)
            .unwrap();

        let rules = pools.training_leak_rules(&ds);
        let findings = audit_access(&log.events(), &rules);
        assert!(findings.is_empty(), "{findings:?}");

        // Decoding the test pool under an evaluation scope stays clean.
        let eval_log = log.scoped("evaluation");
        let records = decode_split(&cfg, &ds, &pools.target_test, &p, &eval_log).unwrap();
        assert_eq!(records.len(), pools.target_test.len());
        let findings = audit_access(&log.events(), &rules);
        assert!(findings.is_empty());

        // An injected training-phase read of a held-out caption is caught.
        let bad = log.scoped("stage1");
        let _ = ds.get(pools.target_test[0]).caption(&bad);
        let findings = audit_access(&log.events(), &rules);
        assert_eq!(findings.len(), 1);
        assert!(findings[0].rule.contains("target-test"));
    }

    #[test]
    fn non_finite_loss_aborts_and_dumps_the_batch() {
        let (cfg, ds, mut p) = tiny_world();
        let pools = tiny_split(&cfg, &ds);
        let log = AccessLog::new("boot");
        let mut driver =
            Stage1Driver::new(&cfg, &ds, pools.source_train.clone(), &p, &log).unwrap();
        // Poison the temperature so exp(log 1/tau) overflows to infinity.
        p.store
            .set(p.log_inv_tau, Tensor::from_vec(&[1], vec![1000.0]).unwrap())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut sink = MetricsSink::memory();
        let err = driver
            .run(&cfg, &ds, &mut p, 0, 1, &mut sink, Some(dir.path()))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        let dump = dir.path().join("bad_batch_step0.json");
        assert!(dump.exists());
        let text = std::fs::read_to_string(dump).unwrap();
        assert!(text.contains("sample_ids"));
    }

    #[test]
    fn metrics_sink_appends_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut sink = MetricsSink::file(&path).unwrap();
        sink.push(StepMetric::new("stage1", 0, &[("loss", 1.5)])).unwrap();
        sink.push(StepMetric::new("stage1", 1, &[("loss", 1.25)])).unwrap();
        sink.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let parsed: StepMetric = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(parsed.step, 1);
        assert_eq!(parsed.values["loss"], 1.25);
    }

    #[test]
    fn decode_records_reference_the_surrogate_captions() {
        let (cfg, ds, p) = tiny_world();
        let pools = tiny_split(&cfg, &ds);
        let log = AccessLog::new("evaluation");
        let records = decode_split(&cfg, &ds, &pools.target_test, &p, &log).unwrap();
        for (rec, &idx) in records.iter().zip(&pools.target_test) {
            let s = ds.get(idx);
            assert_eq!(rec.sample_id, s.id());
            assert_eq!(rec.subject_id, s.subject_id());
            assert_eq!(rec.reference, s.caption(&log));
            assert!(!rec.instruction.is_empty());
        }
    }
}
