//! Command-line interface: subcommand dispatch, run-directory management,
//! prerequisite materialization, and exit-code mapping.
//!
//! Commands build on each other through the run directory: `stage2` on a
//! fresh directory synthesizes the dataset, pretrains, and runs Stage I
//! first. Finished artifacts are append-only; redoing one needs `--force`,
//! which also clears everything derived from it.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::data::{
    audit_access, generate_synthetic_dataset, load_dataset, save_dataset, AccessEvent, AccessLog,
    Dataset, SplitPools, SubjectSplit,
};
use crate::error::{Error, Result};
use crate::evaluation::{build_report, write_tsv, write_txt, DecodeRecord, DecoderEmbedder};
use crate::training::checkpoint::Checkpoint;
use crate::training::config::RunConfig;
use crate::training::freeze::{freeze_audit, read_snapshot, snapshot, write_snapshot};
use crate::training::phases::{
    decode_split, run_pretrain, MetricsSink, Stage1Driver, Stage2Driver,
};
use crate::training::pipeline::{Pipeline, TrainPhase};
use crate::training::RunDir;

pub const RUN_ROOT_ENV: &str = "VOXCAP_RUN_ROOT";

#[derive(Parser)]
#[command(
    name = "voxcap",
    version,
    about = "Desk-scale fMRI-to-text decoding: synthetic data, two-stage training, evaluation"
)]
pub struct Cli {
    /// Config file path, or the word "default" for built-in defaults.
    #[arg(long, global = true, default_value = "default")]
    config: String,

    /// Dotted-key config override, repeatable: --override stage1.steps=50
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Run directory. Defaults to "<run root>/default"; the run root is "runs"
    /// or the VOXCAP_RUN_ROOT environment variable.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Redo the command's output even if it already exists, discarding
    /// everything derived from it.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset into the run directory.
    SynthData,
    /// Pretrain the fMRI encoder (masked autoencoding), video encoder, and
    /// caption decoder.
    Pretrain,
    /// Stage I: contrastive + reconstruction alignment of the fMRI path.
    Stage1,
    /// Stage II: instruction tuning with cross-subject domain adaptation.
    Stage2,
    /// Greedy-decode captions for a data pool into decodes.jsonl.
    Generate {
        #[arg(long, value_enum, default_value_t = SplitArg::TargetTest)]
        split: SplitArg,
    },
    /// Score decodes.jsonl and write report.tsv / report.txt.
    Evaluate {
        #[arg(long, value_enum, default_value_t = SplitArg::TargetTest)]
        split: SplitArg,
    },
    /// Print the evaluation report.
    Report,
    /// Check freeze and data-hygiene evidence recorded by earlier commands.
    Audit,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    TargetTest,
    SourceVal,
    TargetAdapt,
}

impl SplitArg {
    fn pool<'a>(&self, pools: &'a SplitPools) -> &'a [usize] {
        match self {
            SplitArg::TargetTest => &pools.target_test,
            SplitArg::SourceVal => &pools.source_val,
            SplitArg::TargetAdapt => &pools.target_adapt,
        }
    }
}

/// Parses arguments, runs the command, and maps errors to exit codes:
/// 0 success, 1 validation/config problems, 2 runtime failures.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    rd: RunDir,
    force: bool,
}

fn dispatch(cli: Cli) -> Result<i32> {
    let cfg = resolve_config(&cli.config, &cli.overrides)?;
    let rd = resolve_run_dir(cli.run_dir);
    let ctx = Ctx {
        cfg,
        rd,
        force: cli.force,
    };
    match cli.cmd {
        Cmd::SynthData => cmd_synth_data(&ctx),
        Cmd::Pretrain => cmd_pretrain(&ctx),
        Cmd::Stage1 => cmd_stage1(&ctx),
        Cmd::Stage2 => cmd_stage2(&ctx),
        Cmd::Generate { split } => cmd_generate(&ctx, split),
        Cmd::Evaluate { split } => cmd_evaluate(&ctx, split),
        Cmd::Report => cmd_report(&ctx),
        Cmd::Audit => cmd_audit(&ctx),
    }
}

fn resolve_config(arg: &str, overrides: &[String]) -> Result<RunConfig> {
    let text = if arg == "default" {
        String::new()
    } else {
        std::fs::read_to_string(arg).map_err(|e| Error::io(arg, e))?
    };
    let mut pairs = Vec::with_capacity(overrides.len());
    for item in overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            Error::validation(format!("override '{item}' is not of the form key=value"))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    RunConfig::from_toml(&text, &pairs)
}

fn resolve_run_dir(arg: Option<PathBuf>) -> RunDir {
    match arg {
        Some(p) => RunDir::new(p),
        None => {
            let root = std::env::var(RUN_ROOT_ENV).unwrap_or_else(|_| "runs".to_string());
            RunDir::new(Path::new(&root).join("default"))
        }
    }
}

// ---------------------------------------------------------------------------
// Run-directory bookkeeping
// ---------------------------------------------------------------------------

/// Artifact levels, in dependency order. Forcing a level clears it and
/// everything after it.
#[derive(Clone, Copy, PartialEq, PartialOrd)]
enum Level {
    Dataset,
    Pretrain,
    Stage1,
    Stage2,
    Decodes,
    Report,
}

fn clear_from(rd: &RunDir, level: Level) -> Result<()> {
    let rm_dir = |p: PathBuf| -> Result<()> {
        if p.exists() {
            std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    };
    let rm_file = |p: PathBuf| -> Result<()> {
        if p.exists() {
            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    };
    if level <= Level::Report {
        rm_file(rd.report_tsv_path())?;
        rm_file(rd.report_txt_path())?;
    }
    if level <= Level::Decodes {
        rm_file(rd.decodes_path())?;
    }
    if level <= Level::Stage2 {
        rm_dir(rd.phase_dir("stage2"))?;
    }
    if level <= Level::Stage1 {
        rm_dir(rd.phase_dir("stage1"))?;
    }
    if level <= Level::Pretrain {
        rm_dir(rd.phase_dir("pretrain"))?;
    }
    if level <= Level::Dataset {
        rm_dir(rd.dataset_dir())?;
        rm_file(rd.access_log_path())?;
    } else {
        // Stale hygiene events from cleared phases must not linger.
        let drop: Vec<&str> = match level {
            Level::Pretrain => vec!["pretrain", "stage1", "stage2", "evaluation"],
            Level::Stage1 => vec!["stage1", "stage2", "evaluation"],
            Level::Stage2 => vec!["stage2", "evaluation"],
            Level::Decodes | Level::Report => vec!["evaluation"],
            Level::Dataset => unreachable!(),
        };
        prune_access_log(&rd.access_log_path(), &drop)?;
    }
    Ok(())
}

fn prune_access_log(path: &Path, drop_phases: &[&str]) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let events = AccessLog::from_json(&text)?;
    let kept: Vec<AccessEvent> = events
        .into_iter()
        .filter(|e| !drop_phases.iter().any(|p| *p == e.phase))
        .collect();
    let json = serde_json::to_string_pretty(&kept)
        .map_err(|e| Error::Runtime(format!("access log serialize: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn append_access_log(path: &Path, log: &AccessLog) -> Result<()> {
    let mut events = if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        AccessLog::from_json(&text)?
    } else {
        Vec::new()
    };
    events.extend(log.events());
    let json = serde_json::to_string_pretty(&events)
        .map_err(|e| Error::Runtime(format!("access log serialize: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn save_checkpoint(rd: &RunDir, phase: &str, ck: &Checkpoint) -> Result<()> {
    let path = rd.checkpoint_path(phase);
    let tmp = path.with_extension("vxcp.tmp");
    ck.save(&tmp)?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

fn pools_for(cfg: &RunConfig, ds: &Dataset) -> Result<SplitPools> {
    let split = SubjectSplit::new(
        cfg.data.source_subjects(),
        cfg.data.target_subjects.iter().copied(),
        cfg.data.target_adaptation_fraction,
        cfg.data.source_val_fraction,
    )?;
    split.materialize(ds, cfg.seed)
}

fn ensure_dataset(ctx: &Ctx) -> Result<Dataset> {
    let dir = ctx.rd.dataset_dir();
    if dir.join("manifest.json").exists() {
        let (ds, warnings) = load_dataset(&dir, true)?;
        for w in warnings {
            eprintln!("warning: {w}");
        }
        return Ok(ds);
    }
    eprintln!("synthesizing dataset under {}", dir.display());
    let ds = generate_synthetic_dataset(&ctx.cfg.data.synth(ctx.cfg.seed))?;
    save_dataset(&dir, &ds)?;
    Ok(ds)
}

fn load_phase_pipeline(ctx: &Ctx, ds: &Dataset, phase: &str) -> Result<(Pipeline, Checkpoint)> {
    let ck = Checkpoint::load(&ctx.rd.checkpoint_path(phase))?;
    if ck.config_hash != ctx.cfg.hash() {
        return Err(Error::validation(format!(
            "{phase} checkpoint was trained under a different config; \
             rerun with --force to redo it"
        )));
    }
    let mut p = Pipeline::init(&ctx.cfg, &ds.meta)?;
    ck.install(&mut p)?;
    Ok((p, ck))
}

fn write_before_snapshot_once(rd: &RunDir, phase: &str, p: &Pipeline) -> Result<()> {
    let path = rd.snapshot_before_path(phase);
    if !path.exists() {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_snapshot(&path, &snapshot(&p.store))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training commands
// ---------------------------------------------------------------------------

const PRETRAIN_TRAINABLE: [TrainPhase; 3] =
    [TrainPhase::Mae, TrainPhase::VitWarmup, TrainPhase::DecoderLm];

fn pretrain_union() -> BTreeSet<String> {
    PRETRAIN_TRAINABLE
        .iter()
        .flat_map(|p| p.trainable())
        .collect()
}

fn ensure_pretrain(ctx: &Ctx, ds: &Dataset) -> Result<Pipeline> {
    if ctx.rd.checkpoint_path("pretrain").exists() {
        return load_phase_pipeline(ctx, ds, "pretrain").map(|(p, _)| p);
    }
    eprintln!("pretraining encoders and decoder");
    let pools = pools_for(&ctx.cfg, ds)?;
    let mut p = Pipeline::init(&ctx.cfg, &ds.meta)?;
    write_before_snapshot_once(&ctx.rd, "pretrain", &p)?;

    let log = AccessLog::new("boot");
    let scoped = log.scoped("pretrain");
    let mut sink = MetricsSink::file(&ctx.rd.metrics_path("pretrain"))?;
    let dump = ctx.rd.dump_dir("pretrain");
    let reports = run_pretrain(
        &ctx.cfg,
        ds,
        &pools.source_train,
        &mut p,
        &mut sink,
        &scoped,
        Some(&dump),
    )?;
    sink.flush()?;

    write_snapshot(&ctx.rd.snapshot_after_path("pretrain"), &snapshot(&p.store))?;
    let rendered: String = reports.iter().map(|r| r.render()).collect();
    std::fs::write(ctx.rd.freeze_report_path("pretrain"), &rendered)
        .map_err(|e| Error::io(ctx.rd.freeze_report_path("pretrain"), e))?;
    append_access_log(&ctx.rd.access_log_path(), &log)?;

    let total = ctx.cfg.pretrain.mae_steps
        + ctx.cfg.pretrain.warmup_steps
        + ctx.cfg.pretrain.lm_steps;
    save_checkpoint(
        &ctx.rd,
        "pretrain",
        &Checkpoint::capture("pretrain", total as u64, ctx.cfg.hash(), &p, None, None),
    )?;
    Ok(p)
}

fn finish_stage1(
    ctx: &Ctx,
    ds: &Dataset,
    p: &mut Pipeline,
    driver: &mut Stage1Driver,
    from: usize,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let total = cfg.stage1.steps;
    let cadence = cfg.stage1.checkpoint_every;
    let mut sink = MetricsSink::file(&ctx.rd.metrics_path("stage1"))?;
    let dump = ctx.rd.dump_dir("stage1");
    let mut step = from;
    while step < total {
        let seg_end = ((step / cadence + 1) * cadence).min(total);
        driver.run(cfg, ds, p, step, seg_end, &mut sink, Some(&dump))?;
        step = seg_end;
        save_checkpoint(
            &ctx.rd,
            "stage1",
            &Checkpoint::capture(
                "stage1",
                step as u64,
                cfg.hash(),
                p,
                Some(&driver.opt),
                None,
            ),
        )?;
        eprintln!("stage1 step {step}/{total}");
    }
    sink.flush()?;

    write_snapshot(&ctx.rd.snapshot_after_path("stage1"), &snapshot(&p.store))?;
    let before = read_snapshot(&ctx.rd.snapshot_before_path("stage1"))?;
    let report = freeze_audit(
        "stage1",
        &before,
        &snapshot(&p.store),
        &TrainPhase::Stage1.trainable(),
    )?;
    std::fs::write(ctx.rd.freeze_report_path("stage1"), report.render())
        .map_err(|e| Error::io(ctx.rd.freeze_report_path("stage1"), e))?;
    if !report.is_clean() {
        return Err(Error::Runtime(format!(
            "stage1 freeze violation: {:?}",
            report.violations()
        )));
    }
    Ok(())
}

fn ensure_stage1(ctx: &Ctx, ds: &Dataset) -> Result<Pipeline> {
    let total = ctx.cfg.stage1.steps;
    if ctx.rd.checkpoint_path("stage1").exists() {
        let (mut p, ck) = load_phase_pipeline(ctx, ds, "stage1")?;
        if ck.step as usize >= total {
            return Ok(p);
        }
        eprintln!("resuming stage1 from step {}", ck.step);
        let pools = pools_for(&ctx.cfg, ds)?;
        let log = AccessLog::new("boot");
        let mut driver = Stage1Driver::new(&ctx.cfg, ds, pools.source_train, &p, &log)?;
        ck.restore_optimizer(&p.store, &mut driver.opt)?;
        finish_stage1(ctx, ds, &mut p, &mut driver, ck.step as usize)?;
        append_access_log(&ctx.rd.access_log_path(), &log)?;
        return Ok(p);
    }

    let mut p = ensure_pretrain(ctx, ds)?;
    eprintln!("running stage1 alignment ({total} steps)");
    let pools = pools_for(&ctx.cfg, ds)?;
    write_before_snapshot_once(&ctx.rd, "stage1", &p)?;
    let log = AccessLog::new("boot");
    let mut driver = Stage1Driver::new(&ctx.cfg, ds, pools.source_train, &p, &log)?;
    finish_stage1(ctx, ds, &mut p, &mut driver, 0)?;
    append_access_log(&ctx.rd.access_log_path(), &log)?;
    Ok(p)
}

fn finish_stage2(
    ctx: &Ctx,
    ds: &Dataset,
    p: &mut Pipeline,
    driver: &mut Stage2Driver,
    from: usize,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let total = cfg.stage2.steps;
    let cadence = cfg.stage2.checkpoint_every;
    let mut sink = MetricsSink::file(&ctx.rd.metrics_path("stage2"))?;
    let dump = ctx.rd.dump_dir("stage2");
    let mut step = from;
    while step < total {
        let seg_end = ((step / cadence + 1) * cadence).min(total);
        driver.run(cfg, ds, p, step, seg_end, &mut sink, Some(&dump))?;
        step = seg_end;
        save_checkpoint(
            &ctx.rd,
            "stage2",
            &Checkpoint::capture(
                "stage2",
                step as u64,
                cfg.hash(),
                p,
                Some(&driver.opt),
                Some(&driver.pool),
            ),
        )?;
        eprintln!("stage2 step {step}/{total}");
    }
    sink.flush()?;

    write_snapshot(&ctx.rd.snapshot_after_path("stage2"), &snapshot(&p.store))?;
    let before = read_snapshot(&ctx.rd.snapshot_before_path("stage2"))?;
    let report = freeze_audit(
        "stage2",
        &before,
        &snapshot(&p.store),
        &TrainPhase::Stage2.trainable(),
    )?;
    std::fs::write(ctx.rd.freeze_report_path("stage2"), report.render())
        .map_err(|e| Error::io(ctx.rd.freeze_report_path("stage2"), e))?;
    if !report.is_clean() {
        return Err(Error::Runtime(format!(
            "stage2 freeze violation: {:?}",
            report.violations()
        )));
    }
    Ok(())
}

fn ensure_stage2(ctx: &Ctx, ds: &Dataset) -> Result<Pipeline> {
    let total = ctx.cfg.stage2.steps;
    let pools = pools_for(&ctx.cfg, ds)?;
    if ctx.rd.checkpoint_path("stage2").exists() {
        let (mut p, ck) = load_phase_pipeline(ctx, ds, "stage2")?;
        if ck.step as usize >= total {
            return Ok(p);
        }
        eprintln!("resuming stage2 from step {}", ck.step);
        let log = AccessLog::new("boot");
        let mut driver = Stage2Driver::new(
            &ctx.cfg,
            ds,
            pools.source_train.clone(),
            pools.target_adapt.clone(),
            &p,
            &log,
        )?;
        ck.restore_optimizer(&p.store, &mut driver.opt)?;
        driver.pool = ck
            .restore_pool()?
            .ok_or_else(|| Error::validation("stage2 checkpoint lacks the memory pool"))?;
        finish_stage2(ctx, ds, &mut p, &mut driver, ck.step as usize)?;
        append_access_log(&ctx.rd.access_log_path(), &log)?;
        return Ok(p);
    }

    let mut p = ensure_stage1(ctx, ds)?;
    eprintln!("running stage2 instruction tuning ({total} steps)");
    let log = AccessLog::new("boot");
    let scoped = log.scoped("stage2");
    let centroids = p.class_centroids(ds, &pools.source_train, &scoped)?;
    p.init_da_head(&centroids)?;
    write_before_snapshot_once(&ctx.rd, "stage2", &p)?;
    let mut driver = Stage2Driver::new(
        &ctx.cfg,
        ds,
        pools.source_train.clone(),
        pools.target_adapt.clone(),
        &p,
        &log,
    )?;
    finish_stage2(ctx, ds, &mut p, &mut driver, 0)?;
    append_access_log(&ctx.rd.access_log_path(), &log)?;
    Ok(p)
}

// ---------------------------------------------------------------------------
// Command handlers
// ---------------------------------------------------------------------------

fn cmd_synth_data(ctx: &Ctx) -> Result<i32> {
    ctx.rd.persist_config(&ctx.cfg, ctx.force)?;
    let dir = ctx.rd.dataset_dir();
    if dir.exists() {
        if !ctx.force {
            return Err(Error::validation(format!(
                "dataset already exists at {}; pass --force to regenerate",
                dir.display()
            )));
        }
        clear_from(&ctx.rd, Level::Dataset)?;
    }
    let ds = ensure_dataset(ctx)?;
    eprintln!(
        "dataset ready: {} samples, {} subjects, {} classes",
        ds.len(),
        ds.meta.subjects.len(),
        ds.meta.n_classes()
    );
    Ok(0)
}

fn cmd_pretrain(ctx: &Ctx) -> Result<i32> {
    ctx.rd.persist_config(&ctx.cfg, ctx.force)?;
    if ctx.rd.checkpoint_path("pretrain").exists() {
        if !ctx.force {
            return Err(Error::validation(
                "pretraining already finished; pass --force to redo it",
            ));
        }
        clear_from(&ctx.rd, Level::Pretrain)?;
    }
    let ds = ensure_dataset(ctx)?;
    ensure_pretrain(ctx, &ds)?;
    eprintln!("pretraining complete");
    Ok(0)
}

fn cmd_stage1(ctx: &Ctx) -> Result<i32> {
    ctx.rd.persist_config(&ctx.cfg, ctx.force)?;
    let path = ctx.rd.checkpoint_path("stage1");
    if path.exists() {
        let ck = Checkpoint::load(&path)?;
        if ck.step as usize >= ctx.cfg.stage1.steps {
            if !ctx.force {
                return Err(Error::validation(
                    "stage1 already finished; pass --force to redo it",
                ));
            }
            clear_from(&ctx.rd, Level::Stage1)?;
        }
    }
    let ds = ensure_dataset(ctx)?;
    ensure_stage1(ctx, &ds)?;
    eprintln!("stage1 complete");
    Ok(0)
}

fn cmd_stage2(ctx: &Ctx) -> Result<i32> {
    ctx.rd.persist_config(&ctx.cfg, ctx.force)?;
    let path = ctx.rd.checkpoint_path("stage2");
    if path.exists() {
        let ck = Checkpoint::load(&path)?;
        if ck.step as usize >= ctx.cfg.stage2.steps {
            if !ctx.force {
                return Err(Error::validation(
                    "stage2 already finished; pass --force to redo it",
                ));
            }
            clear_from(&ctx.rd, Level::Stage2)?;
        }
    }
    let ds = ensure_dataset(ctx)?;
    ensure_stage2(ctx, &ds)?;
    eprintln!("stage2 complete");
    Ok(0)
}

fn write_decodes(ctx: &Ctx, split: SplitArg) -> Result<()> {
    let ds = ensure_dataset(ctx)?;
    let p = ensure_stage2(ctx, &ds)?;
    let pools = pools_for(&ctx.cfg, &ds)?;
    let pool = split.pool(&pools);
    let log = AccessLog::new("evaluation");
    let records = decode_split(&ctx.cfg, &ds, pool, &p, &log)?;

    let path = ctx.rd.decodes_path();
    let mut out = String::new();
    for rec in &records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Runtime(format!("decode serialize: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    append_access_log(&ctx.rd.access_log_path(), &log)?;
    eprintln!("decoded {} samples into {}", records.len(), path.display());
    Ok(())
}

fn cmd_generate(ctx: &Ctx, split: SplitArg) -> Result<i32> {
    ctx.rd.persist_config(&ctx.cfg, ctx.force)?;
    if ctx.rd.decodes_path().exists() {
        if !ctx.force {
            return Err(Error::validation(
                "decodes.jsonl already exists; pass --force to redo it",
            ));
        }
        clear_from(&ctx.rd, Level::Decodes)?;
    }
    write_decodes(ctx, split)?;
    Ok(0)
}

fn read_decodes(path: &Path) -> Result<Vec<DecodeRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DecodeRecord = serde_json::from_str(line)
            .map_err(|e| Error::validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::validation(format!("{} holds no records", path.display())));
    }
    Ok(records)
}

fn cmd_evaluate(ctx: &Ctx, split: SplitArg) -> Result<i32> {
    ctx.rd.persist_config(&ctx.cfg, ctx.force)?;
    if ctx.rd.report_tsv_path().exists() {
        if !ctx.force {
            return Err(Error::validation(
                "report.tsv already exists; pass --force to redo it",
            ));
        }
        clear_from(&ctx.rd, Level::Report)?;
    }
    if !ctx.rd.decodes_path().exists() {
        write_decodes(ctx, split)?;
    }
    let records = read_decodes(&ctx.rd.decodes_path())?;

    let ds = ensure_dataset(ctx)?;
    let p = ensure_stage2(ctx, &ds)?;
    let table = p.store.get(p.decoder.embed_param()).clone();
    let embedder = DecoderEmbedder {
        vocab: &p.decoder.vocab,
        table: &table,
    };
    let report = build_report(&records, &embedder)?;
    write_tsv(&report, &ctx.rd.report_tsv_path())?;
    write_txt(&report, &ctx.rd.report_txt_path())?;
    for d in &report.diagnostics {
        eprintln!("note: {d}");
    }
    eprintln!("report written to {}", ctx.rd.report_tsv_path().display());
    Ok(0)
}

fn cmd_report(ctx: &Ctx) -> Result<i32> {
    ctx.rd.persist_config(&ctx.cfg, ctx.force)?;
    if !ctx.rd.report_txt_path().exists() {
        cmd_evaluate(ctx, SplitArg::TargetTest)?;
    }
    let text = std::fs::read_to_string(ctx.rd.report_txt_path())
        .map_err(|e| Error::io(ctx.rd.report_txt_path(), e))?;
    let mut stdout = std::io::stdout();
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| Error::Runtime(format!("stdout: {e}")))?;
    Ok(0)
}

fn cmd_audit(ctx: &Ctx) -> Result<i32> {
    let mut checks: Vec<(String, bool, String)> = Vec::new();
    let mut audited_any = false;

    for phase in ["pretrain", "stage1", "stage2"] {
        let before_path = ctx.rd.snapshot_before_path(phase);
        let after_path = ctx.rd.snapshot_after_path(phase);
        let ran = ctx.rd.phase_dir(phase).exists();
        if !ran {
            continue;
        }
        if !before_path.exists() || !after_path.exists() {
            return Err(Error::validation(format!(
                "{phase} ran but its parameter snapshots are missing"
            )));
        }
        audited_any = true;
        let before = read_snapshot(&before_path)?;
        let after = read_snapshot(&after_path)?;
        let declared = match phase {
            "pretrain" => pretrain_union(),
            "stage1" => TrainPhase::Stage1.trainable(),
            _ => TrainPhase::Stage2.trainable(),
        };
        let report = freeze_audit(phase, &before, &after, &declared)?;
        let detail = if report.is_clean() {
            "frozen groups unchanged".to_string()
        } else {
            format!("changed frozen groups: {:?}", report.violations())
        };
        checks.push((format!("freeze {phase}"), report.is_clean(), detail));
    }

    let log_path = ctx.rd.access_log_path();
    if log_path.exists() {
        audited_any = true;
        let events = AccessLog::from_json(
            &std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?,
        )?;
        let ds = ensure_dataset(ctx)?;
        let pools = pools_for(&ctx.cfg, &ds)?;
        let rules = pools.training_leak_rules(&ds);
        let findings = audit_access(&events, &rules);
        let detail = if findings.is_empty() {
            format!("{} events, no illegal reads", events.len())
        } else {
            let mut names: Vec<&str> = findings.iter().map(|f| f.rule.as_str()).collect();
            names.dedup();
            format!("{} violations ({})", findings.len(), names.join("; "))
        };
        checks.push(("data hygiene".to_string(), findings.is_empty(), detail));
    }

    if !audited_any {
        return Err(Error::validation(format!(
            "nothing to audit in {}; run a training command first",
            ctx.rd.root().display()
        )));
    }

    let mut all_ok = true;
    for (name, ok, detail) in &checks {
        println!("{} {name}: {detail}", if *ok { "PASS" } else { "FAIL" });
        all_ok &= ok;
    }
    Ok(if all_ok { 0 } else { 1 })
}
