//! Implementations of the CLI commands. Each takes parsed arguments and a
//! writer for its report so the binary stays a thin argument parser.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::{train_config_hash, Checkpoint, CheckpointKind};
use super::config::{ModelBlock, RunConfig};
use super::metrics::{MetricsRow, MetricsWriter};
use super::synthetic::Split;
use crate::coordination::{pretrain_teacher, EpochStats, Teacher, Trainer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::{evaluate, flops, param_count, probe_unseen, regranularize, sweep, SweepMeta, SweepReport};
use crate::model::{export_subnet, ModelConfig};
use crate::slicing::{format_rational, Rational, SliceMode, WidthRatio};

fn out_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

fn block_of(m: &ModelConfig) -> ModelBlock {
    ModelBlock {
        image_size: m.image_size,
        patch_size: m.patch_size,
        in_channels: m.in_channels,
        embed_dim: m.embed_dim,
        num_heads: m.num_heads,
        depth: m.depth,
        mlp_ratio: m.mlp_ratio,
        num_classes: m.num_classes,
    }
}

fn eval_rows(
    metrics: &mut MetricsWriter,
    store: &crate::model::ParamStore<f32>,
    model: &ModelConfig,
    ratios: &[WidthRatio],
    test: &Dataset,
    epoch: u32,
    lr: f64,
) -> Result<()> {
    for &r in ratios {
        let ev = evaluate(store, model, r, test)?;
        metrics.write(&MetricsRow {
            epoch,
            ratio: r,
            split: "test".into(),
            ce: ev.ce,
            kl: None,
            acc: ev.accuracy,
            lr,
        })?;
    }
    Ok(())
}

fn train_rows(metrics: &mut MetricsWriter, stats: &EpochStats) -> Result<()> {
    for (r, st) in &stats.per_ratio {
        metrics.write(&MetricsRow {
            epoch: stats.epoch,
            ratio: *r,
            split: "train".into(),
            ce: st.mean_ce(),
            kl: st.mean_kl(),
            acc: st.accuracy(),
            lr: stats.lr,
        })?;
    }
    Ok(())
}

/// Phase one: trains the full-width network with cross-entropy only and
/// writes it as the external teacher.
pub fn pretrain_teacher_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<PathBuf> {
    let train = cfg.load_split(Split::Train)?;
    let test = cfg.load_split(Split::Test)?;
    let model = cfg.model_config();
    let path = cfg.output.teacher_path();
    let mut metrics = MetricsWriter::open(&cfg.output.teacher_metrics_path())?;
    let one = WidthRatio::one();
    let teacher = pretrain_teacher::<f32>(&model, &cfg.train, &train, |ep, store| {
        metrics.write(&MetricsRow {
            epoch: ep.epoch,
            ratio: one,
            split: "train".into(),
            ce: ep.ce,
            kl: None,
            acc: ep.acc,
            lr: cfg.train.lr,
        })?;
        eval_rows(&mut metrics, store, &model, &[one], &test, ep.epoch, cfg.train.lr)?;
        metrics.flush()
    })?;
    let epochs = cfg.train.teacher_epochs.unwrap_or(cfg.train.epochs);
    Checkpoint::teacher(&teacher, &cfg.train, epochs).save(&path)?;
    let acc = evaluate(&teacher.store, &model, one, &test)?.accuracy;
    writeln!(out, "teacher: {} epochs, test accuracy {acc:.4}, saved {}", epochs, path.display()).map_err(out_err)?;
    Ok(path)
}

/// The external teacher named by `train.teacher_path`, resolved against the
/// output directory.
pub fn load_teacher(cfg: &RunConfig) -> Result<Option<Teacher<f32>>> {
    let Some(p) = &cfg.train.teacher_path else {
        return Ok(None);
    };
    let path = cfg.output.resolve(p);
    let ck = Checkpoint::load(&path)?;
    if ck.meta.kind != CheckpointKind::Teacher {
        return Err(Error::validation(
            "train.teacher_path",
            format!("{} is not a teacher checkpoint", path.display()),
        ));
    }
    Ok(Some(ck.into_teacher()?))
}

/// Restores a trainer from `path`, refusing checkpoints written under a
/// different architecture or training config.
pub fn resume_trainer(cfg: &RunConfig, path: &Path) -> Result<Trainer<f32>> {
    let ck = Checkpoint::load(path)?;
    if block_of(&ck.meta.model) != cfg.model {
        return Err(Error::validation("checkpoint", "model block differs from the config"));
    }
    if ck.meta.train_hash.as_deref() != Some(train_config_hash(&cfg.train).as_str()) {
        return Err(Error::validation("checkpoint", "train block differs from the one the run started with"));
    }
    ck.into_trainer(load_teacher(cfg)?)
}

fn run_epochs(
    trainer: &mut Trainer<f32>,
    stop: u32,
    ckpt: &Path,
    metrics: &mut MetricsWriter,
    train: &Dataset,
    test: &Dataset,
) -> Result<()> {
    while trainer.epoch() < stop {
        let stats = trainer.run_epoch(train)?;
        epoch_outputs(trainer, &stats, ckpt, metrics, test)?;
    }
    Ok(())
}

fn epoch_outputs(
    trainer: &Trainer<f32>,
    stats: &EpochStats,
    ckpt: &Path,
    metrics: &mut MetricsWriter,
    test: &Dataset,
) -> Result<()> {
    train_rows(metrics, stats)?;
    let grid = trainer.model().grid.expect("trainers have grids");
    eval_rows(metrics, trainer.store(), trainer.model(), &grid.points(), test, stats.epoch, stats.lr)?;
    metrics.flush()?;
    Checkpoint::from_trainer(trainer).save(ckpt)
}

/// Phase two: joint training. With `resume`, continues from that
/// checkpoint; `until` stops early after the given epoch.
pub fn train_cmd(cfg: &RunConfig, resume: Option<&Path>, until: Option<u32>, out: &mut dyn Write) -> Result<PathBuf> {
    let mut trainer = match resume {
        Some(p) => resume_trainer(cfg, p)?,
        None => Trainer::new(cfg.model_config(), cfg.train.clone(), load_teacher(cfg)?)?,
    };
    let train = cfg.load_split(Split::Train)?;
    let test = cfg.load_split(Split::Test)?;
    let ckpt = cfg.output.checkpoint_path();
    let mut metrics = MetricsWriter::open(&cfg.output.metrics_path())?;
    let stop = until.map_or(cfg.train.epochs, |u| u.min(cfg.train.epochs));
    run_epochs(&mut trainer, stop, &ckpt, &mut metrics, &train, &test)?;
    writeln!(out, "trained to epoch {}, saved {}", trainer.epoch(), ckpt.display()).map_err(out_err)?;
    Ok(ckpt)
}

fn write_sweep(report: &SweepReport, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "ratio,mode,accuracy,ce,params,flops").map_err(out_err)?;
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{},{}",
            r.ratio,
            mode_name(r.mode),
            r.accuracy,
            r.ce,
            r.params,
            r.flops
        )
        .map_err(out_err)?;
    }
    Ok(())
}

fn mode_name(m: SliceMode) -> &'static str {
    match m {
        SliceMode::Leading => "leading",
        SliceMode::Trailing => "trailing",
        SliceMode::Full => "full",
    }
}

/// Default ratios of a checkpoint: its grid, or just 1 for standalone
/// networks.
fn default_ratios(model: &ModelConfig) -> Vec<WidthRatio> {
    model.grid.map_or_else(|| vec![WidthRatio::one()], |g| g.points())
}

/// Held-out accuracy, CE and costs of `checkpoint` at each ratio.
pub fn sweep_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    ratios: Option<&[WidthRatio]>,
    out: &mut dyn Write,
) -> Result<SweepReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let store = ck.param_store::<f32>()?;
    let model = &ck.meta.model;
    let ratios = ratios.map_or_else(|| default_ratios(model), <[_]>::to_vec);
    let test = cfg.load_split(Split::Test)?;
    let meta = SweepMeta {
        epoch: ck.meta.epoch,
        seed: ck.meta.train.as_ref().map_or(0, |t| t.seed),
        config_hash: ck.meta.train_hash.clone().unwrap_or_default(),
    };
    let report = sweep(&store, model, &ratios, &test, meta)?;
    write_sweep(&report, out)?;
    Ok(report)
}

/// Accuracy at possibly untrained ratios with the gap to the nearest
/// trained one.
pub fn probe_cmd(cfg: &RunConfig, checkpoint: &Path, ratios: &[WidthRatio], out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let store = ck.param_store::<f32>()?;
    let model = &ck.meta.model;
    let grid = model
        .grid
        .ok_or_else(|| Error::validation("checkpoint", "standalone networks have no trained grid"))?;
    let test = cfg.load_split(Split::Test)?;
    let rows = probe_unseen(&store, model, &grid, ratios, &test)?;
    writeln!(out, "ratio,kind,nearest,accuracy,ce,gap").map_err(out_err)?;
    for r in rows {
        let kind = serde_json::to_value(r.kind)?;
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6}",
            r.ratio,
            kind.as_str().unwrap_or_default(),
            r.nearest,
            r.accuracy,
            r.ce,
            r.gap
        )
        .map_err(out_err)?;
    }
    Ok(())
}

/// Reads only the `model` and `grid` blocks of a run config, so cost
/// queries work on configs whose data is not available locally.
pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::validation("config", e.to_string()))?;
    let field = |name: &str| {
        value
            .get(name)
            .cloned()
            .ok_or_else(|| Error::validation(name.to_string(), "missing"))
    };
    let block: ModelBlock = serde_json::from_value(field("model")?).map_err(|e| Error::validation("model", e.to_string()))?;
    let grid = match value.get("grid") {
        Some(g) => Some(serde_json::from_value(g.clone()).map_err(|e| Error::validation("grid", e.to_string()))?),
        None => None,
    };
    let cfg = ModelConfig {
        image_size: block.image_size,
        patch_size: block.patch_size,
        in_channels: block.in_channels,
        embed_dim: block.embed_dim,
        num_heads: block.num_heads,
        depth: block.depth,
        mlp_ratio: block.mlp_ratio,
        num_classes: block.num_classes,
        grid,
        isolated_activation: true,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Multiply-accumulates and parameter counts per ratio.
pub fn flops_cmd(model: &ModelConfig, ratios: Option<&[WidthRatio]>, out: &mut dyn Write) -> Result<()> {
    let ratios = ratios.map_or_else(|| default_ratios(model), <[_]>::to_vec);
    writeln!(out, "ratio,flops,params").map_err(out_err)?;
    for r in ratios {
        writeln!(out, "{r},{},{}", flops(model, r)?, param_count(model, r)?).map_err(out_err)?;
    }
    Ok(())
}

/// Copies one sub-network into a standalone checkpoint. `mode` defaults to
/// the slicing the sub-network was trained with.
pub fn export_cmd(
    checkpoint: &Path,
    r: WidthRatio,
    mode: Option<SliceMode>,
    dest: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let store = ck.param_store::<f32>()?;
    let model = &ck.meta.model;
    let mode = match mode {
        Some(m) => m,
        None => model.subnet(r)?.mode,
    };
    let (sub_cfg, sub_store) = export_subnet(&store, model, r, mode)?;
    Checkpoint::export(&sub_cfg, &sub_store).save(dest)?;
    writeln!(
        out,
        "exported ratio {r} ({}) with {} parameters to {}",
        mode_name(mode),
        sub_store.num_params(),
        dest.display()
    )
    .map_err(out_err)?;
    Ok(())
}

/// Switches a training checkpoint to granularity `eps`, trains `epochs`
/// more epochs and sweeps the new grid.
pub fn regranularize_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    eps: Rational,
    epochs: u32,
    dest: Option<&Path>,
    out: &mut dyn Write,
) -> Result<SweepReport> {
    let mut trainer = resume_trainer(cfg, checkpoint)?;
    let train = cfg.load_split(Split::Train)?;
    let test = cfg.load_split(Split::Test)?;
    let dest = dest.map_or_else(|| checkpoint.to_path_buf(), Path::to_path_buf);
    let mut metrics = MetricsWriter::open(&cfg.output.metrics_path())?;
    regranularize(&mut trainer, eps, epochs, &train, |t, stats| {
        epoch_outputs(t, stats, &dest, &mut metrics, &test)
    })?;
    if epochs == 0 {
        Checkpoint::from_trainer(&trainer).save(&dest)?;
    }
    writeln!(
        out,
        "granularity {} over {} ratios, now at epoch {}",
        format_rational(&eps),
        trainer.model().grid.expect("grid").num_networks(),
        trainer.epoch()
    )
    .map_err(out_err)?;
    let grid = trainer.model().grid.expect("grid");
    let meta = SweepMeta {
        epoch: trainer.epoch(),
        seed: cfg.train.seed,
        config_hash: train_config_hash(&cfg.train),
    };
    let report = sweep(trainer.store(), trainer.model(), &grid.points(), &test, meta)?;
    write_sweep(&report, out)?;
    Ok(report)
}
