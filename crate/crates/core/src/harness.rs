//! Evaluation sweeps, probes at unseen ratios, the analytic cost model and
//! re-granularization of a running trainer.
//!
//! Costs are counted in multiply-accumulates and exclude element-wise work
//! (softmax, normalization, GELU).

use serde::Serialize;

use crate::coordination::{softmax_rows, EpochStats, Trainer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{infer, param_layout, predict, ModelConfig, ParamStore, Subnet};
use crate::real::Real;
use crate::slicing::{resolve_slice, Rational, RatioGrid, SliceMode, WidthRatio};

/// Samples per forward pass during evaluation. Rows are independent, so this
/// only trades memory for speed.
pub const EVAL_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub ratio: WidthRatio,
    pub mode: SliceMode,
    pub accuracy: f64,
    /// Mean cross-entropy of the classification head.
    pub ce: f64,
    pub correct: usize,
    pub count: usize,
}

/// Top-1 accuracy and mean CE of one sub-network on `data`.
pub fn evaluate_subnet<T: Real>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    subnet: Subnet,
    data: &Dataset,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::validation("data", "evaluation set is empty"));
    }
    if data.num_classes != cfg.num_classes || data.size != cfg.image_size || data.channels != cfg.in_channels {
        return Err(Error::validation(
            "data",
            format!(
                "dataset is {}x{}x{} with {} classes, model expects {}x{}x{} with {}",
                data.channels,
                data.size,
                data.size,
                data.num_classes,
                cfg.in_channels,
                cfg.image_size,
                cfg.image_size,
                cfg.num_classes
            ),
        ));
    }
    let k = cfg.num_classes;
    let mut correct = 0;
    let mut ce = 0.0;
    for batch in data.batches::<T>(EVAL_BATCH) {
        let out = infer(store, cfg, &batch.images, subnet)?;
        let probs = softmax_rows(out.cls.data(), k);
        for (i, &y) in batch.labels.iter().enumerate() {
            let row = i * k..(i + 1) * k;
            if predict(&out.cls.data()[row.clone()], &out.dist.data()[row.clone()]) == y {
                correct += 1;
            }
            ce -= probs[i * k + y].as_f64().max(1e-300).ln();
        }
    }
    let count = data.len();
    Ok(EvalResult {
        ratio: subnet.ratio,
        mode: subnet.mode,
        accuracy: correct as f64 / count as f64,
        ce: ce / count as f64,
        correct,
        count,
    })
}

/// Evaluates at any ratio passing the divisibility checks; grid ratios use
/// their trained slicing mode, others leading slices.
pub fn evaluate<T: Real>(store: &ParamStore<T>, cfg: &ModelConfig, r: WidthRatio, data: &Dataset) -> Result<EvalResult> {
    evaluate_subnet(store, cfg, cfg.probe_subnet(r)?, data)
}

/// Multiply-accumulates of one forward pass of a single image at ratio `r`.
pub fn flops(cfg: &ModelConfig, r: WidthRatio) -> Result<u64> {
    cfg.check_ratio(r)?;
    let d = r.of(cfg.embed_dim).expect("checked") as u64;
    let hidden = r.of(cfg.hidden_dim()).expect("checked") as u64;
    let n = cfg.num_patches() as u64;
    let tokens = cfg.num_tokens() as u64;
    let patch = n * cfg.patch_dim() as u64 * d;
    let attn_linear = 4 * tokens * d * d;
    let attn_mix = 2 * tokens * tokens * d;
    let mlp = 2 * tokens * d * hidden;
    let heads = 2 * cfg.num_classes as u64 * d;
    Ok(patch + cfg.depth as u64 * (attn_linear + attn_mix + mlp) + heads)
}

/// Parameters touched by the sub-network at `r`; `r = 1` gives the size of
/// the whole store.
pub fn param_count(cfg: &ModelConfig, r: WidthRatio) -> Result<u64> {
    cfg.check_ratio(r)?;
    let mut total = 0u64;
    for def in param_layout(cfg) {
        total += resolve_slice(&def.shape, &def.roles, r, SliceMode::Leading)?.numel() as u64;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub ratio: WidthRatio,
    pub mode: SliceMode,
    pub accuracy: f64,
    pub ce: f64,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepMeta {
    pub epoch: u32,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub meta: SweepMeta,
    /// One row per requested ratio, ascending.
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, r: WidthRatio) -> Option<&SweepRow> {
        self.rows.iter().find(|row| row.ratio == r)
    }
}

fn sorted_unique(ratios: &[WidthRatio]) -> Vec<WidthRatio> {
    let mut v = ratios.to_vec();
    v.sort();
    v.dedup();
    v
}

pub fn sweep<T: Real>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    ratios: &[WidthRatio],
    data: &Dataset,
    meta: SweepMeta,
) -> Result<SweepReport> {
    let mut rows = Vec::new();
    for r in sorted_unique(ratios) {
        let ev = evaluate(store, cfg, r, data)?;
        rows.push(SweepRow {
            ratio: r,
            mode: ev.mode,
            accuracy: ev.accuracy,
            ce: ev.ce,
            params: param_count(cfg, r)?,
            flops: flops(cfg, r)?,
        });
    }
    Ok(SweepReport { meta, rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    /// On the trained grid.
    Trained,
    /// Inside `[s, l]` but never activated.
    Inbound,
    /// Outside `[s, l]`.
    Outbound,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub ratio: WidthRatio,
    pub kind: ProbeKind,
    pub accuracy: f64,
    pub ce: f64,
    pub nearest: WidthRatio,
    /// Accuracy of the nearest trained ratio minus accuracy here.
    pub gap: f64,
}

fn nearest_point(grid: &RatioGrid, r: WidthRatio) -> WidthRatio {
    let dist = |p: WidthRatio| {
        let (a, b) = (p.value(), r.value());
        if a > b {
            a - b
        } else {
            b - a
        }
    };
    // ties go to the larger ratio
    grid.points()
        .into_iter()
        .rev()
        .min_by(|a, b| dist(*a).cmp(&dist(*b)))
        .expect("grids are non-empty")
}

/// Accuracy at ratios that may never have been trained, with the gap to the
/// nearest trained ratio. A report only; nothing is judged here.
pub fn probe_unseen<T: Real>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    trained: &RatioGrid,
    probes: &[WidthRatio],
    data: &Dataset,
) -> Result<Vec<ProbeRow>> {
    let mut rows = Vec::new();
    for r in sorted_unique(probes) {
        let kind = if trained.contains(r) {
            ProbeKind::Trained
        } else if r >= trained.smallest() && r <= trained.largest() {
            ProbeKind::Inbound
        } else {
            ProbeKind::Outbound
        };
        let nearest = nearest_point(trained, r);
        let ev = evaluate(store, cfg, r, data)?;
        let gap = if nearest == r {
            0.0
        } else {
            evaluate(store, cfg, nearest, data)?.accuracy - ev.accuracy
        };
        rows.push(ProbeRow {
            ratio: r,
            kind,
            accuracy: ev.accuracy,
            ce: ev.ce,
            nearest,
            gap,
        });
    }
    Ok(rows)
}

/// Moves a trainer to granularity `eps` and trains `epochs` more epochs,
/// calling `on_epoch` after each.
pub fn regranularize<T: Real>(
    trainer: &mut Trainer<T>,
    eps: Rational,
    epochs: u32,
    data: &Dataset,
    mut on_epoch: impl FnMut(&Trainer<T>, &EpochStats) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    trainer.regranularize(eps)?;
    let mut out = Vec::with_capacity(epochs as usize);
    for _ in 0..epochs {
        let stats = trainer.run_epoch(data)?;
        on_epoch(trainer, &stats)?;
        out.push(stats);
    }
    Ok(out)
}
