use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{softmax_rows, subnet_loss, SubnetRole};
use super::optim::AdamW;
use super::sampler::{RatioList, RngState, StableSampler};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{forward, infer, init_params, predict, ModelConfig, ParamStore, Subnet};
use crate::real::Real;
use crate::slicing::{Rational, SliceMode, WidthRatio};
use crate::tensor::Tape;

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}

fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "one")]
    pub lambda: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub teacher_path: Option<PathBuf>,
    /// Epochs of full-width pretraining; defaults to `epochs`.
    #[serde(default)]
    pub teacher_epochs: Option<u32>,
    #[serde(default = "yes")]
    pub isolated_activation: bool,
    #[serde(default = "yes")]
    pub pkt: bool,
    #[serde(default = "yes")]
    pub stable_sampling: bool,
    #[serde(default = "yes")]
    pub noise_calibration: bool,
    #[serde(default = "yes")]
    pub constant_smallest: bool,
}

impl TrainConfig {
    pub fn new(epochs: u32, batch_size: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            lambda: 1.0,
            epochs,
            batch_size,
            lr,
            weight_decay: 0.0,
            betas: default_betas(),
            adam_eps: default_adam_eps(),
            seed,
            teacher_path: None,
            teacher_epochs: None,
            isolated_activation: true,
            pkt: true,
            stable_sampling: true,
            noise_calibration: true,
            constant_smallest: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, why: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::validation(format!("train.{field}"), why.to_string()))
            }
        };
        check(self.lambda.is_finite() && self.lambda >= 0.0, "lambda", "must be finite and >= 0")?;
        check(self.epochs >= 1, "epochs", "must be at least 1")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(self.lr.is_finite() && self.lr > 0.0, "lr", "must be positive")?;
        check(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "weight_decay",
            "must be >= 0",
        )?;
        check(
            self.betas.iter().all(|b| (0.0..1.0).contains(b)),
            "betas",
            "each beta must lie in [0, 1)",
        )?;
        check(self.adam_eps > 0.0, "adam_eps", "must be positive")?;
        check(self.teacher_epochs != Some(0), "teacher_epochs", "must be at least 1")?;
        Ok(())
    }

    pub fn optimizer<T: Real>(&self) -> AdamW<T> {
        AdamW::new(self.lr, self.weight_decay, self.betas[0], self.betas[1], self.adam_eps)
    }
}

/// Frozen pretrained full-width network. Only ever run on no-grad tapes.
#[derive(Clone, Debug)]
pub struct Teacher<T> {
    pub store: ParamStore<T>,
    pub cfg: ModelConfig,
}

impl<T: Real> Teacher<T> {
    /// Softmax of the classification head at full width, `[B, K]`.
    pub fn probs(&self, batch: &Batch<T>) -> Result<Vec<T>> {
        let logits = infer(&self.store, &self.cfg, &batch.images, Subnet::full())?;
        Ok(softmax_rows(logits.cls.data(), self.cfg.num_classes))
    }

    pub fn check_compatible(&self, student: &ModelConfig) -> Result<()> {
        let same_io = self.cfg.image_size == student.image_size
            && self.cfg.in_channels == student.in_channels
            && self.cfg.num_classes == student.num_classes;
        if !same_io {
            return Err(Error::validation(
                "train.teacher_path",
                "teacher image geometry or class count differs from the model",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubnetLoss {
    pub ratio: WidthRatio,
    pub mode: SliceMode,
    pub ce: f64,
    pub kl: Option<f64>,
    /// The value that was backpropagated.
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

/// Loss terms of one iteration, largest ratio first.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBundle {
    pub entries: Vec<SubnetLoss>,
    pub total: f64,
}

/// Forward and backward of the four activated sub-networks, in order
/// `l, m2, m1, s`, accumulating gradients into `store`. No optimizer step.
pub fn accumulate_step<T: Real>(
    store: &mut ParamStore<T>,
    model: &ModelConfig,
    teacher: Option<&Teacher<T>>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    ratios: RatioList,
) -> Result<LossBundle> {
    let k = model.num_classes;
    let external = teacher.map(|t| t.probs(batch)).transpose()?;
    // detached distillation-head probabilities of the networks already run,
    // largest first
    let mut done: Vec<(WidthRatio, Vec<T>)> = Vec::with_capacity(4);
    let mut full: Option<Vec<T>> = None;
    let mut entries = Vec::with_capacity(4);
    let list = ratios.ratios();
    for (idx, &r) in list.iter().enumerate().rev() {
        let role = if idx == list.len() - 1 {
            SubnetRole::Full
        } else {
            SubnetRole::Student
        };
        let subnet = model.subnet(r)?;
        let target = match role {
            SubnetRole::Full => external.as_deref(),
            SubnetRole::Student if cfg.pkt => done.iter().rev().find(|(q, _)| *q > r).map(|(_, p)| p.as_slice()),
            SubnetRole::Student => full.as_deref(),
        };
        let mut tape = Tape::new();
        let out = forward(&mut tape, store, model, &batch.images, subnet)?;
        let terms = subnet_loss(
            &mut tape,
            out,
            &batch.labels,
            target,
            role,
            cfg.lambda,
            cfg.noise_calibration,
        )?;
        let loss = tape.item(terms.loss)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        tape.backward(terms.loss, store)?;

        let cls = tape.value(out.cls);
        let dist = tape.value(out.dist);
        let correct = batch
            .labels
            .iter()
            .enumerate()
            .filter(|(i, y)| predict(&cls[i * k..(i + 1) * k], &dist[i * k..(i + 1) * k]) == **y)
            .count();
        entries.push(SubnetLoss {
            ratio: r,
            mode: subnet.mode,
            ce: terms.ce.as_f64(),
            kl: terms.kl.map(|v| v.as_f64()),
            loss: loss.as_f64(),
            correct,
            count: batch.labels.len(),
        });
        let probs = softmax_rows(dist, k);
        if role == SubnetRole::Full {
            full = Some(probs.clone());
        }
        done.push((r, probs));
    }
    let total = entries.iter().map(|e| e.loss).sum();
    Ok(LossBundle { entries, total })
}

/// One full iteration: sample ratios, accumulate four gradients, one
/// optimizer step.
pub fn train_step<T: Real>(
    store: &mut ParamStore<T>,
    optim: &mut AdamW<T>,
    model: &ModelConfig,
    teacher: Option<&Teacher<T>>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    sampler: &mut StableSampler,
) -> Result<LossBundle> {
    let ratios = sampler.sample(cfg.stable_sampling, cfg.constant_smallest);
    let bundle = accumulate_step(store, model, teacher, batch, cfg, ratios)?;
    optim.step(store)?;
    Ok(bundle)
}

/// Running per-ratio training statistics over an epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RatioStats {
    pub activations: usize,
    pub ce_sum: f64,
    pub kl_sum: f64,
    pub kl_count: usize,
    pub correct: usize,
    pub count: usize,
}

impl RatioStats {
    pub fn mean_ce(&self) -> f64 {
        self.ce_sum / self.activations.max(1) as f64
    }

    pub fn mean_kl(&self) -> Option<f64> {
        (self.kl_count > 0).then(|| self.kl_sum / self.kl_count as f64)
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based index of the epoch just finished.
    pub epoch: u32,
    pub per_ratio: BTreeMap<WidthRatio, RatioStats>,
    pub mean_total: f64,
    pub lr: f64,
}

/// Owns all mutable training state; everything needed to resume is
/// reachable from here.
pub struct Trainer<T> {
    model: ModelConfig,
    train: TrainConfig,
    store: ParamStore<T>,
    optim: AdamW<T>,
    sampler: StableSampler,
    data_rng: ChaCha8Rng,
    epoch: u32,
    teacher: Option<Teacher<T>>,
}

/// Stream offsets so the sampler and the shuffler never share a sequence.
const SAMPLER_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<T: Real> Trainer<T> {
    pub fn new(mut model: ModelConfig, train: TrainConfig, teacher: Option<Teacher<T>>) -> Result<Self> {
        train.validate()?;
        model.isolated_activation = train.isolated_activation;
        model.validate()?;
        let grid = model
            .grid
            .ok_or_else(|| Error::validation("grid", "training needs a ratio grid"))?;
        if let Some(t) = &teacher {
            t.check_compatible(&model)?;
        }
        let store = init_params(&model, train.seed)?;
        let sampler = StableSampler::with_rng(grid, seeded(train.seed, SAMPLER_STREAM))?;
        Ok(Trainer {
            optim: train.optimizer(),
            data_rng: seeded(train.seed, SHUFFLE_STREAM),
            model,
            train,
            store,
            sampler,
            epoch: 0,
            teacher,
        })
    }

    /// Rebuilds a trainer from checkpointed state.
    #[allow(clippy::too_many_arguments)]
    pub fn resume(
        mut model: ModelConfig,
        train: TrainConfig,
        store: ParamStore<T>,
        optim: AdamW<T>,
        sampler_rng: &RngState,
        data_rng: &RngState,
        epoch: u32,
        teacher: Option<Teacher<T>>,
    ) -> Result<Self> {
        train.validate()?;
        model.isolated_activation = train.isolated_activation;
        model.validate()?;
        store.check_layout(&model)?;
        let grid = model
            .grid
            .ok_or_else(|| Error::validation("grid", "training needs a ratio grid"))?;
        if let Some(t) = &teacher {
            t.check_compatible(&model)?;
        }
        Ok(Trainer {
            sampler: StableSampler::with_rng(grid, sampler_rng.restore()?)?,
            data_rng: data_rng.restore()?,
            model,
            train,
            store,
            optim,
            epoch,
            teacher,
        })
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn optimizer(&self) -> &AdamW<T> {
        &self.optim
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn sampler_rng(&self) -> RngState {
        self.sampler.rng_state()
    }

    pub fn data_rng(&self) -> RngState {
        RngState::capture(&self.data_rng)
    }

    pub fn has_teacher(&self) -> bool {
        self.teacher.is_some()
    }

    pub fn step(&mut self, batch: &Batch<T>) -> Result<LossBundle> {
        train_step(
            &mut self.store,
            &mut self.optim,
            &self.model,
            self.teacher.as_ref(),
            batch,
            &self.train,
            &mut self.sampler,
        )
    }

    /// One shuffled pass over `data`.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        if data.num_classes != self.model.num_classes {
            return Err(Error::validation(
                "data",
                format!("{} classes in data, model has {}", data.num_classes, self.model.num_classes),
            ));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.data_rng);
        let mut per_ratio: BTreeMap<WidthRatio, RatioStats> = BTreeMap::new();
        let mut total = 0.0;
        let mut iters = 0usize;
        for chunk in order.chunks(self.train.batch_size) {
            let batch = data.batch::<T>(chunk);
            let bundle = self.step(&batch)?;
            total += bundle.total;
            iters += 1;
            for e in bundle.entries {
                let st = per_ratio.entry(e.ratio).or_default();
                st.activations += 1;
                st.ce_sum += e.ce;
                if let Some(kl) = e.kl {
                    st.kl_sum += kl;
                    st.kl_count += 1;
                }
                st.correct += e.correct;
                st.count += e.count;
            }
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            per_ratio,
            mean_total: total / iters.max(1) as f64,
            lr: self.train.lr,
        })
    }

    /// Switches to granularity `eps` with the same bounds. Optimizer state
    /// and both random streams carry over.
    pub fn regranularize(&mut self, eps: Rational) -> Result<()> {
        let old = self
            .model
            .grid
            .ok_or_else(|| Error::validation("grid", "training needs a ratio grid"))?;
        let grid = old.with_eps(eps)?;
        let model = ModelConfig {
            grid: Some(grid),
            ..self.model.clone()
        };
        model.validate()?;
        self.sampler = StableSampler::with_rng(grid, self.sampler.rng().clone())?;
        self.model = model;
        Ok(())
    }
}

/// Progress of one teacher epoch: mean CE and accuracy of the
/// classification head over the training batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherEpoch {
    pub epoch: u32,
    pub ce: f64,
    pub acc: f64,
}

/// Full-width, cross-entropy-only training of the network that later serves
/// as the external teacher. `on_epoch` sees the store after every epoch.
pub fn pretrain_teacher<T: Real>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(TeacherEpoch, &ParamStore<T>) -> Result<()>,
) -> Result<Teacher<T>> {
    cfg.validate()?;
    model.validate()?;
    let mut store = init_params::<T>(model, cfg.seed)?;
    let mut optim = cfg.optimizer::<T>();
    let mut rng = seeded(cfg.seed, SHUFFLE_STREAM);
    let full = Subnet::full();
    let epochs = cfg.teacher_epochs.unwrap_or(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut ce_sum = 0.0;
        let mut iters = 0usize;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch::<T>(chunk);
            let mut tape = Tape::new();
            let out = forward(&mut tape, &store, model, &batch.images, full)?;
            let loss = tape.cross_entropy(out.cls, &batch.labels)?;
            let v = tape.item(loss)?;
            if !v.is_finite() {
                return Err(Error::NonFinite("teacher loss"));
            }
            let k = model.num_classes;
            let logits = tape.value(out.cls);
            correct += batch
                .labels
                .iter()
                .enumerate()
                .filter(|(i, y)| argmax(&logits[i * k..(i + 1) * k]) == **y)
                .count();
            tape.backward(loss, &mut store)?;
            optim.step(&mut store)?;
            ce_sum += v.as_f64();
            iters += 1;
        }
        let stats = TeacherEpoch {
            epoch,
            ce: ce_sum / iters.max(1) as f64,
            acc: correct as f64 / data.len().max(1) as f64,
        };
        on_epoch(stats, &store)?;
    }
    Ok(Teacher {
        store,
        cfg: model.clone(),
    })
}

fn argmax<T: Real>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}
