//! Helpers shared by the integration and acceptance tests, including a
//! deliberately naive ViT used as an independent forward oracle.

#![allow(dead_code)]

use std::collections::BTreeMap;

use slimvit::io::synthetic::{Split, SyntheticSpec};
use slimvit::model::{ModelConfig, ParamStore};
use slimvit::slicing::{RatioGrid, SliceMode, WidthRatio};
use slimvit::data::Dataset;

pub fn ratio(s: &str) -> WidthRatio {
    s.parse().unwrap()
}

/// D=64, H=4, L=4, 16x16x3 images, patch 4, K=10.
pub fn toy(grid: &str) -> ModelConfig {
    let parts: Vec<&str> = grid.split(',').collect();
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        in_channels: 3,
        embed_dim: 64,
        num_heads: 4,
        depth: 4,
        mlp_ratio: 4,
        num_classes: 10,
        grid: Some(RatioGrid::parse(parts[0], parts[1], parts[2]).unwrap()),
        isolated_activation: true,
    }
}

/// A smaller network for tests that run many forward passes.
pub fn tiny(grid: &str) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        in_channels: 2,
        embed_dim: 16,
        num_heads: 2,
        depth: 2,
        num_classes: 5,
        ..toy(grid)
    }
}

pub fn synthetic(cfg: &ModelConfig, noise: f64, train: usize, test: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: cfg.num_classes,
        image_size: cfg.image_size,
        channels: cfg.in_channels,
        seed,
        noise,
        train,
        test,
    }
}

pub fn data(cfg: &ModelConfig, n: usize, seed: u64) -> Dataset {
    synthetic(cfg, 0.3, n, 1, seed).generate(Split::Train).unwrap()
}

/// Weights of one network as `name -> (shape, values)`.
pub type Weights = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

/// Axes of each parameter that scale with the width ratio, decided from the
/// parameter name alone.
fn width_axes(name: &str, rank: usize) -> Vec<bool> {
    if matches!(name, "cls_token" | "dist_token" | "pos_embed") {
        return vec![false, true];
    }
    if name.starts_with("head") {
        return if rank == 2 { vec![false, true] } else { vec![false] };
    }
    if name.starts_with("patch_embed") {
        return if rank == 2 { vec![true, false] } else { vec![true] };
    }
    vec![true; rank]
}

/// Copies the sub-block of sub-network (`r`, `mode`) out of `store` with
/// plain index arithmetic.
pub fn copy_subnet(store: &ParamStore<f64>, r: WidthRatio, mode: SliceMode) -> Weights {
    let frac = r.to_f64();
    let mut out = Weights::new();
    for (name, p) in store.iter() {
        let shape = p.tensor.shape().to_vec();
        let axes = width_axes(name, shape.len());
        let ranges: Vec<(usize, usize)> = shape
            .iter()
            .zip(&axes)
            .map(|(&len, &scaled)| {
                if !scaled {
                    return (0, len);
                }
                let keep = (len as f64 * frac).round() as usize;
                match mode {
                    SliceMode::Trailing => (len - keep, len),
                    _ => (0, keep),
                }
            })
            .collect();
        let sub_shape: Vec<usize> = ranges.iter().map(|(a, b)| b - a).collect();
        let data = p.tensor.data();
        let mut vals = Vec::new();
        match shape.len() {
            1 => vals.extend_from_slice(&data[ranges[0].0..ranges[0].1]),
            2 => {
                for i in ranges[0].0..ranges[0].1 {
                    vals.extend_from_slice(&data[i * shape[1] + ranges[1].0..i * shape[1] + ranges[1].1]);
                }
            }
            _ => panic!("unexpected rank for {name}"),
        }
        out.insert(name.clone(), (sub_shape, vals));
    }
    out
}

pub fn store_weights(store: &ParamStore<f64>) -> Weights {
    store
        .iter()
        .map(|(n, p)| (n.clone(), (p.tensor.shape().to_vec(), p.tensor.data().to_vec())))
        .collect()
}

fn w<'a>(ws: &'a Weights, name: &str) -> &'a [f64] {
    &ws.get(name).unwrap_or_else(|| panic!("missing {name}")).1
}

/// `y = W x + b` with `W` stored `[out, in]`.
fn affine(ws: &Weights, prefix: &str, x: &[f64]) -> Vec<f64> {
    let (shape, wt) = ws.get(&format!("{prefix}.weight")).unwrap();
    let b = w(ws, &format!("{prefix}.bias"));
    let (o, i) = (shape[0], shape[1]);
    assert_eq!(x.len(), i, "{prefix}");
    (0..o)
        .map(|r| b[r] + (0..i).map(|c| wt[r * i + c] * x[c]).sum::<f64>())
        .collect()
}

fn layer_norm(ws: &Weights, prefix: &str, x: &[f64]) -> Vec<f64> {
    let g = w(ws, &format!("{prefix}.weight"));
    let b = w(ws, &format!("{prefix}.bias"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-6).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// Logits of both heads for one `[C, S, S]` image. Width and head count are
/// read off the weight shapes and `heads`.
pub fn reference_forward(ws: &Weights, cfg: &ModelConfig, image: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = ws["cls_token"].0[1];
    let heads = cfg.num_heads;
    let dh = d / heads;
    let (c, s, p) = (cfg.in_channels, cfg.image_size, cfg.patch_size);
    let g = s / p;
    let mut tokens: Vec<Vec<f64>> = vec![w(ws, "cls_token").to_vec(), w(ws, "dist_token").to_vec()];
    for gy in 0..g {
        for gx in 0..g {
            let mut patch = Vec::with_capacity(c * p * p);
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        patch.push(image[(ch * s + gy * p + py) * s + gx * p + px]);
                    }
                }
            }
            tokens.push(affine(ws, "patch_embed", &patch));
        }
    }
    let pos = w(ws, "pos_embed");
    for (t, tok) in tokens.iter_mut().enumerate() {
        for (j, v) in tok.iter_mut().enumerate() {
            *v += pos[t * d + j];
        }
    }
    let n = tokens.len();
    for blk in 0..cfg.depth {
        let pre = format!("blocks.{blk}");
        let h: Vec<Vec<f64>> = tokens.iter().map(|t| layer_norm(ws, &format!("{pre}.norm1"), t)).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|t| affine(ws, &format!("{pre}.attn.q"), t)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|t| affine(ws, &format!("{pre}.attn.k"), t)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|t| affine(ws, &format!("{pre}.attn.v"), t)).collect();
        let mut ctx = vec![vec![0.0; d]; n];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..n {
                    for c in cols.clone() {
                        ctx[i][c] += e[j] / z * v[j][c];
                    }
                }
            }
        }
        for i in 0..n {
            let o = affine(ws, &format!("{pre}.attn.proj"), &ctx[i]);
            for j in 0..d {
                tokens[i][j] += o[j];
            }
            let h2 = layer_norm(ws, &format!("{pre}.norm2"), &tokens[i]);
            let a: Vec<f64> = affine(ws, &format!("{pre}.mlp.fc1"), &h2).into_iter().map(gelu).collect();
            let o = affine(ws, &format!("{pre}.mlp.fc2"), &a);
            for j in 0..d {
                tokens[i][j] += o[j];
            }
        }
    }
    let cls = layer_norm(ws, "norm", &tokens[0]);
    let dist = layer_norm(ws, "norm", &tokens[1]);
    (affine(ws, "head", &cls), affine(ws, "head_dist", &dist))
}

pub mod scala {
    //! A frozen instance of one training iteration in f64, with helpers that
    //! evaluate each sub-network's loss against fixed distillation targets.

    use std::collections::BTreeMap;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use slimvit::coordination::{
        accumulate_step, softmax_rows, subnet_loss, RatioList, SubnetRole, Teacher, TrainConfig,
    };
    use slimvit::data::Batch;
    use slimvit::model::{forward, infer, init_params, ModelConfig, ParamStore};
    use slimvit::tensor::Tape;

    pub struct Fixture {
        pub cfg: ModelConfig,
        pub store: ParamStore<f64>,
        pub teacher: Teacher<f64>,
        pub batch: Batch<f64>,
        pub train: TrainConfig,
        pub ratios: RatioList,
    }

    pub fn fixture(cfg: ModelConfig, ratios: [&str; 4], batch: usize, seed: u64) -> Fixture {
        let store = init_params::<f64>(&cfg, seed).unwrap();
        let teacher = Teacher {
            store: init_params::<f64>(&cfg, seed + 1000).unwrap(),
            cfg: cfg.clone(),
        };
        let ds = super::data(&cfg, batch, seed);
        let idx: Vec<usize> = (0..batch).collect();
        Fixture {
            batch: ds.batch::<f64>(&idx),
            train: TrainConfig::new(1, batch, 1e-3, seed),
            ratios: RatioList(ratios.map(super::ratio)),
            cfg,
            store,
            teacher,
        }
    }

    impl Fixture {
        /// Distillation target of each activated ratio, largest first,
        /// computed once at the current parameters.
        pub fn targets(&self) -> Vec<Vec<f64>> {
            let k = self.cfg.num_classes;
            let mut out = vec![self.teacher.probs(&self.batch).unwrap()];
            let list = self.ratios.ratios();
            for r in list.iter().rev().take(3) {
                let logits = infer(&self.store, &self.cfg, &self.batch.images, self.cfg.subnet(*r).unwrap()).unwrap();
                out.push(softmax_rows(logits.dist.data(), k));
            }
            out
        }

        /// Loss of the `i`-th activated network counted from the largest,
        /// and optionally its parameter gradients.
        pub fn subnet_loss(&self, store: &mut ParamStore<f64>, i: usize, target: &[f64], grads: bool) -> f64 {
            let r = self.ratios.ratios()[3 - i];
            let role = if i == 0 { SubnetRole::Full } else { SubnetRole::Student };
            let mut tape = Tape::new();
            let out = forward(&mut tape, store, &self.cfg, &self.batch.images, self.cfg.subnet(r).unwrap()).unwrap();
            let terms = subnet_loss(
                &mut tape,
                out,
                &self.batch.labels,
                Some(target),
                role,
                self.train.lambda,
                self.train.noise_calibration,
            )
            .unwrap();
            if grads {
                tape.backward(terms.loss, store).unwrap();
            }
            tape.item(terms.loss).unwrap()
        }

        /// Sum of the four losses with the targets held fixed.
        pub fn total_loss(&self, store: &mut ParamStore<f64>, targets: &[Vec<f64>]) -> f64 {
            (0..4).map(|i| self.subnet_loss(store, i, &targets[i], false)).sum()
        }
    }

    pub struct FdReport {
        pub worst: f64,
        pub worst_at: String,
        pub checked: usize,
    }

    impl Fixture {
        /// Worst relative error between central differences and the tape
        /// over `count` sampled coordinates. Most picks are size-weighted;
        /// every fourth picks a tensor uniformly so small tensors are
        /// covered. Denominators are floored at `floor`.
        pub fn fd_check(&self, count: usize, h: f64, floor: f64, seed: u64) -> FdReport {
            let targets = self.targets();
            let mut store = self.store.clone();
            accumulate_step(&mut store, &self.cfg, Some(&self.teacher), &self.batch, &self.train, self.ratios).unwrap();
            let analytic = grads_of(&store);

            let names: Vec<String> = self.store.names().map(String::from).collect();
            let sizes: Vec<usize> = names.iter().map(|n| self.store.get(n).unwrap().tensor.numel()).collect();
            let total: usize = sizes.iter().sum();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut probe = self.store.clone();
            let mut report = FdReport { worst: 0.0, worst_at: String::new(), checked: 0 };
            for n in 0..count {
                let t = if n % 4 == 3 {
                    rng.random_range(0..names.len())
                } else {
                    let mut at = rng.random_range(0..total);
                    sizes.iter().position(|&len| if at < len { true } else { at -= len; false }).unwrap()
                };
                let name = &names[t];
                let j = rng.random_range(0..sizes[t]);
                let orig = probe.get(name).unwrap().tensor.data()[j];
                probe.get_mut(name).unwrap().tensor.data_mut()[j] = orig + h;
                let up = self.total_loss(&mut probe, &targets);
                probe.get_mut(name).unwrap().tensor.data_mut()[j] = orig - h;
                let down = self.total_loss(&mut probe, &targets);
                probe.get_mut(name).unwrap().tensor.data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let ad = analytic[name][j];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(floor);
                if rel > report.worst {
                    report.worst = rel;
                    report.worst_at = format!("{name}[{j}] fd={fd:e} tape={ad:e}");
                }
                report.checked += 1;
            }
            report
        }

        /// Compares one accumulated step against the sum of four separately
        /// computed sub-network gradients. Returns the worst relative error
        /// over entries above 1e-12, the number of entries outside every
        /// activated slice, and how many of those are nonzero.
        pub fn accumulation_check(&self) -> (f64, usize, usize) {
            let targets = self.targets();
            let mut acc = self.store.clone();
            accumulate_step(&mut acc, &self.cfg, Some(&self.teacher), &self.batch, &self.train, self.ratios).unwrap();
            let acc = grads_of(&acc);
            let mut sum: BTreeMap<String, Vec<f64>> =
                acc.iter().map(|(k, v)| (k.clone(), vec![0.0; v.len()])).collect();
            for (i, t) in targets.iter().enumerate() {
                let mut s = self.store.clone();
                self.subnet_loss(&mut s, i, t, true);
                for (name, g) in grads_of(&s) {
                    for (a, b) in sum.get_mut(&name).unwrap().iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            let subnets: Vec<_> = self.ratios.ratios().iter().map(|r| self.cfg.subnet(*r).unwrap()).collect();
            let (mut worst, mut outside, mut leaked) = (0.0f64, 0, 0);
            for (name, g) in &acc {
                let want = &sum[name];
                for (a, b) in g.iter().zip(want) {
                    let scale = a.abs().max(b.abs());
                    if scale > 1e-12 {
                        worst = worst.max((a - b).abs() / scale);
                    }
                }
                let param = self.store.get(name).unwrap();
                let shape = param.tensor.shape().to_vec();
                let specs: Vec<_> = subnets.iter().map(|s| param.slice_spec(*s).unwrap()).collect();
                for (flat, v) in g.iter().enumerate() {
                    let mut rem = flat;
                    let mut idx = vec![0; shape.len()];
                    for ax in (0..shape.len()).rev() {
                        idx[ax] = rem % shape[ax];
                        rem /= shape[ax];
                    }
                    let covered = specs
                        .iter()
                        .any(|sp| sp.ranges.iter().zip(&idx).all(|(r, i)| r.contains(i)));
                    if !covered {
                        outside += 1;
                        if *v != 0.0 {
                            leaked += 1;
                        }
                    }
                }
            }
            (worst, outside, leaked)
        }
    }

    pub fn grads_of(store: &ParamStore<f64>) -> BTreeMap<String, Vec<f64>> {
        store
            .iter()
            .map(|(n, p)| (n.clone(), p.tensor.grad().expect("params track grads").to_vec()))
            .collect()
    }
}
