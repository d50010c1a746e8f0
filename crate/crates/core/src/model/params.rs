use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ModelConfig, Subnet};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::slicing::{resolve_slice, AxisRole, SliceSpec};
use crate::tensor::{kernels::for_each_block, GradSink, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamInit {
    /// Normal(0, 0.02) truncated at two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub roles: Vec<AxisRole>,
    pub init: ParamInit,
}

/// Every parameter of the network described by `cfg`, in lexicographic
/// name order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamDef> {
    use AxisRole::{Fixed, Sliceable};
    use ParamInit::*;
    let (d, h, k) = (cfg.embed_dim, cfg.hidden_dim(), cfg.num_classes);
    let mut defs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, roles: Vec<AxisRole>, init| {
        defs.push(ParamDef { name, shape, roles, init })
    };
    let linear = |add: &mut dyn FnMut(String, Vec<usize>, Vec<AxisRole>, ParamInit),
                      prefix: &str,
                      out: (usize, AxisRole),
                      inp: (usize, AxisRole)| {
        add(format!("{prefix}.weight"), vec![out.0, inp.0], vec![out.1, inp.1], TruncNormal);
        add(format!("{prefix}.bias"), vec![out.0], vec![out.1], Zeros);
    };
    let norm = |add: &mut dyn FnMut(String, Vec<usize>, Vec<AxisRole>, ParamInit), prefix: &str| {
        add(format!("{prefix}.weight"), vec![d], vec![Sliceable], Ones);
        add(format!("{prefix}.bias"), vec![d], vec![Sliceable], Zeros);
    };

    add("cls_token".into(), vec![1, d], vec![Fixed, Sliceable], TruncNormal);
    add("dist_token".into(), vec![1, d], vec![Fixed, Sliceable], TruncNormal);
    add("pos_embed".into(), vec![cfg.num_tokens(), d], vec![Fixed, Sliceable], TruncNormal);
    linear(&mut add, "patch_embed", (d, Sliceable), (cfg.patch_dim(), Fixed));
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}");
        norm(&mut add, &format!("{b}.norm1"));
        for proj in ["q", "k", "v", "proj"] {
            linear(&mut add, &format!("{b}.attn.{proj}"), (d, Sliceable), (d, Sliceable));
        }
        norm(&mut add, &format!("{b}.norm2"));
        linear(&mut add, &format!("{b}.mlp.fc1"), (h, Sliceable), (d, Sliceable));
        linear(&mut add, &format!("{b}.mlp.fc2"), (d, Sliceable), (h, Sliceable));
    }
    norm(&mut add, "norm");
    linear(&mut add, "head", (k, Fixed), (d, Sliceable));
    linear(&mut add, "head_dist", (k, Fixed), (d, Sliceable));
    defs.sort_by(|a, b| a.name.cmp(&b.name));
    defs
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub roles: Vec<AxisRole>,
}

impl<T: Real> Param<T> {
    pub fn slice_spec(&self, subnet: Subnet) -> Result<SliceSpec> {
        resolve_slice(self.tensor.shape(), &self.roles, subnet.ratio, subnet.mode)
    }
}

/// Named full-width parameters with gradient buffers, iterated in
/// lexicographic name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, roles: Vec<AxisRole>) -> Result<()> {
        let name = name.into();
        if tensor.shape().len() != roles.len() {
            return Err(Error::shape(
                "param",
                format!("{name}: {} roles for shape {:?}", roles.len(), tensor.shape()),
            ));
        }
        let tensor = if tensor.requires_grad() { tensor } else { tensor.with_grad() };
        self.params.insert(name, Param { tensor, roles });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::validation("param", format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::validation("param", format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Total number of scalar parameters at full width.
    pub fn num_params(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Number of parameters a sub-network reads.
    pub fn sliced_params(&self, subnet: Subnet) -> Result<usize> {
        self.params.values().map(|p| Ok(p.slice_spec(subnet)?.numel())).sum()
    }

    /// Checks names and shapes against the layout for `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = param_layout(cfg);
        if layout.len() != self.params.len() {
            return Err(Error::validation(
                "checkpoint",
                format!("expected {} parameters, found {}", layout.len(), self.params.len()),
            ));
        }
        for def in layout {
            let p = self.get(&def.name)?;
            if p.tensor.shape() != def.shape.as_slice() {
                return Err(Error::validation(
                    "checkpoint",
                    format!("{} has shape {:?}, expected {:?}", def.name, p.tensor.shape(), def.shape),
                ));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            roles: p.roles.clone(),
                        },
                    )
                })
                .collect(),
        }
    }
}

impl<T: Real> GradSink<T> for ParamStore<T> {
    fn accumulate(&mut self, name: &str, ranges: &[Range<usize>], grad: &[T]) -> Result<()> {
        let param = self.get_mut(name)?;
        let shape = param.tensor.shape().to_vec();
        let buf = param
            .tensor
            .grad_mut()
            .ok_or_else(|| Error::validation("param", format!("{name} has no gradient buffer")))?;
        for_each_block(&shape, ranges, |dst, src, len| {
            for (o, g) in buf[dst..dst + len].iter_mut().zip(&grad[src..src + len]) {
                *o += *g;
            }
        });
        Ok(())
    }
}

/// Deterministic initialization: parameters are drawn in lexicographic name
/// order from one ChaCha8 stream seeded with `seed`.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for def in param_layout(cfg) {
        let n: usize = def.shape.iter().product();
        let data: Vec<T> = match def.init {
            ParamInit::Zeros => vec![T::zero(); n],
            ParamInit::Ones => vec![T::one(); n],
            ParamInit::TruncNormal => (0..n).map(|_| T::lit(trunc_normal(&mut rng))).collect(),
        };
        store.insert(def.name, Tensor::new(def.shape, data)?, def.roles)?;
    }
    Ok(store)
}

fn trunc_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * INIT_STD;
        }
    }
}
