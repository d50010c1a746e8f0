use super::{param_layout, ModelConfig, ParamStore, Subnet, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::slicing::{SliceMode, WidthRatio};
use crate::tensor::{Tape, Tensor, Var};

/// Classification and distillation logits, `[B, K]` each, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct SubnetOutput {
    pub cls: Var,
    pub dist: Var,
}

/// Materialized logits from a no-grad forward.
#[derive(Clone, Debug, PartialEq)]
pub struct SubnetLogits<T> {
    pub cls: Tensor<T>,
    pub dist: Tensor<T>,
}

/// `[B, C, H, W]` images to `[B, N, C * p * p]` flattened patches, patches in
/// row-major grid order, features ordered (channel, row, column).
pub fn patchify<T: Real>(images: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let s = images.shape();
    let (c, hw, p) = (cfg.in_channels, cfg.image_size, cfg.patch_size);
    if s.len() != 4 || s[1] != c || s[2] != hw || s[3] != hw {
        return Err(Error::shape(
            "patchify",
            format!("images {s:?}, expected [B, {c}, {hw}, {hw}]"),
        ));
    }
    let b = s[0];
    let g = cfg.grid_size();
    let pd = cfg.patch_dim();
    let src = images.data();
    let mut out = Vec::with_capacity(b * g * g * pd);
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for ci in 0..c {
                    for py in 0..p {
                        let row = ((bi * c + ci) * hw + gy * p + py) * hw + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, g * g, pd], out)
}

struct Sliced<'a, T> {
    store: &'a ParamStore<T>,
    subnet: Subnet,
}

impl<T: Real> Sliced<'_, T> {
    fn get(&self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        let p = self.store.get(name)?;
        let spec = p.slice_spec(self.subnet)?;
        tape.param(name, &p.tensor, &spec.ranges)
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.get(tape, &format!("{prefix}.weight"))?;
        let b = self.get(tape, &format!("{prefix}.bias"))?;
        tape.linear(x, w, Some(b))
    }

    fn norm(&self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let g = self.get(tape, &format!("{prefix}.weight"))?;
        let b = self.get(tape, &format!("{prefix}.bias"))?;
        tape.layer_norm(x, g, b, T::lit(LAYER_NORM_EPS))
    }
}

/// Records the forward pass of sub-network `subnet` on `tape`.
///
/// Token width through the trunk is `r * D`; attention keeps `H` heads of
/// width `r * D / H` and scales scores by `1 / sqrt(r * D / H)`.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    images: &Tensor<T>,
    subnet: Subnet,
) -> Result<SubnetOutput> {
    cfg.check_ratio(subnet.ratio)?;
    let d = subnet.ratio.of(cfg.embed_dim).expect("checked");
    let heads = cfg.num_heads;
    let dh = d / heads;
    let n = cfg.num_tokens();
    let b = images.shape().first().copied().unwrap_or(0);
    let sl = Sliced { store, subnet };

    let patches = tape.constant(patchify(images, cfg)?);
    let x = sl.linear(tape, patches, "patch_embed")?;
    let cls = sl.get(tape, "cls_token")?;
    let cls = tape.expand(cls, b);
    let dist = sl.get(tape, "dist_token")?;
    let dist = tape.expand(dist, b);
    let x = tape.concat(&[cls, dist, x], 1)?;
    let pos = sl.get(tape, "pos_embed")?;
    let mut x = tape.add_broadcast(x, pos)?;

    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    for i in 0..cfg.depth {
        let pre = format!("blocks.{i}");
        let h = sl.norm(tape, x, &format!("{pre}.norm1"))?;
        let split = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
            let v = tape.reshape(v, vec![b, n, heads, dh])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            tape.reshape(v, vec![b * heads, n, dh])
        };
        let q = sl.linear(tape, h, &format!("{pre}.attn.q"))?;
        let q = split(tape, q)?;
        let k = sl.linear(tape, h, &format!("{pre}.attn.k"))?;
        let k = split(tape, k)?;
        let v = sl.linear(tape, h, &format!("{pre}.attn.v"))?;
        let v = split(tape, v)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores)?;
        let ctx = tape.bmm(attn, v, false)?;
        let ctx = tape.reshape(ctx, vec![b, heads, n, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, vec![b, n, d])?;
        let out = sl.linear(tape, ctx, &format!("{pre}.attn.proj"))?;
        x = tape.add(x, out)?;

        let h = sl.norm(tape, x, &format!("{pre}.norm2"))?;
        let h = sl.linear(tape, h, &format!("{pre}.mlp.fc1"))?;
        let h = tape.gelu(h);
        let h = sl.linear(tape, h, &format!("{pre}.mlp.fc2"))?;
        x = tape.add(x, h)?;
    }
    let x = sl.norm(tape, x, "norm")?;
    let cls_tok = tape.slice(x, &[0..b, 0..1, 0..d])?;
    let cls_tok = tape.reshape(cls_tok, vec![b, d])?;
    let dist_tok = tape.slice(x, &[0..b, 1..2, 0..d])?;
    let dist_tok = tape.reshape(dist_tok, vec![b, d])?;
    let cls = sl.linear(tape, cls_tok, "head")?;
    let dist = sl.linear(tape, dist_tok, "head_dist")?;
    if !(tape.value(cls).iter().all(|v| v.is_finite()) && tape.value(dist).iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("forward"));
    }
    Ok(SubnetOutput { cls, dist })
}

/// Forward without gradient tracking.
pub fn infer<T: Real>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    images: &Tensor<T>,
    subnet: Subnet,
) -> Result<SubnetLogits<T>> {
    let mut tape = Tape::no_grad();
    let out = forward(&mut tape, store, cfg, images, subnet)?;
    Ok(SubnetLogits {
        cls: tape.tensor(out.cls),
        dist: tape.tensor(out.dist),
    })
}

/// Class with the highest mean of the two heads' softmax probabilities;
/// ties go to the lowest index.
pub fn predict<T: Real>(cls: &[T], dist: &[T]) -> usize {
    let pc = softmax(cls);
    let pd = softmax(dist);
    let mut best = 0;
    let mut best_p = T::neg_infinity();
    for (i, (a, b)) in pc.iter().zip(&pd).enumerate() {
        let p = (*a + *b) * T::lit(0.5);
        if p > best_p {
            best = i;
            best_p = p;
        }
    }
    best
}

fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|v| (*v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Deep-copies the weights of sub-network (`r`, `mode`) into a standalone
/// store of width `r * D`.
pub fn export_subnet<T: Real>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    r: WidthRatio,
    mode: SliceMode,
) -> Result<(ModelConfig, ParamStore<T>)> {
    // on-grid check; the explicit mode may differ from the trained one
    cfg.subnet(r)?;
    let sub_cfg = cfg.standalone(r)?;
    let subnet = Subnet { ratio: r, mode };
    let mut out = ParamStore::new();
    for def in param_layout(&sub_cfg) {
        let p = store.get(&def.name)?;
        let spec = p.slice_spec(subnet)?;
        let block = p.tensor.slice(&spec.ranges)?;
        debug_assert_eq!(block.shape(), def.shape.as_slice());
        out.insert(def.name, block, def.roles)?;
    }
    Ok((sub_cfg, out))
}
