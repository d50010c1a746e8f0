use std::ops::Range;

use super::kernels::{self, axpy, for_each_block};
use super::{check_ranges, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Receiver for parameter gradients produced by [`Tape::backward`].
///
/// `grad` is dense over the block selected by `ranges`; implementations add
/// it into the full-width buffer at those indices and leave the rest alone.
pub trait GradSink<T> {
    fn accumulate(&mut self, name: &str, ranges: &[Range<usize>], grad: &[T]) -> Result<()>;
}

/// Sink for tapes that record no parameters.
pub struct NoParams;

impl<T> GradSink<T> for NoParams {
    fn accumulate(&mut self, name: &str, _: &[Range<usize>], _: &[T]) -> Result<()> {
        Err(Error::validation(
            "backward",
            format!("parameter {name} recorded but no gradient sink given"),
        ))
    }
}

enum Op<T> {
    Constant,
    Leaf,
    Param {
        name: String,
        ranges: Vec<Range<usize>>,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        bias: Option<usize>,
        rows: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    AddBroadcast {
        a: usize,
        b: usize,
    },
    Softmax {
        x: usize,
        k: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
        d: usize,
    },
    Gelu {
        x: usize,
    },
    Slice {
        x: usize,
        ranges: Vec<Range<usize>>,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Expand {
        x: usize,
        count: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    KlDiv {
        logits: usize,
        target: Vec<T>,
        log_probs: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Probability floor applied inside logarithms of the distillation loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Linear record of a forward computation.
///
/// Nodes are appended in creation order and only reference earlier nodes,
/// so the tape is acyclic and [`Tape::backward`] walks it in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which parameters are recorded as constants. Used for the
    /// frozen teacher and for evaluation.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn item(&self, v: Var) -> Result<T> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::NotScalar {
                op: "item",
                shape: n.shape.clone(),
            });
        }
        Ok(n.value[0])
    }

    /// Accumulated gradient of a leaf recorded with [`Tape::leaf`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Constant, false)
    }

    /// A differentiable input whose gradient is kept on the tape.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        let ng = self.grad_enabled;
        self.push(shape, t.into_data(), Op::Leaf, ng)
    }

    /// Sliced view of a named full-width parameter. The forward value is
    /// the sub-block; backward hands the block gradient to the sink passed
    /// to [`Tape::backward`].
    pub fn param(&mut self, name: &str, full: &Tensor<T>, ranges: &[Range<usize>]) -> Result<Var> {
        let block = full.slice(ranges)?;
        let shape = block.shape().to_vec();
        if !self.grad_enabled {
            return Ok(self.push(shape, block.into_data(), Op::Constant, false));
        }
        Ok(self.push(
            shape,
            block.into_data(),
            Op::Param {
                name: name.to_string(),
                ranges: ranges.to_vec(),
            },
            true,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, m, k, n }, ng))
    }

    /// `x[.., K] * w[N, K]^T + bias[N]`
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        if sx.is_empty() || sw.len() != 2 || sw[1] != sx[sx.len() - 1] {
            return Err(Error::shape("linear", format!("x {sx:?}, w {sw:?}")));
        }
        let (k, n) = (sw[1], sw[0]);
        if let Some(b) = bias {
            if self.shape(b) != [n] {
                return Err(Error::shape("linear", format!("bias {:?} for {n} outputs", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        kernels::matmul_nt_acc(self.value(x), self.value(w), &mut out, rows, k, n);
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in out.chunks_exact_mut(n) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += *bb;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let mut deps = vec![x, w];
        deps.extend(bias);
        let ng = self.ng(&deps);
        Ok(self.push(
            shape,
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                rows,
                k,
                n,
            },
            ng,
        ))
    }

    /// Batched product over the leading axis: `a[B,M,K] * b[B,K,N]`, or
    /// `a[B,M,K] * b[B,N,K]^T` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = sa.len() != 3
            || sb.len() != 3
            || sa[0] != sb[0]
            || (!trans_b && sa[2] != sb[1])
            || (trans_b && sa[2] != sb[2]);
        if bad {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::matmul_nt_acc(ab, bb, ob, m, k, n);
            } else {
                kernels::matmul_acc(ab, bb, ob, m, k, n);
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let ng = self.ng(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let ng = self.ng(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a: a.0, b: b.0 }, ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|v| *v * c).collect();
        let ng = self.ng(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x: x.0, c }, ng)
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", format!("{sa:?} + {sb:?}")));
        }
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_exact_mut(bv.len().max(1)) {
            for (o, v) in chunk.iter_mut().zip(bv) {
                *o += *v;
            }
        }
        let ng = self.ng(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddBroadcast { a: a.0, b: b.0 }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x: x.0, k }, ng))
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {shape:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let dt = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
                d,
            },
            ng,
        ))
    }

    /// Exact-erf GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|v| gelu(*v)).collect();
        let ng = self.ng(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu { x: x.0 }, ng)
    }

    /// Sub-block view; backward scatter-adds into the parent's gradient.
    pub fn slice(&mut self, x: Var, ranges: &[Range<usize>]) -> Result<Var> {
        check_ranges(self.shape(x), ranges)?;
        let shape: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
        let src = self.value(x);
        let mut out = Vec::with_capacity(shape.iter().product());
        for_each_block(self.shape(x), ranges, |s, _, len| out.extend_from_slice(&src[s..s + len]));
        let ng = self.ng(&[x]);
        Ok(self.push(
            shape,
            out,
            Op::Slice {
                x: x.0,
                ranges: ranges.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::Reshape { x: x.0 }, ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{sx:?} by {perm:?}")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let out = kernels::permute(self.value(x), sx, perm);
        let ng = self.ng(&[x]);
        Ok(self.push(
            shape,
            out,
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} with {s:?} on axis {axis}")));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let w = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v)[o * w..(o + 1) * w]);
            }
        }
        let ng = self.ng(inputs);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                axis,
            },
            ng,
        ))
    }

    /// Repeats `x` along a new leading axis of length `count`.
    pub fn expand(&mut self, x: Var, count: usize) -> Var {
        let mut shape = vec![count];
        shape.extend_from_slice(self.shape(x));
        let xv = self.value(x);
        let mut out = Vec::with_capacity(count * xv.len());
        for _ in 0..count {
            out.extend_from_slice(xv);
        }
        let ng = self.ng(&[x]);
        self.push(shape, out, Op::Expand { x: x.0, count }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(Vec::new(), vec![s], Op::Sum { x: x.0 }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.iter().copied().sum::<T>() / T::from_usize(xv.len().max(1)).unwrap();
        let ng = self.ng(&[x]);
        self.push(Vec::new(), vec![s], Op::Mean { x: x.0 }, ng)
    }

    /// Batch-mean cross-entropy of `logits[B, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.rows_of("cross_entropy", logits, labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::validation("label", format!("{bad} not in [0, {k})")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = T::zero();
        for (i, row) in probs.chunks_exact_mut(k).enumerate() {
            let lse = log_sum_exp(row);
            total += lse - row[labels[i]];
            softmax_in_place(row);
        }
        let loss = total / T::from_usize(b).unwrap();
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Batch-mean `KL(target || softmax(logits))` in nats. `target` holds
    /// one probability row per batch element and is treated as a constant.
    pub fn kl_div(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        let rows = self.shape(logits).first().copied().unwrap_or(0);
        let (b, k) = self.rows_of("kl_div", logits, rows)?;
        if target.len() != b * k {
            return Err(Error::shape("kl_div", format!("target of {} for {b}x{k} logits", target.len())));
        }
        let floor = T::lit(PROB_FLOOR).ln();
        let mut log_probs = self.value(logits).to_vec();
        let mut total = T::zero();
        for (row, t) in log_probs.chunks_exact_mut(k).zip(target.chunks_exact(k)) {
            let lse = log_sum_exp(row);
            for (lp, tv) in row.iter_mut().zip(t) {
                *lp = (*lp - lse).max(floor);
                if *tv > T::zero() {
                    total += *tv * (tv.max(T::lit(PROB_FLOOR)).ln() - *lp);
                }
            }
        }
        let loss = total / T::from_usize(b).unwrap();
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::KlDiv {
                logits: logits.0,
                target: target.to_vec(),
                log_probs,
            },
            ng,
        ))
    }

    fn rows_of(&self, op: &'static str, logits: Var, batch: usize) -> Result<(usize, usize)> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != batch || s[0] == 0 {
            return Err(Error::shape(op, format!("logits {s:?} for batch {batch}")));
        }
        Ok((s[0], s[1]))
    }

    /// Reverse pass from scalar `loss`. Gradients are added to whatever
    /// the leaves and the sink already hold; nothing is overwritten.
    pub fn backward(&mut self, loss: Var, sink: &mut impl GradSink<T>) -> Result<()> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: root.shape.clone(),
            });
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Leaf => {
                    let slot = self.leaf_grads[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
                    axpy(T::one(), &g, slot);
                }
                Op::Param { name, ranges } => sink.accumulate(name, ranges, &g)?,
                &Op::MatMul { a, b, m, k, n } => {
                    if let Some(ga) = slot(&mut adj, nodes, a) {
                        kernels::matmul_nt_acc(&g, &nodes[b].value, ga, m, n, k);
                    }
                    if let Some(gb) = slot(&mut adj, nodes, b) {
                        kernels::matmul_tn_acc(&nodes[a].value, &g, gb, m, k, n);
                    }
                }
                &Op::Linear { x, w, bias, rows, k, n } => {
                    if let Some(gx) = slot(&mut adj, nodes, x) {
                        kernels::matmul_acc(&g, &nodes[w].value, gx, rows, n, k);
                    }
                    if let Some(gw) = slot(&mut adj, nodes, w) {
                        kernels::matmul_tn_acc(&g, &nodes[x].value, gw, rows, n, k);
                    }
                    if let Some(gb) = bias.and_then(|b| slot(&mut adj, nodes, b)) {
                        for row in g.chunks_exact(n) {
                            axpy(T::one(), row, gb);
                        }
                    }
                }
                &Op::BatchMatMul { a, b, trans_b, batch, m, k, n } => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    if let Some(ga) = slot(&mut adj, nodes, a) {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &bv[i * k * n..(i + 1) * k * n];
                            let out = &mut ga[i * m * k..(i + 1) * m * k];
                            if trans_b {
                                kernels::matmul_acc(gi, bi, out, m, n, k);
                            } else {
                                kernels::matmul_nt_acc(gi, bi, out, m, n, k);
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut adj, nodes, b) {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &av[i * m * k..(i + 1) * m * k];
                            let out = &mut gb[i * k * n..(i + 1) * k * n];
                            if trans_b {
                                kernels::matmul_tn_acc(gi, ai, out, m, n, k);
                            } else {
                                kernels::matmul_tn_acc(ai, gi, out, m, k, n);
                            }
                        }
                    }
                }
                &Op::Add { a, b } => {
                    for j in [a, b] {
                        if let Some(gj) = slot(&mut adj, nodes, j) {
                            axpy(T::one(), &g, gj);
                        }
                    }
                }
                &Op::Mul { a, b } => {
                    if let Some(ga) = slot(&mut adj, nodes, a) {
                        for ((o, gv), bv) in ga.iter_mut().zip(&g).zip(&nodes[b].value) {
                            *o += *gv * *bv;
                        }
                    }
                    if let Some(gb) = slot(&mut adj, nodes, b) {
                        for ((o, gv), av) in gb.iter_mut().zip(&g).zip(&nodes[a].value) {
                            *o += *gv * *av;
                        }
                    }
                }
                &Op::Scale { x, c } => {
                    if let Some(gx) = slot(&mut adj, nodes, x) {
                        axpy(c, &g, gx);
                    }
                }
                &Op::AddBroadcast { a, b } => {
                    if let Some(ga) = slot(&mut adj, nodes, a) {
                        axpy(T::one(), &g, ga);
                    }
                    if let Some(gb) = slot(&mut adj, nodes, b) {
                        let n = gb.len().max(1);
                        for chunk in g.chunks_exact(n) {
                            axpy(T::one(), chunk, gb);
                        }
                    }
                }
                &Op::Softmax { x, k } => {
                    if let Some(gx) = slot(&mut adj, nodes, x) {
                        let y = &node.value;
                        for ((yr, gr), out) in y.chunks_exact(k).zip(g.chunks_exact(k)).zip(gx.chunks_exact_mut(k)) {
                            let s: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                            for j in 0..k {
                                out[j] += yr[j] * (gr[j] - s);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd, d } => {
                    let d = *d;
                    let gv = &nodes[*gamma].value;
                    if let Some(gg) = slot(&mut adj, nodes, *gamma) {
                        for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut adj, nodes, *beta) {
                        for gr in g.chunks_exact(d) {
                            axpy(T::one(), gr, gb);
                        }
                    }
                    if let Some(gx) = slot(&mut adj, nodes, *x) {
                        let dt = T::from_usize(d).unwrap();
                        let mut gh = vec![T::zero(); d];
                        for (r, rs) in rstd.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                gh[j] = gr[j] * gv[j];
                            }
                            let sum_gh: T = gh.iter().copied().sum();
                            let sum_ghh: T = gh.iter().zip(hr).map(|(a, b)| *a * *b).sum();
                            let out = &mut gx[r * d..(r + 1) * d];
                            for j in 0..d {
                                out[j] += *rs / dt * (dt * gh[j] - sum_gh - hr[j] * sum_ghh);
                            }
                        }
                    }
                }
                &Op::Gelu { x } => {
                    if let Some(gx) = slot(&mut adj, nodes, x) {
                        for ((o, gv), xv) in gx.iter_mut().zip(&g).zip(&nodes[x].value) {
                            *o += *gv * gelu_grad(*xv);
                        }
                    }
                }
                Op::Slice { x, ranges } => {
                    let parent_shape = &nodes[*x].shape;
                    if let Some(gx) = slot(&mut adj, nodes, *x) {
                        for_each_block(parent_shape, ranges, |s, dst, len| {
                            axpy(T::one(), &g[dst..dst + len], &mut gx[s..s + len]);
                        });
                    }
                }
                &Op::Reshape { x } => {
                    if let Some(gx) = slot(&mut adj, nodes, x) {
                        axpy(T::one(), &g, gx);
                    }
                }
                Op::Permute { x, perm } => {
                    if let Some(gx) = slot(&mut adj, nodes, *x) {
                        let back = kernels::permute(&g, &node.shape, &kernels::inverse_permutation(perm));
                        axpy(T::one(), &back, gx);
                    }
                }
                Op::Concat { inputs, axis } => {
                    let outer: usize = node.shape[..*axis].iter().product();
                    let inner: usize = node.shape[axis + 1..].iter().product();
                    let row = node.shape[*axis] * inner;
                    let mut offset = 0;
                    for &j in inputs {
                        let w = nodes[j].shape[*axis] * inner;
                        if let Some(gj) = slot(&mut adj, nodes, j) {
                            for o in 0..outer {
                                let src = &g[o * row + offset..o * row + offset + w];
                                axpy(T::one(), src, &mut gj[o * w..(o + 1) * w]);
                            }
                        }
                        offset += w;
                    }
                }
                &Op::Expand { x, count } => {
                    if let Some(gx) = slot(&mut adj, nodes, x) {
                        let n = g.len() / count.max(1);
                        for chunk in g.chunks_exact(n.max(1)) {
                            axpy(T::one(), chunk, gx);
                        }
                    }
                }
                &Op::Sum { x } => {
                    if let Some(gx) = slot(&mut adj, nodes, x) {
                        gx.iter_mut().for_each(|o| *o += g[0]);
                    }
                }
                &Op::Mean { x } => {
                    if let Some(gx) = slot(&mut adj, nodes, x) {
                        let c = g[0] / T::from_usize(gx.len().max(1)).unwrap();
                        gx.iter_mut().for_each(|o| *o += c);
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    if let Some(gz) = slot(&mut adj, nodes, *logits) {
                        let b = labels.len();
                        let k = probs.len() / b;
                        let c = g[0] / T::from_usize(b).unwrap();
                        for (i, (pr, out)) in probs.chunks_exact(k).zip(gz.chunks_exact_mut(k)).enumerate() {
                            for j in 0..k {
                                let y = if j == labels[i] { T::one() } else { T::zero() };
                                out[j] += c * (pr[j] - y);
                            }
                        }
                    }
                }
                Op::KlDiv { logits, target, log_probs } => {
                    if let Some(gz) = slot(&mut adj, nodes, *logits) {
                        let k = *nodes[*logits].shape.last().unwrap();
                        let b = log_probs.len() / k;
                        let c = g[0] / T::from_usize(b).unwrap();
                        let floor = T::lit(PROB_FLOOR).ln();
                        let zv = &nodes[*logits].value;
                        for ((lr, tr), (zr, out)) in log_probs
                            .chunks_exact(k)
                            .zip(target.chunks_exact(k))
                            .zip(zv.chunks_exact(k).zip(gz.chunks_exact_mut(k)))
                        {
                            // unfloored entries carry d(log p_k)/dz_j = [k == j] - p_j
                            let lse = log_sum_exp(zr);
                            let t_live: T = lr.iter().zip(tr).filter(|(l, _)| **l > floor).map(|(_, t)| *t).sum();
                            for j in 0..k {
                                let p = (zr[j] - lse).exp();
                                let own = if lr[j] > floor { tr[j] } else { T::zero() };
                                out[j] += c * (p * t_live - own);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'a, T: Real>(adj: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], j: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[j].needs_grad {
        return None;
    }
    let len = nodes[j].value.len();
    Some(adj[j].get_or_insert_with(|| vec![T::zero(); len]))
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|v| (*v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}
