use crate::error::{Error, Result};
use crate::model::SubnetOutput;
use crate::real::Real;
use crate::tensor::{Tape, Var};

const PROB_FLOOR: f64 = 1e-12;

/// `sum_k t_k ln(t_k / s_k)` in nats, probabilities floored at 1e-12.
pub fn kl_loss<T: Real>(p_student: &[T], p_teacher: &[T]) -> T {
    let floor = T::lit(PROB_FLOOR);
    p_teacher
        .iter()
        .zip(p_student)
        .filter(|(t, _)| **t > T::zero())
        .map(|(t, s)| *t * (t.max(floor).ln() - s.max(floor).ln()))
        .sum()
}

/// `-ln softmax(logits)[label]`
pub fn ce_loss<T: Real>(logits: &[T], label: usize) -> Result<T> {
    if label >= logits.len() {
        return Err(Error::validation("label", format!("{label} not in [0, {})", logits.len())));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|v| (*v - max).exp()).sum::<T>().ln();
    Ok(lse - logits[label])
}

/// Row-wise softmax of a `[B, K]` buffer.
pub fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(k) {
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
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubnetRole {
    /// The largest network; its distillation target is the external teacher.
    Full,
    /// Any smaller network; its target is a larger activated network.
    Student,
}

/// Loss handle plus the component values for reporting.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<T> {
    pub loss: Var,
    pub ce: T,
    pub kl: Option<T>,
}

/// `CE(p_cls) + lambda * KL(target || p_dist)`, batch-averaged.
///
/// With noise calibration off a student with a target trains on the KL term
/// alone; the full network always keeps its CE term. `target` is a constant
/// `[B, K]` probability buffer.
pub fn subnet_loss<T: Real>(
    tape: &mut Tape<T>,
    out: SubnetOutput,
    labels: &[usize],
    target: Option<&[T]>,
    role: SubnetRole,
    lambda: f64,
    noise_calibration: bool,
) -> Result<LossTerms<T>> {
    if target.is_none() && role == SubnetRole::Student && lambda > 0.0 {
        return Err(Error::validation(
            "teacher",
            "student sub-network has no distillation target",
        ));
    }
    let ce = tape.cross_entropy(out.cls, labels)?;
    let ce_v = tape.item(ce)?;
    let Some(target) = target else {
        return Ok(LossTerms { loss: ce, ce: ce_v, kl: None });
    };
    let kl = tape.kl_div(out.dist, target)?;
    let kl_v = tape.item(kl)?;
    let weighted = tape.scale(kl, T::lit(lambda));
    let loss = if noise_calibration || role == SubnetRole::Full {
        let s = tape.add(ce, weighted)?;
        tape.reshape(s, Vec::new())?
    } else {
        weighted
    };
    Ok(LossTerms {
        loss,
        ce: ce_v,
        kl: Some(kl_v),
    })
}
