//! Hand-differentiated loss kernels: binary focal loss and supervised
//! contrastive loss.

use super::graph::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Focal loss of a probability against a target in `[0, 1]`, and its
/// derivative with respect to the probability. Probabilities are clamped
/// into `[ε, 1−ε]`; the derivative is zero where the clamp is active.
pub fn focal_probs<T: Scalar>(p: T, y: T, alpha: T, gamma: T) -> (T, T) {
    let eps = T::epsilon();
    let one = T::one();
    let pc = p.max(eps).min(one - eps);
    let q = one - pc;
    let pos = -alpha * q.powf(gamma) * pc.ln();
    let neg = -(one - alpha) * pc.powf(gamma) * q.ln();
    let value = y * pos + (one - y) * neg;
    if p < eps || p > one - eps {
        return (value, T::zero());
    }
    let dpos = alpha * (gamma * q.powf(gamma - one) * pc.ln() - q.powf(gamma) / pc);
    let dneg = -(one - alpha) * (gamma * pc.powf(gamma - one) * q.ln() - pc.powf(gamma) / q);
    (value, y * dpos + (one - y) * dneg)
}

fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Focal loss of `sigmoid(z)` evaluated stably from the logit, and its
/// derivative with respect to `z`.
pub fn focal_logits<T: Scalar>(z: T, y: T, alpha: T, gamma: T) -> (T, T) {
    let one = T::one();
    let p = super::graph::stable_sigmoid(z);
    let q = super::graph::stable_sigmoid(-z);
    let sp_pos = softplus(z);
    let sp_neg = softplus(-z);
    let pos = alpha * q.powf(gamma) * sp_neg;
    let neg = (one - alpha) * p.powf(gamma) * sp_pos;
    let dpos = -alpha * q.powf(gamma) * (gamma * p * sp_neg + q);
    let dneg = (one - alpha) * p.powf(gamma) * (gamma * q * sp_pos + p);
    (y * pos + (one - y) * neg, y * dpos + (one - y) * dneg)
}

/// Rows `start..start + labels.len()` of an embedding matrix scored as one
/// contrastive set. Rows sharing a label are positives of each other.
#[derive(Debug, Clone)]
pub struct ContrastiveGroup<T> {
    pub start: usize,
    pub labels: Vec<usize>,
    pub weight: T,
}

pub(crate) struct ContrastiveData<T> {
    groups: Vec<ContrastiveGroup<T>>,
    positives: Vec<usize>,
    /// Per group, `n × n` softmax over candidates `k ≠ i` (diagonal zero).
    softmax: Vec<Vec<T>>,
    cols: usize,
    tau: T,
}

pub(crate) struct ContrastiveCache<T> {
    pub emb: Var,
    pub data: ContrastiveData<T>,
}

pub(crate) fn contrastive_forward<T: Scalar>(
    emb: &[T],
    rows: usize,
    cols: usize,
    groups: &[ContrastiveGroup<T>],
    tau: T,
) -> Result<(T, ContrastiveData<T>)> {
    if tau <= T::zero() {
        return Err(Error::Config(
            "contrastive temperature must be positive".into(),
        ));
    }
    let mut total = T::zero();
    let mut positives = Vec::with_capacity(groups.len());
    let mut softmax = Vec::with_capacity(groups.len());
    for grp in groups {
        let n = grp.labels.len();
        if grp.start + n > rows {
            return Err(Error::Contract(format!(
                "contrastive group rows {}..{} exceed {rows}",
                grp.start,
                grp.start + n
            )));
        }
        let row = |i: usize| &emb[(grp.start + i) * cols..(grp.start + i + 1) * cols];
        let mut sim = vec![T::zero(); n * n];
        for i in 0..n {
            for k in 0..n {
                if i != k {
                    let s = row(i)
                        .iter()
                        .zip(row(k))
                        .fold(T::zero(), |a, (&x, &y)| a + x * y);
                    sim[i * n + k] = s / tau;
                }
            }
        }
        let mut soft = vec![T::zero(); n * n];
        let mut npos = 0usize;
        let mut acc = T::zero();
        for i in 0..n {
            let m = (0..n)
                .filter(|&k| k != i)
                .fold(T::neg_infinity(), |a, k| a.max(sim[i * n + k]));
            let z = (0..n)
                .filter(|&k| k != i)
                .fold(T::zero(), |a, k| a + (sim[i * n + k] - m).exp());
            let lse = m + z.ln();
            let mut has_pos = false;
            for k in (0..n).filter(|&k| k != i) {
                soft[i * n + k] = (sim[i * n + k] - lse).exp();
                if grp.labels[k] == grp.labels[i] {
                    acc += sim[i * n + k] - lse;
                    npos += 1;
                    has_pos = true;
                }
            }
            if !has_pos {
                return Err(Error::Contract(format!(
                    "label {} has no positive partner",
                    grp.labels[i]
                )));
            }
        }
        total += grp.weight * (-acc / T::of(npos as f64));
        positives.push(npos);
        softmax.push(soft);
    }
    Ok((
        total,
        ContrastiveData {
            groups: groups.to_vec(),
            positives,
            softmax,
            cols,
            tau,
        },
    ))
}

pub(crate) fn contrastive_backward<T: Scalar>(
    cache: &ContrastiveCache<T>,
    emb: &[T],
    g: T,
) -> Vec<T> {
    let data = &cache.data;
    let c = data.cols;
    let mut d = vec![T::zero(); emb.len()];
    for ((grp, &npos), soft) in data.groups.iter().zip(&data.positives).zip(&data.softmax) {
        let n = grp.labels.len();
        let coef = g * grp.weight / T::of(npos as f64) / data.tau;
        for i in 0..n {
            let pos_i = (0..n)
                .filter(|&k| k != i && grp.labels[k] == grp.labels[i])
                .count();
            for k in (0..n).filter(|&k| k != i) {
                let indicator = if grp.labels[k] == grp.labels[i] {
                    T::one()
                } else {
                    T::zero()
                };
                let ds = coef * (T::of(pos_i as f64) * soft[i * n + k] - indicator);
                if ds == T::zero() {
                    continue;
                }
                let ri = (grp.start + i) * c;
                let rk = (grp.start + k) * c;
                for ch in 0..c {
                    d[ri + ch] += ds * emb[rk + ch];
                    d[rk + ch] += ds * emb[ri + ch];
                }
            }
        }
    }
    d
}
