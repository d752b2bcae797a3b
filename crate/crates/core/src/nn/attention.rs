//! Fused multi-head scaled dot-product attention over row segments.
//!
//! Reductions over keys (the softmax normalizer and the weighted value sum)
//! use [`ordered_sum`], so permuting the keys of a segment permutes nothing
//! in the output: attention is exactly permutation equivariant, bit for bit.

use super::graph::Var;
use crate::scalar::{ordered_sum, Scalar};

/// A block of query rows attending to a block of key rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl Segment {
    /// Rows `start..start+len` attending to themselves.
    pub fn self_attention(start: usize, len: usize) -> Self {
        Self {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        }
    }
}

pub(crate) struct AttentionCache<T> {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub heads: usize,
    pub channels: usize,
    pub segments: Vec<Segment>,
    /// Softmax weights, segment-major then head-major, `q_len × k_len` each.
    pub probs: Vec<T>,
}

pub(crate) fn forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    lq: usize,
    c: usize,
    heads: usize,
    segments: &[Segment],
) -> (Vec<T>, Vec<T>) {
    let d = c / heads;
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut out = vec![T::zero(); lq * c];
    let mut probs = Vec::new();
    let mut scores = Vec::new();
    let mut terms = Vec::new();
    for seg in segments {
        for h in 0..heads {
            let off = h * d;
            for qi in seg.q_start..seg.q_start + seg.q_len {
                let qrow = &q[qi * c + off..qi * c + off + d];
                scores.clear();
                for kj in seg.k_start..seg.k_start + seg.k_len {
                    let krow = &k[kj * c + off..kj * c + off + d];
                    let s = qrow
                        .iter()
                        .zip(krow)
                        .fold(T::zero(), |a, (&x, &y)| a + x * y);
                    scores.push(s * scale);
                }
                let m = scores.iter().fold(T::neg_infinity(), |a, &s| a.max(s));
                scores.iter_mut().for_each(|s| *s = (*s - m).exp());
                terms.clear();
                terms.extend_from_slice(&scores);
                let z = ordered_sum(&mut terms);
                let base = probs.len();
                probs.extend(scores.iter().map(|&e| e / z));
                for ch in 0..d {
                    terms.clear();
                    terms.extend(
                        (0..seg.k_len)
                            .map(|j| probs[base + j] * v[(seg.k_start + j) * c + off + ch]),
                    );
                    out[qi * c + off + ch] = ordered_sum(&mut terms);
                }
            }
        }
    }
    (out, probs)
}

pub(crate) fn backward<T: Scalar>(
    cache: &AttentionCache<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    g: &[T],
    lk: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = cache.channels;
    let d = c / cache.heads;
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); lk * c];
    let mut dv = vec![T::zero(); lk * c];
    let mut dp = Vec::new();
    let mut cursor = 0;
    for seg in &cache.segments {
        for h in 0..cache.heads {
            let off = h * d;
            for qi in seg.q_start..seg.q_start + seg.q_len {
                let p = &cache.probs[cursor..cursor + seg.k_len];
                cursor += seg.k_len;
                let grow = &g[qi * c + off..qi * c + off + d];
                dp.clear();
                for (j, &pj) in p.iter().enumerate() {
                    let kj = seg.k_start + j;
                    let vrow = &v[kj * c + off..kj * c + off + d];
                    dp.push(
                        grow.iter()
                            .zip(vrow)
                            .fold(T::zero(), |a, (&x, &y)| a + x * y),
                    );
                    let dvrow = &mut dv[kj * c + off..kj * c + off + d];
                    dvrow.iter_mut().zip(grow).for_each(|(o, &x)| *o += pj * x);
                }
                let dot = p.iter().zip(&dp).fold(T::zero(), |a, (&x, &y)| a + x * y);
                for (j, &pj) in p.iter().enumerate() {
                    let ds = pj * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = seg.k_start + j;
                    for ch in 0..d {
                        dq[qi * c + off + ch] += ds * k[kj * c + off + ch];
                        dk[kj * c + off + ch] += ds * q[qi * c + off + ch];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
