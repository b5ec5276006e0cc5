//! Cross-scope attention kernels and their MAC accountants.

mod csa;
mod cse;
mod flops;

pub use csa::{csa_forward, csa_forward_eval, csa_param_specs, Branch, CsaConfig, KeyScope};
pub use cse::{cse_forward, cse_forward_eval, cse_forward_traced, cse_param_specs, CseConfig};
pub use flops::{flops_csa, flops_cse, CsaMacs, CseMacs};

use crate::error::{CstError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Single-head softmax attention: `softmax(q k^T / sqrt(d) + bias) v`.
pub fn attention_core(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] || qs[1] == 0 {
        return Err(CstError::DimMismatch(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            qs, ks, vs
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [qs[0], ks[0]] {
            return Err(CstError::DimMismatch(format!(
                "bias {:?} vs {}x{}",
                b.shape(),
                qs[0],
                ks[0]
            )));
        }
    }
    let all = [Some(q), Some(k), Some(v), bias];
    if all.iter().flatten().any(|t| t.data().iter().any(|x| x.is_nan())) {
        return Err(CstError::Numeric("NaN in attention input".into()));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
    let bv = bias.map(|b| g.leaf(b.clone()));
    let out = scaled_attention(&mut g, qv, kv, vv, bv, qs[1]);
    Ok(g.value(out).clone())
}

/// Batched attention on `[batch, n_q, d]` queries. Keys/values may carry a smaller
/// batch that is broadcast cyclically; `bias` is tiled over the score tensor.
pub(crate) fn scaled_attention(g: &mut Graph, q: Var, k: Var, v: Var, bias: Option<Var>, d: usize) -> Var {
    let scores = g.bmm(q, k, false, true);
    let mut scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    if let Some(b) = bias {
        scores = g.add(scores, b);
    }
    let attn = g.softmax(scores);
    g.bmm(attn, v, false, false)
}

/// `[batch, tokens, heads*d]` -> `[batch*heads, tokens, d]`.
pub(crate) fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (b, t, c) = (s[0], s[1], s[2]);
    let d = c / heads;
    let mut idx = Vec::with_capacity(b * t * c);
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                let base = (bi * t + ti) * c + h * d;
                idx.extend(base..base + d);
            }
        }
    }
    g.gather(&[x], idx, &[b * heads, t, d])
}

/// Inverse of [`split_heads`].
pub(crate) fn merge_heads(g: &mut Graph, x: Var, heads: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (bh, t, d) = (s[0], s[1], s[2]);
    let b = bh / heads;
    let mut idx = Vec::with_capacity(bh * t * d);
    for bi in 0..b {
        for ti in 0..t {
            for h in 0..heads {
                let base = ((bi * heads + h) * t + ti) * d;
                idx.extend(base..base + d);
            }
        }
    }
    g.gather(&[x], idx, &[b, t, heads * d])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
    }

    #[test]
    fn scalar_attention() {
        let one = Tensor::new(vec![1, 1], vec![1.0]);
        let out = attention_core(&one, &one, &one, None).unwrap();
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor::new(vec![1, 2], vec![0.3, -0.7]);
        let k = Tensor::new(vec![2, 2], vec![1.0, 2.0, 1.0, 2.0]);
        let v = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        let out = attention_core(&q, &k, &v, None).unwrap();
        for (o, e) in out.data().iter().zip([3.0, 4.0, 5.0]) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_triple_loop() {
        let (q, k, v, b) = (rnd(&[4, 8], 1), rnd(&[4, 8], 2), rnd(&[4, 5], 3), rnd(&[4, 4], 4));
        let out = attention_core(&q, &k, &v, Some(&b)).unwrap();
        for i in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|j| {
                    let mut s = 0.0;
                    for t in 0..8 {
                        s += q.data()[i * 8 + t] * k.data()[j * 8 + t];
                    }
                    s / 8f64.sqrt() + b.data()[i * 4 + j]
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..5 {
                let mut e = 0.0;
                for j in 0..4 {
                    e += logits[j].exp() / z * v.data()[j * 5 + c];
                }
                assert!((out.data()[i * 5 + c] - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nan_rejected() {
        let mut q = rnd(&[2, 2], 1);
        q.data_mut()[0] = f64::NAN;
        let k = rnd(&[2, 2], 2);
        assert!(matches!(attention_core(&q, &k, &k, None), Err(CstError::Numeric(_))));
    }

    #[test]
    fn head_split_round_trip() {
        let mut g = Graph::new();
        let x = g.leaf(rnd(&[3, 4, 6], 9));
        let s = split_heads(&mut g, x, 3);
        assert_eq!(g.shape(s), &[9, 4, 2]);
        let m = merge_heads(&mut g, s, 3);
        assert_eq!(g.value(m), g.value(x));
    }
}
