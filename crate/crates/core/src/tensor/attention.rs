use super::graph::softmax_rows;
use super::{AttentionMask, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Row-wise softmax over the allowed keys of `mask`, outside any tape.
///
/// Masked coordinates are exactly `0.0`.
pub fn masked_softmax<T: Real>(scores: &Tensor<T>, mask: &AttentionMask) -> Result<Tensor<T>> {
    if scores.shape().len() != 2 || mask.queries() != scores.rows() || mask.keys() != scores.cols()
    {
        return Err(Error::Shape(format!(
            "mask {}x{} vs scores {:?}",
            mask.queries(),
            mask.keys(),
            scores.shape()
        )));
    }
    mask.check_rows()?;
    Ok(softmax_rows(scores, mask))
}

/// Per-head attention distributions recorded on the tape.
pub struct AttentionOutput {
    pub output: Var,
    pub head_weights: Vec<Var>,
}

impl AttentionOutput {
    /// Attention weights averaged over heads.
    pub fn mean_weights<T: Real>(&self, g: &Graph<'_, T>) -> Tensor<T> {
        let first = g.value(self.head_weights[0]);
        let mut acc = Tensor::zeros(first.shape());
        for &h in &self.head_weights {
            acc.add_assign(g.value(h));
        }
        let inv = T::one() / T::from_usize(self.head_weights.len()).unwrap();
        acc.map(|v| v * inv)
    }
}

/// Scaled dot-product attention with `n_heads` heads sharing one mask.
///
/// `q` is `n_q x d`, `k` and `v` are `n_k x d`; `d` must divide by `n_heads`.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    mask: &AttentionMask,
) -> Result<AttentionOutput> {
    let (nq, d) = (g.value(q).rows(), g.value(q).cols());
    let (nk, dk) = (g.value(k).rows(), g.value(k).cols());
    let (nv, dv) = (g.value(v).rows(), g.value(v).cols());
    if dk != d || dv != d || nv != nk {
        return Err(Error::Shape(format!(
            "attention q {nq}x{d}, k {nk}x{dk}, v {nv}x{dv}"
        )));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Shape(format!(
            "model dim {d} not divisible by {n_heads} heads"
        )));
    }
    if mask.queries() != nq || mask.keys() != nk {
        return Err(Error::Shape(format!(
            "mask {}x{} vs attention {nq}x{nk}",
            mask.queries(),
            mask.keys()
        )));
    }
    mask.check_rows()?;
    let dh = d / n_heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut outs = Vec::with_capacity(n_heads);
    let mut head_weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            )
        };
        let scores = g.matmul_t(qh, kh, false, true);
        let scores = g.scale(scores, scale);
        let w = g.masked_softmax(scores, mask)?;
        outs.push(g.matmul(w, vh));
        head_weights.push(w);
    }
    let output = if n_heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    };
    Ok(AttentionOutput {
        output,
        head_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let m = AttentionMask::all(1, 3);
        let s = masked_softmax(&t(&[1, 3], &[1.0, 1.0, 1.0]), &m).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let m2 = AttentionMask::new(1, 2, vec![true, false]).unwrap();
        let s = masked_softmax(&t(&[1, 2], &[5.0, -2.0]), &m2).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);

        // exp(i) / sum_j exp(j), computed longhand
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        let expect: Vec<f64> = (1..=3).map(|i| (i as f64).exp() / z).collect();
        let s = masked_softmax(&t(&[1, 3], &[1.0, 2.0, 3.0]), &m).unwrap();
        for (a, e) in s.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!((expect[0] - 0.09003).abs() < 1e-5);
        assert!((expect[1] - 0.24473).abs() < 1e-5);
        assert!((expect[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn fully_masked_row_errors() {
        let m = AttentionMask::new(2, 2, vec![true, true, false, false]).unwrap();
        let err = masked_softmax(&t(&[2, 2], &[0.0; 4]), &m).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut g = Graph::<f64>::new();
        let q = g.input(t(&[2, 4], &[0.3, -1.0, 2.0, 0.1, 5.0, 4.0, -3.0, 0.0]));
        let k = g.input(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let v = g.input(t(&[1, 4], &[9.0, 8.0, 7.0, 6.0]));
        let out = multi_head_attention(&mut g, q, k, v, 2, &AttentionMask::all(2, 1)).unwrap();
        assert_eq!(g.value(out.output).data(), &[9.0, 8.0, 7.0, 6.0, 9.0, 8.0, 7.0, 6.0]);
        assert_eq!(out.mean_weights(&g).data(), &[1.0, 1.0]);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut g = Graph::<f64>::new();
        let q = g.input(t(&[1, 2], &[0.7, -0.2]));
        let k = g.input(t(&[3, 2], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]));
        let v = g.input(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 2.0, 2.0]));
        let mask = AttentionMask::new(1, 3, vec![true, false, true]).unwrap();
        let out = multi_head_attention(&mut g, q, k, v, 1, &mask).unwrap();
        assert_eq!(out.mean_weights(&g).data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn one_head_matches_dense_oracle() {
        let qv = t(&[2, 2], &[0.5, 1.0, -1.0, 0.25]);
        let kv = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let vv = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        // oracle: softmax(q k^T / sqrt(2)) v, written with plain loops
        let mut expect = vec![0.0; 4];
        for i in 0..2 {
            let s: Vec<f64> = (0..3)
                .map(|j| (0..2).map(|c| qv.get(i, c) * kv.get(j, c)).sum::<f64>() / 2f64.sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
            for j in 0..3 {
                let w = (s[j] - mx).exp() / z;
                for c in 0..2 {
                    expect[i * 2 + c] += w * vv.get(j, c);
                }
            }
        }
        let mut g = Graph::<f64>::new();
        let (q, k, v) = (g.input(qv), g.input(kv), g.input(vv));
        let out = multi_head_attention(&mut g, q, k, v, 1, &AttentionMask::all(2, 3)).unwrap();
        for (a, e) in g.value(out.output).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn head_count_must_divide_dim() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2, 6]));
        assert!(multi_head_attention(&mut g, x, x, x, 4, &AttentionMask::all(2, 2)).is_err());
    }
}
