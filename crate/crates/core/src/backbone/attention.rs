//! Scaled dot-product multi-head attention over token matrices.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Additive bias applied to masked-out keys before the softmax.
pub const MASKED_KEY_BIAS: f64 = -1.0e9;

pub struct AttentionOutput<T> {
    /// `(query_tokens, heads * head_dim)`.
    pub output: Array2<T>,
    /// One `(query_tokens, key_tokens)` matrix per head; rows sum to one.
    pub probs: Vec<Array2<T>>,
}

fn check_shapes<T>(
    q: &ArrayView2<T>,
    k: &ArrayView2<T>,
    v: &ArrayView2<T>,
    heads: usize,
) -> Result<usize> {
    let dim = q.ncols();
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Internal(format!(
            "attention width {dim} not divisible by {heads} heads"
        )));
    }
    if k.ncols() != dim || v.ncols() != dim || k.nrows() != v.nrows() {
        return Err(Error::Internal(format!(
            "attention shape mismatch: q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    Ok(dim / heads)
}

/// In-place row softmax.
pub fn softmax_rows<T: Scalar>(scores: &mut Array2<T>) {
    for mut row in scores.rows_mut() {
        match row.as_slice_mut() {
            Some(xs) => softmax_slice(xs),
            None => {
                let mut buf = row.to_vec();
                softmax_slice(&mut buf);
                row.iter_mut().zip(buf).for_each(|(r, b)| *r = b);
            }
        }
    }
}

fn softmax_slice<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in xs.iter_mut() {
        *v *= inv;
    }
}

/// Multi-head attention. `key_bias`, when given, is added to every query's
/// score for the corresponding key.
pub fn multi_head_attention<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    heads: usize,
    key_bias: Option<&Array1<T>>,
) -> Result<AttentionOutput<T>> {
    let hd = check_shapes(&q, &k, &v, heads)?;
    if let Some(b) = key_bias {
        if b.len() != k.nrows() {
            return Err(Error::Internal("key bias length mismatch".into()));
        }
    }
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut output = Array2::zeros((q.nrows(), q.ncols()));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|x| x * scale);
        if let Some(b) = key_bias {
            scores += &b.view().insert_axis(Axis(0));
        }
        softmax_rows(&mut scores);
        output.slice_mut(cols).assign(&scores.dot(&vh));
        probs.push(scores);
    }
    Ok(AttentionOutput { output, probs })
}

/// Gradients of a scalar loss with respect to keys and values, given the
/// forward probabilities and the gradient of the attention output.
pub fn attention_kv_backward<T: Scalar>(
    q: ArrayView2<T>,
    v: ArrayView2<T>,
    probs: &[Array2<T>],
    d_output: ArrayView2<T>,
) -> (Array2<T>, Array2<T>) {
    let heads = probs.len();
    let hd = q.ncols() / heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut d_k = Array2::zeros((v.nrows(), v.ncols()));
    let mut d_v = Array2::zeros((v.nrows(), v.ncols()));
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * hd..(h + 1) * hd];
        let d_out_h = d_output.slice(cols);
        d_v.slice_mut(cols).assign(&p.t().dot(&d_out_h));
        let d_p = d_out_h.dot(&v.slice(cols).t());
        // softmax backward: dS = P * (dP - rowsum(dP * P))
        let mut d_s = &d_p * p;
        let row_dot = d_s.sum_axis(Axis(1));
        d_s = p * &(&d_p - &row_dot.insert_axis(Axis(1)));
        d_s.mapv_inplace(|x| x * scale);
        d_k.slice_mut(cols).assign(&d_s.t().dot(&q.slice(cols)));
    }
    (d_k, d_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut s = seed;
        Array::from_shape_fn((rows, cols), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn rows_are_distributions() {
        let q = lcg_matrix(5, 4, 1);
        let k = lcg_matrix(7, 4, 2);
        let v = lcg_matrix(7, 4, 3);
        let mut bias = Array1::zeros(7);
        bias[2] = MASKED_KEY_BIAS;
        let out = multi_head_attention(q.view(), k.view(), v.view(), 2, Some(&bias)).unwrap();
        for p in &out.probs {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row[2] < 1e-300);
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let q = lcg_matrix(3, 2, 4);
        let k = Array2::from_elem((4, 2), 0.3);
        let v = lcg_matrix(4, 2, 5);
        let out = multi_head_attention(q.view(), k.view(), v.view(), 1, None).unwrap();
        let mean = v.mean_axis(Axis(0)).unwrap();
        for row in out.output.rows() {
            assert!((&row - &mean).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn shape_mismatch_is_internal_error() {
        let q = lcg_matrix(3, 4, 1);
        let k = lcg_matrix(3, 2, 1);
        assert!(matches!(
            multi_head_attention(q.view(), k.view(), k.view(), 2, None),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn kv_backward_matches_finite_differences() {
        let q = lcg_matrix(4, 4, 11);
        let k = lcg_matrix(6, 4, 12);
        let v = lcg_matrix(6, 4, 13);
        let g = lcg_matrix(4, 4, 14);
        let loss = |k: &Array2<f64>, v: &Array2<f64>| {
            let o = multi_head_attention(q.view(), k.view(), v.view(), 2, None).unwrap();
            (&o.output * &g).sum()
        };
        let fwd = multi_head_attention(q.view(), k.view(), v.view(), 2, None).unwrap();
        let (dk, dv) = attention_kv_backward(q.view(), v.view(), &fwd.probs, g.view());
        let h = 1e-6;
        for i in 0..6 {
            for j in 0..4 {
                let mut kp = k.clone();
                kp[[i, j]] += h;
                let mut km = k.clone();
                km[[i, j]] -= h;
                let fd = (loss(&kp, &v) - loss(&km, &v)) / (2.0 * h);
                assert!((fd - dk[[i, j]]).abs() < 1e-7, "dk {i},{j}: {fd} vs {}", dk[[i, j]]);
                let mut vp = v.clone();
                vp[[i, j]] += h;
                let mut vm = v.clone();
                vm[[i, j]] -= h;
                let fd = (loss(&k, &vp) - loss(&k, &vm)) / (2.0 * h);
                assert!((fd - dv[[i, j]]).abs() < 1e-7);
            }
        }
    }
}
