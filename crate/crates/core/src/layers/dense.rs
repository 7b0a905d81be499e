//! Fully connected layer, ReLU, and softmax cross-entropy.
//!
//! The linear layer uses plain per-row dot products so a row's result does not
//! depend on which other rows share its batch.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `y = x W^T + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, cin) = x.dims2()?;
    let (cout, win) = weight.dims2()?;
    if win != cin {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: b.shape().to_vec(),
                right: vec![cout],
            });
        }
    }
    let mut out = Vec::with_capacity(n * cout);
    for row in x.data().chunks(cin) {
        for (o, wrow) in weight.data().chunks(cin).enumerate() {
            let mut acc = bias.map_or(T::zero(), |b| b.data()[o]);
            for (&a, &b) in row.iter().zip(wrow) {
                acc += a * b;
            }
            out.push(acc);
        }
    }
    Ok(Tensor::from_parts(vec![n, cout], out))
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, cin) = x.dims2()?;
    let (cout, _) = weight.dims2()?;
    if grad_out.shape() != [n, cout] {
        return Err(Error::ShapeMismatch {
            op: "linear backward",
            left: grad_out.shape().to_vec(),
            right: vec![n, cout],
        });
    }
    let mut dx = vec![T::zero(); n * cin];
    let mut dw = vec![T::zero(); cout * cin];
    let mut db = vec![T::zero(); cout];
    for b in 0..n {
        let xrow = &x.data()[b * cin..][..cin];
        let grow = &grad_out.data()[b * cout..][..cout];
        let dxrow = &mut dx[b * cin..][..cin];
        for (o, &g) in grow.iter().enumerate() {
            db[o] += g;
            let wrow = &weight.data()[o * cin..][..cin];
            let dwrow = &mut dw[o * cin..][..cin];
            for i in 0..cin {
                dxrow[i] += g * wrow[i];
                dwrow[i] += g * xrow[i];
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![n, cin], dx),
        Tensor::from_parts(vec![cout, cin], dw),
        Tensor::from_parts(vec![cout], db),
    ))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_with(grad_out, "relu backward", |v, g| {
        if v > T::zero() {
            g
        } else {
            T::zero()
        }
    })
}

/// Row-wise softmax, stabilized by subtracting the row maximum.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2()?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Mean over the batch of `-log softmax(logits)[label]`; also returns the
/// softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross entropy labels",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let probs = softmax(logits)?;
    let mut loss = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        // log-sum-exp form keeps saturated rows finite
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[label];
    }
    Ok((loss / T::from_usize(n).unwrap(), probs))
}

/// Gradient of the mean cross-entropy w.r.t. logits, scaled by `upstream`.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    upstream: T,
) -> Result<Tensor<T>> {
    let (n, k) = probs.dims2()?;
    let scale = upstream / T::from_usize(n).unwrap();
    let mut grad = probs.data().to_vec();
    for (row, &label) in grad.chunks_mut(k).zip(labels) {
        row[label] -= T::one();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(Tensor::from_parts(vec![n, k], grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(vec![4, 10]);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 3, 9, 5]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
        assert!(probs.data().iter().all(|&p| (p - 0.1).abs() < 1e-15));
    }

    #[test]
    fn saturated_logit_gives_zero_loss() {
        let logits = Tensor::<f32>::new(vec![1, 2], vec![100.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-6);
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((loss - 100.0).abs() < 1e-3);
    }

    #[test]
    fn rows_sum_to_one_for_large_logits() {
        let logits = Tensor::<f32>::from_fn(vec![6, 5], |i| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            s * 1e4 * ((i % 7) as f32 / 7.0)
        });
        let p = softmax(&logits).unwrap();
        for row in p.data().chunks(5) {
            assert!(row.iter().all(|v| v.is_finite()));
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f32>::zeros(vec![1, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn linear_matches_hand_computation() {
        let x = Tensor::<f64>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1., 0., -1., 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::new(vec![2], vec![10., 20.]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[8.0, 23.0, 8.0, 27.5]);
    }
}
