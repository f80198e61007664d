//! Scalar losses. Each returns the loss value together with its gradient
//! w.r.t. the prediction, averaged over all elements (or rows for
//! cross-entropy).

use crate::error::{Error, Result};

use super::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub value: T,
    /// d loss / d prediction.
    pub grad: Tensor<T>,
}

fn same_shape<T: Real>(op: &'static str, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    target.expect_shape(op, pred.shape())
}

pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<LossOutput<T>> {
    same_shape("mse_loss", pred, target)?;
    let n = T::of(pred.len() as f64);
    let value = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<T>()
        / n;
    let two = T::of(2.0);
    let grad = pred.zip_map(target, "mse_loss", |p, t| two * (p - t) / n)?;
    Ok(LossOutput { value, grad })
}

pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<LossOutput<T>> {
    same_shape("l1_loss", pred, target)?;
    let n = T::of(pred.len() as f64);
    let value = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs())
        .sum::<T>()
        / n;
    let grad = pred.zip_map(target, "l1_loss", |p, t| {
        let d = p - t;
        if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        }
    })?;
    Ok(LossOutput { value, grad })
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, m) = logits.dims2("softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(m) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let z: T = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v = *v / z);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean over rows of `-sum_k y_k log softmax(logits)_k` for one-hot `labels`.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<LossOutput<T>> {
    let (n, m) = logits.dims2("softmax_cross_entropy")?;
    labels.expect_shape("softmax_cross_entropy", &[n, m])?;
    for (i, row) in labels.data().chunks(m).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != m - 1 {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: label row {i} is not one-hot"
            )));
        }
    }
    let probs = softmax(logits)?;
    let rows = T::of(n as f64);
    let mut value = T::zero();
    for (lrow, yrow) in logits.data().chunks(m).zip(labels.data().chunks(m)) {
        // log softmax via log-sum-exp to stay finite for extreme logits.
        let max = lrow.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + lrow.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for (&l, &y) in lrow.iter().zip(yrow) {
            if y != T::zero() {
                value = value - y * (l - lse);
            }
        }
    }
    value = value / rows;
    let grad = probs.zip_map(labels, "softmax_cross_entropy", |p, y| (p - y) / rows)?;
    Ok(LossOutput { value, grad })
}
