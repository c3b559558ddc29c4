use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Logistic function `1 / (1 + e^-z)`, evaluated without overflow.
pub fn sigmoid<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    z.map(|v| {
        if v >= T::ZERO {
            T::ONE / (T::ONE + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::ONE + e)
        }
    })
}

/// Gradient through [`sigmoid`], given its output `y`.
pub fn sigmoid_backward<T: Scalar>(grad_out: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != y.shape() {
        return Err(shape_err!("sigmoid grad {:?} vs output {:?}", grad_out.shape(), y.shape()));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(y.data())
        .map(|(&g, &s)| g * s * (T::ONE - s))
        .collect();
    Ok(Tensor::from_parts_unchecked(y.shape().to_vec(), data))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Passes `grad_out` where `x > 0`.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != x.shape() {
        return Err(shape_err!("relu grad {:?} vs input {:?}", grad_out.shape(), x.shape()));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
        .collect();
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), data))
}

/// Row-wise softmax of `[n,k]` logits with max subtraction.
pub fn softmax<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = z.dims2()?;
    if k < 2 {
        return Err(shape_err!("softmax needs at least 2 classes, got {k}"));
    }
    let mut out = z.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(row[0], T::max);
        let mut total = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of softmax given its output `y`:
/// `dz_i = y_i (g_i - sum_j g_j y_j)`.
pub fn softmax_backward<T: Scalar>(grad_out: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = y.dims2()?;
    if grad_out.shape() != y.shape() {
        return Err(shape_err!("softmax grad {:?} vs output {:?}", grad_out.shape(), y.shape()));
    }
    let mut out = grad_out.clone();
    for (grow, yrow) in out.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
        let dot = grow
            .iter()
            .zip(yrow)
            .fold(T::ZERO, |acc, (&g, &p)| acc + g * p);
        for (g, &p) in grow.iter_mut().zip(yrow) {
            *g = p * (*g - dot);
        }
    }
    Ok(out)
}
