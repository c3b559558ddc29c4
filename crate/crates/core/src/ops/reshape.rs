use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// `[n, ...] -> [n, prod(rest)]`, order preserving.
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    x.reshape(vec![n, x.len() / n])
}

/// Inverse of [`flatten`] for a known per-sample shape.
pub fn unflatten<T: Scalar>(x: &Tensor<T>, sample_shape: &[usize]) -> Result<Tensor<T>> {
    let (n, _) = x.dims2()?;
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    x.reshape(shape)
}

/// Column-wise concatenation of `[n, d_i]` blocks, in input order.
pub fn concat<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| shape_err!("concat needs at least one input"))?;
    let (n, _) = first.dims2()?;
    let mut widths = Vec::with_capacity(xs.len());
    for x in xs {
        let (rows, d) = x.dims2()?;
        if rows != n {
            return Err(shape_err!("concat batch mismatch: {rows} vs {n}"));
        }
        widths.push(d);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * total);
    for r in 0..n {
        for (x, &d) in xs.iter().zip(&widths) {
            out.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, total], out))
}

/// Splits a `[n, sum d_i]` gradient back into per-input blocks.
pub fn concat_backward<T: Scalar>(grad_out: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, total) = grad_out.dims2()?;
    if widths.iter().sum::<usize>() != total {
        return Err(shape_err!("concat widths {widths:?} do not sum to {total}"));
    }
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&d| Vec::with_capacity(n * d)).collect();
    for row in grad_out.data().chunks(total) {
        let mut off = 0;
        for (part, &d) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&row[off..off + d]);
            off += d;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(p, &d)| Tensor::from_vec(vec![n, d], p))
        .collect()
}
