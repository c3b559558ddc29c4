use crate::error::{shape_err, Result};
use crate::exec::Exec;
use crate::tensor::{gemm, Scalar, Tensor};

fn dims<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, d_in) = x.dims2()?;
    let (w_in, d_out) = weights.dims2()?;
    if d_in != w_in {
        return Err(shape_err!("dense input width {d_in} but weights are [{w_in},{d_out}]"));
    }
    Ok((n, d_in, d_out))
}

/// `x[n,d_in] . W[d_in,d_out] + bias` per row.
pub fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    exec: Exec,
) -> Result<Tensor<T>> {
    let (n, d_in, d_out) = dims(x, weights)?;
    if bias.shape() != [d_out] {
        return Err(shape_err!("dense bias must be [{d_out}], got {:?}", bias.shape()));
    }
    let mut out = vec![T::ZERO; n * d_out];
    gemm::nn(exec, n, d_in, d_out, x.data(), weights.data(), &mut out);
    for row in out.chunks_mut(d_out) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, d_out], out))
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `grad_x = g W^T`, `grad_W = x^T g`, `grad_b` = column sums of `g`.
pub fn dense_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    weights: &Tensor<T>,
    exec: Exec,
) -> Result<DenseGrads<T>> {
    let (n, d_in, d_out) = dims(x, weights)?;
    if grad_out.shape() != [n, d_out] {
        return Err(shape_err!("dense grad_out {:?}, expected [{n},{d_out}]", grad_out.shape()));
    }
    let mut gx = vec![T::ZERO; n * d_in];
    gemm::nt(exec, n, d_out, d_in, grad_out.data(), weights.data(), &mut gx);
    let mut gw = vec![T::ZERO; d_in * d_out];
    gemm::tn(exec, d_in, n, d_out, x.data(), grad_out.data(), &mut gw);
    let mut gb = vec![T::ZERO; d_out];
    for row in grad_out.data().chunks(d_out) {
        for (b, &g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(DenseGrads {
        x: Tensor::from_parts_unchecked(vec![n, d_in], gx),
        weights: Tensor::from_parts_unchecked(vec![d_in, d_out], gw),
        bias: Tensor::from_parts_unchecked(vec![d_out], gb),
    })
}
