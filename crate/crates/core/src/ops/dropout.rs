use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::ops::Mode;
use crate::tensor::{Scalar, Tensor};

/// Per-element multipliers applied by a train-mode dropout: `0` for dropped
/// elements, `1 / (1 - rate)` for survivors. `None` means identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T: Scalar>(Option<Vec<T>>);

impl<T: Scalar> DropoutMask<T> {
    pub fn identity() -> Self {
        DropoutMask(None)
    }

    pub fn scales(&self) -> Option<&[T]> {
        self.0.as_deref()
    }

    /// Fraction of elements zeroed.
    pub fn dropped_fraction(&self) -> f64 {
        match &self.0 {
            None => 0.0,
            Some(m) => m.iter().filter(|&&v| v == T::ZERO).count() as f64 / m.len() as f64,
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Param(format!("dropout rate must be in [0,1), got {rate}")));
    }
    Ok(())
}

/// Inverted dropout. Train mode zeroes each element with probability `rate`
/// and scales survivors by `1 / (1 - rate)`; infer mode is the identity.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    check_rate(rate)?;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), DropoutMask::identity()));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::ZERO
            } else {
                keep
            }
        })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((
        Tensor::from_parts_unchecked(x.shape().to_vec(), data),
        DropoutMask(Some(mask)),
    ))
}

/// Applies the same mask and scale to the upstream gradient.
pub fn dropout_backward<T: Scalar>(grad_out: &Tensor<T>, mask: &DropoutMask<T>) -> Result<Tensor<T>> {
    match &mask.0 {
        None => Ok(grad_out.clone()),
        Some(m) if m.len() == grad_out.len() => {
            let data = grad_out.data().iter().zip(m).map(|(&g, &s)| g * s).collect();
            Ok(Tensor::from_parts_unchecked(grad_out.shape().to_vec(), data))
        }
        Some(m) => Err(shape_err!(
            "dropout mask has {} elements, gradient has {}",
            m.len(),
            grad_out.len()
        )),
    }
}
