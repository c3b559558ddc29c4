//! Per-channel batch normalization over `(n, h, w)`.

use crate::error::{shape_err, Error, Result};
use crate::exec::{self, Exec};
use crate::ops::Mode;
use crate::tensor::{Scalar, Shape4, Tensor};

pub const DEFAULT_NORM_EPSILON: f64 = 1e-3;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

/// Learned scale/shift plus running statistics for one normalization layer.
/// All four vectors count toward the parameter total.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub moving_mean: Tensor<T>,
    pub moving_var: Tensor<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<T: Scalar> NormState<T> {
    /// gamma = 1, beta = 0, moving mean 0, moving variance 1.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(NormState {
            gamma: Tensor::full(vec![channels], T::ONE)?,
            beta: Tensor::zeros(vec![channels])?,
            moving_mean: Tensor::zeros(vec![channels])?,
            moving_var: Tensor::full(vec![channels], T::ONE)?,
            epsilon: DEFAULT_NORM_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        for (name, t) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("moving_mean", &self.moving_mean),
            ("moving_var", &self.moving_var),
        ] {
            if t.shape() != [channels] {
                return Err(shape_err!(
                    "norm {name} has shape {:?}, input has {channels} channels",
                    t.shape()
                ));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Param(format!("norm epsilon must be positive, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Param(format!("norm momentum must be in [0,1), got {}", self.momentum)));
        }
        Ok(())
    }

    /// `moving = momentum * moving + (1 - momentum) * batch`.
    pub fn update_moving(&mut self, batch_mean: &[T], batch_var: &[T]) -> Result<()> {
        let c = self.channels();
        if batch_mean.len() != c || batch_var.len() != c {
            return Err(shape_err!("batch statistics length differs from {c} channels"));
        }
        let keep = T::from_f64(self.momentum);
        let take = T::from_f64(1.0 - self.momentum);
        for (m, &b) in self.moving_mean.data_mut().iter_mut().zip(batch_mean) {
            *m = keep * *m + take * b;
        }
        for (v, &b) in self.moving_var.data_mut().iter_mut().zip(batch_var) {
            *v = keep * *v + take * b;
        }
        Ok(())
    }
}

/// Result of a normalization forward pass. In train mode the batch
/// statistics are returned for the caller to fold into the moving averages.
#[derive(Debug, Clone)]
pub struct NormForward<T: Scalar> {
    pub output: Tensor<T>,
    pub batch_mean: Option<Vec<T>>,
    pub batch_var: Option<Vec<T>>,
}

/// Biased mean and variance per channel over `(n, h, w)`.
fn channel_stats<T: Scalar>(x: &Tensor<T>, s: Shape4, exec: Exec) -> (Vec<T>, Vec<T>) {
    let plane = s.plane();
    let count = T::from_f64((s.n * plane) as f64);
    let stats = exec::map_range(exec, 0..s.c, |c| {
        let mut sum = T::ZERO;
        for n in 0..s.n {
            let off = (n * s.c + c) * plane;
            for &v in &x.data()[off..off + plane] {
                sum += v;
            }
        }
        let mean = sum / count;
        let mut sq = T::ZERO;
        for n in 0..s.n {
            let off = (n * s.c + c) * plane;
            for &v in &x.data()[off..off + plane] {
                let d = v - mean;
                sq += d * d;
            }
        }
        (mean, sq / count)
    });
    stats.into_iter().unzip()
}

fn normalize<T: Scalar>(
    x: &Tensor<T>,
    s: Shape4,
    mean: &[T],
    var: &[T],
    state: &NormState<T>,
    exec: Exec,
) -> Tensor<T> {
    let eps = T::from_f64(state.epsilon);
    let plane = s.plane();
    let mut out = vec![T::ZERO; x.len()];
    exec::for_each_chunk(exec, &mut out, plane, |nc, dst| {
        let c = nc % s.c;
        let inv = T::ONE / (var[c] + eps).sqrt();
        let (g, b) = (state.gamma.data()[c], state.beta.data()[c]);
        let src = &x.data()[nc * plane..(nc + 1) * plane];
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = g * ((v - mean[c]) * inv) + b;
        }
    });
    Tensor::from_parts_unchecked(x.shape().to_vec(), out)
}

pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &NormState<T>,
    mode: Mode,
    exec: Exec,
) -> Result<NormForward<T>> {
    let s = x.dims4()?;
    state.validate(s.c)?;
    match mode {
        Mode::Train => {
            let (mean, var) = channel_stats(x, s, exec);
            let output = normalize(x, s, &mean, &var, state, exec);
            Ok(NormForward {
                output,
                batch_mean: Some(mean),
                batch_var: Some(var),
            })
        }
        Mode::Infer => Ok(NormForward {
            output: normalize(
                x,
                s,
                state.moving_mean.data(),
                state.moving_var.data(),
                state,
                exec,
            ),
            batch_mean: None,
            batch_var: None,
        }),
    }
}

#[derive(Debug, Clone)]
pub struct NormGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Exact gradient of the train-mode normalization, with the batch mean and
/// variance treated as functions of `x`.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    state: &NormState<T>,
    exec: Exec,
) -> Result<NormGrads<T>> {
    let s = x.dims4()?;
    state.validate(s.c)?;
    if grad_out.shape() != x.shape() {
        return Err(shape_err!("norm grad_out {:?} vs input {:?}", grad_out.shape(), x.shape()));
    }
    let (mean, var) = channel_stats(x, s, exec);
    let eps = T::from_f64(state.epsilon);
    let plane = s.plane();
    let count = T::from_f64((s.n * plane) as f64);

    // Per channel: sum(g), sum(g * xhat).
    let sums = exec::map_range(exec, 0..s.c, |c| {
        let inv = T::ONE / (var[c] + eps).sqrt();
        let (mut sg, mut sgx) = (T::ZERO, T::ZERO);
        for n in 0..s.n {
            let off = (n * s.c + c) * plane;
            let xs = &x.data()[off..off + plane];
            let gs = &grad_out.data()[off..off + plane];
            for (&v, &g) in xs.iter().zip(gs) {
                sg += g;
                sgx += g * ((v - mean[c]) * inv);
            }
        }
        (sg, sgx)
    });
    let (sum_g, sum_gx): (Vec<T>, Vec<T>) = sums.into_iter().unzip();

    let mut gx = vec![T::ZERO; x.len()];
    exec::for_each_chunk(exec, &mut gx, plane, |nc, dst| {
        let c = nc % s.c;
        let inv = T::ONE / (var[c] + eps).sqrt();
        let gamma = state.gamma.data()[c];
        let mg = sum_g[c] / count;
        let mgx = sum_gx[c] / count;
        let xs = &x.data()[nc * plane..(nc + 1) * plane];
        let gs = &grad_out.data()[nc * plane..(nc + 1) * plane];
        for ((d, &v), &g) in dst.iter_mut().zip(xs).zip(gs) {
            let xhat = (v - mean[c]) * inv;
            *d = gamma * inv * (g - mg - xhat * mgx);
        }
    });

    Ok(NormGrads {
        x: Tensor::from_parts_unchecked(x.shape().to_vec(), gx),
        gamma: Tensor::from_parts_unchecked(vec![s.c], sum_gx),
        beta: Tensor::from_parts_unchecked(vec![s.c], sum_g),
    })
}
