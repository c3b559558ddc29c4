use crate::error::{shape_err, Result};
use crate::exec::{self, Exec};
use crate::tensor::{Scalar, Shape4, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Average,
    Max,
}

/// Pooling window and stride. Trailing partial windows are discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolAttrs {
    pub window_h: usize,
    pub window_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub mode: PoolMode,
}

impl PoolAttrs {
    /// Square window with stride equal to the window.
    pub fn square(window: usize, mode: PoolMode) -> Self {
        PoolAttrs {
            window_h: window,
            window_w: window,
            stride_h: window,
            stride_w: window,
            mode,
        }
    }

    /// `floor((H - wh) / sh) + 1` per axis.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.window_h == 0 || self.window_w == 0 || self.stride_h == 0 || self.stride_w == 0 {
            return Err(shape_err!("pool window and stride must be positive"));
        }
        if self.window_h > h || self.window_w > w {
            return Err(shape_err!(
                "pool window {}x{} larger than {h}x{w} input",
                self.window_h,
                self.window_w
            ));
        }
        Ok((
            (h - self.window_h) / self.stride_h + 1,
            (w - self.window_w) / self.stride_w + 1,
        ))
    }
}

fn out_shape(xs: Shape4, attrs: &PoolAttrs) -> Result<(usize, usize)> {
    attrs.output_hw(xs.h, xs.w)
}

/// Offset within an `h x w` plane of the first maximal element of the
/// window at output position `(oy, ox)`, scanning row-major.
fn argmax<T: Scalar>(plane: &[T], w: usize, attrs: &PoolAttrs, oy: usize, ox: usize) -> usize {
    let (y0, x0) = (oy * attrs.stride_h, ox * attrs.stride_w);
    let mut best = y0 * w + x0;
    for i in 0..attrs.window_h {
        for j in 0..attrs.window_w {
            let off = (y0 + i) * w + x0 + j;
            if plane[off] > plane[best] {
                best = off;
            }
        }
    }
    best
}

pub fn pool2d_forward<T: Scalar>(x: &Tensor<T>, attrs: &PoolAttrs, exec: Exec) -> Result<Tensor<T>> {
    let xs = x.dims4()?;
    let (oh, ow) = out_shape(xs, attrs)?;
    let area = T::from_f64((attrs.window_h * attrs.window_w) as f64);
    let mut out = vec![T::ZERO; xs.n * xs.c * oh * ow];
    let plane_len = xs.plane();
    exec::for_each_chunk(exec, &mut out, oh * ow, |nc, dst| {
        let plane = &x.data()[nc * plane_len..(nc + 1) * plane_len];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = match attrs.mode {
                    PoolMode::Max => plane[argmax(plane, xs.w, attrs, oy, ox)],
                    PoolMode::Average => {
                        let (y0, x0) = (oy * attrs.stride_h, ox * attrs.stride_w);
                        let mut acc = T::ZERO;
                        for i in 0..attrs.window_h {
                            let row = &plane[(y0 + i) * xs.w + x0..(y0 + i) * xs.w + x0 + attrs.window_w];
                            for &v in row {
                                acc += v;
                            }
                        }
                        acc / area
                    }
                };
            }
        }
    });
    Ok(Tensor::from_parts_unchecked(vec![xs.n, xs.c, oh, ow], out))
}

/// Average mode spreads each output gradient uniformly over its window;
/// max mode routes it to the first maximal input of the window.
pub fn pool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    attrs: &PoolAttrs,
    exec: Exec,
) -> Result<Tensor<T>> {
    let xs = x.dims4()?;
    let (oh, ow) = out_shape(xs, attrs)?;
    let expect = [xs.n, xs.c, oh, ow];
    if grad_out.shape() != expect {
        return Err(shape_err!(
            "pool grad_out {:?} does not match forward output {expect:?}",
            grad_out.shape()
        ));
    }
    let inv_area = T::ONE / T::from_f64((attrs.window_h * attrs.window_w) as f64);
    let plane_len = xs.plane();
    let mut grad = vec![T::ZERO; x.len()];
    exec::for_each_chunk(exec, &mut grad, plane_len, |nc, dst| {
        let plane = &x.data()[nc * plane_len..(nc + 1) * plane_len];
        let g = &grad_out.data()[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[oy * ow + ox];
                match attrs.mode {
                    PoolMode::Max => dst[argmax(plane, xs.w, attrs, oy, ox)] += gv,
                    PoolMode::Average => {
                        let share = gv * inv_area;
                        let (y0, x0) = (oy * attrs.stride_h, ox * attrs.stride_w);
                        for i in 0..attrs.window_h {
                            for j in 0..attrs.window_w {
                                dst[(y0 + i) * xs.w + x0 + j] += share;
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), grad))
}
