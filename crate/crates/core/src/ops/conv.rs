//! Valid, stride-1 2-D convolution (cross-correlation, no kernel flip),
//! lowered to GEMM through an im2col buffer per image.

use crate::error::{shape_err, Result};
use crate::exec::{self, Exec};
use crate::tensor::{gemm, Scalar, Shape4, Tensor};

/// Convolution attributes. Stride is fixed at 1 and padding is always valid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvAttrs {
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ConvAttrs {
    pub fn square(out_channels: usize, kernel: usize) -> Self {
        ConvAttrs {
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
        }
    }

    /// Output spatial extent: one position per `kh x kw` subimage,
    /// `(H - kh + 1) x (W - kw + 1)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.out_channels == 0 {
            return Err(shape_err!("convolution kernel and filter count must be positive"));
        }
        if self.kernel_h > h || self.kernel_w > w {
            return Err(shape_err!(
                "kernel {}x{} larger than {h}x{w} input",
                self.kernel_h,
                self.kernel_w
            ));
        }
        Ok((h - self.kernel_h + 1, w - self.kernel_w + 1))
    }

    pub fn weight_shape(&self, in_channels: usize) -> [usize; 4] {
        [self.out_channels, in_channels, self.kernel_h, self.kernel_w]
    }
}

struct Geometry {
    x: Shape4,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.x.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn geometry<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>) -> Result<Geometry> {
    let xs = x.dims4()?;
    let (f, c, kh, kw) = match *weights.shape() {
        [f, c, kh, kw] => (f, c, kh, kw),
        _ => return Err(shape_err!("conv weights must be [f,c,kh,kw], got {:?}", weights.shape())),
    };
    if c != xs.c {
        return Err(shape_err!("conv input has {} channels, weights expect {c}", xs.c));
    }
    let (oh, ow) = ConvAttrs {
        out_channels: f,
        kernel_h: kh,
        kernel_w: kw,
    }
    .output_hw(xs.h, xs.w)?;
    Ok(Geometry {
        x: xs,
        f,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Fills `col[(c,i,j), (y,x)] = img[c, y+i, x+j]`.
fn im2col<T: Scalar>(g: &Geometry, img: &[T], col: &mut [T]) {
    let (h, w) = (g.x.h, g.x.w);
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.x.c {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let dst = &mut col[row * p..(row + 1) * p];
                for y in 0..g.oh {
                    let src = &plane[(y + i) * w + j..(y + i) * w + j + g.ow];
                    dst[y * g.ow..(y + 1) * g.ow].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds `col` back into image layout (adjoint of [`im2col`]).
fn col2im<T: Scalar>(g: &Geometry, col: &[T], img: &mut [T]) {
    let (h, w) = (g.x.h, g.x.w);
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.x.c {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let src = &col[row * p..(row + 1) * p];
                for y in 0..g.oh {
                    let dst = &mut plane[(y + i) * w + j..(y + i) * w + j + g.ow];
                    for (d, &s) in dst.iter_mut().zip(&src[y * g.ow..(y + 1) * g.ow]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_attrs(attrs: &ConvAttrs, g: &Geometry) -> Result<()> {
    if attrs.out_channels != g.f || attrs.kernel_h != g.kh || attrs.kernel_w != g.kw {
        return Err(shape_err!(
            "conv attrs {}@{}x{} disagree with weights [{},{},{},{}]",
            attrs.out_channels,
            attrs.kernel_h,
            attrs.kernel_w,
            g.f,
            g.x.c,
            g.kh,
            g.kw
        ));
    }
    Ok(())
}

/// `[n,c,H,W] * [f,c,kh,kw] + bias[f] -> [n,f,H-kh+1,W-kw+1]`.
///
/// Each output is `sum over (c,i,j) of x*w`, accumulated in ascending
/// `(c,i,j)` order from zero, then plus the bias.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    attrs: &ConvAttrs,
    exec: Exec,
) -> Result<Tensor<T>> {
    let g = geometry(x, weights)?;
    check_attrs(attrs, &g)?;
    if bias.shape() != [g.f] {
        return Err(shape_err!("conv bias must be [{}], got {:?}", g.f, bias.shape()));
    }
    let (taps, p) = (g.taps(), g.positions());
    let img_len = g.x.image_len();
    let mut out = vec![T::ZERO; g.x.n * g.f * p];
    let inner = if g.x.n == 1 { exec } else { Exec::Sequential };
    exec::for_each_chunk(exec, &mut out, g.f * p, |n, dst| {
        let mut col = vec![T::ZERO; taps * p];
        im2col(&g, &x.data()[n * img_len..(n + 1) * img_len], &mut col);
        gemm::nn(inner, g.f, taps, p, weights.data(), &col, dst);
        for (plane, &b) in dst.chunks_mut(p).zip(bias.data()) {
            for v in plane {
                *v += b;
            }
        }
    });
    Ok(Tensor::from_parts_unchecked(
        vec![g.x.n, g.f, g.oh, g.ow],
        out,
    ))
}

/// Gradients of [`conv2d_forward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Backward pass of the convolution. Weight and bias gradients are summed
/// over the batch as per-image partials added in image order.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    weights: &Tensor<T>,
    exec: Exec,
) -> Result<ConvGrads<T>> {
    let g = geometry(x, weights)?;
    let expect = [g.x.n, g.f, g.oh, g.ow];
    if grad_out.shape() != expect {
        return Err(shape_err!(
            "conv grad_out {:?} does not match forward output {expect:?}",
            grad_out.shape()
        ));
    }
    let (taps, p) = (g.taps(), g.positions());
    let img_len = g.x.image_len();
    let out_len = g.f * p;

    let mut grad_x = vec![T::ZERO; x.len()];
    let mut grad_w = vec![T::ZERO; g.f * taps];
    let mut grad_b = vec![T::ZERO; g.f];

    // Process images in rounds; each round yields per-image partials which
    // are folded into the weight/bias gradients in image order.
    let width = exec.width().max(1);
    let inner = if g.x.n == 1 { exec } else { Exec::Sequential };
    let mut start = 0;
    while start < g.x.n {
        let end = (start + width).min(g.x.n);
        let partials = exec::map_range(exec, start..end, |n| {
            let xn = &x.data()[n * img_len..(n + 1) * img_len];
            let gn = &grad_out.data()[n * out_len..(n + 1) * out_len];
            let mut col = vec![T::ZERO; taps * p];
            im2col(&g, xn, &mut col);

            let mut gw = vec![T::ZERO; g.f * taps];
            gemm::nt(inner, g.f, p, taps, gn, &col, &mut gw);

            let gb: Vec<T> = gn
                .chunks(p)
                .map(|plane| plane.iter().fold(T::ZERO, |acc, &v| acc + v))
                .collect();

            col.iter_mut().for_each(|v| *v = T::ZERO);
            gemm::tn(inner, taps, g.f, p, weights.data(), gn, &mut col);
            let mut gx = vec![T::ZERO; img_len];
            col2im(&g, &col, &mut gx);
            (gx, gw, gb)
        });
        for (offset, (gx, gw, gb)) in partials.into_iter().enumerate() {
            let n = start + offset;
            grad_x[n * img_len..(n + 1) * img_len].copy_from_slice(&gx);
            for (a, b) in grad_w.iter_mut().zip(gw) {
                *a += b;
            }
            for (a, b) in grad_b.iter_mut().zip(gb) {
                *a += b;
            }
        }
        start = end;
    }

    Ok(ConvGrads {
        x: Tensor::from_parts_unchecked(x.shape().to_vec(), grad_x),
        weights: Tensor::from_parts_unchecked(weights.shape().to_vec(), grad_w),
        bias: Tensor::from_parts_unchecked(vec![g.f], grad_b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(
            shape.to_vec(),
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Six nested loops over (n, f, y, x, c, i, j).
    fn oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let s = x.dims4().unwrap();
        let [f, _, kh, kw] = <[usize; 4]>::try_from(w.shape()).unwrap();
        let (oh, ow) = (s.h - kh + 1, s.w - kw + 1);
        let mut out = Tensor::zeros(vec![s.n, f, oh, ow]).unwrap();
        for n in 0..s.n {
            for o in 0..f {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..s.c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    acc += x.get(&[n, c, y + i, xx + j]).unwrap()
                                        * w.get(&[o, c, i, j]).unwrap();
                                }
                            }
                        }
                        out.set(&[n, o, y, xx], acc + b.data()[o]).unwrap();
                    }
                }
            }
        }
        out
    }

    #[test]
    fn output_extent_rule() {
        let attrs = ConvAttrs::square(32, 3);
        assert_eq!(attrs.output_hw(100, 100).unwrap(), (98, 98));
        assert!(attrs.output_hw(2, 5).is_err());
    }

    #[test]
    fn identity_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 1, 5, 4], &mut rng);
        let w = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(vec![1]).unwrap();
        let y = conv2d_forward(&x, &w, &b, &ConvAttrs::square(1, 1), Exec::Sequential).unwrap();
        assert_eq!(y, x);
        let grads = conv2d_backward(&y, &x, &w, Exec::Sequential).unwrap();
        assert_eq!(grads.x, y);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let w = random(&[4, 2, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let attrs = ConvAttrs::square(4, 3);
        for exec in [Exec::Sequential, Exec::Parallel] {
            let y = conv2d_forward(&x, &w, &b, &attrs, exec).unwrap();
            assert_eq!(y, oracle(&x, &w, &b));
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 3, 3]).unwrap();
        let w = Tensor::<f64>::zeros(vec![1, 3, 3, 3]).unwrap();
        let b = Tensor::<f64>::zeros(vec![1]).unwrap();
        let r = conv2d_forward(&x, &w, &b, &ConvAttrs::square(1, 3), Exec::Sequential);
        assert!(matches!(r, Err(Error::Shape(_))));
        let w = Tensor::<f64>::zeros(vec![1, 2, 4, 4]).unwrap();
        let r = conv2d_forward(&x, &w, &b, &ConvAttrs::square(1, 4), Exec::Sequential);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let g = Tensor::zeros(vec![2, 3, 3, 3]).unwrap();
        let grads = conv2d_backward(&g, &x, &w, Exec::Sequential).unwrap();
        assert!(grads.x.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_is_upstream_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&[3, 2, 6, 5], &mut rng);
        let w = random(&[2, 2, 3, 2], &mut rng);
        let g = random(&[3, 2, 4, 4], &mut rng);
        let grads = conv2d_backward(&g, &x, &w, Exec::Sequential).unwrap();
        for f in 0..2 {
            let mut total = 0.0;
            for n in 0..3 {
                for p in 0..16 {
                    total += g.data()[(n * 2 + f) * 16 + p];
                }
            }
            assert!((grads.bias.data()[f] - total).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_backward_matches_sequential_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&[5, 3, 9, 8], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let g = random(&[5, 4, 7, 6], &mut rng);
        let a = conv2d_backward(&g, &x, &w, Exec::Sequential).unwrap();
        let b = conv2d_backward(&g, &x, &w, Exec::Parallel).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.bias, b.bias);
    }
}
