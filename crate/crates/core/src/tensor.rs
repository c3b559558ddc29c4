//! Dense row-major tensors and the linear-algebra primitives shared by every
//! layer.
//!
//! Image tensors use the `(n, c, h, w)` layout: batch outermost, then one
//! contiguous `h x w` plane per channel. No operation broadcasts; shapes must
//! agree exactly.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{shape_err, Error, Result};
use crate::exec::{self, Exec};

/// IEEE-754 element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Code used by the weights container.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("binary32"),
            DType::F64 => f.write_str("binary64"),
        }
    }
}

/// Element types a [`Tensor`] can hold: `f32` (training fast path) and `f64`
/// (reference path for oracle and gradient checks).
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: DType = $dtype;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, DType::F32);
impl_scalar!(f64, DType::F64);

/// Extents of a batch of images in `(n, c, h, w)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(shape_err!("image extents must be positive, got [{n},{c},{h},{w}]"));
        }
        Ok(Shape4 { n, c, h, w })
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn to_vec(self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Construction("tensor rank must be at least 1".into()));
    }
    if shape.contains(&0) {
        return Err(Error::Construction(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from row-major values.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::Construction(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::from_vec`] but converts from `f64` values.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::ZERO)
    }

    /// Zero tensor with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![T::ZERO; self.data.len()],
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(vec![n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::ONE;
        }
        Ok(t)
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Interprets a rank-4 tensor as an image batch.
    pub fn dims4(&self) -> Result<Shape4> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok(Shape4 { n, c, h, w }),
            _ => Err(shape_err!("expected a rank-4 [n,c,h,w] tensor, got {:?}", self.shape)),
        }
    }

    /// Interprets a rank-2 tensor as `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err!("expected a rank-2 tensor, got {:?}", self.shape)),
        }
    }

    fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            off = off * d + i;
        }
        Some(off)
    }

    /// Element at a multi-index, or `None` when out of bounds.
    pub fn get(&self, index: &[usize]) -> Option<T> {
        self.offset(index).map(|o| self.data[o])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self
            .offset(index)
            .ok_or_else(|| shape_err!("index {index:?} out of bounds for {:?}", self.shape))?;
        self.data[off] = value;
        Ok(())
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        if len != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.data.len()
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts the element type through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::ZERO, |acc, &v| acc + v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference (in `f64`).
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        same_shape(self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        same_shape(self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err!("shape mismatch: {:?} vs {:?}", a.shape, b.shape));
    }
    Ok(())
}

/// Pointwise binary operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Pointwise `a op b` over identically shaped tensors.
pub fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
    same_shape(a, b)?;
    let f: fn(T, T) -> T = match op {
        BinaryOp::Add => |x, y| x + y,
        BinaryOp::Sub => |x, y| x - y,
        BinaryOp::Mul => |x, y| x * y,
    };
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, exec: Exec) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!("matmul inner extents differ: [{m},{k}] x [{k2},{n}]"));
    }
    let mut out = vec![T::ZERO; m * n];
    gemm::nn(exec, m, k, n, &a.data, &b.data, &mut out);
    Ok(Tensor::from_parts_unchecked(vec![m, n], out))
}

/// Row-major GEMM kernels on raw slices. In `nn` and `tn` every output
/// element accumulates its products in ascending order of the shared index,
/// starting from the value already in `c`. `nt` reduces each dot product in
/// eight interleaved lanes combined in a fixed order. Parallel variants split
/// rows of `c` only, so results never depend on [`Exec`].
pub mod gemm {
    use super::*;

    /// Rows of `c` handed to one task.
    const ROW_BLOCK: usize = 8;
    /// Columns of `c` kept hot while sweeping the shared index.
    const COL_BLOCK: usize = 256;
    const LANES: usize = 8;

    /// `sum(x[i] * y[i])` over eight lanes, lane `l` taking `i = l mod 8`.
    #[inline]
    fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
        let mut acc = [T::ZERO; LANES];
        let split = x.len() / LANES * LANES;
        for (xc, yc) in x[..split].chunks_exact(LANES).zip(y[..split].chunks_exact(LANES)) {
            for l in 0..LANES {
                acc[l] += xc[l] * yc[l];
            }
        }
        for (l, (&a, &b)) in x[split..].iter().zip(&y[split..]).enumerate() {
            acc[l] += a * b;
        }
        ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
    }

    /// `c[m,n] += a[m,k] * b[k,n]`.
    pub fn nn<T: Scalar>(exec: Exec, m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let c = &mut c[..m * n];
        let rows = if exec.is_parallel() && m * k * n > 1 << 15 {
            ROW_BLOCK
        } else {
            m
        };
        exec::for_each_chunk(exec, c, rows * n, |blk, cblk| {
            let r0 = blk * rows;
            for (ri, crow) in cblk.chunks_mut(n).enumerate() {
                let arow = &a[(r0 + ri) * k..(r0 + ri + 1) * k];
                for j0 in (0..n).step_by(COL_BLOCK) {
                    let j1 = (j0 + COL_BLOCK).min(n);
                    let cseg = &mut crow[j0..j1];
                    for (t, &av) in arow.iter().enumerate() {
                        let bseg = &b[t * n + j0..t * n + j1];
                        for (cv, &bv) in cseg.iter_mut().zip(bseg) {
                            *cv += av * bv;
                        }
                    }
                }
            }
        });
    }

    /// `c[m,n] += a[m,k] * b[n,k]^T`.
    pub fn nt<T: Scalar>(exec: Exec, m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
        debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
        let c = &mut c[..m * n];
        let rows = if exec.is_parallel() && m * k * n > 1 << 15 {
            ROW_BLOCK
        } else {
            m
        };
        exec::for_each_chunk(exec, c, rows * n, |blk, cblk| {
            let r0 = blk * rows;
            for (ri, crow) in cblk.chunks_mut(n).enumerate() {
                let arow = &a[(r0 + ri) * k..(r0 + ri + 1) * k];
                for (j, cv) in crow.iter_mut().enumerate() {
                    *cv += dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
        });
    }

    /// `c[m,n] += a[k,m]^T * b[k,n]`.
    pub fn tn<T: Scalar>(exec: Exec, m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
        debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
        let c = &mut c[..m * n];
        let rows = if exec.is_parallel() && m * k * n > 1 << 15 {
            ROW_BLOCK
        } else {
            m
        };
        exec::for_each_chunk(exec, c, rows * n, |blk, cblk| {
            let r0 = blk * rows;
            for j0 in (0..n).step_by(COL_BLOCK) {
                let j1 = (j0 + COL_BLOCK).min(n);
                for t in 0..k {
                    let bseg = &b[t * n + j0..t * n + j1];
                    for (ri, crow) in cblk.chunks_mut(n).enumerate() {
                        let av = a[t * m + r0 + ri];
                        for (cv, &bv) in crow[j0..j1].iter_mut().zip(bseg) {
                            *cv += av * bv;
                        }
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        let vals: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape.to_vec(), vals).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a.get(&[i, t]).unwrap() * b.get(&[t, j]).unwrap();
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get(&[1, 0]), Some(3.0));
        let z = Tensor::<f64>::from_vec(vec![3], vec![0.0; 3]).unwrap();
        assert_eq!(z.sum(), 0.0);
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]),
            Err(Error::Construction(_))
        ));
        assert!(Tensor::<f64>::zeros(vec![]).is_err());
        assert!(Tensor::<f64>::zeros(vec![2, 0]).is_err());
        assert!(Shape4::new(1, 0, 2, 2).is_err());
    }

    #[test]
    fn matmul_hand_case_and_identity() {
        let a = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = matmul(&a, &b, Exec::Sequential).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 4], &mut rng);
        let eye = Tensor::eye(3).unwrap();
        assert_eq!(matmul(&eye, &x, Exec::Sequential).unwrap(), x);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (m, k, n) = (
                rng.random_range(1..=8),
                rng.random_range(1..=8),
                rng.random_range(1..=8),
            );
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            let oracle = naive_matmul(&a, &b);
            for exec in [Exec::Sequential, Exec::Parallel] {
                assert_eq!(matmul(&a, &b, exec).unwrap().data(), oracle.as_slice());
            }
        }
        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 6], &mut rng);
        assert_eq!(matmul(&a, &b, Exec::Sequential).unwrap().data(), naive_matmul(&a, &b).as_slice());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]).unwrap();
        let b = Tensor::<f64>::zeros(vec![2, 3]).unwrap();
        assert!(matches!(matmul(&a, &b, Exec::Sequential), Err(Error::Shape(_))));
    }

    #[test]
    fn gemm_transposed_variants_agree_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k, n) = (37, 29, 41);
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let oracle = naive_matmul(&a, &b);
        // b^T stored as [n,k]
        let mut bt = vec![0.0; n * k];
        for t in 0..k {
            for j in 0..n {
                bt[j * k + t] = b.data()[t * n + j];
            }
        }
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for t in 0..k {
                at[t * m + i] = a.data()[i * k + t];
            }
        }
        for exec in [Exec::Sequential, Exec::Parallel] {
            let mut c = vec![0.0; m * n];
            gemm::nt(exec, m, k, n, a.data(), &bt, &mut c);
            for i in 0..m {
                for j in 0..n {
                    let mut lanes = [0.0; 8];
                    for t in 0..k {
                        lanes[t % 8] += a.data()[i * k + t] * bt[j * k + t];
                    }
                    let expect = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
                        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
                    assert_eq!(c[i * n + j], expect);
                    assert!((c[i * n + j] - oracle[i * n + j]).abs() < 1e-12);
                }
            }
            let mut c = vec![0.0; m * n];
            gemm::tn(exec, m, k, n, &at, b.data(), &mut c);
            assert_eq!(c, oracle);
        }
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[3, 4], &mut rng);
        let zeros = a.zeros_like();
        assert_eq!(elementwise(&a, &zeros, BinaryOp::Add).unwrap(), a);
        assert_eq!(elementwise(&a, &a, BinaryOp::Sub).unwrap(), zeros);
        let prod = elementwise(&a, &b, BinaryOp::Mul).unwrap();
        for i in 0..a.len() {
            assert_eq!(prod.data()[i], a.data()[i] * b.data()[i]);
        }
        let c = Tensor::<f64>::zeros(vec![4, 3]).unwrap();
        assert!(elementwise(&a, &c, BinaryOp::Add).is_err());
    }

    #[test]
    fn inputs_not_mutated() {
        let a = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let before = a.clone();
        let _ = elementwise(&a, &a, BinaryOp::Mul).unwrap();
        let _ = matmul(&a, &a, Exec::Parallel).unwrap();
        assert_eq!(a, before);
    }

    proptest::proptest! {
        #[test]
        fn reshape_round_trip(dims in proptest::collection::vec(1usize..5, 1..4)) {
            let len: usize = dims.iter().product();
            let t = Tensor::<f64>::from_vec(dims.clone(), (0..len).map(|v| v as f64).collect()).unwrap();
            let flat = t.reshape(vec![len]).unwrap();
            let back = flat.reshape(dims).unwrap();
            proptest::prop_assert_eq!(back, t);
        }
    }
}
