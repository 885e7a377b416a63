//! Dense tensors with hand-written forward/backward kernels.
//!
//! There is no tape: every differentiable op exposes a forward function and a
//! matching backward function, and callers keep whatever forward inputs the
//! backward needs. The network composes these in a fixed order.

mod checkpoint;
mod conv;
pub mod gradcheck;
mod linear;
mod loss;
mod norm;
mod optim;
mod pool;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use crate::error::{Result, ZipError};

pub use checkpoint::{read_checkpoint, write_checkpoint, NamedTensor, CHECKPOINT_MAGIC};
pub use conv::{conv2d, conv2d_backward, deconv2d, deconv2d_backward, ConvGeom, ConvGrads};
pub use linear::{fc, fc_backward, FcGrads};
pub use loss::{smooth_l1, smooth_l1_backward, smooth_l1_value, softmax_rows, softmax_xent, softmax_xent_backward};
pub use norm::{batchnorm2d, batchnorm2d_backward, BnCache, BnGrads, BnMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use optim::{sgd_step, SgdConfig};
pub use pool::{
    avgpool_global, avgpool_global_backward, maxpool2d, maxpool2d_backward, relu, relu_backward,
    roi_pool, roi_pool_backward, MaxPoolOut, RoiPoolOut, RoiRef,
};

/// Floating-point element type. Implemented for `f64` (default) and `f32`.
pub trait Real:
    num_like::Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c <- alpha * op(a) * op(b) + beta * c` for row-major buffers, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );
}

/// The handful of float operations the kernels need, kept local so the
/// crate does not depend on a numeric-traits package.
pub mod num_like {
    use std::ops::{Add, Div, Mul, Neg, Sub};

    pub trait Float:
        Copy
        + PartialOrd
        + Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
    {
        fn zero() -> Self;
        fn one() -> Self;
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn sqrt(self) -> Self;
        fn abs(self) -> Self;
        fn max(self, other: Self) -> Self;
        fn min(self, other: Self) -> Self;
        fn is_finite(self) -> bool;
    }

    macro_rules! impl_float {
        ($t:ty) => {
            impl Float for $t {
                #[inline]
                fn zero() -> Self {
                    0.0
                }
                #[inline]
                fn one() -> Self {
                    1.0
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
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                #[inline]
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
                #[inline]
                fn min(self, other: Self) -> Self {
                    <$t>::min(self, other)
                }
                #[inline]
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
            }
        };
    }
    impl_float!(f32);
    impl_float!(f64);
}

/// Row/column strides of `op(x)` where `x` is a row-major buffer holding an
/// `rows x cols` matrix (`rows x cols` is the shape of `op(x)`).
#[inline]
fn op_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        a_trans: bool,
        b: &[f64],
        b_trans: bool,
        beta: f64,
        c: &mut [f64],
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let (rsa, csa) = op_strides(m, k, a_trans);
        let (rsb, csb) = op_strides(k, n, b_trans);
        // SAFETY: bounds asserted above; strides describe the stated layouts.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        a_trans: bool,
        b: &[f32],
        b_trans: bool,
        beta: f32,
        c: &mut [f32],
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let (rsa, csa) = op_strides(m, k, a_trans);
        let (rsb, csb) = op_strides(k, n, b_trans);
        // SAFETY: bounds asserted above; strides describe the stated layouts.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// Dense row-major array of up to four dimensions with an optional gradient
/// buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.len() > 4 {
            return Err(ZipError::shape("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.len() > 4 {
            return Err(ZipError::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(n, c, h, w)` view of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(ZipError::shape("dims4", &self.shape, &[0, 0, 0, 0])),
        }
    }

    /// Checked mode: error on the first NaN/Inf.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(ZipError::NonFinite(op))
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(ZipError::shape("add", &self.shape, &other.shape));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn dot(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }

    /// Copy of batch item `i` of a rank-4 tensor, as a batch of one.
    pub fn batch_item(&self, i: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if i >= n {
            return Err(ZipError::invalid("batch_item", format!("index {i} >= batch {n}")));
        }
        let sz = c * h * w;
        Tensor::from_vec(&[1, c, h, w], self.data[i * sz..(i + 1) * sz].to_vec())
    }
}

/// A trainable tensor with its gradient and momentum buffers.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real = f64> {
    pub name: String,
    pub tensor: Tensor<T>,
    momentum: Vec<T>,
    pub weight_decay: bool,
    /// Frozen parameters keep their value through `sgd_step`.
    pub frozen: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, mut tensor: Tensor<T>, weight_decay: bool) -> Self {
        tensor.grad_mut();
        let n = tensor.len();
        Parameter {
            name: name.into(),
            tensor,
            momentum: vec![T::zero(); n],
            weight_decay,
            frozen: false,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize], weight_decay: bool) -> Self {
        Self::new(name, Tensor::zeros(shape), weight_decay)
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn grad(&self) -> &[T] {
        self.tensor.grad().expect("parameter gradient buffer")
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        self.tensor.grad_mut()
    }

    pub fn momentum(&self) -> &[T] {
        &self.momentum
    }

    pub fn momentum_mut(&mut self) -> &mut [T] {
        &mut self.momentum
    }

    /// Add `g` elementwise into the gradient buffer.
    pub fn accumulate(&mut self, g: &[T]) {
        let buf = self.tensor.grad_mut();
        debug_assert_eq!(buf.len(), g.len());
        buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
    }

    pub fn zero_grad(&mut self) {
        self.tensor.zero_grad();
    }

    pub fn set_values(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.tensor.len() {
            return Err(ZipError::shape("set_values", self.tensor.shape(), &[values.len()]));
        }
        self.tensor.data_mut().copy_from_slice(values);
        Ok(())
    }
}
