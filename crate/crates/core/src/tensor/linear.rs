use super::{Real, Tensor};
use crate::error::{Result, ZipError};

#[derive(Clone, Debug)]
pub struct FcGrads<T: Real> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn rows_and_width<T: Real>(input: &Tensor<T>) -> (usize, usize) {
    let rows = input.shape().first().copied().unwrap_or(0);
    let width = if rows == 0 { 0 } else { input.len() / rows };
    (rows, width)
}

/// Affine map `y = x W^T + b` on the flattened rows of `input`.
/// `weight` is `(out, in)`.
pub fn fc<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, width) = rows_and_width(input);
    let (out, w_in) = match weight.shape() {
        &[o, i] => (o, i),
        s => return Err(ZipError::shape("fc", input.shape(), s)),
    };
    if w_in != width || bias.len() != out {
        return Err(ZipError::shape("fc", input.shape(), weight.shape()));
    }
    let mut y = vec![T::zero(); rows * out];
    for r in 0..rows {
        y[r * out..(r + 1) * out].copy_from_slice(bias.data());
    }
    T::gemm(rows, width, out, T::one(), input.data(), false, weight.data(), true, T::one(), &mut y);
    Tensor::from_vec(&[rows, out], y)
}

pub fn fc_backward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<FcGrads<T>> {
    let (rows, width) = rows_and_width(input);
    let out = weight.shape()[0];
    if grad_out.shape() != [rows, out] {
        return Err(ZipError::shape("fc_backward", grad_out.shape(), &[rows, out]));
    }
    let mut dx = vec![T::zero(); rows * width];
    T::gemm(rows, out, width, T::one(), grad_out.data(), false, weight.data(), false, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); out * width];
    T::gemm(out, rows, width, T::one(), grad_out.data(), true, input.data(), false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); out];
    for r in 0..rows {
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += grad_out.data()[r * out + o];
        }
    }
    Ok(FcGrads {
        input: Tensor::from_vec(input.shape(), dx)?,
        weight: Tensor::from_vec(weight.shape(), dw)?,
        bias: Tensor::from_vec(&[out], db)?,
    })
}
