use super::{Real, Tensor};
use crate::error::{Result, ZipError};

/// Stride and zero padding of a 2-D convolution. Kernel extents come from
/// the weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeom { stride, padding }
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T: Real> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy)]
struct Im2Col {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Im2Col {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Writes the patch matrix of `img` into columns `off..off + cols()` of
    /// `col`, whose rows are `ld` long.
    fn unfold<T: Real>(&self, img: &[T], col: &mut [T], ld: usize, off: usize) {
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane = &img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * ld + off..row * ld + off + ncols];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        if ih < 0 || ih >= self.height as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.width..(ih as usize + 1) * self.width];
                        for (ow, v) in line.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            *v = if iw < 0 || iw >= self.width as isize {
                                T::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add columns back into an image buffer (adjoint of `unfold`).
    fn fold<T: Real>(&self, col: &[T], img: &mut [T], ld: usize, off: usize) {
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane =
                &mut img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * ld + off..row * ld + off + ncols];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.height as isize {
                            continue;
                        }
                        let dst =
                            &mut plane[ih as usize * self.width..(ih as usize + 1) * self.width];
                        let line = &src[oh * self.out_w..(oh + 1) * self.out_w];
                        for (ow, &v) in line.iter().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw >= 0 && iw < self.width as isize {
                                dst[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Batch items per GEMM: small planes are stacked side by side so each
/// product has at least a few hundred columns.
fn chunk_items(plane: usize, n: usize) -> usize {
    (512 / plane.max(1)).clamp(1, n.max(1))
}

fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(ZipError::shape(op, b.shape(), &[channels]));
        }
    }
    Ok(())
}

fn add_bias<T: Real>(out: &mut [T], bias: Option<&Tensor<T>>, channels: usize, plane: usize) {
    if let Some(b) = bias {
        for (c, &bv) in b.data().iter().enumerate().take(channels) {
            out[c * plane..(c + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
    }
}

fn bias_grad<T: Real>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dy.dims4()?;
    let plane = h * w;
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let off = (b * c + ch) * plane;
            *acc += dy.data()[off..off + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(&[c], db)
}

/// Cross-correlation of `input` `(N, C, H, W)` with `weight` `(O, C, kh, kw)`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let plan = conv_plan(input, weight, geom)?;
    let (n, _, _, _) = input.dims4()?;
    let out_c = weight.shape()[0];
    check_bias("conv2d", bias, out_c)?;
    let in_sz = plan.channels * plan.height * plan.width;
    let out_plane = plan.cols();
    let mut out = vec![T::zero(); n * out_c * out_plane];
    let chunk = chunk_items(out_plane, n);
    let mut col = vec![T::zero(); plan.rows() * out_plane * chunk];
    let mut tmp = vec![T::zero(); out_c * out_plane * chunk];
    for start in (0..n).step_by(chunk) {
        let items = chunk.min(n - start);
        let ld = items * out_plane;
        for i in 0..items {
            let b = start + i;
            plan.unfold(&input.data()[b * in_sz..(b + 1) * in_sz], &mut col, ld, i * out_plane);
        }
        T::gemm(
            out_c,
            plan.rows(),
            ld,
            T::one(),
            weight.data(),
            false,
            &col[..plan.rows() * ld],
            false,
            T::zero(),
            &mut tmp[..out_c * ld],
        );
        for i in 0..items {
            let dst = &mut out[(start + i) * out_c * out_plane..(start + i + 1) * out_c * out_plane];
            for c in 0..out_c {
                dst[c * out_plane..(c + 1) * out_plane]
                    .copy_from_slice(&tmp[c * ld + i * out_plane..c * ld + (i + 1) * out_plane]);
            }
            add_bias(dst, bias, out_c, out_plane);
        }
    }
    Tensor::from_vec(&[n, out_c, plan.out_h, plan.out_w], out)
}

fn conv_plan<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, geom: ConvGeom) -> Result<Im2Col> {
    let (_, c, h, w) = input.dims4()?;
    let (_, wc, kh, kw) = weight
        .dims4()
        .map_err(|_| ZipError::shape("conv2d", input.shape(), weight.shape()))?;
    if wc != c {
        return Err(ZipError::shape("conv2d", input.shape(), weight.shape()));
    }
    let oh = conv_out_extent(h, kh, geom.stride, geom.padding);
    let ow = conv_out_extent(w, kw, geom.stride, geom.padding);
    match (oh, ow) {
        (Some(out_h), Some(out_w)) => Ok(Im2Col {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride: geom.stride,
            pad: geom.padding,
            out_h,
            out_w,
        }),
        _ => Err(ZipError::shape("conv2d", input.shape(), weight.shape())),
    }
}

/// Gradients of `conv2d` given the forward input and upstream gradient.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeom,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let plan = conv_plan(input, weight, geom)?;
    let (n, _, _, _) = input.dims4()?;
    let out_c = weight.shape()[0];
    let expect = [n, out_c, plan.out_h, plan.out_w];
    if grad_out.shape() != expect {
        return Err(ZipError::shape("conv2d_backward", grad_out.shape(), &expect));
    }
    let in_sz = plan.channels * plan.height * plan.width;
    let out_plane = plan.cols();
    let mut dx = vec![T::zero(); input.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let chunk = chunk_items(out_plane, n);
    let mut col = vec![T::zero(); plan.rows() * out_plane * chunk];
    let mut dcol = vec![T::zero(); plan.rows() * out_plane * chunk];
    let mut dy = vec![T::zero(); out_c * out_plane * chunk];
    for start in (0..n).step_by(chunk) {
        let items = chunk.min(n - start);
        let ld = items * out_plane;
        for i in 0..items {
            let b = start + i;
            plan.unfold(&input.data()[b * in_sz..(b + 1) * in_sz], &mut col, ld, i * out_plane);
            let src = &grad_out.data()[b * out_c * out_plane..(b + 1) * out_c * out_plane];
            for c in 0..out_c {
                dy[c * ld + i * out_plane..c * ld + (i + 1) * out_plane]
                    .copy_from_slice(&src[c * out_plane..(c + 1) * out_plane]);
            }
        }
        let (col, dy) = (&col[..plan.rows() * ld], &dy[..out_c * ld]);
        // dW += dY * col^T
        T::gemm(out_c, ld, plan.rows(), T::one(), dy, false, col, true, T::one(), &mut dw);
        // dcol = W^T * dY
        T::gemm(
            plan.rows(),
            out_c,
            ld,
            T::one(),
            weight.data(),
            true,
            dy,
            false,
            T::zero(),
            &mut dcol[..plan.rows() * ld],
        );
        for i in 0..items {
            let b = start + i;
            plan.fold(&dcol, &mut dx[b * in_sz..(b + 1) * in_sz], ld, i * out_plane);
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), dx)?,
        weight: Tensor::from_vec(weight.shape(), dw)?,
        bias: bias_grad(grad_out)?,
    })
}

fn deconv_plan<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, geom: ConvGeom) -> Result<Im2Col> {
    let (_, c, h, w) = input.dims4()?;
    let (wc, out_c, kh, kw) = weight
        .dims4()
        .map_err(|_| ZipError::shape("deconv2d", input.shape(), weight.shape()))?;
    if wc != c || geom.stride == 0 || h == 0 || w == 0 {
        return Err(ZipError::shape("deconv2d", input.shape(), weight.shape()));
    }
    let full_h = (h - 1) * geom.stride + kh;
    let full_w = (w - 1) * geom.stride + kw;
    if full_h <= 2 * geom.padding || full_w <= 2 * geom.padding {
        return Err(ZipError::shape("deconv2d", input.shape(), weight.shape()));
    }
    // The transposed convolution is the adjoint of a convolution that maps
    // the (larger) output image back onto the input grid.
    Ok(Im2Col {
        channels: out_c,
        height: full_h - 2 * geom.padding,
        width: full_w - 2 * geom.padding,
        kh,
        kw,
        stride: geom.stride,
        pad: geom.padding,
        out_h: h,
        out_w: w,
    })
}

/// Transposed convolution of `input` `(N, Cin, H, W)` with `weight`
/// `(Cin, Cout, kh, kw)`. Output extent is `(H - 1) * s - 2p + k`.
pub fn deconv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let plan = deconv_plan(input, weight, geom)?;
    let (n, in_c, h, w) = input.dims4()?;
    let out_c = plan.channels;
    check_bias("deconv2d", bias, out_c)?;
    let in_plane = h * w;
    let out_sz = out_c * plan.height * plan.width;
    let mut out = vec![T::zero(); n * out_sz];
    let mut col = vec![T::zero(); plan.rows() * in_plane];
    for b in 0..n {
        let x = &input.data()[b * in_c * in_plane..(b + 1) * in_c * in_plane];
        // col = W^T * x, W viewed as (Cin, Cout*kh*kw)
        T::gemm(plan.rows(), in_c, in_plane, T::one(), weight.data(), true, x, false, T::zero(), &mut col);
        let dst = &mut out[b * out_sz..(b + 1) * out_sz];
        plan.fold(&col, dst, plan.cols(), 0);
        add_bias(dst, bias, out_c, plan.height * plan.width);
    }
    Tensor::from_vec(&[n, out_c, plan.height, plan.width], out)
}

pub fn deconv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeom,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let plan = deconv_plan(input, weight, geom)?;
    let (n, in_c, h, w) = input.dims4()?;
    let expect = [n, plan.channels, plan.height, plan.width];
    if grad_out.shape() != expect {
        return Err(ZipError::shape("deconv2d_backward", grad_out.shape(), &expect));
    }
    let in_plane = h * w;
    let out_sz = plan.channels * plan.height * plan.width;
    let mut dx = vec![T::zero(); input.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut col = vec![T::zero(); plan.rows() * in_plane];
    for b in 0..n {
        plan.unfold(&grad_out.data()[b * out_sz..(b + 1) * out_sz], &mut col, plan.cols(), 0);
        let x = &input.data()[b * in_c * in_plane..(b + 1) * in_c * in_plane];
        // dx = W * col
        T::gemm(
            in_c,
            plan.rows(),
            in_plane,
            T::one(),
            weight.data(),
            false,
            &col,
            false,
            T::zero(),
            &mut dx[b * in_c * in_plane..(b + 1) * in_c * in_plane],
        );
        // dW += x * col^T
        T::gemm(in_c, in_plane, plan.rows(), T::one(), x, false, &col, true, T::one(), &mut dw);
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), dx)?,
        weight: Tensor::from_vec(weight.shape(), dw)?,
        bias: bias_grad(grad_out)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Six nested loops, no unfolding.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, _, kh, kw) = w.dims4().unwrap();
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for bi in 0..n {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b[oc];
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let y = (i * s + ki) as isize - p as isize;
                                    let xx = (j * s + kj) as isize - p as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                        acc += x.data()[((bi * c + ic) * h + y as usize) * wd + xx as usize]
                                            * w.data()[((oc * c + ic) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bi * o + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, ConvGeom::new(1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[1, 1, 4, 5], &mut rng);
        let w = Tensor::<f64>::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, None, ConvGeom::new(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (s, p) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
            let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
            let b = rand_tensor(&[3], &mut rng);
            let y = conv2d(&x, &w, Some(&b), ConvGeom::new(s, p)).unwrap();
            let r = naive_conv(&x, &w, b.data(), s, p);
            assert_eq!(y.shape(), r.shape());
            for (a, e) in y.data().iter().zip(r.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_names_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 2, 5, 5]);
        let w = Tensor::<f64>::zeros(&[3, 4, 3, 3]);
        let err = conv2d(&x, &w, None, ConvGeom::new(1, 0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 5, 5]") && msg.contains("[3, 4, 3, 3]"), "{msg}");
    }

    #[test]
    fn deconv_stamps_kernel() {
        let x = Tensor::<f64>::full(&[1, 1, 1, 1], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let y = deconv2d(&x, &w, None, ConvGeom::new(2, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deconv_extent() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[3, 2, 2, 2]);
        let y = deconv2d(&x, &w, None, ConvGeom::new(2, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 8, 8]);
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, p) in [(3, 1, 1), (2, 2, 0), (1, 1, 0), (4, 2, 1)] {
            let x = rand_tensor(&[1, 1, 6, 6], &mut rng);
            let w = rand_tensor(&[1, 1, k, k], &mut rng);
            let g = ConvGeom::new(s, p);
            let cx = conv2d(&x, &w, None, g).unwrap();
            let y = rand_tensor(cx.shape(), &mut rng);
            let dy = deconv2d(&y, &w, None, g).unwrap();
            assert_eq!(dy.shape(), x.shape(), "k={k} s={s} p={p}");
            let lhs = cx.dot(&y);
            let rhs = x.dot(&dy);
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }
}
