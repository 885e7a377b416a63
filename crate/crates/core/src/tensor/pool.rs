use super::{Real, Tensor};
use crate::error::{Result, ZipError};
use crate::geometry::BBox;

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of `relu`; zero where the forward input was `<= 0`.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(ZipError::shape("relu_backward", input.shape(), grad_out.shape()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

#[derive(Clone, Debug)]
pub struct MaxPoolOut<T: Real> {
    pub output: Tensor<T>,
    /// Flat input index chosen for every output element.
    pub argmax: Vec<usize>,
}

/// Window max. Ties resolve to the first row-major position in the window.
pub fn maxpool2d<T: Real>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<MaxPoolOut<T>> {
    let (n, c, h, w) = input.dims4()?;
    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
        return Err(ZipError::shape("maxpool2d", input.shape(), &[kernel, kernel]));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * stride * w + j * stride;
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let idx = base + (i * stride + ki) * w + j * stride + kj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(MaxPoolOut {
        output: Tensor::from_vec(&[n, c, oh, ow], out)?,
        argmax,
    })
}

/// Routes each upstream gradient to the recorded argmax of its window.
pub fn maxpool2d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(ZipError::shape("maxpool2d_backward", grad_out.shape(), &[argmax.len()]));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

/// Spatial mean per `(batch, channel)`; output shape `(N, C)`.
pub fn avgpool_global<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    if plane == 0 {
        return Err(ZipError::shape("avgpool_global", input.shape(), &[n, c, 1, 1]));
    }
    let inv = T::one() / T::from_f64(plane as f64);
    let out = input
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[n, c], out)
}

pub fn avgpool_global_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => return Err(ZipError::shape("avgpool_global_backward", input_shape, grad_out.shape())),
    };
    if grad_out.len() != n * c {
        return Err(ZipError::shape("avgpool_global_backward", input_shape, grad_out.shape()));
    }
    let plane = h * w;
    let inv = T::one() / T::from_f64(plane as f64);
    let mut data = Vec::with_capacity(n * c * plane);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::from_vec(input_shape, data)
}

/// One region to pool: a box in image pixels on batch item `batch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiRef {
    pub batch: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug)]
pub struct RoiPoolOut<T: Real> {
    /// `(R, C, gh, gw)`.
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
    /// RoIs that lay entirely outside the feature map and were clamped onto it.
    pub clamped: usize,
}

/// Cell span `[start, end)` of a RoI along one axis, clamped to `[0, extent)`
/// and never empty. Returns whether clamping moved the span onto the map.
fn roi_span(lo: f64, hi: f64, stride: f64, extent: usize) -> (usize, usize, bool) {
    let start = (lo / stride).floor();
    let end = (hi / stride).ceil();
    let outside = end <= 0.0 || start >= extent as f64;
    let s = start.clamp(0.0, (extent - 1) as f64) as usize;
    let e = (end.clamp(0.0, extent as f64) as usize).max(s + 1);
    (s, e, outside)
}

/// Max-pools every RoI into a `gh x gw` grid. Bin `j` of a span of `len`
/// cells covers `[floor(j*len/g), ceil((j+1)*len/g))`, so no bin is empty.
pub fn roi_pool<T: Real>(
    featmap: &Tensor<T>,
    rois: &[RoiRef],
    grid: (usize, usize),
    stride: usize,
) -> Result<RoiPoolOut<T>> {
    let (n, c, h, w) = featmap.dims4()?;
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || stride == 0 || h == 0 || w == 0 {
        return Err(ZipError::invalid("roi_pool", "grid, stride and map extents must be positive"));
    }
    let x = featmap.data();
    let mut out = Vec::with_capacity(rois.len() * c * gh * gw);
    let mut argmax = Vec::with_capacity(out.capacity());
    let mut clamped = 0;
    for roi in rois {
        if roi.batch >= n {
            return Err(ZipError::invalid("roi_pool", format!("batch index {} >= {n}", roi.batch)));
        }
        let s = stride as f64;
        let (y0, y1, out_y) = roi_span(roi.bbox.y1, roi.bbox.y2, s, h);
        let (x0, x1, out_x) = roi_span(roi.bbox.x1, roi.bbox.x2, s, w);
        if out_y || out_x {
            clamped += 1;
        }
        let (rh, rw) = (y1 - y0, x1 - x0);
        for ch in 0..c {
            let base = (roi.batch * c + ch) * h * w;
            for bi in 0..gh {
                let ys = y0 + (bi * rh) / gh;
                let ye = y0 + ((bi + 1) * rh).div_ceil(gh);
                for bj in 0..gw {
                    let xs = x0 + (bj * rw) / gw;
                    let xe = x0 + ((bj + 1) * rw).div_ceil(gw);
                    let mut best = base + ys * w + xs;
                    for yy in ys..ye {
                        for xx in xs..xe {
                            let idx = base + yy * w + xx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok(RoiPoolOut {
        output: Tensor::from_vec(&[rois.len(), c, gh, gw], out)?,
        argmax,
        clamped,
    })
}

/// Scatter-adds pooled gradients into a zeroed map of `featmap_shape`.
pub fn roi_pool_backward<T: Real>(
    featmap_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    maxpool2d_backward(featmap_shape, argmax, grad_out)
}
