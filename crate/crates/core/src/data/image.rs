//! Pixel-to-tensor conversion, bilinear resizing and reflect padding.

use crate::error::{Result, ZipError};
use crate::tensor::{Real, Tensor};

use super::RgbImage;

/// `(1, 3, H, W)` tensor with values `v / 255 - 0.5`.
pub fn to_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width, img.height);
    let mut data = vec![T::zero(); 3 * h * w];
    for (p, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = T::from_f64(px[c] as f64 / 255.0 - 0.5);
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data).expect("extent matches buffer")
}

/// Half-pixel-centred bilinear resize of every `(n, c)` plane.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(ZipError::invalid("resize_bilinear", format!("cannot resize {h}x{w} to {out_h}x{out_w}")));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let s = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ty = taps(out_h, h);
    let tx = taps(out_w, w);
    let src = x.data();
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    for plane in 0..n * c {
        let ip = &src[plane * h * w..(plane + 1) * h * w];
        let op = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let a = ip[y0 * w + x0].to_f64();
                let b = ip[y0 * w + x1].to_f64();
                let cc = ip[y1 * w + x0].to_f64();
                let d = ip[y1 * w + x1].to_f64();
                let top = a + (b - a) * fx;
                let bot = cc + (d - cc) * fx;
                op[oy * out_w + ox] = T::from_f64(top + (bot - top) * fy);
            }
        }
    }
    Tensor::from_vec(&[n, c, out_h, out_w], out)
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pads bottom and right by reflection so both extents are multiples of
/// `multiple`. Content stays anchored at the origin.
pub fn pad_to_multiple<T: Real>(x: &Tensor<T>, multiple: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for plane in 0..n * c {
        let ip = &src[plane * h * w..(plane + 1) * h * w];
        for y in 0..ph {
            let row = &ip[reflect(y, h) * w..(reflect(y, h) + 1) * w];
            out.extend((0..pw).map(|xx| row[reflect(xx, w)]));
        }
    }
    Tensor::from_vec(&[n, c, ph, pw], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_and_black_values() {
        let t: Tensor = to_tensor(&RgbImage::filled(2, 3, [128, 128, 128]));
        assert_eq!(t.shape(), &[1, 3, 3, 2]);
        assert!(t.data().iter().all(|&v| (v - (128.0 / 255.0 - 0.5)).abs() < 1e-15));
        assert!((t.data()[0] - 0.00196).abs() < 1e-5);
        let b: Tensor = to_tensor(&RgbImage::filled(1, 1, [0, 0, 0]));
        assert_eq!(b.data(), &[-0.5, -0.5, -0.5]);
    }

    #[test]
    fn channel_first_layout() {
        let img = RgbImage::new(2, 1, vec![0, 51, 255, 255, 0, 0]).unwrap();
        let t: Tensor = to_tensor(&img);
        assert_eq!(t.data(), &[-0.5, 0.5, -0.3, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(resize_bilinear(&x, 2, 3).unwrap(), x);
        let k = Tensor::<f64>::full(&[1, 2, 5, 7], 0.25);
        let r = resize_bilinear(&k, 9, 3).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn resize_doubles_ramp() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 2], &[0.0, 1.0]).unwrap();
        let r = resize_bilinear(&x, 1, 4).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn reflect_padding() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 3], &[1.0, 2.0, 3.0]).unwrap();
        let p = pad_to_multiple(&x, 4).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        assert_eq!(&p.data()[..4], &[1.0, 2.0, 3.0, 2.0]);
        assert_eq!(&p.data()[4..8], &[1.0, 2.0, 3.0, 2.0]);
    }
}
