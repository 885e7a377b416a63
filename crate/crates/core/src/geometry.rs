//! Box algebra in image pixels: overlap, the center/log-size offset
//! parameterization, clamping and greedy suppression.
//!
//! Boxes use corner coordinates with real-valued edges and area
//! `(x2 - x1) * (y2 - y1)`; there is no `+1` pixel correction anywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZipError};

/// Largest log-scale factor applied when decoding, `ln(1000 / 16)`.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

/// Axis-aligned box, corner convention, origin at the top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Zero for inverted boxes.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Square root of the area, the "scale" of a box.
    pub fn scale(&self) -> f64 {
        self.area().sqrt()
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1 && self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, factor: f64) -> BBox {
        BBox::new(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Regression offset: center shift in units of the reference size and log
/// ratio of sizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Offset {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl Offset {
    pub const ZERO: Offset = Offset { tx: 0.0, ty: 0.0, tw: 0.0, th: 0.0 };

    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Offset { tx, ty, tw, th }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Offset::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Intersection over union; 0 for disjoint boxes or an empty union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Row `i`, column `j` holds `iou(a[i], b[j])`.
pub fn iou_matrix(a: &[BBox], b: &[BBox]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|x| b.iter().map(|y| iou(x, y)).collect())
        .collect()
}

pub fn encode_offset(anchor: &BBox, gt: &BBox) -> Offset {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Offset {
        tx: (gx - ax) / aw,
        ty: (gy - ay) / ah,
        tw: (gt.width() / aw).ln(),
        th: (gt.height() / ah).ln(),
    }
}

/// Inverse of [`encode_offset`]; log-scales are clipped at [`MAX_LOG_SCALE`].
pub fn decode_offset(offset: &Offset, anchor: &BBox) -> Result<BBox> {
    if !offset.is_finite() {
        return Err(ZipError::NonFinite("decode_offset"));
    }
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + offset.tx * aw;
    let cy = ay + offset.ty * ah;
    let w = aw * offset.tw.min(MAX_LOG_SCALE).exp();
    let h = ah * offset.th.min(MAX_LOG_SCALE).exp();
    Ok(BBox::from_center(cx, cy, w, h))
}

fn clamp_axis(lo: f64, hi: f64, extent: f64) -> (f64, f64) {
    let lo = lo.clamp(0.0, extent);
    let hi = hi.clamp(0.0, extent);
    if hi - lo >= 1.0 {
        (lo, hi)
    } else {
        // degenerate: one pixel at the clipped location, kept inside
        let start = lo.min(hi).min(extent - 1.0).max(0.0);
        (start, start + 1.0)
    }
}

/// Clips to `[0, width] x [0, height]`; an axis shorter than one pixel after
/// clipping becomes one pixel wide at the clipped location.
pub fn clamp_box(b: &BBox, width: usize, height: usize) -> BBox {
    let (x1, x2) = clamp_axis(b.x1, b.x2, width as f64);
    let (y1, y2) = clamp_axis(b.y1, b.y2, height as f64);
    BBox::new(x1, y1, x2, y2)
}

/// Indices sorted by descending score, ties by ascending index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy suppression: repeatedly keep the best remaining box and drop every
/// box whose IoU with it is strictly greater than `threshold`. Returns kept
/// indices in descending score order.
pub fn nms(boxes: &[BBox], scores: &[f64], threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(ZipError::shape("nms", &[boxes.len()], &[scores.len()]));
    }
    let order = score_order(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        let bi = &boxes[i];
        let area_i = bi.area();
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            let bj = &boxes[j];
            let iw = bi.x2.min(bj.x2) - bi.x1.max(bj.x1);
            let ih = bi.y2.min(bj.y2) - bi.y1.max(bj.y1);
            if iw <= 0.0 || ih <= 0.0 {
                continue;
            }
            let inter = iw * ih;
            let union = area_i + bj.area() - inter;
            if union > 0.0 && (inter / union).min(1.0) > threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}

/// Suppression thresholds of the proposal cascade: within one scale across
/// levels, across scales, and on the refined output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsConfig {
    pub inner: f64,
    pub inter: f64,
    #[serde(rename = "final")]
    pub final_: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            inner: 0.7,
            inter: 0.5,
            final_: 0.7,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("nms.inner", self.inner), ("nms.inter", self.inter), ("nms.final", self.final_)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ZipError::config(field, format!("{v} is outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        let b = BBox::new(5.0, 5.0, 15.0, 15.0);
        assert!((iou(&a, &b) - 25.0 / 175.0).abs() < 1e-15);
    }

    #[test]
    fn iou_matrix_shapes() {
        let a = BBox::new(0.0, 0.0, 4.0, 4.0);
        assert_eq!(iou_matrix(&[a], &[a]), vec![vec![1.0]]);
        let m = iou_matrix(&[a, a], &[]);
        assert_eq!(m.len(), 2);
        assert!(m.iter().all(|r| r.is_empty()));
    }

    #[test]
    fn encode_cases() {
        let a = BBox::new(10.0, 10.0, 30.0, 20.0);
        assert_eq!(encode_offset(&a, &a), Offset::ZERO);
        let wide = BBox::from_center(20.0, 15.0, 40.0, 10.0);
        let t = encode_offset(&a, &wide);
        assert!((t.tw - 2f64.ln()).abs() < 1e-15);
        assert_eq!((t.tx, t.ty, t.th), (0.0, 0.0, 0.0));
    }

    #[test]
    fn decode_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(decode_offset(&Offset::ZERO, &a).unwrap(), a);
        let moved = decode_offset(&Offset::new(1.0, 0.0, 0.0, 0.0), &a).unwrap();
        assert_eq!(moved.center().0, 15.0);
        assert!(decode_offset(&Offset::new(f64::NAN, 0.0, 0.0, 0.0), &a).is_err());
        let huge = decode_offset(&Offset::new(0.0, 0.0, 50.0, 0.0), &a).unwrap();
        assert!((huge.width() - 10.0 * 1000.0 / 16.0).abs() < 1e-9);
    }

    #[test]
    fn max_log_scale_constant() {
        assert!((MAX_LOG_SCALE - (1000.0f64 / 16.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn clamp_cases() {
        let inside = BBox::new(2.0, 3.0, 40.0, 50.0);
        assert_eq!(clamp_box(&inside, 100, 100), inside);
        let right = clamp_box(&BBox::new(90.0, 10.0, 130.0, 20.0), 100, 100);
        assert_eq!(right.x2, 100.0);
        let gone = clamp_box(&BBox::new(300.0, 400.0, 350.0, 420.0), 100, 80);
        assert_eq!(gone, BBox::new(99.0, 79.0, 100.0, 80.0));
        let neg = clamp_box(&BBox::new(-50.0, -50.0, -10.0, -10.0), 100, 80);
        assert_eq!(neg, BBox::new(0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn nms_small_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[a], &[0.3], 0.5).unwrap(), vec![0]);
        assert_eq!(nms(&[a, a], &[0.8, 0.9], 0.5).unwrap(), vec![1]);
        // equal scores: lower index wins
        assert_eq!(nms(&[a, a], &[0.5, 0.5], 0.5).unwrap(), vec![0]);
        // exactly-at-threshold overlap survives
        let b = BBox::new(5.0, 0.0, 15.0, 10.0); // IoU 1/3
        assert_eq!(nms(&[a, b], &[0.9, 0.8], 1.0 / 3.0).unwrap().len(), 2);
        assert!(nms(&[a], &[0.1, 0.2], 0.5).is_err());
    }
}
