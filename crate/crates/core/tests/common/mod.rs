//! Naive reference implementations shared by the oracle, property and
//! acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use zipnet::geometry::BBox;

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Quadratic greedy suppression over a full pairwise matrix.
pub fn nms_ref(boxes: &[BBox], scores: &[f64], t: f64) -> Vec<usize> {
    let n = boxes.len();
    let m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| iou_ref(&boxes[i], &boxes[j])).collect()).collect();
    let mut alive = vec![true; n];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for j in 0..n {
            if m[b][j] > t {
                alive[j] = false;
            }
        }
    }
    kept
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f64) -> BBox {
    let x1 = rng.random_range(0.0..extent * 0.9);
    let y1 = rng.random_range(0.0..extent * 0.9);
    let w = rng.random_range(1.0..extent * 0.5);
    let h = rng.random_range(1.0..extent * 0.5);
    BBox::new(x1, y1, (x1 + w).min(extent), (y1 + h).min(extent))
}

/// `(N, O, OH, OW)` by seven nested loops.
pub fn conv_ref(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [o, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let y = (i * stride + ki) as isize - pad as isize;
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += x[((b * c + ic) * h + y as usize) * wd + xx as usize]
                                    * w[((oc * c + ic) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

pub fn maxpool_ref(x: &[f64], xs: [usize; 4], k: usize, s: usize) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut out = Vec::new();
    for p in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for a in 0..k {
                    for b in 0..k {
                        m = m.max(x[p * h * w + (i * s + a) * w + j * s + b]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Max over the cells assigned to each bin, found by scanning the whole map
/// and testing membership with real-valued bin edges.
pub fn roi_pool_ref(x: &[f64], xs: [usize; 4], b: &BBox, grid: (usize, usize), stride: f64) -> Vec<f64> {
    let [_, c, h, w] = xs;
    let span = |lo: f64, hi: f64, ext: usize| -> (usize, usize) {
        let s = ((lo / stride).floor().max(0.0) as usize).min(ext - 1);
        let e = ((hi / stride).ceil().clamp(0.0, ext as f64) as usize).max(s + 1);
        (s, e)
    };
    let (y0, y1) = span(b.y1, b.y2, h);
    let (x0, x1) = span(b.x1, b.x2, w);
    let (rh, rw) = ((y1 - y0) as f64, (x1 - x0) as f64);
    let mut out = Vec::new();
    for ch in 0..c {
        for bi in 0..grid.0 {
            let (lo_y, hi_y) = ((bi as f64 * rh / grid.0 as f64).floor(), ((bi + 1) as f64 * rh / grid.0 as f64).ceil());
            for bj in 0..grid.1 {
                let (lo_x, hi_x) =
                    ((bj as f64 * rw / grid.1 as f64).floor(), ((bj + 1) as f64 * rw / grid.1 as f64).ceil());
                let mut m = f64::NEG_INFINITY;
                for yy in 0..h {
                    for xx in 0..w {
                        let (ry, rx) = (yy as f64 - y0 as f64, xx as f64 - x0 as f64);
                        if ry >= lo_y && ry < hi_y && rx >= lo_x && rx < hi_x {
                            m = m.max(x[(ch * h + yy) * w + xx]);
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Fraction of all ground truths (pooled over images) whose best overlap
/// with the `k` highest-scored proposals reaches `t`.
pub fn recall_ref(images: &[(Vec<BBox>, Vec<(BBox, f64)>)], t: f64, k: usize) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (gts, props) in images {
        let mut sorted = props.clone();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        sorted.truncate(k);
        for g in gts {
            total += 1;
            if sorted.iter().any(|(p, _)| iou_ref(g, p) >= t) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

pub fn ar_ref(images: &[(Vec<BBox>, Vec<(BBox, f64)>)], k: usize) -> f64 {
    (0..10).map(|i| recall_ref(images, (50 + 5 * i) as f64 / 100.0, k)).sum::<f64>() / 10.0
}

pub mod eval_props {
    use proptest::prelude::*;
    use zipnet::eval::{average_recall, iou_grid, recall_at};
    use zipnet::geometry::BBox;

    pub fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..90.0f64, 0.0..90.0f64, 1.0..60.0f64, 1.0..60.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    pub fn arb_case() -> impl Strategy<Value = (Vec<BBox>, Vec<(BBox, f64)>)> {
        (
            prop::collection::vec(arb_box(), 0..6),
            prop::collection::vec((arb_box(), 0.0..1.0f64), 0..30),
        )
    }

    /// Monotonicity in IoU threshold and budget, range, the grid-mean
    /// identity and invariance to proposal order.
    pub fn check(gts: &[BBox], props: &[(BBox, f64)]) -> Result<(), String> {
        let grid = iou_grid();
        for k in [1usize, 3, 10, 1000] {
            let r: Vec<f64> = grid.iter().map(|&t| recall_at(gts, props, t, k)).collect();
            if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("recall out of range {r:?}"));
            }
            if r.windows(2).any(|w| w[1] > w[0]) {
                return Err(format!("recall increases with IoU at k={k}: {r:?}"));
            }
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            if (average_recall(gts, props, k) - mean).abs() > 1e-12 {
                return Err(format!("AR differs from grid mean at k={k}"));
            }
        }
        for &t in &grid {
            let mut prev = 0.0;
            for k in 0..=props.len() + 1 {
                let r = recall_at(gts, props, t, k);
                if r + 1e-15 < prev && !gts.is_empty() {
                    return Err(format!("recall decreases with budget at t={t} k={k}"));
                }
                prev = r;
            }
        }
        let mut rev = props.to_vec();
        rev.reverse();
        if average_recall(gts, &rev, 5) != average_recall(gts, props, 5) {
            return Err("AR depends on input order".into());
        }
        Ok(())
    }
}

/// Oracle comparisons as fallible checks, shared by the oracle tests and the
/// acceptance run. Each returns a short summary on success.
pub mod oracle_checks {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use zipnet::eval::{dataset_average_recall, dataset_recall, EvalImage};
    use zipnet::geometry::nms;
    use zipnet::tensor::{conv2d, maxpool2d, roi_pool, ConvGeom, RoiRef, Tensor};

    pub type Check = Result<String, String>;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::<f64>::from_vec(shape, v).unwrap()
    }

    pub fn nms_instances(instances: usize, boxes_per: usize) -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for inst in 0..instances {
            let boxes: Vec<BBox> = (0..boxes_per).map(|_| random_box(&mut rng, 100.0)).collect();
            // coarse scores force ties
            let scores: Vec<f64> = (0..boxes_per).map(|_| (rng.random_range(0..50) as f64) / 50.0).collect();
            let thr = [0.3, 0.5, 0.7][inst % 3];
            let got = nms(&boxes, &scores, thr).map_err(|e| e.to_string())?;
            if got != nms_ref(&boxes, &scores, thr) {
                return Err(format!("nms instance {inst} differs"));
            }
        }
        Ok(format!("nms {instances}x{boxes_per} exact"))
    }

    pub fn conv_cases() -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // (N, C, H, W, O, k, stride, pad); the batched case exercises column chunking
        let cases = [
            (1, 3, 9, 7, 4, 3, 1, 1),
            (2, 2, 8, 8, 3, 3, 2, 1),
            (40, 5, 3, 3, 6, 3, 1, 1),
            (3, 4, 5, 6, 2, 1, 1, 0),
            (1, 1, 6, 6, 2, 2, 2, 0),
        ];
        let mut worst: f64 = 0.0;
        for (n, c, h, w, o, k, s, p) in cases {
            let x = rand_vec(n * c * h * w, &mut rng);
            let wt = rand_vec(o * c * k * k, &mut rng);
            let b = rand_vec(o, &mut rng);
            let got = conv2d(&t(&[n, c, h, w], x.clone()), &t(&[o, c, k, k], wt.clone()), Some(&t(&[o], b.clone())), ConvGeom::new(s, p))
                .map_err(|e| e.to_string())?;
            let (want, shape) = conv_ref(&x, [n, c, h, w], &wt, [o, c, k, k], Some(&b), s, p);
            if got.shape() != shape {
                return Err(format!("conv shape {:?} vs {shape:?}", got.shape()));
            }
            worst = worst.max(max_abs_diff(got.data(), &want));
        }
        if worst < 1e-12 {
            Ok(format!("conv2d max diff {worst:.1e}"))
        } else {
            Err(format!("conv2d max diff {worst:.1e}"))
        }
    }

    pub fn maxpool_cases() -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst: f64 = 0.0;
        for (n, c, h, w, k, s) in [(1, 2, 8, 8, 2, 2), (2, 3, 7, 9, 3, 2), (1, 1, 5, 5, 2, 1)] {
            let x = rand_vec(n * c * h * w, &mut rng);
            let got = maxpool2d(&t(&[n, c, h, w], x.clone()), k, s).map_err(|e| e.to_string())?;
            worst = worst.max(max_abs_diff(got.output.data(), &maxpool_ref(&x, [n, c, h, w], k, s)));
        }
        if worst < 1e-12 {
            Ok(format!("maxpool max diff {worst:.1e}"))
        } else {
            Err(format!("maxpool max diff {worst:.1e}"))
        }
    }

    pub fn roi_pool_cases() -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, h, w, stride) = (3, 9, 11, 8.0);
        let x = rand_vec(c * h * w, &mut rng);
        let xt = t(&[1, c, h, w], x.clone());
        let mut boxes: Vec<BBox> = (0..60).map(|_| random_box(&mut rng, 88.0)).collect();
        boxes.push(BBox::new(-40.0, -30.0, -5.0, -2.0));
        boxes.push(BBox::new(500.0, 10.0, 600.0, 50.0));
        boxes.push(BBox::new(3.0, 3.0, 3.5, 3.5));
        let outside = |lo: f64, hi: f64, ext: usize| (hi / stride).ceil() <= 0.0 || (lo / stride).floor() >= ext as f64;
        let expect = boxes.iter().filter(|b| outside(b.x1, b.x2, w) || outside(b.y1, b.y2, h)).count();
        let mut worst: f64 = 0.0;
        for grid in [(3, 3), (2, 4), (7, 7)] {
            let rois: Vec<RoiRef> = boxes.iter().map(|&bbox| RoiRef { batch: 0, bbox }).collect();
            let got = roi_pool(&xt, &rois, grid, stride as usize).map_err(|e| e.to_string())?;
            if got.clamped != expect {
                return Err(format!("clamped {} boxes, expected {expect}", got.clamped));
            }
            let cell = c * grid.0 * grid.1;
            for (i, b) in boxes.iter().enumerate() {
                let want = roi_pool_ref(&x, [1, c, h, w], b, grid, stride);
                worst = worst.max(max_abs_diff(&got.output.data()[i * cell..(i + 1) * cell], &want));
            }
        }
        if worst < 1e-12 && expect >= 2 {
            Ok(format!("roi_pool max diff {worst:.1e}, {expect} clamped"))
        } else {
            Err(format!("roi_pool max diff {worst:.1e}, {expect} clamped"))
        }
    }

    pub fn recall_datasets(count: usize) -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst: f64 = 0.0;
        for _ in 0..count {
            let data: Vec<(Vec<BBox>, Vec<(BBox, f64)>)> = (0..5)
                .map(|_| {
                    let gts = (0..rng.random_range(0..6)).map(|_| random_box(&mut rng, 64.0)).collect();
                    let props = (0..rng.random_range(0..40))
                        .map(|_| (random_box(&mut rng, 64.0), rng.random::<f64>()))
                        .collect();
                    (gts, props)
                })
                .collect();
            let images: Vec<EvalImage> = data
                .iter()
                .enumerate()
                .map(|(i, (g, p))| EvalImage {
                    image_id: i.to_string(),
                    gts: g.clone(),
                    proposals: p.clone(),
                })
                .collect();
            for k in [1, 5, 10, 100] {
                for thr in [0.5, 0.7, 0.95] {
                    worst = worst.max((dataset_recall(&images, thr, k) - recall_ref(&data, thr, k)).abs());
                }
                worst = worst.max((dataset_average_recall(&images, k) - ar_ref(&data, k)).abs());
            }
        }
        if worst < 1e-12 {
            Ok(format!("recall/AR on {count} datasets, max diff {worst:.1e}"))
        } else {
            Err(format!("recall/AR max diff {worst:.1e}"))
        }
    }
}
