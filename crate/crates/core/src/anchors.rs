//! Anchor templates, their split into per-level clusters, grid tiling,
//! data-driven aspect ratios and the dynamic training scale.
//!
//! Levels are 0-based in code: level 0 is the finest map (stride 8).
//! Aspect ratio is always width / height.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZipError};
use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorTemplate {
    /// Square root of the template area, in pixels.
    pub scale: f64,
    /// Width over height.
    pub ratio: f64,
}

impl AnchorTemplate {
    pub fn width(&self) -> f64 {
        self.scale * self.ratio.sqrt()
    }

    pub fn height(&self) -> f64 {
        self.scale / self.ratio.sqrt()
    }

    pub fn at(&self, cx: f64, cy: f64) -> BBox {
        BBox::from_center(cx, cy, self.width(), self.height())
    }
}

/// Scale-major Cartesian product of `scales` and `ratios`.
pub fn make_templates(scales: &[f64], ratios: &[f64]) -> Result<Vec<AnchorTemplate>> {
    if scales.iter().chain(ratios).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(ZipError::invalid("make_templates", "scales and ratios must be positive"));
    }
    Ok(scales
        .iter()
        .flat_map(|&scale| ratios.iter().map(move |&ratio| AnchorTemplate { scale, ratio }))
        .collect())
}

/// Scale range `[min, max]` covered by each level's cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRanges(pub Vec<[f64; 2]>);

impl Default for LevelRanges {
    fn default() -> Self {
        LevelRanges(vec![[16.0, 32.0], [64.0, 128.0], [256.0, 512.0]])
    }
}

impl LevelRanges {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Level owning a box or template of the given scale. Boundaries sit
    /// halfway between neighbouring ranges (48 and 192 by default).
    pub fn level_of(&self, scale: f64) -> usize {
        let last = self.0.len().saturating_sub(1);
        for m in 0..last {
            let cut = 0.5 * (self.0[m][1] + self.0[m + 1][0]);
            if scale < cut {
                return m;
            }
        }
        last
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(ZipError::config("anchors.level_ranges", "at least one level required"));
        }
        for (m, r) in self.0.iter().enumerate() {
            if !(r[0] > 0.0 && r[1] >= r[0]) {
                return Err(ZipError::config("anchors.level_ranges", format!("level {m} range {r:?} invalid")));
            }
            if m > 0 && self.0[m - 1][1] >= r[0] {
                return Err(ZipError::config("anchors.level_ranges", "ranges must be increasing"));
            }
        }
        Ok(())
    }
}

/// Splits templates into one cluster per level by scale.
pub fn cluster_by_level(templates: &[AnchorTemplate], ranges: &LevelRanges) -> Vec<Vec<AnchorTemplate>> {
    let mut clusters = vec![Vec::new(); ranges.len()];
    for t in templates {
        clusters[ranges.level_of(t.scale)].push(*t);
    }
    clusters
}

/// Anchors of one level tiled over a feature map.
#[derive(Clone, Debug)]
pub struct AnchorGrid {
    pub level: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub templates: Vec<AnchorTemplate>,
    /// Index `(i * width + j) * templates.len() + a` for cell `(i, j)`.
    pub boxes: Vec<BBox>,
}

impl AnchorGrid {
    pub fn per_cell(&self) -> usize {
        self.templates.len()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// `(row, col, template)` of a flat anchor index.
    pub fn locate(&self, index: usize) -> (usize, usize, usize) {
        let a = self.per_cell();
        let cell = index / a;
        (cell / self.width, cell % self.width, index % a)
    }
}

/// Places every template at each cell center `((j + 0.5) s, (i + 0.5) s)`.
/// Anchors are not clipped to the image.
pub fn generate_grid(
    level: usize,
    fh: usize,
    fw: usize,
    stride: usize,
    templates: &[AnchorTemplate],
) -> AnchorGrid {
    let s = stride as f64;
    let mut boxes = Vec::with_capacity(fh * fw * templates.len());
    for i in 0..fh {
        for j in 0..fw {
            let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
            boxes.extend(templates.iter().map(|t| t.at(cx, cy)));
        }
    }
    AnchorGrid {
        level,
        stride,
        height: fh,
        width: fw,
        templates: templates.to_vec(),
        boxes,
    }
}

pub const RATIO_QUANTILES: [f64; 5] = [0.02, 0.25, 0.5, 0.75, 0.98];

/// Element of the sorted sample at rank `round(q * (n - 1))`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Width/height quantiles {2, 25, 50, 75, 98}% of the ground-truth boxes,
/// used as a data-driven ratio set.
pub fn fit_ratio_stats(boxes: &[BBox]) -> Result<Vec<f64>> {
    let mut ratios: Vec<f64> = boxes
        .iter()
        .filter(|b| b.is_valid())
        .map(|b| b.width() / b.height())
        .collect();
    if ratios.is_empty() {
        return Err(ZipError::Data("fit_ratio_stats: no annotations".into()));
    }
    ratios.sort_by(f64::total_cmp);
    Ok(RATIO_QUANTILES.iter().map(|&q| quantile_sorted(&ratios, q)).collect())
}

/// Limits on the resized training image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainScaleLimits {
    pub min_side: f64,
    pub max_side: f64,
}

impl Default for TrainScaleLimits {
    fn default() -> Self {
        TrainScaleLimits {
            min_side: 64.0,
            max_side: 320.0,
        }
    }
}

/// The outcome of [`choose_train_scale`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainScale {
    pub factor: f64,
    pub gt_index: Option<usize>,
    pub level: usize,
    /// Whether the side limits changed the factor.
    pub clamped: bool,
}

/// Resize factor that lands one randomly chosen ground truth uniformly
/// inside the scale range of one randomly chosen level, then limited so the
/// longer resized side stays within `limits`.
pub fn choose_train_scale<R: Rng + ?Sized>(
    gts: &[BBox],
    image_w: usize,
    image_h: usize,
    ranges: &LevelRanges,
    limits: TrainScaleLimits,
    forced_level: Option<usize>,
    rng: &mut R,
) -> TrainScale {
    let long = image_w.max(image_h) as f64;
    let lo = limits.min_side / long;
    let hi = limits.max_side / long;
    let valid: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].area() > 0.0).collect();
    if valid.is_empty() {
        return TrainScale {
            factor: 1.0f64.clamp(lo, hi),
            gt_index: None,
            level: 0,
            clamped: !(lo..=hi).contains(&1.0),
        };
    }
    let gi = valid[rng.random_range(0..valid.len())];
    let level = forced_level.unwrap_or_else(|| rng.random_range(0..ranges.len()));
    let [smin, smax] = ranges.0[level];
    let target = if smax > smin {
        rng.random_range(smin..=smax)
    } else {
        smin
    };
    let raw = target / gts[gi].scale();
    let factor = raw.clamp(lo, hi);
    TrainScale {
        factor,
        gt_index: Some(gi),
        level,
        clamped: factor != raw,
    }
}

/// Summary printed by the anchor statistics command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorStats {
    pub ratio_quantiles: Vec<f64>,
    /// Counts of ground-truth scales in octave bins `[lo, hi)`.
    pub scale_histogram: Vec<ScaleBin>,
    /// Per level, ground truths reaching positive IoU with at least one of
    /// its anchors at native image size.
    pub per_level_counts: Vec<usize>,
    pub uncovered: usize,
    pub total_gts: usize,
}

/// Ratio quantiles, scale histogram and per-level anchor coverage. Each
/// image is `(width, height, gts)`; a level's map extent is the padded
/// image extent over its stride, with `pad` the padding multiple.
pub fn anchor_stats(
    images: &[(usize, usize, Vec<BBox>)],
    clusters: &[Vec<AnchorTemplate>],
    strides: &[usize],
    pad: usize,
    positive: f64,
) -> Result<AnchorStats> {
    let all: Vec<BBox> = images.iter().flat_map(|(_, _, g)| g.iter().copied()).collect();
    let mut per_level_counts = vec![0; clusters.len()];
    let mut uncovered = 0;
    for (w, h, gts) in images {
        let (pw, ph) = (w.div_ceil(pad) * pad, h.div_ceil(pad) * pad);
        let grids: Vec<AnchorGrid> = clusters
            .iter()
            .zip(strides)
            .enumerate()
            .map(|(m, (t, &s))| generate_grid(m, ph / s, pw / s, s, t))
            .collect();
        for gt in gts {
            let mut hit = false;
            for (m, grid) in grids.iter().enumerate() {
                if grid.boxes.iter().any(|a| crate::geometry::iou(a, gt) >= positive) {
                    per_level_counts[m] += 1;
                    hit = true;
                }
            }
            if !hit {
                uncovered += 1;
            }
        }
    }
    Ok(AnchorStats {
        ratio_quantiles: fit_ratio_stats(&all)?,
        scale_histogram: scale_histogram(&all),
        per_level_counts,
        uncovered,
        total_gts: all.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Octave bins 0-8, 8-16, ..., 512-1024, 1024+.
pub fn scale_histogram(boxes: &[BBox]) -> Vec<ScaleBin> {
    let mut edges = vec![0.0];
    let mut e = 8.0;
    while e <= 1024.0 {
        edges.push(e);
        e *= 2.0;
    }
    edges.push(f64::INFINITY);
    let mut bins: Vec<ScaleBin> = edges
        .windows(2)
        .map(|w| ScaleBin { lo: w[0], hi: w[1], count: 0 })
        .collect();
    for b in boxes {
        let s = b.scale();
        if let Some(bin) = bins.iter_mut().find(|bin| s >= bin.lo && s < bin.hi) {
            bin.count += 1;
        }
    }
    bins
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SCALES: [f64; 6] = [16.0, 32.0, 64.0, 128.0, 256.0, 512.0];
    const RATIOS: [f64; 5] = [0.15, 0.5, 1.0, 2.0, 6.7];

    #[test]
    fn default_template_set() {
        let t = make_templates(&SCALES, &RATIOS).unwrap();
        assert_eq!(t.len(), 30);
        for a in &t {
            assert!((a.width() * a.height() - a.scale * a.scale).abs() < 1e-9);
        }
        let sq = AnchorTemplate { scale: 16.0, ratio: 1.0 };
        assert_eq!((sq.width(), sq.height()), (16.0, 16.0));
        let wide = AnchorTemplate { scale: 32.0, ratio: 4.0 };
        assert_eq!((wide.width(), wide.height()), (64.0, 16.0));
        assert!(make_templates(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn clusters() {
        let ranges = LevelRanges::default();
        let t = make_templates(&SCALES, &RATIOS).unwrap();
        let c = cluster_by_level(&t, &ranges);
        assert_eq!(c.iter().map(Vec::len).collect::<Vec<_>>(), vec![10, 10, 10]);
        assert!(c[0].iter().all(|a| a.scale <= 32.0));
        assert!(c[2].iter().all(|a| a.scale >= 256.0));
        let single = make_templates(&[16.0], &RATIOS).unwrap();
        assert_eq!(cluster_by_level(&single, &ranges)[0].len(), 5);
        assert_eq!(ranges.level_of(64.0), 1);
        assert_eq!(ranges.level_of(47.9), 0);
        assert_eq!(ranges.level_of(48.0), 1);
        assert_eq!(ranges.level_of(192.0), 2);
    }

    #[test]
    fn grid_layout() {
        let one = [AnchorTemplate { scale: 16.0, ratio: 1.0 }];
        let g = generate_grid(0, 1, 1, 8, &one);
        assert_eq!(g.boxes, vec![BBox::new(-4.0, -4.0, 12.0, 12.0)]);
        let t = make_templates(&SCALES[..2], &RATIOS).unwrap();
        let g = generate_grid(0, 4, 4, 8, &t);
        assert_eq!(g.len(), 160);
        let c0 = g.boxes[0].center();
        let c1 = g.boxes[10].center();
        assert_eq!(c1.0 - c0.0, 8.0);
        assert_eq!(g.locate(10 * 5 + 3), (1, 1, 3));
    }

    #[test]
    fn ratio_stats() {
        let sq: Vec<BBox> = (0..7).map(|i| BBox::new(0.0, 0.0, 5.0 + i as f64, 5.0 + i as f64)).collect();
        assert_eq!(fit_ratio_stats(&sq).unwrap(), vec![1.0; 5]);
        assert!(fit_ratio_stats(&[]).is_err());
    }

    #[test]
    fn train_scale_interval() {
        let ranges = LevelRanges::default();
        let limits = TrainScaleLimits { min_side: 1.0, max_side: 1e6 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt16 = [BBox::new(10.0, 10.0, 26.0, 26.0)];
        let gt64 = [BBox::new(10.0, 10.0, 74.0, 74.0)];
        for _ in 0..200 {
            let s = choose_train_scale(&gt16, 200, 200, &ranges, limits, Some(0), &mut rng);
            assert!((1.0..=2.0).contains(&s.factor));
            let s = choose_train_scale(&gt64, 200, 200, &ranges, limits, Some(1), &mut rng);
            assert!((1.0..=2.0).contains(&s.factor));
        }
        let tight = TrainScaleLimits { min_side: 64.0, max_side: 256.0 };
        let s = choose_train_scale(&gt16, 200, 200, &ranges, tight, Some(2), &mut rng);
        assert!(s.clamped);
        assert!((s.factor * 200.0 - 256.0).abs() < 1e-9);
    }
}
