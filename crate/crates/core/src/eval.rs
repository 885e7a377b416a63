//! Proposal recall, average recall and size-bucketed AR.
//!
//! Matching is many-to-one: a ground truth counts as recalled when its best
//! overlap among the top-k proposals reaches the threshold, regardless of
//! which other ground truths that proposal also covers. Dataset figures are
//! pooled over every ground truth of every image.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZipError};
use crate::geometry::{clamp_box, iou, BBox};

pub const DEFAULT_BUDGETS: [usize; 5] = [10, 100, 300, 500, 1000];
pub const SIZE_BUDGET: usize = 100;
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const LARGE_AREA: f64 = 96.0 * 96.0;

/// `0.50, 0.55, ..., 0.95`.
pub fn iou_grid() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Ground truth and scored proposals of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalImage {
    pub image_id: String,
    pub gts: Vec<BBox>,
    pub proposals: Vec<(BBox, f64)>,
}

fn proposal_cmp(a: &(BBox, f64), b: &(BBox, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| {
        a.0.as_array()
            .iter()
            .zip(b.0.as_array().iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// The `topk` highest-scored proposals. Ties are broken by coordinates, so
/// the selection does not depend on input order.
pub fn top_k(proposals: &[(BBox, f64)], topk: usize) -> Vec<BBox> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(proposal_cmp);
    sorted.truncate(topk);
    sorted.into_iter().map(|(b, _)| b).collect()
}

/// Best IoU of every ground truth against the top-k proposals.
pub fn best_overlaps(gts: &[BBox], proposals: &[(BBox, f64)], topk: usize) -> Vec<f64> {
    let kept = top_k(proposals, topk);
    gts.iter()
        .map(|g| kept.iter().map(|p| iou(g, p)).fold(0.0, f64::max))
        .collect()
}

fn fraction_at(overlaps: &[f64], thresh: f64) -> f64 {
    if overlaps.is_empty() {
        return 1.0;
    }
    overlaps.iter().filter(|&&o| o >= thresh).count() as f64 / overlaps.len() as f64
}

fn mean_over_grid(overlaps: &[f64], grid: &[f64]) -> f64 {
    grid.iter().map(|&t| fraction_at(overlaps, t)).sum::<f64>() / grid.len() as f64
}

/// Fraction of ground truths recalled; an empty ground-truth set yields 1.
pub fn recall_at(gts: &[BBox], proposals: &[(BBox, f64)], iou_thresh: f64, topk: usize) -> f64 {
    fraction_at(&best_overlaps(gts, proposals, topk), iou_thresh)
}

/// Mean of [`recall_at`] over the standard IoU grid.
pub fn average_recall(gts: &[BBox], proposals: &[(BBox, f64)], topk: usize) -> f64 {
    mean_over_grid(&best_overlaps(gts, proposals, topk), &iou_grid())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub fn of(b: &BBox) -> SizeBucket {
        let a = b.area();
        if a < SMALL_AREA {
            SizeBucket::Small
        } else if a < LARGE_AREA {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }
}

/// AR per size bucket; a bucket without ground truths is `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SizeAr {
    pub small: Option<f64>,
    pub medium: Option<f64>,
    pub large: Option<f64>,
}

fn size_ar_from(gts: &[BBox], overlaps: &[f64], grid: &[f64]) -> SizeAr {
    let bucket = |want: SizeBucket| -> Option<f64> {
        let sel: Vec<f64> = gts
            .iter()
            .zip(overlaps)
            .filter(|(g, _)| SizeBucket::of(g) == want)
            .map(|(_, &o)| o)
            .collect();
        (!sel.is_empty()).then(|| mean_over_grid(&sel, grid))
    };
    SizeAr {
        small: bucket(SizeBucket::Small),
        medium: bucket(SizeBucket::Medium),
        large: bucket(SizeBucket::Large),
    }
}

/// Size-bucketed AR of one image at the standard budget of 100.
pub fn ar_by_size(gts: &[BBox], proposals: &[(BBox, f64)]) -> SizeAr {
    size_ar_from(gts, &best_overlaps(gts, proposals, SIZE_BUDGET), &iou_grid())
}

/// Pooled per-ground-truth best overlaps and the matching ground truths.
fn pooled(images: &[EvalImage], topk: usize) -> (Vec<BBox>, Vec<f64>) {
    let mut gts = Vec::new();
    let mut overlaps = Vec::new();
    for im in images {
        gts.extend_from_slice(&im.gts);
        overlaps.extend(best_overlaps(&im.gts, &im.proposals, topk));
    }
    (gts, overlaps)
}

pub fn dataset_recall(images: &[EvalImage], iou_thresh: f64, topk: usize) -> f64 {
    fraction_at(&pooled(images, topk).1, iou_thresh)
}

pub fn dataset_average_recall(images: &[EvalImage], topk: usize) -> f64 {
    mean_over_grid(&pooled(images, topk).1, &iou_grid())
}

fn key(t: f64) -> String {
    format!("{t:.2}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub total_gts: usize,
    /// Set when there were no ground truths; every recall is then 1.
    pub empty_gt_warning: bool,
    pub iou_grid: Vec<f64>,
    pub budgets: Vec<usize>,
    /// Budget to recall over `iou_grid`.
    pub recall_vs_iou: BTreeMap<usize, Vec<f64>>,
    /// IoU threshold (two decimals) to recall over `budgets`.
    pub recall_vs_count: BTreeMap<String, Vec<f64>>,
    pub ar_at: BTreeMap<usize, f64>,
    /// At budget 100.
    pub ar_by_size: SizeAr,
    pub ar_by_size_at: BTreeMap<usize, SizeAr>,
}

pub fn build_report(images: &[EvalImage], budgets: &[usize], grid: &[f64]) -> Result<MetricsReport> {
    if budgets.is_empty() || grid.is_empty() {
        return Err(ZipError::invalid("build_report", "budgets and IoU grid must be non-empty"));
    }
    let mut all_budgets = budgets.to_vec();
    all_budgets.sort_unstable();
    all_budgets.dedup();
    let mut per_budget = BTreeMap::new();
    for &k in all_budgets.iter().chain(std::iter::once(&SIZE_BUDGET)) {
        per_budget.entry(k).or_insert_with(|| pooled(images, k));
    }
    let (gts, _) = &per_budget[&SIZE_BUDGET];
    let total_gts = gts.len();

    let mut recall_vs_iou = BTreeMap::new();
    let mut ar_at = BTreeMap::new();
    let mut ar_by_size_at = BTreeMap::new();
    for &k in &all_budgets {
        let (g, o) = &per_budget[&k];
        recall_vs_iou.insert(k, grid.iter().map(|&t| fraction_at(o, t)).collect());
        ar_at.insert(k, mean_over_grid(o, grid));
        ar_by_size_at.insert(k, size_ar_from(g, o, grid));
    }
    let mut recall_vs_count = BTreeMap::new();
    for &t in grid {
        let curve = all_budgets.iter().map(|k| fraction_at(&per_budget[k].1, t)).collect();
        recall_vs_count.insert(key(t), curve);
    }
    let (g100, o100) = &per_budget[&SIZE_BUDGET];
    Ok(MetricsReport {
        images: images.len(),
        total_gts,
        empty_gt_warning: total_gts == 0,
        iou_grid: grid.to_vec(),
        budgets: all_budgets,
        recall_vs_iou,
        recall_vs_count,
        ar_at,
        ar_by_size: size_ar_from(g100, o100, grid),
        ar_by_size_at,
    })
}

impl MetricsReport {
    pub fn ar(&self, budget: usize) -> Option<f64> {
        self.ar_at.get(&budget).copied()
    }

    /// Metric names of the CSV form, one row per budget and metric.
    pub fn csv_metrics(&self) -> Vec<String> {
        let mut m = vec!["ar".to_string()];
        m.extend(self.iou_grid.iter().map(|&t| format!("recall@{}", key(t))));
        m.extend(["ar_small", "ar_medium", "ar_large"].map(String::from));
        m
    }

    /// `budget,metric,value`; absent size buckets leave `value` empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("budget,metric,value\n");
        let metrics = self.csv_metrics();
        for (bi, &k) in self.budgets.iter().enumerate() {
            let sizes = self.ar_by_size_at[&k];
            for (mi, name) in metrics.iter().enumerate() {
                let v = match mi {
                    0 => Some(self.ar_at[&k]),
                    i if i <= self.iou_grid.len() => Some(self.recall_vs_count[&key(self.iou_grid[i - 1])][bi]),
                    i => [sizes.small, sizes.medium, sizes.large][i - 1 - self.iou_grid.len()],
                };
                let _ = writeln!(out, "{k},{name},{}", v.map(|x| x.to_string()).unwrap_or_default());
            }
        }
        out
    }
}

/// Uniformly placed boxes with log-uniform scale and aspect ratio and
/// descending scores; the chance-level reference for recall figures.
pub fn random_proposals<R: Rng + ?Sized>(width: usize, height: usize, count: usize, rng: &mut R) -> Vec<(BBox, f64)> {
    let long = width.max(height) as f64;
    (0..count)
        .map(|i| {
            let s = rng.random_range(8f64.ln()..long.ln()).exp();
            let r = rng.random_range((1.0f64 / 3.0).ln()..3f64.ln()).exp();
            let cx = rng.random_range(0.0..width as f64);
            let cy = rng.random_range(0.0..height as f64);
            let b = clamp_box(&BBox::from_center(cx, cy, s * r.sqrt(), s / r.sqrt()), width, height);
            (b, 1.0 - i as f64 / count.max(1) as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(bs: &[BBox]) -> Vec<(BBox, f64)> {
        bs.iter().enumerate().map(|(i, &b)| (b, 1.0 - 0.01 * i as f64)).collect()
    }

    #[test]
    fn perfect_and_disjoint() {
        let gts = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 40.0, 50.0)];
        assert_eq!(recall_at(&gts, &scored(&gts), 1.0, 10), 1.0);
        assert_eq!(average_recall(&gts, &scored(&gts), 10), 1.0);
        let far = [BBox::new(100.0, 100.0, 110.0, 110.0)];
        assert_eq!(recall_at(&gts, &scored(&far), 0.5, 10), 0.0);
        assert_eq!(recall_at(&[], &scored(&far), 0.5, 10), 1.0);
    }

    #[test]
    fn half_overlap_gives_one_grid_point() {
        // IoU exactly 0.5: 10x10 gt, proposal 10x20 containing it
        let gt = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let p = [BBox::new(0.0, 0.0, 10.0, 20.0)];
        assert!((average_recall(&gt, &scored(&p), 10) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn size_boundary_is_medium() {
        let gt = BBox::new(0.0, 0.0, 32.0, 32.0);
        assert_eq!(SizeBucket::of(&gt), SizeBucket::Medium);
        let ar = ar_by_size(&[gt], &scored(&[gt]));
        assert_eq!(ar, SizeAr { small: None, medium: Some(1.0), large: None });
    }

    #[test]
    fn topk_ignores_input_order_on_ties() {
        let a = (BBox::new(0.0, 0.0, 5.0, 5.0), 0.5);
        let b = (BBox::new(1.0, 0.0, 6.0, 5.0), 0.5);
        assert_eq!(top_k(&[a, b], 1), top_k(&[b, a], 1));
    }

    #[test]
    fn report_shape_and_csv() {
        let gts = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        let img = EvalImage { image_id: "a".into(), gts: gts.clone(), proposals: scored(&gts) };
        let r = build_report(&[img], &DEFAULT_BUDGETS, &iou_grid()).unwrap();
        assert!(r.ar_at.values().all(|&v| v == 1.0));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + DEFAULT_BUDGETS.len() * r.csv_metrics().len());
        let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
