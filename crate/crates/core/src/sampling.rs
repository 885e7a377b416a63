//! Three-way anchor labelling and class-balanced mini-batch sampling.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{encode_offset, iou, BBox, Offset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Negative = 0,
    Positive = 1,
    Gray = 2,
}

impl Label {
    pub fn class_index(self) -> usize {
        self as usize
    }
}

/// IoU bands: positive `>= positive`, gray within `[gray_lo, gray_hi]`,
/// negative `< negative`. Anything else is left unlabelled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelThresholds {
    pub positive: f64,
    pub gray_lo: f64,
    pub gray_hi: f64,
    pub negative: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        LabelThresholds {
            positive: 0.6,
            gray_lo: 0.35,
            gray_hi: 0.55,
            negative: 0.25,
        }
    }
}

impl LabelThresholds {
    pub fn classify(&self, overlap: f64) -> Option<Label> {
        if overlap >= self.positive {
            Some(Label::Positive)
        } else if overlap >= self.gray_lo && overlap <= self.gray_hi {
            Some(Label::Gray)
        } else if overlap < self.negative {
            Some(Label::Negative)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledAnchor {
    pub anchor_index: usize,
    pub level: usize,
    pub label: Label,
    /// Present iff the label is positive.
    pub target: Option<Offset>,
    /// Present iff the label is positive or gray.
    pub matched_gt: Option<usize>,
    pub max_iou: f64,
}

/// Best-overlapping ground truth, ties to the lowest index.
pub fn best_match(b: &BBox, gts: &[BBox]) -> (Option<usize>, f64) {
    let mut best = (None, 0.0);
    for (g, gt) in gts.iter().enumerate() {
        let o = iou(b, gt);
        if o > best.1 || best.0.is_none() {
            best = (Some(g), o);
        }
    }
    best
}

/// Labels `boxes` against `gts`. When `extent` is given, boxes whose center
/// falls outside `[0, w) x [0, h)` are skipped. Unlabelled (dead-zone)
/// boxes do not appear in the output.
pub fn label_boxes(
    boxes: &[BBox],
    level: usize,
    gts: &[BBox],
    extent: Option<(usize, usize)>,
    thresholds: &LabelThresholds,
) -> Vec<LabeledAnchor> {
    let mut out = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        if let Some((w, h)) = extent {
            let (cx, cy) = b.center();
            if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
                continue;
            }
        }
        let (gt, overlap) = best_match(b, gts);
        let Some(label) = thresholds.classify(overlap) else {
            continue;
        };
        let (target, matched_gt) = match label {
            Label::Positive => (gt.map(|g| encode_offset(b, &gts[g])), gt),
            Label::Gray => (None, gt),
            Label::Negative => (None, None),
        };
        out.push(LabeledAnchor {
            anchor_index: i,
            level,
            label,
            target,
            matched_gt,
            max_iou: overlap,
        });
    }
    out
}

/// Labels the anchors of one level for an image of `width x height`.
pub fn label_anchors(
    anchors: &crate::anchors::AnchorGrid,
    gts: &[BBox],
    width: usize,
    height: usize,
    thresholds: &LabelThresholds,
) -> Vec<LabeledAnchor> {
    label_boxes(&anchors.boxes, anchors.level, gts, Some((width, height)), thresholds)
}

/// Sampled rows of one level. `rows` lists positives, then negatives, then
/// gray, each in ascending anchor order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MiniBatch {
    pub rows: Vec<LabeledAnchor>,
    pub positives: usize,
    pub negatives: usize,
    pub grays: usize,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Regression rows: exactly the positives.
    pub fn regression_rows(&self) -> impl Iterator<Item = &LabeledAnchor> {
        self.rows.iter().filter(|r| r.label == Label::Positive)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub per_class_cap: usize,
}

fn pick<R: Rng + ?Sized>(pool: &[LabeledAnchor], k: usize, rng: &mut R) -> Vec<LabeledAnchor> {
    if k >= pool.len() {
        return pool.to_vec();
    }
    let mut chosen: Vec<usize> = index::sample(rng, pool.len(), k).into_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| pool[i]).collect()
}

/// Positives up to the cap, negatives up to twice the positives, gray up to
/// half of positives plus negatives; every class also limited by the cap.
/// Without positives the batch holds negatives only.
pub fn sample_batch<R: Rng + ?Sized>(labeled: &[LabeledAnchor], cfg: SamplerConfig, rng: &mut R) -> MiniBatch {
    let by = |l: Label| -> Vec<LabeledAnchor> { labeled.iter().filter(|a| a.label == l).copied().collect() };
    let (pos_pool, neg_pool, gray_pool) = (by(Label::Positive), by(Label::Negative), by(Label::Gray));
    let cap = cfg.per_class_cap;
    let budget = cfg.batch_size;

    let n_pos = pos_pool.len().min(cap).min(budget);
    let neg_limit = if n_pos > 0 { 2 * n_pos } else { cap };
    let n_neg = neg_limit.min(cap).min(neg_pool.len()).min(budget - n_pos);
    let n_gray = if n_pos > 0 {
        (n_pos + n_neg).div_ceil(2).min(cap).min(gray_pool.len()).min(budget - n_pos - n_neg)
    } else {
        0
    };

    let mut rows = pick(&pos_pool, n_pos, rng);
    rows.extend(pick(&neg_pool, n_neg, rng));
    rows.extend(pick(&gray_pool, n_gray, rng));
    MiniBatch {
        rows,
        positives: n_pos,
        negatives: n_neg,
        grays: n_gray,
    }
}
