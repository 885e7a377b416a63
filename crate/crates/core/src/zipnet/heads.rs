use crate::anchors::{generate_grid, AnchorGrid};
use crate::error::{Result, ZipError};
use crate::geometry::{clamp_box, decode_offset, nms, score_order, BBox, Offset};
use crate::tensor::{relu, relu_backward, Real, Tensor};

use super::{Pyramid, ZipNet, CLASSES, POSITIVE};

/// Raw head tensors of one level: `(1, 3A, fh, fw)` logits with the class
/// of template `a` at channel `3a + k`, and `(1, 4A, fh, fw)` offsets at
/// channel `4a + d`. Anchor `(i, j, a)` has index `(i * fw + j) * A + a`.
#[derive(Clone, Debug)]
pub struct HeadOutput<T: Real> {
    pub logits: Tensor<T>,
    pub offsets: Tensor<T>,
}

impl<T: Real> HeadOutput<T> {
    pub fn per_cell(&self) -> usize {
        self.offsets.shape()[1] / 4
    }

    fn extent(&self) -> (usize, usize) {
        (self.logits.shape()[2], self.logits.shape()[3])
    }

    /// `(N, width)` rows of `t` for the given anchors.
    fn gather(&self, t: &Tensor<T>, width: usize, anchors: &[usize]) -> Tensor<T> {
        let a_n = self.per_cell();
        let (fh, fw) = self.extent();
        let plane = fh * fw;
        let src = t.data();
        let mut out = Vec::with_capacity(anchors.len() * width);
        for &idx in anchors {
            let (cell, a) = (idx / a_n, idx % a_n);
            for k in 0..width {
                out.push(src[(a * width + k) * plane + cell]);
            }
        }
        Tensor::from_vec(&[anchors.len(), width], out).expect("gather shape")
    }

    fn scatter(&self, like: &Tensor<T>, width: usize, anchors: &[usize], rows: &Tensor<T>) -> Tensor<T> {
        let a_n = self.per_cell();
        let (fh, fw) = self.extent();
        let plane = fh * fw;
        let mut out = Tensor::zeros(like.shape());
        let dst = out.data_mut();
        for (r, &idx) in anchors.iter().enumerate() {
            let (cell, a) = (idx / a_n, idx % a_n);
            for k in 0..width {
                dst[(a * width + k) * plane + cell] += rows.data()[r * width + k];
            }
        }
        out
    }

    pub fn logit_rows(&self, anchors: &[usize]) -> Tensor<T> {
        self.gather(&self.logits, CLASSES, anchors)
    }

    pub fn offset_rows(&self, anchors: &[usize]) -> Tensor<T> {
        self.gather(&self.offsets, 4, anchors)
    }

    /// Dense gradient tensors from per-anchor row gradients.
    pub fn scatter_grads(
        &self,
        cls_anchors: &[usize],
        d_logits: &Tensor<T>,
        reg_anchors: &[usize],
        d_offsets: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        (
            self.scatter(&self.logits, CLASSES, cls_anchors, d_logits),
            self.scatter(&self.offsets, 4, reg_anchors, d_offsets),
        )
    }

    /// Positive-class probability and decoded offset of every anchor.
    pub fn anchor_scores(&self) -> Vec<f64> {
        let a_n = self.per_cell();
        let (fh, fw) = self.extent();
        let plane = fh * fw;
        let src = self.logits.data();
        let mut scores = Vec::with_capacity(plane * a_n);
        for cell in 0..plane {
            for a in 0..a_n {
                let l: Vec<f64> = (0..CLASSES).map(|k| src[(a * CLASSES + k) * plane + cell].to_f64()).collect();
                let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
                scores.push((l[POSITIVE] - m).exp() / z);
            }
        }
        scores
    }

    pub fn anchor_offset(&self, idx: usize) -> Offset {
        let a_n = self.per_cell();
        let (fh, fw) = self.extent();
        let plane = fh * fw;
        let (cell, a) = (idx / a_n, idx % a_n);
        let src = self.offsets.data();
        let v: Vec<f64> = (0..4).map(|d| src[(a * 4 + d) * plane + cell].to_f64()).collect();
        Offset::from_slice(&v)
    }
}

#[derive(Clone, Debug)]
pub struct HeadCache<T: Real> {
    pre: Vec<Tensor<T>>,
    hidden: Vec<Tensor<T>>,
}

impl<T: Real> ZipNet<T> {
    pub fn heads_forward(&self, pyr: &Pyramid<T>) -> Result<(Vec<HeadOutput<T>>, HeadCache<T>)> {
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut cache = HeadCache { pre: Vec::new(), hidden: Vec::new() };
        for (head, g) in self.heads.iter().zip(&pyr.g) {
            let pre = head.conv.forward(g)?;
            let hidden = relu(&pre);
            outs.push(HeadOutput {
                logits: head.cls.forward(&hidden)?,
                offsets: head.reg.forward(&hidden)?,
            });
            cache.pre.push(pre);
            cache.hidden.push(hidden);
        }
        Ok((outs, cache))
    }

    /// Returns the gradient w.r.t. each `G^m`.
    pub fn heads_backward(
        &mut self,
        pyr: &Pyramid<T>,
        cache: &HeadCache<T>,
        d_logits: &[Tensor<T>],
        d_offsets: &[Tensor<T>],
    ) -> Result<Vec<Tensor<T>>> {
        let mut dg = Vec::with_capacity(self.heads.len());
        for (m, head) in self.heads.iter_mut().enumerate() {
            let mut dh = head.cls.backward(&cache.hidden[m], &d_logits[m])?;
            dh.add_assign(&head.reg.backward(&cache.hidden[m], &d_offsets[m])?)?;
            let dpre = relu_backward(&cache.pre[m], &dh)?;
            dg.push(head.conv.backward(&pyr.g[m], &dpre)?);
        }
        Ok(dg)
    }

    /// Anchor grids matching the spatial extents of the pyramid.
    pub fn anchor_grids(&self, pyr: &Pyramid<T>) -> Result<Vec<AnchorGrid>> {
        pyr.g
            .iter()
            .enumerate()
            .map(|(m, g)| {
                let (_, _, fh, fw) = g.dims4()?;
                Ok(generate_grid(m, fh, fw, pyr.strides[m], &self.templates[m]))
            })
            .collect()
    }
}

/// A first-branch box before any refinement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawProposal {
    pub bbox: BBox,
    pub score: f64,
    pub level: usize,
    pub anchor: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelProposals {
    pub proposals: Vec<RawProposal>,
    /// Boxes entering suppression, before NMS.
    pub pre_nms: usize,
}

/// Scores every anchor, keeps the `pre_nms_top_n` best, decodes and clamps
/// them to `width x height`, then suppresses at `nms_thresh`.
pub fn decode_level<T: Real>(
    head: &HeadOutput<T>,
    grid: &AnchorGrid,
    width: usize,
    height: usize,
    pre_nms_top_n: usize,
    nms_thresh: f64,
) -> Result<LevelProposals> {
    let scores = head.anchor_scores();
    if scores.len() != grid.len() {
        return Err(ZipError::shape("decode_level", &[scores.len()], &[grid.len()]));
    }
    let mut order = score_order(&scores);
    order.truncate(pre_nms_top_n);
    let mut boxes = Vec::with_capacity(order.len());
    let mut kept_scores = Vec::with_capacity(order.len());
    for &i in &order {
        let b = decode_offset(&head.anchor_offset(i), &grid.boxes[i])?;
        boxes.push(clamp_box(&b, width, height));
        kept_scores.push(scores[i]);
    }
    let keep = nms(&boxes, &kept_scores, nms_thresh)?;
    Ok(LevelProposals {
        proposals: keep
            .into_iter()
            .map(|k| RawProposal {
                bbox: boxes[k],
                score: kept_scores[k],
                level: grid.level,
                anchor: order[k],
            })
            .collect(),
        pre_nms: order.len(),
    })
}

/// Per-level decode and NMS, then the best `post_top_n` across levels.
pub fn first_branch_from_heads<T: Real>(
    heads: &[HeadOutput<T>],
    grids: &[AnchorGrid],
    width: usize,
    height: usize,
    pre_nms_top_n: usize,
    nms_thresh: f64,
    post_top_n: usize,
) -> Result<Vec<RawProposal>> {
    let mut all = Vec::new();
    for (h, g) in heads.iter().zip(grids) {
        all.extend(decode_level(h, g, width, height, pre_nms_top_n, nms_thresh)?.proposals);
    }
    let scores: Vec<f64> = all.iter().map(|p| p.score).collect();
    let mut order = score_order(&scores);
    order.truncate(post_top_n);
    Ok(order.into_iter().map(|i| all[i]).collect())
}
