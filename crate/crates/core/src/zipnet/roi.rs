use crate::error::Result;
use crate::geometry::{clamp_box, decode_offset, BBox, Offset};
use crate::tensor::{avgpool_global, avgpool_global_backward, roi_pool, roi_pool_backward, softmax_rows, Real, RoiRef, Tensor};

use super::layers::ResBlockCache;
use super::{Pyramid, ZipNet, CLASSES, LEVELS, POSITIVE};

/// `sqrt(area)` cut points between levels, in pixels of the image the
/// pyramid was computed on.
pub const ROI_LEVEL_CUTS: [f64; 2] = [48.0, 192.0];

pub fn assign_roi_level(b: &BBox) -> usize {
    let s = b.scale();
    ROI_LEVEL_CUTS.iter().take_while(|&&c| s >= c).count()
}

/// Tower outputs for a batch of boxes, in input order.
#[derive(Clone, Debug)]
pub struct RoiOutput<T: Real> {
    /// `(R, 3)`.
    pub logits: Tensor<T>,
    /// `(R, 4)`.
    pub offsets: Tensor<T>,
    pub levels: Vec<usize>,
    pub pos_prob: Vec<f64>,
    /// Boxes that fell entirely outside their feature map.
    pub clamped: usize,
}

impl<T: Real> RoiOutput<T> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn offset(&self, i: usize) -> Offset {
        Offset::from_slice(&self.offsets.data()[4 * i..4 * i + 4].iter().map(|v| v.to_f64()).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug)]
pub struct RoiCache<T: Real> {
    groups: Vec<Vec<usize>>,
    argmax: Vec<Vec<usize>>,
    blocks: Vec<ResBlockCache<T>>,
    tower_out: Tensor<T>,
    pooled_avg: Tensor<T>,
}

impl<T: Real> ZipNet<T> {
    /// Pools every box from its assigned level and runs the shared tower.
    pub fn roi_forward(&mut self, pyr: &Pyramid<T>, boxes: &[BBox]) -> Result<(RoiOutput<T>, RoiCache<T>)> {
        let c = self.config.merged_channels();
        let [gh, gw] = self.config.roi_grid;
        let levels: Vec<usize> = boxes.iter().map(assign_roi_level).collect();
        let mut groups = vec![Vec::new(); LEVELS];
        for (i, &m) in levels.iter().enumerate() {
            groups[m].push(i);
        }
        let r = boxes.len();
        let cell = c * gh * gw;
        let mut pooled = vec![T::zero(); r * cell];
        let mut argmax = Vec::with_capacity(LEVELS);
        let mut clamped = 0;
        for m in 0..LEVELS {
            if groups[m].is_empty() {
                argmax.push(Vec::new());
                continue;
            }
            let rois: Vec<RoiRef> = groups[m].iter().map(|&i| RoiRef { batch: 0, bbox: boxes[i] }).collect();
            let out = roi_pool(&pyr.g[m], &rois, (gh, gw), pyr.strides[m])?;
            for (k, &i) in groups[m].iter().enumerate() {
                pooled[i * cell..(i + 1) * cell].copy_from_slice(&out.output.data()[k * cell..(k + 1) * cell]);
            }
            argmax.push(out.argmax);
            clamped += out.clamped;
        }
        if r == 0 {
            let empty = RoiOutput {
                logits: Tensor::zeros(&[0, CLASSES]),
                offsets: Tensor::zeros(&[0, 4]),
                levels,
                pos_prob: Vec::new(),
                clamped,
            };
            let cache = RoiCache {
                groups,
                argmax,
                blocks: Vec::new(),
                tower_out: Tensor::zeros(&[0, c, gh, gw]),
                pooled_avg: Tensor::zeros(&[0, c]),
            };
            return Ok((empty, cache));
        }
        let mut x = Tensor::from_vec(&[r, c, gh, gw], pooled)?;
        let mut blocks = Vec::with_capacity(self.tower.blocks.len());
        for b in self.tower.blocks.iter_mut() {
            let (y, cache) = b.forward(&x, false)?;
            blocks.push(cache);
            x = y;
        }
        let pooled_avg = avgpool_global(&x)?;
        let logits = self.tower.cls.forward(&pooled_avg)?;
        let offsets = self.tower.reg.forward(&pooled_avg)?;
        let probs = softmax_rows(&logits)?;
        let pos_prob = (0..r).map(|i| probs.data()[i * CLASSES + POSITIVE].to_f64()).collect();
        Ok((
            RoiOutput { logits, offsets, levels, pos_prob, clamped },
            RoiCache { groups, argmax, blocks, tower_out: x, pooled_avg },
        ))
    }

    /// Accumulates tower gradients and adds pooled-feature gradients into
    /// `dg`, one tensor per level shaped like `G^m`.
    pub fn roi_backward(
        &mut self,
        pyr: &Pyramid<T>,
        cache: &RoiCache<T>,
        d_logits: &Tensor<T>,
        d_offsets: &Tensor<T>,
        dg: &mut [Tensor<T>],
    ) -> Result<()> {
        if cache.blocks.is_empty() && cache.pooled_avg.is_empty() {
            return Ok(());
        }
        let mut d = self.tower.cls.backward(&cache.pooled_avg, d_logits)?;
        d.add_assign(&self.tower.reg.backward(&cache.pooled_avg, d_offsets)?)?;
        let mut g = avgpool_global_backward(cache.tower_out.shape(), &d)?;
        for (b, c) in self.tower.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            g = b.backward(c, &g)?;
        }
        let shape = g.shape().to_vec();
        let cell: usize = shape[1..].iter().product();
        for m in 0..LEVELS {
            let idx = &cache.groups[m];
            if idx.is_empty() {
                continue;
            }
            let mut part = Vec::with_capacity(idx.len() * cell);
            for &i in idx {
                part.extend_from_slice(&g.data()[i * cell..(i + 1) * cell]);
            }
            let part = Tensor::from_vec(&[idx.len(), shape[1], shape[2], shape[3]], part)?;
            let dm = roi_pool_backward(pyr.g[m].shape(), &cache.argmax[m], &part)?;
            dg[m].add_assign(&dm)?;
        }
        Ok(())
    }
}

/// `R(q) = clamp(decode(t(q), R(q-1)))` for every box.
pub fn advance<T: Real>(out: &RoiOutput<T>, prev: &[BBox], width: usize, height: usize) -> Result<Vec<BBox>> {
    prev.iter()
        .enumerate()
        .map(|(i, b)| Ok(clamp_box(&decode_offset(&out.offset(i), b)?, width, height)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_rule() {
        assert_eq!(assign_roi_level(&BBox::new(0.0, 0.0, 16.0, 16.0)), 0);
        assert_eq!(assign_roi_level(&BBox::new(0.0, 0.0, 128.0, 128.0)), 1);
        assert_eq!(assign_roi_level(&BBox::new(0.0, 0.0, 400.0, 300.0)), 2);
        assert_eq!(assign_roi_level(&BBox::new(0.0, 0.0, 48.0, 48.0)), 1);
    }
}
