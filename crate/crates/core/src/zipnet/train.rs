use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{choose_train_scale, TrainScaleLimits};
use crate::data::{pad_to_multiple, resize_bilinear, to_tensor, AnnotatedImage};
use crate::error::{Result, ZipError};
use crate::geometry::{BBox, NmsConfig};
use crate::sampling::{label_anchors, label_boxes, sample_batch, Label, LabelThresholds, LabeledAnchor, SamplerConfig};
use crate::tensor::{sgd_step, smooth_l1, smooth_l1_backward, softmax_xent, softmax_xent_backward, Real, SgdConfig, Tensor};

use super::heads::first_branch_from_heads;
use super::roi::advance;
use super::{Pyramid, ZipNet, CLASSES, LEVELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    /// The learning rate is multiplied by `lr_decay` every `lr_step` steps.
    pub lr_step: usize,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub per_class_cap: usize,
    pub roi_batch: usize,
    pub roi_cap: usize,
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub min_side: f64,
    pub max_side: f64,
    pub gray_class: bool,
    pub thresholds: LabelThresholds,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            lr: 1e-4,
            lr_step: 7000,
            lr_decay: 0.5,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 300,
            per_class_cap: 100,
            roi_batch: 36,
            roi_cap: 12,
            pre_nms_top_n: 6000,
            post_nms_top_n: 2000,
            min_side: 64.0,
            max_side: 320.0,
            gray_class: true,
            thresholds: LabelThresholds::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ZipError::config("train.lr", "must be positive"));
        }
        if self.lr_step == 0 {
            return Err(ZipError::config("train.lr_step", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay) {
            return Err(ZipError::config("train.lr_decay", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ZipError::config("train.momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(ZipError::config("train.weight_decay", "must be non-negative"));
        }
        for (f, v) in [
            ("train.batch_size", self.batch_size),
            ("train.per_class_cap", self.per_class_cap),
            ("train.roi_batch", self.roi_batch),
            ("train.roi_cap", self.roi_cap),
            ("train.pre_nms_top_n", self.pre_nms_top_n),
            ("train.post_nms_top_n", self.post_nms_top_n),
        ] {
            if v == 0 {
                return Err(ZipError::config(f, "must be positive"));
            }
        }
        if !(self.min_side >= 32.0 && self.max_side >= self.min_side) {
            return Err(ZipError::config("train.max_side", "need 32 <= min_side <= max_side"));
        }
        let t = &self.thresholds;
        if !(t.negative <= t.gray_lo && t.gray_lo <= t.gray_hi && t.gray_hi <= t.positive && t.positive <= 1.0) {
            return Err(ZipError::config("train.thresholds", "bands must be ordered negative <= gray <= positive"));
        }
        Ok(())
    }
}

pub fn lr_at(cfg: &TrainConfig, iteration: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi((iteration / cfg.lr_step) as i32)
}

/// Classification plus regression loss of one level and its row gradients.
#[derive(Clone, Debug)]
pub struct LevelLoss<T: Real> {
    pub value: f64,
    pub cls: f64,
    pub reg: f64,
    pub d_logits: Tensor<T>,
    pub d_offsets: Tensor<T>,
}

/// `xent(logits, labels) + smooth_l1(pred, target)`, each term normalized by
/// its own row count. Empty inputs contribute zero.
pub fn level_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<LevelLoss<T>> {
    let (cls, d_logits) = if labels.is_empty() {
        (0.0, Tensor::zeros(logits.shape()))
    } else {
        (
            softmax_xent(logits, labels, None)?.data()[0].to_f64(),
            softmax_xent_backward(logits, labels, None, T::one())?,
        )
    };
    let mask = vec![true; pred.shape().first().copied().unwrap_or(0)];
    let reg = smooth_l1(pred, target, &mask)?.data()[0].to_f64();
    let d_offsets = smooth_l1_backward(pred, target, &mask, T::one())?;
    Ok(LevelLoss {
        value: cls + reg,
        cls,
        reg,
        d_logits,
        d_offsets,
    })
}

fn targets_tensor<T: Real>(rows: &[&LabeledAnchor]) -> Tensor<T> {
    let data = rows
        .iter()
        .flat_map(|r| r.target.expect("positive row carries a target").as_array())
        .map(T::from_f64)
        .collect();
    Tensor::from_vec(&[rows.len(), 4], data).expect("target shape")
}

fn select_rows<T: Real>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
    }
    Tensor::from_vec(&[rows.len(), w], data).expect("row shape")
}

fn scatter_rows<T: Real>(dst: &mut Tensor<T>, rows: &[usize], src: &Tensor<T>) {
    let w = dst.shape()[1];
    let d = dst.data_mut();
    for (k, &r) in rows.iter().enumerate() {
        for c in 0..w {
            d[r * w + c] += src.data()[k * w + c];
        }
    }
}

fn drop_gray(labeled: Vec<LabeledAnchor>, keep_gray: bool) -> Vec<LabeledAnchor> {
    if keep_gray {
        labeled
    } else {
        labeled.into_iter().filter(|l| l.label != Label::Gray).collect()
    }
}

/// Box trajectories and losses of the recursive RoI stages.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecursionOutput {
    /// `R(0), R(1), ..., R(Q)`.
    pub trajectory: Vec<Vec<BBox>>,
    pub stage_losses: Vec<f64>,
    /// Per stage, per level loss.
    pub stage_level_losses: Vec<[f64; LEVELS]>,
    pub stage_positives: Vec<usize>,
    pub stages_run: usize,
}

/// Instrumentation of one optimization step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub lr: f64,
    pub total: f64,
    pub first_branch: [f64; LEVELS],
    pub first_positives: [usize; LEVELS],
    pub roi: RecursionOutput,
    pub scale_factor: f64,
    pub resized: (usize, usize),
}

impl<T: Real> ZipNet<T> {
    /// The training-time recursion: every stage relabels `R(q-1)`, adds its
    /// per-level loss, backpropagates into the tower and `dg`, then moves
    /// the boxes. Box coordinates are treated as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn roi_recursion_train(
        &mut self,
        pyr: &Pyramid<T>,
        r0: &[BBox],
        gts: &[BBox],
        width: usize,
        height: usize,
        cfg: &TrainConfig,
        dg: &mut [Tensor<T>],
    ) -> Result<RecursionOutput> {
        let mut rec = RecursionOutput {
            trajectory: vec![r0.to_vec()],
            ..Default::default()
        };
        for _ in 0..self.config.q {
            let prev = rec.trajectory.last().expect("trajectory is never empty").clone();
            let (out, cache) = self.roi_forward(pyr, &prev)?;
            let labeled = drop_gray(label_boxes(&prev, 0, gts, None, &cfg.thresholds), cfg.gray_class);
            let mut d_logits = Tensor::zeros(&[prev.len(), CLASSES]);
            let mut d_offsets = Tensor::zeros(&[prev.len(), 4]);
            let mut per_level = [0.0; LEVELS];
            let mut positives = 0;
            for (m, slot) in per_level.iter_mut().enumerate() {
                let rows: Vec<&LabeledAnchor> = labeled.iter().filter(|l| out.levels[l.anchor_index] == m).collect();
                if rows.is_empty() {
                    continue;
                }
                let cls_idx: Vec<usize> = rows.iter().map(|r| r.anchor_index).collect();
                let labels: Vec<usize> = rows.iter().map(|r| r.label.class_index()).collect();
                let pos: Vec<&LabeledAnchor> = rows.iter().copied().filter(|r| r.label == Label::Positive).collect();
                let reg_idx: Vec<usize> = pos.iter().map(|r| r.anchor_index).collect();
                positives += pos.len();
                let ll = level_loss(
                    &select_rows(&out.logits, &cls_idx),
                    &labels,
                    &select_rows(&out.offsets, &reg_idx),
                    &targets_tensor(&pos),
                )?;
                scatter_rows(&mut d_logits, &cls_idx, &ll.d_logits);
                scatter_rows(&mut d_offsets, &reg_idx, &ll.d_offsets);
                *slot = ll.value;
            }
            self.roi_backward(pyr, &cache, &d_logits, &d_offsets, dg)?;
            rec.trajectory.push(advance(&out, &prev, width, height)?);
            rec.stage_losses.push(per_level.iter().sum());
            rec.stage_level_losses.push(per_level);
            rec.stage_positives.push(positives);
            rec.stages_run += 1;
        }
        Ok(rec)
    }

    /// Forward and backward of the full objective on one image; gradients
    /// are left in the parameters. `image` is `(1, 3, H, W)` at native size.
    pub fn compute_gradients<R: Rng + ?Sized>(
        &mut self,
        image: &Tensor<T>,
        gts: &[BBox],
        cfg: &TrainConfig,
        nms: &NmsConfig,
        rng: &mut R,
    ) -> Result<StepReport> {
        let (_, _, h0, w0) = image.dims4()?;
        let limits = TrainScaleLimits {
            min_side: cfg.min_side,
            max_side: cfg.max_side,
        };
        let ts = choose_train_scale(gts, w0, h0, &self.config.level_ranges, limits, None, rng);
        let nh = ((h0 as f64 * ts.factor).round() as usize).max(1);
        let nw = ((w0 as f64 * ts.factor).round() as usize).max(1);
        let (sx, sy) = (nw as f64 / w0 as f64, nh as f64 / h0 as f64);
        let gts_r: Vec<BBox> = gts.iter().map(|b| BBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy)).collect();
        let resized = if (nh, nw) == (h0, w0) {
            image.clone()
        } else {
            resize_bilinear(image, nh, nw)?
        };
        let padded = pad_to_multiple(&resized, 32)?;

        self.zero_grad();
        let (pyr, fcache) = self.features(&padded, true)?;
        let (heads, hcache) = self.heads_forward(&pyr)?;
        let grids = self.anchor_grids(&pyr)?;

        let mut report = StepReport {
            scale_factor: ts.factor,
            resized: (nw, nh),
            ..Default::default()
        };
        let mut d_logits = Vec::with_capacity(LEVELS);
        let mut d_offsets = Vec::with_capacity(LEVELS);
        let sampler = SamplerConfig {
            batch_size: cfg.batch_size,
            per_class_cap: cfg.per_class_cap,
        };
        for m in 0..LEVELS {
            let labeled = drop_gray(label_anchors(&grids[m], &gts_r, nw, nh, &cfg.thresholds), cfg.gray_class);
            let batch = sample_batch(&labeled, sampler, rng);
            let cls_idx: Vec<usize> = batch.rows.iter().map(|r| r.anchor_index).collect();
            let labels: Vec<usize> = batch.rows.iter().map(|r| r.label.class_index()).collect();
            let pos: Vec<&LabeledAnchor> = batch.regression_rows().collect();
            let reg_idx: Vec<usize> = pos.iter().map(|r| r.anchor_index).collect();
            let ll = level_loss(
                &heads[m].logit_rows(&cls_idx),
                &labels,
                &heads[m].offset_rows(&reg_idx),
                &targets_tensor(&pos),
            )?;
            let (dl, doff) = heads[m].scatter_grads(&cls_idx, &ll.d_logits, &reg_idx, &ll.d_offsets);
            d_logits.push(dl);
            d_offsets.push(doff);
            report.first_branch[m] = ll.value;
            report.first_positives[m] = batch.positives;
        }
        let mut dg = self.heads_backward(&pyr, &hcache, &d_logits, &d_offsets)?;

        let props = first_branch_from_heads(&heads, &grids, nw, nh, cfg.pre_nms_top_n, nms.inner, cfg.post_nms_top_n)?;
        let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        let labeled = drop_gray(label_boxes(&boxes, 0, &gts_r, None, &cfg.thresholds), cfg.gray_class);
        let roi_sampler = SamplerConfig {
            batch_size: cfg.roi_batch,
            per_class_cap: cfg.roi_cap,
        };
        let batch = sample_batch(&labeled, roi_sampler, rng);
        let r0: Vec<BBox> = batch.rows.iter().map(|r| boxes[r.anchor_index]).collect();
        report.roi = self.roi_recursion_train(&pyr, &r0, &gts_r, nw, nh, cfg, &mut dg)?;

        self.features_backward(&pyr, &fcache, dg)?;
        report.total = report.first_branch.iter().sum::<f64>() + report.roi.stage_losses.iter().sum::<f64>();
        if !report.total.is_finite() {
            return Err(ZipError::NonFinite("train_step loss"));
        }
        Ok(report)
    }

    /// One SGD step on one image.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        image: &Tensor<T>,
        gts: &[BBox],
        cfg: &TrainConfig,
        nms: &NmsConfig,
        lr: f64,
        rng: &mut R,
    ) -> Result<StepReport> {
        let mut report = self.compute_gradients(image, gts, cfg, nms, rng)?;
        report.lr = lr;
        let sgd = SgdConfig {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        sgd_step(self.parameters_mut(), sgd);
        Ok(report)
    }
}

/// Iteration-indexed training loop. Step `i` draws its image and all its
/// randomness from a stream derived from `(seed, i)`, so a run restored at
/// iteration `i` continues exactly as an uninterrupted one.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real> {
    pub net: ZipNet<T>,
    pub train: TrainConfig,
    pub nms: NmsConfig,
    pub seed: u64,
    pub iteration: usize,
}

const STEP_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl<T: Real> Trainer<T> {
    pub fn new(net: ZipNet<T>, train: TrainConfig, nms: NmsConfig, seed: u64) -> Self {
        Trainer {
            net,
            train,
            nms,
            seed,
            iteration: 0,
        }
    }

    pub fn step_rng(&self, iteration: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ STEP_STREAM_SALT);
        rng.set_stream(iteration as u64);
        rng
    }

    pub fn step(&mut self, data: &[AnnotatedImage]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(ZipError::Data("training set is empty".into()));
        }
        let mut rng = self.step_rng(self.iteration);
        let sample = &data[rng.random_range(0..data.len())];
        let image: Tensor<T> = to_tensor(&sample.image);
        let lr = lr_at(&self.train, self.iteration);
        let report = self.net.train_step(&image, &sample.gts, &self.train, &self.nms, lr, &mut rng)?;
        self.iteration += 1;
        Ok(report)
    }
}
