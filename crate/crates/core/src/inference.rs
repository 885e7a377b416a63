//! Multi-scale proposal generation: first branch per scale, inter-scale
//! merge, recursive RoI refinement averaged across scales, final NMS.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{pad_to_multiple, resize_bilinear};
use crate::error::{Result, ZipError};
use crate::geometry::{clamp_box, nms, score_order, BBox, NmsConfig};
use crate::tensor::{Real, Tensor};
use crate::zipnet::{assign_roi_level, first_branch_from_heads, Pyramid, ZipNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestConfig {
    /// Longer-side lengths the image is resized to.
    pub scales: Vec<usize>,
    pub pre_nms_top_n: usize,
    /// First-branch boxes kept per scale.
    pub post_nms_top_n: usize,
    /// Boxes kept after the inter-scale merge.
    pub max_proposals: usize,
    /// Run the recursive RoI branch.
    pub refine: bool,
    /// Recursion depth at test time; the model's `q` when absent.
    pub q: Option<usize>,
    pub top_k: usize,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            scales: vec![192, 256, 320],
            pre_nms_top_n: 6000,
            post_nms_top_n: 2000,
            max_proposals: 2000,
            refine: true,
            q: None,
            top_k: 1000,
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(ZipError::config("test.scales", "at least one scale"));
        }
        if self.scales.iter().any(|&s| s < 32) {
            return Err(ZipError::config("test.scales", "scales must be >= 32"));
        }
        for (name, v) in [
            ("test.pre_nms_top_n", self.pre_nms_top_n),
            ("test.post_nms_top_n", self.post_nms_top_n),
            ("test.max_proposals", self.max_proposals),
            ("test.top_k", self.top_k),
        ] {
            if v == 0 {
                return Err(ZipError::config(name, "must be positive"));
            }
        }
        Ok(())
    }

    /// Effective test-time depth; zero is raised to one.
    pub fn depth(&self, model_q: usize) -> usize {
        self.q.unwrap_or(model_q).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FirstBranch,
    Refined,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    /// Original-image coordinates.
    pub bbox: BBox,
    pub score: f64,
    pub level: usize,
    /// Test scale that produced the box.
    pub scale_tag: usize,
    pub stage: Stage,
}

/// The image at one test scale with its feature pyramid.
pub struct ScaledView<T: Real> {
    pub scale: usize,
    /// Resized extent before padding.
    pub width: usize,
    pub height: usize,
    pub sx: f64,
    pub sy: f64,
    pub pyramid: Pyramid<T>,
}

impl<T: Real> ScaledView<T> {
    fn to_scaled(&self, b: &BBox) -> BBox {
        BBox::new(b.x1 * self.sx, b.y1 * self.sy, b.x2 * self.sx, b.y2 * self.sy)
    }

    fn to_original(&self, b: &BBox, width: usize, height: usize) -> BBox {
        clamp_box(
            &BBox::new(b.x1 / self.sx, b.y1 / self.sy, b.x2 / self.sx, b.y2 / self.sy),
            width,
            height,
        )
    }
}

fn dims<T: Real>(image: &Tensor<T>) -> Result<(usize, usize)> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(ZipError::shape("inference image", &[n, c, h, w], &[1, 3, h, w]));
    }
    Ok((w, h))
}

/// Resizes so the longer side equals `scale`, pads and runs the backbone in
/// evaluation mode.
pub fn scaled_view<T: Real>(net: &mut ZipNet<T>, image: &Tensor<T>, scale: usize) -> Result<ScaledView<T>> {
    let (w0, h0) = dims(image)?;
    let f = scale as f64 / w0.max(h0) as f64;
    let nw = ((w0 as f64 * f).round() as usize).max(1);
    let nh = ((h0 as f64 * f).round() as usize).max(1);
    let resized = if (nw, nh) == (w0, h0) {
        image.clone()
    } else {
        resize_bilinear(image, nh, nw)?
    };
    let padded = pad_to_multiple(&resized, 32)?;
    let (pyramid, _) = net.features(&padded, false)?;
    Ok(ScaledView {
        scale,
        width: nw,
        height: nh,
        sx: nw as f64 / w0 as f64,
        sy: nh as f64 / h0 as f64,
        pyramid,
    })
}

fn single_from_view<T: Real>(
    net: &mut ZipNet<T>,
    view: &ScaledView<T>,
    width: usize,
    height: usize,
    cfg: &TestConfig,
    nms_cfg: &NmsConfig,
) -> Result<Vec<Proposal>> {
    let (heads, _) = net.heads_forward(&view.pyramid)?;
    let grids = net.anchor_grids(&view.pyramid)?;
    let raw = first_branch_from_heads(
        &heads,
        &grids,
        view.width,
        view.height,
        cfg.pre_nms_top_n,
        nms_cfg.inner,
        cfg.post_nms_top_n,
    )?;
    let props: Vec<Proposal> = raw
        .iter()
        .map(|p| Proposal {
            bbox: view.to_original(&p.bbox, width, height),
            score: p.score,
            level: p.level,
            scale_tag: view.scale,
            stage: Stage::FirstBranch,
        })
        .collect();
    suppress(props, nms_cfg.inner, usize::MAX)
}

/// Greedy NMS over proposals; survivors in descending score order.
fn suppress(props: Vec<Proposal>, threshold: f64, keep_at_most: usize) -> Result<Vec<Proposal>> {
    let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = props.iter().map(|p| p.score).collect();
    let mut keep = nms(&boxes, &scores, threshold)?;
    keep.truncate(keep_at_most);
    Ok(keep.into_iter().map(|k| props[k]).collect())
}

/// First-branch proposals at one scale, in original coordinates, after a
/// cross-level NMS.
pub fn propose_single_scale<T: Real>(
    net: &mut ZipNet<T>,
    image: &Tensor<T>,
    scale: usize,
    cfg: &TestConfig,
    nms_cfg: &NmsConfig,
) -> Result<Vec<Proposal>> {
    let (w, h) = dims(image)?;
    let view = scaled_view(net, image, scale)?;
    single_from_view(net, &view, w, h, cfg, nms_cfg)
}

fn multiscale_with_views<T: Real>(
    net: &mut ZipNet<T>,
    image: &Tensor<T>,
    cfg: &TestConfig,
    nms_cfg: &NmsConfig,
) -> Result<(Vec<Proposal>, Vec<ScaledView<T>>)> {
    let (w, h) = dims(image)?;
    let mut all = Vec::new();
    let mut views = Vec::with_capacity(cfg.scales.len());
    for &s in &cfg.scales {
        let view = scaled_view(net, image, s)?;
        all.extend(single_from_view(net, &view, w, h, cfg, nms_cfg)?);
        views.push(view);
    }
    let merged = suppress(all, nms_cfg.inter, cfg.max_proposals)?;
    Ok((merged, views))
}

/// Union of the per-scale proposals, inter-scale NMS, best `max_proposals`.
pub fn propose_multiscale<T: Real>(
    net: &mut ZipNet<T>,
    image: &Tensor<T>,
    cfg: &TestConfig,
    nms_cfg: &NmsConfig,
) -> Result<Vec<Proposal>> {
    Ok(multiscale_with_views(net, image, cfg, nms_cfg)?.0)
}

/// Boxes `R(0..=q)` of the recursive branch on one pyramid, plus the
/// positive-class probability computed at each stage. `boxes` are in
/// pyramid coordinates and every stage is clamped to `width x height`.
pub fn refine_trajectory<T: Real>(
    net: &mut ZipNet<T>,
    pyr: &Pyramid<T>,
    boxes: &[BBox],
    width: usize,
    height: usize,
    q: usize,
) -> Result<(Vec<Vec<BBox>>, Vec<Vec<f64>>)> {
    let mut trajectory = vec![boxes.to_vec()];
    let mut probs = Vec::with_capacity(q);
    for _ in 0..q {
        let prev = trajectory.last().expect("non-empty trajectory");
        let (out, _) = net.roi_forward(pyr, prev)?;
        let next = crate::zipnet::advance(&out, prev, width, height)?;
        probs.push(out.pos_prob);
        trajectory.push(next);
    }
    Ok((trajectory, probs))
}

/// Refined proposal sets, one per entry of `depths`, from a single pass
/// to the deepest stage.
fn refine_with_views<T: Real>(
    net: &mut ZipNet<T>,
    views: &[ScaledView<T>],
    width: usize,
    height: usize,
    proposals: &[Proposal],
    depths: &[usize],
    nms_cfg: &NmsConfig,
) -> Result<Vec<Vec<Proposal>>> {
    if proposals.is_empty() {
        return Ok(vec![Vec::new(); depths.len()]);
    }
    let deepest = depths.iter().copied().max().unwrap_or(1).max(1);
    let n = proposals.len();
    let mut sum = vec![vec![[0.0f64; 4]; n]; depths.len()];
    let mut prob = vec![vec![0.0f64; n]; depths.len()];
    for view in views {
        let scaled: Vec<BBox> = proposals.iter().map(|p| view.to_scaled(&p.bbox)).collect();
        let (traj, pos) = refine_trajectory(net, &view.pyramid, &scaled, view.width, view.height, deepest)?;
        for (d, &q) in depths.iter().enumerate() {
            let q = q.max(1);
            for (i, b) in traj[q].iter().enumerate() {
                let o = view.to_original(b, width, height);
                for (acc, v) in sum[d][i].iter_mut().zip(o.as_array()) {
                    *acc += v;
                }
                prob[d][i] += pos[q - 1][i];
            }
        }
    }
    let k = views.len() as f64;
    let mut out = Vec::with_capacity(depths.len());
    for d in 0..depths.len() {
        let refined: Vec<Proposal> = proposals
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let s = sum[d][i];
                let bbox = clamp_box(&BBox::new(s[0] / k, s[1] / k, s[2] / k, s[3] / k), width, height);
                Proposal {
                    bbox,
                    score: p.score + prob[d][i] / k,
                    level: assign_roi_level(&bbox),
                    scale_tag: p.scale_tag,
                    stage: Stage::Refined,
                }
            })
            .collect();
        out.push(suppress(refined, nms_cfg.final_, usize::MAX)?);
    }
    Ok(out)
}

/// Refines `proposals` at every test scale, averages the final boxes across
/// scales, adds the mean refined positive probability to each score and
/// applies the final NMS.
pub fn refine<T: Real>(
    net: &mut ZipNet<T>,
    image: &Tensor<T>,
    proposals: &[Proposal],
    cfg: &TestConfig,
    nms_cfg: &NmsConfig,
) -> Result<Vec<Proposal>> {
    let (w, h) = dims(image)?;
    let views = cfg
        .scales
        .iter()
        .map(|&s| scaled_view(net, image, s))
        .collect::<Result<Vec<_>>>()?;
    let q = cfg.depth(net.config.q);
    Ok(refine_with_views(net, &views, w, h, proposals, &[q], nms_cfg)?.remove(0))
}

/// Intermediate results of one [`propose`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineDump {
    /// Inter-scale merge of the first-branch proposals.
    pub merged: Vec<Proposal>,
    pub final_: Vec<Proposal>,
}

/// Full pipeline keeping the merged first-branch set.
pub fn propose_with_dump<T: Real>(
    net: &mut ZipNet<T>,
    image: &Tensor<T>,
    cfg: &TestConfig,
    nms_cfg: &NmsConfig,
) -> Result<PipelineDump> {
    let depths = if cfg.refine { vec![cfg.depth(net.config.q)] } else { Vec::new() };
    let (merged, mut sweep) = propose_sweep(net, image, cfg, nms_cfg, &depths)?;
    let final_ = if cfg.refine { sweep.remove(0) } else { truncated(&merged, cfg.top_k) };
    Ok(PipelineDump { merged, final_ })
}

fn truncated(p: &[Proposal], k: usize) -> Vec<Proposal> {
    p[..p.len().min(k)].to_vec()
}

/// The merged first-branch set and the top-k refined output for every
/// recursion depth in `depths`, sharing one pass per scale.
pub fn propose_sweep<T: Real>(
    net: &mut ZipNet<T>,
    image: &Tensor<T>,
    cfg: &TestConfig,
    nms_cfg: &NmsConfig,
    depths: &[usize],
) -> Result<(Vec<Proposal>, Vec<Vec<Proposal>>)> {
    let (w, h) = dims(image)?;
    let (merged, views) = multiscale_with_views(net, image, cfg, nms_cfg)?;
    if depths.is_empty() {
        return Ok((merged, Vec::new()));
    }
    let refined = refine_with_views(net, &views, w, h, &merged, depths, nms_cfg)?;
    Ok((merged, refined.iter().map(|r| truncated(r, cfg.top_k)).collect()))
}

/// Multi-scale proposals, refinement, top-k.
pub fn propose<T: Real>(
    net: &mut ZipNet<T>,
    image: &Tensor<T>,
    cfg: &TestConfig,
    nms_cfg: &NmsConfig,
) -> Result<Vec<Proposal>> {
    Ok(propose_with_dump(net, image, cfg, nms_cfg)?.final_)
}

/// Per-image output record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalSet {
    pub image_id: String,
    /// `[x1, y1, x2, y2, score]`, descending score.
    pub boxes: Vec<[f64; 5]>,
}

impl ProposalSet {
    pub fn new(image_id: impl Into<String>, proposals: &[Proposal]) -> Self {
        let order = score_order(&proposals.iter().map(|p| p.score).collect::<Vec<_>>());
        ProposalSet {
            image_id: image_id.into(),
            boxes: order
                .into_iter()
                .map(|i| {
                    let b = proposals[i].bbox;
                    [b.x1, b.y1, b.x2, b.y2, proposals[i].score]
                })
                .collect(),
        }
    }

    pub fn scored_boxes(&self) -> Vec<(BBox, f64)> {
        self.boxes.iter().map(|r| (BBox::new(r[0], r[1], r[2], r[3]), r[4])).collect()
    }
}

pub fn save_proposals(path: &Path, sets: &[ProposalSet]) -> Result<()> {
    let text = serde_json::to_string_pretty(sets).map_err(|e| ZipError::Data(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_proposals(path: &Path) -> Result<Vec<ProposalSet>> {
    let text = std::fs::read_to_string(path)?;
    let sets: Vec<ProposalSet> = serde_json::from_str(&text).map_err(|e| ZipError::Data(format!("{}: {e}", path.display())))?;
    for s in &sets {
        if s.boxes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ZipError::Data(format!("non-finite value in proposals for {}", s.image_id)));
        }
    }
    Ok(sets)
}

/// Flat form: `image_id,rank,x1,y1,x2,y2,score`.
pub fn write_proposals_csv<W: Write>(mut out: W, sets: &[ProposalSet]) -> Result<()> {
    writeln!(out, "image_id,rank,x1,y1,x2,y2,score")?;
    for s in sets {
        for (rank, r) in s.boxes.iter().enumerate() {
            writeln!(out, "{},{},{},{},{},{},{}", s.image_id, rank, r[0], r[1], r[2], r[3], r[4])?;
        }
    }
    Ok(())
}
