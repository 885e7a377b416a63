//! The zoom out-and-in proposal network: backbone, zoom-in path, merged
//! pyramid, per-level anchor heads and the shared RoI refinement tower.

mod features;
mod heads;
mod layers;
mod roi;
mod train;

use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{cluster_by_level, make_templates, AnchorTemplate, LevelRanges};
use crate::error::{Result, ZipError};
use crate::tensor::{read_checkpoint, write_checkpoint, ConvGeom, NamedTensor, Parameter, Real};

pub use features::{FeatureCache, Pyramid};
pub use heads::{decode_level, first_branch_from_heads, HeadCache, HeadOutput, LevelProposals, RawProposal};
pub use layers::{Bn, Conv, ConvBlock, Deconv, Fc, ResBlock};
pub use roi::{advance, assign_roi_level, RoiCache, RoiOutput, ROI_LEVEL_CUTS};
pub use train::{level_loss, lr_at, LevelLoss, RecursionOutput, StepReport, TrainConfig, Trainer};

pub const LEVELS: usize = 3;
pub const CLASSES: usize = 3;
pub const POSITIVE: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZipConfig {
    /// Channels of the first two stride-2 blocks.
    pub stem_width: usize,
    /// Channels of F^1, F^2, F^3. The merged maps use `widths[2]`.
    pub widths: [usize; 3],
    /// Stride-1 conv blocks appended to each backbone stage.
    pub extra_blocks: usize,
    pub head_channels: usize,
    pub zoom_in: bool,
    pub q: usize,
    pub roi_grid: [usize; 2],
    pub res_blocks: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub level_ranges: LevelRanges,
    pub strides: [usize; 3],
}

impl Default for ZipConfig {
    fn default() -> Self {
        ZipConfig {
            stem_width: 16,
            widths: [32, 64, 128],
            extra_blocks: 1,
            head_channels: 128,
            zoom_in: true,
            q: 2,
            roi_grid: [3, 3],
            res_blocks: 3,
            anchor_scales: vec![16.0, 32.0, 64.0, 128.0, 256.0, 512.0],
            anchor_ratios: vec![0.15, 0.5, 1.0, 2.0, 6.7],
            level_ranges: LevelRanges::default(),
            strides: [8, 16, 32],
        }
    }
}

impl ZipConfig {
    pub fn merged_channels(&self) -> usize {
        self.widths[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_width == 0 || self.widths.contains(&0) || self.head_channels == 0 {
            return Err(ZipError::config("model.widths", "channel counts must be positive"));
        }
        if self.q < 1 {
            return Err(ZipError::config("model.q", "recursion count must be at least 1"));
        }
        if self.roi_grid.contains(&0) {
            return Err(ZipError::config("model.roi_grid", "grid extents must be positive"));
        }
        if self.strides != [8, 16, 32] {
            return Err(ZipError::config("model.strides", "the backbone produces strides 8, 16 and 32 only"));
        }
        if self.level_ranges.len() != LEVELS {
            return Err(ZipError::config("model.level_ranges", format!("expected {LEVELS} levels")));
        }
        self.level_ranges.validate()?;
        for (m, t) in self.level_templates()?.iter().enumerate() {
            if t.is_empty() {
                return Err(ZipError::config("model.anchor_scales", format!("level {m} receives no anchor scale")));
            }
        }
        Ok(())
    }

    pub fn level_templates(&self) -> Result<Vec<Vec<AnchorTemplate>>> {
        let all = make_templates(&self.anchor_scales, &self.anchor_ratios)
            .map_err(|e| ZipError::config("model.anchor_scales", e.to_string()))?;
        Ok(cluster_by_level(&all, &self.level_ranges))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ZoomIn<T: Real> {
    pub deconv3: Deconv<T>,
    pub block3: ConvBlock<T>,
    pub deconv2: Deconv<T>,
    pub block2: ConvBlock<T>,
}

/// `relu(conv_f(F) + conv_h(H) + b)`; `conv_h` is absent without zoom-in.
#[derive(Clone, Debug)]
pub(crate) struct Merge<T: Real> {
    pub conv_f: Conv<T>,
    pub conv_h: Option<Conv<T>>,
}

#[derive(Clone, Debug)]
pub(crate) struct Head<T: Real> {
    pub conv: Conv<T>,
    pub cls: Conv<T>,
    pub reg: Conv<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct Tower<T: Real> {
    pub blocks: Vec<ResBlock<T>>,
    pub cls: Fc<T>,
    pub reg: Fc<T>,
}

#[derive(Clone, Debug)]
pub struct ZipNet<T: Real = f64> {
    pub config: ZipConfig,
    pub(crate) templates: Vec<Vec<AnchorTemplate>>,
    pub(crate) stages: [Vec<ConvBlock<T>>; 3],
    pub(crate) zoom: Option<ZoomIn<T>>,
    pub(crate) merge: Vec<Merge<T>>,
    pub(crate) heads: Vec<Head<T>>,
    pub(crate) tower: Tower<T>,
}

impl<T: Real> ZipNet<T> {
    pub fn new(config: ZipConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let templates = config.level_templates()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let [w1, w2, w3] = config.widths;
        let c = config.merged_channels();
        let s = config.stem_width;

        let mut stage1 = vec![
            ConvBlock::new("backbone.s1.b0", 3, s, 2, false, rng),
            ConvBlock::new("backbone.s1.b1", s, s, 2, false, rng),
            ConvBlock::new("backbone.s1.b2", s, w1, 2, false, rng),
        ];
        let mut stage2 = vec![ConvBlock::new("backbone.s2.b0", w1, w2, 1, false, rng)];
        let mut stage3 = vec![ConvBlock::new("backbone.s3.b0", w2, w3, 1, false, rng)];
        for (stage, width, tag) in [(&mut stage1, w1, "s1"), (&mut stage2, w2, "s2"), (&mut stage3, w3, "s3")] {
            let base = stage.len();
            for i in 0..config.extra_blocks {
                stage.push(ConvBlock::new(&format!("backbone.{tag}.b{}", base + i), width, width, 1, false, rng));
            }
        }

        let zoom = config.zoom_in.then(|| ZoomIn {
            deconv3: Deconv::new("zoom.up3", w3, w2, rng),
            block3: ConvBlock::new("zoom.block3", w2, w2, 1, false, rng),
            deconv2: Deconv::new("zoom.up2", w2, w1, rng),
            block2: ConvBlock::new("zoom.block2", w1, w1, 1, false, rng),
        });

        let geom = ConvGeom::new(1, 1);
        let merge = [w1, w2]
            .iter()
            .enumerate()
            .map(|(m, &wm)| Merge {
                conv_f: Conv::new(&format!("merge{m}.f"), wm, c, 3, geom, true, None, rng),
                conv_h: config
                    .zoom_in
                    .then(|| Conv::new(&format!("merge{m}.h"), wm, c, 3, geom, false, None, rng)),
            })
            .collect();

        let one = ConvGeom::new(1, 0);
        let hc = config.head_channels;
        let heads = templates
            .iter()
            .enumerate()
            .map(|(m, t)| Head {
                conv: Conv::new(&format!("head{m}.conv"), c, hc, 3, geom, true, None, rng),
                cls: Conv::new(&format!("head{m}.cls"), hc, CLASSES * t.len(), 1, one, true, Some(0.01), rng),
                reg: Conv::new(&format!("head{m}.reg"), hc, 4 * t.len(), 1, one, true, Some(0.001), rng),
            })
            .collect();

        let tower = Tower {
            blocks: (0..config.res_blocks)
                .map(|i| ResBlock::new(&format!("tower.res{i}"), c, true, rng))
                .collect(),
            cls: Fc::new("tower.cls", c, CLASSES, 0.01, rng),
            reg: Fc::new("tower.reg", c, 4, 0.001, rng),
        };

        Ok(ZipNet {
            config,
            templates,
            stages: [stage1, stage2, stage3],
            zoom,
            merge,
            heads,
            tower,
        })
    }

    pub fn templates(&self, level: usize) -> &[AnchorTemplate] {
        &self.templates[level]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = Vec::new();
        for stage in self.stages.iter_mut() {
            for b in stage.iter_mut() {
                b.params_mut(&mut out);
            }
        }
        if let Some(z) = self.zoom.as_mut() {
            z.deconv3.params_mut(&mut out);
            z.block3.params_mut(&mut out);
            z.deconv2.params_mut(&mut out);
            z.block2.params_mut(&mut out);
        }
        for m in self.merge.iter_mut() {
            m.conv_f.params_mut(&mut out);
            if let Some(h) = m.conv_h.as_mut() {
                h.params_mut(&mut out);
            }
        }
        for h in self.heads.iter_mut() {
            h.conv.params_mut(&mut out);
            h.cls.params_mut(&mut out);
            h.reg.params_mut(&mut out);
        }
        for b in self.tower.blocks.iter_mut() {
            b.params_mut(&mut out);
        }
        self.tower.cls.params_mut(&mut out);
        self.tower.reg.params_mut(&mut out);
        out
    }

    pub fn bns_mut(&mut self) -> Vec<&mut Bn<T>> {
        let mut out = Vec::new();
        for stage in self.stages.iter_mut() {
            for b in stage.iter_mut() {
                b.bns_mut(&mut out);
            }
        }
        if let Some(z) = self.zoom.as_mut() {
            z.block3.bns_mut(&mut out);
            z.block2.bns_mut(&mut out);
        }
        for b in self.tower.blocks.iter_mut() {
            b.bns_mut(&mut out);
        }
        out
    }

    /// Snapshot of parameter values by name.
    pub fn parameter_values(&mut self) -> Vec<(String, Vec<T>)> {
        self.parameters_mut()
            .into_iter()
            .map(|p| (p.name.clone(), p.value().data().to_vec()))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&mut self) -> usize {
        self.parameters_mut().iter().map(|p| p.value().len()).sum()
    }

    /// Parameters, momentum buffers and normalization statistics as named
    /// records.
    pub fn state_records(&mut self) -> Vec<NamedTensor> {
        let mut rec = Vec::new();
        for p in self.parameters_mut() {
            rec.push(NamedTensor::from_tensor(p.name.clone(), p.value()));
            rec.push(NamedTensor::from_slice(format!("{}#momentum", p.name), p.momentum()));
        }
        for bn in self.bns_mut() {
            let c = bn.stats.channels();
            rec.push(NamedTensor::from_slice(format!("{}#mean", bn.name), &bn.stats.mean));
            rec.push(NamedTensor::from_slice(format!("{}#var", bn.name), &bn.stats.var));
            let flag = if bn.stats.initialized { 1.0 } else { 0.0 };
            rec.push(NamedTensor {
                name: format!("{}#initialized", bn.name),
                shape: vec![1],
                values: vec![flag],
            });
            debug_assert_eq!(bn.stats.mean.len(), c);
        }
        rec
    }

    pub fn load_records(&mut self, records: &[NamedTensor]) -> Result<()> {
        let map: std::collections::HashMap<&str, &NamedTensor> =
            records.iter().map(|r| (r.name.as_str(), r)).collect();
        let fetch = |name: &str, len: usize| -> Result<Vec<T>> {
            let r = map
                .get(name)
                .ok_or_else(|| ZipError::Checkpoint(format!("missing record `{name}`")))?;
            if r.values.len() != len {
                return Err(ZipError::Checkpoint(format!(
                    "record `{name}` holds {} values, expected {len}",
                    r.values.len()
                )));
            }
            Ok(r.values.iter().map(|&v| T::from_f64(v)).collect())
        };
        let mut expected = 0;
        for p in self.parameters_mut() {
            let n = p.value().len();
            let v = fetch(&p.name, n)?;
            p.set_values(&v)?;
            let m = fetch(&format!("{}#momentum", p.name), n)?;
            p.momentum_mut().copy_from_slice(&m);
            p.zero_grad();
            expected += 2;
        }
        for bn in self.bns_mut() {
            let c = bn.stats.channels();
            bn.stats.mean = fetch(&format!("{}#mean", bn.name), c)?;
            bn.stats.var = fetch(&format!("{}#var", bn.name), c)?;
            bn.stats.initialized = fetch(&format!("{}#initialized", bn.name), 1)?[0] != T::zero();
            expected += 3;
        }
        if expected != records.len() {
            return Err(ZipError::Checkpoint(format!(
                "checkpoint has {} records, network expects {expected}",
                records.len()
            )));
        }
        Ok(())
    }

    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        write_checkpoint(BufWriter::new(f), &self.state_records())
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::open(path)?;
        let records = read_checkpoint(BufReader::new(f))?;
        self.load_records(&records)
    }
}
