//! Shape-world: noisy flat backgrounds with a few solid shapes whose
//! bounding boxes are the ground truth.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, ZipError};
use crate::geometry::{iou, BBox};

use super::manifest::{save_annotations, DatasetManifest, ImageEntry, MANIFEST_VERSION};
use super::{write_image, RgbImage};

/// Nominal `sqrt(area)` of each size regime as a fraction of the side.
pub const REGIME_FRACTIONS: [f64; 3] = [1.0 / 12.0, 1.0 / 5.0, 1.0 / 2.0];
pub const DEFAULT_MIX: [f64; 3] = [0.35, 0.4, 0.25];
pub const MAX_PAIR_IOU: f64 = 0.3;
pub const MARGIN: usize = 2;
const PLACEMENT_TRIES: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub image: RgbImage,
    pub gts: Vec<BBox>,
    pub regimes: Vec<u8>,
}

impl AnnotatedImage {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Rect,
    Ellipse,
    Triangle,
}

fn covers(shape: Shape, b: &BBox, px: f64, py: f64) -> bool {
    if px < b.x1 || px > b.x2 || py < b.y1 || py > b.y2 {
        return false;
    }
    let (cx, cy) = b.center();
    match shape {
        Shape::Rect => true,
        Shape::Ellipse => {
            let dx = (px - cx) / (0.5 * b.width());
            let dy = (py - cy) / (0.5 * b.height());
            dx * dx + dy * dy <= 1.0
        }
        Shape::Triangle => (px - cx).abs() <= 0.5 * b.width() * (py - b.y1) / b.height(),
    }
}

fn paint(img: &mut RgbImage, shape: Shape, b: &BBox, rgb: [u8; 3]) {
    let (x0, x1) = (b.x1.floor() as usize, (b.x2.ceil() as usize).min(img.width));
    let (y0, y1) = (b.y1.floor() as usize, (b.y2.ceil() as usize).min(img.height));
    for y in y0..y1 {
        for x in x0..x1 {
            if covers(shape, b, x as f64 + 0.5, y as f64 + 0.5) {
                img.put(x, y, rgb);
            }
        }
    }
}

fn generate_one(id: String, side: usize, dist: &WeightedIndex<f64>, rng: &mut ChaCha8Rng) -> AnnotatedImage {
    let base: i32 = rng.random_range(80..=176);
    let mut pixels = Vec::with_capacity(side * side * 3);
    for _ in 0..side * side * 3 {
        pixels.push((base + rng.random_range(-12..=12)).clamp(0, 255) as u8);
    }
    let mut image = RgbImage { width: side, height: side, pixels };

    let count = rng.random_range(1..=4);
    let mut gts: Vec<BBox> = Vec::new();
    let mut regimes = Vec::new();
    let max_extent = (side - 2 * MARGIN) as f64;
    for _ in 0..count {
        let regime = dist.sample(rng);
        let scale = side as f64 * REGIME_FRACTIONS[regime] * rng.random_range(0.8f64.ln()..1.25f64.ln()).exp();
        let ratio = rng.random_range((1.0f64 / 3.0).ln()..3.0f64.ln()).exp();
        let w = (scale * ratio.sqrt()).round().clamp(4.0, max_extent);
        let h = (scale / ratio.sqrt()).round().clamp(4.0, max_extent);
        let shape = match rng.random_range(0..3) {
            0 => Shape::Rect,
            1 => Shape::Ellipse,
            _ => Shape::Triangle,
        };
        let rgb = loop {
            let c: [u8; 3] = [rng.random(), rng.random(), rng.random()];
            if c.iter().any(|&v| (v as i32 - base).abs() >= 64) {
                break c;
            }
        };
        let hi_x = side - MARGIN - w as usize;
        let hi_y = side - MARGIN - h as usize;
        for _ in 0..PLACEMENT_TRIES {
            let x1 = rng.random_range(MARGIN..=hi_x) as f64;
            let y1 = rng.random_range(MARGIN..=hi_y) as f64;
            let b = BBox::new(x1, y1, x1 + w, y1 + h);
            if gts.iter().all(|g| iou(g, &b) <= MAX_PAIR_IOU) {
                paint(&mut image, shape, &b, rgb);
                gts.push(b);
                regimes.push(regime as u8);
                break;
            }
        }
    }
    AnnotatedImage {
        image_id: id,
        image,
        gts,
        regimes,
    }
}

/// Deterministic in `(n, side, seed, mix)`; image `i` draws from its own
/// ChaCha stream so any subset can be regenerated independently.
pub fn gen_shapeworld(n: usize, side: usize, seed: u64, mix: [f64; 3]) -> Result<Vec<AnnotatedImage>> {
    if side < 64 {
        return Err(ZipError::invalid("gen_shapeworld", format!("side {side} is below the 64 px minimum")));
    }
    let dist = WeightedIndex::new(mix)
        .map_err(|e| ZipError::invalid("gen_shapeworld", format!("size-regime mix {mix:?}: {e}")))?;
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_one(format!("img{i:05}"), side, &dist, &mut rng)
        })
        .collect())
}

pub fn manifest_for(images: &[AnnotatedImage], seed: u64, mix: Option<[f64; 3]>) -> DatasetManifest {
    DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        mix,
        images: images
            .iter()
            .map(|a| ImageEntry {
                id: a.image_id.clone(),
                file: format!("{}.ppm", a.image_id),
                width: a.width(),
                height: a.height(),
                boxes: a.gts.iter().map(BBox::as_array).collect(),
                regimes: a.regimes.clone(),
            })
            .collect(),
    }
}

/// Writes one PPM per image plus `manifest.json` into `dir`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    images: &[AnnotatedImage],
    seed: u64,
    mix: Option<[f64; 3]>,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let manifest = manifest_for(images, seed, mix);
    for (a, e) in images.iter().zip(&manifest.images) {
        write_image(dir.join(&e.file), &a.image)?;
    }
    save_annotations(&manifest, dir.join("manifest.json"))?;
    Ok(manifest)
}
