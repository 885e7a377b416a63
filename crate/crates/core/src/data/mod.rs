//! Synthetic dataset generation and image/annotation IO.

mod image;
mod manifest;
mod ppm;
mod shapeworld;

pub use image::{pad_to_multiple, resize_bilinear, to_tensor};
pub use manifest::{
    load_annotations, parse_annotations, save_annotations, Dataset, DatasetManifest, ImageEntry, MANIFEST_VERSION,
};
pub use ppm::{decode_ppm, encode_ppm, read_image, write_image, RgbImage};
pub use shapeworld::{
    gen_shapeworld, manifest_for, write_dataset, AnnotatedImage, DEFAULT_MIX, MARGIN, MAX_PAIR_IOU, REGIME_FRACTIONS,
};
