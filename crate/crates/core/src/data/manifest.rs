use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZipError};
use crate::geometry::BBox;

use super::{read_image, RgbImage};

pub const MANIFEST_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<[f64; 4]>,
    /// Size regime of each box (0 small, 1 medium, 2 large) when generated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regimes: Vec<u8>,
}

impl ImageEntry {
    pub fn gts(&self) -> Vec<BBox> {
        self.boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix: Option<[f64; 3]>,
    pub images: Vec<ImageEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.images {
            if !seen.insert(e.id.as_str()) {
                return Err(ZipError::Data(format!("duplicate image id `{}`", e.id)));
            }
            for b in e.gts() {
                if !b.is_valid() {
                    return Err(ZipError::Data(format!("image `{}`: invalid box {:?}", e.id, b.as_array())));
                }
            }
        }
        Ok(())
    }

    pub fn entry(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|e| e.id == id)
    }
}

pub fn save_annotations(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn parse_annotations(text: &str) -> Result<DatasetManifest> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| ZipError::Data("manifest: missing integer `version`".into()))?;
    if version != MANIFEST_VERSION {
        return Err(ZipError::UnknownVersion { what: "manifest", version });
    }
    let manifest: DatasetManifest = serde_json::from_value(value)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    parse_annotations(&std::fs::read_to_string(path)?)
}

/// A manifest together with the directory its image paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest = load_annotations(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Dataset { root, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.images.is_empty()
    }

    pub fn image(&self, i: usize) -> Result<RgbImage> {
        let e = &self.manifest.images[i];
        let img = read_image(self.root.join(&e.file))?;
        if (img.width, img.height) != (e.width, e.height) {
            return Err(ZipError::Data(format!(
                "image `{}` is {}x{}, manifest says {}x{}",
                e.id, img.width, img.height, e.width, e.height
            )));
        }
        Ok(img)
    }

    /// Every image with its annotations, in manifest order.
    pub fn load_all(&self) -> Result<Vec<super::AnnotatedImage>> {
        (0..self.len())
            .map(|i| {
                let e = &self.manifest.images[i];
                Ok(super::AnnotatedImage {
                    image_id: e.id.clone(),
                    image: self.image(i)?,
                    gts: e.gts(),
                    regimes: e.regimes.clone(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file() {
        let m = parse_annotations(
            r#"{"version":1,"seed":0,"images":[{"id":"a","file":"a.ppm","width":64,"height":64,"boxes":[[1,2,30,40]]}]}"#,
        )
        .unwrap();
        assert_eq!(m.images.len(), 1);
        assert_eq!(m.images[0].gts(), vec![BBox::new(1.0, 2.0, 30.0, 40.0)]);
    }

    #[test]
    fn unknown_version() {
        let err = parse_annotations(r#"{"version":7,"seed":0,"images":[]}"#).unwrap_err();
        assert!(matches!(err, ZipError::UnknownVersion { version: 7, .. }));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = r#"{"id":"a","file":"a.ppm","width":64,"height":64,"boxes":[]}"#;
        let text = format!(r#"{{"version":1,"seed":0,"images":[{e},{e}]}}"#);
        assert!(parse_annotations(&text).is_err());
    }
}
