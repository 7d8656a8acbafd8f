//! Dataset manifests: a TOML list of image/label file pairs.
//!
//! ```toml
//! height = 512
//! width = 512
//! pixel_size_nm = 4.0
//!
//! [[samples]]
//! image = "train/00.png"
//! label = "labels/00.png"
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::imageio::{read_gray, read_label};
use crate::error::{Error, Result};
use crate::grid::{Image, SamplePair};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_size_nm: Option<f64>,
    #[serde(default)]
    pub samples: Vec<ManifestEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn from_toml(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m: DatasetManifest = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        m.root = root.into();
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, format!("cannot read manifest: {e}")))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        DatasetManifest::from_toml(&text, root).map_err(|e| Error::file(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::file(path, format!("cannot write manifest: {e}")))
    }

    /// Paths are resolved against `root` from now on.
    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = root.into();
        self
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn check_dims(&self, path: &Path, img: &Image) -> Result<()> {
        let (h, w) = img.dims();
        if self.height.is_some_and(|d| d != h) || self.width.is_some_and(|d| d != w) {
            return Err(Error::file(
                path,
                format!(
                    "image is {h}×{w}, manifest declares {}×{}",
                    self.height.map_or("?".into(), |v| v.to_string()),
                    self.width.map_or("?".into(), |v| v.to_string())
                ),
            ));
        }
        Ok(())
    }

    /// Images only; labels are not required.
    pub fn load_images(&self) -> Result<Vec<(PathBuf, Image)>> {
        self.samples
            .iter()
            .map(|e| {
                let path = self.resolve(&e.image);
                let img = read_gray(&path)?;
                self.check_dims(&path, &img)?;
                Ok((path, img))
            })
            .collect()
    }
}

/// Decodes every pair: images scaled to `[0, 1]`, labels binarized at 0.5.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<SamplePair>> {
    let mut out = Vec::with_capacity(manifest.len());
    for entry in &manifest.samples {
        let ipath = manifest.resolve(&entry.image);
        let lrel = entry
            .label
            .as_ref()
            .ok_or_else(|| Error::file(&ipath, "manifest entry has no label"))?;
        let lpath = manifest.resolve(lrel);
        let image = read_gray(&ipath)?;
        manifest.check_dims(&ipath, &image)?;
        let label = read_label(&lpath)?;
        if label.dims() != image.dims() {
            return Err(Error::file(
                &lpath,
                format!(
                    "label is {}×{}, image is {}×{}",
                    label.height(),
                    label.width(),
                    image.height(),
                    image.width()
                ),
            ));
        }
        out.push(SamplePair { image, label });
    }
    Ok(out)
}
