//! Training datasets: cameras with ground-truth images, described by a JSON
//! manifest whose image paths are relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraRecord};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub camera: CameraRecord,
    pub image: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub cameras: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<Vec<usize>>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialization cannot fail");
        fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Cameras and their ground truth in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub probe: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(cameras: Vec<Camera>, images: Vec<Image>) -> Result<Self> {
        let d = Self {
            cameras,
            images,
            probe: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() != self.images.len() {
            return Err(Error::InvalidInput(format!(
                "{} cameras but {} images",
                self.cameras.len(),
                self.images.len()
            )));
        }
        for (c, im) in self.cameras.iter().zip(&self.images) {
            if (c.width, c.height) != im.dims() {
                return Err(Error::DimensionMismatch {
                    expected: (c.width, c.height),
                    actual: im.dims(),
                });
            }
        }
        if let Some(p) = &self.probe {
            if let Some(bad) = p.iter().find(|&&i| i >= self.len()) {
                return Err(Error::InvalidInput(format!("probe view {bad} out of range")));
            }
        }
        Ok(())
    }

    /// Probe views: the manifest's, or `{0, n/4, n/2, 3n/4}` deduplicated.
    pub fn probe_ids(&self) -> Vec<usize> {
        if let Some(p) = &self.probe {
            return p.clone();
        }
        let n = self.len();
        let mut ids: Vec<usize> = [0, n / 4, n / 2, 3 * n / 4].into_iter().filter(|&i| i < n).collect();
        ids.dedup();
        ids
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let mut cameras = Vec::with_capacity(manifest.cameras.len());
        let mut images = Vec::with_capacity(manifest.cameras.len());
        for entry in &manifest.cameras {
            let path = base.join(&entry.image);
            if !path.exists() {
                return Err(Error::InvalidInput(format!("image {} does not exist", path.display())));
            }
            cameras.push(Camera::from_record(&entry.camera)?);
            images.push(Image::load(&path)?);
        }
        let d = Self {
            cameras,
            images,
            probe: manifest.probe,
        };
        d.validate()?;
        Ok(d)
    }

    /// Writes `manifest.json` and one image per view (`view_XXX.<ext>`) into `dir`.
    pub fn save(&self, dir: &Path, ext: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, (c, im)) in self.cameras.iter().zip(&self.images).enumerate() {
            let name = format!("view_{i:03}.{ext}");
            im.save(&dir.join(&name))?;
            entries.push(ManifestEntry {
                camera: c.to_record(),
                image: name,
            });
        }
        let path = dir.join("manifest.json");
        DatasetManifest {
            cameras: entries,
            probe: self.probe.clone(),
        }
        .save(&path)?;
        Ok(path)
    }
}
