//! On-disk dataset layout: `images/*.pgm|*.ppm`, `gt.csv`, and optionally
//! `manifest.txt` (for `classes = N`) and `views.csv` (`image_id,view`).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::csv::read_ground_truth;
use crate::data::pnm::Raster;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::train::Sample;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub image_id: String,
    pub path: PathBuf,
    pub gts: Vec<GroundTruth>,
    pub view: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
    /// Foreground classes, ids `1..=classes`.
    pub classes: usize,
}

/// Image files (P5/P6 by extension) in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")));
    paths.sort();
    Ok(paths)
}

pub fn image_id_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn manifest_classes(path: &Path) -> Result<Option<usize>> {
    if !path.exists() {
        return Ok(None);
    }
    for line in fs::read_to_string(path)?.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == "classes" {
                return v
                    .trim()
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::format(path, format!("bad class count `{}`", v.trim())));
            }
        }
    }
    Ok(None)
}

fn read_views(path: &Path) -> Result<HashMap<String, String>> {
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let mut views = HashMap::new();
    for (n, line) in fs::read_to_string(path)?.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, view) = line
            .split_once(',')
            .ok_or_else(|| Error::format(path, format!("line {}: expected image_id,view", n + 1)))?;
        views.insert(id.trim().to_string(), view.trim().to_string());
    }
    Ok(views)
}

impl DatasetIndex {
    pub fn load(root: &Path) -> Result<Self> {
        let images = list_images(&root.join("images"))?;
        let gts = read_ground_truth(&root.join("gt.csv"))?;
        let views = read_views(&root.join("views.csv"))?;
        let mut by_image: BTreeMap<String, Vec<GroundTruth>> = BTreeMap::new();
        for g in gts {
            by_image.entry(g.image_id.clone()).or_default().push(g);
        }
        let max_class = by_image.values().flatten().map(|g| g.class_id).max().unwrap_or(1);
        let classes = manifest_classes(&root.join("manifest.txt"))?.unwrap_or(max_class);
        if let Some(g) = by_image.values().flatten().find(|g| g.class_id == 0 || g.class_id > classes) {
            return Err(Error::Data(format!(
                "image {}: class {} outside 1..={classes}",
                g.image_id, g.class_id
            )));
        }
        let entries: Vec<DatasetEntry> = images
            .into_iter()
            .map(|path| {
                let image_id = image_id_of(&path);
                DatasetEntry {
                    gts: by_image.remove(&image_id).unwrap_or_default(),
                    view: views.get(&image_id).cloned(),
                    image_id,
                    path,
                }
            })
            .collect();
        if let Some(id) = by_image.keys().next() {
            return Err(Error::Data(format!("gt.csv references missing image `{id}`")));
        }
        Ok(DatasetIndex {
            root: root.to_path_buf(),
            entries,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries tagged with `view`.
    pub fn with_view(&self, view: &str) -> DatasetIndex {
        DatasetIndex {
            entries: self
                .entries
                .iter()
                .filter(|e| e.view.as_deref() == Some(view))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.entries.iter().flat_map(|e| e.gts.iter().cloned()).collect()
    }

    /// Loads every image as a training sample with values in [0, 1].
    pub fn samples(&self) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(Sample {
                    image_id: e.image_id.clone(),
                    image: Raster::read(&e.path)?.to_tensor(),
                    boxes: e.gts.iter().map(|g| g.bbox).collect(),
                    classes: e.gts.iter().map(|g| g.class_id).collect(),
                })
            })
            .collect()
    }
}
