use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::raster::{read_raster, write_raster};
use super::scene::{generate_scene, SceneConfig};
use super::Sample;
use crate::error::{Error, Result};

/// Contents of `meta.json` in a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub classes: usize,
    pub count: usize,
    pub seed: u64,
    pub theta: f64,
    pub scene: SceneConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &crate::tensor::LabelMap> {
        self.samples.iter().map(|s| &s.labels)
    }

    /// Samples `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            classes: self.classes,
            samples: self.samples[start..end].to_vec(),
        }
    }
}

/// Scenes `first .. first + count` of the stream defined by `cfg`.
pub fn generate_dataset(cfg: &SceneConfig, first: u64, count: usize) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::config("dataset count must be positive"));
    }
    let samples = (0..count as u64)
        .map(|i| generate_scene(cfg, first + i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        classes: cfg.classes,
        samples,
    })
}

fn image_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join("images").join(format!("{i:06}.ppm"))
}

fn label_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join("labels").join(format!("{i:06}.pgm"))
}

/// Writes `images/%06d.ppm`, `labels/%06d.pgm` and `meta.json`.
pub fn write_dataset(dir: &Path, data: &Dataset, meta: &DatasetMeta) -> Result<()> {
    if meta.count != data.len() || meta.classes != data.classes {
        return Err(Error::config(
            "dataset metadata disagrees with its contents",
        ));
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    for (i, s) in data.samples.iter().enumerate() {
        write_raster(s, &image_path(dir, i), &label_path(dir, i))?;
    }
    let mut json = serde_json::to_string_pretty(meta)?;
    json.push('\n');
    fs::write(dir.join("meta.json"), json)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", meta_path.display())))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;
    if meta.count == 0 {
        return Err(Error::data(format!(
            "{} lists no samples",
            meta_path.display()
        )));
    }
    let samples = (0..meta.count)
        .map(|i| read_raster(&image_path(dir, i), &label_path(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Dataset {
            classes: meta.classes,
            samples,
        },
        meta,
    ))
}
