//! On-disk patch store: `<patch_id>.png` files, a `patches.jsonl` index and
//! a `run_meta.json` snapshot of the pipeline configuration.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{Patch, PipelineConfig};
use crate::data_model::{ClassSet, Split, StoneClass, ViewKind};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "patches.jsonl";
pub const META_FILE: &str = "run_meta.json";

/// One line of `patches.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchIndexRow {
    pub patch_id: String,
    pub label: StoneClass,
    pub view: ViewKind,
    pub source_image_id: String,
    pub specimen_id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCount {
    pub class: StoneClass,
    pub view: ViewKind,
    pub split: Split,
    pub count: usize,
}

/// Self-describing run metadata stored next to the patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub toolkit_version: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub class_set: ClassSet,
    pub stratum_counts: Vec<StratumCount>,
}

/// A loaded patch store.
#[derive(Debug)]
pub struct PatchStore {
    pub patches: Vec<(Patch, Split)>,
    pub meta: RunMetadata,
}

impl PatchStore {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Patch> {
        self.patches
            .iter()
            .filter(move |(_, s)| *s == split)
            .map(|(p, _)| p)
    }
}

/// Decodes an image file into an H×W×3 array.
pub fn load_image(path: impl AsRef<Path>) -> Result<Array3<u8>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Image {
            id: path.display().to_string(),
            message: format!("undecodable image: {e}"),
        })?
        .to_rgb8();
    let (width, height) = img.dimensions();
    let raw = img.into_raw();
    Array3::from_shape_vec((height as usize, width as usize, 3), raw).map_err(|e| Error::Image {
        id: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Encodes an H×W×3 array as PNG at `path`.
pub fn save_image(pixels: &Array3<u8>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (height, width, channels) = pixels.dim();
    assert_eq!(channels, 3, "save_image expects 3 channels");
    let data = pixels
        .as_standard_layout()
        .iter()
        .copied()
        .collect::<Vec<u8>>();
    let img: RgbImage = RgbImage::from_raw(width as u32, height as u32, data)
        .expect("buffer size matches dimensions");
    img.save(path).map_err(|e| Error::Image {
        id: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Writes a patch store to `dir`, creating it if needed.
pub fn write_patch_store(
    dir: impl AsRef<Path>,
    patches: &[(Patch, Split)],
    config: &PipelineConfig,
    class_set: &ClassSet,
    seed: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut counts: BTreeMap<(StoneClass, ViewKind, Split), usize> = BTreeMap::new();
    let index_path = dir.join(INDEX_FILE);
    let mut index = fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    for (patch, split) in patches {
        save_image(&patch.pixels, dir.join(format!("{}.png", patch.patch_id)))?;
        let row = PatchIndexRow {
            patch_id: patch.patch_id.clone(),
            label: patch.label.clone(),
            view: patch.view,
            source_image_id: patch.source_image_id.clone(),
            specimen_id: patch.specimen_id.clone(),
            split: *split,
            augmented_from: patch.augmented_from.clone(),
        };
        let mut line = serde_json::to_vec(&row)?;
        line.push(b'\n');
        index.write_all(&line).map_err(|e| Error::io(&index_path, e))?;
        *counts
            .entry((patch.label.clone(), patch.view, *split))
            .or_default() += 1;
    }

    let meta = RunMetadata {
        toolkit_version: crate::TOOLKIT_VERSION.to_string(),
        seed,
        config: config.clone(),
        class_set: class_set.clone(),
        stratum_counts: counts
            .into_iter()
            .map(|((class, view, split), count)| StratumCount {
                class,
                view,
                split,
                count,
            })
            .collect(),
    };
    let meta_path = dir.join(META_FILE);
    let mut body = serde_json::to_vec_pretty(&meta)?;
    body.push(b'\n');
    fs::write(&meta_path, body).map_err(|e| Error::io(&meta_path, e))
}

/// Loads a patch store written by [`write_patch_store`].
pub fn load_patch_store(dir: impl AsRef<Path>) -> Result<PatchStore> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let meta_body = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: RunMetadata = serde_json::from_str(&meta_body)?;

    let index_path = dir.join(INDEX_FILE);
    let file = fs::File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut patches = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&index_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: PatchIndexRow = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: index_path.clone(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let png: PathBuf = dir.join(format!("{}.png", row.patch_id));
        let pixels = load_image(&png)?;
        patches.push((
            Patch {
                patch_id: row.patch_id,
                pixels,
                label: row.label,
                view: row.view,
                source_image_id: row.source_image_id,
                specimen_id: row.specimen_id,
                augmented_from: row.augmented_from,
            },
            row.split,
        ));
    }
    Ok(PatchStore { patches, meta })
}
