//! In-memory pools and the on-disk dataset format.
//!
//! Layout written by [`save_dataset`]:
//!
//! ```text
//! <dir>/manifest.json          catalog, scene params, pairs per split, folds
//! <dir>/folds.json             [{fold_id, train_classes, test_classes}, ...]
//! <dir>/<split>/images/*.png   RGB8
//! <dir>/<split>/masks/*.png    L8, 0 = background, class_id + 1 otherwise
//! ```
//!
//! The same manifest schema doubles as the adapter for real fold-based
//! datasets: pairs may omit `scene`, and only images, masks and class ids
//! are required.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::catalog::ClassCatalog;
use super::folds::{read_fold_file, validate_folds, write_fold_file, FoldSplit};
use super::scene::{generate_scene, ImageMaskPair, SceneManifest, SceneParams};
use crate::error::{invalid, QsrError, Result};
use crate::rng::derive_seed;

pub const DATASET_FORMAT: &str = "qsr-dataset/1";
pub const POOL_SPLIT: &str = "pool";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub catalog: ClassCatalog,
    pub pairs: Vec<ImageMaskPair>,
    pub scene_params: Option<SceneParams>,
}

impl Dataset {
    pub fn from_pairs(catalog: ClassCatalog, pairs: Vec<ImageMaskPair>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            catalog.get(p.class_id)?;
            if p.image.dim().1 != p.height() || p.image.dim().2 != p.width() {
                return Err(invalid(format!("pair {i}: image and mask sizes differ")));
            }
            if p.mask.iter().any(|&v| v as usize > catalog.len()) {
                return Err(invalid(format!("pair {i}: mask label outside catalog")));
            }
        }
        Ok(Self { catalog, pairs, scene_params: None })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Indices of pairs whose foreground object has class `class_id`.
    pub fn indices_of_class(&self, class_id: u32) -> Vec<usize> {
        self.pairs.iter().enumerate().filter(|(_, p)| p.class_id == class_id).map(|(i, _)| i).collect()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.pairs.first().map(|p| (p.height(), p.width()))
    }
}

/// `images_per_class` scenes per known class, ordered by class then index.
/// Scenes are generated in parallel; each has its own derived seed.
pub fn generate_dataset(
    catalog: &ClassCatalog,
    images_per_class: usize,
    seed: u64,
    params: &SceneParams,
) -> Result<Dataset> {
    params.validate()?;
    let jobs: Vec<(u32, usize)> = catalog
        .class_ids()
        .flat_map(|c| (0..images_per_class).map(move |j| (c, j)))
        .collect();
    let pairs = jobs
        .par_iter()
        .map(|&(c, j)| {
            let mut last = None;
            for attempt in 0..8 {
                let s = derive_seed(seed, &format!("scene/{c}/{j}/{attempt}"));
                match generate_scene(catalog, c, s, params) {
                    Ok(p) => return Ok(p),
                    Err(e @ QsrError::Generation(_)) => last = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Err(last.expect("at least one attempt"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { catalog: catalog.clone(), pairs, scene_params: Some(params.clone()) })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: usize,
    pub class_id: u32,
    pub image: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneManifest>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub pairs: Vec<PairEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub catalog: ClassCatalog,
    #[serde(default)]
    pub scene_params: Option<SceneParams>,
    pub splits: Vec<SplitEntry>,
    pub folds: Vec<FoldSplit>,
}

fn to_rgb(image: &Array3<f32>) -> RgbImage {
    let (_, h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn from_rgb(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f32::from(img.get_pixel(x as u32, y as u32).0[c]) / 255.0
    })
}

pub fn save_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([mask[[y as usize, x as usize]]])).save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32).0[0]))
}

pub fn save_dataset(dir: &Path, dataset: &Dataset, folds: &[FoldSplit]) -> Result<()> {
    validate_folds(folds, &dataset.catalog)?;
    let split_dir = dir.join(POOL_SPLIT);
    std::fs::create_dir_all(split_dir.join("images"))?;
    std::fs::create_dir_all(split_dir.join("masks"))?;
    let entries = dataset
        .pairs
        .par_iter()
        .enumerate()
        .map(|(id, pair)| {
            let image = format!("{POOL_SPLIT}/images/{id:06}.png");
            let mask = format!("{POOL_SPLIT}/masks/{id:06}.png");
            to_rgb(&pair.image).save(dir.join(&image))?;
            save_mask_png(&dir.join(&mask), &pair.mask)?;
            Ok(PairEntry { id, class_id: pair.class_id, image, mask, scene: pair.scene_manifest.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        catalog: dataset.catalog.clone(),
        scene_params: dataset.scene_params.clone(),
        splits: vec![SplitEntry { name: POOL_SPLIT.to_string(), pairs: entries }],
        folds: folds.to_vec(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    write_fold_file(&dir.join("folds.json"), folds)?;
    Ok(())
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Loads the pool split and the fold file. A `folds.json` next to the
/// manifest takes precedence over the manifest's embedded folds.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Vec<FoldSplit>)> {
    let path = manifest_path(dir);
    if !path.exists() {
        return Err(QsrError::MissingPath(path));
    }
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(invalid(format!("unsupported dataset format `{}`", manifest.format)));
    }
    let split = manifest
        .splits
        .iter()
        .find(|s| s.name == POOL_SPLIT)
        .ok_or_else(|| invalid(format!("manifest has no `{POOL_SPLIT}` split")))?;
    let pairs = split
        .pairs
        .par_iter()
        .map(|e| {
            let image = from_rgb(&image::open(dir.join(&e.image))?.to_rgb8());
            let mask = load_mask_png(&dir.join(&e.mask))?;
            Ok(ImageMaskPair { class_id: e.class_id, image, mask, scene_manifest: e.scene.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut dataset = Dataset::from_pairs(manifest.catalog, pairs)?;
    dataset.scene_params = manifest.scene_params;
    let fold_file = dir.join("folds.json");
    let folds = if fold_file.exists() { read_fold_file(&fold_file)? } else { manifest.folds };
    validate_folds(&folds, &dataset.catalog)?;
    Ok((dataset, folds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::make_fold_split;

    #[test]
    fn disk_round_trip_is_exact() {
        let cat = ClassCatalog::new(4).unwrap();
        let ds = generate_dataset(&cat, 3, 5, &SceneParams::default()).unwrap();
        let folds = make_fold_split(&cat, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds, &folds).unwrap();
        let (back, back_folds) = load_dataset(dir.path()).unwrap();
        for (a, b) in back.pairs.iter().zip(&ds.pairs) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.image, b.image);
            assert_eq!(a.scene_manifest, b.scene_manifest);
        }
        assert_eq!(back, ds);
        assert_eq!(back_folds, folds);
    }

    #[test]
    fn generation_is_deterministic() {
        let cat = ClassCatalog::new(4).unwrap();
        let a = generate_dataset(&cat, 4, 9, &SceneParams::default()).unwrap();
        let b = generate_dataset(&cat, 4, 9, &SceneParams::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert_eq!(a.indices_of_class(2).len(), 4);
    }

    #[test]
    fn missing_manifest_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("manifest.json"));
    }
}
