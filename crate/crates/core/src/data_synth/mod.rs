//! Synthetic shape-scene datasets, fold splits and episode sampling.

mod catalog;
mod dataset;
mod episode;
mod folds;
mod raster;
mod scene;

pub use catalog::{ClassCatalog, ClassDescriptor, DistractorFamily, ShapeKind, TextureFamily};
pub use dataset::{
    generate_dataset, load_dataset, load_mask_png, manifest_path, save_dataset, save_mask_png, Dataset,
    DatasetManifest, PairEntry, SplitEntry, DATASET_FORMAT, POOL_SPLIT,
};
pub use episode::{binarize, downsample_mask, feature_mask, sample_episode, Episode, EpisodeItem, EpisodeSampler};
pub use folds::{make_fold_split, read_fold_file, validate_folds, write_fold_file, FoldSplit};
pub use raster::{rasterize_mask, shape_contains};
pub use scene::{generate_scene, ImageMaskPair, PlacedObject, SceneManifest, SceneParams, TextureRegion};

/// Mask label stored for a known class (`0` is reserved for background).
pub fn label_of(class_id: u32) -> u8 {
    u8::try_from(class_id + 1).expect("class ids fit in a u8 label")
}
