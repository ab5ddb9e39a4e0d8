//! Dataset manifests and synthetic data.

pub mod manifest;
pub mod synthetic;

pub use manifest::{filter_for_tasks, load_manifest, load_records, write_dataset, DatasetManifest, ManifestEntry};
pub use synthetic::{generate_scene, generate_synthetic, rasterize_ellipse, Scene, SyntheticSceneSpec};
