//! Synthetic sonar scenes, anomaly-detection chipping and the on-disk
//! dataset formats (snippet files, scene files, JSONL manifests).

pub mod chipper;
mod error;
mod raster;
pub mod snippet;
pub mod sonargen;

pub use chipper::{
    energy_detect, extract_snippets, fuse_detections, mahalanobis, rx_detect, Detection,
    DetectorConfig,
};
pub use error::{DataError, Result};
pub use raster::Raster;
pub use snippet::{DatasetManifest, ManifestEntry, Snippet, Split};
pub use sonargen::{
    generate_dataset, generate_scene, DatasetCounts, ObjectClass, Scene, SceneConfig, TruthObject,
};
