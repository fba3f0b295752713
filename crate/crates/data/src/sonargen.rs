//! Deterministic synthetic sonar scene and dataset generation.
//!
//! A scene is a smooth positive background texture multiplied by unit-mean
//! Gamma speckle (shape = looks), with elliptical target highlights that
//! cast a range-direction shadow strip and irregular clutter blobs that do
//! not. The LF band is a blurred version of the same structure under
//! independently drawn speckle.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chipper::{energy_detect, extract_snippets, fuse_detections, rx_detect, DetectorConfig};
use crate::error::{DataError, Result};
use crate::raster::Raster;
use crate::snippet::{DatasetManifest, ManifestEntry, Snippet, Split};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub scene_size: usize,
    /// Speckle multi-look count L; intensity speckle is Gamma(L, 1/L).
    pub looks: u32,
    /// Correlation length of the background texture, in pixels.
    pub background_texture_scale: f64,
    /// Expected targets per scene (Poisson).
    pub target_rate: f64,
    /// Expected clutter objects per scene (Poisson).
    pub clutter_rate: f64,
    /// Highlight intensity multiplier, > 1.
    pub highlight_gain: f64,
    /// Shadow intensity multiplier, in (0, 1).
    pub shadow_gain: f64,
    /// Blur applied to the LF band structure, in pixels.
    pub lf_blur_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            scene_size: 192,
            looks: 4,
            background_texture_scale: 6.0,
            target_rate: 2.0,
            clutter_rate: 3.0,
            highlight_gain: 3.5,
            shadow_gain: 0.25,
            lf_blur_sigma: 2.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scene_size < 32 {
            return Err(DataError::InvalidConfig(format!("scene_size {} too small", self.scene_size)));
        }
        if self.looks < 1 {
            return Err(DataError::InvalidConfig("looks must be >= 1".into()));
        }
        if self.target_rate < 0.0 || self.clutter_rate < 0.0 {
            return Err(DataError::InvalidConfig("object rates must be >= 0".into()));
        }
        if self.highlight_gain <= 1.0 {
            return Err(DataError::InvalidConfig("highlight_gain must be > 1".into()));
        }
        if !(self.shadow_gain > 0.0 && self.shadow_gain < 1.0) {
            return Err(DataError::InvalidConfig("shadow_gain must be in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectClass {
    Target,
    Clutter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TruthObject {
    pub x: usize,
    pub y: usize,
    pub class: ObjectClass,
}

/// One synthetic scene: HF and LF intensity bands plus ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub hf: Raster,
    pub lf: Raster,
    pub truth: Vec<TruthObject>,
}

fn poisson_count(rng: &mut ChaCha8Rng, rate: f64) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    let p = Poisson::new(rate).expect("rate > 0");
    p.sample(rng) as usize
}

/// Multiply a soft elliptical highlight into `img` around (cx, cy).
fn stamp_highlight(img: &mut Raster, cx: f64, cy: f64, ax: f64, ay: f64, gain: f64) {
    let (w, h) = (img.w as isize, img.h as isize);
    let x0 = ((cx - ax).floor() as isize).max(0);
    let x1 = ((cx + ax).ceil() as isize).min(w - 1);
    let y0 = ((cy - ay).floor() as isize).max(0);
    let y1 = ((cy + ay).ceil() as isize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = (x as f64 - cx) / ax;
            let dy = (y as f64 - cy) / ay;
            let r2 = dx * dx + dy * dy;
            if r2 < 1.0 {
                let falloff = 1.0 - r2; // 1 at center, 0 at rim
                let factor = 1.0 + (gain - 1.0) * falloff;
                let v = img.get(x as usize, y as usize);
                img.set(x as usize, y as usize, v * factor);
            }
        }
    }
}

/// Multiply a soft shadow strip into `img`, extending in +x (range) from
/// the highlight rim.
fn stamp_shadow(img: &mut Raster, cx: f64, cy: f64, start_dx: f64, length: f64, half_h: f64, gain: f64) {
    let (w, h) = (img.w as isize, img.h as isize);
    let x0 = ((cx + start_dx).floor() as isize).max(0);
    let x1 = ((cx + start_dx + length).ceil() as isize).min(w - 1);
    let y0 = ((cy - half_h).floor() as isize).max(0);
    let y1 = ((cy + half_h).ceil() as isize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let along = (x as f64 - cx - start_dx) / length;
            let across = (y as f64 - cy).abs() / half_h;
            if (0.0..=1.0).contains(&along) && across <= 1.0 {
                // fade toward the far end and edges
                let strength = (1.0 - along) * (1.0 - across * across);
                let factor = 1.0 - (1.0 - gain) * strength;
                let v = img.get(x as usize, y as usize);
                img.set(x as usize, y as usize, v * factor);
            }
        }
    }
}

/// Deterministic synthetic scene: pure function of the config (seed included).
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let side = config.scene_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // smooth positive background with mean 1
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise: Vec<f64> = (0..side * side).map(|_| normal.sample(&mut rng)).collect();
    let rough = Raster::from_data(side, side, noise);
    let smooth = rough.gaussian_blur(config.background_texture_scale);
    let sm_mean = smooth.mean();
    let sm_std = (smooth.data.iter().map(|v| (v - sm_mean) * (v - sm_mean)).sum::<f64>()
        / smooth.data.len() as f64)
        .sqrt()
        .max(1e-12);
    let mut structure = Raster::from_data(
        side,
        side,
        smooth.data.iter().map(|v| (1.0 + 0.2 * (v - sm_mean) / sm_std).max(0.05)).collect(),
    );

    // objects, kept away from the border
    let margin = 20.min(side / 4);
    let n_targets = poisson_count(&mut rng, config.target_rate);
    let n_clutter = poisson_count(&mut rng, config.clutter_rate);
    let mut truth = Vec::with_capacity(n_targets + n_clutter);
    for _ in 0..n_targets {
        let cx = rng.gen_range(margin..side - margin) as f64;
        let cy = rng.gen_range(margin..side - margin) as f64;
        let ax = rng.gen_range(4.0..7.0);
        let ay = rng.gen_range(2.5..4.5);
        stamp_highlight(&mut structure, cx, cy, ax, ay, config.highlight_gain);
        let length = rng.gen_range(10.0..18.0);
        stamp_shadow(&mut structure, cx, cy, ax + 1.0, length, ay * 1.1, config.shadow_gain);
        truth.push(TruthObject { x: cx as usize, y: cy as usize, class: ObjectClass::Target });
    }
    for _ in 0..n_clutter {
        let cx = rng.gen_range(margin..side - margin) as f64;
        let cy = rng.gen_range(margin..side - margin) as f64;
        let lobes = rng.gen_range(2..=4);
        for _ in 0..lobes {
            let ox = cx + rng.gen_range(-4.0..4.0);
            let oy = cy + rng.gen_range(-4.0..4.0);
            let a = rng.gen_range(1.5..3.5);
            let b = rng.gen_range(1.5..3.5);
            let gain = rng.gen_range(1.6..config.highlight_gain.max(1.8));
            stamp_highlight(&mut structure, ox, oy, a, b, gain);
        }
        truth.push(TruthObject { x: cx as usize, y: cy as usize, class: ObjectClass::Clutter });
    }

    // multiplicative unit-mean speckle, independent per band
    let gamma = Gamma::new(config.looks as f64, 1.0 / config.looks as f64).expect("valid gamma");
    let hf_data: Vec<f64> = structure.data.iter().map(|v| v * gamma.sample(&mut rng)).collect();
    let lf_structure = structure.gaussian_blur(config.lf_blur_sigma);
    let lf_data: Vec<f64> = lf_structure.data.iter().map(|v| v * gamma.sample(&mut rng)).collect();

    Ok(Scene {
        hf: Raster::from_data(side, side, hf_data),
        lf: Raster::from_data(side, side, lf_data),
        truth,
    })
}

/// Split sizes for one generated dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub pretrain: usize,
    pub train: usize,
    pub test: usize,
}

struct LabeledChip {
    snippet: Snippet,
    is_target: bool,
}

/// Run detection + chipping on one scene; labels come from truth proximity.
fn chips_of_scene(scene: &Scene, detector: &DetectorConfig, radius: f64) -> Result<Vec<LabeledChip>> {
    let energy = energy_detect(&scene.hf, detector)?;
    let rx = rx_detect(&[&scene.hf, &scene.lf], detector)?;
    let fused = fuse_detections(&energy, &rx, detector)?;
    let snippets = extract_snippets(scene, &fused, detector, 2)?;
    let r2 = radius * radius;
    Ok(fused
        .iter()
        .zip(snippets)
        .map(|(det, snippet)| {
            let is_target = scene.truth.iter().any(|t| {
                t.class == ObjectClass::Target && {
                    let dx = t.x as f64 - det.x as f64;
                    let dy = t.y as f64 - det.y as f64;
                    dx * dx + dy * dy <= r2
                }
            });
            LabeledChip { snippet, is_target }
        })
        .collect())
}

/// Generate scenes until the requested split sizes are met, writing snippet
/// files and a JSONL manifest under `out_dir`.
///
/// Pretrain entries are unlabeled; train/test entries are labeled 1 when the
/// chip center lies within snippet_size/4 of a truth target, else 0, and each
/// labeled split is class-balanced within one sample (majority subsampled).
/// Deterministic for fixed (configs, seed): per-scene seeds are
/// `seed ^ scene_index` and assignment runs in scene order.
pub fn generate_dataset(
    scene_config: &SceneConfig,
    detector: &DetectorConfig,
    counts: DatasetCounts,
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    scene_config.validate()?;
    detector.validate()?;
    let snip_dir = out_dir.join("snippets");
    fs::create_dir_all(&snip_dir)?;

    let radius = detector.snippet_size as f64 / 4.0;
    // per-split targets: positives get the floor on odd counts
    let train_pos_target = counts.train / 2;
    let train_neg_target = counts.train - train_pos_target;
    let test_pos_target = counts.test / 2;
    let test_neg_target = counts.test - test_pos_target;

    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut next_id = 0usize;
    let (mut pretrain_n, mut train_pos, mut train_neg, mut test_pos, mut test_neg) =
        (0usize, 0usize, 0usize, 0usize, 0usize);

    let total_needed = counts.pretrain + counts.train + counts.test;
    let max_scenes = 64 + total_needed * 4;
    const BATCH: usize = 16;

    let mut write_chip = |snippet: &Snippet, split: Split, label: Option<u8>, next_id: &mut usize| -> Result<()> {
        let id = format!("s{:06}", *next_id);
        *next_id += 1;
        let rel = format!("snippets/{id}.snip");
        snippet.write(&out_dir.join(&rel))?;
        entries.push(ManifestEntry { id, path: rel, split, label, channels: snippet.channels });
        Ok(())
    };

    let done = |p: usize, tp: usize, tn: usize, sp: usize, sn: usize| {
        p >= counts.pretrain
            && tp >= train_pos_target
            && tn >= train_neg_target
            && sp >= test_pos_target
            && sn >= test_neg_target
    };

    let mut scene_index = 0usize;
    while !done(pretrain_n, train_pos, train_neg, test_pos, test_neg) && scene_index < max_scenes {
        let batch_end = (scene_index + BATCH).min(max_scenes);
        let batch: Vec<Result<Vec<LabeledChip>>> = (scene_index..batch_end)
            .into_par_iter()
            .map(|index| {
                let cfg = SceneConfig { seed: seed ^ index as u64, ..*scene_config };
                let scene = generate_scene(&cfg)?;
                chips_of_scene(&scene, detector, radius)
            })
            .collect();
        scene_index = batch_end;
        for chips in batch {
            for chip in chips? {
                if pretrain_n < counts.pretrain {
                    write_chip(&chip.snippet, Split::Pretrain, None, &mut next_id)?;
                    pretrain_n += 1;
                } else if chip.is_target && train_pos < train_pos_target {
                    write_chip(&chip.snippet, Split::Train, Some(1), &mut next_id)?;
                    train_pos += 1;
                } else if !chip.is_target && train_neg < train_neg_target {
                    write_chip(&chip.snippet, Split::Train, Some(0), &mut next_id)?;
                    train_neg += 1;
                } else if chip.is_target && test_pos < test_pos_target {
                    write_chip(&chip.snippet, Split::Test, Some(1), &mut next_id)?;
                    test_pos += 1;
                } else if !chip.is_target && test_neg < test_neg_target {
                    write_chip(&chip.snippet, Split::Test, Some(0), &mut next_id)?;
                    test_neg += 1;
                }
                // chips of an already-full class are dropped: balance is
                // enforced by subsampling the majority class
            }
            if done(pretrain_n, train_pos, train_neg, test_pos, test_neg) {
                break;
            }
        }
    }

    if !done(pretrain_n, train_pos, train_neg, test_pos, test_neg) {
        return Err(DataError::InsufficientDetections {
            wanted: (counts.pretrain, counts.train, counts.test),
            achieved: (pretrain_n, train_pos + train_neg, test_pos + test_neg),
        });
    }

    let manifest = DatasetManifest { entries };
    manifest.write_jsonl(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
