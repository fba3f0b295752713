//! Snippet augmentation.
//!
//! Pretraining draws two independent views per snippet through the full
//! probabilistic chain (hflip, resized crop, rotation, affine, blur,
//! speckle — in that fixed order); downstream train/test phases use the
//! flip-only pipeline. Every transform preserves the input shape, resamples
//! bilinearly with edge-clamp padding, and is a pure function of
//! (input, parameters, seed).

use msas_data::Snippet;
use msas_tensor::seed::mix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub p_hflip: f64,
    pub crop_scale_range: (f64, f64),
    pub crop_aspect_range: (f64, f64),
    pub rotation_max_degrees: f64,
    pub affine_translate_frac: f64,
    pub affine_shear_degrees: f64,
    pub p_blur: f64,
    pub blur_sigma_range: (f64, f64),
    pub p_speckle: f64,
    pub speckle_looks_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_hflip: 0.5,
            crop_scale_range: (0.6, 1.0),
            crop_aspect_range: (0.9, 1.1),
            rotation_max_degrees: 10.0,
            affine_translate_frac: 0.1,
            affine_shear_degrees: 5.0,
            p_blur: 0.5,
            blur_sigma_range: (0.3, 1.5),
            p_speckle: 0.5,
            speckle_looks_range: (4.0, 16.0),
        }
    }
}

impl AugmentConfig {
    /// Identity configuration: every probability zero, every range collapsed.
    pub fn identity() -> Self {
        AugmentConfig {
            p_hflip: 0.0,
            crop_scale_range: (1.0, 1.0),
            crop_aspect_range: (1.0, 1.0),
            rotation_max_degrees: 0.0,
            affine_translate_frac: 0.0,
            affine_shear_degrees: 0.0,
            p_blur: 0.0,
            blur_sigma_range: (0.3, 0.3),
            p_speckle: 0.0,
            speckle_looks_range: (4.0, 4.0),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("p_hflip", self.p_hflip), ("p_blur", self.p_blur), ("p_speckle", self.p_speckle)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        for (name, (lo, hi)) in [
            ("crop_scale_range", self.crop_scale_range),
            ("crop_aspect_range", self.crop_aspect_range),
            ("blur_sigma_range", self.blur_sigma_range),
            ("speckle_looks_range", self.speckle_looks_range),
        ] {
            if lo > hi || lo <= 0.0 {
                return Err(format!("{name} must be ordered and positive, got [{lo}, {hi}]"));
            }
        }
        if self.crop_scale_range.1 > 1.0 {
            return Err("crop_scale_range upper bound must be <= 1".into());
        }
        if !(0.0..=30.0).contains(&self.rotation_max_degrees) {
            return Err(format!(
                "rotation_max_degrees must stay subtle (0..=30), got {}",
                self.rotation_max_degrees
            ));
        }
        if self.speckle_looks_range.0 < 1.0 {
            return Err("speckle_looks_range lower bound must be >= 1".into());
        }
        Ok(())
    }
}

/// Mirror columns. An exact involution: hflip(hflip(x)) == x bitwise.
pub fn hflip(snippet: &Snippet) -> Snippet {
    let side = snippet.side;
    let mut out = snippet.clone();
    for c in 0..snippet.channels {
        for y in 0..side {
            for x in 0..side {
                out.set(c, y, x, snippet.get(c, y, side - 1 - x));
            }
        }
    }
    out
}

/// Inverse-map warp: output (x, y) samples source (a x + b y + c, d x + e y + f)
/// bilinearly with edge-clamped coordinates, identically across channels.
fn warp(snippet: &Snippet, m: [f64; 6]) -> Snippet {
    let side = snippet.side;
    let max = side as f64 - 1.0;
    let mut out = Snippet::zeros(snippet.channels, side);
    for y in 0..side {
        for x in 0..side {
            let (xf, yf) = (x as f64, y as f64);
            let sx = (m[0] * xf + m[1] * yf + m[2]).clamp(0.0, max);
            let sy = (m[3] * xf + m[4] * yf + m[5]).clamp(0.0, max);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(side - 1);
            let y1 = (y0 + 1).min(side - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for c in 0..snippet.channels {
                let top = snippet.get(c, y0, x0) as f64 * (1.0 - fx) + snippet.get(c, y0, x1) as f64 * fx;
                let bot = snippet.get(c, y1, x0) as f64 * (1.0 - fx) + snippet.get(c, y1, x1) as f64 * fx;
                out.set(c, y, x, (top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    out
}

/// Crop a `crop_w` x `crop_h` box at (x0, y0) and resize back to the full side.
pub fn resized_crop(snippet: &Snippet, x0: f64, y0: f64, crop_w: f64, crop_h: f64) -> Snippet {
    let side = snippet.side as f64;
    let sx = crop_w / side;
    let sy = crop_h / side;
    // output pixel centers map into the crop box
    warp(snippet, [sx, 0.0, x0 + 0.5 * sx - 0.5, 0.0, sy, y0 + 0.5 * sy - 0.5])
}

/// Draw crop geometry from scale/aspect ranges and apply it.
pub fn random_resized_crop(
    snippet: &Snippet,
    scale_range: (f64, f64),
    aspect_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Snippet {
    let side = snippet.side as f64;
    let scale = sample_range(rng, scale_range);
    let aspect = sample_range(rng, aspect_range);
    let crop_w = (side * (scale * aspect).sqrt()).clamp(1.0, side);
    let crop_h = (side * (scale / aspect).sqrt()).clamp(1.0, side);
    let x0 = sample_range(rng, (0.0, side - crop_w));
    let y0 = sample_range(rng, (0.0, side - crop_h));
    resized_crop(snippet, x0, y0, crop_w, crop_h)
}

/// Rotate about the snippet center by `degrees` (counterclockwise content).
pub fn rotate(snippet: &Snippet, degrees: f64) -> Snippet {
    let rad = degrees.to_radians();
    let (s, c) = rad.sin_cos();
    let center = (snippet.side as f64 - 1.0) / 2.0;
    // inverse rotation about the center
    warp(snippet, [
        c,
        s,
        center - c * center - s * center,
        -s,
        c,
        center + s * center - c * center,
    ])
}

/// Translate by (tx, ty) pixels and shear horizontally by `shear_degrees`.
pub fn affine(snippet: &Snippet, tx: f64, ty: f64, shear_degrees: f64) -> Snippet {
    let k = shear_degrees.to_radians().tan();
    let center = (snippet.side as f64 - 1.0) / 2.0;
    // inverse of x' = x + k (y - c) + tx, y' = y + ty
    warp(snippet, [1.0, -k, k * center - tx, 0.0, 1.0, -ty])
}

/// Per-channel separable Gaussian blur with edge clamping.
pub fn gaussian_blur(snippet: &Snippet, sigma: f64) -> Snippet {
    if sigma <= 0.0 {
        return snippet.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let side = snippet.side as isize;
    let mut out = snippet.clone();
    for ch in 0..snippet.channels {
        let src: Vec<f64> = snippet.channel(ch).iter().map(|&v| v as f64).collect();
        let mut horiz = vec![0.0f64; src.len()];
        for y in 0..side {
            for x in 0..side {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x + ki as isize - radius).clamp(0, side - 1);
                    acc += kv * src[(y * side + sx) as usize];
                }
                horiz[(y * side + x) as usize] = acc;
            }
        }
        for y in 0..side {
            for x in 0..side {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y + ki as isize - radius).clamp(0, side - 1);
                    acc += kv * horiz[(sy * side + x) as usize];
                }
                out.set(ch, y as usize, x as usize, acc as f32);
            }
        }
    }
    out
}

/// Multiply by unit-mean Gamma(L, 1/L) speckle, drawn per channel and pixel.
pub fn speckle_noise(snippet: &Snippet, looks: f64, rng: &mut ChaCha8Rng) -> Snippet {
    let gamma = Gamma::new(looks, 1.0 / looks).expect("looks >= 1");
    let mut out = snippet.clone();
    for v in &mut out.data {
        *v = (*v as f64 * gamma.sample(rng)) as f32;
    }
    out
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// One draw of the full chain: hflip, resized crop, rotation, affine,
/// blur, speckle.
fn apply_chain(snippet: &Snippet, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Snippet {
    let side = snippet.side as f64;
    let mut out = if rng.gen_range(0.0..1.0) < config.p_hflip { hflip(snippet) } else { snippet.clone() };
    out = random_resized_crop(&out, config.crop_scale_range, config.crop_aspect_range, rng);
    let angle = if config.rotation_max_degrees > 0.0 {
        rng.gen_range(-config.rotation_max_degrees..config.rotation_max_degrees)
    } else {
        0.0
    };
    out = rotate(&out, angle);
    let t = config.affine_translate_frac * side;
    let (tx, ty) = if t > 0.0 {
        (rng.gen_range(-t..t), rng.gen_range(-t..t))
    } else {
        (0.0, 0.0)
    };
    let shear = if config.affine_shear_degrees > 0.0 {
        rng.gen_range(-config.affine_shear_degrees..config.affine_shear_degrees)
    } else {
        0.0
    };
    out = affine(&out, tx, ty, shear);
    if rng.gen_range(0.0..1.0) < config.p_blur {
        let sigma = sample_range(rng, config.blur_sigma_range);
        out = gaussian_blur(&out, sigma);
    }
    if rng.gen_range(0.0..1.0) < config.p_speckle {
        let looks = sample_range(rng, config.speckle_looks_range);
        out = speckle_noise(&out, looks, rng);
    }
    out
}

/// Two independent draws of the augmentation chain, deterministic in `seed`.
pub fn two_views(snippet: &Snippet, config: &AugmentConfig, seed: u64) -> (Snippet, Snippet) {
    let mut rng_a = ChaCha8Rng::seed_from_u64(mix(seed, 1));
    let mut rng_b = ChaCha8Rng::seed_from_u64(mix(seed, 2));
    (apply_chain(snippet, config, &mut rng_a), apply_chain(snippet, config, &mut rng_b))
}

/// Downstream pipeline: horizontal flip with probability `p_hflip`,
/// nothing else.
pub fn eval_augment(snippet: &Snippet, p_hflip: f64, seed: u64) -> Snippet {
    if p_hflip <= 0.0 {
        return snippet.clone();
    }
    if p_hflip >= 1.0 {
        return hflip(snippet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 3));
    if rng.gen_range(0.0..1.0) < p_hflip {
        hflip(snippet)
    } else {
        snippet.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_snippet(side: usize) -> Snippet {
        let mut s = Snippet::zeros(1, side);
        for y in 0..side {
            for x in 0..side {
                s.set(0, y, x, x as f32);
            }
        }
        s
    }

    #[test]
    fn identity_config_returns_input_exactly() {
        let snip = gradient_snippet(16);
        let (a, b) = two_views(&snip, &AugmentConfig::identity(), 7);
        assert_eq!(a, snip);
        assert_eq!(b, snip);
    }

    #[test]
    fn two_views_deterministic_and_distinct() {
        let snip = gradient_snippet(16);
        let cfg = AugmentConfig::default();
        let (a1, b1) = two_views(&snip, &cfg, 42);
        let (a2, b2) = two_views(&snip, &cfg, 42);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_ne!(a1, b1, "views from distinct sub-seeds must differ");
    }

    #[test]
    fn eval_augment_cases() {
        let snip = gradient_snippet(9);
        assert_eq!(eval_augment(&snip, 0.0, 5), snip);
        let flipped = eval_augment(&snip, 1.0, 5);
        assert_eq!(eval_augment(&flipped, 1.0, 6), snip); // involution
        // forced flip reverses the column gradient
        for x in 0..9 {
            assert_eq!(flipped.get(0, 0, x), (8 - x) as f32);
        }
    }

    #[test]
    fn speckle_preserves_mean_within_two_percent() {
        let side = 100; // 10^4 pixels
        let snip = Snippet::new(1, side, vec![2.0; side * side]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for looks in [4.0, 9.0, 16.0] {
            let noised = speckle_noise(&snip, looks, &mut rng);
            let mean: f64 = noised.data.iter().map(|&v| v as f64).sum::<f64>() / (side * side) as f64;
            assert!((mean - 2.0).abs() / 2.0 < 0.02, "looks {looks}: mean {mean}");
        }
    }

    #[test]
    fn bright_disk_survives_default_augmentation() {
        let side = 32usize;
        let mut snip = Snippet::zeros(1, side);
        for y in 0..side {
            for x in 0..side {
                let dx = x as f64 - 15.5;
                let dy = y as f64 - 15.5;
                if dx * dx + dy * dy < 36.0 {
                    snip.set(0, y, x, 10.0);
                }
            }
        }
        let cfg = AugmentConfig::default();
        for seed in 0..100u64 {
            let (a, b) = two_views(&snip, &cfg, seed);
            for (tag, view) in [("a", &a), ("b", &b)] {
                let total: f64 = view.data.iter().map(|&v| v as f64).sum();
                assert!(total > 0.0, "seed {seed} view {tag}: disk vanished");
                let (mut cx, mut cy) = (0.0, 0.0);
                for y in 0..side {
                    for x in 0..side {
                        let w = view.get(0, y, x) as f64;
                        cx += w * x as f64;
                        cy += w * y as f64;
                    }
                }
                cx /= total;
                cy /= total;
                // center of mass stays well inside the frame
                let margin = side as f64 * 0.45;
                assert!(
                    (cx - 15.5).abs() < margin && (cy - 15.5).abs() < margin,
                    "seed {seed} view {tag}: centroid ({cx:.1}, {cy:.1}) drifted out"
                );
            }
        }
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let mut cfg = AugmentConfig::default();
        cfg.p_blur = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.crop_scale_range = (0.9, 0.4);
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.rotation_max_degrees = 90.0;
        assert!(cfg.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig::identity().validate().is_ok());
    }
}
