//! Anomaly-detection chipping: a raw energy detector fused with an RX
//! (Mahalanobis) detector locates candidate objects, then fixed-size
//! multiband snippets are cropped and resized around the survivors.

use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::raster::Raster;
use crate::snippet::Snippet;
use crate::sonargen::Scene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Local statistics window side, odd.
    pub window: usize,
    /// Excluded inner radius (Chebyshev) for RX background stats.
    pub guard: usize,
    /// Energy detections require (local mean - global mean)/global std
    /// above this.
    pub energy_threshold_sigma: f64,
    /// RX detections require a Mahalanobis score above this
    /// (chi-square-style cutoff).
    pub rx_threshold: f64,
    /// Non-maximum suppression radius in pixels.
    pub nms_radius: f64,
    /// Crop side around each detection.
    pub snippet_size: usize,
    /// Output side after bilinear resize.
    pub resize: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            window: 13,
            guard: 5,
            energy_threshold_sigma: 1.5,
            rx_threshold: 60.0,
            nms_radius: 12.0,
            snippet_size: 48,
            resize: 224,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window < 3 {
            return Err(DataError::InvalidConfig(format!("window must be odd >= 3, got {}", self.window)));
        }
        if self.window <= 2 * self.guard {
            return Err(DataError::InvalidConfig(format!(
                "window {} must exceed twice the guard radius {}",
                self.window, self.guard
            )));
        }
        if self.energy_threshold_sigma <= 0.0 || self.rx_threshold <= 0.0 {
            return Err(DataError::InvalidConfig("thresholds must be > 0".into()));
        }
        if self.snippet_size == 0 || self.resize == 0 {
            return Err(DataError::InvalidConfig("snippet_size and resize must be > 0".into()));
        }
        Ok(())
    }
}

/// Candidate object location with detector scores. `fused_score` is zero
/// until fusion assigns rank-normalized weights in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub x: usize,
    pub y: usize,
    pub energy_score: f64,
    pub rx_score: f64,
    pub fused_score: f64,
}

/// Greedy non-maximum suppression. Candidates are ranked by
/// (score, tiebreak, then position) and a survivor suppresses everything
/// within `radius` (Euclidean).
fn nms(mut cands: Vec<(Detection, f64, f64)>, radius: f64) -> Vec<Detection> {
    cands.sort_by(|(da, sa, ta), (db, sb, tb)| {
        sb.partial_cmp(sa)
            .unwrap()
            .then(tb.partial_cmp(ta).unwrap())
            .then(da.y.cmp(&db.y))
            .then(da.x.cmp(&db.x))
    });
    let mut kept: Vec<Detection> = Vec::new();
    let r2 = radius * radius;
    for (det, _, _) in cands {
        let clear = kept.iter().all(|k| {
            let dx = det.x as f64 - k.x as f64;
            let dy = det.y as f64 - k.y as f64;
            dx * dx + dy * dy > r2
        });
        if clear {
            kept.push(det);
        }
    }
    kept
}

/// Raw energy detector: local window mean scored against global statistics.
/// A constant image (zero global variance) yields no detections.
pub fn energy_detect(image: &Raster, config: &DetectorConfig) -> Result<Vec<Detection>> {
    config.validate()?;
    let (w, h) = (image.w, image.h);
    if config.window > w || config.window > h {
        return Err(DataError::InvalidConfig(format!(
            "window {} exceeds image {w}x{h}",
            config.window
        )));
    }
    let n = (w * h) as f64;
    let mean = image.data.iter().sum::<f64>() / n;
    let var = image.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return Ok(Vec::new());
    }

    let half = config.window / 2;
    let wn = (config.window * config.window) as f64;
    let mut cands = Vec::new();
    for y in half..h - half {
        for x in half..w - half {
            let mut sum = 0.0;
            for wy in y - half..=y + half {
                for wx in x - half..=x + half {
                    sum += image.get(wx, wy);
                }
            }
            let score = (sum / wn - mean) / std;
            if score > config.energy_threshold_sigma {
                let det = Detection { x, y, energy_score: score, rx_score: 0.0, fused_score: 0.0 };
                cands.push((det, score, image.get(x, y)));
            }
        }
    }
    Ok(nms(cands, config.nms_radius))
}

/// Mahalanobis score (x - mu)^T Sigma^-1 (x - mu) for a small C x C system,
/// solved by Gaussian elimination with partial pivoting.
pub fn mahalanobis(diff: &[f64], cov: &[f64]) -> Result<f64> {
    let c = diff.len();
    if cov.len() != c * c {
        return Err(DataError::InvalidConfig(format!(
            "covariance must be {c}x{c}, got {} entries",
            cov.len()
        )));
    }
    // solve Sigma * z = diff
    let mut a = cov.to_vec();
    let mut z = diff.to_vec();
    for col in 0..c {
        let mut pivot = col;
        for row in col + 1..c {
            if a[row * c + col].abs() > a[pivot * c + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * c + col].abs() < 1e-300 {
            return Err(DataError::SingularCovariance);
        }
        if pivot != col {
            for j in 0..c {
                a.swap(col * c + j, pivot * c + j);
            }
            z.swap(col, pivot);
        }
        for row in col + 1..c {
            let f = a[row * c + col] / a[col * c + col];
            if f == 0.0 {
                continue;
            }
            for j in col..c {
                a[row * c + j] -= f * a[col * c + j];
            }
            z[row] -= f * z[col];
        }
    }
    for col in (0..c).rev() {
        for j in col + 1..c {
            z[col] -= a[col * c + j] * z[j];
        }
        z[col] /= a[col * c + col];
    }
    Ok(diff.iter().zip(&z).map(|(d, zz)| d * zz).sum())
}

/// RX anomaly detector over multi-channel pixel vectors. Background mean and
/// covariance come from the annulus between the guard radius and the window;
/// the covariance is regularized as Sigma + lambda*I with
/// lambda = 1e-6 * trace(Sigma)/C (floored away from zero).
pub fn rx_detect(channels: &[&Raster], config: &DetectorConfig) -> Result<Vec<Detection>> {
    config.validate()?;
    let c = channels.len();
    if c == 0 {
        return Err(DataError::InvalidConfig("rx_detect needs at least one channel".into()));
    }
    let (w, h) = (channels[0].w, channels[0].h);
    for ch in channels {
        if ch.w != w || ch.h != h {
            return Err(DataError::InvalidConfig("rx channels must share dimensions".into()));
        }
    }
    if config.window > w || config.window > h {
        return Err(DataError::InvalidConfig(format!(
            "window {} exceeds image {w}x{h}",
            config.window
        )));
    }

    let half = config.window / 2;
    let guard = config.guard;
    let mut cands = Vec::new();
    let mut mu = vec![0.0; c];
    let mut cov = vec![0.0; c * c];
    let mut diff = vec![0.0; c];
    for y in half..h - half {
        for x in half..w - half {
            // annulus statistics
            mu.fill(0.0);
            cov.fill(0.0);
            let mut count = 0usize;
            for wy in y - half..=y + half {
                for wx in x - half..=x + half {
                    let (dy, dx) = (wy.abs_diff(y), wx.abs_diff(x));
                    if dy.max(dx) <= guard {
                        continue;
                    }
                    for (ci, ch) in channels.iter().enumerate() {
                        mu[ci] += ch.get(wx, wy);
                    }
                    count += 1;
                }
            }
            for m in &mut mu {
                *m /= count as f64;
            }
            for wy in y - half..=y + half {
                for wx in x - half..=x + half {
                    let (dy, dx) = (wy.abs_diff(y), wx.abs_diff(x));
                    if dy.max(dx) <= guard {
                        continue;
                    }
                    for ci in 0..c {
                        let di = channels[ci].get(wx, wy) - mu[ci];
                        for cj in ci..c {
                            let dj = channels[cj].get(wx, wy) - mu[cj];
                            cov[ci * c + cj] += di * dj;
                        }
                    }
                }
            }
            for ci in 0..c {
                for cj in ci..c {
                    cov[ci * c + cj] /= count as f64;
                    cov[cj * c + ci] = cov[ci * c + cj];
                }
            }
            let trace: f64 = (0..c).map(|i| cov[i * c + i]).sum();
            let lambda = (1e-6 * trace / c as f64).max(1e-12);
            for i in 0..c {
                cov[i * c + i] += lambda;
            }
            for (ci, ch) in channels.iter().enumerate() {
                diff[ci] = ch.get(x, y) - mu[ci];
            }
            let score = mahalanobis(&diff, &cov)?;
            if score > config.rx_threshold {
                let det = Detection { x, y, energy_score: 0.0, rx_score: score, fused_score: 0.0 };
                cands.push((det, score, channels[0].get(x, y)));
            }
        }
    }
    Ok(nms(cands, config.nms_radius))
}

/// Fuse the two detector outputs: the union of candidate locations is
/// scored with 0.5 * rank-normalized energy + 0.5 * rank-normalized RX
/// (a missing detector contributes 0), then greedily NMS'd by fused score.
pub fn fuse_detections(
    energy: &[Detection],
    rx: &[Detection],
    config: &DetectorConfig,
) -> Result<Vec<Detection>> {
    config.validate()?;
    // rank weight (rank+1)/len in (0, 1], ascending by score
    let rank_weights = |dets: &[Detection], score_of: fn(&Detection) -> f64| -> Vec<f64> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| {
            score_of(&dets[a])
                .partial_cmp(&score_of(&dets[b]))
                .unwrap()
                .then(dets[a].y.cmp(&dets[b].y))
                .then(dets[a].x.cmp(&dets[b].x))
        });
        let mut weights = vec![0.0; dets.len()];
        for (rank, &idx) in order.iter().enumerate() {
            weights[idx] = (rank + 1) as f64 / dets.len() as f64;
        }
        weights
    };
    let energy_weights = rank_weights(energy, |d| d.energy_score);
    let rx_weights = rank_weights(rx, |d| d.rx_score);

    // union by exact location
    let mut merged: Vec<Detection> = Vec::new();
    let find = |v: &mut Vec<Detection>, x: usize, y: usize| -> usize {
        if let Some(i) = v.iter().position(|d| d.x == x && d.y == y) {
            i
        } else {
            v.push(Detection { x, y, energy_score: 0.0, rx_score: 0.0, fused_score: 0.0 });
            v.len() - 1
        }
    };
    for (det, weight) in energy.iter().zip(&energy_weights) {
        let i = find(&mut merged, det.x, det.y);
        merged[i].energy_score = det.energy_score;
        merged[i].fused_score += 0.5 * weight;
    }
    for (det, weight) in rx.iter().zip(&rx_weights) {
        let i = find(&mut merged, det.x, det.y);
        merged[i].rx_score = det.rx_score;
        merged[i].fused_score += 0.5 * weight;
    }

    let cands: Vec<(Detection, f64, f64)> = merged
        .into_iter()
        .map(|d| (d, d.fused_score, d.energy_score + d.rx_score))
        .collect();
    Ok(nms(cands, config.nms_radius))
}

/// Bilinear resize of a square f64 image with half-pixel sampling; equal
/// sides return the input unchanged (bit-exact).
pub fn bilinear_resize(src: &[f64], in_side: usize, out_side: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), in_side * in_side);
    if in_side == out_side {
        return src.to_vec();
    }
    let scale = in_side as f64 / out_side as f64;
    let mut out = vec![0.0; out_side * out_side];
    for oy in 0..out_side {
        let sy = ((oy as f64 + 0.5) * scale - 0.5).clamp(0.0, in_side as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(in_side - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_side {
            let sx = ((ox as f64 + 0.5) * scale - 0.5).clamp(0.0, in_side as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(in_side - 1);
            let fx = sx - x0 as f64;
            let top = src[y0 * in_side + x0] * (1.0 - fx) + src[y0 * in_side + x1] * fx;
            let bot = src[y1 * in_side + x0] * (1.0 - fx) + src[y1 * in_side + x1] * fx;
            out[oy * out_side + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Crop `snippet_size` squares around each detection from the HF (and for
/// 2-channel output, LF) bands, bilinear-resize to `resize`, and stack.
/// Edge chips are clamped to stay inside the scene.
pub fn extract_snippets(
    scene: &Scene,
    detections: &[Detection],
    config: &DetectorConfig,
    channels: usize,
) -> Result<Vec<Snippet>> {
    config.validate()?;
    if !(channels == 1 || channels == 2) {
        return Err(DataError::InvalidConfig(format!("channels must be 1 or 2, got {channels}")));
    }
    let side = scene.hf.w;
    if config.snippet_size > side {
        return Err(DataError::InvalidConfig(format!(
            "snippet_size {} exceeds scene side {side}",
            config.snippet_size
        )));
    }
    let size = config.snippet_size;
    let out_side = config.resize;
    let mut snippets = Vec::with_capacity(detections.len());
    for det in detections {
        let left = det.x.saturating_sub(size / 2).min(side - size);
        let top = det.y.saturating_sub(size / 2).min(side - size);
        let mut data = Vec::with_capacity(channels * out_side * out_side);
        let bands: &[&Raster] = if channels == 2 { &[&scene.hf, &scene.lf] } else { &[&scene.hf] };
        for band in bands {
            let mut crop = Vec::with_capacity(size * size);
            for y in top..top + size {
                for x in left..left + size {
                    crop.push(band.get(x, y));
                }
            }
            let resized = bilinear_resize(&crop, size, out_side);
            data.extend(resized.into_iter().map(|v| v as f32));
        }
        snippets.push(Snippet::new(channels, out_side, data)?);
    }
    Ok(snippets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DetectorConfig {
        DetectorConfig {
            window: 3,
            guard: 0,
            energy_threshold_sigma: 3.0,
            rx_threshold: 9.0,
            nms_radius: 4.0,
            snippet_size: 8,
            resize: 8,
        }
    }

    #[test]
    fn constant_image_no_detections() {
        let img = Raster::filled(32, 32, 5.0);
        assert!(energy_detect(&img, &small_config()).unwrap().is_empty());
    }

    #[test]
    fn single_bright_pixel_detected_once_at_that_pixel() {
        let mut img = Raster::zeros(32, 32);
        img.set(17, 13, 100.0);
        let dets = energy_detect(&img, &small_config()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!((dets[0].x, dets[0].y), (17, 13));
    }

    #[test]
    fn mahalanobis_hand_cases() {
        // x == mu
        assert_eq!(mahalanobis(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]).unwrap(), 0.0);
        // identity covariance: squared Euclidean norm
        let s = mahalanobis(&[3.0, 4.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((s - 25.0).abs() < 1e-12);
        // diag(2, 0.5): 1/2 + 1/0.5 = 2.5
        let s = mahalanobis(&[1.0, 1.0], &[2.0, 0.0, 0.0, 0.5]).unwrap();
        assert!((s - 2.5).abs() < 1e-12);
    }

    #[test]
    fn fusion_of_empty_lists_is_empty() {
        let cfg = small_config();
        assert!(fuse_detections(&[], &[], &cfg).unwrap().is_empty());
    }

    #[test]
    fn energy_only_detection_gets_half_rank_weight() {
        let cfg = small_config();
        let only = Detection { x: 5, y: 5, energy_score: 4.0, rx_score: 0.0, fused_score: 0.0 };
        let fused = fuse_detections(&[only], &[], &cfg).unwrap();
        assert_eq!(fused.len(), 1);
        // sole detection has rank weight 1.0, halved
        assert!((fused[0].fused_score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn colocated_detections_leave_one_survivor() {
        let cfg = small_config();
        let a = Detection { x: 5, y: 5, energy_score: 4.0, rx_score: 0.0, fused_score: 0.0 };
        let b = Detection { x: 6, y: 5, energy_score: 0.0, rx_score: 20.0, fused_score: 0.0 };
        let c = Detection { x: 6, y: 6, energy_score: 0.0, rx_score: 30.0, fused_score: 0.0 };
        let fused = fuse_detections(&[a], &[b, c], &cfg).unwrap();
        assert_eq!(fused.len(), 1);
        // a and c carry full rank weight 0.5 each; c outranks b; ties between
        // a and c break on raw score sum, so c (30.0) survives
        assert_eq!((fused[0].x, fused[0].y), (6, 6));
    }

    #[test]
    fn identity_resize_returns_crop_unchanged() {
        let data: Vec<f64> = (0..64).map(|i| i as f64 * 0.37).collect();
        assert_eq!(bilinear_resize(&data, 8, 8), data);
    }

    #[test]
    fn constant_crop_resizes_to_constant() {
        let data = vec![2.5; 16 * 16];
        let out = bilinear_resize(&data, 16, 7);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }
}
