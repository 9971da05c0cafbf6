use ndarray::Array2;

use super::SaliencyMatting;
use crate::error::Result;
use crate::image::PixelImage;

/// Foreground matte from colour contrast against the image border.
///
/// Border pixels are clustered into a few background colours; each pixel's
/// distance to the nearest cluster is smoothed and split with Otsu's
/// threshold. Images without enough contrast produce an empty matte.
#[derive(Clone, Debug)]
pub struct BorderContrastSaliency {
    pub clusters: usize,
    /// Distances below this never count as foreground.
    pub min_contrast: f32,
    /// Width of the soft transition around the threshold.
    pub softness: f32,
}

impl Default for BorderContrastSaliency {
    fn default() -> Self {
        Self {
            clusters: 3,
            min_contrast: 0.08,
            softness: 0.05,
        }
    }
}

impl BorderContrastSaliency {
    fn border_pixels(image: &PixelImage<f32>) -> Vec<[f32; 3]> {
        let (h, w) = (image.height(), image.width());
        let band = (h.min(w) / 32).max(1);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if y < band || x < band || y + band >= h || x + band >= w {
                    out.push(image.pixel(y, x));
                }
            }
        }
        out
    }

    fn cluster(&self, pixels: &[[f32; 3]]) -> Vec<[f32; 3]> {
        let k = self.clusters.max(1).min(pixels.len().max(1));
        let mut sorted: Vec<[f32; 3]> = pixels.to_vec();
        sorted.sort_by(|a, b| luma(a).total_cmp(&luma(b)));
        let mut centers: Vec<[f32; 3]> = (0..k)
            .map(|i| sorted[(i * 2 + 1) * sorted.len() / (2 * k)])
            .collect();
        for _ in 0..10 {
            let mut sums = vec![[0.0f64; 4]; k];
            for p in pixels {
                let j = nearest(&centers, p).0;
                for c in 0..3 {
                    sums[j][c] += p[c] as f64;
                }
                sums[j][3] += 1.0;
            }
            for (center, s) in centers.iter_mut().zip(&sums) {
                if s[3] > 0.0 {
                    for c in 0..3 {
                        center[c] = (s[c] / s[3]) as f32;
                    }
                }
            }
        }
        centers
    }
}

fn luma(p: &[f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn nearest(centers: &[[f32; 3]], p: &[f32; 3]) -> (usize, f32) {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let d = (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f32>().sqrt();
            (i, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((0, 0.0))
}

/// 3x3 box blur with edge clamping.
pub(super) fn box_blur(src: &Array2<f32>) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                acc += src[[yy, xx]];
            }
        }
        acc / 9.0
    })
}

/// Otsu's threshold over values in `[0, max]`.
pub(super) fn otsu_threshold(values: &Array2<f32>, max: f32) -> f32 {
    const BINS: usize = 256;
    if max <= 0.0 {
        return 0.0;
    }
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = ((v / max) * (BINS - 1) as f32).round().clamp(0.0, (BINS - 1) as f32) as usize;
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best, mut best_var) = (0usize, -1.0f64);
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0.0 {
            break;
        }
        sum0 += i as f64 * c as f64;
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best = i;
        }
    }
    // threshold sits between bin `best` and the next one
    (best as f32 + 0.5) / (BINS - 1) as f32 * max
}

impl SaliencyMatting for BorderContrastSaliency {
    fn matte(&self, image: &PixelImage<f32>) -> Result<Array2<f32>> {
        let (h, w) = (image.height(), image.width());
        let centers = self.cluster(&Self::border_pixels(image));
        let dist = Array2::from_shape_fn((h, w), |(y, x)| nearest(&centers, &image.pixel(y, x)).1);
        let dist = box_blur(&dist);
        let max = dist.fold(0.0f32, |m, &v| m.max(v));
        if max < self.min_contrast {
            return Ok(Array2::zeros((h, w)));
        }
        let thr = otsu_threshold(&dist, max).max(self.min_contrast);
        Ok(dist.mapv(|d| ((d - thr) / (2.0 * self.softness) + 0.5).clamp(0.0, 1.0)))
    }
}
