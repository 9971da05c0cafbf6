//! Deterministic sample photographs for tests, demos and benchmarks.
//!
//! Scenes are rendered analytically from signed distance fields with
//! anti-aliased edges, soft shading and a faint fixed-seed texture, so they
//! behave like small product shots: one salient object on a plain backdrop.

use crate::image::PixelImage;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplePhoto {
    Bag,
    Lamp,
    Sofa,
}

impl SamplePhoto {
    pub const ALL: [SamplePhoto; 3] = [SamplePhoto::Bag, SamplePhoto::Lamp, SamplePhoto::Sofa];

    pub fn name(self) -> &'static str {
        match self {
            SamplePhoto::Bag => "bag",
            SamplePhoto::Lamp => "lamp",
            SamplePhoto::Sofa => "sofa",
        }
    }

    pub fn caption(self) -> &'static str {
        match self {
            SamplePhoto::Bag => "a photo of a bag",
            SamplePhoto::Lamp => "a photo of a lamp",
            SamplePhoto::Sofa => "a photo of a sofa",
        }
    }

    pub fn render<T: Scalar>(self, size: usize) -> PixelImage<T> {
        let s = size as f64;
        PixelImage::from_fn(size, size, |y, x| {
            // normalized coordinates in [0, 1], pixel centres
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let aa = 1.5 / s;
            let px = match self {
                SamplePhoto::Bag => bag(u, v, aa),
                SamplePhoto::Lamp => lamp(u, v, aa),
                SamplePhoto::Sofa => sofa(u, v, aa),
            };
            let n = texture(x, y) * 0.012;
            [
                T::of((px[0] + n).clamp(0.0, 1.0)),
                T::of((px[1] + n).clamp(0.0, 1.0)),
                T::of((px[2] + n).clamp(0.0, 1.0)),
            ]
        })
    }
}

/// White square covering 25% of a black canvas, centred.
pub fn white_square<T: Scalar>(size: usize) -> PixelImage<T> {
    let (lo, hi) = (size / 4, size - size / 4);
    PixelImage::from_fn(size, size, |y, x| {
        let inside = (lo..hi).contains(&y) && (lo..hi).contains(&x);
        [if inside { T::one() } else { T::zero() }; 3]
    })
}

pub fn uniform_gray<T: Scalar>(size: usize) -> PixelImage<T> {
    PixelImage::from_fn(size, size, |_, _| [T::of(0.5); 3])
}

fn texture(x: usize, y: usize) -> f64 {
    let mut h = (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 29;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 32;
    (h as f64 / u64::MAX as f64) * 2.0 - 1.0
}

fn coverage(sd: f64, aa: f64) -> f64 {
    (0.5 - sd / aa).clamp(0.0, 1.0)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn shade(c: [f64; 3], k: f64) -> [f64; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

fn rounded_box(u: f64, v: f64, cx: f64, cy: f64, hw: f64, hh: f64, r: f64) -> f64 {
    let qx = (u - cx).abs() - hw + r;
    let qy = (v - cy).abs() - hh + r;
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0) - r
}

fn backdrop(u: f64, v: f64, wall: [f64; 3], floor: [f64; 3], horizon: f64) -> [f64; 3] {
    if v < horizon {
        shade(wall, 0.92 + 0.08 * (1.0 - v))
    } else {
        let stripe = 0.03 * ((u * 40.0).sin() * 0.5 + 0.5);
        shade(floor, 0.9 + stripe + 0.1 * (v - horizon))
    }
}

fn bag(u: f64, v: f64, aa: f64) -> [f64; 3] {
    let mut c = backdrop(u, v, [0.86, 0.82, 0.74], [0.55, 0.42, 0.30], 0.72);
    // handle: ring segment above the body
    let ring = (((u - 0.5).powi(2) + (v - 0.36).powi(2)).sqrt() - 0.13).abs() - 0.018;
    let handle = coverage(ring.max(v - 0.40), aa);
    c = mix(c, [0.35, 0.16, 0.10], handle);
    let body = coverage(rounded_box(u, v, 0.5, 0.58, 0.25, 0.18, 0.06), aa);
    let light = 1.05 - 0.35 * (v - 0.40) - 0.2 * (u - 0.5).abs();
    c = mix(c, shade([0.70, 0.20, 0.15], light), body);
    let flap = coverage(rounded_box(u, v, 0.5, 0.47, 0.25, 0.05, 0.03), aa);
    mix(c, shade([0.55, 0.14, 0.10], light), flap)
}

fn lamp(u: f64, v: f64, aa: f64) -> [f64; 3] {
    let mut c = backdrop(u, v, [0.62, 0.70, 0.80], [0.80, 0.78, 0.74], 0.80);
    let base = coverage(((u - 0.5) / 0.16).hypot((v - 0.80) / 0.035) - 1.0, aa * 6.0);
    c = mix(c, [0.20, 0.20, 0.22], base);
    let stem = coverage(rounded_box(u, v, 0.5, 0.62, 0.015, 0.18, 0.01), aa);
    c = mix(c, [0.25, 0.25, 0.27], stem);
    // trapezoid shade: half-width grows from 0.12 at top to 0.24 at bottom
    let (top, bottom) = (0.18, 0.46);
    let t = ((v - top) / (bottom - top)).clamp(0.0, 1.0);
    let half = 0.12 + 0.12 * t;
    let sd = ((u - 0.5).abs() - half).max(top - v).max(v - bottom);
    let glow = 1.0 - 0.25 * (u - 0.5).abs() / half.max(1e-6);
    mix(c, shade([0.96, 0.84, 0.45], glow), coverage(sd, aa))
}

fn sofa(u: f64, v: f64, aa: f64) -> [f64; 3] {
    let mut c = backdrop(u, v, [0.90, 0.89, 0.86], [0.62, 0.60, 0.58], 0.74);
    let colour = [0.25, 0.52, 0.42];
    let back = coverage(rounded_box(u, v, 0.5, 0.46, 0.30, 0.12, 0.04), aa);
    c = mix(c, shade(colour, 0.85), back);
    let seat = coverage(rounded_box(u, v, 0.5, 0.62, 0.32, 0.07, 0.03), aa);
    c = mix(c, shade(colour, 1.0), seat);
    for cx in [0.18, 0.82] {
        let arm = coverage(rounded_box(u, v, cx, 0.57, 0.05, 0.12, 0.04), aa);
        c = mix(c, shade(colour, 0.92), arm);
    }
    for cx in [0.24, 0.76] {
        let leg = coverage(rounded_box(u, v, cx, 0.73, 0.012, 0.03, 0.005), aa);
        c = mix(c, [0.20, 0.14, 0.10], leg);
    }
    c
}
