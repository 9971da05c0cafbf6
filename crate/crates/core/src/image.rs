//! RGB pixel arrays in `[0, 1]`, channel-first.

use ndarray::{s, Array2, Array3, Zip};

use crate::error::{Error, Result};
use crate::masks::BinaryMask;
use crate::scalar::Scalar;

/// Channel-first `(3, height, width)` RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelImage<T> {
    data: Array3<T>,
}

impl<T: Scalar> PixelImage<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(Error::invalid(format!(
                "expected 3 channels, got {}",
                data.dim().0
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((3, height, width)),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [T; 3]) -> Self {
        let mut data = Array3::zeros((3, height, width));
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for c in 0..3 {
                    data[[c, y, x]] = px[c];
                }
            }
        }
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<T> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        [
            self.data[[0, y, x]],
            self.data[[1, y, x]],
            self.data[[2, y, x]],
        ]
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> Array2<T> {
        let (r, g, b) = (
            self.data.slice(s![0, .., ..]),
            self.data.slice(s![1, .., ..]),
            self.data.slice(s![2, .., ..]),
        );
        let mut out = Array2::zeros((self.height(), self.width()));
        Zip::from(&mut out)
            .and(&r)
            .and(&g)
            .and(&b)
            .for_each(|o, &r, &g, &b| *o = T::of(0.299) * r + T::of(0.587) * g + T::of(0.114) * b);
        out
    }

    pub fn clamped(mut self) -> Self {
        self.data
            .mapv_inplace(|v| v.max(T::zero()).min(T::one()));
        self
    }

    /// Quantizes to interleaved 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = self.data[[c, y, x]].as_f64().clamp(0.0, 1.0);
                    out.push((v * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "expected {} bytes for {width}x{height} RGB, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        Ok(Self::from_fn(height, width, |y, x| {
            let i = (y * width + x) * 3;
            [
                T::of(bytes[i] as f64 / 255.0),
                T::of(bytes[i + 1] as f64 / 255.0),
                T::of(bytes[i + 2] as f64 / 255.0),
            ]
        }))
    }

    pub fn cast<U: Scalar>(&self) -> PixelImage<U> {
        PixelImage {
            data: self.data.mapv(|v| U::of(v.as_f64())),
        }
    }

    /// Aspect-preserving bilinear resize into a `size`×`size` canvas,
    /// padding the short side by replicating edge pixels.
    pub fn letterbox(&self, size: usize) -> Self {
        let (h, w) = (self.height(), self.width());
        if h == size && w == size {
            return self.clone();
        }
        let scale = size as f64 / h.max(w) as f64;
        let nh = ((h as f64 * scale).round() as usize).clamp(1, size);
        let nw = ((w as f64 * scale).round() as usize).clamp(1, size);
        let resized = self.resize_bilinear(nh, nw);
        let (oy, ox) = ((size - nh) / 2, (size - nw) / 2);
        Self::from_fn(size, size, |y, x| {
            let sy = y.saturating_sub(oy).min(nh - 1);
            let sx = x.saturating_sub(ox).min(nw - 1);
            resized.pixel(sy, sx)
        })
    }

    pub fn resize_bilinear(&self, nh: usize, nw: usize) -> Self {
        let (h, w) = (self.height(), self.width());
        let sample = |n: usize, src: usize, i: usize| -> (usize, usize, f64) {
            let pos = ((i as f64 + 0.5) * src as f64 / n as f64 - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        };
        Self::from_fn(nh, nw, |y, x| {
            let (y0, y1, fy) = sample(nh, h, y);
            let (x0, x1, fx) = sample(nw, w, x);
            let mut px = [T::zero(); 3];
            for (c, out) in px.iter_mut().enumerate() {
                let v = self.data[[c, y0, x0]].as_f64() * (1.0 - fy) * (1.0 - fx)
                    + self.data[[c, y0, x1]].as_f64() * (1.0 - fy) * fx
                    + self.data[[c, y1, x0]].as_f64() * fy * (1.0 - fx)
                    + self.data[[c, y1, x1]].as_f64() * fy * fx;
                *out = T::of(v);
            }
            px
        })
    }
}

/// Peak signal-to-noise ratio in dB with peak value 1. Identical images give `+inf`.
pub fn psnr<T: Scalar>(a: &PixelImage<T>, b: &PixelImage<T>) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::invalid(format!(
            "psnr shape mismatch {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    let n = a.data.len() as f64;
    let mse = Zip::from(&a.data)
        .and(&b.data)
        .fold(0.0f64, |acc, &x, &y| {
            let d = x.as_f64() - y.as_f64();
            acc + d * d
        })
        / n;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Mean absolute per-channel difference over pixels where `exclude` is unset.
/// Returns `None` when every pixel is excluded.
pub fn mean_abs_diff_outside<T: Scalar>(
    a: &PixelImage<T>,
    b: &PixelImage<T>,
    exclude: &BinaryMask,
) -> Result<Option<f64>> {
    if a.data.dim() != b.data.dim() || exclude.dim() != (a.height(), a.width()) {
        return Err(Error::invalid("mean_abs_diff_outside: shape mismatch"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if exclude.get(y, x) {
                continue;
            }
            for c in 0..3 {
                total += (a.data[[c, y, x]].as_f64() - b.data[[c, y, x]].as_f64()).abs();
            }
            count += 3;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let img = PixelImage::<f32>::from_fn(4, 4, |y, x| [(y * 4 + x) as f32 / 16.0; 3]);
        assert!(psnr(&img, &img).unwrap().is_infinite());
    }

    #[test]
    fn psnr_of_uniform_offset() {
        let a = PixelImage::<f64>::zeros(8, 8);
        let b = PixelImage::<f64>::from_fn(8, 8, |_, _| [0.1; 3]);
        // mse = 0.01 -> 20 dB
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn letterbox_keeps_aspect_and_size() {
        let img = PixelImage::<f32>::from_fn(30, 60, |_, x| [x as f32 / 60.0, 0.5, 0.5]);
        let out = img.letterbox(32);
        assert_eq!((out.height(), out.width()), (32, 32));
        // padded rows replicate the first content row
        assert_eq!(out.pixel(0, 10), out.pixel(8, 10));
    }

    #[test]
    fn rgb8_round_trip_within_quantization() {
        let img = PixelImage::<f32>::from_fn(5, 7, |y, x| [y as f32 / 5.0, x as f32 / 7.0, 0.3]);
        let bytes = img.to_rgb8();
        let back = PixelImage::<f32>::from_rgb8(7, 5, &bytes).unwrap();
        let max = img
            .data()
            .iter()
            .zip(back.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max <= 0.5 / 255.0 + 1e-6);
    }
}
