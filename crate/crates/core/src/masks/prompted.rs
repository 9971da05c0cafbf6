use ndarray::Array2;

use super::{BinaryMask, BorderContrastSaliency, PromptedSegmenter, SaliencyMatting};
use crate::backbone::text::split_words;
use crate::error::Result;
use crate::image::PixelImage;

const COLOR_WORDS: &[(&str, [f32; 3])] = &[
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
    ("gray", [0.5, 0.5, 0.5]),
    ("grey", [0.5, 0.5, 0.5]),
    ("red", [0.85, 0.1, 0.1]),
    ("green", [0.1, 0.65, 0.2]),
    ("blue", [0.1, 0.2, 0.85]),
    ("yellow", [0.95, 0.85, 0.1]),
    ("orange", [0.95, 0.5, 0.1]),
    ("purple", [0.5, 0.2, 0.6]),
    ("pink", [0.95, 0.6, 0.7]),
    ("brown", [0.5, 0.3, 0.15]),
    ("beige", [0.9, 0.85, 0.7]),
];

/// Lightweight prompt-driven segmenter.
///
/// A colour word in the prompt selects pixels near that colour; otherwise
/// the saliency matte is used. Either way only the largest connected region
/// is kept, since the prompt names a single object. Learned open-vocabulary
/// segmenters plug in through [`PromptedSegmenter`] instead.
#[derive(Clone, Debug)]
pub struct ColorKeywordSegmenter {
    /// RGB distance treated as a full match.
    pub tolerance: f32,
    pub fallback: BorderContrastSaliency,
}

impl Default for ColorKeywordSegmenter {
    fn default() -> Self {
        Self {
            tolerance: 0.35,
            fallback: BorderContrastSaliency::default(),
        }
    }
}

impl ColorKeywordSegmenter {
    pub fn anchor_color(prompt: &str) -> Option<[f32; 3]> {
        split_words(prompt).iter().find_map(|w| {
            COLOR_WORDS
                .iter()
                .find(|(name, _)| name == w)
                .map(|(_, rgb)| *rgb)
        })
    }
}

impl PromptedSegmenter for ColorKeywordSegmenter {
    fn segment(&self, image: &PixelImage<f32>, prompt: &str) -> Result<Array2<f32>> {
        let (h, w) = (image.height(), image.width());
        let soft = match Self::anchor_color(prompt) {
            Some(anchor) => {
                let dist = Array2::from_shape_fn((h, w), |(y, x)| {
                    let p = image.pixel(y, x);
                    (0..3).map(|k| (p[k] - anchor[k]).powi(2)).sum::<f32>().sqrt()
                });
                dist.mapv(|d| (1.5 - d / self.tolerance).clamp(0.0, 1.0))
            }
            None => self.fallback.matte(image)?,
        };
        let keep = BinaryMask::new(soft.mapv(|a| a >= 0.5)).largest_component();
        Ok(Array2::from_shape_fn((h, w), |(y, x)| {
            if keep.get(y, x) {
                soft[[y, x]]
            } else {
                0.0
            }
        }))
    }
}
