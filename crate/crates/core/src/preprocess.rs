//! RGB image loading and normalization to the encoder input.

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::real::Real;
use crate::vit::ImageTensor;

/// Per-channel normalization applied after bicubic resizing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Preprocess {
    /// OpenAI CLIP statistics.
    fn default() -> Self {
        Self {
            mean: [0.48145466, 0.4578275, 0.40821073],
            std: [0.26862954, 0.26130258, 0.27577711],
        }
    }
}

impl Preprocess {
    /// Resizes (bicubic) to `size × size` when needed, scales to `[0, 1]` and normalizes.
    pub fn apply<T: Real>(&self, img: &RgbImage, size: usize) -> ImageTensor<T> {
        let resized;
        let img = if img.width() as usize == size && img.height() as usize == size {
            img
        } else {
            resized =
                image::imageops::resize(img, size as u32, size as u32, FilterType::CatmullRom);
            &resized
        };
        let mut data = vec![T::zero(); 3 * size * size];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                let v = (px.0[c] as f64 / 255.0 - self.mean[c]) / self.std[c];
                data[(c * size + y as usize) * size + x as usize] = T::lit(v);
            }
        }
        ImageTensor { size, data }
    }
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    Ok(image::ImageReader::open(path.as_ref())?
        .with_guessed_format()?
        .decode()?
        .into_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_channels_in_chw_order() {
        let mut img = RgbImage::new(2, 2);
        img.put_pixel(1, 0, image::Rgb([255, 0, 128]));
        let p = Preprocess {
            mean: [0.5; 3],
            std: [0.5; 3],
        };
        let t: ImageTensor<f64> = p.apply(&img, 2);
        assert_eq!(t.at(0, 0, 1), 1.0);
        assert_eq!(t.at(1, 0, 1), -1.0);
        assert!((t.at(2, 0, 1) - (128.0 / 255.0 - 0.5) / 0.5).abs() < 1e-12);
        assert_eq!(t.at(0, 1, 1), -1.0);
    }

    #[test]
    fn resizes_to_model_input() {
        let img = RgbImage::from_pixel(5, 3, image::Rgb([10, 20, 30]));
        let t: ImageTensor<f32> = Preprocess::default().apply(&img, 4);
        assert_eq!(t.size, 4);
        assert_eq!(t.data.len(), 48);
    }
}
