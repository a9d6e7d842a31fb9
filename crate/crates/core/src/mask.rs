//! Binary query masks: loading, grid resampling and morphological degradation.

use std::path::Path;

use image::{ColorType, GrayImage};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::real::Real;

/// Binary `width × height` pixel mask, row-major, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QueryMask {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

/// Inclusive pixel box `(x0, y0, x1, y1)`; JSON form `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl From<[usize; 4]> for PixelBox {
    fn from([x0, y0, x1, y1]: [usize; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<PixelBox> for [usize; 4] {
    fn from(b: PixelBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl QueryMask {
    /// Any nonzero input value becomes foreground.
    pub fn from_values(width: usize, height: usize, values: &[u8]) -> Result<Self> {
        if values.len() != width * height {
            return arg(format!(
                "mask of {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            ));
        }
        Ok(Self {
            width,
            height,
            pixels: values.iter().map(|&v| u8::from(v != 0)).collect(),
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x] != 0
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }

    /// Pixelwise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &QueryMask) -> bool {
        self.dims() == other.dims() && self.pixels.iter().zip(&other.pixels).all(|(&a, &b)| a <= b)
    }

    /// Loads an 8-bit grayscale PNG. When `expected` is given the mask must
    /// have exactly those `(width, height)` dimensions.
    pub fn load(path: impl AsRef<Path>, expected: Option<(usize, usize)>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::ImageReader::open(path)?
            .with_guessed_format()?
            .decode()?;
        if img.color() != ColorType::L8 {
            return arg(format!(
                "mask {} must be 8-bit grayscale, found {:?}",
                path.display(),
                img.color()
            ));
        }
        let gray = img.into_luma8();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        if let Some((ew, eh)) = expected {
            if (w, h) != (ew, eh) {
                return arg(format!(
                    "mask {} is {w}x{h} but the image is {ew}x{eh}",
                    path.display()
                ));
            }
        }
        Self::from_values(w, h, gray.as_raw())
    }

    /// Writes foreground as 255, background as 0.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.pixels.iter().map(|&p| p * 255).collect();
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Area-averaged soft mask on the patch grid, row-major
    /// `(height/patch) × (width/patch)`.
    pub fn resample_to_grid<T: Real>(&self, patch_size: usize) -> Result<Vec<T>> {
        if patch_size == 0
            || !self.width.is_multiple_of(patch_size)
            || !self.height.is_multiple_of(patch_size)
        {
            return arg(format!(
                "mask {}x{} not divisible by patch size {patch_size}",
                self.width, self.height
            ));
        }
        let (gw, gh) = (self.width / patch_size, self.height / patch_size);
        let mut counts = vec![0usize; gw * gh];
        for y in 0..self.height {
            for x in 0..self.width {
                counts[(y / patch_size) * gw + x / patch_size] +=
                    self.pixels[y * self.width + x] as usize;
            }
        }
        let area = T::from_usize(patch_size * patch_size).unwrap();
        Ok(counts
            .into_iter()
            .map(|c| T::from_usize(c).unwrap() / area)
            .collect())
    }

    /// Nearest-neighbour resize, used to bring masks to the model input size.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let mut pixels = vec![0u8; width * height];
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                pixels[y * width + x] = self.pixels[sy * self.width + sx];
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Binary erosion with a `(2r+1)`-square structuring element. Pixels
    /// outside the canvas are ignored.
    pub fn erode(&self, radius: usize) -> Self {
        self.morph(radius, true)
    }

    /// Binary dilation with a `(2r+1)`-square structuring element.
    pub fn dilate(&self, radius: usize) -> Self {
        self.morph(radius, false)
    }

    fn morph(&self, radius: usize, erode: bool) -> Self {
        let (w, h) = (self.width, self.height);
        let fold = |vals: &mut dyn Iterator<Item = u8>| if erode { vals.min() } else { vals.max() };
        let mut horiz = vec![0u8; w * h];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                horiz[y * w + x] =
                    fold(&mut (lo..=hi).map(|xx| self.pixels[y * w + xx])).unwrap_or(0);
            }
        }
        let mut pixels = vec![0u8; w * h];
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for x in 0..w {
                pixels[y * w + x] = fold(&mut (lo..=hi).map(|yy| horiz[yy * w + x])).unwrap_or(0);
            }
        }
        Self {
            width: w,
            height: h,
            pixels,
        }
    }

    /// Ones inside the inclusive box, zeros elsewhere.
    pub fn from_box(b: PixelBox, width: usize, height: usize) -> Result<Self> {
        if b.x0 > b.x1 || b.y0 > b.y1 || b.x1 >= width || b.y1 >= height {
            return arg(format!(
                "box [{}, {}, {}, {}] is inverted or outside {width}x{height}",
                b.x0, b.y0, b.x1, b.y1
            ));
        }
        let mut m = Self::empty(width, height);
        for y in b.y0..=b.y1 {
            m.pixels[y * width + b.x0..=y * width + b.x1].fill(1);
        }
        Ok(m)
    }

    /// Tightest inclusive box around the foreground, `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<PixelBox> {
        let mut bb: Option<PixelBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let b = bb.get_or_insert(PixelBox {
                        x0: x,
                        y0: y,
                        x1: x,
                        y1: y,
                    });
                    b.x0 = b.x0.min(x);
                    b.x1 = b.x1.max(x);
                    b.y0 = b.y0.min(y);
                    b.y1 = b.y1.max(y);
                }
            }
        }
        bb
    }

    pub fn intersection_area(&self, other: &QueryMask) -> usize {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(&a, &b)| a & b != 0)
            .count()
    }

    pub fn union_area(&self, other: &QueryMask) -> usize {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(&a, &b)| a | b != 0)
            .count()
    }
}
