//! Desk-scale synthetic dataset: colored rectangles on a neutral background,
//! a random frozen toy encoder, and a text bank built from that encoder.
//!
//! The "text" prototype of a color is the mean projected token of a
//! full-frame image of that color, so retrieval has a well-defined target
//! without a language model.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg, Result};
use crate::harness::eval::Degradation;
use crate::harness::manifest::{Manifest, ManifestImage, ManifestMask};
use crate::harness::metrics::{class_retrieval, ClassQuery, RetrievalReport, TextBank};
use crate::inversion::{mask_inversion_batch, InversionConfig};
use crate::mask::{PixelBox, QueryMask};
use crate::preprocess::Preprocess;
use crate::real::Real;
use crate::vit::{ImageTensor, Model, ModelConfig, RandomInit};

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSpec {
    pub images: usize,
    pub regions_per_image: usize,
    /// `(name, rgb)`; at least two entries.
    pub palette: Vec<(String, [u8; 3])>,
    pub background: [u8; 3],
    /// Rectangle side range in pixels, inclusive.
    pub min_side: usize,
    pub max_side: usize,
    pub model: ModelConfig,
    pub init: RandomInit,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        let palette = [
            ("red", [220, 30, 30]),
            ("green", [30, 200, 40]),
            ("blue", [30, 40, 220]),
            ("yellow", [230, 220, 30]),
            ("magenta", [210, 30, 210]),
            ("cyan", [30, 210, 220]),
        ];
        Self {
            images: 20,
            regions_per_image: 6,
            palette: palette.iter().map(|(n, c)| (n.to_string(), *c)).collect(),
            background: [128, 128, 128],
            min_side: 5,
            max_side: 9,
            model: ModelConfig {
                layers: 2,
                heads: 2,
                width: 32,
                joint_dim: 16,
                patch_size: 4,
                image_size: 32,
                mlp_ratio: 4.0,
                layernorm_eps: 1e-5,
                activation: Default::default(),
            },
            // Small random blocks around an identity value path keep patch
            // colors readable at the last attention layer.
            init: RandomInit {
                linear_gain: 0.25,
                mlp_gain: 0.3,
                value_identity: 1.0,
                ..RandomInit::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureRegion {
    pub mask: QueryMask,
    pub bbox: PixelBox,
    /// Index into the palette and the text bank.
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureImage {
    pub rgb: RgbImage,
    pub regions: Vec<FixtureRegion>,
}

#[derive(Clone, Debug)]
pub struct Fixture<T> {
    pub model: Model<T>,
    pub images: Vec<FixtureImage>,
    pub labels: Vec<String>,
    pub bank: TextBank<T>,
    pub preprocess: Preprocess,
}

impl<T: Real> Fixture<T> {
    pub fn tensor(&self, image: &FixtureImage) -> ImageTensor<T> {
        self.preprocess
            .apply(&image.rgb, self.model.config().image_size)
    }
}

fn overlaps_with_gap(a: &PixelBox, b: &PixelBox, gap: usize) -> bool {
    a.x0 <= b.x1 + gap && b.x0 <= a.x1 + gap && a.y0 <= b.y1 + gap && b.y0 <= a.y1 + gap
}

/// Builds the fixture deterministically from `seed`.
pub fn synth_fixture<T: Real>(seed: u64, spec: &FixtureSpec) -> Result<Fixture<T>> {
    if spec.palette.len() < 2 {
        return arg("fixture needs at least two colors");
    }
    if spec.regions_per_image > spec.palette.len() {
        return arg("more regions per image than colors");
    }
    let size = spec.model.image_size;
    if spec.min_side == 0 || spec.min_side > spec.max_side || spec.max_side > size {
        return arg("rectangle side range must satisfy 1 <= min <= max <= image size");
    }
    let model = Model::<T>::random(&spec.model, seed, &spec.init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f17e_u64);
    let gap = 1;

    let mut images = Vec::with_capacity(spec.images);
    for _ in 0..spec.images {
        let mut colors: Vec<usize> = (0..spec.palette.len()).collect();
        colors.shuffle(&mut rng);
        // Rejection sampling of non-touching rectangles; restart the image if stuck.
        let boxes = 'layout: loop {
            let mut boxes: Vec<PixelBox> = Vec::new();
            for _ in 0..spec.regions_per_image {
                let mut placed = false;
                for _ in 0..200 {
                    let w = rng.random_range(spec.min_side..=spec.max_side);
                    let h = rng.random_range(spec.min_side..=spec.max_side);
                    let x0 = rng.random_range(0..=size - w);
                    let y0 = rng.random_range(0..=size - h);
                    let b = PixelBox {
                        x0,
                        y0,
                        x1: x0 + w - 1,
                        y1: y0 + h - 1,
                    };
                    if boxes.iter().all(|o| !overlaps_with_gap(o, &b, gap)) {
                        boxes.push(b);
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    continue 'layout;
                }
            }
            break boxes;
        };
        let mut rgb = RgbImage::from_pixel(size as u32, size as u32, Rgb(spec.background));
        let mut regions = Vec::with_capacity(boxes.len());
        for (b, &label) in boxes.iter().zip(&colors) {
            for y in b.y0..=b.y1 {
                for x in b.x0..=b.x1 {
                    rgb.put_pixel(x as u32, y as u32, Rgb(spec.palette[label].1));
                }
            }
            regions.push(FixtureRegion {
                mask: QueryMask::from_box(*b, size, size)?,
                bbox: *b,
                label,
            });
        }
        images.push(FixtureImage { rgb, regions });
    }

    let preprocess = Preprocess::default();
    let mut entries = Vec::with_capacity(spec.palette.len());
    for (name, color) in &spec.palette {
        let flat = RgbImage::from_pixel(size as u32, size as u32, Rgb(*color));
        let acts = model.encode(&preprocess.apply(&flat, size))?;
        entries.push((name.clone(), acts.zbar));
    }
    let labels = spec.palette.iter().map(|(n, _)| n.clone()).collect();
    Ok(Fixture {
        model,
        images,
        labels,
        bank: TextBank::new(entries)?,
        preprocess,
    })
}

impl<T: Real> Fixture<T> {
    /// Writes the fixture as files: `model.st`, `config.json`, `images/`,
    /// `masks/`, `manifest.json`, `bank.json` (one entry per color) and
    /// `expressions.json` (one entry per region, keyed by its expression id).
    /// Returns the manifest.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("masks"))?;
        self.model.save(dir.join("model.st"))?;
        std::fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(self.model.config())?,
        )?;
        let mut images = Vec::with_capacity(self.images.len());
        let mut expressions = Vec::new();
        for (ii, img) in self.images.iter().enumerate() {
            let image_path = PathBuf::from(format!("images/img_{ii:03}.png"));
            img.rgb
                .save_with_format(dir.join(&image_path), image::ImageFormat::Png)?;
            let mut masks = Vec::with_capacity(img.regions.len());
            for (ri, r) in img.regions.iter().enumerate() {
                let mask_path = PathBuf::from(format!("masks/img_{ii:03}_r{ri}.png"));
                r.mask.save(dir.join(&mask_path))?;
                let label = &self.labels[r.label];
                let expression = format!("img_{ii:03}/{label}");
                expressions.push((expression.clone(), self.bank.entries()[r.label].1.clone()));
                masks.push(ManifestMask {
                    id: format!("r{ri}"),
                    path: Some(mask_path),
                    bbox: None,
                    label: Some(label.clone()),
                    expression_id: Some(expression),
                });
            }
            images.push(ManifestImage {
                path: image_path,
                masks,
            });
        }
        let manifest = Manifest { images };
        manifest.save(dir.join("manifest.json"))?;
        std::fs::write(
            dir.join("bank.json"),
            serde_json::to_string_pretty(&self.bank.to_json())?,
        )?;
        let expressions = TextBank::new(expressions)?;
        std::fs::write(
            dir.join("expressions.json"),
            serde_json::to_string_pretty(&expressions.to_json())?,
        )?;
        Ok(manifest)
    }
}

/// Class retrieval of every fixture region with localized embeddings. A
/// region whose degraded mask is empty has no embedding and counts as a miss.
pub fn localized_class_retrieval<T: Real>(
    fixture: &Fixture<T>,
    cfg: &InversionConfig,
    degradation: Degradation,
    ks: &[usize],
) -> Result<RetrievalReport> {
    let mut embeddings: Vec<(String, usize, Option<Vec<T>>)> = Vec::new();
    for (ii, img) in fixture.images.iter().enumerate() {
        let degraded: Vec<QueryMask> = img
            .regions
            .iter()
            .map(|r| degradation.apply(&r.mask))
            .collect();
        let usable: Vec<usize> = (0..degraded.len())
            .filter(|&i| !degraded[i].is_empty())
            .collect();
        let mut vectors: Vec<Option<Vec<T>>> = vec![None; degraded.len()];
        if !usable.is_empty() {
            let masks: Vec<QueryMask> = usable.iter().map(|&i| degraded[i].clone()).collect();
            let out = mask_inversion_batch(&fixture.model, &fixture.tensor(img), &masks, cfg)?;
            for (&i, e) in usable.iter().zip(out) {
                vectors[i] = Some(e.vector);
            }
        }
        for (ri, (r, v)) in img.regions.iter().zip(vectors).enumerate() {
            embeddings.push((format!("img{ii}/region{ri}"), r.label, v));
        }
    }
    let queries: Vec<ClassQuery<'_, T>> = embeddings
        .iter()
        .map(|(id, label, v)| ClassQuery {
            id: id.clone(),
            label: &fixture.labels[*label],
            embedding: v.as_deref(),
        })
        .collect();
    class_retrieval(&queries, &fixture.bank, ks)
}

/// Baseline that classifies every region with its image's projected class token.
pub fn global_cls_retrieval<T: Real>(
    fixture: &Fixture<T>,
    ks: &[usize],
) -> Result<RetrievalReport> {
    let mut rows: Vec<(String, usize, Vec<T>)> = Vec::new();
    for (ii, img) in fixture.images.iter().enumerate() {
        let acts = fixture.model.encode(&fixture.tensor(img))?;
        for (ri, r) in img.regions.iter().enumerate() {
            rows.push((format!("img{ii}/region{ri}"), r.label, acts.cls.clone()));
        }
    }
    let queries: Vec<ClassQuery<'_, T>> = rows
        .iter()
        .map(|(id, label, v)| ClassQuery {
            id: id.clone(),
            label: &fixture.labels[*label],
            embedding: Some(v),
        })
        .collect();
    class_retrieval(&queries, &fixture.bank, ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FixtureSpec {
        FixtureSpec {
            images: 4,
            ..FixtureSpec::default()
        }
    }

    #[test]
    fn same_seed_same_fixture() {
        let a = synth_fixture::<f32>(11, &small()).unwrap();
        let b = synth_fixture::<f32>(11, &small()).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.bank, b.bank);
        let c = synth_fixture::<f32>(12, &small()).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn masks_are_nonempty_in_bounds_and_disjoint() {
        let f = synth_fixture::<f32>(3, &small()).unwrap();
        for img in &f.images {
            assert_eq!(img.regions.len(), 6);
            for (i, r) in img.regions.iter().enumerate() {
                assert!(!r.mask.is_empty());
                assert_eq!(r.mask.dims(), (32, 32));
                assert_eq!(r.mask.bounding_box(), Some(r.bbox));
                for o in &img.regions[i + 1..] {
                    assert_eq!(r.mask.intersection_area(&o.mask), 0);
                    assert_ne!(r.label, o.label);
                }
            }
        }
    }

    #[test]
    fn rejects_single_color_palette() {
        let spec = FixtureSpec {
            palette: vec![("red".into(), [255, 0, 0])],
            regions_per_image: 1,
            ..small()
        };
        assert!(synth_fixture::<f32>(1, &spec).is_err());
    }

    #[test]
    fn written_fixture_round_trips() {
        let f = synth_fixture::<f32>(
            2,
            &FixtureSpec {
                images: 2,
                ..FixtureSpec::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = f.write(dir.path()).unwrap();
        assert_eq!(
            Manifest::load(dir.path().join("manifest.json")).unwrap(),
            manifest
        );
        let bank = TextBank::<f32>::load(dir.path().join("bank.json")).unwrap();
        assert_eq!(
            bank.entries()
                .iter()
                .map(|e| e.0.as_str())
                .collect::<Vec<_>>(),
            f.labels
        );
        let m0 = &manifest.images[1].masks[2];
        let mask = m0.resolve(dir.path(), (32, 32)).unwrap();
        assert_eq!(mask, f.images[1].regions[2].mask);
        let config = ModelConfig::from_json_file(dir.path().join("config.json")).unwrap();
        assert!(Model::<f32>::load(dir.path().join("model.st"), &config).is_ok());
    }
}
