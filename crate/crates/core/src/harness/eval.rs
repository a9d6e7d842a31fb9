//! Retrieval evaluation over a dataset manifest.

use std::path::Path;
use std::str::FromStr;

use crate::error::{arg, Error, Result};
use crate::harness::manifest::Manifest;
use crate::harness::metrics::{
    class_retrieval, referring_items, top1, Candidate, ClassQuery, Expression, ItemResult,
    RetrievalReport, TextBank,
};
use crate::inversion::{mask_inversion_batch, InversionConfig};
use crate::mask::QueryMask;
use crate::preprocess::{load_rgb, Preprocess};
use crate::real::Real;
use crate::vit::Model;

/// How query masks are altered before inversion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Degradation {
    #[default]
    None,
    Erode(usize),
    Dilate(usize),
    /// Replace each mask by its bounding box.
    Box,
}

impl Degradation {
    pub fn apply(self, mask: &QueryMask) -> QueryMask {
        match self {
            Degradation::None => mask.clone(),
            Degradation::Erode(r) => mask.erode(r),
            Degradation::Dilate(r) => mask.dilate(r),
            Degradation::Box => match mask.bounding_box() {
                Some(b) => {
                    QueryMask::from_box(b, mask.width(), mask.height()).expect("box inside mask")
                }
                None => mask.clone(),
            },
        }
    }
}

impl FromStr for Degradation {
    type Err = Error;

    /// `none`, `box`, `erode:R` or `dilate:R`.
    fn from_str(s: &str) -> Result<Self> {
        let radius = |r: &str| {
            r.parse::<usize>()
                .map_err(|_| Error::Argument(format!("bad radius `{r}` in `{s}`")))
        };
        match s.split_once(':') {
            None if s == "none" => Ok(Self::None),
            None if s == "box" => Ok(Self::Box),
            Some(("erode", r)) => Ok(Self::Erode(radius(r)?)),
            Some(("dilate", r)) => Ok(Self::Dilate(radius(r)?)),
            _ => arg(format!(
                "unknown degradation `{s}` (none|box|erode:R|dilate:R)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Rank the text bank per labelled mask.
    Class,
    /// Rank each image's masks per expression.
    Referring,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class" => Ok(Self::Class),
            "referring" => Ok(Self::Referring),
            other => arg(format!("unknown task `{other}` (class|referring)")),
        }
    }
}

struct ImageEval<T> {
    ids: Vec<String>,
    labels: Vec<Option<String>>,
    expressions: Vec<Option<String>>,
    masks: Vec<QueryMask>,
    embeddings: Vec<Option<Vec<T>>>,
}

fn invert_image<T: Real>(
    model: &Model<T>,
    preprocess: &Preprocess,
    base: &Path,
    image: &crate::harness::manifest::ManifestImage,
    degradation: Degradation,
    cfg: &InversionConfig,
) -> Result<ImageEval<T>> {
    let size = model.config().image_size;
    let rgb = load_rgb(base.join(&image.path))?;
    let dims = (rgb.width() as usize, rgb.height() as usize);
    let tensor = preprocess.apply::<T>(&rgb, size);
    let mut masks = Vec::with_capacity(image.masks.len());
    let mut queries = Vec::with_capacity(image.masks.len());
    for m in &image.masks {
        let mask = m.resolve(base, dims)?;
        let mut query = degradation.apply(&mask);
        if dims != (size, size) {
            query = query.resize_nearest(size, size);
        }
        masks.push(mask);
        queries.push(query);
    }
    let usable: Vec<usize> = (0..queries.len())
        .filter(|&i| !queries[i].is_empty())
        .collect();
    let mut embeddings = vec![None; queries.len()];
    if !usable.is_empty() {
        let batch: Vec<QueryMask> = usable.iter().map(|&i| queries[i].clone()).collect();
        for (&i, e) in usable
            .iter()
            .zip(mask_inversion_batch(model, &tensor, &batch, cfg)?)
        {
            embeddings[i] = Some(e.vector);
        }
    }
    Ok(ImageEval {
        ids: image.masks.iter().map(|m| m.id.clone()).collect(),
        labels: image.masks.iter().map(|m| m.label.clone()).collect(),
        expressions: image
            .masks
            .iter()
            .map(|m| m.expression_id.clone())
            .collect(),
        masks,
        embeddings,
    })
}

/// Referring items for one image. A mask whose degraded query is empty is
/// not a candidate; if it is the ground truth the expression has no rank.
fn referring_image<T: Real>(ev: &ImageEval<T>, bank: &TextBank<T>) -> Result<Vec<ItemResult>> {
    let available: Vec<usize> = (0..ev.ids.len())
        .filter(|&i| ev.embeddings[i].is_some())
        .collect();
    let candidates: Vec<Candidate<'_, T>> = available
        .iter()
        .map(|&i| Candidate {
            id: &ev.ids[i],
            embedding: ev.embeddings[i].as_deref().unwrap(),
            mask: &ev.masks[i],
        })
        .collect();
    let mut items = Vec::new();
    for (i, expr) in ev.expressions.iter().enumerate() {
        let Some(expr) = expr else { continue };
        let text = bank
            .get(expr)
            .ok_or_else(|| Error::Data(format!("expression `{expr}` is not in the text bank")))?;
        if ev.embeddings[i].is_some() {
            let e = Expression {
                id: expr.clone(),
                embedding: text,
                truth: &ev.ids[i],
            };
            items.extend(referring_items(&[e], &candidates)?);
        } else {
            let truth = &ev.masks[i];
            let (ov, un) = match candidates.is_empty() {
                true => (0, truth.area()),
                false => {
                    let vectors: Vec<&[T]> = candidates.iter().map(|c| c.embedding).collect();
                    let chosen = candidates[top1(text, &vectors)?].mask;
                    (chosen.intersection_area(truth), chosen.union_area(truth))
                }
            };
            let iou = if un == 0 { 1.0 } else { ov as f64 / un as f64 };
            items.push(ItemResult {
                query: expr.clone(),
                rank: None,
                iou: Some(iou),
                intersection: ov,
                union: un,
            });
        }
    }
    Ok(items)
}

/// Evaluates every mask of the manifest. Relative paths resolve against
/// `base`; images are resized to the model input and masks follow with
/// nearest-neighbour sampling after degradation.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_manifest<T: Real>(
    model: &Model<T>,
    preprocess: &Preprocess,
    manifest: &Manifest,
    base: &Path,
    bank: &TextBank<T>,
    task: Task,
    degradation: Degradation,
    cfg: &InversionConfig,
    ks: &[usize],
) -> Result<RetrievalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return arg("ks must be nonempty and positive");
    }
    let mut evals = Vec::with_capacity(manifest.images.len());
    for image in &manifest.images {
        evals.push(invert_image(
            model,
            preprocess,
            base,
            image,
            degradation,
            cfg,
        )?);
    }
    match task {
        Task::Class => {
            let mut queries = Vec::new();
            for (ii, ev) in evals.iter().enumerate() {
                for (m, label) in ev.labels.iter().enumerate() {
                    if let Some(label) = label {
                        queries.push(ClassQuery {
                            id: format!("{}/{}", manifest.images[ii].path.display(), ev.ids[m]),
                            label,
                            embedding: ev.embeddings[m].as_deref(),
                        });
                    }
                }
            }
            if queries.is_empty() {
                return Err(Error::Data("no labelled masks in the manifest".into()));
            }
            class_retrieval(&queries, bank, ks)
        }
        Task::Referring => {
            let mut items = Vec::new();
            for ev in &evals {
                items.extend(referring_image(ev, bank)?);
            }
            if items.is_empty() {
                return Err(Error::Data(
                    "no masks with an expression_id in the manifest".into(),
                ));
            }
            Ok(RetrievalReport::from_items(items, ks, true))
        }
    }
}

/// Checks referenced by the evaluation before any model work.
pub fn check_manifest(manifest: &Manifest, task: Task) -> Result<()> {
    let wanted = |m: &crate::harness::manifest::ManifestMask| match task {
        Task::Class => m.label.is_some(),
        Task::Referring => m.expression_id.is_some(),
    };
    if manifest.images.iter().flat_map(|i| &i.masks).any(wanted) {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "manifest has no masks usable for the {task:?} task"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_degradations() {
        assert_eq!("none".parse::<Degradation>().unwrap(), Degradation::None);
        assert_eq!("box".parse::<Degradation>().unwrap(), Degradation::Box);
        assert_eq!(
            "erode:3".parse::<Degradation>().unwrap(),
            Degradation::Erode(3)
        );
        assert_eq!(
            "dilate:0".parse::<Degradation>().unwrap(),
            Degradation::Dilate(0)
        );
        assert!("erode:x".parse::<Degradation>().is_err());
        assert!("blur:2".parse::<Degradation>().is_err());
    }

    #[test]
    fn box_degradation_fills_bounding_box() {
        let m = QueryMask::from_values(3, 3, &[0, 1, 0, 1, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(Degradation::Box.apply(&m).area(), 4);
    }

    #[test]
    fn parses_tasks() {
        assert_eq!("class".parse::<Task>().unwrap(), Task::Class);
        assert_eq!("referring".parse::<Task>().unwrap(), Task::Referring);
        assert!("caption".parse::<Task>().is_err());
    }
}
