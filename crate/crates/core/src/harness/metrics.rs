//! Retrieval metrics: Acc@k over cosine rankings, mIoU and oIoU.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{arg, Error, Result};
use crate::explain::score_cos;
use crate::mask::QueryMask;
use crate::real::Real;

/// `|a ∩ b| / |a ∪ b|`, 1 when both are empty.
pub fn iou(a: &QueryMask, b: &QueryMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return arg(format!("iou of {:?} and {:?} masks", a.dims(), b.dims()));
    }
    let union = a.union_area(b);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection_area(b) as f64 / union as f64)
}

/// Externally computed text embeddings, in a fixed order used to break ties.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBank<T> {
    entries: Vec<(String, Vec<T>)>,
}

impl<T: Real> TextBank<T> {
    pub fn new(entries: Vec<(String, Vec<T>)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let dim = entries.first().map(|e| e.1.len());
        for (label, v) in &entries {
            if !seen.insert(label.as_str()) {
                return Err(Error::Data(format!("duplicate text bank label `{label}`")));
            }
            if Some(v.len()) != dim {
                return Err(Error::Data(format!(
                    "text bank entry `{label}` has inconsistent dimension"
                )));
            }
            if v.iter().all(|&x| x == T::zero()) {
                return Err(Error::Data(format!(
                    "text bank entry `{label}` is the zero vector"
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Vec<T>)] {
        &self.entries
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.entries.iter().position(|(l, _)| l == label)
    }

    pub fn get(&self, label: &str) -> Option<&[T]> {
        self.index_of(label).map(|i| self.entries[i].1.as_slice())
    }

    /// JSON object `{label: [floats]}`; file order is bank order.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        let mut entries = Vec::with_capacity(map.len());
        for (label, value) in map {
            let v: Vec<f64> = serde_json::from_value(value)
                .map_err(|e| Error::Data(format!("text bank entry `{label}`: {e}")))?;
            entries.push((label, v.into_iter().map(T::lit).collect()));
        }
        Self::new(entries)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (label, v) in &self.entries {
            map.insert(
                label.clone(),
                v.iter().map(|x| x.as_f64()).collect::<Vec<_>>().into(),
            );
        }
        serde_json::Value::Object(map)
    }
}

/// 1-based rank of `truth` among `candidates` by descending cosine to
/// `query`; equal scores keep candidate order.
pub fn rank_of<T: Real, V: AsRef<[T]>>(
    query: &[T],
    candidates: &[V],
    truth: usize,
) -> Result<usize> {
    let scores = candidates
        .iter()
        .map(|c| score_cos(query, c.as_ref()))
        .collect::<Result<Vec<T>>>()?;
    let t = scores[truth];
    Ok(1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < truth))
        .count())
}

/// Index of the best candidate (first on ties).
pub fn top1<T: Real, V: AsRef<[T]>>(query: &[T], candidates: &[V]) -> Result<usize> {
    let mut best = 0;
    let mut best_score = T::neg_infinity();
    for (j, c) in candidates.iter().enumerate() {
        let s = score_cos(query, c.as_ref())?;
        if s > best_score {
            best = j;
            best_score = s;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemResult {
    pub query: String,
    /// 1-based rank of the ground truth; `None` when no embedding could be produced.
    pub rank: Option<usize>,
    pub iou: Option<f64>,
    #[serde(skip)]
    pub intersection: usize,
    #[serde(skip)]
    pub union: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub acc_at: BTreeMap<usize, f64>,
    pub miou: Option<f64>,
    pub oiou: Option<f64>,
    pub per_item: Vec<ItemResult>,
}

impl RetrievalReport {
    /// Aggregates per-item ranks (and IoU parts when `with_iou`).
    pub fn from_items(per_item: Vec<ItemResult>, ks: &[usize], with_iou: bool) -> Self {
        let count = per_item.len().max(1) as f64;
        let acc_at = ks
            .iter()
            .map(|&k| {
                let hits = per_item
                    .iter()
                    .filter(|it| it.rank.is_some_and(|r| r <= k))
                    .count();
                (k, hits as f64 / count)
            })
            .collect();
        let (miou, oiou) = if with_iou && !per_item.is_empty() {
            let miou = per_item.iter().map(|it| it.iou.unwrap_or(0.0)).sum::<f64>() / count;
            let inter: usize = per_item.iter().map(|it| it.intersection).sum();
            let union: usize = per_item.iter().map(|it| it.union).sum();
            let oiou = if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            };
            (Some(miou), Some(oiou))
        } else {
            (None, None)
        };
        Self {
            acc_at,
            miou,
            oiou,
            per_item,
        }
    }

    pub fn acc(&self, k: usize) -> f64 {
        self.acc_at.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.acc_at {
            s.push_str(&format!("Acc@{k:<4} {:>6.2}%\n", 100.0 * v));
        }
        if let (Some(m), Some(o)) = (self.miou, self.oiou) {
            s.push_str(&format!(
                "mIoU     {:>6.2}%\noIoU     {:>6.2}%\n",
                100.0 * m,
                100.0 * o
            ));
        }
        s.push_str(&format!("items    {}\n", self.per_item.len()));
        s
    }
}

/// One region query for class retrieval; `None` embedding counts as a miss.
pub struct ClassQuery<'a, T> {
    pub id: String,
    pub label: &'a str,
    pub embedding: Option<&'a [T]>,
}

/// Ranks the bank for every query and reports Acc@k.
pub fn class_retrieval<T: Real>(
    queries: &[ClassQuery<'_, T>],
    bank: &TextBank<T>,
    ks: &[usize],
) -> Result<RetrievalReport> {
    let vectors: Vec<&[T]> = bank.entries.iter().map(|(_, v)| v.as_slice()).collect();
    let mut items = Vec::with_capacity(queries.len());
    for q in queries {
        let truth = bank
            .index_of(q.label)
            .ok_or_else(|| Error::Data(format!("label `{}` is not in the text bank", q.label)))?;
        let rank = q
            .embedding
            .map(|e| rank_of(e, &vectors, truth))
            .transpose()?;
        items.push(ItemResult {
            query: q.id.clone(),
            rank,
            iou: None,
            intersection: 0,
            union: 0,
        });
    }
    Ok(RetrievalReport::from_items(items, ks, false))
}

pub struct Expression<'a, T> {
    pub id: String,
    pub embedding: &'a [T],
    pub truth: &'a str,
}

pub struct Candidate<'a, T> {
    pub id: &'a str,
    pub embedding: &'a [T],
    pub mask: &'a QueryMask,
}

/// Per-expression ranks and IoU parts against one candidate set.
pub fn referring_items<T: Real>(
    expressions: &[Expression<'_, T>],
    candidates: &[Candidate<'_, T>],
) -> Result<Vec<ItemResult>> {
    let vectors: Vec<&[T]> = candidates.iter().map(|c| c.embedding).collect();
    expressions
        .iter()
        .map(|e| {
            let truth = candidates
                .iter()
                .position(|c| c.id == e.truth)
                .ok_or_else(|| {
                    Error::Data(format!("mask `{}` is not among the candidates", e.truth))
                })?;
            let rank = rank_of(e.embedding, &vectors, truth)?;
            let chosen = candidates[top1(e.embedding, &vectors)?].mask;
            let truth_mask = candidates[truth].mask;
            Ok(ItemResult {
                query: e.id.clone(),
                rank: Some(rank),
                iou: Some(iou(chosen, truth_mask)?),
                intersection: chosen.intersection_area(truth_mask),
                union: chosen.union_area(truth_mask),
            })
        })
        .collect()
}

/// Referring-expression retrieval over one candidate set: Acc@k, mIoU, oIoU.
pub fn referring_retrieval<T: Real>(
    expressions: &[Expression<'_, T>],
    candidates: &[Candidate<'_, T>],
    ks: &[usize],
) -> Result<RetrievalReport> {
    Ok(RetrievalReport::from_items(
        referring_items(expressions, candidates)?,
        ks,
        true,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::PixelBox;

    fn bx(x0: usize, y0: usize, x1: usize, y1: usize) -> QueryMask {
        QueryMask::from_box(PixelBox { x0, y0, x1, y1 }, 4, 4).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0, 0, 1, 0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &bx(2, 2, 3, 3)).unwrap(), 0.0);
        // Two 2×1 bars sharing one pixel: 1 / 3.
        assert!((iou(&a, &bx(1, 0, 2, 0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            iou(&QueryMask::empty(4, 4), &QueryMask::empty(4, 4)).unwrap(),
            1.0
        );
        assert!(iou(&a, &QueryMask::empty(3, 4)).is_err());
    }

    fn bank() -> TextBank<f64> {
        TextBank::new(vec![
            ("red".into(), vec![1.0, 0.0, 0.0]),
            ("green".into(), vec![0.0, 1.0, 0.0]),
            ("blue".into(), vec![0.0, 0.0, 1.0]),
        ])
        .unwrap()
    }

    #[test]
    fn bank_validation() {
        assert!(TextBank::new(vec![("a".into(), vec![1.0]), ("a".into(), vec![2.0])]).is_err());
        assert!(TextBank::new(vec![("a".into(), vec![0.0f64])]).is_err());
    }

    #[test]
    fn self_match_ranks_first() {
        let b = bank();
        let q = [ClassQuery {
            id: "q".into(),
            label: "green",
            embedding: Some(&b.entries()[1].1[..]),
        }];
        let r = class_retrieval(&q, &b, &[1, 2]).unwrap();
        assert_eq!(r.per_item[0].rank, Some(1));
        assert_eq!(r.acc(1), 1.0);
    }

    #[test]
    fn unknown_label_is_data_error() {
        let b = bank();
        let v = [1.0, 0.0, 0.0];
        let q = [ClassQuery {
            id: "q".into(),
            label: "mauve",
            embedding: Some(&v[..]),
        }];
        assert!(matches!(class_retrieval(&q, &b, &[1]), Err(Error::Data(_))));
    }

    #[test]
    fn ties_follow_bank_order() {
        let b = bank();
        let v = [1.0, 1.0, 0.0];
        let first = [ClassQuery {
            id: "q".into(),
            label: "red",
            embedding: Some(&v[..]),
        }];
        let second = [ClassQuery {
            id: "q".into(),
            label: "green",
            embedding: Some(&v[..]),
        }];
        assert_eq!(
            class_retrieval(&first, &b, &[1]).unwrap().per_item[0].rank,
            Some(1)
        );
        assert_eq!(
            class_retrieval(&second, &b, &[1]).unwrap().per_item[0].rank,
            Some(2)
        );
    }

    #[test]
    fn accuracy_is_monotone_in_k() {
        let b = bank();
        let vs = [
            [0.2, 0.9, 0.1],
            [0.5, 0.4, 0.3],
            [0.1, 0.2, 0.8],
            [0.3, 0.3, 0.31],
        ];
        let labels = ["red", "blue", "green", "red"];
        let qs: Vec<_> = vs
            .iter()
            .zip(labels)
            .map(|(v, l)| ClassQuery {
                id: l.into(),
                label: l,
                embedding: Some(&v[..]),
            })
            .collect();
        let r = class_retrieval(&qs, &b, &[1, 2, 3]).unwrap();
        assert!(r.acc(1) <= r.acc(2) && r.acc(2) <= r.acc(3));
        assert_eq!(r.acc(3), 1.0);
    }

    #[test]
    fn referring_self_match() {
        let (m1, m2) = (bx(0, 0, 1, 1), bx(2, 2, 3, 3));
        let (e1, e2) = ([1.0, 0.0], [0.0, 1.0]);
        let cands = [
            Candidate {
                id: "a",
                embedding: &e1[..],
                mask: &m1,
            },
            Candidate {
                id: "b",
                embedding: &e2[..],
                mask: &m2,
            },
        ];
        let exprs = [Expression {
            id: "x".into(),
            embedding: &e2[..],
            truth: "b",
        }];
        let r = referring_retrieval(&exprs, &cands, &[1]).unwrap();
        assert_eq!(r.acc(1), 1.0);
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.oiou, Some(1.0));
        let missing = [Expression {
            id: "x".into(),
            embedding: &e2[..],
            truth: "zzz",
        }];
        assert!(matches!(
            referring_retrieval(&missing, &cands, &[1]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn miou_and_oiou_pool_differently() {
        // Equal-area (2 px) masks; expression 1 hits, expression 2 picks a
        // disjoint mask. mIoU = (1 + 0) / 2; oIoU = (2 + 0) / (2 + 4).
        let (m1, m2) = (bx(0, 0, 1, 0), bx(0, 3, 1, 3));
        let (e1, e2) = ([1.0, 0.0], [0.0, 1.0]);
        let cands = [
            Candidate {
                id: "a",
                embedding: &e1[..],
                mask: &m1,
            },
            Candidate {
                id: "b",
                embedding: &e2[..],
                mask: &m2,
            },
        ];
        let exprs = [
            Expression {
                id: "hit".into(),
                embedding: &e1[..],
                truth: "a",
            },
            Expression {
                id: "miss".into(),
                embedding: &e1[..],
                truth: "b",
            },
        ];
        let r = referring_retrieval(&exprs, &cands, &[1, 2]).unwrap();
        assert_eq!(r.miou, Some(0.5));
        assert!((r.oiou.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.acc(1), 0.5);
        assert_eq!(r.acc(2), 1.0);
    }

    #[test]
    fn oiou_equals_miou_for_equal_unions() {
        let items = vec![
            ItemResult {
                query: "a".into(),
                rank: Some(1),
                iou: Some(0.5),
                intersection: 2,
                union: 4,
            },
            ItemResult {
                query: "b".into(),
                rank: Some(2),
                iou: Some(0.25),
                intersection: 1,
                union: 4,
            },
        ];
        let r = RetrievalReport::from_items(items, &[1], true);
        assert!((r.miou.unwrap() - r.oiou.unwrap()).abs() < 1e-15);
    }
}
