//! Wall-clock comparison of the vanilla and decomposed gradient paths.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{arg, Error, Result};
use crate::inversion::{mask_inversion_batch, GradPath, InversionConfig, LocalizedEmbedding};
use crate::mask::{PixelBox, QueryMask};
use crate::real::Real;
use crate::vit::{ImageTensor, Model};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub masks: usize,
    /// Median seconds over the repeats.
    pub vanilla_s: f64,
    pub decomposed_s: f64,
    /// `vanilla_s / decomposed_s`.
    pub speedup: f64,
    /// Largest norm-wise relative difference between the two paths' embeddings.
    pub max_rel_discrepancy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub steps: usize,
    pub repeats: usize,
    pub threads: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "K = {}, {} repeat(s), {} thread(s), median seconds\n{:>6} {:>10} {:>12} {:>8} {:>12}\n",
            self.steps, self.repeats, self.threads, "masks", "vanilla", "decomposed", "speedup", "max rel diff"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:>6} {:>10.4} {:>12.4} {:>8.2} {:>12.2e}\n",
                r.masks, r.vanilla_s, r.decomposed_s, r.speedup, r.max_rel_discrepancy
            ));
        }
        s
    }
}

/// Random axis-aligned rectangles covering between 1/16 and 1/2 of each side.
pub fn random_box_masks(count: usize, size: usize, seed: u64) -> Vec<QueryMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = (size / 16).max(1);
    let hi = (size / 2).max(lo);
    (0..count)
        .map(|_| {
            let w = rng.random_range(lo..=hi);
            let h = rng.random_range(lo..=hi);
            let x0 = rng.random_range(0..=size - w);
            let y0 = rng.random_range(0..=size - h);
            QueryMask::from_box(
                PixelBox {
                    x0,
                    y0,
                    x1: x0 + w - 1,
                    y1: y0 + h - 1,
                },
                size,
                size,
            )
            .expect("box inside image")
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn rel_diff<T: Real>(a: &[LocalizedEmbedding<T>], b: &[LocalizedEmbedding<T>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let num: f64 = x
                .vector
                .iter()
                .zip(&y.vector)
                .map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2))
                .sum();
            let den: f64 = y.vector.iter().map(|q| q.as_f64().powi(2)).sum();
            (num / den.max(f64::MIN_POSITIVE)).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Times `mask_inversion_batch` in both modes for each mask count, on a
/// dedicated pool of `threads` workers. Timings include the encoder pass and,
/// for the decomposed mode, the jacobian.
pub fn bench_decomposition<T: Real>(
    model: &Model<T>,
    image: &ImageTensor<T>,
    mask_counts: &[usize],
    cfg: &InversionConfig,
    repeats: usize,
    threads: usize,
) -> Result<BenchReport> {
    if repeats == 0 || threads == 0 || mask_counts.is_empty() || mask_counts.contains(&0) {
        return arg("bench needs at least one repeat, one thread and positive mask counts");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    let size = model.config().image_size;
    let mut rows = Vec::with_capacity(mask_counts.len());
    for &count in mask_counts {
        let masks = random_box_masks(count, size, count as u64);
        let mut times = [Vec::new(), Vec::new()];
        let mut outs: [Vec<LocalizedEmbedding<T>>; 2] = [Vec::new(), Vec::new()];
        for _ in 0..repeats {
            for (slot, path) in [GradPath::Vanilla, GradPath::Decomposed]
                .into_iter()
                .enumerate()
            {
                let run_cfg = InversionConfig {
                    grad_path: path,
                    ..cfg.clone()
                };
                let start = Instant::now();
                let out = pool.install(|| mask_inversion_batch(model, image, &masks, &run_cfg))?;
                times[slot].push(start.elapsed().as_secs_f64());
                outs[slot] = out;
            }
        }
        let [tv, td] = times;
        let (vanilla_s, decomposed_s) = (median(tv), median(td));
        rows.push(BenchRow {
            masks: count,
            vanilla_s,
            decomposed_s,
            speedup: vanilla_s / decomposed_s,
            max_rel_discrepancy: rel_diff(&outs[0], &outs[1]),
        });
    }
    Ok(BenchReport {
        steps: cfg.steps,
        repeats,
        threads,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{ModelConfig, RandomInit};

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn random_masks_are_nonempty_and_deterministic() {
        let a = random_box_masks(20, 16, 5);
        assert_eq!(a, random_box_masks(20, 16, 5));
        assert!(a.iter().all(|m| !m.is_empty() && m.dims() == (16, 16)));
    }

    #[test]
    fn small_bench_agrees_across_paths() {
        let cfg = ModelConfig::toy();
        let model = Model::<f64>::random(&cfg, 2, &RandomInit::default()).unwrap();
        let image = ImageTensor::new(16, vec![0.25; 3 * 16 * 16]).unwrap();
        let inv = InversionConfig {
            steps: 3,
            ..InversionConfig::default()
        };
        let r = bench_decomposition(&model, &image, &[1, 3], &inv, 1, 1).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows.iter().all(|row| row.max_rel_discrepancy < 1e-8));
        assert!(r.to_table().contains("decomposed"));
        assert!(bench_decomposition(&model, &image, &[0], &inv, 1, 1).is_err());
    }
}
