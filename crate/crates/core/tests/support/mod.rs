//! Brute-force reference implementations. Each one recomputes a quantity by
//! the most direct route available and shares no code with the crate.
#![allow(dead_code)]

use std::collections::VecDeque;

use fundus_ssl_core::data::{Image, Mask};
use fundus_ssl_core::eval::EvalItem;
use fundus_ssl_core::RngStream;

/// Mean over rows of `-ln(exp(q.k+ / tau) / sum_j exp(q.k_j / tau))`, with no
/// max shift and the positive logit listed first.
pub fn info_nce(q: &[f32], k: &[f32], queue: &[f32], dim: usize, tau: f64) -> f64 {
    let n = q.len() / dim;
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>();
    let mut total = 0.0;
    for r in 0..n {
        let qr = &q[r * dim..(r + 1) * dim];
        let pos = (dot(qr, &k[r * dim..(r + 1) * dim]) / tau).exp();
        let neg: f64 = queue.chunks(dim).map(|c| (dot(qr, c) / tau).exp()).sum();
        total += -(pos / (pos + neg)).ln();
    }
    total / n as f64
}

/// Bounded FIFO of rows kept as a deque of owned vectors.
pub struct FifoOracle {
    cap: usize,
    rows: VecDeque<Vec<f32>>,
}

impl FifoOracle {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            rows: VecDeque::new(),
        }
    }

    pub fn push_batch(&mut self, keys: &[f32], dim: usize) {
        for row in keys.chunks(dim) {
            if self.rows.len() == self.cap {
                self.rows.pop_front();
            }
            self.rows.push_back(row.to_vec());
        }
    }

    pub fn flat(&self) -> Vec<f32> {
        self.rows.iter().flatten().copied().collect()
    }
}

/// Pooled Dice by visiting every in-FOV pixel; 1 when nothing is predicted
/// and nothing is true.
pub fn dice(items: &[EvalItem], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for it in items {
        let (h, w) = it.gt.dims();
        for y in 0..h {
            for x in 0..w {
                if !it.fov.get(y, x) {
                    continue;
                }
                let pred = it.prob.get(y, x, 0) as f64 >= threshold;
                match (pred, it.gt.get(y, x)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Average precision: for each distinct score, taken as a threshold from the
/// highest down, precision weighted by the recall gained. Every threshold
/// rescans all scores.
pub fn average_precision(scores: &[f32], labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|&&l| l != 0).count() as f64;
    let mut thresholds: Vec<f32> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let (mut tp, mut pp) = (0.0, 0.0);
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                pp += 1.0;
                if l != 0 {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / positives;
        ap += (recall - prev_recall) * (tp / pp);
        prev_recall = recall;
    }
    ap
}

/// Random scores, drawn from a coarse grid half of the time so ties occur.
pub fn random_scores(n: usize, rng: &mut RngStream) -> Vec<f32> {
    let coarse = rng.bernoulli(0.5);
    (0..n)
        .map(|_| {
            let u = rng.uniform() as f32;
            if coarse {
                (u * 8.0).floor() / 8.0
            } else {
                u
            }
        })
        .collect()
}

/// One to three small items with random scores, labels and FOV.
pub fn random_items(rng: &mut RngStream) -> Vec<EvalItem> {
    let count = 1 + rng.below(3);
    (0..count)
        .map(|_| {
            let (h, w) = (1 + rng.below(6), 1 + rng.below(6));
            let prob = Image::new(h, w, 1, random_scores(h * w, rng)).unwrap();
            let p_pos = rng.uniform();
            let gt = Mask::new(h, w, (0..h * w).map(|_| rng.bernoulli(p_pos) as u8).collect()).unwrap();
            let mut fov = Mask::new(h, w, (0..h * w).map(|_| rng.bernoulli(0.8) as u8).collect()).unwrap();
            fov.set(0, 0, true);
            EvalItem { prob, gt, fov }
        })
        .collect()
}

/// Unit-norm rows of length `dim`.
pub fn unit_rows(n: usize, dim: usize, rng: &mut RngStream) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let row: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        out.extend(row.iter().map(|x| (x / norm) as f32));
    }
    out
}
