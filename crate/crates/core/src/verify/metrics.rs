//! Metrics against direct textbook evaluations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{uniform, Check};
use crate::error::Result;
use crate::metrics::{iou_recall, psnr, ssim};
use crate::tensor::Tensor;

const PAIRS: u64 = 100;
const TOLERANCE: f64 = 1e-6;

/// PSNR straight from the definition, with the same cap and floor.
pub fn naive_psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse < 1e-10 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}

/// SSIM of two `[3, H, W]` images (row-major slices) on their luma, with
/// each 8x8 window's statistics computed in two passes.
pub fn naive_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    if a == b {
        return 1.0;
    }
    let luma = |x: &[f64], p: usize| 0.299 * x[p] + 0.587 * x[h * w + p] + 0.114 * x[2 * h * w + p];
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let mut scores = Vec::new();
    let mut y = 0;
    while y + 8 <= h {
        let mut x = 0;
        while x + 8 <= w {
            let mut pa = Vec::with_capacity(64);
            let mut pb = Vec::with_capacity(64);
            for dy in 0..8 {
                for dx in 0..8 {
                    pa.push(luma(a, (y + dy) * w + x + dx));
                    pb.push(luma(b, (y + dy) * w + x + dx));
                }
            }
            let ma = pa.iter().sum::<f64>() / 64.0;
            let mb = pb.iter().sum::<f64>() / 64.0;
            let va = pa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / 64.0;
            let vb = pb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / 64.0;
            let cov = pa.iter().zip(&pb).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>() / 64.0;
            scores.push((2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
            x += 4;
        }
        y += 4;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// IoU and recall from explicit pixel sets of the thresholded masks.
pub fn naive_iou_recall(pred: &[f64], gt: &[f64]) -> (f64, f64) {
    use std::collections::BTreeSet;
    let set = |m: &[f64]| m.iter().enumerate().filter(|(_, &v)| v >= 0.5).map(|(i, _)| i).collect::<BTreeSet<_>>();
    let (p, g) = (set(pred), set(gt));
    let inter = p.intersection(&g).count() as f64;
    let union = p.union(&g).count() as f64;
    if union == 0.0 {
        (1.0, 1.0)
    } else if g.is_empty() {
        (0.0, 0.0)
    } else {
        (inter / union, inter / g.len() as f64)
    }
}

struct Pair {
    h: usize,
    w: usize,
    a: Tensor<f64>,
    b: Tensor<f64>,
    pm: Tensor<f64>,
    gm: Tensor<f64>,
}

fn pair(seed: u64) -> Pair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.gen_range(8..40), rng.gen_range(8..40));
    let a = uniform(&[3, h, w], 0.0, 1.0, &mut rng);
    let noise = [0.0, 1e-3, 0.05, 0.5][seed as usize % 4];
    let b = Tensor::from_fn(a.shape(), |i| (a.data()[i] + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0));
    let (pp, pg) = (rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6));
    let pm = Tensor::from_fn(&[h, w], |_| rng.gen_range(0.0..1.0) * 0.5 + if rng.gen_bool(pp) { 0.5 } else { 0.0 });
    let gm = Tensor::from_fn(&[h, w], |_| if rng.gen_bool(pg) { 1.0 } else { 0.0 });
    Pair { h, w, a, b, pm, gm }
}

fn agreement() -> Result<(bool, String)> {
    let (mut dp, mut ds, mut dm, mut order) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for seed in 0..PAIRS {
        let p = pair(seed);
        dp = dp.max((psnr(&p.a, &p.b)? - naive_psnr(p.a.data(), p.b.data())).abs());
        ds = ds.max((ssim(&p.a, &p.b)? - naive_ssim(p.a.data(), p.b.data(), p.h, p.w)).abs());
        let (iou, recall) = iou_recall(&p.pm, &p.gm)?;
        let (ni, nr) = naive_iou_recall(p.pm.data(), p.gm.data());
        dm = dm.max((iou - ni).abs()).max((recall - nr).abs());
        if iou > recall {
            order += 1;
        }
    }
    Ok((
        dp <= TOLERANCE && ds <= TOLERANCE && dm <= TOLERANCE,
        format!("max difference psnr {dp:e}, ssim {ds:e}, iou/recall {dm:e}; {order} pairs with IoU > recall"),
    ))
}

fn iou_bounded_by_recall() -> Result<(bool, String)> {
    let mut violations = 0usize;
    for seed in 0..PAIRS {
        let p = pair(seed);
        let (iou, recall) = iou_recall(&p.pm, &p.gm)?;
        if iou > recall {
            violations += 1;
        }
    }
    Ok((violations == 0, format!("{violations} of {PAIRS} pairs with IoU > recall")))
}

pub(super) fn checks() -> Vec<Check> {
    vec![
        Check::from_result("metrics match naive oracles", agreement()),
        Check::from_result("IoU never exceeds recall", iou_bounded_by_recall()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_metric_checks_pass() {
        for c in checks() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn naive_examples() {
        let a = vec![0.5; 3 * 8 * 8];
        assert_eq!(naive_psnr(&a, &a), 99.0);
        assert_eq!(naive_ssim(&a, &a, 8, 8), 1.0);
        assert_eq!(naive_iou_recall(&[0.0, 0.0], &[0.0, 0.0]), (1.0, 1.0));
        assert_eq!(naive_iou_recall(&[1.0, 0.0], &[0.0, 0.0]), (0.0, 0.0));
        assert_eq!(naive_iou_recall(&[1.0, 1.0], &[1.0, 0.0]), (0.5, 1.0));
    }
}
