//! Completion quality (PSNR, SSIM) and mask quality (IoU, recall).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PSNR_CAP: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-10;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`, capped at 99 dB.
pub fn psnr<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    same_shape("psnr", pred, gt)?;
    let sse: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    let mse = sse / pred.numel() as f64;
    if mse < MSE_FLOOR {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Luma of a `[3, H, W]` image as row-major `H x W` values.
pub fn grayscale<T: Scalar>(img: &Tensor<T>) -> Result<Vec<f64>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Geometry(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let hw = s[1] * s[2];
    let d = img.data();
    Ok((0..hw)
        .map(|p| 0.299 * d[p].as_f64() + 0.587 * d[hw + p].as_f64() + 0.114 * d[2 * hw + p].as_f64())
        .collect())
}

/// Summed-area table with a zero border: `(h + 1) x (w + 1)`.
fn integral(v: impl Fn(usize) -> f64, h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += v(y * w + x);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, y: usize, x: usize, n: usize) -> f64 {
    let stride = w + 1;
    s[(y + n) * stride + x + n] - s[y * stride + x + n] - s[(y + n) * stride + x] + s[y * stride + x]
}

/// Mean local SSIM of two `H x W` luma planes over 8x8 windows at stride 4.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Geometry(format!(
            "{h}x{w} frame is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let (c1, c2) = (K1 * K1, K2 * K2);
    let sa = integral(|i| a[i], h, w);
    let sb = integral(|i| b[i], h, w);
    let saa = integral(|i| a[i] * a[i], h, w);
    let sbb = integral(|i| b[i] * b[i], h, w);
    let sab = integral(|i| a[i] * b[i], h, w);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for y in (0..=h - SSIM_WINDOW).step_by(SSIM_STRIDE) {
        for x in (0..=w - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            let ws = |s: &[f64]| window_sum(s, w, y, x, SSIM_WINDOW) / n;
            let (ma, mb) = (ws(&sa), ws(&sb));
            let va = (ws(&saa) - ma * ma).max(0.0);
            let vb = (ws(&sbb) - mb * mb).max(0.0);
            let cov = ws(&sab) - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM of two `[3, H, W]` frames on their luma.
pub fn ssim<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    same_shape("ssim", pred, gt)?;
    let s = pred.shape();
    if s.len() != 3 {
        return Err(Error::Geometry(format!("expected a [3, H, W] image, got {s:?}")));
    }
    if pred.data() == gt.data() {
        return Ok(1.0);
    }
    ssim_plane(&grayscale(pred)?, &grayscale(gt)?, s[1], s[2])
}

/// Overlap over union and overlap over ground truth of binary masks.
/// An empty ground truth has recall 1 when the prediction is empty too.
pub fn iou_recall<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(f64, f64)> {
    same_shape("iou_recall", pred, gt)?;
    let half = T::lit(0.5);
    let (mut inter, mut union, mut area) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p >= half, g >= half);
        inter += (p && g) as usize;
        union += (p || g) as usize;
        area += g as usize;
    }
    if union == 0 {
        return Ok((1.0, 1.0));
    }
    if area == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((inter as f64 / union as f64, inter as f64 / area as f64))
}

/// Clip-level means of per-frame metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub iou: f64,
    pub recall: f64,
}

impl MetricReport {
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricReport {
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            iou: avg(|r| r.iou),
            recall: avg(|r| r.recall),
        }
    }
}

/// Evaluates `[T, 3, H, W]` frames and `[T, H, W]` masks frame by frame.
pub fn evaluate_clip<T: Scalar>(
    frames: &Tensor<T>,
    clean: &Tensor<T>,
    masks: &Tensor<T>,
    gt_masks: &Tensor<T>,
) -> Result<MetricReport> {
    same_shape("evaluate", frames, clean)?;
    same_shape("evaluate", masks, gt_masks)?;
    let t = frames.shape()[0];
    if masks.shape()[0] != t {
        return Err(Error::dim("evaluate", frames.shape(), masks.shape()));
    }
    let mut per = Vec::with_capacity(t);
    for f in 0..t {
        let (a, b) = (frames.narrow(0, f, 1)?, clean.narrow(0, f, 1)?);
        let img = &frames.shape()[1..];
        let (a, b) = (a.reshaped(img)?, b.reshaped(img)?);
        let (iou, recall) = iou_recall(&masks.narrow(0, f, 1)?, &gt_masks.narrow(0, f, 1)?)?;
        per.push(MetricReport {
            psnr: psnr(&a, &b)?,
            ssim: ssim(&a, &b)?,
            iou,
            recall,
        });
    }
    Ok(MetricReport::mean(&per))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[3, 16, 24], f)
    }

    #[test]
    fn psnr_examples() {
        let a = img(|i| (i % 7) as f64 / 10.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let (z, o) = (img(|_| 0.0), img(|_| 1.0));
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert!(psnr(&a, &Tensor::zeros(&[3, 16, 25])).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = img(|i| ((i / 24 + i % 24) % 2) as f64);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 0.0);
        // constant frames: only the luminance term differs from one
        let (p, q) = (img(|_| 0.3), img(|_| 0.5));
        let (mp, mq) = (0.3f64, 0.5f64);
        let want = (2.0 * mp * mq + K1 * K1) / (mp * mp + mq * mq + K1 * K1);
        assert!((ssim(&p, &q).unwrap() - want).abs() < 1e-9);
        let tiny = Tensor::<f64>::zeros(&[3, 7, 20]);
        assert!(ssim(&tiny, &tiny.map(|v| v + 0.1)).is_err());
    }

    #[test]
    fn iou_recall_examples() {
        let gt = Tensor::<f64>::from_fn(&[4, 4], |i| (i < 4) as u8 as f64);
        assert_eq!(iou_recall(&gt, &gt).unwrap(), (1.0, 1.0));
        let sup = Tensor::from_fn(&[4, 4], |i| (i < 8) as u8 as f64);
        assert_eq!(iou_recall(&sup, &gt).unwrap(), (0.5, 1.0));
        let dis = Tensor::from_fn(&[4, 4], |i| (i >= 8) as u8 as f64);
        assert_eq!(iou_recall(&dis, &gt).unwrap(), (0.0, 0.0));
        let empty = Tensor::<f64>::zeros(&[4, 4]);
        assert_eq!(iou_recall(&empty, &empty).unwrap(), (1.0, 1.0));
        assert_eq!(iou_recall(&gt, &empty).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn clip_report_of_ground_truth_is_perfect() {
        let clean = Tensor::<f64>::from_fn(&[2, 3, 16, 24], |i| (i % 11) as f64 / 10.0);
        let masks = Tensor::from_fn(&[2, 16, 24], |i| (i % 5 == 0) as u8 as f64);
        let r = evaluate_clip(&clean, &clean, &masks, &masks).unwrap();
        assert_eq!(r, MetricReport { psnr: 99.0, ssim: 1.0, iou: 1.0, recall: 1.0 });
    }
}
