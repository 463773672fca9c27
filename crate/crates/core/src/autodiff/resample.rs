use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    /// Averages over near-equal cells (adaptive average pooling).
    AdaptiveAvgPool,
    /// Maximum over near-equal cells.
    MaxPool,
    /// Bilinear interpolation, half-pixel centres.
    BilinearUp,
    NearestUp,
}

impl ResampleMode {
    fn name(self) -> &'static str {
        match self {
            ResampleMode::AdaptiveAvgPool => "adaptive-avg-pool",
            ResampleMode::MaxPool => "max-pool",
            ResampleMode::BilinearUp => "bilinear-up",
            ResampleMode::NearestUp => "nearest-up",
        }
    }

    fn is_pool(self) -> bool {
        matches!(self, ResampleMode::AdaptiveAvgPool | ResampleMode::MaxPool)
    }
}

/// Half-open source range covered by output cell `i` of `out` cells.
fn cell(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

/// Two source taps and the weight of the upper one.
fn bilinear_taps(i: usize, len: usize, out: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) * len as f64 / out as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

pub(super) fn resample_backward<T: Scalar>(
    in_shape: &[usize],
    mode: ResampleMode,
    argmax: &[usize],
    g: &Tensor<T>,
) -> Tensor<T> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let (h2, w2) = (g.shape()[r - 2], g.shape()[r - 1]);
    let planes = g.numel() / (h2 * w2);
    let mut d = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &mut d[p * h * w..(p + 1) * h * w];
        let gp = &g.data()[p * h2 * w2..(p + 1) * h2 * w2];
        for i in 0..h2 {
            for j in 0..w2 {
                let gv = gp[i * w2 + j];
                match mode {
                    ResampleMode::AdaptiveAvgPool => {
                        let (y0, y1) = cell(i, h, h2);
                        let (x0, x1) = cell(j, w, w2);
                        let share = gv / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                        for y in y0..y1 {
                            for x in x0..x1 {
                                src[y * w + x] += share;
                            }
                        }
                    }
                    ResampleMode::MaxPool => src[argmax[(p * h2 + i) * w2 + j]] += gv,
                    ResampleMode::NearestUp => src[(i * h / h2) * w + j * w / w2] += gv,
                    ResampleMode::BilinearUp => {
                        let (y0, y1, fy) = bilinear_taps(i, h, h2);
                        let (x0, x1, fx) = bilinear_taps(j, w, w2);
                        let (fy, fx) = (T::lit(fy), T::lit(fx));
                        let one = T::one();
                        src[y0 * w + x0] += gv * (one - fy) * (one - fx);
                        src[y0 * w + x1] += gv * (one - fy) * fx;
                        src[y1 * w + x0] += gv * fy * (one - fx);
                        src[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), d)
}

impl<T: Scalar> Tape<T> {
    /// Resamples the two trailing (spatial) dims to `target`.
    pub fn resample(&self, x: Var, target: (usize, usize), mode: ResampleMode) -> Result<Var> {
        let xv = self.value(x);
        let r = xv.rank();
        if r < 2 || target.0 == 0 || target.1 == 0 {
            return Err(Error::Contract(format!(
                "resample needs rank >= 2 and positive target, got {:?} -> {target:?}",
                xv.shape()
            )));
        }
        let (h, w) = (xv.shape()[r - 2], xv.shape()[r - 1]);
        let (h2, w2) = target;
        let ok = if mode.is_pool() { h2 <= h && w2 <= w } else { h2 >= h && w2 >= w };
        if !ok {
            return Err(Error::Mode {
                mode: mode.name(),
                from: (h, w),
                to: target,
            });
        }
        let planes = xv.numel() / (h * w);
        let mut out = vec![T::zero(); planes * h2 * w2];
        let mut argmax = Vec::new();
        if mode == ResampleMode::MaxPool {
            argmax = vec![0; planes * h2 * w2];
        }
        for p in 0..planes {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for i in 0..h2 {
                for j in 0..w2 {
                    let o = (p * h2 + i) * w2 + j;
                    out[o] = match mode {
                        ResampleMode::AdaptiveAvgPool => {
                            let (y0, y1) = cell(i, h, h2);
                            let (x0, x1) = cell(j, w, w2);
                            let mut acc = T::zero();
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    acc += src[y * w + x];
                                }
                            }
                            acc / T::lit(((y1 - y0) * (x1 - x0)) as f64)
                        }
                        ResampleMode::MaxPool => {
                            let (y0, y1) = cell(i, h, h2);
                            let (x0, x1) = cell(j, w, w2);
                            let mut best = T::neg_infinity();
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    if src[y * w + x] > best {
                                        best = src[y * w + x];
                                        argmax[o] = y * w + x;
                                    }
                                }
                            }
                            best
                        }
                        ResampleMode::NearestUp => src[(i * h / h2) * w + j * w / w2],
                        ResampleMode::BilinearUp => {
                            let (y0, y1, fy) = bilinear_taps(i, h, h2);
                            let (x0, x1, fx) = bilinear_taps(j, w, w2);
                            let (fy, fx) = (T::lit(fy), T::lit(fx));
                            let one = T::one();
                            let top = src[y0 * w + x0] * (one - fx) + src[y0 * w + x1] * fx;
                            let bottom = src[y1 * w + x0] * (one - fx) + src[y1 * w + x1] * fx;
                            top * (one - fy) + bottom * fy
                        }
                    };
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[r - 2] = h2;
        shape[r - 1] = w2;
        Ok(self.record(Tensor::from_parts(shape, out), Op::Resample { x, mode, argmax }, &[x]))
    }
}
