//! Cross-correlation over 2-D or 3-D spatial extents via im2col + GEMM.

use super::{Contributions, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Scalar, Tensor};

/// Kernel, stride and padding per spatial axis in (depth, height, width)
/// order. 2-D convolutions use a depth of one with no depth padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    /// The input carried a leading batch axis.
    batched: bool,
    /// 3-D convolution (the tensors carry a depth axis).
    volumetric: bool,
}

/// Input extents `[n, c, d, h, w]` with output extents `[d, h, w]`.
struct Extents {
    n: usize,
    c: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl Extents {
    fn in_vol(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }
}

impl ConvGeom {
    fn extents(&self, shape: &[usize]) -> Extents {
        let s: Vec<usize> = match (self.batched, self.volumetric) {
            (true, true) => shape.to_vec(),
            (true, false) => vec![shape[0], shape[1], 1, shape[2], shape[3]],
            (false, true) => [&[1], shape].concat(),
            (false, false) => vec![1, shape[0], 1, shape[1], shape[2]],
        };
        let inp = [s[2], s[3], s[4]];
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (inp[a] + 2 * self.pad[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        Extents { n: s[0], c: s[1], inp, out }
    }

    fn output_shape(&self, e: &Extents, cout: usize) -> Vec<usize> {
        let mut shape = Vec::with_capacity(5);
        if self.batched {
            shape.push(e.n);
        }
        shape.push(cout);
        if self.volumetric {
            shape.push(e.out[0]);
        }
        shape.extend_from_slice(&e.out[1..]);
        shape
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    fn kernel_vol(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Output columns `xo` whose input column `xo * stride + k - pad` lies in
/// `0..len`, as a half-open range.
fn valid_range(k: usize, stride: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    // xo * stride + k < len + pad
    let hi = if len + pad > k { (len + pad - k).div_ceil(stride) } else { 0 };
    (lo.min(out), hi.clamp(lo.min(out), out))
}

fn im2col<T: Scalar>(x: &[T], e: &Extents, geom: &ConvGeom, cols: &mut [T]) {
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let [id, ih, iw] = e.inp;
    let [od, oh, ow] = e.out;
    let p = e.out_vol();
    let mut r = 0;
    for c in 0..e.c {
        let xc = &x[c * e.in_vol()..(c + 1) * e.in_vol()];
        for a in 0..kd {
            for b in 0..kh {
                for k in 0..kw {
                    let (lo, hi) = valid_range(k, sw, pw, iw, ow);
                    let row = &mut cols[r * p..(r + 1) * p];
                    for (q, dst) in row.chunks_exact_mut(ow).enumerate() {
                        let (zd, yo) = (q / oh, q % oh);
                        let zi = (zd * sd + a) as isize - pd as isize;
                        let yi = (yo * sh + b) as isize - ph as isize;
                        if zi < 0 || zi >= id as isize || yi < 0 || yi >= ih as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &xc[(zi as usize * ih + yi as usize) * iw..][..iw];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if lo < hi {
                            let start = lo * sw + k - pw;
                            if sw == 1 {
                                dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            } else {
                                for (d, s) in dst[lo..hi].iter_mut().zip(src[start..].iter().step_by(sw)) {
                                    *d = *s;
                                }
                            }
                        }
                    }
                    debug_assert_eq!(row.len(), od * oh * ow);
                    r += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], e: &Extents, geom: &ConvGeom, dx: &mut [T]) {
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let [id, ih, iw] = e.inp;
    let [_, oh, ow] = e.out;
    let p = e.out_vol();
    let mut r = 0;
    for c in 0..e.c {
        let xc = &mut dx[c * e.in_vol()..(c + 1) * e.in_vol()];
        for a in 0..kd {
            for b in 0..kh {
                for k in 0..kw {
                    let (lo, hi) = valid_range(k, sw, pw, iw, ow);
                    let row = &cols[r * p..(r + 1) * p];
                    for (q, src) in row.chunks_exact(ow).enumerate() {
                        let (zd, yo) = (q / oh, q % oh);
                        let zi = (zd * sd + a) as isize - pd as isize;
                        let yi = (yo * sh + b) as isize - ph as isize;
                        if lo >= hi || zi < 0 || zi >= id as isize || yi < 0 || yi >= ih as isize {
                            continue;
                        }
                        let dst = &mut xc[(zi as usize * ih + yi as usize) * iw..][..iw];
                        let start = lo * sw + k - pw;
                        for (d, s) in dst[start..].iter_mut().step_by(sw).zip(&src[lo..hi]) {
                            *d += *s;
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

pub(super) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    (vx, vw, vb): (Var, Var, Option<Var>),
    geom: &ConvGeom,
    g: &Tensor<T>,
    needs: &dyn Fn(Var) -> bool,
) -> Contributions<T> {
    let e = geom.extents(x.shape());
    let cout = w.shape()[0];
    let kdim = e.c * geom.kernel_vol();
    let p = e.out_vol();
    let want_x = needs(vx);
    let want_w = needs(vw);
    let mut dx = vec![T::zero(); if want_x { x.numel() } else { 0 }];
    let mut dw = vec![T::zero(); if want_w { w.numel() } else { 0 }];
    let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { kdim * p }];
    let mut dcols = vec![T::zero(); if want_x && !geom.is_pointwise() { kdim * p } else { 0 }];
    for n in 0..e.n {
        let xn = &x.data()[n * e.c * e.in_vol()..(n + 1) * e.c * e.in_vol()];
        let gn = &g.data()[n * cout * p..(n + 1) * cout * p];
        if want_w {
            let cols_ref: &[T] = if geom.is_pointwise() {
                xn
            } else {
                im2col(xn, &e, geom, &mut cols);
                &cols
            };
            gemm(cout, p, kdim, T::one(), gn, Layout::Normal, cols_ref, Layout::Transposed, T::one(), &mut dw);
        }
        if want_x {
            let dxn = &mut dx[n * e.c * e.in_vol()..(n + 1) * e.c * e.in_vol()];
            if geom.is_pointwise() {
                gemm(kdim, cout, p, T::one(), w.data(), Layout::Transposed, gn, Layout::Normal, T::zero(), dxn);
            } else {
                gemm(kdim, cout, p, T::one(), w.data(), Layout::Transposed, gn, Layout::Normal, T::zero(), &mut dcols);
                col2im(&dcols, &e, geom, dxn);
            }
        }
    }
    let mut out = Vec::new();
    if want_x {
        out.push((vx, Tensor::from_parts(x.shape().to_vec(), dx)));
    }
    if want_w {
        out.push((vw, Tensor::from_parts(w.shape().to_vec(), dw)));
    }
    if let Some(vb) = vb.filter(|&b| needs(b)) {
        let mut db = vec![T::zero(); cout];
        for n in 0..e.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = (n * cout + co) * p;
                *acc += g.data()[start..start + p].iter().copied().sum::<T>();
            }
        }
        out.push((vb, Tensor::from_parts(vec![cout], db)));
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// 2-D cross-correlation. `x` is `[C, H, W]` or `[N, C, H, W]`,
    /// `w` is `[Cout, C, k, k]`, `b` is `[Cout]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let rank = self.value(x).rank();
        let wshape = self.shape(w);
        if !(rank == 3 || rank == 4) || wshape.len() != 4 {
            return Err(Error::dim("conv2d", &self.shape(x), &wshape));
        }
        let geom = ConvGeom {
            kernel: [1, wshape[2], wshape[3]],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
            batched: rank == 4,
            volumetric: false,
        };
        self.conv(x, w, b, geom)
    }

    /// 3-D cross-correlation. `x` is `[C, D, H, W]` or `[N, C, D, H, W]`,
    /// `w` is `[Cout, C, kd, kh, kw]`.
    pub fn conv3d(&self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let rank = self.value(x).rank();
        let wshape = self.shape(w);
        if !(rank == 4 || rank == 5) || wshape.len() != 5 {
            return Err(Error::dim("conv3d", &self.shape(x), &wshape));
        }
        let geom = ConvGeom {
            kernel: [wshape[2], wshape[3], wshape[4]],
            stride,
            pad,
            batched: rank == 5,
            volumetric: true,
        };
        self.conv(x, w, b, geom)
    }

    fn conv(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let cin_axis = usize::from(geom.batched);
        if wv.shape()[1] != xv.shape()[cin_axis] {
            return Err(Error::dim("conv", xv.shape(), wv.shape()));
        }
        let cout = wv.shape()[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim("conv bias", &self.shape(b), &[cout]));
            }
        }
        for a in 0..3 {
            let k = geom.kernel[a];
            if k.is_multiple_of(2) || geom.stride[a] == 0 {
                return Err(Error::Geometry(format!(
                    "kernel extents must be odd and strides positive, got kernel {:?} stride {:?}",
                    geom.kernel, geom.stride
                )));
            }
        }
        let e = geom.extents(xv.shape());
        for a in 0..3 {
            let (len, k, s, p) = (e.inp[a], geom.kernel[a], geom.stride[a], geom.pad[a]);
            // Accept exact tilings and same-style strides over divisible extents.
            if len + 2 * p < k || ((len + 2 * p - k) % s != 0 && len % s != 0) {
                return Err(Error::dim("conv stride geometry", xv.shape(), wv.shape()));
            }
        }
        let kdim = e.c * geom.kernel_vol();
        let p = e.out_vol();
        let mut out = vec![T::zero(); e.n * cout * p];
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { kdim * p }];
        let bias = b.map(|b| self.value(b));
        for n in 0..e.n {
            let xn = &xv.data()[n * e.c * e.in_vol()..(n + 1) * e.c * e.in_vol()];
            let yn = &mut out[n * cout * p..(n + 1) * cout * p];
            if let Some(bias) = &bias {
                for co in 0..cout {
                    yn[co * p..(co + 1) * p].fill(bias.data()[co]);
                }
            }
            let cols_ref: &[T] = if geom.is_pointwise() {
                xn
            } else {
                im2col(xn, &e, &geom, &mut cols);
                &cols
            };
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            gemm(cout, kdim, p, T::one(), wv.data(), Layout::Normal, cols_ref, Layout::Normal, beta, yn);
        }
        let shape = geom.output_shape(&e, cout);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(Tensor::from_parts(shape, out), Op::Conv { x, w, b, geom }, &inputs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct summation oracle for a single-item 2-D cross-correlation.
    fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        Tensor::from_fn(&[co, oh, ow], |idx| {
            let (o, rem) = (idx / (oh * ow), idx % (oh * ow));
            let (y, xo) = (rem / ow, rem % ow);
            let mut acc = bias[o];
            for ci in 0..c {
                for a in 0..k {
                    for b in 0..k {
                        let iy = (y * stride + a) as isize - pad as isize;
                        let ix = (xo * stride + b) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x.data()[(ci * h + iy as usize) * wd + ix as usize]
                                * w.data()[((o * c + ci) * k + a) * k + b];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn pointwise_scaling() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 3, 4], |i| i as f64));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(*tape.value(y), tape.value(x).map(|v| 2.0 * v));
    }

    #[test]
    fn ones_kernel_interior_sum() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 5, 5]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.value(tape.conv2d(x, w, None, 1, 1).unwrap());
        assert_eq!(y.shape(), &[1, 5, 5]);
        assert_eq!(y.data()[2 * 5 + 2], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn bias_only() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 4, 4], |i| i as f64));
        let w = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let b = tape.constant(Tensor::full(&[3], 1.5));
        let y = tape.value(tape.conv2d(x, w, Some(b), 1, 1).unwrap());
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn matches_direct_summation_with_stride() {
        let tape = Tape::<f64>::new();
        let xt = Tensor::from_fn(&[2, 6, 8], |i| ((i * 37) % 11) as f64 - 5.0);
        let wt = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 13) % 7) as f64 * 0.25 - 0.5);
        let bias = [0.1, -0.2, 0.3];
        let x = tape.constant(xt.clone());
        let w = tape.constant(wt.clone());
        let b = tape.constant(Tensor::new(&[3], bias.to_vec()).unwrap());
        for stride in [1, 2] {
            let y = tape.value(tape.conv2d(x, w, Some(b), stride, 1).unwrap());
            let expect = naive_conv2d(&xt, &wt, &bias, stride, 1);
            assert_eq!(y.shape(), expect.shape());
            assert!(y.max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn batched_matches_per_item() {
        let tape = Tape::<f64>::new();
        let xt = Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64 * 0.7).sin());
        let w = tape.constant(Tensor::from_fn(&[2, 3, 3, 3], |i| (i as f64 * 0.3).cos()));
        let xb = tape.constant(xt.clone());
        let yb = tape.value(tape.conv2d(xb, w, None, 2, 1).unwrap());
        for n in 0..2 {
            let xi = tape.constant(xt.narrow(0, n, 1).unwrap().reshaped(&[3, 4, 4]).unwrap());
            let yi = tape.value(tape.conv2d(xi, w, None, 2, 1).unwrap());
            let slice = yb.narrow(0, n, 1).unwrap().reshaped(yi.shape()).unwrap();
            assert_eq!(slice, *yi);
        }
    }

    #[test]
    fn stride_geometry_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 5, 5]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        // 5 is not divisible by 2 and (5 + 0 - 3) % 2 == 0 tiles exactly
        assert!(tape.conv2d(x, w, None, 2, 0).is_ok());
        // (5 + 2 - 3) % 3 != 0 and 5 % 3 != 0
        assert!(matches!(tape.conv2d(x, w, None, 3, 1), Err(Error::Dimension { .. })));
        let even = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        assert!(matches!(tape.conv2d(x, even, None, 1, 0), Err(Error::Geometry(_))));
    }

    #[test]
    fn conv3d_output_extents() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[3, 7, 8, 12]));
        let w = tape.constant(Tensor::ones(&[4, 3, 3, 3, 3]));
        let y = tape.conv3d(x, w, None, [2, 2, 2], [1, 1, 1]).unwrap();
        assert_eq!(tape.shape(y), vec![4, 4, 4, 6]);
        // center voxel of a ones volume sees all 81 taps
        let y1 = tape.value(tape.conv3d(x, w, None, [1, 1, 1], [1, 1, 1]).unwrap());
        assert_eq!(y1.data()[(3 * 8 + 4) * 12 + 6], 81.0);
    }
}
