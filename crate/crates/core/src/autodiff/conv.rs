//! Stride-1, zero-padded 2-D convolution (cross-correlation).
//!
//! Three bilinear primitives close under differentiation:
//! `y = conv(x, w)`, its adjoint in `x` and its adjoint in `w`. Each one's
//! derivative is expressed with the other two, so gradients through a
//! convolution can be differentiated again.

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: [usize; 4], wt: [usize; 4], pad: (usize, usize)) -> Result<Self> {
        let [n, c, h, w] = x;
        let [o, wc, kh, kw] = wt;
        if wc != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels, weight expects {wc}"
            )));
        }
        let (ph, pw) = pad;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ph,
            pw,
            oh: h + 2 * ph - kh + 1,
            ow: w + 2 * pw - kw + 1,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn plane_out(&self) -> usize {
        self.oh * self.ow
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape)
        .map_err(|_| Error::Shape(format!("conv2d: {what} must be rank 4, got {shape:?}")))
}

/// Unfolds one `[C, H, W]` image into `[C·kh·kw, oh·ow]` columns.
fn im2col<T: Element>(g: &Geometry, img: &[T], cols: &mut [T]) {
    let ohw = g.plane_out();
    for ch in 0..g.c {
        let plane = &img[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oi in 0..g.oh {
                    let si = (oi + ki) as isize - g.ph as isize;
                    let line = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if si < 0 || si >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[si as usize * g.w..(si as usize + 1) * g.w];
                    for (oj, slot) in line.iter_mut().enumerate() {
                        let sj = (oj + kj) as isize - g.pw as isize;
                        *slot = if sj < 0 || sj >= g.w as isize {
                            T::zero()
                        } else {
                            src[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im<T: Element>(g: &Geometry, cols: &[T], img: &mut [T]) {
    let ohw = g.plane_out();
    for ch in 0..g.c {
        let plane = &mut img[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oi in 0..g.oh {
                    let si = (oi + ki) as isize - g.ph as isize;
                    if si < 0 || si >= g.h as isize {
                        continue;
                    }
                    let line = &src[oi * g.ow..(oi + 1) * g.ow];
                    let dst = &mut plane[si as usize * g.w..(si as usize + 1) * g.w];
                    for (oj, &v) in line.iter().enumerate() {
                        let sj = (oj + kj) as isize - g.pw as isize;
                        if sj >= 0 && sj < g.w as isize {
                            dst[sj as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn forward_kernel<T: Element>(g: &Geometry, x: &[T], wt: &[T]) -> Vec<T> {
    let (ckk, ohw) = (g.ckk(), g.plane_out());
    let mut out = vec![T::zero(); g.n * g.o * ohw];
    let mut cols = vec![T::zero(); ckk * ohw];
    for b in 0..g.n {
        im2col(g, &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w], &mut cols);
        let dst = &mut out[b * g.o * ohw..(b + 1) * g.o * ohw];
        T::gemm(
            g.o,
            ckk,
            ohw,
            T::one(),
            wt,
            ckk as isize,
            1,
            &cols,
            ohw as isize,
            1,
            T::zero(),
            dst,
            ohw as isize,
            1,
        );
    }
    out
}

fn input_grad_kernel<T: Element>(g: &Geometry, gy: &[T], wt: &[T]) -> Vec<T> {
    let (ckk, ohw) = (g.ckk(), g.plane_out());
    let chw = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * chw];
    let mut cols = vec![T::zero(); ckk * ohw];
    for b in 0..g.n {
        // cols = Wᵀ · gy
        T::gemm(
            ckk,
            g.o,
            ohw,
            T::one(),
            wt,
            1,
            ckk as isize,
            &gy[b * g.o * ohw..(b + 1) * g.o * ohw],
            ohw as isize,
            1,
            T::zero(),
            &mut cols,
            ohw as isize,
            1,
        );
        col2im(g, &cols, &mut out[b * chw..(b + 1) * chw]);
    }
    out
}

fn weight_grad_kernel<T: Element>(g: &Geometry, x: &[T], gy: &[T]) -> Vec<T> {
    let (ckk, ohw) = (g.ckk(), g.plane_out());
    let mut out = vec![T::zero(); g.o * ckk];
    let mut cols = vec![T::zero(); ckk * ohw];
    for b in 0..g.n {
        im2col(g, &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w], &mut cols);
        // gW += gy · colsᵀ
        T::gemm(
            g.o,
            ohw,
            ckk,
            T::one(),
            &gy[b * g.o * ohw..(b + 1) * g.o * ohw],
            ohw as isize,
            1,
            &cols,
            1,
            ohw as isize,
            T::one(),
            &mut out,
            ckk as isize,
            1,
        );
    }
    out
}

/// `conv2d(x, w) + b` with zero padding `(pad_h, pad_w)` and stride 1.
///
/// `x` is `[N, C, H, W]`, `w` is `[O, C, kh, kw]`, `b` is `[O]`; the output
/// is `[N, O, H + 2·pad_h − kh + 1, W + 2·pad_w − kw + 1]`.
pub fn conv2d<T: Element>(
    x: &Var<T>,
    w: &Var<T>,
    b: Option<&Var<T>>,
    pad: (usize, usize),
) -> Result<Var<T>> {
    let y = conv2d_nobias(x, w, pad)?;
    match b {
        Some(b) => super::bias_add(&y, b),
        None => Ok(y),
    }
}

fn conv2d_nobias<T: Element>(x: &Var<T>, w: &Var<T>, pad: (usize, usize)) -> Result<Var<T>> {
    let g = Geometry::new(dims4(x.shape(), "input")?, dims4(w.shape(), "weight")?, pad)?;
    let out = forward_kernel(&g, x.value().data(), w.value().data());
    let value = Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)?;
    Ok(Var::from_op(
        value,
        vec![x.clone(), w.clone()],
        Box::new(move |gy, p| {
            Ok(vec![
                conv2d_input_grad(gy, &p[1], (g.h, g.w), pad)?,
                conv2d_weight_grad(&p[0], gy, (g.kh, g.kw), pad)?,
            ])
        }),
    ))
}

/// Adjoint of `conv2d` in its input: maps `[N, O, oh, ow]` to `[N, C, H, W]`.
pub fn conv2d_input_grad<T: Element>(
    gy: &Var<T>,
    w: &Var<T>,
    input_hw: (usize, usize),
    pad: (usize, usize),
) -> Result<Var<T>> {
    let [n, o, oh, ow] = dims4(gy.shape(), "output gradient")?;
    let ws = dims4(w.shape(), "weight")?;
    let g = Geometry::new([n, ws[1], input_hw.0, input_hw.1], ws, pad)?;
    if g.o != o || g.oh != oh || g.ow != ow {
        return Err(Error::Shape(format!(
            "conv2d input grad: gradient {:?} inconsistent with weight {:?}",
            gy.shape(),
            w.shape()
        )));
    }
    let out = input_grad_kernel(&g, gy.value().data(), w.value().data());
    let value = Tensor::new(vec![g.n, g.c, g.h, g.w], out)?;
    Ok(Var::from_op(
        value,
        vec![gy.clone(), w.clone()],
        Box::new(move |gz, p| {
            Ok(vec![
                conv2d_nobias(gz, &p[1], pad)?,
                conv2d_weight_grad(gz, &p[0], (g.kh, g.kw), pad)?,
            ])
        }),
    ))
}

/// Adjoint of `conv2d` in its weight: maps `(x, gy)` to `[O, C, kh, kw]`.
pub fn conv2d_weight_grad<T: Element>(
    x: &Var<T>,
    gy: &Var<T>,
    kernel: (usize, usize),
    pad: (usize, usize),
) -> Result<Var<T>> {
    let xs = dims4(x.shape(), "input")?;
    let [n, o, oh, ow] = dims4(gy.shape(), "output gradient")?;
    let g = Geometry::new(xs, [o, xs[1], kernel.0, kernel.1], pad)?;
    if g.n != n || g.oh != oh || g.ow != ow {
        return Err(Error::Shape(format!(
            "conv2d weight grad: input {:?} inconsistent with gradient {:?}",
            x.shape(),
            gy.shape()
        )));
    }
    let out = weight_grad_kernel(&g, x.value().data(), gy.value().data());
    let value = Tensor::new(vec![g.o, g.c, g.kh, g.kw], out)?;
    Ok(Var::from_op(
        value,
        vec![x.clone(), gy.clone()],
        Box::new(move |gz, p| {
            Ok(vec![
                conv2d_input_grad(&p[1], gz, (g.h, g.w), pad)?,
                conv2d_nobias(&p[0], gz, pad)?,
            ])
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad, sum};

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let [n, c, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
        let [o, _, kh, kw] = <[usize; 4]>::try_from(w.shape()).unwrap();
        let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let mut out = Tensor::zeros(vec![n, o, oh, ow]);
        let xd = x.data();
        let wdat = w.data();
        for b in 0..n {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let si = i as isize + ki as isize - pad as isize;
                                    let sj = j as isize + kj as isize - pad as isize;
                                    if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                        continue;
                                    }
                                    acc += xd[((b * c + ch) * h + si as usize) * wd + sj as usize]
                                        * wdat[((oc * c + ch) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out.data_mut()[((b * o + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loop() {
        let x = Tensor::from_fn(vec![2, 3, 6, 5], |i| ((i * 37 % 11) as f64) - 5.0);
        let w = Tensor::from_fn(vec![4, 3, 3, 2], |i| ((i * 13 % 7) as f64) * 0.25 - 0.5);
        for pad in [0, 1, 2] {
            let got = conv2d(&Var::constant(x.clone()), &Var::constant(w.clone()), None, (pad, pad))
                .unwrap();
            let want = naive(&x, &w, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.value().data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_is_exact() {
        let x = Tensor::from_fn(vec![1, 1, 4, 4], |i| (i as f64).sqrt() * 0.3);
        let w = Tensor::ones(vec![1, 1, 1, 1]);
        let b = Tensor::zeros(vec![1]);
        let y = conv2d(
            &Var::constant(x.clone()),
            &Var::constant(w),
            Some(&Var::constant(b)),
            (0, 0),
        )
        .unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn averaging_kernel_keeps_constant_interior() {
        let x = Tensor::<f64>::full(vec![1, 1, 7, 7], 0.6);
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0 / 9.0);
        let y = conv2d(&Var::constant(x), &Var::constant(w), None, (1, 1)).unwrap();
        for i in 1..6 {
            for j in 1..6 {
                assert!((y.value().data()[i * 7 + j] - 0.6).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Var::constant(Tensor::<f64>::zeros(vec![1, 2, 5, 5]));
        let w = Var::constant(Tensor::zeros(vec![1, 3, 3, 3]));
        assert!(matches!(conv2d(&x, &w, None, (1, 1)), Err(Error::Shape(_))));
        let w = Var::constant(Tensor::zeros(vec![1, 2, 9, 9]));
        assert!(conv2d(&x, &w, None, (1, 1)).is_err());
    }

    #[test]
    fn bias_gradient_counts_positions() {
        let x = Var::constant(Tensor::<f64>::ones(vec![2, 1, 3, 3]));
        let w = Var::param(Tensor::ones(vec![2, 1, 3, 3]));
        let b = Var::param(Tensor::zeros(vec![2]));
        let y = conv2d(&x, &w, Some(&b), (1, 1)).unwrap();
        let g = grad(&sum(&y), &[b], false).unwrap();
        assert_eq!(g[0].value().data(), &[18.0, 18.0]);
    }
}
