//! Bilinear resizing and block-average downsampling.
//!
//! Bilinear sampling uses half-pixel centers: destination index `d` reads
//! source coordinate `(d + 0.5) · in / out − 0.5`, clamped to
//! `[0, in − 1]`. Both operators are linear with analytic adjoints.

use std::rc::Rc;

use crate::autodiff::{linear_map, PlaneMap, Var};
use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Separable bilinear resize between fixed plane sizes.
#[derive(Clone, Debug)]
pub struct BilinearResize {
    input: (usize, usize),
    output: (usize, usize),
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl BilinearResize {
    pub fn new(input: (usize, usize), output: (usize, usize)) -> Result<Self> {
        if input.0 == 0 || input.1 == 0 || output.0 == 0 || output.1 == 0 {
            return Err(Error::invalid("bilinear resize with empty plane"));
        }
        Ok(Self {
            input,
            output,
            rows: taps(input.0, output.0),
            cols: taps(input.1, output.1),
        })
    }
}

impl<T: Element> PlaneMap<T> for BilinearResize {
    fn in_dims(&self) -> (usize, usize) {
        self.input
    }

    fn out_dims(&self) -> (usize, usize) {
        self.output
    }

    fn forward_plane(&self, src: &[T], dst: &mut [T]) {
        let iw = self.input.1;
        let ow = self.output.1;
        for (i, r) in self.rows.iter().enumerate() {
            let (rlo, rhi) = (r.lo * iw, r.hi * iw);
            let (wr_lo, wr_hi) = (T::from_f64_lossy(r.w_lo), T::from_f64_lossy(r.w_hi));
            for (j, c) in self.cols.iter().enumerate() {
                let (wc_lo, wc_hi) = (T::from_f64_lossy(c.w_lo), T::from_f64_lossy(c.w_hi));
                let top = src[rlo + c.lo] * wc_lo + src[rlo + c.hi] * wc_hi;
                let bottom = src[rhi + c.lo] * wc_lo + src[rhi + c.hi] * wc_hi;
                dst[i * ow + j] = top * wr_lo + bottom * wr_hi;
            }
        }
    }

    fn adjoint_plane(&self, src: &[T], dst: &mut [T]) {
        let iw = self.input.1;
        let ow = self.output.1;
        for (i, r) in self.rows.iter().enumerate() {
            let (rlo, rhi) = (r.lo * iw, r.hi * iw);
            let (wr_lo, wr_hi) = (T::from_f64_lossy(r.w_lo), T::from_f64_lossy(r.w_hi));
            for (j, c) in self.cols.iter().enumerate() {
                let (wc_lo, wc_hi) = (T::from_f64_lossy(c.w_lo), T::from_f64_lossy(c.w_hi));
                let g = src[i * ow + j];
                let top = g * wr_lo;
                let bottom = g * wr_hi;
                dst[rlo + c.lo] += top * wc_lo;
                dst[rlo + c.hi] += top * wc_hi;
                dst[rhi + c.lo] += bottom * wc_lo;
                dst[rhi + c.hi] += bottom * wc_hi;
            }
        }
    }
}

/// Mean over non-overlapping `factor × factor` blocks.
#[derive(Clone, Copy, Debug)]
pub struct AreaDownsample {
    input: (usize, usize),
    factor: usize,
}

impl AreaDownsample {
    pub fn new(input: (usize, usize), factor: usize) -> Result<Self> {
        if factor == 0 || !input.0.is_multiple_of(factor) || !input.1.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "downsample factor {factor} does not divide {}x{}",
                input.0, input.1
            )));
        }
        Ok(Self { input, factor })
    }
}

impl<T: Element> PlaneMap<T> for AreaDownsample {
    fn in_dims(&self) -> (usize, usize) {
        self.input
    }

    fn out_dims(&self) -> (usize, usize) {
        (self.input.0 / self.factor, self.input.1 / self.factor)
    }

    fn forward_plane(&self, src: &[T], dst: &mut [T]) {
        let s = self.factor;
        let (w, ow) = (self.input.1, self.input.1 / s);
        let inv = T::from_f64_lossy(1.0 / (s * s) as f64);
        for (i, row) in src.chunks_exact(w).enumerate() {
            let out = &mut dst[(i / s) * ow..(i / s + 1) * ow];
            for (j, &v) in row.iter().enumerate() {
                out[j / s] += v;
            }
        }
        dst.iter_mut().for_each(|v| *v *= inv);
    }

    fn adjoint_plane(&self, src: &[T], dst: &mut [T]) {
        let s = self.factor;
        let (w, ow) = (self.input.1, self.input.1 / s);
        let inv = T::from_f64_lossy(1.0 / (s * s) as f64);
        for (i, row) in dst.chunks_exact_mut(w).enumerate() {
            let g = &src[(i / s) * ow..(i / s + 1) * ow];
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j / s] * inv;
            }
        }
    }
}

fn trailing_hw(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [.., h, w] => Ok((*h, *w)),
        _ => Err(Error::Shape(format!("expected an image tensor, got {shape:?}"))),
    }
}

/// Bilinear resize of the trailing two axes to `out_h × out_w`.
pub fn interpolate_bilinear<T: Element>(x: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
    let map = BilinearResize::new(trailing_hw(x.shape())?, (out_h, out_w))?;
    linear_map(Rc::new(map), x)
}

/// Block-average downsampling of the trailing two axes by `factor`.
pub fn downsample_area<T: Element>(x: &Var<T>, factor: usize) -> Result<Var<T>> {
    let map = AreaDownsample::new(trailing_hw(x.shape())?, factor)?;
    linear_map(Rc::new(map), x)
}
