//! Parallel-beam CT geometry: Radon transform, ramp filter and backprojection.
//!
//! Pixel `(i, j)` of an `n × n` image sits at `x = j − c`, `y = i − c` with
//! `c = (n − 1) / 2`. Angle `k` is `θ = kπ / n_angles`. Detector `d` sits at
//! offset `t = d − (n_det − 1) / 2`. The ray for `(θ, t)` is sampled at unit
//! steps `s` along `(−sin θ, cos θ)`, symmetric around the detector line.

use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::autodiff::{linear_map, PlaneMap, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

struct Inner {
    n: usize,
    n_angles: usize,
    n_det: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    filter: Option<RampFilter>,
}

struct RampFilter {
    padded: usize,
    response: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    /// Band-limited ramp: the spectrum of the sampled kernel
    /// `h[0] = 1/4`, `h[odd k] = −1/(π²k²)`, `h[even k] = 0`.
    fn new(n_det: usize) -> Self {
        let padded = (2 * n_det).next_power_of_two();
        let mut kernel = vec![Complex::new(0.0, 0.0); padded];
        kernel[0].re = 0.25;
        for k in (1..n_det).step_by(2) {
            let v = -1.0 / (PI * PI * (k * k) as f64);
            kernel[k].re = v;
            kernel[padded - k].re = v;
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(padded);
        let ifft = planner.plan_fft_inverse(padded);
        fft.process(&mut kernel);
        let response = kernel.iter().map(|c| c.re / padded as f64).collect();
        Self {
            padded,
            response,
            fft,
            ifft,
        }
    }

    /// Linear convolution with the symmetric kernel, truncated to the
    /// detector range. The map is symmetric, so it is its own adjoint.
    fn apply_row(&self, src: &[f64], dst: &mut [f64]) {
        let mut buf = vec![Complex::new(0.0, 0.0); self.padded];
        for (b, &v) in buf.iter_mut().zip(src) {
            b.re = v;
        }
        self.fft.process(&mut buf);
        for (b, &h) in buf.iter_mut().zip(&self.response) {
            *b *= h;
        }
        self.ifft.process(&mut buf);
        for (d, b) in dst.iter_mut().zip(&buf) {
            *d = b.re;
        }
    }
}

/// Fixed scanner geometry for square images of side `n`.
#[derive(Clone)]
pub struct CtGeometry(Arc<Inner>);

impl std::fmt::Debug for CtGeometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CtGeometry")
            .field("n", &self.0.n)
            .field("n_angles", &self.0.n_angles)
            .field("n_det", &self.0.n_det)
            .field("ramp", &self.0.filter.is_some())
            .finish()
    }
}

/// Smallest odd detector count covering the diagonal of an `n × n` image.
pub fn default_detector_count(n: usize) -> usize {
    let d = (n as f64 * std::f64::consts::SQRT_2).ceil() as usize;
    d | 1
}

impl CtGeometry {
    pub fn new(n: usize, n_angles: usize, n_det: Option<usize>, ramp: bool) -> Result<Self> {
        if n == 0 || n_angles == 0 {
            return Err(Error::invalid("CT geometry needs n ≥ 1 and n_angles ≥ 1"));
        }
        let min_det = default_detector_count(n);
        let n_det = n_det.unwrap_or(min_det);
        if n_det < min_det {
            return Err(Error::invalid(format!(
                "{n_det} detectors do not cover the {n}x{n} diagonal (need {min_det})"
            )));
        }
        let angles: Vec<f64> = (0..n_angles).map(|k| k as f64 * PI / n_angles as f64).collect();
        Ok(Self(Arc::new(Inner {
            n,
            n_angles,
            n_det,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
            filter: ramp.then(|| RampFilter::new(n_det)),
        })))
    }

    pub fn image_size(&self) -> usize {
        self.0.n
    }

    pub fn n_angles(&self) -> usize {
        self.0.n_angles
    }

    pub fn n_detectors(&self) -> usize {
        self.0.n_det
    }

    pub fn ramp(&self) -> bool {
        self.0.filter.is_some()
    }

    fn image_center(&self) -> f64 {
        (self.0.n as f64 - 1.0) / 2.0
    }

    fn det_center(&self) -> f64 {
        (self.0.n_det as f64 - 1.0) / 2.0
    }

    /// Calls `f(pixel, weight)` for every tap of ray `(k, d)`. Joseph's
    /// method: one sample per row (or column) along the dominant axis of the
    /// ray, linear interpolation across the other axis.
    fn ray_taps(&self, k: usize, d: usize, mut f: impl FnMut(usize, f64)) {
        let n = self.0.n;
        let c = self.image_center();
        let t = d as f64 - self.det_center();
        let (cs, sn) = (self.0.cos[k], self.0.sin[k]);
        // ray: (t cs - s sn, t sn + s cs) + c
        let steep = cs.abs() >= sn.abs();
        let (dir_major, dir_minor, base_major, base_minor) = if steep {
            (cs, -sn, t * sn, t * cs)
        } else {
            (-sn, cs, t * cs, t * sn)
        };
        let weight = 1.0 / dir_major.abs();
        for major in 0..n {
            let s = (major as f64 - c - base_major) / dir_major;
            let minor = base_minor + s * dir_minor + c;
            if minor <= -1.0 || minor >= n as f64 {
                continue;
            }
            let m0 = minor.floor();
            let a = minor - m0;
            let m0 = m0 as isize;
            for (dm, wm) in [(0, 1.0 - a), (1, a)] {
                let mi = m0 + dm;
                if mi < 0 || mi >= n as isize || wm == 0.0 {
                    continue;
                }
                let p = if steep { major * n + mi as usize } else { mi as usize * n + major };
                f(p, weight * wm);
            }
        }
    }

    /// Calls `f(sino_index, weight)` for the detector taps that pixel `p`
    /// reads at angle `k` during backprojection.
    fn backproject_taps(&self, p: usize, k: usize, mut f: impl FnMut(usize, f64)) {
        let n = self.0.n;
        let c = self.image_center();
        let x = (p % n) as f64 - c;
        let y = (p / n) as f64 - c;
        let u = x * self.0.cos[k] + y * self.0.sin[k] + self.det_center();
        if u <= -1.0 || u >= self.0.n_det as f64 {
            return;
        }
        let u0 = u.floor();
        let a = u - u0;
        let u0 = u0 as isize;
        let row = k * self.0.n_det;
        for (du, w) in [(0, 1.0 - a), (1, a)] {
            let ui = u0 + du;
            if ui >= 0 && (ui as usize) < self.0.n_det && w != 0.0 {
                f(row + ui as usize, w);
            }
        }
    }

    pub fn radon_op(&self) -> RadonOp {
        RadonOp(self.clone())
    }

    pub fn ramp_op(&self) -> RampOp {
        RampOp(self.clone())
    }

    pub fn backprojection_op(&self) -> BackprojectionOp {
        BackprojectionOp(self.clone())
    }

    fn check_image<T: Element>(&self, y: &Tensor<T>) -> Result<()> {
        let s = y.shape();
        if s.len() < 2 || s[s.len() - 2] != s[s.len() - 1] {
            return Err(Error::Shape(format!("radon needs square images, got {s:?}")));
        }
        if s[s.len() - 1] != self.0.n {
            return Err(Error::Shape(format!(
                "geometry is for {0}x{0} images, got {s:?}",
                self.0.n
            )));
        }
        Ok(())
    }

    fn check_sinogram<T: Element>(&self, p: &Tensor<T>) -> Result<()> {
        let s = p.shape();
        if s.len() < 2 || (s[s.len() - 2], s[s.len() - 1]) != (self.0.n_angles, self.0.n_det) {
            return Err(Error::Shape(format!(
                "sinogram must end in [{}, {}], got {s:?}",
                self.0.n_angles, self.0.n_det
            )));
        }
        Ok(())
    }

    /// Line integrals of every trailing `[n, n]` plane.
    pub fn radon<T: Element>(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(y)?;
        crate::autodiff::apply_forward(&self.radon_op(), y)
    }

    /// Ramp filtering (when enabled) followed by backprojection.
    pub fn fbp<T: Element>(&self, sino: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_sinogram(sino)?;
        let filtered = if self.ramp() {
            crate::autodiff::apply_forward(&self.ramp_op(), sino)?
        } else {
            sino.clone()
        };
        crate::autodiff::apply_forward(&self.backprojection_op(), &filtered)
    }

    pub fn radon_var<T: Element>(&self, y: &Var<T>) -> Result<Var<T>> {
        self.check_image(y.value())?;
        linear_map(Rc::new(self.radon_op()), y)
    }

    pub fn fbp_var<T: Element>(&self, sino: &Var<T>) -> Result<Var<T>> {
        self.check_sinogram(sino.value())?;
        let filtered = if self.ramp() {
            linear_map(Rc::new(self.ramp_op()), sino)?
        } else {
            sino.clone()
        };
        linear_map(Rc::new(self.backprojection_op()), &filtered)
    }
}

pub struct RadonOp(CtGeometry);
pub struct RampOp(CtGeometry);
pub struct BackprojectionOp(CtGeometry);

impl<T: Element> PlaneMap<T> for RadonOp {
    fn in_dims(&self) -> (usize, usize) {
        (self.0 .0.n, self.0 .0.n)
    }

    fn out_dims(&self) -> (usize, usize) {
        (self.0 .0.n_angles, self.0 .0.n_det)
    }

    fn forward_plane(&self, src: &[T], dst: &mut [T]) {
        let g = &self.0;
        for k in 0..g.0.n_angles {
            for d in 0..g.0.n_det {
                let mut acc = 0.0;
                g.ray_taps(k, d, |p, w| acc += w * src[p].as_f64());
                dst[k * g.0.n_det + d] = T::from_f64_lossy(acc);
            }
        }
    }

    fn adjoint_plane(&self, src: &[T], dst: &mut [T]) {
        let g = &self.0;
        let mut acc = vec![0.0f64; dst.len()];
        for k in 0..g.0.n_angles {
            for d in 0..g.0.n_det {
                let v = src[k * g.0.n_det + d].as_f64();
                if v != 0.0 {
                    g.ray_taps(k, d, |p, w| acc[p] += w * v);
                }
            }
        }
        for (o, a) in dst.iter_mut().zip(acc) {
            *o = T::from_f64_lossy(a);
        }
    }
}

impl<T: Element> PlaneMap<T> for RampOp {
    fn in_dims(&self) -> (usize, usize) {
        (self.0 .0.n_angles, self.0 .0.n_det)
    }

    fn out_dims(&self) -> (usize, usize) {
        (self.0 .0.n_angles, self.0 .0.n_det)
    }

    fn forward_plane(&self, src: &[T], dst: &mut [T]) {
        let n_det = self.0 .0.n_det;
        let Some(filter) = &self.0 .0.filter else {
            dst.copy_from_slice(src);
            return;
        };
        let mut row = vec![0.0; n_det];
        let mut out = vec![0.0; n_det];
        for (s, d) in src.chunks_exact(n_det).zip(dst.chunks_exact_mut(n_det)) {
            for (r, v) in row.iter_mut().zip(s) {
                *r = v.as_f64();
            }
            filter.apply_row(&row, &mut out);
            for (o, v) in d.iter_mut().zip(&out) {
                *o = T::from_f64_lossy(*v);
            }
        }
    }

    fn adjoint_plane(&self, src: &[T], dst: &mut [T]) {
        self.forward_plane(src, dst);
    }
}

impl<T: Element> PlaneMap<T> for BackprojectionOp {
    fn in_dims(&self) -> (usize, usize) {
        (self.0 .0.n_angles, self.0 .0.n_det)
    }

    fn out_dims(&self) -> (usize, usize) {
        (self.0 .0.n, self.0 .0.n)
    }

    fn forward_plane(&self, src: &[T], dst: &mut [T]) {
        let g = &self.0;
        let scale = PI / g.0.n_angles as f64;
        for (p, out) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..g.0.n_angles {
                g.backproject_taps(p, k, |q, w| acc += w * src[q].as_f64());
            }
            *out = T::from_f64_lossy(acc * scale);
        }
    }

    fn adjoint_plane(&self, src: &[T], dst: &mut [T]) {
        let g = &self.0;
        let scale = PI / g.0.n_angles as f64;
        let mut acc = vec![0.0f64; dst.len()];
        for (p, v) in src.iter().enumerate() {
            let v = v.as_f64() * scale;
            if v != 0.0 {
                for k in 0..g.0.n_angles {
                    g.backproject_taps(p, k, |q, w| acc[q] += w * v);
                }
            }
        }
        for (o, a) in dst.iter_mut().zip(acc) {
            *o = T::from_f64_lossy(a);
        }
    }
}
