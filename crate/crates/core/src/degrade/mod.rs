//! Degradation operators that turn high-quality images into low-quality inputs.
//!
//! Two kinds are supported: super-resolution (area downsampling followed by
//! bilinear upsampling back to the original grid) and low-dose CT
//! (projection, photon-count noise, log transform and filtered
//! backprojection).

mod ct;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{add, add_scalar, relu, scale, sub, Var};
use crate::error::{Error, Result};
use crate::resample::{downsample_area, interpolate_bilinear};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub use ct::{default_detector_count, BackprojectionOp, CtGeometry, RadonOp, RampOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Sr,
    Ldct,
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DegradationKind::Sr => "sr",
            DegradationKind::Ldct => "ldct",
        })
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sr" => Ok(DegradationKind::Sr),
            "ldct" => Ok(DegradationKind::Ldct),
            other => Err(Error::invalid(format!("unknown degradation kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Poisson,
    GaussianSurrogate,
    None,
}

/// Whether a degradation may draw non-differentiable samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegradeMode {
    /// Exact sampling; the output is detached when Poisson noise is drawn.
    Sampling,
    /// Gradient flows from output to input. Poisson noise is replaced by
    /// its Gaussian surrogate.
    Differentiable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    /// Super-resolution scale factor, 2 or 4.
    pub factor: usize,
    /// Incident photon count per detector bin.
    pub i0: f64,
    pub n_angles: usize,
    /// Defaults to the smallest odd count covering the image diagonal.
    pub n_detectors: Option<usize>,
    pub ramp: bool,
    pub noise: NoiseMode,
    /// Linear attenuation per pixel length for unit image intensity.
    pub mu_per_pixel: f64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            kind: DegradationKind::Sr,
            factor: 4,
            i0: 1e4,
            n_angles: 90,
            n_detectors: None,
            ramp: true,
            noise: NoiseMode::Poisson,
            mu_per_pixel: 0.1,
        }
    }
}

impl DegradationSpec {
    pub fn sr(factor: usize) -> Self {
        Self {
            kind: DegradationKind::Sr,
            factor,
            ..Self::default()
        }
    }

    pub fn ldct(i0: f64, n_angles: usize) -> Self {
        Self {
            kind: DegradationKind::Ldct,
            i0,
            n_angles,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DegradationKind::Sr if !matches!(self.factor, 2 | 4) => Err(Error::invalid(format!(
                "super-resolution factor must be 2 or 4, got {}",
                self.factor
            ))),
            DegradationKind::Ldct if !(self.i0 > 0.0 && self.i0.is_finite()) => {
                Err(Error::invalid(format!("photon count must be positive, got {}", self.i0)))
            }
            DegradationKind::Ldct if self.n_angles == 0 => Err(Error::invalid("n_angles must be ≥ 1")),
            DegradationKind::Ldct if !(self.mu_per_pixel > 0.0 && self.mu_per_pixel.is_finite()) => {
                Err(Error::invalid("mu_per_pixel must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Binds the spec to an image size, precomputing scanner geometry.
    pub fn prepare(&self, h: usize, w: usize) -> Result<Degradation> {
        self.validate()?;
        let geometry = match self.kind {
            DegradationKind::Sr => {
                if !h.is_multiple_of(self.factor) || !w.is_multiple_of(self.factor) {
                    return Err(Error::invalid(format!(
                        "factor {} does not divide {h}x{w}",
                        self.factor
                    )));
                }
                None
            }
            DegradationKind::Ldct => {
                if h != w {
                    return Err(Error::Shape(format!("low-dose CT needs square images, got {h}x{w}")));
                }
                Some(CtGeometry::new(h, self.n_angles, self.n_detectors, self.ramp)?)
            }
        };
        Ok(Degradation {
            spec: self.clone(),
            hw: (h, w),
            geometry,
        })
    }
}

/// A degradation spec bound to a fixed image size.
#[derive(Clone, Debug)]
pub struct Degradation {
    spec: DegradationSpec,
    hw: (usize, usize),
    geometry: Option<CtGeometry>,
}

impl Degradation {
    pub fn spec(&self) -> &DegradationSpec {
        &self.spec
    }

    pub fn geometry(&self) -> Option<&CtGeometry> {
        self.geometry.as_ref()
    }

    /// Degrades every trailing `[h, w]` plane of `y`. `rng` is untouched for
    /// super-resolution and for noise-free CT.
    pub fn apply<T: Element>(&self, y: &Var<T>, rng: &mut Rng, mode: DegradeMode) -> Result<Var<T>> {
        let s = y.shape();
        if s.len() < 2 || (s[s.len() - 2], s[s.len() - 1]) != self.hw {
            return Err(Error::Shape(format!(
                "degradation prepared for {:?}, got {s:?}",
                self.hw
            )));
        }
        match &self.geometry {
            None => sr_degrade(y, self.spec.factor),
            Some(g) => ldct_degrade(y, g, &self.spec, rng, mode),
        }
    }

    /// Tensor convenience wrapper around [`Degradation::apply`] in sampling mode.
    pub fn apply_tensor<T: Element>(&self, y: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
        crate::autodiff::no_grad(|| {
            self.apply(&Var::constant(y.clone()), rng, DegradeMode::Sampling)
                .map(|v| v.value().clone())
        })
    }
}

/// Area-downsamples by `factor`, then bilinearly upsamples to the input size.
pub fn sr_degrade<T: Element>(y: &Var<T>, factor: usize) -> Result<Var<T>> {
    let s = y.shape();
    if s.len() < 2 {
        return Err(Error::Shape(format!("expected image planes, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    interpolate_bilinear(&downsample_area(y, factor)?, h, w)
}

/// Low-dose CT simulation: `fbp(p̂) / μ` with `p̂` the noisy log-transformed
/// projections of `μ · radon(y)`.
pub fn ldct_degrade<T: Element>(
    y: &Var<T>,
    geometry: &CtGeometry,
    spec: &DegradationSpec,
    rng: &mut Rng,
    mode: DegradeMode,
) -> Result<Var<T>> {
    spec.validate()?;
    let mu = spec.mu_per_pixel;
    let log_i0 = spec.i0.ln();
    let p = scale(&geometry.radon_var(y)?, mu);
    let noise = match (spec.noise, mode) {
        (NoiseMode::Poisson, DegradeMode::Differentiable) => NoiseMode::GaussianSurrogate,
        (n, _) => n,
    };
    let p_hat = match noise {
        // −ln(max(I0·e^{−p}, 1) / I0) = p − relu(p − ln I0)
        NoiseMode::None => sub(&p, &relu(&add_scalar(&p, -log_i0)))?,
        NoiseMode::GaussianSurrogate => {
            // p + (N_noisy − N)·(−1/N) with N detached: a constant shift.
            add(&p, &Var::constant(surrogate_shift(p.value(), spec.i0, rng)))?
        }
        NoiseMode::Poisson => {
            let mut err = None;
            let pv = p.value();
            let noisy = Tensor::from_fn(pv.shape().to_vec(), |i| {
                let lambda = spec.i0 * (-pv.data()[i].as_f64()).exp();
                let counts = if lambda > 0.0 {
                    match Poisson::new(lambda) {
                        Ok(d) => d.sample(rng),
                        Err(e) => {
                            err.get_or_insert_with(|| Error::invalid(format!("photon count {lambda}: {e}")));
                            0.0
                        }
                    }
                } else {
                    0.0
                };
                T::from_f64_lossy(log_i0 - counts.max(1.0).ln())
            });
            if let Some(e) = err {
                return Err(e);
            }
            Var::constant(noisy)
        }
    };
    Ok(scale(&geometry.fbp_var(&p_hat)?, 1.0 / mu))
}

/// Log-domain shift of the linearized Gaussian count noise, `−ε / sqrt(N)`
/// with `N = max(I0·e^{−p}, 1)` treated as a constant.
fn surrogate_shift<T: Element>(p: &Tensor<T>, i0: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(p.shape().to_vec(), |i| {
        let counts = (i0 * (-p.data()[i].as_f64()).exp()).max(1.0);
        let eps: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(-eps / counts.sqrt())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad, sum};
    use crate::rng::rng;
    use crate::testutil::{numeric_grad, rand_tensor, rel_err};

    fn ldct_spec(noise: NoiseMode, i0: f64) -> DegradationSpec {
        DegradationSpec {
            noise,
            ..DegradationSpec::ldct(i0, 24)
        }
    }

    #[test]
    fn spec_validation() {
        assert!(DegradationSpec::sr(3).validate().is_err());
        assert!(DegradationSpec::ldct(0.0, 10).validate().is_err());
        assert!(DegradationSpec::ldct(1e4, 0).validate().is_err());
        assert!(DegradationSpec::sr(4).prepare(30, 32).is_err());
        assert!(DegradationSpec::ldct(1e4, 10).prepare(32, 30).is_err());
        assert_eq!("ldct".parse::<DegradationKind>().unwrap(), DegradationKind::Ldct);
        assert!("blur".parse::<DegradationKind>().is_err());
        let json = r#"{"kind": "ldct", "noise": "gaussian_surrogate"}"#;
        let spec: DegradationSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.noise, NoiseMode::GaussianSurrogate);
        assert!(serde_json::from_str::<DegradationSpec>(r#"{"sigma": 1}"#).is_err());
    }

    #[test]
    fn sr_preserves_constants() {
        let y = Var::constant(Tensor::<f64>::full(vec![1, 1, 16, 16], 0.37));
        let x = sr_degrade(&y, 4).unwrap();
        assert!(x.value().data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
        let again = sr_degrade(&x, 4).unwrap();
        assert!(again.value().data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn sr_impulse_keeps_mass() {
        for s in [2, 4] {
            for pos in [0, 5, 77, 255] {
                let mut t = Tensor::<f64>::zeros(vec![1, 1, 16, 16]);
                t.data_mut()[pos] = 3.0;
                let x = sr_degrade(&Var::constant(t), s).unwrap();
                assert!((x.value().sum() - 3.0).abs() < 1e-12);
                assert!(x.value().data().iter().filter(|&&v| v > 0.0).count() > 1);
            }
            let r = rand_tensor(&[2, 1, 16, 16], 4);
            let x = sr_degrade(&Var::constant(r.clone()), s).unwrap();
            assert!((x.value().sum() - r.sum()).abs() <= 1e-6 * r.sum().abs());
        }
    }

    #[test]
    fn sr_checkerboard_averages_out() {
        let t = Tensor::<f64>::from_fn(vec![1, 1, 8, 8], |i| ((i / 8 + i % 8) % 2) as f64);
        let x = sr_degrade(&Var::constant(t), 2).unwrap();
        assert!(x.value().data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn noise_free_ldct_is_clean_round_trip() {
        let spec = ldct_spec(NoiseMode::None, 1e4);
        let d = spec.prepare(16, 16).unwrap();
        let y = rand_tensor(&[1, 1, 16, 16], 3).map(|v| 0.5 + 0.5 * v);
        let out = d.apply_tensor(&y, &mut rng(0)).unwrap();
        let g = d.geometry().unwrap();
        let clean = g.fbp(&g.radon(&y.map(|v| v * 0.1)).unwrap()).unwrap().map(|v| v / 0.1);
        let err = out.zip_map(&clean, |a, b| a - b).unwrap().norm() / clean.norm();
        assert!(err < 1e-12);
    }

    #[test]
    fn noise_shrinks_with_photon_count() {
        let y = rand_tensor(&[1, 1, 16, 16], 6).map(|v| 0.5 + 0.5 * v);
        let clean = ldct_spec(NoiseMode::None, 1e4)
            .prepare(16, 16)
            .unwrap()
            .apply_tensor(&y, &mut rng(0))
            .unwrap();
        let mut last = f64::INFINITY;
        for e in 3..=12 {
            let d = ldct_spec(NoiseMode::Poisson, 10f64.powi(e)).prepare(16, 16).unwrap();
            let out = d.apply_tensor(&y, &mut rng(11)).unwrap();
            let dist = out.zip_map(&clean, |a, b| a - b).unwrap().norm();
            assert!(dist < last, "I0 = 1e{e}: {dist} !< {last}");
            last = dist;
        }
        assert!(last < 1e-2);
    }

    #[test]
    fn surrogate_path_matches_finite_differences() {
        let spec = ldct_spec(NoiseMode::GaussianSurrogate, 1e4);
        let d = spec.prepare(12, 12).unwrap();
        let y0 = rand_tensor(&[1, 1, 12, 12], 2).map(|v| 0.5 + 0.4 * v);
        let g = d.geometry().unwrap();
        // frozen noise draw: the shift is taken at the unperturbed input
        let shift = surrogate_shift(&g.radon(&y0).unwrap().map(|v| v * 0.1), 1e4, &mut rng(5));
        let mut f = |t: &Tensor<f64>| {
            let p = g.radon(t).unwrap().map(|v| v * 0.1).zip_map(&shift, |a, b| a + b).unwrap();
            g.fbp(&p).unwrap().sum() / 0.1
        };
        let y = Var::param(y0.clone());
        let out = d.apply(&y, &mut rng(5), DegradeMode::Differentiable).unwrap();
        let g = grad(&sum(&out), &[y], false).unwrap().remove(0);
        let numeric = numeric_grad(&mut f, &y0, 1e-4);
        assert!(rel_err(g.value().data(), &numeric) <= 1e-3);
        assert!(g.value().norm() > 0.0);
    }

    #[test]
    fn differentiable_mode_never_blocks_gradients() {
        let y0 = rand_tensor(&[1, 1, 16, 16], 12);
        for spec in [DegradationSpec::sr(2), DegradationSpec::sr(4), ldct_spec(NoiseMode::Poisson, 1e4)] {
            let d = spec.prepare(16, 16).unwrap();
            let y = Var::param(y0.clone());
            let out = d.apply(&y, &mut rng(1), DegradeMode::Differentiable).unwrap();
            let g = grad(&sum(&out), &[y], false).unwrap().remove(0);
            assert!(g.value().norm() > 0.0);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let d = ldct_spec(NoiseMode::Poisson, 1e3).prepare(16, 16).unwrap();
        let y = rand_tensor(&[1, 1, 16, 16], 1).map(|v| v.abs());
        let a = d.apply_tensor(&y, &mut rng(3)).unwrap();
        let b = d.apply_tensor(&y, &mut rng(3)).unwrap();
        let c = d.apply_tensor(&y, &mut rng(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
