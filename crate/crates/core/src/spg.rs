//! Structure-preserving personalized generation of distilled training pairs.
//!
//! A shared prior `U` (slices of one representative patient) is modulated
//! per patient by a learnable code `d_p`, mixed by a patient-agnostic 3×3
//! convolution and, optionally, offset by a fixed fidelity slice `u_p` drawn
//! from `U`. Each output channel is one synthetic high-quality image.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{add, broadcast_scalar_mul, concat, conv2d, reshape, slice, Var};
use crate::degrade::{DegradationSpec, DegradeMode};
use crate::error::{Error, Result};
use crate::phantom::PatientVolume;
use crate::rng::{self, tag, Rng};
use crate::tds::TdsContainer;
use crate::tensor::{DType, Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpgConfig {
    /// Prior size `v` (number of randomly selected images).
    pub nri: usize,
    /// Synthetic images per patient `i`.
    pub ipp: usize,
    /// Code dimension `q`.
    pub code_dim: usize,
    pub random_noise_init: bool,
    pub fidelity_enabled: bool,
    pub learn_prior: bool,
    pub representative_patient: usize,
}

impl Default for SpgConfig {
    fn default() -> Self {
        Self {
            nri: 5,
            ipp: 1,
            code_dim: 2,
            random_noise_init: false,
            fidelity_enabled: true,
            learn_prior: false,
            representative_patient: 0,
        }
    }
}

impl SpgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nri == 0 || self.ipp == 0 || self.code_dim == 0 {
            return Err(Error::invalid("nri, ipp and code_dim must all be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharedPrior<T: Element> {
    /// `[v, h, w]`
    pub u: Tensor<T>,
    pub source_patient: usize,
    /// Empty when the prior was initialized with noise.
    pub slice_indices: Vec<usize>,
}

impl<T: Element> SharedPrior<T> {
    pub fn v(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.u.shape()[1], self.u.shape()[2])
    }
}

/// Builds `U` from `v` distinct slices of `cohort[source]`, or from i.i.d.
/// uniform noise when `random_noise_init` is set.
pub fn init_prior<T: Element>(
    cohort: &[PatientVolume],
    source: usize,
    v: usize,
    seed: u64,
    random_noise_init: bool,
) -> Result<SharedPrior<T>> {
    let patient = cohort
        .get(source)
        .ok_or_else(|| Error::Index(format!("representative patient {source} not in cohort of {}", cohort.len())))?;
    let n = patient.slice_count();
    if v == 0 || v > n {
        return Err(Error::invalid(format!("prior size {v} not in 1..={n}")));
    }
    let (h, w) = patient.hw();
    let mut r = rng::rng(rng::derive(seed, &[tag::PRIOR]));
    if random_noise_init {
        let u = Tensor::from_fn(vec![v, h, w], |_| T::from_f64_lossy(r.random::<f64>()));
        return Ok(SharedPrior {
            u,
            source_patient: patient.patient_id,
            slice_indices: Vec::new(),
        });
    }
    let slice_indices = sample(&mut r, n, v).into_vec();
    let slices = slice_indices
        .iter()
        .map(|&i| patient.slice(i).map(|s| s.cast::<T>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SharedPrior {
        u: Tensor::stack(&slices)?,
        source_patient: patient.patient_id,
        slice_indices,
    })
}

/// The generator shared with downstream users.
#[derive(Clone, Debug, PartialEq)]
pub struct DistilledState<T: Element> {
    pub prior: SharedPrior<T>,
    /// One `[q]` code per patient.
    pub codes: Vec<Tensor<T>>,
    /// `[i, v·q, 3, 3]`
    pub conv_w: Tensor<T>,
    /// `[i]`
    pub conv_b: Tensor<T>,
    pub fidelity_indices: Vec<usize>,
    /// Patient ids in code order.
    pub patient_ids: Vec<usize>,
    pub config: SpgConfig,
    pub degradation: DegradationSpec,
    pub seed: u64,
    pub steps: usize,
}

/// Trainable handles on a state for one autodiff graph.
pub struct SpgVars<T: Element> {
    pub u: Var<T>,
    pub codes: Vec<Var<T>>,
    pub conv_w: Var<T>,
    pub conv_b: Var<T>,
}

impl<T: Element> DistilledState<T> {
    /// Fresh state for `cohort`: prior from the representative patient,
    /// all-ones codes, He-normal × 0.1 convolution, zero bias and one fixed
    /// fidelity index per patient.
    pub fn init(
        cohort: &[PatientVolume],
        config: &SpgConfig,
        degradation: &DegradationSpec,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        degradation.validate()?;
        if cohort.is_empty() {
            return Err(Error::invalid("empty cohort"));
        }
        let prior = init_prior(
            cohort,
            config.representative_patient,
            config.nri,
            seed,
            config.random_noise_init,
        )?;
        let (h, w) = prior.hw();
        if let Some(p) = cohort.iter().find(|p| p.hw() != (h, w)) {
            return Err(Error::Shape(format!(
                "patient {} has slices {:?}, prior is {h}x{w}",
                p.patient_id,
                p.hw()
            )));
        }
        degradation.prepare(h, w)?;
        let (v, q, i) = (config.nri, config.code_dim, config.ipp);
        let mut r = rng::rng(rng::derive(seed, &[tag::PERSONALIZER]));
        let std = 0.1 * (2.0 / (v * q * 9) as f64).sqrt();
        let conv_w = Tensor::from_fn(vec![i, v * q, 3, 3], |_| {
            let z: f64 = StandardNormal.sample(&mut r);
            T::from_f64_lossy(z * std)
        });
        let mut r = rng::rng(rng::derive(seed, &[tag::FIDELITY]));
        let fidelity_indices = cohort.iter().map(|_| r.random_range(0..v)).collect();
        Ok(Self {
            prior,
            codes: vec![Tensor::ones(vec![q]); cohort.len()],
            conv_w,
            conv_b: Tensor::zeros(vec![i]),
            fidelity_indices,
            patient_ids: cohort.iter().map(|p| p.patient_id).collect(),
            config: config.clone(),
            degradation: degradation.clone(),
            seed,
            steps: 0,
        })
    }

    pub fn patients(&self) -> usize {
        self.codes.len()
    }

    pub fn ipp(&self) -> usize {
        self.conv_w.shape()[0]
    }

    pub fn hw(&self) -> (usize, usize) {
        self.prior.hw()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.prior.v();
        let q = self.config.code_dim;
        let p = self.codes.len();
        if self.fidelity_indices.len() != p || self.patient_ids.len() != p {
            return Err(Error::invalid("codes, fidelity indices and patient ids differ in length"));
        }
        if let Some(c) = self.codes.iter().find(|c| c.shape() != [q]) {
            return Err(Error::Shape(format!("code shape {:?}, expected [{q}]", c.shape())));
        }
        if self.conv_w.rank() != 4 || self.conv_w.shape()[1..] != [v * q, 3, 3] {
            return Err(Error::Shape(format!("conv weight shape {:?}", self.conv_w.shape())));
        }
        if self.conv_b.shape() != [self.conv_w.shape()[0]] {
            return Err(Error::Shape(format!("conv bias shape {:?}", self.conv_b.shape())));
        }
        if self.fidelity_indices.iter().any(|&i| i >= v) {
            return Err(Error::Index(format!("fidelity index out of range 0..{v}")));
        }
        Ok(())
    }

    /// `v·h·w + P·q + i·v·q·9 + i + P`
    pub fn element_count(&self) -> usize {
        self.prior.u.len()
            + self.codes.iter().map(Tensor::len).sum::<usize>()
            + self.conv_w.len()
            + self.conv_b.len()
            + self.fidelity_indices.len()
    }

    pub fn checksum(&self) -> u64 {
        self.codes
            .iter()
            .chain([&self.prior.u, &self.conv_w, &self.conv_b])
            .fold(0u64, |acc, t| acc.rotate_left(9) ^ t.checksum())
    }

    /// Leaves for one graph. Codes and convolution are trainable; `U` only
    /// when `learn_prior` is set.
    pub fn vars(&self) -> SpgVars<T> {
        let u = if self.config.learn_prior {
            Var::param(self.prior.u.clone())
        } else {
            Var::constant(self.prior.u.clone())
        };
        SpgVars {
            u,
            codes: self.codes.iter().cloned().map(Var::param).collect(),
            conv_w: Var::param(self.conv_w.clone()),
            conv_b: Var::param(self.conv_b.clone()),
        }
    }

    pub fn constants(&self) -> SpgVars<T> {
        SpgVars {
            u: Var::constant(self.prior.u.clone()),
            codes: self.codes.iter().cloned().map(Var::constant).collect(),
            conv_w: Var::constant(self.conv_w.clone()),
            conv_b: Var::constant(self.conv_b.clone()),
        }
    }

    /// Synthetic high-quality images of patient `p`, `[i, h, w]`.
    pub fn personalize(&self, vars: &SpgVars<T>, p: usize) -> Result<Var<T>> {
        let code = vars
            .codes
            .get(p)
            .ok_or_else(|| Error::Index(format!("patient {p} out of range 0..{}", vars.codes.len())))?;
        let fidelity = self.config.fidelity_enabled.then(|| self.fidelity_indices[p]);
        personalize(&vars.u, code, &vars.conv_w, &vars.conv_b, fidelity)
    }

    /// `(x̃, ỹ)` batches of shape `[i, 1, h, w]` for patient `p`.
    pub fn make_pairs(
        &self,
        vars: &SpgVars<T>,
        p: usize,
        rng: &mut Rng,
        mode: DegradeMode,
    ) -> Result<(Var<T>, Var<T>)> {
        let y = self.personalize(vars, p)?;
        let (h, w) = self.hw();
        let y = reshape(&y, &[self.ipp(), 1, h, w])?;
        let x = self.degradation.prepare(h, w)?.apply(&y, rng, mode)?;
        Ok((x, y))
    }

    /// Materializes every patient's pairs with sampled degradation.
    pub fn export_pairs(&self, seed: u64) -> Result<(Tensor<T>, Tensor<T>, Vec<usize>)> {
        let vars = self.constants();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut ids = Vec::new();
        crate::autodiff::no_grad(|| {
            for p in 0..self.patients() {
                let mut r = rng::rng(rng::derive(seed, &[tag::EXPORT, p as u64]));
                let (x, y) = self.make_pairs(&vars, p, &mut r, DegradeMode::Sampling)?;
                for m in 0..self.ipp() {
                    xs.push(x.value().index_axis0(m)?);
                    ys.push(y.value().index_axis0(m)?);
                    ids.push(self.patient_ids[p]);
                }
            }
            Ok::<_, Error>(())
        })?;
        Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?, ids))
    }

    /// Replaces learnable tensors with updated values, checking shapes.
    pub fn set_learnables(&mut self, codes: Vec<Tensor<T>>, conv_w: Tensor<T>, conv_b: Tensor<T>, u: Option<Tensor<T>>) -> Result<()> {
        if codes.len() != self.codes.len()
            || codes.iter().zip(&self.codes).any(|(a, b)| a.shape() != b.shape())
            || conv_w.shape() != self.conv_w.shape()
            || conv_b.shape() != self.conv_b.shape()
            || u.as_ref().is_some_and(|u| u.shape() != self.prior.u.shape())
        {
            return Err(Error::Shape("learnable update does not match state layout".into()));
        }
        self.codes = codes;
        self.conv_w = conv_w;
        self.conv_b = conv_b;
        if let Some(u) = u {
            self.prior.u = u;
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<TdsContainer> {
        let p = self.patients();
        let q = self.config.code_dim;
        let mut c = TdsContainer::new();
        c.insert("U", self.prior.u.clone())?;
        let flat: Vec<T> = self.codes.iter().flat_map(|t| t.data().iter().copied()).collect();
        c.insert("codes", Tensor::new(vec![p, q], flat)?)?;
        c.insert("conv_w", self.conv_w.clone())?;
        c.insert("conv_b", self.conv_b.clone())?;
        let idx = self.fidelity_indices.iter().map(|&i| T::from_f64_lossy(i as f64)).collect();
        c.insert("fidelity_idx", Tensor::new(vec![p], idx)?)?;
        Ok(c)
    }

    pub fn metadata(&self) -> StateMetadata {
        StateMetadata {
            dtype: T::DTYPE,
            source_patient: self.prior.source_patient,
            slice_indices: self.prior.slice_indices.clone(),
            patient_ids: self.patient_ids.clone(),
            spg: self.config.clone(),
            degradation: self.degradation.clone(),
            seed: self.seed,
            steps: self.steps,
        }
    }

    pub fn from_parts(c: &TdsContainer, meta: StateMetadata) -> Result<Self> {
        let u: Tensor<T> = c.require("U")?;
        let codes: Tensor<T> = c.require("codes")?;
        let conv_w = c.require("conv_w")?;
        let conv_b = c.require("conv_b")?;
        let idx: Tensor<T> = c.require("fidelity_idx")?;
        if u.rank() != 3 || codes.rank() != 2 {
            return Err(Error::Format("U must be rank 3 and codes rank 2".into()));
        }
        let fidelity_indices = idx
            .data()
            .iter()
            .map(|v| {
                let f = v.as_f64();
                (f >= 0.0 && f.fract() == 0.0)
                    .then_some(f as usize)
                    .ok_or_else(|| Error::Format(format!("bad fidelity index {f}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let codes = (0..codes.shape()[0]).map(|i| codes.index_axis0(i)).collect::<Result<Vec<_>>>()?;
        let state = Self {
            prior: SharedPrior {
                u,
                source_patient: meta.source_patient,
                slice_indices: meta.slice_indices,
            },
            codes,
            conv_w,
            conv_b,
            fidelity_indices,
            patient_ids: meta.patient_ids,
            config: meta.spg,
            degradation: meta.degradation,
            seed: meta.seed,
            steps: meta.steps,
        };
        state.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(state)
    }

    /// Writes `path` (tensors) and `path.json` (metadata sidecar).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_container()?.save(path)?;
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&self.metadata())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let c = TdsContainer::load(path)?;
        let meta: StateMetadata = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        Self::from_parts(&c, meta)
    }

    /// Bytes of the serialized tensors plus the metadata sidecar.
    pub fn serialized_size(&self) -> Result<usize> {
        Ok(self.to_container()?.to_bytes().len() + serde_json::to_vec_pretty(&self.metadata())?.len())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateMetadata {
    pub dtype: DType,
    pub source_patient: usize,
    pub slice_indices: Vec<usize>,
    pub patient_ids: Vec<usize>,
    pub spg: SpgConfig,
    pub degradation: DegradationSpec,
    pub seed: u64,
    pub steps: usize,
}

/// `Concat(d¹·U, …, d^q·U)` along the leading axis: `[v, h, w] → [q·v, h, w]`.
pub fn adjust<T: Element>(u: &Var<T>, code: &Var<T>) -> Result<Var<T>> {
    if u.shape().len() != 3 || code.shape().len() != 1 {
        return Err(Error::Shape(format!(
            "adjust expects U [v,h,w] and code [q], got {:?} and {:?}",
            u.shape(),
            code.shape()
        )));
    }
    let parts = (0..code.shape()[0])
        .map(|j| broadcast_scalar_mul(&slice(code, 0, j, 1)?, u))
        .collect::<Result<Vec<_>>>()?;
    concat(&parts, 0)
}

/// `Conv(adjust(U, d); θ) + u`, with `u = U[fidelity]` repeated over the
/// output channels when a fidelity index is given. Returns `[i, h, w]`.
pub fn personalize<T: Element>(
    u: &Var<T>,
    code: &Var<T>,
    conv_w: &Var<T>,
    conv_b: &Var<T>,
    fidelity: Option<usize>,
) -> Result<Var<T>> {
    let a = adjust(u, code)?;
    let s = a.shape().to_vec();
    let x = reshape(&a, &[1, s[0], s[1], s[2]])?;
    let y = conv2d(&x, conv_w, Some(conv_b), (1, 1))?;
    let i = conv_w.shape()[0];
    let y = reshape(&y, &[i, s[1], s[2]])?;
    match fidelity {
        None => Ok(y),
        Some(f) => {
            if f >= u.shape()[0] {
                return Err(Error::Index(format!("fidelity index {f} out of range 0..{}", u.shape()[0])));
            }
            let slice_f = slice(u, 0, f, 1)?;
            add(&y, &concat(&vec![slice_f; i], 0)?)
        }
    }
}
