//! Patient-aware gradient matching.
//!
//! For every outer step a network is (re)initialized, and for every patient
//! the task-loss gradient on a real minibatch is compared with the gradient
//! on that patient's synthetic pairs. The cosine distance between the two is
//! backpropagated through the synthetic data into the patient code and the
//! shared convolution.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, dot, flatten, grad, l2_norm, mean, mul, recip, square, sub, Var};
use crate::degrade::{Degradation, DegradeMode};
use crate::error::{Error, Result};
use crate::nets::{self, NetworkSpec, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::phantom::PatientVolume;
use crate::rng::{self, tag};
use crate::spg::DistilledState;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    /// One cosine distance over all parameters flattened together.
    Global,
    /// Mean of per-tensor cosine distances.
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub steps: usize,
    pub optimizer: AdamConfig,
    pub real_batch: usize,
    pub network: NetworkSpec,
    /// Fresh network parameters every `reinit_period` outer steps.
    pub reinit_period: usize,
    /// Patients whose losses are accumulated before one optimizer update.
    pub chunk_size: usize,
    pub matching: MatchingMode,
    /// Optional training of the matching network on synthetic pairs
    /// between reinitializations.
    pub inner_train_steps: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            optimizer: AdamConfig::default(),
            real_batch: 4,
            network: NetworkSpec::srcnn_lite(),
            reinit_period: 1,
            chunk_size: 5,
            matching: MatchingMode::Global,
            inner_train_steps: 0,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.network.validate()?;
        if self.real_batch == 0 || self.reinit_period == 0 || self.chunk_size == 0 {
            return Err(Error::invalid("real_batch, reinit_period and chunk_size must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// Mean matching loss over patients, one entry per outer step.
    pub step_mean: Vec<f64>,
    /// Each patient's loss at the last step.
    pub patient_final: Vec<f64>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,mean_loss\n");
        for (i, v) in self.step_mean.iter().enumerate() {
            let _ = writeln!(s, "{i},{v}");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }

    /// Mean of the first and last `window` steps.
    pub fn head_tail_means(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.step_mean.len();
        if n == 0 || window == 0 {
            return None;
        }
        let w = window.min(n);
        let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((avg(&self.step_mean[..w]), avg(&self.step_mean[n - w..])))
    }
}

/// Gradients of the mean squared error of `φ(x)` against `y` with respect
/// to every parameter, in parameter order.
pub fn task_gradients<T: Element>(
    spec: &NetworkSpec,
    params: &[Var<T>],
    x: &Var<T>,
    y: &Var<T>,
    create_graph: bool,
) -> Result<Vec<Var<T>>> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("pair shapes differ: {:?} vs {:?}", x.shape(), y.shape())));
    }
    let out = nets::forward(spec, params, x)?;
    let loss = mean(&square(&sub(&out, y)?));
    grad(&loss, params, create_graph)
}

fn cosine_distance<T: Element>(real: &Var<T>, syn: &Var<T>) -> Result<Var<T>> {
    if real.value().norm().as_f64() == 0.0 || syn.value().norm().as_f64() == 0.0 {
        warn!("zero-norm gradient in matching loss; using distance 1");
        return Ok(Var::constant(Tensor::ones(vec![1])));
    }
    let cos = mul(&dot(real, syn)?, &recip(&mul(&l2_norm(real), &l2_norm(syn))?))?;
    sub(&Var::constant(Tensor::ones(vec![1])), &cos)
}

/// `1 − cos(g_real, g_syn)`. `g_real` is detached; the result lies in
/// `[0, 2]`.
pub fn matching_loss<T: Element>(g_real: &[Var<T>], g_syn: &[Var<T>], mode: MatchingMode) -> Result<Var<T>> {
    if g_real.len() != g_syn.len() || g_real.is_empty() {
        return Err(Error::Shape(format!(
            "gradient lists differ in length: {} vs {}",
            g_real.len(),
            g_syn.len()
        )));
    }
    if let Some((a, b)) = g_real.iter().zip(g_syn).find(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Shape(format!("gradient shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let real: Vec<Var<T>> = g_real.iter().map(Var::detach).collect();
    match mode {
        MatchingMode::Global => {
            let flat = |v: &[Var<T>]| -> Result<Var<T>> {
                concat(&v.iter().map(flatten).collect::<Result<Vec<_>>>()?, 0)
            };
            cosine_distance(&flat(&real)?, &flat(g_syn)?)
        }
        MatchingMode::PerLayer => {
            let parts = real
                .iter()
                .zip(g_syn)
                .map(|(r, s)| cosine_distance(&flatten(r)?, &flatten(s)?))
                .collect::<Result<Vec<_>>>()?;
            Ok(mean(&concat(&parts, 0)?))
        }
    }
}

/// `[B, 1, h, w]` stack of the given slices.
fn batch_of<T: Element>(patient: &PatientVolume, indices: &[usize]) -> Result<Tensor<T>> {
    let (h, w) = patient.hw();
    let slices = indices
        .iter()
        .map(|&i| patient.slice(i)?.cast::<T>().reshape(vec![1, h, w]))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&slices)
}

/// Draws a real minibatch and its degraded inputs.
fn real_pairs<T: Element>(
    patient: &PatientVolume,
    batch: usize,
    degradation: &Degradation,
    batch_seed: u64,
    noise_seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = patient.slice_count();
    let idx = sample(&mut rng::rng(batch_seed), n, batch.min(n)).into_vec();
    let y = batch_of::<T>(patient, &idx)?;
    let x = degradation.apply_tensor(&y, &mut rng::rng(noise_seed))?;
    Ok((x, y))
}

/// Per-patient result of one outer step: loss value and gradients with
/// respect to (code, conv weight, conv bias, prior).
struct PatientStep<T: Element> {
    loss: f64,
    code: Tensor<T>,
    conv_w: Tensor<T>,
    conv_b: Tensor<T>,
    u: Option<Tensor<T>>,
}

fn patient_step<T: Element>(
    state: &DistilledState<T>,
    patient: &PatientVolume,
    p: usize,
    net: &ParamSet<T>,
    degradation: &Degradation,
    config: &DistillConfig,
    step: usize,
) -> Result<PatientStep<T>> {
    let seed = config.seed;
    let key = [step as u64, p as u64];
    let (x, y) = real_pairs::<T>(
        patient,
        config.real_batch,
        degradation,
        rng::derive(seed, &[tag::REAL_BATCH, key[0], key[1]]),
        rng::derive(seed, &[tag::REAL_NOISE, key[0], key[1]]),
    )?;
    let g_real = task_gradients(
        &config.network,
        &net.to_vars(),
        &Var::constant(x),
        &Var::constant(y),
        false,
    )?;

    let vars = state.vars();
    let mut syn_rng = rng::rng(rng::derive(seed, &[tag::SYN_NOISE, key[0], key[1]]));
    let (xs, ys) = state.make_pairs(&vars, p, &mut syn_rng, DegradeMode::Differentiable)?;
    let g_syn = task_gradients(&config.network, &net.to_vars(), &xs, &ys, true)?;
    let loss = matching_loss(&g_real, &g_syn, config.matching)?;
    let value = loss.item().as_f64();
    if !value.is_finite() {
        return Err(Error::Divergence(format!(
            "matching loss is {value} at step {step}, patient {p} (state checksum {:016x})",
            state.checksum()
        )));
    }
    let mut wrt = vec![vars.codes[p].clone(), vars.conv_w.clone(), vars.conv_b.clone()];
    if state.config.learn_prior {
        wrt.push(vars.u.clone());
    }
    let mut g = grad(&loss, &wrt, false)?.into_iter().map(|v| v.value().clone());
    Ok(PatientStep {
        loss: value,
        code: g.next().unwrap(),
        conv_w: g.next().unwrap(),
        conv_b: g.next().unwrap(),
        u: g.next(),
    })
}

fn add_into<T: Element>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += *b;
    }
}

/// Trains `net` on the state's synthetic pairs for `steps` Adam updates.
fn inner_train<T: Element>(
    state: &DistilledState<T>,
    net: &mut ParamSet<T>,
    config: &DistillConfig,
    step: usize,
) -> Result<()> {
    let mut adam = Adam::new(config.optimizer, net.tensors.iter().map(Tensor::len))?;
    let vars = state.constants();
    for inner in 0..config.inner_train_steps {
        let p = inner % state.patients();
        let mut r = rng::rng(rng::derive(config.seed, &[tag::SYN_NOISE, step as u64, p as u64, inner as u64 + 1]));
        let (x, y) = crate::autodiff::no_grad(|| state.make_pairs(&vars, p, &mut r, DegradeMode::Sampling))?;
        let g = task_gradients(&config.network, &net.to_vars(), &x, &y, false)?;
        for (k, (t, gk)) in net.tensors.iter_mut().zip(&g).enumerate() {
            adam.step(k, t, gk.value())?;
        }
    }
    Ok(())
}

/// Observer invoked after every outer step with `(step, state, trace)`.
pub type StepHook<'a, T> = dyn FnMut(usize, &DistilledState<T>, &LossTrace) -> Result<()> + 'a;

/// Runs gradient matching; see [`distill_with`].
pub fn distill<T: Element>(
    cohort: &[PatientVolume],
    state: DistilledState<T>,
    config: &DistillConfig,
) -> Result<(DistilledState<T>, LossTrace)> {
    distill_with(cohort, state, config, &mut |_, _, _| Ok(()))
}

/// Optimizes codes, convolution (and the prior when enabled) so that
/// synthetic-pair gradients align with real-pair gradients patient by
/// patient. One update is applied per chunk of `chunk_size` patients;
/// patients within a chunk are processed in parallel and reduced in index
/// order, so results do not depend on scheduling.
pub fn distill_with<T: Element>(
    cohort: &[PatientVolume],
    mut state: DistilledState<T>,
    config: &DistillConfig,
    hook: &mut StepHook<'_, T>,
) -> Result<(DistilledState<T>, LossTrace)> {
    config.validate()?;
    state.validate()?;
    let ids: Vec<usize> = cohort.iter().map(|p| p.patient_id).collect();
    if ids != state.patient_ids {
        return Err(Error::invalid(format!(
            "cohort patients {ids:?} do not match distilled state patients {:?}",
            state.patient_ids
        )));
    }
    let (h, w) = state.hw();
    let degradation = state.degradation.prepare(h, w)?;
    let patients = state.patients();
    let learn_prior = state.config.learn_prior;

    let mut slots: Vec<usize> = state.codes.iter().map(Tensor::len).collect();
    slots.extend([state.conv_w.len(), state.conv_b.len(), state.prior.u.len()]);
    let mut adam = Adam::new(config.optimizer, slots)?;
    let (w_slot, b_slot, u_slot) = (patients, patients + 1, patients + 2);

    let mut trace = LossTrace {
        step_mean: Vec::with_capacity(config.steps),
        patient_final: vec![f64::NAN; patients],
    };
    let mut net: Option<ParamSet<T>> = None;
    for step in 0..config.steps {
        if step % config.reinit_period == 0 || net.is_none() {
            let net_seed = rng::derive(config.seed, &[tag::NET_INIT, step as u64]);
            net = Some(nets::build(&config.network, net_seed)?);
        }
        let params = net.as_ref().expect("network initialized above");
        let mut total = 0.0;
        for chunk_start in (0..patients).step_by(config.chunk_size) {
            let chunk: Vec<usize> = (chunk_start..(chunk_start + config.chunk_size).min(patients)).collect();
            let results = chunk
                .par_iter()
                .map(|&p| patient_step(&state, &cohort[p], p, params, &degradation, config, step))
                .collect::<Result<Vec<_>>>()?;

            let mut gw = Tensor::zeros(state.conv_w.shape().to_vec());
            let mut gb = Tensor::zeros(state.conv_b.shape().to_vec());
            let mut gu = learn_prior.then(|| Tensor::zeros(state.prior.u.shape().to_vec()));
            for (&p, r) in chunk.iter().zip(&results) {
                total += r.loss;
                trace.patient_final[p] = r.loss;
                add_into(&mut gw, &r.conv_w);
                add_into(&mut gb, &r.conv_b);
                if let (Some(acc), Some(g)) = (gu.as_mut(), r.u.as_ref()) {
                    add_into(acc, g);
                }
            }
            for (&p, r) in chunk.iter().zip(&results) {
                adam.step(p, &mut state.codes[p], &r.code)?;
            }
            adam.step(w_slot, &mut state.conv_w, &gw)?;
            adam.step(b_slot, &mut state.conv_b, &gb)?;
            if let Some(gu) = gu {
                adam.step(u_slot, &mut state.prior.u, &gu)?;
            }
        }
        trace.step_mean.push(total / patients as f64);
        state.steps += 1;
        if config.inner_train_steps > 0 && (step + 1) % config.reinit_period != 0 {
            if let Some(n) = net.as_mut() {
                inner_train(&state, n, config, step)?;
            }
        }
        hook(step, &state, &trace)?;
    }
    Ok((state, trace))
}

/// Flattened task gradients of every patient on several real minibatches
/// under one fixed network, as rows `(patient_id, gradient)`.
///
/// Minibatch `s` uses the same index and noise seeds for every patient, so
/// patients with identical volumes produce identical rows.
pub fn export_patient_gradients<T: Element>(
    cohort: &[PatientVolume],
    spec: &NetworkSpec,
    degradation: &Degradation,
    seed: u64,
    samples_per_patient: usize,
    batch: usize,
) -> Result<Vec<(usize, Vec<f64>)>> {
    if cohort.is_empty() {
        return Err(Error::invalid("empty cohort"));
    }
    let net: ParamSet<T> = nets::build(spec, rng::derive(seed, &[tag::NET_INIT]))?;
    let rows = cohort
        .par_iter()
        .map(|patient| {
            (0..samples_per_patient)
                .map(|s| {
                    let (x, y) = real_pairs::<T>(
                        patient,
                        batch,
                        degradation,
                        rng::derive(seed, &[tag::REAL_BATCH, s as u64]),
                        rng::derive(seed, &[tag::REAL_NOISE, s as u64]),
                    )?;
                    let g = task_gradients(spec, &net.to_vars(), &Var::constant(x), &Var::constant(y), false)?;
                    let flat: Vec<f64> = g.iter().flat_map(|t| t.value().to_f64_vec()).collect();
                    Ok((patient.patient_id, flat))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

pub fn gradients_to_csv(rows: &[(usize, Vec<f64>)]) -> String {
    let mut s = String::new();
    if let Some((_, g)) = rows.first() {
        s.push_str("patient_id");
        for k in 0..g.len() {
            let _ = write!(s, ",g{k}");
        }
        s.push('\n');
    }
    for (id, g) in rows {
        let _ = write!(s, "{id}");
        for v in g {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}
