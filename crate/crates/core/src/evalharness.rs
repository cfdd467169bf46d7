//! Image-quality metrics, downstream training and the experiment grid.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, mean, square, sub, Var};
use crate::coreset::{self, CoresetMethod, SelectionBudget, SliceRef};
use crate::degrade::{Degradation, DegradationSpec};
use crate::distill::{distill, DistillConfig};
use crate::error::{Error, Result};
use crate::nets::{self, NetworkSpec, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::phantom::{generate_cohort, CohortSpec, PatientVolume};
use crate::rng::{self, tag};
use crate::spg::{DistilledState, SpgConfig};
use crate::tensor::{Element, Tensor};

/// Returned for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub psnr: f64,
    /// In `[-1, 1]`; tables show it ×100.
    pub ssim: f64,
}

/// `10·log10(max² / mse)`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP)
}

pub fn psnr<T: Element>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    a.expect_same_shape(b)?;
    if max_val <= 0.0 {
        return Err(Error::invalid(format!("max_val must be positive, got {max_val}")));
    }
    if a.is_empty() {
        return Err(Error::Shape("psnr of empty images".into()));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(psnr_from_mse(se / a.len() as f64, max_val))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().enumerate().map(|(t, g)| g * x[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(t, g)| g * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, max_val: f64, taps: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * max_val).powi(2);
    let c2 = (SSIM_K2 * max_val).powi(2);
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, taps);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, taps);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Mean single-scale SSIM over the valid window positions of every
/// trailing `h × w` plane.
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    a.expect_same_shape(b)?;
    if max_val <= 0.0 {
        return Err(Error::invalid(format!("max_val must be positive, got {max_val}")));
    }
    let shape = a.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!("ssim needs images, got shape {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let av = a.to_f64_vec();
    let bv = b.to_f64_vec();
    let planes = av.len() / (h * w);
    let sum: f64 = (0..planes)
        .map(|p| {
            let r = p * h * w..(p + 1) * h * w;
            ssim_plane(&av[r.clone()], &bv[r], h, w, max_val, &taps)
        })
        .sum();
    Ok(sum / planes as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch: 4,
            lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("training batch must be ≥ 1"));
        }
        AdamConfig::with_lr(self.lr).validate()
    }
}

/// Minibatch MSE training with Adam. Parameters start from
/// `nets::build(spec, seed)`; each epoch reshuffles with its own stream.
pub fn train_downstream<T: Element>(
    spec: &NetworkSpec,
    x: &Tensor<T>,
    y: &Tensor<T>,
    config: &TrainConfig,
    seed: u64,
) -> Result<ParamSet<T>> {
    config.validate()?;
    x.expect_same_shape(y)?;
    let n = *x.shape().first().unwrap_or(&0);
    if n == 0 || x.rank() != 4 {
        return Err(Error::invalid(format!("training pairs must be a nonempty [N, 1, h, w] stack, got {:?}", x.shape())));
    }
    let mut params: ParamSet<T> = nets::build(spec, seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), params.tensors.iter().map(Tensor::len))?;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::rng(rng::derive(seed, &[tag::SHUFFLE, epoch as u64])));
        for (b, idx) in order.chunks(config.batch).enumerate() {
            let xb = Var::constant(x.select_axis0(idx)?);
            let yb = Var::constant(y.select_axis0(idx)?);
            let vars = params.to_vars();
            let out = nets::forward(spec, &vars, &xb)?;
            let loss = mean(&square(&sub(&out, &yb)?));
            let lv = loss.item().as_f64();
            if !lv.is_finite() {
                return Err(Error::Divergence(format!(
                    "downstream loss {lv} at epoch {epoch}, batch {b} (lr {}, batch size {})",
                    config.lr, config.batch
                )));
            }
            let g = grad(&loss, &vars, false)?;
            for (k, (t, gk)) in params.tensors.iter_mut().zip(&g).enumerate() {
                adam.step(k, t, gk.value())?;
            }
        }
    }
    Ok(params)
}

/// Network outputs for `x`, processed in chunks to bound memory.
pub fn predict<T: Element>(spec: &NetworkSpec, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().first().unwrap_or(&0);
    let outs = (0..n)
        .collect::<Vec<_>>()
        .chunks(16)
        .map(|idx| {
            let out = nets::infer(spec, params, &x.select_axis0(idx)?)?;
            (0..idx.len()).map(|i| out.index_axis0(i)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&outs.into_iter().flatten().collect::<Vec<_>>())
}

/// Mean per-image PSNR/SSIM (max value 1) of `φ(x)` against `y`.
pub fn evaluate<T: Element>(spec: &NetworkSpec, params: &ParamSet<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<MetricPair> {
    x.expect_same_shape(y)?;
    let n = *x.shape().first().unwrap_or(&0);
    if n == 0 {
        return Err(Error::invalid("empty test set"));
    }
    let pred = predict(spec, params, x)?;
    let mut total = MetricPair { psnr: 0.0, ssim: 0.0 };
    for i in 0..n {
        let (p, t) = (pred.index_axis0(i)?, y.index_axis0(i)?);
        total.psnr += psnr(&p, &t, 1.0)?;
        total.ssim += ssim(&p, &t, 1.0)?;
    }
    Ok(MetricPair {
        psnr: total.psnr / n as f64,
        ssim: total.ssim / n as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub distilled_bytes: usize,
    pub raw_bytes: usize,
    pub rate: f64,
}

/// Serialized state size against the raw cohort stored as f32.
pub fn storage_report<T: Element>(state: &DistilledState<T>, cohort: &[PatientVolume]) -> Result<StorageReport> {
    state.validate()?;
    let raw_bytes: usize = cohort.iter().map(|p| p.slices.len() * 4).sum();
    if raw_bytes == 0 {
        return Err(Error::invalid("empty cohort"));
    }
    let distilled_bytes = state.serialized_size()?;
    Ok(StorageReport {
        distilled_bytes,
        raw_bytes,
        rate: distilled_bytes as f64 / raw_bytes as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub cohort: CohortSpec,
    pub degradation: DegradationSpec,
    /// Held-out patient ids; empty means the last `test_patients` ids.
    pub test_patient_ids: Vec<usize>,
    pub test_patients: usize,
    /// Training patient ids; empty means every non-test patient.
    pub train_patient_ids: Vec<usize>,
    /// Prior sizes; coreset baselines get the same number of images.
    pub budgets: Vec<usize>,
    pub methods: Vec<CoresetMethod>,
    pub ipp_values: Vec<usize>,
    pub include_full: bool,
    /// Adds the noise-initialized and fidelity-free variants.
    pub ablations: bool,
    pub ablation_ipp: usize,
    pub spg: SpgConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    /// Downstream architectures; each row is repeated per network.
    pub networks: Vec<NetworkSpec>,
    pub feature_downsample: usize,
    pub dataset_seeds: usize,
    pub train_seeds: usize,
    /// Optional cap on evaluated slices per test patient.
    pub eval_slices_per_patient: Option<usize>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cohort: CohortSpec {
                patients: 10,
                ..CohortSpec::default()
            },
            degradation: DegradationSpec::default(),
            test_patient_ids: Vec::new(),
            test_patients: 2,
            train_patient_ids: Vec::new(),
            budgets: vec![5, 10],
            methods: CoresetMethod::ALL.to_vec(),
            ipp_values: vec![1, 5],
            include_full: true,
            ablations: false,
            ablation_ipp: 1,
            spg: SpgConfig::default(),
            distill: DistillConfig::default(),
            train: TrainConfig::default(),
            networks: vec![NetworkSpec::srcnn_lite()],
            feature_downsample: 16,
            dataset_seeds: 3,
            train_seeds: 5,
            eval_slices_per_patient: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Four tiny patients, a few steps: exercises every code path quickly.
    pub fn smoke() -> Self {
        Self {
            cohort: CohortSpec {
                patients: 4,
                slices_per_patient: 6,
                height: 32,
                width: 32,
                ..CohortSpec::default()
            },
            test_patients: 1,
            budgets: vec![2],
            ipp_values: vec![1, 2],
            ablations: true,
            distill: DistillConfig {
                steps: 3,
                ..DistillConfig::default()
            },
            train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            feature_downsample: 8,
            dataset_seeds: 1,
            train_seeds: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.degradation.validate()?;
        self.spg.validate()?;
        self.distill.validate()?;
        self.train.validate()?;
        for n in &self.networks {
            n.validate()?;
        }
        if self.networks.is_empty() {
            return Err(Error::Config("at least one downstream network is required".into()));
        }
        if self.dataset_seeds == 0 || self.train_seeds < 2 {
            return Err(Error::Config("need ≥ 1 dataset seed and ≥ 2 training seeds".into()));
        }
        if self.budgets.contains(&0) || self.ipp_values.contains(&0) || self.ablation_ipp == 0 {
            return Err(Error::Config("budgets and IPP values must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Resolves `(train, test)` patient ids against the cohort ids.
    pub fn split(&self, ids: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let test: Vec<usize> = if self.test_patient_ids.is_empty() {
            if self.test_patients >= ids.len() {
                return Err(Error::Config(format!(
                    "{} test patients leave no training patients out of {}",
                    self.test_patients,
                    ids.len()
                )));
            }
            ids[ids.len() - self.test_patients..].to_vec()
        } else {
            self.test_patient_ids.clone()
        };
        let train: Vec<usize> = if self.train_patient_ids.is_empty() {
            ids.iter().copied().filter(|i| !test.contains(i)).collect()
        } else {
            self.train_patient_ids.clone()
        };
        let overlap: Vec<usize> = train.iter().copied().filter(|i| test.contains(i)).collect();
        if !overlap.is_empty() {
            return Err(Error::Overlap(overlap));
        }
        for id in train.iter().chain(&test) {
            if !ids.contains(id) {
                return Err(Error::Config(format!("patient {id} is not in the cohort")));
            }
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("train and test splits must both be nonempty".into()));
        }
        Ok((train, test))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub method: String,
    pub network: String,
    pub budget: Option<usize>,
    pub ipp: Option<usize>,
    pub runs: Vec<MetricPair>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    /// Training pairs per run.
    pub train_pairs: usize,
    pub storage_bytes: usize,
    pub storage_rate: f64,
    /// `|PSNR_full − PSNR_row|` when a full-data row exists.
    pub gap_to_full: Option<f64>,
    /// Patients whose slices reached selection, prior or gradients.
    pub source_patients: Vec<usize>,
}

/// Mean and sample standard deviation; values are sorted first so the
/// result does not depend on run order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl ExperimentRow {
    fn new(method: &str, network: &NetworkSpec, budget: Option<usize>, ipp: Option<usize>, runs: Vec<MetricPair>) -> Self {
        let (pm, ps) = mean_std(&runs.iter().map(|r| r.psnr).collect::<Vec<_>>());
        let (sm, ss) = mean_std(&runs.iter().map(|r| r.ssim).collect::<Vec<_>>());
        Self {
            method: method.to_string(),
            network: network.arch.to_string(),
            budget,
            ipp,
            runs,
            psnr_mean: pm,
            psnr_std: ps,
            ssim_mean: sm,
            ssim_std: ss,
            train_pairs: 0,
            storage_bytes: 0,
            storage_rate: 0.0,
            gap_to_full: None,
            source_patients: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub train_patient_ids: Vec<usize>,
    pub test_patient_ids: Vec<usize>,
    pub test_pairs: usize,
    pub raw_bytes: usize,
    pub rows: Vec<ExperimentRow>,
    pub runtime_secs: f64,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn find(&self, method: &str, network: &str, budget: Option<usize>, ipp: Option<usize>) -> Option<&ExperimentRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.network == network && r.budget == budget && r.ipp == ipp)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "method,network,budget,ipp,runs,psnr_mean,psnr_std,ssim_mean,ssim_std,train_pairs,storage_bytes,storage_rate,gap_to_full\n",
        );
        let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{:.6},{}",
                r.method,
                r.network,
                opt(r.budget),
                opt(r.ipp),
                r.runs.len(),
                r.psnr_mean,
                r.psnr_std,
                r.ssim_mean,
                r.ssim_std,
                r.train_pairs,
                r.storage_bytes,
                r.storage_rate,
                r.gap_to_full.map_or(String::new(), |g| format!("{g:.6}"))
            );
        }
        s
    }

    /// Aligned text table; SSIM is shown ×100.
    pub fn to_table(&self) -> String {
        let header = ["Method", "Net", "NRI", "IPP", "PSNR", "SSIM", "Pairs", "Storage"];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|h| h.to_string()).collect()];
        for r in &self.rows {
            cells.push(vec![
                r.method.clone(),
                r.network.clone(),
                r.budget.map_or("-".into(), |v| v.to_string()),
                r.ipp.map_or("-".into(), |v| v.to_string()),
                format!("{:.2} ± {:.2}", r.psnr_mean, r.psnr_std),
                format!("{:.2} ± {:.2}", 100.0 * r.ssim_mean, 100.0 * r.ssim_std),
                r.train_pairs.to_string(),
                format!("{:.2}%", 100.0 * r.storage_rate),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(v, w)| format!("{v}{}", " ".repeat(w - v.chars().count())))
                .collect();
            let _ = writeln!(s, "{}", line.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(s, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        let _ = writeln!(
            s,
            "\ntrain patients {:?}, test patients {:?} ({} pairs), runtime {:.1}s",
            self.train_patient_ids, self.test_patient_ids, self.test_pairs, self.runtime_secs
        );
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }

    /// Writes `report.csv`, `report.txt` and `report.json` into `dir`.
    pub fn write_all(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        std::fs::write(dir.join("report.txt"), self.to_table())?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Degrades `refs` with one noise stream per slice.
pub fn degraded_pairs<T: Element>(
    cohort: &[PatientVolume],
    refs: &[SliceRef],
    degradation: &Degradation,
    seed: u64,
    stream: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let y: Tensor<T> = coreset::gather(cohort, refs)?;
    let xs = refs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut g = rng::rng(rng::derive(seed, &[stream, r.patient_id as u64, r.slice_id as u64]));
            degradation.apply_tensor(&y.index_axis0(i)?, &mut g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&xs)?, y))
}

struct Grid<'a> {
    config: &'a ExperimentConfig,
    train: Vec<PatientVolume>,
    degradation: Degradation,
    test_x: Tensor<f32>,
    test_y: Tensor<f32>,
}

impl Grid<'_> {
    fn train_seed(&self, t: usize) -> u64 {
        rng::derive(self.config.seed, &[tag::TRAIN, t as u64])
    }

    fn dataset_seed(&self, d: usize) -> u64 {
        rng::derive(self.config.seed, &[tag::DATASET, d as u64])
    }

    fn run_pairs(&self, net: &NetworkSpec, x: &Tensor<f32>, y: &Tensor<f32>, t: usize) -> Result<MetricPair> {
        let params = train_downstream(net, x, y, &self.config.train, self.train_seed(t))?;
        evaluate(net, &params, &self.test_x, &self.test_y)
    }

    fn real_row(&self, label: &str, net: &NetworkSpec, selections: &[Vec<SliceRef>], budget: Option<usize>) -> Result<ExperimentRow> {
        let ts = self.config.train_seeds;
        let runs = (0..selections.len() * ts)
            .into_par_iter()
            .map(|cell| {
                let refs = &selections[cell / ts];
                let (x, y) = degraded_pairs(&self.train, refs, &self.degradation, self.config.seed, tag::REAL_NOISE)?;
                self.run_pairs(net, &x, &y, cell % ts)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut row = ExperimentRow::new(label, net, budget, None, runs);
        let (h, w) = self.train[0].hw();
        row.train_pairs = selections[0].len();
        row.storage_bytes = selections[0].len() * h * w * 4;
        row.source_patients = selections
            .iter()
            .flatten()
            .map(|r| r.patient_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(row)
    }

    fn distilled(&self, spg: &SpgConfig, d: usize) -> Result<DistilledState<f32>> {
        let seed = self.dataset_seed(d);
        let state = DistilledState::init(&self.train, spg, &self.config.degradation, seed)?;
        let config = DistillConfig {
            seed,
            ..self.config.distill.clone()
        };
        let (state, trace) = distill(&self.train, state, &config)?;
        if let Some((head, tail)) = trace.head_tail_means(10) {
            info!("distilled nri={} ipp={} seed#{d}: matching loss {head:.4} -> {tail:.4}", spg.nri, spg.ipp);
        }
        Ok(state)
    }

    fn ours_rows(&self, label: &str, spg: &SpgConfig, raw_bytes: usize) -> Result<Vec<ExperimentRow>> {
        let states = (0..self.config.dataset_seeds)
            .into_par_iter()
            .map(|d| self.distilled(spg, d))
            .collect::<Result<Vec<_>>>()?;
        let ts = self.config.train_seeds;
        let mut rows = Vec::new();
        for net in &self.config.networks {
            let runs = (0..states.len() * ts)
                .into_par_iter()
                .map(|cell| {
                    let state = &states[cell / ts];
                    let t = cell % ts;
                    let (x, y, _) = state.export_pairs(rng::derive(state.seed, &[tag::EXPORT, t as u64]))?;
                    self.run_pairs(net, &x, &y, t)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut row = ExperimentRow::new(label, net, Some(spg.nri), Some(spg.ipp), runs);
            row.train_pairs = states[0].patients() * spg.ipp;
            row.storage_bytes = states[0].serialized_size()?;
            row.storage_rate = row.storage_bytes as f64 / raw_bytes as f64;
            let mut src: BTreeSet<usize> = states.iter().flat_map(|s| s.patient_ids.iter().copied()).collect();
            src.extend(states.iter().map(|s| s.prior.source_patient));
            row.source_patients = src.into_iter().collect();
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Generates the configured phantom cohort and runs the grid on it.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let cohort = generate_cohort(&config.cohort)?;
    run_experiment_on(config, &cohort)
}

/// Full-data baseline, coreset baselines at every budget and distilled
/// data at every `(budget, IPP)`, each trained and evaluated on held-out
/// patients for every seed combination.
pub fn run_experiment_on(config: &ExperimentConfig, cohort: &[PatientVolume]) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let ids: Vec<usize> = cohort.iter().map(|p| p.patient_id).collect();
    let (train_ids, test_ids) = config.split(&ids)?;
    let pick = |ids: &[usize]| -> Vec<PatientVolume> { cohort.iter().filter(|p| ids.contains(&p.patient_id)).cloned().collect() };
    let train = pick(&train_ids);
    let test = pick(&test_ids);
    let (h, w) = train[0].hw();
    let degradation = config.degradation.prepare(h, w)?;

    let test_refs: Vec<SliceRef> = coreset::slice_refs(&test)
        .into_iter()
        .filter(|r| config.eval_slices_per_patient.is_none_or(|cap| r.slice_id < cap))
        .collect();
    let (test_x, test_y) = degraded_pairs(&test, &test_refs, &degradation, config.seed, tag::EVAL_NOISE)?;
    let raw_bytes: usize = train.iter().map(|p| p.slices.len() * 4).sum();
    let grid = Grid {
        config,
        train,
        degradation,
        test_x,
        test_y,
    };

    let mut rows = Vec::new();
    let all_refs = coreset::slice_refs(&grid.train);
    if config.include_full {
        for net in &config.networks {
            info!("full-data baseline, {}", net.arch);
            rows.push(grid.real_row("Full", net, std::slice::from_ref(&all_refs), None)?);
        }
    }
    for &k in &config.budgets {
        for &method in &config.methods {
            let budget = SelectionBudget {
                k,
                feature_downsample: config.feature_downsample,
                star_patient: 0,
            };
            let selections = if method.is_seeded() {
                (0..config.dataset_seeds)
                    .map(|d| coreset::select(method, &grid.train, &budget, grid.dataset_seed(d)))
                    .collect::<Result<Vec<_>>>()?
            } else {
                vec![coreset::select(method, &grid.train, &budget, 0)?]
            };
            for net in &config.networks {
                info!("{} k={k}, {}", method.label(), net.arch);
                rows.push(grid.real_row(method.label(), net, &selections, Some(k))?);
            }
        }
        for &ipp in &config.ipp_values {
            let spg = SpgConfig { nri: k, ipp, ..config.spg.clone() };
            rows.extend(grid.ours_rows("Ours", &spg, raw_bytes)?);
        }
        if config.ablations {
            let base = SpgConfig {
                nri: k,
                ipp: config.ablation_ipp,
                ..config.spg.clone()
            };
            let noise = SpgConfig {
                random_noise_init: true,
                ..base.clone()
            };
            let no_fidelity = SpgConfig {
                fidelity_enabled: false,
                ..base.clone()
            };
            if !config.ipp_values.contains(&config.ablation_ipp) {
                rows.extend(grid.ours_rows("Ours", &base, raw_bytes)?);
            }
            rows.extend(grid.ours_rows("Ours†", &noise, raw_bytes)?);
            rows.extend(grid.ours_rows("Ours‡", &no_fidelity, raw_bytes)?);
        }
    }
    for row in &mut rows {
        if row.storage_rate == 0.0 {
            row.storage_rate = row.storage_bytes as f64 / raw_bytes as f64;
        }
    }
    let full: Vec<(String, f64)> = rows
        .iter()
        .filter(|r| r.method == "Full")
        .map(|r| (r.network.clone(), r.psnr_mean))
        .collect();
    for row in &mut rows {
        row.gap_to_full = full
            .iter()
            .find(|(n, _)| *n == row.network)
            .map(|(_, p)| (p - row.psnr_mean).abs());
    }
    let notes = vec![
        format!(
            "downstream training: Adam lr {}, batch {}, {} epochs",
            config.train.lr, config.train.batch, config.train.epochs
        ),
        format!(
            "{} distillation steps, {} dataset seeds x {} training seeds",
            config.distill.steps, config.dataset_seeds, config.train_seeds
        ),
    ];
    Ok(ExperimentReport {
        config: config.clone(),
        train_patient_ids: train_ids,
        test_patient_ids: test_ids,
        test_pairs: test_refs.len(),
        raw_bytes,
        rows,
        runtime_secs: start.elapsed().as_secs_f64(),
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::Provenance;
    use crate::testutil::rand_tensor;

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr_from_mse(0.01, 1.0), 20.0);
        assert_eq!(psnr_from_mse(0.0001, 1.0), 40.0);
        let a = rand_tensor(&[8, 8], 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &rand_tensor(&[4, 8], 2), 1.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    /// Direct weighted sums over each 11×11 window, no separability.
    fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, l: f64) -> f64 {
        let c = 5.0;
        let mut g = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * 1.5 * 1.5)).exp();
                s += *v;
            }
        }
        let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..=h - 11 {
            for q in 0..=w - 11 {
                let at = |x: &[f64], i: usize, j: usize| x[(r + i) * w + q + j];
                let wsum = |f: &dyn Fn(usize, usize) -> f64| -> f64 {
                    (0..11).flat_map(|i| (0..11).map(move |j| (i, j))).map(|(i, j)| g[i][j] / s * f(i, j)).sum()
                };
                let ma = wsum(&|i, j| at(a, i, j));
                let mb = wsum(&|i, j| at(b, i, j));
                let va = wsum(&|i, j| (at(a, i, j) - ma).powi(2));
                let vb = wsum(&|i, j| (at(b, i, j) - mb).powi(2));
                let cov = wsum(&|i, j| (at(a, i, j) - ma) * (at(b, i, j) - mb));
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        let a = rand_tensor(&[20, 17], 3).map(|v| 0.5 + 0.4 * v);
        let b = a.zip_map(&rand_tensor(&[20, 17], 4), |x, n| x + 0.1 * n).unwrap();
        let got = ssim(&a, &b, 1.0).unwrap();
        let want = ssim_oracle(a.data(), b.data(), 20, 17, 1.0);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        assert!((ssim(&b, &a, 1.0).unwrap() - got).abs() < 1e-12);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
        assert!(ssim(&rand_tensor(&[10, 20], 1), &rand_tensor(&[10, 20], 2), 1.0).is_err());
    }

    #[test]
    fn ssim_constant_images() {
        let (c, d) = (0.4, 0.1);
        let a = Tensor::<f64>::full(vec![16, 16], c);
        let b = Tensor::<f64>::full(vec![16, 16], c + d);
        let c1 = 0.01f64.powi(2);
        let want = (2.0 * c * (c + d) + c1) / (c * c + (c + d) * (c + d) + c1);
        assert!((ssim(&a, &b, 1.0).unwrap() - want).abs() < 1e-12);
    }

    fn pairs(n: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let y = rand_tensor(&[n, 1, 12, 12], seed).map(|v| 0.5 + 0.5 * v);
        let x = y.map(|v| 0.8 * v + 0.05);
        (x, y)
    }

    fn tiny() -> NetworkSpec {
        NetworkSpec {
            arch: crate::nets::Arch::SrcnnLite,
            channels: vec![4, 4],
            kernels: vec![3, 1, 3],
            depth: 3,
        }
    }

    #[test]
    fn overfits_a_single_pair() {
        let (x, y) = pairs(1, 1);
        let cfg = TrainConfig {
            epochs: 400,
            batch: 1,
            lr: 1e-2,
        };
        let p = train_downstream(&tiny(), &x, &y, &cfg, 0).unwrap();
        let out = nets::infer(&tiny(), &p, &x).unwrap();
        let mse = out.zip_map(&y, |a, b| (a - b) * (a - b)).unwrap().mean();
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_is_init() {
        let (x, y) = pairs(5, 2);
        let cfg = TrainConfig {
            epochs: 3,
            batch: 2,
            lr: 1e-3,
        };
        let a = train_downstream(&tiny(), &x, &y, &cfg, 7).unwrap();
        assert_eq!(a, train_downstream(&tiny(), &x, &y, &cfg, 7).unwrap());
        assert_ne!(a, train_downstream(&tiny(), &x, &y, &cfg, 8).unwrap());
        let zero = TrainConfig { epochs: 0, ..cfg };
        assert_eq!(train_downstream(&tiny(), &x, &y, &zero, 7).unwrap(), nets::build(&tiny(), 7).unwrap());
        assert!(train_downstream(&tiny(), &x, &y.select_axis0(&[0]).unwrap(), &cfg, 0).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (x, mut y) = pairs(2, 3);
        y.data_mut()[0] = f64::NAN;
        let err = train_downstream(&tiny(), &x, &y, &TrainConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "{err}");
    }

    #[test]
    fn identity_net_scores_the_cap() {
        let spec = NetworkSpec::edsr_lite();
        let params: ParamSet<f64> = nets::zeros(&spec).unwrap();
        let y = rand_tensor(&[3, 1, 16, 16], 5);
        let m = evaluate(&spec, &params, &y, &y).unwrap();
        assert_eq!(m, MetricPair { psnr: PSNR_CAP, ssim: 1.0 });
        assert!(evaluate(&spec, &params, &y, &y.select_axis0(&[0, 1]).unwrap()).is_err());
    }

    #[test]
    fn mean_std_is_order_free() {
        let v = [0.1, 0.7, 0.3, 1e-9, 5.0];
        let mut r = v;
        r.reverse();
        assert_eq!(mean_std(&v), mean_std(&r));
        assert_eq!(mean_std(&[2.0, 4.0]), (3.0, 2f64.sqrt()));
    }

    #[test]
    fn split_rejects_overlap() {
        let ids = [0, 1, 2, 3];
        let cfg = ExperimentConfig {
            test_patients: 1,
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.split(&ids).unwrap(), (vec![0, 1, 2], vec![3]));
        let bad = ExperimentConfig {
            train_patient_ids: vec![0, 3],
            test_patient_ids: vec![3],
            ..cfg.clone()
        };
        assert!(matches!(bad.split(&ids), Err(Error::Overlap(v)) if v == vec![3]));
        let all = ExperimentConfig { test_patients: 4, ..cfg };
        assert!(all.split(&ids).is_err());
    }

    #[test]
    fn storage_rate_grows_with_prior_and_ipp() {
        let cohort = generate_cohort(&CohortSpec {
            patients: 3,
            slices_per_patient: 12,
            height: 32,
            width: 32,
            ..CohortSpec::default()
        })
        .unwrap();
        let rate = |nri, ipp| {
            let spg = SpgConfig { nri, ipp, ..SpgConfig::default() };
            let s = DistilledState::<f32>::init(&cohort, &spg, &DegradationSpec::sr(4), 0).unwrap();
            storage_report(&s, &cohort).unwrap().rate
        };
        assert!(rate(2, 1) < rate(3, 1));
        assert!(rate(3, 1) < rate(3, 2));
        let empty_prior = SpgConfig { nri: 0, ..SpgConfig::default() };
        assert!(DistilledState::<f32>::init(&cohort, &empty_prior, &DegradationSpec::sr(4), 0).is_err());
        let mut s = DistilledState::<f32>::init(&cohort, &SpgConfig::default(), &DegradationSpec::sr(4), 0).unwrap();
        s.fidelity_indices[0] = 99;
        assert!(storage_report(&s, &cohort).is_err());
    }

    #[test]
    fn smoke_experiment_keeps_test_patients_out() {
        let cfg = ExperimentConfig::smoke();
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.test_patient_ids, vec![3]);
        assert!(!report.rows.is_empty());
        for r in &report.rows {
            assert!(r.runs.len() >= 2);
            assert!(r.source_patients.iter().all(|p| !report.test_patient_ids.contains(p)), "{}", r.method);
            assert!(r.psnr_mean.is_finite() && r.ssim_mean.is_finite());
        }
        for m in ["Full", "Random", "Random*", "Uniform", "Herding", "K-Center", "Ours", "Ours†", "Ours‡"] {
            assert!(report.rows.iter().any(|r| r.method == m), "missing {m}");
        }
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), report.rows.len() + 1);
        assert!(report.to_table().contains("Herding"));
        let dir = tempfile::tempdir().unwrap();
        report.write_all(dir.path()).unwrap();
        let back: ExperimentReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back.rows.len(), report.rows.len());
    }

    #[test]
    fn full_budget_random_equals_full_data() {
        let cohort: Vec<PatientVolume> = generate_cohort(&CohortSpec {
            patients: 3,
            slices_per_patient: 4,
            height: 16,
            width: 16,
            ..CohortSpec::default()
        })
        .unwrap();
        assert!(cohort.iter().all(|p| p.provenance == Provenance::Generated));
        let cfg = ExperimentConfig {
            test_patients: 1,
            budgets: vec![8],
            methods: vec![CoresetMethod::Random],
            ipp_values: vec![],
            feature_downsample: 8,
            dataset_seeds: 1,
            train_seeds: 2,
            train: TrainConfig { epochs: 2, ..TrainConfig::default() },
            ..ExperimentConfig::default()
        };
        let report = run_experiment_on(&cfg, &cohort).unwrap();
        let full = report.find("Full", "srcnn_lite", None, None).unwrap();
        let random = report.find("Random", "srcnn_lite", Some(8), None).unwrap();
        assert!((full.psnr_mean - random.psnr_mean).abs() < 0.5, "{} vs {}", full.psnr_mean, random.psnr_mean);
        assert_eq!(random.train_pairs, full.train_pairs);
    }
}
