use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lldd_core::coreset::{self, CoresetMethod, SliceRef};
use lldd_core::distill::{distill, export_patient_gradients, gradients_to_csv};
use lldd_core::evalharness::{degraded_pairs, evaluate, run_experiment_on, train_downstream, MetricPair, TrainConfig};
use lldd_core::phantom::{cohort_from_container, cohort_to_container, generate_cohort, PatientVolume, Provenance};
use lldd_core::rng::tag;
use lldd_core::spg::{sidecar_path, DistilledState};
use lldd_core::tds::TdsContainer;
use lldd_core::{Error, NetworkSpec, ParamSet, Tensor};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Records the resolved configuration next to an output file.
fn write_run_record(out: &Path, config: &RunConfig) -> Result<()> {
    write_json(&with_suffix(out, ".run.json"), config)
}

pub fn load_cohort(config: &RunConfig, path: Option<&Path>) -> Result<Vec<PatientVolume>> {
    match path {
        Some(p) => {
            let c = TdsContainer::load(p).with_context(|| format!("loading cohort {}", p.display()))?;
            Ok(cohort_from_container(&c)?)
        }
        None => Ok(generate_cohort(&config.cohort)?),
    }
}

/// `(train, test)` patients according to the eval section.
pub fn split_cohort(config: &RunConfig, cohort: &[PatientVolume]) -> Result<(Vec<PatientVolume>, Vec<PatientVolume>)> {
    let ids: Vec<usize> = cohort.iter().map(|p| p.patient_id).collect();
    let (train, test) = config.experiment().split(&ids)?;
    let pick = |ids: &[usize]| cohort.iter().filter(|p| ids.contains(&p.patient_id)).cloned().collect();
    Ok((pick(&train), pick(&test)))
}

fn pairs_container(x: Tensor<f32>, y: Tensor<f32>, ids: &[usize]) -> Result<TdsContainer> {
    let mut c = TdsContainer::new();
    c.insert("x", x)?;
    c.insert("y", y)?;
    let ids: Vec<f64> = ids.iter().map(|&i| i as f64).collect();
    c.insert("patient_ids", Tensor::new(vec![ids.len()], ids)?)?;
    Ok(c)
}

fn load_pairs(path: &Path) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let c = TdsContainer::load(path).with_context(|| format!("loading pairs {}", path.display()))?;
    let x: Tensor<f32> = c.require("x")?;
    let y: Tensor<f32> = c.require("y")?;
    if x.shape() != y.shape() || x.rank() != 4 {
        return Err(Error::Format(format!("pairs must be matching [n,1,h,w] tensors, got {:?} and {:?}", x.shape(), y.shape())).into());
    }
    Ok((x, y))
}

pub fn phantom_gen(config: &RunConfig, out: &Path, test_pairs: Option<&Path>) -> Result<()> {
    let cohort = generate_cohort(&config.cohort)?;
    ensure_parent(out)?;
    cohort_to_container(&cohort)?.save(out)?;
    write_run_record(out, config)?;
    info!("wrote {} patients to {}", cohort.len(), out.display());
    if let Some(path) = test_pairs {
        let (_, test) = split_cohort(config, &cohort)?;
        let refs: Vec<SliceRef> = coreset::slice_refs(&test)
            .into_iter()
            .filter(|r| config.eval.eval_slices_per_patient.is_none_or(|cap| r.slice_id < cap))
            .collect();
        let (h, w) = test[0].hw();
        let degradation = config.degradation.prepare(h, w)?;
        let (x, y) = degraded_pairs(&test, &refs, &degradation, config.seeds().test_noise, tag::EVAL_NOISE)?;
        let ids: Vec<usize> = refs.iter().map(|r| r.patient_id).collect();
        ensure_parent(path)?;
        pairs_container(x, y, &ids)?.save(path)?;
        info!("wrote {} held-out pairs to {}", refs.len(), path.display());
    }
    Ok(())
}

pub fn distill_cmd(config: &RunConfig, cohort_path: Option<&Path>, out: &Path) -> Result<()> {
    let cohort = load_cohort(config, cohort_path)?;
    let (train, _) = split_cohort(config, &cohort)?;
    let seed = config.seeds().distill;
    let state = DistilledState::<f32>::init(&train, &config.spg, &config.degradation, seed)?;
    let (state, trace) = distill(&train, state, &config.distill)?;
    ensure_parent(out)?;
    state.save(out)?;
    trace.write_csv(with_suffix(out, ".loss.csv"))?;
    write_run_record(out, config)?;
    if let Some((head, tail)) = trace.head_tail_means(10.min(trace.step_mean.len())) {
        info!("matching loss {head:.4e} -> {tail:.4e}");
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionFile {
    pub method: CoresetMethod,
    pub budget: usize,
    pub seed: u64,
    pub slices: Vec<SliceRef>,
    pub config: RunConfig,
}

pub fn select(config: &RunConfig, method: Option<CoresetMethod>, cohort_path: Option<&Path>, out: &Path) -> Result<()> {
    let cohort = load_cohort(config, cohort_path)?;
    let (train, _) = split_cohort(config, &cohort)?;
    let method = method.unwrap_or(config.coreset.method);
    let seed = config.seeds().select;
    let slices = coreset::select(method, &train, &config.selection_budget(), seed)?;
    write_json(
        out,
        &SelectionFile {
            method,
            budget: config.coreset.budget,
            seed,
            slices,
            config: config.clone(),
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub seed: u64,
    pub pairs: usize,
    pub data: String,
}

/// Training pairs from a distilled state, a coreset selection JSON, or a
/// pairs container.
fn training_pairs(config: &RunConfig, data: &Path, cohort_path: Option<&Path>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if sidecar_path(data).exists() {
        let state = DistilledState::<f32>::load(data).with_context(|| format!("loading state {}", data.display()))?;
        let (x, y, _) = state.export_pairs(config.seeds().export)?;
        return Ok((x, y));
    }
    if data.extension().is_some_and(|e| e == "json") {
        let sel: SelectionFile = serde_json::from_slice(&fs::read(data)?)
            .map_err(|e| Error::Format(format!("{}: {e}", data.display())))?;
        let cohort = load_cohort(config, cohort_path)?;
        let (h, w) = cohort[0].hw();
        let degradation = config.degradation.prepare(h, w)?;
        return Ok(degraded_pairs(&cohort, &sel.slices, &degradation, config.seeds().train, tag::REAL_NOISE)?);
    }
    load_pairs(data)
}

pub fn train(config: &RunConfig, data: &Path, cohort_path: Option<&Path>, out: &Path) -> Result<()> {
    let (x, y) = training_pairs(config, data, cohort_path)?;
    let seed = config.seeds().train;
    let params = train_downstream(&config.eval.network, &x, &y, &config.eval.train, seed)?;
    let mut c = TdsContainer::new();
    for (name, t) in params.names.iter().zip(&params.tensors) {
        c.insert(name.clone(), t.clone())?;
    }
    ensure_parent(out)?;
    c.save(out)?;
    let meta = ModelMeta {
        network: config.eval.network.clone(),
        train: config.eval.train,
        seed,
        pairs: x.shape()[0],
        data: data.display().to_string(),
    };
    write_json(&sidecar_path(out), &meta)?;
    write_run_record(out, config)?;
    info!("trained {} on {} pairs", meta.network.arch, meta.pairs);
    Ok(())
}

pub fn eval(model: &Path, testset: &Path) -> Result<MetricPair> {
    let meta: ModelMeta = serde_json::from_slice(&fs::read(sidecar_path(model)).with_context(|| format!("reading metadata of {}", model.display()))?)
        .map_err(|e| Error::Format(format!("model metadata: {e}")))?;
    let c = TdsContainer::load(model)?;
    let names: Vec<String> = c.names().map(str::to_string).collect();
    let tensors = names.iter().map(|n| c.require::<f32>(n)).collect::<lldd_core::Result<Vec<_>>>()?;
    let params = ParamSet { names, tensors };
    let (x, y) = load_pairs(testset)?;
    Ok(evaluate(&meta.network, &params, &x, &y)?)
}

pub fn experiment(config: &RunConfig, cohort_path: Option<&Path>, outdir: &Path) -> Result<()> {
    let exp = config.experiment();
    exp.validate()?;
    let cohort = load_cohort(config, cohort_path)?;
    let report = run_experiment_on(&exp, &cohort)?;
    report.write_all(outdir)?;
    write_json(&outdir.join("config.json"), config)?;
    println!("{}", report.to_table());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PreviewRecord {
    pub file: String,
    pub patient_id: usize,
    pub index: usize,
    /// `"hq"` (synthetic target) or `"lq"` (its degraded input).
    pub kind: String,
    pub min: f64,
    pub max: f64,
}

/// 8-bit binary PGM with min-max scaling; returns the `(min, max)` used.
pub fn write_pgm(path: &Path, plane: &Tensor<f32>) -> Result<(f64, f64)> {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let vals = plane.to_f64_vec();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = vals.iter().map(|v| ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    f.write_all(&bytes)?;
    Ok((lo, hi))
}

/// Shared artifacts of a distilled state: materialized pairs, per-patient
/// gradients on the synthetic data and image previews. Reads nothing from
/// the cohort.
pub fn export(config: &RunConfig, state_path: &Path, outdir: &Path, samples: usize) -> Result<()> {
    let state = DistilledState::<f32>::load(state_path).with_context(|| format!("loading state {}", state_path.display()))?;
    if samples == 0 {
        bail!(Error::Config("gradient samples must be ≥ 1".into()));
    }
    let (x, y, ids) = state.export_pairs(config.seeds().export)?;
    fs::create_dir_all(outdir)?;
    pairs_container(x.clone(), y.clone(), &ids)?.save(outdir.join("pairs.tds"))?;

    let (h, w) = state.hw();
    let ipp = state.ipp();
    let synthetic: Vec<PatientVolume> = state
        .patient_ids
        .iter()
        .enumerate()
        .map(|(p, &id)| {
            let planes = (0..ipp)
                .map(|m| y.index_axis0(p * ipp + m)?.reshape(vec![h, w]))
                .collect::<lldd_core::Result<Vec<_>>>()?;
            Ok(PatientVolume {
                patient_id: id,
                slices: Tensor::stack(&planes)?,
                provenance: Provenance::Generated,
            })
        })
        .collect::<Result<_>>()?;
    let degradation = state.degradation.prepare(h, w)?;
    let rows = export_patient_gradients::<f32>(&synthetic, &config.distill.network, &degradation, config.seeds().export, samples, ipp.min(4))?;
    fs::write(outdir.join("gradients.csv"), gradients_to_csv(&rows))?;

    let preview_dir = outdir.join("previews");
    fs::create_dir_all(&preview_dir)?;
    let mut records = Vec::new();
    for (n, &id) in ids.iter().enumerate() {
        let m = n % ipp;
        for (kind, t) in [("hq", &y), ("lq", &x)] {
            let file = format!("patient_{id:04}_{m}_{kind}.pgm");
            let (min, max) = write_pgm(&preview_dir.join(&file), &t.index_axis0(n)?.reshape(vec![h, w])?)?;
            records.push(PreviewRecord {
                file,
                patient_id: id,
                index: m,
                kind: kind.into(),
                min,
                max,
            });
        }
    }
    write_json(&preview_dir.join("previews.json"), &records)?;
    write_json(&outdir.join("config.json"), config)?;
    info!("exported {} pairs from {} patients", ids.len(), state.patients());
    Ok(())
}
