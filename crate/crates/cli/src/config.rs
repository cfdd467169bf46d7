use std::path::Path;

use anyhow::{Context, Result};
use lldd_core::coreset::{CoresetMethod, SelectionBudget};
use lldd_core::degrade::DegradationSpec;
use lldd_core::distill::DistillConfig;
use lldd_core::evalharness::{ExperimentConfig, TrainConfig};
use lldd_core::phantom::CohortSpec;
use lldd_core::rng;
use lldd_core::spg::SpgConfig;
use lldd_core::NetworkSpec;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "LLDD_SEED";

/// Seed labels for streams derived from the top-level seed.
mod label {
    pub const COHORT: u64 = 0x636f_686f;
    pub const DISTILL: u64 = 0x6469_7374;
    pub const SELECT: u64 = 0x7365_6c63;
    pub const TRAIN: u64 = 0x7472_6e67;
    pub const EXPORT: u64 = 0x6578_7074;
    pub const EXPERIMENT: u64 = 0x6578_7072;
    pub const TEST_NOISE: u64 = 0x7473_6e73;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub cohort: CohortSpec,
    pub degradation: DegradationSpec,
    pub spg: SpgConfig,
    pub distill: DistillConfig,
    pub coreset: CoresetSection,
    pub eval: EvalSection,
    pub seeds: SeedSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoresetSection {
    pub method: CoresetMethod,
    pub budget: usize,
    pub feature_downsample: usize,
    pub star_patient: usize,
}

impl Default for CoresetSection {
    fn default() -> Self {
        let b = SelectionBudget::default();
        Self {
            method: CoresetMethod::Herding,
            budget: 5,
            feature_downsample: b.feature_downsample,
            star_patient: b.star_patient,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Downstream network for `train`.
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub test_patients: usize,
    pub test_patient_ids: Vec<usize>,
    pub train_patient_ids: Vec<usize>,
    pub eval_slices_per_patient: Option<usize>,
    pub budgets: Vec<usize>,
    pub methods: Vec<CoresetMethod>,
    pub ipp_values: Vec<usize>,
    pub include_full: bool,
    pub ablations: bool,
    pub ablation_ipp: usize,
    pub networks: Vec<NetworkSpec>,
    pub dataset_seeds: usize,
    pub train_seeds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            network: NetworkSpec::srcnn_lite(),
            train: e.train,
            test_patients: e.test_patients,
            test_patient_ids: e.test_patient_ids,
            train_patient_ids: e.train_patient_ids,
            eval_slices_per_patient: e.eval_slices_per_patient,
            budgets: e.budgets,
            methods: e.methods,
            ipp_values: e.ipp_values,
            include_full: e.include_full,
            ablations: e.ablations,
            ablation_ipp: e.ablation_ipp,
            networks: e.networks,
            dataset_seeds: e.dataset_seeds,
            train_seeds: e.train_seeds,
        }
    }
}

/// Per-stage seeds. Unset entries are derived from `seed` on resolution;
/// resolved values replace `cohort.seed` and `distill.seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub seed: u64,
    pub cohort: Option<u64>,
    pub distill: Option<u64>,
    pub select: Option<u64>,
    pub train: Option<u64>,
    pub export: Option<u64>,
    pub experiment: Option<u64>,
    pub test_noise: Option<u64>,
}

/// Seeds after resolution; every stage has an explicit value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub seed: u64,
    pub cohort: u64,
    pub distill: u64,
    pub select: u64,
    pub train: u64,
    pub export: u64,
    pub experiment: u64,
    pub test_noise: u64,
}

/// Top-level seed override from the environment, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .map_err(|_| lldd_core::Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
        )),
        Err(_) => Ok(None),
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| lldd_core::Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        config.resolve(env_seed()?)
    }

    /// Fills every seed and validates each section.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self> {
        if let Some(s) = seed_override {
            self.seeds.seed = s;
        }
        let seeds = self.seeds();
        self.seeds = SeedSection {
            seed: seeds.seed,
            cohort: Some(seeds.cohort),
            distill: Some(seeds.distill),
            select: Some(seeds.select),
            train: Some(seeds.train),
            export: Some(seeds.export),
            experiment: Some(seeds.experiment),
            test_noise: Some(seeds.test_noise),
        };
        self.cohort.seed = seeds.cohort;
        self.distill.seed = seeds.distill;
        self.cohort.validate()?;
        self.degradation.validate()?;
        self.spg.validate()?;
        self.distill.validate()?;
        self.eval.network.validate()?;
        self.eval.train.validate()?;
        if self.coreset.budget == 0 || self.coreset.feature_downsample == 0 {
            return Err(lldd_core::Error::Config("coreset budget and feature_downsample must be ≥ 1".into()).into());
        }
        Ok(self)
    }

    pub fn seeds(&self) -> Seeds {
        let s = &self.seeds;
        let pick = |v: Option<u64>, l: u64| v.unwrap_or_else(|| rng::derive(s.seed, &[l]));
        Seeds {
            seed: s.seed,
            cohort: pick(s.cohort, label::COHORT),
            distill: pick(s.distill, label::DISTILL),
            select: pick(s.select, label::SELECT),
            train: pick(s.train, label::TRAIN),
            export: pick(s.export, label::EXPORT),
            experiment: pick(s.experiment, label::EXPERIMENT),
            test_noise: pick(s.test_noise, label::TEST_NOISE),
        }
    }

    pub fn selection_budget(&self) -> SelectionBudget {
        SelectionBudget {
            k: self.coreset.budget,
            feature_downsample: self.coreset.feature_downsample,
            star_patient: self.coreset.star_patient,
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        let e = &self.eval;
        ExperimentConfig {
            cohort: self.cohort.clone(),
            degradation: self.degradation.clone(),
            test_patient_ids: e.test_patient_ids.clone(),
            test_patients: e.test_patients,
            train_patient_ids: e.train_patient_ids.clone(),
            budgets: e.budgets.clone(),
            methods: e.methods.clone(),
            ipp_values: e.ipp_values.clone(),
            include_full: e.include_full,
            ablations: e.ablations,
            ablation_ipp: e.ablation_ipp,
            spg: self.spg.clone(),
            distill: self.distill.clone(),
            train: e.train,
            networks: e.networks.clone(),
            feature_downsample: self.coreset.feature_downsample,
            dataset_seeds: e.dataset_seeds,
            train_seeds: e.train_seeds,
            eval_slices_per_patient: e.eval_slices_per_patient,
            seed: self.seeds().experiment,
        }
    }

    /// The four-patient configuration used for quick end-to-end checks.
    pub fn smoke() -> Self {
        let e = ExperimentConfig::smoke();
        Self {
            cohort: e.cohort,
            degradation: e.degradation,
            spg: e.spg,
            distill: e.distill,
            coreset: CoresetSection {
                budget: e.budgets[0],
                feature_downsample: e.feature_downsample,
                ..CoresetSection::default()
            },
            eval: EvalSection {
                train: e.train,
                test_patients: e.test_patients,
                budgets: e.budgets,
                methods: e.methods,
                ipp_values: e.ipp_values,
                include_full: e.include_full,
                ablations: e.ablations,
                networks: e.networks,
                dataset_seeds: e.dataset_seeds,
                train_seeds: e.train_seeds,
                ..EvalSection::default()
            },
            seeds: SeedSection::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_makes_every_seed_explicit() {
        let c = RunConfig::default().resolve(None).unwrap();
        let s = &c.seeds;
        for v in [s.cohort, s.distill, s.select, s.train, s.export, s.experiment, s.test_noise] {
            assert!(v.is_some());
        }
        assert_eq!(c.cohort.seed, s.cohort.unwrap());
        assert_eq!(c.distill.seed, s.distill.unwrap());
        // resolving again is a fixed point
        assert_eq!(c.clone().resolve(None).unwrap(), c);
    }

    #[test]
    fn override_changes_derived_seeds_only() {
        let mut raw = RunConfig::default();
        raw.seeds.train = Some(42);
        let a = raw.clone().resolve(None).unwrap();
        let b = raw.resolve(Some(9)).unwrap();
        assert_eq!(b.seeds.seed, 9);
        assert_eq!(a.seeds.train, Some(42));
        assert_eq!(b.seeds.train, Some(42));
        assert_ne!(a.seeds.cohort, b.seeds.cohort);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [r#"{"cohort": {"patientz": 3}}"#, r#"{"extra": 1}"#, r#"{"seeds": {"sed": 1}}"#] {
            assert!(serde_json::from_str::<RunConfig>(doc).is_err(), "{doc}");
        }
        let ok: RunConfig = serde_json::from_str(r#"{"cohort": {"patients": 3}, "coreset": {"method": "k_center"}}"#).unwrap();
        assert_eq!(ok.cohort.patients, 3);
        assert_eq!(ok.coreset.method, CoresetMethod::KCenter);
    }

    #[test]
    fn experiment_mapping_carries_sections() {
        let c = RunConfig::smoke().resolve(Some(3)).unwrap();
        let e = c.experiment();
        assert_eq!(e.cohort, c.cohort);
        assert_eq!(e.seed, c.seeds.experiment.unwrap());
        assert_eq!(e.budgets, c.eval.budgets);
        e.validate().unwrap();
    }
}
