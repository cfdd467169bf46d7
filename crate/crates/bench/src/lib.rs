//! Deterministic inputs shared by the benchmarks.

use lldd_core::phantom::{generate_cohort, CohortSpec, PatientVolume};
use lldd_core::Tensor;

/// Smooth pseudo-random values in `[0, 1]`, no RNG involved.
pub fn pattern(shape: &[usize], salt: f64) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |i| (0.5 + 0.5 * ((i as f64 * 0.618 + salt) * 12.9898).sin()) as f32)
}

pub fn small_cohort(patients: usize, side: usize) -> Vec<PatientVolume> {
    generate_cohort(&CohortSpec {
        patients,
        slices_per_patient: 8,
        height: side,
        width: side,
        ..CohortSpec::default()
    })
    .expect("valid cohort spec")
}
