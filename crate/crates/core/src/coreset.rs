//! Coreset baselines: real-slice subsets chosen under a fixed budget.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::PlaneMap;
use crate::error::{Error, Result};
use crate::phantom::PatientVolume;
use crate::resample::AreaDownsample;
use crate::rng::{self, tag};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SliceRef {
    pub patient_id: usize,
    pub slice_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoresetMethod {
    Random,
    RandomStar,
    Uniform,
    Herding,
    KCenter,
}

impl CoresetMethod {
    pub const ALL: [CoresetMethod; 5] = [
        CoresetMethod::Random,
        CoresetMethod::RandomStar,
        CoresetMethod::Uniform,
        CoresetMethod::Herding,
        CoresetMethod::KCenter,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CoresetMethod::Random => "Random",
            CoresetMethod::RandomStar => "Random*",
            CoresetMethod::Uniform => "Uniform",
            CoresetMethod::Herding => "Herding",
            CoresetMethod::KCenter => "K-Center",
        }
    }

    /// Whether the selection depends on a seed.
    pub fn is_seeded(self) -> bool {
        matches!(self, CoresetMethod::Random | CoresetMethod::RandomStar)
    }
}

impl std::str::FromStr for CoresetMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(CoresetMethod::Random),
            "random_star" => Ok(CoresetMethod::RandomStar),
            "uniform" => Ok(CoresetMethod::Uniform),
            "herding" => Ok(CoresetMethod::Herding),
            "k_center" | "kcenter" => Ok(CoresetMethod::KCenter),
            other => Err(Error::invalid(format!("unknown coreset method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionBudget {
    pub k: usize,
    /// Side length of the pixel features.
    pub feature_downsample: usize,
    /// Source patient index for Random*.
    pub star_patient: usize,
}

impl Default for SelectionBudget {
    fn default() -> Self {
        Self {
            k: 5,
            feature_downsample: 16,
            star_patient: 0,
        }
    }
}

impl SelectionBudget {
    pub fn new(k: usize) -> Self {
        Self { k, ..Self::default() }
    }
}

/// All slice references in patient-concatenated order.
pub fn slice_refs(cohort: &[PatientVolume]) -> Vec<SliceRef> {
    cohort
        .iter()
        .flat_map(|p| {
            (0..p.slice_count()).map(move |s| SliceRef {
                patient_id: p.patient_id,
                slice_id: s,
            })
        })
        .collect()
}

fn check_budget(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("budget {k} not in 1..={n}")));
    }
    Ok(())
}

pub fn select_random(cohort: &[PatientVolume], k: usize, seed: u64) -> Result<Vec<SliceRef>> {
    let refs = slice_refs(cohort);
    check_budget(k, refs.len())?;
    let mut r = rng::rng(rng::derive(seed, &[tag::SELECT]));
    let mut idx = sample(&mut r, refs.len(), k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| refs[i]).collect())
}

/// Random selection restricted to `cohort[patient]`.
pub fn select_random_star(cohort: &[PatientVolume], k: usize, seed: u64, patient: usize) -> Result<Vec<SliceRef>> {
    let p = cohort
        .get(patient)
        .ok_or_else(|| Error::Index(format!("patient index {patient} not in cohort")))?;
    select_random(std::slice::from_ref(p), k, seed)
}

/// Indices `floor(j·N/k)` over the patient-concatenated ordering.
pub fn select_uniform(cohort: &[PatientVolume], k: usize) -> Result<Vec<SliceRef>> {
    let refs = slice_refs(cohort);
    let n = refs.len();
    check_budget(k, n)?;
    Ok((0..k).map(|j| refs[j * n / k]).collect())
}

/// Pixel features: each slice area-downsampled to `side × side`, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub refs: Vec<SliceRef>,
    pub rows: Vec<Vec<f64>>,
}

impl Features {
    pub fn from_cohort(cohort: &[PatientVolume], side: usize) -> Result<Self> {
        let mut refs = Vec::new();
        let mut rows = Vec::new();
        for p in cohort {
            let (h, w) = p.hw();
            if side == 0 || h % side != 0 || w % side != 0 || h / side != w / side {
                return Err(Error::invalid(format!("feature size {side} does not evenly divide {h}x{w}")));
            }
            let op = AreaDownsample::new((h, w), h / side)?;
            for s in 0..p.slice_count() {
                let src = p.slice(s)?.to_f64_vec();
                let mut dst = vec![0.0; side * side];
                PlaneMap::<f64>::forward_plane(&op, &src, &mut dst);
                refs.push(SliceRef {
                    patient_id: p.patient_id,
                    slice_id: s,
                });
                rows.push(dst);
            }
        }
        Ok(Self { refs, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.rows.first().map_or(0, Vec::len);
        let mut mu = vec![0.0; d];
        for r in &self.rows {
            for (m, v) in mu.iter_mut().zip(r) {
                *m += v;
            }
        }
        let n = self.rows.len() as f64;
        mu.iter_mut().for_each(|m| *m /= n);
        mu
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy herding. Each step adds the point that brings the running coreset
/// mean closest to `μ`, i.e. the argmax of `⟨w, x⟩ − ½‖x‖²` with
/// `w_j = (j+1)·μ − Σ selected`. Returns the chosen row indices and every
/// `w_j`, including the one after the last choice.
pub fn herding_indices(features: &Features, k: usize) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    check_budget(k, features.len())?;
    let mu = features.mean();
    let mut selected_sum = vec![0.0; mu.len()];
    let mut taken = vec![false; features.len()];
    let mut chosen = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k + 1);
    for j in 0..=k {
        let w: Vec<f64> = mu
            .iter()
            .zip(&selected_sum)
            .map(|(m, s)| (j + 1) as f64 * m - s)
            .collect();
        if j == k {
            weights.push(w);
            break;
        }
        let mut best: Option<(f64, usize)> = None;
        for (i, row) in features.rows.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let score = dot(&w, row) - 0.5 * dot(row, row);
            let better = match best {
                None => true,
                Some((b, bi)) => score > b || (score == b && features.refs[i] < features.refs[bi]),
            };
            if better {
                best = Some((score, i));
            }
        }
        let (_, i) = best.expect("budget checked");
        taken[i] = true;
        chosen.push(i);
        for (s, v) in selected_sum.iter_mut().zip(&features.rows[i]) {
            *s += v;
        }
        weights.push(w);
    }
    Ok((chosen, weights))
}

/// Greedy k-center: start at the point nearest the mean, then repeatedly
/// add the point farthest from its nearest center.
pub fn kcenter_indices(features: &Features, k: usize) -> Result<Vec<usize>> {
    check_budget(k, features.len())?;
    let mu = features.mean();
    let pick = |score: &dyn Fn(usize) -> f64, maximize: bool, taken: &[bool]| -> usize {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..features.len() {
            if taken[i] {
                continue;
            }
            let s = score(i);
            let better = match best {
                None => true,
                Some((b, bi)) => {
                    (if maximize { s > b } else { s < b }) || (s == b && features.refs[i] < features.refs[bi])
                }
            };
            if better {
                best = Some((s, i));
            }
        }
        best.expect("budget checked").1
    };
    let mut taken = vec![false; features.len()];
    let first = pick(&|i| dist2(&features.rows[i], &mu), false, &taken);
    taken[first] = true;
    let mut centers = vec![first];
    let mut nearest: Vec<f64> = features.rows.iter().map(|r| dist2(r, &features.rows[first])).collect();
    while centers.len() < k {
        let next = pick(&|i| nearest[i], true, &taken);
        taken[next] = true;
        centers.push(next);
        for (d, r) in nearest.iter_mut().zip(&features.rows) {
            *d = d.min(dist2(r, &features.rows[next]));
        }
    }
    Ok(centers)
}

/// Largest distance from any point to its nearest center.
pub fn covering_radius(features: &Features, centers: &[usize]) -> f64 {
    features
        .rows
        .iter()
        .map(|r| {
            centers
                .iter()
                .map(|&c| dist2(r, &features.rows[c]))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

pub fn select_herding(cohort: &[PatientVolume], budget: &SelectionBudget) -> Result<Vec<SliceRef>> {
    let f = Features::from_cohort(cohort, budget.feature_downsample)?;
    let (idx, _) = herding_indices(&f, budget.k)?;
    Ok(idx.into_iter().map(|i| f.refs[i]).collect())
}

pub fn select_kcenter(cohort: &[PatientVolume], budget: &SelectionBudget) -> Result<Vec<SliceRef>> {
    let f = Features::from_cohort(cohort, budget.feature_downsample)?;
    Ok(kcenter_indices(&f, budget.k)?.into_iter().map(|i| f.refs[i]).collect())
}

pub fn select(
    method: CoresetMethod,
    cohort: &[PatientVolume],
    budget: &SelectionBudget,
    seed: u64,
) -> Result<Vec<SliceRef>> {
    match method {
        CoresetMethod::Random => select_random(cohort, budget.k, seed),
        CoresetMethod::RandomStar => select_random_star(cohort, budget.k, seed, budget.star_patient),
        CoresetMethod::Uniform => select_uniform(cohort, budget.k),
        CoresetMethod::Herding => select_herding(cohort, budget),
        CoresetMethod::KCenter => select_kcenter(cohort, budget),
    }
}

/// `[k, 1, h, w]` stack of the referenced slices.
pub fn gather<T: Element>(cohort: &[PatientVolume], selection: &[SliceRef]) -> Result<Tensor<T>> {
    let slices = selection
        .iter()
        .map(|r| {
            let p = cohort
                .iter()
                .find(|p| p.patient_id == r.patient_id)
                .ok_or_else(|| Error::Index(format!("patient {} not in cohort", r.patient_id)))?;
            let (h, w) = p.hw();
            p.slice(r.slice_id)?.cast::<T>().reshape(vec![1, h, w])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&slices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_cohort, CohortSpec, Provenance};
    use std::collections::HashSet;

    fn cohort() -> Vec<PatientVolume> {
        generate_cohort(&CohortSpec {
            patients: 3,
            slices_per_patient: 8,
            height: 32,
            width: 32,
            seed: 2,
            ..CohortSpec::default()
        })
        .unwrap()
    }

    fn points(rows: &[&[f64]]) -> Features {
        Features {
            refs: (0..rows.len())
                .map(|i| SliceRef {
                    patient_id: 0,
                    slice_id: i,
                })
                .collect(),
            rows: rows.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn exhaustive_budget_selects_everything() {
        let c = cohort();
        let all: HashSet<_> = slice_refs(&c).into_iter().collect();
        let budget = SelectionBudget { k: 24, ..SelectionBudget::default() };
        for m in [CoresetMethod::Random, CoresetMethod::Uniform, CoresetMethod::Herding, CoresetMethod::KCenter] {
            let s: HashSet<_> = select(m, &c, &budget, 1).unwrap().into_iter().collect();
            assert_eq!(s, all, "{m:?}");
        }
        let star = select_random_star(&c, 8, 0, 0).unwrap();
        assert!(star.iter().all(|r| r.patient_id == 0));
        assert!(select_random_star(&c, 9, 0, 0).is_err());
        assert!(select_random(&c, 25, 0).is_err());
        assert!(select_uniform(&c, 0).is_err());
    }

    #[test]
    fn uniform_interval_arithmetic() {
        let single = vec![PatientVolume {
            patient_id: 0,
            slices: Tensor::zeros(vec![10, 16, 16]),
            provenance: Provenance::Generated,
        }];
        let s: Vec<usize> = select_uniform(&single, 5).unwrap().iter().map(|r| r.slice_id).collect();
        assert_eq!(s, vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn selectors_are_deterministic_and_distinct() {
        let c = cohort();
        let budget = SelectionBudget { k: 7, ..SelectionBudget::default() };
        for m in CoresetMethod::ALL {
            let a = select(m, &c, &budget, 4).unwrap();
            assert_eq!(a, select(m, &c, &budget, 4).unwrap());
            assert_eq!(a.len(), 7);
            assert_eq!(a.iter().collect::<HashSet<_>>().len(), 7);
            if !m.is_seeded() {
                assert_eq!(a, select(m, &c, &budget, 99).unwrap());
            }
        }
        assert_ne!(select_random(&c, 7, 1).unwrap(), select_random(&c, 7, 2).unwrap());
    }

    /// Reference herding: try every unchosen point and keep the one whose
    /// inclusion puts the coreset mean nearest `μ`, earliest index on ties.
    fn herding_oracle(rows: &[Vec<f64>], k: usize) -> Vec<usize> {
        let n = rows.len();
        let d = rows[0].len();
        let mu: Vec<f64> = (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
        let mut chosen: Vec<usize> = Vec::new();
        for j in 0..k {
            let best = (0..n)
                .filter(|i| !chosen.contains(i))
                .map(|i| {
                    let mean: Vec<f64> = (0..d)
                        .map(|c| (chosen.iter().map(|&s| rows[s][c]).sum::<f64>() + rows[i][c]) / (j + 1) as f64)
                        .collect();
                    (dist2(&mean, &mu), i)
                })
                .fold(None, |acc: Option<(f64, usize)>, (s, i)| match acc {
                    Some((b, _)) if b <= s => acc,
                    _ => Some((s, i)),
                })
                .unwrap();
            chosen.push(best.1);
        }
        chosen
    }

    #[test]
    fn herding_three_point_fixture() {
        let f = points(&[&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0]]);
        for k in 1..=3 {
            let (idx, _) = herding_indices(&f, k).unwrap();
            assert_eq!(idx, herding_oracle(&f.rows, k));
        }
        assert_eq!(herding_indices(&f, 3).unwrap().0, vec![1, 0, 2]);
    }

    #[test]
    fn herding_matches_oracle_and_keeps_recurrence() {
        let c = cohort();
        let f = Features::from_cohort(&c, 16).unwrap();
        let (idx, weights) = herding_indices(&f, 10).unwrap();
        assert_eq!(idx, herding_oracle(&f.rows, 10));
        let mu = f.mean();
        let mut sum = vec![0.0; mu.len()];
        for (j, w) in weights.iter().enumerate() {
            let want: Vec<f64> = mu.iter().zip(&sum).map(|(m, s)| (j + 1) as f64 * m - s).collect();
            assert_eq!(w, &want);
            if j < idx.len() {
                for (s, v) in sum.iter_mut().zip(&f.rows[idx[j]]) {
                    *s += v;
                }
            }
        }
        // the classic update w ← w + μ − x agrees exactly on dyadic data
        let dy = points(&[&[0.5, 1.0], &[2.0, -0.25], &[1.5, 0.75], &[-1.0, 0.5]]);
        let (di, dw) = herding_indices(&dy, 4).unwrap();
        let dmu = dy.mean();
        let mut w = dmu.clone();
        for (j, &i) in di.iter().enumerate() {
            assert_eq!(dw[j], w);
            w = w.iter().zip(&dmu).zip(&dy.rows[i]).map(|((a, m), x)| a + m - x).collect();
        }
        assert_eq!(dw[4], w);
    }

    #[test]
    fn duplicate_points_reproduce_the_mean() {
        let row: &[f64] = &[0.25, 0.75];
        let f = points(&[row; 5]);
        for k in 1..=5 {
            let (idx, _) = herding_indices(&f, k).unwrap();
            let mean: Vec<f64> = (0..2).map(|c| idx.iter().map(|&i| f.rows[i][c]).sum::<f64>() / k as f64).collect();
            assert_eq!(mean, f.mean());
        }
    }

    #[test]
    fn herding_mean_beats_random_mean() {
        let c = cohort();
        let f = Features::from_cohort(&c, 16).unwrap();
        let mu = f.mean();
        let k = 5;
        let mean_of = |idx: &[usize]| -> Vec<f64> {
            (0..mu.len()).map(|d| idx.iter().map(|&i| f.rows[i][d]).sum::<f64>() / idx.len() as f64).collect()
        };
        let herd = dist2(&mean_of(&herding_indices(&f, k).unwrap().0), &mu).sqrt();
        let random: f64 = (0..100)
            .map(|s| {
                let idx = sample(&mut rng::rng(s), f.len(), k).into_vec();
                dist2(&mean_of(&idx), &mu).sqrt()
            })
            .sum::<f64>()
            / 100.0;
        assert!(herd < random, "herding {herd} vs random {random}");
    }

    #[test]
    fn kcenter_square_corners() {
        let f = points(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let c = kcenter_indices(&f, 2).unwrap();
        assert_eq!(c, vec![0, 3]);
        // exhaustive: opposite corners attain the maximal pairwise distance
        let best = (0..4)
            .flat_map(|a| (a + 1..4).map(move |b| (a, b)))
            .map(|(a, b)| dist2(&f.rows[a], &f.rows[b]))
            .fold(0.0, f64::max);
        assert_eq!(dist2(&f.rows[c[0]], &f.rows[c[1]]), best);
    }

    #[test]
    fn kcenter_is_a_two_approximation() {
        let mut r = rng::rng(17);
        for fixture in 0..25 {
            let rows: Vec<Vec<f64>> = (0..8)
                .map(|_| (0..3).map(|_| rand::Rng::random::<f64>(&mut r) * if fixture % 2 == 0 { 1.0 } else { 10.0 }).collect())
                .collect();
            let f = Features {
                refs: (0..8).map(|i| SliceRef { patient_id: i / 4, slice_id: i % 4 }).collect(),
                rows,
            };
            for k in 1..=8 {
                let greedy = covering_radius(&f, &kcenter_indices(&f, k).unwrap());
                let optimal = (0u32..256)
                    .filter(|m| m.count_ones() as usize == k)
                    .map(|m| {
                        let centers: Vec<usize> = (0..8).filter(|i| m & (1 << i) != 0).collect();
                        covering_radius(&f, &centers)
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!(greedy <= 2.0 * optimal + 1e-12, "fixture {fixture} k {k}: {greedy} vs {optimal}");
            }
        }
    }

    #[test]
    fn gather_stacks_slices() {
        let c = cohort();
        let sel = select_uniform(&c, 4).unwrap();
        let t: Tensor<f32> = gather(&c, &sel).unwrap();
        assert_eq!(t.shape(), [4, 1, 32, 32]);
        assert_eq!(t.index_axis0(1).unwrap().reshape(vec![32, 32]).unwrap(), c[0].slice(6).unwrap());
    }
}
