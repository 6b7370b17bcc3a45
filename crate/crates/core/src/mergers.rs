//! Task Arithmetic, TIES, DARE and saliency-aware (OBM) merging.
//!
//! Every method consumes task vectors that share one base fingerprint and
//! produces a single combined task vector; adding it back onto the base is
//! [`crate::task_vectors::apply`]'s job. All work is per tensor and
//! independent of thread count.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, SplitMix64};
use crate::saliency::{self, ActivationStats, HessianNorm, LayerMap, SaliencyMap, SaliencyMode};
use crate::task_vectors::TaskVector;
use crate::tensor_store::{sign, Tensor};
use crate::DonorId;

/// Task-arithmetic coefficient for the vision-language donor.
pub const DEFAULT_TA_LAMBDA_VL: f32 = 0.7;
/// Task-arithmetic coefficient for the search-agent donor.
pub const DEFAULT_TA_LAMBDA_SEARCH: f32 = 0.3;
/// Sparsifying methods fix λ = 1 and tune density instead.
pub const DEFAULT_SPARSE_LAMBDA: f32 = 1.0;
pub const DEFAULT_TIES_DENSITY: f64 = 0.7;
pub const DEFAULT_OBM_DENSITY: f64 = 0.7;
pub const DEFAULT_DARE_DENSITY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    #[serde(rename = "ta")]
    TaskArithmetic,
    Ties,
    Dare,
    Obm,
}

impl MergeMethod {
    pub fn default_density(self) -> f64 {
        match self {
            MergeMethod::TaskArithmetic => 1.0,
            MergeMethod::Ties => DEFAULT_TIES_DENSITY,
            MergeMethod::Dare => DEFAULT_DARE_DENSITY,
            MergeMethod::Obm => DEFAULT_OBM_DENSITY,
        }
    }

    pub fn is_sparsifying(self) -> bool {
        self != MergeMethod::TaskArithmetic
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    PerTensor,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    DisjointMean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignWeights {
    Magnitude,
    Saliency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergePolicy {
    pub method: MergeMethod,
    pub lambdas: BTreeMap<DonorId, f32>,
    /// Default density; `donor_density` overrides it per donor.
    pub density: f64,
    pub donor_density: BTreeMap<DonorId, f64>,
    pub scope: Scope,
    pub seed: u64,
    pub aggregation: Aggregation,
}

impl MergePolicy {
    pub fn new(method: MergeMethod) -> Self {
        Self {
            method,
            lambdas: BTreeMap::new(),
            density: method.default_density(),
            donor_density: BTreeMap::new(),
            scope: Scope::PerTensor,
            seed: 0,
            aggregation: Aggregation::DisjointMean,
        }
    }

    /// λ for `donor`: required under task arithmetic, 1 otherwise.
    pub fn lambda(&self, donor: &str) -> Result<f32> {
        match self.lambdas.get(donor) {
            Some(&l) => Ok(l),
            None if self.method.is_sparsifying() => Ok(DEFAULT_SPARSE_LAMBDA),
            None => Err(Error::MissingLambda(donor.into())),
        }
    }

    pub fn density_for(&self, donor: &str) -> f64 {
        self.donor_density.get(donor).copied().unwrap_or(self.density)
    }

    fn resolved_lambdas<'a>(
        &self,
        donors: impl Iterator<Item = &'a DonorId>,
    ) -> Result<BTreeMap<DonorId, f32>> {
        donors.map(|d| Ok((d.clone(), self.lambda(d)?))).collect()
    }
}

pub fn check_density(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::BadDensity(p))
    }
}

/// Number of entries kept out of `n` at density `p`: `ceil(p·n)`, with
/// products within 1e-9 of an integer snapped to it so that e.g.
/// `0.07 · 100` keeps 7 rather than 8.
pub fn retain_count(n: usize, p: f64) -> usize {
    let x = p * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (k as usize).min(n)
}

/// Marks the `k` highest scores; equal scores prefer the lower index.
pub fn top_k_mask(scores: &[f32], k: usize) -> Vec<bool> {
    let n = scores.len();
    let mut mask = vec![false; n];
    if k >= n {
        mask.iter_mut().for_each(|m| *m = true);
        return mask;
    }
    if k == 0 {
        return mask;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let by_rank = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    idx.select_nth_unstable_by(k - 1, by_rank);
    for &i in &idx[..k] {
        mask[i] = true;
    }
    mask
}

fn check_compatible<'a>(vectors: impl IntoIterator<Item = (&'a DonorId, &'a TaskVector)>) -> Result<()> {
    let mut iter = vectors.into_iter();
    let Some((_, first)) = iter.next() else {
        return Err(Error::Recipe(vec!["donors: at least one donor is required".into()]));
    };
    for (donor, tv) in iter {
        if tv.base_fingerprint != first.base_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: first.base_fingerprint.to_string(),
                found: tv.base_fingerprint.to_string(),
            });
        }
        for (name, t) in &first.deltas {
            let other = tv.deltas.get(name).ok_or_else(|| Error::MissingKey {
                key: name.clone(),
                what: format!("task vector of donor '{donor}'"),
            })?;
            if other.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    key: Some(name.clone()),
                    left: t.shape().to_vec(),
                    right: other.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = tv.deltas.keys().find(|k| !first.deltas.contains_key(*k)) {
            return Err(Error::MissingKey {
                key: extra.clone(),
                what: "first donor's task vector".into(),
            });
        }
    }
    Ok(())
}

/// `Σ_d λ_d δ_d`, accumulated in donor-id order.
pub fn merge_ta(
    deltas: &BTreeMap<DonorId, TaskVector>,
    lambdas: &BTreeMap<DonorId, f32>,
) -> Result<TaskVector> {
    check_compatible(deltas)?;
    let weighted: Vec<(&TaskVector, f32)> = deltas
        .iter()
        .map(|(d, tv)| {
            lambdas
                .get(d)
                .map(|&l| (tv, l))
                .ok_or_else(|| Error::MissingLambda(d.clone()))
        })
        .collect::<Result<_>>()?;
    let first = weighted[0].0;
    Ok(first.map_tensors(|name, t| {
        let mut acc = vec![0f32; t.numel()];
        for (tv, lambda) in &weighted {
            for (a, &x) in acc.iter_mut().zip(tv.deltas[name].data()) {
                *a += lambda * x;
            }
        }
        t.with_data(acc)
    }))
}

fn apply_masks(delta: &TaskVector, masks: BTreeMap<&str, Vec<bool>>) -> TaskVector {
    delta.map_tensors(|name, t| {
        let mask = &masks[name];
        t.with_data(
            t.data()
                .iter()
                .zip(mask)
                .map(|(&x, &keep)| if keep { x } else { 0.0 })
                .collect(),
        )
    })
}

/// Joint top-k over several tensors, flat indices following key order.
fn global_masks<'a>(units: &[(&'a str, Vec<f32>)], p: f64) -> BTreeMap<&'a str, Vec<bool>> {
    let all: Vec<f32> = units.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    let mask = top_k_mask(&all, retain_count(all.len(), p));
    let mut out = BTreeMap::new();
    let mut offset = 0;
    for (name, s) in units {
        out.insert(*name, mask[offset..offset + s.len()].to_vec());
        offset += s.len();
    }
    out
}

fn magnitudes(t: &Tensor) -> Vec<f32> {
    t.data().iter().map(|x| x.abs()).collect()
}

/// Keeps the `ceil(p·n)` largest-|δ| entries per scope unit.
pub fn trim_magnitude(delta: &TaskVector, p: f64, scope: Scope) -> Result<TaskVector> {
    check_density(p)?;
    let masks = match scope {
        Scope::PerTensor => delta
            .deltas
            .par_iter()
            .map(|(name, t)| (name.as_str(), top_k_mask(&magnitudes(t), retain_count(t.numel(), p))))
            .collect(),
        Scope::Global => {
            let units: Vec<_> = delta
                .deltas
                .iter()
                .map(|(name, t)| (name.as_str(), magnitudes(t)))
                .collect();
            global_masks(&units, p)
        }
    };
    Ok(apply_masks(delta, masks))
}

/// Keeps the `ceil(p·n)` most salient entries per scope unit. Uniform-mode
/// tensors are always trimmed on their own by magnitude; under global scope
/// the activation-mode tensors form one ranking.
pub fn trim_saliency(
    delta: &TaskVector,
    sal: &SaliencyMap,
    p: f64,
    scope: Scope,
) -> Result<TaskVector> {
    check_density(p)?;
    let mut scored = Vec::with_capacity(delta.deltas.len());
    for (name, t) in &delta.deltas {
        let s = sal
            .scores
            .get(name)
            .ok_or_else(|| Error::MissingSaliency(name.clone()))?;
        if s.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                key: Some(name.clone()),
                left: t.shape().to_vec(),
                right: s.shape().to_vec(),
            });
        }
        let uniform = sal.mode(name) == Some(SaliencyMode::Uniform);
        scored.push((name.as_str(), t, s, uniform));
    }

    let mut masks: BTreeMap<&str, Vec<bool>> = scored
        .par_iter()
        .filter(|(_, _, _, uniform)| *uniform || scope == Scope::PerTensor)
        .map(|&(name, t, s, uniform)| {
            let ranking = if uniform {
                magnitudes(t)
            } else {
                s.data().to_vec()
            };
            (name, top_k_mask(&ranking, retain_count(t.numel(), p)))
        })
        .collect();
    if scope == Scope::Global {
        let units: Vec<_> = scored
            .iter()
            .filter(|(_, _, _, uniform)| !uniform)
            .map(|&(name, _, s, _)| (name, s.data().to_vec()))
            .collect();
        masks.extend(global_masks(&units, p));
    }
    Ok(apply_masks(delta, masks))
}

/// Drop-and-rescale: entry `i` of tensor `name` survives iff the `i`-th
/// draw of `SplitMix64::for_tensor(name, seed)` is below `p`; survivors
/// are divided by `p`.
pub fn dare_sparsify(delta: &TaskVector, p: f64, seed: u64) -> Result<TaskVector> {
    check_density(p)?;
    let scale = p as f32;
    Ok(delta.map_tensors(|name, t| {
        let mut rng = SplitMix64::for_tensor(name, seed);
        t.with_data(
            t.data()
                .iter()
                .map(|&x| if rng.next_f64() < p { x / scale } else { 0.0 })
                .collect(),
        )
    }))
}

/// Seed used for one donor's drop-and-rescale masks, so donors sharing a
/// recipe seed still draw independent masks.
pub fn donor_seed(seed: u64, donor: &str) -> u64 {
    seed ^ fnv1a64(donor.as_bytes())
}

fn elect_at(entries: impl Iterator<Item = (f32, f32)>) -> f32 {
    let mut sum = 0f64;
    let mut any = false;
    let mut best = f32::NEG_INFINITY;
    let (mut best_pos, mut best_neg) = (false, false);
    for (x, w) in entries {
        let sg = sign(x);
        if sg == 0.0 {
            continue;
        }
        any = true;
        sum += f64::from(w) * f64::from(sg);
        if w > best {
            best = w;
            best_pos = sg > 0.0;
            best_neg = sg < 0.0;
        } else if w == best {
            best_pos |= sg > 0.0;
            best_neg |= sg < 0.0;
        }
    }
    if sum > 0.0 {
        1.0
    } else if sum < 0.0 {
        -1.0
    } else if !any {
        0.0
    } else if best_neg && !best_pos {
        -1.0
    } else {
        1.0
    }
}

/// Per-coordinate consensus sign `sign(Σ_d w_d · sign(δ̂_d))` with `w = |δ̂|`
/// or saliency. An exact cancellation goes to the donor with the largest
/// single weight (ties between opposing signs resolve to +). Coordinates
/// where every donor is zero elect 0. Under saliency weights, tensors that
/// are uniform-mode for every donor vote by magnitude.
pub fn elect_signs(
    trimmed: &BTreeMap<DonorId, TaskVector>,
    weights: SignWeights,
    sal: Option<&BTreeMap<DonorId, SaliencyMap>>,
) -> Result<BTreeMap<String, Tensor>> {
    check_compatible(trimmed)?;
    if weights == SignWeights::Saliency {
        let sal = sal.ok_or_else(|| Error::MissingSaliency("<all tensors>".into()))?;
        for (donor, tv) in trimmed {
            let map = sal
                .get(donor)
                .ok_or_else(|| Error::MissingSaliency(format!("donor '{donor}'")))?;
            for name in tv.deltas.keys() {
                if !map.scores.contains_key(name) {
                    return Err(Error::MissingSaliency(name.clone()));
                }
            }
        }
    }
    let first = trimmed.values().next().expect("checked non-empty");
    let signs = first
        .deltas
        .par_iter()
        .map(|(name, t)| {
            let vals: Vec<&[f32]> = trimmed.values().map(|tv| tv.deltas[name].data()).collect();
            let ws: Option<Vec<&[f32]>> = match (weights, sal) {
                (SignWeights::Saliency, Some(sal)) => {
                    let all_uniform = trimmed
                        .keys()
                        .all(|d| sal[d].mode(name) == Some(SaliencyMode::Uniform));
                    (!all_uniform).then(|| trimmed.keys().map(|d| sal[d].scores[name].data()).collect())
                }
                _ => None,
            };
            let data = (0..t.numel())
                .map(|i| {
                    elect_at(vals.iter().enumerate().map(|(d, v)| {
                        let w = match &ws {
                            Some(ws) => ws[d][i],
                            None => v[i].abs(),
                        };
                        (v[i], w)
                    }))
                })
                .collect();
            (name.clone(), t.with_data(data))
        })
        .collect();
    Ok(signs)
}

/// Combines, per coordinate, the λ-scaled donor values whose sign agrees
/// with the elected sign; zero and disagreeing values are excluded.
pub fn aggregate(
    trimmed: &BTreeMap<DonorId, TaskVector>,
    signs: &BTreeMap<String, Tensor>,
    lambdas: &BTreeMap<DonorId, f32>,
    aggregation: Aggregation,
) -> Result<TaskVector> {
    check_compatible(trimmed)?;
    let lams: Vec<f32> = trimmed
        .keys()
        .map(|d| lambdas.get(d).copied().ok_or_else(|| Error::MissingLambda(d.clone())))
        .collect::<Result<_>>()?;
    let first = trimmed.values().next().expect("checked non-empty");
    for (name, t) in &first.deltas {
        let s = signs.get(name).ok_or_else(|| Error::MissingKey {
            key: name.clone(),
            what: "sign map".into(),
        })?;
        if s.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                key: Some(name.clone()),
                left: t.shape().to_vec(),
                right: s.shape().to_vec(),
            });
        }
    }
    Ok(first.map_tensors(|name, t| {
        let vals: Vec<&[f32]> = trimmed.values().map(|tv| tv.deltas[name].data()).collect();
        let sg = signs[name].data();
        let data = (0..t.numel())
            .map(|i| {
                let elected = sg[i];
                if elected == 0.0 {
                    return 0.0;
                }
                let mut acc = 0f32;
                let mut count = 0u32;
                for (v, &lambda) in vals.iter().zip(&lams) {
                    if sign(v[i]) == elected {
                        acc += lambda * v[i];
                        count += 1;
                    }
                }
                match aggregation {
                    Aggregation::Sum => acc,
                    Aggregation::DisjointMean if count > 0 => acc / count as f32,
                    Aggregation::DisjointMean => 0.0,
                }
            })
            .collect();
        t.with_data(data)
    }))
}

/// Wall-clock per pipeline phase, in execution order.
#[derive(Debug, Clone, Default)]
pub struct PhaseTimes(pub Vec<(String, Duration)>);

impl PhaseTimes {
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record(phase, start.elapsed());
        out
    }

    pub fn record(&mut self, phase: &str, elapsed: Duration) {
        match self.0.iter_mut().find(|(p, _)| p == phase) {
            Some((_, d)) => *d += elapsed,
            None => self.0.push((phase.to_string(), elapsed)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub combined: TaskVector,
    /// Per-donor saliency (OBM only).
    pub saliency: BTreeMap<DonorId, SaliencyMap>,
    pub phases: PhaseTimes,
}

pub fn merge_ties(deltas: &BTreeMap<DonorId, TaskVector>, policy: &MergePolicy) -> Result<TaskVector> {
    run_ties(deltas, policy, &mut PhaseTimes::default())
}

fn run_ties(
    deltas: &BTreeMap<DonorId, TaskVector>,
    policy: &MergePolicy,
    phases: &mut PhaseTimes,
) -> Result<TaskVector> {
    check_compatible(deltas)?;
    let lambdas = policy.resolved_lambdas(deltas.keys())?;
    let trimmed = phases.time("trimming", || {
        deltas
            .iter()
            .map(|(d, tv)| Ok((d.clone(), trim_magnitude(tv, policy.density_for(d), policy.scope)?)))
            .collect::<Result<BTreeMap<_, _>>>()
    })?;
    phases.time("consensus", || {
        let signs = elect_signs(&trimmed, SignWeights::Magnitude, None)?;
        aggregate(&trimmed, &signs, &lambdas, policy.aggregation)
    })
}

/// Drop-and-rescale each donor (seeded per donor), then a λ-weighted sum.
pub fn merge_dare(deltas: &BTreeMap<DonorId, TaskVector>, policy: &MergePolicy) -> Result<TaskVector> {
    run_dare(deltas, policy, &mut PhaseTimes::default())
}

fn run_dare(
    deltas: &BTreeMap<DonorId, TaskVector>,
    policy: &MergePolicy,
    phases: &mut PhaseTimes,
) -> Result<TaskVector> {
    check_compatible(deltas)?;
    let lambdas = policy.resolved_lambdas(deltas.keys())?;
    let sparse = phases.time("trimming", || {
        deltas
            .iter()
            .map(|(d, tv)| {
                let seed = donor_seed(policy.seed, d);
                Ok((d.clone(), dare_sparsify(tv, policy.density_for(d), seed)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()
    })?;
    phases.time("combine", || merge_ta(&sparse, &lambdas))
}

/// Saliency trimming followed by saliency-weighted consensus. Each donor is
/// scored with its own statistics; global scope scores with mean-normalized
/// curvature so layers calibrated on different token counts compare.
pub fn merge_obm(
    deltas: &BTreeMap<DonorId, TaskVector>,
    stats: &BTreeMap<DonorId, ActivationStats>,
    policy: &MergePolicy,
) -> Result<TaskVector> {
    Ok(run_obm(deltas, stats, policy, &mut PhaseTimes::default())?.0)
}

fn run_obm(
    deltas: &BTreeMap<DonorId, TaskVector>,
    stats: &BTreeMap<DonorId, ActivationStats>,
    policy: &MergePolicy,
    phases: &mut PhaseTimes,
) -> Result<(TaskVector, BTreeMap<DonorId, SaliencyMap>)> {
    check_compatible(deltas)?;
    let lambdas = policy.resolved_lambdas(deltas.keys())?;
    let norm = match policy.scope {
        Scope::PerTensor => HessianNorm::Raw,
        Scope::Global => HessianNorm::Mean,
    };
    let saliency = phases.time("scoring", || {
        deltas
            .iter()
            .map(|(d, tv)| {
                let st = stats.get(d).ok_or_else(|| {
                    Error::BadStats(format!("no activation statistics for donor '{d}'"))
                })?;
                let map = LayerMap::infer(tv, st);
                Ok((d.clone(), saliency::score(tv, st, &map, norm)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()
    })?;
    let trimmed = phases.time("trimming", || {
        deltas
            .iter()
            .map(|(d, tv)| {
                Ok((
                    d.clone(),
                    trim_saliency(tv, &saliency[d], policy.density_for(d), policy.scope)?,
                ))
            })
            .collect::<Result<BTreeMap<_, _>>>()
    })?;
    let combined = phases.time("consensus", || {
        let signs = elect_signs(&trimmed, SignWeights::Saliency, Some(&saliency))?;
        aggregate(&trimmed, &signs, &lambdas, policy.aggregation)
    })?;
    Ok((combined, saliency))
}

/// Runs the method selected by `policy`. `stats` is only consulted by OBM.
pub fn run(
    deltas: &BTreeMap<DonorId, TaskVector>,
    stats: &BTreeMap<DonorId, ActivationStats>,
    policy: &MergePolicy,
) -> Result<MergeOutcome> {
    for d in deltas.keys() {
        check_density(policy.density_for(d))?;
    }
    let mut phases = PhaseTimes::default();
    let mut saliency = BTreeMap::new();
    let combined = match policy.method {
        MergeMethod::TaskArithmetic => {
            let lambdas = policy.resolved_lambdas(deltas.keys())?;
            phases.time("combine", || merge_ta(deltas, &lambdas))?
        }
        MergeMethod::Ties => run_ties(deltas, policy, &mut phases)?,
        MergeMethod::Dare => run_dare(deltas, policy, &mut phases)?,
        MergeMethod::Obm => {
            let (combined, sal) = run_obm(deltas, stats, policy, &mut phases)?;
            saliency = sal;
            combined
        }
    };
    Ok(MergeOutcome {
        combined,
        saliency,
        phases,
    })
}
