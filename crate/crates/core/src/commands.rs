//! File-level operations behind the command-line tool. Each returns a
//! serializable summary; the binary only parses arguments and prints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mergers::{self, retain_count, top_k_mask, MergeMethod, PhaseTimes, DEFAULT_OBM_DENSITY};
use crate::recipe::MergeRecipe;
use crate::saliency::{self, ActivationStats, HessianNorm, LayerMap, SaliencyMap, SaliencyMode};
use crate::task_vectors::{self, compute_delta, Fingerprint, RouteAction, TaskVector};
use crate::tensor_store::{checkpoint_from_bytes, checkpoint_to_bytes, read_checkpoint, Checkpoint, Tensor};
use crate::toynet::{self, CalibrationSet, ToyModel, DEFAULT_CALIBRATION_RECORDS};
use crate::DonorId;

pub const REPORT_VERSION: u32 = 1;
pub const CALIBRATION_BUDGET_KEY: &str = "calibration.budget";
pub const CALIBRATION_RECORDS_KEY: &str = "calibration.records";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct DiffSummary {
    pub tensors: usize,
    pub numel: usize,
    pub nonzero: usize,
    /// Tuned-only keys left out of the delta.
    pub excluded: Vec<String>,
    pub base_fingerprint: String,
}

/// Writes `tuned - base` as a task-vector file.
pub fn diff(tuned: &Path, base: &Path, out: &Path) -> Result<DiffSummary> {
    let tuned = read_checkpoint(tuned)?;
    let base = read_checkpoint(base)?;
    let delta = compute_delta(&tuned, &base)?;
    let bytes = checkpoint_to_bytes(&delta.vector.to_checkpoint())?;
    write_bytes(out, &bytes)?;
    Ok(DiffSummary {
        tensors: delta.vector.deltas.len(),
        numel: delta.vector.numel(),
        nonzero: delta.vector.count_nonzero(),
        excluded: delta.excluded,
        base_fingerprint: delta.vector.base_fingerprint.to_string(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrateSummary {
    pub budget: usize,
    pub records_available: usize,
    pub records_used: usize,
    /// Tokens seen per layer.
    pub layers: BTreeMap<String, u64>,
}

/// One forward pass over the first `budget` records, writing the per-layer
/// input statistics.
pub fn calibrate(model: &Path, data: &Path, out: &Path, budget: Option<usize>) -> Result<CalibrateSummary> {
    let budget = budget.unwrap_or(DEFAULT_CALIBRATION_RECORDS);
    if budget == 0 {
        return Err(Error::EmptyCalibration);
    }
    let model = ToyModel::from_checkpoint(read_checkpoint(model)?)?;
    let data = CalibrationSet::read(data)?;
    let available = data.len();
    let used = CalibrationSet::new(data.records().iter().take(budget).cloned().collect())?;
    let stats = collect_stats(&model, &used)?;
    let metadata = BTreeMap::from([
        (CALIBRATION_BUDGET_KEY.to_string(), budget.to_string()),
        (CALIBRATION_RECORDS_KEY.to_string(), used.len().to_string()),
    ]);
    write_bytes(out, &checkpoint_to_bytes(&stats.to_checkpoint(&metadata))?)?;
    Ok(CalibrateSummary {
        budget,
        records_available: available,
        records_used: used.len(),
        layers: stats
            .layers
            .iter()
            .map(|(k, v)| (k.clone(), v.token_count))
            .collect(),
    })
}

/// Activation statistics of every linear layer; fails if any layer saw no tokens.
pub fn collect_stats(model: &ToyModel, data: &CalibrationSet) -> Result<ActivationStats> {
    let mut stats = ActivationStats::new();
    toynet::forward(model, data, Some(&mut stats))?;
    if let Some((layer, _)) = stats.layers.iter().find(|(_, s)| s.token_count == 0) {
        return Err(Error::NoCoverage(layer.clone()));
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseEntry {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DonorReport {
    pub id: DonorId,
    pub lambda: f32,
    pub density: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub saliency_sha256: Option<String>,
    /// Donor keys without a base counterpart.
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeReport {
    pub report_version: u32,
    pub method: MergeMethod,
    pub scope: mergers::Scope,
    pub aggregation: mergers::Aggregation,
    pub seed: u64,
    pub donors: Vec<DonorReport>,
    pub phases: Vec<PhaseEntry>,
    pub forward_passes: u64,
    /// Action that produced each output tensor.
    pub provenance: BTreeMap<String, String>,
    pub skipped: Vec<String>,
    pub output_sha256: String,
}

impl MergeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn phase_names(&self) -> Vec<&str> {
        self.phases.iter().map(|p| p.name.as_str()).collect()
    }
}

/// Canonical digest of a saliency map: scores as a checkpoint with the
/// per-tensor mode in metadata.
pub fn saliency_digest(map: &SaliencyMap) -> Result<String> {
    let mut ckpt = Checkpoint::new();
    for (k, t) in &map.scores {
        ckpt.insert(k.clone(), t.clone());
    }
    for (k, m) in &map.modes {
        let mode = match m {
            SaliencyMode::Activation => "activation",
            SaliencyMode::Uniform => "uniform",
        };
        ckpt.metadata.insert(format!("mode.{k}"), mode.into());
    }
    Ok(sha256_hex(&checkpoint_to_bytes(&ckpt)?))
}

/// Runs a validated recipe: loads inputs, merges, writes the output and
/// (when the recipe names one) the report.
pub fn merge(recipe: &MergeRecipe) -> Result<MergeReport> {
    let passes_before = toynet::forward_pass_count();
    let mut phases = PhaseTimes::default();
    let policy = recipe.policy();
    let routing = recipe.routing()?;

    let (base, donors) = phases.time("load", || -> Result<_> {
        let base = read_checkpoint(&recipe.base)?;
        let donors = recipe
            .donors
            .iter()
            .map(|d| Ok((d.id.clone(), read_checkpoint(&d.path)?)))
            .collect::<Result<BTreeMap<DonorId, Checkpoint>>>()?;
        Ok((base, donors))
    })?;

    let mut stats = BTreeMap::new();
    let mut stats_sha = BTreeMap::new();
    if recipe.method == MergeMethod::Obm {
        phases.time("stats_load", || -> Result<()> {
            for d in &recipe.donors {
                let path = d.stats_path.as_ref().ok_or_else(|| {
                    Error::Recipe(vec![format!("donor '{}': stats_path required when method is obm", d.id)])
                })?;
                let bytes = read_bytes(path)?;
                let ckpt = checkpoint_from_bytes(&bytes)?;
                stats.insert(d.id.clone(), ActivationStats::from_checkpoint(&ckpt)?);
                stats_sha.insert(d.id.clone(), sha256_hex(&bytes));
            }
            Ok(())
        })?;
    }

    let mut excluded = BTreeMap::new();
    let deltas = phases.time("diff", || {
        donors
            .iter()
            .map(|(id, ckpt)| {
                let delta = compute_delta(ckpt, &base)?;
                excluded.insert(id.clone(), delta.excluded);
                Ok((id.clone(), delta.vector))
            })
            .collect::<Result<BTreeMap<DonorId, TaskVector>>>()
    })?;

    let outcome = mergers::run(&deltas, &stats, &policy)?;
    for (name, d) in &outcome.phases.0 {
        phases.record(name, *d);
    }

    let applied = phases.time("apply", || {
        task_vectors::apply(&base, &outcome.combined, &routing, &donors)
    })?;

    let start = Instant::now();
    let bytes = checkpoint_to_bytes(&applied.checkpoint)?;
    write_bytes(&recipe.output, &bytes)?;
    phases.record("write", start.elapsed());

    let donor_reports = recipe
        .donors
        .iter()
        .map(|d| {
            Ok(DonorReport {
                id: d.id.clone(),
                lambda: policy.lambda(&d.id)?,
                density: if recipe.method == MergeMethod::TaskArithmetic {
                    1.0
                } else {
                    policy.density_for(&d.id)
                },
                stats_sha256: stats_sha.get(&d.id).cloned(),
                saliency_sha256: outcome
                    .saliency
                    .get(&d.id)
                    .map(saliency_digest)
                    .transpose()?,
                excluded: excluded.remove(&d.id).unwrap_or_default(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let report = MergeReport {
        report_version: REPORT_VERSION,
        method: recipe.method,
        scope: recipe.scope,
        aggregation: recipe.aggregation,
        seed: recipe.seed,
        donors: donor_reports,
        phases: phases
            .0
            .iter()
            .map(|(name, d)| PhaseEntry {
                name: name.clone(),
                wall_ms: recipe.report_timings.then(|| ms(*d)),
            })
            .collect(),
        forward_passes: toynet::forward_pass_count() - passes_before,
        provenance: applied
            .provenance
            .iter()
            .map(|(k, a)| (k.clone(), action_label(a)))
            .collect(),
        skipped: applied.skipped,
        output_sha256: sha256_hex(&bytes),
    };
    if let Some(path) = &recipe.report {
        let mut text = report.to_json();
        text.push('\n');
        write_bytes(path, text.as_bytes())?;
    }
    Ok(report)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn action_label(a: &RouteAction) -> String {
    match a {
        RouteAction::CopyFrom(d) => format!("copy_from:{d}"),
        other => other.to_string(),
    }
}

/// Loads and validates a recipe, also checking that its inputs exist.
pub fn validate(path: &Path) -> Result<MergeRecipe> {
    let recipe = MergeRecipe::load(path)?;
    let missing = recipe.missing_inputs();
    if !missing.is_empty() {
        return Err(Error::Recipe(missing));
    }
    Ok(recipe)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorInspection {
    pub name: String,
    pub shape: Vec<usize>,
    pub numel: usize,
    pub nonzero: usize,
    pub density: f64,
    /// Coordinates where both inputs are nonzero, and how many of those disagree in sign.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sign_conflicts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conflict_rate: Option<f64>,
    /// `|top-k by saliency ∩ top-k by magnitude| / k` for activation-scored tensors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_overlap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectReport {
    pub task_vector: bool,
    pub numel: usize,
    pub nonzero: usize,
    pub density: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sign_conflicts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conflict_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_density: Option<f64>,
    pub tensors: Vec<TensorInspection>,
}

#[derive(Debug, Clone, Default)]
pub struct InspectOptions {
    /// Second delta for sign-conflict counts.
    pub other: Option<PathBuf>,
    /// Statistics for the saliency-vs-magnitude rank overlap.
    pub stats: Option<PathBuf>,
    /// Top-k fraction for the rank overlap; defaults to the OBM density.
    pub density: Option<f64>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `(both nonzero, opposite signs)` over paired entries.
pub fn sign_conflicts(a: &Tensor, b: &Tensor) -> (usize, usize) {
    a.data()
        .iter()
        .zip(b.data())
        .filter(|(x, y)| **x != 0.0 && **y != 0.0)
        .fold((0, 0), |(both, conf), (x, y)| {
            (both + 1, conf + usize::from((*x > 0.0) != (*y > 0.0)))
        })
}

pub fn inspect(path: &Path, opts: &InspectOptions) -> Result<InspectReport> {
    let ckpt = read_checkpoint(path)?;
    let is_tv = ckpt.metadata.get(task_vectors::KIND_KEY).map(String::as_str)
        == Some(task_vectors::KIND_TASK_VECTOR);
    let other = opts.other.as_deref().map(read_checkpoint).transpose()?;
    let rank_density = opts.density.unwrap_or(DEFAULT_OBM_DENSITY);
    mergers::check_density(rank_density)?;

    let saliency = match &opts.stats {
        Some(p) => {
            let stats = ActivationStats::from_checkpoint(&read_checkpoint(p)?)?;
            let tv = TaskVector {
                base_fingerprint: Fingerprint::of(&ckpt),
                deltas: ckpt.tensors.clone(),
            };
            let map = LayerMap::infer(&tv, &stats);
            Some(saliency::score(&tv, &stats, &map, HessianNorm::Raw)?)
        }
        None => None,
    };

    let mut tensors = Vec::new();
    let (mut total_both, mut total_conf) = (0, 0);
    for (name, t) in &ckpt.tensors {
        let nonzero = t.count_nonzero();
        let (overlap, conflicts) = match &other {
            Some(o) => {
                let u = o.get(name).ok_or_else(|| Error::MissingKey {
                    key: name.clone(),
                    what: "second input".into(),
                })?;
                if u.shape() != t.shape() {
                    return Err(Error::ShapeMismatch {
                        key: Some(name.clone()),
                        left: t.shape().to_vec(),
                        right: u.shape().to_vec(),
                    });
                }
                let (both, conf) = sign_conflicts(t, u);
                total_both += both;
                total_conf += conf;
                (Some(both), Some(conf))
            }
            None => (None, None),
        };
        let rank_overlap = saliency.as_ref().and_then(|s| {
            if s.mode(name) != Some(SaliencyMode::Activation) {
                return None;
            }
            let k = retain_count(t.numel(), rank_density);
            let by_sal = top_k_mask(s.scores[name].data(), k);
            let by_mag = top_k_mask(t.abs().data(), k);
            let hits = by_sal.iter().zip(&by_mag).filter(|(a, b)| **a && **b).count();
            Some(ratio(hits, k))
        });
        tensors.push(TensorInspection {
            name: name.clone(),
            shape: t.shape().to_vec(),
            numel: t.numel(),
            nonzero,
            density: ratio(nonzero, t.numel()),
            overlap,
            sign_conflicts: conflicts,
            conflict_rate: conflicts.map(|c| ratio(c, overlap.unwrap_or(0))),
            rank_overlap,
        });
    }
    let numel = tensors.iter().map(|t| t.numel).sum();
    let nonzero = tensors.iter().map(|t| t.nonzero).sum();
    Ok(InspectReport {
        task_vector: is_tv,
        numel,
        nonzero,
        density: ratio(nonzero, numel),
        sign_conflicts: other.as_ref().map(|_| total_conf),
        conflict_rate: other.as_ref().map(|_| ratio(total_conf, total_both)),
        rank_density: saliency.as_ref().map(|_| rank_density),
        tensors,
    })
}

impl InspectReport {
    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let kind = if self.task_vector { "task vector" } else { "checkpoint" };
        out.push_str(&format!(
            "{kind}: {} tensors, {} entries, density {:.4}\n",
            self.tensors.len(),
            self.numel,
            self.density
        ));
        if let (Some(c), Some(r)) = (self.sign_conflicts, self.conflict_rate) {
            out.push_str(&format!("sign conflicts: {c} (rate {r:.4})\n"));
        }
        for t in &self.tensors {
            out.push_str(&format!("{:<32} {:>12} density {:.4}", t.name, format!("{:?}", t.shape), t.density));
            if let (Some(c), Some(r)) = (t.sign_conflicts, t.conflict_rate) {
                out.push_str(&format!("  conflicts {c} ({r:.4})"));
            }
            if let Some(o) = t.rank_overlap {
                out.push_str(&format!("  rank overlap {o:.4}"));
            }
            out.push('\n');
        }
        out
    }
}
