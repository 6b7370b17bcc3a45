//! Small feed-forward networks (embedding → linear/ReLU stack) used to
//! collect calibration statistics, evaluate the layer-wise objective
//! `‖ΔW X‖²` directly, and build synthetic experts for end-to-end merges.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::saliency::{ActivationStats, LayerStats};
use crate::tensor_store::{Checkpoint, Tensor};
use crate::DonorId;

/// Metadata key holding the JSON architecture inside a model checkpoint.
pub const ARCHITECTURE_KEY: &str = "toynet.architecture";
pub const EMBED_KEY: &str = "embed";
/// Calibration records per task.
pub const DEFAULT_CALIBRATION_RECORDS: usize = 128;

static FORWARD_PASSES: AtomicU64 = AtomicU64::new(0);

/// Number of [`forward`] calls made by this process.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Embedding {
        rows: usize,
        dim: usize,
        #[serde(default)]
        frozen: bool,
    },
    Linear {
        #[serde(rename = "in")]
        inputs: usize,
        #[serde(rename = "out")]
        outputs: usize,
        #[serde(default = "yes")]
        bias: bool,
        #[serde(default)]
        frozen: bool,
        /// Parameter prefix; defaults to `layers.<index>`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    Relu,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn from_json(text: &str) -> Result<Self> {
        let arch: Architecture =
            serde_json::from_str(text).map_err(|e| Error::BadModel(e.to_string()))?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("architecture serializes")
    }

    /// Parameter prefix of layer `i` (`embed`, `layers.<i>` or the explicit name).
    pub fn layer_key(&self, i: usize) -> Option<String> {
        match &self.layers[i] {
            LayerSpec::Embedding { .. } => Some(EMBED_KEY.to_string()),
            LayerSpec::Linear { name, .. } => {
                Some(name.clone().unwrap_or_else(|| format!("layers.{i}")))
            }
            LayerSpec::Relu => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut width: Option<usize> = None;
        let mut keys = BTreeSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Embedding { rows, dim, .. } => {
                    if i != 0 {
                        return Err(Error::BadModel("embedding must be the first layer".into()));
                    }
                    if *rows == 0 || *dim == 0 {
                        return Err(Error::BadModel("embedding dimensions must be positive".into()));
                    }
                    width = Some(*dim);
                }
                LayerSpec::Linear { inputs, outputs, .. } => {
                    if let Some(w) = width {
                        if w != *inputs {
                            return Err(Error::BadModel(format!(
                                "layer {i} expects width {inputs} but receives {w}"
                            )));
                        }
                    }
                    if *inputs == 0 || *outputs == 0 {
                        return Err(Error::BadModel(format!("layer {i} has a zero width")));
                    }
                    width = Some(*outputs);
                }
                LayerSpec::Relu => {
                    if width.is_none() {
                        return Err(Error::BadModel("relu cannot be the first layer".into()));
                    }
                }
            }
            if let Some(k) = self.layer_key(i) {
                if !keys.insert(k.clone()) {
                    return Err(Error::BadModel(format!("duplicate layer name '{k}'")));
                }
            }
        }
        if width.is_none() {
            return Err(Error::BadModel("architecture has no parameterized layers".into()));
        }
        Ok(())
    }

    /// Width of the vectors entering the first linear layer.
    pub fn input_width(&self) -> usize {
        match self.layers.first() {
            Some(LayerSpec::Embedding { dim, .. }) => *dim,
            Some(LayerSpec::Linear { inputs, .. }) => *inputs,
            _ => 0,
        }
    }

    /// `(name, shape)` of every parameter tensor.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Embedding { rows, dim, .. } => {
                    out.push((format!("{EMBED_KEY}.weight"), vec![*rows, *dim]));
                }
                LayerSpec::Linear {
                    inputs,
                    outputs,
                    bias,
                    ..
                } => {
                    let key = self.layer_key(i).unwrap();
                    out.push((format!("{key}.weight"), vec![*outputs, *inputs]));
                    if *bias {
                        out.push((format!("{key}.bias"), vec![*outputs]));
                    }
                }
                LayerSpec::Relu => {}
            }
        }
        out
    }

    /// Parameter prefixes of frozen layers.
    pub fn frozen_keys(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| {
                matches!(
                    l,
                    LayerSpec::Embedding { frozen: true, .. } | LayerSpec::Linear { frozen: true, .. }
                )
            })
            .filter_map(|(i, _)| self.layer_key(i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub arch: Architecture,
    pub params: Checkpoint,
}

impl ToyModel {
    /// Gaussian init with variance `1/in` (`1` for embeddings), zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Checkpoint::new();
        for (name, shape) in arch.parameter_shapes() {
            let n: usize = shape.iter().product();
            let tensor = if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let std = if name.starts_with(EMBED_KEY) {
                    1.0
                } else {
                    1.0 / (shape[1] as f32).sqrt()
                };
                let data = (0..n).map(|_| std * normal(&mut rng)).collect();
                Tensor::new(shape, data)?
            };
            params.insert(name, tensor);
        }
        Self::new(arch, params)
    }

    pub fn new(arch: Architecture, params: Checkpoint) -> Result<Self> {
        arch.validate()?;
        for (name, shape) in arch.parameter_shapes() {
            let t = params.get(&name).ok_or_else(|| Error::MissingKey {
                key: name.clone(),
                what: "model parameters".into(),
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    key: Some(name),
                    left: shape,
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { arch, params })
    }

    /// Parameters with the architecture embedded in metadata.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.params.clone();
        ckpt.metadata
            .insert(ARCHITECTURE_KEY.into(), self.arch.to_json());
        ckpt
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let arch = ckpt
            .metadata
            .get(ARCHITECTURE_KEY)
            .ok_or_else(|| Error::BadModel(format!("checkpoint has no '{ARCHITECTURE_KEY}' metadata")))
            .and_then(|s| Architecture::from_json(s))?;
        Self::new(arch, ckpt)
    }

    /// Same architecture, different parameter values.
    pub fn with_params(&self, params: Checkpoint) -> Result<Self> {
        Self::new(self.arch.clone(), params)
    }

    fn param(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("validated at construction")
    }
}

fn normal(rng: &mut impl Rng) -> f32 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum Record {
    /// Token ids, embedded by the model's first layer.
    #[serde(rename = "tokens")]
    Tokens(Vec<usize>),
    /// A dense vector entering after the embedding (or at the first linear layer).
    #[serde(rename = "vec")]
    Vector(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    records: Vec<Record>,
}

impl CalibrationSet {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One record per line: `{"tokens": [...]}` or `{"vec": [...]}`.
    /// Blank lines are ignored.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::from_lines(text.lines().map(|l| Ok(l.to_string())))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(
            BufReader::new(file)
                .lines()
                .map(|l| l.map_err(|e| Error::io(path, e))),
        )
    }

    fn from_lines(lines: impl Iterator<Item = Result<String>>) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::BadCalibration {
                line: i + 1,
                reason: e.to_string(),
            })?;
            records.push(rec);
        }
        Self::new(records)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Dense-vector records from the rows of `m`.
    pub fn from_matrix_rows(m: &Matrix) -> Result<Self> {
        Self::new((0..m.rows()).map(|r| Record::Vector(m.row(r).to_vec())).collect())
    }
}

fn input_matrix(model: &ToyModel, batch: &CalibrationSet) -> Result<Matrix> {
    let width = model.arch.input_width();
    let embed = match model.arch.layers.first() {
        Some(LayerSpec::Embedding { rows, .. }) => Some((*rows, model.param("embed.weight"))),
        _ => None,
    };
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in batch.records().iter().enumerate() {
        match rec {
            Record::Vector(v) => {
                if v.len() != width {
                    return Err(Error::BadCalibration {
                        line: i + 1,
                        reason: format!("vector width {} but model expects {width}", v.len()),
                    });
                }
                data.extend_from_slice(v);
                rows += 1;
            }
            Record::Tokens(ids) => {
                let (n_rows, table) = embed.ok_or_else(|| Error::BadCalibration {
                    line: i + 1,
                    reason: "token records need an embedding layer".into(),
                })?;
                for &id in ids {
                    if id >= n_rows {
                        return Err(Error::BadCalibration {
                            line: i + 1,
                            reason: format!("token id {id} outside vocabulary of {n_rows}"),
                        });
                    }
                    data.extend_from_slice(&table.data()[id * width..(id + 1) * width]);
                    rows += 1;
                }
            }
        }
    }
    Ok(Matrix::new(rows, width, data))
}

/// `x Wᵀ + b` for a `T × in` batch.
pub fn linear(x: &Matrix, weight: &Tensor, bias: Option<&Tensor>) -> Matrix {
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    assert_eq!(x.cols(), inp, "linear input width");
    let w = weight.data();
    Matrix::from_fn(x.rows(), out, |t, o| {
        let row = x.row(t);
        let mut acc = 0f32;
        for (a, b) in row.iter().zip(&w[o * inp..(o + 1) * inp]) {
            acc += a * b;
        }
        acc + bias.map_or(0.0, |b| b.data()[o])
    })
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Runs the network over `batch`, calling `observe(layer_key, inputs)` with
/// each linear layer's `T × in` input batch.
pub fn forward_observed(
    model: &ToyModel,
    batch: &CalibrationSet,
    mut observe: impl FnMut(&str, &Matrix) -> Result<()>,
) -> Result<Matrix> {
    FORWARD_PASSES.fetch_add(1, Ordering::SeqCst);
    let mut x = input_matrix(model, batch)?;
    for (i, layer) in model.arch.layers.iter().enumerate() {
        match layer {
            LayerSpec::Embedding { .. } => {}
            LayerSpec::Linear { bias, .. } => {
                let key = model.arch.layer_key(i).unwrap();
                observe(&key, &x)?;
                let b = bias.then(|| model.param(&format!("{key}.bias")));
                x = linear(&x, model.param(&format!("{key}.weight")), b);
            }
            LayerSpec::Relu => x = relu(&x),
        }
    }
    Ok(x)
}

/// Forward pass; with `collect`, every linear layer's inputs are added to
/// the statistics under the layer's key.
pub fn forward(
    model: &ToyModel,
    batch: &CalibrationSet,
    collect: Option<&mut ActivationStats>,
) -> Result<Matrix> {
    match collect {
        Some(stats) => forward_observed(model, batch, |key, x| stats.accumulate(key, x)),
        None => forward_observed(model, batch, |_, _| Ok(())),
    }
}

/// `‖ΔW X‖²_F` with `ΔW` of shape `out × in` and `X` feature-major
/// (`in × T`, one column per token). Accumulated in `f64`.
pub fn layer_loss_change(delta_w: &Tensor, x: &Matrix) -> Result<f64> {
    let &[out, inp] = delta_w.shape() else {
        return Err(Error::InvalidTensor {
            name: String::new(),
            reason: format!("ΔW must be 2-D, got {:?}", delta_w.shape()),
        });
    };
    if x.rows() != inp {
        return Err(Error::ShapeMismatch {
            key: None,
            left: delta_w.shape().to_vec(),
            right: vec![x.rows(), x.cols()],
        });
    }
    let w = delta_w.data();
    let mut total = 0f64;
    for r in 0..out {
        for t in 0..x.cols() {
            let mut acc = 0f64;
            for j in 0..inp {
                acc += f64::from(w[r * inp + j]) * f64::from(x.get(j, t));
            }
            total += acc * acc;
        }
    }
    Ok(total)
}

/// Feature-major inputs (`features × tokens`) with exactly orthogonal
/// feature rows, so `X Xᵀ` is diagonal. Rows are distinct Sylvester-Hadamard
/// rows with random positive scales; token columns are shuffled and
/// sign-flipped, which preserves orthogonality. `tokens` is rounded up to a
/// power of two no smaller than `features`.
pub fn whitened_inputs(features: usize, tokens: usize, seed: u64) -> Matrix {
    let n = tokens.max(features).max(1).next_power_of_two();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hadamard = |r: usize, c: usize| if (r & c).count_ones().is_multiple_of(2) { 1.0f32 } else { -1.0 };
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng);
    let mut cols: Vec<usize> = (0..n).collect();
    cols.shuffle(&mut rng);
    let flips: Vec<f32> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    let scales: Vec<f32> = (0..features).map(|_| 2f32.powf(rng.gen_range(-3.0..3.0))).collect();
    Matrix::from_fn(features, n, |f, t| {
        scales[f] * hadamard(rows[f], cols[t]) * flips[t]
    })
}

/// One planted layer for [`plant_experts`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedLayer {
    /// 2-D weight tensor name, e.g. `layers.2.weight`.
    pub tensor: String,
    /// `|δ|` on every non-planted entry.
    pub background: f32,
    /// `|δ|` on planted entries.
    pub planted: f32,
    /// Input columns planted in expert A and expert B (may overlap).
    pub columns_a: Vec<usize>,
    pub columns_b: Vec<usize>,
    /// Per-feature `Σx²` on planted columns and elsewhere.
    pub hot_sq_sum: f32,
    pub cold_sq_sum: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlantSpec {
    pub layers: Vec<PlantedLayer>,
}

#[derive(Debug, Clone)]
pub struct PlantedExperts {
    pub expert_a: Checkpoint,
    pub expert_b: Checkpoint,
    /// `(tensor, flat index)` whose saliency dominates every other entry.
    pub ground_truth_a: BTreeSet<(String, usize)>,
    pub ground_truth_b: BTreeSet<(String, usize)>,
    /// Statistics realizing the planted curvature, one token per layer.
    pub stats_a: ActivationStats,
    pub stats_b: ActivationStats,
}

/// Adds random-sign deltas to `base`: `planted` magnitude on the named
/// columns, `background` elsewhere, and builds statistics under which the
/// planted entries are the most salient. Fails if `spec` does not make
/// the planted saliency strictly dominant.
pub fn plant_experts(base: &ToyModel, spec: &PlantSpec, seed: u64) -> Result<PlantedExperts> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = PlantedExperts {
        expert_a: base.params.clone(),
        expert_b: base.params.clone(),
        ground_truth_a: BTreeSet::new(),
        ground_truth_b: BTreeSet::new(),
        stats_a: ActivationStats::new(),
        stats_b: ActivationStats::new(),
    };
    for layer in &spec.layers {
        let w = base.params.get(&layer.tensor).ok_or_else(|| {
            Error::BadPlantSpec(format!("unknown tensor '{}'", layer.tensor))
        })?;
        let &[rows, cols] = w.shape() else {
            return Err(Error::BadPlantSpec(format!("'{}' is not 2-D", layer.tensor)));
        };
        let key = layer
            .tensor
            .strip_suffix(".weight")
            .ok_or_else(|| Error::BadPlantSpec(format!("'{}' is not a weight", layer.tensor)))?;
        if let Some(&c) = layer.columns_a.iter().chain(&layer.columns_b).find(|&&c| c >= cols) {
            return Err(Error::BadPlantSpec(format!(
                "column {c} out of range for '{}' with {cols} columns",
                layer.tensor
            )));
        }
        if !(layer.hot_sq_sum >= 0.0 && layer.cold_sq_sum >= 0.0) {
            return Err(Error::BadPlantSpec("sq_sum values must be non-negative".into()));
        }
        let planted_s = layer.hot_sq_sum * layer.planted * layer.planted;
        let background_s = layer.cold_sq_sum * layer.background * layer.background;
        let planted_any = !(layer.columns_a.is_empty() && layer.columns_b.is_empty());
        if planted_any && planted_s <= background_s {
            return Err(Error::BadPlantSpec(format!(
                "planted saliency {planted_s} does not exceed background {background_s} in '{}'",
                layer.tensor
            )));
        }

        for (columns, expert, truth, stats) in [
            (&layer.columns_a, &mut out.expert_a, &mut out.ground_truth_a, &mut out.stats_a),
            (&layer.columns_b, &mut out.expert_b, &mut out.ground_truth_b, &mut out.stats_b),
        ] {
            let hot: BTreeSet<usize> = columns.iter().copied().collect();
            let mut data = w.data().to_vec();
            for r in 0..rows {
                for c in 0..cols {
                    let mag = if hot.contains(&c) {
                        truth.insert((layer.tensor.clone(), r * cols + c));
                        layer.planted
                    } else {
                        layer.background
                    };
                    let sgn = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    data[r * cols + c] += sgn * mag;
                }
            }
            expert.insert(layer.tensor.clone(), w.with_data(data));
            let sq_sum = (0..cols)
                .map(|c| if hot.contains(&c) { layer.hot_sq_sum } else { layer.cold_sq_sum })
                .collect();
            stats.layers.insert(key.to_string(), LayerStats { sq_sum, token_count: 1 });
        }
    }
    Ok(out)
}

/// Settings for [`composition_scenario`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub output: usize,
    pub calibration_records: usize,
    pub eval_records: usize,
    /// Std of the dense expert perturbations.
    pub delta_scale: f32,
    /// Shared-factor loading; features are correlated when > 0.
    pub correlation: f32,
    /// Feature scale on a task's own half of the inputs, and on the other half.
    pub hot_scale: f32,
    pub cold_scale: f32,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: 16,
            output: 8,
            calibration_records: DEFAULT_CALIBRATION_RECORDS,
            eval_records: 256,
            delta_scale: 0.2,
            correlation: 0.6,
            hot_scale: 3.0,
            cold_scale: 0.3,
        }
    }
}

/// A shared base, two least-squares experts and their task data. Each
/// expert's task is to reproduce its own outputs, so an expert has zero
/// loss on its task and any merged model's loss is a closed-form MSE.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub base: ToyModel,
    pub experts: BTreeMap<DonorId, ToyModel>,
    pub calibration: BTreeMap<DonorId, CalibrationSet>,
    pub eval: BTreeMap<DonorId, CalibrationSet>,
}

pub const SCENARIO_DONORS: [&str; 2] = ["search", "vl"];

/// Architecture used by [`composition_scenario`]: a frozen `front` block
/// followed by a trainable two-layer ReLU network.
pub fn scenario_architecture(cfg: &CompositionConfig) -> Architecture {
    Architecture {
        layers: vec![
            LayerSpec::Linear {
                inputs: cfg.input_dim,
                outputs: cfg.hidden,
                bias: true,
                frozen: true,
                name: Some("front".into()),
            },
            LayerSpec::Relu,
            LayerSpec::Linear {
                inputs: cfg.hidden,
                outputs: cfg.hidden,
                bias: true,
                frozen: false,
                name: None,
            },
            LayerSpec::Relu,
            LayerSpec::Linear {
                inputs: cfg.hidden,
                outputs: cfg.output,
                bias: true,
                frozen: false,
                name: None,
            },
        ],
    }
}

/// Task inputs: feature `j` is `scale_j (√(1-ρ²) z_j + ρ g)` with a shared
/// factor `g`; a task's scale is `hot_scale` on its own half of the
/// features and `cold_scale` on the other.
fn task_inputs(cfg: &CompositionConfig, task: usize, records: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let d = cfg.input_dim;
    let rho = cfg.correlation;
    let own = |j: usize| (j < d / 2) == (task == 0);
    let mut data = Vec::with_capacity(records * d);
    for _ in 0..records {
        let g = normal(rng);
        for j in 0..d {
            let scale = if own(j) { cfg.hot_scale } else { cfg.cold_scale };
            data.push(scale * ((1.0 - rho * rho).sqrt() * normal(rng) + rho * g));
        }
    }
    Matrix::new(records, d, data)
}

pub fn composition_scenario(cfg: &CompositionConfig, seed: u64) -> Result<Scenario> {
    let arch = scenario_architecture(cfg);
    let mut base = ToyModel::init(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);

    // The frozen front is close to a (scaled) identity so each task's input
    // energy profile survives into the trainable layers.
    if cfg.input_dim == cfg.hidden {
        let w = base.params.get("front.weight").unwrap();
        let d = cfg.hidden;
        let data = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 } + 0.1 * normal(&mut rng))
            .collect();
        let w = w.with_data(data);
        base.params.insert("front.weight", w);
    }

    let trainable: Vec<String> = base
        .params
        .names()
        .filter(|n| !n.starts_with("front."))
        .map(str::to_string)
        .collect();
    let mut experts = BTreeMap::new();
    let mut calibration = BTreeMap::new();
    let mut eval = BTreeMap::new();
    for (task, donor) in SCENARIO_DONORS.iter().enumerate() {
        let mut params = base.params.clone();
        for name in &trainable {
            let t = &base.params.tensors[name];
            let data = t.data().iter().map(|x| x + cfg.delta_scale * normal(&mut rng)).collect();
            let perturbed = t.with_data(data);
            params.insert(name.clone(), perturbed);
        }
        experts.insert(donor.to_string(), base.with_params(params)?);
        calibration.insert(
            donor.to_string(),
            CalibrationSet::from_matrix_rows(&task_inputs(cfg, task, cfg.calibration_records, &mut rng))?,
        );
        eval.insert(
            donor.to_string(),
            CalibrationSet::from_matrix_rows(&task_inputs(cfg, task, cfg.eval_records, &mut rng))?,
        );
    }
    Ok(Scenario {
        base,
        experts,
        calibration,
        eval,
    })
}

/// Mean squared output error of `model` against `target` over `data`.
pub fn task_loss(model: &ToyModel, target: &ToyModel, data: &CalibrationSet) -> Result<f64> {
    let got = forward(model, data, None)?;
    let want = forward(target, data, None)?;
    let se: f64 = got
        .data()
        .iter()
        .zip(want.data())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    Ok(se / got.rows().max(1) as f64)
}

impl Scenario {
    /// Sum over tasks of each task's loss against its expert.
    pub fn combined_loss(&self, model: &ToyModel) -> Result<f64> {
        self.experts
            .iter()
            .map(|(d, expert)| task_loss(model, expert, &self.eval[d]))
            .sum()
    }
}
