//! Activation-aware saliency.
//!
//! For a linear layer `y = W x` and the layer-wise objective `‖ΔW X‖²`, the
//! Hessian with respect to one row of `W` is `2 X Xᵀ`. Keeping only its
//! diagonal, `h_j = 2 Σ_t x_{t,j}²`, and the saliency of a task-vector entry
//! is `s = ½ h_j δ²`. Statistics are plain per-feature sums of squares, so
//! they can be sharded, merged and cached independently of any merge.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::task_vectors::TaskVector;
use crate::tensor_store::{Checkpoint, Tensor};

pub const STATS_VERSION: &str = "1";
pub const STATS_VERSION_KEY: &str = "stats_version";
pub const TOKEN_COUNT_PREFIX: &str = "token_count.";
const SQ_SUM_SUFFIX: &str = ".sq_sum";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerStats {
    /// Σ_t x_{t,j}² per input feature.
    pub sq_sum: Vec<f32>,
    pub token_count: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationStats {
    pub layers: BTreeMap<String, LayerStats>,
}

/// How `h` is scaled before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianNorm {
    /// `h = 2 Σ x²`.
    Raw,
    /// `h = 2 Σ x² / token_count`, comparable across layers.
    Mean,
}

impl ActivationStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a `T × d` batch of layer inputs (one token per row).
    pub fn accumulate(&mut self, layer: &str, batch: &Matrix) -> Result<()> {
        let width = batch.cols();
        let entry = self
            .layers
            .entry(layer.to_string())
            .or_insert_with(|| LayerStats {
                sq_sum: vec![0.0; width],
                token_count: 0,
            });
        if entry.sq_sum.len() != width {
            return Err(Error::WidthMismatch {
                layer: layer.into(),
                expected: entry.sq_sum.len(),
                got: width,
            });
        }
        let mut col = vec![0f64; width];
        for r in 0..batch.rows() {
            for (acc, &x) in col.iter_mut().zip(batch.row(r)) {
                *acc += f64::from(x) * f64::from(x);
            }
        }
        for (s, c) in entry.sq_sum.iter_mut().zip(col) {
            *s = (f64::from(*s) + c) as f32;
        }
        entry.token_count += batch.rows() as u64;
        Ok(())
    }

    pub fn layer(&self, layer: &str) -> Result<&LayerStats> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::UnknownLayer(layer.into()))
    }

    /// Diagonal of `2 X Xᵀ` for `layer`.
    pub fn hessian_diag(&self, layer: &str) -> Result<Vec<f32>> {
        self.hessian_diag_with(layer, HessianNorm::Raw)
    }

    pub fn hessian_diag_with(&self, layer: &str, norm: HessianNorm) -> Result<Vec<f32>> {
        let stats = self.layer(layer)?;
        if stats.token_count == 0 {
            return Err(Error::NoCoverage(layer.into()));
        }
        let n = stats.token_count as f32;
        Ok(stats
            .sq_sum
            .iter()
            .map(|&s| match norm {
                HessianNorm::Raw => 2.0 * s,
                HessianNorm::Mean => 2.0 * s / n,
            })
            .collect())
    }

    /// Bias curvature under the constant-1 input feature.
    fn bias_hessian(&self, layer: &str, norm: HessianNorm) -> Result<f32> {
        let stats = self.layer(layer)?;
        if stats.token_count == 0 {
            return Err(Error::NoCoverage(layer.into()));
        }
        Ok(match norm {
            HessianNorm::Raw => 2.0 * stats.token_count as f32,
            HessianNorm::Mean => 2.0,
        })
    }

    /// Per-layer sum of `sq_sum` and `token_count`.
    pub fn merge(&self, other: &ActivationStats) -> Result<ActivationStats> {
        let mut out = self.clone();
        for (layer, theirs) in &other.layers {
            match out.layers.get_mut(layer) {
                None => {
                    out.layers.insert(layer.clone(), theirs.clone());
                }
                Some(ours) => {
                    if ours.sq_sum.len() != theirs.sq_sum.len() {
                        return Err(Error::WidthMismatch {
                            layer: layer.clone(),
                            expected: ours.sq_sum.len(),
                            got: theirs.sq_sum.len(),
                        });
                    }
                    for (a, &b) in ours.sq_sum.iter_mut().zip(&theirs.sq_sum) {
                        *a += b;
                    }
                    ours.token_count += theirs.token_count;
                }
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, extra_metadata: &BTreeMap<String, String>) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.metadata = extra_metadata.clone();
        ckpt.metadata
            .insert(STATS_VERSION_KEY.into(), STATS_VERSION.into());
        for (layer, stats) in &self.layers {
            ckpt.insert(
                format!("{layer}{SQ_SUM_SUFFIX}"),
                Tensor::from_vec(stats.sq_sum.clone()),
            );
            ckpt.metadata.insert(
                format!("{TOKEN_COUNT_PREFIX}{layer}"),
                stats.token_count.to_string(),
            );
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.metadata.get(STATS_VERSION_KEY).map(String::as_str) {
            Some(STATS_VERSION) => {}
            Some(v) => return Err(Error::BadStats(format!("unsupported stats_version '{v}'"))),
            None => return Err(Error::BadStats("missing stats_version".into())),
        }
        let mut layers = BTreeMap::new();
        for (name, tensor) in &ckpt.tensors {
            let layer = name.strip_suffix(SQ_SUM_SUFFIX).ok_or_else(|| {
                Error::BadStats(format!("unexpected tensor '{name}'"))
            })?;
            if tensor.rank() != 1 {
                return Err(Error::BadStats(format!("'{name}' must be a vector")));
            }
            if tensor.data().iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(Error::BadStats(format!("'{name}' has negative or non-finite entries")));
            }
            let key = format!("{TOKEN_COUNT_PREFIX}{layer}");
            let token_count: u64 = ckpt
                .metadata
                .get(&key)
                .ok_or_else(|| Error::BadStats(format!("missing {key}")))?
                .parse()
                .map_err(|e| Error::BadStats(format!("{key}: {e}")))?;
            if token_count == 0 && tensor.count_nonzero() > 0 {
                return Err(Error::BadStats(format!(
                    "layer '{layer}' has zero tokens but nonzero sums"
                )));
            }
            layers.insert(
                layer.to_string(),
                LayerStats {
                    sq_sum: tensor.data().to_vec(),
                    token_count,
                },
            );
        }
        for key in ckpt.metadata.keys() {
            if let Some(layer) = key.strip_prefix(TOKEN_COUNT_PREFIX) {
                if !layers.contains_key(layer) {
                    return Err(Error::BadStats(format!("{key} has no sq_sum tensor")));
                }
            }
        }
        Ok(Self { layers })
    }
}

/// Which statistics (if any) score a task-vector tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerBinding {
    /// 2-D weight (`out × in`) or 1-D bias of the named linear layer.
    Layer(String),
    Uniform,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerMap(pub BTreeMap<String, LayerBinding>);

impl LayerMap {
    /// Binds `<layer>.weight` (2-D) and `<layer>.bias` (1-D) to `<layer>`
    /// when `stats` has that layer; everything else is uniform.
    pub fn infer(delta: &TaskVector, stats: &ActivationStats) -> Self {
        let map = delta
            .deltas
            .iter()
            .map(|(name, t)| {
                let layer = match (name.rsplit_once('.'), t.rank()) {
                    (Some((layer, "weight")), 2) | (Some((layer, "bias")), 1)
                        if stats.layers.contains_key(layer) =>
                    {
                        LayerBinding::Layer(layer.to_string())
                    }
                    _ => LayerBinding::Uniform,
                };
                (name.clone(), layer)
            })
            .collect();
        LayerMap(map)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMode {
    Activation,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub scores: BTreeMap<String, Tensor>,
    pub modes: BTreeMap<String, SaliencyMode>,
}

impl SaliencyMap {
    pub fn scale(&self, c: f32) -> Self {
        Self {
            scores: self
                .scores
                .iter()
                .map(|(k, t)| (k.clone(), t.scale(c)))
                .collect(),
            modes: self.modes.clone(),
        }
    }

    pub fn mode(&self, name: &str) -> Option<SaliencyMode> {
        self.modes.get(name).copied()
    }
}

/// `s = ½ h δ²` for each entry of `delta`; uniform tensors score 1.
pub fn score(
    delta: &TaskVector,
    stats: &ActivationStats,
    layer_map: &LayerMap,
    norm: HessianNorm,
) -> Result<SaliencyMap> {
    let scored = delta
        .deltas
        .par_iter()
        .map(|(name, d)| {
            let binding = layer_map.0.get(name).ok_or_else(|| Error::MissingKey {
                key: name.clone(),
                what: "layer map".into(),
            })?;
            let layer = match binding {
                LayerBinding::Uniform => {
                    let s = Tensor::full(d.shape().to_vec(), 1.0);
                    return Ok((name.clone(), s, SaliencyMode::Uniform));
                }
                LayerBinding::Layer(layer) => layer,
            };
            let s = match d.shape() {
                &[_, width] => {
                    let h = stats.hessian_diag_with(layer, norm)?;
                    if h.len() != width {
                        return Err(Error::WidthMismatch {
                            layer: layer.clone(),
                            expected: h.len(),
                            got: width,
                        });
                    }
                    let data = d
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| 0.5 * h[i % width] * x * x)
                        .collect();
                    d.with_data(data)
                }
                &[_] => {
                    let hb = stats.bias_hessian(layer, norm)?;
                    d.map(|x| 0.5 * hb * x * x)
                }
                other => {
                    return Err(Error::InvalidTensor {
                        name: name.clone(),
                        reason: format!(
                            "activation-scored tensors must be 1-D or 2-D, got {other:?}"
                        ),
                    })
                }
            };
            Ok((name.clone(), s, SaliencyMode::Activation))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut scores = BTreeMap::new();
    let mut modes = BTreeMap::new();
    for (name, s, mode) in scored {
        scores.insert(name.clone(), s);
        modes.insert(name, mode);
    }
    Ok(SaliencyMap { scores, modes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_vectors::Fingerprint;

    fn tv(entries: Vec<(&str, Tensor)>) -> TaskVector {
        TaskVector {
            base_fingerprint: Fingerprint::from_hex("00"),
            deltas: entries.into_iter().map(|(k, t)| (k.to_string(), t)).collect(),
        }
    }

    fn stats_with(layer: &str, sq_sum: Vec<f32>, token_count: u64) -> ActivationStats {
        let mut s = ActivationStats::new();
        s.layers.insert(layer.into(), LayerStats { sq_sum, token_count });
        s
    }

    #[test]
    fn one_hot_counting_and_hessian() {
        let mut s = ActivationStats::new();
        let batch = Matrix::from_rows(&vec![vec![0.0, 0.0, 1.0, 0.0]; 3]);
        s.accumulate("l", &batch).unwrap();
        assert_eq!(s.layers["l"].sq_sum, vec![0.0, 0.0, 3.0, 0.0]);
        assert_eq!(s.layers["l"].token_count, 3);
        assert_eq!(s.hessian_diag("l").unwrap(), vec![0.0, 0.0, 6.0, 0.0]);
    }

    #[test]
    fn zero_batch_only_counts_tokens() {
        let mut s = ActivationStats::new();
        s.accumulate("l", &Matrix::zeros(5, 2)).unwrap();
        assert_eq!(s.layers["l"].sq_sum, vec![0.0, 0.0]);
        assert_eq!(s.layers["l"].token_count, 5);
    }

    #[test]
    fn accumulate_rejects_width_change() {
        let mut s = ActivationStats::new();
        s.accumulate("l", &Matrix::zeros(1, 2)).unwrap();
        assert!(matches!(
            s.accumulate("l", &Matrix::zeros(1, 3)),
            Err(Error::WidthMismatch { .. })
        ));
    }

    #[test]
    fn hessian_values_and_errors() {
        let s = stats_with("l", vec![0.1, 100.0], 4);
        assert_eq!(s.hessian_diag("l").unwrap(), vec![0.2, 200.0]);
        assert!(matches!(s.hessian_diag("nope"), Err(Error::UnknownLayer(_))));
        let empty = stats_with("e", vec![0.0], 0);
        let err = empty.hessian_diag("e").unwrap_err();
        assert!(err.to_string().contains("no calibration coverage for layer"));
    }

    #[test]
    fn score_prefers_high_activation_entry() {
        // h = [0.2, 200]
        let s = stats_with("l", vec![0.1, 100.0], 1);
        let d = tv(vec![("l.weight", Tensor::new(vec![1, 2], vec![3.0, 1.0]).unwrap())]);
        let map = LayerMap::infer(&d, &s);
        let sal = score(&d, &s, &map, HessianNorm::Raw).unwrap();
        let got = sal.scores["l.weight"].data();
        assert!((got[0] - 0.9).abs() < 1e-6);
        assert_eq!(got[1], 100.0);
        assert_eq!(sal.mode("l.weight"), Some(SaliencyMode::Activation));
    }

    #[test]
    fn score_zero_delta_bias_and_uniform() {
        let s = stats_with("l", vec![1.0, 2.0], 5);
        let d = tv(vec![
            ("l.weight", Tensor::zeros(vec![3, 2])),
            ("l.bias", Tensor::from_vec(vec![1.0, -2.0, 0.0])),
            ("embed.weight", Tensor::new(vec![2, 2], vec![4.0, 0.0, -1.0, 2.0]).unwrap()),
        ]);
        let map = LayerMap::infer(&d, &s);
        assert_eq!(map.0["embed.weight"], LayerBinding::Uniform);
        let sal = score(&d, &s, &map, HessianNorm::Raw).unwrap();
        assert!(sal.scores["l.weight"].data().iter().all(|&x| x == 0.0));
        // h_bias = 2 * token_count = 10
        assert_eq!(sal.scores["l.bias"].data(), &[5.0, 20.0, 0.0]);
        assert_eq!(sal.scores["embed.weight"].data(), &[1.0; 4]);
        assert_eq!(sal.mode("embed.weight"), Some(SaliencyMode::Uniform));

        let mean = score(&d, &s, &map, HessianNorm::Mean).unwrap();
        assert_eq!(mean.scores["l.bias"].data(), &[1.0, 4.0, 0.0]);
    }

    #[test]
    fn score_errors() {
        let s = stats_with("l", vec![1.0, 2.0], 1);
        let d = tv(vec![("l.weight", Tensor::zeros(vec![2, 3]))]);
        let map = LayerMap(BTreeMap::from([(
            "l.weight".to_string(),
            LayerBinding::Layer("l".into()),
        )]));
        assert!(matches!(
            score(&d, &s, &map, HessianNorm::Raw),
            Err(Error::WidthMismatch { .. })
        ));
        let map = LayerMap(BTreeMap::from([(
            "l.weight".to_string(),
            LayerBinding::Layer("missing".into()),
        )]));
        assert!(matches!(
            score(&d, &s, &map, HessianNorm::Raw),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn merge_identity_commutes_and_rejects_conflicts() {
        let a = stats_with("l", vec![1.0, 2.0], 3);
        let b = stats_with("l", vec![0.5, 0.25], 1);
        assert_eq!(a.merge(&ActivationStats::new()).unwrap(), a);
        assert_eq!(a.merge(&b).unwrap(), b.merge(&a).unwrap());
        let m = a.merge(&b).unwrap();
        assert_eq!(m.layers["l"].sq_sum, vec![1.5, 2.25]);
        assert_eq!(m.layers["l"].token_count, 4);
        let c = stats_with("l", vec![1.0], 1);
        assert!(a.merge(&c).is_err());
    }

    #[test]
    fn stats_file_roundtrip() {
        let mut s = stats_with("layers.1", vec![1.0, 2.0], 3);
        s.layers.insert(
            "front".into(),
            LayerStats {
                sq_sum: vec![0.0],
                token_count: 0,
            },
        );
        let ckpt = s.to_checkpoint(&BTreeMap::new());
        assert_eq!(ckpt.metadata["token_count.layers.1"], "3");
        assert_eq!(ckpt.metadata["stats_version"], "1");
        assert_eq!(ActivationStats::from_checkpoint(&ckpt).unwrap(), s);

        let mut bad = ckpt.clone();
        bad.metadata.remove("token_count.front");
        assert!(ActivationStats::from_checkpoint(&bad).is_err());
        let mut bad = ckpt;
        bad.insert("layers.1.sq_sum", Tensor::from_vec(vec![-1.0, 0.0]));
        assert!(ActivationStats::from_checkpoint(&bad).is_err());
    }
}
