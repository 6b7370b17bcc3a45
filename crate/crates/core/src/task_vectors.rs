//! Task vectors (fine-tuned minus base) and routed re-assembly of a merged
//! checkpoint, including verbatim transplant of donor-only modules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use regex::Regex;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor_store::{Checkpoint, Tensor, SOURCE_DTYPE_PREFIX};
use crate::DonorId;

pub const KIND_KEY: &str = "kind";
pub const KIND_TASK_VECTOR: &str = "task_vector";
pub const FINGERPRINT_KEY: &str = "base_fingerprint";

/// SHA-256 over the sorted (name, shape, dtype) manifest of a checkpoint.
/// Values are not hashed, so checkpoints sharing an architecture share a
/// fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint(String);

impl Fingerprint {
    pub fn of(ckpt: &Checkpoint) -> Self {
        let mut hasher = Sha256::new();
        for (name, tensor) in &ckpt.tensors {
            let dtype = ckpt
                .metadata
                .get(&format!("{SOURCE_DTYPE_PREFIX}{name}"))
                .map(String::as_str)
                .unwrap_or("F32");
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((tensor.rank() as u64).to_le_bytes());
            for &d in tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            hasher.update(dtype.as_bytes());
            hasher.update([0u8]);
        }
        Fingerprint(hex::encode(hasher.finalize()))
    }

    pub fn from_hex(s: impl Into<String>) -> Self {
        Fingerprint(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub base_fingerprint: Fingerprint,
    pub deltas: BTreeMap<String, Tensor>,
}

impl TaskVector {
    pub fn zeros_like(&self) -> Self {
        Self {
            base_fingerprint: self.base_fingerprint.clone(),
            deltas: self
                .deltas
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    pub fn scale(&self, factor: f32) -> Self {
        self.map_tensors(|_, t| t.scale(factor))
    }

    pub fn map_tensors(&self, f: impl Fn(&str, &Tensor) -> Tensor + Sync) -> Self {
        Self {
            base_fingerprint: self.base_fingerprint.clone(),
            deltas: self
                .deltas
                .par_iter()
                .map(|(k, t)| (k.clone(), f(k, t)))
                .collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.deltas.values().map(Tensor::numel).sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.deltas.values().map(Tensor::count_nonzero).sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.tensors = self.deltas.clone();
        ckpt.metadata
            .insert(KIND_KEY.into(), KIND_TASK_VECTOR.into());
        ckpt.metadata
            .insert(FINGERPRINT_KEY.into(), self.base_fingerprint.to_string());
        ckpt
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let fp = ckpt.metadata.get(FINGERPRINT_KEY).ok_or_else(|| Error::MissingKey {
            key: FINGERPRINT_KEY.into(),
            what: "task vector metadata".into(),
        })?;
        Ok(Self {
            base_fingerprint: Fingerprint::from_hex(fp.clone()),
            deltas: ckpt.tensors,
        })
    }
}

/// Result of [`compute_delta`]: the task vector plus tuned-only keys that
/// were left out because they have no base counterpart.
#[derive(Debug, Clone)]
pub struct Delta {
    pub vector: TaskVector,
    pub excluded: Vec<String>,
}

/// `tuned - base` over the base key set.
pub fn compute_delta(tuned: &Checkpoint, base: &Checkpoint) -> Result<Delta> {
    if !base.tensors.keys().any(|k| tuned.tensors.contains_key(k)) {
        return Err(Error::EmptyIntersection);
    }
    let deltas = base
        .tensors
        .par_iter()
        .map(|(name, b)| {
            let t = tuned.get(name).ok_or_else(|| Error::MissingKey {
                key: name.clone(),
                what: "tuned checkpoint".into(),
            })?;
            let d = t.sub(b).map_err(|_| Error::ShapeMismatch {
                key: Some(name.clone()),
                left: t.shape().to_vec(),
                right: b.shape().to_vec(),
            })?;
            Ok((name.clone(), d))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let excluded = tuned
        .tensors
        .keys()
        .filter(|k| !base.tensors.contains_key(*k))
        .cloned()
        .collect();
    Ok(Delta {
        vector: TaskVector {
            base_fingerprint: Fingerprint::of(base),
            deltas,
        },
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RouteAction {
    CopyFrom(DonorId),
    Merge,
    KeepBase,
}

impl fmt::Display for RouteAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RouteAction::CopyFrom(d) => write!(f, "copy_from({d})"),
            RouteAction::Merge => f.write_str("merge"),
            RouteAction::KeepBase => f.write_str("keep_base"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoutingRule {
    pattern: String,
    regex: Regex,
    pub action: RouteAction,
}

impl RoutingRule {
    /// `pattern` is a regular expression anchored at both ends.
    pub fn new(pattern: &str, action: RouteAction) -> Result<Self> {
        let regex = Regex::new(&format!("^(?:{pattern})$")).map_err(|e| Error::BadPattern {
            pattern: pattern.into(),
            reason: e.to_string(),
        })?;
        Ok(Self {
            pattern: pattern.into(),
            regex,
            action,
        })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn matches(&self, name: &str) -> bool {
        self.regex.is_match(name)
    }
}

/// Ordered rules, first match wins, with a fallback action.
#[derive(Debug, Clone)]
pub struct Routing {
    pub rules: Vec<RoutingRule>,
    pub default: RouteAction,
}

impl Default for Routing {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            default: RouteAction::Merge,
        }
    }
}

impl Routing {
    pub fn new(rules: Vec<RoutingRule>, default: RouteAction) -> Self {
        Self { rules, default }
    }

    pub fn resolve(&self, name: &str) -> &RouteAction {
        self.rules
            .iter()
            .find(|r| r.matches(name))
            .map(|r| &r.action)
            .unwrap_or(&self.default)
    }

    fn donors(&self) -> BTreeSet<&str> {
        self.rules
            .iter()
            .map(|r| &r.action)
            .chain(std::iter::once(&self.default))
            .filter_map(|a| match a {
                RouteAction::CopyFrom(d) => Some(d.as_str()),
                _ => None,
            })
            .collect()
    }
}

/// Output of [`apply`].
#[derive(Debug, Clone)]
pub struct Applied {
    pub checkpoint: Checkpoint,
    /// Action that produced each output tensor.
    pub provenance: BTreeMap<String, RouteAction>,
    /// Donor-only keys not captured by a `copy_from` rule for that donor.
    pub skipped: Vec<String>,
}

/// Assembles `base + combined` under `routing`. Output metadata is the base's.
pub fn apply(
    base: &Checkpoint,
    combined: &TaskVector,
    routing: &Routing,
    donors: &BTreeMap<DonorId, Checkpoint>,
) -> Result<Applied> {
    let expected = Fingerprint::of(base);
    if combined.base_fingerprint != expected {
        return Err(Error::FingerprintMismatch {
            expected: expected.to_string(),
            found: combined.base_fingerprint.to_string(),
        });
    }
    let copy_donors = routing.donors();
    for d in &copy_donors {
        if !donors.contains_key(*d) {
            return Err(Error::UnknownDonor(d.to_string()));
        }
    }

    let mut candidates: BTreeSet<&str> = base.names().collect();
    for d in &copy_donors {
        candidates.extend(donors[*d].names());
    }
    let candidates: Vec<&str> = candidates.into_iter().collect();

    let results = candidates
        .par_iter()
        .map(|&name| -> Result<Option<(String, Tensor, RouteAction)>> {
            let action = routing.resolve(name);
            let Some(b) = base.get(name) else {
                // Donor-only key: only a copy_from rule for a donor that has it applies.
                return Ok(match action {
                    RouteAction::CopyFrom(d) => donors[d]
                        .get(name)
                        .map(|t| (name.to_string(), t.clone(), action.clone())),
                    _ => None,
                });
            };
            let tensor = match action {
                RouteAction::CopyFrom(d) => donors[d]
                    .get(name)
                    .ok_or_else(|| Error::MissingKey {
                        key: name.into(),
                        what: format!("donor '{d}'"),
                    })?
                    .clone(),
                RouteAction::Merge => {
                    let delta = combined.deltas.get(name).ok_or_else(|| Error::MissingKey {
                        key: name.into(),
                        what: "task vector".into(),
                    })?;
                    b.add(delta).map_err(|_| Error::ShapeMismatch {
                        key: Some(name.into()),
                        left: b.shape().to_vec(),
                        right: delta.shape().to_vec(),
                    })?
                }
                RouteAction::KeepBase => b.clone(),
            };
            Ok(Some((name.to_string(), tensor, action.clone())))
        })
        .collect::<Vec<_>>();

    let mut checkpoint = Checkpoint::new();
    checkpoint.metadata = base.metadata.clone();
    let mut provenance = BTreeMap::new();
    let mut skipped = Vec::new();
    for (name, result) in candidates.iter().zip(results) {
        match result? {
            Some((k, t, a)) => {
                checkpoint.tensors.insert(k.clone(), t);
                provenance.insert(k, a);
            }
            None => skipped.push(name.to_string()),
        }
    }
    Ok(Applied {
        checkpoint,
        provenance,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(entries: &[(&str, Vec<f32>)]) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (k, v) in entries {
            c.insert(*k, Tensor::from_vec(v.clone()));
        }
        c
    }

    #[test]
    fn delta_against_self_is_zero() {
        let base = ckpt(&[("a", vec![1.0, -2.0]), ("b", vec![3.5])]);
        let d = compute_delta(&base, &base).unwrap();
        assert!(d.vector.deltas.values().all(|t| t.count_nonzero() == 0));
        assert!(d.excluded.is_empty());
    }

    #[test]
    fn delta_values_and_exclusions() {
        let base = ckpt(&[("k", vec![1.0, 2.0])]);
        let tuned = ckpt(&[("k", vec![4.0, 0.0]), ("visual.x", vec![9.0])]);
        let d = compute_delta(&tuned, &base).unwrap();
        assert_eq!(d.vector.deltas["k"].data(), &[3.0, -2.0]);
        assert_eq!(d.excluded, vec!["visual.x".to_string()]);
    }

    #[test]
    fn delta_errors() {
        let base = ckpt(&[("k", vec![1.0, 2.0])]);
        let bad = ckpt(&[("k", vec![1.0])]);
        let err = compute_delta(&bad, &base).unwrap_err();
        assert!(matches!(&err, Error::ShapeMismatch { key: Some(k), .. } if k == "k"));
        let disjoint = ckpt(&[("z", vec![1.0])]);
        assert!(matches!(
            compute_delta(&disjoint, &base),
            Err(Error::EmptyIntersection)
        ));
    }

    #[test]
    fn fingerprint_ignores_values() {
        let a = ckpt(&[("k", vec![1.0, 2.0])]);
        let b = ckpt(&[("k", vec![5.0, 6.0])]);
        let c = ckpt(&[("k", vec![5.0, 6.0, 7.0])]);
        assert_eq!(Fingerprint::of(&a), Fingerprint::of(&b));
        assert_ne!(Fingerprint::of(&a), Fingerprint::of(&c));
    }

    #[test]
    fn zero_vector_default_routing_is_identity() {
        let base = ckpt(&[("a", vec![1.0, 2.0]), ("b", vec![-3.0])]);
        let zero = compute_delta(&base, &base).unwrap().vector;
        let out = apply(&base, &zero, &Routing::default(), &BTreeMap::new()).unwrap();
        assert_eq!(out.checkpoint, base);
    }

    #[test]
    fn transplant_copies_donor_keys_verbatim() {
        let base = ckpt(&[("lm.w", vec![1.0, 1.0])]);
        let vlm = ckpt(&[("lm.w", vec![2.0, 3.0]), ("visual.p", vec![0.25, 0.5])]);
        let delta = compute_delta(&vlm, &base).unwrap();
        let routing = Routing::new(
            vec![RoutingRule::new(r"visual\..*", RouteAction::CopyFrom("vlm".into())).unwrap()],
            RouteAction::Merge,
        );
        let donors = BTreeMap::from([("vlm".to_string(), vlm.clone())]);
        let out = apply(&base, &delta.vector, &routing, &donors).unwrap();
        assert_eq!(out.checkpoint.get("visual.p"), vlm.get("visual.p"));
        assert_eq!(out.checkpoint.get("lm.w").unwrap().data(), &[2.0, 3.0]);
        assert_eq!(
            out.provenance["visual.p"],
            RouteAction::CopyFrom("vlm".into())
        );
    }

    #[test]
    fn first_matching_rule_wins() {
        let routing = Routing::new(
            vec![
                RoutingRule::new("lm.head", RouteAction::KeepBase).unwrap(),
                RoutingRule::new("lm.*", RouteAction::Merge).unwrap(),
            ],
            RouteAction::Merge,
        );
        assert_eq!(routing.resolve("lm.head"), &RouteAction::KeepBase);
        assert_eq!(routing.resolve("lm.body"), &RouteAction::Merge);

        let base = ckpt(&[("lm.head", vec![1.0]), ("lm.body", vec![1.0])]);
        let tuned = ckpt(&[("lm.head", vec![5.0]), ("lm.body", vec![5.0])]);
        let d = compute_delta(&tuned, &base).unwrap().vector;
        let out = apply(&base, &d, &routing, &BTreeMap::new()).unwrap();
        assert_eq!(out.checkpoint.get("lm.head").unwrap().data(), &[1.0]);
        assert_eq!(out.checkpoint.get("lm.body").unwrap().data(), &[5.0]);
    }

    #[test]
    fn apply_errors() {
        let base = ckpt(&[("a", vec![1.0])]);
        let zero = compute_delta(&base, &base).unwrap().vector;
        let routing = Routing::new(
            vec![RoutingRule::new("a", RouteAction::CopyFrom("ghost".into())).unwrap()],
            RouteAction::Merge,
        );
        assert!(matches!(
            apply(&base, &zero, &routing, &BTreeMap::new()),
            Err(Error::UnknownDonor(d)) if d == "ghost"
        ));
        let donors = BTreeMap::from([("ghost".to_string(), ckpt(&[("b", vec![0.0])]))]);
        assert!(matches!(
            apply(&base, &zero, &routing, &donors),
            Err(Error::MissingKey { key, .. }) if key == "a"
        ));
        let other = ckpt(&[("a", vec![1.0, 2.0])]);
        let foreign = compute_delta(&other, &other).unwrap().vector;
        assert!(matches!(
            apply(&base, &foreign, &Routing::default(), &BTreeMap::new()),
            Err(Error::FingerprintMismatch { .. })
        ));
        assert!(RoutingRule::new("(", RouteAction::Merge).is_err());
    }

    #[test]
    fn unrouted_donor_keys_are_skipped() {
        let base = ckpt(&[("a", vec![1.0])]);
        let donor = ckpt(&[("a", vec![1.0]), ("extra", vec![2.0])]);
        let zero = compute_delta(&base, &base).unwrap().vector;
        let routing = Routing::new(
            vec![RoutingRule::new("a", RouteAction::CopyFrom("d".into())).unwrap()],
            RouteAction::Merge,
        );
        let donors = BTreeMap::from([("d".to_string(), donor)]);
        let out = apply(&base, &zero, &routing, &donors).unwrap();
        assert_eq!(out.skipped, vec!["extra".to_string()]);
        assert!(out.checkpoint.get("extra").is_none());
    }
}
