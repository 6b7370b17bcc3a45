//! JSON merge recipes.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "base": "base.safetensors",
//!   "donors": [
//!     {"id": "vl", "path": "vl.safetensors", "stats_path": "vl.stats"},
//!     {"id": "search", "path": "search.safetensors", "stats_path": "search.stats"}
//!   ],
//!   "method": "obm",
//!   "routing": [{"pattern": "front\\..*", "action": "copy_from", "donor": "vl"}],
//!   "output": "merged.safetensors",
//!   "report": "report.json"
//! }
//! ```
//!
//! Relative paths resolve against the recipe's directory. Unknown fields are
//! rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mergers::{
    Aggregation, MergeMethod, MergePolicy, Scope, DEFAULT_TA_LAMBDA_SEARCH, DEFAULT_TA_LAMBDA_VL,
};
use crate::task_vectors::{RouteAction, Routing, RoutingRule};
use crate::DonorId;

pub const SCHEMA_VERSION: u32 = 1;

/// Donor ids that receive the default task-arithmetic λ when none is given.
pub const VL_DONOR: &str = "vl";
pub const SEARCH_DONOR: &str = "search";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DonorEntry {
    pub id: DonorId,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    CopyFrom,
    Merge,
    KeepBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleEntry {
    pub pattern: String,
    pub action: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor: Option<DonorId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub schema_version: u32,
    pub base: PathBuf,
    pub donors: Vec<DonorEntry>,
    pub method: MergeMethod,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub seed: u64,
    /// Recipe-wide density; defaults to the method's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default)]
    pub routing: Vec<RuleEntry>,
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Include wall-clock times in the report (makes it run-dependent).
    #[serde(default)]
    pub report_timings: bool,
}

fn density_ok(p: f64) -> bool {
    p > 0.0 && p <= 1.0
}

impl MergeRecipe {
    /// Parses and validates; every problem is reported with its field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let recipe: MergeRecipe = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Recipe(vec![format!("{path}: {inner}")])
        })?;
        recipe.validate()?;
        Ok(recipe)
    }

    /// Reads a recipe file and resolves its paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut recipe = Self::from_json(&text)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        recipe.resolve_paths(dir);
        Ok(recipe)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("recipe serializes")
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        join(&mut self.base);
        join(&mut self.output);
        if let Some(r) = &mut self.report {
            join(r);
        }
        for d in &mut self.donors {
            join(&mut d.path);
            if let Some(s) = &mut d.stats_path {
                join(s);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errs.push(format!(
                "schema_version: unsupported version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            ));
        }
        if self.donors.is_empty() {
            errs.push("donors: at least one donor is required".into());
        }
        if let Some(p) = self.density {
            if !density_ok(p) {
                errs.push(format!("density: {p} outside (0, 1]"));
            }
        }
        let obm = self.method == MergeMethod::Obm;
        let mut ids = BTreeSet::new();
        for (i, d) in self.donors.iter().enumerate() {
            if d.id.is_empty() {
                errs.push(format!("donors[{i}].id: must not be empty"));
            } else if !ids.insert(d.id.as_str()) {
                errs.push(format!("donors[{i}].id: duplicate donor id '{}'", d.id));
            }
            match (&d.stats_path, obm) {
                (None, true) => errs.push(format!("donors[{i}].stats_path: required when method is obm")),
                (Some(_), false) => errs.push(format!(
                    "donors[{i}].stats_path: only allowed when method is obm"
                )),
                _ => {}
            }
            if let Some(p) = d.density {
                if !density_ok(p) {
                    errs.push(format!("donors[{i}].density: {p} outside (0, 1]"));
                }
            }
            if let Some(l) = d.lambda {
                if !l.is_finite() {
                    errs.push(format!("donors[{i}].lambda: must be finite"));
                }
            } else if self.method == MergeMethod::TaskArithmetic && default_ta_lambda(&d.id).is_none() {
                errs.push(format!(
                    "donors[{i}].lambda: required for method ta (defaults exist only for '{VL_DONOR}' and '{SEARCH_DONOR}')"
                ));
            }
            if d.density.is_some() && self.method == MergeMethod::TaskArithmetic {
                errs.push(format!("donors[{i}].density: not used by method ta"));
            }
        }
        if self.density.is_some() && self.method == MergeMethod::TaskArithmetic {
            errs.push("density: not used by method ta".into());
        }
        for (i, r) in self.routing.iter().enumerate() {
            if let Err(e) = RoutingRule::new(&r.pattern, RouteAction::Merge) {
                errs.push(format!("routing[{i}].pattern: {e}"));
            }
            match (r.action, &r.donor) {
                (ActionKind::CopyFrom, None) => {
                    errs.push(format!("routing[{i}].donor: required for copy_from"))
                }
                (ActionKind::CopyFrom, Some(d)) if !ids.contains(d.as_str()) => {
                    errs.push(format!("routing[{i}].donor: unknown donor '{d}'"))
                }
                (ActionKind::Merge | ActionKind::KeepBase, Some(_)) => errs.push(format!(
                    "routing[{i}].donor: only allowed for copy_from"
                )),
                _ => {}
            }
        }
        if self.output == self.base {
            errs.push("output: must differ from base".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Recipe(errs))
        }
    }

    pub fn policy(&self) -> MergePolicy {
        let mut policy = MergePolicy::new(self.method);
        if let Some(p) = self.density {
            policy.density = p;
        }
        policy.scope = self.scope;
        policy.aggregation = self.aggregation;
        policy.seed = self.seed;
        for d in &self.donors {
            let lambda = d.lambda.or_else(|| {
                (self.method == MergeMethod::TaskArithmetic)
                    .then(|| default_ta_lambda(&d.id))
                    .flatten()
            });
            if let Some(l) = lambda {
                policy.lambdas.insert(d.id.clone(), l);
            }
            if let Some(p) = d.density {
                policy.donor_density.insert(d.id.clone(), p);
            }
        }
        policy
    }

    pub fn routing(&self) -> Result<Routing> {
        let rules = self
            .routing
            .iter()
            .map(|r| {
                let action = match r.action {
                    ActionKind::CopyFrom => RouteAction::CopyFrom(r.donor.clone().unwrap_or_default()),
                    ActionKind::Merge => RouteAction::Merge,
                    ActionKind::KeepBase => RouteAction::KeepBase,
                };
                RoutingRule::new(&r.pattern, action)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Routing::new(rules, RouteAction::Merge))
    }

    pub fn donor_paths(&self) -> BTreeMap<DonorId, PathBuf> {
        self.donors.iter().map(|d| (d.id.clone(), d.path.clone())).collect()
    }

    /// Input files that do not exist.
    pub fn missing_inputs(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |field: String, p: &Path| {
            if !p.exists() {
                out.push(format!("{field}: file not found: {}", p.display()));
            }
        };
        check("base".into(), &self.base);
        for (i, d) in self.donors.iter().enumerate() {
            check(format!("donors[{i}].path"), &d.path);
            if let Some(s) = &d.stats_path {
                check(format!("donors[{i}].stats_path"), s);
            }
        }
        out
    }
}

/// Task-arithmetic λ defaults: 0.7 for the vision-language donor, 0.3 for
/// the search donor.
pub fn default_ta_lambda(id: &str) -> Option<f32> {
    match id {
        VL_DONOR => Some(DEFAULT_TA_LAMBDA_VL),
        SEARCH_DONOR => Some(DEFAULT_TA_LAMBDA_SEARCH),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OBM: &str = r#"{
        "schema_version": 1,
        "base": "base.st",
        "donors": [
            {"id": "vl", "path": "vl.st", "stats_path": "vl.stats"},
            {"id": "search", "path": "s.st", "stats_path": "s.stats", "density": 0.5}
        ],
        "method": "obm",
        "routing": [{"pattern": "front\\..*", "action": "copy_from", "donor": "vl"}],
        "output": "out.st"
    }"#;

    fn errors(text: &str) -> Vec<String> {
        match MergeRecipe::from_json(text) {
            Err(Error::Recipe(e)) => e,
            other => panic!("expected recipe error, got {other:?}"),
        }
    }

    #[test]
    fn parses_with_defaults() {
        let r = MergeRecipe::from_json(OBM).unwrap();
        let p = r.policy();
        assert_eq!(p.density, 0.7);
        assert_eq!(p.density_for("search"), 0.5);
        assert_eq!(p.lambda("vl").unwrap(), 1.0);
        assert_eq!(p.scope, Scope::PerTensor);
        assert_eq!(p.aggregation, Aggregation::DisjointMean);
        let routing = r.routing().unwrap();
        assert_eq!(routing.resolve("front.weight"), &RouteAction::CopyFrom("vl".into()));
        assert_eq!(routing.resolve("layers.2.weight"), &RouteAction::Merge);
        assert_eq!(MergeRecipe::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn ta_lambda_defaults() {
        let text = r#"{"schema_version":1,"base":"b","donors":[{"id":"vl","path":"v"},{"id":"search","path":"s"}],"method":"ta","output":"o"}"#;
        let p = MergeRecipe::from_json(text).unwrap().policy();
        assert_eq!(p.lambda("vl").unwrap(), 0.7);
        assert_eq!(p.lambda("search").unwrap(), 0.3);
        let text = r#"{"schema_version":1,"base":"b","donors":[{"id":"x","path":"v"}],"method":"ta","output":"o"}"#;
        assert_eq!(errors(text).len(), 1);
        assert!(errors(text)[0].starts_with("donors[0].lambda"));
    }

    #[test]
    fn unknown_fields_name_their_path() {
        let text = OBM.replace("\"density\": 0.5", "\"densty\": 0.5");
        let e = errors(&text);
        assert!(e[0].starts_with("donors[1]"), "{e:?}");
        assert!(e[0].contains("densty"), "{e:?}");
        let e = errors(&OBM.replace("\"method\"", "\"extra\": 1, \"method\""));
        assert!(e[0].contains("extra"), "{e:?}");
    }

    #[test]
    fn validation_collects_every_problem() {
        let text = r#"{
            "schema_version": 2,
            "base": "b",
            "donors": [
                {"id": "a", "path": "a", "density": 1.5},
                {"id": "a", "path": "b", "stats_path": "x"}
            ],
            "method": "obm",
            "routing": [
                {"pattern": "(", "action": "merge"},
                {"pattern": "x", "action": "copy_from", "donor": "zz"},
                {"pattern": "y", "action": "keep_base", "donor": "a"}
            ],
            "output": "b"
        }"#;
        let e = errors(text);
        let fields: Vec<&str> = e.iter().map(|s| s.split(':').next().unwrap()).collect();
        assert_eq!(
            fields,
            vec![
                "schema_version",
                "donors[0].stats_path",
                "donors[0].density",
                "donors[1].id",
                "routing[0].pattern",
                "routing[1].donor",
                "routing[2].donor",
                "output",
            ]
        );
    }

    #[test]
    fn stats_path_only_for_obm() {
        let text = OBM.replace("\"obm\"", "\"ties\"");
        let e = errors(&text);
        assert_eq!(e.len(), 2);
        assert!(e.iter().all(|s| s.contains("only allowed when method is obm")));
    }

    #[test]
    fn paths_resolve_against_recipe_dir() {
        let mut r = MergeRecipe::from_json(OBM).unwrap();
        r.resolve_paths(Path::new("/tmp/run"));
        assert_eq!(r.base, PathBuf::from("/tmp/run/base.st"));
        assert_eq!(r.donors[1].stats_path.as_deref(), Some(Path::new("/tmp/run/s.stats")));
    }
}
