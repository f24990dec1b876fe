//! Tool manifest: the JSON document that declares types, per-type value
//! priors and tool specs. The shipped corpus is itself a manifest, loaded
//! at startup; behaviors beyond the built-in set are registered
//! programmatically before loading.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{RegistryError, ToolRegistry, ToolSpec};
use crate::typesys::{Shape, TypeError, TypeId, TypeLattice};
use crate::value::{Value, ValueMap};

/// How to draw a root value for a type when no predecessor output and no
/// tool default is available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorRule {
    /// A sampled parameter, uniform over a numeric range.
    Uniform { lo: f64, hi: f64 },
    /// A domain constant drawn from a fixed pool.
    Pool { values: Vec<Value> },
    /// A fixed domain constant.
    Constant { value: Value },
}

pub type PriorBook = BTreeMap<TypeId, PriorRule>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypeDecl {
    pub name: String,
    pub shape: Shape,
    #[serde(default)]
    pub parents: Vec<TypeId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub types: Vec<TypeDecl>,
    #[serde(default)]
    pub priors: BTreeMap<String, PriorRule>,
    pub tools: Vec<ToolSpec>,
}

impl Manifest {
    pub fn from_json(json: &str) -> Result<Self, ManifestError> {
        serde_json::from_str(json).map_err(ManifestError::Parse)
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("manifest failed health checks:\n{}", .0.join("\n"))]
    Unhealthy(Vec<String>),
}

/// A loaded corpus: the frozen lattice, the frozen registry and the prior
/// book for root binding.
pub struct Corpus {
    pub lattice: Arc<TypeLattice>,
    pub registry: ToolRegistry,
    pub priors: PriorBook,
}

impl Corpus {
    pub fn domains(&self) -> Vec<String> {
        self.registry.domains().map(str::to_string).collect()
    }

    /// Generated per-tool smoke test: invoke every tool on a nominal input
    /// assembled from defaults and priors, and require success. The shipped
    /// corpus must pass at 100%.
    pub fn health_check(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        let ids: Vec<_> = self
            .registry
            .query(None, None, None)
            .iter()
            .map(|t| t.id.clone())
            .collect();
        for id in ids {
            let spec = self.registry.get(&id).expect("listed tool exists");
            let mut args = ValueMap::new();
            for input in &spec.inputs {
                if spec.defaults.contains_key(&input.name) {
                    continue;
                }
                match self.nominal_value(&input.ty) {
                    Some(v) => {
                        args.insert(input.name.clone(), v);
                    }
                    None => problems.push(format!(
                        "tool `{}`: no prior or default covers input `{}` of type `{}`",
                        spec.id, input.name, input.ty
                    )),
                }
            }
            match self.registry.invoke_ephemeral(&id, &args, 0) {
                Ok(resp) if resp.is_success() => {}
                Ok(resp) => problems.push(format!(
                    "tool `{}` failed its nominal invocation: {}",
                    id,
                    resp.error.map(|e| e.message).unwrap_or_default()
                )),
                Err(e) => problems.push(format!("tool `{}`: {e}", id)),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    /// Deterministic representative value for a type, used by health checks.
    fn nominal_value(&self, ty: &TypeId) -> Option<Value> {
        match self.priors.get(ty)? {
            PriorRule::Uniform { lo, hi } => Some(Value::Number((lo + hi) / 2.0)),
            PriorRule::Pool { values } => values.first().cloned(),
            PriorRule::Constant { value } => Some(value.clone()),
        }
    }
}

/// Build lattice, registry and prior book from a manifest.
pub fn load_corpus(manifest: &Manifest) -> Result<Corpus, ManifestError> {
    let mut lattice = TypeLattice::new();
    // Two passes so declaration order does not matter: types first,
    // parent edges second.
    for decl in &manifest.types {
        lattice.register_type(&decl.name, decl.shape, &[])?;
    }
    for decl in &manifest.types {
        let child = TypeId::new(&decl.name);
        for parent in &decl.parents {
            lattice.add_subtype_edge(&child, parent)?;
        }
    }
    let lattice = Arc::new(lattice);
    let mut registry = ToolRegistry::new(Arc::clone(&lattice));
    for spec in &manifest.tools {
        registry.register_tool(spec.clone())?;
    }
    let mut priors = PriorBook::new();
    for (name, rule) in &manifest.priors {
        let ty = TypeId::new(name);
        if !lattice.contains(&ty) {
            return Err(ManifestError::Type(TypeError::UnknownType(ty)));
        }
        priors.insert(ty, rule.clone());
    }
    Ok(Corpus {
        lattice,
        registry,
        priors,
    })
}

/// The corpus shipped with the crate.
pub fn builtin_corpus_manifest() -> Manifest {
    static CORPUS_JSON: &str = include_str!("../../assets/corpus.json");
    Manifest::from_json(CORPUS_JSON).expect("shipped corpus parses")
}

/// Convenience: load and health-check the shipped corpus.
pub fn builtin_corpus() -> Corpus {
    load_corpus(&builtin_corpus_manifest()).expect("shipped corpus loads")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_corpus_loads_and_is_healthy() {
        let corpus = builtin_corpus();
        assert!(corpus.registry.query(None, None, None).len() >= 40);
        corpus.health_check().unwrap_or_else(|problems| {
            panic!("corpus unhealthy:\n{}", problems.join("\n"));
        });
    }

    #[test]
    fn shipped_corpus_covers_all_stages_and_granularities() {
        use super::super::{Granularity, Stage};
        let corpus = builtin_corpus();
        for domain in corpus.domains() {
            for stage in Stage::ALL {
                assert!(
                    !corpus.registry.query(Some(&domain), Some(stage), None).is_empty(),
                    "domain {domain} lacks stage {stage}"
                );
            }
            let composites = corpus
                .registry
                .query(Some(&domain), None, None)
                .iter()
                .filter(|t| t.granularity == Granularity::Composite)
                .count();
            assert!(composites >= 1, "domain {domain} lacks a composite tool");
        }
    }

    #[test]
    fn prior_must_reference_registered_type() {
        let mut manifest = builtin_corpus_manifest();
        manifest
            .priors
            .insert("NoSuchType".to_string(), PriorRule::Uniform { lo: 0.0, hi: 1.0 });
        assert!(load_corpus(&manifest).is_err());
    }
}
