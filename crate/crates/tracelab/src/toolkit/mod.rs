//! Tool specifications, the per-domain registry, the unified response
//! schema and function-call schema export.

mod behavior;
mod manifest;
mod schema;

pub use behavior::{builtin_behaviors, BehaviorCtx, BehaviorFn, BehaviorOutput};
pub use manifest::{
    builtin_corpus, builtin_corpus_manifest, load_corpus, Corpus, Manifest, ManifestError,
    PriorBook, PriorRule, TypeDecl,
};
pub use schema::{export_function_schemas, FunctionSchema};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::typesys::{TypeId, TypeLattice};
use crate::value::{short_digest, Value, ValueMap};

/// Identifier of a registered tool, unique within its domain.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ToolId(pub String);

impl ToolId {
    pub fn new(s: impl Into<String>) -> Self {
        ToolId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ToolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ToolId {
    fn from(s: &str) -> Self {
        ToolId(s.to_string())
    }
}

/// Position of a tool in the canonical workflow order
/// query -> computation -> analysis -> visualization.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Query = 0,
    Computation = 1,
    Analysis = 2,
    Visualization = 3,
}

impl Stage {
    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub const ALL: [Stage; 4] = [
        Stage::Query,
        Stage::Computation,
        Stage::Analysis,
        Stage::Visualization,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Query => "query",
            Stage::Computation => "computation",
            Stage::Analysis => "analysis",
            Stage::Visualization => "visualization",
        };
        f.write_str(s)
    }
}

/// Functional taxonomy of a tool. Usually coincides with its stage but is
/// declared independently in the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Query,
    Computation,
    Analysis,
    Visualization,
}

impl Category {
    pub fn default_stage(self) -> Stage {
        match self {
            Category::Query => Stage::Query,
            Category::Computation => Stage::Computation,
            Category::Analysis => Stage::Analysis,
            Category::Visualization => Stage::Visualization,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Atomic,
    Composite,
}

/// A named, typed input or output slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: TypeId,
}

impl Param {
    pub fn new(name: impl Into<String>, ty: impl Into<String>) -> Self {
        Param {
            name: name.into(),
            ty: TypeId::new(ty),
        }
    }
}

/// Full specification of one tool: identity, typed signature, taxonomy and
/// the id of the behavior that implements it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolSpec {
    pub id: ToolId,
    pub domain: String,
    pub description: String,
    pub inputs: Vec<Param>,
    pub outputs: Vec<Param>,
    pub stage: Stage,
    pub category: Category,
    pub granularity: Granularity,
    #[serde(default)]
    pub defaults: ValueMap,
    pub behavior: BehaviorSpec,
}

/// Reference to a built-in (or plugged-in) behavior plus its parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub id: String,
    #[serde(default)]
    pub params: ValueMap,
}

/// Error kinds a tool can report. Every error carries a non-empty diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToolErrorKind {
    ShapeMismatch,
    RangeViolation,
    MissingArgument,
    DomainError,
    Timeout,
}

impl fmt::Display for ToolErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ToolErrorKind::ShapeMismatch => "ShapeMismatch",
            ToolErrorKind::RangeViolation => "RangeViolation",
            ToolErrorKind::MissingArgument => "MissingArgument",
            ToolErrorKind::DomainError => "DomainError",
            ToolErrorKind::Timeout => "Timeout",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolError {
    pub kind: ToolErrorKind,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offending_input: Option<String>,
}

impl ToolError {
    pub fn new(kind: ToolErrorKind, message: impl Into<String>) -> Self {
        let message = message.into();
        debug_assert!(!message.is_empty());
        ToolError {
            kind,
            message,
            offending_input: None,
        }
    }

    pub fn on_input(mut self, input: impl Into<String>) -> Self {
        self.offending_input = Some(input.into());
        self
    }

    pub fn missing_argument(name: &str) -> Self {
        ToolError::new(
            ToolErrorKind::MissingArgument,
            format!("missing required argument `{name}`"),
        )
        .on_input(name)
    }
}

/// Reference to a spilled or persisted artifact file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub filepath: String,
    pub shape: Vec<u64>,
    pub nnz: u64,
    pub sparsity: f64,
}

impl ArtifactRef {
    pub fn new(filepath: String, shape: Vec<u64>, nnz: u64) -> Self {
        let total: u64 = shape.iter().product();
        let sparsity = if total > 0 {
            1.0 - nnz as f64 / total as f64
        } else {
            0.0
        };
        ArtifactRef {
            filepath,
            shape,
            nnz,
            sparsity,
        }
    }

    pub fn summary_value(&self) -> Value {
        let mut m = BTreeMap::new();
        m.insert("filepath".to_string(), Value::Text(self.filepath.clone()));
        m.insert(
            "shape".to_string(),
            Value::List(self.shape.iter().map(|&d| Value::Int(d as i64)).collect()),
        );
        m.insert("nnz".to_string(), Value::Int(self.nnz as i64));
        m.insert("sparsity".to_string(), Value::Number(self.sparsity));
        Value::Map(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Success,
    Error,
}

/// Unified tool response: on success, `result` plus `metadata`; on failure,
/// a structured error. Exactly one of `result`/`error` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResponse {
    pub status: ResponseStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    pub metadata: BTreeMap<String, Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ToolError>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub artifact: Option<ArtifactRef>,
    /// Outputs beyond the first, for multi-output signatures.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_outputs: Vec<Value>,
}

impl ToolResponse {
    pub fn success(result: Value, metadata: BTreeMap<String, Value>) -> Self {
        ToolResponse {
            status: ResponseStatus::Success,
            result: Some(result),
            metadata,
            error: None,
            artifact: None,
            extra_outputs: Vec::new(),
        }
    }

    pub fn failure(error: ToolError) -> Self {
        ToolResponse {
            status: ResponseStatus::Error,
            result: None,
            metadata: BTreeMap::new(),
            error: Some(error),
            artifact: None,
            extra_outputs: Vec::new(),
        }
    }

    pub fn is_success(&self) -> bool {
        self.status == ResponseStatus::Success
    }

    /// Output at signature position `i` (0 = primary result).
    pub fn output(&self, i: usize) -> Option<&Value> {
        if i == 0 {
            self.result.as_ref()
        } else {
            self.extra_outputs.get(i - 1)
        }
    }

    pub fn outputs(&self) -> impl Iterator<Item = &Value> {
        self.result.iter().chain(self.extra_outputs.iter())
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("response is always JSON-encodable")
    }
}

/// In-memory artifact area for one episode. Files live under
/// `mid_result/<domain>/<episode>/` and can be flushed to disk.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    episode: String,
    files: BTreeMap<String, Vec<u8>>,
}

impl ArtifactStore {
    pub fn new(episode: impl Into<String>) -> Self {
        ArtifactStore {
            episode: episode.into(),
            files: BTreeMap::new(),
        }
    }

    pub fn episode(&self) -> &str {
        &self.episode
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn read(&self, path: &str) -> Option<&[u8]> {
        self.files.get(path).map(|v| v.as_slice())
    }

    fn artifact_path(&self, domain: &str, stem: &str) -> String {
        format!("mid_result/{domain}/{}/{stem}.json", self.episode)
    }

    fn write(&mut self, path: String, bytes: Vec<u8>) {
        self.files.insert(path, bytes);
    }

    /// Drop files outside the given path set. Failed tool calls must not
    /// leave partial artifacts behind.
    pub fn retain_paths(&mut self, keep: &std::collections::BTreeSet<String>) {
        self.files.retain(|p, _| keep.contains(p));
    }

    /// Write all artifact files below the given directory.
    pub fn flush_to_dir(&self, root: &std::path::Path) -> std::io::Result<()> {
        for (path, bytes) in &self.files {
            let full = root.join(path);
            if let Some(parent) = full.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(full, bytes)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("tool `{id}` is already registered in domain `{domain}`")]
    DuplicateTool { id: ToolId, domain: String },
    #[error("tool `{id}` references unregistered type `{ty}`")]
    UnknownType { id: ToolId, ty: TypeId },
    #[error("tool `{id}` default for `{input}` does not validate: {reason}")]
    InvalidDefault {
        id: ToolId,
        input: String,
        reason: String,
    },
    #[error("tool `{id}` must declare at least one output")]
    NoOutputs { id: ToolId },
    #[error("tool `{id}` default targets unknown input `{input}`")]
    UnknownDefaultInput { id: ToolId, input: String },
    #[error("tool `{id}` references unknown behavior `{behavior}`")]
    UnknownBehavior { id: ToolId, behavior: String },
    #[error("unknown tool `{0}`")]
    UnknownTool(ToolId),
}

/// Result size above which a success result spills to an artifact file.
pub const SPILL_THRESHOLD_BYTES: usize = 16 * 1024;

/// The tool registry: specs indexed by (domain, id) plus the behavior table.
/// Immutable once loading finishes; invocation is pure in (args, seed) and
/// therefore safe from many episodes at once.
pub struct ToolRegistry {
    lattice: Arc<TypeLattice>,
    tools: BTreeMap<ToolId, ToolSpec>,
    by_domain: BTreeMap<String, Vec<ToolId>>,
    behaviors: HashMap<String, Arc<BehaviorFn>>,
    spill_threshold: usize,
}

impl fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToolRegistry")
            .field("tools", &self.tools.len())
            .field("domains", &self.by_domain.len())
            .field("behaviors", &self.behaviors.len())
            .finish()
    }
}

impl ToolRegistry {
    pub fn new(lattice: Arc<TypeLattice>) -> Self {
        ToolRegistry {
            lattice,
            tools: BTreeMap::new(),
            by_domain: BTreeMap::new(),
            behaviors: builtin_behaviors(),
            spill_threshold: SPILL_THRESHOLD_BYTES,
        }
    }

    pub fn lattice(&self) -> &TypeLattice {
        &self.lattice
    }

    pub fn lattice_arc(&self) -> Arc<TypeLattice> {
        Arc::clone(&self.lattice)
    }

    #[cfg(test)]
    pub(crate) fn set_spill_threshold(&mut self, bytes: usize) {
        self.spill_threshold = bytes;
    }

    /// Plug-in point: register a behavior beyond the built-in set.
    pub fn register_behavior(&mut self, id: impl Into<String>, f: Arc<BehaviorFn>) {
        self.behaviors.insert(id.into(), f);
    }

    pub fn register_tool(&mut self, spec: ToolSpec) -> Result<ToolId, RegistryError> {
        if spec.outputs.is_empty() {
            return Err(RegistryError::NoOutputs { id: spec.id.clone() });
        }
        if let Some(existing) = self.tools.get(&spec.id) {
            if existing.domain == spec.domain {
                return Err(RegistryError::DuplicateTool {
                    id: spec.id.clone(),
                    domain: spec.domain.clone(),
                });
            }
            // Tool ids double as function-call names, so they are global.
            return Err(RegistryError::DuplicateTool {
                id: spec.id.clone(),
                domain: existing.domain.clone(),
            });
        }
        for p in spec.inputs.iter().chain(spec.outputs.iter()) {
            if !self.lattice.contains(&p.ty) {
                return Err(RegistryError::UnknownType {
                    id: spec.id.clone(),
                    ty: p.ty.clone(),
                });
            }
        }
        for (name, value) in &spec.defaults {
            let Some(param) = spec.inputs.iter().find(|p| &p.name == name) else {
                return Err(RegistryError::UnknownDefaultInput {
                    id: spec.id.clone(),
                    input: name.clone(),
                });
            };
            if let Err(e) = self.lattice.validate_value(value, &param.ty) {
                return Err(RegistryError::InvalidDefault {
                    id: spec.id.clone(),
                    input: name.clone(),
                    reason: e.to_string(),
                });
            }
        }
        if !self.behaviors.contains_key(&spec.behavior.id) {
            return Err(RegistryError::UnknownBehavior {
                id: spec.id.clone(),
                behavior: spec.behavior.id.clone(),
            });
        }
        let id = spec.id.clone();
        self.by_domain
            .entry(spec.domain.clone())
            .or_default()
            .push(id.clone());
        self.by_domain.get_mut(&spec.domain).unwrap().sort();
        self.tools.insert(id.clone(), spec);
        Ok(id)
    }

    pub fn get(&self, id: &ToolId) -> Result<&ToolSpec, RegistryError> {
        self.tools
            .get(id)
            .ok_or_else(|| RegistryError::UnknownTool(id.clone()))
    }

    pub fn contains(&self, id: &ToolId) -> bool {
        self.tools.contains_key(id)
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.by_domain.keys().map(|s| s.as_str())
    }

    pub fn tools_in_domain(&self, domain: &str) -> &[ToolId] {
        self.by_domain.get(domain).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Filtered listing in deterministic (domain, id) order. Filters are
    /// conjunctive; no match yields an empty list.
    pub fn query(
        &self,
        domain: Option<&str>,
        stage: Option<Stage>,
        category: Option<Category>,
    ) -> Vec<&ToolSpec> {
        let mut out: Vec<&ToolSpec> = self
            .tools
            .values()
            .filter(|t| domain.is_none_or(|d| t.domain == d))
            .filter(|t| stage.is_none_or(|s| t.stage == s))
            .filter(|t| category.is_none_or(|c| t.category == c))
            .collect();
        out.sort_by(|a, b| (&a.domain, &a.id).cmp(&(&b.domain, &b.id)));
        out
    }

    /// Execute a tool against bound arguments. Tool-level failures come back
    /// inside the response; only an unknown tool id is an `Err`.
    pub fn invoke(
        &self,
        id: &ToolId,
        args: &ValueMap,
        seed: u64,
        store: &mut ArtifactStore,
    ) -> Result<ToolResponse, RegistryError> {
        let spec = self.get(id)?;
        let mut bound = args.clone();
        for (name, value) in &spec.defaults {
            bound.entry(name.clone()).or_insert_with(|| value.clone());
        }
        // Boundary checks before any behavior runs.
        for p in &spec.inputs {
            let Some(v) = bound.get(&p.name) else {
                return Ok(ToolResponse::failure(ToolError::missing_argument(&p.name)));
            };
            if let Err(e) = self.lattice.validate_value(v, &p.ty) {
                return Ok(ToolResponse::failure(
                    ToolError::new(ToolErrorKind::ShapeMismatch, e.to_string())
                        .on_input(p.name.clone()),
                ));
            }
        }
        let behavior = Arc::clone(
            self.behaviors
                .get(&spec.behavior.id)
                .expect("behavior checked at registration"),
        );
        let mut ctx = BehaviorCtx::new(self, spec, &bound, seed, store);
        let out = match behavior(&mut ctx) {
            Ok(out) => out,
            Err(e) => return Ok(ToolResponse::failure(e)),
        };
        let mut persisted = ctx.take_persisted();
        let BehaviorOutput {
            mut outputs,
            mut metadata,
        } = out;
        if outputs.len() != spec.outputs.len() {
            return Ok(ToolResponse::failure(ToolError::new(
                ToolErrorKind::DomainError,
                format!(
                    "behavior produced {} outputs, signature declares {}",
                    outputs.len(),
                    spec.outputs.len()
                ),
            )));
        }
        for (value, param) in outputs.iter().zip(&spec.outputs) {
            if let Err(e) = self.lattice.validate_value(value, &param.ty) {
                return Ok(ToolResponse::failure(ToolError::new(
                    ToolErrorKind::ShapeMismatch,
                    format!("output `{}` invalid: {e}", param.name),
                )));
            }
            if let Value::Number(n) = value {
                if !n.is_finite() {
                    return Ok(ToolResponse::failure(ToolError::new(
                        ToolErrorKind::DomainError,
                        format!("output `{}` is not finite", param.name),
                    )));
                }
            }
        }
        if let Some(units) = spec.behavior.params.get("units") {
            metadata.entry("units".to_string()).or_insert_with(|| units.clone());
        }
        metadata
            .entry("units".to_string())
            .or_insert_with(|| Value::Text("dimensionless".to_string()));

        // Spill oversized primary results to the artifact area.
        let primary = outputs.remove(0);
        let encoded = primary.to_canonical_json();
        let (result, artifact) = if encoded.len() > self.spill_threshold && persisted.is_none() {
            let stem = format!("{}-{}", spec.id, short_digest(encoded.as_bytes()));
            let path = store.artifact_path(&spec.domain, &stem);
            store.write(path.clone(), encoded.into_bytes());
            let art = ArtifactRef::new(path, value_dims(&primary), value_nnz(&primary));
            (art.summary_value(), Some(art))
        } else {
            (primary, persisted.take())
        };

        let mut resp = ToolResponse::success(result, metadata);
        resp.artifact = artifact;
        resp.extra_outputs = outputs;
        Ok(resp)
    }

    /// One-off invocation with a throwaway artifact namespace.
    pub fn invoke_ephemeral(
        &self,
        id: &ToolId,
        args: &ValueMap,
        seed: u64,
    ) -> Result<ToolResponse, RegistryError> {
        let mut store = ArtifactStore::new("adhoc");
        self.invoke(id, args, seed, &mut store)
    }
}

/// Dimensions of a value for artifact bookkeeping: nested rectangular lists
/// report their full extent, everything else is a single cell.
pub(crate) fn value_dims(v: &Value) -> Vec<u64> {
    match v {
        Value::List(items) => {
            let mut dims = vec![items.len() as u64];
            if let Some(Value::List(first)) = items.first() {
                let cols = first.len();
                if items.iter().all(|it| matches!(it, Value::List(l) if l.len() == cols)) {
                    dims.push(cols as u64);
                }
            }
            dims
        }
        _ => vec![1],
    }
}

/// Count of non-zero numeric leaves.
pub(crate) fn value_nnz(v: &Value) -> u64 {
    match v {
        Value::Int(i) => u64::from(*i != 0),
        Value::Number(n) => u64::from(*n != 0.0),
        Value::List(items) => items.iter().map(value_nnz).sum(),
        Value::Map(m) => m.values().map(value_nnz).sum(),
        Value::Bool(_) | Value::Text(_) => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::typesys::Shape;

    fn small_registry() -> ToolRegistry {
        let mut lattice = TypeLattice::new();
        lattice.register_type("Float", Shape::Number, &[]).unwrap();
        let mut reg = ToolRegistry::new(Arc::new(lattice));
        reg.register_tool(ToolSpec {
            id: ToolId::new("divide"),
            domain: "math".into(),
            description: "Divide the first argument by the second.".into(),
            inputs: vec![Param::new("a", "Float"), Param::new("b", "Float")],
            outputs: vec![Param::new("quotient", "Float")],
            stage: Stage::Computation,
            category: Category::Computation,
            granularity: Granularity::Atomic,
            defaults: ValueMap::new(),
            behavior: BehaviorSpec {
                id: "ratio".into(),
                params: ValueMap::new(),
            },
        })
        .unwrap();
        reg.register_tool(ToolSpec {
            id: ToolId::new("square_root"),
            domain: "math".into(),
            description: "Principal square root of a non-negative number.".into(),
            inputs: vec![Param::new("x", "Float")],
            outputs: vec![Param::new("root", "Float")],
            stage: Stage::Computation,
            category: Category::Computation,
            granularity: Granularity::Atomic,
            defaults: ValueMap::new(),
            behavior: BehaviorSpec {
                id: "sqrt".into(),
                params: ValueMap::new(),
            },
        })
        .unwrap();
        reg
    }

    fn args(pairs: &[(&str, Value)]) -> ValueMap {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn divide_succeeds_on_exact_arithmetic() {
        let reg = small_registry();
        let resp = reg
            .invoke_ephemeral(
                &ToolId::new("divide"),
                &args(&[("a", Value::Number(6.0)), ("b", Value::Number(3.0))]),
                0,
            )
            .unwrap();
        assert!(resp.is_success());
        assert_eq!(resp.result, Some(Value::Number(2.0)));
        assert!(resp.metadata.contains_key("units"));
    }

    #[test]
    fn divide_by_zero_is_a_domain_error() {
        let reg = small_registry();
        let resp = reg
            .invoke_ephemeral(
                &ToolId::new("divide"),
                &args(&[("a", Value::Number(1.0)), ("b", Value::Number(0.0))]),
                0,
            )
            .unwrap();
        let err = resp.error.unwrap();
        assert_eq!(err.kind, ToolErrorKind::DomainError);
        assert!(err.message.contains("division by zero"));
    }

    #[test]
    fn sqrt_of_negative_names_the_offending_input() {
        let reg = small_registry();
        let resp = reg
            .invoke_ephemeral(
                &ToolId::new("square_root"),
                &args(&[("x", Value::Number(-4.0))]),
                0,
            )
            .unwrap();
        let err = resp.error.unwrap();
        assert_eq!(err.kind, ToolErrorKind::RangeViolation);
        assert_eq!(err.offending_input.as_deref(), Some("x"));
    }

    #[test]
    fn missing_argument_is_reported_by_name() {
        let reg = small_registry();
        let resp = reg
            .invoke_ephemeral(&ToolId::new("divide"), &args(&[("a", Value::Number(1.0))]), 0)
            .unwrap();
        let err = resp.error.unwrap();
        assert_eq!(err.kind, ToolErrorKind::MissingArgument);
        assert_eq!(err.offending_input.as_deref(), Some("b"));
        assert!(!err.message.is_empty());
    }

    #[test]
    fn duplicate_tool_rejected() {
        let mut reg = small_registry();
        let err = reg
            .register_tool(ToolSpec {
                id: ToolId::new("divide"),
                domain: "math".into(),
                description: "again".into(),
                inputs: vec![],
                outputs: vec![Param::new("y", "Float")],
                stage: Stage::Computation,
                category: Category::Computation,
                granularity: Granularity::Atomic,
                defaults: ValueMap::new(),
                behavior: BehaviorSpec {
                    id: "affine".into(),
                    params: ValueMap::new(),
                },
            })
            .unwrap_err();
        assert!(matches!(err, RegistryError::DuplicateTool { .. }));
    }

    #[test]
    fn invalid_default_rejected() {
        let mut reg = small_registry();
        let err = reg
            .register_tool(ToolSpec {
                id: ToolId::new("bad_default"),
                domain: "math".into(),
                description: "default of the wrong shape".into(),
                inputs: vec![Param::new("x", "Float")],
                outputs: vec![Param::new("y", "Float")],
                stage: Stage::Computation,
                category: Category::Computation,
                granularity: Granularity::Atomic,
                defaults: args(&[("x", Value::Text("oops".into()))]),
                behavior: BehaviorSpec {
                    id: "affine".into(),
                    params: ValueMap::new(),
                },
            })
            .unwrap_err();
        assert!(matches!(err, RegistryError::InvalidDefault { .. }));
    }

    #[test]
    fn invoke_is_deterministic_in_args_and_seed() {
        let reg = small_registry();
        let a = args(&[("a", Value::Number(7.5)), ("b", Value::Number(2.5))]);
        let r1 = reg.invoke_ephemeral(&ToolId::new("divide"), &a, 42).unwrap();
        let r2 = reg.invoke_ephemeral(&ToolId::new("divide"), &a, 42).unwrap();
        assert_eq!(r1.to_canonical_json(), r2.to_canonical_json());
    }

    #[test]
    fn query_orders_by_domain_then_id() {
        let reg = small_registry();
        let all = reg.query(Some("math"), None, None);
        let ids: Vec<&str> = all.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, vec!["divide", "square_root"]);
        assert!(reg.query(Some("nonexistent"), None, None).is_empty());
    }

    #[test]
    fn artifact_ref_sparsity_arithmetic() {
        let a = ArtifactRef::new("p".into(), vec![4, 5], 15);
        assert!((a.sparsity - (1.0 - 15.0 / 20.0)).abs() < 1e-12);
        // Empty shape: the product convention is 1 cell.
        let scalar = ArtifactRef::new("p".into(), vec![], 0);
        assert_eq!(scalar.sparsity, 1.0);
    }
}
