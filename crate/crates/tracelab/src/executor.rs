//! Forward execution of bound programs against the environment.
//!
//! Programs run in a canonical topological order (Kahn's algorithm with a
//! lexicographic ready set). Every step is recorded as (tool, inputs,
//! response, state digest); a fully successful run is a golden trace, and a
//! deliberately induced failure followed by its corrected re-invocation
//! yields an error-recovery augmented trace.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::depgraph::SlotKey;
use crate::sampler::{Binding, ProgramGraph};
use crate::toolkit::{ArtifactStore, ToolId, ToolRegistry, ToolResponse};
use crate::value::{Value, ValueMap};

/// Per-episode environment state: an isolated artifact namespace, read-only
/// problem context, the append-only step history and the episode seed.
#[derive(Debug)]
pub struct EnvState {
    episode_id: String,
    context: BTreeMap<String, Vec<u8>>,
    store: ArtifactStore,
    history: Vec<StepRecord>,
    seed: u64,
    registered: BTreeSet<ToolId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub tool: ToolId,
    pub inputs: ValueMap,
    pub response: ToolResponse,
    pub state_digest: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Golden,
    Failed,
}

/// A root parameter of the underlying program: the slot it fills and the
/// concrete value. Roots are problem givens, not concealed intermediates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootParam {
    pub tool: ToolId,
    pub input: String,
    pub value: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trace {
    pub trace_id: String,
    pub program_id: String,
    pub goal: ToolId,
    pub seed: u64,
    pub episode_id: String,
    pub status: TraceStatus,
    pub steps: Vec<StepRecord>,
    pub final_outputs: BTreeMap<String, Value>,
    #[serde(default)]
    pub root_inputs: Vec<RootParam>,
}

/// A golden trace with exactly the designated fault positions replaced by
/// an (error step, corrected success step) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentedTrace {
    pub trace_id: String,
    pub program_id: String,
    pub goal: ToolId,
    pub seed: u64,
    pub episode_id: String,
    pub fault_positions: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub final_outputs: BTreeMap<String, Value>,
}

#[derive(Debug, Error)]
pub enum ExecuteError {
    #[error("program is invalid: {0}")]
    InvalidProgram(String),
    #[error("tool `{0}` is not registered for this episode")]
    UnregisteredTool(ToolId),
    #[error("program did not execute to golden status")]
    NotGolden,
    #[error("corruption did not produce an error at step {position}")]
    FaultNotTriggered { position: usize },
    #[error("fault position {position} is outside the trace (length {len})")]
    InvalidFaultPosition { position: usize, len: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace file is malformed: {0}")]
    Malformed(String),
}

impl EnvState {
    pub fn episode_id(&self) -> &str {
        &self.episode_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn registered_tools(&self) -> &BTreeSet<ToolId> {
        &self.registered
    }

    pub fn context_file(&self, path: &str) -> Option<&[u8]> {
        self.context.get(path).map(|v| v.as_slice())
    }

    pub fn artifact_paths(&self) -> Vec<String> {
        self.store.paths().map(str::to_string).collect()
    }

    pub fn artifacts(&self) -> &ArtifactStore {
        &self.store
    }

    /// Content digest of the environment state: artifact paths plus history
    /// length. Comparable across episodes without storing full snapshots.
    pub fn state_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.store.paths() {
            hasher.update(p.as_bytes());
            hasher.update([0u8]);
        }
        hasher.update((self.history.len() as u64).to_le_bytes());
        hex::encode(&hasher.finalize()[..16])
    }
}

/// Fresh, isolated episode environment. The tool set is fixed for the
/// episode's lifetime and the artifact namespace is keyed by episode id.
pub fn new_episode(
    episode_id: impl Into<String>,
    task_assets: BTreeMap<String, Vec<u8>>,
    registered_tools: BTreeSet<ToolId>,
    seed: u64,
) -> EnvState {
    let episode_id = episode_id.into();
    EnvState {
        store: ArtifactStore::new(episode_id.clone()),
        episode_id,
        context: task_assets,
        history: Vec::new(),
        seed,
        registered: registered_tools,
    }
}

/// Execute one action against the environment: run the tool, append the
/// step record, return the observation. Error responses append history but
/// leave the artifact area untouched.
pub fn step(
    env: &mut EnvState,
    tool: &ToolId,
    inputs: &ValueMap,
    registry: &ToolRegistry,
) -> Result<ToolResponse, ExecuteError> {
    if !env.registered.contains(tool) {
        return Err(ExecuteError::UnregisteredTool(tool.clone()));
    }
    let before: BTreeSet<String> = env.store.paths().map(str::to_string).collect();
    let response = registry
        .invoke(tool, inputs, env.seed, &mut env.store)
        .map_err(|e| ExecuteError::InvalidProgram(e.to_string()))?;
    if !response.is_success() {
        env.store.retain_paths(&before);
    }
    let record = StepRecord {
        index: env.history.len() + 1,
        tool: tool.clone(),
        inputs: inputs.clone(),
        response: response.clone(),
        state_digest: String::new(),
        seed: env.seed,
    };
    env.history.push(record);
    let digest = env.state_digest();
    env.history.last_mut().expect("just pushed").state_digest = digest;
    Ok(response)
}

/// Canonical topological order: Kahn's algorithm with the ready set ordered
/// by tool id.
pub fn topological_order(program: &ProgramGraph) -> Result<Vec<ToolId>, ExecuteError> {
    let edges = program.producer_edges();
    let mut indegree: BTreeMap<ToolId, usize> =
        program.nodes.iter().map(|n| (n.clone(), 0)).collect();
    for (_, v) in &edges {
        *indegree
            .get_mut(v)
            .ok_or_else(|| ExecuteError::InvalidProgram(format!("edge into unknown node {v}")))? +=
            1;
    }
    let mut ready: BTreeSet<ToolId> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(n, _)| n.clone())
        .collect();
    let mut order = Vec::with_capacity(program.nodes.len());
    while let Some(next) = ready.iter().next().cloned() {
        ready.remove(&next);
        order.push(next.clone());
        for (u, v) in &edges {
            if *u == next {
                let d = indegree.get_mut(v).expect("checked above");
                *d -= 1;
                if *d == 0 {
                    ready.insert(v.clone());
                }
            }
        }
    }
    if order.len() != program.nodes.len() {
        return Err(ExecuteError::InvalidProgram(
            "binding relation is cyclic".to_string(),
        ));
    }
    Ok(order)
}

/// Structural precondition check against the registry (cheap form of full
/// program validation, used at the execution boundary).
fn check_program(program: &ProgramGraph, registry: &ToolRegistry) -> Result<(), ExecuteError> {
    for tool in &program.nodes {
        let spec = registry
            .get(tool)
            .map_err(|e| ExecuteError::InvalidProgram(e.to_string()))?;
        for j in 0..spec.inputs.len() {
            let slot = SlotKey {
                tool: tool.clone(),
                input: j,
            };
            match program.bindings.get(&slot) {
                None => {
                    return Err(ExecuteError::InvalidProgram(format!(
                        "unbound slot {tool}[{j}]"
                    )))
                }
                Some(Binding::Producer { tool: u, output: i }) => {
                    let producer = registry
                        .get(u)
                        .map_err(|e| ExecuteError::InvalidProgram(e.to_string()))?;
                    if !program.nodes.contains(u) {
                        return Err(ExecuteError::InvalidProgram(format!(
                            "producer {u} for {tool}[{j}] is outside the program"
                        )));
                    }
                    let Some(beta) = producer.outputs.get(*i) else {
                        return Err(ExecuteError::InvalidProgram(format!(
                            "producer {u} has no output {i}"
                        )));
                    };
                    let ok = registry
                        .lattice()
                        .is_subtype(&beta.ty, &spec.inputs[j].ty)
                        .unwrap_or(false);
                    if !ok {
                        return Err(ExecuteError::InvalidProgram(format!(
                            "type mismatch at {tool}[{j}]"
                        )));
                    }
                }
                Some(Binding::Root { value, .. }) => {
                    if registry
                        .lattice()
                        .validate_value(value, &spec.inputs[j].ty)
                        .is_err()
                    {
                        return Err(ExecuteError::InvalidProgram(format!(
                            "root value invalid at {tool}[{j}]"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

fn derived_episode_id(prefix: &str, program: &ProgramGraph, seed: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(program.to_json().as_bytes());
    hasher.update(seed.to_le_bytes());
    format!("{prefix}-{}", hex::encode(&hasher.finalize()[..6]))
}

/// Assemble the runtime inputs of one node from its bindings and the
/// responses recorded so far.
fn assemble_inputs(
    program: &ProgramGraph,
    registry: &ToolRegistry,
    tool: &ToolId,
    responses: &BTreeMap<ToolId, ToolResponse>,
) -> ValueMap {
    let spec = registry.get(tool).expect("checked program");
    let mut inputs = ValueMap::new();
    for (j, param) in spec.inputs.iter().enumerate() {
        let slot = SlotKey {
            tool: tool.clone(),
            input: j,
        };
        let value = match program.bindings.get(&slot).expect("checked program") {
            Binding::Producer { tool: u, output: i } => responses
                .get(u)
                .expect("topological order executes producers first")
                .output(*i)
                .expect("producer outputs validated")
                .clone(),
            Binding::Root { value, .. } => value.clone(),
        };
        inputs.insert(param.name.clone(), value);
    }
    inputs
}

/// Execute a bound program in topological order. Halts at the first error;
/// the trace is golden exactly when every step succeeded.
pub fn execute(
    program: &ProgramGraph,
    registry: &ToolRegistry,
    seed: u64,
) -> Result<Trace, ExecuteError> {
    execute_collect(program, registry, seed).map(|(t, _)| t)
}

/// `execute` variant that also hands back the episode's artifact store so
/// callers can flush `mid_result/` files to disk.
pub fn execute_collect(
    program: &ProgramGraph,
    registry: &ToolRegistry,
    seed: u64,
) -> Result<(Trace, ArtifactStore), ExecuteError> {
    check_program(program, registry)?;
    let order = topological_order(program)?;
    let episode_id = derived_episode_id("exec", program, seed);
    let mut env = new_episode(
        episode_id.clone(),
        BTreeMap::new(),
        program.nodes.iter().cloned().collect(),
        seed,
    );
    let mut responses: BTreeMap<ToolId, ToolResponse> = BTreeMap::new();
    let mut status = TraceStatus::Golden;
    for tool in &order {
        let inputs = assemble_inputs(program, registry, tool, &responses);
        let response = step(&mut env, tool, &inputs, registry)?;
        let ok = response.is_success();
        responses.insert(tool.clone(), response);
        if !ok {
            status = TraceStatus::Failed;
            break;
        }
    }
    let final_outputs = collect_final_outputs(program, registry, &responses, status);
    let program_id = program.id();
    let trace = Trace {
        trace_id: format!("trace-{}", &episode_id["exec-".len()..]),
        program_id,
        goal: program.goal.clone(),
        seed,
        episode_id,
        status,
        steps: env.history,
        final_outputs,
        root_inputs: collect_root_inputs(program, registry),
    };
    Ok((trace, env.store))
}

fn collect_root_inputs(program: &ProgramGraph, registry: &ToolRegistry) -> Vec<RootParam> {
    let mut out = Vec::new();
    for (slot, binding) in &program.bindings {
        if let Binding::Root { value, .. } = binding {
            let input = registry
                .get(&slot.tool)
                .ok()
                .and_then(|s| s.inputs.get(slot.input).map(|p| p.name.clone()))
                .unwrap_or_else(|| slot.input.to_string());
            out.push(RootParam {
                tool: slot.tool.clone(),
                input,
                value: value.clone(),
            });
        }
    }
    out
}

fn collect_final_outputs(
    program: &ProgramGraph,
    registry: &ToolRegistry,
    responses: &BTreeMap<ToolId, ToolResponse>,
    status: TraceStatus,
) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    if status != TraceStatus::Golden {
        return out;
    }
    if let (Ok(spec), Some(resp)) = (registry.get(&program.goal), responses.get(&program.goal)) {
        for (i, param) in spec.outputs.iter().enumerate() {
            if let Some(v) = resp.output(i) {
                out.insert(param.name.clone(), v.clone());
            }
        }
    }
    out
}

/// A deliberate input corruption that provably trips a boundary check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum CorruptionRule {
    /// Remove a required argument (one without a declared default).
    DropRequiredArg { name: Option<String> },
    /// Push a numeric argument below any non-negative range bound.
    NegateNumeric { name: Option<String> },
    /// Replace an argument with a value of the wrong shape class.
    SwapWrongShape { name: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    /// 1-based step index in the golden trace.
    pub position: usize,
    pub corruption: CorruptionRule,
}

impl CorruptionRule {
    /// Apply the corruption to an input map; `None` when no argument is
    /// eligible.
    pub fn apply(
        &self,
        spec: &crate::toolkit::ToolSpec,
        inputs: &ValueMap,
    ) -> Option<ValueMap> {
        let mut out = inputs.clone();
        match self {
            CorruptionRule::DropRequiredArg { name } => {
                let target = match name {
                    Some(n) => Some(n.clone()),
                    None => spec
                        .inputs
                        .iter()
                        .map(|p| p.name.clone())
                        .find(|n| !spec.defaults.contains_key(n) && out.contains_key(n)),
                }?;
                out.remove(&target)?;
                Some(out)
            }
            CorruptionRule::NegateNumeric { name } => {
                let target = match name {
                    Some(n) => Some(n.clone()),
                    None => spec
                        .inputs
                        .iter()
                        .map(|p| p.name.clone())
                        .find(|n| out.get(n).map(Value::is_numeric).unwrap_or(false)),
                }?;
                let corrupted = match out.get(&target)? {
                    Value::Number(x) => Value::Number(-x.abs() - 1.0),
                    Value::Int(i) => Value::Int(-i.abs() - 1),
                    _ => return None,
                };
                out.insert(target, corrupted);
                Some(out)
            }
            CorruptionRule::SwapWrongShape { name } => {
                let target = match name {
                    Some(n) => Some(n.clone()),
                    None => spec
                        .inputs
                        .first()
                        .map(|p| p.name.clone())
                        .filter(|n| out.contains_key(n)),
                }?;
                let corrupted = match out.get(&target)? {
                    Value::Text(_) => Value::Number(0.0),
                    _ => Value::Text("corrupted".to_string()),
                };
                out.insert(target, corrupted);
                Some(out)
            }
        }
    }
}

/// Re-execute a golden program with one induced failure at each fault
/// position, immediately followed by the corrected re-invocation of the same
/// tool. Downstream values are identical to the unfaulted trace.
pub fn augment_with_recovery(
    program: &ProgramGraph,
    fault: &FaultSpec,
    registry: &ToolRegistry,
    seed: u64,
) -> Result<AugmentedTrace, ExecuteError> {
    augment_with_recovery_multi(program, std::slice::from_ref(fault), registry, seed)
}

/// Multi-fault variant behind the same contract; positions refer to the
/// unfaulted golden step indices.
pub fn augment_with_recovery_multi(
    program: &ProgramGraph,
    faults: &[FaultSpec],
    registry: &ToolRegistry,
    seed: u64,
) -> Result<AugmentedTrace, ExecuteError> {
    augment_collect(program, faults, registry, seed).map(|(t, _)| t)
}

/// `augment_with_recovery_multi` variant that also hands back the episode's
/// artifact store.
pub fn augment_collect(
    program: &ProgramGraph,
    faults: &[FaultSpec],
    registry: &ToolRegistry,
    seed: u64,
) -> Result<(AugmentedTrace, ArtifactStore), ExecuteError> {
    let golden = execute(program, registry, seed)?;
    if golden.status != TraceStatus::Golden {
        return Err(ExecuteError::NotGolden);
    }
    let mut by_position: BTreeMap<usize, &CorruptionRule> = BTreeMap::new();
    for f in faults {
        if f.position == 0 || f.position > golden.steps.len() {
            return Err(ExecuteError::InvalidFaultPosition {
                position: f.position,
                len: golden.steps.len(),
            });
        }
        by_position.insert(f.position, &f.corruption);
    }
    let order = topological_order(program)?;
    let episode_id = derived_episode_id("aug", program, seed);
    let mut env = new_episode(
        episode_id.clone(),
        BTreeMap::new(),
        program.nodes.iter().cloned().collect(),
        seed,
    );
    let mut responses: BTreeMap<ToolId, ToolResponse> = BTreeMap::new();
    let mut fault_positions = Vec::new();
    for (k, tool) in order.iter().enumerate() {
        let position = k + 1;
        let inputs = assemble_inputs(program, registry, tool, &responses);
        if let Some(rule) = by_position.get(&position) {
            let spec = registry.get(tool).expect("checked program");
            let corrupted = rule
                .apply(spec, &inputs)
                .ok_or(ExecuteError::FaultNotTriggered { position })?;
            let failed = step(&mut env, tool, &corrupted, registry)?;
            if failed.is_success() {
                return Err(ExecuteError::FaultNotTriggered { position });
            }
            fault_positions.push(env.history.len());
        }
        let response = step(&mut env, tool, &inputs, registry)?;
        if !response.is_success() {
            return Err(ExecuteError::NotGolden);
        }
        responses.insert(tool.clone(), response);
    }
    let final_outputs =
        collect_final_outputs(program, registry, &responses, TraceStatus::Golden);
    debug_assert_eq!(final_outputs, golden.final_outputs);
    let trace = AugmentedTrace {
        trace_id: format!("aug-{}", &episode_id["aug-".len()..]),
        program_id: golden.program_id,
        goal: program.goal.clone(),
        seed,
        episode_id,
        fault_positions,
        steps: env.history,
        final_outputs,
    };
    Ok((trace, env.store))
}

/// JSONL trace files: a header line followed by one step per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceHeader {
    pub record: String,
    pub kind: String,
    pub trace_id: String,
    pub program_id: String,
    pub goal: ToolId,
    pub seed: u64,
    pub episode_id: String,
    pub status: TraceStatus,
    pub final_outputs: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fault_positions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub root_inputs: Vec<RootParam>,
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    record: String,
    #[serde(flatten)]
    step: StepRecord,
}

pub fn write_trace_jsonl(trace: &Trace, w: &mut impl Write) -> std::io::Result<()> {
    let header = TraceHeader {
        record: "header".into(),
        kind: "golden".into(),
        trace_id: trace.trace_id.clone(),
        program_id: trace.program_id.clone(),
        goal: trace.goal.clone(),
        seed: trace.seed,
        episode_id: trace.episode_id.clone(),
        status: trace.status,
        final_outputs: trace.final_outputs.clone(),
        fault_positions: Vec::new(),
        root_inputs: trace.root_inputs.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for s in &trace.steps {
        let line = StepLine {
            record: "step".into(),
            step: s.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

pub fn write_augmented_jsonl(trace: &AugmentedTrace, w: &mut impl Write) -> std::io::Result<()> {
    let header = TraceHeader {
        record: "header".into(),
        kind: "augmented".into(),
        trace_id: trace.trace_id.clone(),
        program_id: trace.program_id.clone(),
        goal: trace.goal.clone(),
        seed: trace.seed,
        episode_id: trace.episode_id.clone(),
        status: TraceStatus::Golden,
        final_outputs: trace.final_outputs.clone(),
        fault_positions: trace.fault_positions.clone(),
        root_inputs: Vec::new(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for s in &trace.steps {
        let line = StepLine {
            record: "step".into(),
            step: s.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

pub fn read_trace_jsonl(r: impl BufRead) -> Result<(TraceHeader, Vec<StepRecord>), ExecuteError> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| ExecuteError::Malformed("empty trace file".into()))??;
    let header: TraceHeader = serde_json::from_str(&header_line)
        .map_err(|e| ExecuteError::Malformed(format!("bad header: {e}")))?;
    let mut steps = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let step: StepLine = serde_json::from_str(&line)
            .map_err(|e| ExecuteError::Malformed(format!("bad step line: {e}")))?;
        steps.push(step.step);
    }
    Ok((header, steps))
}
