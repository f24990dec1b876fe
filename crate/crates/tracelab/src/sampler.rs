//! Backward program construction: sample an executable program graph ending
//! at a goal tool by walking the dependency graph breadth-first from the
//! goal, binding every input slot to either a type-compatible predecessor
//! output or a root initializer.
//!
//! Predecessor choice is stage-aware and epsilon-greedy: a stage-compliant
//! pivot is drawn uniformly, then kept with probability `1 - eps + eps/|C|`
//! while any other candidate is taken with probability `eps/|C|`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::depgraph::{DependencyGraph, ProducerRef, SlotKey};
use crate::toolkit::{PriorBook, PriorRule, ToolId};
use crate::typesys::{TypeId, TypeLattice};
use crate::value::Value;

/// Where a root value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootKind {
    DomainConstant,
    SampledParameter,
    ToolDefault,
}

/// Resolution of one input slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binding {
    /// Bound to output `output` of predecessor `tool`.
    Producer { tool: ToolId, output: usize },
    /// Bound to a concrete root value.
    Root { origin: RootKind, value: Value },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProgramGraph {
    pub goal: ToolId,
    pub max_depth: u32,
    /// Program nodes in deterministic order.
    pub nodes: BTreeSet<ToolId>,
    #[serde(with = "binding_entries")]
    pub bindings: BTreeMap<SlotKey, Binding>,
    pub depth: BTreeMap<ToolId, u32>,
    pub ancestors: BTreeMap<ToolId, BTreeSet<ToolId>>,
}

mod binding_entries {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        tool: ToolId,
        input: usize,
        binding: Binding,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<SlotKey, Binding>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(k, v)| Entry {
                tool: k.tool.clone(),
                input: k.input,
                binding: v.clone(),
            })
            .collect();
        serde::Serialize::serialize(&entries, ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<SlotKey, Binding>, D::Error> {
        let entries: Vec<Entry> = serde::Deserialize::deserialize(de)?;
        Ok(entries
            .into_iter()
            .map(|e| {
                (
                    SlotKey {
                        tool: e.tool,
                        input: e.input,
                    },
                    e.binding,
                )
            })
            .collect())
    }
}

impl ProgramGraph {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("program serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }

    /// Content id: short hash over the canonical encoding.
    pub fn id(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        format!("prog-{}", hex::encode(&hasher.finalize()[..8]))
    }

    /// Producer edges (u feeds v) implied by the bindings.
    pub fn producer_edges(&self) -> Vec<(ToolId, ToolId)> {
        self.bindings
            .iter()
            .filter_map(|(slot, b)| match b {
                Binding::Producer { tool, .. } => Some((tool.clone(), slot.tool.clone())),
                Binding::Root { .. } => None,
            })
            .collect()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub max_depth: u32,
    pub epsilon: f64,
    pub seed: u64,
    #[serde(default)]
    pub priors: PriorBook,
}

impl SamplerConfig {
    pub fn new(seed: u64) -> Self {
        SamplerConfig {
            max_depth: 6,
            epsilon: 0.2,
            seed,
            priors: PriorBook::new(),
        }
    }

    pub fn with_priors(mut self, priors: PriorBook) -> Self {
        self.priors = priors;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&epsilon));
        self.epsilon = epsilon;
        self
    }

    pub fn with_max_depth(mut self, d: u32) -> Self {
        self.max_depth = d;
        self
    }
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("goal tool `{0}` is not in the graph")]
    UnknownGoal(ToolId),
    #[error("no prior or default available for root slot `{tool}`[{input}] of type `{ty}`")]
    PriorMissing {
        tool: ToolId,
        input: usize,
        ty: TypeId,
    },
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("pivot candidate is not a member of the candidate set")]
    StarNotInSet,
}

/// One violation found by `validate_program`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    UnboundSlot { tool: ToolId, input: usize },
    UnknownNode { tool: ToolId },
    TypeMismatch { tool: ToolId, input: usize },
    InvalidRootValue { tool: ToolId, input: usize },
    ProducerOutsideProgram { tool: ToolId, input: usize },
    Cycle,
    DepthExceeded { tool: ToolId, depth: u32 },
    GoalDepthNonZero,
    SelfAncestor { tool: ToolId },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::UnboundSlot { tool, input } => {
                write!(f, "unbound slot {tool}[{input}]")
            }
            Violation::UnknownNode { tool } => write!(f, "node `{tool}` not in graph"),
            Violation::TypeMismatch { tool, input } => {
                write!(f, "type mismatch at {tool}[{input}]")
            }
            Violation::InvalidRootValue { tool, input } => {
                write!(f, "root value fails validation at {tool}[{input}]")
            }
            Violation::ProducerOutsideProgram { tool, input } => {
                write!(f, "producer for {tool}[{input}] is not a program node")
            }
            Violation::Cycle => write!(f, "binding relation is cyclic"),
            Violation::DepthExceeded { tool, depth } => {
                write!(f, "node `{tool}` at depth {depth} exceeds the bound")
            }
            Violation::GoalDepthNonZero => write!(f, "goal is not at depth 0"),
            Violation::SelfAncestor { tool } => {
                write!(f, "node `{tool}` appears in its own ancestor set")
            }
        }
    }
}

/// Uniform draw over the stage-compliant subset when it is non-empty,
/// otherwise over the full candidate set.
pub fn select_u_star<'a>(
    candidates: &'a [ProducerRef],
    consumer_stage: crate::toolkit::Stage,
    stage_of: impl Fn(&ToolId) -> crate::toolkit::Stage,
    rng: &mut impl Rng,
) -> Result<&'a ProducerRef, SampleError> {
    if candidates.is_empty() {
        return Err(SampleError::EmptyCandidates);
    }
    let compliant: Vec<&ProducerRef> = candidates
        .iter()
        .filter(|c| stage_of(&c.tool) <= consumer_stage)
        .collect();
    if compliant.is_empty() {
        Ok(&candidates[rng.random_range(0..candidates.len())])
    } else {
        Ok(compliant[rng.random_range(0..compliant.len())])
    }
}

/// Epsilon-greedy draw around a pivot: the pivot is selected with
/// probability `1 - eps + eps/|C|`, every other candidate with `eps/|C|`.
pub fn epsilon_greedy_pick<'a, T: PartialEq>(
    candidates: &'a [T],
    pivot: &'a T,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<&'a T, SampleError> {
    if candidates.is_empty() {
        return Err(SampleError::EmptyCandidates);
    }
    if !candidates.iter().any(|c| c == pivot) {
        return Err(SampleError::StarNotInSet);
    }
    if rng.random::<f64>() >= epsilon {
        Ok(pivot)
    } else {
        Ok(&candidates[rng.random_range(0..candidates.len())])
    }
}

/// Derive the per-call RNG stream from the config seed and goal id.
fn call_rng(seed: u64, goal: &ToolId) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(goal.as_str().as_bytes());
    let digest = hasher.finalize();
    ChaCha8Rng::from_seed(digest[..32].try_into().unwrap())
}

/// Derive the per-slot RNG stream used for root values; independent of
/// traversal order so rebinding is reproducible slot by slot.
fn slot_rng(seed: u64, goal: &ToolId, slot: &SlotKey) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(goal.as_str().as_bytes());
    hasher.update(slot.tool.as_str().as_bytes());
    hasher.update((slot.input as u64).to_le_bytes());
    let digest = hasher.finalize();
    ChaCha8Rng::from_seed(digest[..32].try_into().unwrap())
}

/// Sample one executable program ending at `goal`. Fully deterministic in
/// (graph, goal, config); root slots are bound immediately.
pub fn sample_program(
    graph: &DependencyGraph,
    registry: &crate::toolkit::ToolRegistry,
    goal: &ToolId,
    config: &SamplerConfig,
) -> Result<ProgramGraph, SampleError> {
    if !graph.contains(goal) {
        return Err(SampleError::UnknownGoal(goal.clone()));
    }
    let mut rng = call_rng(config.seed, goal);
    let mut program = ProgramGraph {
        goal: goal.clone(),
        max_depth: config.max_depth,
        nodes: BTreeSet::from([goal.clone()]),
        bindings: BTreeMap::new(),
        depth: BTreeMap::from([(goal.clone(), 0)]),
        ancestors: BTreeMap::from([(goal.clone(), BTreeSet::new())]),
    };
    // Consumer edges established so far, for the acyclicity guard:
    // feeds[u] = consumers u currently feeds.
    let mut feeds: BTreeMap<ToolId, BTreeSet<ToolId>> = BTreeMap::new();
    let mut queue = VecDeque::from([(goal.clone(), 0u32)]);
    while let Some((v, d)) = queue.pop_front() {
        let node = graph.node(&v).expect("queued nodes are graph nodes");
        let consumer_stage = node.stage;
        let input_count = node.input_types.len();
        let path_ancestors: BTreeSet<ToolId> = {
            let mut a = program.ancestors[&v].clone();
            a.insert(v.clone());
            a
        };
        for j in 0..input_count {
            let slot = SlotKey {
                tool: v.clone(),
                input: j,
            };
            let mut candidates: Vec<ProducerRef> = Vec::new();
            if d < config.max_depth {
                for c in graph.compatible_outputs(&v, j).expect("slot in range") {
                    if path_ancestors.contains(&c.tool) {
                        continue;
                    }
                    // Reusing an existing node must not close a cycle:
                    // reject u when v already (transitively) feeds u.
                    if program.nodes.contains(&c.tool) && reaches(&feeds, &v, &c.tool) {
                        continue;
                    }
                    candidates.push(c.clone());
                }
            }
            if candidates.is_empty() {
                let binding = root_binding(registry, config, goal, &slot, &node.input_types[j])?;
                program.bindings.insert(slot, binding);
                continue;
            }
            let pivot = select_u_star(
                &candidates,
                consumer_stage,
                |id| {
                    registry
                        .get(id)
                        .map(|t| t.stage)
                        .unwrap_or(crate::toolkit::Stage::Query)
                },
                &mut rng,
            )?
            .clone();
            let chosen =
                epsilon_greedy_pick(&candidates, &pivot, config.epsilon, &mut rng)?.clone();
            feeds
                .entry(chosen.tool.clone())
                .or_default()
                .insert(v.clone());
            program.bindings.insert(
                slot,
                Binding::Producer {
                    tool: chosen.tool.clone(),
                    output: chosen.output,
                },
            );
            if !program.nodes.contains(&chosen.tool) {
                program.nodes.insert(chosen.tool.clone());
                program.depth.insert(chosen.tool.clone(), d + 1);
                program
                    .ancestors
                    .insert(chosen.tool.clone(), path_ancestors.clone());
                queue.push_back((chosen.tool.clone(), d + 1));
            }
        }
    }
    Ok(program)
}

/// Does `from` reach `to` following the consumer edges collected so far?
fn reaches(feeds: &BTreeMap<ToolId, BTreeSet<ToolId>>, from: &ToolId, to: &ToolId) -> bool {
    if from == to {
        return true;
    }
    let mut stack = vec![from];
    let mut seen = BTreeSet::new();
    while let Some(v) = stack.pop() {
        if v == to {
            return true;
        }
        if !seen.insert(v.clone()) {
            continue;
        }
        if let Some(next) = feeds.get(v) {
            stack.extend(next.iter());
        }
    }
    false
}

/// Resolve a root slot: the tool's declared default wins, then the type
/// prior; a slot with neither is unsatisfiable.
fn root_binding(
    registry: &crate::toolkit::ToolRegistry,
    config: &SamplerConfig,
    goal: &ToolId,
    slot: &SlotKey,
    slot_ty: &TypeId,
) -> Result<Binding, SampleError> {
    let spec = registry
        .get(&slot.tool)
        .expect("program nodes are registered");
    let input_name = &spec.inputs[slot.input].name;
    if let Some(default) = spec.defaults.get(input_name) {
        return Ok(Binding::Root {
            origin: RootKind::ToolDefault,
            value: default.clone(),
        });
    }
    match config.priors.get(slot_ty) {
        Some(PriorRule::Uniform { lo, hi }) => {
            let mut rng = slot_rng(config.seed, goal, slot);
            let x: f64 = rng.random::<f64>();
            Ok(Binding::Root {
                origin: RootKind::SampledParameter,
                value: Value::Number(lo + (hi - lo) * x),
            })
        }
        Some(PriorRule::Pool { values }) => {
            let mut rng = slot_rng(config.seed, goal, slot);
            let idx = rng.random_range(0..values.len());
            Ok(Binding::Root {
                origin: RootKind::DomainConstant,
                value: values[idx].clone(),
            })
        }
        Some(PriorRule::Constant { value }) => Ok(Binding::Root {
            origin: RootKind::DomainConstant,
            value: value.clone(),
        }),
        None => Err(SampleError::PriorMissing {
            tool: slot.tool.clone(),
            input: slot.input,
            ty: slot_ty.clone(),
        }),
    }
}

/// Redraw every root binding from the config (defaults copied, priors
/// re-sampled per slot). Structure is untouched.
pub fn bind_roots(
    program: &ProgramGraph,
    registry: &crate::toolkit::ToolRegistry,
    config: &SamplerConfig,
) -> Result<ProgramGraph, SampleError> {
    let mut out = program.clone();
    let slots: Vec<SlotKey> = out
        .bindings
        .iter()
        .filter(|(_, b)| matches!(b, Binding::Root { .. }))
        .map(|(k, _)| k.clone())
        .collect();
    for slot in slots {
        let spec = registry
            .get(&slot.tool)
            .expect("program nodes are registered");
        let ty = spec.inputs[slot.input].ty.clone();
        let binding = root_binding(registry, config, &program.goal, &slot, &ty)?;
        out.bindings.insert(slot, binding);
    }
    Ok(out)
}

/// Check all structural postconditions of a sampled program. Violations are
/// returned as data, never raised.
pub fn validate_program(
    program: &ProgramGraph,
    graph: &DependencyGraph,
    lattice: &TypeLattice,
) -> Vec<Violation> {
    let mut violations = Vec::new();
    for tool in &program.nodes {
        let Ok(node) = graph.node(tool) else {
            violations.push(Violation::UnknownNode { tool: tool.clone() });
            continue;
        };
        for j in 0..node.input_types.len() {
            let slot = SlotKey {
                tool: tool.clone(),
                input: j,
            };
            match program.bindings.get(&slot) {
                None => violations.push(Violation::UnboundSlot {
                    tool: tool.clone(),
                    input: j,
                }),
                Some(Binding::Producer { tool: u, output: i }) => {
                    if !program.nodes.contains(u) {
                        violations.push(Violation::ProducerOutsideProgram {
                            tool: tool.clone(),
                            input: j,
                        });
                        continue;
                    }
                    let Ok(producer) = graph.node(u) else {
                        violations.push(Violation::UnknownNode { tool: u.clone() });
                        continue;
                    };
                    let ok = producer
                        .output_types
                        .get(*i)
                        .map(|beta| {
                            lattice
                                .is_subtype(beta, &node.input_types[j])
                                .unwrap_or(false)
                        })
                        .unwrap_or(false);
                    if !ok {
                        violations.push(Violation::TypeMismatch {
                            tool: tool.clone(),
                            input: j,
                        });
                    }
                }
                Some(Binding::Root { value, .. }) => {
                    if lattice
                        .validate_value(value, &node.input_types[j])
                        .is_err()
                    {
                        violations.push(Violation::InvalidRootValue {
                            tool: tool.clone(),
                            input: j,
                        });
                    }
                }
            }
        }
    }
    match program.depth.get(&program.goal) {
        Some(0) => {}
        _ => violations.push(Violation::GoalDepthNonZero),
    }
    for (tool, depth) in &program.depth {
        if *depth > program.max_depth {
            violations.push(Violation::DepthExceeded {
                tool: tool.clone(),
                depth: *depth,
            });
        }
    }
    for (tool, anc) in &program.ancestors {
        if anc.contains(tool) {
            violations.push(Violation::SelfAncestor { tool: tool.clone() });
        }
    }
    // Acyclicity of the binding relation (Kahn peel).
    let edges = program.producer_edges();
    let mut indegree: BTreeMap<&ToolId, usize> = program.nodes.iter().map(|n| (n, 0)).collect();
    for (_, v) in &edges {
        if let Some(deg) = indegree.get_mut(v) {
            *deg += 1;
        }
    }
    let mut ready: Vec<&ToolId> = indegree
        .iter()
        .filter(|(_, &deg)| deg == 0)
        .map(|(&n, _)| n)
        .collect();
    let mut peeled = 0;
    while let Some(n) = ready.pop() {
        peeled += 1;
        for (u, v) in &edges {
            if u == n {
                let deg = indegree.get_mut(v).expect("edge endpoints are nodes");
                *deg -= 1;
                if *deg == 0 {
                    ready.push(v);
                }
            }
        }
    }
    if peeled != program.nodes.len() {
        violations.push(Violation::Cycle);
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depgraph::build_graph;
    use crate::toolkit::{builtin_corpus, Corpus, Stage};

    fn setup(domain: &str) -> (Corpus, DependencyGraph) {
        let corpus = builtin_corpus();
        let graph = build_graph(&corpus.registry, &corpus.lattice, domain).unwrap();
        (corpus, graph)
    }

    fn config(corpus: &Corpus, seed: u64) -> SamplerConfig {
        SamplerConfig::new(seed).with_priors(corpus.priors.clone())
    }

    #[test]
    fn depth_zero_is_a_single_root_bound_goal() {
        let (corpus, graph) = setup("chem");
        let cfg = config(&corpus, 1).with_max_depth(0);
        let goal = ToolId::new("classify_turbidity");
        let p = sample_program(&graph, &corpus.registry, &goal, &cfg).unwrap();
        assert_eq!(p.nodes.len(), 1);
        assert!(p
            .bindings
            .values()
            .all(|b| matches!(b, Binding::Root { .. })));
        assert!(validate_program(&p, &graph, &corpus.lattice).is_empty());
    }

    #[test]
    fn goal_without_producers_is_all_roots() {
        let (corpus, graph) = setup("chem");
        let cfg = config(&corpus, 5).with_max_depth(8);
        // Every input type of lookup_compound lacks an in-domain producer.
        let p = sample_program(
            &graph,
            &corpus.registry,
            &ToolId::new("lookup_compound"),
            &cfg,
        )
        .unwrap();
        assert_eq!(p.nodes.len(), 1);
        assert!(p
            .bindings
            .values()
            .all(|b| matches!(b, Binding::Root { .. })));
    }

    #[test]
    fn sampling_is_deterministic_in_config() {
        let (corpus, graph) = setup("physics");
        let goal = ToolId::new("compare_energies");
        for seed in [0u64, 7, 99] {
            let cfg = config(&corpus, seed);
            let a = sample_program(&graph, &corpus.registry, &goal, &cfg).unwrap();
            let b = sample_program(&graph, &corpus.registry, &goal, &cfg).unwrap();
            assert_eq!(a.to_json(), b.to_json());
        }
    }

    #[test]
    fn distinct_seeds_reach_distinct_programs() {
        let (corpus, graph) = setup("physics");
        let goal = ToolId::new("quotient");
        let mut encodings = BTreeSet::new();
        for seed in 0..20u64 {
            let cfg = config(&corpus, seed);
            let p = sample_program(&graph, &corpus.registry, &goal, &cfg).unwrap();
            encodings.insert(p.to_json());
        }
        assert!(encodings.len() > 1, "all 20 seeds produced one program");
    }

    #[test]
    fn unknown_goal_is_an_error() {
        let (corpus, graph) = setup("chem");
        let cfg = config(&corpus, 0);
        assert!(matches!(
            sample_program(&graph, &corpus.registry, &ToolId::new("nope"), &cfg),
            Err(SampleError::UnknownGoal(_))
        ));
    }

    #[test]
    fn sampled_programs_validate_across_configs() {
        let (corpus, graph) = setup("materials");
        for &eps in &[0.0, 0.2, 1.0] {
            for &d in &[0u32, 3, 6] {
                for seed in 0..10 {
                    let cfg = config(&corpus, seed).with_epsilon(eps).with_max_depth(d);
                    let p = sample_program(
                        &graph,
                        &corpus.registry,
                        &ToolId::new("field_statistics"),
                        &cfg,
                    )
                    .unwrap();
                    let v = validate_program(&p, &graph, &corpus.lattice);
                    assert!(v.is_empty(), "violations: {v:?}");
                    let max_depth = p.depth.values().max().copied().unwrap_or(0);
                    assert!(max_depth <= d);
                }
            }
        }
    }

    #[test]
    fn epsilon_zero_always_picks_the_pivot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cands = vec![1, 2, 3, 4];
        for _ in 0..200 {
            assert_eq!(*epsilon_greedy_pick(&cands, &3, 0.0, &mut rng).unwrap(), 3);
        }
    }

    #[test]
    fn epsilon_one_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cands = vec![0usize, 1, 2, 3];
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            let c = epsilon_greedy_pick(&cands, &0, 1.0, &mut rng).unwrap();
            counts[*c] += 1;
        }
        for &c in &counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn epsilon_law_matches_the_closed_form() {
        // eps = 0.2, |C| = 4: pivot at 0.85, the rest at 0.05 each.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cands = vec![0usize, 1, 2, 3];
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            counts[*epsilon_greedy_pick(&cands, &1, 0.2, &mut rng).unwrap()] += 1;
        }
        let pivot_f = counts[1] as f64 / n as f64;
        assert!((pivot_f - 0.85).abs() <= 0.02, "pivot frequency {pivot_f}");
        for (i, &c) in counts.iter().enumerate() {
            if i != 1 {
                let f = c as f64 / n as f64;
                assert!((f - 0.05).abs() <= 0.02, "candidate {i} frequency {f}");
            }
        }
    }

    #[test]
    fn pivot_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty: Vec<i32> = vec![];
        assert!(matches!(
            epsilon_greedy_pick(&empty, &1, 0.5, &mut rng),
            Err(SampleError::EmptyCandidates)
        ));
        assert!(matches!(
            epsilon_greedy_pick(&[1, 2], &3, 0.5, &mut rng),
            Err(SampleError::StarNotInSet)
        ));
    }

    #[test]
    fn stage_compliant_pivot_prefers_earlier_stages() {
        let (corpus, _) = setup("physics");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // One query-stage candidate vs one visualization-stage candidate for
        // an analysis-stage consumer: the pivot is always the query tool.
        let cands = vec![
            ProducerRef {
                tool: ToolId::new("fetch_gravity"),
                output: 0,
            },
            ProducerRef {
                tool: ToolId::new("plot_trajectory"),
                output: 0,
            },
        ];
        for _ in 0..100 {
            let u = select_u_star(
                &cands,
                Stage::Analysis,
                |id| corpus.registry.get(id).unwrap().stage,
                &mut rng,
            )
            .unwrap();
            assert_eq!(u.tool, ToolId::new("fetch_gravity"));
        }
    }

    #[test]
    fn all_stage_violating_candidates_fall_back_to_uniform() {
        let (corpus, _) = setup("physics");
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cands = vec![
            ProducerRef {
                tool: ToolId::new("plot_trajectory"),
                output: 0,
            },
            ProducerRef {
                tool: ToolId::new("render_energy_histogram"),
                output: 0,
            },
        ];
        let mut seen = BTreeSet::new();
        for _ in 0..200 {
            let u = select_u_star(
                &cands,
                Stage::Query,
                |id| corpus.registry.get(id).unwrap().stage,
                &mut rng,
            )
            .unwrap();
            seen.insert(u.tool.clone());
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn uniform_pivot_frequencies_within_tolerance() {
        let (corpus, _) = setup("physics");
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        // Two stage-compliant candidates: each drawn half the time.
        let cands = vec![
            ProducerRef {
                tool: ToolId::new("fetch_gravity"),
                output: 0,
            },
            ProducerRef {
                tool: ToolId::new("lookup_material_density"),
                output: 0,
            },
        ];
        let mut first = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let u = select_u_star(
                &cands,
                Stage::Analysis,
                |id| corpus.registry.get(id).unwrap().stage,
                &mut rng,
            )
            .unwrap();
            if u.tool == ToolId::new("fetch_gravity") {
                first += 1;
            }
        }
        let f = first as f64 / n as f64;
        assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
    }

    #[test]
    fn mutated_program_fails_validation() {
        let (corpus, graph) = setup("chem");
        let cfg = config(&corpus, 9).with_max_depth(4);
        let goal = ToolId::new("classify_turbidity");
        let p = sample_program(&graph, &corpus.registry, &goal, &cfg).unwrap();

        let mut unbound = p.clone();
        let first = unbound.bindings.keys().next().unwrap().clone();
        unbound.bindings.remove(&first);
        assert!(validate_program(&unbound, &graph, &corpus.lattice)
            .iter()
            .any(|v| matches!(v, Violation::UnboundSlot { .. })));

        let mut mistyped = p.clone();
        let slot = SlotKey {
            tool: goal.clone(),
            input: 0,
        };
        mistyped.bindings.insert(
            slot,
            Binding::Root {
                origin: RootKind::DomainConstant,
                value: Value::Text("not a number".into()),
            },
        );
        assert!(validate_program(&mistyped, &graph, &corpus.lattice)
            .iter()
            .any(|v| matches!(v, Violation::InvalidRootValue { .. })));
    }

    #[test]
    fn rebinding_roots_is_deterministic_and_structure_preserving() {
        let (corpus, graph) = setup("life");
        let cfg = config(&corpus, 4);
        let goal = ToolId::new("classify_culture");
        let p = sample_program(&graph, &corpus.registry, &goal, &cfg).unwrap();
        let rebound = bind_roots(&p, &corpus.registry, &cfg).unwrap();
        // Same config: identical values, since slot streams are config-derived.
        assert_eq!(p.to_json(), rebound.to_json());
        let cfg2 = config(&corpus, 5);
        let rebound2 = bind_roots(&p, &corpus.registry, &cfg2).unwrap();
        assert_eq!(p.nodes, rebound2.nodes);
        assert!(validate_program(&rebound2, &graph, &corpus.lattice).is_empty());
    }

    #[test]
    fn pool_roots_come_from_the_pool() {
        let (corpus, graph) = setup("chem");
        let goal = ToolId::new("fetch_solubility");
        let pool: Vec<Value> = match corpus.priors.get(&TypeId::new("SMILES")).unwrap() {
            PriorRule::Pool { values } => values.clone(),
            _ => panic!("SMILES prior should be a pool"),
        };
        for seed in 0..30 {
            let cfg = config(&corpus, seed).with_max_depth(0);
            let p = sample_program(&graph, &corpus.registry, &goal, &cfg).unwrap();
            let Binding::Root { origin, value } = p.bindings.values().next().unwrap() else {
                panic!("expected root binding");
            };
            assert_eq!(*origin, RootKind::DomainConstant);
            assert!(pool.contains(value));
        }
    }

    #[test]
    fn tool_defaults_take_precedence_over_priors() {
        let (corpus, graph) = setup("chem");
        let cfg = config(&corpus, 12).with_max_depth(0);
        let p = sample_program(
            &graph,
            &corpus.registry,
            &ToolId::new("arrhenius_rate"),
            &cfg,
        )
        .unwrap();
        let slot = SlotKey {
            tool: ToolId::new("arrhenius_rate"),
            input: 1,
        };
        assert_eq!(
            p.bindings.get(&slot),
            Some(&Binding::Root {
                origin: RootKind::ToolDefault,
                value: Value::Number(25000.0),
            })
        );
    }

    #[test]
    fn missing_prior_is_reported() {
        let (corpus, graph) = setup("chem");
        // No priors configured: any sampled root on a no-default slot fails.
        let cfg = SamplerConfig::new(0).with_max_depth(0);
        let err = sample_program(
            &graph,
            &corpus.registry,
            &ToolId::new("classify_turbidity"),
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, SampleError::PriorMissing { .. }));
    }
}
