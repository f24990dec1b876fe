//! Per-domain tool dependency graph: an edge (u, v) exists exactly when
//! some output type of u is a subtype of some input type of v. The slot map
//! stores, per (consumer, input index), every type-compatible
//! (producer, output index) pair; the edge set is its projection.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toolkit::{ToolRegistry, ToolSpec};
use crate::typesys::TypeLattice;
use crate::toolkit::ToolId;

/// A type-compatible producer for some input slot.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProducerRef {
    pub tool: ToolId,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotKey {
    pub tool: ToolId,
    pub input: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("domain `{0}` has no registered tools")]
    EmptyDomain(String),
    #[error("tool `{0}` is not in this graph")]
    UnknownTool(ToolId),
    #[error("tool `{tool}` has no input slot {input}")]
    SlotOutOfRange { tool: ToolId, input: usize },
}

/// Graph node metadata carried in the serialized dump so downstream sampling
/// can run from the dump alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeInfo {
    pub id: ToolId,
    pub stage: crate::toolkit::Stage,
    pub input_types: Vec<crate::typesys::TypeId>,
    pub output_types: Vec<crate::typesys::TypeId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DependencyGraph {
    pub domain: String,
    /// Nodes in deterministic (lexicographic) order.
    pub nodes: Vec<NodeInfo>,
    pub edges: BTreeSet<(ToolId, ToolId)>,
    /// slot_map[(v, j)] = compatible (u, i) pairs in deterministic order.
    #[serde(with = "slot_map_entries")]
    pub slot_map: BTreeMap<SlotKey, Vec<ProducerRef>>,
}

/// JSON object keys must be strings, so the slot map serializes as an
/// ordered entry list.
mod slot_map_entries {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        tool: ToolId,
        input: usize,
        producers: Vec<ProducerRef>,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<SlotKey, Vec<ProducerRef>>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(k, v)| Entry {
                tool: k.tool.clone(),
                input: k.input,
                producers: v.clone(),
            })
            .collect();
        serde::Serialize::serialize(&entries, ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<SlotKey, Vec<ProducerRef>>, D::Error> {
        let entries: Vec<Entry> = serde::Deserialize::deserialize(de)?;
        Ok(entries
            .into_iter()
            .map(|e| {
                (
                    SlotKey {
                        tool: e.tool,
                        input: e.input,
                    },
                    e.producers,
                )
            })
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphStats {
    pub node_count: usize,
    pub edge_count: usize,
    pub stage_histogram: BTreeMap<String, usize>,
}

impl DependencyGraph {
    pub fn contains(&self, tool: &ToolId) -> bool {
        self.nodes.iter().any(|n| &n.id == tool)
    }

    pub fn node(&self, tool: &ToolId) -> Result<&NodeInfo, GraphError> {
        self.nodes
            .iter()
            .find(|n| &n.id == tool)
            .ok_or_else(|| GraphError::UnknownTool(tool.clone()))
    }

    /// The set of type-compatible predecessor outputs for one input slot.
    pub fn compatible_outputs(
        &self,
        tool: &ToolId,
        input: usize,
    ) -> Result<&[ProducerRef], GraphError> {
        let node = self.node(tool)?;
        if input >= node.input_types.len() {
            return Err(GraphError::SlotOutOfRange {
                tool: tool.clone(),
                input,
            });
        }
        Ok(self
            .slot_map
            .get(&SlotKey {
                tool: tool.clone(),
                input,
            })
            .map(|v| v.as_slice())
            .unwrap_or(&[]))
    }

    pub fn stats(&self) -> GraphStats {
        let mut stage_histogram = BTreeMap::new();
        for n in &self.nodes {
            *stage_histogram.entry(n.stage.to_string()).or_insert(0) += 1;
        }
        GraphStats {
            node_count: self.nodes.len(),
            edge_count: self.edges.len(),
            stage_histogram,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }
}

/// Build the dependency graph for one domain from the registry and lattice.
pub fn build_graph(
    registry: &ToolRegistry,
    lattice: &TypeLattice,
    domain: &str,
) -> Result<DependencyGraph, GraphError> {
    let tools: Vec<&ToolSpec> = registry.query(Some(domain), None, None);
    if tools.is_empty() {
        return Err(GraphError::EmptyDomain(domain.to_string()));
    }
    let nodes: Vec<NodeInfo> = tools
        .iter()
        .map(|t| NodeInfo {
            id: t.id.clone(),
            stage: t.stage,
            input_types: t.inputs.iter().map(|p| p.ty.clone()).collect(),
            output_types: t.outputs.iter().map(|p| p.ty.clone()).collect(),
        })
        .collect();
    let mut slot_map: BTreeMap<SlotKey, Vec<ProducerRef>> = BTreeMap::new();
    let mut edges = BTreeSet::new();
    for consumer in &nodes {
        for (j, input_ty) in consumer.input_types.iter().enumerate() {
            let mut producers = Vec::new();
            for producer in &nodes {
                for (i, output_ty) in producer.output_types.iter().enumerate() {
                    let compatible = lattice
                        .is_subtype(output_ty, input_ty)
                        .expect("registered tools reference registered types");
                    if compatible {
                        producers.push(ProducerRef {
                            tool: producer.id.clone(),
                            output: i,
                        });
                        edges.insert((producer.id.clone(), consumer.id.clone()));
                    }
                }
            }
            if !producers.is_empty() {
                producers.sort();
                slot_map.insert(
                    SlotKey {
                        tool: consumer.id.clone(),
                        input: j,
                    },
                    producers,
                );
            }
        }
    }
    Ok(DependencyGraph {
        domain: domain.to_string(),
        nodes,
        edges,
        slot_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolkit::{builtin_corpus, Corpus};

    fn corpus() -> Corpus {
        builtin_corpus()
    }

    #[test]
    fn direct_type_compatibility_creates_an_edge() {
        let c = corpus();
        let g = build_graph(&c.registry, &c.lattice, "chem").unwrap();
        // SMILES producer feeds a SMILES consumer.
        assert!(g
            .edges
            .contains(&(ToolId::new("lookup_compound"), ToolId::new("fetch_solubility"))));
        // A text-name producer does not feed a numeric slot.
        assert!(!g
            .edges
            .contains(&(ToolId::new("lookup_compound"), ToolId::new("mix_ph"))));
    }

    #[test]
    fn subtype_outputs_feed_generic_slots() {
        let c = corpus();
        let g = build_graph(&c.registry, &c.lattice, "physics").unwrap();
        // Energy <: Float, so the generic quotient consumes kinetic_energy.
        assert!(g
            .edges
            .contains(&(ToolId::new("kinetic_energy"), ToolId::new("quotient"))));
    }

    #[test]
    fn compatible_outputs_deterministic_and_bounded() {
        let c = corpus();
        let g = build_graph(&c.registry, &c.lattice, "physics").unwrap();
        let slots = g
            .compatible_outputs(&ToolId::new("quotient"), 0)
            .unwrap()
            .to_vec();
        assert!(!slots.is_empty());
        let mut sorted = slots.clone();
        sorted.sort();
        assert_eq!(slots, sorted);
        assert!(matches!(
            g.compatible_outputs(&ToolId::new("quotient"), 9),
            Err(GraphError::SlotOutOfRange { .. })
        ));
        assert!(matches!(
            g.compatible_outputs(&ToolId::new("nope"), 0),
            Err(GraphError::UnknownTool(_))
        ));
    }

    #[test]
    fn unproduced_types_have_empty_producer_sets() {
        let c = corpus();
        let g = build_graph(&c.registry, &c.lattice, "chem").unwrap();
        // Nothing produces CompoundName; the slot exists with no producers.
        assert!(g
            .compatible_outputs(&ToolId::new("lookup_compound"), 0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn stats_are_consistent() {
        let c = corpus();
        let g = build_graph(&c.registry, &c.lattice, "materials").unwrap();
        let s = g.stats();
        assert_eq!(s.node_count, g.nodes.len());
        assert_eq!(s.edge_count, g.edges.len());
        assert_eq!(s.stage_histogram.values().sum::<usize>(), s.node_count);
    }

    #[test]
    fn empty_domain_is_an_error() {
        let c = corpus();
        assert_eq!(
            build_graph(&c.registry, &c.lattice, "astrology").unwrap_err(),
            GraphError::EmptyDomain("astrology".to_string())
        );
    }

    #[test]
    fn graph_build_is_deterministic() {
        let c = corpus();
        let a = build_graph(&c.registry, &c.lattice, "life").unwrap();
        let b = build_graph(&c.registry, &c.lattice, "life").unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn json_round_trip() {
        let c = corpus();
        let g = build_graph(&c.registry, &c.lattice, "chem").unwrap();
        let back = DependencyGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back.edges, g.edges);
        assert_eq!(back.slot_map, g.slot_map);
    }
}
