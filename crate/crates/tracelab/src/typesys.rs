//! The scientific type system: named types with declared subtype edges,
//! reflexive-transitive subtype queries and wire-shape validation.
//!
//! Subtyping is nominal: `a` is a subtype of `b` exactly when `(a, b)` lies
//! in the reflexive-transitive closure of the declared edges. The closure is
//! maintained eagerly because registration is rare and subtype queries sit in
//! the hot loop of dependency-graph construction.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::Value;

/// Stable, string-keyed identifier of a registered type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TypeId(pub String);

impl TypeId {
    pub fn new(name: impl Into<String>) -> Self {
        TypeId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TypeId {
    fn from(s: &str) -> Self {
        TypeId(s.to_string())
    }
}

/// Wire-shape class a type declares for its values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Number,
    Integer,
    Boolean,
    Text,
    List,
    Map,
}

impl Shape {
    /// JSON-schema type keyword for this shape class.
    pub fn json_schema_type(self) -> &'static str {
        match self {
            Shape::Number => "number",
            Shape::Integer => "integer",
            Shape::Boolean => "boolean",
            Shape::Text => "string",
            Shape::List => "array",
            Shape::Map => "object",
        }
    }

    /// Whether a value valid for `self` is also valid for `parent`.
    /// Integers are numbers (JSON-schema convention); all other shapes
    /// only refine themselves.
    pub fn refines(self, parent: Shape) -> bool {
        self == parent || (self == Shape::Integer && parent == Shape::Number)
    }

    pub fn of_value(value: &Value) -> Shape {
        match value {
            Value::Bool(_) => Shape::Boolean,
            Value::Int(_) => Shape::Integer,
            Value::Number(_) => Shape::Number,
            Value::Text(_) => Shape::Text,
            Value::List(_) => Shape::List,
            Value::Map(_) => Shape::Map,
        }
    }

    /// Whether a value of the given observed shape is acceptable where this
    /// shape is expected.
    pub fn accepts(self, observed: Shape) -> bool {
        observed.refines(self)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Shape::Number => "number",
            Shape::Integer => "integer",
            Shape::Boolean => "boolean",
            Shape::Text => "text",
            Shape::List => "list",
            Shape::Map => "map",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TypeError {
    #[error("type `{0}` is already registered")]
    DuplicateType(TypeId),
    #[error("parent type `{0}` is not registered")]
    UnknownParent(TypeId),
    #[error("type `{0}` is not registered")]
    UnknownType(TypeId),
    #[error("adding edge {child} <: {parent} would create a subtype cycle")]
    CycleDetected { child: TypeId, parent: TypeId },
    #[error("shape {child_shape} of `{child}` does not refine shape {parent_shape} of `{parent}`")]
    ShapeIncompatible {
        child: TypeId,
        child_shape: Shape,
        parent: TypeId,
        parent_shape: Shape,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ValueError {
    #[error("expected {expected} value for type `{ty}`, got {observed}")]
    ShapeMismatch {
        ty: TypeId,
        expected: Shape,
        observed: Shape,
    },
    #[error("type `{0}` is not registered")]
    UnknownType(TypeId),
}

#[derive(Debug, Clone)]
struct TypeEntry {
    id: TypeId,
    shape: Shape,
    parents: Vec<usize>,
}

/// The lattice of registered types. Mutable while the corpus is loaded;
/// afterwards shared behind `&` or `Arc` and queried concurrently.
#[derive(Debug, Clone, Default)]
pub struct TypeLattice {
    entries: Vec<TypeEntry>,
    index: HashMap<String, usize>,
    // closure[i] = set of indices j with entries[i] <= entries[j]; reflexive.
    closure: Vec<BTreeSet<usize>>,
}

impl TypeLattice {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Types in registration order.
    pub fn types(&self) -> impl Iterator<Item = &TypeId> {
        self.entries.iter().map(|e| &e.id)
    }

    pub fn contains(&self, ty: &TypeId) -> bool {
        self.index.contains_key(ty.as_str())
    }

    fn idx(&self, ty: &TypeId) -> Result<usize, TypeError> {
        self.index
            .get(ty.as_str())
            .copied()
            .ok_or_else(|| TypeError::UnknownType(ty.clone()))
    }

    /// Register a fresh type under the given wire shape and declared parents.
    pub fn register_type(
        &mut self,
        name: &str,
        shape: Shape,
        parents: &[TypeId],
    ) -> Result<TypeId, TypeError> {
        if self.index.contains_key(name) {
            return Err(TypeError::DuplicateType(TypeId::new(name)));
        }
        let mut parent_idx = Vec::with_capacity(parents.len());
        for p in parents {
            let pi = self
                .index
                .get(p.as_str())
                .copied()
                .ok_or_else(|| TypeError::UnknownParent(p.clone()))?;
            let pshape = self.entries[pi].shape;
            if !shape.refines(pshape) {
                return Err(TypeError::ShapeIncompatible {
                    child: TypeId::new(name),
                    child_shape: shape,
                    parent: p.clone(),
                    parent_shape: pshape,
                });
            }
            parent_idx.push(pi);
        }
        let id = TypeId::new(name);
        let i = self.entries.len();
        // Closure of the new type: itself plus everything its parents reach.
        let mut reach = BTreeSet::from([i]);
        for &pi in &parent_idx {
            reach.extend(self.closure[pi].iter().copied());
        }
        self.entries.push(TypeEntry {
            id: id.clone(),
            shape,
            parents: parent_idx,
        });
        self.closure.push(reach);
        self.index.insert(name.to_string(), i);
        Ok(id)
    }

    /// Declare `child <: parent` between two already-registered types.
    pub fn add_subtype_edge(&mut self, child: &TypeId, parent: &TypeId) -> Result<(), TypeError> {
        let c = self.idx(child)?;
        let p = self.idx(parent)?;
        if c == p || self.closure[p].contains(&c) {
            return Err(TypeError::CycleDetected {
                child: child.clone(),
                parent: parent.clone(),
            });
        }
        let cshape = self.entries[c].shape;
        let pshape = self.entries[p].shape;
        if !cshape.refines(pshape) {
            return Err(TypeError::ShapeIncompatible {
                child: child.clone(),
                child_shape: cshape,
                parent: parent.clone(),
                parent_shape: pshape,
            });
        }
        self.entries[c].parents.push(p);
        // Everything that reaches c now also reaches p's closure.
        let p_reach: Vec<usize> = self.closure[p].iter().copied().collect();
        for i in 0..self.closure.len() {
            if self.closure[i].contains(&c) {
                self.closure[i].extend(p_reach.iter().copied());
            }
        }
        Ok(())
    }

    /// True iff `a` is a (reflexive-transitive) subtype of `b`.
    pub fn is_subtype(&self, a: &TypeId, b: &TypeId) -> Result<bool, TypeError> {
        let ai = self.idx(a)?;
        let bi = self.idx(b)?;
        Ok(self.closure[ai].contains(&bi))
    }

    pub fn shape_of(&self, ty: &TypeId) -> Result<Shape, TypeError> {
        Ok(self.entries[self.idx(ty)?].shape)
    }

    /// Declared (direct) parents of a type.
    pub fn parents_of(&self, ty: &TypeId) -> Result<Vec<TypeId>, TypeError> {
        let i = self.idx(ty)?;
        Ok(self.entries[i]
            .parents
            .iter()
            .map(|&p| self.entries[p].id.clone())
            .collect())
    }

    /// All declared subtype edges as (child, parent) pairs.
    pub fn edges(&self) -> Vec<(TypeId, TypeId)> {
        let mut out = Vec::new();
        for e in &self.entries {
            for &p in &e.parents {
                out.push((e.id.clone(), self.entries[p].id.clone()));
            }
        }
        out
    }

    /// Check that a value's wire shape matches the shape class the type
    /// declares. Structural containment beyond the top-level shape is the
    /// tool's own responsibility per its boundary checks.
    pub fn validate_value(&self, value: &Value, expected: &TypeId) -> Result<(), ValueError> {
        let i = self
            .index
            .get(expected.as_str())
            .copied()
            .ok_or_else(|| ValueError::UnknownType(expected.clone()))?;
        let want = self.entries[i].shape;
        let got = Shape::of_value(value);
        if want.accepts(got) {
            Ok(())
        } else {
            Err(ValueError::ShapeMismatch {
                ty: expected.clone(),
                expected: want,
                observed: got,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ty(s: &str) -> TypeId {
        TypeId::new(s)
    }

    #[test]
    fn fresh_root_type_registers() {
        let mut l = TypeLattice::new();
        let id = l.register_type("Float", Shape::Number, &[]).unwrap();
        assert_eq!(id, ty("Float"));
        assert!(l.is_subtype(&id, &id).unwrap());
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut l = TypeLattice::new();
        l.register_type("Float", Shape::Number, &[]).unwrap();
        assert_eq!(
            l.register_type("Float", Shape::Number, &[]),
            Err(TypeError::DuplicateType(ty("Float")))
        );
    }

    #[test]
    fn unknown_parent_rejected() {
        let mut l = TypeLattice::new();
        assert_eq!(
            l.register_type("Mass", Shape::Number, &[ty("Float")]),
            Err(TypeError::UnknownParent(ty("Float")))
        );
    }

    #[test]
    fn cycle_detected_on_edge_insertion() {
        let mut l = TypeLattice::new();
        let b = l.register_type("B", Shape::Number, &[]).unwrap();
        let a = l.register_type("A", Shape::Number, &[b.clone()]).unwrap();
        // A <: B holds; closing the loop must fail.
        let err = l.add_subtype_edge(&b, &a).unwrap_err();
        assert!(matches!(err, TypeError::CycleDetected { .. }));
        // Self edges are cycles too.
        assert!(matches!(
            l.add_subtype_edge(&a, &a),
            Err(TypeError::CycleDetected { .. })
        ));
    }

    #[test]
    fn transitive_closure_through_chain() {
        let mut l = TypeLattice::new();
        let c = l.register_type("C", Shape::Number, &[]).unwrap();
        let b = l.register_type("B", Shape::Number, &[c.clone()]).unwrap();
        let a = l.register_type("A", Shape::Number, &[b.clone()]).unwrap();
        assert!(l.is_subtype(&a, &c).unwrap());
        assert!(!l.is_subtype(&c, &a).unwrap());
    }

    #[test]
    fn siblings_are_unrelated() {
        let mut l = TypeLattice::new();
        let p = l.register_type("P", Shape::Number, &[]).unwrap();
        let x = l.register_type("X", Shape::Number, &[p.clone()]).unwrap();
        let y = l.register_type("Y", Shape::Number, &[p.clone()]).unwrap();
        assert!(!l.is_subtype(&x, &y).unwrap());
        assert!(!l.is_subtype(&y, &x).unwrap());
    }

    #[test]
    fn late_edge_updates_descendant_closures() {
        let mut l = TypeLattice::new();
        let top = l.register_type("Top", Shape::Number, &[]).unwrap();
        let mid = l.register_type("Mid", Shape::Number, &[]).unwrap();
        let leaf = l
            .register_type("Leaf", Shape::Number, &[mid.clone()])
            .unwrap();
        assert!(!l.is_subtype(&leaf, &top).unwrap());
        l.add_subtype_edge(&mid, &top).unwrap();
        assert!(l.is_subtype(&leaf, &top).unwrap());
    }

    #[test]
    fn shape_refinement_enforced_on_edges() {
        let mut l = TypeLattice::new();
        let float = l.register_type("Float", Shape::Number, &[]).unwrap();
        l.register_type("Int", Shape::Integer, &[float.clone()])
            .unwrap();
        let text = l.register_type("Name", Shape::Text, &[]).unwrap();
        assert!(matches!(
            l.add_subtype_edge(&text, &float),
            Err(TypeError::ShapeIncompatible { .. })
        ));
    }

    #[test]
    fn validate_value_shape_classes() {
        let mut l = TypeLattice::new();
        let float = l.register_type("Float", Shape::Number, &[]).unwrap();
        let smiles = l.register_type("SMILES", Shape::Text, &[]).unwrap();
        assert!(l.validate_value(&Value::Number(3.14), &float).is_ok());
        // Integers are acceptable where numbers are expected.
        assert!(l.validate_value(&Value::Int(3), &float).is_ok());
        assert!(l.validate_value(&Value::Text("CCO".into()), &smiles).is_ok());
        let err = l.validate_value(&Value::Bool(true), &float).unwrap_err();
        assert!(matches!(err, ValueError::ShapeMismatch { .. }));
        assert_eq!(
            l.validate_value(&Value::Int(1), &ty("Nope")),
            Err(ValueError::UnknownType(ty("Nope")))
        );
    }

    /// Brute-force subtype oracle: DFS over the declared edge list only.
    fn oracle_reaches(edges: &[(usize, usize)], n: usize, from: usize, to: usize) -> bool {
        if from == to {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![from];
        while let Some(v) = stack.pop() {
            if v == to {
                return true;
            }
            if seen[v] {
                continue;
            }
            seen[v] = true;
            for &(c, p) in edges {
                if c == v && !seen[p] {
                    stack.push(p);
                }
            }
        }
        false
    }

    #[test]
    fn closure_matches_path_search_oracle_on_random_lattices() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..40 {
            let n = rng.random_range(2..=30usize);
            let mut l = TypeLattice::new();
            let ids: Vec<TypeId> = (0..n)
                .map(|i| l.register_type(&format!("T{i}"), Shape::Number, &[]).unwrap())
                .collect();
            let mut edges = Vec::new();
            for _ in 0..rng.random_range(0..=60usize) {
                // Edges from higher to lower index keep the graph acyclic.
                let c = rng.random_range(1..n);
                let p = rng.random_range(0..c);
                if l.add_subtype_edge(&ids[c], &ids[p]).is_ok() {
                    edges.push((c, p));
                }
            }
            for a in 0..n {
                for b in 0..n {
                    assert_eq!(
                        l.is_subtype(&ids[a], &ids[b]).unwrap(),
                        oracle_reaches(&edges, n, a, b),
                        "disagreement on ({a},{b})"
                    );
                }
            }
        }
    }

    #[test]
    fn no_mutual_subtyping_between_distinct_types() {
        let mut l = TypeLattice::new();
        let a = l.register_type("A", Shape::Number, &[]).unwrap();
        let b = l.register_type("B", Shape::Number, &[a.clone()]).unwrap();
        assert!(l.is_subtype(&b, &a).unwrap());
        assert!(!l.is_subtype(&a, &b).unwrap());
    }
}
