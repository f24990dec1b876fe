//! Trace-to-question conversion under information control.
//!
//! A golden trace becomes a natural-language problem whose root parameters
//! are stated as givens, whose intermediate outputs are replaced by
//! qualitative descriptors, and whose final answer is requested but never
//! stated. Every emitted question is scanned for literal occurrences of any
//! concealed value; violating generations are rejected and retried up to a
//! cap.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{RootParam, Trace, TraceStatus};
use crate::toolkit::{ToolId, ToolRegistry};
use crate::typesys::TypeId;
use crate::value::Value;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rubric {
    pub domain: String,
    /// Scientific-law statements and reasoning-structure requirements;
    /// must be non-empty.
    pub constraints: Vec<String>,
    pub style: String,
}

impl Rubric {
    pub fn new(domain: &str, constraints: Vec<String>, style: &str) -> Self {
        assert!(!constraints.is_empty(), "rubric constraints are non-empty");
        Rubric {
            domain: domain.to_string(),
            constraints,
            style: style.to_string(),
        }
    }

    /// A plain measurement-protocol rubric for a domain.
    pub fn default_for(domain: &str) -> Self {
        Rubric::new(
            domain,
            vec![
                "All given quantities were measured under controlled laboratory conditions."
                    .to_string(),
                "Work through the procedure one step at a time before stating the result."
                    .to_string(),
            ],
            "concise problem statement",
        )
    }
}

/// Which step outputs a rule applies to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "match", rename_all = "snake_case")]
pub enum ValueMatcher {
    Any,
    /// Matches outputs whose declared type is a subtype of this type.
    ByType { ty: TypeId },
    /// Matches steps whose response metadata carries this key/value pair.
    ByMetadata { key: String, equals: Value },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    /// Half-open upper bound; `None` means unbounded.
    pub hi: Option<f64>,
    pub label: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbstractionRule {
    pub matcher: ValueMatcher,
    pub bands: Vec<Band>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TableError {
    #[error("bands must be ordered and disjoint (band {0} overlaps or is out of order)")]
    BandOrder(usize),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AbstractionTable {
    pub rules: Vec<AbstractionRule>,
}

/// Fallback label for values no rule covers.
pub const GENERIC_LABEL: &str = "an intermediate quantity";

impl AbstractionTable {
    pub fn new(rules: Vec<AbstractionRule>) -> Result<Self, TableError> {
        for rule in &rules {
            for (i, w) in rule.bands.windows(2).enumerate() {
                let upper = w[0].hi.unwrap_or(f64::INFINITY);
                if upper > w[1].lo {
                    return Err(TableError::BandOrder(i + 1));
                }
            }
        }
        Ok(AbstractionTable { rules })
    }

    /// Coarse magnitude descriptors applying to any numeric output.
    pub fn default_magnitudes() -> Self {
        let bands = vec![
            Band { lo: 0.0, hi: Some(1.0), label: "a very small quantity".into() },
            Band { lo: 1.0, hi: Some(10.0), label: "a small quantity".into() },
            Band { lo: 10.0, hi: Some(100.0), label: "a moderate quantity".into() },
            Band { lo: 100.0, hi: Some(1000.0), label: "a large quantity".into() },
            Band { lo: 1000.0, hi: None, label: "a very large quantity".into() },
        ];
        AbstractionTable::new(vec![AbstractionRule {
            matcher: ValueMatcher::Any,
            bands,
        }])
        .expect("default bands are ordered")
    }

    /// Qualitative label for one step output, or `None` if no rule matches.
    fn label_for(
        &self,
        value: &Value,
        output_ty: &TypeId,
        metadata: &std::collections::BTreeMap<String, Value>,
        registry: &ToolRegistry,
    ) -> Option<String> {
        let x = value.as_f64()?;
        for rule in &self.rules {
            let applies = match &rule.matcher {
                ValueMatcher::Any => true,
                ValueMatcher::ByType { ty } => registry
                    .lattice()
                    .is_subtype(output_ty, ty)
                    .unwrap_or(false),
                ValueMatcher::ByMetadata { key, equals } => {
                    metadata.get(key).map(|v| v == equals).unwrap_or(false)
                }
            };
            if !applies {
                continue;
            }
            for band in &rule.bands {
                let hi = band.hi.unwrap_or(f64::INFINITY);
                if x >= band.lo && x < hi {
                    return Some(band.label.clone());
                }
            }
        }
        None
    }
}

/// One trace step with its output abstracted away.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbstractedStep {
    pub tool: ToolId,
    pub description: String,
    /// Qualitative descriptor; `None` on the final step, whose output is the
    /// answer and is requested rather than described.
    pub label: Option<String>,
}

/// The abstracted context document handed to question generators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbstractedTrace {
    pub trace_id: String,
    pub goal: ToolId,
    pub roots: Vec<RootParam>,
    pub steps: Vec<AbstractedStep>,
    pub final_output_name: String,
    pub answer: Value,
    pub concealed: Vec<Value>,
}

#[derive(Debug, Error)]
pub enum QuestionError {
    #[error("trace `{0}` is not golden")]
    NotGolden(String),
    #[error("question generator unavailable: {0}")]
    GeneratorUnavailable(String),
    #[error("concealment violated after {attempts} attempts; leaked literals: {leaks:?}")]
    ConcealmentViolation { attempts: u32, leaks: Vec<String> },
}

/// Replace every intermediate output of a golden trace by a qualitative
/// descriptor. The final output is kept aside as the answer.
pub fn abstract_trace(
    trace: &Trace,
    table: &AbstractionTable,
    registry: &ToolRegistry,
) -> Result<AbstractedTrace, QuestionError> {
    if trace.status != TraceStatus::Golden {
        return Err(QuestionError::NotGolden(trace.trace_id.clone()));
    }
    let last = trace.steps.len();
    let mut steps = Vec::with_capacity(last);
    let mut concealed = Vec::new();
    for (k, step) in trace.steps.iter().enumerate() {
        let spec = registry
            .get(&step.tool)
            .expect("trace steps reference registered tools");
        let is_final = k + 1 == last;
        let label = if is_final {
            None
        } else {
            concealed.extend(step.response.outputs().cloned());
            let output_ty = &spec.outputs[0].ty;
            Some(
                table
                    .label_for(
                        step.response.output(0).expect("golden steps succeed"),
                        output_ty,
                        &step.response.metadata,
                        registry,
                    )
                    .unwrap_or_else(|| GENERIC_LABEL.to_string()),
            )
        };
        steps.push(AbstractedStep {
            tool: step.tool.clone(),
            description: spec.description.clone(),
            label,
        });
    }
    let goal_spec = registry
        .get(&trace.goal)
        .expect("goal is a registered tool");
    let final_output_name = goal_spec
        .outputs
        .first()
        .map(|p| p.name.clone())
        .unwrap_or_else(|| "result".to_string());
    let answer = trace
        .final_outputs
        .get(&final_output_name)
        .cloned()
        .unwrap_or(Value::Text(String::new()));
    Ok(AbstractedTrace {
        trace_id: trace.trace_id.clone(),
        goal: trace.goal.clone(),
        roots: trace.root_inputs.clone(),
        steps,
        final_output_name,
        answer,
        concealed,
    })
}

/// The synthesized problem plus the data needed to verify concealment and
/// answer fidelity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub text: String,
    pub answer: Value,
    pub concealed: Vec<Value>,
    pub trace_ref: String,
}

/// A pluggable question generator: a remote model or the deterministic
/// template below.
pub trait QuestionGenerator {
    fn generate(&self, context: &AbstractedTrace, rubric: &Rubric) -> Result<String, String>;

    fn name(&self) -> &str {
        "generator"
    }
}

/// Deterministic offline generator assembling the problem from the
/// abstracted context. Scaffolding avoids digit-bearing enumeration so only
/// stated givens contribute numerals.
pub struct TemplateGenerator;

impl QuestionGenerator for TemplateGenerator {
    fn generate(&self, context: &AbstractedTrace, rubric: &Rubric) -> Result<String, String> {
        let mut text = String::new();
        text.push_str(&format!(
            "In a {} workflow, the following measurement procedure was carried out. ",
            rubric.domain
        ));
        for c in &rubric.constraints {
            text.push_str(c);
            if !c.ends_with('.') {
                text.push('.');
            }
            text.push(' ');
        }
        let mut roots = context.roots.clone();
        roots.sort_by(|a, b| (&a.tool, &a.input).cmp(&(&b.tool, &b.input)));
        for root in &roots {
            text.push_str(&format!(
                "The {} supplied to the {} step is {}. ",
                root.input.replace('_', " "),
                humanize(&root.tool),
                display_value(&root.value)
            ));
        }
        let connectors = ["First", "Next", "Then", "After that", "Subsequently"];
        for (k, step) in context.steps.iter().enumerate() {
            match &step.label {
                Some(label) => {
                    let connector = connectors[k.min(connectors.len() - 1)];
                    text.push_str(&format!(
                        "{connector}, the {} step ({}) produces {label}. ",
                        humanize(&step.tool),
                        decap(&step.description)
                    ));
                }
                None => {
                    text.push_str(&format!(
                        "Finally, the {} step ({}) completes the procedure. ",
                        humanize(&step.tool),
                        decap(&step.description)
                    ));
                }
            }
        }
        text.push_str(&format!(
            "What is the {} produced by the final step? Provide the value.",
            context.final_output_name.replace('_', " ")
        ));
        Ok(text)
    }

    fn name(&self) -> &str {
        "template"
    }
}

fn humanize(tool: &ToolId) -> String {
    tool.as_str().replace('_', " ")
}

fn decap(description: &str) -> String {
    let trimmed = description.trim_end_matches('.');
    let mut chars = trimmed.chars();
    match chars.next() {
        Some(first) => first.to_lowercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

fn display_value(v: &Value) -> String {
    match v {
        Value::Text(s) => format!("\"{s}\""),
        other => other.to_string(),
    }
}

/// Retry budget for generations that leak concealed literals.
pub const CONCEALMENT_RETRY_CAP: u32 = 3;

/// Generate a question for a golden trace and enforce the concealment
/// invariant by a literal scan over every formatting variant.
pub fn generate_question(
    trace: &Trace,
    rubric: &Rubric,
    generator: &dyn QuestionGenerator,
    table: &AbstractionTable,
    registry: &ToolRegistry,
) -> Result<QuestionSpec, QuestionError> {
    let context = abstract_trace(trace, table, registry)?;
    let mut last_leaks = Vec::new();
    for _attempt in 0..CONCEALMENT_RETRY_CAP {
        let text = generator
            .generate(&context, rubric)
            .map_err(QuestionError::GeneratorUnavailable)?;
        let leaks = concealment_violations(&text, &context.concealed);
        if leaks.is_empty() {
            return Ok(QuestionSpec {
                text,
                answer: context.answer.clone(),
                concealed: context.concealed.clone(),
                trace_ref: trace.trace_id.clone(),
            });
        }
        last_leaks = leaks;
    }
    Err(QuestionError::ConcealmentViolation {
        attempts: CONCEALMENT_RETRY_CAP,
        leaks: last_leaks,
    })
}

/// Deterministic template path (never expected to violate on corpus traces;
/// still routed through the scan).
pub fn template_generate(
    trace: &Trace,
    rubric: &Rubric,
    table: &AbstractionTable,
    registry: &ToolRegistry,
) -> Result<QuestionSpec, QuestionError> {
    generate_question(trace, rubric, &TemplateGenerator, table, registry)
}

/// Canonical formatting variants of a value for the concealment scan:
/// the shortest round-trip decimal plus 2-, 3- and 4-significant-digit
/// roundings for numbers; exact renderings for other scalars; canonical
/// JSON plus leaf variants for collections.
pub fn formatting_variants(v: &Value) -> Vec<String> {
    let mut out = Vec::new();
    match v {
        Value::Number(x) => {
            out.push(format!("{x}"));
            for sig in [2u32, 3, 4] {
                out.push(format!("{}", round_sig(*x, sig)));
            }
        }
        Value::Int(i) => out.push(format!("{i}")),
        Value::Bool(b) => out.push(format!("{b}")),
        Value::Text(s) => {
            if !s.is_empty() {
                out.push(s.clone());
            }
        }
        Value::List(items) => {
            out.push(v.to_canonical_json());
            for it in items {
                out.extend(formatting_variants(it));
            }
        }
        Value::Map(m) => {
            out.push(v.to_canonical_json());
            for it in m.values() {
                out.extend(formatting_variants(it));
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

fn round_sig(x: f64, sig: u32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let mag = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(sig as i32 - 1 - mag);
    (x * scale).round() / scale
}

fn is_token_char(c: char) -> bool {
    c.is_alphanumeric() || c == '.' || c == '-' || c == '_'
}

/// Does `needle` occur in `text` as a standalone literal (not embedded in a
/// longer number or identifier)?
pub fn contains_literal(text: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let mut start = 0;
    while let Some(pos) = text[start..].find(needle) {
        let begin = start + pos;
        let end = begin + needle.len();
        let before_ok = text[..begin]
            .chars()
            .next_back()
            .map(|c| !is_token_char(c))
            .unwrap_or(true);
        let after_ok = text[end..]
            .chars()
            .next()
            .map(|c| !is_token_char(c))
            .unwrap_or(true);
        if before_ok && after_ok {
            return true;
        }
        start = begin + 1;
        if start >= text.len() {
            break;
        }
    }
    false
}

/// All leaked formattings of the concealed values found in the text.
pub fn concealment_violations(text: &str, concealed: &[Value]) -> Vec<String> {
    let mut leaks = Vec::new();
    for value in concealed {
        for variant in formatting_variants(value) {
            if contains_literal(text, &variant) {
                leaks.push(variant);
            }
        }
    }
    leaks.sort();
    leaks.dedup();
    leaks
}
