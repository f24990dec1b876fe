//! Built-in tool behaviors.
//!
//! A behavior is a pure function of (bound arguments, parameters, seed).
//! The manifest wires each tool to one behavior id plus parameters, so the
//! whole corpus stays data-driven; anything beyond this set is registered
//! programmatically through `ToolRegistry::register_behavior`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{ArtifactRef, ToolError, ToolErrorKind, ToolRegistry, ToolSpec};
use crate::value::{short_digest, Value, ValueMap};

pub struct BehaviorOutput {
    pub outputs: Vec<Value>,
    pub metadata: BTreeMap<String, Value>,
}

impl BehaviorOutput {
    pub fn single(value: Value) -> Self {
        BehaviorOutput {
            outputs: vec![value],
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_metadata(mut self, key: &str, value: Value) -> Self {
        self.metadata.insert(key.to_string(), value);
        self
    }
}

/// Execution context handed to a behavior: declared inputs resolved in
/// signature order, behavior parameters, the seed, the episode artifact
/// store and the registry (for composite tools calling other tools).
pub struct BehaviorCtx<'a> {
    registry: &'a ToolRegistry,
    spec: &'a ToolSpec,
    args: &'a ValueMap,
    seed: u64,
    store: &'a mut super::ArtifactStore,
    persisted: Option<ArtifactRef>,
}

pub type BehaviorFn = dyn Fn(&mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> + Send + Sync;

impl<'a> BehaviorCtx<'a> {
    pub(super) fn new(
        registry: &'a ToolRegistry,
        spec: &'a ToolSpec,
        args: &'a ValueMap,
        seed: u64,
        store: &'a mut super::ArtifactStore,
    ) -> Self {
        BehaviorCtx {
            registry,
            spec,
            args,
            seed,
            store,
            persisted: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ValueMap {
        &self.spec.behavior.params
    }

    pub fn param_f64(&self, name: &str, default: f64) -> f64 {
        self.params()
            .get(name)
            .and_then(Value::as_f64)
            .unwrap_or(default)
    }

    /// Value bound to the input at signature position `i`.
    pub fn input(&self, i: usize) -> &Value {
        let name = &self.spec.inputs[i].name;
        self.args
            .get(name)
            .expect("registry validated required arguments")
    }

    pub fn input_name(&self, i: usize) -> &str {
        &self.spec.inputs[i].name
    }

    pub fn input_count(&self) -> usize {
        self.spec.inputs.len()
    }

    /// Numeric value of input `i`, or a shape error naming it.
    pub fn numeric_input(&self, i: usize) -> Result<f64, ToolError> {
        self.input(i).as_f64().ok_or_else(|| {
            ToolError::new(
                ToolErrorKind::ShapeMismatch,
                format!("input `{}` must be numeric", self.input_name(i)),
            )
            .on_input(self.input_name(i).to_string())
        })
    }

    pub fn text_input(&self, i: usize) -> Result<&str, ToolError> {
        self.input(i).as_text().ok_or_else(|| {
            ToolError::new(
                ToolErrorKind::ShapeMismatch,
                format!("input `{}` must be text", self.input_name(i)),
            )
            .on_input(self.input_name(i).to_string())
        })
    }

    /// All numeric inputs in signature order.
    pub fn numeric_inputs(&self) -> Result<Vec<f64>, ToolError> {
        (0..self.input_count())
            .filter(|&i| self.input(i).is_numeric())
            .map(|i| self.numeric_input(i))
            .collect()
    }

    /// Deterministic pseudo-noise in [-1, 1] derived from (seed, args).
    pub fn unit_noise(&self) -> f64 {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(crate::value::args_digest(self.args).as_bytes());
        let digest = hasher.finalize();
        let raw = u64::from_le_bytes(digest[..8].try_into().unwrap());
        (raw as f64 / u64::MAX as f64) * 2.0 - 1.0
    }

    /// Persist a value as an artifact file under the episode namespace and
    /// remember it so the response carries the reference.
    pub fn persist(&mut self, value: &Value) -> ArtifactRef {
        let encoded = value.to_canonical_json();
        let stem = format!("{}-{}", self.spec.id, short_digest(encoded.as_bytes()));
        let path = self.store.artifact_path(&self.spec.domain, &stem);
        self.store.write(path.clone(), encoded.into_bytes());
        let art = ArtifactRef::new(path, grid_dims(value), grid_nnz(value));
        self.persisted = Some(art.clone());
        art
    }

    pub fn read_artifact(&self, path: &str) -> Option<Value> {
        let bytes = self.store.read(path)?;
        serde_json::from_slice(bytes).ok()
    }

    /// Invoke another registered tool; used by composite behaviors.
    pub fn call_tool(
        &mut self,
        id: &super::ToolId,
        args: &ValueMap,
    ) -> Result<super::ToolResponse, ToolError> {
        self.registry
            .invoke(id, args, self.seed, self.store)
            .map_err(|e| ToolError::new(ToolErrorKind::DomainError, e.to_string()))
    }

    pub(super) fn take_persisted(&mut self) -> Option<ArtifactRef> {
        self.persisted.take()
    }
}

/// Dimensions for artifact bookkeeping; map payloads with a `values` list
/// report the dimensions of that list.
fn grid_dims(v: &Value) -> Vec<u64> {
    if let Value::Map(m) = v {
        if let Some(values) = m.get("values") {
            return super::value_dims(values);
        }
    }
    super::value_dims(v)
}

fn grid_nnz(v: &Value) -> u64 {
    if let Value::Map(m) = v {
        if let Some(values) = m.get("values") {
            return super::value_nnz(values);
        }
    }
    super::value_nnz(v)
}

fn range_violation(input: &str, message: String) -> ToolError {
    ToolError::new(ToolErrorKind::RangeViolation, message).on_input(input.to_string())
}

fn domain_error(message: impl Into<String>) -> ToolError {
    ToolError::new(ToolErrorKind::DomainError, message)
}

fn map(pairs: Vec<(&str, Value)>) -> Value {
    Value::Map(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

type B = (&'static str, fn(&mut BehaviorCtx) -> Result<BehaviorOutput, ToolError>);

fn b_affine(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let scale = ctx.param_f64("scale", 1.0);
    let offset = ctx.param_f64("offset", 0.0);
    let sum: f64 = ctx.numeric_inputs()?.iter().sum();
    Ok(BehaviorOutput::single(Value::Number(scale * sum + offset)))
}

fn b_product(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let scale = ctx.param_f64("scale", 1.0);
    let powers = ctx.params().get("powers").and_then(Value::as_map).cloned();
    let mut acc = scale;
    for i in 0..ctx.input_count() {
        if !ctx.input(i).is_numeric() {
            continue;
        }
        let x = ctx.numeric_input(i)?;
        let p = powers
            .as_ref()
            .and_then(|m| m.get(ctx.input_name(i)))
            .and_then(Value::as_f64)
            .unwrap_or(1.0);
        acc *= x.abs().powf(p);
    }
    Ok(BehaviorOutput::single(Value::Number(acc)))
}

fn b_ratio(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let scale = ctx.param_f64("scale", 1.0);
    let a = ctx.numeric_input(0)?;
    let b = ctx.numeric_input(1)?;
    if b == 0.0 {
        return Err(domain_error("division by zero").on_input(ctx.input_name(1).to_string()));
    }
    Ok(BehaviorOutput::single(Value::Number(scale * a / b)))
}

fn b_sqrt(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let x = ctx.numeric_input(0)?;
    if x < 0.0 {
        return Err(range_violation(
            ctx.input_name(0),
            format!("square root requires a non-negative input, got {x}"),
        ));
    }
    Ok(BehaviorOutput::single(Value::Number(x.sqrt())))
}

fn b_exp_rate(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let prefactor = ctx.param_f64("prefactor", 1.0);
    let gas_const = ctx.param_f64("gas_const", 8.314);
    let t = ctx.numeric_input(0)?;
    let ea = ctx.numeric_input(1)?;
    if t <= 0.0 {
        return Err(range_violation(
            ctx.input_name(0),
            format!("temperature must be positive, got {t}"),
        ));
    }
    let rate = prefactor * (-ea / (gas_const * t)).exp();
    Ok(BehaviorOutput::single(Value::Number(rate)))
}

fn b_expansion(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let coeff = ctx.param_f64("coeff", 1e-5);
    let base = ctx.numeric_input(0)?;
    let delta = ctx.numeric_input(1)?;
    let factor = 1.0 + coeff * delta;
    if factor <= 0.0 {
        return Err(range_violation(
            ctx.input_name(1),
            format!("expansion factor collapsed to {factor}"),
        ));
    }
    Ok(BehaviorOutput::single(Value::Number(base * factor)))
}

fn b_logistic(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let k = ctx.param_f64("k", 1.0);
    let mid = ctx.param_f64("mid", 0.0);
    let width = ctx.param_f64("width", 1.0);
    let x: f64 = ctx.numeric_inputs()?.iter().sum();
    let y = k / (1.0 + (-(x - mid) / width).exp());
    Ok(BehaviorOutput::single(Value::Number(y)))
}

fn b_scaled_log(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let scale = ctx.param_f64("scale", 1.0);
    let x = ctx.numeric_input(0)?;
    Ok(BehaviorOutput::single(Value::Number(
        scale * (1.0 + x.abs()).ln(),
    )))
}

fn b_mix_mean(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let xs = ctx.numeric_inputs()?;
    if xs.is_empty() {
        return Err(domain_error("no numeric inputs to average"));
    }
    Ok(BehaviorOutput::single(Value::Number(
        xs.iter().sum::<f64>() / xs.len() as f64,
    )))
}

fn b_series(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let count = ctx.param_f64("count", 5.0) as usize;
    let growth = ctx.param_f64("growth", 1.5);
    let x0 = ctx.numeric_input(0)?;
    let mut v = Vec::with_capacity(count);
    let mut x = x0;
    for _ in 0..count.max(1) {
        v.push(Value::Number(x));
        x *= growth;
    }
    Ok(BehaviorOutput::single(Value::List(v)))
}

fn b_list_mean(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let items = ctx.input(0).as_list().ok_or_else(|| {
        ToolError::new(ToolErrorKind::ShapeMismatch, "expected a list input")
            .on_input(ctx.input_name(0).to_string())
    })?;
    if items.is_empty() {
        return Err(domain_error("cannot average an empty list")
            .on_input(ctx.input_name(0).to_string()));
    }
    let mut sum = 0.0;
    for it in items {
        sum += it
            .as_f64()
            .ok_or_else(|| domain_error("list contains non-numeric entries"))?;
    }
    Ok(BehaviorOutput::single(Value::Number(sum / items.len() as f64)))
}

fn b_pack3(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let v = vec![
        Value::Number(ctx.numeric_input(0)?),
        Value::Number(ctx.numeric_input(1)?),
        Value::Number(ctx.numeric_input(2)?),
    ];
    Ok(BehaviorOutput::single(Value::List(v)))
}

fn b_norm3(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let items = ctx.input(0).as_list().ok_or_else(|| {
        ToolError::new(ToolErrorKind::ShapeMismatch, "expected a 3-component vector")
            .on_input(ctx.input_name(0).to_string())
    })?;
    if items.len() != 3 {
        return Err(domain_error(format!(
            "expected 3 components, got {}",
            items.len()
        )));
    }
    let mut sq = 0.0;
    for it in items {
        let x = it
            .as_f64()
            .ok_or_else(|| domain_error("vector components must be numeric"))?;
        sq += x * x;
    }
    Ok(BehaviorOutput::single(Value::Number(sq.sqrt())))
}

fn b_diag3(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let (a, b, c) = (
        ctx.numeric_input(0)?,
        ctx.numeric_input(1)?,
        ctx.numeric_input(2)?,
    );
    let row = |x: f64, i: usize| {
        Value::List(
            (0..3)
                .map(|j| Value::Number(if i == j { x } else { 0.0 }))
                .collect(),
        )
    };
    Ok(BehaviorOutput::single(Value::List(vec![
        row(a, 0),
        row(b, 1),
        row(c, 2),
    ])))
}

fn b_trace3(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let rows = ctx.input(0).as_list().ok_or_else(|| {
        ToolError::new(ToolErrorKind::ShapeMismatch, "expected a matrix")
            .on_input(ctx.input_name(0).to_string())
    })?;
    let mut tr = 0.0;
    for (i, row) in rows.iter().enumerate() {
        let cells = row
            .as_list()
            .ok_or_else(|| domain_error("matrix rows must be lists"))?;
        let cell = cells
            .get(i)
            .and_then(Value::as_f64)
            .ok_or_else(|| domain_error("matrix diagonal must be numeric"))?;
        tr += cell;
    }
    Ok(BehaviorOutput::single(Value::Number(tr)))
}

fn b_count_chars(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let chars = ctx
        .params()
        .get("chars")
        .and_then(Value::as_text)
        .unwrap_or("C")
        .to_string();
    let text = ctx.text_input(0)?;
    let n = text.chars().filter(|c| chars.contains(*c)).count();
    Ok(BehaviorOutput::single(Value::Int(n as i64)))
}

fn b_char_weight(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let offset = ctx.param_f64("offset", 0.0);
    let weights = ctx
        .params()
        .get("weights")
        .and_then(Value::as_map)
        .cloned()
        .unwrap_or_default();
    let text = ctx.text_input(0)?.to_string();
    let mut total = offset;
    for c in text.chars() {
        if let Some(w) = weights.get(&c.to_string()).and_then(Value::as_f64) {
            total += w;
        }
    }
    Ok(BehaviorOutput::single(Value::Number(total)))
}

fn b_char_fraction(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let chars = ctx
        .params()
        .get("chars")
        .and_then(Value::as_text)
        .unwrap_or("GC")
        .to_string();
    let text = ctx.text_input(0)?;
    let n = text.chars().filter(|c| chars.contains(*c)).count() as f64;
    let len = text.chars().count() as f64;
    // Smoothed so the fraction is strictly positive for any input.
    Ok(BehaviorOutput::single(Value::Number(
        (n + 0.5) / (len + 1.0),
    )))
}

fn classify_value(x: f64, bands: &[Value], fallback: &str) -> String {
    for band in bands {
        let Some(b) = band.as_map() else { continue };
        let lo = b.get("lo").and_then(Value::as_f64).unwrap_or(f64::NEG_INFINITY);
        let hi = b.get("hi").and_then(Value::as_f64).unwrap_or(f64::INFINITY);
        if x >= lo && x < hi {
            if let Some(label) = b.get("label").and_then(Value::as_text) {
                return label.to_string();
            }
        }
    }
    fallback.to_string()
}

fn b_classify(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let bands = ctx
        .params()
        .get("bands")
        .and_then(Value::as_list)
        .map(|l| l.to_vec())
        .unwrap_or_default();
    let fallback = ctx
        .params()
        .get("fallback")
        .and_then(Value::as_text)
        .unwrap_or("unclassified")
        .to_string();
    let x = ctx.numeric_input(0)?;
    Ok(BehaviorOutput::single(Value::Text(classify_value(
        x, &bands, &fallback,
    ))))
}

fn b_table(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let rows = ctx
        .params()
        .get("rows")
        .and_then(Value::as_map)
        .cloned()
        .unwrap_or_default();
    let key = ctx.text_input(0)?.to_string();
    let row = rows.get(&key).ok_or_else(|| {
        domain_error(format!("no record for key `{key}`"))
            .on_input(ctx.input_name(0).to_string())
    })?;
    let outputs = match row {
        Value::List(vs) => vs.clone(),
        other => vec![other.clone()],
    };
    Ok(BehaviorOutput {
        outputs,
        metadata: BTreeMap::from([(
            "data_source".to_string(),
            Value::Text("builtin_table".to_string()),
        )]),
    })
}

fn b_compare_report(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let a = ctx.numeric_input(0)?;
    let b = ctx.numeric_input(1)?;
    if b == 0.0 {
        return Err(domain_error("division by zero").on_input(ctx.input_name(1).to_string()));
    }
    Ok(BehaviorOutput::single(map(vec![
        ("ratio", Value::Number(a / b)),
        (
            "larger",
            Value::Text(if a >= b { "first" } else { "second" }.to_string()),
        ),
        ("sum", Value::Number(a + b)),
    ])))
}

fn b_difficulty_report(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let mid = ctx.param_f64("mid", 100.0);
    let width = ctx.param_f64("width", 80.0);
    let x = ctx.numeric_input(0)?;
    let score = 10.0 / (1.0 + (-(x - mid) / width).exp());
    let category = if score < 4.0 {
        "easy"
    } else if score < 7.0 {
        "moderate"
    } else {
        "difficult"
    };
    Ok(BehaviorOutput::single(map(vec![
        ("score", Value::Number(score)),
        ("category", Value::Text(category.to_string())),
    ])))
}

fn b_feasibility_report(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let threshold = ctx.param_f64("threshold", 1.0);
    let a = ctx.numeric_input(0)?;
    let b = ctx.numeric_input(1)?;
    let index = a * b / 100.0;
    Ok(BehaviorOutput::single(map(vec![
        ("feasible", Value::Bool(index > threshold / 100.0)),
        ("index", Value::Number(index)),
    ])))
}

fn b_noisy_scale(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let jitter = ctx.param_f64("jitter", 0.01);
    let x = ctx.numeric_input(0)?;
    let factor = 1.0 + jitter * ctx.unit_noise();
    Ok(
        BehaviorOutput::single(Value::Number(x * factor)).with_metadata(
            "status",
            Value::Text("measured".to_string()),
        ),
    )
}

fn b_grid(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let rows = ctx.param_f64("rows", 48.0) as usize;
    let cols = ctx.param_f64("cols", 48.0) as usize;
    let a = ctx.numeric_input(0)?;
    let b = ctx.numeric_input(1)?;
    let mut grid = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut row = Vec::with_capacity(cols);
        for j in 0..cols {
            let v = if (i + j) % 4 == 0 {
                0.0
            } else {
                a * (i + 1) as f64 + b * (j + 1) as f64
            };
            row.push(Value::Number(v));
        }
        grid.push(Value::List(row));
    }
    Ok(BehaviorOutput::single(map(vec![
        ("values", Value::List(grid)),
        ("rows", Value::Int(rows as i64)),
        ("cols", Value::Int(cols as i64)),
    ])))
}

fn grid_cells(values: &Value) -> Option<Vec<f64>> {
    let rows = values.as_list()?;
    let mut cells = Vec::new();
    for row in rows {
        for cell in row.as_list()? {
            cells.push(cell.as_f64()?);
        }
    }
    Some(cells)
}

fn b_grid_stats(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let input = ctx.input(0).clone();
    let m = input.as_map().ok_or_else(|| {
        ToolError::new(ToolErrorKind::ShapeMismatch, "expected a grid payload")
            .on_input(ctx.input_name(0).to_string())
    })?;
    // Inline values, a reachable artifact file, or the bare spill summary.
    let inline = m.get("values").cloned().or_else(|| {
        let path = m.get("filepath").and_then(Value::as_text)?;
        let loaded = ctx.read_artifact(path)?;
        loaded.as_map().and_then(|lm| lm.get("values").cloned())
    });
    if let Some(values) = inline {
        let cells = grid_cells(&values)
            .ok_or_else(|| domain_error("grid values must be numeric rows"))?;
        if cells.is_empty() {
            return Err(domain_error("grid has no cells"));
        }
        let n = cells.len() as f64;
        let mean = cells.iter().sum::<f64>() / n;
        let max = cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let nnz = cells.iter().filter(|&&c| c != 0.0).count() as i64;
        return Ok(BehaviorOutput::single(map(vec![
            ("cells", Value::Int(cells.len() as i64)),
            ("mean", Value::Number(mean)),
            ("max", Value::Number(max)),
            ("nnz", Value::Int(nnz)),
            ("density", Value::Number(nnz as f64 / n)),
        ])));
    }
    let dims: Vec<f64> = m
        .get("shape")
        .and_then(Value::as_list)
        .map(|l| l.iter().filter_map(Value::as_f64).collect())
        .unwrap_or_default();
    let cells = dims.iter().product::<f64>().max(1.0);
    let nnz = m.get("nnz").and_then(Value::as_f64).unwrap_or(0.0);
    Ok(BehaviorOutput::single(map(vec![
        ("cells", Value::Int(cells as i64)),
        ("nnz", Value::Int(nnz as i64)),
        ("density", Value::Number(nnz / cells)),
    ])))
}

fn b_plot_stub(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let kind = ctx
        .params()
        .get("kind")
        .and_then(Value::as_text)
        .unwrap_or("line")
        .to_string();
    let mut series = BTreeMap::new();
    for i in 0..ctx.input_count() {
        series.insert(ctx.input_name(i).to_string(), ctx.input(i).clone());
    }
    let spec = map(vec![
        ("kind", Value::Text(kind.clone())),
        ("series", Value::Map(series)),
    ]);
    let art = ctx.persist(&spec);
    Ok(BehaviorOutput::single(Value::Text(art.filepath.clone()))
        .with_metadata("status", Value::Text("rendered".to_string()))
        .with_metadata("plot_kind", Value::Text(kind)))
}

fn b_composite(ctx: &mut BehaviorCtx) -> Result<BehaviorOutput, ToolError> {
    let steps = ctx
        .params()
        .get("steps")
        .and_then(Value::as_list)
        .map(|l| l.to_vec())
        .unwrap_or_default();
    if steps.is_empty() {
        return Err(domain_error("composite behavior declares no steps"));
    }
    let mut step_results: Vec<super::ToolResponse> = Vec::new();
    let mut calls_meta = Vec::new();
    for (k, step) in steps.iter().enumerate() {
        let s = step
            .as_map()
            .ok_or_else(|| domain_error("composite step must be a map"))?;
        let tool = s
            .get("tool")
            .and_then(Value::as_text)
            .ok_or_else(|| domain_error("composite step missing `tool`"))?
            .to_string();
        let mut call_args = ValueMap::new();
        if let Some(Value::Map(inputs)) = s.get("inputs") {
            for (slot, source) in inputs {
                let v = resolve_step_source(ctx, source, &step_results)?;
                call_args.insert(slot.clone(), v);
            }
        }
        let resp = ctx.call_tool(&super::ToolId::new(tool.clone()), &call_args)?;
        calls_meta.push(map(vec![
            ("tool", Value::Text(tool.clone())),
            (
                "status",
                Value::Text(if resp.is_success() { "success" } else { "error" }.to_string()),
            ),
        ]));
        if !resp.is_success() {
            let inner = resp.error.expect("error responses carry an error");
            return Err(ToolError::new(
                inner.kind,
                format!("composite step {} (`{tool}`) failed: {}", k + 1, inner.message),
            ));
        }
        step_results.push(resp);
    }
    let result = match ctx.params().get("result") {
        Some(Value::Map(fields)) => {
            let mut out = BTreeMap::new();
            for (name, source) in fields {
                out.insert(name.clone(), resolve_step_source(ctx, source, &step_results)?);
            }
            Value::Map(out)
        }
        _ => step_results
            .last()
            .and_then(|r| r.result.clone())
            .expect("at least one successful step"),
    };
    let out = BehaviorOutput::single(result).with_metadata(
        "intermediate_calls",
        Value::List(calls_meta),
    );
    Ok(out)
}

/// Resolve a composite wiring source: `{"arg": name}`, `{"step": k,
/// "output": i}` (1-based step, 0-based output) or `{"const": value}`.
fn resolve_step_source(
    ctx: &BehaviorCtx,
    source: &Value,
    steps: &[super::ToolResponse],
) -> Result<Value, ToolError> {
    let m = source
        .as_map()
        .ok_or_else(|| domain_error("composite wiring entries must be maps"))?;
    if let Some(name) = m.get("arg").and_then(Value::as_text) {
        return ctx
            .args
            .get(name)
            .cloned()
            .ok_or_else(|| ToolError::missing_argument(name));
    }
    if let Some(k) = m.get("step").and_then(Value::as_f64) {
        let idx = k as usize;
        let resp = steps
            .get(idx.wrapping_sub(1))
            .ok_or_else(|| domain_error(format!("composite references unknown step {idx}")))?;
        let out_i = m.get("output").and_then(Value::as_f64).unwrap_or(0.0) as usize;
        return resp
            .output(out_i)
            .cloned()
            .ok_or_else(|| domain_error(format!("step {idx} has no output {out_i}")));
    }
    if let Some(v) = m.get("const") {
        return Ok(v.clone());
    }
    Err(domain_error("composite wiring entry must name arg, step or const"))
}

/// The built-in behavior table keyed by behavior id.
pub fn builtin_behaviors() -> HashMap<String, Arc<BehaviorFn>> {
    let entries: &[B] = &[
        ("affine", b_affine),
        ("product", b_product),
        ("ratio", b_ratio),
        ("sqrt", b_sqrt),
        ("exp_rate", b_exp_rate),
        ("expansion", b_expansion),
        ("logistic", b_logistic),
        ("scaled_log", b_scaled_log),
        ("mix_mean", b_mix_mean),
        ("series", b_series),
        ("list_mean", b_list_mean),
        ("pack3", b_pack3),
        ("norm3", b_norm3),
        ("diag3", b_diag3),
        ("trace3", b_trace3),
        ("count_chars", b_count_chars),
        ("char_weight", b_char_weight),
        ("char_fraction", b_char_fraction),
        ("classify", b_classify),
        ("table", b_table),
        ("compare_report", b_compare_report),
        ("difficulty_report", b_difficulty_report),
        ("feasibility_report", b_feasibility_report),
        ("noisy_scale", b_noisy_scale),
        ("grid", b_grid),
        ("grid_stats", b_grid_stats),
        ("plot_stub", b_plot_stub),
        ("composite", b_composite),
    ];
    entries
        .iter()
        .map(|(name, f)| {
            let f = *f;
            (
                name.to_string(),
                Arc::new(move |ctx: &mut BehaviorCtx| f(ctx)) as Arc<BehaviorFn>,
            )
        })
        .collect()
}
