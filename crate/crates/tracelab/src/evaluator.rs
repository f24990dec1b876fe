//! Scoring: strict hierarchical answer matching with a numeric tolerance,
//! success rate, success weighted by path length, and stratification by
//! domain and difficulty tier.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::EpisodeLog;
use crate::task::TaskRecord;
use crate::value::Value;

/// Numeric tolerance for answer matching.
pub const DEFAULT_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    L1,
    L2,
    L3,
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Tier::L1 => "L1",
            Tier::L2 => "L2",
            Tier::L3 => "L3",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("result set is empty")]
    EmptyResults,
    #[error("reference path length must be at least 1, got {0}")]
    InvalidLength(usize),
    #[error("episode references unknown task `{0}`")]
    UnknownTask(String),
}

/// Difficulty tier from a reference path length.
pub fn difficulty_of(reference_path_length: usize) -> Result<Tier, EvalError> {
    match reference_path_length {
        0 => Err(EvalError::InvalidLength(0)),
        1..=3 => Ok(Tier::L1),
        4..=7 => Ok(Tier::L2),
        _ => Ok(Tier::L3),
    }
}

/// Matching options; the default is the absolute tolerance used everywhere.
#[derive(Debug, Clone, Copy)]
pub struct MatchOptions {
    pub tolerance: f64,
    /// Relative comparison `|p - e| <= tol * max(|p|, |e|)` instead of the
    /// absolute default. Off unless explicitly requested.
    pub relative: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            tolerance: DEFAULT_TOLERANCE,
            relative: false,
        }
    }
}

/// Strict hierarchical match: maps need identical key sets, lists match
/// element-wise in order, numbers match within the tolerance, booleans and
/// text on equality. No extra or missing fields are tolerated.
pub fn match_answer(predicted: &Value, expected: &Value, tolerance: f64) -> bool {
    match_answer_with(
        predicted,
        expected,
        &MatchOptions {
            tolerance,
            relative: false,
        },
    )
}

pub fn match_answer_with(predicted: &Value, expected: &Value, opts: &MatchOptions) -> bool {
    match (predicted, expected) {
        (Value::Bool(a), Value::Bool(b)) => a == b,
        (Value::Text(a), Value::Text(b)) => a == b,
        (a, b) if a.is_numeric() && b.is_numeric() => {
            let (x, y) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            if opts.relative {
                (x - y).abs() <= opts.tolerance * x.abs().max(y.abs())
            } else {
                (x - y).abs() <= opts.tolerance
            }
        }
        (Value::List(a), Value::List(b)) => {
            a.len() == b.len()
                && a.iter()
                    .zip(b.iter())
                    .all(|(x, y)| match_answer_with(x, y, opts))
        }
        (Value::Map(a), Value::Map(b)) => {
            a.len() == b.len()
                && a.keys().eq(b.keys())
                && a.iter().all(|(k, v)| match_answer_with(v, &b[k], opts))
        }
        _ => false,
    }
}

/// Per-task scoring record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub task_id: String,
    pub domain: String,
    pub tier: Tier,
    /// 1 iff every sub-question matched.
    pub success: bool,
    /// Agent path length: count of tool-call actions, successful or failed.
    pub path_length: usize,
    /// Expert reference path length.
    pub reference_path_length: usize,
    pub per_subquestion: Vec<bool>,
}

impl EvalResult {
    pub fn s_i(&self) -> f64 {
        if self.success {
            1.0
        } else {
            0.0
        }
    }
}

/// Optional plug-in verifier for free-text fields when strict matching
/// fails on text alone. The default build compares text exactly.
pub trait TextVerifier {
    fn text_match(&self, expected: &str, predicted: &str) -> bool;
}

pub struct ExactText;

impl TextVerifier for ExactText {
    fn text_match(&self, expected: &str, predicted: &str) -> bool {
        expected == predicted
    }
}

/// Score one episode against its task.
pub fn evaluate_episode(
    task: &TaskRecord,
    log: &EpisodeLog,
    tolerance: f64,
) -> Result<EvalResult, EvalError> {
    let tier = difficulty_of(task.reference_path_length)?;
    let per_subquestion: Vec<bool> = task
        .sub_questions
        .iter()
        .map(|sq| {
            let predicted = match &log.final_answer {
                None => return false,
                Some(v) => v,
            };
            // Multi-part answers arrive as a map keyed by sub-question id;
            // single-part tasks accept the bare value.
            let candidate = if task.sub_questions.len() == 1 {
                predicted
                    .as_map()
                    .and_then(|m| m.get(&sq.id))
                    .unwrap_or(predicted)
            } else {
                match predicted.as_map().and_then(|m| m.get(&sq.id)) {
                    Some(v) => v,
                    None => return false,
                }
            };
            match_answer(candidate, &sq.expected, tolerance)
        })
        .collect();
    Ok(EvalResult {
        task_id: task.task_id.clone(),
        domain: task.domain.clone(),
        tier,
        success: per_subquestion.iter().all(|&b| b),
        path_length: log.actions.len(),
        reference_path_length: task.reference_path_length,
        per_subquestion,
    })
}

/// SR: mean of the per-task success indicators.
pub fn success_rate(results: &[EvalResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    Ok(results.iter().map(EvalResult::s_i).sum::<f64>() / results.len() as f64)
}

/// SPL: mean over tasks of `S_i * L_i / max(P_i, L_i)`.
pub fn spl(results: &[EvalResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let mut total = 0.0;
    for r in results {
        if r.reference_path_length == 0 {
            return Err(EvalError::InvalidLength(0));
        }
        let l = r.reference_path_length as f64;
        let p = r.path_length as f64;
        total += r.s_i() * l / p.max(l);
    }
    Ok(total / results.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub n: usize,
    pub sr: f64,
    pub spl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StratifyBy {
    Domain,
    Tier,
}

/// Per-group SR and SPL plus the overall row. Groups with zero tasks are
/// simply absent.
pub fn stratify(results: &[EvalResult], by: StratifyBy) -> Result<Vec<GroupRow>, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let mut groups: BTreeMap<String, Vec<EvalResult>> = BTreeMap::new();
    for r in results {
        let key = match by {
            StratifyBy::Domain => r.domain.clone(),
            StratifyBy::Tier => r.tier.to_string(),
        };
        groups.entry(key).or_default().push(r.clone());
    }
    let mut rows = Vec::new();
    for (group, members) in groups {
        rows.push(GroupRow {
            group,
            n: members.len(),
            sr: success_rate(&members)?,
            spl: spl(&members)?,
        });
    }
    rows.push(GroupRow {
        group: "overall".to_string(),
        n: results.len(),
        sr: success_rate(results)?,
        spl: spl(results)?,
    });
    Ok(rows)
}

/// Report with overall, by-domain and by-tier sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub overall: GroupRow,
    pub by_domain: Vec<GroupRow>,
    pub by_tier: Vec<GroupRow>,
}

pub fn build_report(results: &[EvalResult]) -> Result<Report, EvalError> {
    let mut by_domain = stratify(results, StratifyBy::Domain)?;
    let overall = by_domain.pop().expect("stratify appends the overall row");
    let mut by_tier = stratify(results, StratifyBy::Tier)?;
    by_tier.pop();
    Ok(Report {
        overall,
        by_domain,
        by_tier,
    })
}

impl Report {
    /// Aligned text table with overall, by-domain and by-tier sections.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mut section = |title: &str, rows: &[GroupRow]| {
            out.push_str(&format!("{title}\n"));
            out.push_str(&format!(
                "  {:<16} {:>6} {:>8} {:>8}\n",
                "group", "n", "SR", "SPL"
            ));
            for r in rows {
                out.push_str(&format!(
                    "  {:<16} {:>6} {:>8.3} {:>8.3}\n",
                    r.group, r.n, r.sr, r.spl
                ));
            }
        };
        section("Overall", std::slice::from_ref(&self.overall));
        section("By domain", &self.by_domain);
        section("By difficulty", &self.by_tier);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,group,n,sr,spl\n");
        let mut push = |section: &str, rows: &[GroupRow]| {
            for r in rows {
                out.push_str(&format!(
                    "{section},{},{},{},{}\n",
                    r.group, r.n, r.sr, r.spl
                ));
            }
        };
        push("overall", std::slice::from_ref(&self.overall));
        push("domain", &self.by_domain);
        push("tier", &self.by_tier);
        out
    }
}
