//! Process-level feedback metrics over consecutive tool actions, and
//! trajectory-level recovery-rate curves over step intervals.
//!
//! Action identity is tool id plus canonical argument digest: repeating the
//! same tool with corrected inputs is a tuning attempt, not a repeat.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{ActionOutcome, EpisodeLog};
use crate::evaluator::EvalResult;
use crate::toolkit::ToolId;
use crate::value::args_digest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionStep {
    pub t: usize,
    pub tool: ToolId,
    pub args_digest: String,
    pub outcome: ActionOutcome,
}

impl ActionStep {
    pub fn failed(&self) -> bool {
        self.outcome == ActionOutcome::Fail
    }

    pub fn same_action(&self, other: &ActionStep) -> bool {
        self.tool == other.tool && self.args_digest == other.args_digest
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ActionSeq {
    pub steps: Vec<ActionStep>,
}

impl ActionSeq {
    pub fn from_log(log: &EpisodeLog) -> Self {
        ActionSeq {
            steps: log
                .actions
                .iter()
                .map(|a| ActionStep {
                    t: a.index,
                    tool: a.tool.clone(),
                    args_digest: args_digest(&a.args),
                    outcome: a.outcome,
                })
                .collect(),
        }
    }
}

/// A count-ratio with its denominator kept explicit; the rate is undefined
/// exactly when the denominator is zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: usize,
    pub den: usize,
}

impl Ratio {
    pub fn rate(&self) -> Option<f64> {
        if self.den == 0 {
            None
        } else {
            Some(self.num as f64 / self.den as f64)
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FeedbackReport {
    /// P(action changes | previous action failed).
    pub adaptation: Ratio,
    /// P(success | failure followed by same tool with changed inputs).
    pub tuning: Ratio,
    /// P(success | failure followed by a different tool).
    pub switching: Ratio,
    /// Identical repeated failures after a failure; loop escape is the
    /// complement of this ratio's rate.
    pub identical_failures: Ratio,
}

impl FeedbackReport {
    pub fn adaptation_rate(&self) -> Option<f64> {
        self.adaptation.rate()
    }

    pub fn tuning_rate(&self) -> Option<f64> {
        self.tuning.rate()
    }

    pub fn switching_rate(&self) -> Option<f64> {
        self.switching.rate()
    }

    pub fn loop_escape_rate(&self) -> Option<f64> {
        self.identical_failures.rate().map(|r| 1.0 - r)
    }
}

/// Pooled feedback metrics over all consecutive action pairs. A failure at
/// the final step of a sequence has no successor and contributes nothing.
pub fn feedback_metrics(seqs: &[ActionSeq]) -> FeedbackReport {
    let mut report = FeedbackReport::default();
    for seq in seqs {
        for pair in seq.steps.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            if !prev.failed() {
                continue;
            }
            report.adaptation.den += 1;
            report.identical_failures.den += 1;
            let changed = !next.same_action(prev);
            if changed {
                report.adaptation.num += 1;
                if next.tool == prev.tool {
                    report.tuning.den += 1;
                    if !next.failed() {
                        report.tuning.num += 1;
                    }
                } else {
                    report.switching.den += 1;
                    if !next.failed() {
                        report.switching.num += 1;
                    }
                }
            } else if next.failed() {
                report.identical_failures.num += 1;
            }
        }
    }
    report
}

/// Per-episode feedback reports, for callers preferring macro-averaging
/// over the pooled default.
pub fn feedback_metrics_per_episode(seqs: &[ActionSeq]) -> Vec<FeedbackReport> {
    seqs.iter()
        .map(|s| feedback_metrics(std::slice::from_ref(s)))
        .collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum AnalyzeError {
    #[error("bins must be ordered, disjoint intervals (offender at index {0})")]
    InvalidBins(usize),
}

/// Inclusive step-index interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepBin {
    pub lo: usize,
    pub hi: usize,
}

impl std::fmt::Display for StepBin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

/// The default reporting intervals.
pub fn default_bins() -> Vec<StepBin> {
    [(2, 3), (4, 5), (6, 7), (8, 9), (10, 12)]
        .into_iter()
        .map(|(lo, hi)| StepBin { lo, hi })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinRate {
    pub bin: StepBin,
    /// Recovery rate inside the bin; `None` when no fail event fell in it.
    pub rate: Option<f64>,
    /// Number of fail-with-successor events in the bin.
    pub n: usize,
}

/// Recovery rate per step interval: among failures at step t (with a
/// successor) falling in the bin, the fraction whose immediate successor
/// succeeded.
pub fn recovery_curve(seqs: &[ActionSeq], bins: &[StepBin]) -> Result<Vec<BinRate>, AnalyzeError> {
    for (i, b) in bins.iter().enumerate() {
        if b.lo > b.hi {
            return Err(AnalyzeError::InvalidBins(i));
        }
        if i > 0 && b.lo <= bins[i - 1].hi {
            return Err(AnalyzeError::InvalidBins(i));
        }
    }
    let mut counts = vec![Ratio::default(); bins.len()];
    for seq in seqs {
        for pair in seq.steps.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            if !prev.failed() {
                continue;
            }
            if let Some(i) = bins.iter().position(|b| prev.t >= b.lo && prev.t <= b.hi) {
                counts[i].den += 1;
                if !next.failed() {
                    counts[i].num += 1;
                }
            }
        }
    }
    Ok(bins
        .iter()
        .zip(counts)
        .map(|(bin, c)| BinRate {
            bin: *bin,
            rate: c.rate(),
            n: c.den,
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentRow {
    pub agent: String,
    pub episodes: usize,
    pub mean_calls: f64,
    /// Success rate over this agent's episodes, when eval results are
    /// supplied.
    pub sr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolCallSummary {
    pub mean_calls: f64,
    pub rows: Vec<AgentRow>,
}

/// Mean tool calls per episode, overall and per agent label, joined with SR
/// when eval results are available. Zero-call episodes count with zero.
pub fn tool_call_summary(logs: &[EpisodeLog], results: Option<&[EvalResult]>) -> ToolCallSummary {
    let total: usize = logs.iter().map(|l| l.actions.len()).sum();
    let mean_calls = if logs.is_empty() {
        0.0
    } else {
        total as f64 / logs.len() as f64
    };
    let mut by_agent: std::collections::BTreeMap<String, Vec<&EpisodeLog>> = Default::default();
    for log in logs {
        by_agent.entry(log.agent.clone()).or_default().push(log);
    }
    let rows = by_agent
        .into_iter()
        .map(|(agent, group)| {
            let calls: usize = group.iter().map(|l| l.actions.len()).sum();
            let sr = results.and_then(|rs| {
                let task_ids: std::collections::BTreeSet<&str> =
                    group.iter().map(|l| l.task_id.as_str()).collect();
                let matched: Vec<&EvalResult> = rs
                    .iter()
                    .filter(|r| task_ids.contains(r.task_id.as_str()))
                    .collect();
                if matched.is_empty() {
                    None
                } else {
                    Some(
                        matched.iter().map(|r| r.s_i()).sum::<f64>() / matched.len() as f64,
                    )
                }
            });
            AgentRow {
                agent,
                episodes: group.len(),
                mean_calls: calls as f64 / group.len() as f64,
                sr,
            }
        })
        .collect();
    ToolCallSummary { mean_calls, rows }
}
