//! Task records: the unit of work handed to agents and scored by the
//! evaluator. Synthesis emits one record per generated question.

use serde::{Deserialize, Serialize};

use crate::toolkit::ToolId;
use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQuestion {
    pub id: String,
    pub expected: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub domain: String,
    /// The problem text presented to the agent.
    pub question: String,
    pub sub_questions: Vec<SubQuestion>,
    /// Reference path length: tool-call count of the golden trace.
    pub reference_path_length: usize,
    /// Tools registered for this task's episodes.
    pub tools: Vec<ToolId>,
    /// File name of the golden trace within the run's trace directory.
    pub trace_ref: String,
    pub seed: u64,
}

impl TaskRecord {
    /// Single-answer task: one sub-question keyed "answer".
    pub fn single(
        task_id: impl Into<String>,
        domain: impl Into<String>,
        question: impl Into<String>,
        expected: Value,
        reference_path_length: usize,
        tools: Vec<ToolId>,
        trace_ref: impl Into<String>,
        seed: u64,
    ) -> Self {
        TaskRecord {
            task_id: task_id.into(),
            domain: domain.into(),
            question: question.into(),
            sub_questions: vec![SubQuestion {
                id: "answer".to_string(),
                expected,
            }],
            reference_path_length,
            tools,
            trace_ref: trace_ref.into(),
            seed,
        }
    }
}
