//! The closed-loop agent interface: episodes run a message loop between a
//! pluggable agent (remote chat-completions model or deterministic scripted
//! policy) and the environment, under the interaction limits.
//!
//! Every attempted tool call consumes one round and is recorded with its
//! outcome, whether it parsed, dispatched or failed; text-only turns carry
//! the final answer and end the episode.

pub mod wire;

pub use wire::{chat_request, EndpointConfig, ModelMessage, RemoteAgent, WireError};

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::executor::{step, EnvState, ExecuteError, Trace};
use crate::task::TaskRecord;
use crate::toolkit::{export_function_schemas, FunctionSchema, ToolId, ToolRegistry};
use crate::value::{Value, ValueMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    WithTools,
    WithoutTools,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentLimits {
    pub max_tool_rounds: usize,
    pub request_timeout_s: f64,
    pub temperature: f64,
}

impl Default for AgentLimits {
    fn default() -> Self {
        AgentLimits {
            max_tool_rounds: 50,
            request_timeout_s: 300.0,
            temperature: 0.7,
        }
    }
}

/// System prompts shipped as opaque text assets; loadable from files so
/// deployments can swap them without code changes.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub with_tools: String,
    pub without_tools: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            with_tools: include_str!("../../assets/prompts/react_system.txt").to_string(),
            without_tools: include_str!("../../assets/prompts/without_tools_system.txt")
                .to_string(),
        }
    }
}

impl PromptSet {
    pub fn from_files(
        with_tools: &std::path::Path,
        without_tools: &std::path::Path,
    ) -> std::io::Result<Self> {
        Ok(PromptSet {
            with_tools: std::fs::read_to_string(with_tools)?,
            without_tools: std::fs::read_to_string(without_tools)?,
        })
    }
}

/// A tool call as it appears on the wire: a name and a raw JSON argument
/// string, still unvalidated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawToolCall {
    pub name: String,
    pub arguments: String,
}

/// One agent turn: free text and/or tool calls.
#[derive(Debug, Clone, Default)]
pub struct AgentTurn {
    pub content: Option<String>,
    pub tool_calls: Vec<RawToolCall>,
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed model response: {0}")]
    Malformed(String),
    #[error("scripted policy exhausted without a final answer")]
    PolicyExhausted,
}

/// Context handed to the agent each turn.
pub struct TurnCtx<'a> {
    pub messages: &'a [serde_json::Value],
    pub schemas: Option<&'a [FunctionSchema]>,
    pub limits: &'a AgentLimits,
}

pub trait Agent {
    fn next_turn(&mut self, ctx: &TurnCtx) -> Result<AgentTurn, AgentError>;

    fn label(&self) -> String {
        "agent".to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionOutcome {
    Success,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub index: usize,
    pub tool: ToolId,
    pub args: ValueMap,
    pub outcome: ActionOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    FinalAnswer,
    RoundLimit,
    Timeout,
    ProtocolError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogTurn {
    pub role: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<RawToolCall>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub task_id: String,
    pub agent: String,
    pub mode: Mode,
    pub seed: u64,
    pub turns: Vec<LogTurn>,
    pub actions: Vec<ActionRecord>,
    pub termination: Termination,
    pub final_answer: Option<Value>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("tool arguments are not valid JSON: {0}")]
    MalformedJson(String),
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("arguments violate the tool schema: {0}")]
    SchemaViolation(String),
}

/// Validate a raw tool call against the exported schemas and produce a
/// dispatchable action. Never panics on agent-controlled input.
pub fn parse_tool_call(
    raw: &RawToolCall,
    schemas: &[FunctionSchema],
) -> Result<(ToolId, ValueMap), ParseError> {
    let schema = schemas
        .iter()
        .find(|s| s.function.name == raw.name)
        .ok_or_else(|| ParseError::UnknownTool(raw.name.clone()))?;
    let parsed: serde_json::Value = serde_json::from_str(&raw.arguments)
        .map_err(|e| ParseError::MalformedJson(e.to_string()))?;
    let args: ValueMap = serde_json::from_value(parsed.clone())
        .map_err(|_| ParseError::MalformedJson("arguments must be a JSON object".to_string()))?;
    let params = &schema.function.parameters;
    let empty = serde_json::Map::new();
    let properties = params["properties"].as_object().unwrap_or(&empty);
    for required in params["required"].as_array().into_iter().flatten() {
        if let Some(name) = required.as_str() {
            if !args.contains_key(name) {
                return Err(ParseError::SchemaViolation(format!(
                    "missing required {name}"
                )));
            }
        }
    }
    for (name, value) in &args {
        let Some(decl) = properties.get(name) else {
            return Err(ParseError::SchemaViolation(format!(
                "unexpected argument {name}"
            )));
        };
        let ok = match decl["type"].as_str() {
            Some("number") => value.is_numeric(),
            Some("integer") => matches!(value, Value::Int(_)),
            Some("boolean") => matches!(value, Value::Bool(_)),
            Some("string") => matches!(value, Value::Text(_)),
            Some("array") => matches!(value, Value::List(_)),
            Some("object") => matches!(value, Value::Map(_)),
            _ => true,
        };
        if !ok {
            return Err(ParseError::SchemaViolation(format!(
                "argument {name} has the wrong type"
            )));
        }
    }
    Ok((ToolId::new(raw.name.clone()), args))
}

fn error_observation(kind: &str, message: &str) -> String {
    json!({
        "status": "error",
        "error": { "kind": kind, "message": message }
    })
    .to_string()
}

fn parse_final_answer(content: &str) -> Value {
    let trimmed = content.trim();
    serde_json::from_str::<Value>(trimmed).unwrap_or_else(|_| Value::Text(trimmed.to_string()))
}

/// Run one closed-loop episode. All failures terminate the episode as data;
/// nothing is raised.
pub fn run_episode(
    task: &TaskRecord,
    agent: &mut dyn Agent,
    env: &mut EnvState,
    registry: &ToolRegistry,
    limits: &AgentLimits,
    mode: Mode,
) -> EpisodeLog {
    run_episode_with_prompts(task, agent, env, registry, limits, mode, &PromptSet::default())
}

pub fn run_episode_with_prompts(
    task: &TaskRecord,
    agent: &mut dyn Agent,
    env: &mut EnvState,
    registry: &ToolRegistry,
    limits: &AgentLimits,
    mode: Mode,
    prompts: &PromptSet,
) -> EpisodeLog {
    let schemas = match mode {
        Mode::WithTools => export_function_schemas(registry, &task.tools).ok(),
        Mode::WithoutTools => None,
    };
    let system = match mode {
        Mode::WithTools => &prompts.with_tools,
        Mode::WithoutTools => &prompts.without_tools,
    };
    let mut messages = vec![
        json!({ "role": "system", "content": system }),
        json!({ "role": "user", "content": task.question }),
    ];
    let mut log = EpisodeLog {
        task_id: task.task_id.clone(),
        agent: agent.label(),
        mode,
        seed: env.seed(),
        turns: vec![
            LogTurn {
                role: "system".into(),
                content: Some(system.clone()),
                tool_calls: Vec::new(),
            },
            LogTurn {
                role: "user".into(),
                content: Some(task.question.clone()),
                tool_calls: Vec::new(),
            },
        ],
        actions: Vec::new(),
        termination: Termination::ProtocolError,
        final_answer: None,
    };
    let mut call_counter = 0usize;
    loop {
        let ctx = TurnCtx {
            messages: &messages,
            schemas: schemas.as_deref(),
            limits,
        };
        let turn = match agent.next_turn(&ctx) {
            Ok(t) => t,
            Err(AgentError::Timeout) => {
                log.termination = Termination::Timeout;
                break;
            }
            Err(_) => {
                log.termination = Termination::ProtocolError;
                break;
            }
        };
        log.turns.push(LogTurn {
            role: "assistant".into(),
            content: turn.content.clone(),
            tool_calls: turn.tool_calls.clone(),
        });
        let mut assistant_msg = json!({ "role": "assistant", "content": turn.content });
        if let Some(call) = turn.tool_calls.first() {
            if turn.tool_calls.len() > 1 {
                log::warn!(
                    "agent issued {} parallel tool calls; honoring the first only",
                    turn.tool_calls.len()
                );
            }
            call_counter += 1;
            let call_id = format!("call_{call_counter}");
            assistant_msg["tool_calls"] = json!([{
                "id": call_id,
                "type": "function",
                "function": { "name": call.name, "arguments": call.arguments }
            }]);
            messages.push(assistant_msg);

            if mode == Mode::WithoutTools {
                log.actions.push(ActionRecord {
                    index: log.actions.len() + 1,
                    tool: ToolId::new(call.name.clone()),
                    args: ValueMap::new(),
                    outcome: ActionOutcome::Fail,
                });
                log.termination = Termination::ProtocolError;
                break;
            }
            if log.actions.len() >= limits.max_tool_rounds {
                log.termination = Termination::RoundLimit;
                break;
            }
            let observation = match parse_tool_call(call, schemas.as_deref().unwrap_or(&[])) {
                Err(e) => {
                    log.actions.push(ActionRecord {
                        index: log.actions.len() + 1,
                        tool: ToolId::new(call.name.clone()),
                        args: serde_json::from_str(&call.arguments).unwrap_or_default(),
                        outcome: ActionOutcome::Fail,
                    });
                    let kind = match e {
                        ParseError::MalformedJson(_) => "MalformedArguments",
                        ParseError::UnknownTool(_) => "UnknownTool",
                        ParseError::SchemaViolation(_) => "SchemaViolation",
                    };
                    error_observation(kind, &e.to_string())
                }
                Ok((tool, args)) => match step(env, &tool, &args, registry) {
                    Ok(response) => {
                        log.actions.push(ActionRecord {
                            index: log.actions.len() + 1,
                            tool: tool.clone(),
                            args: args.clone(),
                            outcome: if response.is_success() {
                                ActionOutcome::Success
                            } else {
                                ActionOutcome::Fail
                            },
                        });
                        response.to_canonical_json()
                    }
                    Err(ExecuteError::UnregisteredTool(t)) => {
                        log.actions.push(ActionRecord {
                            index: log.actions.len() + 1,
                            tool: t.clone(),
                            args,
                            outcome: ActionOutcome::Fail,
                        });
                        error_observation(
                            "UnregisteredTool",
                            &format!("tool `{t}` is not registered for this episode"),
                        )
                    }
                    Err(e) => {
                        log.actions.push(ActionRecord {
                            index: log.actions.len() + 1,
                            tool: tool.clone(),
                            args,
                            outcome: ActionOutcome::Fail,
                        });
                        error_observation("ExecutionError", &e.to_string())
                    }
                },
            };
            log.turns.push(LogTurn {
                role: "tool".into(),
                content: Some(observation.clone()),
                tool_calls: Vec::new(),
            });
            messages.push(json!({
                "role": "tool",
                "tool_call_id": format!("call_{call_counter}"),
                "content": observation,
            }));
            continue;
        }
        messages.push(assistant_msg);
        // Text-only turn: the final answer.
        log.final_answer = turn.content.as_deref().map(parse_final_answer);
        log.termination = Termination::FinalAnswer;
        break;
    }
    log
}

/// Deterministic scripted policies standing in for a remote model.
pub enum ScriptedPolicy {
    /// Replay the steps of a golden trace, then answer with its final value.
    ReplayGolden {
        steps: Vec<(ToolId, ValueMap)>,
        answer: Value,
    },
    /// Issue the same call forever; never answers.
    RepeatCall { tool: ToolId, args: ValueMap },
    /// Issue `k` calls, then answer.
    AnswerAfterK {
        k: usize,
        tool: ToolId,
        args: ValueMap,
        answer: Value,
    },
    /// Play out a fixed turn sequence; exhausting it is a policy error.
    Sequence { turns: Vec<AgentTurn> },
}

pub struct ScriptedAgent {
    policy: ScriptedPolicy,
    cursor: usize,
}

impl ScriptedAgent {
    pub fn new(policy: ScriptedPolicy) -> Self {
        ScriptedAgent { policy, cursor: 0 }
    }

    /// Replay a golden trace's calls and answer its primary final output.
    pub fn replay_golden(trace: &Trace, registry: &ToolRegistry) -> Self {
        let steps = trace
            .steps
            .iter()
            .map(|s| (s.tool.clone(), s.inputs.clone()))
            .collect();
        let primary = registry
            .get(&trace.goal)
            .ok()
            .and_then(|spec| spec.outputs.first().map(|p| p.name.clone()))
            .unwrap_or_else(|| "result".to_string());
        let answer = trace
            .final_outputs
            .get(&primary)
            .cloned()
            .unwrap_or(Value::Text(String::new()));
        ScriptedAgent::new(ScriptedPolicy::ReplayGolden { steps, answer })
    }

    pub fn repeat_call(tool: ToolId, args: ValueMap) -> Self {
        ScriptedAgent::new(ScriptedPolicy::RepeatCall { tool, args })
    }

    pub fn answer_after_k(k: usize, tool: ToolId, args: ValueMap, answer: Value) -> Self {
        ScriptedAgent::new(ScriptedPolicy::AnswerAfterK {
            k,
            tool,
            args,
            answer,
        })
    }

    fn call_turn(tool: &ToolId, args: &ValueMap) -> AgentTurn {
        AgentTurn {
            content: None,
            tool_calls: vec![RawToolCall {
                name: tool.to_string(),
                arguments: serde_json::to_string(args).expect("args serialize"),
            }],
        }
    }

    fn answer_turn(answer: &Value) -> AgentTurn {
        AgentTurn {
            content: Some(answer.to_canonical_json()),
            tool_calls: Vec::new(),
        }
    }
}

impl Agent for ScriptedAgent {
    fn next_turn(&mut self, _ctx: &TurnCtx) -> Result<AgentTurn, AgentError> {
        let turn = match &self.policy {
            ScriptedPolicy::ReplayGolden { steps, answer } => {
                if self.cursor < steps.len() {
                    let (tool, args) = &steps[self.cursor];
                    Self::call_turn(tool, args)
                } else {
                    Self::answer_turn(answer)
                }
            }
            ScriptedPolicy::RepeatCall { tool, args } => Self::call_turn(tool, args),
            ScriptedPolicy::AnswerAfterK {
                k,
                tool,
                args,
                answer,
            } => {
                if self.cursor < *k {
                    Self::call_turn(tool, args)
                } else {
                    Self::answer_turn(answer)
                }
            }
            ScriptedPolicy::Sequence { turns } => {
                if self.cursor < turns.len() {
                    turns[self.cursor].clone()
                } else {
                    return Err(AgentError::PolicyExhausted);
                }
            }
        };
        self.cursor += 1;
        Ok(turn)
    }

    fn label(&self) -> String {
        let name = match &self.policy {
            ScriptedPolicy::ReplayGolden { .. } => "replay-golden",
            ScriptedPolicy::RepeatCall { .. } => "repeat-call",
            ScriptedPolicy::AnswerAfterK { .. } => "answer-after-k",
            ScriptedPolicy::Sequence { .. } => "sequence",
        };
        format!("scripted:{name}")
    }
}

/// Episode log files: one turn per line, then a summary trailer.
#[derive(Serialize, Deserialize)]
struct TurnLine {
    record: String,
    #[serde(flatten)]
    turn: LogTurn,
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    record: String,
    task_id: String,
    agent: String,
    mode: Mode,
    seed: u64,
    actions: Vec<ActionRecord>,
    termination: Termination,
    final_answer: Option<Value>,
}

pub fn write_episode_jsonl(log: &EpisodeLog, w: &mut impl Write) -> std::io::Result<()> {
    for t in &log.turns {
        let line = TurnLine {
            record: "turn".into(),
            turn: t.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    let trailer = SummaryLine {
        record: "summary".into(),
        task_id: log.task_id.clone(),
        agent: log.agent.clone(),
        mode: log.mode,
        seed: log.seed,
        actions: log.actions.clone(),
        termination: log.termination,
        final_answer: log.final_answer.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&trailer)?)?;
    Ok(())
}

pub fn read_episode_jsonl(r: impl BufRead) -> Result<EpisodeLog, String> {
    let mut turns = Vec::new();
    let mut summary: Option<SummaryLine> = None;
    for line in r.lines() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        let tagged: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| format!("bad log line: {e}"))?;
        match tagged["record"].as_str() {
            Some("turn") => {
                let t: TurnLine =
                    serde_json::from_str(&line).map_err(|e| format!("bad turn: {e}"))?;
                turns.push(t.turn);
            }
            Some("summary") => {
                summary =
                    Some(serde_json::from_str(&line).map_err(|e| format!("bad summary: {e}"))?);
            }
            other => return Err(format!("unknown record kind {other:?}")),
        }
    }
    let s = summary.ok_or_else(|| "missing summary trailer".to_string())?;
    Ok(EpisodeLog {
        task_id: s.task_id,
        agent: s.agent,
        mode: s.mode,
        seed: s.seed,
        turns,
        actions: s.actions,
        termination: s.termination,
        final_answer: s.final_answer,
    })
}

/// The provider-format request messages for a fresh episode, exposed for
/// the remote question generator which shares the wire contract.
pub fn seed_messages(system: &str, user: &str) -> Vec<serde_json::Value> {
    vec![
        json!({ "role": "system", "content": system }),
        json!({ "role": "user", "content": user }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depgraph::build_graph;
    use crate::executor::{execute, new_episode};
    use crate::sampler::{sample_program, SamplerConfig};
    use crate::toolkit::{builtin_corpus, Corpus};
    use std::collections::{BTreeMap, BTreeSet};

    fn args(pairs: &[(&str, Value)]) -> ValueMap {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    fn chem_task(corpus: &Corpus, seed: u64) -> (TaskRecord, Trace) {
        let graph = build_graph(&corpus.registry, &corpus.lattice, "chem").unwrap();
        let cfg = SamplerConfig::new(seed)
            .with_priors(corpus.priors.clone())
            .with_max_depth(4);
        let p = sample_program(
            &graph,
            &corpus.registry,
            &ToolId::new("classify_turbidity"),
            &cfg,
        )
        .unwrap();
        let trace = execute(&p, &corpus.registry, seed).unwrap();
        let spec = corpus.registry.get(&trace.goal).unwrap();
        let expected = trace.final_outputs[&spec.outputs[0].name].clone();
        let task = TaskRecord::single(
            format!("task-{seed}"),
            "chem",
            "What is the clarity of the final suspension?",
            expected,
            trace.steps.len(),
            trace.steps.iter().map(|s| s.tool.clone()).collect(),
            "trace.jsonl",
            seed,
        );
        (task, trace)
    }

    fn fresh_env(task: &TaskRecord) -> EnvState {
        new_episode(
            format!("ep-{}", task.task_id),
            BTreeMap::new(),
            task.tools.iter().cloned().collect::<BTreeSet<_>>(),
            task.seed,
        )
    }

    #[test]
    fn replay_golden_reaches_final_answer_with_all_successes() {
        let corpus = builtin_corpus();
        let (task, trace) = chem_task(&corpus, 41);
        let mut agent = ScriptedAgent::replay_golden(&trace, &corpus.registry);
        let mut env = fresh_env(&task);
        let log = run_episode(
            &task,
            &mut agent,
            &mut env,
            &corpus.registry,
            &AgentLimits::default(),
            Mode::WithTools,
        );
        assert_eq!(log.termination, Termination::FinalAnswer);
        assert_eq!(log.actions.len(), trace.steps.len());
        assert!(log
            .actions
            .iter()
            .all(|a| a.outcome == ActionOutcome::Success));
        assert_eq!(log.final_answer, Some(task.sub_questions[0].expected.clone()));
    }

    #[test]
    fn never_answering_agent_hits_the_round_cap_exactly() {
        let corpus = builtin_corpus();
        let (task, _) = chem_task(&corpus, 42);
        let mut agent = ScriptedAgent::repeat_call(
            ToolId::new("classify_turbidity"),
            args(&[("turbidity", Value::Number(47.3))]),
        );
        let mut env = fresh_env(&task);
        let limits = AgentLimits::default();
        let log = run_episode(
            &task,
            &mut agent,
            &mut env,
            &corpus.registry,
            &limits,
            Mode::WithTools,
        );
        assert_eq!(log.termination, Termination::RoundLimit);
        assert_eq!(log.actions.len(), limits.max_tool_rounds);
        assert_eq!(log.actions.len(), 50);
    }

    #[test]
    fn unregistered_tool_calls_fail_but_the_loop_continues() {
        let corpus = builtin_corpus();
        let (task, _) = chem_task(&corpus, 43);
        let mut agent = ScriptedAgent::answer_after_k(
            2,
            ToolId::new("kinetic_energy"), // not registered for a chem task
            args(&[("mass", Value::Number(1.0)), ("velocity", Value::Number(2.0))]),
            Value::Text("done".into()),
        );
        let mut env = fresh_env(&task);
        let log = run_episode(
            &task,
            &mut agent,
            &mut env,
            &corpus.registry,
            &AgentLimits::default(),
            Mode::WithTools,
        );
        assert_eq!(log.termination, Termination::FinalAnswer);
        assert_eq!(log.actions.len(), 2);
        assert!(log.actions.iter().all(|a| a.outcome == ActionOutcome::Fail));
    }

    #[test]
    fn without_tools_episodes_reject_tool_calls() {
        let corpus = builtin_corpus();
        let (task, trace) = chem_task(&corpus, 44);
        let mut agent = ScriptedAgent::replay_golden(&trace, &corpus.registry);
        let mut env = fresh_env(&task);
        let log = run_episode(
            &task,
            &mut agent,
            &mut env,
            &corpus.registry,
            &AgentLimits::default(),
            Mode::WithoutTools,
        );
        assert_eq!(log.termination, Termination::ProtocolError);
        assert!(log
            .actions
            .iter()
            .all(|a| a.outcome == ActionOutcome::Fail));
        assert!(env.history().is_empty());
    }

    #[test]
    fn without_tools_text_answer_terminates_normally() {
        let corpus = builtin_corpus();
        let (task, _) = chem_task(&corpus, 45);
        let mut agent = ScriptedAgent::new(ScriptedPolicy::Sequence {
            turns: vec![AgentTurn {
                content: Some("\"opaque\"".to_string()),
                tool_calls: Vec::new(),
            }],
        });
        let mut env = fresh_env(&task);
        let log = run_episode(
            &task,
            &mut agent,
            &mut env,
            &corpus.registry,
            &AgentLimits::default(),
            Mode::WithoutTools,
        );
        assert_eq!(log.termination, Termination::FinalAnswer);
        assert_eq!(log.final_answer, Some(Value::Text("opaque".into())));
        assert!(log.actions.is_empty());
    }

    #[test]
    fn exhausted_sequence_is_a_protocol_error() {
        let corpus = builtin_corpus();
        let (task, _) = chem_task(&corpus, 46);
        let mut agent = ScriptedAgent::new(ScriptedPolicy::Sequence { turns: vec![] });
        let mut env = fresh_env(&task);
        let log = run_episode(
            &task,
            &mut agent,
            &mut env,
            &corpus.registry,
            &AgentLimits::default(),
            Mode::WithTools,
        );
        assert_eq!(log.termination, Termination::ProtocolError);
    }

    #[test]
    fn parse_tool_call_validates_against_schemas() {
        let corpus = builtin_corpus();
        let schemas =
            export_function_schemas(&corpus.registry, &[ToolId::new("quotient")]).unwrap();
        let good = RawToolCall {
            name: "quotient".into(),
            arguments: r#"{"numerator": 6, "denominator": 3}"#.into(),
        };
        let (tool, parsed) = parse_tool_call(&good, &schemas).unwrap();
        assert_eq!(tool, ToolId::new("quotient"));
        assert_eq!(parsed.len(), 2);

        // Empty argument object: the diagnostic names the missing field.
        let empty = RawToolCall {
            name: "quotient".into(),
            arguments: "{}".into(),
        };
        let err = parse_tool_call(&empty, &schemas).unwrap_err();
        assert_eq!(
            err,
            ParseError::SchemaViolation("missing required numerator".into())
        );

        let unknown = RawToolCall {
            name: "no_such_tool".into(),
            arguments: "{}".into(),
        };
        assert_eq!(
            parse_tool_call(&unknown, &schemas).unwrap_err(),
            ParseError::UnknownTool("no_such_tool".into())
        );

        let malformed = RawToolCall {
            name: "quotient".into(),
            arguments: "{not json".into(),
        };
        assert!(matches!(
            parse_tool_call(&malformed, &schemas).unwrap_err(),
            ParseError::MalformedJson(_)
        ));

        let extra = RawToolCall {
            name: "quotient".into(),
            arguments: r#"{"numerator": 1, "denominator": 2, "bogus": 3}"#.into(),
        };
        assert!(matches!(
            parse_tool_call(&extra, &schemas).unwrap_err(),
            ParseError::SchemaViolation(_)
        ));
    }

    #[test]
    fn episode_log_round_trips_and_replays_identically() {
        let corpus = builtin_corpus();
        let (task, trace) = chem_task(&corpus, 47);
        let mut agent = ScriptedAgent::replay_golden(&trace, &corpus.registry);
        let mut env = fresh_env(&task);
        let log = run_episode(
            &task,
            &mut agent,
            &mut env,
            &corpus.registry,
            &AgentLimits::default(),
            Mode::WithTools,
        );
        let mut buf = Vec::new();
        write_episode_jsonl(&log, &mut buf).unwrap();
        let back = read_episode_jsonl(&buf[..]).unwrap();
        assert_eq!(back.actions, log.actions);
        assert_eq!(back.turns, log.turns);
        assert_eq!(back.termination, log.termination);

        // Replaying the recorded actions in a fresh env reproduces the
        // observation sequence.
        let mut env2 = fresh_env(&task);
        let observed: Vec<String> = log
            .actions
            .iter()
            .map(|a| {
                step(&mut env2, &a.tool, &a.args, &corpus.registry)
                    .unwrap()
                    .to_canonical_json()
            })
            .collect();
        let logged: Vec<String> = log
            .turns
            .iter()
            .filter(|t| t.role == "tool")
            .filter_map(|t| t.content.clone())
            .collect();
        assert_eq!(observed, logged);
    }
}
