//! End-to-end orchestration: sample programs per goal, execute them into
//! golden traces, route a configured fraction through error-recovery
//! augmentation, convert traces to concealed questions, and emit the
//! dataset plus task records. A config plus seed fully determines every
//! output byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{
    read_episode_jsonl, run_episode, Agent, AgentLimits, EpisodeLog, Mode, ScriptedAgent,
};
use crate::analyzer::{
    default_bins, feedback_metrics, recovery_curve, tool_call_summary, ActionSeq, BinRate,
    FeedbackReport, StepBin, ToolCallSummary,
};
use crate::depgraph::build_graph;
use crate::evaluator::{build_report, evaluate_episode, EvalError, EvalResult, Report};
use crate::executor::{
    augment_collect, execute_collect, read_trace_jsonl, write_augmented_jsonl, write_trace_jsonl,
    CorruptionRule, ExecuteError, FaultSpec, StepRecord, Trace, TraceHeader, TraceStatus,
};
use crate::questiongen::{
    generate_question, AbstractionTable, QuestionError, QuestionGenerator, QuestionSpec, Rubric,
    TemplateGenerator,
};
use crate::sampler::{sample_program, SampleError, SamplerConfig};
use crate::task::TaskRecord;
use crate::toolkit::{builtin_corpus, load_corpus, Corpus, Manifest, ManifestError, Stage, ToolId};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GoalRule {
    /// All analysis- and visualization-stage tools of each domain.
    #[default]
    LateStage,
    /// Explicit per-domain goal lists.
    Explicit(BTreeMap<String, Vec<ToolId>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorChoice {
    #[default]
    Template,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Manifest file; the built-in corpus when absent.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Domains to synthesize over; all registered domains when empty.
    #[serde(default)]
    pub domains: Vec<String>,
    #[serde(default)]
    pub goal_rule: GoalRule,
    pub programs_per_goal: usize,
    #[serde(default = "default_max_depth")]
    pub max_depth: u32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Fraction of programs routed through error-recovery augmentation.
    #[serde(default)]
    pub fault_fraction: f64,
    #[serde(default)]
    pub generator: GeneratorChoice,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Worker threads for program fan-out; serial when 0 or 1.
    #[serde(default)]
    pub parallel: usize,
}

fn default_max_depth() -> u32 {
    6
}

fn default_epsilon() -> f64 {
    0.2
}

impl PipelineConfig {
    pub fn from_json(json: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig =
            serde_json::from_str(json).map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&cfg.fault_fraction) {
            return Err(PipelineError::Config(format!(
                "fault_fraction {} outside [0, 1]",
                cfg.fault_fraction
            )));
        }
        if !(0.0..=1.0).contains(&cfg.epsilon) {
            return Err(PipelineError::Config(format!(
                "epsilon {} outside [0, 1]",
                cfg.epsilon
            )));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("sampling failed for goal `{goal}`: {source}")]
    Sample {
        goal: ToolId,
        #[source]
        source: SampleError,
    },
    #[error(transparent)]
    Execute(#[from] ExecuteError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("episode log references unknown task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("question generation failed for trace `{trace}`: {source}")]
    Question {
        trace: String,
        #[source]
        source: QuestionError,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RejectCounts {
    pub fault_not_triggered: usize,
    pub concealment_violations: usize,
    pub generator_unavailable: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub n_programs: usize,
    pub n_golden: usize,
    pub n_augmented: usize,
    pub n_questions: usize,
    pub rejects: RejectCounts,
    pub output_dir: PathBuf,
}

struct Job {
    domain: String,
    goal: ToolId,
    index: usize,
    seed: u64,
    wants_fault: bool,
}

struct JobOutput {
    task_id: String,
    domain: String,
    program_json: String,
    program_id: String,
    golden: Trace,
    artifacts: Vec<crate::toolkit::ArtifactStore>,
    augmented: Option<crate::executor::AugmentedTrace>,
    fault_rejected: bool,
    question: Option<QuestionSpec>,
    question_reject: Option<QuestionError>,
}

fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    u64::from_le_bytes(hasher.finalize()[..8].try_into().unwrap())
}

/// Uniform draw in [0, 1) from a derived seed; used for fault routing.
fn hash01(base: u64, parts: &[&str]) -> f64 {
    derive_seed(base, parts) as f64 / (u64::MAX as f64 + 1.0)
}

fn load_configured_corpus(config: &PipelineConfig) -> Result<Corpus, PipelineError> {
    match &config.manifest {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let manifest = Manifest::from_json(&text)?;
            Ok(load_corpus(&manifest)?)
        }
        None => Ok(builtin_corpus()),
    }
}

fn goals_for_domain(
    corpus: &Corpus,
    rule: &GoalRule,
    domain: &str,
) -> Result<Vec<ToolId>, PipelineError> {
    match rule {
        GoalRule::LateStage => {
            let mut goals: Vec<ToolId> = corpus
                .registry
                .query(Some(domain), None, None)
                .iter()
                .filter(|t| t.stage >= Stage::Analysis)
                .map(|t| t.id.clone())
                .collect();
            goals.sort();
            Ok(goals)
        }
        GoalRule::Explicit(map) => Ok(map.get(domain).cloned().unwrap_or_default()),
    }
}

/// Pick the first golden step with a required, non-defaulted argument: the
/// drop-argument corruption provably fails there.
fn choose_fault(trace: &Trace, corpus: &Corpus) -> Option<FaultSpec> {
    for step in &trace.steps {
        let spec = corpus.registry.get(&step.tool).ok()?;
        let eligible = spec
            .inputs
            .iter()
            .any(|p| !spec.defaults.contains_key(&p.name) && step.inputs.contains_key(&p.name));
        if eligible {
            return Some(FaultSpec {
                position: step.index,
                corruption: CorruptionRule::DropRequiredArg { name: None },
            });
        }
    }
    None
}

fn run_job(
    corpus: &Corpus,
    graph: &crate::depgraph::DependencyGraph,
    config: &PipelineConfig,
    generator: &dyn QuestionGenerator,
    table: &AbstractionTable,
    job: &Job,
) -> Result<JobOutput, PipelineError> {
    let sampler_cfg = SamplerConfig::new(job.seed)
        .with_priors(corpus.priors.clone())
        .with_epsilon(config.epsilon)
        .with_max_depth(config.max_depth);
    let program =
        sample_program(graph, &corpus.registry, &job.goal, &sampler_cfg).map_err(|e| {
            PipelineError::Sample {
                goal: job.goal.clone(),
                source: e,
            }
        })?;
    let (golden, store) = execute_collect(&program, &corpus.registry, job.seed)?;
    if golden.status != TraceStatus::Golden {
        return Err(ExecuteError::NotGolden.into());
    }
    let mut artifacts = vec![store];
    let mut augmented = None;
    let mut fault_rejected = false;
    if job.wants_fault {
        match choose_fault(&golden, corpus) {
            Some(fault) => {
                match augment_collect(
                    &program,
                    std::slice::from_ref(&fault),
                    &corpus.registry,
                    job.seed,
                ) {
                    Ok((aug, aug_store)) => {
                        augmented = Some(aug);
                        artifacts.push(aug_store);
                    }
                    Err(ExecuteError::FaultNotTriggered { .. }) => fault_rejected = true,
                    Err(e) => return Err(e.into()),
                }
            }
            None => fault_rejected = true,
        }
    }
    let rubric = Rubric::default_for(&job.domain);
    let (question, question_reject) =
        match generate_question(&golden, &rubric, generator, table, &corpus.registry) {
            Ok(q) => (Some(q), None),
            Err(e) => (None, Some(e)),
        };
    Ok(JobOutput {
        task_id: format!("task-{}-{}-{:04}", job.domain, job.goal, job.index),
        domain: job.domain.clone(),
        program_json: program.to_json_pretty(),
        program_id: program.id(),
        golden,
        augmented,
        fault_rejected,
        question,
        question_reject,
    })
}

/// Run the full synthesis pipeline described by the config.
pub fn synthesize(config: &PipelineConfig) -> Result<SynthesisSummary, PipelineError> {
    let corpus = load_configured_corpus(config)?;
    let domains = if config.domains.is_empty() {
        corpus.domains()
    } else {
        config.domains.clone()
    };
    let mut graphs = BTreeMap::new();
    let mut jobs = Vec::new();
    for domain in &domains {
        let graph = build_graph(&corpus.registry, &corpus.lattice, domain)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        graphs.insert(domain.clone(), graph);
        for goal in goals_for_domain(&corpus, &config.goal_rule, domain)? {
            for index in 0..config.programs_per_goal {
                let idx = index.to_string();
                let seed = derive_seed(config.seed, &[domain, goal.as_str(), &idx]);
                let wants_fault =
                    hash01(config.seed, &["fault", domain, goal.as_str(), &idx])
                        < config.fault_fraction;
                jobs.push(Job {
                    domain: domain.clone(),
                    goal: goal.clone(),
                    index,
                    seed,
                    wants_fault,
                });
            }
        }
    }
    let generator: Box<dyn QuestionGenerator + Sync> = match config.generator {
        GeneratorChoice::Template => Box::new(TemplateGenerator),
        GeneratorChoice::Remote => {
            return Err(PipelineError::Config(
                "remote generation runs through the CLI with endpoint variables set".to_string(),
            ))
        }
    };
    let table = AbstractionTable::default_magnitudes();
    let run =
        |job: &Job| run_job(&corpus, &graphs[&job.domain], config, generator.as_ref(), &table, job);
    let outputs: Vec<Result<JobOutput, PipelineError>> = if config.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallel)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };

    let out = &config.output_dir;
    fs::create_dir_all(out.join("traces"))?;
    fs::create_dir_all(out.join("programs"))?;
    let mut dataset = Vec::new();
    let mut tasks = Vec::new();
    let mut summary = SynthesisSummary {
        n_programs: 0,
        n_golden: 0,
        n_augmented: 0,
        n_questions: 0,
        rejects: RejectCounts::default(),
        output_dir: out.clone(),
    };
    for output in outputs {
        let o = output?;
        summary.n_programs += 1;
        summary.n_golden += 1;
        fs::write(
            out.join("programs").join(format!("{}.json", o.program_id)),
            &o.program_json,
        )?;
        let trace_file = format!("traces/{}.jsonl", o.golden.trace_id);
        let mut buf = Vec::new();
        write_trace_jsonl(&o.golden, &mut buf)?;
        fs::write(out.join(&trace_file), &buf)?;
        if let Some(aug) = &o.augmented {
            summary.n_augmented += 1;
            let mut abuf = Vec::new();
            write_augmented_jsonl(aug, &mut abuf)?;
            fs::write(out.join("traces").join(format!("{}.jsonl", aug.trace_id)), &abuf)?;
        }
        if o.fault_rejected {
            summary.rejects.fault_not_triggered += 1;
        }
        match (&o.question, &o.question_reject) {
            (Some(q), _) => {
                summary.n_questions += 1;
                dataset.push(serde_json::to_string(q).expect("question serializes"));
                let spec = corpus
                    .registry
                    .get(&o.golden.goal)
                    .expect("goal registered");
                let expected = o.golden.final_outputs[&spec.outputs[0].name].clone();
                let task = TaskRecord::single(
                    o.task_id.clone(),
                    o.domain.clone(),
                    q.text.clone(),
                    expected,
                    o.golden.steps.len(),
                    o.golden.steps.iter().map(|s| s.tool.clone()).collect(),
                    trace_file.clone(),
                    o.golden.seed,
                );
                tasks.push(serde_json::to_string(&task).expect("task serializes"));
            }
            (None, Some(QuestionError::ConcealmentViolation { .. })) => {
                summary.rejects.concealment_violations += 1;
            }
            (None, Some(QuestionError::GeneratorUnavailable(_))) => {
                summary.rejects.generator_unavailable += 1;
            }
            (None, Some(QuestionError::NotGolden(t))) => {
                return Err(PipelineError::Question {
                    trace: t.clone(),
                    source: QuestionError::NotGolden(t.clone()),
                })
            }
            (None, None) => unreachable!("job produces a question or a reject"),
        }
    }
    fs::write(out.join("dataset.jsonl"), dataset.join("\n") + "\n")?;
    fs::write(out.join("tasks.jsonl"), tasks.join("\n") + "\n")?;
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

/// Read the task records emitted by `synthesize`.
pub fn read_tasks(path: &Path) -> Result<Vec<TaskRecord>, PipelineError> {
    let text = fs::read_to_string(path)?;
    let mut tasks = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        tasks.push(
            serde_json::from_str(line).map_err(|e| PipelineError::Config(e.to_string()))?,
        );
    }
    Ok(tasks)
}

/// Load the golden trace a task references, relative to the run directory.
pub fn load_trace(run_dir: &Path, task: &TaskRecord) -> Result<Trace, PipelineError> {
    let file = fs::File::open(run_dir.join(&task.trace_ref))?;
    let (header, steps) = read_trace_jsonl(BufReader::new(file))?;
    Ok(trace_from_parts(header, steps))
}

fn trace_from_parts(header: TraceHeader, steps: Vec<StepRecord>) -> Trace {
    Trace {
        trace_id: header.trace_id,
        program_id: header.program_id,
        goal: header.goal,
        seed: header.seed,
        episode_id: header.episode_id,
        status: header.status,
        steps,
        final_outputs: header.final_outputs,
        root_inputs: header.root_inputs,
    }
}

/// How run-agent builds its agent per task.
pub enum AgentSpec {
    ReplayGolden,
    NeverAnswer,
    AnswerAfterK(usize),
    Remote(crate::agent::EndpointConfig),
}

impl AgentSpec {
    pub fn parse(s: &str) -> Result<Self, PipelineError> {
        match s {
            "scripted:replay-golden" => Ok(AgentSpec::ReplayGolden),
            "scripted:never-answer" => Ok(AgentSpec::NeverAnswer),
            "remote" => {
                let config = crate::agent::EndpointConfig::from_env()
                    .map_err(|e| PipelineError::Config(e.to_string()))?;
                Ok(AgentSpec::Remote(config))
            }
            other => match other.strip_prefix("scripted:answer-after-") {
                Some(k) => Ok(AgentSpec::AnswerAfterK(k.parse().map_err(|_| {
                    PipelineError::Config(format!("bad answer-after-K spec `{other}`"))
                })?)),
                None => Err(PipelineError::Config(format!("unknown agent spec `{other}`"))),
            },
        }
    }

    fn build(
        &self,
        run_dir: &Path,
        task: &TaskRecord,
        corpus: &Corpus,
    ) -> Result<Box<dyn Agent>, PipelineError> {
        Ok(match self {
            AgentSpec::ReplayGolden => {
                let trace = load_trace(run_dir, task)?;
                Box::new(ScriptedAgent::replay_golden(&trace, &corpus.registry))
            }
            AgentSpec::NeverAnswer => {
                let tool = task
                    .tools
                    .first()
                    .cloned()
                    .unwrap_or_else(|| ToolId::new("unknown"));
                Box::new(ScriptedAgent::repeat_call(tool, Default::default()))
            }
            AgentSpec::AnswerAfterK(k) => {
                let tool = task
                    .tools
                    .first()
                    .cloned()
                    .unwrap_or_else(|| ToolId::new("unknown"));
                Box::new(ScriptedAgent::answer_after_k(
                    *k,
                    tool,
                    Default::default(),
                    crate::value::Value::Text("unknown".to_string()),
                ))
            }
            AgentSpec::Remote(cfg) => Box::new(crate::agent::RemoteAgent::new(cfg.clone())),
        })
    }
}

/// Run an agent over every task, writing one episode log per task.
pub fn run_agent_over_tasks(
    tasks_path: &Path,
    agent_spec: &AgentSpec,
    limits: &AgentLimits,
    mode: Mode,
    logs_dir: &Path,
    parallel: usize,
) -> Result<usize, PipelineError> {
    let run_dir = tasks_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let tasks = read_tasks(tasks_path)?;
    let corpus = builtin_corpus();
    fs::create_dir_all(logs_dir)?;
    let run_one = |task: &TaskRecord| -> Result<(), PipelineError> {
        let mut agent = agent_spec.build(&run_dir, task, &corpus)?;
        let mut env = crate::executor::new_episode(
            format!("ep-{}", task.task_id),
            BTreeMap::new(),
            task.tools.iter().cloned().collect(),
            task.seed,
        );
        let log = run_episode(task, agent.as_mut(), &mut env, &corpus.registry, limits, mode);
        let mut buf = Vec::new();
        crate::agent::write_episode_jsonl(&log, &mut buf)?;
        fs::write(logs_dir.join(format!("{}.jsonl", task.task_id)), buf)?;
        Ok(())
    };
    if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        pool.install(|| tasks.par_iter().map(run_one).collect::<Result<Vec<_>, _>>())?;
    } else {
        for t in &tasks {
            run_one(t)?;
        }
    }
    Ok(tasks.len())
}

/// The joined evaluation report: task scoring plus process-level feedback
/// metrics and recovery curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub report: Report,
    pub feedback: FeedbackSection,
    pub recovery: Vec<BinRate>,
    pub tool_calls: ToolCallSummary,
    pub n_episodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackSection {
    pub counts: FeedbackReport,
    pub adaptation: Option<f64>,
    pub tuning: Option<f64>,
    pub switching: Option<f64>,
    pub loop_escape: Option<f64>,
}

/// Score every episode log in a directory against the task file.
pub fn evaluate_run(
    tasks_path: &Path,
    logs_dir: &Path,
    bins: &[StepBin],
) -> Result<RunReport, PipelineError> {
    let tasks = read_tasks(tasks_path)?;
    let by_id: BTreeMap<&str, &TaskRecord> =
        tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let mut logs: Vec<EpisodeLog> = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(logs_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("jsonl"))
        .collect();
    entries.sort();
    for path in entries {
        let file = fs::File::open(&path)?;
        let log = read_episode_jsonl(BufReader::new(file))
            .map_err(PipelineError::Config)?;
        logs.push(log);
    }
    let mut results: Vec<EvalResult> = Vec::new();
    for log in &logs {
        let task = by_id
            .get(log.task_id.as_str())
            .ok_or_else(|| PipelineError::UnknownTask(log.task_id.clone()))?;
        results.push(evaluate_episode(task, log, crate::evaluator::DEFAULT_TOLERANCE)?);
    }
    let report = build_report(&results)?;
    let seqs: Vec<ActionSeq> = logs.iter().map(ActionSeq::from_log).collect();
    let counts = feedback_metrics(&seqs);
    let feedback = FeedbackSection {
        adaptation: counts.adaptation_rate(),
        tuning: counts.tuning_rate(),
        switching: counts.switching_rate(),
        loop_escape: counts.loop_escape_rate(),
        counts,
    };
    let recovery = recovery_curve(&seqs, bins).map_err(|e| PipelineError::Config(e.to_string()))?;
    let tool_calls = tool_call_summary(&logs, Some(&results));
    Ok(RunReport {
        report,
        feedback,
        recovery,
        tool_calls,
        n_episodes: logs.len(),
    })
}

pub fn default_recovery_bins() -> Vec<StepBin> {
    default_bins()
}
