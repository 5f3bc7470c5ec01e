//! The closed-loop planning controller and its episode trace.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::{
    build_context, next_subgoal, ContextMode, ContextRecord, DecomposerOutput, DecompositionPolicy, PolicyError,
};
use crate::eval::TaskSpec;
use crate::grammar;
use crate::terminate::{check_mappability, evaluate, Candidate, CongruenceJudge, CriterionReport, TerminationVerdict};
use crate::tree::{CursorMove, NodeId, SubgoalTree, TreeError, TreeSnapshot};
use crate::world::{
    apply_action, goal_satisfied, observe, Embodiment, GoalPredicate, Observation, PrimitiveAction, Rule, WorldState,
};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub max_depth: usize,
    pub max_replans_per_node: usize,
    /// Upper bound on decomposer calls per episode.
    pub max_total_steps: usize,
    pub mode: ContextMode,
    pub seed: u64,
    pub embodiment: Embodiment,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            max_depth: 6,
            max_replans_per_node: 3,
            max_total_steps: 200,
            mode: ContextMode::FullStep,
            seed: 0,
            embodiment: Embodiment::single_arm(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    ZeroBudget(&'static str),
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("max_depth", self.max_depth),
            ("max_replans_per_node", self.max_replans_per_node),
            ("max_total_steps", self.max_total_steps),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroBudget(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    BudgetExhausted,
    ReplanAtRoot,
    PolicyGrammarError,
    ActionRejected,
    /// The tree completed but some goal predicate does not hold.
    GoalsUnmet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeOutcome {
    Success,
    Failure(FailureKind),
}

impl EpisodeOutcome {
    pub fn is_success(self) -> bool {
        self == EpisodeOutcome::Success
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecResult {
    Ok,
    Rejected(Rule),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "ev")]
pub enum TraceEvent {
    Decomposed {
        parent: NodeId,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        node: Option<NodeId>,
        output: DecomposerOutput,
        context: ContextRecord,
        retries: u32,
    },
    PolicyFailed {
        node: NodeId,
        error: PolicyError,
        context: ContextRecord,
    },
    Verdict {
        node: NodeId,
        text: String,
        report: CriterionReport,
        verdict: TerminationVerdict,
    },
    Executed {
        #[serde(skip_serializing_if = "Option::is_none", default)]
        node: Option<NodeId>,
        text: String,
        action: Option<PrimitiveAction>,
        result: ExecResult,
    },
    Replanned {
        node: NodeId,
        parent: NodeId,
        reason: Rule,
        replan_count: usize,
    },
    Finished {
        task: String,
        outcome: EpisodeOutcome,
        /// Why the loop stopped early, if it did.
        halted: Option<FailureKind>,
        satisfied: Vec<bool>,
        final_state: WorldState,
        tree: TreeSnapshot,
    },
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    v: u32,
    #[serde(flatten)]
    ev: TraceEvent,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: trace schema version {found}, expected {TRACE_VERSION}")]
    SchemaMismatch { line: usize, found: String },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("trace has no Finished event")]
    Unfinished,
    #[error("line {0}: event after Finished")]
    TrailingEvent(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeTrace {
    pub task_id: String,
    pub events: Vec<TraceEvent>,
    pub executed_actions: Vec<PrimitiveAction>,
    pub final_state: WorldState,
    pub outcome: EpisodeOutcome,
    pub halted: Option<FailureKind>,
    pub satisfied: Vec<bool>,
}

impl EpisodeTrace {
    fn from_events(events: Vec<TraceEvent>) -> Result<Self, TraceError> {
        let Some(TraceEvent::Finished { task, outcome, halted, satisfied, final_state, .. }) = events.last().cloned()
        else {
            return Err(TraceError::Unfinished);
        };
        let executed_actions = events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Executed { action: Some(a), result: ExecResult::Ok, .. } => Some(a.clone()),
                _ => None,
            })
            .collect();
        Ok(EpisodeTrace { task_id: task, events, executed_actions, final_state, outcome, halted, satisfied })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            let line = TraceLine { v: TRACE_VERSION, ev: ev.clone() };
            out.push_str(&serde_json::to_string(&line).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TraceError> {
        let mut events = Vec::new();
        for (i, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line = i + 1;
            let value: serde_json::Value =
                serde_json::from_str(raw).map_err(|source| TraceError::Json { line, source })?;
            match value.get("v").and_then(serde_json::Value::as_u64) {
                Some(v) if v == u64::from(TRACE_VERSION) => {}
                _ => {
                    let found = value.get("v").map_or_else(|| "missing".to_string(), |v| v.to_string());
                    return Err(TraceError::SchemaMismatch { line, found });
                }
            }
            if matches!(events.last(), Some(TraceEvent::Finished { .. })) {
                return Err(TraceError::TrailingEvent(line));
            }
            let parsed: TraceLine =
                serde_json::from_value(value).map_err(|source| TraceError::Json { line, source })?;
            events.push(parsed.ev);
        }
        Self::from_events(events)
    }

    /// Rules behind every rejected proposal, in order: replan verdicts and rejected executions.
    pub fn rejections(&self) -> Vec<Rule> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Verdict { verdict: TerminationVerdict::Replan(r), .. } => Some(*r),
                TraceEvent::Executed { result: ExecResult::Rejected(r), .. } => Some(*r),
                _ => None,
            })
            .collect()
    }

    pub fn tree(&self) -> Option<&TreeSnapshot> {
        match self.events.last() {
            Some(TraceEvent::Finished { tree, .. }) => Some(tree),
            _ => None,
        }
    }
}

/// The backend itself failed; the episode could not be run.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("task {task}: {message}")]
pub struct BackendError {
    pub task: String,
    pub message: String,
}

/// Per-predicate truth in `state` and the outcome it implies. Unknown ids count as unmet.
pub fn check_outcome(state: &WorldState, goals: &[GoalPredicate]) -> (EpisodeOutcome, Vec<bool>) {
    let satisfied: Vec<bool> = goals.iter().map(|g| goal_satisfied(state, g).unwrap_or(false)).collect();
    let outcome = if satisfied.iter().all(|s| *s) {
        EpisodeOutcome::Success
    } else {
        EpisodeOutcome::Failure(FailureKind::GoalsUnmet)
    };
    (outcome, satisfied)
}

enum Flow {
    Continue,
    Halt(FailureKind),
    RootComplete,
}

struct Episode<'a> {
    task: &'a TaskSpec,
    config: &'a PlannerConfig,
    state: WorldState,
    tree: SubgoalTree,
    events: Vec<TraceEvent>,
    history: Vec<String>,
}

impl<'a> Episode<'a> {
    fn new(task: &'a TaskSpec, config: &'a PlannerConfig) -> Self {
        let tree = SubgoalTree::init(&task.instruction)
            .unwrap_or_else(|_| SubgoalTree::init(&task.id).expect("task id is non-empty"));
        Episode { task, config, state: task.world.clone(), tree, events: Vec::new(), history: Vec::new() }
    }

    fn finish(mut self, halted: Option<FailureKind>) -> EpisodeTrace {
        let (mut outcome, satisfied) = check_outcome(&self.state, &self.task.goals);
        if let (EpisodeOutcome::Failure(_), Some(kind)) = (outcome, halted) {
            outcome = EpisodeOutcome::Failure(kind);
        }
        self.events.push(TraceEvent::Finished {
            task: self.task.id.clone(),
            outcome,
            halted,
            satisfied,
            final_state: self.state.clone(),
            tree: self.tree.snapshot(),
        });
        EpisodeTrace::from_events(self.events).expect("episode ends with Finished")
    }

    fn backend_error(&self, message: String) -> BackendError {
        BackendError { task: self.task.id.clone(), message }
    }

    fn advance(&mut self) -> Flow {
        match self.tree.advance_cursor() {
            Ok(CursorMove::RootComplete) => Flow::RootComplete,
            Ok(_) => Flow::Continue,
            Err(_) => Flow::Halt(FailureKind::BudgetExhausted),
        }
    }

    /// Discards `node`, or its parent once the parent's own replan budget is spent.
    fn replan(&mut self, node: NodeId, reason: Rule) -> Result<Flow, TreeError> {
        let Some(parent) = self.tree.node(node)?.parent else {
            return Ok(Flow::Halt(FailureKind::ReplanAtRoot));
        };
        let max = self.config.max_replans_per_node;
        let target = if self.tree.node(parent)?.replan_count < max {
            node
        } else {
            let p = self.tree.node(parent)?;
            let Some(grand) = p.parent else {
                return Ok(Flow::Halt(FailureKind::BudgetExhausted));
            };
            if self.tree.has_executed_leaf(parent) || self.tree.node(grand)?.replan_count >= max {
                return Ok(Flow::Halt(FailureKind::BudgetExhausted));
            }
            parent
        };
        let new_cursor = self.tree.replan_reset(target)?;
        self.events.push(TraceEvent::Replanned {
            node: target,
            parent: new_cursor,
            reason,
            replan_count: self.tree.node(new_cursor)?.replan_count,
        });
        Ok(Flow::Continue)
    }

    fn step(
        &mut self,
        policy: &dyn DecompositionPolicy,
        judge: &dyn CongruenceJudge,
    ) -> Result<Result<Flow, TreeError>, BackendError> {
        let cursor = self.tree.cursor();
        let obs = observe(&self.state);
        let emb = &self.config.embodiment;
        let ctx = match build_context(&self.tree, cursor, &obs, emb, self.config.mode, &self.history) {
            Ok(c) => c,
            Err(e) => return Ok(Err(e)),
        };
        let reply = match next_subgoal(policy, &ctx) {
            Ok(r) => r,
            Err(PolicyError::Backend(m)) => return Err(self.backend_error(m)),
            Err(error) => {
                let grammar = matches!(error, PolicyError::Grammar { .. });
                self.events.push(TraceEvent::PolicyFailed { node: cursor, error, context: ctx.record() });
                if grammar {
                    return Ok(Ok(Flow::Halt(FailureKind::PolicyGrammarError)));
                }
                return Ok(self.replan(cursor, Rule::NoRecipe));
            }
        };
        let text = match reply.output.clone() {
            DecomposerOutput::EndOfSiblings => {
                self.events.push(TraceEvent::Decomposed {
                    parent: cursor,
                    node: None,
                    output: reply.output,
                    context: ctx.record(),
                    retries: reply.retries,
                });
                return Ok(self.tree.end_siblings(cursor).map(|_| self.advance()));
            }
            DecomposerOutput::Subgoal(t) => t,
        };
        let node = match self.tree.add_child(cursor, &text) {
            Ok(n) => n,
            Err(e) => return Ok(Err(e)),
        };
        self.events.push(TraceEvent::Decomposed {
            parent: cursor,
            node: Some(node),
            output: reply.output,
            context: ctx.record(),
            retries: reply.retries,
        });
        let parent_text = self.tree.node(cursor).map(|n| n.text.clone()).unwrap_or_default();
        let left = self.tree.left_sibling(node).ok().flatten().map(|n| n.text.clone());
        let candidate = Candidate { text: &text, parent: &parent_text, left_sibling: left.as_deref() };
        let (verdict, report) = match evaluate(candidate, &self.state, &obs, emb, judge) {
            Ok(v) => v,
            Err(PolicyError::Backend(m)) => return Err(self.backend_error(m)),
            Err(error) => {
                self.events.push(TraceEvent::PolicyFailed { node, error, context: ctx.record() });
                return Ok(Ok(Flow::Halt(FailureKind::PolicyGrammarError)));
            }
        };
        self.events.push(TraceEvent::Verdict { node, text: text.clone(), report, verdict: verdict.clone() });
        Ok(match verdict {
            TerminationVerdict::Execute(action) => self.execute(node, text, action, &obs),
            TerminationVerdict::Refine => {
                let depth = self.tree.node(node).map_or(usize::MAX, |n| n.depth);
                if depth + 1 > self.config.max_depth {
                    Ok(Flow::Halt(FailureKind::BudgetExhausted))
                } else {
                    self.tree.set_cursor(node).map(|_| Flow::Continue)
                }
            }
            TerminationVerdict::Replan(rule) => self.replan(node, rule),
        })
    }

    fn execute(
        &mut self,
        node: NodeId,
        text: String,
        action: PrimitiveAction,
        obs: &Observation,
    ) -> Result<Flow, TreeError> {
        match apply_action(&self.state, &action, &self.config.embodiment) {
            Ok(next) => {
                self.state = next;
                self.history.push(grammar::render_action(&action, obs));
                self.tree.mark_leaf(node, action.clone())?;
                self.events.push(TraceEvent::Executed {
                    node: Some(node),
                    text,
                    action: Some(action),
                    result: ExecResult::Ok,
                });
                self.tree.set_cursor(node)?;
                Ok(self.advance())
            }
            Err(e) => {
                self.events.push(TraceEvent::Executed {
                    node: Some(node),
                    text,
                    action: Some(action),
                    result: ExecResult::Rejected(e.rule()),
                });
                Ok(Flow::Halt(FailureKind::ActionRejected))
            }
        }
    }
}

/// Runs one episode of subgoal-tree planning.
///
/// Every planning failure ends up in the returned trace; `Err` is reserved for
/// a backend that could not answer at all.
pub fn run_episode(
    task: &TaskSpec,
    policy: &dyn DecompositionPolicy,
    judge: &dyn CongruenceJudge,
    config: &PlannerConfig,
) -> Result<EpisodeTrace, BackendError> {
    if config.mode == ContextMode::FlatBaseline {
        return run_flat_baseline(task, policy, config);
    }
    let mut ep = Episode::new(task, config);
    if task.goals.is_empty() {
        return Ok(ep.finish(None));
    }
    let mut calls = 0;
    loop {
        if calls >= config.max_total_steps {
            return Ok(ep.finish(Some(FailureKind::BudgetExhausted)));
        }
        calls += 1;
        match ep.step(policy, judge)? {
            Ok(Flow::Continue) => {}
            Ok(Flow::RootComplete) => return Ok(ep.finish(None)),
            Ok(Flow::Halt(kind)) => return Ok(ep.finish(Some(kind))),
            Err(_) => return Ok(ep.finish(Some(FailureKind::BudgetExhausted))),
        }
    }
}

/// Runs the tree-free baseline: the policy proposes one action at a time from
/// the instruction and the action history.
///
/// Proposals are grounded against the full state, so a hidden object is
/// rejected by the environment rather than being unmappable. Rejections are
/// charged to one virtual node with the per-node replan budget.
pub fn run_flat_baseline(
    task: &TaskSpec,
    policy: &dyn DecompositionPolicy,
    config: &PlannerConfig,
) -> Result<EpisodeTrace, BackendError> {
    let config = PlannerConfig { mode: ContextMode::FlatBaseline, ..config.clone() };
    let mut ep = Episode::new(task, &config);
    if task.goals.is_empty() {
        return Ok(ep.finish(None));
    }
    let root = ep.tree.root();
    let mut rejections = 0;
    for _ in 0..config.max_total_steps {
        let obs = observe(&ep.state);
        let ctx =
            build_context(&ep.tree, root, &obs, &config.embodiment, config.mode, &ep.history).expect("root exists");
        let reply = match next_subgoal(policy, &ctx) {
            Ok(r) => r,
            Err(PolicyError::Backend(m)) => return Err(ep.backend_error(m)),
            Err(error) => {
                let kind = match error {
                    PolicyError::Grammar { .. } => FailureKind::PolicyGrammarError,
                    _ => FailureKind::ReplanAtRoot,
                };
                ep.events.push(TraceEvent::PolicyFailed { node: root, error, context: ctx.record() });
                return Ok(ep.finish(Some(kind)));
            }
        };
        ep.events.push(TraceEvent::Decomposed {
            parent: root,
            node: None,
            output: reply.output.clone(),
            context: ctx.record(),
            retries: reply.retries,
        });
        let DecomposerOutput::Subgoal(text) = reply.output else {
            return Ok(ep.finish(None));
        };
        let full = Observation::omniscient(&ep.state);
        let Some(action) = check_mappability(&text, &full) else {
            ep.events.push(TraceEvent::Executed {
                node: None,
                text,
                action: None,
                result: ExecResult::Rejected(Rule::Unmappable),
            });
            rejections += 1;
            if rejections > config.max_replans_per_node {
                return Ok(ep.finish(Some(FailureKind::BudgetExhausted)));
            }
            continue;
        };
        match apply_action(&ep.state, &action, &config.embodiment) {
            Ok(next) => {
                let node = ep.tree.add_child(root, &text).expect("root accepts children");
                ep.tree.mark_leaf(node, action.clone()).expect("fresh node");
                ep.history.push(grammar::render_action(&action, &obs));
                ep.state = next;
                ep.events.push(TraceEvent::Executed {
                    node: Some(node),
                    text,
                    action: Some(action),
                    result: ExecResult::Ok,
                });
            }
            Err(e) => {
                ep.events.push(TraceEvent::Executed {
                    node: None,
                    text,
                    action: Some(action),
                    result: ExecResult::Rejected(e.rule()),
                });
                rejections += 1;
                if rejections > config.max_replans_per_node {
                    return Ok(ep.finish(Some(FailureKind::BudgetExhausted)));
                }
            }
        }
    }
    Ok(ep.finish(Some(FailureKind::BudgetExhausted)))
}
