//! Task suites, success metrics, failure taxonomy and the brute-force oracle.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::{DecompositionPolicy, PolicyError};
use crate::planner::{run_episode, BackendError, EpisodeTrace, FailureKind, PlannerConfig, TraceEvent};
use crate::terminate::CongruenceJudge;
use crate::world::{
    apply_action, goal_satisfied, legal_actions, observe, Embodiment, GoalPredicate, PrimitiveAction, WorldFile,
    WorldState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "short-simple")]
    ShortSimple,
    #[serde(rename = "short-complex")]
    ShortComplex,
    #[serde(rename = "long-simple")]
    LongSimple,
    #[serde(rename = "long-complex")]
    LongComplex,
}

impl Category {
    pub const ALL: [Category; 4] =
        [Category::ShortSimple, Category::ShortComplex, Category::LongSimple, Category::LongComplex];

    pub fn is_long(self) -> bool {
        matches!(self, Category::LongSimple | Category::LongComplex)
    }

    pub fn is_complex(self) -> bool {
        matches!(self, Category::ShortComplex | Category::LongComplex)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::ShortSimple => "short-simple",
            Category::ShortComplex => "short-complex",
            Category::LongSimple => "long-simple",
            Category::LongComplex => "long-complex",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorldRef {
    /// Path relative to the task file.
    Path(String),
    Inline(WorldFile),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskFile {
    pub id: String,
    pub instruction: String,
    pub world: WorldRef,
    #[serde(default)]
    pub goals: Vec<GoalPredicate>,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: String,
    pub instruction: String,
    pub world: WorldState,
    pub goals: Vec<GoalPredicate>,
    pub category: Category,
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    World {
        path: String,
        #[source]
        source: crate::world::WorldError,
    },
}

impl TaskSpec {
    /// Builds a task; a world given by path is resolved against `base`.
    pub fn from_file(file: TaskFile, base: &Path, origin: &str) -> Result<Self, TaskError> {
        let invalid = |field: &str, msg: String| TaskError::Invalid { path: format!("{origin}: {field}"), msg };
        if file.id.trim().is_empty() {
            return Err(invalid("id", "empty task id".into()));
        }
        if file.instruction.trim().is_empty() {
            return Err(invalid("instruction", "empty instruction".into()));
        }
        let world = match file.world {
            WorldRef::Path(p) => {
                let path = base.join(p);
                WorldState::load(&path)
                    .map_err(|source| TaskError::World { path: format!("{origin}: world"), source })?
            }
            WorldRef::Inline(w) => WorldState::from_file(w)
                .map_err(|source| TaskError::World { path: format!("{origin}: world"), source })?,
        };
        for (i, g) in file.goals.iter().enumerate() {
            for id in g.ids() {
                if world.object(id).is_none() {
                    return Err(invalid(&format!("goals[{i}]"), format!("unknown object {id}")));
                }
            }
        }
        Ok(TaskSpec { id: file.id, instruction: file.instruction, world, goals: file.goals, category: file.category })
    }

    pub fn from_json(text: &str, base: &Path) -> Result<Self, TaskError> {
        let file = serde_json::from_str(text).map_err(|source| TaskError::Json { path: "task".into(), source })?;
        Self::from_file(file, base, "task")
    }

    pub fn load(path: &Path) -> Result<Self, TaskError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| TaskError::Io { path: origin.clone(), source })?;
        let file = serde_json::from_str(&text).map_err(|source| TaskError::Json { path: origin.clone(), source })?;
        Self::from_file(file, path.parent().unwrap_or(Path::new(".")), &origin)
    }

    /// Whether some object starts out hidden inside a closed container.
    pub fn has_hidden_objects(&self) -> bool {
        observe(&self.world).visible.len() < self.world.objects().len()
    }
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("suite path {0} does not exist")]
    NotFound(PathBuf),
    #[error("no task files under {0}")]
    Empty(PathBuf),
    #[error("duplicate task id {0}")]
    DuplicateId(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Loads every `*.json` task from `path` (or from `path/tasks` if present), sorted by id.
pub fn load_suite(path: &Path) -> Result<Vec<TaskSpec>, SuiteError> {
    if !path.exists() {
        return Err(SuiteError::NotFound(path.to_path_buf()));
    }
    if path.is_file() {
        return Ok(vec![TaskSpec::load(path)?]);
    }
    let dir = if path.join("tasks").is_dir() { path.join("tasks") } else { path.to_path_buf() };
    let io = |source| SuiteError::Io { path: dir.display().to_string(), source };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(SuiteError::Empty(dir));
    }
    let mut tasks = files.iter().map(|f| TaskSpec::load(f)).collect::<Result<Vec<_>, _>>()?;
    tasks.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = tasks.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(SuiteError::DuplicateId(w[0].id.clone()));
    }
    Ok(tasks)
}

/// Runs every task, fanning out over at most `parallelism` threads. Output order follows `tasks`.
pub fn run_suite(
    tasks: &[TaskSpec],
    policy: &dyn DecompositionPolicy,
    judge: &dyn CongruenceJudge,
    config: &PlannerConfig,
    parallelism: usize,
) -> Result<Vec<EpisodeTrace>, BackendError> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| BackendError { task: String::new(), message: e.to_string() })?;
    pool.install(|| tasks.par_iter().map(|t| run_episode(t, policy, judge, config)).collect())
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

pub const ORACLE_DEPTH: usize = 8;

fn all_hold(state: &WorldState, goals: &[GoalPredicate]) -> bool {
    goals.iter().all(|g| goal_satisfied(state, g).unwrap_or(false))
}

/// Shortest action sequence reaching every goal within `depth_limit`, by
/// iterative deepening over legal actions in canonical order.
pub fn oracle_search(task: &TaskSpec, depth_limit: usize) -> Option<Vec<PrimitiveAction>> {
    let emb = Embodiment::single_arm();
    for limit in 0..=depth_limit {
        let mut seen: HashMap<WorldState, usize> = HashMap::new();
        let mut path = Vec::new();
        if dfs(&task.world, &task.goals, &emb, limit, &mut seen, &mut path) {
            return Some(path);
        }
    }
    None
}

fn dfs(
    state: &WorldState,
    goals: &[GoalPredicate],
    emb: &Embodiment,
    remaining: usize,
    seen: &mut HashMap<WorldState, usize>,
    path: &mut Vec<PrimitiveAction>,
) -> bool {
    if all_hold(state, goals) {
        return true;
    }
    if remaining == 0 {
        return false;
    }
    match seen.get(state) {
        Some(&r) if r >= remaining => return false,
        _ => {
            seen.insert(state.clone(), remaining);
        }
    }
    for action in legal_actions(state, emb) {
        let Ok(next) = apply_action(state, &action, emb) else { continue };
        path.push(action);
        if dfs(&next, goals, emb, remaining - 1, seen, path) {
            return true;
        }
        path.pop();
    }
    false
}

/// Shortest-plan length of every task, searched in parallel; `None` when unreachable.
pub fn oracle_lengths(tasks: &[TaskSpec]) -> BTreeMap<String, Option<usize>> {
    use rayon::prelude::*;
    tasks.par_iter().map(|t| (t.id.clone(), oracle_search(t, ORACLE_DEPTH).map(|p| p.len()))).collect()
}

/// Checks that the declared category matches the oracle plan length and hidden-object presence.
pub fn lint_category(task: &TaskSpec, oracle_len: usize) -> Result<(), String> {
    let long = (5..=8).contains(&oracle_len);
    if !long && oracle_len >= 5 {
        return Err(format!("{}: oracle length {oracle_len} is outside every category", task.id));
    }
    if long != task.category.is_long() {
        return Err(format!("{}: oracle length {oracle_len} contradicts category {}", task.id, task.category));
    }
    if task.has_hidden_objects() != task.category.is_complex() {
        return Err(format!(
            "{}: hidden objects {} contradicts category {}",
            task.id,
            if task.has_hidden_objects() { "present" } else { "absent" },
            task.category
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Error taxonomy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorClass {
    GrammarError,
    MissingState,
    MissingRelation,
    MissingGoalAction,
    WrongOrder,
    AdditionalOrMissingStep,
    AffordanceError,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 7] = [
        ErrorClass::GrammarError,
        ErrorClass::MissingState,
        ErrorClass::MissingRelation,
        ErrorClass::MissingGoalAction,
        ErrorClass::WrongOrder,
        ErrorClass::AdditionalOrMissingStep,
        ErrorClass::AffordanceError,
    ];

    /// The six classes reported as table columns, in column order.
    pub const TABLE: [ErrorClass; 6] = [
        ErrorClass::MissingState,
        ErrorClass::MissingRelation,
        ErrorClass::MissingGoalAction,
        ErrorClass::WrongOrder,
        ErrorClass::AdditionalOrMissingStep,
        ErrorClass::AffordanceError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::GrammarError => "GrammarError",
            ErrorClass::MissingState => "MissingState",
            ErrorClass::MissingRelation => "MissingRelation",
            ErrorClass::MissingGoalAction => "MissingGoalAction",
            ErrorClass::WrongOrder => "WrongOrder",
            ErrorClass::AdditionalOrMissingStep => "AdditionalOrMissingStep",
            ErrorClass::AffordanceError => "AffordanceError",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            ErrorClass::GrammarError => "Grammar Error",
            ErrorClass::MissingState => "Missing State",
            ErrorClass::MissingRelation => "Missing Relation",
            ErrorClass::MissingGoalAction => "Missing Goal Action",
            ErrorClass::WrongOrder => "Wrong Order",
            ErrorClass::AdditionalOrMissingStep => "Additional/Missing Step",
            ErrorClass::AffordanceError => "Affordance Error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Primary error class of a trace; `None` for a successful one.
///
/// Checked in order: an unrecovered grammar failure; an affordance rule behind
/// the last rejection of a run that halted early; any rejection for an
/// ordering rule (hidden, out of reach, closed container); then the unmet goal
/// predicates. Each unmet predicate counts as a missing goal action if its
/// establishing action was never proposed, as a missing state or relation if
/// that action was executed, and as an additional/missing step if it was
/// proposed but never executed. The largest count wins, ties resolved in the
/// order state, relation, goal action, step.
pub fn classify_error(trace: &EpisodeTrace, task: &TaskSpec) -> Option<ErrorClass> {
    if trace.outcome.is_success() {
        return None;
    }
    let grammar =
        trace.events.iter().any(|e| matches!(e, TraceEvent::PolicyFailed { error: PolicyError::Grammar { .. }, .. }));
    if grammar && trace.halted == Some(FailureKind::PolicyGrammarError) {
        return Some(ErrorClass::GrammarError);
    }
    let rejections = trace.rejections();
    let halted_early = matches!(
        trace.halted,
        Some(FailureKind::BudgetExhausted | FailureKind::ReplanAtRoot | FailureKind::ActionRejected)
    );
    if halted_early && rejections.last().is_some_and(|r| r.is_affordance()) {
        return Some(ErrorClass::AffordanceError);
    }
    if rejections.iter().any(|r| r.is_ordering()) {
        return Some(ErrorClass::WrongOrder);
    }

    let mut proposed = Vec::new();
    for e in &trace.events {
        match e {
            TraceEvent::Verdict { report, .. } => proposed.extend(report.mapped_action.iter().cloned()),
            TraceEvent::Executed { action: Some(a), .. } => proposed.push(a.clone()),
            _ => {}
        }
    }
    let (mut state, mut relation, mut goal_action, mut step) = (0, 0, 0, 0);
    for (i, goal) in task.goals.iter().enumerate() {
        if trace.satisfied.get(i).copied().unwrap_or(false) {
            continue;
        }
        let needed = goal.establishing_action();
        if trace.executed_actions.contains(&needed) {
            match goal {
                GoalPredicate::OpenState(..) => state += 1,
                GoalPredicate::Placed(..) => relation += 1,
            }
        } else if proposed.contains(&needed) {
            step += 1;
        } else {
            goal_action += 1;
        }
    }
    let ranked = [
        (state, ErrorClass::MissingState),
        (relation, ErrorClass::MissingRelation),
        (goal_action, ErrorClass::MissingGoalAction),
        (step, ErrorClass::AdditionalOrMissingStep),
    ];
    let best = ranked.iter().map(|(n, _)| *n).max().unwrap_or(0);
    if best == 0 {
        return Some(ErrorClass::AdditionalOrMissingStep);
    }
    ranked.iter().find(|(n, _)| *n == best).map(|(_, c)| *c)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// `n / d`, with an empty denominator counting as complete.
pub fn ratio(n: u64, d: u64) -> Ratio<u64> {
    if d == 0 {
        Ratio::from_integer(1)
    } else {
        Ratio::new(n, d)
    }
}

/// Percentage rounded half-up to two decimals, trailing zeros dropped: `40%`, `62.5%`, `62.02%`.
pub fn format_percent(r: Ratio<u64>) -> String {
    let (n, d) = (u128::from(*r.numer()), u128::from(*r.denom()));
    let hundredths = (n * 10_000 * 2 + d) / (2 * d);
    let (int, frac) = (hundredths / 100, hundredths % 100);
    match frac {
        0 => format!("{int}%"),
        f if f % 10 == 0 => format!("{int}.{}%", f / 10),
        f => format!("{int}.{f:02}%"),
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("traces and tasks do not describe the same suite: {0}")]
    MismatchedSuite(String),
    #[error("length bucketing needs at least 10 tasks, got {0}")]
    TooFewTasks(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task: String,
    pub category: Category,
    pub success: bool,
    pub failure: Option<FailureKind>,
    pub error_class: Option<ErrorClass>,
    pub predicates: u64,
    pub satisfied: u64,
    pub executed_actions: u64,
    pub oracle_length: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    /// 1-based decile.
    pub decile: usize,
    pub tasks: Vec<String>,
    pub min_length: usize,
    pub max_length: usize,
    pub ssr: Ratio<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub method: String,
    pub episodes: Vec<EpisodeResult>,
    pub sr: Ratio<u64>,
    /// Satisfied predicates over all predicates in the suite.
    pub ssr: Ratio<u64>,
    /// Mean of per-task predicate ratios.
    pub ssr_macro: Ratio<u64>,
    pub error_counts: BTreeMap<ErrorClass, u64>,
    pub buckets: Vec<Bucket>,
}

/// Aggregates one finished trace per task. Traces are matched to tasks by id.
pub fn compute_metrics(traces: &[EpisodeTrace], tasks: &[TaskSpec]) -> Result<SuiteResult, MetricsError> {
    if tasks.is_empty() {
        return Err(MetricsError::MismatchedSuite("empty suite".into()));
    }
    if traces.len() != tasks.len() {
        return Err(MetricsError::MismatchedSuite(format!("{} traces for {} tasks", traces.len(), tasks.len())));
    }
    let by_id: BTreeMap<&str, &TaskSpec> = tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut episodes = Vec::with_capacity(traces.len());
    let mut seen = std::collections::BTreeSet::new();
    for trace in traces {
        let task = by_id
            .get(trace.task_id.as_str())
            .ok_or_else(|| MetricsError::MismatchedSuite(format!("no task {}", trace.task_id)))?;
        if !seen.insert(trace.task_id.as_str()) {
            return Err(MetricsError::MismatchedSuite(format!("two traces for {}", trace.task_id)));
        }
        if trace.satisfied.len() != task.goals.len() {
            return Err(MetricsError::MismatchedSuite(format!("{}: predicate count differs", trace.task_id)));
        }
        episodes.push(EpisodeResult {
            task: task.id.clone(),
            category: task.category,
            success: trace.outcome.is_success(),
            failure: match trace.outcome {
                crate::planner::EpisodeOutcome::Failure(k) => Some(k),
                crate::planner::EpisodeOutcome::Success => None,
            },
            error_class: classify_error(trace, task),
            predicates: trace.satisfied.len() as u64,
            satisfied: trace.satisfied.iter().filter(|s| **s).count() as u64,
            executed_actions: trace.executed_actions.len() as u64,
            oracle_length: None,
        });
    }
    episodes.sort_by(|a, b| a.task.cmp(&b.task));
    Ok(summarize("step".into(), episodes))
}

/// Recomputes every aggregate from per-episode results.
pub fn summarize(method: String, episodes: Vec<EpisodeResult>) -> SuiteResult {
    let n = episodes.len() as u64;
    let successes = episodes.iter().filter(|e| e.success).count() as u64;
    let total: u64 = episodes.iter().map(|e| e.predicates).sum();
    let sat: u64 = episodes.iter().map(|e| e.satisfied).sum();
    let macro_sum =
        episodes.iter().map(|e| ratio(e.satisfied, e.predicates)).fold(Ratio::from_integer(0), |a, b| a + b);
    let ssr_macro = if n == 0 { Ratio::from_integer(1) } else { macro_sum / Ratio::from_integer(n) };
    let mut error_counts: BTreeMap<ErrorClass, u64> = ErrorClass::ALL.iter().map(|c| (*c, 0)).collect();
    for c in episodes.iter().filter_map(|e| e.error_class) {
        *error_counts.entry(c).or_default() += 1;
    }
    SuiteResult {
        method,
        sr: ratio(successes, n),
        ssr: ratio(sat, total),
        ssr_macro,
        error_counts,
        buckets: Vec::new(),
        episodes,
    }
}

/// Splits tasks, sorted by oracle length then id, into ten equal-count buckets;
/// the first `n % 10` buckets take one extra task.
pub fn bucket_by_length(
    results: &[EpisodeResult],
    oracle_lengths: &BTreeMap<String, usize>,
) -> Result<Vec<Bucket>, MetricsError> {
    if results.len() < 10 {
        return Err(MetricsError::TooFewTasks(results.len()));
    }
    let mut sorted: Vec<(&EpisodeResult, usize)> = results
        .iter()
        .map(|r| {
            let len = oracle_lengths
                .get(&r.task)
                .copied()
                .ok_or_else(|| MetricsError::MismatchedSuite(format!("no oracle length for {}", r.task)))?;
            Ok((r, len))
        })
        .collect::<Result<_, MetricsError>>()?;
    sorted.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.task.cmp(&b.0.task)));
    let (base, extra) = (sorted.len() / 10, sorted.len() % 10);
    let mut out = Vec::with_capacity(10);
    let mut start = 0;
    for i in 0..10 {
        let size = base + usize::from(i < extra);
        let chunk = &sorted[start..start + size];
        start += size;
        let total: u64 = chunk.iter().map(|(r, _)| r.predicates).sum();
        let sat: u64 = chunk.iter().map(|(r, _)| r.satisfied).sum();
        out.push(Bucket {
            decile: i + 1,
            tasks: chunk.iter().map(|(r, _)| r.task.clone()).collect(),
            min_length: chunk.first().map_or(0, |c| c.1),
            max_length: chunk.last().map_or(0, |c| c.1),
            ssr: ratio(sat, total),
        });
    }
    Ok(out)
}

/// Records oracle lengths on each episode and fills in the length buckets.
pub fn attach_oracle_lengths(
    result: &mut SuiteResult,
    oracle_lengths: &BTreeMap<String, usize>,
) -> Result<(), MetricsError> {
    for e in &mut result.episodes {
        e.oracle_length = oracle_lengths.get(&e.task).copied();
    }
    result.buckets = bucket_by_length(&result.episodes, oracle_lengths)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

pub const CSV_HEADER: &str =
    "task,category,success,failure,error_class,predicates,satisfied,executed_actions,oracle_length";

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

pub fn emit_report(result: &SuiteResult, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(result).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = format!("{CSV_HEADER}\n");
            for e in &result.episodes {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    e.task,
                    e.category,
                    e.success,
                    e.failure.map(|f| snake(&f)).unwrap_or_default(),
                    e.error_class.map(|c| c.as_str()).unwrap_or(""),
                    e.predicates,
                    e.satisfied,
                    e.executed_actions,
                    e.oracle_length.map(|l| l.to_string()).unwrap_or_default(),
                ));
            }
            s
        }
        ReportFormat::Markdown => markdown(result),
    }
}

fn markdown(r: &SuiteResult) -> String {
    let n = r.episodes.len() as u64;
    let share = |c: ErrorClass| format_percent(ratio(r.error_counts.get(&c).copied().unwrap_or(0), n));
    let mut s = String::new();
    s.push_str("| Method | SR | SSR |\n|---|---|---|\n");
    s.push_str(&format!("| {} | {} | {} |\n\n", r.method, format_percent(r.sr), format_percent(r.ssr)));
    s.push_str(&format!("SSR (per-task mean): {}\n\n", format_percent(r.ssr_macro)));
    s.push_str("| Method |");
    for c in ErrorClass::TABLE {
        s.push_str(&format!(" {} |", c.title()));
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(ErrorClass::TABLE.len()));
    s.push_str(&format!("\n| {} |", r.method));
    for c in ErrorClass::TABLE {
        s.push_str(&format!(" {} |", share(c)));
    }
    s.push_str(&format!("\n\nGrammar Error: {}\n", share(ErrorClass::GrammarError)));
    if !r.buckets.is_empty() {
        s.push_str("\n| Decile | Tasks | Oracle length | SSR |\n|---|---|---|---|\n");
        for b in &r.buckets {
            s.push_str(&format!(
                "| {} | {} | {}-{} | {} |\n",
                b.decile,
                b.tasks.len(),
                b.min_length,
                b.max_length,
                format_percent(b.ssr)
            ));
        }
    }
    s
}
