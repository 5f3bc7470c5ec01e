//! Helpers shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use step_core::decompose::{
    ContextMode, DecomposerOutput, DecompositionContext, DecompositionPolicy, PolicyError, RecipeTable, Reply,
    ScriptedPolicy,
};
use step_core::eval::{load_suite, Category, TaskFile, TaskSpec, WorldRef};
use step_core::planner::{
    check_outcome, run_episode, EpisodeOutcome, EpisodeTrace, ExecResult, PlannerConfig, TraceEvent,
};
use step_core::terminate::{ScriptedJudge, VerdictKind};
use step_core::tree::{NodeId, NodeStatus};
use step_core::world::{apply_action, Embodiment, GoalPredicate, PrimitiveAction, WorldFile, WorldState};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().expect("repo root")
}

pub fn suite_dir() -> PathBuf {
    repo_root().join("suite")
}

pub fn fixtures_dir() -> PathBuf {
    repo_root().join("fixtures")
}

pub fn suite() -> Vec<TaskSpec> {
    load_suite(&suite_dir()).expect("bundled suite loads")
}

pub fn recipes() -> RecipeTable {
    RecipeTable::load(&suite_dir().join("recipes.json")).expect("bundled recipes load")
}

pub fn scripted() -> (ScriptedPolicy, ScriptedJudge) {
    let table = recipes();
    (ScriptedPolicy::new(table.clone()), ScriptedJudge::new(table))
}

pub fn world(name: &str) -> WorldState {
    WorldState::load(&suite_dir().join("worlds").join(format!("{name}.json"))).expect("bundled world loads")
}

/// A task over `world` with an inline copy of the world.
pub fn task(id: &str, instruction: &str, world: &WorldState, goals: Vec<GoalPredicate>) -> TaskSpec {
    let file = TaskFile {
        id: id.into(),
        instruction: instruction.into(),
        world: WorldRef::Inline(WorldFile::from(world.clone())),
        goals,
        category: Category::ShortSimple,
    };
    TaskSpec::from_file(file, Path::new("."), id).expect("valid task")
}

pub fn task_file(task: &TaskSpec) -> TaskFile {
    TaskFile {
        id: task.id.clone(),
        instruction: task.instruction.clone(),
        world: WorldRef::Inline(WorldFile::from(task.world.clone())),
        goals: task.goals.clone(),
        category: task.category,
    }
}

pub fn placed(obj: &str, rel: &str, parent: &str) -> GoalPredicate {
    serde_json::from_value(serde_json::json!({ "placed": [obj, rel, parent] })).expect("goal")
}

pub fn open_state(container: &str, open: bool) -> GoalPredicate {
    serde_json::from_value(serde_json::json!({ "open_state": [container, open] })).expect("goal")
}

/// Policy driven by a closure over the context.
pub struct FnPolicy<F>(pub F);

impl<F> DecompositionPolicy for FnPolicy<F>
where
    F: Fn(&DecompositionContext) -> Result<Reply, PolicyError> + Send + Sync,
{
    fn next_subgoal(&self, ctx: &DecompositionContext) -> Result<Reply, PolicyError> {
        (self.0)(ctx)
    }
}

pub fn subgoal(text: &str) -> Result<Reply, PolicyError> {
    Ok(Reply::direct(DecomposerOutput::Subgoal(text.into())))
}

pub fn end() -> Result<Reply, PolicyError> {
    Ok(Reply::direct(DecomposerOutput::EndOfSiblings))
}

pub fn grammar_error(raw: &str) -> Result<Reply, PolicyError> {
    Err(PolicyError::Grammar { raw: raw.into(), retries: 2 })
}

/// Plays `steps` in order at the root, one per call, then ends the sibling list.
pub fn sequence(
    steps: &'static [&'static str],
) -> FnPolicy<impl Fn(&DecompositionContext) -> Result<Reply, PolicyError>> {
    FnPolicy(move |ctx: &DecompositionContext| match steps.get(ctx.prior_steps.len()) {
        Some(s) => subgoal(s),
        None => end(),
    })
}

/// Wraps a policy and keeps every context it was asked about.
pub struct Recording<P> {
    pub inner: P,
    pub seen: Mutex<Vec<DecompositionContext>>,
}

impl<P> Recording<P> {
    pub fn new(inner: P) -> Self {
        Recording { inner, seen: Mutex::new(Vec::new()) }
    }

    pub fn contexts(&self) -> Vec<DecompositionContext> {
        self.seen.lock().expect("lock").clone()
    }
}

impl<P: DecompositionPolicy> DecompositionPolicy for Recording<P> {
    fn next_subgoal(&self, ctx: &DecompositionContext) -> Result<Reply, PolicyError> {
        self.seen.lock().expect("lock").push(ctx.clone());
        self.inner.next_subgoal(ctx)
    }
}

pub fn read_trace(path: &Path) -> EpisodeTrace {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    EpisodeTrace::from_jsonl(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn replay(start: &WorldState, actions: &[PrimitiveAction]) -> WorldState {
    let emb = Embodiment::single_arm();
    actions.iter().fold(start.clone(), |s, a| apply_action(&s, a, &emb).expect("recorded action replays"))
}

/// Executed leaves of the final tree in depth-first sibling order, rebuilt from the snapshot alone.
pub fn snapshot_leaf_order(trace: &EpisodeTrace) -> Vec<PrimitiveAction> {
    let tree = trace.tree().expect("trace has a tree snapshot");
    let mut children: BTreeMap<Option<NodeId>, Vec<(usize, NodeId)>> = BTreeMap::new();
    for n in &tree.nodes {
        children.entry(n.parent).or_default().push((n.sibling_index, n.id));
    }
    for v in children.values_mut() {
        v.sort();
    }
    let by_id: BTreeMap<NodeId, _> = tree.nodes.iter().map(|n| (n.id, n)).collect();
    let mut out = Vec::new();
    let mut stack: Vec<NodeId> = children.get(&None).into_iter().flatten().rev().map(|(_, id)| *id).collect();
    while let Some(id) = stack.pop() {
        if let NodeStatus::Leaf(a) = &by_id[&id].status {
            out.push(a.clone());
        }
        stack.extend(children.get(&Some(id)).into_iter().flatten().rev().map(|(_, c)| *c));
    }
    out
}

/// Checks the cumulative-effect property of one trace; returns whether it applied.
pub fn assert_cumulative_effect(trace: &EpisodeTrace, task: &TaskSpec) -> bool {
    assert_eq!(replay(&task.world, &trace.executed_actions), trace.final_state, "{}", task.id);
    if !trace.outcome.is_success() {
        return false;
    }
    assert_eq!(snapshot_leaf_order(trace), trace.executed_actions, "{}", task.id);
    let (outcome, satisfied) = check_outcome(&trace.final_state, &task.goals);
    assert_eq!(outcome, EpisodeOutcome::Success, "{}", task.id);
    assert!(satisfied.iter().all(|s| *s));
    true
}

/// (mappable, affordance, environment, congruence) -> verdict, written out row by row.
pub const VERDICT_TABLE: [(bool, bool, bool, bool, VerdictKind); 16] = [
    (false, false, false, false, VerdictKind::Replan),
    (false, false, false, true, VerdictKind::Replan),
    (false, false, true, false, VerdictKind::Replan),
    (false, false, true, true, VerdictKind::Replan),
    (false, true, false, false, VerdictKind::Replan),
    (false, true, false, true, VerdictKind::Replan),
    (false, true, true, false, VerdictKind::Replan),
    (false, true, true, true, VerdictKind::Refine),
    (true, false, false, false, VerdictKind::Replan),
    (true, false, false, true, VerdictKind::Replan),
    (true, false, true, false, VerdictKind::Replan),
    (true, false, true, true, VerdictKind::Replan),
    (true, true, false, false, VerdictKind::Replan),
    (true, true, false, true, VerdictKind::Replan),
    (true, true, true, false, VerdictKind::Replan),
    (true, true, true, true, VerdictKind::Execute),
];

pub const GOLDEN_TASK: &str = "lc02";

/// The golden episode in `mode` and every context the policy saw.
pub fn golden_run(mode: ContextMode) -> (EpisodeTrace, Vec<DecompositionContext>) {
    let task = suite().into_iter().find(|t| t.id == GOLDEN_TASK).expect("golden task");
    let (policy, judge) = scripted();
    let policy = Recording::new(policy);
    let config = PlannerConfig { mode, ..PlannerConfig::default() };
    let trace = run_episode(&task, &policy, &judge, &config).expect("scripted run");
    (trace, policy.contexts())
}

pub fn golden_path(mode: ContextMode) -> PathBuf {
    fixtures_dir().join("golden").join(format!("context_{}.txt", mode.as_str()))
}

pub fn render_all(contexts: &[DecompositionContext]) -> String {
    contexts.iter().enumerate().map(|(i, c)| format!("## call {}\n{}", i + 1, c.render())).collect()
}

/// For every policy call: the node it expanded and the leaves executed before it.
pub fn call_sites(trace: &EpisodeTrace) -> Vec<(NodeId, usize)> {
    let mut executed = 0;
    let mut out = Vec::new();
    for e in &trace.events {
        match e {
            TraceEvent::Decomposed { parent, .. } => out.push((*parent, executed)),
            TraceEvent::PolicyFailed { node, .. } => out.push((*node, executed)),
            TraceEvent::Executed { result: ExecResult::Ok, .. } => executed += 1,
            _ => {}
        }
    }
    out
}

/// Compares the rendered contexts of every mode with the golden files, rewriting them when `BLESS` is set.
pub fn assert_goldens_match() {
    let bless = std::env::var_os("BLESS").is_some();
    for mode in ContextMode::ALL {
        let (_, contexts) = golden_run(mode);
        let text = render_all(&contexts);
        let path = golden_path(mode);
        if bless {
            std::fs::create_dir_all(path.parent().expect("golden dir")).expect("create golden dir");
            std::fs::write(&path, &text).expect("write golden");
        }
        let golden = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(golden, text, "{} differs from {}", mode.as_str(), path.display());
    }
}

/// Full-step prior steps never exceed the focus node's depth plus its child count.
pub fn assert_full_step_bounded() {
    let (trace, contexts) = golden_run(ContextMode::FullStep);
    assert!(trace.outcome.is_success());
    let tree = trace.tree().expect("tree snapshot");
    let parent: BTreeMap<NodeId, Option<NodeId>> = tree.nodes.iter().map(|n| (n.id, n.parent)).collect();
    let depth = |mut id: NodeId| {
        let mut d = 0;
        while let Some(Some(p)) = parent.get(&id) {
            id = *p;
            d += 1;
        }
        d
    };
    let children = |id: NodeId| tree.nodes.iter().filter(|n| n.parent == Some(id)).count();
    let sites = call_sites(&trace);
    assert_eq!(sites.len(), contexts.len());
    for ((focus, _), ctx) in sites.iter().zip(&contexts) {
        assert!(ctx.prior_steps.len() <= depth(*focus) + children(*focus), "{ctx:?}");
    }
    let leaves = trace.executed_actions.len();
    let widest = contexts.iter().map(|c| c.prior_steps.len()).max().expect("at least one call");
    assert!(widest < leaves, "full-step prior {widest} should stay below {leaves} executed leaves");
}

/// History-based modes show exactly the leaves executed so far.
pub fn assert_history_tracks_leaves() {
    for mode in [ContextMode::NoTreeStructure, ContextMode::NoSubgoalTree, ContextMode::FlatBaseline] {
        let (trace, contexts) = golden_run(mode);
        let sites = call_sites(&trace);
        assert_eq!(sites.len(), contexts.len());
        for ((_, executed), ctx) in sites.iter().zip(&contexts) {
            assert_eq!(ctx.prior_steps.len(), *executed, "{}", mode.as_str());
        }
    }
}

/// Runs `episodes` suite tasks under recipe tables shuffled by seed, checking the cumulative effect of each.
/// Returns how many succeeded.
pub fn shuffled_recipe_episodes(episodes: u64) -> usize {
    let tasks = suite();
    let base = recipes();
    let mut successes = 0;
    for seed in 0..episodes {
        let table = base.shuffled(&mut ChaCha8Rng::seed_from_u64(seed));
        let task = &tasks[seed as usize % tasks.len()];
        let config = PlannerConfig { seed, ..PlannerConfig::default() };
        let trace = run_episode(task, &ScriptedPolicy::new(table.clone()), &ScriptedJudge::new(table), &config)
            .expect("scripted run");
        if assert_cumulative_effect(&trace, task) {
            successes += 1;
        }
    }
    successes
}
