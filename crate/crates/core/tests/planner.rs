//! End-to-end planner behaviour on the bundled suite and on hostile policies.

mod common;

use std::collections::BTreeMap;

use common::*;
use step_core::decompose::{ContextMode, PlanReplayPolicy};
use step_core::eval::{oracle_search, TaskSpec, ORACLE_DEPTH};
use step_core::planner::{
    check_outcome, run_episode, run_flat_baseline, EpisodeOutcome, EpisodeTrace, ExecResult, FailureKind,
    PlannerConfig, TraceError, TraceEvent,
};
use step_core::terminate::{AlwaysCongruent, TerminationVerdict};
use step_core::tree::NodeId;
use step_core::world::PrimitiveAction;

fn run_scripted(task: &TaskSpec, mode: ContextMode) -> EpisodeTrace {
    let (policy, judge) = scripted();
    run_episode(task, &policy, &judge, &PlannerConfig { mode, ..PlannerConfig::default() }).unwrap()
}

#[test]
fn store_tools_walkthrough_executes_the_expected_sequence() {
    let task = suite().into_iter().find(|t| t.id == "ls01").unwrap();
    let trace = run_scripted(&task, ContextMode::FullStep);
    assert_eq!(trace.outcome, EpisodeOutcome::Success);
    let texts: Vec<String> = trace.executed_actions.iter().map(ToString::to_string).collect();
    assert_eq!(
        texts,
        [
            "walk to drawer_1",
            "open drawer_1",
            "grasp tape_1",
            "put tape_1 in drawer_1",
            "grasp screwdriver_1",
            "put screwdriver_1 in drawer_1",
        ]
    );
    let oracle = oracle_search(&task, ORACLE_DEPTH).unwrap();
    assert!(oracle.len() <= trace.executed_actions.len());
}

#[test]
fn scripted_backend_solves_the_whole_suite() {
    for task in suite() {
        let trace = run_scripted(&task, ContextMode::FullStep);
        assert_eq!(trace.outcome, EpisodeOutcome::Success, "{}", task.id);
        assert!(assert_cumulative_effect(&trace, &task));
        let plan = oracle_search(&task, ORACLE_DEPTH).unwrap_or_else(|| panic!("{} has no oracle plan", task.id));
        let (outcome, _) = check_outcome(&replay(&task.world, &plan), &task.goals);
        assert_eq!(outcome, EpisodeOutcome::Success, "{}", task.id);
    }
}

#[test]
fn every_execution_follows_an_execute_verdict() {
    for task in suite() {
        for mode in [ContextMode::FullStep, ContextMode::NoTreeStructure, ContextMode::NoSubgoalTree] {
            let trace = run_scripted(&task, mode);
            let mut approved: BTreeMap<NodeId, PrimitiveAction> = BTreeMap::new();
            for e in &trace.events {
                match e {
                    TraceEvent::Verdict { node, verdict: TerminationVerdict::Execute(a), .. } => {
                        approved.insert(*node, a.clone());
                    }
                    TraceEvent::Executed { node: Some(n), action: Some(a), .. } => {
                        assert_eq!(approved.get(n), Some(a), "{} {}", task.id, mode.as_str());
                    }
                    _ => {}
                }
            }
        }
    }
}

#[test]
fn cumulative_effect_holds_under_shuffled_recipes() {
    assert!(shuffled_recipe_episodes(500) > 0);
}

#[test]
fn ablations_still_respect_the_replay_property() {
    for task in suite() {
        for mode in ContextMode::ALL {
            let trace = run_scripted(&task, mode);
            assert_cumulative_effect(&trace, &task);
        }
    }
}

#[test]
fn unmappable_but_consistent_text_exhausts_depth() {
    let task = suite().into_iter().find(|t| t.id == "ss01").unwrap();
    let policy = FnPolicy(|_: &step_core::decompose::DecompositionContext| subgoal("tidy up somehow"));
    let config = PlannerConfig::default();
    let trace = run_episode(&task, &policy, &AlwaysCongruent, &config).unwrap();
    assert_eq!(trace.outcome, EpisodeOutcome::Failure(FailureKind::BudgetExhausted));
    let depth = trace.tree().unwrap().nodes.len() - 1;
    assert_eq!(depth, config.max_depth);
}

#[test]
fn inconsistent_children_of_the_root_exhaust_the_budget() {
    let task = suite().into_iter().find(|t| t.id == "ss01").unwrap();
    let policy = FnPolicy(|_: &step_core::decompose::DecompositionContext| subgoal("grasp the cup"));
    let trace = run_episode(&task, &policy, &AlwaysCongruent, &PlannerConfig::default()).unwrap();
    assert_eq!(trace.outcome, EpisodeOutcome::Failure(FailureKind::BudgetExhausted));
    let replans = trace.events.iter().filter(|e| matches!(e, TraceEvent::Replanned { .. })).count();
    assert_eq!(replans, PlannerConfig::default().max_replans_per_node);
}

#[test]
fn unknown_instruction_fails_at_the_root() {
    let t = task("odd", "juggle the plates", &world("kitchen_open"), vec![placed("apple_1", "On", "counter_1")]);
    let trace = run_scripted(&t, ContextMode::FullStep);
    assert_eq!(trace.outcome, EpisodeOutcome::Failure(FailureKind::ReplanAtRoot));
}

#[test]
fn empty_goals_succeed_immediately() {
    let t = task("noop", "relax", &world("kitchen_open"), vec![]);
    for mode in ContextMode::ALL {
        let trace = run_scripted(&t, mode);
        assert_eq!(trace.outcome, EpisodeOutcome::Success);
        assert!(trace.executed_actions.is_empty());
        assert_eq!(trace.events.len(), 1);
    }
}

#[test]
fn flat_replay_of_the_oracle_plan_succeeds_with_the_same_actions() {
    for task in suite() {
        let plan = oracle_search(&task, ORACLE_DEPTH).unwrap();
        let policy = PlanReplayPolicy::new(plan.iter().map(ToString::to_string).collect());
        let trace = run_flat_baseline(&task, &policy, &PlannerConfig::default()).unwrap();
        assert_eq!(trace.outcome, EpisodeOutcome::Success, "{}", task.id);
        assert_eq!(trace.executed_actions, plan, "{}", task.id);
    }
}

#[test]
fn flat_grasp_of_hidden_object_is_rejected_and_counted() {
    let task = suite().into_iter().find(|t| t.id == "lc01").unwrap();
    let policy = sequence(&["grasp apple"]);
    let trace = run_flat_baseline(&task, &policy, &PlannerConfig::default()).unwrap();
    let rejected: Vec<_> = trace
        .events
        .iter()
        .filter(|e| matches!(e, TraceEvent::Executed { result: ExecResult::Rejected(_), .. }))
        .collect();
    assert_eq!(rejected.len(), PlannerConfig::default().max_replans_per_node + 1);
    assert_eq!(trace.outcome, EpisodeOutcome::Failure(FailureKind::BudgetExhausted));
    assert!(trace.executed_actions.is_empty());
}

#[test]
fn check_outcome_reports_each_predicate() {
    let s = world("kitchen_open");
    let holds =
        [placed("apple_1", "On", "table_1"), placed("cup_1", "On", "counter_1"), open_state("cabinet_1", false)];
    assert_eq!(check_outcome(&s, &holds), (EpisodeOutcome::Success, vec![true, true, true]));
    let mut two = holds.to_vec();
    two[2] = open_state("cabinet_1", true);
    assert_eq!(check_outcome(&s, &two), (EpisodeOutcome::Failure(FailureKind::GoalsUnmet), vec![true, true, false]));
    assert_eq!(check_outcome(&s, &[]), (EpisodeOutcome::Success, vec![]));
}

#[test]
fn traces_round_trip_through_jsonl() {
    for task in suite().into_iter().take(6) {
        for mode in ContextMode::ALL {
            let trace = run_scripted(&task, mode);
            let text = trace.to_jsonl();
            let back = EpisodeTrace::from_jsonl(&text).unwrap();
            assert_eq!(back, trace);
            assert_eq!(back.to_jsonl(), text);
        }
    }
}

#[test]
fn foreign_schema_versions_are_rejected() {
    let task = suite().into_iter().next().unwrap();
    let text = run_scripted(&task, ContextMode::FullStep).to_jsonl();
    let v0 = text.replacen("{\"v\":1,", "{\"v\":0,", 1);
    assert!(matches!(EpisodeTrace::from_jsonl(&v0), Err(TraceError::SchemaMismatch { line: 1, .. })));
    let unversioned = text.replacen("{\"v\":1,", "{", 1);
    assert!(matches!(EpisodeTrace::from_jsonl(&unversioned), Err(TraceError::SchemaMismatch { .. })));
    let truncated: String = text.lines().next().map(|l| format!("{l}\n")).unwrap();
    assert!(matches!(EpisodeTrace::from_jsonl(&truncated), Err(TraceError::Unfinished)));
    let doubled = format!("{text}{}", text.lines().last().unwrap());
    assert!(matches!(EpisodeTrace::from_jsonl(&doubled), Err(TraceError::TrailingEvent(_))));
}

#[test]
fn zero_budgets_are_rejected_by_validation() {
    assert!(PlannerConfig::default().validate().is_ok());
    assert!(PlannerConfig { max_depth: 0, ..PlannerConfig::default() }.validate().is_err());
    assert!(PlannerConfig { max_total_steps: 0, ..PlannerConfig::default() }.validate().is_err());
}
