//! Leaf termination: decide whether a fresh subgoal is executed, refined or replanned.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::decompose::{Effect, PolicyError, RecipeTable};
use crate::grammar;
use crate::world::{
    affordance_allows, legal_in_environment, Embodiment, Observation, PrimitiveAction, Rule, WorldState,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub mappable: bool,
    pub mapped_action: Option<PrimitiveAction>,
    pub affordance_ok: bool,
    pub environment_ok: bool,
    pub congruence_ok: bool,
    pub violated: Option<Rule>,
}

impl CriterionReport {
    pub fn consistent(&self) -> bool {
        self.affordance_ok && self.environment_ok && self.congruence_ok
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationVerdict {
    Execute(PrimitiveAction),
    Refine,
    Replan(Rule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictKind {
    Execute,
    Refine,
    Replan,
}

/// The decision table. A consistency failure wins over mappability.
pub fn verdict_kind(mappable: bool, affordance_ok: bool, environment_ok: bool, congruence_ok: bool) -> VerdictKind {
    if !(affordance_ok && environment_ok && congruence_ok) {
        VerdictKind::Replan
    } else if mappable {
        VerdictKind::Execute
    } else {
        VerdictKind::Refine
    }
}

pub fn decide(report: &CriterionReport) -> TerminationVerdict {
    match verdict_kind(report.mappable, report.affordance_ok, report.environment_ok, report.congruence_ok) {
        VerdictKind::Replan => TerminationVerdict::Replan(report.violated.unwrap_or(Rule::Incongruent)),
        VerdictKind::Execute => match &report.mapped_action {
            Some(a) => TerminationVerdict::Execute(a.clone()),
            None => TerminationVerdict::Replan(Rule::Unmappable),
        },
        VerdictKind::Refine => TerminationVerdict::Refine,
    }
}

/// The action `text` denotes, if it has exactly one grounded reading.
pub fn check_mappability(text: &str, obs: &Observation) -> Option<PrimitiveAction> {
    let mut grounded: Vec<PrimitiveAction> =
        grammar::parse_phrases(text).iter().filter_map(|p| grammar::ground_phrase(p, obs)).collect();
    grounded.sort_by(crate::world::canonical_cmp);
    grounded.dedup();
    match grounded.len() {
        1 => grounded.pop(),
        _ => None,
    }
}

/// What a congruence judge gets to see.
#[derive(Debug, Clone, Copy)]
pub struct CongruenceQuery<'a> {
    pub candidate: &'a str,
    pub parent: &'a str,
    pub left_sibling: Option<&'a str>,
    pub observation: &'a Observation,
}

pub trait CongruenceJudge: Send + Sync {
    fn congruent(&self, query: &CongruenceQuery<'_>) -> Result<bool, PolicyError>;
}

/// Accepts every subgoal.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysCongruent;

impl CongruenceJudge for AlwaysCongruent {
    fn congruent(&self, _: &CongruenceQuery<'_>) -> Result<bool, PolicyError> {
        Ok(true)
    }
}

/// Effect-subset judgement against the parent's recipe.
///
/// A candidate is congruent when everything it would bring about is still owed
/// by the parent after the left sibling. Texts the table does not understand
/// are accepted.
#[derive(Debug, Clone)]
pub struct ScriptedJudge {
    table: RecipeTable,
}

impl ScriptedJudge {
    pub fn new(table: RecipeTable) -> Self {
        Self { table }
    }
}

fn canonical_effects(effects: BTreeSet<Effect>, obs: &Observation) -> BTreeSet<Effect> {
    let name = |n: String| grammar::ground_unique(&n, obs).map_or(n, |id| id.to_string());
    effects
        .into_iter()
        .map(|e| match e {
            Effect::At(t) => Effect::At(name(t)),
            Effect::Holding(o) => Effect::Holding(name(o)),
            Effect::Placed(o, r, p) => Effect::Placed(name(o), r, name(p)),
            Effect::Opened(c) => Effect::Opened(name(c)),
            Effect::Closed(c) => Effect::Closed(name(c)),
        })
        .collect()
}

impl CongruenceJudge for ScriptedJudge {
    fn congruent(&self, q: &CongruenceQuery<'_>) -> Result<bool, PolicyError> {
        let obs = q.observation;
        let Some(candidate) = self.table.effects(q.candidate, obs) else {
            return Ok(true);
        };
        let Some(remaining) = self.table.remaining_effects(q.parent, q.left_sibling, obs) else {
            return Ok(true);
        };
        Ok(canonical_effects(candidate, obs).is_subset(&canonical_effects(remaining, obs)))
    }
}

/// Affordance and environment checks of a mapped action against the true state.
/// Both hold vacuously when nothing is mapped.
pub fn check_consistency(
    action: Option<&PrimitiveAction>,
    state: &WorldState,
    embodiment: &Embodiment,
) -> (bool, bool, Option<Rule>) {
    let Some(action) = action else {
        return (true, true, None);
    };
    let aff = affordance_allows(state, embodiment, action);
    let env = legal_in_environment(state, action);
    (aff.ok, env.ok, aff.violated.or(env.violated))
}

/// Everything the termination model needs to judge one new node.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub text: &'a str,
    pub parent: &'a str,
    pub left_sibling: Option<&'a str>,
}

pub fn evaluate(
    candidate: Candidate<'_>,
    state: &WorldState,
    observation: &Observation,
    embodiment: &Embodiment,
    judge: &dyn CongruenceJudge,
) -> Result<(TerminationVerdict, CriterionReport), PolicyError> {
    let mapped_action = check_mappability(candidate.text, observation);
    let (affordance_ok, environment_ok, violated) = check_consistency(mapped_action.as_ref(), state, embodiment);
    let congruence_ok = judge.congruent(&CongruenceQuery {
        candidate: candidate.text,
        parent: candidate.parent,
        left_sibling: candidate.left_sibling,
        observation,
    })?;
    let violated = violated.or((!congruence_ok).then_some(Rule::Incongruent));
    let report = CriterionReport {
        mappable: mapped_action.is_some(),
        mapped_action,
        affordance_ok,
        environment_ok,
        congruence_ok,
        violated,
    };
    Ok((decide(&report), report))
}
