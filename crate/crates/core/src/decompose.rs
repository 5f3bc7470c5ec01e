//! Subgoal decomposition: context construction and decomposition policies.
//!
//! A policy sees a [`DecompositionContext`] and answers with the next subgoal
//! for the focus node, or with [`DecomposerOutput::EndOfSiblings`]. Policies
//! are stateless; any progress through a recipe is recovered from the
//! context's prior steps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{self, Phrase};
use crate::tree::{NodeId, SubgoalTree, TreeError};
use crate::world::{Embodiment, Observation, ParentRel};

/// Which conditioning terms the decomposer receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContextMode {
    /// Parent node plus completed left siblings.
    #[serde(rename = "full")]
    FullStep,
    /// Parent node plus every executed leaf.
    #[serde(rename = "no-tree")]
    NoTreeStructure,
    /// Root instruction plus every executed leaf.
    #[serde(rename = "no-subgoal-tree")]
    NoSubgoalTree,
    /// Root instruction plus the executed action history, no tree at all.
    #[serde(rename = "flat")]
    FlatBaseline,
}

impl ContextMode {
    pub const ALL: [ContextMode; 4] =
        [ContextMode::FullStep, ContextMode::NoTreeStructure, ContextMode::NoSubgoalTree, ContextMode::FlatBaseline];

    pub fn as_str(self) -> &'static str {
        match self {
            ContextMode::FullStep => "full",
            ContextMode::NoTreeStructure => "no-tree",
            ContextMode::NoSubgoalTree => "no-subgoal-tree",
            ContextMode::FlatBaseline => "flat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecompositionContext {
    pub mode: ContextMode,
    pub focus_text: String,
    pub prior_steps: Vec<String>,
    pub observation_digest: String,
    pub embodiment_digest: String,
    pub observation: Observation,
}

/// The serializable part of a context, as written to traces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub mode: ContextMode,
    pub focus: String,
    pub prior: Vec<String>,
    pub observation: String,
    pub embodiment: String,
}

impl DecompositionContext {
    pub fn record(&self) -> ContextRecord {
        ContextRecord {
            mode: self.mode,
            focus: self.focus_text.clone(),
            prior: self.prior_steps.clone(),
            observation: self.observation_digest.clone(),
            embodiment: self.embodiment_digest.clone(),
        }
    }

    /// Canonical text form; also the user message of LLM prompts.
    pub fn render(&self) -> String {
        let (focus_label, prior_label) = match self.mode {
            ContextMode::FullStep => ("parent task", "completed steps at this level"),
            ContextMode::NoTreeStructure => ("parent task", "executed steps so far"),
            ContextMode::NoSubgoalTree => ("instruction", "executed steps so far"),
            ContextMode::FlatBaseline => ("instruction", "executed actions so far"),
        };
        let mut out = format!("mode: {}\n{focus_label}: {}\n{prior_label}:\n", self.mode.as_str(), self.focus_text);
        if self.prior_steps.is_empty() {
            out.push_str("(none)\n");
        }
        for (i, p) in self.prior_steps.iter().enumerate() {
            out.push_str(&format!("{}. {p}\n", i + 1));
        }
        out.push_str("observation:\n");
        out.push_str(&self.observation_digest);
        out.push_str("embodiment:\n");
        out.push_str(&self.embodiment_digest);
        out.push('\n');
        out
    }
}

/// Builds the decomposer's input for the next child of `focus`.
pub fn build_context(
    tree: &SubgoalTree,
    focus: NodeId,
    observation: &Observation,
    embodiment: &Embodiment,
    mode: ContextMode,
    history: &[String],
) -> Result<DecompositionContext, TreeError> {
    let leaf_texts = || tree.executed_leaves().into_iter().map(|n| n.text.clone()).collect::<Vec<_>>();
    let root_text = || tree.node(tree.root()).map(|n| n.text.clone());
    let (focus_text, prior_steps) = match mode {
        ContextMode::FullStep => (
            tree.node(focus)?.text.clone(),
            tree.completed_children(focus)?.into_iter().map(|n| n.text.clone()).collect(),
        ),
        ContextMode::NoTreeStructure => (tree.node(focus)?.text.clone(), leaf_texts()),
        ContextMode::NoSubgoalTree => (root_text()?, leaf_texts()),
        ContextMode::FlatBaseline => (root_text()?, history.to_vec()),
    };
    Ok(DecompositionContext {
        mode,
        focus_text,
        prior_steps,
        observation_digest: observation.digest(),
        embodiment_digest: embodiment.digest(),
        observation: observation.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecomposerOutput {
    Subgoal(String),
    EndOfSiblings,
}

/// A policy answer with the number of format re-asks it took.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub output: DecomposerOutput,
    pub retries: u32,
}

impl Reply {
    pub fn direct(output: DecomposerOutput) -> Self {
        Reply { output, retries: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyError {
    #[error("unparseable policy output after {retries} retries: {raw:?}")]
    Grammar { raw: String, retries: u32 },
    #[error("no recipe matches {0:?}")]
    NoRecipeMatch(String),
    #[error("backend unavailable: {0}")]
    Backend(String),
}

pub trait DecompositionPolicy: Send + Sync {
    fn next_subgoal(&self, ctx: &DecompositionContext) -> Result<Reply, PolicyError>;
}

/// Asks `policy` for the next subgoal, rejecting empty subgoal text.
pub fn next_subgoal(policy: &dyn DecompositionPolicy, ctx: &DecompositionContext) -> Result<Reply, PolicyError> {
    let reply = policy.next_subgoal(ctx)?;
    if let DecomposerOutput::Subgoal(text) = &reply.output {
        if text.trim().is_empty() {
            return Err(PolicyError::Grammar { raw: text.clone(), retries: reply.retries });
        }
    }
    Ok(reply)
}

// ---------------------------------------------------------------------------
// Recipes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipeFile {
    pub recipes: Vec<RecipeSpec>,
    /// Group names usable in slot values, mapped to member classes in binding order.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub categories: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipeSpec {
    /// Template with `{slot}` placeholders. A slot never spans a comma.
    pub head: String,
    #[serde(default)]
    pub steps: Vec<StepSpec>,
    #[serde(default)]
    pub per_binding: bool,
    #[serde(default)]
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSpec {
    Plain(String),
    Guarded {
        text: String,
        #[serde(rename = "if")]
        guard: String,
    },
}

#[derive(Debug, Error)]
pub enum RecipeError {
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
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GuardKind {
    /// The agent is not already standing where walking to the target leads.
    Away,
    /// The target does not share the agent's anchor.
    Unreachable,
    Closed,
    Open,
    /// No visible object answers to the name.
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Guard {
    kind: GuardKind,
    target: String,
}

impl Guard {
    fn parse(text: &str) -> Option<Guard> {
        let (kind, target) = text.trim().split_once(' ')?;
        let kind = match kind {
            "away" => GuardKind::Away,
            "unreachable" => GuardKind::Unreachable,
            "closed" => GuardKind::Closed,
            "open" => GuardKind::Open,
            "hidden" => GuardKind::Hidden,
            _ => return None,
        };
        Some(Guard { kind, target: target.trim().to_string() })
    }

    fn holds(&self, obs: &Observation) -> bool {
        let name = self.target.as_str();
        let resolved = grammar::ground_unique(name, obs);
        match self.kind {
            GuardKind::Hidden => grammar::ground_name(name, obs).is_empty(),
            GuardKind::Closed => resolved.is_some_and(|id| obs.visible[id].is_open == Some(false)),
            GuardKind::Open => resolved.is_some_and(|id| obs.visible[id].is_open == Some(true)),
            GuardKind::Away => resolved.is_none_or(|id| obs.walk_destination(id) != &obs.agent_at),
            GuardKind::Unreachable => resolved.is_none_or(|id| obs.root_anchor(id) != obs.root_anchor(&obs.agent_at)),
        }
    }
}

#[derive(Debug, Clone)]
struct StepTemplate {
    text: String,
    guard: Option<Guard>,
}

#[derive(Debug, Clone)]
struct Recipe {
    pattern: Regex,
    slots: Vec<String>,
    steps: Vec<StepTemplate>,
    per_binding: bool,
    terminal: bool,
}

/// A concrete step with every guard inherited from enclosing recipes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub text: String,
    guards: Vec<Guard>,
}

impl Step {
    fn ready(&self, obs: &Observation) -> bool {
        self.guards.iter().all(|g| g.holds(obs))
    }
}

/// Effect atom of a primitive phrase, compared at the level of names.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Effect {
    At(String),
    Holding(String),
    Placed(String, ParentRel, String),
    Opened(String),
    Closed(String),
}

impl Effect {
    fn of(phrase: &Phrase) -> Effect {
        match phrase.clone() {
            Phrase::Walk(t) => Effect::At(t),
            Phrase::Grasp(o) => Effect::Holding(o),
            Phrase::Put(o, rel, p) => Effect::Placed(o, rel, p),
            Phrase::Open(c) => Effect::Opened(c),
            Phrase::Close(c) => Effect::Closed(c),
        }
    }
}

const MAX_NESTING: usize = 12;

fn slot_regex() -> Regex {
    Regex::new(r"\{([a-z_][a-z0-9_]*)\}").expect("static regex")
}

/// Compiled recipe table.
#[derive(Debug, Clone)]
pub struct RecipeTable {
    spec: RecipeFile,
    recipes: Vec<Recipe>,
}

type Bindings = BTreeMap<String, String>;

impl RecipeTable {
    pub fn new(spec: RecipeFile) -> Result<Self, RecipeError> {
        let slot_re = slot_regex();
        let mut recipes = Vec::with_capacity(spec.recipes.len());
        for (i, r) in spec.recipes.iter().enumerate() {
            let path = format!("recipes[{i}]");
            let head = grammar::normalize(&r.head);
            if head.is_empty() {
                return Err(RecipeError::Invalid { path: format!("{path}.head"), msg: "empty head".into() });
            }
            let mut pattern = String::from("^");
            let mut slots = Vec::new();
            let mut last = 0;
            for cap in slot_re.captures_iter(&head) {
                let m = cap.get(0).expect("whole match");
                pattern.push_str(&regex::escape(&head[last..m.start()]));
                pattern.push_str("([^,]+?)");
                slots.push(cap[1].to_string());
                last = m.end();
            }
            pattern.push_str(&regex::escape(&head[last..]));
            pattern.push('$');
            let pattern = Regex::new(&pattern)
                .map_err(|e| RecipeError::Invalid { path: format!("{path}.head"), msg: e.to_string() })?;
            if r.per_binding && slots.is_empty() {
                return Err(RecipeError::Invalid {
                    path: format!("{path}.per_binding"),
                    msg: "per_binding needs at least one slot".into(),
                });
            }
            let mut steps = Vec::new();
            for (k, s) in r.steps.iter().enumerate() {
                let (text, guard) = match s {
                    StepSpec::Plain(t) => (t.as_str(), None),
                    StepSpec::Guarded { text, guard } => {
                        let g = Guard::parse(&grammar::normalize(guard)).ok_or_else(|| RecipeError::Invalid {
                            path: format!("{path}.steps[{k}].if"),
                            msg: format!("unknown guard {guard:?}"),
                        })?;
                        (text.as_str(), Some(g))
                    }
                };
                let text = grammar::normalize(text);
                let all_text = format!("{text} {}", guard.as_ref().map(|g| g.target.as_str()).unwrap_or(""));
                for cap in slot_re.captures_iter(&all_text) {
                    if !slots.iter().any(|s| s == &cap[1]) {
                        return Err(RecipeError::Invalid {
                            path: format!("{path}.steps[{k}]"),
                            msg: format!("slot {{{}}} is not bound by the head", &cap[1]),
                        });
                    }
                }
                steps.push(StepTemplate { text, guard });
            }
            recipes.push(Recipe { pattern, slots, steps, per_binding: r.per_binding, terminal: r.terminal });
        }
        Ok(RecipeTable { spec, recipes })
    }

    pub fn from_json(text: &str) -> Result<Self, RecipeError> {
        let spec = serde_json::from_str(text).map_err(|source| RecipeError::Json { path: "recipes".into(), source })?;
        Self::new(spec)
    }

    pub fn load(path: &Path) -> Result<Self, RecipeError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| RecipeError::Io { path: p.clone(), source })?;
        let spec = serde_json::from_str(&text).map_err(|source| RecipeError::Json { path: p, source })?;
        Self::new(spec)
    }

    pub fn spec(&self) -> &RecipeFile {
        &self.spec
    }

    /// Same recipes with the recipe order and every category's member order permuted.
    pub fn shuffled<R: Rng + ?Sized>(&self, rng: &mut R) -> RecipeTable {
        let mut spec = self.spec.clone();
        spec.recipes.shuffle(rng);
        for members in spec.categories.values_mut() {
            members.shuffle(rng);
        }
        RecipeTable::new(spec).expect("permutation of a valid table")
    }

    fn lookup(&self, text: &str) -> Option<(&Recipe, Bindings)> {
        let norm = grammar::normalize(text);
        self.recipes.iter().find_map(|r| {
            let caps = r.pattern.captures(&norm)?;
            let bindings = r.slots.iter().enumerate().map(|(i, s)| (s.clone(), caps[i + 1].to_string())).collect();
            Some((r, bindings))
        })
    }

    /// Whether `text` matches a terminal (primitive-phrase) recipe.
    pub fn is_terminal(&self, text: &str) -> Option<bool> {
        self.lookup(text).map(|(r, _)| r.terminal)
    }

    /// Names a slot value stands for: category members visible now, or the literal parts.
    fn members(&self, value: &str, obs: &Observation) -> Vec<String> {
        let mut out = Vec::new();
        for part in value.split(" and ").flat_map(|p| p.split(',')).map(str::trim).filter(|p| !p.is_empty()) {
            match self.spec.categories.get(part) {
                Some(classes) => {
                    for class in classes {
                        for o in obs.visible.values().filter(|o| &o.class == class) {
                            out.push(grammar::display_name(&o.id, obs));
                        }
                    }
                }
                None => out.push(part.to_string()),
            }
        }
        out
    }

    fn substitute(template: &str, bindings: &Bindings) -> String {
        let mut text = template.to_string();
        for (slot, value) in bindings {
            text = text.replace(&format!("{{{slot}}}"), value);
        }
        grammar::normalize(&text)
    }

    fn instantiate(t: &StepTemplate, bindings: &Bindings) -> Step {
        let guards =
            t.guard.iter().map(|g| Guard { kind: g.kind, target: Self::substitute(&g.target, bindings) }).collect();
        Step { text: Self::substitute(&t.text, bindings), guards }
    }

    fn expand_recipe(&self, recipe: &Recipe, bindings: &Bindings, obs: &Observation) -> Vec<Step> {
        if !recipe.per_binding {
            return recipe.steps.iter().map(|t| Self::instantiate(t, bindings)).collect();
        }
        let slot = &recipe.slots[0];
        let marker = format!("{{{slot}}}");
        let mentions =
            |t: &StepTemplate| t.text.contains(&marker) || t.guard.as_ref().is_some_and(|g| g.target.contains(&marker));
        let first = recipe.steps.iter().position(mentions);
        let last = recipe.steps.iter().rposition(mentions);
        let (Some(first), Some(last)) = (first, last) else {
            return recipe.steps.iter().map(|t| Self::instantiate(t, bindings)).collect();
        };
        let mut out: Vec<Step> = recipe.steps[..first].iter().map(|t| Self::instantiate(t, bindings)).collect();
        for member in self.members(&bindings[slot], obs) {
            let mut b = bindings.clone();
            b.insert(slot.clone(), member);
            out.extend(recipe.steps[first..=last].iter().map(|t| Self::instantiate(t, &b)));
        }
        out.extend(recipe.steps[last + 1..].iter().map(|t| Self::instantiate(t, bindings)));
        out
    }

    /// One level of decomposition; `None` if no recipe matches, empty for terminal recipes.
    pub fn expand(&self, text: &str, obs: &Observation) -> Option<Vec<Step>> {
        let (recipe, bindings) = self.lookup(text)?;
        if recipe.terminal {
            return Some(Vec::new());
        }
        Some(self.expand_recipe(recipe, &bindings, obs))
    }

    /// Full decomposition down to primitive phrases.
    pub fn flatten(&self, text: &str, obs: &Observation) -> Option<Vec<Step>> {
        self.lookup(text)?;
        let mut out = Vec::new();
        self.flatten_into(Step { text: grammar::normalize(text), guards: Vec::new() }, obs, 0, &mut out, true);
        Some(out)
    }

    fn flatten_into(&self, step: Step, obs: &Observation, depth: usize, out: &mut Vec<Step>, top: bool) {
        let expanded = match self.lookup(&step.text) {
            Some((r, b)) if !r.terminal && depth < MAX_NESTING => self.expand_recipe(r, &b, obs),
            _ => {
                if !top {
                    out.push(step);
                }
                return;
            }
        };
        for child in expanded {
            let mut guards = step.guards.clone();
            guards.extend(child.guards.iter().cloned());
            self.flatten_into(Step { text: child.text, guards }, obs, depth + 1, out, false);
        }
    }

    /// Effects of a subgoal: its own atom for a primitive phrase, the union over
    /// its decomposition otherwise. `None` when the text is not understood.
    pub fn effects(&self, text: &str, obs: &Observation) -> Option<BTreeSet<Effect>> {
        self.effects_at(text, obs, 0)
    }

    fn effects_at(&self, text: &str, obs: &Observation, depth: usize) -> Option<BTreeSet<Effect>> {
        if let Some(p) = grammar::parse_phrases(text).first() {
            return Some(BTreeSet::from([Effect::of(p)]));
        }
        if depth >= MAX_NESTING {
            return None;
        }
        let steps = self.expand(text, obs)?;
        Some(steps.iter().filter_map(|s| self.effects_at(&s.text, obs, depth + 1)).flatten().collect())
    }

    /// Effects still owed by `parent` once `left_sibling` is done.
    pub fn remaining_effects(
        &self,
        parent: &str,
        left_sibling: Option<&str>,
        obs: &Observation,
    ) -> Option<BTreeSet<Effect>> {
        let steps = self.expand(parent, obs)?;
        if steps.is_empty() {
            return None;
        }
        let start = left_sibling
            .map(grammar::normalize)
            .and_then(|l| steps.iter().position(|s| s.text == l))
            .map_or(0, |p| p + 1);
        Some(steps[start..].iter().filter_map(|s| self.effects(&s.text, obs)).flatten().collect())
    }
}

/// Aligns `prior` as a subsequence of `steps` and returns the first ready step after it.
fn next_from(steps: &[Step], prior: &[String], obs: &Observation) -> DecomposerOutput {
    let mut j = 0;
    for p in prior {
        let p = grammar::normalize(p);
        if let Some(k) = steps[j..].iter().position(|s| s.text == p) {
            j += k + 1;
        }
    }
    steps[j..]
        .iter()
        .find(|s| s.ready(obs))
        .map_or(DecomposerOutput::EndOfSiblings, |s| DecomposerOutput::Subgoal(s.text.clone()))
}

/// Deterministic decomposer driven by a recipe table.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    table: RecipeTable,
}

impl ScriptedPolicy {
    pub fn new(table: RecipeTable) -> Self {
        Self { table }
    }

    pub fn table(&self) -> &RecipeTable {
        &self.table
    }
}

pub fn scripted_policy(recipes: RecipeTable) -> ScriptedPolicy {
    ScriptedPolicy::new(recipes)
}

impl DecompositionPolicy for ScriptedPolicy {
    fn next_subgoal(&self, ctx: &DecompositionContext) -> Result<Reply, PolicyError> {
        let obs = &ctx.observation;
        let steps = match ctx.mode {
            ContextMode::FlatBaseline => self.table.flatten(&ctx.focus_text, obs),
            _ => self.table.expand(&ctx.focus_text, obs),
        }
        .ok_or_else(|| PolicyError::NoRecipeMatch(ctx.focus_text.clone()))?;
        Ok(Reply::direct(next_from(&steps, &ctx.prior_steps, obs)))
    }
}

/// Flat policy that proposes a fixed list of action phrases in order.
#[derive(Debug, Clone)]
pub struct PlanReplayPolicy {
    steps: Vec<String>,
}

impl PlanReplayPolicy {
    pub fn new(steps: Vec<String>) -> Self {
        Self { steps }
    }
}

impl DecompositionPolicy for PlanReplayPolicy {
    fn next_subgoal(&self, ctx: &DecompositionContext) -> Result<Reply, PolicyError> {
        Ok(Reply::direct(match self.steps.get(ctx.prior_steps.len()) {
            Some(s) => DecomposerOutput::Subgoal(s.clone()),
            None => DecomposerOutput::EndOfSiblings,
        }))
    }
}
