//! Deterministic, partially observable household world.
//!
//! A [`WorldState`] is a set of objects, a placement relation (`In` / `On`)
//! forming a forest, the agent's location anchor and a single gripper slot.
//! Objects inside a closed container (transitively) are hidden from the
//! [`Observation`] handed to planners. Every operation here is a pure function
//! of its inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of an object in a world.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(String);

impl ObjectId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ObjectId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Graspable,
    Openable,
    Surface,
    Container,
}

impl Flag {
    fn as_str(self) -> &'static str {
        match self {
            Flag::Graspable => "graspable",
            Flag::Openable => "openable",
            Flag::Surface => "surface",
            Flag::Container => "container",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: ObjectId,
    pub class: String,
    pub flags: BTreeSet<Flag>,
    /// `Some` exactly when the object is openable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_open: Option<bool>,
}

impl ObjectInstance {
    pub fn has(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }

    /// Containers that are not openable count as always open.
    pub fn is_closed(&self) -> bool {
        self.is_open == Some(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParentRel {
    In,
    On,
}

impl ParentRel {
    pub fn as_str(self) -> &'static str {
        match self {
            ParentRel::In => "In",
            ParentRel::On => "On",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub rel: ParentRel,
    pub parent: ObjectId,
}

/// The six primitive actions of the embodiment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveAction {
    Walk { target: ObjectId },
    Grasp { obj: ObjectId },
    PutOn { obj: ObjectId, surface: ObjectId },
    PutIn { obj: ObjectId, container: ObjectId },
    Open { container: ObjectId },
    Close { container: ObjectId },
}

impl PrimitiveAction {
    /// Position of the variant in the canonical action order.
    fn variant_rank(&self) -> u8 {
        match self {
            PrimitiveAction::Walk { .. } => 0,
            PrimitiveAction::Grasp { .. } => 1,
            PrimitiveAction::PutOn { .. } => 2,
            PrimitiveAction::PutIn { .. } => 3,
            PrimitiveAction::Open { .. } => 4,
            PrimitiveAction::Close { .. } => 5,
        }
    }

    pub fn ids(&self) -> Vec<&ObjectId> {
        match self {
            PrimitiveAction::Walk { target } => vec![target],
            PrimitiveAction::Grasp { obj } => vec![obj],
            PrimitiveAction::PutOn { obj, surface } => vec![obj, surface],
            PrimitiveAction::PutIn { obj, container } => vec![obj, container],
            PrimitiveAction::Open { container } | PrimitiveAction::Close { container } => {
                vec![container]
            }
        }
    }
}

/// Id-based rendering, accepted back by the action grammar.
impl fmt::Display for PrimitiveAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrimitiveAction::Walk { target } => write!(f, "walk to {target}"),
            PrimitiveAction::Grasp { obj } => write!(f, "grasp {obj}"),
            PrimitiveAction::PutOn { obj, surface } => write!(f, "put {obj} on {surface}"),
            PrimitiveAction::PutIn { obj, container } => write!(f, "put {obj} in {container}"),
            PrimitiveAction::Open { container } => write!(f, "open {container}"),
            PrimitiveAction::Close { container } => write!(f, "close {container}"),
        }
    }
}

/// Capabilities of the robot executing primitive actions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Embodiment {
    gripper_capacity: usize,
}

impl Default for Embodiment {
    fn default() -> Self {
        Self::single_arm()
    }
}

impl Embodiment {
    pub fn single_arm() -> Self {
        Self { gripper_capacity: 1 }
    }

    pub fn gripper_capacity(&self) -> usize {
        self.gripper_capacity
    }

    pub fn digest(&self) -> String {
        format!(
            "gripper capacity: {}\nreach: targets sharing the agent's location anchor\n\
             manipulation (grasp, open, close) requires an empty gripper",
            self.gripper_capacity
        )
    }
}

/// Name of a rule that a proposed action or subgoal violates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    NotVisible,
    NotReachable,
    GripperOccupied,
    GripperEmpty,
    ContainerClosed,
    WrongFlag,
    AlreadyInState,
    UnknownObject,
    Incongruent,
    Unmappable,
    NoRecipe,
    ReplanBudget,
}

impl Rule {
    /// Failures caused by the embodiment's capabilities.
    pub fn is_affordance(self) -> bool {
        matches!(self, Rule::GripperOccupied | Rule::GripperEmpty | Rule::WrongFlag)
    }

    /// Failures caused by a missing prerequisite step in the environment.
    pub fn is_ordering(self) -> bool {
        matches!(self, Rule::NotVisible | Rule::NotReachable | Rule::ContainerClosed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Rule::NotVisible => "NotVisible",
            Rule::NotReachable => "NotReachable",
            Rule::GripperOccupied => "GripperOccupied",
            Rule::GripperEmpty => "GripperEmpty",
            Rule::ContainerClosed => "ContainerClosed",
            Rule::WrongFlag => "WrongFlag",
            Rule::AlreadyInState => "AlreadyInState",
            Rule::UnknownObject => "UnknownObject",
            Rule::Incongruent => "Incongruent",
            Rule::Unmappable => "Unmappable",
            Rule::NoRecipe => "NoRecipe",
            Rule::ReplanBudget => "ReplanBudget",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionError {
    #[error("NotVisible: {0} is hidden from the agent")]
    NotVisible(ObjectId),
    #[error("NotReachable: {0} does not share the agent's anchor")]
    NotReachable(ObjectId),
    #[error("GripperOccupied: gripper already holds {0}")]
    GripperOccupied(ObjectId),
    #[error("GripperEmpty: gripper does not hold {0}")]
    GripperEmpty(ObjectId),
    #[error("ContainerClosed: {0} is closed")]
    ContainerClosed(ObjectId),
    #[error("WrongFlag: {0} is not {1}")]
    WrongFlag(ObjectId, &'static str),
    #[error("AlreadyInState: {0}")]
    AlreadyInState(ObjectId),
    #[error("UnknownObject: {0}")]
    UnknownObject(ObjectId),
}

impl ActionError {
    pub fn rule(&self) -> Rule {
        match self {
            ActionError::NotVisible(_) => Rule::NotVisible,
            ActionError::NotReachable(_) => Rule::NotReachable,
            ActionError::GripperOccupied(_) => Rule::GripperOccupied,
            ActionError::GripperEmpty(_) => Rule::GripperEmpty,
            ActionError::ContainerClosed(_) => Rule::ContainerClosed,
            ActionError::WrongFlag(..) => Rule::WrongFlag,
            ActionError::AlreadyInState(_) => Rule::AlreadyInState,
            ActionError::UnknownObject(_) => Rule::UnknownObject,
        }
    }
}

/// Outcome of one of the two precondition checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub ok: bool,
    pub violated: Option<Rule>,
}

impl Check {
    fn from_result(r: Result<(), ActionError>) -> Self {
        match r {
            Ok(()) => Check { ok: true, violated: None },
            Err(e) => Check { ok: false, violated: Some(e.rule()) },
        }
    }
}

#[derive(Debug, Error)]
pub enum WorldError {
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

fn invalid(path: impl Into<String>, msg: impl Into<String>) -> WorldError {
    WorldError::Invalid { path: path.into(), msg: msg.into() }
}

/// On-disk world definition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub objects: Vec<ObjectInstance>,
    #[serde(default)]
    pub relations: Vec<(ObjectId, ParentRel, ObjectId)>,
    pub agent_at: ObjectId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held: Option<ObjectId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "WorldFile", into = "WorldFile")]
pub struct WorldState {
    objects: BTreeMap<ObjectId, ObjectInstance>,
    placements: BTreeMap<ObjectId, Placement>,
    agent_at: ObjectId,
    held: Option<ObjectId>,
}

impl TryFrom<WorldFile> for WorldState {
    type Error = WorldError;

    fn try_from(file: WorldFile) -> Result<Self, WorldError> {
        WorldState::from_file(file)
    }
}

impl From<WorldState> for WorldFile {
    fn from(state: WorldState) -> Self {
        WorldFile {
            objects: state.objects.into_values().collect(),
            relations: state.placements.into_iter().map(|(child, p)| (child, p.rel, p.parent)).collect(),
            agent_at: state.agent_at,
            held: state.held,
        }
    }
}

impl WorldState {
    /// Builds a state from a world definition, checking every invariant.
    pub fn from_file(file: WorldFile) -> Result<Self, WorldError> {
        let mut objects = BTreeMap::new();
        for (i, obj) in file.objects.into_iter().enumerate() {
            let path = format!("objects[{i}]");
            if obj.id.as_str().trim().is_empty() {
                return Err(invalid(format!("{path}.id"), "empty id"));
            }
            if obj.class.trim().is_empty() {
                return Err(invalid(format!("{path}.class"), "empty class"));
            }
            if obj.has(Flag::Openable) && !obj.has(Flag::Container) {
                return Err(invalid(format!("{path}.flags"), "openable requires container"));
            }
            if obj.has(Flag::Graspable) && (obj.has(Flag::Surface) || obj.has(Flag::Container)) {
                return Err(invalid(format!("{path}.flags"), "graspable objects cannot be surfaces or containers"));
            }
            match (obj.has(Flag::Openable), obj.is_open) {
                (true, None) => return Err(invalid(format!("{path}.is_open"), "required for openable objects")),
                (false, Some(_)) => {
                    return Err(invalid(format!("{path}.is_open"), "only openable objects have is_open"))
                }
                _ => {}
            }
            if objects.contains_key(&obj.id) {
                return Err(invalid(format!("{path}.id"), format!("duplicate id {}", obj.id)));
            }
            objects.insert(obj.id.clone(), obj);
        }

        let mut placements = BTreeMap::new();
        for (i, (child, rel, parent)) in file.relations.into_iter().enumerate() {
            let path = format!("relations[{i}]");
            let Some(_) = objects.get(&child) else {
                return Err(invalid(format!("{path}[0]"), format!("unknown object {child}")));
            };
            let Some(parent_obj) = objects.get(&parent) else {
                return Err(invalid(format!("{path}[2]"), format!("unknown object {parent}")));
            };
            if child == parent {
                return Err(invalid(path, "object placed relative to itself"));
            }
            let needed = match rel {
                ParentRel::In => Flag::Container,
                ParentRel::On => Flag::Surface,
            };
            if !parent_obj.has(needed) {
                return Err(invalid(format!("{path}[2]"), format!("{parent} is not a {}", needed.as_str())));
            }
            if placements.contains_key(&child) {
                return Err(invalid(format!("{path}[0]"), format!("{child} already placed")));
            }
            placements.insert(child, Placement { rel, parent });
        }

        if let Some(held) = &file.held {
            let Some(obj) = objects.get(held) else {
                return Err(invalid("held", format!("unknown object {held}")));
            };
            if !obj.has(Flag::Graspable) {
                return Err(invalid("held", format!("{held} is not graspable")));
            }
            if placements.contains_key(held) {
                return Err(invalid("held", format!("{held} is both held and placed")));
            }
        }

        let Some(anchor) = objects.get(&file.agent_at) else {
            return Err(invalid("agent_at", format!("unknown object {}", file.agent_at)));
        };
        if anchor.has(Flag::Graspable) {
            return Err(invalid("agent_at", "the agent cannot stand at a graspable object"));
        }

        let state = WorldState { objects, placements, agent_at: file.agent_at, held: file.held };
        for id in state.objects.keys() {
            let mut seen = BTreeSet::new();
            let mut cur = id;
            while let Some(p) = state.placements.get(cur) {
                if !seen.insert(cur) {
                    return Err(invalid("relations", format!("containment cycle through {id}")));
                }
                cur = &p.parent;
            }
        }
        Ok(state)
    }

    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        let file: WorldFile =
            serde_json::from_str(text).map_err(|source| WorldError::Json { path: "world".into(), source })?;
        Self::from_file(file)
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| WorldError::Io { path: path.display().to_string(), source })?;
        let file: WorldFile = serde_json::from_str(&text)
            .map_err(|source| WorldError::Json { path: path.display().to_string(), source })?;
        Self::from_file(file).map_err(|e| match e {
            WorldError::Invalid { path: p, msg } => invalid(format!("{}: {p}", path.display()), msg),
            other => other,
        })
    }

    pub fn objects(&self) -> &BTreeMap<ObjectId, ObjectInstance> {
        &self.objects
    }

    pub fn object(&self, id: &ObjectId) -> Option<&ObjectInstance> {
        self.objects.get(id)
    }

    pub fn placement(&self, id: &ObjectId) -> Option<&Placement> {
        self.placements.get(id)
    }

    pub fn relations(&self) -> impl Iterator<Item = (&ObjectId, ParentRel, &ObjectId)> {
        self.placements.iter().map(|(c, p)| (c, p.rel, &p.parent))
    }

    pub fn agent_at(&self) -> &ObjectId {
        &self.agent_at
    }

    pub fn held(&self) -> Option<&ObjectId> {
        self.held.as_ref()
    }

    /// Topmost ancestor of `id` in the placement forest.
    pub fn root_anchor<'a>(&'a self, id: &'a ObjectId) -> &'a ObjectId {
        root_of(&self.placements, id)
    }

    pub fn is_visible(&self, id: &ObjectId) -> bool {
        hidden_by_closed(&self.objects, &self.placements, id).is_none()
    }

    fn reachable(&self, id: &ObjectId) -> bool {
        self.root_anchor(id) == self.root_anchor(&self.agent_at)
    }

    /// Location the agent ends up at when walking to `target`.
    fn walk_destination<'a>(&'a self, target: &'a ObjectId) -> &'a ObjectId {
        walk_destination(&self.objects, &self.placements, target)
    }
}

fn root_of<'a>(placements: &'a BTreeMap<ObjectId, Placement>, id: &'a ObjectId) -> &'a ObjectId {
    let mut cur = id;
    while let Some(p) = placements.get(cur) {
        cur = &p.parent;
    }
    cur
}

/// Returns the closed container hiding `id`, if any.
fn hidden_by_closed<'a>(
    objects: &'a BTreeMap<ObjectId, ObjectInstance>,
    placements: &'a BTreeMap<ObjectId, Placement>,
    id: &'a ObjectId,
) -> Option<&'a ObjectId> {
    let mut cur = id;
    while let Some(p) = placements.get(cur) {
        if p.rel == ParentRel::In && objects.get(&p.parent).is_some_and(|o| o.is_closed()) {
            return Some(&p.parent);
        }
        cur = &p.parent;
    }
    None
}

fn walk_destination<'a>(
    objects: &'a BTreeMap<ObjectId, ObjectInstance>,
    placements: &'a BTreeMap<ObjectId, Placement>,
    target: &'a ObjectId,
) -> &'a ObjectId {
    // Graspable objects are never parents, so their placement parent is a location.
    match (objects.get(target), placements.get(target)) {
        (Some(o), Some(p)) if o.has(Flag::Graspable) => &p.parent,
        _ => target,
    }
}

/// What the agent perceives: the state minus the contents of closed containers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub visible: BTreeMap<ObjectId, ObjectInstance>,
    pub visible_relations: BTreeMap<ObjectId, Placement>,
    pub agent_at: ObjectId,
    pub held: Option<ObjectId>,
}

impl Observation {
    /// An observation with nothing hidden; used where grounding may see the full state.
    pub fn omniscient(state: &WorldState) -> Self {
        Observation {
            visible: state.objects.clone(),
            visible_relations: state.placements.clone(),
            agent_at: state.agent_at.clone(),
            held: state.held.clone(),
        }
    }

    pub fn root_anchor<'a>(&'a self, id: &'a ObjectId) -> &'a ObjectId {
        root_of(&self.visible_relations, id)
    }

    pub fn walk_destination<'a>(&'a self, target: &'a ObjectId) -> &'a ObjectId {
        walk_destination(&self.visible, &self.visible_relations, target)
    }

    /// Canonical text rendering, sorted by object id.
    pub fn digest(&self) -> String {
        let mut out = format!("agent at: {}\n", self.agent_at);
        match &self.held {
            Some(h) => out.push_str(&format!("holding: {h}\n")),
            None => out.push_str("holding: nothing\n"),
        }
        out.push_str("objects:\n");
        for (id, obj) in &self.visible {
            out.push_str(&format!("- {id} ({})", obj.class));
            for flag in &obj.flags {
                out.push(' ');
                out.push_str(flag.as_str());
            }
            match obj.is_open {
                Some(true) => out.push_str(" open"),
                Some(false) => out.push_str(" closed"),
                None => {}
            }
            if let Some(p) = self.visible_relations.get(id) {
                let rel = match p.rel {
                    ParentRel::In => "in",
                    ParentRel::On => "on",
                };
                out.push_str(&format!("; {rel} {}", p.parent));
            }
            if self.held.as_ref() == Some(id) {
                out.push_str("; held");
            }
            out.push('\n');
        }
        out
    }
}

/// Objects predicates refer to; used by [`goal_satisfied`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalPredicate {
    Placed(ObjectId, ParentRel, ObjectId),
    OpenState(ObjectId, bool),
}

impl GoalPredicate {
    pub fn ids(&self) -> Vec<&ObjectId> {
        match self {
            GoalPredicate::Placed(a, _, b) => vec![a, b],
            GoalPredicate::OpenState(c, _) => vec![c],
        }
    }

    /// The single primitive action that establishes this predicate.
    pub fn establishing_action(&self) -> PrimitiveAction {
        match self {
            GoalPredicate::Placed(o, ParentRel::On, s) => PrimitiveAction::PutOn { obj: o.clone(), surface: s.clone() },
            GoalPredicate::Placed(o, ParentRel::In, c) => {
                PrimitiveAction::PutIn { obj: o.clone(), container: c.clone() }
            }
            GoalPredicate::OpenState(c, true) => PrimitiveAction::Open { container: c.clone() },
            GoalPredicate::OpenState(c, false) => PrimitiveAction::Close { container: c.clone() },
        }
    }
}

impl fmt::Display for GoalPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GoalPredicate::Placed(a, rel, b) => write!(f, "Placed({a}, {}, {b})", rel.as_str()),
            GoalPredicate::OpenState(c, open) => write!(f, "OpenState({c}, {open})"),
        }
    }
}

pub fn observe(state: &WorldState) -> Observation {
    let visible: BTreeMap<_, _> =
        state.objects.iter().filter(|(id, _)| state.is_visible(id)).map(|(id, o)| (id.clone(), o.clone())).collect();
    let visible_relations = state
        .placements
        .iter()
        .filter(|(child, _)| visible.contains_key(*child))
        .map(|(c, p)| (c.clone(), p.clone()))
        .collect();
    Observation { visible, visible_relations, agent_at: state.agent_at.clone(), held: state.held.clone() }
}

fn require<'a>(state: &'a WorldState, id: &ObjectId) -> Result<&'a ObjectInstance, ActionError> {
    state.objects.get(id).ok_or_else(|| ActionError::UnknownObject(id.clone()))
}

fn gripper_holds(state: &WorldState, obj: &ObjectId) -> Result<(), ActionError> {
    match &state.held {
        None => Err(ActionError::GripperEmpty(obj.clone())),
        Some(h) if h == obj => Ok(()),
        Some(h) => Err(ActionError::GripperOccupied(h.clone())),
    }
}

fn gripper_free(state: &WorldState) -> Result<(), ActionError> {
    match &state.held {
        None => Ok(()),
        Some(h) => Err(ActionError::GripperOccupied(h.clone())),
    }
}

fn flag_of(state: &WorldState, id: &ObjectId, flag: Flag) -> Result<(), ActionError> {
    // Unknown ids are an environment failure, not an embodiment one.
    match state.objects.get(id) {
        Some(o) if !o.has(flag) => Err(ActionError::WrongFlag(id.clone(), flag.as_str())),
        _ => Ok(()),
    }
}

fn embodiment_rules(state: &WorldState, emb: &Embodiment, action: &PrimitiveAction) -> Result<(), ActionError> {
    debug_assert_eq!(emb.gripper_capacity(), 1);
    match action {
        PrimitiveAction::Walk { .. } => Ok(()),
        PrimitiveAction::Grasp { obj } => {
            gripper_free(state)?;
            flag_of(state, obj, Flag::Graspable)
        }
        PrimitiveAction::PutOn { obj, surface } => {
            gripper_holds(state, obj)?;
            flag_of(state, surface, Flag::Surface)
        }
        PrimitiveAction::PutIn { obj, container } => {
            gripper_holds(state, obj)?;
            flag_of(state, container, Flag::Container)
        }
        PrimitiveAction::Open { container } | PrimitiveAction::Close { container } => {
            gripper_free(state)?;
            flag_of(state, container, Flag::Openable)
        }
    }
}

fn visible_and_reachable(state: &WorldState, id: &ObjectId) -> Result<(), ActionError> {
    require(state, id)?;
    if !state.is_visible(id) {
        return Err(ActionError::NotVisible(id.clone()));
    }
    if !state.reachable(id) {
        return Err(ActionError::NotReachable(id.clone()));
    }
    Ok(())
}

fn environment_rules(state: &WorldState, action: &PrimitiveAction) -> Result<(), ActionError> {
    match action {
        PrimitiveAction::Walk { target } => {
            require(state, target)?;
            if !state.is_visible(target) {
                return Err(ActionError::NotVisible(target.clone()));
            }
            if state.held.as_ref() == Some(target) || state.walk_destination(target) == &state.agent_at {
                return Err(ActionError::AlreadyInState(target.clone()));
            }
            Ok(())
        }
        PrimitiveAction::Grasp { obj } => {
            if state.held.as_ref() == Some(obj) {
                return Ok(());
            }
            visible_and_reachable(state, obj)
        }
        PrimitiveAction::PutOn { obj, surface } => {
            require(state, obj)?;
            visible_and_reachable(state, surface)
        }
        PrimitiveAction::PutIn { obj, container } => {
            require(state, obj)?;
            visible_and_reachable(state, container)?;
            if state.objects[container].is_closed() {
                return Err(ActionError::ContainerClosed(container.clone()));
            }
            Ok(())
        }
        PrimitiveAction::Open { container } => {
            visible_and_reachable(state, container)?;
            if state.objects[container].is_open == Some(true) {
                return Err(ActionError::AlreadyInState(container.clone()));
            }
            Ok(())
        }
        PrimitiveAction::Close { container } => {
            visible_and_reachable(state, container)?;
            if state.objects[container].is_open == Some(false) {
                return Err(ActionError::AlreadyInState(container.clone()));
            }
            Ok(())
        }
    }
}

/// Embodiment-related preconditions: gripper occupancy and object flags.
pub fn affordance_allows(state: &WorldState, emb: &Embodiment, action: &PrimitiveAction) -> Check {
    Check::from_result(embodiment_rules(state, emb, action))
}

/// State-related preconditions: existence, visibility, reach and openness.
pub fn legal_in_environment(state: &WorldState, action: &PrimitiveAction) -> Check {
    Check::from_result(environment_rules(state, action))
}

pub fn apply_action(state: &WorldState, action: &PrimitiveAction, emb: &Embodiment) -> Result<WorldState, ActionError> {
    embodiment_rules(state, emb, action)?;
    environment_rules(state, action)?;
    let mut next = state.clone();
    match action {
        PrimitiveAction::Walk { target } => {
            next.agent_at = state.walk_destination(target).clone();
        }
        PrimitiveAction::Grasp { obj } => {
            next.placements.remove(obj);
            next.held = Some(obj.clone());
        }
        PrimitiveAction::PutOn { obj, surface } => {
            next.held = None;
            next.placements.insert(obj.clone(), Placement { rel: ParentRel::On, parent: surface.clone() });
        }
        PrimitiveAction::PutIn { obj, container } => {
            next.held = None;
            next.placements.insert(obj.clone(), Placement { rel: ParentRel::In, parent: container.clone() });
        }
        PrimitiveAction::Open { container } => {
            next.objects.get_mut(container).expect("checked").is_open = Some(true);
        }
        PrimitiveAction::Close { container } => {
            next.objects.get_mut(container).expect("checked").is_open = Some(false);
        }
    }
    Ok(next)
}

pub fn goal_satisfied(state: &WorldState, pred: &GoalPredicate) -> Result<bool, ActionError> {
    for id in pred.ids() {
        require(state, id)?;
    }
    Ok(match pred {
        GoalPredicate::Placed(obj, rel, parent) => {
            state.placements.get(obj).is_some_and(|p| p.rel == *rel && &p.parent == parent)
        }
        GoalPredicate::OpenState(c, open) => state.objects[c].is_open == Some(*open),
    })
}

/// All actions that would succeed, in canonical order (variant, then ids).
pub fn legal_actions(state: &WorldState, emb: &Embodiment) -> Vec<PrimitiveAction> {
    let ids: Vec<&ObjectId> = state.objects.keys().collect();
    let mut candidates = Vec::new();
    for &t in &ids {
        candidates.push(PrimitiveAction::Walk { target: t.clone() });
    }
    for &o in &ids {
        candidates.push(PrimitiveAction::Grasp { obj: o.clone() });
    }
    if let Some(h) = &state.held {
        for &s in &ids {
            candidates.push(PrimitiveAction::PutOn { obj: h.clone(), surface: s.clone() });
        }
        for &c in &ids {
            candidates.push(PrimitiveAction::PutIn { obj: h.clone(), container: c.clone() });
        }
    }
    for &c in &ids {
        candidates.push(PrimitiveAction::Open { container: c.clone() });
    }
    for &c in &ids {
        candidates.push(PrimitiveAction::Close { container: c.clone() });
    }
    candidates.retain(|a| embodiment_rules(state, emb, a).is_ok() && environment_rules(state, a).is_ok());
    debug_assert!(candidates.windows(2).all(|w| canonical_cmp(&w[0], &w[1]).is_lt()));
    candidates
}

/// Canonical action order: variant order, then ids lexicographically.
pub fn canonical_cmp(a: &PrimitiveAction, b: &PrimitiveAction) -> std::cmp::Ordering {
    a.variant_rank().cmp(&b.variant_rank()).then_with(|| a.ids().cmp(&b.ids()))
}
