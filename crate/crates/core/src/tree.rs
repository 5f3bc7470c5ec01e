//! Subgoal tree and the cursor that walks it left to right.
//!
//! Children are generated lazily: a node keeps asking the decomposer for its
//! next child until the decomposer signals the end of the sibling list, at
//! which point the node is marked `siblings_exhausted`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::PrimitiveAction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "action", rename_all = "snake_case")]
pub enum NodeStatus {
    Open,
    Expanding,
    /// Executed leaf carrying its primitive action.
    Leaf(PrimitiveAction),
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgoalNode {
    pub id: NodeId,
    pub text: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub status: NodeStatus,
    pub depth: usize,
    pub sibling_index: usize,
    pub siblings_exhausted: bool,
    pub replan_count: usize,
}

impl SubgoalNode {
    pub fn is_complete(&self) -> bool {
        matches!(self.status, NodeStatus::Done | NodeStatus::Leaf(_))
    }

    pub fn action(&self) -> Option<&PrimitiveAction> {
        match &self.status {
            NodeStatus::Leaf(a) => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("goal text is empty")]
    EmptyGoal,
    #[error("unknown parent node {0}")]
    UnknownParent(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is an executed leaf and cannot have children")]
    ParentIsLeaf(NodeId),
    #[error("cursor node {0} is neither done nor an executed leaf")]
    CursorNotTerminal(NodeId),
    #[error("cannot replan the root node")]
    ReplanAtRoot,
}

/// Where the cursor went after a completed node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CursorMove {
    /// The parent needs its next child at `slot`.
    NextSibling {
        parent: NodeId,
        slot: usize,
    },
    /// One or more ancestors completed; `parent` needs its next child at `slot`.
    ReturnToParentNext {
        parent: NodeId,
        slot: usize,
    },
    RootComplete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgoalTree {
    nodes: BTreeMap<NodeId, SubgoalNode>,
    root: NodeId,
    cursor: NodeId,
    next_id: u32,
}

impl SubgoalTree {
    pub fn init(goal: &str) -> Result<Self, TreeError> {
        let text = goal.trim();
        if text.is_empty() {
            return Err(TreeError::EmptyGoal);
        }
        let root = NodeId(0);
        let node = SubgoalNode {
            id: root,
            text: text.to_string(),
            parent: None,
            children: Vec::new(),
            status: NodeStatus::Open,
            depth: 0,
            sibling_index: 0,
            siblings_exhausted: false,
            replan_count: 0,
        };
        Ok(SubgoalTree { nodes: BTreeMap::from([(root, node)]), root, cursor: root, next_id: 1 })
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn cursor(&self) -> NodeId {
        self.cursor
    }

    pub fn node(&self, id: NodeId) -> Result<&SubgoalNode, TreeError> {
        self.nodes.get(&id).ok_or(TreeError::UnknownNode(id))
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut SubgoalNode, TreeError> {
        self.nodes.get_mut(&id).ok_or(TreeError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SubgoalNode> {
        self.nodes.values()
    }

    pub fn set_cursor(&mut self, id: NodeId) -> Result<(), TreeError> {
        self.node(id)?;
        self.cursor = id;
        Ok(())
    }

    pub fn add_child(&mut self, parent: NodeId, text: &str) -> Result<NodeId, TreeError> {
        let p = self.nodes.get_mut(&parent).ok_or(TreeError::UnknownParent(parent))?;
        if matches!(p.status, NodeStatus::Leaf(_)) {
            return Err(TreeError::ParentIsLeaf(parent));
        }
        let id = NodeId(self.next_id);
        self.next_id += 1;
        let sibling_index = p.children.len();
        let depth = p.depth + 1;
        p.children.push(id);
        p.status = NodeStatus::Expanding;
        p.siblings_exhausted = false;
        let mut up = p.parent;
        while let Some(a) = up {
            let anc = self.node_mut(a)?;
            if anc.status == NodeStatus::Done {
                anc.status = NodeStatus::Expanding;
            }
            up = anc.parent;
        }
        self.nodes.insert(
            id,
            SubgoalNode {
                id,
                text: text.trim().to_string(),
                parent: Some(parent),
                children: Vec::new(),
                status: NodeStatus::Open,
                depth,
                sibling_index,
                siblings_exhausted: false,
                replan_count: 0,
            },
        );
        Ok(id)
    }

    pub fn left_sibling(&self, id: NodeId) -> Result<Option<&SubgoalNode>, TreeError> {
        let node = self.node(id)?;
        let Some(parent) = node.parent else { return Ok(None) };
        if node.sibling_index == 0 {
            return Ok(None);
        }
        let p = self.node(parent)?;
        Ok(p.children.get(node.sibling_index - 1).and_then(|c| self.nodes.get(c)))
    }

    /// Children of `id` that are complete, in sibling order.
    pub fn completed_children(&self, id: NodeId) -> Result<Vec<&SubgoalNode>, TreeError> {
        Ok(self.node(id)?.children.iter().filter_map(|c| self.nodes.get(c)).filter(|n| n.is_complete()).collect())
    }

    pub fn mark_leaf(&mut self, id: NodeId, action: PrimitiveAction) -> Result<(), TreeError> {
        let node = self.node_mut(id)?;
        if !node.children.is_empty() {
            return Err(TreeError::ParentIsLeaf(id));
        }
        node.status = NodeStatus::Leaf(action);
        Ok(())
    }

    /// Records that `id` has no further children.
    ///
    /// The cursor moves to the last child so [`advance_cursor`](Self::advance_cursor)
    /// can propagate completion; a childless node is completed directly.
    pub fn end_siblings(&mut self, id: NodeId) -> Result<(), TreeError> {
        let node = self.node_mut(id)?;
        node.siblings_exhausted = true;
        match node.children.last().copied() {
            Some(last) => self.cursor = last,
            None => {
                node.status = NodeStatus::Done;
                self.cursor = id;
            }
        }
        Ok(())
    }

    pub fn advance_cursor(&mut self) -> Result<CursorMove, TreeError> {
        let mut current = self.cursor;
        if !self.node(current)?.is_complete() {
            return Err(TreeError::CursorNotTerminal(current));
        }
        let mut returned = false;
        loop {
            let Some(parent) = self.node(current)?.parent else {
                self.cursor = current;
                return Ok(CursorMove::RootComplete);
            };
            let all_complete = self.node(parent)?.children.iter().all(|c| self.nodes[c].is_complete());
            let p = self.node_mut(parent)?;
            if !p.siblings_exhausted || !all_complete {
                let slot = p.children.len();
                self.cursor = parent;
                return Ok(if returned {
                    CursorMove::ReturnToParentNext { parent, slot }
                } else {
                    CursorMove::NextSibling { parent, slot }
                });
            }
            p.status = NodeStatus::Done;
            current = parent;
            returned = true;
        }
    }

    /// Prunes the subtree at `id` and moves the cursor to its parent.
    ///
    /// Later siblings, if any, are shifted left to keep indices dense.
    pub fn replan_reset(&mut self, id: NodeId) -> Result<NodeId, TreeError> {
        let parent = self.node(id)?.parent.ok_or(TreeError::ReplanAtRoot)?;
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let node = self.node_mut(n)?;
            node.status = NodeStatus::Failed;
            stack.extend(node.children.iter().copied());
        }
        let p = self.node_mut(parent)?;
        p.children.retain(|c| *c != id);
        p.siblings_exhausted = false;
        p.replan_count += 1;
        if p.children.is_empty() && p.status == NodeStatus::Expanding {
            p.status = NodeStatus::Open;
        }
        let shifted: Vec<NodeId> = p.children.clone();
        for (i, c) in shifted.into_iter().enumerate() {
            self.node_mut(c)?.sibling_index = i;
        }
        self.cursor = parent;
        Ok(parent)
    }

    /// Actions of executed leaves in depth-first sibling order.
    pub fn leaf_sequence(&self) -> Vec<PrimitiveAction> {
        self.executed_leaves().into_iter().filter_map(|n| n.action().cloned()).collect()
    }

    pub fn executed_leaves(&self) -> Vec<&SubgoalNode> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[&id];
            if node.action().is_some() {
                out.push(node);
            }
            stack.extend(node.children.iter().rev().copied());
        }
        out
    }

    pub fn has_executed_leaf(&self, id: NodeId) -> bool {
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let Some(node) = self.nodes.get(&n) else { continue };
            if node.action().is_some() {
                return true;
            }
            stack.extend(node.children.iter().copied());
        }
        false
    }

    pub fn snapshot(&self) -> TreeSnapshot {
        TreeSnapshot {
            nodes: self
                .nodes
                .values()
                .map(|n| SnapshotNode {
                    id: n.id,
                    text: n.text.clone(),
                    parent: n.parent,
                    status: n.status.clone(),
                    sibling_index: n.sibling_index,
                })
                .collect(),
        }
    }

    /// Checks the structural invariants of every live node.
    pub fn check_invariants(&self) -> Result<(), String> {
        let root = &self.nodes[&self.root];
        if root.parent.is_some() || root.depth != 0 {
            return Err("root must have no parent and depth 0".into());
        }
        if !self.nodes.contains_key(&self.cursor) {
            return Err(format!("cursor {} does not exist", self.cursor));
        }
        let mut reached = 0usize;
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            reached += 1;
            if reached > self.nodes.len() {
                return Err("cycle detected".into());
            }
            let node = &self.nodes[&id];
            if node.status == NodeStatus::Failed {
                return Err(format!("{id} is failed but still attached"));
            }
            if matches!(node.status, NodeStatus::Leaf(_)) && !node.children.is_empty() {
                return Err(format!("leaf {id} has children"));
            }
            if node.status == NodeStatus::Done && !node.children.iter().all(|c| self.nodes[c].is_complete()) {
                return Err(format!("{id} is done with incomplete children"));
            }
            for (i, c) in node.children.iter().enumerate() {
                let child = self.nodes.get(c).ok_or_else(|| format!("dangling child {c}"))?;
                if child.parent != Some(id) {
                    return Err(format!("{c} has wrong parent"));
                }
                if child.depth != node.depth + 1 {
                    return Err(format!("{c} has wrong depth"));
                }
                if child.sibling_index != i {
                    return Err(format!("{c} has sibling_index {} at position {i}", child.sibling_index));
                }
                stack.push(*c);
            }
        }
        let live = self.nodes.values().filter(|n| n.status != NodeStatus::Failed).count();
        if live != reached {
            return Err(format!("{} live nodes but {reached} reachable", live));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotNode {
    pub id: NodeId,
    pub text: String,
    pub parent: Option<NodeId>,
    pub status: NodeStatus,
    pub sibling_index: usize,
}

/// Serializable copy of a tree for traces.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TreeSnapshot {
    pub nodes: Vec<SnapshotNode>,
}
