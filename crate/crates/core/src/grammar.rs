//! The primitive-action phrase grammar.
//!
//! ```text
//! walk to <target>
//! grasp <obj>
//! put <obj> on <surface>
//! put <obj> in <container>
//! open <container>
//! close <container>
//! ```
//!
//! Matching is case-insensitive, articles (`the`, `a`, `an`) are dropped and
//! runs of whitespace collapse. Names are grounded elsewhere against object ids
//! or class names.

use crate::world::{ObjectId, Observation, ParentRel, PrimitiveAction};

const ARTICLES: [&str; 3] = ["the", "a", "an"];

/// Lowercases, strips articles and trailing punctuation, collapses whitespace.
pub fn normalize(text: &str) -> String {
    text.trim()
        .trim_end_matches(['.', '!', ';'])
        .split_whitespace()
        .map(str::to_lowercase)
        .filter(|w| !ARTICLES.contains(&w.as_str()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A parsed but ungrounded action phrase.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phrase {
    Walk(String),
    Grasp(String),
    Put(String, ParentRel, String),
    Open(String),
    Close(String),
}

/// Every way `text` can be read as an action phrase.
///
/// `put` phrases can split at any ` on ` / ` in ` token, so more than one
/// reading is possible when names themselves contain those words.
pub fn parse_phrases(text: &str) -> Vec<Phrase> {
    let norm = normalize(text);
    let words: Vec<&str> = norm.split(' ').collect();
    let rest = |from: usize| words[from..].join(" ");
    match words.as_slice() {
        ["walk", "to", _, ..] => vec![Phrase::Walk(rest(2))],
        ["grasp", _, ..] => vec![Phrase::Grasp(rest(1))],
        ["open", _, ..] => vec![Phrase::Open(rest(1))],
        ["close", _, ..] => vec![Phrase::Close(rest(1))],
        ["put", ..] if words.len() >= 4 => (2..words.len() - 1)
            .filter_map(|i| {
                let rel = match words[i] {
                    "on" => ParentRel::On,
                    "in" => ParentRel::In,
                    _ => return None,
                };
                Some(Phrase::Put(words[1..i].join(" "), rel, rest(i + 1)))
            })
            .collect(),
        _ => Vec::new(),
    }
}

/// Visible objects a name can refer to: an exact id match or every object of that class.
pub fn ground_name<'a>(name: &str, obs: &'a Observation) -> Vec<&'a ObjectId> {
    let mut hits: Vec<&ObjectId> = obs
        .visible
        .values()
        .filter(|o| o.id.as_str().eq_ignore_ascii_case(name) || o.class.eq_ignore_ascii_case(name))
        .map(|o| &o.id)
        .collect();
    hits.dedup();
    hits
}

pub fn ground_unique<'a>(name: &str, obs: &'a Observation) -> Option<&'a ObjectId> {
    match ground_name(name, obs).as_slice() {
        [one] => Some(one),
        _ => None,
    }
}

/// Grounds a phrase; `None` if any name is missing or ambiguous.
pub fn ground_phrase(phrase: &Phrase, obs: &Observation) -> Option<PrimitiveAction> {
    let g = |n: &str| ground_unique(n, obs).cloned();
    Some(match phrase {
        Phrase::Walk(t) => PrimitiveAction::Walk { target: g(t)? },
        Phrase::Grasp(o) => PrimitiveAction::Grasp { obj: g(o)? },
        Phrase::Put(o, ParentRel::On, s) => PrimitiveAction::PutOn { obj: g(o)?, surface: g(s)? },
        Phrase::Put(o, ParentRel::In, c) => PrimitiveAction::PutIn { obj: g(o)?, container: g(c)? },
        Phrase::Open(c) => PrimitiveAction::Open { container: g(c)? },
        Phrase::Close(c) => PrimitiveAction::Close { container: g(c)? },
    })
}

/// Short name for an object: its class if no other visible object shares it, else its id.
pub fn display_name(id: &ObjectId, obs: &Observation) -> String {
    match obs.visible.get(id) {
        Some(o) if obs.visible.values().filter(|v| v.class == o.class).count() == 1 => o.class.clone(),
        _ => id.to_string(),
    }
}

/// Canonical phrase for an action under the given observation.
pub fn render_action(action: &PrimitiveAction, obs: &Observation) -> String {
    let n = |id: &ObjectId| display_name(id, obs);
    match action {
        PrimitiveAction::Walk { target } => format!("walk to {}", n(target)),
        PrimitiveAction::Grasp { obj } => format!("grasp {}", n(obj)),
        PrimitiveAction::PutOn { obj, surface } => format!("put {} on {}", n(obj), n(surface)),
        PrimitiveAction::PutIn { obj, container } => format!("put {} in {}", n(obj), n(container)),
        PrimitiveAction::Open { container } => format!("open {}", n(container)),
        PrimitiveAction::Close { container } => format!("close {}", n(container)),
    }
}
