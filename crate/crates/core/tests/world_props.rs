//! Invariants of the symbolic world under random worlds and random action walks.

mod common;

use proptest::prelude::*;
use step_core::grammar::render_action;
use step_core::terminate::check_mappability;
use step_core::world::{
    affordance_allows, apply_action, legal_actions, legal_in_environment, observe, Embodiment, Flag, ObjectId,
    ObjectInstance, ParentRel, PrimitiveAction, WorldFile, WorldState,
};

fn object(id: String, class: &str, flags: Vec<Flag>, is_open: Option<bool>) -> ObjectInstance {
    serde_json::from_value(serde_json::json!({
        "id": id,
        "class": class,
        "flags": flags,
        "is_open": is_open,
    }))
    .expect("object")
}

/// Random worlds: surfaces, containers standing on surfaces or on the floor, and graspable items.
fn arb_world() -> impl Strategy<Value = WorldState> {
    let containers = prop::collection::vec((any::<bool>(), any::<bool>(), any::<prop::sample::Index>()), 0..3);
    let items = prop::collection::vec(any::<prop::sample::Index>(), 0..5);
    (1usize..4, containers, items, any::<prop::sample::Index>()).prop_map(|(n_surfaces, containers, items, agent)| {
        let mut objects = Vec::new();
        let mut relations = Vec::new();
        let surfaces: Vec<String> = (0..n_surfaces).map(|i| format!("surface_{i}")).collect();
        for s in &surfaces {
            objects.push(object(s.clone(), "surface", vec![Flag::Surface], None));
        }
        let mut holders: Vec<(String, ParentRel)> = surfaces.iter().map(|s| (s.clone(), ParentRel::On)).collect();
        for (i, (open, on_surface, at)) in containers.into_iter().enumerate() {
            let id = format!("box_{i}");
            objects.push(object(id.clone(), "box", vec![Flag::Container, Flag::Openable], Some(open)));
            if on_surface {
                relations.push((ObjectId::new(&id), ParentRel::On, ObjectId::new(at.get(&surfaces))));
            }
            holders.push((id, ParentRel::In));
        }
        for (i, at) in items.into_iter().enumerate() {
            let id = format!("item_{i}");
            objects.push(object(id.clone(), "item", vec![Flag::Graspable], None));
            let (parent, rel) = at.get(&holders).clone();
            relations.push((ObjectId::new(&id), rel, ObjectId::new(parent)));
        }
        let places: Vec<&(String, ParentRel)> = holders.iter().collect();
        let agent_at = ObjectId::new(&agent.get(&places).0);
        WorldState::from_file(WorldFile { objects, relations, agent_at, held: None }).expect("generated world is valid")
    })
}

fn all_candidates(state: &WorldState) -> Vec<PrimitiveAction> {
    let ids: Vec<ObjectId> = state.objects().keys().cloned().collect();
    let mut out = Vec::new();
    for a in &ids {
        out.push(PrimitiveAction::Walk { target: a.clone() });
        out.push(PrimitiveAction::Grasp { obj: a.clone() });
        out.push(PrimitiveAction::Open { container: a.clone() });
        out.push(PrimitiveAction::Close { container: a.clone() });
        for b in &ids {
            out.push(PrimitiveAction::PutOn { obj: a.clone(), surface: b.clone() });
            out.push(PrimitiveAction::PutIn { obj: a.clone(), container: b.clone() });
        }
    }
    out
}

/// A random walk through states: each choice picks one candidate action, illegal ones are skipped.
fn walk(start: WorldState, choices: &[prop::sample::Index]) -> Vec<WorldState> {
    let emb = Embodiment::single_arm();
    let mut states = vec![start];
    for c in choices {
        let s = states.last().unwrap();
        let legal = legal_actions(s, &emb);
        if legal.is_empty() {
            break;
        }
        let next = apply_action(s, c.get(&legal), &emb).expect("legal action applies");
        states.push(next);
    }
    states
}

fn arb_states() -> impl Strategy<Value = Vec<WorldState>> {
    (arb_world(), prop::collection::vec(any::<prop::sample::Index>(), 0..25)).prop_map(|(w, c)| walk(w, &c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn states_stay_valid_and_round_trip(states in arb_states()) {
        for s in &states {
            let file = WorldFile::from(s.clone());
            prop_assert_eq!(&WorldState::from_file(file).unwrap(), s);
            let json = serde_json::to_string(s).unwrap();
            prop_assert_eq!(&WorldState::from_json(&json).unwrap(), s);
        }
    }

    #[test]
    fn legal_actions_partition_the_candidates(states in arb_states()) {
        let emb = Embodiment::single_arm();
        for s in &states {
            let legal = legal_actions(s, &emb);
            for a in all_candidates(s) {
                let applied = apply_action(s, &a, &emb);
                let checks = affordance_allows(s, &emb, &a).ok && legal_in_environment(s, &a).ok;
                prop_assert_eq!(applied.is_ok(), legal.contains(&a), "{}", a);
                prop_assert_eq!(applied.is_ok(), checks, "{}", a);
            }
        }
    }

    #[test]
    fn observation_hides_exactly_closed_container_contents(states in arb_states()) {
        for s in &states {
            let obs = observe(s);
            for id in s.objects().keys() {
                let mut enclosed = false;
                let mut cur = id.clone();
                while let Some(p) = s.placement(&cur) {
                    if p.rel == ParentRel::In && s.object(&p.parent).unwrap().is_closed() {
                        enclosed = true;
                    }
                    cur = p.parent.clone();
                }
                let held = s.held() == Some(id);
                prop_assert_eq!(obs.visible.contains_key(id), held || !enclosed, "{}", id);
            }
        }
    }

    #[test]
    fn transitions_are_deterministic(states in arb_states()) {
        let emb = Embodiment::single_arm();
        for s in &states {
            for a in legal_actions(s, &emb) {
                prop_assert_eq!(apply_action(s, &a, &emb).unwrap(), apply_action(&s.clone(), &a, &emb).unwrap());
            }
            prop_assert_eq!(observe(s).digest(), observe(&s.clone()).digest());
        }
    }

    #[test]
    fn mappability_is_bijective_on_legal_actions(states in arb_states()) {
        let emb = Embodiment::single_arm();
        for s in &states {
            let obs = observe(s);
            for a in legal_actions(s, &emb) {
                prop_assert_eq!(check_mappability(&a.to_string(), &obs), Some(a.clone()));
                prop_assert_eq!(check_mappability(&render_action(&a, &obs), &obs), Some(a.clone()));
            }
        }
    }
}

#[test]
fn bundled_worlds_render_and_map_back_every_legal_action() {
    let emb = Embodiment::single_arm();
    for name in ["study_open", "study_hidden", "kitchen_open", "kitchen_hidden", "living_open"] {
        let states = walk(common::world(name), &[]);
        let s = &states[0];
        let obs = observe(s);
        for a in legal_actions(s, &emb) {
            let text = render_action(&a, &obs);
            assert_eq!(check_mappability(&text, &obs), Some(a), "{name}: {text}");
        }
    }
}

#[test]
fn hidden_objects_are_not_visible_until_opened() {
    let emb = Embodiment::single_arm();
    let s = common::world("kitchen_hidden");
    let apple = ObjectId::new("apple_1");
    assert!(!observe(&s).visible.contains_key(&apple));
    let s = apply_action(&s, &PrimitiveAction::Walk { target: ObjectId::new("cabinet_1") }, &emb).unwrap();
    let s = apply_action(&s, &PrimitiveAction::Open { container: ObjectId::new("cabinet_1") }, &emb).unwrap();
    assert!(observe(&s).visible.contains_key(&apple));
}
