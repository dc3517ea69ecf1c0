use proptest::prelude::*;

use reflex_core::backends::{Backends, ToyGenerator};
use reflex_core::store::{replay, EventBody, SessionEvent, SessionHeader};
use reflex_core::toyworld::{toy_generate, ToyWorldConfig};
use reflex_core::types::{AspectSchema, AspectVector};
use reflex_core::{Engine, SessionState, UserInput};

fn slots() -> impl Strategy<Value = Vec<Option<u32>>> {
    prop::collection::vec(prop::option::of(0u32..16), 7)
}

fn vector(slots: Vec<Option<u32>>) -> AspectVector {
    AspectVector {
        schema: "default".into(),
        slots,
    }
}

proptest! {
    #[test]
    fn generation_keeps_every_pinned_slot(slots in slots(), seed in any::<u64>()) {
        let prompt = vector(slots);
        let image = toy_generate(&prompt, seed, &ToyWorldConfig::default());
        prop_assert!(image.is_fully_specified());
        for (want, got) in prompt.slots.iter().zip(&image.slots) {
            if want.is_some() {
                prop_assert_eq!(want, got);
            }
            prop_assert!(got.unwrap() < 16);
        }
    }

    #[test]
    fn neglect_only_changes_pinned_slots_to_other_values(slots in slots(), seed in any::<u64>()) {
        let prompt = vector(slots);
        let plain = toy_generate(&prompt, seed, &ToyWorldConfig::default());
        let lossy = toy_generate(&prompt, seed, &ToyWorldConfig::default().with_neglect(1.0));
        for i in 0..7 {
            match prompt.slots[i] {
                Some(v) => prop_assert_ne!(lossy.slots[i], Some(v)),
                None => prop_assert_eq!(lossy.slots[i], plain.slots[i]),
            }
        }
    }

    #[test]
    fn vectors_round_trip_through_json(slots in slots()) {
        let v = vector(slots);
        let text = serde_json::to_string(&v).unwrap();
        prop_assert_eq!(serde_json::from_str::<AspectVector>(&text).unwrap(), v);
    }

    #[test]
    fn sessions_round_trip_through_json_and_replay(
        seed in any::<u64>(),
        answers in prop::collection::vec((0usize..7, 0u32..16), 1..5),
    ) {
        let schema = AspectSchema::default_schema();
        let engine = Engine::new(Backends::toy(ToyGenerator::new(ToyWorldConfig::default())));
        let mut state = SessionState::new("p", schema.clone(), seed);
        let mut bodies = vec![EventBody::SessionCreated(SessionHeader::of(&state))];
        for (aspect, value) in answers {
            let mut v = AspectVector::unspecified(&schema);
            v.set(aspect, value);
            let out = engine.run_round(&state, UserInput::Assignment(v)).unwrap();
            bodies.extend(out.events);
            state = out.state;
        }
        let events: Vec<SessionEvent> = bodies
            .into_iter()
            .enumerate()
            .map(|(i, body)| SessionEvent { session_id: "p".into(), seq: i as u64 + 1, ts_ms: 0, body })
            .collect();
        let text: Vec<String> = events.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
        let parsed: Vec<SessionEvent> = text.iter().map(|t| serde_json::from_str(t).unwrap()).collect();
        prop_assert_eq!(&parsed, &events);
        prop_assert_eq!(replay(&parsed).unwrap(), state.clone());
        let state_text = serde_json::to_string(&state).unwrap();
        prop_assert_eq!(serde_json::from_str::<SessionState>(&state_text).unwrap(), state);
    }
}
