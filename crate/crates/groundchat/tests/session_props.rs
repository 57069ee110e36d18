mod common;

use groundchat::api::{EditOp, SentenceRef};
use groundchat::session::{Engine, Session, BOT, USER};
use proptest::prelude::*;
use std::sync::OnceLock;

// last content words are distinct, so mock expansions never collide
const POOL: [&str; 8] = [
    "my favorite color is red",
    "i have a dog named rex",
    "i like to swim",
    "i work at a bakery",
    "my favorite color is green",
    "i play the piano",
    "i grew up near the sea",
    "i collect old stamps",
];

fn engine() -> &'static Engine {
    static E: OnceLock<Engine> = OnceLock::new();
    E.get_or_init(common::engine)
}

#[derive(Debug, Clone)]
enum Action {
    Edit(Vec<EditOp>),
    Post(u64),
    Regen(Option<usize>, u64),
}

fn op() -> impl Strategy<Value = EditOp> {
    let text = prop::sample::select(POOL.to_vec()).prop_map(String::from);
    let target = prop_oneof![
        (0usize..6).prop_map(SentenceRef::Index),
        prop::sample::select(POOL.to_vec()).prop_map(|t| SentenceRef::Text(t.to_string())),
    ];
    prop_oneof![
        text.clone().prop_map(|sentence| EditOp::Add { sentence }),
        target.clone().prop_map(|target| EditOp::Remove { target }),
        (target, text).prop_map(|(target, sentence)| EditOp::Replace { target, sentence }),
    ]
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        3 => prop::collection::vec(op(), 0..4).prop_map(Action::Edit),
        1 => any::<u64>().prop_map(Action::Post),
        1 => (prop::option::of(0usize..200), any::<u64>()).prop_map(|(k, s)| Action::Regen(k, s)),
    ]
}

fn check(s: &Session) {
    assert!(s.provenance_consistent());
    assert!(!s.persona_set.sentences.is_empty());
    assert_eq!(s.candidate_set.len(), 46 * s.persona_set.sentences.len() + 1);
    for (i, t) in s.transcript.iter().enumerate() {
        assert_eq!(t.speaker, if i % 2 == 0 { USER } else { BOT });
    }
    if let Some(g) = &s.last_grounding {
        assert_eq!(g.prior_dist.len(), s.candidate_set.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn sessions_stay_consistent_under_any_actions(
        start in prop::sample::subsequence(POOL.to_vec(), 1..4),
        actions in prop::collection::vec(action(), 1..8),
    ) {
        let e = engine();
        let texts: Vec<String> = start.iter().map(|s| s.to_string()).collect();
        let mut s = e.create("p", &texts, true).unwrap();
        check(&s);
        for a in actions {
            let before = s.clone();
            let ok = match a {
                Action::Edit(ops) => e.edit(&mut s, &ops).map(|d| {
                    if d.added + d.removed == 0 {
                        assert_eq!(d.candidate_count, before.candidate_set.len());
                    }
                }).is_ok(),
                Action::Post(seed) => e.post_message(&mut s, "hi there", Some(seed)).is_ok(),
                Action::Regen(k, seed) => {
                    let r = e.regenerate(&mut s, k, Some(seed), true);
                    if let Ok(r) = &r {
                        assert_eq!(s.transcript.len(), before.transcript.len());
                        assert_eq!(s.transcript.last().unwrap().text, r.response);
                        if let Some(k) = k {
                            assert_eq!(r.chosen_candidate.index, k);
                        }
                    }
                    r.is_ok()
                }
            };
            if !ok {
                prop_assert_eq!(&s, &before, "a failed action changed the session");
            }
            check(&s);
        }
    }

    #[test]
    fn regenerating_with_the_same_seed_is_deterministic(seed in any::<u64>(), k in prop::option::of(0usize..93)) {
        let e = engine();
        let mut s = e.create("p", &common::persona()[..2], true).unwrap();
        e.post_message(&mut s, "do you have pets ?", Some(seed)).unwrap();
        let a = e.regenerate(&mut s.clone(), k, Some(seed ^ 1), false).unwrap();
        let b = e.regenerate(&mut s, k, Some(seed ^ 1), true).unwrap();
        prop_assert_eq!(a, b);
    }
}
