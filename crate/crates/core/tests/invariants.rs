use proptest::prelude::*;
use sgf_core::demos::{augment, ContinuousTuple, DemoStore, Provenance, Source};
use sgf_core::envs::{reset, step, true_reward, EnvKind, EnvSpec, EnvState, Vec2};
use sgf_core::{dihedral_elements, GroupElement, StructuredVector};

fn element() -> impl Strategy<Value = GroupElement> {
    (0u32..4, any::<bool>()).prop_map(|(k, f)| GroupElement::new(k, f, 4).unwrap())
}

fn kind() -> impl Strategy<Value = EnvKind> {
    prop::sample::select(EnvKind::ALL.to_vec())
}

fn pairs(n: usize) -> impl Strategy<Value = Vec<Vec2>> {
    prop::collection::vec([-3.0f64..3.0, -3.0f64..3.0], n)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #[test]
    fn action_is_a_homomorphism(g in element(), h in element(), v in pairs(3)) {
        let x = StructuredVector::from_pairs(&v, vec![1.5, -2.0]);
        let gh = g.compose(&h).unwrap();
        let lhs = gh.act(&x).unwrap();
        let rhs = g.act(&h.act(&x).unwrap()).unwrap();
        prop_assert!(close(&lhs.equ, &rhs.equ, 1e-12));
        prop_assert_eq!(&lhs.inv, &x.inv);
    }

    #[test]
    fn inverse_undoes_the_action(g in element(), v in pairs(4)) {
        let x = StructuredVector::from_pairs(&v, Vec::new());
        let back = g.inverse().act(&g.act(&x).unwrap()).unwrap();
        prop_assert!(close(&back.equ, &x.equ, 1e-12));
    }

    #[test]
    fn norms_are_preserved(g in element(), v in [-5.0f64..5.0, -5.0f64..5.0]) {
        let w = g.apply(v);
        prop_assert!((w[0].hypot(w[1]) - v[0].hypot(v[1])).abs() <= 1e-12);
    }

    #[test]
    fn dynamics_commute_with_the_group(
        kind in kind(),
        seed in any::<u64>(),
        g in element(),
        actions in pairs(4),
    ) {
        let spec = EnvSpec::new(kind, 4);
        let s = reset(&spec, seed);
        let (next, r) = step(&spec, &s, &actions).unwrap();
        let moved: Vec<Vec2> = actions.iter().map(|a| g.apply(*a)).collect();
        let (next_g, r_g) = step(&spec, &s.transformed(&g), &moved).unwrap();
        let expect = next.transformed(&g).to_structured();
        prop_assert!(close(&next_g.to_structured().equ, &expect.equ, 1e-9));
        prop_assert_eq!(r, r_g);
        prop_assert_eq!(true_reward(&spec, &s), true_reward(&spec, &s.transformed(&g)));
    }

    #[test]
    fn augmented_tuples_replay_through_the_dynamics(
        kind in kind(),
        seed in any::<u64>(),
        actions in pairs(3),
    ) {
        let spec = EnvSpec::new(kind, 3);
        let s = reset(&spec, seed);
        let (next, _) = step(&spec, &s, &actions).unwrap();
        let t = ContinuousTuple::from_states(&s, &actions, &next, 0, Provenance::raw(Source::Expert));
        let store = DemoStore::new(&spec, vec![t]).unwrap();
        let aug = augment(&store, &spec, &dihedral_elements(4)).unwrap();
        prop_assert_eq!(aug.len(), 8);
        for t in aug.tuples() {
            let st = EnvState::from_structured(&spec, &t.s, t.step_index).unwrap();
            let a: Vec<Vec2> = (0..3).map(|i| t.action_pair(i)).collect();
            let (replayed, _) = step(&spec, &st, &a).unwrap();
            prop_assert!(close(&replayed.to_structured().equ, &t.s_next.equ, 1e-9));
        }
    }
}

#[test]
fn resets_are_seed_deterministic() {
    let spec = EnvSpec::new(EnvKind::Pursuit, 5);
    assert_eq!(reset(&spec, 11), reset(&spec, 11));
}
