mod common;

use common::oracles;
use proptest::prelude::*;
use symrefine::corpus::SymptomLabel;
use symrefine::metrics::{score, ConfusionMatrix3};

fn label() -> impl Strategy<Value = SymptomLabel> {
    prop_oneof![Just(SymptomLabel::Absent), Just(SymptomLabel::Unknown), Just(SymptomLabel::Present)]
}

fn pairs() -> impl Strategy<Value = Vec<(SymptomLabel, Option<SymptomLabel>)>> {
    prop::collection::vec((label(), prop::option::weighted(0.9, label())), 1..=50)
}

fn matrix(pairs: &[(SymptomLabel, Option<SymptomLabel>)]) -> ConfusionMatrix3 {
    let mut m = ConfusionMatrix3::default();
    for (t, p) in pairs {
        m.record(*t, *p);
    }
    m
}

fn rotate(l: SymptomLabel) -> SymptomLabel {
    match l {
        SymptomLabel::Absent => SymptomLabel::Unknown,
        SymptomLabel::Unknown => SymptomLabel::Present,
        SymptomLabel::Present => SymptomLabel::Absent,
    }
}

proptest! {
    #[test]
    fn matches_brute_force(pairs in pairs()) {
        let got = score(&matrix(&pairs));
        let want = oracles::score(&pairs);
        prop_assert!((got.accuracy - want.accuracy).abs() <= 1e-12);
        prop_assert!((got.macro_f1 - want.macro_f1).abs() <= 1e-12);
        for i in 0..3 {
            prop_assert!((got.per_class[i].precision - want.precision[i]).abs() <= 1e-12);
            prop_assert!((got.per_class[i].recall - want.recall[i]).abs() <= 1e-12);
            prop_assert!((got.per_class[i].f1 - want.f1[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn accuracy_is_trace_over_n(pairs in pairs()) {
        let m = matrix(&pairs);
        let correct = pairs.iter().filter(|(t, p)| Some(*t) == *p).count();
        prop_assert_eq!(m.trace() as usize, correct);
        prop_assert_eq!(m.total() as usize, pairs.len());
        prop_assert_eq!(score(&m).accuracy, correct as f64 / pairs.len() as f64);
    }

    #[test]
    fn f1_bounded_and_relabel_invariant(pairs in pairs()) {
        let r = score(&matrix(&pairs));
        for c in r.per_class {
            prop_assert!((0.0..=1.0).contains(&c.f1));
        }
        let relabeled: Vec<_> = pairs.iter().map(|(t, p)| (rotate(*t), p.map(rotate))).collect();
        let r2 = score(&matrix(&relabeled));
        prop_assert!((r.macro_f1 - r2.macro_f1).abs() <= 1e-12);
        prop_assert_eq!(r.accuracy, r2.accuracy);
    }
}

#[test]
fn worked_example_is_seven_ninths() {
    use SymptomLabel::*;
    let r = score(&matrix(&[
        (Present, Some(Present)),
        (Present, Some(Absent)),
        (Absent, Some(Absent)),
        (Unknown, Some(Unknown)),
    ]));
    assert_eq!(r.accuracy, 0.75);
    assert_eq!(r.macro_f1, 7.0 / 9.0);
    assert!((r.class(Present).f1 - 2.0 / 3.0).abs() < 1e-15);
    assert!((r.class(Absent).f1 - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(r.class(Unknown).f1, 1.0);
}

#[test]
fn three_of_five() {
    use SymptomLabel::*;
    let r = score(&matrix(&[
        (Present, Some(Present)),
        (Absent, Some(Absent)),
        (Unknown, Some(Unknown)),
        (Present, Some(Absent)),
        (Absent, None),
    ]));
    assert_eq!(r.accuracy, 0.6);
    assert_eq!(r.n, 5);
}

#[test]
fn perfect_diagonal() {
    use SymptomLabel::*;
    let r = score(&matrix(&[(Present, Some(Present)), (Absent, Some(Absent)), (Unknown, Some(Unknown))]));
    assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));
}

#[test]
fn metric_oracle_scenario() {
    common::scenarios::metric_oracle(200).unwrap();
}
