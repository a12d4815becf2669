mod common;

use proptest::prelude::*;
use symrefine::corpus::SymptomLabel;
use symrefine::protocol::{parse_decision, parse_student_output, render_student_output, Action, StudentOutput};

#[test]
fn parser_compliance_scenario() {
    common::scenarios::parser_compliance().unwrap();
}

proptest! {
    #[test]
    fn student_output_round_trips(idx in 0usize..3, reasoning in "[a-zA-Z .,\"]{0,80}") {
        let label = [SymptomLabel::Absent, SymptomLabel::Unknown, SymptomLabel::Present][idx];
        let parsed = parse_student_output(&render_student_output(label, &reasoning));
        match parsed {
            StudentOutput::Labeled { label: got, .. } => prop_assert_eq!(got, label),
            StudentOutput::Unparseable => prop_assert!(false, "rendered output did not parse"),
        }
    }

    #[test]
    fn parsers_never_panic(raw in "\\PC{0,200}") {
        let _ = parse_student_output(&raw);
        let d = parse_decision(&raw);
        if d.fallback_applied {
            prop_assert_eq!(d.action, Action::PromptRefinement);
        }
    }
}
