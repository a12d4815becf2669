mod common;

use common::scenarios;

#[test]
fn replay_and_resume_are_byte_identical() {
    scenarios::determinism().unwrap();
}
