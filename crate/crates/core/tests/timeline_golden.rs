mod support;

use support::timelines::{load_cases, mismatches};

#[test]
fn fixture_has_fifty_cases() {
    assert_eq!(load_cases().len(), 50);
}

#[test]
fn every_case_matches_byte_for_byte() {
    let bad = mismatches();
    assert!(bad.is_empty(), "{}", bad.join("\n"));
}
