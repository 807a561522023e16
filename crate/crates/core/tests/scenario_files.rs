mod common;

use common::{corpus_files, error_cases, error_kind};
use waveflow::scenario_io::{parse_scenario, serialize_scenario};

#[test]
fn corpus_round_trips_byte_for_byte() {
    let files = corpus_files();
    assert!(files.len() >= 8);
    for (name, text) in files {
        let parsed = parse_scenario(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(serialize_scenario(&parsed), text, "{name}");
        assert_eq!(parse_scenario(&serialize_scenario(&parsed)).unwrap(), parsed, "{name}");
    }
}

#[test]
fn comments_and_blank_lines_are_ignored() {
    let text = "# header\n\n[task]\nsteps = c1   # one step\n\n[agents]\na1 : c1 : 0\n";
    let s = parse_scenario(text).unwrap();
    assert_eq!(s.agents.len(), 1);
    assert!(s.failures.is_empty() && s.resources.is_empty());
    assert_eq!(parse_scenario(&serialize_scenario(&s)).unwrap(), s);
}

#[test]
fn errors_name_the_offending_line() {
    for (label, text, kind, line) in error_cases() {
        let e = parse_scenario(&text).expect_err(label);
        assert_eq!((error_kind(&e), e.line()), (kind, line), "{label}: {e}");
    }
}
