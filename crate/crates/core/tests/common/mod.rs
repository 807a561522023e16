#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;

use waveflow::scenario_io::{parse_scenario, Scenario};

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn corpus_path(name: &str) -> PathBuf {
    corpus_dir().join(format!("{name}.scenario"))
}

pub fn corpus_text(name: &str) -> String {
    fs::read_to_string(corpus_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn corpus(name: &str) -> Scenario {
    parse_scenario(&corpus_text(name)).unwrap()
}

/// Every `.scenario` file in the corpus, sorted by name.
pub fn corpus_files() -> Vec<(String, String)> {
    let mut files: Vec<_> = fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "scenario"))
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), fs::read_to_string(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// The same scenario without any failures.
pub fn failure_free(s: &Scenario) -> Scenario {
    Scenario { failures: Vec::new(), ..s.clone() }
}

pub fn error_kind(e: &waveflow::scenario_io::ScenarioError) -> &'static str {
    use waveflow::scenario_io::ScenarioError::*;
    match e {
        SyntaxError { .. } => "syntax",
        DuplicateAgentId { .. } => "duplicate",
        UnknownCapabilityRef { .. } => "capability",
        UnknownAgentRef { .. } => "agent",
        InvalidInitialConfig { .. } => "config",
        UnsortedFailures { .. } => "unsorted",
    }
}

const BASE: &str = "\
[task]
steps = c1, c2
[agents]
a1 : c1 : 0
a2 : c2 : 1
[transport]
mode = full
[failures]
10 : a1 : c1
";

/// Malformed inputs with the error kind and 1-based line each must report.
pub fn error_cases() -> Vec<(&'static str, String, &'static str, usize)> {
    let edit = |from: &str, to: &str| {
        assert!(BASE.contains(from), "{from}");
        BASE.replacen(from, to, 1)
    };
    vec![
        ("garbage line", edit("[agents]\n", "[agents]\nwhat\n"), "syntax", 4),
        ("unknown section", edit("[transport]", "[transprot]"), "syntax", 6),
        ("bad step index", edit("a2 : c2 : 1", "a2 : c2 : 2"), "syntax", 5),
        ("duplicate agent", edit("a2 : c2 : 1", "a1 : c2 : 1"), "duplicate", 5),
        ("failure cap not held", edit("10 : a1 : c1", "10 : a1 : c2"), "capability", 9),
        ("failure on unknown agent", edit("10 : a1 : c1", "10 : a9 : c1"), "agent", 9),
        ("edge to unknown agent", edit("mode = full\n", "mode = explicit\na1 -> a7\n"), "agent", 8),
        ("edge in full mode", edit("mode = full\n", "mode = full\na1 -> a2\n"), "syntax", 8),
        ("unsorted failures", format!("{BASE}5 : a2 : c2\n"), "unsorted", 10),
        ("step twice", edit("a2 : c2 : 1", "a2 : c1 : 0"), "config", 5),
        ("holder lacks capability", edit("a2 : c2 : 1", "a2 : c1 : 1"), "config", 5),
        ("uncovered step", edit("a2 : c2 : 1", "a2 : c2 : -"), "config", 2),
        ("zero delay", format!("[params]\ndelay_per_hop = 0\n{BASE}"), "syntax", 2),
        ("unknown param", format!("[params]\nspeed = 3\n{BASE}"), "syntax", 2),
    ]
}
