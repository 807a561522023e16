mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{corpus, failure_free};
use waveflow::model::{validate_configuration, AgentId};
use waveflow::oracle::check_scenario;
use waveflow::protocol::MessageKind;
use waveflow::sim::{interference, run};
use waveflow::SimTime;

fn ids(names: &[&str]) -> BTreeSet<AgentId> {
    names.iter().map(|&n| n.into()).collect()
}

fn steps(out: &waveflow::sim::RunOutcome) -> BTreeMap<String, Option<usize>> {
    out.final_config.steps_by_agent(out.final_agents.keys()).into_iter().map(|(a, s)| (a.to_string(), s)).collect()
}

#[test]
fn w1_direct_swap() {
    let s = corpus("w1_direct_swap");
    let out = run(&s, 0).unwrap();
    let m = &out.metrics;
    assert!(m.converged && !m.infeasible);
    assert_eq!((m.n_role_changes, m.locality_radius, m.n_messages), (2, Some(1), 5));
    assert_eq!(out.chain_agents(), ids(&["a1", "a2"]));
    let kinds = &out.message_kinds;
    assert_eq!(kinds.get(&MessageKind::Propose), Some(&1));
    assert_eq!(kinds.get(&MessageKind::TentativeAccept), Some(&1));
    assert_eq!(kinds.get(&MessageKind::Commit), Some(&2));
    assert_eq!(kinds.get(&MessageKind::Done), Some(&1));
    assert_eq!(check_scenario(&s).unwrap().min_changes, Some(2));
    assert!(validate_configuration(&out.final_config, &s.task, &out.final_agents, &s.transport).valid);
}

#[test]
fn w2_transitive_chain_of_three() {
    let s = corpus("w2_transitive");
    let out = run(&s, 0).unwrap();
    assert_eq!(steps(&out), BTreeMap::from([("a1".into(), Some(2)), ("a2".into(), Some(0)), ("a3".into(), Some(1))]));
    assert_eq!(out.metrics.n_role_changes, 3);
    assert_eq!(out.metrics.locality_radius, Some(2));
    assert_eq!(out.committed[0].chain.len(), 3);
    assert_eq!(check_scenario(&s).unwrap().min_changes, Some(3));
}

#[test]
fn w3_commits_through_second_candidate() {
    let s = corpus("w3_backtracking");
    assert!(check_scenario(&s).unwrap().feasible);
    let out = run(&s, 0).unwrap();
    assert!(out.metrics.converged);
    assert!(out.message_kinds[&MessageKind::Rollback] >= 1);
    assert_eq!(
        steps(&out),
        BTreeMap::from([("a1".into(), None), ("a2".into(), Some(1)), ("a3".into(), Some(0)), ("a4".into(), Some(2))])
    );
}

#[test]
fn w4_infeasible_changes_nothing() {
    let s = corpus("w4_infeasible");
    assert!(!check_scenario(&s).unwrap().feasible);
    let out = run(&s, 0).unwrap();
    let m = &out.metrics;
    assert!(m.infeasible && !m.converged && !m.non_terminated);
    assert_eq!((m.n_role_changes, m.locality_radius), (0, None));
    assert!(out.committed.is_empty());
    assert_eq!(out.halted_waves.len(), 1);
}

#[test]
fn failure_free_line_times() {
    let out = run(&corpus("no_failure_line"), 0).unwrap();
    let done: Vec<_> = out.traces.iter().map(|t| t.done_at).collect();
    assert_eq!(done, vec![Some(SimTime::from_units(17)), Some(SimTime::from_units(117))]);
}

#[test]
fn unaffected_traffic_keeps_its_timing() {
    let s = corpus("w1_with_traffic");
    let perturbed = run(&s, 0).unwrap();
    let baseline = run(&failure_free(&s), 0).unwrap();
    let report = interference(&baseline, &perturbed, &perturbed.chain_agents());
    assert_eq!(report.checked, vec![0]);
    assert!(report.differing.is_empty());
    // 1 + 3 + 1 + 3 + 1 + 3
    assert_eq!(perturbed.traces[0].done_at, Some(SimTime::from_units(12)));
    // The resource arriving during the wave is held back and still finishes.
    assert!(perturbed.traces[1].done_at > baseline.traces[1].done_at);
    assert_eq!(perturbed.metrics.resources_done, 3);
}

#[test]
fn explicit_transport_uses_adjacent_spare() {
    let s = corpus("explicit_line_spare");
    let out = run(&s, 3).unwrap();
    assert!(out.metrics.converged);
    assert_eq!(out.final_config.holder(0), Some(&"s1".into()));
    assert!(validate_configuration(&out.final_config, &s.task, &out.final_agents, &s.transport).valid);
    // a2 is asked first and declines; then P, TA, C, D with s1, 0.5 per hop
    assert_eq!(out.message_kinds[&MessageKind::Rollback], 1);
    assert_eq!(out.metrics.n_messages, 6);
    assert_eq!(out.metrics.t_converge(), Some(SimTime::from_micros(3_000_000)));
}

#[test]
fn flow_scope_handles_simultaneous_failures() {
    let s = corpus("flow_scope_two_failures");
    let out = run(&s, 7).unwrap();
    assert!(out.metrics.converged);
    assert!(out.tentative_residue.is_empty());
    assert!(validate_configuration(&out.final_config, &s.task, &out.final_agents, &s.transport).valid);
    assert_eq!(out.committed.len(), 2);
}
