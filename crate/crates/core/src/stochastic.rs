//! Population-level CTMC of reconfiguration dynamics.
//!
//! Three species: `W` working agents, `D` deficient agents with an active
//! wave, `H` halted agents whose wave proved infeasible. Reactions:
//!
//! * `fail`    W → D, propensity λ·W
//! * `resolve` D → W, propensity μ·D·(1 − p)
//! * `halt`    D → H, propensity μ·D·p
//!
//! Trajectories are sampled with Gillespie's direct method.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::parallel::{map_indexed, Execution};

/// `[W, D, H]`.
pub type Counts = [u32; 3];

pub const W: usize = 0;
pub const D: usize = 1;
pub const H: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StochasticError {
    #[error("invalid {name}: {value}")]
    InvalidRate { name: &'static str, value: f64 },
    #[error("population must be at least 1")]
    EmptyPopulation,
    #[error("generator matrix is singular")]
    Singular,
}

/// A reaction whose propensity is `rate × counts[reactant]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reaction {
    pub name: &'static str,
    pub rate: f64,
    pub reactant: usize,
    pub delta: [i32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtmcSpec {
    pub n: u32,
    pub initial: Counts,
    pub reactions: Vec<Reaction>,
}

impl CtmcSpec {
    pub fn with_initial(mut self, initial: Counts) -> Self {
        assert_eq!(initial.iter().sum::<u32>(), self.n, "initial counts must sum to n");
        self.initial = initial;
        self
    }

    pub fn propensities(&self, state: Counts) -> Vec<f64> {
        self.reactions.iter().map(|r| r.rate * f64::from(state[r.reactant])).collect()
    }

    pub fn apply(&self, state: Counts, reaction: usize) -> Counts {
        let delta = self.reactions[reaction].delta;
        let mut next = state;
        for i in 0..3 {
            next[i] = next[i].checked_add_signed(delta[i]).expect("reaction fired with a zero reactant");
        }
        next
    }
}

pub fn build_ctmc(n: u32, lambda_fail: f64, mu_resolve: f64, p_infeasible: f64) -> Result<CtmcSpec, StochasticError> {
    if n == 0 {
        return Err(StochasticError::EmptyPopulation);
    }
    for (name, value) in [("lambda_fail", lambda_fail), ("mu_resolve", mu_resolve)] {
        if !value.is_finite() || value < 0.0 {
            return Err(StochasticError::InvalidRate { name, value });
        }
    }
    if !(0.0..=1.0).contains(&p_infeasible) {
        return Err(StochasticError::InvalidRate { name: "p_infeasible", value: p_infeasible });
    }
    Ok(CtmcSpec {
        n,
        initial: [n, 0, 0],
        reactions: vec![
            Reaction { name: "fail", rate: lambda_fail, reactant: W, delta: [-1, 1, 0] },
            Reaction { name: "resolve", rate: mu_resolve * (1.0 - p_infeasible), reactant: D, delta: [1, -1, 0] },
            Reaction { name: "halt", rate: mu_resolve * p_infeasible, reactant: D, delta: [0, -1, 1] },
        ],
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    /// `(time, counts)` jump records, starting with the initial state at 0.
    pub records: Vec<(f64, Counts)>,
}

struct Stepper<'a> {
    spec: &'a CtmcSpec,
    rng: ChaCha8Rng,
    state: Counts,
    t: f64,
}

impl<'a> Stepper<'a> {
    fn new(spec: &'a CtmcSpec, seed: u64) -> Self {
        Stepper { spec, rng: ChaCha8Rng::seed_from_u64(seed), state: spec.initial, t: 0.0 }
    }

    /// Draws the next jump without applying it: `(time, reaction)`.
    /// `None` in an absorbing state.
    fn draw(&mut self) -> Option<(f64, usize)> {
        let props = self.spec.propensities(self.state);
        let total: f64 = props.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let wait = Exp::new(total).expect("positive rate").sample(&mut self.rng);
        let mut target = self.rng.random::<f64>() * total;
        let mut chosen = props.iter().rposition(|&p| p > 0.0).expect("some positive propensity");
        for (i, &p) in props.iter().enumerate() {
            if p > 0.0 && target < p {
                chosen = i;
                break;
            }
            target -= p;
        }
        Some((self.t + wait, chosen))
    }

    fn commit(&mut self, t: f64, reaction: usize) {
        self.t = t;
        self.state = self.spec.apply(self.state, reaction);
    }
}

/// Exact simulation up to `t_max` or absorption. Deterministic in `seed`.
pub fn ssa_run(spec: &CtmcSpec, seed: u64, t_max: f64) -> Trajectory {
    let mut stepper = Stepper::new(spec, seed);
    let mut records = vec![(0.0, spec.initial)];
    while let Some((t, r)) = stepper.draw() {
        if t > t_max {
            break;
        }
        stepper.commit(t, r);
        records.push((t, stepper.state));
    }
    Trajectory { records }
}

/// Time until every agent works again, or `None` if an agent halts or
/// `t_max` passes first.
pub fn first_passage(spec: &CtmcSpec, seed: u64, t_max: f64) -> Option<f64> {
    let mut stepper = Stepper::new(spec, seed);
    loop {
        if stepper.state[W] == spec.n {
            return Some(stepper.t);
        }
        if stepper.state[H] > 0 {
            return None;
        }
        let (t, r) = stepper.draw()?;
        if t > t_max {
            return None;
        }
        stepper.commit(t, r);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub runs: usize,
    /// Runs whose first passage is defined.
    pub reached: usize,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
    pub std_err: Option<f64>,
}

/// First passage from one deficient agent, `(n−1, 1, 0)`, back to all
/// working, over seeds `seed0 .. seed0 + n_runs`.
pub fn ensemble_stats(spec: &CtmcSpec, n_runs: usize, seed0: u64, t_max: f64, execution: Execution) -> EnsembleStats {
    let spec = spec.clone().with_initial([spec.n - 1, 1, 0]);
    let times: Vec<f64> = map_indexed(n_runs, execution, |i| first_passage(&spec, seed0 + i as u64, t_max))
        .into_iter()
        .flatten()
        .collect();
    let reached = times.len();
    if reached == 0 {
        return EnsembleStats { runs: n_runs, reached, mean: None, variance: None, std_err: None };
    }
    let mean = times.iter().sum::<f64>() / reached as f64;
    let variance =
        if reached > 1 { times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (reached - 1) as f64 } else { 0.0 };
    EnsembleStats {
        runs: n_runs,
        reached,
        mean: Some(mean),
        variance: Some(variance),
        std_err: Some((variance / reached as f64).sqrt()),
    }
}

/// Time-weighted fraction of time spent in each state over at most
/// `max_jumps` jumps. If the chain absorbs first, the absorbing state is
/// held until `t_max`.
pub fn occupancy(spec: &CtmcSpec, seed: u64, max_jumps: usize, t_max: f64) -> BTreeMap<Counts, f64> {
    let mut stepper = Stepper::new(spec, seed);
    let mut dwell: BTreeMap<Counts, f64> = BTreeMap::new();
    for _ in 0..max_jumps {
        match stepper.draw() {
            Some((t, r)) if t <= t_max => {
                *dwell.entry(stepper.state).or_default() += t - stepper.t;
                stepper.commit(t, r);
            }
            _ => {
                *dwell.entry(stepper.state).or_default() += t_max - stepper.t;
                break;
            }
        }
    }
    let total: f64 = dwell.values().sum();
    dwell.values_mut().for_each(|v| *v /= total);
    dwell
}

/// States reachable from the initial state, in discovery order.
pub fn reachable_states(spec: &CtmcSpec) -> Vec<Counts> {
    let mut seen = vec![spec.initial];
    let mut frontier = VecDeque::from([spec.initial]);
    while let Some(state) = frontier.pop_front() {
        for (r, p) in spec.propensities(state).into_iter().enumerate() {
            if p > 0.0 {
                let next = spec.apply(state, r);
                if !seen.contains(&next) {
                    seen.push(next);
                    frontier.push_back(next);
                }
            }
        }
    }
    seen
}

/// Generator matrix over the reachable states.
pub fn generator_matrix(spec: &CtmcSpec) -> (Vec<Counts>, DMatrix<f64>) {
    let states = reachable_states(spec);
    let index: BTreeMap<Counts, usize> = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let m = states.len();
    let mut q = DMatrix::zeros(m, m);
    for (i, &state) in states.iter().enumerate() {
        for (r, p) in spec.propensities(state).into_iter().enumerate() {
            if p > 0.0 {
                let j = index[&spec.apply(state, r)];
                q[(i, j)] += p;
                q[(i, i)] -= p;
            }
        }
    }
    (states, q)
}

/// Solves `πQ = 0, Σπ = 1` over the reachable states.
pub fn stationary_distribution(spec: &CtmcSpec) -> Result<BTreeMap<Counts, f64>, StochasticError> {
    let (states, q) = generator_matrix(spec);
    let m = states.len();
    let mut a = q.transpose();
    a.row_mut(m - 1).fill(1.0);
    let mut b = DVector::zeros(m);
    b[m - 1] = 1.0;
    let pi = a.lu().solve(&b).ok_or(StochasticError::Singular)?;
    Ok(states.into_iter().zip(pi.iter().copied()).collect())
}

pub fn tv_distance(a: &BTreeMap<Counts, f64>, b: &BTreeMap<Counts, f64>) -> f64 {
    let keys: std::collections::BTreeSet<&Counts> = a.keys().chain(b.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}

/// Expected fraction of agents that are deficient under `dist`.
pub fn mean_deficient_fraction(dist: &BTreeMap<Counts, f64>, n: u32) -> f64 {
    dist.iter().map(|(s, p)| p * f64::from(s[D]) / f64::from(n)).sum()
}

/// `μ` such that the mean resolve time `1/μ` equals a measured mean wave
/// duration.
pub fn calibrate_mu(mean_wave_duration: f64) -> f64 {
    1.0 / mean_wave_duration
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fail_propensity_at_full_population() {
        let spec = build_ctmc(10, 0.1, 1.0, 0.0).unwrap();
        assert!((spec.propensities([10, 0, 0])[0] - 1.0).abs() < 1e-12);
        assert!(spec.propensities([0, 0, 10]).iter().all(|&p| p == 0.0));
    }

    #[test]
    fn negative_rate_is_rejected() {
        assert!(matches!(build_ctmc(3, -1.0, 1.0, 0.0), Err(StochasticError::InvalidRate { .. })));
        assert!(matches!(build_ctmc(3, 1.0, 1.0, 1.5), Err(StochasticError::InvalidRate { .. })));
    }

    #[test]
    fn absorbing_start_has_only_initial_record() {
        let spec = build_ctmc(2, 0.0, 1.0, 0.0).unwrap();
        assert_eq!(ssa_run(&spec, 7, 100.0).records, vec![(0.0, [2, 0, 0])]);
    }

    #[test]
    fn fixed_seed_repeats_and_conserves() {
        let spec = build_ctmc(5, 0.3, 1.0, 0.1).unwrap();
        let a = ssa_run(&spec, 11, 50.0);
        assert_eq!(a, ssa_run(&spec, 11, 50.0));
        for w in a.records.windows(2) {
            assert!(w[1].0 > w[0].0);
            assert_eq!(w[1].1.iter().sum::<u32>(), 5);
        }
    }

    #[test]
    fn telegraph_stationary_fraction() {
        let (lambda, mu) = (0.4, 1.6);
        let spec = build_ctmc(1, lambda, mu, 0.0).unwrap();
        let pi = stationary_distribution(&spec).unwrap();
        let analytic = lambda / (lambda + mu);
        assert!((pi[&[0, 1, 0]] - analytic).abs() < 1e-12);
        let empirical = occupancy(&spec, 3, 200_000, f64::INFINITY);
        assert!((empirical[&[0, 1, 0]] - analytic).abs() < 0.01);
    }

    #[test]
    fn forced_halt_has_no_first_passage() {
        let spec = build_ctmc(3, 0.0, 1.0, 1.0).unwrap();
        let stats = ensemble_stats(&spec, 50, 0, 1e6, Execution::Sequential);
        assert_eq!((stats.reached, stats.mean), (0, None));
    }
}
