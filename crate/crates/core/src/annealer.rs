//! Annealed importance sampling over the waypoint grid.
//!
//! The ladder `f_j = f_0^{β_j} · f^{1-β_j}` runs from the unnormalized
//! target (`j = 0`) to the proposal (`j = η`). A chain draws `ω_{η-1}` from
//! the proposal and applies one transition per level down to `ω_0`.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, GoalId, StateId};
use crate::error::{Result, SegoError};
use crate::math::{log_mean_exp, log_sum_exp, sample_categorical, softmax};
use crate::models::{OptimizerModel, ProposalModel};
use crate::posterior::{log_f0_table, ValueFn, Waypoint, WaypointGrid};
use crate::rng;

const NORMALIZATION_TOL: f64 = 1e-10;
pub const MAX_KERNEL_ENTRIES: usize = 100_000_000;
pub const MAX_SEQUENCE_OUTCOMES: usize = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BetaSchedule {
    betas: Vec<f64>,
}

impl BetaSchedule {
    /// Strictly decreasing from exactly 1 to exactly 0.
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        let s = Self::relaxed(betas)?;
        if s.betas.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(SegoError::Configuration(format!("beta schedule {:?} is not strictly decreasing", s.betas)));
        }
        Ok(s)
    }

    /// Endpoints 1 and 0 with every value in `[0, 1]`, in any interior order.
    pub fn relaxed(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(SegoError::Configuration("beta schedule needs at least two entries".into()));
        }
        if betas[0] != 1.0 || betas[betas.len() - 1] != 0.0 {
            return Err(SegoError::Configuration(format!("beta schedule {betas:?} must start at 1 and end at 0")));
        }
        if betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(SegoError::Configuration(format!("beta schedule {betas:?} leaves [0, 1]")));
        }
        Ok(BetaSchedule { betas })
    }

    /// `(1, 0.66, 0.33, 0)`.
    pub fn default_eta3() -> Self {
        BetaSchedule { betas: vec![1.0, 0.66, 0.33, 0.0] }
    }

    /// `(1, 0.33, 0.66, 0)`: the interior values in the order first listed.
    pub fn as_printed_eta3() -> Self {
        BetaSchedule { betas: vec![1.0, 0.33, 0.66, 0.0] }
    }

    pub fn eta(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, j: usize) -> f64 {
        self.betas[j]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

impl TryFrom<Vec<f64>> for BetaSchedule {
    type Error = SegoError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        BetaSchedule::relaxed(v)
    }
}

impl From<BetaSchedule> for Vec<f64> {
    fn from(s: BetaSchedule) -> Vec<f64> {
        s.betas
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionMode {
    Stochastic,
    Greedy,
}

/// `β · x` with `0 · (-∞) = 0`.
fn weighted(beta: f64, x: f64) -> f64 {
    if beta == 0.0 {
        0.0
    } else {
        beta * x
    }
}

/// `a - b` for ladder ratios; a zero numerator stays zero even over a zero
/// denominator.
fn log_ratio(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        a - b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnealedTarget {
    grid: WaypointGrid,
    goal: GoalId,
    state: StateId,
    log_f0: Vec<f64>,
    log_fbase: Vec<f64>,
    base_probs: Vec<f64>,
    schedule: BetaSchedule,
}

impl AnnealedTarget {
    /// `(goal, state)` is the task context under which the optimizer is
    /// queried.
    pub fn new(
        grid: WaypointGrid,
        goal: GoalId,
        state: StateId,
        log_f0: Vec<f64>,
        log_fbase: Vec<f64>,
        schedule: BetaSchedule,
    ) -> Result<Self> {
        if log_f0.len() != grid.len() || log_fbase.len() != grid.len() {
            return Err(SegoError::InputDomain("ladder tables must cover the waypoint grid".into()));
        }
        if log_f0.iter().chain(&log_fbase).any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(SegoError::InputDomain("ladder tables hold NaN or +inf".into()));
        }
        let total = log_sum_exp(&log_fbase).exp();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(SegoError::ContractViolation(format!("proposal sums to {total}, not 1")));
        }
        if let Some(i) = (0..grid.len()).find(|&i| log_f0[i] > f64::NEG_INFINITY && log_fbase[i] == f64::NEG_INFINITY) {
            return Err(SegoError::ContractViolation(format!(
                "target has mass at waypoint {:?} where the proposal has none",
                grid.waypoint(i)
            )));
        }
        let base_probs = log_fbase.iter().map(|x| x.exp()).collect();
        Ok(AnnealedTarget { grid, goal, state, log_f0, log_fbase, base_probs, schedule })
    }

    /// Ladder for task `(g, s)` with `f_0` from `values` and base `f(·|g,s)`.
    pub fn from_models(
        g: GoalId,
        s: StateId,
        values: &ValueFn,
        env: &Environment,
        f: &ProposalModel,
        schedule: BetaSchedule,
    ) -> Result<Self> {
        let log_f0 = log_f0_table(g, s, values, env)?;
        AnnealedTarget::new(WaypointGrid::of(env), g, s, log_f0, f.log_probs(g, s), schedule)
    }

    pub fn grid(&self) -> WaypointGrid {
        self.grid
    }

    pub fn context(&self) -> (GoalId, StateId) {
        (self.goal, self.state)
    }

    pub fn schedule(&self) -> &BetaSchedule {
        &self.schedule
    }

    pub fn eta(&self) -> usize {
        self.schedule.eta()
    }

    pub fn log_f0(&self) -> &[f64] {
        &self.log_f0
    }

    pub fn log_fbase(&self) -> &[f64] {
        &self.log_fbase
    }

    fn level(&self, j: usize, i: usize) -> f64 {
        let b = self.schedule.beta(j);
        weighted(b, self.log_f0[i]) + weighted(1.0 - b, self.log_fbase[i])
    }

    pub fn ladder_logdensity(&self, j: usize, w: Waypoint) -> Result<f64> {
        if j > self.eta() {
            return Err(SegoError::InputDomain(format!("level {j} outside 0..={}", self.eta())));
        }
        if !self.grid.contains(w) {
            return Err(SegoError::InputDomain(format!("waypoint {w:?} outside the grid")));
        }
        Ok(self.level(j, self.grid.index(w)))
    }

    /// `f_j` normalized over the grid.
    pub fn level_distribution(&self, j: usize) -> Result<Vec<f64>> {
        if j > self.eta() {
            return Err(SegoError::InputDomain(format!("level {j} outside 0..={}", self.eta())));
        }
        let logs: Vec<f64> = (0..self.grid.len()).map(|i| self.level(j, i)).collect();
        let z = log_sum_exp(&logs);
        if z == f64::NEG_INFINITY {
            return Err(SegoError::DegenerateTarget(format!("level {j} has no mass")));
        }
        Ok(logs.iter().map(|x| (x - z).exp()).collect())
    }

    fn sample_base<R: Rng + ?Sized>(&self, rng: &mut R) -> Waypoint {
        self.grid.waypoint(sample_categorical(&self.base_probs, rng))
    }
}

fn check_transition_level(t: &AnnealedTarget, j: usize) -> Result<()> {
    if j == 0 || j >= t.eta() {
        return Err(SegoError::InputDomain(format!("transition level {j} outside 1..={}", t.eta().saturating_sub(1))));
    }
    Ok(())
}

fn proposal_pair(t: &AnnealedTarget, h: &OptimizerModel, from: Waypoint, to: Waypoint) -> Result<(f64, f64)> {
    let (g, s) = t.context();
    let fwd = h.logprob(g, s, from, to);
    let rev = h.logprob(g, s, to, from);
    if (fwd == f64::NEG_INFINITY) != (rev == f64::NEG_INFINITY) {
        return Err(SegoError::KernelSupport(format!(
            "optimizer moves {from:?} -> {to:?} in one direction only"
        )));
    }
    Ok((fwd, rev))
}

/// Probability of accepting a proposed move, given `log f_j` at both ends and
/// the forward and reverse proposal log-densities.
fn acceptance(mode: TransitionMode, cur: f64, prop: f64, fwd: f64, rev: f64) -> f64 {
    let num = prop + rev;
    let den = cur + fwd;
    match mode {
        TransitionMode::Greedy => {
            if num >= den {
                1.0
            } else {
                0.0
            }
        }
        TransitionMode::Stochastic => {
            if num == f64::NEG_INFINITY {
                0.0
            } else if den == f64::NEG_INFINITY {
                1.0
            } else {
                (num - den).exp().min(1.0)
            }
        }
    }
}

fn transition<R: Rng + ?Sized>(
    t: &AnnealedTarget,
    j: usize,
    w: Waypoint,
    h: &OptimizerModel,
    mode: TransitionMode,
    rng: &mut R,
) -> Result<(Waypoint, bool)> {
    let (g, s) = t.context();
    let proposal = h.sample(g, s, w, rng);
    if proposal == w {
        return Ok((w, true));
    }
    let (fwd, rev) = proposal_pair(t, h, w, proposal)?;
    let cur = t.level(j, t.grid.index(w));
    let prop = t.level(j, t.grid.index(proposal));
    let a = acceptance(mode, cur, prop, fwd, rev);
    let accepted = match mode {
        TransitionMode::Greedy => a == 1.0,
        TransitionMode::Stochastic => a >= 1.0 || rng.random::<f64>() < a,
    };
    Ok(if accepted { (proposal, true) } else { (w, false) })
}

/// Metropolis-Hastings step at level `j` with the optimizer as proposal.
pub fn mh_transition<R: Rng + ?Sized>(
    t: &AnnealedTarget,
    j: usize,
    w: Waypoint,
    h: &OptimizerModel,
    rng: &mut R,
) -> Result<(Waypoint, bool)> {
    check_transition_level(t, j)?;
    transition(t, j, w, h, TransitionMode::Stochastic, rng)
}

/// Deterministic accept rule: keep the proposal iff it does not lower
/// `log f_j + log h(reverse)` against the current point.
pub fn greedy_transition<R: Rng + ?Sized>(
    t: &AnnealedTarget,
    j: usize,
    w: Waypoint,
    h: &OptimizerModel,
    rng: &mut R,
) -> Result<(Waypoint, bool)> {
    check_transition_level(t, j)?;
    transition(t, j, w, h, TransitionMode::Greedy, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubgoalChain {
    /// `(ω_{η-1}, …, ω_0)`
    pub waypoints: Vec<Waypoint>,
    pub log_alpha: f64,
    /// One flag per transition, levels `η-1` down to `1`.
    pub accept_flags: Vec<bool>,
    pub mode: TransitionMode,
}

impl SubgoalChain {
    /// The chain's final waypoint `ω_0`.
    pub fn selected(&self) -> Waypoint {
        *self.waypoints.last().expect("chain has at least one waypoint")
    }

    /// `ω_j`.
    pub fn at_level(&self, j: usize) -> Waypoint {
        self.waypoints[self.waypoints.len() - 1 - j]
    }
}

pub fn run_chain<R: Rng + ?Sized>(
    t: &AnnealedTarget,
    h: &OptimizerModel,
    mode: TransitionMode,
    rng: &mut R,
) -> Result<SubgoalChain> {
    let eta = t.eta();
    let mut w = t.sample_base(rng);
    let i = t.grid.index(w);
    if t.log_fbase[i] == f64::NEG_INFINITY {
        return Err(SegoError::InternalState(format!("drew waypoint {w:?} outside the proposal support")));
    }
    let mut waypoints = Vec::with_capacity(eta);
    let mut accept_flags = Vec::with_capacity(eta - 1);
    waypoints.push(w);
    let mut log_alpha = log_ratio(t.level(eta - 1, i), t.level(eta, i));
    for j in (1..eta).rev() {
        let (next, accepted) = transition(t, j, w, h, mode, rng)?;
        w = next;
        waypoints.push(w);
        accept_flags.push(accepted);
        let k = t.grid.index(w);
        log_alpha += log_ratio(t.level(j - 1, k), t.level(j, k));
    }
    Ok(SubgoalChain { waypoints, log_alpha, accept_flags, mode })
}

/// Recomputes `Σ_j [log f_j(ω_j) - log f_{j+1}(ω_j)]` from the waypoints.
pub fn recompute_log_alpha(chain: &SubgoalChain, t: &AnnealedTarget) -> f64 {
    (0..t.eta())
        .map(|j| {
            let i = t.grid.index(chain.at_level(j));
            log_ratio(t.level(j, i), t.level(j + 1, i))
        })
        .sum()
}

/// `n` chains, chain `c` on stream `(seed, "chain", counters ++ [c])`.
/// Results do not depend on the rayon pool size.
pub fn run_chains(
    t: &AnnealedTarget,
    h: &OptimizerModel,
    mode: TransitionMode,
    n: usize,
    seed: u64,
    counters: &[u64],
) -> Result<Vec<SubgoalChain>> {
    (0..n)
        .into_par_iter()
        .map(|c| {
            let mut ctr = counters.to_vec();
            ctr.push(c as u64);
            let mut r = rng::stream(seed, "chain", &ctr);
            run_chain(t, h, mode, &mut r)
        })
        .collect()
}

/// Mean importance weight `(1/N) Σ α`.
#[allow(non_snake_case)]
pub fn estimate_Z(chains: &[SubgoalChain]) -> Result<f64> {
    if chains.is_empty() {
        return Err(SegoError::InputDomain("no chains to average".into()));
    }
    if chains.iter().any(|c| c.mode != TransitionMode::Stochastic) {
        return Err(SegoError::Mode("the normalizer estimate needs stochastic transitions".into()));
    }
    let la: Vec<f64> = chains.iter().map(|c| c.log_alpha).collect();
    Ok(log_mean_exp(&la).exp())
}

/// Softmax over chain log-weights; returns a resampled `ω_0` and the weights.
pub fn select_subgoal<R: Rng + ?Sized>(chains: &[SubgoalChain], rng: &mut R) -> Result<(Waypoint, Vec<f64>)> {
    if chains.is_empty() {
        return Err(SegoError::InputDomain("no chains to select from".into()));
    }
    let la: Vec<f64> = chains.iter().map(|c| c.log_alpha).collect();
    let weights = softmax(&la, 1.0);
    let k = sample_categorical(&weights, rng);
    Ok((chains[k].selected(), weights))
}

/// Dense level-`j` transition matrix, row-major `T[from * n + to]`.
pub fn analytic_kernel(t: &AnnealedTarget, j: usize, h: &OptimizerModel, mode: TransitionMode) -> Result<Vec<f64>> {
    let n = t.grid.len();
    if n.saturating_mul(n) > MAX_KERNEL_ENTRIES {
        return Err(SegoError::Capacity(format!("kernel over {n} waypoints exceeds {MAX_KERNEL_ENTRIES} entries")));
    }
    if j > t.eta() {
        return Err(SegoError::InputDomain(format!("level {j} outside 0..={}", t.eta())));
    }
    let (g, s) = t.context();
    let lf: Vec<f64> = (0..n).map(|i| t.level(j, i)).collect();
    let mut k = vec![0.0; n * n];
    for a in 0..n {
        let wa = t.grid.waypoint(a);
        let row = h.probs(g, s, wa);
        let mut off = 0.0;
        for b in (0..n).filter(|&b| b != a) {
            let wb = t.grid.waypoint(b);
            let (fwd, rev) = proposal_pair(t, h, wa, wb)?;
            let v = row[b] * acceptance(mode, lf[a], lf[b], fwd, rev);
            k[a * n + b] = v;
            off += v;
        }
        k[a * n + a] = 1.0 - off;
    }
    Ok(k)
}

/// `Z_f = Σ_ω f_0(ω)`.
#[allow(non_snake_case)]
pub fn brute_Z(t: &AnnealedTarget) -> f64 {
    log_sum_exp(&t.log_f0).exp()
}

/// One fully specified chain outcome and its probability.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceOutcome {
    pub waypoints: Vec<Waypoint>,
    pub accept_flags: Vec<bool>,
    pub log_alpha: f64,
    pub prob: f64,
}

/// Every (initial draw, proposal, accept coin) path of the chain sampler with
/// its probability. Zero-probability branches are dropped.
pub fn sequence_distribution(t: &AnnealedTarget, h: &OptimizerModel, mode: TransitionMode) -> Result<Vec<SequenceOutcome>> {
    let n = t.grid.len() as f64;
    let bound = n * (2.0 * n).powi(t.eta() as i32 - 1);
    if bound > MAX_SEQUENCE_OUTCOMES as f64 {
        return Err(SegoError::Capacity(format!("about {bound} chain outcomes to enumerate")));
    }
    let (g, s) = t.context();
    let eta = t.eta();
    let mut paths: Vec<SequenceOutcome> = Vec::new();
    for i in 0..t.grid.len() {
        let p = t.base_probs[i];
        if p > 0.0 {
            paths.push(SequenceOutcome {
                waypoints: vec![t.grid.waypoint(i)],
                accept_flags: vec![],
                log_alpha: log_ratio(t.level(eta - 1, i), t.level(eta, i)),
                prob: p,
            });
        }
    }
    for j in (1..eta).rev() {
        let mut next = Vec::new();
        for path in paths {
            let w = *path.waypoints.last().unwrap();
            let a = t.grid.index(w);
            let row = h.probs(g, s, w);
            let mut extend = |to: usize, accepted: bool, prob: f64| {
                if prob > 0.0 {
                    let mut p = path.clone();
                    p.waypoints.push(t.grid.waypoint(to));
                    p.accept_flags.push(accepted);
                    p.log_alpha += log_ratio(t.level(j - 1, to), t.level(j, to));
                    p.prob *= prob;
                    next.push(p);
                }
            };
            for b in 0..t.grid.len() {
                if b == a {
                    extend(a, true, row[b]);
                    continue;
                }
                let (fwd, rev) = proposal_pair(t, h, w, t.grid.waypoint(b))?;
                let acc = acceptance(mode, t.level(j, a), t.level(j, b), fwd, rev);
                extend(b, true, row[b] * acc);
                extend(a, false, row[b] * (1.0 - acc));
            }
        }
        paths = next;
    }
    Ok(paths)
}

/// Two waypoints with `f_0 = f = (0.2, 0.8)` under every schedule and a
/// uniform optimizer: `T[a][b] = 0.5`, `T[b][a] = 0.125`.
pub fn two_waypoint_fixture(schedule: BetaSchedule) -> (AnnealedTarget, OptimizerModel) {
    let grid = WaypointGrid::new(1, 2);
    let logs = vec![0.2f64.ln(), 0.8f64.ln()];
    let t = AnnealedTarget::new(grid, GoalId(0), StateId(0), logs.clone(), logs, schedule)
        .expect("fixture is a valid target");
    (t, OptimizerModel::uniform(grid, crate::models::DEFAULT_SMOOTHING_EPS))
}

/// Rows `chain_id, level, subgoal, substate, accepted, log_f_level,
/// log_alpha_partial`, one per chain level from `η-1` down to `0`.
pub fn write_chain_trace<W: Write>(
    out: &mut csv::Writer<W>,
    t: &AnnealedTarget,
    chains: &[SubgoalChain],
    first_chain_id: usize,
) -> Result<()> {
    let eta = t.eta();
    for (c, chain) in chains.iter().enumerate() {
        let mut partial = 0.0;
        for j in (0..eta).rev() {
            let w = chain.at_level(j);
            let i = t.grid.index(w);
            partial += log_ratio(t.level(j, i), t.level(j + 1, i));
            let accepted = if j == eta - 1 { true } else { chain.accept_flags[eta - 2 - j] };
            out.write_record([
                (first_chain_id + c).to_string(),
                j.to_string(),
                w.subgoal.0.to_string(),
                w.substate.0.to_string(),
                accepted.to_string(),
                t.level(j, i).to_string(),
                partial.to_string(),
            ])?;
        }
    }
    Ok(())
}

pub const CHAIN_TRACE_HEADER: [&str; 7] =
    ["chain_id", "level", "subgoal", "substate", "accepted", "log_f_level", "log_alpha_partial"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::build_gridnav;
    use crate::models::DEFAULT_SMOOTHING_EPS;
    use crate::policy::TabularPolicy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eta2() -> BetaSchedule {
        BetaSchedule::new(vec![1.0, 0.5, 0.0]).unwrap()
    }

    fn scaled_target(c: f64, schedule: BetaSchedule) -> (AnnealedTarget, OptimizerModel) {
        let grid = WaypointGrid::new(2, 3);
        let raw = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let z: f64 = raw.iter().sum();
        let base: Vec<f64> = raw.iter().map(|x| (x / z).ln()).collect();
        let f0: Vec<f64> = base.iter().map(|x| x + c.ln()).collect();
        let t = AnnealedTarget::new(grid, GoalId(1), StateId(2), f0, base, schedule).unwrap();
        (t, OptimizerModel::uniform(grid, DEFAULT_SMOOTHING_EPS))
    }

    #[test]
    fn schedule_validation() {
        assert!(BetaSchedule::new(vec![1.0, 0.66, 0.33, 0.0]).is_ok());
        assert!(BetaSchedule::new(vec![1.0, 0.33, 0.66, 0.0]).is_err());
        assert!(BetaSchedule::relaxed(vec![1.0, 0.33, 0.66, 0.0]).is_ok());
        assert!(BetaSchedule::new(vec![0.9, 0.0]).is_err());
        assert!(BetaSchedule::new(vec![1.0]).is_err());
        assert_eq!(BetaSchedule::default_eta3().eta(), 3);
    }

    #[test]
    fn ladder_endpoints_and_blend() {
        let (t, _) = scaled_target(3.0, BetaSchedule::default_eta3());
        for w in t.grid().iter() {
            let i = t.grid().index(w);
            assert_eq!(t.ladder_logdensity(3, w).unwrap(), t.log_fbase()[i]);
            assert_eq!(t.ladder_logdensity(0, w).unwrap(), t.log_f0()[i]);
            for j in 0..=3 {
                let expected = t.schedule().beta(j) * 3f64.ln() + t.log_fbase()[i];
                assert!((t.ladder_logdensity(j, w).unwrap() - expected).abs() < 1e-12);
            }
        }
        assert!(t.ladder_logdensity(4, t.grid().waypoint(0)).is_err());
    }

    #[test]
    fn zero_exponent_ignores_infinite_factor() {
        let grid = WaypointGrid::new(1, 2);
        let base = vec![0.5f64.ln(); 2];
        let f0 = vec![f64::NEG_INFINITY, 0.0];
        let t = AnnealedTarget::new(grid, GoalId(0), StateId(0), f0, base, eta2()).unwrap();
        let w = grid.waypoint(0);
        assert_eq!(t.ladder_logdensity(2, w).unwrap(), 0.5f64.ln());
        assert_eq!(t.ladder_logdensity(1, w).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn support_and_normalization_enforced() {
        let grid = WaypointGrid::new(1, 2);
        let bad_norm = AnnealedTarget::new(grid, GoalId(0), StateId(0), vec![0.0; 2], vec![0.0; 2], eta2());
        assert!(matches!(bad_norm, Err(SegoError::ContractViolation(_))));
        let bad_support = AnnealedTarget::new(
            grid,
            GoalId(0),
            StateId(0),
            vec![0.0, 0.0],
            vec![0.0, f64::NEG_INFINITY],
            eta2(),
        );
        assert!(matches!(bad_support, Err(SegoError::ContractViolation(_))));
    }

    #[test]
    fn two_waypoint_kernel_matches_hand_computation() {
        let (t, h) = two_waypoint_fixture(eta2());
        let k = analytic_kernel(&t, 1, &h, TransitionMode::Stochastic).unwrap();
        let expected = [0.5, 0.5, 0.125, 0.875];
        for (a, b) in k.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_waypoint_empirical_transitions() {
        let (t, h) = two_waypoint_fixture(eta2());
        let grid = t.grid();
        let expected = [0.5, 0.125];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        for (from, p) in [(0usize, expected[0]), (1usize, expected[1])] {
            let moved = (0..n)
                .filter(|_| {
                    let (w, _) = mh_transition(&t, 1, grid.waypoint(from), &h, &mut rng).unwrap();
                    grid.index(w) != from
                })
                .count();
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((moved as f64 / n as f64 - p).abs() <= 3.0 * se, "from {from}: {moved}");
        }
    }

    #[test]
    fn greedy_breaks_detailed_balance_on_fixture() {
        let (t, h) = two_waypoint_fixture(eta2());
        let p = t.level_distribution(1).unwrap();
        let flow = |k: &[f64]| (p[0] * k[1] - p[1] * k[2]).abs();
        let ks = analytic_kernel(&t, 1, &h, TransitionMode::Stochastic).unwrap();
        let kg = analytic_kernel(&t, 1, &h, TransitionMode::Greedy).unwrap();
        assert!(flow(&ks) <= 1e-12);
        assert!(flow(&kg) > 1e-3);
    }

    #[test]
    fn uphill_and_self_proposals_always_accept() {
        let (t, h) = two_waypoint_fixture(eta2());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (w, acc) = mh_transition(&t, 1, t.grid().waypoint(0), &h, &mut rng).unwrap();
            if t.grid().index(w) == 0 {
                // staying at a means the self-proposal was drawn
                assert!(acc);
            }
        }
        let (w, acc) = greedy_transition(&t, 1, t.grid().waypoint(1), &h, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(acc, t.grid().index(w) == 1 || acc);
        assert!(mh_transition(&t, 0, t.grid().waypoint(0), &h, &mut rng).is_err());
        assert!(mh_transition(&t, 2, t.grid().waypoint(0), &h, &mut rng).is_err());
    }

    #[test]
    fn one_level_chain_is_plain_importance_sampling() {
        let (t, h) = scaled_target(2.5, BetaSchedule::new(vec![1.0, 0.0]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let c = run_chain(&t, &h, TransitionMode::Stochastic, &mut rng).unwrap();
            assert_eq!(c.waypoints.len(), 1);
            assert!(c.accept_flags.is_empty());
            let i = t.grid().index(c.selected());
            assert!((c.log_alpha - (t.log_f0()[i] - t.log_fbase()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_ratio_has_zero_variance() {
        for mode in [TransitionMode::Stochastic, TransitionMode::Greedy] {
            let (t, h) = scaled_target(7.0, BetaSchedule::default_eta3());
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            for _ in 0..200 {
                let c = run_chain(&t, &h, mode, &mut rng).unwrap();
                assert_eq!(c.waypoints.len(), 3);
                assert_eq!(c.accept_flags.len(), 2);
                assert!((c.log_alpha.exp() - 7.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_alpha_recomputes() {
        let env = build_gridnav(2, 2, 2).unwrap();
        let pi = TabularPolicy::uniform(&env);
        let v = ValueFn::exact(&pi, &env);
        let f = ProposalModel::uniform(WaypointGrid::of(&env), DEFAULT_SMOOTHING_EPS);
        let h = OptimizerModel::uniform(WaypointGrid::of(&env), DEFAULT_SMOOTHING_EPS);
        let t = AnnealedTarget::from_models(GoalId(3), StateId(0), &v, &env, &f, BetaSchedule::default_eta3()).unwrap();
        let chains = run_chains(&t, &h, TransitionMode::Stochastic, 64, 9, &[0]).unwrap();
        for c in &chains {
            let r = recompute_log_alpha(c, &t);
            assert!((r - c.log_alpha).abs() < 1e-10 || (r == c.log_alpha));
        }
    }

    #[test]
    fn estimator_contracts() {
        let (t, h) = scaled_target(4.0, BetaSchedule::default_eta3());
        let chains = run_chains(&t, &h, TransitionMode::Stochastic, 5, 1, &[]).unwrap();
        assert!((estimate_Z(&chains).unwrap() - 4.0).abs() < 1e-12);
        assert!((estimate_Z(&chains[..1]).unwrap() - chains[0].log_alpha.exp()).abs() < 1e-12);
        let greedy = run_chains(&t, &h, TransitionMode::Greedy, 2, 1, &[]).unwrap();
        assert!(matches!(estimate_Z(&greedy), Err(SegoError::Mode(_))));
        assert!(estimate_Z(&[]).is_err());
        assert!((brute_Z(&t) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn chains_do_not_depend_on_pool_size() {
        let (t, h) = scaled_target(1.5, BetaSchedule::default_eta3());
        let a = run_chains(&t, &h, TransitionMode::Stochastic, 16, 77, &[3]).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_chains(&t, &h, TransitionMode::Stochastic, 16, 77, &[3]).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_selection_weights() {
        let w = WaypointGrid::new(1, 2);
        let chain = |la: f64, i: usize| SubgoalChain {
            waypoints: vec![w.waypoint(i)],
            log_alpha: la,
            accept_flags: vec![],
            mode: TransitionMode::Stochastic,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (sel, wts) = select_subgoal(&[chain(0.3, 1)], &mut rng).unwrap();
        assert_eq!((sel, wts), (w.waypoint(1), vec![1.0]));
        let (_, wts) = select_subgoal(&[chain(1.0, 0), chain(1.0, 1)], &mut rng).unwrap();
        assert!(wts.iter().all(|w| (w - 0.5).abs() < 1e-15));
        let (_, wts) = select_subgoal(&[chain(0.0, 0), chain(3f64.ln(), 1)], &mut rng).unwrap();
        assert!((wts[0] - 0.25).abs() < 1e-15 && (wts[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn chain_sequences_need_no_normalization() {
        let (t, h) = two_waypoint_fixture(eta2());
        for mode in [TransitionMode::Stochastic, TransitionMode::Greedy] {
            let seqs = sequence_distribution(&t, &h, mode).unwrap();
            let total: f64 = seqs.iter().map(|s| s.prob).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_expected_weight_is_the_normalizer() {
        let env = build_gridnav(2, 2, 2).unwrap();
        let mut pi = TabularPolicy::uniform(&env);
        pi.logits_mut(StateId(0), GoalId(3))[1] = 1.5;
        let v = ValueFn::exact(&pi, &env);
        let grid = WaypointGrid::of(&env);
        let mut f = ProposalModel::uniform(grid, DEFAULT_SMOOTHING_EPS);
        let row: Vec<f64> = (0..grid.len()).map(|i| (i as f64).cos()).collect();
        f.set_logits(GoalId(3), StateId(0), &row);
        let h = OptimizerModel::uniform(grid, DEFAULT_SMOOTHING_EPS);
        let t = AnnealedTarget::from_models(GoalId(3), StateId(0), &v, &env, &f, eta2()).unwrap();
        let seqs = sequence_distribution(&t, &h, TransitionMode::Stochastic).unwrap();
        let mean: f64 = seqs.iter().map(|s| s.prob * s.log_alpha.exp()).sum();
        assert!((mean - brute_Z(&t)).abs() < 1e-12 * brute_Z(&t).max(1.0));
    }

    #[test]
    fn trace_rows_per_level() {
        let (t, h) = scaled_target(2.0, BetaSchedule::default_eta3());
        let chains = run_chains(&t, &h, TransitionMode::Stochastic, 2, 5, &[]).unwrap();
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(CHAIN_TRACE_HEADER).unwrap();
        write_chain_trace(&mut w, &t, &chains, 0).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 3);
        let last = text.lines().nth(3).unwrap();
        let partial: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
        assert!((partial - chains[0].log_alpha).abs() < 1e-12);
    }
}
