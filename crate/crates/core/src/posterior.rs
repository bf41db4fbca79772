//! Waypoint posterior: the unnormalized target `f_0`, its exact
//! normalization `q*`, the evidence lower bound and the joint-model
//! quantities that bound is actually compared against.
//!
//! Everything is computed in log space over the full waypoint grid `G × S`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::{Environment, GoalId, StateId};
use crate::error::{Result, SegoError};
use crate::math::log_sum_exp;
use crate::models::LikelihoodEstimator;
use crate::policy::TabularPolicy;

/// An intermediate goal paired with the state where it is achieved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Waypoint {
    pub subgoal: GoalId,
    pub substate: StateId,
}

impl Waypoint {
    pub fn new(subgoal: GoalId, substate: StateId) -> Self {
        Waypoint { subgoal, substate }
    }
}

/// Dense indexing of the waypoint grid: `index = subgoal * num_states + substate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WaypointGrid {
    pub num_goals: usize,
    pub num_states: usize,
}

impl WaypointGrid {
    pub fn new(num_goals: usize, num_states: usize) -> Self {
        WaypointGrid { num_goals, num_states }
    }

    pub fn of(env: &Environment) -> Self {
        WaypointGrid::new(env.num_goals(), env.num_states())
    }

    pub fn len(&self) -> usize {
        self.num_goals * self.num_states
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, w: Waypoint) -> usize {
        w.subgoal.0 * self.num_states + w.substate.0
    }

    #[inline]
    pub fn waypoint(&self, index: usize) -> Waypoint {
        Waypoint::new(GoalId(index / self.num_states), StateId(index % self.num_states))
    }

    pub fn contains(&self, w: Waypoint) -> bool {
        w.subgoal.0 < self.num_goals && w.substate.0 < self.num_states
    }

    pub fn iter(&self) -> impl Iterator<Item = Waypoint> + '_ {
        (0..self.len()).map(move |i| self.waypoint(i))
    }
}

/// A probability distribution over the whole waypoint grid.
#[derive(Clone, Debug, PartialEq)]
pub struct WaypointDist {
    grid: WaypointGrid,
    probs: Vec<f64>,
}

impl WaypointDist {
    pub fn new(grid: WaypointGrid, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != grid.len() {
            return Err(SegoError::InputDomain(format!(
                "distribution has {} entries, grid has {}",
                probs.len(),
                grid.len()
            )));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(SegoError::ContractViolation("negative or non-finite probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(SegoError::ContractViolation(format!("probabilities sum to {total}")));
        }
        Ok(WaypointDist { grid, probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(grid: WaypointGrid, weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(SegoError::ContractViolation("weights do not normalize".into()));
        }
        Self::new(grid, weights.iter().map(|w| w / total).collect())
    }

    pub fn point_mass(grid: WaypointGrid, w: Waypoint) -> Self {
        let mut probs = vec![0.0; grid.len()];
        probs[grid.index(w)] = 1.0;
        WaypointDist { grid, probs }
    }

    pub fn grid(&self) -> WaypointGrid {
        self.grid
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, w: Waypoint) -> f64 {
        self.probs[self.grid.index(w)]
    }

    /// `λ·self + (1-λ)·other`.
    pub fn mix(&self, other: &WaypointDist, lambda: f64) -> WaypointDist {
        let probs = self.probs.iter().zip(&other.probs).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
        WaypointDist { grid: self.grid, probs }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueSource {
    /// Dynamic-programming success probabilities of the current policy.
    Exact,
    /// Likelihood-estimator predictions.
    Learned,
}

/// A success-probability evaluator `v(goal | from_state)` tabulated over `G × S`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueFn {
    source: ValueSource,
    grid: WaypointGrid,
    /// `values[goal * num_states + state]`
    values: Vec<f64>,
}

impl ValueFn {
    /// Tabulates any evaluator. Range is checked when the table is used.
    pub fn from_fn(
        source: ValueSource,
        env: &Environment,
        mut eval: impl FnMut(GoalId, StateId) -> f64,
    ) -> ValueFn {
        let grid = WaypointGrid::of(env);
        let values = grid.iter().map(|w| eval(w.subgoal, w.substate)).collect();
        ValueFn { source, grid, values }
    }

    /// Exact `p^π(g | s)` for every goal and state.
    pub fn exact(policy: &TabularPolicy, env: &Environment) -> ValueFn {
        let mut values = Vec::with_capacity(env.grid_size());
        for g in 0..env.num_goals() {
            values.extend(policy.success_table(env, GoalId(g), env.horizon()).into_iter().map(|p| p.clamp(0.0, 1.0)));
        }
        ValueFn { source: ValueSource::Exact, grid: WaypointGrid::of(env), values }
    }

    /// Likelihood-estimator predictions, clipped into `[0, 1]`.
    pub fn learned(m: &LikelihoodEstimator, env: &Environment) -> ValueFn {
        ValueFn::from_fn(ValueSource::Learned, env, |g, s| m.predict(g, s).min(1.0))
    }

    pub fn source(&self) -> ValueSource {
        self.source
    }

    #[inline]
    pub fn value(&self, goal: GoalId, from: StateId) -> f64 {
        self.values[goal.0 * self.grid.num_states + from.0]
    }

    pub fn table(&self) -> &[f64] {
        &self.values
    }

    /// Pointwise scaling; used for covariance checks only, so the result
    /// may leave `[0, 1]`.
    pub fn scaled(&self, c: f64) -> ValueFn {
        ValueFn { source: self.source, grid: self.grid, values: self.values.iter().map(|v| v * c).collect() }
    }

    fn validate_for(&self, env: &Environment) -> Result<()> {
        if self.grid != WaypointGrid::of(env) {
            return Err(SegoError::InputDomain("value table does not match environment".into()));
        }
        if let Some((i, v)) = self.values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            let w = self.grid.waypoint(i);
            return Err(SegoError::ContractViolation(format!(
                "value v(g={} | s={}) = {v} outside [0, 1]",
                w.subgoal.0, w.substate.0
            )));
        }
        Ok(())
    }
}

fn check_task(env: &Environment, g: GoalId, s: StateId) -> Result<()> {
    env.check_goal(g)?;
    env.check_state(s)
}

#[inline]
fn log_f0_at(env: &Environment, v: &ValueFn, g: GoalId, s: StateId, w: Waypoint) -> f64 {
    let r = if env.achieves(w.subgoal, w.substate) { 1.0 } else { 0.0 };
    v.value(g, w.substate).ln() + v.value(w.subgoal, s).ln() + r
}

/// `log f_0(ω) = log v(g | s_w) + log v(g_w | s) + r(g_w, s_w)` for every
/// waypoint, `-inf` where a value term vanishes.
pub fn log_f0_table(g: GoalId, s: StateId, v: &ValueFn, env: &Environment) -> Result<Vec<f64>> {
    check_task(env, g, s)?;
    v.validate_for(env)?;
    Ok(WaypointGrid::of(env).iter().map(|w| log_f0_at(env, v, g, s, w)).collect())
}

/// `f_0(ω) = v(g | s_w) · v(g_w | s) · exp(r(g_w, s_w))`.
pub fn f0_unnormalized(w: Waypoint, g: GoalId, s: StateId, v: &ValueFn, env: &Environment) -> Result<f64> {
    check_task(env, g, s)?;
    env.check_goal(w.subgoal)?;
    env.check_state(w.substate)?;
    v.validate_for(env)?;
    Ok(log_f0_at(env, v, g, s, w).exp())
}

/// `log Z_f = log Σ_ω f_0(ω)`.
pub fn log_partition(g: GoalId, s: StateId, v: &ValueFn, env: &Environment) -> Result<f64> {
    Ok(log_sum_exp(&log_f0_table(g, s, v, env)?))
}

fn normalize_log(grid: WaypointGrid, log_w: &[f64], what: &str) -> Result<WaypointDist> {
    let lse = log_sum_exp(log_w);
    if lse == f64::NEG_INFINITY {
        return Err(SegoError::DegenerateTarget(format!("{what} vanishes on the whole waypoint grid")));
    }
    let probs: Vec<f64> = log_w.iter().map(|&x| (x - lse).exp()).collect();
    let total: f64 = probs.iter().sum();
    WaypointDist::new(grid, probs.iter().map(|p| p / total).collect())
}

/// The optimal waypoint distribution `q* = f_0 / Z_f`.
pub fn qstar_exact(g: GoalId, s: StateId, v: &ValueFn, env: &Environment) -> Result<WaypointDist> {
    let log_f0 = log_f0_table(g, s, v, env)?;
    normalize_log(WaypointGrid::of(env), &log_f0, "f_0")
}

/// `E_q[log v(g|s_w) + log v(g_w|s) + r(g_w,s_w) − log q(ω)]` with `0·log 0 = 0`.
/// Returns `-inf` when `q` puts mass on a waypoint with a zero value term.
pub fn elbo(q: &WaypointDist, g: GoalId, s: StateId, v: &ValueFn, env: &Environment) -> Result<f64> {
    if q.grid() != WaypointGrid::of(env) {
        return Err(SegoError::InputDomain("distribution grid does not match environment".into()));
    }
    let log_f0 = log_f0_table(g, s, v, env)?;
    Ok(elbo_from_log_f0(q, &log_f0))
}

fn elbo_from_log_f0(q: &WaypointDist, log_f0: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&p, &lf) in q.probs().iter().zip(log_f0) {
        if p == 0.0 {
            continue;
        }
        if lf == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        total += p * (lf - p.ln());
    }
    total
}

/// `C(g_w) = log Σ_{s'} exp(r(g_w, s'))`, the log-normalizer of `p(s_w | g_w)`.
pub fn absorbed_constant(g_w: GoalId, env: &Environment) -> f64 {
    let terms: Vec<f64> = (0..env.num_states())
        .map(|s| if env.achieves(g_w, StateId(s)) { 1.0 } else { 0.0 })
        .collect();
    log_sum_exp(&terms)
}

/// `E_q[C(g_w)]`.
pub fn expected_absorbed_constant(q: &WaypointDist, env: &Environment) -> f64 {
    let c: Vec<f64> = (0..env.num_goals()).map(|g| absorbed_constant(GoalId(g), env)).collect();
    q.grid().iter().zip(q.probs()).map(|(w, &p)| p * c[w.subgoal.0]).sum()
}

fn log_joint_table(g: GoalId, s: StateId, v: &ValueFn, env: &Environment) -> Result<Vec<f64>> {
    let log_f0 = log_f0_table(g, s, v, env)?;
    let c: Vec<f64> = (0..env.num_goals()).map(|gw| absorbed_constant(GoalId(gw), env)).collect();
    let grid = WaypointGrid::of(env);
    Ok(log_f0.iter().enumerate().map(|(i, lf)| lf - c[grid.waypoint(i).subgoal.0]).collect())
}

/// `Σ_{g_w, s_w} v(g | s_w) · v(g_w | s) · exp(r(g_w, s_w) − C(g_w))`: the
/// marginal of the factorized joint model over waypoints.
pub fn joint_marginal(g: GoalId, s: StateId, v: &ValueFn, env: &Environment) -> Result<f64> {
    Ok(log_sum_exp(&log_joint_table(g, s, v, env)?).exp())
}

/// The exact posterior over waypoints of the factorized joint model; the
/// unique maximizer of `elbo(q) − E_q[C]`.
pub fn joint_posterior(g: GoalId, s: StateId, v: &ValueFn, env: &Environment) -> Result<WaypointDist> {
    let log_joint = log_joint_table(g, s, v, env)?;
    normalize_log(WaypointGrid::of(env), &log_joint, "joint model")
}

/// Writes one row per waypoint: `goal,state,subgoal,substate,log_f0,qstar_prob`.
pub fn write_qstar_csv<W: Write>(
    out: W,
    g: GoalId,
    s: StateId,
    v: &ValueFn,
    env: &Environment,
    write_header: bool,
) -> Result<()> {
    let log_f0 = log_f0_table(g, s, v, env)?;
    let q = normalize_log(WaypointGrid::of(env), &log_f0, "f_0")?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    if write_header {
        w.write_record(["goal", "state", "subgoal", "substate", "log_f0", "qstar_prob"])?;
    }
    for (i, wp) in q.grid().iter().enumerate() {
        w.write_record([
            g.0.to_string(),
            s.0.to_string(),
            wp.subgoal.0.to_string(),
            wp.substate.0.to_string(),
            format!("{:e}", log_f0[i]),
            format!("{:e}", q.probs()[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}
