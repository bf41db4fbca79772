//! Goal-conditioned tabular softmax policy.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionId, Environment, GoalId, StateId, Trajectory};
use crate::error::{Result, SegoError};
use crate::math::{argmax, sample_categorical, softmax};

/// Full-batch gradient descent settings shared by every tabular fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub l2: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { learning_rate: 0.1, epochs: 50, l2: 0.0 }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(SegoError::Configuration(format!(
                "learning_rate must lie in (0, 1], got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(SegoError::Configuration("epochs must be >= 1".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(SegoError::Configuration(format!("l2 must be >= 0, got {}", self.l2)));
        }
        Ok(())
    }
}

/// `π(a | s, g) = softmax(logits[s][g][·] / temperature)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    num_states: usize,
    num_goals: usize,
    num_actions: usize,
    logits: Vec<f64>,
    temperature: f64,
}

impl TabularPolicy {
    /// All-zero logits (uniform over actions) at temperature 1.
    pub fn uniform(env: &Environment) -> Self {
        Self::zeros(env.num_states(), env.num_goals(), env.num_actions())
    }

    pub fn zeros(num_states: usize, num_goals: usize, num_actions: usize) -> Self {
        TabularPolicy {
            num_states,
            num_goals,
            num_actions,
            logits: vec![0.0; num_states * num_goals * num_actions],
            temperature: 1.0,
        }
    }

    pub fn from_logits(
        num_states: usize,
        num_goals: usize,
        num_actions: usize,
        logits: Vec<f64>,
        temperature: f64,
    ) -> Result<Self> {
        if logits.len() != num_states * num_goals * num_actions {
            return Err(SegoError::InputDomain(format!(
                "expected {} logits, got {}",
                num_states * num_goals * num_actions,
                logits.len()
            )));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(SegoError::Configuration(format!("temperature must be positive, got {temperature}")));
        }
        Ok(TabularPolicy { num_states, num_goals, num_actions, logits, temperature })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(SegoError::Configuration(format!("temperature must be positive, got {temperature}")));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.num_states, self.num_goals, self.num_actions)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn raw_logits(&self) -> &[f64] {
        &self.logits
    }

    #[inline]
    fn offset(&self, s: StateId, g: GoalId) -> usize {
        (s.0 * self.num_goals + g.0) * self.num_actions
    }

    pub fn logits(&self, s: StateId, g: GoalId) -> &[f64] {
        let o = self.offset(s, g);
        &self.logits[o..o + self.num_actions]
    }

    pub fn logits_mut(&mut self, s: StateId, g: GoalId) -> &mut [f64] {
        let o = self.offset(s, g);
        &mut self.logits[o..o + self.num_actions]
    }

    fn check_ids(&self, s: StateId, g: GoalId) -> Result<()> {
        if s.0 >= self.num_states || g.0 >= self.num_goals {
            return Err(SegoError::InputDomain(format!(
                "context (s={}, g={}) outside policy table {}x{}",
                s.0, g.0, self.num_states, self.num_goals
            )));
        }
        Ok(())
    }

    pub fn action_probs(&self, s: StateId, g: GoalId) -> Result<Vec<f64>> {
        self.check_ids(s, g)?;
        let row = self.logits(s, g);
        if row.iter().any(|x| !x.is_finite()) {
            return Err(SegoError::InternalState(format!(
                "non-finite logits at (s={}, g={})",
                s.0, g.0
            )));
        }
        Ok(softmax(row, self.temperature))
    }

    #[inline]
    fn probs(&self, s: StateId, g: GoalId) -> Vec<f64> {
        softmax(self.logits(s, g), self.temperature)
    }

    /// Samples an episode, stopping at the first rewarded state or at the horizon.
    pub fn rollout<R: Rng + ?Sized>(&self, env: &Environment, s: StateId, g: GoalId, rng: &mut R) -> Trajectory {
        let mut states = vec![s];
        let mut actions = Vec::new();
        let mut cur = s;
        while !env.achieves(g, cur) && actions.len() < env.horizon() {
            let a = ActionId(sample_categorical(&self.probs(cur, g), rng));
            cur = env.successor(cur, a);
            actions.push(a);
            states.push(cur);
        }
        Trajectory { start: s, goal: g, actions, states, reached: env.achieves(g, cur) }
    }

    /// Argmax-action episode; deterministic, ties go to the lowest action index.
    pub fn greedy_rollout(&self, env: &Environment, s: StateId, g: GoalId) -> Trajectory {
        let mut states = vec![s];
        let mut actions = Vec::new();
        let mut cur = s;
        while !env.achieves(g, cur) && actions.len() < env.horizon() {
            let a = ActionId(argmax(self.logits(cur, g)));
            cur = env.successor(cur, a);
            actions.push(a);
            states.push(cur);
        }
        Trajectory { start: s, goal: g, actions, states, reached: env.achieves(g, cur) }
    }

    /// Finite-horizon success probabilities for goal `g` from every state:
    /// `P_0(x) = r(g,x)`, `P_{t+1}(x) = r(g,x) + (1 - r(g,x)) Σ_a π(a|x,g) P_t(step(x,a))`.
    pub fn success_table(&self, env: &Environment, g: GoalId, horizon: usize) -> Vec<f64> {
        let n = env.num_states();
        let reward: Vec<bool> = (0..n).map(|x| env.achieves(g, StateId(x))).collect();
        let mut p: Vec<f64> = reward.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
        let probs: Vec<Vec<f64>> = (0..n).map(|x| self.probs(StateId(x), g)).collect();
        for _ in 0..horizon {
            let next: Vec<f64> = (0..n)
                .map(|x| {
                    if reward[x] {
                        1.0
                    } else {
                        probs[x]
                            .iter()
                            .enumerate()
                            .map(|(a, &pa)| pa * p[env.successor(StateId(x), ActionId(a)).0])
                            .sum()
                    }
                })
                .collect();
            p = next;
        }
        p
    }

    pub fn success_prob_within(&self, env: &Environment, g: GoalId, s: StateId, horizon: usize) -> f64 {
        self.success_table(env, g, horizon)[s.0].clamp(0.0, 1.0)
    }

    /// Exact `p^π(g | s)` over the environment horizon.
    pub fn success_prob_exact(&self, env: &Environment, g: GoalId, s: StateId) -> f64 {
        self.success_prob_within(env, g, s, env.horizon())
    }

    /// Fraction of `n_samples` rollouts that reach `g`.
    pub fn success_prob_mc<R: Rng + ?Sized>(
        &self,
        env: &Environment,
        g: GoalId,
        s: StateId,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if n_samples == 0 {
            return Err(SegoError::InputDomain("n_samples must be >= 1".into()));
        }
        let hits = (0..n_samples).filter(|_| self.rollout(env, s, g, rng).reached).count();
        Ok(hits as f64 / n_samples as f64)
    }

    /// Total cross-entropy `-Σ log π(a_t | s_t, g)` of every action in `dataset`.
    pub fn cross_entropy(&self, dataset: &[Trajectory]) -> f64 {
        dataset
            .iter()
            .flat_map(|t| t.actions.iter().enumerate().map(move |(i, &a)| (t.states[i], t.goal, a)))
            .map(|(s, g, a)| -self.probs(s, g)[a.0].ln())
            .sum()
    }

    /// Behavior cloning on successful trajectories.
    ///
    /// Each `(state, goal)` context descends the gradient of its own average
    /// negative log-likelihood. Contexts are independent in a tabular model,
    /// so this is full-batch descent on a per-context reweighting of the total
    /// cross-entropy; with `l2 = 0` contexts absent from the data are untouched.
    pub fn fit_on_trajectories(&self, dataset: &[Trajectory], cfg: &FitConfig) -> Result<TabularPolicy> {
        cfg.validate()?;
        if let Some(bad) = dataset.iter().find(|t| !t.reached) {
            return Err(SegoError::ContractViolation(format!(
                "behavior cloning dataset contains a failed trajectory (start {}, goal {})",
                bad.start.0, bad.goal.0
            )));
        }
        let mut counts: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for t in dataset {
            self.check_ids(t.start, t.goal)?;
            for (i, &a) in t.actions.iter().enumerate() {
                let s = t.states[i];
                self.check_ids(s, t.goal)?;
                if a.0 >= self.num_actions {
                    return Err(SegoError::InputDomain(format!("action {} out of range", a.0)));
                }
                counts.entry((s.0, t.goal.0)).or_insert_with(|| vec![0.0; self.num_actions])[a.0] += 1.0;
            }
        }
        let mut out = self.clone();
        if counts.is_empty() && cfg.l2 == 0.0 {
            return Ok(out);
        }
        let targets: Vec<((usize, usize), Vec<f64>)> = counts
            .into_iter()
            .map(|(k, c)| {
                let n: f64 = c.iter().sum();
                (k, c.into_iter().map(|x| x / n).collect())
            })
            .collect();
        let t = self.temperature;
        // keeps the softmax cross-entropy step inside its descent region
        let lr = cfg.learning_rate * (t * t).min(1.0);
        for _ in 0..cfg.epochs {
            if cfg.l2 > 0.0 {
                for x in out.logits.iter_mut() {
                    *x -= lr * cfg.l2 * *x;
                }
            }
            for ((s, g), target) in &targets {
                let (s, g) = (StateId(*s), GoalId(*g));
                let p = out.probs(s, g);
                let row = out.logits_mut(s, g);
                for a in 0..row.len() {
                    row[a] -= lr * (p[a] - target[a]) / t;
                }
            }
        }
        Ok(out)
    }
}
