//! Tabular stand-ins for the subgoal generator `f(·|g,s)`, the subgoal
//! optimizer `h(·|ω,g,s)` and the likelihood estimator `M(g,s)`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::env::{GoalId, StateId};
use crate::error::{Result, SegoError};
use crate::math::{sample_categorical, softmax};
use crate::policy::FitConfig;
use crate::posterior::{Waypoint, WaypointGrid};

pub const DEFAULT_SMOOTHING_EPS: f64 = 1e-6;

/// `(1 - ε)·softmax(logits) + ε/n`: every entry at least `ε/n`.
fn smoothed_probs(logits: &[f64], eps: f64) -> Vec<f64> {
    let n = logits.len() as f64;
    softmax(logits, 1.0).into_iter().map(|p| (1.0 - eps) * p + eps / n).collect()
}

/// Gradient descent on the smoothed-softmax cross-entropy toward a
/// normalized target histogram.
fn descend_row(logits: &mut [f64], eps: f64, target: &[f64], cfg: &FitConfig) {
    let n = logits.len() as f64;
    for _ in 0..cfg.epochs {
        let p = softmax(logits, 1.0);
        // ρ_k = t_k p_k / p̃_k; ∂CE/∂z_i = -(1-ε)(ρ_i - p_i Σρ)
        let rho: Vec<f64> = target
            .iter()
            .zip(&p)
            .map(|(&t, &pk)| if t > 0.0 { t * pk / ((1.0 - eps) * pk + eps / n) } else { 0.0 })
            .collect();
        let rho_sum: f64 = rho.iter().sum();
        for i in 0..logits.len() {
            let grad = -(1.0 - eps) * (rho[i] - p[i] * rho_sum) + cfg.l2 * logits[i];
            logits[i] -= cfg.learning_rate * grad;
        }
    }
}

/// Builds per-row target histograms from weighted examples. Rows whose
/// weights sum to zero are dropped.
fn histograms<K: Ord>(items: impl Iterator<Item = (K, usize, f64)>, width: usize) -> Result<BTreeMap<K, Vec<f64>>> {
    let mut rows: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for (key, idx, weight) in items {
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(SegoError::InputDomain(format!("example weight {weight} must be finite and >= 0")));
        }
        rows.entry(key).or_insert_with(|| vec![0.0; width])[idx] += weight;
    }
    rows.retain(|_, h| h.iter().sum::<f64>() > 0.0);
    for h in rows.values_mut() {
        let total: f64 = h.iter().sum();
        h.iter_mut().for_each(|x| *x /= total);
    }
    Ok(rows)
}

/// One weighted training example for the subgoal generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalExample {
    pub goal: GoalId,
    pub state: StateId,
    pub waypoint: Waypoint,
    pub weight: f64,
}

/// Subgoal generator: a smoothed categorical over the waypoint grid for
/// each task context `(g, s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalModel {
    grid: WaypointGrid,
    /// `logits[(g * num_states + s) * |grid| + waypoint]`
    logits: Vec<f64>,
    smoothing_eps: f64,
}

impl ProposalModel {
    /// Zero logits, i.e. uniform over the grid for every context.
    pub fn uniform(grid: WaypointGrid, smoothing_eps: f64) -> Self {
        ProposalModel { grid, logits: vec![0.0; grid.len() * grid.len()], smoothing_eps }
    }

    pub fn from_logits(grid: WaypointGrid, logits: Vec<f64>, smoothing_eps: f64) -> Result<Self> {
        if logits.len() != grid.len() * grid.len() {
            return Err(SegoError::InputDomain(format!(
                "proposal table needs {} logits, got {}",
                grid.len() * grid.len(),
                logits.len()
            )));
        }
        Ok(ProposalModel { grid, logits, smoothing_eps })
    }

    pub fn grid(&self) -> WaypointGrid {
        self.grid
    }

    pub fn smoothing_eps(&self) -> f64 {
        self.smoothing_eps
    }

    pub fn raw_logits(&self) -> &[f64] {
        &self.logits
    }

    fn row_range(&self, g: GoalId, s: StateId) -> std::ops::Range<usize> {
        let w = self.grid.len();
        let o = (g.0 * self.grid.num_states + s.0) * w;
        o..o + w
    }

    pub fn logits(&self, g: GoalId, s: StateId) -> &[f64] {
        &self.logits[self.row_range(g, s)]
    }

    pub fn set_logits(&mut self, g: GoalId, s: StateId, row: &[f64]) {
        let r = self.row_range(g, s);
        self.logits[r].copy_from_slice(row);
    }

    pub fn probs(&self, g: GoalId, s: StateId) -> Vec<f64> {
        smoothed_probs(self.logits(g, s), self.smoothing_eps)
    }

    pub fn log_probs(&self, g: GoalId, s: StateId) -> Vec<f64> {
        self.probs(g, s).into_iter().map(f64::ln).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, g: GoalId, s: StateId, rng: &mut R) -> Waypoint {
        self.grid.waypoint(sample_categorical(&self.probs(g, s), rng))
    }

    pub fn logprob(&self, g: GoalId, s: StateId, w: Waypoint) -> f64 {
        self.probs(g, s)[self.grid.index(w)].ln()
    }

    pub fn weighted_cross_entropy(&self, data: &[ProposalExample]) -> f64 {
        data.iter().map(|d| -d.weight * self.logprob(d.goal, d.state, d.waypoint)).sum()
    }

    /// Weighted cross-entropy descent toward the example waypoints, one
    /// independent row per context. Contexts absent from `data` are untouched
    /// when `l2 = 0`.
    pub fn fit(&self, data: &[ProposalExample], cfg: &FitConfig) -> Result<ProposalModel> {
        cfg.validate()?;
        let grid = self.grid;
        let rows = histograms(
            data.iter().map(|d| ((d.goal.0, d.state.0), grid.index(d.waypoint), d.weight)),
            grid.len(),
        )?;
        let mut out = self.clone();
        for ((g, s), target) in rows {
            let r = out.row_range(GoalId(g), StateId(s));
            descend_row(&mut out.logits[r], self.smoothing_eps, &target, cfg);
        }
        Ok(out)
    }
}

/// One weighted training example for the subgoal optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerExample {
    pub goal: GoalId,
    pub state: StateId,
    pub from: Waypoint,
    pub to: Waypoint,
    pub weight: f64,
}

/// Subgoal optimizer `h(ω' | ω, g, s)`.
///
/// Logically a `[goal][state][from][to]` table; rows that were never fitted
/// hold zero logits and are not materialized.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerModel {
    grid: WaypointGrid,
    rows: BTreeMap<(usize, usize, usize), Vec<f64>>,
    smoothing_eps: f64,
}

impl OptimizerModel {
    pub fn uniform(grid: WaypointGrid, smoothing_eps: f64) -> Self {
        OptimizerModel { grid, rows: BTreeMap::new(), smoothing_eps }
    }

    pub fn grid(&self) -> WaypointGrid {
        self.grid
    }

    pub fn smoothing_eps(&self) -> f64 {
        self.smoothing_eps
    }

    /// Materialized rows keyed by `(goal, state, from_index)`.
    pub fn rows(&self) -> &BTreeMap<(usize, usize, usize), Vec<f64>> {
        &self.rows
    }

    pub fn set_row(&mut self, g: GoalId, s: StateId, from: Waypoint, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.grid.len() {
            return Err(SegoError::InputDomain(format!(
                "optimizer row needs {} logits, got {}",
                self.grid.len(),
                logits.len()
            )));
        }
        self.rows.insert((g.0, s.0, self.grid.index(from)), logits);
        Ok(())
    }

    pub fn probs(&self, g: GoalId, s: StateId, from: Waypoint) -> Vec<f64> {
        match self.rows.get(&(g.0, s.0, self.grid.index(from))) {
            Some(row) => smoothed_probs(row, self.smoothing_eps),
            None => vec![1.0 / self.grid.len() as f64; self.grid.len()],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, g: GoalId, s: StateId, from: Waypoint, rng: &mut R) -> Waypoint {
        self.grid.waypoint(sample_categorical(&self.probs(g, s, from), rng))
    }

    /// `log h(to | from, g, s)`; the reverse density is `logprob(g, s, to, from)`.
    pub fn logprob(&self, g: GoalId, s: StateId, from: Waypoint, to: Waypoint) -> f64 {
        match self.rows.get(&(g.0, s.0, self.grid.index(from))) {
            Some(row) => smoothed_probs(row, self.smoothing_eps)[self.grid.index(to)].ln(),
            None => -(self.grid.len() as f64).ln(),
        }
    }

    pub fn weighted_cross_entropy(&self, data: &[OptimizerExample]) -> f64 {
        data.iter().map(|d| -d.weight * self.logprob(d.goal, d.state, d.from, d.to)).sum()
    }

    pub fn fit(&self, data: &[OptimizerExample], cfg: &FitConfig) -> Result<OptimizerModel> {
        cfg.validate()?;
        let grid = self.grid;
        let rows = histograms(
            data.iter().map(|d| ((d.goal.0, d.state.0, grid.index(d.from)), grid.index(d.to), d.weight)),
            grid.len(),
        )?;
        let mut out = self.clone();
        for (key, target) in rows {
            let row = out.rows.entry(key).or_insert_with(|| vec![0.0; grid.len()]);
            descend_row(row, self.smoothing_eps, &target, cfg);
        }
        Ok(out)
    }
}

/// Likelihood estimator: per-cell log values with a refit counter.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodEstimator {
    num_goals: usize,
    num_states: usize,
    log_values: Vec<f64>,
    version: u64,
}

/// EMA decay applied to log targets within one refit.
pub const LIKELIHOOD_EMA_DECAY: f64 = 0.5;

impl LikelihoodEstimator {
    /// Every cell starts at `prior` (version 0).
    pub fn constant(num_goals: usize, num_states: usize, prior: f64) -> Self {
        LikelihoodEstimator {
            num_goals,
            num_states,
            log_values: vec![prior.ln(); num_goals * num_states],
            version: 0,
        }
    }

    pub fn from_log_values(num_goals: usize, num_states: usize, log_values: Vec<f64>, version: u64) -> Result<Self> {
        if log_values.len() != num_goals * num_states {
            return Err(SegoError::InputDomain("likelihood table size mismatch".into()));
        }
        if log_values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(SegoError::Format("likelihood table holds NaN or +inf".into()));
        }
        Ok(LikelihoodEstimator { num_goals, num_states, log_values, version })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.num_goals, self.num_states)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    pub fn predict(&self, g: GoalId, s: StateId) -> f64 {
        self.log_values[g.0 * self.num_states + s.0].exp()
    }

    /// Per cell, an exponential moving average (decay 0.5) of the log targets
    /// in arrival order, seeded by the cell's first datum. Cells without data
    /// keep their previous value. Always bumps the version.
    pub fn fit(&self, data: &[((GoalId, StateId), f64)]) -> Result<LikelihoodEstimator> {
        let mut out = self.clone();
        let mut seen = vec![false; self.log_values.len()];
        for &((g, s), target) in data {
            if g.0 >= self.num_goals || s.0 >= self.num_states {
                return Err(SegoError::InputDomain(format!("cell (g={}, s={}) out of range", g.0, s.0)));
            }
            if !(target >= 0.0) || !target.is_finite() {
                return Err(SegoError::InputDomain(format!("likelihood target {target} must be finite and >= 0")));
            }
            let i = g.0 * self.num_states + s.0;
            let lt = target.ln();
            out.log_values[i] = if seen[i] {
                LIKELIHOOD_EMA_DECAY * out.log_values[i] + (1.0 - LIKELIHOOD_EMA_DECAY) * lt
            } else {
                lt
            };
            seen[i] = true;
        }
        out.version += 1;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid16() -> WaypointGrid {
        WaypointGrid::new(4, 4)
    }

    #[test]
    fn uniform_proposal_logprob_and_normalization() {
        let f = ProposalModel::uniform(grid16(), DEFAULT_SMOOTHING_EPS);
        let lp = f.log_probs(GoalId(1), StateId(2));
        for x in &lp {
            assert!((x + 16f64.ln()).abs() < 1e-12);
        }
        assert!(crate::math::log_sum_exp(&lp).abs() < 1e-10);
    }

    #[test]
    fn uniform_proposal_empirical_frequencies() {
        let f = ProposalModel::uniform(grid16(), DEFAULT_SMOOTHING_EPS);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mut counts = [0usize; 16];
        for _ in 0..n {
            counts[f.grid().index(f.sample(GoalId(0), StateId(3), &mut rng))] += 1;
        }
        let p = 1.0 / 16.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - p).abs() <= 4.0 * se);
        }
    }

    #[test]
    fn dominant_logit_and_smoothing_floor() {
        let grid = grid16();
        let mut f = ProposalModel::uniform(grid, DEFAULT_SMOOTHING_EPS);
        let mut row = vec![0.0; 16];
        row[5] = 20.0;
        f.set_logits(GoalId(2), StateId(2), &row);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let hits = (0..10_000).filter(|_| grid.index(f.sample(GoalId(2), StateId(2), &mut rng)) == 5).count();
        assert!(hits as f64 / 10_000.0 >= 0.999);

        let mut row = vec![-1e6; 16];
        row[0] = 0.0;
        f.set_logits(GoalId(1), StateId(1), &row);
        for p in f.probs(GoalId(1), StateId(1)) {
            assert!(p >= DEFAULT_SMOOTHING_EPS / 16.0);
        }
    }

    #[test]
    fn proposal_sampling_matches_logprob() {
        let grid = grid16();
        let mut f = ProposalModel::uniform(grid, 0.01);
        let row: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        f.set_logits(GoalId(3), StateId(0), &row);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts = [0usize; 16];
        for _ in 0..n {
            counts[grid.index(f.sample(GoalId(3), StateId(0), &mut rng))] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            let p = f.logprob(GoalId(3), StateId(0), grid.waypoint(i)).exp();
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() <= 4.0 * se, "cell {i}");
        }
    }

    #[test]
    fn proposal_fit_behaviour() {
        let grid = grid16();
        let f = ProposalModel::uniform(grid, DEFAULT_SMOOTHING_EPS);
        let cfg = FitConfig { learning_rate: 1.0, epochs: 500, l2: 0.0 };
        assert_eq!(f.fit(&[], &cfg).unwrap(), f);

        let target = grid.waypoint(7);
        let ex = ProposalExample { goal: GoalId(1), state: StateId(0), waypoint: target, weight: 1.0 };
        let fitted = f.fit(&[ex], &cfg).unwrap();
        assert!(fitted.logprob(GoalId(1), StateId(0), target).exp() > 0.9);
        assert!(fitted.weighted_cross_entropy(&[ex]) < f.weighted_cross_entropy(&[ex]));
        assert_eq!(fitted.logits(GoalId(0), StateId(0)), f.logits(GoalId(0), StateId(0)));

        let zero = ProposalExample { weight: 0.0, ..ex };
        assert_eq!(f.fit(&[zero], &cfg).unwrap(), f);
        let neg = ProposalExample { weight: -1.0, ..ex };
        assert!(f.fit(&[neg], &cfg).is_err());
    }

    #[test]
    fn zero_optimizer_is_symmetric_and_finite() {
        let grid = grid16();
        let h = OptimizerModel::uniform(grid, DEFAULT_SMOOTHING_EPS);
        let (a, b) = (grid.waypoint(3), grid.waypoint(12));
        let fwd = h.logprob(GoalId(0), StateId(1), a, b);
        let rev = h.logprob(GoalId(0), StateId(1), b, a);
        assert_eq!(fwd, rev);
        assert!(fwd.is_finite());
    }

    #[test]
    fn optimizer_fit_reduces_kl_to_target() {
        let grid = grid16();
        let h = OptimizerModel::uniform(grid, DEFAULT_SMOOTHING_EPS);
        let (g, s, from) = (GoalId(2), StateId(1), grid.waypoint(4));
        let raw: Vec<f64> = (0..16).map(|i| ((i * 7 % 5) as f64 + 0.5).powi(2)).collect();
        let z: f64 = raw.iter().sum();
        let target: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let kl = |m: &OptimizerModel| -> f64 {
            target.iter().enumerate().map(|(i, t)| t * (t.ln() - m.logprob(g, s, from, grid.waypoint(i)))).sum()
        };
        let data: Vec<OptimizerExample> = target
            .iter()
            .enumerate()
            .map(|(i, &t)| OptimizerExample { goal: g, state: s, from, to: grid.waypoint(i), weight: t })
            .collect();
        let fitted = h.fit(&data, &FitConfig { learning_rate: 0.5, epochs: 100, l2: 0.0 }).unwrap();
        assert!(kl(&fitted) < kl(&h));
        // reverse query reads a different row, still smoothed
        let rev = fitted.logprob(g, s, grid.waypoint(9), from);
        assert!(rev.is_finite());
        assert_eq!(fitted.rows().len(), 1);
    }

    #[test]
    fn optimizer_sampling_matches_logprob() {
        let grid = WaypointGrid::new(2, 3);
        let mut h = OptimizerModel::uniform(grid, 0.05);
        let from = grid.waypoint(2);
        h.set_row(GoalId(1), StateId(0), from, vec![1.0, -1.0, 0.0, 2.0, 0.5, -3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut counts = [0usize; 6];
        for _ in 0..n {
            counts[grid.index(h.sample(GoalId(1), StateId(0), from, &mut rng))] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            let p = h.logprob(GoalId(1), StateId(0), from, grid.waypoint(i)).exp();
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() <= 4.0 * se);
        }
    }

    #[test]
    fn likelihood_ema_rules() {
        let m = LikelihoodEstimator::constant(2, 3, 1e-6);
        assert_eq!(m.version(), 0);
        let cell = (GoalId(1), StateId(2));
        let one = m.fit(&[(cell, 0.3)]).unwrap();
        assert!((one.predict(cell.0, cell.1) - 0.3).abs() < 1e-15);
        assert_eq!(one.version(), 1);
        let two = m.fit(&[(cell, 0.2), (cell, 0.8)]).unwrap();
        let expected = 0.5 * 0.2f64.ln() + 0.5 * 0.8f64.ln();
        assert!((two.predict(cell.0, cell.1).ln() - expected).abs() < 1e-14);
        // untouched cells keep the prior
        assert!((two.predict(GoalId(0), StateId(0)) - 1e-6).abs() < 1e-18);
        assert!(matches!(m.fit(&[(cell, -0.1)]), Err(SegoError::InputDomain(_))));
        // a no-data refit still bumps the version
        assert_eq!(two.fit(&[]).unwrap().version(), 2);
    }

    #[test]
    fn likelihood_stays_in_target_hull() {
        let m = LikelihoodEstimator::constant(1, 1, 0.5);
        let cell = (GoalId(0), StateId(0));
        let targets = [0.1, 0.9, 0.4, 0.7, 0.2];
        let data: Vec<_> = targets.iter().map(|&t| (cell, t)).collect();
        let v = m.fit(&data).unwrap().predict(GoalId(0), StateId(0));
        assert!((0.1..=0.9).contains(&v));
    }
}
