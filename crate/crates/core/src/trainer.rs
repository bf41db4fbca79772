//! The outer training loop: warmup, per-task subgoal sampling, rollouts,
//! dataset accumulation and batched refits.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annealer::{
    run_chains, select_subgoal, write_chain_trace, AnnealedTarget, BetaSchedule, TransitionMode, CHAIN_TRACE_HEADER,
};
use crate::env::{Environment, GoalId, StateId, Trajectory};
use crate::error::{Result, SegoError};
use crate::math::log_mean_exp;
use crate::models::{
    LikelihoodEstimator, OptimizerExample, OptimizerModel, ProposalExample, ProposalModel, DEFAULT_SMOOTHING_EPS,
};
use crate::policy::{FitConfig, TabularPolicy};
use crate::posterior::{ValueFn, ValueSource, Waypoint, WaypointGrid};
use crate::rng;
use crate::tensor;

/// Floor applied to warmup success fractions before they enter `M`.
pub const WARMUP_PRIOR_FLOOR: f64 = 1e-6;
/// Trailing window (iterations) for the per-iteration trend metrics.
pub const METRIC_WINDOW: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoSequential,
    NoSubgoal,
    NoSft,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoSequential, Ablation::NoSubgoal, Ablation::NoSft];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSequential => "no_sequential",
            Ablation::NoSubgoal => "no_subgoal",
            Ablation::NoSft => "no_sft",
        }
    }

    pub fn features(self) -> Features {
        let (warmup, self_training, subgoals, annealing) = match self {
            Ablation::NoSft => (false, false, false, false),
            Ablation::NoSubgoal => (true, true, false, false),
            Ablation::NoSequential => (true, true, true, false),
            Ablation::Full => (true, true, true, true),
        };
        Features { warmup, self_training, subgoals, annealing }
    }
}

/// Pieces of the full iteration a variant runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Features {
    pub warmup: bool,
    pub self_training: bool,
    pub subgoals: bool,
    pub annealing: bool,
}

impl Features {
    pub fn as_array(self) -> [bool; 4] {
        [self.warmup, self.self_training, self.subgoals, self.annealing]
    }

    /// Every feature enabled here is enabled in `other`.
    pub fn is_subset_of(self, other: Features) -> bool {
        self.as_array().iter().zip(other.as_array()).all(|(a, b)| !a || b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleOrder {
    Descending,
    AsPrinted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub n_max: usize,
    pub num_chains: usize,
    /// Explicit β ladder; must be strictly decreasing. Overrides `schedule_order`.
    pub betas: Option<Vec<f64>>,
    pub schedule_order: ScheduleOrder,
    pub mode: TransitionMode,
    pub warmup_rollouts: usize,
    /// Tasks sampled for shortest-path demonstrations; `None` uses every task.
    pub warmup_pairs: Option<usize>,
    pub warmup_fit: FitConfig,
    pub policy_fit: FitConfig,
    pub proposal_fit: FitConfig,
    pub seed: u64,
    pub ablation: Ablation,
    pub value_mode: ValueSource,
    pub update_proposals: bool,
    pub batch_size: usize,
    pub smoothing_eps: f64,
    /// Record real wall-clock times; off keeps metrics byte-reproducible.
    pub timing: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            n_max: 300,
            num_chains: 2,
            betas: None,
            schedule_order: ScheduleOrder::Descending,
            mode: TransitionMode::Stochastic,
            warmup_rollouts: 100,
            warmup_pairs: Some(150),
            warmup_fit: FitConfig { learning_rate: 0.5, epochs: 100, l2: 0.0 },
            policy_fit: FitConfig::default(),
            proposal_fit: FitConfig::default(),
            seed: 0,
            ablation: Ablation::Full,
            value_mode: ValueSource::Exact,
            update_proposals: false,
            batch_size: 32,
            smoothing_eps: DEFAULT_SMOOTHING_EPS,
            timing: false,
        }
    }
}

impl TrainerConfig {
    pub fn schedule(&self) -> Result<BetaSchedule> {
        match (&self.betas, self.schedule_order) {
            (Some(b), _) => BetaSchedule::new(b.clone()),
            (None, ScheduleOrder::Descending) => Ok(BetaSchedule::default_eta3()),
            (None, ScheduleOrder::AsPrinted) => Ok(BetaSchedule::as_printed_eta3()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_chains == 0 {
            return Err(SegoError::Configuration("num_chains must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(SegoError::Configuration("batch_size must be >= 1".into()));
        }
        if self.warmup_rollouts == 0 {
            return Err(SegoError::Configuration("warmup_rollouts must be >= 1".into()));
        }
        if !(self.smoothing_eps > 0.0 && self.smoothing_eps < 1.0) {
            return Err(SegoError::Configuration(format!("smoothing_eps must lie in (0, 1), got {}", self.smoothing_eps)));
        }
        self.schedule()?;
        self.warmup_fit.validate()?;
        self.policy_fit.validate()?;
        self.proposal_fit.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetD1 {
    trajectories: Vec<Trajectory>,
}

impl DatasetD1 {
    /// Appends `t` if it reached its goal; returns whether it was kept.
    pub fn push(&mut self, t: Trajectory) -> bool {
        if t.reached {
            self.trajectories.push(t);
            true
        } else {
            false
        }
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetD2 {
    entries: Vec<((GoalId, StateId), f64)>,
}

impl DatasetD2 {
    pub fn push(&mut self, task: (GoalId, StateId), alpha_bar: f64) -> Result<()> {
        if !(alpha_bar >= 0.0) {
            return Err(SegoError::InputDomain(format!("alpha_bar {alpha_bar} must be >= 0")));
        }
        self.entries.push((task, alpha_bar));
        Ok(())
    }

    pub fn entries(&self) -> &[((GoalId, StateId), f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub policy: TabularPolicy,
    pub proposal: ProposalModel,
    pub optimizer: OptimizerModel,
    pub likelihood: LikelihoodEstimator,
}

impl Models {
    /// Never-trained models: uniform policy, proposal and optimizer, and `M`
    /// at the warmup floor everywhere.
    pub fn untrained(env: &Environment, smoothing_eps: f64) -> Models {
        let grid = WaypointGrid::of(env);
        Models {
            policy: TabularPolicy::uniform(env),
            proposal: ProposalModel::uniform(grid, smoothing_eps),
            optimizer: OptimizerModel::uniform(grid, smoothing_eps),
            likelihood: LikelihoodEstimator::constant(env.num_goals(), env.num_states(), WARMUP_PRIOR_FLOOR),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Over the trailing `METRIC_WINDOW` iterations.
    pub valid_subgoal_fraction: f64,
    pub eval_success_rate: f64,
    /// `NaN` when the iteration ran no chains.
    pub mean_log_alpha: f64,
    /// Mean task difficulty over valid-subgoal iterations in the trailing
    /// window; `NaN` if there were none.
    pub mean_difficulty_of_valid: f64,
    pub wall_ms: u64,
    pub task: (GoalId, StateId),
    pub task_difficulty: u32,
    /// `None` when the variant draws no subgoal or the task was skipped.
    pub subgoal_valid: Option<bool>,
    pub skipped: bool,
}

pub const METRICS_HEADER: [&str; 6] = [
    "iteration",
    "valid_subgoal_fraction",
    "eval_success_rate",
    "mean_log_alpha",
    "mean_difficulty_of_valid",
    "wall_ms",
];

pub fn write_metrics_csv<W: Write>(out: W, metrics: &[IterationMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for m in metrics {
        w.write_record([
            m.iteration.to_string(),
            m.valid_subgoal_fraction.to_string(),
            m.eval_success_rate.to_string(),
            m.mean_log_alpha.to_string(),
            m.mean_difficulty_of_valid.to_string(),
            m.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Samples demonstration tasks, clones shortest paths into a fresh uniform
/// policy, then fits `M` on Monte-Carlo success fractions of that policy for
/// every `(goal, state)` cell.
pub fn warmup(env: &Environment, cfg: &TrainerConfig) -> Result<(TabularPolicy, LikelihoodEstimator)> {
    let mut tasks = env.task_set();
    let mut r = rng::stream(cfg.seed, "warmup-tasks", &[]);
    tasks.shuffle(&mut r);
    let n = cfg.warmup_pairs.map_or(tasks.len(), |k| k.min(tasks.len()));
    let demos: Vec<Trajectory> = tasks[..n]
        .iter()
        .map(|&(g, s)| {
            let path = env.shortest_path(s, g).expect("task set entries are reachable");
            Trajectory::replay(env, s, g, &path)
        })
        .collect();
    let uniform = TabularPolicy::uniform(env);
    let policy = if demos.is_empty() { uniform } else { uniform.fit_on_trajectories(&demos, &cfg.warmup_fit)? };
    let likelihood = fit_warmup_likelihood(&policy, env, cfg.warmup_rollouts, cfg.seed)?;
    log::debug!("warmup cloned {n} shortest paths");
    Ok((policy, likelihood))
}

fn fit_warmup_likelihood(
    policy: &TabularPolicy,
    env: &Environment,
    rollouts: usize,
    seed: u64,
) -> Result<LikelihoodEstimator> {
    let grid = WaypointGrid::of(env);
    let data = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let w = grid.waypoint(i);
            let mut r = rng::stream(seed, "warmup-mc", &[i as u64]);
            let p = policy.success_prob_mc(env, w.subgoal, w.substate, rollouts, &mut r)?;
            Ok(((w.subgoal, w.substate), p.max(WARMUP_PRIOR_FLOOR)))
        })
        .collect::<Result<Vec<_>>>()?;
    LikelihoodEstimator::constant(env.num_goals(), env.num_states(), WARMUP_PRIOR_FLOOR).fit(&data)
}

/// Both legs of a waypoint succeed: `s_w → g` and `s → g_w`.
pub fn is_valid_subgoal<R: Rng + ?Sized>(
    w: Waypoint,
    g: GoalId,
    s: StateId,
    policy: &TabularPolicy,
    env: &Environment,
    rng: &mut R,
) -> bool {
    let first = policy.rollout(env, w.substate, g, rng).reached;
    let second = policy.rollout(env, s, w.subgoal, rng).reached;
    first && second
}

/// Fraction of `pairs` solved by argmax rollouts.
pub fn evaluate(policy: &TabularPolicy, env: &Environment, pairs: &[(GoalId, StateId)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(SegoError::InputDomain("evaluation needs at least one (goal, state) pair".into()));
    }
    let hits = pairs.iter().filter(|&&(g, s)| policy.greedy_rollout(env, s, g).reached).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// What one iteration produced before aggregation into metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationOutcome {
    pub task: (GoalId, StateId),
    pub subgoal: Option<Waypoint>,
    pub subgoal_valid: Option<bool>,
    pub log_alphas: Vec<f64>,
    pub alpha_bar: Option<f64>,
    pub skipped: bool,
    pub proposal_example: Option<ProposalExample>,
    pub optimizer_examples: Vec<OptimizerExample>,
}

/// Mutable training state shared across iterations.
pub struct Trainer<'a> {
    env: &'a Environment,
    cfg: TrainerConfig,
    schedule: BetaSchedule,
    features: Features,
    pub models: Models,
    pub warmed_policy: TabularPolicy,
    pub d1: DatasetD1,
    pub d2: DatasetD2,
    batch_d2: DatasetD2,
    batch_proposal: Vec<ProposalExample>,
    batch_optimizer: Vec<OptimizerExample>,
    tasks: Vec<(GoalId, StateId)>,
    values: Option<ValueFn>,
    eval: f64,
    history: Vec<IterationMetrics>,
    trace: Option<csv::Writer<Box<dyn Write + Send + 'a>>>,
}

impl<'a> Trainer<'a> {
    pub fn new(env: &'a Environment, cfg: TrainerConfig) -> Result<Trainer<'a>> {
        cfg.validate()?;
        let schedule = cfg.schedule()?;
        let features = cfg.ablation.features();
        let mut models = Models::untrained(env, cfg.smoothing_eps);
        if features.warmup {
            let (policy, likelihood) = warmup(env, &cfg)?;
            models.policy = policy;
            models.likelihood = likelihood;
        }
        let tasks = env.task_set();
        let eval = evaluate(&models.policy, env, &tasks)?;
        Ok(Trainer {
            env,
            warmed_policy: models.policy.clone(),
            cfg,
            schedule,
            features,
            models,
            d1: DatasetD1::default(),
            d2: DatasetD2::default(),
            batch_d2: DatasetD2::default(),
            batch_proposal: Vec::new(),
            batch_optimizer: Vec::new(),
            tasks,
            values: None,
            eval,
            history: Vec::new(),
            trace: None,
        })
    }

    /// Streams every chain to `out` as CSV; chain ids are `iteration * num_chains + c`.
    pub fn with_trace(mut self, out: Box<dyn Write + Send + 'a>) -> Result<Self> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CHAIN_TRACE_HEADER)?;
        self.trace = Some(w);
        Ok(self)
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn tasks(&self) -> &[(GoalId, StateId)] {
        &self.tasks
    }

    pub fn eval_success_rate(&self) -> f64 {
        self.eval
    }

    pub fn history(&self) -> &[IterationMetrics] {
        &self.history
    }

    fn value_fn(&mut self) -> &ValueFn {
        if self.values.is_none() {
            self.values = Some(match self.cfg.value_mode {
                ValueSource::Exact => ValueFn::exact(&self.models.policy, self.env),
                ValueSource::Learned => ValueFn::learned(&self.models.likelihood, self.env),
            });
        }
        self.values.as_ref().unwrap()
    }

    /// One pass of the loop body for iteration `t`, without refits.
    pub fn sample_iteration(&mut self, t: usize) -> Result<IterationOutcome> {
        let mut r = rng::stream(self.cfg.seed, "iteration", &[t as u64]);
        let task = self.tasks[r.random_range(0..self.tasks.len())];
        let (g, s) = task;
        let mut out = IterationOutcome {
            task,
            subgoal: None,
            subgoal_valid: None,
            log_alphas: Vec::new(),
            alpha_bar: None,
            skipped: false,
            proposal_example: None,
            optimizer_examples: Vec::new(),
        };
        if !self.features.self_training {
            return Ok(out);
        }
        if !self.features.subgoals {
            let tau = self.models.policy.rollout(self.env, s, g, &mut r);
            self.d1.push(tau);
            return Ok(out);
        }

        let w0 = if self.features.annealing {
            let schedule = self.schedule.clone();
            let values = self.value_fn().clone();
            let target = AnnealedTarget::from_models(g, s, &values, self.env, &self.models.proposal, schedule)?;
            if target.log_f0().iter().all(|x| *x == f64::NEG_INFINITY) {
                log::debug!("iteration {t}: task ({}, {}) has a vanishing target, skipped", g.0, s.0);
                out.skipped = true;
                return Ok(out);
            }
            let n = self.cfg.num_chains;
            let chains = run_chains(&target, &self.models.optimizer, self.cfg.mode, n, self.cfg.seed, &[t as u64])?;
            if let Some(trace) = self.trace.as_mut() {
                write_chain_trace(trace, &target, &chains, t * n)?;
            }
            out.log_alphas = chains.iter().map(|c| c.log_alpha).collect();
            let alpha_bar = log_mean_exp(&out.log_alphas).exp();
            let (w0, weights) = select_subgoal(&chains, &mut r)?;
            for (c, wt) in chains.iter().zip(&weights) {
                out.optimizer_examples.push(OptimizerExample {
                    goal: g,
                    state: s,
                    from: c.waypoints[0],
                    to: c.selected(),
                    weight: *wt,
                });
            }
            out.alpha_bar = Some(alpha_bar);
            self.batch_d2.push(task, alpha_bar)?;
            self.d2.push(task, alpha_bar)?;
            w0
        } else {
            let w0 = self.models.proposal.sample(g, s, &mut r);
            out.alpha_bar = Some(1.0);
            self.batch_d2.push(task, 1.0)?;
            self.d2.push(task, 1.0)?;
            w0
        };
        out.subgoal = Some(w0);
        out.proposal_example = Some(ProposalExample { goal: g, state: s, waypoint: w0, weight: 1.0 });

        let tau1 = self.models.policy.rollout(self.env, w0.substate, g, &mut r);
        let tau2 = self.models.policy.rollout(self.env, s, w0.subgoal, &mut r);
        out.subgoal_valid = Some(tau1.reached && tau2.reached);
        self.d1.push(tau1);
        self.d1.push(tau2);
        if let Some(p) = out.proposal_example {
            self.batch_proposal.push(p);
        }
        self.batch_optimizer.extend(out.optimizer_examples.iter().copied());
        Ok(out)
    }

    /// Refits `π` on all of D1 and `M` on this batch's D2; optionally `f`
    /// and `h` on the batch's selected subgoals.
    pub fn refit(&mut self) -> Result<()> {
        if !self.features.self_training {
            return Ok(());
        }
        if !self.d1.is_empty() {
            self.models.policy = self.models.policy.fit_on_trajectories(self.d1.trajectories(), &self.cfg.policy_fit)?;
        }
        if !self.batch_d2.is_empty() {
            self.models.likelihood = self.models.likelihood.fit(self.batch_d2.entries())?;
        }
        if self.cfg.update_proposals {
            self.models.proposal = self.models.proposal.fit(&self.batch_proposal, &self.cfg.proposal_fit)?;
            self.models.optimizer = self.models.optimizer.fit(&self.batch_optimizer, &self.cfg.proposal_fit)?;
        }
        self.batch_d2 = DatasetD2::default();
        self.batch_proposal.clear();
        self.batch_optimizer.clear();
        self.values = None;
        self.eval = evaluate(&self.models.policy, self.env, &self.tasks)?;
        Ok(())
    }

    /// Runs iteration `t` (refitting at batch boundaries) and records metrics.
    pub fn step(&mut self, t: usize) -> Result<IterationMetrics> {
        let started = Instant::now();
        let out = self.sample_iteration(t)?;
        if (t + 1).is_multiple_of(self.cfg.batch_size) || t + 1 == self.cfg.n_max {
            self.refit()?;
        }
        let (g, s) = out.task;
        let mut m = IterationMetrics {
            iteration: t,
            valid_subgoal_fraction: 0.0,
            eval_success_rate: self.eval,
            mean_log_alpha: if out.log_alphas.is_empty() {
                f64::NAN
            } else {
                out.log_alphas.iter().sum::<f64>() / out.log_alphas.len() as f64
            },
            mean_difficulty_of_valid: f64::NAN,
            wall_ms: 0,
            task: out.task,
            task_difficulty: self.env.task_difficulty(g, s).unwrap_or(0),
            subgoal_valid: out.subgoal_valid,
            skipped: out.skipped,
        };
        let lo = self.history.len().saturating_sub(METRIC_WINDOW - 1);
        let window: Vec<&IterationMetrics> = self.history[lo..].iter().chain(std::iter::once(&m)).collect();
        let valid: Vec<u32> =
            window.iter().filter(|x| x.subgoal_valid == Some(true)).map(|x| x.task_difficulty).collect();
        let valid_fraction = valid.len() as f64 / window.len() as f64;
        let mean_difficulty =
            if valid.is_empty() { f64::NAN } else { valid.iter().map(|&d| d as f64).sum::<f64>() / valid.len() as f64 };
        m.valid_subgoal_fraction = valid_fraction;
        m.mean_difficulty_of_valid = mean_difficulty;
        if self.cfg.timing {
            m.wall_ms = started.elapsed().as_millis() as u64;
        }
        self.history.push(m.clone());
        Ok(m)
    }

    pub fn finish(mut self) -> Result<(Models, Vec<IterationMetrics>)> {
        if let Some(trace) = self.trace.as_mut() {
            trace.flush()?;
        }
        Ok((self.models, self.history))
    }
}

/// Full run: warmup then `n_max` iterations, every random draw derived from
/// `cfg.seed`.
pub fn run_training(cfg: &TrainerConfig, env: &Environment) -> Result<(Models, Vec<IterationMetrics>)> {
    let mut trainer = Trainer::new(env, cfg.clone())?;
    for t in 0..cfg.n_max {
        trainer.step(t)?;
    }
    trainer.finish()
}

/// Mean of `f` over the iterations in quarter `q` (0-based) of `metrics`.
pub fn quarter_mean(metrics: &[IterationMetrics], q: usize, f: impl Fn(&IterationMetrics) -> Option<f64>) -> Option<f64> {
    let n = metrics.len();
    let (lo, hi) = (q * n / 4, (q + 1) * n / 4);
    let xs: Vec<f64> = metrics[lo..hi].iter().filter_map(f).collect();
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Fraction of iterations in quarter `q` whose subgoal was valid.
pub fn quarter_valid_fraction(metrics: &[IterationMetrics], q: usize) -> Option<f64> {
    quarter_mean(metrics, q, |m| Some(if m.subgoal_valid == Some(true) { 1.0 } else { 0.0 }))
}

/// Mean task difficulty over valid-subgoal iterations in quarter `q`.
pub fn quarter_valid_difficulty(metrics: &[IterationMetrics], q: usize) -> Option<f64> {
    quarter_mean(metrics, q, |m| (m.subgoal_valid == Some(true)).then_some(m.task_difficulty as f64))
}

/// Writes `policy.tensor`, `proposal.tensor`, `optimizer.tensor`,
/// `likelihood.tensor` and `manifest.toml` into `dir`.
pub fn write_checkpoint(dir: &Path, models: &Models, config_hash: &str, iteration: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    tensor::policy_to_tensor(&models.policy).save(&dir.join("policy.tensor"))?;
    tensor::proposal_to_tensor(&models.proposal).save(&dir.join("proposal.tensor"))?;
    tensor::optimizer_to_tensor(&models.optimizer).save(&dir.join("optimizer.tensor"))?;
    tensor::likelihood_to_tensor(&models.likelihood).save(&dir.join("likelihood.tensor"))?;
    let manifest = format!(
        "config_hash = \"{config_hash}\"\niteration = {iteration}\nformat_version = {}\nlikelihood_version = {}\nfiles = [\"policy.tensor\", \"proposal.tensor\", \"optimizer.tensor\", \"likelihood.tensor\"]\n",
        tensor::FORMAT_VERSION,
        models.likelihood.version()
    );
    fs::write(dir.join("manifest.toml"), manifest)?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<Models> {
    let load = |name: &str| tensor::Tensor::load(&dir.join(name));
    Ok(Models {
        policy: tensor::policy_from_tensor(&load("policy.tensor")?)?,
        proposal: tensor::proposal_from_tensor(&load("proposal.tensor")?)?,
        optimizer: tensor::optimizer_from_tensor(&load("optimizer.tensor")?)?,
        likelihood: tensor::likelihood_from_tensor(&load("likelihood.tensor")?)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::build_gridnav;

    fn small_cfg() -> TrainerConfig {
        TrainerConfig { n_max: 40, batch_size: 8, warmup_pairs: Some(20), warmup_rollouts: 20, ..Default::default() }
    }

    #[test]
    fn ablation_lattice_is_strict() {
        let order = [Ablation::NoSft, Ablation::NoSubgoal, Ablation::NoSequential, Ablation::Full];
        for w in order.windows(2) {
            let (a, b) = (w[0].features(), w[1].features());
            assert!(a.is_subset_of(b));
            assert_ne!(a, b);
        }
    }

    #[test]
    fn zero_iterations_returns_warmed_models() {
        let env = build_gridnav(3, 3, 4).unwrap();
        let cfg = TrainerConfig { n_max: 0, ..small_cfg() };
        let (models, metrics) = run_training(&cfg, &env).unwrap();
        let (policy, m) = warmup(&env, &cfg).unwrap();
        assert!(metrics.is_empty());
        assert_eq!(models.policy, policy);
        assert_eq!(models.likelihood, m);
    }

    #[test]
    fn warmup_without_demonstrations_is_uniform() {
        let env = build_gridnav(3, 3, 4).unwrap();
        let cfg = TrainerConfig { warmup_pairs: Some(0), warmup_rollouts: 5, ..Default::default() };
        let (policy, _) = warmup(&env, &cfg).unwrap();
        assert_eq!(policy, TabularPolicy::uniform(&env));
    }

    #[test]
    fn iteration_invariants() {
        let env = build_gridnav(3, 3, 4).unwrap();
        let mut trainer = Trainer::new(&env, small_cfg()).unwrap();
        for t in 0..40 {
            let m = trainer.step(t).unwrap();
            assert!((0.0..=1.0).contains(&m.valid_subgoal_fraction));
            assert!((0.0..=1.0).contains(&m.eval_success_rate));
        }
        assert!(trainer.d1.trajectories().iter().all(|t| t.reached));
        assert_eq!(trainer.d2.len(), 40);
        assert_eq!(trainer.models.likelihood.version(), 1 + 5);
    }

    #[test]
    fn no_subgoal_variant_runs_no_chains() {
        let env = build_gridnav(3, 3, 4).unwrap();
        let cfg = TrainerConfig { ablation: Ablation::NoSubgoal, ..small_cfg() };
        let mut trainer = Trainer::new(&env, cfg).unwrap();
        for t in 0..10 {
            let out = trainer.sample_iteration(t).unwrap();
            assert!(out.subgoal.is_none() && out.log_alphas.is_empty());
        }
        assert!(trainer.d2.is_empty());
    }

    #[test]
    fn no_sequential_variant_uses_unit_weights() {
        let env = build_gridnav(3, 3, 4).unwrap();
        let cfg = TrainerConfig { ablation: Ablation::NoSequential, ..small_cfg() };
        let mut trainer = Trainer::new(&env, cfg).unwrap();
        for t in 0..10 {
            let out = trainer.sample_iteration(t).unwrap();
            assert_eq!(out.alpha_bar, Some(1.0));
            assert!(out.log_alphas.is_empty() && out.subgoal.is_some());
        }
    }

    #[test]
    fn no_sft_never_trains() {
        let env = build_gridnav(3, 3, 4).unwrap();
        let cfg = TrainerConfig { ablation: Ablation::NoSft, ..small_cfg() };
        let (models, metrics) = run_training(&cfg, &env).unwrap();
        assert_eq!(models.policy, TabularPolicy::uniform(&env));
        let base = evaluate(&TabularPolicy::uniform(&env), &env, &env.task_set()).unwrap();
        assert!(metrics.iter().all(|m| m.eval_success_rate == base));
    }

    #[test]
    fn evaluate_contracts() {
        let env = build_gridnav(3, 3, 4).unwrap();
        assert!(evaluate(&TabularPolicy::uniform(&env), &env, &[]).is_err());
        let cfg = TrainerConfig { warmup_pairs: None, ..small_cfg() };
        let (warmed, _) = warmup(&env, &cfg).unwrap();
        assert_eq!(evaluate(&warmed, &env, &env.task_set()).unwrap(), 1.0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let env = build_gridnav(2, 2, 2).unwrap();
        let cfg = TrainerConfig { n_max: 8, ..small_cfg() };
        let (models, _) = run_training(&cfg, &env).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(dir.path(), &models, "abc", 8).unwrap();
        assert_eq!(read_checkpoint(dir.path()).unwrap(), models);
        let manifest = fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
        assert!(manifest.contains("config_hash = \"abc\"") && manifest.contains("iteration = 8"));
    }

    #[test]
    fn metrics_csv_layout() {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), METRICS_HEADER.join(",") + "\n");
    }
}
