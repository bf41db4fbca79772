//! Drivers behind each subcommand.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use sego_core::env::Environment;
use sego_core::trainer::{
    quarter_valid_difficulty, quarter_valid_fraction, write_checkpoint, write_metrics_csv, Ablation, IterationMetrics,
    Models, Trainer, TrainerConfig,
};
use sego_core::verify::{run_suite, Status, Suite, VerifyOptions};

use crate::config::ExperimentConfig;
use crate::report::{Artifact, MetricsSummary, RunReport};
use crate::UsageError;

/// Result of one training run.
pub struct RunOutcome {
    pub models: Models,
    pub metrics: Vec<IterationMetrics>,
    pub warmed_success_rate: f64,
}

impl RunOutcome {
    pub fn final_success_rate(&self) -> f64 {
        self.metrics.last().map_or(self.warmed_success_rate, |m| m.eval_success_rate)
    }

    pub fn summary(&self) -> MetricsSummary {
        MetricsSummary {
            iterations: self.metrics.len(),
            warmed_success_rate: self.warmed_success_rate,
            final_success_rate: self.final_success_rate(),
            first_quarter_valid_fraction: quarter_valid_fraction(&self.metrics, 0),
            last_quarter_valid_fraction: quarter_valid_fraction(&self.metrics, 3),
        }
    }
}

pub fn train_once(cfg: &TrainerConfig, env: &Environment, trace: Option<&Path>) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(env, cfg.clone())?;
    if let Some(path) = trace {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        trainer = trainer.with_trace(Box::new(BufWriter::new(file)))?;
    }
    let warmed_success_rate = trainer.eval_success_rate();
    for t in 0..cfg.n_max {
        let m = trainer.step(t)?;
        if (t + 1).is_multiple_of(cfg.batch_size) {
            log::info!("iteration {}: eval {:.4}, valid {:.3}", t + 1, m.eval_success_rate, m.valid_subgoal_fraction);
        }
    }
    let (models, metrics) = trainer.finish()?;
    Ok(RunOutcome { models, metrics, warmed_success_rate })
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| UsageError(format!("output directory {} is not writable: {e}", dir.display())))?;
    Ok(())
}

fn write_report(cfg: &ExperimentConfig, report: &RunReport) -> Result<PathBuf> {
    let ext = match cfg.output.report_format {
        crate::config::ReportFormat::Toml => "toml",
        crate::config::ReportFormat::Text => "txt",
    };
    let path = cfg.output.dir.join(format!("report.{ext}"));
    fs::write(&path, report.render(cfg.output.report_format))?;
    Ok(path)
}

pub fn cmd_train(cfg: &ExperimentConfig, trace: bool) -> Result<RunReport> {
    let env = cfg.validate()?;
    let dir = &cfg.output.dir;
    create_out_dir(dir)?;
    let trace_path = dir.join("chain_trace.csv");
    let outcome = train_once(&cfg.trainer, &env, trace.then_some(trace_path.as_path()))?;

    let metrics_path = dir.join("metrics.csv");
    write_metrics_csv(BufWriter::new(File::create(&metrics_path)?), &outcome.metrics)?;
    let ckpt = dir.join("checkpoint");
    let hash = cfg.hash();
    write_checkpoint(&ckpt, &outcome.models, &hash, outcome.metrics.len())?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;

    let mut report = RunReport::new("train", hash);
    report.metrics = Some(outcome.summary());
    let v = outcome.models.likelihood.version();
    let refits = outcome.metrics.len().div_ceil(cfg.trainer.batch_size) as u64;
    for (name, kind, version) in [
        ("metrics.csv", "metrics", 1),
        ("checkpoint/policy.tensor", "policy", refits),
        ("checkpoint/proposal.tensor", "proposal", if cfg.trainer.update_proposals { refits } else { 0 }),
        ("checkpoint/optimizer.tensor", "optimizer", if cfg.trainer.update_proposals { refits } else { 0 }),
        ("checkpoint/likelihood.tensor", "likelihood", v),
    ] {
        report.artifacts.push(Artifact { path: name.into(), kind: kind.into(), version });
    }
    if trace {
        report.artifacts.push(Artifact { path: "chain_trace.csv".into(), kind: "trace".into(), version: 1 });
    }
    write_report(cfg, &report)?;
    Ok(report)
}

pub fn cmd_verify(cfg: &ExperimentConfig, suite: &str, write: bool) -> Result<(RunReport, bool)> {
    let suite: Suite = suite.parse().map_err(|e: sego_core::SegoError| UsageError(e.to_string()))?;
    cfg.validate()?;
    let opts = VerifyOptions { seed: cfg.trainer.seed, mode: cfg.trainer.mode, ..Default::default() };
    let checks = run_suite(suite, &opts)?;
    for c in &checks {
        println!("{c}");
    }
    let ok = checks.iter().all(|c| c.status != Status::Fail);
    let mut report = RunReport::new("verify", cfg.hash());
    report.absorb_checks(&checks);
    if write {
        create_out_dir(&cfg.output.dir)?;
        write_report(cfg, &report)?;
    }
    Ok((report, ok))
}

/// One row of the ablation comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Ablation,
    pub seed: u64,
    pub warmed_success_rate: f64,
    pub final_success_rate: f64,
    pub first_quarter_valid: Option<f64>,
    pub last_quarter_valid: Option<f64>,
    pub first_quarter_difficulty: Option<f64>,
    pub last_quarter_difficulty: Option<f64>,
}

pub fn run_ablation(cfg: &ExperimentConfig, env: &Environment) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in Ablation::ALL {
        for &seed in &cfg.ablate.seeds {
            let tc = TrainerConfig { seed, ablation: variant, ..cfg.trainer.clone() };
            let out = train_once(&tc, env, None)?;
            log::info!("{} seed {seed}: final {:.4}", variant.name(), out.final_success_rate());
            rows.push(AblationRow {
                variant,
                seed,
                warmed_success_rate: out.warmed_success_rate,
                final_success_rate: out.final_success_rate(),
                first_quarter_valid: quarter_valid_fraction(&out.metrics, 0),
                last_quarter_valid: quarter_valid_fraction(&out.metrics, 3),
                first_quarter_difficulty: quarter_valid_difficulty(&out.metrics, 0),
                last_quarter_difficulty: quarter_valid_difficulty(&out.metrics, 3),
            });
        }
    }
    Ok(rows)
}

pub fn variant_mean(rows: &[AblationRow], variant: Ablation) -> f64 {
    let xs: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(|r| r.final_success_rate).collect();
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `FULL ≥ NO_SEQUENTIAL ≥ NO_SUBGOAL ≥ NO_SFT` with at most one equal pair.
pub fn ordering_holds(means: &[f64; 4]) -> bool {
    let ordered = means.windows(2).all(|w| w[0] >= w[1]);
    let ties = means.windows(2).filter(|w| w[0] == w[1]).count();
    ordered && ties <= 1
}

/// Counts of seeds meeting each end-to-end trend: final beats warmed,
/// valid fraction rises, valid difficulty does not fall.
pub fn trend_counts(rows: &[AblationRow]) -> (usize, usize, usize) {
    let full: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == Ablation::Full).collect();
    let a = full.iter().filter(|r| r.final_success_rate > r.warmed_success_rate).count();
    let b = full
        .iter()
        .filter(|r| matches!((r.first_quarter_valid, r.last_quarter_valid), (Some(x), Some(y)) if y > x))
        .count();
    let c = full
        .iter()
        .filter(|r| matches!((r.first_quarter_difficulty, r.last_quarter_difficulty), (Some(x), Some(y)) if y >= x))
        .count();
    (a, b, c)
}

pub fn write_comparison_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "seed", "warmed_success_rate", "final_success_rate"])?;
    for r in rows {
        w.write_record([
            r.variant.name().to_string(),
            r.seed.to_string(),
            r.warmed_success_rate.to_string(),
            r.final_success_rate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<RunReport> {
    let env = cfg.validate()?;
    if cfg.ablate.seeds.is_empty() {
        return Err(UsageError("ablate.seeds must list at least one seed".into()).into());
    }
    create_out_dir(&cfg.output.dir)?;
    let rows = run_ablation(cfg, &env)?;
    write_comparison_csv(&cfg.output.dir.join("comparison.csv"), &rows)?;

    let means = Ablation::ALL.map(|v| variant_mean(&rows, v));
    let mut report = RunReport::new("ablate", cfg.hash());
    let detail = Ablation::ALL
        .iter()
        .zip(means)
        .map(|(v, m)| format!("{} {m:.4}", v.name()))
        .collect::<Vec<_>>()
        .join(", ");
    let status = if ordering_holds(&means) { Status::Pass } else { Status::Fail };
    report.set(10, status, detail);
    let n = cfg.ablate.seeds.len();
    let (a, b, c) = trend_counts(&rows);
    let need = |k: usize, of5: usize| k * 5 >= of5 * n;
    let ok9 = need(a, 4) && need(b, 4) && need(c, 3);
    report.set(
        9,
        if ok9 { Status::Pass } else { Status::Fail },
        format!("improves {a}/{n}, valid rises {b}/{n}, difficulty holds {c}/{n}"),
    );
    report.artifacts.push(Artifact { path: "comparison.csv".into(), kind: "comparison".into(), version: 1 });
    write_report(cfg, &report)?;
    for (v, m) in Ablation::ALL.iter().zip(means) {
        println!("{:<14} {m:.4}", v.name());
    }
    Ok(report)
}

pub fn cmd_plot(input: &Path, output: &Path, columns: &[String]) -> Result<()> {
    let text = fs::read_to_string(input).map_err(|e| UsageError(format!("cannot read {}: {e}", input.display())))?;
    let svg = crate::plot::render_svg(&text, columns)?;
    fs::write(output, svg).with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}
