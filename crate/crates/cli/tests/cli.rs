use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sego(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sego-kit")).args(args).current_dir(dir).output().unwrap()
}

fn small(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        "[env]\nkind = \"gridnav\"\nwidth = 3\nheight = 3\nhorizon = 4\nstart = [0, 0]\n\n[trainer]\nn_max = 40\nbatch_size = 20\nwarmup_pairs = 20\n\n[ablate]\nseeds = [0, 1]\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn missing_config_exits_2_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = sego(&["train", "--config", "nowhere/exp.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/exp.toml"));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = sego(&["train", "--set", "trainer.num_chains=0", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = sego(&["train", "--set", "trainer.no_such_key=1", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_suite_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sego(&["verify", "nonsense"], dir.path()).status.code(), Some(2));
}

#[test]
fn zero_iterations_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = sego(&["train", "--config", &cfg, "--set", "trainer.n_max=0", "--out", "z"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("z/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.starts_with("iteration,"));
}

#[test]
fn train_writes_all_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    for name in ["a", "b"] {
        let out = sego(&["train", "--config", &cfg, "--seed", "9", "--trace", "--workers", "2", "--out", name], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["metrics.csv", "chain_trace.csv", "checkpoint/policy.tensor", "checkpoint/likelihood.tensor"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(file)).unwrap(), "{file}");
    }
    let report = fs::read_to_string(dir.path().join("a/report.toml")).unwrap();
    assert_eq!(report.matches("[[criteria]]").count(), 11);
    for id in 1..=11 {
        assert_eq!(report.matches(&format!("id = {id}\n")).count(), 1, "criterion {id}");
    }
    let trace = fs::read_to_string(dir.path().join("a/chain_trace.csv")).unwrap();
    assert!(trace.starts_with("chain_id,level,subgoal,substate,accepted,log_f_level,log_alpha_partial"));
}

#[test]
fn verify_lemmas_passes_and_greedy_skips_unbiasedness() {
    let dir = tempfile::tempdir().unwrap();
    let out = sego(&["verify", "lemmas"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");

    let out = sego(&["verify", "unbiasedness", "--set", "trainer.mode=\"greedy\"", "--out", "v"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.contains("P3-gridnav")).all(|l| l.starts_with("SKIP")));
    assert!(text.lines().any(|l| l.starts_with("PASS L2-greedy")));
    assert!(dir.path().join("v/report.toml").exists());
}

#[test]
fn ablate_emits_one_row_per_variant_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = sego(&["ablate", "--config", &cfg, "--out", "ab"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(dir.path().join("ab/comparison.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 8);
    for v in ["full", "no_sequential", "no_subgoal", "no_sft"] {
        assert_eq!(rows.iter().filter(|r| &r[0] == v).count(), 2);
    }
    let sft: Vec<&csv::StringRecord> = rows.iter().filter(|r| &r[0] == "no_sft").collect();
    assert_eq!(sft[0][2], sft[0][3]);
    assert_eq!(sft[0][3], sft[1][3]);
}

#[test]
fn plot_renders_svg() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.csv"), "iteration,eval_success_rate\n0,0.5\n1,0.6\n").unwrap();
    let out = sego(&["plot", "--input", "m.csv", "--output", "m.svg"], dir.path());
    assert!(out.status.success());
    assert!(fs::read_to_string(dir.path().join("m.svg")).unwrap().starts_with("<svg"));
    let out = sego(&["plot", "--input", "m.csv", "--output", "m.svg", "--column", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
