use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

use twophase::eif::{Problem, ProblemKind};
use twophase::io::RuleFile;
use twophase::moments::{BasisSpec, MomentModel};
use twophase::rule::SamplingRule;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_twophase"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_scenario(dir: &Path, n: usize, reps: usize) -> PathBuf {
    let path = dir.join("small.conf");
    fs::write(
        &path,
        format!("dgp = ate_scalar\nn = {n}\nq = 1\nvarpi = 0.3\nreps = {reps}\nseed = 7\nrules = uniform,sopt\n"),
    )
    .unwrap();
    path
}

/// Data rows of a CSV, skipping `#` comments and the header.
fn data_lines(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn zero_replicates_is_rejected() {
    let dir = TempDir::new().unwrap();
    let conf = small_scenario(dir.path(), 1500, 0);
    let out = dir.path().join("out.csv");
    let res = run(&["simulate", path_str(&conf), "--out", path_str(&out)]);
    assert!(!res.status.success());
}

#[test]
fn failed_replicates_give_exit_code_two() {
    // A pilot of about fifteen units makes one of these logit fits degenerate.
    let dir = TempDir::new().unwrap();
    let conf = small_scenario(dir.path(), 400, 6);
    let out = dir.path().join("out.csv");
    let res = run(&["simulate", path_str(&conf), "--out", path_str(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("1 failed"));
    assert!(fs::read_to_string(&out).unwrap().contains("# failed_replicates = 1"));
}

#[test]
fn simulate_is_deterministic_across_threads() {
    let dir = TempDir::new().unwrap();
    let conf = small_scenario(dir.path(), 1500, 6);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert!(run(&["simulate", path_str(&conf), "--out", path_str(&a)]).status.success());
    assert!(run(&["simulate", path_str(&conf), "--out", path_str(&b), "--threads", "2"]).status.success());
    let ta = fs::read(&a).unwrap();
    assert_eq!(ta, fs::read(&b).unwrap());
    let text = String::from_utf8(ta).unwrap();
    assert!(text.starts_with('#'));
    assert!(text.contains("rule,estimator,component,bias,se,re,coverage,mean_se,sampled_fraction"));
    assert_eq!(data_lines(&text).len(), 2);
}

#[test]
fn demo_prints_every_rule() {
    let res = run(&["demo-classification", "--varpi", "0.3"]);
    assert!(res.status.success());
    let text = String::from_utf8(res.stdout).unwrap();
    let rules: Vec<String> = data_lines(&text).into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(rules, ["uniform", "sopt1", "sopt2", "sopt3", "sum", "copt", "gopt"]);
    for row in data_lines(&text) {
        let rho: f64 = row[1].parse().unwrap();
        assert!(rho > 0.0 && rho <= 1.0);
    }
}

#[test]
fn design_sample_estimate_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("full.csv");
    let gen = run(&[
        "generate", "--dgp", "ate_scalar", "--n", "3000", "--q", "1", "--seed", "11", "--out", path_str(&data),
    ]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let schema = data.with_extension("schema");
    assert!(schema.exists());

    let rules = dir.path().join("rules.txt");
    let design = run(&[
        "design", "--data", path_str(&data), "--schema", path_str(&schema), "--varpi", "0.3",
        "--rules", "uniform,sopt,sum", "--out", path_str(&rules),
    ]);
    assert!(design.status.success(), "{}", String::from_utf8_lossy(&design.stderr));
    let stdout = String::from_utf8(design.stdout).unwrap();
    for line in stdout.lines().filter(|l| l.contains("budget residual")) {
        let res: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert!(res.abs() <= 1e-8, "{line}");
    }
    let file = RuleFile::read(&rules).unwrap();
    assert_eq!(file.rules.len(), 3);
    let probs = fs::read_to_string(format!("{}.probs.csv", rules.display())).unwrap();
    assert_eq!(data_lines(&probs).len(), 3000);

    let sampled = dir.path().join("sampled.csv");
    let sample = run(&[
        "sample", "--data", path_str(&data), "--schema", path_str(&schema), "--rule-file", path_str(&rules),
        "--rule", "sopt1", "--seed", "5", "--out", path_str(&sampled),
    ]);
    assert!(sample.status.success(), "{}", String::from_utf8_lossy(&sample.stderr));

    let est = dir.path().join("est.csv");
    let estimate = run(&[
        "estimate", "--data", path_str(&sampled), "--schema", path_str(&sampled.with_extension("schema")),
        "--rule-file", path_str(&rules), "--rule", "sopt1", "--out", path_str(&est),
    ]);
    assert!(estimate.status.success(), "{}", String::from_utf8_lossy(&estimate.stderr));
    let rows = data_lines(&fs::read_to_string(&est).unwrap());
    assert_eq!(rows.len(), 1);
    let theta: f64 = rows[0][3].parse().unwrap();
    let se: f64 = rows[0][4].parse().unwrap();
    let fraction: f64 = rows[0][7].parse().unwrap();
    assert!(se > 0.0);
    assert!((theta - 1.5).abs() <= 4.0 * se, "estimate {theta} with SE {se}");
    assert!((fraction - 0.3).abs() < 0.05, "sampled fraction {fraction}");
}

#[test]
fn budget_below_pilot_fraction_is_an_error() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("full.csv");
    assert!(run(&["generate", "--dgp", "mean_scalar", "--n", "500", "--seed", "3", "--out", path_str(&data)])
        .status
        .success());
    let res = run(&[
        "design", "--data", path_str(&data), "--schema", path_str(&data.with_extension("schema")),
        "--varpi", "0.01", "--out", path_str(&dir.path().join("r.txt")),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("pilot fraction"));
}

#[test]
fn fully_observed_mean_recovers_column_mean() {
    let dir = TempDir::new().unwrap();
    let ys = [1.0, 4.0, -2.0, 0.5, 3.5, 7.0, 2.0, -1.0];
    let mut csv = String::from("z,y,r1\n");
    for (i, y) in ys.iter().enumerate() {
        csv.push_str(&format!("{},{y},{}\n", i as f64 / 7.0, u8::from(i % 3 == 0)));
    }
    let data = dir.path().join("d.csv");
    fs::write(&data, csv).unwrap();
    let schema = dir.path().join("d.schema");
    fs::write(&schema, "problem = mean\nfirst_phase = z\nsecond_phase = y\npilot = r1\n").unwrap();

    let basis = BasisSpec { lo: vec![0.0], hi: vec![1.0] };
    let k = basis.len();
    let file = RuleFile {
        problem: Problem::new(ProblemKind::Mean, 1).unwrap(),
        varpi: 1.0,
        kappa: 3.0 / 8.0,
        models: vec![MomentModel {
            basis,
            gamma1: vec![0.0; k],
            gamma2: vec![0.0; k],
        }],
        rules: vec![("all".into(), SamplingRule::Uniform(1.0))],
    };
    let rules = dir.path().join("rules.txt");
    fs::write(&rules, file.to_key_values().to_text()).unwrap();

    let est = dir.path().join("est.csv");
    let res = run(&[
        "estimate", "--data", path_str(&data), "--schema", path_str(&schema), "--rule-file", path_str(&rules),
        "--rule", "all", "--out", path_str(&est),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = data_lines(&fs::read_to_string(&est).unwrap());
    let theta: f64 = rows[0][3].parse().unwrap();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    assert!((theta - mean).abs() <= 1e-12, "{theta} vs {mean}");
}
