//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use twophase::eif::Problem;
use twophase::io::{self, RuleFile, Schema};
use twophase::maximin;
use twophase::pipeline::{self, EstimatorKind, PilotFit, RuleKind, TwoPhaseDataset};
use twophase::sim::{Dgp, ScenarioSpec};
use twophase::{eif, Error, Result};

/// Hard tolerance on the budget identity.
const BUDGET_TOL: f64 = 1e-8;

#[derive(Parser)]
#[command(name = "twophase", version, about = "Optimal and maximin second-phase sampling rules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation scenario and write the aggregate table.
    Simulate(SimulateArgs),
    /// Generate a synthetic dataset with a pilot sample and a schema sidecar.
    Generate(GenerateArgs),
    /// Estimate sampling rules from the pilot rows of a dataset.
    Design(DesignArgs),
    /// Draw the second phase for a dataset under a designed rule.
    Sample(SampleArgs),
    /// Estimate the target parameter from a two-phase dataset.
    Estimate(EstimateArgs),
    /// Efficiency bounds in the diagnostic-test example, by enumeration.
    DemoClassification(DemoArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file (key = value lines).
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for replicates.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the scenario budget.
    #[arg(long)]
    varpi: Option<f64>,
    /// Overrides the pilot-fraction constant.
    #[arg(long)]
    kappa_c: Option<f64>,
    /// Overrides the scenario rules, e.g. `uniform,copt,gopt`.
    #[arg(long)]
    rules: Option<String>,
    /// Adds a priority-weighted global maximin rule, e.g. `0.95,0.05`.
    #[arg(long)]
    priority: Option<String>,
    /// Overrides the replicate count.
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    /// One of ate_scalar, ate_multi, mean_scalar, mean_multi, reg_scalar, reg_multi.
    #[arg(long)]
    dgp: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    q: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    varpi: f64,
    /// Pilot-fraction constant; defaults to the design's value.
    #[arg(long)]
    kappa_c: Option<f64>,
    /// Data CSV; the schema goes next to it with extension `.schema`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DesignArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    varpi: f64,
    #[arg(long, default_value = "uniform,sum,copt,gopt")]
    rules: String,
    #[arg(long)]
    priority: Option<String>,
    /// Ridge penalty for the moment fit; defaults to `0.1 (dim V + 1)`.
    #[arg(long)]
    ridge: Option<f64>,
    /// Rule file to write.
    #[arg(long)]
    out: PathBuf,
    /// Inclusion probabilities per row; defaults to `<out>.probs.csv`.
    #[arg(long)]
    probs_out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long = "rule-file")]
    rule_file: PathBuf,
    /// Rule name in the rule file.
    #[arg(long, default_value = "gopt")]
    rule: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; the schema goes next to it with extension `.schema`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long = "rule-file")]
    rule_file: PathBuf,
    /// Rule the second phase was drawn under.
    #[arg(long, default_value = "gopt")]
    rule: String,
    #[arg(long, default_value = "one_step")]
    estimators: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 0.3)]
    varpi: f64,
    /// Optional CSV copy of the printed table.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Generate(a) => generate(a),
        Command::Design(a) => design(a),
        Command::Sample(a) => sample(a),
        Command::Estimate(a) => estimate(a),
        Command::DemoClassification(a) => demo(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::from)
}

fn with_priority(mut rules: Vec<RuleKind>, priority: Option<&str>) -> Result<Vec<RuleKind>> {
    if let Some(p) = priority {
        let a = io::parse_floats(p)?;
        let kind = RuleKind::GOptPriority(a);
        if !rules.contains(&kind) {
            rules.push(kind);
        }
    }
    Ok(rules)
}

fn simulate(a: SimulateArgs) -> Result<bool> {
    let mut spec = ScenarioSpec::read(&a.scenario)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(v) = a.varpi {
        spec.varpi = v;
    }
    if let Some(c) = a.kappa_c {
        spec.kappa_c = c;
    }
    if let Some(r) = a.reps {
        spec.reps = r;
    }
    if let Some(r) = &a.rules {
        spec.rules = RuleKind::parse_list(r)?;
    }
    spec.rules = with_priority(spec.rules, a.priority.as_deref())?;
    spec.validate()?;
    let table = twophase::sim::run_scenario(&spec, a.threads)?;
    write(&a.out, &table.to_csv())?;
    for (r, msg) in &table.failures {
        eprintln!("replicate {r} failed: {msg}");
    }
    eprintln!(
        "{} replicates completed, {} failed, max budget residual {:.3e}",
        table.completed, table.failed, table.max_budget_residual
    );
    Ok(table.failed == 0 && table.max_budget_residual <= BUDGET_TOL)
}

fn column_names(dgp: Dgp, q: usize) -> (Vec<String>, Vec<String>) {
    let z: Vec<String> = (1..=q).map(|k| format!("z{k}")).collect();
    let with = |head: &[&str]| -> Vec<String> { head.iter().map(|s| s.to_string()).chain(z.clone()).collect() };
    let strs = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match dgp {
        Dgp::AteScalar | Dgp::AteMulti => (with(&["y", "t"]), strs(&["x"])),
        Dgp::MeanScalar => (z, strs(&["y"])),
        Dgp::MeanMulti => (z, strs(&["y1", "y2"])),
        Dgp::RegScalar => (with(&["y"]), strs(&["x"])),
        Dgp::RegMulti => (with(&["y"]), strs(&["x1", "x2"])),
    }
}

fn schema_text(problem: &Problem, first: &[String], second: &[String], with_r2: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "problem = {}", problem.kind.name());
    let _ = writeln!(s, "dim = {}", problem.dim);
    let _ = writeln!(s, "first_phase = {}", first.join(","));
    let _ = writeln!(s, "second_phase = {}", second.join(","));
    let _ = writeln!(s, "pilot = r1");
    if with_r2 {
        let _ = writeln!(s, "second = r2");
    }
    s
}

fn write_data(
    path: &Path,
    first: &[String],
    second: &[String],
    v: &[Vec<f64>],
    u: &[Option<Vec<f64>>],
    r1: &[bool],
    r2: Option<&[bool]>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = first.iter().chain(second).map(String::as_str).collect();
    header.push("r1");
    if r2.is_some() {
        header.push("r2");
    }
    w.write_record(&header)?;
    for i in 0..v.len() {
        let mut rec: Vec<String> = v[i].iter().map(|x| format!("{x}")).collect();
        match &u[i] {
            Some(ui) => rec.extend(ui.iter().map(|x| format!("{x}"))),
            None => rec.extend(std::iter::repeat_n(String::new(), second.len())),
        }
        rec.push(u8::from(r1[i]).to_string());
        if let Some(r2) = r2 {
            rec.push(u8::from(r2[i]).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn schema_path(data: &Path) -> PathBuf {
    data.with_extension("schema")
}

fn generate(a: GenerateArgs) -> Result<bool> {
    let dgp = Dgp::parse(&a.dgp)?;
    let problem = dgp.problem();
    let c = a.kappa_c.unwrap_or_else(|| dgp.default_kappa_c(a.q));
    let kappa = pipeline::kappa_default(a.varpi, a.n, c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let data = dgp.generate(a.n, a.q, &mut rng);
    let r1 = pipeline::draw_pilot(a.n, kappa, &mut rng);
    // Second-phase values are kept for every row so a rule can be applied later.
    let u: Vec<Option<Vec<f64>>> = data.u.into_iter().map(Some).collect();
    let (first, second) = column_names(dgp, a.q);
    write_data(&a.out, &first, &second, &data.v, &u, &r1, None)?;
    write(&schema_path(&a.out), &schema_text(&problem, &first, &second, false))?;
    eprintln!(
        "wrote {} rows ({} pilot, kappa {kappa:.6}) to {}",
        a.n,
        r1.iter().filter(|r| **r).count(),
        a.out.display()
    );
    Ok(true)
}

fn load(data: &Path, schema: &Path) -> Result<(Schema, io::CsvData)> {
    let schema = Schema::read(schema)?;
    let csv = io::read_csv(data, &schema)?;
    Ok((schema, csv))
}

fn pilot_rows(csv: &io::CsvData) -> Result<(Vec<bool>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let r1 = csv
        .r1
        .clone()
        .ok_or_else(|| Error::Parse("the schema names no pilot column".into()))?;
    let mut pv = Vec::new();
    let mut pu = Vec::new();
    for (i, &p) in r1.iter().enumerate() {
        if p {
            let u = csv.u[i]
                .as_ref()
                .ok_or_else(|| Error::Degenerate(format!("pilot row {} has missing second-phase values", i + 1)))?;
            pv.push(csv.v[i].clone());
            pu.push(u.clone());
        }
    }
    if pv.is_empty() {
        return Err(Error::Degenerate("the dataset has no pilot rows".into()));
    }
    Ok((r1, pv, pu))
}

fn design(a: DesignArgs) -> Result<bool> {
    let (schema, csv) = load(&a.data, &a.schema)?;
    let problem = schema.problem;
    let (r1, pv, pu) = pilot_rows(&csv)?;
    let n = csv.v.len();
    // The realised pilot fraction stands in for κ.
    let kappa = pv.len() as f64 / n as f64;
    if !(a.varpi > kappa && a.varpi <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "varpi={} must exceed the pilot fraction {kappa:.6} and be at most 1",
            a.varpi
        )));
    }
    let kinds = with_priority(RuleKind::parse_list(&a.rules)?, a.priority.as_deref())?;
    let fit = pipeline::fit_pilot(&problem, &pv, &pu, a.ridge)?;
    let bundle = pipeline::design_rules(&problem, fit, &csv.v, &r1, a.varpi, kappa, &kinds)?;

    let file = RuleFile {
        problem: problem.clone(),
        varpi: a.varpi,
        kappa,
        models: bundle.fit.models.iter().map(|m| (**m).clone()).collect(),
        rules: bundle.rules.iter().map(|(k, r)| (k.name(), r.clone())).collect(),
    };
    let echo = io::comment_block(&[
        ("data", a.data.display().to_string()),
        ("problem", problem.kind.name().to_string()),
        ("n", n.to_string()),
        ("pilot", pv.len().to_string()),
        ("varpi", format!("{}", a.varpi)),
        ("kappa", format!("{kappa}")),
        ("ridge", a.ridge.map_or("default".into(), |r| format!("{r}"))),
    ]);
    write(&a.out, &format!("{echo}{}", file.to_key_values().to_text()))?;

    let mut probs = echo.clone();
    let names: Vec<String> = file.rules.iter().map(|(n, _)| n.clone()).collect();
    let _ = writeln!(probs, "row,r1,{}", names.join(","));
    let evaluated: Vec<Vec<f64>> = file.rules.iter().map(|(_, r)| r.eval_rows(&csv.v)).collect();
    for i in 0..n {
        let vals: Vec<String> = evaluated.iter().map(|e| format!("{}", e[i])).collect();
        let _ = writeln!(probs, "{},{},{}", i + 1, u8::from(r1[i]), vals.join(","));
    }
    let probs_path = a
        .probs_out
        .unwrap_or_else(|| PathBuf::from(format!("{}.probs.csv", a.out.display())));
    write(&probs_path, &probs)?;

    let mut ok = true;
    for ((name, _), res) in file.rules.iter().zip(&bundle.budget_residuals) {
        println!("{name}: budget residual {res:.3e}");
        ok &= res.abs() <= BUDGET_TOL;
    }
    for (name, sol) in &bundle.solutions {
        let f: Vec<String> = sol.per_component_improvement.iter().map(|x| format!("{x:.4}")).collect();
        println!("{name}: maximin value {:.4}, improvements [{}]", sol.objective_value, f.join(", "));
    }
    if bundle.fit.converged.iter().any(|c| !c) {
        eprintln!("warning: a moment fit did not converge");
    }
    Ok(ok)
}

fn sample(a: SampleArgs) -> Result<bool> {
    let (schema, csv) = load(&a.data, &a.schema)?;
    let file = RuleFile::read(&a.rule_file)?;
    let rule = file
        .rule(&a.rule)
        .ok_or_else(|| Error::InvalidArgument(format!("rule '{}' is not in the rule file", a.rule)))?;
    let r1 = csv
        .r1
        .clone()
        .ok_or_else(|| Error::Parse("the schema names no pilot column".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (r2, _) = pipeline::draw_second_phase(rule, &r1, &csv.v, file.kappa, &mut rng);
    let mut u = csv.u.clone();
    for i in 0..u.len() {
        if !(r1[i] || r2[i]) {
            u[i] = None;
        } else if u[i].is_none() {
            return Err(Error::Degenerate(format!(
                "row {} was sampled but its second-phase values are missing",
                i + 1
            )));
        }
    }
    write_data(&a.out, &schema.first_phase, &schema.second_phase, &csv.v, &u, &r1, Some(&r2))?;
    write(
        &schema_path(&a.out),
        &schema_text(&schema.problem, &schema.first_phase, &schema.second_phase, true),
    )?;
    let sampled = r1.iter().zip(&r2).filter(|(a, b)| **a || **b).count();
    eprintln!("sampled fraction {:.4}", sampled as f64 / r1.len() as f64);
    Ok(true)
}

fn estimate(a: EstimateArgs) -> Result<bool> {
    let (schema, csv) = load(&a.data, &a.schema)?;
    let file = RuleFile::read(&a.rule_file)?;
    if file.problem.kind != schema.problem.kind || file.problem.dim != schema.problem.dim {
        return Err(Error::InvalidArgument("the rule file and the schema describe different problems".into()));
    }
    let problem = schema.problem;
    let rule = file
        .rule(&a.rule)
        .ok_or_else(|| Error::InvalidArgument(format!("rule '{}' is not in the rule file", a.rule)))?;
    let (r1, pv, pu) = pilot_rows(&csv)?;
    let r2 = match &csv.r2 {
        Some(r2) => r2.clone(),
        None => (0..r1.len()).map(|i| !r1[i] && csv.u[i].is_some()).collect(),
    };
    let mut u = csv.u.clone();
    for i in 0..u.len() {
        if !(r1[i] || r2[i]) {
            u[i] = None;
        }
    }
    let kappa = file.kappa;
    let rho_n: Vec<f64> = csv.v.iter().map(|v| kappa + (1.0 - kappa) * rule.eval(v)).collect();
    let data = TwoPhaseDataset {
        v: csv.v.clone(),
        u,
        r1,
        r2,
        rho_n,
    };
    data.validate()?;
    if data.r2.iter().all(|r| !r) && data.r1.iter().all(|r| !r) {
        return Err(Error::Degenerate("no observed units".into()));
    }

    let eta = eif::fit_nuisance(&problem, &pv, &pu)?;
    let theta = eif::solve_theta_pilot(&problem, &pv, &pu, &eta)?;
    let psi = pv
        .iter()
        .zip(&pu)
        .map(|(v, u)| eif::psi(&problem, v, u, &theta, &eta))
        .collect::<Result<Vec<_>>>()?;
    let models = file.models.iter().cloned().map(std::sync::Arc::new).collect::<Vec<_>>();
    let fit = PilotFit {
        eta,
        theta,
        psi,
        converged: vec![true; models.len()],
        models,
    };
    let kinds = EstimatorKind::parse_list(&a.estimators)?;
    let reports = pipeline::estimate(&problem, &data, &fit, rule, &a.rule, &kinds)?;
    let header = io::comment_block(&[
        ("data", a.data.display().to_string()),
        ("rule_file", a.rule_file.display().to_string()),
        ("rule", a.rule.clone()),
        ("problem", problem.kind.name().to_string()),
        ("n", data.len().to_string()),
        ("varpi", format!("{}", file.varpi)),
        ("kappa", format!("{kappa}")),
        ("estimators", a.estimators.clone()),
    ]);
    let text = io::reports_csv(&header, &reports);
    write(&a.out, &text)?;
    print!("{}", text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect::<String>());
    Ok(true)
}

fn demo(a: DemoArgs) -> Result<bool> {
    let theta = [0.2, 0.8, 0.6];
    let rows = maximin::classification_demo(theta, a.varpi)?;
    let mut text = io::comment_block(&[
        ("theta", io::join_floats(&theta)),
        ("varpi", format!("{}", a.varpi)),
    ]);
    text.push_str("rule,rho_x0,rho_x1,bound1,bound2,bound3,improve1,improve2,improve3\n");
    for r in &rows {
        let _ = writeln!(
            text,
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.rule, r.rho[0], r.rho[1], r.bounds[0], r.bounds[1], r.bounds[2], r.improvement[0], r.improvement[1], r.improvement[2]
        );
    }
    print!("{text}");
    if let Some(out) = &a.out {
        write(out, &text)?;
    }
    let dominates = rows
        .iter()
        .filter(|r| r.rule == "copt" || r.rule == "gopt")
        .all(|r| r.improvement.iter().all(|f| *f >= -1e-7));
    if !dominates {
        eprintln!("a maximin rule does worse than uniform on some component");
    }
    Ok(dominates)
}
