//! Simulation designs and seeded Monte Carlo replication.
//!
//! Every design draws `Z` with independent `U[−2.5, 2.5]` components and uses
//! `s = ζᵀZ` with `ζ = (0.5/√q, …, 0.5/√q)`,
//! `ν₁(z) = sqrt(0.1 + (2s)⁴)` and `ν₂(z) = exp(2s)`.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::eif::{NuisanceParams, Problem, ProblemKind, Propensity};
use crate::error::{invalid, Error, Result};
use crate::io::{self, KeyValues};
use crate::pipeline::{self, EstimatorKind, RuleKind, TwoPhaseDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dgp {
    AteScalar,
    AteMulti,
    MeanScalar,
    MeanMulti,
    RegScalar,
    RegMulti,
}

impl Dgp {
    pub fn name(self) -> &'static str {
        match self {
            Dgp::AteScalar => "ate_scalar",
            Dgp::AteMulti => "ate_multi",
            Dgp::MeanScalar => "mean_scalar",
            Dgp::MeanMulti => "mean_multi",
            Dgp::RegScalar => "reg_scalar",
            Dgp::RegMulti => "reg_multi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "ate_scalar" => Dgp::AteScalar,
            "ate_multi" => Dgp::AteMulti,
            "mean_scalar" => Dgp::MeanScalar,
            "mean_multi" => Dgp::MeanMulti,
            "reg_scalar" => Dgp::RegScalar,
            "reg_multi" => Dgp::RegMulti,
            other => return Err(Error::Parse(format!("unknown design '{other}'"))),
        })
    }

    pub fn theta0(self) -> Vec<f64> {
        match self {
            Dgp::AteScalar => vec![1.5],
            Dgp::AteMulti => vec![1.0, 0.5],
            Dgp::MeanScalar => vec![1.0],
            Dgp::MeanMulti => vec![1.0, 0.0],
            Dgp::RegScalar => vec![1.0],
            Dgp::RegMulti => vec![0.0, 1.0],
        }
    }

    pub fn problem(self) -> Problem {
        let (kind, d) = match self {
            Dgp::AteScalar => (ProblemKind::AteBinary, 1),
            Dgp::AteMulti => (ProblemKind::AteMulti, 2),
            Dgp::MeanScalar => (ProblemKind::Mean, 1),
            Dgp::MeanMulti => (ProblemKind::MultiMean, 2),
            Dgp::RegScalar => (ProblemKind::LinearCoef, 1),
            Dgp::RegMulti => (ProblemKind::LinearCoef, 2),
        };
        Problem::new(kind, d).expect("catalog dimensions are valid")
    }

    /// Pilot-fraction constant: `q` for means, `q + 1` otherwise.
    pub fn default_kappa_c(self, q: usize) -> f64 {
        match self {
            Dgp::MeanScalar | Dgp::MeanMulti => q as f64,
            _ => q as f64 + 1.0,
        }
    }

    pub fn generate<R: Rng + ?Sized>(self, n: usize, q: usize, rng: &mut R) -> SimData {
        let mut data = SimData {
            v: Vec::with_capacity(n),
            u: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let (v, u) = self.draw(q, rng);
            data.v.push(v);
            data.u.push(u);
        }
        data
    }

    fn draw<R: Rng + ?Sized>(self, q: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let z: Vec<f64> = (0..q).map(|_| rng.random_range(-2.5..2.5)).collect();
        let s = zeta_dot(&z);
        let nu1 = (0.1 + (2.0 * s).powi(4)).sqrt();
        let nu2 = (2.0 * s).exp();
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        match self {
            Dgp::AteScalar => {
                let x = s + 0.5 * normal();
                let e = normal();
                let y0 = 0.5 * s + x + nu2 * e;
                let y1 = 1.5 + 0.5 * s - x + nu2 * e;
                let p = 1.0 / (1.0 + (0.1 * s - 0.5 * x).exp());
                let t = rng.random::<f64>() < p;
                let y = if t { y1 } else { y0 };
                (prepend(&[y, f64::from(u8::from(t))], &z), vec![x])
            }
            Dgp::AteMulti => {
                let x = s + 0.5 * normal();
                let e = normal();
                let y0 = 0.5 * s + x + (0.5 + nu2) * e;
                let y1 = 1.0 + 0.5 * s - x + (nu1 + nu2) * e;
                let y2 = 0.5 - 0.5 * s - 0.5 * x + nu2 * e;
                let probs = ate_multi_probs(s, x);
                let draw: f64 = rng.random();
                let t = if draw < probs[1] {
                    1
                } else if draw < probs[1] + probs[2] {
                    2
                } else {
                    0
                };
                let y = [y0, y1, y2][t];
                (prepend(&[y, t as f64], &z), vec![x])
            }
            Dgp::MeanScalar => {
                let y = 1.0 + s + nu1 * normal();
                (z, vec![y])
            }
            Dgp::MeanMulti => {
                let y1 = 1.0 - s + nu1 * normal();
                let y2 = s.sin() + nu2 * normal();
                (z, vec![y1, y2])
            }
            Dgp::RegScalar => {
                let x = s.sin() + nu2 * normal();
                let y = s + x + normal();
                (prepend(&[y], &z), vec![x])
            }
            Dgp::RegMulti => {
                let x1 = s + nu1 * normal();
                let x2 = -s + nu2 * normal();
                let y = s + x2 + normal();
                (prepend(&[y], &z), vec![x1, x2])
            }
        }
    }

    /// Generating propensity and outcome regressions of the treatment designs,
    /// in the parametrisation the fitted models use (features `(1, x, z)`).
    pub fn true_nuisance(self, q: usize) -> Option<NuisanceParams> {
        let zeta = 0.5 / (q as f64).sqrt();
        let row = |c: f64, bx: f64, bz: f64| -> Vec<f64> {
            let mut r = vec![c, bx];
            r.extend(std::iter::repeat_n(bz * zeta, q));
            r
        };
        let (logit, outcome) = match self {
            Dgp::AteScalar => (
                vec![row(0.0, 0.5, -0.1)],
                vec![row(0.0, 1.0, 0.5), row(1.5, -1.0, 0.5)],
            ),
            Dgp::AteMulti => (
                vec![row(0.0, 0.25, -0.1), row(0.0, -0.25, 0.1)],
                vec![row(0.0, 1.0, 0.5), row(1.0, -1.0, 0.5), row(0.5, -0.5, -0.5)],
            ),
            _ => return None,
        };
        let p = q + 2;
        let coef = nalgebra::DMatrix::from_fn(logit.len(), p, |a, c| logit[a][c]);
        Some(NuisanceParams::Ate {
            propensity: Propensity::Logit(coef),
            outcome: outcome.into_iter().map(nalgebra::DVector::from_vec).collect(),
        })
    }
}

fn zeta_dot(z: &[f64]) -> f64 {
    0.5 / (z.len() as f64).sqrt() * z.iter().sum::<f64>()
}

fn prepend(head: &[f64], z: &[f64]) -> Vec<f64> {
    let mut v = head.to_vec();
    v.extend_from_slice(z);
    v
}

/// `(p₀, p₁, p₂)` of the three-arm design.
pub fn ate_multi_probs(s: f64, x: f64) -> [f64; 3] {
    let e1 = (-0.1 * s + 0.25 * x).exp();
    let e2 = (0.1 * s - 0.25 * x).exp();
    let total = 1.0 + e1 + e2;
    [1.0 / total, e1 / total, e2 / total]
}

/// Fully generated data, before any second-phase masking.
#[derive(Debug, Clone, PartialEq)]
pub struct SimData {
    pub v: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

/// 64-bit splitmix finaliser.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn replicate_seed(seed: u64, r: u64) -> u64 {
    seed ^ splitmix64(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub dgp: Dgp,
    pub n: usize,
    pub q: usize,
    pub varpi: f64,
    pub reps: usize,
    pub seed: u64,
    pub rules: Vec<RuleKind>,
    pub estimators: Vec<EstimatorKind>,
    pub kappa_c: f64,
    pub ridge: Option<f64>,
}

impl ScenarioSpec {
    /// Defaults: `ϖ = 0.3`, the design's `κ` constant, all applicable rules
    /// and the one-step estimator.
    pub fn new(dgp: Dgp, n: usize, q: usize, reps: usize, seed: u64) -> Self {
        let rules = if dgp.problem().dim == 1 {
            vec![RuleKind::Uniform, RuleKind::SOpt(0)]
        } else {
            vec![RuleKind::Uniform, RuleKind::COpt, RuleKind::GOpt]
        };
        Self {
            dgp,
            n,
            q,
            varpi: 0.3,
            reps,
            seed,
            rules,
            estimators: vec![EstimatorKind::OneStep],
            kappa_c: dgp.default_kappa_c(q),
            ridge: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let known = [
            "dgp", "n", "q", "varpi", "reps", "seed", "rules", "estimators", "kappa_c", "ridge",
        ];
        if let Some(k) = kv.keys().find(|k| !known.contains(k)) {
            return Err(Error::Parse(format!("unknown scenario key '{k}'")));
        }
        let dgp = Dgp::parse(kv.require("dgp")?)?;
        let mut spec = Self::new(dgp, kv.number("n")?, kv.number("q")?, kv.number("reps")?, kv.number("seed")?);
        if kv.get("varpi").is_some() {
            spec.varpi = kv.number("varpi")?;
        }
        if let Some(r) = kv.get("rules") {
            spec.rules = RuleKind::parse_list(r)?;
        }
        if let Some(e) = kv.get("estimators") {
            spec.estimators = EstimatorKind::parse_list(e)?;
        }
        if kv.get("kappa_c").is_some() {
            spec.kappa_c = kv.number("kappa_c")?;
        }
        if kv.get("ridge").is_some() {
            spec.ridge = Some(kv.number("ridge")?);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn kappa(&self) -> Result<f64> {
        pipeline::kappa_default(self.varpi, self.n, self.kappa_c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return invalid("reps must be at least 1");
        }
        if self.q == 0 || self.n < 10 {
            return invalid(format!("need q ≥ 1 and n ≥ 10, got q={}, n={}", self.q, self.n));
        }
        if !(self.varpi > 0.0 && self.varpi <= 1.0) {
            return invalid(format!("varpi={} must lie in (0, 1]", self.varpi));
        }
        let kappa = self.kappa()?;
        if !(kappa < self.varpi) {
            return invalid("the pilot fraction must be below the budget");
        }
        if self.rules.is_empty() || self.estimators.is_empty() {
            return invalid("at least one rule and one estimator are required");
        }
        let d = self.dgp.problem().dim;
        for r in &self.rules {
            match r {
                RuleKind::SOpt(j) if *j >= d => return invalid(format!("rule {} exceeds dimension {d}", r.name())),
                RuleKind::GOptPriority(a) if a.len() != d => {
                    return invalid(format!("rule {} needs {d} priorities", r.name()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Configuration echo for report headers.
    pub fn echo(&self) -> Vec<(&'static str, String)> {
        let rules: Vec<String> = self.rules.iter().map(RuleKind::name).collect();
        let est: Vec<&str> = self.estimators.iter().map(|e| e.name()).collect();
        vec![
            ("dgp", self.dgp.name().to_string()),
            ("n", self.n.to_string()),
            ("q", self.q.to_string()),
            ("varpi", format!("{}", self.varpi)),
            ("reps", self.reps.to_string()),
            ("seed", self.seed.to_string()),
            ("rules", rules.join(",")),
            ("estimators", est.join(",")),
            ("kappa_c", format!("{}", self.kappa_c)),
            ("kappa", self.kappa().map_or("invalid".into(), |k| format!("{k}"))),
            (
                "ridge",
                self.ridge.map_or("default".into(), |r| format!("{r}")),
            ),
        ]
    }
}

/// One estimate from one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub rule: String,
    pub estimator: EstimatorKind,
    pub theta: Vec<f64>,
    pub se: Vec<f64>,
    pub sampled_fraction: f64,
}

/// Outcome of one replicate: every (rule, estimator) estimate, the budget
/// residuals of the estimated rules and the maximin objective values.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub records: Vec<ReplicateRecord>,
    pub max_budget_residual: f64,
    /// `(rule, M̂)` for the maximin rules.
    pub maximin_values: Vec<(String, f64)>,
}

/// Runs replicate `r` of a scenario.
pub fn run_replicate(spec: &ScenarioSpec, r: u64) -> Result<ReplicateOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(spec.seed, r));
    let problem = spec.dgp.problem();
    let full = spec.dgp.generate(spec.n, spec.q, &mut rng);
    let kappa = spec.kappa()?;
    let r1 = pipeline::draw_pilot(spec.n, kappa, &mut rng);
    let phase_two_seed: u64 = rng.random();
    let n = spec.n;
    let pilot_only = TwoPhaseDataset::from_full(full.v.clone(), &full.u, r1.clone(), vec![false; n], vec![1.0; n])?;
    let bundle = pipeline::estimate_rules(&problem, &pilot_only, spec.varpi, kappa, &spec.rules, spec.ridge)?;
    let mut records = Vec::new();
    for (kind, rule) in &bundle.rules {
        let mut prng = ChaCha8Rng::seed_from_u64(phase_two_seed);
        let (r2, rho_n) = pipeline::draw_second_phase(rule, &r1, &full.v, kappa, &mut prng);
        let data = TwoPhaseDataset::from_full(full.v.clone(), &full.u, r1.clone(), r2, rho_n)?;
        let name = kind.name();
        for rep in pipeline::estimate(&problem, &data, &bundle.fit, rule, &name, &spec.estimators)? {
            records.push(ReplicateRecord {
                rule: name.clone(),
                estimator: rep.kind,
                theta: rep.theta,
                se: rep.se,
                sampled_fraction: rep.sampled_fraction,
            });
        }
    }
    let max_budget_residual = bundle.budget_residuals.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let maximin_values = bundle
        .solutions
        .iter()
        .map(|(name, sol)| (name.clone(), sol.objective_value))
        .collect();
    Ok(ReplicateOutcome {
        records,
        max_budget_residual,
        maximin_values,
    })
}

/// Summary of one (rule, estimator, component) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub rule: String,
    pub estimator: EstimatorKind,
    pub component: usize,
    pub bias: f64,
    /// Monte Carlo standard deviation; `None` with a single replicate.
    pub se: Option<f64>,
    /// `Var(uniform one-step) / Var(this)`; `None` when undefined.
    pub re: Option<f64>,
    pub coverage: f64,
    pub mean_se: f64,
    pub mean_sampled_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateTable {
    pub spec: ScenarioSpec,
    pub rows: Vec<AggregateRow>,
    pub completed: usize,
    pub failed: usize,
    pub failures: Vec<(u64, String)>,
    pub max_budget_residual: f64,
    /// Per-replicate estimates in replicate order.
    pub outcomes: Vec<ReplicateOutcome>,
}

impl AggregateTable {
    pub fn row(&self, rule: &str, estimator: EstimatorKind, component: usize) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.rule == rule && r.estimator == estimator && r.component == component)
    }

    pub fn to_csv(&self) -> String {
        let mut echo = self.spec.echo();
        echo.push(("completed_replicates", self.completed.to_string()));
        echo.push(("failed_replicates", self.failed.to_string()));
        echo.push(("max_budget_residual", format!("{:.3e}", self.max_budget_residual)));
        let mut out = io::comment_block(&echo);
        out.push_str("rule,estimator,component,bias,se,re,coverage,mean_se,sampled_fraction\n");
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{},{},{:.4},{:.6},{:.6}",
                r.rule,
                r.estimator.name(),
                r.component + 1,
                r.bias,
                opt(r.se),
                opt(r.re),
                r.coverage,
                r.mean_se,
                r.mean_sampled_fraction
            );
        }
        out
    }
}

/// Runs every replicate (in parallel on `threads` workers) and aggregates.
pub fn run_scenario(spec: &ScenarioSpec, threads: usize) -> Result<AggregateTable> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let results: Vec<Result<ReplicateOutcome>> = pool.install(|| {
        (0..spec.reps as u64)
            .into_par_iter()
            .map(|r| run_replicate(spec, r))
            .collect()
    });
    Ok(aggregate(spec, results))
}

pub fn aggregate(spec: &ScenarioSpec, results: Vec<Result<ReplicateOutcome>>) -> AggregateTable {
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(o) => outcomes.push(o),
            Err(e) => failures.push((r as u64, e.to_string())),
        }
    }
    let truth = spec.dgp.theta0();
    let d = truth.len();
    let mut rows = Vec::new();
    let mut cells: Vec<(String, EstimatorKind)> = Vec::new();
    if let Some(first) = outcomes.first() {
        for rec in &first.records {
            cells.push((rec.rule.clone(), rec.estimator));
        }
    }
    let collect = |rule: &str, est: EstimatorKind| -> Vec<&ReplicateRecord> {
        outcomes
            .iter()
            .filter_map(|o| o.records.iter().find(|r| r.rule == rule && r.estimator == est))
            .collect()
    };
    let variance = |xs: &[f64]| -> Option<f64> {
        (xs.len() > 1).then(|| crate::linalg::sample_variance(xs))
    };
    let baseline: Vec<Option<f64>> = {
        let recs = collect("uniform", EstimatorKind::OneStep);
        (0..d)
            .map(|j| {
                if recs.is_empty() {
                    None
                } else {
                    variance(&recs.iter().map(|r| r.theta[j]).collect::<Vec<_>>())
                }
            })
            .collect()
    };
    for (rule, est) in &cells {
        let recs = collect(rule, *est);
        let m = recs.len() as f64;
        for j in 0..d {
            let est_j: Vec<f64> = recs.iter().map(|r| r.theta[j]).collect();
            let var = variance(&est_j);
            // Estimators without a standard error get NaN coverage, not zero.
            let coverage = if recs.iter().any(|r| r.se[j].is_nan()) {
                f64::NAN
            } else {
                let covered = recs
                    .iter()
                    .filter(|r| (r.theta[j] - truth[j]).abs() <= pipeline::Z_975 * r.se[j])
                    .count() as f64;
                covered / m
            };
            let re = match (baseline[j], var) {
                (Some(b), Some(v)) if v > 0.0 => Some(b / v),
                _ => None,
            };
            rows.push(AggregateRow {
                rule: rule.clone(),
                estimator: *est,
                component: j,
                bias: crate::linalg::mean(&est_j) - truth[j],
                se: var.map(f64::sqrt),
                re,
                coverage,
                mean_se: recs.iter().map(|r| r.se[j]).sum::<f64>() / m,
                mean_sampled_fraction: recs.iter().map(|r| r.sampled_fraction).sum::<f64>() / m,
            });
        }
    }
    let max_budget_residual = outcomes.iter().map(|o| o.max_budget_residual).fold(0.0, f64::max);
    AggregateTable {
        spec: spec.clone(),
        rows,
        completed: outcomes.len(),
        failed: failures.len(),
        failures,
        max_budget_residual,
        outcomes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..10_000).map(|r| replicate_seed(42, r)).collect();
        assert_eq!(seeds.len(), 10_000);
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn multi_arm_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let s: f64 = rng.random_range(-3.0..3.0);
            let x: f64 = rng.random_range(-4.0..4.0);
            let p = ate_multi_probs(s, x);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
        assert_eq!(ate_multi_probs(0.0, 0.0), [1.0 / 3.0; 3]);
    }

    #[test]
    fn row_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dgp in [Dgp::AteScalar, Dgp::AteMulti, Dgp::MeanScalar, Dgp::MeanMulti, Dgp::RegScalar, Dgp::RegMulti] {
            let d = dgp.generate(5, 3, &mut rng);
            let p = dgp.problem();
            let (vlen, ulen) = match dgp {
                Dgp::AteScalar | Dgp::AteMulti => (5, 1),
                Dgp::MeanScalar => (3, 1),
                Dgp::MeanMulti => (3, 2),
                Dgp::RegScalar => (4, 1),
                Dgp::RegMulti => (4, 2),
            };
            assert!(d.v.iter().all(|v| v.len() == vlen), "{dgp:?}");
            assert!(d.u.iter().all(|u| u.len() == ulen), "{dgp:?}");
            assert_eq!(p.dim, dgp.theta0().len());
        }
    }

    #[test]
    fn scenario_parsing_and_validation() {
        let text = "dgp = ate_scalar\nn = 2000\nq = 1\nreps = 3\nseed = 7\nrules = uniform,sopt\n";
        let spec = ScenarioSpec::parse(text).unwrap();
        assert_eq!(spec.kappa_c, 2.0);
        assert_eq!(spec.rules, vec![RuleKind::Uniform, RuleKind::SOpt(0)]);
        assert!(ScenarioSpec::parse(&text.replace("reps = 3", "reps = 0")).is_err());
        assert!(ScenarioSpec::parse(&format!("{text}colour = red\n")).is_err());
        assert!(ScenarioSpec::parse(&text.replace("uniform,sopt", "sopt2")).is_err());
    }

    #[test]
    fn single_replicate_has_no_re() {
        let spec = ScenarioSpec::new(Dgp::MeanScalar, 600, 1, 1, 3);
        let table = run_scenario(&spec, 1).unwrap();
        assert_eq!(table.failed, 0);
        let row = table.row("uniform", EstimatorKind::OneStep, 0).unwrap();
        assert!(row.re.is_none() && row.se.is_none());
        let csv = table.to_csv();
        assert!(csv.contains("\nuniform,one_step,1,"));
        assert!(csv.lines().any(|l| l.starts_with("uniform,one_step,1,") && l.contains(",,,")));
    }
}
