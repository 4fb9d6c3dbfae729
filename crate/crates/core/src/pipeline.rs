//! Two-phase execution: pilot draw, rule estimation, the second-phase draw
//! and the efficient estimators.
//!
//! Sampling protocol. Every subject enters the pilot with probability `κ`;
//! a subject outside the pilot is then sampled with probability `ρ̃(V_i)`,
//! where `ρ̃` is estimated from the pilot and calibrated so that
//! `n⁻¹ Σ (1 − R1_i) ρ̃(V_i) = ϖ − κ`. The overall inclusion probability is
//! approximated by `ρ_n(V) = κ + (1 − κ) ρ̃(V)`.

use std::sync::Arc;

use rand::Rng;

use crate::eif::{self, NuisanceParams, Problem};
use crate::error::{invalid, Error, Result};
use crate::maximin::{self, DesignContext, MaximinSolution};
use crate::moments::{self, BasisSpec, FitOptions, MomentModel};
use crate::rule::{Budget, Lambda, SamplingRule};

/// Two-sided 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959964;

#[derive(Debug, Clone, PartialEq)]
pub struct TwoPhaseDataset {
    pub v: Vec<Vec<f64>>,
    /// Second-phase values, present exactly where `R1 + R2 = 1`.
    pub u: Vec<Option<Vec<f64>>>,
    pub r1: Vec<bool>,
    pub r2: Vec<bool>,
    pub rho_n: Vec<f64>,
}

impl TwoPhaseDataset {
    /// Masks fully generated data according to the sampling indicators.
    pub fn from_full(v: Vec<Vec<f64>>, u: &[Vec<f64>], r1: Vec<bool>, r2: Vec<bool>, rho_n: Vec<f64>) -> Result<Self> {
        let u = u
            .iter()
            .zip(r1.iter().zip(&r2))
            .map(|(x, (a, b))| (*a || *b).then(|| x.clone()))
            .collect();
        let data = Self { v, u, r1, r2, rho_n };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.v.len();
        for len in [self.u.len(), self.r1.len(), self.r2.len(), self.rho_n.len()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, got: len });
            }
        }
        for i in 0..n {
            if self.r1[i] && self.r2[i] {
                return invalid(format!("row {i} is in both the pilot and the second phase"));
            }
            if (self.r1[i] || self.r2[i]) != self.u[i].is_some() {
                return invalid(format!("row {i}: second-phase values must be present exactly where sampled"));
            }
            if !(self.rho_n[i] > 0.0 && self.rho_n[i] <= 1.0) {
                return invalid(format!("row {i}: inclusion probability {} outside (0, 1]", self.rho_n[i]));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn observed(&self, i: usize) -> bool {
        self.r1[i] || self.r2[i]
    }

    /// `n⁻¹ Σ (R1_i + R2_i)`.
    pub fn sampled_fraction(&self) -> f64 {
        (0..self.len()).filter(|&i| self.observed(i)).count() as f64 / self.len() as f64
    }

    /// First- and second-phase rows of the pilot units.
    pub fn pilot_rows(&self) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut v = Vec::new();
        let mut u = Vec::new();
        for i in 0..self.len() {
            if self.r1[i] {
                let ui = self.u[i]
                    .as_ref()
                    .ok_or_else(|| Error::Degenerate(format!("pilot row {i} has no second-phase values")))?;
                v.push(self.v[i].clone());
                u.push(ui.clone());
            }
        }
        if v.is_empty() {
            return Err(Error::Degenerate("the pilot sample is empty".into()));
        }
        Ok((v, u))
    }
}

/// `κ = ϖ / (1 + log(ϖ n / c))`.
pub fn kappa_default(varpi: f64, n: usize, c: f64) -> Result<f64> {
    let arg = varpi * n as f64 / c;
    if !(c > 0.0 && arg > 1.0) {
        return invalid(format!("pilot fraction needs ϖn/c > 1, got ϖ={varpi}, n={n}, c={c}"));
    }
    Ok(varpi / (1.0 + arg.ln()))
}

pub fn draw_pilot<R: Rng + ?Sized>(n: usize, kappa: f64, rng: &mut R) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() < kappa).collect()
}

/// Draws `R2` for non-pilot units and returns `(R2, ρ_n)`.
///
/// One uniform variate is consumed per unit, pilot or not, so draws for
/// different rules from the same generator state share their randomness.
pub fn draw_second_phase<R: Rng + ?Sized>(
    rule: &SamplingRule,
    r1: &[bool],
    v: &[Vec<f64>],
    kappa: f64,
    rng: &mut R,
) -> (Vec<bool>, Vec<f64>) {
    let mut r2 = Vec::with_capacity(v.len());
    let mut rho_n = Vec::with_capacity(v.len());
    for (vi, &pilot) in v.iter().zip(r1) {
        let p = rule.eval(vi);
        let draw: f64 = rng.random();
        r2.push(!pilot && draw < p);
        rho_n.push(kappa + (1.0 - kappa) * p);
    }
    (r2, rho_n)
}

/// Which estimated rule to use for the second phase.
#[derive(Debug, Clone, PartialEq)]
pub enum RuleKind {
    Uniform,
    /// Optimal rule for one component (0-based).
    SOpt(usize),
    Sum,
    COpt,
    GOpt,
    GOptPriority(Vec<f64>),
}

impl RuleKind {
    /// Stable identifier; `SOpt` components are 1-based in names.
    pub fn name(&self) -> String {
        match self {
            RuleKind::Uniform => "uniform".into(),
            RuleKind::SOpt(j) => format!("sopt{}", j + 1),
            RuleKind::Sum => "sum".into(),
            RuleKind::COpt => "copt".into(),
            RuleKind::GOpt => "gopt".into(),
            RuleKind::GOptPriority(a) => {
                let parts: Vec<String> = a.iter().map(|x| format!("{x}")).collect();
                format!("gopt:{}", parts.join(":"))
            }
        }
    }

    /// Parses `uniform`, `sopt`, `sopt2`, `sum`, `copt`, `gopt`, `gopt:0.95:0.05`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("gopt:") {
            let a = rest
                .split(':')
                .map(|x| x.trim().parse::<f64>().map_err(|e| Error::Parse(format!("priority '{x}': {e}"))))
                .collect::<Result<Vec<_>>>()?;
            return Ok(RuleKind::GOptPriority(a));
        }
        if let Some(rest) = s.strip_prefix("sopt") {
            if rest.is_empty() {
                return Ok(RuleKind::SOpt(0));
            }
            let j: usize = rest.parse().map_err(|_| Error::Parse(format!("unknown rule '{s}'")))?;
            if j == 0 {
                return Err(Error::Parse("sopt components are numbered from 1".into()));
            }
            return Ok(RuleKind::SOpt(j - 1));
        }
        Ok(match s {
            "uniform" => RuleKind::Uniform,
            "sum" => RuleKind::Sum,
            "copt" => RuleKind::COpt,
            "gopt" => RuleKind::GOpt,
            _ => return Err(Error::Parse(format!("unknown rule '{s}'"))),
        })
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').filter(|t| !t.trim().is_empty()).map(Self::parse).collect()
    }
}

/// Everything estimated from the pilot sample.
#[derive(Debug, Clone)]
pub struct PilotFit {
    pub eta: NuisanceParams,
    pub theta: Vec<f64>,
    /// `ψ̃` at the pilot units, one row per unit.
    pub psi: Vec<Vec<f64>>,
    pub models: Vec<Arc<MomentModel>>,
    pub converged: Vec<bool>,
}

impl PilotFit {
    pub fn pilot_size(&self) -> usize {
        self.psi.len()
    }

    /// `Π̃_j(v)` for every component.
    pub fn pi_at(&self, v: &[f64]) -> Vec<f64> {
        self.models.iter().map(|m| m.mean(v)).collect()
    }
}

/// Fits `η̃`, `θ̃` and the moment models on fully observed pilot rows.
pub fn fit_pilot(problem: &Problem, v: &[Vec<f64>], u: &[Vec<f64>], ridge: Option<f64>) -> Result<PilotFit> {
    let eta = eif::fit_nuisance(problem, v, u)?;
    let theta = eif::solve_theta_pilot(problem, v, u, &eta)?;
    let psi = v
        .iter()
        .zip(u)
        .map(|(vi, ui)| eif::psi(problem, vi, ui, &theta, &eta))
        .collect::<Result<Vec<_>>>()?;
    let basis = BasisSpec::from_rows(v)?;
    let ridge = ridge.unwrap_or_else(|| moments::default_ridge(basis.input_dim()));
    let mut models = Vec::with_capacity(problem.dim);
    let mut converged = Vec::with_capacity(problem.dim);
    for j in 0..problem.dim {
        let column: Vec<f64> = psi.iter().map(|p| p[j]).collect();
        let fit = moments::fit_moments(&column, v, &basis, FitOptions::with_ridge(ridge))?;
        converged.push(fit.converged);
        models.push(Arc::new(fit.model));
    }
    Ok(PilotFit {
        eta,
        theta,
        psi,
        models,
        converged,
    })
}

/// Estimated rules for one dataset, with the design context they came from.
#[derive(Debug, Clone)]
pub struct RuleBundle {
    pub fit: PilotFit,
    pub varpi: f64,
    pub kappa: f64,
    pub context: DesignContext,
    pub rules: Vec<(RuleKind, SamplingRule)>,
    /// Maximin solutions, keyed by rule name, for the maximin rule kinds.
    pub solutions: Vec<(String, MaximinSolution)>,
    /// `n⁻¹ Σ (1 − R1_i) ρ̃(V_i) − (ϖ − κ)` for each rule.
    pub budget_residuals: Vec<f64>,
}

impl RuleBundle {
    pub fn rule(&self, kind: &RuleKind) -> Option<&SamplingRule> {
        self.rules.iter().find(|(k, _)| k == kind).map(|(_, r)| r)
    }
}

/// Estimates the requested rules from the pilot part of `data`.
///
/// Only `v`, `r1` and the pilot second-phase values are read.
pub fn estimate_rules(
    problem: &Problem,
    data: &TwoPhaseDataset,
    varpi: f64,
    kappa: f64,
    kinds: &[RuleKind],
    ridge: Option<f64>,
) -> Result<RuleBundle> {
    let (pv, pu) = data.pilot_rows()?;
    let fit = fit_pilot(problem, &pv, &pu, ridge)?;
    design_rules(problem, fit, &data.v, &data.r1, varpi, kappa, kinds)
}

/// Builds rules from an existing pilot fit.
pub fn design_rules(
    problem: &Problem,
    fit: PilotFit,
    v: &[Vec<f64>],
    r1: &[bool],
    varpi: f64,
    kappa: f64,
    kinds: &[RuleKind],
) -> Result<RuleBundle> {
    let budget = Budget::two_phase(r1, varpi, kappa)?;
    let rho0 = budget.uniform();
    let sources: Vec<Lambda> = fit.models.iter().map(|m| Lambda::Moment(m.clone())).collect();
    let n = v.len();
    let pi: Vec<Vec<f64>> = fit.models.iter().map(|m| v.iter().map(|x| m.mean(x)).collect()).collect();
    let context = DesignContext::new(sources, v.to_vec(), pi, vec![1.0 / n as f64; n], budget, rho0)?;

    let mut component_rules: Option<Vec<SamplingRule>> = None;
    let mut rules = Vec::with_capacity(kinds.len());
    let mut solutions = Vec::new();
    for kind in kinds {
        let rule = match kind {
            RuleKind::Uniform => context.rho0.clone(),
            RuleKind::SOpt(j) => {
                if *j >= problem.dim {
                    return invalid(format!("rule {} refers to a missing component", kind.name()));
                }
                context.component_rule(*j)?
            }
            RuleKind::Sum => context.sum_rule()?,
            RuleKind::COpt => {
                if component_rules.is_none() {
                    component_rules = Some(context.component_rules()?);
                }
                let sol = maximin::solve_constrained_maximin(&context, component_rules.as_ref().unwrap())?;
                let rule = sol.rule.clone();
                solutions.push((kind.name(), sol));
                rule
            }
            RuleKind::GOpt => {
                let sol = maximin::solve_global_maximin(&context)?;
                let rule = sol.rule.clone();
                solutions.push((kind.name(), sol));
                rule
            }
            RuleKind::GOptPriority(a) => {
                let sol = maximin::solve_priority_maximin(&context, a)?;
                let rule = sol.rule.clone();
                solutions.push((kind.name(), sol));
                rule
            }
        };
        rules.push((kind.clone(), rule));
    }
    let budget_residuals = rules
        .iter()
        .map(|(_, r)| context.budget.residual(&r.eval_rows(v)))
        .collect();
    let _ = problem;
    Ok(RuleBundle {
        fit,
        varpi,
        kappa,
        context,
        rules,
        solutions,
        budget_residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    OneStep,
    ExcludePilot,
    IvwMeta,
    IpwOnly,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::OneStep => "one_step",
            EstimatorKind::ExcludePilot => "exclude_pilot",
            EstimatorKind::IvwMeta => "ivw",
            EstimatorKind::IpwOnly => "ipw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "one_step" => EstimatorKind::OneStep,
            "exclude_pilot" => EstimatorKind::ExcludePilot,
            "ivw" => EstimatorKind::IvwMeta,
            "ipw" => EstimatorKind::IpwOnly,
            other => return Err(Error::Parse(format!("unknown estimator '{other}'"))),
        })
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').filter(|t| !t.trim().is_empty()).map(Self::parse).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub theta: Vec<f64>,
    pub se: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
    pub kind: EstimatorKind,
    pub rule: String,
    pub sampled_fraction: f64,
}

impl EstimateReport {
    pub fn new(theta: Vec<f64>, se: Vec<f64>, kind: EstimatorKind, rule: String, sampled_fraction: f64) -> Self {
        let ci = theta.iter().zip(&se).map(|(t, s)| (t - Z_975 * s, t + Z_975 * s)).collect();
        Self {
            theta,
            se,
            ci,
            kind,
            rule,
            sampled_fraction,
        }
    }

    pub fn covers(&self, truth: &[f64]) -> Vec<bool> {
        self.ci.iter().zip(truth).map(|((lo, hi), t)| lo <= t && t <= hi).collect()
    }
}

/// Units entering an estimator with their sampling indicator and inclusion
/// probability.
struct Sampled<'a> {
    v: &'a [Vec<f64>],
    u: &'a [Option<Vec<f64>>],
    idx: Vec<usize>,
    r: Vec<bool>,
    rho: Vec<f64>,
}

impl Sampled<'_> {
    fn ipw(&self, problem: &Problem, eta: &NuisanceParams) -> Result<Vec<f64>> {
        let mut v = Vec::new();
        let mut u: Vec<&[f64]> = Vec::new();
        let mut w = Vec::new();
        for (k, &i) in self.idx.iter().enumerate() {
            if self.r[k] {
                v.push(self.v[i].clone());
                u.push(self.u[i].as_deref().ok_or_else(|| {
                    Error::Degenerate(format!("row {i} is marked sampled but has no second-phase values"))
                })?);
                w.push(1.0 / self.rho[k]);
            }
        }
        if v.is_empty() {
            return Err(Error::Degenerate("no sampled units".into()));
        }
        eif::solve_theta_weighted(problem, &v, &u, &w, eta)
    }

    /// One-step update of `theta_ipw` and its influence-function standard errors.
    fn one_step(
        &self,
        problem: &Problem,
        eta: &NuisanceParams,
        models: &[Arc<MomentModel>],
        theta_ipw: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = problem.dim;
        let m = self.idx.len() as f64;
        let pis: Vec<Vec<f64>> = self
            .idx
            .iter()
            .map(|&i| models.iter().map(|md| md.mean(&self.v[i])).collect())
            .collect();
        let mut theta = theta_ipw.to_vec();
        for (k, pi) in pis.iter().enumerate() {
            let a = if self.r[k] { 1.0 / self.rho[k] } else { 0.0 } - 1.0;
            for j in 0..d {
                theta[j] -= a * pi[j] / m;
            }
        }
        let mut eifs = Vec::with_capacity(self.idx.len());
        for (k, &i) in self.idx.iter().enumerate() {
            let psi = match (&self.u[i], self.r[k]) {
                (Some(u), true) => eif::psi(problem, &self.v[i], u, &theta, eta)?,
                _ => vec![0.0; d],
            };
            eifs.push(eif::two_phase_eif(&psi, &pis[k], self.rho[k], self.r[k])?);
        }
        let se = (0..d)
            .map(|j| {
                let mean = eifs.iter().map(|e| e[j]).sum::<f64>() / m;
                let ss: f64 = eifs.iter().map(|e| (e[j] - mean).powi(2)).sum();
                (ss / (m * (m - 1.0))).sqrt()
            })
            .collect();
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("one-step estimate".into()));
        }
        Ok((theta, se))
    }
}

fn all_units(data: &TwoPhaseDataset) -> Sampled<'_> {
    Sampled {
        v: &data.v,
        u: &data.u,
        idx: (0..data.len()).collect(),
        r: (0..data.len()).map(|i| data.observed(i)).collect(),
        rho: data.rho_n.clone(),
    }
}

/// Solves `Σ R_i ψ(V_i, U_i; θ, η̃) / ρ_n(V_i) = 0`.
pub fn ipw_estimate(problem: &Problem, data: &TwoPhaseDataset, eta: &NuisanceParams) -> Result<Vec<f64>> {
    all_units(data).ipw(problem, eta)
}

/// `θ̂ = θ̂_ipw − n⁻¹ Σ (R_i/ρ_n(V_i) − 1) Π̃(V_i)` over all units.
pub fn one_step(
    problem: &Problem,
    data: &TwoPhaseDataset,
    eta: &NuisanceParams,
    models: &[Arc<MomentModel>],
    theta_ipw: &[f64],
    rule: &str,
) -> Result<EstimateReport> {
    let (theta, se) = all_units(data).one_step(problem, eta, models, theta_ipw)?;
    Ok(EstimateReport::new(theta, se, EstimatorKind::OneStep, rule.into(), data.sampled_fraction()))
}

/// The one-step construction restricted to non-pilot units, with inclusion
/// probability `ρ̃(V_i)`.
pub fn one_step_excluding_pilot(
    problem: &Problem,
    data: &TwoPhaseDataset,
    eta: &NuisanceParams,
    models: &[Arc<MomentModel>],
    second_phase_rule: &SamplingRule,
    rule: &str,
) -> Result<EstimateReport> {
    let idx: Vec<usize> = (0..data.len()).filter(|&i| !data.r1[i]).collect();
    if idx.len() < 2 {
        return Err(Error::Degenerate("fewer than two units outside the pilot".into()));
    }
    let sampled = Sampled {
        v: &data.v,
        u: &data.u,
        r: idx.iter().map(|&i| data.r2[i]).collect(),
        rho: idx.iter().map(|&i| second_phase_rule.eval(&data.v[i])).collect(),
        idx,
    };
    if let Some(k) = (0..sampled.idx.len()).find(|&k| sampled.r[k] && !(sampled.rho[k] > 0.0)) {
        return Err(Error::Degenerate(format!("sampled unit {} has zero inclusion probability", sampled.idx[k])));
    }
    // Unsampled units with ρ̃ = 0 contribute Π̃ only; give them a harmless ρ.
    let mut sampled = sampled;
    for (k, rho) in sampled.rho.iter_mut().enumerate() {
        if !sampled.r[k] && !(*rho > 0.0) {
            *rho = 1.0;
        }
    }
    let theta_ipw = sampled.ipw(problem, eta)?;
    let (theta, se) = sampled.one_step(problem, eta, models, &theta_ipw)?;
    let frac = sampled.r.iter().filter(|r| **r).count() as f64 / sampled.idx.len() as f64;
    Ok(EstimateReport::new(theta, se, EstimatorKind::ExcludePilot, rule.into(), frac))
}

/// Pilot-only estimate `θ̃` with standard error `sd(ψ̃)/√m`.
pub fn pilot_estimate(fit: &PilotFit, rule: &str) -> Result<EstimateReport> {
    let m = fit.pilot_size() as f64;
    if m < 2.0 {
        return Err(Error::Degenerate("pilot estimate needs at least two units".into()));
    }
    let d = fit.theta.len();
    let se = (0..d)
        .map(|j| {
            let col: Vec<f64> = fit.psi.iter().map(|p| p[j]).collect();
            (crate::linalg::sample_variance(&col) / m).sqrt()
        })
        .collect();
    Ok(EstimateReport::new(fit.theta.clone(), se, EstimatorKind::IpwOnly, rule.into(), f64::NAN))
}

/// Component-wise inverse-variance weighting of two estimates.
pub fn ivw_combine(a: &EstimateReport, b: &EstimateReport) -> Result<EstimateReport> {
    if a.theta.len() != b.theta.len() {
        return Err(Error::DimensionMismatch {
            expected: a.theta.len(),
            got: b.theta.len(),
        });
    }
    let mut theta = Vec::with_capacity(a.theta.len());
    let mut se = Vec::with_capacity(a.theta.len());
    for j in 0..a.theta.len() {
        let (sa, sb) = (a.se[j], b.se[j]);
        if !(sa > 0.0 && sb > 0.0) {
            return invalid(format!("inverse-variance weighting needs positive SEs, got {sa} and {sb}"));
        }
        let (wa, wb) = (1.0 / (sa * sa), 1.0 / (sb * sb));
        theta.push((a.theta[j] * wa + b.theta[j] * wb) / (wa + wb));
        se.push((wa + wb).sqrt().recip());
    }
    Ok(EstimateReport::new(theta, se, EstimatorKind::IvwMeta, b.rule.clone(), b.sampled_fraction))
}

/// Runs the requested estimators on a dataset sampled under `rule`.
pub fn estimate(
    problem: &Problem,
    data: &TwoPhaseDataset,
    fit: &PilotFit,
    rule: &SamplingRule,
    rule_name: &str,
    kinds: &[EstimatorKind],
) -> Result<Vec<EstimateReport>> {
    let mut out = Vec::with_capacity(kinds.len());
    let mut excluded: Option<EstimateReport> = None;
    for kind in kinds {
        let report = match kind {
            EstimatorKind::OneStep => {
                let theta_ipw = ipw_estimate(problem, data, &fit.eta)?;
                one_step(problem, data, &fit.eta, &fit.models, &theta_ipw, rule_name)?
            }
            EstimatorKind::IpwOnly => {
                let theta = ipw_estimate(problem, data, &fit.eta)?;
                let se = vec![f64::NAN; theta.len()];
                EstimateReport::new(theta, se, EstimatorKind::IpwOnly, rule_name.into(), data.sampled_fraction())
            }
            EstimatorKind::ExcludePilot | EstimatorKind::IvwMeta => {
                if excluded.is_none() {
                    excluded = Some(one_step_excluding_pilot(problem, data, &fit.eta, &fit.models, rule, rule_name)?);
                }
                let ex = excluded.clone().unwrap();
                if *kind == EstimatorKind::ExcludePilot {
                    ex
                } else {
                    let mut combined = ivw_combine(&pilot_estimate(fit, rule_name)?, &ex)?;
                    combined.sampled_fraction = data.sampled_fraction();
                    combined
                }
            }
        };
        out.push(report);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kappa_default_arithmetic() {
        let k = kappa_default(0.3, 2000, 2.0).unwrap();
        assert!((k - 0.3 / (1.0 + 300f64.ln())).abs() < 1e-15);
        assert!((k - 0.044751).abs() < 1e-6);
        assert!(kappa_default(0.3, 2, 1.0).is_err());
        let big = kappa_default(0.3, 10_000_000, 2.0).unwrap();
        assert!(big < k && big * 1e7 > 1e5);
    }

    #[test]
    fn pilot_draw_is_reproducible_and_concentrated() {
        let a = draw_pilot(2000, 0.05, &mut ChaCha8Rng::seed_from_u64(7));
        let b = draw_pilot(2000, 0.05, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        let n = 100_000;
        let k = 1.0 - 1e-3;
        let frac = draw_pilot(n, k, &mut ChaCha8Rng::seed_from_u64(1)).iter().filter(|x| **x).count() as f64 / n as f64;
        assert!((frac - k).abs() <= 4.0 * (k * (1.0 - k) / n as f64).sqrt());
    }

    #[test]
    fn degenerate_second_phase_rules() {
        let v: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64]).collect();
        let r1: Vec<bool> = (0..50).map(|i| i % 10 == 0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (r2, rho) = draw_second_phase(&SamplingRule::Uniform(1.0), &r1, &v, 0.1, &mut rng);
        assert!(r2.iter().zip(&r1).all(|(a, b)| *a != *b));
        assert!(rho.iter().all(|r| (*r - 1.0).abs() < 1e-15));
        let (r2, rho) = draw_second_phase(&SamplingRule::Uniform(0.0), &r1, &v, 0.1, &mut rng);
        assert!(r2.iter().all(|r| !r));
        assert!(rho.iter().all(|r| *r == 0.1));
    }

    #[test]
    fn rule_kind_names_round_trip() {
        for s in ["uniform", "sopt1", "sopt2", "sum", "copt", "gopt", "gopt:0.95:0.05"] {
            assert_eq!(RuleKind::parse(s).unwrap().name(), s);
        }
        assert_eq!(RuleKind::parse("sopt").unwrap(), RuleKind::SOpt(0));
        assert!(RuleKind::parse("sopt0").is_err());
        assert!(RuleKind::parse("best").is_err());
    }

    #[test]
    fn ivw_cases() {
        let a = EstimateReport::new(vec![1.0], vec![0.5], EstimatorKind::IpwOnly, "x".into(), 0.1);
        let b = EstimateReport::new(vec![3.0], vec![0.5], EstimatorKind::ExcludePilot, "x".into(), 0.3);
        let c = ivw_combine(&a, &b).unwrap();
        assert!((c.theta[0] - 2.0).abs() < 1e-15);
        assert!((c.se[0] - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        let far = EstimateReport::new(vec![3.0], vec![1e12], EstimatorKind::ExcludePilot, "x".into(), 0.3);
        let c = ivw_combine(&a, &far).unwrap();
        assert!((c.theta[0] - 1.0).abs() < 1e-12 && (c.se[0] - 0.5).abs() < 1e-12);
        let zero = EstimateReport::new(vec![3.0], vec![0.0], EstimatorKind::ExcludePilot, "x".into(), 0.3);
        assert!(ivw_combine(&a, &zero).is_err());
    }

    #[test]
    fn ci_is_symmetric() {
        let r = EstimateReport::new(vec![1.0, 2.0], vec![0.1, 0.2], EstimatorKind::OneStep, "u".into(), 0.3);
        assert!((r.ci[1].1 - (2.0 + Z_975 * 0.2)).abs() < 1e-15);
        assert!((r.ci[0].0 - (1.0 - Z_975 * 0.1)).abs() < 1e-15);
    }

    fn mean_data(n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>() * 2.0 - 1.0]).collect();
        let u = v.iter().map(|z| vec![1.0 + z[0] + rng.random::<f64>() - 0.5]).collect();
        (v, u)
    }

    #[test]
    fn full_observation_reduces_to_sample_mean() {
        let (v, u) = mean_data(200);
        let n = v.len();
        let r1: Vec<bool> = (0..n).map(|i| i < 40).collect();
        let r2: Vec<bool> = r1.iter().map(|p| !p).collect();
        let data = TwoPhaseDataset::from_full(v, &u, r1, r2, vec![1.0; n]).unwrap();
        let problem = Problem::new(crate::eif::ProblemKind::Mean, 1).unwrap();
        let (pv, pu) = data.pilot_rows().unwrap();
        let fit = fit_pilot(&problem, &pv, &pu, None).unwrap();
        let th = ipw_estimate(&problem, &data, &fit.eta).unwrap();
        let mean = u.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        assert!((th[0] - mean).abs() < 1e-12);
        let rep = one_step(&problem, &data, &fit.eta, &fit.models, &th, "full").unwrap();
        assert!((rep.theta[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn estimated_rules_spend_the_budget_exactly() {
        let (v, u) = mean_data(1500);
        let n = v.len();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kappa = kappa_default(0.3, n, 1.0).unwrap();
        let r1 = draw_pilot(n, kappa, &mut rng);
        let data = TwoPhaseDataset::from_full(v, &u, r1, vec![false; n], vec![1.0; n]).unwrap();
        let problem = Problem::new(crate::eif::ProblemKind::Mean, 1).unwrap();
        let kinds = [RuleKind::Uniform, RuleKind::SOpt(0), RuleKind::Sum, RuleKind::COpt, RuleKind::GOpt];
        let bundle = estimate_rules(&problem, &data, 0.3, kappa, &kinds, None).unwrap();
        for r in &bundle.budget_residuals {
            assert!(r.abs() <= 1e-8, "{r}");
        }
        // With one component every optimal construction gives the same rule.
        let s = bundle.rule(&RuleKind::SOpt(0)).unwrap().eval_rows(&data.v);
        for kind in [RuleKind::Sum, RuleKind::COpt, RuleKind::GOpt] {
            let other = bundle.rule(&kind).unwrap().eval_rows(&data.v);
            let gap = s.iter().zip(&other).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(gap < 1e-6, "{kind:?}: {gap}");
        }
    }
}
