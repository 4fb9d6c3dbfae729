//! Second-phase sampling rules and the Neyman-type optimal rule.
//!
//! A rule maps a first-phase row `v` to an inclusion probability in `[0, 1]`.
//! The optimal rule for a scalar parameter is the truncated form
//! `min(σ(v)/τ, 1)` with `τ` calibrated so the rule spends exactly the budget.

use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::moments::MomentModel;

/// The score a truncated rule is proportional to.
#[derive(Debug, Clone, PartialEq)]
pub enum Lambda {
    Constant(f64),
    /// Lookup by the first coordinate of `v` used as an index; used for
    /// discrete laws whose support points are labelled `0, 1, …`.
    Table(Vec<f64>),
    /// Fitted conditional standard deviation `σ̃(v)`.
    Moment(Arc<MomentModel>),
    /// `sqrt(Σ_j c_j λ_j(v)²)`.
    Pooled { parts: Vec<Lambda>, coef: Vec<f64> },
}

impl Lambda {
    pub fn eval(&self, v: &[f64]) -> f64 {
        match self {
            Lambda::Constant(c) => *c,
            Lambda::Table(values) => values[v[0] as usize],
            Lambda::Moment(model) => model.sigma(v),
            Lambda::Pooled { parts, coef } => parts
                .iter()
                .zip(coef)
                .map(|(part, c)| c * part.eval(v).powi(2))
                .sum::<f64>()
                .max(0.0)
                .sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SamplingRule {
    Uniform(f64),
    /// `min(λ(v)/τ, 1)`; `τ = 0` marks a saturated rule that samples everyone.
    Truncated { lambda: Lambda, tau: f64 },
    /// `(1 − Σw) · base(v) + Σ w_j · component_j(v)`.
    Mixture {
        base: Box<SamplingRule>,
        components: Vec<SamplingRule>,
        weights: Vec<f64>,
    },
}

impl SamplingRule {
    pub fn eval(&self, v: &[f64]) -> f64 {
        match self {
            SamplingRule::Uniform(c) => *c,
            SamplingRule::Truncated { lambda, tau } => truncate(lambda.eval(v), *tau),
            SamplingRule::Mixture {
                base,
                components,
                weights,
            } => {
                let total: f64 = weights.iter().sum();
                let mix: f64 = components
                    .iter()
                    .zip(weights)
                    .map(|(rule, w)| w * rule.eval(v))
                    .sum();
                (1.0 - total) * base.eval(v) + mix
            }
        }
    }

    pub fn eval_rows(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|v| self.eval(v)).collect()
    }

    /// Builds a mixture rule, checking that the weights lie in the simplex.
    pub fn mixture(base: SamplingRule, components: Vec<SamplingRule>, weights: Vec<f64>) -> Result<Self> {
        if components.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: components.len(),
                got: weights.len(),
            });
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) || total > 1.0 + 1e-12 {
            return invalid(format!("mixture weights {weights:?} are not in the simplex"));
        }
        Ok(SamplingRule::Mixture {
            base: Box::new(base),
            components,
            weights,
        })
    }
}

pub fn truncate(lambda: f64, tau: f64) -> f64 {
    if tau <= 0.0 {
        1.0
    } else {
        (lambda / tau).min(1.0)
    }
}

/// Expected-sampling constraint `Σ_i c_i ρ(v_i) = total`.
///
/// For the two-phase design `c_i = (1 − R1_i)/n` and `total = ϖ − κ`; for a
/// known discrete law `c_i` are the support probabilities and `total = ϖ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Budget {
    pub weights: Vec<f64>,
    pub total: f64,
}

impl Budget {
    pub fn two_phase(pilot: &[bool], varpi: f64, kappa: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&kappa) || !(kappa < varpi && varpi <= 1.0) {
            return invalid(format!("need 0 ≤ κ < ϖ ≤ 1, got κ={kappa}, ϖ={varpi}"));
        }
        let n = pilot.len() as f64;
        let weights = pilot.iter().map(|&p| if p { 0.0 } else { 1.0 / n }).collect();
        Ok(Self {
            weights,
            total: varpi - kappa,
        })
    }

    pub fn population(probs: &[f64], varpi: f64) -> Result<Self> {
        if !(varpi > 0.0 && varpi <= 1.0) {
            return invalid(format!("budget ϖ={varpi} must lie in (0, 1]"));
        }
        Ok(Self {
            weights: probs.to_vec(),
            total: varpi,
        })
    }

    /// Total weight of eligible units; the spend of the all-ones rule.
    pub fn capacity(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn spend(&self, rho: &[f64]) -> f64 {
        self.weights.iter().zip(rho).map(|(w, r)| w * r).sum()
    }

    pub fn residual(&self, rho: &[f64]) -> f64 {
        self.spend(rho) - self.total
    }

    /// The constant rule that spends the budget exactly (capped at 1).
    pub fn uniform(&self) -> SamplingRule {
        SamplingRule::Uniform((self.total / self.capacity()).min(1.0))
    }
}

/// `h(τ) = Σ c_i min(σ_i/τ, 1)`, non-increasing in τ.
pub fn threshold_spend(sigma: &[f64], weights: &[f64], tau: f64) -> f64 {
    sigma.iter().zip(weights).map(|(s, w)| w * truncate(*s, tau)).sum()
}

/// Solves `Σ c_i min(σ_i/τ, 1) = total` by bisection.
///
/// Returns `0.0` (the saturated sentinel) when the budget covers every
/// eligible unit. When units with `σ_i = 0` make the target unreachable the
/// smallest bracketing τ is returned and the budget is under-spent.
pub fn solve_threshold_weighted(sigma: &[f64], weights: &[f64], total: f64) -> Result<f64> {
    if sigma.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: sigma.len(),
            got: weights.len(),
        });
    }
    if let Some(bad) = sigma.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return invalid(format!("scores must be finite and nonnegative, got {bad}"));
    }
    if !(total > 0.0) {
        return invalid(format!("budget target {total} must be positive"));
    }
    let capacity: f64 = weights.iter().sum();
    if total >= capacity * (1.0 - 1e-15) {
        return Ok(0.0);
    }
    let eligible: Vec<(f64, f64)> = sigma
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(s, w)| (*s, *w))
        .collect();
    let max_sigma = eligible.iter().map(|e| e.0).fold(0.0, f64::max);
    if max_sigma <= 0.0 {
        return Err(Error::Degenerate(
            "every score is zero; the optimal rule is undefined".into(),
        ));
    }
    let (s, w): (Vec<f64>, Vec<f64>) = eligible.into_iter().unzip();
    let h = |tau: f64| threshold_spend(&s, &w, tau);

    let mut lo = 1e-12 * max_sigma;
    let weighted_sum: f64 = s.iter().zip(&w).map(|(a, b)| a * b).sum();
    let mut hi = weighted_sum / total * (1.0 + 1e-6);
    while h(hi) > total {
        hi *= 2.0;
    }
    if h(lo) < total {
        // Zero scores cap the reachable spend below the target.
        return Ok(lo);
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let value = h(mid);
        if (value - total).abs() <= 1e-10 {
            return Ok(mid);
        }
        if value > total {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Solves `mean_i min(σ_i/τ, 1) = target` for a target fraction in `(0, 1)`.
pub fn solve_threshold(sigma: &[f64], target: f64) -> Result<f64> {
    if !(target > 0.0) {
        return invalid(format!("target fraction {target} must be positive"));
    }
    let w = vec![1.0 / sigma.len() as f64; sigma.len()];
    solve_threshold_weighted(sigma, &w, target)
}

/// The budget-calibrated truncated rule `min(λ/τ, 1)`, given `λ` evaluated at
/// the budget's units.
pub fn optimal_rule(lambda: Lambda, lambda_values: &[f64], budget: &Budget) -> Result<SamplingRule> {
    let tau = solve_threshold_weighted(lambda_values, &budget.weights, budget.total)?;
    Ok(SamplingRule::Truncated { lambda, tau })
}

/// Optimal rule for one component: `λ = σ̃`, τ from the pilot-masked budget
/// `n⁻¹ Σ (1 − R1_i) min(σ̃(V_i)/τ, 1) = ϖ − κ`.
pub fn scalar_optimal_rule(
    sigma_model: Lambda,
    rows: &[Vec<f64>],
    varpi: f64,
    kappa: f64,
    pilot: &[bool],
) -> Result<SamplingRule> {
    let budget = Budget::two_phase(pilot, varpi, kappa)?;
    let values: Vec<f64> = rows.iter().map(|v| sigma_model.eval(v)).collect();
    optimal_rule(sigma_model, &values, &budget)
}

/// Rule minimising the sum of component bounds: `λ = sqrt(Σ_j σ̃_j²)`.
pub fn sum_rule(sigma_models: Vec<Lambda>, rows: &[Vec<f64>], budget: &Budget) -> Result<SamplingRule> {
    if sigma_models.is_empty() {
        return invalid("sum rule needs at least one component");
    }
    let lambda = if sigma_models.len() == 1 {
        sigma_models.into_iter().next().unwrap()
    } else {
        let d = sigma_models.len();
        Lambda::Pooled {
            parts: sigma_models,
            coef: vec![1.0; d],
        }
    };
    let values: Vec<f64> = rows.iter().map(|v| lambda.eval(v)).collect();
    optimal_rule(lambda, &values, budget)
}

/// Conditional moments of the influence function evaluated at a set of
/// points, with the averaging weights of the bound (`1/n` each for an
/// empirical sample, probabilities for a discrete law).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentValues {
    /// `sigma[j][i] = σ_j(V_i)`.
    pub sigma: Vec<Vec<f64>>,
    /// `pi[j][i] = Π_j(V_i)`.
    pub pi: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl MomentValues {
    pub fn empirical(sigma: Vec<Vec<f64>>, pi: Vec<Vec<f64>>) -> Result<Self> {
        let n = sigma.first().map_or(0, Vec::len);
        Self::weighted(sigma, pi, vec![1.0 / n as f64; n])
    }

    pub fn weighted(sigma: Vec<Vec<f64>>, pi: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if sigma.is_empty() || sigma.len() != pi.len() {
            return invalid("need matching, non-empty σ and Π components");
        }
        for comp in sigma.iter().chain(&pi) {
            if comp.len() != weights.len() {
                return Err(Error::DimensionMismatch {
                    expected: weights.len(),
                    got: comp.len(),
                });
            }
        }
        Ok(Self { sigma, pi, weights })
    }

    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `E[σ_j²/ρ]` for every component.
    pub fn variance_term(&self, rho: &[f64]) -> Result<Vec<f64>> {
        self.sigma
            .iter()
            .map(|s| {
                let mut total = 0.0;
                for i in 0..s.len() {
                    let s2 = s[i] * s[i];
                    if s2 == 0.0 {
                        continue;
                    }
                    if !(rho[i] > 0.0) {
                        return Err(Error::Degenerate(format!(
                            "rule is zero at unit {i} where σ > 0"
                        )));
                    }
                    total += self.weights[i] * s2 / rho[i];
                }
                Ok(total)
            })
            .collect()
    }

    /// Weighted variance of `Π_j(V)` for every component.
    pub fn mean_variance(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.pi
            .iter()
            .map(|p| {
                let m = p.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>() / total;
                p.iter()
                    .zip(&self.weights)
                    .map(|(a, w)| w * (a - m).powi(2))
                    .sum::<f64>()
                    / total
            })
            .collect()
    }

    /// Efficiency bound `E[σ_j²/ρ] + Var[Π_j]` for every component.
    pub fn bound(&self, rho: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .variance_term(rho)?
            .into_iter()
            .zip(self.mean_variance())
            .map(|(a, b)| a + b)
            .collect())
    }
}

/// Benchmark quantities `ξ_j = E[σ_j²/ρ₀]` and `b_j = ξ_j + Var[Π_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalBound {
    pub xi: Vec<f64>,
    pub b: Vec<f64>,
}

impl EmpiricalBound {
    pub fn new(values: &MomentValues, rho0: &[f64]) -> Result<Self> {
        if let Some(i) = rho0.iter().position(|r| !(*r > 0.0)) {
            return Err(Error::Degenerate(format!("benchmark rule is zero at unit {i}")));
        }
        let xi = values.variance_term(rho0)?;
        let b = xi.iter().zip(values.mean_variance()).map(|(x, v)| x + v).collect();
        Ok(Self { xi, b })
    }

    /// Efficiency bound for every component under `rho`.
    pub fn bound_under(&self, values: &MomentValues, rho: &[f64]) -> Result<Vec<f64>> {
        values.bound(rho)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_variants_evaluate_as_documented() {
        assert_eq!(SamplingRule::Uniform(0.3).eval(&[7.0]), 0.3);
        let half = SamplingRule::Truncated {
            lambda: Lambda::Constant(2.0),
            tau: 4.0,
        };
        assert_eq!(half.eval(&[]), 0.5);
        let capped = SamplingRule::Truncated {
            lambda: Lambda::Constant(5.0),
            tau: 4.0,
        };
        assert_eq!(capped.eval(&[]), 1.0);
        let saturated = SamplingRule::Truncated {
            lambda: Lambda::Constant(0.0),
            tau: 0.0,
        };
        assert_eq!(saturated.eval(&[]), 1.0);
        let mix = SamplingRule::mixture(SamplingRule::Uniform(0.2), vec![half, capped], vec![0.25, 0.5]).unwrap();
        assert!((mix.eval(&[]) - (0.25 * 0.2 + 0.25 * 0.5 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn mixture_weights_outside_simplex_are_rejected() {
        let r = SamplingRule::mixture(SamplingRule::Uniform(0.2), vec![SamplingRule::Uniform(0.1)], vec![1.2]);
        assert!(r.is_err());
    }

    #[test]
    fn constant_scores_give_sigma_over_target() {
        let tau = solve_threshold(&[1.0; 10], 0.5).unwrap();
        assert!((tau - 2.0).abs() < 1e-9);
    }

    #[test]
    fn two_point_threshold_hand_solutions() {
        // (1 + 3)/2/τ = 0.5 with 3 ≤ τ.
        assert!((solve_threshold(&[1.0, 3.0], 0.5).unwrap() - 4.0).abs() < 1e-9);
        // 0.5/τ + 0.5 = 0.9 on the branch 1 < τ < 3.
        assert!((solve_threshold(&[1.0, 3.0], 0.9).unwrap() - 1.25).abs() < 1e-9);
    }

    #[test]
    fn full_budget_returns_saturated_sentinel() {
        assert_eq!(solve_threshold(&[1.0, 2.0], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn all_zero_scores_are_degenerate() {
        assert!(matches!(solve_threshold(&[0.0, 0.0], 0.5), Err(Error::Degenerate(_))));
    }

    #[test]
    fn two_point_optimal_rule_and_bound() {
        let budget = Budget::population(&[0.5, 0.5], 0.5).unwrap();
        let rule = optimal_rule(Lambda::Table(vec![1.0, 3.0]), &[1.0, 3.0], &budget).unwrap();
        let rho = rule.eval_rows(&[vec![0.0], vec![1.0]]);
        assert!((rho[0] - 0.25).abs() < 1e-9 && (rho[1] - 0.75).abs() < 1e-9);
        let values = MomentValues::weighted(vec![vec![1.0, 3.0]], vec![vec![0.0, 0.0]], vec![0.5, 0.5]).unwrap();
        assert!((values.variance_term(&rho).unwrap()[0] - 8.0).abs() < 1e-7);
        assert!((values.variance_term(&[0.5, 0.5]).unwrap()[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn sum_rule_with_equal_constant_components_is_uniform() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let budget = Budget::population(&[0.2; 5], 0.3).unwrap();
        let rule = sum_rule(vec![Lambda::Constant(1.0), Lambda::Constant(1.0)], &rows, &budget).unwrap();
        for v in &rows {
            assert!((rule.eval(v) - 0.3).abs() < 1e-9);
        }
        assert!((Lambda::Pooled { parts: vec![Lambda::Constant(1.0); 2], coef: vec![1.0; 2] }.eval(&[]) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empirical_bound_edge_cases() {
        let n = 4;
        let pi = vec![vec![0.0, 1.0, 2.0, 3.0]];
        let zero = MomentValues::empirical(vec![vec![0.0; n]], pi.clone()).unwrap();
        let b = EmpiricalBound::new(&zero, &[0.3; 4]).unwrap();
        assert_eq!(b.xi, vec![0.0]);
        assert!((b.b[0] - 1.25).abs() < 1e-12);

        let flat = MomentValues::empirical(vec![vec![0.3; n]], pi).unwrap();
        let b = EmpiricalBound::new(&flat, &[0.3; 4]).unwrap();
        assert!((b.xi[0] - 0.3).abs() < 1e-12);
        assert!(b.b[0] >= b.xi[0]);

        assert!(EmpiricalBound::new(&flat, &[0.3, 0.0, 0.3, 0.3]).is_err());
    }

    #[test]
    fn two_phase_budget_masks_pilot_units() {
        let pilot = [true, false, false, false];
        let budget = Budget::two_phase(&pilot, 0.5, 0.25).unwrap();
        assert_eq!(budget.capacity(), 0.75);
        let SamplingRule::Uniform(c) = budget.uniform() else { panic!() };
        assert!((c - 1.0 / 3.0).abs() < 1e-15);
        assert!(Budget::two_phase(&pilot, 0.2, 0.25).is_err());
    }
}
