//! Maximin sampling rules for vector parameters.
//!
//! For a benchmark rule `ρ₀` the relative improvement of component `j` under
//! a rule `ρ` is
//!
//! ```text
//! f_j(ρ) = b_j⁻¹ (ξ_j − E[σ_j²/ρ]),     M(ρ) = min_j f_j(ρ).
//! ```
//!
//! Two maximisers are provided. The constrained one searches convex
//! combinations of `ρ₀` and the component-wise optimal rules. The global one
//! solves the finite-dimensional dual
//!
//! ```text
//! G(w) = Σ_j w_j b_j⁻¹ ξ_j − E[σ_w max(σ_w, τ_w)],   σ_w² = Σ_j w_j b_j⁻¹ σ_j²
//! ```
//!
//! over the probability simplex and returns the truncated rule `min(σ_w/τ_w, 1)`.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{invalid, Error, Result};
use crate::rule::{self, Budget, EmpiricalBound, Lambda, MomentValues, SamplingRule};

/// Everything the design solvers need, evaluated at a fixed set of points.
#[derive(Debug, Clone)]
pub struct DesignContext {
    /// `σ_j` as evaluable scores, used to build the returned rules.
    pub sources: Vec<Lambda>,
    pub rows: Vec<Vec<f64>>,
    pub values: MomentValues,
    pub budget: Budget,
    pub rho0: SamplingRule,
    pub rho0_values: Vec<f64>,
    pub bound: EmpiricalBound,
}

impl DesignContext {
    /// `pi[j][i]` are the conditional means at `rows[i]`; `weights` average
    /// the bound (empirical `1/n`, or law probabilities).
    pub fn new(
        sources: Vec<Lambda>,
        rows: Vec<Vec<f64>>,
        pi: Vec<Vec<f64>>,
        weights: Vec<f64>,
        budget: Budget,
        rho0: SamplingRule,
    ) -> Result<Self> {
        let sigma: Vec<Vec<f64>> = sources
            .iter()
            .map(|s| rows.iter().map(|v| s.eval(v)).collect())
            .collect();
        let values = MomentValues::weighted(sigma, pi, weights)?;
        if budget.weights.len() != rows.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                got: budget.weights.len(),
            });
        }
        let rho0_values = rho0.eval_rows(&rows);
        let bound = EmpiricalBound::new(&values, &rho0_values)?;
        Ok(Self {
            sources,
            rows,
            values,
            budget,
            rho0,
            rho0_values,
            bound,
        })
    }

    pub fn dim(&self) -> usize {
        self.sources.len()
    }

    /// Budget-calibrated optimal rule for component `j`.
    pub fn component_rule(&self, j: usize) -> Result<SamplingRule> {
        rule::optimal_rule(self.sources[j].clone(), &self.values.sigma[j], &self.budget)
    }

    pub fn component_rules(&self) -> Result<Vec<SamplingRule>> {
        (0..self.dim()).map(|j| self.component_rule(j)).collect()
    }

    pub fn sum_rule(&self) -> Result<SamplingRule> {
        rule::sum_rule(self.sources.clone(), &self.rows, &self.budget)
    }

    pub fn improvement(&self, rule: &SamplingRule) -> Result<(Vec<f64>, f64)> {
        relative_improvement(&self.bound, &self.values, &rule.eval_rows(&self.rows))
    }
}

/// `f_j(ρ)` for every component and their minimum `M(ρ)`.
pub fn relative_improvement(bound: &EmpiricalBound, values: &MomentValues, rho: &[f64]) -> Result<(Vec<f64>, f64)> {
    let var = values.variance_term(rho)?;
    let f: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(j, v)| (bound.xi[j] - v) / bound.b[j])
        .collect();
    let m = f.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((f, m))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintKind {
    /// `Σ w ≤ 1, 0 ≤ w ≤ 1`.
    SumAtMostOne,
    /// `Σ w = 1, 0 ≤ w ≤ 1`.
    SumExactlyOne,
    /// `Σ a_j w_j = 1, 0 ≤ w_j ≤ 1/a_j`.
    PriorityWeighted(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub w: Vec<f64>,
    pub kind: ConstraintKind,
}

impl WeightVector {
    pub fn is_feasible(&self, tol: f64) -> bool {
        let nonneg = self.w.iter().all(|&x| x >= -tol);
        match &self.kind {
            ConstraintKind::SumAtMostOne => {
                nonneg && self.w.iter().all(|&x| x <= 1.0 + tol) && self.w.iter().sum::<f64>() <= 1.0 + tol
            }
            ConstraintKind::SumExactlyOne => nonneg && (self.w.iter().sum::<f64>() - 1.0).abs() <= tol,
            ConstraintKind::PriorityWeighted(a) => {
                nonneg
                    && self.w.iter().zip(a).all(|(w, a)| *w <= 1.0 / a + tol)
                    && (self.w.iter().zip(a).map(|(w, a)| w * a).sum::<f64>() - 1.0).abs() <= tol
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaximinSolution {
    pub weights: WeightVector,
    pub rule: SamplingRule,
    /// `M(ρ)` of the returned rule: the minimum of `per_component_improvement`.
    pub objective_value: f64,
    pub per_component_improvement: Vec<f64>,
    /// Optimal value of the dual objective, for the dual-based solvers.
    pub dual_value: Option<f64>,
}

// ---------------------------------------------------------------------------
// Constrained maximin over convex combinations.

/// Evaluates the constrained objective at mixture weights `w`.
pub struct ConstrainedObjective<'a> {
    values: &'a MomentValues,
    bound: &'a EmpiricalBound,
    rho0: &'a [f64],
    /// `diff[k][i] = ρ_k(V_i) − ρ₀(V_i)`.
    diff: Vec<Vec<f64>>,
}

impl<'a> ConstrainedObjective<'a> {
    pub fn new(ctx: &'a DesignContext, component_values: &[Vec<f64>]) -> Self {
        let diff = component_values
            .iter()
            .map(|r| r.iter().zip(&ctx.rho0_values).map(|(a, b)| a - b).collect())
            .collect();
        Self {
            values: &ctx.values,
            bound: &ctx.bound,
            rho0: &ctx.rho0_values,
            diff,
        }
    }

    fn mixed(&self, w: &[f64]) -> Vec<f64> {
        let mut rho = self.rho0.to_vec();
        for (k, wk) in w.iter().enumerate() {
            if *wk != 0.0 {
                for (r, d) in rho.iter_mut().zip(&self.diff[k]) {
                    *r += wk * d;
                }
            }
        }
        rho
    }

    /// Per-component improvements `f_j(ρ_w)`.
    pub fn components(&self, w: &[f64]) -> Vec<f64> {
        let rho = self.mixed(w);
        self.values
            .sigma
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let var: f64 = s
                    .iter()
                    .zip(&rho)
                    .zip(&self.values.weights)
                    .map(|((s, r), c)| if *s == 0.0 { 0.0 } else { c * s * s / r })
                    .sum();
                (self.bound.xi[j] - var) / self.bound.b[j]
            })
            .collect()
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        self.components(w).into_iter().fold(f64::INFINITY, f64::min)
    }

    /// `∂f_j/∂w_k = b_j⁻¹ E[σ_j² (ρ_k − ρ₀) / ρ_w²]`.
    fn gradients(&self, w: &[f64]) -> Vec<Vec<f64>> {
        let rho = self.mixed(w);
        self.values
            .sigma
            .iter()
            .enumerate()
            .map(|(j, s)| {
                self.diff
                    .iter()
                    .map(|d| {
                        s.iter()
                            .zip(&rho)
                            .zip(d)
                            .zip(&self.values.weights)
                            .map(|(((s, r), d), c)| c * s * s * d / (r * r))
                            .sum::<f64>()
                            / self.bound.b[j]
                    })
                    .collect()
            })
            .collect()
    }
}

/// Cap on pattern-search iterations after the grid stage.
const MAX_REFINE_ITERATIONS: usize = 5000;

fn grid_step(d: usize) -> f64 {
    match d {
        0..=2 => 0.01,
        3 => 0.02,
        _ => 0.05,
    }
}

/// All points of the grid `{0, h, 2h, …}^d` with coordinate sum ≤ 1 (or = 1).
fn simplex_grid(d: usize, h: f64, exact_sum: bool) -> Vec<Vec<f64>> {
    let steps = (1.0 / h).round() as usize;
    let mut out = Vec::new();
    let mut cur = vec![0usize; d];
    fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, exact: bool, steps: usize, h: f64, out: &mut Vec<Vec<f64>>) {
        let d = cur.len();
        if pos == d - 1 {
            let range: Vec<usize> = if exact { vec![left] } else { (0..=left).collect() };
            for v in range {
                cur[pos] = v;
                out.push(cur.iter().map(|&c| c as f64 / steps as f64).collect());
            }
            let _ = h;
            return;
        }
        for v in 0..=left {
            cur[pos] = v;
            rec(pos + 1, left - v, cur, exact, steps, h, out);
        }
    }
    rec(0, steps, &mut cur, exact_sum, steps, h, &mut out);
    out
}

/// Deterministic preference among (near-)equal objective values: better
/// value, then smaller Euclidean norm, then lexicographically smaller.
fn prefer(candidate: (&[f64], f64), incumbent: (&[f64], f64), maximise: bool) -> bool {
    let (cw, cv) = candidate;
    let (iw, iv) = incumbent;
    let tol = 1e-12 * (1.0 + iv.abs());
    let better = if maximise { cv > iv + tol } else { cv < iv - tol };
    if better {
        return true;
    }
    if (cv - iv).abs() > tol {
        return false;
    }
    let cn: f64 = cw.iter().map(|x| x * x).sum();
    let inn: f64 = iw.iter().map(|x| x * x).sum();
    if cn < inn - 1e-15 {
        return true;
    }
    if cn > inn + 1e-15 {
        return false;
    }
    cw.iter().zip(iw).find(|(a, b)| a != b).is_some_and(|(a, b)| a < b)
}

fn feasible_le_one(w: &[f64]) -> bool {
    w.iter().all(|&x| (-1e-15..=1.0 + 1e-15).contains(&x)) && w.iter().sum::<f64>() <= 1.0 + 1e-12
}

fn feasible_simplex(w: &[f64]) -> bool {
    w.iter().all(|&x| x >= -1e-15) && (w.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

fn clean(w: &mut [f64]) {
    for x in w.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Minimum-norm point of the convex hull of `vectors` (Frank–Wolfe with
/// exact line search); the steepest ascent direction of a pointwise minimum.
fn min_norm_hull(vectors: &[Vec<f64>]) -> Vec<f64> {
    let dim = vectors[0].len();
    let mut x = vectors[0].clone();
    for _ in 0..200 {
        let (idx, _) = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()))
            .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
        let s = &vectors[idx];
        let d: Vec<f64> = (0..dim).map(|k| s[k] - x[k]).collect();
        let dd: f64 = d.iter().map(|v| v * v).sum();
        if dd < 1e-30 {
            break;
        }
        let t = (-(x.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>()) / dd).clamp(0.0, 1.0);
        if t <= 0.0 {
            break;
        }
        for k in 0..dim {
            x[k] += t * d[k];
        }
    }
    x
}

/// Maximises `min_j f_j(ρ₀ + Σ w_k(ρ_k − ρ₀))` over `Σw ≤ 1, w ≥ 0`.
pub fn solve_constrained_maximin(ctx: &DesignContext, component_rules: &[SamplingRule]) -> Result<MaximinSolution> {
    let d = ctx.dim();
    if component_rules.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: component_rules.len(),
        });
    }
    let comp_values: Vec<Vec<f64>> = component_rules.iter().map(|r| r.eval_rows(&ctx.rows)).collect();
    let objective = ConstrainedObjective::new(ctx, &comp_values);

    let w = if d <= 4 {
        let h = grid_step(d);
        let mut best_w = vec![0.0; d];
        let mut best_v = objective.value(&best_w);
        for w in simplex_grid(d, h, false) {
            let v = objective.value(&w);
            if prefer((&w, v), (&best_w, best_v), true) {
                best_w = w;
                best_v = v;
            }
        }
        refine_constrained(&objective, best_w, h)
    } else {
        subgradient_constrained(&objective, d)
    };

    let rule = SamplingRule::mixture(ctx.rho0.clone(), component_rules.to_vec(), w.clone())?;
    let per = objective.components(&w);
    let value = per.iter().cloned().fold(f64::INFINITY, f64::min);
    // ρ_w is a convex combination of positive rules.
    debug_assert!(objective.mixed(&w).iter().all(|r| *r > 0.0));
    Ok(MaximinSolution {
        weights: WeightVector {
            w,
            kind: ConstraintKind::SumAtMostOne,
        },
        rule,
        objective_value: value,
        per_component_improvement: per,
        dual_value: None,
    })
}

fn refine_constrained(objective: &ConstrainedObjective, mut w: Vec<f64>, h: f64) -> Vec<f64> {
    let d = w.len();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for k in 0..d {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        dirs.push(e.clone());
        e[k] = -1.0;
        dirs.push(e);
        for j in 0..d {
            if j != k {
                let mut t = vec![0.0; d];
                t[k] = 1.0;
                t[j] = -1.0;
                dirs.push(t);
            }
        }
    }
    let mut value = objective.value(&w);
    let mut step = h;
    let mut iterations = 0;
    while step > 1e-10 && iterations < MAX_REFINE_ITERATIONS {
        iterations += 1;
        let mut moved = false;
        // Steepest ascent for the active components.
        let comps = objective.components(&w);
        let active: Vec<usize> = (0..comps.len())
            .filter(|&j| comps[j] <= value + 1e-9 * (1.0 + value.abs()))
            .collect();
        let grads = objective.gradients(&w);
        let ascent = min_norm_hull(&active.iter().map(|&j| grads[j].clone()).collect::<Vec<_>>());
        let norm = ascent.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut candidates = dirs.clone();
        if norm > 0.0 {
            candidates.push(ascent.iter().map(|x| x / norm).collect());
        }
        for dir in &candidates {
            let mut trial: Vec<f64> = w.iter().zip(dir).map(|(a, b)| a + step * b).collect();
            if !feasible_le_one(&trial) {
                continue;
            }
            clean(&mut trial);
            let v = objective.value(&trial);
            if v > value + 1e-15 * (1.0 + value.abs()) {
                w = trial;
                value = v;
                moved = true;
                break;
            }
        }
        if moved {
            step = (2.0 * step).min(h);
        } else {
            step *= 0.5;
        }
    }
    w
}

fn project_le_one(w: &mut [f64]) {
    for x in w.iter_mut() {
        *x = x.clamp(0.0, 1.0);
    }
    if w.iter().sum::<f64>() > 1.0 {
        project_simplex(w);
    }
}

/// Euclidean projection onto `{w ≥ 0, Σw = 1}`.
fn project_simplex(w: &mut [f64]) {
    let mut u: Vec<f64> = w.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i as f64 + 1.0);
        if ui - t > 0.0 {
            theta = t;
        }
    }
    for x in w.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

fn subgradient_constrained(objective: &ConstrainedObjective, d: usize) -> Vec<f64> {
    let mut w = vec![0.0; d];
    let mut avg = vec![0.0; d];
    let mut best = (w.clone(), objective.value(&w));
    for t in 1..=2000 {
        let comps = objective.components(&w);
        let j = (0..d).fold(0, |a, b| if comps[b] < comps[a] { b } else { a });
        let g = &objective.gradients(&w)[j];
        let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        let step = 0.5 / (t as f64).sqrt();
        for k in 0..d {
            w[k] += step * g[k] / gn;
        }
        project_le_one(&mut w);
        for k in 0..d {
            avg[k] += (w[k] - avg[k]) / t as f64;
        }
        let v = objective.value(&w);
        if v > best.1 {
            best = (w.clone(), v);
        }
    }
    let va = objective.value(&avg);
    if va >= best.1 {
        avg
    } else {
        best.0
    }
}

// ---------------------------------------------------------------------------
// Global maximin via the dual objective.

/// The dual objective over simplex weights `u`, with per-component scale
/// `c_j = 1/(a_j b_j)`.
pub struct DualObjective<'a> {
    values: &'a MomentValues,
    budget: &'a Budget,
    xi: &'a [f64],
    scale: Vec<f64>,
    tau_cache: RefCell<HashMap<Vec<i64>, f64>>,
}

impl<'a> DualObjective<'a> {
    pub fn new(ctx: &'a DesignContext, priority: &[f64]) -> Self {
        let scale = ctx.bound.b.iter().zip(priority).map(|(b, a)| 1.0 / (a * b)).collect();
        Self {
            values: &ctx.values,
            budget: &ctx.budget,
            xi: &ctx.bound.xi,
            scale,
            tau_cache: RefCell::new(HashMap::new()),
        }
    }

    /// `σ_u(V_i)` at every point.
    pub fn pooled(&self, u: &[f64]) -> Vec<f64> {
        let n = self.values.len();
        (0..n)
            .map(|i| {
                self.values
                    .sigma
                    .iter()
                    .enumerate()
                    .map(|(j, s)| u[j] * self.scale[j] * s[i] * s[i])
                    .sum::<f64>()
                    .max(0.0)
                    .sqrt()
            })
            .collect()
    }

    pub fn tau(&self, u: &[f64], pooled: &[f64]) -> Result<f64> {
        let key: Vec<i64> = u.iter().map(|x| (x * 1e12).round() as i64).collect();
        if let Some(t) = self.tau_cache.borrow().get(&key) {
            return Ok(*t);
        }
        let t = rule::solve_threshold_weighted(pooled, &self.budget.weights, self.budget.total)?;
        self.tau_cache.borrow_mut().insert(key, t);
        Ok(t)
    }

    pub fn value(&self, u: &[f64]) -> Result<f64> {
        let s = self.pooled(u);
        let tau = self.tau(u, &s)?;
        let linear: f64 = (0..u.len()).map(|j| u[j] * self.scale[j] * self.xi[j]).sum();
        let quad: f64 = s
            .iter()
            .zip(&self.values.weights)
            .map(|(s, c)| c * s * s.max(tau))
            .sum();
        Ok(linear - quad)
    }
}

/// Global maximin rule: minimises the dual over `Σw = 1`.
pub fn solve_global_maximin(ctx: &DesignContext) -> Result<MaximinSolution> {
    let d = ctx.dim();
    solve_dual(ctx, &vec![1.0; d], ConstraintKind::SumExactlyOne)
}

/// Priority-weighted global maximin with importance weights `a` (`a_j > 0`,
/// `Σ a_j = 1`); maximises `min_j f_j(ρ)/a_j`.
pub fn solve_priority_maximin(ctx: &DesignContext, a: &[f64]) -> Result<MaximinSolution> {
    if a.len() != ctx.dim() {
        return Err(Error::DimensionMismatch {
            expected: ctx.dim(),
            got: a.len(),
        });
    }
    if a.iter().any(|x| !(*x > 0.0)) || (a.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return invalid(format!("priority vector {a:?} must be positive and sum to one"));
    }
    let mut sol = solve_dual(ctx, a, ConstraintKind::PriorityWeighted(a.to_vec()))?;
    // Report weights in the `Σ a_j w_j = 1` parametrisation.
    for (w, aj) in sol.weights.w.iter_mut().zip(a) {
        *w /= aj;
    }
    Ok(sol)
}

fn solve_dual(ctx: &DesignContext, priority: &[f64], kind: ConstraintKind) -> Result<MaximinSolution> {
    let d = ctx.dim();
    if d == 1 {
        let rule = ctx.component_rule(0)?;
        let (per, value) = ctx.improvement(&rule)?;
        let dual = DualObjective::new(ctx, priority).value(&[1.0])?;
        return Ok(MaximinSolution {
            weights: WeightVector { w: vec![1.0], kind },
            rule,
            objective_value: value,
            per_component_improvement: per,
            dual_value: Some(dual),
        });
    }
    let dual = DualObjective::new(ctx, priority);
    if ctx.values.sigma.iter().all(|s| s.iter().all(|x| *x == 0.0)) {
        return Err(Error::Degenerate("all conditional standard deviations are zero".into()));
    }
    let u = if d <= 4 {
        let h = match d {
            2 | 3 => 0.01,
            _ => 0.05,
        };
        let mut best_u = vec![0.0; d];
        best_u[0] = 1.0;
        let mut best_v = dual.value(&best_u)?;
        for u in simplex_grid(d, h, true) {
            let v = dual.value(&u)?;
            if prefer((&u, v), (&best_u, best_v), false) {
                best_u = u;
                best_v = v;
            }
        }
        refine_dual(&dual, best_u, h)?
    } else {
        subgradient_dual(&dual, ctx, priority)?
    };
    let pooled = dual.pooled(&u);
    let tau = dual.tau(&u, &pooled)?;
    let coef: Vec<f64> = (0..d).map(|j| u[j] * dual.scale[j]).collect();
    let rule = SamplingRule::Truncated {
        lambda: Lambda::Pooled {
            parts: ctx.sources.clone(),
            coef,
        },
        tau,
    };
    let (per, value) = ctx.improvement(&rule)?;
    let dual_value = dual.value(&u)?;
    Ok(MaximinSolution {
        weights: WeightVector { w: u, kind },
        rule,
        objective_value: value,
        per_component_improvement: per,
        dual_value: Some(dual_value),
    })
}

fn refine_dual(dual: &DualObjective, mut u: Vec<f64>, h: f64) -> Result<Vec<f64>> {
    let d = u.len();
    let mut value = dual.value(&u)?;
    let mut step = h;
    let mut iterations = 0;
    while step > 1e-10 && iterations < MAX_REFINE_ITERATIONS {
        iterations += 1;
        let mut moved = false;
        'dirs: for k in 0..d {
            for j in 0..d {
                if j == k {
                    continue;
                }
                let mut trial = u.clone();
                trial[k] += step;
                trial[j] -= step;
                if !feasible_simplex(&trial) {
                    continue;
                }
                clean(&mut trial);
                let v = dual.value(&trial)?;
                if v < value - 1e-15 * (1.0 + value.abs()) {
                    u = trial;
                    value = v;
                    moved = true;
                    break 'dirs;
                }
            }
        }
        if moved {
            step = (2.0 * step).min(h);
        } else {
            step *= 0.5;
        }
    }
    Ok(u)
}

fn subgradient_dual(dual: &DualObjective, ctx: &DesignContext, priority: &[f64]) -> Result<Vec<f64>> {
    let d = ctx.dim();
    let mut u = vec![1.0 / d as f64; d];
    let mut best = (u.clone(), dual.value(&u)?);
    let mut avg = vec![0.0; d];
    for t in 1..=2000 {
        // ∂G/∂u_j = f_j(ρ_u)/a_j.
        let s = dual.pooled(&u);
        let tau = dual.tau(&u, &s)?;
        let rho: Vec<f64> = s.iter().map(|x| rule::truncate(*x, tau)).collect();
        let (f, _) = relative_improvement(&ctx.bound, &ctx.values, &rho)?;
        let g: Vec<f64> = f.iter().zip(priority).map(|(f, a)| f / a).collect();
        let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        let step = 0.5 / (t as f64).sqrt();
        for k in 0..d {
            u[k] -= step * g[k] / gn;
        }
        project_simplex(&mut u);
        for k in 0..d {
            avg[k] += (u[k] - avg[k]) / t as f64;
        }
        let v = dual.value(&u)?;
        if v < best.1 {
            best = (u.clone(), v);
        }
    }
    Ok(if dual.value(&avg)? <= best.1 { avg } else { best.0 })
}

// ---------------------------------------------------------------------------
// Brute-force primal oracle on small discrete laws.

/// A finitely supported law of `V` with the moments of `ψ` at each point.
#[derive(Debug, Clone)]
pub struct DiscreteLaw {
    pub probs: Vec<f64>,
    /// `sigma[j][i]`.
    pub sigma: Vec<Vec<f64>>,
    /// `pi[j][i]`.
    pub pi: Vec<Vec<f64>>,
}

impl DiscreteLaw {
    pub fn support(&self) -> usize {
        self.probs.len()
    }

    /// Design context with support points labelled `[0], [1], …`.
    pub fn context(&self, varpi: f64, rho0: SamplingRule) -> Result<DesignContext> {
        let rows: Vec<Vec<f64>> = (0..self.support()).map(|i| vec![i as f64]).collect();
        let sources = self.sigma.iter().map(|s| Lambda::Table(s.clone())).collect();
        DesignContext::new(
            sources,
            rows,
            self.pi.clone(),
            self.probs.clone(),
            Budget::population(&self.probs, varpi)?,
            rho0,
        )
    }
}

#[derive(Debug, Clone)]
pub struct BruteForceResult {
    pub rho: Vec<f64>,
    pub value: f64,
    pub nodes: u64,
}

/// Exhaustive maximisation of `M(ρ)` over rules with values on the grid
/// `{h, 2h, …, 1}` at each support point and `E[ρ] ≤ ϖ`.
///
/// The search is a depth-first branch and bound. Branches are pruned with a
/// Lagrangian (weak-duality) upper bound on each component's improvement, so
/// the returned grid point is the exact grid maximiser.
pub fn primal_brute_force(law: &DiscreteLaw, rho0: &[f64], varpi: f64, grid_step: f64) -> Result<BruteForceResult> {
    let k = law.support();
    if k == 0 || k > 6 {
        return invalid(format!("support size {k} outside 1..=6"));
    }
    let steps = (1.0 / grid_step).round() as usize;
    if steps == 0 || ((steps as f64) * grid_step - 1.0).abs() > 1e-9 {
        return invalid(format!("grid step {grid_step} must divide 1"));
    }
    let values = MomentValues::weighted(law.sigma.clone(), law.pi.clone(), law.probs.clone())?;
    let bound = EmpiricalBound::new(&values, rho0)?;
    let d = law.sigma.len();
    let min_cost: f64 = law.probs.iter().sum::<f64>() * grid_step;
    if min_cost > varpi + 1e-12 {
        return invalid("even the smallest grid rule exceeds the budget");
    }
    let search = BranchAndBound {
        law,
        bound: &bound,
        d,
        k,
        steps,
        h: grid_step,
        varpi,
    };
    let mut state = SearchState {
        best_value: f64::NEG_INFINITY,
        best: vec![grid_step; k],
        current: vec![0.0; k],
        nodes: 0,
    };
    search.descend(0, 0.0, &vec![0.0; d], &mut state);
    Ok(BruteForceResult {
        rho: state.best,
        value: state.best_value,
        nodes: state.nodes,
    })
}

struct BranchAndBound<'a> {
    law: &'a DiscreteLaw,
    bound: &'a EmpiricalBound,
    d: usize,
    k: usize,
    steps: usize,
    h: f64,
    varpi: f64,
}

struct SearchState {
    best_value: f64,
    best: Vec<f64>,
    current: Vec<f64>,
    nodes: u64,
}

impl BranchAndBound<'_> {
    fn descend(&self, pos: usize, spent: f64, partial: &[f64], state: &mut SearchState) {
        state.nodes += 1;
        let p = self.law.probs[pos];
        let rest_min: f64 = self.law.probs[pos + 1..].iter().sum::<f64>() * self.h;
        let room = self.varpi - spent - rest_min;
        let max_g = ((room / p / self.h + 1e-9).floor() as usize).min(self.steps);
        if max_g == 0 {
            return;
        }
        if pos == self.k - 1 {
            // Every f_j is nondecreasing in each ρ_i: spend what is left.
            let r = max_g as f64 * self.h;
            state.current[pos] = r;
            let value = (0..self.d)
                .map(|j| {
                    let s = self.law.sigma[j][pos];
                    let var = partial[j] + p * s * s / r;
                    (self.bound.xi[j] - var) / self.bound.b[j]
                })
                .fold(f64::INFINITY, f64::min);
            if value > state.best_value {
                state.best_value = value;
                state.best = state.current.clone();
            }
            return;
        }
        for g in (1..=max_g).rev() {
            let r = g as f64 * self.h;
            let next: Vec<f64> = (0..self.d)
                .map(|j| {
                    let s = self.law.sigma[j][pos];
                    partial[j] + p * s * s / r
                })
                .collect();
            let spent_next = spent + p * r;
            if self.upper_bound(pos + 1, spent_next, &next) <= state.best_value + 1e-13 {
                continue;
            }
            state.current[pos] = r;
            self.descend(pos + 1, spent_next, &next, state);
        }
    }

    /// Upper bound on `min_j f_j` over all completions with `ρ ∈ [h, 1]`.
    fn upper_bound(&self, pos: usize, spent: f64, partial: &[f64]) -> f64 {
        let budget = self.varpi - spent;
        (0..self.d)
            .map(|j| {
                let lb = partial[j] + self.lagrangian_lower_bound(j, pos, budget);
                (self.bound.xi[j] - lb) / self.bound.b[j]
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Weak-duality lower bound on `min Σ_{i ≥ pos} p_i σ_ji²/ρ_i` subject to
    /// `Σ p_i ρ_i ≤ budget`, `ρ_i ∈ [h, 1]`. Any multiplier gives a valid
    /// bound; a golden-section search over `log μ` tightens it.
    fn lagrangian_lower_bound(&self, j: usize, pos: usize, budget: f64) -> f64 {
        let h = self.h;
        let dual = |mu: f64| -> f64 {
            let mut total = -mu * budget;
            for i in pos..self.k {
                let s2 = self.law.sigma[j][i].powi(2);
                let r = if mu > 0.0 { (s2 / mu).sqrt().clamp(h, 1.0) } else { 1.0 };
                total += self.law.probs[i] * (s2 / r + mu * r);
            }
            total
        };
        let mut best = dual(0.0);
        let s_max = (pos..self.k).map(|i| self.law.sigma[j][i].abs()).fold(0.0, f64::max);
        if s_max == 0.0 {
            return best.max(0.0);
        }
        let (mut lo, mut hi) = ((1e-12f64).ln(), (s_max * s_max / (h * h) * 10.0).ln());
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let mut a = hi - phi * (hi - lo);
        let mut b = lo + phi * (hi - lo);
        let (mut fa, mut fb) = (dual(a.exp()), dual(b.exp()));
        for _ in 0..80 {
            if fa < fb {
                lo = a;
                a = b;
                fa = fb;
                b = lo + phi * (hi - lo);
                fb = dual(b.exp());
            } else {
                hi = b;
                b = a;
                fb = fa;
                a = hi - phi * (hi - lo);
                fa = dual(a.exp());
            }
        }
        best = best.max(fa).max(fb);
        best
    }
}

// ---------------------------------------------------------------------------
// Diagnostic-test example: prevalence, sensitivity and specificity.

/// The law of `V = X` for a binary test `X` of a binary status `Y`, with
/// `θ = (P(Y=1), P(X=1 | Y=1), P(X=0 | Y=0))`. Support points are `x = 0, 1`.
pub fn classification_law(theta: [f64; 3]) -> Result<DiscreteLaw> {
    let [t1, t2, t3] = theta;
    if !theta.iter().all(|t| *t > 0.0 && *t < 1.0) {
        return invalid(format!("classification parameters {theta:?} must lie in (0, 1)"));
    }
    let mut probs = Vec::with_capacity(2);
    let mut sigma = vec![Vec::with_capacity(2); 3];
    let mut pi = vec![Vec::with_capacity(2); 3];
    for x in [0.0, 1.0] {
        let p_x_given_1 = if x == 1.0 { t2 } else { 1.0 - t2 };
        let p_x_given_0 = if x == 1.0 { 1.0 - t3 } else { t3 };
        let px = t1 * p_x_given_1 + (1.0 - t1) * p_x_given_0;
        let p = t1 * p_x_given_1 / px;
        let var = p * (1.0 - p);
        probs.push(px);
        sigma[0].push(var.sqrt());
        sigma[1].push(var.sqrt() * (x - t2).abs() / t1);
        sigma[2].push(var.sqrt() * (1.0 - x - t3).abs() / (1.0 - t1));
        pi[0].push(p - t1);
        pi[1].push((x - t2) * p / t1);
        pi[2].push((1.0 - x - t3) * (1.0 - p) / (1.0 - t1));
    }
    Ok(DiscreteLaw { probs, sigma, pi })
}

/// Efficiency bounds of every component under one rule.
#[derive(Debug, Clone)]
pub struct DemoRow {
    pub rule: String,
    /// `ρ(0), ρ(1)`.
    pub rho: Vec<f64>,
    pub bounds: Vec<f64>,
    /// Relative improvement over uniform, per component.
    pub improvement: Vec<f64>,
}

/// Bounds under uniform, each single-component optimal rule, the sum rule and
/// both maximin rules, at budget `varpi`.
pub fn classification_demo(theta: [f64; 3], varpi: f64) -> Result<Vec<DemoRow>> {
    if !(varpi > 0.0 && varpi <= 1.0) {
        return invalid(format!("budget ϖ={varpi} must lie in (0, 1]"));
    }
    let law = classification_law(theta)?;
    let budget = Budget::population(&law.probs, varpi)?;
    let ctx = law.context(varpi, budget.uniform())?;
    let mut named: Vec<(String, SamplingRule)> = vec![("uniform".into(), ctx.rho0.clone())];
    let components = ctx.component_rules()?;
    for (j, r) in components.iter().enumerate() {
        named.push((format!("sopt{}", j + 1), r.clone()));
    }
    named.push(("sum".into(), ctx.sum_rule()?));
    named.push(("copt".into(), solve_constrained_maximin(&ctx, &components)?.rule));
    named.push(("gopt".into(), solve_global_maximin(&ctx)?.rule));
    named
        .into_iter()
        .map(|(name, rule)| {
            let rho = rule.eval_rows(&ctx.rows);
            let bounds = ctx.values.bound(&rho)?;
            let (improvement, _) = ctx.improvement(&rule)?;
            Ok(DemoRow {
                rule: name,
                rho,
                bounds,
                improvement,
            })
        })
        .collect()
}
