//! Estimation problems, their full-data influence functions `ψ`, and the
//! observed-data influence function under a two-phase design.
//!
//! Row layouts (first phase `v`, second phase `u`):
//!
//! | problem                | `v`             | `u`            | `d`        |
//! |------------------------|-----------------|----------------|------------|
//! | `Mean`, `MultiMean`    | `z`             | `y`            | `dim(y)`   |
//! | `LinearCoef`           | `(y, z)`        | `x`            | `dim(x)`   |
//! | `AteBinary`            | `(y, t, z)`     | `x`            | 1          |
//! | `AteMulti`             | `(y, t, z)`     | `x`            | arms − 1   |
//! | `ClassificationTriple` | `(x)`           | `(y)`          | 3          |
//!
//! Every `ψ` here is affine in θ after multiplying each component by a
//! positive factor that does not depend on the data, so estimating equations
//! are solved directly (see [`estimating_terms`]).

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProblemKind {
    Mean,
    MultiMean,
    LinearCoef,
    AteBinary,
    AteMulti,
    ClassificationTriple,
}

impl ProblemKind {
    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Mean => "mean",
            ProblemKind::MultiMean => "multi_mean",
            ProblemKind::LinearCoef => "linear_coef",
            ProblemKind::AteBinary => "ate_binary",
            ProblemKind::AteMulti => "ate_multi",
            ProblemKind::ClassificationTriple => "classification",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "mean" => ProblemKind::Mean,
            "multi_mean" => ProblemKind::MultiMean,
            "linear_coef" => ProblemKind::LinearCoef,
            "ate_binary" => ProblemKind::AteBinary,
            "ate_multi" => ProblemKind::AteMulti,
            "classification" => ProblemKind::ClassificationTriple,
            other => return Err(Error::Parse(format!("unknown problem '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub kind: ProblemKind,
    pub dim: usize,
    /// Arm probabilities `(π_0, …, π_K)` of a randomised design; when set the
    /// propensity model is not fitted.
    pub known_propensity: Option<Vec<f64>>,
}

impl Problem {
    pub fn new(kind: ProblemKind, dim: usize) -> Result<Self> {
        let fixed = match kind {
            ProblemKind::Mean | ProblemKind::AteBinary => Some(1),
            ProblemKind::ClassificationTriple => Some(3),
            _ => None,
        };
        if dim == 0 || fixed.is_some_and(|f| f != dim) {
            return invalid(format!("{} cannot have dimension {dim}", kind.name()));
        }
        Ok(Self {
            kind,
            dim,
            known_propensity: None,
        })
    }

    pub fn with_known_propensity(mut self, probs: Vec<f64>) -> Result<Self> {
        if !matches!(self.kind, ProblemKind::AteBinary | ProblemKind::AteMulti) {
            return invalid("a known propensity only applies to treatment-effect problems");
        }
        if probs.len() != self.arms() {
            return Err(Error::DimensionMismatch {
                expected: self.arms(),
                got: probs.len(),
            });
        }
        if let Some(&p) = probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Propensity(p));
        }
        if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return invalid("known arm probabilities must sum to one");
        }
        self.known_propensity = Some(probs);
        Ok(self)
    }

    /// Number of treatment arms, control included.
    pub fn arms(&self) -> usize {
        self.dim + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Propensity {
    Known(Vec<f64>),
    /// Multinomial logit on `(1, x, z)` with arm 0 as baseline; one row per
    /// non-baseline arm.
    Logit(DMatrix<f64>),
}

impl Propensity {
    pub fn probabilities(&self, features: &[f64]) -> Vec<f64> {
        match self {
            Propensity::Known(p) => p.clone(),
            Propensity::Logit(coef) => {
                let eta: Vec<f64> = (0..coef.nrows())
                    .map(|a| (0..coef.ncols()).map(|c| coef[(a, c)] * features[c]).sum())
                    .collect();
                linalg::softmax_with_baseline(&eta)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NuisanceParams {
    Empty,
    Linear {
        /// Coefficients of `x` on `z̃ = (1, z)`, one row per `x` component.
        alpha: DMatrix<f64>,
        /// Coefficients of `z̃` in the regression of `y` on `(x, z̃)`.
        beta: DVector<f64>,
        /// Inverse of the pilot average of `(x − αz̃)(x − αz̃)ᵀ`.
        m_inv: DMatrix<f64>,
    },
    Ate {
        propensity: Propensity,
        /// Linear outcome regression on `(1, x, z)` for every arm.
        outcome: Vec<DVector<f64>>,
    },
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub fn psi_mean(u: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    check_dim(theta.len(), u.len())?;
    Ok(u.iter().zip(theta).map(|(a, b)| a - b).collect())
}

/// `M⁻¹ (x − αz̃)(y − xᵀθ − z̃ᵀβ)`; `z` excludes the intercept.
pub fn psi_linear(y: f64, z: &[f64], x: &[f64], theta: &[f64], eta: &NuisanceParams) -> Result<Vec<f64>> {
    let NuisanceParams::Linear { alpha, beta, m_inv } = eta else {
        return invalid("linear coefficient problem needs linear nuisance parameters");
    };
    check_dim(x.len(), theta.len())?;
    check_dim(alpha.ncols(), z.len() + 1)?;
    let (r, ztb) = linear_parts(z, x, alpha, beta);
    let resid = y - dot(x, theta) - ztb;
    Ok((m_inv * r * resid).iter().copied().collect())
}

fn linear_parts(z: &[f64], x: &[f64], alpha: &DMatrix<f64>, beta: &DVector<f64>) -> (DVector<f64>, f64) {
    let zt = with_intercept(z);
    let r = DVector::from_fn(x.len(), |k, _| {
        x[k] - (0..zt.len()).map(|c| alpha[(k, c)] * zt[c]).sum::<f64>()
    });
    (r, dot(&zt, beta.as_slice()))
}

fn with_intercept(z: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len() + 1);
    out.push(1.0);
    out.extend_from_slice(z);
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Arm `j` versus arm 0 augmented IPW term, without `−θ`.
fn aipw_contrast(y: f64, t: usize, j: usize, pj: f64, p0: f64, mj: f64, m0: f64) -> f64 {
    let in_j = if t == j { 1.0 } else { 0.0 };
    let in_0 = if t == 0 { 1.0 } else { 0.0 };
    in_j * y / pj - in_0 * y / p0 - (in_j / pj - 1.0) * mj + (in_0 / p0 - 1.0) * m0
}

fn check_propensity(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Propensity(p))
    }
}

/// Binary-treatment AIPW influence function with `π = P(T = 1 | x, z)`.
pub fn psi_ate_binary(y: f64, t: usize, pi: f64, m0: f64, m1: f64, theta: f64) -> Result<f64> {
    check_propensity(pi)?;
    Ok(aipw_contrast(y, t, 1, pi, 1.0 - pi, m1, m0) - theta)
}

/// Component `j` is the arm-`j`-versus-control AIPW influence function.
/// `probs` and `m` are indexed by arm, control first.
pub fn psi_ate_multi(y: f64, t: usize, probs: &[f64], m: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    check_dim(probs.len(), theta.len() + 1)?;
    check_dim(probs.len(), m.len())?;
    for &p in probs {
        if !(p > 0.0) {
            return Err(Error::Propensity(p));
        }
    }
    Ok((1..probs.len())
        .map(|j| aipw_contrast(y, t, j, probs[j], probs[0], m[j], m[0]) - theta[j - 1])
        .collect())
}

/// Prevalence, sensitivity and specificity of a binary test `x` for status `y`.
pub fn psi_classification(x: f64, y: f64, theta: &[f64]) -> Result<Vec<f64>> {
    check_dim(3, theta.len())?;
    let t1 = theta[0];
    if !(t1 > 0.0 && t1 < 1.0) {
        return invalid(format!("prevalence {t1} must lie in (0, 1)"));
    }
    Ok(vec![
        y - t1,
        (x - theta[1]) * y / t1,
        (1.0 - x - theta[2]) * (1.0 - y) / (1.0 - t1),
    ])
}

/// Observed-data influence function `Rψ/ρ − (R/ρ − 1)Π`.
pub fn two_phase_eif(psi: &[f64], pi_v: &[f64], rho_v: f64, r: bool) -> Result<Vec<f64>> {
    if !(rho_v > 0.0 && rho_v <= 1.0) {
        return invalid(format!("inclusion probability {rho_v} must lie in (0, 1]"));
    }
    check_dim(psi.len(), pi_v.len())?;
    if !r {
        return Ok(pi_v.to_vec());
    }
    let a = 1.0 / rho_v - 1.0;
    Ok(psi.iter().zip(pi_v).map(|(p, m)| p / rho_v - a * m).collect())
}

/// Splits an ATE first-phase row into `(y, arm, z)`.
fn ate_row(v: &[f64], arms: usize) -> Result<(f64, usize, &[f64])> {
    if v.len() < 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: v.len(),
        });
    }
    let t = v[1];
    if !(t >= 0.0 && t.fract() == 0.0 && (t as usize) < arms) {
        return invalid(format!("treatment code {t} is not an arm in 0..{arms}"));
    }
    Ok((v[0], t as usize, &v[2..]))
}

fn ate_features(x: &[f64], z: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(1 + x.len() + z.len());
    f.push(1.0);
    f.extend_from_slice(x);
    f.extend_from_slice(z);
    f
}

/// `ψ(v, u; θ, η)` for any catalog problem.
pub fn psi(problem: &Problem, v: &[f64], u: &[f64], theta: &[f64], eta: &NuisanceParams) -> Result<Vec<f64>> {
    check_dim(problem.dim, theta.len())?;
    match problem.kind {
        ProblemKind::Mean | ProblemKind::MultiMean => psi_mean(u, theta),
        ProblemKind::LinearCoef => {
            let (y, z) = v.split_first().ok_or(Error::DimensionMismatch { expected: 1, got: 0 })?;
            psi_linear(*y, z, u, theta, eta)
        }
        ProblemKind::AteBinary | ProblemKind::AteMulti => {
            let (y, t, z) = ate_row(v, problem.arms())?;
            let (probs, m) = ate_nuisance_at(eta, u, z)?;
            if problem.kind == ProblemKind::AteBinary {
                Ok(vec![psi_ate_binary(y, t, probs[1], m[0], m[1], theta[0])?])
            } else {
                psi_ate_multi(y, t, &probs, &m, theta)
            }
        }
        ProblemKind::ClassificationTriple => {
            check_dim(1, v.len())?;
            check_dim(1, u.len())?;
            psi_classification(v[0], u[0], theta)
        }
    }
}

fn ate_nuisance_at(eta: &NuisanceParams, x: &[f64], z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let NuisanceParams::Ate { propensity, outcome } = eta else {
        return invalid("treatment-effect problem needs propensity and outcome models");
    };
    let f = ate_features(x, z);
    if let Some(c) = outcome.first() {
        check_dim(c.len(), f.len())?;
    }
    let probs = propensity.probabilities(&f);
    check_dim(outcome.len(), probs.len())?;
    let m = outcome.iter().map(|c| dot(c.as_slice(), &f)).collect();
    Ok((probs, m))
}

/// Affine decomposition `c ⊙ ψ(θ) = a − Bθ` of one observation, where `c` is a
/// positive vector that does not depend on the data (all ones except for the
/// classification problem, where `c = (1, θ₁, 1 − θ₁)`).
pub fn estimating_terms(problem: &Problem, v: &[f64], u: &[f64], eta: &NuisanceParams) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = problem.dim;
    match problem.kind {
        ProblemKind::ClassificationTriple => {
            check_dim(1, v.len())?;
            check_dim(1, u.len())?;
            let (x, y) = (v[0], u[0]);
            let a = vec![y, x * y, (1.0 - x) * (1.0 - y)];
            let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, y, 1.0 - y]));
            Ok((a, b))
        }
        ProblemKind::LinearCoef => {
            let NuisanceParams::Linear { alpha, beta, m_inv } = eta else {
                return invalid("linear coefficient problem needs linear nuisance parameters");
            };
            let (y, z) = v.split_first().ok_or(Error::DimensionMismatch { expected: 1, got: 0 })?;
            check_dim(d, u.len())?;
            let (r, ztb) = linear_parts(z, u, alpha, beta);
            let mr = m_inv * r;
            let a = (&mr * (y - ztb)).iter().copied().collect();
            let b = &mr * DVector::from_column_slice(u).transpose();
            Ok((a, b))
        }
        _ => {
            // ψ(θ) = ψ(0) − θ.
            let a = psi(problem, v, u, &vec![0.0; d], eta)?;
            Ok((a, DMatrix::identity(d, d)))
        }
    }
}

/// Solves `Σ_i w_i ψ(V_i, U_i; θ, η) = 0` for θ.
pub fn solve_theta_weighted(
    problem: &Problem,
    v: &[Vec<f64>],
    u: &[&[f64]],
    weights: &[f64],
    eta: &NuisanceParams,
) -> Result<Vec<f64>> {
    let d = problem.dim;
    let mut lhs = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    let mut any = false;
    for ((vi, ui), &w) in v.iter().zip(u).zip(weights) {
        if w == 0.0 {
            continue;
        }
        any = true;
        let (a, b) = estimating_terms(problem, vi, ui, eta)?;
        rhs += DVector::from_vec(a) * w;
        lhs += b * w;
    }
    if !any {
        return Err(Error::Degenerate("estimating equation has no observations".into()));
    }
    let theta = linalg::solve(&lhs, &rhs, "estimating equation")?;
    Ok(theta.iter().copied().collect())
}

/// `θ̃` from the pilot observations (equal weights).
pub fn solve_theta_pilot(problem: &Problem, v: &[Vec<f64>], u: &[Vec<f64>], eta: &NuisanceParams) -> Result<Vec<f64>> {
    let refs: Vec<&[f64]> = u.iter().map(Vec::as_slice).collect();
    solve_theta_weighted(problem, v, &refs, &vec![1.0; v.len()], eta)
}

/// Fits the nuisance parameters on fully observed (pilot) rows.
pub fn fit_nuisance(problem: &Problem, v: &[Vec<f64>], u: &[Vec<f64>]) -> Result<NuisanceParams> {
    check_dim(v.len(), u.len())?;
    if v.is_empty() {
        return Err(Error::Degenerate("no pilot observations to fit nuisances".into()));
    }
    match problem.kind {
        ProblemKind::Mean | ProblemKind::MultiMean | ProblemKind::ClassificationTriple => Ok(NuisanceParams::Empty),
        ProblemKind::LinearCoef => fit_linear(problem, v, u),
        ProblemKind::AteBinary | ProblemKind::AteMulti => fit_ate(problem, v, u),
    }
}

/// Least-squares coefficients of every `x` component on `(1, z)`.
pub fn linear_alpha(z: &[Vec<f64>], x: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    check_dim(z.len(), x.len())?;
    let p = x.first().map_or(0, Vec::len);
    let zt: Vec<Vec<f64>> = z.iter().map(|r| with_intercept(r)).collect();
    let zmat = linalg::design(&zt);
    let mut alpha = DMatrix::zeros(p, zmat.ncols());
    for k in 0..p {
        let xk = DVector::from_iterator(x.len(), x.iter().map(|r| r[k]));
        let coef = linalg::least_squares(&zmat, &xk, "regression of x on z")?;
        alpha.set_row(k, &coef.transpose());
    }
    Ok(alpha)
}

fn fit_linear(problem: &Problem, v: &[Vec<f64>], u: &[Vec<f64>]) -> Result<NuisanceParams> {
    let p = problem.dim;
    for x in u {
        check_dim(p, x.len())?;
    }
    let z: Vec<Vec<f64>> = v.iter().map(|r| r[1..].to_vec()).collect();
    let alpha = linear_alpha(&z, u)?;
    let zt: Vec<Vec<f64>> = z.iter().map(|r| with_intercept(r)).collect();
    let full: Vec<Vec<f64>> = u
        .iter()
        .zip(&zt)
        .map(|(x, z)| x.iter().chain(z).copied().collect())
        .collect();
    let y = DVector::from_iterator(v.len(), v.iter().map(|r| r[0]));
    let coef = linalg::least_squares(&linalg::design(&full), &y, "regression of y on (x, z)")?;
    let beta = DVector::from_iterator(alpha.ncols(), coef.iter().skip(p).copied());
    let mut m = DMatrix::zeros(p, p);
    for (x, z) in u.iter().zip(&zt) {
        let r = DVector::from_fn(p, |k, _| x[k] - (0..z.len()).map(|c| alpha[(k, c)] * z[c]).sum::<f64>());
        m += &r * r.transpose();
    }
    m /= u.len() as f64;
    let m_inv = linalg::invert(&m, "normalising matrix of the residualised covariate")?;
    Ok(NuisanceParams::Linear { alpha, beta, m_inv })
}

fn fit_ate(problem: &Problem, v: &[Vec<f64>], u: &[Vec<f64>]) -> Result<NuisanceParams> {
    let arms = problem.arms();
    let mut features = Vec::with_capacity(v.len());
    let mut arm = Vec::with_capacity(v.len());
    let mut y = Vec::with_capacity(v.len());
    for (vi, ui) in v.iter().zip(u) {
        let (yi, t, z) = ate_row(vi, arms)?;
        features.push(ate_features(ui, z));
        arm.push(t);
        y.push(yi);
    }
    for a in 0..arms {
        if !arm.contains(&a) {
            return Err(Error::Degenerate(format!("treatment arm {a} has no pilot observations")));
        }
    }
    let propensity = match &problem.known_propensity {
        Some(p) => Propensity::Known(p.clone()),
        None => Propensity::Logit(linalg::multinomial_logit(&linalg::design(&features), &arm, arms)?),
    };
    let mut outcome = Vec::with_capacity(arms);
    for a in 0..arms {
        let rows: Vec<Vec<f64>> = features
            .iter()
            .zip(&arm)
            .filter(|(_, t)| **t == a)
            .map(|(f, _)| f.clone())
            .collect();
        let ya: Vec<f64> = y.iter().zip(&arm).filter(|(_, t)| **t == a).map(|(v, _)| *v).collect();
        let coef = linalg::least_squares(
            &linalg::design(&rows),
            &DVector::from_vec(ya),
            &format!("outcome regression in arm {a}"),
        )?;
        outcome.push(coef);
    }
    Ok(NuisanceParams::Ate { propensity, outcome })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn mean_influence_is_a_difference() {
        assert_eq!(psi_mean(&[1.0], &[1.0]).unwrap(), vec![0.0]);
        assert_eq!(psi_mean(&[2.0, 3.0], &[1.0, 0.0]).unwrap(), vec![1.0, 3.0]);
        assert!(psi_mean(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn linear_influence_by_hand() {
        let eta = NuisanceParams::Linear {
            alpha: DMatrix::zeros(1, 2),
            beta: DVector::zeros(2),
            m_inv: DMatrix::identity(1, 1),
        };
        assert_eq!(psi_linear(3.0, &[0.5], &[2.0], &[1.0], &eta).unwrap(), vec![2.0]);

        let eta = NuisanceParams::Linear {
            alpha: DMatrix::from_row_slice(1, 2, &[0.0, 2.0]),
            beta: DVector::zeros(2),
            m_inv: DMatrix::identity(1, 1),
        };
        assert_eq!(psi_linear(5.0, &[1.5], &[3.0], &[0.7], &eta).unwrap(), vec![0.0]);
    }

    #[test]
    fn ate_augmentation_cancels_at_the_regression() {
        let (m0, m1) = (0.4, 2.1);
        let v = psi_ate_binary(m1, 1, 0.5, m0, m1, 0.3).unwrap();
        assert!((v - (m1 - m0 - 0.3)).abs() < 1e-14);
        assert!(matches!(psi_ate_binary(1.0, 1, 1.0, 0.0, 0.0, 0.0), Err(Error::Propensity(_))));
    }

    #[test]
    fn multi_arm_reduces_to_binary_bit_for_bit() {
        for &(y, t, pi, m0, m1, th) in &[
            (1.3, 1, 0.37, -0.2, 0.9, 0.5),
            (-0.7, 0, 0.81, 1.1, 0.3, -1.0),
            (2.5, 1, 0.05, 0.0, 4.0, 1.5),
        ] {
            let b = psi_ate_binary(y, t, pi, m0, m1, th).unwrap();
            let m = psi_ate_multi(y, t, &[1.0 - pi, pi], &[m0, m1], &[th]).unwrap();
            assert_eq!(b.to_bits(), m[0].to_bits());
        }
    }

    #[test]
    fn multi_arm_zero_outcome() {
        let third = 1.0 / 3.0;
        let v = psi_ate_multi(0.0, 2, &[third; 3], &[0.0; 3], &[0.4, -0.6]).unwrap();
        assert_eq!(v, vec![-0.4, 0.6]);
        assert!(psi_ate_multi(0.0, 2, &[0.5, 0.5, 0.0], &[0.0; 3], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn classification_by_substitution() {
        let th = [0.2, 0.8, 0.6];
        assert!(approx(&psi_classification(1.0, 1.0, &th).unwrap(), &[0.8, 1.0, 0.0], 1e-12));
        assert!(approx(&psi_classification(0.0, 0.0, &th).unwrap(), &[-0.2, 0.0, 0.5], 1e-12));
        assert!(psi_classification(0.0, 0.0, &[1.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn classification_population_mean_is_zero() {
        let th = [0.2, 0.8, 0.6];
        let mut total = [0.0; 3];
        for (x, y) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
            let py = if y == 1.0 { th[0] } else { 1.0 - th[0] };
            let px = if y == 1.0 {
                if x == 1.0 { th[1] } else { 1.0 - th[1] }
            } else if x == 0.0 {
                th[2]
            } else {
                1.0 - th[2]
            };
            let p = psi_classification(x, y, &th).unwrap();
            for j in 0..3 {
                total[j] += py * px * p[j];
            }
        }
        assert!(total.iter().all(|t| t.abs() < 1e-12), "{total:?}");
    }

    #[test]
    fn two_phase_eif_cases() {
        assert_eq!(two_phase_eif(&[1.5, -2.0], &[0.1, 0.2], 1.0, true).unwrap(), vec![1.5, -2.0]);
        assert_eq!(two_phase_eif(&[1.5], &[0.7], 0.2, false).unwrap(), vec![0.7]);
        assert_eq!(two_phase_eif(&[2.0], &[1.0], 0.5, true).unwrap(), vec![3.0]);
        assert!(two_phase_eif(&[2.0], &[1.0], 0.0, true).is_err());
    }

    #[test]
    fn pilot_theta_for_mean_and_classification() {
        let p = Problem::new(ProblemKind::Mean, 1).unwrap();
        let v = vec![vec![0.0]; 4];
        let u = vec![vec![1.0], vec![2.0], vec![4.0], vec![5.0]];
        let th = solve_theta_pilot(&p, &v, &u, &NuisanceParams::Empty).unwrap();
        assert!((th[0] - 3.0).abs() < 1e-14);

        let p = Problem::new(ProblemKind::ClassificationTriple, 3).unwrap();
        // (x, y): two (1,1), one (0,1), one (0,0), one (1,0).
        let pairs = [(1.0, 1.0), (1.0, 1.0), (0.0, 1.0), (0.0, 0.0), (1.0, 0.0)];
        let v: Vec<Vec<f64>> = pairs.iter().map(|p| vec![p.0]).collect();
        let u: Vec<Vec<f64>> = pairs.iter().map(|p| vec![p.1]).collect();
        let th = solve_theta_pilot(&p, &v, &u, &NuisanceParams::Empty).unwrap();
        assert!(approx(&th, &[0.6, 2.0 / 3.0, 0.5], 1e-14), "{th:?}");
    }

    #[test]
    fn linear_nuisance_recovers_exact_relationships() {
        let p = Problem::new(ProblemKind::LinearCoef, 1).unwrap();
        let z: Vec<f64> = (0..20).map(|i| i as f64 * 0.3 - 2.0).collect();
        let x: Vec<f64> = z.iter().map(|z| 2.0 * z).collect();
        // Add a non-collinear component to x so (x, 1, z) has full rank.
        let x: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 0.5 } else { -0.5 }).collect();
        let y: Vec<f64> = x.iter().zip(&z).map(|(x, z)| 1.5 * x - 0.5 * z + 0.25).collect();
        let v: Vec<Vec<f64>> = y.iter().zip(&z).map(|(y, z)| vec![*y, *z]).collect();
        let u: Vec<Vec<f64>> = x.iter().map(|x| vec![*x]).collect();
        let eta = fit_nuisance(&p, &v, &u).unwrap();
        let NuisanceParams::Linear { alpha, beta, .. } = &eta else { panic!() };
        // Alternating ±0.5 offsets tilt the slope by Σ(a−ā)(z−z̄)/Σ(z−z̄)² = −1.5/59.85.
        assert!((alpha[(0, 1)] - (2.0 - 1.5 / 59.85)).abs() < 1e-10);
        assert!((beta[0] - 0.25).abs() < 1e-10 && (beta[1] + 0.5).abs() < 1e-10);
        let th = solve_theta_pilot(&p, &v, &u, &eta).unwrap();
        assert!((th[0] - 1.5).abs() < 1e-10);
    }

    #[test]
    fn exact_linear_alpha() {
        let p = Problem::new(ProblemKind::LinearCoef, 1).unwrap();
        let z: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let v: Vec<Vec<f64>> = z.iter().map(|z| vec![z.sin(), *z]).collect();
        let u: Vec<Vec<f64>> = z.iter().map(|z| vec![2.0 * z]).collect();
        // (x, 1, z) is rank deficient, so the joint fit must refuse.
        match fit_nuisance(&p, &v, &u) {
            Err(Error::Singular(_)) => {}
            other => panic!("expected a rank diagnostic, got {other:?}"),
        }
        let zrows: Vec<Vec<f64>> = z.iter().map(|z| vec![*z]).collect();
        let alpha = linear_alpha(&zrows, &u).unwrap();
        assert!(alpha[(0, 0)].abs() < 1e-10 && (alpha[(0, 1)] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn known_propensity_passthrough() {
        let p = Problem::new(ProblemKind::AteBinary, 1)
            .unwrap()
            .with_known_propensity(vec![0.5, 0.5])
            .unwrap();
        let mut v = Vec::new();
        let mut u = Vec::new();
        for i in 0..12 {
            let x = i as f64 * 0.1;
            let t = (i % 2) as f64;
            v.push(vec![1.0 + x + t, t]);
            u.push(vec![x]);
        }
        let eta = fit_nuisance(&p, &v, &u).unwrap();
        let NuisanceParams::Ate { propensity, outcome } = &eta else { panic!() };
        assert_eq!(propensity, &Propensity::Known(vec![0.5, 0.5]));
        assert!((outcome[1][0] - 2.0).abs() < 1e-10 && (outcome[1][1] - 1.0).abs() < 1e-10);
        assert!((outcome[0][0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn empty_arm_is_rejected() {
        let p = Problem::new(ProblemKind::AteBinary, 1).unwrap();
        let v = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.5, 0.0]];
        let u = vec![vec![0.1], vec![0.2], vec![0.3]];
        assert!(matches!(fit_nuisance(&p, &v, &u), Err(Error::Degenerate(_))));
    }
}
