//! Joint estimation of the conditional mean `Π(v)` and conditional standard
//! deviation `σ(v)` of one influence-function component.
//!
//! Both functions live in the span of a degree-two polynomial basis `p(v)` of
//! the min-max normalised first-phase variables:
//!
//! ```text
//! Π̃(v) = γ₁ᵀ p(v),        σ̃(v) = Λ(γ₂ᵀ p(v)),        Λ(s) = log(1 + eˢ)
//! ```
//!
//! and `(γ₁, γ₂)` minimise
//!
//! ```text
//! L(γ₁, γ₂) = m⁻¹ Σᵢ [ (ψᵢ − γ₁ᵀpᵢ)² / Λ(γ₂ᵀpᵢ) + Λ(γ₂ᵀpᵢ) ] + ridge · (‖γ₁‖² + ‖γ₂‖²)
//! ```
//!
//! The loss is convex in each block separately, so it is minimised by block
//! coordinate descent: the γ₁ block is a weighted ridge regression solved in
//! closed form, the γ₂ block is a damped Newton iteration.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

pub fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// First derivative of softplus (the logistic function).
pub fn softplus_d1(s: f64) -> f64 {
    linalg::sigmoid(s)
}

pub fn softplus_d2(s: f64) -> f64 {
    let g = linalg::sigmoid(s);
    g * (1.0 - g)
}

/// Inverse of softplus on `(0, ∞)`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Degree-two polynomial basis with full pairwise interactions on min-max
/// normalised inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BasisSpec {
    /// Records per-column ranges over the pilot rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Degenerate("empty pilot sample".into()))?;
        let mut lo = first.clone();
        let mut hi = first.clone();
        for row in rows {
            if row.len() != lo.len() {
                return Err(Error::DimensionMismatch {
                    expected: lo.len(),
                    got: row.len(),
                });
            }
            for (j, &x) in row.iter().enumerate() {
                lo[j] = lo[j].min(x);
                hi[j] = hi[j].max(x);
            }
        }
        Ok(Self { lo, hi })
    }

    /// Columns whose pilot range collapsed; they normalise to 0.5.
    pub fn constant_columns(&self) -> Vec<usize> {
        (0..self.lo.len()).filter(|&j| self.hi[j] <= self.lo[j]).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.lo.len()
    }

    /// `K = 1 + d + d + d(d − 1)/2`.
    pub fn len(&self) -> usize {
        let d = self.input_dim();
        1 + 2 * d + d * (d.saturating_sub(1)) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(j, &x)| {
                let range = self.hi[j] - self.lo[j];
                if range > 0.0 {
                    ((x - self.lo[j]) / range).clamp(0.0, 1.0)
                } else {
                    0.5
                }
            })
            .collect()
    }

    /// `p(v)`: intercept, linear terms, squares, then pairwise products in
    /// lexicographic order.
    pub fn expand(&self, v: &[f64]) -> Vec<f64> {
        let x = self.normalize(v);
        let d = x.len();
        let mut p = Vec::with_capacity(self.len());
        p.push(1.0);
        p.extend_from_slice(&x);
        p.extend(x.iter().map(|a| a * a));
        for a in 0..d {
            for b in a + 1..d {
                p.push(x[a] * x[b]);
            }
        }
        p
    }

    /// Basis matrix, one expanded row per input row.
    pub fn design(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.expand(r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentModel {
    pub basis: BasisSpec,
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
}

impl MomentModel {
    pub fn mean(&self, v: &[f64]) -> f64 {
        dot(&self.basis.expand(v), &self.gamma1)
    }

    pub fn sigma(&self, v: &[f64]) -> f64 {
        softplus(dot(&self.basis.expand(v), &self.gamma2))
    }

    /// `(Π̃(v), σ̃(v))` with a single basis expansion.
    pub fn predict(&self, v: &[f64]) -> (f64, f64) {
        let p = self.basis.expand(v);
        (dot(&p, &self.gamma1), softplus(dot(&p, &self.gamma2)))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Default ridge weight `0.1 (d_V + 1)`.
pub fn default_ridge(input_dim: usize) -> f64 {
    0.1 * (input_dim as f64 + 1.0)
}

/// Evaluates the penalised joint loss.
pub fn joint_loss(gamma1: &[f64], gamma2: &[f64], psi: &[f64], p: &[Vec<f64>], ridge: f64) -> f64 {
    let m = psi.len() as f64;
    let mut total = 0.0;
    for (i, &y) in psi.iter().enumerate() {
        let row = &p[i];
        let mean: f64 = row.iter().zip(gamma1).map(|(a, b)| a * b).sum();
        let s: f64 = row.iter().zip(gamma2).map(|(a, b)| a * b).sum();
        let lam = softplus(s);
        total += (y - mean).powi(2) / lam + lam;
    }
    total / m + ridge * (norm2(gamma1) + norm2(gamma2))
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Analytic gradient of [`joint_loss`] with respect to `(γ₁, γ₂)`.
pub fn joint_loss_gradient(
    gamma1: &[f64],
    gamma2: &[f64],
    psi: &[f64],
    p: &[Vec<f64>],
    ridge: f64,
) -> (Vec<f64>, Vec<f64>) {
    let m = psi.len() as f64;
    let k = p.first().map_or(0, Vec::len);
    let mut g1 = vec![0.0; k];
    let mut g2 = vec![0.0; k];
    for (i, &y) in psi.iter().enumerate() {
        let row = &p[i];
        let mean: f64 = row.iter().zip(gamma1).map(|(a, b)| a * b).sum();
        let s: f64 = row.iter().zip(gamma2).map(|(a, b)| a * b).sum();
        let lam = softplus(s);
        let r = y - mean;
        let c1 = -2.0 * r / lam;
        let c2 = (1.0 - r * r / (lam * lam)) * softplus_d1(s);
        for j in 0..k {
            g1[j] += c1 * row[j];
            g2[j] += c2 * row[j];
        }
    }
    for j in 0..k {
        g1[j] = g1[j] / m + 2.0 * ridge * gamma1[j];
        g2[j] = g2[j] / m + 2.0 * ridge * gamma2[j];
    }
    (g1, g2)
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub ridge: f64,
    pub max_outer: usize,
    pub tol: f64,
}

impl FitOptions {
    pub fn with_ridge(ridge: f64) -> Self {
        Self {
            ridge,
            max_outer: 200,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MomentFit {
    pub model: MomentModel,
    /// Loss after initialisation and after every block update.
    pub loss_history: Vec<f64>,
    pub outer_iterations: usize,
    pub converged: bool,
}

/// Fits one component by block coordinate descent.
pub fn fit_moments(
    psi: &[f64],
    rows: &[Vec<f64>],
    basis: &BasisSpec,
    opts: FitOptions,
) -> Result<MomentFit> {
    if psi.len() != rows.len() {
        return Err(Error::DimensionMismatch {
            expected: rows.len(),
            got: psi.len(),
        });
    }
    if psi.is_empty() {
        return Err(Error::Degenerate("no pilot observations".into()));
    }
    let p = basis.design(rows);
    let k = p.first().map_or(0, Vec::len);
    let ridge = opts.ridge;

    // Start from the homoscedastic ridge fit.
    let mut gamma1 = gamma1_block(&p, psi, &vec![1.0; psi.len()], ridge)?;
    let residual_sd = {
        let r: Vec<f64> = (0..psi.len())
            .map(|i| psi[i] - dot(&p[i], &gamma1))
            .collect();
        if r.len() > 1 {
            linalg::sample_variance(&r).sqrt()
        } else {
            r[0].abs()
        }
    };
    let mut gamma2 = vec![0.0; k];
    gamma2[0] = softplus_inv(residual_sd.max(1e-8));

    let mut loss = joint_loss(&gamma1, &gamma2, psi, &p, ridge);
    if !loss.is_finite() {
        return Err(Error::NonFinite("initial joint loss".into()));
    }
    let mut history = vec![loss];
    let mut converged = false;
    let mut outer = 0;
    while outer < opts.max_outer {
        outer += 1;
        let start = loss;

        gamma2 = gamma2_block(&p, psi, &gamma1, gamma2, ridge);
        let after2 = joint_loss(&gamma1, &gamma2, psi, &p, ridge);
        history.push(after2);

        let weights: Vec<f64> = (0..psi.len())
            .map(|i| 1.0 / softplus(dot(&p[i], &gamma2)))
            .collect();
        let candidate = gamma1_block(&p, psi, &weights, ridge)?;
        let after1 = joint_loss(&candidate, &gamma2, psi, &p, ridge);
        // The closed-form update is the exact block minimiser; the guard only
        // absorbs floating-point ties.
        let after1 = if after1 <= after2 {
            gamma1 = candidate;
            after1
        } else {
            after2
        };
        history.push(after1);
        loss = after1;
        if !loss.is_finite() {
            return Err(Error::NonFinite("joint loss during descent".into()));
        }
        if start - loss < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(MomentFit {
        model: MomentModel {
            basis: basis.clone(),
            gamma1,
            gamma2,
        },
        loss_history: history,
        outer_iterations: outer,
        converged,
    })
}

/// Closed-form minimiser of the loss over γ₁ with weights `wᵢ = 1/Λ(γ₂ᵀpᵢ)`:
/// `(m⁻¹ PᵀWP + ridge·I) γ₁ = m⁻¹ PᵀWψ`.
pub(crate) fn gamma1_block(p: &[Vec<f64>], psi: &[f64], w: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let (m, k) = (p.len(), p.first().map_or(0, Vec::len));
    let mut a = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    for i in 0..m {
        let row = &p[i];
        for r in 0..k {
            let wr = w[i] * row[r];
            b[r] += wr * psi[i];
            for c in r..k {
                a[(r, c)] += wr * row[c];
            }
        }
    }
    for r in 0..k {
        for c in r..k {
            a[(r, c)] /= m as f64;
            a[(c, r)] = a[(r, c)];
        }
        a[(r, r)] += ridge;
        b[r] /= m as f64;
    }
    Ok(linalg::solve(&a, &b, "weighted ridge regression for the conditional mean")?
        .iter()
        .copied()
        .collect())
}

fn gamma2_objective(p: &[Vec<f64>], r2: &[f64], gamma2: &[f64], ridge: f64) -> f64 {
    let m = r2.len() as f64;
    let mut total = 0.0;
    for (i, &rr) in r2.iter().enumerate() {
        let lam = softplus(dot(&p[i], gamma2));
        total += rr / lam + lam;
    }
    total / m + ridge * norm2(gamma2)
}

/// Damped Newton on the γ₂ block with a gradient-descent fallback. Only steps
/// that do not increase the block objective are accepted.
fn gamma2_block(p: &[Vec<f64>], psi: &[f64], gamma1: &[f64], mut gamma2: Vec<f64>, ridge: f64) -> Vec<f64> {
    let (m, k) = (p.len(), p.first().map_or(0, Vec::len));
    let r2: Vec<f64> = (0..m)
        .map(|i| (psi[i] - dot(&p[i], gamma1)).powi(2))
        .collect();
    let mut value = gamma2_objective(p, &r2, &gamma2, ridge);
    for _ in 0..50 {
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..m {
            let row = &p[i];
            let s = dot(row, &gamma2);
            let lam = softplus(s);
            let d1 = softplus_d1(s);
            let d2 = softplus_d2(s);
            let g = (1.0 - r2[i] / (lam * lam)) * d1;
            let h = r2[i] * (2.0 * d1 * d1 / lam.powi(3) - d2 / (lam * lam)) + d2;
            for a in 0..k {
                grad[a] += g * row[a];
                for b in a..k {
                    hess[(a, b)] += h * row[a] * row[b];
                }
            }
        }
        for a in 0..k {
            grad[a] = grad[a] / m as f64 + 2.0 * ridge * gamma2[a];
            for b in a..k {
                hess[(a, b)] /= m as f64;
                hess[(b, a)] = hess[(a, b)];
            }
            hess[(a, a)] += 2.0 * ridge;
        }
        if grad.amax() < 1e-12 {
            break;
        }
        let newton = linalg::solve(&hess, &grad, "γ₂ Hessian").ok();
        let mut improved = false;
        let directions: Vec<DVector<f64>> = newton.into_iter().chain(std::iter::once(grad.clone())).collect();
        for dir in directions {
            let slope = grad.dot(&dir);
            if slope <= 0.0 {
                continue;
            }
            let mut t = 1.0;
            while t > 1e-12 {
                let trial: Vec<f64> = gamma2.iter().zip(dir.iter()).map(|(g, d)| g - t * d).collect();
                let v = gamma2_objective(p, &r2, &trial, ridge);
                if v.is_finite() && v <= value - 1e-4 * t * slope {
                    gamma2 = trial;
                    improved = value - v > 1e-14 * (1.0 + value.abs());
                    value = v;
                    break;
                }
                t *= 0.5;
            }
            if improved {
                break;
            }
        }
        if !improved {
            break;
        }
    }
    gamma2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_size_matches_count_formula() {
        let one = BasisSpec::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(one.len(), 3);
        assert_eq!(one.expand(&[0.5]), vec![1.0, 0.5, 0.25]);
        let three = BasisSpec::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(three.len(), 10);
        assert_eq!(three.expand(&[1.0, 1.0, 1.0]).len(), 10);
    }

    #[test]
    fn normalisation_uses_pilot_range_and_clips() {
        let b = BasisSpec::from_rows(&[vec![-2.5], vec![2.5], vec![1.0]]).unwrap();
        assert_eq!(b.normalize(&[0.0]), vec![0.5]);
        assert_eq!(b.normalize(&[9.0]), vec![1.0]);
        assert_eq!(b.normalize(&[-9.0]), vec![0.0]);
    }

    #[test]
    fn constant_column_maps_to_midpoint() {
        let b = BasisSpec::from_rows(&[vec![3.0, 0.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(b.constant_columns(), vec![0]);
        assert_eq!(b.normalize(&[7.0, 1.0]), vec![0.5, 1.0]);
    }

    #[test]
    fn empty_pilot_is_rejected() {
        assert!(BasisSpec::from_rows(&[]).is_err());
    }

    #[test]
    fn softplus_is_stable_and_invertible() {
        for &y in &[1e-6, 0.3, 1.0, 5.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-9 * y.max(1.0));
        }
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn zero_signal_loss_reduces_to_link_plus_penalty() {
        let p = vec![vec![1.0]; 4];
        let value = joint_loss(&[0.0], &[0.7], &[0.0; 4], &p, 0.2);
        assert!((value - (softplus(0.7) + 0.2 * 0.49)).abs() < 1e-14);
    }

    #[test]
    fn unpenalised_single_point_has_no_minimiser() {
        // With γ₁ = ψ the residual vanishes and the loss Λ(γ₂) keeps falling as γ₂ → −∞.
        let p = vec![vec![1.0]];
        let a = joint_loss(&[2.0], &[-1.0], &[2.0], &p, 0.0);
        let b = joint_loss(&[2.0], &[-10.0], &[2.0], &p, 0.0);
        assert!(b < a && b > 0.0);
    }

    #[test]
    fn constant_response_recovers_mean_and_small_sigma() {
        let rows: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 199.0]).collect();
        let psi = vec![5.0; 200];
        let basis = BasisSpec::from_rows(&rows).unwrap();
        let fit = fit_moments(&psi, &rows, &basis, FitOptions::with_ridge(1e-4)).unwrap();
        for v in [0.0, 0.5, 1.0] {
            let (mean, sd) = fit.model.predict(&[v]);
            assert!((mean - 5.0).abs() < 0.05, "mean {mean}");
            assert!(sd > 0.0 && sd < 0.1, "sd {sd}");
        }
    }
}
