//! Small dense linear-algebra and regression helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves `a x = b` by LU with partial pivoting, rejecting (near-)singular systems.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: b.len(),
        });
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let lu = a.clone().lu();
    let u = lu.u();
    let min_pivot = (0..u.nrows()).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-12 * scale) {
        return Err(Error::Singular(format!(
            "{what}: pivot {min_pivot:.3e} relative to scale {scale:.3e}"
        )));
    }
    lu.solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular(what.to_string()))
}

pub fn invert(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        out.set_column(j, &solve(a, &e, what)?);
    }
    Ok(out)
}

/// Builds a design matrix from row slices.
pub fn design(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let p = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j])
}

/// Weighted least squares `argmin Σ w_i (y_i − x_iᵀβ)²` via the normal equations.
pub fn weighted_least_squares(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    what: &str,
) -> Result<DVector<f64>> {
    let p = x.ncols();
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    for i in 0..x.nrows() {
        let row = x.row(i);
        for a in 0..p {
            let wa = w[i] * row[a];
            xty[a] += wa * y[i];
            for b in 0..p {
                xtx[(a, b)] += wa * row[b];
            }
        }
    }
    solve(&xtx, &xty, what)
}

pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    weighted_least_squares(x, y, &DVector::from_element(x.nrows(), 1.0), what)
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Multinomial logistic regression with arm 0 as baseline, fitted by Newton's method.
///
/// Returns a `(arms − 1) × p` coefficient matrix; arm `k ≥ 1` has linear
/// predictor `x ᵀ coef.row(k − 1)`. With two arms this is ordinary logistic
/// regression.
pub fn multinomial_logit(x: &DMatrix<f64>, arm: &[usize], arms: usize) -> Result<DMatrix<f64>> {
    let (n, p) = (x.nrows(), x.ncols());
    let k = arms - 1;
    let dim = k * p;
    let mut beta = DVector::<f64>::zeros(dim);
    let loglik = |beta: &DVector<f64>| -> f64 {
        (0..n)
            .map(|i| {
                let eta: Vec<f64> = (0..k)
                    .map(|a| (0..p).map(|c| x[(i, c)] * beta[a * p + c]).sum())
                    .collect();
                let m = eta.iter().cloned().fold(0.0, f64::max);
                let lse = m + ((-m).exp() + eta.iter().map(|e| (e - m).exp()).sum::<f64>()).ln();
                let own = if arm[i] == 0 { 0.0 } else { eta[arm[i] - 1] };
                own - lse
            })
            .sum()
    };
    let mut current = loglik(&beta);
    for _ in 0..100 {
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for i in 0..n {
            let probs = arm_probabilities_row(x, i, &beta, k, p);
            for a in 0..k {
                let ya = if arm[i] == a + 1 { 1.0 } else { 0.0 };
                for c in 0..p {
                    grad[a * p + c] += (ya - probs[a + 1]) * x[(i, c)];
                }
                for b in 0..k {
                    let wab = if a == b {
                        probs[a + 1] * (1.0 - probs[a + 1])
                    } else {
                        -probs[a + 1] * probs[b + 1]
                    };
                    for c in 0..p {
                        for e in 0..p {
                            hess[(a * p + c, b * p + e)] += wab * x[(i, c)] * x[(i, e)];
                        }
                    }
                }
            }
        }
        // Tiny ridge keeps separable or collinear designs from blowing up.
        for j in 0..dim {
            hess[(j, j)] += 1e-8;
        }
        let step = solve(&hess, &grad, "logistic Hessian")?;
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-10 {
            let trial = &beta + &step * t;
            let value = loglik(&trial);
            if value.is_finite() && value >= current - 1e-12 {
                let gain = value - current;
                beta = trial;
                current = value;
                accepted = true;
                if gain.abs() < 1e-12 * (1.0 + current.abs()) {
                    return Ok(reshape(&beta, k, p));
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted || grad.amax() < 1e-10 {
            break;
        }
    }
    Ok(reshape(&beta, k, p))
}

fn reshape(beta: &DVector<f64>, k: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k, p, |a, c| beta[a * p + c])
}

fn arm_probabilities_row(x: &DMatrix<f64>, i: usize, beta: &DVector<f64>, k: usize, p: usize) -> Vec<f64> {
    let eta: Vec<f64> = (0..k)
        .map(|a| (0..p).map(|c| x[(i, c)] * beta[a * p + c]).sum())
        .collect();
    softmax_with_baseline(&eta)
}

/// Arm probabilities `(1, e^{η_1}, …, e^{η_k}) / normaliser`.
pub fn softmax_with_baseline(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::with_capacity(eta.len() + 1);
    out.push((-m).exp());
    out.extend(eta.iter().map(|e| (e - m).exp()));
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the `n − 1` divisor.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_recovers_known_solution() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let x = solve(&a, &DVector::from_vec(vec![3.0, 5.0]), "t").unwrap();
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn singular_system_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            solve(&a, &DVector::from_vec(vec![1.0, 1.0]), "t"),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax_with_baseline(&[0.3, -1.2]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((p[1] / p[0] - 0.3f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn logistic_fit_on_balanced_data_is_symmetric() {
        // Two covariate values, each with a 3:1 and 1:3 split.
        let mut rows = Vec::new();
        let mut arm = Vec::new();
        for (x, ones) in [(0.0, 3), (1.0, 1)] {
            for j in 0..4 {
                rows.push(vec![1.0, x]);
                arm.push(usize::from(j < ones));
            }
        }
        let beta = multinomial_logit(&design(&rows), &arm, 2).unwrap();
        assert!((beta[(0, 0)] - 3f64.ln()).abs() < 1e-6);
        assert!((beta[(0, 1)] + 2.0 * 3f64.ln()).abs() < 1e-6);
    }
}
