//! Weighted least squares, within-group demeaning, and a weighted logistic
//! fit. Collinear columns are dropped deterministically in first-come order
//! so repeated runs and reordered-but-equivalent inputs behave predictably.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot tolerance for declaring a column collinear with the
/// columns already kept.
const PIVOT_RTOL: f64 = 1e-9;

/// Result of a weighted least-squares fit.
#[derive(Debug, Clone)]
pub struct WlsFit {
    /// Coefficients for the kept columns, in original column order.
    pub beta: DVector<f64>,
    /// Indices of columns kept (earlier columns win under collinearity).
    pub kept: Vec<usize>,
    /// Design matrix restricted to the kept columns.
    pub x_kept: DMatrix<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl WlsFit {
    /// Coefficient vector expanded to the original column count with zeros
    /// in dropped positions.
    pub fn beta_full(&self, p: usize) -> DVector<f64> {
        let mut out = DVector::zeros(p);
        for (k, &j) in self.kept.iter().enumerate() {
            out[j] = self.beta[k];
        }
        out
    }
}

/// Greedy in-order column selection by incremental Cholesky on `a = X'WX`.
/// Returns the kept column indices and the Cholesky factor of the kept
/// submatrix.
fn select_columns(a: &DMatrix<f64>) -> Result<(Vec<usize>, DMatrix<f64>)> {
    let p = a.ncols();
    let mut kept: Vec<usize> = Vec::new();
    // Lower-triangular factor over kept columns, grown row by row.
    let mut l = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        let k = kept.len();
        // Solve L c = a[kept, j] by forward substitution.
        let mut c = vec![0.0f64; k];
        for (r, &jr) in kept.iter().enumerate() {
            let mut s = a[(jr, j)];
            for q in 0..r {
                s -= l[(r, q)] * c[q];
            }
            c[r] = s / l[(r, r)];
        }
        let d = a[(j, j)] - c.iter().map(|x| x * x).sum::<f64>();
        if d > PIVOT_RTOL * a[(j, j)].max(f64::MIN_POSITIVE) && a[(j, j)] > 0.0 {
            for (q, &cv) in c.iter().enumerate() {
                l[(k, q)] = cv;
            }
            l[(k, k)] = d.sqrt();
            kept.push(j);
        }
    }
    if kept.is_empty() {
        return Err(Error::RankZero);
    }
    let k = kept.len();
    Ok((kept, l.view((0, 0), (k, k)).into_owned()))
}

/// Weighted least squares of `y` on the columns of `x` with weights `w`.
/// Collinear columns are dropped in first-come order.
pub fn wls(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<WlsFit> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::LengthMismatch {
            what: "y",
            got: y.len(),
            expected: n,
        });
    }
    if w.len() != n {
        return Err(Error::LengthMismatch {
            what: "weights",
            got: w.len(),
            expected: n,
        });
    }
    let p = x.ncols();
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for i in 0..n {
        let wi = w[i];
        for r in 0..p {
            let xr = x[(i, r)];
            b[r] += wi * xr * y[i];
            for c in r..p {
                a[(r, c)] += wi * xr * x[(i, c)];
            }
        }
    }
    for r in 0..p {
        for c in 0..r {
            a[(r, c)] = a[(c, r)];
        }
    }

    let (kept, l) = select_columns(&a)?;
    let k = kept.len();
    // Solve L L' beta = b[kept].
    let mut z = DVector::<f64>::zeros(k);
    for r in 0..k {
        let mut s = b[kept[r]];
        for q in 0..r {
            s -= l[(r, q)] * z[q];
        }
        z[r] = s / l[(r, r)];
    }
    let mut beta = DVector::<f64>::zeros(k);
    for r in (0..k).rev() {
        let mut s = z[r];
        for q in (r + 1)..k {
            s -= l[(q, r)] * beta[q];
        }
        beta[r] = s / l[(r, r)];
    }

    let x_kept = DMatrix::from_fn(n, k, |i, c| x[(i, kept[c])]);
    let fitted: Vec<f64> = (0..n)
        .map(|i| (0..k).map(|c| x_kept[(i, c)] * beta[c]).sum())
        .collect();
    let residuals: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();
    Ok(WlsFit {
        beta,
        kept,
        x_kept,
        fitted,
        residuals,
    })
}

/// Subtract weighted group means in place: `v_i - mean_w(v | group_i)`.
pub fn demean_within(v: &mut [f64], group: &[usize], n_groups: usize, w: &[f64]) {
    let mut sum = vec![0.0f64; n_groups];
    let mut wsum = vec![0.0f64; n_groups];
    for i in 0..v.len() {
        sum[group[i]] += w[i] * v[i];
        wsum[group[i]] += w[i];
    }
    for g in 0..n_groups {
        if wsum[g] > 0.0 {
            sum[g] /= wsum[g];
        }
    }
    for i in 0..v.len() {
        v[i] -= sum[group[i]];
    }
}

/// Alternating weighted demeaning over two grouping factors until the update
/// is negligible. Equivalent to absorbing both sets of fixed effects.
pub fn two_way_demean(
    v: &mut [f64],
    g1: &[usize],
    n1: usize,
    g2: &[usize],
    n2: usize,
    w: &[f64],
) -> Result<()> {
    let scale = v
        .iter()
        .map(|x| x.abs())
        .fold(0.0f64, f64::max)
        .max(1.0);
    for _ in 0..10_000 {
        let before: Vec<f64> = v.to_vec();
        demean_within(v, g1, n1, w);
        demean_within(v, g2, n2, w);
        let delta = v
            .iter()
            .zip(before.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if delta <= 1e-12 * scale {
            return Ok(());
        }
    }
    Err(Error::Invalid(
        "two-way demeaning did not converge".to_string(),
    ))
}

/// Result of a weighted logistic fit.
#[derive(Debug, Clone)]
pub struct LogitFit {
    pub beta: DVector<f64>,
    pub kept: Vec<usize>,
    pub x_kept: DMatrix<f64>,
    /// Fitted probabilities.
    pub p: Vec<f64>,
}

/// Bound on |beta| beyond which the fit is treated as separated.
const SEPARATION_BOUND: f64 = 1e4;
const IRLS_MAX_ITER: usize = 100;

/// Weighted logistic regression of a binary `y` on `x` by Newton iteration
/// with step halving. Reports apparent perfect separation rather than
/// returning a diverging fit.
pub fn logit_irls(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<LogitFit> {
    let n = x.nrows();
    if y.len() != n || w.len() != n {
        return Err(Error::LengthMismatch {
            what: "logit inputs",
            got: y.len().min(w.len()),
            expected: n,
        });
    }
    // Fix the kept-column set once from the weighted cross product.
    let p_all = x.ncols();
    let mut a = DMatrix::<f64>::zeros(p_all, p_all);
    for i in 0..n {
        let xi = x.row(i).transpose();
        a += &xi * xi.transpose() * w[i];
    }
    let (kept, _) = select_columns(&a)?;
    let k = kept.len();
    let x_kept = DMatrix::from_fn(n, k, |i, c| x[(i, kept[c])]);

    let deviance = |beta: &DVector<f64>| -> f64 {
        let mut d = 0.0;
        for i in 0..n {
            let eta: f64 = (0..k).map(|c| x_kept[(i, c)] * beta[c]).sum();
            // -2 * w * [y*eta - log(1 + e^eta)], numerically stable.
            let log1pe = if eta > 30.0 { eta } else { (1.0 + eta.exp()).ln() };
            d += -2.0 * w[i] * (y[i] * eta - log1pe);
        }
        d
    };

    let mut beta = DVector::<f64>::zeros(k);
    let mut dev = deviance(&beta);
    for _iter in 0..IRLS_MAX_ITER {
        let mut grad = DVector::<f64>::zeros(k);
        let mut hess = DMatrix::<f64>::zeros(k, k);
        for i in 0..n {
            let eta: f64 = (0..k).map(|c| x_kept[(i, c)] * beta[c]).sum();
            let pi = 1.0 / (1.0 + (-eta).exp());
            let xi = x_kept.row(i).transpose();
            grad += &xi * (w[i] * (y[i] - pi));
            hess += &xi * xi.transpose() * (w[i] * pi * (1.0 - pi)).max(1e-12);
        }
        let step = hess
            .clone()
            .cholesky()
            .map(|c| c.solve(&grad))
            .ok_or(Error::Separation(SEPARATION_BOUND))?;
        // Step halving on the deviance.
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta + &step * t;
            let cand_dev = deviance(&cand);
            if cand_dev <= dev + 1e-12 {
                let improved = dev - cand_dev;
                beta = cand;
                dev = cand_dev;
                accepted = true;
                if improved < 1e-10 * (dev.abs() + 1.0) {
                    // A binary-outcome deviance of essentially zero means the
                    // fit reproduces every 0/1 exactly: perfect separation,
                    // with coefficients diverging however far we iterate.
                    if dev < 1e-6 {
                        return Err(Error::Separation(SEPARATION_BOUND));
                    }
                    let p = (0..n)
                        .map(|i| {
                            let eta: f64 = (0..k).map(|c| x_kept[(i, c)] * beta[c]).sum();
                            1.0 / (1.0 + (-eta).exp())
                        })
                        .collect();
                    return Ok(LogitFit { beta, kept, x_kept, p });
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        if beta.iter().any(|b| b.abs() > SEPARATION_BOUND) {
            return Err(Error::Separation(SEPARATION_BOUND));
        }
    }
    Err(Error::IrlsNoConvergence(IRLS_MAX_ITER))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_matches_normal_equations_oracle() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [1.0, 2.1, 2.9, 4.2, 4.8, 6.1];
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let fit = wls(&x, &ys, &[1.0; 6]).unwrap();
        // Closed-form simple regression slope/intercept.
        let n = 6.0;
        let sx: f64 = xs.iter().sum();
        let sy: f64 = ys.iter().sum();
        let sxy: f64 = xs.iter().zip(ys.iter()).map(|(a, b)| a * b).sum();
        let sxx: f64 = xs.iter().map(|a| a * a).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let intercept = (sy - slope * sx) / n;
        assert!((fit.beta[0] - intercept).abs() < 1e-12);
        assert!((fit.beta[1] - slope).abs() < 1e-12);
        // Residuals orthogonal to columns.
        for c in 0..2 {
            let dot: f64 = (0..6).map(|i| x[(i, c)] * fit.residuals[i]).sum();
            assert!(dot.abs() < 1e-10);
        }
    }

    #[test]
    fn integer_weights_equal_row_replication() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = [1.0, 3.0, 4.0];
        let w = [1.0, 2.0, 3.0];
        let fit_w = wls(&x, &y, &w).unwrap();

        // Replicate rows per weight and fit unweighted.
        let mut rows = Vec::new();
        let mut yy = Vec::new();
        for i in 0..3 {
            for _ in 0..(w[i] as usize) {
                rows.extend_from_slice(&[x[(i, 0)], x[(i, 1)]]);
                yy.push(y[i]);
            }
        }
        let xr = DMatrix::from_row_slice(yy.len(), 2, &rows);
        let fit_r = wls(&xr, &yy, &vec![1.0; yy.len()]).unwrap();
        assert!((fit_w.beta[0] - fit_r.beta[0]).abs() < 1e-12);
        assert!((fit_w.beta[1] - fit_r.beta[1]).abs() < 1e-12);
    }

    #[test]
    fn duplicate_column_drops_the_later_one() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let y = [0.5, 1.4, 2.6, 3.4];
        // Columns: intercept, x, x again, 2x.
        let x = DMatrix::from_fn(4, 4, |i, j| match j {
            0 => 1.0,
            1 => xs[i],
            2 => xs[i],
            _ => 2.0 * xs[i],
        });
        let fit = wls(&x, &y, &[1.0; 4]).unwrap();
        assert_eq!(fit.kept, vec![0, 1]);
        // Same fit as the clean two-column problem.
        let x2 = DMatrix::from_fn(4, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let clean = wls(&x2, &y, &[1.0; 4]).unwrap();
        assert!((fit.beta[0] - clean.beta[0]).abs() < 1e-12);
        assert!((fit.beta[1] - clean.beta[1]).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_is_rank_zero() {
        let x = DMatrix::zeros(3, 2);
        assert!(matches!(wls(&x, &[1.0, 2.0, 3.0], &[1.0; 3]).unwrap_err(), Error::RankZero));
    }

    #[test]
    fn demean_within_weighted() {
        let mut v = vec![1.0, 3.0, 10.0, 20.0];
        let group = vec![0, 0, 1, 1];
        let w = vec![1.0, 3.0, 1.0, 1.0];
        demean_within(&mut v, &group, 2, &w);
        // Group 0 weighted mean = (1 + 9)/4 = 2.5; group 1 mean = 15.
        assert!((v[0] + 1.5).abs() < 1e-12);
        assert!((v[1] - 0.5).abs() < 1e-12);
        assert!((v[2] + 5.0).abs() < 1e-12);
        assert!((v[3] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn two_way_demean_matches_dummy_regression_residuals() {
        // 3 units x 3 periods, unbalanced weights; oracle = WLS on full
        // dummy sets.
        let n = 9;
        let unit: Vec<usize> = (0..n).map(|i| i / 3).collect();
        let time: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let v0: Vec<f64> = (0..n).map(|i| ((i * 13 + 5) % 7) as f64 - 3.0).collect();
        let w: Vec<f64> = (0..n).map(|i| 1.0 + (i % 4) as f64 * 0.5).collect();

        let mut v = v0.clone();
        two_way_demean(&mut v, &unit, 3, &time, 3, &w).unwrap();

        // Dummy regression: intercept + unit dummies (drop first) + time
        // dummies (drop first).
        let x = DMatrix::from_fn(n, 5, |i, j| match j {
            0 => 1.0,
            1 => (unit[i] == 1) as i32 as f64,
            2 => (unit[i] == 2) as i32 as f64,
            3 => (time[i] == 1) as i32 as f64,
            _ => (time[i] == 2) as i32 as f64,
        });
        let fit = wls(&x, &v0, &w).unwrap();
        for i in 0..n {
            assert!((v[i] - fit.residuals[i]).abs() < 1e-9, "row {i}");
        }
    }

    #[test]
    fn logit_two_by_two_closed_form() {
        // Binary x; cell counts: x=0 -> 30 of 100 success, x=1 -> 60 of 100.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..70 {
            xs.push(0.0);
            ys.push(0.0);
        }
        for _ in 0..30 {
            xs.push(0.0);
            ys.push(1.0);
        }
        for _ in 0..40 {
            xs.push(1.0);
            ys.push(0.0);
        }
        for _ in 0..60 {
            xs.push(1.0);
            ys.push(1.0);
        }
        let n = xs.len();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let fit = logit_irls(&x, &ys, &vec![1.0; n]).unwrap();
        let b0 = (0.3f64 / 0.7).ln();
        let b1 = (0.6f64 / 0.4).ln() - b0;
        assert!((fit.beta[0] - b0).abs() < 1e-6);
        assert!((fit.beta[1] - b1).abs() < 1e-6);
        // Saturated model: fitted probabilities equal cell shares.
        assert!((fit.p[0] - 0.3).abs() < 1e-6);
        assert!((fit.p[n - 1] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn logit_weights_shift_cell_probabilities() {
        // One cell, weighted: success weight 3, failure weight 1 ->
        // p = 3/4, beta0 = ln 3.
        let x = DMatrix::from_element(2, 1, 1.0);
        let fit = logit_irls(&x, &[1.0, 0.0], &[3.0, 1.0]).unwrap();
        assert!((fit.beta[0] - 3.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn logit_detects_separation() {
        // Perfectly separated along x.
        let xs = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let ys = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let err = logit_irls(&x, &ys, &[1.0; 6]).unwrap_err();
        assert!(
            matches!(err, Error::Separation(_)) || matches!(err, Error::IrlsNoConvergence(_)),
            "unexpected: {err}"
        );
    }
}
