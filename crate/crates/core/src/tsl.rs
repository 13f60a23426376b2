//! Stratified-cluster variance by Taylor linearization.
//!
//! The central formula sums, over strata, the FPC-scaled within-stratum
//! dispersion of PSU totals of the weighted linearized variable
//! `psi_i = w_i * IF_i / W_hat`. The regression sandwich is the same
//! dispersion applied to PSU-level weighted score totals between two
//! bread factors.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::design::{design_df, SurveyDesign};
use crate::error::{Error, Result};

/// Per-observation weighted linearized variables, one column per target
/// parameter.
#[derive(Debug, Clone)]
pub struct LinearizedSample {
    psi: DMatrix<f64>,
}

impl LinearizedSample {
    pub fn from_matrix(psi: DMatrix<f64>) -> Result<Self> {
        if psi.nrows() == 0 || psi.ncols() == 0 {
            return Err(Error::EmptyInput("linearized sample"));
        }
        if psi.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("linearized sample"));
        }
        Ok(LinearizedSample { psi })
    }

    pub fn scalar(psi: &[f64]) -> Result<Self> {
        Self::from_matrix(DMatrix::from_column_slice(psi.len(), 1, psi))
    }

    /// Build from raw influence values: `psi_i = w_i * if_i / w_hat`.
    pub fn from_influence(if_values: &[f64], weights: &[f64], w_hat: f64) -> Result<Self> {
        if if_values.len() != weights.len() {
            return Err(Error::LengthMismatch {
                what: "influence values",
                got: if_values.len(),
                expected: weights.len(),
            });
        }
        let psi: Vec<f64> = if_values
            .iter()
            .zip(weights.iter())
            .map(|(f, w)| w * f / w_hat)
            .collect();
        Self::scalar(&psi)
    }

    pub fn n_obs(&self) -> usize {
        self.psi.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.psi.ncols()
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }
}

/// How a variance was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Hc1,
    Cluster,
    Design,
    Replicate,
}

impl std::fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            InferenceMode::Hc1 => "hc1",
            InferenceMode::Cluster => "cluster",
            InferenceMode::Design => "design",
            InferenceMode::Replicate => "replicate",
        };
        f.write_str(s)
    }
}

/// A variance matrix with its degrees of freedom and per-stratum
/// contributions (diagnostic).
#[derive(Debug, Clone)]
pub struct VarianceResult {
    pub variance: DMatrix<f64>,
    pub se: Vec<f64>,
    pub df: usize,
    pub mode: InferenceMode,
    pub per_stratum: Vec<DMatrix<f64>>,
}

impl VarianceResult {
    pub fn scalar_variance(&self) -> f64 {
        self.variance[(0, 0)]
    }
}

/// Stratified-cluster variance of the linearized sample: PSU totals first,
/// then FPC-scaled within-stratum centered outer products.
pub fn tsl_variance(lin: &LinearizedSample, design: &SurveyDesign) -> Result<VarianceResult> {
    if lin.n_obs() != design.n_obs() {
        return Err(Error::LengthMismatch {
            what: "linearized sample",
            got: lin.n_obs(),
            expected: design.n_obs(),
        });
    }
    design.check_min_psus()?;
    let p = lin.n_params();
    let n_psus = design.n_psus();
    let n_strata = design.n_strata();

    // PSU totals of psi.
    let mut totals = DMatrix::<f64>::zeros(n_psus, p);
    for (i, &psu) in design.psu_of_obs().iter().enumerate() {
        for c in 0..p {
            totals[(psu, c)] += lin.psi[(i, c)];
        }
    }

    let counts = design.sampled_psus();
    // Within-stratum means of PSU totals.
    let mut means = DMatrix::<f64>::zeros(n_strata, p);
    for (j, &h) in design.psu_stratum().iter().enumerate() {
        for c in 0..p {
            means[(h, c)] += totals[(j, c)];
        }
    }
    for h in 0..n_strata {
        if counts[h] > 0 {
            for c in 0..p {
                means[(h, c)] /= counts[h] as f64;
            }
        }
    }

    let mut per_stratum: Vec<DMatrix<f64>> = vec![DMatrix::zeros(p, p); n_strata];
    for (j, &h) in design.psu_stratum().iter().enumerate() {
        let dev: DVector<f64> = DVector::from_iterator(p, (0..p).map(|c| totals[(j, c)] - means[(h, c)]));
        per_stratum[h] += &dev * dev.transpose();
    }
    let mut variance = DMatrix::<f64>::zeros(p, p);
    for h in 0..n_strata {
        if counts[h] == 0 {
            continue;
        }
        let n_h = counts[h] as f64;
        let scale = (1.0 - design.sampling_fraction(h)) * n_h / (n_h - 1.0);
        per_stratum[h] *= scale;
        variance += &per_stratum[h];
    }

    let df = design_df(design)?;
    let se = (0..p).map(|c| variance[(c, c)].max(0.0).sqrt()).collect();
    Ok(VarianceResult {
        variance,
        se,
        df,
        mode: InferenceMode::Design,
        per_stratum,
    })
}

/// PSU clustering only: one implicit stratum, no FPC. `df = n_psu - 1`.
pub fn cluster_only_variance(
    lin: &LinearizedSample,
    design: &SurveyDesign,
) -> Result<VarianceResult> {
    let collapsed = design.cluster_only()?;
    let mut out = tsl_variance(lin, &collapsed)?;
    out.mode = InferenceMode::Cluster;
    Ok(out)
}

/// Heteroskedasticity-robust variance for an unweighted fit:
/// `(X'X)^-1 [n/(n-k) sum x x' u^2] (X'X)^-1`, df = n - k.
pub fn hc1_variance(x: &DMatrix<f64>, residuals: &[f64]) -> Result<VarianceResult> {
    hc1_variance_with_k(x, residuals, x.ncols())
}

/// HC1 with an explicit parameter count, for fits where additional
/// coefficients (absorbed fixed effects) were profiled out before `x` was
/// formed.
pub fn hc1_variance_with_k(
    x: &DMatrix<f64>,
    residuals: &[f64],
    k: usize,
) -> Result<VarianceResult> {
    let n = x.nrows();
    if residuals.len() != n {
        return Err(Error::LengthMismatch {
            what: "residuals",
            got: residuals.len(),
            expected: n,
        });
    }
    if n <= k {
        return Err(Error::ZeroResidualDf { n, k });
    }
    let bread = invert_cross_product(&(x.transpose() * x))?;
    let p = x.ncols();
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let xi = x.row(i).transpose();
        meat += &xi * xi.transpose() * (residuals[i] * residuals[i]);
    }
    meat *= n as f64 / (n - k) as f64;
    let variance = &bread * meat * &bread;
    let se = (0..p).map(|c| variance[(c, c)].max(0.0).sqrt()).collect();
    Ok(VarianceResult {
        variance,
        se,
        df: n - k,
        mode: InferenceMode::Hc1,
        per_stratum: Vec::new(),
    })
}

/// Stratified-cluster sandwich for a weighted regression fit: bread
/// `(X'WX)^-1`, meat from PSU totals of the weighted scores `w x u`.
pub fn regression_sandwich(
    x: &DMatrix<f64>,
    residuals: &[f64],
    weights: &[f64],
    design: &SurveyDesign,
) -> Result<VarianceResult> {
    let n = x.nrows();
    if residuals.len() != n || weights.len() != n || design.n_obs() != n {
        return Err(Error::LengthMismatch {
            what: "regression sandwich inputs",
            got: residuals.len().min(weights.len()).min(design.n_obs()),
            expected: n,
        });
    }
    design.check_min_psus()?;
    let p = x.ncols();
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let xi = x.row(i).transpose();
        xtwx += &xi * xi.transpose() * weights[i];
    }
    let bread = invert_cross_product(&xtwx)?;

    // Scores aggregated to PSU totals.
    let mut score = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        let s = weights[i] * residuals[i];
        for c in 0..p {
            score[(i, c)] = s * x[(i, c)];
        }
    }
    let lin = LinearizedSample::from_matrix(score)?;
    let meat = tsl_variance(&lin, design)?;

    let variance = &bread * &meat.variance * &bread;
    let per_stratum = meat
        .per_stratum
        .iter()
        .map(|v| &bread * v * &bread)
        .collect();
    let se = (0..p).map(|c| variance[(c, c)].max(0.0).sqrt()).collect();
    Ok(VarianceResult {
        variance,
        se,
        df: meat.df,
        mode: InferenceMode::Design,
        per_stratum,
    })
}

/// Relative condition threshold below which the cross-product matrix is
/// treated as singular. Reported, never regularized away.
const SINGULAR_RTOL: f64 = 1e-12;

fn invert_cross_product(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = a.ncols();
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let min_sv = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > SINGULAR_RTOL * max_sv)
        .count();
    if rank < p || max_sv == 0.0 {
        return Err(Error::SingularBread {
            rank,
            cols: p,
            condition: if min_sv > 0.0 { max_sv / min_sv } else { f64::INFINITY },
        });
    }
    a.clone()
        .try_inverse()
        .ok_or(Error::SingularBread {
            rank,
            cols: p,
            condition: max_sv / min_sv,
        })
}

/// Two-sided Student-t quantile at `1 - (1 - level)/2`.
pub fn t_quantile(df: usize, level: f64) -> Result<f64> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidLevel(level));
    }
    if df < 1 {
        return Err(Error::InvalidDf(df));
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|_| Error::InvalidDf(df))?;
    Ok(dist.inverse_cdf(1.0 - (1.0 - level) / 2.0))
}

/// t-based confidence interval `est +/- t_{df} * se`.
pub fn t_interval(est: f64, se: f64, df: usize, level: f64) -> Result<(f64, f64)> {
    if se < 0.0 || !se.is_finite() {
        return Err(Error::NonFinite("standard error"));
    }
    let q = t_quantile(df, level)?;
    Ok((est - q * se, est + q * se))
}
