//! Replicate-weight variance estimation: BRR, Fay's method, JK1, stratified
//! delete-one-PSU jackknife (JKn), and successive difference replication,
//! plus generation of JKn replicates from a design and a linear shortcut
//! that re-evaluates an influence-function estimator under each replicate
//! without refitting.

use nalgebra::DMatrix;

use crate::design::SurveyDesign;
use crate::error::{Error, Result};
use crate::tsl::{t_interval, InferenceMode, VarianceResult};

/// Replication scheme, determining the overall variance multiplier.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplicateMethod {
    /// Balanced repeated replication: `1/R`.
    Brr,
    /// Fay-adjusted BRR with factor `rho`: `1/(R (1-rho)^2)`.
    Fay(f64),
    /// Unstratified delete-one jackknife: `(R-1)/R`.
    Jk1,
    /// Stratified delete-one-PSU jackknife: unit multiplier with
    /// per-replicate scales `(n_h - 1)/n_h`.
    Jkn,
    /// Successive difference replication: `4/R`.
    Sdr,
}

impl ReplicateMethod {
    /// Overall multiplier `c` applied to the sum of scaled squared
    /// deviations.
    pub fn multiplier(&self, n_reps: usize) -> Result<f64> {
        let r = n_reps as f64;
        Ok(match *self {
            ReplicateMethod::Brr => 1.0 / r,
            ReplicateMethod::Fay(rho) => {
                if !(0.0..1.0).contains(&rho) {
                    return Err(Error::ReplicateSpec(format!(
                        "Fay factor must lie in [0, 1), got {rho}"
                    )));
                }
                1.0 / (r * (1.0 - rho) * (1.0 - rho))
            }
            ReplicateMethod::Jk1 => (r - 1.0) / r,
            ReplicateMethod::Jkn => 1.0,
            ReplicateMethod::Sdr => 4.0 / r,
        })
    }
}

/// A set of replicate raw weights (one column per replicate) with the
/// scheme metadata needed to turn replicate estimates into a variance.
#[derive(Debug, Clone)]
pub struct ReplicateWeights {
    pub method: ReplicateMethod,
    /// `n x R` raw replicate weights; zeros are allowed (deleted PSUs).
    pub weights: DMatrix<f64>,
    /// Per-replicate scales `s_r` (all 1 except JKn).
    pub scales: Vec<f64>,
}

impl ReplicateWeights {
    pub fn new(
        method: ReplicateMethod,
        weights: DMatrix<f64>,
        scales: Option<Vec<f64>>,
    ) -> Result<Self> {
        let r = weights.ncols();
        if r < 2 {
            return Err(Error::ReplicateSpec(format!(
                "need at least 2 replicates, got {r}"
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::ReplicateSpec(
                "replicate weights must be finite and non-negative".to_string(),
            ));
        }
        let scales = match scales {
            Some(s) => {
                if s.len() != r {
                    return Err(Error::ReplicateSpec(format!(
                        "got {} scales for {r} replicates",
                        s.len()
                    )));
                }
                s
            }
            None => {
                if method == ReplicateMethod::Jkn {
                    return Err(Error::ReplicateSpec(
                        "the stratified jackknife requires per-replicate scales".to_string(),
                    ));
                }
                vec![1.0; r]
            }
        };
        // Validate the Fay factor eagerly.
        method.multiplier(r)?;
        Ok(ReplicateWeights {
            method,
            weights,
            scales,
        })
    }

    pub fn n_reps(&self) -> usize {
        self.weights.ncols()
    }

    /// Degrees of freedom: the rank of the matrix of deviations of the
    /// replicate weights from the full-sample weights.
    pub fn df(&self, full_weights: &[f64]) -> Result<usize> {
        let n = self.weights.nrows();
        if full_weights.len() != n {
            return Err(Error::LengthMismatch {
                what: "full-sample weights",
                got: full_weights.len(),
                expected: n,
            });
        }
        let dev = DMatrix::from_fn(n, self.n_reps(), |i, r| {
            self.weights[(i, r)] - full_weights[i]
        });
        let svd = dev.svd(false, false);
        let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
        if max_sv == 0.0 {
            return Err(Error::ReplicateSpec(
                "replicate weights are identical to the full-sample weights".to_string(),
            ));
        }
        let tol = 1e-10 * max_sv * (n.max(self.n_reps()) as f64);
        Ok(svd.singular_values.iter().filter(|&&s| s > tol).count())
    }
}

/// Replicate variance of a scalar: `c * sum_r s_r (theta_r - center)^2`.
pub fn replicate_variance(
    estimates: &[f64],
    center: f64,
    replicates: &ReplicateWeights,
    df: usize,
) -> Result<VarianceResult> {
    let r = replicates.n_reps();
    if estimates.len() != r {
        return Err(Error::LengthMismatch {
            what: "replicate estimates",
            got: estimates.len(),
            expected: r,
        });
    }
    if estimates.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("replicate estimates"));
    }
    let c = replicates.method.multiplier(r)?;
    let v: f64 = estimates
        .iter()
        .zip(replicates.scales.iter())
        .map(|(e, s)| s * (e - center) * (e - center))
        .sum::<f64>()
        * c;
    Ok(VarianceResult {
        variance: DMatrix::from_element(1, 1, v),
        se: vec![v.sqrt()],
        df,
        mode: InferenceMode::Replicate,
        per_stratum: Vec::new(),
    })
}

/// Delete-one-PSU jackknife replicates from a stratified clustered design:
/// one replicate per PSU, zeroing its observations and scaling survivors in
/// the same stratum by `n_h / (n_h - 1)`. Finite population corrections are
/// not carried into the replicates.
pub fn make_jkn_replicates(design: &SurveyDesign) -> Result<ReplicateWeights> {
    design.check_min_psus()?;
    let n = design.n_obs();
    let n_psus = design.n_psus();
    let counts = design.sampled_psus();
    let w = design.raw_weights();
    let mut weights = DMatrix::<f64>::zeros(n, n_psus);
    let mut scales = Vec::with_capacity(n_psus);
    for r in 0..n_psus {
        let h = design.psu_stratum()[r];
        let n_h = counts[h] as f64;
        scales.push((n_h - 1.0) / n_h);
        for i in 0..n {
            weights[(i, r)] = if design.psu_of_obs()[i] == r {
                0.0
            } else if design.stratum_of_obs()[i] == h {
                w[i] * n_h / (n_h - 1.0)
            } else {
                w[i]
            };
        }
    }
    ReplicateWeights::new(ReplicateMethod::Jkn, weights, Some(scales))
}

/// Re-evaluate an influence-function estimator under each replicate by its
/// first-order expansion: `theta_r = theta + sum_i (w_r,i - w_i) IF_i / W_hat`,
/// with all weights normalized by the full-sample mean raw weight.
pub fn replicate_estimates_via_if(
    theta: f64,
    if_values: &[f64],
    full_raw_weights: &[f64],
    replicates: &ReplicateWeights,
) -> Result<Vec<f64>> {
    let n = full_raw_weights.len();
    if if_values.len() != n || replicates.weights.nrows() != n {
        return Err(Error::LengthMismatch {
            what: "influence values",
            got: if_values.len().min(replicates.weights.nrows()),
            expected: n,
        });
    }
    let n_hat: f64 = full_raw_weights.iter().sum();
    let mean_raw = n_hat / n as f64;
    let w_hat = n as f64; // normalized weights sum to n by construction
    let mut out = Vec::with_capacity(replicates.n_reps());
    for r in 0..replicates.n_reps() {
        let mut delta = 0.0;
        for i in 0..n {
            let dw = (replicates.weights[(i, r)] - full_raw_weights[i]) / mean_raw;
            delta += dw * if_values[i];
        }
        out.push(theta + delta / w_hat);
    }
    Ok(out)
}

/// Full replicate-mode inference for a stored-influence estimate.
pub fn replicate_estimate(
    att: f64,
    if_values: &[f64],
    full_raw_weights: &[f64],
    replicates: &ReplicateWeights,
    level: f64,
) -> Result<crate::att::AttEstimate> {
    let estimates = replicate_estimates_via_if(att, if_values, full_raw_weights, replicates)?;
    let df = replicates.df(full_raw_weights)?;
    let var = replicate_variance(&estimates, att, replicates, df)?;
    let se = var.se[0];
    let ci = t_interval(att, se, df, level)?;
    Ok(crate::att::AttEstimate {
        att,
        se,
        df,
        ci,
        mode: InferenceMode::Replicate,
    })
}
