//! Regression-style estimators on the panel: the static two-way fixed
//! effects benchmark and the interaction-weighted event-study regression
//! with cohort-by-relative-period coefficients.
//!
//! Both absorb unit and period fixed effects by alternating weighted
//! demeaning and take their variance from the stratified-cluster sandwich
//! on the remaining regressors.

use nalgebra::{DMatrix, DVector};

use crate::design::SurveyDesign;
use crate::error::{Error, Result};
use crate::panel::{PanelDataset, PanelKind};
use crate::regress::{two_way_demean, wls};
use crate::tsl::{regression_sandwich, t_interval, InferenceMode, VarianceResult};

/// A coefficient-level inference result from a regression estimator.
#[derive(Debug, Clone)]
pub struct RegressionEstimate {
    pub att: f64,
    pub se: f64,
    pub df: usize,
    pub ci: (f64, f64),
    pub mode: InferenceMode,
}

fn period_index(data: &PanelDataset) -> Vec<usize> {
    data.period()
        .iter()
        .map(|p| data.periods().binary_search(p).expect("member of grid"))
        .collect()
}

/// Variance of `a' beta` under the requested mode, where the regression was
/// run on demeaned regressors `x` with `k_absorbed` profiled-out fixed
/// effects.
fn mode_sandwich(
    x: &DMatrix<f64>,
    residuals: &[f64],
    w: &[f64],
    design: &SurveyDesign,
    mode: InferenceMode,
    k_absorbed: usize,
) -> Result<VarianceResult> {
    match mode {
        InferenceMode::Design => regression_sandwich(x, residuals, w, design),
        InferenceMode::Cluster => {
            let mut out = regression_sandwich(x, residuals, w, &design.cluster_only()?)?;
            out.mode = InferenceMode::Cluster;
            Ok(out)
        }
        InferenceMode::Hc1 => {
            let mut out = regression_sandwich(x, residuals, w, &design.degenerate())?;
            let n = x.nrows();
            let k = k_absorbed + x.ncols();
            if n <= k {
                return Err(Error::ZeroResidualDf { n, k });
            }
            out.df = n - k;
            out.mode = InferenceMode::Hc1;
            Ok(out)
        }
        InferenceMode::Replicate => Err(Error::ReplicateSpec(
            "replicate variance needs replicate weights; use the replicate module".to_string(),
        )),
    }
}

/// Static two-way fixed effects: weighted regression of the outcome on the
/// post-treatment indicator with unit and period effects absorbed.
pub fn twfe(
    data: &PanelDataset,
    mode: InferenceMode,
    level: f64,
) -> Result<RegressionEstimate> {
    if data.kind() != PanelKind::Panel {
        return Err(Error::Invalid(
            "two-way fixed effects requires balanced panel data".to_string(),
        ));
    }
    let n = data.n_obs();
    let nw = data.design().normalized_weights();
    let unit = data.unit_of_obs();
    let tidx = period_index(data);

    let mut yt: Vec<f64> = data.y().to_vec();
    let mut dt: Vec<f64> = (0..n)
        .map(|i| match data.first_treat()[i] {
            Some(g) => (data.period()[i] >= g) as i32 as f64,
            None => 0.0,
        })
        .collect();
    two_way_demean(&mut yt, unit, data.n_units(), &tidx, data.periods().len(), &nw.w)?;
    two_way_demean(&mut dt, unit, data.n_units(), &tidx, data.periods().len(), &nw.w)?;

    let sdd: f64 = (0..n).map(|i| nw.w[i] * dt[i] * dt[i]).sum();
    if sdd <= 1e-10 * n as f64 {
        return Err(Error::NoTreatmentVariation);
    }
    let x = DMatrix::from_column_slice(n, 1, &dt);
    let fit = wls(&x, &yt, &nw.w)?;
    let att = fit.beta[0];

    let k_absorbed = data.n_units() + data.periods().len() - 1;
    let var = mode_sandwich(&x, &fit.residuals, &nw.w, data.design(), mode, k_absorbed)?;
    let se = var.se[0];
    let ci = t_interval(att, se, var.df, level)?;
    Ok(RegressionEstimate {
        att,
        se,
        df: var.df,
        ci,
        mode,
    })
}

/// One cohort-by-relative-period coefficient from the event-study
/// regression.
#[derive(Debug, Clone)]
pub struct SaCell {
    pub cohort: i64,
    pub rel: i64,
    pub beta: f64,
}

/// Interaction-weighted event-study fit: per-cell coefficients plus the
/// cohort-share weighted average over post cells.
#[derive(Debug, Clone)]
pub struct SaFit {
    pub cells: Vec<SaCell>,
    pub overall: RegressionEstimate,
    /// Aggregation weight on each cell (zero for pre-periods).
    pub agg_weights: Vec<f64>,
}

/// Event-study regression with cohort-by-relative-period dummies (reference
/// `e = -1`, never-treated absorbed) and unit and period effects, then a
/// cohort-share weighted average of the post coefficients.
pub fn sun_abraham(
    data: &PanelDataset,
    mode: InferenceMode,
    level: f64,
) -> Result<SaFit> {
    if data.kind() != PanelKind::Panel {
        return Err(Error::Invalid(
            "the event-study regression requires balanced panel data".to_string(),
        ));
    }
    if !data.has_never_treated() {
        return Err(Error::EmptyCell {
            cohort: 0,
            period: 0,
            which: "never-treated comparison",
        });
    }
    let n = data.n_obs();
    let nw = data.design().normalized_weights();
    let unit = data.unit_of_obs();
    let tidx = period_index(data);
    let cohorts = data.cohorts();
    if cohorts.is_empty() {
        return Err(Error::NoPostCells);
    }

    // Enumerate observed (cohort, relative period) pairs, excluding the
    // reference e = -1.
    let mut pairs: Vec<(i64, i64)> = Vec::new();
    for &g in &cohorts {
        for &t in data.periods() {
            let e = t - g;
            if e != -1 {
                pairs.push((g, e));
            }
        }
    }

    let mut x = DMatrix::<f64>::zeros(n, pairs.len());
    for i in 0..n {
        if let Some(g) = data.first_treat()[i] {
            let e = data.period()[i] - g;
            if e != -1 {
                let c = pairs
                    .iter()
                    .position(|&(pg, pe)| pg == g && pe == e)
                    .expect("pair enumerated");
                x[(i, c)] = 1.0;
            }
        }
    }

    let mut yt: Vec<f64> = data.y().to_vec();
    two_way_demean(&mut yt, unit, data.n_units(), &tidx, data.periods().len(), &nw.w)?;
    let mut xt = x.clone();
    for c in 0..pairs.len() {
        let mut col: Vec<f64> = (0..n).map(|i| xt[(i, c)]).collect();
        two_way_demean(&mut col, unit, data.n_units(), &tidx, data.periods().len(), &nw.w)?;
        for i in 0..n {
            xt[(i, c)] = col[i];
        }
    }

    let fit = wls(&xt, &yt, &nw.w)?;
    let beta_full = fit.beta_full(pairs.len());
    let cells: Vec<SaCell> = pairs
        .iter()
        .zip(beta_full.iter())
        .map(|(&(g, e), &b)| SaCell {
            cohort: g,
            rel: e,
            beta: b,
        })
        .collect();

    // Cohort shares among the treated, at unit level.
    let udesign = data.unit_design()?;
    let unw = udesign.normalized_weights();
    let mut mass = vec![0.0; cohorts.len()];
    let mut total = 0.0;
    for (u, g) in data.unit_first_treat().iter().enumerate() {
        if let Some(g) = g {
            let k = cohorts.binary_search(g).expect("cohort listed");
            mass[k] += unw.w[u];
            total += unw.w[u];
        }
    }
    // Weight on each kept column: cohort share over post cells, zero on
    // pre-period and dropped columns.
    let mut a_kept = DVector::<f64>::zeros(fit.kept.len());
    let mut agg_weights = vec![0.0; pairs.len()];
    let mut wsum = 0.0;
    for (kc, &c) in fit.kept.iter().enumerate() {
        let (g, e) = pairs[c];
        if e >= 0 {
            let k = cohorts.binary_search(&g).expect("cohort listed");
            let wgt = mass[k] / total;
            a_kept[kc] = wgt;
            agg_weights[c] = wgt;
            wsum += wgt;
        }
    }
    if wsum <= 0.0 {
        return Err(Error::NoPostCells);
    }
    a_kept /= wsum;
    for w in agg_weights.iter_mut() {
        *w /= wsum;
    }

    let att: f64 = fit
        .kept
        .iter()
        .enumerate()
        .map(|(kc, _)| a_kept[kc] * fit.beta[kc])
        .sum();

    let k_absorbed = data.n_units() + data.periods().len() - 1;
    let var = mode_sandwich(
        &fit.x_kept,
        &fit.residuals,
        &nw.w,
        data.design(),
        mode,
        k_absorbed,
    )?;
    let v_att = (a_kept.transpose() * &var.variance * &a_kept)[(0, 0)];
    let se = v_att.max(0.0).sqrt();
    let ci = t_interval(att, se, var.df, level)?;
    Ok(SaFit {
        cells,
        overall: RegressionEstimate {
            att,
            se,
            df: var.df,
            ci,
            mode,
        },
        agg_weights,
    })
}
