//! Group-time average treatment effects with influence functions.
//!
//! Two estimators share the cell layer: a simple difference of Hajek means
//! between a treatment cohort and the never-treated comparison, and a
//! doubly-robust version combining an outcome regression with inverse
//! propensity reweighting of the comparison group. Both return per-row
//! influence values so any variance mode (model-based, cluster, full
//! design, replicate) can be applied afterwards.

use nalgebra::{DMatrix, DVector};

use crate::design::{NormalizedWeights, SurveyDesign};
use crate::error::{Error, Result};
use crate::panel::{PanelDataset, PanelKind};
use crate::regress::{logit_irls, wls};
use crate::tsl::{
    cluster_only_variance, t_interval, tsl_variance, InferenceMode, LinearizedSample,
    VarianceResult,
};

/// Which group-time estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Unadjusted difference of weighted means against the never treated.
    CsReg,
    /// Doubly robust: outcome regression plus propensity reweighting.
    CsDr,
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimator::CsReg => "cs_reg",
            Estimator::CsDr => "cs_dr",
        })
    }
}

/// One (cohort, period) cell: point estimate and per-row influence values
/// on the working sample (units for panels, rows for repeated cross
/// sections).
#[derive(Debug, Clone)]
pub struct AttCell {
    pub cohort: i64,
    pub period: i64,
    pub att: f64,
    pub if_values: Vec<f64>,
}

/// The working sample the cells are expressed on: its design, normalized
/// weights, and per-cohort shares among the treated.
#[derive(Debug, Clone)]
pub struct WorkingSample {
    pub design: SurveyDesign,
    pub weights: NormalizedWeights,
    /// Treated cohorts, sorted.
    pub cohorts: Vec<i64>,
    /// Share of each cohort among treated working rows (by count), aligned
    /// with `cohorts`. Used as fixed aggregation weights.
    pub cohort_share: Vec<f64>,
    /// Cohort membership of each working row (`None` = never treated).
    pub first_treat: Vec<Option<i64>>,
}

/// All group-time cells plus the sample they live on.
#[derive(Debug, Clone)]
pub struct AttGtSet {
    pub cells: Vec<AttCell>,
    pub sample: WorkingSample,
    pub estimator: Estimator,
}

/// An aggregated target: point estimate, combined influence values, and the
/// (cohort, period, weight) scheme used.
#[derive(Debug, Clone)]
pub struct Aggregated {
    pub att: f64,
    pub if_values: Vec<f64>,
    pub scheme: Vec<(i64, i64, f64)>,
}

// ---------------------------------------------------------------------------
// Working sample preparation
// ---------------------------------------------------------------------------

/// Per-unit changes for one (cohort, period) cell of a balanced panel.
struct PanelCellData {
    /// Outcome change `Y_t - Y_{g-1}` per unit.
    dy: Vec<f64>,
    /// Treatment-cohort indicator per unit.
    g: Vec<f64>,
    /// Never-treated indicator per unit.
    c: Vec<f64>,
}

fn panel_cell_data(data: &PanelDataset, cohort: i64, period: i64) -> Result<PanelCellData> {
    let base = cohort - 1;
    if data.periods().binary_search(&base).is_err() {
        return Err(Error::EmptyCell {
            cohort,
            period,
            which: "base period",
        });
    }
    let n_units = data.n_units();
    let mut dy = vec![0.0; n_units];
    let mut g = vec![0.0; n_units];
    let mut c = vec![0.0; n_units];
    let y = data.y();
    for u in 0..n_units {
        let rt = data.row(u, period).expect("balanced panel");
        let rb = data.row(u, base).expect("balanced panel");
        dy[u] = y[rt] - y[rb];
        match data.unit_first_treat()[u] {
            Some(gu) if gu == cohort => g[u] = 1.0,
            None => c[u] = 1.0,
            _ => {}
        }
    }
    Ok(PanelCellData { dy, g, c })
}

/// Weighted mean with explicit mass; errors identify the empty group.
fn hajek_mean(
    v: &[f64],
    ind: &[f64],
    w: &[f64],
    cohort: i64,
    period: i64,
    which: &'static str,
) -> Result<(f64, f64)> {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..v.len() {
        num += w[i] * ind[i] * v[i];
        den += w[i] * ind[i];
    }
    if den <= 0.0 {
        return Err(Error::EmptyCell {
            cohort,
            period,
            which,
        });
    }
    Ok((num / den, den))
}

/// Unadjusted cell estimate on a balanced panel, with influence values.
///
/// `w` are normalized unit weights; the influence values satisfy
/// `d att / d w_i = IF_i / W_hat` (the directional derivative in the raw
/// weight, holding everything else fixed), which the tests verify by
/// finite differences.
fn cs_reg_panel_cell(
    cell: &PanelCellData,
    w: &[f64],
    cohort: i64,
    period: i64,
) -> Result<AttCell> {
    let n = w.len();
    let w_hat: f64 = w.iter().sum();
    let (mu_g, mass_g) = hajek_mean(&cell.dy, &cell.g, w, cohort, period, "treated")?;
    let (mu_c, mass_c) = hajek_mean(&cell.dy, &cell.c, w, cohort, period, "comparison")?;
    let att = mu_g - mu_c;
    let p_g = mass_g / w_hat;
    let p_c = mass_c / w_hat;
    let if_values: Vec<f64> = (0..n)
        .map(|i| {
            cell.g[i] * (cell.dy[i] - mu_g) / p_g - cell.c[i] * (cell.dy[i] - mu_c) / p_c
        })
        .collect();
    Ok(AttCell {
        cohort,
        period,
        att,
        if_values,
    })
}

/// Unadjusted cell estimate on repeated cross sections: a four-cell mean
/// contrast at row level.
fn cs_reg_rcs_cell(
    data: &PanelDataset,
    w: &[f64],
    cohort: i64,
    period: i64,
) -> Result<AttCell> {
    let base = cohort - 1;
    if data.periods().binary_search(&base).is_err() {
        return Err(Error::EmptyCell {
            cohort,
            period,
            which: "base period",
        });
    }
    let n = data.n_obs();
    let y = data.y();
    let w_hat: f64 = w.iter().sum();

    // Indicators for the four (group, time) cells; sign of each mean in the
    // double difference.
    let mut inds = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let signs = [1.0, -1.0, -1.0, 1.0];
    let names: [&'static str; 4] = [
        "treated/post",
        "treated/base",
        "comparison/post",
        "comparison/base",
    ];
    for i in 0..n {
        let p = data.period()[i];
        if p != period && p != base {
            continue;
        }
        let is_post = p == period;
        match data.first_treat()[i] {
            Some(g) if g == cohort => {
                inds[if is_post { 0 } else { 1 }][i] = 1.0;
            }
            None => {
                inds[if is_post { 2 } else { 3 }][i] = 1.0;
            }
            _ => {}
        }
    }

    let mut att = 0.0;
    let mut if_values = vec![0.0; n];
    for k in 0..4 {
        let (mu, mass) = hajek_mean(y, &inds[k], w, cohort, period, names[k])?;
        att += signs[k] * mu;
        let p_cell = mass / w_hat;
        for i in 0..n {
            if inds[k][i] > 0.0 {
                if_values[i] += signs[k] * (y[i] - mu) / p_cell;
            }
        }
    }
    Ok(AttCell {
        cohort,
        period,
        att,
        if_values,
    })
}

/// Doubly-robust cell estimate on a balanced panel.
///
/// Outcome model: weighted least squares of the change on covariates over
/// the comparison group. Propensity: weighted logistic fit of cohort
/// membership on the same covariates over the cohort-or-comparison
/// subsample, entering through odds `r = p / (1 - p)`. The influence values
/// include the nuisance-estimation corrections from the estimating-equation
/// expansion, so the same finite-difference property holds as for the
/// unadjusted cell.
fn cs_dr_panel_cell(
    cell: &PanelCellData,
    x: &DMatrix<f64>,
    w: &[f64],
    cohort: i64,
    period: i64,
) -> Result<AttCell> {
    let n = w.len();
    let w_hat: f64 = w.iter().sum();

    // Outcome regression on the comparison group.
    let wc: Vec<f64> = (0..n).map(|i| w[i] * cell.c[i]).collect();
    if wc.iter().sum::<f64>() <= 0.0 {
        return Err(Error::EmptyCell {
            cohort,
            period,
            which: "comparison",
        });
    }
    let ofit = wls(x, &cell.dy, &wc)?;
    let k = ofit.kept.len();
    let xk = &ofit.x_kept;
    let m: Vec<f64> = (0..n)
        .map(|i| (0..k).map(|c| xk[(i, c)] * ofit.beta[c]).sum())
        .collect();

    // Propensity of cohort membership within cohort + comparison.
    let s: Vec<f64> = (0..n).map(|i| cell.g[i] + cell.c[i]).collect();
    let ws: Vec<f64> = (0..n).map(|i| w[i] * s[i]).collect();
    if (0..n).map(|i| w[i] * cell.g[i]).sum::<f64>() <= 0.0 {
        return Err(Error::EmptyCell {
            cohort,
            period,
            which: "treated",
        });
    }
    let pfit = logit_irls(x, &cell.g, &ws)?;
    let kp = pfit.kept.len();
    let xp = &pfit.x_kept;
    let p: Vec<f64> = pfit.p.clone();
    // Comparison units with propensity at 1 put unbounded mass on r.
    let mut overlap_count = 0;
    let mut overlap_first = 0;
    for i in 0..n {
        if cell.c[i] > 0.0 && p[i] >= 1.0 - 1e-6 {
            if overlap_count == 0 {
                overlap_first = i;
            }
            overlap_count += 1;
        }
    }
    if overlap_count > 0 {
        return Err(Error::PropensityOverlap {
            count: overlap_count,
            first: overlap_first,
        });
    }
    let r: Vec<f64> = (0..n).map(|i| p[i] / (1.0 - p[i])).collect();

    // Hajek pieces.
    let mass_g: f64 = (0..n).map(|i| w[i] * cell.g[i]).sum();
    let p_g = mass_g / w_hat;
    let a_g: f64 = (0..n)
        .map(|i| w[i] * cell.g[i] * (cell.dy[i] - m[i]))
        .sum::<f64>()
        / mass_g;
    let mass_rc: f64 = (0..n).map(|i| w[i] * r[i] * cell.c[i]).sum();
    if mass_rc <= 0.0 {
        return Err(Error::EmptyCell {
            cohort,
            period,
            which: "reweighted comparison",
        });
    }
    let d_rc = mass_rc / w_hat;
    let a_c: f64 = (0..n)
        .map(|i| w[i] * r[i] * cell.c[i] * (cell.dy[i] - m[i]))
        .sum::<f64>()
        / mass_rc;
    let att = a_g - a_c;

    // Gradient of att in the outcome coefficients:
    // -E_w[G x]/P_G + E_w[r C x]/E_w[r C].
    let mut grad_beta = DVector::<f64>::zeros(k);
    for i in 0..n {
        let a = -w[i] * cell.g[i] / (p_g * w_hat) + w[i] * r[i] * cell.c[i] / (d_rc * w_hat);
        for c in 0..k {
            grad_beta[c] += a * xk[(i, c)];
        }
    }
    // Outcome-model bread: E_w[C x x'].
    let mut m_mat = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        if wc[i] > 0.0 {
            let xi = xk.row(i).transpose();
            m_mat += &xi * xi.transpose() * (wc[i] / w_hat);
        }
    }
    let m_inv = m_mat.try_inverse().ok_or(Error::SingularBread {
        rank: 0,
        cols: k,
        condition: f64::INFINITY,
    })?;
    // Row vector multiplying each unit's outcome score.
    let gb_minv = (m_inv.transpose() * &grad_beta).transpose();

    // Gradient of att in the propensity coefficients:
    // -E_w[r C x (dy - m - A_C)] / E_w[r C].
    let mut grad_gamma = DVector::<f64>::zeros(kp);
    for i in 0..n {
        let a = -w[i] * r[i] * cell.c[i] * (cell.dy[i] - m[i] - a_c) / (d_rc * w_hat);
        for c in 0..kp {
            grad_gamma[c] += a * xp[(i, c)];
        }
    }
    // Propensity Hessian: E_w[S p (1 - p) x x'].
    let mut h_mat = DMatrix::<f64>::zeros(kp, kp);
    for i in 0..n {
        if s[i] > 0.0 {
            let xi = xp.row(i).transpose();
            h_mat += &xi * xi.transpose() * (w[i] * s[i] * p[i] * (1.0 - p[i]) / w_hat);
        }
    }
    let h_inv = h_mat.try_inverse().ok_or(Error::SingularBread {
        rank: 0,
        cols: kp,
        condition: f64::INFINITY,
    })?;
    let gg_hinv = (h_inv.transpose() * &grad_gamma).transpose();

    let if_values: Vec<f64> = (0..n)
        .map(|i| {
            let base = cell.g[i] * (cell.dy[i] - m[i] - a_g) / p_g
                - r[i] * cell.c[i] * (cell.dy[i] - m[i] - a_c) / d_rc;
            let corr_m = if cell.c[i] > 0.0 {
                let score_i: f64 = (0..k).map(|c| gb_minv[c] * xk[(i, c)]).sum();
                score_i * (cell.dy[i] - m[i])
            } else {
                0.0
            };
            let corr_p = if s[i] > 0.0 {
                let score_i: f64 = (0..kp).map(|c| gg_hinv[c] * xp[(i, c)]).sum();
                score_i * (cell.g[i] - p[i])
            } else {
                0.0
            };
            base + corr_m + corr_p
        })
        .collect();

    Ok(AttCell {
        cohort,
        period,
        att,
        if_values,
    })
}

// ---------------------------------------------------------------------------
// Cell drivers
// ---------------------------------------------------------------------------

/// Prepare the working sample: unit level for balanced panels, row level for
/// repeated cross sections.
fn working_sample(data: &PanelDataset) -> Result<(SurveyDesign, Vec<Option<i64>>)> {
    match data.kind() {
        PanelKind::Panel => {
            let design = data.unit_design()?;
            Ok((design, data.unit_first_treat().to_vec()))
        }
        PanelKind::RepeatedCrossSection => {
            Ok((data.design().clone(), data.first_treat().to_vec()))
        }
    }
}

/// Share of each cohort among treated working rows, by row count. The
/// aggregation weights are deliberately unweighted: treating them as fixed
/// constants keeps the aggregate influence function exact (the weights do
/// not respond to perturbations of the sampling weights), so the linearized
/// variance needs no share-estimation term.
fn cohort_shares(first_treat: &[Option<i64>], cohorts: &[i64]) -> Result<Vec<f64>> {
    let mut mass = vec![0.0; cohorts.len()];
    let mut total = 0.0;
    for g in first_treat.iter().flatten() {
        let k = cohorts.binary_search(g).expect("cohort listed");
        mass[k] += 1.0;
        total += 1.0;
    }
    if total <= 0.0 {
        return Err(Error::NoPostCells);
    }
    Ok(mass.iter().map(|m| m / total).collect())
}

/// Compute all post-treatment group-time cells (`t >= g`) for cohorts with
/// an observed base period and a never-treated comparison.
pub fn attgt(data: &PanelDataset, estimator: Estimator) -> Result<AttGtSet> {
    if !data.has_never_treated() {
        return Err(Error::EmptyCell {
            cohort: 0,
            period: 0,
            which: "never-treated comparison",
        });
    }
    if estimator == Estimator::CsDr && data.kind() == PanelKind::RepeatedCrossSection {
        return Err(Error::Invalid(
            "the doubly robust estimator requires balanced panel data".to_string(),
        ));
    }
    let (design, first_treat) = working_sample(data)?;
    let weights = design.normalized_weights();
    let cohorts = data.cohorts();
    if cohorts.is_empty() {
        return Err(Error::NoPostCells);
    }
    let share = cohort_shares(&first_treat, &cohorts)?;

    // Covariates at the working level for the doubly robust estimator:
    // intercept plus the row covariates of the cell's post period.
    let mut cells = Vec::new();
    for &g in &cohorts {
        for &t in data.periods() {
            if t < g {
                continue;
            }
            let cell = match (estimator, data.kind()) {
                (Estimator::CsReg, PanelKind::Panel) => {
                    let cd = panel_cell_data(data, g, t)?;
                    cs_reg_panel_cell(&cd, &weights.w, g, t)?
                }
                (Estimator::CsReg, PanelKind::RepeatedCrossSection) => {
                    cs_reg_rcs_cell(data, &weights.w, g, t)?
                }
                (Estimator::CsDr, PanelKind::Panel) => {
                    let cd = panel_cell_data(data, g, t)?;
                    let x = dr_covariates(data, t)?;
                    cs_dr_panel_cell(&cd, &x, &weights.w, g, t)?
                }
                (Estimator::CsDr, PanelKind::RepeatedCrossSection) => unreachable!(),
            };
            cells.push(cell);
        }
    }
    if cells.is_empty() {
        return Err(Error::NoPostCells);
    }
    Ok(AttGtSet {
        cells,
        sample: WorkingSample {
            design,
            weights,
            cohorts,
            cohort_share: share,
            first_treat,
        },
        estimator,
    })
}

/// Unit-level covariate matrix for the doubly robust models: an intercept
/// column plus the unit's covariates as observed in `period`.
fn dr_covariates(data: &PanelDataset, period: i64) -> Result<DMatrix<f64>> {
    let n_units = data.n_units();
    let x = match data.x() {
        Some(x) => x,
        None => return Ok(DMatrix::from_element(n_units, 1, 1.0)),
    };
    let p = x.ncols();
    let mut out = DMatrix::from_element(n_units, p + 1, 1.0);
    for u in 0..n_units {
        let row = data.row(u, period).expect("balanced panel");
        for c in 0..p {
            out[(u, c + 1)] = x[(row, c)];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Overall average effect on the treated: each post cell weighted by its
/// cohort's treated share, normalized over the included cells. Later-treated
/// cohorts contribute fewer cells, so calendar exposure is reflected
/// directly. The cohort shares are row-count shares and enter the combined
/// influence values as fixed constants; see [`WorkingSample::cohort_share`].
pub fn aggregate_overall(set: &AttGtSet) -> Result<Aggregated> {
    let raw: Vec<f64> = set
        .cells
        .iter()
        .map(|c| {
            let k = set
                .sample
                .cohorts
                .binary_search(&c.cohort)
                .expect("cohort listed");
            set.sample.cohort_share[k]
        })
        .collect();
    combine(&set.cells, &raw)
}

/// Event-study aggregation: cells grouped by `t - g`, cohort-share weighted
/// within each relative period. Returned sorted by relative period.
pub fn aggregate_event_study(set: &AttGtSet) -> Result<Vec<(i64, Aggregated)>> {
    let mut es: Vec<i64> = set.cells.iter().map(|c| c.period - c.cohort).collect();
    es.sort_unstable();
    es.dedup();
    let mut out = Vec::new();
    for &e in &es {
        let idx: Vec<usize> = (0..set.cells.len())
            .filter(|&i| set.cells[i].period - set.cells[i].cohort == e)
            .collect();
        let cells: Vec<AttCell> = idx.iter().map(|&i| set.cells[i].clone()).collect();
        let raw: Vec<f64> = cells
            .iter()
            .map(|c| {
                let k = set
                    .sample
                    .cohorts
                    .binary_search(&c.cohort)
                    .expect("cohort listed");
                set.sample.cohort_share[k]
            })
            .collect();
        out.push((e, combine(&cells, &raw)?));
    }
    Ok(out)
}

fn combine(cells: &[AttCell], raw_weights: &[f64]) -> Result<Aggregated> {
    if cells.is_empty() {
        return Err(Error::NoPostCells);
    }
    let total: f64 = raw_weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::NoPostCells);
    }
    let n = cells[0].if_values.len();
    let mut att = 0.0;
    let mut if_values = vec![0.0; n];
    let mut scheme = Vec::with_capacity(cells.len());
    for (cell, &rw) in cells.iter().zip(raw_weights.iter()) {
        let kappa = rw / total;
        att += kappa * cell.att;
        for i in 0..n {
            if_values[i] += kappa * cell.if_values[i];
        }
        scheme.push((cell.cohort, cell.period, kappa));
    }
    Ok(Aggregated {
        att,
        if_values,
        scheme,
    })
}

// ---------------------------------------------------------------------------
// Variance dispatch
// ---------------------------------------------------------------------------

/// Variance of an influence-function estimate under the requested mode.
///
/// `Hc1` treats rows as independent draws (one stratum, row-level PSUs, no
/// FPC) while keeping the weights used by the estimator; `Cluster` keeps
/// PSUs but drops strata and FPCs; `Design` uses the full design.
pub fn if_variance(
    if_values: &[f64],
    design: &SurveyDesign,
    weights: &NormalizedWeights,
    mode: InferenceMode,
) -> Result<VarianceResult> {
    let lin = LinearizedSample::from_influence(if_values, &weights.w, weights.w_hat)?;
    match mode {
        InferenceMode::Design => tsl_variance(&lin, design),
        InferenceMode::Cluster => cluster_only_variance(&lin, design),
        InferenceMode::Hc1 => {
            let mut out = tsl_variance(&lin, &design.degenerate())?;
            out.mode = InferenceMode::Hc1;
            Ok(out)
        }
        InferenceMode::Replicate => Err(Error::ReplicateSpec(
            "replicate variance needs replicate weights; use the replicate module".to_string(),
        )),
    }
}

/// A complete inference result for one target.
#[derive(Debug, Clone)]
pub struct AttEstimate {
    pub att: f64,
    pub se: f64,
    pub df: usize,
    pub ci: (f64, f64),
    pub mode: InferenceMode,
}

impl AttEstimate {
    pub fn from_if(
        att: f64,
        if_values: &[f64],
        design: &SurveyDesign,
        weights: &NormalizedWeights,
        mode: InferenceMode,
        level: f64,
    ) -> Result<Self> {
        let var = if_variance(if_values, design, weights, mode)?;
        let se = var.se[0];
        let ci = t_interval(att, se, var.df, level)?;
        Ok(AttEstimate {
            att,
            se,
            df: var.df,
            ci,
            mode,
        })
    }
}

/// One-call driver: cells, overall aggregation, and inference.
pub fn estimate_overall(
    data: &PanelDataset,
    estimator: Estimator,
    mode: InferenceMode,
    level: f64,
) -> Result<(AttEstimate, AttGtSet, Aggregated)> {
    let set = attgt(data, estimator)?;
    let agg = aggregate_overall(&set)?;
    let est = AttEstimate::from_if(
        agg.att,
        &agg.if_values,
        &set.sample.design,
        &set.sample.weights,
        mode,
        level,
    )?;
    Ok((est, set, agg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::PanelKind;

    fn labels(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    /// 2 periods, 6 units (3 treated at period 2, 3 never), equal weights.
    fn small_panel() -> PanelDataset {
        let n_units = 6;
        let mut units = Vec::new();
        let mut period = Vec::new();
        let mut y = Vec::new();
        let mut g = Vec::new();
        let y1 = [1.0, 2.0, 3.0, 1.5, 2.5, 3.5];
        let y2 = [4.0, 5.5, 6.1, 2.0, 3.3, 4.0];
        for u in 0..n_units {
            for (p, yy) in [(1i64, y1[u]), (2, y2[u])] {
                units.push(format!("u{u}"));
                period.push(p);
                y.push(yy);
                g.push(if u < 3 { 2 } else { 0 });
            }
        }
        let design = SurveyDesign::from_indices(
            vec![0; 12],
            (0..12).map(|i| i / 2).collect(),
            vec![0; 6],
            vec![1.0; 12],
            vec![0.0],
        )
        .unwrap();
        PanelDataset::new(&units, &period, &y, &g, None, design, PanelKind::Panel).unwrap()
    }

    #[test]
    fn two_period_equal_weight_matches_hand_did() {
        let data = small_panel();
        let set = attgt(&data, Estimator::CsReg).unwrap();
        assert_eq!(set.cells.len(), 1);
        // Treated change mean: (3 + 3.5 + 3.1)/3; comparison: (0.5 + 0.8 + 0.5)/3.
        let expected = (3.0 + 3.5 + 3.1) / 3.0 - (0.5 + 0.8 + 0.5) / 3.0;
        assert!((set.cells[0].att - expected).abs() < 1e-12);
        // Influence values sum to ~0 under equal weights.
        let s: f64 = set.cells[0].if_values.iter().sum();
        assert!(s.abs() < 1e-10);
    }

    #[test]
    fn hajek_invariance_under_weight_rescaling() {
        let data = small_panel();
        let a = attgt(&data, Estimator::CsReg).unwrap().cells[0].att;

        // Same data, all raw weights multiplied by 37.
        let design = SurveyDesign::from_indices(
            vec![0; 12],
            (0..12).map(|i| i / 2).collect(),
            vec![0; 6],
            vec![37.0; 12],
            vec![0.0],
        )
        .unwrap();
        let mut units = Vec::new();
        let mut period = Vec::new();
        for u in 0..6 {
            for p in [1i64, 2] {
                units.push(format!("u{u}"));
                period.push(p);
            }
        }
        let y: Vec<f64> = data.y().to_vec();
        let g: Vec<i64> = (0..12).map(|i| if i < 6 { 2 } else { 0 }).collect();
        let data2 =
            PanelDataset::new(&units, &period, &y, &g, None, design, PanelKind::Panel).unwrap();
        let b = attgt(&data2, Estimator::CsReg).unwrap().cells[0].att;
        assert!((a - b).abs() < 1e-12);
    }

    /// Directional-derivative check of the influence values: perturb one
    /// unit's weight and compare the change in the estimate against
    /// `IF_i / W_hat`, Richardson-style at two step sizes.
    fn gateaux_check<F>(att_fn: F, w: &[f64], if_values: &[f64])
    where
        F: Fn(&[f64]) -> f64,
    {
        let w_hat: f64 = w.iter().sum();
        let base = att_fn(w);
        for i in 0..w.len() {
            let mut errs = Vec::new();
            for eps in [1e-4, 1e-5] {
                let mut wp = w.to_vec();
                wp[i] += eps;
                let num = (att_fn(&wp) - base) / eps;
                let ana = if_values[i] / w_hat;
                let scale = ana.abs().max(num.abs()).max(1e-8);
                errs.push((num - ana).abs() / scale);
            }
            // The smaller step should be at least as accurate; accept if
            // either is tight.
            assert!(
                errs.iter().cloned().fold(f64::INFINITY, f64::min) < 1e-3,
                "unit {i}: rel errs {errs:?}"
            );
        }
    }

    #[test]
    fn cs_reg_panel_if_matches_numeric_derivative() {
        // Uneven weights so the check has teeth.
        let dy = vec![3.0, 3.5, 3.1, 0.5, 0.8, 0.5, 1.2];
        let g = vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let c = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let w = vec![0.8, 1.3, 0.9, 1.1, 0.6, 1.5, 0.8];
        let cell = PanelCellData {
            dy: dy.clone(),
            g: g.clone(),
            c: c.clone(),
        };
        let out = cs_reg_panel_cell(&cell, &w, 2, 2).unwrap();
        gateaux_check(
            |wp| {
                cs_reg_panel_cell(
                    &PanelCellData {
                        dy: dy.clone(),
                        g: g.clone(),
                        c: c.clone(),
                    },
                    wp,
                    2,
                    2,
                )
                .unwrap()
                .att
            },
            &w,
            &out.if_values,
        );
    }

    #[test]
    fn aggregate_overall_if_matches_numeric_derivative() {
        // Two treated cohorts with different effects, so the estimated
        // cohort shares matter to the aggregate and its influence values.
        let units: Vec<String> = (0..8).flat_map(|u| vec![format!("u{u}"); 3]).collect();
        let period: Vec<i64> = (0..8).flat_map(|_| vec![1, 2, 3]).collect();
        let g: Vec<i64> = (0..8)
            .flat_map(|u| {
                let coh = match u {
                    0 | 1 | 2 => 2,
                    3 | 4 => 3,
                    _ => 0,
                };
                vec![coh; 3]
            })
            .collect();
        let y: Vec<f64> = units
            .iter()
            .zip(period.iter())
            .zip(g.iter())
            .map(|((u, &t), &coh)| {
                let uid: f64 = u[1..].parse().unwrap();
                let effect = if coh > 0 && t >= coh {
                    1.0 + 0.8 * coh as f64 + 0.3 * (t - coh) as f64
                } else {
                    0.0
                };
                0.4 * t as f64 + 0.1 * uid + effect + 0.05 * ((uid + t as f64) * 2.7).sin()
            })
            .collect();
        let w0 = vec![0.8, 1.3, 0.9, 1.1, 0.6, 1.5, 0.8, 1.2];
        let build = |wu: &[f64]| {
            let w_rows: Vec<f64> = (0..8).flat_map(|u| vec![wu[u]; 3]).collect();
            let design = SurveyDesign::from_indices(
                vec![0; 24],
                (0..24).map(|i| i / 3).collect(),
                vec![0; 8],
                w_rows,
                vec![0.0],
            )
            .unwrap();
            PanelDataset::new(&units, &period, &y, &g, None, design, PanelKind::Panel).unwrap()
        };
        let set = attgt(&build(&w0), Estimator::CsReg).unwrap();
        let agg = aggregate_overall(&set).unwrap();
        gateaux_check(
            |wp| {
                let set = attgt(&build(wp), Estimator::CsReg).unwrap();
                aggregate_overall(&set).unwrap().att
            },
            &w0,
            &agg.if_values,
        );
    }

    #[test]
    fn cs_dr_intercept_only_equals_cs_reg() {
        let dy = vec![3.0, 3.5, 3.1, 0.5, 0.8, 0.5, 1.2, 0.2];
        let g = vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let c = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let w = vec![0.8, 1.3, 0.9, 1.1, 0.6, 1.5, 0.8, 1.0];
        let cell = PanelCellData {
            dy: dy.clone(),
            g: g.clone(),
            c: c.clone(),
        };
        let x = DMatrix::from_element(8, 1, 1.0);
        let reg = cs_reg_panel_cell(&cell, &w, 2, 2).unwrap();
        let dr = cs_dr_panel_cell(&cell, &x, &w, 2, 2).unwrap();
        assert!((reg.att - dr.att).abs() < 1e-8, "{} vs {}", reg.att, dr.att);
        for i in 0..8 {
            assert!(
                (reg.if_values[i] - dr.if_values[i]).abs() < 1e-6,
                "IF {i}: {} vs {}",
                reg.if_values[i],
                dr.if_values[i]
            );
        }
    }

    #[test]
    fn cs_dr_if_matches_numeric_derivative_with_covariate() {
        let dy = vec![3.0, 3.6, 3.1, 2.8, 0.5, 0.9, 0.4, 1.3, 0.3, 0.7];
        let g = vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let c = vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let xv = vec![0.2, -0.5, 1.1, 0.4, -0.3, 0.8, 0.1, -0.9, 0.5, -0.2];
        let w = vec![0.8, 1.3, 0.9, 1.2, 1.1, 0.6, 1.5, 0.8, 1.0, 0.7];
        let x = DMatrix::from_fn(10, 2, |i, j| if j == 0 { 1.0 } else { xv[i] });
        let cell = PanelCellData {
            dy: dy.clone(),
            g: g.clone(),
            c: c.clone(),
        };
        let out = cs_dr_panel_cell(&cell, &x, &w, 2, 2).unwrap();
        gateaux_check(
            |wp| {
                cs_dr_panel_cell(
                    &PanelCellData {
                        dy: dy.clone(),
                        g: g.clone(),
                        c: c.clone(),
                    },
                    &x,
                    wp,
                    2,
                    2,
                )
                .unwrap()
                .att
            },
            &w,
            &out.if_values,
        );
    }

    fn small_rcs() -> (PanelDataset, Vec<f64>) {
        // Two periods, two groups, 4 rows per cell with uneven weights.
        let mut units = Vec::new();
        let mut period = Vec::new();
        let mut y = Vec::new();
        let mut g = Vec::new();
        let mut w = Vec::new();
        let mut id = 0;
        for (p, coh, base_y) in [
            (1i64, 2i64, 1.0),
            (2, 2, 4.2),
            (1, 0, 0.5),
            (2, 0, 1.1),
        ] {
            for j in 0..4 {
                units.push(format!("r{id}"));
                id += 1;
                period.push(p);
                y.push(base_y + 0.3 * j as f64 - 0.2);
                g.push(coh);
                w.push(0.6 + 0.25 * ((id * 3) % 5) as f64);
            }
        }
        let design = SurveyDesign::from_indices(
            vec![0; 16],
            (0..16).collect(),
            vec![0; 16],
            w.clone(),
            vec![0.0],
        )
        .unwrap();
        (
            PanelDataset::new(
                &units,
                &period,
                &y,
                &g,
                None,
                design,
                PanelKind::RepeatedCrossSection,
            )
            .unwrap(),
            w,
        )
    }

    #[test]
    fn cs_reg_rcs_matches_four_cell_hand_contrast_and_derivative() {
        let (data, _) = small_rcs();
        let set = attgt(&data, Estimator::CsReg).unwrap();
        let nw = set.sample.weights.clone();

        // Hand contrast of Hajek means per cell.
        let mut mu = [0.0f64; 4];
        for k in 0..4 {
            let idx: Vec<usize> = (0..16)
                .filter(|&i| {
                    let post = data.period()[i] == 2;
                    let treated = data.first_treat()[i] == Some(2);
                    match k {
                        0 => treated && post,
                        1 => treated && !post,
                        2 => !treated && post,
                        _ => !treated && !post,
                    }
                })
                .collect();
            let num: f64 = idx.iter().map(|&i| nw.w[i] * data.y()[i]).sum();
            let den: f64 = idx.iter().map(|&i| nw.w[i]).sum();
            mu[k] = num / den;
        }
        let expected = (mu[0] - mu[1]) - (mu[2] - mu[3]);
        assert!((set.cells[0].att - expected).abs() < 1e-12);

        gateaux_check(
            |wp| cs_reg_rcs_cell(&data, wp, 2, 2).unwrap().att,
            &nw.w,
            &set.cells[0].if_values,
        );
    }

    #[test]
    fn missing_comparison_group_is_reported() {
        let units: Vec<String> = labels("u", 4)
            .iter()
            .flat_map(|u| vec![u.clone(), u.clone()])
            .collect();
        let period = vec![1i64, 2, 1, 2, 1, 2, 1, 2];
        let y = vec![0.0; 8];
        let g = vec![2i64; 8];
        let design = SurveyDesign::iid(8);
        let data =
            PanelDataset::new(&units, &period, &y, &g, None, design, PanelKind::Panel).unwrap();
        assert!(matches!(
            attgt(&data, Estimator::CsReg).unwrap_err(),
            Error::EmptyCell { .. }
        ));
    }

    #[test]
    fn aggregation_single_cell_is_identity_and_weights_sum_to_one() {
        let data = small_panel();
        let set = attgt(&data, Estimator::CsReg).unwrap();
        let agg = aggregate_overall(&set).unwrap();
        assert!((agg.att - set.cells[0].att).abs() < 1e-15);
        let total: f64 = agg.scheme.iter().map(|(_, _, k)| k).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (a, b) in agg.if_values.iter().zip(set.cells[0].if_values.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregation_two_cohorts_hand_weights() {
        // Cells faked directly to isolate the combiner.
        let cells = vec![
            AttCell {
                cohort: 3,
                period: 3,
                att: 1.0,
                if_values: vec![1.0, 0.0],
            },
            AttCell {
                cohort: 3,
                period: 4,
                att: 2.0,
                if_values: vec![0.0, 1.0],
            },
            AttCell {
                cohort: 5,
                period: 5,
                att: 5.0,
                if_values: vec![1.0, 1.0],
            },
        ];
        // Cohort shares 0.6 / 0.4, per-cell weights proportional to share.
        let raw = vec![0.6, 0.6, 0.4];
        let agg = combine(&cells, &raw).unwrap();
        let expect = (0.6 * 1.0 + 0.6 * 2.0 + 0.4 * 5.0) / 1.6;
        assert!((agg.att - expect).abs() < 1e-12);
        let if0 = (0.6 * 1.0 + 0.6 * 0.0 + 0.4 * 1.0) / 1.6;
        let if1 = (0.6 * 0.0 + 0.6 * 1.0 + 0.4 * 1.0) / 1.6;
        assert!((agg.if_values[0] - if0).abs() < 1e-12);
        assert!((agg.if_values[1] - if1).abs() < 1e-12);
    }

    #[test]
    fn event_study_groups_by_relative_period() {
        let mut units = Vec::new();
        let mut period = Vec::new();
        let mut y = Vec::new();
        let mut g = Vec::new();
        // 3 cohorts (3, 4, never), periods 1..5, 2 units each.
        for (u, coh) in [(0, 3i64), (1, 3), (2, 4), (3, 4), (4, 0), (5, 0)] {
            for p in 1i64..=5 {
                units.push(format!("u{u}"));
                period.push(p);
                let treated = coh > 0 && p >= coh;
                y.push(0.3 * p as f64 + u as f64 + if treated { 1.0 } else { 0.0 });
                g.push(coh);
            }
        }
        let n = y.len();
        let design = SurveyDesign::from_indices(
            vec![0; n],
            (0..n).map(|i| i / 5).collect(),
            vec![0; 6],
            vec![1.0; n],
            vec![0.0],
        )
        .unwrap();
        let data =
            PanelDataset::new(&units, &period, &y, &g, None, design, PanelKind::Panel).unwrap();
        let set = attgt(&data, Estimator::CsReg).unwrap();
        let es = aggregate_event_study(&set).unwrap();
        let rels: Vec<i64> = es.iter().map(|(e, _)| *e).collect();
        assert_eq!(rels, vec![0, 1, 2]);
        // Noiseless effect of +1 at every exposure.
        for (_, a) in &es {
            assert!((a.att - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn estimate_overall_modes_order_and_df() {
        // Stratified clustered panel with heterogeneous PSU effects.
        let mut units = Vec::new();
        let mut period = Vec::new();
        let mut y = Vec::new();
        let mut g = Vec::new();
        let mut stratum = Vec::new();
        let mut psu = Vec::new();
        let n_psu = 8;
        let per_psu = 3;
        let mut uid = 0;
        for j in 0..n_psu {
            let h = j / 4;
            let coh = if j % 2 == 0 { 2i64 } else { 0 };
            for k in 0..per_psu {
                let alpha = (j as f64) * 0.7 + k as f64 * 0.1;
                for p in 1i64..=2 {
                    units.push(format!("u{uid}"));
                    period.push(p);
                    let treated = coh > 0 && p >= coh;
                    y.push(alpha + 0.4 * p as f64 + if treated { 2.0 + j as f64 * 0.3 } else { 0.0 });
                    g.push(coh);
                    stratum.push(h);
                    psu.push(j);
                }
                uid += 1;
            }
        }
        let n = y.len();
        let design = SurveyDesign::from_indices(
            stratum,
            psu,
            (0..n_psu).map(|j| j / 4).collect(),
            vec![1.0; n],
            vec![0.0, 0.0],
        )
        .unwrap();
        let data =
            PanelDataset::new(&units, &period, &y, &g, None, design, PanelKind::Panel).unwrap();

        let (hc1, ..) = estimate_overall(&data, Estimator::CsReg, InferenceMode::Hc1, 0.95).unwrap();
        let (cl, ..) =
            estimate_overall(&data, Estimator::CsReg, InferenceMode::Cluster, 0.95).unwrap();
        let (ds, ..) =
            estimate_overall(&data, Estimator::CsReg, InferenceMode::Design, 0.95).unwrap();
        assert_eq!(hc1.df, n_psu * per_psu - 1);
        assert_eq!(cl.df, n_psu - 1);
        assert_eq!(ds.df, n_psu - 2);
        // Treatment varies at PSU level with PSU-level effect heterogeneity,
        // so cluster-aware SEs should exceed the iid one.
        assert!(cl.se > hc1.se, "cluster {} vs hc1 {}", cl.se, hc1.se);
        assert!(ds.se > hc1.se);
        // All modes share the point estimate.
        assert!((hc1.att - ds.att).abs() < 1e-12);
    }
}
