//! Monte Carlo driver: repeated generation and estimation over a scenario,
//! summarizing bias, coverage, design effects, and RMSE per inference mode.
//!
//! Each replication fits the estimator three ways: unweighted with an
//! iid-style (HC1) variance, weighted with a cluster-only variance, and
//! weighted with the full stratified-cluster design variance. The design
//! effect compares the design-based variance of the weighted fit with the
//! naive variance of the unweighted fit.

use rayon::prelude::*;

use crate::att::{aggregate_overall, attgt, AttEstimate, Estimator};
use crate::error::{Error, Result};
use crate::eventreg::{sun_abraham, twfe};
use crate::panel::PanelDataset;
use crate::simdgp::{generate, ScenarioConfig};
use crate::tsl::InferenceMode;

/// Estimators the harness can drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarnessEstimator {
    CsReg,
    CsDr,
    SunAbraham,
    Twfe,
}

impl std::fmt::Display for HarnessEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HarnessEstimator::CsReg => "cs_reg",
            HarnessEstimator::CsDr => "cs_dr",
            HarnessEstimator::SunAbraham => "sun_abraham",
            HarnessEstimator::Twfe => "twfe",
        })
    }
}

impl std::str::FromStr for HarnessEstimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cs_reg" => Ok(HarnessEstimator::CsReg),
            "cs_dr" => Ok(HarnessEstimator::CsDr),
            "sun_abraham" => Ok(HarnessEstimator::SunAbraham),
            "twfe" => Ok(HarnessEstimator::Twfe),
            other => Err(Error::Invalid(format!("unknown estimator '{other}'"))),
        }
    }
}

/// One interval fit: estimate, standard error, degrees of freedom, CI.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FitRecord {
    pub att: f64,
    pub se: f64,
    pub df: usize,
    pub lo: f64,
    pub hi: f64,
}

impl From<AttEstimate> for FitRecord {
    fn from(e: AttEstimate) -> Self {
        FitRecord {
            att: e.att,
            se: e.se,
            df: e.df,
            lo: e.ci.0,
            hi: e.ci.1,
        }
    }
}

/// Everything recorded for one replication. Metrics are pure functions of
/// these records, so persisting and re-reading them reproduces the report.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    /// Unweighted fit with iid-style variance.
    pub hc1: FitRecord,
    /// Weighted fit, PSU-cluster variance.
    pub cluster: FitRecord,
    /// Weighted fit, full design variance.
    pub design: FitRecord,
}

/// Aggregated Monte Carlo metrics for one (scenario, estimator, n) cell.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CellReport {
    pub scenario: String,
    pub estimator: String,
    pub n: usize,
    pub reps: usize,
    pub failures: usize,
    pub truth: f64,
    pub bias_weighted: f64,
    pub bias_unweighted: f64,
    pub rmse_weighted: f64,
    pub rmse_unweighted: f64,
    /// Coverage percentages of the truth, per inference mode.
    pub coverage_hc1: f64,
    pub coverage_cluster: f64,
    pub coverage_design: f64,
    /// Monte Carlo standard error of a coverage percentage near 95%.
    pub coverage_mc_se: f64,
    /// Median across replications of V_design / V_hc1.
    pub deff_median: f64,
}

fn counter_seed(master: u64, rep: usize) -> u64 {
    // SplitMix64 step over (master + rep): decorrelated, deterministic, and
    // independent of execution order.
    let mut z = master.wrapping_add((rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fit_three_ways(
    data: &PanelDataset,
    estimator: HarnessEstimator,
    level: f64,
) -> Result<(FitRecord, FitRecord, FitRecord)> {
    let unweighted = data.unweighted_copy();
    match estimator {
        HarnessEstimator::CsReg | HarnessEstimator::CsDr => {
            let which = if estimator == HarnessEstimator::CsReg {
                Estimator::CsReg
            } else {
                Estimator::CsDr
            };
            // Weighted cells once; two variance modes on the same IFs.
            let set = attgt(data, which)?;
            let agg = aggregate_overall(&set)?;
            let cl = AttEstimate::from_if(
                agg.att,
                &agg.if_values,
                &set.sample.design,
                &set.sample.weights,
                InferenceMode::Cluster,
                level,
            )?;
            let ds = AttEstimate::from_if(
                agg.att,
                &agg.if_values,
                &set.sample.design,
                &set.sample.weights,
                InferenceMode::Design,
                level,
            )?;
            let uset = attgt(&unweighted, which)?;
            let uagg = aggregate_overall(&uset)?;
            let hc = AttEstimate::from_if(
                uagg.att,
                &uagg.if_values,
                &uset.sample.design,
                &uset.sample.weights,
                InferenceMode::Hc1,
                level,
            )?;
            Ok((hc.into(), cl.into(), ds.into()))
        }
        HarnessEstimator::Twfe => {
            let cl = twfe(data, InferenceMode::Cluster, level)?;
            let ds = twfe(data, InferenceMode::Design, level)?;
            let hc = twfe(&unweighted, InferenceMode::Hc1, level)?;
            let to = |e: crate::eventreg::RegressionEstimate| FitRecord {
                att: e.att,
                se: e.se,
                df: e.df,
                lo: e.ci.0,
                hi: e.ci.1,
            };
            Ok((to(hc), to(cl), to(ds)))
        }
        HarnessEstimator::SunAbraham => {
            let cl = sun_abraham(data, InferenceMode::Cluster, level)?.overall;
            let ds = sun_abraham(data, InferenceMode::Design, level)?.overall;
            let hc = sun_abraham(&unweighted, InferenceMode::Hc1, level)?.overall;
            let to = |e: crate::eventreg::RegressionEstimate| FitRecord {
                att: e.att,
                se: e.se,
                df: e.df,
                lo: e.ci.0,
                hi: e.ci.1,
            };
            Ok((to(hc), to(cl), to(ds)))
        }
    }
}

/// Run one replication: generate and fit.
pub fn run_rep(
    cfg: &ScenarioConfig,
    estimator: HarnessEstimator,
    rep: usize,
    master_seed: u64,
    level: f64,
) -> Result<RepRecord> {
    let seed = counter_seed(master_seed, rep);
    let data = generate(cfg, seed)?;
    let (hc1, cluster, design) = fit_three_ways(&data, estimator, level)?;
    Ok(RepRecord {
        rep,
        seed,
        hc1,
        cluster,
        design,
    })
}

/// Run a full Monte Carlo cell. Replications are independent and run in
/// parallel; the result is identical to a serial run because seeds are
/// fixed per replication and the reduction only counts and sums.
pub fn run_cell(
    cfg: &ScenarioConfig,
    estimator: HarnessEstimator,
    reps: usize,
    master_seed: u64,
) -> Result<CellReport> {
    let (records, failures) = run_cell_records(cfg, estimator, reps, master_seed)?;
    Ok(report_from_records(cfg, estimator, reps, failures, &records))
}

/// The raw replication records of a cell (in replication order) plus the
/// failure count, for callers that persist the record stream.
pub fn run_cell_records(
    cfg: &ScenarioConfig,
    estimator: HarnessEstimator,
    reps: usize,
    master_seed: u64,
) -> Result<(Vec<RepRecord>, usize)> {
    if reps == 0 {
        return Err(Error::Invalid("reps must be at least 1".to_string()));
    }
    let level = 0.95;
    let results: Vec<Result<RepRecord>> = (0..reps)
        .into_par_iter()
        .map(|rep| run_rep(cfg, estimator, rep, master_seed, level))
        .collect();
    let mut records = Vec::with_capacity(reps);
    let mut failures = 0usize;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(_) => failures += 1,
        }
    }
    // Hard cap on silent failure: more than 1% invalidates the cell.
    if failures * 100 > reps {
        return Err(Error::TooManyFailures { failures, reps });
    }
    Ok((records, failures))
}

/// Pure aggregation of replication records into the cell metrics.
pub fn report_from_records(
    cfg: &ScenarioConfig,
    estimator: HarnessEstimator,
    reps: usize,
    failures: usize,
    records: &[RepRecord],
) -> CellReport {
    let truth = cfg.true_att();
    let m = records.len() as f64;
    let mean = |f: &dyn Fn(&RepRecord) -> f64| records.iter().map(|r| f(r)).sum::<f64>() / m;
    let bias_weighted = mean(&|r| r.design.att) - truth;
    let bias_unweighted = mean(&|r| r.hc1.att) - truth;
    let rmse = |f: &dyn Fn(&RepRecord) -> f64| {
        (records
            .iter()
            .map(|r| (f(r) - truth) * (f(r) - truth))
            .sum::<f64>()
            / m)
            .sqrt()
    };
    let coverage = |f: &dyn Fn(&RepRecord) -> (f64, f64)| {
        100.0
            * records
                .iter()
                .filter(|r| {
                    let (lo, hi) = f(r);
                    lo <= truth && truth <= hi
                })
                .count() as f64
            / m
    };
    let mut deffs: Vec<f64> = records
        .iter()
        .map(|r| (r.design.se * r.design.se) / (r.hc1.se * r.hc1.se))
        .collect();
    deffs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let deff_median = if deffs.is_empty() {
        f64::NAN
    } else if deffs.len() % 2 == 1 {
        deffs[deffs.len() / 2]
    } else {
        (deffs[deffs.len() / 2 - 1] + deffs[deffs.len() / 2]) / 2.0
    };

    CellReport {
        scenario: cfg.id.to_string(),
        estimator: estimator.to_string(),
        n: cfg.n,
        reps,
        failures,
        truth,
        bias_weighted,
        bias_unweighted,
        rmse_weighted: rmse(&|r| r.design.att),
        rmse_unweighted: rmse(&|r| r.hc1.att),
        coverage_hc1: coverage(&|r| (r.hc1.lo, r.hc1.hi)),
        coverage_cluster: coverage(&|r| (r.cluster.lo, r.cluster.hi)),
        coverage_design: coverage(&|r| (r.design.lo, r.design.hi)),
        coverage_mc_se: 100.0 * (0.95f64 * 0.05 / m).sqrt(),
        deff_median,
    }
}

/// Fixed-width text table over cells, one row per cell, plus a helper to
/// serialize the records stream.
pub fn render_report(cells: &[CellReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<9} {:<12} {:>6} {:>5} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7}\n",
        "scenario",
        "estimator",
        "n",
        "reps",
        "fail",
        "bias_w",
        "bias_u",
        "rmse_w",
        "cov_hc1",
        "cov_cl",
        "cov_des",
        "deff"
    ));
    let fmt = |v: f64| {
        if v.is_finite() {
            format!("{v:.3}")
        } else {
            "\u{2014}".to_string()
        }
    };
    for c in cells {
        out.push_str(&format!(
            "{:<9} {:<12} {:>6} {:>5} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7}\n",
            c.scenario,
            c.estimator,
            c.n,
            c.reps,
            c.failures,
            fmt(c.bias_weighted),
            fmt(c.bias_unweighted),
            fmt(c.rmse_weighted),
            fmt(c.coverage_hc1),
            fmt(c.coverage_cluster),
            fmt(c.coverage_design),
            fmt(c.deff_median),
        ));
    }
    out
}
