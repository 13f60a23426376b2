//! Stratified, clustered, staggered-adoption data generator for the Monte
//! Carlo study.
//!
//! The outcome model is
//! `Y_it = alpha_i + gamma_p + eta_pt + 0.5 t + 0.5 x1_i + 0.3 x2_i + tau_it + eps_it`
//! with unit effects, PSU effects, PSU-by-period shocks, and idiosyncratic
//! noise. Treatment adoption is assigned at the PSU level (cohorts first
//! treated at periods 3 and 5, plus never-treated PSUs), which is what makes
//! naive variance estimators fail: the treatment indicator is constant
//! within PSU, so effective clustering is severe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use nalgebra::DMatrix;

use crate::design::SurveyDesign;
use crate::error::{Error, Result};
use crate::panel::{PanelDataset, PanelKind};

pub const N_STRATA: usize = 5;
pub const PSUS_PER_STRATUM: usize = 8;
pub const N_PSUS: usize = N_STRATA * PSUS_PER_STRATUM;
/// Population PSUs per stratum; 8 sampled of 200 gives `f_h = 0.04`.
pub const POP_PSUS_PER_STRATUM: f64 = 200.0;
pub const T_PERIODS: i64 = 8;

/// First-treat period by PSU position within a stratum (0 = never treated):
/// 3 early-cohort PSUs, 3 late, 2 never per stratum.
const COHORT_PATTERN: [i64; PSUS_PER_STRATUM] = [3, 5, 0, 3, 5, 0, 3, 5];

/// Dynamic treatment effect `tau(e) = TAU_A + TAU_B * e` at exposure
/// `e = t - g`. The constants solve two conditions exactly: the
/// cohort-share weighted average over post cells equals 2.0 (mean exposure
/// 2.1 under this adoption pattern), and the static two-way fixed-effects
/// coefficient on noiseless data equals 0.314, i.e. a contamination bias of
/// -1.686 from its implicit exposure weighting (weight 39/46 on the slope).
pub const TAU_A: f64 = -0.8275625;
pub const TAU_B: f64 = 1.3464583333333333;
/// Cohort-share weighted mean exposure over post cells.
pub const MEAN_EXPOSURE: f64 = 2.1;

/// Geometric spacing ratio of the stratum base weights.
const WEIGHT_RATIO: f64 = 1.25;
/// Stratum multipliers on `tau` in the heterogeneous scenario; the
/// population-share weighted mean is 1.2989 (truth ~2.598) while the
/// unweighted mean is 1.205, so ignoring the weights biases the estimate by
/// about -0.19.
const S2_MULTIPLIERS: [f64; N_STRATA] = [0.3, 1.6, 1.35, 1.075, 1.7];

/// Lognormal sigma of the within-stratum weight jitter; combined with the
/// geometric base spacing this yields total weight CV of about 0.5.
const JITTER_SD_BASE: f64 = 0.3612;
/// Lognormal sigma of the PSU-level weight factor in the informative
/// scenario (PSU-level CV ~0.6; with the unit jitter and the
/// stratum spacing, total weight CV ~0.6-0.7). Putting the heavy weight
/// variation at the PSU level is what produces the large, sample-size-free
/// design effects of that scenario: random PSU weight masses shift the
/// stratum composition of the weighted estimate, which matters once
/// treatment effects differ across strata.
const PSU_JITTER_SD_INFORMATIVE: f64 = 0.55;
/// Correlation between the weight jitter and the outcome effect at the same
/// level (unit jitter with the unit effect, PSU factor with the PSU effect)
/// when sampling is informative: heavier weights go to higher-outcome units.
const INFORMATIVE_RHO: f64 = 0.9;
/// Per-PSU treatment-effect multiplier SD in the heterogeneous scenario:
/// clusters respond with different strength around their stratum mean.
const PSU_TAU_SD_S2: f64 = 0.3;

/// Scenario identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioId {
    S1,
    S2,
    S3,
    S4,
}

impl std::fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScenarioId::S1 => "s1",
            ScenarioId::S2 => "s2",
            ScenarioId::S3 => "s3",
            ScenarioId::S4 => "s4",
        })
    }
}

impl std::str::FromStr for ScenarioId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s1" => Ok(ScenarioId::S1),
            "s2" => Ok(ScenarioId::S2),
            "s3" => Ok(ScenarioId::S3),
            "s4" => Ok(ScenarioId::S4),
            other => Err(Error::Invalid(format!("unknown scenario '{other}'"))),
        }
    }
}

/// Full generator configuration. The presets encode the four study
/// scenarios; every knob is public so tests can build degenerate cases
/// (zero variance components, null effects).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ScenarioConfig {
    pub id: ScenarioId,
    /// Units for panels; total rows for repeated cross sections.
    pub n: usize,
    pub kind: PanelKind,
    pub sigma_alpha: f64,
    pub sigma_gamma: f64,
    pub sigma_eta: f64,
    pub sigma_eps: f64,
    /// Lognormal sigma of the unit-level weight jitter.
    pub jitter_sd: f64,
    /// Lognormal sigma of the PSU-level weight factor (0 = none).
    pub psu_jitter_sd: f64,
    /// SD of the mean-one per-PSU treatment-effect multiplier (0 = none).
    pub psu_tau_sd: f64,
    /// Correlate weight jitter with the outcome effects.
    pub informative: bool,
    /// Stratum multipliers on tau (None = homogeneous).
    pub multipliers: Option<[f64; N_STRATA]>,
    /// Coefficient of the `x1 * t/T` differential-trend confounder.
    pub delta: f64,
    /// Mean shift of x1 for treated units.
    pub x1_treated_shift: f64,
    /// Scale on the dynamic effect (1 = calibrated tau; 0 = null).
    pub tau_scale: f64,
}

impl ScenarioConfig {
    fn base(id: ScenarioId, n: usize) -> Self {
        // sigma_gamma^2 + sigma_eta^2 = 0.26: with unit effects of
        // variance 1, covariate variance 0.34, and noise variance 1 the
        // within-PSU ICC is 0.26 / 2.6 = 0.10. The split between the two
        // is calibrated separately: the static PSU effect differences out
        // of the estimators, so only the PSU-by-period shock drives the
        // design effect of the difference-in-differences contrasts.
        ScenarioConfig {
            id,
            n,
            kind: PanelKind::Panel,
            sigma_alpha: 1.0,
            sigma_gamma: 0.18f64.sqrt(),
            sigma_eta: 0.08f64.sqrt(),
            sigma_eps: 1.0,
            jitter_sd: JITTER_SD_BASE,
            psu_jitter_sd: 0.0,
            psu_tau_sd: 0.0,
            informative: false,
            multipliers: None,
            delta: 0.0,
            x1_treated_shift: 0.0,
            tau_scale: 1.0,
        }
    }

    /// Baseline: clustered adoption, moderately unequal noninformative
    /// weights, homogeneous dynamic effects.
    pub fn s1(n: usize) -> Self {
        Self::base(ScenarioId::S1, n)
    }

    /// Informative weights and stratum-heterogeneous effects.
    pub fn s2(n: usize) -> Self {
        let mut c = Self::base(ScenarioId::S2, n);
        c.psu_jitter_sd = PSU_JITTER_SD_INFORMATIVE;
        c.psu_tau_sd = PSU_TAU_SD_S2;
        c.informative = true;
        c.multipliers = Some(S2_MULTIPLIERS);
        c
    }

    /// Repeated cross sections: fresh units each period within fixed PSUs.
    pub fn s3(n: usize) -> Self {
        let mut c = Self::base(ScenarioId::S3, n);
        c.kind = PanelKind::RepeatedCrossSection;
        // Stronger cluster-period shocks: with fresh units each period the
        // unit effects no longer difference out, so without this the shared
        // PSU-period component would be a negligible slice of the row
        // variance and the iid variance estimator would look nearly fine.
        c.sigma_eta = 0.40f64.sqrt();
        c
    }

    /// Covariate-dependent trends: treated units have higher x1, and x1
    /// shifts the outcome trend, so the unadjusted estimator is biased
    /// while the doubly robust one is not.
    pub fn s4(n: usize) -> Self {
        let mut c = Self::base(ScenarioId::S4, n);
        c.delta = 1.5;
        c.x1_treated_shift = 1.0;
        // Smaller cluster-period shocks: this scenario contrasts bias
        // against sampling noise, and needs the noise floor low enough for
        // the bias to dominate the unadjusted estimator's error.
        c.sigma_eta = 0.035f64.sqrt();
        c
    }

    /// Exact population-weighted mean of the dynamic effect over post
    /// cells: the estimand every weighted estimator targets.
    pub fn true_att(&self) -> f64 {
        let base = self.tau_scale * (TAU_A + MEAN_EXPOSURE * TAU_B);
        match &self.multipliers {
            None => base,
            Some(m) => {
                let shares = stratum_shares();
                base * shares.iter().zip(m.iter()).map(|(s, m)| s * m).sum::<f64>()
            }
        }
    }
}

/// Population share of each stratum implied by the geometric base weights
/// with equal sample allocation.
pub fn stratum_shares() -> [f64; N_STRATA] {
    let mut w = [0.0; N_STRATA];
    let mut total = 0.0;
    for (h, slot) in w.iter_mut().enumerate() {
        *slot = WEIGHT_RATIO.powi(h as i32);
        total += *slot;
    }
    for slot in w.iter_mut() {
        *slot /= total;
    }
    w
}

/// First-treat period of a PSU (0 = never).
fn psu_cohort(psu: usize) -> i64 {
    COHORT_PATTERN[psu % PSUS_PER_STRATUM]
}


fn psu_stratum_of(psu: usize) -> usize {
    psu / PSUS_PER_STRATUM
}

/// Spread `m` units over the 40 PSUs: an even base plus a remainder
/// distributed in a cohort-cycling order, keeping the early/late cohort
/// unit counts equal so the aggregate estimand is undisturbed.
pub fn allocate_units(m: usize) -> Result<Vec<usize>> {
    if m < N_PSUS {
        return Err(Error::InfeasibleAllocation(format!(
            "{m} units cannot cover {N_PSUS} PSUs"
        )));
    }
    let base = m / N_PSUS;
    let rem = m - base * N_PSUS;
    let mut counts = vec![base; N_PSUS];
    // Cohort-cycling order over PSU indices.
    let mut by_cohort: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for p in 0..N_PSUS {
        let k = match psu_cohort(p) {
            3 => 0,
            5 => 1,
            _ => 2,
        };
        by_cohort[k].push(p);
    }
    let mut order = Vec::with_capacity(N_PSUS);
    let mut idx = [0usize; 3];
    let mut k = 0;
    while order.len() < N_PSUS {
        let c = k % 3;
        k += 1;
        if idx[c] < by_cohort[c].len() {
            order.push(by_cohort[c][idx[c]]);
            idx[c] += 1;
        }
    }
    for &p in order.iter().take(rem) {
        counts[p] += 1;
    }
    Ok(counts)
}

struct UnitDraw {
    alpha: f64,
    x1: f64,
    x2: f64,
    weight: f64,
}

fn draw_unit(
    cfg: &ScenarioConfig,
    rng: &mut ChaCha20Rng,
    stratum: usize,
    treated: bool,
    base_weight: f64,
) -> UnitDraw {
    let z_alpha: f64 = rng.sample::<f64, _>(StandardNormal);
    let alpha = cfg.sigma_alpha * z_alpha;
    let x1_mean = if treated { cfg.x1_treated_shift } else { 0.0 };
    let x1: f64 = x1_mean + rng.sample::<f64, _>(StandardNormal);
    let x2: f64 = rng.sample::<f64, _>(StandardNormal);
    let z_j: f64 = rng.sample::<f64, _>(StandardNormal);
    let z_w = if cfg.informative {
        INFORMATIVE_RHO * z_alpha + (1.0 - INFORMATIVE_RHO * INFORMATIVE_RHO).sqrt() * z_j
    } else {
        z_j
    };
    // Mean-one lognormal jitter so stratum shares stay calibrated.
    let jitter = (cfg.jitter_sd * z_w - 0.5 * cfg.jitter_sd * cfg.jitter_sd).exp();
    let _ = stratum;
    UnitDraw {
        alpha,
        x1,
        x2,
        weight: base_weight * jitter,
    }
}

/// Outcome for one unit-period row.
#[allow(clippy::too_many_arguments)]
fn outcome(
    cfg: &ScenarioConfig,
    rng: &mut ChaCha20Rng,
    unit: &UnitDraw,
    gamma: f64,
    eta: f64,
    stratum: usize,
    tau_mult: f64,
    cohort: i64,
    t: i64,
) -> f64 {
    let tau = if cohort > 0 && t >= cohort {
        let mult = cfg
            .multipliers
            .as_ref()
            .map_or(1.0, |m| m[stratum]);
        cfg.tau_scale * mult * tau_mult * (TAU_A + TAU_B * (t - cohort) as f64)
    } else {
        0.0
    };
    let trend = cfg.delta * unit.x1 * t as f64 / T_PERIODS as f64;
    let eps: f64 = cfg.sigma_eps * rng.sample::<f64, _>(StandardNormal);
    unit.alpha + gamma + eta + 0.5 * t as f64 + 0.5 * unit.x1 + 0.3 * unit.x2 + tau + trend + eps
}

/// Generate one dataset. Bit-identical output for identical `(cfg, seed)`.
pub fn generate(cfg: &ScenarioConfig, seed: u64) -> Result<PanelDataset> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // PSU effects and PSU-by-period shocks, drawn once per PSU.
    let gamma_z: Vec<f64> = (0..N_PSUS)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let gamma: Vec<f64> = gamma_z.iter().map(|&z| cfg.sigma_gamma * z).collect();
    let eta: Vec<Vec<f64>> = (0..N_PSUS)
        .map(|_| {
            (0..T_PERIODS)
                .map(|_| cfg.sigma_eta * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    // Mean-one lognormal PSU weight factor, tied to the PSU effect when
    // sampling is informative. No extra draws when disabled, so the
    // baseline scenarios keep their random stream.
    let psu_factor: Vec<f64> = if cfg.psu_jitter_sd > 0.0 {
        let s = cfg.psu_jitter_sd;
        gamma_z
            .iter()
            .map(|&zg| {
                let zj: f64 = rng.sample::<f64, _>(StandardNormal);
                let z = if cfg.informative {
                    INFORMATIVE_RHO * zg + (1.0 - INFORMATIVE_RHO * INFORMATIVE_RHO).sqrt() * zj
                } else {
                    zj
                };
                (s * z - 0.5 * s * s).exp()
            })
            .collect()
    } else {
        vec![1.0; N_PSUS]
    };

    // Mean-one per-PSU treatment-effect multiplier: clusters within a
    // stratum respond with different strength. Because this heterogeneity
    // is independent across PSUs within a stratum, it is exactly the kind
    // of between-PSU variation the design-based variance estimator is
    // built for, and it leaves the population estimand unchanged.
    let tau_mult: Vec<f64> = if cfg.psu_tau_sd > 0.0 {
        (0..N_PSUS)
            .map(|_| 1.0 + cfg.psu_tau_sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    } else {
        vec![1.0; N_PSUS]
    };

    let shares = stratum_shares();
    let base_weight = |h: usize, p: usize| shares[h] * N_STRATA as f64 * psu_factor[p];

    let mut units = Vec::new();
    let mut period = Vec::new();
    let mut y = Vec::new();
    let mut first_treat = Vec::new();
    let mut stratum_col = Vec::new();
    let mut psu_col = Vec::new();
    let mut weight_col = Vec::new();
    let mut x_rows: Vec<[f64; 2]> = Vec::new();

    match cfg.kind {
        PanelKind::Panel => {
            let counts = allocate_units(cfg.n)?;
            let mut uid = 0usize;
            for (p, &m) in counts.iter().enumerate() {
                let h = psu_stratum_of(p);
                let g = psu_cohort(p);
                for _ in 0..m {
                    let unit = draw_unit(cfg, &mut rng, h, g > 0, base_weight(h, p));
                    for t in 1..=T_PERIODS {
                        units.push(format!("u{uid}"));
                        period.push(t);
                        y.push(outcome(
                            cfg,
                            &mut rng,
                            &unit,
                            gamma[p],
                            eta[p][(t - 1) as usize],
                            h,
                            tau_mult[p],
                            g,
                            t,
                        ));
                        first_treat.push(g);
                        stratum_col.push(h);
                        psu_col.push(p);
                        weight_col.push(unit.weight);
                        x_rows.push([unit.x1, unit.x2]);
                    }
                    uid += 1;
                }
            }
        }
        PanelKind::RepeatedCrossSection => {
            let per_period = cfg.n / T_PERIODS as usize;
            let rem = cfg.n - per_period * T_PERIODS as usize;
            let mut uid = 0usize;
            for t in 1..=T_PERIODS {
                let m = per_period + if (t as usize) <= rem { 1 } else { 0 };
                let counts = allocate_units(m)?;
                for (p, &mp) in counts.iter().enumerate() {
                    let h = psu_stratum_of(p);
                    let g = psu_cohort(p);
                    for _ in 0..mp {
                        let unit = draw_unit(cfg, &mut rng, h, g > 0, base_weight(h, p));
                        units.push(format!("r{uid}"));
                        period.push(t);
                        y.push(outcome(
                            cfg,
                            &mut rng,
                            &unit,
                            gamma[p],
                            eta[p][(t - 1) as usize],
                            h,
                            tau_mult[p],
                            g,
                            t,
                        ));
                        first_treat.push(g);
                        stratum_col.push(h);
                        psu_col.push(p);
                        weight_col.push(unit.weight);
                        x_rows.push([unit.x1, unit.x2]);
                        uid += 1;
                    }
                }
            }
        }
    }

    let x = DMatrix::from_fn(x_rows.len(), 2, |i, j| x_rows[i][j]);
    let fpc = vec![PSUS_PER_STRATUM as f64 / POP_PSUS_PER_STRATUM; N_STRATA];
    let design = SurveyDesign::from_indices(
        stratum_col,
        psu_col,
        (0..N_PSUS).map(psu_stratum_of).collect(),
        weight_col,
        fpc,
    )?;
    PanelDataset::new(&units, &period, &y, &first_treat, Some(x), design, cfg.kind)
}
