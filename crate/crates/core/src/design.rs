//! Survey design description: strata, PSUs, sampling weights, and
//! finite population corrections, plus the weight diagnostics every
//! estimator consumes.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Finite population correction input for one stratum: either the number of
/// population PSUs `N_h` or the sampling fraction `f_h = n_h / N_h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fpc {
    PopulationPsus(f64),
    SamplingFraction(f64),
}

/// Per-observation survey design labels and raw weights.
///
/// Strata and PSU labels are canonicalized to dense indices at construction.
/// A missing strata column means one implicit stratum; a missing PSU column
/// means every observation is its own PSU. With `nest = true` the effective
/// PSU key is `(stratum, psu)`, so PSU labels may be reused across strata.
#[derive(Debug, Clone)]
pub struct SurveyDesign {
    n: usize,
    stratum_of_obs: Vec<usize>,
    psu_of_obs: Vec<usize>,
    stratum_labels: Vec<String>,
    psu_labels: Vec<String>,
    /// Stratum index of each PSU.
    psu_stratum: Vec<usize>,
    raw_weights: Vec<f64>,
    /// Sampling fraction per stratum (0 when no FPC was given).
    fpc: Vec<f64>,
}

impl SurveyDesign {
    /// Build a design from optional label columns.
    ///
    /// `fpc` maps stratum labels to either `N_h` or `f_h`; both may be given
    /// per stratum, but must agree to 1e-9.
    pub fn new(
        weights: &[f64],
        strata: Option<&[String]>,
        psu: Option<&[String]>,
        nest: bool,
        fpc: Option<&HashMap<String, Vec<Fpc>>>,
    ) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::EmptyInput("survey design"));
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::NonpositiveWeight { index: i, value: w });
            }
        }
        if let Some(s) = strata {
            if s.len() != n {
                return Err(Error::LengthMismatch {
                    what: "strata",
                    got: s.len(),
                    expected: n,
                });
            }
        }
        if let Some(p) = psu {
            if p.len() != n {
                return Err(Error::LengthMismatch {
                    what: "psu",
                    got: p.len(),
                    expected: n,
                });
            }
        }

        let mut stratum_labels: Vec<String> = Vec::new();
        let mut stratum_index: HashMap<String, usize> = HashMap::new();
        let stratum_of_obs: Vec<usize> = match strata {
            Some(labels) => labels
                .iter()
                .map(|l| {
                    *stratum_index.entry(l.clone()).or_insert_with(|| {
                        stratum_labels.push(l.clone());
                        stratum_labels.len() - 1
                    })
                })
                .collect(),
            None => {
                stratum_labels.push("_all".to_string());
                vec![0; n]
            }
        };

        let mut psu_labels: Vec<String> = Vec::new();
        let mut psu_stratum: Vec<usize> = Vec::new();
        let mut psu_index: HashMap<(usize, String), usize> = HashMap::new();
        let psu_of_obs: Vec<usize> = match psu {
            Some(labels) => labels
                .iter()
                .zip(stratum_of_obs.iter())
                .map(|(l, &h)| {
                    // Without nesting, identical PSU labels refer to the same
                    // PSU regardless of stratum; key on stratum only when
                    // nest is requested.
                    let key = if nest { (h, l.clone()) } else { (usize::MAX, l.clone()) };
                    *psu_index.entry(key).or_insert_with(|| {
                        psu_labels.push(l.clone());
                        psu_stratum.push(h);
                        psu_labels.len() - 1
                    })
                })
                .collect(),
            None => {
                // Observation-level PSUs.
                for (i, &h) in stratum_of_obs.iter().enumerate() {
                    psu_labels.push(format!("_obs{i}"));
                    psu_stratum.push(h);
                }
                (0..n).collect()
            }
        };

        // A PSU spanning two strata makes the stratified formula ill-posed.
        for (i, (&p, &h)) in psu_of_obs.iter().zip(stratum_of_obs.iter()).enumerate() {
            if psu_stratum[p] != h {
                return Err(Error::InconsistentWithinGroup {
                    what: "stratum",
                    group: "PSU",
                    label: format!("{} (row {})", psu_labels[p], i),
                });
            }
        }

        let n_strata = stratum_labels.len();
        let mut sampled_psus = vec![0usize; n_strata];
        for &h in &psu_stratum {
            sampled_psus[h] += 1;
        }

        let mut fractions = vec![0.0f64; n_strata];
        if let Some(map) = fpc {
            for (label, specs) in map {
                let h = match stratum_index.get(label) {
                    Some(&h) => h,
                    None if n_strata == 1 && strata.is_none() => 0,
                    None => continue,
                };
                let n_h = sampled_psus[h] as f64;
                let mut resolved: Option<f64> = None;
                for spec in specs {
                    let f = match *spec {
                        Fpc::SamplingFraction(f) => f,
                        Fpc::PopulationPsus(pop) => {
                            if pop <= 0.0 {
                                return Err(Error::InvalidSamplingFraction {
                                    stratum: label.clone(),
                                    value: pop,
                                });
                            }
                            n_h / pop
                        }
                    };
                    if !(0.0..=1.0).contains(&f) {
                        return Err(Error::InvalidSamplingFraction {
                            stratum: label.clone(),
                            value: f,
                        });
                    }
                    if let Some(prev) = resolved {
                        if (prev - f).abs() > 1e-9 {
                            return Err(Error::InconsistentFpc {
                                stratum: label.clone(),
                                from_count: f,
                                stated: prev,
                            });
                        }
                    } else {
                        resolved = Some(f);
                    }
                }
                fractions[h] = resolved.unwrap_or(0.0);
            }
        }

        Ok(SurveyDesign {
            n,
            stratum_of_obs,
            psu_of_obs,
            stratum_labels,
            psu_labels,
            psu_stratum,
            raw_weights: weights.to_vec(),
            fpc: fractions,
        })
    }

    /// Construct directly from dense indices (used by the simulation DGP).
    pub fn from_indices(
        stratum_of_obs: Vec<usize>,
        psu_of_obs: Vec<usize>,
        psu_stratum: Vec<usize>,
        raw_weights: Vec<f64>,
        fpc: Vec<f64>,
    ) -> Result<Self> {
        let n = raw_weights.len();
        if n == 0 {
            return Err(Error::EmptyInput("survey design"));
        }
        for (i, &w) in raw_weights.iter().enumerate() {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::NonpositiveWeight { index: i, value: w });
            }
        }
        let n_strata = psu_stratum.iter().copied().max().map_or(0, |m| m + 1)
            .max(stratum_of_obs.iter().copied().max().map_or(0, |m| m + 1));
        let stratum_labels = (0..n_strata).map(|h| h.to_string()).collect();
        let psu_labels = (0..psu_stratum.len()).map(|p| p.to_string()).collect();
        for (i, &f) in fpc.iter().enumerate() {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidSamplingFraction {
                    stratum: i.to_string(),
                    value: f,
                });
            }
        }
        Ok(SurveyDesign {
            n,
            stratum_of_obs,
            psu_of_obs,
            stratum_labels,
            psu_labels,
            psu_stratum,
            raw_weights,
            fpc,
        })
    }

    /// A design with one stratum, observation-level PSUs, no FPC, and unit
    /// weights: what HC1-style inference implicitly assumes.
    pub fn iid(n: usize) -> Self {
        SurveyDesign::from_indices(
            vec![0; n],
            (0..n).collect(),
            vec![0; n],
            vec![1.0; n],
            vec![0.0],
        )
        .expect("iid design is always valid")
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn n_strata(&self) -> usize {
        self.stratum_labels.len()
    }

    pub fn n_psus(&self) -> usize {
        self.psu_stratum.len()
    }

    pub fn raw_weights(&self) -> &[f64] {
        &self.raw_weights
    }

    pub fn stratum_of_obs(&self) -> &[usize] {
        &self.stratum_of_obs
    }

    pub fn psu_of_obs(&self) -> &[usize] {
        &self.psu_of_obs
    }

    pub fn psu_stratum(&self) -> &[usize] {
        &self.psu_stratum
    }

    pub fn stratum_label(&self, h: usize) -> &str {
        &self.stratum_labels[h]
    }

    pub fn sampling_fraction(&self, h: usize) -> f64 {
        self.fpc[h]
    }

    pub fn sampling_fractions(&self) -> &[f64] {
        &self.fpc
    }

    /// Number of sampled PSUs per stratum.
    pub fn sampled_psus(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_strata()];
        for &h in &self.psu_stratum {
            counts[h] += 1;
        }
        counts
    }

    /// Normalized weights for this design's observations.
    pub fn normalized_weights(&self) -> NormalizedWeights {
        normalize_weights(&self.raw_weights).expect("weights validated at construction")
    }

    /// Same structure with all raw weights set to one (an unweighted
    /// analysis of the same sample).
    pub fn with_unit_weights(&self) -> Self {
        let mut out = self.clone();
        out.raw_weights = vec![1.0; self.n];
        out
    }

    /// Keep the weights but discard strata, clusters, and FPCs: the design
    /// HC1-style inference implicitly assumes (independent rows).
    pub fn degenerate(&self) -> Self {
        SurveyDesign::from_indices(
            vec![0; self.n],
            (0..self.n).collect(),
            vec![0; self.n],
            self.raw_weights.clone(),
            vec![0.0],
        )
        .expect("weights already validated")
    }

    /// Drop the strata and FPC, keeping PSUs: the `cluster=psu` heuristic.
    pub fn cluster_only(&self) -> Result<Self> {
        if self.n_psus() < 2 {
            return Err(Error::TooFewPsus(self.n_psus()));
        }
        Ok(SurveyDesign {
            n: self.n,
            stratum_of_obs: vec![0; self.n],
            psu_of_obs: self.psu_of_obs.clone(),
            stratum_labels: vec!["_all".to_string()],
            psu_labels: self.psu_labels.clone(),
            psu_stratum: vec![0; self.n_psus()],
            raw_weights: self.raw_weights.clone(),
            fpc: vec![0.0],
        })
    }

    /// Collapse an observation-level design to group level (e.g. panel rows
    /// to units). `group_of_obs` assigns each observation to a dense group
    /// index; design labels and raw weights must be constant within group.
    pub fn collapse(&self, group_of_obs: &[usize], n_groups: usize) -> Result<Self> {
        if group_of_obs.len() != self.n {
            return Err(Error::LengthMismatch {
                what: "group_of_obs",
                got: group_of_obs.len(),
                expected: self.n,
            });
        }
        let mut stratum = vec![usize::MAX; n_groups];
        let mut psu = vec![usize::MAX; n_groups];
        let mut weight = vec![f64::NAN; n_groups];
        for (i, &g) in group_of_obs.iter().enumerate() {
            if stratum[g] == usize::MAX {
                stratum[g] = self.stratum_of_obs[i];
                psu[g] = self.psu_of_obs[i];
                weight[g] = self.raw_weights[i];
            } else if stratum[g] != self.stratum_of_obs[i]
                || psu[g] != self.psu_of_obs[i]
                || (weight[g] - self.raw_weights[i]).abs() > 1e-12 * weight[g].abs()
            {
                return Err(Error::InconsistentWithinGroup {
                    what: "design labels or weight",
                    group: "unit",
                    label: g.to_string(),
                });
            }
        }
        Ok(SurveyDesign {
            n: n_groups,
            stratum_of_obs: stratum,
            psu_of_obs: psu,
            stratum_labels: self.stratum_labels.clone(),
            psu_labels: self.psu_labels.clone(),
            psu_stratum: self.psu_stratum.clone(),
            raw_weights: weight,
            fpc: self.fpc.clone(),
        })
    }

    /// Require `n_h >= 2` in every stratum that appears in the data,
    /// returning the offending stratum label otherwise.
    pub fn check_min_psus(&self) -> Result<()> {
        let counts = self.sampled_psus();
        let mut present = vec![false; self.n_strata()];
        for &h in &self.stratum_of_obs {
            present[h] = true;
        }
        for (h, (&c, &p)) in counts.iter().zip(present.iter()).enumerate() {
            if p && c < 2 {
                return Err(Error::SingletonStratum(self.stratum_labels[h].clone()));
            }
        }
        Ok(())
    }
}

/// Normalized sampling weights: `w_i = w_i* / mean(w*)`, so that the
/// normalized total equals the sample size.
#[derive(Debug, Clone)]
pub struct NormalizedWeights {
    pub w: Vec<f64>,
    /// Sum of normalized weights (= n by construction).
    pub w_hat: f64,
    /// Sum of raw weights: the estimated population size.
    pub n_hat: f64,
    /// Mean raw weight.
    pub mean_raw: f64,
}

/// Normalize raw sampling weights by their mean.
pub fn normalize_weights(raw: &[f64]) -> Result<NormalizedWeights> {
    if raw.is_empty() {
        return Err(Error::EmptyInput("weights"));
    }
    for (i, &w) in raw.iter().enumerate() {
        if !(w > 0.0) || !w.is_finite() {
            return Err(Error::NonpositiveWeight { index: i, value: w });
        }
    }
    let n = raw.len() as f64;
    let n_hat: f64 = raw.iter().sum();
    let mean_raw = n_hat / n;
    let w: Vec<f64> = raw.iter().map(|&x| x / mean_raw).collect();
    let w_hat: f64 = w.iter().sum();
    Ok(NormalizedWeights {
        w,
        w_hat,
        n_hat,
        mean_raw,
    })
}

/// Kish design effect due to unequal weighting: `n * sum(w^2) / sum(w)^2`.
/// Invariant under rescaling of the weights; equals 1 iff all weights equal.
pub fn kish_deff_w(w: &[f64]) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::EmptyInput("weights"));
    }
    for (i, &x) in w.iter().enumerate() {
        if !(x > 0.0) || !x.is_finite() {
            return Err(Error::NonpositiveWeight { index: i, value: x });
        }
    }
    let n = w.len() as f64;
    let sum: f64 = w.iter().sum();
    let sum_sq: f64 = w.iter().map(|x| x * x).sum();
    Ok(n * sum_sq / (sum * sum))
}

/// Survey degrees of freedom: sampled PSUs minus strata.
pub fn design_df(design: &SurveyDesign) -> Result<usize> {
    let total_psus = design.n_psus() as i64;
    let strata = design.n_strata() as i64;
    let df = total_psus - strata;
    if df <= 0 {
        return Err(Error::NonpositiveDf(df));
    }
    Ok(df as usize)
}
