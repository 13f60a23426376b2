//! Long-format panel / repeated cross-section container with the validation
//! the estimators rely on: balance, cohort consistency, and design labels
//! constant within unit.

use nalgebra::DMatrix;

use crate::design::SurveyDesign;
use crate::error::{Error, Result};

/// Whether rows form a balanced panel (every unit observed in every period)
/// or repeated cross sections (each unit observed once).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PanelKind {
    Panel,
    RepeatedCrossSection,
}

/// Long-format outcome data joined to a row-level survey design.
///
/// `first_treat` is the cohort label: the first period a unit is treated.
/// Values of zero, negative values, or values beyond the last observed
/// period all mean never treated and are canonicalized to `None`.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    kind: PanelKind,
    unit_of_obs: Vec<usize>,
    unit_labels: Vec<String>,
    period: Vec<i64>,
    periods: Vec<i64>,
    y: Vec<f64>,
    first_treat: Vec<Option<i64>>,
    unit_first_treat: Vec<Option<i64>>,
    x: Option<DMatrix<f64>>,
    design: SurveyDesign,
    /// Balanced panels only: row index of (unit, period), laid out
    /// unit-major over the sorted period grid.
    row_of: Vec<usize>,
}

impl PanelDataset {
    pub fn new(
        units: &[String],
        period: &[i64],
        y: &[f64],
        first_treat: &[i64],
        x: Option<DMatrix<f64>>,
        design: SurveyDesign,
        kind: PanelKind,
    ) -> Result<Self> {
        let n = design.n_obs();
        if units.len() != n {
            return Err(Error::LengthMismatch {
                what: "units",
                got: units.len(),
                expected: n,
            });
        }
        if period.len() != n {
            return Err(Error::LengthMismatch {
                what: "period",
                got: period.len(),
                expected: n,
            });
        }
        if y.len() != n {
            return Err(Error::LengthMismatch {
                what: "y",
                got: y.len(),
                expected: n,
            });
        }
        if first_treat.len() != n {
            return Err(Error::LengthMismatch {
                what: "first_treat",
                got: first_treat.len(),
                expected: n,
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("outcome"));
        }
        if let Some(x) = &x {
            if x.nrows() != n {
                return Err(Error::LengthMismatch {
                    what: "covariates",
                    got: x.nrows(),
                    expected: n,
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("covariates"));
            }
        }

        let mut unit_labels: Vec<String> = Vec::new();
        let mut unit_index = std::collections::HashMap::new();
        let unit_of_obs: Vec<usize> = units
            .iter()
            .map(|l| {
                *unit_index.entry(l.clone()).or_insert_with(|| {
                    unit_labels.push(l.clone());
                    unit_labels.len() - 1
                })
            })
            .collect();

        let mut periods: Vec<i64> = period.to_vec();
        periods.sort_unstable();
        periods.dedup();
        let max_period = *periods.last().expect("non-empty by design check");

        let first_treat: Vec<Option<i64>> = first_treat
            .iter()
            .map(|&g| if g <= 0 || g > max_period { None } else { Some(g) })
            .collect();

        // Cohort must be constant within unit.
        let n_units = unit_labels.len();
        let mut unit_first_treat: Vec<Option<Option<i64>>> = vec![None; n_units];
        for (i, &u) in unit_of_obs.iter().enumerate() {
            match unit_first_treat[u] {
                None => unit_first_treat[u] = Some(first_treat[i]),
                Some(g) if g != first_treat[i] => {
                    return Err(Error::InconsistentFirstTreat(unit_labels[u].clone()));
                }
                _ => {}
            }
        }
        let unit_first_treat: Vec<Option<i64>> =
            unit_first_treat.into_iter().map(|g| g.expect("every unit seen")).collect();

        let row_of = match kind {
            PanelKind::Panel => {
                // Balance: each (unit, period) exactly once, all periods per unit.
                let t = periods.len();
                let period_pos = |p: i64| periods.binary_search(&p).expect("member of grid");
                let mut row_of = vec![usize::MAX; n_units * t];
                for (i, (&u, &p)) in unit_of_obs.iter().zip(period.iter()).enumerate() {
                    let slot = u * t + period_pos(p);
                    if row_of[slot] != usize::MAX {
                        return Err(Error::Invalid(format!(
                            "unit '{}' observed twice in period {p}",
                            unit_labels[u]
                        )));
                    }
                    row_of[slot] = i;
                }
                for u in 0..n_units {
                    for (k, &p) in periods.iter().enumerate() {
                        if row_of[u * t + k] == usize::MAX {
                            return Err(Error::UnbalancedPanel {
                                unit: unit_labels[u].clone(),
                                period: p,
                            });
                        }
                    }
                }
                row_of
            }
            PanelKind::RepeatedCrossSection => {
                // Each unit appears once; the unit index carries no panel
                // structure here.
                let mut seen = vec![false; n_units];
                for &u in &unit_of_obs {
                    if seen[u] {
                        return Err(Error::Invalid(format!(
                            "repeated cross-section unit '{}' appears more than once",
                            unit_labels[u]
                        )));
                    }
                    seen[u] = true;
                }
                Vec::new()
            }
        };

        Ok(PanelDataset {
            kind,
            unit_of_obs,
            unit_labels,
            period: period.to_vec(),
            periods,
            y: y.to_vec(),
            first_treat,
            unit_first_treat,
            x,
            design,
            row_of,
        })
    }

    pub fn kind(&self) -> PanelKind {
        self.kind
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_units(&self) -> usize {
        self.unit_labels.len()
    }

    pub fn unit_of_obs(&self) -> &[usize] {
        &self.unit_of_obs
    }

    pub fn unit_label(&self, u: usize) -> &str {
        &self.unit_labels[u]
    }

    pub fn period(&self) -> &[i64] {
        &self.period
    }

    /// Sorted distinct periods.
    pub fn periods(&self) -> &[i64] {
        &self.periods
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn first_treat(&self) -> &[Option<i64>] {
        &self.first_treat
    }

    pub fn unit_first_treat(&self) -> &[Option<i64>] {
        &self.unit_first_treat
    }

    pub fn x(&self) -> Option<&DMatrix<f64>> {
        self.x.as_ref()
    }

    pub fn design(&self) -> &SurveyDesign {
        &self.design
    }

    /// Row index of `(unit, period)` in a balanced panel.
    pub fn row(&self, unit: usize, period: i64) -> Option<usize> {
        if self.kind != PanelKind::Panel {
            return None;
        }
        let t = self.periods.len();
        let k = self.periods.binary_search(&period).ok()?;
        Some(self.row_of[unit * t + k])
    }

    /// Sorted treated cohorts present in the data.
    pub fn cohorts(&self) -> Vec<i64> {
        let mut gs: Vec<i64> = self.unit_first_treat.iter().flatten().copied().collect();
        gs.sort_unstable();
        gs.dedup();
        gs
    }

    /// Whether any unit is never treated.
    pub fn has_never_treated(&self) -> bool {
        self.unit_first_treat.iter().any(|g| g.is_none())
    }

    /// The same dataset with all sampling weights replaced by ones.
    pub fn unweighted_copy(&self) -> PanelDataset {
        let mut out = self.clone();
        out.design = self.design.with_unit_weights();
        out
    }

    /// Unit-level design for balanced panels: one record per unit with the
    /// unit's (validated constant) stratum, PSU, and weight.
    pub fn unit_design(&self) -> Result<SurveyDesign> {
        self.design.collapse(&self.unit_of_obs, self.n_units())
    }
}
