//! Linear design of the prediction model.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::popmodel::{f_scenario, Scenario};

/// Whether the prediction model's linear part matches the outcome model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PmDesign {
    True,
    /// Intercept plus squared covariates.
    Misspecified,
}

impl PmDesign {
    pub fn as_str(self) -> &'static str {
        match self {
            PmDesign::True => "true",
            PmDesign::Misspecified => "false",
        }
    }
}

/// Which columns the correctly specified design carries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmLayout {
    /// Simulation scenario; adds `f(x)` and the `x log w` interaction.
    pub scenario: Option<Scenario>,
    /// Number of strata for dummy coding, if strata are known.
    pub strata: Option<usize>,
    /// Whether `log w` enters.
    pub use_weight: bool,
}

/// One row's inputs to the design.
#[derive(Debug, Clone, Copy)]
pub struct DesignRow<'a> {
    pub x: &'a [f64],
    pub stratum: Option<usize>,
    pub weight: Option<f64>,
}

impl PmLayout {
    pub fn width(&self, covariates: usize, spec: PmDesign) -> usize {
        match spec {
            PmDesign::Misspecified => 1 + covariates,
            PmDesign::True => {
                let mut p = 1 + covariates;
                if matches!(self.scenario, Some(s) if s != Scenario::Lin) {
                    p += 1;
                }
                if self.use_weight {
                    p += 1;
                    if self.scenario.is_some() {
                        p += covariates;
                    }
                }
                p + self.strata.map_or(0, |h| h.saturating_sub(1))
            }
        }
    }

    pub fn matrix(&self, spec: PmDesign, rows: &[DesignRow<'_>]) -> Result<DMatrix<f64>> {
        let q = rows.first().map_or(0, |r| r.x.len());
        let p = self.width(q, spec);
        let mut out = DMatrix::zeros(rows.len(), p);
        for (i, r) in rows.iter().enumerate() {
            if r.x.len() != q {
                return Err(Error::Data("rows differ in covariate count".into()));
            }
            out[(i, 0)] = 1.0;
            let mut j = 1;
            match spec {
                PmDesign::Misspecified => {
                    for v in r.x {
                        out[(i, j)] = v * v;
                        j += 1;
                    }
                }
                PmDesign::True => {
                    for v in r.x {
                        out[(i, j)] = *v;
                        j += 1;
                    }
                    if let Some(s) = self.scenario.filter(|s| *s != Scenario::Lin) {
                        out[(i, j)] = f_scenario(s, r.x[0]);
                        j += 1;
                    }
                    if self.use_weight {
                        let w = r
                            .weight
                            .ok_or_else(|| Error::Data("row lacks a design weight".into()))?;
                        if !(w > 0.0) {
                            return Err(Error::Data(format!("design weight {w} is not positive")));
                        }
                        let lw = w.ln();
                        out[(i, j)] = lw;
                        j += 1;
                        if self.scenario.is_some() {
                            for v in r.x {
                                out[(i, j)] = v * lw;
                                j += 1;
                            }
                        }
                    }
                    if let Some(h) = self.strata {
                        let s = r
                            .stratum
                            .ok_or_else(|| Error::Data("row lacks a stratum".into()))?;
                        if s >= h {
                            return Err(Error::Data(format!("stratum index {s} out of range")));
                        }
                        if s > 0 {
                            out[(i, j + s - 1)] = 1.0;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
