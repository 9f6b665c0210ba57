//! Treatment-effect point estimates: difference in means, CUPED and
//! regression adjustment.
//!
//! Every estimator reports `delta = mean(T) - mean(C)` on the (possibly
//! adjusted) outcomes. Standard errors of the difference in means use the
//! unpooled arm variances `sqrt(s_T^2 / n_T + s_C^2 / n_C)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::allocation::{AllocationPlan, Arm};
use crate::error::{Error, Result};
use crate::stats;

/// Outcomes or covariates keyed by unit id.
pub type ValueMap = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    DiffMeans,
    Cuped,
    RegressionAdj,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DiffMeans => "diff-means",
            Method::Cuped => "cuped",
            Method::RegressionAdj => "regression",
        }
    }

    pub fn needs_covariate(self) -> bool {
        !matches!(self, Method::DiffMeans)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "diff-means" | "diff_means" | "diff" => Ok(Method::DiffMeans),
            "cuped" => Ok(Method::Cuped),
            "regression" | "regression-adj" | "ols" => Ok(Method::RegressionAdj),
            other => Err(Error::invalid(
                "method",
                format!("expected diff-means, cuped or regression, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectEstimate {
    pub delta: f64,
    pub se: f64,
    pub method: Method,
    pub n_treat: usize,
    pub n_control: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CupedAdjustment {
    pub theta: f64,
    pub covariate_mean: f64,
    pub r_squared: f64,
}

impl CupedAdjustment {
    /// The identity adjustment.
    pub fn none() -> Self {
        Self {
            theta: 0.0,
            covariate_mean: 0.0,
            r_squared: 0.0,
        }
    }

    #[inline]
    pub fn adjust(&self, covariate: f64, outcome: f64) -> f64 {
        outcome - self.theta * (covariate - self.covariate_mean)
    }
}

/// Simple OLS fit of outcome on covariate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionFit {
    pub beta0: f64,
    pub beta1: f64,
    pub residual_variance: f64,
}

/// One observed unit: its arm, covariate and revealed outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub arm: Arm,
    pub covariate: f64,
    pub outcome: f64,
}

fn lookup(map: &ValueMap, id: &str, missing: fn(String) -> Error) -> Result<f64> {
    map.get(id).copied().ok_or_else(|| missing(id.to_owned()))
}

/// Outcomes split by arm, in plan order.
pub fn arm_outcomes(plan: &AllocationPlan, outcomes: &ValueMap) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut t = Vec::with_capacity(plan.len() / 2 + 1);
    let mut c = Vec::with_capacity(plan.len() / 2 + 1);
    for a in plan.assignments() {
        let y = lookup(outcomes, &a.id, Error::MissingOutcome)?;
        if !y.is_finite() {
            return Err(Error::NonFiniteOutcome(a.id.clone()));
        }
        match a.arm {
            Arm::Treatment => t.push(y),
            Arm::Control => c.push(y),
        }
    }
    Ok((t, c))
}

/// Observations in plan order.
pub fn observations(plan: &AllocationPlan, covariates: &ValueMap, outcomes: &ValueMap) -> Result<Vec<Observation>> {
    plan.assignments()
        .iter()
        .map(|a| {
            let outcome = lookup(outcomes, &a.id, Error::MissingOutcome)?;
            if !outcome.is_finite() {
                return Err(Error::NonFiniteOutcome(a.id.clone()));
            }
            let covariate = lookup(covariates, &a.id, Error::MissingCovariate)?;
            if !covariate.is_finite() {
                return Err(Error::NonFiniteCovariate(a.id.clone()));
            }
            Ok(Observation {
                arm: a.arm,
                covariate,
                outcome,
            })
        })
        .collect()
}

/// Difference in means of two outcome samples. A single-unit arm
/// contributes zero variance to the standard error.
pub fn diff_means_values(treat: &[f64], control: &[f64]) -> Result<EffectEstimate> {
    if treat.is_empty() || control.is_empty() {
        return Err(Error::EmptyArm);
    }
    let (nt, nc) = (treat.len() as f64, control.len() as f64);
    let delta = stats::mean(treat) - stats::mean(control);
    let se = (stats::sample_variance(treat) / nt + stats::sample_variance(control) / nc).sqrt();
    Ok(EffectEstimate {
        delta,
        se,
        method: Method::DiffMeans,
        n_treat: treat.len(),
        n_control: control.len(),
    })
}

pub fn diff_means(plan: &AllocationPlan, outcomes: &ValueMap) -> Result<EffectEstimate> {
    let (t, c) = arm_outcomes(plan, outcomes)?;
    diff_means_values(&t, &c)
}

/// CUPED fit on paired covariate/outcome slices.
pub fn fit_cuped_values(covariates: &[f64], outcomes: &[f64]) -> Result<CupedAdjustment> {
    debug_assert_eq!(covariates.len(), outcomes.len());
    if covariates.len() < 3 {
        return Err(Error::TooFewUnits {
            needed: 3,
            have: covariates.len(),
        });
    }
    let var_x = stats::sample_variance(covariates);
    if var_x <= 0.0 {
        return Err(Error::DegenerateCovariate);
    }
    let theta = stats::sample_covariance(covariates, outcomes) / var_x;
    let r = stats::correlation(covariates, outcomes);
    Ok(CupedAdjustment {
        theta,
        covariate_mean: stats::mean(covariates),
        r_squared: (r * r).min(1.0),
    })
}

/// Fits theta = cov(X, Y) / var(X) over every unit that has an outcome.
pub fn fit_cuped(covariates: &ValueMap, outcomes: &ValueMap) -> Result<CupedAdjustment> {
    let mut xs = Vec::with_capacity(outcomes.len());
    let mut ys = Vec::with_capacity(outcomes.len());
    for (id, &y) in outcomes {
        let x = lookup(covariates, id, Error::MissingCovariate)?;
        if !x.is_finite() {
            return Err(Error::NonFiniteCovariate(id.clone()));
        }
        if !y.is_finite() {
            return Err(Error::NonFiniteOutcome(id.clone()));
        }
        xs.push(x);
        ys.push(y);
    }
    fit_cuped_values(&xs, &ys)
}

pub fn cuped_estimate_observations(obs: &[Observation], adj: &CupedAdjustment) -> Result<EffectEstimate> {
    let (mut t, mut c) = (Vec::new(), Vec::new());
    for o in obs {
        let y = adj.adjust(o.covariate, o.outcome);
        match o.arm {
            Arm::Treatment => t.push(y),
            Arm::Control => c.push(y),
        }
    }
    let mut est = diff_means_values(&t, &c)?;
    est.method = Method::Cuped;
    Ok(est)
}

/// Difference in means of `Y - theta (X - E[X])`.
pub fn cuped_estimate(
    plan: &AllocationPlan,
    covariates: &ValueMap,
    outcomes: &ValueMap,
    adj: &CupedAdjustment,
) -> Result<EffectEstimate> {
    cuped_estimate_observations(&observations(plan, covariates, outcomes)?, adj)
}

/// Simple regression of outcome on covariate.
pub fn fit_regression(covariates: &[f64], outcomes: &[f64]) -> Result<RegressionFit> {
    let n = covariates.len();
    if n < 3 {
        return Err(Error::TooFewUnits { needed: 3, have: n });
    }
    let var_x = stats::sample_variance(covariates);
    if var_x <= 0.0 {
        return Err(Error::DegenerateCovariate);
    }
    let beta1 = stats::sample_covariance(covariates, outcomes) / var_x;
    let beta0 = stats::mean(outcomes) - beta1 * stats::mean(covariates);
    let rss: f64 = covariates
        .iter()
        .zip(outcomes)
        .map(|(x, y)| {
            let e = y - beta0 - beta1 * x;
            e * e
        })
        .sum();
    Ok(RegressionFit {
        beta0,
        beta1,
        residual_variance: rss / (n - 2) as f64,
    })
}

/// Solves a 3x3 system by Gaussian elimination with partial pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            let pivot_row = a[col];
            for (dst, src) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *dst -= f * src;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// OLS of outcome on `[1, treated, covariate]`; delta is the treatment
/// coefficient and se its conventional OLS standard error.
pub fn regression_adjust_observations(obs: &[Observation]) -> Result<EffectEstimate> {
    let n = obs.len();
    let n_treat = obs.iter().filter(|o| o.arm == Arm::Treatment).count();
    let n_control = n - n_treat;
    if n_treat == 0 || n_control == 0 {
        return Err(Error::EmptyArm);
    }
    if n < 4 {
        return Err(Error::TooFewUnits { needed: 4, have: n });
    }
    // Centering the covariate leaves the treatment coefficient unchanged and
    // keeps the normal equations well conditioned.
    let x_mean = obs.iter().map(|o| o.covariate).sum::<f64>() / n as f64;
    let mut xtx = [[0.0; 3]; 3];
    let mut xty = [0.0; 3];
    for o in obs {
        let row = [1.0, if o.arm == Arm::Treatment { 1.0 } else { 0.0 }, o.covariate - x_mean];
        for i in 0..3 {
            xty[i] += row[i] * o.outcome;
            for j in 0..3 {
                xtx[i][j] += row[i] * row[j];
            }
        }
    }
    let beta = solve3(xtx, xty).ok_or(Error::DegenerateDesign)?;
    let rss: f64 = obs
        .iter()
        .map(|o| {
            let d = if o.arm == Arm::Treatment { 1.0 } else { 0.0 };
            let e = o.outcome - beta[0] - beta[1] * d - beta[2] * (o.covariate - x_mean);
            e * e
        })
        .sum();
    let sigma2 = rss / (n - 3) as f64;
    let inv_col = solve3(xtx, [0.0, 1.0, 0.0]).ok_or(Error::DegenerateDesign)?;
    let se = (sigma2 * inv_col[1]).max(0.0).sqrt();
    Ok(EffectEstimate {
        delta: beta[1],
        se,
        method: Method::RegressionAdj,
        n_treat,
        n_control,
    })
}

pub fn regression_adjust(plan: &AllocationPlan, covariates: &ValueMap, outcomes: &ValueMap) -> Result<EffectEstimate> {
    regression_adjust_observations(&observations(plan, covariates, outcomes)?)
}

/// Runs `method` on observations, refitting CUPED's theta on them.
pub fn estimate_observations(method: Method, obs: &[Observation]) -> Result<EffectEstimate> {
    match method {
        Method::DiffMeans => {
            let (mut t, mut c) = (Vec::new(), Vec::new());
            for o in obs {
                match o.arm {
                    Arm::Treatment => t.push(o.outcome),
                    Arm::Control => c.push(o.outcome),
                }
            }
            diff_means_values(&t, &c)
        }
        Method::Cuped => {
            let xs: Vec<f64> = obs.iter().map(|o| o.covariate).collect();
            let ys: Vec<f64> = obs.iter().map(|o| o.outcome).collect();
            let adj = fit_cuped_values(&xs, &ys)?;
            cuped_estimate_observations(obs, &adj)
        }
        Method::RegressionAdj => regression_adjust_observations(obs),
    }
}
