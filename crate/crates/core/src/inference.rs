//! Hypothesis tests and resampling.
//!
//! Welch and paired t-tests use the Student t distribution from `statrs`.
//! Bootstrap p-values are two-sided percentile p-values,
//! `min(1, 2 * min((#{d* <= 0} + 1) / (B + 1), (#{d* >= 0} + 1) / (B + 1)))`,
//! where `d*` is the effect re-estimated on resample `k`. Each resample draws
//! from its own stream derived from `(seed, k)`, so the result is the same
//! whatever the thread count.

use rand::Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::allocation::{AllocationPlan, Arm};
use crate::error::{Error, Result};
use crate::estimation::{self, Method, Observation, ValueMap};
use crate::rng::{self, StreamRng};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TestFamily {
    TTestIndependent,
    TTestPaired,
    BootstrapIndependent,
    BootstrapPaired,
    /// t-test of a single regression coefficient.
    TTestCoefficient,
}

impl TestFamily {
    pub fn name(self) -> &'static str {
        match self {
            TestFamily::TTestIndependent => "welch-t",
            TestFamily::TTestPaired => "paired-t",
            TestFamily::BootstrapIndependent => "bootstrap",
            TestFamily::BootstrapPaired => "paired-bootstrap",
            TestFamily::TTestCoefficient => "ols-t",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Degrees of freedom (t-tests only).
    pub df: Option<f64>,
    pub family: TestFamily,
    /// Number of resamples (bootstrap only).
    pub n_resamples: Option<usize>,
}

fn two_sided_t(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    // df > 0 and finite here; scale 1 is always valid.
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

/// True when a spread is zero up to rounding relative to the data's scale.
fn negligible(spread: f64, scale: f64) -> bool {
    spread <= 8.0 * f64::EPSILON * scale
}

fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Two-sided t-test of `estimate / se` on `df` degrees of freedom.
pub fn t_test_coefficient(estimate: f64, se: f64, df: f64) -> Result<InferenceResult> {
    if !(df.is_finite() && df > 0.0) {
        return Err(Error::invalid("df", "must be positive"));
    }
    if !(se.is_finite() && estimate.is_finite()) || negligible(se, estimate.abs()) || se == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let t = estimate / se;
    Ok(InferenceResult {
        statistic: t,
        p_value: two_sided_t(t, df),
        df: Some(df),
        family: TestFamily::TTestCoefficient,
        n_resamples: None,
    })
}

/// Welch two-sample t-test with Welch–Satterthwaite degrees of freedom.
pub fn t_test_independent(treat: &[f64], control: &[f64]) -> Result<InferenceResult> {
    let have = treat.len().min(control.len());
    if have < 2 {
        return Err(Error::TooFewSamples { needed: 2, have });
    }
    let (nt, nc) = (treat.len() as f64, control.len() as f64);
    let vt = stats::sample_variance(treat) / nt;
    let vc = stats::sample_variance(control) / nc;
    let se2 = vt + vc;
    let scale = max_abs(treat).max(max_abs(control));
    if negligible(se2.sqrt(), scale) {
        return Err(Error::ZeroVariance);
    }
    let t = (stats::mean(treat) - stats::mean(control)) / se2.sqrt();
    let df = se2 * se2 / (vt * vt / (nt - 1.0) + vc * vc / (nc - 1.0));
    Ok(InferenceResult {
        statistic: t,
        p_value: two_sided_t(t, df),
        df: Some(df),
        family: TestFamily::TTestIndependent,
        n_resamples: None,
    })
}

/// Paired t-test on `(treatment, control)` outcome pairs.
pub fn t_test_paired(pairs: &[(f64, f64)]) -> Result<InferenceResult> {
    let diffs: Vec<f64> = pairs.iter().map(|(t, c)| t - c).collect();
    t_test_differences(&diffs)
}

/// One-sample t-test of within-pair differences against zero.
pub fn t_test_differences(diffs: &[f64]) -> Result<InferenceResult> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::TooFewPairs { needed: 2, have: n });
    }
    let sd = stats::sample_sd(diffs);
    if negligible(sd, max_abs(diffs)) {
        return Err(Error::ZeroVariance);
    }
    let t = stats::mean(diffs) / (sd / (n as f64).sqrt());
    let df = (n - 1) as f64;
    Ok(InferenceResult {
        statistic: t,
        p_value: two_sided_t(t, df),
        df: Some(df),
        family: TestFamily::TTestPaired,
        n_resamples: None,
    })
}

/// `(treatment, control)` outcomes for every COSS pair, by pair index.
pub fn paired_outcomes(plan: &AllocationPlan, outcomes: &ValueMap) -> Result<Vec<(f64, f64)>> {
    if !plan.is_paired() {
        return Err(Error::NotPaired);
    }
    plan.pairs()
        .into_iter()
        .map(|(t, c)| {
            let yt = *outcomes.get(t).ok_or_else(|| Error::MissingOutcome(t.to_owned()))?;
            let yc = *outcomes.get(c).ok_or_else(|| Error::MissingOutcome(c.to_owned()))?;
            Ok((yt, yc))
        })
        .collect()
}

/// Indices drawn uniformly with replacement.
fn draw_indices(n: usize, rng: &mut StreamRng) -> impl Iterator<Item = usize> + '_ {
    (0..n).map(move |_| rng.random_range(0..n))
}

/// Resamples whole pairs; members never cross pair boundaries.
pub(crate) fn resample_pairs<T: Copy>(pairs: &[T], rng: &mut StreamRng) -> Vec<T> {
    draw_indices(pairs.len(), rng).map(|i| pairs[i]).collect()
}

fn resample_mean(xs: &[f64], rng: &mut StreamRng) -> f64 {
    draw_indices(xs.len(), rng).map(|i| xs[i]).sum::<f64>() / xs.len() as f64
}

fn percentile_p(deltas: &[f64]) -> f64 {
    let b = deltas.len() as f64;
    let le = deltas.iter().filter(|&&d| d <= 0.0).count() as f64;
    let ge = deltas.iter().filter(|&&d| d >= 0.0).count() as f64;
    (2.0 * ((le + 1.0) / (b + 1.0)).min((ge + 1.0) / (b + 1.0))).min(1.0)
}

fn check_resamples(n_resamples: usize, needed: usize) -> Result<()> {
    if n_resamples < needed {
        return Err(Error::invalid(
            "n_resamples",
            format!("need at least {needed}, got {n_resamples}"),
        ));
    }
    Ok(())
}

/// Paired bootstrap p-value on within-pair differences.
pub fn bootstrap_p_differences(diffs: &[f64], n_resamples: usize, seed: u64) -> Result<InferenceResult> {
    check_resamples(n_resamples, 1)?;
    t_test_differences(diffs)?;
    let deltas: Vec<f64> = (0..n_resamples as u64)
        .into_par_iter()
        .map(|k| resample_mean(diffs, &mut rng::stream(seed, k)))
        .collect();
    Ok(InferenceResult {
        statistic: stats::mean(diffs),
        p_value: percentile_p(&deltas),
        df: None,
        family: TestFamily::BootstrapPaired,
        n_resamples: Some(n_resamples),
    })
}

/// Bootstrap p-value resampling each arm independently.
pub fn bootstrap_p_independent(treat: &[f64], control: &[f64], n_resamples: usize, seed: u64) -> Result<InferenceResult> {
    check_resamples(n_resamples, 1)?;
    t_test_independent(treat, control)?;
    let deltas: Vec<f64> = (0..n_resamples as u64)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, k);
            let mt = resample_mean(treat, &mut r);
            mt - resample_mean(control, &mut r)
        })
        .collect();
    Ok(InferenceResult {
        statistic: stats::mean(treat) - stats::mean(control),
        p_value: percentile_p(&deltas),
        df: None,
        family: TestFamily::BootstrapIndependent,
        n_resamples: Some(n_resamples),
    })
}

/// Bootstrap p-value for a plan: pairs as atoms when `paired`, otherwise
/// arms resampled independently.
pub fn bootstrap_p(
    plan: &AllocationPlan,
    outcomes: &ValueMap,
    paired: bool,
    n_resamples: usize,
    seed: u64,
) -> Result<InferenceResult> {
    if paired {
        let diffs: Vec<f64> = paired_outcomes(plan, outcomes)?
            .into_iter()
            .map(|(t, c)| t - c)
            .collect();
        bootstrap_p_differences(&diffs, n_resamples, seed)
    } else {
        let (t, c) = estimation::arm_outcomes(plan, outcomes)?;
        bootstrap_p_independent(&t, &c, n_resamples, seed)
    }
}

/// Sample variance of an estimator's delta over bootstrap resamples. COSS
/// plans resample pairs (the unpaired odd unit is left out); other plans
/// resample each arm at its own size. CUPED refits theta per resample.
pub fn bootstrap_variance(
    plan: &AllocationPlan,
    covariates: &ValueMap,
    outcomes: &ValueMap,
    method: Method,
    n_resamples: usize,
    seed: u64,
) -> Result<f64> {
    check_resamples(n_resamples, 2)?;
    let obs = if method.needs_covariate() {
        estimation::observations(plan, covariates, outcomes)?
    } else {
        let zero: ValueMap = plan.assignments().iter().map(|a| (a.id.clone(), 0.0)).collect();
        estimation::observations(plan, &zero, outcomes)?
    };
    // Validate once on the original sample so resamples only fail on
    // resample-specific degeneracy.
    estimation::estimate_observations(method, &obs)?;

    let deltas: Vec<Result<f64>> = if plan.is_paired() {
        let by_id: std::collections::BTreeMap<&str, Observation> = plan
            .assignments()
            .iter()
            .map(|a| a.id.as_str())
            .zip(obs.iter().copied())
            .collect();
        let pairs: Vec<(Observation, Observation)> =
            plan.pairs().into_iter().map(|(t, c)| (by_id[t], by_id[c])).collect();
        (0..n_resamples as u64)
            .into_par_iter()
            .map(|k| {
                let sample: Vec<Observation> = resample_pairs(&pairs, &mut rng::stream(seed, k))
                    .into_iter()
                    .flat_map(|(t, c)| [t, c])
                    .collect();
                estimation::estimate_observations(method, &sample).map(|e| e.delta)
            })
            .collect()
    } else {
        let t: Vec<Observation> = obs.iter().copied().filter(|o| o.arm == Arm::Treatment).collect();
        let c: Vec<Observation> = obs.iter().copied().filter(|o| o.arm == Arm::Control).collect();
        (0..n_resamples as u64)
            .into_par_iter()
            .map(|k| {
                let mut r = rng::stream(seed, k);
                let mut sample = resample_pairs(&t, &mut r);
                sample.extend(resample_pairs(&c, &mut r));
                estimation::estimate_observations(method, &sample).map(|e| e.delta)
            })
            .collect()
    };
    let deltas = deltas.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(stats::sample_variance(&deltas))
}
