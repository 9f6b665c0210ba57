//! Bias and variance diagnostics for COSS under `Y = f(X) + e`, with `X`
//! standard normal and `f` monotone.
//!
//! With treatment-first parity and no treatment effect, the COSS estimate is
//! `delta = (1/N) * sum_i (Y_(2i) - Y_(2i+1))` over `N` pairs of order
//! statistics. Its expectation telescopes against the non-negative odd
//! spacings and is bounded by `(E[max f(X)] - E[min f(X)]) / N`. Its variance
//! splits into a noise term `2 Var(e) / N = 2 Var(Y)(1 - r^2) / N` and a pair
//! term bounded by `(Var f(X_max) + Var f(X_min)) / N^2`.
//!
//! Extreme order statistics are drawn directly: the maximum of `n` standard
//! normals is `Phi^-1(U^(1/n))`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::allocation::coss_rank_order;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

/// Families with a closed-form bias decay rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RateFamily {
    Uniform,
    Normal,
    ShiftedPoisson,
}

impl RateFamily {
    pub const ALL: [RateFamily; 3] = [RateFamily::Uniform, RateFamily::Normal, RateFamily::ShiftedPoisson];

    pub fn name(self) -> &'static str {
        match self {
            RateFamily::Uniform => "uniform",
            RateFamily::Normal => "normal",
            RateFamily::ShiftedPoisson => "shifted-poisson",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasRateSpec {
    pub distribution: RateFamily,
    /// Number of pairs.
    pub n: usize,
}

/// Bias decay rate: `1/N`, `sqrt(2 ln N)/N` or `ln N / (N ln ln N)`.
pub fn bias_rate(spec: BiasRateSpec) -> Result<f64> {
    if spec.n < 3 {
        return Err(Error::NTooSmall { needed: 3, have: spec.n });
    }
    let n = spec.n as f64;
    Ok(match spec.distribution {
        RateFamily::Uniform => 1.0 / n,
        RateFamily::Normal => (2.0 * n.ln()).sqrt() / n,
        RateFamily::ShiftedPoisson => n.ln() / (n * n.ln().ln()),
    })
}

/// A monotone outcome function of the covariate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Link {
    Affine { slope: f64, intercept: f64 },
    Constant(f64),
    /// `exp(rate * x)`.
    Exponential { rate: f64 },
}

impl Link {
    pub fn identity() -> Self {
        Link::Affine {
            slope: 1.0,
            intercept: 0.0,
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Link::Affine { slope, intercept } => slope * x + intercept,
            Link::Constant(c) => c,
            Link::Exponential { rate } => (rate * x).exp(),
        }
    }

    /// `Var f(X)` for standard normal `X`.
    pub fn variance(&self) -> f64 {
        match *self {
            Link::Affine { slope, .. } => slope * slope,
            Link::Constant(_) => 0.0,
            Link::Exponential { rate } => {
                let s2 = rate * rate;
                s2.exp_m1() * s2.exp()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Link::Affine { slope, intercept } => slope.is_finite() && intercept.is_finite(),
            Link::Constant(c) => c.is_finite(),
            Link::Exponential { rate } => rate.is_finite() && rate.abs() <= 5.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("link", "coefficients must be finite (|rate| <= 5)"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgpModel {
    pub link: Link,
    /// Standard deviation of the additive noise.
    pub noise_sd: f64,
}

impl DgpModel {
    pub fn new(link: Link, noise_sd: f64) -> Self {
        Self { link, noise_sd }
    }

    pub fn outcome_variance(&self) -> f64 {
        self.link.variance() + self.noise_sd * self.noise_sd
    }

    /// Share of outcome variance explained by `f(X)`.
    pub fn r_squared(&self) -> f64 {
        let v = self.outcome_variance();
        if v == 0.0 {
            0.0
        } else {
            self.link.variance() / v
        }
    }

    fn validate(&self) -> Result<()> {
        self.link.validate()?;
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::invalid("noise_sd", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    /// Standard error of `value`.
    pub mc_se: f64,
    /// Standard deviation of the per-replication draws (before any scaling).
    pub sd: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceDecomposition {
    /// `2 Var(Y)(1 - r^2) / N`.
    pub leading_term: f64,
    /// `(Var f(X_max) + Var f(X_min)) / N^2`.
    pub pair_term_bound: f64,
    pub pair_term_mc_se: f64,
}

const CHUNK: usize = 512;

/// Runs `draw` once per replication, in fixed-size chunks with one stream per
/// chunk, and returns the draws in replication order.
fn replicate<F>(reps: usize, seed: u64, draw: F) -> Vec<f64>
where
    F: Fn(&mut StreamRng) -> f64 + Sync,
{
    let chunks = reps.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut r = rng::stream(seed, c as u64);
            let len = CHUNK.min(reps - c * CHUNK);
            (0..len).map(|_| draw(&mut r)).collect::<Vec<_>>()
        })
        .collect()
}

fn summarize(draws: &[f64]) -> (f64, f64) {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = if draws.len() > 1 {
        draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn unit_open(r: &mut StreamRng) -> f64 {
    loop {
        let u: f64 = r.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Maximum of `n` i.i.d. standard normals, drawn by inverting its CDF.
pub fn sample_normal_max(n: usize, r: &mut StreamRng) -> f64 {
    let std = Normal::standard();
    // 1 - U^(1/n), computed without cancellation.
    let tail = -(unit_open(r).ln() / n as f64).exp_m1();
    -std.inverse_cdf(tail)
}

fn check_pairs(n_pairs: usize, needed: usize) -> Result<()> {
    if n_pairs < needed {
        return Err(Error::NTooSmall {
            needed,
            have: n_pairs,
        });
    }
    Ok(())
}

fn check_reps(reps: usize, needed: usize) -> Result<()> {
    if reps < needed {
        return Err(Error::invalid("reps", format!("need at least {needed}, got {reps}")));
    }
    Ok(())
}

/// Monte Carlo estimate of `(E[max f(X)] - E[min f(X)]) / N` over `2N`
/// standard-normal draws.
pub fn bias_bound_mc(model: &DgpModel, n_pairs: usize, reps: usize, seed: u64) -> Result<McEstimate> {
    model.validate()?;
    check_pairs(n_pairs, 1)?;
    check_reps(reps, 100)?;
    let n = 2 * n_pairs;
    let link = model.link;
    let draws = replicate(reps, seed, |r| {
        let hi = sample_normal_max(n, r);
        let lo = -sample_normal_max(n, r);
        let (a, b) = (link.eval(hi), link.eval(lo));
        (a - b).abs()
    });
    let (mean, sd) = summarize(&draws);
    let np = n_pairs as f64;
    Ok(McEstimate {
        value: mean / np,
        mc_se: sd / (reps as f64).sqrt() / np,
        sd,
        reps,
    })
}

/// COSS estimate under no treatment effect on freshly simulated data, so its
/// mean is the allocation bias. `sd` is the spread of the per-replication
/// estimates, i.e. the estimator's standard error.
pub fn empirical_bias(model: &DgpModel, n_pairs: usize, reps: usize, seed: u64) -> Result<McEstimate> {
    model.validate()?;
    check_pairs(n_pairs, 1)?;
    check_reps(reps, 1_000)?;
    let n = 2 * n_pairs;
    let m = *model;
    let draws = replicate(reps, seed, |r| {
        let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(r)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let z: f64 = StandardNormal.sample(r);
                m.link.eval(x) + m.noise_sd * z
            })
            .collect();
        let tie_seed: u64 = r.random();
        let order = coss_rank_order(&xs, tie_seed);
        let diff: f64 = order.chunks_exact(2).map(|p| ys[p[0]] - ys[p[1]]).sum();
        diff / n_pairs as f64
    });
    let (mean, sd) = summarize(&draws);
    Ok(McEstimate {
        value: mean,
        mc_se: sd / (reps as f64).sqrt(),
        sd,
        reps,
    })
}

pub fn variance_decomposition(model: &DgpModel, n_pairs: usize, reps: usize, seed: u64) -> Result<VarianceDecomposition> {
    model.validate()?;
    check_pairs(n_pairs, 2)?;
    check_reps(reps, 100)?;
    let n = 2 * n_pairs;
    let np = n_pairs as f64;
    let link = model.link;
    let hi = replicate(reps, rng::derive_seed(seed, 1), |r| link.eval(sample_normal_max(n, r)));
    let lo = replicate(reps, rng::derive_seed(seed, 2), |r| link.eval(-sample_normal_max(n, r)));
    let (_, sd_hi) = summarize(&hi);
    let (_, sd_lo) = summarize(&lo);
    let (v_hi, v_lo) = (sd_hi * sd_hi, sd_lo * sd_lo);
    // Sample variance has relative standard error ~ sqrt(2 / (reps - 1)) for
    // near-normal draws.
    let rel = (2.0 / (reps as f64 - 1.0)).sqrt();
    let leading = 2.0 * model.outcome_variance() * (1.0 - model.r_squared()) / np;
    Ok(VarianceDecomposition {
        leading_term: leading,
        pair_term_bound: (v_hi + v_lo) / (np * np),
        pair_term_mc_se: rel * (v_hi * v_hi + v_lo * v_lo).sqrt() / (np * np),
    })
}
