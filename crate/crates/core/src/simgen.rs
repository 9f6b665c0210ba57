//! Simulated populations with treated and untreated potential outcomes.
//!
//! ```text
//! linear:    y0 = b x + c + N(0, eps0^2)          y1 = b x + c + N(mu, eps1^2)
//! quadratic: y0 = a x^2 + b x + c + N(0, eps0^2)  y1 = a x^2 + b x + c + N(mu, eps1^2)
//! ```
//!
//! `eps0` and `eps1` are standard deviations and the two noise draws are
//! independent. The covariate defaults to a standard normal; the bundled
//! presets use a width-10 uniform covariate.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::allocation::{AllocationPlan, Arm, ExperimentUnit, Parity};
use crate::error::{Error, Result};
use crate::estimation::ValueMap;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relationship {
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "distribution", rename_all = "lowercase", deny_unknown_fields)]
pub enum CovariateDist {
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
}

impl Default for CovariateDist {
    fn default() -> Self {
        CovariateDist::Normal { mean: 0.0, sd: 1.0 }
    }
}

impl CovariateDist {
    pub fn mean(&self) -> f64 {
        match *self {
            CovariateDist::Normal { mean, .. } => mean,
            CovariateDist::Uniform { low, high } => 0.5 * (low + high),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            CovariateDist::Normal { sd, .. } => sd * sd,
            CovariateDist::Uniform { low, high } => (high - low).powi(2) / 12.0,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            CovariateDist::Normal { mean, sd } => {
                if !mean.is_finite() || !(sd.is_finite() && sd > 0.0) {
                    return Err(Error::invalid("covariate", "normal needs finite mean and sd > 0"));
                }
            }
            CovariateDist::Uniform { low, high } => {
                if !(low.is_finite() && high.is_finite() && low < high) {
                    return Err(Error::invalid("covariate", "uniform needs finite low < high"));
                }
            }
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            CovariateDist::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            CovariateDist::Uniform { low, high } => {
                Uniform::new(low, high).expect("validated bounds").sample(rng)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub relationship: Relationship,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub mu: f64,
    pub eps0: f64,
    pub eps1: f64,
    pub covariate: CovariateDist,
    pub population: usize,
    pub sample_size: usize,
    pub replications: usize,
    pub seed: u64,
    pub coss_parity: Parity,
}

/// Seed used whenever none is given.
pub const DEFAULT_SEED: u64 = 20_240_229;

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            relationship: Relationship::Linear,
            a: 1.0,
            b: 2.0,
            c: 1.0,
            mu: 1.0,
            eps0: 1.0,
            eps1: 3.0,
            covariate: CovariateDist::default(),
            population: 10_000,
            sample_size: 200,
            replications: 5_000,
            seed: DEFAULT_SEED,
            coss_parity: Parity::TreatmentFirst,
        }
    }
}

pub const PRESET_NAMES: [&str; 3] = ["linear.paper", "quadratic.paper", "quadratic.b0"];

const LINEAR_PAPER: &str = include_str!("../presets/linear.paper.toml");
const QUADRATIC_PAPER: &str = include_str!("../presets/quadratic.paper.toml");
const QUADRATIC_B0: &str = include_str!("../presets/quadratic.b0.toml");

impl SimulationConfig {
    /// Parses and validates a TOML config.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SimulationConfig = toml::from_str(text).map_err(|e| {
            Error::invalid("config", e.to_string().trim_end().replace('\n', " "))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn preset(name: &str) -> Option<Self> {
        let text = match name {
            "linear.paper" => LINEAR_PAPER,
            "quadratic.paper" => QUADRATIC_PAPER,
            "quadratic.b0" => QUADRATIC_B0,
            _ => return None,
        };
        Some(Self::from_toml(text).expect("bundled preset is valid"))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("b", self.b), ("c", self.c), ("mu", self.mu)] {
            if !v.is_finite() {
                return Err(Error::invalid(name, "must be finite"));
            }
        }
        for (name, v) in [("eps0", self.eps0), ("eps1", self.eps1)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, "must be a finite standard deviation >= 0"));
            }
        }
        self.covariate.validate()?;
        if self.population == 0 {
            return Err(Error::invalid("population", "must be positive"));
        }
        if self.sample_size > self.population {
            return Err(Error::SampleTooLarge {
                requested: self.sample_size,
                available: self.population,
            });
        }
        if self.sample_size % 2 != 0 {
            return Err(Error::invalid("sample_size", "must be even"));
        }
        if self.sample_size < 4 {
            return Err(Error::invalid("sample_size", "must be at least 4"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("replications", "must be at least 1"));
        }
        Ok(())
    }

    /// Noise-free outcome `f(x)`.
    pub fn signal(&self, x: f64) -> f64 {
        match self.relationship {
            Relationship::Linear => self.b * x + self.c,
            Relationship::Quadratic => self.a * x * x + self.b * x + self.c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationUnit {
    pub id: String,
    pub x: f64,
    pub y0: f64,
    pub y1: f64,
}

/// A sampled unit. Its potential outcomes are only reachable through
/// [`reveal`], which hands out the one matching the assigned arm.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledUnit {
    id: String,
    covariate: f64,
    y0: f64,
    y1: f64,
}

impl SampledUnit {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn covariate(&self) -> f64 {
        self.covariate
    }

    pub fn to_unit(&self) -> ExperimentUnit {
        ExperimentUnit::new(self.id.clone(), self.covariate)
    }

    fn observe(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Treatment => self.y1,
            Arm::Control => self.y0,
        }
    }
}

pub fn generate_population(config: &SimulationConfig) -> Result<Vec<PopulationUnit>> {
    config.validate()?;
    let mut r = rng::stream(config.seed, 0);
    let noise0 = Normal::new(0.0, config.eps0).map_err(|e| Error::invalid("eps0", e.to_string()))?;
    let noise1 = Normal::new(config.mu, config.eps1).map_err(|e| Error::invalid("eps1", e.to_string()))?;
    let width = config.population.to_string().len();
    Ok((0..config.population)
        .map(|i| {
            let x = config.covariate.sample(&mut r);
            let f = config.signal(x);
            let y0 = f + noise0.sample(&mut r);
            let y1 = f + noise1.sample(&mut r);
            PopulationUnit {
                id: format!("u{i:0width$}"),
                x,
                y0,
                y1,
            }
        })
        .collect())
}

/// Uniform sample without replacement, returned in population order.
pub fn draw_sample(population: &[PopulationUnit], sample_size: usize, seed: u64) -> Result<Vec<SampledUnit>> {
    if sample_size > population.len() {
        return Err(Error::SampleTooLarge {
            requested: sample_size,
            available: population.len(),
        });
    }
    let mut r = rng::root(seed);
    let mut idx = rand::seq::index::sample(&mut r, population.len(), sample_size).into_vec();
    idx.sort_unstable();
    Ok(idx
        .into_iter()
        .map(|i| {
            let p = &population[i];
            SampledUnit {
                id: p.id.clone(),
                covariate: p.x,
                y0: p.y0,
                y1: p.y1,
            }
        })
        .collect())
}

/// Observed outcomes under `plan`: y1 for treated units, y0 for controls.
pub fn reveal(plan: &AllocationPlan, sample: &[SampledUnit]) -> Result<ValueMap> {
    let by_id: BTreeMap<&str, &SampledUnit> = sample.iter().map(|u| (u.id.as_str(), u)).collect();
    plan.assignments()
        .iter()
        .map(|a| {
            let u = by_id
                .get(a.id.as_str())
                .ok_or_else(|| Error::MissingOutcome(a.id.clone()))?;
            Ok((a.id.clone(), u.observe(a.arm)))
        })
        .collect()
}

pub fn covariates(sample: &[SampledUnit]) -> ValueMap {
    sample.iter().map(|u| (u.id.clone(), u.covariate)).collect()
}

pub fn write_population_csv<W: Write>(out: W, population: &[PopulationUnit]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "x", "y0", "y1"])?;
    for p in population {
        w.write_record([p.id.clone(), p.x.to_string(), p.y0.to_string(), p.y1.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
