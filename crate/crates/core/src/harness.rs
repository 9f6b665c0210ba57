//! Monte Carlo study runner: sample, allocate, reveal, estimate and test,
//! replicated across strategies, plus the table and histogram outputs built
//! from the replications.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::allocation::{coss_allocate_with, rct_allocate, AllocationPlan, Arm, ExperimentUnit};
use crate::error::{Error, Result};
use crate::estimation::{self, CupedAdjustment};
use crate::inference;
use crate::rng;
use crate::simgen::{self, PopulationUnit, SimulationConfig};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StrategyKind {
    Rct,
    Cuped,
    Coss,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::Rct, StrategyKind::Cuped, StrategyKind::Coss];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Rct => "RCT",
            StrategyKind::Cuped => "CUPED",
            StrategyKind::Coss => "COSS",
        }
    }

    /// Row label used in the printed tables.
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::Rct => "RCT(original)",
            StrategyKind::Cuped => "RCT(with CUPED)",
            StrategyKind::Coss => "COSS",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rct" => Ok(StrategyKind::Rct),
            "cuped" => Ok(StrategyKind::Cuped),
            "coss" => Ok(StrategyKind::Coss),
            _ => Err(Error::invalid("strategy", format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationSummary {
    pub strategy: StrategyKind,
    /// One estimate per replication, in replication order.
    pub deltas: Vec<f64>,
    pub mean: f64,
    /// Standard deviation of `deltas`; `None` with a single replication.
    pub se: Option<f64>,
    pub reject_rate_05: f64,
    /// Mean pooled x-y r^2 across replications (CUPED only).
    pub mean_r_squared: Option<f64>,
}

impl ReplicationSummary {
    fn from_draws(strategy: StrategyKind, draws: &[Draw], r_squared: Option<f64>) -> Self {
        let deltas: Vec<f64> = draws.iter().map(|d| d.delta).collect();
        let rejected = draws.iter().filter(|d| d.p.is_some_and(|p| p < 0.05)).count();
        let se = (deltas.len() > 1).then(|| stats::sample_sd(&deltas));
        Self {
            strategy,
            mean: stats::mean(&deltas),
            se,
            reject_rate_05: rejected as f64 / deltas.len() as f64,
            mean_r_squared: r_squared,
            deltas,
        }
    }
}

pub type StudyResult = BTreeMap<StrategyKind, ReplicationSummary>;

#[derive(Debug, Clone, Copy)]
struct Draw {
    delta: f64,
    /// `None` when the test is undefined (e.g. zero variance).
    p: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Replication {
    rct: Draw,
    cuped: Draw,
    cuped_r2: f64,
    coss: Draw,
}

/// Seeds of replication `r`: sample draw, RCT shuffle, COSS tie-breaks.
fn replication_seeds(master: u64, r: usize) -> (u64, u64, u64) {
    let s = rng::derive_seed(master, 1 + r as u64);
    (rng::derive_seed(s, 0), rng::derive_seed(s, 1), rng::derive_seed(s, 2))
}

fn replicate(config: &SimulationConfig, population: &[PopulationUnit], r: usize, want: &[StrategyKind]) -> Result<Replication> {
    let (sample_seed, rct_seed, coss_seed) = replication_seeds(config.seed, r);
    let sample = simgen::draw_sample(population, config.sample_size, sample_seed)?;
    let units: Vec<ExperimentUnit> = sample.iter().map(|u| u.to_unit()).collect();
    let covs = simgen::covariates(&sample);
    let empty = Draw { delta: f64::NAN, p: None };
    let mut out = Replication {
        rct: empty,
        cuped: empty,
        cuped_r2: f64::NAN,
        coss: empty,
    };

    if want.contains(&StrategyKind::Rct) || want.contains(&StrategyKind::Cuped) {
        let plan = rct_allocate(&units, rct_seed)?;
        let outcomes = simgen::reveal(&plan, &sample)?;
        if want.contains(&StrategyKind::Rct) {
            let (t, c) = estimation::arm_outcomes(&plan, &outcomes)?;
            out.rct = Draw {
                delta: estimation::diff_means_values(&t, &c)?.delta,
                p: inference::t_test_independent(&t, &c).ok().map(|r| r.p_value),
            };
        }
        if want.contains(&StrategyKind::Cuped) {
            let obs = estimation::observations(&plan, &covs, &outcomes)?;
            let xs: Vec<f64> = obs.iter().map(|o| o.covariate).collect();
            let ys: Vec<f64> = obs.iter().map(|o| o.outcome).collect();
            let adj = match estimation::fit_cuped_values(&xs, &ys) {
                Ok(a) => a,
                Err(Error::DegenerateCovariate) => CupedAdjustment::none(),
                Err(e) => return Err(e),
            };
            let (mut t, mut c) = (Vec::new(), Vec::new());
            for o in &obs {
                let v = adj.adjust(o.covariate, o.outcome);
                match o.arm {
                    Arm::Treatment => t.push(v),
                    Arm::Control => c.push(v),
                }
            }
            out.cuped = Draw {
                delta: estimation::diff_means_values(&t, &c)?.delta,
                p: inference::t_test_independent(&t, &c).ok().map(|r| r.p_value),
            };
            out.cuped_r2 = adj.r_squared;
        }
    }

    if want.contains(&StrategyKind::Coss) {
        let plan = coss_allocate_with(&units, coss_seed, config.coss_parity)?;
        let outcomes = simgen::reveal(&plan, &sample)?;
        let pairs = inference::paired_outcomes(&plan, &outcomes)?;
        let (t, c) = estimation::arm_outcomes(&plan, &outcomes)?;
        out.coss = Draw {
            delta: estimation::diff_means_values(&t, &c)?.delta,
            p: inference::t_test_paired(&pairs).ok().map(|r| r.p_value),
        };
    }
    Ok(out)
}

fn summarize(config: &SimulationConfig, strategies: &[StrategyKind]) -> Result<StudyResult> {
    config.validate()?;
    if config.replications == 0 {
        return Err(Error::invalid("replications", "must be at least 1"));
    }
    if strategies.is_empty() {
        return Err(Error::invalid("strategies", "at least one strategy is required"));
    }
    let population = simgen::generate_population(config)?;
    let reps: Vec<Replication> = (0..config.replications)
        .into_par_iter()
        .map(|r| replicate(config, &population, r, strategies))
        .collect::<Result<_>>()?;

    let mut result = StudyResult::new();
    for &s in strategies {
        let draws: Vec<Draw> = reps
            .iter()
            .map(|rep| match s {
                StrategyKind::Rct => rep.rct,
                StrategyKind::Cuped => rep.cuped,
                StrategyKind::Coss => rep.coss,
            })
            .collect();
        let r2 = (s == StrategyKind::Cuped).then(|| reps.iter().map(|r| r.cuped_r2).sum::<f64>() / reps.len() as f64);
        result.insert(s, ReplicationSummary::from_draws(s, &draws, r2));
    }
    Ok(result)
}

/// Runs `config.replications` replications of every requested strategy.
/// All strategies see the same sample within a replication; RCT and CUPED
/// also share one allocation. Results depend only on `config.seed`.
pub fn run_study(config: &SimulationConfig, strategies: &[StrategyKind]) -> Result<StudyResult> {
    summarize(config, strategies)
}

/// The AA variant of `config`: no treatment effect and equal noise.
pub fn aa_config(config: &SimulationConfig) -> SimulationConfig {
    SimulationConfig {
        mu: 0.0,
        eps1: config.eps0,
        ..config.clone()
    }
}

/// Runs the study with `mu = 0` and `eps1 = eps0`, so `reject_rate_05` is
/// the empirical type-1 error.
pub fn run_aa_test(config: &SimulationConfig, strategies: &[StrategyKind]) -> Result<StudyResult> {
    summarize(&aa_config(config), strategies)
}

/// Runs `f` on a pool capped at `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::invalid("threads", "must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid("threads", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Equal-width histogram over `[min, max]`; the maximum lands in the last
/// bin. Returns `(bin_center, count)`.
pub fn emit_histogram(deltas: &[f64], bins: usize) -> Result<Vec<(f64, usize)>> {
    if deltas.is_empty() {
        return Err(Error::EmptyInput);
    }
    if bins == 0 {
        return Err(Error::invalid("bins", "must be at least 1"));
    }
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("deltas", "values must be finite"));
    }
    let lo = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &d in deltas {
        let k = if width > 0.0 {
            (((d - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[k] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, n)| (lo + (k as f64 + 0.5) * width, n))
        .collect())
}

pub fn histogram_csv(hist: &[(f64, usize)]) -> String {
    let mut s = String::from("bin_center,count\n");
    for (center, n) in hist {
        let _ = writeln!(s, "{center:.6},{n}");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stat {
    Mean,
    Se,
}

impl Stat {
    pub fn name(self) -> &'static str {
        match self {
            Stat::Mean => "mean",
            Stat::Se => "se",
        }
    }
}

/// A published cell with the band this implementation is held to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub strategy: StrategyKind,
    pub stat: Stat,
    pub paper: f64,
    pub low: f64,
    pub high: f64,
}

impl Reference {
    fn relative(strategy: StrategyKind, stat: Stat, paper: f64, tol: f64) -> Self {
        Self {
            strategy,
            stat,
            paper,
            low: paper * (1.0 - tol),
            high: paper * (1.0 + tol),
        }
    }

    fn band(strategy: StrategyKind, stat: Stat, paper: f64, low: f64, high: f64) -> Self {
        Self {
            strategy,
            stat,
            paper,
            low,
            high,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaperTable {
    Linear,
    Quadratic,
}

impl PaperTable {
    pub fn number(self) -> u8 {
        match self {
            PaperTable::Linear => 1,
            PaperTable::Quadratic => 2,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(PaperTable::Linear),
            2 => Some(PaperTable::Quadratic),
            _ => None,
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            PaperTable::Linear => "Linear Relationship - mean and standard error of treatment effect",
            PaperTable::Quadratic => "Quadratic Relationship - mean and standard error of treatment effect",
        }
    }

    // 0.318 is a reported standard error, not 1/pi.
    #[allow(clippy::approx_constant)]
    pub fn references(self) -> Vec<Reference> {
        use Stat::*;
        use StrategyKind::*;
        match self {
            PaperTable::Linear => vec![
                Reference::band(Rct, Mean, 0.998, 0.95, 1.05),
                Reference::relative(Rct, Se, 0.874, 0.10),
                Reference::band(Cuped, Mean, 1.000, 0.95, 1.05),
                Reference::relative(Cuped, Se, 0.313, 0.10),
                Reference::band(Coss, Mean, 0.899, 0.88, 1.05),
                Reference::relative(Coss, Se, 0.318, 0.10),
            ],
            PaperTable::Quadratic => vec![
                Reference::band(Rct, Mean, 0.987, 0.937, 1.037),
                Reference::relative(Rct, Se, 1.119, 0.15),
                Reference::band(Cuped, Mean, 0.987, 0.937, 1.037),
                Reference::relative(Cuped, Se, 1.115, 0.15),
                Reference::band(Coss, Mean, 1.002, 0.952, 1.052),
                Reference::relative(Coss, Se, 0.318, 0.15),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub reference: Reference,
    pub observed: Option<f64>,
}

impl Comparison {
    pub fn pass(&self) -> bool {
        self.observed
            .is_some_and(|v| v >= self.reference.low && v <= self.reference.high)
    }
}

pub fn compare(table: PaperTable, result: &StudyResult) -> Vec<Comparison> {
    table
        .references()
        .into_iter()
        .map(|reference| {
            let observed = result.get(&reference.strategy).and_then(|s| match reference.stat {
                Stat::Mean => Some(s.mean),
                Stat::Se => s.se,
            });
            Comparison { reference, observed }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.3}"))
}

/// Aligned text table with the strategy, mean, standard error and rejection
/// rate columns.
pub fn format_text(title: &str, result: &StudyResult) -> String {
    let mut s = format!("{title}\n");
    let _ = writeln!(s, "{:<18}{:>10}{:>16}{:>12}", "Strategy", "mean", "standard error", "reject@.05");
    for summary in result.values() {
        let _ = writeln!(
            s,
            "{:<18}{:>10.3}{:>16}{:>12.4}",
            summary.strategy.label(),
            summary.mean,
            fmt_opt(summary.se),
            summary.reject_rate_05
        );
    }
    s
}

pub fn format_csv(result: &StudyResult) -> String {
    let mut s = String::from("strategy,mean,se,reject_rate_05,replications\n");
    for summary in result.values() {
        let se = summary.se.map_or_else(String::new, |v| format!("{v:.6}"));
        let _ = writeln!(
            s,
            "{},{:.6},{},{:.6},{}",
            summary.strategy.name(),
            summary.mean,
            se,
            summary.reject_rate_05,
            summary.deltas.len()
        );
    }
    s
}

pub fn format_comparison(table: PaperTable, comparisons: &[Comparison]) -> String {
    let mut s = format!("Comparison with published Table {}\n", table.number());
    for c in comparisons {
        let r = c.reference;
        let _ = writeln!(
            s,
            "{} {:<6}{:<5} paper={:.3} observed={} band=[{:.3}, {:.3}]",
            if c.pass() { "PASS" } else { "FAIL" },
            r.strategy.name(),
            r.stat.name(),
            r.paper,
            fmt_opt(c.observed),
            r.low,
            r.high
        );
    }
    s
}

/// The plan a replication would use for `strategy`, exposed for inspection.
pub fn replication_plan(
    config: &SimulationConfig,
    population: &[PopulationUnit],
    replication: usize,
    strategy: StrategyKind,
) -> Result<AllocationPlan> {
    let (sample_seed, rct_seed, coss_seed) = replication_seeds(config.seed, replication);
    let sample = simgen::draw_sample(population, config.sample_size, sample_seed)?;
    let units: Vec<ExperimentUnit> = sample.iter().map(|u| u.to_unit()).collect();
    match strategy {
        StrategyKind::Coss => coss_allocate_with(&units, coss_seed, config.coss_parity),
        _ => rct_allocate(&units, rct_seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::Relationship;

    fn small(reps: usize) -> SimulationConfig {
        SimulationConfig {
            population: 2_000,
            sample_size: 100,
            replications: reps,
            ..SimulationConfig::default()
        }
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(emit_histogram(&[0.0, 0.0, 0.0], 1).unwrap(), vec![(0.0, 3)]);
        let h = emit_histogram(&[0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(h.iter().map(|b| b.1).collect::<Vec<_>>(), vec![2, 2]);
        assert_eq!(h[0].0, 0.75);
        assert_eq!(h[1].0, 2.25);
        assert_eq!(emit_histogram(&[], 3), Err(Error::EmptyInput));
        assert!(emit_histogram(&[1.0], 0).is_err());
        let h = emit_histogram(&[5.0, 5.0], 4).unwrap();
        assert_eq!(h.iter().map(|b| b.1).sum::<usize>(), 2);
    }

    #[test]
    fn histogram_counts_sum_to_input() {
        let xs: Vec<f64> = (0..997).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        for bins in [1, 3, 10, 64] {
            let h = emit_histogram(&xs, bins).unwrap();
            assert_eq!(h.len(), bins);
            assert_eq!(h.iter().map(|b| b.1).sum::<usize>(), xs.len());
        }
    }

    #[test]
    fn summary_statistics_match_deltas() {
        let res = run_study(&small(40), &StrategyKind::ALL).unwrap();
        for s in res.values() {
            assert_eq!(s.deltas.len(), 40);
            assert!((s.mean - stats::mean(&s.deltas)).abs() < 1e-12);
            assert!((s.se.unwrap() - stats::sample_sd(&s.deltas)).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&s.reject_rate_05));
        }
        assert!(res[&StrategyKind::Cuped].mean_r_squared.is_some());
        assert!(res[&StrategyKind::Rct].mean_r_squared.is_none());
    }

    #[test]
    fn single_replication_has_undefined_se() {
        let res = run_study(&small(1), &[StrategyKind::Coss]).unwrap();
        let s = &res[&StrategyKind::Coss];
        assert_eq!(s.se, None);
        assert_eq!(s.mean, s.deltas[0]);
        assert!(format_text("t", &res).contains("undefined"));
    }

    #[test]
    fn noiseless_effect_is_recovered_exactly() {
        let cfg = SimulationConfig {
            relationship: Relationship::Linear,
            b: 0.0,
            eps0: 0.0,
            eps1: 0.0,
            ..small(10)
        };
        let res = run_study(&cfg, &StrategyKind::ALL).unwrap();
        for kind in [StrategyKind::Rct, StrategyKind::Coss] {
            assert!(res[&kind].deltas.iter().all(|&d| (d - 1.0).abs() < 1e-12), "{kind}");
        }
    }

    #[test]
    fn strategies_share_the_sample() {
        // Rebuild each replication from its seeds: the RCT delta must come from
        // that sample, and COSS must allocate the very same units.
        let cfg = small(10);
        let pop = simgen::generate_population(&cfg).unwrap();
        let res = run_study(&cfg, &[StrategyKind::Rct]).unwrap();
        for (r, &delta) in res[&StrategyKind::Rct].deltas.iter().enumerate() {
            let (sample_seed, _, _) = replication_seeds(cfg.seed, r);
            let sample = simgen::draw_sample(&pop, cfg.sample_size, sample_seed).unwrap();
            let plan = replication_plan(&cfg, &pop, r, StrategyKind::Rct).unwrap();
            let y = simgen::reveal(&plan, &sample).unwrap();
            assert_eq!(estimation::diff_means(&plan, &y).unwrap().delta, delta);
            let coss = replication_plan(&cfg, &pop, r, StrategyKind::Coss).unwrap();
            let mut a: Vec<&str> = plan.assignments().iter().map(|a| a.id.as_str()).collect();
            let mut b: Vec<&str> = coss.assignments().iter().map(|a| a.id.as_str()).collect();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn subset_of_strategies_reproduces_full_run() {
        let cfg = small(12);
        let full = run_study(&cfg, &StrategyKind::ALL).unwrap();
        let coss = run_study(&cfg, &[StrategyKind::Coss]).unwrap();
        assert_eq!(full[&StrategyKind::Coss], coss[&StrategyKind::Coss]);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let cfg = small(30);
        let one = with_threads(Some(1), || run_study(&cfg, &StrategyKind::ALL)).unwrap().unwrap();
        let many = with_threads(Some(8), || run_study(&cfg, &StrategyKind::ALL)).unwrap().unwrap();
        assert_eq!(one, many);
        assert_eq!(format_csv(&one), format_csv(&many));
    }

    #[test]
    fn noiseless_constant_aa_never_rejects() {
        let cfg = SimulationConfig {
            b: 0.0,
            eps0: 0.0,
            eps1: 0.0,
            ..small(20)
        };
        let res = run_aa_test(&cfg, &StrategyKind::ALL).unwrap();
        for s in res.values() {
            assert!(s.deltas.iter().all(|&d| d == 0.0), "{:?}", s.strategy);
            assert_eq!(s.reject_rate_05, 0.0);
        }
    }

    #[test]
    fn aa_config_forces_null() {
        let aa = aa_config(&SimulationConfig::default());
        assert_eq!(aa.mu, 0.0);
        assert_eq!(aa.eps1, aa.eps0);
    }

    #[test]
    fn rejects_invalid_requests() {
        assert!(run_study(&small(0), &StrategyKind::ALL).is_err());
        assert!(run_study(&small(2), &[]).is_err());
        assert!(with_threads(Some(0), || ()).is_err());
    }

    #[test]
    fn comparison_bands() {
        let refs = PaperTable::Linear.references();
        let se = refs.iter().find(|r| r.strategy == StrategyKind::Rct && r.stat == Stat::Se).unwrap();
        assert!((se.low - 0.7866).abs() < 1e-9 && (se.high - 0.9614).abs() < 1e-9);
        let c = Comparison {
            reference: *se,
            observed: Some(0.9),
        };
        assert!(c.pass());
        assert!(!Comparison { observed: None, ..c }.pass());
    }

    #[test]
    fn replication_plan_matches_study_pairs() {
        let cfg = small(3);
        let pop = simgen::generate_population(&cfg).unwrap();
        let plan = replication_plan(&cfg, &pop, 2, StrategyKind::Coss).unwrap();
        assert!(plan.is_paired());
        assert_eq!(plan.len(), cfg.sample_size);
    }
}
