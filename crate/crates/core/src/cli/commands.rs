use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::allocation::{self, Arm, Parity, Strategy};
use crate::estimation::{self, CupedAdjustment, EffectEstimate, Method, ValueMap};
use crate::harness::{self, PaperTable, StrategyKind, StudyResult};
use crate::inference::{self, InferenceResult};
use crate::rng;
use crate::simgen::{self, Relationship, SimulationConfig};
use crate::theory::{self, BiasRateSpec, DgpModel, Link, RateFamily};

use super::files::{self, Table};
use super::{
    AllocateArgs, BiasArgs, CliError, Command, Context, EstimateArgs, Format, LinkArg, MethodArg, ParityArg,
    SimulateArgs, StrategyArg, StudyArgs,
};

pub fn dispatch(command: Command, ctx: &mut Context<'_>) -> Result<(), CliError> {
    match command {
        Command::Allocate(a) => allocate(a, ctx),
        Command::Estimate(a) => estimate(a, ctx),
        Command::Simulate(a) => simulate(a, ctx),
        Command::AaTest(a) => aa_test(a, ctx),
        Command::BiasDiagnostics(a) => bias_diagnostics(a, ctx),
    }
}

fn allocate(args: AllocateArgs, ctx: &mut Context<'_>) -> Result<(), CliError> {
    let units = files::read_units(&args.input, &args.id_column, &args.covariate_column)?;
    let strategy = match args.strategy {
        StrategyArg::Coss => Strategy::Coss,
        StrategyArg::Rct => Strategy::Rct,
    };
    let parity = match args.parity {
        ParityArg::TreatmentFirst => Parity::TreatmentFirst,
        ParityArg::ControlFirst => Parity::ControlFirst,
    };
    let plan = allocation::allocate(&units, strategy, ctx.seed_or_default(), parity)?;
    let csv = files::allocation_csv(&plan);
    match ctx.output.clone() {
        Some(path) => {
            files::write_atomic(&path, csv.as_bytes())?;
            let msg = format!(
                "allocated {} units ({} treatment, {} control) to {}\n",
                plan.len(),
                plan.count(Arm::Treatment),
                plan.count(Arm::Control),
                path.display()
            );
            ctx.print(&msg)
        }
        None => ctx.print(&csv),
    }
}

/// Reads `column` for every id in `ids`, listing the ids with no value.
fn join_column(table: &Table, id_col: usize, col: usize, ids: &[&str], what: &str) -> Result<ValueMap, CliError> {
    let mut all = BTreeMap::new();
    for (line, row) in table.rows() {
        let id = table.id(line, row, id_col)?;
        if let Some(v) = table.number(line, row, col)? {
            if all.insert(id.clone(), v).is_some() {
                return Err(crate::Error::DuplicateId(id).into());
            }
        }
    }
    let missing: Vec<&str> = ids.iter().copied().filter(|id| !all.contains_key(*id)).collect();
    if !missing.is_empty() {
        return Err(CliError::User(format!(
            "{} allocated unit(s) have no {what}: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok(ids.iter().map(|&id| (id.to_owned(), all[id])).collect())
}

struct EstimateReport {
    method: Method,
    strategy: Strategy,
    estimate: EffectEstimate,
    cuped: Option<CupedAdjustment>,
    test: Option<InferenceResult>,
    bootstrap: Option<InferenceResult>,
    bootstrap_variance: Option<(usize, f64)>,
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl EstimateReport {
    fn csv(&self) -> String {
        let mut s = String::from(
            "method,strategy,delta,se,n_treat,n_control,test,statistic,df,p_value,theta,r_squared,\
             bootstrap_test,bootstrap_resamples,bootstrap_p,bootstrap_variance_resamples,bootstrap_variance\n",
        );
        let e = &self.estimate;
        let fields = [
            self.method.name().to_owned(),
            self.strategy.name().to_owned(),
            e.delta.to_string(),
            e.se.to_string(),
            e.n_treat.to_string(),
            e.n_control.to_string(),
            self.test.map_or_else(String::new, |t| t.family.name().to_owned()),
            num(self.test.map(|t| t.statistic)),
            num(self.test.and_then(|t| t.df)),
            num(self.test.map(|t| t.p_value)),
            num(self.cuped.map(|c| c.theta)),
            num(self.cuped.map(|c| c.r_squared)),
            self.bootstrap.map_or_else(String::new, |b| b.family.name().to_owned()),
            self.bootstrap
                .and_then(|b| b.n_resamples)
                .map_or_else(String::new, |n| n.to_string()),
            num(self.bootstrap.map(|b| b.p_value)),
            self.bootstrap_variance.map_or_else(String::new, |(n, _)| n.to_string()),
            num(self.bootstrap_variance.map(|(_, v)| v)),
        ];
        s.push_str(&fields.join(","));
        s.push('\n');
        s
    }

    fn text(&self) -> String {
        let e = &self.estimate;
        let mut s = String::new();
        let _ = writeln!(s, "method             {}", self.method);
        let _ = writeln!(s, "allocation         {}", self.strategy);
        let _ = writeln!(s, "units              {} treatment, {} control", e.n_treat, e.n_control);
        let _ = writeln!(s, "delta              {:.6}", e.delta);
        let _ = writeln!(s, "se                 {:.6}", e.se);
        if let Some(c) = self.cuped {
            let _ = writeln!(s, "theta              {:.6}", c.theta);
            let _ = writeln!(s, "r_squared          {:.6}", c.r_squared);
        }
        match self.test {
            Some(t) => {
                let _ = writeln!(s, "test               {}", t.family.name());
                let _ = writeln!(s, "statistic          {:.6}", t.statistic);
                if let Some(df) = t.df {
                    let _ = writeln!(s, "df                 {df:.3}");
                }
                let _ = writeln!(s, "p_value            {:.6}", t.p_value);
            }
            None => {
                let _ = writeln!(s, "p_value            undefined");
            }
        }
        if let Some(b) = self.bootstrap {
            let _ = writeln!(
                s,
                "bootstrap p        {:.6} ({}, {} resamples)",
                b.p_value,
                b.family.name(),
                b.n_resamples.unwrap_or(0)
            );
        }
        if let Some((n, v)) = self.bootstrap_variance {
            let _ = writeln!(s, "bootstrap variance {v:.6} ({n} resamples)");
        }
        s
    }
}

fn estimate(args: EstimateArgs, ctx: &mut Context<'_>) -> Result<(), CliError> {
    let method = if args.cuped {
        Method::Cuped
    } else {
        match args.method {
            MethodArg::DiffMeans => Method::DiffMeans,
            MethodArg::Cuped => Method::Cuped,
            MethodArg::Regression => Method::RegressionAdj,
        }
    };
    if args.paired && method == Method::RegressionAdj {
        return Err(CliError::User("--paired is not available with --method regression".into()));
    }
    let plan = files::read_allocation(&args.allocation)?;
    let ids: Vec<&str> = plan.assignments().iter().map(|a| a.id.as_str()).collect();
    let table = Table::read(&args.outcomes)?;
    let id_col = table.column(&args.id_column)?;
    let out_col = table.column(&args.outcome_column)?;
    let outcomes = join_column(&table, id_col, out_col, &ids, "outcome")?;
    let covariates = match (&args.covariate_column, method.needs_covariate()) {
        (Some(name), _) => {
            let col = table.column(name)?;
            join_column(&table, id_col, col, &ids, "covariate")?
        }
        (None, true) => {
            return Err(CliError::User(format!(
                "--method {} needs --covariate-column",
                method.name()
            )))
        }
        (None, false) => ids.iter().map(|&id| (id.to_owned(), 0.0)).collect(),
    };

    let obs = estimation::observations(&plan, &covariates, &outcomes)?;
    let estimate = estimation::estimate_observations(method, &obs)?;
    let cuped = match method {
        Method::Cuped => Some(estimation::fit_cuped(&covariates, &outcomes)?),
        _ => None,
    };
    // Tests run on the outcomes the estimator actually compares.
    let adjusted: ValueMap = match cuped {
        Some(adj) => outcomes
            .iter()
            .map(|(id, &y)| (id.clone(), adj.adjust(covariates[id], y)))
            .collect(),
        None => outcomes.clone(),
    };
    let test = if args.paired {
        let pairs = inference::paired_outcomes(&plan, &adjusted)?;
        inference::t_test_paired(&pairs)
    } else if method == Method::RegressionAdj {
        let df = (estimate.n_treat + estimate.n_control) as f64 - 3.0;
        inference::t_test_coefficient(estimate.delta, estimate.se, df)
    } else {
        let (t, c) = estimation::arm_outcomes(&plan, &adjusted)?;
        inference::t_test_independent(&t, &c)
    };
    let test = match test {
        Ok(t) => Some(t),
        Err(e @ crate::Error::NotPaired) => return Err(e.into()),
        Err(e) => {
            ctx.warn(&format!("test is undefined: {e}"));
            None
        }
    };
    let seed = ctx.seed_or_default();
    let bootstrap = match args.bootstrap {
        Some(n) => Some(inference::bootstrap_p(&plan, &adjusted, args.paired, n, rng::derive_seed(seed, 1))?),
        None => None,
    };
    let bootstrap_variance = match args.bootstrap_variance {
        Some(n) => Some((
            n,
            inference::bootstrap_variance(&plan, &covariates, &outcomes, method, n, rng::derive_seed(seed, 2))?,
        )),
        None => None,
    };
    let report = EstimateReport {
        method,
        strategy: plan.strategy(),
        estimate,
        cuped,
        test,
        bootstrap,
        bootstrap_variance,
    };
    let csv = report.csv();
    if let Some(path) = ctx.output.clone() {
        files::write_atomic(&path, csv.as_bytes())?;
    }
    match ctx.format {
        Format::Text => ctx.print(&report.text()),
        Format::Csv => ctx.print(&csv),
    }
}

fn load_config(study: &StudyArgs, ctx: &Context<'_>) -> Result<(SimulationConfig, String), CliError> {
    let (mut cfg, name) = match (&study.config, study.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))?;
            let cfg = SimulationConfig::from_toml(&text)
                .map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
            (cfg, path.display().to_string())
        }
        (None, preset) => {
            let name = preset.map_or("linear.paper", |p| p.name());
            let cfg = SimulationConfig::preset(name)
                .ok_or_else(|| CliError::Internal(format!("bundled preset {name} is missing")))?;
            (cfg, name.to_owned())
        }
    };
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    if let Some(r) = study.replications {
        cfg.replications = r;
    }
    if let Some(n) = study.sample_size {
        cfg.sample_size = n;
    }
    if cfg.replications == 0 {
        return Err(CliError::User("replications must be at least 1".into()));
    }
    cfg.validate()?;
    Ok((cfg, name))
}

/// Writes the summary, per-strategy histograms and the population scatter
/// data into `dir`.
fn write_study_outputs(
    dir: &Path,
    cfg: &SimulationConfig,
    result: &StudyResult,
    bins: usize,
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::User(format!("cannot create {}: {e}", dir.display())))?;
    files::write_atomic(&dir.join("summary.csv"), harness::format_csv(result).as_bytes())?;
    for (kind, summary) in result {
        let hist = harness::emit_histogram(&summary.deltas, bins)?;
        let name = format!("histogram_{}.csv", kind.name().to_ascii_lowercase());
        files::write_atomic(&dir.join(name), harness::histogram_csv(&hist).as_bytes())?;
    }
    let population = simgen::generate_population(cfg)?;
    let mut buf = Vec::new();
    simgen::write_population_csv(&mut buf, &population)
        .map_err(|e| CliError::Internal(format!("cannot format population: {e}")))?;
    files::write_atomic(&dir.join("population.csv"), &buf)
}

fn warn_single(cfg: &SimulationConfig, ctx: &mut Context<'_>) {
    if cfg.replications == 1 {
        ctx.warn("standard error is undefined with a single replication");
    }
}

fn simulate(args: SimulateArgs, ctx: &mut Context<'_>) -> Result<(), CliError> {
    let (cfg, name) = load_config(&args.study, ctx)?;
    if args.study.bins == 0 {
        return Err(CliError::User("--bins must be at least 1".into()));
    }
    warn_single(&cfg, ctx);
    let table = match args.table {
        Some(n) => PaperTable::from_number(n).ok_or_else(|| CliError::User(format!("no table {n}")))?,
        None => match cfg.relationship {
            Relationship::Linear => PaperTable::Linear,
            Relationship::Quadratic => PaperTable::Quadratic,
        },
    };
    let result = harness::run_study(&cfg, &StrategyKind::ALL)?;
    if let Some(dir) = ctx.output.clone() {
        write_study_outputs(&dir, &cfg, &result, args.study.bins)?;
    }
    match ctx.format {
        Format::Text => {
            let title = format!(
                "{} ({name}; {} replications of {} units, seed {})",
                table.title(),
                cfg.replications,
                cfg.sample_size,
                cfg.seed
            );
            let mut out = harness::format_text(&title, &result);
            out.push('\n');
            out.push_str(&harness::format_comparison(table, &harness::compare(table, &result)));
            ctx.print(&out)
        }
        Format::Csv => ctx.print(&harness::format_csv(&result)),
    }
}

const AA_LOW: f64 = 0.03;
const AA_HIGH: f64 = 0.07;
const AA_GAP: f64 = 0.02;

fn aa_test(args: StudyArgs, ctx: &mut Context<'_>) -> Result<(), CliError> {
    let (cfg, name) = load_config(&args, ctx)?;
    if args.bins == 0 {
        return Err(CliError::User("--bins must be at least 1".into()));
    }
    warn_single(&cfg, ctx);
    let result = harness::run_aa_test(&cfg, &StrategyKind::ALL)?;
    if let Some(dir) = ctx.output.clone() {
        write_study_outputs(&dir, &harness::aa_config(&cfg), &result, args.bins)?;
    }
    match ctx.format {
        Format::Text => {
            let title = format!(
                "AA test ({name}; mu = 0, eps1 = eps0; {} replications, seed {})",
                cfg.replications, cfg.seed
            );
            let mut out = harness::format_text(&title, &result);
            out.push('\n');
            for s in result.values() {
                let ok = (AA_LOW..=AA_HIGH).contains(&s.reject_rate_05);
                let _ = writeln!(
                    out,
                    "{} {:<6}type-1 error {:.4} in [{AA_LOW}, {AA_HIGH}]",
                    if ok { "PASS" } else { "FAIL" },
                    s.strategy.name(),
                    s.reject_rate_05
                );
            }
            let gap = result[&StrategyKind::Coss].reject_rate_05 - result[&StrategyKind::Rct].reject_rate_05;
            let _ = writeln!(
                out,
                "{} |COSS - RCT| = {:.4} <= {AA_GAP}",
                if gap.abs() <= AA_GAP { "PASS" } else { "FAIL" },
                gap.abs()
            );
            ctx.print(&out)
        }
        Format::Csv => ctx.print(&harness::format_csv(&result)),
    }
}

struct BiasRow {
    n_pairs: usize,
    rates: [f64; 3],
    bound: theory::McEstimate,
    bias: theory::McEstimate,
    leading: f64,
    pair_term: f64,
}

fn bias_diagnostics(args: BiasArgs, ctx: &mut Context<'_>) -> Result<(), CliError> {
    if args.pairs.is_empty() {
        return Err(CliError::User("--pairs needs at least one value".into()));
    }
    let link = match args.link {
        LinkArg::Identity => Link::Affine {
            slope: args.coefficient,
            intercept: 0.0,
        },
        LinkArg::Exponential => Link::Exponential { rate: args.coefficient },
    };
    let model = DgpModel::new(link, args.noise_sd);
    let seed = ctx.seed_or_default();
    let mut rows = Vec::with_capacity(args.pairs.len());
    for &n in &args.pairs {
        let mut rates = [0.0; 3];
        for (slot, family) in rates.iter_mut().zip(RateFamily::ALL) {
            *slot = theory::bias_rate(BiasRateSpec { distribution: family, n })?;
        }
        let s = rng::derive_seed(seed, n as u64);
        let decomposition = theory::variance_decomposition(&model, n, args.reps, rng::derive_seed(s, 3))?;
        rows.push(BiasRow {
            n_pairs: n,
            rates,
            bound: theory::bias_bound_mc(&model, n, args.reps, rng::derive_seed(s, 1))?,
            bias: theory::empirical_bias(&model, n, args.reps, rng::derive_seed(s, 2))?,
            leading: decomposition.leading_term,
            pair_term: decomposition.pair_term_bound,
        });
    }

    let mut csv = String::from(
        "n_pairs,rate_uniform,rate_normal,rate_shifted_poisson,bias_bound,bias_bound_mc_se,\
         empirical_bias,empirical_bias_mc_se,bias_times_sqrt_n,leading_term,pair_term_bound\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
            r.n_pairs,
            r.rates[0],
            r.rates[1],
            r.rates[2],
            r.bound.value,
            r.bound.mc_se,
            r.bias.value,
            r.bias.mc_se,
            r.bias.value.abs() * (r.n_pairs as f64).sqrt(),
            r.leading,
            r.pair_term
        );
    }
    if let Some(dir) = ctx.output.clone() {
        fs::create_dir_all(&dir).map_err(|e| CliError::User(format!("cannot create {}: {e}", dir.display())))?;
        files::write_atomic(&dir.join("bias_diagnostics.csv"), csv.as_bytes())?;
    }
    match ctx.format {
        Format::Csv => ctx.print(&csv),
        Format::Text => {
            let mut out = format!(
                "Bias diagnostics ({:?}, noise sd {}, {} reps, seed {seed})\n",
                model.link, model.noise_sd, args.reps
            );
            let _ = writeln!(
                out,
                "{:>8}{:>12}{:>12}{:>12}{:>12}{:>12}{:>12}{:>12}",
                "N", "rate(norm)", "bound", "bias", "mc_se", "|bias|*vN", "leading", "pair"
            );
            for r in &rows {
                let _ = writeln!(
                    out,
                    "{:>8}{:>12.6}{:>12.6}{:>12.6}{:>12.6}{:>12.6}{:>12.6}{:>12.2e}",
                    r.n_pairs,
                    r.rates[1],
                    r.bound.value,
                    r.bias.value,
                    r.bias.mc_se,
                    r.bias.value.abs() * (r.n_pairs as f64).sqrt(),
                    r.leading,
                    r.pair_term
                );
            }
            ctx.print(&out)
        }
    }
}
