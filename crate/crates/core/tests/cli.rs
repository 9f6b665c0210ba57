use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coss::allocation::{AllocationPlan, Arm, Assignment, Strategy};
use coss::inference;
use tempfile::TempDir;

fn coss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coss"))
        .args(args)
        .output()
        .expect("run coss binary")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const FOUR_UNITS: &str = "id,covariate\nu1,5\nu2,3\nu3,9\nu4,1\n";

/// Reads a `key value` line from the text report.
fn field(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).map(str::trim))
        .and_then(|v| v.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no `{key}` in report:\n{report}"))
}

/// Parses the single data row of an estimate CSV into a header-keyed lookup.
fn csv_row(text: &str) -> impl Fn(&str) -> String {
    let mut lines = text.lines();
    let head: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let row: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    move |k: &str| row[head.iter().position(|h| h == k).unwrap()].clone()
}

#[test]
fn allocate_matches_hand_trace() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "units.csv", FOUR_UNITS);
    let out = dir.path().join("plan.csv");
    let o = coss(&["allocate", "--input", s(&input), "--seed", "7", "--output", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(
        text,
        "# strategy=coss seed=7 parity=treatment-first\n\
         id,arm,pair_index,rank\n\
         u3,T,0,0\nu1,C,0,1\nu2,T,1,2\nu4,C,1,3\n"
    );
}

#[test]
fn allocate_is_byte_identical_on_rerun() {
    let dir = TempDir::new().unwrap();
    let body: String = std::iter::once("id,covariate\n".to_string())
        .chain((0..300).map(|i| format!("u{i},{}\n", (i * 7919) % 101)))
        .collect();
    let input = write(dir.path(), "units.csv", &body);
    for strategy in ["coss", "rct"] {
        let a = dir.path().join(format!("{strategy}_a.csv"));
        let b = dir.path().join(format!("{strategy}_b.csv"));
        for out in [&a, &b] {
            let o = coss(&["allocate", "--input", s(&input), "--strategy", strategy, "--output", s(out)]);
            assert!(o.status.success(), "{}", stderr(&o));
        }
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }
}

#[test]
fn allocate_rejects_empty_input_without_output() {
    let dir = TempDir::new().unwrap();
    for (name, body) in [("empty.csv", ""), ("header.csv", "id,covariate\n")] {
        let input = write(dir.path(), name, body);
        let out = dir.path().join("plan.csv");
        let o = coss(&["allocate", "--input", s(&input), "--output", s(&out)]);
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains("no units"), "{}", stderr(&o));
        assert!(!out.exists());
    }
}

#[test]
fn allocate_reports_bad_columns() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "units.csv", "id,score\nu1,1\n");
    let o = coss(&["allocate", "--input", s(&input)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("covariate"));

    let input = write(dir.path(), "bad.csv", "id,covariate\nu1,abc\n");
    let o = coss(&["allocate", "--input", s(&input)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = coss(&["allocate", "--input", s(&dir.path().join("missing.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = coss(&["allocate", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn estimate_diff_means_on_allocated_units() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "units.csv", FOUR_UNITS);
    let plan = dir.path().join("plan.csv");
    assert!(coss(&["allocate", "--input", s(&input), "--output", s(&plan)]).status.success());
    // T = {u3, u2} -> {3, 5}; C = {u1, u4} -> {2, 4}.
    let outcomes = write(dir.path(), "y.csv", "id,outcome\nu1,2\nu2,5\nu3,3\nu4,4\n");
    let csv_out = dir.path().join("est.csv");
    let o = coss(&["estimate", "--allocation", s(&plan), "--outcomes", s(&outcomes), "--output", s(&csv_out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(field(&stdout(&o), "delta"), 1.0);
    let row = csv_row(&fs::read_to_string(&csv_out).unwrap());
    assert_eq!(row("delta"), "1");
    assert_eq!(row("method"), "diff-means");
    assert_eq!(row("test"), "welch-t");
}

#[test]
fn estimate_paired_matches_library_oracle() {
    let dir = TempDir::new().unwrap();
    let units = "id,covariate\na,8\nb,7\nc,6\nd,5\ne,4\nf,3\ng,2\nh,1\n";
    let input = write(dir.path(), "units.csv", units);
    let plan = dir.path().join("plan.csv");
    assert!(coss(&["allocate", "--input", s(&input), "--output", s(&plan)]).status.success());
    // Pairs (a,b), (c,d), (e,f), (g,h) with differences 1, -1, 0, 2.
    let outcomes = write(
        dir.path(),
        "y.csv",
        "id,outcome\na,3\nb,2\nc,1\nd,2\ne,5\nf,5\ng,4\nh,2\n",
    );
    let o = coss(&[
        "estimate", "--allocation", s(&plan), "--outcomes", s(&outcomes), "--paired", "--format", "csv",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row = csv_row(&stdout(&o));
    let oracle = inference::t_test_paired(&[(3.0, 2.0), (1.0, 2.0), (5.0, 5.0), (4.0, 2.0)]).unwrap();
    let p: f64 = row("p_value").parse().unwrap();
    assert!((p - oracle.p_value).abs() <= 1e-9 * oracle.p_value);
    assert!((p - 0.495).abs() < 5e-4);
    assert_eq!(row("test"), "paired-t");
}

#[test]
fn estimate_cuped_echoes_theta_and_r_squared() {
    let dir = TempDir::new().unwrap();
    let units = "id,covariate\nu1,1\nu2,2\nu3,3\nu4,4\nu5,5\nu6,6\n";
    let input = write(dir.path(), "units.csv", units);
    let plan = dir.path().join("plan.csv");
    let o = coss(&["allocate", "--input", s(&input), "--strategy", "rct", "--output", s(&plan)]);
    assert!(o.status.success());
    let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let ys = [1.5, 3.0, 2.5, 5.5, 4.0, 7.0];
    let body: String = std::iter::once("id,pre,outcome\n".to_string())
        .chain((0..6).map(|i| format!("u{},{},{}\n", i + 1, xs[i], ys[i])))
        .collect();
    let outcomes = write(dir.path(), "y.csv", &body);
    let o = coss(&[
        "estimate", "--allocation", s(&plan), "--outcomes", s(&outcomes), "--cuped", "--covariate-column", "pre",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = stdout(&o);

    // OLS slope and r^2 from centered sums.
    let mx = xs.iter().sum::<f64>() / 6.0;
    let my = ys.iter().sum::<f64>() / 6.0;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let theta = sxy / sxx;
    assert!((field(&report, "theta") - theta).abs() < 1e-6);
    assert!((field(&report, "r_squared") - sxy * sxy / (sxx * syy)).abs() < 1e-6);

    let text = fs::read_to_string(&plan).unwrap();
    let treated: Vec<usize> = text
        .lines()
        .filter(|l| l.contains(",T,"))
        .map(|l| l[1..l.find(',').unwrap()].parse::<usize>().unwrap() - 1)
        .collect();
    let adj = |i: usize| ys[i] - theta * (xs[i] - mx);
    let t: f64 = treated.iter().map(|&i| adj(i)).sum::<f64>() / treated.len() as f64;
    let c: f64 = (0..6).filter(|i| !treated.contains(i)).map(adj).sum::<f64>() / (6 - treated.len()) as f64;
    assert!((field(&report, "delta") - (t - c)).abs() < 1e-6);
}

#[test]
fn estimate_lists_missing_ids() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "units.csv", FOUR_UNITS);
    let plan = dir.path().join("plan.csv");
    assert!(coss(&["allocate", "--input", s(&input), "--output", s(&plan)]).status.success());
    let outcomes = write(dir.path(), "y.csv", "id,outcome\nu1,2\nu3,3\n");
    let o = coss(&["estimate", "--allocation", s(&plan), "--outcomes", s(&outcomes)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("u2") && err.contains("u4") && !err.contains("u1"), "{err}");
}

#[test]
fn estimate_rejects_paired_rct_and_missing_covariate() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "units.csv", FOUR_UNITS);
    let plan = dir.path().join("plan.csv");
    assert!(coss(&["allocate", "--input", s(&input), "--strategy", "rct", "--output", s(&plan)])
        .status
        .success());
    let outcomes = write(dir.path(), "y.csv", "id,outcome\nu1,2\nu2,5\nu3,3\nu4,4\n");
    let o = coss(&["estimate", "--allocation", s(&plan), "--outcomes", s(&outcomes), "--paired"]);
    assert_eq!(o.status.code(), Some(2));
    let o = coss(&["estimate", "--allocation", s(&plan), "--outcomes", s(&outcomes), "--method", "cuped"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--covariate-column"));
}

#[test]
fn estimate_bootstrap_outputs_are_seeded() {
    let dir = TempDir::new().unwrap();
    let body: String = std::iter::once("id,covariate\n".to_string())
        .chain((0..40).map(|i| format!("u{i},{i}\n")))
        .collect();
    let input = write(dir.path(), "units.csv", &body);
    let plan = dir.path().join("plan.csv");
    assert!(coss(&["allocate", "--input", s(&input), "--output", s(&plan)]).status.success());
    let body: String = std::iter::once("id,outcome\n".to_string())
        .chain((0..40).map(|i| format!("u{i},{}\n", 0.5 * i as f64 + ((i * 37) % 11) as f64 / 5.0)))
        .collect();
    let outcomes = write(dir.path(), "y.csv", &body);
    let args = [
        "estimate", "--allocation", s(&plan), "--outcomes", s(&outcomes), "--paired", "--bootstrap", "2000",
        "--bootstrap-variance", "200", "--format", "csv",
    ];
    let a = coss(&args);
    let b = coss(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let row = csv_row(&stdout(&a));
    assert_eq!(row("bootstrap_test"), "paired-bootstrap");
    assert!(row("bootstrap_variance").parse::<f64>().unwrap() > 0.0);
}

#[test]
fn allocation_csv_round_trips_into_a_plan() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "units.csv", "id,covariate\nu1,5\nu2,3\nu3,9\n");
    let o = coss(&["allocate", "--input", s(&input), "--parity", "control-first"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("# strategy=coss seed=20240229 parity=control-first\n"));
    // The odd unit carries no pair index.
    assert!(text.contains("u2,T,,2\n"), "{text}");
    let plan = AllocationPlan::from_assignments(
        Strategy::Coss,
        20_240_229,
        None,
        vec![
            Assignment { id: "u3".into(), arm: Arm::Control, rank: Some(0), pair_index: Some(0) },
            Assignment { id: "u1".into(), arm: Arm::Treatment, rank: Some(1), pair_index: Some(0) },
            Assignment { id: "u2".into(), arm: Arm::Treatment, rank: Some(2), pair_index: None },
        ],
    )
    .unwrap();
    assert_eq!(plan.pairs(), vec![("u1", "u3")]);
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn simulate_is_identical_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let one = dir.path().join("one");
    let eight = dir.path().join("eight");
    let base = ["simulate", "--preset", "linear.paper", "--replications", "60", "--sample-size", "100"];
    let a = coss(&[&base[..], &["--threads", "1", "--output", s(&one)]].concat());
    let b = coss(&[&base[..], &["--threads", "8", "--output", s(&eight)]].concat());
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let files = read_dir_sorted(&one);
    assert_eq!(files, read_dir_sorted(&eight));
    let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(
        names,
        ["histogram_coss.csv", "histogram_cuped.csv", "histogram_rct.csv", "population.csv", "summary.csv"]
    );
    let text = stdout(&a);
    assert!(text.contains("RCT(original)") && text.contains("Comparison with published Table 1"));
}

#[test]
fn simulate_single_replication_warns() {
    let o = coss(&["simulate", "--preset", "quadratic.paper", "--replications", "1", "--sample-size", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("standard error is undefined"));
    assert!(stdout(&o).contains("undefined"));
    assert!(stdout(&o).contains("Table 2"));
}

#[test]
fn simulate_config_errors_name_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.toml", "relationship = \"linear\"\nsample_sise = 100\n");
    let o = coss(&["simulate", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sample_sise"), "{}", stderr(&o));

    let cfg = write(dir.path(), "odd.toml", "sample_size = 101\n");
    let o = coss(&["simulate", "--config", s(&cfg), "--replications", "2"]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = write(dir.path(), "ok.toml", "population = 500\nsample_size = 40\nreplications = 20\n");
    let o = coss(&["simulate", "--config", s(&cfg), "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("strategy,mean,se,reject_rate_05,replications\n"));
}

#[test]
fn aa_test_and_bias_diagnostics_run_deterministically() {
    let aa = ["aa-test", "--preset", "linear.paper", "--replications", "40", "--sample-size", "60"];
    let a = coss(&aa);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, coss(&aa).stdout);
    assert!(stdout(&a).contains("type-1 error"));

    let dir = TempDir::new().unwrap();
    let bias = [
        "bias-diagnostics", "--pairs", "10,20", "--reps", "1000", "--format", "csv", "--output", s(dir.path()),
    ];
    let b = coss(&bias);
    assert!(b.status.success(), "{}", stderr(&b));
    assert_eq!(b.stdout, coss(&bias).stdout);
    let text = stdout(&b);
    assert_eq!(text.lines().count(), 3);
    assert_eq!(fs::read_to_string(dir.path().join("bias_diagnostics.csv")).unwrap(), text);

    let o = coss(&["bias-diagnostics", "--pairs", "2"]);
    assert_eq!(o.status.code(), Some(2));
}
