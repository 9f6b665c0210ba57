//! CSV plumbing for the command line: unit files, allocation files and
//! atomic output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::allocation::{AllocationPlan, Arm, Assignment, ExperimentUnit, Parity, Strategy};

use super::CliError;

/// A header-indexed CSV table.
pub struct Table {
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
    source: String,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self, CliError> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let bad = |e: csv::Error| CliError::User(format!("{source}: {e}"));
        let headers = rdr.headers().map_err(bad)?.iter().map(str::to_owned).collect();
        let rows = rdr.records().collect::<Result<Vec<_>, _>>().map_err(bad)?;
        Ok(Self {
            headers,
            rows,
            source: source.to_owned(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<usize, CliError> {
        self.find(name).ok_or_else(|| {
            CliError::User(format!(
                "{}: column `{name}` not found (have: {})",
                self.source,
                self.headers.join(", ")
            ))
        })
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &csv::StringRecord)> {
        // Line numbers are 1-based and count the header.
        self.rows.iter().enumerate().map(|(i, r)| (i + 2, r))
    }

    pub fn cell<'a>(&self, row: &'a csv::StringRecord, col: usize) -> &'a str {
        row.get(col).unwrap_or("")
    }

    pub fn number(&self, line: usize, row: &csv::StringRecord, col: usize) -> Result<Option<f64>, CliError> {
        let raw = self.cell(row, col);
        if raw.is_empty() {
            return Ok(None);
        }
        raw.parse::<f64>().map(Some).map_err(|_| {
            CliError::User(format!(
                "{} line {line}: `{}` is not a number in column `{}`",
                self.source, raw, self.headers[col]
            ))
        })
    }

    pub fn id(&self, line: usize, row: &csv::StringRecord, col: usize) -> Result<String, CliError> {
        let id = self.cell(row, col);
        if id.is_empty() {
            return Err(CliError::User(format!("{} line {line}: empty id", self.source)));
        }
        Ok(id.to_owned())
    }
}

/// Reads units for allocation. Extra columns are ignored.
pub fn read_units(path: &Path, id_column: &str, covariate_column: &str) -> Result<Vec<ExperimentUnit>, CliError> {
    let table = Table::read(path)?;
    if table.is_empty() {
        return Err(crate::Error::EmptyInput.into());
    }
    let id_col = table.column(id_column)?;
    let cov_col = table.column(covariate_column)?;
    table
        .rows()
        .map(|(line, row)| {
            let id = table.id(line, row, id_col)?;
            let x = table.number(line, row, cov_col)?.ok_or_else(|| {
                CliError::User(format!("{} line {line}: missing covariate for `{id}`", table.source))
            })?;
            Ok(ExperimentUnit::new(id, x))
        })
        .collect()
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn allocation_csv(plan: &AllocationPlan) -> String {
    let parity = plan.parity().map_or("none", |p| p.name());
    let mut s = format!(
        "# strategy={} seed={} parity={}\nid,arm,pair_index,rank\n",
        plan.strategy(),
        plan.seed(),
        parity
    );
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for a in plan.assignments() {
        // Writing to a Vec cannot fail.
        let _ = w.write_record([a.id.as_str(), a.arm.code(), &opt(a.pair_index), &opt(a.rank)]);
    }
    let body = w.into_inner().unwrap_or_default();
    s.push_str(&String::from_utf8_lossy(&body));
    s
}

fn header_fields(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .flat_map(|l| l.trim_start_matches('#').split_whitespace())
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect()
}

pub fn read_allocation(path: &Path) -> Result<AllocationPlan, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))?;
    let source = path.display().to_string();
    let meta = header_fields(&text);
    let table = Table::parse(&text, &source)?;
    if table.is_empty() {
        return Err(crate::Error::EmptyInput.into());
    }
    let id_col = table.column("id")?;
    let arm_col = table.column("arm")?;
    let pair_col = table.find("pair_index");
    let rank_col = table.find("rank");
    let index = |line: usize, row: &csv::StringRecord, col: Option<usize>| -> Result<Option<usize>, CliError> {
        let Some(col) = col else { return Ok(None) };
        let raw = table.cell(row, col);
        if raw.is_empty() {
            return Ok(None);
        }
        raw.parse::<usize>()
            .map(Some)
            .map_err(|_| CliError::User(format!("{source} line {line}: `{raw}` is not a non-negative integer")))
    };
    let mut assignments = Vec::new();
    for (line, row) in table.rows() {
        let arm: Arm = table
            .cell(row, arm_col)
            .parse()
            .map_err(|e| CliError::User(format!("{source} line {line}: {e}")))?;
        assignments.push(Assignment {
            id: table.id(line, row, id_col)?,
            arm,
            pair_index: index(line, row, pair_col)?,
            rank: index(line, row, rank_col)?,
        });
    }
    let strategy = match meta.get("strategy") {
        Some(s) => s.parse::<Strategy>()?,
        None if assignments.iter().any(|a| a.pair_index.is_some()) => Strategy::Coss,
        None => Strategy::Rct,
    };
    let seed = match meta.get("seed") {
        Some(s) => s
            .parse::<u64>()
            .map_err(|_| CliError::User(format!("{source}: bad seed `{s}` in header")))?,
        None => 0,
    };
    let parity = match meta.get("parity").map(String::as_str) {
        None | Some("none") => None,
        Some(p) => Some(p.parse::<Parity>()?),
    };
    Ok(AllocationPlan::from_assignments(strategy, seed, parity, assignments)?)
}

/// Writes `contents` to a sibling temp file, then renames it over `path`, so
/// readers never see partial output.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let fail = |e: std::io::Error| CliError::User(format!("cannot write {}: {e}", path.display()));
    let name = path
        .file_name()
        .ok_or_else(|| CliError::User(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(fail)
}
