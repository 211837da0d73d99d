//! CSV panel ingestion and numeric output.
//!
//! Input panels carry a date column (ISO `YYYY-MM-DD`, `YYYY-MM`, or
//! `YYYYQn`) followed by one column per series. All numeric output is
//! written at 15 significant digits so round trips are exact to double
//! precision for practical purposes.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use dfm_core::preprocess::{DetrendMode, RhoMode, SeriesMeta, Transform};

use crate::{CliError, CliResult, Stage};

/// A calendar quarter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Quarter {
    pub year: i32,
    pub q: u8,
}

impl Quarter {
    pub fn next(self) -> Quarter {
        if self.q == 4 {
            Quarter {
                year: self.year + 1,
                q: 1,
            }
        } else {
            Quarter {
                year: self.year,
                q: self.q + 1,
            }
        }
    }
}

impl fmt::Display for Quarter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}Q{}", self.year, self.q)
    }
}

/// A parsed date: either an exact quarter or a calendar day mapped to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ObsDate {
    pub year: i32,
    pub month: u8,
    pub day: u8,
}

impl ObsDate {
    pub fn quarter(&self) -> Quarter {
        Quarter {
            year: self.year,
            q: (self.month - 1) / 3 + 1,
        }
    }
}

/// Parses `YYYYQn`, `YYYY-MM-DD`, or `YYYY-MM`. Quarter labels map to the
/// first month of the quarter.
pub fn parse_date(raw: &str) -> Result<ObsDate, String> {
    let s = raw.trim();
    if let Some(pos) = s.find(['Q', 'q']) {
        let year: i32 = s[..pos].parse().map_err(|_| format!("bad year in date `{s}`"))?;
        let q: u8 = s[pos + 1..].parse().map_err(|_| format!("bad quarter in date `{s}`"))?;
        if !(1..=4).contains(&q) {
            return Err(format!("quarter out of range in `{s}`"));
        }
        return Ok(ObsDate {
            year,
            month: (q - 1) * 3 + 1,
            day: 1,
        });
    }
    let parts: Vec<&str> = s.split('-').collect();
    match parts.len() {
        2 | 3 => {
            let year: i32 = parts[0].parse().map_err(|_| format!("bad year in date `{s}`"))?;
            let month: u8 = parts[1].parse().map_err(|_| format!("bad month in date `{s}`"))?;
            if !(1..=12).contains(&month) {
                return Err(format!("month out of range in `{s}`"));
            }
            let day: u8 = if parts.len() == 3 {
                parts[2].parse().map_err(|_| format!("bad day in date `{s}`"))?
            } else {
                1
            };
            if !(1..=31).contains(&day) {
                return Err(format!("day out of range in `{s}`"));
            }
            Ok(ObsDate { year, month, day })
        }
        _ => Err(format!("unrecognized date `{s}` (want YYYYQn, YYYY-MM, or YYYY-MM-DD)")),
    }
}

/// An ingested panel: series in rows of `x`, one date per observation
/// column (pre-aggregation resolution).
#[derive(Debug, Clone)]
pub struct PanelData {
    pub ids: Vec<String>,
    pub dates: Vec<ObsDate>,
    /// `n x T_raw`.
    pub x: DMatrix<f64>,
}

fn ingest_err(msg: impl Into<String>) -> CliError {
    CliError::new(Stage::Ingest, msg)
}

/// Reads a panel CSV: header `date,<id>,...`, strictly increasing dates,
/// every cell a finite decimal number. Missing cells are an error naming the
/// row and column.
pub fn read_panel_csv(path: &Path) -> CliResult<PanelData> {
    let text = fs::read_to_string(path)
        .map_err(|e| ingest_err(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| ingest_err(format!("{} is empty", path.display())))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 {
        return Err(ingest_err("header must be `date,<id>,...`"));
    }
    let ids: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    let n = ids.len();

    let mut dates = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != n + 1 {
            return Err(ingest_err(format!(
                "row {} has {} cells, expected {}",
                line_no + 1,
                cells.len(),
                n + 1
            )));
        }
        let date = parse_date(cells[0]).map_err(|e| ingest_err(format!("row {}: {e}", line_no + 1)))?;
        if let Some(last) = dates.last() {
            if date <= *last {
                return Err(ingest_err(format!(
                    "dates must be strictly increasing (row {})",
                    line_no + 1
                )));
            }
        }
        dates.push(date);
        let mut row = Vec::with_capacity(n);
        for (j, cell) in cells[1..].iter().enumerate() {
            if cell.is_empty() {
                return Err(ingest_err(format!(
                    "missing value at row {}, column `{}`",
                    line_no + 1,
                    ids[j]
                )));
            }
            let v: f64 = cell.parse().map_err(|_| {
                ingest_err(format!(
                    "cannot parse `{cell}` at row {}, column `{}`",
                    line_no + 1,
                    ids[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(ingest_err(format!(
                    "non-finite value at row {}, column `{}`",
                    line_no + 1,
                    ids[j]
                )));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(ingest_err("panel has no data rows"));
    }
    let t_len = rows.len();
    let x = DMatrix::from_fn(n, t_len, |i, t| rows[t][i]);
    Ok(PanelData { ids, dates, x })
}

/// Checks that a sequence of quarters is gapless and strictly increasing.
pub fn validate_quarterly(quarters: &[Quarter]) -> CliResult<()> {
    for w in quarters.windows(2) {
        if w[0].next() != w[1] {
            return Err(ingest_err(format!(
                "quarterly sequence has a gap between {} and {}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Formats a number at 15 significant digits.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.14e}")
}

/// Writes a `T x k` matrix as CSV with an optional leading date column.
pub fn write_matrix_csv(
    path: &Path,
    col_names: &[String],
    dates: Option<&[Quarter]>,
    data: &DMatrix<f64>,
) -> CliResult<()> {
    let mut out = String::new();
    if dates.is_some() {
        out.push_str("date");
        if !col_names.is_empty() {
            out.push(',');
        }
    }
    out.push_str(&col_names.join(","));
    out.push('\n');
    for t in 0..data.nrows() {
        if let Some(ds) = dates {
            out.push_str(&ds[t].to_string());
            if data.ncols() > 0 {
                out.push(',');
            }
        }
        let row: Vec<String> = (0..data.ncols()).map(|j| fmt_num(data[(t, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_file(path, &out)
}

/// Reads a matrix CSV written by [`write_matrix_csv`]. Returns column names
/// (date column stripped) and the data.
pub fn read_matrix_csv(path: &Path) -> CliResult<(Vec<String>, DMatrix<f64>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| ingest_err(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| ingest_err(format!("{} is empty", path.display())))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_date = cols.first() == Some(&"date");
    let start = usize::from(has_date);
    let names: Vec<String> = cols[start..].iter().map(|s| s.to_string()).collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line_no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let mut row = Vec::with_capacity(names.len());
        for cell in &cells[start..] {
            let v: f64 = cell.trim().parse().map_err(|_| {
                ingest_err(format!(
                    "cannot parse `{}` in {} row {}",
                    cell,
                    path.display(),
                    line_no + 2
                ))
            })?;
            row.push(v);
        }
        if row.len() != names.len() {
            return Err(ingest_err(format!(
                "row {} of {} has {} cells, expected {}",
                line_no + 2,
                path.display(),
                row.len(),
                names.len()
            )));
        }
        rows.push(row);
    }
    let data = DMatrix::from_fn(rows.len(), names.len(), |i, j| rows[i][j]);
    Ok((names, data))
}

pub fn write_file(path: &Path, content: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::new(Stage::Report, format!("mkdir {}: {e}", parent.display())))?;
    }
    let mut f = fs::File::create(path)
        .map_err(|e| CliError::new(Stage::Report, format!("create {}: {e}", path.display())))?;
    f.write_all(content.as_bytes())
        .map_err(|e| CliError::new(Stage::Report, format!("write {}: {e}", path.display())))
}

/// Reads per-series metadata: columns `id,transform,sa,detrend,rho,tie_group`
/// (header required, later columns optional). Unknown series default to
/// no transform and automatic rules.
pub fn read_metadata_csv(path: &Path) -> CliResult<Vec<SeriesMeta>> {
    let text = fs::read_to_string(path)
        .map_err(|e| ingest_err(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| ingest_err(format!("{} is empty", path.display())))?;
    let cols: Vec<String> = header.split(',').map(|s| s.trim().to_lowercase()).collect();
    let find = |name: &str| cols.iter().position(|c| c == name);
    let id_col = find("id").ok_or_else(|| ingest_err("metadata needs an `id` column"))?;
    let tr_col = find("transform");
    let sa_col = find("sa");
    let dt_col = find("detrend");
    let rho_col = find("rho");
    let tie_col = find("tie_group");

    let mut metas = Vec::new();
    for (line_no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |idx: Option<usize>| idx.and_then(|i| cells.get(i)).map(|s| s.to_string());
        let mut meta = SeriesMeta::new(
            get(Some(id_col)).ok_or_else(|| ingest_err(format!("metadata row {} missing id", line_no + 2)))?,
        );
        if let Some(t) = get(tr_col) {
            meta.transform = parse_transform(&t)
                .map_err(|e| ingest_err(format!("metadata row {}: {e}", line_no + 2)))?;
        }
        if let Some(s) = get(sa_col) {
            meta.sa = matches!(s.as_str(), "1" | "true" | "yes");
        }
        if let Some(d) = get(dt_col) {
            meta.detrend_mode = match d.to_lowercase().as_str() {
                "auto" | "" => DetrendMode::Auto,
                "mean" | "0" => DetrendMode::ForceMean,
                "trend" | "1" => DetrendMode::ForceTrend,
                other => {
                    return Err(ingest_err(format!(
                        "metadata row {}: unknown detrend mode `{other}`",
                        line_no + 2
                    )))
                }
            };
        }
        if let Some(r) = get(rho_col) {
            meta.rho_mode = match r.to_lowercase().as_str() {
                "auto" | "" => RhoMode::Auto,
                "0" | "force_0" => RhoMode::Force0,
                "1" | "force_1" => RhoMode::Force1,
                other => {
                    return Err(ingest_err(format!(
                        "metadata row {}: unknown rho mode `{other}`",
                        line_no + 2
                    )))
                }
            };
        }
        if let Some(g) = get(tie_col) {
            if !g.is_empty() {
                meta.tie_group = Some(g);
            }
        }
        metas.push(meta);
    }
    Ok(metas)
}

pub fn parse_transform(s: &str) -> Result<Transform, String> {
    match s.to_lowercase().as_str() {
        "none" | "0" | "" => Ok(Transform::None),
        "log" | "1" => Ok(Transform::Log),
        "dlog" | "2" => Ok(Transform::DLog),
        other => Err(format!("unknown transform `{other}`")),
    }
}
