//! Success-rate matrices and the algebra used to summarize them.
//!
//! A [`ResultsMatrix`] has one row per condition (baseline, one per aspect,
//! instructor, ...) and one column per task or benchmark split. Cells are
//! success rates in `[0, 1]`; missing cells are allowed on disk but every
//! aggregation requires the rows it touches to be dense.
//!
//! On disk a matrix is CSV with a `condition` header cell, optionally
//! preceded by `# key: value` metadata lines.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Loss weight applied to the caption term when combined with flow matching.
pub const DEFAULT_CAPTION_LOSS_WEIGHT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("unknown row '{0}'")]
    UnknownRow(String),
    #[error("unknown column '{0}'")]
    UnknownColumn(String),
    #[error("cell ({row}, {column}) is empty")]
    MissingCell { row: String, column: String },
    #[error("cannot aggregate an empty set")]
    Empty,
    #[error("duplicate {what} '{name}'")]
    Duplicate { what: &'static str, name: String },
    #[error("row '{row}' has {got} cells, expected {expected}")]
    Ragged { row: String, got: usize, expected: usize },
    #[error("cell ({row}, {column}) = {value} is not a success rate in [0, 1]")]
    OutOfRange { row: String, column: String, value: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid family spec: {0}")]
    FamilySpec(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    RobocasaDev,
    RobocasaTest,
    Molmospaces,
}

impl Suite {
    pub fn as_str(self) -> &'static str {
        match self {
            Suite::RobocasaDev => "robocasa_dev",
            Suite::RobocasaTest => "robocasa_test",
            Suite::Molmospaces => "molmospaces",
        }
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Suite::RobocasaDev, Suite::RobocasaTest, Suite::Molmospaces]
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown suite '{s}'"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub suite: Option<Suite>,
    pub episodes_per_cell: Option<u32>,
    /// Free-form notes, e.g. seed lists; carried through but not interpreted.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsMatrix {
    rows: Vec<String>,
    columns: Vec<String>,
    cells: Vec<Vec<Option<f64>>>,
    pub meta: MatrixMeta,
}

impl ResultsMatrix {
    pub fn new(columns: Vec<String>) -> Result<Self, AggregationError> {
        check_unique("column", &columns)?;
        Ok(Self {
            rows: Vec::new(),
            columns,
            cells: Vec::new(),
            meta: MatrixMeta::default(),
        })
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn push_row(&mut self, name: impl Into<String>, values: Vec<Option<f64>>) -> Result<(), AggregationError> {
        let name = name.into();
        if self.rows.contains(&name) {
            return Err(AggregationError::Duplicate { what: "row", name });
        }
        if values.len() != self.columns.len() {
            return Err(AggregationError::Ragged {
                row: name,
                got: values.len(),
                expected: self.columns.len(),
            });
        }
        for (col, v) in self.columns.iter().zip(&values) {
            if let Some(v) = *v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(AggregationError::OutOfRange {
                        row: name,
                        column: col.clone(),
                        value: v,
                    });
                }
            }
        }
        self.rows.push(name);
        self.cells.push(values);
        Ok(())
    }

    pub fn push_dense_row(&mut self, name: impl Into<String>, values: &[f64]) -> Result<(), AggregationError> {
        self.push_row(name, values.iter().copied().map(Some).collect())
    }

    fn row_index(&self, row: &str) -> Result<usize, AggregationError> {
        self.rows
            .iter()
            .position(|r| r == row)
            .ok_or_else(|| AggregationError::UnknownRow(row.to_string()))
    }

    fn column_index(&self, column: &str) -> Result<usize, AggregationError> {
        self.columns
            .iter()
            .position(|c| c == column)
            .ok_or_else(|| AggregationError::UnknownColumn(column.to_string()))
    }

    pub fn get(&self, row: &str, column: &str) -> Result<Option<f64>, AggregationError> {
        Ok(self.cells[self.row_index(row)?][self.column_index(column)?])
    }

    /// The filled cell at `(row, column)`.
    pub fn value(&self, row: &str, column: &str) -> Result<f64, AggregationError> {
        self.get(row, column)?.ok_or_else(|| AggregationError::MissingCell {
            row: row.to_string(),
            column: column.to_string(),
        })
    }

    /// All cells of a row; fails if any is empty.
    pub fn dense_row(&self, row: &str) -> Result<Vec<f64>, AggregationError> {
        let i = self.row_index(row)?;
        self.cells[i]
            .iter()
            .zip(&self.columns)
            .map(|(v, c)| {
                v.ok_or_else(|| AggregationError::MissingCell {
                    row: row.to_string(),
                    column: c.clone(),
                })
            })
            .collect()
    }

    pub fn select_rows(&self, rows: &[&str]) -> Result<ResultsMatrix, AggregationError> {
        let mut out = ResultsMatrix::new(self.columns.clone())?;
        out.meta = self.meta.clone();
        for r in rows {
            out.push_row(*r, self.cells[self.row_index(r)?].clone())?;
        }
        Ok(out)
    }

    pub fn select_columns(&self, columns: &[&str]) -> Result<ResultsMatrix, AggregationError> {
        let idx: Vec<usize> = columns.iter().map(|c| self.column_index(c)).collect::<Result<_, _>>()?;
        let mut out = ResultsMatrix::new(columns.iter().map(|c| c.to_string()).collect())?;
        out.meta = self.meta.clone();
        for (r, row) in self.rows.iter().zip(&self.cells) {
            out.push_row(r.clone(), idx.iter().map(|&i| row[i]).collect())?;
        }
        Ok(out)
    }

    pub fn read_csv_str(text: &str) -> Result<Self, AggregationError> {
        let mut meta = MatrixMeta::default();
        let mut body_start = 0;
        let mut header_line = 1;
        for line in text.split_inclusive('\n') {
            let Some(comment) = line.trim_start().strip_prefix('#') else {
                break;
            };
            body_start += line.len();
            let comment = comment.trim();
            match comment.split_once(':').map(|(k, v)| (k.trim(), v.trim())) {
                Some(("suite", v)) => {
                    meta.suite = Some(v.parse().map_err(|message| AggregationError::Parse {
                        line: header_line,
                        message,
                    })?)
                }
                Some(("episodes_per_cell", v)) => {
                    meta.episodes_per_cell = Some(v.parse().map_err(|e| AggregationError::Parse {
                        line: header_line,
                        message: format!("episodes_per_cell: {e}"),
                    })?)
                }
                _ => meta.notes.push(comment.to_string()),
            }
            header_line += 1;
        }

        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(&text.as_bytes()[body_start..]);
        let headers = reader.headers()?.clone();
        let mut iter = headers.iter();
        if iter.next() != Some("condition") {
            return Err(AggregationError::Parse {
                line: header_line,
                message: "first header cell must be 'condition'".into(),
            });
        }
        let mut m = ResultsMatrix::new(iter.map(str::to_string).collect())?;
        m.meta = meta;
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let line = header_line + 1 + i;
            let mut fields = record.iter();
            let name = fields.next().unwrap_or_default().to_string();
            let values = fields
                .map(|f| {
                    if f.is_empty() {
                        Ok(None)
                    } else {
                        f.parse::<f64>().map(Some).map_err(|e| AggregationError::Parse {
                            line,
                            message: format!("'{f}': {e}"),
                        })
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            m.push_row(name, values)?;
        }
        Ok(m)
    }

    pub fn read_csv(path: &Path) -> Result<Self, AggregationError> {
        Self::read_csv_str(&fs::read_to_string(path)?)
    }

    /// Writes metadata comments and the matrix. With `display` set, cells are
    /// rounded to two decimals in `.52` style; otherwise full precision.
    pub fn write_csv<W: Write>(&self, mut w: W, display: bool) -> Result<(), AggregationError> {
        if let Some(suite) = self.meta.suite {
            writeln!(w, "# suite: {}", suite.as_str())?;
        }
        if let Some(n) = self.meta.episodes_per_cell {
            writeln!(w, "# episodes_per_cell: {n}")?;
        }
        for note in &self.meta.notes {
            writeln!(w, "# {note}")?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(std::iter::once("condition").chain(self.columns.iter().map(String::as_str)))?;
        for (r, row) in self.rows.iter().zip(&self.cells) {
            let mut rec = vec![r.clone()];
            rec.extend(row.iter().map(|v| match v {
                None => String::new(),
                Some(x) if display => format_sr(*x),
                Some(x) => x.to_string(),
            }));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

impl fmt::Display for ResultsMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, true).map_err(|_| fmt::Error)?;
        f.write_str(&String::from_utf8_lossy(&buf))
    }
}

fn check_unique(what: &'static str, names: &[String]) -> Result<(), AggregationError> {
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(AggregationError::Duplicate { what, name: n.clone() });
        }
    }
    Ok(())
}

/// Half-away-from-zero rounding to two decimals. The small nudge keeps
/// values like `0.635` (stored as 0.63499999...) on the intended side.
pub fn round2(x: f64) -> f64 {
    let scaled = x.abs() * 100.0 + 1e-9;
    x.signum() * scaled.round() / 100.0
}

/// Two-decimal display without the leading zero: `.52`, `1.00`.
pub fn format_sr(x: f64) -> String {
    let s = format!("{:.2}", round2(x));
    match s.strip_prefix("0.") {
        Some(rest) => format!(".{rest}"),
        None => match s.strip_prefix("-0.") {
            Some(rest) => format!("-.{rest}"),
            None => s,
        },
    }
}

/// Cell-wise maximum over the listed condition rows.
pub fn oracle_row(m: &ResultsMatrix, over: &[&str]) -> Result<Vec<f64>, AggregationError> {
    let mut rows = over.iter().map(|r| m.dense_row(r));
    let mut acc = rows.next().ok_or(AggregationError::Empty)??;
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row?) {
            *a = a.max(v);
        }
    }
    Ok(acc)
}

pub fn macro_avg(row: &[f64]) -> Result<f64, AggregationError> {
    if row.is_empty() {
        return Err(AggregationError::Empty);
    }
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryRule {
    Mean,
    Select(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Family {
    pub name: String,
    pub members: Vec<String>,
    pub rule: SummaryRule,
}

/// Named column groups and how each collapses to one value. When
/// `avg_column` is set, an extra column holds the mean of the family values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub families: Vec<Family>,
    #[serde(default)]
    pub avg_column: Option<String>,
}

impl FamilySpec {
    pub fn from_json(text: &str) -> Result<Self, AggregationError> {
        let spec: FamilySpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, AggregationError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), AggregationError> {
        if self.families.is_empty() {
            return Err(AggregationError::FamilySpec("no families".into()));
        }
        let names: Vec<String> = self.families.iter().map(|f| f.name.clone()).collect();
        check_unique("family", &names)?;
        for f in &self.families {
            if f.members.is_empty() {
                return Err(AggregationError::FamilySpec(format!(
                    "family '{}' has no members",
                    f.name
                )));
            }
            if let SummaryRule::Select(id) = &f.rule {
                if !f.members.contains(id) {
                    return Err(AggregationError::FamilySpec(format!(
                        "family '{}' selects '{id}', which is not a member",
                        f.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Four-family MolmoSpaces summary of the nine-split detail table.
    pub fn molmospaces_summary() -> Self {
        let fam = |name: &str, members: &[&str], rule: SummaryRule| Family {
            name: name.to_string(),
            members: members.iter().map(|s| s.to_string()).collect(),
            rule,
        };
        FamilySpec {
            families: vec![
                fam("Pick", &["Pick Std", "Pick Hard"], SummaryRule::Mean),
                fam("P+P", &["P+P Std", "P+P Hard"], SummaryRule::Mean),
                fam(
                    "NextTo",
                    &["NextTo ID", "NextTo OOD"],
                    SummaryRule::Select("NextTo ID".into()),
                ),
                fam("Color", &["Color"], SummaryRule::Mean),
            ],
            avg_column: Some("Avg".into()),
        }
    }

    /// The per-family Avg columns of the detail table itself.
    pub fn molmospaces_detail_averages() -> Self {
        let fam = |name: &str, members: &[&str]| Family {
            name: name.to_string(),
            members: members.iter().map(|s| s.to_string()).collect(),
            rule: SummaryRule::Mean,
        };
        FamilySpec {
            families: vec![
                fam("Pick Avg", &["Pick Std", "Pick Hard", "Pick OOD"]),
                fam("P+P Avg", &["P+P Std", "P+P Hard"]),
                fam("NextTo Avg", &["NextTo ID", "NextTo OOD"]),
            ],
            avg_column: None,
        }
    }
}

/// Collapses member columns into one column per family (plus the optional
/// average column). Rows are preserved.
pub fn summarize_families(detail: &ResultsMatrix, spec: &FamilySpec) -> Result<ResultsMatrix, AggregationError> {
    spec.validate()?;
    let mut columns: Vec<String> = spec.families.iter().map(|f| f.name.clone()).collect();
    if let Some(avg) = &spec.avg_column {
        columns.push(avg.clone());
    }
    let mut out = ResultsMatrix::new(columns)?;
    out.meta = detail.meta.clone();
    for row in detail.rows() {
        let mut values = Vec::with_capacity(spec.families.len() + 1);
        for f in &spec.families {
            let v = match &f.rule {
                SummaryRule::Mean => {
                    let xs = f
                        .members
                        .iter()
                        .map(|c| detail.value(row, c))
                        .collect::<Result<Vec<_>, _>>()?;
                    macro_avg(&xs)?
                }
                SummaryRule::Select(id) => {
                    for c in &f.members {
                        detail.column_index(c)?;
                    }
                    detail.value(row, id)?
                }
            };
            values.push(v);
        }
        if spec.avg_column.is_some() {
            values.push(macro_avg(&values)?);
        }
        out.push_dense_row(row.clone(), &values)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LcapError {
    #[error("{probs} probabilities but {mask} mask entries")]
    LengthMismatch { probs: usize, mask: usize },
    #[error("probability {value} at position {index} is outside (0, 1]")]
    BadProbability { index: usize, value: f64 },
    #[error("mask selects no positions")]
    EmptyMask,
}

/// Masked mean negative log-likelihood of next-token targets.
pub fn lcap_reference(target_probs: &[f64], mask: &[bool]) -> Result<f64, LcapError> {
    if target_probs.len() != mask.len() {
        return Err(LcapError::LengthMismatch {
            probs: target_probs.len(),
            mask: mask.len(),
        });
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for (index, (&p, &m)) in target_probs.iter().zip(mask).enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(LcapError::BadProbability { index, value: p });
        }
        if m {
            nll -= p.ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(LcapError::EmptyMask);
    }
    Ok(nll / count as f64)
}

/// Flow-matching loss plus the weighted caption loss.
pub fn combined_loss(l_fm: f64, lambda: f64, l_cap: f64) -> f64 {
    l_fm + lambda * l_cap
}
