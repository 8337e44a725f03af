//! Tabular study data: CSV ingestion, validation and preprocessing.
//!
//! Preprocessing follows the usual conventions for these trial datasets:
//! subjects with a missing treatment or outcome are dropped, continuous
//! covariates are median-imputed, categorical and binary covariates are
//! mode-imputed, and each covariate that had any missing value gets a
//! `<name>_missing` indicator column. Categorical covariates are
//! indicator-encoded with their most frequent level as the reference.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::median;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("format error at row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Format { row: usize, column: String, value: String },
    #[error("treatment level `{0}` is not present in the treatment map")]
    Mapping(String),
    #[error("no rows remain after dropping subjects with missing treatment or outcome")]
    EmptyDataset,
    #[error("covariate `{0}` has no observed values")]
    EmptyColumn(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnRole {
    Covariate,
    Treatment,
    Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, kind: ColumnKind, role: ColumnRole) -> Self {
        ColumnSpec { name: name.into(), kind, role }
    }
}

/// Checks that the specs name exactly one treatment and one outcome column
/// and that no name repeats.
pub fn validate_specs(specs: &[ColumnSpec]) -> Result<(), DataError> {
    let mut seen = HashSet::new();
    for s in specs {
        if !seen.insert(s.name.as_str()) {
            return Err(DataError::Schema(format!("duplicate column name `{}`", s.name)));
        }
    }
    let count = |role| specs.iter().filter(|s| s.role == role).count();
    if count(ColumnRole::Treatment) != 1 {
        return Err(DataError::Schema("exactly one treatment column is required".into()));
    }
    if count(ColumnRole::Outcome) != 1 {
        return Err(DataError::Schema("exactly one outcome column is required".into()));
    }
    if let Some(s) = specs.iter().find(|s| s.role == ColumnRole::Outcome && s.kind != ColumnKind::Continuous) {
        return Err(DataError::Schema(format!("outcome `{}` must be continuous", s.name)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Missing,
    Number(f64),
    Text(String),
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    fn as_key(&self) -> Option<String> {
        match self {
            Cell::Missing => None,
            Cell::Number(v) => Some(v.to_string()),
            Cell::Text(s) => Some(s.clone()),
        }
    }
}

/// Parsed rows in declared-spec column order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl RawTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn missing_count(&self, name: &str) -> usize {
        match self.column_index(name) {
            Some(j) => self.rows.iter().filter(|r| r[j].is_missing()).count(),
            None => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub missing_tokens: Vec<String>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { missing_tokens: vec![String::new(), "NA".to_string()] }
    }
}

pub fn load_csv(path: impl AsRef<Path>, specs: &[ColumnSpec]) -> Result<RawTable, DataError> {
    load_csv_with(path, specs, &LoadOptions::default())
}

pub fn load_csv_with(path: impl AsRef<Path>, specs: &[ColumnSpec], opts: &LoadOptions) -> Result<RawTable, DataError> {
    let path = path.as_ref();
    let file =
        std::fs::File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    read_csv(file, specs, opts)
}

/// Parses comma-delimited UTF-8 with a header row. Extra columns in the file
/// are ignored; every declared column must be present.
pub fn read_csv<R: Read>(reader: R, specs: &[ColumnSpec], opts: &LoadOptions) -> Result<RawTable, DataError> {
    validate_specs(specs)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut index = Vec::with_capacity(specs.len());
    for s in specs {
        match header.iter().position(|h| *h == s.name) {
            Some(j) => index.push(j),
            None => return Err(DataError::Schema(format!("missing declared column `{}`", s.name))),
        }
    }
    let mut rows = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(specs.len());
        for (s, &j) in specs.iter().zip(&index) {
            let raw = record.get(j).unwrap_or("");
            if opts.missing_tokens.iter().any(|t| t == raw) {
                row.push(Cell::Missing);
                continue;
            }
            let cell = match s.kind {
                ColumnKind::Continuous => match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => Cell::Number(v),
                    _ => return Err(DataError::Format { row: r + 1, column: s.name.clone(), value: raw.to_string() }),
                },
                ColumnKind::Categorical | ColumnKind::Binary => Cell::Text(raw.to_string()),
            };
            row.push(cell);
        }
        rows.push(row);
    }
    Ok(RawTable { columns: specs.iter().map(|s| s.name.clone()).collect(), rows })
}

/// Analysis-ready data: fully populated numeric covariates `w` (n x p),
/// binary treatment `a`, continuous outcome `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisDataset {
    pub w: DMatrix<f64>,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    pub column_names: Vec<String>,
}

impl AnalysisDataset {
    pub fn new(w: DMatrix<f64>, a: Vec<f64>, y: Vec<f64>, column_names: Vec<String>) -> Result<Self, DataError> {
        let n = a.len();
        if n == 0 {
            return Err(DataError::EmptyDataset);
        }
        if y.len() != n || w.nrows() != n {
            return Err(DataError::Schema(format!(
                "length mismatch: w has {} rows, a {}, y {}",
                w.nrows(),
                n,
                y.len()
            )));
        }
        if column_names.len() != w.ncols() {
            return Err(DataError::Schema("column name count does not match covariate columns".into()));
        }
        if a.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(DataError::Schema("treatment must be binary".into()));
        }
        if y.iter().chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(DataError::Schema("non-finite value in covariates or outcome".into()));
        }
        Ok(AnalysisDataset { w, a, y, column_names })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn p(&self) -> usize {
        self.w.ncols()
    }

    /// Design with the treatment prepended as column 0, i.e. the `(A, W)`
    /// input of the outcome regression.
    pub fn treatment_design(&self) -> DMatrix<f64> {
        with_treatment_column(&self.w, &self.a)
    }

    /// `(a, W)` design with the treatment forced to a constant.
    pub fn counterfactual_design(&self, a: f64) -> DMatrix<f64> {
        with_treatment_column(&self.w, &vec![a; self.n()])
    }

    /// Copy restricted to the given covariate columns.
    pub fn select_covariates(&self, keep: &[usize]) -> AnalysisDataset {
        let w = self.w.select_columns(keep);
        let column_names = keep.iter().map(|&j| self.column_names[j].clone()).collect();
        AnalysisDataset { w, a: self.a.clone(), y: self.y.clone(), column_names }
    }
}

pub fn with_treatment_column(w: &DMatrix<f64>, a: &[f64]) -> DMatrix<f64> {
    let n = w.nrows();
    DMatrix::from_fn(n, w.ncols() + 1, |i, j| if j == 0 { a[i] } else { w[(i, j - 1)] })
}

/// Most frequent level; ties go to the lexicographically smallest.
fn mode<'a>(values: impl Iterator<Item = &'a str>) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (level, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((level, c));
        }
    }
    best.map(|(l, _)| l.to_string())
}

pub fn preprocess(
    table: &RawTable,
    specs: &[ColumnSpec],
    treatment_map: &BTreeMap<String, u8>,
) -> Result<AnalysisDataset, DataError> {
    validate_specs(specs)?;
    if table.rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let col = |name: &str| {
        table.column_index(name).ok_or_else(|| DataError::Schema(format!("table lacks declared column `{name}`")))
    };
    let t_spec = specs.iter().find(|s| s.role == ColumnRole::Treatment).expect("validated");
    let y_spec = specs.iter().find(|s| s.role == ColumnRole::Outcome).expect("validated");
    let (tj, yj) = (col(&t_spec.name)?, col(&y_spec.name)?);

    let kept: Vec<&Vec<Cell>> = table.rows.iter().filter(|r| !r[tj].is_missing() && !r[yj].is_missing()).collect();
    if kept.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let n = kept.len();

    let mut a = Vec::with_capacity(n);
    for r in &kept {
        let key = r[tj].as_key().expect("non-missing");
        match treatment_map.get(&key) {
            Some(&v) if v <= 1 => a.push(v as f64),
            _ => return Err(DataError::Mapping(key)),
        }
    }
    let y: Vec<f64> = kept
        .iter()
        .map(|r| match &r[yj] {
            Cell::Number(v) => Ok(*v),
            other => Err(DataError::Schema(format!("non-numeric outcome {other:?}"))),
        })
        .collect::<Result<_, _>>()?;

    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    let mut indicators: Vec<(String, Vec<f64>)> = Vec::new();
    for s in specs.iter().filter(|s| s.role == ColumnRole::Covariate) {
        let j = col(&s.name)?;
        let cells: Vec<&Cell> = kept.iter().map(|r| &r[j]).collect();
        let missing: Vec<f64> = cells.iter().map(|c| if c.is_missing() { 1.0 } else { 0.0 }).collect();
        let any_missing = missing.iter().any(|&m| m > 0.0);
        if missing.iter().all(|&m| m > 0.0) {
            return Err(DataError::EmptyColumn(s.name.clone()));
        }
        match s.kind {
            ColumnKind::Continuous => {
                let observed: Vec<f64> =
                    cells.iter().filter_map(|c| if let Cell::Number(v) = c { Some(*v) } else { None }).collect();
                let fill = median(&observed);
                let values = cells.iter().map(|c| if let Cell::Number(v) = c { *v } else { fill }).collect();
                columns.push((s.name.clone(), values));
            }
            ColumnKind::Categorical | ColumnKind::Binary => {
                let keys: Vec<Option<String>> = cells.iter().map(|c| c.as_key()).collect();
                let fill = mode(keys.iter().flatten().map(String::as_str)).expect("at least one observed");
                let imputed: Vec<String> = keys.into_iter().map(|k| k.unwrap_or_else(|| fill.clone())).collect();
                let numeric_binary = s.kind == ColumnKind::Binary
                    && imputed.iter().all(|v| matches!(v.parse::<f64>(), Ok(x) if x == 0.0 || x == 1.0));
                if numeric_binary {
                    let values = imputed.iter().map(|v| v.parse::<f64>().expect("checked")).collect();
                    columns.push((s.name.clone(), values));
                } else {
                    let levels: Vec<&str> = {
                        let mut l: Vec<&str> = imputed.iter().map(String::as_str).collect();
                        l.sort_unstable();
                        l.dedup();
                        l
                    };
                    if s.kind == ColumnKind::Binary && levels.len() > 2 {
                        return Err(DataError::Schema(format!(
                            "binary column `{}` has {} levels",
                            s.name,
                            levels.len()
                        )));
                    }
                    let reference = mode(imputed.iter().map(String::as_str)).expect("nonempty");
                    for level in levels.into_iter().filter(|l| *l != reference) {
                        let values = imputed.iter().map(|v| if v == level { 1.0 } else { 0.0 }).collect();
                        columns.push((format!("{}={}", s.name, level), values));
                    }
                }
            }
        }
        if any_missing {
            indicators.push((format!("{}_missing", s.name), missing));
        }
    }
    columns.extend(indicators);

    let p = columns.len();
    let w = DMatrix::from_fn(n, p, |i, j| columns[j].1[i]);
    let names = columns.into_iter().map(|(name, _)| name).collect();
    AnalysisDataset::new(w, a, y, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ColumnSpec> {
        vec![
            ColumnSpec::new("x", ColumnKind::Continuous, ColumnRole::Covariate),
            ColumnSpec::new("arm", ColumnKind::Categorical, ColumnRole::Treatment),
            ColumnSpec::new("y", ColumnKind::Continuous, ColumnRole::Outcome),
        ]
    }

    fn tmap() -> BTreeMap<String, u8> {
        [("c".to_string(), 0u8), ("t".to_string(), 1u8)].into_iter().collect()
    }

    fn parse(text: &str, specs: &[ColumnSpec]) -> Result<RawTable, DataError> {
        read_csv(text.as_bytes(), specs, &LoadOptions::default())
    }

    #[test]
    fn empty_outcome_cell_is_missing() {
        let t = parse("x,arm,y\n1,t,2\n2,c,\n3,t,NA\n", &specs()).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.missing_count("y"), 2);
        let t = parse("x,arm,y\n1,t,2\n2,c,\n3,t,4\n", &specs()).unwrap();
        assert_eq!(t.missing_count("y"), 1);
    }

    #[test]
    fn missing_treatment_column_is_schema_error() {
        let err = parse("x,y\n1,2\n", &specs()).unwrap_err();
        assert!(matches!(err, DataError::Schema(_)));
    }

    #[test]
    fn header_only_gives_empty_table() {
        let t = parse("x,arm,y\n", &specs()).unwrap();
        assert!(t.rows.is_empty());
        assert!(matches!(preprocess(&t, &specs(), &tmap()), Err(DataError::EmptyDataset)));
    }

    #[test]
    fn unparseable_number_is_format_error() {
        let err = parse("x,arm,y\nabc,t,1\n", &specs()).unwrap_err();
        assert!(matches!(err, DataError::Format { row: 1, .. }));
    }

    #[test]
    fn median_imputation_with_indicator() {
        let t = parse("x,arm,y\n1,t,0\n,c,0\n3,t,0\n", &specs()).unwrap();
        let d = preprocess(&t, &specs(), &tmap()).unwrap();
        assert_eq!(d.column_names, vec!["x", "x_missing"]);
        assert_eq!(d.w.column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        assert_eq!(d.w.column(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
        assert_eq!(d.a, vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn mode_imputation_for_categorical() {
        let specs = vec![
            ColumnSpec::new("k", ColumnKind::Categorical, ColumnRole::Covariate),
            ColumnSpec::new("arm", ColumnKind::Categorical, ColumnRole::Treatment),
            ColumnSpec::new("y", ColumnKind::Continuous, ColumnRole::Outcome),
        ];
        let t = parse("k,arm,y\na,t,0\na,c,0\n,t,0\n", &specs).unwrap();
        let d = preprocess(&t, &specs, &tmap()).unwrap();
        // single level after imputation: no encoded column survives, only the indicator
        assert_eq!(d.column_names, vec!["k_missing"]);
        assert_eq!(d.w.column(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);

        let t = parse("k,arm,y\na,t,0\nb,c,0\n,t,0\nb,c,1\n", &specs).unwrap();
        let d = preprocess(&t, &specs, &tmap()).unwrap();
        // mode is b, so the missing cell becomes b and a is the only encoded level
        assert_eq!(d.column_names, vec!["k=a", "k_missing"]);
        assert_eq!(d.w.column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mode_tie_prefers_smallest_level() {
        assert_eq!(mode(["b", "a", "b", "a"].into_iter()), Some("a".to_string()));
    }

    #[test]
    fn rows_with_missing_treatment_are_dropped() {
        let t = parse("x,arm,y\n1,t,1\n2,,1\n3,c,1\n4,,1\n5,t,1\n", &specs()).unwrap();
        let d = preprocess(&t, &specs(), &tmap()).unwrap();
        assert_eq!(d.n(), 3);
    }

    #[test]
    fn unknown_treatment_level() {
        let t = parse("x,arm,y\n1,t,1\n2,z,1\n", &specs()).unwrap();
        assert!(matches!(preprocess(&t, &specs(), &tmap()), Err(DataError::Mapping(l)) if l == "z"));
    }

    #[test]
    fn numeric_binary_kept_as_is() {
        let specs = vec![
            ColumnSpec::new("b", ColumnKind::Binary, ColumnRole::Covariate),
            ColumnSpec::new("arm", ColumnKind::Binary, ColumnRole::Treatment),
            ColumnSpec::new("y", ColumnKind::Continuous, ColumnRole::Outcome),
        ];
        let map = [("0".to_string(), 0u8), ("1".to_string(), 1u8)].into_iter().collect();
        let t = parse("b,arm,y\n1,1,0\n0,0,0\n1,1,2\n", &specs).unwrap();
        let d = preprocess(&t, &specs, &map).unwrap();
        assert_eq!(d.column_names, vec!["b"]);
        assert_eq!(d.w.column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = specs();
        s.push(ColumnSpec::new("x", ColumnKind::Continuous, ColumnRole::Covariate));
        assert!(matches!(validate_specs(&s), Err(DataError::Schema(_))));
    }
}
