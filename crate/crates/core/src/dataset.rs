//! Subject-level trial data with monotone dropout.
//!
//! Time indices follow the usual convention: `s = 0` is baseline, outcomes
//! are `Y_1..Y_t`, and `R_s` flags whether `Y_s` was observed. `R_0 = 1` for
//! every subject. Monotonicity means `R_s = 0` implies `R_{s+1} = 0`, so each
//! subject is summarised by the number of observed visits.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, MonotoneViolation, Result};

/// Column layout of a wide-format trial CSV.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub treatment: String,
    pub covariates: Vec<String>,
    pub outcomes: Vec<String>,
    #[serde(default)]
    pub strata: Option<String>,
    #[serde(default)]
    pub missing_token: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

impl CsvSchema {
    pub fn new(treatment: &str, covariates: &[&str], outcomes: &[&str]) -> Self {
        CsvSchema {
            treatment: treatment.to_string(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            outcomes: outcomes.iter().map(|s| s.to_string()).collect(),
            strata: None,
            missing_token: String::new(),
            delimiter: ',',
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    fn delimiter_byte(&self) -> Result<u8> {
        u8::try_from(self.delimiter)
            .map_err(|_| Error::Schema(format!("delimiter {:?} is not ASCII", self.delimiter)))
    }

    fn is_missing(&self, cell: &str) -> bool {
        let c = cell.trim();
        c.is_empty() || (!self.missing_token.is_empty() && c == self.missing_token)
    }
}

/// Preprocessing switches applied while loading.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub drop_nonmonotone: bool,
    pub drop_missing_strata: bool,
}

/// Rows removed during loading, with the reason for each.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub dropped: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Strata {
    levels: Vec<String>,
    codes: Vec<usize>,
}

impl Strata {
    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn code(&self, i: usize) -> usize {
        self.codes[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    n: usize,
    p: usize,
    t: usize,
    covariate_names: Vec<String>,
    outcome_names: Vec<String>,
    treatment_name: String,
    covariates: Vec<f64>,
    treatment: Vec<u8>,
    outcomes: Vec<f64>,
    observed: Vec<usize>,
    strata: Option<Strata>,
    strata_name: Option<String>,
}

/// Response indicators of one subject, `observed(0)` is always true.
#[derive(Debug, Clone, Copy)]
pub struct ResponsePattern {
    observed: usize,
}

impl ResponsePattern {
    pub fn observed(&self, s: usize) -> bool {
        s <= self.observed
    }

    /// `D`: the first visit with a missing outcome, `t + 1` for completers.
    pub fn dropout_time(&self) -> usize {
        self.observed + 1
    }
}

/// `H_{s-1}`: baseline covariates (with stratum dummies) followed by `Y_1..Y_{s-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryView {
    pub subject: usize,
    pub s: usize,
    pub values: Vec<f64>,
}

impl TrialDataset {
    /// Builds a dataset from per-subject rows. `outcomes[i][s-1]` is `Y_s`.
    pub fn from_rows(
        covariates: Vec<Vec<f64>>,
        treatment: Vec<u8>,
        outcomes: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        Self::from_rows_with_strata(covariates, treatment, outcomes, None)
    }

    pub fn from_rows_with_strata(
        covariates: Vec<Vec<f64>>,
        treatment: Vec<u8>,
        outcomes: Vec<Vec<Option<f64>>>,
        strata: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = treatment.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if covariates.len() != n || outcomes.len() != n {
            return Err(Error::InvalidInput(format!(
                "row counts differ: {} covariate rows, {} treatments, {} outcome rows",
                covariates.len(),
                n,
                outcomes.len()
            )));
        }
        let p = covariates[0].len();
        let t = outcomes[0].len();
        if t == 0 {
            return Err(Error::InvalidInput("at least one outcome visit is required".into()));
        }
        let mut cov = Vec::with_capacity(n * p);
        let mut ys = Vec::with_capacity(n * t);
        let mut observed = Vec::with_capacity(n);
        let mut violations = Vec::new();
        for i in 0..n {
            if covariates[i].len() != p || outcomes[i].len() != t {
                return Err(Error::InvalidInput(format!("row {} has the wrong width", i + 1)));
            }
            if treatment[i] > 1 {
                return Err(Error::InvalidInput(format!(
                    "row {}: treatment must be 0 or 1, got {}",
                    i + 1,
                    treatment[i]
                )));
            }
            if let Some(j) = covariates[i].iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "row {}: covariate {} is not finite",
                    i + 1,
                    j + 1
                )));
            }
            cov.extend_from_slice(&covariates[i]);
            match monotone_count(&outcomes[i]) {
                Ok(k) => observed.push(k),
                Err((missing_at, observed_at)) => {
                    violations.push(MonotoneViolation {
                        row: i + 1,
                        missing_at,
                        observed_at,
                    });
                    observed.push(0);
                }
            }
            for y in &outcomes[i] {
                match y {
                    Some(v) if !v.is_finite() => {
                        return Err(Error::InvalidInput(format!(
                            "row {}: outcome is not finite",
                            i + 1
                        )))
                    }
                    Some(v) => ys.push(*v),
                    None => ys.push(f64::NAN),
                }
            }
        }
        if !violations.is_empty() {
            return Err(Error::NonMonotone(violations));
        }
        let strata = match strata {
            None => None,
            Some(labels) => {
                if labels.len() != n {
                    return Err(Error::InvalidInput("strata length differs from n".into()));
                }
                Some(encode_strata(&labels))
            }
        };
        Ok(TrialDataset {
            n,
            p,
            t,
            covariate_names: (1..=p).map(|j| format!("X{j}")).collect(),
            outcome_names: (1..=t).map(|s| format!("Y{s}")).collect(),
            treatment_name: "A".into(),
            covariates: cov,
            treatment,
            outcomes: ys,
            observed,
            strata_name: strata.as_ref().map(|_| "stratum".to_string()),
            strata,
        })
    }

    /// Renames columns; used when writing back to CSV.
    pub fn with_names(
        mut self,
        treatment: &str,
        covariates: &[String],
        outcomes: &[String],
    ) -> Result<Self> {
        if covariates.len() != self.p || outcomes.len() != self.t {
            return Err(Error::Schema("column name counts do not match the data".into()));
        }
        self.treatment_name = treatment.to_string();
        self.covariate_names = covariates.to_vec();
        self.outcome_names = outcomes.to_vec();
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of post-baseline visits.
    pub fn t(&self) -> usize {
        self.t
    }

    /// Number of raw covariates, excluding stratum dummies.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn outcome_names(&self) -> &[String] {
        &self.outcome_names
    }

    pub fn strata(&self) -> Option<&Strata> {
        self.strata.as_ref()
    }

    pub fn covariates(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.p..(i + 1) * self.p]
    }

    pub fn treatment(&self, i: usize) -> u8 {
        self.treatment[i]
    }

    pub fn treatments(&self) -> &[u8] {
        &self.treatment
    }

    pub fn response(&self, i: usize, s: usize) -> bool {
        s <= self.observed[i]
    }

    pub fn pattern(&self, i: usize) -> ResponsePattern {
        ResponsePattern {
            observed: self.observed[i],
        }
    }

    /// Number of observed post-baseline visits.
    pub fn observed_visits(&self, i: usize) -> usize {
        self.observed[i]
    }

    pub fn dropout_time(&self, i: usize) -> usize {
        self.observed[i] + 1
    }

    pub fn outcome(&self, i: usize, s: usize) -> Option<f64> {
        assert!(s >= 1 && s <= self.t, "visit index {s} out of range");
        if self.response(i, s) {
            Some(self.outcomes[i * self.t + s - 1])
        } else {
            None
        }
    }

    /// `Y_1..Y_k` for a subject; requires `R_k = 1`.
    pub fn outcomes_upto(&self, i: usize, k: usize) -> &[f64] {
        debug_assert!(self.response(i, k));
        &self.outcomes[i * self.t..i * self.t + k]
    }

    /// Width of the baseline vector: covariates plus one dummy per non-reference stratum.
    pub fn baseline_dim(&self) -> usize {
        self.p + self.strata.as_ref().map_or(0, |s| s.levels.len().saturating_sub(1))
    }

    pub fn baseline_into(&self, i: usize, out: &mut Vec<f64>) {
        out.extend_from_slice(self.covariates(i));
        if let Some(st) = &self.strata {
            let code = st.codes[i];
            for l in 1..st.levels.len() {
                out.push(if code == l { 1.0 } else { 0.0 });
            }
        }
    }

    pub fn baseline(&self, i: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.baseline_dim());
        self.baseline_into(i, &mut v);
        v
    }

    /// `H_{s-1}` for subject `i`, or `None` when `R_{s-1} = 0`.
    pub fn history(&self, i: usize, s: usize) -> Option<HistoryView> {
        assert!(s >= 1 && s <= self.t + 1, "history index {s} out of range");
        if !self.response(i, s - 1) {
            return None;
        }
        let mut values = self.baseline(i);
        values.extend_from_slice(self.outcomes_upto(i, s - 1));
        Some(HistoryView {
            subject: i,
            s,
            values,
        })
    }

    /// Stacks `H_{s-1}` over subjects with `R_{s-1} = 1` that satisfy `filter`.
    pub fn history_matrix(
        &self,
        s: usize,
        filter: impl Fn(u8, ResponsePattern) -> bool,
    ) -> (Vec<usize>, DMatrix<f64>) {
        let width = self.baseline_dim() + s - 1;
        let mut rows = Vec::new();
        let mut data = Vec::new();
        for i in 0..self.n {
            if self.response(i, s - 1) && filter(self.treatment[i], self.pattern(i)) {
                rows.push(i);
                self.baseline_into(i, &mut data);
                data.extend_from_slice(self.outcomes_upto(i, s - 1));
            }
        }
        let m = DMatrix::from_row_slice(rows.len(), width, &data);
        (rows, m)
    }

    /// A new dataset made of the given subjects, repeats allowed. Stratum levels are kept.
    pub fn subset(&self, idx: &[usize]) -> TrialDataset {
        let mut covariates = Vec::with_capacity(idx.len() * self.p);
        let mut outcomes = Vec::with_capacity(idx.len() * self.t);
        let mut treatment = Vec::with_capacity(idx.len());
        let mut observed = Vec::with_capacity(idx.len());
        for &i in idx {
            covariates.extend_from_slice(self.covariates(i));
            outcomes.extend_from_slice(&self.outcomes[i * self.t..(i + 1) * self.t]);
            treatment.push(self.treatment[i]);
            observed.push(self.observed[i]);
        }
        let strata = self.strata.as_ref().map(|s| Strata {
            levels: s.levels.clone(),
            codes: idx.iter().map(|&i| s.codes[i]).collect(),
        });
        TrialDataset {
            n: idx.len(),
            p: self.p,
            t: self.t,
            covariate_names: self.covariate_names.clone(),
            outcome_names: self.outcome_names.clone(),
            treatment_name: self.treatment_name.clone(),
            covariates,
            treatment,
            outcomes,
            observed,
            strata,
            strata_name: self.strata_name.clone(),
        }
    }

    pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema, opts: LoadOptions) -> Result<(Self, LoadReport)> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(f, schema, opts)
    }

    pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema, opts: LoadOptions) -> Result<(Self, LoadReport)> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(schema.delimiter_byte()?)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Schema(e.to_string()))?
            .clone();
        let find = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
        };
        let a_col = find(&schema.treatment)?;
        let x_cols = schema
            .covariates
            .iter()
            .map(|c| find(c))
            .collect::<Result<Vec<_>>>()?;
        let y_cols = schema
            .outcomes
            .iter()
            .map(|c| find(c))
            .collect::<Result<Vec<_>>>()?;
        if y_cols.is_empty() {
            return Err(Error::Schema("at least one outcome column is required".into()));
        }
        let s_col = schema.strata.as_deref().map(find).transpose()?;

        let mut report = LoadReport::default();
        let mut covariates = Vec::new();
        let mut treatment = Vec::new();
        let mut outcomes = Vec::new();
        let mut strata = Vec::new();
        let mut missing_baseline = Vec::new();
        let mut violations = Vec::new();

        for (r, rec) in rdr.records().enumerate() {
            let row = r + 1;
            let rec = rec.map_err(|e| Error::Parse {
                row,
                column: String::new(),
                message: e.to_string(),
            })?;
            let cell = |j: usize| rec.get(j).unwrap_or("");

            let mut row_missing = schema.is_missing(cell(a_col));
            let mut x = Vec::with_capacity(x_cols.len());
            for (k, &j) in x_cols.iter().enumerate() {
                if schema.is_missing(cell(j)) {
                    row_missing = true;
                    x.push(f64::NAN);
                } else {
                    x.push(parse_f64(cell(j), row, &schema.covariates[k])?);
                }
            }
            if row_missing {
                missing_baseline.push(row);
                continue;
            }
            let a = parse_treatment(cell(a_col), row, &schema.treatment)?;

            let mut ys = Vec::with_capacity(y_cols.len());
            for (k, &j) in y_cols.iter().enumerate() {
                if schema.is_missing(cell(j)) {
                    ys.push(None);
                } else {
                    ys.push(Some(parse_f64(cell(j), row, &schema.outcomes[k])?));
                }
            }
            if let Err((missing_at, observed_at)) = monotone_count(&ys) {
                if opts.drop_nonmonotone {
                    report.dropped.push((
                        row,
                        format!("non-monotone: missing at visit {missing_at}, observed at {observed_at}"),
                    ));
                    continue;
                }
                violations.push(MonotoneViolation {
                    row,
                    missing_at,
                    observed_at,
                });
                continue;
            }
            if let Some(j) = s_col {
                if schema.is_missing(cell(j)) {
                    if opts.drop_missing_strata {
                        report.dropped.push((row, "missing stratum".into()));
                        continue;
                    }
                    return Err(Error::Parse {
                        row,
                        column: schema.strata.clone().unwrap_or_default(),
                        message: "missing stratum label".into(),
                    });
                }
                strata.push(cell(j).to_string());
            }
            covariates.push(x);
            treatment.push(a);
            outcomes.push(ys);
        }
        if !missing_baseline.is_empty() {
            return Err(Error::MissingBaseline(missing_baseline));
        }
        if !violations.is_empty() {
            return Err(Error::NonMonotone(violations));
        }
        if treatment.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut ds = Self::from_rows_with_strata(
            covariates,
            treatment,
            outcomes,
            s_col.map(|_| strata),
        )?;
        ds.treatment_name = schema.treatment.clone();
        ds.covariate_names = schema.covariates.clone();
        ds.outcome_names = schema.outcomes.clone();
        ds.strata_name = schema.strata.clone();
        Ok((ds, report))
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>, schema: &CsvSchema) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(f, schema)
    }

    /// Writes the data under `schema`'s column names. Floats use the shortest
    /// representation that parses back to the same bits.
    pub fn write_csv<W: Write>(&self, writer: W, schema: &CsvSchema) -> Result<()> {
        if schema.covariates.len() != self.p || schema.outcomes.len() != self.t {
            return Err(Error::Schema("schema does not match dataset dimensions".into()));
        }
        if schema.strata.is_some() != self.strata.is_some() {
            return Err(Error::Schema("schema and dataset disagree on strata".into()));
        }
        let mut w = csv::WriterBuilder::new()
            .delimiter(schema.delimiter_byte()?)
            .from_writer(writer);
        let mut header = vec![schema.treatment.clone()];
        header.extend(schema.covariates.iter().cloned());
        if let Some(s) = &schema.strata {
            header.push(s.clone());
        }
        header.extend(schema.outcomes.iter().cloned());
        w.write_record(&header).map_err(csv_io)?;
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.n {
            rec.clear();
            rec.push(self.treatment[i].to_string());
            rec.extend(self.covariates(i).iter().map(|v| format!("{v:?}")));
            if let Some(st) = &self.strata {
                rec.push(st.levels[st.codes[i]].clone());
            }
            for s in 1..=self.t {
                rec.push(match self.outcome(i, s) {
                    Some(v) => format!("{v:?}"),
                    None => schema.missing_token.clone(),
                });
            }
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// A schema matching this dataset's own column names.
    pub fn default_schema(&self) -> CsvSchema {
        CsvSchema {
            treatment: self.treatment_name.clone(),
            covariates: self.covariate_names.clone(),
            outcomes: self.outcome_names.clone(),
            strata: self.strata.as_ref().map(|_| {
                self.strata_name.clone().unwrap_or_else(|| "stratum".into())
            }),
            missing_token: String::new(),
            delimiter: ',',
        }
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Number of leading observed visits, or the first (missing, later observed) pair.
fn monotone_count(ys: &[Option<f64>]) -> std::result::Result<usize, (usize, usize)> {
    let k = ys.iter().take_while(|y| y.is_some()).count();
    match ys[k..].iter().position(|y| y.is_some()) {
        None => Ok(k),
        Some(off) => Err((k + 1, k + off + 1)),
    }
}

fn encode_strata(labels: &[String]) -> Strata {
    let mut levels: Vec<String> = labels.to_vec();
    levels.sort();
    levels.dedup();
    let codes = labels
        .iter()
        .map(|l| levels.binary_search(l).expect("level present"))
        .collect();
    Strata { levels, codes }
}

fn parse_f64(cell: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("cannot parse {cell:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("non-finite value {cell:?}"),
        });
    }
    Ok(v)
}

fn parse_treatment(cell: &str, row: usize, column: &str) -> Result<u8> {
    let v = parse_f64(cell, row, column)?;
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("treatment must be 0 or 1, got {cell:?}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> TrialDataset {
        TrialDataset::from_rows(
            vec![vec![0.5, 1.0], vec![-1.0, 0.0], vec![2.0, 1.0]],
            vec![1, 0, 1],
            vec![
                vec![Some(1.0), Some(2.0)],
                vec![Some(0.5), None],
                vec![None, None],
            ],
        )
        .unwrap()
    }

    #[test]
    fn dropout_time_counts_observed_visits() {
        let ds = toy();
        assert_eq!(ds.dropout_time(0), 3);
        assert_eq!(ds.dropout_time(1), 2);
        assert_eq!(ds.dropout_time(2), 1);
        assert!(ds.response(2, 0));
        assert!(!ds.response(2, 1));
    }

    #[test]
    fn history_requires_previous_response() {
        let ds = toy();
        assert_eq!(ds.history(0, 3).unwrap().values, vec![0.5, 1.0, 1.0, 2.0]);
        assert_eq!(ds.history(1, 2).unwrap().values, vec![-1.0, 0.0, 0.5]);
        assert!(ds.history(1, 3).is_none());
        assert!(ds.history(2, 2).is_none());
    }

    #[test]
    fn history_matrix_filters_on_arm() {
        let ds = toy();
        let (rows, m) = ds.history_matrix(2, |a, _| a == 1);
        assert_eq!(rows, vec![0]);
        assert_eq!(m.ncols(), 3);
        assert_eq!(m[(0, 2)], 1.0);
    }

    #[test]
    fn strata_encode_sorted_with_reference_level() {
        let ds = TrialDataset::from_rows_with_strata(
            vec![vec![0.0]; 3],
            vec![0, 1, 0],
            vec![vec![Some(1.0)]; 3],
            Some(vec!["b".into(), "a".into(), "c".into()]),
        )
        .unwrap();
        assert_eq!(ds.baseline_dim(), 3);
        assert_eq!(ds.baseline(0), vec![0.0, 1.0, 0.0]);
        assert_eq!(ds.baseline(1), vec![0.0, 0.0, 0.0]);
        assert_eq!(ds.baseline(2), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn nonmonotone_rows_are_listed() {
        let err = TrialDataset::from_rows(
            vec![vec![0.0]; 2],
            vec![0, 1],
            vec![vec![None, Some(1.0)], vec![Some(1.0), Some(2.0)]],
        )
        .unwrap_err();
        match err {
            Error::NonMonotone(v) => {
                assert_eq!(v, vec![MonotoneViolation { row: 1, missing_at: 1, observed_at: 2 }])
            }
            e => panic!("unexpected {e}"),
        }
    }
}
