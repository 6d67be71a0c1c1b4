//! Multi-environment regression data: ingestion, environment-wise views
//! and seeded resampling.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Observations `(X, y)` partitioned by an environment label per row.
///
/// Immutable after construction; all resampling operations return a new
/// dataset and take an explicit seed.
#[derive(Debug, Clone)]
pub struct MultiEnvDataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    env: Vec<String>,
    column_names: Vec<String>,
}

impl MultiEnvDataset {
    /// Validates the invariants: matching lengths, finite values and at
    /// least two observations per environment label.
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        env: Vec<String>,
        column_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = x.nrows();
        if y.len() != n || env.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "X has {n} rows, y has {}, env has {}",
                y.len(),
                env.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "non-finite value in X or y".to_string(),
            ));
        }
        let column_names = match column_names {
            Some(names) => {
                if names.len() != x.ncols() {
                    return Err(Error::DimensionMismatch(format!(
                        "{} column names for {} columns",
                        names.len(),
                        x.ncols()
                    )));
                }
                names
            }
            None => (0..x.ncols()).map(|j| format!("x{j}")).collect(),
        };
        let ds = Self {
            x,
            y,
            env,
            column_names,
        };
        for (label, rows) in ds.env_index().iter() {
            if rows.len() < 2 {
                return Err(Error::EnvironmentTooSmall {
                    label: label.to_string(),
                    count: rows.len(),
                    min: 2,
                });
            }
        }
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn env(&self) -> &[String] {
        &self.env
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    /// Partition of row indices by environment label, labels ordered by
    /// first appearance.
    pub fn env_index(&self) -> EnvIndex {
        EnvIndex::from_labels(&self.env)
    }

    /// Dataset restricted to the given rows (labels kept verbatim).
    /// Skips the min-two-rows-per-environment check: row subsets are
    /// internal intermediates (CV folds, bootstrap draws).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let x = DMatrix::from_fn(rows.len(), self.d(), |i, j| self.x[(rows[i], j)]);
        let y = DVector::from_fn(rows.len(), |i, _| self.y[rows[i]]);
        let env = rows.iter().map(|&i| self.env[i].clone()).collect();
        Self {
            x,
            y,
            env,
            column_names: self.column_names.clone(),
        }
    }

    /// Within-environment bootstrap: for each environment, draw `n_e`
    /// rows with replacement from that environment only.
    pub fn bootstrap_within_env(&self, rng_seed: u64) -> Self {
        let index = self.env_index();
        let mut rows = Vec::with_capacity(self.n());
        for (k, (_, set)) in index.iter().enumerate() {
            let mut rng = rng_from_seed(derive_seed(rng_seed, k as u64));
            for _ in 0..set.len() {
                rows.push(set[rng.random_range(0..set.len())]);
            }
        }
        self.select_rows(&rows)
    }

    /// Draw `floor(n_e / 2)` rows per environment without replacement.
    pub fn subsample_half(&self, rng_seed: u64) -> Result<Self> {
        let index = self.env_index();
        for (label, set) in index.iter() {
            if set.len() < 4 {
                return Err(Error::EnvironmentTooSmall {
                    label: label.to_string(),
                    count: set.len(),
                    min: 4,
                });
            }
        }
        let mut rows = Vec::with_capacity(self.n() / 2);
        for (k, (_, set)) in index.iter().enumerate() {
            let mut rng = rng_from_seed(derive_seed(rng_seed, k as u64));
            let mut pool: Vec<usize> = set.to_vec();
            pool.shuffle(&mut rng);
            pool.truncate(set.len() / 2);
            pool.sort_unstable();
            rows.extend(pool);
        }
        Ok(self.select_rows(&rows))
    }

    /// Write the dataset back out as CSV (response column `y`,
    /// environment column `env`, predictors in column order).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => Error::InvalidArgument(format!("csv error: {other:?}")),
        })?;
        let mut header = vec!["y".to_string(), "env".to_string()];
        header.extend(self.column_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![fmt_f64(self.y[i]), self.env[i].clone()];
            for j in 0..self.d() {
                rec.push(fmt_f64(self.x[(i, j)]));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }
}

/// Shortest decimal representation that round-trips the f64 exactly.
fn fmt_f64(v: f64) -> String {
    let mut buf = ryu_like(v);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_like(v: f64) -> String {
    // `{:?}` on f64 produces the shortest string that parses back exactly.
    format!("{v:?}")
}

/// Ordered partition of `{0..n-1}` by environment label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvIndex {
    labels: Vec<String>,
    row_sets: Vec<Vec<usize>>,
}

impl EnvIndex {
    pub fn from_labels(env: &[String]) -> Self {
        let mut labels: Vec<String> = Vec::new();
        let mut row_sets: Vec<Vec<usize>> = Vec::new();
        for (i, label) in env.iter().enumerate() {
            match labels.iter().position(|l| l == label) {
                Some(k) => row_sets[k].push(i),
                None => {
                    labels.push(label.clone());
                    row_sets.push(vec![i]);
                }
            }
        }
        Self { labels, row_sets }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn rows(&self, k: usize) -> &[usize] {
        &self.row_sets[k]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.row_sets.iter().map(Vec::len).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.labels
            .iter()
            .map(String::as_str)
            .zip(self.row_sets.iter().map(Vec::as_slice))
    }
}

/// Load a CSV file with a header row into a dataset.
///
/// `predictor_cols = None` takes every column except the response and
/// environment columns, in file order.
pub fn load_csv(
    path: &Path,
    response_col: &str,
    env_col: &str,
    predictor_cols: Option<&[String]>,
) -> Result<MultiEnvDataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::InvalidArgument(format!("csv error: {other:?}")),
    })?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|s| s.to_string())
        .collect();

    let col_pos = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_pos = col_pos(response_col)?;
    let env_pos = col_pos(env_col)?;
    let pred_names: Vec<String> = match predictor_cols {
        Some(cols) => {
            for c in cols {
                col_pos(c)?;
            }
            cols.to_vec()
        }
        None => header
            .iter()
            .filter(|h| h.as_str() != response_col && h.as_str() != env_col)
            .cloned()
            .collect(),
    };
    let pred_pos: Vec<usize> = pred_names
        .iter()
        .map(|c| col_pos(c))
        .collect::<Result<_>>()?;

    let mut y = Vec::new();
    let mut env = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |pos: usize, col: &str| -> Result<f64> {
            let raw = record.get(pos).unwrap_or("");
            match raw.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::BadCell {
                    row,
                    column: col.to_string(),
                    value: raw.to_string(),
                }),
            }
        };
        y.push(parse(y_pos, response_col)?);
        env.push(record.get(env_pos).unwrap_or("").to_string());
        for (&pos, name) in pred_pos.iter().zip(&pred_names) {
            xs.push(parse(pos, name)?);
        }
    }
    let n = y.len();
    let d = pred_names.len();
    let x = DMatrix::from_row_slice(n, d, &xs);
    MultiEnvDataset::new(x, DVector::from_vec(y), env, Some(pred_names))
}
