//! Ordinary least squares on predictor subsets, pooled and per
//! environment, with the loss functionals used for scoring.

use nalgebra::{DMatrix, DVector};

use crate::dataset::MultiEnvDataset;
use crate::error::{Error, Result};

/// An OLS fit restricted to a predictor subset. Always includes an
/// intercept; the empty subset is the mean-only model.
#[derive(Debug, Clone)]
pub struct SubsetFit {
    pub subset: Vec<usize>,
    pub intercept: f64,
    pub coefs: DVector<f64>,
    pub residuals: DVector<f64>,
    pub pooled_mse: f64,
    /// Per-environment mean squared residual, keyed like the fitted
    /// rows' `EnvIndex`.
    pub env_mse: Vec<(String, f64)>,
}

impl SubsetFit {
    /// `intercept + Xnew[:, subset] * coefs`.
    pub fn predict(&self, xnew: &DMatrix<f64>) -> Result<DVector<f64>> {
        let needed = self.subset.iter().max().map_or(0, |m| m + 1);
        if xnew.ncols() < needed {
            return Err(Error::DimensionMismatch(format!(
                "prediction matrix has {} columns, subset needs {}",
                xnew.ncols(),
                needed
            )));
        }
        let mut out = DVector::from_element(xnew.nrows(), self.intercept);
        for (k, &j) in self.subset.iter().enumerate() {
            let b = self.coefs[k];
            for i in 0..xnew.nrows() {
                out[i] += b * xnew[(i, j)];
            }
        }
        Ok(out)
    }
}

/// Relative pivot threshold for declaring a design rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Least squares of `y[rows]` on `[1, X[rows, subset]]` via
/// column-pivoted QR. Rank deficiency is an error, never a
/// pseudo-inverse fallback.
pub fn fit_ols(
    ds: &MultiEnvDataset,
    subset: &[usize],
    rows: Option<&[usize]>,
) -> Result<SubsetFit> {
    let all_rows: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all_rows = (0..ds.n()).collect();
            &all_rows
        }
    };
    let n = rows.len();
    let k = subset.len() + 1;
    if n <= k {
        return Err(Error::Underdetermined { rows: n, params: k });
    }
    for &j in subset {
        if j >= ds.d() {
            return Err(Error::InvalidArgument(format!(
                "subset index {j} out of range for d = {}",
                ds.d()
            )));
        }
    }

    let design = DMatrix::from_fn(n, k, |i, j| {
        if j == 0 {
            1.0
        } else {
            ds.x()[(rows[i], subset[j - 1])]
        }
    });
    let yv = DVector::from_fn(n, |i, _| ds.y()[rows[i]]);

    let beta = solve_least_squares(&design, &yv).ok_or_else(|| Error::SingularDesign {
        subset: subset.to_vec(),
    })?;

    let fitted = &design * &beta;
    let residuals = &yv - &fitted;
    let pooled_mse = residuals.iter().map(|r| r * r).sum::<f64>() / n as f64;

    let labels: Vec<String> = rows.iter().map(|&i| ds.env()[i].clone()).collect();
    let idx = crate::dataset::EnvIndex::from_labels(&labels);
    let env_mse = idx
        .iter()
        .map(|(label, set)| {
            let mse = set.iter().map(|&i| residuals[i] * residuals[i]).sum::<f64>()
                / set.len() as f64;
            (label.to_string(), mse)
        })
        .collect();

    Ok(SubsetFit {
        subset: subset.to_vec(),
        intercept: beta[0],
        coefs: DVector::from_fn(subset.len(), |j, _| beta[j + 1]),
        residuals,
        pooled_mse,
        env_mse,
    })
}

/// QR least squares with a rank check; `None` on rank deficiency.
pub(crate) fn solve_least_squares(a: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let k = a.ncols();
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let max_diag = (0..r.nrows().min(r.ncols()))
        .map(|i| r[(i, i)].abs())
        .fold(0.0f64, f64::max);
    if max_diag == 0.0 {
        return None;
    }
    for i in 0..k {
        if r[(i, i)].abs() < RANK_TOL * max_diag {
            return None;
        }
    }
    // A P = Q R, so solve R z = Qᵀy and undo the column permutation
    let mut z = qr.q().transpose() * y;
    if !r.view((0, 0), (k, k)).solve_upper_triangular_mut(&mut z) {
        return None;
    }
    qr.p().inv_permute_rows(&mut z);
    Some(z)
}

/// One OLS fit per observed environment, in environment order.
pub fn fit_ols_per_env(ds: &MultiEnvDataset, subset: &[usize]) -> Result<Vec<SubsetFit>> {
    ds.env_index()
        .iter()
        .map(|(_, rows)| fit_ols(ds, subset, Some(rows)))
        .collect()
}

/// Mean squared difference of two equal-length vectors.
pub fn mean_squared_error(y: &DVector<f64>, pred: &DVector<f64>) -> f64 {
    assert_eq!(y.len(), pred.len());
    y.iter()
        .zip(pred.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.len() as f64
}

/// Mean squared prediction residual of `fit` over the whole dataset.
pub fn mse_pooled(fit: &SubsetFit, ds: &MultiEnvDataset) -> Result<f64> {
    let pred = fit.predict(ds.x())?;
    let n = ds.n() as f64;
    Ok(ds
        .y()
        .iter()
        .zip(pred.iter())
        .map(|(y, p)| (y - p) * (y - p))
        .sum::<f64>()
        / n)
}

/// Per-environment mean squared prediction residuals.
pub fn mse_per_env(fit: &SubsetFit, ds: &MultiEnvDataset) -> Result<Vec<(String, f64)>> {
    let pred = fit.predict(ds.x())?;
    Ok(ds
        .env_index()
        .iter()
        .map(|(label, rows)| {
            let mse = rows
                .iter()
                .map(|&i| {
                    let r = ds.y()[i] - pred[i];
                    r * r
                })
                .sum::<f64>()
                / rows.len() as f64;
            (label.to_string(), mse)
        })
        .collect())
}

/// Largest environment-wise mean squared prediction residual.
pub fn mse_worst_env(fit: &SubsetFit, ds: &MultiEnvDataset) -> Result<f64> {
    Ok(mse_per_env(fit, ds)?
        .into_iter()
        .map(|(_, m)| m)
        .fold(f64::NEG_INFINITY, f64::max))
}
