//! Coordinate-descent Lasso over a regularization path, with
//! environment-stratified cross-validation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::dataset::MultiEnvDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// A Lasso solution at one penalty value, in original (unstandardized)
/// coordinates. `coefs` has length d with exact zeros outside the
/// active set.
#[derive(Debug, Clone)]
pub struct LassoFit {
    pub lambda: f64,
    pub intercept: f64,
    pub coefs: DVector<f64>,
    pub active_set: Vec<usize>,
    /// Zero-variance columns that were dropped before fitting.
    pub dropped_columns: Vec<usize>,
}

impl LassoFit {
    pub fn predict(&self, xnew: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::from_element(xnew.nrows(), self.intercept);
        for &j in &self.active_set {
            let b = self.coefs[j];
            for i in 0..xnew.nrows() {
                out[i] += b * xnew[(i, j)];
            }
        }
        out
    }
}

const CD_TOL: f64 = 1e-7;
const CD_MAX_ITER: usize = 10_000;

struct Standardized {
    xs: DMatrix<f64>,
    yc: DVector<f64>,
    x_mean: Vec<f64>,
    x_sd: Vec<f64>,
    y_mean: f64,
    kept: Vec<usize>,
    dropped: Vec<usize>,
}

fn standardize(ds: &MultiEnvDataset, rows: &[usize]) -> Standardized {
    let n = rows.len();
    let d = ds.d();
    let mut x_mean = vec![0.0; d];
    let mut x_sd = vec![0.0; d];
    for j in 0..d {
        let mut m = 0.0;
        for &i in rows {
            m += ds.x()[(i, j)];
        }
        m /= n as f64;
        let mut v = 0.0;
        for &i in rows {
            let c = ds.x()[(i, j)] - m;
            v += c * c;
        }
        x_mean[j] = m;
        x_sd[j] = (v / n as f64).sqrt();
    }
    let y_mean = rows.iter().map(|&i| ds.y()[i]).sum::<f64>() / n as f64;

    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..d {
        if x_sd[j] > 1e-12 {
            kept.push(j);
        } else {
            dropped.push(j);
        }
    }
    let xs = DMatrix::from_fn(n, kept.len(), |i, jj| {
        let j = kept[jj];
        (ds.x()[(rows[i], j)] - x_mean[j]) / x_sd[j]
    });
    let yc = DVector::from_fn(n, |i, _| ds.y()[rows[i]] - y_mean);
    Standardized {
        xs,
        yc,
        x_mean,
        x_sd,
        y_mean,
        kept,
        dropped,
    }
}

/// Smallest penalty at which every coefficient is zero:
/// `max_j |<x_j, y - mean(y)>| / n` in standardized coordinates.
pub fn lambda_max(ds: &MultiEnvDataset, rows: Option<&[usize]>) -> f64 {
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..ds.n()).collect();
            &all
        }
    };
    let st = standardize(ds, rows);
    let n = rows.len() as f64;
    (0..st.kept.len())
        .map(|jj| (st.xs.column(jj).dot(&st.yc) / n).abs())
        .fold(0.0f64, f64::max)
}

/// Log-spaced descending grid from `lambda_max` down to
/// `eps * lambda_max`.
pub fn default_lambda_grid(ds: &MultiEnvDataset, n_lambdas: usize, eps: f64) -> Vec<f64> {
    let lmax = lambda_max(ds, None).max(1e-12);
    let lmin = lmax * eps;
    (0..n_lambdas)
        .map(|k| {
            let t = k as f64 / (n_lambdas - 1).max(1) as f64;
            lmax * (lmin / lmax).powf(t)
        })
        .collect()
}

/// Coordinate descent with soft thresholding and warm starts along a
/// descending penalty grid. Predictors are standardized internally on
/// the fitted rows; reported coefficients are on the original scale.
pub fn fit_lasso_path(
    ds: &MultiEnvDataset,
    lambdas: &[f64],
    rows: Option<&[usize]>,
) -> Result<Vec<LassoFit>> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".to_string()));
    }
    if lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument(
            "lambda grid must be strictly descending".to_string(),
        ));
    }
    if lambdas.iter().any(|&l| l < 0.0 || !l.is_finite()) {
        return Err(Error::InvalidArgument("negative lambda".to_string()));
    }
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..ds.n()).collect();
            &all
        }
    };
    let st = standardize(ds, rows);
    let n = rows.len();
    let p = st.kept.len();

    let mut beta = DVector::<f64>::zeros(p);
    let mut resid = st.yc.clone();
    let mut fits = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        coordinate_descent(&st.xs, &mut beta, &mut resid, lambda, n);
        // back-transform to original coordinates
        let mut coefs = DVector::zeros(ds.d());
        let mut active = Vec::new();
        let mut intercept = st.y_mean;
        for (jj, &j) in st.kept.iter().enumerate() {
            if beta[jj] != 0.0 {
                let b = beta[jj] / st.x_sd[j];
                coefs[j] = b;
                intercept -= b * st.x_mean[j];
                active.push(j);
            }
        }
        fits.push(LassoFit {
            lambda,
            intercept,
            coefs,
            active_set: active,
            dropped_columns: st.dropped.clone(),
        });
    }
    Ok(fits)
}

fn coordinate_descent(
    xs: &DMatrix<f64>,
    beta: &mut DVector<f64>,
    resid: &mut DVector<f64>,
    lambda: f64,
    n: usize,
) {
    let p = beta.len();
    let nf = n as f64;
    for _ in 0..CD_MAX_ITER {
        let mut max_change = 0.0f64;
        for j in 0..p {
            let xj = xs.column(j);
            let old = beta[j];
            // unit variance columns: <x_j, x_j>/n == 1
            let rho = old + xj.dot(resid) / nf;
            let new = soft_threshold(rho, lambda);
            if new != old {
                let delta = new - old;
                for i in 0..n {
                    resid[i] -= delta * xs[(i, j)];
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < CD_TOL {
            break;
        }
    }
}

pub(crate) fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// K-fold cross-validated Lasso; folds stratified by environment, the
/// penalty minimizing mean held-out MSE, refit on all data.
pub fn cv_lasso(ds: &MultiEnvDataset, k_folds: usize, rng_seed: u64) -> Result<LassoFit> {
    cv_lasso_on_grid(ds, &default_lambda_grid(ds, 100, 1e-3), k_folds, rng_seed)
}

pub fn cv_lasso_on_grid(
    ds: &MultiEnvDataset,
    lambdas: &[f64],
    k_folds: usize,
    rng_seed: u64,
) -> Result<LassoFit> {
    if k_folds < 2 {
        return Err(Error::InvalidArgument("k_folds must be >= 2".to_string()));
    }
    let folds = stratified_folds(ds, k_folds, rng_seed);
    // per-fold mean squared prediction error for every penalty
    let mut fold_err: Vec<Vec<f64>> = vec![Vec::new(); lambdas.len()];
    for held_out in &folds {
        if held_out.is_empty() {
            continue;
        }
        let mut mask = vec![true; ds.n()];
        for &i in held_out {
            mask[i] = false;
        }
        let train: Vec<usize> = (0..ds.n()).filter(|&i| mask[i]).collect();
        let path = fit_lasso_path(ds, lambdas, Some(&train))?;
        for (k, fit) in path.iter().enumerate() {
            let mut sse = 0.0;
            for &i in held_out {
                let mut pred = fit.intercept;
                for &j in &fit.active_set {
                    pred += fit.coefs[j] * ds.x()[(i, j)];
                }
                let r = ds.y()[i] - pred;
                sse += r * r;
            }
            fold_err[k].push(sse / held_out.len() as f64);
        }
    }
    let mean_err: Vec<f64> = fold_err
        .iter()
        .map(|e| e.iter().sum::<f64>() / e.len().max(1) as f64)
        .collect();
    let best = (0..lambdas.len())
        .min_by(|&a, &b| mean_err[a].partial_cmp(&mean_err[b]).unwrap())
        .unwrap();
    // one-standard-error rule: largest penalty whose CV error stays
    // within one standard error of the minimum
    let se = {
        let e = &fold_err[best];
        let m = mean_err[best];
        let var = e.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
            / (e.len().saturating_sub(1)).max(1) as f64;
        (var / e.len().max(1) as f64).sqrt()
    };
    let chosen = (0..=best)
        .find(|&k| mean_err[k] <= mean_err[best] + se)
        .unwrap_or(best);
    // refit on all data at the selected penalty; warm-start down the path
    let path = fit_lasso_path(ds, &lambdas[..=chosen], None)?;
    Ok(path.into_iter().next_back().unwrap())
}

/// Deal each environment's (shuffled) rows round-robin into k folds so
/// every fold sees every environment.
fn stratified_folds(ds: &MultiEnvDataset, k_folds: usize, rng_seed: u64) -> Vec<Vec<usize>> {
    let idx = ds.env_index();
    let mut folds = vec![Vec::new(); k_folds];
    for (e, (_, rows)) in idx.iter().enumerate() {
        let mut rows: Vec<usize> = rows.to_vec();
        let mut rng = rng_from_seed(derive_seed(rng_seed, e as u64));
        rows.shuffle(&mut rng);
        for (i, r) in rows.into_iter().enumerate() {
            folds[i % k_folds].push(r);
        }
    }
    folds
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn dataset(x: DMatrix<f64>, y: DVector<f64>) -> MultiEnvDataset {
        let n = x.nrows();
        let env = (0..n).map(|i| format!("e{}", i % 2)).collect();
        MultiEnvDataset::new(x, y, env, None).unwrap()
    }

    fn gaussian_data(n: usize, d: usize, beta: &[f64], noise: f64, seed: u64) -> MultiEnvDataset {
        let mut rng = rng_from_seed(seed);
        let x = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
        let y = DVector::from_fn(n, |i, _| {
            let mut v = noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            for (j, b) in beta.iter().enumerate() {
                v += b * x[(i, j)];
            }
            v
        });
        dataset(x, y)
    }

    #[test]
    fn all_zero_above_lambda_max() {
        let ds = gaussian_data(100, 5, &[1.0, -2.0, 0.0, 0.0, 0.0], 0.5, 1);
        let lmax = lambda_max(&ds, None);
        let fits = fit_lasso_path(&ds, &[lmax * 1.001], None).unwrap();
        assert!(fits[0].active_set.is_empty());
        assert!(fits[0].coefs.amax() == 0.0);
    }

    #[test]
    fn orthonormal_soft_threshold_oracle() {
        // build an orthonormal standardized design via Gram-Schmidt on
        // a random matrix, then check beta_j = S(ols_j, lambda)
        let n = 64;
        let d = 4;
        let mut rng = rng_from_seed(9);
        let raw: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
        // orthogonalize columns against the ones vector and each other
        let mut q = raw.clone();
        for j in 0..d {
            let mean = q.column(j).mean();
            for i in 0..n {
                q[(i, j)] -= mean;
            }
            for k in 0..j {
                let proj = q.column(j).dot(&q.column(k)) / q.column(k).norm_squared();
                let col_k = q.column(k).clone_owned();
                for i in 0..n {
                    q[(i, j)] -= proj * col_k[i];
                }
            }
            // scale to unit sample variance so standardization is a no-op
            let sd = (q.column(j).norm_squared() / n as f64).sqrt();
            for i in 0..n {
                q[(i, j)] /= sd;
            }
        }
        let y = DVector::from_fn(n, |i, _| {
            2.0 * q[(i, 0)] - 1.0 * q[(i, 1)] + 0.3 * q[(i, 2)]
        });
        let ds = dataset(q.clone(), y.clone());
        let lambda = 0.5;
        let lmax = lambda_max(&ds, None);
        let fits = fit_lasso_path(&ds, &[lmax * 1.01, lambda], None).unwrap();
        let fit = &fits[1];
        for j in 0..d {
            let ols_j = q.column(j).dot(&y) / n as f64;
            let expect = soft_threshold(ols_j, lambda);
            assert_relative_eq!(fit.coefs[j], expect, epsilon = 1e-5);
        }
    }

    #[test]
    fn kkt_conditions_hold() {
        let ds = gaussian_data(150, 5, &[1.0, -0.8, 0.5, 0.0, 0.0], 0.3, 3);
        let lmax = lambda_max(&ds, None);
        let lambda = lmax * 0.3;
        let fits = fit_lasso_path(&ds, &[lmax * 1.01, lambda], None).unwrap();
        let fit = &fits[1];
        // recompute gradient in standardized coordinates
        let rows: Vec<usize> = (0..ds.n()).collect();
        let st = standardize(&ds, &rows);
        let n = ds.n() as f64;
        let mut resid = st.yc.clone();
        for (jj, &j) in st.kept.iter().enumerate() {
            let b_std = fit.coefs[j] * st.x_sd[j];
            for i in 0..ds.n() {
                resid[i] -= b_std * st.xs[(i, jj)];
            }
        }
        for (jj, &j) in st.kept.iter().enumerate() {
            let grad = st.xs.column(jj).dot(&resid) / n;
            if fit.coefs[j] != 0.0 {
                assert!(
                    (grad - lambda * fit.coefs[j].signum()).abs() <= 1e-6,
                    "active KKT violated at {j}: grad {grad}"
                );
            } else {
                assert!(grad.abs() <= lambda + 1e-6, "inactive KKT at {j}: {grad}");
            }
        }
    }

    #[test]
    fn toy_objective_matches_projected_gradient_oracle() {
        let ds = gaussian_data(60, 5, &[1.0, 0.0, -0.5, 0.0, 0.2], 0.2, 11);
        let lmax = lambda_max(&ds, None);
        let lambda = lmax * 0.2;
        let fits = fit_lasso_path(&ds, &[lmax * 1.01, lambda], None).unwrap();
        let fit = &fits[1];

        // independent proximal-gradient (ISTA) solver on the same
        // standardized problem
        let rows: Vec<usize> = (0..ds.n()).collect();
        let st = standardize(&ds, &rows);
        let n = ds.n() as f64;
        let p = st.kept.len();
        let lip = {
            // crude Lipschitz bound: largest eigenvalue of X'X/n via
            // power iteration
            let mut v = DVector::from_element(p, 1.0 / (p as f64).sqrt());
            for _ in 0..200 {
                let w = &st.xs.transpose() * (&st.xs * &v) / n;
                v = &w / w.norm();
            }
            (&st.xs.transpose() * (&st.xs * &v) / n).norm()
        };
        let step = 1.0 / (lip * 1.05);
        let mut b = DVector::<f64>::zeros(p);
        for _ in 0..20_000 {
            let resid = &st.yc - &st.xs * &b;
            let grad = -(&st.xs.transpose() * &resid) / n;
            let mut nb = DVector::zeros(p);
            for j in 0..p {
                nb[j] = soft_threshold(b[j] - step * grad[j], step * lambda);
            }
            let diff = (&nb - &b).amax();
            b = nb;
            if diff < 1e-10 {
                break;
            }
        }
        let obj = |beta: &DVector<f64>| {
            let resid = &st.yc - &st.xs * beta;
            resid.norm_squared() / (2.0 * n) + lambda * beta.iter().map(|v| v.abs()).sum::<f64>()
        };
        let cd_beta = DVector::from_fn(p, |jj, _| fit.coefs[st.kept[jj]] * st.x_sd[st.kept[jj]]);
        assert!(
            (obj(&cd_beta) - obj(&b)).abs() <= 1e-6,
            "objectives differ: cd {} ista {}",
            obj(&cd_beta),
            obj(&b)
        );
    }

    #[test]
    fn non_descending_grid_rejected() {
        let ds = gaussian_data(40, 2, &[1.0, 0.0], 0.5, 2);
        assert!(fit_lasso_path(&ds, &[0.1, 0.2], None).is_err());
    }

    #[test]
    fn zero_variance_column_dropped() {
        let mut rng = rng_from_seed(4);
        let n = 50;
        let x = DMatrix::from_fn(n, 3, |i, j| {
            if j == 1 {
                3.0
            } else {
                { let g: f64 = StandardNormal.sample(&mut rng); g + i as f64 * 0.0 }
            }
        });
        let y = DVector::from_fn(n, |i, _| x[(i, 0)]);
        let ds = dataset(x, y);
        let fits = fit_lasso_path(&ds, &[0.01], None).unwrap();
        assert_eq!(fits[0].dropped_columns, vec![1]);
        assert_eq!(fits[0].coefs[1], 0.0);
    }

    #[test]
    fn cv_pure_noise_nearly_empty() {
        let mut hits = 0;
        for seed in 0..100u64 {
            let ds = gaussian_data(100, 8, &[0.0; 8], 1.0, 1000 + seed);
            let fit = cv_lasso(&ds, 5, seed).unwrap();
            if fit.active_set.len() <= 1 {
                hits += 1;
            }
        }
        assert!(hits >= 90, "only {hits}/100 seeds nearly empty");
    }

    #[test]
    fn cv_recovers_sparse_support() {
        let mut hits = 0;
        for seed in 0..40u64 {
            let ds = gaussian_data(300, 6, &[1.5, -2.0, 1.0, 0.0, 0.0, 0.0], 0.5, 500 + seed);
            let fit = cv_lasso(&ds, 5, seed).unwrap();
            if [0, 1, 2].iter().all(|j| fit.active_set.contains(j)) {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.95 * 40.0, "support recovered {hits}/40");
    }

    #[test]
    fn cv_deterministic() {
        let ds = gaussian_data(80, 4, &[1.0, 0.0, 0.0, 0.0], 0.5, 6);
        let a = cv_lasso(&ds, 5, 77).unwrap();
        let b = cv_lasso(&ds, 5, 77).unwrap();
        assert_eq!(a.lambda, b.lambda);
        assert_eq!(a.coefs, b.coefs);
    }
}
