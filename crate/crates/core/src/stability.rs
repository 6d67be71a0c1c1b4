//! Hypothesis tests for the null "this predictor subset generalizes
//! over the observed environments". The p-value is used directly as a
//! stability score.

use nalgebra::{DMatrix, DVector};
use rand_distr::Distribution;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::dataset::MultiEnvDataset;
use crate::error::{Error, Result};
use crate::linear::fit_ols;
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityMethod {
    Chow,
    ScaledResidual,
}

/// Per-environment-pair Chow statistics.
#[derive(Debug, Clone)]
pub struct ChowPair {
    pub env_a: String,
    pub env_b: String,
    pub f_stat: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub enum StabilityDetail {
    Chow(Vec<ChowPair>),
    ScaledResidual { observed: f64, resampled: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct StabilityScore {
    pub subset: Vec<usize>,
    pub p_value: f64,
    pub method: StabilityMethod,
    pub detail: StabilityDetail,
}

/// Chow test for equal regression coefficients, run on every unordered
/// environment pair, Bonferroni-combined.
pub fn chow_test(ds: &MultiEnvDataset, subset: &[usize]) -> Result<StabilityScore> {
    let idx = ds.env_index();
    let k = subset.len() + 1;
    for (label, rows) in idx.iter() {
        if rows.len() <= k {
            return Err(Error::EnvironmentTooSmall {
                label: label.to_string(),
                count: rows.len(),
                min: k + 1,
            });
        }
    }

    let rss = |fit: &crate::linear::SubsetFit| -> f64 {
        fit.residuals.iter().map(|r| r * r).sum::<f64>()
    };

    let n_env = idx.len();
    let mut pairs = Vec::new();
    for a in 0..n_env {
        for b in (a + 1)..n_env {
            let rows_a = idx.rows(a);
            let rows_b = idx.rows(b);
            let dof = rows_a.len() + rows_b.len();
            if dof <= 2 * k {
                return Err(Error::DegreesOfFreedom {
                    context: format!("chow pair ({}, {})", idx.labels()[a], idx.labels()[b]),
                });
            }
            let dof = (dof - 2 * k) as f64;
            let fit_a = fit_ols(ds, subset, Some(rows_a))?;
            let fit_b = fit_ols(ds, subset, Some(rows_b))?;
            let mut pooled_rows: Vec<usize> = rows_a.to_vec();
            pooled_rows.extend_from_slice(rows_b);
            let fit_pool = fit_ols(ds, subset, Some(&pooled_rows))?;
            let rss_a = rss(&fit_a);
            let rss_b = rss(&fit_b);
            let rss_pool = rss(&fit_pool);
            let numer = ((rss_pool - rss_a - rss_b).max(0.0)) / k as f64;
            let denom = (rss_a + rss_b) / dof;
            let (f_stat, p_value) = if numer <= 0.0 {
                (0.0, 1.0)
            } else if denom <= 0.0 {
                (f64::INFINITY, 0.0)
            } else {
                let f = numer / denom;
                let dist = FisherSnedecor::new(k as f64, dof).expect("valid F dof");
                (f, 1.0 - dist.cdf(f))
            };
            pairs.push(ChowPair {
                env_a: idx.labels()[a].clone(),
                env_b: idx.labels()[b].clone(),
                f_stat,
                p_value,
            });
        }
    }

    let n_pairs = pairs.len().max(1) as f64;
    let min_p = pairs.iter().map(|p| p.p_value).fold(1.0f64, f64::min);
    let p_value = (n_pairs * min_p).min(1.0);
    Ok(StabilityScore {
        subset: subset.to_vec(),
        p_value,
        method: StabilityMethod::Chow,
        detail: StabilityDetail::Chow(pairs),
    })
}

/// Sum over unordered environment pairs of |mean_e(u) - mean_f(u)|.
fn pairwise_mean_diff(u: &DVector<f64>, row_sets: &[Vec<usize>]) -> f64 {
    let means: Vec<f64> = row_sets
        .iter()
        .map(|rows| rows.iter().map(|&i| u[i]).sum::<f64>() / rows.len() as f64)
        .collect();
    let mut t = 0.0;
    for a in 0..means.len() {
        for b in (a + 1)..means.len() {
            t += (means[a] - means[b]).abs();
        }
    }
    t
}

/// Exact resampling test on residual directions: the scaled residual
/// vector of a Gaussian linear model is uniform on the unit sphere of
/// the design's orthogonal complement, so `(I - H)g / |(I - H)g|` for
/// standard normal `g` is an exact resample under the null.
pub fn scaled_residual_test(
    ds: &MultiEnvDataset,
    subset: &[usize],
    n_resamples: usize,
    rng_seed: u64,
) -> Result<StabilityScore> {
    if n_resamples < 1 {
        return Err(Error::InvalidArgument("B must be >= 1".to_string()));
    }
    let idx = ds.env_index();
    let n = ds.n();
    if n <= subset.len() + 1 + idx.len() {
        return Err(Error::Underdetermined {
            rows: n,
            params: subset.len() + 1 + idx.len(),
        });
    }
    let fit = fit_ols(ds, subset, None)?;
    let norm = fit.residuals.norm();
    let row_sets: Vec<Vec<usize>> = idx.iter().map(|(_, r)| r.to_vec()).collect();

    let scale = ds.y().norm().max(1.0);
    if norm <= 1e-10 * scale {
        // perfect fit: nothing to test
        return Ok(StabilityScore {
            subset: subset.to_vec(),
            p_value: 1.0,
            method: StabilityMethod::ScaledResidual,
            detail: StabilityDetail::ScaledResidual {
                observed: 0.0,
                resampled: vec![],
            },
        });
    }

    let u = &fit.residuals / norm;
    let observed = pairwise_mean_diff(&u, &row_sets);

    // thin Q of the design (intercept + subset columns)
    let k = subset.len() + 1;
    let design = DMatrix::from_fn(n, k, |i, j| {
        if j == 0 {
            1.0
        } else {
            ds.x()[(i, subset[j - 1])]
        }
    });
    let q = design.qr().q();

    let mut resampled = Vec::with_capacity(n_resamples);
    let mut count_ge = 0usize;
    for b in 0..n_resamples {
        let mut rng = rng_from_seed(derive_seed(rng_seed, b as u64));
        let g = DVector::from_fn(n, |_, _| {
            rand_distr::StandardNormal.sample(&mut rng)
        });
        let proj = &q * (q.transpose() * &g);
        let mut ustar = g - proj;
        let un = ustar.norm();
        if un > 0.0 {
            ustar /= un;
        }
        let t = pairwise_mean_diff(&ustar, &row_sets);
        if t >= observed {
            count_ge += 1;
        }
        resampled.push(t);
    }

    let p_value = (1 + count_ge) as f64 / (n_resamples + 1) as f64;
    Ok(StabilityScore {
        subset: subset.to_vec(),
        p_value,
        method: StabilityMethod::ScaledResidual,
        detail: StabilityDetail::ScaledResidual {
            observed,
            resampled,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn two_env_data(
        n_per_env: usize,
        slope: (f64, f64),
        shift: (f64, f64),
        noise: f64,
        seed: u64,
    ) -> MultiEnvDataset {
        let mut rng = rng_from_seed(seed);
        let n = 2 * n_per_env;
        let mut x = DMatrix::zeros(n, 1);
        let mut y = DVector::zeros(n);
        let mut env = Vec::with_capacity(n);
        for i in 0..n {
            let (s, c) = if i < n_per_env {
                (slope.0, shift.0)
            } else {
                (slope.1, shift.1)
            };
            let xv: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            x[(i, 0)] = xv;
            y[i] = s * xv + c + noise * e;
            env.push(if i < n_per_env { "a".into() } else { "b".into() });
        }
        MultiEnvDataset::new(x, y, env, None).unwrap()
    }

    #[test]
    fn chow_identical_environments_p_one() {
        // same data duplicated as two environments: pooled fit equals
        // per-env fits, numerator zero
        let mut rng = rng_from_seed(1);
        let m = 30;
        let x0: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y0: Vec<f64> = x0.iter().map(|v| 2.0 * v + 1.0 + 0.1 * v.sin()).collect();
        let x = DMatrix::from_fn(2 * m, 1, |i, _| x0[i % m]);
        let y = DVector::from_fn(2 * m, |i, _| y0[i % m]);
        let env = (0..2 * m)
            .map(|i| if i < m { "a".into() } else { "b".into() })
            .collect();
        let ds = MultiEnvDataset::new(x, y, env, None).unwrap();
        let score = chow_test(&ds, &[0]).unwrap();
        assert_eq!(score.p_value, 1.0);
    }

    #[test]
    fn chow_detects_slope_shift() {
        let ds = two_env_data(200, (1.0, 3.0), (0.0, 0.0), 0.5, 2);
        let score = chow_test(&ds, &[0]).unwrap();
        assert!(score.p_value < 1e-6, "p = {}", score.p_value);
    }

    #[test]
    fn chow_small_env_rejected() {
        let ds = two_env_data(3, (1.0, 1.0), (0.0, 0.0), 0.5, 3);
        assert!(chow_test(&ds, &[0]).is_ok());
        // k = 3 params needs n_e > 3... build a 3-row env with 2 predictors
        let x = DMatrix::from_fn(6, 3, |i, j| ((i * 7 + j * 3) % 5) as f64);
        let y = DVector::from_fn(6, |i, _| i as f64);
        let env = (0..6)
            .map(|i| if i < 3 { "a".into() } else { "b".into() })
            .collect();
        let ds = MultiEnvDataset::new(x, y, env, None).unwrap();
        assert!(chow_test(&ds, &[0, 1, 2]).is_err());
    }

    #[test]
    fn chow_permutation_within_env_invariant() {
        let ds = two_env_data(40, (1.0, 1.5), (0.0, 0.3), 0.5, 5);
        let p1 = chow_test(&ds, &[0]).unwrap().p_value;
        // permute rows within environment a
        let mut order: Vec<usize> = (0..ds.n()).collect();
        order[..40].reverse();
        let perm = ds.select_rows(&order);
        let p2 = chow_test(&perm, &[0]).unwrap().p_value;
        assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn scaled_residual_perfect_fit_p_one() {
        let x = DMatrix::from_fn(20, 1, |i, _| i as f64);
        let y = DVector::from_fn(20, |i, _| 3.0 * i as f64 - 1.0);
        let env = (0..20)
            .map(|i| if i < 10 { "a".into() } else { "b".into() })
            .collect();
        let ds = MultiEnvDataset::new(x, y, env, None).unwrap();
        let score = scaled_residual_test(&ds, &[0], 99, 1).unwrap();
        assert_eq!(score.p_value, 1.0);
    }

    #[test]
    fn scaled_residual_p_range() {
        let ds = two_env_data(50, (1.0, 1.0), (0.0, 0.0), 1.0, 8);
        let b = 99;
        let score = scaled_residual_test(&ds, &[0], b, 4).unwrap();
        assert!(score.p_value >= 1.0 / (b as f64 + 1.0));
        assert!(score.p_value <= 1.0);
    }

    #[test]
    fn scaled_residual_detects_intercept_shift() {
        let b = 199;
        let ds = two_env_data(200, (1.0, 1.0), (0.0, 5.0), 0.5, 9);
        // subset {0} cannot explain the environment-wise mean shift
        let score = scaled_residual_test(&ds, &[0], b, 10).unwrap();
        assert!(
            score.p_value <= 1.0 / (b as f64 + 1.0) + 0.01,
            "p = {}",
            score.p_value
        );
    }

    #[test]
    fn scaled_residual_monotone_power() {
        // expected p-value decreases as the unexplained shift grows
        let mut mean_p = [0.0f64; 3];
        let shifts = [0.0, 0.25, 2.0];
        let reps = 40;
        for (k, &shift) in shifts.iter().enumerate() {
            for r in 0..reps {
                let ds = two_env_data(100, (1.0, 1.0), (0.0, shift), 1.0, 100 + r);
                let p = scaled_residual_test(&ds, &[0], 99, 7 * r + k as u64)
                    .unwrap()
                    .p_value;
                mean_p[k] += p / reps as f64;
            }
        }
        assert!(mean_p[0] > mean_p[1], "{mean_p:?}");
        assert!(mean_p[1] > mean_p[2], "{mean_p:?}");
    }

    #[test]
    fn scaled_residual_b_zero_rejected() {
        let ds = two_env_data(20, (1.0, 1.0), (0.0, 0.0), 1.0, 12);
        assert!(scaled_residual_test(&ds, &[0], 0, 1).is_err());
    }
}
