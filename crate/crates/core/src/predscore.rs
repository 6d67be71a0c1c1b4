//! Predictive scoring of predictor subsets and the bootstrap-calibrated
//! cutoff that decides which stable subsets predict "well enough" to be
//! kept in the ensemble.

use crate::dataset::MultiEnvDataset;
use crate::error::{Error, Result};
use crate::linear::fit_ols;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    /// negative pooled mean squared error
    NegPooledMse,
    /// negative worst-environment mean squared error
    NegWorstEnvMse,
}

/// Score a subset by refitting OLS on `ds`. Higher is better.
pub fn pred_score(ds: &MultiEnvDataset, subset: &[usize], method: ScoreMethod) -> Result<f64> {
    let fit = fit_ols(ds, subset, None)?;
    Ok(match method {
        ScoreMethod::NegPooledMse => -fit.pooled_mse,
        ScoreMethod::NegWorstEnvMse => -fit
            .env_mse
            .iter()
            .map(|(_, m)| *m)
            .fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Index of the best-scoring candidate. Ties go to the smaller subset,
/// then to the lexicographically smallest one, so the choice does not
/// depend on candidate order.
pub fn select_optimal(candidates: &[Vec<usize>], scores: &[f64]) -> Result<usize> {
    if candidates.is_empty() || candidates.len() != scores.len() {
        return Err(Error::EmptyCandidates);
    }
    let mut best = 0usize;
    for i in 1..candidates.len() {
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best]
                && (candidates[i].len() < candidates[best].len()
                    || (candidates[i].len() == candidates[best].len()
                        && candidates[i] < candidates[best])));
        if better {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct CutoffResult {
    /// keep subsets whose score is at least this
    pub cutoff: f64,
    /// index of the reference subset Q within the candidate list
    pub q_index: usize,
    /// bootstrap scores of Q, ascending
    pub bootstrap_scores: Vec<f64>,
}

/// Calibrate the prediction cutoff: refit the best candidate Q on
/// within-environment bootstrap resamples and take the `ceil(alpha*B)`-th
/// smallest bootstrap score. Singular resamples are redrawn; if too many
/// fail the calibration aborts.
pub fn bootstrap_cutoff(
    ds: &MultiEnvDataset,
    candidates: &[Vec<usize>],
    scores: &[f64],
    method: ScoreMethod,
    n_boot: usize,
    alpha: f64,
    rng_seed: u64,
) -> Result<CutoffResult> {
    if n_boot < 1 {
        return Err(Error::InvalidArgument("n_boot must be >= 1".to_string()));
    }
    if !(0.0 < alpha && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in (0, 1], got {alpha}"
        )));
    }
    let q_index = select_optimal(candidates, scores)?;
    let q = &candidates[q_index];

    let mut boot_scores = Vec::with_capacity(n_boot);
    let mut draw = 0u64;
    let max_draws = (10 * n_boot) as u64;
    while boot_scores.len() < n_boot {
        if draw >= max_draws {
            return Err(Error::BootstrapExhausted {
                attempts: draw as usize,
            });
        }
        let resample = ds.bootstrap_within_env(derive_seed(rng_seed, draw));
        draw += 1;
        match pred_score(&resample, q, method) {
            Ok(s) => boot_scores.push(s),
            Err(Error::SingularDesign { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    boot_scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((alpha * n_boot as f64).ceil() as usize).clamp(1, n_boot);
    let cutoff = boot_scores[rank - 1];
    Ok(CutoffResult {
        cutoff,
        q_index,
        bootstrap_scores: boot_scores,
    })
}

/// Indices of candidates scoring at least `cutoff`; Q is always kept so
/// the accepted set is never empty. The comparison allows a small
/// relative slack so exact ties are not broken by rounding noise.
pub fn filter_optimal(scores: &[f64], cutoff: f64, q_index: usize) -> Vec<usize> {
    let tol = 1e-12 * (1.0 + cutoff.abs());
    let mut keep: Vec<usize> = scores
        .iter()
        .enumerate()
        .filter(|(i, &s)| s >= cutoff - tol || *i == q_index)
        .map(|(i, _)| i)
        .collect();
    keep.sort_unstable();
    keep
}
