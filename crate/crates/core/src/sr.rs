//! The stabilized-regression estimator: screen candidate predictors,
//! sample predictor subsets, keep the subsets that are both stable
//! across environments and competitive in prediction, and average the
//! per-subset OLS fits with uniform weights.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::MultiEnvDataset;
use crate::error::{Error, Result};
use crate::lasso::{default_lambda_grid, fit_lasso_path};
use crate::linear::{fit_ols, SubsetFit};
use crate::predscore::{bootstrap_cutoff, filter_optimal, pred_score, ScoreMethod};
use crate::rng::{derive_seed, rng_from_seed};
use crate::stability::{chow_test, scaled_residual_test, StabilityMethod};

/// Stability level: a p-value threshold, or no stability filtering at
/// all (the purely predictive variant).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaStab {
    Off,
    Value(f64),
}

impl Serialize for AlphaStab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AlphaStab::Off => s.serialize_str("off"),
            AlphaStab::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for AlphaStab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(AlphaStab::Value(v)),
            Raw::Text(t) if t == "off" => Ok(AlphaStab::Off),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"off\", got {t:?}"
            ))),
        }
    }
}

/// Candidate-set budget: a sample size, or every subset of the screened
/// variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetBudget {
    Count(usize),
    Exhaustive,
}

impl Serialize for SetBudget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SetBudget::Exhaustive => s.serialize_str("exhaustive"),
            SetBudget::Count(v) => s.serialize_u64(*v as u64),
        }
    }
}

impl<'de> Deserialize<'de> for SetBudget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(SetBudget::Count(v as usize)),
            Raw::Text(t) if t == "exhaustive" => Ok(SetBudget::Exhaustive),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a count or \"exhaustive\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredKind {
    Pooled,
    MinEnv,
}

impl PredKind {
    pub fn score_method(self) -> ScoreMethod {
        match self {
            PredKind::Pooled => ScoreMethod::NegPooledMse,
            PredKind::MinEnv => ScoreMethod::NegWorstEnvMse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Screen {
    None,
    Corr,
    Lasso,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SRConfig {
    pub alpha_stab: AlphaStab,
    pub alpha_pred: f64,
    pub stab_test: StabilityMethod,
    pub pred_kind: PredKind,
    pub screen: Screen,
    pub screen_size: usize,
    pub n_sets: SetBudget,
    pub max_set_size: usize,
    pub b_boot: usize,
    pub b_resample: usize,
    pub seed: u64,
}

impl Default for SRConfig {
    fn default() -> Self {
        SRConfig {
            alpha_stab: AlphaStab::Value(0.05),
            alpha_pred: 0.01,
            stab_test: StabilityMethod::Chow,
            pred_kind: PredKind::Pooled,
            screen: Screen::None,
            screen_size: 0,
            n_sets: SetBudget::Count(1000),
            max_set_size: 6,
            b_boot: 100,
            b_resample: 999,
            seed: 0,
        }
    }
}

impl SRConfig {
    /// The purely predictive variant: no stability filter, score by the
    /// worst environment.
    pub fn to_srpred(&self) -> SRConfig {
        SRConfig {
            alpha_stab: AlphaStab::Off,
            pred_kind: PredKind::MinEnv,
            ..self.clone()
        }
    }

    fn validate(&self, ds: &MultiEnvDataset) -> Result<()> {
        if let AlphaStab::Value(a) = self.alpha_stab {
            if !(0.0 < a && a < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "alpha_stab must be in (0,1), got {a}"
                )));
            }
            if ds.env_index().len() < 2 {
                return Err(Error::InvalidArgument(
                    "stability filtering needs at least 2 environments".to_string(),
                ));
            }
        }
        if !(0.0 < self.alpha_pred && self.alpha_pred <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha_pred must be in (0,1], got {}",
                self.alpha_pred
            )));
        }
        if self.max_set_size == 0 {
            return Err(Error::InvalidArgument(
                "max_set_size must be positive".to_string(),
            ));
        }
        if let SetBudget::Count(0) = self.n_sets {
            return Err(Error::InvalidArgument(
                "n_sets must be positive".to_string(),
            ));
        }
        if self.b_boot == 0 || self.b_resample == 0 {
            return Err(Error::InvalidArgument(
                "bootstrap/resample counts must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Per-candidate-set scoring record kept for inspection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SetDiagnostic {
    /// original column indices
    pub set: Vec<usize>,
    pub stability_p: Option<f64>,
    pub pred_score: Option<f64>,
    /// reason this set was removed before selection, if it was
    pub dropped: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SRDiagnostics {
    pub per_set: Vec<SetDiagnostic>,
    /// no set passed the stability filter; the single most stable one
    /// was kept instead
    pub no_stable_sets: bool,
    pub prediction_cutoff: f64,
    /// index (into `stable_sets` of the model) of the best-scoring set
    pub best_stable_set: usize,
}

#[derive(Debug, Clone)]
pub struct SRModel {
    pub config: SRConfig,
    /// original column indices that survived screening, ascending
    pub screened: Vec<usize>,
    pub column_names: Vec<String>,
    /// candidate subsets in original column indices
    pub candidate_sets: Vec<Vec<usize>>,
    /// indices into `candidate_sets`
    pub stable_sets: Vec<usize>,
    /// indices into `candidate_sets`; the averaged ensemble
    pub optimal_sets: Vec<usize>,
    /// aligned with `optimal_sets`, uniform, sums to 1
    pub weights: Vec<f64>,
    /// aligned with `optimal_sets`
    pub fits: Vec<SubsetFit>,
    pub diagnostics: SRDiagnostics,
}

/// Top-`k` columns by absolute pooled correlation with the response,
/// in descending-correlation order (ties by column index).
pub fn screen_corr(ds: &MultiEnvDataset, k: usize) -> Vec<usize> {
    let n = ds.n() as f64;
    let y = ds.y();
    let y_mean = y.mean();
    let y_sd = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut scored: Vec<(usize, f64)> = (0..ds.d())
        .map(|j| {
            let col = ds.x().column(j);
            let m = col.mean();
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            let cov = col
                .iter()
                .zip(y.iter())
                .map(|(x, yv)| (x - m) * (yv - y_mean))
                .sum::<f64>()
                / n;
            let r = if sd > 0.0 && y_sd > 0.0 {
                (cov / (sd * y_sd)).abs()
            } else {
                0.0
            };
            (j, r)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k.min(ds.d()));
    scored.into_iter().map(|(j, _)| j).collect()
}

/// First `k` distinct columns entering the Lasso path on a default
/// log-spaced grid, padded by correlation ranking when the path
/// activates fewer than `k`.
pub fn screen_lasso(ds: &MultiEnvDataset, k: usize) -> Result<Vec<usize>> {
    let k = k.min(ds.d());
    if k == ds.d() {
        return Ok((0..ds.d()).collect());
    }
    let grid = default_lambda_grid(ds, 100, 1e-3);
    let path = fit_lasso_path(ds, &grid, None)?;
    let mut order: Vec<usize> = Vec::new();
    for fit in &path {
        for &j in &fit.active_set {
            if !order.contains(&j) {
                order.push(j);
            }
        }
        if order.len() >= k {
            break;
        }
    }
    if order.len() < k {
        for j in screen_corr(ds, ds.d()) {
            if !order.contains(&j) {
                order.push(j);
                if order.len() == k {
                    break;
                }
            }
        }
    }
    order.truncate(k);
    Ok(order)
}

fn binomial_capped(n: usize, k: usize, cap: u128) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i + 1) as u128;
        if acc >= cap {
            return cap;
        }
    }
    acc
}

/// Candidate subsets over `d` screened variables (local indices
/// 0..d). The empty set and all singletons are always included; larger
/// sets are sampled uniformly by size until the budget or the universe
/// of sets of size ≤ `max_set_size` is exhausted.
pub fn generate_sets(
    d: usize,
    budget: SetBudget,
    max_set_size: usize,
    rng_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if d == 0 {
        return Err(Error::EmptyCandidates);
    }
    if let SetBudget::Exhaustive = budget {
        if d > 15 {
            return Err(Error::InvalidArgument(format!(
                "exhaustive enumeration limited to 15 variables, got {d}"
            )));
        }
        let mut sets: Vec<Vec<usize>> = (0u32..(1 << d))
            .map(|mask| (0..d).filter(|j| mask >> j & 1 == 1).collect())
            .collect();
        sets.sort_by_key(|s| (s.len(), s.clone()));
        return Ok(sets);
    }
    let SetBudget::Count(n_sets) = budget else {
        unreachable!()
    };
    let max_size = max_set_size.min(d);

    let mut sets: Vec<Vec<usize>> = vec![vec![]];
    sets.extend((0..d).map(|j| vec![j]));
    if sets.len() >= n_sets || max_size < 2 {
        return Ok(sets);
    }

    let universe: u128 = (0..=max_size)
        .map(|s| binomial_capped(d, s, u128::MAX / 2))
        .sum();
    let target = (n_sets as u128).min(universe) as usize;

    let mut seen: std::collections::HashSet<Vec<usize>> =
        sets.iter().cloned().collect();
    let mut rng = rng_from_seed(rng_seed);
    while sets.len() < target {
        let size = rand::Rng::random_range(&mut rng, 2..=max_size);
        let mut s: Vec<usize> = rand::seq::index::sample(&mut rng, d, size).into_vec();
        s.sort_unstable();
        if seen.insert(s.clone()) {
            sets.push(s);
        }
    }
    Ok(sets)
}

/// Fit the full pipeline on a multi-environment dataset.
pub fn fit_sr(ds: &MultiEnvDataset, config: &SRConfig) -> Result<SRModel> {
    config.validate(ds)?;
    let seed = config.seed;

    let mut screened = match config.screen {
        Screen::None => (0..ds.d()).collect::<Vec<usize>>(),
        Screen::Corr => screen_corr(ds, config.screen_size),
        Screen::Lasso => screen_lasso(ds, config.screen_size)?,
    };
    screened.sort_unstable();

    let local_sets = generate_sets(
        screened.len(),
        config.n_sets,
        config.max_set_size,
        derive_seed(seed, 1),
    )?;
    let candidate_sets: Vec<Vec<usize>> = local_sets
        .iter()
        .map(|s| s.iter().map(|&j| screened[j]).collect())
        .collect();

    // hot loop: score every candidate set independently
    let set_seed = derive_seed(seed, 2);
    let scored: Vec<(Option<f64>, Option<f64>, Option<String>)> = candidate_sets
        .par_iter()
        .enumerate()
        .map(|(i, set)| {
            let stab = match config.alpha_stab {
                AlphaStab::Off => Ok(None),
                AlphaStab::Value(_) => match config.stab_test {
                    StabilityMethod::Chow => chow_test(ds, set).map(|s| Some(s.p_value)),
                    StabilityMethod::ScaledResidual => scaled_residual_test(
                        ds,
                        set,
                        config.b_resample,
                        derive_seed(set_seed, i as u64),
                    )
                    .map(|s| Some(s.p_value)),
                },
            };
            let stab = match stab {
                Ok(p) => p,
                Err(e) => return (None, None, Some(e.to_string())),
            };
            match pred_score(ds, set, config.pred_kind.score_method()) {
                Ok(s) => (stab, Some(s), None),
                Err(e) => (None, None, Some(e.to_string())),
            }
        })
        .collect();

    let per_set: Vec<SetDiagnostic> = candidate_sets
        .iter()
        .zip(&scored)
        .map(|(set, (p, s, dropped))| SetDiagnostic {
            set: set.clone(),
            stability_p: *p,
            pred_score: *s,
            dropped: dropped.clone(),
        })
        .collect();

    let usable: Vec<usize> = (0..candidate_sets.len())
        .filter(|&i| scored[i].2.is_none())
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyCandidates);
    }

    // stable sets
    let mut no_stable_sets = false;
    let stable_sets: Vec<usize> = match config.alpha_stab {
        AlphaStab::Off => usable.clone(),
        AlphaStab::Value(alpha) => {
            let passing: Vec<usize> = usable
                .iter()
                .copied()
                .filter(|&i| scored[i].0.unwrap() >= alpha)
                .collect();
            if passing.is_empty() {
                no_stable_sets = true;
                let best = usable
                    .iter()
                    .copied()
                    .max_by(|&a, &b| {
                        scored[a]
                            .0
                            .unwrap()
                            .partial_cmp(&scored[b].0.unwrap())
                            .unwrap()
                            .then(candidate_sets[b].cmp(&candidate_sets[a]))
                    })
                    .unwrap();
                vec![best]
            } else {
                passing
            }
        }
    };

    let stable_candidates: Vec<Vec<usize>> = stable_sets
        .iter()
        .map(|&i| candidate_sets[i].clone())
        .collect();
    let stable_scores: Vec<f64> = stable_sets.iter().map(|&i| scored[i].1.unwrap()).collect();

    let cutoff = bootstrap_cutoff(
        ds,
        &stable_candidates,
        &stable_scores,
        config.pred_kind.score_method(),
        config.b_boot,
        config.alpha_pred,
        derive_seed(seed, 3),
    )?;
    let kept = filter_optimal(&stable_scores, cutoff.cutoff, cutoff.q_index);
    let optimal_sets: Vec<usize> = kept.iter().map(|&i| stable_sets[i]).collect();

    let w = 1.0 / optimal_sets.len() as f64;
    let weights = vec![w; optimal_sets.len()];
    let fits: Vec<SubsetFit> = optimal_sets
        .iter()
        .map(|&i| fit_ols(ds, &candidate_sets[i], None))
        .collect::<Result<_>>()?;

    Ok(SRModel {
        config: config.clone(),
        screened,
        column_names: ds.column_names().to_vec(),
        candidate_sets,
        stable_sets,
        optimal_sets,
        weights,
        fits,
        diagnostics: SRDiagnostics {
            per_set,
            no_stable_sets,
            prediction_cutoff: cutoff.cutoff,
            best_stable_set: cutoff.q_index,
        },
    })
}

/// Weighted-average prediction over the selected subsets.
pub fn predict_sr(model: &SRModel, xnew: &DMatrix<f64>) -> Result<nalgebra::DVector<f64>> {
    if xnew.ncols() != model.column_names.len() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} columns, input has {}",
            model.column_names.len(),
            xnew.ncols()
        )));
    }
    let mut out = nalgebra::DVector::zeros(xnew.nrows());
    for (w, fit) in model.weights.iter().zip(&model.fits) {
        out += fit.predict(xnew)? * *w;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceKind {
    Weight,
    Coef,
    Perm,
    Srdiff,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub method: ImportanceKind,
    /// one value per original column; screened-out columns get 0
    pub values: Vec<f64>,
}

/// Total selection weight of each variable: Σ_S ŵ_S · 1{j ∈ S}.
pub fn importance_weight(model: &SRModel) -> ImportanceVector {
    let mut values = vec![0.0; model.column_names.len()];
    for (w, &si) in model.weights.iter().zip(&model.optimal_sets) {
        for &j in &model.candidate_sets[si] {
            values[j] += w;
        }
    }
    ImportanceVector {
        method: ImportanceKind::Weight,
        values,
    }
}

/// Weighted mean absolute coefficient over the selected subsets.
pub fn importance_coef(model: &SRModel) -> ImportanceVector {
    let mut values = vec![0.0; model.column_names.len()];
    for (w, fit) in model.weights.iter().zip(&model.fits) {
        for (&j, &c) in fit.subset.iter().zip(fit.coefs.iter()) {
            values[j] += w * c.abs();
        }
    }
    ImportanceVector {
        method: ImportanceKind::Coef,
        values,
    }
}

/// Mean relative RSS increase of the ensemble prediction when column j
/// of the training matrix is permuted.
pub fn importance_perm(
    model: &SRModel,
    ds: &MultiEnvDataset,
    n_perms: usize,
    rng_seed: u64,
) -> Result<ImportanceVector> {
    if n_perms == 0 {
        return Err(Error::InvalidArgument("n_perms must be >= 1".to_string()));
    }
    let base_pred = predict_sr(model, ds.x())?;
    let base_rss: f64 = ds
        .y()
        .iter()
        .zip(base_pred.iter())
        .map(|(y, p)| (y - p).powi(2))
        .sum();
    if base_rss <= 0.0 {
        return Err(Error::InvalidArgument(
            "zero training RSS; permutation importance undefined".to_string(),
        ));
    }
    let used: std::collections::BTreeSet<usize> = model
        .optimal_sets
        .iter()
        .flat_map(|&si| model.candidate_sets[si].iter().copied())
        .collect();
    let mut values = vec![0.0; model.column_names.len()];
    for &j in &used {
        let mut acc = 0.0;
        for b in 0..n_perms {
            let mut rng = rng_from_seed(derive_seed(rng_seed, (j * n_perms + b) as u64));
            let mut perm: Vec<usize> = (0..ds.n()).collect();
            rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
            let mut xp = ds.x().clone();
            for (i, &src) in perm.iter().enumerate() {
                xp[(i, j)] = ds.x()[(src, j)];
            }
            let pred = predict_sr(model, &xp)?;
            let rss: f64 = ds
                .y()
                .iter()
                .zip(pred.iter())
                .map(|(y, p)| (y - p).powi(2))
                .sum();
            acc += (rss - base_rss) / base_rss;
        }
        values[j] = acc / n_perms as f64;
    }
    Ok(ImportanceVector {
        method: ImportanceKind::Perm,
        values,
    })
}

/// Importance difference between the purely predictive variant and the
/// stability-filtered model: positive values indicate variables that
/// help prediction but break stability.
pub fn importance_srdiff(
    model_sr: &SRModel,
    model_srpred: &SRModel,
    kind: ImportanceKind,
) -> Result<ImportanceVector> {
    if model_sr.column_names != model_srpred.column_names {
        return Err(Error::DimensionMismatch(
            "models were fit on different column sets".to_string(),
        ));
    }
    let (a, b) = match kind {
        ImportanceKind::Weight => (importance_weight(model_srpred), importance_weight(model_sr)),
        ImportanceKind::Coef => (importance_coef(model_srpred), importance_coef(model_sr)),
        _ => {
            return Err(Error::InvalidArgument(
                "srdiff is defined for weight or coef importance".to_string(),
            ))
        }
    };
    Ok(ImportanceVector {
        method: ImportanceKind::Srdiff,
        values: a
            .values
            .iter()
            .zip(b.values.iter())
            .map(|(x, y)| x - y)
            .collect(),
    })
}

// ---------------------------------------------------------------------
// model document

/// Serialized form of a fitted model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SRModelDoc {
    pub version: String,
    pub config: SRConfig,
    pub screened_columns: Vec<String>,
    pub sets: Vec<SRModelSet>,
    pub diagnostics: SRDiagnosticsDoc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SRModelSet {
    pub columns: Vec<String>,
    pub weight: f64,
    pub intercept: f64,
    pub coefs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SRDiagnosticsDoc {
    pub n_candidates: usize,
    pub n_stable: usize,
    pub n_optimal: usize,
    pub no_stable_sets: bool,
    pub prediction_cutoff: f64,
}

pub const MODEL_DOC_VERSION: &str = "stabreg-model/1";

impl SRModel {
    pub fn to_doc(&self) -> SRModelDoc {
        SRModelDoc {
            version: MODEL_DOC_VERSION.to_string(),
            config: self.config.clone(),
            screened_columns: self
                .screened
                .iter()
                .map(|&j| self.column_names[j].clone())
                .collect(),
            sets: self
                .optimal_sets
                .iter()
                .zip(&self.weights)
                .zip(&self.fits)
                .map(|((&si, &w), fit)| SRModelSet {
                    columns: self.candidate_sets[si]
                        .iter()
                        .map(|&j| self.column_names[j].clone())
                        .collect(),
                    weight: w,
                    intercept: fit.intercept,
                    coefs: fit.coefs.iter().copied().collect(),
                })
                .collect(),
            diagnostics: SRDiagnosticsDoc {
                n_candidates: self.candidate_sets.len(),
                n_stable: self.stable_sets.len(),
                n_optimal: self.optimal_sets.len(),
                no_stable_sets: self.diagnostics.no_stable_sets,
                prediction_cutoff: self.diagnostics.prediction_cutoff,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand_distr::{Distribution, StandardNormal};

    fn signal_ds(seed: u64, n_per_env: usize, d: usize) -> MultiEnvDataset {
        let mut rng = rng_from_seed(seed);
        let n = 2 * n_per_env;
        let x = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
        let y = DVector::from_fn(n, |i, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            1.5 * x[(i, 0)] - 1.0 * x[(i, 1)] + 0.3 * e
        });
        let env = (0..n)
            .map(|i| if i < n_per_env { "a".into() } else { "b".into() })
            .collect();
        MultiEnvDataset::new(x, y, env, None).unwrap()
    }

    #[test]
    fn screen_corr_ranks_exact_copy_first() {
        let mut rng = rng_from_seed(1);
        let x = DMatrix::from_fn(50, 5, |_, _| StandardNormal.sample(&mut rng));
        let y = DVector::from_fn(50, |i, _| x[(i, 3)]);
        let env = vec!["a".to_string(); 50];
        let ds = MultiEnvDataset::new(x, y, env, None).unwrap();
        assert_eq!(screen_corr(&ds, 1), vec![3]);
        let mut all = screen_corr(&ds, 5);
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        // k > d returns all
        assert_eq!(screen_corr(&ds, 99).len(), 5);
    }

    #[test]
    fn screen_corr_matches_brute_force_ranking() {
        let ds = signal_ds(2, 60, 6);
        let got = screen_corr(&ds, 6);
        // brute-force: rank by |corr|, ties by index
        let n = ds.n() as f64;
        let ym = ds.y().mean();
        let mut brute: Vec<(usize, f64)> = (0..6)
            .map(|j| {
                let col = ds.x().column(j);
                let xm = col.mean();
                let num: f64 = col
                    .iter()
                    .zip(ds.y().iter())
                    .map(|(x, y)| (x - xm) * (y - ym))
                    .sum();
                let den = (col.iter().map(|v| (v - xm).powi(2)).sum::<f64>()
                    * ds.y().iter().map(|v| (v - ym).powi(2)).sum::<f64>())
                .sqrt();
                (j, (num / den).abs() * n / n)
            })
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let brute: Vec<usize> = brute.into_iter().map(|(j, _)| j).collect();
        assert_eq!(got, brute);
    }

    #[test]
    fn screen_lasso_finds_sparse_support() {
        let mut hits = 0;
        for seed in 0..20 {
            let ds = signal_ds(100 + seed, 100, 10);
            let chosen = screen_lasso(&ds, 5).unwrap();
            if chosen.contains(&0) && chosen.contains(&1) {
                hits += 1;
            }
        }
        assert!(hits >= 19, "true support found in only {hits}/20 runs");
    }

    #[test]
    fn screen_lasso_k_ge_d_is_identity() {
        let ds = signal_ds(3, 30, 4);
        assert_eq!(screen_lasso(&ds, 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(screen_lasso(&ds, 10).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn generate_sets_exhaustive_and_sampled() {
        let sets = generate_sets(3, SetBudget::Exhaustive, 6, 0).unwrap();
        assert_eq!(sets.len(), 8);
        assert!(sets.contains(&vec![]));
        assert!(sets.contains(&vec![0, 1, 2]));

        let sets = generate_sets(10, SetBudget::Count(100), 4, 7).unwrap();
        assert_eq!(sets.len(), 100);
        assert!(sets.contains(&vec![]));
        for j in 0..10 {
            assert!(sets.contains(&vec![j]));
        }
        let mut uniq: Vec<_> = sets.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), sets.len(), "duplicate candidate sets");
        assert!(sets.iter().all(|s| s.len() <= 4));
    }

    #[test]
    fn generate_sets_universe_exhaustion() {
        // d=4, max size 2: 1 + 4 + 6 = 11 possible sets
        let sets = generate_sets(4, SetBudget::Count(1000), 2, 3).unwrap();
        assert_eq!(sets.len(), 11);
        assert!(generate_sets(16, SetBudget::Exhaustive, 3, 0).is_err());
        assert!(generate_sets(0, SetBudget::Count(10), 3, 0).is_err());
    }

    fn small_config() -> SRConfig {
        SRConfig {
            n_sets: SetBudget::Exhaustive,
            b_boot: 30,
            ..SRConfig::default()
        }
    }

    #[test]
    fn no_filtering_keeps_every_candidate() {
        let ds = signal_ds(5, 40, 3);
        let cfg = SRConfig {
            alpha_stab: AlphaStab::Off,
            alpha_pred: 1.0,
            ..small_config()
        };
        let model = fit_sr(&ds, &cfg).unwrap();
        assert_eq!(model.candidate_sets.len(), 8);
        assert_eq!(model.stable_sets.len(), 8);
        // alpha_pred = 1 keeps anything at or above the worst bootstrap
        // score of Q; Q itself is always in
        assert!(model.optimal_sets.contains(&model.stable_sets[model.diagnostics.best_stable_set]));
        let wsum: f64 = model.weights.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-12);
        assert_eq!(model.weights.len(), model.optimal_sets.len());
    }

    #[test]
    fn nesting_invariant_holds() {
        let ds = signal_ds(6, 60, 4);
        let model = fit_sr(&ds, &small_config()).unwrap();
        let cand_count = model.candidate_sets.len();
        assert!(model.stable_sets.iter().all(|&i| i < cand_count));
        assert!(model
            .optimal_sets
            .iter()
            .all(|i| model.stable_sets.contains(i)));
        assert!(!model.optimal_sets.is_empty());
    }

    #[test]
    fn raising_alpha_pred_never_enlarges_selection() {
        let ds = signal_ds(7, 60, 4);
        let mut prev = usize::MAX;
        for alpha_pred in [0.01, 0.2, 0.8] {
            let cfg = SRConfig {
                alpha_pred,
                ..small_config()
            };
            let model = fit_sr(&ds, &cfg).unwrap();
            assert!(model.optimal_sets.len() <= prev);
            prev = model.optimal_sets.len();
        }
    }

    #[test]
    fn predict_matches_explicit_summation() {
        let ds = signal_ds(8, 50, 3);
        let model = fit_sr(&ds, &small_config()).unwrap();
        let pred = predict_sr(&model, ds.x()).unwrap();
        let mut oracle = DVector::zeros(ds.n());
        for (w, fit) in model.weights.iter().zip(&model.fits) {
            oracle += fit.predict(ds.x()).unwrap() * *w;
        }
        assert!((pred - oracle).norm() < 1e-12);
        // wrong width rejected
        let narrow = DMatrix::zeros(5, 2);
        assert!(predict_sr(&model, &narrow).is_err());
    }

    #[test]
    fn ensemble_training_mse_bounded_by_worst_member() {
        let ds = signal_ds(9, 50, 4);
        let cfg = SRConfig {
            alpha_stab: AlphaStab::Off,
            alpha_pred: 1.0,
            ..small_config()
        };
        let model = fit_sr(&ds, &cfg).unwrap();
        let pred = predict_sr(&model, ds.x()).unwrap();
        let mse = crate::linear::mean_squared_error(ds.y(), &pred);
        let worst = model
            .fits
            .iter()
            .map(|f| f.pooled_mse)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(mse <= worst + 1e-12);
    }

    #[test]
    fn weight_importance_accounting() {
        let ds = signal_ds(10, 50, 4);
        let model = fit_sr(&ds, &small_config()).unwrap();
        let vw = importance_weight(&model);
        assert!(vw.values.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        let total: f64 = vw.values.iter().sum();
        let oracle: f64 = model
            .weights
            .iter()
            .zip(&model.optimal_sets)
            .map(|(w, &si)| w * model.candidate_sets[si].len() as f64)
            .sum();
        assert!((total - oracle).abs() < 1e-12);
    }

    #[test]
    fn coef_importance_matches_direct_sum() {
        let ds = signal_ds(11, 50, 4);
        let model = fit_sr(&ds, &small_config()).unwrap();
        let vc = importance_coef(&model);
        for j in 0..4 {
            let oracle: f64 = model
                .weights
                .iter()
                .zip(&model.fits)
                .map(|(w, fit)| {
                    fit.subset
                        .iter()
                        .position(|&c| c == j)
                        .map_or(0.0, |p| w * fit.coefs[p].abs())
                })
                .sum();
            assert!((vc.values[j] - oracle).abs() < 1e-12);
        }
        assert!(vc.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn perm_importance_zero_for_unused_and_large_for_sole_predictor() {
        let mut rng = rng_from_seed(12);
        let n = 500;
        let x = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
        let y = DVector::from_fn(n, |i, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            3.0 * x[(i, 0)] + 1e-6 * e
        });
        let env = (0..n)
            .map(|i| if i < n / 2 { "a".into() } else { "b".into() })
            .collect();
        let ds = MultiEnvDataset::new(x, y, env, None).unwrap();
        let model = fit_sr(&ds, &small_config()).unwrap();
        let vp = importance_perm(&model, &ds, 5, 1).unwrap();
        let used: std::collections::BTreeSet<usize> = model
            .optimal_sets
            .iter()
            .flat_map(|&si| model.candidate_sets[si].iter().copied())
            .collect();
        assert!(used.contains(&0));
        assert!(vp.values[0] > 10.0, "perm importance {}", vp.values[0]);
        if !used.contains(&1) {
            assert_eq!(vp.values[1], 0.0);
        }
        // deterministic under fixed seed
        let vp2 = importance_perm(&model, &ds, 5, 1).unwrap();
        assert_eq!(vp.values, vp2.values);
    }

    #[test]
    fn srdiff_trivial_cases() {
        let ds = signal_ds(13, 50, 3);
        let model = fit_sr(&ds, &small_config()).unwrap();
        let zero = importance_srdiff(&model, &model, ImportanceKind::Weight).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        assert!(importance_srdiff(&model, &model, ImportanceKind::Perm).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = SRConfig {
            alpha_stab: AlphaStab::Off,
            n_sets: SetBudget::Exhaustive,
            ..SRConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"off\""));
        assert!(text.contains("\"exhaustive\""));
        let back: SRConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);

        let cfg = SRConfig::default();
        let back: SRConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn model_doc_has_version_and_consistent_weights() {
        let ds = signal_ds(14, 40, 3);
        let model = fit_sr(&ds, &small_config()).unwrap();
        let doc = model.to_doc();
        assert_eq!(doc.version, MODEL_DOC_VERSION);
        let wsum: f64 = doc.sets.iter().map(|s| s.weight).sum();
        assert!((wsum - 1.0).abs() < 1e-12);
        for set in &doc.sets {
            assert_eq!(set.columns.len(), set.coefs.len());
        }
        // round-trips through JSON
        let text = serde_json::to_string_pretty(&doc).unwrap();
        let back: SRModelDoc = serde_json::from_str(&text).unwrap();
        assert_eq!(back.version, doc.version);
        assert_eq!(back.sets.len(), doc.sets.len());
    }

    #[test]
    fn bad_configs_rejected() {
        let ds = signal_ds(15, 30, 3);
        for cfg in [
            SRConfig {
                alpha_stab: AlphaStab::Value(0.0),
                ..SRConfig::default()
            },
            SRConfig {
                alpha_pred: 0.0,
                ..SRConfig::default()
            },
            SRConfig {
                max_set_size: 0,
                ..SRConfig::default()
            },
            SRConfig {
                n_sets: SetBudget::Count(0),
                ..SRConfig::default()
            },
        ] {
            assert!(fit_sr(&ds, &cfg).is_err(), "{cfg:?}");
        }
        // single environment needs the stability filter off
        let one_env = MultiEnvDataset::new(
            ds.x().clone(),
            ds.y().clone(),
            vec!["only".to_string(); ds.n()],
            None,
        )
        .unwrap();
        assert!(fit_sr(&one_env, &SRConfig::default()).is_err());
        let cfg = SRConfig {
            alpha_stab: AlphaStab::Off,
            ..small_config()
        };
        assert!(fit_sr(&one_env, &cfg).is_ok());
    }
}
