//! Benchmark metrics and the repetition runner: out-of-distribution
//! prediction error on held-out environments and blanket-recovery ROC
//! curves from variable-importance rankings.

use std::collections::BTreeSet;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    cv_anchor_gamma, default_gamma_grid, fit_cv_lasso, fit_iv, fit_pooled_ols, CvCriterion,
};
use crate::dataset::MultiEnvDataset;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::sim::{gen_sim1, gen_sim2, gen_toy, SimDesign, SimKind, SimOutput};
use crate::sr::{fit_sr, importance_coef, importance_srdiff, ImportanceKind, SRConfig};

/// Mean over test environments of the per-environment mean squared
/// prediction residual.
pub fn test_rss(pred: &DVector<f64>, test: &MultiEnvDataset) -> Result<f64> {
    if pred.len() != test.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} rows",
            pred.len(),
            test.n()
        )));
    }
    let idx = test.env_index();
    let total: f64 = idx
        .iter()
        .map(|(_, rows)| {
            rows.iter()
                .map(|&i| (test.y()[i] - pred[i]).powi(2))
                .sum::<f64>()
                / rows.len() as f64
        })
        .sum();
    Ok(total / idx.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryTarget {
    Mb,
    Sb,
    Nsb,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryCurve {
    pub target: RecoveryTarget,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub pauc10: f64,
}

/// ROC of an importance ranking against a truth set, truncated at
/// `max_fp` false positives and normalized so a perfect ranking scores
/// 1. Tie groups contribute a single diagonal (trapezoidal) segment.
pub fn roc_from_ranking(
    importance: &[f64],
    truth: &BTreeSet<usize>,
    target: RecoveryTarget,
    max_fp: usize,
) -> Result<RecoveryCurve> {
    if truth.is_empty() {
        return Err(Error::EmptyTruthSet);
    }
    let d = importance.len();
    let n_pos = truth.len();
    let n_neg = d - n_pos;
    if truth.iter().any(|&j| j >= d) {
        return Err(Error::InvalidArgument(
            "truth set indexes past the importance vector".to_string(),
        ));
    }
    let max_fp = max_fp.min(n_neg).max(1);

    // group variables by descending importance
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        importance[b]
            .partial_cmp(&importance[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let cap = max_fp as f64;
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let mut tp = 0.0_f64;
    let mut fp = 0.0_f64;
    let mut area = 0.0; // in (fp, tpr) units
    let mut i = 0;
    while i < d && fp < cap - 1e-12 {
        let mut j = i;
        while j < d && importance[order[j]] == importance[order[i]] {
            j += 1;
        }
        let group_tp = order[i..j].iter().filter(|&&v| truth.contains(&v)).count() as f64;
        let group_fp = (j - i) as f64 - group_tp;
        // diagonal segment across the tie group, clipped at the FP budget
        let frac = if fp + group_fp > cap {
            (cap - fp) / group_fp
        } else {
            1.0
        };
        let t0 = tp / n_pos as f64;
        tp += group_tp * frac;
        fp += group_fp * frac;
        let t1 = tp / n_pos as f64;
        area += group_fp * frac * (t0 + t1) / 2.0;
        fpr.push(fp / n_neg.max(1) as f64);
        tpr.push(t1);
        i = j;
    }
    if fp < cap {
        // ranking exhausted below the budget: extends flat
        area += (cap - fp) * tpr.last().copied().unwrap_or(0.0);
        fpr.push(cap / n_neg.max(1) as f64);
        tpr.push(*tpr.last().unwrap());
    }
    let pauc10 = area / max_fp as f64; // perfect curve has tpr 1 across the window
    Ok(RecoveryCurve {
        target,
        fpr,
        tpr,
        pauc10,
    })
}

// ---------------------------------------------------------------------
// benchmark runner

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    Sr,
    Srpred,
    Srdiff,
    Ols,
    Lasso,
    Anchor,
    Iv,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 7] = [
        BenchMethod::Sr,
        BenchMethod::Srpred,
        BenchMethod::Srdiff,
        BenchMethod::Ols,
        BenchMethod::Lasso,
        BenchMethod::Anchor,
        BenchMethod::Iv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::Sr => "sr",
            BenchMethod::Srpred => "srpred",
            BenchMethod::Srdiff => "srdiff",
            BenchMethod::Ols => "ols",
            BenchMethod::Lasso => "lasso",
            BenchMethod::Anchor => "anchor",
            BenchMethod::Iv => "iv",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: BenchMethod,
    /// None when the method failed on this repetition
    pub test_rss: Option<f64>,
    pub curves: Vec<RecoveryCurve>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Repetition {
    pub seed: u64,
    /// Markov blanket equals stable blanket on this draw
    pub mb_equals_sb: bool,
    pub outcomes: Vec<MethodOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: BenchMethod,
    pub n_ok: usize,
    pub n_failed: usize,
    pub median_test_rss: Option<f64>,
    pub q25_test_rss: Option<f64>,
    pub q75_test_rss: Option<f64>,
    /// mean pauc10 per recovery target, where defined
    pub mean_pauc10: Vec<(RecoveryTarget, f64)>,
    /// more than 10% of repetitions failed
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub version: String,
    pub design: SimDesign,
    pub methods: Vec<BenchMethod>,
    pub n_reps: usize,
    pub seed: u64,
    pub repetitions: Vec<Repetition>,
    pub aggregates: Vec<MethodAggregate>,
}

pub const BENCH_DOC_VERSION: &str = "stabreg-bench/1";

fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - pos.floor()))
}

fn importance_curves(
    importance: &[f64],
    truth: &crate::scm::BlanketTruth,
) -> Vec<RecoveryCurve> {
    let mut curves = Vec::new();
    for (set, target) in [
        (&truth.mb, RecoveryTarget::Mb),
        (&truth.sb, RecoveryTarget::Sb),
        (&truth.nsb, RecoveryTarget::Nsb),
    ] {
        let shifted: BTreeSet<usize> = set.iter().map(|&v| v - 1).collect();
        if let Ok(curve) = roc_from_ranking(importance, &shifted, target, 10) {
            curves.push(curve);
        }
    }
    curves
}

fn run_method(
    method: BenchMethod,
    out: &SimOutput,
    config: &SRConfig,
    seed: u64,
) -> Result<(f64, Vec<RecoveryCurve>)> {
    let train = &out.train;
    let test = &out.test;
    match method {
        BenchMethod::Sr | BenchMethod::Srpred | BenchMethod::Srdiff => {
            let cfg_sr = SRConfig {
                seed: derive_seed(seed, 10),
                ..config.clone()
            };
            let cfg_pred = SRConfig {
                seed: derive_seed(seed, 11),
                ..config.to_srpred()
            };
            match method {
                BenchMethod::Sr => {
                    let model = fit_sr(train, &cfg_sr)?;
                    let pred = crate::sr::predict_sr(&model, test.x())?;
                    let rss = test_rss(&pred, test)?;
                    let imp = importance_coef(&model);
                    Ok((rss, importance_curves(&imp.values, &out.truth)))
                }
                BenchMethod::Srpred => {
                    let model = fit_sr(train, &cfg_pred)?;
                    let pred = crate::sr::predict_sr(&model, test.x())?;
                    let rss = test_rss(&pred, test)?;
                    let imp = importance_coef(&model);
                    Ok((rss, importance_curves(&imp.values, &out.truth)))
                }
                _ => {
                    // the importance difference: prediction from the
                    // predictive variant, ranking from the difference
                    let model_sr = fit_sr(train, &cfg_sr)?;
                    let model_pred = fit_sr(train, &cfg_pred)?;
                    let pred = crate::sr::predict_sr(&model_pred, test.x())?;
                    let rss = test_rss(&pred, test)?;
                    let diff =
                        importance_srdiff(&model_sr, &model_pred, ImportanceKind::Coef)?;
                    Ok((rss, importance_curves(&diff.values, &out.truth)))
                }
            }
        }
        BenchMethod::Ols => {
            let model = fit_pooled_ols(train)?;
            let rss = test_rss(&model.predict(test.x())?, test)?;
            Ok((rss, importance_curves(&model.importance(train), &out.truth)))
        }
        BenchMethod::Lasso => {
            let model = fit_cv_lasso(train, derive_seed(seed, 12))?;
            let rss = test_rss(&model.predict(test.x())?, test)?;
            Ok((rss, importance_curves(&model.importance(train), &out.truth)))
        }
        BenchMethod::Anchor => {
            // switch to the l1-penalized variant once OLS on the full
            // predictor set stops being well-conditioned
            let model = cv_anchor_gamma(
                train,
                &default_gamma_grid(),
                train.d() > 50,
                CvCriterion::WorstCase,
                derive_seed(seed, 13),
            )?;
            let rss = test_rss(&model.predict(test.x())?, test)?;
            Ok((rss, importance_curves(&model.importance(train), &out.truth)))
        }
        BenchMethod::Iv => {
            let model = fit_iv(train, train.d() > 50, derive_seed(seed, 14))?;
            let rss = test_rss(&model.predict(test.x())?, test)?;
            Ok((rss, importance_curves(&model.importance(train), &out.truth)))
        }
    }
}

/// Run `n_reps` independent repetitions of a simulation design,
/// fitting every requested method on identical data per repetition.
/// Deterministic for a fixed seed regardless of thread count.
pub fn run_benchmark(
    design: &SimDesign,
    methods: &[BenchMethod],
    config: &SRConfig,
    n_reps: usize,
    rng_seed: u64,
) -> Result<BenchmarkResult> {
    if n_reps == 0 || methods.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one repetition and one method".to_string(),
        ));
    }
    let repetitions: Vec<Repetition> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let seed = derive_seed(rng_seed, rep as u64);
            let out = match design.kind {
                SimKind::Sim1 => gen_sim1(design, seed),
                SimKind::Sim2 => gen_sim2(design, seed),
                SimKind::Toy => gen_toy(false, &[2.0, -2.0], design.n_per_env, seed),
            }
            .expect("generator failure is a design bug");
            let outcomes = methods
                .iter()
                .map(|&m| match run_method(m, &out, config, seed) {
                    Ok((rss, curves)) => MethodOutcome {
                        method: m,
                        test_rss: Some(rss),
                        curves,
                        error: None,
                    },
                    Err(e) => MethodOutcome {
                        method: m,
                        test_rss: None,
                        curves: vec![],
                        error: Some(e.to_string()),
                    },
                })
                .collect();
            Repetition {
                seed,
                mb_equals_sb: out.truth.mb == out.truth.sb,
                outcomes,
            }
        })
        .collect();

    let aggregates = methods
        .iter()
        .map(|&m| {
            let mut rss: Vec<f64> = Vec::new();
            let mut n_failed = 0usize;
            let mut pauc_acc: std::collections::BTreeMap<RecoveryTarget, (f64, usize)> =
                Default::default();
            for rep in &repetitions {
                let o = rep.outcomes.iter().find(|o| o.method == m).unwrap();
                match o.test_rss {
                    Some(v) => rss.push(v),
                    None => n_failed += 1,
                }
                for c in &o.curves {
                    let e = pauc_acc.entry(c.target).or_insert((0.0, 0));
                    e.0 += c.pauc10;
                    e.1 += 1;
                }
            }
            rss.sort_by(|a, b| a.partial_cmp(b).unwrap());
            MethodAggregate {
                method: m,
                n_ok: rss.len(),
                n_failed,
                median_test_rss: quantile(&rss, 0.5),
                q25_test_rss: quantile(&rss, 0.25),
                q75_test_rss: quantile(&rss, 0.75),
                mean_pauc10: pauc_acc
                    .into_iter()
                    .map(|(t, (sum, k))| (t, sum / k as f64))
                    .collect(),
                flagged: n_failed * 10 > n_reps,
            }
        })
        .collect();

    Ok(BenchmarkResult {
        version: BENCH_DOC_VERSION.to_string(),
        design: design.clone(),
        methods: methods.to_vec(),
        n_reps,
        seed: rng_seed,
        repetitions,
        aggregates,
    })
}

/// Tidy per-repetition tables: `prediction.csv` rows
/// (method, stratum, rep, test_rss) and `recovery.csv` rows
/// (method, target, rep, pauc10).
pub fn report_tables(result: &BenchmarkResult) -> (String, String) {
    let mut pred = String::from("method,stratum,rep,test_rss\n");
    let mut reco = String::from("method,target,rep,pauc10\n");
    for (rep_idx, rep) in result.repetitions.iter().enumerate() {
        let stratum = if rep.mb_equals_sb { "mb_eq_sb" } else { "mb_ne_sb" };
        for o in &rep.outcomes {
            if let Some(rss) = o.test_rss {
                pred.push_str(&format!("{},{},{},{:?}\n", o.method.name(), stratum, rep_idx, rss));
            }
            for c in &o.curves {
                let target = match c.target {
                    RecoveryTarget::Mb => "mb",
                    RecoveryTarget::Sb => "sb",
                    RecoveryTarget::Nsb => "nsb",
                };
                reco.push_str(&format!(
                    "{},{},{},{:?}\n",
                    o.method.name(),
                    target,
                    rep_idx,
                    c.pauc10
                ));
            }
        }
    }
    (pred, reco)
}
